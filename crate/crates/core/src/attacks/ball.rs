use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Inf,
    L2,
}

impl Norm {
    /// Tag byte used in perturbation files.
    pub fn code(self) -> u8 {
        match self {
            Norm::Inf => 0,
            Norm::L2 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Norm::Inf),
            2 => Ok(Norm::L2),
            other => Err(Error::Format(format!("unknown norm code {other}"))),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::Inf => "inf",
            Norm::L2 => "2",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" | "linf" | "Inf" => Ok(Norm::Inf),
            "2" | "l2" | "L2" => Ok(Norm::L2),
            other => Err(Error::InvalidConfig(format!("unknown norm {other:?}"))),
        }
    }
}

/// `{ delta : ||delta||_p <= eps }`, with `eps` in `[0, 1]` pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBall {
    pub p: Norm,
    pub eps: f64,
}

impl NormBall {
    pub fn new(p: Norm, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "ball radius must be finite and non-negative, got {eps}"
            )));
        }
        Ok(Self { p, eps })
    }

    pub fn linf(eps: f64) -> Self {
        Self { p: Norm::Inf, eps }
    }

    pub fn l2(eps: f64) -> Self {
        Self { p: Norm::L2, eps }
    }

    pub fn norm_of<T: Element>(&self, delta: &Tensor<T>) -> f64 {
        match self.p {
            Norm::Inf => delta.norm_linf(),
            Norm::L2 => delta.norm_l2(),
        }
    }

    /// Membership with the `1e-9` slack used throughout the tests.
    pub fn contains<T: Element>(&self, delta: &Tensor<T>) -> bool {
        self.norm_of(delta) <= self.eps + 1e-9
    }
}

/// Euclidean projection onto the ball.
///
/// l-inf clamps each coordinate to `[-eps, eps]`; l2 rescales by
/// `eps / ||delta||_2` only when the norm exceeds `eps`.
pub fn project<T: Element>(delta: &Tensor<T>, ball: &NormBall) -> Tensor<T> {
    match ball.p {
        Norm::Inf => {
            let e = radius_below::<T>(ball.eps);
            delta.clamp(-e, e)
        }
        Norm::L2 => {
            let norm = delta.norm_l2();
            if norm > ball.eps {
                // f32 rounding can leave the rescaled norm a hair above eps
                let mut factor = ball.eps / norm;
                let mut out = delta.scale(T::of(factor));
                while out.norm_l2() > ball.eps && factor > 0.0 {
                    factor *= 1.0 - 1e-7;
                    out = delta.scale(T::of(factor));
                }
                out
            } else {
                delta.clone()
            }
        }
    }
}

/// Largest `T` not above `eps`; plain rounding can land one ulp outside.
fn radius_below<T: Element>(eps: f64) -> T {
    let mut e = T::of(eps);
    let mut scaled = eps;
    while e.as_f64() > eps {
        scaled *= 1.0 - 1e-8;
        e = T::of(scaled);
    }
    e
}
