//! First-order update rules shared by weight training and perturbation ascent.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sign, Element, Tensor};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    Sgd,
    MomentumSgd,
    Adam,
    Sign,
}

impl UpdateRule {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateRule::Sgd => "sgd",
            UpdateRule::MomentumSgd => "momentum_sgd",
            UpdateRule::Adam => "adam",
            UpdateRule::Sign => "sign",
        }
    }
}

impl fmt::Display for UpdateRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UpdateRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(UpdateRule::Sgd),
            "momentum_sgd" | "msgd" => Ok(UpdateRule::MomentumSgd),
            "adam" => Ok(UpdateRule::Adam),
            "sign" | "pgd" | "fgsm" => Ok(UpdateRule::Sign),
            other => Err(Error::InvalidConfig(format!("unknown update rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

/// Optimizer state for one variable.
///
/// * `Sgd`: `v <- v -/+ lr * g`
/// * `MomentumSgd` (descent): `buf <- mu * buf - g; v <- v + lr * buf`, with
///   `+ g` in the buffer for ascent.
/// * `Sign`: `v <- v -/+ lr * sign(g)` with `sign(0) = 0`.
/// * `Adam`: bias-corrected moments with `(0.9, 0.999, 1e-8)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Element = f32> {
    rule: UpdateRule,
    lr: f64,
    momentum: f64,
    shape: Vec<usize>,
    velocity: Option<Tensor<T>>,
    first_moment: Option<Tensor<T>>,
    second_moment: Option<Tensor<T>>,
    step: u64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(rule: UpdateRule, lr: f64, momentum: f64, shape: &[usize]) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and non-negative, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        let zeros = || Some(Tensor::zeros(shape));
        let (velocity, first_moment, second_moment) = match rule {
            UpdateRule::MomentumSgd => (zeros(), None, None),
            UpdateRule::Adam => (None, zeros(), zeros()),
            UpdateRule::Sgd | UpdateRule::Sign => (None, None, None),
        };
        Ok(Self {
            rule,
            lr,
            momentum,
            shape: shape.to_vec(),
            velocity,
            first_moment,
            second_moment,
            step: 0,
        })
    }

    pub fn rule(&self) -> UpdateRule {
        self.rule
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn velocity(&self) -> Option<&Tensor<T>> {
        self.velocity.as_ref()
    }

    /// Applies one update to `variable` in place.
    pub fn apply(&mut self, variable: &mut Tensor<T>, grad: &Tensor<T>, dir: Direction) -> Result<()> {
        variable.expect_shape(&self.shape, "optimizer variable")?;
        grad.expect_shape(&self.shape, "optimizer gradient")?;
        let lr = T::of(self.lr);
        let dir_sign = match dir {
            Direction::Descent => -T::one(),
            Direction::Ascent => T::one(),
        };
        let v = variable.data_mut();
        let g = grad.data();
        self.step += 1;
        match self.rule {
            UpdateRule::Sgd => {
                for (v, &g) in v.iter_mut().zip(g) {
                    *v += dir_sign * lr * g;
                }
            }
            UpdateRule::Sign => {
                for (v, &g) in v.iter_mut().zip(g) {
                    *v += dir_sign * lr * sign(g);
                }
            }
            UpdateRule::MomentumSgd => {
                let mu = T::of(self.momentum);
                let buf = self.velocity.as_mut().expect("momentum buffer").data_mut();
                for ((v, b), &g) in v.iter_mut().zip(buf.iter_mut()).zip(g) {
                    *b = mu * *b + dir_sign * g;
                    *v += lr * *b;
                }
            }
            UpdateRule::Adam => {
                let m = self.first_moment.as_mut().expect("adam moment").data_mut();
                let s = self.second_moment.as_mut().expect("adam moment").data_mut();
                let b1 = T::of(ADAM_BETA1);
                let b2 = T::of(ADAM_BETA2);
                let one = T::one();
                let t = self.step as i32;
                let c1 = T::of(1.0 - ADAM_BETA1.powi(t));
                let c2 = T::of(1.0 - ADAM_BETA2.powi(t));
                let eps = T::of(ADAM_EPS);
                for (((v, m), s), &g) in v.iter_mut().zip(m.iter_mut()).zip(s.iter_mut()).zip(g) {
                    *m = b1 * *m + (one - b1) * g;
                    *s = b2 * *s + (one - b2) * g * g;
                    let m_hat = *m / c1;
                    let s_hat = *s / c2;
                    *v += dir_sign * lr * m_hat / (s_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Returns the updated variable, leaving the input untouched.
pub fn apply_update<T: Element>(
    variable: &Tensor<T>,
    grad: &Tensor<T>,
    state: &mut OptimizerState<T>,
    dir: Direction,
) -> Result<Tensor<T>> {
    let mut out = variable.clone();
    state.apply(&mut out, grad, dir)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn sgd_ascent_adds_gradient() {
        let mut st = OptimizerState::new(UpdateRule::Sgd, 1.0, 0.0, &[2]).unwrap();
        let out = apply_update(&t(&[0.5, 0.5]), &t(&[1.0, -2.0]), &mut st, Direction::Ascent).unwrap();
        assert_eq!(out.data(), &[1.5, -1.5]);
    }

    #[test]
    fn sign_step_leaves_zero_gradient_coordinates() {
        let eps = 10.0 / 255.0;
        let mut st = OptimizerState::new(UpdateRule::Sign, eps, 0.0, &[3]).unwrap();
        let out = apply_update(&t(&[0.0; 3]), &t(&[0.3, -0.7, 0.0]), &mut st, Direction::Ascent).unwrap();
        assert_eq!(out.data(), &[eps, -eps, 0.0]);
    }

    #[test]
    fn momentum_unrolls_to_one_plus_one_point_nine() {
        let tau = 0.1;
        let g = t(&[1.0, -3.0]);
        let mut st = OptimizerState::new(UpdateRule::MomentumSgd, tau, 0.9, &[2]).unwrap();
        let mut v = t(&[0.0, 0.0]);
        st.apply(&mut v, &g, Direction::Ascent).unwrap();
        st.apply(&mut v, &g, Direction::Ascent).unwrap();
        for (got, gi) in v.data().iter().zip(g.data()) {
            assert!((got - tau * 2.9 * gi).abs() < 1e-12);
        }
        // descent is the mirror image
        let mut st = OptimizerState::new(UpdateRule::MomentumSgd, tau, 0.9, &[2]).unwrap();
        let mut w = t(&[0.0, 0.0]);
        st.apply(&mut w, &g, Direction::Descent).unwrap();
        st.apply(&mut w, &g, Direction::Descent).unwrap();
        for (got, gi) in w.data().iter().zip(g.data()) {
            assert!((got + tau * 2.9 * gi).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut st = OptimizerState::new(UpdateRule::Adam, 0.01, 0.0, &[2]).unwrap();
        let mut v = t(&[0.0, 0.0]);
        st.apply(&mut v, &t(&[4.0, -0.5]), Direction::Descent).unwrap();
        assert!((v.data()[0] + 0.01).abs() < 1e-9);
        assert!((v.data()[1] - 0.01).abs() < 1e-9);
        assert_eq!(st.step(), 1);
        st.apply(&mut v, &t(&[4.0, -0.5]), Direction::Descent).unwrap();
        assert_eq!(st.step(), 2);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut st = OptimizerState::<f64>::new(UpdateRule::Sgd, 1.0, 0.0, &[2]).unwrap();
        let mut v = t(&[0.0; 3]);
        assert!(st.apply(&mut v, &t(&[0.0; 3]), Direction::Ascent).is_err());
    }
}
