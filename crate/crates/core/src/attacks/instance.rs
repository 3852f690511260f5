use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{loss_and_grad, ClippedLoss, Model, Want};
use crate::tensor::{sign, Tensor};

/// Gradient of the mean (unclipped) cross-entropy with respect to the batch.
pub fn input_gradient(model: &Model, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let out = loss_and_grad(model, x, labels, ClippedLoss::unclipped(), Want::INPUT)?;
    Ok(out.grads.input.expect("input gradient requested"))
}

/// One signed gradient step of size `eps`, clamped to the pixel domain.
pub fn fgsm(model: &Model, x: &Tensor, labels: &[usize], eps: f64) -> Result<Tensor> {
    let g = input_gradient(model, x, labels)?;
    let e = eps as f32;
    let stepped = x.zip_map(&g, |xi, gi| xi + e * sign(gi))?;
    Ok(model.pixel_domain().clamp(&stepped))
}

/// Random signed step of size `alpha`, then an FGSM step of size
/// `eps - alpha` from there. Requires `0 < alpha < eps`.
pub fn rfgsm<R: Rng + ?Sized>(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if !(alpha > 0.0 && alpha < eps) {
        return Err(Error::InvalidConfig(format!(
            "R-FGSM needs 0 < alpha < eps, got alpha={alpha}, eps={eps}"
        )));
    }
    let a = alpha as f32;
    let mut noisy = x.clone();
    for v in noisy.data_mut() {
        let n: f32 = StandardNormal.sample(rng);
        *v += a * sign(n);
    }
    let start = model.pixel_domain().clamp(&noisy);
    fgsm(model, &start, labels, eps - alpha)
}

/// Iterated sign-gradient ascent inside the l-inf ball around the clean batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub eps: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

impl PgdConfig {
    /// 20 steps of size 2/255 at eps = 8/255.
    pub fn white_box() -> Self {
        Self {
            eps: 8.0 / 255.0,
            steps: 20,
            step_size: 2.0 / 255.0,
            random_start: true,
        }
    }
}

/// `x <- clamp(Pi_ball(x + step * sign(grad)))`, optionally from a uniform
/// random start inside the ball.
pub fn pgd<R: Rng + ?Sized>(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &PgdConfig,
    rng: &mut R,
) -> Result<Tensor> {
    if cfg.steps == 0 {
        return Err(Error::InvalidConfig("PGD needs at least one step".into()));
    }
    let e = cfg.eps as f32;
    let step = cfg.step_size as f32;
    let domain = model.pixel_domain();
    let lower = x.map(|v| v - e);
    let upper = x.map(|v| v + e);
    let project = |adv: &Tensor| -> Tensor {
        let mut out = adv.clone();
        for ((v, &lo), &hi) in out.data_mut().iter_mut().zip(lower.data()).zip(upper.data()) {
            *v = v.max(lo).min(hi);
        }
        domain.clamp(&out)
    };
    let mut adv = if cfg.random_start && cfg.eps > 0.0 {
        let mut start = x.clone();
        for v in start.data_mut() {
            *v += rng.random_range(-e..=e);
        }
        project(&start)
    } else {
        x.clone()
    };
    for _ in 0..cfg.steps {
        let g = input_gradient(model, &adv, labels)?;
        let stepped = adv.zip_map(&g, |a, gi| a + step * sign(gi))?;
        adv = project(&stepped);
    }
    Ok(adv)
}
