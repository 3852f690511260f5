use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::ball::{project, NormBall};
use super::deepfool::deepfool;
use crate::data::{BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, loss_and_grad, ClippedLoss, LossAndGrad, Model, PixelDomain, Want};
use crate::optim::{Direction, OptimizerState, UpdateRule};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 1000;

/// A universal perturbation together with its ball and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationState {
    delta: Tensor,
    ball: NormBall,
    opt: OptimizerState,
}

impl PerturbationState {
    /// Zero perturbation of the given `(C, H, W)` shape.
    pub fn new(
        shape: &[usize],
        ball: NormBall,
        rule: UpdateRule,
        lr: f64,
        momentum: f64,
    ) -> Result<Self> {
        let ball = NormBall::new(ball.p, ball.eps)?;
        Ok(Self {
            delta: Tensor::zeros(shape),
            ball,
            opt: OptimizerState::new(rule, lr, momentum, shape)?,
        })
    }

    /// Wraps an existing perturbation, projecting it into the ball.
    pub fn from_delta(delta: Tensor, ball: NormBall) -> Result<Self> {
        let ball = NormBall::new(ball.p, ball.eps)?;
        let opt = OptimizerState::new(UpdateRule::Sgd, 1.0, 0.0, delta.shape())?;
        Ok(Self {
            delta: project(&delta, &ball),
            ball,
            opt,
        })
    }

    pub fn delta(&self) -> &Tensor {
        &self.delta
    }

    pub fn into_delta(self) -> Tensor {
        self.delta
    }

    pub fn ball(&self) -> &NormBall {
        &self.ball
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt.set_lr(lr);
    }

    /// One ascent step with the configured rule, then projection.
    pub fn ascend(&mut self, grad: &Tensor) -> Result<()> {
        self.opt.apply(&mut self.delta, grad, Direction::Ascent)?;
        self.delta = project(&self.delta, &self.ball);
        Ok(())
    }

    /// `delta <- project(delta + r)`.
    pub fn accumulate(&mut self, r: &Tensor) -> Result<()> {
        self.delta = project(&self.delta.add(r)?, &self.ball);
        Ok(())
    }
}

/// Settings for universal perturbation by stochastic gradient ascent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniversalAttackConfig {
    pub ball: NormBall,
    pub rule: UpdateRule,
    pub lr: f64,
    /// Only used by `momentum_sgd`.
    pub momentum: f64,
    #[serde(with = "crate::serde_inf")]
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clamp_inputs: bool,
}

impl Default for UniversalAttackConfig {
    /// MNIST settings: sign rule with step 1/255 inside the l-inf ball of
    /// radius 76.5/255, `beta = 9`, 10 epochs of batch 128.
    fn default() -> Self {
        Self {
            ball: NormBall::linf(76.5 / 255.0),
            rule: UpdateRule::Sign,
            lr: 1.0 / 255.0,
            momentum: 0.9,
            beta: ClippedLoss::DEFAULT_BETA,
            epochs: 10,
            batch_size: 128,
            seed: 0,
            clamp_inputs: true,
        }
    }
}

impl UniversalAttackConfig {
    pub fn validate(&self) -> Result<()> {
        NormBall::new(self.ball.p, self.ball.eps)?;
        ClippedLoss::new(self.beta)?;
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "step size must be finite and non-negative, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn clip(&self) -> ClippedLoss {
        ClippedLoss { beta: self.beta }
    }
}

/// One minibatch of a universal attack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackStep {
    pub iteration: usize,
    pub epoch: usize,
    /// Accuracy on the minibatch at the perturbation used for this step.
    pub batch_accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct UniversalOutcome {
    pub state: PerturbationState,
    pub trace: Vec<AttackStep>,
    pub wall_clock_s: f64,
}

fn perturb(x: &Tensor, delta: &Tensor, domain: Option<PixelDomain>) -> Result<Tensor> {
    let shifted = x.add_broadcast0(delta)?;
    Ok(match domain {
        Some(d) => d.clamp(&shifted),
        None => shifted,
    })
}

/// Clipped loss and gradients at `x + delta`, plus the gradient with respect
/// to the shared `delta`.
///
/// The delta gradient is the sum over the batch of the input gradients of
/// the mean loss, i.e. the mean of per-example gradients. With
/// `clamp_inputs`, coordinates pushed outside the pixel domain get zero
/// gradient.
pub fn universal_gradient(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    delta: &Tensor,
    clip: ClippedLoss,
    clamp_inputs: bool,
    want: Want,
) -> Result<(LossAndGrad, Tensor)> {
    let shifted = x.add_broadcast0(delta)?;
    let domain = model.pixel_domain();
    let input = if clamp_inputs {
        domain.clamp(&shifted)
    } else {
        shifted.clone()
    };
    let want = Want {
        input: true,
        ..want
    };
    let out = loss_and_grad(model, &input, labels, clip, want)?;
    let gx = out.grads.input.as_ref().expect("input gradient requested");
    let grad_delta = if clamp_inputs {
        let (lo, hi) = (domain.lo as f32, domain.hi as f32);
        gx.zip_map(&shifted, |g, s| if s < lo || s > hi { 0.0 } else { g })?
            .sum_axis0()
    } else {
        gx.sum_axis0()
    };
    Ok((out, grad_delta))
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Stochastic gradient ascent on the clipped loss over a shared perturbation.
pub fn universal_attack(
    model: &Model,
    ds: &Dataset,
    cfg: &UniversalAttackConfig,
) -> Result<UniversalOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut state = PerturbationState::new(ds.image_shape(), cfg.ball, cfg.rule, cfg.lr, cfg.momentum)?;
    let plan = BatchPlan {
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        shuffle: true,
        epochs: cfg.epochs,
    };
    let mut trace = Vec::new();
    for (iteration, batch) in ds.batches(&plan).enumerate() {
        let (out, grad) = universal_gradient(
            model,
            &batch.x,
            &batch.labels,
            state.delta(),
            cfg.clip(),
            cfg.clamp_inputs,
            Want::INPUT,
        )?;
        trace.push(AttackStep {
            iteration,
            epoch: batch.epoch,
            batch_accuracy: accuracy(&argmax_rows(&out.logits), &batch.labels),
            loss: out.loss.mean,
        });
        state.ascend(&grad)?;
        state.delta().check_finite("perturbation")?;
    }
    Ok(UniversalOutcome {
        state,
        trace,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Predictions on `images`, optionally shifted by a shared perturbation.
pub fn perturbed_predictions(
    model: &Model,
    images: &Tensor,
    delta: Option<&Tensor>,
    clamp_inputs: bool,
) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let domain = clamp_inputs.then(|| model.pixel_domain());
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let chunk = images.gather_axis0(&idx);
        let chunk = match delta {
            Some(d) => perturb(&chunk, d, domain)?,
            None => chunk,
        };
        out.extend(model.predict(&chunk)?);
        start = end;
    }
    Ok(out)
}

/// Fraction of examples whose predicted label changes under `delta`,
/// measured against the model's own clean predictions.
pub fn fooling_ratio(model: &Model, ds: &Dataset, delta: &Tensor, clamp_inputs: bool) -> Result<f64> {
    let clean = perturbed_predictions(model, ds.images(), None, clamp_inputs)?;
    let adv = perturbed_predictions(model, ds.images(), Some(delta), clamp_inputs)?;
    Ok(changed_fraction(&clean, &adv))
}

fn changed_fraction(clean: &[usize], adv: &[usize]) -> f64 {
    let changed = clean.iter().zip(adv).filter(|(a, b)| a != b).count();
    changed as f64 / clean.len().max(1) as f64
}

/// Settings for the iterative DeepFool universal solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IDeepFoolConfig {
    pub ball: NormBall,
    /// Stop once the fooling ratio reaches `1 - xi`.
    pub xi: f64,
    pub max_outer_passes: usize,
    pub deepfool_max_iter: usize,
    pub overshoot: f64,
    pub clamp_inputs: bool,
}

impl Default for IDeepFoolConfig {
    fn default() -> Self {
        Self {
            ball: NormBall::linf(76.5 / 255.0),
            xi: 0.2,
            max_outer_passes: 10,
            deepfool_max_iter: 50,
            overshoot: 0.02,
            clamp_inputs: true,
        }
    }
}

impl IDeepFoolConfig {
    pub fn validate(&self) -> Result<()> {
        NormBall::new(self.ball.p, self.ball.eps)?;
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return Err(Error::InvalidConfig(format!("xi must lie in (0, 1), got {}", self.xi)));
        }
        if self.max_outer_passes == 0 || self.deepfool_max_iter == 0 {
            return Err(Error::InvalidConfig(
                "pass and iteration limits must be at least 1".into(),
            ));
        }
        if !(self.overshoot >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "overshoot must be non-negative, got {}",
                self.overshoot
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IDeepFoolOutcome {
    pub state: PerturbationState,
    /// Fooling ratio after each completed pass.
    pub fooling_trace: Vec<f64>,
    pub passes: usize,
    pub deepfool_calls: usize,
    pub wall_clock_s: f64,
}

/// Iterative universal perturbation built from per-example DeepFool steps.
///
/// Examples still classified as at `delta = 0` get a DeepFool step from
/// `x + delta`; successful steps are added to `delta` and projected. The
/// fooling ratio is recomputed between passes only.
pub fn ideepfool_universal(
    model: &Model,
    ds: &Dataset,
    cfg: &IDeepFoolConfig,
) -> Result<IDeepFoolOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut state = PerturbationState::from_delta(Tensor::zeros(ds.image_shape()), cfg.ball)?;
    let domain = cfg.clamp_inputs.then(|| model.pixel_domain());
    let clean = perturbed_predictions(model, ds.images(), None, cfg.clamp_inputs)?;
    let mut single_shape = vec![1];
    single_shape.extend_from_slice(ds.image_shape());
    let mut fooling_trace = Vec::new();
    let mut fooling = 0.0;
    let mut passes = 0;
    let mut deepfool_calls = 0;
    while fooling < 1.0 - cfg.xi && passes < cfg.max_outer_passes {
        for (i, &clean_label) in clean.iter().enumerate() {
            let x = ds.images().index_axis0(i);
            let shifted = x.add(state.delta())?;
            let point = match domain {
                Some(d) => d.clamp(&shifted),
                None => shifted,
            };
            let pred = model.predict(&point.clone().reshape(&single_shape)?)?[0];
            if pred != clean_label {
                continue;
            }
            deepfool_calls += 1;
            let df = deepfool(model, &point, cfg.deepfool_max_iter, cfg.overshoot)?;
            if df.fooled {
                state.accumulate(&df.r)?;
            }
        }
        passes += 1;
        let adv = perturbed_predictions(model, ds.images(), Some(state.delta()), cfg.clamp_inputs)?;
        fooling = changed_fraction(&clean, &adv);
        fooling_trace.push(fooling);
    }
    Ok(IDeepFoolOutcome {
        state,
        fooling_trace,
        passes,
        deepfool_calls,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}
