//! Training loops: natural, per-instance adversarial, and universal
//! adversarial training with alternating or simultaneous updates.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{fgsm, pgd, rfgsm, universal_gradient, NormBall, PerturbationState, PgdConfig};
use crate::data::{BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, loss_and_grad, ClippedLoss, Model, Want};
use crate::optim::{Direction, OptimizerState, UpdateRule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Natural,
    AdvFgsm,
    AdvRfgsm,
    AdvPgd,
    UniversalAlt,
    UniversalSim,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] = [
        TrainMode::Natural,
        TrainMode::AdvFgsm,
        TrainMode::AdvRfgsm,
        TrainMode::AdvPgd,
        TrainMode::UniversalAlt,
        TrainMode::UniversalSim,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Natural => "natural",
            TrainMode::AdvFgsm => "adv_fgsm",
            TrainMode::AdvRfgsm => "adv_rfgsm",
            TrainMode::AdvPgd => "adv_pgd",
            TrainMode::UniversalAlt => "universal_alt",
            TrainMode::UniversalSim => "universal_sim",
        }
    }

    pub fn is_universal(self) -> bool {
        matches!(self, TrainMode::UniversalAlt | TrainMode::UniversalSim)
    }

    pub fn is_per_instance(self) -> bool {
        matches!(self, TrainMode::AdvFgsm | TrainMode::AdvRfgsm | TrainMode::AdvPgd)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown training mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    /// Piecewise-constant `(first step, lr)` pairs, starting at step 0.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Perturbation rule in the universal modes. The sign rule steps by
    /// exactly `ball.eps`; other rules use `delta_lr`.
    pub delta_rule: UpdateRule,
    pub delta_lr: f64,
    pub ball: NormBall,
    pub pgd_steps: usize,
    /// R-FGSM random step; defaults to half the budget when unset.
    pub rfgsm_alpha: Option<f64>,
    #[serde(with = "crate::serde_inf")]
    pub beta: f64,
    pub clamp_inputs: bool,
    /// Measure minibatch accuracy after each ascent in the simultaneous mode.
    /// Costs one extra forward pass per step; the alternating mode always
    /// measures it.
    pub probe_after_ascent: bool,
}

impl Default for TrainConfig {
    /// MNIST desk-scale recipe: 6000 steps of batch 128, lr 0.05 dropping to
    /// 0.005 at step 4000, momentum 0.9.
    fn default() -> Self {
        Self {
            total_steps: 6000,
            batch_size: 128,
            lr_schedule: vec![(0, 0.05), (4000, 0.005)],
            momentum: 0.9,
            seed: 0,
            mode: TrainMode::Natural,
            delta_rule: UpdateRule::Sign,
            delta_lr: 1.0 / 255.0,
            ball: NormBall::linf(76.5 / 255.0),
            pgd_steps: 7,
            rfgsm_alpha: None,
            beta: f64::INFINITY,
            clamp_inputs: true,
            probe_after_ascent: false,
        }
    }
}

impl TrainConfig {
    /// CIFAR small-net recipe: 20000 steps, lr 0.1 dropping to 0.01 at 10000,
    /// eps 8/255.
    pub fn cifar() -> Self {
        Self {
            total_steps: 20_000,
            lr_schedule: vec![(0, 0.1), (10_000, 0.01)],
            ball: NormBall::linf(8.0 / 255.0),
            delta_lr: 1.0 / 255.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        match self.lr_schedule.first() {
            Some(&(0, _)) => {}
            _ => {
                return Err(Error::InvalidConfig(
                    "lr schedule must start at step 0".into(),
                ))
            }
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidConfig(
                "lr schedule steps must be strictly increasing".into(),
            ));
        }
        if let Some(&(_, lr)) = self.lr_schedule.iter().find(|(_, lr)| !(*lr >= 0.0) || !lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("invalid learning rate {lr}")));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        NormBall::new(self.ball.p, self.ball.eps)?;
        ClippedLoss::new(self.beta)?;
        if self.mode.is_universal() && self.delta_rule == UpdateRule::MomentumSgd {
            return Err(Error::InvalidConfig(
                "delta rule must be one of sign, sgd, adam".into(),
            ));
        }
        if self.mode == TrainMode::AdvPgd && self.pgd_steps == 0 {
            return Err(Error::InvalidConfig("pgd steps must be at least 1".into()));
        }
        if let Some(alpha) = self.rfgsm_alpha {
            if self.ball.eps > 0.0 && !(alpha > 0.0 && alpha < self.ball.eps) {
                return Err(Error::InvalidConfig(format!(
                    "rfgsm alpha must lie in (0, eps), got {alpha}"
                )));
            }
        }
        Ok(())
    }

    /// Learning rate in force at `step`: the last schedule entry at or before it.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|(s, _)| *s <= step)
            .last()
            .map_or(0.0, |&(_, lr)| lr)
    }

    /// Steps after which a checkpoint is due: every later schedule boundary
    /// inside the run, and the end.
    pub fn checkpoint_steps(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .lr_schedule
            .iter()
            .map(|&(s, _)| s)
            .filter(|&s| s > 0 && s < self.total_steps)
            .collect();
        out.push(self.total_steps);
        out
    }

    pub fn clip(&self) -> ClippedLoss {
        ClippedLoss { beta: self.beta }
    }
}

/// One training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Minibatch accuracy at the training point (clean, adversarial or
    /// perturbed by the current delta).
    pub acc_before: f64,
    /// Minibatch accuracy just after the delta ascent (universal modes).
    pub acc_after: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
}

impl TrainTrace {
    /// Mean of `acc_before - acc_after` over steps that measured both.
    pub fn mean_ascent_gap(&self) -> Option<f64> {
        let gaps: Vec<f64> = self
            .steps
            .iter()
            .filter_map(|r| r.acc_after.map(|a| r.acc_before - a))
            .collect();
        (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "lr", "loss", "acc_before", "acc_after"])?;
        for r in &self.steps {
            out.write_record([
                r.step.to_string(),
                r.lr.to_string(),
                r.loss.to_string(),
                r.acc_before.to_string(),
                r.acc_after.map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("trace csv", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Final perturbation in the universal modes.
    pub delta: Option<PerturbationState>,
    pub trace: TrainTrace,
    pub wall_clock_s: f64,
}

/// Called after step `n` for every `n` in `TrainConfig::checkpoint_steps`.
pub type CheckpointHook<'a> = dyn FnMut(usize, &Model, Option<&PerturbationState>) -> Result<()> + 'a;

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

struct WeightStep {
    opts: Vec<OptimizerState>,
}

impl WeightStep {
    fn new(model: &Model, cfg: &TrainConfig) -> Result<Self> {
        let opts = model
            .params()
            .iter()
            .map(|p| OptimizerState::new(UpdateRule::MomentumSgd, cfg.lr_at(0), cfg.momentum, p.shape()))
            .collect::<Result<_>>()?;
        Ok(Self { opts })
    }

    fn apply(&mut self, model: &mut Model, grads: &[Tensor], lr: f64) -> Result<()> {
        for ((p, g), opt) in model.params_mut().iter_mut().zip(grads).zip(&mut self.opts) {
            opt.set_lr(lr);
            opt.apply(p, g, Direction::Descent)?;
        }
        Ok(())
    }
}

fn perturbed(model: &Model, x: &Tensor, delta: &Tensor, clamp: bool) -> Result<Tensor> {
    let shifted = x.add_broadcast0(delta)?;
    Ok(if clamp {
        model.pixel_domain().clamp(&shifted)
    } else {
        shifted
    })
}

fn check_loss(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("training loss at step {step}")))
    }
}

/// Runs `cfg.mode` from `model`, calling `hook` at checkpoint steps.
pub fn train(model: Model, ds: &Dataset, cfg: &TrainConfig, hook: &mut CheckpointHook<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.image_shape() != model.input_shape() {
        return Err(Error::ShapeMismatch {
            context: "dataset images vs model input".into(),
            expected: model.input_shape().to_vec(),
            actual: ds.image_shape().to_vec(),
        });
    }
    let start = Instant::now();
    let mut model = model;
    let mut weights = WeightStep::new(&model, cfg)?;
    let mut trace = TrainTrace::default();
    let mut delta = if cfg.mode.is_universal() {
        let lr = match cfg.delta_rule {
            UpdateRule::Sign => cfg.ball.eps,
            _ => cfg.delta_lr,
        };
        Some(PerturbationState::new(model.input_shape(), cfg.ball, cfg.delta_rule, lr, 0.0)?)
    } else {
        None
    };
    let mut attack_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a77a_c4);
    let checkpoints = cfg.checkpoint_steps();
    let per_epoch = ds.len().div_ceil(cfg.batch_size).max(1);
    let plan = BatchPlan {
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        shuffle: true,
        epochs: cfg.total_steps.div_ceil(per_epoch).max(1),
    };
    let clip = cfg.clip();
    let mut batches = ds.batches(&plan);
    for step in 0..cfg.total_steps {
        let batch = batches.next().expect("enough epochs planned");
        let lr = cfg.lr_at(step);
        let (x, labels) = (&batch.x, batch.labels.as_slice());
        let record = match cfg.mode {
            TrainMode::Natural => {
                let out = loss_and_grad(&model, x, labels, clip, Want::PARAMS)?;
                check_loss(out.loss.mean, step)?;
                weights.apply(&mut model, out.grads.params.as_deref().expect("params"), lr)?;
                StepRecord {
                    step,
                    lr,
                    loss: out.loss.mean,
                    acc_before: accuracy(&out.logits, labels),
                    acc_after: None,
                }
            }
            TrainMode::AdvFgsm | TrainMode::AdvRfgsm | TrainMode::AdvPgd => {
                let adv = per_instance_batch(&model, x, labels, cfg, &mut attack_rng)?;
                let out = loss_and_grad(&model, &adv, labels, clip, Want::PARAMS)?;
                check_loss(out.loss.mean, step)?;
                weights.apply(&mut model, out.grads.params.as_deref().expect("params"), lr)?;
                StepRecord {
                    step,
                    lr,
                    loss: out.loss.mean,
                    acc_before: accuracy(&out.logits, labels),
                    acc_after: None,
                }
            }
            TrainMode::UniversalAlt => {
                let state = delta.as_mut().expect("universal state");
                let input = perturbed(&model, x, state.delta(), cfg.clamp_inputs)?;
                let out = loss_and_grad(&model, &input, labels, clip, Want::PARAMS)?;
                check_loss(out.loss.mean, step)?;
                weights.apply(&mut model, out.grads.params.as_deref().expect("params"), lr)?;
                let (probe, grad) =
                    universal_gradient(&model, x, labels, state.delta(), clip, cfg.clamp_inputs, Want::INPUT)?;
                state.ascend(&grad)?;
                let after = model.forward(&perturbed(&model, x, state.delta(), cfg.clamp_inputs)?)?;
                StepRecord {
                    step,
                    lr,
                    loss: out.loss.mean,
                    acc_before: accuracy(&probe.logits, labels),
                    acc_after: Some(accuracy(&after, labels)),
                }
            }
            TrainMode::UniversalSim => {
                let state = delta.as_mut().expect("universal state");
                let (out, grad) =
                    universal_gradient(&model, x, labels, state.delta(), clip, cfg.clamp_inputs, Want::BOTH)?;
                check_loss(out.loss.mean, step)?;
                weights.apply(&mut model, out.grads.params.as_deref().expect("params"), lr)?;
                state.ascend(&grad)?;
                let acc_after = if cfg.probe_after_ascent {
                    let after = model.forward(&perturbed(&model, x, state.delta(), cfg.clamp_inputs)?)?;
                    Some(accuracy(&after, labels))
                } else {
                    None
                };
                StepRecord {
                    step,
                    lr,
                    loss: out.loss.mean,
                    acc_before: accuracy(&out.logits, labels),
                    acc_after,
                }
            }
        };
        trace.steps.push(record);
        if checkpoints.contains(&(step + 1)) {
            hook(step + 1, &model, delta.as_ref())?;
        }
    }
    if cfg.total_steps == 0 {
        hook(0, &model, delta.as_ref())?;
    }
    Ok(TrainOutcome {
        model,
        delta,
        trace,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Per-instance adversarial batch; a zero budget returns the clean batch.
fn per_instance_batch(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let eps = cfg.ball.eps;
    if eps == 0.0 {
        return Ok(x.clone());
    }
    match cfg.mode {
        TrainMode::AdvFgsm => fgsm(model, x, labels, eps),
        TrainMode::AdvRfgsm => rfgsm(model, x, labels, eps, cfg.rfgsm_alpha.unwrap_or(eps / 2.0), rng),
        TrainMode::AdvPgd => {
            let pgd_cfg = PgdConfig {
                eps,
                steps: cfg.pgd_steps,
                step_size: 2.5 * eps / cfg.pgd_steps as f64,
                random_start: true,
            };
            pgd(model, x, labels, &pgd_cfg, rng)
        }
        _ => unreachable!("not a per-instance mode"),
    }
}

fn require_mode(cfg: &TrainConfig, allowed: &[TrainMode]) -> Result<()> {
    if allowed.contains(&cfg.mode) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "mode {} is not valid here, expected one of {:?}",
            cfg.mode,
            allowed.iter().map(|m| m.as_str()).collect::<Vec<_>>()
        )))
    }
}

/// Momentum SGD on clean minibatches.
pub fn train_natural(model: Model, ds: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainTrace)> {
    require_mode(cfg, &[TrainMode::Natural])?;
    let out = train(model, ds, cfg, &mut |_, _, _| Ok(()))?;
    Ok((out.model, out.trace))
}

/// One weight step per minibatch on FGSM, R-FGSM or PGD examples.
pub fn train_adv_instance(model: Model, ds: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainTrace)> {
    require_mode(cfg, &[TrainMode::AdvFgsm, TrainMode::AdvRfgsm, TrainMode::AdvPgd])?;
    let out = train(model, ds, cfg, &mut |_, _, _| Ok(()))?;
    Ok((out.model, out.trace))
}

/// Weight step at `x + delta`, then a fresh delta gradient at the updated
/// weights and one ascent step with projection.
pub fn train_universal_alternating(
    model: Model,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model, PerturbationState, TrainTrace)> {
    require_mode(cfg, &[TrainMode::UniversalAlt])?;
    let out = train(model, ds, cfg, &mut |_, _, _| Ok(()))?;
    Ok((out.model, out.delta.expect("universal state"), out.trace))
}

/// Weight and delta updates from one shared backward pass.
pub fn train_universal_simultaneous(
    model: Model,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model, PerturbationState, TrainTrace)> {
    require_mode(cfg, &[TrainMode::UniversalSim])?;
    let out = train(model, ds, cfg, &mut |_, _, _| Ok(()))?;
    Ok((out.model, out.delta.expect("universal state"), out.trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_lookup() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.05);
        assert_eq!(cfg.lr_at(3999), 0.05);
        assert_eq!(cfg.lr_at(4000), 0.005);
        assert_eq!(cfg.lr_at(10_000), 0.005);
        assert_eq!(cfg.checkpoint_steps(), vec![4000, 6000]);
    }

    #[test]
    fn schedule_must_increase_from_zero() {
        let mut cfg = TrainConfig {
            lr_schedule: vec![(1, 0.1)],
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.lr_schedule = vec![(0, 0.1), (5, 0.01), (5, 0.001)];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TrainMode::ALL {
            assert_eq!(m.as_str().parse::<TrainMode>().unwrap(), m);
        }
    }

    #[test]
    fn trace_csv_has_fixed_columns() {
        let trace = TrainTrace {
            steps: vec![StepRecord {
                step: 0,
                lr: 0.05,
                loss: 2.3,
                acc_before: 0.5,
                acc_after: None,
            }],
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "step,lr,loss,acc_before,acc_after\n0,0.05,2.3,0.5,\n");
    }
}
