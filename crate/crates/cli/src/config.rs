//! The resolved, serializable form of an invocation. It is echoed into the
//! output directory and is enough to replay the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unip_core::attacks::{IDeepFoolConfig, NormBall, PgdConfig, UniversalAttackConfig};
use unip_core::eval::InstanceAttack;
use unip_core::nn::Arch;
use unip_core::optim::UpdateRule;
use unip_core::training::{TrainConfig, TrainMode};

use crate::args::{
    ArchArg, AttackArgs, CommonArgs, DatasetArg, DeepFoolArgs, EvalArgs, EvalAttackArg, ExportArgs, MethodArg,
    ModeArg, NormArg, RuleArg, SweepArgs, SweepParamArg, TrainArgs, UniversalArgs,
};
use crate::error::{CliError, Result};

pub const ECHO_FILE: &str = "config.echo";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub dataset: DatasetKind,
    pub root: PathBuf,
    pub arch: Arch,
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    Checkpoint { path: PathBuf },
    TrainNatural { train: TrainConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackMethod {
    Universal { config: UniversalAttackConfig },
    Ideepfool { config: IDeepFoolConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalThreat {
    Clean,
    Universal { perturbation: PathBuf, clamp_inputs: bool },
    Instance { attack: InstanceAttack },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Beta,
    NSamples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
pub enum CommandConfig {
    Train {
        train: TrainConfig,
    },
    Attack {
        model: ModelSource,
        n: usize,
        subset_seed: u64,
        method: AttackMethod,
    },
    Eval {
        checkpoints: Vec<PathBuf>,
        threat: EvalThreat,
        seed: u64,
    },
    Sweep {
        model: ModelSource,
        parameter: SweepParameter,
        #[serde(with = "inf_list")]
        values: Vec<f64>,
        seeds: Vec<u64>,
        n: usize,
        base: UniversalAttackConfig,
    },
    Export {
        perturbation: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub out: PathBuf,
    pub deterministic: bool,
    pub data: Option<DataSpec>,
    pub command: CommandConfig,
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run configs serialize")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

mod inf_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Value {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|&x| if x.is_infinite() { Value::Text("inf".into()) } else { Value::Num(x) })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Value>::deserialize(d)?
            .into_iter()
            .map(|v| match v {
                Value::Num(x) => Ok(x),
                Value::Text(t) => t.parse().map_err(serde::de::Error::custom),
            })
            .collect()
    }
}

fn flag_conflict(flag: &str, reason: &str) -> CliError {
    CliError::usage(format!("{flag}: {reason}"))
}

fn reject(present: bool, flag: &str, reason: &str) -> Result<()> {
    if present {
        Err(flag_conflict(flag, reason))
    } else {
        Ok(())
    }
}

fn pixel_scale(common: &CommonArgs) -> f64 {
    if common.pixels == "255" {
        255.0
    } else {
        1.0
    }
}

fn nonneg(flag: &str, v: f64) -> Result<f64> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(flag_conflict(flag, &format!("must be finite and non-negative, got {v}")))
    }
}

fn data_spec(common: &CommonArgs) -> DataSpec {
    let dataset = match common.data {
        DatasetArg::Mnist => DatasetKind::Mnist,
        DatasetArg::Cifar10 => DatasetKind::Cifar10,
    };
    let arch = match (common.arch, dataset) {
        (Some(ArchArg::Lenet), _) | (None, DatasetKind::Mnist) => Arch::Lenet,
        (Some(ArchArg::SmallconvCifar), _) | (None, DatasetKind::Cifar10) => Arch::SmallconvCifar,
    };
    DataSpec {
        dataset,
        root: common.data_dir.clone(),
        arch,
        train_limit: common.train_limit,
        val_limit: common.val_limit,
    }
}

fn base_train(dataset: DatasetKind) -> TrainConfig {
    match dataset {
        DatasetKind::Mnist => TrainConfig::default(),
        DatasetKind::Cifar10 => TrainConfig::cifar(),
    }
}

fn base_ball(dataset: DatasetKind) -> NormBall {
    base_train(dataset).ball
}

fn ball(dataset: DatasetKind, norm: Option<NormArg>, eps: Option<f64>, scale: f64) -> Result<NormBall> {
    let p = match norm {
        Some(NormArg::L2) => unip_core::attacks::Norm::L2,
        Some(NormArg::Inf) | None => unip_core::attacks::Norm::Inf,
    };
    let eps = match eps {
        Some(e) => nonneg("--eps", e)? / scale,
        None => base_ball(dataset).eps,
    };
    Ok(NormBall { p, eps })
}

fn rule(r: RuleArg) -> UpdateRule {
    match r {
        RuleArg::Sgd => UpdateRule::Sgd,
        RuleArg::MomentumSgd => UpdateRule::MomentumSgd,
        RuleArg::Adam => UpdateRule::Adam,
        RuleArg::Sign => UpdateRule::Sign,
    }
}

fn mode(m: ModeArg) -> TrainMode {
    match m {
        ModeArg::Natural => TrainMode::Natural,
        ModeArg::AdvFgsm => TrainMode::AdvFgsm,
        ModeArg::AdvRfgsm => TrainMode::AdvRfgsm,
        ModeArg::AdvPgd => TrainMode::AdvPgd,
        ModeArg::UniversalAlt => TrainMode::UniversalAlt,
        ModeArg::UniversalSim => TrainMode::UniversalSim,
    }
}

pub fn parse_schedule(text: &str) -> Result<Vec<(usize, f64)>> {
    text.split(',')
        .map(|part| {
            let (step, lr) = part
                .split_once(':')
                .ok_or_else(|| flag_conflict("--lr-schedule", &format!("expected step:lr, got {part:?}")))?;
            let step = step
                .trim()
                .parse()
                .map_err(|_| flag_conflict("--lr-schedule", &format!("bad step {step:?}")))?;
            let lr = lr
                .trim()
                .parse()
                .map_err(|_| flag_conflict("--lr-schedule", &format!("bad learning rate {lr:?}")))?;
            Ok((step, lr))
        })
        .collect()
}

fn parse_list<T: std::str::FromStr>(flag: &str, text: &str) -> Result<Vec<T>> {
    let out = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| flag_conflict(flag, &format!("cannot parse {v:?}")))
        })
        .collect::<Result<Vec<T>>>()?;
    if out.is_empty() {
        return Err(flag_conflict(flag, "needs at least one value"));
    }
    Ok(out)
}

fn natural_source(dataset: DatasetKind, seed: u64, steps: Option<usize>) -> TrainConfig {
    let mut train = base_train(dataset);
    train.seed = seed;
    if let Some(s) = steps {
        train.total_steps = s;
        train.lr_schedule.retain(|&(at, _)| at == 0 || at < s);
    }
    train
}

fn model_source(
    checkpoint: &Option<PathBuf>,
    train_steps: Option<usize>,
    dataset: DatasetKind,
    seed: u64,
) -> Result<ModelSource> {
    match checkpoint {
        Some(path) => {
            reject(train_steps.is_some(), "--train-steps", "only used when no --checkpoint is given")?;
            Ok(ModelSource::Checkpoint { path: path.clone() })
        }
        None => Ok(ModelSource::TrainNatural {
            train: natural_source(dataset, seed, train_steps),
        }),
    }
}

fn universal_config(
    u: &UniversalArgs,
    ball: NormBall,
    seed: u64,
    clamp_inputs: bool,
) -> Result<UniversalAttackConfig> {
    let mut cfg = UniversalAttackConfig {
        ball,
        seed,
        clamp_inputs,
        ..Default::default()
    };
    if let Some(r) = u.rule {
        cfg.rule = rule(r);
    }
    if let Some(lr) = u.lr {
        cfg.lr = nonneg("--lr", lr)?;
    }
    if let Some(beta) = u.beta {
        reject(!(beta > 0.0), "--beta", "must be positive")?;
        cfg.beta = beta;
    }
    if let Some(e) = u.epochs {
        reject(e == 0, "--epochs", "must be at least 1")?;
        cfg.epochs = e;
    }
    if let Some(b) = u.batch_size {
        reject(b == 0, "--batch-size", "must be at least 1")?;
        cfg.batch_size = b;
    }
    Ok(cfg)
}

pub fn resolve_train(a: &TrainArgs) -> Result<RunConfig> {
    let data = data_spec(&a.common);
    let scale = pixel_scale(&a.common);
    let m = mode(a.mode);
    let universal = m.is_universal();
    reject(a.delta_rule.is_some() && !universal, "--delta-rule", "only applies to universal_alt and universal_sim")?;
    reject(a.delta_lr.is_some() && !universal, "--delta-lr", "only applies to universal_alt and universal_sim")?;
    reject(a.probe_after_ascent && m != TrainMode::UniversalSim, "--probe-after-ascent", "only applies to universal_sim")?;
    reject(a.delta_rule == Some(RuleArg::MomentumSgd), "--delta-rule", "must be one of sign, sgd, adam")?;
    reject(a.pgd_steps.is_some() && m != TrainMode::AdvPgd, "--pgd-steps", "only applies to adv_pgd")?;
    reject(a.rfgsm_alpha.is_some() && m != TrainMode::AdvRfgsm, "--rfgsm-alpha", "only applies to adv_rfgsm")?;

    let mut train = base_train(data.dataset);
    train.mode = m;
    train.seed = a.common.seed;
    train.ball = ball(data.dataset, a.norm, a.eps, scale)?;
    train.clamp_inputs = !a.no_clamp;
    train.probe_after_ascent = a.probe_after_ascent;
    if let Some(s) = a.steps {
        train.total_steps = s;
        if a.lr_schedule.is_none() {
            train.lr_schedule.retain(|&(at, _)| at == 0 || at < s);
        }
    }
    if let Some(b) = a.batch_size {
        train.batch_size = b;
    }
    if let Some(text) = &a.lr_schedule {
        train.lr_schedule = parse_schedule(text)?;
    }
    if let Some(mu) = a.momentum {
        train.momentum = mu;
    }
    if let Some(beta) = a.beta {
        reject(!(beta > 0.0), "--beta", "must be positive")?;
        train.beta = beta;
    }
    if let Some(r) = a.delta_rule {
        train.delta_rule = rule(r);
    }
    if let Some(lr) = a.delta_lr {
        train.delta_lr = nonneg("--delta-lr", lr)?;
    }
    if let Some(k) = a.pgd_steps {
        train.pgd_steps = k;
    }
    if let Some(alpha) = a.rfgsm_alpha {
        train.rfgsm_alpha = Some(nonneg("--rfgsm-alpha", alpha)? / scale);
    }
    train.validate()?;
    Ok(RunConfig {
        out: a.common.out.clone(),
        deterministic: a.common.deterministic,
        data: Some(data),
        command: CommandConfig::Train { train },
    })
}

fn deepfool_flags(d: &DeepFoolArgs) -> [(&'static str, bool); 4] {
    [
        ("--xi", d.xi.is_some()),
        ("--max-passes", d.max_passes.is_some()),
        ("--deepfool-max-iter", d.deepfool_max_iter.is_some()),
        ("--overshoot", d.overshoot.is_some()),
    ]
}

fn universal_flags(u: &UniversalArgs) -> [(&'static str, bool); 5] {
    [
        ("--rule", u.rule.is_some()),
        ("--lr", u.lr.is_some()),
        ("--beta", u.beta.is_some()),
        ("--epochs", u.epochs.is_some()),
        ("--batch-size", u.batch_size.is_some()),
    ]
}

pub fn resolve_attack(a: &AttackArgs) -> Result<RunConfig> {
    let data = data_spec(&a.common);
    let scale = pixel_scale(&a.common);
    let ball = ball(data.dataset, a.norm, a.eps, scale)?;
    reject(a.n == 0, "--n", "must be at least 1")?;
    let method = match a.method {
        MethodArg::Universal => {
            for (flag, set) in deepfool_flags(&a.deepfool) {
                reject(set, flag, "only applies to --method ideepfool")?;
            }
            let config = universal_config(&a.universal, ball, a.common.seed, !a.no_clamp)?;
            config.validate()?;
            AttackMethod::Universal { config }
        }
        MethodArg::Ideepfool => {
            for (flag, set) in universal_flags(&a.universal) {
                reject(set, flag, "only applies to --method universal")?;
            }
            let mut config = IDeepFoolConfig {
                ball,
                clamp_inputs: !a.no_clamp,
                ..Default::default()
            };
            let d = &a.deepfool;
            if let Some(xi) = d.xi {
                reject(!(xi > 0.0 && xi < 1.0), "--xi", "must lie in (0, 1)")?;
                config.xi = xi;
            }
            if let Some(p) = d.max_passes {
                reject(p == 0, "--max-passes", "must be at least 1")?;
                config.max_outer_passes = p;
            }
            if let Some(k) = d.deepfool_max_iter {
                reject(k == 0, "--deepfool-max-iter", "must be at least 1")?;
                config.deepfool_max_iter = k;
            }
            if let Some(o) = d.overshoot {
                config.overshoot = nonneg("--overshoot", o)?;
            }
            config.validate()?;
            AttackMethod::Ideepfool { config }
        }
    };
    Ok(RunConfig {
        out: a.common.out.clone(),
        deterministic: a.common.deterministic,
        command: CommandConfig::Attack {
            model: model_source(&a.checkpoint, a.train_steps, data.dataset, a.common.seed)?,
            n: a.n,
            subset_seed: a.common.seed,
            method,
        },
        data: Some(data),
    })
}

pub fn resolve_eval(a: &EvalArgs) -> Result<RunConfig> {
    let data = data_spec(&a.common);
    let scale = pixel_scale(&a.common);
    let kind = a.attack.unwrap_or(if a.perturbation.is_some() {
        EvalAttackArg::Universal
    } else {
        EvalAttackArg::Clean
    });
    let instance = matches!(kind, EvalAttackArg::Fgsm | EvalAttackArg::Rfgsm | EvalAttackArg::Pgd);
    reject(
        a.perturbation.is_some() && kind != EvalAttackArg::Universal,
        "--perturbation",
        "only applies to --attack universal",
    )?;
    reject(a.eps.is_some() && !instance, "--eps", "only applies to fgsm, rfgsm and pgd")?;
    reject(a.rfgsm_alpha.is_some() && kind != EvalAttackArg::Rfgsm, "--rfgsm-alpha", "only applies to --attack rfgsm")?;
    reject(a.pgd_steps.is_some() && kind != EvalAttackArg::Pgd, "--pgd-steps", "only applies to --attack pgd")?;
    reject(a.step_size.is_some() && kind != EvalAttackArg::Pgd, "--step-size", "only applies to --attack pgd")?;
    reject(a.no_clamp && kind != EvalAttackArg::Universal, "--no-clamp", "only applies to --attack universal")?;

    let threat = match kind {
        EvalAttackArg::Clean => EvalThreat::Clean,
        EvalAttackArg::Universal => {
            let perturbation = a
                .perturbation
                .clone()
                .ok_or_else(|| flag_conflict("--attack", "universal needs --perturbation"))?;
            EvalThreat::Universal {
                perturbation,
                clamp_inputs: !a.no_clamp,
            }
        }
        _ => {
            let eps = nonneg("--eps", a.eps.ok_or_else(|| flag_conflict("--eps", "required for per-instance attacks"))?)? / scale;
            let attack = match kind {
                EvalAttackArg::Fgsm => InstanceAttack::Fgsm { eps },
                EvalAttackArg::Rfgsm => {
                    let alpha = match a.rfgsm_alpha {
                        Some(v) => nonneg("--rfgsm-alpha", v)? / scale,
                        None => eps / 2.0,
                    };
                    reject(eps > 0.0 && !(alpha > 0.0 && alpha < eps), "--rfgsm-alpha", "must lie in (0, eps)")?;
                    InstanceAttack::Rfgsm { eps, alpha }
                }
                _ => {
                    let steps = a.pgd_steps.unwrap_or(PgdConfig::white_box().steps);
                    reject(steps == 0, "--pgd-steps", "must be at least 1")?;
                    let step_size = match a.step_size {
                        Some(v) => nonneg("--step-size", v)? / scale,
                        None => eps / 4.0,
                    };
                    InstanceAttack::Pgd(PgdConfig {
                        eps,
                        steps,
                        step_size,
                        random_start: true,
                    })
                }
            };
            EvalThreat::Instance { attack }
        }
    };
    Ok(RunConfig {
        out: a.common.out.clone(),
        deterministic: a.common.deterministic,
        data: Some(data),
        command: CommandConfig::Eval {
            checkpoints: a.checkpoint.clone(),
            threat,
            seed: a.common.seed,
        },
    })
}

pub fn resolve_sweep(a: &SweepArgs) -> Result<RunConfig> {
    let data = data_spec(&a.common);
    let scale = pixel_scale(&a.common);
    let parameter = match a.param {
        SweepParamArg::Beta => {
            reject(a.universal.beta.is_some(), "--beta", "is swept by --param beta; use --values")?;
            SweepParameter::Beta
        }
        SweepParamArg::NSamples => {
            reject(a.n.is_some(), "--n", "is swept by --param n_samples; use --values")?;
            reject(a.universal.epochs.is_some(), "--epochs", "is set from the sample count in an n_samples sweep")?;
            SweepParameter::NSamples
        }
    };
    let values: Vec<f64> = parse_list("--values", &a.values)?;
    match parameter {
        SweepParameter::Beta => {
            reject(values.iter().any(|v| !(*v > 0.0)), "--values", "betas must be positive")?;
            reject(!values.iter().any(|v| v.is_infinite()), "--values", "the beta sweep needs inf as a baseline")?;
        }
        SweepParameter::NSamples => {
            reject(
                values.iter().any(|v| !(*v >= 1.0 && v.fract() == 0.0 && v.is_finite())),
                "--values",
                "sample counts must be positive integers",
            )?;
        }
    }
    let seeds: Vec<u64> = parse_list("--seeds", &a.seeds)?;
    let base = universal_config(
        &a.universal,
        ball(data.dataset, a.norm, a.eps, scale)?,
        a.common.seed,
        !a.no_clamp,
    )?;
    base.validate()?;
    Ok(RunConfig {
        out: a.common.out.clone(),
        deterministic: a.common.deterministic,
        command: CommandConfig::Sweep {
            model: model_source(&a.checkpoint, a.train_steps, data.dataset, a.common.seed)?,
            parameter,
            values,
            seeds,
            n: a.n.unwrap_or(5000),
            base,
        },
        data: Some(data),
    })
}

pub fn resolve_export(a: &ExportArgs) -> RunConfig {
    RunConfig {
        out: a.out.clone(),
        deterministic: true,
        data: None,
        command: CommandConfig::Export {
            perturbation: a.perturbation.clone(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_parsing() {
        assert_eq!(parse_schedule("0:0.1, 10:0.01").unwrap(), vec![(0, 0.1), (10, 0.01)]);
        assert!(parse_schedule("0-0.1").is_err());
        assert!(parse_schedule("x:0.1").is_err());
    }

    #[test]
    fn sweep_values_survive_json() {
        let cfg = RunConfig {
            out: "o".into(),
            deterministic: false,
            data: None,
            command: CommandConfig::Sweep {
                model: ModelSource::Checkpoint { path: "m".into() },
                parameter: SweepParameter::Beta,
                values: vec![2.0, f64::INFINITY],
                seeds: vec![0, 1],
                n: 10,
                base: UniversalAttackConfig::default(),
            },
        };
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn train_config_with_infinite_beta_round_trips() {
        let cfg = RunConfig {
            out: "o".into(),
            deterministic: true,
            data: None,
            command: CommandConfig::Train {
                train: TrainConfig::default(),
            },
        };
        assert!(cfg.to_json().contains("\"inf\""));
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
