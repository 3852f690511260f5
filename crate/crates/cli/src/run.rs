use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unip_core::attacks::{ideepfool_universal, universal_attack, NormBall};
use unip_core::checkpoint::{load_model, load_perturbation, save_model, save_perturbation};
use unip_core::data::{load_cifar10, load_mnist_dir, subset, Dataset, Split};
use unip_core::eval::{
    evaluate, export_perturbation_image, sweep_clipping, sweep_data_size, transfer_matrix, EvalReport, Threat,
};
use unip_core::nn::Model;
use unip_core::training::{train, TrainConfig, TrainOutcome};
use unip_core::Tensor;

use crate::config::{AttackMethod, CommandConfig, DataSpec, DatasetKind, EvalThreat, ModelSource, RunConfig, SweepParameter, ECHO_FILE};
use crate::error::{CliError, Result};

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "perturbations", "reports", "images"] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    fn perturbation(&self, name: &str) -> PathBuf {
        self.root.join("perturbations").join(name)
    }

    fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    fn image(&self, name: &str) -> PathBuf {
        self.root.join("images").join(name)
    }

    fn write(&self, path: &Path, text: &str) -> Result<()> {
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }
}

fn load_split(spec: &DataSpec, split: Split) -> Result<Dataset> {
    let ds = match spec.dataset {
        DatasetKind::Mnist => load_mnist_dir(spec.root.join("mnist"), split)?,
        DatasetKind::Cifar10 => {
            let dir = spec.root.join("cifar10");
            let dir = if dir.exists() { dir } else { spec.root.join("cifar-10-batches-bin") };
            load_cifar10(dir, split)?
        }
    };
    let limit = match split {
        Split::Train => spec.train_limit,
        Split::Val => spec.val_limit,
    };
    match limit {
        Some(n) if n < ds.len() => Ok(ds.select(&(0..n).collect::<Vec<_>>())?),
        _ => Ok(ds),
    }
}

fn load_checkpoint(spec: &DataSpec, path: &Path) -> Result<Model> {
    Ok(load_model(path, &spec.arch.input_shape(), spec.arch.layers())?)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn image_name(stem: &str, delta: &Tensor) -> String {
    let ext = if delta.shape().first() == Some(&3) { "ppm" } else { "pgm" };
    format!("{stem}.{ext}")
}

/// Trains from scratch, saving a checkpoint at each due step.
fn run_training(spec: &DataSpec, cfg: &TrainConfig, layout: &Layout, name: &str) -> Result<TrainOutcome> {
    let train_ds = load_split(spec, Split::Train)?;
    let model: Model = spec.arch.build(&mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let outcome = train(model, &train_ds, cfg, &mut |step, model, delta| {
        save_model(layout.checkpoint(&format!("{name}_step{step}.unip")), model)?;
        if let Some(d) = delta {
            save_perturbation(layout.perturbation(&format!("{name}_delta_step{step}.unip")), d.delta(), d.ball())?;
        }
        Ok(())
    })?;
    save_model(layout.checkpoint(&format!("{name}.unip")), &outcome.model)?;
    if let Some(d) = &outcome.delta {
        save_perturbation(layout.perturbation(&format!("{name}_delta.unip")), d.delta(), d.ball())?;
    }
    outcome.trace.save_csv(layout.report(&format!("{name}_trace.csv")))?;
    Ok(outcome)
}

fn obtain_model(spec: &DataSpec, source: &ModelSource, layout: &Layout) -> Result<(Model, String)> {
    match source {
        ModelSource::Checkpoint { path } => Ok((load_checkpoint(spec, path)?, stem(path))),
        ModelSource::TrainNatural { train } => {
            println!("no checkpoint given; training a natural model for {} steps", train.total_steps);
            let outcome = run_training(spec, train, layout, "natural")?;
            Ok((outcome.model, "natural".into()))
        }
    }
}

pub fn execute(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::create(&cfg.out)?;
    layout.write(&cfg.out.join(ECHO_FILE), &cfg.to_json())?;
    match &cfg.command {
        CommandConfig::Train { train } => {
            let spec = cfg.data.as_ref().expect("train runs carry a data spec");
            let outcome = run_training(spec, train, &layout, "model")?;
            let model = &outcome.model;
            let val = load_split(spec, Split::Val)?;
            let mut report = EvalReport::default();
            report.push(evaluate(model, &val, "model", &Threat::Clean)?);
            if let Some(d) = &outcome.delta {
                report.push(evaluate(
                    model,
                    &val,
                    "model",
                    &Threat::Universal {
                        delta: d.delta().clone(),
                        clamp_inputs: train.clamp_inputs,
                    },
                )?);
            }
            report.save_csv(layout.report("eval.csv"))?;
            println!(
                "trained {} for {} steps in {:.1}s; val accuracy {:.4}",
                train.mode,
                train.total_steps,
                outcome.wall_clock_s,
                report.rows[0].accuracy
            );
            if let Some(gap) = outcome.trace.mean_ascent_gap() {
                println!("mean ascent gap {gap:.4}");
            }
        }
        CommandConfig::Attack {
            model,
            n,
            subset_seed,
            method,
        } => {
            let spec = cfg.data.as_ref().expect("attack runs carry a data spec");
            let (model, model_id) = obtain_model(spec, model, &layout)?;
            let train_ds = load_split(spec, Split::Train)?;
            let attack_set = subset(&train_ds, *n, *subset_seed)?;
            let (delta, ball, clamp, elapsed, trace): (Tensor, NormBall, bool, f64, String) = match method {
                AttackMethod::Universal { config } => {
                    let out = universal_attack(&model, &attack_set, config)?;
                    let mut trace = String::from("iteration,epoch,batch_accuracy,loss\n");
                    for s in &out.trace {
                        writeln!(trace, "{},{},{},{}", s.iteration, s.epoch, s.batch_accuracy, s.loss).unwrap();
                    }
                    (out.state.into_delta(), config.ball, config.clamp_inputs, out.wall_clock_s, trace)
                }
                AttackMethod::Ideepfool { config } => {
                    let out = ideepfool_universal(&model, &attack_set, config)?;
                    let mut trace = String::from("pass,fooling_ratio\n");
                    for (i, f) in out.fooling_trace.iter().enumerate() {
                        writeln!(trace, "{},{}", i + 1, f).unwrap();
                    }
                    (out.state.into_delta(), config.ball, config.clamp_inputs, out.wall_clock_s, trace)
                }
            };
            save_perturbation(layout.perturbation("delta.unip"), &delta, &ball)?;
            export_perturbation_image(&delta, &ball, layout.image(&image_name("delta", &delta)))?;
            layout.write(&layout.report("attack_trace.csv"), &trace)?;
            let val = load_split(spec, Split::Val)?;
            let mut report = EvalReport::default();
            report.push(evaluate(&model, &val, &model_id, &Threat::Clean)?);
            report.push(evaluate(
                &model,
                &val,
                &model_id,
                &Threat::Universal {
                    delta,
                    clamp_inputs: clamp,
                },
            )?);
            report.save_csv(layout.report("eval.csv"))?;
            println!(
                "perturbation fitted on {n} samples in {elapsed:.1}s; val accuracy {:.4} -> {:.4}, fooling ratio {:.4}",
                report.rows[0].accuracy, report.rows[1].accuracy, report.rows[1].fooling_ratio
            );
        }
        CommandConfig::Eval {
            checkpoints,
            threat,
            seed,
        } => {
            let spec = cfg.data.as_ref().expect("eval runs carry a data spec");
            let val = load_split(spec, Split::Val)?;
            let models = checkpoints
                .iter()
                .map(|p| Ok((stem(p), load_checkpoint(spec, p)?)))
                .collect::<Result<Vec<_>>>()?;
            let threat = match threat {
                EvalThreat::Clean => Threat::Clean,
                EvalThreat::Universal {
                    perturbation,
                    clamp_inputs,
                } => Threat::Universal {
                    delta: load_perturbation(perturbation)?.0,
                    clamp_inputs: *clamp_inputs,
                },
                EvalThreat::Instance { attack } => Threat::Instance {
                    attack: *attack,
                    seed: *seed,
                },
            };
            let mut report = EvalReport::default();
            for (id, model) in &models {
                if !matches!(threat, Threat::Clean) {
                    report.push(evaluate(model, &val, id, &Threat::Clean)?);
                }
                let row = evaluate(model, &val, id, &threat)?;
                println!("{id}: {} accuracy {:.4}", row.attack_id, row.accuracy);
                report.push(row);
            }
            report.save_csv(layout.report("eval.csv"))?;
            if let (Threat::Instance { attack, seed }, true) = (&threat, models.len() > 1) {
                let named: Vec<(String, &Model)> = models.iter().map(|(id, m)| (id.clone(), m)).collect();
                let tm = transfer_matrix(&named, &val, attack, *seed)?;
                let path = layout.report("transfer.csv");
                let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
                tm.write_csv(file)?;
            }
        }
        CommandConfig::Sweep {
            model,
            parameter,
            values,
            seeds,
            n,
            base,
        } => {
            let spec = cfg.data.as_ref().expect("sweep runs carry a data spec");
            let (model, _) = obtain_model(spec, model, &layout)?;
            let train_ds = load_split(spec, Split::Train)?;
            let val = load_split(spec, Split::Val)?;
            let table = match parameter {
                SweepParameter::Beta => sweep_clipping(&model, &train_ds, &val, values, seeds, *n, base)?,
                SweepParameter::NSamples => {
                    let sizes: Vec<usize> = values.iter().map(|&v| v as usize).collect();
                    sweep_data_size(&model, &train_ds, &val, &sizes, seeds, base)?
                }
            };
            let path = layout.report("sweep.csv");
            let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
            table.write_csv(file)?;
            let mut points = String::from("value,seed,epochs,accuracy,fooling_ratio\n");
            for p in &table.points {
                writeln!(points, "{},{},{},{},{}", p.value, p.seed, p.epochs, p.accuracy, p.fooling_ratio).unwrap();
            }
            layout.write(&layout.report("sweep_points.csv"), &points)?;
            for s in table.summary() {
                println!("{} = {}: mean attacked accuracy {:.4} over {} seeds", table.parameter, s.value, s.mean, s.seeds);
            }
        }
        CommandConfig::Export { perturbation } => {
            let (delta, ball) = load_perturbation(perturbation)?;
            let path = layout.image(&image_name(&stem(perturbation), &delta));
            export_perturbation_image(&delta, &ball, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
