//! End-to-end acceptance run on the real MNIST files.
//!
//! Prints one PASS/FAIL line per criterion and exits non-zero if any fails.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --release --test acceptance -- 1 3`.
//!
//! Data is read from `$UNIP_DATA_DIR/mnist`, falling back to `<workspace>/data/mnist`.

mod common;

use std::cell::OnceCell;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unip_core::attacks::{
    deepfool, ideepfool_universal, project, universal_attack, universal_gradient, IDeepFoolConfig, Norm, NormBall,
    UniversalAttackConfig,
};
use unip_core::data::{load_mnist_dir, subset, Dataset, Split};
use unip_core::eval::{evaluate, netpbm_to_perturbation, perturbation_to_netpbm, random_linf_delta, sweep_clipping, Threat};
use unip_core::nn::{backward, loss, Arch, ClippedLoss, LayerSpec, Model, Want};
use unip_core::optim::UpdateRule;
use unip_core::training::{train, TrainConfig, TrainMode};
use unip_core::Tensor;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ATTACK_SET: usize = 5000;

type Check = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn data_root() -> PathBuf {
    std::env::var_os("UNIP_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

struct Trained {
    clean: f64,
    attacked: f64,
    wall_clock_s: f64,
}

struct Ctx {
    root: PathBuf,
    train: Dataset,
    val: Dataset,
    natural: OnceCell<Model>,
    sign_attack: OnceCell<(f64, f64)>,
    ideepfool: OnceCell<(f64, f64)>,
    /// Per seed: natural, simultaneous, alternating.
    defense: OnceCell<Vec<[Trained; 3]>>,
}

/// Attack configuration used throughout: sign rule, eps 76.5/255, 10 epochs
/// of batch 128, raw `x + delta` without clamping.
fn attack_cfg(seed: u64) -> UniversalAttackConfig {
    UniversalAttackConfig {
        seed,
        clamp_inputs: false,
        ..Default::default()
    }
}

fn universal_threat(delta: Tensor) -> Threat {
    Threat::Universal {
        delta,
        clamp_inputs: false,
    }
}

impl Ctx {
    fn natural(&self) -> &Model {
        self.natural.get_or_init(|| {
            let cfg = TrainConfig {
                total_steps: 3000,
                lr_schedule: vec![(0, 0.05), (2000, 0.005)],
                ..Default::default()
            };
            let model = Arch::Lenet.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            train(model, &self.train, &cfg, &mut |_, _, _| Ok(())).unwrap().model
        })
    }

    fn attack_set(&self, seed: u64) -> Dataset {
        subset(&self.train, ATTACK_SET, seed).unwrap()
    }

    /// Attacked val accuracy and seconds of the sign-rule universal attack on the natural model.
    fn sign_attack(&self) -> (f64, f64) {
        *self.sign_attack.get_or_init(|| {
            let out = universal_attack(self.natural(), &self.attack_set(0), &attack_cfg(0)).unwrap();
            let acc = evaluate(self.natural(), &self.val, "natural", &universal_threat(out.state.into_delta()))
                .unwrap()
                .accuracy;
            (acc, out.wall_clock_s)
        })
    }

    fn ideepfool(&self) -> (f64, f64) {
        *self.ideepfool.get_or_init(|| {
            let cfg = IDeepFoolConfig {
                clamp_inputs: false,
                ..Default::default()
            };
            let out = ideepfool_universal(self.natural(), &self.attack_set(0), &cfg).unwrap();
            let acc = evaluate(self.natural(), &self.val, "natural", &universal_threat(out.state.into_delta()))
                .unwrap()
                .accuracy;
            (acc, out.wall_clock_s)
        })
    }

    fn defense(&self) -> &[[Trained; 3]] {
        self.defense.get_or_init(|| {
            SEEDS
                .iter()
                .map(|&seed| {
                    [TrainMode::Natural, TrainMode::UniversalSim, TrainMode::UniversalAlt]
                        .map(|mode| self.train_and_attack(mode, seed))
                })
                .collect()
        })
    }

    fn train_and_attack(&self, mode: TrainMode, seed: u64) -> Trained {
        let cfg = TrainConfig {
            total_steps: 3000,
            lr_schedule: vec![(0, 0.01), (2000, 0.001)],
            seed,
            mode,
            clamp_inputs: false,
            ..Default::default()
        };
        let model = Arch::Lenet.build(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let out = train(model, &self.train, &cfg, &mut |_, _, _| Ok(())).unwrap();
        let clean = evaluate(&out.model, &self.val, mode.as_str(), &Threat::Clean).unwrap().accuracy;
        let attack = universal_attack(&out.model, &self.attack_set(seed), &attack_cfg(seed)).unwrap();
        let attacked = evaluate(&out.model, &self.val, mode.as_str(), &universal_threat(attack.state.into_delta()))
            .unwrap()
            .accuracy;
        eprintln!("  {mode} seed {seed}: clean {clean:.4}, attacked {attacked:.4}, {:.1}s", out.wall_clock_s);
        Trained {
            clean,
            attacked,
            wall_clock_s: out.wall_clock_s,
        }
    }
}

fn criterion_1(ctx: &Ctx) -> Check {
    let clean = evaluate(ctx.natural(), &ctx.val, "natural", &Threat::Clean).map_err(fail)?.accuracy;
    let (attacked, _) = ctx.sign_attack();
    verdict(
        clean >= 0.985 && attacked <= 0.15,
        format!("natural val accuracy {clean:.4} (>= 0.985), under the universal perturbation {attacked:.4} (<= 0.15)"),
    )
}

fn criterion_2(ctx: &Ctx) -> Check {
    let (ours, _) = ctx.sign_attack();
    let (idf, _) = ctx.ideepfool();
    verdict(
        idf <= 0.40 && ours < idf,
        format!("iDeepFool attacked accuracy {idf:.4} (<= 0.40), sign-rule attack {ours:.4} (strictly lower)"),
    )
}

fn criterion_3(ctx: &Ctx) -> Check {
    let (_, ours) = ctx.sign_attack();
    let (_, idf) = ctx.ideepfool();
    let ratio = idf / ours;
    verdict(
        ratio >= 2.0,
        format!("sign-rule attack {ours:.1}s, iDeepFool {idf:.1}s, speed-up {ratio:.2}x (>= 2)"),
    )
}

fn criterion_4(ctx: &Ctx) -> Check {
    let runs = ctx.defense();
    let ordered = runs
        .iter()
        .filter(|[nat, sim, alt]| nat.attacked < sim.attacked && sim.attacked < alt.attacked)
        .count();
    let robust = runs
        .iter()
        .filter(|[_, _, alt]| alt.attacked >= 0.70 && alt.clean >= 0.95)
        .count();
    let table: Vec<String> = runs
        .iter()
        .map(|[n, s, a]| format!("{:.3}<{:.3}<{:.3} (alt clean {:.3})", n.attacked, s.attacked, a.attacked, a.clean))
        .collect();
    verdict(
        ordered >= 4 && robust == runs.len(),
        format!(
            "ordering natural < simultaneous < alternating in {ordered}/5 seeds (>= 4); alternating >= 0.70 attacked with >= 0.95 clean in {robust}/5 seeds; {}",
            table.join(", ")
        ),
    )
}

fn criterion_5(ctx: &Ctx) -> Check {
    let runs = ctx.defense();
    let total = |i: usize| runs.iter().map(|r| r[i].wall_clock_s).sum::<f64>();
    let (nat, sim, alt) = (total(0), total(1), total(2));
    let (r_alt, r_sim) = (alt / nat, sim / nat);
    verdict(
        r_alt <= 2.5 && r_sim <= 1.2,
        format!(
            "over 5x3000 steps: natural {nat:.1}s, alternating {alt:.1}s ({r_alt:.2}x, <= 2.5), simultaneous {sim:.1}s ({r_sim:.2}x, <= 1.2)"
        ),
    )
}

fn criterion_6(ctx: &Ctx) -> Check {
    let betas = [2.0, 4.0, 6.0, 9.0, 15.0, f64::INFINITY];
    let table = sweep_clipping(ctx.natural(), &ctx.train, &ctx.val, &betas, &SEEDS, ATTACK_SET, &attack_cfg(0))
        .map_err(fail)?;
    let summary = table.summary();
    let baseline = summary.iter().find(|s| s.value.is_infinite()).ok_or("no baseline row")?.mean;
    let best = summary
        .iter()
        .filter(|s| s.value.is_finite())
        .min_by(|a, b| a.mean.total_cmp(&b.mean))
        .ok_or("no finite beta")?;
    let means: Vec<String> = summary.iter().map(|s| format!("{}:{:.4}", s.value, s.mean)).collect();
    verdict(
        best.mean <= baseline,
        format!(
            "best finite beta {} mean attacked accuracy {:.4} vs unclipped {baseline:.4}; {}",
            best.value,
            best.mean,
            means.join(" ")
        ),
    )
}

// Criterion 7 helpers.

const H: f64 = 1e-5;

fn conv(i: usize, o: usize, k: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride,
        padding,
    }
}

/// Central difference, or `None` when a ReLU or max-pool kink lies inside the step.
fn central(f: impl Fn(f64) -> f64, x0: f64) -> Option<f64> {
    let (fp, f0, fm) = (f(x0 + H), f(x0), f(x0 - H));
    let (fwd, bwd) = ((fp - f0) / H, (f0 - fm) / H);
    let scale = fwd.abs().max(bwd.abs()).max(1e-6);
    ((fwd - bwd).abs() / scale < 1e-3).then_some((fp - fm) / (2.0 * H))
}

fn gradient_check() -> Result<String, String> {
    let nets: Vec<(Vec<usize>, Vec<LayerSpec>)> = vec![
        (
            vec![2, 6, 6],
            vec![
                conv(2, 3, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 27, outputs: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 8, outputs: 4 },
            ],
        ),
        (
            vec![1, 7, 7],
            vec![
                conv(1, 2, 3, 2, 1),
                LayerSpec::Relu,
                conv(2, 3, 2, 1, 0),
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 27, outputs: 5 },
            ],
        ),
    ];
    let mut worst = 0f64;
    let (mut checked, mut skipped) = (0, 0);
    for seed in 0..20u64 {
        let (shape, layers) = nets[seed as usize % nets.len()].clone();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let model: Model<f64> = Model::new(&shape, layers, &mut r).map_err(fail)?;
        let batch = 3;
        let x_shape: Vec<usize> = std::iter::once(batch).chain(shape.iter().copied()).collect();
        let n: usize = x_shape.iter().product();
        let x = Tensor::from_vec(x_shape, (0..n).map(|_| r.random_range(0.0..1.0)).collect()).map_err(fail)?;
        let labels: Vec<usize> = (0..batch).map(|i| (i + seed as usize) % model.num_classes()).collect();
        let mean = |m: &Model<f64>, x: &Tensor<f64>| loss(m, x, &labels, ClippedLoss::unclipped()).unwrap().mean;
        let grads = backward(&model, &x, &labels, ClippedLoss::unclipped()).map_err(fail)?;
        let (gp, gx) = (grads.params.unwrap(), grads.input.unwrap());
        for _ in 0..50 {
            let (analytic, numeric) = if r.random_bool(0.5) {
                let layer = r.random_range(0..gp.len());
                let idx = r.random_range(0..gp[layer].len());
                let f = |v: f64| {
                    let mut m = model.clone();
                    m.params_mut()[layer].data_mut()[idx] = v;
                    mean(&m, &x)
                };
                (gp[layer].data()[idx], central(f, model.params()[layer].data()[idx]))
            } else {
                let idx = r.random_range(0..x.len());
                let f = |v: f64| {
                    let mut xx = x.clone();
                    xx.data_mut()[idx] = v;
                    mean(&model, &xx)
                };
                (gx.data()[idx], central(f, x.data()[idx]))
            };
            match numeric {
                Some(num) => {
                    worst = worst.max((analytic - num).abs() / analytic.abs().max(num.abs()).max(1e-6));
                    checked += 1;
                }
                None => skipped += 1,
            }
        }
    }
    if worst < 1e-4 && skipped * 10 <= checked {
        Ok(format!("gradients {checked} coords, max rel err {worst:.1e}"))
    } else {
        Err(format!("gradients: max rel err {worst:.1e}, {skipped} kinks of {}", checked + skipped))
    }
}

fn projection_laws() -> Result<String, String> {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for case in 0..2000 {
        let len = r.random_range(1..200);
        let scale = r.random_range(0.01..3.0);
        let v = Tensor::from_vec(vec![len], (0..len).map(|_| r.random_range(-scale..scale)).collect::<Vec<f64>>())
            .map_err(fail)?;
        let p = if case % 2 == 0 { Norm::Inf } else { Norm::L2 };
        let ball = NormBall::new(p, r.random_range(0.0..2.0)).map_err(fail)?;
        let once = project(&v, &ball);
        if project(&once, &ball) != once {
            return Err(format!("projection not idempotent for {ball:?}"));
        }
        if ball.norm_of(&once) > ball.eps + 1e-9 || ball.norm_of(&once) > ball.norm_of(&v) + 1e-12 {
            return Err(format!("projection left the ball for {ball:?}"));
        }
        let big = NormBall::new(p, ball.norm_of(&v) * r.random_range(1.0..3.0)).map_err(fail)?;
        if project(&v, &big) != v {
            return Err(format!("projection moved a point inside {big:?}"));
        }
    }
    Ok("projection 2000 cases".into())
}

fn deepfool_oracle() -> Result<String, String> {
    let mut r = ChaCha8Rng::seed_from_u64(51);
    let (k, n) = (10, 20);
    let mut worst = 0f64;
    for _ in 0..50 {
        let w: Vec<f64> = (0..k * (n + 1)).map(|_| r.random_range(-1.0..1.0)).collect();
        let model: Model<f64> = Model::from_params(
            &[1, 1, n],
            vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: n, outputs: k }],
            vec![Tensor::from_vec(vec![k, n + 1], w.clone()).map_err(fail)?],
        )
        .map_err(fail)?;
        let x = Tensor::from_vec(vec![1, 1, n], (0..n).map(|_| r.random_range(0.0..1.0)).collect()).map_err(fail)?;
        let logits: Vec<f64> = (0..k)
            .map(|c| (0..n).map(|i| w[c * (n + 1) + i] * x.data()[i]).sum::<f64>() + w[c * (n + 1) + n])
            .collect();
        let k0 = (0..k).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
        let oracle = (0..k)
            .filter(|&c| c != k0)
            .map(|c| {
                let diff: f64 = (0..n).map(|i| (w[c * (n + 1) + i] - w[k0 * (n + 1) + i]).powi(2)).sum();
                (logits[k0] - logits[c]) / diff.sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        let out = deepfool(&model, &x, 50, 0.005).map_err(fail)?;
        let excess = out.r.norm_l2() / oracle - 1.0;
        if !out.fooled || excess < -1e-9 {
            return Err(format!("deepfool step {} vs oracle {oracle}", out.r.norm_l2()));
        }
        worst = worst.max(excess);
    }
    if worst <= 0.01 {
        Ok(format!("deepfool max excess {:.2}%", worst * 100.0))
    } else {
        Err(format!("deepfool norm excess {:.2}% over the closed form", worst * 100.0))
    }
}

fn zero_budget(ctx: &Ctx) -> Result<String, String> {
    let ds = ctx.train.select(&(0..2000).collect::<Vec<_>>()).map_err(fail)?;
    let run = |mode: TrainMode, ball: NormBall| {
        let cfg = TrainConfig {
            total_steps: 20,
            batch_size: 64,
            mode,
            ball,
            pgd_steps: 2,
            seed: 3,
            ..Default::default()
        };
        let model = Arch::Lenet.build(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        train(model, &ds, &cfg, &mut |_, _, _| Ok(())).unwrap().model
    };
    let natural = run(TrainMode::Natural, NormBall::linf(0.0));
    for mode in TrainMode::ALL {
        for ball in [NormBall::linf(0.0), NormBall::l2(0.0)] {
            if mode.is_per_instance() && ball.p == Norm::L2 {
                continue;
            }
            if run(mode, ball).params() != natural.params() {
                return Err(format!("eps = 0 {mode} ({:?}) differs from natural training", ball.p));
            }
        }
    }
    Ok("eps=0 all modes bit-equal".into())
}

fn shared_backward(ctx: &Ctx) -> Result<String, String> {
    let model = ctx.natural();
    for seed in 0..5 {
        let idx: Vec<usize> = (0..128).map(|i| (i * 37 + seed * 1001) % ctx.train.len()).collect();
        let batch = ctx.train.select(&idx).map_err(fail)?;
        let delta = random_linf_delta(&[1, 28, 28], 0.3, seed as u64);
        for clamp in [false, true] {
            let clip = ClippedLoss::new(9.0).map_err(fail)?;
            let g = |want| universal_gradient(model, batch.images(), batch.labels(), &delta, clip, clamp, want).unwrap();
            let (both, gd_both) = g(Want::BOTH);
            let (params, _) = g(Want::PARAMS);
            let (_, gd_input) = g(Want::INPUT);
            if both.grads.params != params.grads.params || gd_both != gd_input {
                return Err(format!("shared pass differs from separate passes (seed {seed}, clamp {clamp})"));
            }
        }
    }
    Ok("shared backward bit-equal".into())
}

fn netpbm_round_trip() -> Result<String, String> {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for case in 0..500u64 {
        let c = if case % 2 == 0 { 1 } else { 3 };
        let (h, w) = (r.random_range(1..32), r.random_range(1..32));
        let eps = r.random_range(1e-3..1.0);
        let delta = random_linf_delta(&[c, h, w], eps, case);
        let back = netpbm_to_perturbation(&perturbation_to_netpbm(&delta, &NormBall::linf(eps)).map_err(fail)?, eps)
            .map_err(fail)?;
        let err = back.sub(&delta).map_err(fail)?.norm_linf();
        if back.shape() != delta.shape() || err > eps / 255.0 + 1e-6 {
            return Err(format!("netpbm round trip error {err} at eps {eps}"));
        }
    }
    Ok("PGM/PPM 500 round trips".into())
}

fn replay_everything(ctx: &Ctx) -> Result<String, String> {
    use common::{assert_same_outputs, ok};
    let tmp = tempfile::tempdir().map_err(fail)?;
    let dir = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let limits = ["--train-limit", "600", "--val-limit", "200"];
    let mut runs: Vec<(String, Vec<String>)> = Vec::new();
    let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    for mode in ["natural", "adv_fgsm", "adv_rfgsm", "adv_pgd", "universal_alt", "universal_sim"] {
        let mut a = own(&["train", "--mode", mode, "--steps", "4", "--batch-size", "32"]);
        if mode != "natural" {
            a.extend(own(&["--eps", "0.3"]));
        }
        runs.push((format!("train_{mode}"), a));
    }
    let m1 = format!("{}/checkpoints/model.unip", dir("train_natural"));
    let m2 = format!("{}/checkpoints/model.unip", dir("train_universal_alt"));
    let delta = format!("{}/perturbations/delta.unip", dir("attack"));
    runs.extend([
        ("attack".into(), own(&["attack", "--checkpoint", &m1, "--n", "100", "--epochs", "2"])),
        ("attack_fresh".into(), own(&["attack", "--train-steps", "4", "--n", "100", "--epochs", "1"])),
        ("ideepfool".into(), own(&["attack", "--method", "ideepfool", "--checkpoint", &m1, "--n", "30", "--max-passes", "2"])),
        ("eval_clean".into(), own(&["eval", "--checkpoint", &m1])),
        ("eval_universal".into(), own(&["eval", "--checkpoint", &m1, "--perturbation", &delta])),
        ("eval_fgsm".into(), own(&["eval", "--checkpoint", &m1, "--checkpoint", &m2, "--attack", "fgsm", "--eps", "0.1"])),
        ("eval_rfgsm".into(), own(&["eval", "--checkpoint", &m1, "--attack", "rfgsm", "--eps", "0.1"])),
        ("eval_pgd".into(), own(&["eval", "--checkpoint", &m1, "--attack", "pgd", "--eps", "0.1", "--pgd-steps", "3"])),
        ("sweep_beta".into(), own(&["sweep", "--checkpoint", &m1, "--param", "beta", "--values", "2,inf", "--seeds", "0,1", "--n", "50", "--epochs", "1"])),
        ("sweep_n".into(), own(&["sweep", "--checkpoint", &m1, "--param", "n_samples", "--values", "20,40", "--seeds", "3"])),
    ]);
    for (name, args) in &runs {
        let first = dir(name);
        let mut a: Vec<&str> = args.iter().map(String::as_str).collect();
        if !name.starts_with("export") {
            a.extend(limits);
        }
        a.extend(["--out", &first]);
        ok(&ctx.root, &a);
        let again = dir(&format!("{name}_replay"));
        ok(&ctx.root, &["replay", "--config", &format!("{first}/config.echo"), "--out", &again]);
        assert_same_outputs(Path::new(&first), Path::new(&again));
    }
    let ex = dir("export");
    ok(&ctx.root, &["export", "--perturbation", &delta, "--out", &ex]);
    let again = dir("export_replay");
    ok(&ctx.root, &["replay", "--config", &format!("{ex}/config.echo"), "--out", &again]);
    assert_same_outputs(Path::new(&ex), Path::new(&again));
    Ok(format!("{} subcommand runs replayed identically", runs.len() + 1))
}

fn criterion_7(ctx: &Ctx) -> Check {
    let suites: [(&str, Box<dyn Fn() -> Result<String, String> + '_>); 7] = [
        ("gradients", Box::new(gradient_check)),
        ("projection", Box::new(projection_laws)),
        ("deepfool", Box::new(deepfool_oracle)),
        ("zero budget", Box::new(|| zero_budget(ctx))),
        ("shared backward", Box::new(|| shared_backward(ctx))),
        ("netpbm", Box::new(netpbm_round_trip)),
        ("replay", Box::new(|| replay_everything(ctx))),
    ];
    let mut notes = Vec::new();
    let mut failed = false;
    for (name, suite) in suites {
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(suite))
            .unwrap_or_else(|p| Err(format!("{name} panicked: {}", panic_text(&p))));
        match result {
            Ok(s) => notes.push(s),
            Err(e) => {
                failed = true;
                notes.push(format!("FAILED {e}"));
            }
        }
    }
    verdict(!failed, notes.join("; "))
}

fn criterion_8(ctx: &Ctx) -> Check {
    let gap = |rule: UpdateRule, seed: u64| {
        let cfg = TrainConfig {
            total_steps: 500,
            lr_schedule: vec![(0, 0.01)],
            seed,
            mode: TrainMode::UniversalAlt,
            delta_rule: rule,
            clamp_inputs: false,
            ..Default::default()
        };
        let model = Arch::Lenet.build(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let out = train(model, &ctx.train, &cfg, &mut |_, _, _| Ok(())).unwrap();
        out.trace.mean_ascent_gap().unwrap()
    };
    let pairs: Vec<(f64, f64)> = SEEDS.iter().map(|&s| (gap(UpdateRule::Sign, s), gap(UpdateRule::Sgd, s))).collect();
    let wins = pairs.iter().filter(|(sign, sgd)| sign > sgd).count();
    let shown: Vec<String> = pairs.iter().map(|(a, b)| format!("{a:.4}/{b:.4}")).collect();
    verdict(
        wins >= 4,
        format!("sign gap exceeds sgd gap in {wins}/5 seeds (>= 4); sign/sgd {}", shown.join(" ")),
    )
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for i in 1..=8 {
            println!("criterion_{i}: test");
        }
        return;
    }
    let mut selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).filter(|i| (1..=8).contains(i)).collect();
    if selected.is_empty() {
        selected = (1..=8).collect();
    }

    let root = data_root();
    let loaded = load_mnist_dir(root.join("mnist"), Split::Train).and_then(|t| Ok((t, load_mnist_dir(root.join("mnist"), Split::Val)?)));
    let (train, val) = match loaded {
        Ok(v) => v,
        Err(e) => {
            for i in &selected {
                println!("FAIL criterion {i}: MNIST unavailable under {}: {e}", root.display());
            }
            std::process::exit(1);
        }
    };
    let ctx = Ctx {
        root,
        train,
        val,
        natural: OnceCell::new(),
        sign_attack: OnceCell::new(),
        ideepfool: OnceCell::new(),
        defense: OnceCell::new(),
    };
    let criteria: [fn(&Ctx) -> Check; 8] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
    ];
    let mut failures = 0;
    for i in selected {
        let started = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| criteria[i - 1](&ctx)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(&p))));
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {i}: {detail} [{secs:.0}s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {i}: {detail} [{secs:.0}s]");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
