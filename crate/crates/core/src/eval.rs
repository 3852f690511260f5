//! Accuracy and fooling-ratio measurements, transfer matrices, ablation
//! sweeps, CSV reports and perturbation images.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    fgsm, perturbed_predictions, pgd, rfgsm, universal_attack, NormBall, PgdConfig, UniversalAttackConfig,
};
use crate::data::{subset, Dataset};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

pub const REPORT_VERSION_LINE: &str = "# unip-report v1";
const EVAL_CHUNK: usize = 500;

/// First 16 hex digits of the SHA-256 of a config's JSON form.
pub fn config_hash<C: Serialize>(cfg: &C) -> String {
    let json = serde_json::to_vec(cfg).expect("configs serialize to JSON");
    hex::encode(&Sha256::digest(&json)[..8])
}

/// Per-instance attack used for evaluation or transfer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InstanceAttack {
    Fgsm { eps: f64 },
    Rfgsm { eps: f64, alpha: f64 },
    Pgd(PgdConfig),
}

impl InstanceAttack {
    pub fn id(&self) -> &'static str {
        match self {
            InstanceAttack::Fgsm { .. } => "fgsm",
            InstanceAttack::Rfgsm { .. } => "rfgsm",
            InstanceAttack::Pgd(_) => "pgd",
        }
    }

    pub fn eps(&self) -> f64 {
        match *self {
            InstanceAttack::Fgsm { eps } | InstanceAttack::Rfgsm { eps, .. } => eps,
            InstanceAttack::Pgd(cfg) => cfg.eps,
        }
    }

    /// Adversarial batch crafted against `model`; a zero budget returns `x`.
    pub fn craft<R: Rng + ?Sized>(&self, model: &Model, x: &Tensor, labels: &[usize], rng: &mut R) -> Result<Tensor> {
        if self.eps() == 0.0 {
            return Ok(x.clone());
        }
        match *self {
            InstanceAttack::Fgsm { eps } => fgsm(model, x, labels, eps),
            InstanceAttack::Rfgsm { eps, alpha } => rfgsm(model, x, labels, eps, alpha, rng),
            InstanceAttack::Pgd(cfg) => pgd(model, x, labels, &cfg, rng),
        }
    }
}

/// What a model is evaluated against.
#[derive(Debug, Clone, PartialEq)]
pub enum Threat {
    Clean,
    Universal {
        delta: Tensor,
        clamp_inputs: bool,
    },
    Instance {
        attack: InstanceAttack,
        seed: u64,
    },
}

impl Threat {
    pub fn attack_id(&self) -> String {
        match self {
            Threat::Clean => "clean".into(),
            Threat::Universal { .. } => "universal".into(),
            Threat::Instance { attack, .. } => attack.id().into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ThreatKey {
    attack: String,
    delta_sha: Option<String>,
    clamp_inputs: Option<bool>,
    instance: Option<InstanceAttack>,
    seed: Option<u64>,
}

impl Threat {
    fn key(&self) -> ThreatKey {
        let mut key = ThreatKey {
            attack: self.attack_id(),
            delta_sha: None,
            clamp_inputs: None,
            instance: None,
            seed: None,
        };
        match self {
            Threat::Clean => {}
            Threat::Universal { delta, clamp_inputs } => {
                let bytes: Vec<u8> = delta.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                key.delta_sha = Some(hex::encode(Sha256::digest(&bytes)));
                key.clamp_inputs = Some(*clamp_inputs);
            }
            Threat::Instance { attack, seed } => {
                key.instance = Some(*attack);
                key.seed = Some(*seed);
            }
        }
        key
    }
}

/// One measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model_id: String,
    pub split: String,
    pub attack_id: String,
    pub config_hash: String,
    pub accuracy: f64,
    pub fooling_ratio: f64,
    pub n_samples: usize,
    pub n_correct: usize,
    pub seed: u64,
    pub wall_clock_s: f64,
}

/// Accuracy against ground truth and fooling ratio against the model's own
/// clean predictions, under `threat`.
pub fn evaluate(model: &Model, ds: &Dataset, model_id: &str, threat: &Threat) -> Result<EvalRow> {
    let start = Instant::now();
    let clean = perturbed_predictions(model, ds.images(), None, false)?;
    let attacked = match threat {
        Threat::Clean => clean.clone(),
        Threat::Universal { delta, clamp_inputs } => {
            delta.expect_shape(ds.image_shape(), "perturbation")?;
            perturbed_predictions(model, ds.images(), Some(delta), *clamp_inputs)?
        }
        Threat::Instance { attack, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut out = Vec::with_capacity(ds.len());
            let mut start = 0;
            while start < ds.len() {
                let end = (start + EVAL_CHUNK).min(ds.len());
                let (x, labels) = ds.slice(start, end);
                let adv = attack.craft(model, &x, labels, &mut rng)?;
                out.extend(model.predict(&adv)?);
                start = end;
            }
            out
        }
    };
    let n_correct = attacked.iter().zip(ds.labels()).filter(|(p, l)| p == l).count();
    let fooled = attacked.iter().zip(&clean).filter(|(a, c)| a != c).count();
    let n = ds.len().max(1) as f64;
    let seed = match threat {
        Threat::Instance { seed, .. } => *seed,
        _ => 0,
    };
    Ok(EvalRow {
        model_id: model_id.into(),
        split: ds.split.to_string(),
        attack_id: threat.attack_id(),
        config_hash: config_hash(&threat.key()),
        accuracy: n_correct as f64 / n,
        fooling_ratio: fooled as f64 / n,
        n_samples: ds.len(),
        n_correct,
        seed,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Rows with a versioned header comment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn push(&mut self, row: EvalRow) {
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{REPORT_VERSION_LINE}").map_err(|e| Error::io("report", e))?;
        let mut out = csv::WriterBuilder::new().has_headers(true).from_writer(w);
        if self.rows.is_empty() {
            out.write_record([
                "model_id",
                "split",
                "attack_id",
                "config_hash",
                "accuracy",
                "fooling_ratio",
                "n_samples",
                "n_correct",
                "seed",
                "wall_clock_s",
            ])?;
        }
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush().map_err(|e| Error::io("report", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv(text: &str) -> Result<Self> {
        let body = text
            .strip_prefix(REPORT_VERSION_LINE)
            .ok_or_else(|| Error::Format(format!("report must start with {REPORT_VERSION_LINE:?}")))?;
        let mut rdr = csv::Reader::from_reader(body.trim_start_matches(['\r', '\n']).as_bytes());
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<EvalRow>, _>>()?;
        Ok(Self { rows })
    }
}

/// Uniform noise in the l-inf ball, a random baseline for universal attacks.
pub fn random_linf_delta(shape: &[usize], eps: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = eps as f32;
    let mut t = Tensor::zeros(shape);
    if e > 0.0 {
        for v in t.data_mut() {
            *v = rng.random_range(-e..=e);
        }
    }
    t
}

/// Accuracy of each target on examples crafted against each source.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub names: Vec<String>,
    /// `cells[target][source]`; `None` on the diagonal.
    pub cells: Vec<Vec<Option<f64>>>,
    /// Per source, the mean over targets other than the source.
    pub average: Vec<f64>,
}

impl TransferMatrix {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["target \\ source".to_string()];
        header.extend(self.names.iter().cloned());
        out.write_record(&header)?;
        for (name, row) in self.names.iter().zip(&self.cells) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_else(|| "-".into())));
            out.write_record(&rec)?;
        }
        let mut avg = vec!["Average".to_string()];
        avg.extend(self.average.iter().map(|v| v.to_string()));
        out.write_record(&avg)?;
        out.flush().map_err(|e| Error::io("transfer matrix", e))?;
        Ok(())
    }
}

/// Black-box transfer of per-instance attacks between models.
pub fn transfer_matrix(models: &[(String, &Model)], ds: &Dataset, attack: &InstanceAttack, seed: u64) -> Result<TransferMatrix> {
    if models.len() < 2 {
        return Err(Error::InvalidConfig("transfer matrix needs at least two models".into()));
    }
    let n = models.len();
    let mut cells = vec![vec![None; n]; n];
    for (s, (_, source)) in models.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64));
        let mut correct = vec![0usize; n];
        let mut start = 0;
        while start < ds.len() {
            let end = (start + EVAL_CHUNK).min(ds.len());
            let (x, labels) = ds.slice(start, end);
            let adv = attack.craft(source, &x, labels, &mut rng)?;
            for (t, (_, target)) in models.iter().enumerate() {
                if t != s {
                    let pred = target.predict(&adv)?;
                    correct[t] += pred.iter().zip(labels).filter(|(p, l)| p == l).count();
                }
            }
            start = end;
        }
        for t in (0..n).filter(|&t| t != s) {
            cells[t][s] = Some(correct[t] as f64 / ds.len().max(1) as f64);
        }
    }
    let average = (0..n)
        .map(|s| {
            let col: Vec<f64> = (0..n).filter_map(|t| cells[t][s]).collect();
            col.iter().sum::<f64>() / col.len() as f64
        })
        .collect();
    Ok(TransferMatrix {
        names: models.iter().map(|(name, _)| name.clone()).collect(),
        cells,
        average,
    })
}

/// One attacked-accuracy measurement of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// The swept value: beta, or the number of attack samples.
    pub value: f64,
    pub seed: u64,
    pub epochs: usize,
    pub accuracy: f64,
    pub fooling_ratio: f64,
}

/// Mean and range over seeds for one swept value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub parameter: String,
    pub points: Vec<SweepPoint>,
}

impl SweepTable {
    /// Summaries in the order values first appear.
    pub fn summary(&self) -> Vec<SweepSummary> {
        let mut values: Vec<f64> = Vec::new();
        for p in &self.points {
            if !values.iter().any(|v| same(*v, p.value)) {
                values.push(p.value);
            }
        }
        values
            .into_iter()
            .map(|value| {
                let accs: Vec<f64> = self
                    .points
                    .iter()
                    .filter(|p| same(p.value, value))
                    .map(|p| p.accuracy)
                    .collect();
                SweepSummary {
                    value,
                    mean: accs.iter().sum::<f64>() / accs.len() as f64,
                    min: accs.iter().copied().fold(f64::INFINITY, f64::min),
                    max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    seeds: accs.len(),
                }
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([self.parameter.as_str(), "mean_accuracy", "min_accuracy", "max_accuracy", "seeds"])?;
        for s in self.summary() {
            out.write_record([
                fmt_value(s.value),
                s.mean.to_string(),
                s.min.to_string(),
                s.max.to_string(),
                s.seeds.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("sweep", e))?;
        Ok(())
    }
}

fn same(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        v.to_string()
    }
}

fn attacked_point(
    model: &Model,
    attack_set: &Dataset,
    val: &Dataset,
    cfg: &UniversalAttackConfig,
    value: f64,
    seed: u64,
) -> Result<SweepPoint> {
    let outcome = universal_attack(model, attack_set, cfg)?;
    let row = evaluate(
        model,
        val,
        "sweep",
        &Threat::Universal {
            delta: outcome.state.into_delta(),
            clamp_inputs: cfg.clamp_inputs,
        },
    )?;
    Ok(SweepPoint {
        value,
        seed,
        epochs: cfg.epochs,
        accuracy: row.accuracy,
        fooling_ratio: row.fooling_ratio,
    })
}

/// Universal attack on `n` random training samples for each `(beta, seed)`,
/// scored on `val`. Only the data subset varies with the seed.
pub fn sweep_clipping(
    model: &Model,
    train: &Dataset,
    val: &Dataset,
    betas: &[f64],
    seeds: &[u64],
    n: usize,
    base: &UniversalAttackConfig,
) -> Result<SweepTable> {
    if !betas.iter().any(|b| b.is_infinite()) {
        return Err(Error::InvalidConfig("clipping sweep needs beta = inf as a baseline".into()));
    }
    let mut points = Vec::new();
    for &seed in seeds {
        let attack_set = subset(train, n, seed)?;
        for &beta in betas {
            let cfg = UniversalAttackConfig {
                beta,
                seed,
                ..*base
            };
            points.push(attacked_point(model, &attack_set, val, &cfg, beta, seed)?);
        }
    }
    Ok(SweepTable {
        parameter: "beta".into(),
        points,
    })
}

/// Epoch budget by attack-set size: 100 for up to 500 samples, 40 up to
/// 2000, 10 beyond.
pub fn epochs_for_size(n: usize) -> usize {
    match n {
        0..=500 => 100,
        501..=2000 => 40,
        _ => 10,
    }
}

/// Universal attack for each attack-set size, with the epoch budget scaled
/// by `epochs_for_size`.
pub fn sweep_data_size(
    model: &Model,
    train: &Dataset,
    val: &Dataset,
    sizes: &[usize],
    seeds: &[u64],
    base: &UniversalAttackConfig,
) -> Result<SweepTable> {
    if sizes.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidConfig("sizes must be ascending".into()));
    }
    if let Some(&big) = sizes.iter().find(|&&s| s > train.len()) {
        return Err(Error::NotEnoughSamples {
            requested: big,
            available: train.len(),
        });
    }
    let mut points = Vec::new();
    for &seed in seeds {
        for &n in sizes {
            let attack_set = subset(train, n, seed)?;
            let cfg = UniversalAttackConfig {
                epochs: epochs_for_size(n),
                seed,
                ..*base
            };
            points.push(attacked_point(model, &attack_set, val, &cfg, n as f64, seed)?);
        }
    }
    Ok(SweepTable {
        parameter: "n_samples".into(),
        points,
    })
}

/// Maps `[-eps, eps]` onto `[0, 255]` with `round(255 (v + eps) / (2 eps))`,
/// halves rounding up. Binary PGM for one channel, PPM for three.
pub fn perturbation_to_netpbm(delta: &Tensor, ball: &NormBall) -> Result<Vec<u8>> {
    let &[c, h, w] = delta.shape() else {
        return Err(Error::InvalidShape {
            shape: delta.shape().to_vec(),
            reason: "perturbation must be (C, H, W)".into(),
        });
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::InvalidShape {
                shape: delta.shape().to_vec(),
                reason: format!("{c} channels cannot be written as PGM/PPM"),
            })
        }
    };
    let eps = ball.eps;
    let quantize = |v: f32| -> u8 {
        if eps == 0.0 {
            return 128;
        }
        let q = (255.0 * (v as f64 + eps) / (2.0 * eps) + 0.5).floor();
        q.clamp(0.0, 255.0) as u8
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let data = delta.data();
    for i in 0..plane {
        for ch in 0..c {
            out.push(quantize(data[ch * plane + i]));
        }
    }
    Ok(out)
}

pub fn export_perturbation_image(delta: &Tensor, ball: &NormBall, path: impl AsRef<Path>) -> Result<()> {
    let bytes = perturbation_to_netpbm(delta, ball)?;
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parsed binary PGM/PPM with samples in channel-planar order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetpbmImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub planar: Vec<u8>,
}

pub fn parse_netpbm(bytes: &[u8]) -> Result<NetpbmImage> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated netpbm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported netpbm magic {other:?}"))),
    };
    let num = |s: String| -> Result<usize> { s.parse().map_err(|_| Error::Format(format!("bad netpbm number {s:?}"))) };
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the samples
    let body = &bytes[pos + 1..];
    let plane = width * height;
    if body.len() != plane * channels {
        return Err(Error::Format(format!(
            "netpbm body has {} bytes, expected {}",
            body.len(),
            plane * channels
        )));
    }
    let mut planar = vec![0u8; body.len()];
    for i in 0..plane {
        for ch in 0..channels {
            planar[ch * plane + i] = body[i * channels + ch];
        }
    }
    Ok(NetpbmImage {
        channels,
        height,
        width,
        planar,
    })
}

/// Inverse of the export map: `q * 2 eps / 255 - eps`.
pub fn netpbm_to_perturbation(bytes: &[u8], eps: f64) -> Result<Tensor> {
    let img = parse_netpbm(bytes)?;
    let data = img
        .planar
        .iter()
        .map(|&q| (q as f64 * 2.0 * eps / 255.0 - eps) as f32)
        .collect();
    Tensor::from_vec(vec![img.channels, img.height, img.width], data)
}
