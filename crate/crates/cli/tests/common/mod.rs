#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn idx_images(n: usize, pixels: &[u8]) -> Vec<u8> {
    let mut v = 0x0803u32.to_be_bytes().to_vec();
    for d in [n as u32, 28, 28] {
        v.extend(d.to_be_bytes());
    }
    v.extend(pixels);
    v
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut v = 0x0801u32.to_be_bytes().to_vec();
    v.extend((labels.len() as u32).to_be_bytes());
    v.extend(labels);
    v
}

/// Ten easy classes: a bright 6x6 block whose position encodes the label.
fn digits(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 10) as u8;
        let (by, bx) = (2 + (label as usize / 5) * 12, 1 + (label as usize % 5) * 5);
        for y in 0..28 {
            for x in 0..28 {
                let on = (by..by + 6).contains(&y) && (bx..bx + 5).contains(&x);
                let base: i32 = if on { 220 } else { 20 };
                pixels.push((base + rng.random_range(-20..20)).clamp(0, 255) as u8);
            }
        }
        labels.push(label);
    }
    (pixels, labels)
}

/// Writes a small MNIST-format dataset under `<root>/mnist`.
pub fn fake_mnist(root: &Path, n_train: usize, n_val: usize) {
    let dir = root.join("mnist");
    std::fs::create_dir_all(&dir).unwrap();
    for (prefix, n, seed) in [("train", n_train, 1), ("t10k", n_val, 2)] {
        let (pixels, labels) = digits(n, seed);
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), idx_images(n, &pixels)).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx_labels(&labels)).unwrap();
    }
}

pub fn unip(data_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unip"))
        .args(args)
        .env("UNIP_DATA_DIR", data_root)
        .output()
        .expect("binary runs")
}

pub fn ok(data_root: &Path, args: &[&str]) -> Output {
    let out = unip(data_root, args);
    assert!(
        out.status.success(),
        "unip {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every file under `dir`, relative, sorted.
pub fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// File contents with run-specific parts removed: the `out` entry of the
/// config echo and the wall-clock column of CSV reports.
pub fn stable_contents(dir: &Path, rel: &Path) -> Vec<u8> {
    let bytes = std::fs::read(dir.join(rel)).unwrap();
    let name = rel.to_string_lossy();
    if name == "config.echo" {
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        v.as_object_mut().unwrap().remove("out");
        return v.to_string().into_bytes();
    }
    if name.ends_with(".csv") {
        let text = String::from_utf8(bytes).unwrap();
        let header: Vec<&str> = text.lines().find(|l| !l.starts_with('#')).unwrap_or("").split(',').collect();
        if let Some(col) = header.iter().position(|h| *h == "wall_clock_s") {
            return text
                .lines()
                .map(|l| {
                    let mut cells: Vec<&str> = l.split(',').collect();
                    if cells.len() == header.len() {
                        cells.remove(col);
                    }
                    cells.join(",")
                })
                .collect::<Vec<_>>()
                .join("\n")
                .into_bytes();
        }
        return text.into_bytes();
    }
    bytes
}

pub fn assert_same_outputs(a: &Path, b: &Path) {
    let fa = files(a);
    assert_eq!(fa, files(b));
    for rel in &fa {
        assert!(stable_contents(a, rel) == stable_contents(b, rel), "{} differs", rel.display());
    }
}
