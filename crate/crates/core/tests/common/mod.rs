#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unip_core::data::{Dataset, Split};
use unip_core::nn::{LayerSpec, Model};
use unip_core::{Element, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Element>(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(r.random_range(lo..hi))).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

pub fn conv(i: usize, o: usize, k: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride,
        padding,
    }
}

/// 1x8x8 input, 3 classes.
pub fn tiny_layers() -> Vec<LayerSpec> {
    vec![
        conv(1, 4, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Flatten,
        LayerSpec::Dense { inputs: 64, outputs: 3 },
    ]
}

pub fn tiny_model(seed: u64) -> Model {
    Model::new(&[1, 8, 8], tiny_layers(), &mut rng(seed)).unwrap()
}

/// Three classes of 8x8 images: a bright row band, a bright column band, or a
/// bright diagonal, with uniform noise.
pub fn synthetic_dataset(n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 3;
        let offset = r.random_range(0..6usize);
        for y in 0..8 {
            for x in 0..8 {
                let on = match label {
                    0 => y >= offset && y < offset + 2,
                    1 => x >= offset && x < offset + 2,
                    _ => x == y || x + 1 == y,
                };
                let base = if on { 0.8 } else { 0.1 };
                let v: f32 = base + r.random_range(-0.1..0.1);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    let images = Tensor::from_vec(vec![n, 1, 8, 8], data).unwrap();
    Dataset::new("synthetic", Split::Train, images, labels, 3).unwrap()
}

pub fn accuracy(model: &Model, ds: &Dataset) -> f64 {
    let pred = model.predict(ds.images()).unwrap();
    pred.iter().zip(ds.labels()).filter(|(p, l)| p == l).count() as f64 / ds.len() as f64
}
