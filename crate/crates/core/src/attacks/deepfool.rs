use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Model, Want};
use crate::tensor::{Element, Tensor};

/// Outcome of a single DeepFool run.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepFoolResult<T: Element = f32> {
    /// Perturbation shaped like one example, overshoot already applied.
    pub r: Tensor<T>,
    /// Whether `x + r` is classified differently from `x`.
    pub fooled: bool,
    pub iterations: usize,
    pub original_label: usize,
}

/// Logits of one example `(C, H, W)` and their gradients `(K, C, H, W)`.
///
/// The example is replicated once per class so a single backward pass with an
/// identity seed yields every row of the Jacobian.
pub fn logit_jacobian<T: Element>(model: &Model<T>, x: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
    x.expect_shape(model.input_shape(), "deepfool input")?;
    let k = model.num_classes();
    let mut shape = vec![k];
    shape.extend_from_slice(x.shape());
    let mut data = Vec::with_capacity(k * x.len());
    for _ in 0..k {
        data.extend_from_slice(x.data());
    }
    let batch = Tensor::from_vec(shape, data)?;
    let pass = model.forward_pass(&batch)?;
    let logits = pass.logits().data()[..k].to_vec();
    let mut seed = Tensor::zeros(&[k, k]);
    for i in 0..k {
        seed.data_mut()[i * k + i] = T::one();
    }
    let jac = model
        .backward_pass(&pass, &seed, Want::INPUT)?
        .input
        .expect("input gradient requested");
    Ok((logits, jac))
}

/// Multiclass l2 DeepFool.
///
/// Each iteration linearizes `f_k - f_k0` around the current point and moves
/// to the nearest linearized boundary. The accumulated step is scaled by
/// `1 + overshoot`. Runs until the label changes or `max_iter` iterations.
pub fn deepfool<T: Element>(
    model: &Model<T>,
    x: &Tensor<T>,
    max_iter: usize,
    overshoot: f64,
) -> Result<DeepFoolResult<T>> {
    if !(overshoot >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "overshoot must be non-negative, got {overshoot}"
        )));
    }
    let n = x.len();
    let k = model.num_classes();
    let scale = T::of(1.0 + overshoot);
    let batch_shape: Vec<usize> = std::iter::once(1).chain(x.shape().iter().copied()).collect();
    let original_label = argmax_rows(&model.forward(&x.clone().reshape(&batch_shape)?)?)[0];
    let mut r_tot = vec![0f64; n];
    let mut iterations = 0;
    let mut fooled = false;
    let current = |r_tot: &[f64]| -> Result<Tensor<T>> {
        let data = x
            .data()
            .iter()
            .zip(r_tot)
            .map(|(&xi, &ri)| xi + scale * T::of(ri))
            .collect();
        Tensor::from_vec(x.shape().to_vec(), data)
    };
    while iterations < max_iter {
        let point = current(&r_tot)?;
        let (logits, jac) = logit_jacobian(model, &point)?;
        if argmax_rows(&Tensor::from_vec(vec![1, k], logits.clone())?)[0] != original_label {
            fooled = true;
            break;
        }
        let g0 = &jac.data()[original_label * n..(original_label + 1) * n];
        let f0 = logits[original_label].as_f64();
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        for c in (0..k).filter(|&c| c != original_label) {
            let gc = &jac.data()[c * n..(c + 1) * n];
            let w: Vec<f64> = gc.iter().zip(g0).map(|(a, b)| a.as_f64() - b.as_f64()).collect();
            let w_norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if w_norm == 0.0 {
                continue;
            }
            let f = logits[c].as_f64() - f0;
            let dist = f.abs() / w_norm;
            if best.as_ref().is_none_or(|(d, _, _)| dist < *d) {
                best = Some((dist, f.abs() / (w_norm * w_norm), w));
            }
        }
        iterations += 1;
        let Some((_, step, w)) = best else {
            // flat logits: no direction to move in
            break;
        };
        for (acc, wi) in r_tot.iter_mut().zip(&w) {
            *acc += step * wi;
        }
    }
    if !fooled && iterations == max_iter {
        let point = current(&r_tot)?.reshape(&batch_shape)?;
        fooled = argmax_rows(&model.forward(&point)?)[0] != original_label;
    }
    let r = Tensor::from_vec(
        x.shape().to_vec(),
        r_tot.iter().map(|&v| scale * T::of(v)).collect(),
    )?;
    Ok(DeepFoolResult {
        r,
        fooled,
        iterations,
        original_label,
    })
}
