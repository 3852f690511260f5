use serde::{Deserialize, Serialize};

use super::model::{ForwardPass, Gradients, Model, Want};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Cross-entropy capped per example at `beta`.
///
/// Examples whose loss reaches the cap contribute nothing to any gradient;
/// at `loss == beta` exactly the zero branch is taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClippedLoss {
    #[serde(with = "crate::serde_inf")]
    pub beta: f64,
}

impl ClippedLoss {
    pub const DEFAULT_BETA: f64 = 9.0;

    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "clip threshold must be positive, got {beta}"
            )));
        }
        Ok(Self { beta })
    }

    /// Plain cross-entropy.
    pub fn unclipped() -> Self {
        Self {
            beta: f64::INFINITY,
        }
    }

    pub fn is_clipped(&self, loss: f64) -> bool {
        loss >= self.beta
    }
}

impl Default for ClippedLoss {
    fn default() -> Self {
        Self::unclipped()
    }
}

/// Per-example and batch-mean clipped loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T: Element = f32> {
    pub mean: f64,
    pub per_example: Tensor<T>,
}

/// Loss, logits and gradients from one forward/backward pass.
#[derive(Debug, Clone)]
pub struct LossAndGrad<T: Element = f32> {
    pub loss: LossOutput<T>,
    pub logits: Tensor<T>,
    pub grads: Gradients<T>,
}

fn check_labels(labels: &[usize], batch: usize, num_classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            context: "labels".into(),
            expected: vec![batch],
            actual: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    Ok(())
}

/// Clipped cross-entropy of `(B, K)` logits and, optionally, the gradient of
/// the batch mean with respect to the logits.
pub fn cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
    clip: ClippedLoss,
    with_seed: bool,
) -> Result<(LossOutput<T>, Option<Tensor<T>>)> {
    let [batch, k] = match *logits.shape() {
        [b, k] => [b, k],
        _ => {
            return Err(Error::InvalidShape {
                shape: logits.shape().to_vec(),
                reason: "logits must be (B, K)".into(),
            })
        }
    };
    check_labels(labels, batch, k)?;
    let inv_batch = 1.0 / batch as f64;
    let mut per_example = Vec::with_capacity(batch);
    let mut seed = with_seed.then(|| vec![T::zero(); batch * k]);
    let mut total = 0.0;
    for (i, row) in logits.data().chunks(k).enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let sum_exp: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let ce = log_z - row[labels[i]].as_f64();
        let value = ce.min(clip.beta);
        total += value;
        per_example.push(T::of(value));
        if let Some(seed) = seed.as_mut() {
            if !clip.is_clipped(ce) {
                let out = &mut seed[i * k..(i + 1) * k];
                for (j, (o, v)) in out.iter_mut().zip(row).enumerate() {
                    let p = (v.as_f64() - log_z).exp();
                    let target = if j == labels[i] { 1.0 } else { 0.0 };
                    *o = T::of((p - target) * inv_batch);
                }
            }
        }
    }
    let seed = seed.map(|s| Tensor::from_vec(vec![batch, k], s)).transpose()?;
    Ok((
        LossOutput {
            mean: total * inv_batch,
            per_example: Tensor::from_vec(vec![batch], per_example)?,
        },
        seed,
    ))
}

/// Clipped loss of `model` on a batch.
pub fn loss<T: Element>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    clip: ClippedLoss,
) -> Result<LossOutput<T>> {
    let logits = model.forward(x)?;
    Ok(cross_entropy(&logits, labels, clip, false)?.0)
}

/// Gradients of the mean clipped loss with respect to parameters and input,
/// from a single backward pass.
pub fn backward<T: Element>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    clip: ClippedLoss,
) -> Result<Gradients<T>> {
    Ok(loss_and_grad(model, x, labels, clip, Want::BOTH)?.grads)
}

/// Forward, clipped loss and backward in one call.
pub fn loss_and_grad<T: Element>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    clip: ClippedLoss,
    want: Want,
) -> Result<LossAndGrad<T>> {
    let pass: ForwardPass<T> = model.forward_pass(x)?;
    let (loss, seed) = cross_entropy(pass.logits(), labels, clip, true)?;
    let grads = model.backward_pass(&pass, &seed.expect("seed requested"), want)?;
    if let Some(g) = &grads.input {
        g.check_finite("input gradient")?;
    }
    if let Some(ps) = &grads.params {
        for g in ps {
            g.check_finite("parameter gradient")?;
        }
    }
    Ok(LossAndGrad {
        loss,
        logits: pass.logits().clone(),
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[&[f64]]) -> Tensor<f64> {
        let k = rows[0].len();
        Tensor::from_vec(
            vec![rows.len(), k],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let l = logits(&[&[0.3; 10], &[-2.0; 10]]);
        let (out, _) = cross_entropy(&l, &[3, 9], ClippedLoss::unclipped(), false).unwrap();
        for &v in out.per_example.data() {
            assert!((v - 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_caps_large_losses_only() {
        // two classes with logit gap d give loss ln(1 + e^d)
        let big = (12f64.exp() - 1.0).ln();
        let small = (0.5f64.exp() - 1.0).ln();
        let l = logits(&[&[0.0, big], &[0.0, small]]);
        let clip = ClippedLoss::new(9.0).unwrap();
        let (out, seed) = cross_entropy(&l, &[0, 0], clip, true).unwrap();
        let pe = out.per_example.data();
        assert!((pe[0] - 9.0).abs() < 1e-12);
        assert!((pe[1] - 0.5).abs() < 1e-12);
        assert!((out.mean - 4.75).abs() < 1e-12);
        let seed = seed.unwrap();
        assert_eq!(&seed.data()[..2], &[0.0, 0.0]);
        assert!(seed.data()[2] != 0.0);
    }

    #[test]
    fn loss_exactly_at_beta_has_zero_gradient() {
        let l = logits(&[&[0.0, 0.0]]);
        let clip = ClippedLoss::new(2f64.ln()).unwrap();
        let (_, seed) = cross_entropy(&l, &[1], clip, true).unwrap();
        assert_eq!(seed.unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let l = logits(&[&[0.0, 0.0]]);
        let err = cross_entropy(&l, &[2], ClippedLoss::unclipped(), false).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 2, .. }));
    }

    #[test]
    fn non_positive_beta_is_rejected() {
        assert!(ClippedLoss::new(0.0).is_err());
        assert!(ClippedLoss::new(f64::NAN).is_err());
    }
}
