use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One entry of a model's layer stack.
///
/// Parametric layers (`Dense`, `Conv2d`) own exactly one parameter tensor that
/// packs weights and bias together: each output unit is a row whose last
/// element is the bias.
///
/// * `Dense { inputs, outputs }` has parameters `[outputs, inputs + 1]`. Its
///   input is flattened per example, so it may directly follow a 3-D
///   activation whose element count equals `inputs`.
/// * `Conv2d` has parameters `[out_channels, in_channels * kernel * kernel + 1]`,
///   weight row layout `(in_channel, kernel_row, kernel_col)`. Padding is
///   explicit zero padding on all four sides; the output side length is
///   `(side + 2 * padding - kernel) / stride + 1`.
/// * `MaxPool2x2` uses a 2x2 window with stride 2; an odd trailing row or
///   column is dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Flatten,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Shape of the packed weight+bias tensor, if any.
    pub fn param_shape(&self) -> Option<[usize; 2]> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some([outputs, inputs + 1]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some([out_channels, in_channels * kernel * kernel + 1]),
            _ => None,
        }
    }

    /// Fan-in of one output unit, excluding the bias.
    pub(crate) fn fan_in(&self) -> usize {
        self.param_shape().map(|s| s[1] - 1).unwrap_or(0)
    }

    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let err = |reason: String| Error::Layer {
            index,
            layer: self.name().to_string(),
            reason,
        };
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let n: usize = input.iter().product();
                if n != inputs {
                    return Err(err(format!(
                        "expects {inputs} input features, previous layer produces {input:?} ({n})"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                stride,
                padding,
                out_channels,
            } => {
                let [c, h, w] = as_chw(input).ok_or_else(|| {
                    err(format!("expects a (C, H, W) input, got {input:?}"))
                })?;
                if c != in_channels {
                    return Err(err(format!(
                        "expects {in_channels} input channels, got {c}"
                    )));
                }
                if kernel == 0 || stride == 0 {
                    return Err(err("kernel and stride must be positive".into()));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(err(format!(
                        "kernel {kernel} larger than padded input {h}x{w} (padding {padding})"
                    )));
                }
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                Ok(vec![out_channels, oh, ow])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2x2 => {
                let [c, h, w] = as_chw(input).ok_or_else(|| {
                    err(format!("expects a (C, H, W) input, got {input:?}"))
                })?;
                if h < 2 || w < 2 {
                    return Err(err(format!("input {h}x{w} too small to pool")));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn as_chw(shape: &[usize]) -> Option<[usize; 3]> {
    match *shape {
        [c, h, w] => Some([c, h, w]),
        _ => None,
    }
}
