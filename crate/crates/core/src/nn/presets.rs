use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::LayerSpec;
use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::Element;

/// Fixed architecture recipes.
///
/// `Lenet` (input 1x28x28):
/// conv 1->6 k5 | relu | pool | conv 6->16 k5 | relu | pool | dense 256->100 | relu | dense 100->10
///
/// `SmallconvCifar` (input 3x32x32):
/// conv 3->16 k3 p1 | relu | conv 16->16 k3 p1 | relu | pool |
/// conv 16->32 k3 p1 | relu | conv 32->32 k3 p1 | relu | pool |
/// dense 2048->128 | relu | dense 128->10
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Lenet,
    SmallconvCifar,
}

impl Arch {
    pub fn input_shape(self) -> [usize; 3] {
        match self {
            Arch::Lenet => [1, 28, 28],
            Arch::SmallconvCifar => [3, 32, 32],
        }
    }

    pub fn layers(self) -> Vec<LayerSpec> {
        use LayerSpec::*;
        let conv = |i, o, k, p| Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride: 1,
            padding: p,
        };
        match self {
            Arch::Lenet => vec![
                conv(1, 6, 5, 0),
                Relu,
                MaxPool2x2,
                conv(6, 16, 5, 0),
                Relu,
                MaxPool2x2,
                Flatten,
                Dense {
                    inputs: 256,
                    outputs: 100,
                },
                Relu,
                Dense {
                    inputs: 100,
                    outputs: 10,
                },
            ],
            Arch::SmallconvCifar => vec![
                conv(3, 16, 3, 1),
                Relu,
                conv(16, 16, 3, 1),
                Relu,
                MaxPool2x2,
                conv(16, 32, 3, 1),
                Relu,
                conv(32, 32, 3, 1),
                Relu,
                MaxPool2x2,
                Flatten,
                Dense {
                    inputs: 2048,
                    outputs: 128,
                },
                Relu,
                Dense {
                    inputs: 128,
                    outputs: 10,
                },
            ],
        }
    }

    pub fn build<T: Element, R: Rng + ?Sized>(self, rng: &mut R) -> Result<Model<T>> {
        Model::new(&self.input_shape(), self.layers(), rng)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Lenet => "lenet",
            Arch::SmallconvCifar => "smallconv_cifar",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lenet" => Ok(Arch::Lenet),
            "smallconv_cifar" => Ok(Arch::SmallconvCifar),
            other => Err(Error::InvalidConfig(format!("unknown architecture {other:?}"))),
        }
    }
}
