use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a sequential network.
///
/// `BatchNorm` normalizes per feature for `[N, F]` inputs and per channel for
/// `[N, C, H, W]` inputs. Convolutions use no padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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
    },
    Relu,
    Flatten,
    Dropout {
        rate: f32,
    },
    BatchNorm {
        features: usize,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::BatchNorm { .. } => "batchnorm",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(Error::shape("dense input", &[inputs], input));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(Error::shape("conv2d input", &[in_channels, 0, 0], input));
                }
                if kernel == 0 || stride == 0 {
                    return Err(Error::Config("conv2d kernel and stride must be positive".into()));
                }
                let (h, w) = (input[1], input[2]);
                if h < kernel || w < kernel {
                    return Err(Error::shape(
                        "conv2d input smaller than kernel",
                        &[in_channels, kernel, kernel],
                        input,
                    ));
                }
                Ok(vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::BatchNorm { features } => {
                let ok = match input.len() {
                    1 | 3 => input[0] == features,
                    _ => false,
                };
                if !ok {
                    return Err(Error::shape("batchnorm input", &[features], input));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// `(fan_in, fan_out)` for layers with Xavier-initialized weights.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((inputs, outputs)),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((in_channels * kernel * kernel, out_channels * kernel * kernel)),
            _ => None,
        }
    }
}

/// Shapes flowing through a stack, starting with `input` (per sample).
pub fn infer_shapes(specs: &[LayerSpec], input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![input.to_vec()];
    for spec in specs {
        let next = spec.output_shape(shapes.last().expect("non-empty"))?;
        shapes.push(next);
    }
    Ok(shapes)
}

/// Named convolutional feature extractors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    /// [`compact_conv_stack`].
    #[default]
    Compact,
    /// [`small_conv_stack`].
    Small,
    /// [`large_conv_stack`].
    Large,
}

impl Extractor {
    pub fn layers(self, channels: usize) -> Vec<LayerSpec> {
        match self {
            Extractor::Compact => compact_conv_stack(channels),
            Extractor::Small => small_conv_stack(channels),
            Extractor::Large => large_conv_stack(channels),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Extractor::Compact => "compact",
            Extractor::Small => "small",
            Extractor::Large => "large",
        }
    }
}

impl std::str::FromStr for Extractor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compact" => Ok(Extractor::Compact),
            "small" => Ok(Extractor::Small),
            "large" => Ok(Extractor::Large),
            _ => Err(Error::Config(format!(
                "unknown extractor `{s}` (compact, small, large)"
            ))),
        }
    }
}

/// Table 1's three-convolution stack. Needs inputs of at least 36x36.
pub fn large_conv_stack(channels: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            in_channels: channels,
            out_channels: 32,
            kernel: 8,
            stride: 4,
        },
        LayerSpec::Relu,
        LayerSpec::Conv2d {
            in_channels: 32,
            out_channels: 64,
            kernel: 4,
            stride: 2,
        },
        LayerSpec::Relu,
        LayerSpec::Conv2d {
            in_channels: 64,
            out_channels: 64,
            kernel: 3,
            stride: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Flatten,
    ]
}

/// Two 3x3 stride-1 convolutions sized for 8x8 grid observations.
pub fn compact_conv_stack(channels: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            in_channels: channels,
            out_channels: 16,
            kernel: 3,
            stride: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Conv2d {
            in_channels: 16,
            out_channels: 32,
            kernel: 3,
            stride: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Flatten,
    ]
}

/// A single 3x3 convolution with 8 filters.
pub fn small_conv_stack(channels: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            in_channels: channels,
            out_channels: 8,
            kernel: 3,
            stride: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Flatten,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compact_stack_on_8x8_grid() {
        let shapes = infer_shapes(&compact_conv_stack(8), &[8, 8, 8]).unwrap();
        assert_eq!(shapes.last().unwrap(), &vec![32 * 4 * 4]);
    }

    #[test]
    fn large_stack_rejects_small_grid() {
        assert!(infer_shapes(&large_conv_stack(8), &[8, 8, 8]).is_err());
        let shapes = infer_shapes(&large_conv_stack(8), &[8, 36, 36]).unwrap();
        assert_eq!(shapes.last().unwrap(), &vec![64]);
    }

    #[test]
    fn dropout_rate_must_be_below_one() {
        assert!(LayerSpec::Dropout { rate: 1.0 }.output_shape(&[4]).is_err());
        assert!(LayerSpec::Dropout { rate: 0.3 }.output_shape(&[4]).is_ok());
    }
}
