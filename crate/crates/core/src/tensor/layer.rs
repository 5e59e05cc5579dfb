use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

/// 2-D cross-correlation with zero padding. Weights are laid out
/// `[out_channel][in_channel][ky][kx]`, so one filter is a contiguous block.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if self.stride == 0 || ph < self.kernel || pw < self.kernel {
            return None;
        }
        Some(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }
}

/// Fully connected layer; weights laid out `[output][input]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    Relu,
    Flatten,
}

impl Layer {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Conv2d(_) | Layer::Dense(_))
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(c) => {
                let [ch, h, w] = input else {
                    return Err(Error::Network(format!("conv2d expects a [C, H, W] input, got {input:?}")));
                };
                if *ch != c.in_channels {
                    return Err(Error::Network(format!(
                        "conv2d expects {} input channels, got {ch}",
                        c.in_channels
                    )));
                }
                let (oh, ow) = c
                    .output_hw(*h, *w)
                    .ok_or_else(|| Error::Network(format!("conv2d kernel does not fit {h}x{w} input")))?;
                Ok(vec![c.out_channels, oh, ow])
            }
            Layer::Dense(d) => {
                if input.len() != 1 || input[0] != d.inputs {
                    return Err(Error::Network(format!(
                        "dense expects a flat input of {} features, got {input:?}",
                        d.inputs
                    )));
                }
                Ok(vec![d.outputs])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Number of quantization units: filters for conv, neurons for dense.
    pub fn units(&self) -> usize {
        match self {
            Layer::Conv2d(c) => c.out_channels,
            Layer::Dense(d) => d.outputs,
            _ => 0,
        }
    }

    pub fn weights_per_unit(&self) -> usize {
        match self {
            Layer::Conv2d(c) => c.in_channels * c.kernel * c.kernel,
            Layer::Dense(d) => d.inputs,
            _ => 0,
        }
    }

    pub fn weight(&self) -> &[f64] {
        match self {
            Layer::Conv2d(c) => &c.weight,
            Layer::Dense(d) => &d.weight,
            _ => &[],
        }
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        match self {
            Layer::Conv2d(c) => &mut c.weight,
            Layer::Dense(d) => &mut d.weight,
            _ => &mut [],
        }
    }

    pub fn bias(&self) -> &[f64] {
        match self {
            Layer::Conv2d(c) => &c.bias,
            Layer::Dense(d) => &d.bias,
            _ => &[],
        }
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        match self {
            Layer::Conv2d(c) => &mut c.bias,
            Layer::Dense(d) => &mut d.bias,
            _ => &mut [],
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(c) => LayerSpec::Conv {
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
            },
            Layer::Dense(d) => LayerSpec::Dense { outputs: d.outputs },
            Layer::Relu => LayerSpec::Relu,
            Layer::Flatten => LayerSpec::Flatten,
        }
    }
}

/// Weight-free description of a layer, used to build networks from an
/// architecture string such as `conv:8:3:1:1,relu,flatten,dense:10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Dense { outputs: usize },
    Relu,
    Flatten,
}

impl LayerSpec {
    /// Materialize the layer for a given input shape with He-uniform weights
    /// (bound `sqrt(6 / fan_in)`) and zero biases.
    pub fn init<R: Rng + ?Sized>(&self, input: &[usize], rng: &mut R) -> Result<Layer> {
        let layer = match *self {
            LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                let in_channels = *input.first().ok_or_else(|| Error::Network("conv2d on empty shape".into()))?;
                let fan_in = in_channels * kernel * kernel;
                Layer::Conv2d(Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    weight: he_uniform(out_channels * fan_in, fan_in, rng),
                    bias: vec![0.0; out_channels],
                })
            }
            LayerSpec::Dense { outputs } => {
                let inputs: usize = input.iter().product();
                Layer::Dense(Dense {
                    inputs,
                    outputs,
                    weight: he_uniform(outputs * inputs, inputs, rng),
                    bias: vec![0.0; outputs],
                })
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Flatten => Layer::Flatten,
        };
        layer.output_shape(input)?;
        Ok(layer)
    }
}

fn he_uniform<R: Rng + ?Sized>(count: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..count).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                write!(f, "conv:{out_channels}:{kernel}:{stride}:{padding}")
            }
            LayerSpec::Dense { outputs } => write!(f, "dense:{outputs}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::Config(format!("bad layer spec `{s}`")))
        };
        match parts[0] {
            "conv" if parts.len() == 5 => Ok(LayerSpec::Conv {
                out_channels: num(1)?,
                kernel: num(2)?,
                stride: num(3)?,
                padding: num(4)?,
            }),
            "dense" if parts.len() == 2 => Ok(LayerSpec::Dense { outputs: num(1)? }),
            "relu" if parts.len() == 1 => Ok(LayerSpec::Relu),
            "flatten" if parts.len() == 1 => Ok(LayerSpec::Flatten),
            _ => Err(Error::Config(format!("bad layer spec `{s}`"))),
        }
    }
}

/// Parse a comma separated architecture string.
pub fn parse_architecture(s: &str) -> Result<Vec<LayerSpec>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

pub fn format_architecture(specs: &[LayerSpec]) -> String {
    specs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architecture_string_round_trips() {
        let s = "conv:8:3:1:1,relu,flatten,dense:10";
        let specs = parse_architecture(s).unwrap();
        assert_eq!(specs.len(), 4);
        assert_eq!(format_architecture(&specs), s);
    }

    #[test]
    fn rejects_malformed_layer() {
        assert!(parse_architecture("conv:8:3").is_err());
        assert!(parse_architecture("pool:2").is_err());
    }

    #[test]
    fn conv_output_shape_with_stride_and_padding() {
        let c = Conv2d {
            in_channels: 2,
            out_channels: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
            weight: vec![0.0; 72],
            bias: vec![0.0; 4],
        };
        assert_eq!(Layer::Conv2d(c).output_shape(&[2, 16, 16]).unwrap(), vec![4, 8, 8]);
    }
}
