//! Declarative architectures and seeded weight initialisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{Layer, LayerKind, NetworkSpec};
use crate::tensor::Tensor;

/// Threshold every hidden layer starts from.
pub const INITIAL_MU: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerDesc {
    Dense {
        units: usize,
    },
    Conv2d {
        channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    MaxPool2d {
        window: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    Dropout {
        rate: f64,
    },
}

fn one() -> usize {
    1
}

/// Builds a network from hidden-layer descriptors followed by a dense readout
/// with `classes` outputs. Weights are He-normal, thresholds start at
/// [`INITIAL_MU`].
pub fn build_network(
    input_shape: &[usize],
    hidden: &[LayerDesc],
    classes: usize,
    seed: u64,
) -> Result<NetworkSpec> {
    if classes == 0 {
        return Err(Error::Config("network needs at least one output".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = input_shape.to_vec();
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    for desc in hidden {
        let layer = match *desc {
            LayerDesc::Dense { units } => {
                let fan_in: usize = shape.iter().product();
                Layer::dense(he_normal(&[units, fan_in], fan_in, &mut rng)?, Some(INITIAL_MU))
            }
            LayerDesc::Conv2d {
                channels,
                kernel,
                stride,
                padding,
            } => {
                let in_ch = *shape
                    .first()
                    .ok_or_else(|| Error::Config("conv layer after empty shape".into()))?;
                let fan_in = in_ch * kernel * kernel;
                let w = he_normal(&[channels, in_ch, kernel, kernel], fan_in, &mut rng)?;
                Layer::conv2d(w, stride, padding, Some(INITIAL_MU))
            }
            LayerDesc::MaxPool2d { window, stride } => Layer::maxpool2d(window, stride.unwrap_or(window)),
            LayerDesc::Dropout { rate } => Layer::dropout(rate),
        };
        shape = layer.kind.output_shape(&shape)?;
        layers.push(layer);
    }
    let fan_in: usize = shape.iter().product();
    layers.push(Layer::dense(he_normal(&[classes, fan_in], fan_in, &mut rng)?, None));
    NetworkSpec::new(input_shape.to_vec(), layers)
}

/// Multi-layer perceptron with the given hidden widths and optional dropout
/// after every hidden layer.
pub fn mlp(
    input_dim: usize,
    hidden: &[usize],
    classes: usize,
    dropout: Option<f64>,
    seed: u64,
) -> Result<NetworkSpec> {
    let mut descs = Vec::new();
    for &units in hidden {
        descs.push(LayerDesc::Dense { units });
        if let Some(rate) = dropout {
            descs.push(LayerDesc::Dropout { rate });
        }
    }
    build_network(&[input_dim], &descs, classes, seed)
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let sd = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()))?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

impl LayerKind {
    /// Number of output neurons of this layer for the given input shape.
    pub fn output_len(&self, input: &[usize]) -> Result<usize> {
        Ok(self.output_shape(input)?.iter().product())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Topology;

    #[test]
    fn vgg_style_stack_composes() {
        let hidden = [
            LayerDesc::Conv2d { channels: 4, kernel: 3, stride: 1, padding: 1 },
            LayerDesc::MaxPool2d { window: 2, stride: None },
            LayerDesc::Dropout { rate: 0.1 },
            LayerDesc::Conv2d { channels: 8, kernel: 3, stride: 1, padding: 1 },
            LayerDesc::MaxPool2d { window: 2, stride: None },
            LayerDesc::Dense { units: 16 },
        ];
        let net = build_network(&[1, 8, 8], &hidden, 3, 0).unwrap();
        let shapes = net.shapes().unwrap();
        assert_eq!(shapes[1], vec![4, 8, 8]);
        assert_eq!(shapes[2], vec![4, 4, 4]);
        assert_eq!(shapes[5], vec![8, 2, 2]);
        assert_eq!(net.output_shape().unwrap(), vec![3]);
        assert_eq!(net.thresholded_layers(), vec![0, 3, 5]);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = mlp(4, &[8], 2, None, 9).unwrap();
        let b = mlp(4, &[8], 2, None, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, mlp(4, &[8], 2, None, 10).unwrap());
    }
}
