use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{nchw_to_nhwc, Conv2d, Init, Layer, LayerCache, Linear, MaxPool2, Param};
use crate::error::{Error, Result};

/// Backbone architecture description. Stored in checkpoint metadata so a
/// model skeleton can be rebuilt before its parameters are loaded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneArch {
    /// Perceptron over the flattened image: `Linear -> ReLU` per hidden layer.
    Mlp { input_dim: usize, hidden: Vec<usize> },
    /// `conv3x3 -> ReLU -> maxpool2` per entry of `channels`.
    Cnn { in_channels: usize, height: usize, width: usize, channels: Vec<usize> },
}

impl BackboneArch {
    pub fn mlp(input_dim: usize, hidden: [usize; 2]) -> Self {
        BackboneArch::Mlp { input_dim, hidden: hidden.to_vec() }
    }

    pub fn cnn(in_channels: usize, height: usize, width: usize, channels: [usize; 3]) -> Self {
        BackboneArch::Cnn { in_channels, height, width, channels: channels.to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BackboneArch::Mlp { input_dim, hidden } => {
                if *input_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::invalid("mlp backbone needs a positive input dim and hidden sizes"));
                }
            }
            BackboneArch::Cnn { in_channels, height, width, channels } => {
                let div = 1usize << channels.len();
                if *in_channels == 0 || channels.is_empty() || channels.contains(&0) {
                    return Err(Error::invalid("cnn backbone needs positive channel counts"));
                }
                if height % div != 0 || width % div != 0 || *height == 0 || *width == 0 {
                    return Err(Error::invalid(format!(
                        "cnn input {height}x{width} must be divisible by {div} for {} pooling stages",
                        channels.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Flattened length of one input sample.
    pub fn input_len(&self) -> usize {
        match self {
            BackboneArch::Mlp { input_dim, .. } => *input_dim,
            BackboneArch::Cnn { in_channels, height, width, .. } => in_channels * height * width,
        }
    }

    /// Dimension of the flatten representation fed to the classifier.
    pub fn flatten_dim(&self) -> usize {
        match self {
            BackboneArch::Mlp { hidden, .. } => *hidden.last().expect("validated"),
            BackboneArch::Cnn { height, width, channels, .. } => {
                let div = 1usize << channels.len();
                channels.last().expect("validated") * (height / div) * (width / div)
            }
        }
    }
}

/// Feature extractor producing the flatten representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    arch: BackboneArch,
    layers: Vec<Layer>,
}

pub(crate) struct BackboneCache(Vec<LayerCache>);

impl Backbone {
    pub fn new(arch: BackboneArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::new();
        match &arch {
            BackboneArch::Mlp { input_dim, hidden } => {
                let mut prev = *input_dim;
                for &h in hidden {
                    layers.push(Layer::Linear(Linear::new(prev, h, Init::HeUniform, rng)));
                    layers.push(Layer::Relu);
                    prev = h;
                }
            }
            BackboneArch::Cnn { in_channels, height, width, channels } => {
                let (mut c, mut h, mut w) = (*in_channels, *height, *width);
                for &out in channels {
                    layers.push(Layer::Conv(Conv2d::new(c, out, h, w, rng)));
                    layers.push(Layer::Relu);
                    layers.push(Layer::MaxPool(MaxPool2 { channels: out, height: h, width: w }));
                    c = out;
                    h /= 2;
                    w /= 2;
                }
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn arch(&self) -> &BackboneArch {
        &self.arch
    }

    pub fn flatten_dim(&self) -> usize {
        self.arch.flatten_dim()
    }

    fn prepare(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        if x.ncols() != self.arch.input_len() {
            return Err(Error::invalid(format!(
                "backbone expects {} input values per sample, got {}",
                self.arch.input_len(),
                x.ncols()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::invalid("empty input batch"));
        }
        Ok(match &self.arch {
            BackboneArch::Mlp { .. } => x.clone(),
            BackboneArch::Cnn { in_channels, height, width, .. } => {
                nchw_to_nhwc(x, *in_channels, *height, *width)
            }
        })
    }

    /// Flatten representation of an NCHW-flattened input batch.
    pub fn forward(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        let mut h = self.prepare(x)?;
        for layer in &self.layers {
            h = layer.forward(&h);
        }
        Ok(h)
    }

    pub(crate) fn forward_train(&self, x: &Array2<f32>) -> Result<(Array2<f32>, BackboneCache)> {
        let mut h = self.prepare(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward_train(h);
            caches.push(cache);
            h = y;
        }
        Ok((h, BackboneCache(caches)))
    }

    /// Accumulates parameter gradients; the input gradient is not needed.
    pub(crate) fn backward(&mut self, cache: BackboneCache, grad: Array2<f32>) {
        let mut g = grad;
        for (i, (layer, c)) in self.layers.iter_mut().zip(cache.0.iter()).enumerate().rev() {
            match layer.backward(c, g, i > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
    }

    /// Parameters named `<index>.weight` / `<index>.bias`, indexed by layer position.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |(n, p)| (format!("{i}.{n}"), p)))
            .collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.params_mut().into_iter().map(move |(n, p)| (format!("{i}.{n}"), p)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn flatten_dims() {
        assert_eq!(BackboneArch::mlp(12, [32, 16]).flatten_dim(), 16);
        assert_eq!(BackboneArch::cnn(1, 16, 16, [8, 16, 32]).flatten_dim(), 32 * 2 * 2);
    }

    #[test]
    fn cnn_requires_divisible_input() {
        let arch = BackboneArch::cnn(1, 12, 12, [4, 4, 4]);
        assert!(arch.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_input_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(BackboneArch::cnn(3, 8, 8, [4, 6, 8]), &mut rng).unwrap();
        let x = Array2::<f32>::ones((5, 3 * 8 * 8));
        assert_eq!(bb.forward(&x).unwrap().dim(), (5, 8));
        assert!(bb.forward(&Array2::<f32>::ones((5, 10))).is_err());
    }

    #[test]
    fn train_forward_matches_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bb = Backbone::new(BackboneArch::cnn(2, 8, 8, [3, 4, 5]), &mut rng).unwrap();
        let x = Param::uniform(4, 2 * 64, 1.0, &mut rng).value;
        let (a, _) = bb.forward_train(&x).unwrap();
        assert_eq!(a, bb.forward(&x).unwrap());
    }
}
