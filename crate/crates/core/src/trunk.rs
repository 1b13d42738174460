//! Convolutional feature extractor shared by the intent scorer and the trajectory
//! image encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::leaky_relu_gain;
use crate::nn::{BatchNorm, Conv2d, Graph, ParamStore, Tensor, Var};
use crate::raster::SemanticImage;

/// `channels[i]` output channels with a `kernels[i]`×`kernels[i]` same-padded
/// convolution per block, each followed by batch norm, dropout, leaky ReLU and a 2×2
/// max pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvTrunkConfig {
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl Default for ConvTrunkConfig {
    fn default() -> Self {
        Self { channels: vec![8, 8, 3], kernels: vec![7, 5, 3], dropout: 0.2, leaky_slope: 0.01 }
    }
}

impl ConvTrunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.kernels.len() {
            return Err(Error::InvalidConfig("trunk needs one kernel size per block".into()));
        }
        if self.kernels.iter().any(|k| k % 2 == 0) || self.channels.contains(&0) {
            return Err(Error::InvalidConfig("trunk kernels must be odd and channels positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Side length of the final feature map for an `n`×`n` input.
    pub fn output_side(&self, n: usize) -> usize {
        self.channels.iter().fold(n, |s, _| s / 2)
    }

    /// Length of the flattened output for an `n`×`n` input.
    pub fn flatten_len(&self, n: usize) -> usize {
        let s = self.output_side(n);
        self.channels.last().copied().unwrap_or(0) * s * s
    }
}

#[derive(Debug, Clone)]
pub struct ConvTrunk {
    blocks: Vec<(Conv2d, BatchNorm)>,
    dropout: f64,
    slope: f64,
    image_side: usize,
    out_len: usize,
}

impl ConvTrunk {
    pub fn new(store: &mut ParamStore<f32>, name: &str, cfg: &ConvTrunkConfig, image_side: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.output_side(image_side) == 0 {
            return Err(Error::InvalidConfig(format!("{image_side}px images vanish after {} pools", cfg.channels.len())));
        }
        let gain = leaky_relu_gain(cfg.leaky_slope);
        let mut c_in = 3;
        let mut blocks = Vec::new();
        for (i, (&c, &k)) in cfg.channels.iter().zip(&cfg.kernels).enumerate() {
            let conv = Conv2d::new(store, &format!("{name}.conv{i}"), c_in, c, k, 1, k / 2, gain, rng);
            let bn = BatchNorm::new(store, &format!("{name}.bn{i}"), c);
            blocks.push((conv, bn));
            c_in = c;
        }
        Ok(Self { blocks, dropout: cfg.dropout, slope: cfg.leaky_slope, image_side, out_len: cfg.flatten_len(image_side) })
    }

    pub fn image_side(&self) -> usize {
        self.image_side
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    /// `images: [B, 3, n, n] -> [B, flatten]`
    pub fn forward(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, images: Var) -> Result<Var> {
        let batch = g.shape(images)[0];
        let mut x = images;
        for (conv, bn) in &self.blocks {
            x = conv.forward(g, store, x)?;
            x = bn.forward(g, store, x)?;
            x = g.dropout(x, self.dropout);
            x = g.leaky_relu(x, self.slope as f32);
            x = g.max_pool2(x)?;
        }
        g.reshape(x, &[batch, self.out_len])
    }
}

/// Stacks images into a `[B, 3, n, n]` tensor scaled to `[0, 1]`.
pub fn image_batch<'a>(images: impl IntoIterator<Item = &'a SemanticImage>, side: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut count = 0;
    for img in images {
        if img.spec().n() != side {
            return Err(Error::ShapeMismatch { op: "image_batch", lhs: vec![3, img.spec().n(), img.spec().n()], rhs: vec![3, side, side] });
        }
        data.extend(img.raw().iter().map(|&v| v as f32 / 255.0));
        count += 1;
    }
    Tensor::new(&[count, 3, side, side], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flatten_matches_same_padding_geometry() {
        let cfg = ConvTrunkConfig::default();
        assert_eq!(cfg.flatten_len(200), 3 * 25 * 25);
        assert_eq!(cfg.flatten_len(40), 3 * 5 * 5);
    }

    #[test]
    fn forward_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let trunk = ConvTrunk::new(&mut store, "t", &ConvTrunkConfig::default(), 16, &mut rng).unwrap();
        let mut g = Graph::new(false, 0);
        let x = g.constant(Tensor::full(&[2, 3, 16, 16], 0.5));
        let y = trunk.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[2, 3 * 2 * 2]);
    }

    #[test]
    fn rejects_even_kernels() {
        let cfg = ConvTrunkConfig { kernels: vec![4, 5, 3], ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
