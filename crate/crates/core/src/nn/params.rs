use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arch::{Architecture, Layer};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{purpose, rng_from};

/// Weights (and optional bias) of one parameterized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub name: String,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LayerParams {
    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }
}

/// Parameters of one network, in architecture order. Convolution weights are
/// `[out, in, k, k]`; dense weights are `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn n_params(&self) -> usize {
        self.layers.iter().map(LayerParams::n_params).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerParams> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// All parameters concatenated layer by layer (weight, then bias).
    pub fn to_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            if let Some(b) = &l.bias {
                out.extend_from_slice(b.data());
            }
        }
        out
    }

    /// Builds params shaped like `self` from a flat vector in `to_flat` order.
    pub fn with_flat(&self, flat: &[f32]) -> Result<Self> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, model has {}",
                flat.len(),
                self.n_params()
            )));
        }
        if let Some(pos) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite parameter at flat index {pos}"
            )));
        }
        let mut out = self.clone();
        let mut off = 0;
        for l in &mut out.layers {
            let n = l.weight.len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            if let Some(b) = &mut l.bias {
                let n = b.len();
                b.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(out)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    name: l.name.clone(),
                    weight: Tensor::zeros(l.weight.shape().to_vec()),
                    bias: l.bias.as_ref().map(|b| Tensor::zeros(b.shape().to_vec())),
                })
                .collect(),
        }
    }

    /// True when both have the same layer names and tensor shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.name == b.name
                    && a.weight.shape() == b.weight.shape()
                    && a.bias.as_ref().map(Tensor::shape) == b.bias.as_ref().map(Tensor::shape)
            })
    }

    /// Mutable views of every parameter slice, in `to_flat` order.
    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            if let Some(b) = &mut l.bias {
                out.push(b.data_mut());
            }
        }
        out
    }

    pub(crate) fn slices(&self) -> Vec<&[f32]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.data());
            if let Some(b) = &l.bias {
                out.push(b.data());
            }
        }
        out
    }
}

/// Weights ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)), biases zero.
pub fn init_model(arch: &Architecture, seed: u64) -> ModelParams {
    let mut rng = rng_from(seed, &[purpose::INIT]);
    let names = arch.param_layer_names();
    let mut layers = Vec::with_capacity(names.len());
    for (layer, name) in arch.layers().iter().filter(|l| l.has_params()).zip(names) {
        let (shape, fan_in, n_out) = match *layer {
            Layer::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => (vec![out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, out_ch),
            Layer::Dense { input, output } => (vec![output, input], input, output),
            _ => unreachable!("filtered to parameterized layers"),
        };
        let bound = (1.0 / fan_in as f64).sqrt() as f32;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        layers.push(LayerParams {
            name,
            weight: Tensor::from_raw(shape, data),
            bias: Some(Tensor::zeros(vec![n_out])),
        });
    }
    ModelParams { layers }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmnist_first_conv_shape() {
        let p = init_model(&Architecture::fmnist_cnn(), 0);
        assert_eq!(p.layers[0].name, "conv2d_1");
        assert_eq!(p.layers[0].weight.shape(), &[64, 1, 5, 5]);
        assert_eq!(p.layer("fc_1").unwrap().weight.shape(), &[128, 25600]);
    }

    #[test]
    fn init_is_deterministic() {
        let a = Architecture::fmnist_cnn_with_width(4);
        assert_eq!(init_model(&a, 3), init_model(&a, 3));
        assert_ne!(init_model(&a, 3), init_model(&a, 4));
    }

    #[test]
    fn fan_in_bound_and_zero_bias() {
        let a = Architecture::new([4, 1, 1], vec![Layer::Flatten, Layer::dense(4, 2)]).unwrap();
        let p = init_model(&a, 7);
        assert!(p.layers[0].weight.data().iter().all(|w| w.abs() < 0.5));
        assert!(p.layers[0].bias.as_ref().unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn flat_round_trip() {
        let p = init_model(&Architecture::mlp([1, 6, 1], &[5], 3).unwrap(), 1);
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.n_params());
        assert_eq!(p.with_flat(&flat).unwrap(), p);
        assert!(p.with_flat(&flat[1..]).is_err());
    }
}
