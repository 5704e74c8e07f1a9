use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{purpose, rng_from};
use rand_distr::{Distribution, Normal};

/// Gaussian classes: class `c` is N(e_c, spread²·I) in `dim` dimensions,
/// where e_c is the c-th standard basis vector. Samples are laid out class by
/// class with shape `[n, 1, dim, 1]`.
pub fn synthetic_gaussian(n_classes: usize, dim: usize, n_per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n_classes < 2 || n_per_class == 0 {
        return Err(Error::InvalidArgument(format!(
            "need >= 2 classes and >= 1 sample per class, got {n_classes} and {n_per_class}"
        )));
    }
    if dim < n_classes {
        return Err(Error::InvalidArgument(format!("dim {dim} < n_classes {n_classes}")));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!("spread must be > 0, got {spread}")));
    }
    let noise = Normal::new(0.0, spread).expect("spread validated");
    let mut rng = rng_from(seed, &[purpose::DATA]);
    let n = n_classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..n_classes {
        for _ in 0..n_per_class {
            for j in 0..dim {
                let mu = if j == c { 1.0 } else { 0.0 };
                data.push((mu + noise.sample(&mut rng)) as f32);
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, dim, 1], data)?, labels, n_classes)
}
