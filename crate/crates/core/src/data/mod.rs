//! Datasets, IDX loading, synthetic data and client partitioning.

mod idx;
mod partition;
mod synthetic;

pub use idx::{load_idx, write_idx};
pub use partition::{dirichlet_partition, iid_partition, Partition};
pub use synthetic::synthetic_gaussian;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

/// Images `[n, C, H, W]` in `[0, 1]` (synthetic data may leave that range)
/// with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("dataset images must be [n, C, H, W], got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// Gathers the given samples into a batch tensor and label vector.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.sample_shape();
        let images = Tensor::from_raw(vec![indices.len(), c, h, w], data);
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty subset".into()));
        }
        let (images, labels) = self.batch(indices);
        Dataset::new(images, labels, self.n_classes)
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// One mislabeled sample owned by a backdoor attacker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackdoorSample {
    pub index: usize,
    pub source_class: usize,
    pub target_label: usize,
    pub image: Tensor,
}

/// Picks one image of `source_class` (uniformly, from `seed`) and pairs it
/// with `target_label`.
pub fn make_backdoor_sample(
    dataset: &Dataset,
    source_class: usize,
    target_label: usize,
    seed: u64,
) -> Result<BackdoorSample> {
    let k = dataset.n_classes();
    if source_class >= k || target_label >= k {
        return Err(Error::InvalidArgument(format!(
            "backdoor classes ({source_class}, {target_label}) outside [0, {k})"
        )));
    }
    if source_class == target_label {
        return Err(Error::InvalidArgument(format!(
            "backdoor source and target are both {source_class}"
        )));
    }
    let candidates: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.labels()[i] == source_class)
        .collect();
    let mut rng = crate::rng::rng_from(seed, &[crate::rng::purpose::BACKDOOR]);
    let &index = candidates
        .choose(&mut rng)
        .ok_or_else(|| Error::InvalidArgument(format!("no samples of class {source_class}")))?;
    let (image, _) = dataset.batch(&[index]);
    Ok(BackdoorSample {
        index,
        source_class,
        target_label,
        image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let images = Tensor::new(vec![4, 1, 1, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        Dataset::new(images, vec![0, 1, 1, 2], 3).unwrap()
    }

    #[test]
    fn batch_gathers_rows_in_order() {
        let (x, y) = toy().batch(&[2, 0]);
        assert_eq!(x.shape(), &[2, 1, 1, 2]);
        assert_eq!(x.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(y, vec![1, 0]);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let images = Tensor::zeros(vec![2, 1, 1, 1]);
        assert!(Dataset::new(images, vec![0, 3], 3).is_err());
    }

    #[test]
    fn backdoor_sample_is_from_source_class_and_seeded() {
        let d = toy();
        let a = make_backdoor_sample(&d, 1, 2, 5).unwrap();
        assert_eq!(d.labels()[a.index], 1);
        assert_eq!(a.target_label, 2);
        assert_eq!(a.image.data(), d.image(a.index));
        for _ in 0..3 {
            assert_eq!(make_backdoor_sample(&d, 1, 2, 5).unwrap(), a);
        }
    }

    #[test]
    fn backdoor_sample_errors() {
        let d = toy();
        assert!(make_backdoor_sample(&d, 1, 1, 0).is_err());
        assert!(make_backdoor_sample(&d, 0, 7, 0).is_err());
        let images = Tensor::zeros(vec![2, 1, 1, 1]);
        let no_twos = Dataset::new(images, vec![0, 1], 3).unwrap();
        assert!(make_backdoor_sample(&no_twos, 2, 0, 0).is_err());
    }
}
