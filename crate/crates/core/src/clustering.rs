//! 2-means over similarity scores and per-layer single-linkage distances.

use crate::error::{Error, Result};
use crate::nn::ModelParams;
use serde::{Deserialize, Serialize};

/// Result of splitting scores into at most two clusters.
///
/// Label 0 is the low-mean cluster and label 1 the high-mean one. When all
/// scores are equal there is a single cluster (everything labelled 0) and no
/// suspect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: [f64; 2],
    pub sizes: [usize; 2],
    pub suspect_label: Option<usize>,
}

impl ClusterAssignment {
    pub fn majority_label(&self) -> usize {
        match self.suspect_label {
            Some(s) => 1 - s,
            None => 0,
        }
    }

    /// Positions of the values in the suspect cluster.
    pub fn suspects(&self) -> Vec<usize> {
        match self.suspect_label {
            Some(s) => (0..self.labels.len()).filter(|&i| self.labels[i] == s).collect(),
            None => Vec::new(),
        }
    }

    pub fn is_single_cluster(&self) -> bool {
        self.suspect_label.is_none()
    }
}

fn sse(values: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum()
}

/// Globally optimal 2-means in one dimension.
///
/// The optimal split of 1-D data is a threshold between two consecutive
/// distinct sorted values, so every such threshold is scored and the one
/// with least within-cluster SSE kept (lowest threshold on exact ties). The
/// result is a fixed point of Lloyd's iteration.
///
/// The smaller cluster is the suspect. Equal sizes make the lower-mean
/// cluster the suspect, with a warning.
pub fn kmeans_2(values: &[f64]) -> Result<ClusterAssignment> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("kmeans_2 needs >= 2 values, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("kmeans_2 values must be finite".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for t in 1..n {
        if sorted[t - 1] == sorted[t] {
            continue;
        }
        let cost = sse(&sorted[..t]) + sse(&sorted[t..]);
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, sorted[t - 1]));
        }
    }
    let Some((_, cut)) = best else {
        return Ok(ClusterAssignment {
            labels: vec![0; n],
            centroids: [sorted[0]; 2],
            sizes: [n, 0],
            suspect_label: None,
        });
    };
    let labels: Vec<usize> = values.iter().map(|&v| usize::from(v > cut)).collect();
    let mut sums = [0.0; 2];
    let mut sizes = [0; 2];
    for (&v, &l) in values.iter().zip(&labels) {
        sums[l] += v;
        sizes[l] += 1;
    }
    let centroids = [sums[0] / sizes[0] as f64, sums[1] / sizes[1] as f64];
    let suspect = if sizes[0] == sizes[1] {
        log::warn!("kmeans_2: equal cluster sizes {sizes:?}; lower-mean cluster marked suspect");
        0
    } else if sizes[0] < sizes[1] {
        0
    } else {
        1
    };
    Ok(ClusterAssignment {
        labels,
        centroids,
        sizes,
        suspect_label: Some(suspect),
    })
}

/// `1 − Pearson(u, v)`. Identical vectors are at distance 0; if either
/// vector is constant the correlation is undefined and the distance is 1.
pub fn correlation_distance(u: &[f32], v: &[f32]) -> f64 {
    if u == v {
        return 0.0;
    }
    let n = u.len() as f64;
    let mu = u.iter().map(|&x| x as f64).sum::<f64>() / n;
    let mv = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        let (da, db) = (a as f64 - mu, b as f64 - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    if suu == 0.0 || svv == 0.0 {
        return 1.0;
    }
    1.0 - suv / (suu * svv).sqrt()
}

/// Height of the final merge of single-linkage clustering over a full
/// distance matrix.
pub fn single_linkage_root(dist: &[Vec<f64>]) -> f64 {
    let n = dist.len();
    let mut cluster: Vec<usize> = (0..n).collect();
    let mut height = 0.0;
    for _ in 1..n {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            for j in i + 1..n {
                if cluster[i] != cluster[j] && dist[i][j] < best.0 {
                    best = (dist[i][j], cluster[i], cluster[j]);
                }
            }
        }
        let (h, a, b) = best;
        cluster.iter_mut().filter(|c| **c == b).for_each(|c| *c = a);
        height = h;
    }
    height
}

/// For each parameter layer, the single-linkage root distance between
/// clients' flattened weight tensors (biases excluded) under correlation
/// distance.
pub fn per_layer_cluster_distance(updates: &[ModelParams]) -> Result<Vec<(String, f64)>> {
    if updates.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "per-layer cluster distance needs >= 3 updates, got {}",
            updates.len()
        )));
    }
    if updates.iter().any(|u| !u.same_layout(&updates[0])) {
        return Err(Error::Shape("updates have different layouts".into()));
    }
    let n = updates.len();
    Ok(updates[0]
        .layers
        .iter()
        .enumerate()
        .map(|(li, layer)| {
            let vecs: Vec<&[f32]> = updates.iter().map(|u| u.layers[li].weight.data()).collect();
            let mut dist = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in i + 1..n {
                    let d = correlation_distance(vecs[i], vecs[j]);
                    dist[i][j] = d;
                    dist[j][i] = d;
                }
            }
            (layer.name.clone(), single_linkage_root(&dist))
        })
        .collect())
}
