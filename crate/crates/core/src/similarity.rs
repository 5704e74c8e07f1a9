//! Representation similarity between penultimate-layer weight matrices.
//!
//! Kernel CKA is the FedCC default; linear CKA, MMD, cosine and Euclidean
//! are the ablation alternatives. All arithmetic is in f64.

use crate::error::{Error, Result};
use crate::nn::{Architecture, ModelParams};
use serde::{Deserialize, Serialize};

/// Row-major dense f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} with {} entries",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Result<Self> {
        Matrix::new(rows, cols, data.iter().map(|&v| v as f64).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let o = &mut out[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                for (ov, &b) in o.iter_mut().zip(other.row(k)) {
                    *ov += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: other.cols,
            data: out,
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.get(i, j);
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }
}

/// Weights of the penultimate Dense layer as `[units, fan_in]`, bias dropped.
pub fn extract_plr(params: &ModelParams, arch: &Architecture) -> Result<Matrix> {
    let name = arch
        .penultimate_name()
        .ok_or_else(|| Error::InvalidArgument("architecture has fewer than two dense layers".into()))?;
    let layer = params
        .layer(&name)
        .ok_or_else(|| Error::Shape(format!("params lack layer {name}")))?;
    let shape = layer.weight.shape();
    Matrix::from_f32(shape[0], shape[1], layer.weight.data())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    // four independent partial sums so the loop vectorises
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += (x[k] - y[k]) * (x[k] - y[k]);
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn median(mut v: Vec<f64>) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, &mut upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lower + upper) / 2.0
    }
}

fn rbf_from_sq_dists(n: usize, sq: &[f64], sigma: f64) -> Matrix {
    let data = if sigma == 0.0 {
        vec![1.0; n * n]
    } else {
        let denom = 2.0 * sigma * sigma;
        sq.iter().map(|d| (-d / denom).exp()).collect()
    };
    Matrix { rows: n, cols: n, data }
}

fn pairwise_sq_dists(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len();
    let mut sq = vec![0.0; n * n];
    let mut upper = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(rows[i], rows[j]);
            sq[i * n + j] = d;
            sq[j * n + i] = d;
            upper.push(d.sqrt());
        }
    }
    (sq, upper)
}

/// Default ratio of RBF bandwidth to the median pairwise row distance.
pub const BANDWIDTH_SCALE: f64 = 0.5;

/// RBF Gram matrix over the rows of `x` with bandwidth
/// `scale · median pairwise distance`. A zero median gives the all-ones kernel.
pub fn rbf_gram_with_scale(x: &Matrix, scale: f64) -> Result<Matrix> {
    if x.rows < 2 {
        return Err(Error::Shape(format!("rbf_gram needs >= 2 rows, got {}", x.rows)));
    }
    let rows: Vec<&[f64]> = (0..x.rows).map(|i| x.row(i)).collect();
    let (sq, dists) = pairwise_sq_dists(&rows);
    Ok(rbf_from_sq_dists(x.rows, &sq, scale * median(dists)))
}

pub fn rbf_gram(x: &Matrix) -> Result<Matrix> {
    rbf_gram_with_scale(x, BANDWIDTH_SCALE)
}

/// Biased HSIC: `trace(K H L H) / (n-1)²` with `H = I - 11ᵀ/n`.
pub fn hsic(k: &Matrix, l: &Matrix) -> Result<f64> {
    let n = k.rows;
    if k.cols != n || l.rows != n || l.cols != n {
        return Err(Error::Shape(format!(
            "hsic needs equal square matrices, got {}x{} and {}x{}",
            k.rows, k.cols, l.rows, l.cols
        )));
    }
    if n < 2 {
        return Err(Error::Shape("hsic needs n >= 2".into()));
    }
    let row_mean: Vec<f64> = (0..n).map(|i| k.row(i).iter().sum::<f64>() / n as f64).collect();
    let col_mean: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| k.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let kc = k.get(i, j) - row_mean[i] - col_mean[j] + grand;
            total += kc * l.get(j, i);
        }
    }
    Ok(total / ((n - 1) * (n - 1)) as f64)
}

fn cka_from_grams(k: &Matrix, l: &Matrix) -> Result<f64> {
    let kk = hsic(k, k)?;
    let ll = hsic(l, l)?;
    if kk < 1e-12 || ll < 1e-12 {
        return Ok(0.0);
    }
    // HSIC of PSD kernels is non-negative; clamp roundoff.
    Ok((hsic(k, l)? / (kk * ll).sqrt()).max(0.0))
}

fn check_same_rows(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.rows != y.rows {
        return Err(Error::Shape(format!("row counts differ: {} vs {}", x.rows, y.rows)));
    }
    Ok(())
}

/// CKA with per-matrix RBF kernels. Zero when either representation is
/// degenerate (self-HSIC below 1e-12).
pub fn kernel_cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    check_same_rows(x, y)?;
    cka_from_grams(&rbf_gram(x)?, &rbf_gram(y)?)
}

/// CKA with linear kernels `XXᵀ`, `YYᵀ`.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    check_same_rows(x, y)?;
    cka_from_grams(&x.matmul(&x.transpose())?, &y.matmul(&y.transpose())?)
}

/// Biased MMD² between the row sets of `x` and `y` under an RBF kernel whose
/// bandwidth comes from the pooled rows.
pub fn mmd(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows < 2 || y.rows < 2 {
        return Err(Error::Shape("mmd needs >= 2 rows per sample".into()));
    }
    if x.cols != y.cols {
        return Err(Error::Shape(format!("mmd column counts differ: {} vs {}", x.cols, y.cols)));
    }
    let rows: Vec<&[f64]> = (0..x.rows).map(|i| x.row(i)).chain((0..y.rows).map(|i| y.row(i))).collect();
    let n = rows.len();
    let (sq, dists) = pairwise_sq_dists(&rows);
    let k = rbf_from_sq_dists(n, &sq, BANDWIDTH_SCALE * median(dists));
    let block_mean = |r: std::ops::Range<usize>, c: std::ops::Range<usize>| {
        let count = (r.len() * c.len()) as f64;
        r.flat_map(|i| c.clone().map(move |j| (i, j)))
            .map(|(i, j)| k.get(i, j))
            .sum::<f64>()
            / count
    };
    let (a, b) = (0..x.rows, x.rows..n);
    Ok(block_mean(a.clone(), a.clone()) + block_mean(b.clone(), b.clone()) - 2.0 * block_mean(a, b))
}

fn check_len(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Shape(format!("vector lengths {} and {}", u.len(), v.len())));
    }
    Ok(())
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    check_len(u, v)?;
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    Ok(dot / (nu * nv))
}

pub fn euclidean_dist(u: &[f64], v: &[f64]) -> Result<f64> {
    check_len(u, v)?;
    Ok(sq_dist(u, v).sqrt())
}

/// Similarity plugged into FedCC. Scores are oriented so that larger always
/// means more similar (MMD and Euclidean distance are negated).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    KernelCka,
    LinearCka,
    Mmd,
    Cosine,
    Euclidean,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::KernelCka,
        Metric::LinearCka,
        Metric::Mmd,
        Metric::Cosine,
        Metric::Euclidean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::KernelCka => "kernel_cka",
            Metric::LinearCka => "linear_cka",
            Metric::Mmd => "mmd",
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        }
    }

    pub fn score(self, global: &Matrix, local: &Matrix) -> Result<f64> {
        match self {
            Metric::KernelCka => kernel_cka(global, local),
            Metric::LinearCka => linear_cka(global, local),
            Metric::Mmd => mmd(global, local).map(|d| -d),
            Metric::Cosine => cosine_sim(global.data(), local.data()),
            Metric::Euclidean => euclidean_dist(global.data(), local.data()).map(|d| -d),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown similarity metric '{s}'")))
    }
}
