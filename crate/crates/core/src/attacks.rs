//! Model-poisoning attacks: the two untargeted crafting attacks against
//! Krum and the coordinate-wise median, and the boosted targeted backdoor.

use crate::aggregators::{krum, ClientUpdate};
use crate::data::{BackdoorSample, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Architecture, ModelParams};
use crate::train::{local_train, TrainConfig};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Default stop threshold for λ halving in the Krum attack.
pub const LAMBDA_THRESHOLD: f64 = 1e-5;

fn flat_all(updates: &[ModelParams], global: &ModelParams) -> Result<Vec<Vec<f32>>> {
    if updates.is_empty() {
        return Err(Error::InvalidArgument("attack needs at least one benign update".into()));
    }
    if updates.iter().any(|u| !u.same_layout(global)) {
        return Err(Error::Shape("benign updates do not match the global layout".into()));
    }
    Ok(updates.iter().map(ModelParams::to_flat).collect())
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Estimated direction of the benign change: `sign(mean(benign) - global)`,
/// with 0 mapped to +1.
pub fn benign_direction(benign: &[ModelParams], global: &ModelParams) -> Result<Vec<f32>> {
    let flats = flat_all(benign, global)?;
    let g = global.to_flat();
    Ok((0..g.len())
        .map(|j| {
            let mean = flats.iter().map(|f| f[j] as f64).sum::<f64>() / flats.len() as f64;
            if mean - g[j] as f64 >= 0.0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect())
}

/// Upper bound on λ for the Krum attack:
///
/// `min_i Σ_{l ∈ Γ_i} D(w_l, w_i) / ((n − 2m − 1)·√d) + max_i D(w_i, w_G) / √d`
///
/// where i ranges over benign updates, Γ_i holds the `n − m − 2` benign
/// updates nearest to `w_i`, D is Euclidean distance and d the parameter
/// count.
pub fn lambda_upper_bound(benign: &[ModelParams], global: &ModelParams, m: usize, n: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidArgument("lambda bound needs m >= 1".into()));
    }
    if n < 2 * m + 2 {
        return Err(Error::Precondition(format!("n - 2m - 1 must be positive, got n={n}, m={m}")));
    }
    let gamma = n - m - 2;
    if benign.len() < gamma + 1 {
        return Err(Error::Precondition(format!(
            "{} benign updates cannot supply {gamma} neighbours each",
            benign.len()
        )));
    }
    let flats = flat_all(benign, global)?;
    let g = global.to_flat();
    let sqrt_d = (g.len() as f64).sqrt();
    let min_sum = (0..flats.len())
        .map(|i| {
            let mut d: Vec<f64> = (0..flats.len()).filter(|&l| l != i).map(|l| dist(&flats[l], &flats[i])).collect();
            d.sort_by(f64::total_cmp);
            d[..gamma].iter().sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min);
    let max_dev = flats.iter().map(|f| dist(f, &g)).fold(0.0, f64::max);
    Ok(min_sum / ((n - 2 * m - 1) as f64 * sqrt_d) + max_dev / sqrt_d)
}

/// Outcome of the Krum attack's λ search.
#[derive(Debug, Clone, PartialEq)]
pub struct KrumCraft {
    /// `m` identical copies of `w_G − λ·s`.
    pub crafted: Vec<ModelParams>,
    pub lambda: f64,
    pub lambda_max: f64,
    pub halvings: usize,
    /// Whether the probe accepted the final crafted set.
    pub selected: bool,
}

/// Crafts `m` identical updates `w_G − λ·s`, starting from the λ upper bound
/// and halving λ until `probe` reports that a crafted update wins or λ drops
/// below `threshold`.
pub fn craft_untargeted_krum(
    benign: &[ModelParams],
    global: &ModelParams,
    m: usize,
    n: usize,
    threshold: f64,
    mut probe: impl FnMut(&[ModelParams]) -> Result<bool>,
) -> Result<KrumCraft> {
    let lambda_max = lambda_upper_bound(benign, global, m, n)?;
    let s = benign_direction(benign, global)?;
    let g = global.to_flat();
    let mut lambda = lambda_max;
    let mut halvings = 0;
    loop {
        let w1: Vec<f32> = g
            .iter()
            .zip(&s)
            .map(|(&gj, &sj)| (gj as f64 - lambda * sj as f64) as f32)
            .collect();
        let crafted = vec![global.with_flat(&w1)?; m];
        let selected = probe(&crafted)?;
        if selected || lambda < threshold {
            return Ok(KrumCraft {
                crafted,
                lambda,
                lambda_max,
                halvings,
                selected,
            });
        }
        lambda /= 2.0;
        halvings += 1;
    }
}

/// Probe for the Krum attack: does Krum over crafted + benign updates (with
/// `f` assumed attackers) pick a crafted one?
pub fn krum_selects_crafted(benign: &[ModelParams], crafted: &[ModelParams], f: usize) -> Result<bool> {
    let updates: Vec<ClientUpdate> = crafted
        .iter()
        .chain(benign)
        .enumerate()
        .map(|(id, p)| ClientUpdate {
            client_id: id,
            params: p.clone(),
            n_samples: 1,
            is_malicious_truth: false,
        })
        .collect();
    let r = krum(&updates, f, 1)?;
    Ok(r.selected_ids.iter().all(|&id| id < crafted.len()))
}

/// Sampling interval for one coordinate of the median attack.
///
/// With `s = −1` the values sit above the benign maximum: `[w_max, b·w_max]`
/// if `w_max > 0`, else `[w_max, w_max / b]`. With `s = +1` they sit below
/// the minimum: `[w_min / b, w_min]` if `w_min > 0`, else `[b·w_min, w_min]`.
pub fn med_interval(w_min: f32, w_max: f32, s: f32, b: f32) -> (f32, f32) {
    if s < 0.0 {
        if w_max > 0.0 {
            (w_max, b * w_max)
        } else {
            (w_max, w_max / b)
        }
    } else if w_min > 0.0 {
        (w_min / b, w_min)
    } else {
        (b * w_min, w_min)
    }
}

/// Crafts `m` updates for the median attack. Every attacker draws its own
/// value per coordinate, uniformly from [`med_interval`].
pub fn craft_untargeted_med<R: Rng>(
    benign: &[ModelParams],
    global: &ModelParams,
    m: usize,
    b: f32,
    rng: &mut R,
) -> Result<Vec<ModelParams>> {
    if !(b > 1.0 && b.is_finite()) {
        return Err(Error::InvalidArgument(format!("median attack needs b > 1, got {b}")));
    }
    let flats = flat_all(benign, global)?;
    let s = benign_direction(benign, global)?;
    let d = s.len();
    let mut crafted = vec![vec![0.0f32; d]; m];
    for j in 0..d {
        let (lo, hi) = flats
            .iter()
            .map(|f| f[j])
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let (a, z) = med_interval(lo, hi, s[j], b);
        for c in crafted.iter_mut() {
            c[j] = if a < z { rng.random_range(a..=z) } else { a };
        }
    }
    crafted.iter().map(|c| global.with_flat(c)).collect()
}

/// `w_G + α·(w − w_G)`.
pub fn boost(global: &ModelParams, trained: &ModelParams, alpha: f64) -> Result<ModelParams> {
    if !trained.same_layout(global) {
        return Err(Error::Shape("boost: layouts differ".into()));
    }
    let g = global.to_flat();
    let w = trained.to_flat();
    let out: Vec<f32> = g
        .iter()
        .zip(&w)
        .map(|(&gj, &wj)| (gj as f64 + alpha * (wj as f64 - gj as f64)) as f32)
        .collect();
    global.with_flat(&out)
}

/// The backdoor attacker's task: the mislabeled sample and boost factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackdoorTask {
    pub sample: BackdoorSample,
    pub alpha_m: f64,
}

/// Trains on the attacker's shard with the backdoor sample added to every
/// batch, then boosts the resulting change.
pub fn backdoor_local_train(
    arch: &Architecture,
    global: &ModelParams,
    data: &Dataset,
    indices: &[usize],
    task: &BackdoorTask,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelParams> {
    if task.alpha_m < 1.0 {
        return Err(Error::InvalidArgument(format!("alpha_m must be >= 1, got {}", task.alpha_m)));
    }
    let trained = local_train(arch, global, data, indices, cfg, seed, Some(&task.sample))?;
    boost(global, &trained, task.alpha_m)
}
