//! Server-side aggregation rules.
//!
//! Every rule sorts its input by `client_id` first, so client order never
//! matters and ties go to the lowest id. Arithmetic runs over flattened
//! parameter vectors with f64 accumulation.

use crate::clustering::{kmeans_2, ClusterAssignment};
use crate::error::{Error, Result};
use crate::nn::{Architecture, ModelParams};
use crate::similarity::{extract_plr, mmd, Matrix, Metric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One client's locally trained model for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ModelParams,
    pub n_samples: usize,
    /// Ground truth for evaluation only. No aggregator reads it.
    pub is_malicious_truth: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationResult {
    pub global_params: ModelParams,
    /// Ascending client ids whose updates contributed.
    pub selected_ids: Vec<usize>,
    /// Per-client scores (similarity, Krum score or trust), by client id.
    pub scores: Option<Vec<(usize, f64)>>,
    /// FedCC's clustering of the scores.
    pub clusters: Option<ClusterAssignment>,
}

impl AggregationResult {
    fn new(global_params: ModelParams, selected_ids: Vec<usize>) -> Self {
        AggregationResult {
            global_params,
            selected_ids,
            scores: None,
            clusters: None,
        }
    }
}

/// Updates sorted by id with their flattened parameters.
struct Prepared<'a> {
    updates: Vec<&'a ClientUpdate>,
    flat: Vec<Vec<f32>>,
}

impl Prepared<'_> {
    fn n(&self) -> usize {
        self.updates.len()
    }

    fn ids(&self, positions: &[usize]) -> Vec<usize> {
        positions.iter().map(|&p| self.updates[p].client_id).collect()
    }

    fn template(&self) -> &ModelParams {
        &self.updates[0].params
    }

    fn build(&self, flat: Vec<f64>) -> Result<ModelParams> {
        let f32s: Vec<f32> = flat.into_iter().map(|v| v as f32).collect();
        self.template().with_flat(&f32s)
    }

    /// Unweighted coordinate mean over the given positions.
    fn mean_of(&self, positions: &[usize]) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.flat[0].len()];
        for &p in positions {
            for (a, &v) in acc.iter_mut().zip(&self.flat[p]) {
                *a += v as f64;
            }
        }
        let inv = positions.len() as f64;
        acc.iter_mut().for_each(|a| *a /= inv);
        acc
    }
}

fn prepare<'a>(updates: &'a [ClientUpdate], min: usize, rule: &str) -> Result<Prepared<'a>> {
    if updates.len() < min.max(1) {
        return Err(Error::Precondition(format!(
            "{rule} needs at least {} updates, got {}",
            min.max(1),
            updates.len()
        )));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::InvalidArgument(format!("{rule}: duplicate client ids")));
    }
    if sorted.iter().any(|u| !u.params.same_layout(&sorted[0].params)) {
        return Err(Error::Shape(format!("{rule}: updates have different layouts")));
    }
    let flat = sorted.iter().map(|u| u.params.to_flat()).collect();
    Ok(Prepared { updates: sorted, flat })
}

fn all_positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Sample-count weighted mean of all updates.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<AggregationResult> {
    let p = prepare(updates, 1, "fedavg")?;
    let total: f64 = p.updates.iter().map(|u| u.n_samples as f64).sum();
    if total == 0.0 {
        return Err(Error::InvalidArgument("fedavg: all updates report zero samples".into()));
    }
    let mut acc = vec![0.0f64; p.flat[0].len()];
    for (u, flat) in p.updates.iter().zip(&p.flat) {
        let w = u.n_samples as f64 / total;
        for (a, &v) in acc.iter_mut().zip(flat) {
            *a += w * v as f64;
        }
    }
    Ok(AggregationResult::new(p.build(acc)?, p.ids(&all_positions(p.n()))))
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn pairwise_sq_dists(flat: &[Vec<f32>]) -> Vec<Vec<f64>> {
    let n = flat.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs.par_iter().map(|&(i, j)| sq_dist(&flat[i], &flat[j])).collect();
    let mut d = vec![vec![0.0; n]; n];
    for (&(i, j), v) in pairs.iter().zip(vals) {
        d[i][j] = v;
        d[j][i] = v;
    }
    d
}

/// Krum score of each member of `pool`: the sum of squared distances to its
/// `neighbors` nearest other pool members.
fn krum_scores(dist: &[Vec<f64>], pool: &[usize], neighbors: usize) -> Vec<f64> {
    pool.iter()
        .map(|&i| {
            let mut others: Vec<f64> = pool.iter().filter(|&&j| j != i).map(|&j| dist[i][j]).collect();
            others.sort_by(f64::total_cmp);
            others.iter().take(neighbors).sum()
        })
        .collect()
}

/// Pool positions ordered by (score, position).
fn rank(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// Krum (`multi_m = 1`) or Multi-Krum: averages the `multi_m` updates with
/// the lowest Krum scores, each scored against its `n - f - 2` nearest
/// neighbours.
pub fn krum(updates: &[ClientUpdate], f: usize, multi_m: usize) -> Result<AggregationResult> {
    let p = prepare(updates, 1, "krum")?;
    let n = p.n();
    if n < 2 * f + 3 {
        return Err(Error::Precondition(format!("krum needs n >= 2f+3, got n={n}, f={f}")));
    }
    if multi_m == 0 || multi_m > n {
        return Err(Error::InvalidArgument(format!("krum multi_m={multi_m} outside [1, {n}]")));
    }
    let dist = pairwise_sq_dists(&p.flat);
    let pool = all_positions(n);
    let scores = krum_scores(&dist, &pool, n - f - 2);
    let mut chosen: Vec<usize> = rank(&scores).into_iter().take(multi_m).collect();
    chosen.sort_unstable();
    let mut out = AggregationResult::new(p.build(p.mean_of(&chosen))?, p.ids(&chosen));
    out.scores = Some(p.ids(&pool).into_iter().zip(scores).collect());
    Ok(out)
}

fn coordinate_sorted(p: &Prepared, positions: &[usize], mut reduce: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let d = p.flat[0].len();
    let mut col = vec![0.0f64; positions.len()];
    (0..d)
        .map(|j| {
            for (c, &pos) in col.iter_mut().zip(positions) {
                *c = p.flat[pos][j] as f64;
            }
            col.sort_by(f64::total_cmp);
            reduce(&col)
        })
        .collect()
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Coordinate-wise median (mean of the middle pair for even n).
pub fn coomed(updates: &[ClientUpdate]) -> Result<AggregationResult> {
    let p = prepare(updates, 1, "coomed")?;
    let all = all_positions(p.n());
    let med = coordinate_sorted(&p, &all, median_sorted);
    Ok(AggregationResult::new(p.build(med)?, p.ids(&all)))
}

fn trimmed(v: &[f64], beta: usize) -> f64 {
    let kept = &v[beta..v.len() - beta];
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Coordinate-wise mean after dropping the `beta` largest and smallest values.
pub fn trimmed_mean(updates: &[ClientUpdate], beta: usize) -> Result<AggregationResult> {
    let p = prepare(updates, 1, "trimmed_mean")?;
    let n = p.n();
    if n <= 2 * beta {
        return Err(Error::Precondition(format!("trimmed_mean needs n > 2*beta, got n={n}, beta={beta}")));
    }
    let all = all_positions(n);
    let out = coordinate_sorted(&p, &all, |v| trimmed(v, beta));
    Ok(AggregationResult::new(p.build(out)?, p.ids(&all)))
}

/// Bulyan: repeatedly takes the Krum winner out of the pool until `n - 2f`
/// updates are selected, then applies a coordinate-wise trimmed mean with
/// `beta = f` to the selection.
///
/// Late in the selection the pool holds fewer than `2f + 3` updates; the
/// neighbour count is then clamped to `max(pool - f - 2, 1)`.
pub fn bulyan(updates: &[ClientUpdate], f: usize) -> Result<AggregationResult> {
    let p = prepare(updates, 1, "bulyan")?;
    let n = p.n();
    if n < 4 * f + 3 {
        return Err(Error::Precondition(format!("bulyan needs n >= 4f+3, got n={n}, f={f}")));
    }
    let dist = pairwise_sq_dists(&p.flat);
    let theta = n - 2 * f;
    let mut pool = all_positions(n);
    let mut selected = Vec::with_capacity(theta);
    while selected.len() < theta {
        let neighbors = (pool.len().saturating_sub(f + 2)).max(1).min(pool.len() - 1);
        let scores = krum_scores(&dist, &pool, neighbors);
        let winner = pool.remove(rank(&scores)[0]);
        selected.push(winner);
    }
    selected.sort_unstable();
    let out = coordinate_sorted(&p, &selected, |v| trimmed(v, f));
    Ok(AggregationResult::new(p.build(out)?, p.ids(&selected)))
}

/// Trust-weighted average from PLR proximity (MMD). Each client credits its
/// `k_neighbors` nearest other clients; clients tied at the boundary share
/// the remaining credit equally. Trust is the softmax of the credit counts.
pub fn flare_lite(updates: &[ClientUpdate], arch: &Architecture, k_neighbors: usize) -> Result<AggregationResult> {
    let p = prepare(updates, 3, "flare")?;
    let n = p.n();
    if k_neighbors == 0 || k_neighbors >= n {
        return Err(Error::InvalidArgument(format!("flare k_neighbors={k_neighbors} outside [1, {})", n)));
    }
    let plrs = p
        .updates
        .iter()
        .map(|u| extract_plr(&u.params, arch))
        .collect::<Result<Vec<Matrix>>>()?;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let vals = pairs
        .par_iter()
        .map(|&(i, j)| mmd(&plrs[i], &plrs[j]))
        .collect::<Result<Vec<f64>>>()?;
    let mut dist = vec![vec![0.0; n]; n];
    for (&(i, j), v) in pairs.iter().zip(vals) {
        dist[i][j] = v;
        dist[j][i] = v;
    }
    let mut counts = vec![0.0f64; n];
    for i in 0..n {
        let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
        others.sort_by(f64::total_cmp);
        let boundary = others[k_neighbors - 1];
        let closer = others.iter().filter(|&&d| d < boundary).count();
        let tied = others.iter().filter(|&&d| d == boundary).count();
        let share = (k_neighbors - closer) as f64 / tied as f64;
        for j in (0..n).filter(|&j| j != i) {
            if dist[i][j] < boundary {
                counts[j] += 1.0;
            } else if dist[i][j] == boundary {
                counts[j] += share;
            }
        }
    }
    let max = counts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = counts.iter().map(|c| (c - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let trust: Vec<f64> = exp.iter().map(|e| e / z).collect();
    let total: f64 = trust.iter().sum();
    let mut acc = vec![0.0f64; p.flat[0].len()];
    for (t, flat) in trust.iter().zip(&p.flat) {
        for (a, &v) in acc.iter_mut().zip(flat) {
            *a += t * v as f64;
        }
    }
    acc.iter_mut().for_each(|a| *a /= total);
    let all = all_positions(n);
    let mut out = AggregationResult::new(p.build(acc)?, p.ids(&all));
    out.scores = Some(p.ids(&all).into_iter().zip(trust).collect());
    Ok(out)
}

/// FedCC: scores each client's PLR against the previous global PLR, splits
/// the scores with 2-means, drops the smaller cluster and averages the rest
/// without weighting.
pub fn fedcc(
    global: &ModelParams,
    updates: &[ClientUpdate],
    arch: &Architecture,
    metric: Metric,
) -> Result<AggregationResult> {
    let p = prepare(updates, 2, "fedcc")?;
    let global_plr = extract_plr(global, arch)?;
    let scores = p
        .updates
        .par_iter()
        .map(|u| metric.score(&global_plr, &extract_plr(&u.params, arch)?))
        .collect::<Result<Vec<f64>>>()?;
    let clusters = kmeans_2(&scores)?;
    let suspects = clusters.suspects();
    let kept: Vec<usize> = (0..p.n()).filter(|i| !suspects.contains(i)).collect();
    assert!(!kept.is_empty(), "fedcc: 2-means marked every client suspect");
    let mut out = AggregationResult::new(p.build(p.mean_of(&kept))?, p.ids(&kept));
    out.scores = Some(p.ids(&all_positions(p.n())).into_iter().zip(scores).collect());
    out.clusters = Some(clusters);
    Ok(out)
}

/// Aggregation rule chosen in the experiment config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Defense {
    Fedavg,
    Krum,
    /// `multi_m` defaults to `n - f - 2`.
    Mkrum {
        #[serde(default)]
        multi_m: Option<usize>,
    },
    Coomed,
    /// `beta` defaults to the configured attacker count.
    TrimmedMean {
        #[serde(default)]
        beta: Option<usize>,
    },
    Bulyan,
    /// `k_neighbors` defaults to `ceil(n / 2)`.
    Flare {
        #[serde(default)]
        k_neighbors: Option<usize>,
    },
    Fedcc,
}

impl Defense {
    pub const NAMES: [&'static str; 8] = [
        "fedavg",
        "krum",
        "mkrum",
        "coomed",
        "trimmed_mean",
        "bulyan",
        "flare",
        "fedcc",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Defense::Fedavg => "fedavg",
            Defense::Krum => "krum",
            Defense::Mkrum { .. } => "mkrum",
            Defense::Coomed => "coomed",
            Defense::TrimmedMean { .. } => "trimmed_mean",
            Defense::Bulyan => "bulyan",
            Defense::Flare { .. } => "flare",
            Defense::Fedcc => "fedcc",
        }
    }

    /// Runs the rule. `f` is the assumed attacker count used by Krum,
    /// Multi-Krum, Bulyan and the default trimmed-mean beta.
    pub fn aggregate(
        &self,
        global: &ModelParams,
        updates: &[ClientUpdate],
        arch: &Architecture,
        metric: Metric,
        f: usize,
    ) -> Result<AggregationResult> {
        let n = updates.len();
        match *self {
            Defense::Fedavg => fedavg(updates),
            Defense::Krum => krum(updates, f, 1),
            Defense::Mkrum { multi_m } => krum(updates, f, multi_m.unwrap_or(n.saturating_sub(f + 2).max(1))),
            Defense::Coomed => coomed(updates),
            Defense::TrimmedMean { beta } => trimmed_mean(updates, beta.unwrap_or(f)),
            Defense::Bulyan => bulyan(updates, f),
            Defense::Flare { k_neighbors } => flare_lite(updates, arch, k_neighbors.unwrap_or(n.div_ceil(2))),
            Defense::Fedcc => fedcc(global, updates, arch, metric),
        }
    }
}

impl std::str::FromStr for Defense {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fedavg" => Defense::Fedavg,
            "krum" => Defense::Krum,
            "mkrum" => Defense::Mkrum { multi_m: None },
            "coomed" => Defense::Coomed,
            "trimmed_mean" => Defense::TrimmedMean { beta: None },
            "bulyan" => Defense::Bulyan,
            "flare" => Defense::Flare { k_neighbors: None },
            "fedcc" => Defense::Fedcc,
            other => {
                return Err(Error::Config(format!(
                    "unknown aggregator '{other}' (expected one of {})",
                    Defense::NAMES.join(", ")
                )))
            }
        })
    }
}
