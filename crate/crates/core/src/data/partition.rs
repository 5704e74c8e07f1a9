use crate::error::{Error, Result};
use crate::rng::{purpose, rng_from};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

/// Sample indices owned by each client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }
}

fn check(labels: &[usize], n_clients: usize) -> Result<()> {
    if n_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if n_clients > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{n_clients} clients but only {} samples",
            labels.len()
        )));
    }
    Ok(())
}

fn indices_by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

/// Dirichlet(alpha·1) draw via normalized Gamma variates, computed in log
/// space: G(a) = G(a+1)·U^(1/a) keeps small `alpha` from underflowing.
pub(crate) fn dirichlet_proportions<R: Rng>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha validated positive");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Splits each class across clients with proportions drawn from
/// Dirichlet(alpha). Clients left empty take one sample from the largest
/// client (lowest id on ties).
pub fn dirichlet_partition(labels: &[usize], n_clients: usize, alpha: f64, seed: u64) -> Result<Partition> {
    check(labels, n_clients)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("dirichlet alpha must be > 0, got {alpha}")));
    }
    let mut rng = rng_from(seed, &[purpose::PARTITION]);
    let mut clients = vec![Vec::new(); n_clients];
    for mut idx in indices_by_class(labels) {
        idx.shuffle(&mut rng);
        let p = dirichlet_proportions(alpha, n_clients, &mut rng);
        let n = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (c, pc) in p.iter().enumerate() {
            cum += pc;
            let end = if c + 1 == n_clients {
                n
            } else {
                ((cum * n as f64).floor() as usize).min(n)
            };
            let end = end.max(start);
            clients[c].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let largest = (0..n_clients)
            .max_by_key(|&c| (clients[c].len(), std::cmp::Reverse(c)))
            .expect("n_clients >= 1");
        let moved = clients[largest].pop().expect("n_clients <= n_samples");
        clients[empty].push(moved);
    }
    Ok(Partition { clients })
}

/// Equal-size split, stratified by class: each class is shuffled, the
/// classes are concatenated and dealt round-robin. Sizes differ by at most
/// one (the first `n % k` clients get the extra sample), and so does every
/// per-class count.
pub fn iid_partition(labels: &[usize], n_clients: usize, seed: u64) -> Result<Partition> {
    check(labels, n_clients)?;
    let mut rng = rng_from(seed, &[purpose::PARTITION]);
    let mut clients = vec![Vec::new(); n_clients];
    let mut pos = 0;
    for mut idx in indices_by_class(labels) {
        idx.shuffle(&mut rng);
        for i in idx {
            clients[pos % n_clients].push(i);
            pos += 1;
        }
    }
    Ok(Partition { clients })
}
