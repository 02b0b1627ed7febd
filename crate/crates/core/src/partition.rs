//! Client population synthesis.
//!
//! Three ways to build a [`ClientPartition`]: Dirichlet label skew drawn
//! without replacement, the sort-and-shard pathological split, and explicit
//! (manual or loaded) assignments. Every constructor goes through
//! [`ClientPartition::new`], which enforces disjointness.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{class_counts, ClassDistribution, Dataset, IndexSet};
use crate::error::{FedError, Result};
use crate::rng::{stream, Purpose};

/// One named client and the examples it owns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Client {
    pub id: String,
    pub indices: IndexSet,
}

/// Disjoint assignment of dataset examples to clients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientPartition {
    clients: Vec<Client>,
    dataset_len: usize,
    dataset_fingerprint: u64,
}

impl ClientPartition {
    /// Validates and wraps an explicit assignment: ids unique, clients
    /// non-empty, indices in range and pairwise disjoint.
    pub fn new(clients: Vec<Client>, dataset: &Dataset) -> Result<Self> {
        if clients.is_empty() {
            return Err(FedError::param("a partition needs at least one client"));
        }
        let mut ids = HashSet::with_capacity(clients.len());
        let mut owner = vec![usize::MAX; dataset.len()];
        for (k, client) in clients.iter().enumerate() {
            if !ids.insert(client.id.as_str()) {
                return Err(FedError::param(format!(
                    "duplicate client id {:?}",
                    client.id
                )));
            }
            if client.indices.is_empty() {
                return Err(FedError::param(format!(
                    "client {:?} has no examples",
                    client.id
                )));
            }
            client.indices.validate_for(dataset)?;
            for i in client.indices.iter() {
                if owner[i] != usize::MAX {
                    return Err(FedError::param(format!(
                        "example {i} assigned to both {:?} and {:?}",
                        clients[owner[i]].id, client.id
                    )));
                }
                owner[i] = k;
            }
        }
        Ok(ClientPartition {
            clients,
            dataset_len: dataset.len(),
            dataset_fingerprint: dataset.fingerprint(),
        })
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn client(&self, k: usize) -> &Client {
        &self.clients[k]
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.indices.len()).collect()
    }

    pub fn total_assigned(&self) -> usize {
        self.clients.iter().map(|c| c.indices.len()).sum()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.clients.iter().position(|c| c.id == id)
    }

    pub fn dataset_fingerprint(&self) -> u64 {
        self.dataset_fingerprint
    }

    /// Errors unless `dataset` is the one this partition was built over.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.len() != self.dataset_len || dataset.fingerprint() != self.dataset_fingerprint {
            return Err(FedError::param(
                "partition was built over a different dataset",
            ));
        }
        Ok(())
    }

    pub fn class_counts(&self, dataset: &Dataset) -> Result<Vec<Vec<usize>>> {
        self.clients
            .iter()
            .map(|c| class_counts(dataset, &c.indices))
            .collect()
    }

    /// Per-client class distributions `q_k`.
    pub fn histograms(&self, dataset: &Dataset) -> Result<Vec<ClassDistribution>> {
        self.class_counts(dataset)?
            .iter()
            .map(|c| ClassDistribution::from_counts(c))
            .collect()
    }
}

/// Canonical id of the `k`-th synthesized client. Zero padding makes
/// lexicographic order agree with numeric order.
pub fn client_id(k: usize) -> String {
    format!("client_{k:05}")
}

/// Parameters for Dirichlet label-skew synthesis.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletSpec {
    pub alpha: f64,
    /// Prior class distribution; `None` uses the dataset's own histogram.
    pub prior: Option<ClassDistribution>,
    pub num_clients: usize,
    pub samples_per_client: usize,
    pub seed: u64,
}

/// Natural log of a Gamma(shape, 1) variate.
///
/// Marsaglia–Tsang squeeze for shape >= 1; for shape < 1 the boost
/// `G(a) = G(a + 1) * U^(1/a)` is applied in log space so that tiny shapes
/// do not underflow to exactly zero.
pub fn sample_ln_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0);
    if shape < 1.0 {
        let u: f64 = 1.0 - rng.random::<f64>();
        return sample_ln_gamma(shape + 1.0, rng) + u.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u: f64 = 1.0 - rng.random::<f64>();
        let ln_v = v.ln();
        if u.ln() < 0.5 * x * x + d - d * v + d * ln_v {
            return d.ln() + ln_v;
        }
    }
}

/// Draws `q ~ Dir(alpha * prior)`. Classes with zero prior mass get exactly zero.
pub fn sample_dirichlet<R: Rng + ?Sized>(
    alpha: f64,
    prior: &ClassDistribution,
    rng: &mut R,
) -> Result<ClassDistribution> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FedError::param(format!(
            "dirichlet concentration must be positive, got {alpha}"
        )));
    }
    let logs: Vec<f64> = prior
        .probs()
        .iter()
        .map(|&p| {
            if p > 0.0 {
                sample_ln_gamma(alpha * p, rng)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs
        .iter()
        .map(|&l| {
            if l == f64::NEG_INFINITY {
                0.0
            } else {
                (l - max).exp()
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(ClassDistribution::from_raw_unchecked(
        weights.into_iter().map(|w| w / total).collect(),
    ))
}

/// Removes `exhausted` classes from `q` and rescales the rest:
/// `q(y) / (1 - sum_{s in S} q(s))` off `S`, zero on `S`.
pub fn renormalize_exhausted(
    q: &ClassDistribution,
    exhausted: &[usize],
) -> Result<ClassDistribution> {
    let mut mask = vec![false; q.num_classes()];
    for &s in exhausted {
        if s >= mask.len() {
            return Err(FedError::param(format!("exhausted class {s} out of range")));
        }
        mask[s] = true;
    }
    renormalize_masked(q, &mask)
}

pub(crate) fn renormalize_masked(
    q: &ClassDistribution,
    exhausted: &[bool],
) -> Result<ClassDistribution> {
    // The remaining mass is summed directly instead of as 1 - sum(S): near
    // one-hot draws leave O(1e-300) mass that the subtraction would cancel.
    let remaining: f64 = q
        .probs()
        .iter()
        .zip(exhausted)
        .filter(|(_, &gone)| !gone)
        .map(|(&p, _)| p)
        .sum();
    if !(remaining > 0.0) {
        return Err(FedError::DegenerateRenormalization);
    }
    let probs = q
        .probs()
        .iter()
        .zip(exhausted)
        .map(|(&p, &gone)| if gone { 0.0 } else { p / remaining })
        .collect();
    Ok(ClassDistribution::from_raw_unchecked(probs))
}

fn sample_class<R: Rng + ?Sized>(q: &ClassDistribution, rng: &mut R) -> usize {
    let probs = q.probs();
    let total: f64 = probs.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = c;
            if target < acc {
                return c;
            }
        }
    }
    last
}

/// Dirichlet synthesis with `samples_per_client` examples for every client.
pub fn partition_dirichlet(dataset: &Dataset, spec: &DirichletSpec) -> Result<ClientPartition> {
    if spec.num_clients == 0 || spec.samples_per_client == 0 {
        return Err(FedError::param(
            "num_clients and samples_per_client must be at least 1",
        ));
    }
    let sizes = vec![spec.samples_per_client; spec.num_clients];
    let prior = spec.prior.clone().unwrap_or_else(|| dataset.histogram());
    partition_dirichlet_sized(dataset, spec.alpha, &prior, &sizes, spec.seed)
}

/// Dirichlet synthesis with an explicit size per client.
///
/// Clients are filled in order `0..N`. Each client draws `q_k ~ Dir(alpha p)`,
/// then repeatedly draws a label from `q_k` and claims an unclaimed example of
/// that label. Within-class pools are consumed in seeded-shuffled order. A class
/// whose pool empties is exhausted and removed from every later draw via
/// [`renormalize_exhausted`]. If a client's own `q_k` has no mass left, it
/// redraws `q_k` from the prior restricted to the surviving classes.
pub fn partition_dirichlet_sized(
    dataset: &Dataset,
    alpha: f64,
    prior: &ClassDistribution,
    sizes: &[usize],
    seed: u64,
) -> Result<ClientPartition> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FedError::param(format!(
            "dirichlet concentration must be positive, got {alpha}"
        )));
    }
    if prior.num_classes() != dataset.num_classes() {
        return Err(FedError::param(format!(
            "prior has {} classes, dataset has {}",
            prior.num_classes(),
            dataset.num_classes()
        )));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(FedError::param("every client needs a positive size"));
    }
    let requested: usize = sizes.iter().sum();
    if requested > dataset.len() {
        return Err(FedError::param(format!(
            "{requested} examples requested from a dataset of {}",
            dataset.len()
        )));
    }

    let mut rng = stream(seed, Purpose::Partition, 0, 0);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut exhausted: Vec<bool> = pools.iter().map(|p| p.is_empty()).collect();

    let mut clients = Vec::with_capacity(sizes.len());
    for (k, &size) in sizes.iter().enumerate() {
        let infeasible = |msg: &str| FedError::Infeasible {
            client: k,
            msg: msg.to_string(),
        };
        let mut q = sample_dirichlet(alpha, prior, &mut rng)?;
        let mut effective: Option<ClassDistribution> = None;
        let mut indices = Vec::with_capacity(size);
        while indices.len() < size {
            let current = match effective.take() {
                Some(d) => d,
                None => match renormalize_masked(&q, &exhausted) {
                    Ok(d) => d,
                    Err(FedError::DegenerateRenormalization) => {
                        let rest = renormalize_masked(prior, &exhausted)
                            .map_err(|_| infeasible("every class with prior mass is exhausted"))?;
                        q = sample_dirichlet(alpha, &rest, &mut rng)?;
                        q.clone()
                    }
                    Err(e) => return Err(e),
                },
            };
            let y = sample_class(&current, &mut rng);
            let example = pools[y]
                .pop()
                .ok_or_else(|| FedError::Invariant(format!("drew exhausted class {y}")))?;
            indices.push(example);
            if pools[y].is_empty() {
                exhausted[y] = true;
            } else {
                effective = Some(current);
            }
        }
        clients.push(Client {
            id: client_id(k),
            indices: IndexSet::new(indices),
        });
    }
    ClientPartition::new(clients, dataset)
}

/// Sort-and-shard split: examples sorted by label are cut into
/// `num_clients * shards_per_client` equal contiguous shards, and each client
/// receives `shards_per_client` shards chosen at random.
pub fn partition_shards<R: Rng + ?Sized>(
    dataset: &Dataset,
    num_clients: usize,
    shards_per_client: usize,
    rng: &mut R,
) -> Result<ClientPartition> {
    let total_shards = num_clients
        .checked_mul(shards_per_client)
        .filter(|&s| s > 0)
        .ok_or_else(|| FedError::param("num_clients and shards_per_client must be positive"))?;
    if !dataset.len().is_multiple_of(total_shards) {
        return Err(FedError::param(format!(
            "{} examples cannot be cut into {total_shards} equal shards",
            dataset.len()
        )));
    }
    let shard_len = dataset.len() / total_shards;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by_key(|&i| dataset.label(i));
    let mut shard_ids: Vec<usize> = (0..total_shards).collect();
    shard_ids.shuffle(rng);

    let clients = shard_ids
        .chunks(shards_per_client)
        .enumerate()
        .map(|(k, shards)| Client {
            id: client_id(k),
            indices: IndexSet::new(
                shards
                    .iter()
                    .flat_map(|&s| order[s * shard_len..(s + 1) * shard_len].iter().copied())
                    .collect(),
            ),
        })
        .collect();
    ClientPartition::new(clients, dataset)
}

/// Client sizes drawn log-uniformly from `[min, max]`, for imbalanced populations.
pub fn log_uniform_sizes<R: Rng + ?Sized>(
    num_clients: usize,
    min: usize,
    max: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if min == 0 || max < min {
        return Err(FedError::param(format!(
            "invalid size range [{min}, {max}]"
        )));
    }
    let (lo, hi) = ((min as f64).ln(), (max as f64).ln());
    Ok((0..num_clients)
        .map(|_| {
            let s = (lo + (hi - lo) * rng.random::<f64>()).exp().round() as usize;
            s.clamp(min, max)
        })
        .collect())
}

/// Writes `client_id,example_index` rows in client order, then index order.
pub fn save_partition_csv(partition: &ClientPartition, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| FedError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| FedError::io(path, e);
    writeln!(out, "client_id,example_index").map_err(io)?;
    for client in partition.clients() {
        for i in client.indices.iter() {
            writeln!(out, "{},{}", client.id, i).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Reads a partition CSV. Clients appear in order of first occurrence.
pub fn load_partition_csv(path: impl AsRef<Path>, dataset: &Dataset) -> Result<ClientPartition> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| FedError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(file);
    let mut records = reader.records();
    match records.next() {
        Some(Ok(h)) if h.iter().eq(["client_id", "example_index"]) => {}
        Some(Err(e)) => return Err(FedError::format(path, 1, e.to_string())),
        _ => {
            return Err(FedError::format(
                path,
                1,
                "header must be client_id,example_index",
            ))
        }
    }
    let mut clients: Vec<Client> = Vec::new();
    let mut last: Option<usize> = None;
    for record in records {
        let record = record.map_err(|e| {
            FedError::format(path, e.position().map_or(0, |p| p.line()), e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 2 {
            return Err(FedError::format(
                path,
                line,
                "expected client_id,example_index",
            ));
        }
        let id = &record[0];
        let index: usize = record[1].trim().parse().map_err(|_| {
            FedError::format(
                path,
                line,
                format!("example index {:?} is not an integer", &record[1]),
            )
        })?;
        if index >= dataset.len() {
            return Err(FedError::format(
                path,
                line,
                format!("example index {index} out of range"),
            ));
        }
        let k = match last.filter(|&k| clients[k].id == id) {
            Some(k) => k,
            None => match clients.iter().position(|c| c.id == id) {
                Some(k) => k,
                None => {
                    clients.push(Client {
                        id: id.to_string(),
                        indices: IndexSet::default(),
                    });
                    clients.len() - 1
                }
            },
        };
        let mut v = std::mem::take(&mut clients[k].indices).into_vec();
        v.push(index);
        clients[k].indices = IndexSet::new(v);
        last = Some(k);
    }
    ClientPartition::new(clients, dataset)
}
