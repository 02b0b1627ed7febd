//! Experiment configuration, the centralized baseline and milestone reports.
//!
//! An experiment file is TOML with a top-level `schema_version`; see the
//! README for the full layout. [`run_sweep`] expands the sweep axes into a
//! grid and writes one summary row per point.

mod sweep;

pub use sweep::{run_sweep, GridPoint, SweepOutcome, SweepRow, SWEEP_HEADER};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_blobs_with_holdout, load_csv, ClassDistribution, Dataset};
use crate::engine::{FedConfig, RoundRecord, TargetDistribution};
use crate::error::{FedError, Result};
use crate::model::{Batch, ModelParams, ModelSpec};
use crate::partition::{
    load_partition_csv, log_uniform_sizes, partition_dirichlet_sized, partition_shards,
    ClientPartition,
};
use crate::rng::{derive_seed, stream, Purpose};

pub const SCHEMA_VERSION: u32 = 1;

/// Where examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Gaussian blobs, regenerated per replicate seed.
    Blobs {
        num_classes: usize,
        per_class: usize,
        test_per_class: usize,
        feature_dim: usize,
        spread: f64,
    },
    /// Fixed train and test files (`f0..f{d-1},label`).
    Csv {
        train: PathBuf,
        test: PathBuf,
        num_classes: Option<usize>,
    },
}

/// How training examples are split across clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionSpec {
    /// Label skew from `Dir(alpha p)`; `alpha` comes from the sweep axis.
    Dirichlet {
        num_clients: usize,
        #[serde(default)]
        samples_per_client: Option<usize>,
        /// Draw client sizes log-uniformly from `[min, max]` instead.
        #[serde(default)]
        log_uniform_sizes: Option<[usize; 2]>,
        /// Defaults to the dataset's class histogram.
        #[serde(default)]
        prior: Option<Vec<f64>>,
    },
    Shards {
        num_clients: usize,
        shards_per_client: usize,
    },
    /// A `client_id,example_index` file over the training set.
    Manual { path: PathBuf },
}

impl PartitionSpec {
    pub fn uses_alpha(&self) -> bool {
        matches!(self, PartitionSpec::Dirichlet { .. })
    }
}

/// Client-side method variants. Server momentum is a separate axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedir")]
    FedIr,
    #[serde(rename = "fedvc")]
    FedVc,
    #[serde(rename = "fedir+fedvc")]
    FedIrVc,
}

impl Algorithm {
    pub fn uses_fedir(self) -> bool {
        matches!(self, Algorithm::FedIr | Algorithm::FedIrVc)
    }

    pub fn uses_fedvc(self) -> bool {
        matches!(self, Algorithm::FedVc | Algorithm::FedIrVc)
    }

    pub fn parse(s: &str) -> Result<Algorithm> {
        match s.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Algorithm::FedAvg),
            "fedir" => Ok(Algorithm::FedIr),
            "fedvc" => Ok(Algorithm::FedVc),
            "fedir+fedvc" | "fedvc+fedir" => Ok(Algorithm::FedIrVc),
            other => Err(FedError::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedIr => "fedir",
            Algorithm::FedVc => "fedvc",
            Algorithm::FedIrVc => "fedir+fedvc",
        })
    }
}

/// Grid axes. Every pair of `eta_effs` and `betas` is run with client step
/// size `eta_eff * (1 - beta)`, so the effective step stays on the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    pub report_goals: Vec<usize>,
    #[serde(default = "default_epochs")]
    pub local_epochs: Vec<f64>,
    pub eta_effs: Vec<f64>,
    #[serde(default = "default_betas")]
    pub betas: Vec<f64>,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    /// Replicate indices; each reseeds data, partition, init and training.
    #[serde(default = "default_replicates")]
    pub replicates: Vec<u64>,
}

fn default_alphas() -> Vec<f64> {
    vec![1.0]
}
fn default_epochs() -> Vec<f64> {
    vec![1.0]
}
fn default_betas() -> Vec<f64> {
    vec![0.0]
}
fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::FedAvg]
}
fn default_replicates() -> Vec<u64> {
    vec![0]
}

/// Pooled-data SGD baseline used as the relative-accuracy denominator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentralConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub root_seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    pub dataset: DatasetSource,
    pub partition: PartitionSpec,
    pub model: ModelSpec,
    /// Base federated settings; the sweep overrides K, E, step size,
    /// momentum, method flags, seed and eval interval per point.
    #[serde(default)]
    pub fed: FedConfig,
    pub sweep: SweepAxes,
    pub central: CentralConfig,
    #[serde(default = "default_thresholds")]
    pub milestones: Vec<f64>,
    /// FedIR target distribution; uniform when absent.
    #[serde(default)]
    pub target: Option<Vec<f64>>,
    /// Adds a `wall_ms` column to per-round CSVs.
    #[serde(default)]
    pub record_timing: bool,
}

fn default_eval_interval() -> usize {
    1
}
fn default_thresholds() -> Vec<f64> {
    vec![0.1, 0.5, 0.9]
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| FedError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; relative data paths resolve against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| FedError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetSource::Csv { train, test, .. } = &mut cfg.dataset {
            fix(train);
            fix(test);
        }
        if let PartitionSpec::Manual { path } = &mut cfg.partition {
            fix(path);
        }
        fix(&mut cfg.out_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FedError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FedError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let s = &self.sweep;
        let axes = [
            ("alphas", s.alphas.is_empty()),
            ("report_goals", s.report_goals.is_empty()),
            ("local_epochs", s.local_epochs.is_empty()),
            ("eta_effs", s.eta_effs.is_empty()),
            ("betas", s.betas.is_empty()),
            ("algorithms", s.algorithms.is_empty()),
            ("replicates", s.replicates.is_empty()),
        ];
        if let Some((name, _)) = axes.iter().find(|a| a.1) {
            return bad(format!("sweep axis {name} is empty"));
        }
        if s.alphas.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return bad("alphas must be positive and finite".into());
        }
        if s.eta_effs.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return bad("eta_effs must be positive".into());
        }
        if s.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("betas must lie in [0, 1)".into());
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1".into());
        }
        if self.central.batch_size == 0 || !(self.central.lr > 0.0) {
            return bad("central baseline needs a positive lr and batch size".into());
        }
        if self.milestones.iter().any(|t| !(0.0..=10.0).contains(t)) {
            return bad("milestone thresholds must be non-negative fractions".into());
        }
        self.model
            .validate()
            .map_err(|e| FedError::Config(e.to_string()))?;
        if let DatasetSource::Blobs {
            num_classes,
            feature_dim,
            ..
        } = self.dataset
        {
            if num_classes != self.model.num_classes || feature_dim != self.model.feature_dim {
                return bad("model shape does not match the blob dataset".into());
            }
        }
        match &self.partition {
            PartitionSpec::Dirichlet {
                num_clients,
                samples_per_client,
                log_uniform_sizes,
                ..
            } => {
                if *num_clients == 0 {
                    return bad("partition needs at least one client".into());
                }
                if samples_per_client.is_some() == log_uniform_sizes.is_some() {
                    return bad("dirichlet partition needs exactly one of samples_per_client or log_uniform_sizes".into());
                }
                if s.report_goals.iter().any(|&k| k == 0 || k > *num_clients) {
                    return bad("report goals must lie in [1, num_clients]".into());
                }
            }
            PartitionSpec::Shards { num_clients, .. } => {
                if s.report_goals.iter().any(|&k| k == 0 || k > *num_clients) {
                    return bad("report goals must lie in [1, num_clients]".into());
                }
            }
            PartitionSpec::Manual { .. } => {}
        }
        if s.algorithms.iter().any(|a| a.uses_fedvc()) {
            match self.fed.virtual_size {
                Some(n) if n > 0 && n % self.fed.batch_size == 0 => {}
                _ => {
                    return bad(
                        "fedvc needs fed.virtual_size, a positive multiple of fed.batch_size"
                            .into(),
                    )
                }
            }
        }
        Ok(())
    }

    /// Seeds for one replicate: data, partition, model init and training are
    /// independent streams, shared across all grid points of the replicate so
    /// that methods and hyperparameters compare on identical data.
    pub fn replicate_seeds(&self, replicate: u64) -> ReplicateSeeds {
        let s = |tag: u64| derive_seed(self.root_seed, &[Purpose::Sweep as u64, replicate, tag]);
        ReplicateSeeds {
            data: s(1),
            partition: s(2),
            init: s(3),
            training: s(4),
            central: s(5),
        }
    }

    /// Train and test sets for one replicate.
    pub fn build_datasets(&self, replicate: u64) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSource::Blobs {
                num_classes,
                per_class,
                test_per_class,
                feature_dim,
                spread,
            } => generate_blobs_with_holdout(
                *num_classes,
                *per_class,
                *test_per_class,
                *feature_dim,
                *spread,
                self.replicate_seeds(replicate).data,
            ),
            DatasetSource::Csv {
                train,
                test,
                num_classes,
            } => {
                let train = load_csv(train, *num_classes)?;
                let test = load_csv(test, Some(train.num_classes()))?;
                Ok((train, test))
            }
        }
    }

    /// Client split of `train` for one replicate and concentration.
    pub fn build_partition(
        &self,
        train: &Dataset,
        replicate: u64,
        alpha: f64,
    ) -> Result<ClientPartition> {
        let seed = self.replicate_seeds(replicate).partition;
        match &self.partition {
            PartitionSpec::Dirichlet {
                num_clients,
                samples_per_client,
                log_uniform_sizes: range,
                prior,
            } => {
                let prior = match prior {
                    Some(p) => ClassDistribution::new(p.clone())?,
                    None => train.histogram(),
                };
                let sizes = match (samples_per_client, range) {
                    (Some(n), _) => vec![*n; *num_clients],
                    (None, Some([lo, hi])) => {
                        let mut rng = stream(seed, Purpose::ClientSizes, 0, 0);
                        log_uniform_sizes(*num_clients, *lo, *hi, &mut rng)?
                    }
                    (None, None) => {
                        return Err(FedError::Config(
                            "dirichlet partition has no client sizes".into(),
                        ))
                    }
                };
                partition_dirichlet_sized(train, alpha, &prior, &sizes, seed)
            }
            PartitionSpec::Shards {
                num_clients,
                shards_per_client,
            } => {
                let mut rng = stream(seed, Purpose::Shards, 0, 0);
                partition_shards(train, *num_clients, *shards_per_client, &mut rng)
            }
            PartitionSpec::Manual { path } => load_partition_csv(path, train),
        }
    }

    /// Model spec with the replicate's init seed.
    pub fn model_for(&self, replicate: u64) -> ModelSpec {
        ModelSpec {
            init_seed: self.replicate_seeds(replicate).init,
            ..self.model.clone()
        }
    }

    /// Federated settings for one grid point.
    pub fn fed_config_for(&self, point: &GridPoint) -> Result<FedConfig> {
        let cfg = FedConfig {
            report_goal: point.report_goal,
            local_epochs: point.local_epochs,
            client_lr: crate::metrics::base_learning_rate(point.eta_eff, point.beta)?,
            momentum: point.beta,
            use_fedir: point.algorithm.uses_fedir(),
            use_fedvc: point.algorithm.uses_fedvc(),
            seed: self.replicate_seeds(point.replicate).training,
            eval_interval: self.eval_interval,
            ..self.fed.clone()
        };
        Ok(cfg)
    }

    pub fn target_distribution(&self) -> Result<Option<TargetDistribution>> {
        self.target
            .as_ref()
            .map(|p| ClassDistribution::new(p.clone()).map(TargetDistribution))
            .transpose()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReplicateSeeds {
    pub data: u64,
    pub partition: u64,
    pub init: u64,
    pub training: u64,
    pub central: u64,
}

/// Plain shuffled minibatch SGD on the pooled training set.
///
/// Batches are cut from a stream of fresh epoch shuffles. Returns the final
/// parameters and their accuracy on `test`.
pub fn train_centralized(
    train: &Dataset,
    model: &ModelSpec,
    lr: f64,
    steps: usize,
    batch_size: usize,
    seed: u64,
    test: &Dataset,
) -> Result<(ModelParams, f64)> {
    model.validate()?;
    if batch_size == 0 || !(lr > 0.0 && lr.is_finite()) {
        return Err(FedError::param(
            "centralized training needs a positive lr and batch size",
        ));
    }
    let mut rng = stream(seed, Purpose::Centralized, 0, 0);
    let mut theta = model.init()?;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let take = (batch_size - batch.len()).min(order.len() - cursor);
            batch.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let (out, grad) = model.loss_and_gradient(&theta, train, &Batch::new(batch)?)?;
        if !out.loss.is_finite() {
            return Err(FedError::numeric(format!(
                "centralized training diverged at step {step}: loss {} with lr {lr}",
                out.loss
            )));
        }
        theta = theta.step(grad.as_slice(), lr).map_err(|e| {
            FedError::numeric(format!(
                "centralized training diverged at step {step} with lr {lr}: {e}"
            ))
        })?;
    }
    let acc = model.evaluate(&theta, test, None)?;
    Ok((theta, acc))
}

/// First round at which a relative-accuracy threshold is met.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Milestone {
    Reached(usize),
    NotReached,
}

impl fmt::Display for Milestone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Milestone::Reached(r) => write!(f, "{r}"),
            Milestone::NotReached => f.write_str("not reached"),
        }
    }
}

/// Milestones over a `(round, relative_accuracy)` curve in round order.
pub fn milestones_from_curve(curve: &[(usize, f64)], thresholds: &[f64]) -> Vec<Milestone> {
    thresholds
        .iter()
        .map(|&t| {
            curve
                .iter()
                .find(|&&(_, rel)| rel >= t)
                .map_or(Milestone::NotReached, |&(r, _)| Milestone::Reached(r))
        })
        .collect()
}

/// For each threshold, the first evaluated round whose accuracy divided by
/// `central_accuracy` reaches it. A non-positive baseline reaches nothing.
pub fn report_milestones(
    records: &[RoundRecord],
    central_accuracy: f64,
    thresholds: &[f64],
) -> Vec<Milestone> {
    if !(central_accuracy > 0.0) {
        return vec![Milestone::NotReached; thresholds.len()];
    }
    let curve: Vec<(usize, f64)> = records
        .iter()
        .filter_map(|r| r.eval_accuracy.map(|a| (r.round, a / central_accuracy)))
        .collect();
    milestones_from_curve(&curve, thresholds)
}
