//! Federated rounds: select, broadcast, train locally, aggregate, update.
//!
//! One [`FedConfig`] covers all four methods. `momentum > 0` gives FedAvgM,
//! `use_fedir` switches client objectives to importance-reweighted losses,
//! and `use_fedvc` replaces epoch-based local work with fixed-size virtual
//! clients plus size-proportional selection.

pub mod client;
pub mod selection;
pub mod server;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassDistribution, Dataset};
use crate::error::{FedError, Result};
use crate::metrics::{population_distribution, weighted_emd};
use crate::model::{ModelParams, ModelSpec};
use crate::partition::ClientPartition;
use crate::rng::{client_stream, stream, Purpose};

pub use client::{client_update, importance_weights, ClientUpdate, TargetDistribution};
pub use selection::{select_clients_uniform, select_clients_weighted};
pub use server::{aggregate, server_step, ServerState};

/// Hyperparameters of one federated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    /// Clients selected per round (K).
    pub report_goal: usize,
    /// Local epochs (E); may be fractional. Ignored under FedVC.
    pub local_epochs: f64,
    /// Examples per virtual client (N_VC); required under FedVC.
    pub virtual_size: Option<usize>,
    pub batch_size: usize,
    pub client_lr: f64,
    pub server_lr: f64,
    pub momentum: f64,
    pub use_fedir: bool,
    pub use_fedvc: bool,
    pub rounds: usize,
    pub seed: u64,
    /// Evaluate every this many rounds (and always after the last one).
    pub eval_interval: usize,
    /// Simulate the clients of a round on the rayon pool.
    pub parallel: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            report_goal: 1,
            local_epochs: 1.0,
            virtual_size: None,
            batch_size: 64,
            client_lr: 0.01,
            server_lr: 1.0,
            momentum: 0.0,
            use_fedir: false,
            use_fedvc: false,
            rounds: 1,
            seed: 0,
            eval_interval: 1,
            parallel: true,
        }
    }
}

impl FedConfig {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        let bad = |m: String| Err(FedError::param(m));
        if self.report_goal == 0 || self.report_goal > num_clients {
            return bad(format!(
                "report goal {} must lie in [1, {num_clients}]",
                self.report_goal
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.client_lr > 0.0 && self.client_lr.is_finite()) {
            return bad("client learning rate must be positive".into());
        }
        if !(self.server_lr > 0.0 && self.server_lr.is_finite()) {
            return bad("server learning rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.local_epochs >= 0.0 && self.local_epochs.is_finite()) {
            return bad("local epochs must be a non-negative real".into());
        }
        if self.eval_interval == 0 {
            return bad("eval interval must be at least 1".into());
        }
        if self.use_fedvc {
            match self.virtual_size {
                Some(n) if n > 0 && n % self.batch_size == 0 => {}
                Some(n) => {
                    return bad(format!(
                        "virtual size {n} must be a positive multiple of batch size {}",
                        self.batch_size
                    ))
                }
                None => return bad("FedVC requires virtual_size".into()),
            }
        }
        Ok(())
    }

    /// Human-readable method name, e.g. `FedAvgM+FedIR`.
    pub fn algorithm_name(&self) -> String {
        let mut name = String::from(if self.momentum > 0.0 {
            "FedAvgM"
        } else {
            "FedAvg"
        });
        if self.use_fedir {
            name.push_str("+FedIR");
        }
        if self.use_fedvc {
            name.push_str("+FedVC");
        }
        name
    }
}

/// Metrics for one completed round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    /// 1-based: the number of server updates applied so far.
    pub round: usize,
    pub selected: Vec<String>,
    /// Mean of the selected clients' average local batch objective.
    pub mean_train_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    /// Size-weighted EMD of the selected clients against the population.
    pub emd_of_selection: f64,
    /// Local steps of the busiest selected client.
    pub max_local_steps: usize,
    /// Running sum of `max_local_steps`: the batch budget spent so far.
    pub batch_budget: usize,
    /// Excluded from determinism comparisons.
    pub wall_ms: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

/// Writes round records as CSV. `selected_client_ids` is `;`-joined.
/// With `with_timing = false` the `wall_ms` column is omitted and the output
/// is a pure function of the run configuration.
pub fn write_round_csv<W: Write>(
    records: &[RoundRecord],
    mut out: W,
    with_timing: bool,
) -> std::io::Result<()> {
    write!(out, "round,selected_client_ids,mean_train_loss,eval_accuracy,emd_of_selection,max_local_steps,batch_budget")?;
    writeln!(out, "{}", if with_timing { ",wall_ms" } else { "" })?;
    for r in records {
        write!(
            out,
            "{},{},{},{},{:?},{},{}",
            r.round,
            r.selected.join(";"),
            opt(r.mean_train_loss),
            opt(r.eval_accuracy),
            r.emd_of_selection,
            r.max_local_steps,
            r.batch_budget
        )?;
        if with_timing {
            write!(out, ",{:.3}", r.wall_ms)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn save_round_csv(
    records: &[RoundRecord],
    path: impl AsRef<Path>,
    with_timing: bool,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_round_csv(records, &mut buf, with_timing).map_err(|e| FedError::io(path, e))?;
    fs::write(path, buf).map_err(|e| FedError::io(path, e))
}

/// Reads `(round, eval_accuracy)` pairs back from a round CSV, skipping rows
/// without an evaluation.
pub fn load_round_accuracies(path: impl AsRef<Path>) -> Result<Vec<(usize, f64)>> {
    let path = path.as_ref();
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| FedError::format(path, 1, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| FedError::format(path, 1, e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FedError::format(path, 1, format!("missing column {name}")))
    };
    let (round_col, acc_col) = (col("round")?, col("eval_accuracy")?);
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            FedError::format(path, e.position().map_or(0, |p| p.line()), e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let round = record[round_col]
            .parse()
            .map_err(|_| FedError::format(path, line, "round is not an integer"))?;
        let acc = &record[acc_col];
        if acc.is_empty() {
            continue;
        }
        let acc = acc
            .parse()
            .map_err(|_| FedError::format(path, line, "eval_accuracy is not a number"))?;
        out.push((round, acc));
    }
    Ok(out)
}

/// Resumable snapshot of a run: server state plus the spent batch budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub state: ServerState,
    pub batch_budget: usize,
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text =
            serde_json::to_string_pretty(self).map_err(|e| FedError::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| FedError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, model: &ModelSpec) -> Result<Checkpoint> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| FedError::format(path, e.line() as u64, e.to_string()))?;
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(FedError::format(
                path,
                1,
                format!("unsupported checkpoint schema {}", ck.schema_version),
            ));
        }
        if *ck.state.theta.layout() != model.layout()
            || ck.state.velocity.len() != ck.state.theta.len()
        {
            return Err(FedError::format(
                path,
                1,
                "checkpoint layout does not match the model spec",
            ));
        }
        Ok(ck)
    }
}

/// Final model and per-round history of a training run.
#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub state: ServerState,
    pub records: Vec<RoundRecord>,
}

impl TrainingRun {
    pub fn final_params(&self) -> &ModelParams {
        &self.state.theta
    }

    pub fn evaluations(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.eval_accuracy.map(|a| (r.round, a)))
            .collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.eval_accuracy)
    }

    pub fn best_accuracy(&self) -> Option<f64> {
        self.records
            .iter()
            .filter_map(|r| r.eval_accuracy)
            .reduce(f64::max)
    }
}

/// Drives federated rounds over borrowed data.
pub struct FederatedTrainer<'a> {
    train: &'a Dataset,
    partition: &'a ClientPartition,
    test: &'a Dataset,
    model: &'a ModelSpec,
    config: FedConfig,
    target: Option<TargetDistribution>,
    histograms: Vec<ClassDistribution>,
    population: ClassDistribution,
    state: ServerState,
    batch_budget: usize,
}

impl<'a> FederatedTrainer<'a> {
    /// Fresh run from the model's seeded initialization. Under FedIR the
    /// target defaults to uniform over the classes.
    pub fn new(
        train: &'a Dataset,
        partition: &'a ClientPartition,
        test: &'a Dataset,
        model: &'a ModelSpec,
        config: FedConfig,
        target: Option<TargetDistribution>,
    ) -> Result<Self> {
        let theta = model.init()?;
        Self::build(
            train,
            partition,
            test,
            model,
            config,
            target,
            ServerState::new(theta),
            0,
        )
    }

    /// Continues a run from a checkpoint. Streams are keyed by round, so the
    /// continuation is identical to an uninterrupted run.
    pub fn resume(
        train: &'a Dataset,
        partition: &'a ClientPartition,
        test: &'a Dataset,
        model: &'a ModelSpec,
        config: FedConfig,
        target: Option<TargetDistribution>,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        if *checkpoint.state.theta.layout() != model.layout() {
            return Err(FedError::param(
                "checkpoint layout does not match the model spec",
            ));
        }
        Self::build(
            train,
            partition,
            test,
            model,
            config,
            target,
            checkpoint.state,
            checkpoint.batch_budget,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        train: &'a Dataset,
        partition: &'a ClientPartition,
        test: &'a Dataset,
        model: &'a ModelSpec,
        config: FedConfig,
        target: Option<TargetDistribution>,
        state: ServerState,
        batch_budget: usize,
    ) -> Result<Self> {
        config.validate(partition.len())?;
        model.validate()?;
        partition.check_dataset(train)?;
        if test.dim() != train.dim() || test.num_classes() != train.num_classes() {
            return Err(FedError::param(
                "evaluation set shape differs from training set",
            ));
        }
        let target = match (config.use_fedir, target) {
            (true, None) => Some(TargetDistribution::uniform(train.num_classes())),
            (_, Some(t)) if t.0.num_classes() != train.num_classes() => {
                return Err(FedError::param(
                    "target distribution has the wrong class count",
                ))
            }
            (_, t) => t,
        };
        Ok(FederatedTrainer {
            histograms: partition.histograms(train)?,
            population: population_distribution(partition, train)?,
            train,
            partition,
            test,
            model,
            config,
            target,
            state,
            batch_budget,
        })
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    pub fn config(&self) -> &FedConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            state: self.state.clone(),
            batch_budget: self.batch_budget,
        }
    }

    /// Runs one round and returns its record. On error the server state is
    /// left untouched.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let started = Instant::now();
        let t = self.state.round as u64;
        let root = self.config.seed;
        let k = self.config.report_goal;
        let mut sel_rng = stream(root, Purpose::Selection, t, 0);
        let selected = if self.config.use_fedvc {
            select_clients_weighted(self.partition, k, &mut sel_rng)?
        } else {
            select_clients_uniform(self.partition, k, &mut sel_rng)?
        };

        let theta = &self.state.theta;
        let work = |&pos: &usize| {
            let client = self.partition.client(pos);
            let mut rng = client_stream(root, Purpose::LocalData, t, &client.id);
            client_update(
                self.model,
                theta,
                self.train,
                client,
                &self.config,
                self.target.as_ref(),
                &mut rng,
            )
        };
        let updates: Vec<ClientUpdate> = if self.config.parallel {
            selected.par_iter().map(work).collect::<Result<_>>()?
        } else {
            selected.iter().map(work).collect::<Result<_>>()?
        };

        let weights: Vec<usize> = updates.iter().map(|u| u.num_examples).collect();
        let g_bar = aggregate(&updates, &weights)?;
        let next = server_step(
            &self.state,
            &g_bar,
            self.config.server_lr,
            self.config.momentum,
        )?;

        let round = next.round;
        let eval_accuracy = if round % self.config.eval_interval == 0 || round >= self.config.rounds
        {
            Some(self.model.evaluate(&next.theta, self.test, None)?)
        } else {
            None
        };
        let losses: Vec<f64> = updates.iter().filter_map(|u| u.mean_loss).collect();
        let mean_train_loss =
            (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        let hists: Vec<&ClassDistribution> =
            selected.iter().map(|&p| &self.histograms[p]).collect();
        let sizes: Vec<usize> = selected
            .iter()
            .map(|&p| self.partition.client(p).indices.len())
            .collect();
        let emd_of_selection = weighted_emd(&hists, &sizes, &self.population)?;
        let max_local_steps = updates
            .iter()
            .map(|u| u.local_steps_taken)
            .max()
            .unwrap_or(0);

        self.state = next;
        self.batch_budget += max_local_steps;
        Ok(RoundRecord {
            round,
            selected: selected
                .iter()
                .map(|&p| self.partition.client(p).id.clone())
                .collect(),
            mean_train_loss,
            eval_accuracy,
            emd_of_selection,
            max_local_steps,
            batch_budget: self.batch_budget,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs until `config.rounds` server updates have been applied.
    pub fn run(mut self) -> Result<TrainingRun> {
        let mut records = Vec::with_capacity(self.config.rounds.saturating_sub(self.state.round));
        while self.state.round < self.config.rounds {
            records.push(self.run_round()?);
        }
        Ok(TrainingRun {
            state: self.state,
            records,
        })
    }

    /// Runs until the batch budget reaches `budget` (or `config.rounds` is hit).
    pub fn run_until_budget(mut self, budget: usize) -> Result<TrainingRun> {
        let mut records = Vec::new();
        while self.batch_budget < budget && self.state.round < self.config.rounds {
            records.push(self.run_round()?);
        }
        if let Some(last) = records.last_mut() {
            if last.eval_accuracy.is_none() {
                last.eval_accuracy =
                    Some(self.model.evaluate(&self.state.theta, self.test, None)?);
            }
        }
        Ok(TrainingRun {
            state: self.state,
            records,
        })
    }
}

/// Complete federated run: `config.rounds` rounds from the seeded initial model.
pub fn run_training(
    train: &Dataset,
    partition: &ClientPartition,
    test: &Dataset,
    model: &ModelSpec,
    config: &FedConfig,
    target: Option<TargetDistribution>,
) -> Result<TrainingRun> {
    FederatedTrainer::new(train, partition, test, model, config.clone(), target)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_blobs_with_holdout;
    use crate::partition::{partition_dirichlet, DirichletSpec};

    fn setup() -> (Dataset, Dataset, ClientPartition, ModelSpec) {
        let (train, test) = generate_blobs_with_holdout(4, 40, 20, 3, 1.0, 5).unwrap();
        let spec = DirichletSpec {
            alpha: 0.5,
            prior: None,
            num_clients: 8,
            samples_per_client: 20,
            seed: 1,
        };
        let partition = partition_dirichlet(&train, &spec).unwrap();
        (train, test, partition, ModelSpec::softmax_linear(3, 4))
    }

    fn config() -> FedConfig {
        FedConfig {
            report_goal: 3,
            batch_size: 5,
            client_lr: 0.1,
            rounds: 12,
            eval_interval: 4,
            seed: 3,
            ..FedConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let ok = config();
        assert!(ok.validate(8).is_ok());
        assert!(ok.validate(2).is_err());
        assert!(FedConfig {
            momentum: 1.0,
            ..ok.clone()
        }
        .validate(8)
        .is_err());
        assert!(FedConfig {
            use_fedvc: true,
            ..ok.clone()
        }
        .validate(8)
        .is_err());
        assert!(FedConfig {
            use_fedvc: true,
            virtual_size: Some(12),
            ..ok.clone()
        }
        .validate(8)
        .is_err());
        assert!(FedConfig {
            use_fedvc: true,
            virtual_size: Some(10),
            ..ok
        }
        .validate(8)
        .is_ok());
    }

    #[test]
    fn algorithm_names() {
        assert_eq!(config().algorithm_name(), "FedAvg");
        let all = FedConfig {
            momentum: 0.9,
            use_fedir: true,
            use_fedvc: true,
            ..config()
        };
        assert_eq!(all.algorithm_name(), "FedAvgM+FedIR+FedVC");
    }

    #[test]
    fn evaluation_cadence_and_budget() {
        let (train, test, partition, model) = setup();
        let run = run_training(&train, &partition, &test, &model, &config(), None).unwrap();
        assert_eq!(run.records.len(), 12);
        let evals: Vec<usize> = run.evaluations().iter().map(|e| e.0).collect();
        assert_eq!(evals, vec![4, 8, 12]);
        let mut budget = 0;
        for r in &run.records {
            budget += r.max_local_steps;
            assert_eq!(r.batch_budget, budget);
            assert_eq!(r.selected.len(), 3);
            assert!((0.0..=2.0).contains(&r.emd_of_selection));
        }
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let (train, test, partition, model) = setup();
        let par = run_training(&train, &partition, &test, &model, &config(), None).unwrap();
        let seq_cfg = FedConfig {
            parallel: false,
            ..config()
        };
        let seq = run_training(&train, &partition, &test, &model, &seq_cfg, None).unwrap();
        assert_eq!(par.state, seq.state);
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted() {
        let (train, test, partition, model) = setup();
        let cfg = FedConfig {
            momentum: 0.9,
            ..config()
        };
        let full = run_training(&train, &partition, &test, &model, &cfg, None).unwrap();

        let mut trainer =
            FederatedTrainer::new(&train, &partition, &test, &model, cfg.clone(), None).unwrap();
        for _ in 0..5 {
            trainer.run_round().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        trainer.checkpoint().save(&path).unwrap();
        let ck = Checkpoint::load(&path, &model).unwrap();
        assert_eq!(ck, trainer.checkpoint());
        let resumed = FederatedTrainer::resume(&train, &partition, &test, &model, cfg, None, ck)
            .unwrap()
            .run()
            .unwrap();
        assert_eq!(resumed.state, full.state);
        assert_eq!(resumed.records.len(), 7);
    }

    #[test]
    fn checkpoint_rejects_wrong_model() {
        let (train, test, partition, model) = setup();
        let trainer =
            FederatedTrainer::new(&train, &partition, &test, &model, config(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        trainer.checkpoint().save(&path).unwrap();
        assert!(Checkpoint::load(&path, &ModelSpec::mlp(3, 2, 4)).is_err());
    }

    #[test]
    fn single_client_fedvc_equals_centralized_steps() {
        use crate::model::Batch;
        use rand::seq::SliceRandom;

        let (train, test, _, model) = setup();
        let client = crate::partition::Client {
            id: "solo".into(),
            indices: crate::dataset::IndexSet::new((0..20).collect()),
        };
        let partition = ClientPartition::new(vec![client.clone()], &train).unwrap();
        let cfg = FedConfig {
            report_goal: 1,
            use_fedvc: true,
            virtual_size: Some(20),
            batch_size: 5,
            client_lr: 0.1,
            rounds: 1,
            ..FedConfig::default()
        };
        let run = run_training(&train, &partition, &test, &model, &cfg, None).unwrap();

        let mut rng = client_stream(cfg.seed, Purpose::LocalData, 0, "solo");
        let mut order: Vec<usize> = (0..20).collect();
        order.shuffle(&mut rng);
        let start = model.init().unwrap();
        let mut theta = start.clone();
        for chunk in order.chunks(5) {
            let g = model
                .gradient(&theta, &train, &Batch::new(chunk.to_vec()).unwrap())
                .unwrap();
            theta = theta.step(g.as_slice(), 0.1).unwrap();
        }
        // theta - 1 * (start - theta_local), reassociated.
        for (a, b) in run.final_params().flat().iter().zip(theta.flat()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn round_csv_round_trip() {
        let (train, test, partition, model) = setup();
        let run = run_training(&train, &partition, &test, &model, &config(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rounds.csv");
        save_round_csv(&run.records, &path, true).unwrap();
        assert_eq!(load_round_accuracies(&path).unwrap(), run.evaluations());
        let mut buf = Vec::new();
        write_round_csv(&run.records[..1], &mut buf, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("round,selected_client_ids,mean_train_loss,eval_accuracy,emd_of_selection,max_local_steps,batch_budget\n1,"));
        assert!(!text.contains("wall_ms"));
    }

    #[test]
    fn failed_round_leaves_state_untouched() {
        let (_, _, _, model) = setup();
        // Features near 1e200 with a step of 1e200 overflow on the first step.
        let (train, test) = generate_blobs_with_holdout(4, 40, 20, 3, 1e200, 5).unwrap();
        let spec = DirichletSpec {
            alpha: 0.5,
            prior: None,
            num_clients: 8,
            samples_per_client: 20,
            seed: 1,
        };
        let partition = partition_dirichlet(&train, &spec).unwrap();
        let cfg = FedConfig {
            client_lr: 1e200,
            ..config()
        };
        let mut trainer =
            FederatedTrainer::new(&train, &partition, &test, &model, cfg, None).unwrap();
        let before = trainer.state().clone();
        let err = trainer.run_round().unwrap_err();
        assert!(err.is_numeric(), "{err}");
        assert_eq!(trainer.state(), &before);
    }
}
