//! `fedsim` command-line driver.
//!
//! Every subcommand reads an experiment TOML via `--config`. Flags override
//! single fields; for one-off runs the first value of each sweep axis is used.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsim::dataset::save_csv;
use fedsim::engine::{load_round_accuracies, save_round_csv, Checkpoint, FederatedTrainer};
use fedsim::experiment::{
    milestones_from_curve, run_sweep, train_centralized, Algorithm, ExperimentConfig, GridPoint,
};
use fedsim::metrics::non_identicalness;
use fedsim::partition::{load_partition_csv, save_partition_csv};
use fedsim::FedError;

#[derive(Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Deterministic federated-learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the replicate's train and test sets to `<out_dir>/train.csv` and `test.csv`.
    GenData(Common),
    /// Split the training set and write `<out_dir>/partition.csv`.
    Partition(Common),
    /// Per-client EMD report, written to `<out_dir>/non_identicalness.csv`.
    Measure {
        #[command(flatten)]
        common: Common,
        /// Measure this partition file instead of building one.
        #[arg(long)]
        partition_file: Option<PathBuf>,
    },
    /// Train the pooled-data baseline and print its accuracy.
    TrainCentral(Common),
    /// Run one federated configuration.
    TrainFed {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the full grid, resuming any existing summary.
    Sweep(Common),
    /// Rounds needed to reach relative-accuracy thresholds.
    Milestones {
        /// Per-round CSV from `train-fed` or `sweep`.
        #[arg(long)]
        rounds_csv: PathBuf,
        #[arg(long)]
        central_accuracy: f64,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.5, 0.9])]
        thresholds: Vec<f64>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    root_seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    report_goal: Option<usize>,
    #[arg(long)]
    local_epochs: Option<f64>,
    #[arg(long)]
    eta_eff: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// fedavg, fedir, fedvc or fedir+fedvc
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    replicate: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    virtual_size: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
}

impl Common {
    fn load(&self) -> fedsim::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.root_seed {
            cfg.root_seed = v;
        }
        let axes = &mut cfg.sweep;
        if let Some(v) = self.alpha {
            axes.alphas = vec![v];
        }
        if let Some(v) = self.report_goal {
            axes.report_goals = vec![v];
        }
        if let Some(v) = self.local_epochs {
            axes.local_epochs = vec![v];
        }
        if let Some(v) = self.eta_eff {
            axes.eta_effs = vec![v];
        }
        if let Some(v) = self.beta {
            axes.betas = vec![v];
        }
        if let Some(v) = &self.algorithm {
            axes.algorithms = vec![Algorithm::parse(v)?];
        }
        if let Some(v) = self.replicate {
            axes.replicates = vec![v];
        }
        if let Some(v) = self.rounds {
            cfg.fed.rounds = v;
        }
        if let Some(v) = self.batch_size {
            cfg.fed.batch_size = v;
        }
        if let Some(v) = self.virtual_size {
            cfg.fed.virtual_size = Some(v);
        }
        if let Some(v) = self.eval_interval {
            cfg.eval_interval = v;
        }
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| FedError::io(&cfg.out_dir, e))?;
        Ok(cfg)
    }
}

/// First grid point: the single run a non-sweep command performs.
fn first_point(cfg: &ExperimentConfig) -> GridPoint {
    cfg.grid()[0]
}

fn run(cli: Cli) -> fedsim::Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            let (train, test) = cfg.build_datasets(first_point(&cfg).replicate)?;
            save_csv(&train, cfg.out_dir.join("train.csv"))?;
            save_csv(&test, cfg.out_dir.join("test.csv"))?;
            println!(
                "wrote {} training and {} test examples to {}",
                train.len(),
                test.len(),
                cfg.out_dir.display()
            );
        }
        Command::Partition(c) => {
            let cfg = c.load()?;
            let p = first_point(&cfg);
            let (train, _) = cfg.build_datasets(p.replicate)?;
            let partition = cfg.build_partition(&train, p.replicate, p.alpha)?;
            let path = cfg.out_dir.join("partition.csv");
            save_partition_csv(&partition, &path)?;
            let report = non_identicalness(&partition, &train)?;
            println!(
                "clients={} assigned={} emd={:?}",
                partition.len(),
                partition.total_assigned(),
                report.weighted_average
            );
            println!("wrote {}", path.display());
        }
        Command::Measure {
            common,
            partition_file,
        } => {
            let cfg = common.load()?;
            let p = first_point(&cfg);
            let (train, _) = cfg.build_datasets(p.replicate)?;
            let partition = match partition_file {
                Some(path) => load_partition_csv(path, &train)?,
                None => cfg.build_partition(&train, p.replicate, p.alpha)?,
            };
            let report = non_identicalness(&partition, &train)?;
            let path = cfg.out_dir.join("non_identicalness.csv");
            report.save_csv(&path)?;
            println!("weighted_average_emd={:?}", report.weighted_average);
            println!("wrote {}", path.display());
        }
        Command::TrainCentral(c) => {
            let cfg = c.load()?;
            let r = first_point(&cfg).replicate;
            let (train, test) = cfg.build_datasets(r)?;
            let (params, acc) = train_centralized(
                &train,
                &cfg.model_for(r),
                cfg.central.lr,
                cfg.central.steps,
                cfg.central.batch_size,
                cfg.replicate_seeds(r).central,
                &test,
            )?;
            let path = cfg.out_dir.join("central_params.txt");
            params.save(&path)?;
            println!("central_accuracy={acc:?}");
        }
        Command::TrainFed { common, resume } => {
            let cfg = common.load()?;
            let p = first_point(&cfg);
            let (train, test) = cfg.build_datasets(p.replicate)?;
            let partition = cfg.build_partition(&train, p.replicate, p.alpha)?;
            let model = cfg.model_for(p.replicate);
            let fed = cfg.fed_config_for(&p)?;
            let target = cfg.target_distribution()?;
            let trainer = match resume {
                Some(path) => {
                    let ck = Checkpoint::load(&path, &model)?;
                    FederatedTrainer::resume(&train, &partition, &test, &model, fed, target, ck)?
                }
                None => FederatedTrainer::new(&train, &partition, &test, &model, fed, target)?,
            };
            let method = trainer.config().algorithm_name();
            let run = trainer.run()?;
            save_round_csv(
                &run.records,
                cfg.out_dir.join("rounds.csv"),
                cfg.record_timing,
            )?;
            run.final_params().save(cfg.out_dir.join("params.txt"))?;
            Checkpoint {
                schema_version: fedsim::engine::CHECKPOINT_SCHEMA_VERSION,
                batch_budget: run.records.last().map_or(0, |r| r.batch_budget),
                state: run.state.clone(),
            }
            .save(cfg.out_dir.join("checkpoint.json"))?;
            let fmt = |v: Option<f64>| v.map_or("none".to_string(), |a| format!("{a:?}"));
            println!(
                "method={method} rounds={} final_accuracy={} best_accuracy={}",
                run.state.round,
                fmt(run.final_accuracy()),
                fmt(run.best_accuracy())
            );
        }
        Command::Sweep(c) => {
            let cfg = c.load()?;
            let out = run_sweep(&cfg)?;
            let failed = out.rows.iter().filter(|r| !r.is_ok()).count();
            println!(
                "ran {} points ({failed} failed), skipped {} already present; summary at {}",
                out.rows.len(),
                out.skipped,
                out.summary_path.display()
            );
        }
        Command::Milestones {
            rounds_csv,
            central_accuracy,
            thresholds,
        } => {
            if !(central_accuracy > 0.0 && central_accuracy <= 1.0) {
                return Err(FedError::param("central accuracy must lie in (0, 1]"));
            }
            let curve: Vec<(usize, f64)> = load_round_accuracies(&rounds_csv)?
                .into_iter()
                .map(|(r, a)| (r, a / central_accuracy))
                .collect();
            println!("threshold,round");
            for (t, m) in thresholds
                .iter()
                .zip(milestones_from_curve(&curve, &thresholds))
            {
                println!("{t},{m}");
            }
        }
    }
    Ok(())
}

fn exit_code(e: &FedError) -> u8 {
    match e {
        FedError::Numeric(_) => 3,
        FedError::Param(_)
        | FedError::Config(_)
        | FedError::Format { .. }
        | FedError::Io { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
