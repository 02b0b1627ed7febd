//! Grid expansion and the resumable sweep driver.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;

use super::{report_milestones, train_centralized, Algorithm, ExperimentConfig, Milestone};
use crate::dataset::Dataset;
use crate::engine::{save_round_csv, FederatedTrainer};
use crate::error::{FedError, Result};
use crate::metrics::{non_identicalness, relative_accuracy};

/// Summary columns before the per-threshold milestone columns.
pub const SWEEP_HEADER: [&str; 17] = [
    "point_id",
    "replicate",
    "alpha",
    "emd",
    "report_goal",
    "local_epochs",
    "eta_eff",
    "beta",
    "client_lr",
    "algorithm",
    "method",
    "status",
    "best_accuracy",
    "final_accuracy",
    "central_accuracy",
    "relative_accuracy",
    "batch_budget",
];

/// One cell of the sweep grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    /// Position in grid order; the summary is sorted by it.
    pub index: usize,
    /// Pinned to 0 when the partition is not Dirichlet.
    pub alpha: f64,
    pub report_goal: usize,
    pub local_epochs: f64,
    pub eta_eff: f64,
    pub beta: f64,
    pub algorithm: Algorithm,
    pub replicate: u64,
}

impl GridPoint {
    /// Stable identifier built from the point's parameters, used for resuming
    /// and for naming its per-round file.
    pub fn point_id(&self) -> String {
        format!(
            "a{}_k{}_e{}_lr{}_b{}_{}_r{}",
            self.alpha,
            self.report_goal,
            self.local_epochs,
            self.eta_eff,
            self.beta,
            self.algorithm,
            self.replicate
        )
    }
}

impl ExperimentConfig {
    /// Cartesian product of the axes, alpha outermost and replicate innermost.
    pub fn grid(&self) -> Vec<GridPoint> {
        let s = &self.sweep;
        let alphas = if self.partition.uses_alpha() {
            s.alphas.clone()
        } else {
            vec![0.0]
        };
        let mut points = Vec::new();
        for &alpha in &alphas {
            for &report_goal in &s.report_goals {
                for &local_epochs in &s.local_epochs {
                    for &eta_eff in &s.eta_effs {
                        for &beta in &s.betas {
                            for &algorithm in &s.algorithms {
                                for &replicate in &s.replicates {
                                    points.push(GridPoint {
                                        index: points.len(),
                                        alpha,
                                        report_goal,
                                        local_epochs,
                                        eta_eff,
                                        beta,
                                        algorithm,
                                        replicate,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        points
    }

    pub fn summary_path(&self) -> PathBuf {
        self.out_dir.join("summary.csv")
    }

    pub fn rounds_dir(&self) -> PathBuf {
        self.out_dir.join("rounds")
    }
}

/// Result of one grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub point: GridPoint,
    pub emd: Option<f64>,
    pub client_lr: f64,
    pub method: String,
    /// `ok`, or `error: <message>`.
    pub status: String,
    pub best_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub central_accuracy: Option<f64>,
    pub relative_accuracy: Option<f64>,
    pub batch_budget: Option<usize>,
    pub milestones: Vec<Milestone>,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn fields(&self, num_thresholds: usize) -> Vec<String> {
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:?}"));
        let p = &self.point;
        let mut out = vec![
            p.point_id(),
            p.replicate.to_string(),
            format!("{:?}", p.alpha),
            f(self.emd),
            p.report_goal.to_string(),
            format!("{:?}", p.local_epochs),
            format!("{:?}", p.eta_eff),
            format!("{:?}", p.beta),
            format!("{:?}", self.client_lr),
            p.algorithm.to_string(),
            self.method.clone(),
            self.status.clone(),
            f(self.best_accuracy),
            f(self.final_accuracy),
            f(self.central_accuracy),
            f(self.relative_accuracy),
            self.batch_budget
                .map_or_else(String::new, |b| b.to_string()),
        ];
        for k in 0..num_thresholds {
            out.push(
                self.milestones
                    .get(k)
                    .map_or_else(String::new, |m| m.to_string()),
            );
        }
        out
    }
}

/// What a sweep invocation did.
#[derive(Clone, Debug)]
pub struct SweepOutcome {
    /// Rows computed by this invocation, in grid order.
    pub rows: Vec<SweepRow>,
    /// Grid points skipped because the summary already held them.
    pub skipped: usize,
    pub summary_path: PathBuf,
}

fn header(thresholds: &[f64]) -> Vec<String> {
    let mut h: Vec<String> = SWEEP_HEADER.iter().map(|s| s.to_string()).collect();
    h.extend(thresholds.iter().map(|t| format!("rounds_to_{t}")));
    h
}

fn csv_line(fields: &[String]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(fields)
        .map_err(|e| FedError::Config(e.to_string()))?;
    w.into_inner().map_err(|e| FedError::Config(e.to_string()))
}

/// Existing summary rows keyed by point id, after checking the header.
fn read_summary(path: &Path, expected: &[String]) -> Result<Vec<csv::StringRecord>> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| FedError::format(path, 1, e.to_string()))?;
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| FedError::format(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != expected {
        return Err(FedError::format(
            path,
            1,
            "summary header does not match this config; use a fresh out_dir",
        ));
    }
    reader
        .records()
        .map(|r| {
            r.map_err(|e| {
                FedError::format(path, e.position().map_or(0, |p| p.line()), e.to_string())
            })
        })
        .collect()
}

struct Replicate {
    train: Dataset,
    test: Dataset,
    central: std::result::Result<f64, String>,
}

fn run_point(cfg: &ExperimentConfig, point: &GridPoint, rep: &Replicate) -> SweepRow {
    let client_lr =
        crate::metrics::base_learning_rate(point.eta_eff, point.beta).unwrap_or(f64::NAN);
    let mut row = SweepRow {
        point: *point,
        emd: None,
        client_lr,
        method: String::new(),
        status: String::new(),
        best_accuracy: None,
        final_accuracy: None,
        central_accuracy: rep.central.as_ref().ok().copied(),
        relative_accuracy: None,
        batch_budget: None,
        milestones: Vec::new(),
    };
    let result = (|| -> Result<()> {
        let central = rep.central.clone().map_err(FedError::numeric)?;
        let fed = cfg.fed_config_for(point)?;
        row.method = fed.algorithm_name();
        let partition = cfg.build_partition(&rep.train, point.replicate, point.alpha)?;
        row.emd = Some(non_identicalness(&partition, &rep.train)?.weighted_average);
        let model = cfg.model_for(point.replicate);
        let run = FederatedTrainer::new(
            &rep.train,
            &partition,
            &rep.test,
            &model,
            fed,
            cfg.target_distribution()?,
        )?
        .run()?;
        save_round_csv(
            &run.records,
            cfg.rounds_dir().join(format!("{}.csv", point.point_id())),
            cfg.record_timing,
        )?;
        row.best_accuracy = run.best_accuracy();
        row.final_accuracy = run.final_accuracy();
        row.relative_accuracy = row
            .best_accuracy
            .map(|b| relative_accuracy(b, central))
            .transpose()?;
        row.batch_budget = run.records.last().map(|r| r.batch_budget);
        row.milestones = report_milestones(&run.records, central, &cfg.milestones);
        Ok(())
    })();
    row.status = match result {
        Ok(()) => "ok".into(),
        Err(e) => format!("error: {}", e.to_string().replace(['\n', '\r'], " ")),
    };
    row
}

/// Runs every grid point not already in `out_dir/summary.csv`.
///
/// Points run concurrently. Each finished row is appended to the summary
/// under a lock, and the file is re-sorted into grid order at the end, so a
/// completed sweep is byte-identical however it was scheduled or resumed.
/// Failed points are recorded with an `error:` status and the sweep goes on.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    fs::create_dir_all(cfg.rounds_dir()).map_err(|e| FedError::io(cfg.rounds_dir(), e))?;
    let summary = cfg.summary_path();
    let head = header(&cfg.milestones);
    let grid = cfg.grid();

    let existing = if summary.exists() {
        read_summary(&summary, &head)?
    } else {
        fs::write(&summary, csv_line(&head)?).map_err(|e| FedError::io(&summary, e))?;
        Vec::new()
    };
    let done: HashSet<String> = existing.iter().map(|r| r[0].to_string()).collect();
    let todo: Vec<GridPoint> = grid
        .iter()
        .filter(|p| !done.contains(&p.point_id()))
        .copied()
        .collect();
    let skipped = grid.len() - todo.len();

    let needed: Vec<u64> = {
        let mut r: Vec<u64> = todo.iter().map(|p| p.replicate).collect();
        r.sort_unstable();
        r.dedup();
        r
    };
    let replicates: BTreeMap<u64, Replicate> = needed
        .par_iter()
        .map(|&r| -> Result<(u64, Replicate)> {
            let (train, test) = cfg.build_datasets(r)?;
            let central = train_centralized(
                &train,
                &cfg.model_for(r),
                cfg.central.lr,
                cfg.central.steps,
                cfg.central.batch_size,
                cfg.replicate_seeds(r).central,
                &test,
            )
            .map(|(_, acc)| acc)
            .map_err(|e| format!("central baseline failed: {e}"));
            Ok((
                r,
                Replicate {
                    train,
                    test,
                    central,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let file = Mutex::new(
        OpenOptions::new()
            .append(true)
            .open(&summary)
            .map_err(|e| FedError::io(&summary, e))?,
    );
    let mut rows: Vec<SweepRow> = todo
        .par_iter()
        .map(|p| -> Result<SweepRow> {
            let row = run_point(cfg, p, &replicates[&p.replicate]);
            let line = csv_line(&row.fields(cfg.milestones.len()))?;
            let mut f = file.lock().expect("summary lock poisoned");
            f.write_all(&line)
                .and_then(|_| f.flush())
                .map_err(|e| FedError::io(&summary, e))?;
            Ok(row)
        })
        .collect::<Result<_>>()?;
    drop(file);
    rows.sort_by_key(|r| r.point.index);

    // Final sort: grid order, then any rows from an older grid by id.
    let order: BTreeMap<String, usize> = grid.iter().map(|p| (p.point_id(), p.index)).collect();
    let mut all = read_summary(&summary, &head)?;
    all.sort_by(|a, b| {
        let ka = (
            order.get(&a[0]).copied().unwrap_or(usize::MAX),
            a[0].to_string(),
        );
        let kb = (
            order.get(&b[0]).copied().unwrap_or(usize::MAX),
            b[0].to_string(),
        );
        ka.cmp(&kb)
    });
    all.dedup_by(|a, b| a[0] == b[0]);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&head)
        .map_err(|e| FedError::Config(e.to_string()))?;
    for r in &all {
        w.write_record(r)
            .map_err(|e| FedError::Config(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| FedError::Config(e.to_string()))?;
    fs::write(&summary, bytes).map_err(|e| FedError::io(&summary, e))?;

    Ok(SweepOutcome {
        rows,
        skipped,
        summary_path: summary,
    })
}
