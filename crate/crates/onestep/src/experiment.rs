//! Repeated experiments: squared errors against the true parameter,
//! summarized over repeats into MSE tables.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use onestep_core::estimators::resampled_average;
use onestep_core::linalg::Vector;
use onestep_core::model::{Criterion, ModelSpec, Sample};
use onestep_core::solver::{m_estimate, SolveConfig};
use onestep_core::wire::{ResampleRequest, Round};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{
    effective_ratio, run_protocol, ClusterError, FailurePolicy, ProtocolConfig, Transport,
};
use crate::data::{generate, shard_split, DataError, GeneratorSpec};
use crate::rng;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot summarize an empty set of values")]
    EmptyInput,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    SimpleAvg,
    ResampledAvg,
    OneStep,
    Centralized,
    CentralizedPartial,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::SimpleAvg,
        EstimatorKind::ResampledAvg,
        EstimatorKind::OneStep,
        EstimatorKind::Centralized,
        EstimatorKind::CentralizedPartial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::SimpleAvg => "simple_avg",
            EstimatorKind::ResampledAvg => "resampled_avg",
            EstimatorKind::OneStep => "one_step",
            EstimatorKind::Centralized => "centralized",
            EstimatorKind::CentralizedPartial => "centralized_partial",
        }
    }

    /// Whether the estimate depends on the number of machines.
    pub fn is_distributed(self) -> bool {
        matches!(
            self,
            EstimatorKind::SimpleAvg | EstimatorKind::ResampledAvg | EstimatorKind::OneStep
        )
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown estimator `{s}`"))
    }
}

/// A total sample size and the machine counts to try at it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    pub n: usize,
    pub ks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec,
    pub sizes: Vec<SizePoint>,
    pub repeats: usize,
    pub estimators: Vec<EstimatorKind>,
    pub failure_rate: f64,
    pub per_round_failures: bool,
    pub resample_ratio: f64,
    pub seed: u64,
    pub transport: Transport,
    pub solve: SolveConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        if self.repeats == 0 {
            return bad("repeats must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.failure_rate) {
            return bad(format!("failure rate must lie in [0, 1), got {}", self.failure_rate));
        }
        if !(self.resample_ratio > 0.0 && self.resample_ratio < 1.0) {
            return bad(format!("resample ratio must lie in (0, 1), got {}", self.resample_ratio));
        }
        if self.sizes.is_empty() {
            return bad("no sample sizes".into());
        }
        for p in &self.sizes {
            if p.n == 0 {
                return bad("sample size must be >= 1".into());
            }
            for &k in &p.ks {
                if k == 0 || p.n % k != 0 {
                    return bad(format!("k = {k} does not divide N = {}", p.n));
                }
            }
        }
        self.solve
            .validate()
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))
    }

    fn distributed(&self) -> Vec<EstimatorKind> {
        self.estimators.iter().copied().filter(|e| e.is_distributed()).collect()
    }

    fn pooled(&self) -> Vec<EstimatorKind> {
        self.estimators.iter().copied().filter(|e| !e.is_distributed()).collect()
    }
}

/// Counts of (machine, round) reply slots and how many were lost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryStats {
    pub round1_slots: u64,
    pub round1_drops: u64,
    pub round2_slots: u64,
    pub round2_drops: u64,
    /// Failure replies produced by workers (solver or domain errors), not
    /// by the failure policy.
    pub worker_failures: u64,
}

impl DeliveryStats {
    fn merge(&mut self, o: &DeliveryStats) {
        self.round1_slots += o.round1_slots;
        self.round1_drops += o.round1_drops;
        self.round2_slots += o.round2_slots;
        self.round2_drops += o.round2_drops;
        self.worker_failures += o.worker_failures;
    }

    /// Fraction of machines whose round-1 reply was dropped.
    pub fn machine_failure_rate(&self) -> f64 {
        if self.round1_slots == 0 {
            0.0
        } else {
            self.round1_drops as f64 / self.round1_slots as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    /// Only one value, so `std` is reported as 0.
    pub degenerate: bool,
}

/// Mean and sample standard deviation (denominator `K − 1`).
pub fn summarize(values: &[f64]) -> Result<Summary, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok(Summary {
            mean,
            std: 0.0,
            degenerate: true,
        });
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok(Summary {
        mean,
        std: (ss / (n - 1.0)).sqrt(),
        degenerate: false,
    })
}

/// One table cell: an estimator at one `(N, k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub estimator: EstimatorKind,
    /// `None` for the pooled estimators.
    pub k: Option<usize>,
    pub n: usize,
    pub d: usize,
    pub repeats: usize,
    pub r: f64,
    pub s: f64,
    /// `None` when every repeat was excluded.
    pub mse_mean: Option<f64>,
    pub mse_std: Option<f64>,
    pub std_degenerate: bool,
    pub failures_excluded: usize,
    pub seed: u64,
    /// Mean wall time per repeat, in milliseconds.
    pub wall_ms: f64,
}

/// The configuration as recorded in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub name: String,
    pub model: String,
    pub sizes: Vec<SizePoint>,
    pub repeats: usize,
    pub estimators: Vec<EstimatorKind>,
    pub failure_rate: f64,
    pub per_round_failures: bool,
    pub resample_ratio: f64,
    pub seed: u64,
    pub transport: String,
    pub std_convention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ConfigEcho,
    pub rows: Vec<ReportRow>,
    pub delivery: DeliveryStats,
}

impl ExperimentReport {
    pub fn row(&self, estimator: EstimatorKind, n: usize, k: Option<usize>) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.n == n && r.k == k)
    }

    /// Mean MSE of a cell; the pooled estimators ignore `k`.
    pub fn mse(&self, estimator: EstimatorKind, n: usize, k: usize) -> Option<f64> {
        let k = estimator.is_distributed().then_some(k);
        self.row(estimator, n, k).and_then(|r| r.mse_mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Cell {
    estimator: EstimatorKind,
    n: usize,
    k: Option<usize>,
}

#[derive(Debug, Default)]
struct RepeatResult {
    cells: Vec<(Cell, Option<f64>, f64)>,
    delivery: DeliveryStats,
}

fn squared_error(estimate: &[f64], truth: &[f64]) -> f64 {
    estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn fit(model: &ModelSpec, samples: &[Sample], solve: &SolveConfig) -> Option<Vector> {
    let init = model.initial_estimate(samples);
    match m_estimate(model, samples, &init, solve) {
        Ok(r) => {
            if !r.converged {
                log::warn!("pooled solve stopped after {} iterations", r.iterations);
            }
            Some(r.theta_hat)
        }
        Err(e) => {
            log::warn!("pooled solve failed: {e}");
            None
        }
    }
}

fn run_repeat(cfg: &ExperimentConfig, rep: usize) -> Result<RepeatResult, ExperimentError> {
    let mut out = RepeatResult::default();
    let rep = rep as u64;
    let distributed = cfg.distributed();
    let wants_resample = distributed.contains(&EstimatorKind::ResampledAvg);
    for point in &cfg.sizes {
        let n_total = point.n as u64;
        let spec = GeneratorSpec::new(cfg.model, point.n, rng::derive_seed(cfg.seed, "data", &[rep, n_total]));
        let (truth, samples) = generate(&spec)?;

        for est in cfg.pooled() {
            let start = Instant::now();
            let estimate = match est {
                EstimatorKind::Centralized => fit(&cfg.model, &samples, &cfg.solve),
                _ => {
                    let keep = ((1.0 - cfg.failure_rate) * point.n as f64).floor() as usize;
                    let mut r = rng::stream(cfg.seed, "partial", &[rep, n_total]);
                    let mut idx = index::sample(&mut r, point.n, keep.max(1)).into_vec();
                    idx.sort_unstable();
                    let part: Vec<Sample> = idx.iter().map(|&i| samples[i].clone()).collect();
                    fit(&cfg.model, &part, &cfg.solve)
                }
            };
            let cell = Cell {
                estimator: est,
                n: point.n,
                k: None,
            };
            let err = estimate.map(|e| squared_error(&e, &truth));
            out.cells.push((cell, err, start.elapsed().as_secs_f64() * 1e3));
        }

        if distributed.is_empty() {
            continue;
        }
        for &k in &point.ks {
            let start = Instant::now();
            let path = [rep, n_total, k as u64];
            let shards = shard_split(&samples, k, rng::derive_seed(cfg.seed, "shard", &path[..2]))?;
            let policy = FailurePolicy {
                rate: cfg.failure_rate,
                per_round_independent: cfg.per_round_failures,
                seed: rng::derive_seed(cfg.seed, "failure", &path),
            };
            let schedule = policy.schedule(k);
            let protocol = ProtocolConfig {
                model: cfg.model,
                resample: wants_resample.then(|| ResampleRequest {
                    ratio: cfg.resample_ratio,
                    seed: rng::derive_seed(cfg.seed, "resample", &path),
                }),
            };
            let outcome = run_protocol(&protocol, shards, &cfg.solve, &schedule, cfg.transport)?;
            let elapsed = start.elapsed().as_secs_f64() * 1e3;

            out.delivery.merge(&DeliveryStats {
                round1_slots: k as u64,
                round1_drops: schedule.mask(Round::One).iter().filter(|d| !**d).count() as u64,
                round2_slots: k as u64,
                round2_drops: schedule.mask(Round::Two).iter().filter(|d| !**d).count() as u64,
                worker_failures: outcome.worker_failures as u64,
            });

            for &est in &distributed {
                let estimate = match est {
                    EstimatorKind::SimpleAvg => outcome.theta0.as_ref().ok().cloned(),
                    EstimatorKind::OneStep => outcome.theta1.as_ref().ok().cloned(),
                    _ => {
                        let s = effective_ratio(cfg.resample_ratio, point.n / k);
                        match (&outcome.theta0, &outcome.theta0_sub, s) {
                            (Ok(t0), Some(sub), Some(s)) => resampled_average(t0, sub, s).ok(),
                            _ => None,
                        }
                    }
                };
                if estimate.is_none() {
                    log::debug!("repeat {rep}, N = {}, k = {k}: no {est} estimate", point.n);
                }
                let cell = Cell {
                    estimator: est,
                    n: point.n,
                    k: Some(k),
                };
                out.cells.push((cell, estimate.map(|e| squared_error(&e, &truth)), elapsed));
            }
        }
    }
    Ok(out)
}

fn row_order(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for p in &cfg.sizes {
        for &k in &p.ks {
            for est in cfg.distributed() {
                cells.push(Cell {
                    estimator: est,
                    n: p.n,
                    k: Some(k),
                });
            }
        }
        for est in cfg.pooled() {
            cells.push(Cell {
                estimator: est,
                n: p.n,
                k: None,
            });
        }
    }
    cells
}

fn echo(cfg: &ExperimentConfig) -> ConfigEcho {
    ConfigEcho {
        name: cfg.name.clone(),
        model: cfg.model.to_string(),
        sizes: cfg.sizes.clone(),
        repeats: cfg.repeats,
        estimators: cfg.estimators.clone(),
        failure_rate: cfg.failure_rate,
        per_round_failures: cfg.per_round_failures,
        resample_ratio: cfg.resample_ratio,
        seed: cfg.seed,
        transport: match cfg.transport {
            Transport::InProcess => "inproc".into(),
            Transport::Tcp { .. } => "tcp".into(),
        },
        std_convention: "sample standard deviation, denominator K-1".into(),
    }
}

/// Runs every repeat (in parallel) and summarizes each cell over repeats.
///
/// Each repeat draws a fresh true parameter and data set per sample size.
/// Repeats where an estimator produced nothing (every machine failed, or a
/// solve failed) are excluded from that cell and counted.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    let results: Vec<RepeatResult> = (0..cfg.repeats)
        .into_par_iter()
        .map(|rep| run_repeat(cfg, rep))
        .collect::<Result<_, _>>()?;

    let mut delivery = DeliveryStats::default();
    for r in &results {
        delivery.merge(&r.delivery);
    }
    let d = cfg.model.dim();
    let rows = row_order(cfg)
        .into_iter()
        .map(|cell| {
            let mut values = Vec::with_capacity(cfg.repeats);
            let mut wall = 0.0;
            for r in &results {
                for (c, v, ms) in &r.cells {
                    if *c == cell {
                        values.extend(v);
                        wall += ms;
                    }
                }
            }
            let summary = summarize(&values).ok();
            ReportRow {
                estimator: cell.estimator,
                k: cell.k,
                n: cell.n,
                d,
                repeats: cfg.repeats,
                r: cfg.failure_rate,
                s: cfg.resample_ratio,
                mse_mean: summary.map(|s| s.mean),
                mse_std: summary.map(|s| s.std),
                std_degenerate: summary.is_some_and(|s| s.degenerate),
                failures_excluded: cfg.repeats - values.len(),
                seed: cfg.seed,
                wall_ms: wall / cfg.repeats as f64,
            }
        })
        .collect();
    Ok(ExperimentReport {
        config: echo(cfg),
        rows,
        delivery,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!("unknown report format `{s}`")),
        }
    }
}

/// Column order of the CSV report.
pub const CSV_COLUMNS: [&str; 12] = [
    "estimator",
    "k",
    "N",
    "d",
    "K",
    "r",
    "s",
    "mse_mean",
    "mse_std",
    "failures_excluded",
    "seed",
    "wall_ms",
];

fn opt<T: fmt::Debug>(v: Option<T>) -> String {
    v.map(|v| format!("{v:?}")).unwrap_or_default()
}

fn io_error(path: &Path, e: impl fmt::Display) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Serializes a report to CSV text (full-precision floats).
pub fn report_csv(report: &ExperimentReport) -> Result<String, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| ExperimentError::Io {
        path: "<memory>".into(),
        message: e.to_string(),
    };
    w.write_record(CSV_COLUMNS).map_err(err)?;
    for r in &report.rows {
        w.write_record([
            r.estimator.name().to_string(),
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            r.n.to_string(),
            r.d.to_string(),
            r.repeats.to_string(),
            format!("{:?}", r.r),
            format!("{:?}", r.s),
            opt(r.mse_mean),
            opt(r.mse_std),
            r.failures_excluded.to_string(),
            r.seed.to_string(),
            format!("{:?}", r.wall_ms),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| ExperimentError::Io {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

pub fn report_json(report: &ExperimentReport) -> String {
    serde_json::to_string_pretty(report).expect("reports serialize")
}

pub fn write_report(
    report: &ExperimentReport,
    path: &Path,
    format: ReportFormat,
) -> Result<(), ExperimentError> {
    let text = match format {
        ReportFormat::Csv => report_csv(report)?,
        ReportFormat::Json => report_json(report) + "\n",
    };
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Reads the rows of a CSV report. The `std_degenerate` flag is not part
/// of the CSV layout and is recomputed from `K`.
pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>, ExperimentError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| io_error(path, e))?;
    let headers = reader.headers().map_err(|e| io_error(path, e))?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(io_error(path, "unexpected header"));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| io_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |col: &str| io_error(path, format!("line {line}: bad `{col}`"));
        let num = |i: usize| -> Result<f64, ExperimentError> { rec[i].parse().map_err(|_| bad(CSV_COLUMNS[i])) };
        let int = |i: usize| -> Result<usize, ExperimentError> { rec[i].parse().map_err(|_| bad(CSV_COLUMNS[i])) };
        let maybe = |i: usize| -> Result<Option<f64>, ExperimentError> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let repeats = int(4)?;
        rows.push(ReportRow {
            estimator: rec[0].parse().map_err(|_| bad("estimator"))?,
            k: if rec[1].is_empty() { None } else { Some(int(1)?) },
            n: int(2)?,
            d: int(3)?,
            repeats,
            r: num(5)?,
            s: num(6)?,
            mse_mean: maybe(7)?,
            mse_std: maybe(8)?,
            std_degenerate: repeats == 1,
            failures_excluded: int(9)?,
            seed: rec[10].parse().map_err(|_| bad("seed"))?,
            wall_ms: num(11)?,
        });
    }
    Ok(rows)
}
