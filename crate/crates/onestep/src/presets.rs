//! Named experiment configurations reproducing the published tables, and
//! the qualitative checks each one is expected to pass.

use std::fmt;
use std::str::FromStr;

use onestep_core::model::ModelSpec;
use onestep_core::solver::SolveConfig;

use crate::cluster::Transport;
use crate::experiment::{EstimatorKind, ExperimentConfig, ExperimentReport, SizePoint};

use EstimatorKind::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Logistic regression, d = 20, N = 2¹⁷.
    Table1,
    /// Logistic regression, d = 100, N = 2¹⁷.
    Table2,
    /// Beta, N = 2¹³, k up to 256.
    Table3,
    /// Beta with machine failures, N = 409600, r = 0.05.
    Table4,
    /// Gaussian, N = 4³..4⁹ with k = √N.
    Table5,
    /// Table 3 at N / 16 and K = 20.
    Desk,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Table1,
        Preset::Table2,
        Preset::Table3,
        Preset::Table4,
        Preset::Table5,
        Preset::Desk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table1 => "table1",
            Preset::Table2 => "table2",
            Preset::Table3 => "table3",
            Preset::Table4 => "table4",
            Preset::Table5 => "table5",
            Preset::Desk => "desk",
        }
    }

    pub fn config(self, seed: u64) -> ExperimentConfig {
        let powers = |lo: u32, hi: u32| (lo..=hi).map(|p| 1usize << p).collect::<Vec<_>>();
        let base = |model, sizes, estimators: Vec<EstimatorKind>| ExperimentConfig {
            name: self.name().into(),
            model,
            sizes,
            repeats: 50,
            estimators,
            failure_rate: 0.0,
            per_round_failures: false,
            resample_ratio: 0.1,
            seed,
            transport: Transport::InProcess,
            solve: SolveConfig::default(),
        };
        let one = |n, ks| vec![SizePoint { n, ks }];
        match self {
            Preset::Table1 => base(
                ModelSpec::Logistic { dim: 20 },
                one(1 << 17, powers(1, 7)),
                vec![SimpleAvg, OneStep, Centralized],
            ),
            Preset::Table2 => base(
                ModelSpec::Logistic { dim: 100 },
                one(1 << 17, powers(1, 7)),
                vec![SimpleAvg, OneStep, Centralized],
            ),
            Preset::Table3 => base(
                ModelSpec::Beta,
                one(1 << 13, powers(1, 8)),
                vec![SimpleAvg, ResampledAvg, OneStep, Centralized],
            ),
            Preset::Table4 => ExperimentConfig {
                failure_rate: 0.05,
                ..base(
                    ModelSpec::Beta,
                    one(409_600, powers(3, 9)),
                    vec![SimpleAvg, OneStep, Centralized, CentralizedPartial],
                )
            },
            Preset::Table5 => base(
                ModelSpec::Gaussian,
                (3..=9)
                    .map(|p| SizePoint {
                        n: 1 << (2 * p),
                        ks: vec![1 << p],
                    })
                    .collect(),
                vec![SimpleAvg, ResampledAvg, OneStep, Centralized],
            ),
            Preset::Desk => ExperimentConfig {
                repeats: 20,
                ..base(
                    ModelSpec::Beta,
                    one((1 << 13) / 16, powers(1, 5)),
                    vec![SimpleAvg, ResampledAvg, OneStep, Centralized],
                )
            },
        }
    }

    /// The patterns this preset's report is expected to show.
    pub fn checks(self, report: &ExperimentReport) -> Vec<Check> {
        let n = |p: Preset| p.config(0).sizes[0].n;
        match self {
            Preset::Table1 | Preset::Table2 => {
                let n = n(self);
                (1..=5)
                    .map(|p| close_to(report, OneStep, Centralized, n, 1 << p, 0.15))
                    .collect()
            }
            Preset::Table3 => {
                let n = n(self);
                let mut out: Vec<Check> = (1..=6)
                    .map(|p| at_most(report, OneStep, Centralized, n, 1 << p, 1.15))
                    .collect();
                out.push(at_least(report, SimpleAvg, OneStep, n, 256, 10.0));
                for k in [64, 128, 256] {
                    out.push(between(report, n, k));
                }
                out.push(nondecreasing(report, SimpleAvg, n, &[16, 32, 64, 128, 256], 0.05));
                out
            }
            Preset::Table4 => vec![
                close_to(report, OneStep, CentralizedPartial, n(self), 512, 0.25),
                failure_rate(report, 0.05, 0.01),
            ],
            Preset::Table5 => {
                let mut out: Vec<Check> = (5..=9)
                    .map(|p| close_to(report, OneStep, Centralized, 1 << (2 * p), 1 << p, 0.10))
                    .collect();
                out.push(at_least(report, SimpleAvg, OneStep, 1 << 14, 1 << 7, 1.8));
                out.push(close_to(report, OneStep, Centralized, 1 << 18, 1 << 9, 0.05));
                out
            }
            Preset::Desk => Vec::new(),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown preset `{s}`"))
    }
}

/// The outcome of one expected pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn ratio(
    report: &ExperimentReport,
    num: EstimatorKind,
    den: EstimatorKind,
    n: usize,
    k: usize,
) -> Result<f64, String> {
    let a = report.mse(num, n, k).ok_or(format!("no {num} value at N={n}, k={k}"))?;
    let b = report.mse(den, n, k).ok_or(format!("no {den} value at N={n}, k={k}"))?;
    Ok(a / b)
}

fn check(name: String, value: Result<f64, String>, pass: impl Fn(f64) -> bool) -> Check {
    match value {
        Ok(v) => Check {
            name,
            passed: pass(v),
            detail: format!("ratio {v:.4}"),
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
        },
    }
}

/// `mse(a) / mse(b) ≤ bound`.
pub fn at_most(r: &ExperimentReport, a: EstimatorKind, b: EstimatorKind, n: usize, k: usize, bound: f64) -> Check {
    check(format!("{a}/{b} <= {bound} at N={n}, k={k}"), ratio(r, a, b, n, k), |v| v <= bound)
}

/// `mse(a) / mse(b) ≥ bound`.
pub fn at_least(r: &ExperimentReport, a: EstimatorKind, b: EstimatorKind, n: usize, k: usize, bound: f64) -> Check {
    check(format!("{a}/{b} >= {bound} at N={n}, k={k}"), ratio(r, a, b, n, k), |v| v >= bound)
}

/// `|mse(a) / mse(b) − 1| ≤ tol`.
pub fn close_to(r: &ExperimentReport, a: EstimatorKind, b: EstimatorKind, n: usize, k: usize, tol: f64) -> Check {
    check(
        format!("{a} within {}% of {b} at N={n}, k={k}", tol * 100.0),
        ratio(r, a, b, n, k),
        |v| (v - 1.0).abs() <= tol,
    )
}

/// Resampled averaging lies between one-step and simple averaging.
pub fn between(r: &ExperimentReport, n: usize, k: usize) -> Check {
    let name = format!("one_step <= resampled_avg <= simple_avg at N={n}, k={k}");
    let vals = [OneStep, ResampledAvg, SimpleAvg].map(|e| r.mse(e, n, k));
    match vals {
        [Some(lo), Some(mid), Some(hi)] => Check {
            name,
            passed: lo <= mid && mid <= hi,
            detail: format!("{lo:.4e} / {mid:.4e} / {hi:.4e}"),
        },
        _ => Check {
            name,
            passed: false,
            detail: "missing values".into(),
        },
    }
}

/// MSE nondecreasing along `ks`, allowing one inversion of at most `slack`
/// (relative).
pub fn nondecreasing(r: &ExperimentReport, e: EstimatorKind, n: usize, ks: &[usize], slack: f64) -> Check {
    let name = format!("{e} nondecreasing in k over {ks:?} at N={n}");
    let vals: Option<Vec<f64>> = ks.iter().map(|&k| r.mse(e, n, k)).collect();
    let Some(vals) = vals else {
        return Check {
            name,
            passed: false,
            detail: "missing values".into(),
        };
    };
    let inversions: Vec<f64> = vals
        .windows(2)
        .filter(|w| w[1] < w[0])
        .map(|w| (w[0] - w[1]) / w[0])
        .collect();
    Check {
        name,
        passed: inversions.len() <= 1 && inversions.iter().all(|&d| d <= slack),
        detail: format!("{} inversion(s)", inversions.len()),
    }
}

/// Empirical machine failure rate within `tol` of `rate`.
pub fn failure_rate(r: &ExperimentReport, rate: f64, tol: f64) -> Check {
    let v = r.delivery.machine_failure_rate();
    Check {
        name: format!("machine failure rate within {tol} of {rate}"),
        passed: (v - rate).abs() <= tol,
        detail: format!(
            "{} of {} machines dropped ({v:.4})",
            r.delivery.round1_drops, r.delivery.round1_slots
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_named() {
        for p in Preset::ALL {
            p.config(1).validate().unwrap();
            assert_eq!(p.name().parse::<Preset>(), Ok(p));
        }
    }

    #[test]
    fn table5_uses_square_root_machine_counts() {
        for point in Preset::Table5.config(0).sizes {
            assert_eq!(point.ks[0] * point.ks[0], point.n);
        }
    }
}
