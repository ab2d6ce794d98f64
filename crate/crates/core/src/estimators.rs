//! Aggregation of local summaries into global estimates.
//!
//! All reductions walk the machine reports in ascending machine id with
//! compensated summation, so results do not depend on the order in which
//! reports arrived. Each machine report carries an optional payload: `None`
//! means the machine's contribution was not delivered (`a_i = 0`).

use alloc::vec::Vec;

use thiserror::Error;

use crate::linalg::{
    inverse_symmetric, newton_direction, CompensatedAccumulator, Definiteness, LinalgError, Matrix,
    Vector,
};
use crate::model::{Criterion, ModelError, Sample};
use crate::MachineId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("all machines failed to deliver")]
    AllMachinesFailed,
    #[error("duplicate machine id {0}")]
    DuplicateMachine(MachineId),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite summary from machine {0}")]
    NonFinite(MachineId),
    #[error("resampling ratio must lie in (0, 1), got {0}")]
    InvalidRatio(f64),
    #[error(transparent)]
    NotDefinite(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One machine's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineReport<T> {
    pub machine_id: MachineId,
    pub payload: Option<T>,
}

impl<T> MachineReport<T> {
    pub fn delivered(machine_id: MachineId, payload: T) -> Self {
        Self {
            machine_id,
            payload: Some(payload),
        }
    }

    pub fn failed(machine_id: MachineId) -> Self {
        Self {
            machine_id,
            payload: None,
        }
    }
}

/// Local gradient and Hessian `(Ṁ_i(θ), M̈_i(θ))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradHess {
    pub gradient: Vector,
    pub hessian: Matrix,
}

/// Anything that can be checked for dimension and finiteness.
pub trait Summary {
    fn summary_dim(&self) -> usize;
    fn is_consistent(&self) -> bool;
}

impl Summary for Vector {
    fn summary_dim(&self) -> usize {
        self.dim()
    }
    fn is_consistent(&self) -> bool {
        self.is_finite()
    }
}

impl Summary for GradHess {
    fn summary_dim(&self) -> usize {
        self.gradient.dim()
    }
    fn is_consistent(&self) -> bool {
        self.gradient.is_finite()
            && self.hessian.is_finite()
            && self.hessian.dim() == self.gradient.dim()
    }
}

/// Machine reports sorted by id, ids unique, delivered payloads finite and
/// of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationInput<T> {
    reports: Vec<MachineReport<T>>,
}

impl<T: Summary> AggregationInput<T> {
    pub fn new(mut reports: Vec<MachineReport<T>>) -> Result<Self, EstimatorError> {
        reports.sort_by_key(|r| r.machine_id);
        for w in reports.windows(2) {
            if w[0].machine_id == w[1].machine_id {
                return Err(EstimatorError::DuplicateMachine(w[0].machine_id));
            }
        }
        let mut dim = None;
        for r in &reports {
            if let Some(p) = &r.payload {
                if !p.is_consistent() {
                    return Err(EstimatorError::NonFinite(r.machine_id));
                }
                match dim {
                    None => dim = Some(p.summary_dim()),
                    Some(d) if d != p.summary_dim() => {
                        return Err(EstimatorError::DimensionMismatch {
                            expected: d,
                            found: p.summary_dim(),
                        })
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { reports })
    }

    /// Everything delivered.
    pub fn all_delivered(payloads: Vec<T>) -> Result<Self, EstimatorError> {
        Self::new(
            payloads
                .into_iter()
                .enumerate()
                .map(|(i, p)| MachineReport::delivered(MachineId(i as u32 + 1), p))
                .collect(),
        )
    }

    pub fn reports(&self) -> &[MachineReport<T>] {
        &self.reports
    }

    /// Delivery indicators `a_i` in machine order.
    pub fn mask(&self) -> Vec<bool> {
        self.reports.iter().map(|r| r.payload.is_some()).collect()
    }

    /// Delivered payloads in machine order.
    pub fn delivered(&self) -> Vec<&T> {
        self.reports.iter().filter_map(|r| r.payload.as_ref()).collect()
    }
}

/// `(1/k) Σ θ_i` over the given estimates, in order.
pub fn average(estimates: &[&Vector]) -> Result<Vector, EstimatorError> {
    let first = estimates.first().ok_or(EstimatorError::AllMachinesFailed)?;
    let mut acc = CompensatedAccumulator::new(first.dim());
    for e in estimates {
        acc.add(e);
    }
    Ok(Vector::new(acc.mean(estimates.len())))
}

/// Simple averaging estimator `Σ a_i θ_i / Σ a_i`.
pub fn simple_average(input: &AggregationInput<Vector>) -> Result<Vector, EstimatorError> {
    average(&input.delivered())
}

/// Bias-corrected combination `(θ⁽⁰⁾ − s θ⁽⁰⁾₁) / (1 − s)` of the full and
/// subsampled averages.
pub fn resampled_average(
    theta0: &[f64],
    theta0_sub: &[f64],
    s: f64,
) -> Result<Vector, EstimatorError> {
    if !(s > 0.0 && s < 1.0) {
        return Err(EstimatorError::InvalidRatio(s));
    }
    if theta0.len() != theta0_sub.len() {
        return Err(EstimatorError::DimensionMismatch {
            expected: theta0.len(),
            found: theta0_sub.len(),
        });
    }
    Ok(Vector::new(
        theta0
            .iter()
            .zip(theta0_sub)
            .map(|(a, b)| (a - s * b) / (1.0 - s))
            .collect(),
    ))
}

/// Averages of the gradients and Hessians, in order.
pub fn average_grad_hess(parts: &[&GradHess]) -> Result<GradHess, EstimatorError> {
    let first = parts.first().ok_or(EstimatorError::AllMachinesFailed)?;
    let d = first.gradient.dim();
    let mut g = CompensatedAccumulator::new(d);
    let mut h = CompensatedAccumulator::new(d * d);
    for p in parts {
        g.add(&p.gradient);
        h.add(p.hessian.as_slice());
    }
    let mut hessian = Matrix::from_row_major(d, h.mean(parts.len()))?;
    hessian.symmetrize_from_upper();
    Ok(GradHess {
        gradient: Vector::new(g.mean(parts.len())),
        hessian,
    })
}

/// `start − H⁻¹ g` for an aggregated gradient and Hessian.
pub fn newton_update(start: &[f64], aggregate: &GradHess) -> Result<Vector, EstimatorError> {
    if start.len() != aggregate.gradient.dim() {
        return Err(EstimatorError::DimensionMismatch {
            expected: aggregate.gradient.dim(),
            found: start.len(),
        });
    }
    let d = newton_direction(&aggregate.hessian, &aggregate.gradient)?;
    Ok(Vector::new(start.to_vec()).add_scaled(1.0, &d))
}

/// One-step estimator `θ − [Σ a_i M̈_i]⁻¹ [Σ a_i Ṁ_i]` from local
/// gradients and Hessians evaluated at `start`.
///
/// `start` may be any finite point; it need not be the simple average.
pub fn one_step_update(
    start: &[f64],
    input: &AggregationInput<GradHess>,
) -> Result<Vector, EstimatorError> {
    if start.iter().any(|v| !v.is_finite()) {
        return Err(EstimatorError::NonFinite(MachineId::COORDINATOR));
    }
    let aggregate = average_grad_hess(&input.delivered())?;
    newton_update(start, &aggregate)
}

/// Plug-in sandwich covariance `H⁻¹ S H⁻¹` with `H` the mean Hessian and
/// `S` the mean score outer product.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichCovariance {
    pub sigma: Matrix,
    pub score_outer: Matrix,
    pub bread: Matrix,
}

pub fn sandwich_covariance<C: Criterion + ?Sized>(
    model: &C,
    samples: &[Sample],
    theta: &[f64],
) -> Result<SandwichCovariance, EstimatorError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyShard.into());
    }
    model.check_theta(theta)?;
    let d = model.dim();
    let mut outer = CompensatedAccumulator::new(d * d);
    let mut hess = CompensatedAccumulator::new(d * d);
    let mut buf = alloc::vec![0.0; d * d];
    for s in samples {
        let e = model.evaluate(s, theta)?;
        for i in 0..d {
            for j in 0..d {
                buf[i * d + j] = e.gradient[i] * e.gradient[j];
            }
        }
        outer.add(&buf);
        hess.add(e.hessian.as_slice());
    }
    let score_outer = Matrix::from_row_major(d, outer.mean(samples.len()))?;
    let mut bread = Matrix::from_row_major(d, hess.mean(samples.len()))?;
    bread.symmetrize_from_upper();
    let inv = inverse_symmetric(&bread, Definiteness::Negative)?;
    let mut sigma = inv.mul(&score_outer).mul(&inv);
    sigma.symmetrize_from_upper();
    Ok(SandwichCovariance {
        sigma,
        score_outer,
        bread,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianMean;
    use alloc::vec;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec())
    }

    #[test]
    fn midpoint_and_constant_averages() {
        let input = AggregationInput::all_delivered(vec![v(&[1.0, 1.0]), v(&[3.0, 3.0])]).unwrap();
        assert_eq!(simple_average(&input).unwrap().as_slice(), &[2.0, 2.0]);
        let same = v(&[0.1, -7.3, 1e-9]);
        let input = AggregationInput::all_delivered(vec![same.clone(); 7]).unwrap();
        assert_eq!(simple_average(&input).unwrap(), same);
    }

    #[test]
    fn failure_mask_excludes_machines() {
        let input = AggregationInput::new(vec![
            MachineReport::delivered(MachineId(1), v(&[1.0])),
            MachineReport::failed(MachineId(2)),
            MachineReport::delivered(MachineId(3), v(&[5.0])),
        ])
        .unwrap();
        assert_eq!(input.mask(), vec![true, false, true]);
        assert_eq!(simple_average(&input).unwrap().as_slice(), &[3.0]);
        let none: AggregationInput<Vector> =
            AggregationInput::new(vec![MachineReport::failed(MachineId(1))]).unwrap();
        assert_eq!(simple_average(&none), Err(EstimatorError::AllMachinesFailed));
    }

    #[test]
    fn input_validation() {
        let dup = AggregationInput::new(vec![
            MachineReport::delivered(MachineId(1), v(&[1.0])),
            MachineReport::delivered(MachineId(1), v(&[2.0])),
        ]);
        assert_eq!(dup, Err(EstimatorError::DuplicateMachine(MachineId(1))));
        let nan = AggregationInput::new(vec![MachineReport::delivered(MachineId(4), v(&[f64::NAN]))]);
        assert_eq!(nan, Err(EstimatorError::NonFinite(MachineId(4))));
        let dims = AggregationInput::new(vec![
            MachineReport::delivered(MachineId(1), v(&[1.0])),
            MachineReport::delivered(MachineId(2), v(&[1.0, 2.0])),
        ]);
        assert!(matches!(dims, Err(EstimatorError::DimensionMismatch { .. })));
    }

    #[test]
    fn resampled_average_cases() {
        let t = [0.4, -2.0];
        assert_eq!(resampled_average(&t, &t, 0.37).unwrap().as_slice(), &t);
        let r = resampled_average(&[1.0], &[1.1], 0.1).unwrap();
        assert!((r[0] - 0.988_888_888_888_888_9).abs() < 1e-15);
        let r = resampled_average(&[1.0], &[1.1], 1e-9).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-8);
        assert!(resampled_average(&t, &t, 0.0).is_err());
        assert!(resampled_average(&t, &t, 1.0).is_err());
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let gh = GradHess {
            gradient: Vector::zeros(2),
            hessian: Matrix::from_rows(&[&[-2.0, 0.3], &[0.3, -1.0]]).unwrap(),
        };
        let input = AggregationInput::all_delivered(vec![gh.clone(), gh]).unwrap();
        let start = [0.75, -3.25];
        assert_eq!(one_step_update(&start, &input).unwrap().as_slice(), &start);
    }

    #[test]
    fn one_step_requires_a_delivery() {
        let input: AggregationInput<GradHess> =
            AggregationInput::new(vec![MachineReport::failed(MachineId(1))]).unwrap();
        assert_eq!(one_step_update(&[0.0], &input), Err(EstimatorError::AllMachinesFailed));
    }

    #[test]
    fn sandwich_for_mean_only_gaussian() {
        let xs = [0.3, -1.1, 2.4, 0.9, 1.7];
        let samples: Vec<Sample> = xs.iter().map(|&x| Sample::scalar(x)).collect();
        let theta = 0.5;
        let sw = sandwich_covariance(&GaussianMean { variance: 1.0 }, &samples, &[theta]).unwrap();
        let direct = xs.iter().map(|x| (x - theta) * (x - theta)).sum::<f64>() / xs.len() as f64;
        assert!((sw.sigma[(0, 0)] - direct).abs() < 1e-14);
        assert_eq!(sw.bread[(0, 0)], -1.0);
    }

    #[test]
    fn sandwich_degenerate_expectation() {
        let samples = vec![Sample::scalar(1.5); 9];
        let sw = sandwich_covariance(&GaussianMean { variance: 2.0 }, &samples, &[0.5]).unwrap();
        // ṁ = (x − μ)/σ² = 0.5
        assert_eq!(sw.score_outer[(0, 0)], 0.25);
    }
}
