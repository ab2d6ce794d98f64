//! Safeguarded Newton ascent for local and pooled M-estimation.
//!
//! Each iteration solves `(-H) d = g` through the ridge ladder and backtracks
//! along `d` until the criterion increases. Models that declare
//! [`Criterion::log_parameterized`] are optimized in `η = ln θ`, so iterates
//! stay strictly positive; gradients and Hessians are mapped by the chain
//! rule, and convergence is always judged on the natural-scale gradient.

use alloc::boxed::Box;
use alloc::vec::Vec;

use thiserror::Error;

use crate::linalg::{newton_direction, LinalgError, Matrix, Vector};
use crate::model::{shard_criterion, Criterion, Evaluation, ModelError, Sample, Shard};

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    pub max_iters: usize,
    /// Convergence threshold on `‖∇M‖∞`.
    pub grad_tol: f64,
    /// Convergence threshold on the next Newton step, relative to
    /// `1 + ‖θ‖∞`. Guards against claiming convergence when the criterion
    /// flattens out at infinity (separable logistic data).
    pub step_tol: f64,
    pub step_shrink: f64,
    pub min_step: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            grad_tol: 1e-10,
            step_tol: 1e-6,
            step_shrink: 0.5,
            min_step: 1e-12,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        let ok = self.max_iters > 0
            && self.grad_tol > 0.0
            && self.grad_tol < 1.0
            && self.step_tol > 0.0
            && self.step_shrink > 0.0
            && self.step_shrink < 1.0
            && self.min_step > 0.0
            && self.min_step < 1.0;
        if ok {
            Ok(())
        } else {
            Err(SolveError::InvalidConfig)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub theta_hat: Vector,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub converged: bool,
    /// Criterion value at `theta_hat`.
    pub value: f64,
    /// Natural-scale Hessian at `theta_hat`.
    pub hessian_at_opt: Matrix,
    /// Criterion value after each accepted iteration, starting with the
    /// initial point.
    pub trajectory: Vec<f64>,
}

impl SolveResult {
    /// Turns an unconverged result into [`SolveError::NonConvergence`].
    pub fn require_converged(self) -> Result<Self, SolveError> {
        if self.converged {
            Ok(self)
        } else {
            Err(SolveError::NonConvergence {
                best: Box::new(self),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("invalid solver configuration")]
    InvalidConfig,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("Hessian not negative definite at the starting point: {0}")]
    NotDefinite(LinalgError),
    #[error("line search could not increase the criterion after {} iterations", best.iterations)]
    Diverged { best: Box<SolveResult> },
    #[error("no convergence within {} iterations", best.iterations)]
    NonConvergence { best: Box<SolveResult> },
}

impl SolveError {
    /// Best iterate carried by the error, if any.
    pub fn best(&self) -> Option<&SolveResult> {
        match self {
            SolveError::Diverged { best } | SolveError::NonConvergence { best } => Some(best),
            _ => None,
        }
    }
}

/// Working-space coordinates: identity, or `η = ln θ`.
#[derive(Clone, Copy)]
enum Coordinates {
    Natural,
    Log,
}

impl Coordinates {
    fn to_natural(self, w: &Vector) -> Vector {
        match self {
            Coordinates::Natural => w.clone(),
            Coordinates::Log => Vector::new(w.iter().map(|v| libm::exp(*v)).collect()),
        }
    }

    fn from_natural(self, theta: &[f64]) -> Vector {
        match self {
            Coordinates::Natural => Vector::new(theta.to_vec()),
            Coordinates::Log => Vector::new(theta.iter().map(|v| libm::log(*v)).collect()),
        }
    }

    /// Newton ascent direction in working coordinates.
    fn direction(self, theta: &[f64], eval: &Evaluation) -> Result<Vector, LinalgError> {
        match self {
            Coordinates::Natural => newton_direction(&eval.hessian, &eval.gradient),
            Coordinates::Log => {
                // ∇_η = θ ⊙ g,  H_η = diag(θ) H diag(θ) + diag(θ ⊙ g)
                let d = theta.len();
                let grad: Vec<f64> = theta.iter().zip(eval.gradient.iter()).map(|(t, g)| t * g).collect();
                let mut scoring = Matrix::zeros(d);
                for i in 0..d {
                    for j in 0..d {
                        scoring[(i, j)] = theta[i] * eval.hessian[(i, j)] * theta[j];
                    }
                }
                let mut full = scoring.clone();
                for i in 0..d {
                    full[(i, i)] += grad[i];
                }
                // Far from the optimum the gradient term can break concavity
                // in η; fall back to the scoring form, which stays definite.
                newton_direction(&full, &grad).or_else(|_| newton_direction(&scoring, &grad))
            }
        }
    }
}

struct Iterate {
    working: Vector,
    theta: Vector,
    eval: Evaluation,
}

impl Iterate {
    fn result(self, iterations: usize, converged: bool, trajectory: Vec<f64>) -> SolveResult {
        SolveResult {
            final_grad_norm: self.eval.gradient.norm_inf(),
            theta_hat: self.theta,
            iterations,
            converged,
            value: self.eval.value,
            hessian_at_opt: self.eval.hessian,
            trajectory,
        }
    }
}

fn values_tied(a: f64, b: f64) -> bool {
    libm::fabs(a - b) <= 4.0 * f64::EPSILON * (1.0 + libm::fabs(a))
}

/// Maximize the mean criterion over `samples` starting from `init`.
///
/// Returns the best iterate with `converged = false` when `max_iters` is
/// exhausted.
pub fn m_estimate<C: Criterion + ?Sized>(
    model: &C,
    samples: &[Sample],
    init: &[f64],
    config: &SolveConfig,
) -> Result<SolveResult, SolveError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(ModelError::EmptyShard.into());
    }
    model.check_theta(init)?;
    let coords = if model.log_parameterized() {
        Coordinates::Log
    } else {
        Coordinates::Natural
    };
    let working = coords.from_natural(init);
    let theta = coords.to_natural(&working);
    let eval = shard_criterion(model, samples, &theta)?;
    let mut current = Iterate {
        working,
        theta,
        eval,
    };
    let mut trajectory = alloc::vec![current.eval.value];
    let mut iterations = 0;

    loop {
        let grad_norm = current.eval.gradient.norm_inf();
        let direction = match coords.direction(&current.theta, &current.eval) {
            Ok(d) => d,
            Err(e) if iterations == 0 => return Err(SolveError::NotDefinite(e)),
            Err(_) => {
                return Err(SolveError::Diverged {
                    best: Box::new(current.result(iterations, false, trajectory)),
                })
            }
        };
        let step_scale = 1.0 + current.working.norm_inf();
        if grad_norm <= config.grad_tol && direction.norm_inf() <= config.step_tol * step_scale {
            return Ok(current.result(iterations, true, trajectory));
        }
        if iterations >= config.max_iters {
            return Ok(current.result(iterations, false, trajectory));
        }

        let mut t = 1.0;
        let mut accepted = None;
        while t >= config.min_step {
            let working = current.working.add_scaled(t, &direction);
            let theta = coords.to_natural(&working);
            if theta.is_finite() {
                if let Ok(eval) = shard_criterion(model, samples, &theta) {
                    let improves = eval.value > current.eval.value
                        || (values_tied(eval.value, current.eval.value)
                            && eval.gradient.norm_inf() < grad_norm);
                    if improves && eval.gradient.is_finite() && eval.hessian.is_finite() {
                        accepted = Some(Iterate {
                            working,
                            theta,
                            eval,
                        });
                        break;
                    }
                }
            }
            t *= config.step_shrink;
        }

        match accepted {
            Some(next) => {
                current = next;
                iterations += 1;
                trajectory.push(current.eval.value);
            }
            // No representable ascent left: at the optimum to working
            // precision, or stuck.
            None if grad_norm <= config.grad_tol => {
                return Ok(current.result(iterations, true, trajectory))
            }
            None => {
                return Err(SolveError::Diverged {
                    best: Box::new(current.result(iterations, false, trajectory)),
                })
            }
        }
    }
}

/// [`m_estimate`] on one shard, starting from the model's default
/// initializer.
pub fn local_estimate<C: Criterion + ?Sized>(
    model: &C,
    shard: &Shard,
    config: &SolveConfig,
) -> Result<SolveResult, SolveError> {
    let init = model.initial_estimate(&shard.samples);
    m_estimate(model, &shard.samples, &init, config)
}

/// The oracle M-estimator on all shards pooled (in the order given).
pub fn centralized_estimate<C: Criterion + ?Sized>(
    model: &C,
    shards: &[Shard],
    init: &[f64],
    config: &SolveConfig,
) -> Result<SolveResult, SolveError> {
    let pooled: Vec<Sample> = shards
        .iter()
        .flat_map(|s| s.samples.iter().cloned())
        .collect();
    m_estimate(model, &pooled, init, config)
}

/// One full Newton step `θ - H(θ)⁻¹ ∇M(θ)` on `samples`, with no line
/// search.
pub fn newton_step<C: Criterion + ?Sized>(
    model: &C,
    samples: &[Sample],
    start: &[f64],
) -> Result<Vector, SolveError> {
    let eval = shard_criterion(model, samples, start)?;
    let d = newton_direction(&eval.hessian, &eval.gradient).map_err(SolveError::NotDefinite)?;
    Ok(Vector::new(start.to_vec()).add_scaled(1.0, &d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BetaModel, Gaussian, GaussianMean, Logistic, Scaled};
    use alloc::vec;

    fn scalars(xs: &[f64]) -> Vec<Sample> {
        xs.iter().map(|&x| Sample::scalar(x)).collect()
    }

    #[test]
    fn gaussian_closed_form_mle() {
        let r = m_estimate(&Gaussian, &scalars(&[1.0, 2.0, 3.0]), &[0.0, 1.0], &SolveConfig::default())
            .unwrap();
        assert!(r.converged);
        assert!((r.theta_hat[0] - 2.0).abs() < 1e-8);
        assert!((r.theta_hat[1] - 2.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn quadratic_converges_in_one_iteration() {
        let model = GaussianMean { variance: 2.5 };
        let samples = scalars(&[0.3, -1.2, 4.4, 2.0]);
        for init in [-100.0, 0.0, 3.7, 1e4] {
            let r = m_estimate(&model, &samples, &[init], &SolveConfig::default()).unwrap();
            assert!(r.converged);
            assert_eq!(r.iterations, 1, "init {init}");
            assert!((r.theta_hat[0] - 1.375).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_logistic_never_reports_convergence() {
        let model = Logistic { dim: 1 };
        let samples: Vec<Sample> = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0]
            .iter()
            .map(|&x| Sample::labeled(vec![x], if x > 0.0 { 1.0 } else { 0.0 }))
            .collect();
        match m_estimate(&model, &samples, &[0.0], &SolveConfig::default()) {
            Ok(r) => {
                assert!(!r.converged);
                assert!(r.theta_hat.is_finite());
            }
            Err(SolveError::Diverged { best }) | Err(SolveError::NonConvergence { best }) => {
                assert!(best.theta_hat.is_finite())
            }
            Err(e) => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn pooled_gaussian_closed_form() {
        let shards: Vec<Shard> = (0..4)
            .map(|i| {
                Shard::new(
                    crate::MachineId(i + 1),
                    scalars(&[(2 * i + 1) as f64, (2 * i + 2) as f64]),
                )
                .unwrap()
            })
            .collect();
        let r = centralized_estimate(&Gaussian, &shards, &[0.0, 1.0], &SolveConfig::default()).unwrap();
        assert!((r.theta_hat[0] - 4.5).abs() < 1e-8);
        assert!((r.theta_hat[1] - 5.25).abs() < 1e-8);
    }

    #[test]
    fn centralized_with_one_shard_is_bit_identical() {
        let samples = scalars(&[0.2, 0.35, 0.5, 0.61, 0.8, 0.15]);
        let shard = Shard::new(crate::MachineId(1), samples.clone()).unwrap();
        let cfg = SolveConfig::default();
        let init = BetaModel.initial_estimate(&samples);
        let a = m_estimate(&BetaModel, &samples, &init, &cfg).unwrap();
        let b = centralized_estimate(&BetaModel, &[shard.clone()], &init, &cfg).unwrap();
        assert_eq!(a, b);
        let c = centralized_estimate(&BetaModel, &[shard.clone(), shard], &init, &cfg).unwrap();
        for j in 0..2 {
            assert!((a.theta_hat[j] - c.theta_hat[j]).abs() <= 1e-12 * a.theta_hat[j].abs());
        }
    }

    #[test]
    fn beta_mle_satisfies_score_equations() {
        let samples = scalars(&[0.12, 0.33, 0.41, 0.57, 0.62, 0.71, 0.88, 0.25]);
        let r = local_estimate(
            &BetaModel,
            &Shard::new(crate::MachineId(1), samples).unwrap(),
            &SolveConfig::default(),
        )
        .unwrap();
        assert!(r.converged);
        assert!(r.final_grad_norm <= 1e-10);
        assert!(r.theta_hat.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn trajectory_is_nondecreasing() {
        let samples = scalars(&[0.12, 0.33, 0.41, 0.57, 0.62, 0.71, 0.88, 0.25]);
        let r = m_estimate(&BetaModel, &samples, &[50.0, 0.05], &SolveConfig::default()).unwrap();
        for w in r.trajectory.windows(2) {
            assert!(w[1] >= w[0] - 4.0 * f64::EPSILON * (1.0 + w[0].abs()));
        }
    }

    #[test]
    fn rescaled_criterion_has_same_maximizer() {
        let samples = scalars(&[1.5, -0.2, 0.9, 2.4, 0.1]);
        let cfg = SolveConfig::default();
        let base = m_estimate(&Gaussian, &samples, &[0.0, 1.0], &cfg).unwrap();
        for c in [0.5, 3.0] {
            let scaled = Scaled { inner: Gaussian, factor: c };
            let r = m_estimate(&scaled, &samples, &[0.0, 1.0], &cfg).unwrap();
            for j in 0..2 {
                assert!((r.theta_hat[j] - base.theta_hat[j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn invalid_inputs() {
        let cfg = SolveConfig::default();
        assert!(matches!(
            m_estimate(&Gaussian, &[], &[0.0, 1.0], &cfg),
            Err(SolveError::Model(ModelError::EmptyShard))
        ));
        assert!(matches!(
            m_estimate(&Gaussian, &scalars(&[1.0]), &[0.0, -1.0], &cfg),
            Err(SolveError::Model(ModelError::Domain(_)))
        ));
        let bad = SolveConfig { step_shrink: 1.5, ..SolveConfig::default() };
        assert_eq!(
            m_estimate(&Gaussian, &scalars(&[1.0, 2.0]), &[0.0, 1.0], &bad),
            Err(SolveError::InvalidConfig)
        );
    }

    #[test]
    fn deterministic() {
        let samples = scalars(&[0.12, 0.33, 0.41, 0.57, 0.62]);
        let cfg = SolveConfig::default();
        let a = m_estimate(&BetaModel, &samples, &[1.0, 1.0], &cfg).unwrap();
        let b = m_estimate(&BetaModel, &samples, &[1.0, 1.0], &cfg).unwrap();
        assert_eq!(a, b);
    }
}
