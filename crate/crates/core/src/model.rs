//! Criterion functions `m(x; θ)` with analytic gradients and Hessians.
//!
//! A [`Criterion`] evaluates one sample at a time; [`shard_criterion`] gives
//! the sample mean of value, gradient and Hessian over a whole shard, which
//! is what the local solver and the one-step update consume. Means are
//! accumulated with compensated summation in sample order so that the
//! result is reproducible bit-for-bit and insensitive to sample order up to
//! rounding of the final division.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use thiserror::Error;

use crate::linalg::{CompensatedAccumulator, CompensatedSum, Matrix, Vector};
use crate::special::{digamma, ln_gamma, trigamma};
use crate::MachineId;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Above this linear predictor, `ln(1 + e^z)` is `z` to double precision.
const SOFTPLUS_CUTOFF: f64 = 36.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("shard is empty")]
    EmptyShard,
    #[error("sample {index}: {source}")]
    AtSample {
        index: usize,
        #[source]
        source: Box<ModelError>,
    },
}

impl ModelError {
    pub fn domain(msg: impl Into<String>) -> Self {
        ModelError::Domain(msg.into())
    }

    /// Attributes the error to sample `index` of a shard.
    pub fn at(self, index: usize) -> Self {
        ModelError::AtSample {
            index,
            source: Box::new(self),
        }
    }
}

/// One observation: covariates `x` and an optional response `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Option<f64>,
}

impl Sample {
    pub fn scalar(x: f64) -> Self {
        Self {
            x: alloc::vec![x],
            y: None,
        }
    }

    pub fn labeled(x: Vec<f64>, y: f64) -> Self {
        Self { x, y: Some(y) }
    }
}

/// The samples held by one machine.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub machine_id: MachineId,
    pub samples: Vec<Sample>,
}

impl Shard {
    pub fn new(machine_id: MachineId, samples: Vec<Sample>) -> Result<Self, ModelError> {
        if samples.is_empty() {
            return Err(ModelError::EmptyShard);
        }
        Ok(Self {
            machine_id,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Value, gradient and Hessian of a criterion at one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vector,
    pub hessian: Matrix,
}

/// Running compensated means of value, gradient and the Hessian's upper
/// triangle.
#[derive(Debug, Clone)]
pub struct MeanAccumulator {
    dim: usize,
    count: usize,
    value: CompensatedSum,
    gradient: CompensatedAccumulator,
    upper: CompensatedAccumulator,
}

impl MeanAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            value: CompensatedSum::new(),
            gradient: CompensatedAccumulator::new(dim),
            upper: CompensatedAccumulator::new(dim * (dim + 1) / 2),
        }
    }

    pub fn add(&mut self, eval: &Evaluation) {
        self.value.add(eval.value);
        self.gradient.add(&eval.gradient);
        let d = self.dim;
        let mut upper = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            upper.extend_from_slice(&eval.hessian.row(i)[i..]);
        }
        self.upper.add(&upper);
        self.count += 1;
    }

    fn add_parts(&mut self, value: f64, gradient: &[f64], upper: &[f64]) {
        self.value.add(value);
        self.gradient.add(gradient);
        self.upper.add(upper);
        self.count += 1;
    }

    pub fn finish(self) -> Result<Evaluation, ModelError> {
        if self.count == 0 {
            return Err(ModelError::EmptyShard);
        }
        let n = self.count as f64;
        let d = self.dim;
        let upper = self.upper.mean(self.count);
        let mut hessian = Matrix::zeros(d);
        let mut idx = 0;
        for i in 0..d {
            for j in i..d {
                hessian[(i, j)] = upper[idx];
                idx += 1;
            }
        }
        hessian.symmetrize_from_upper();
        Ok(Evaluation {
            value: self.value.value() / n,
            gradient: Vector::new(self.gradient.mean(self.count)),
            hessian,
        })
    }
}

/// A per-sample criterion `m(x; θ)` to be maximized.
pub trait Criterion {
    /// Parameter dimension `d`.
    fn dim(&self) -> usize;

    /// Checks that `theta` lies in the parameter domain.
    fn check_theta(&self, theta: &[f64]) -> Result<(), ModelError>;

    /// Checks that a sample is admissible for this model.
    fn check_sample(&self, sample: &Sample) -> Result<(), ModelError>;

    /// Value, gradient and Hessian at a single sample.
    fn evaluate(&self, sample: &Sample, theta: &[f64]) -> Result<Evaluation, ModelError>;

    /// Mean of [`Criterion::evaluate`] over `samples`.
    fn evaluate_mean(&self, samples: &[Sample], theta: &[f64]) -> Result<Evaluation, ModelError> {
        generic_mean(self, samples, theta)
    }

    /// Whether the solver should work in `ln θ` coordinates (all
    /// coordinates strictly positive).
    fn log_parameterized(&self) -> bool {
        false
    }

    /// A cheap starting point inside the domain, computed from local data.
    fn initial_estimate(&self, samples: &[Sample]) -> Vector;
}

fn check_dim(theta: &[f64], d: usize) -> Result<(), ModelError> {
    if theta.len() != d {
        return Err(ModelError::DimensionMismatch {
            expected: d,
            found: theta.len(),
        });
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteInput);
    }
    Ok(())
}

/// Sample mean over `samples` through per-sample evaluation.
pub fn generic_mean<C: Criterion + ?Sized>(
    model: &C,
    samples: &[Sample],
    theta: &[f64],
) -> Result<Evaluation, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyShard);
    }
    model.check_theta(theta)?;
    let mut acc = MeanAccumulator::new(model.dim());
    for (i, s) in samples.iter().enumerate() {
        let e = model.evaluate(s, theta).map_err(|e| e.at(i))?;
        acc.add(&e);
    }
    acc.finish()
}

/// Mean value, gradient and Hessian of `model` over a shard's samples.
pub fn shard_criterion<C: Criterion + ?Sized>(
    model: &C,
    samples: &[Sample],
    theta: &[f64],
) -> Result<Evaluation, ModelError> {
    model.evaluate_mean(samples, theta)
}

/// Logistic regression log-likelihood `y xᵗθ − ln(1 + exp(xᵗθ))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Logistic {
    pub dim: usize,
}

/// `(ln(1 + e^z), p, 1 - p)` without overflow or cancellation.
fn logistic_parts(z: f64) -> (f64, f64, f64) {
    let softplus = if z > SOFTPLUS_CUTOFF {
        z
    } else if z < -SOFTPLUS_CUTOFF {
        libm::exp(z)
    } else {
        libm::log1p(libm::exp(z))
    };
    let (p, q) = if z >= 0.0 {
        let e = libm::exp(-z);
        (1.0 / (1.0 + e), e / (1.0 + e))
    } else {
        let e = libm::exp(z);
        (e / (1.0 + e), 1.0 / (1.0 + e))
    };
    (softplus, p, q)
}

impl Logistic {
    /// Per-sample kernel shared by the single-sample and mean paths: value,
    /// gradient, and the Hessian's upper triangle.
    fn kernel(&self, sample: &Sample, theta: &[f64], grad: &mut [f64], upper: &mut [f64]) -> f64 {
        let x = &sample.x;
        let y = sample.y.unwrap_or(0.0);
        let z: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
        let (softplus, p, q) = logistic_parts(z);
        let resid = if y == 1.0 { q } else { -p };
        let w = p * q;
        for (g, xj) in grad.iter_mut().zip(x) {
            *g = resid * xj;
        }
        let mut idx = 0;
        for i in 0..self.dim {
            for j in i..self.dim {
                upper[idx] = -w * (x[i] * x[j]);
                idx += 1;
            }
        }
        y * z - softplus
    }
}

impl Criterion for Logistic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), ModelError> {
        check_dim(theta, self.dim)
    }

    fn check_sample(&self, sample: &Sample) -> Result<(), ModelError> {
        check_dim(&sample.x, self.dim)?;
        match sample.y {
            Some(y) if y == 0.0 || y == 1.0 => Ok(()),
            Some(y) if !y.is_finite() => Err(ModelError::NonFiniteInput),
            _ => Err(ModelError::domain("logistic response must be 0 or 1")),
        }
    }

    fn evaluate(&self, sample: &Sample, theta: &[f64]) -> Result<Evaluation, ModelError> {
        self.check_theta(theta)?;
        self.check_sample(sample)?;
        let d = self.dim;
        let mut grad = alloc::vec![0.0; d];
        let mut upper = alloc::vec![0.0; d * (d + 1) / 2];
        let value = self.kernel(sample, theta, &mut grad, &mut upper);
        let mut acc = MeanAccumulator::new(d);
        acc.add_parts(value, &grad, &upper);
        acc.finish()
    }

    fn evaluate_mean(&self, samples: &[Sample], theta: &[f64]) -> Result<Evaluation, ModelError> {
        if samples.is_empty() {
            return Err(ModelError::EmptyShard);
        }
        self.check_theta(theta)?;
        let d = self.dim;
        let mut grad = alloc::vec![0.0; d];
        let mut upper = alloc::vec![0.0; d * (d + 1) / 2];
        let mut acc = MeanAccumulator::new(d);
        for (i, s) in samples.iter().enumerate() {
            self.check_sample(s).map_err(|e| e.at(i))?;
            let value = self.kernel(s, theta, &mut grad, &mut upper);
            acc.add_parts(value, &grad, &upper);
        }
        acc.finish()
    }

    fn initial_estimate(&self, _samples: &[Sample]) -> Vector {
        Vector::zeros(self.dim)
    }
}

/// Beta(α, β) log-density, θ = (α, β).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BetaModel;

/// θ-only terms of the Beta log-likelihood.
struct BetaTerms {
    alpha: f64,
    beta: f64,
    log_norm: f64,
    grad_shift: [f64; 2],
    hessian: Matrix,
}

impl BetaTerms {
    fn new(theta: &[f64]) -> Self {
        let (a, b) = (theta[0], theta[1]);
        let psi_ab = digamma(a + b);
        let tri_ab = trigamma(a + b);
        let mut hessian = Matrix::zeros(2);
        hessian[(0, 0)] = tri_ab - trigamma(a);
        hessian[(0, 1)] = tri_ab;
        hessian[(1, 0)] = tri_ab;
        hessian[(1, 1)] = tri_ab - trigamma(b);
        Self {
            alpha: a,
            beta: b,
            log_norm: ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b),
            grad_shift: [psi_ab - digamma(a), psi_ab - digamma(b)],
            hessian,
        }
    }

    fn evaluation(&self, log_x: f64, log_1mx: f64) -> Evaluation {
        Evaluation {
            value: self.log_norm + (self.alpha - 1.0) * log_x + (self.beta - 1.0) * log_1mx,
            gradient: Vector::new(alloc::vec![
                log_x + self.grad_shift[0],
                log_1mx + self.grad_shift[1]
            ]),
            hessian: self.hessian.clone(),
        }
    }
}

impl Criterion for BetaModel {
    fn dim(&self) -> usize {
        2
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), ModelError> {
        check_dim(theta, 2)?;
        if theta[0] <= 0.0 || theta[1] <= 0.0 {
            return Err(ModelError::domain("Beta parameters must be positive"));
        }
        Ok(())
    }

    fn check_sample(&self, sample: &Sample) -> Result<(), ModelError> {
        check_dim(&sample.x, 1)?;
        let x = sample.x[0];
        if !(x > 0.0 && x < 1.0) {
            return Err(ModelError::domain("Beta sample must lie in (0, 1)"));
        }
        Ok(())
    }

    fn evaluate(&self, sample: &Sample, theta: &[f64]) -> Result<Evaluation, ModelError> {
        self.check_theta(theta)?;
        self.check_sample(sample)?;
        let x = sample.x[0];
        Ok(BetaTerms::new(theta).evaluation(libm::log(x), libm::log1p(-x)))
    }

    /// The log-likelihood is linear in `(ln x, ln(1 - x))`, so the shard mean
    /// only needs the compensated means of those two statistics.
    fn evaluate_mean(&self, samples: &[Sample], theta: &[f64]) -> Result<Evaluation, ModelError> {
        if samples.is_empty() {
            return Err(ModelError::EmptyShard);
        }
        self.check_theta(theta)?;
        let mut log_x = CompensatedSum::new();
        let mut log_1mx = CompensatedSum::new();
        for (i, s) in samples.iter().enumerate() {
            self.check_sample(s).map_err(|e| e.at(i))?;
            log_x.add(libm::log(s.x[0]));
            log_1mx.add(libm::log1p(-s.x[0]));
        }
        let n = samples.len() as f64;
        Ok(BetaTerms::new(theta).evaluation(log_x.value() / n, log_1mx.value() / n))
    }

    fn log_parameterized(&self) -> bool {
        true
    }

    /// Method of moments, clamped into `[0.01, 100]²`.
    fn initial_estimate(&self, samples: &[Sample]) -> Vector {
        let n = samples.len();
        if n == 0 {
            return Vector::new(alloc::vec![1.0, 1.0]);
        }
        let mean = samples.iter().map(|s| s.x[0]).sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples
                .iter()
                .map(|s| (s.x[0] - mean) * (s.x[0] - mean))
                .sum::<f64>()
                / (n - 1) as f64
        } else {
            0.0
        };
        let common = if var > 0.0 {
            mean * (1.0 - mean) / var - 1.0
        } else {
            f64::INFINITY
        };
        let clamp = |v: f64| if v.is_nan() { 1.0 } else { v.clamp(0.01, 100.0) };
        Vector::new(alloc::vec![
            clamp(mean * common),
            clamp((1.0 - mean) * common)
        ])
    }
}

/// Gaussian log-likelihood in `(μ, σ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Gaussian;

impl Criterion for Gaussian {
    fn dim(&self) -> usize {
        2
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), ModelError> {
        check_dim(theta, 2)?;
        if theta[1] <= 0.0 {
            return Err(ModelError::domain("variance must be positive"));
        }
        Ok(())
    }

    fn check_sample(&self, sample: &Sample) -> Result<(), ModelError> {
        check_dim(&sample.x, 1)
    }

    fn evaluate(&self, sample: &Sample, theta: &[f64]) -> Result<Evaluation, ModelError> {
        self.check_theta(theta)?;
        self.check_sample(sample)?;
        let r = sample.x[0] - theta[0];
        let s = theta[1];
        let r2 = r * r;
        let hessian = Matrix::from_row_major(
            2,
            alloc::vec![
                -1.0 / s,
                -r / (s * s),
                -r / (s * s),
                0.5 / (s * s) - r2 / (s * s * s)
            ],
        )
        .expect("2x2");
        Ok(Evaluation {
            value: -r2 / (2.0 * s) - HALF_LN_2PI - 0.5 * libm::log(s),
            gradient: Vector::new(alloc::vec![r / s, r2 / (2.0 * s * s) - 0.5 / s]),
            hessian,
        })
    }

    /// Mean and variance (divisor `m`) of the first `m = min(32, n)`
    /// samples, variance floored at `1e-6`.
    ///
    /// The criterion is concave in σ² only below twice the sample variance,
    /// and with two samples the unbiased variance sits exactly on that
    /// inflection point, so the biased form is used.
    fn initial_estimate(&self, samples: &[Sample]) -> Vector {
        let head = &samples[..samples.len().min(32)];
        let m = head.len();
        if m == 0 {
            return Vector::new(alloc::vec![0.0, 1.0]);
        }
        let mean = head.iter().map(|s| s.x[0]).sum::<f64>() / m as f64;
        let var = head
            .iter()
            .map(|s| (s.x[0] - mean) * (s.x[0] - mean))
            .sum::<f64>()
            / m as f64;
        Vector::new(alloc::vec![mean, var.max(1e-6)])
    }
}

/// Gaussian log-likelihood in `μ` alone, with the variance held fixed.
/// The criterion is exactly quadratic in `μ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMean {
    pub variance: f64,
}

impl Criterion for GaussianMean {
    fn dim(&self) -> usize {
        1
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), ModelError> {
        check_dim(theta, 1)
    }

    fn check_sample(&self, sample: &Sample) -> Result<(), ModelError> {
        check_dim(&sample.x, 1)
    }

    fn evaluate(&self, sample: &Sample, theta: &[f64]) -> Result<Evaluation, ModelError> {
        self.check_theta(theta)?;
        self.check_sample(sample)?;
        let s = self.variance;
        let r = sample.x[0] - theta[0];
        Ok(Evaluation {
            value: -r * r / (2.0 * s) - HALF_LN_2PI - 0.5 * libm::log(s),
            gradient: Vector::new(alloc::vec![r / s]),
            hessian: Matrix::diagonal(&[-1.0 / s]),
        })
    }

    fn initial_estimate(&self, samples: &[Sample]) -> Vector {
        let head = &samples[..samples.len().min(32)];
        if head.is_empty() {
            return Vector::zeros(1);
        }
        Vector::new(alloc::vec![
            head.iter().map(|s| s.x[0]).sum::<f64>() / head.len() as f64
        ])
    }
}

/// `c · m(x; θ)` for a positive constant `c`. Maximizers are unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaled<C> {
    pub inner: C,
    pub factor: f64,
}

impl<C: Criterion> Criterion for Scaled<C> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), ModelError> {
        self.inner.check_theta(theta)
    }

    fn check_sample(&self, sample: &Sample) -> Result<(), ModelError> {
        self.inner.check_sample(sample)
    }

    fn evaluate(&self, sample: &Sample, theta: &[f64]) -> Result<Evaluation, ModelError> {
        let e = self.inner.evaluate(sample, theta)?;
        Ok(Evaluation {
            value: self.factor * e.value,
            gradient: e.gradient.scaled(self.factor),
            hessian: e.hessian.scaled(self.factor),
        })
    }

    fn evaluate_mean(&self, samples: &[Sample], theta: &[f64]) -> Result<Evaluation, ModelError> {
        let e = self.inner.evaluate_mean(samples, theta)?;
        Ok(Evaluation {
            value: self.factor * e.value,
            gradient: e.gradient.scaled(self.factor),
            hessian: e.hessian.scaled(self.factor),
        })
    }

    fn log_parameterized(&self) -> bool {
        self.inner.log_parameterized()
    }

    fn initial_estimate(&self, samples: &[Sample]) -> Vector {
        self.inner.initial_estimate(samples)
    }
}

/// The built-in models, selectable by name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelSpec {
    Logistic { dim: usize },
    Beta,
    Gaussian,
    GaussianMean { variance: f64 },
}

impl ModelSpec {
    fn with<R>(&self, f: impl FnOnce(&dyn Criterion) -> R) -> R {
        match *self {
            ModelSpec::Logistic { dim } => f(&Logistic { dim }),
            ModelSpec::Beta => f(&BetaModel),
            ModelSpec::Gaussian => f(&Gaussian),
            ModelSpec::GaussianMean { variance } => f(&GaussianMean { variance }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Logistic { .. } => "logistic",
            ModelSpec::Beta => "beta",
            ModelSpec::Gaussian => "gaussian",
            ModelSpec::GaussianMean { .. } => "gaussian-mean",
        }
    }

    /// Whether samples carry a response column.
    pub fn has_response(&self) -> bool {
        matches!(self, ModelSpec::Logistic { .. })
    }

    /// Number of covariate columns per sample.
    pub fn covariates(&self) -> usize {
        match *self {
            ModelSpec::Logistic { dim } => dim,
            _ => 1,
        }
    }
}

impl Criterion for ModelSpec {
    fn dim(&self) -> usize {
        self.with(|m| m.dim())
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), ModelError> {
        self.with(|m| m.check_theta(theta))
    }

    fn check_sample(&self, sample: &Sample) -> Result<(), ModelError> {
        self.with(|m| m.check_sample(sample))
    }

    fn evaluate(&self, sample: &Sample, theta: &[f64]) -> Result<Evaluation, ModelError> {
        self.with(|m| m.evaluate(sample, theta))
    }

    fn evaluate_mean(&self, samples: &[Sample], theta: &[f64]) -> Result<Evaluation, ModelError> {
        self.with(|m| m.evaluate_mean(samples, theta))
    }

    fn log_parameterized(&self) -> bool {
        self.with(|m| m.log_parameterized())
    }

    fn initial_estimate(&self, samples: &[Sample]) -> Vector {
        self.with(|m| m.initial_estimate(samples))
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::Logistic { dim } => write!(f, "logistic:{dim}"),
            ModelSpec::Beta => f.write_str("beta"),
            ModelSpec::Gaussian => f.write_str("gaussian"),
            ModelSpec::GaussianMean { variance } => write!(f, "gaussian-mean:{variance:e}"),
        }
    }
}

impl FromStr for ModelSpec {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || ModelError::domain(alloc::format!("unknown model `{s}`"));
        match (name, arg) {
            ("logistic", Some(a)) => {
                let dim: usize = a.parse().map_err(|_| bad())?;
                if dim == 0 {
                    return Err(ModelError::domain("logistic dimension must be >= 1"));
                }
                Ok(ModelSpec::Logistic { dim })
            }
            ("beta", None) => Ok(ModelSpec::Beta),
            ("gaussian", None) => Ok(ModelSpec::Gaussian),
            ("gaussian-mean", Some(a)) => {
                let variance: f64 = a.parse().map_err(|_| bad())?;
                if !(variance > 0.0) || !variance.is_finite() {
                    return Err(ModelError::domain("variance must be positive"));
                }
                Ok(ModelSpec::GaussianMean { variance })
            }
            _ => Err(bad()),
        }
    }
}

impl From<ModelSpec> for String {
    fn from(m: ModelSpec) -> String {
        m.to_string()
    }
}
