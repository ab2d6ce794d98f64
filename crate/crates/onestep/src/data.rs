//! Synthetic data generation, random shard splitting and CSV persistence.

use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};

use onestep_core::linalg::Vector;
use onestep_core::model::{Criterion, ModelError, ModelSpec, Sample, Shard};
use onestep_core::MachineId;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use thiserror::Error;

use crate::rng;

/// Redraws allowed when a Beta draw rounds to exactly 0 or 1.
const BETA_MAX_REDRAWS: usize = 64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("cannot split {n} samples evenly across {k} machines")]
    IndivisibleSplit { n: usize, k: usize },
    #[error("Beta draw stayed on the boundary after {BETA_MAX_REDRAWS} redraws")]
    RedrawExhausted,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: line {line}: {source}")]
    Domain {
        path: PathBuf,
        line: u64,
        #[source]
        source: ModelError,
    },
}

/// What to simulate: the model, the sample count and the seed. The true
/// parameter is drawn from the model's prior unless forced.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub model: ModelSpec,
    pub n: usize,
    pub seed: u64,
    /// Fixed true parameter in place of a prior draw.
    pub forced_theta: Option<Vec<f64>>,
}

impl GeneratorSpec {
    pub fn new(model: ModelSpec, n: usize, seed: u64) -> Self {
        Self {
            model,
            n,
            seed,
            forced_theta: None,
        }
    }

    pub fn with_theta(mut self, theta: Vec<f64>) -> Self {
        self.forced_theta = Some(theta);
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n == 0 {
            return Err(DataError::InvalidSpec("sample count must be >= 1".into()));
        }
        if let ModelSpec::Logistic { dim: 0 } = self.model {
            return Err(DataError::InvalidSpec("logistic dimension must be >= 1".into()));
        }
        if let Some(theta) = &self.forced_theta {
            self.model
                .check_theta(theta)
                .map_err(|e| DataError::InvalidSpec(format!("forced parameter: {e}")))?;
        }
        Ok(())
    }
}

/// Draws the true parameter from the model's prior:
/// logistic θ_j ~ Unif(−1, 1); Beta α, β ~ Unif(1, 3);
/// Gaussian μ ~ Unif(−2, 2), σ² ~ Unif(0.25, 9); mean-only Gaussian
/// μ ~ Unif(−2, 2).
fn draw_parameter<R: Rng>(model: &ModelSpec, rng: &mut R) -> Vec<f64> {
    match *model {
        ModelSpec::Logistic { dim } => (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ModelSpec::Beta => vec![rng.random_range(1.0..3.0), rng.random_range(1.0..3.0)],
        ModelSpec::Gaussian => vec![rng.random_range(-2.0..2.0), rng.random_range(0.25..9.0)],
        ModelSpec::GaussianMean { .. } => vec![rng.random_range(-2.0..2.0)],
    }
}

fn logistic_sample<R: Rng>(theta: &[f64], rng: &mut R) -> Sample {
    let x: Vec<f64> = theta.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    let z: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
    let p = 1.0 / (1.0 + (-z).exp());
    let y = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
    Sample::labeled(x, y)
}

/// Draws the true parameter, then `n` i.i.d. samples.
pub fn generate(spec: &GeneratorSpec) -> Result<(Vector, Vec<Sample>), DataError> {
    spec.validate()?;
    let theta = match &spec.forced_theta {
        Some(t) => t.clone(),
        None => draw_parameter(&spec.model, &mut rng::stream(spec.seed, "parameter", &[])),
    };
    let mut r = rng::stream(spec.seed, "samples", &[]);
    let bad = |e: rand_distr::NormalError| DataError::InvalidSpec(e.to_string());
    let samples = match spec.model {
        ModelSpec::Logistic { .. } => (0..spec.n).map(|_| logistic_sample(&theta, &mut r)).collect(),
        ModelSpec::Beta => {
            let ga = Gamma::new(theta[0], 1.0).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
            let gb = Gamma::new(theta[1], 1.0).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
            let mut out = Vec::with_capacity(spec.n);
            for _ in 0..spec.n {
                let mut attempt = 0;
                let x = loop {
                    let a: f64 = ga.sample(&mut r);
                    let b: f64 = gb.sample(&mut r);
                    let x = a / (a + b);
                    if x > 0.0 && x < 1.0 {
                        break x;
                    }
                    attempt += 1;
                    if attempt >= BETA_MAX_REDRAWS {
                        return Err(DataError::RedrawExhausted);
                    }
                };
                out.push(Sample::scalar(x));
            }
            out
        }
        ModelSpec::Gaussian => {
            let normal = Normal::new(theta[0], theta[1].sqrt()).map_err(bad)?;
            (0..spec.n).map(|_| Sample::scalar(normal.sample(&mut r))).collect()
        }
        ModelSpec::GaussianMean { variance } => {
            let normal = Normal::new(theta[0], variance.sqrt()).map_err(bad)?;
            (0..spec.n).map(|_| Sample::scalar(normal.sample(&mut r))).collect()
        }
    };
    Ok((Vector::new(theta), samples))
}

/// Random permutation followed by contiguous blocks of `N / k`; shard `i`
/// (0-based) goes to machine `i + 1`.
pub fn shard_split(samples: &[Sample], k: usize, seed: u64) -> Result<Vec<Shard>, DataError> {
    let n = samples.len();
    if k == 0 || n == 0 || n % k != 0 {
        return Err(DataError::IndivisibleSplit { n, k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "shard-permutation", &[k as u64]));
    let per = n / k;
    Ok(order
        .chunks(per)
        .enumerate()
        .map(|(i, block)| {
            let part = block.iter().map(|&j| samples[j].clone()).collect();
            Shard::new(MachineId(i as u32 + 1), part).expect("blocks are nonempty")
        })
        .collect())
}

fn header_for(samples: &[Sample], model: Option<&ModelSpec>) -> Vec<String> {
    let (d, labeled) = match (model, samples.first()) {
        (Some(m), _) => (m.covariates(), m.has_response()),
        (None, Some(s)) => (s.x.len(), s.y.is_some()),
        (None, None) => (1, false),
    };
    if !labeled && d == 1 {
        return vec!["x".into()];
    }
    let mut h: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    if labeled {
        h.push("y".into());
    }
    h
}

fn io_err(path: &Path) -> impl FnOnce(csv::Error) -> DataError + '_ {
    move |e| {
        let source = match e.into_kind() {
            csv::ErrorKind::Io(e) => e,
            other => io::Error::other(format!("{other:?}")),
        };
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Writes samples with a header naming the columns (`x1..xd,y` or `x`).
/// Floats use the shortest decimal that parses back to the same bits.
///
/// The header comes from `model` when given, otherwise from the first
/// sample (an empty list without a model gets the scalar header `x`).
pub fn write_samples_csv(
    path: &Path,
    samples: &[Sample],
    model: Option<&ModelSpec>,
) -> Result<(), DataError> {
    let header = header_for(samples, model);
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    w.write_record(&header).map_err(io_err(path))?;
    let labeled = header.last().map(String::as_str) == Some("y");
    let width = header.len() - usize::from(labeled);
    for (i, s) in samples.iter().enumerate() {
        let line = i as u64 + 2;
        let malformed = |message: &str| DataError::MalformedRow {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        };
        if s.x.len() != width || s.y.is_some() != labeled {
            return Err(malformed("sample shape differs from header"));
        }
        if s.x.iter().chain(s.y.iter()).any(|v| !v.is_finite()) {
            return Err(malformed("non-finite value"));
        }
        let row: Vec<String> = s.x.iter().chain(s.y.iter()).map(|v| format!("{v:?}")).collect();
        w.write_record(&row).map_err(io_err(path))?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads samples written by [`write_samples_csv`]; the layout is taken from
/// the header.
pub fn read_samples_csv(path: &Path) -> Result<Vec<Sample>, DataError> {
    read_csv(path, None)
}

/// Like [`read_samples_csv`] but also requires the columns to match `model`
/// and every row to lie in its sample domain (Beta rows need `0 < x < 1`).
pub fn read_samples_for(path: &Path, model: &ModelSpec) -> Result<Vec<Sample>, DataError> {
    read_csv(path, Some(model))
}

fn read_csv(path: &Path, model: Option<&ModelSpec>) -> Result<Vec<Sample>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let malformed = |line: u64, message: String| DataError::MalformedRow {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(io_err(path))?,
        None => return Err(malformed(1, "missing header".into())),
    };
    let cols: Vec<&str> = header.iter().collect();
    let labeled = cols.last() == Some(&"y") && cols.len() >= 2;
    let width = cols.len() - usize::from(labeled);
    let expected = if !labeled && width == 1 {
        vec!["x".to_string()]
    } else {
        let mut h: Vec<String> = (1..=width).map(|j| format!("x{j}")).collect();
        if labeled {
            h.push("y".into());
        }
        h
    };
    if cols != expected {
        return Err(malformed(1, format!("unrecognized header `{}`", cols.join(","))));
    }
    if let Some(m) = model {
        if m.covariates() != width || m.has_response() != labeled {
            return Err(malformed(1, format!("header does not match model {m}")));
        }
    }
    let mut out = Vec::new();
    for rec in records {
        let rec = rec.map_err(io_err(path))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != cols.len() {
            return Err(malformed(line, format!("expected {} fields, found {}", cols.len(), rec.len())));
        }
        let mut vals = Vec::with_capacity(rec.len());
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| malformed(line, format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(malformed(line, format!("`{field}` is not finite")));
            }
            vals.push(v);
        }
        let sample = if labeled {
            let y = vals.pop().expect("labeled rows have a response");
            Sample::labeled(vals, y)
        } else {
            Sample { x: vals, y: None }
        };
        if let Some(m) = model {
            m.check_sample(&sample).map_err(|source| DataError::Domain {
                path: path.to_path_buf(),
                line,
                source,
            })?;
        }
        out.push(sample);
    }
    Ok(out)
}

/// Conventional file name for generated data.
pub fn data_file_name(experiment: &str, seed: u64) -> String {
    format!("{experiment}_{seed}.csv")
}
