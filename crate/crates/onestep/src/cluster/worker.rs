//! The worker side of the protocol: one shard, answers coordinator requests.

use onestep_core::linalg::Vector;
use onestep_core::model::{shard_criterion, Criterion, ModelSpec, Sample, Shard};
use onestep_core::solver::{m_estimate, SolveConfig};
use onestep_core::wire::{Message, Payload, ResampleRequest};
use onestep_core::MachineId;
use rand::seq::index;

use crate::rng;

/// Smallest subsample a worker will fit for the resampled estimator.
pub const MIN_SUBSAMPLE: usize = 2;

/// Subsample size for ratio `s` on a shard of `n`: `⌊sn⌋`, raised to
/// [`MIN_SUBSAMPLE`]. `None` when that leaves no proper subsample.
pub fn subsample_size(s: f64, n: usize) -> Option<usize> {
    let m = ((s * n as f64).floor() as usize).max(MIN_SUBSAMPLE);
    (m < n).then_some(m)
}

/// The ratio actually realized by [`subsample_size`], which is what the
/// bias correction must use.
pub fn effective_ratio(s: f64, n: usize) -> Option<f64> {
    subsample_size(s, n).map(|m| m as f64 / n as f64)
}

/// A worker holding one shard. Between rounds it keeps only its shard, the
/// assigned model and the broadcast `θ⁽⁰⁾`.
#[derive(Debug, Clone)]
pub struct Worker {
    machine_id: MachineId,
    samples: Vec<Sample>,
    solve: SolveConfig,
    model: Option<ModelSpec>,
    shard_error: Option<String>,
    theta0: Option<Vector>,
    done: bool,
}

impl Worker {
    pub fn new(shard: Shard, solve: SolveConfig) -> Self {
        Self {
            machine_id: shard.machine_id,
            samples: shard.samples,
            solve,
            model: None,
            shard_error: None,
            theta0: None,
            done: false,
        }
    }

    pub fn machine_id(&self) -> MachineId {
        self.machine_id
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Handles one coordinator message and returns the reply, if the
    /// message calls for one.
    pub fn handle(&mut self, msg: &Message) -> Option<Message> {
        let reply = |payload| Some(Message::new(self.machine_id, msg.round, payload));
        let fail = |reason: String| {
            log::warn!("machine {}: {reason}", self.machine_id);
            Some(Message::new(self.machine_id, msg.round, Payload::Failure { reason }))
        };
        match &msg.payload {
            Payload::AssignShard { model } => {
                self.model = Some(*model);
                self.shard_error = self
                    .samples
                    .iter()
                    .enumerate()
                    .find_map(|(i, s)| model.check_sample(s).err().map(|e| e.at(i).to_string()));
                None
            }
            Payload::RequestLocalEstimate { resample } => match self.local_estimate(*resample) {
                Ok((theta, theta_sub)) => reply(Payload::LocalEstimate { theta, theta_sub }),
                Err(reason) => fail(reason),
            },
            Payload::BroadcastTheta0 { theta } => {
                self.theta0 = Some(theta.clone());
                None
            }
            Payload::RequestGradHess => match self.grad_hess() {
                Ok(payload) => reply(payload),
                Err(reason) => fail(reason),
            },
            Payload::Done => {
                self.done = true;
                None
            }
            other => fail(format!("unexpected {} message", other.kind().name())),
        }
    }

    fn model(&self) -> Result<ModelSpec, String> {
        if let Some(e) = &self.shard_error {
            return Err(format!("shard rejected: {e}"));
        }
        self.model.ok_or_else(|| "no model assigned".to_string())
    }

    fn fit(&self, model: &ModelSpec, samples: &[Sample]) -> Result<Vector, String> {
        let init = model.initial_estimate(samples);
        let r = m_estimate(model, samples, &init, &self.solve).map_err(|e| e.to_string())?;
        if !r.converged {
            log::warn!(
                "machine {}: local solve stopped after {} iterations, |grad| = {:e}",
                self.machine_id,
                r.iterations,
                r.final_grad_norm
            );
        }
        Ok(r.theta_hat)
    }

    fn local_estimate(
        &self,
        resample: Option<ResampleRequest>,
    ) -> Result<(Vector, Option<Vector>), String> {
        let model = self.model()?;
        let theta = self.fit(&model, &self.samples)?;
        let theta_sub = resample.and_then(|req| {
            let n = self.samples.len();
            let Some(m) = subsample_size(req.ratio, n) else {
                log::debug!("machine {}: shard of {n} too small to subsample", self.machine_id);
                return None;
            };
            let mut r = rng::stream(req.seed, "resample", &[u64::from(self.machine_id.0)]);
            let mut idx = index::sample(&mut r, n, m).into_vec();
            idx.sort_unstable();
            let sub: Vec<Sample> = idx.iter().map(|&i| self.samples[i].clone()).collect();
            match self.fit(&model, &sub) {
                Ok(t) => Some(t),
                Err(e) => {
                    log::warn!("machine {}: subsample fit failed: {e}", self.machine_id);
                    None
                }
            }
        });
        Ok((theta, theta_sub))
    }

    fn grad_hess(&self) -> Result<Payload, String> {
        let model = self.model()?;
        let theta0 = self.theta0.as_ref().ok_or("no θ⁽⁰⁾ received")?;
        let e = shard_criterion(&model, &self.samples, theta0).map_err(|e| e.to_string())?;
        Ok(Payload::GradHess {
            gradient: e.gradient,
            hessian: e.hessian,
        })
    }
}
