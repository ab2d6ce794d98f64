//! The coordinator: two rounds, a barrier after each, reductions in
//! machine-id order.

use onestep_core::estimators::{
    average, one_step_update, simple_average, AggregationInput, EstimatorError, GradHess,
    MachineReport,
};
use onestep_core::linalg::Vector;
use onestep_core::model::{Criterion, ModelSpec};
use onestep_core::wire::{Message, MessageKind, Payload, ResampleRequest, Round};
use onestep_core::MachineId;

use super::failure::DeliverySchedule;
use super::transport::Link;
use super::ClusterError;

/// Reason attached to replies removed by the failure policy.
pub const INJECTED_FAILURE: &str = "dropped by failure policy";

/// What the coordinator tells the workers.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub model: ModelSpec,
    /// Ask workers for a subsample estimate as well.
    pub resample: Option<ResampleRequest>,
}

/// Everything one protocol run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolOutcome {
    pub theta0: Result<Vector, EstimatorError>,
    /// Average of the delivered subsample estimates, when requested and at
    /// least one arrived.
    pub theta0_sub: Option<Vector>,
    pub theta1: Result<Vector, EstimatorError>,
    /// `a_i` per round, indexed by machine id − 1.
    pub mask_round1: Vec<bool>,
    pub mask_round2: Vec<bool>,
    /// Coordinator sends in order, then each round's replies sorted by
    /// machine id, with dropped replies recorded as `Failure`.
    pub transcript: Vec<Message>,
    /// Replies removed by the failure policy.
    pub injected_drops: usize,
    /// `Failure` replies sent by workers themselves.
    pub worker_failures: usize,
}

impl ProtocolOutcome {
    /// `(θ⁽⁰⁾, θ⁽¹⁾)`, or the round that lost every machine.
    pub fn estimates(&self) -> Result<(&Vector, &Vector), ClusterError> {
        let lift = |round: u8, e: &EstimatorError| match e {
            EstimatorError::AllMachinesFailed => ClusterError::AllMachinesFailed { round },
            other => ClusterError::Estimator(other.clone()),
        };
        let t0 = self.theta0.as_ref().map_err(|e| lift(1, e))?;
        let t1 = self.theta1.as_ref().map_err(|e| lift(2, e))?;
        Ok((t0, t1))
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.transcript.iter().filter(|m| m.kind() == kind).count()
    }
}

struct Collected {
    replies: Vec<Message>,
    injected: usize,
    worker_failures: usize,
}

/// Receives one reply per machine, then replaces replies the schedule drops
/// and returns them sorted by id.
fn barrier<L: Link>(
    link: &mut L,
    k: usize,
    round: Round,
    expected: MessageKind,
    d: usize,
    schedule: &DeliverySchedule,
) -> Result<Collected, ClusterError> {
    let mut slots: Vec<Option<Message>> = vec![None; k];
    for _ in 0..k {
        let msg = link.recv()?;
        let id = msg.machine_id;
        let violation = |message: String| ClusterError::Protocol { machine: id, message };
        if msg.round != round {
            return Err(violation(format!("reply for round {} during round {}", msg.round.number(), round.number())));
        }
        let kind = msg.kind();
        if kind != expected && kind != MessageKind::Failure {
            return Err(violation(format!("unexpected {} reply", kind.name())));
        }
        let dim = match &msg.payload {
            Payload::LocalEstimate { theta, .. } => Some(theta.dim()),
            Payload::GradHess { gradient, .. } => Some(gradient.dim()),
            _ => None,
        };
        if dim.is_some_and(|v| v != d) {
            return Err(violation(format!("payload dimension {} (expected {d})", dim.unwrap_or(0))));
        }
        let slot = (id.0 as usize)
            .checked_sub(1)
            .and_then(|i| slots.get_mut(i))
            .ok_or_else(|| violation("unknown machine".into()))?;
        if slot.is_some() {
            return Err(violation("replied twice".into()));
        }
        *slot = Some(msg);
    }
    let mut injected = 0;
    let mut worker_failures = 0;
    let replies = slots
        .into_iter()
        .map(|m| {
            let m = m.expect("one reply per machine");
            if !schedule.delivers(m.machine_id, round) {
                injected += 1;
                return Message::new(
                    m.machine_id,
                    round,
                    Payload::Failure {
                        reason: INJECTED_FAILURE.into(),
                    },
                );
            }
            if m.kind() == MessageKind::Failure {
                worker_failures += 1;
            }
            m
        })
        .collect();
    Ok(Collected {
        replies,
        injected,
        worker_failures,
    })
}

fn broadcast<L: Link>(
    link: &mut L,
    k: usize,
    round: Round,
    payload: &Payload,
    transcript: &mut Vec<Message>,
) -> Result<(), ClusterError> {
    for i in 1..=k {
        let msg = Message::new(MachineId(i as u32), round, payload.clone());
        link.send(&msg)?;
        transcript.push(msg);
    }
    Ok(())
}

/// Runs both rounds against `k` workers reachable through `link`, then
/// tells every worker it is done.
pub fn coordinate<L: Link>(
    link: &mut L,
    k: usize,
    config: &ProtocolConfig,
    schedule: &DeliverySchedule,
) -> Result<ProtocolOutcome, ClusterError> {
    if k == 0 {
        return Err(ClusterError::Config("k must be >= 1".into()));
    }
    if schedule.machines() != k {
        return Err(ClusterError::Config(format!(
            "delivery schedule covers {} machines, expected {k}",
            schedule.machines()
        )));
    }
    let d = config.model.dim();
    let mut transcript = Vec::new();

    broadcast(link, k, Round::One, &Payload::AssignShard { model: config.model }, &mut transcript)?;
    let request = Payload::RequestLocalEstimate {
        resample: config.resample,
    };
    broadcast(link, k, Round::One, &request, &mut transcript)?;
    let one = barrier(link, k, Round::One, MessageKind::LocalEstimate, d, schedule)?;

    let mut locals = Vec::with_capacity(k);
    let mut subs = Vec::new();
    for m in &one.replies {
        match &m.payload {
            Payload::LocalEstimate { theta, theta_sub } => {
                locals.push(MachineReport::delivered(m.machine_id, theta.clone()));
                subs.extend(theta_sub.clone());
            }
            _ => locals.push(MachineReport::failed(m.machine_id)),
        }
    }
    transcript.extend(one.replies);
    let input = AggregationInput::new(locals)?;
    let mask_round1 = input.mask();
    let theta0 = simple_average(&input);
    let theta0_sub = if subs.is_empty() {
        None
    } else {
        average(&subs.iter().collect::<Vec<_>>()).ok()
    };

    let mut injected = one.injected;
    let mut worker_failures = one.worker_failures;
    let (theta1, mask_round2) = match &theta0 {
        Ok(t0) => {
            broadcast(link, k, Round::Two, &Payload::BroadcastTheta0 { theta: t0.clone() }, &mut transcript)?;
            broadcast(link, k, Round::Two, &Payload::RequestGradHess, &mut transcript)?;
            let two = barrier(link, k, Round::Two, MessageKind::GradHess, d, schedule)?;
            injected += two.injected;
            worker_failures += two.worker_failures;
            let parts: Vec<MachineReport<GradHess>> = two
                .replies
                .iter()
                .map(|m| match &m.payload {
                    Payload::GradHess { gradient, hessian } => MachineReport::delivered(
                        m.machine_id,
                        GradHess {
                            gradient: gradient.clone(),
                            hessian: hessian.clone(),
                        },
                    ),
                    _ => MachineReport::failed(m.machine_id),
                })
                .collect();
            transcript.extend(two.replies);
            let input = AggregationInput::new(parts)?;
            (one_step_update(t0, &input), input.mask())
        }
        Err(e) => {
            log::warn!("round 1 produced no θ⁽⁰⁾ ({e}); skipping round 2");
            (Err(e.clone()), vec![false; k])
        }
    };

    broadcast(link, k, Round::Two, &Payload::Done, &mut transcript)?;
    Ok(ProtocolOutcome {
        theta0,
        theta0_sub,
        theta1,
        mask_round1,
        mask_round2,
        transcript,
        injected_drops: injected,
        worker_failures,
    })
}
