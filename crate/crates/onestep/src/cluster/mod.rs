//! Coordinator/worker execution of the two-round protocol.

mod coordinator;
mod failure;
mod transport;
mod worker;

use std::net::{SocketAddr, TcpListener};
use std::thread;
use std::time::Duration;

use onestep_core::estimators::EstimatorError;
use onestep_core::model::Shard;
use onestep_core::solver::SolveConfig;
use onestep_core::wire::WireError;
use onestep_core::MachineId;
use thiserror::Error;

pub use coordinator::{coordinate, ProtocolConfig, ProtocolOutcome, INJECTED_FAILURE};
pub use failure::{DeliverySchedule, FailurePolicy};
pub use transport::{read_message, serve_worker, write_message, InProcessLink, Link, TcpLink};
pub use worker::{effective_ratio, subsample_size, Worker, MIN_SUBSAMPLE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("all machines failed in round {round}")]
    AllMachinesFailed { round: u8 },
    #[error("transport error{}: {message}", machine.map(|m| format!(" (machine {m})")).unwrap_or_default())]
    Transport {
        machine: Option<MachineId>,
        message: String,
    },
    #[error("protocol violation by machine {machine}: {message}")]
    Protocol { machine: MachineId, message: String },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("invalid cluster configuration: {0}")]
    Config(String),
}

/// How the coordinator reaches its workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    /// Workers live in this process and are called sequentially.
    InProcess,
    /// Workers run on threads of this process and talk TCP to a listener
    /// bound at `listen` (port 0 picks a free port).
    Tcp { listen: SocketAddr },
}

impl Transport {
    pub fn localhost_tcp() -> Self {
        Transport::Tcp {
            listen: SocketAddr::from(([127, 0, 0, 1], 0)),
        }
    }
}

/// Transport timeouts for TCP runs.
pub const TCP_TIMEOUT: Duration = Duration::from_secs(120);

/// Runs the protocol on `shards` (shard `i` held by machine `i + 1`).
pub fn run_protocol(
    config: &ProtocolConfig,
    shards: Vec<Shard>,
    solve: &SolveConfig,
    schedule: &DeliverySchedule,
    transport: Transport,
) -> Result<ProtocolOutcome, ClusterError> {
    let k = shards.len();
    for (i, s) in shards.iter().enumerate() {
        if s.machine_id.0 as usize != i + 1 {
            return Err(ClusterError::Config(format!(
                "shard {i} belongs to machine {}, expected {}",
                s.machine_id,
                i + 1
            )));
        }
    }
    let workers: Vec<Worker> = shards.into_iter().map(|s| Worker::new(s, solve.clone())).collect();
    match transport {
        Transport::InProcess => coordinate(&mut InProcessLink::new(workers), k, config, schedule),
        Transport::Tcp { listen } => {
            let listener = TcpListener::bind(listen).map_err(|e| ClusterError::Transport {
                machine: None,
                message: format!("bind {listen}: {e}"),
            })?;
            let addr = listener.local_addr().map_err(|e| ClusterError::Transport {
                machine: None,
                message: e.to_string(),
            })?;
            let handles: Vec<_> = workers
                .into_iter()
                .map(|w| thread::spawn(move || serve_worker(addr, w, TCP_TIMEOUT)))
                .collect();
            let outcome = TcpLink::accept(&listener, k, TCP_TIMEOUT).and_then(|mut link| {
                let out = coordinate(&mut link, k, config, schedule);
                link.shutdown();
                out
            });
            drop(listener);
            let mut worker_error = None;
            for h in handles {
                match h.join() {
                    Ok(Ok(())) => {}
                    Ok(Err(e)) => {
                        worker_error.get_or_insert(e);
                    }
                    Err(_) => {
                        worker_error.get_or_insert(ClusterError::Transport {
                            machine: None,
                            message: "worker thread panicked".into(),
                        });
                    }
                }
            }
            let outcome = outcome?;
            match worker_error {
                Some(e) => Err(e),
                None => Ok(outcome),
            }
        }
    }
}
