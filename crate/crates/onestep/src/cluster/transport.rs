//! Message transports between the coordinator and its workers.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use onestep_core::wire::{
    decode_frame, decode_payload_bytes, encode_frame, frame_len, Message, Payload, Round,
};
use onestep_core::MachineId;

use super::worker::Worker;
use super::ClusterError;

/// The coordinator's view of the cluster: addressed sends, and receives
/// from whichever worker answers next.
pub trait Link {
    fn send(&mut self, msg: &Message) -> Result<(), ClusterError>;
    fn recv(&mut self) -> Result<Message, ClusterError>;
}

fn transport(machine: Option<MachineId>, message: impl Into<String>) -> ClusterError {
    ClusterError::Transport {
        machine,
        message: message.into(),
    }
}

/// Writes one frame.
pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), ClusterError> {
    let frame = encode_frame(msg)?;
    w.write_all(&frame)
        .and_then(|_| w.flush())
        .map_err(|e| transport(Some(msg.machine_id), e.to_string()))
}

/// Reads one frame; `Ok(None)` on a clean end of stream between frames.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>, ClusterError> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < prefix.len() {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(transport(None, "stream closed inside a frame header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(transport(None, e.to_string())),
        }
    }
    let len = frame_len(prefix)?;
    let mut rest = vec![0u8; len];
    r.read_exact(&mut rest)
        .map_err(|e| transport(None, format!("stream closed inside a frame: {e}")))?;
    Ok(Some(decode_payload_bytes(&rest)?))
}

/// Sequential transport: each send is handled by the addressed worker
/// immediately and its reply queued. Messages still pass through the wire
/// codec so both transports see identical bytes.
pub struct InProcessLink {
    workers: Vec<Worker>,
    replies: VecDeque<Message>,
}

impl InProcessLink {
    /// `workers[i]` must have machine id `i + 1`.
    pub fn new(workers: Vec<Worker>) -> Self {
        for (i, w) in workers.iter().enumerate() {
            assert_eq!(w.machine_id().0 as usize, i + 1, "workers must be ordered by id");
        }
        Self {
            workers,
            replies: VecDeque::new(),
        }
    }
}

fn through_codec(msg: &Message) -> Result<Message, ClusterError> {
    Ok(decode_frame(&encode_frame(msg)?)?.0)
}

impl Link for InProcessLink {
    fn send(&mut self, msg: &Message) -> Result<(), ClusterError> {
        let id = msg.machine_id;
        let worker = (id.0 as usize)
            .checked_sub(1)
            .and_then(|i| self.workers.get_mut(i))
            .ok_or_else(|| transport(Some(id), "no such worker"))?;
        if let Some(reply) = worker.handle(&through_codec(msg)?) {
            self.replies.push_back(through_codec(&reply)?);
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, ClusterError> {
        self.replies
            .pop_front()
            .ok_or_else(|| transport(None, "no reply pending"))
    }
}

type Incoming = Result<Message, ClusterError>;

/// Coordinator end of a TCP deployment: one connection per worker, a reader
/// thread per connection feeding a shared channel.
pub struct TcpLink {
    writers: Vec<TcpStream>,
    incoming: Receiver<Incoming>,
    readers: Vec<JoinHandle<()>>,
    timeout: Duration,
}

impl TcpLink {
    /// Accepts `k` workers on `listener`. Each must open with a `Register`
    /// message carrying a distinct id in `1..=k`.
    pub fn accept(listener: &TcpListener, k: usize, timeout: Duration) -> Result<Self, ClusterError> {
        let mut slots: Vec<Option<TcpStream>> = (0..k).map(|_| None).collect();
        for _ in 0..k {
            let (mut stream, peer) = listener.accept().map_err(|e| transport(None, e.to_string()))?;
            stream.set_nodelay(true).ok();
            stream
                .set_read_timeout(Some(timeout))
                .map_err(|e| transport(None, e.to_string()))?;
            let hello = read_message(&mut stream)?
                .ok_or_else(|| transport(None, format!("{peer} closed before registering")))?;
            let id = hello.machine_id;
            if !matches!(hello.payload, Payload::Register) {
                return Err(ClusterError::Protocol {
                    machine: id,
                    message: format!("expected register, got {}", hello.kind().name()),
                });
            }
            let slot = (id.0 as usize)
                .checked_sub(1)
                .and_then(|i| slots.get_mut(i))
                .ok_or_else(|| ClusterError::Protocol {
                    machine: id,
                    message: format!("machine id outside 1..={k}"),
                })?;
            if slot.is_some() {
                return Err(ClusterError::Protocol {
                    machine: id,
                    message: "registered twice".into(),
                });
            }
            stream.set_read_timeout(None).map_err(|e| transport(Some(id), e.to_string()))?;
            log::info!("machine {id} registered from {peer}");
            *slot = Some(stream);
        }
        let writers: Vec<TcpStream> = slots.into_iter().map(|s| s.expect("all registered")).collect();
        let (tx, incoming) = mpsc::channel();
        let mut readers = Vec::with_capacity(k);
        for (i, w) in writers.iter().enumerate() {
            let stream = w.try_clone().map_err(|e| transport(None, e.to_string()))?;
            readers.push(spawn_reader(MachineId(i as u32 + 1), stream, tx.clone()));
        }
        Ok(Self {
            writers,
            incoming,
            readers,
            timeout,
        })
    }

    /// Closes the connections and waits for the reader threads.
    pub fn shutdown(self) {
        for w in &self.writers {
            w.shutdown(std::net::Shutdown::Both).ok();
        }
        for r in self.readers {
            r.join().ok();
        }
    }
}

fn spawn_reader(id: MachineId, mut stream: TcpStream, tx: Sender<Incoming>) -> JoinHandle<()> {
    thread::spawn(move || loop {
        match read_message(&mut stream) {
            Ok(Some(msg)) => {
                let msg = if msg.machine_id == id {
                    Ok(msg)
                } else {
                    Err(ClusterError::Protocol {
                        machine: id,
                        message: format!("message claims to be from machine {}", msg.machine_id),
                    })
                };
                if tx.send(msg).is_err() {
                    return;
                }
            }
            Ok(None) => return,
            Err(e) => {
                // Either the worker dropped the connection or shutdown() closed it.
                let e = match e {
                    ClusterError::Transport { message, .. } => transport(Some(id), message),
                    other => other,
                };
                tx.send(Err(e)).ok();
                return;
            }
        }
    })
}

impl Link for TcpLink {
    fn send(&mut self, msg: &Message) -> Result<(), ClusterError> {
        let id = msg.machine_id;
        let w = (id.0 as usize)
            .checked_sub(1)
            .and_then(|i| self.writers.get_mut(i))
            .ok_or_else(|| transport(Some(id), "no such worker"))?;
        write_message(w, msg)
    }

    fn recv(&mut self) -> Result<Message, ClusterError> {
        match self.incoming.recv_timeout(self.timeout) {
            Ok(m) => m,
            Err(RecvTimeoutError::Timeout) => Err(transport(None, "timed out waiting for replies")),
            Err(RecvTimeoutError::Disconnected) => Err(transport(None, "all workers disconnected")),
        }
    }
}

/// Connects to the coordinator at `addr`, retrying until `connect_timeout`
/// elapses, registers, then serves requests until `Done`.
pub fn serve_worker(
    addr: SocketAddr,
    mut worker: Worker,
    connect_timeout: Duration,
) -> Result<(), ClusterError> {
    let id = worker.machine_id();
    let deadline = Instant::now() + connect_timeout;
    let mut stream = loop {
        match TcpStream::connect(addr) {
            Ok(s) => break s,
            Err(e) if Instant::now() < deadline => {
                log::debug!("machine {id}: connect to {addr} failed ({e}), retrying");
                thread::sleep(Duration::from_millis(20));
            }
            Err(e) => return Err(transport(Some(id), format!("connect to {addr}: {e}"))),
        }
    };
    stream.set_nodelay(true).ok();
    write_message(&mut stream, &Message::new(id, Round::One, Payload::Register))?;
    while !worker.is_done() {
        let msg = read_message(&mut stream)
            .map_err(|e| match e {
                ClusterError::Transport { message, .. } => transport(Some(id), message),
                other => other,
            })?
            .ok_or_else(|| transport(Some(id), "coordinator closed the connection"))?;
        if let Some(reply) = worker.handle(&msg) {
            write_message(&mut stream, &reply)?;
        }
    }
    Ok(())
}
