//! Coordinator/worker messages and their framing.
//!
//! A frame is a 4-byte big-endian length (counting every byte after the
//! length field), a version byte, and a UTF-8 body of `key=value` lines in a
//! fixed key order. Floats are written in shortest round-trip scientific
//! notation, so decoding restores every value bit-for-bit. Non-finite
//! values are refused at encode time.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

use thiserror::Error;

use crate::linalg::{Matrix, Vector};
use crate::model::ModelSpec;
use crate::MachineId;

pub const PROTOCOL_VERSION: u8 = 0x01;

/// Largest accepted frame payload (version byte plus body).
pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;

const LENGTH_PREFIX: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WireError {
    #[error("frame of {size} bytes exceeds the {MAX_FRAME_LEN} byte limit")]
    FrameTooLarge { size: usize },
    #[error("unsupported protocol version {found:#04x}")]
    VersionMismatch { found: u8 },
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("incomplete frame: need {needed} bytes")]
    Incomplete { needed: usize },
    #[error("invalid message: {0}")]
    InvalidMessage(String),
}

fn malformed(msg: impl Into<String>) -> WireError {
    WireError::MalformedFrame(msg.into())
}

fn invalid(msg: impl Into<String>) -> WireError {
    WireError::InvalidMessage(msg.into())
}

/// Protocol round: 1 collects local estimates, 2 collects gradients and
/// Hessians at the broadcast average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Round {
    One,
    Two,
}

impl Round {
    pub fn number(self) -> u8 {
        match self {
            Round::One => 1,
            Round::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Round::One),
            2 => Some(Round::Two),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Register,
    AssignShard,
    RequestLocalEstimate,
    LocalEstimate,
    BroadcastTheta0,
    RequestGradHess,
    GradHess,
    Failure,
    Done,
}

impl MessageKind {
    pub const ALL: [MessageKind; 9] = [
        MessageKind::Register,
        MessageKind::AssignShard,
        MessageKind::RequestLocalEstimate,
        MessageKind::LocalEstimate,
        MessageKind::BroadcastTheta0,
        MessageKind::RequestGradHess,
        MessageKind::GradHess,
        MessageKind::Failure,
        MessageKind::Done,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Register => "Register",
            MessageKind::AssignShard => "AssignShard",
            MessageKind::RequestLocalEstimate => "RequestLocalEstimate",
            MessageKind::LocalEstimate => "LocalEstimate",
            MessageKind::BroadcastTheta0 => "BroadcastTheta0",
            MessageKind::RequestGradHess => "RequestGradHess",
            MessageKind::GradHess => "GradHess",
            MessageKind::Failure => "Failure",
            MessageKind::Done => "Done",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }
}

/// Subsampling instruction for the resampled averaging estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResampleRequest {
    pub ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Worker announces itself after connecting.
    Register,
    /// Tells a worker which model its shard is to be fitted with.
    AssignShard { model: ModelSpec },
    RequestLocalEstimate { resample: Option<ResampleRequest> },
    LocalEstimate { theta: Vector, theta_sub: Option<Vector> },
    BroadcastTheta0 { theta: Vector },
    RequestGradHess,
    GradHess { gradient: Vector, hessian: Matrix },
    Failure { reason: String },
    Done,
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Register => MessageKind::Register,
            Payload::AssignShard { .. } => MessageKind::AssignShard,
            Payload::RequestLocalEstimate { .. } => MessageKind::RequestLocalEstimate,
            Payload::LocalEstimate { .. } => MessageKind::LocalEstimate,
            Payload::BroadcastTheta0 { .. } => MessageKind::BroadcastTheta0,
            Payload::RequestGradHess => MessageKind::RequestGradHess,
            Payload::GradHess { .. } => MessageKind::GradHess,
            Payload::Failure { .. } => MessageKind::Failure,
            Payload::Done => MessageKind::Done,
        }
    }
}

/// A protocol message. `machine_id` names the worker the message is from or
/// addressed to.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub machine_id: MachineId,
    pub round: Round,
    pub payload: Payload,
}

impl Message {
    pub fn new(machine_id: MachineId, round: Round, payload: Payload) -> Self {
        Self {
            machine_id,
            round,
            payload,
        }
    }

    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }

    /// Checks payload invariants: finite floats, consistent dimensions,
    /// symmetric Hessian, ratio in (0, 1).
    pub fn validate(&self) -> Result<(), WireError> {
        fn finite(name: &str, v: &[f64]) -> Result<(), WireError> {
            if v.is_empty() {
                return Err(invalid(format!("{name} is empty")));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("{name} has a non-finite entry")));
            }
            Ok(())
        }
        match &self.payload {
            Payload::RequestLocalEstimate {
                resample: Some(r), ..
            } => {
                if !(r.ratio > 0.0 && r.ratio < 1.0) {
                    return Err(invalid("resample ratio outside (0, 1)"));
                }
            }
            Payload::LocalEstimate { theta, theta_sub } => {
                finite("theta", theta)?;
                if let Some(sub) = theta_sub {
                    finite("theta_sub", sub)?;
                    if sub.dim() != theta.dim() {
                        return Err(invalid("theta_sub dimension differs from theta"));
                    }
                }
            }
            Payload::BroadcastTheta0 { theta } => finite("theta", theta)?,
            Payload::GradHess { gradient, hessian } => {
                finite("gradient", gradient)?;
                finite("hessian", hessian.as_slice())?;
                if hessian.dim() != gradient.dim() {
                    return Err(invalid("hessian dimension differs from gradient"));
                }
                if !hessian.is_symmetric() {
                    return Err(invalid("hessian is not symmetric"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn write_floats(out: &mut String, key: &str, values: &[f64]) {
    out.push_str(key);
    out.push('=');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v:e}");
    }
    out.push('\n');
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, WireError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            _ => return Err(malformed("bad escape in string field")),
        }
    }
    Ok(out)
}

/// Canonical text body of a message.
pub fn encode_body(msg: &Message) -> Result<String, WireError> {
    msg.validate()?;
    let mut out = String::new();
    let _ = writeln!(out, "kind={}", msg.kind().name());
    let _ = writeln!(out, "machine={}", msg.machine_id.0);
    let _ = writeln!(out, "round={}", msg.round.number());
    match &msg.payload {
        Payload::Register | Payload::RequestGradHess | Payload::Done => {}
        Payload::AssignShard { model } => {
            let _ = writeln!(out, "model={model}");
        }
        Payload::RequestLocalEstimate { resample } => {
            if let Some(r) = resample {
                write_floats(&mut out, "resample_ratio", &[r.ratio]);
                let _ = writeln!(out, "resample_seed={}", r.seed);
            }
        }
        Payload::LocalEstimate { theta, theta_sub } => {
            write_floats(&mut out, "theta", theta);
            if let Some(sub) = theta_sub {
                write_floats(&mut out, "theta_sub", sub);
            }
        }
        Payload::BroadcastTheta0 { theta } => write_floats(&mut out, "theta", theta),
        Payload::GradHess { gradient, hessian } => {
            write_floats(&mut out, "gradient", gradient);
            write_floats(&mut out, "hessian", hessian.as_slice());
        }
        Payload::Failure { reason } => {
            let _ = writeln!(out, "reason={}", escape(reason));
        }
    }
    Ok(out)
}

/// Ordered `key=value` fields, consumed front to back.
struct Fields<'a> {
    items: Vec<(&'a str, &'a str)>,
    pos: usize,
}

impl<'a> Fields<'a> {
    fn parse(body: &'a str) -> Result<Self, WireError> {
        let mut items = Vec::new();
        for line in body.split_terminator('\n') {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| malformed(format!("line without `=`: {line:?}")))?;
            items.push((k, v));
        }
        if !body.is_empty() && !body.ends_with('\n') {
            return Err(malformed("body must end with a newline"));
        }
        Ok(Self { items, pos: 0 })
    }

    fn next(&mut self, key: &str) -> Result<&'a str, WireError> {
        match self.items.get(self.pos) {
            Some((k, v)) if *k == key => {
                self.pos += 1;
                Ok(v)
            }
            Some((k, _)) => Err(malformed(format!("expected `{key}`, found `{k}`"))),
            None => Err(malformed(format!("missing `{key}`"))),
        }
    }

    fn optional(&mut self, key: &str) -> Option<&'a str> {
        match self.items.get(self.pos) {
            Some((k, v)) if *k == key => {
                self.pos += 1;
                Some(v)
            }
            _ => None,
        }
    }

    fn finish(&self) -> Result<(), WireError> {
        match self.items.get(self.pos) {
            None => Ok(()),
            Some((k, _)) => Err(malformed(format!("unexpected field `{k}`"))),
        }
    }
}

fn parse_floats(key: &str, s: &str) -> Result<Vec<f64>, WireError> {
    if s.is_empty() {
        return Err(malformed(format!("`{key}` is empty")));
    }
    s.split(',')
        .map(|t| {
            let v: f64 = t
                .parse()
                .map_err(|_| malformed(format!("bad float {t:?} in `{key}`")))?;
            if !v.is_finite() {
                return Err(malformed(format!("non-finite value in `{key}`")));
            }
            Ok(v)
        })
        .collect()
}

fn parse_int<T: core::str::FromStr>(key: &str, s: &str) -> Result<T, WireError> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed(format!("bad integer {s:?} in `{key}`")));
    }
    s.parse()
        .map_err(|_| malformed(format!("bad integer {s:?} in `{key}`")))
}

/// Parse a canonical text body.
pub fn decode_body(body: &str) -> Result<Message, WireError> {
    let mut f = Fields::parse(body)?;
    let kind_name = f.next("kind")?;
    let kind = MessageKind::from_name(kind_name)
        .ok_or_else(|| malformed(format!("unknown kind {kind_name:?}")))?;
    let machine_id = MachineId(parse_int("machine", f.next("machine")?)?);
    let round_num: u8 = parse_int("round", f.next("round")?)?;
    let round = Round::from_number(round_num)
        .ok_or_else(|| malformed(format!("round must be 1 or 2, got {round_num}")))?;
    let payload = match kind {
        MessageKind::Register => Payload::Register,
        MessageKind::RequestGradHess => Payload::RequestGradHess,
        MessageKind::Done => Payload::Done,
        MessageKind::AssignShard => {
            let text = f.next("model")?;
            let model = text
                .parse::<ModelSpec>()
                .map_err(|e| malformed(e.to_string()))?;
            Payload::AssignShard { model }
        }
        MessageKind::RequestLocalEstimate => {
            let resample = match f.optional("resample_ratio") {
                Some(r) => {
                    let ratio = parse_floats("resample_ratio", r)?;
                    if ratio.len() != 1 {
                        return Err(malformed("resample_ratio must be a single value"));
                    }
                    let seed = parse_int("resample_seed", f.next("resample_seed")?)?;
                    Some(ResampleRequest {
                        ratio: ratio[0],
                        seed,
                    })
                }
                None => None,
            };
            Payload::RequestLocalEstimate { resample }
        }
        MessageKind::LocalEstimate => {
            let theta = Vector::new(parse_floats("theta", f.next("theta")?)?);
            let theta_sub = match f.optional("theta_sub") {
                Some(s) => Some(Vector::new(parse_floats("theta_sub", s)?)),
                None => None,
            };
            Payload::LocalEstimate { theta, theta_sub }
        }
        MessageKind::BroadcastTheta0 => Payload::BroadcastTheta0 {
            theta: Vector::new(parse_floats("theta", f.next("theta")?)?),
        },
        MessageKind::GradHess => {
            let gradient = Vector::new(parse_floats("gradient", f.next("gradient")?)?);
            let entries = parse_floats("hessian", f.next("hessian")?)?;
            let hessian = Matrix::from_row_major(gradient.dim(), entries)
                .map_err(|_| malformed("hessian size does not match gradient"))?;
            Payload::GradHess { gradient, hessian }
        }
        MessageKind::Failure => Payload::Failure {
            reason: unescape(f.next("reason")?)?,
        },
    };
    f.finish()?;
    let msg = Message {
        machine_id,
        round,
        payload,
    };
    msg.validate()?;
    Ok(msg)
}

/// Full frame: length prefix, version byte, body.
pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, WireError> {
    let body = encode_body(msg)?;
    let len = body.len() + 1;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge { size: len });
    }
    let mut out = Vec::with_capacity(LENGTH_PREFIX + len);
    out.extend_from_slice(&(len as u32).to_be_bytes());
    out.push(PROTOCOL_VERSION);
    out.extend_from_slice(body.as_bytes());
    Ok(out)
}

/// Reads the length prefix of a frame: the number of bytes that follow it.
pub fn frame_len(prefix: [u8; 4]) -> Result<usize, WireError> {
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge { size: len });
    }
    if len == 0 {
        return Err(malformed("empty frame"));
    }
    Ok(len)
}

/// Decodes the bytes after the length prefix (version byte plus body).
pub fn decode_payload_bytes(bytes: &[u8]) -> Result<Message, WireError> {
    let (&version, body) = bytes.split_first().ok_or_else(|| malformed("empty frame"))?;
    if version != PROTOCOL_VERSION {
        return Err(WireError::VersionMismatch { found: version });
    }
    let body = core::str::from_utf8(body).map_err(|_| malformed("body is not UTF-8"))?;
    decode_body(body)
}

/// Decodes one frame from the front of `bytes`, returning the message and
/// the number of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Message, usize), WireError> {
    if bytes.len() < LENGTH_PREFIX {
        return Err(WireError::Incomplete {
            needed: LENGTH_PREFIX,
        });
    }
    let len = frame_len([bytes[0], bytes[1], bytes[2], bytes[3]])?;
    let total = LENGTH_PREFIX + len;
    if bytes.len() < total {
        return Err(WireError::Incomplete { needed: total });
    }
    let msg = decode_payload_bytes(&bytes[LENGTH_PREFIX..total])?;
    Ok((msg, total))
}
