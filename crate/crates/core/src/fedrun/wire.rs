//! Frame layout for the socket transport.
//!
//! ```text
//! +-------+------+------------+-----------------+
//! | magic | kind | length u32 | payload         |
//! | 4 B   | 1 B  | 4 B (LE)   | `length` bytes  |
//! +-------+------+------------+-----------------+
//! ```
//!
//! `HELLO` carries an [`InputSummary`]; `BROADCAST`, `UPLINK` and `DONE`
//! carry an encoded [`RoundMessage`]. Nothing else can be framed.

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};
use crate::params::{Reader, RoundMessage};

pub const FRAME_MAGIC: [u8; 4] = *b"FMGW";
pub const HEADER_LEN: usize = 9;
/// Upper bound on a single payload; guards against garbage length fields.
pub const MAX_PAYLOAD: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    Hello = 1,
    Broadcast = 2,
    Uplink = 3,
    Done = 4,
}

impl FrameKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Self::Hello),
            2 => Ok(Self::Broadcast),
            3 => Ok(Self::Uplink),
            4 => Ok(Self::Done),
            other => Err(Error::ProtocolViolation(format!("unknown frame kind {other}"))),
        }
    }
}

/// Per-dimension input bounds and row count a unit announces when it joins.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSummary {
    pub unit_id: u32,
    pub count: u64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputSummary {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 16 * self.lo.len());
        out.extend_from_slice(&self.unit_id.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&(self.lo.len() as u32).to_le_bytes());
        for v in self.lo.iter().chain(&self.hi) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let unit_id = r.u32()?;
        let count = r.u64()?;
        let d = r.u32()? as usize;
        let lo = r.f64s(d)?;
        let hi = r.f64s(d)?;
        r.finish()?;
        if count == 0 || lo.iter().zip(&hi).any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::ProtocolViolation(format!(
                "unit {unit_id} sent an unusable input summary"
            )));
        }
        Ok(Self {
            unit_id,
            count,
            lo,
            hi,
        })
    }
}

/// A decoded frame. The grammar has exactly these two payload shapes.
#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Hello(InputSummary),
    Round(FrameKind, RoundMessage),
}

impl Frame {
    pub fn kind(&self) -> FrameKind {
        match self {
            Frame::Hello(_) => FrameKind::Hello,
            Frame::Round(k, _) => *k,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = match self {
            Frame::Hello(s) => s.encode(),
            Frame::Round(_, m) => m.encode(),
        };
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(&FRAME_MAGIC);
        out.push(self.kind() as u8);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::ProtocolViolation("truncated frame header".into()));
        }
        let (kind, len) = parse_header(&bytes[..HEADER_LEN])?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != len {
            return Err(Error::ProtocolViolation(format!(
                "frame declares {len} payload bytes, {} present",
                body.len()
            )));
        }
        decode_payload(kind, body)
    }
}

fn parse_header(h: &[u8]) -> Result<(FrameKind, usize)> {
    if h[..4] != FRAME_MAGIC {
        return Err(Error::ProtocolViolation("bad frame magic".into()));
    }
    let kind = FrameKind::from_byte(h[4])?;
    let len = u32::from_le_bytes(h[5..9].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::ProtocolViolation(format!("payload of {len} bytes exceeds limit")));
    }
    Ok((kind, len))
}

fn decode_payload(kind: FrameKind, body: &[u8]) -> Result<Frame> {
    let bad = |e: Error| Error::ProtocolViolation(format!("malformed {kind:?} payload: {e}"));
    match kind {
        FrameKind::Hello => InputSummary::decode(body).map(Frame::Hello),
        _ => {
            let msg = RoundMessage::decode(body).map_err(bad)?;
            Ok(Frame::Round(kind, msg))
        }
    }
}

fn read_full(stream: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    stream.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::ProtocolViolation(format!("truncated frame {what}")),
        ErrorKind::WouldBlock | ErrorKind::TimedOut => {
            Error::Transport(format!("timed out reading frame {what}"))
        }
        _ => Error::Transport(e.to_string()),
    })
}

pub fn read_frame(stream: &mut impl Read) -> Result<Frame> {
    let mut header = [0u8; HEADER_LEN];
    read_full(stream, &mut header, "header")?;
    let (kind, len) = parse_header(&header)?;
    let mut body = vec![0u8; len];
    read_full(stream, &mut body, "payload")?;
    decode_payload(kind, &body)
}

pub fn write_frame(stream: &mut impl Write, frame: &Frame) -> Result<()> {
    stream
        .write_all(&frame.encode())
        .and_then(|_| stream.flush())
        .map_err(|e| Error::Transport(e.to_string()))
}
