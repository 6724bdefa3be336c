//! Length-prefixed frames: `"CFHB" | version | msg_type | u32 LE len | payload`.
//!
//! Payload fields are little-endian integers and `u16`-length-prefixed UTF-8
//! strings; parameter vectors travel in their own binary format and always
//! occupy the rest of the payload.

use std::io::{self, Read, Write};

use coldfuse::{Contribution, ParameterVector};

use crate::error::{HubError, Result};

pub const MAGIC: [u8; 4] = *b"CFHB";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 10;
pub const DEFAULT_MAX_PAYLOAD: u32 = 256 << 20;

pub mod msg {
    pub const FETCH_BASE: u8 = 1;
    pub const BASE: u8 = 2;
    pub const SUBMIT: u8 = 3;
    pub const ACK: u8 = 4;
    pub const AWAIT_FUSION: u8 = 5;
    pub const FUSED: u8 = 6;
    pub const ERROR: u8 = 7;
}

/// A raw frame. `msg_type` is kept as a byte so unknown types survive decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

/// Why a frame could not be read.
#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("payload of {len} bytes exceeds limit {max}")]
    TooLarge { len: u32, max: u32 },
    #[error("truncated frame")]
    Truncated,
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl WireMessage {
    pub fn new(msg_type: u8, payload: Vec<u8>) -> Self {
        Self { msg_type, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.msg_type);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes one frame from the front of `bytes`; returns it and the bytes consumed.
    pub fn decode(bytes: &[u8], max_payload: u32) -> std::result::Result<(Self, usize), FrameError> {
        if bytes.len() < HEADER_LEN {
            return Err(FrameError::Truncated);
        }
        let len = parse_header(bytes[..HEADER_LEN].try_into().expect("header length"), max_payload)?;
        let end = HEADER_LEN + len as usize;
        if bytes.len() < end {
            return Err(FrameError::Truncated);
        }
        Ok((Self::new(bytes[5], bytes[HEADER_LEN..end].to_vec()), end))
    }

    /// Reads one frame. A clean EOF before the first byte is [`FrameError::Closed`].
    pub fn read_from<R: Read>(r: &mut R, max_payload: u32) -> std::result::Result<Self, FrameError> {
        let mut header = [0u8; HEADER_LEN];
        let mut filled = 0;
        while filled < HEADER_LEN {
            match r.read(&mut header[filled..]) {
                Ok(0) if filled == 0 => return Err(FrameError::Closed),
                Ok(0) => return Err(FrameError::Truncated),
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let len = parse_header(&header, max_payload)?;
        let mut payload = vec![0u8; len as usize];
        r.read_exact(&mut payload).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => FrameError::Truncated,
            _ => FrameError::Io(e),
        })?;
        Ok(Self::new(header[5], payload))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }
}

fn parse_header(h: &[u8; HEADER_LEN], max_payload: u32) -> std::result::Result<u32, FrameError> {
    let magic: [u8; 4] = h[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    if h[4] != VERSION {
        return Err(FrameError::BadVersion(h[4]));
    }
    let len = u32::from_le_bytes(h[6..10].try_into().expect("4 bytes"));
    if len > max_payload {
        return Err(FrameError::TooLarge { len, max: max_payload });
    }
    Ok(len)
}

/// Error codes carried by ERROR frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ErrorCode {
    Stale = 1,
    Duplicate = 2,
    Shape = 3,
    UnknownType = 4,
    Malformed = 5,
    NotInCohort = 6,
    Aborted = 7,
    Norm = 8,
    TooLarge = 9,
    NonFinite = 10,
    CohortMismatch = 11,
    Internal = 255,
}

impl ErrorCode {
    pub fn from_u8(b: u8) -> Option<Self> {
        use ErrorCode::*;
        [
            Stale,
            Duplicate,
            Shape,
            UnknownType,
            Malformed,
            NotInCohort,
            Aborted,
            Norm,
            TooLarge,
            NonFinite,
            CohortMismatch,
            Internal,
        ]
        .into_iter()
        .find(|c| *c as u8 == b)
    }
}

/// Acknowledgement of a submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    pub iteration: u64,
    pub received: u32,
    pub cohort_size: u32,
    /// The identical contribution had already been recorded.
    pub already_recorded: bool,
}

/// Decoded message payloads.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Join the current iteration of `run_key`. `cohort_size` 0 means the hub default.
    FetchBase {
        run_key: String,
        contributor_id: String,
        cohort_size: u32,
    },
    Base {
        iteration: u64,
        base: ParameterVector,
    },
    Submit {
        run_key: String,
        contribution: Contribution,
    },
    Ack(Ack),
    AwaitFusion {
        run_key: String,
        iteration: u64,
    },
    /// The base produced by fusing `iteration - 1`.
    Fused {
        iteration: u64,
        base: ParameterVector,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl Message {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Message::Error {
            code,
            message: message.into(),
        }
    }

    pub fn msg_type(&self) -> u8 {
        match self {
            Message::FetchBase { .. } => msg::FETCH_BASE,
            Message::Base { .. } => msg::BASE,
            Message::Submit { .. } => msg::SUBMIT,
            Message::Ack(_) => msg::ACK,
            Message::AwaitFusion { .. } => msg::AWAIT_FUSION,
            Message::Fused { .. } => msg::FUSED,
            Message::Error { .. } => msg::ERROR,
        }
    }

    pub fn to_wire(&self) -> WireMessage {
        let mut w = Vec::new();
        match self {
            Message::FetchBase {
                run_key,
                contributor_id,
                cohort_size,
            } => {
                put_str(&mut w, run_key);
                put_str(&mut w, contributor_id);
                w.extend_from_slice(&cohort_size.to_le_bytes());
            }
            Message::Base { iteration, base } | Message::Fused { iteration, base } => {
                w.extend_from_slice(&iteration.to_le_bytes());
                w.extend_from_slice(&base.to_bytes());
            }
            Message::Submit { run_key, contribution: c } => {
                put_str(&mut w, run_key);
                put_str(&mut w, &c.contributor_id);
                w.extend_from_slice(&c.iteration.to_le_bytes());
                put_str(&mut w, &c.task_id);
                w.extend_from_slice(&c.train_examples_seen.to_le_bytes());
                w.extend_from_slice(&c.wall_time_ms.to_le_bytes());
                w.extend_from_slice(&c.body.to_bytes());
            }
            Message::Ack(a) => {
                w.extend_from_slice(&a.iteration.to_le_bytes());
                w.extend_from_slice(&a.received.to_le_bytes());
                w.extend_from_slice(&a.cohort_size.to_le_bytes());
                w.push(u8::from(a.already_recorded));
            }
            Message::AwaitFusion { run_key, iteration } => {
                put_str(&mut w, run_key);
                w.extend_from_slice(&iteration.to_le_bytes());
            }
            Message::Error { code, message } => {
                w.push(*code as u8);
                w.extend_from_slice(message.as_bytes());
            }
        }
        WireMessage::new(self.msg_type(), w)
    }

    pub fn from_wire(frame: &WireMessage) -> Result<Self> {
        let mut r = Reader::new(&frame.payload);
        let m = match frame.msg_type {
            msg::FETCH_BASE => Message::FetchBase {
                run_key: r.string()?,
                contributor_id: r.string()?,
                cohort_size: r.u32()?,
            },
            msg::BASE => Message::Base {
                iteration: r.u64()?,
                base: r.params()?,
            },
            msg::FUSED => Message::Fused {
                iteration: r.u64()?,
                base: r.params()?,
            },
            msg::SUBMIT => {
                let run_key = r.string()?;
                let contributor_id = r.string()?;
                let iteration = r.u64()?;
                let task_id = r.string()?;
                let train_examples_seen = r.u64()?;
                let wall_time_ms = r.u64()?;
                let body = r.params()?;
                Message::Submit {
                    run_key,
                    contribution: Contribution {
                        contributor_id,
                        iteration,
                        task_id,
                        body,
                        train_examples_seen,
                        wall_time_ms,
                    },
                }
            }
            msg::ACK => Message::Ack(Ack {
                iteration: r.u64()?,
                received: r.u32()?,
                cohort_size: r.u32()?,
                already_recorded: match r.u8()? {
                    0 => false,
                    1 => true,
                    b => return Err(HubError::Malformed(format!("bad flag {b}"))),
                },
            }),
            msg::AWAIT_FUSION => Message::AwaitFusion {
                run_key: r.string()?,
                iteration: r.u64()?,
            },
            msg::ERROR => {
                let b = r.u8()?;
                let code = ErrorCode::from_u8(b).ok_or_else(|| HubError::Malformed(format!("unknown error code {b}")))?;
                let message = String::from_utf8(r.rest().to_vec())
                    .map_err(|_| HubError::Malformed("error message is not UTF-8".into()))?;
                Message::Error { code, message }
            }
            t => return Err(HubError::UnknownType(t)),
        };
        r.finish()?;
        Ok(m)
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    let len = u16::try_from(s.len()).expect("identifier shorter than 64 KiB");
    w.extend_from_slice(&len.to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(HubError::Malformed("payload too short".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes"));
        let bytes = self.take(len as usize)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| HubError::Malformed("string is not UTF-8".into()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn params(&mut self) -> Result<ParameterVector> {
        ParameterVector::from_bytes(self.rest()).map_err(|e| HubError::Malformed(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(HubError::Malformed("trailing bytes in payload".into()));
        }
        Ok(())
    }
}
