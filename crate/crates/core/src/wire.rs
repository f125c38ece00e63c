//! Wire encoding for everything nodes put on a link.
//!
//! Every message starts with a one-byte kind. The kind is visible to a
//! passive observer; everything a protocol wants hidden sits inside sealed
//! envelopes.

use bytes::Bytes;
use thiserror::Error;

use crate::crypto::{PeerId, ID_LEN};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated message")]
    Truncated,
    #[error("unknown message kind {0:#04x}")]
    UnknownKind(u8),
    #[error("trailing bytes after message")]
    Trailing,
    #[error("invalid field: {0}")]
    Invalid(&'static str),
}

pub type Result<T, E = WireError> = std::result::Result<T, E>;

pub const ROUTE_TAG_LEN: usize = 16;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            buf: Vec::with_capacity(n),
        }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn raw(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn peer(&mut self, p: &PeerId) -> &mut Self {
        self.raw(p.as_bytes())
    }

    /// Length-prefixed byte string.
    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.raw(b)
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(WireError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn peer(&mut self) -> Result<PeerId> {
        Ok(PeerId::from_bytes(self.array::<ID_LEN>()?))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    pub fn finish(self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::Trailing)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Onion = 1,
    ReplyNaive = 2,
    ReplyReenc = 3,
    ShuffleRequest = 4,
    ShuffleReply = 5,
    Aggregation = 6,
    Flood = 7,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            1 => Self::Onion,
            2 => Self::ReplyNaive,
            3 => Self::ReplyReenc,
            4 => Self::ShuffleRequest,
            5 => Self::ShuffleReply,
            6 => Self::Aggregation,
            7 => Self::Flood,
            other => return Err(WireError::UnknownKind(other)),
        })
    }

    /// Kind of a wire message as an observer reads it off the first byte.
    pub fn of_wire(wire: &[u8]) -> Option<Self> {
        wire.first().and_then(|b| Self::from_byte(*b).ok())
    }

    pub fn is_reply(self) -> bool {
        matches!(self, Self::ReplyNaive | Self::ReplyReenc)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Onion => "onion",
            Self::ReplyNaive => "reply_naive",
            Self::ReplyReenc => "reply_reenc",
            Self::ShuffleRequest => "shuffle_request",
            Self::ShuffleReply => "shuffle_reply",
            Self::Aggregation => "aggregation",
            Self::Flood => "flood",
        }
    }
}

/// A decoded link message. Payload fields stay as raw bytes; each protocol
/// module owns the encoding of its own payloads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Onion(Vec<u8>),
    ReplyNaive {
        route_tag: [u8; ROUTE_TAG_LEN],
        body: Vec<u8>,
    },
    ReplyReenc(Vec<u8>),
    ShuffleRequest(Vec<u8>),
    ShuffleReply(Vec<u8>),
    Aggregation(Vec<u8>),
    Flood(Vec<u8>),
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Self::Onion(_) => MessageKind::Onion,
            Self::ReplyNaive { .. } => MessageKind::ReplyNaive,
            Self::ReplyReenc(_) => MessageKind::ReplyReenc,
            Self::ShuffleRequest(_) => MessageKind::ShuffleRequest,
            Self::ShuffleReply(_) => MessageKind::ShuffleReply,
            Self::Aggregation(_) => MessageKind::Aggregation,
            Self::Flood(_) => MessageKind::Flood,
        }
    }

    pub fn encode(&self) -> Bytes {
        let mut w = Writer::new();
        w.u8(self.kind() as u8);
        match self {
            Self::ReplyNaive { route_tag, body } => {
                w.raw(route_tag).raw(body);
            }
            Self::Onion(b)
            | Self::ReplyReenc(b)
            | Self::ShuffleRequest(b)
            | Self::ShuffleReply(b)
            | Self::Aggregation(b)
            | Self::Flood(b) => {
                w.raw(b);
            }
        }
        Bytes::from(w.finish())
    }

    pub fn decode(wire: &[u8]) -> Result<Self> {
        let mut r = Reader::new(wire);
        let kind = MessageKind::from_byte(r.u8()?)?;
        Ok(match kind {
            MessageKind::Onion => Self::Onion(r.rest().to_vec()),
            MessageKind::ReplyNaive => {
                let route_tag = r.array()?;
                Self::ReplyNaive {
                    route_tag,
                    body: r.rest().to_vec(),
                }
            }
            MessageKind::ReplyReenc => Self::ReplyReenc(r.rest().to_vec()),
            MessageKind::ShuffleRequest => Self::ShuffleRequest(r.rest().to_vec()),
            MessageKind::ShuffleReply => Self::ShuffleReply(r.rest().to_vec()),
            MessageKind::Aggregation => Self::Aggregation(r.rest().to_vec()),
            MessageKind::Flood => Self::Flood(r.rest().to_vec()),
        })
    }
}
