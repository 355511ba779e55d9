//! Bit-exact wire codec for bundle frames.
//!
//! Links are byte streams, so frames can split across reads; decoding is
//! incremental and consumes nothing until a whole frame is available. All
//! integers are big-endian.

use std::fmt;

use crate::{ChannelId, LinkId, Seq};

/// Hard wire limit for a DATA payload. The configured chunk size must not
/// exceed it.
pub const MAX_PAYLOAD: usize = 1200;
/// Hard wire limit for an OPEN target string.
pub const MAX_TARGET: usize = 512;

pub const TYPE_DATA: u8 = 0x01;
pub const TYPE_ACK: u8 = 0x02;
pub const TYPE_OPEN: u8 = 0x03;
pub const TYPE_OPEN_RESULT: u8 = 0x04;
pub const TYPE_WINDOW: u8 = 0x05;
pub const TYPE_CLOSE: u8 = 0x06;
pub const TYPE_HELLO: u8 = 0x07;

/// OPEN_RESULT codes.
pub const OPEN_OK: u8 = 0;
pub const OPEN_REFUSED: u8 = 1;
pub const OPEN_UNREACHABLE: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Data {
        channel: ChannelId,
        seq: Seq,
        sent_at_us: u64,
        payload: Vec<u8>,
    },
    Ack {
        cum_seq: Seq,
        echo_ts_us: u64,
        hold_delay_us: u32,
    },
    Open {
        channel: ChannelId,
        target: String,
    },
    OpenResult {
        channel: ChannelId,
        code: u8,
    },
    Window {
        channel: ChannelId,
        increment: u32,
    },
    Close {
        channel: ChannelId,
    },
    /// First frame on a fresh connection: associates the link with a bundle.
    Hello {
        token: [u8; 16],
        link_id: LinkId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodecError {
    UnknownType(u8),
    EmptyPayload,
    PayloadTooLong(usize),
    TargetTooLong(usize),
    TargetNotUtf8,
}

impl fmt::Display for CodecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecError::UnknownType(t) => write!(f, "unknown frame type 0x{t:02x}"),
            CodecError::EmptyPayload => write!(f, "zero-length DATA payload"),
            CodecError::PayloadTooLong(n) => write!(f, "payload of {n} bytes exceeds limit"),
            CodecError::TargetTooLong(n) => write!(f, "target of {n} bytes exceeds limit"),
            CodecError::TargetNotUtf8 => write!(f, "target is not valid UTF-8"),
        }
    }
}

impl std::error::Error for CodecError {}

impl Frame {
    /// Wire size of this frame once encoded.
    pub fn encoded_len(&self) -> usize {
        match self {
            Frame::Data { payload, .. } => 1 + 4 + 8 + 8 + 2 + payload.len(),
            Frame::Ack { .. } => 1 + 8 + 8 + 4,
            Frame::Open { target, .. } => 1 + 4 + 2 + target.len(),
            Frame::OpenResult { .. } => 1 + 4 + 1,
            Frame::Window { .. } => 1 + 4 + 4,
            Frame::Close { .. } => 1 + 4,
            Frame::Hello { .. } => 1 + 16 + 1,
        }
    }
}

pub fn encode(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame.encoded_len());
    match frame {
        Frame::Data {
            channel,
            seq,
            sent_at_us,
            payload,
        } => {
            debug_assert!(!payload.is_empty() && payload.len() <= MAX_PAYLOAD);
            out.push(TYPE_DATA);
            out.extend_from_slice(&channel.to_be_bytes());
            out.extend_from_slice(&seq.to_be_bytes());
            out.extend_from_slice(&sent_at_us.to_be_bytes());
            out.extend_from_slice(&(payload.len() as u16).to_be_bytes());
            out.extend_from_slice(payload);
        }
        Frame::Ack {
            cum_seq,
            echo_ts_us,
            hold_delay_us,
        } => {
            out.push(TYPE_ACK);
            out.extend_from_slice(&cum_seq.to_be_bytes());
            out.extend_from_slice(&echo_ts_us.to_be_bytes());
            out.extend_from_slice(&hold_delay_us.to_be_bytes());
        }
        Frame::Open { channel, target } => {
            debug_assert!(target.len() <= MAX_TARGET);
            out.push(TYPE_OPEN);
            out.extend_from_slice(&channel.to_be_bytes());
            out.extend_from_slice(&(target.len() as u16).to_be_bytes());
            out.extend_from_slice(target.as_bytes());
        }
        Frame::OpenResult { channel, code } => {
            out.push(TYPE_OPEN_RESULT);
            out.extend_from_slice(&channel.to_be_bytes());
            out.push(*code);
        }
        Frame::Window { channel, increment } => {
            out.push(TYPE_WINDOW);
            out.extend_from_slice(&channel.to_be_bytes());
            out.extend_from_slice(&increment.to_be_bytes());
        }
        Frame::Close { channel } => {
            out.push(TYPE_CLOSE);
            out.extend_from_slice(&channel.to_be_bytes());
        }
        Frame::Hello { token, link_id } => {
            out.push(TYPE_HELLO);
            out.extend_from_slice(token);
            out.push(*link_id);
        }
    }
    out
}

/// Tries to decode one frame from the front of `buf`.
///
/// Returns `Ok(None)` when the buffer holds only a partial frame; nothing is
/// consumed in that case. On success the returned count is exactly the wire
/// size of the decoded frame.
pub fn decode(buf: &[u8]) -> Result<Option<(Frame, usize)>, CodecError> {
    if buf.is_empty() {
        return Ok(None);
    }
    let typ = buf[0];
    match typ {
        TYPE_DATA => {
            const HDR: usize = 1 + 4 + 8 + 8 + 2;
            if buf.len() < HDR {
                return Ok(None);
            }
            let channel = u32::from_be_bytes(buf[1..5].try_into().unwrap());
            let seq = u64::from_be_bytes(buf[5..13].try_into().unwrap());
            let sent_at_us = u64::from_be_bytes(buf[13..21].try_into().unwrap());
            let len = u16::from_be_bytes(buf[21..23].try_into().unwrap()) as usize;
            if len == 0 {
                return Err(CodecError::EmptyPayload);
            }
            if len > MAX_PAYLOAD {
                return Err(CodecError::PayloadTooLong(len));
            }
            if buf.len() < HDR + len {
                return Ok(None);
            }
            let payload = buf[HDR..HDR + len].to_vec();
            Ok(Some((
                Frame::Data {
                    channel,
                    seq,
                    sent_at_us,
                    payload,
                },
                HDR + len,
            )))
        }
        TYPE_ACK => {
            const LEN: usize = 1 + 8 + 8 + 4;
            if buf.len() < LEN {
                return Ok(None);
            }
            let cum_seq = u64::from_be_bytes(buf[1..9].try_into().unwrap());
            let echo_ts_us = u64::from_be_bytes(buf[9..17].try_into().unwrap());
            let hold_delay_us = u32::from_be_bytes(buf[17..21].try_into().unwrap());
            Ok(Some((
                Frame::Ack {
                    cum_seq,
                    echo_ts_us,
                    hold_delay_us,
                },
                LEN,
            )))
        }
        TYPE_OPEN => {
            const HDR: usize = 1 + 4 + 2;
            if buf.len() < HDR {
                return Ok(None);
            }
            let channel = u32::from_be_bytes(buf[1..5].try_into().unwrap());
            let len = u16::from_be_bytes(buf[5..7].try_into().unwrap()) as usize;
            if len > MAX_TARGET {
                return Err(CodecError::TargetTooLong(len));
            }
            if buf.len() < HDR + len {
                return Ok(None);
            }
            let target = std::str::from_utf8(&buf[HDR..HDR + len])
                .map_err(|_| CodecError::TargetNotUtf8)?
                .to_owned();
            Ok(Some((Frame::Open { channel, target }, HDR + len)))
        }
        TYPE_OPEN_RESULT => {
            const LEN: usize = 1 + 4 + 1;
            if buf.len() < LEN {
                return Ok(None);
            }
            let channel = u32::from_be_bytes(buf[1..5].try_into().unwrap());
            Ok(Some((
                Frame::OpenResult {
                    channel,
                    code: buf[5],
                },
                LEN,
            )))
        }
        TYPE_WINDOW => {
            const LEN: usize = 1 + 4 + 4;
            if buf.len() < LEN {
                return Ok(None);
            }
            let channel = u32::from_be_bytes(buf[1..5].try_into().unwrap());
            let increment = u32::from_be_bytes(buf[5..9].try_into().unwrap());
            Ok(Some((Frame::Window { channel, increment }, LEN)))
        }
        TYPE_CLOSE => {
            const LEN: usize = 1 + 4;
            if buf.len() < LEN {
                return Ok(None);
            }
            let channel = u32::from_be_bytes(buf[1..5].try_into().unwrap());
            Ok(Some((Frame::Close { channel }, LEN)))
        }
        TYPE_HELLO => {
            const LEN: usize = 1 + 16 + 1;
            if buf.len() < LEN {
                return Ok(None);
            }
            let mut token = [0u8; 16];
            token.copy_from_slice(&buf[1..17]);
            Ok(Some((
                Frame::Hello {
                    token,
                    link_id: buf[17],
                },
                LEN,
            )))
        }
        other => Err(CodecError::UnknownType(other)),
    }
}

/// Per-link incremental decoder holding the bytes of a partially received
/// frame between reads.
#[derive(Debug, Default)]
pub struct Decoder {
    buf: Vec<u8>,
    cursor: usize,
}

impl Decoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Decodes the next complete frame, if any.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, CodecError> {
        match decode(&self.buf[self.cursor..])? {
            Some((frame, consumed)) => {
                self.cursor += consumed;
                if self.cursor >= self.buf.len() / 2 && self.cursor > 4096 {
                    self.buf.drain(..self.cursor);
                    self.cursor = 0;
                }
                Ok(Some(frame))
            }
            None => Ok(None),
        }
    }
}
