//! Frame layout: `"SPL1" | type u8 | session u64 LE | len u32 LE | payload | crc32 LE`.
//! The CRC covers everything before it, magic included.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SPL1";
pub const HEADER_LEN: usize = 17;
pub const TRAILER_LEN: usize = 4;
/// Largest accepted payload (16 MiB).
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    Activations = 2,
    Prediction = 3,
    GradRequest = 4,
    GradResponse = 5,
    Error = 6,
}

impl MsgType {
    pub const ALL: [MsgType; 6] = [
        MsgType::Hello,
        MsgType::Activations,
        MsgType::Prediction,
        MsgType::GradRequest,
        MsgType::GradResponse,
        MsgType::Error,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MsgType::Hello => "HELLO",
            MsgType::Activations => "ACTIVATIONS",
            MsgType::Prediction => "PREDICTION",
            MsgType::GradRequest => "GRAD_REQUEST",
            MsgType::GradResponse => "GRAD_RESPONSE",
            MsgType::Error => "ERROR",
        }
    }
}

impl TryFrom<u8> for MsgType {
    type Error = FrameError;

    fn try_from(b: u8) -> Result<Self, FrameError> {
        MsgType::ALL
            .into_iter()
            .find(|t| *t as u8 == b)
            .ok_or(FrameError::UnknownType(b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub session: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, session: u64, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            session,
            payload,
        }
    }

    /// Encoded size in bytes.
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + TRAILER_LEN
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    Oversize(usize),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
    #[error("skipped {0} bytes of garbage before a frame boundary")]
    Garbage(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    let len = frame.payload.len();
    if len > MAX_PAYLOAD {
        return Err(FrameError::Oversize(len));
    }
    let mut out = Vec::with_capacity(frame.wire_len());
    out.extend_from_slice(&MAGIC);
    out.push(frame.msg_type as u8);
    out.extend_from_slice(&frame.session.to_le_bytes());
    out.extend_from_slice(&(len as u32).to_le_bytes());
    out.extend_from_slice(&frame.payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Header {
    msg_type: u8,
    session: u64,
    len: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, FrameError> {
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    let len = u32::from_le_bytes(bytes[13..17].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::Oversize(len));
    }
    Ok(Header {
        msg_type: bytes[4],
        session: u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")),
        len,
    })
}

fn check_crc(bytes: &[u8], body_len: usize) -> Result<(), FrameError> {
    let stored = u32::from_le_bytes(bytes[body_len..body_len + 4].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(FrameError::Checksum { stored, computed });
    }
    Ok(())
}

/// Decodes a frame at the start of `bytes`; returns it with the number of
/// bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
    let h = parse_header(bytes)?;
    let total = HEADER_LEN + h.len + TRAILER_LEN;
    if bytes.len() < total {
        return Err(FrameError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    check_crc(bytes, HEADER_LEN + h.len)?;
    let msg_type = MsgType::try_from(h.msg_type)?;
    let payload = bytes[HEADER_LEN..HEADER_LEN + h.len].to_vec();
    Ok((Frame::new(msg_type, h.session, payload), total))
}

/// Decodes exactly one frame.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FrameError> {
    let (frame, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FrameError::Trailing(bytes.len() - used));
    }
    Ok(frame)
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<(), FrameError> {
    w.write_all(&encode_frame(frame)?)?;
    w.flush()?;
    Ok(())
}

/// Incremental decoder for a byte stream. After any error it has already
/// skipped ahead, so the caller can keep calling [`Decoder::next_frame`].
#[derive(Debug, Default)]
pub struct Decoder {
    buf: Vec<u8>,
}

impl Decoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes held but not yet decoded.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// `Ok(None)` means more input is needed.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, FrameError> {
        let skipped = self.align();
        if skipped > 0 {
            return Err(FrameError::Garbage(skipped));
        }
        if self.buf.len() < HEADER_LEN {
            return Ok(None);
        }
        let h = match parse_header(&self.buf) {
            Ok(h) => h,
            Err(e) => {
                self.buf.drain(..MAGIC.len());
                return Err(e);
            }
        };
        let total = HEADER_LEN + h.len + TRAILER_LEN;
        if self.buf.len() < total {
            return Ok(None);
        }
        if let Err(e) = check_crc(&self.buf, HEADER_LEN + h.len) {
            // The length may be corrupt too; rescan from just past this magic.
            self.buf.drain(..MAGIC.len());
            return Err(e);
        }
        let frame_bytes: Vec<u8> = self.buf.drain(..total).collect();
        let msg_type = MsgType::try_from(h.msg_type)?;
        let payload = frame_bytes[HEADER_LEN..HEADER_LEN + h.len].to_vec();
        Ok(Some(Frame::new(msg_type, h.session, payload)))
    }

    /// Drops bytes before the next magic, keeping a trailing partial match.
    fn align(&mut self) -> usize {
        if let Some(pos) = self.buf.windows(MAGIC.len()).position(|w| w == MAGIC) {
            self.buf.drain(..pos);
            return pos;
        }
        let keep = (1..MAGIC.len())
            .rev()
            .find(|&k| self.buf.len() >= k && self.buf[self.buf.len() - k..] == MAGIC[..k])
            .unwrap_or(0);
        let skip = self.buf.len() - keep;
        self.buf.drain(..skip);
        skip
    }
}

/// Blocking read of one frame. Stream errors, including a peer that closes
/// mid-frame, surface as [`FrameError::Io`]; resynchronizing on garbage is
/// left to [`Decoder`].
pub fn read_frame(r: &mut impl Read) -> Result<Frame, FrameError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let h = parse_header(&header)?;
    let mut rest = vec![0u8; h.len + TRAILER_LEN];
    r.read_exact(&mut rest)?;
    let mut all = header.to_vec();
    all.extend_from_slice(&rest);
    check_crc(&all, HEADER_LEN + h.len)?;
    let msg_type = MsgType::try_from(h.msg_type)?;
    all.truncate(HEADER_LEN + h.len);
    all.drain(..HEADER_LEN);
    Ok(Frame::new(msg_type, h.session, all))
}
