//! Typed payloads. All integers and floats are little-endian; activations,
//! probabilities and gradients travel as f32.

use thiserror::Error;

pub const PROTOCOL_VERSION: u16 = 1;
pub type Fingerprint = [u8; 32];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("{what}: need {needed} bytes, have {available}")]
    Short {
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("{what}: {extra} trailing bytes")]
    Trailing { what: &'static str, extra: usize },
    #[error("{what}: declared size overflows")]
    Overflow { what: &'static str },
    #[error("error message is not UTF-8")]
    Utf8,
}

struct Reader<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(what: &'static str, bytes: &'a [u8]) -> Self {
        Self { what, bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], PayloadError> {
        let end = self.pos.checked_add(n).ok_or(PayloadError::Overflow { what: self.what })?;
        if end > self.bytes.len() {
            return Err(PayloadError::Short {
                what: self.what,
                needed: end,
                available: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, PayloadError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, PayloadError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, PayloadError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn fingerprint(&mut self) -> Result<Fingerprint, PayloadError> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, PayloadError> {
        let len = n.checked_mul(4).ok_or(PayloadError::Overflow { what: self.what })?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn u16s(&mut self, n: usize) -> Result<Vec<u16>, PayloadError> {
        let len = n.checked_mul(2).ok_or(PayloadError::Overflow { what: self.what })?;
        Ok(self
            .take(len)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
            .collect())
    }

    fn finish(self) -> Result<(), PayloadError> {
        if self.pos != self.bytes.len() {
            return Err(PayloadError::Trailing {
                what: self.what,
                extra: self.bytes.len() - self.pos,
            });
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Rounds to the nearest f32.
pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Server description sent in reply to HELLO. A client HELLO has an empty
/// payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerInfo {
    pub version: u16,
    pub cut: u16,
    pub width: u32,
    pub classes: u32,
    pub fingerprint: Fingerprint,
    pub training: bool,
}

impl ServerInfo {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(45);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.cut.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.classes.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.push(self.training as u8);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new("HELLO", bytes);
        let info = Self {
            version: r.u16()?,
            cut: r.u16()?,
            width: r.u32()?,
            classes: r.u32()?,
            fingerprint: r.fingerprint()?,
            training: r.take(1)?[0] != 0,
        };
        r.finish()?;
        Ok(info)
    }
}

/// One masked activation vector. Layout:
/// `cut u16 | width u32 | mask_seed u64 | fingerprint [32] | width x f32`.
/// Dropped positions are already zero; the positions themselves are not sent.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationsPayload {
    pub cut: u16,
    pub width: u32,
    /// Informational echo of the mask seed.
    pub mask_seed: u64,
    /// Fingerprint of the rear half the client expects.
    pub fingerprint: Fingerprint,
    pub values: Vec<f32>,
}

impl ActivationsPayload {
    pub const FIXED_LEN: usize = 2 + 4 + 8 + 32;

    pub fn new(cut: u16, values: Vec<f32>, mask_seed: u64, fingerprint: Fingerprint) -> Self {
        Self {
            cut,
            width: values.len() as u32,
            mask_seed,
            fingerprint,
            values,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::FIXED_LEN + 4 * self.values.len());
        out.extend_from_slice(&self.cut.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.mask_seed.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        put_f32s(&mut out, &self.values);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new("ACTIVATIONS", bytes);
        let cut = r.u16()?;
        let width = r.u32()?;
        let mask_seed = r.u64()?;
        let fingerprint = r.fingerprint()?;
        let values = r.f32s(width as usize)?;
        r.finish()?;
        Ok(Self {
            cut,
            width,
            mask_seed,
            fingerprint,
            values,
        })
    }
}

/// Class probabilities: `count u32 | count x f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPayload {
    pub probabilities: Vec<f32>,
}

impl PredictionPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.probabilities.len());
        out.extend_from_slice(&(self.probabilities.len() as u32).to_le_bytes());
        put_f32s(&mut out, &self.probabilities);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new("PREDICTION", bytes);
        let n = r.u32()? as usize;
        let probabilities = r.f32s(n)?;
        r.finish()?;
        Ok(Self { probabilities })
    }
}

/// One split-training step, client to server. Layout:
/// `step u64 | mask_digest u64 | cut u16 | rows u32 | width u32 |
///  rows x u16 labels | rows*width x f32 activations (row-major)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradRequest {
    pub step: u64,
    pub mask_digest: u64,
    pub cut: u16,
    pub rows: u32,
    pub width: u32,
    pub labels: Vec<u16>,
    pub values: Vec<f32>,
}

impl GradRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(26 + 2 * self.labels.len() + 4 * self.values.len());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.mask_digest.to_le_bytes());
        out.extend_from_slice(&self.cut.to_le_bytes());
        out.extend_from_slice(&self.rows.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        put_f32s(&mut out, &self.values);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PayloadError> {
        const WHAT: &str = "GRAD_REQUEST";
        let mut r = Reader::new(WHAT, bytes);
        let step = r.u64()?;
        let mask_digest = r.u64()?;
        let cut = r.u16()?;
        let rows = r.u32()?;
        let width = r.u32()?;
        let labels = r.u16s(rows as usize)?;
        let n = (rows as usize)
            .checked_mul(width as usize)
            .ok_or(PayloadError::Overflow { what: WHAT })?;
        let values = r.f32s(n)?;
        r.finish()?;
        Ok(Self {
            step,
            mask_digest,
            cut,
            rows,
            width,
            labels,
            values,
        })
    }
}

/// Gradient with respect to the transmitted activations. Layout:
/// `step u64 | mask_digest u64 | loss f64 | rows u32 | width u32 | rows*width x f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradResponse {
    pub step: u64,
    pub mask_digest: u64,
    pub loss: f64,
    pub rows: u32,
    pub width: u32,
    pub grad: Vec<f32>,
}

impl GradResponse {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * self.grad.len());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.mask_digest.to_le_bytes());
        out.extend_from_slice(&self.loss.to_bits().to_le_bytes());
        out.extend_from_slice(&self.rows.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        put_f32s(&mut out, &self.grad);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PayloadError> {
        const WHAT: &str = "GRAD_RESPONSE";
        let mut r = Reader::new(WHAT, bytes);
        let step = r.u64()?;
        let mask_digest = r.u64()?;
        let loss = r.f64()?;
        let rows = r.u32()?;
        let width = r.u32()?;
        let n = (rows as usize)
            .checked_mul(width as usize)
            .ok_or(PayloadError::Overflow { what: WHAT })?;
        let grad = r.f32s(n)?;
        r.finish()?;
        Ok(Self {
            step,
            mask_digest,
            loss,
            rows,
            width,
            grad,
        })
    }
}

/// Error codes carried by ERROR frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ErrorCode {
    Malformed = 1,
    UnknownType = 2,
    Checksum = 3,
    Oversize = 4,
    Fingerprint = 5,
    Width = 6,
    Cut = 7,
    TrainingDisabled = 8,
    Step = 9,
    Unexpected = 10,
    Internal = 11,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 11] = [
        ErrorCode::Malformed,
        ErrorCode::UnknownType,
        ErrorCode::Checksum,
        ErrorCode::Oversize,
        ErrorCode::Fingerprint,
        ErrorCode::Width,
        ErrorCode::Cut,
        ErrorCode::TrainingDisabled,
        ErrorCode::Step,
        ErrorCode::Unexpected,
        ErrorCode::Internal,
    ];

    pub fn from_u16(v: u16) -> Option<Self> {
        Self::ALL.into_iter().find(|c| *c as u16 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCode::Malformed => "malformed",
            ErrorCode::UnknownType => "unknown-type",
            ErrorCode::Checksum => "checksum",
            ErrorCode::Oversize => "oversize",
            ErrorCode::Fingerprint => "fingerprint",
            ErrorCode::Width => "width",
            ErrorCode::Cut => "cut",
            ErrorCode::TrainingDisabled => "training-disabled",
            ErrorCode::Step => "step",
            ErrorCode::Unexpected => "unexpected",
            ErrorCode::Internal => "internal",
        }
    }
}

/// `code u16 | UTF-8 message` (the rest of the payload).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorPayload {
    pub code: u16,
    pub message: String,
}

impl ErrorPayload {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code: code as u16,
            message: message.into(),
        }
    }

    pub fn kind(&self) -> Option<ErrorCode> {
        ErrorCode::from_u16(self.code)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.code.to_le_bytes().to_vec();
        out.extend_from_slice(self.message.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new("ERROR", bytes);
        let code = r.u16()?;
        let message = std::str::from_utf8(&bytes[2..]).map_err(|_| PayloadError::Utf8)?.to_string();
        Ok(Self { code, message })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activations_round_trip_and_length() {
        let p = ActivationsPayload::new(1, vec![0.5, 0.0, -1.25], 42, [7; 32]);
        let bytes = p.encode();
        assert_eq!(bytes.len(), ActivationsPayload::FIXED_LEN + 12);
        assert_eq!(ActivationsPayload::decode(&bytes).unwrap(), p);
        assert!(matches!(
            ActivationsPayload::decode(&bytes[..bytes.len() - 1]),
            Err(PayloadError::Short { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            ActivationsPayload::decode(&extra),
            Err(PayloadError::Trailing { extra: 1, .. })
        ));
    }

    #[test]
    fn huge_declared_width_is_short_not_oom() {
        let mut bytes = ActivationsPayload::new(1, vec![], 0, [0; 32]).encode();
        bytes[2..6].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(ActivationsPayload::decode(&bytes), Err(PayloadError::Short { .. })));
    }

    #[test]
    fn grad_messages_round_trip() {
        let req = GradRequest {
            step: 3,
            mask_digest: 99,
            cut: 1,
            rows: 2,
            width: 2,
            labels: vec![4, 9],
            values: vec![1.0, 2.0, 3.0, 4.0],
        };
        assert_eq!(GradRequest::decode(&req.encode()).unwrap(), req);
        let resp = GradResponse {
            step: 3,
            mask_digest: 99,
            loss: 0.123,
            rows: 1,
            width: 3,
            grad: vec![0.1, -0.2, 0.3],
        };
        assert_eq!(GradResponse::decode(&resp.encode()).unwrap(), resp);
    }

    #[test]
    fn error_and_hello_round_trip() {
        let e = ErrorPayload::new(ErrorCode::Width, "expected 800, got 784");
        assert_eq!(ErrorPayload::decode(&e.encode()).unwrap(), e);
        assert_eq!(e.kind(), Some(ErrorCode::Width));
        let info = ServerInfo {
            version: PROTOCOL_VERSION,
            cut: 1,
            width: 800,
            classes: 10,
            fingerprint: [3; 32],
            training: true,
        };
        assert_eq!(ServerInfo::decode(&info.encode()).unwrap(), info);
    }
}
