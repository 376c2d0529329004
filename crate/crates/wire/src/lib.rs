//! Length-prefixed TCP framing between the client and server halves of a
//! split network. The byte layout is described in `PROTOCOL.md`.
//!
//! Transport is plaintext on purpose: the only values that leave the client
//! are the masked first-layer activations, and they are meant to be safe to
//! observe.

pub mod client;
pub mod frame;
pub mod payload;
pub mod server;

use std::io;

use thiserror::Error;

use splitinfer_core::splitexec::SplitError;

pub use client::{activations_payload, query, remote_split_step, Connection, RemoteModel, DEFAULT_TIMEOUT};
pub use frame::{decode_frame, encode_frame, Decoder, Frame, FrameError, MsgType, MAX_PAYLOAD};
pub use payload::{ActivationsPayload, ErrorCode, ErrorPayload, Fingerprint, PayloadError, ServerInfo};
pub use server::{serve, Handler, ServerConfig, ServerHandle};

#[derive(Debug, Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("timed out waiting for the peer")]
    Timeout,
    #[error("connection closed by peer")]
    Closed,
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Payload(#[from] PayloadError),
    #[error("server error ({}): {}", .0.kind().map_or("unknown", |k| k.name()), .0.message)]
    Remote(ErrorPayload),
    #[error("expected a {} frame, got {}", .expected.name(), .found.name())]
    Unexpected { expected: MsgType, found: MsgType },
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error("{0}")]
    Config(String),
}

impl WireError {
    /// The server's error code, if this is a remote error.
    pub fn remote_code(&self) -> Option<ErrorCode> {
        match self {
            WireError::Remote(p) => p.kind(),
            _ => None,
        }
    }
}
