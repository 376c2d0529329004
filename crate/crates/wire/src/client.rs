//! Client side: runs the front half locally and talks to a server.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use splitinfer_core::linalg::Matrix;
use splitinfer_core::rng::mix64;
use splitinfer_core::splitexec::{ClientHalf, ClientTrainer, GradientBatch};

use crate::frame::{encode_frame, Decoder, Frame, MsgType};
use crate::payload::{
    to_f32, to_f64, ActivationsPayload, ErrorPayload, Fingerprint, GradRequest, GradResponse, PredictionPayload,
    ServerInfo,
};
use crate::WireError;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

fn fresh_session() -> u64 {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    mix64(nanos ^ (u64::from(std::process::id()) << 32) ^ COUNTER.fetch_add(1, Ordering::Relaxed))
}

fn map_io(e: io::Error) -> WireError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => WireError::Timeout,
        io::ErrorKind::UnexpectedEof => WireError::Closed,
        _ => WireError::Io(e),
    }
}

/// One TCP connection speaking the frame protocol.
#[derive(Debug)]
pub struct Connection {
    stream: TcpStream,
    decoder: Decoder,
    session: u64,
}

impl Connection {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, WireError> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let mut last = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(timeout))?;
                    stream.set_write_timeout(Some(timeout))?;
                    stream.set_nodelay(true)?;
                    return Ok(Self {
                        stream,
                        decoder: Decoder::new(),
                        session: fresh_session(),
                    });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.map_or(WireError::Config("address resolved to nothing".into()), WireError::Io))
    }

    pub fn with_session(mut self, session: u64) -> Self {
        self.session = session;
        self
    }

    pub fn session(&self) -> u64 {
        self.session
    }

    /// Writes raw bytes; used to exercise the server with malformed input.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<(), WireError> {
        self.stream.write_all(bytes).map_err(map_io)?;
        self.stream.flush().map_err(map_io)
    }

    pub fn send(&mut self, frame: &Frame) -> Result<(), WireError> {
        let bytes = encode_frame(frame)?;
        self.send_raw(&bytes)
    }

    /// Next frame from the server, including ERROR frames.
    pub fn recv(&mut self) -> Result<Frame, WireError> {
        let mut buf = [0u8; 64 * 1024];
        loop {
            if let Some(frame) = self.decoder.next_frame()? {
                return Ok(frame);
            }
            let n = self.stream.read(&mut buf).map_err(map_io)?;
            if n == 0 {
                return Err(WireError::Closed);
            }
            self.decoder.feed(&buf[..n]);
        }
    }

    /// Sends a frame on this session and waits for a reply of type
    /// `expect`; an ERROR reply becomes [`WireError::Remote`].
    pub fn request(&mut self, msg_type: MsgType, payload: Vec<u8>, expect: MsgType) -> Result<Frame, WireError> {
        self.send(&Frame::new(msg_type, self.session, payload))?;
        let reply = self.recv()?;
        match reply.msg_type {
            t if t == expect => Ok(reply),
            MsgType::Error => Err(WireError::Remote(ErrorPayload::decode(&reply.payload)?)),
            found => Err(WireError::Unexpected { expected: expect, found }),
        }
    }

    pub fn hello(&mut self) -> Result<ServerInfo, WireError> {
        let reply = self.request(MsgType::Hello, Vec::new(), MsgType::Hello)?;
        Ok(ServerInfo::decode(&reply.payload)?)
    }

    pub fn predict(&mut self, payload: &ActivationsPayload) -> Result<Vec<f64>, WireError> {
        let reply = self.request(MsgType::Activations, payload.encode(), MsgType::Prediction)?;
        Ok(to_f64(&PredictionPayload::decode(&reply.payload)?.probabilities))
    }

    pub fn grad_step(&mut self, req: &GradRequest) -> Result<GradResponse, WireError> {
        let reply = self.request(MsgType::GradRequest, req.encode(), MsgType::GradResponse)?;
        Ok(GradResponse::decode(&reply.payload)?)
    }
}

/// Builds the ACTIVATIONS payload for `x`: the front half runs here and only
/// its (masked) output is placed in the payload.
pub fn activations_payload(half: &ClientHalf, x: &[f64], fingerprint: Fingerprint) -> Result<ActivationsPayload, WireError> {
    let out = half.forward(x)?;
    let cut = u16::try_from(half.plan().cut).map_err(|_| WireError::Config("cut index exceeds u16".into()))?;
    Ok(ActivationsPayload::new(cut, to_f32(&out.activations), out.mask.seed, fingerprint))
}

/// A front half bound to a server connection.
#[derive(Debug)]
pub struct RemoteModel {
    conn: Connection,
    half: ClientHalf,
    fingerprint: Fingerprint,
}

impl RemoteModel {
    /// `fingerprint` identifies the rear half this front was split with.
    pub fn new(conn: Connection, half: ClientHalf, fingerprint: Fingerprint) -> Self {
        Self {
            conn,
            half,
            fingerprint,
        }
    }

    pub fn half(&self) -> &ClientHalf {
        &self.half
    }

    pub fn connection(&mut self) -> &mut Connection {
        &mut self.conn
    }

    /// Class probabilities for `x`.
    pub fn query(&mut self, x: &[f64]) -> Result<Vec<f64>, WireError> {
        let payload = activations_payload(&self.half, x, self.fingerprint)?;
        self.conn.predict(&payload)
    }
}

/// One-shot query over a fresh connection.
pub fn query(
    addr: impl ToSocketAddrs,
    half: &ClientHalf,
    fingerprint: Fingerprint,
    x: &[f64],
    timeout: Duration,
) -> Result<Vec<f64>, WireError> {
    let mut conn = Connection::connect(addr, timeout)?;
    let payload = activations_payload(half, x, fingerprint)?;
    conn.predict(&payload)
}

/// One split-training step against a remote server; returns the batch loss.
/// Activations and gradients cross the wire as f32.
pub fn remote_split_step(
    conn: &mut Connection,
    trainer: &mut ClientTrainer,
    cut: u16,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<f64, WireError> {
    let batch = trainer.forward(inputs)?;
    let labels = labels
        .iter()
        .map(|&l| u16::try_from(l).map_err(|_| WireError::Config(format!("label {l} exceeds u16"))))
        .collect::<Result<Vec<_>, _>>()?;
    let req = GradRequest {
        step: batch.step,
        mask_digest: batch.mask_digest,
        cut,
        rows: batch.values.rows() as u32,
        width: batch.values.cols() as u32,
        labels,
        values: to_f32(batch.values.as_slice()),
    };
    let resp = conn.grad_step(&req)?;
    let grad = Matrix::from_vec(resp.rows as usize, resp.width as usize, to_f64(&resp.grad))
        .map_err(|e| WireError::Config(e.to_string()))?;
    trainer.apply_gradient(&GradientBatch {
        step: resp.step,
        mask_digest: resp.mask_digest,
        grad,
        loss: resp.loss,
    })?;
    Ok(resp.loss)
}
