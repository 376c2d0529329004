//! Threaded TCP server holding the rear half of a split model.

use std::collections::HashMap;
use std::io::{self, Read};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use splitinfer_core::linalg::Matrix;
use splitinfer_core::network::{MlpModel, NetworkError, TrainConfig};
use splitinfer_core::splitexec::{ActivationBatch, ServerHalf, ServerTrainer, SplitError};

use crate::frame::{write_frame, Decoder, Frame, FrameError, MsgType};
use crate::payload::{
    to_f32, to_f64, ActivationsPayload, ErrorCode, ErrorPayload, GradRequest, GradResponse, PredictionPayload,
    ServerInfo, PROTOCOL_VERSION,
};
use crate::WireError;

const POLL: Duration = Duration::from_millis(100);

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Enables GRAD_REQUEST handling with these optimizer settings.
    pub training: Option<TrainConfig>,
    /// Connections silent for this long are closed.
    pub idle_timeout: Duration,
    /// Upper bound on concurrent split-training sessions.
    pub max_sessions: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            training: None,
            idle_timeout: Duration::from_secs(60),
            max_sessions: 1024,
        }
    }
}

/// Counters for tests and operators.
#[derive(Debug, Default)]
pub struct Stats {
    pub connections: AtomicU64,
    pub frames: AtomicU64,
    pub errors: AtomicU64,
}

/// Request handling without the socket: one frame in, one frame out.
#[derive(Debug)]
pub struct Handler {
    half: ServerHalf,
    cut: u16,
    config: ServerConfig,
    sessions: Mutex<HashMap<u64, Arc<Mutex<ServerTrainer>>>>,
}

fn error_frame(session: u64, code: ErrorCode, message: impl Into<String>) -> Frame {
    Frame::new(MsgType::Error, session, ErrorPayload::new(code, message).encode())
}

impl Handler {
    pub fn new(rear: MlpModel, cut: u16, config: ServerConfig) -> Self {
        Self {
            half: ServerHalf::new(rear),
            cut,
            config,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn info(&self) -> ServerInfo {
        ServerInfo {
            version: PROTOCOL_VERSION,
            cut: self.cut,
            width: self.half.boundary_width() as u32,
            classes: self.half.rear().output_dim() as u32,
            fingerprint: self.half.fingerprint(),
            training: self.config.training.is_some(),
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session lock").len()
    }

    pub fn handle(&self, frame: &Frame) -> Frame {
        let s = frame.session;
        match frame.msg_type {
            MsgType::Hello => Frame::new(MsgType::Hello, s, self.info().encode()),
            MsgType::Activations => self.predict(frame).unwrap_or_else(|e| e),
            MsgType::GradRequest => self.train_step(frame).unwrap_or_else(|e| e),
            other => error_frame(s, ErrorCode::Unexpected, format!("server does not accept {}", other.name())),
        }
    }

    /// Reply for a stream that failed to decode.
    pub fn decode_error(&self, e: &FrameError) -> Frame {
        let code = match e {
            FrameError::UnknownType(_) => ErrorCode::UnknownType,
            FrameError::Checksum { .. } => ErrorCode::Checksum,
            FrameError::Oversize(_) => ErrorCode::Oversize,
            _ => ErrorCode::Malformed,
        };
        error_frame(0, code, e.to_string())
    }

    fn check_boundary(&self, s: u64, cut: u16, width: usize) -> Result<(), Frame> {
        if cut != self.cut {
            return Err(error_frame(
                s,
                ErrorCode::Cut,
                format!("server holds layers from cut {}, request is for cut {cut}", self.cut),
            ));
        }
        if width != self.half.boundary_width() {
            return Err(error_frame(
                s,
                ErrorCode::Width,
                format!("expected width {}, got {width}", self.half.boundary_width()),
            ));
        }
        Ok(())
    }

    fn predict(&self, frame: &Frame) -> Result<Frame, Frame> {
        let s = frame.session;
        let p = ActivationsPayload::decode(&frame.payload)
            .map_err(|e| error_frame(s, ErrorCode::Malformed, e.to_string()))?;
        if p.fingerprint != self.half.fingerprint() {
            return Err(error_frame(
                s,
                ErrorCode::Fingerprint,
                "front half was split from a different model",
            ));
        }
        self.check_boundary(s, p.cut, p.values.len())?;
        let probs = self
            .half
            .forward(&to_f64(&p.values))
            .map_err(|e| error_frame(s, ErrorCode::Internal, e.to_string()))?;
        debug!("session {s:#x}: prediction for a {}-wide vector", p.width);
        let reply = PredictionPayload {
            probabilities: to_f32(&probs),
        };
        Ok(Frame::new(MsgType::Prediction, s, reply.encode()))
    }

    fn session(&self, id: u64, cfg: &TrainConfig) -> Result<Arc<Mutex<ServerTrainer>>, Frame> {
        let mut sessions = self.sessions.lock().expect("session lock");
        if let Some(t) = sessions.get(&id) {
            return Ok(Arc::clone(t));
        }
        if sessions.len() >= self.config.max_sessions {
            return Err(error_frame(id, ErrorCode::Internal, "too many training sessions"));
        }
        let trainer = ServerTrainer::new(self.half.rear().clone(), self.cut as usize, cfg.clone())
            .map_err(|e| error_frame(id, ErrorCode::Internal, e.to_string()))?;
        let t = Arc::new(Mutex::new(trainer));
        sessions.insert(id, Arc::clone(&t));
        Ok(t)
    }

    fn train_step(&self, frame: &Frame) -> Result<Frame, Frame> {
        let s = frame.session;
        let Some(cfg) = &self.config.training else {
            return Err(error_frame(s, ErrorCode::TrainingDisabled, "server was started without training"));
        };
        let req =
            GradRequest::decode(&frame.payload).map_err(|e| error_frame(s, ErrorCode::Malformed, e.to_string()))?;
        self.check_boundary(s, req.cut, req.width as usize)?;
        let values = Matrix::from_vec(req.rows as usize, req.width as usize, to_f64(&req.values))
            .map_err(|e| error_frame(s, ErrorCode::Malformed, e.to_string()))?;
        let labels: Vec<usize> = req.labels.iter().map(|&l| l as usize).collect();
        let batch = ActivationBatch {
            step: req.step,
            values,
            mask_digest: req.mask_digest,
        };
        let trainer = self.session(s, cfg)?;
        // Updates within a session are serialized by this lock.
        let mut trainer = trainer.lock().expect("trainer lock");
        let reply = trainer.step(&batch, &labels).map_err(|e| {
            let code = match e {
                SplitError::StepMismatch { .. } => ErrorCode::Step,
                SplitError::Width { .. } => ErrorCode::Width,
                SplitError::Network(NetworkError::LabelRange { .. } | NetworkError::LabelCount(..)) => {
                    ErrorCode::Malformed
                }
                _ => ErrorCode::Internal,
            };
            error_frame(s, code, e.to_string())
        })?;
        let resp = GradResponse {
            step: reply.step,
            mask_digest: reply.mask_digest,
            loss: reply.loss,
            rows: reply.grad.rows() as u32,
            width: reply.grad.cols() as u32,
            grad: to_f32(reply.grad.as_slice()),
        };
        Ok(Frame::new(MsgType::GradResponse, s, resp.encode()))
    }
}

struct Shared {
    handler: Handler,
    stats: Stats,
    stop: AtomicBool,
    idle_timeout: Duration,
}

/// A running server. Dropping it stops the accept loop.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn info(&self) -> ServerInfo {
        self.shared.handler.info()
    }

    pub fn stats(&self) -> &Stats {
        &self.shared.stats
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop();
        }
    }
}

/// Binds `addr` (port 0 picks a free port) and serves `rear`, the layers
/// from global index `cut` on.
pub fn serve(addr: impl ToSocketAddrs, rear: MlpModel, cut: u16, config: ServerConfig) -> Result<ServerHandle, WireError> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        idle_timeout: config.idle_timeout,
        handler: Handler::new(rear, cut, config),
        stats: Stats::default(),
        stop: AtomicBool::new(false),
    });
    info!("serving rear half (cut {cut}) on {addr}");
    let accept_shared = Arc::clone(&shared);
    let accept = thread::Builder::new()
        .name("splitinfer-accept".into())
        .spawn(move || accept_loop(listener, accept_shared))?;
    Ok(ServerHandle {
        addr,
        shared,
        accept: Some(accept),
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        shared.stats.connections.fetch_add(1, Ordering::Relaxed);
        let conn_shared = Arc::clone(&shared);
        let spawned = thread::Builder::new()
            .name("splitinfer-conn".into())
            .spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = connection(stream, &conn_shared) {
                    debug!("connection {peer:?} ended: {e}");
                }
            });
        if let Err(e) = spawned {
            warn!("cannot spawn connection thread: {e}");
        }
    }
}

fn connection(mut stream: TcpStream, shared: &Shared) -> Result<(), WireError> {
    stream.set_read_timeout(Some(POLL))?;
    stream.set_nodelay(true)?;
    let mut decoder = Decoder::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut last_activity = Instant::now();
    loop {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let n = match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                if last_activity.elapsed() > shared.idle_timeout {
                    debug!("closing idle connection");
                    break;
                }
                continue;
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        };
        last_activity = Instant::now();
        decoder.feed(&buf[..n]);
        loop {
            let reply = match decoder.next_frame() {
                Ok(None) => break,
                Ok(Some(frame)) => {
                    shared.stats.frames.fetch_add(1, Ordering::Relaxed);
                    shared.handler.handle(&frame)
                }
                Err(e) => shared.handler.decode_error(&e),
            };
            if reply.msg_type == MsgType::Error {
                shared.stats.errors.fetch_add(1, Ordering::Relaxed);
            }
            write_frame(&mut stream, &reply)?;
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
    Ok(())
}
