//! Newline-delimited JSON session server. One thread per connection; each
//! connection owns at most one session and session ids are unique among
//! live connections.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::hitl::protocol::{decode_client, encode, frame_payload, payload_frame, png_base64, ClientMessage, ServerMessage};
use crate::hitl::{Session, StepOutput};
use crate::model::pipeline::Estimator;
use crate::pose::Pose6DoF;
use crate::synth::Frame;

use super::live::LiveSweep;
use super::{Result, ServeConfig};

pub struct ServerContext {
    estimator: Arc<Estimator>,
    config: ServeConfig,
    active: Mutex<HashSet<String>>,
}

impl ServerContext {
    pub fn new(estimator: Arc<Estimator>, config: ServeConfig) -> Self {
        Self {
            estimator,
            config,
            active: Mutex::new(HashSet::new()),
        }
    }

    fn claim(self: &Arc<Self>, id: &str) -> Option<Claim> {
        let mut set = self.active.lock().expect("session registry");
        set.insert(id.to_string()).then(|| Claim {
            ctx: Arc::clone(self),
            id: id.to_string(),
        })
    }
}

/// Holds a session id until the connection closes.
struct Claim {
    ctx: Arc<ServerContext>,
    id: String,
}

impl Drop for Claim {
    fn drop(&mut self) {
        if let Ok(mut set) = self.ctx.active.lock() {
            set.remove(&self.id);
        }
    }
}

struct Open {
    claim: Claim,
    session: Session,
    live: LiveSweep,
}

fn error(message: impl Into<String>) -> ServerMessage {
    ServerMessage::Error {
        message: message.into(),
    }
}

fn step_messages(out: &StepOutput, frame: &Frame, with_data: bool, session: &Session) -> Vec<ServerMessage> {
    let index = out.report.frame;
    let mut msgs = vec![ServerMessage::FrameMeta {
        index,
        width: frame.width,
        height: frame.height,
        timestamp: frame.timestamp,
        data: with_data.then(|| frame_payload(index, frame).data),
    }];
    msgs.push(ServerMessage::UncertaintyReport {
        index,
        mean: out.report.mean.to_array(),
        sigma2: out.report.sigma2,
        passes: out.report.passes,
        gate: out.report.gate,
    });
    let pose = out.pose.unwrap_or_else(|| {
        let last = session.trajectory().poses().last().copied().unwrap_or(Pose6DoF::IDENTITY);
        last.compose(&out.report.mean)
    });
    msgs.push(ServerMessage::PoseEstimate {
        index,
        pose: pose.to_array(),
        accepted: out.accepted(),
    });
    if let Some(p) = &out.prompt {
        msgs.push(ServerMessage::Prompt {
            index,
            cause: p.cause,
            message: p.message.clone(),
        });
    }
    for (name, map) in [("saliency", &out.saliency), ("uncertainty", &out.heatmap)] {
        if let Some(m) = map {
            msgs.push(ServerMessage::SaliencyPng {
                index,
                map: name.into(),
                png: png_base64(&m.to_png()),
            });
        }
    }
    msgs
}

fn handle(ctx: &Arc<ServerContext>, state: &mut Option<Open>, msg: ClientMessage) -> (Vec<ServerMessage>, bool) {
    match msg {
        ClientMessage::Hello { session, seed } => {
            if state.is_some() {
                return (vec![error("a session is already open on this connection")], false);
            }
            let Some(claim) = ctx.claim(&session) else {
                return (vec![error(format!("session id {session} is in use"))], false);
            };
            let s = match Session::new(Arc::clone(&ctx.estimator), ctx.config.session.clone()) {
                Ok(s) => s,
                Err(e) => return (vec![error(e.to_string())], false),
            };
            let mut spec = ctx.config.sweep.clone();
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            log::info!("session {session} opened");
            *state = Some(Open {
                claim,
                session: s,
                live: LiveSweep::new(spec),
            });
            (Vec::new(), false)
        }
        ClientMessage::End => {
            let Some(open) = state.take() else {
                return (vec![error("no open session")], true);
            };
            let s = &open.session;
            log::info!("session {} closed", open.claim.id);
            let summary = ServerMessage::SessionSummary {
                session: open.claim.id.clone(),
                frames_scored: s.frames_scored(),
                frames_accepted: s.accepted_frames(),
                prompts: s.prompts_issued(),
                trajectory: s.trajectory().poses().iter().map(Pose6DoF::to_array).collect(),
            };
            (vec![summary], true)
        }
        other => {
            let Some(open) = state.as_mut() else {
                return (vec![error("no open session; send hello first")], false);
            };
            match other {
                ClientMessage::FrameMeta(p) => {
                    let frame = match payload_frame(&p) {
                        Ok(f) => f,
                        Err(e) => return (vec![error(e.to_string())], false),
                    };
                    match open.session.step(frame.clone()) {
                        Ok(out) => (step_messages(&out, &frame, false, &open.session), false),
                        Err(e) => (vec![error(e.to_string())], false),
                    }
                }
                ClientMessage::Advance { count } => {
                    if count == 0 || count > ctx.config.max_advance {
                        return (
                            vec![error(format!("advance count must lie in 1..={}", ctx.config.max_advance))],
                            false,
                        );
                    }
                    let mut msgs = Vec::new();
                    for _ in 0..count {
                        let frame = open.live.next_frame();
                        match open.session.step(frame.clone()) {
                            Ok(out) => {
                                open.live.record(out.accepted());
                                msgs.extend(step_messages(&out, &frame, true, &open.session));
                            }
                            Err(e) => {
                                msgs.push(error(e.to_string()));
                                break;
                            }
                        }
                    }
                    (msgs, false)
                }
                ClientMessage::OperatorAction(a) => match open.live.apply(a) {
                    Ok(()) => (Vec::new(), false),
                    Err(e) => (vec![error(e.to_string())], false),
                },
                ClientMessage::Hello { .. } | ClientMessage::End => unreachable!("handled above"),
            }
        }
    }
}

/// Serves one connection until `end`, end of input or a write failure.
pub fn serve_connection<R: BufRead, W: Write>(ctx: &Arc<ServerContext>, reader: R, mut writer: W) -> std::io::Result<()> {
    let mut state = None;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (msgs, done) = match decode_client(&line) {
            Ok(msg) => handle(ctx, &mut state, msg),
            Err(e) => (vec![error(e.to_string())], false),
        };
        for m in msgs {
            writeln!(writer, "{}", encode(m))?;
        }
        writer.flush()?;
        if done {
            break;
        }
    }
    Ok(())
}

pub struct Server {
    listener: TcpListener,
    ctx: Arc<ServerContext>,
}

impl Server {
    /// Fails when the address is unavailable.
    pub fn bind(addr: &str, estimator: Arc<Estimator>, config: ServeConfig) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        Ok(Self {
            listener,
            ctx: Arc::new(ServerContext::new(estimator, config)),
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    fn accept_loop(self, stop: Option<Arc<AtomicBool>>) -> Result<()> {
        for stream in self.listener.incoming() {
            if stop.as_ref().is_some_and(|s| s.load(Ordering::SeqCst)) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let ctx = Arc::clone(&self.ctx);
            std::thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = connection(&ctx, stream) {
                    log::warn!("connection {peer:?}: {e}");
                }
            });
        }
        Ok(())
    }

    /// Blocks, serving connections forever.
    pub fn run(self) -> Result<()> {
        log::info!("listening on {}", self.local_addr()?);
        self.accept_loop(None)
    }

    /// Serves on a background thread until the handle is shut down.
    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let thread = std::thread::spawn(move || {
            let _ = self.accept_loop(Some(flag));
        });
        Ok(ServerHandle {
            addr,
            stop,
            thread: Some(thread),
        })
    }
}

fn connection(ctx: &Arc<ServerContext>, stream: TcpStream) -> std::io::Result<()> {
    let reader = BufReader::new(stream.try_clone()?);
    serve_connection(ctx, reader, BufWriter::new(stream))
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}
