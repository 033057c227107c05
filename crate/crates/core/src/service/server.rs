//! Web-socket transport. One session per server; a connection thread reads
//! client messages and writes outbound ones, a tick thread advances the
//! session against absolute 50 Hz deadlines, and inference runs on the
//! controller's worker.

use std::collections::VecDeque;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{info, warn};
use tungstenite::{Message, WebSocket};

use super::protocol::{SessionMessage, WirePose};
use super::{MoodModels, Session};
use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::operator::Mood;
use crate::sim::{EmbodimentProfile, DT};

#[derive(Clone)]
pub struct ServeConfig {
    pub bind: String,
    pub profile: EmbodimentProfile,
    pub mood: Mood,
    pub seed: u64,
    pub controller: ControllerConfig,
    pub resume_timeout: Duration,
    pub async_inference: bool,
    pub outbound_capacity: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            bind: "127.0.0.1:8765".into(),
            profile: EmbodimentProfile::bipod(),
            mood: Mood::Default,
            seed: 0,
            controller: ControllerConfig::default(),
            resume_timeout: Duration::from_secs(30),
            async_inference: true,
            outbound_capacity: 256,
        }
    }
}

/// Bounded outbound buffer; when full, the oldest `world` frame is dropped
/// first.
struct Outbox {
    inner: Mutex<VecDeque<SessionMessage>>,
    capacity: usize,
}

impl Outbox {
    fn push(&self, m: SessionMessage) {
        let mut q = self.inner.lock().unwrap();
        if q.len() >= self.capacity {
            match q.iter().position(|m| matches!(m, SessionMessage::World { .. })) {
                Some(i) => {
                    q.remove(i);
                }
                None => {
                    q.pop_front();
                }
            }
        }
        q.push_back(m);
    }

    fn drain(&self) -> Vec<SessionMessage> {
        self.inner.lock().unwrap().drain(..).collect()
    }
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<Result<()>>>,
}

impl ServerHandle {
    pub fn stop(mut self) -> Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        match self.join.take().map(|j| j.join()) {
            Some(Ok(r)) => r,
            Some(Err(_)) => Err(Error::Numeric { location: "server".into(), detail: "server thread panicked".into() }),
            None => Ok(()),
        }
    }

    /// Blocks until the server stops on its own (never, unless an error occurs).
    pub fn wait(mut self) -> Result<()> {
        match self.join.take().map(|j| j.join()) {
            Some(Ok(r)) => r,
            Some(Err(_)) => Err(Error::Numeric { location: "server".into(), detail: "server thread panicked".into() }),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

/// Binds and starts serving in the background.
pub fn serve(cfg: ServeConfig, models: MoodModels) -> Result<ServerHandle> {
    models.get(cfg.mood)?;
    cfg.controller.validate(models.get(cfg.mood)?.horizon())?;
    let listener = TcpListener::bind(&cfg.bind).map_err(|e| Error::config(format!("cannot bind {}: {e}", cfg.bind)))?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let join = std::thread::Builder::new()
        .name("serve".into())
        .spawn(move || accept_loop(listener, cfg, models, flag))
        .map_err(Error::Io)?;
    info!("serving on ws://{addr}");
    Ok(ServerHandle { addr, stop, join: Some(join) })
}

fn accept_loop(listener: TcpListener, cfg: ServeConfig, models: MoodModels, stop: Arc<AtomicBool>) -> Result<()> {
    let mut parked: Option<(Session, Instant)> = None;
    while !stop.load(Ordering::SeqCst) {
        let stream = match listener.accept() {
            Ok((s, _)) => s,
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let (session, resumed) = match parked.take() {
            Some((s, at)) if at.elapsed() <= cfg.resume_timeout => (s, true),
            _ => (Session::new(models.clone(), cfg.profile.clone(), cfg.controller.clone(), cfg.mood, cfg.seed, cfg.async_inference)?, false),
        };
        match run_connection(stream, session, resumed, &cfg, &listener, &stop) {
            Ok(s) => parked = Some((s, Instant::now())),
            Err(e) => warn!("session ended with error: {e}"),
        }
    }
    Ok(())
}

fn send(ws: &mut WebSocket<TcpStream>, m: &SessionMessage) -> std::result::Result<(), tungstenite::Error> {
    ws.send(Message::text(m.to_line()))
}

fn reject_extra(listener: &TcpListener) {
    if let Ok((stream, _)) = listener.accept() {
        let _ = stream.set_nonblocking(false);
        if let Ok(mut ws) = tungstenite::accept(stream) {
            let m = SessionMessage::Error { t: 0.0, message: "a session is already active".into() };
            let _ = send(&mut ws, &m);
            let _ = ws.close(None);
            let _ = ws.flush();
        }
    }
}

enum Control {
    Message(SessionMessage),
}

/// Serves one connection; returns the session for a possible resume.
fn run_connection(
    stream: TcpStream,
    session: Session,
    resumed: bool,
    cfg: &ServeConfig,
    listener: &TcpListener,
    stop: &Arc<AtomicBool>,
) -> Result<Session> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| Error::data(format!("handshake failed: {e}")))?;
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(2)))?;
    let hello = session.hello(resumed);
    let cell = session.pose_cell();
    let session = Arc::new(Mutex::new(session));
    let outbox = Arc::new(Outbox { inner: Mutex::new(VecDeque::new()), capacity: cfg.outbound_capacity.max(8) });
    let alive = Arc::new(AtomicBool::new(true));
    let (ctl_tx, ctl_rx) = mpsc::sync_channel::<Control>(32);
    outbox.push(hello);

    let ticker = {
        let (session, outbox, alive) = (session.clone(), outbox.clone(), alive.clone());
        std::thread::Builder::new().name("tick".into()).spawn(move || tick_loop(session, outbox, alive, ctl_rx)).map_err(Error::Io)?
    };

    let mut result = Ok(());
    while alive.load(Ordering::SeqCst) && !stop.load(Ordering::SeqCst) {
        reject_extra(listener);
        match ws.read() {
            Ok(Message::Text(text)) => {
                let reply = match SessionMessage::parse(text.as_str()) {
                    Ok(SessionMessage::HumanPose { t, x, y, z, qw, qx, qy, qz }) => match (WirePose { x, y, z, qw, qx, qy, qz }).to_pose() {
                        Ok(p) => {
                            cell.push(t, p);
                            None
                        }
                        Err(e) => Some(format!("invalid human pose: {e}")),
                    },
                    Ok(m) if m.is_client() => {
                        if ctl_tx.try_send(Control::Message(m)).is_err() {
                            Some("control queue full".to_string())
                        } else {
                            None
                        }
                    }
                    Ok(m) => Some(format!("{} is a server message", m.tag())),
                    Err(e) => Some(e.to_string()),
                };
                if let Some(message) = reply {
                    let t = session.lock().unwrap().world().time;
                    outbox.push(SessionMessage::Error { t, message });
                }
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => break,
            Err(e) => {
                result = Err(Error::data(format!("connection error: {e}")));
                break;
            }
        }
        let mut failed = false;
        for m in outbox.drain() {
            if let Err(e) = ws.write(Message::text(m.to_line())) {
                if !matches!(&e, tungstenite::Error::Io(io) if io.kind() == ErrorKind::WouldBlock) {
                    failed = true;
                    break;
                }
            }
        }
        if failed || matches!(ws.flush(), Err(ref e) if !matches!(e, tungstenite::Error::Io(io) if io.kind() == ErrorKind::WouldBlock)) {
            break;
        }
    }
    alive.store(false, Ordering::SeqCst);
    let tick_result = ticker.join().unwrap_or_else(|_| Err(Error::Numeric { location: "tick".into(), detail: "tick thread panicked".into() }));
    let _ = ws.close(None);
    let _ = ws.flush();
    result?;
    tick_result?;
    info!("client disconnected; session parked for resume");
    Ok(Arc::try_unwrap(session).map_err(|_| Error::data("session still shared"))?.into_inner().unwrap())
}

fn tick_loop(session: Arc<Mutex<Session>>, outbox: Arc<Outbox>, alive: Arc<AtomicBool>, ctl: Receiver<Control>) -> Result<()> {
    let period = Duration::from_secs_f64(DT);
    let mut next = Instant::now() + period;
    while alive.load(Ordering::SeqCst) {
        let now = Instant::now();
        if next > now {
            std::thread::sleep(next - now);
        } else if now - next > 5 * period {
            // far behind: drop the missed ticks instead of bursting
            next = now;
        }
        next += period;
        let mut s = session.lock().unwrap();
        loop {
            match ctl.try_recv() {
                Ok(Control::Message(m)) => {
                    if let Some(reply) = s.handle(m) {
                        outbox.push(reply);
                    }
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return Ok(()),
            }
        }
        match s.tick() {
            Ok(msgs) => msgs.into_iter().for_each(|m| outbox.push(m)),
            Err(e) => {
                alive.store(false, Ordering::SeqCst);
                return Err(e);
            }
        }
    }
    Ok(())
}
