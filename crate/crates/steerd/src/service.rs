//! Session registry and producer threads.
//!
//! Each session owns one producer thread that advances its [`TwinEngine`] at
//! the configured frame rate. Commands arrive on an unbounded queue and are
//! applied only between frames; every applied command is acknowledged with the
//! frame it took effect at and appended to the session's replay log. Frames
//! fan out to subscribers through a bounded broadcast channel, so a slow
//! subscriber loses its oldest packets rather than stalling the producer.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rhythmic_core::bundle::Bundle;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot};

use crate::engine::{SessionConfig, TwinEngine};
use crate::error::SteerError;
use crate::protocol::{Ack, ModeLabel, ServerMessage, SteerCommand};
use crate::replay::{ReplayEntry, ReplayHeader, ReplayWriter};

/// Packets retained per session for slow subscribers.
pub const SUBSCRIBER_BUFFER: usize = 1024;

type CommandMsg = (SteerCommand, oneshot::Sender<Result<Ack, SteerError>>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: u64,
    /// Next frame to be produced.
    pub frame: u64,
    pub mode: ModeLabel,
    pub ended: bool,
}

#[derive(Debug)]
struct Status {
    frame: u64,
    mode: ModeLabel,
    ended: bool,
}

struct SessionHandle {
    commands: mpsc::UnboundedSender<CommandMsg>,
    frames: broadcast::Sender<Arc<ServerMessage>>,
    status: Arc<Mutex<Status>>,
    stop: Arc<AtomicBool>,
    replay_path: PathBuf,
}

pub struct SteerService {
    default_bundle: Option<PathBuf>,
    defaults: SessionConfig,
    replay_dir: PathBuf,
    sessions: Mutex<BTreeMap<u64, SessionHandle>>,
    next_id: AtomicU64,
}

impl SteerService {
    pub fn new(default_bundle: Option<PathBuf>, defaults: SessionConfig, replay_dir: PathBuf) -> Self {
        Self { default_bundle, defaults, replay_dir, sessions: Mutex::new(BTreeMap::new()), next_id: AtomicU64::new(1) }
    }

    pub fn defaults(&self) -> &SessionConfig {
        &self.defaults
    }

    /// Loads the bundle, warms the twin and starts producing frames.
    pub async fn start_session(&self, bundle: Option<&Path>, cfg: Option<SessionConfig>) -> Result<u64, SteerError> {
        let bundle_path = bundle
            .map(Path::to_path_buf)
            .or_else(|| self.default_bundle.clone())
            .ok_or_else(|| SteerError::InvalidCommand("no bundle given and no default configured".into()))?;
        let cfg = cfg.unwrap_or_else(|| self.defaults.clone());
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        std::fs::create_dir_all(&self.replay_dir)?;
        let replay_path = self.replay_dir.join(format!("session-{id}.jsonl"));

        let (path, c) = (bundle_path.clone(), cfg.clone());
        let engine = tokio::task::spawn_blocking(move || -> Result<TwinEngine, SteerError> {
            let bundle = Bundle::load(&path)?;
            TwinEngine::start(&bundle, &c)
        })
        .await
        .map_err(|e| SteerError::Io(std::io::Error::other(e)))??;

        let header = ReplayHeader { session: id, bundle: bundle_path, config: cfg };
        let writer = ReplayWriter::new(std::io::BufWriter::new(std::fs::File::create(&replay_path)?), &header)?;
        let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
        let (frame_tx, _) = broadcast::channel(SUBSCRIBER_BUFFER);
        let status = Arc::new(Mutex::new(Status { frame: 0, mode: engine.mode(), ended: false }));
        let stop = Arc::new(AtomicBool::new(false));
        let producer = Producer {
            id,
            engine,
            commands: cmd_rx,
            frames: frame_tx.clone(),
            status: status.clone(),
            stop: stop.clone(),
            replay: writer,
            seq: 0,
        };
        std::thread::Builder::new().name(format!("steer-session-{id}")).spawn(move || producer.run())?;
        self.sessions.lock().unwrap().insert(id, SessionHandle { commands: cmd_tx, frames: frame_tx, status, stop, replay_path });
        log::info!("session {id} started");
        Ok(id)
    }

    /// Queues a command; resolves once it has been applied at a frame boundary.
    pub async fn apply_command(&self, id: u64, cmd: SteerCommand) -> Result<Ack, SteerError> {
        let (tx, rx) = oneshot::channel();
        {
            let sessions = self.sessions.lock().unwrap();
            let s = sessions.get(&id).ok_or(SteerError::UnknownSession(id))?;
            if s.status.lock().unwrap().ended {
                return Err(SteerError::SessionEnded(id));
            }
            s.commands.send((cmd, tx)).map_err(|_| SteerError::SessionEnded(id))?;
        }
        rx.await.map_err(|_| SteerError::SessionEnded(id))?
    }

    /// Live feed starting at the next produced frame.
    pub fn subscribe(&self, id: u64) -> Result<broadcast::Receiver<Arc<ServerMessage>>, SteerError> {
        let sessions = self.sessions.lock().unwrap();
        let s = sessions.get(&id).ok_or(SteerError::UnknownSession(id))?;
        if s.status.lock().unwrap().ended {
            return Err(SteerError::SessionEnded(id));
        }
        Ok(s.frames.subscribe())
    }

    pub fn sessions(&self) -> Vec<SessionInfo> {
        let sessions = self.sessions.lock().unwrap();
        sessions
            .iter()
            .map(|(&id, s)| {
                let st = s.status.lock().unwrap();
                SessionInfo { id, frame: st.frame, mode: st.mode, ended: st.ended }
            })
            .collect()
    }

    pub fn replay_path(&self, id: u64) -> Result<PathBuf, SteerError> {
        let sessions = self.sessions.lock().unwrap();
        Ok(sessions.get(&id).ok_or(SteerError::UnknownSession(id))?.replay_path.clone())
    }

    /// Stops the producer after its current frame and forgets the session.
    pub fn stop_session(&self, id: u64) -> Result<(), SteerError> {
        let s = self.sessions.lock().unwrap().remove(&id).ok_or(SteerError::UnknownSession(id))?;
        s.stop.store(true, Ordering::SeqCst);
        Ok(())
    }
}

impl Drop for SteerService {
    fn drop(&mut self) {
        for s in self.sessions.get_mut().unwrap().values() {
            s.stop.store(true, Ordering::SeqCst);
        }
    }
}

struct Producer {
    id: u64,
    engine: TwinEngine,
    commands: mpsc::UnboundedReceiver<CommandMsg>,
    frames: broadcast::Sender<Arc<ServerMessage>>,
    status: Arc<Mutex<Status>>,
    stop: Arc<AtomicBool>,
    replay: ReplayWriter<std::io::BufWriter<std::fs::File>>,
    seq: u64,
}

impl Producer {
    fn apply_pending(&mut self) {
        while let Ok((cmd, reply)) = self.commands.try_recv() {
            let result = self.engine.apply(&cmd.kind).and_then(|()| {
                let ack = Ack { seq: self.seq, frame: self.engine.frame() };
                self.replay.record(&ReplayEntry { seq: ack.seq, frame: ack.frame, command: cmd })?;
                self.seq += 1;
                Ok(ack)
            });
            // The requester may have gone away; the command still stands.
            let _ = reply.send(result);
        }
    }

    fn run(mut self) {
        let period = Duration::from_secs_f64(1.0 / self.engine.config().fps);
        let mut deadline = Instant::now();
        while !self.stop.load(Ordering::SeqCst) && !self.engine.finished() {
            self.apply_pending();
            match self.engine.step() {
                Ok(packet) => {
                    {
                        let mut st = self.status.lock().unwrap();
                        st.frame = packet.t + 1;
                        st.mode = packet.mode;
                    }
                    // No subscribers is not an error.
                    let _ = self.frames.send(Arc::new(ServerMessage::Frame(packet)));
                }
                Err(e) => {
                    log::warn!("session {} stopped: {e}", self.id);
                    let _ = self.frames.send(Arc::new(ServerMessage::Error { error: e.to_string() }));
                    break;
                }
            }
            deadline += period;
            let now = Instant::now();
            if deadline > now {
                std::thread::sleep(deadline - now);
            } else if now - deadline > Duration::from_secs(1) {
                deadline = now;
            }
        }
        self.status.lock().unwrap().ended = true;
        // Commands still queued will never apply.
        self.commands.close();
        while let Ok((_, reply)) = self.commands.try_recv() {
            let _ = reply.send(Err(SteerError::SessionEnded(self.id)));
        }
        let _ = self.frames.send(Arc::new(ServerMessage::Ended { ended: self.engine.frame() }));
        log::info!("session {} ended at frame {}", self.id, self.engine.frame());
    }
}
