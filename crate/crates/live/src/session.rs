//! Session registry and the per-session control-loop thread.
//!
//! Each session owns one thread that runs the engine. Commands reach it
//! through a bounded queue and are applied between frames, in arrival
//! order. Frames fan out through a bounded broadcast channel; a subscriber
//! that falls behind loses its place instead of growing a buffer.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, SyncSender, TryRecvError, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use sioms_core::scenario::Scenario;
use tokio::sync::{broadcast, oneshot};

use crate::engine::{Engine, FRAME_RATE};
use crate::protocol::{ErrorCode, ImpulseLog, Inbound, Outbound, SessionState, Summary};
use crate::LiveError;

/// Frames buffered per subscriber before it counts as lagging. A whole
/// default run at 30 Hz fits, so an as-fast-as-possible session does not
/// drop a reader that keeps up on average.
pub const BROADCAST_CAPACITY: usize = 4096;
const COMMAND_QUEUE: usize = 64;

/// What a command did, in simulated time.
#[derive(Debug, Clone, PartialEq)]
pub struct Ack {
    pub command: &'static str,
    pub t: f64,
    pub impulse: Option<ImpulseLog>,
}

impl Ack {
    pub fn to_frame(&self) -> Outbound {
        Outbound::Ack {
            command: self.command.to_string(),
            t: self.t,
            index: self.impulse.map(|i| i.index),
            magnitude: self.impulse.map(|i| i.magnitude),
        }
    }
}

type Reply = oneshot::Sender<Result<Ack, LiveError>>;

enum Control {
    Start,
    Command(Inbound, Reply),
}

#[derive(Debug, Clone)]
struct Shared {
    state: SessionState,
    t: f64,
    impulses: Vec<ImpulseLog>,
    summary: Option<Summary>,
}

/// Public view of a session.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SessionInfo {
    pub id: String,
    pub scenario: String,
    pub state: SessionState,
    pub ratio: f64,
    pub t: f64,
    pub impulses: Vec<ImpulseLog>,
    pub summary: Option<Summary>,
}

/// Static facts sent to each subscriber on connect.
#[derive(Debug, Clone)]
pub struct SessionMeta {
    pub scenario: String,
    pub labels: Vec<String>,
    pub n_states: usize,
    pub n_modes: usize,
    pub delta: f64,
    pub duration: f64,
    pub ratio: f64,
}

struct Session {
    meta: SessionMeta,
    shared: Arc<Mutex<Shared>>,
    control: SyncSender<Control>,
    frames: broadcast::WeakSender<Arc<str>>,
}

/// A live subscription: the hello frame plus the stream that follows.
pub struct Subscription {
    pub hello: Outbound,
    pub frames: Option<broadcast::Receiver<Arc<str>>>,
    /// Present when the session had already stopped.
    pub summary: Option<Summary>,
}

pub struct SessionManager {
    sessions: Mutex<HashMap<String, Session>>,
    next_id: AtomicU64,
    max_active: usize,
    capacity: usize,
}

impl SessionManager {
    pub fn new(max_active: usize) -> Self {
        Self::with_capacity(max_active, BROADCAST_CAPACITY)
    }

    /// Like `new` with `capacity` frames of buffer per subscriber.
    pub fn with_capacity(max_active: usize, capacity: usize) -> Self {
        SessionManager { sessions: Mutex::new(HashMap::new()), next_id: AtomicU64::new(1), max_active, capacity: capacity.max(1) }
    }

    /// Builds the engine and parks its thread in `created`. The loop starts
    /// on the first subscription or an explicit start.
    pub fn create(&self, scenario: &Scenario, ratio: f64) -> Result<String, LiveError> {
        if !(ratio >= 0.0 && ratio.is_finite()) {
            return Err(LiveError::Ratio(ratio));
        }
        let active = self.sessions.lock().expect("registry lock").values().filter(|s| s.shared.lock().expect("state lock").state != SessionState::Stopped).count();
        if active >= self.max_active {
            return Err(LiveError::ResourceLimit(self.max_active));
        }
        let engine = Engine::new(scenario)?;
        let meta = SessionMeta {
            scenario: scenario.name.clone(),
            labels: engine.system().labels().to_vec(),
            n_states: engine.system().n_states(),
            n_modes: engine.system().n_modes(),
            delta: engine.config().delta,
            duration: engine.config().duration,
            ratio,
        };
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let shared = Arc::new(Mutex::new(Shared { state: SessionState::Created, t: engine.time(), impulses: Vec::new(), summary: None }));
        let (tx, rx) = broadcast::channel(self.capacity);
        let (control, commands) = mpsc::sync_channel(COMMAND_QUEUE);
        let frames = tx.downgrade();
        let driver = Driver { engine, ratio, shared: shared.clone(), frames: tx, commands, id: id.clone() };
        drop(rx);
        thread::Builder::new().name(format!("session-{id}")).spawn(move || driver.run()).map_err(|e| LiveError::Internal(e.to_string()))?;
        self.sessions.lock().expect("registry lock").insert(id.clone(), Session { meta, shared, control, frames });
        tracing::info!(session = %id, scenario = %scenario.name, ratio, "session created");
        Ok(id)
    }

    pub fn info(&self, id: &str) -> Result<SessionInfo, LiveError> {
        let sessions = self.sessions.lock().expect("registry lock");
        let s = sessions.get(id).ok_or_else(|| LiveError::UnknownSession(id.to_string()))?;
        let sh = s.shared.lock().expect("state lock").clone();
        Ok(SessionInfo {
            id: id.to_string(),
            scenario: s.meta.scenario.clone(),
            state: sh.state,
            ratio: s.meta.ratio,
            t: sh.t,
            impulses: sh.impulses,
            summary: sh.summary,
        })
    }

    pub fn meta(&self, id: &str) -> Result<SessionMeta, LiveError> {
        let sessions = self.sessions.lock().expect("registry lock");
        Ok(sessions.get(id).ok_or_else(|| LiveError::UnknownSession(id.to_string()))?.meta.clone())
    }

    pub fn state(&self, id: &str) -> Result<(SessionState, f64), LiveError> {
        let sessions = self.sessions.lock().expect("registry lock");
        let s = sessions.get(id).ok_or_else(|| LiveError::UnknownSession(id.to_string()))?;
        let sh = s.shared.lock().expect("state lock");
        Ok((sh.state, sh.t))
    }

    /// Subscribes to the frame stream and starts a created session.
    pub fn subscribe(&self, id: &str) -> Result<Subscription, LiveError> {
        let sessions = self.sessions.lock().expect("registry lock");
        let s = sessions.get(id).ok_or_else(|| LiveError::UnknownSession(id.to_string()))?;
        let frames = s.frames.upgrade().map(|tx| tx.subscribe());
        let sh = s.shared.lock().expect("state lock").clone();
        let hello = Outbound::Hello {
            session: id.to_string(),
            state: sh.state,
            scenario: s.meta.scenario.clone(),
            labels: s.meta.labels.clone(),
            n_modes: s.meta.n_modes,
            delta: s.meta.delta,
            duration: s.meta.duration,
            ratio: s.meta.ratio,
            rate_hz: FRAME_RATE,
        };
        if frames.is_some() && sh.state == SessionState::Created {
            // a full queue already holds a start or will be drained soon
            let _ = s.control.try_send(Control::Start);
        }
        Ok(Subscription { hello, frames, summary: sh.summary })
    }

    /// Queues a command and waits for the control loop to apply it.
    pub async fn command(&self, id: &str, cmd: Inbound) -> Result<Ack, LiveError> {
        let rx = {
            let sessions = self.sessions.lock().expect("registry lock");
            let s = sessions.get(id).ok_or_else(|| LiveError::UnknownSession(id.to_string()))?;
            if let Inbound::Impulse { index, magnitude } = cmd {
                if index == 0 || index > s.meta.n_states {
                    return Err(LiveError::Index { index, n: s.meta.n_states });
                }
                if !magnitude.is_finite() {
                    return Err(LiveError::Magnitude(magnitude));
                }
            }
            let state = s.shared.lock().expect("state lock").state;
            if state == SessionState::Stopped {
                return Err(LiveError::State { command: command_name(&cmd), state });
            }
            let (tx, rx) = oneshot::channel();
            match s.control.try_send(Control::Command(cmd, tx)) {
                Ok(()) => rx,
                Err(TrySendError::Full(_)) => return Err(LiveError::Busy),
                Err(TrySendError::Disconnected(_)) => return Err(LiveError::State { command: command_name(&cmd), state: SessionState::Stopped }),
            }
        };
        match rx.await {
            Ok(r) => r,
            // the loop ended before reaching the command
            Err(_) => Err(LiveError::State { command: command_name(&cmd), state: SessionState::Stopped }),
        }
    }

    /// Waits until the session stops and returns its summary.
    pub async fn wait_stopped(&self, id: &str) -> Result<Summary, LiveError> {
        loop {
            if let Some(s) = self.info(id)?.summary {
                return Ok(s);
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }
}

fn command_name(cmd: &Inbound) -> &'static str {
    match cmd {
        Inbound::Impulse { .. } => "impulse",
        Inbound::Pause => "pause",
        Inbound::Resume => "resume",
        Inbound::Stop => "stop",
        Inbound::Start => "start",
    }
}

struct Driver {
    engine: Engine,
    ratio: f64,
    shared: Arc<Mutex<Shared>>,
    frames: broadcast::Sender<Arc<str>>,
    commands: mpsc::Receiver<Control>,
    id: String,
}

impl Driver {
    fn state(&self) -> SessionState {
        self.shared.lock().expect("state lock").state
    }

    fn set_state(&self, state: SessionState) {
        let t = self.engine.time();
        {
            let mut sh = self.shared.lock().expect("state lock");
            sh.state = state;
            sh.t = t;
        }
        self.send(&Outbound::Status { state, t });
    }

    fn send(&self, frame: &Outbound) {
        // no subscribers is fine
        let _ = self.frames.send(Arc::from(frame.to_text()));
    }

    fn run(mut self) {
        let error = self.drive().err().map(|e| e.to_string());
        if let Some(e) = &error {
            tracing::warn!(session = %self.id, error = %e, "session loop failed");
            self.send(&Outbound::error(ErrorCode::Internal, e.clone()));
        }
        let summary = self.engine.summary(error);
        {
            let mut sh = self.shared.lock().expect("state lock");
            sh.state = SessionState::Stopped;
            sh.t = self.engine.time();
            sh.impulses = self.engine.impulses().to_vec();
            sh.summary = Some(summary.clone());
        }
        self.send(&Outbound::Status { state: SessionState::Stopped, t: self.engine.time() });
        self.send(&Outbound::Summary(summary));
        tracing::info!(session = %self.id, t = self.engine.time(), "session stopped");
        // refuse whatever is still queued
        while let Ok(c) = self.commands.try_recv() {
            if let Control::Command(cmd, reply) = c {
                let _ = reply.send(Err(LiveError::State { command: command_name(&cmd), state: SessionState::Stopped }));
            }
        }
    }

    /// Returns when the run completes or a stop arrives.
    fn drive(&mut self) -> Result<(), LiveError> {
        // created: wait for a start (or an early stop)
        loop {
            match self.commands.recv() {
                Ok(Control::Start) => break,
                Ok(Control::Command(Inbound::Start, reply)) => {
                    let _ = reply.send(Ok(Ack { command: "start", t: self.engine.time(), impulse: None }));
                    break;
                }
                Ok(Control::Command(Inbound::Stop, reply)) => {
                    let _ = reply.send(Ok(Ack { command: "stop", t: self.engine.time(), impulse: None }));
                    return Ok(());
                }
                Ok(Control::Command(cmd, reply)) => {
                    let _ = reply.send(Err(LiveError::State { command: command_name(&cmd), state: SessionState::Created }));
                }
                Err(_) => return Ok(()),
            }
        }
        self.set_state(SessionState::Running);
        self.send(&self.engine.frame());

        let mut pace = Pace::new(self.ratio, self.engine.time());
        while !self.engine.is_done() {
            // apply everything queued, then wait for the frame deadline
            loop {
                match self.commands.try_recv() {
                    Ok(c) => {
                        if self.handle(c, &mut pace)? {
                            return Ok(());
                        }
                    }
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) => return Ok(()),
                }
            }
            if self.state() == SessionState::Paused {
                match self.commands.recv() {
                    Ok(c) => {
                        if self.handle(c, &mut pace)? {
                            return Ok(());
                        }
                    }
                    Err(_) => return Ok(()),
                }
                continue;
            }
            if let Some(wait) = pace.wait(self.engine.time()) {
                match self.commands.recv_timeout(wait) {
                    Ok(c) => {
                        if self.handle(c, &mut pace)? {
                            return Ok(());
                        }
                        continue;
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => return Ok(()),
                }
            }
            let frame = self.engine.advance()?;
            self.shared.lock().expect("state lock").t = self.engine.time();
            self.send(&frame);
        }
        Ok(())
    }

    /// Applies one command; true means stop.
    fn handle(&mut self, c: Control, pace: &mut Pace) -> Result<bool, LiveError> {
        let Control::Command(cmd, reply) = c else { return Ok(false) };
        let state = self.state();
        let t = self.engine.time();
        let (result, stop) = match (cmd, state) {
            (Inbound::Impulse { index, magnitude }, SessionState::Running) => match self.engine.impulse(index - 1, magnitude) {
                Ok(log) => {
                    if log.noop {
                        tracing::info!(session = %self.id, t = log.t, index = log.index, "zero-magnitude impulse (no-op)");
                    } else {
                        tracing::info!(session = %self.id, t = log.t, index = log.index, magnitude = log.magnitude, "impulse applied");
                    }
                    self.shared.lock().expect("state lock").impulses.push(log);
                    (Ok(Ack { command: "impulse", t: log.t, impulse: Some(log) }), false)
                }
                Err(e) => (Err(e), false),
            },
            (Inbound::Pause, SessionState::Running) => {
                self.set_state(SessionState::Paused);
                (Ok(Ack { command: "pause", t, impulse: None }), false)
            }
            (Inbound::Resume, SessionState::Paused) => {
                self.set_state(SessionState::Running);
                *pace = Pace::new(self.ratio, t);
                (Ok(Ack { command: "resume", t, impulse: None }), false)
            }
            (Inbound::Stop, _) => (Ok(Ack { command: "stop", t, impulse: None }), true),
            (cmd, state) => (Err(LiveError::State { command: command_name(&cmd), state }), false),
        };
        let _ = reply.send(result);
        Ok(stop)
    }
}

/// Maps simulated time onto wall-clock deadlines.
struct Pace {
    ratio: f64,
    wall: Instant,
    sim: f64,
}

impl Pace {
    fn new(ratio: f64, sim: f64) -> Self {
        Pace { ratio, wall: Instant::now(), sim }
    }

    /// Time left before the frame after `t` is due, if any.
    fn wait(&self, t: f64) -> Option<Duration> {
        if self.ratio == 0.0 {
            return None;
        }
        let due = self.wall + Duration::from_secs_f64((t + 1.0 / FRAME_RATE - self.sim).max(0.0) / self.ratio);
        due.checked_duration_since(Instant::now()).filter(|d| !d.is_zero())
    }
}
