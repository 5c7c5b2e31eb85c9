//! Shared service state: pipelines, sessions and trace ownership.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crskit::module::RecList;
use crskit::monitor::Monitor;
use crskit::protocol::{parse_body, Dialog, ProtocolError, Role, Utterance};
use crskit::Pipeline;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;
use tokio_util::sync::CancellationToken;
use uuid::Uuid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Info,
    Debug,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "info" => Some(Mode::Info),
            "debug" => Some(Mode::Debug),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    /// Body with entity markup.
    pub text: String,
    #[serde(default)]
    pub recommendations: RecList,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_id: Option<String>,
}

/// A generation currently running for a session.
#[derive(Debug)]
pub struct Flight {
    pub cancel: CancellationToken,
    /// Flips to `true` once the generation task has settled.
    pub done: watch::Receiver<bool>,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub pipeline_id: String,
    pub mode: Mode,
    pub history: Vec<ChatMessage>,
    pub in_flight: Option<Flight>,
    /// Bumped on refresh so a stale generation never writes into new history.
    pub epoch: u64,
    pub last_active: Instant,
}

impl Session {
    pub fn dialog_with(&self, user_text: &str) -> Result<Dialog, ProtocolError> {
        let mut turns: Vec<Utterance> = self
            .history
            .iter()
            .map(|m| parse_body(m.role, &m.text))
            .collect::<Result<_, _>>()?;
        turns.push(parse_body(Role::User, user_text)?);
        Dialog::new(turns)
    }

    pub fn touch(&mut self) {
        self.last_active = Instant::now();
    }
}

pub type SessionHandle = Arc<Mutex<Session>>;

#[derive(Debug, Clone)]
pub struct PipelineSlot {
    pub id: String,
    pub pipeline: Arc<Pipeline>,
}

#[derive(Debug)]
pub struct AppState {
    pipelines: Vec<PipelineSlot>,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    /// Mode of the session that produced each trace.
    trace_modes: Mutex<HashMap<String, Mode>>,
    monitor: Monitor,
    ttl: Duration,
}

impl AppState {
    /// All pipelines record into one shared monitor so traces resolve by id alone.
    pub fn new(pipelines: Vec<(String, Pipeline)>, ttl: Duration) -> Self {
        let monitor = Monitor::default();
        let pipelines = pipelines
            .into_iter()
            .map(|(id, p)| PipelineSlot {
                id,
                pipeline: Arc::new(p.with_monitor(monitor.clone())),
            })
            .collect();
        AppState {
            pipelines,
            sessions: Mutex::new(HashMap::new()),
            trace_modes: Mutex::new(HashMap::new()),
            monitor,
            ttl,
        }
    }

    pub fn pipelines(&self) -> &[PipelineSlot] {
        &self.pipelines
    }

    pub fn pipeline(&self, id: &str) -> Option<&PipelineSlot> {
        self.pipelines.iter().find(|p| p.id == id)
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    pub fn create_session(&self, pipeline_id: &str, mode: Mode) -> String {
        let id = Uuid::new_v4().to_string();
        let session = Session {
            id: id.clone(),
            pipeline_id: pipeline_id.to_string(),
            mode,
            history: Vec::new(),
            in_flight: None,
            epoch: 0,
            last_active: Instant::now(),
        };
        self.sessions.lock().insert(id.clone(), Arc::new(Mutex::new(session)));
        id
    }

    pub fn session(&self, id: &str) -> Option<SessionHandle> {
        let handle = self.sessions.lock().get(id).cloned()?;
        handle.lock().touch();
        Some(handle)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().len()
    }

    /// Drops sessions idle for longer than the TTL; busy sessions are kept.
    pub fn sweep(&self, now: Instant) -> usize {
        let mut sessions = self.sessions.lock();
        let before = sessions.len();
        sessions.retain(|_, s| {
            let s = s.lock();
            s.in_flight.is_some() || now.saturating_duration_since(s.last_active) <= self.ttl
        });
        before - sessions.len()
    }

    pub fn record_trace(&self, trace_id: &str, mode: Mode) {
        let mut modes = self.trace_modes.lock();
        modes.insert(trace_id.to_string(), mode);
        // The monitor keeps a bounded ring, so ownership entries for evicted
        // traces are pruned once the map outgrows it.
        if modes.len() > 2 * crskit::monitor::DEFAULT_CAPACITY {
            let live: std::collections::HashSet<String> = self.monitor.trace_ids().into_iter().collect();
            modes.retain(|id, _| live.contains(id));
        }
    }

    pub fn trace_mode(&self, trace_id: &str) -> Option<Mode> {
        self.trace_modes.lock().get(trace_id).copied()
    }
}
