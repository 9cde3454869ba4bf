//! Monitoring sessions: a frame source scored by one pinned model version,
//! driven through the pause/label state machine.
//!
//! Every state change is appended to the session's event history and
//! broadcast while the session lock is held, so a subscriber that snapshots
//! the history and subscribes under the same lock sees each event once.

use std::path::{Path, PathBuf};

use parking_lot::{Condvar, Mutex};
use riskwatch_core::dataset::{EpisodeRecord, EpisodeStore, Label, Provenance};
use riskwatch_core::frame::Frame;
use riskwatch_core::riskcore::{ExecutionMode, ExecutionState, Phase, RiskModel, RiskVerdict};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::error::{Result, ServiceError};
use crate::FORMAT_VERSION;

pub const LABEL_SOURCE: &str = "supervisor";
const EVENT_CAPACITY: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    Replay {
        episode_id: String,
        /// Delay between replayed frames; 0 replays as fast as frames score.
        #[serde(default)]
        frame_interval_ms: u64,
    },
    Push {
        expected_frames: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Verdict {
        frame_index: usize,
        r: f64,
        mu: f64,
        sigma: f64,
        flag: bool,
        recon_unreliable: bool,
        phase: Phase,
    },
    Phase {
        phase: Phase,
        pending_frame: Option<usize>,
        cursor: usize,
    },
    Label {
        frame_index: usize,
        label: Label,
        phase: Phase,
    },
}

impl SessionEvent {
    pub fn name(&self) -> &'static str {
        match self {
            SessionEvent::Verdict { .. } => "verdict",
            SessionEvent::Phase { .. } => "phase",
            SessionEvent::Label { .. } => "label",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            SessionEvent::Phase {
                phase: Phase::Completed,
                ..
            }
        )
    }

    fn verdict(v: &RiskVerdict, phase: Phase) -> Self {
        SessionEvent::Verdict {
            frame_index: v.frame_index,
            r: v.r,
            mu: v.mu,
            sigma: v.sigma,
            flag: v.flag,
            recon_unreliable: v.recon_unreliable,
            phase,
        }
    }
}

/// Public view of a session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionInfo {
    pub format_version: u32,
    pub session_id: String,
    pub skill: String,
    pub source: SourceSpec,
    pub episode_id: String,
    pub model_version: u64,
    pub phase: Phase,
    pub pending_frame: Option<usize>,
    pub cursor: usize,
    pub total_frames: usize,
    pub flagged_frames: Vec<usize>,
    pub labels: Vec<(usize, Label)>,
}

/// What is persisted for a session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionRecord {
    #[serde(flatten)]
    pub info: SessionInfo,
    pub verdicts: Vec<RiskVerdict>,
    pub events: Vec<SessionEvent>,
}

struct Inner {
    state: ExecutionState,
    cursor: usize,
    verdicts: Vec<RiskVerdict>,
    events: Vec<SessionEvent>,
    labels: Vec<(usize, Label)>,
    /// Frames recorded so far for push sessions.
    pushed: Option<EpisodeRecord>,
}

pub struct Session {
    pub id: String,
    pub skill: String,
    pub source: SourceSpec,
    pub episode_id: String,
    pub model_version: u64,
    total_frames: usize,
    /// `None` for sessions restored from disk, which never score again.
    model: Option<RiskModel>,
    store: EpisodeStore,
    record_dir: PathBuf,
    inner: Mutex<Inner>,
    resumed: Condvar,
    tx: broadcast::Sender<SessionEvent>,
}

pub fn push_episode_id(session_id: &str) -> String {
    format!("push_{session_id}")
}

impl Session {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: String,
        skill: String,
        source: SourceSpec,
        total_frames: usize,
        model: RiskModel,
        model_version: u64,
        store: EpisodeStore,
        record_dir: PathBuf,
    ) -> Self {
        let (episode_id, pushed) = match &source {
            SourceSpec::Replay { episode_id, .. } => (episode_id.clone(), None),
            SourceSpec::Push { .. } => {
                let eid = push_episode_id(&id);
                let ep = EpisodeRecord::new(eid.clone(), skill.clone(), Provenance::TrainingExecution, vec![]);
                (eid, Some(ep))
            }
        };
        let mut inner = Inner {
            state: ExecutionState::new(ExecutionMode::Live),
            cursor: 0,
            verdicts: vec![],
            events: vec![],
            labels: vec![],
            pushed,
        };
        inner.events.push(SessionEvent::Phase {
            phase: Phase::Running,
            pending_frame: None,
            cursor: 0,
        });
        let (tx, _) = broadcast::channel(EVENT_CAPACITY);
        Session {
            id,
            skill,
            source,
            episode_id,
            model_version,
            total_frames,
            model: Some(model),
            store,
            record_dir,
            inner: Mutex::new(inner),
            resumed: Condvar::new(),
            tx,
        }
    }

    /// Rebuilds a completed session from its persisted record.
    pub fn restore(record: SessionRecord, store: EpisodeStore, record_dir: PathBuf) -> Self {
        let info = record.info;
        let (tx, _) = broadcast::channel(EVENT_CAPACITY);
        Session {
            id: info.session_id,
            skill: info.skill,
            source: info.source,
            episode_id: info.episode_id,
            model_version: info.model_version,
            total_frames: info.total_frames,
            model: None,
            store,
            record_dir,
            inner: Mutex::new(Inner {
                state: ExecutionState {
                    phase: info.phase,
                    pending_frame: info.pending_frame,
                    mode: ExecutionMode::Live,
                },
                cursor: info.cursor,
                verdicts: record.verdicts,
                events: record.events,
                labels: info.labels,
                pushed: None,
            }),
            resumed: Condvar::new(),
            tx,
        }
    }

    fn info_locked(&self, inner: &Inner) -> SessionInfo {
        SessionInfo {
            format_version: FORMAT_VERSION,
            session_id: self.id.clone(),
            skill: self.skill.clone(),
            source: self.source.clone(),
            episode_id: self.episode_id.clone(),
            model_version: self.model_version,
            phase: inner.state.phase,
            pending_frame: inner.state.pending_frame,
            cursor: inner.cursor,
            total_frames: self.total_frames,
            flagged_frames: inner.verdicts.iter().filter(|v| v.flag).map(|v| v.frame_index).collect(),
            labels: inner.labels.clone(),
        }
    }

    /// Writes the initial record so the id stays reserved across restarts.
    pub fn persist_initial(&self) -> Result<()> {
        self.persist(&self.inner.lock())
    }

    pub fn info(&self) -> SessionInfo {
        self.info_locked(&self.inner.lock())
    }

    pub fn verdicts(&self) -> Vec<RiskVerdict> {
        self.inner.lock().verdicts.clone()
    }

    /// Event history so far plus a receiver for everything after it.
    pub fn subscribe(&self) -> (Vec<SessionEvent>, broadcast::Receiver<SessionEvent>) {
        let inner = self.inner.lock();
        (inner.events.clone(), self.tx.subscribe())
    }

    fn emit(&self, inner: &mut Inner, ev: SessionEvent) {
        inner.events.push(ev.clone());
        // No subscribers is fine; history keeps the event.
        let _ = self.tx.send(ev);
    }

    fn phase_event(&self, inner: &mut Inner) {
        let ev = SessionEvent::Phase {
            phase: inner.state.phase,
            pending_frame: inner.state.pending_frame,
            cursor: inner.cursor,
        };
        self.emit(inner, ev);
    }

    fn score(&self, inner: &mut Inner, frame: &Frame) -> Result<RiskVerdict> {
        let model = self.model.as_ref().ok_or_else(|| ServiceError::SessionCompleted(self.id.clone()))?;
        let i = inner.cursor;
        let alpha = i as f64 / self.total_frames as f64;
        let verdict = model.evaluate_frame(frame, alpha, i)?;
        let before = inner.state.phase;
        inner.state = inner.state.step(&verdict)?;
        inner.cursor += 1;
        inner.verdicts.push(verdict);
        let phase = inner.state.phase;
        self.emit(inner, SessionEvent::verdict(&verdict, phase));
        if phase != before {
            self.phase_event(inner);
        }
        Ok(verdict)
    }

    fn complete_locked(&self, inner: &mut Inner) -> Result<()> {
        inner.state = inner.state.complete()?;
        if let Some(ep) = &inner.pushed {
            self.store.save(ep)?;
        }
        self.phase_event(inner);
        self.persist(inner)
    }

    fn persist(&self, inner: &Inner) -> Result<()> {
        let record = SessionRecord {
            info: self.info_locked(inner),
            verdicts: inner.verdicts.clone(),
            events: inner.events.clone(),
        };
        write_record(&self.record_dir, &record)
    }

    fn check_accepts(&self, inner: &Inner) -> Result<()> {
        match (inner.state.phase, inner.state.pending_frame) {
            (Phase::PausedAwaitingLabel, Some(p)) => Err(ServiceError::SessionPaused(self.id.clone(), p)),
            (Phase::Completed, _) => Err(ServiceError::SessionCompleted(self.id.clone())),
            _ => Ok(()),
        }
    }

    /// Scores one pushed frame at `alpha = cursor / expected_frames`. The
    /// session completes after the last expected frame.
    pub fn push_frame(&self, frame: Frame) -> Result<(RiskVerdict, Phase)> {
        if !matches!(self.source, SourceSpec::Push { .. }) {
            return Err(ServiceError::NotPushSource(self.id.clone()));
        }
        let mut inner = self.inner.lock();
        self.check_accepts(&inner)?;
        let verdict = self.score(&mut inner, &frame)?;
        if let Some(ep) = inner.pushed.as_mut() {
            ep.push_frame(frame);
        }
        if inner.cursor == self.total_frames && inner.state.accepts_frames() {
            self.complete_locked(&mut inner)?;
        }
        Ok((verdict, inner.state.phase))
    }

    /// Ends a push session early.
    pub fn close(&self) -> Result<SessionInfo> {
        if !matches!(self.source, SourceSpec::Push { .. }) {
            return Err(ServiceError::NotPushSource(self.id.clone()));
        }
        let mut inner = self.inner.lock();
        self.check_accepts(&inner)?;
        self.complete_locked(&mut inner)?;
        Ok(self.info_locked(&inner))
    }

    /// Supervisor label. Accepted for the pending frame of a paused session,
    /// which then resumes, or for any frame of a completed session.
    pub fn label(&self, frame_index: usize, label: Label) -> Result<SessionInfo> {
        let mut inner = self.inner.lock();
        let len = if self.is_replay() { self.total_frames } else { inner.cursor };
        if frame_index >= len {
            return Err(ServiceError::IndexOutOfRange { index: frame_index, len });
        }
        match inner.state.phase {
            Phase::PausedAwaitingLabel if inner.state.pending_frame == Some(frame_index) => {
                self.persist_label(&mut inner, frame_index, label)?;
                inner.state = inner.state.label_pending(frame_index)?;
                let phase = inner.state.phase;
                self.emit(&mut inner, SessionEvent::Label { frame_index, label, phase });
                self.phase_event(&mut inner);
                self.resumed.notify_all();
            }
            Phase::Completed => {
                self.persist_label(&mut inner, frame_index, label)?;
                let phase = inner.state.phase;
                self.emit(&mut inner, SessionEvent::Label { frame_index, label, phase });
                self.persist(&inner)?;
            }
            _ => return Err(ServiceError::NotPaused(self.id.clone(), frame_index)),
        }
        Ok(self.info_locked(&inner))
    }

    fn is_replay(&self) -> bool {
        matches!(self.source, SourceSpec::Replay { .. })
    }

    fn persist_label(&self, inner: &mut Inner, i: usize, label: Label) -> Result<()> {
        match inner.pushed.as_mut() {
            Some(ep) => {
                ep.label_frame(i, label, LABEL_SOURCE)?;
                self.store.save(ep)?;
            }
            None => {
                self.store.label(&self.episode_id, i, label, LABEL_SOURCE)?;
            }
        }
        inner.labels.push((i, label));
        Ok(())
    }

    /// Scores the stored episode frame by frame, blocking while paused.
    pub fn run_replay(&self, episode: &EpisodeRecord) -> Result<()> {
        let interval = match &self.source {
            SourceSpec::Replay { frame_interval_ms, .. } => std::time::Duration::from_millis(*frame_interval_ms),
            SourceSpec::Push { .. } => return Err(ServiceError::NotPushSource(self.id.clone())),
        };
        for frame in &episode.frames {
            if !interval.is_zero() {
                std::thread::sleep(interval);
            }
            let mut inner = self.inner.lock();
            while inner.state.phase == Phase::PausedAwaitingLabel {
                self.resumed.wait(&mut inner);
            }
            self.score(&mut inner, frame)?;
        }
        let mut inner = self.inner.lock();
        while inner.state.phase == Phase::PausedAwaitingLabel {
            self.resumed.wait(&mut inner);
        }
        self.complete_locked(&mut inner)
    }
}

pub fn record_path(dir: &Path, session_id: &str) -> PathBuf {
    dir.join(format!("{session_id}.json"))
}

fn write_record(dir: &Path, record: &SessionRecord) -> Result<()> {
    let path = record_path(dir, &record.info.session_id);
    let tmp = path.with_extension("json.tmp");
    let json = serde_json::to_vec(record).map_err(|e| ServiceError::Internal(e.to_string()))?;
    std::fs::write(&tmp, json).map_err(|e| ServiceError::Internal(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, &path).map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Completed sessions persisted under `dir`, ordered by id.
pub fn load_records(dir: &Path) -> Result<Vec<SessionRecord>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| ServiceError::Internal(format!("{}: {e}", dir.display())))?;
    for entry in entries.flatten() {
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "json") {
            let bytes = std::fs::read(&path).map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))?;
            let rec: SessionRecord = serde_json::from_slice(&bytes)
                .map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))?;
            out.push(rec);
        }
    }
    out.sort_by(|a, b| a.info.session_id.cmp(&b.info.session_id));
    Ok(out)
}
