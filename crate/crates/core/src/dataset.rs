//! Episodes, per-frame supervisor labels, anchor samples, the training view,
//! and the on-disk episode layout.
//!
//! An episode directory holds `manifest.json`, one binary PGM per frame
//! (`frame_000000.pgm`, ...), `labels.jsonl` with one `{"i","R","S"}` line per
//! labeled frame, and an append-only `audit.jsonl`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{AeModel, EncoderError};
use crate::frame::{Frame, FrameError};
use crate::numerics::Matrix;
use crate::synthgen::FaultSpec;

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_FPS: f64 = 20.0;
pub const ANCHOR_ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("frame index {index} out of range for episode of {len} frames")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("no admissible training samples")]
    EmptyView,
    #[error("corrupt episode {path}: {reason}")]
    CorruptEpisode { path: PathBuf, reason: String },
    #[error("unsupported episode format_version {0}")]
    UnsupportedVersion(u32),
    #[error("episode {0} not found")]
    NotFound(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> DatasetError {
    DatasetError::CorruptEpisode {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Demonstration,
    TrainingExecution,
    TestSeen,
    TestNovel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Safe,
    Risky,
}

impl Label {
    /// `(R, S)` bits.
    pub fn bits(self) -> (u8, u8) {
        match self {
            Label::Safe => (0, 1),
            Label::Risky => (1, 0),
        }
    }

    pub fn target(self) -> f64 {
        match self {
            Label::Safe => 0.0,
            Label::Risky => 1.0,
        }
    }
}

/// Ground-truth risky frames `[start, end)` for scoring; never used for
/// training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskyInterval {
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

impl RiskyInterval {
    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub i: usize,
    pub label: Label,
    pub previous: Option<Label>,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode_id: String,
    pub skill: String,
    pub fps: f64,
    pub provenance: Provenance,
    pub seed: Option<u64>,
    pub fault_spec: Option<FaultSpec>,
    pub frames: Vec<Frame>,
    labels: Vec<Option<Label>>,
    pub risky_intervals: Vec<RiskyInterval>,
    audit: Vec<AuditEntry>,
}

impl EpisodeRecord {
    pub fn new(episode_id: impl Into<String>, skill: impl Into<String>, provenance: Provenance, frames: Vec<Frame>) -> Self {
        let n = frames.len();
        EpisodeRecord {
            episode_id: episode_id.into(),
            skill: skill.into(),
            fps: DEFAULT_FPS,
            provenance,
            seed: None,
            fault_spec: None,
            frames,
            labels: vec![None; n],
            risky_intervals: vec![],
            audit: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Normalized time of frame `i`.
    pub fn alpha(&self, i: usize) -> f64 {
        i as f64 / self.frames.len() as f64
    }

    pub fn label(&self, i: usize) -> Option<Label> {
        self.labels.get(i).copied().flatten()
    }

    pub fn labels(&self) -> &[Option<Label>] {
        &self.labels
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    /// Appends an unlabeled frame, as when recording a live execution.
    pub fn push_frame(&mut self, frame: Frame) {
        self.frames.push(frame);
        self.labels.push(None);
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Sets frame `i` to `label`, overwriting any earlier label, and records
    /// the change in the audit log.
    pub fn label_frame(&mut self, i: usize, label: Label, source: &str) -> Result<AuditEntry> {
        if i >= self.frames.len() {
            return Err(DatasetError::IndexOutOfRange {
                index: i,
                len: self.frames.len(),
            });
        }
        let entry = AuditEntry {
            seq: self.audit.len() as u64,
            i,
            label,
            previous: self.labels[i],
            source: source.to_string(),
        };
        self.labels[i] = Some(label);
        self.audit.push(entry.clone());
        Ok(entry)
    }

    /// Labels frames `i-k ..= i+k`, clipped to the episode.
    pub fn label_brush(&mut self, i: usize, k: usize, label: Label, source: &str) -> Result<Vec<AuditEntry>> {
        if i >= self.frames.len() {
            return Err(DatasetError::IndexOutOfRange {
                index: i,
                len: self.frames.len(),
            });
        }
        let hi = (i + k).min(self.frames.len() - 1);
        (i.saturating_sub(k)..=hi).map(|j| self.label_frame(j, label, source)).collect()
    }

    /// An execution containing at least one risky label. Demonstrations and
    /// executions without a risky label are fault-free.
    pub fn has_fault_labels(&self) -> bool {
        self.provenance != Provenance::Demonstration && self.labels.contains(&Some(Label::Risky))
    }

    /// Frames admitted to the training view with their targets.
    pub fn admissible(&self) -> Vec<(usize, Label)> {
        if self.has_fault_labels() {
            self.labels
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.map(|l| (i, l)))
                .collect()
        } else {
            (0..self.frames.len())
                .map(|i| (i, self.labels[i].unwrap_or(Label::Safe)))
                .collect()
        }
    }

    pub fn is_risky_truth(&self, i: usize) -> bool {
        self.risky_intervals.iter().any(|iv| iv.contains(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSample {
    pub frame: Frame,
    pub alpha: f64,
}

/// All-white and all-black frames at each α in [`ANCHOR_ALPHAS`].
pub fn default_anchors() -> Vec<AnchorSample> {
    let mut v = Vec::new();
    for frame in [Frame::white(), Frame::black()] {
        for &alpha in &ANCHOR_ALPHAS {
            v.push(AnchorSample {
                frame: frame.clone(),
                alpha,
            });
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum RowSource {
    Episode { episode_id: String, i: usize },
    Anchor { index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingView {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub sources: Vec<RowSource>,
}

impl TrainingView {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn risky_count(&self) -> usize {
        self.y.iter().filter(|v| **v == 1.0).count()
    }
}

/// Builds the training view: fault-free executions contribute every frame as
/// safe, executions with risky labels contribute only their labeled frames,
/// and anchors are appended as risky rows.
pub fn selected_view(episodes: &[&EpisodeRecord], ae: &AeModel, anchors: &[AnchorSample]) -> Result<TrainingView> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    let mut sources = Vec::new();
    for ep in episodes {
        let adm = ep.admissible();
        if adm.is_empty() {
            continue;
        }
        let frames: Vec<Frame> = adm.iter().map(|(i, _)| ep.frames[*i].clone()).collect();
        for ((i, label), h) in adm.iter().zip(ae.encode_batch(&frames)?) {
            let mut o = h.0;
            o.push(ep.alpha(*i));
            rows.push(o);
            y.push(label.target());
            sources.push(RowSource::Episode {
                episode_id: ep.episode_id.clone(),
                i: *i,
            });
        }
    }
    if !anchors.is_empty() {
        let frames: Vec<Frame> = anchors.iter().map(|a| a.frame.clone()).collect();
        for (k, (a, h)) in anchors.iter().zip(ae.encode_batch(&frames)?).enumerate() {
            let mut o = h.0;
            o.push(a.alpha);
            rows.push(o);
            y.push(1.0);
            sources.push(RowSource::Anchor { index: k });
        }
    }
    if rows.is_empty() {
        return Err(DatasetError::EmptyView);
    }
    Ok(TrainingView {
        x: Matrix::from_rows(&rows),
        y,
        sources,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    episode_id: String,
    skill: String,
    fps: f64,
    #[serde(rename = "N")]
    n: usize,
    provenance: Provenance,
    seed: Option<u64>,
    fault_spec: Option<FaultSpec>,
    #[serde(default)]
    risky_intervals: Vec<RiskyInterval>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelLine {
    i: usize,
    #[serde(rename = "R")]
    r: u8,
    #[serde(rename = "S")]
    s: u8,
}

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:06}.pgm")
}

fn labels_jsonl(ep: &EpisodeRecord) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, l) in ep.labels.iter().enumerate() {
        if let Some(l) = l {
            let (r, s) = l.bits();
            serde_json::to_writer(&mut out, &LabelLine { i, r, s }).expect("label line serializes");
            out.push(b'\n');
        }
    }
    out
}

fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, data).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Writes an episode directory. Frames and labels go first and the manifest
/// last, so a directory with a manifest is complete.
pub fn save_episode(ep: &EpisodeRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, f) in ep.frames.iter().enumerate() {
        let p = dir.join(frame_file_name(i));
        fs::write(&p, f.to_pgm()).map_err(io_err(&p))?;
    }
    write_atomic(&dir.join("labels.jsonl"), &labels_jsonl(ep))?;
    let mut audit = Vec::new();
    for e in &ep.audit {
        serde_json::to_writer(&mut audit, e).expect("audit entry serializes");
        audit.push(b'\n');
    }
    write_atomic(&dir.join("audit.jsonl"), &audit)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        episode_id: ep.episode_id.clone(),
        skill: ep.skill.clone(),
        fps: ep.fps,
        n: ep.frames.len(),
        provenance: ep.provenance,
        seed: ep.seed,
        fault_spec: ep.fault_spec.clone(),
        risky_intervals: ep.risky_intervals.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), &json)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(vec![]);
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, l)| serde_json::from_str(l).map_err(|e| corrupt(path, format!("line {}: {e}", k + 1))))
        .collect()
}

pub fn load_episode(dir: &Path) -> Result<EpisodeRecord> {
    let mpath = dir.join("manifest.json");
    let bytes = fs::read(&mpath).map_err(io_err(&mpath))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| corrupt(&mpath, e.to_string()))?;
    match raw.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(DatasetError::UnsupportedVersion(v as u32)),
        None => return Err(corrupt(&mpath, "missing format_version")),
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| corrupt(&mpath, e.to_string()))?;
    if m.n == 0 {
        return Err(corrupt(dir, "episode has no frames"));
    }
    let mut frames = Vec::with_capacity(m.n);
    for i in 0..m.n {
        let p = dir.join(frame_file_name(i));
        if !p.exists() {
            return Err(corrupt(dir, format!("manifest declares N={} but {} is missing", m.n, frame_file_name(i))));
        }
        let data = fs::read(&p).map_err(io_err(&p))?;
        frames.push(Frame::from_pgm(&data).map_err(|e: FrameError| corrupt(&p, e.to_string()))?);
    }
    if dir.join(frame_file_name(m.n)).exists() {
        return Err(corrupt(dir, format!("frame files beyond declared N={}", m.n)));
    }
    let mut ep = EpisodeRecord::new(m.episode_id, m.skill, m.provenance, frames);
    ep.fps = m.fps;
    ep.seed = m.seed;
    ep.fault_spec = m.fault_spec;
    for iv in &m.risky_intervals {
        if iv.start > iv.end || iv.end > m.n {
            return Err(corrupt(&mpath, format!("risky interval {}..{} outside episode", iv.start, iv.end)));
        }
    }
    ep.risky_intervals = m.risky_intervals;
    let lpath = dir.join("labels.jsonl");
    for line in read_jsonl::<LabelLine>(&lpath)? {
        if line.i >= m.n {
            return Err(corrupt(&lpath, format!("label index {} beyond N={}", line.i, m.n)));
        }
        ep.labels[line.i] = match (line.r, line.s) {
            (1, 0) => Some(Label::Risky),
            (0, 1) => Some(Label::Safe),
            (0, 0) => None,
            (r, s) => return Err(corrupt(&lpath, format!("invalid label bits R={r} S={s} at frame {}", line.i))),
        };
    }
    ep.audit = read_jsonl(&dir.join("audit.jsonl"))?;
    Ok(ep)
}

/// Episodes stored as sibling directories under one root, keyed by id.
#[derive(Debug, Clone)]
pub struct EpisodeStore {
    root: PathBuf,
}

impl EpisodeStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(EpisodeStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir_for(&self, episode_id: &str) -> PathBuf {
        self.root.join(episode_id)
    }

    pub fn save(&self, ep: &EpisodeRecord) -> Result<()> {
        save_episode(ep, &self.dir_for(&ep.episode_id))
    }

    pub fn load(&self, episode_id: &str) -> Result<EpisodeRecord> {
        let dir = self.dir_for(episode_id);
        if !dir.join("manifest.json").exists() {
            return Err(DatasetError::NotFound(episode_id.to_string()));
        }
        load_episode(&dir)
    }

    /// Ids of all complete episode directories, sorted.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io_err(&self.root))? {
            let entry = entry.map_err(io_err(&self.root))?;
            if entry.path().join("manifest.json").is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn load_all(&self) -> Result<Vec<EpisodeRecord>> {
        self.list()?.iter().map(|id| self.load(id)).collect()
    }

    /// Loads a single frame without decoding the rest of the episode.
    pub fn frame_pgm(&self, episode_id: &str, i: usize) -> Result<Vec<u8>> {
        let dir = self.dir_for(episode_id);
        if !dir.join("manifest.json").exists() {
            return Err(DatasetError::NotFound(episode_id.to_string()));
        }
        let p = dir.join(frame_file_name(i));
        if !p.exists() {
            let n = fs::read_dir(&dir)
                .map_err(io_err(&dir))?
                .filter(|e| e.as_ref().map(|e| e.file_name().to_string_lossy().ends_with(".pgm")).unwrap_or(false))
                .count();
            return Err(DatasetError::IndexOutOfRange { index: i, len: n });
        }
        fs::read(&p).map_err(io_err(&p))
    }

    /// Applies a label and persists it: the audit line is appended before
    /// the label file is rewritten.
    pub fn label(&self, episode_id: &str, i: usize, label: Label, source: &str) -> Result<EpisodeRecord> {
        let mut ep = self.load(episode_id)?;
        let entry = ep.label_frame(i, label, source)?;
        let dir = self.dir_for(episode_id);
        let apath = dir.join("audit.jsonl");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&apath)
            .map_err(io_err(&apath))?;
        let mut line = serde_json::to_vec(&entry).expect("audit entry serializes");
        line.push(b'\n');
        f.write_all(&line).map_err(io_err(&apath))?;
        write_atomic(&dir.join("labels.jsonl"), &labels_jsonl(&ep))?;
        Ok(ep)
    }
}

/// Episodes grouped by skill, preserving input order within each skill.
pub fn by_skill(episodes: &[EpisodeRecord]) -> BTreeMap<String, Vec<&EpisodeRecord>> {
    let mut m: BTreeMap<String, Vec<&EpisodeRecord>> = BTreeMap::new();
    for ep in episodes {
        m.entry(ep.skill.clone()).or_default().push(ep);
    }
    m
}
