//! Scoring of verdict streams against ground truth, the data-aggregation
//! study, the rotation sweep, and report files.
//!
//! Inference and scoring are separate: [`infer`] turns episodes into
//! verdicts with any [`RiskModel`], and [`score`] compares verdicts with the
//! ground-truth intervals.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{default_anchors, selected_view, DatasetError, EpisodeRecord, Provenance};
use crate::encoder::{AeModel, EncoderError, LatentVector};
use crate::estimator::{EstimatorConfig, EstimatorError, EstimatorRegistry};
use crate::riskcore::{RiskError, RiskModel, RiskVerdict};

pub const REPORT_VERSION: u32 = 1;
/// False-alarm runs closer than this many frames count as one event.
pub const MERGE_GAP: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("episode {0} has no ground truth")]
    MissingGroundTruth(String),
    #[error("need {needed} training episodes, have {available}")]
    InsufficientEpisodes { needed: usize, available: usize },
    #[error("nothing to report")]
    EmptyReport,
    #[error("verdict count {got} does not match episode {episode} length {expected}")]
    VerdictMismatch { episode: String, expected: usize, got: usize },
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("report i/o on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    Frame,
    Segment,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }

    pub fn ratios(&self) -> Ratios {
        let r = |num: u64, den: u64| if den > 0 { Some(num as f64 / den as f64) } else { None };
        Ratios {
            accuracy: r(self.tp + self.tn, self.total()),
            recall: r(self.tp, self.tp + self.fn_),
            precision: r(self.tp, self.tp + self.fp),
            npv: r(self.tn, self.tn + self.fn_),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub accuracy: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub npv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub mode: SegmentMode,
    pub counts: Counts,
    /// Counts grouped by the fault kind of each episode (`none` for clean).
    pub per_fault: BTreeMap<String, Counts>,
}

impl SegmentMetrics {
    pub fn ratios(&self) -> Ratios {
        self.counts.ratios()
    }

    pub fn accuracy(&self) -> f64 {
        self.ratios().accuracy.unwrap_or(0.0)
    }

    pub fn recall(&self) -> f64 {
        self.ratios().recall.unwrap_or(0.0)
    }
}

/// Verdicts for one episode.
pub struct EpisodeOutputs<'a> {
    pub episode: &'a EpisodeRecord,
    pub verdicts: Vec<RiskVerdict>,
}

/// Latents and reconstruction losses for an episode, computed once and
/// reused across estimators.
pub struct EncodedEpisode<'a> {
    pub episode: &'a EpisodeRecord,
    pub encoded: Vec<(LatentVector, f64)>,
}

pub fn encode_episodes<'a>(ae: &AeModel, episodes: &[&'a EpisodeRecord]) -> Result<Vec<EncodedEpisode<'a>>> {
    episodes
        .iter()
        .map(|ep| {
            Ok(EncodedEpisode {
                episode: ep,
                encoded: ae.encode_with_loss(&ep.frames)?,
            })
        })
        .collect()
}

/// Replay-mode verdicts for pre-encoded episodes.
pub fn infer<'a>(model: &RiskModel, encoded: &[EncodedEpisode<'a>]) -> Result<Vec<EpisodeOutputs<'a>>> {
    encoded
        .iter()
        .map(|e| {
            Ok(EpisodeOutputs {
                episode: e.episode,
                verdicts: model.evaluate_encoded(&e.encoded)?,
            })
        })
        .collect()
}

fn fault_name(ep: &EpisodeRecord) -> Result<String> {
    match &ep.fault_spec {
        Some(f) => Ok(f.name().to_string()),
        None if !ep.risky_intervals.is_empty() => Ok("unspecified".to_string()),
        None => Err(EvalError::MissingGroundTruth(ep.episode_id.clone())),
    }
}

/// Scores one episode's flags against its intervals. Frames with
/// `include[i] == false` are treated as unscored.
pub fn score_flags(ep: &EpisodeRecord, flags: &[bool], include: &[bool], mode: SegmentMode) -> Counts {
    let n = ep.len();
    let truth: Vec<bool> = (0..n).map(|i| ep.is_risky_truth(i)).collect();
    let mut c = Counts::default();
    match mode {
        SegmentMode::Frame => {
            for i in (0..n).filter(|&i| include[i]) {
                match (truth[i], flags[i]) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fn_ += 1,
                    (false, true) => c.fp += 1,
                    (false, false) => c.tn += 1,
                }
            }
        }
        SegmentMode::Segment => {
            for iv in &ep.risky_intervals {
                if !(iv.start..iv.end).any(|i| include[i]) {
                    continue;
                }
                if (iv.start..iv.end).any(|i| include[i] && flags[i]) {
                    c.tp += 1;
                } else {
                    c.fn_ += 1;
                }
            }
            // false-alarm runs: flagged safe frames, merged across short gaps
            let mut run_starts = Vec::new();
            let mut last: Option<usize> = None;
            for i in (0..n).filter(|&i| include[i] && flags[i] && !truth[i]) {
                match last {
                    Some(l) if i - l - 1 < MERGE_GAP => {}
                    _ => run_starts.push(i),
                }
                last = Some(i);
            }
            // each maximal safe region is one negative unless it holds alarms
            let mut i = 0;
            while i < n {
                if truth[i] {
                    i += 1;
                    continue;
                }
                let start = i;
                while i < n && !truth[i] {
                    i += 1;
                }
                if !(start..i).any(|k| include[k]) {
                    continue;
                }
                let alarms = run_starts.iter().filter(|&&s| s >= start && s < i).count() as u64;
                if alarms == 0 {
                    c.tn += 1;
                } else {
                    c.fp += alarms;
                }
            }
        }
    }
    c
}

/// Scores verdicts; with `exclude_unreliable`, frames whose reconstruction
/// was flagged unreliable are left out.
pub fn score(outputs: &[EpisodeOutputs<'_>], mode: SegmentMode, exclude_unreliable: bool) -> Result<SegmentMetrics> {
    let mut counts = Counts::default();
    let mut per_fault: BTreeMap<String, Counts> = BTreeMap::new();
    for o in outputs {
        if o.verdicts.len() != o.episode.len() {
            return Err(EvalError::VerdictMismatch {
                episode: o.episode.episode_id.clone(),
                expected: o.episode.len(),
                got: o.verdicts.len(),
            });
        }
        let name = fault_name(o.episode)?;
        let flags: Vec<bool> = o.verdicts.iter().map(|v| v.flag).collect();
        let include: Vec<bool> = o.verdicts.iter().map(|v| !(exclude_unreliable && v.recon_unreliable)).collect();
        let c = score_flags(o.episode, &flags, &include, mode);
        counts.add(&c);
        per_fault.entry(name).or_default().add(&c);
    }
    Ok(SegmentMetrics {
        mode,
        counts,
        per_fault,
    })
}

/// Full evaluation: replay inference followed by scoring.
pub fn evaluate(model: &RiskModel, episodes: &[&EpisodeRecord], mode: SegmentMode) -> Result<SegmentMetrics> {
    let encoded = encode_episodes(&model.ae, episodes)?;
    score(&infer(model, &encoded)?, mode, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub num_training_episodes: usize,
    pub accuracy: f64,
    pub recall: f64,
    pub seen_accuracy: f64,
    pub novel_recall: f64,
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationCurve {
    pub skill: String,
    pub points: Vec<CurvePoint>,
}

/// Retrains the risk estimator on the first `k` training episodes (sorted
/// by id) plus anchors for `k = 1..=max_episodes`, scoring each model on the
/// held-out tests in segment mode.
#[allow(clippy::too_many_arguments)]
pub fn aggregation_study(
    skill: &str,
    ae: &Arc<AeModel>,
    training: &[&EpisodeRecord],
    tests: &[&EpisodeRecord],
    max_episodes: usize,
    estimator: &str,
    cfg: &EstimatorConfig,
    tau: f64,
) -> Result<AggregationCurve> {
    if training.len() < max_episodes || max_episodes == 0 {
        return Err(EvalError::InsufficientEpisodes {
            needed: max_episodes.max(1),
            available: training.len(),
        });
    }
    let mut ordered: Vec<&EpisodeRecord> = training.to_vec();
    ordered.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    let encoded = encode_episodes(ae, tests)?;
    let registry = EstimatorRegistry::default();
    let anchors = default_anchors();
    let mut points = Vec::new();
    for k in 1..=max_episodes {
        let view = selected_view(&ordered[..k], ae, &anchors)?;
        let est = registry.train(estimator, &view, cfg)?;
        let model = RiskModel {
            ae: ae.clone(),
            estimator: Arc::from(est),
            tau,
        };
        let outputs = infer(&model, &encoded)?;
        let all = score(&outputs, SegmentMode::Segment, false)?;
        let (seen, novel): (Vec<_>, Vec<_>) = outputs
            .into_iter()
            .partition(|o| o.episode.provenance != Provenance::TestNovel);
        let seen_m = score(&seen, SegmentMode::Segment, false)?;
        let novel_m = score(&novel, SegmentMode::Segment, false)?;
        points.push(CurvePoint {
            num_training_episodes: k,
            accuracy: all.accuracy(),
            recall: all.recall(),
            seen_accuracy: seen_m.accuracy(),
            novel_recall: novel_m.recall(),
            counts: all.counts,
        });
    }
    Ok(AggregationCurve {
        skill: skill.to_string(),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub angle: f64,
    pub mean_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// First angle whose mean risk exceeds the threshold.
    pub crossing_angle: Option<f64>,
}

/// Fraction of the episode before the grasp used for the sweep average.
pub const APPROACH_FRACTION: f64 = 0.5;

/// Mean risk over the approach frames of each `(angle, episode)` pair.
pub fn deviation_sweep(model: &RiskModel, episodes: &[(f64, &EpisodeRecord)]) -> Result<SweepResult> {
    let mut points = Vec::new();
    for (angle, ep) in episodes {
        let end = ((ep.len() as f64 * APPROACH_FRACTION) as usize).max(1);
        let verdicts = model.evaluate_episode(&ep.frames)?;
        let mean_r = verdicts[..end].iter().map(|v| v.r).sum::<f64>() / end as f64;
        points.push(SweepPoint { angle: *angle, mean_r });
    }
    let crossing_angle = points.iter().find(|p| p.mean_r > model.tau).map(|p| p.angle);
    Ok(SweepResult { points, crossing_angle })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub skill: String,
    pub estimator: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<ReportMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curve: Option<AggregationCurve>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub mode: SegmentMode,
    pub counts: Counts,
    pub ratios: Ratios,
    pub per_fault: BTreeMap<String, Counts>,
}

impl From<&SegmentMetrics> for ScoredSet {
    fn from(m: &SegmentMetrics) -> Self {
        ScoredSet {
            mode: m.mode,
            counts: m.counts,
            ratios: m.ratios(),
            per_fault: m.per_fault.clone(),
        }
    }
}

/// Seen and novel test sets, each with unreliable frames included and
/// excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub seen: ScoredSet,
    pub novel: ScoredSet,
    pub seen_excluding_unreliable: ScoredSet,
    pub novel_excluding_unreliable: ScoredSet,
    pub seen_frames: ScoredSet,
    pub novel_frames: ScoredSet,
}

/// Scores seen and novel tests every way the report publishes.
pub fn report_metrics(outputs: &[EpisodeOutputs<'_>]) -> Result<ReportMetrics> {
    let seen: Vec<&EpisodeOutputs<'_>> = outputs.iter().filter(|o| o.episode.provenance != Provenance::TestNovel).collect();
    let novel: Vec<&EpisodeOutputs<'_>> = outputs.iter().filter(|o| o.episode.provenance == Provenance::TestNovel).collect();
    let run = |set: &[&EpisodeOutputs<'_>], mode, excl| -> Result<ScoredSet> {
        let owned: Vec<EpisodeOutputs<'_>> = set
            .iter()
            .map(|o| EpisodeOutputs {
                episode: o.episode,
                verdicts: o.verdicts.clone(),
            })
            .collect();
        Ok(ScoredSet::from(&score(&owned, mode, excl)?))
    };
    Ok(ReportMetrics {
        seen: run(&seen, SegmentMode::Segment, false)?,
        novel: run(&novel, SegmentMode::Segment, false)?,
        seen_excluding_unreliable: run(&seen, SegmentMode::Segment, true)?,
        novel_excluding_unreliable: run(&novel, SegmentMode::Segment, true)?,
        seen_frames: run(&seen, SegmentMode::Frame, false)?,
        novel_frames: run(&novel, SegmentMode::Frame, false)?,
    })
}

fn write(path: &Path, data: &[u8]) -> Result<()> {
    std::fs::write(path, data).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{:.4}", x)).unwrap_or_default()
}

/// Writes `report.json` plus CSV tables for whichever parts are present.
/// Returns the paths written.
pub fn write_report(report: &Report, out: &Path) -> Result<Vec<std::path::PathBuf>> {
    if report.metrics.is_none() && report.curve.is_none() && report.sweep.is_none() {
        return Err(EvalError::EmptyReport);
    }
    std::fs::create_dir_all(out).map_err(|source| EvalError::Io {
        path: out.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    let json_path = out.join("report.json");
    let mut json = serde_json::to_vec_pretty(report).expect("report serializes");
    json.push(b'\n');
    write(&json_path, &json)?;
    written.push(json_path);
    if let Some(m) = &report.metrics {
        let mut csv = String::from("set,mode,tp,fp,tn,fn,accuracy,recall,precision,npv\n");
        for (name, s) in [
            ("seen", &m.seen),
            ("novel", &m.novel),
            ("seen_excluding_unreliable", &m.seen_excluding_unreliable),
            ("novel_excluding_unreliable", &m.novel_excluding_unreliable),
            ("seen_frames", &m.seen_frames),
            ("novel_frames", &m.novel_frames),
        ] {
            let mode = match s.mode {
                SegmentMode::Frame => "frame",
                SegmentMode::Segment => "segment",
            };
            csv.push_str(&format!(
                "{name},{mode},{},{},{},{},{},{},{},{}\n",
                s.counts.tp,
                s.counts.fp,
                s.counts.tn,
                s.counts.fn_,
                fmt_opt(s.ratios.accuracy),
                fmt_opt(s.ratios.recall),
                fmt_opt(s.ratios.precision),
                fmt_opt(s.ratios.npv)
            ));
        }
        let p = out.join("metrics.csv");
        write(&p, csv.as_bytes())?;
        written.push(p);
    }
    if let Some(c) = &report.curve {
        let mut csv = String::from("num_training_episodes,accuracy,recall,seen_accuracy,novel_recall\n");
        for p in &c.points {
            csv.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4}\n",
                p.num_training_episodes, p.accuracy, p.recall, p.seen_accuracy, p.novel_recall
            ));
        }
        let p = out.join("curve.csv");
        write(&p, csv.as_bytes())?;
        written.push(p);
    }
    if let Some(s) = &report.sweep {
        let mut csv = String::from("angle,mean_r\n");
        for p in &s.points {
            csv.push_str(&format!("{},{:.4}\n", p.angle, p.mean_r));
        }
        let p = out.join("sweep.csv");
        write(&p, csv.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::RiskyInterval;
    use crate::frame::Frame;
    use crate::synthgen::FaultSpec;

    fn ep(n: usize, intervals: &[(usize, usize)]) -> EpisodeRecord {
        let mut e = EpisodeRecord::new("e", "pick_peg", Provenance::TestSeen, vec![Frame::black(); n]);
        e.fault_spec = Some(if intervals.is_empty() { FaultSpec::None } else { FaultSpec::PegMissing });
        e.risky_intervals = intervals
            .iter()
            .map(|&(s, t)| RiskyInterval {
                start: s,
                end: t,
                kind: "peg_missing".into(),
            })
            .collect();
        e
    }

    fn verdicts(flags: &[bool]) -> Vec<RiskVerdict> {
        flags
            .iter()
            .enumerate()
            .map(|(i, &f)| RiskVerdict {
                frame_index: i,
                r: if f { 1.0 } else { 0.0 },
                mu: 0.0,
                sigma: 0.0,
                flag: f,
                recon_unreliable: i == 0,
            })
            .collect()
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let e = ep(50, &[(10, 20), (30, 35)]);
        let flags: Vec<bool> = (0..50).map(|i| e.is_risky_truth(i)).collect();
        for mode in [SegmentMode::Frame, SegmentMode::Segment] {
            let m = score(
                &[EpisodeOutputs {
                    episode: &e,
                    verdicts: verdicts(&flags),
                }],
                mode,
                false,
            )
            .unwrap();
            assert_eq!(m.accuracy(), 1.0);
            assert_eq!((m.counts.fp, m.counts.fn_), (0, 0));
        }
    }

    #[test]
    fn npv_definition() {
        let c = Counts {
            tp: 0,
            fp: 0,
            tn: 95,
            fn_: 5,
        };
        assert_eq!(c.ratios().npv, Some(0.95));
        assert_eq!(c.ratios().precision, None);
    }

    #[test]
    fn segment_rules() {
        let e = ep(60, &[(10, 20)]);
        let mut flags = vec![false; 60];
        flags[15] = true; // detects the interval
        flags[30] = true;
        flags[33] = true; // merged with 30
        flags[45] = true; // separate alarm
        let c = score_flags(&e, &flags, &[true; 60], SegmentMode::Segment);
        assert_eq!(
            c,
            Counts {
                tp: 1,
                fp: 2,
                tn: 1,
                fn_: 0
            }
        );
        let c = score_flags(&e, &[false; 60], &[true; 60], SegmentMode::Segment);
        assert_eq!(
            c,
            Counts {
                tp: 0,
                fp: 0,
                tn: 2,
                fn_: 1
            }
        );
    }

    #[test]
    fn excluding_unreliable_drops_frames() {
        let e = ep(10, &[]);
        let mut flags = vec![false; 10];
        flags[0] = true;
        let outs = [EpisodeOutputs {
            episode: &e,
            verdicts: verdicts(&flags),
        }];
        assert_eq!(score(&outs, SegmentMode::Frame, false).unwrap().counts.fp, 1);
        let ex = score(&outs, SegmentMode::Frame, true).unwrap();
        assert_eq!((ex.counts.fp, ex.counts.tn), (0, 9));
    }

    #[test]
    fn missing_truth_is_an_error() {
        let mut e = ep(5, &[]);
        e.fault_spec = None;
        let outs = [EpisodeOutputs {
            episode: &e,
            verdicts: verdicts(&[false; 5]),
        }];
        assert!(matches!(score(&outs, SegmentMode::Frame, false), Err(EvalError::MissingGroundTruth(_))));
    }

    #[test]
    fn report_is_byte_stable() {
        let e = ep(20, &[(5, 8)]);
        let outs = [EpisodeOutputs {
            episode: &e,
            verdicts: verdicts(&[true; 20]),
        }];
        let report = Report {
            format_version: REPORT_VERSION,
            skill: "pick_peg".into(),
            estimator: "gp".into(),
            metrics: Some(report_metrics(&outs).unwrap()),
            curve: None,
            sweep: Some(SweepResult {
                points: vec![SweepPoint { angle: 0.0, mean_r: 0.1 }],
                crossing_angle: None,
            }),
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let w = write_report(&report, d1.path()).unwrap();
        write_report(&report, d2.path()).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(
            std::fs::read(d1.path().join("report.json")).unwrap(),
            std::fs::read(d2.path().join("report.json")).unwrap()
        );
        let empty = Report {
            metrics: None,
            sweep: None,
            ..report
        };
        assert!(matches!(write_report(&empty, d1.path()), Err(EvalError::EmptyReport)));
    }
}
