//! Observation assembly, the risk score/flag law, and the stop-signal state
//! machine.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{AeModel, EncoderError, LatentVector};
use crate::estimator::{EstimatorError, RiskEstimator};
use crate::frame::Frame;

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("normalized time {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("negative sigma {0}")]
    NegativeSigma(f64),
    #[error("illegal transition: {action} while {phase:?}")]
    IllegalTransition { phase: Phase, action: &'static str },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

pub type Result<T> = std::result::Result<T, RiskError>;

/// Latent embedding with normalized time appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn alpha(&self) -> f64 {
        *self.0.last().expect("observation is never empty")
    }
}

pub fn assemble_observation(h: &LatentVector, alpha: f64) -> Result<Observation> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(RiskError::AlphaOutOfRange(alpha));
    }
    let mut o = Vec::with_capacity(h.len() + 1);
    o.extend_from_slice(h.as_slice());
    o.push(alpha);
    Ok(Observation(o))
}

/// `clip(mu + sigma)` to `[0, 1]`.
pub fn risk_score(mu: f64, sigma: f64) -> Result<f64> {
    if sigma < 0.0 || sigma.is_nan() {
        return Err(RiskError::NegativeSigma(sigma));
    }
    Ok((mu + sigma).clamp(0.0, 1.0))
}

/// Strict threshold: a score equal to `tau` is not flagged.
pub fn risk_flag(r: f64, tau: f64) -> bool {
    r > tau
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskVerdict {
    pub frame_index: usize,
    pub r: f64,
    pub mu: f64,
    pub sigma: f64,
    pub flag: bool,
    pub recon_unreliable: bool,
}

impl RiskVerdict {
    pub fn new(frame_index: usize, mu: f64, sigma: f64, tau: f64, recon_unreliable: bool) -> Result<Self> {
        let r = risk_score(mu, sigma)?;
        Ok(RiskVerdict {
            frame_index,
            r,
            mu,
            sigma,
            flag: risk_flag(r, tau),
            recon_unreliable,
        })
    }
}

/// Encoder plus risk estimator; the unit that scores frames.
#[derive(Clone)]
pub struct RiskModel {
    pub ae: std::sync::Arc<AeModel>,
    pub estimator: std::sync::Arc<dyn RiskEstimator>,
    pub tau: f64,
}

impl RiskModel {
    /// Scores one frame at normalized time `alpha`.
    pub fn evaluate_frame(&self, frame: &Frame, alpha: f64, frame_index: usize) -> Result<RiskVerdict> {
        let (h, loss) = self
            .ae
            .encode_with_loss(std::slice::from_ref(frame))?
            .pop()
            .expect("one frame in, one result out");
        self.verdict_for(&h, loss, alpha, frame_index)
    }

    /// Scores all frames of an episode in replay (non-interrupting) mode.
    /// Frame `i` is scored at `alpha = i / n`.
    pub fn evaluate_episode(&self, frames: &[Frame]) -> Result<Vec<RiskVerdict>> {
        self.evaluate_encoded(&self.ae.encode_with_loss(frames)?)
    }

    /// Same as [`RiskModel::evaluate_episode`] for frames already passed
    /// through the encoder.
    pub fn evaluate_encoded(&self, encoded: &[(LatentVector, f64)]) -> Result<Vec<RiskVerdict>> {
        let n = encoded.len();
        encoded
            .iter()
            .enumerate()
            .map(|(i, (h, loss))| self.verdict_for(h, *loss, i as f64 / n as f64, i))
            .collect()
    }

    fn verdict_for(&self, h: &LatentVector, loss: f64, alpha: f64, frame_index: usize) -> Result<RiskVerdict> {
        let o = assemble_observation(h, alpha)?;
        let p = self.estimator.predict(&o)?;
        let unreliable = self.ae.reconstruction_unreliable(loss)?;
        RiskVerdict::new(frame_index, p.mu, p.sigma, self.tau, unreliable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Running,
    PausedAwaitingLabel,
    Resumed,
    Completed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Flags pause execution until a supervisor label arrives.
    Live,
    /// Flags are recorded but execution never pauses.
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionState {
    pub phase: Phase,
    pub pending_frame: Option<usize>,
    pub mode: ExecutionMode,
}

impl ExecutionState {
    pub fn new(mode: ExecutionMode) -> Self {
        ExecutionState {
            phase: Phase::Running,
            pending_frame: None,
            mode,
        }
    }

    pub fn accepts_frames(&self) -> bool {
        matches!(self.phase, Phase::Running | Phase::Resumed)
    }

    pub fn step(self, verdict: &RiskVerdict) -> Result<Self> {
        if !self.accepts_frames() {
            return Err(RiskError::IllegalTransition {
                phase: self.phase,
                action: "step",
            });
        }
        if verdict.flag && self.mode == ExecutionMode::Live {
            return Ok(ExecutionState {
                phase: Phase::PausedAwaitingLabel,
                pending_frame: Some(verdict.frame_index),
                mode: self.mode,
            });
        }
        Ok(self)
    }

    /// Supervisor label for the pending frame; the only way out of a pause.
    pub fn label_pending(self, frame_index: usize) -> Result<Self> {
        match (self.phase, self.pending_frame) {
            (Phase::PausedAwaitingLabel, Some(p)) if p == frame_index => Ok(ExecutionState {
                phase: Phase::Resumed,
                pending_frame: None,
                mode: self.mode,
            }),
            _ => Err(RiskError::IllegalTransition {
                phase: self.phase,
                action: "label",
            }),
        }
    }

    pub fn complete(self) -> Result<Self> {
        if !self.accepts_frames() {
            return Err(RiskError::IllegalTransition {
                phase: self.phase,
                action: "complete",
            });
        }
        Ok(ExecutionState {
            phase: Phase::Completed,
            pending_frame: None,
            mode: self.mode,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn verdict(i: usize, flag: bool) -> RiskVerdict {
        RiskVerdict {
            frame_index: i,
            r: if flag { 0.9 } else { 0.1 },
            mu: 0.0,
            sigma: 0.0,
            flag,
            recon_unreliable: false,
        }
    }

    #[test]
    fn observation_appends_alpha() {
        let h = LatentVector(vec![0.25; 12]);
        let o = assemble_observation(&h, 0.5).unwrap();
        assert_eq!(o.dim(), 13);
        assert_eq!(o.alpha(), 0.5);
        assert_eq!(&o.as_slice()[..12], h.as_slice());
        assert_eq!(assemble_observation(&h, 0.0).unwrap().alpha(), 0.0);
        assert!(matches!(assemble_observation(&h, 1.01), Err(RiskError::AlphaOutOfRange(_))));
    }

    #[test]
    fn score_examples() {
        assert!((risk_score(0.3, 0.1).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(risk_score(0.9091, 0.3015).unwrap(), 1.0);
        assert_eq!(risk_score(-0.2, 0.1).unwrap(), 0.0);
        assert!(risk_score(0.1, -0.01).is_err());
    }

    #[test]
    fn flag_is_strict() {
        assert!(!risk_flag(0.5, 0.5));
        assert!(risk_flag(0.51, 0.5));
        assert!(!risk_flag(0.0, 0.5));
    }

    proptest! {
        #[test]
        fn score_monotone_and_idempotent(mu in -2.0f64..2.0, s in 0.0f64..2.0, dm in 0.0f64..1.0, ds in 0.0f64..1.0) {
            let r = risk_score(mu, s).unwrap();
            prop_assert!(risk_score(mu + dm, s).unwrap() >= r);
            prop_assert!(risk_score(mu, s + ds).unwrap() >= r);
            prop_assert_eq!(risk_score(r, 0.0).unwrap(), r);
        }
    }

    #[test]
    fn live_machine_pauses_and_resumes() {
        let s = ExecutionState::new(ExecutionMode::Live);
        let s = s.step(&verdict(0, false)).unwrap();
        assert_eq!(s.phase, Phase::Running);
        let s = s.step(&verdict(1, true)).unwrap();
        assert_eq!(s.phase, Phase::PausedAwaitingLabel);
        assert_eq!(s.pending_frame, Some(1));
        assert!(matches!(s.step(&verdict(2, false)), Err(RiskError::IllegalTransition { .. })));
        assert!(s.label_pending(0).is_err());
        assert!(s.complete().is_err());
        let s = s.label_pending(1).unwrap();
        assert_eq!(s.phase, Phase::Resumed);
        assert_eq!(s.pending_frame, None);
        let s = s.step(&verdict(2, false)).unwrap();
        assert_eq!(s.phase, Phase::Resumed);
        let s = s.complete().unwrap();
        assert_eq!(s.phase, Phase::Completed);
        assert!(s.step(&verdict(3, false)).is_err());
    }

    #[test]
    fn replay_machine_never_pauses() {
        let mut s = ExecutionState::new(ExecutionMode::Replay);
        for i in 0..10 {
            s = s.step(&verdict(i, i % 3 == 0)).unwrap();
            assert_eq!(s.phase, Phase::Running);
        }
        assert!(s.label_pending(0).is_err());
    }

    #[test]
    fn label_outside_pause_is_illegal() {
        let s = ExecutionState::new(ExecutionMode::Live);
        assert!(matches!(s.label_pending(0), Err(RiskError::IllegalTransition { .. })));
    }
}
