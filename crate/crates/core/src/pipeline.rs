//! Training recipes shared by the command line, the service and the
//! acceptance tests: which episodes feed the encoder and the estimator, and
//! how a trained encoder/estimator pair is stored on disk.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{default_anchors, selected_view, DatasetError, EpisodeRecord, Provenance};
use crate::encoder::{train_autoencoder, AeConfig, AeModel, EncoderError};
use crate::estimator::{EstimatorConfig, EstimatorError, EstimatorRegistry, RiskEstimator};
use crate::frame::Frame;
use crate::riskcore::{RiskModel, DEFAULT_TAU};
use crate::synthgen::FaultSpec;

pub const BUNDLE_VERSION: u32 = 1;
pub const BUNDLE_MANIFEST: &str = "bundle.json";
pub const ENCODER_FILE: &str = "encoder.json";
pub const ESTIMATOR_FILE: &str = "estimator.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no {what} episodes for skill {skill:?}")]
    NoEpisodes { skill: String, what: &'static str },
    #[error("model bundle {path}: {reason}")]
    Bundle { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub ae: AeConfig,
    /// Cap on encoder training frames, thinned uniformly; 0 keeps all.
    pub encoder_frames: usize,
    pub estimator: EstimatorConfig,
    pub tau: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            ae: AeConfig::default(),
            encoder_frames: 2000,
            estimator: EstimatorConfig::default(),
            tau: DEFAULT_TAU,
        }
    }
}

fn of_skill<'a>(episodes: &'a [EpisodeRecord], skill: &str, keep: impl Fn(Provenance) -> bool) -> Vec<&'a EpisodeRecord> {
    let mut out: Vec<&EpisodeRecord> = episodes
        .iter()
        .filter(|e| e.skill == skill && keep(e.provenance))
        .collect();
    out.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    out
}

/// Demonstration and training executions of `skill`, ordered by id.
pub fn training_episodes<'a>(episodes: &'a [EpisodeRecord], skill: &str) -> Vec<&'a EpisodeRecord> {
    of_skill(episodes, skill, |p| {
        matches!(p, Provenance::Demonstration | Provenance::TrainingExecution)
    })
}

/// Seen- and novel-fault test episodes of `skill`, ordered by id.
pub fn test_episodes<'a>(episodes: &'a [EpisodeRecord], skill: &str) -> Vec<&'a EpisodeRecord> {
    of_skill(episodes, skill, |p| matches!(p, Provenance::TestSeen | Provenance::TestNovel))
}

/// Training episodes without any fault: the angle-0 set for the rotation
/// sweep.
pub fn fault_free<'a>(episodes: &[&'a EpisodeRecord]) -> Vec<&'a EpisodeRecord> {
    episodes
        .iter()
        .copied()
        .filter(|e| e.fault_spec.as_ref().is_none_or(|f| *f == FaultSpec::None))
        .collect()
}

/// Frames for encoder training. Episodes with novel faults never
/// contribute; the rest are pooled and thinned to at most `max` frames.
pub fn encoder_frames(episodes: &[&EpisodeRecord], max: usize) -> Vec<Frame> {
    let pool: Vec<&Frame> = episodes
        .iter()
        .filter(|e| !e.fault_spec.as_ref().is_some_and(|f| f.is_novel()))
        .flat_map(|e| e.frames.iter())
        .collect();
    if max == 0 || pool.len() <= max {
        return pool.into_iter().cloned().collect();
    }
    (0..max).map(|i| pool[i * pool.len() / max].clone()).collect()
}

pub fn train_encoder(episodes: &[&EpisodeRecord], cfg: &PipelineConfig) -> Result<AeModel> {
    Ok(train_autoencoder(&encoder_frames(episodes, cfg.encoder_frames), &cfg.ae)?)
}

/// Fits `estimator` on the selected view of `episodes` plus the default
/// anchors.
pub fn train_estimator(
    ae: &AeModel,
    episodes: &[&EpisodeRecord],
    estimator: &str,
    cfg: &PipelineConfig,
    registry: &EstimatorRegistry,
) -> Result<Box<dyn RiskEstimator>> {
    registry.get(estimator)?;
    let view = selected_view(episodes, ae, &default_anchors())?;
    Ok(registry.train(estimator, &view, &cfg.estimator)?)
}

/// Encoder plus estimator trained on the training episodes of `skill`.
pub fn train_pipeline(
    episodes: &[EpisodeRecord],
    skill: &str,
    estimator: &str,
    cfg: &PipelineConfig,
    registry: &EstimatorRegistry,
) -> Result<RiskModel> {
    let training = training_episodes(episodes, skill);
    if training.is_empty() {
        return Err(PipelineError::NoEpisodes {
            skill: skill.to_string(),
            what: "training",
        });
    }
    let ae = Arc::new(train_encoder(&training, cfg)?);
    let est = train_estimator(&ae, &training, estimator, cfg, registry)?;
    Ok(RiskModel {
        ae,
        estimator: Arc::from(est),
        tau: cfg.tau,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub skill: String,
    pub estimator: String,
    pub tau: f64,
    pub encoder_file: String,
    pub estimator_file: String,
    /// Ids of the episodes the estimator was fitted on.
    #[serde(default)]
    pub training_episodes: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the encoder and estimator checkpoints, then the manifest; a
/// directory without `bundle.json` is never a valid bundle.
pub fn save_bundle(dir: &Path, skill: &str, model: &RiskModel, training_episodes: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let enc_tmp = dir.join(format!("{ENCODER_FILE}.tmp"));
    model.ae.save(&enc_tmp)?;
    std::fs::rename(&enc_tmp, dir.join(ENCODER_FILE)).map_err(io_err(dir))?;
    let est_tmp = dir.join(format!("{ESTIMATOR_FILE}.tmp"));
    model.estimator.save(&est_tmp)?;
    std::fs::rename(&est_tmp, dir.join(ESTIMATOR_FILE)).map_err(io_err(dir))?;
    let manifest = BundleManifest {
        format_version: BUNDLE_VERSION,
        skill: skill.to_string(),
        estimator: model.estimator.name().to_string(),
        tau: model.tau,
        encoder_file: ENCODER_FILE.into(),
        estimator_file: ESTIMATOR_FILE.into(),
        training_episodes: training_episodes.to_vec(),
    };
    let path = dir.join(BUNDLE_MANIFEST);
    let tmp = dir.join(format!("{BUNDLE_MANIFEST}.tmp"));
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    std::fs::write(&tmp, json).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, &path).map_err(io_err(&path))?;
    Ok(())
}

pub fn load_bundle(dir: &Path, registry: &EstimatorRegistry) -> Result<(BundleManifest, RiskModel)> {
    let path = dir.join(BUNDLE_MANIFEST);
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    let manifest: BundleManifest = serde_json::from_slice(&bytes).map_err(|e| PipelineError::Bundle {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != BUNDLE_VERSION {
        return Err(PipelineError::Bundle {
            path,
            reason: format!("unsupported format_version {}", manifest.format_version),
        });
    }
    let ae = AeModel::load(&dir.join(&manifest.encoder_file))?;
    let est = registry.load(&manifest.estimator, &dir.join(&manifest.estimator_file))?;
    if est.input_dim() != ae.latent_dim + 1 {
        return Err(PipelineError::Bundle {
            path,
            reason: format!(
                "estimator expects {} inputs, encoder yields {}",
                est.input_dim(),
                ae.latent_dim + 1
            ),
        });
    }
    let model = RiskModel {
        ae: Arc::new(ae),
        estimator: Arc::from(est),
        tau: manifest.tau,
    };
    Ok((manifest, model))
}
