//! Background retraining over every labeled episode in the store.

use std::collections::BTreeMap;
use std::sync::Arc;

use riskwatch_core::dataset::{EpisodeRecord, Provenance};
use riskwatch_core::encoder::fine_tune;
use riskwatch_core::pipeline::{encoder_frames, train_encoder, train_estimator, training_episodes};
use riskwatch_core::riskcore::RiskModel;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::registry::SkillEntry;
use crate::ServiceState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainScope {
    /// Refit the estimator on the current encoder's latents.
    GpOnly,
    /// Fine-tune the encoder on the new view's frames, then refit.
    GpEncoder,
}

impl RetrainScope {
    pub fn name(self) -> &'static str {
        match self {
            RetrainScope::GpOnly => "gp_only",
            RetrainScope::GpEncoder => "gp_encoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Idle,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrainStatus {
    pub state: JobState,
    pub scope: Option<RetrainScope>,
    pub jobs_started: u64,
    pub last_version: Option<u64>,
    pub last_error: Option<String>,
}

impl Default for RetrainStatus {
    fn default() -> Self {
        RetrainStatus {
            state: JobState::Idle,
            scope: None,
            jobs_started: 0,
            last_version: None,
            last_error: None,
        }
    }
}

/// Episodes feeding a retrain for `skill`: demonstrations and training
/// executions (including recorded push sessions), plus any test episode a
/// supervisor has labeled.
pub fn retrain_view<'a>(episodes: &'a [EpisodeRecord], skill: &str) -> Vec<&'a EpisodeRecord> {
    let mut view = training_episodes(episodes, skill);
    view.extend(episodes.iter().filter(|e| {
        e.skill == skill
            && matches!(e.provenance, Provenance::TestSeen | Provenance::TestNovel)
            && e.labeled_count() > 0
    }));
    view.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    view
}

/// Starts a retrain job unless one is running.
pub fn start(state: &Arc<ServiceState>, scope: RetrainScope) -> Result<RetrainStatus> {
    if state.store.list()?.is_empty() || (scope == RetrainScope::GpOnly && state.registry.current().models.is_empty()) {
        return Err(ServiceError::EmptyView);
    }
    {
        let mut status = state.retrain.lock();
        if status.state == JobState::Running {
            return Err(ServiceError::RetrainInProgress);
        }
        status.state = JobState::Running;
        status.scope = Some(scope);
        status.jobs_started += 1;
        status.last_error = None;
    }
    let st = state.clone();
    std::thread::spawn(move || {
        let outcome = run(&st, scope);
        let mut status = st.retrain.lock();
        match outcome {
            Ok(v) => {
                status.state = JobState::Succeeded;
                status.last_version = Some(v);
            }
            Err(e) => {
                status.state = JobState::Failed;
                status.last_error = Some(format!("{}: {e}", e.code()));
            }
        }
    });
    Ok(state.retrain.lock().clone())
}

fn run(state: &ServiceState, scope: RetrainScope) -> Result<u64> {
    let episodes = state.store.load_all()?;
    let current = state.registry.current();
    let version = state.registry.next_version();
    let mut skills: Vec<String> = current.models.keys().cloned().collect();
    if scope == RetrainScope::GpEncoder {
        for ep in &episodes {
            if !skills.contains(&ep.skill) && !training_episodes(&episodes, &ep.skill).is_empty() {
                skills.push(ep.skill.clone());
            }
        }
    }
    let cfg = &state.config.pipeline;
    let mut trained = BTreeMap::new();
    for skill in skills {
        let view = retrain_view(&episodes, &skill);
        if view.is_empty() {
            continue;
        }
        let prior = current.models.get(&skill);
        let prior_entry = current.record.skills.get(&skill);
        let (ae, encoder_version) = match (scope, prior) {
            (RetrainScope::GpOnly, Some(m)) => (m.ae.clone(), prior_entry.map_or(version, |e| e.encoder_version)),
            (RetrainScope::GpOnly, None) => continue,
            (RetrainScope::GpEncoder, Some(m)) => {
                let mut ae_cfg = cfg.ae.clone();
                ae_cfg.latent_dim = m.ae.latent_dim;
                ae_cfg.channels = m.ae.channels;
                let frames = encoder_frames(&view, cfg.encoder_frames);
                let tuned = fine_tune(&m.ae, &frames, &ae_cfg).map_err(|e| ServiceError::Internal(e.to_string()))?;
                (Arc::new(tuned), version)
            }
            (RetrainScope::GpEncoder, None) => (Arc::new(train_encoder(&view, cfg)?), version),
        };
        let estimator = prior_entry.map_or(state.config.estimator.as_str(), |e| e.estimator.as_str());
        let est = train_estimator(&ae, &view, estimator, cfg, &state.estimators)?;
        let (rel, _) = state.registry.bundle_path(version, &skill);
        let entry = SkillEntry {
            bundle: rel,
            estimator: est.name().to_string(),
            encoder_version,
            training_episodes: view.iter().map(|e| e.episode_id.clone()).collect(),
        };
        let model = RiskModel {
            ae,
            estimator: Arc::from(est),
            tau: state.config.tau,
        };
        trained.insert(skill, (model, entry));
    }
    if trained.is_empty() {
        return Err(ServiceError::EmptyView);
    }
    state.registry.publish(scope.name(), trained)
}
