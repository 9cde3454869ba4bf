use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{FromRequest, Path, Request, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use riskwatch_core::dataset::Label;
use riskwatch_core::frame::Frame;
use riskwatch_core::riskcore::Phase;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Result, ServiceError};
use crate::retrain::{self, RetrainScope};
use crate::session::{Session, SessionEvent, SourceSpec};
use crate::{ServiceState, FORMAT_VERSION};

type AppState = Arc<ServiceState>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(start_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/frames", post(push_frame))
        .route("/sessions/{id}/close", post(close_session))
        .route("/sessions/{id}/labels", post(submit_label))
        .route("/sessions/{id}/stream", get(stream_session))
        .route("/retrain", post(start_retrain))
        .route("/models", get(list_models))
        .route("/episodes", get(list_episodes))
        .route("/episodes/{id}/frames/{i}", get(episode_frame))
        .fallback(|req: Request| async move { ServiceError::NoRoute(req.uri().path().to_string()) })
        .with_state(state)
}

/// JSON body whose rejections use the service error document.
pub struct JsonBody<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for JsonBody<T> {
    type Rejection = ServiceError;

    async fn from_request(req: Request, state: &S) -> std::result::Result<Self, Self::Rejection> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| JsonBody(v))
            .map_err(|e| ServiceError::BadRequest(e.body_text()))
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

#[derive(Debug, Deserialize)]
struct StartRequest {
    skill: String,
    source: SourceSpec,
}

async fn start_session(State(st): State<AppState>, JsonBody(req): JsonBody<StartRequest>) -> Result<Response> {
    let version = st.registry.current();
    let model = version
        .models
        .get(&req.skill)
        .cloned()
        .ok_or_else(|| ServiceError::NoModelForSkill(req.skill.clone()))?;
    let id = st.next_session_id();
    let session = match &req.source {
        SourceSpec::Replay { episode_id, .. } => {
            let store = st.store.clone();
            let eid = episode_id.clone();
            let episode = blocking(move || Ok(store.load(&eid)?)).await?;
            if episode.skill != req.skill {
                return Err(ServiceError::BadRequest(format!(
                    "episode {} is a {} episode, not {}",
                    episode.episode_id, episode.skill, req.skill
                )));
            }
            if episode.is_empty() {
                return Err(ServiceError::BadRequest(format!("episode {} has no frames", episode.episode_id)));
            }
            let s = Arc::new(Session::new(
                id.clone(),
                req.skill.clone(),
                req.source.clone(),
                episode.len(),
                model,
                version.record.version,
                st.store.clone(),
                st.sessions_dir(),
            ));
            // before the runner starts, so a fast completion is not overwritten
            s.persist_initial()?;
            let runner = s.clone();
            std::thread::spawn(move || {
                if let Err(e) = runner.run_replay(&episode) {
                    eprintln!("replay {} stopped: {e}", runner.id);
                }
            });
            s
        }
        SourceSpec::Push { expected_frames } => {
            if *expected_frames == 0 {
                return Err(ServiceError::BadRequest("expected_frames must be positive".into()));
            }
            let s = Arc::new(Session::new(
                id.clone(),
                req.skill.clone(),
                req.source.clone(),
                *expected_frames,
                model,
                version.record.version,
                st.store.clone(),
                st.sessions_dir(),
            ));
            s.persist_initial()?;
            s
        }
    };
    let info = session.info();
    st.sessions.write().insert(id, session);
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn list_sessions(State(st): State<AppState>) -> Json<serde_json::Value> {
    let sessions: Vec<_> = st.sessions.read().values().map(|s| s.info()).collect();
    Json(json!({ "format_version": FORMAT_VERSION, "sessions": sessions }))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> Result<Response> {
    Ok(Json(st.session(&id)?.info()).into_response())
}

#[derive(Debug, Serialize)]
struct VerdictResponse {
    format_version: u32,
    frame_index: usize,
    r: f64,
    mu: f64,
    sigma: f64,
    flag: bool,
    recon_unreliable: bool,
    phase: Phase,
}

async fn push_frame(State(st): State<AppState>, Path(id): Path<String>, body: axum::body::Bytes) -> Result<Response> {
    let session = st.session(&id)?;
    let frame = Frame::from_pgm(&body).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let (v, phase) = blocking(move || session.push_frame(frame)).await?;
    Ok(Json(VerdictResponse {
        format_version: FORMAT_VERSION,
        frame_index: v.frame_index,
        r: v.r,
        mu: v.mu,
        sigma: v.sigma,
        flag: v.flag,
        recon_unreliable: v.recon_unreliable,
        phase,
    })
    .into_response())
}

async fn close_session(State(st): State<AppState>, Path(id): Path<String>) -> Result<Response> {
    let session = st.session(&id)?;
    Ok(Json(blocking(move || session.close()).await?).into_response())
}

#[derive(Debug, Deserialize)]
struct LabelRequest {
    frame_index: usize,
    label: Label,
}

async fn submit_label(
    State(st): State<AppState>,
    Path(id): Path<String>,
    JsonBody(req): JsonBody<LabelRequest>,
) -> Result<Response> {
    let session = st.session(&id)?;
    let info = blocking(move || session.label(req.frame_index, req.label)).await?;
    Ok(Json(info).into_response())
}

#[derive(Serialize)]
struct Envelope<'a> {
    format_version: u32,
    #[serde(flatten)]
    event: &'a SessionEvent,
}

fn to_sse(ev: &SessionEvent) -> Event {
    let data = serde_json::to_string(&Envelope {
        format_version: FORMAT_VERSION,
        event: ev,
    })
    .expect("event serializes");
    Event::default().event(ev.name()).data(data)
}

/// Full event history, then live events until the session completes.
async fn stream_session(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = std::result::Result<Event, Infallible>>>> {
    let session = st.session(&id)?;
    let (history, rx) = session.subscribe();
    let done = history.iter().any(SessionEvent::is_terminal);
    let past = stream::iter(history.iter().map(to_sse).collect::<Vec<_>>());
    let live = stream::unfold((rx, done), |(mut rx, done)| async move {
        if done {
            return None;
        }
        // A lagging subscriber is cut off; reconnecting replays the history.
        let ev = rx.recv().await.ok()?;
        let fin = ev.is_terminal();
        Some((to_sse(&ev), (rx, fin)))
    });
    Ok(Sse::new(past.chain(live).map(Ok)).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Deserialize)]
struct RetrainRequest {
    scope: RetrainScope,
}

async fn start_retrain(State(st): State<AppState>, JsonBody(req): JsonBody<RetrainRequest>) -> Result<Response> {
    let s = st.clone();
    let status = blocking(move || retrain::start(&s, req.scope)).await?;
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "format_version": FORMAT_VERSION, "retrain": status })),
    )
        .into_response())
}

async fn list_models(State(st): State<AppState>) -> Json<serde_json::Value> {
    let current = st.registry.current();
    let skills: serde_json::Map<String, serde_json::Value> = current
        .models
        .iter()
        .map(|(skill, m)| {
            let v = json!({
                "estimator": m.estimator.summary(),
                "latent_dim": m.ae.latent_dim,
                "tau": m.tau,
            });
            (skill.clone(), v)
        })
        .collect();
    Json(json!({
        "format_version": FORMAT_VERSION,
        "current_version": current.record.version,
        "current_skills": skills,
        "versions": st.registry.versions(),
        "retrain": *st.retrain.lock(),
    }))
}

#[derive(Debug, Serialize)]
struct EpisodeSummary {
    episode_id: String,
    skill: String,
    provenance: riskwatch_core::dataset::Provenance,
    fault: Option<&'static str>,
    frames: usize,
    labeled_frames: usize,
}

async fn list_episodes(State(st): State<AppState>) -> Result<Response> {
    let store = st.store.clone();
    let episodes = blocking(move || Ok(store.load_all()?)).await?;
    let list: Vec<EpisodeSummary> = episodes
        .iter()
        .map(|e| EpisodeSummary {
            episode_id: e.episode_id.clone(),
            skill: e.skill.clone(),
            provenance: e.provenance,
            fault: e.fault_spec.as_ref().map(|f| f.name()),
            frames: e.len(),
            labeled_frames: e.labeled_count(),
        })
        .collect();
    Ok(Json(json!({ "format_version": FORMAT_VERSION, "episodes": list })).into_response())
}

async fn episode_frame(State(st): State<AppState>, Path((id, i)): Path<(String, String)>) -> Result<Response> {
    let i: usize = i
        .parse()
        .map_err(|_| ServiceError::BadRequest(format!("frame index {i:?} is not a number")))?;
    let store = st.store.clone();
    let pgm = blocking(move || Ok(store.frame_pgm(&id, i)?)).await?;
    Ok(([(header::CONTENT_TYPE, "image/x-portable-graymap")], pgm).into_response())
}
