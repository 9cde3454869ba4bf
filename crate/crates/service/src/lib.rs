//! Session server for live risk monitoring.
//!
//! Data directory layout:
//! - `episodes/`: the episode store (stored replays, recorded push sessions)
//! - `checkpoints/{skill}/{estimator}/`: command-line trained bundles, imported
//!   as version 1 when no registry exists yet
//! - `registry/`: versioned models (see [`registry`])
//! - `sessions/{id}.json`: session records, rewritten on completion

pub mod error;
pub mod registry;
pub mod retrain;
pub mod routes;
pub mod session;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use riskwatch_core::dataset::EpisodeStore;
use riskwatch_core::estimator::EstimatorRegistry;
use riskwatch_core::pipeline::PipelineConfig;
use riskwatch_core::riskcore::{Phase, DEFAULT_TAU};

use crate::error::{Result, ServiceError};
use crate::registry::ModelRegistry;
use crate::retrain::RetrainStatus;
use crate::session::Session;

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub host: String,
    /// 0 picks a free port.
    pub port: u16,
    pub tau: f64,
    /// Estimator for imported checkpoints and skills without a model.
    pub estimator: String,
    /// Training settings for retrain jobs.
    pub pipeline: PipelineConfig,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            data_dir: data_dir.into(),
            host: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            tau: DEFAULT_TAU,
            estimator: "gp".into(),
            pipeline: PipelineConfig::default(),
        }
    }
}

pub struct ServiceState {
    pub config: ServiceConfig,
    pub store: EpisodeStore,
    pub registry: ModelRegistry,
    pub estimators: EstimatorRegistry,
    pub sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    pub retrain: Mutex<RetrainStatus>,
    next_session: AtomicU64,
}

impl ServiceState {
    /// Opens the data directory, restoring registry versions and completed
    /// sessions.
    pub fn open(config: ServiceConfig) -> Result<Arc<Self>> {
        let internal = |e: std::io::Error| ServiceError::Internal(e.to_string());
        let store = EpisodeStore::open(config.data_dir.join("episodes"))?;
        let estimators = EstimatorRegistry::default();
        estimators
            .get(&config.estimator)
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let registry = ModelRegistry::open(config.data_dir.join("registry"), config.tau, &estimators)?;
        registry.import_checkpoints(&config.data_dir.join("checkpoints"), &config.estimator, &estimators)?;
        let sessions_dir = config.data_dir.join("sessions");
        std::fs::create_dir_all(&sessions_dir).map_err(internal)?;
        let mut sessions = BTreeMap::new();
        let mut max_id = 0;
        for rec in session::load_records(&sessions_dir)? {
            if let Some(n) = rec.info.session_id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                max_id = max_id.max(n);
            }
            // interrupted sessions only reserve their id
            if rec.info.phase == Phase::Completed {
                let s = Session::restore(rec, store.clone(), sessions_dir.clone());
                sessions.insert(s.id.clone(), Arc::new(s));
            }
        }
        Ok(Arc::new(ServiceState {
            config,
            store,
            registry,
            estimators,
            sessions: RwLock::new(sessions),
            retrain: Mutex::new(RetrainStatus::default()),
            next_session: AtomicU64::new(max_id + 1),
        }))
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.config.data_dir.join("sessions")
    }

    fn next_session_id(&self) -> String {
        format!("s{:06}", self.next_session.fetch_add(1, Ordering::SeqCst))
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::SessionNotFound(id.to_string()))
    }
}

/// Serves until `shutdown` resolves. Open event streams are dropped rather
/// than drained, since a paused session's stream never ends on its own.
pub async fn serve_with_shutdown(
    state: Arc<ServiceState>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tokio::select! {
        r = axum::serve(listener, routes::router(state)) => r,
        _ = shutdown => Ok(()),
    }
}

/// Binds `host:port` and serves forever.
pub async fn serve(config: ServiceConfig) -> Result<()> {
    let addr = format!("{}:{}", config.host, config.port);
    let state = ServiceState::open(config)?;
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| ServiceError::Internal(format!("bind {addr}: {e}")))?;
    serve_with_shutdown(state, listener, std::future::pending())
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))
}

/// A server running on its own thread; dropping it shuts the server down.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub state: Arc<ServiceState>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn spawn(config: ServiceConfig) -> Result<ServerHandle> {
    let addr = format!("{}:{}", config.host, config.port);
    let state = ServiceState::open(config)?;
    let std_listener =
        std::net::TcpListener::bind(&addr).map_err(|e| ServiceError::Internal(format!("bind {addr}: {e}")))?;
    std_listener
        .set_nonblocking(true)
        .map_err(|e| ServiceError::Internal(e.to_string()))?;
    let local = std_listener.local_addr().map_err(|e| ServiceError::Internal(e.to_string()))?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let st = state.clone();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
            let _ = serve_with_shutdown(st, listener, async {
                let _ = rx.await;
            })
            .await;
        });
    });
    Ok(ServerHandle {
        addr: local,
        state,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
