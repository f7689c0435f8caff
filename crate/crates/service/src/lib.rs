//! HTTP service: persona lifecycle, media ingestion, background training
//! jobs and search over one embedding index.
//!
//! All state lives under one data directory: a key-value store file for
//! personas, tokens, media records and jobs, content-addressed media,
//! thumbnails and the index file.

mod api;
mod error;
mod jobs;
mod media;
pub mod store;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use pimap::caption::{CaptionCache, LlmClient};
use pimap::harness::protocol::PreparedInstance;
use pimap::harness::{Backend, ProtocolConfig};
use pimap::objectives::BatchItem;
use pimap::pimap::PiMapParams;
use pimap::retrieval::{Bindings, Index};
use tokio::sync::mpsc;

pub use api::router;
pub use error::{ServiceError, ServiceResult};
use media::MediaFiles;
use store::{JobState, PersonaStatus, Store};

pub const ENCODER_HEADER: &str = "x-encoder-id";
pub const CONFIG_HEADER: &str = "x-config-hash";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub workers: usize,
    /// Jobs waiting beyond this many are refused with 429.
    pub queue_capacity: usize,
    pub max_upload_bytes: usize,
    pub thumbnail_size: u32,
    /// Synthetic population images added as negatives when a world exists.
    pub population_distractors: usize,
    pub protocol: ProtocolConfig,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            workers: 1,
            queue_capacity: 64,
            max_upload_bytes: 16 << 20,
            thumbnail_size: 128,
            population_distractors: 32,
            protocol: ProtocolConfig::default(),
        }
    }
}

pub(crate) struct Inner {
    cfg: ServiceConfig,
    backend: Backend,
    pretrained: PiMapParams<f64>,
    store: Store,
    media: MediaFiles,
    index: RwLock<Arc<Index<f64>>>,
    index_writer: Mutex<()>,
    queue: mpsc::Sender<String>,
    receiver: tokio::sync::Mutex<mpsc::Receiver<String>>,
    config_hash: String,
    captions: CaptionCache,
    llm: Option<Box<dyn LlmClient>>,
    prepared: Mutex<HashMap<String, PreparedInstance>>,
    population: OnceLock<Vec<BatchItem<f64>>>,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

pub(crate) fn now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl AppState {
    /// Opens or creates the data directory. Jobs left unfinished by a
    /// previous process are marked failed.
    pub fn open(cfg: ServiceConfig, backend: Backend, pretrained: PiMapParams<f64>) -> ServiceResult<Self> {
        let d = backend.encoder.descriptor();
        if pretrained.d_joint != d.d_joint || pretrained.d_tok != d.d_tok {
            return Err(ServiceError::internal("pretrained mapping does not match the encoder dimensions"));
        }
        std::fs::create_dir_all(&cfg.data_dir).map_err(|e| ServiceError::internal(e.to_string()))?;
        let store = Store::open(&cfg.data_dir.join("store.redb"))?;
        let media = MediaFiles::new(&cfg.data_dir, cfg.thumbnail_size)?;
        let index_path = cfg.data_dir.join("index.piidx");
        let index = if index_path.exists() {
            let idx = Index::<f64>::load(&index_path)?;
            if idx.encoder_id != d.encoder_id {
                return Err(ServiceError::from(pimap::Error::EncoderMismatch {
                    token: idx.encoder_id,
                    active: d.encoder_id.clone(),
                }));
            }
            idx
        } else {
            Index::new(d.encoder_id.clone(), d.d_joint)
        };
        let llm = match cfg.protocol.caption_client.client(backend.world.as_ref(), cfg.protocol.seed) {
            Ok(c) => c,
            Err(e) => {
                tracing::warn!("caption client unavailable, using user captions: {e}");
                None
            }
        };
        let captions = CaptionCache::open(cfg.data_dir.join("captions.jsonl"))?;
        let (tx, rx) = mpsc::channel(cfg.queue_capacity.max(1));
        let state = Self {
            inner: Arc::new(Inner {
                config_hash: cfg.protocol.hash(),
                cfg,
                backend,
                pretrained,
                store,
                media,
                index: RwLock::new(Arc::new(index)),
                index_writer: Mutex::new(()),
                queue: tx,
                receiver: tokio::sync::Mutex::new(rx),
                captions,
                llm,
                prepared: Mutex::default(),
                population: OnceLock::new(),
            }),
        };
        state.recover()?;
        Ok(state)
    }

    fn recover(&self) -> ServiceResult<()> {
        let store = &self.inner.store;
        for mut j in store.jobs()? {
            if matches!(j.state, JobState::Queued | JobState::Running) {
                j.state = JobState::Failed;
                j.error = Some("interrupted by a service restart".into());
                j.updated_at = now();
                store.put_job(&j)?;
            }
        }
        for mut p in store.personas()? {
            if matches!(p.status, PersonaStatus::Queued | PersonaStatus::Training) {
                p.status = if store.token(&p.id)?.is_some() {
                    PersonaStatus::Trained
                } else {
                    PersonaStatus::Failed
                };
                store.put_persona(&p)?;
            }
        }
        Ok(())
    }

    /// Starts the worker pool. Needs a Tokio runtime.
    pub fn spawn_workers(&self) {
        for _ in 0..self.inner.cfg.workers {
            let state = self.clone();
            tokio::spawn(async move {
                loop {
                    let next = state.inner.receiver.lock().await.recv().await;
                    let Some(job_id) = next else { break };
                    let s = state.clone();
                    if let Err(e) = tokio::task::spawn_blocking(move || jobs::run(&s, &job_id)).await {
                        tracing::error!("job worker panicked: {e}");
                    }
                }
            });
        }
    }

    pub fn encoder_id(&self) -> &str {
        self.inner.backend.encoder_id()
    }

    pub fn config_hash(&self) -> &str {
        &self.inner.config_hash
    }

    pub fn data_dir(&self) -> &Path {
        &self.inner.cfg.data_dir
    }

    pub fn index_path(&self) -> PathBuf {
        self.inner.cfg.data_dir.join("index.piidx")
    }

    /// Snapshot of the current index.
    pub fn index(&self) -> Arc<Index<f64>> {
        self.inner.index.read().expect("index lock poisoned").clone()
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    /// Tokens of every trained persona, keyed by mention name.
    pub fn bindings(&self) -> ServiceResult<Bindings> {
        let mut b = Bindings::new();
        for p in self.inner.store.personas()? {
            if let Some(t) = self.inner.store.token(&p.id)? {
                b.insert(p.id, t);
            }
        }
        Ok(b)
    }
}

/// Opens the state, starts the workers and returns the router.
pub fn start(cfg: ServiceConfig, backend: Backend, pretrained: PiMapParams<f64>) -> ServiceResult<(axum::Router, AppState)> {
    let state = AppState::open(cfg, backend, pretrained)?;
    state.spawn_workers();
    Ok((router(state.clone()), state))
}

/// Serves `router` until the process ends.
pub async fn serve(listener: tokio::net::TcpListener, router: axum::Router) -> std::io::Result<()> {
    axum::serve(listener, router).await
}
