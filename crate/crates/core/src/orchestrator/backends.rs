//! Backend factories, looked up by the names used in [`BackendConfig`].
//!
//! [`BackendConfig`]: super::config::BackendConfig

use std::sync::Arc;

use super::config::{ModelRegistry, RunConfig};
use super::OrchestratorError;
use crate::executor::{Executor, MockExecutor, WorkerPool, WorkerPoolConfig};
use crate::gateway::openai::{ENV_CHAT_KEY, ENV_CHAT_URL, ENV_EMBED_URL};
use crate::gateway::{ChatBackend, EmbeddingBackend, MockChat, MockEmbedder, OpenAiChat, OpenAiEmbedder};
use crate::mock::ProgramLibrary;
use crate::registry::Registry;

pub type ChatFactory =
    dyn Fn(&RunConfig, &ModelRegistry) -> Result<Arc<dyn ChatBackend>, OrchestratorError> + Send + Sync;
pub type EmbedFactory = dyn Fn(&RunConfig) -> Result<Arc<dyn EmbeddingBackend>, OrchestratorError> + Send + Sync;
pub type ExecutorFactory = dyn Fn(&RunConfig) -> Result<Arc<dyn Executor>, OrchestratorError> + Send + Sync;

fn gateway_err(e: crate::gateway::GatewayError) -> OrchestratorError {
    OrchestratorError::Config(e.to_string())
}

/// `mock` and `openai`. The OpenAI client resolves the run's model tag in
/// the model registry, falling back to `SOAR_CHAT_URL` for an entry without
/// an endpoint; the key comes from the environment only.
pub fn chat_backends() -> Registry<ChatFactory> {
    let mut r: Registry<ChatFactory> = Registry::new("chat backend");
    r.register(
        "mock",
        Arc::new(|c: &RunConfig, _: &ModelRegistry| {
            let chat = MockChat::from_library(&ProgramLibrary::standard(), c.backends.mock_garbage_rate);
            Ok(Arc::new(chat) as Arc<dyn ChatBackend>)
        }),
    );
    r.register(
        "openai",
        Arc::new(|c: &RunConfig, models: &ModelRegistry| {
            let entry = models.resolve(&c.model_tag)?;
            let endpoint = match std::env::var(ENV_CHAT_URL) {
                Ok(url) if entry.endpoint.is_empty() => url,
                _ => entry.endpoint.clone(),
            };
            if endpoint.is_empty() {
                return Err(OrchestratorError::Config(format!(
                    "model `{}` has no endpoint and {ENV_CHAT_URL} is not set",
                    c.model_tag
                )));
            }
            let mut chat = OpenAiChat::new(&endpoint, std::env::var(ENV_CHAT_KEY).ok())
                .map_err(gateway_err)?
                .with_model(entry.model.clone().unwrap_or_else(|| c.model_tag.clone()));
            if let Some(rate) = c.backends.rate_limit_per_sec {
                chat = chat.with_rate_limit(rate, rate.ceil().max(1.0) as u32);
            }
            if !c.backends.send_min_p {
                chat = chat.without_min_p();
            }
            Ok(Arc::new(chat) as Arc<dyn ChatBackend>)
        }),
    );
    r
}

pub fn embed_backends() -> Registry<EmbedFactory> {
    let mut r: Registry<EmbedFactory> = Registry::new("embedding backend");
    r.register(
        "mock",
        Arc::new(|_: &RunConfig| Ok(Arc::new(MockEmbedder::default()) as Arc<dyn EmbeddingBackend>)),
    );
    r.register(
        "openai",
        Arc::new(|c: &RunConfig| {
            let url = match &c.backends.embed_url {
                Some(u) => u.clone(),
                None => std::env::var(ENV_EMBED_URL).map_err(|_| {
                    OrchestratorError::Config(format!("neither backends.embed_url nor {ENV_EMBED_URL} is set"))
                })?,
            };
            let e = OpenAiEmbedder::new(&url, std::env::var(ENV_CHAT_KEY).ok(), &c.backends.embed_model)
                .map_err(gateway_err)?;
            Ok(Arc::new(e) as Arc<dyn EmbeddingBackend>)
        }),
    );
    r
}

/// `mock` runs the built-in program library natively; `subprocess` starts
/// a pool of sandbox workers.
pub fn executors() -> Registry<ExecutorFactory> {
    let mut r: Registry<ExecutorFactory> = Registry::new("executor");
    r.register(
        "mock",
        Arc::new(|_: &RunConfig| {
            Ok(Arc::new(MockExecutor::from_library(&ProgramLibrary::standard())) as Arc<dyn Executor>)
        }),
    );
    r.register(
        "subprocess",
        Arc::new(|c: &RunConfig| {
            let pool = WorkerPool::new(WorkerPoolConfig {
                command: c.backends.worker_command.clone(),
                workers: c.backends.workers,
                ..WorkerPoolConfig::default()
            })
            .map_err(|e| OrchestratorError::Config(format!("cannot start workers: {e}")))?;
            Ok(Arc::new(pool) as Arc<dyn Executor>)
        }),
    );
    r
}

/// The three backends a run needs.
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub embed: Arc<dyn EmbeddingBackend>,
    pub executor: Arc<dyn Executor>,
    pub models: ModelRegistry,
}

impl Backends {
    pub fn from_config(config: &RunConfig) -> Result<Self, OrchestratorError> {
        let models = super::config::model_registry(config)?;
        let b = &config.backends;
        Ok(Backends {
            chat: chat_backends().get(&b.chat)?(config, &models)?,
            embed: embed_backends().get(&b.embed)?(config)?,
            executor: executors().get(&b.executor)?(config)?,
            models,
        })
    }
}
