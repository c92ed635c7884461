//! Language-model and embedding access: prompt construction, completion
//! parsing, backend traits, HTTP clients and deterministic mocks.

mod completion;
pub mod mock;
pub mod openai;
pub mod prompt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use completion::{parse_completion, ParseFailure};
pub use mock::{MockChat, MockEmbedder};
pub use openai::{OpenAiChat, OpenAiEmbedder, RetryPolicy, TokenBucket};
pub use prompt::{build_refinement_prompt, build_sampling_prompt, render_transcript};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("quota exceeded: {0}")]
    QuotaExceeded(String),
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
    #[error("malformed backend reply: {0}")]
    ProtocolViolation(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub min_p: f64,
    pub n_completions: usize,
    pub max_tokens: u32,
    pub model_tag: String,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 1.0,
            min_p: 0.05,
            n_completions: 50,
            max_tokens: 2048,
            model_tag: "base".into(),
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.n_completions == 0 {
            return Err(GatewayError::InvalidParams("n_completions must be >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidParams("temperature must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.min_p) {
            return Err(GatewayError::InvalidParams("min_p must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_tag: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, model_tag: impl Into<String>) -> Result<Self, GatewayError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::ProtocolViolation(
                "embedding must be non-empty and finite".into(),
            ));
        }
        Ok(EmbeddingVector {
            values,
            model_tag: model_tag.into(),
        })
    }
}

/// Cosine similarity; zero vectors are treated as dissimilar to everything.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// A chat-completion endpoint.
pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Returns up to `params.n_completions` texts for one prompt.
    fn complete(&self, messages: &[ChatMessage], params: &SamplingParams) -> Result<Vec<String>, GatewayError>;

    /// Whether `min_p` currently reaches the server.
    fn forwards_min_p(&self) -> bool {
        true
    }
}

/// An embedding endpoint.
pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError>;
}

/// Requests exactly `params.n_completions` texts, topping up when a server
/// returns fewer choices than asked for.
pub fn chat_complete(
    backend: &dyn ChatBackend,
    messages: &[ChatMessage],
    params: &SamplingParams,
) -> Result<Vec<String>, GatewayError> {
    params.validate()?;
    let mut texts = backend.complete(messages, params)?;
    let mut top_ups = 0u64;
    while texts.len() < params.n_completions && top_ups < 3 {
        top_ups += 1;
        let mut more = params.clone();
        more.n_completions = params.n_completions - texts.len();
        more.seed = params.seed.wrapping_add(top_ups);
        texts.extend(backend.complete(messages, &more)?);
    }
    if texts.len() < params.n_completions {
        return Err(GatewayError::ProtocolViolation(format!(
            "backend returned {} of {} completions",
            texts.len(),
            params.n_completions
        )));
    }
    texts.truncate(params.n_completions);
    Ok(texts)
}

/// One vector per text, checked for count.
pub fn embed(backend: &dyn EmbeddingBackend, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let vectors = backend.embed(texts)?;
    if vectors.len() != texts.len() {
        return Err(GatewayError::ProtocolViolation(format!(
            "{} embeddings for {} texts",
            vectors.len(),
            texts.len()
        )));
    }
    Ok(vectors)
}
