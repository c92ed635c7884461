//! Blocking clients for OpenAI-compatible `/chat/completions` and
//! `/embeddings` endpoints (vLLM, sglang, hosted APIs).

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::{json, Value};

use super::{ChatBackend, ChatMessage, EmbeddingBackend, EmbeddingVector, GatewayError, SamplingParams};

pub const ENV_CHAT_URL: &str = "SOAR_CHAT_URL";
pub const ENV_CHAT_KEY: &str = "SOAR_CHAT_KEY";
pub const ENV_EMBED_URL: &str = "SOAR_EMBED_URL";

#[derive(Clone, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

/// Requests-per-second limiter shared by all callers of one client.
pub struct TokenBucket {
    capacity: f64,
    per_sec: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(per_sec: f64, burst: u32) -> Self {
        let capacity = f64::from(burst.max(1));
        TokenBucket {
            capacity,
            per_sec,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().expect("bucket lock");
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.per_sec;
                st.0 = (st.0 + refill).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                (1.0 - st.0) / self.per_sec
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

enum Failure {
    Retry(String),
    Fatal(GatewayError),
    DropMinP,
}

struct Http {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    limiter: Option<TokenBucket>,
}

impl Http {
    fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
        Ok(Http {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            client,
            retry: RetryPolicy::default(),
            limiter: None,
        })
    }

    fn post_once(&self, path: &str, body: &Value) -> Result<Value, Failure> {
        if let Some(l) = &self.limiter {
            l.acquire();
        }
        let mut req = self.client.post(format!("{}{path}", self.base_url)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Failure::Retry(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Failure::Retry(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_str(&text)
                .map_err(|e| Failure::Fatal(GatewayError::ProtocolViolation(e.to_string())));
        }
        let code = status.as_u16();
        if code == 429 && text.contains("insufficient_quota") {
            return Err(Failure::Fatal(GatewayError::QuotaExceeded(text)));
        }
        if code == 429 || status.is_server_error() {
            return Err(Failure::Retry(format!("HTTP {code}: {text}")));
        }
        if code == 400 && text.contains("min_p") && body.get("min_p").is_some() {
            return Err(Failure::DropMinP);
        }
        Err(Failure::Fatal(GatewayError::BackendUnavailable(format!(
            "HTTP {code}: {text}"
        ))))
    }

    /// POSTs with bounded exponential backoff. `on_drop_min_p` is called when
    /// the server rejects the parameter; the body is then resent without it.
    fn post(&self, path: &str, mut body: Value, on_drop_min_p: &dyn Fn()) -> Result<Value, GatewayError> {
        let mut attempt = 0;
        loop {
            match self.post_once(path, &body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::DropMinP) => {
                    log::warn!("endpoint rejected min_p; dropping it");
                    on_drop_min_p();
                    if let Some(obj) = body.as_object_mut() {
                        obj.remove("min_p");
                    }
                }
                Err(Failure::Retry(msg)) => {
                    if attempt >= self.retry.max_retries {
                        return Err(GatewayError::BackendUnavailable(msg));
                    }
                    let d = self.retry.delay(attempt);
                    log::warn!("{path}: {msg}; retrying in {d:?}");
                    std::thread::sleep(d);
                    attempt += 1;
                }
            }
        }
    }
}

pub struct OpenAiChat {
    http: Http,
    /// Overrides `SamplingParams::model_tag` as the served model name.
    model: Option<String>,
    min_p: AtomicBool,
}

impl OpenAiChat {
    pub fn new(base_url: &str, api_key: Option<String>) -> Result<Self, GatewayError> {
        Ok(OpenAiChat {
            http: Http::new(base_url, api_key, Duration::from_secs(600))?,
            model: None,
            min_p: AtomicBool::new(true),
        })
    }

    /// Reads `SOAR_CHAT_URL` and the optional `SOAR_CHAT_KEY`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let url = std::env::var(ENV_CHAT_URL)
            .map_err(|_| GatewayError::BackendUnavailable(format!("{ENV_CHAT_URL} is not set")))?;
        OpenAiChat::new(&url, std::env::var(ENV_CHAT_KEY).ok())
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = Some(model.into());
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.http.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, per_sec: f64, burst: u32) -> Self {
        self.http.limiter = Some(TokenBucket::new(per_sec, burst));
        self
    }

    /// Never send `min_p`, for servers known not to accept it.
    pub fn without_min_p(self) -> Self {
        self.min_p.store(false, Ordering::Relaxed);
        self
    }
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    index: usize,
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatBackend for OpenAiChat {
    fn name(&self) -> &str {
        "openai"
    }

    fn complete(&self, messages: &[ChatMessage], params: &SamplingParams) -> Result<Vec<String>, GatewayError> {
        let model = self.model.as_deref().unwrap_or(&params.model_tag);
        let mut body = json!({
            "model": model,
            "messages": messages,
            "n": params.n_completions,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "seed": params.seed,
        });
        if self.forwards_min_p() {
            body["min_p"] = json!(params.min_p);
        }
        let reply = self.http.post("/chat/completions", body, &|| {
            self.min_p.store(false, Ordering::Relaxed)
        })?;
        let mut reply: ChatReply =
            serde_json::from_value(reply).map_err(|e| GatewayError::ProtocolViolation(e.to_string()))?;
        reply.choices.sort_by_key(|c| c.index);
        Ok(reply
            .choices
            .into_iter()
            .map(|c| c.message.content.unwrap_or_default())
            .collect())
    }

    fn forwards_min_p(&self) -> bool {
        self.min_p.load(Ordering::Relaxed)
    }
}

pub struct OpenAiEmbedder {
    http: Http,
    model: String,
}

impl OpenAiEmbedder {
    pub fn new(base_url: &str, api_key: Option<String>, model: impl Into<String>) -> Result<Self, GatewayError> {
        Ok(OpenAiEmbedder {
            http: Http::new(base_url, api_key, Duration::from_secs(120))?,
            model: model.into(),
        })
    }

    /// Reads `SOAR_EMBED_URL`; the key is shared with the chat endpoint.
    pub fn from_env(model: impl Into<String>) -> Result<Self, GatewayError> {
        let url = std::env::var(ENV_EMBED_URL)
            .map_err(|_| GatewayError::BackendUnavailable(format!("{ENV_EMBED_URL} is not set")))?;
        OpenAiEmbedder::new(&url, std::env::var(ENV_CHAT_KEY).ok(), model)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.http.retry = retry;
        self
    }
}

#[derive(Deserialize)]
struct EmbedReply {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

impl EmbeddingBackend for OpenAiEmbedder {
    fn name(&self) -> &str {
        "openai"
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        let body = json!({ "model": self.model, "input": texts });
        let reply = self.http.post("/embeddings", body, &|| {})?;
        let mut reply: EmbedReply =
            serde_json::from_value(reply).map_err(|e| GatewayError::ProtocolViolation(e.to_string()))?;
        reply.data.sort_by_key(|d| d.index);
        reply
            .data
            .into_iter()
            .map(|d| EmbeddingVector::new(d.embedding, self.model.clone()))
            .collect()
    }
}
