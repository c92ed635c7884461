//! Deterministic stand-ins for the chat and embedding endpoints.
//!
//! Mock output depends only on (seed, prompt, completion index), never on
//! call order, so concurrent searches stay reproducible.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ChatBackend, ChatMessage, EmbeddingBackend, EmbeddingVector, GatewayError, SamplingParams};
use crate::mock::ProgramLibrary;

/// What a mock responder sees for one completion.
pub struct MockCall<'a> {
    pub messages: &'a [ChatMessage],
    pub params: &'a SamplingParams,
    pub index: usize,
    pub rng: &'a mut ChaCha8Rng,
}

type Responder = Arc<dyn Fn(&mut MockCall<'_>) -> String + Send + Sync>;

#[derive(Clone)]
pub struct MockChat {
    responder: Responder,
    calls: Arc<AtomicU64>,
}

fn prompt_seed(seed: u64, messages: &[ChatMessage]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for m in messages {
        h.update(m.role.as_str().as_bytes());
        h.update([0u8]);
        h.update(m.content.as_bytes());
        h.update([0u8]);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl MockChat {
    pub fn new(f: impl Fn(&mut MockCall<'_>) -> String + Send + Sync + 'static) -> Self {
        MockChat {
            responder: Arc::new(f),
            calls: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Always answers `text`.
    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        MockChat::new(move |_| text.clone())
    }

    /// Picks a library program uniformly at random for each completion and
    /// answers with prose (no code block) with probability `garbage_rate`.
    pub fn from_library(lib: &ProgramLibrary, garbage_rate: f64) -> Self {
        let sources: Vec<String> = lib.entries().iter().map(|e| e.source.clone()).collect();
        MockChat::new(move |call| {
            if call.rng.random::<f64>() < garbage_rate {
                return "I could not find the transformation rule.".to_string();
            }
            let pick = &sources[call.rng.random_range(0..sources.len())];
            format!("The rule can be written as:\n```python\n{pick}\n```")
        })
    }

    /// Number of `complete` calls served.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl ChatBackend for MockChat {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, messages: &[ChatMessage], params: &SamplingParams) -> Result<Vec<String>, GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut rng = ChaCha8Rng::seed_from_u64(prompt_seed(params.seed, messages));
        Ok((0..params.n_completions)
            .map(|index| {
                let mut call = MockCall {
                    messages,
                    params,
                    index,
                    rng: &mut rng,
                };
                (self.responder)(&mut call)
            })
            .collect())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Bag-of-tokens hashing embedder: identical token multisets map to
/// identical vectors.
#[derive(Clone, Debug)]
pub struct MockEmbedder {
    pub dim: usize,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        MockEmbedder { dim: 256 }
    }
}

impl MockEmbedder {
    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut any = false;
        for token in text
            .split(|c: char| !(c.is_alphanumeric() || c == '_'))
            .filter(|t| !t.is_empty())
        {
            v[(fnv1a(token.as_bytes()) % self.dim as u64) as usize] += 1.0;
            any = true;
        }
        if !any {
            v[0] = 1.0;
        }
        v
    }
}

impl EmbeddingBackend for MockEmbedder {
    fn name(&self) -> &str {
        "mock"
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        texts
            .iter()
            .map(|t| EmbeddingVector::new(self.vector(t), "mock-bag-of-tokens"))
            .collect()
    }
}
