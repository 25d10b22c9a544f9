//! Sentence-embedding providers.
//!
//! Scores are built on fixed-dimension text embeddings obtained through
//! one of three interchangeable providers:
//!
//! * `hashed` — deterministic signed feature hashing of word unigrams
//!   and bigrams; the dependency-free default for tests and acceptance
//!   runs.
//! * `intrinsic` — mean-pooled encoder states of a frozen snapshot of
//!   the training model, refreshed only at epoch boundaries.
//! * `remote` — HTTP client for an external sentence-encoder service
//!   (`POST /embed`, `{"texts": [...]}` → `{"embeddings": [[...]]}`).
//!
//! Providers never touch the differentiation tape: every score derived
//! from them is a constant to the optimizer.
//!
//! By default the serialization tags (`<u>`, `<s>`, `<domain>`, ...) are
//! stripped before embedding; set `strip_tags: false` to embed them.

use crate::corpus::{strip_tags, Vocab};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::{fnv1a, fnv1a_init};
use serde::{Deserialize, Serialize};
use std::time::Duration;

pub const DEFAULT_HASHED_DIM: usize = 1 << 16;

/// Fixed-dimension real vector representing a text.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Hashed,
    Intrinsic,
    Remote,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Bucket count for hashed; checked against responses for remote;
    /// ignored for intrinsic (the model's hidden size applies).
    pub dim: usize,
    /// Strip serialization tags before embedding.
    pub strip_tags: bool,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_batch: usize,
    pub retries: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Hashed,
            dim: DEFAULT_HASHED_DIM,
            strip_tags: true,
            endpoint: None,
            timeout_ms: 10_000,
            max_batch: 100,
            retries: 2,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Provider("dim must be positive".into()));
        }
        if self.kind == ProviderKind::Remote && self.endpoint.is_none() {
            return Err(Error::Provider("remote provider needs an endpoint".into()));
        }
        if self.max_batch == 0 {
            return Err(Error::Provider("max_batch must be positive".into()));
        }
        Ok(())
    }
}

// ── Hashed provider ─────────────────────────────────────────────────

/// Signed bag-of-ngrams feature hashing: each unigram and bigram lands
/// in one of `dim` buckets with a ±1 sign, accumulated and then
/// L2-normalized (an empty text stays the zero vector).
#[derive(Clone, Debug)]
pub struct HashedProvider {
    dim: usize,
}

impl HashedProvider {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// (bucket, sign) for one n-gram term.
    pub fn bucket_sign(&self, term: &str) -> (usize, f64) {
        let h = fnv1a(fnv1a_init(), term.as_bytes());
        let bucket = (h % self.dim as u64) as usize;
        // separate hash stream for the sign
        let s = fnv1a(fnv1a(fnv1a_init(), b"sign:"), term.as_bytes());
        let sign = if s & 1 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }

    /// The hashed n-gram terms of a text, in order.
    pub fn terms(&self, text: &str) -> Vec<String> {
        let tokens = crate::corpus::tokenize(text);
        let mut terms: Vec<String> = tokens.clone();
        for pair in tokens.windows(2) {
            terms.push(format!("{}\u{1f}{}", pair[0], pair[1]));
        }
        terms
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut values = vec![0.0; self.dim];
        for term in self.terms(text) {
            let (bucket, sign) = self.bucket_sign(&term);
            values[bucket] += sign;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in values.iter_mut() {
                *v /= norm;
            }
        }
        EmbeddingVector::new(values)
    }
}

// ── Intrinsic provider ──────────────────────────────────────────────

/// Frozen snapshot of the training model used as a sentence encoder.
/// The snapshot is replaced only at epoch boundaries, so scores stay
/// constant within an epoch.
pub struct IntrinsicProvider<S: Scalar> {
    snapshot: Option<(Model<S>, Vocab)>,
}

impl<S: Scalar> IntrinsicProvider<S> {
    pub fn new() -> Self {
        Self { snapshot: None }
    }

    pub fn refresh(&mut self, model: &Model<S>, vocab: &Vocab) {
        self.snapshot = Some((model.clone(), vocab.clone()));
    }

    pub fn dim(&self) -> Option<usize> {
        self.snapshot.as_ref().map(|(m, _)| m.config().embed_dim)
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector> {
        let (model, vocab) = self.snapshot.as_ref().ok_or_else(|| {
            Error::Provider("intrinsic provider has no model snapshot yet".into())
        })?;
        let ids = vocab.encode(text);
        if ids.is_empty() {
            return Ok(EmbeddingVector::new(vec![0.0; model.config().embed_dim]));
        }
        Ok(EmbeddingVector::new(model.mean_pooled_hidden(&ids)?))
    }
}

impl<S: Scalar> Default for IntrinsicProvider<S> {
    fn default() -> Self {
        Self::new()
    }
}

// ── Remote provider ─────────────────────────────────────────────────

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Blocking client for the `/embed` wire protocol. Batches of at most
/// `max_batch` texts are sent sequentially and reassembled in order.
pub struct RemoteProvider {
    endpoint: String,
    dim: usize,
    max_batch: usize,
    retries: u32,
    agent: ureq::Agent,
}

impl RemoteProvider {
    pub fn new(endpoint: String, dim: usize, timeout: Duration, max_batch: usize, retries: u32) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(timeout)
            .build();
        Self {
            endpoint,
            dim,
            max_batch: max_batch.max(1),
            retries,
            agent,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn post_batch(&self, batch: &[String], batch_index: usize) -> Result<Vec<EmbeddingVector>> {
        let mut last_err = String::new();
        for _attempt in 0..=self.retries {
            match self
                .agent
                .post(&self.endpoint)
                .send_json(EmbedRequest { texts: batch })
            {
                Ok(resp) => {
                    let parsed: EmbedResponse = resp.into_json().map_err(|e| {
                        Error::RemoteEmbed {
                            endpoint: self.endpoint.clone(),
                            batch_index,
                            detail: format!("bad response body: {e}"),
                        }
                    })?;
                    if parsed.embeddings.len() != batch.len() {
                        return Err(Error::RemoteEmbed {
                            endpoint: self.endpoint.clone(),
                            batch_index,
                            detail: format!(
                                "sent {} texts, got {} embeddings",
                                batch.len(),
                                parsed.embeddings.len()
                            ),
                        });
                    }
                    let mut out = Vec::with_capacity(parsed.embeddings.len());
                    for e in parsed.embeddings {
                        if e.len() != self.dim {
                            return Err(Error::DimMismatch {
                                expected: self.dim,
                                got: e.len(),
                            });
                        }
                        out.push(EmbeddingVector::new(e));
                    }
                    return Ok(out);
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::RemoteEmbed {
            endpoint: self.endpoint.clone(),
            batch_index,
            detail: format!("failed after {} attempts: {last_err}", self.retries + 1),
        })
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(texts.len());
        for (batch_index, batch) in texts.chunks(self.max_batch).enumerate() {
            out.extend(self.post_batch(batch, batch_index)?);
        }
        Ok(out)
    }
}

// ── Unified provider ────────────────────────────────────────────────

pub enum Provider<S: Scalar> {
    Hashed(HashedProvider),
    Intrinsic(IntrinsicProvider<S>),
    Remote(RemoteProvider),
}

impl<S: Scalar> Provider<S> {
    pub fn from_config(cfg: &ProviderConfig) -> Result<(Self, ProviderConfig)> {
        cfg.validate()?;
        let provider = match cfg.kind {
            ProviderKind::Hashed => Provider::Hashed(HashedProvider::new(cfg.dim)),
            ProviderKind::Intrinsic => Provider::Intrinsic(IntrinsicProvider::new()),
            ProviderKind::Remote => Provider::Remote(RemoteProvider::new(
                cfg.endpoint.clone().unwrap(),
                cfg.dim,
                Duration::from_millis(cfg.timeout_ms),
                cfg.max_batch,
                cfg.retries,
            )),
        };
        Ok((provider, cfg.clone()))
    }

    /// Refresh the intrinsic snapshot; no-op for other kinds.
    pub fn refresh_intrinsic(&mut self, model: &Model<S>, vocab: &Vocab) {
        if let Provider::Intrinsic(p) = self {
            p.refresh(model, vocab);
        }
    }

    /// Embed texts in input order. `strip` removes serialization tags
    /// first (the configured default).
    pub fn embed_with(&self, texts: &[&str], strip: bool) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::Provider("embed: empty text list".into()));
        }
        let prepared: Vec<String> = texts
            .iter()
            .map(|t| if strip { strip_tags(t) } else { t.to_string() })
            .collect();
        match self {
            Provider::Hashed(p) => Ok(prepared.iter().map(|t| p.embed_one(t)).collect()),
            Provider::Intrinsic(p) => prepared.iter().map(|t| p.embed_one(t)).collect(),
            Provider::Remote(p) => p.embed(&prepared),
        }
    }
}

/// Convenience wrapper carrying the configured strip behaviour with the
/// provider.
pub struct ConfiguredProvider<S: Scalar> {
    pub provider: Provider<S>,
    pub strip_tags: bool,
}

impl<S: Scalar> ConfiguredProvider<S> {
    pub fn from_config(cfg: &ProviderConfig) -> Result<Self> {
        let (provider, cfg) = Provider::from_config(cfg)?;
        Ok(Self {
            provider,
            strip_tags: cfg.strip_tags,
        })
    }

    pub fn hashed_default() -> Self {
        Self {
            provider: Provider::Hashed(HashedProvider::new(DEFAULT_HASHED_DIM)),
            strip_tags: true,
        }
    }

    pub fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        self.provider.embed_with(texts, self.strip_tags)
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed(&[text])?.pop().unwrap())
    }

    pub fn refresh_intrinsic(&mut self, model: &Model<S>, vocab: &Vocab) {
        self.provider.refresh_intrinsic(model, vocab);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hashed_is_deterministic() {
        let p = HashedProvider::new(1 << 12);
        let a = p.embed_one("good day");
        let b = p.embed_one("good day");
        assert_eq!(a, b);
    }

    #[test]
    fn hashed_empty_text_is_zero_vector() {
        let p = HashedProvider::new(64);
        let v = p.embed_one("");
        assert_eq!(v.norm(), 0.0);
        assert_eq!(v.dim(), 64);
    }

    #[test]
    fn embed_preserves_order() {
        let p: ConfiguredProvider<f64> = ConfiguredProvider::hashed_default();
        let texts = ["alpha", "beta", "gamma"];
        let vs = p.embed(&texts).unwrap();
        assert_eq!(vs.len(), 3);
        for (i, t) in texts.iter().enumerate() {
            assert_eq!(vs[i], p.embed_one(t).unwrap());
        }
    }

    #[test]
    fn partial_overlap_has_intermediate_cosine() {
        let p = HashedProvider::new(DEFAULT_HASHED_DIM);
        let a = p.embed_one("nice to see you");
        let b = p.embed_one("nice to meet you");
        let cos: f64 = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| x * y)
            .sum();
        assert!(cos > 0.0 && cos < 1.0, "cosine {cos}");
    }

    proptest! {
        #[test]
        fn hashed_norm_is_one_or_zero(s in "[a-z ]{0,40}") {
            let p = HashedProvider::new(1 << 12);
            let v = p.embed_one(&s);
            let n = v.norm();
            if crate::corpus::tokenize(&s).is_empty() {
                prop_assert_eq!(n, 0.0);
            } else {
                prop_assert!((n - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn embed_is_order_equivariant(perm in 0usize..6) {
            let p: ConfiguredProvider<f64> = ConfiguredProvider::hashed_default();
            let base = ["one fish", "two fish", "red fish"];
            let orders = [[0,1,2],[0,2,1],[1,0,2],[1,2,0],[2,0,1],[2,1,0]];
            let order = orders[perm];
            let permuted: Vec<&str> = order.iter().map(|&i| base[i]).collect();
            let vs_base = p.embed(&base).unwrap();
            let vs_perm = p.embed(&permuted).unwrap();
            for (k, &i) in order.iter().enumerate() {
                prop_assert_eq!(&vs_perm[k], &vs_base[i]);
            }
        }
    }
}
