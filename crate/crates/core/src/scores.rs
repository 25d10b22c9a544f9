//! Context relevance, semantic similarity, and the combined score.
//!
//! CR is the cosine between the embedded dialogue context and the
//! generated text; SS the cosine between gold and generated. Both are
//! clamped to `[0, 1]` — the downstream loss weight `(1 - score)` and
//! the regression target need a bounded nonnegative value, and negative
//! cosines carry no useful signal here. The combined score is
//! `alpha * CR + beta * SS`, additionally clamped to at most 1 before
//! use as a loss weight so the weight stays nonnegative even when
//! `alpha + beta > 1`.
//!
//! Everything here is computed on detached text, outside any tape.

use crate::embeddings::{ConfiguredProvider, EmbeddingVector};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ContanicWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ContanicWeights {
    fn default() -> Self {
        // task-oriented defaults from the experimental setup
        Self {
            alpha: 0.3,
            beta: 0.7,
        }
    }
}

impl ContanicWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    /// The semantic-only configuration (`alpha = 0`).
    pub fn semantic_only(beta: f64) -> Result<Self> {
        Self::new(0.0, beta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "contanic weights must lie in [0,1], got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::Config("alpha + beta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub cr: f64,
    pub ss: f64,
    pub contanic: f64,
}

/// `dot(a,b) / (|a||b|)`; zero when either vector has zero norm.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Relevance of the generated text for the dialogue context, in `[0,1]`.
pub fn context_relevance<S: Scalar>(
    context_text: &str,
    generated_text: &str,
    provider: &ConfiguredProvider<S>,
) -> Result<f64> {
    let vs = provider.embed(&[context_text, generated_text])?;
    Ok(clamp01(cosine(&vs[0], &vs[1])?))
}

/// Similarity of the generated text to the gold response, in `[0,1]`.
pub fn semantic_similarity<S: Scalar>(
    gold_text: &str,
    generated_text: &str,
    provider: &ConfiguredProvider<S>,
) -> Result<f64> {
    let vs = provider.embed(&[gold_text, generated_text])?;
    Ok(clamp01(cosine(&vs[0], &vs[1])?))
}

/// `alpha * cr + beta * ss`.
pub fn contanic(cr: f64, ss: f64, weights: &ContanicWeights) -> f64 {
    weights.alpha * cr + weights.beta * ss
}

/// The combined score capped at 1 for use as a loss weight.
pub fn contanic_clamped(cr: f64, ss: f64, weights: &ContanicWeights) -> f64 {
    contanic(cr, ss, weights).min(1.0)
}

/// CR, SS and the combined score for one (context, gold, generated)
/// triple, with a single provider round trip.
pub fn score_triple<S: Scalar>(
    context_text: &str,
    gold_text: &str,
    generated_text: &str,
    provider: &ConfiguredProvider<S>,
    weights: &ContanicWeights,
) -> Result<ScoreTriple> {
    let vs = provider.embed(&[context_text, gold_text, generated_text])?;
    let cr = clamp01(cosine(&vs[0], &vs[2])?);
    let ss = clamp01(cosine(&vs[1], &vs[2])?);
    Ok(ScoreTriple {
        cr,
        ss,
        contanic: contanic(cr, ss, weights),
    })
}

/// Batched [`score_triple`]: one provider call for all texts, results in
/// input order.
pub fn score_batch<S: Scalar>(
    contexts: &[&str],
    golds: &[&str],
    generated: &[&str],
    provider: &ConfiguredProvider<S>,
    weights: &ContanicWeights,
) -> Result<Vec<ScoreTriple>> {
    let n = contexts.len();
    if golds.len() != n || generated.len() != n {
        return Err(Error::Provider(format!(
            "score_batch: mismatched lengths {n}/{}/{}",
            golds.len(),
            generated.len()
        )));
    }
    let mut all: Vec<&str> = Vec::with_capacity(3 * n);
    all.extend_from_slice(contexts);
    all.extend_from_slice(golds);
    all.extend_from_slice(generated);
    let vs = provider.embed(&all)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let cr = clamp01(cosine(&vs[i], &vs[2 * n + i])?);
        let ss = clamp01(cosine(&vs[n + i], &vs[2 * n + i])?);
        out.push(ScoreTriple {
            cr,
            ss,
            contanic: contanic(cr, ss, weights),
        });
    }
    Ok(out)
}
