//! Corpus-level evaluation metrics.
//!
//! Dialuation is a weighted average of context relevance and semantic
//! similarity rescaled to `[0, 100]`. BLEU and ROUGE follow the standard
//! definitions; smoothing and aggregation choices are documented on the
//! functions, since reported numbers are only comparable across runs of
//! this tool.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DialuationWeights {
    pub delta_c: f64,
    pub delta_ss: f64,
}

impl Default for DialuationWeights {
    fn default() -> Self {
        Self {
            delta_c: 0.3,
            delta_ss: 0.7,
        }
    }
}

impl DialuationWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta_c) || !(0.0..=1.0).contains(&self.delta_ss) {
            return Err(Error::Config(format!(
                "dialuation weights must lie in [0,1], got {} and {}",
                self.delta_c, self.delta_ss
            )));
        }
        if self.delta_c + self.delta_ss <= 0.0 {
            return Err(Error::Config(
                "dialuation weights must not both be zero".into(),
            ));
        }
        Ok(())
    }
}

/// `100 * (delta_c * cr + delta_ss * ss) / (delta_c + delta_ss)`,
/// in `[0, 100]` for `cr, ss` in `[0, 1]`.
pub fn dialuation(cr: f64, ss: f64, weights: &DialuationWeights) -> Result<f64> {
    weights.validate()?;
    Ok(100.0 * (weights.delta_c * cr + weights.delta_ss * ss) / (weights.delta_c + weights.delta_ss))
}

// ── BLEU ────────────────────────────────────────────────────────────

pub const BLEU_MAX_N: usize = 4;
/// Zero n-gram matches are floored at this inside the log, so the
/// cumulative score degrades to ~0 instead of being undefined.
pub const BLEU_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BleuScore {
    /// Clipped n-gram precision for n = 1..=max_n (0 where the candidate
    /// has no n-grams of that order).
    pub precisions: Vec<f64>,
    /// `BP * exp(mean of ln p_n)` over the orders the candidate can
    /// form; zero-match orders floored at [`BLEU_FLOOR`].
    pub cumulative: f64,
    pub brevity_penalty: f64,
    /// Set instead of an error when the candidate is empty.
    pub empty_candidate: bool,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level BLEU with clipped precisions and brevity penalty
/// `exp(1 - r/c)` when the candidate is shorter than the reference.
pub fn bleu(candidate: &[String], reference: &[String], max_n: usize) -> BleuScore {
    let max_n = max_n.max(1);
    if candidate.is_empty() {
        return BleuScore {
            precisions: vec![0.0; max_n],
            cumulative: 0.0,
            brevity_penalty: 0.0,
            empty_candidate: true,
        };
    }
    let mut precisions = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut orders_used = 0;
    for n in 1..=max_n {
        let total = candidate.len().saturating_sub(n - 1);
        if candidate.len() < n {
            precisions.push(0.0);
            continue;
        }
        let ref_counts = ngram_counts(reference, n);
        let cand_counts = ngram_counts(candidate, n);
        let mut matched = 0usize;
        for (gram, &c) in &cand_counts {
            let r = ref_counts.get(gram).copied().unwrap_or(0);
            matched += c.min(r);
        }
        let p = matched as f64 / total as f64;
        precisions.push(p);
        log_sum += p.max(BLEU_FLOOR).ln();
        orders_used += 1;
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let brevity_penalty = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    let cumulative = if orders_used == 0 {
        0.0
    } else {
        brevity_penalty * (log_sum / orders_used as f64).exp()
    };
    BleuScore {
        precisions,
        cumulative,
        brevity_penalty,
        empty_candidate: false,
    }
}

// ── ROUGE ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RougeScore {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    /// Set instead of an error when either side is empty.
    pub empty_input: bool,
}

fn rouge_n_f1(candidate: &[String], reference: &[String], n: usize) -> f64 {
    let cand_total = candidate.len().saturating_sub(n - 1);
    let ref_total = reference.len().saturating_sub(n - 1);
    if cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let ref_counts = ngram_counts(reference, n);
    let cand_counts = ngram_counts(candidate, n);
    let mut matched = 0usize;
    for (gram, &c) in &cand_counts {
        matched += c.min(ref_counts.get(gram).copied().unwrap_or(0));
    }
    let p = matched as f64 / cand_total as f64;
    let r = matched as f64 / ref_total as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1/2 F1 and LCS-based ROUGE-L F1.
pub fn rouge(candidate: &[String], reference: &[String]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore {
            rouge1: 0.0,
            rouge2: 0.0,
            rouge_l: 0.0,
            empty_input: true,
        };
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let rouge_l = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    RougeScore {
        rouge1: rouge_n_f1(candidate, reference, 1),
        rouge2: rouge_n_f1(candidate, reference, 2),
        rouge_l,
        empty_input: false,
    }
}

// ── distinct-n ──────────────────────────────────────────────────────

/// Unique n-grams over total n-grams across all candidates; 0 when there
/// are none.
pub fn distinct_n(candidates: &[Vec<String>], n: usize) -> f64 {
    let n = n.max(1);
    let mut total = 0usize;
    let mut unique: std::collections::HashSet<&[String]> = std::collections::HashSet::new();
    for cand in candidates {
        if cand.len() >= n {
            for w in cand.windows(n) {
                total += 1;
                unique.insert(w);
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

// ── Report ──────────────────────────────────────────────────────────

/// One evaluated example.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub context: String,
    pub gold: String,
    pub generated: String,
    pub bleu: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub cr: f64,
    pub ss: f64,
    pub dialuation: f64,
    /// Provider-cosine(gold, generated) × 100; stands in for an
    /// external-model similarity score.
    pub embed_score: f64,
}

/// Corpus-level aggregation: per-metric means over rows plus corpus-wide
/// diversity. Corpus BLEU here is the mean of sentence-level cumulative
/// scores.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreReport {
    pub examples: usize,
    pub means: HashMap<String, f64>,
    pub distinct1: f64,
    pub distinct2: f64,
    pub rows: Vec<EvalRow>,
}

impl ScoreReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let n = rows.len();
        let mut means = HashMap::new();
        let fields: [(&str, fn(&EvalRow) -> f64); 12] = [
            ("bleu", |r| r.bleu),
            ("bleu1", |r| r.bleu1),
            ("bleu2", |r| r.bleu2),
            ("bleu3", |r| r.bleu3),
            ("bleu4", |r| r.bleu4),
            ("rouge1", |r| r.rouge1),
            ("rouge2", |r| r.rouge2),
            ("rouge_l", |r| r.rouge_l),
            ("cr", |r| r.cr),
            ("ss", |r| r.ss),
            ("dialuation", |r| r.dialuation),
            ("embed_score", |r| r.embed_score),
        ];
        for (name, get) in fields {
            let mean = if n == 0 {
                0.0
            } else {
                rows.iter().map(get).sum::<f64>() / n as f64
            };
            means.insert(name.to_string(), mean);
        }
        let tokenized: Vec<Vec<String>> = rows
            .iter()
            .map(|r| crate::corpus::tokenize(&r.generated))
            .collect();
        ScoreReport {
            examples: n,
            means,
            distinct1: distinct_n(&tokenized, 1),
            distinct2: distinct_n(&tokenized, 2),
            rows,
        }
    }

    pub fn mean(&self, name: &str) -> f64 {
        self.means.get(name).copied().unwrap_or(0.0)
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    /// Plot-ready CSV with one line per evaluated example.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "dialogue_id,turn_index,bleu,bleu1,bleu2,bleu3,bleu4,rouge1,rouge2,rouge_l,cr,ss,dialuation,embed_score"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.dialogue_id,
                r.turn_index,
                r.bleu,
                r.bleu1,
                r.bleu2,
                r.bleu3,
                r.bleu4,
                r.rouge1,
                r.rouge2,
                r.rouge_l,
                r.cr,
                r.ss,
                r.dialuation,
                r.embed_score
            )?;
        }
        Ok(())
    }
}
