//! Training losses.
//!
//! Five variants share one assembly path:
//!
//! * `ce` — plain token cross-entropy.
//! * `weighted-semantic-ce` — CE scaled per example by `(1 - score)`
//!   where the score uses semantic similarity only (`alpha = 0`).
//! * `weighted-semantic-context-ce` — same with the full combined score.
//! * `semantic-reinforcement` — the estimator pipeline below with a
//!   semantic-only score target.
//! * `semtextuallogue` — `lambda * L_CE + (1 - lambda) * L_SCL +
//!   sigma * L_BSE` with the full combined score target.
//!
//! The scores are computed on greedy-decoded text and detached before
//! they reach the tape: the argmax decode makes them non-differentiable,
//! and adding such a score to CE provably leaves gradients untouched
//! (`additive_constant_*` tests reproduce this), so the weighting is
//! multiplicative.
//!
//! Gradient routing: the `(1 - BSEscore)` factor inside L_SCL uses a
//! frozen copy of the estimator parameters. Otherwise L_SCL would be
//! minimized by saturating the estimator at 1 regardless of response
//! quality; the estimator learns from L_BSE alone. Model parameters
//! receive gradient through both factors of L_SCL and through L_BSE.

use crate::error::{Error, Result};
use crate::model::{BoundParams, ParamSet, TeacherForced};
use crate::scalar::Scalar;
use crate::scores::ContanicWeights;
use crate::tensor::{Graph, Tensor, VarId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_BSE_HIDDEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    Ce,
    WeightedSemanticCe,
    WeightedSemanticContextCe,
    SemanticReinforcement,
    Semtextuallogue,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] = [
        LossVariant::Ce,
        LossVariant::WeightedSemanticCe,
        LossVariant::WeightedSemanticContextCe,
        LossVariant::SemanticReinforcement,
        LossVariant::Semtextuallogue,
    ];

    /// Whether this variant scores decoded text each batch.
    pub fn needs_scores(&self) -> bool {
        !matches!(self, LossVariant::Ce)
    }

    /// Whether this variant trains the baseline estimator.
    pub fn uses_estimator(&self) -> bool {
        matches!(
            self,
            LossVariant::SemanticReinforcement | LossVariant::Semtextuallogue
        )
    }

    /// Semantic-only variants drop the context term from the score.
    pub fn effective_contanic(&self, base: &ContanicWeights) -> ContanicWeights {
        match self {
            LossVariant::WeightedSemanticCe | LossVariant::SemanticReinforcement => {
                ContanicWeights {
                    alpha: 0.0,
                    beta: base.beta,
                }
            }
            _ => *base,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::Ce => "ce",
            LossVariant::WeightedSemanticCe => "weighted-semantic-ce",
            LossVariant::WeightedSemanticContextCe => "weighted-semantic-context-ce",
            LossVariant::SemanticReinforcement => "semantic-reinforcement",
            LossVariant::Semtextuallogue => "semtextuallogue",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown loss variant {s:?}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub lambda: f64,
    pub sigma: f64,
    pub contanic: ContanicWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::Semtextuallogue,
            lambda: 0.5,
            sigma: 1.0,
            contanic: ContanicWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::Config(format!(
                "lambda and sigma must lie in [0,1], got {} and {}",
                self.lambda, self.sigma
            )));
        }
        self.contanic.validate()
    }
}

/// Per-batch loss components; what the training log records each step.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_scl: f64,
    pub l_bse: f64,
    pub l_total: f64,
    pub contanic_score: f64,
    pub bse_score: f64,
}

/// Assembled batch loss: the tape root plus its recorded components.
pub struct LossOutput {
    pub total: VarId,
    pub breakdown: LossBreakdown,
}

// ── Cross-entropy ───────────────────────────────────────────────────

/// Per-example CE: mean over each example's non-pad positions of the
/// fused log-softmax NLL. Returns a `[batch]` vector on the tape.
pub fn per_example_ce<S: Scalar>(g: &mut Graph<S>, tf: &TeacherForced) -> Result<VarId> {
    let (b, t) = (tf.batch, tf.tgt_len);
    let counts: Vec<usize> = (0..b)
        .map(|bi| tf.target_mask[bi * t..(bi + 1) * t].iter().filter(|&&m| m).count())
        .collect();
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Loss("an example has only padded positions".into()));
    }
    let rows = g.softmax_xent(tf.logits, &tf.targets, &tf.target_mask)?;
    let grid = g.reshape(rows, &[b, t])?;
    let mut w = vec![S::zero(); b * t];
    for bi in 0..b {
        let inv = S::one() / S::from_usize(counts[bi]);
        for ti in 0..t {
            if tf.target_mask[bi * t + ti] {
                w[bi * t + ti] = inv;
            }
        }
    }
    let weights = g.constant(Tensor::new(vec![b, t], w)?);
    let weighted = g.mul(grid, weights)?;
    g.sum_axis(weighted, 1)
}

/// Batch CE: mean over examples of [`per_example_ce`].
pub fn cross_entropy<S: Scalar>(g: &mut Graph<S>, tf: &TeacherForced) -> Result<(VarId, VarId)> {
    let per = per_example_ce(g, tf)?;
    let mean = g.mean_all(per)?;
    Ok((mean, per))
}

/// CE from explicit probability distributions `[batch, tgt_len, vocab]`
/// (`-log(max(p, 1e-12))` on the gold entries). The fused-logits path
/// above is the training route; this one honors the distribution-level
/// contract and the clamp.
pub fn cross_entropy_from_dists<S: Scalar>(
    g: &mut Graph<S>,
    dists: VarId,
    targets: &[usize],
    target_mask: &[bool],
) -> Result<VarId> {
    let shape = g.value(dists).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Loss(format!(
            "expected [batch, len, vocab] distributions, got {shape:?}"
        )));
    }
    let (b, t, v) = (shape[0], shape[1], shape[2]);
    let counts: Vec<usize> = (0..b)
        .map(|bi| target_mask[bi * t..(bi + 1) * t].iter().filter(|&&m| m).count())
        .collect();
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Loss("an example has only padded positions".into()));
    }
    let flat = g.reshape(dists, &[b * t, v])?;
    let rows = g.nll_from_probs(flat, targets, target_mask)?;
    let grid = g.reshape(rows, &[b, t])?;
    let mut w = vec![S::zero(); b * t];
    for bi in 0..b {
        let inv = S::one() / S::from_usize(counts[bi]);
        for ti in 0..t {
            if target_mask[bi * t + ti] {
                w[bi * t + ti] = inv;
            }
        }
    }
    let weights = g.constant(Tensor::new(vec![b, t], w)?);
    let weighted = g.mul(grid, weights)?;
    let per = g.sum_axis(weighted, 1)?;
    g.mean_all(per)
}

// ── Score-weighted CE ───────────────────────────────────────────────

/// `mean_i (1 - score_i) * CE_i` with detached per-example scores.
/// The gradient equals the CE gradient scaled per example by
/// `(1 - score_i)`.
pub fn weighted_contanic_ce<S: Scalar>(
    g: &mut Graph<S>,
    ce_per_example: VarId,
    scores: &[f64],
) -> Result<VarId> {
    let b = g.value(ce_per_example).numel();
    if scores.len() != b {
        return Err(Error::Loss(format!(
            "{} scores for {b} examples",
            scores.len()
        )));
    }
    if let Some(&bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Loss(format!(
            "score {bad} outside [0,1]; clamp before weighting"
        )));
    }
    let w: Vec<S> = scores.iter().map(|&s| S::from_f64(1.0 - s)).collect();
    let weights = g.constant(Tensor::new(vec![b], w)?);
    let weighted = g.mul(ce_per_example, weights)?;
    g.mean_all(weighted)
}

// ── Baseline estimator ──────────────────────────────────────────────

/// Two-layer feed-forward scorer over the time-mean-pooled predicted
/// distribution: `vocab → hidden (relu) → 1 (sigmoid)`. Acts as a
/// trainable stand-in for a human perception score in `(0, 1)`.
pub struct BaselineEstimator<S: Scalar> {
    params: ParamSet<S>,
    vocab_size: usize,
    hidden: usize,
}

impl<S: Scalar> BaselineEstimator<S> {
    pub fn new(vocab_size: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let mut weight = |params: &mut ParamSet<S>, name: &str, rows: usize, cols: usize| {
            let scale = 1.0 / (rows as f64).sqrt();
            let data: Vec<S> = (0..rows * cols)
                .map(|_| S::from_f64(rng.gen_range(-scale..scale)))
                .collect();
            params.push(name, Tensor::new(vec![rows, cols], data).unwrap());
        };
        weight(&mut params, "bse.w1", vocab_size, hidden);
        params.push("bse.b1", Tensor::zeros(&[hidden]));
        weight(&mut params, "bse.w2", hidden, 1);
        params.push("bse.b2", Tensor::zeros(&[1]));
        Self {
            params,
            vocab_size,
            hidden,
        }
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> BoundParams {
        BoundParams::from_ids(
            self.params
                .tensors()
                .map(|t| g.leaf(t.clone(), trainable))
                .collect(),
        )
    }

    /// Score per example from pooled distributions `[batch, vocab]`.
    pub fn forward(&self, g: &mut Graph<S>, bound: &BoundParams, pooled: VarId) -> Result<VarId> {
        let b = g.value(pooled).shape()[0];
        let h = g.matmul(pooled, bound.id(0))?;
        let h = g.add_suffix(h, bound.id(1))?;
        let h = g.relu(h)?;
        let o = g.matmul(h, bound.id(2))?;
        let o = g.add_suffix(o, bound.id(3))?;
        let o = g.sigmoid(o)?;
        g.reshape(o, &[b])
    }
}

/// Time-mean-pool predicted distributions over non-pad positions:
/// `[batch, tgt_len, vocab]` → `[batch, vocab]`.
pub fn pool_distributions<S: Scalar>(
    g: &mut Graph<S>,
    dists: VarId,
    target_mask: &[bool],
) -> Result<VarId> {
    let shape = g.value(dists).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Loss(format!(
            "expected [batch, len, vocab] distributions, got {shape:?}"
        )));
    }
    let (b, t, v) = (shape[0], shape[1], shape[2]);
    let mut w = vec![S::zero(); b * t * v];
    for bi in 0..b {
        let count = target_mask[bi * t..(bi + 1) * t].iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Loss("an example has only padded positions".into()));
        }
        let inv = S::one() / S::from_usize(count);
        for ti in 0..t {
            if target_mask[bi * t + ti] {
                let base = (bi * t + ti) * v;
                for x in &mut w[base..base + v] {
                    *x = inv;
                }
            }
        }
    }
    let weights = g.constant(Tensor::new(vec![b, t, v], w)?);
    let weighted = g.mul(dists, weights)?;
    g.sum_axis(weighted, 1)
}

/// Full estimator forward from teacher-forced output: pooled
/// distributions through the estimator, one score in `(0,1)` per
/// example. Differentiable w.r.t. both the model (through the
/// distributions) and the estimator parameters.
pub fn bse_forward<S: Scalar>(
    g: &mut Graph<S>,
    tf: &TeacherForced,
    bse: &BaselineEstimator<S>,
    bound_bse: &BoundParams,
) -> Result<VarId> {
    let dists = tf.distributions(g)?;
    let pooled = pool_distributions(g, dists, &tf.target_mask)?;
    bse.forward(g, bound_bse, pooled)
}

// ── Composite losses ────────────────────────────────────────────────

/// `mean_i (1 - bse_i) * ce_i`.
pub fn l_scl<S: Scalar>(g: &mut Graph<S>, bse_scores: VarId, ce_per_example: VarId) -> Result<VarId> {
    let b = g.value(bse_scores).numel();
    let ones = g.constant(Tensor::full(&[b], S::one()));
    let inv = g.sub(ones, bse_scores)?;
    let prod = g.mul(inv, ce_per_example)?;
    g.mean_all(prod)
}

/// `mean_i (bse_i - target_i)^2` against detached score targets.
pub fn l_bse<S: Scalar>(g: &mut Graph<S>, bse_scores: VarId, targets: &[f64]) -> Result<VarId> {
    let b = g.value(bse_scores).numel();
    if targets.len() != b {
        return Err(Error::Loss(format!(
            "{} targets for {b} estimator scores",
            targets.len()
        )));
    }
    let t: Vec<S> = targets.iter().map(|&x| S::from_f64(x)).collect();
    let tv = g.constant(Tensor::new(vec![b], t)?);
    let diff = g.sub(bse_scores, tv)?;
    let sq = g.mul(diff, diff)?;
    g.mean_all(sq)
}

/// `lambda * l_ce + (1 - lambda) * l_scl + sigma * l_bse`.
pub fn semtextuallogue_total<S: Scalar>(
    g: &mut Graph<S>,
    l_ce: VarId,
    l_scl: VarId,
    l_bse: VarId,
    lambda: f64,
    sigma: f64,
) -> Result<VarId> {
    let a = g.mul_scalar(l_ce, S::from_f64(lambda))?;
    let b = g.mul_scalar(l_scl, S::from_f64(1.0 - lambda))?;
    let c = g.mul_scalar(l_bse, S::from_f64(sigma))?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// Assemble the configured variant's batch loss on the tape.
///
/// `scores` are the detached per-example combined scores (already using
/// the variant's effective weights and clamped to `[0,1]`); required for
/// every variant except plain CE. `bse` with its trainable binding is
/// required for the estimator variants.
pub fn assemble<S: Scalar>(
    g: &mut Graph<S>,
    tf: &TeacherForced,
    cfg: &LossConfig,
    scores: Option<&[f64]>,
    bse: Option<(&BaselineEstimator<S>, &BoundParams)>,
) -> Result<LossOutput> {
    cfg.validate()?;
    let (ce_mean, ce_per) = cross_entropy(g, tf)?;
    let l_ce_val = g.value(ce_mean).item()?.to_f64();

    match cfg.variant {
        LossVariant::Ce => Ok(LossOutput {
            total: ce_mean,
            breakdown: LossBreakdown {
                l_ce: l_ce_val,
                l_total: l_ce_val,
                ..Default::default()
            },
        }),
        LossVariant::WeightedSemanticCe | LossVariant::WeightedSemanticContextCe => {
            let scores =
                scores.ok_or_else(|| Error::Loss("variant needs per-example scores".into()))?;
            let total = weighted_contanic_ce(g, ce_per, scores)?;
            let total_val = g.value(total).item()?.to_f64();
            Ok(LossOutput {
                total,
                breakdown: LossBreakdown {
                    l_ce: l_ce_val,
                    l_scl: total_val,
                    l_total: total_val,
                    contanic_score: mean(scores),
                    ..Default::default()
                },
            })
        }
        LossVariant::SemanticReinforcement | LossVariant::Semtextuallogue => {
            let scores =
                scores.ok_or_else(|| Error::Loss("variant needs per-example scores".into()))?;
            let (bse, bound_bse) =
                bse.ok_or_else(|| Error::Loss("variant needs the baseline estimator".into()))?;
            if let Some(&bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                return Err(Error::Loss(format!("score {bad} outside [0,1]")));
            }
            let dists = tf.distributions(g)?;
            let pooled = pool_distributions(g, dists, &tf.target_mask)?;
            // trainable path: supervises the estimator via L_BSE
            let bse_scores = bse.forward(g, bound_bse, pooled)?;
            // frozen path: weights L_SCL without feeding the estimator
            let frozen = bse.bind(g, false);
            let bse_frozen = bse.forward(g, &frozen, pooled)?;

            let scl = l_scl(g, bse_frozen, ce_per)?;
            let bse_loss = l_bse(g, bse_scores, scores)?;
            let total = semtextuallogue_total(g, ce_mean, scl, bse_loss, cfg.lambda, cfg.sigma)?;
            let bse_mean = {
                let t = g.value(bse_scores);
                t.data().iter().map(|&v| v.to_f64()).sum::<f64>() / t.numel() as f64
            };
            Ok(LossOutput {
                total,
                breakdown: LossBreakdown {
                    l_ce: l_ce_val,
                    l_scl: g.value(scl).item()?.to_f64(),
                    l_bse: g.value(bse_loss).item()?.to_f64(),
                    l_total: g.value(total).item()?.to_f64(),
                    contanic_score: mean(scores),
                    bse_score: bse_mean,
                },
            })
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Recompose the total from the breakdown per the active variant; tests
/// assert this stays within 1e-9 of the recorded total.
pub fn recompose(cfg: &LossConfig, b: &LossBreakdown) -> f64 {
    match cfg.variant {
        LossVariant::Ce => b.l_ce,
        LossVariant::WeightedSemanticCe | LossVariant::WeightedSemanticContextCe => b.l_scl,
        LossVariant::SemanticReinforcement | LossVariant::Semtextuallogue => {
            cfg.lambda * b.l_ce + (1.0 - cfg.lambda) * b.l_scl + cfg.sigma * b.l_bse
        }
    }
}
