//! Batched training loop binding model, losses, scores, and corpus.
//!
//! Determinism contract: (seed, config, corpus) fully determines the
//! run. Per-purpose RNG streams are derived from the seed (model init,
//! estimator init, per-epoch batch order), decode is greedy, providers
//! are deterministic, and all accumulation is single-threaded in index
//! order. Resuming from a checkpoint at step k reproduces the
//! uninterrupted trajectory because batch order is re-derived per epoch
//! rather than drawn from a running stream.

use crate::corpus::{window_examples, Dialogue, Vocab, EOS_ID};
use crate::embeddings::{ConfiguredProvider, ProviderConfig};
use crate::error::{Error, Result};
use crate::losses::{
    assemble, BaselineEstimator, LossBreakdown, LossConfig, DEFAULT_BSE_HIDDEN,
};
use crate::metrics::{bleu, dialuation, rouge, DialuationWeights, EvalRow, ScoreReport, BLEU_MAX_N};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::scores::{contanic_clamped, score_batch, ContanicWeights};
use crate::tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

// ── Optimizer ───────────────────────────────────────────────────────

/// Adaptive moment estimation with decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Adam<S: Scalar> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update over a flat parameter list. `grads` must align with
    /// the moment slots; `scale` pre-multiplies every gradient (global
    /// norm clipping happens there).
    pub fn apply(&mut self, params: Vec<&mut Tensor<S>>, grads: &[Tensor<S>], scale: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let one = S::one();
        let lr = S::from_f64(self.cfg.lr);
        let eps = S::from_f64(self.cfg.eps);
        let wd = S::from_f64(self.cfg.weight_decay);
        let c1 = S::from_f64(1.0 - self.cfg.beta1.powi(t));
        let c2 = S::from_f64(1.0 - self.cfg.beta2.powi(t));
        let scale = S::from_f64(scale);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i] * scale;
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                pd[i] = pd[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * pd[i]);
            }
        }
    }
}

// ── Config & logs ───────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub provider: ProviderConfig,
    pub context_window: usize,
    pub grad_clip: f64,
    pub model: ModelConfig,
    pub bse_hidden: usize,
    /// Greedy decode for scoring is capped at gold length plus this.
    pub decode_extra_tokens: usize,
    pub dialuation: DialuationWeights,
    /// Where non-finite-loss diagnostics are dumped.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            batch_size: 32,
            epochs: 5,
            seed: 0,
            loss: LossConfig::default(),
            provider: ProviderConfig::default(),
            context_window: crate::corpus::DEFAULT_CONTEXT_WINDOW,
            grad_clip: 1.0,
            model: ModelConfig::default(),
            bse_hidden: DEFAULT_BSE_HIDDEN,
            decode_extra_tokens: 8,
            dialuation: DialuationWeights::default(),
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch size and epochs must be positive".into(),
            ));
        }
        self.loss.validate()?;
        self.provider.validate()?;
        self.dialuation.validate()
    }
}

/// One training step, as logged to the JSONL run log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub variant: String,
    pub l_ce: f64,
    pub l_scl: f64,
    pub l_bse: f64,
    pub l_total: f64,
    pub contanic: f64,
    pub bse_score: f64,
}

/// Per-epoch validation snapshot (metric means only; full rows live in
/// evaluation reports).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub epoch: usize,
    pub step: usize,
    pub examples: usize,
    pub means: std::collections::HashMap<String, f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epoch_wall_secs: Vec<f64>,
    pub validation: Vec<ValidationSummary>,
}

impl RunLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for s in &self.steps {
            serde_json::to_writer(&mut f, s)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.l_total).collect()
    }
}

// ── Examples ────────────────────────────────────────────────────────

/// A windowed example with its token encodings cached.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub context_text: String,
    pub gold_text: String,
    pub src_ids: Vec<usize>,
    /// Gold token ids ending with eos.
    pub gold_ids: Vec<usize>,
}

pub fn prepare_examples(
    dialogues: &[Dialogue],
    window: usize,
    vocab: &Vocab,
    max_target_len: usize,
) -> Result<Vec<PreparedExample>> {
    let examples = window_examples(dialogues, window)?;
    Ok(examples
        .into_iter()
        .map(|e| {
            let src_ids = vocab.encode(&e.context_text);
            let mut gold_ids = vocab.encode(&e.gold_text);
            gold_ids.truncate(max_target_len.saturating_sub(1).max(1));
            gold_ids.push(EOS_ID);
            PreparedExample {
                dialogue_id: e.dialogue_id,
                turn_index: e.turn_index,
                context_text: e.context_text,
                gold_text: e.gold_text,
                src_ids,
                gold_ids,
            }
        })
        .collect())
}

fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = crate::fnv1a(crate::fnv1a_init(), &seed.to_le_bytes());
    h = crate::fnv1a(h, label.as_bytes());
    h
}

// ── Trainer ─────────────────────────────────────────────────────────

pub struct Trainer<S: Scalar> {
    pub cfg: TrainConfig,
    pub model: Model<S>,
    pub bse: BaselineEstimator<S>,
    pub optimizer: Adam<S>,
    pub provider: ConfiguredProvider<S>,
    pub vocab: Vocab,
    /// Next global step index.
    pub step: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(mut cfg: TrainConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        cfg.model.vocab_size = vocab.len();
        let model = Model::new(cfg.model.clone(), derive_seed(cfg.seed, "model"))?;
        let bse = BaselineEstimator::new(vocab.len(), cfg.bse_hidden, derive_seed(cfg.seed, "bse"));
        let shapes: Vec<&[usize]> = model
            .params()
            .tensors()
            .map(|t| t.shape())
            .chain(bse.params().tensors().map(|t| t.shape()))
            .collect();
        let optimizer = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            &shapes,
        );
        let mut provider = ConfiguredProvider::from_config(&cfg.provider)?;
        provider.refresh_intrinsic(&model, &vocab);
        Ok(Self {
            cfg,
            model,
            bse,
            optimizer,
            provider,
            vocab,
            step: 0,
        })
    }

    pub fn steps_per_epoch(&self, n_examples: usize) -> usize {
        n_examples.div_ceil(self.cfg.batch_size).max(1)
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        self.steps_per_epoch(n_examples) * self.cfg.epochs
    }

    /// Run `steps` training steps over `examples`, continuing from the
    /// current global step. Returns the per-step records produced.
    pub fn run(&mut self, examples: &[PreparedExample], steps: usize) -> Result<RunLog> {
        self.run_with_validation(examples, steps, None)
    }

    /// As [`run`](Self::run), evaluating `validation` at the end of each
    /// completed epoch.
    pub fn run_with_validation(
        &mut self,
        examples: &[PreparedExample],
        steps: usize,
        validation: Option<&[PreparedExample]>,
    ) -> Result<RunLog> {
        if examples.is_empty() {
            return Err(Error::Corpus("no training examples".into()));
        }
        let spe = self.steps_per_epoch(examples.len());
        let mut log = RunLog::default();
        let mut epoch_order: Vec<usize> = Vec::new();
        let mut current_epoch = usize::MAX;
        let mut epoch_start = std::time::Instant::now();
        for _ in 0..steps {
            let epoch = self.step / spe;
            if epoch != current_epoch {
                if current_epoch != usize::MAX {
                    log.epoch_wall_secs.push(epoch_start.elapsed().as_secs_f64());
                }
                epoch_start = std::time::Instant::now();
                current_epoch = epoch;
                // order re-derived per epoch: resume-safe determinism
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &format!("epoch{epoch}")));
                epoch_order = (0..examples.len()).collect();
                epoch_order.shuffle(&mut rng);
                self.provider.refresh_intrinsic(&self.model, &self.vocab);
            }
            let within = self.step % spe;
            let lo = within * self.cfg.batch_size;
            let hi = (lo + self.cfg.batch_size).min(examples.len());
            let batch: Vec<&PreparedExample> =
                epoch_order[lo..hi].iter().map(|&i| &examples[i]).collect();
            let record = self.train_step(&batch, epoch)?;
            log.steps.push(record);
            self.step += 1;
            if self.step % spe == 0 {
                if let Some(val) = validation {
                    let report = evaluate_corpus(
                        &self.model,
                        val,
                        &self.vocab,
                        &self.provider,
                        &self.cfg.loss.contanic,
                        &self.cfg.dialuation,
                    )?;
                    log.validation.push(ValidationSummary {
                        epoch,
                        step: self.step,
                        examples: report.examples,
                        means: report.means.clone(),
                    });
                }
            }
        }
        log.epoch_wall_secs.push(epoch_start.elapsed().as_secs_f64());
        Ok(log)
    }

    fn score_batch_examples(&self, batch: &[&PreparedExample]) -> Result<Vec<f64>> {
        let weights = self.cfg.loss.variant.effective_contanic(&self.cfg.loss.contanic);
        let sources: Vec<Vec<usize>> = batch.iter().map(|e| e.src_ids.clone()).collect();
        let caps: Vec<usize> = batch
            .iter()
            .map(|e| e.gold_ids.len() + self.cfg.decode_extra_tokens)
            .collect();
        let decoded: Vec<String> = self
            .model
            .generate_greedy_batch(&sources, &caps)?
            .iter()
            .map(|ids| self.vocab.decode(ids))
            .collect();
        let contexts: Vec<&str> = batch.iter().map(|e| e.context_text.as_str()).collect();
        let golds: Vec<&str> = batch.iter().map(|e| e.gold_text.as_str()).collect();
        let gens: Vec<&str> = decoded.iter().map(|s| s.as_str()).collect();
        let triples = score_batch(&contexts, &golds, &gens, &self.provider, &weights)?;
        Ok(triples
            .iter()
            .map(|t| contanic_clamped(t.cr, t.ss, &weights))
            .collect())
    }

    fn train_step(&mut self, batch: &[&PreparedExample], epoch: usize) -> Result<StepRecord> {
        let scores = if self.cfg.loss.variant.needs_scores() {
            Some(self.score_batch_examples(batch)?)
        } else {
            None
        };
        let sources: Vec<Vec<usize>> = batch.iter().map(|e| e.src_ids.clone()).collect();
        let golds: Vec<Vec<usize>> = batch.iter().map(|e| e.gold_ids.clone()).collect();

        let mut g = Graph::new();
        let bound_model = self.model.bind(&mut g, true);
        let bound_bse = self.bse.bind(&mut g, true);
        let tf = self
            .model
            .forward_teacher_forced(&mut g, &bound_model, &sources, &golds)?;
        let out = assemble(
            &mut g,
            &tf,
            &self.cfg.loss,
            scores.as_deref(),
            Some((&self.bse, &bound_bse)),
        )?;

        if !out.breakdown.l_total.is_finite() {
            let dump = self.dump_batch(batch, &out.breakdown)?;
            return Err(Error::TrainAbort {
                step: self.step,
                reason: format!("non-finite loss {}", out.breakdown.l_total),
                dump,
            });
        }

        let grads = g.backward(out.total)?;
        let all_ids: Vec<_> = bound_model
            .ids()
            .iter()
            .chain(bound_bse.ids())
            .copied()
            .collect();
        let grad_tensors: Vec<Tensor<S>> = all_ids
            .iter()
            .map(|&id| grads.get(id).cloned().unwrap_or_else(|| {
                Tensor::zeros(g.value(id).shape())
            }))
            .collect();
        let norm_sq: f64 = grad_tensors
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|&v| {
                let f = v.to_f64();
                f * f
            })
            .sum();
        let norm = norm_sq.sqrt();
        let scale = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let param_refs: Vec<&mut Tensor<S>> = self
            .model
            .params_mut()
            .tensors_mut()
            .chain(self.bse.params_mut().tensors_mut())
            .collect();
        self.optimizer.apply(param_refs, &grad_tensors, scale);

        Ok(StepRecord {
            step: self.step,
            epoch,
            variant: self.cfg.loss.variant.name().to_string(),
            l_ce: out.breakdown.l_ce,
            l_scl: out.breakdown.l_scl,
            l_bse: out.breakdown.l_bse,
            l_total: out.breakdown.l_total,
            contanic: out.breakdown.contanic_score,
            bse_score: out.breakdown.bse_score,
        })
    }

    fn dump_batch(&self, batch: &[&PreparedExample], breakdown: &LossBreakdown) -> Result<String> {
        let dir = self
            .cfg
            .dump_dir
            .clone()
            .unwrap_or_else(std::env::temp_dir);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("nonfinite-step{}.json", self.step));
        let payload = serde_json::json!({
            "step": self.step,
            "breakdown": breakdown,
            "batch": batch.iter().map(|e| serde_json::json!({
                "dialogue_id": e.dialogue_id,
                "turn_index": e.turn_index,
                "src_ids": e.src_ids,
                "gold_ids": e.gold_ids,
            })).collect::<Vec<_>>(),
        });
        std::fs::write(&path, serde_json::to_string_pretty(&payload)?)?;
        Ok(path.display().to_string())
    }
}

// ── Evaluation ──────────────────────────────────────────────────────

/// Greedy-decode every example and score it with every metric.
pub fn evaluate_corpus<S: Scalar>(
    model: &Model<S>,
    examples: &[PreparedExample],
    vocab: &Vocab,
    provider: &ConfiguredProvider<S>,
    contanic_weights: &ContanicWeights,
    dialuation_weights: &DialuationWeights,
) -> Result<ScoreReport> {
    let mut rows = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let sources: Vec<Vec<usize>> = chunk.iter().map(|e| e.src_ids.clone()).collect();
        let caps = vec![model.config().max_target_len; chunk.len()];
        let decoded = model.generate_greedy_batch(&sources, &caps)?;
        for (ex, ids) in chunk.iter().zip(&decoded) {
            let generated = vocab.decode(ids);
            rows.push(score_generation(
                &ex.dialogue_id,
                ex.turn_index,
                &ex.context_text,
                &ex.gold_text,
                &generated,
                provider,
                contanic_weights,
                dialuation_weights,
            )?);
        }
    }
    Ok(ScoreReport::from_rows(rows))
}

/// Metric row for one (context, gold, generated) triple.
#[allow(clippy::too_many_arguments)]
pub fn score_generation<S: Scalar>(
    dialogue_id: &str,
    turn_index: usize,
    context: &str,
    gold: &str,
    generated: &str,
    provider: &ConfiguredProvider<S>,
    contanic_weights: &ContanicWeights,
    dialuation_weights: &DialuationWeights,
) -> Result<EvalRow> {
    let cand = crate::corpus::tokenize(generated);
    let refr = crate::corpus::tokenize(gold);
    let b = bleu(&cand, &refr, BLEU_MAX_N);
    let r = rouge(&cand, &refr);
    let triple = crate::scores::score_triple(context, gold, generated, provider, contanic_weights)?;
    let d = dialuation(triple.cr, triple.ss, dialuation_weights)?;
    Ok(EvalRow {
        dialogue_id: dialogue_id.to_string(),
        turn_index,
        context: context.to_string(),
        gold: gold.to_string(),
        generated: generated.to_string(),
        bleu: b.cumulative,
        bleu1: b.precisions.first().copied().unwrap_or(0.0),
        bleu2: b.precisions.get(1).copied().unwrap_or(0.0),
        bleu3: b.precisions.get(2).copied().unwrap_or(0.0),
        bleu4: b.precisions.get(3).copied().unwrap_or(0.0),
        rouge1: r.rouge1,
        rouge2: r.rouge2,
        rouge_l: r.rouge_l,
        cr: triple.cr,
        ss: triple.ss,
        dialuation: d,
        embed_score: 100.0 * triple.ss,
    })
}

// ── Checkpoints ─────────────────────────────────────────────────────

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Checkpoint<S: Scalar> {
    pub version: u32,
    pub precision: String,
    pub vocab_hash: u64,
    pub vocab: Vocab,
    pub seed: u64,
    pub step: usize,
    pub model_config: ModelConfig,
    pub model_params: Vec<(String, Tensor<S>)>,
    pub bse_hidden: usize,
    pub bse_params: Vec<(String, Tensor<S>)>,
    pub optimizer: Adam<S>,
}

/// Save the full training state; the round trip is bit-exact.
pub fn checkpoint_save<S: Scalar>(trainer: &Trainer<S>, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        precision: S::NAME.to_string(),
        vocab_hash: trainer.vocab.fingerprint(),
        vocab: trainer.vocab.clone(),
        seed: trainer.cfg.seed,
        step: trainer.step,
        model_config: trainer.model.config().clone(),
        model_params: trainer
            .model
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect(),
        bse_hidden: trainer.bse.hidden(),
        bse_params: trainer
            .bse
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect(),
        optimizer: trainer.optimizer.clone(),
    };
    let f = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(f), &ckpt)?;
    Ok(())
}

pub fn checkpoint_read<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut ckpt: Checkpoint<S> = serde_json::from_reader(std::io::BufReader::new(f))
        .map_err(|e| Error::Checkpoint(format!("corrupted checkpoint: {e}")))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} unsupported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    if ckpt.precision != S::NAME {
        return Err(Error::Checkpoint(format!(
            "precision {} cannot load as {}",
            ckpt.precision,
            S::NAME
        )));
    }
    ckpt.vocab.reindex();
    if ckpt.vocab.fingerprint() != ckpt.vocab_hash {
        return Err(Error::Checkpoint("vocab hash mismatch".into()));
    }
    Ok(ckpt)
}

/// Restore a trainer from a checkpoint. The supplied config must agree
/// with the stored vocabulary (hash-checked).
pub fn checkpoint_restore<S: Scalar>(ckpt: Checkpoint<S>, cfg: TrainConfig) -> Result<Trainer<S>> {
    let mut trainer = Trainer::new(
        TrainConfig {
            model: ckpt.model_config.clone(),
            bse_hidden: ckpt.bse_hidden,
            seed: ckpt.seed,
            ..cfg
        },
        ckpt.vocab.clone(),
    )?;
    for (name, tensor) in ckpt.model_params {
        let idx = trainer
            .model
            .params()
            .index_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown model parameter {name}")))?;
        *trainer.model.params_mut().tensor_mut(idx) = tensor;
    }
    for (name, tensor) in ckpt.bse_params {
        let idx = trainer
            .bse
            .params()
            .index_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown estimator parameter {name}")))?;
        *trainer.bse.params_mut().tensor_mut(idx) = tensor;
    }
    trainer.optimizer = ckpt.optimizer;
    trainer.step = ckpt.step;
    trainer.provider.refresh_intrinsic(&trainer.model, &trainer.vocab);
    Ok(trainer)
}

/// Load just the model (for generation/evaluation).
pub fn checkpoint_load_model<S: Scalar>(path: &Path) -> Result<(Model<S>, Vocab)> {
    let ckpt = checkpoint_read::<S>(path)?;
    let mut model = Model::new(ckpt.model_config.clone(), ckpt.seed)?;
    for (name, tensor) in ckpt.model_params {
        let idx = model
            .params()
            .index_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown model parameter {name}")))?;
        *model.params_mut().tensor_mut(idx) = tensor;
    }
    Ok((model, ckpt.vocab))
}
