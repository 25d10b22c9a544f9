//! Micro transformer for response generation.
//!
//! Two configurations: an encoder-decoder (cross-attention from the
//! decoder to the encoded context) and a decoder-only stack that
//! consumes `context ++ <bos> ++ response` with the loss masked to
//! response positions. Pre-norm residual blocks, sinusoidal positions,
//! ReLU feed-forward.

use crate::corpus::{BOS_ID, EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, VarId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

const MASK_OFF: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    EncoderDecoder,
    DecoderOnly,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub architecture: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ff_dim: 128,
            max_source_len: 256,
            max_target_len: 256,
            architecture: Architecture::EncoderDecoder,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.max_source_len == 0 || self.max_target_len == 0 {
            return Err(Error::Config("sequence lengths must be at least 1".into()));
        }
        Ok(())
    }
}

/// Ordered, named parameter tensors. Order is fixed at construction and
/// shared with optimizer state and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> usize {
        self.entries.push((name.into(), tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor<S> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.entries[i].1
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }
}

/// Parameter leaves bound onto one graph, in [`ParamSet`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    ids: Vec<VarId>,
}

impl BoundParams {
    pub fn from_ids(ids: Vec<VarId>) -> Self {
        Self { ids }
    }

    pub fn id(&self, i: usize) -> VarId {
        self.ids[i]
    }

    pub fn ids(&self) -> &[VarId] {
        &self.ids
    }
}

/// Encoder output for one batch.
pub struct Encoded {
    /// `[batch, src_len, embed_dim]`
    pub hidden: VarId,
    pub src_len: usize,
    /// Per example, per position: true where a real (non-pad) token sits.
    pub key_valid: Vec<Vec<bool>>,
}

/// Teacher-forced forward output.
pub struct TeacherForced {
    /// `[batch * tgt_len, vocab]`
    pub logits: VarId,
    pub batch: usize,
    pub tgt_len: usize,
    /// Flattened `[batch * tgt_len]` gold ids (pad where masked off).
    pub targets: Vec<usize>,
    /// Flattened `[batch * tgt_len]`; true on real response positions.
    pub target_mask: Vec<bool>,
}

impl TeacherForced {
    /// Per-step probability distributions `[batch, tgt_len, vocab]`.
    pub fn distributions<S: Scalar>(&self, g: &mut Graph<S>) -> Result<VarId> {
        let vocab = g.value(self.logits).shape()[1];
        let probs = g.softmax(self.logits)?;
        g.reshape(probs, &[self.batch, self.tgt_len, vocab])
    }
}

pub struct Model<S: Scalar> {
    config: ModelConfig,
    params: ParamSet<S>,
    /// Sinusoidal position table, `[max_len, embed_dim]`, not trained.
    pos_table: Tensor<S>,
    truncations: AtomicU64,
}

impl<S: Scalar> Clone for Model<S> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            pos_table: self.pos_table.clone(),
            truncations: AtomicU64::new(self.truncations.load(Ordering::Relaxed)),
        }
    }
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let d = config.embed_dim;
        let v = config.vocab_size;
        let ff = config.ff_dim;

        fn weight<S: Scalar>(
            rng: &mut ChaCha8Rng,
            params: &mut ParamSet<S>,
            name: String,
            rows: usize,
            cols: usize,
        ) {
            let scale = 1.0 / (rows as f64).sqrt();
            let data: Vec<S> = (0..rows * cols)
                .map(|_| S::from_f64(rng.gen_range(-scale..scale)))
                .collect();
            params.push(name, Tensor::new(vec![rows, cols], data).unwrap());
        }
        fn attn_block<S: Scalar>(
            rng: &mut ChaCha8Rng,
            params: &mut ParamSet<S>,
            prefix: &str,
            d: usize,
        ) {
            for w in ["wq", "wk", "wv", "wo"] {
                weight(rng, params, format!("{prefix}.{w}"), d, d);
                params.push(format!("{prefix}.b{}", &w[1..]), Tensor::zeros(&[d]));
            }
            params.push(format!("{prefix}.ln.gamma"), Tensor::full(&[d], S::one()));
            params.push(format!("{prefix}.ln.beta"), Tensor::zeros(&[d]));
        }
        fn ff_block<S: Scalar>(
            rng: &mut ChaCha8Rng,
            params: &mut ParamSet<S>,
            prefix: &str,
            d: usize,
            ff: usize,
        ) {
            weight(rng, params, format!("{prefix}.w1"), d, ff);
            params.push(format!("{prefix}.b1"), Tensor::zeros(&[ff]));
            weight(rng, params, format!("{prefix}.w2"), ff, d);
            params.push(format!("{prefix}.b2"), Tensor::zeros(&[d]));
            params.push(format!("{prefix}.ln.gamma"), Tensor::full(&[d], S::one()));
            params.push(format!("{prefix}.ln.beta"), Tensor::zeros(&[d]));
        }

        weight(&mut rng, &mut params, "embed.table".into(), v, d);
        if config.architecture == Architecture::EncoderDecoder {
            for l in 0..config.encoder_layers {
                attn_block(&mut rng, &mut params, &format!("enc.l{l}.attn"), d);
                ff_block(&mut rng, &mut params, &format!("enc.l{l}.ff"), d, ff);
            }
            params.push("enc.final_ln.gamma", Tensor::full(&[d], S::one()));
            params.push("enc.final_ln.beta", Tensor::zeros(&[d]));
        }
        for l in 0..config.decoder_layers {
            attn_block(&mut rng, &mut params, &format!("dec.l{l}.self"), d);
            if config.architecture == Architecture::EncoderDecoder {
                attn_block(&mut rng, &mut params, &format!("dec.l{l}.cross"), d);
            }
            ff_block(&mut rng, &mut params, &format!("dec.l{l}.ff"), d, ff);
        }
        params.push("dec.final_ln.gamma", Tensor::full(&[d], S::one()));
        params.push("dec.final_ln.beta", Tensor::zeros(&[d]));
        weight(&mut rng, &mut params, "out.w".into(), d, v);
        params.push("out.b", Tensor::zeros(&[v]));

        let max_len = config.max_source_len + config.max_target_len + 1;
        let pos_table = sinusoidal_table(max_len, d);

        Ok(Self {
            config,
            params,
            pos_table,
            truncations: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Sources longer than `max_source_len` are truncated from the left;
    /// this counts how many times that happened.
    pub fn truncation_count(&self) -> u64 {
        self.truncations.load(Ordering::Relaxed)
    }

    /// Insert every parameter as a leaf on `g`, in canonical order.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> BoundParams {
        let ids = self
            .params
            .tensors()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        BoundParams { ids }
    }

    fn p(&self, bound: &BoundParams, name: &str) -> VarId {
        bound.id(
            self.params
                .index_of(name)
                .unwrap_or_else(|| panic!("unknown parameter {name}")),
        )
    }

    fn truncate_src(&self, ids: &[usize]) -> Vec<usize> {
        if ids.len() > self.config.max_source_len {
            self.truncations.fetch_add(1, Ordering::Relaxed);
            ids[ids.len() - self.config.max_source_len..].to_vec()
        } else {
            ids.to_vec()
        }
    }

    /// Token embeddings plus sinusoidal positions. Rows that were
    /// left-padded (decoder-only batching) count positions from their
    /// first real token, so an example embeds identically regardless of
    /// the batch it sits in.
    fn embed_positions(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        ids: &[usize],
        batch: usize,
        len: usize,
    ) -> Result<VarId> {
        let table = self.p(bound, "embed.table");
        let emb = g.embedding(table, ids, &[batch, len])?;
        let d = self.config.embed_dim;
        let offsets: Vec<usize> = (0..batch)
            .map(|bi| {
                ids[bi * len..(bi + 1) * len]
                    .iter()
                    .take_while(|&&id| id == PAD_ID)
                    .count()
            })
            .collect();
        if offsets.iter().all(|&o| o == 0) {
            let pos = g.constant(slice_rows(&self.pos_table, len));
            return g.add_suffix(emb, pos);
        }
        let mut data = Vec::with_capacity(batch * len * d);
        for &off in &offsets {
            for k in 0..len {
                let p = k.saturating_sub(off);
                data.extend_from_slice(&self.pos_table.data()[p * d..(p + 1) * d]);
            }
        }
        let pos = g.constant(Tensor::new(vec![batch, len, d], data)?);
        g.add(emb, pos)
    }

    /// One multi-head attention block (pre-norm, residual).
    ///
    /// `extra_causal` adds a causal mask over the key axis. `key_valid`
    /// marks real key positions per example; invalid keys get a large
    /// negative score and their post-softmax weight is re-zeroed, so an
    /// all-pad sequence yields exactly zero attention output.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        prefix: &str,
        queries: VarId,
        keys_values: VarId,
        key_valid: &[Vec<bool>],
        extra_causal: bool,
    ) -> Result<VarId> {
        let d = self.config.embed_dim;
        let h = self.config.heads;
        let dh = d / h;
        let q_shape = g.value(queries).shape().to_vec();
        let kv_shape = g.value(keys_values).shape().to_vec();
        let (b, tq) = (q_shape[0], q_shape[1]);
        let tk = kv_shape[1];

        let gamma = self.p(bound, &format!("{prefix}.ln.gamma"));
        let beta = self.p(bound, &format!("{prefix}.ln.beta"));
        let normed_q = g.layer_norm(queries, gamma, beta, S::from_f64(1e-5))?;
        let normed_kv = if queries == keys_values {
            normed_q
        } else {
            g.layer_norm(keys_values, gamma, beta, S::from_f64(1e-5))?
        };

        let project = |g: &mut Graph<S>, x: VarId, t: usize, w: &str| -> Result<VarId> {
            let wv = self.p(bound, &format!("{prefix}.{w}"));
            let bv = self.p(bound, &format!("{prefix}.b{}", &w[1..]));
            let y = g.matmul(x, wv)?;
            let y = g.add_suffix(y, bv)?;
            // [b, t, d] -> [b*h, t, dh]
            let y = g.reshape(y, &[b, t, h, dh])?;
            let y = g.transpose(y, &[0, 2, 1, 3])?;
            g.reshape(y, &[b * h, t, dh])
        };
        let q = project(g, normed_q, tq, "wq")?;
        let k = project(g, normed_kv, tk, "wk")?;
        let v = project(g, normed_kv, tk, "wv")?;

        let kt = g.transpose(k, &[0, 2, 1])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.mul_scalar(scores, S::from_f64(1.0 / (dh as f64).sqrt()))?;

        // additive mask + multiplicative re-zeroing of invalid keys
        let mut addmask = vec![S::zero(); b * h * tq * tk];
        let mut mulmask = vec![S::zero(); b * h * tq * tk];
        for bi in 0..b {
            for hi in 0..h {
                for qi in 0..tq {
                    for ki in 0..tk {
                        let idx = (((bi * h) + hi) * tq + qi) * tk + ki;
                        let valid = key_valid[bi][ki] && (!extra_causal || ki <= qi);
                        if valid {
                            mulmask[idx] = S::one();
                        } else {
                            addmask[idx] = S::from_f64(MASK_OFF);
                        }
                    }
                }
            }
        }
        let addmask = g.constant(Tensor::new(vec![b * h, tq, tk], addmask)?);
        let mulmask = g.constant(Tensor::new(vec![b * h, tq, tk], mulmask)?);
        let scores = g.add(scores, addmask)?;
        let probs = g.softmax(scores)?;
        let probs = g.mul(probs, mulmask)?;

        let ctx = g.matmul(probs, v)?;
        let ctx = g.reshape(ctx, &[b, h, tq, dh])?;
        let ctx = g.transpose(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, tq, d])?;
        let wo = self.p(bound, &format!("{prefix}.wo"));
        let bo = self.p(bound, &format!("{prefix}.bo"));
        let out = g.matmul(ctx, wo)?;
        let out = g.add_suffix(out, bo)?;
        g.add(queries, out)
    }

    fn feed_forward(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        prefix: &str,
        x: VarId,
    ) -> Result<VarId> {
        let gamma = self.p(bound, &format!("{prefix}.ln.gamma"));
        let beta = self.p(bound, &format!("{prefix}.ln.beta"));
        let normed = g.layer_norm(x, gamma, beta, S::from_f64(1e-5))?;
        let w1 = self.p(bound, &format!("{prefix}.w1"));
        let b1 = self.p(bound, &format!("{prefix}.b1"));
        let w2 = self.p(bound, &format!("{prefix}.w2"));
        let b2 = self.p(bound, &format!("{prefix}.b2"));
        let hmid = g.matmul(normed, w1)?;
        let hmid = g.add_suffix(hmid, b1)?;
        let hmid = g.relu(hmid)?;
        let out = g.matmul(hmid, w2)?;
        let out = g.add_suffix(out, b2)?;
        g.add(x, out)
    }

    /// Encode a batch of source sequences (encoder-decoder only). Inputs
    /// are unpadded id sequences; padding and masking happen here.
    pub fn encode(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        sources: &[Vec<usize>],
    ) -> Result<Encoded> {
        if self.config.architecture != Architecture::EncoderDecoder {
            return Err(Error::Config(
                "encode is only available on the encoder-decoder configuration".into(),
            ));
        }
        if sources.is_empty() {
            return Err(Error::Graph("encode: empty batch".into()));
        }
        let trunc: Vec<Vec<usize>> = sources.iter().map(|s| self.truncate_src(s)).collect();
        let src_len = trunc.iter().map(|s| s.len()).max().unwrap().max(1);
        let b = trunc.len();
        let mut ids = Vec::with_capacity(b * src_len);
        let mut key_valid = Vec::with_capacity(b);
        for s in &trunc {
            let mut valid = vec![true; s.len()];
            valid.resize(src_len, false);
            // pad ids themselves are also masked keys
            for (k, &id) in s.iter().enumerate() {
                if id == PAD_ID {
                    valid[k] = false;
                }
            }
            key_valid.push(valid);
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(PAD_ID).take(src_len - s.len()));
        }
        let mut x = self.embed_positions(g, bound, &ids, b, src_len)?;
        for l in 0..self.config.encoder_layers {
            x = self.attention(
                g,
                bound,
                &format!("enc.l{l}.attn"),
                x,
                x,
                &key_valid,
                false,
            )?;
            x = self.feed_forward(g, bound, &format!("enc.l{l}.ff"), x)?;
        }
        let gamma = self.p(bound, "enc.final_ln.gamma");
        let beta = self.p(bound, "enc.final_ln.beta");
        let x = g.layer_norm(x, gamma, beta, S::from_f64(1e-5))?;
        Ok(Encoded {
            hidden: x,
            src_len,
            key_valid,
        })
    }

    /// Teacher-forced forward pass. `gold` sequences end with eos and do
    /// not start with bos; the decoder input is built internally as
    /// `[bos] ++ gold[..n-1]`.
    pub fn forward_teacher_forced(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        sources: &[Vec<usize>],
        gold: &[Vec<usize>],
    ) -> Result<TeacherForced> {
        if sources.len() != gold.len() || sources.is_empty() {
            return Err(Error::Graph(format!(
                "teacher-forced batch: {} sources vs {} targets",
                sources.len(),
                gold.len()
            )));
        }
        let b = sources.len();
        let tgt_len = gold
            .iter()
            .map(|t| t.len().min(self.config.max_target_len))
            .max()
            .unwrap()
            .max(1);

        let mut targets = Vec::with_capacity(b * tgt_len);
        let mut target_mask = Vec::with_capacity(b * tgt_len);
        let mut dec_rows: Vec<Vec<usize>> = Vec::with_capacity(b);
        for tg in gold {
            let tg = &tg[..tg.len().min(self.config.max_target_len)];
            let mut row = Vec::with_capacity(tgt_len);
            row.push(BOS_ID);
            row.extend_from_slice(&tg[..tg.len().saturating_sub(1)]);
            row.resize(tgt_len, PAD_ID);
            dec_rows.push(row);
            targets.extend_from_slice(tg);
            targets.extend(std::iter::repeat(PAD_ID).take(tgt_len - tg.len()));
            target_mask.extend(std::iter::repeat(true).take(tg.len()));
            target_mask.extend(std::iter::repeat(false).take(tgt_len - tg.len()));
        }

        let hidden = match self.config.architecture {
            Architecture::EncoderDecoder => {
                let encoded = self.encode(g, bound, sources)?;
                self.decode_stack(g, bound, &dec_rows, Some(&encoded))?
            }
            Architecture::DecoderOnly => {
                let trunc: Vec<Vec<usize>> =
                    sources.iter().map(|s| self.truncate_src(s)).collect();
                let src_w = trunc.iter().map(|s| s.len()).max().unwrap().max(1);
                // left-pad the context so response positions align
                let mut combined: Vec<Vec<usize>> = Vec::with_capacity(b);
                for (s, dec) in trunc.iter().zip(&dec_rows) {
                    let mut row = vec![PAD_ID; src_w - s.len()];
                    row.extend_from_slice(s);
                    row.extend_from_slice(dec);
                    combined.push(row);
                }
                let full = self.causal_stack(g, bound, &combined)?;
                // keep only the response positions
                g.slice(full, 1, src_w, tgt_len)?
            }
        };

        let vocab = self.config.vocab_size;
        let out_w = self.p(bound, "out.w");
        let out_b = self.p(bound, "out.b");
        let logits = g.matmul(hidden, out_w)?;
        let logits = g.add_suffix(logits, out_b)?;
        let logits = g.reshape(logits, &[b * tgt_len, vocab])?;
        Ok(TeacherForced {
            logits,
            batch: b,
            tgt_len,
            targets,
            target_mask,
        })
    }

    /// Decoder stack over already-padded rows (`[bos] ++ gold prefix`).
    fn decode_stack(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        dec_rows: &[Vec<usize>],
        encoded: Option<&Encoded>,
    ) -> Result<VarId> {
        let b = dec_rows.len();
        let t = dec_rows[0].len();
        let ids: Vec<usize> = dec_rows.concat();
        let self_valid: Vec<Vec<bool>> = dec_rows
            .iter()
            .map(|row| row.iter().map(|&id| id != PAD_ID).collect())
            .collect();
        let mut x = self.embed_positions(g, bound, &ids, b, t)?;
        for l in 0..self.config.decoder_layers {
            x = self.attention(
                g,
                bound,
                &format!("dec.l{l}.self"),
                x,
                x,
                &self_valid,
                true,
            )?;
            if let Some(enc) = encoded {
                x = self.cross_attention(g, bound, &format!("dec.l{l}.cross"), x, enc)?;
            }
            x = self.feed_forward(g, bound, &format!("dec.l{l}.ff"), x)?;
        }
        let gamma = self.p(bound, "dec.final_ln.gamma");
        let beta = self.p(bound, "dec.final_ln.beta");
        g.layer_norm(x, gamma, beta, S::from_f64(1e-5))
    }

    fn cross_attention(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        prefix: &str,
        x: VarId,
        enc: &Encoded,
    ) -> Result<VarId> {
        self.attention(g, bound, prefix, x, enc.hidden, &enc.key_valid, false)
    }

    /// Causal stack over combined rows (decoder-only path).
    fn causal_stack(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        rows: &[Vec<usize>],
    ) -> Result<VarId> {
        let b = rows.len();
        let t = rows[0].len();
        let ids: Vec<usize> = rows.concat();
        let valid: Vec<Vec<bool>> = rows
            .iter()
            .map(|row| row.iter().map(|&id| id != PAD_ID).collect())
            .collect();
        let mut x = self.embed_positions(g, bound, &ids, b, t)?;
        for l in 0..self.config.decoder_layers {
            x = self.attention(g, bound, &format!("dec.l{l}.self"), x, x, &valid, true)?;
            x = self.feed_forward(g, bound, &format!("dec.l{l}.ff"), x)?;
        }
        let gamma = self.p(bound, "dec.final_ln.gamma");
        let beta = self.p(bound, "dec.final_ln.beta");
        g.layer_norm(x, gamma, beta, S::from_f64(1e-5))
    }

    /// Greedy decode: argmax per step, ties broken by lowest token id,
    /// stops at eos or `max_len`. Deterministic given parameters.
    ///
    /// The source is encoded once; each step re-runs the decoder stack
    /// over the grown prefix on the same (no-grad) graph and projects
    /// only the last position through the output layer.
    pub fn generate_greedy(&self, source: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let max_len = max_len.min(self.config.max_target_len);
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let encoded = match self.config.architecture {
            Architecture::EncoderDecoder => Some(self.encode(&mut g, &bound, &[source.to_vec()])?),
            Architecture::DecoderOnly => None,
        };
        let src = self.truncate_src(source);
        let out_w = self.p(&bound, "out.w");
        let out_b = self.p(&bound, "out.b");
        let mut generated: Vec<usize> = Vec::new();
        while generated.len() < max_len {
            let hidden = match self.config.architecture {
                Architecture::EncoderDecoder => {
                    let mut row = Vec::with_capacity(generated.len() + 1);
                    row.push(BOS_ID);
                    row.extend_from_slice(&generated);
                    self.decode_stack(&mut g, &bound, &[row], encoded.as_ref())?
                }
                Architecture::DecoderOnly => {
                    let mut row = Vec::with_capacity(src.len() + generated.len() + 1);
                    row.extend_from_slice(&src);
                    row.push(BOS_ID);
                    row.extend_from_slice(&generated);
                    self.causal_stack(&mut g, &bound, &[row])?
                }
            };
            let t = g.value(hidden).shape()[1];
            let last = g.slice(hidden, 1, t - 1, 1)?;
            let logits = g.matmul(last, out_w)?;
            let logits = g.add_suffix(logits, out_b)?;
            let next = argmax_lowest(g.value(logits).data());
            if next == EOS_ID {
                break;
            }
            generated.push(next);
        }
        Ok(generated)
    }

    /// Lock-step batched greedy decode. Equivalent to calling
    /// [`generate_greedy`](Self::generate_greedy) per source (verified
    /// bitwise in tests) with one shared graph: the batch is encoded
    /// once and the decoder runs over all still-active prefixes per
    /// step. `max_lens` caps each example separately.
    pub fn generate_greedy_batch(
        &self,
        sources: &[Vec<usize>],
        max_lens: &[usize],
    ) -> Result<Vec<Vec<usize>>> {
        if sources.len() != max_lens.len() {
            return Err(Error::Graph(format!(
                "generate_greedy_batch: {} sources vs {} caps",
                sources.len(),
                max_lens.len()
            )));
        }
        if sources.is_empty() {
            return Ok(vec![]);
        }
        let b = sources.len();
        let caps: Vec<usize> = max_lens
            .iter()
            .map(|&m| m.min(self.config.max_target_len))
            .collect();
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let encoded = match self.config.architecture {
            Architecture::EncoderDecoder => Some(self.encode(&mut g, &bound, sources)?),
            Architecture::DecoderOnly => None,
        };
        let trunc: Vec<Vec<usize>> = sources.iter().map(|s| self.truncate_src(s)).collect();
        let src_w = trunc.iter().map(|s| s.len()).max().unwrap().max(1);
        let out_w = self.p(&bound, "out.w");
        let out_b = self.p(&bound, "out.b");
        let vocab = self.config.vocab_size;
        let mut generated: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut done: Vec<bool> = caps.iter().map(|&c| c == 0).collect();
        for step in 0..caps.iter().copied().max().unwrap_or(0) {
            if done.iter().all(|&d| d) {
                break;
            }
            let width = step + 1;
            let hidden = match self.config.architecture {
                Architecture::EncoderDecoder => {
                    let rows: Vec<Vec<usize>> = generated
                        .iter()
                        .map(|gen| {
                            let mut row = Vec::with_capacity(width);
                            row.push(BOS_ID);
                            row.extend_from_slice(gen);
                            row.resize(width, PAD_ID);
                            row
                        })
                        .collect();
                    self.decode_stack(&mut g, &bound, &rows, encoded.as_ref())?
                }
                Architecture::DecoderOnly => {
                    let rows: Vec<Vec<usize>> = trunc
                        .iter()
                        .zip(&generated)
                        .map(|(s, gen)| {
                            let mut row = vec![PAD_ID; src_w - s.len()];
                            row.extend_from_slice(s);
                            row.push(BOS_ID);
                            row.extend_from_slice(gen);
                            row.resize(src_w + width, PAD_ID);
                            row
                        })
                        .collect();
                    self.causal_stack(&mut g, &bound, &rows)?
                }
            };
            let t = g.value(hidden).shape()[1];
            let last = g.slice(hidden, 1, t - 1, 1)?;
            let flat = g.reshape(last, &[b, self.config.embed_dim])?;
            let logits = g.matmul(flat, out_w)?;
            let logits = g.add_suffix(logits, out_b)?;
            let values = g.value(logits);
            for i in 0..b {
                if done[i] || generated[i].len() != step {
                    continue;
                }
                let row = &values.data()[i * vocab..(i + 1) * vocab];
                let next = argmax_lowest(row);
                if next == EOS_ID || generated[i].len() + 1 >= caps[i] {
                    if next != EOS_ID {
                        generated[i].push(next);
                    }
                    done[i] = true;
                } else {
                    generated[i].push(next);
                }
            }
        }
        Ok(generated)
    }

    /// Mean-pooled hidden state of the context encoder (or the causal
    /// stack for decoder-only models); feeds the intrinsic embedding
    /// provider. Never participates in a training tape.
    pub fn mean_pooled_hidden(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let ids = self.truncate_src(ids);
        let hidden = match self.config.architecture {
            Architecture::EncoderDecoder => self.encode(&mut g, &bound, &[ids.clone()])?.hidden,
            Architecture::DecoderOnly => self.causal_stack(&mut g, &bound, &[ids.clone()])?,
        };
        let t = g.value(hidden);
        let d = self.config.embed_dim;
        let mut pooled = vec![0.0; d];
        let mut count = 0.0;
        for (k, &id) in ids.iter().enumerate() {
            if id == PAD_ID {
                continue;
            }
            count += 1.0;
            for j in 0..d {
                pooled[j] += t.data()[k * d + j].to_f64();
            }
        }
        if count > 0.0 {
            for p in pooled.iter_mut() {
                *p /= count;
            }
        }
        Ok(pooled)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_lowest<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sinusoidal_table<S: Scalar>(max_len: usize, dim: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(max_len * dim);
    for pos in 0..max_len {
        for j in 0..dim {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data.push(S::from_f64(if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }));
        }
    }
    Tensor::new(vec![max_len, dim], data).unwrap()
}

fn slice_rows<S: Scalar>(table: &Tensor<S>, rows: usize) -> Tensor<S> {
    let dim = table.shape()[1];
    Tensor::new(vec![rows, dim], table.data()[..rows * dim].to_vec()).unwrap()
}
