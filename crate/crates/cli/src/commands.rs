//! Subcommand definitions and implementations.

use crate::common::{self, ProviderArgs, WeightArgs};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};
use semlogue::corpus::{self, Dialogue};
use semlogue::losses::LossVariant;
use semlogue::metrics::{bleu, dialuation, rouge, ScoreReport, BLEU_MAX_N};
use semlogue::model::{Architecture, BoundParams, ModelConfig};
use semlogue::scalar::Scalar;
use semlogue::scores;
use semlogue::tensor::{grad_check, GradCheckOptions, Tensor};
use semlogue::trainer::{
    self, checkpoint_load_model, checkpoint_read, checkpoint_restore, checkpoint_save,
    prepare_examples, TrainConfig, Trainer,
};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "semlogue",
    version,
    about = "Dialogue-generation training with context- and semantics-aware losses"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Convert a raw dataset release into the corpus JSONL schema
    Convert(ConvertArgs),
    /// Train a model on a corpus JSONL file
    Train(Box<TrainArgs>),
    /// Greedy-decode responses for a corpus split
    Generate(GenerateArgs),
    /// Score a generations JSONL file with every metric
    Evaluate(EvaluateArgs),
    /// Score a single (context, gold, generated) triple
    Score(ScoreArgs),
    /// Verify loss gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Serve the deterministic hashed embedder over HTTP
    ServeEchoEmbedder(ServeArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert(a) => convert(a),
        Command::Train(a) => train(*a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Score(a) => score(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ServeEchoEmbedder(a) => serve(a),
    }
}

// ── convert ─────────────────────────────────────────────────────────

#[derive(clap::Args)]
pub struct ConvertArgs {
    /// Source format: multiwoz | personachat
    #[arg(long)]
    pub format: String,
    /// Raw release: a JSON file, or a directory of JSON files for multiwoz
    #[arg(long)]
    pub input: PathBuf,
    /// Corpus JSONL output path
    #[arg(long)]
    pub output: PathBuf,
}

fn convert(args: ConvertArgs) -> Result<()> {
    let mut dialogues: Vec<Dialogue> = Vec::new();
    let inputs: Vec<PathBuf> = if args.input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&args.input)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        files
    } else {
        vec![args.input.clone()]
    };
    if inputs.is_empty() {
        bail!("no .json files under {}", args.input.display());
    }
    for path in &inputs {
        let raw: serde_json::Value = serde_json::from_reader(std::io::BufReader::new(
            std::fs::File::open(path)
                .with_context(|| format!("cannot open {}", path.display()))?,
        ))?;
        let batch = match args.format.as_str() {
            "multiwoz" => corpus::convert_multiwoz(&raw)?,
            "personachat" => corpus::convert_personachat(&raw)?,
            other => bail!("unknown format {other:?} (multiwoz|personachat)"),
        };
        dialogues.extend(batch);
    }
    corpus::write_jsonl(&args.output, &dialogues)?;
    info!(
        "converted {} dialogues from {} file(s) into {}",
        dialogues.len(),
        inputs.len(),
        args.output.display()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

/// Everything a run needs; JSON config files deserialize into this and
/// flags override field by field. The effective value is echoed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub max_vocab: usize,
    pub min_freq: usize,
    pub split_seed: Option<u64>,
    pub precision: String,
    pub validate_each_epoch: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            max_vocab: corpus::DEFAULT_MAX_VOCAB,
            min_freq: corpus::DEFAULT_MIN_FREQ,
            split_seed: None,
            precision: "f64".into(),
            validate_each_epoch: true,
        }
    }
}

#[derive(clap::Args)]
pub struct TrainArgs {
    /// Corpus JSONL file
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory (checkpoint, run log, effective config)
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file; flags below override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Resume from a checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many optimization steps (overrides epochs)
    #[arg(long)]
    pub steps: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// ce | weighted-semantic-ce | weighted-semantic-context-ce |
    /// semantic-reinforcement | semtextuallogue
    #[arg(long)]
    pub loss_variant: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub context_window: Option<usize>,
    #[arg(long)]
    pub max_vocab: Option<usize>,
    #[arg(long)]
    pub min_freq: Option<usize>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    #[arg(long)]
    pub max_source_len: Option<usize>,
    #[arg(long)]
    pub max_target_len: Option<usize>,
    /// encoder-decoder | decoder-only
    #[arg(long)]
    pub architecture: Option<String>,
    #[arg(long)]
    pub bse_hidden: Option<usize>,
    #[arg(long)]
    pub decode_extra_tokens: Option<usize>,
    /// f64 (default) or f32
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long, default_value_t = false)]
    pub skip_validation: bool,

    #[command(flatten)]
    pub provider: ProviderArgs,
    #[command(flatten)]
    pub weights: WeightArgs,
}

fn effective_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(path) => serde_json::from_reader(std::io::BufReader::new(
            std::fs::File::open(path)
                .with_context(|| format!("cannot open config {}", path.display()))?,
        ))
        .context("config file does not match the run-config schema")?,
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.grad_clip {
        t.grad_clip = v;
    }
    if let Some(v) = &args.loss_variant {
        t.loss.variant = v.parse::<LossVariant>()?;
    }
    if let Some(v) = args.lambda {
        t.loss.lambda = v;
    }
    if let Some(v) = args.sigma {
        t.loss.sigma = v;
    }
    t.loss.contanic = args.weights.contanic(t.loss.contanic);
    t.dialuation = args.weights.dialuation(t.dialuation);
    if let Some(v) = args.context_window {
        t.context_window = v;
    }
    if let Some(v) = args.embed_dim {
        t.model.embed_dim = v;
    }
    if let Some(v) = args.heads {
        t.model.heads = v;
    }
    if let Some(v) = args.ff_dim {
        t.model.ff_dim = v;
    }
    if let Some(v) = args.encoder_layers {
        t.model.encoder_layers = v;
    }
    if let Some(v) = args.decoder_layers {
        t.model.decoder_layers = v;
    }
    if let Some(v) = args.max_source_len {
        t.model.max_source_len = v;
    }
    if let Some(v) = args.max_target_len {
        t.model.max_target_len = v;
    }
    if let Some(v) = &args.architecture {
        t.model.architecture = match v.as_str() {
            "encoder-decoder" => Architecture::EncoderDecoder,
            "decoder-only" => Architecture::DecoderOnly,
            other => bail!("unknown architecture {other:?}"),
        };
    }
    if let Some(v) = args.bse_hidden {
        t.bse_hidden = v;
    }
    if let Some(v) = args.decode_extra_tokens {
        t.decode_extra_tokens = v;
    }
    args.provider.apply(&mut t.provider)?;
    if let Some(v) = args.max_vocab {
        cfg.max_vocab = v;
    }
    if let Some(v) = args.min_freq {
        cfg.min_freq = v;
    }
    if let Some(v) = args.split_seed {
        cfg.split_seed = Some(v);
    }
    if let Some(v) = &args.precision {
        cfg.precision = v.clone();
    }
    if args.skip_validation {
        cfg.validate_each_epoch = false;
    }
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = effective_config(&args)?;
    match cfg.precision.as_str() {
        "f64" => train_typed::<f64>(args, cfg),
        "f32" => train_typed::<f32>(args, cfg),
        other => bail!("unknown precision {other:?} (f32|f64)"),
    }
}

fn train_typed<S: Scalar>(args: TrainArgs, mut cfg: RunConfig) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    cfg.train.dump_dir = Some(args.out.clone());

    let (dialogues, report) = corpus::load_jsonl(&args.corpus)?;
    for (line, why) in &report.skipped {
        warn!("{} line {line}: skipped ({why})", args.corpus.display());
    }
    let split_seed = cfg.split_seed.unwrap_or(cfg.train.seed);
    let (train_dlgs, val_dlgs, _test_dlgs) = corpus::split(&dialogues, split_seed)?;

    let mut trainer: Trainer<S> = match &args.resume {
        Some(path) => {
            let ckpt = checkpoint_read::<S>(path)?;
            info!("resuming from {} at step {}", path.display(), ckpt.step);
            checkpoint_restore(ckpt, cfg.train.clone())?
        }
        None => {
            let train_examples = corpus::window_examples(&train_dlgs, cfg.train.context_window)?;
            let texts: Vec<String> = train_examples
                .iter()
                .flat_map(|e| [e.context_text.clone(), e.gold_text.clone()])
                .collect();
            let vocab = corpus::build_vocab(
                texts.iter().map(|s| s.as_str()),
                cfg.max_vocab,
                cfg.min_freq,
            );
            info!("vocab: {} tokens", vocab.len());
            Trainer::new(cfg.train.clone(), vocab)?
        }
    };

    // echo the effective config (reproducible from this alone)
    cfg.train.model = trainer.model.config().clone();
    let echoed = serde_json::to_string_pretty(&cfg)?;
    println!("{echoed}");
    std::fs::write(args.out.join("config.json"), &echoed)?;

    let train_examples = prepare_examples(
        &train_dlgs,
        trainer.cfg.context_window,
        &trainer.vocab,
        trainer.model.config().max_target_len,
    )?;
    let val_examples = prepare_examples(
        &val_dlgs,
        trainer.cfg.context_window,
        &trainer.vocab,
        trainer.model.config().max_target_len,
    )?;
    info!(
        "{} train examples, {} validation examples",
        train_examples.len(),
        val_examples.len()
    );

    let total = args
        .steps
        .unwrap_or_else(|| trainer.total_steps(train_examples.len()));
    let remaining = total.saturating_sub(trainer.step);
    info!("running {remaining} steps (total budget {total})");
    let validation = (cfg.validate_each_epoch && !val_examples.is_empty())
        .then_some(val_examples.as_slice());
    let log = trainer.run_with_validation(&train_examples, remaining, validation)?;

    log.write_jsonl(&args.out.join("runlog.jsonl"))?;
    if !log.validation.is_empty() {
        use std::io::Write;
        let mut f =
            std::io::BufWriter::new(std::fs::File::create(args.out.join("validation.jsonl"))?);
        for v in &log.validation {
            serde_json::to_writer(&mut f, v)?;
            f.write_all(b"\n")?;
        }
    }
    checkpoint_save(&trainer, &args.out.join("checkpoint.json"))?;
    if let Some(last) = log.steps.last() {
        info!(
            "finished at step {}: l_total {:.4}, l_ce {:.4}",
            last.step, last.l_total, last.l_ce
        );
    }
    if trainer.model.truncation_count() > 0 {
        warn!(
            "{} source sequences were left-truncated to fit max_source_len",
            trainer.model.truncation_count()
        );
    }
    Ok(())
}

// ── generate ────────────────────────────────────────────────────────

#[derive(clap::Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Which split to decode: train | validation | test | all
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub context_window: Option<usize>,
    /// Output JSONL of {dialogue_id, turn_index, context, gold, generated}
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct GenerationRow {
    #[serde(default)]
    dialogue_id: String,
    #[serde(default)]
    turn_index: usize,
    context: String,
    gold: String,
    generated: String,
}

fn generate(args: GenerateArgs) -> Result<()> {
    match common::checkpoint_precision(&args.checkpoint)?.as_str() {
        "f64" => generate_typed::<f64>(args),
        "f32" => generate_typed::<f32>(args),
        other => bail!("checkpoint has unknown precision {other:?}"),
    }
}

fn generate_typed<S: Scalar>(args: GenerateArgs) -> Result<()> {
    use std::io::Write;
    let (model, vocab) = checkpoint_load_model::<S>(&args.checkpoint)?;
    let (dialogues, report) = corpus::load_jsonl(&args.corpus)?;
    for (line, why) in &report.skipped {
        warn!("{} line {line}: skipped ({why})", args.corpus.display());
    }
    let window = args.context_window.unwrap_or(corpus::DEFAULT_CONTEXT_WINDOW);
    let picked: Vec<Dialogue> = if args.split == "all" {
        dialogues
    } else {
        let seed = args.split_seed.unwrap_or(0);
        let (tr, va, te) = corpus::split(&dialogues, seed)?;
        match args.split.as_str() {
            "train" => tr,
            "validation" => va,
            "test" => te,
            other => bail!("unknown split {other:?} (train|validation|test|all)"),
        }
    };
    let examples = prepare_examples(&picked, window, &vocab, model.config().max_target_len)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    for ex in &examples {
        let ids = model.generate_greedy(&ex.src_ids, model.config().max_target_len)?;
        let row = GenerationRow {
            dialogue_id: ex.dialogue_id.clone(),
            turn_index: ex.turn_index,
            context: ex.context_text.clone(),
            gold: ex.gold_text.clone(),
            generated: vocab.decode(&ids),
        };
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    info!(
        "decoded {} examples from split {:?} into {}",
        examples.len(),
        args.split,
        args.out.display()
    );
    Ok(())
}

// ── evaluate ────────────────────────────────────────────────────────

#[derive(clap::Args)]
pub struct EvaluateArgs {
    /// Generations JSONL: {"context": str, "gold": str, "generated": str}
    #[arg(long)]
    pub generations: PathBuf,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    #[command(flatten)]
    pub provider: ProviderArgs,
    #[command(flatten)]
    pub weights: WeightArgs,
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    use std::io::BufRead;
    let provider = args.provider.build()?;
    let contanic_w = args.weights.contanic(Default::default());
    let dialuation_w = args.weights.dialuation(Default::default());
    let f = std::fs::File::open(&args.generations)
        .with_context(|| format!("cannot open {}", args.generations.display()))?;
    let mut rows = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let gen: GenerationRow = serde_json::from_str(&line)
            .with_context(|| format!("{} line {}", args.generations.display(), i + 1))?;
        rows.push(trainer::score_generation(
            &gen.dialogue_id,
            gen.turn_index,
            &gen.context,
            &gen.gold,
            &gen.generated,
            &provider,
            &contanic_w,
            &dialuation_w,
        )?);
    }
    if rows.is_empty() {
        bail!("no generations in {}", args.generations.display());
    }
    let report = ScoreReport::from_rows(rows);
    if let Some(p) = &args.out_json {
        report.write_json(p)?;
    }
    if let Some(p) = &args.out_csv {
        report.write_csv(p)?;
    }
    println!("examples\t{}", report.examples);
    let mut names: Vec<&String> = report.means.keys().collect();
    names.sort();
    for name in names {
        println!("{name}\t{:.6}", report.means[name]);
    }
    println!("distinct1\t{:.6}", report.distinct1);
    println!("distinct2\t{:.6}", report.distinct2);
    Ok(())
}

// ── score ───────────────────────────────────────────────────────────

#[derive(clap::Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub context: String,
    #[arg(long)]
    pub gold: String,
    #[arg(long)]
    pub generated: String,
    #[command(flatten)]
    pub provider: ProviderArgs,
    #[command(flatten)]
    pub weights: WeightArgs,
}

fn score(args: ScoreArgs) -> Result<()> {
    let provider = args.provider.build()?;
    let contanic_w = args.weights.contanic(Default::default());
    let dialuation_w = args.weights.dialuation(Default::default());
    let triple = scores::score_triple(
        &args.context,
        &args.gold,
        &args.generated,
        &provider,
        &contanic_w,
    )?;
    let cand = corpus::tokenize(&args.generated);
    let refr = corpus::tokenize(&args.gold);
    let b = bleu(&cand, &refr, BLEU_MAX_N);
    let r = rouge(&cand, &refr);
    let d = dialuation(triple.cr, triple.ss, &dialuation_w)?;
    println!("bleu\t{:.6}", b.cumulative);
    for (i, p) in b.precisions.iter().enumerate() {
        println!("bleu{}\t{p:.6}", i + 1);
    }
    println!("rouge1\t{:.6}", r.rouge1);
    println!("rouge2\t{:.6}", r.rouge2);
    println!("rouge_l\t{:.6}", r.rouge_l);
    println!("cr\t{:.6}", triple.cr);
    println!("ss\t{:.6}", triple.ss);
    println!("contanic\t{:.6}", triple.contanic);
    println!("dialuation\t{:.6}", d);
    println!("embed_score\t{:.6}", 100.0 * triple.ss);
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────

#[derive(clap::Args)]
pub struct GradcheckArgs {
    /// Loss variant to check, or "all"
    #[arg(long, default_value = "all")]
    pub loss_variant: String,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Entries checked per parameter tensor (stride-sampled)
    #[arg(long, default_value_t = 20)]
    pub max_entries: usize,
    #[arg(long, default_value_t = 50)]
    pub vocab: usize,
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
}

pub fn gradcheck_variant<S: Scalar>(
    variant: LossVariant,
    seed: u64,
    cfg: &GradcheckArgs,
) -> Result<semlogue::tensor::GradReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let model_cfg = ModelConfig {
        vocab_size: cfg.vocab,
        embed_dim: cfg.embed_dim,
        encoder_layers: cfg.layers,
        decoder_layers: cfg.layers,
        heads: 2,
        ff_dim: cfg.embed_dim * 2,
        max_source_len: 12,
        max_target_len: 8,
        architecture: Architecture::EncoderDecoder,
    };
    let model = semlogue::model::Model::<S>::new(model_cfg, seed)?;
    let bse = semlogue::losses::BaselineEstimator::<S>::new(cfg.vocab, 16, seed + 1);
    let loss_cfg = semlogue::losses::LossConfig {
        variant,
        ..Default::default()
    };
    // random batch: 2 examples with in-vocab tokens
    let mut seq = |len: usize| -> Vec<usize> {
        (0..len)
            .map(|_| rng.gen_range(semlogue::corpus::Vocab::reserved_len()..cfg.vocab))
            .collect()
    };
    let sources = vec![seq(5), seq(3)];
    let mut golds = vec![seq(4), seq(2)];
    for gstr in golds.iter_mut() {
        gstr.push(semlogue::corpus::EOS_ID);
    }
    let scores: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..1.0)).collect();

    let n_model = model.params().len();
    let mut all: Vec<Tensor<S>> = model.params().tensors().cloned().collect();
    all.extend(bse.params().tensors().cloned());
    let report = grad_check(
        |g, leaves| {
            let bound_model = BoundParams::from_ids(leaves[..n_model].to_vec());
            let bound_bse = BoundParams::from_ids(leaves[n_model..].to_vec());
            let tf = model.forward_teacher_forced(g, &bound_model, &sources, &golds)?;
            let out = semlogue::losses::assemble(
                g,
                &tf,
                &loss_cfg,
                loss_cfg.variant.needs_scores().then_some(&scores[..]),
                Some((&bse, &bound_bse)),
            )?;
            Ok(out.total)
        },
        &all,
        &GradCheckOptions {
            eps: cfg.eps,
            tolerance: cfg.tolerance,
            max_entries_per_param: Some(cfg.max_entries),
            ..Default::default()
        },
    )?;
    Ok(report)
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let variants: Vec<LossVariant> = if args.loss_variant == "all" {
        LossVariant::ALL.to_vec()
    } else {
        vec![args.loss_variant.parse()?]
    };
    let mut all_pass = true;
    for variant in variants {
        for seed in 0..args.seeds {
            let report = gradcheck_variant::<f64>(variant, seed, &args)?;
            println!("{:<30} seed {seed}: {}", variant.name(), report.summary());
            all_pass &= report.pass;
        }
    }
    if !all_pass {
        return Err(common::numeric_failure(
            "gradient check failed; see report lines above".into(),
        ));
    }
    Ok(())
}

// ── serve-echo-embedder ─────────────────────────────────────────────

#[derive(clap::Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8756")]
    pub bind: String,
    #[arg(long, default_value_t = semlogue::embeddings::DEFAULT_HASHED_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
}

fn serve(args: ServeArgs) -> Result<()> {
    let server = semlogue::server::EchoEmbedServer::start(&args.bind, args.dim, args.workers)
        .map_err(anyhow::Error::from)?;
    println!("listening on {}", server.endpoint());
    server.join();
    Ok(())
}
