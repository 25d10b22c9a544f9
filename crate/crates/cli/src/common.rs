//! Shared CLI plumbing: exit codes, provider flags, precision dispatch.

use anyhow::{Context, Result};
use clap::Args;
use semlogue::embeddings::{ConfiguredProvider, ProviderConfig, ProviderKind};
use semlogue::metrics::DialuationWeights;
use semlogue::scores::ContanicWeights;
use std::path::Path;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// 1 = usage, 2 = data, 3 = numeric failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(e) = err.downcast_ref::<semlogue::Error>() {
        return match e {
            semlogue::Error::Config(_) => EXIT_USAGE,
            semlogue::Error::NonFinite { .. } | semlogue::Error::TrainAbort { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some()
        || err.downcast_ref::<serde_json::Error>().is_some()
    {
        return EXIT_DATA;
    }
    EXIT_DATA
}

/// Error that exits with the numeric-failure code.
pub fn numeric_failure(msg: String) -> anyhow::Error {
    anyhow::Error::new(semlogue::Error::NonFinite { context: msg })
}

// ── Provider & weight flags ─────────────────────────────────────────

#[derive(Args, Clone, Debug)]
pub struct ProviderArgs {
    /// Embedding provider: hashed | intrinsic | remote
    #[arg(long, default_value = "hashed")]
    pub provider: String,
    /// Embedding dimension (hashed buckets / expected remote dim)
    #[arg(long)]
    pub provider_dim: Option<usize>,
    /// Remote embedding endpoint (e.g. http://127.0.0.1:8756/embed)
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub max_batch: Option<usize>,
    #[arg(long)]
    pub retries: Option<u32>,
    /// Embed serialization tags instead of stripping them
    #[arg(long, default_value_t = false)]
    pub embed_tags: bool,
}

impl ProviderArgs {
    pub fn apply(&self, cfg: &mut ProviderConfig) -> Result<()> {
        cfg.kind = match self.provider.as_str() {
            "hashed" => ProviderKind::Hashed,
            "intrinsic" => ProviderKind::Intrinsic,
            "remote" => ProviderKind::Remote,
            other => anyhow::bail!("unknown provider {other:?} (hashed|intrinsic|remote)"),
        };
        if let Some(d) = self.provider_dim {
            cfg.dim = d;
        }
        if let Some(e) = &self.endpoint {
            cfg.endpoint = Some(e.clone());
        }
        if let Some(t) = self.timeout_ms {
            cfg.timeout_ms = t;
        }
        if let Some(b) = self.max_batch {
            cfg.max_batch = b;
        }
        if let Some(r) = self.retries {
            cfg.retries = r;
        }
        if self.embed_tags {
            cfg.strip_tags = false;
        }
        Ok(())
    }

    pub fn build(&self) -> Result<ConfiguredProvider<f64>> {
        let mut cfg = ProviderConfig::default();
        self.apply(&mut cfg)?;
        Ok(ConfiguredProvider::from_config(&cfg)?)
    }
}

#[derive(Args, Clone, Debug)]
pub struct WeightArgs {
    /// Context-relevance weight in the combined score
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Semantic-similarity weight in the combined score
    #[arg(long)]
    pub beta: Option<f64>,
    /// Dialuation context weight
    #[arg(long)]
    pub delta_c: Option<f64>,
    /// Dialuation semantic weight
    #[arg(long)]
    pub delta_ss: Option<f64>,
}

impl WeightArgs {
    pub fn contanic(&self, base: ContanicWeights) -> ContanicWeights {
        ContanicWeights {
            alpha: self.alpha.unwrap_or(base.alpha),
            beta: self.beta.unwrap_or(base.beta),
        }
    }

    pub fn dialuation(&self, base: DialuationWeights) -> DialuationWeights {
        DialuationWeights {
            delta_c: self.delta_c.unwrap_or(base.delta_c),
            delta_ss: self.delta_ss.unwrap_or(base.delta_ss),
        }
    }
}

/// Peek at a checkpoint's precision tag without loading the tensors.
pub fn checkpoint_precision(path: &Path) -> Result<String> {
    #[derive(serde::Deserialize)]
    struct Peek {
        precision: String,
    }
    let f = std::fs::File::open(path)
        .with_context(|| format!("cannot open checkpoint {}", path.display()))?;
    let p: Peek = serde_json::from_reader(std::io::BufReader::new(f))
        .context("checkpoint is not readable JSON")?;
    Ok(p.precision)
}
