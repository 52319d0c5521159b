//! End-to-end training with the combined objective, the V1-V4 ablation
//! ladder, and ground-truth-aware evaluation.

mod ablate;
mod eval;
pub mod gradsuite;
mod model;
mod probe;
mod train;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::disentangle::OrthMode;
use crate::encoders::DEFAULT_NUM_PAIRS;
use crate::error::{Error, Result};
use crate::synthdata::CorpusSpec;

pub use ablate::{ablate, AblationRow, AblationTable, ABLATION_COLUMNS};
pub use eval::{evaluate, EvalReport, RunReport};
pub use model::{combined_loss, Batch, Dataset, LossBreakdown, LossTerms, Model, ModelVars, TokenBank};
pub use probe::{LinearProbe, PROBE_STEPS};
pub use train::{train, BatchSampler, LogRow, MetricLog, TrainOutcome, TRAIN_LOG_COLUMNS};

/// Cumulative ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Emotion conditioning only.
    V1,
    /// + orthogonality.
    V2,
    /// + in-batch contrastive.
    V3,
    /// + emotion-query cross-attention.
    V4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::V1, Variant::V2, Variant::V3, Variant::V4];

    pub fn uses_orthogonality(self) -> bool {
        self >= Variant::V2
    }

    pub fn uses_contrastive(self) -> bool {
        self >= Variant::V3
    }

    pub fn uses_cross_attention(self) -> bool {
        self >= Variant::V4
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::V4 => "v4",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            "v3" => Ok(Variant::V3),
            "v4" => Ok(Variant::V4),
            other => Err(Error::config("variant", format!("expected v1..v4, got `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_orth: f64,
    pub lambda_contrast: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_orth: 0.1,
            lambda_contrast: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of the vector-field MLP.
    pub hidden: usize,
    pub vocab: usize,
    /// Padded token-sequence length.
    pub max_len: usize,
    /// Shortest real token sequence.
    pub min_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            vocab: 16,
            max_len: 8,
            min_len: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub weights: LossWeights,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Corpus directory; when absent a corpus is generated from
    /// `corpus_spec` with `seed`.
    pub corpus: Option<PathBuf>,
    pub corpus_spec: CorpusSpec,
    pub train_fraction: f64,
    /// Pairs aggregated per emotion embedding at evaluation time.
    pub eval_pairs: usize,
    pub contrastive_symmetric: bool,
    pub query_per_token: bool,
    pub pairwise_orth: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::V2,
            weights: LossWeights::default(),
            lr: 1e-3,
            batch_size: 16,
            steps: 2000,
            seed: 0,
            corpus: None,
            corpus_spec: CorpusSpec::default(),
            train_fraction: 0.8,
            eval_pairs: DEFAULT_NUM_PAIRS,
            contrastive_symmetric: false,
            query_per_token: false,
            pairwise_orth: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        if self.steps < 1 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", format!("must be >= 2, got {}", self.batch_size)));
        }
        for (field, v) in [
            ("weights.lambda_orth", self.weights.lambda_orth),
            ("weights.lambda_contrast", self.weights.lambda_contrast),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction", format!("must be in (0, 1), got {}", self.train_fraction)));
        }
        if self.eval_pairs < 1 {
            return Err(Error::config("eval_pairs", "must be >= 1"));
        }
        let m = &self.model;
        if m.hidden < 1 {
            return Err(Error::config("model.hidden", "must be >= 1"));
        }
        if m.vocab < 2 {
            return Err(Error::config("model.vocab", format!("must be >= 2, got {}", m.vocab)));
        }
        if m.min_len < 1 || m.min_len > m.max_len {
            return Err(Error::config(
                "model.min_len",
                format!("need 1 <= min_len ({}) <= max_len ({})", m.min_len, m.max_len),
            ));
        }
        Ok(())
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            weights: self.weights,
            orthogonality: self.variant.uses_orthogonality(),
            contrastive: self.variant.uses_contrastive(),
            cross_attention: self.variant.uses_cross_attention(),
            orth_mode: if self.pairwise_orth { OrthMode::Pairwise } else { OrthMode::Default },
            contrastive_symmetric: self.contrastive_symmetric,
            query_per_token: self.query_per_token,
        }
    }
}

/// Which terms and pathways the combined objective switches on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub orthogonality: bool,
    pub contrastive: bool,
    pub cross_attention: bool,
    pub orth_mode: OrthMode,
    pub contrastive_symmetric: bool,
    pub query_per_token: bool,
}

impl LossSettings {
    pub fn for_variant(variant: Variant, weights: LossWeights) -> Self {
        TrainConfig {
            variant,
            weights,
            ..TrainConfig::default()
        }
        .loss_settings()
    }
}
