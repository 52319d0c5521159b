use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{LossSettings, ModelConfig};
use crate::autodiff::{Graph, Var};
use crate::conditioning::{
    cross_attend_graph, encode_tokens_graph, CrossAttention, CrossAttentionVars, TokenEncoder, TokenEncoderVars,
    TokenSequence,
};
use crate::disentangle::{contrastive_loss, orthogonality_loss, ProjectionHeads};
use crate::encoders::{encode_graph, pooled_features, Encoder};
use crate::error::{Error, Result};
use crate::flowmatch::{cfm_loss, FlowBatch, VectorFieldNet, VectorFieldVars};
use crate::rng;
use crate::synthdata::Corpus;
use crate::tensor::Tensor;

pub(crate) const PARAM_NAMES: [&str; 18] = [
    "speaker_encoder",
    "emotion_encoder",
    "head_s",
    "head_e",
    "tok_embedding",
    "tok_positional",
    "tok_w_q",
    "tok_w_k",
    "tok_w_v",
    "ca_w_q",
    "ca_w_k",
    "ca_w_v",
    "flow_w1",
    "flow_b1",
    "flow_w2",
    "flow_b2",
    "flow_w3",
    "flow_b3",
];

/// Every trainable piece of the conditioned generator.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub speaker_encoder: Encoder,
    pub emotion_encoder: Encoder,
    pub heads: ProjectionHeads,
    pub tokens: TokenEncoder,
    pub cross_attention: CrossAttention,
    pub flow: VectorFieldNet,
}

#[derive(Serialize, Deserialize)]
struct ModelIndex {
    config: ModelConfig,
    feature_dim: usize,
    embed_dim: usize,
    params: Vec<String>,
}

impl Model {
    /// Random initialisation from the `init` stream of `seed`.
    pub fn init(config: &ModelConfig, feature_dim: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, "init");
        let d = embed_dim;
        Ok(Self {
            config: config.clone(),
            speaker_encoder: Encoder::trainable(feature_dim, d, &mut rng),
            emotion_encoder: Encoder::trainable(feature_dim, d, &mut rng),
            heads: ProjectionHeads::random(d, &mut rng),
            tokens: TokenEncoder::random(config.vocab, config.max_len, d, &mut rng)?,
            cross_attention: CrossAttention::random(d, &mut rng),
            flow: VectorFieldNet::random(feature_dim, 4 * d, config.hidden, &mut rng),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.speaker_encoder.feature_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.speaker_encoder.embed_dim()
    }

    /// Parameters in [`PARAM_NAMES`] order.
    pub fn params(&self) -> Vec<&Tensor> {
        let [w1, b1, w2, b2, w3, b3] = self.flow.params();
        vec![
            &self.speaker_encoder.projection,
            &self.emotion_encoder.projection,
            &self.heads.p_s,
            &self.heads.p_e,
            &self.tokens.embedding_table,
            &self.tokens.positional,
            &self.tokens.w_q,
            &self.tokens.w_k,
            &self.tokens.w_v,
            &self.cross_attention.w_q,
            &self.cross_attention.w_k,
            &self.cross_attention.w_v,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let [w1, b1, w2, b2, w3, b3] = self.flow.params_mut();
        vec![
            &mut self.speaker_encoder.projection,
            &mut self.emotion_encoder.projection,
            &mut self.heads.p_s,
            &mut self.heads.p_e,
            &mut self.tokens.embedding_table,
            &mut self.tokens.positional,
            &mut self.tokens.w_q,
            &mut self.tokens.w_k,
            &mut self.tokens.w_v,
            &mut self.cross_attention.w_q,
            &mut self.cross_attention.w_k,
            &mut self.cross_attention.w_v,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        ]
    }

    /// Speaker and emotion embeddings (`B x D` each) for the given samples.
    pub fn embed(&self, corpus: &Corpus, ids: &[usize]) -> Result<(Tensor, Tensor)> {
        let samples: Vec<_> = ids.iter().map(|&i| &corpus.samples[i]).collect();
        let pooled = pooled_features(&samples)?;
        Ok((
            pooled.matmul(&self.speaker_encoder.projection)?,
            pooled.matmul(&self.emotion_encoder.projection)?,
        ))
    }

    /// Writes `model.json` plus one TNSR file per parameter; returns the
    /// file names.
    pub fn save(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir)?;
        let index = ModelIndex {
            config: self.config.clone(),
            feature_dim: self.feature_dim(),
            embed_dim: self.embed_dim(),
            params: PARAM_NAMES.iter().map(|n| format!("{n}.tnsr")).collect(),
        };
        let mut written = vec!["model.json".to_string()];
        fs::write(dir.join("model.json"), serde_json::to_string_pretty(&index)? + "\n")?;
        for (file, t) in index.params.iter().zip(self.params()) {
            t.save(dir.join(file))?;
            written.push(file.clone());
        }
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: ModelIndex = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
        if index.params.len() != PARAM_NAMES.len() {
            return Err(Error::Format(format!(
                "model.json lists {} params, expected {}",
                index.params.len(),
                PARAM_NAMES.len()
            )));
        }
        let mut model = Self::init(&index.config, index.feature_dim, index.embed_dim, 0)?;
        for (slot, file) in model.params_mut().into_iter().zip(&index.params) {
            let t = Tensor::load(dir.join(file))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!("{file}: shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(model)
    }
}

/// Graph handles for every [`Model`] parameter.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub speaker_proj: Var,
    pub emotion_proj: Var,
    pub p_s: Var,
    pub p_e: Var,
    pub tokens: TokenEncoderVars,
    pub cross_attention: CrossAttentionVars,
    pub flow: VectorFieldVars,
}

impl ModelVars {
    pub fn bind(g: &mut Graph, model: &Model) -> Self {
        Self {
            speaker_proj: g.leaf(model.speaker_encoder.projection.clone()),
            emotion_proj: g.leaf(model.emotion_encoder.projection.clone()),
            p_s: g.leaf(model.heads.p_s.clone()),
            p_e: g.leaf(model.heads.p_e.clone()),
            tokens: TokenEncoderVars::bind(g, &model.tokens),
            cross_attention: CrossAttentionVars::bind(g, &model.cross_attention),
            flow: VectorFieldVars::bind(g, &model.flow),
        }
    }

    /// Binds caller-supplied tensors in [`PARAM_NAMES`] order.
    pub fn from_vars(v: &[Var]) -> Result<Self> {
        if v.len() != PARAM_NAMES.len() {
            return Err(Error::Contract(format!("expected {} vars, got {}", PARAM_NAMES.len(), v.len())));
        }
        Ok(Self {
            speaker_proj: v[0],
            emotion_proj: v[1],
            p_s: v[2],
            p_e: v[3],
            tokens: TokenEncoderVars {
                embedding_table: v[4],
                positional: v[5],
                w_q: v[6],
                w_k: v[7],
                w_v: v[8],
            },
            cross_attention: CrossAttentionVars {
                w_q: v[9],
                w_k: v[10],
                w_v: v[11],
            },
            flow: VectorFieldVars {
                w1: v[12],
                b1: v[13],
                w2: v[14],
                b2: v[15],
                w3: v[16],
                b3: v[17],
            },
        })
    }

    pub fn all(&self) -> Vec<Var> {
        let t = &self.tokens;
        let c = &self.cross_attention;
        let mut out = vec![
            self.speaker_proj,
            self.emotion_proj,
            self.p_s,
            self.p_e,
            t.embedding_table,
            t.positional,
            t.w_q,
            t.w_k,
            t.w_v,
            c.w_q,
            c.w_k,
            c.w_v,
        ];
        out.extend(self.flow.vars());
        out
    }
}

/// Deterministic text for every pair; both members of a pair share it.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBank {
    by_pair: BTreeMap<usize, TokenSequence>,
}

impl TokenBank {
    pub fn new(corpus: &Corpus, config: &ModelConfig) -> Result<Self> {
        let mut rng = rng::stream(corpus.spec.seed, "tokens");
        let mut by_pair = BTreeMap::new();
        for p in &corpus.pairs {
            let len = rng.random_range(config.min_len..=config.max_len);
            let mut ids = Vec::with_capacity(config.max_len);
            let mut mask = Vec::with_capacity(config.max_len);
            for k in 0..config.max_len {
                if k < len {
                    ids.push(rng.random_range(0..config.vocab));
                    mask.push(true);
                } else {
                    ids.push(0);
                    mask.push(false);
                }
            }
            by_pair.insert(p.pair_id, TokenSequence::new(ids, mask)?);
        }
        Ok(Self { by_pair })
    }

    pub fn get(&self, pair_id: usize) -> Result<&TokenSequence> {
        self.by_pair
            .get(&pair_id)
            .ok_or_else(|| Error::Contract(format!("no tokens for pair {pair_id}")))
    }
}

/// A corpus together with its token bank.
#[derive(Clone, Debug)]
pub struct Dataset<'a> {
    pub corpus: &'a Corpus,
    pub tokens: TokenBank,
}

impl<'a> Dataset<'a> {
    pub fn new(corpus: &'a Corpus, config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            corpus,
            tokens: TokenBank::new(corpus, config)?,
        })
    }
}

/// Samples of one step and their flow-matching draws.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sample_ids: Vec<usize>,
    pub flow: FlowBatch,
}

impl Batch {
    /// Picks one frame of each sample as the target, then noise and times.
    pub fn draw(corpus: &Corpus, sample_ids: Vec<usize>, rng: &mut rng::Rng) -> Result<Self> {
        if sample_ids.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let rows = sample_ids
            .iter()
            .map(|&i| {
                let f = &corpus.samples[i].features;
                f.row(rng.random_range(0..f.rows())).to_vec()
            })
            .collect::<Vec<_>>();
        let flow = FlowBatch::sample(Tensor::from_rows(&rows)?, rng)?;
        Ok(Self { sample_ids, flow })
    }
}

/// Graph nodes of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cfm: Var,
    /// Raw orthogonality loss, computed even when it is switched off.
    pub orth: Var,
    /// Raw contrastive loss, computed even when it is switched off.
    pub contrast: Var,
    pub weighted_orth: Var,
    pub weighted_contrast: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cfm: f64,
    pub orth: f64,
    pub contrast: f64,
    pub weighted_orth: f64,
    pub weighted_contrast: f64,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            total: g.scalar(self.total),
            cfm: g.scalar(self.cfm),
            orth: g.scalar(self.orth),
            contrast: g.scalar(self.contrast),
            weighted_orth: g.scalar(self.weighted_orth),
            weighted_contrast: g.scalar(self.weighted_contrast),
        }
    }
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.cfm, self.orth, self.contrast].iter().all(|v| v.is_finite())
    }
}

/// `cfm + lambda_orth * orth + lambda_contrast * contrast`, each term gated
/// by `settings`.
///
/// The flow is conditioned on `[pool(h), s, e, pool(h_lm)]` where `h` is the
/// cross-attended token states, or `h_lm` itself when cross-attention is off.
pub fn combined_loss(
    g: &mut Graph,
    vars: &ModelVars,
    data: &Dataset<'_>,
    batch: &Batch,
    settings: &LossSettings,
) -> Result<LossTerms> {
    let corpus = data.corpus;
    let samples: Vec<_> = batch.sample_ids.iter().map(|&i| &corpus.samples[i]).collect();
    let pooled = g.leaf(pooled_features(&samples)?);
    let s = encode_graph(g, vars.speaker_proj, pooled)?;
    let e = encode_graph(g, vars.emotion_proj, pooled)?;

    let mut attn_rows = Vec::with_capacity(samples.len());
    let mut lm_rows = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let seq = data.tokens.get(sample.pair_id)?;
        let h_lm = encode_tokens_graph(g, &vars.tokens, seq)?;
        let pool = g.leaf(seq.pooling_row());
        let h = if settings.cross_attention {
            let e_i = g.select_rows(e, &[i])?;
            cross_attend_graph(g, &vars.cross_attention, e_i, h_lm, &seq.pad_mask, settings.query_per_token)?.output
        } else {
            h_lm
        };
        attn_rows.push(g.matmul(pool, h)?);
        lm_rows.push(g.matmul(pool, h_lm)?);
    }
    let attn = g.concat_rows(&attn_rows)?;
    let lm = g.concat_rows(&lm_rows)?;
    let cond = g.concat_cols(&[attn, s, e, lm])?;

    let cfm = cfm_loss(g, &vars.flow, &batch.flow, Some(cond))?;
    let orth = orthogonality_loss(g, s, e, settings.orth_mode)?;
    let contrast = contrastive_loss(g, s, e, vars.p_s, vars.p_e, settings.contrastive_symmetric)?;

    let lo = if settings.orthogonality { settings.weights.lambda_orth } else { 0.0 };
    let lc = if settings.contrastive { settings.weights.lambda_contrast } else { 0.0 };
    let weighted_orth = g.scale(orth, lo);
    let weighted_contrast = g.scale(contrast, lc);
    let mut total = cfm;
    if settings.orthogonality {
        total = g.add(total, weighted_orth)?;
    }
    if settings.contrastive {
        total = g.add(total, weighted_contrast)?;
    }
    Ok(LossTerms {
        total,
        cfm,
        orth,
        contrast,
        weighted_orth,
        weighted_contrast,
    })
}
