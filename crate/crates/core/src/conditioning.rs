//! Token-sequence stand-in for the language-model states, and cross-attention
//! in which a single emotion embedding queries those states.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub token_ids: Vec<usize>,
    /// `true` marks a real token, `false` padding.
    pub pad_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(token_ids: Vec<usize>, pad_mask: Vec<bool>) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if token_ids.len() != pad_mask.len() {
            return Err(Error::dim("TokenSequence", &[token_ids.len()], &[pad_mask.len()]));
        }
        if !pad_mask.iter().any(|&m| m) {
            return Err(Error::InvalidMask { row: 0 });
        }
        Ok(Self { token_ids, pad_mask })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn real_count(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    /// `1 x L` row averaging the real positions.
    pub fn pooling_row(&self) -> Tensor {
        let inv = 1.0 / self.real_count() as f64;
        Tensor::row_vector(self.pad_mask.iter().map(|&m| if m { inv } else { 0.0 }).collect())
    }

    /// `rows x L` key mask repeating the pad mask on every row.
    fn key_mask(&self, rows: usize) -> Vec<bool> {
        (0..rows).flat_map(|_| self.pad_mask.iter().copied()).collect()
    }
}

/// One-block self-attention encoder over token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEncoder {
    /// `vocab x D`.
    pub embedding_table: Tensor,
    /// `max_len x D`.
    pub positional: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl TokenEncoder {
    pub fn random(vocab: usize, max_len: usize, dim: usize, rng: &mut rng::Rng) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::config("vocab", format!("must be >= 2, got {vocab}")));
        }
        let proj = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            embedding_table: Tensor::randn(&[vocab, dim], 1.0, rng),
            positional: Tensor::randn(&[max_len, dim], 0.1, rng),
            w_q: Tensor::randn(&[dim, dim], proj, rng),
            w_k: Tensor::randn(&[dim, dim], proj, rng),
            w_v: Tensor::randn(&[dim, dim], proj, rng),
        })
    }

    pub fn vocab(&self) -> usize {
        self.embedding_table.rows()
    }

    pub fn max_len(&self) -> usize {
        self.positional.rows()
    }
}

/// Graph handles for a [`TokenEncoder`]'s weights.
#[derive(Clone, Copy, Debug)]
pub struct TokenEncoderVars {
    pub embedding_table: Var,
    pub positional: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

impl TokenEncoderVars {
    pub fn bind(g: &mut Graph, enc: &TokenEncoder) -> Self {
        Self {
            embedding_table: g.leaf(enc.embedding_table.clone()),
            positional: g.leaf(enc.positional.clone()),
            w_q: g.leaf(enc.w_q.clone()),
            w_k: g.leaf(enc.w_k.clone()),
            w_v: g.leaf(enc.w_v.clone()),
        }
    }
}

/// `X + softmax(Q K^T / sqrt(D), key mask) V` with `X` = token + position
/// embeddings. Returns `L x D`.
pub fn encode_tokens_graph(g: &mut Graph, w: &TokenEncoderVars, seq: &TokenSequence) -> Result<Var> {
    let vocab = g.value(w.embedding_table).rows();
    if let Some(&bad) = seq.token_ids.iter().find(|&&t| t >= vocab) {
        return Err(Error::Vocab { id: bad, vocab });
    }
    let l = seq.len();
    let max_len = g.value(w.positional).rows();
    if l > max_len {
        return Err(Error::Contract(format!("sequence length {l} exceeds positional table {max_len}")));
    }
    let dim = g.value(w.embedding_table).cols();
    let tok = g.select_rows(w.embedding_table, &seq.token_ids)?;
    let positions: Vec<usize> = (0..l).collect();
    let pos = g.select_rows(w.positional, &positions)?;
    let x = g.add(tok, pos)?;

    let q = g.matmul(x, w.w_q)?;
    let k = g.matmul(x, w.w_k)?;
    let v = g.matmul(x, w.w_v)?;
    let kt = g.transpose(k)?;
    let raw = g.matmul(q, kt)?;
    let logits = g.scale(raw, 1.0 / (dim as f64).sqrt());
    let attn = g.softmax_rows(logits, Some(&seq.key_mask(l)))?;
    let ctx = g.matmul(attn, v)?;
    g.add(x, ctx)
}

pub fn encode_tokens(enc: &TokenEncoder, seq: &TokenSequence) -> Result<Tensor> {
    let mut g = Graph::new();
    let w = TokenEncoderVars::bind(&mut g, enc);
    let out = encode_tokens_graph(&mut g, &w, seq)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl CrossAttention {
    pub fn random(dim: usize, rng: &mut rng::Rng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        Self {
            w_q: Tensor::randn(&[dim, dim], scale, rng),
            w_k: Tensor::randn(&[dim, dim], scale, rng),
            w_v: Tensor::randn(&[dim, dim], scale, rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

impl CrossAttentionVars {
    pub fn bind(g: &mut Graph, ca: &CrossAttention) -> Self {
        Self {
            w_q: g.leaf(ca.w_q.clone()),
            w_k: g.leaf(ca.w_k.clone()),
            w_v: g.leaf(ca.w_v.clone()),
        }
    }
}

/// Intermediate results of [`cross_attend_graph`].
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `L x D` output, `h_lm` plus the attended context on every row.
    pub output: Var,
    /// `1 x L` attention weights (`L x L` when the query is tiled).
    pub weights: Var,
}

/// Emotion-query cross-attention over `L x D` token states `h_lm`.
///
/// `e` is a `1 x D` row. The single attended context is added residually to
/// every token row so the output keeps the `L x D` shape. With
/// `query_per_token` the query is tiled to `L` rows instead, which yields the
/// same output through an `L x L` attention matrix.
pub fn cross_attend_graph(
    g: &mut Graph,
    w: &CrossAttentionVars,
    e: Var,
    h_lm: Var,
    pad_mask: &[bool],
    query_per_token: bool,
) -> Result<Attended> {
    let (l, d) = g.value(h_lm).dims2()?;
    let (er, ed) = g.value(e).dims2()?;
    if er != 1 || ed != d {
        return Err(Error::dim("cross_attend", g.value(e).shape(), g.value(h_lm).shape()));
    }
    if pad_mask.len() != l {
        return Err(Error::dim("cross_attend mask", &[l], &[pad_mask.len()]));
    }
    let query_rows = if query_per_token { l } else { 1 };
    let q_in = if query_per_token { g.repeat_rows(e, l)? } else { e };
    let q = g.matmul(q_in, w.w_q)?;
    let k = g.matmul(h_lm, w.w_k)?;
    let v = g.matmul(h_lm, w.w_v)?;
    let kt = g.transpose(k)?;
    let raw = g.matmul(q, kt)?;
    let logits = g.scale(raw, 1.0 / (d as f64).sqrt());
    let mask: Vec<bool> = (0..query_rows).flat_map(|_| pad_mask.iter().copied()).collect();
    let weights = g.softmax_rows(logits, Some(&mask))?;
    let ctx = g.matmul(weights, v)?;
    let ctx_rows = if query_per_token { ctx } else { g.repeat_rows(ctx, l)? };
    let output = g.add(h_lm, ctx_rows)?;
    Ok(Attended { output, weights })
}

/// Returns the `L x D` output and the `1 x L` attention weights.
pub fn cross_attend(ca: &CrossAttention, e: &Tensor, h_lm: &Tensor, pad_mask: &[bool]) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let w = CrossAttentionVars::bind(&mut g, ca);
    let e_row = g.leaf(Tensor::row_vector(e.data().to_vec()));
    let h = g.leaf(h_lm.clone());
    let out = cross_attend_graph(&mut g, &w, e_row, h, pad_mask, false)?;
    Ok((g.value(out.output).clone(), g.value(out.weights).clone()))
}
