//! Speaker/emotion disentanglement regularizers.
//!
//! * [`orthogonality_loss`]: squared Frobenius norm of the full speaker-emotion
//!   cosine matrix plus the squared mean of the index-aligned cosines, or in
//!   pairwise mode the mean absolute dot product over off-diagonal pairs.
//! * [`contrastive_loss`]: mean absolute dot product between each combined
//!   representation `h_i = s_i P_s + e_i P_e` and every later projected emotion
//!   `e_j P_e` (`i < j`).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Floor applied to row norms before dividing.
pub const NORM_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthMode {
    /// Cosine-matrix Frobenius term plus squared aligned-cosine mean.
    #[default]
    Default,
    /// Mean `|<E_i, S_j>|` over ordered pairs `i != j`.
    Pairwise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    /// `B x D` speaker embeddings.
    pub s: Tensor,
    /// `B x D` emotion embeddings; row `i` comes from the same sample as `s` row `i`.
    pub e: Tensor,
    pub speaker_ids: Vec<usize>,
    pub emotion_ids: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(s: Tensor, e: Tensor, speaker_ids: Vec<usize>, emotion_ids: Vec<usize>) -> Result<Self> {
        let (b, _) = s.dims2()?;
        if s.shape() != e.shape() {
            return Err(Error::dim("EmbeddingBatch", s.shape(), e.shape()));
        }
        if speaker_ids.len() != b || emotion_ids.len() != b {
            return Err(Error::Contract(format!(
                "batch of {b} rows with {} speaker and {} emotion labels",
                speaker_ids.len(),
                emotion_ids.len()
            )));
        }
        Ok(Self {
            s,
            e,
            speaker_ids,
            emotion_ids,
        })
    }

    /// Unlabeled batch, for loss evaluation only.
    pub fn unlabeled(s: Tensor, e: Tensor) -> Result<Self> {
        let b = s.rows();
        Self::new(s, e, vec![0; b], vec![0; b])
    }

    pub fn len(&self) -> usize {
        self.s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads {
    pub p_s: Tensor,
    pub p_e: Tensor,
}

impl ProjectionHeads {
    pub fn identity(dim: usize) -> Self {
        Self {
            p_s: Tensor::identity(dim),
            p_e: Tensor::identity(dim),
        }
    }

    pub fn random(dim: usize, rng: &mut rng::Rng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        Self {
            p_s: Tensor::randn(&[dim, dim], scale, rng),
            p_e: Tensor::randn(&[dim, dim], scale, rng),
        }
    }
}

fn batch_size(g: &Graph, s: Var, e: Var) -> Result<usize> {
    let (sv, ev) = (g.value(s), g.value(e));
    if sv.shape() != ev.shape() {
        return Err(Error::dim("disentangle", sv.shape(), ev.shape()));
    }
    let (b, _) = sv.dims2()?;
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(b)
}

/// Cross-orthogonality loss between `B x D` speaker (`s`) and emotion (`e`)
/// embeddings.
pub fn orthogonality_loss(g: &mut Graph, s: Var, e: Var, mode: OrthMode) -> Result<Var> {
    let b = batch_size(g, s, e)?;
    match mode {
        OrthMode::Default => {
            let raw_ne = g.row_norms(e)?;
            let n_e = g.clamp_min(raw_ne, NORM_EPS);
            let raw_ns = g.row_norms(s)?;
            let n_s = g.clamp_min(raw_ns, NORM_EPS);

            let st = g.transpose(s)?;
            let dots = g.matmul(e, st)?;
            let n_st = g.transpose(n_s)?;
            let denom = g.matmul(n_e, n_st)?;
            let cos = g.div(dots, denom)?;
            let cos_sq = g.square(cos);
            let frobenius = g.sum(cos_sq);

            let prod = g.mul(e, s)?;
            let aligned_dots = g.row_sum(prod)?;
            let aligned_denom = g.mul(n_e, n_s)?;
            let aligned = g.div(aligned_dots, aligned_denom)?;
            let mean_aligned = g.mean(aligned);
            let mean_sq = g.square(mean_aligned);
            g.add(frobenius, mean_sq)
        }
        OrthMode::Pairwise => {
            if b < 2 {
                return Err(Error::InsufficientBatch { got: b, needed: 2 });
            }
            let st = g.transpose(s)?;
            let dots = g.matmul(e, st)?;
            let abs = g.abs(dots);
            let mask = g.leaf(pair_mask(b, false));
            let off_diag = g.mul(abs, mask)?;
            let total = g.sum(off_diag);
            Ok(g.scale(total, 1.0 / (b * (b - 1)) as f64))
        }
    }
}

/// `B x B` 0/1 mask keeping `i < j` (`upper_only`) or every `i != j`.
fn pair_mask(b: usize, upper_only: bool) -> Tensor {
    let mut data = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let keep = if upper_only { i < j } else { i != j };
            if keep {
                data[i * b + j] = 1.0;
            }
        }
    }
    Tensor::matrix(b, b, data).expect("square mask")
}

/// In-batch contrastive loss. With `symmetric` the sum runs over all `i != j`
/// and is normalized by `B(B-1)`; otherwise over `i < j`, normalized by
/// `B(B-1)/2`.
pub fn contrastive_loss(g: &mut Graph, s: Var, e: Var, p_s: Var, p_e: Var, symmetric: bool) -> Result<Var> {
    let b = batch_size(g, s, e)?;
    if b < 2 {
        return Err(Error::InsufficientBatch { got: b, needed: 2 });
    }
    let hs = g.matmul(s, p_s)?;
    let he = g.matmul(e, p_e)?;
    let h = g.add(hs, he)?;
    let het = g.transpose(he)?;
    let dots = g.matmul(h, het)?;
    let abs = g.abs(dots);
    let mask = g.leaf(pair_mask(b, !symmetric));
    let kept = g.mul(abs, mask)?;
    let total = g.sum(kept);
    let count = if symmetric { b * (b - 1) } else { b * (b - 1) / 2 };
    Ok(g.scale(total, 1.0 / count as f64))
}

/// Value of [`orthogonality_loss`] on a concrete batch.
pub fn orthogonality_value(batch: &EmbeddingBatch, mode: OrthMode) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.leaf(batch.s.clone());
    let e = g.leaf(batch.e.clone());
    let l = orthogonality_loss(&mut g, s, e, mode)?;
    Ok(g.scalar(l))
}

/// Value of [`contrastive_loss`] on a concrete batch.
pub fn contrastive_value(batch: &EmbeddingBatch, heads: &ProjectionHeads, symmetric: bool) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.leaf(batch.s.clone());
    let e = g.leaf(batch.e.clone());
    let ps = g.leaf(heads.p_s.clone());
    let pe = g.leaf(heads.p_e.clone());
    let l = contrastive_loss(&mut g, s, e, ps, pe, symmetric)?;
    Ok(g.scalar(l))
}
