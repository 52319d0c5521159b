//! Finite-difference checks of every differentiable loss, on fixed seeds.

use serde::{Deserialize, Serialize};

use super::model::{combined_loss, Batch, Dataset, Model, ModelVars};
use super::{LossSettings, LossWeights, ModelConfig, Variant};
use crate::autodiff::Graph;
use crate::conditioning::{cross_attend_graph, CrossAttention, CrossAttentionVars};
use crate::disentangle::{contrastive_loss, orthogonality_loss, OrthMode};
use crate::error::Result;
use crate::flowmatch::{cfm_loss, FlowBatch, VectorFieldNet, VectorFieldVars};
use crate::gradcheck::{grad_check_many, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::rng;
use crate::synthdata::{generate_corpus, CorpusSpec};
use crate::tensor::Tensor;

pub const SUITE_SEEDS: [u64; 3] = [1, 2, 3];
pub const CHECKS: [&str; 6] = [
    "orthogonality",
    "orthogonality_pairwise",
    "contrastive",
    "cross_attention",
    "flow_matching",
    "combined",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub check: String,
    pub seed: u64,
    pub max_error: f64,
    pub passed: bool,
}

fn max_of(errs: Vec<f64>) -> f64 {
    errs.into_iter().fold(0.0, f64::max)
}

fn check_orth(seed: u64, mode: OrthMode) -> Result<f64> {
    let mut r = rng::stream(seed, "gradcheck");
    let s = Tensor::randn(&[4, 8], 1.0, &mut r);
    let e = Tensor::randn(&[4, 8], 1.0, &mut r);
    Ok(max_of(grad_check_many(
        |g, v| orthogonality_loss(g, v[0], v[1], mode),
        &[s, e],
        DEFAULT_STEP,
    )?))
}

fn check_contrastive(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gradcheck");
    let params: Vec<Tensor> = [[4, 8], [4, 8], [8, 8], [8, 8]]
        .iter()
        .map(|s| Tensor::randn(s, 1.0, &mut r))
        .collect();
    Ok(max_of(grad_check_many(
        |g, v| contrastive_loss(g, v[0], v[1], v[2], v[3], false),
        &params,
        DEFAULT_STEP,
    )?))
}

fn check_cross_attention(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gradcheck");
    let ca = CrossAttention::random(6, &mut r);
    let e = Tensor::randn(&[1, 6], 1.0, &mut r);
    let h = Tensor::randn(&[5, 6], 1.0, &mut r);
    let probe = Tensor::randn(&[5, 6], 1.0, &mut r);
    let mask = [true, true, false, true, false];
    Ok(max_of(grad_check_many(
        |g, v| {
            let w = CrossAttentionVars {
                w_q: v[2],
                w_k: v[3],
                w_v: v[4],
            };
            let out = cross_attend_graph(g, &w, v[0], v[1], &mask, false)?;
            let c = g.leaf(probe.clone());
            let prod = g.mul(out.output, c)?;
            Ok(g.sum(prod))
        },
        &[e, h, ca.w_q, ca.w_k, ca.w_v],
        DEFAULT_STEP,
    )?))
}

fn check_flow_matching(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gradcheck");
    let net = VectorFieldNet::random(3, 2, 6, &mut r);
    let batch = FlowBatch::sample(Tensor::randn(&[4, 3], 1.0, &mut r), &mut r)?;
    let cond = Tensor::randn(&[4, 2], 1.0, &mut r);
    let mut params: Vec<Tensor> = net.params().into_iter().cloned().collect();
    params.push(cond);
    Ok(max_of(grad_check_many(
        |g, v| {
            let w = VectorFieldVars {
                w1: v[0],
                b1: v[1],
                w2: v[2],
                b2: v[3],
                w3: v[4],
                b3: v[5],
            };
            cfm_loss(g, &w, &batch, Some(v[6]))
        },
        &params,
        DEFAULT_STEP,
    )?))
}

fn check_combined(seed: u64) -> Result<f64> {
    let spec = CorpusSpec {
        num_speakers: 2,
        num_emotions: 3,
        frames: 3,
        feature_dim: 6,
        embed_dim: 4,
        pairs_per_stratum: 2,
        seed,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec)?;
    let cfg = ModelConfig {
        hidden: 5,
        vocab: 5,
        max_len: 4,
        min_len: 2,
    };
    let model = Model::init(&cfg, spec.feature_dim, spec.embed_dim, seed)?;
    let data = Dataset::new(&corpus, &cfg)?;
    let batch = Batch::draw(&corpus, vec![0, 3, 4, 6], &mut rng::stream(seed, "gradcheck"))?;
    let settings = LossSettings::for_variant(Variant::V4, LossWeights::default());
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    Ok(max_of(grad_check_many(
        |g: &mut Graph, v| {
            let vars = ModelVars::from_vars(v)?;
            Ok(combined_loss(g, &vars, &data, &batch, &settings)?.total)
        },
        &params,
        DEFAULT_STEP,
    )?))
}

pub fn run_check(check: &str, seed: u64) -> Result<f64> {
    match check {
        "orthogonality" => check_orth(seed, OrthMode::Default),
        "orthogonality_pairwise" => check_orth(seed, OrthMode::Pairwise),
        "contrastive" => check_contrastive(seed),
        "cross_attention" => check_cross_attention(seed),
        "flow_matching" => check_flow_matching(seed),
        "combined" => check_combined(seed),
        other => Err(crate::error::Error::config("check", format!("unknown gradient check `{other}`"))),
    }
}

/// Every check on every seed, with the default step and tolerance.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    for check in CHECKS {
        for &seed in seeds {
            let max_error = run_check(check, seed)?;
            rows.push(GradCheckRow {
                check: check.to_string(),
                seed,
                max_error,
                passed: max_error < DEFAULT_TOLERANCE,
            });
        }
    }
    Ok(rows)
}
