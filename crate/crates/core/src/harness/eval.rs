use log::warn;
use serde::{Deserialize, Serialize};

use super::model::{combined_loss, Batch, Dataset, LossBreakdown, Model, ModelVars};
use super::probe::LinearProbe;
use super::{TrainConfig, Variant};
use crate::autodiff::Graph;
use crate::encoders::extract_emotion;
use crate::error::{Error, Result};
use crate::rng;
use crate::synthdata::{Corpus, Partition};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub num_eval_samples: usize,
    /// Mean over held-out samples of `|cos(s_i, e_i)|`.
    pub mean_abs_cross_cosine: f64,
    /// Held-out accuracy of a linear probe predicting emotion from `e`.
    pub emotion_probe_acc: f64,
    /// Held-out accuracy of a linear probe predicting speaker from `s`.
    pub speaker_probe_acc: f64,
    /// Mean over emotions of the cosine between the aggregated emotion
    /// embedding and the encoder image of the planted direction. `None`
    /// when the corpus carries no ground truth.
    pub direction_recovery_cosine: Option<f64>,
    /// Loss terms on one batch of all held-out samples.
    pub losses: LossBreakdown,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub corpus_hash: String,
    pub config: TrainConfig,
    pub report: EvalReport,
}

fn mean_abs_cross_cosine(s: &Tensor, e: &Tensor) -> f64 {
    let n = s.rows();
    (0..n)
        .map(|i| Tensor::vector(s.row(i).to_vec()).cosine(&Tensor::vector(e.row(i).to_vec())).abs())
        .sum::<f64>()
        / n as f64
}

fn probe_accuracy(train: (&Tensor, &[usize]), eval: (&Tensor, &[usize]), classes: usize) -> Result<f64> {
    LinearProbe::fit(train.0, train.1, classes)?.accuracy(eval.0, eval.1)
}

/// Mean recovery cosine over non-neutral emotions, or
/// [`Error::OracleUnavailable`] without ground truth.
pub fn direction_recovery(model: &Model, corpus: &Corpus, pairs: &Partition, n: usize) -> Result<f64> {
    let gt = corpus
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::OracleUnavailable("corpus has no planted emotion directions".into()))?;
    let mut total = 0.0;
    let emotions = 1..corpus.spec.num_emotions;
    let count = emotions.len();
    for emotion in emotions {
        let (emb, _) = extract_emotion(&model.emotion_encoder, corpus, &pairs.pairs, emotion, n)?;
        let image = model.emotion_encoder.image(gt.emotion_directions.row(emotion))?;
        total += emb.vector.cosine(&image);
    }
    Ok(total / count as f64)
}

/// Scores `model` on the held-out partition; probes are fitted on `train`.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    train: &Partition,
    eval: &Partition,
    config: &TrainConfig,
) -> Result<EvalReport> {
    let train_ids = train.sample_ids();
    let eval_ids = eval.sample_ids();
    let (s_tr, e_tr) = model.embed(corpus, &train_ids)?;
    let (s_ev, e_ev) = model.embed(corpus, &eval_ids)?;
    let labels = |ids: &[usize], f: fn(&crate::synthdata::SpeechSample) -> usize| -> Vec<usize> {
        ids.iter().map(|&i| f(&corpus.samples[i])).collect()
    };
    let emo_tr = labels(&train_ids, |s| s.emotion_id);
    let emo_ev = labels(&eval_ids, |s| s.emotion_id);
    let spk_tr = labels(&train_ids, |s| s.speaker_id);
    let spk_ev = labels(&eval_ids, |s| s.speaker_id);
    let emotion_probe_acc = probe_accuracy((&e_tr, &emo_tr), (&e_ev, &emo_ev), corpus.spec.num_emotions)?;
    let speaker_probe_acc = probe_accuracy((&s_tr, &spk_tr), (&s_ev, &spk_ev), corpus.spec.num_speakers)?;

    let direction_recovery_cosine = match direction_recovery(model, corpus, eval, config.eval_pairs) {
        Ok(c) => Some(c),
        Err(Error::OracleUnavailable(why)) => {
            warn!("direction recovery skipped: {why}");
            None
        }
        Err(e) => return Err(e),
    };

    let data = Dataset::new(corpus, &model.config)?;
    let batch = Batch::draw(corpus, eval_ids.clone(), &mut rng::stream(config.seed, "eval"))?;
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, model);
    let losses = combined_loss(&mut g, &vars, &data, &batch, &config.loss_settings())?.values(&g);

    Ok(EvalReport {
        variant: config.variant,
        num_eval_samples: eval_ids.len(),
        mean_abs_cross_cosine: mean_abs_cross_cosine(&s_ev, &e_ev),
        emotion_probe_acc,
        speaker_probe_acc,
        direction_recovery_cosine,
        losses,
    })
}
