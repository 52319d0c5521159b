use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;

use super::model::{combined_loss, Batch, Dataset, LossBreakdown, Model, ModelVars};
use super::TrainConfig;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng;
use crate::synthdata::{generate_corpus, split, Corpus, Partition};
use crate::tensor::Tensor;

pub const TRAIN_LOG_COLUMNS: [&str; 6] = ["step", "loss_total", "loss_cfm", "loss_orth", "loss_contrast", "grad_norm"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub losses: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<LogRow>,
}

impl MetricLog {
    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::Contract(format!("log step {} after {}", row.step, last.step)));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = TRAIN_LOG_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let l = &r.losses;
            let _ = writeln!(out, "{},{},{},{},{},{}", r.step, l.total, l.cfm, l.orth, l.contrast, r.grad_norm);
        }
        out
    }

    pub fn first(&self) -> Option<&LogRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

/// Shuffled passes over the training samples, dropping the ragged tail.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    ids: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    rng: rng::Rng,
}

impl BatchSampler {
    pub fn new(ids: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if ids.len() < batch_size {
            return Err(Error::InsufficientBatch {
                got: ids.len(),
                needed: batch_size,
            });
        }
        let mut rng = rng::stream(seed, "batching");
        let mut ids = ids;
        ids.shuffle(&mut rng);
        Ok(Self {
            ids,
            batch_size,
            cursor: 0,
            rng,
        })
    }

    pub fn next_batch(&mut self, corpus: &Corpus) -> Result<Batch> {
        if self.cursor + self.batch_size > self.ids.len() {
            self.ids.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let ids = self.ids[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        Batch::draw(corpus, ids, &mut self.rng)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: MetricLog,
    pub train: Partition,
    pub eval: Partition,
}

impl TrainConfig {
    /// Loads `corpus` when set, otherwise generates one from `corpus_spec`.
    pub fn resolve_corpus(&self) -> Result<Corpus> {
        match &self.corpus {
            Some(dir) => Corpus::load(dir),
            None => generate_corpus(&self.corpus_spec),
        }
    }
}

/// Trains a freshly initialised model on the train split of `corpus`.
pub fn train(config: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_part, eval_part) = split(corpus, config.train_fraction, config.seed)?;
    let data = Dataset::new(corpus, &config.model)?;
    let mut model = Model::init(&config.model, corpus.spec.feature_dim, corpus.spec.embed_dim, config.seed)?;
    let settings = config.loss_settings();
    let mut sampler = BatchSampler::new(train_part.sample_ids(), config.batch_size, config.seed)?;
    let mut opt = Adam::new(config.lr);
    let mut log = MetricLog::default();
    info!(
        "training {} for {} steps on {} samples",
        config.variant,
        config.steps,
        train_part.pairs.len() * 2
    );
    for step in 0..config.steps {
        let batch = sampler.next_batch(corpus)?;
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &model);
        let terms = combined_loss(&mut g, &vars, &data, &batch, &settings)?;
        let losses = terms.values(&g);
        if !losses.is_finite() {
            let last = log.last().map(|r| format!("{:?}", r.losses)).unwrap_or_else(|| "none".into());
            return Err(Error::Divergence {
                step,
                detail: format!("non-finite loss {:?}; last finite {last}", losses),
            });
        }
        let grads = g.backward(terms.total)?;
        let mut gs: Vec<Tensor> = vars.all().into_iter().map(|v| grads.get(v)).collect();
        for (k, enc) in [&model.speaker_encoder, &model.emotion_encoder].into_iter().enumerate() {
            if enc.frozen {
                gs[k] = Tensor::zeros(gs[k].shape());
            }
        }
        let grad_norm = gs.iter().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("non-finite gradient at loss {:?}", losses),
            });
        }
        opt.step(&mut model.params_mut(), &gs)?;
        log.push(LogRow {
            step,
            losses,
            grad_norm,
        })?;
        if step % 500 == 0 {
            debug!("step {step}: total {:.5} cfm {:.5} orth {:.5}", losses.total, losses.cfm, losses.orth);
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        train: train_part,
        eval: eval_part,
    })
}
