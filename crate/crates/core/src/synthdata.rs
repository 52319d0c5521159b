//! Synthetic factorized corpus with planted speaker and emotion factors.
//!
//! Every frame of a sample is
//! `speaker_bases[spk] + intensity * emotion_directions[emo] + noise`,
//! and every emotional sample has a neutral partner from the same speaker.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const NEUTRAL: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    /// Includes Neutral at index 0.
    pub num_emotions: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub noise_sigma: f64,
    pub emotion_intensity_range: [f64; 2],
    /// Emotional/neutral pairs per (speaker, non-neutral emotion).
    pub pairs_per_stratum: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_speakers: 4,
            num_emotions: 5,
            frames: 16,
            feature_dim: 24,
            embed_dim: 12,
            noise_sigma: 0.1,
            emotion_intensity_range: [0.6, 1.4],
            pairs_per_stratum: 50,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 {
            return Err(Error::config("num_speakers", format!("must be >= 2, got {}", self.num_speakers)));
        }
        if self.num_emotions < 2 {
            return Err(Error::config("num_emotions", format!("must be >= 2, got {}", self.num_emotions)));
        }
        if self.frames < 1 {
            return Err(Error::config("frames", "must be >= 1"));
        }
        if self.feature_dim < self.embed_dim {
            return Err(Error::config(
                "feature_dim",
                format!(
                    "feature_dim ({}) must be >= embed_dim ({})",
                    self.feature_dim, self.embed_dim
                ),
            ));
        }
        if self.embed_dim < 1 {
            return Err(Error::config("embed_dim", "must be >= 1"));
        }
        if self.feature_dim < self.num_speakers {
            return Err(Error::config(
                "feature_dim",
                format!(
                    "feature_dim ({}) must be >= num_speakers ({}) for orthogonal speaker bases",
                    self.feature_dim, self.num_speakers
                ),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", format!("must be finite and >= 0, got {}", self.noise_sigma)));
        }
        let [lo, hi] = self.emotion_intensity_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::config(
                "emotion_intensity_range",
                format!("need finite lo <= hi, got [{lo}, {hi}]"),
            ));
        }
        if self.pairs_per_stratum < 1 {
            return Err(Error::config("pairs_per_stratum", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechSample {
    pub id: usize,
    /// `frames x feature_dim`.
    pub features: Tensor,
    pub speaker_id: usize,
    pub emotion_id: usize,
    pub intensity: f64,
    pub pair_id: usize,
}

impl SpeechSample {
    pub fn is_neutral(&self) -> bool {
        self.emotion_id == NEUTRAL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `num_speakers x feature_dim`, orthonormal rows.
    pub speaker_bases: Tensor,
    /// `num_emotions x feature_dim`; row 0 is zero, the rest unit norm.
    pub emotion_directions: Tensor,
}

impl GroundTruth {
    fn stacked(&self) -> Tensor {
        let mut data = self.speaker_bases.data().to_vec();
        data.extend_from_slice(self.emotion_directions.data());
        let rows = self.speaker_bases.rows() + self.emotion_directions.rows();
        Tensor::matrix(rows, self.speaker_bases.cols(), data).expect("consistent ground truth")
    }

    fn unstack(t: &Tensor, num_speakers: usize) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        if rows <= num_speakers {
            return Err(Error::Format(format!("ground truth has {rows} rows")));
        }
        let split = num_speakers * cols;
        Ok(Self {
            speaker_bases: Tensor::matrix(num_speakers, cols, t.data()[..split].to_vec())?,
            emotion_directions: Tensor::matrix(rows - num_speakers, cols, t.data()[split..].to_vec())?,
        })
    }
}

/// Emotional and neutral member of a pair, as sample ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub pair_id: usize,
    pub emotional: usize,
    pub neutral: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    /// Indexed by sample id.
    pub samples: Vec<SpeechSample>,
    pub pairs: Vec<Pair>,
    pub ground_truth: Option<GroundTruth>,
}

fn orthonormal_rows(rows: usize, cols: usize, rng: &mut rng::Rng) -> Tensor {
    let m = DMatrix::<f64>::from_fn(cols, rows, |_, _| rng.sample(StandardNormal));
    let q = m.qr().q();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        data.extend(q.column(r).iter().copied());
    }
    Tensor::matrix(rows, cols, data).expect("qr shape")
}

pub fn generate_ground_truth(spec: &CorpusSpec, rng: &mut rng::Rng) -> GroundTruth {
    let f = spec.feature_dim;
    let speaker_bases = orthonormal_rows(spec.num_speakers, f, rng);
    let mut dirs = vec![0.0; spec.num_emotions * f];
    for e in 1..spec.num_emotions {
        let row = &mut dirs[e * f..(e + 1) * f];
        row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    GroundTruth {
        speaker_bases,
        emotion_directions: Tensor::matrix(spec.num_emotions, f, dirs).expect("shape"),
    }
}

fn synth_features(
    spec: &CorpusSpec,
    gt: &GroundTruth,
    speaker: usize,
    emotion: usize,
    intensity: f64,
    rng: &mut rng::Rng,
) -> Tensor {
    let f = spec.feature_dim;
    let base = gt.speaker_bases.row(speaker);
    let dir = gt.emotion_directions.row(emotion);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let mut data = Vec::with_capacity(spec.frames * f);
    for _ in 0..spec.frames {
        for j in 0..f {
            let clean = base[j] + intensity * dir[j];
            let eps = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push(clean + eps);
        }
    }
    Tensor::matrix(spec.frames, f, data).expect("shape")
}

/// Deterministic in `spec.seed`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, "corpus");
    let gt = generate_ground_truth(spec, &mut rng);
    let [lo, hi] = spec.emotion_intensity_range;

    let mut samples = Vec::new();
    let mut pairs = Vec::new();
    for speaker in 0..spec.num_speakers {
        for emotion in 1..spec.num_emotions {
            for _ in 0..spec.pairs_per_stratum {
                let pair_id = pairs.len();
                let intensity = if lo == hi { lo } else { rng.random_range(lo..=hi) };
                let emotional = samples.len();
                samples.push(SpeechSample {
                    id: emotional,
                    features: synth_features(spec, &gt, speaker, emotion, intensity, &mut rng),
                    speaker_id: speaker,
                    emotion_id: emotion,
                    intensity,
                    pair_id,
                });
                let neutral = samples.len();
                samples.push(SpeechSample {
                    id: neutral,
                    features: synth_features(spec, &gt, speaker, NEUTRAL, 0.0, &mut rng),
                    speaker_id: speaker,
                    emotion_id: NEUTRAL,
                    intensity: 0.0,
                    pair_id,
                });
                pairs.push(Pair {
                    pair_id,
                    emotional,
                    neutral,
                });
            }
        }
    }
    Ok(Corpus {
        spec: spec.clone(),
        samples,
        pairs,
        ground_truth: Some(gt),
    })
}

/// A subset of a corpus, as whole pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub pairs: Vec<Pair>,
}

impl Partition {
    pub fn sample_ids(&self) -> Vec<usize> {
        self.pairs.iter().flat_map(|p| [p.emotional, p.neutral]).collect()
    }

    pub fn samples<'a>(&self, corpus: &'a Corpus) -> Vec<&'a SpeechSample> {
        self.sample_ids().into_iter().map(|i| &corpus.samples[i]).collect()
    }
}

/// Pair-preserving split, stratified by the (speaker, emotion) of each pair.
pub fn split(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Partition, Partition)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config("train_fraction", format!("must be in (0, 1), got {train_fraction}")));
    }
    let mut strata: BTreeMap<(usize, usize), Vec<Pair>> = BTreeMap::new();
    for p in &corpus.pairs {
        let s = &corpus.samples[p.emotional];
        strata.entry((s.speaker_id, s.emotion_id)).or_default().push(*p);
    }
    let mut rng = rng::stream(seed, "split");
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for ((speaker, emotion), mut pairs) in strata {
        if pairs.len() < 2 {
            return Err(Error::Split {
                speaker,
                emotion,
                pairs: pairs.len(),
            });
        }
        pairs.shuffle(&mut rng);
        let n_train = ((pairs.len() as f64 * train_fraction).round() as usize).clamp(1, pairs.len() - 1);
        let eval_part = pairs.split_off(n_train);
        train.extend(pairs);
        eval.extend(eval_part);
    }
    train.sort_by_key(|p| p.pair_id);
    eval.sort_by_key(|p| p.pair_id);
    Ok((Partition { pairs: train }, Partition { pairs: eval }))
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: usize,
    file: String,
    speaker_id: usize,
    emotion_id: usize,
    intensity: f64,
    pair_id: usize,
}

#[derive(Serialize, Deserialize)]
struct CorpusIndex {
    spec: CorpusSpec,
    samples: Vec<SampleRecord>,
    pairs: Vec<Pair>,
    ground_truth: Option<String>,
}

const GROUND_TRUTH_FILE: &str = "ground_truth.tnsr";

fn sample_file(id: usize) -> String {
    format!("samples/sample_{id:06}.tnsr")
}

impl Corpus {
    fn index(&self) -> CorpusIndex {
        CorpusIndex {
            spec: self.spec.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleRecord {
                    id: s.id,
                    file: sample_file(s.id),
                    speaker_id: s.speaker_id,
                    emotion_id: s.emotion_id,
                    intensity: s.intensity,
                    pair_id: s.pair_id,
                })
                .collect(),
            pairs: self.pairs.clone(),
            ground_truth: self.ground_truth.as_ref().map(|_| GROUND_TRUTH_FILE.to_string()),
        }
    }

    fn index_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(&self.index()).expect("serializable index");
        bytes.push(b'\n');
        bytes
    }

    /// SHA-256 over the persisted byte representation, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.index_bytes());
        for s in &self.samples {
            h.update(s.features.to_tnsr_bytes());
        }
        if let Some(gt) = &self.ground_truth {
            h.update(gt.stacked().to_tnsr_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes `corpus.json`, one TNSR per sample and `ground_truth.tnsr`.
    /// Returns the written paths relative to `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir.join("samples"))?;
        let mut written = vec!["corpus.json".to_string()];
        fs::write(dir.join("corpus.json"), self.index_bytes())?;
        for s in &self.samples {
            let file = sample_file(s.id);
            s.features.save(dir.join(&file))?;
            written.push(file);
        }
        if let Some(gt) = &self.ground_truth {
            gt.stacked().save(dir.join(GROUND_TRUTH_FILE))?;
            written.push(GROUND_TRUTH_FILE.to_string());
        }
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: CorpusIndex = serde_json::from_slice(&fs::read(dir.join("corpus.json"))?)?;
        index.spec.validate()?;
        let mut samples = Vec::with_capacity(index.samples.len());
        for (pos, r) in index.samples.into_iter().enumerate() {
            if r.id != pos {
                return Err(Error::Format(format!("sample id {} at position {pos}", r.id)));
            }
            let features = Tensor::load(dir.join(&r.file))?;
            if features.shape() != [index.spec.frames, index.spec.feature_dim] {
                return Err(Error::dim(
                    "corpus sample",
                    features.shape(),
                    &[index.spec.frames, index.spec.feature_dim],
                ));
            }
            samples.push(SpeechSample {
                id: r.id,
                features,
                speaker_id: r.speaker_id,
                emotion_id: r.emotion_id,
                intensity: r.intensity,
                pair_id: r.pair_id,
            });
        }
        let ground_truth = match index.ground_truth {
            Some(file) if dir.join(&file).exists() => Some(GroundTruth::unstack(
                &Tensor::load(dir.join(file))?,
                index.spec.num_speakers,
            )?),
            _ => None,
        };
        Ok(Self {
            spec: index.spec,
            samples,
            pairs: index.pairs,
            ground_truth,
        })
    }
}
