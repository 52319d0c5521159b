//! Mean-pool + linear speaker/emotion encoders and the paired-difference
//! emotion embedding.
//!
//! An emotion embedding is the mean of unit difference vectors
//! `(u_e - u_n) / |u_e - u_n|` between the encodings of an emotional
//! utterance and its neutral partner. The mean is deliberately left
//! un-normalized, so its length reports how consistent the pairs are.

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::synthdata::{Corpus, Pair, SpeechSample};
use crate::tensor::Tensor;

/// Pairs whose encodings are closer than this are degenerate.
pub const DEGENERATE_EPS: f64 = 1e-9;

pub const DEFAULT_NUM_PAIRS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    /// `feature_dim x embed_dim`.
    pub projection: Tensor,
    pub frozen: bool,
}

impl Encoder {
    pub fn new(projection: Tensor, frozen: bool) -> Result<Self> {
        projection.dims2()?;
        if !projection.is_finite() {
            return Err(Error::Contract("encoder projection has non-finite entries".into()));
        }
        Ok(Self { projection, frozen })
    }

    /// Frozen encoder with orthonormal columns (a stand-in for a pretrained
    /// extractor).
    pub fn frozen_orthonormal(feature_dim: usize, embed_dim: usize, rng: &mut rng::Rng) -> Result<Self> {
        if feature_dim < embed_dim {
            return Err(Error::config(
                "feature_dim",
                format!("feature_dim ({feature_dim}) must be >= embed_dim ({embed_dim})"),
            ));
        }
        let m = DMatrix::<f64>::from_fn(feature_dim, embed_dim, |_, _| rng.sample(StandardNormal));
        let q = m.qr().q();
        let data = (0..feature_dim)
            .flat_map(|i| (0..embed_dim).map(move |j| (i, j)))
            .map(|(i, j)| q[(i, j)])
            .collect();
        Self::new(Tensor::matrix(feature_dim, embed_dim, data)?, true)
    }

    pub fn trainable(feature_dim: usize, embed_dim: usize, rng: &mut rng::Rng) -> Self {
        let scale = 1.0 / (feature_dim as f64).sqrt();
        Self {
            projection: Tensor::randn(&[feature_dim, embed_dim], scale, rng),
            frozen: false,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.cols()
    }

    /// Mean over frames, then project. Returns a length-`embed_dim` vector.
    pub fn encode(&self, sample: &SpeechSample) -> Result<Tensor> {
        self.encode_features(&sample.features)
    }

    pub fn encode_features(&self, features: &Tensor) -> Result<Tensor> {
        let (_, f) = features.dims2()?;
        if f != self.feature_dim() {
            return Err(Error::dim("encode", features.shape(), self.projection.shape()));
        }
        let pooled = features.mean_rows()?;
        let out = pooled.matmul(&self.projection)?;
        Ok(Tensor::vector(out.into_data()))
    }

    /// Embedding-space image of a feature-space direction.
    pub fn image(&self, direction: &[f64]) -> Result<Tensor> {
        let row = Tensor::row_vector(direction.to_vec());
        Ok(Tensor::vector(row.matmul(&self.projection)?.into_data()))
    }
}

/// Frame-mean of every sample, stacked into a `B x feature_dim` matrix.
pub fn pooled_features(samples: &[&SpeechSample]) -> Result<Tensor> {
    let first = samples.first().ok_or(Error::EmptyBatch)?;
    let f = first.features.cols();
    let mut data = Vec::with_capacity(samples.len() * f);
    for s in samples {
        data.extend_from_slice(s.features.mean_rows()?.data());
    }
    Tensor::matrix(samples.len(), f, data)
}

/// Differentiable batch encoding: `pooled (B x F) . projection (F x D)`.
pub fn encode_graph(g: &mut Graph, projection: Var, pooled: Var) -> Result<Var> {
    g.matmul(pooled, projection)
}

/// Unit direction from the neutral encoding to the emotional one.
pub fn emotion_direction(u_e: &Tensor, u_n: &Tensor) -> Result<Tensor> {
    let diff = u_e.zip_with(u_n, |a, b| a - b)?;
    let norm = diff.norm();
    if norm <= DEGENERATE_EPS {
        return Err(Error::DegeneratePair { distance: norm });
    }
    Ok(diff.scale(1.0 / norm))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmotionEmbedding {
    pub vector: Tensor,
    pub num_pairs: usize,
    pub emotion_id: usize,
    /// Input positions of the pairs that went into the mean.
    pub used: Vec<usize>,
    /// Degenerate pairs passed over before `num_pairs` were collected.
    pub skipped: usize,
}

/// Mean of the first `n` non-degenerate pair directions, in input order.
pub fn aggregate_emotion(pairs: &[(Tensor, Tensor)], n: usize, emotion_id: usize) -> Result<EmotionEmbedding> {
    if n == 0 {
        return Err(Error::config("n", "number of pairs must be >= 1"));
    }
    let mut sum: Option<Tensor> = None;
    let mut used = Vec::with_capacity(n);
    let mut skipped = 0;
    for (pos, (u_e, u_n)) in pairs.iter().enumerate() {
        if used.len() == n {
            break;
        }
        match emotion_direction(u_e, u_n) {
            Ok(v) => {
                match &mut sum {
                    Some(acc) => acc.add_assign(&v)?,
                    None => sum = Some(v),
                }
                used.push(pos);
            }
            Err(Error::DegeneratePair { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if used.len() < n {
        let usable = used.len() + pairs.len().saturating_sub(used.len() + skipped);
        return Err(Error::InsufficientPairs { needed: n, usable });
    }
    if skipped > 0 {
        warn!("emotion {emotion_id}: skipped {skipped} degenerate pair(s)");
    }
    let vector = sum.expect("n >= 1 pairs used").scale(1.0 / n as f64);
    Ok(EmotionEmbedding {
        vector,
        num_pairs: n,
        emotion_id,
        used,
        skipped,
    })
}

/// Encodes the given pairs of `emotion_id` and aggregates the first `n`.
/// Returns the embedding with the pair ids that were used.
pub fn extract_emotion(
    encoder: &Encoder,
    corpus: &Corpus,
    pairs: &[Pair],
    emotion_id: usize,
    n: usize,
) -> Result<(EmotionEmbedding, Vec<usize>)> {
    let selected: Vec<&Pair> = pairs
        .iter()
        .filter(|p| corpus.samples[p.emotional].emotion_id == emotion_id)
        .collect();
    let encoded = selected
        .iter()
        .map(|p| {
            Ok((
                encoder.encode(&corpus.samples[p.emotional])?,
                encoder.encode(&corpus.samples[p.neutral])?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let emb = aggregate_emotion(&encoded, n, emotion_id)?;
    let ids = emb.used.iter().map(|&i| selected[i].pair_id).collect();
    Ok((emb, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, CorpusSpec};
    use rand::seq::SliceRandom;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    fn sample(features: Tensor) -> SpeechSample {
        SpeechSample {
            id: 0,
            features,
            speaker_id: 0,
            emotion_id: 0,
            intensity: 0.0,
            pair_id: 0,
        }
    }

    #[test]
    fn identity_encoder_on_constant_frames() {
        let enc = Encoder::new(Tensor::identity(3), true).unwrap();
        let c = [0.5, -1.0, 2.0];
        let feats = Tensor::from_rows(&[c.to_vec(), c.to_vec(), c.to_vec()]).unwrap();
        assert_eq!(enc.encode(&sample(feats)).unwrap().data(), &c);
    }

    #[test]
    fn mean_pooling_over_frames() {
        let enc = Encoder::new(Tensor::identity(2), true).unwrap();
        let feats = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(enc.encode(&sample(feats)).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn encode_matches_loop_oracle() {
        let mut r = rng::stream(1, "test");
        let enc = Encoder::trainable(5, 3, &mut r);
        let feats = Tensor::randn(&[7, 5], 1.0, &mut r);
        let got = enc.encode(&sample(feats.clone())).unwrap();
        for j in 0..3 {
            let mut acc = 0.0;
            for t in 0..7 {
                for i in 0..5 {
                    acc += feats.get(t, i) * enc.projection.get(i, j);
                }
            }
            assert!((got.data()[j] - acc / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_rejects_wrong_feature_dim() {
        let enc = Encoder::new(Tensor::identity(3), true).unwrap();
        assert!(matches!(enc.encode(&sample(Tensor::zeros(&[2, 4]))), Err(Error::Dimension { .. })));
    }

    #[test]
    fn direction_examples() {
        assert_eq!(emotion_direction(&v(&[2.0, 0.0]), &v(&[1.0, 0.0])).unwrap().data(), &[1.0, 0.0]);
        let d = emotion_direction(&v(&[1.0, 1.0]), &v(&[0.0, 0.0])).unwrap();
        let h = 2f64.sqrt() / 2.0;
        assert!((d.data()[0] - h).abs() < 1e-15 && (d.data()[1] - h).abs() < 1e-15);
        assert!(matches!(
            emotion_direction(&v(&[1.0, 1.0]), &v(&[1.0, 1.0])),
            Err(Error::DegeneratePair { .. })
        ));
    }

    #[test]
    fn aggregate_examples() {
        let e = aggregate_emotion(&[(v(&[2.0, 0.0]), v(&[1.0, 0.0]))], 1, 3).unwrap();
        assert_eq!(e.vector.data(), &[1.0, 0.0]);
        assert_eq!(e.emotion_id, 3);

        let pairs = [(v(&[1.0, 0.0]), v(&[0.0, 0.0])), (v(&[0.0, 1.0]), v(&[0.0, 0.0]))];
        let e = aggregate_emotion(&pairs, 2, 1).unwrap();
        assert_eq!(e.vector.data(), &[0.5, 0.5]);
    }

    #[test]
    fn aggregate_skips_degenerate_and_reports_shortfall() {
        let pairs = [
            (v(&[1.0, 1.0]), v(&[1.0, 1.0])),
            (v(&[3.0, 0.0]), v(&[0.0, 0.0])),
            (v(&[0.0, 0.0]), v(&[0.0, 0.0])),
        ];
        let e = aggregate_emotion(&pairs, 1, 1).unwrap();
        assert_eq!(e.used, vec![1]);
        assert_eq!(e.skipped, 1);
        assert!(matches!(
            aggregate_emotion(&pairs, 2, 1),
            Err(Error::InsufficientPairs { needed: 2, usable: 1 })
        ));
        assert!(aggregate_emotion(&pairs, 0, 1).is_err());
    }

    #[test]
    fn aggregate_is_permutation_invariant_and_bounded() {
        let mut r = rng::stream(2, "test");
        let mut pairs: Vec<(Tensor, Tensor)> = (0..10)
            .map(|_| (Tensor::randn(&[6], 1.0, &mut r), Tensor::randn(&[6], 1.0, &mut r)))
            .collect();
        let a = aggregate_emotion(&pairs, 10, 1).unwrap();
        pairs.shuffle(&mut r);
        let b = aggregate_emotion(&pairs, 10, 1).unwrap();
        for (x, y) in a.vector.data().iter().zip(b.vector.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(a.vector.norm() <= 1.0 + 1e-12);
        for (u_e, u_n) in &pairs {
            assert!((emotion_direction(u_e, u_n).unwrap().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_extraction_recovers_planted_direction() {
        let spec = CorpusSpec {
            noise_sigma: 0.0,
            seed: 5,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let gt = corpus.ground_truth.clone().unwrap();
        let mut r = rng::stream(5, "extractor");
        let enc = Encoder::frozen_orthonormal(spec.feature_dim, spec.embed_dim, &mut r).unwrap();
        for emo in 1..spec.num_emotions {
            let (emb, ids) = extract_emotion(&enc, &corpus, &corpus.pairs, emo, DEFAULT_NUM_PAIRS).unwrap();
            assert_eq!(ids.len(), DEFAULT_NUM_PAIRS);
            let planted = enc.image(gt.emotion_directions.row(emo)).unwrap();
            assert!(emb.vector.cosine(&planted) >= 0.999);
        }
    }

    #[test]
    fn alignment_grows_with_pair_count() {
        let mut mean = [0.0; DEFAULT_NUM_PAIRS];
        let seeds = 50;
        for seed in 0..seeds {
            let spec = CorpusSpec {
                num_speakers: 2,
                num_emotions: 2,
                pairs_per_stratum: 5,
                noise_sigma: 0.1,
                seed,
                ..CorpusSpec::default()
            };
            let corpus = generate_corpus(&spec).unwrap();
            let gt = corpus.ground_truth.as_ref().unwrap();
            let enc = Encoder::frozen_orthonormal(spec.feature_dim, spec.embed_dim, &mut rng::stream(seed, "extractor"))
                .unwrap();
            let planted = enc.image(gt.emotion_directions.row(1)).unwrap();
            for (k, m) in mean.iter_mut().enumerate() {
                let (emb, _) = extract_emotion(&enc, &corpus, &corpus.pairs, 1, k + 1).unwrap();
                *m += emb.vector.cosine(&planted) / seeds as f64;
            }
        }
        assert!(mean.windows(2).all(|w| w[1] >= w[0]), "{mean:?}");
    }

    #[test]
    fn orthonormal_extractor_has_orthonormal_columns() {
        let mut r = rng::stream(3, "extractor");
        let enc = Encoder::frozen_orthonormal(8, 5, &mut r).unwrap();
        let gram = enc.projection.transpose().unwrap().matmul(&enc.projection).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram.get(i, j) - expect).abs() < 1e-12);
            }
        }
        assert!(Encoder::frozen_orthonormal(4, 5, &mut r).is_err());
    }
}
