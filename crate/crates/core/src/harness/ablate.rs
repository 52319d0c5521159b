use std::fmt::Write as _;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalReport};
use super::train::train;
use super::{TrainConfig, Variant};
use crate::error::Result;
use crate::synthdata::Corpus;

pub const ABLATION_COLUMNS: [&str; 12] = [
    "variant",
    "status",
    "mean_abs_cross_cosine",
    "emotion_probe_acc",
    "speaker_probe_acc",
    "direction_recovery_cosine",
    "loss_total",
    "loss_cfm",
    "loss_orth",
    "loss_contrast",
    "corpus_hash",
    "error",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub corpus_hash: String,
    pub rows: Vec<AblationRow>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = ABLATION_COLUMNS.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = match &row.report {
                Some(r) => vec![
                    row.variant.to_string(),
                    "ok".into(),
                    r.mean_abs_cross_cosine.to_string(),
                    r.emotion_probe_acc.to_string(),
                    r.speaker_probe_acc.to_string(),
                    r.direction_recovery_cosine.map(|v| v.to_string()).unwrap_or_default(),
                    r.losses.total.to_string(),
                    r.losses.cfm.to_string(),
                    r.losses.orth.to_string(),
                    r.losses.contrast.to_string(),
                    self.corpus_hash.clone(),
                    String::new(),
                ],
                None => {
                    let mut cells = vec![row.variant.to_string(), "failed".into()];
                    cells.extend(std::iter::repeat_n(String::new(), 8));
                    cells.push(self.corpus_hash.clone());
                    cells.push(row.error.clone().unwrap_or_default());
                    cells
                }
            };
            let cells: Vec<String> = cells.iter().map(|c| csv_field(c)).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

/// Trains and evaluates each variant with otherwise identical settings. A
/// failing variant is recorded and the others still run.
pub fn ablate(base: &TrainConfig, corpus: &Corpus, variants: &[Variant]) -> AblationTable {
    let rows = variants
        .iter()
        .map(|&variant| {
            let cfg = TrainConfig {
                variant,
                ..base.clone()
            };
            info!("ablation: {variant}");
            let run = || -> Result<EvalReport> {
                let out = train(&cfg, corpus)?;
                evaluate(&out.model, corpus, &out.train, &out.eval, &cfg)
            };
            match run() {
                Ok(report) => AblationRow {
                    variant,
                    report: Some(report),
                    error: None,
                },
                Err(e) => {
                    warn!("ablation {variant} failed: {e}");
                    AblationRow {
                        variant,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    AblationTable {
        corpus_hash: corpus.content_hash(),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ModelConfig;
    use crate::synthdata::CorpusSpec;

    fn cfg() -> TrainConfig {
        TrainConfig {
            steps: 5,
            batch_size: 8,
            eval_pairs: 2,
            corpus_spec: CorpusSpec {
                num_speakers: 2,
                num_emotions: 3,
                frames: 4,
                feature_dim: 8,
                embed_dim: 4,
                pairs_per_stratum: 6,
                ..CorpusSpec::default()
            },
            model: ModelConfig {
                hidden: 8,
                vocab: 6,
                max_len: 4,
                min_len: 2,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn every_variant_gets_a_row() {
        let cfg = cfg();
        let corpus = cfg.resolve_corpus().unwrap();
        let table = ablate(&cfg, &corpus, &Variant::ALL);
        assert_eq!(table.rows.len(), 4);
        assert!(table.rows.iter().all(|r| r.report.is_some()));
        let csv = table.to_csv();
        assert_eq!(csv.lines().count(), 5);
        for line in csv.lines() {
            assert_eq!(line.split(',').count(), ABLATION_COLUMNS.len(), "{line}");
        }
        assert_eq!(csv, ablate(&cfg, &corpus, &Variant::ALL).to_csv());
    }

    #[test]
    fn failing_variant_is_recorded() {
        let mut cfg = cfg();
        cfg.eval_pairs = 1000;
        let corpus = cfg.resolve_corpus().unwrap();
        let table = ablate(&cfg, &corpus, &[Variant::V1, Variant::V2]);
        for row in &table.rows {
            assert!(row.report.is_none());
            assert!(row.error.as_deref().unwrap().contains("pairs"));
        }
        let csv = table.to_csv();
        assert!(csv.lines().nth(1).unwrap().starts_with("v1,failed,"));
    }
}
