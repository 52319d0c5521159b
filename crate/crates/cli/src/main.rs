//! `emoflow`: reproducible experiments over the emotion-conditioning stack.

mod config;
mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use emoflow_core::encoders::{extract_emotion, Encoder, DEFAULT_NUM_PAIRS};
use emoflow_core::harness::gradsuite::{run_suite, SUITE_SEEDS};
use emoflow_core::harness::{ablate, evaluate, train, Model, RunReport, TrainConfig, Variant};
use emoflow_core::rng;
use emoflow_core::synthdata::{generate_corpus, split, Corpus, CorpusSpec, NEUTRAL};

use crate::error::{CliError, CliResult};

const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "emoflow", version, about = "Emotion/speaker conditioning experiments on synthetic speech")]
struct Cli {
    /// Print errors to stderr as one JSON object.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file layered over the defaults.
    #[arg(long, visible_alias = "spec")]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set weights.lambda_orth=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired corpus.
    GenData(Common),
    /// Train one variant and evaluate it on the held-out split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<Variant>,
        /// Corpus directory; generated from the seed when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train and evaluate V1..V4 with shared settings.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Aggregate emotion embeddings from paired utterances with a frozen encoder.
    ExtractEmotion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Emotion id; every non-neutral emotion when absent.
        #[arg(long)]
        emotion: Option<usize>,
        /// Number of pairs to aggregate.
        #[arg(long, default_value_t = DEFAULT_NUM_PAIRS)]
        n: usize,
    },
    /// Evaluate a saved model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train` (or its `model/` subdirectory).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Finite-difference check of every loss gradient.
    GradCheck {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Check this seed only instead of the fixed suite seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train { .. } => "train",
            Command::Ablate { .. } => "ablate",
            Command::ExtractEmotion { .. } => "extract-emotion",
            Command::Eval { .. } => "eval",
            Command::GradCheck { .. } => "grad-check",
        }
    }

    fn out(&self) -> Option<&Path> {
        match self {
            Command::GenData(c)
            | Command::Train { common: c, .. }
            | Command::Ablate { common: c, .. }
            | Command::ExtractEmotion { common: c, .. }
            | Command::Eval { common: c, .. } => Some(&c.out),
            Command::GradCheck { out, .. } => out.as_deref(),
        }
    }
}

#[derive(Serialize, Debug)]
struct RunManifest {
    command: String,
    config: Value,
    seed: Option<u64>,
    corpus_hash: Option<String>,
    tool_version: String,
    outputs: Vec<String>,
    error: Option<Value>,
}

/// What a command has produced so far; becomes `manifest.json`.
struct Run {
    out: Option<PathBuf>,
    manifest: RunManifest,
}

impl Run {
    fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let out = self.out.as_ref().expect("command has an output directory");
        let path = out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes)?;
        self.manifest.outputs.push(rel.to_string());
        Ok(())
    }

    fn set_config(&mut self, config: &impl Serialize, seed: u64) {
        self.manifest.config = serde_json::to_value(config).expect("config serialises");
        self.manifest.seed = Some(seed);
    }

    fn set_corpus(&mut self, corpus: &Corpus) {
        self.manifest.corpus_hash = Some(corpus.content_hash());
    }
}

fn pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serialisable") + "\n"
}

fn seed_overrides(seed: Option<u64>, v: &mut Value, fields: &[&[&str]]) {
    if let Some(s) = seed {
        for path in fields {
            let mut node = &mut *v;
            for key in &path[..path.len() - 1] {
                node = &mut node[*key];
            }
            node[path[path.len() - 1]] = json!(s);
        }
    }
}

fn train_config(
    common: &Common,
    variant: Option<Variant>,
    corpus: Option<&PathBuf>,
    steps: Option<usize>,
) -> CliResult<TrainConfig> {
    let cfg: TrainConfig = config::resolve(common.config.as_deref(), &common.sets, |v| {
        seed_overrides(common.seed, v, &[&["seed"], &["corpus_spec", "seed"]]);
        if let Some(var) = variant {
            v["variant"] = json!(var);
        }
        if let Some(c) = corpus {
            v["corpus"] = json!(c);
        }
        if let Some(s) = steps {
            v["steps"] = json!(s);
        }
    })?;
    Ok(cfg)
}

fn validate(cfg: &TrainConfig) -> CliResult<()> {
    cfg.validate()?;
    cfg.corpus_spec.validate()?;
    Ok(())
}

fn load_corpus(run: &mut Run, cfg: &TrainConfig) -> CliResult<Corpus> {
    let corpus = cfg.resolve_corpus()?;
    run.set_corpus(&corpus);
    Ok(corpus)
}

fn cmd_gen_data(run: &mut Run, common: &Common) -> CliResult<()> {
    let spec: CorpusSpec = config::resolve(common.config.as_deref(), &common.sets, |v| {
        seed_overrides(common.seed, v, &[&["seed"]]);
    })?;
    run.set_config(&spec, spec.seed);
    spec.validate()?;
    let corpus = generate_corpus(&spec)?;
    run.set_corpus(&corpus);
    let files = corpus.save(&common.out)?;
    run.manifest.outputs.extend(files);
    println!("{} samples, {} pairs, hash {}", corpus.samples.len(), corpus.pairs.len(), corpus.content_hash());
    Ok(())
}

fn cmd_train(
    run: &mut Run,
    common: &Common,
    variant: Option<Variant>,
    corpus: Option<&PathBuf>,
    steps: Option<usize>,
) -> CliResult<()> {
    let cfg = train_config(common, variant, corpus, steps)?;
    run.set_config(&cfg, cfg.seed);
    validate(&cfg)?;
    let corpus = load_corpus(run, &cfg)?;
    let outcome = train(&cfg, &corpus)?;
    run.write("train_log.csv", outcome.log.to_csv())?;
    for file in outcome.model.save(&common.out.join("model"))? {
        run.manifest.outputs.push(format!("model/{file}"));
    }
    let report = evaluate(&outcome.model, &corpus, &outcome.train, &outcome.eval, &cfg)?;
    let full = RunReport {
        tool_version: TOOL_VERSION.into(),
        corpus_hash: corpus.content_hash(),
        config: cfg,
        report,
    };
    run.write("report.json", pretty(&full))?;
    let r = &full.report;
    println!(
        "{}: cross-cos {:.4}  emotion probe {:.3}  speaker probe {:.3}  recovery {}",
        full.config.variant,
        r.mean_abs_cross_cosine,
        r.emotion_probe_acc,
        r.speaker_probe_acc,
        r.direction_recovery_cosine.map_or("n/a".into(), |c| format!("{c:.4}"))
    );
    Ok(())
}

fn cmd_ablate(run: &mut Run, common: &Common, corpus: Option<&PathBuf>, steps: Option<usize>) -> CliResult<()> {
    let cfg = train_config(common, None, corpus, steps)?;
    run.set_config(&cfg, cfg.seed);
    validate(&cfg)?;
    let corpus = load_corpus(run, &cfg)?;
    let table = ablate(&cfg, &corpus, &Variant::ALL);
    let csv = table.to_csv();
    run.write("ablation.csv", &csv)?;
    print!("{csv}");
    let failed: Vec<String> = table
        .rows
        .iter()
        .filter(|r| r.report.is_none())
        .map(|r| r.variant.to_string())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("variant(s) failed: {}", failed.join(", "))))
    }
}

#[derive(Serialize)]
struct EmotionSidecar {
    emotion_id: usize,
    n: usize,
    pair_ids: Vec<usize>,
    skipped: usize,
    /// Cosine with the encoder image of the planted direction.
    oracle_cosine: Option<f64>,
}

fn cmd_extract_emotion(
    run: &mut Run,
    common: &Common,
    corpus_dir: Option<&PathBuf>,
    emotion: Option<usize>,
    n: usize,
) -> CliResult<()> {
    let spec: CorpusSpec = config::resolve(common.config.as_deref(), &common.sets, |v| {
        seed_overrides(common.seed, v, &[&["seed"]]);
    })?;
    let corpus = match corpus_dir {
        Some(dir) => Corpus::load(dir)?,
        None => {
            spec.validate()?;
            generate_corpus(&spec)?
        }
    };
    let seed = common.seed.unwrap_or(corpus.spec.seed);
    run.set_config(
        &json!({"corpus": corpus_dir, "corpus_spec": corpus.spec, "emotion": emotion, "n": n}),
        seed,
    );
    run.set_corpus(&corpus);
    let emotions: Vec<usize> = match emotion {
        Some(e) if e == NEUTRAL || e >= corpus.spec.num_emotions => {
            return Err(CliError::config(
                "--emotion",
                format!("must be in 1..{}, got {e}", corpus.spec.num_emotions),
            ))
        }
        Some(e) => vec![e],
        None => (1..corpus.spec.num_emotions).collect(),
    };
    let encoder = Encoder::frozen_orthonormal(
        corpus.spec.feature_dim,
        corpus.spec.embed_dim,
        &mut rng::stream(seed, "extractor"),
    )?;
    for e in emotions {
        let (emb, pair_ids) = extract_emotion(&encoder, &corpus, &corpus.pairs, e, n)?;
        let oracle_cosine = match &corpus.ground_truth {
            Some(gt) => Some(emb.vector.cosine(&encoder.image(gt.emotion_directions.row(e))?)),
            None => None,
        };
        run.write(&format!("emotion_{e}.tnsr"), emb.vector.to_tnsr_bytes())?;
        let sidecar = EmotionSidecar {
            emotion_id: e,
            n,
            pair_ids,
            skipped: emb.skipped,
            oracle_cosine,
        };
        run.write(&format!("emotion_{e}.json"), pretty(&sidecar))?;
        println!(
            "emotion {e}: {} pairs, oracle cosine {}",
            n,
            oracle_cosine.map_or("n/a".into(), |c| format!("{c:.6}"))
        );
    }
    Ok(())
}

fn cmd_eval(run: &mut Run, common: &Common, model_dir: &Path, corpus: Option<&PathBuf>) -> CliResult<()> {
    let cfg = train_config(common, None, corpus, None)?;
    run.set_config(&cfg, cfg.seed);
    validate(&cfg)?;
    let dir = if model_dir.join("model.json").exists() {
        model_dir.to_path_buf()
    } else {
        model_dir.join("model")
    };
    let model = Model::load(&dir)?;
    let corpus = load_corpus(run, &cfg)?;
    let (tr, ev) = split(&corpus, cfg.train_fraction, cfg.seed)?;
    let report = evaluate(&model, &corpus, &tr, &ev, &cfg)?;
    let full = RunReport {
        tool_version: TOOL_VERSION.into(),
        corpus_hash: corpus.content_hash(),
        config: cfg,
        report,
    };
    run.write("report.json", pretty(&full))?;
    println!("{}", serde_json::to_string_pretty(&full.report).expect("serialisable"));
    Ok(())
}

fn cmd_grad_check(run: &mut Run, seed: Option<u64>) -> CliResult<()> {
    let seeds = seed.map_or(SUITE_SEEDS.to_vec(), |s| vec![s]);
    run.manifest.config = json!({"seeds": seeds});
    run.manifest.seed = seed;
    let rows = run_suite(&seeds)?;
    println!("{:<24} {:>6} {:>12}  result", "check", "seed", "max_rel_err");
    for r in &rows {
        println!(
            "{:<24} {:>6} {:>12.3e}  {}",
            r.check,
            r.seed,
            r.max_error,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    if run.out.is_some() {
        run.write("gradcheck.json", pretty(&rows))?;
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

fn dispatch(cmd: &Command, run: &mut Run) -> CliResult<()> {
    match cmd {
        Command::GenData(c) => cmd_gen_data(run, c),
        Command::Train {
            common,
            variant,
            corpus,
            steps,
        } => cmd_train(run, common, *variant, corpus.as_ref(), *steps),
        Command::Ablate { common, corpus, steps } => cmd_ablate(run, common, corpus.as_ref(), *steps),
        Command::ExtractEmotion {
            common,
            corpus,
            emotion,
            n,
        } => cmd_extract_emotion(run, common, corpus.as_ref(), *emotion, *n),
        Command::Eval { common, model, corpus } => cmd_eval(run, common, model, corpus.as_ref()),
        Command::GradCheck { seed, .. } => cmd_grad_check(run, *seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut run = Run {
        out: cli.command.out().map(Path::to_path_buf),
        manifest: RunManifest {
            command: cli.command.name().into(),
            config: Value::Null,
            seed: None,
            corpus_hash: None,
            tool_version: TOOL_VERSION.into(),
            outputs: Vec::new(),
            error: None,
        },
    };
    let result = dispatch(&cli.command, &mut run);
    if let Err(e) = &result {
        run.manifest.error = Some(e.to_json());
    }
    if let Some(out) = &run.out {
        let written = fs::create_dir_all(out).and_then(|_| fs::write(out.join("manifest.json"), pretty(&run.manifest)));
        if let Err(e) = written {
            eprintln!("warning: could not write manifest: {e}");
        }
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if cli.json_errors {
                eprintln!("{}", json!({ "error": e.to_json() }));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
