//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p emoflow-cli --test acceptance`.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng as _;

use emoflow_core::conditioning::{cross_attend, CrossAttention};
use emoflow_core::disentangle::{orthogonality_value, EmbeddingBatch, OrthMode};
use emoflow_core::encoders::{extract_emotion, Encoder};
use emoflow_core::flowmatch::{cfm_loss, euler_sample, noise, FlowBatch, VectorFieldNet, VelocityField};
use emoflow_core::harness::gradsuite::{run_suite, SUITE_SEEDS};
use emoflow_core::harness::{evaluate, train, EvalReport, TrainConfig, Variant};
use emoflow_core::optim::Adam;
use emoflow_core::synthdata::{generate_corpus, CorpusSpec};
use emoflow_core::{rng, Graph, Result, Tensor, Var};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn gradient_suite() -> Result<Outcome> {
    let t = Instant::now();
    let rows = run_suite(&SUITE_SEEDS)?;
    let worst = rows.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed).map(|r| format!("{}@{}", r.check, r.seed)).collect();
    let el = t.elapsed();
    Ok(outcome(
        failed.is_empty() && within(el, 60.0),
        format!("{} rows, worst rel err {worst:.2e}, failed {failed:?}, {:.1}s", rows.len(), el.as_secs_f64()),
    ))
}

fn orthogonality_identities() -> Result<Outcome> {
    let orth = |s: &[&[f64]], e: &[&[f64]]| -> Result<f64> {
        let rows = |x: &[&[f64]]| Tensor::from_rows(&x.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
        orthogonality_value(&EmbeddingBatch::unlabeled(rows(s)?, rows(e)?)?, OrthMode::Default)
    };
    let zero = orth(
        &[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]],
        &[&[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]],
    )?;
    let two = orth(&[&[3.0, 4.0]], &[&[3.0, 4.0]])?;
    Ok(outcome(
        zero.abs() <= 1e-10 && (two - 2.0).abs() <= 1e-10,
        format!("orthogonal batch {zero:e}, identical B=1 {two}"),
    ))
}

fn recovery_cosine(spec: &CorpusSpec) -> Result<f64> {
    let corpus = generate_corpus(spec)?;
    let gt = corpus.ground_truth.as_ref().expect("generated corpus has ground truth");
    let enc = Encoder::frozen_orthonormal(spec.feature_dim, spec.embed_dim, &mut rng::stream(spec.seed, "extractor"))?;
    let mut total = 0.0;
    for emo in 1..spec.num_emotions {
        let (emb, _) = extract_emotion(&enc, &corpus, &corpus.pairs, emo, 10)?;
        total += emb.vector.cosine(&enc.image(gt.emotion_directions.row(emo))?);
    }
    Ok(total / (spec.num_emotions - 1) as f64)
}

fn rotational_recovery() -> Result<Outcome> {
    let t = Instant::now();
    let noiseless = CorpusSpec {
        noise_sigma: 0.0,
        ..CorpusSpec::default()
    };
    let clean = recovery_cosine(&noiseless)?;
    let mut noisy = 0.0;
    for seed in 0..20 {
        noisy += recovery_cosine(&CorpusSpec {
            noise_sigma: 0.1,
            seed,
            ..CorpusSpec::default()
        })? / 20.0;
    }
    let el = t.elapsed();
    Ok(outcome(
        clean >= 0.99 && noisy >= 0.95 && within(el, 30.0),
        format!("noiseless {clean:.6}, sigma=0.1 mean over 20 seeds {noisy:.6}, {:.1}s", el.as_secs_f64()),
    ))
}

struct SeedRun {
    v1: EvalReport,
    v2: EvalReport,
    v2_time: Duration,
}

fn run_variant(variant: Variant, seed: u64) -> Result<(EvalReport, Duration)> {
    let t = Instant::now();
    let mut cfg = TrainConfig {
        variant,
        seed,
        ..TrainConfig::default()
    };
    cfg.corpus_spec.seed = seed;
    let corpus = cfg.resolve_corpus()?;
    let out = train(&cfg, &corpus)?;
    let report = evaluate(&out.model, &corpus, &out.train, &out.eval, &cfg)?;
    Ok((report, t.elapsed()))
}

fn seed_runs() -> Result<Vec<SeedRun>> {
    (0..10)
        .map(|seed| {
            let (v2, v2_time) = run_variant(Variant::V2, seed)?;
            let (v1, _) = run_variant(Variant::V1, seed)?;
            println!(
                "  seed {seed}: v2 cos {:.4} emo {:.3} spk {:.3} ({:.1}s) | v1 cos {:.4}",
                v2.mean_abs_cross_cosine,
                v2.emotion_probe_acc,
                v2.speaker_probe_acc,
                v2_time.as_secs_f64(),
                v1.mean_abs_cross_cosine
            );
            Ok(SeedRun { v1, v2, v2_time })
        })
        .collect()
}

fn disentanglement(runs: &[SeedRun]) -> Outcome {
    let good = runs
        .iter()
        .filter(|r| {
            r.v2.mean_abs_cross_cosine < 0.1
                && r.v2.emotion_probe_acc >= 0.9
                && r.v2.speaker_probe_acc >= 0.9
                && within(r.v2_time, 300.0)
        })
        .count();
    let slowest = runs.iter().map(|r| r.v2_time.as_secs_f64()).fold(0.0, f64::max);
    outcome(good >= 8, format!("{good}/10 seeds meet all thresholds, slowest {slowest:.1}s"))
}

fn ablation_direction(runs: &[SeedRun]) -> Outcome {
    let good = runs
        .iter()
        .filter(|r| r.v2.mean_abs_cross_cosine <= r.v1.mean_abs_cross_cosine)
        .count();
    outcome(good >= 8, format!("v2 <= v1 on {good}/10 seeds"))
}

/// Returns the same tensor for every input.
struct Constant(Tensor);

impl VelocityField for Constant {
    fn forward(&self, g: &mut Graph, x_t: Var, _t: Var, _c: Option<Var>) -> Result<Var> {
        let rows = g.value(x_t).rows();
        let row = g.leaf(self.0.clone());
        g.repeat_rows(row, rows)
    }
}

fn flow_matching() -> Result<Outcome> {
    let mut r = rng::stream(0, "acceptance-flow");
    let mean = [1.5, -0.75];
    let std = [0.5, 0.3];
    let mut net = VectorFieldNet::random(2, 0, 32, &mut r);
    let mut opt = Adam::new(3e-3);
    for _ in 0..1500 {
        let z = noise(128, 2, &mut r);
        let x1 = Tensor::matrix(
            128,
            2,
            z.data().iter().enumerate().map(|(k, v)| mean[k % 2] + std[k % 2] * v).collect(),
        )?;
        let batch = FlowBatch::sample(x1, &mut r)?;
        let mut g = Graph::new();
        let vars = emoflow_core::flowmatch::VectorFieldVars::bind(&mut g, &net);
        let loss = cfm_loss(&mut g, &vars, &batch, None)?;
        let grads = g.backward(loss)?;
        let gs: Vec<Tensor> = vars.vars().iter().map(|&v| grads.get(v)).collect();
        opt.step(&mut net.params_mut(), &gs)?;
    }
    let draws = euler_sample(&net, &noise(1000, 2, &mut r), None, 50)?;
    let sample_mean = draws.mean_rows()?;
    let dist = ((sample_mean.data()[0] - mean[0]).powi(2) + (sample_mean.data()[1] - mean[1]).powi(2)).sqrt();

    let zero = VectorFieldNet {
        w3: Tensor::zeros(net.w3.shape()),
        b3: Tensor::zeros(net.b3.shape()),
        ..net.clone()
    };
    let x0 = noise(16, 2, &mut r);
    let zero_exact = euler_sample(&zero, &x0, None, 50)? == x0;

    let c = Tensor::row_vector(vec![0.75, -1.25]);
    let mut const_err: f64 = 0.0;
    for steps in [1, 10, 100] {
        let out = euler_sample(&Constant(c.clone()), &x0, None, steps)?;
        for (k, (o, x)) in out.data().iter().zip(x0.data()).enumerate() {
            const_err = const_err.max((o - (x + c.data()[k % 2])).abs());
        }
    }
    Ok(outcome(
        dist < 0.1 && zero_exact && const_err <= 1e-12,
        format!(
            "2D mean error {dist:.4}, net=0 bit-exact {zero_exact}, constant-field max err {const_err:.1e} (steps 1/10/100)"
        ),
    ))
}

fn attention_contract() -> Result<Outcome> {
    let mut r = rng::stream(0, "acceptance-attention");
    let mut worst_sum: f64 = 0.0;
    let mut masked_nonzero = 0;
    for _ in 0..100 {
        let l = r.random_range(1..=16);
        let d = r.random_range(1..=8);
        let mut mask: Vec<bool> = (0..l).map(|_| r.random_bool(0.6)).collect();
        let keep = r.random_range(0..l);
        mask[keep] = true;
        let ca = CrossAttention::random(d, &mut r);
        let e = Tensor::randn(&[d], 1.0, &mut r);
        let h = Tensor::randn(&[l, d], 1.0, &mut r);
        let (_, w) = cross_attend(&ca, &e, &h, &mask)?;
        let total: f64 = w.data().iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
        worst_sum = worst_sum.max((total - 1.0).abs());
        masked_nonzero += w.data().iter().zip(&mask).filter(|(v, &m)| !m && **v != 0.0).count();
    }
    Ok(outcome(
        worst_sum <= 1e-9 && masked_nonzero == 0,
        format!("100 cases, max |sum-1| {worst_sum:.1e}, nonzero masked weights {masked_nonzero}"),
    ))
}

fn run_cli(args: &[&str], out: &Path) -> std::result::Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_emoflow"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&status.stderr).into_owned())
    }
}

fn determinism() -> std::result::Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let read = |p: &Path| fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    let mut same = Vec::new();
    for (cmd, file) in [("train", "report.json"), ("ablate", "ablation.csv")] {
        let a = dir.path().join(format!("{cmd}-a"));
        let b = dir.path().join(format!("{cmd}-b"));
        for out in [&a, &b] {
            run_cli(&[cmd, "--seed", "7"], out)?;
        }
        same.push((file, read(&a.join(file))? == read(&b.join(file))?));
    }
    Ok(outcome(same.iter().all(|(_, s)| *s), format!("byte-identical: {same:?}")))
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, result: std::result::Result<Outcome, String>| {
        let (passed, detail) = match result {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failures += 1;
        }
        println!("{} [{n}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    };
    let s = |r: Result<Outcome>| r.map_err(|e| e.to_string());

    report(1, "gradient suite", s(gradient_suite()));
    report(2, "orthogonality identities", s(orthogonality_identities()));
    report(3, "rotational recovery", s(rotational_recovery()));
    match seed_runs() {
        Ok(runs) => {
            report(4, "disentanglement end-to-end", Ok(disentanglement(&runs)));
            report(5, "ablation direction", Ok(ablation_direction(&runs)));
        }
        Err(e) => {
            report(4, "disentanglement end-to-end", Err(e.to_string()));
            report(5, "ablation direction", Err(e.to_string()));
        }
    }
    report(6, "flow-matching sanity", s(flow_matching()));
    report(7, "attention contract", s(attention_contract()));
    report(8, "determinism", determinism());

    println!("{} of 8 criteria passed", 8 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
