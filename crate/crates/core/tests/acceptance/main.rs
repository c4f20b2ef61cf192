//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero when any hard criterion fails.

mod oracle;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protolens::alignment::{align_prototype, AlignmentConfig};
use protolens::baseline::{baseline_tfidf_logreg, BaselineConfig};
use protolens::checkpoint;
use protolens::config::TrainConfig;
use protolens::data::{generate_synthetic, Instance, SyntheticCorpus, SyntheticSpec};
use protolens::experiments::{run_ablation, sweep, SweepParam};
use protolens::model::{Architecture, InitScales, Model};
use protolens::objectives::{grad_check, total_loss, Example, LossConfig};
use protolens::report::span_agreement;
use protolens::span::{span_mask, stick_break};
use protolens::trainer::{evaluate, gradcheck_setup, train, Trained};

const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const PROPERTY_DRAWS: usize = 1000;
const STICK_SUM_TOL: f64 = 1e-9;
const RAMP_TOL: f64 = 1e-9;
const ALIGN_TOL: f64 = 1e-6;
const ORACLE_TOL: f64 = 1e-10;
const E2E_ACCURACY: f64 = 0.90;
const E2E_OVERLAP: f64 = 0.60;
const E2E_BUDGET: Duration = Duration::from_secs(5 * 60);
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const BASELINE_ACCURACY: f64 = 0.95;
const BASELINE_GAP: f64 = 0.05;
const SWEEP_BUDGET: Duration = Duration::from_secs(15 * 60);

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: &'static str, pass: bool, detail: String) -> Outcome {
    println!("[{}] {id} {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, pass, detail }
}

fn error(id: &'static str, e: impl std::fmt::Display) -> Outcome {
    outcome(id, false, format!("error: {e}"))
}

fn c1_grad_check() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig::gradcheck();
    let report = match gradcheck_setup(&cfg).and_then(|(model, batch)| grad_check(&model, &batch, &cfg.loss, GRAD_STEP, GRAD_TOL)) {
        Ok(r) => r,
        Err(e) => return error("C1", e),
    };
    let elapsed = start.elapsed();
    let worst = report
        .groups
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .unwrap_or_default();
    outcome(
        "C1",
        report.passed() && elapsed < GRAD_BUDGET,
        format!(
            "grad_check: {} groups, worst {worst}, failing {:?}, {:.2}s",
            report.groups.len(),
            report.failures(),
            elapsed.as_secs_f64()
        ),
    )
}

fn c2_stick_breaking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0;
    let mut worst_sum: f64 = 0.0;
    for _ in 0..PROPERTY_DRAWS {
        let m = rng.random_range(1..=12);
        let nu: Vec<f64> = (0..m).map(|_| rng.random_range(1e-6..1.0 - 1e-6)).collect();
        let (raw, norm) = stick_break(&nu);
        let total: f64 = raw.iter().sum();
        let norm_err = (norm.iter().sum::<f64>() - 1.0).abs();
        worst_sum = worst_sum.max(norm_err);
        if raw.iter().any(|&w| w < 0.0) || !(total < 1.0) || norm_err > STICK_SUM_TOL {
            bad += 1;
        }
    }
    let (raw, _) = stick_break(&[0.5, 0.5, 0.5]);
    let exact = raw == [0.5, 0.25, 0.125];
    outcome(
        "C2",
        bad == 0 && exact,
        format!("stick-breaking: {bad}/{PROPERTY_DRAWS} violations, max |sum(pi_norm)-1| {worst_sum:.1e}, half-sticks exact {exact}"),
    )
}

fn c3_span_shape() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = Vec::new();
    let mut worst_second: f64 = 0.0;
    for draw in 0..PROPERTY_DRAWS {
        let t_len = rng.random_range(1..=64usize);
        let mu = rng.random_range(-2.0..t_len as f64 + 3.0);
        let sigma = rng.random_range(1e-3..10.0);
        let r = rng.random_range(0.05..6.0);
        let soft = match span_mask(mu, sigma, r, t_len) {
            Ok(m) => m.soft,
            Err(e) => return error("C3", e),
        };
        let dist = |i: usize| (mu - (i + 1) as f64).abs();
        let on_ramp = |i: usize| dist(i) > sigma && dist(i) < sigma + r;
        let side = |i: usize| (i + 1) as f64 > mu;
        let mut ok = true;
        for (i, &v) in soft.iter().enumerate() {
            if dist(i) <= sigma && v != 1.0 {
                ok = false;
            }
            if dist(i) >= sigma + r && v != 0.0 {
                ok = false;
            }
            if i > 0 && (v - soft[i - 1]).abs() > 1.0 / r + 1e-12 {
                ok = false;
            }
            if i >= 2 && (i - 2..=i).all(on_ramp) && side(i) == side(i - 2) {
                let second = (soft[i] - 2.0 * soft[i - 1] + soft[i - 2]).abs();
                worst_second = worst_second.max(second);
                if second > RAMP_TOL {
                    ok = false;
                }
            }
        }
        if !ok {
            bad.push(draw);
        }
    }
    outcome(
        "C3",
        bad.is_empty(),
        format!(
            "span function: {}/{PROPERTY_DRAWS} violations, max ramp second difference {worst_second:.1e}",
            bad.len()
        ),
    )
}

fn c4_alignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>();
    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let mut bad = 0;
    let mut worst_fixed: f64 = 0.0;
    let mut worst_same: f64 = 0.0;
    for _ in 0..PROPERTY_DRAWS {
        let dim = rng.random_range(1..=16);
        let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cfg = AlignmentConfig {
            tau: rng.random_range(0.01..2.0),
            gamma: rng.random_range(0.1..50.0),
            ..AlignmentConfig::default()
        };
        let out = align_prototype(&p, &c, &cfg);
        let moved = sub(&out, &p);
        let toward = sub(&c, &p);
        let d = norm(&toward);
        let step = norm(&moved);
        let colinear = step < 1e-12 || {
            let cos = moved.iter().zip(&toward).map(|(a, b)| a * b).sum::<f64>() / (step * d);
            (cos - 1.0).abs() <= ALIGN_TOL
        };
        let in_range = step >= cfg.tau.min(d) - ALIGN_TOL && step <= cfg.tau.max(d) + ALIGN_TOL;

        let at_tau: Vec<f64> = p.iter().zip(&toward).map(|(pi, u)| pi + cfg.tau * u / d).collect();
        let fixed = max_diff(&align_prototype(&p, &at_tau, &cfg), &at_tau);
        let same = max_diff(&align_prototype(&c, &c, &cfg), &c);
        worst_fixed = worst_fixed.max(fixed);
        worst_same = worst_same.max(same);
        if !colinear || !in_range || fixed > ALIGN_TOL || same > 1e-12 {
            bad += 1;
        }
    }
    outcome(
        "C4",
        bad == 0,
        format!(
            "alignment: {bad}/{PROPERTY_DRAWS} violations, max |align(p, c_tau) - c_tau| {worst_fixed:.1e}, max |align(c, c) - c| {worst_same:.1e}"
        ),
    )
}

fn oracle_model() -> protolens::Result<Model> {
    let arch = Architecture {
        num_prototypes: 3,
        num_classes: 2,
        embed_dim: 8,
        hash_dim: 64,
        n_gram: 2,
        t_max: 8,
        mlp_hidden: 4,
        components: 2,
        span_smoothness: 2.0,
        union_mask: false,
    };
    let init = InitScales {
        encoder_std: 0.5,
        head_std: 1.0,
        sigma_bias: 0.5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = Model::new(arch, &init, &mut rng)?;
    let bank = &mut model.params.bank;
    bank.prototypes.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    bank.head_bias.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    bank.rms_gain.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
    Ok(model)
}

fn c5_oracle() -> Outcome {
    let model = match oracle_model() {
        Ok(m) => m,
        Err(e) => return error("C5", e),
    };
    let batch = [
        ("the plot was a waste of time", 0usize),
        ("a great cast overall made it fun", 1usize),
    ];
    let dims = oracle::dims(&model);
    let raw = oracle::raw(&model);
    let mut worst: f64 = 0.0;
    let mut track = |a: &[f64], b: &[f64]| {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs());
        }
    };
    let mut texts: Vec<&str> = batch.iter().map(|(t, _)| *t).collect();
    texts.push("short");
    for text in &texts {
        let lib = match model.forward(text) {
            Ok(f) => f,
            Err(e) => return error("C5", e),
        };
        let ora = oracle::forward(&dims, &raw, text);
        for (k, trace) in lib.prototypes.iter().enumerate() {
            let mix = &trace.mixture.params;
            track(&trace.curve, &ora.curves[k]);
            track(&mix.pi_raw, &ora.pi_raw[k]);
            track(&mix.pi_norm, &ora.pi_norm[k]);
            track(&mix.mu, &ora.mu[k]);
            track(&mix.sigma, &ora.sigma[k]);
            track(&trace.mask.soft, &ora.masks[k]);
        }
        track(&lib.similarity.raw, &ora.raw_sim);
        track(&lib.similarity.normalized, &ora.norm_sim);
        track(&lib.logits, &ora.logits);
        track(&lib.probabilities, &ora.probs);
    }
    let cfg = LossConfig::default();
    let examples: protolens::Result<Vec<Example>> = batch.iter().map(|(t, l)| Example::new(&model, t, *l)).collect();
    let lib = match examples.and_then(|ex| total_loss(&ex, &model, &cfg)) {
        Ok(l) => l,
        Err(e) => return error("C5", e),
    };
    let ora = oracle::loss(&dims, &raw, &batch, cfg.alpha, cfg.beta, cfg.lambda_l1, cfg.eps_nll);
    track(&[lib.ce, lib.gmm, lib.div, lib.total], &[ora.ce, ora.gmm, ora.div, ora.total]);
    outcome(
        "C5",
        worst <= ORACLE_TOL,
        format!("oracle: max abs difference {worst:.1e} over forward traces and total_loss (total {:.6})", ora.total),
    )
}

fn e2e_config() -> TrainConfig {
    TrainConfig {
        num_prototypes: 4,
        n_gram: 3,
        embed_dim: 32,
        components: 4,
        epochs: 25,
        batch_size: 16,
        learning_rate: 1e-4,
        seed: 0,
        ..TrainConfig::default()
    }
}

fn e2e_corpus() -> protolens::Result<SyntheticCorpus> {
    generate_synthetic(&SyntheticSpec::two_class(400, 100, 42))
}

fn c6_end_to_end(corpus: &SyntheticCorpus) -> (Outcome, Option<(Trained, f64)>) {
    let start = Instant::now();
    let out = match train(&e2e_config(), &corpus.train, None) {
        Ok(o) => o,
        Err(e) => return (error("C6", e), None),
    };
    let elapsed = start.elapsed();
    let annotations: Vec<_> = corpus.test_annotations().collect();
    let (acc, agreement) = match evaluate(&out.model, &corpus.test)
        .and_then(|ev| Ok((ev.accuracy, span_agreement(&out.model, &corpus.test, &annotations)?)))
    {
        Ok(v) => v,
        Err(e) => return (error("C6", e), None),
    };
    let o = outcome(
        "C6",
        acc >= E2E_ACCURACY && agreement.overlap_rate() >= E2E_OVERLAP && elapsed < E2E_BUDGET,
        format!(
            "synthetic end-to-end: test accuracy {acc:.3}, span overlap {:.3} of {} correct, contained {:.3}, mean span width {:.1}/{:.1} parts, {:.1}s",
            agreement.overlap_rate(),
            agreement.correct,
            agreement.contained_rate(),
            agreement.mean_width,
            agreement.mean_parts,
            elapsed.as_secs_f64()
        ),
    );
    (o, Some((out, acc)))
}

fn c7_ablation(corpus: &SyntheticCorpus) -> (Outcome, bool) {
    let report = match run_ablation(&e2e_config(), &corpus.train, &corpus.test, &ABLATION_SEEDS) {
        Ok(r) => r,
        Err(e) => return (error("C7", e), true),
    };
    let get = |n: &str| report.variant(n).expect("ablation variant");
    let (full, no_align, no_div) = (get("full"), get("no_alignment"), get("no_diversity"));
    let soft_ok = full.mean_accuracy() >= no_align.mean_accuracy() && full.mean_accuracy() >= no_div.mean_accuracy();
    let cos_ok = full.mean_prototype_cosine() < no_div.mean_prototype_cosine();
    let o = outcome(
        "C7",
        cos_ok,
        format!(
            "ablation over seeds {ABLATION_SEEDS:?}: accuracy full {:.4} / no_alignment {:.4} / no_diversity {:.4} (soft direction {}); prototype cosine full {:+.4} vs no_diversity {:+.4}",
            full.mean_accuracy(),
            no_align.mean_accuracy(),
            no_div.mean_accuracy(),
            if soft_ok { "holds" } else { "VIOLATED" },
            full.mean_prototype_cosine(),
            no_div.mean_prototype_cosine()
        ),
    );
    (o, soft_ok)
}

fn c8_baseline(corpus: &SyntheticCorpus, protolens_acc: Option<f64>) -> Outcome {
    let base = match baseline_tfidf_logreg(&corpus.train, &corpus.test, &BaselineConfig::default()) {
        Ok(a) => a,
        Err(e) => return error("C8", e),
    };
    let Some(acc) = protolens_acc else {
        return outcome("C8", false, format!("baseline {base:.3}; no model accuracy available"));
    };
    outcome(
        "C8",
        base >= BASELINE_ACCURACY && acc >= base - BASELINE_GAP,
        format!("TF-IDF + logistic regression {base:.3}, model {acc:.3} (gap {:+.3})", acc - base),
    )
}

fn c9_determinism(corpus: &SyntheticCorpus, first: Option<&Trained>) -> Outcome {
    let Some(first) = first else {
        return outcome("C9", false, "no reference run available".into());
    };
    let run = || -> protolens::Result<(bool, bool, bool)> {
        let cfg = e2e_config();
        let second = train(&cfg, &corpus.train, None)?;
        let same_history = second.history == first.history;
        let bytes_a = checkpoint::to_bytes(&first.model, &cfg, &first.history)?;
        let bytes_b = checkpoint::to_bytes(&second.model, &cfg, &second.history)?;
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("model.ckpt");
        checkpoint::save(&path, &first.model, &cfg, &first.history)?;
        let loaded = checkpoint::load(&path)?;
        let before = evaluate(&first.model, &corpus.test)?;
        let after = evaluate(&loaded.model, &corpus.test)?;
        let preserved = before.accuracy == after.accuracy && before.predictions == after.predictions;
        Ok((same_history, bytes_a == bytes_b, preserved))
    };
    match run() {
        Ok((h, b, p)) => outcome(
            "C9",
            h && b && p,
            format!("determinism: identical history {h}, identical checkpoint bytes {b}, save/load preserves evaluation {p}"),
        ),
        Err(e) => error("C9", e),
    }
}

fn c10_sweep(corpus: &SyntheticCorpus) -> Outcome {
    let start = Instant::now();
    let (train_set, val): (Vec<Instance>, Vec<Instance>) = {
        let cut = corpus.train.len() * 4 / 5;
        (corpus.train[..cut].to_vec(), corpus.train[cut..].to_vec())
    };
    let mut lines = Vec::new();
    let mut ok = true;
    for (param, values) in [(SweepParam::NGram, [1, 3, 5]), (SweepParam::Prototypes, [2, 4, 8])] {
        match sweep(&e2e_config(), param, &values, &train_set, Some(&val), &corpus.test) {
            Ok(report) => {
                ok &= report.is_well_formed();
                let accs: Vec<String> = report.points.iter().map(|p| format!("{}={:.3}", p.value, p.test_accuracy)).collect();
                lines.push(format!("{} [{}]", param.name(), accs.join(" ")));
            }
            Err(e) => return error("C10", e),
        }
    }
    let elapsed = start.elapsed();
    outcome(
        "C10",
        ok && elapsed < SWEEP_BUDGET,
        format!("sweep: {}, well-formed {ok}, {:.1}s", lines.join("; "), elapsed.as_secs_f64()),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results = vec![c1_grad_check(), c2_stick_breaking(), c3_span_shape(), c4_alignment(), c5_oracle()];
    let corpus = match e2e_corpus() {
        Ok(c) => c,
        Err(e) => {
            println!("[FAIL] corpus generation: {e}");
            return ExitCode::FAILURE;
        }
    };
    let (c6, trained) = c6_end_to_end(&corpus);
    results.push(c6);
    let (c7, soft_ok) = c7_ablation(&corpus);
    results.push(c7);
    results.push(c8_baseline(&corpus, trained.as_ref().map(|t| t.1)));
    results.push(c9_determinism(&corpus, trained.as_ref().map(|t| &t.0)));
    results.push(c10_sweep(&corpus));

    let failed: Vec<&Outcome> = results.iter().filter(|o| !o.pass).collect();
    println!(
        "\n{}/{} criteria passed in {:.1}s{}",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64(),
        if soft_ok { "" } else { "; C7 accuracy direction not met (soft)" }
    );
    for o in &failed {
        println!("failed: {} {}", o.id, o.detail);
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
