//! Shared fixtures and independent oracles for the integration tests.
//!
//! Each `check_*` function verifies one acceptance criterion and returns a
//! short detail line, or the reason it failed.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qcoder_core::corpus::{InstructionSample, Source};
use qcoder_core::decode::{self, DecodingParams};
use qcoder_core::harness::{
    aggregate, canonical_mock, corrupt, emit_comparison, emit_report, evaluate, grid_run,
    load_tasks, merge_cells, pass_at_k, product_grid, BenchmarkTask, CellSpec, Executor,
    HarnessError, PythonSandbox, ReportFormat, RunOptions, SandboxConfig, Status, SuccessRule,
    TaskResult, DEFAULT_GRID,
};
use qcoder_core::retrieval::{
    build_index, embed, load_index, query_top_k, save_index, HashingEmbedder, RetrievalHit,
};
use qcoder_core::tinyformer::{
    self, attach_lora, batch_gradients, batch_loss, exact_recall, init_model, merge_adapters,
    toy_pairs, train_step, train_toy, unmerge_adapters, AdaptedModel, CharTokenizer, LoraConfig,
    Matrix, Model, ModelConfig, OptimizerState, Precision, Target, ToyRecipe, TrainConfig,
    TrainExample,
};
use qcoder_core::TaskCategory;

pub type Check = Result<String, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn stub_tasks() -> Vec<BenchmarkTask> {
    load_tasks(&data_dir().join("stub_tasks.jsonl")).expect("stub task pack loads")
}

// ---------------------------------------------------------------------------
// Report arithmetic

/// Recorded outcome counts at T = 0.5, top_p = 0.5 for three systems.
pub const COMPARISON_COUNTS: [(&str, usize, usize, f64); 3] = [
    ("fine-tuned", 117, 147, 44.32),
    ("base", 89, 175, 33.71),
    ("base+rag", 106, 158, 40.15),
];

/// Row-major over T in {0, 0.5, 1} and top_p in {0, 0.5, 1}.
pub const GRID_COUNTS: [(usize, usize, f64); 9] = [
    (112, 152, 42.42),
    (112, 152, 42.42),
    (114, 150, 43.18),
    (112, 152, 42.42),
    (117, 147, 44.32),
    (100, 164, 37.88),
    (102, 162, 38.64),
    (88, 176, 33.33),
    (15, 249, 5.68),
];

/// (solved, total, accuracy) in `TaskCategory::ALL` order.
pub const CATEGORY_COUNTS: [(usize, usize, f64); 6] = [
    (52, 109, 47.71),
    (26, 67, 38.81),
    (13, 37, 35.14),
    (17, 40, 42.5),
    (4, 8, 50.0),
    (0, 3, 0.0),
];

/// One single-completion result per task: `success` passing, `failed` not.
pub fn synthetic_results(
    success: usize,
    failed: usize,
    category: TaskCategory,
    prefix: &str,
) -> Vec<TaskResult> {
    (0..success + failed)
        .map(|i| {
            TaskResult::from_counts(
                format!("{prefix}-{i:04}"),
                category,
                1,
                usize::from(i < success),
            )
        })
        .collect()
}

/// Numbers on the `Accuracy (%)` row of a text table.
pub fn accuracy_row(table: &str) -> Vec<f64> {
    table
        .lines()
        .find(|l| l.starts_with("Accuracy (%)"))
        .map(|l| {
            l.split_whitespace()
                .skip(2)
                .map(|v| v.parse().expect("numeric cell"))
                .collect()
        })
        .unwrap_or_default()
}

fn close(got: &[f64], want: &[f64], tol: f64) -> Result<(), String> {
    ensure(
        got.len() == want.len() && got.iter().zip(want).all(|(g, w)| (g - w).abs() <= tol),
        || format!("got {got:?}, expected {want:?}"),
    )
}

pub fn check_reported_arithmetic() -> Check {
    let started = Instant::now();
    let rule = SuccessRule::default();

    // Three systems side by side, each aggregated from per-task results.
    let mut columns = Vec::new();
    for (name, s, f, _) in COMPARISON_COUNTS {
        let report = aggregate(
            &synthetic_results(s, f, TaskCategory::BasicCircuits, name),
            rule,
            &[1],
        )
        .map_err(|e| e.to_string())?;
        columns.push((name.to_string(), report.overall));
    }
    let want: Vec<f64> = COMPARISON_COUNTS.iter().map(|c| c.3).collect();
    close(
        &accuracy_row(&emit_comparison(&columns, ReportFormat::TextTable)),
        &want,
        0.01,
    )
    .map_err(|e| format!("comparison table: {e}"))?;

    // Nine decoding cells merged into one report.
    let cells: Vec<(CellSpec, _)> = product_grid(&DEFAULT_GRID, &DEFAULT_GRID)
        .into_iter()
        .zip(GRID_COUNTS)
        .map(|(spec, (s, f, _))| {
            let results = synthetic_results(s, f, TaskCategory::Qml, &spec.slug());
            (
                spec,
                aggregate(&results, rule, &[1]).expect("valid results"),
            )
        })
        .collect();
    let merged = merge_cells(&cells);
    let want: Vec<f64> = GRID_COUNTS.iter().map(|c| c.2).collect();
    close(
        &accuracy_row(&emit_report(&merged, ReportFormat::TextTable)),
        &want,
        0.01,
    )
    .map_err(|e| format!("grid table: {e}"))?;

    // Per-category accuracies from one pooled task list.
    let mut results = Vec::new();
    for (cat, (s, total, _)) in TaskCategory::ALL.iter().zip(CATEGORY_COUNTS) {
        results.extend(synthetic_results(s, total - s, *cat, cat.as_str()));
    }
    let report = aggregate(&results, rule, &[1]).map_err(|e| e.to_string())?;
    let got: Vec<f64> = TaskCategory::ALL
        .iter()
        .map(|c| report.per_category[c].accuracy)
        .collect();
    let want: Vec<f64> = CATEGORY_COUNTS.iter().map(|c| c.2).collect();
    close(&got, &want, 0.01).map_err(|e| format!("categories: {e}"))?;
    let csv = emit_report(&report, ReportFormat::Csv);
    ensure(csv.contains("category,basic_circuits,52,57,47.71"), || {
        format!("category csv row missing:\n{csv}")
    })?;

    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(1), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "3 comparison + 9 grid + 6 category figures in {elapsed:.1?}"
    ))
}

// ---------------------------------------------------------------------------
// Pass@k

/// Fraction of the k-subsets of n completions (the first c passing) that
/// contain a pass, by explicit enumeration.
pub fn pass_at_k_enumerated(n: usize, c: usize, k: usize) -> f64 {
    fn walk(
        start: usize,
        left: usize,
        n: usize,
        c: usize,
        hit: bool,
        total: &mut u64,
        good: &mut u64,
    ) {
        if left == 0 {
            *total += 1;
            *good += u64::from(hit);
            return;
        }
        for i in start..=n - left {
            walk(i + 1, left - 1, n, c, hit || i < c, total, good);
        }
    }
    let (mut total, mut good) = (0, 0);
    walk(0, k, n, c, false, &mut total, &mut good);
    good as f64 / total as f64
}

pub fn pass_at_k_monte_carlo(n: usize, c: usize, k: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..n).collect();
    let mut hits = 0;
    for _ in 0..draws {
        let (chosen, _) = pool.partial_shuffle(&mut rng, k);
        if chosen.iter().any(|&i| i < c) {
            hits += 1;
        }
    }
    hits as f64 / draws as f64
}

pub fn check_pass_at_k() -> Check {
    let started = Instant::now();
    let mut cases = 0;
    for n in 1..=12 {
        for c in 0..=n {
            for k in [1, 3, 5].into_iter().filter(|&k| k <= n) {
                let got = pass_at_k(n, c, k).map_err(|e| e.to_string())?;
                let want = pass_at_k_enumerated(n, c, k);
                ensure((got - want).abs() < 1e-12, || {
                    format!("n={n} c={c} k={k}: {got} vs {want}")
                })?;
                cases += 1;
            }
        }
    }
    let mut worst: f64 = 0.0;
    for (i, &(n, c, k)) in [
        (5, 1, 1),
        (5, 2, 3),
        (10, 3, 5),
        (12, 1, 5),
        (12, 6, 3),
        (8, 0, 5),
    ]
    .iter()
    .enumerate()
    {
        let est = pass_at_k_monte_carlo(n, c, k, 100_000, 1000 + i as u64);
        let exact = pass_at_k(n, c, k).map_err(|e| e.to_string())?;
        worst = worst.max((est - exact).abs());
        ensure((est - exact).abs() <= 0.01, || {
            format!("n={n} c={c} k={k}: mc {est} vs {exact}")
        })?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{cases} exhaustive cases exact; worst Monte-Carlo gap {worst:.4}; {elapsed:.1?}"
    ))
}

// ---------------------------------------------------------------------------
// LoRA

pub struct Fixture {
    pub model: AdaptedModel,
    pub tokenizer: CharTokenizer,
    pub examples: Vec<TrainExample>,
}

/// A small model (d = 16, 2 layers) with Q/V adapters of rank 4.
pub fn fixture(seed: u64, dropout: f64) -> Fixture {
    let pairs = [
        ("bell pair", "qml.H(0)"),
        ("flip 1", "qml.X(1)"),
        ("phase 2", "qml.S(2)"),
        ("undo flip", "qml.adjoint(qml.X(0))"),
    ];
    let tokenizer = CharTokenizer::fit(pairs.iter().flat_map(|(a, b)| [*a, *b]));
    let mut cfg = ModelConfig::toy(tokenizer.vocab_size(), seed);
    cfg.d_model = 16;
    cfg.max_seq_len = 48;
    let lcfg = LoraConfig {
        rank: 4,
        dropout,
        seed: seed + 1,
        ..LoraConfig::default()
    };
    let model = attach_lora(init_model(&cfg).unwrap(), &lcfg).unwrap();
    let examples = pairs
        .iter()
        .map(|(i, c)| TrainExample::from_pair(&tokenizer, i, c, cfg.max_seq_len).unwrap())
        .collect();
    Fixture {
        model,
        tokenizer,
        examples,
    }
}

/// Fills every B with N(0, std) so that the adapters actually contribute.
pub fn randomize_b(model: &mut AdaptedModel, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for adapter in model.adapters_mut() {
        let (r, c) = adapter.b.shape();
        adapter.b = Matrix::random_normal(r, c, std, &mut rng);
    }
}

pub fn random_tokens(rng: &mut impl Rng, vocab: usize, max_len: usize) -> Vec<u32> {
    let len = rng.random_range(1..=max_len);
    (0..len)
        .map(|_| rng.random_range(0..vocab as u32))
        .collect()
}

fn qv_weights(model: &Model) -> Vec<f64> {
    model
        .blocks()
        .iter()
        .flat_map(|b| [Target::Query, Target::Value].map(|t| b.weight(t).data().to_vec()))
        .flatten()
        .collect()
}

pub fn check_lora_zero_b() -> Check {
    let f = fixture(3, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let tokens = random_tokens(&mut rng, f.tokenizer.vocab_size(), 24);
        for precision in [Precision::Fp64, Precision::Fp32, Precision::Fp16Emulated] {
            let adapted = f
                .model
                .forward_with(&tokens, precision)
                .map_err(|e| e.to_string())?;
            let base = f
                .model
                .base()
                .forward_with(&tokens, precision)
                .map_err(|e| e.to_string())?;
            ensure(adapted.data() == base.data(), || {
                format!("{precision:?}: outputs differ")
            })?;
        }
    }
    Ok("adapted forward equals base forward bit for bit (20 inputs x 3 precisions)".into())
}

pub fn check_lora_merge_equivalence() -> Check {
    let mut f = fixture(4, 0.0);
    randomize_b(&mut f.model, 0.2, 11);
    let merged = merge_adapters(&f.model).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let tokens = random_tokens(&mut rng, f.tokenizer.vocab_size(), 32);
        let a = f.model.forward(&tokens).map_err(|e| e.to_string())?;
        let m = merged.forward(&tokens).map_err(|e| e.to_string())?;
        worst = worst.max(rel_diff(a.data(), m.data()));
    }
    ensure(worst <= 1e-6, || format!("worst relative gap {worst:e}"))?;
    let base = f
        .model
        .base()
        .forward(&[1, 5, 6])
        .map_err(|e| e.to_string())?;
    let m = merged.forward(&[1, 5, 6]).map_err(|e| e.to_string())?;
    ensure(rel_diff(base.data(), m.data()) > 1e-3, || {
        "adapters had no visible effect".into()
    })?;
    Ok(format!("100 inputs, worst relative gap {worst:.1e}"))
}

pub fn check_lora_unmerge() -> Check {
    let mut f = fixture(5, 0.0);
    randomize_b(&mut f.model, 0.5, 12);
    let scale = 2.5;
    let base = f.model.base().clone();
    let mut lcfg = f.model.lora_config().clone();
    lcfg.scale = scale;
    let model = AdaptedModel::from_parts(base.clone(), lcfg, f.model.adapters().to_vec())
        .map_err(|e| e.to_string())?;
    let merged = merge_adapters(&model).map_err(|e| e.to_string())?;
    let restored = unmerge_adapters(&merged, model.adapters(), scale).map_err(|e| e.to_string())?;
    let gap = rel_diff(&qv_weights(&base), &qv_weights(&restored));
    ensure(gap <= 1e-6, || format!("relative gap {gap:e}"))?;
    ensure(
        rel_diff(&qv_weights(&base), &qv_weights(&merged)) > 1e-3,
        || "merge changed nothing".into(),
    )?;
    Ok(format!(
        "merge then unmerge restores Q/V weights, relative gap {gap:.1e}"
    ))
}

/// Reads entry `j` of factor A (`which == 0`) or B of adapter `ai`,
/// optionally overwriting it. Returns the previous value.
fn entry(m: &mut AdaptedModel, ai: usize, which: usize, j: usize, value: Option<f64>) -> f64 {
    let ad = &mut m.adapters_mut()[ai];
    let data = if which == 0 {
        ad.a.data_mut()
    } else {
        ad.b.data_mut()
    };
    let old = data[j];
    if let Some(v) = value {
        data[j] = v;
    }
    old
}

/// Analytic adapter gradients against central differences of the loss.
pub fn gradient_check(f: &Fixture, eps: f64) -> Result<(f64, f64, usize), String> {
    let (_, grads) =
        batch_gradients(&f.model, &f.examples, Precision::Fp64, None).map_err(|e| e.to_string())?;
    let analytic = grads.flatten();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut model = f.model.clone();
    let n_adapters = model.adapters().len();
    for ai in 0..n_adapters {
        for which in 0..2 {
            let len = if which == 0 {
                model.adapters()[ai].a.data().len()
            } else {
                model.adapters()[ai].b.data().len()
            };
            for j in 0..len {
                let orig = entry(&mut model, ai, which, j, None);
                entry(&mut model, ai, which, j, Some(orig + eps));
                let up =
                    batch_loss(&model, &f.examples, Precision::Fp64).map_err(|e| e.to_string())?;
                entry(&mut model, ai, which, j, Some(orig - eps));
                let down =
                    batch_loss(&model, &f.examples, Precision::Fp64).map_err(|e| e.to_string())?;
                entry(&mut model, ai, which, j, Some(orig));
                numeric.push((up - down) / (2.0 * eps));
            }
        }
    }
    let global = rel_diff(&analytic, &numeric);
    // Entry-wise relative error on entries large enough for central
    // differences to resolve; the rest must agree in absolute terms.
    let mut worst_entry: f64 = 0.0;
    for (g, n) in analytic.iter().zip(&numeric) {
        let scale = g.abs().max(n.abs());
        if scale > 1e-5 {
            worst_entry = worst_entry.max((g - n).abs() / scale);
        } else if (g - n).abs() > 1e-9 {
            return Err(format!(
                "small entry mismatch: analytic {g:e}, numeric {n:e}"
            ));
        }
    }
    Ok((global, worst_entry, analytic.len()))
}

pub fn check_lora_gradients() -> Check {
    let mut f = fixture(6, 0.0);
    randomize_b(&mut f.model, 0.3, 13);
    let (global, worst, count) = gradient_check(&f, 1e-5)?;
    ensure(global <= 1e-4 && worst <= 1e-4, || {
        format!("relative error global {global:e}, worst entry {worst:e}")
    })?;
    Ok(format!(
        "{count} entries; relative error global {global:.1e}, worst entry {worst:.1e}"
    ))
}

pub fn check_lora_frozen_base() -> Check {
    let mut f = fixture(7, 0.05);
    let before = f.model.base().checksum();
    let tcfg = TrainConfig {
        learning_rate: 1e-2,
        micro_batch: 2,
        grad_accum_steps: 1,
        ..TrainConfig::default()
    };
    let mut state = OptimizerState::new(&f.model, 3);
    let adapters_before = f.model.adapters().to_vec();
    for step in 0..100 {
        let batch = [
            f.examples[step % 4].clone(),
            f.examples[(step + 1) % 4].clone(),
        ];
        train_step(&mut f.model, &batch, &tcfg, &mut state).map_err(|e| e.to_string())?;
    }
    let after = f.model.base().checksum();
    ensure(before == after, || {
        format!("checksum {before} became {after}")
    })?;
    ensure(state.updates == 100, || {
        format!("{} updates", state.updates)
    })?;
    ensure(f.model.adapters() != &adapters_before[..], || {
        "adapters never moved".into()
    })?;
    Ok(format!(
        "checksum {} stable over 100 updates",
        &before[..12]
    ))
}

pub fn check_lora_accumulation() -> Check {
    let mut f = fixture(8, 0.0);
    randomize_b(&mut f.model, 0.1, 14);
    let base = TrainConfig {
        learning_rate: 1e-3,
        precision: Precision::Fp32,
        ..TrainConfig::default()
    };

    let mut accumulated = f.model.clone();
    let cfg = TrainConfig {
        micro_batch: 1,
        grad_accum_steps: 4,
        ..base.clone()
    };
    let mut state_a = OptimizerState::new(&accumulated, 0);
    for ex in &f.examples {
        train_step(
            &mut accumulated,
            std::slice::from_ref(ex),
            &cfg,
            &mut state_a,
        )
        .map_err(|e| e.to_string())?;
    }

    let mut single = f.model.clone();
    let cfg = TrainConfig {
        micro_batch: 4,
        grad_accum_steps: 1,
        ..base
    };
    let mut state_b = OptimizerState::new(&single, 0);
    train_step(&mut single, &f.examples, &cfg, &mut state_b).map_err(|e| e.to_string())?;

    ensure(state_a.updates == 1 && state_b.updates == 1, || {
        "expected one update each".into()
    })?;
    let ga = state_a.last_gradient().expect("update applied").flatten();
    let gb = state_b.last_gradient().expect("update applied").flatten();
    let grad_gap = rel_diff(&ga, &gb);
    let flat = |m: &AdaptedModel| -> Vec<f64> {
        m.adapters()
            .iter()
            .flat_map(|a| a.a.data().iter().chain(a.b.data()).copied())
            .collect()
    };
    let param_gap = rel_diff(&flat(&accumulated), &flat(&single));
    ensure(grad_gap <= 1e-6 && param_gap <= 1e-6, || {
        format!("gradient gap {grad_gap:e}, parameter gap {param_gap:e}")
    })?;
    Ok(format!(
        "gradient gap {grad_gap:.1e}, parameter gap {param_gap:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// Toy end-to-end

pub fn check_toy_end_to_end() -> Check {
    let started = Instant::now();
    let pairs = toy_pairs();
    let recipe = ToyRecipe::default();
    ensure(recipe.lora.rank == 8 && recipe.max_updates <= 200, || {
        "recipe drifted".into()
    })?;
    let run = train_toy(&pairs, &recipe).map_err(|e| e.to_string())?;
    let examples: Vec<TrainExample> = pairs
        .iter()
        .map(|(i, c)| TrainExample::from_pair(&run.tokenizer, i, c, 128).unwrap())
        .collect();
    let final_loss =
        batch_loss(&run.model, &examples, recipe.train.precision).map_err(|e| e.to_string())?;
    let drop = 1.0 - final_loss / run.initial_loss;
    let merged = merge_adapters(&run.model).map_err(|e| e.to_string())?;
    let recall = exact_recall(&merged, &run.tokenizer, &pairs).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(pairs.len() == 50, || format!("{} pairs", pairs.len()))?;
    ensure(drop >= 0.5, || {
        format!(
            "loss {:.3} -> {final_loss:.3} is only a {:.0}% drop",
            run.initial_loss,
            drop * 100.0
        )
    })?;
    ensure(recall * 5 >= pairs.len() * 4, || {
        format!("exact recall {recall}/{}", pairs.len())
    })?;
    ensure(elapsed < Duration::from_secs(300), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "loss {:.3} -> {final_loss:.3} ({:.0}% drop) in {} updates; recall {recall}/{}; {elapsed:.1?}",
        run.initial_loss,
        drop * 100.0,
        run.report.updates,
        pairs.len()
    ))
}

// ---------------------------------------------------------------------------
// Decoding

pub fn check_greedy_determinism() -> Check {
    let f = fixture(9, 0.0);
    let model = merge_adapters(&f.model).map_err(|e| e.to_string())?;
    let prompt = f.tokenizer.encode_prompt("bell pair");
    let params = DecodingParams {
        temperature: 0.0,
        top_p: 0.3,
        max_new_tokens: 12,
        seed: 0,
    };
    let reference = tinyformer::generate(&model, &prompt, &params).map_err(|e| e.to_string())?;
    let logits = model.forward(&prompt).map_err(|e| e.to_string())?;
    let last = logits.row(logits.rows() - 1).to_vec();
    let argmax = decode::argmax(&last);
    for seed in 0..1000u64 {
        let out = tinyformer::generate(&model, &prompt, &params.with_seed(seed))
            .map_err(|e| e.to_string())?;
        ensure(out == reference, || format!("seed {seed} diverged"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tok = decode::sample_token(&last, &params.with_seed(seed), &mut rng)
            .map_err(|e| e.to_string())?;
        ensure(tok == argmax, || {
            format!("seed {seed}: token {tok} is not the argmax {argmax}")
        })?;
    }
    Ok(format!(
        "1000 seeded calls agree ({} tokens each)",
        reference.len()
    ))
}

fn random_distribution(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(1..=12);
    let mut p: Vec<f64> = (0..n)
        .map(|_| match rng.random_range(0..4) {
            0 => 0.0,
            1 => 0.25,
            _ => rng.random::<f64>(),
        })
        .collect();
    if p.iter().all(|&v| v == 0.0) {
        p[0] = 1.0;
    }
    let total: f64 = p.iter().sum();
    p.iter().map(|v| v / total).collect()
}

pub fn check_nucleus_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..10_000 {
        let probs = random_distribution(&mut rng);
        let mut ps: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
        ps.push(0.0);
        ps.push(1.0);
        ps.sort_by(f64::total_cmp);
        let mut prev_support: Option<Vec<bool>> = None;
        for &p in &ps {
            let kept = decode::nucleus_filter(&probs, p).map_err(|e| e.to_string())?;
            let mass: f64 = kept.iter().sum();
            ensure((mass - 1.0).abs() < 1e-9, || {
                format!("case {case}: mass {mass}")
            })?;
            let support: Vec<bool> = kept.iter().map(|&v| v > 0.0).collect();
            ensure(support.iter().any(|&s| s), || {
                format!("case {case}: empty support")
            })?;
            // Kept tokens are never less likely than dropped ones.
            let min_kept = probs
                .iter()
                .zip(&support)
                .filter(|(_, &s)| s)
                .map(|(v, _)| *v)
                .fold(f64::INFINITY, f64::min);
            let max_dropped = probs
                .iter()
                .zip(&support)
                .filter(|(_, &s)| !s)
                .map(|(v, _)| *v)
                .fold(0.0, f64::max);
            ensure(min_kept >= max_dropped, || {
                format!("case {case}: kept {min_kept} < dropped {max_dropped}")
            })?;
            // Renormalization preserves ratios among kept tokens.
            let kept_mass: f64 = probs
                .iter()
                .zip(&support)
                .filter(|(_, &s)| s)
                .map(|(v, _)| *v)
                .sum();
            if kept_mass > 0.0 {
                for (i, &s) in support.iter().enumerate() {
                    if s {
                        ensure((kept[i] - probs[i] / kept_mass).abs() < 1e-12, || {
                            format!("case {case}: ratio")
                        })?;
                    }
                }
            }
            if let Some(prev) = &prev_support {
                ensure(prev.iter().zip(&support).all(|(a, b)| !a || *b), || {
                    format!("case {case}: support shrank as top_p grew to {p}")
                })?;
            }
            prev_support = Some(support);
        }
    }
    Ok("10000 random distributions x 6 thresholds".into())
}

pub fn check_sampling_frequencies() -> Check {
    let logits = [1.5, 0.2, -0.7, 0.9, 0.0];
    let probs = decode::softmax(&logits);
    let params = DecodingParams {
        temperature: 1.0,
        top_p: 1.0,
        max_new_tokens: 1,
        seed: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut counts = [0usize; 5];
    let draws = 100_000;
    for _ in 0..draws {
        counts[decode::sample_token(&logits, &params, &mut rng).map_err(|e| e.to_string())?] += 1;
    }
    let mut worst: f64 = 0.0;
    for (c, p) in counts.iter().zip(&probs) {
        worst = worst.max((*c as f64 / draws as f64 - p).abs());
    }
    ensure(worst <= 0.01, || format!("worst frequency gap {worst}"))?;
    Ok(format!("{draws} draws, worst frequency gap {worst:.4}"))
}

// ---------------------------------------------------------------------------
// Retrieval

const WORDS: [&str; 24] = [
    "qubit", "circuit", "hadamard", "cnot", "bell", "ghz", "measure", "rotation", "ansatz", "vqe",
    "gradient", "noise", "channel", "grover", "oracle", "teleport", "entangle", "phase", "swap",
    "device", "expval", "sample", "kernel", "encode",
];

pub fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..=6);
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn synthetic_docs(count: usize, seed: u64) -> Vec<InstructionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let instruction = random_text(&mut rng);
            InstructionSample {
                id: format!("doc-{:04}", (i * 7919) % count),
                token_count: instruction.split_whitespace().count() + 1,
                instruction,
                code: format!("def f{i}():\n    pass"),
                source: Source::Other,
                category: None,
                oversized: false,
            }
        })
        .collect()
}

/// Independent exact scan: re-embeds every document, stores it at f32 as
/// the index does, and ranks by cosine then ascending id.
pub fn brute_force(
    docs: &[InstructionSample],
    query: &str,
    k: usize,
    embedder: &HashingEmbedder,
) -> Vec<(String, f64)> {
    let q = embed(query, embedder).unwrap();
    let mut scored: Vec<(String, f64)> = docs
        .iter()
        .map(|d| {
            let v: Vec<f64> = embed(&d.instruction, embedder)
                .unwrap()
                .values
                .iter()
                .map(|&x| x as f32 as f64)
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = q.values.iter().zip(&v).map(|(a, b)| a * b).sum();
            let score = if norm == 0.0 || q.norm == 0.0 {
                0.0
            } else {
                (dot / (q.norm * norm)).clamp(-1.0, 1.0)
            };
            (d.id.clone(), score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

fn as_pairs(hits: &[RetrievalHit]) -> Vec<(String, f64)> {
    hits.iter()
        .map(|h| (h.sample_id.clone(), h.score))
        .collect()
}

pub fn check_retrieval_exact() -> Check {
    let docs = synthetic_docs(1000, 5);
    let embedder = HashingEmbedder::new(64);
    let index = build_index(&docs, &embedder).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ties = 0;
    for q in 0..30 {
        // Some queries are verbatim documents, which guarantees exact ties.
        let query = if q % 3 == 0 {
            docs[rng.random_range(0..docs.len())].instruction.clone()
        } else {
            random_text(&mut rng)
        };
        for k in [1, 3, 10] {
            let got =
                as_pairs(&query_top_k(&index, &query, k, &embedder).map_err(|e| e.to_string())?);
            let want = brute_force(&docs, &query, k, &embedder);
            ensure(got == want, || {
                format!("query `{query}` k={k}:\n got  {got:?}\n want {want:?}")
            })?;
            ties += got.windows(2).filter(|w| w[0].1 == w[1].1).count();
        }
    }
    ensure(ties > 0, || "no ties exercised".into())?;
    Ok(format!(
        "30 queries x k in {{1, 3, 10}} match the brute-force scan ({ties} tied neighbours)"
    ))
}

pub fn check_retrieval_round_trip() -> Check {
    let docs = synthetic_docs(1000, 15);
    let embedder = HashingEmbedder::new(128);
    let index = build_index(&docs, &embedder).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_index(&index, dir.path()).map_err(|e| e.to_string())?;
    let loaded = load_index(dir.path()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..100 {
        let query = random_text(&mut rng);
        let a = query_top_k(&index, &query, 10, &embedder).map_err(|e| e.to_string())?;
        let b = query_top_k(&loaded, &query, 10, &embedder).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("query `{query}` differs after reload"))?;
    }
    Ok("100 queries return identical hits after save and load".into())
}

// ---------------------------------------------------------------------------
// Sandbox and runner

pub fn sandbox(timeout: Option<f64>) -> PythonSandbox {
    PythonSandbox::new(SandboxConfig {
        timeout_override: timeout,
        ..SandboxConfig::default()
    })
}

pub fn check_sandbox_statuses() -> Check {
    let tasks = stub_tasks();
    let task = tasks
        .iter()
        .find(|t| t.id == "bc-001")
        .ok_or("bc-001 missing")?;
    let solution = task
        .canonical_solution
        .clone()
        .ok_or("no canonical solution")?;
    let sb = sandbox(None);
    let cases = [
        (Status::Pass, solution.clone()),
        (Status::Fail, corrupt(&solution, &task.entry_point)),
        (
            Status::Error,
            "def hadamard_matrix(:\n    return".to_string(),
        ),
    ];
    for (want, code) in &cases {
        let out = sb.execute(task, code).map_err(|e| e.to_string())?;
        ensure(out.status == *want, || {
            format!(
                "expected {want:?}, got {:?}: {}",
                out.status, out.stderr_excerpt
            )
        })?;
    }
    let timeout = 1.0;
    let looping = sandbox(Some(timeout));
    let started = Instant::now();
    let out = looping
        .execute(
            task,
            "def hadamard_matrix():\n    while True:\n        pass\n\nhadamard_matrix()\n",
        )
        .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(out.status == Status::Timeout, || {
        format!("infinite loop gave {:?}", out.status)
    })?;
    ensure(elapsed < Duration::from_secs_f64(timeout + 1.0), || {
        format!("killed after {elapsed:?}")
    })?;
    Ok(format!("pass, fail, error and timeout observed; loop killed after {elapsed:.2?} (timeout {timeout} s)"))
}

pub fn run_stub_eval(out: &Path, seed: u64) -> Result<Vec<u8>, HarnessError> {
    let tasks = stub_tasks();
    let opts = RunOptions {
        seed,
        ..RunOptions::default()
    };
    let cell = CellSpec {
        temperature: 0.5,
        top_p: 0.5,
    };
    evaluate(
        &tasks,
        &canonical_mock(&tasks),
        &sandbox(None),
        cell,
        &opts,
        out,
        &|_| false,
    )?;
    Ok(std::fs::read(out.join("report.json")).expect("report written"))
}

pub fn check_stub_pack_eval() -> Check {
    let tasks = stub_tasks();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run_stub_eval(a.path(), 42).map_err(|e| e.to_string())?;
    let second = run_stub_eval(b.path(), 42).map_err(|e| e.to_string())?;
    ensure(first == second, || {
        "reports differ between identical runs".into()
    })?;
    let report: qcoder_core::harness::EvalReport =
        serde_json::from_slice(&first).map_err(|e| e.to_string())?;
    let needs_dep = tasks.iter().filter(|t| !t.requires.is_empty()).count();
    let missing = tasks
        .iter()
        .filter(|t| sandbox(None).missing_requirement(t).is_some())
        .count();
    ensure(
        report.skipped == missing && report.tasks + report.skipped == tasks.len(),
        || {
            format!(
                "{} evaluated, {} skipped of {}",
                report.tasks,
                report.skipped,
                tasks.len()
            )
        },
    )?;
    Ok(format!(
        "{} tasks evaluated ({} solved), {} skipped of {needs_dep} needing extra packages; byte-identical reruns",
        report.tasks, report.overall.success, report.skipped
    ))
}

pub fn run_grid(out: &Path, stop_after: Option<usize>) -> Result<Vec<u8>, HarnessError> {
    let tasks = stub_tasks();
    let opts = RunOptions {
        seed: 9,
        ..RunOptions::default()
    };
    let grid = product_grid(&DEFAULT_GRID, &DEFAULT_GRID);
    let cancel = move |p: &qcoder_core::harness::Progress| {
        stop_after.is_some_and(|n| p.completed_total >= n)
    };
    grid_run(
        &tasks,
        &canonical_mock(&tasks),
        &sandbox(None),
        &grid,
        &opts,
        out,
        &cancel,
    )?;
    Ok(std::fs::read(out.join("report.json")).expect("report written"))
}

pub fn check_grid_resume() -> Check {
    let full = tempfile::tempdir().map_err(|e| e.to_string())?;
    let reference = run_grid(full.path(), None).map_err(|e| e.to_string())?;
    let cells = std::fs::read_dir(full.path().join("cells"))
        .map_err(|e| e.to_string())?
        .count();
    let with_reports = product_grid(&DEFAULT_GRID, &DEFAULT_GRID)
        .iter()
        .filter(|c| {
            full.path()
                .join("cells")
                .join(c.slug())
                .join("report.json")
                .exists()
        })
        .count();
    ensure(cells == 9 && with_reports == 9, || {
        format!("{cells} cells, {with_reports} reports")
    })?;

    let resumed = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut interruptions = 0;
    // Stop twice mid-run (once inside the first cell, once further on),
    // then let the final invocation finish.
    for stop in [Some(4), Some(30), None] {
        match run_grid(resumed.path(), stop) {
            Err(HarnessError::Interrupted { .. }) => interruptions += 1,
            Err(e) => return Err(e.to_string()),
            Ok(bytes) => {
                ensure(bytes == reference, || {
                    "resumed report differs from the uninterrupted one".into()
                })?;
            }
        }
    }
    ensure(interruptions == 2, || {
        format!("{interruptions} interruptions")
    })?;
    for c in product_grid(&DEFAULT_GRID, &DEFAULT_GRID) {
        let a = std::fs::read(full.path().join("cells").join(c.slug()).join("report.json"))
            .map_err(|e| e.to_string())?;
        let b = std::fs::read(
            resumed
                .path()
                .join("cells")
                .join(c.slug())
                .join("report.json"),
        )
        .map_err(|e| e.to_string())?;
        ensure(a == b, || format!("cell {} differs", c.label()))?;
    }
    Ok("9 cell reports; run interrupted twice then resumed to a byte-identical report".into())
}
