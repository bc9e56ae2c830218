//! Acceptance gate: one PASS/FAIL line per criterion.

mod common;

use std::time::Instant;

use common::*;

fn main() {
    let criteria: [(&str, fn() -> Check); 17] = [
        (
            "report arithmetic reproduces recorded accuracies",
            check_reported_arithmetic,
        ),
        (
            "pass@k matches enumeration and Monte-Carlo",
            check_pass_at_k,
        ),
        (
            "lora (a) zero B leaves the base forward unchanged",
            check_lora_zero_b,
        ),
        (
            "lora (b) merged model matches adapted model",
            check_lora_merge_equivalence,
        ),
        (
            "lora (c) merge then unmerge restores weights",
            check_lora_unmerge,
        ),
        (
            "lora (d) analytic gradients match finite differences",
            check_lora_gradients,
        ),
        (
            "lora (e) base weights frozen over 100 steps",
            check_lora_frozen_base,
        ),
        (
            "lora (f) 4 x batch 1 accumulation equals batch 4",
            check_lora_accumulation,
        ),
        (
            "toy end-to-end: loss drop and exact recall",
            check_toy_end_to_end,
        ),
        (
            "decoding: greedy determinism over 1000 calls",
            check_greedy_determinism,
        ),
        (
            "decoding: nucleus monotonicity and renormalization",
            check_nucleus_properties,
        ),
        (
            "decoding: sampling frequencies match softmax",
            check_sampling_frequencies,
        ),
        (
            "retrieval: top-k equals brute-force scan",
            check_retrieval_exact,
        ),
        (
            "retrieval: save/load round trip",
            check_retrieval_round_trip,
        ),
        ("sandbox: statuses and timeout kill", check_sandbox_statuses),
        (
            "sandbox: hermetic deterministic stub-pack eval",
            check_stub_pack_eval,
        ),
        (
            "grid: 9 reports and byte-identical resume",
            check_grid_resume,
        ),
    ];

    let mut failed = 0;
    for (name, check) in &criteria {
        let started = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} [{:.1?}]", started.elapsed()),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name}: {reason} [{:.1?}]", started.elapsed());
            }
        }
    }
    println!("{} criteria, {failed} failed", criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
