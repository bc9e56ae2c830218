use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::BenchmarkTask;
use crate::backend::MockBackend;

/// Appends a redefinition of the entry point that returns `None`, so the
/// code still parses but no longer satisfies the tests.
pub fn corrupt(code: &str, entry_point: &str) -> String {
    format!("{code}\n\n\ndef {entry_point}(*args, **kwargs):\n    return None\n")
}

/// Hermetic stand-in for a model: answers each task prompt with its
/// canonical solution, corrupted with probability `temperature / 2` (drawn
/// from the completion seed). Prompts are matched by containment so that
/// retrieval-augmented prompts still resolve. Unknown prompts get an empty
/// completion.
pub fn canonical_mock(tasks: &[BenchmarkTask]) -> MockBackend {
    let table: Vec<(String, String, String)> = tasks
        .iter()
        .filter_map(|t| {
            t.canonical_solution.as_ref().map(|s| {
                (
                    t.prompt.trim().to_string(),
                    s.clone(),
                    t.entry_point.clone(),
                )
            })
        })
        .collect();
    MockBackend::from_fn(move |req, _, seed| {
        let hit = table
            .iter()
            .filter(|(prompt, _, _)| req.prompt.contains(prompt.as_str()))
            .max_by_key(|(prompt, _, _)| prompt.len());
        let Some((_, solution, entry)) = hit else {
            return Some(String::new());
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if rng.random::<f64>() < req.params.temperature / 2.0 {
            Some(format!("```python\n{}\n```", corrupt(solution, entry)))
        } else {
            Some(format!("```python\n{solution}\n```"))
        }
    })
    .with_id("mock:canonical")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{GenerationBackend, GenerationRequest};
    use crate::decode::DecodingParams;
    use crate::TaskCategory;

    fn task() -> BenchmarkTask {
        BenchmarkTask {
            id: "t".into(),
            category: TaskCategory::Qml,
            prompt: "double a number".into(),
            entry_point: "f".into(),
            test_code: "assert f(2) == 4".into(),
            timeout: 5.0,
            requires: vec![],
            canonical_solution: Some("def f(x):\n    return 2 * x".into()),
        }
    }

    fn params(t: f64) -> DecodingParams {
        DecodingParams {
            temperature: t,
            top_p: 1.0,
            max_new_tokens: 64,
            seed: 4,
        }
    }

    #[test]
    fn greedy_mock_returns_canonical() {
        let mock = canonical_mock(&[task()]);
        let out = mock
            .generate(&GenerationRequest::new("double a number", params(0.0), 3))
            .unwrap();
        assert!(out
            .texts()
            .all(|t| t.contains("return 2 * x") && !t.contains("return None")));
    }

    #[test]
    fn corruption_rate_tracks_temperature() {
        let mock = canonical_mock(&[task()]);
        let out = mock
            .generate(&GenerationRequest::new(
                "Context...\ndouble a number",
                params(1.0),
                2000,
            ))
            .unwrap();
        let bad = out.texts().filter(|t| t.contains("return None")).count() as f64 / 2000.0;
        assert!((bad - 0.5).abs() < 0.05, "corruption rate {bad}");
        let out = mock
            .generate(&GenerationRequest::new("unrelated", params(0.0), 1))
            .unwrap();
        assert_eq!(out.completions[0].text, "");
    }
}
