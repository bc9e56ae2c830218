use super::HarnessError;

/// Unbiased Pass@k estimator `1 - C(n-c, k) / C(n, k)`, evaluated as
/// `1 - prod_{i=n-c+1}^{n} (1 - k/i)` so no binomial is ever formed.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64, HarnessError> {
    if c > n {
        return Err(HarnessError::Argument(format!("c = {c} exceeds n = {n}")));
    }
    if k == 0 || k > n {
        return Err(HarnessError::Argument(format!(
            "k = {k} must lie in 1..={n}"
        )));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = ((n - c + 1)..=n)
        .map(|i| 1.0 - k as f64 / i as f64)
        .product();
    Ok(1.0 - miss)
}
