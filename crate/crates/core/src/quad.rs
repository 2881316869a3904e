//! Quadrature and summation helpers shared by the cost, expansion and
//! Monte Carlo code.

/// Composite Simpson rule over equally spaced samples with spacing `h`.
///
/// An odd number of intervals closes with Simpson's 3/8 rule on the last
/// three intervals; a single interval falls back to the trapezoid rule.
pub fn simpson(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    match n {
        0 | 1 => 0.0,
        2 => 0.5 * h * (values[0] + values[1]),
        3 => h / 3.0 * (values[0] + 4.0 * values[1] + values[2]),
        4 => 3.0 * h / 8.0 * (values[0] + 3.0 * values[1] + 3.0 * values[2] + values[3]),
        _ => {
            let intervals = n - 1;
            let simpson_end = if intervals.is_multiple_of(2) { n - 1 } else { n - 4 };
            let mut acc = values[0] + values[simpson_end];
            for (i, v) in values.iter().enumerate().take(simpson_end).skip(1) {
                acc += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
            }
            let mut total = h / 3.0 * acc;
            if simpson_end != n - 1 {
                let s = &values[simpson_end..];
                total += 3.0 * h / 8.0 * (s[0] + 3.0 * s[1] + 3.0 * s[2] + s[3]);
            }
            total
        }
    }
}

/// Simpson integral of `f` over `[a, b]` using `intervals` equal pieces.
pub fn simpson_fn<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, intervals: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let n = intervals.max(2);
    let h = (b - a) / n as f64;
    let values: Vec<f64> = (0..=n).map(|i| f(if i == n { b } else { a + i as f64 * h })).collect();
    simpson(&values, h)
}

/// Pairwise (tree) summation. The split points depend only on the length,
/// so the result is independent of how the input was produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_exact_on_cubics_even_and_odd() {
        let f = |x: f64| 2.0 * x * x * x - x * x + 3.0;
        let exact = 0.5 * 16.0 - 8.0 / 3.0 + 6.0;
        for n in [2usize, 3, 4, 5, 8, 11] {
            let got = simpson_fn(f, 0.0, 2.0, n);
            assert!((got - exact).abs() < 1e-12, "n = {n}: {got} vs {exact}");
        }
    }

    #[test]
    fn simpson_converges_fourth_order() {
        let exact = 1.0 - (-1.0f64).exp();
        let e1 = (simpson_fn(|x| (-x).exp(), 0.0, 1.0, 10) - exact).abs();
        let e2 = (simpson_fn(|x| (-x).exp(), 0.0, 1.0, 20) - exact).abs();
        assert!(e1 / e2 > 14.0);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        let (m, se) = mean_and_stderr(&[2.0; 10]);
        assert_eq!(m, 2.0);
        assert_eq!(se, 0.0);
    }
}
