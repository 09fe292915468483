//! Small statistics toolbox: correlation coefficients with significance,
//! and a one-sample Kolmogorov–Smirnov test.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

/// Pearson correlation of two equal-length samples.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    if x.is_empty() {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Average ranks (ties share the mean rank), 1-based.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// Spearman ρ plus the one-sided p-value for ρ > 0 via the t approximation
/// t = ρ·√((n−2)/(1−ρ²)) with n−2 degrees of freedom.
pub fn spearman_test(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len();
    let rho = spearman_rho(x, y);
    if n < 3 {
        return (rho, 1.0);
    }
    if rho >= 1.0 {
        return (rho, 0.0);
    }
    if rho <= -1.0 {
        return (rho, 1.0);
    }
    let t = rho * ((n as f64 - 2.0) / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n as f64 - 2.0).expect("valid dof");
    let p_one_sided = 1.0 - dist.cdf(t);
    (rho, p_one_sided)
}

/// One-sample KS statistic of `samples` against N(mean, std²).
pub fn ks_statistic_normal(samples: &[f64], mean: f64, std: f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let dist = Normal::new(mean, std).expect("valid normal");
    let mut d = 0.0f64;
    for (i, &s) in sorted.iter().enumerate() {
        let cdf = dist.cdf(s);
        let hi = (i + 1) as f64 / n - cdf;
        let lo = cdf - i as f64 / n;
        d = d.max(hi.max(lo));
    }
    d
}

/// Asymptotic p-value of a KS statistic `d` over `n` samples
/// (Kolmogorov distribution with the Stephens small-sample correction).
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sqrt_n = (n as f64).sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        p += sign * (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
    }
    (2.0 * p).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn pearson_on_exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [2.0, 4.0, 6.0, 8.0];
        assert!((pearson(&x, &y) - 1.0).abs() < 1e-12);
        let yneg = [-2.0, -4.0, -6.0, -8.0];
        assert!((pearson(&x, &yneg) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_is_rank_based() {
        // monotone but nonlinear → ρ = 1
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.0, 8.0, 27.0, 64.0, 125.0];
        let (rho, p) = spearman_test(&x, &y);
        assert!((rho - 1.0).abs() < 1e-12);
        assert!(p < 0.05);
    }

    #[test]
    fn spearman_handles_ties() {
        let x = [1.0, 2.0, 2.0, 3.0];
        let r = ranks(&x);
        assert_eq!(r, vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn ks_accepts_true_normal_rejects_shifted() {
        let mut rng = crate::rng::rng_from(5);
        let samples: Vec<f64> =
            (0..2000).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let d = ks_statistic_normal(&samples, 0.0, 1.0);
        assert!(ks_p_value(d, samples.len()) > 0.01, "true normal rejected: d={d}");
        let d_bad = ks_statistic_normal(&samples, 0.5, 1.0);
        assert!(ks_p_value(d_bad, samples.len()) < 1e-6, "shifted normal accepted");
    }
}
