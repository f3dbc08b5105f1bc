//! Small statistics toolkit shared by the evaluation harness and the test
//! suites: summary moments, Welch's t-test, the asymptotic two-sample
//! Kolmogorov-Smirnov test and a chi-square uniformity check.

use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    assert!(xs.len() >= 2);
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

pub fn standard_error(xs: &[f64]) -> f64 {
    std_dev(xs) / (xs.len() as f64).sqrt()
}

/// One-sided Welch t-test for `mean(a) < mean(b)`. Returns the p-value:
/// small values mean strong evidence that a's mean is below b's.
pub fn welch_t_test_less(a: &[f64], b: &[f64]) -> f64 {
    assert!(a.len() >= 2 && b.len() >= 2);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (variance(a), variance(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return if ma < mb { 0.0 } else { 1.0 };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df.max(1.0)).unwrap();
    dist.cdf(t)
}

/// Two-sample Kolmogorov-Smirnov statistic and its asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert!(!a.is_empty() && !b.is_empty());
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len(), sb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let x = sa[i].min(sb[j]);
        while i < na && sa[i] <= x {
            i += 1;
        }
        while j < nb && sb[j] <= x {
            j += 1;
        }
        let fa = i as f64 / na as f64;
        let fb = j as f64 / nb as f64;
        d = d.max((fa - fb).abs());
    }
    let n_eff = (na as f64 * nb as f64) / (na as f64 + nb as f64);
    let lambda = (n_eff.sqrt() + 0.12 + 0.11 / n_eff.sqrt()) * d;
    // Kolmogorov tail series
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1.0f64).powi(k as i32 + 1) * (-2.0 * k * k * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

/// Log density of an isotropic Gaussian `N(mean, var I)` at `x`.
pub fn gaussian_log_density_iso(x: &[f64], mean: &[f64], var: f64) -> f64 {
    assert_eq!(x.len(), mean.len());
    assert!(var > 0.0);
    let d = x.len() as f64;
    let quad: f64 = x
        .iter()
        .zip(mean)
        .map(|(xi, mi)| (xi - mi).powi(2))
        .sum();
    -0.5 * (d * (2.0 * std::f64::consts::PI * var).ln() + quad / var)
}

/// Chi-square goodness-of-fit p-value against equal expected counts.
pub fn chi_square_uniform_p(counts: &[usize]) -> f64 {
    assert!(counts.len() >= 2);
    let total: usize = counts.iter().sum();
    assert!(total > 0);
    let expected = total as f64 / counts.len() as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(chi2)
}
