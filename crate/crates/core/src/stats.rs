//! Sample statistics and t-tests over per-episode means.

use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; 0 for fewer than two samples.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Half-width of the two-sided Student-t confidence interval for the mean.
pub fn t_half_width(xs: &[f64], level: f64) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::INFINITY;
    }
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid degrees of freedom")
        .inverse_cdf(0.5 + level / 2.0);
    t * (variance(xs) / n as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn two_sided(t: f64, df: f64, diff: f64) -> TTest {
    if !t.is_finite() {
        // zero standard error: identical samples or a certain difference
        let p_value = if diff == 0.0 { 1.0 } else { 0.0 };
        return TTest { t, df, p_value };
    }
    let dist = StudentsT::new(0.0, 1.0, df.max(1e-9)).expect("valid degrees of freedom");
    TTest {
        t,
        df,
        p_value: (2.0 * dist.cdf(-t.abs())).min(1.0),
    }
}

/// Welch's unequal-variance two-sample t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> TTest {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a) / na, variance(b) / nb);
    let diff = mean(a) - mean(b);
    let se2 = va + vb;
    if se2 == 0.0 {
        return two_sided(if diff == 0.0 { f64::NAN } else { f64::INFINITY }, na + nb - 2.0, diff);
    }
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    two_sided(diff / se2.sqrt(), df, diff)
}

/// Paired t-test on the differences `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> TTest {
    assert_eq!(a.len(), b.len(), "paired samples must have equal length");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = mean(&d);
    let se = (variance(&d) / n).sqrt();
    if se == 0.0 {
        return two_sided(if m == 0.0 { f64::NAN } else { f64::INFINITY }, n - 1.0, m);
    }
    two_sided(m / se, n - 1.0, m)
}
