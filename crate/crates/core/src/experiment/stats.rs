//! Paired and multi-method significance tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Largest sample size that uses the exact null distribution.
pub const EXACT_LIMIT: usize = 12;
pub const MIN_PAIRS: usize = 5;
/// Smallest p-value reported as a number.
pub const P_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W−)`
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
    pub significant: bool,
}

/// Average ranks (1-based) of `values`, ascending.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on paired scores. Zero differences
/// are dropped; ties share average ranks. Up to [`EXACT_LIMIT`] pairs the
/// p-value comes from the exact distribution of `W+` over all sign
/// assignments of the observed ranks, above it from the normal
/// approximation with tie-corrected variance.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} scores against {}", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::UndefinedTest("all paired differences are zero".into()));
    }
    let n = diffs.len();
    if n < MIN_PAIRS {
        return Err(Error::UndefinedTest(format!(
            "{n} nonzero differences, at least {MIN_PAIRS} needed"
        )));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    let exact = n <= EXACT_LIMIT;
    let p_value = if exact {
        exact_p(&ranks, statistic)
    } else {
        let mean = total / 2.0;
        let mut var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        for group in sorted.chunk_by(|x, y| x == y) {
            let t = group.len() as f64;
            var -= (t * t * t - t) / 48.0;
        }
        if var <= 0.0 {
            return Err(Error::UndefinedTest("zero variance under the null".into()));
        }
        let z = (w_plus - mean) / var.sqrt();
        erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(WilcoxonResult {
        statistic,
        w_plus,
        w_minus,
        n,
        p_value,
        exact,
        significant: p_value < 0.05,
    })
}

/// `P(min(W+, T − W+) ≤ w)` under random signs, counted with a DP over
/// doubled ranks so average ranks stay integral.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w2 = (2.0 * w).round() as usize;
    let hits: f64 = counts
        .iter()
        .enumerate()
        .filter(|&(s, _)| s.min(total - s) <= w2)
        .map(|(_, c)| c)
        .sum();
    (hits / 2f64.powi(ranks.len() as i32)).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub chi_squared: f64,
    pub p_value: f64,
    pub degrees_of_freedom: usize,
    /// Per method, rank 1 being the highest score in a row.
    pub average_ranks: Vec<f64>,
    pub datasets: usize,
    pub methods: usize,
}

/// Friedman test on a `datasets × methods` score matrix.
pub fn friedman_test(scores: &Matrix) -> Result<FriedmanResult> {
    let (n, k) = scores.shape();
    if n < 2 || k < 2 {
        return Err(Error::Data(format!(
            "need at least 2 datasets and 2 methods, got {n}x{k}"
        )));
    }
    if !scores.is_finite() {
        return Err(Error::Data("score matrix has missing cells".into()));
    }
    let mut mean_ranks = vec![0.0; k];
    for i in 0..n {
        let negated: Vec<f64> = scores.row(i).iter().map(|v| -v).collect();
        for (m, r) in mean_ranks.iter_mut().zip(average_ranks(&negated)) {
            *m += r / n as f64;
        }
    }
    let kf = k as f64;
    let sum_sq: f64 = mean_ranks.iter().map(|r| r * r).sum();
    let chi = (12.0 * n as f64 / (kf * (kf + 1.0)) * (sum_sq - kf * (kf + 1.0).powi(2) / 4.0)).max(0.0);
    let dist = ChiSquared::new(kf - 1.0).map_err(|e| Error::Data(e.to_string()))?;
    let p_value = if chi == 0.0 { 1.0 } else { dist.sf(chi) };
    Ok(FriedmanResult {
        chi_squared: chi,
        p_value,
        degrees_of_freedom: k - 1,
        average_ranks: mean_ranks,
        datasets: n,
        methods: k,
    })
}

/// p-values under [`P_FLOOR`] print as `< 1e-12`.
pub fn format_p_value(p: f64) -> String {
    if p < P_FLOOR {
        "< 1e-12".into()
    } else {
        format!("{p:.4e}")
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
