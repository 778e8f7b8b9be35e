//! Capacity diagnostics for the classifier layer: dichotomy counts, margins,
//! the enclosing radius of the penultimate representation and the resulting
//! VC-dimension bound `γ ≤ 1 + min(4·C′·Σ(netⁱ)², n)` with
//! `C′ = R₁² / (M·d²·θ²)`.
//!
//! All geometry is done on the augmented penultimate vectors (a constant 1
//! appended) so that the classifier hyperplane `β = (w, b)` passes through
//! the origin.

use std::io::Read;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ActivationKind, Matrix};
use crate::network::{ForwardTrace, Network};

/// Number of dichotomies of `m` points in general position that a
/// homogeneous hyperplane in `n` dimensions can realize.
pub fn dichotomy_count(m: usize, n: usize) -> BigUint {
    if m < n + 1 {
        return BigUint::one() << m;
    }
    // 2 · Σ_{i<n} C(m−1, i), binomials built incrementally
    let mut total = BigUint::zero();
    let mut binom = BigUint::one();
    for i in 0..n {
        total += &binom;
        binom = binom * BigUint::from(m - 1 - i) / BigUint::from(i + 1);
    }
    total << 1
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `minᵢ |βᵀuⁱ| / ‖β‖` over the rows of `augmented`.
pub fn geometric_margin(augmented: &Matrix, beta: &[f64]) -> Result<f64> {
    if augmented.cols() != beta.len() {
        return Err(Error::Shape(format!(
            "points have {} coordinates, beta has {}",
            augmented.cols(),
            beta.len()
        )));
    }
    if augmented.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let b = norm(beta);
    if b == 0.0 {
        return Err(Error::DegenerateClassifier("beta is the zero vector".into()));
    }
    let closest = (0..augmented.rows())
        .map(|i| dot(augmented.row(i), beta).abs())
        .fold(f64::INFINITY, f64::min);
    Ok(closest / b)
}

/// `maxᵢ ‖uⁱ‖`, the origin-centred radius.
pub fn enclosing_radius(augmented: &Matrix) -> f64 {
    (0..augmented.rows())
        .map(|i| norm(augmented.row(i)))
        .fold(0.0, f64::max)
}

/// `f⁻¹(t)` for the output nonlinearity.
pub fn theta_from_target(kind: ActivationKind, t: f64) -> Result<f64> {
    match kind {
        ActivationKind::Identity => Ok(t),
        ActivationKind::Tanh if t.abs() < 1.0 => Ok(t.atanh()),
        ActivationKind::Logistic if t > 0.0 && t < 1.0 => Ok((t / (1.0 - t)).ln()),
        ActivationKind::Tanh | ActivationKind::Logistic => {
            Err(Error::Domain(format!("target {t} is outside the open range of {kind}")))
        }
        ActivationKind::Relu | ActivationKind::Softmax => {
            Err(Error::Unsupported(format!("{kind} has no usable inverse")))
        }
    }
}

/// `(V_max − V_min) / ‖w‖` for one output neuron's values over a batch.
pub fn range_margin(outputs: &[f64], weights: &[f64]) -> Result<f64> {
    let w = norm(weights);
    if w == 0.0 {
        return Err(Error::DegenerateClassifier("output weights are zero".into()));
    }
    if outputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let max = outputs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = outputs.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((max - min) / w)
}

/// Range margin of output unit `unit` of `net` over the trace's batch.
pub fn range_margin_of(net: &Network, trace: &ForwardTrace, unit: usize) -> Result<f64> {
    range_margin(&trace.output().column(unit), net.output_layer().weights.row(unit))
}

/// Whether the points (one per row) with binary labels admit a separating
/// hyperplane, decided by a perceptron with a bias term. The epoch cap
/// shrinks with `M·n` so large inputs stay bounded in work; exceeding it
/// reports `false`.
pub fn separability_check(points: &Matrix, labels: &[usize]) -> bool {
    let m = points.rows();
    if m == 0 || labels.len() != m {
        return false;
    }
    let signs: Vec<f64> = labels.iter().map(|&l| if l == 0 { -1.0 } else { 1.0 }).collect();
    if signs.iter().all(|&s| s == signs[0]) {
        return true;
    }
    let aug = points.append_column(1.0);
    let dims = aug.cols();
    let max_epochs = (20_000_000 / (m * dims)).clamp(100, 20_000);
    let mut w = vec![0.0; dims];
    for _ in 0..max_epochs {
        let mut mistakes = 0;
        for (i, &s) in signs.iter().enumerate() {
            let x = aug.row(i);
            if s * dot(&w, x) <= 0.0 {
                for (wk, xk) in w.iter_mut().zip(x) {
                    *wk += s * xk;
                }
                mistakes += 1;
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputCapacity {
    pub unit: usize,
    pub margin: f64,
    /// `None` when the margin is zero (the bound saturates at `1 + n`).
    pub c_prime: Option<f64>,
    pub sum_sq_net: f64,
    pub gamma_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub samples: usize,
    /// Penultimate width `n` (without the appended constant).
    pub penultimate_width: usize,
    pub r1: f64,
    /// Observed geometric margin of the headline output.
    pub margin: f64,
    /// Margin floor used in `C′`; the observed margin.
    pub d_min: f64,
    pub theta: f64,
    /// False when the output nonlinearity has no inverse and θ = 1 was used.
    pub theta_available: bool,
    pub c_prime: Option<f64>,
    /// `4·C′`
    pub c_bound: Option<f64>,
    pub sum_sq_net: f64,
    pub gamma_bound: f64,
    pub range_margin: Option<f64>,
    /// Set when the margin is zero and the bound is vacuous.
    pub non_separable: bool,
    /// Per output unit; the headline fields come from the largest bound.
    pub outputs: Vec<OutputCapacity>,
    pub dichotomies: String,
}

/// Bound from augmented penultimate points and one `β` per output unit.
pub fn bound_from_augmented(
    augmented: &Matrix,
    betas: &[Vec<f64>],
    theta: f64,
    theta_available: bool,
) -> Result<CapacityReport> {
    let m = augmented.rows();
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    if betas.is_empty() {
        return Err(Error::Config("at least one output unit is required".into()));
    }
    if augmented.cols() < 2 {
        return Err(Error::Shape("augmented points need at least 2 coordinates".into()));
    }
    let n = augmented.cols() - 1;
    let r1 = enclosing_radius(augmented);
    let mut outputs = Vec::with_capacity(betas.len());
    for (unit, beta) in betas.iter().enumerate() {
        let margin = geometric_margin(augmented, beta)?;
        let sum_sq_net: f64 = (0..m).map(|i| dot(augmented.row(i), beta).powi(2)).sum();
        let (c_prime, gamma_bound) = if margin > 0.0 {
            let c = r1 * r1 / (m as f64 * margin * margin * theta * theta);
            (Some(c), 1.0 + (4.0 * c * sum_sq_net).min(n as f64))
        } else {
            (None, 1.0 + n as f64)
        };
        outputs.push(OutputCapacity {
            unit,
            margin,
            c_prime,
            sum_sq_net,
            gamma_bound,
        });
    }
    let head = outputs
        .iter()
        .fold(
            &outputs[0],
            |best, o| if o.gamma_bound > best.gamma_bound { o } else { best },
        )
        .clone();
    Ok(CapacityReport {
        samples: m,
        penultimate_width: n,
        r1,
        margin: head.margin,
        d_min: head.margin,
        theta,
        theta_available,
        c_prime: head.c_prime,
        c_bound: head.c_prime.map(|c| 4.0 * c),
        sum_sq_net: head.sum_sq_net,
        gamma_bound: head.gamma_bound,
        range_margin: None,
        non_separable: head.margin == 0.0,
        outputs,
        dichotomies: dichotomy_count(m, n).to_string(),
    })
}

/// Capacity report for `net` on the batch recorded in `trace`, with `t` the
/// training target magnitude.
pub fn vc_bound(net: &Network, trace: &ForwardTrace, t: f64) -> Result<CapacityReport> {
    if trace.pre.len() != net.layers.len() {
        return Err(Error::Shape("trace does not belong to this network".into()));
    }
    let kind = net.output_layer().activation;
    let (theta, theta_available) = match theta_from_target(kind, t) {
        Ok(theta) => (theta, true),
        Err(Error::Unsupported(_)) => (1.0, false),
        Err(e) => return Err(e),
    };
    let aug = trace.augmented_penultimate();
    let betas: Vec<Vec<f64>> = (0..net.output_width()).map(|j| net.output_beta(j)).collect();
    let mut report = bound_from_augmented(&aug, &betas, theta, theta_available)?;
    let head = report
        .outputs
        .iter()
        .position(|o| o.gamma_bound == report.gamma_bound)
        .unwrap_or(0);
    report.range_margin = range_margin_of(net, trace, head).ok();
    Ok(report)
}

/// Penultimate activations and labels read from CSV: one row per sample,
/// activation columns followed by the label in the last column. A header row
/// is detected when its first cell is not numeric.
pub fn read_trace_csv<R: Read>(reader: R) -> Result<(Matrix, Vec<usize>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        if r == 0 && record.get(0).is_some_and(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        if record.len() < 2 {
            return Err(Error::Format {
                row: r,
                column: 0,
                message: "need at least one activation and a label".into(),
            });
        }
        let mut row = Vec::with_capacity(record.len() - 1);
        for (c, cell) in record.iter().take(record.len() - 1).enumerate() {
            row.push(cell.parse::<f64>().map_err(|e| Error::Format {
                row: r,
                column: c,
                message: e.to_string(),
            })?);
        }
        let last = record.len() - 1;
        let label = record[last].parse::<f64>().map_err(|e| Error::Format {
            row: r,
            column: last,
            message: e.to_string(),
        })?;
        labels.push(usize::from(label > 0.0));
        rows.push(row);
    }
    Ok((Matrix::from_rows(&rows)?, labels))
}
