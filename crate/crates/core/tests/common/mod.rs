//! Oracles shared by the integration tests. Each one recomputes a quantity
//! from first principles rather than through the library routine under test.
#![allow(dead_code)]

use std::path::PathBuf;

use lcnn::linalg::Matrix;
use lcnn::network::Network;
use lcnn::objective::{total_objective, ObjectiveSpec, Targets};
use lcnn::training::backward;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn manifests_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../manifests")
}

/// Whether `y_i · wᵀx_i ≥ 1` has a solution, by Fourier–Motzkin elimination.
/// Right-hand sides stay positive under the nonnegative combinations, so the
/// system is feasible exactly when elimination leaves no constraint.
pub fn homogeneous_feasible(points: &[Vec<f64>], signs: &[f64]) -> bool {
    let mut rows: Vec<(Vec<f64>, f64)> = points
        .iter()
        .zip(signs)
        .map(|(p, s)| (p.iter().map(|v| v * s).collect(), 1.0))
        .collect();
    let dims = points.first().map_or(0, Vec::len);
    for k in 0..dims {
        let (pos, rest): (Vec<_>, Vec<_>) = rows.into_iter().partition(|(a, _)| a[k] > 0.0);
        let (neg, zero): (Vec<_>, Vec<_>) = rest.into_iter().partition(|(a, _)| a[k] < 0.0);
        rows = zero;
        for (ap, bp) in &pos {
            for (an, bn) in &neg {
                let (mp, mn) = (-an[k], ap[k]);
                let a: Vec<f64> = ap.iter().zip(an).map(|(x, y)| mp * x + mn * y).collect();
                rows.push((a, mp * bp + mn * bn));
            }
        }
    }
    rows.is_empty()
}

/// Number of labelings of `points` realizable by a hyperplane through the
/// origin, by enumeration.
pub fn count_homogeneous_dichotomies(points: &[Vec<f64>]) -> u64 {
    let m = points.len();
    (0u64..1 << m)
        .filter(|mask| {
            let signs: Vec<f64> = (0..m).map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
            homogeneous_feasible(points, &signs)
        })
        .count() as u64
}

/// Two-sided Wilcoxon p-value by listing every sign assignment of the
/// average ranks of the nonzero `|a − b|`.
pub fn wilcoxon_enumeration_p(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let below = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let observed = w_plus.min(total - w_plus);
    let hits = (0u32..1 << n)
        .filter(|mask| {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            w.min(total - w) <= observed
        })
        .count();
    hits as f64 / f64::from(1u32 << n)
}

/// Worst relative error between `backward` and central differences of
/// `total_objective` over every parameter.
pub fn finite_difference_error(net: &Network, spec: &ObjectiveSpec, x: &Matrix, y: &Targets, step: f64) -> f64 {
    let trace = net.forward(x).unwrap();
    let grads = backward(net, &trace, spec, y).unwrap();
    let eval = |n: &Network| total_objective(spec, n, &n.forward(x).unwrap(), y).unwrap().total;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for h in 0..net.layers.len() {
        let (rows, cols) = net.layers[h].weights.shape();
        for r in 0..rows {
            for c in 0..=cols {
                let get = |n: &Network| {
                    if c == cols {
                        n.layers[h].biases[r]
                    } else {
                        n.layers[h].weights.get(r, c)
                    }
                };
                let set = |n: &mut Network, v: f64| {
                    if c == cols {
                        n.layers[h].biases[r] = v
                    } else {
                        n.layers[h].weights.set(r, c, v)
                    }
                };
                let w0 = get(&probe);
                set(&mut probe, w0 + step);
                let plus = eval(&probe);
                set(&mut probe, w0 - step);
                let minus = eval(&probe);
                set(&mut probe, w0);
                let numeric = (plus - minus) / (2.0 * step);
                let exact = if c == cols {
                    grads.biases[h][r]
                } else {
                    grads.weights[h].get(r, c)
                };
                worst = worst.max((exact - numeric).abs() / (exact.abs() + numeric.abs()).max(1e-8));
            }
        }
    }
    worst
}
