//! Backpropagation, minibatch SGD and gradient telemetry.

use std::io::Write;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{activate, activate_derivative, matmul, matmul_tn, ActivationKind, Matrix};
use crate::network::{accuracy, predict_from_scores, ForwardTrace, Network, NetworkDocument};
use crate::objective::{total_objective_scaled, LcnnMode, LossKind, ObjectiveBreakdown, ObjectiveSpec, Targets};

/// Parameter gradients laid out like [`Network::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn scale(&self, s: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w.scale(s)).collect(),
            biases: self.biases.iter().map(|b| b.iter().map(|v| v * s).collect()).collect(),
        }
    }
}

/// Mean of `|g|` over the weight gradient of one layer.
pub fn mean_abs_gradient(gradients: &Gradients, layer: usize) -> Result<f64> {
    let g = gradients
        .weights
        .get(layer)
        .ok_or_else(|| Error::Shape(format!("no layer {layer}")))?;
    let n = g.as_slice().len();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(g.as_slice().iter().map(|v| v.abs()).sum::<f64>() / n as f64)
}

/// Exact gradient of [`crate::objective::total_objective`] on the trace's batch.
pub fn backward(net: &Network, trace: &ForwardTrace, spec: &ObjectiveSpec, targets: &Targets) -> Result<Gradients> {
    backward_scaled(net, trace, spec, targets, 1.0)
}

/// Gradient of [`total_objective_scaled`] with the same `sample_scale`.
pub fn backward_scaled(
    net: &Network,
    trace: &ForwardTrace,
    spec: &ObjectiveSpec,
    targets: &Targets,
    sample_scale: f64,
) -> Result<Gradients> {
    spec.check_network(net)?;
    let depth = net.layers.len();
    if trace.pre.len() != depth || trace.post.len() != depth {
        return Err(Error::Shape(format!(
            "trace has {} layers, network has {depth}",
            trace.pre.len()
        )));
    }
    let m = trace.batch_size();
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    if targets.len() != m {
        return Err(Error::Shape(format!("{} targets for {m} samples", targets.len())));
    }
    let inv_m = 1.0 / m as f64;
    let out_pre = trace.output_pre();
    let out_act = net.output_layer().activation;

    // dE/d(net) at the classifier layer
    let mut delta = match (spec.loss, targets) {
        (LossKind::SquaredError, Targets::Values(y)) => {
            let resid = trace.output().zip_map(y, |f, t| (f - t) * inv_m)?;
            resid.hadamard(&activate_derivative(out_act, out_pre)?)?
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
            let mut d = activate(ActivationKind::Softmax, out_pre);
            for (i, &c) in labels.iter().enumerate() {
                if c >= d.cols() {
                    return Err(Error::Data(format!("label {c} outside [0, {})", d.cols())));
                }
                let v = d.get(i, c);
                d.set(i, c, v - 1.0);
            }
            d.scale(inv_m)
        }
        _ => return Err(Error::Spec("targets do not match the loss kind".into())),
    };
    let lcnn_coef = spec.lcnn_d * sample_scale;
    if spec.lcnn_mode != LcnnMode::Off && lcnn_coef != 0.0 {
        delta.add_scaled(out_pre, lcnn_coef)?;
    }

    let mut weights = vec![Matrix::zeros(0, 0); depth];
    let mut biases = vec![Vec::new(); depth];
    for h in (0..depth).rev() {
        let layer = &net.layers[h];
        let mut gw = matmul_tn(&delta, trace.layer_input(h))?;
        if spec.weight_decay != 0.0 {
            gw.add_scaled(&layer.weights, spec.weight_decay)?;
        }
        weights[h] = gw;
        biases[h] = delta.column_sums();
        if h == 0 {
            break;
        }
        let below = h - 1;
        let mut d_post = matmul(&delta, &layer.weights)?;
        if let Some(mask) = trace.dropout.as_ref().filter(|m| m.layer == below) {
            d_post = d_post.hadamard(&mask.scale)?;
        }
        let below_pre = &trace.pre[below];
        let mut d_pre = d_post.hadamard(&activate_derivative(net.layers[below].activation, below_pre)?)?;
        if spec.lcnn_mode == LcnnMode::AllLayers && lcnn_coef != 0.0 {
            d_pre.add_scaled(below_pre, lcnn_coef)?;
        }
        delta = d_pre;
    }
    Ok(Gradients { weights, biases })
}

/// Inverted dropout: zero each entry with probability `rate` and scale the
/// survivors by `1 / (1 - rate)`. Returns the masked matrix and the
/// per-entry multipliers.
pub fn apply_dropout<R: Rng + ?Sized>(activations: &Matrix, rate: f64, rng: &mut R) -> Result<(Matrix, Matrix)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Spec(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if rate == 0.0 {
        let ones = Matrix::filled(activations.rows(), activations.cols(), 1.0);
        return Ok((activations.clone(), ones));
    }
    let keep = 1.0 / (1.0 - rate);
    let scale_data = (0..activations.as_slice().len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let scale = Matrix::from_vec(activations.rows(), activations.cols(), scale_data)?;
    let masked = activations.hadamard(&scale)?;
    Ok((masked, scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters left out because a ReLU kink lies within the step.
    pub skipped: usize,
}

/// Networks with more parameters than this are checked on a seeded subset.
pub const FULL_CHECK_LIMIT: usize = 1000;
pub const SUBSET_SIZE: usize = 256;
const RELU_KINK: f64 = 1e-4;

/// Relative error between analytic and central-difference gradients,
/// `|g_a − g_n| / max(1e-8, |g_a| + |g_n|)`, maximized over parameters.
///
/// Dropout is not applied: the check is on the deterministic objective.
pub fn gradient_check(
    net: &Network,
    spec: &ObjectiveSpec,
    batch: &Matrix,
    targets: &Targets,
    step: f64,
    seed: u64,
) -> Result<GradientCheck> {
    if batch.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let objective = |n: &Network| -> Result<(f64, ForwardTrace)> {
        let t = n.forward(batch)?;
        let o = total_objective_scaled(spec, n, &t, targets, 1.0)?;
        Ok((o.total, t))
    };
    let base = net.forward(batch)?;
    let analytic = backward(net, &base, spec, targets)?;

    // (layer, is_bias, row, col)
    let mut params = Vec::new();
    for (h, layer) in net.layers.iter().enumerate() {
        for r in 0..layer.weights.rows() {
            for c in 0..layer.weights.cols() {
                params.push((h, false, r, c));
            }
            params.push((h, true, r, 0));
        }
    }
    if params.len() > FULL_CHECK_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<_> = index::sample(&mut rng, params.len(), SUBSET_SIZE).into_vec();
        picked.sort_unstable();
        params = picked.into_iter().map(|i| params[i]).collect();
    }

    let has_relu = net.layers.iter().any(|l| l.activation == ActivationKind::Relu);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    let mut probe = net.clone();
    for (h, is_bias, r, c) in params {
        let read = |n: &Network| {
            if is_bias {
                n.layers[h].biases[r]
            } else {
                n.layers[h].weights.get(r, c)
            }
        };
        let write = |n: &mut Network, v: f64| {
            if is_bias {
                n.layers[h].biases[r] = v;
            } else {
                n.layers[h].weights.set(r, c, v);
            }
        };
        let original = read(&probe);
        write(&mut probe, original + step);
        let (plus, t_plus) = objective(&probe)?;
        write(&mut probe, original - step);
        let (minus, t_minus) = objective(&probe)?;
        write(&mut probe, original);

        if has_relu && crosses_relu_kink(net, &base, &t_plus, &t_minus, h, r) {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let exact = if is_bias {
            analytic.biases[h][r]
        } else {
            analytic.weights[h].get(r, c)
        };
        let rel = (exact - numeric).abs() / (exact.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        checked += 1;
    }
    Ok(GradientCheck {
        max_relative_error: worst,
        checked,
        skipped,
    })
}

fn crosses_relu_kink(
    net: &Network,
    base: &ForwardTrace,
    plus: &ForwardTrace,
    minus: &ForwardTrace,
    layer: usize,
    unit: usize,
) -> bool {
    if net.layers[layer].activation == ActivationKind::Relu {
        let own = &base.pre[layer];
        if (0..own.rows()).any(|i| own.get(i, unit).abs() < RELU_KINK) {
            return true;
        }
    }
    net.layers.iter().enumerate().any(|(h, l)| {
        l.activation == ActivationKind::Relu
            && plus.pre[h]
                .as_slice()
                .iter()
                .zip(minus.pre[h].as_slice())
                .any(|(a, b)| (*a > 0.0) != (*b > 0.0))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 0.05,
            lr_decay: 0.99,
            shuffle_seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self, samples: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > samples {
            return Err(Error::Config(format!(
                "batch size {} must lie in [1, {samples}]",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Sample-weighted mean of the minibatch objectives.
    pub objective: ObjectiveBreakdown,
    /// Accuracy of the minibatch predictions made during the epoch.
    pub train_accuracy: Option<f64>,
    pub validation_accuracy: Option<f64>,
    /// Per layer, mean |weight gradient| averaged over the epoch's steps.
    pub mean_abs_gradient: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub network: NetworkDocument,
}

impl TrainReport {
    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }

    /// Copy with wall-clock fields zeroed, for reproducible artifacts.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for e in &mut r.epochs {
            e.seconds = 0.0;
        }
        r
    }

    /// Mean over epochs of the per-layer mean |gradient|.
    pub fn epoch_averaged_gradient(&self) -> Vec<f64> {
        let Some(first) = self.epochs.first() else {
            return Vec::new();
        };
        let mut acc = vec![0.0; first.mean_abs_gradient.len()];
        for e in &self.epochs {
            for (a, g) in acc.iter_mut().zip(&e.mean_abs_gradient) {
                *a += g;
            }
        }
        acc.iter().map(|a| a / self.epochs.len() as f64).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let layers = self.epochs.first().map_or(0, |e| e.mean_abs_gradient.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "epoch",
            "learning_rate",
            "objective",
            "empirical",
            "weight_decay",
            "lcnn",
            "kl",
            "train_accuracy",
            "validation_accuracy",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..layers).map(|h| format!("grad_layer_{h}")));
        header.push("seconds".into());
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                e.learning_rate.to_string(),
                e.objective.total.to_string(),
                e.objective.empirical.to_string(),
                e.objective.weight_decay.to_string(),
                e.objective.lcnn.to_string(),
                e.objective.kl.to_string(),
                opt(e.train_accuracy),
                opt(e.validation_accuracy),
            ];
            row.extend(e.mean_abs_gradient.iter().map(|g| g.to_string()));
            row.push(e.seconds.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Training inputs: features, coded targets and the class indices used for
/// accuracy.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a Matrix,
    pub targets: &'a Targets,
    pub labels: &'a [usize],
}

#[derive(Debug, Clone, Copy)]
pub struct Holdout<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [usize],
}

/// Plain minibatch SGD, `w ← w − lr·g`, with the complexity penalty scaled
/// by `M / batch` on every step. Shuffling and dropout draw from separate
/// ChaCha8 streams keyed by `schedule.shuffle_seed`.
pub fn sgd_train(
    net: &mut Network,
    train: Batch<'_>,
    validation: Option<Holdout<'_>>,
    spec: &ObjectiveSpec,
    schedule: &TrainSchedule,
) -> Result<TrainReport> {
    let m = train.features.rows();
    if train.targets.len() != m || train.labels.len() != m {
        return Err(Error::Shape("features, targets and labels disagree in length".into()));
    }
    spec.validate(crate::objective::Task::Classifier)?;
    spec.check_network(net)?;
    let mut report = TrainReport {
        epochs: Vec::with_capacity(schedule.epochs),
        network: net.to_document(),
    };
    if schedule.epochs == 0 {
        return Ok(report);
    }
    schedule.validate(m)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(schedule.shuffle_seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(schedule.shuffle_seed);
    dropout_rng.set_stream(1);
    let mut order: Vec<usize> = (0..m).collect();
    let mut lr = schedule.learning_rate;

    for epoch in 0..schedule.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut objective = ObjectiveBreakdown::default();
        let mut grad_sums = vec![0.0; net.layers.len()];
        let mut steps = 0usize;
        let mut hits = 0usize;

        for chunk in order.chunks(schedule.batch_size) {
            let x = train.features.select_rows(chunk);
            let y = train.targets.select(chunk);
            let trace = net.forward_with_dropout(&x, spec.dropout_rate, &mut dropout_rng)?;
            let scale = m as f64 / chunk.len() as f64;
            let step_obj = total_objective_scaled(spec, net, &trace, &y, scale)?;
            if !step_obj.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    report: Box::new(report),
                });
            }
            objective.accumulate(&step_obj, chunk.len() as f64 / m as f64);
            let predicted = predict_from_scores(trace.output_pre());
            hits += predicted
                .iter()
                .zip(chunk)
                .filter(|(p, &i)| **p == train.labels[i])
                .count();

            let grads = backward_scaled(net, &trace, spec, &y, scale)?;
            for (h, sum) in grad_sums.iter_mut().enumerate() {
                *sum += mean_abs_gradient(&grads, h)?;
            }
            for (layer, (gw, gb)) in net.layers.iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
                layer.weights.add_scaled(gw, -lr)?;
                for (b, g) in layer.biases.iter_mut().zip(gb) {
                    *b -= lr * g;
                }
            }
            steps += 1;
        }
        if !net.is_finite() {
            return Err(Error::Diverged {
                epoch,
                report: Box::new(report),
            });
        }

        let validation_accuracy = match validation {
            Some(v) if v.features.rows() > 0 => Some(accuracy(&net.predict(v.features)?, v.labels)),
            _ => None,
        };
        report.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            objective,
            train_accuracy: Some(hits as f64 / m as f64),
            validation_accuracy,
            mean_abs_gradient: grad_sums.iter().map(|s| s / steps as f64).collect(),
            seconds: started.elapsed().as_secs_f64(),
        });
        report.network = net.to_document();
        lr *= schedule.lr_decay;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::objective::total_objective;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn linear_net(inputs: usize, seed: u64) -> Network {
        Network::init(NetworkConfig {
            layer_widths: vec![inputs, 1],
            activations: vec![ActivationKind::Identity],
            seed,
        })
        .unwrap()
    }

    #[test]
    fn linear_squared_error_gradient_is_least_squares() {
        let x = random_batch(6, 3, 1);
        let y = random_batch(6, 1, 2);
        let mut net = linear_net(3, 3);
        net.layers[0].biases = vec![0.2];
        let trace = net.forward(&x).unwrap();
        let g = backward(&net, &trace, &ObjectiveSpec::default(), &Targets::Values(y.clone())).unwrap();
        // d/dw (1/2M)‖Xw + b − y‖² = Xᵀ(Xw + b − y)/M
        let w = net.layers[0].weights.row(0).to_vec();
        for k in 0..3 {
            let mut expected = 0.0;
            for i in 0..6 {
                let pred: f64 = (0..3).map(|j| x.get(i, j) * w[j]).sum::<f64>() + 0.2;
                expected += x.get(i, k) * (pred - y.get(i, 0)) / 6.0;
            }
            assert!((g.weights[0].get(0, k) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_vanishes_at_one_weight_minimum() {
        // E(w) = (1/2M)Σ(y − w·x)² + (C/2)w², minimized at w* = Σxy / (Σx² + M·C)
        let x = Matrix::from_vec(3, 1, vec![1.0, 2.0, -1.0]).unwrap();
        let y = Matrix::from_vec(3, 1, vec![0.5, 1.5, -0.2]).unwrap();
        let c = 0.1;
        let sxy: f64 = 0.5 + 3.0 + 0.2;
        let sxx: f64 = 1.0 + 4.0 + 1.0;
        let w_star = sxy / (sxx + 3.0 * c);
        let mut net = linear_net(1, 0);
        net.layers[0].weights = Matrix::from_vec(1, 1, vec![w_star]).unwrap();
        let spec = ObjectiveSpec {
            weight_decay: c,
            ..Default::default()
        };
        let trace = net.forward(&x).unwrap();
        let g = backward(&net, &trace, &spec, &Targets::Values(y)).unwrap();
        assert!(g.weights[0].get(0, 0).abs() < 1e-15);
    }

    #[test]
    fn last_layer_penalty_gradient_by_hand() {
        let mut net = Network::init(NetworkConfig {
            layer_widths: vec![2, 2, 1],
            activations: vec![ActivationKind::Tanh, ActivationKind::Identity],
            seed: 5,
        })
        .unwrap();
        net.layers[1].biases = vec![0.3];
        let x = Matrix::from_vec(1, 2, vec![0.4, -0.9]).unwrap();
        let trace = net.forward(&x).unwrap();
        // Only the LC-L term: y = f(net) so the empirical part is zero.
        let y = Targets::Values(trace.output().clone());
        let spec = ObjectiveSpec {
            lcnn_mode: LcnnMode::LastLayer,
            lcnn_d: 2.0,
            ..Default::default()
        };
        let g = backward(&net, &trace, &spec, &y).unwrap();
        // (D/2)·d/dw Σ net² = (D/2)·2·net·u
        let net_in = trace.output_pre().get(0, 0);
        for j in 0..2 {
            let u = trace.post[0].get(0, j);
            assert!((g.weights[1].get(0, j) - 2.0 * net_in * u).abs() < 1e-14);
        }
    }

    #[test]
    fn finite_difference_check_on_lca_net() {
        let net = Network::init(NetworkConfig {
            layer_widths: vec![4, 6, 3],
            activations: vec![ActivationKind::Tanh, ActivationKind::Tanh],
            seed: 21,
        })
        .unwrap();
        let x = random_batch(5, 4, 7);
        let y = Targets::Values(random_batch(5, 3, 8).map(|v| v.signum() * 0.9));
        let spec = ObjectiveSpec {
            weight_decay: 0.01,
            lcnn_mode: LcnnMode::AllLayers,
            lcnn_d: 0.05,
            ..Default::default()
        };
        let check = gradient_check(&net, &spec, &x, &y, 1e-5, 0).unwrap();
        assert!(check.max_relative_error < 1e-5, "{check:?}");
        assert_eq!(check.checked, net.parameter_count());
    }

    #[test]
    fn relu_kinks_are_skipped() {
        let mut net = Network::init(NetworkConfig {
            layer_widths: vec![2, 3, 1],
            activations: vec![ActivationKind::Relu, ActivationKind::Identity],
            seed: 2,
        })
        .unwrap();
        // Unit 0 sits exactly on its kink for the only sample.
        net.layers[0].weights.set(0, 0, 0.0);
        net.layers[0].weights.set(0, 1, 0.0);
        let x = Matrix::from_vec(1, 2, vec![0.5, -0.5]).unwrap();
        let y = Targets::Values(Matrix::from_vec(1, 1, vec![0.3]).unwrap());
        let check = gradient_check(&net, &ObjectiveSpec::default(), &x, &y, 1e-5, 0).unwrap();
        assert!(check.skipped >= 3);
        assert!(check.max_relative_error < 1e-5);
    }

    #[test]
    fn large_nets_check_a_subset() {
        let net = Network::init(NetworkConfig {
            layer_widths: vec![30, 40, 2],
            activations: vec![ActivationKind::Tanh, ActivationKind::Softmax],
            seed: 1,
        })
        .unwrap();
        let x = random_batch(4, 30, 3);
        let y = Targets::Classes(vec![0, 1, 1, 0]);
        let spec = ObjectiveSpec {
            loss: LossKind::SoftmaxCrossEntropy,
            ..Default::default()
        };
        let check = gradient_check(&net, &spec, &x, &y, 1e-5, 9).unwrap();
        assert_eq!(check.checked, SUBSET_SIZE);
        assert!(check.max_relative_error < 1e-5);
    }

    #[test]
    fn dropout_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = random_batch(3, 4, 1);
        let (same, _) = apply_dropout(&u, 0.0, &mut rng).unwrap();
        assert_eq!(same, u);
        assert!(matches!(apply_dropout(&u, 1.0, &mut rng), Err(Error::Spec(_))));

        let ones = Matrix::filled(100, 100, 1.0);
        let (masked, _) = apply_dropout(&ones, 0.5, &mut rng).unwrap();
        let survivors = masked.as_slice().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / 1e4;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
        // inverted scaling keeps the expectation
        assert!((masked.sum() / 1e4 - 1.0).abs() < 0.04);
    }

    #[test]
    fn mean_abs_gradient_examples() {
        let g = Gradients {
            weights: vec![Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap()],
            biases: vec![vec![0.0]],
        };
        assert_eq!(mean_abs_gradient(&g, 0).unwrap(), 1.0);
        assert_eq!(mean_abs_gradient(&g.scale(2.0), 0).unwrap(), 2.0);
        assert_eq!(mean_abs_gradient(&g.scale(0.0), 0).unwrap(), 0.0);
        assert!(mean_abs_gradient(&g, 1).is_err());
    }

    fn blobs(seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = i % 2;
            let centre = if c == 1 { 1.0 } else { -1.0 };
            rows.push(vec![
                centre + rng.random_range(-0.5..0.5),
                centre + rng.random_range(-0.5..0.5),
            ]);
            labels.push(c);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    fn pm_targets(labels: &[usize]) -> Targets {
        let data = labels.iter().map(|&c| if c == 1 { 0.9 } else { -0.9 }).collect();
        Targets::Values(Matrix::from_vec(labels.len(), 1, data).unwrap())
    }

    #[test]
    fn zero_epochs_leaves_network_unchanged() {
        let (x, labels) = blobs(1);
        let targets = pm_targets(&labels);
        let mut net = linear_net(2, 4);
        let before = net.clone();
        let schedule = TrainSchedule {
            epochs: 0,
            ..Default::default()
        };
        let batch = Batch {
            features: &x,
            targets: &targets,
            labels: &labels,
        };
        let report = sgd_train(&mut net, batch, None, &ObjectiveSpec::default(), &schedule).unwrap();
        assert_eq!(net, before);
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let (x, labels) = blobs(2);
        let targets = pm_targets(&labels);
        let mut net = Network::init(NetworkConfig {
            layer_widths: vec![2, 1],
            activations: vec![ActivationKind::Tanh],
            seed: 3,
        })
        .unwrap();
        let schedule = TrainSchedule {
            epochs: 50,
            batch_size: 10,
            learning_rate: 0.1,
            lr_decay: 1.0,
            shuffle_seed: 4,
        };
        let batch = Batch {
            features: &x,
            targets: &targets,
            labels: &labels,
        };
        sgd_train(&mut net, batch, None, &ObjectiveSpec::default(), &schedule).unwrap();
        assert_eq!(accuracy(&net.predict(&x).unwrap(), &labels), 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let (x, labels) = blobs(3);
        let targets = pm_targets(&labels);
        let spec = ObjectiveSpec {
            lcnn_mode: LcnnMode::AllLayers,
            lcnn_d: 1e-3,
            dropout_rate: 0.2,
            ..Default::default()
        };
        let run = || {
            let mut net = Network::init(NetworkConfig {
                layer_widths: vec![2, 5, 1],
                activations: vec![ActivationKind::Tanh, ActivationKind::Tanh],
                seed: 8,
            })
            .unwrap();
            let batch = Batch {
                features: &x,
                targets: &targets,
                labels: &labels,
            };
            let holdout = Holdout {
                features: &x,
                labels: &labels,
            };
            sgd_train(
                &mut net,
                batch,
                Some(holdout),
                &spec,
                &TrainSchedule {
                    epochs: 5,
                    ..Default::default()
                },
            )
            .unwrap()
            .without_timing()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_reported() {
        let (x, labels) = blobs(4);
        let targets = pm_targets(&labels);
        let mut net = linear_net(2, 1);
        net.layers[0].activation = ActivationKind::Identity;
        let schedule = TrainSchedule {
            epochs: 200,
            batch_size: 60,
            learning_rate: 1e3,
            lr_decay: 1.0,
            shuffle_seed: 0,
        };
        let batch = Batch {
            features: &x,
            targets: &targets,
            labels: &labels,
        };
        match sgd_train(&mut net, batch, None, &ObjectiveSpec::default(), &schedule) {
            Err(Error::Diverged { report, .. }) => {
                assert!(report.epochs.iter().all(|e| e.objective.total.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn tiny_step_does_not_increase_objective() {
        for seed in 0..100 {
            let net = Network::init(NetworkConfig {
                layer_widths: vec![3, 4, 2],
                activations: vec![ActivationKind::Tanh, ActivationKind::Tanh],
                seed,
            })
            .unwrap();
            let x = random_batch(6, 3, seed + 1000);
            let y = Targets::Values(random_batch(6, 2, seed + 2000).map(|v| v.signum() * 0.9));
            let spec = ObjectiveSpec {
                weight_decay: 1e-2,
                lcnn_mode: LcnnMode::AllLayers,
                lcnn_d: 1e-2,
                ..Default::default()
            };
            let trace = net.forward(&x).unwrap();
            let before = total_objective(&spec, &net, &trace, &y).unwrap().total;
            let g = backward(&net, &trace, &spec, &y).unwrap();
            let mut stepped = net.clone();
            for (l, (gw, gb)) in stepped.layers.iter_mut().zip(g.weights.iter().zip(&g.biases)) {
                l.weights.add_scaled(gw, -1e-6).unwrap();
                for (b, d) in l.biases.iter_mut().zip(gb) {
                    *b -= 1e-6 * d;
                }
            }
            let t2 = stepped.forward(&x).unwrap();
            let after = total_objective(&spec, &stepped, &t2, &y).unwrap().total;
            assert!(after <= before, "seed {seed}: {before} -> {after}");
        }
    }
}
