//! The low-complexity error functional and its individual terms.
//!
//! ```text
//! E = E_emp + C·½Σ‖w‖² + (D/2)·Σ_i Σ_layers Σ_j (pre-activation)²
//! ```
//!
//! `LcnnMode::LastLayer` keeps only the classifier layer's net inputs in the
//! last sum, `LcnnMode::AllLayers` adds every hidden layer. The KL sparsity
//! term belongs to the autoencoder objective and is rejected here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ActivationKind, Matrix};
use crate::network::{ForwardTrace, Network};

/// Clamp applied to activations before the KL logarithms.
pub const KL_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LcnnMode {
    Off,
    LastLayer,
    AllLayers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classifier,
    Autoencoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObjectiveConfig", into = "ObjectiveConfig")]
pub struct ObjectiveSpec {
    pub loss: LossKind,
    /// Coefficient on ½Σ‖w‖².
    pub weight_decay: f64,
    pub lcnn_mode: LcnnMode,
    /// Coefficient on ½Σ(pre-activation)².
    pub lcnn_d: f64,
    pub kl_c: f64,
    pub kl_rho: f64,
    pub dropout_rate: f64,
    /// Target magnitude `t` for ±t coded outputs.
    pub target_magnitude: f64,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            loss: LossKind::SquaredError,
            weight_decay: 0.0,
            lcnn_mode: LcnnMode::Off,
            lcnn_d: 0.0,
            kl_c: 0.0,
            kl_rho: 0.05,
            dropout_rate: 0.0,
            target_magnitude: 0.9,
        }
    }
}

impl ObjectiveSpec {
    pub fn validate(&self, task: Task) -> Result<()> {
        let nonneg = [
            ("weight_decay", self.weight_decay),
            ("lcnn_d", self.lcnn_d),
            ("kl_c", self.kl_c),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Spec(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if !(self.kl_rho > 0.0 && self.kl_rho < 1.0) {
            return Err(Error::Spec(format!("rho must lie in (0, 1), got {}", self.kl_rho)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Spec(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.target_magnitude > 0.0 && self.target_magnitude < 1.0) {
            return Err(Error::Spec(format!(
                "target magnitude must lie in (0, 1), got {}",
                self.target_magnitude
            )));
        }
        if task == Task::Classifier && self.kl_c > 0.0 {
            return Err(Error::Spec(
                "the KL sparsity term is only defined for autoencoder training".into(),
            ));
        }
        Ok(())
    }

    /// Checks that the loss matches the network's output activation.
    pub fn check_network(&self, net: &Network) -> Result<()> {
        let out = net.output_layer().activation;
        match self.loss {
            LossKind::SoftmaxCrossEntropy if out != ActivationKind::Softmax => Err(Error::Spec(format!(
                "softmax cross-entropy needs a softmax output layer, found {out}"
            ))),
            LossKind::SquaredError if out == ActivationKind::Softmax => Err(Error::Spec(
                "squared error is not supported on a softmax output layer".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Short label in the notation-table style, e.g. `SE+W+LC-A`.
    pub fn label(&self) -> String {
        let mut parts = vec![match self.loss {
            LossKind::SquaredError => "SE",
            LossKind::SoftmaxCrossEntropy => "S",
        }];
        if self.weight_decay > 0.0 {
            parts.push("W");
        }
        match self.lcnn_mode {
            LcnnMode::LastLayer => parts.push("LC-L"),
            LcnnMode::AllLayers => parts.push("LC-A"),
            LcnnMode::Off => {}
        }
        if self.dropout_rate > 0.0 {
            parts.push("D");
        }
        parts.join("+")
    }
}

/// JSON form of [`ObjectiveSpec`] using the method-notation names:
/// `S`/`SE` select the loss, `W` enables weight decay with coefficient `C`,
/// `LC-L`/`LC-A` select the complexity penalty with coefficient `lcnn_D`,
/// `D` is the dropout rate and `BN` (batch normalization) must be false.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(rename = "S", default)]
    pub softmax: bool,
    #[serde(rename = "SE", default)]
    pub squared_error: bool,
    #[serde(rename = "W", default)]
    pub weight_decay: bool,
    #[serde(rename = "C", default)]
    pub c: f64,
    #[serde(rename = "LC-L", default)]
    pub lcnn_last: bool,
    #[serde(rename = "LC-A", default)]
    pub lcnn_all: bool,
    #[serde(rename = "lcnn_D", default)]
    pub lcnn_d: f64,
    #[serde(rename = "D", default)]
    pub dropout: f64,
    #[serde(rename = "BN", default)]
    pub batch_norm: bool,
    #[serde(default)]
    pub kl_c: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_t")]
    pub t: f64,
}

fn default_rho() -> f64 {
    0.05
}

fn default_t() -> f64 {
    0.9
}

impl TryFrom<ObjectiveConfig> for ObjectiveSpec {
    type Error = Error;

    fn try_from(c: ObjectiveConfig) -> Result<Self> {
        if c.batch_norm {
            return Err(Error::Spec("batch normalization (BN) is not supported".into()));
        }
        let loss = match (c.softmax, c.squared_error) {
            (true, false) => LossKind::SoftmaxCrossEntropy,
            (false, true) => LossKind::SquaredError,
            _ => return Err(Error::Spec("exactly one of S and SE must be set".into())),
        };
        let lcnn_mode = match (c.lcnn_last, c.lcnn_all) {
            (false, false) => LcnnMode::Off,
            (true, false) => LcnnMode::LastLayer,
            (false, true) => LcnnMode::AllLayers,
            (true, true) => return Err(Error::Spec("LC-L and LC-A are exclusive".into())),
        };
        let spec = ObjectiveSpec {
            loss,
            weight_decay: if c.weight_decay { c.c } else { 0.0 },
            lcnn_mode,
            lcnn_d: if lcnn_mode == LcnnMode::Off { 0.0 } else { c.lcnn_d },
            kl_c: c.kl_c,
            kl_rho: c.rho,
            dropout_rate: c.dropout,
            target_magnitude: c.t,
        };
        spec.validate(Task::Autoencoder)?;
        Ok(spec)
    }
}

impl From<ObjectiveSpec> for ObjectiveConfig {
    fn from(s: ObjectiveSpec) -> Self {
        ObjectiveConfig {
            softmax: s.loss == LossKind::SoftmaxCrossEntropy,
            squared_error: s.loss == LossKind::SquaredError,
            weight_decay: s.weight_decay > 0.0,
            c: s.weight_decay,
            lcnn_last: s.lcnn_mode == LcnnMode::LastLayer,
            lcnn_all: s.lcnn_mode == LcnnMode::AllLayers,
            lcnn_d: s.lcnn_d,
            dropout: s.dropout_rate,
            batch_norm: false,
            kl_c: s.kl_c,
            rho: s.kl_rho,
            t: s.target_magnitude,
        }
    }
}

/// Training targets: a coded matrix for squared error, class indices for
/// softmax cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Matrix),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(m) => m.rows(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Values(m) => Targets::Values(m.select_rows(indices)),
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// `(1/2M)·Σ (y − f(net))²` summed over all output columns.
pub fn empirical_error_squared(outputs: &Matrix, targets: &Matrix) -> Result<f64> {
    if outputs.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "outputs {:?} vs targets {:?}",
            outputs.shape(),
            targets.shape()
        )));
    }
    let m = outputs.rows();
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    let sse: f64 = outputs
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(f, y)| (y - f) * (y - f))
        .sum();
    Ok(sse / (2.0 * m as f64))
}

/// Mean negative log-softmax of the labelled class.
pub fn empirical_error_softmax(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let m = logits.rows();
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != m {
        return Err(Error::Shape(format!("{} labels for {m} rows", labels.len())));
    }
    let k = logits.cols();
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Data(format!("label {label} outside [0, {})", k)));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        total += log_sum - row[label];
    }
    Ok(total / m as f64)
}

/// `Σ_i Σ_j (net_jⁱ)²` over the classifier layer.
pub fn lcnn_penalty_last(trace: &ForwardTrace) -> f64 {
    trace.output_pre().sum_squares()
}

/// Squared pre-activations of every hidden layer plus the classifier layer.
pub fn lcnn_penalty_all(trace: &ForwardTrace) -> f64 {
    trace.pre.iter().map(Matrix::sum_squares).sum()
}

/// `½·Σ w²` over all weights, biases excluded.
pub fn l2_penalty(net: &Network) -> f64 {
    0.5 * net.layers.iter().map(|l| l.weights.sum_squares()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlPenalty {
    pub value: f64,
    /// Activations that had to be clamped into `[KL_CLAMP, 1 - KL_CLAMP]`.
    pub clamped: usize,
}

/// `Σ_i Σ_j KL(ρ ‖ uⱼⁱ)`, one term per sample and hidden unit.
pub fn kl_sparsity_penalty(activations: &Matrix, rho: f64) -> KlPenalty {
    let mut clamped = 0;
    let mut value = 0.0;
    for &u in activations.as_slice() {
        let c = u.clamp(KL_CLAMP, 1.0 - KL_CLAMP);
        if c != u {
            clamped += 1;
        }
        value += rho * (rho / c).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - c)).ln();
    }
    KlPenalty { value, clamped }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub empirical: f64,
    pub weight_decay: f64,
    pub lcnn: f64,
    pub kl: f64,
    pub total: f64,
}

impl ObjectiveBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }

    pub(crate) fn accumulate(&mut self, other: &Self, weight: f64) {
        self.empirical += weight * other.empirical;
        self.weight_decay += weight * other.weight_decay;
        self.lcnn += weight * other.lcnn;
        self.kl += weight * other.kl;
        self.total += weight * other.total;
    }
}

pub fn empirical_error(spec: &ObjectiveSpec, trace: &ForwardTrace, targets: &Targets) -> Result<f64> {
    match (spec.loss, targets) {
        (LossKind::SquaredError, Targets::Values(y)) => empirical_error_squared(trace.output(), y),
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(c)) => empirical_error_softmax(trace.output_pre(), c),
        _ => Err(Error::Spec("targets do not match the loss kind".into())),
    }
}

/// Objective on the trace's batch with penalty sums taken as-is.
pub fn total_objective(
    spec: &ObjectiveSpec,
    net: &Network,
    trace: &ForwardTrace,
    targets: &Targets,
) -> Result<ObjectiveBreakdown> {
    total_objective_scaled(spec, net, trace, targets, 1.0)
}

/// Objective with the per-sample penalty sums multiplied by `sample_scale`;
/// minibatch training passes `M / batch_size` so the penalty estimates the
/// full-dataset sum.
pub fn total_objective_scaled(
    spec: &ObjectiveSpec,
    net: &Network,
    trace: &ForwardTrace,
    targets: &Targets,
    sample_scale: f64,
) -> Result<ObjectiveBreakdown> {
    spec.validate(Task::Classifier)?;
    spec.check_network(net)?;
    let empirical = empirical_error(spec, trace, targets)?;
    let weight_decay = spec.weight_decay * l2_penalty(net);
    let lcnn_sum = match spec.lcnn_mode {
        LcnnMode::Off => 0.0,
        LcnnMode::LastLayer => lcnn_penalty_last(trace),
        LcnnMode::AllLayers => lcnn_penalty_all(trace),
    };
    let lcnn = 0.5 * spec.lcnn_d * sample_scale * lcnn_sum;
    Ok(ObjectiveBreakdown {
        empirical,
        weight_decay,
        lcnn,
        kl: 0.0,
        total: empirical + weight_decay + lcnn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    /// 2-2-1 tanh net with hand-set parameters.
    fn hand_net() -> Network {
        let mut net = Network::init(NetworkConfig {
            layer_widths: vec![2, 2, 1],
            activations: vec![ActivationKind::Tanh, ActivationKind::Tanh],
            seed: 0,
        })
        .unwrap();
        net.layers[0].weights = m(&[vec![1.0, -1.0], vec![0.5, 2.0]]);
        net.layers[0].biases = vec![0.1, -0.2];
        net.layers[1].weights = m(&[vec![1.5, -0.5]]);
        net.layers[1].biases = vec![0.25];
        net
    }

    #[test]
    fn squared_error_examples() {
        let y = m(&[vec![1.0], vec![-1.0]]);
        assert_eq!(empirical_error_squared(&y, &y).unwrap(), 0.0);
        let v = empirical_error_squared(&m(&[vec![0.0]]), &m(&[vec![1.0]])).unwrap();
        assert_eq!(v, 0.5);
        let v = empirical_error_squared(&m(&[vec![0.0], vec![0.0]]), &y).unwrap();
        assert_eq!(v, 0.5);
        assert!(matches!(
            empirical_error_squared(&Matrix::zeros(0, 1), &Matrix::zeros(0, 1)),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn softmax_error_examples() {
        let v = empirical_error_softmax(&m(&[vec![0.3, 0.3]]), &[1]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let v = empirical_error_softmax(&m(&[vec![800.0, 0.0, 0.0]]), &[0]).unwrap();
        assert!(v.abs() < 1e-300);
        let v = empirical_error_softmax(&m(&[vec![1.0, 0.0, 0.0]]), &[0]).unwrap();
        let e = std::f64::consts::E;
        assert!((v - (-(e / (e + 2.0)).ln())).abs() < 1e-15);
        assert!((v - 0.5514).abs() < 1e-4);
        assert!(matches!(
            empirical_error_softmax(&m(&[vec![1.0, 0.0]]), &[2]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn lcnn_last_examples() {
        let trace = |pre: Matrix| ForwardTrace {
            input: Matrix::zeros(pre.rows(), 1),
            post: vec![pre.clone()],
            pre: vec![pre],
            dropout: None,
        };
        assert_eq!(lcnn_penalty_last(&trace(Matrix::zeros(3, 1))), 0.0);
        assert_eq!(lcnn_penalty_last(&trace(m(&[vec![1.0], vec![-2.0]]))), 5.0);
        assert_eq!(lcnn_penalty_last(&trace(m(&[vec![1.0, 1.0, 1.0]]))), 3.0);
        let single = trace(m(&[vec![1.0], vec![-2.0]]));
        assert_eq!(lcnn_penalty_all(&single), lcnn_penalty_last(&single));
    }

    #[test]
    fn lcnn_all_on_hand_net() {
        let net = hand_net();
        let x = m(&[vec![0.5, -1.0]]);
        let t = net.forward(&x).unwrap();
        // hidden pre-activations by hand
        let a1 = 1.0 * 0.5 + -1.0 * -1.0 + 0.1;
        let a2 = 0.5 * 0.5 - 2.0 * 1.0 - 0.2;
        let net_out = 1.5 * f64::tanh(a1) - 0.5 * f64::tanh(a2) + 0.25;
        let expected = a1 * a1 + a2 * a2 + net_out * net_out;
        assert!((lcnn_penalty_all(&t) - expected).abs() < 1e-14);
        assert!((lcnn_penalty_last(&t) - net_out * net_out).abs() < 1e-14);
    }

    #[test]
    fn l2_examples() {
        let mut net = Network::init(NetworkConfig {
            layer_widths: vec![1, 1],
            activations: vec![ActivationKind::Identity],
            seed: 0,
        })
        .unwrap();
        net.layers[0].weights = m(&[vec![0.0]]);
        assert_eq!(l2_penalty(&net), 0.0);
        net.layers[0].weights = m(&[vec![3.0]]);
        assert_eq!(l2_penalty(&net), 4.5);
        net.layers[0].biases = vec![10.0];
        assert_eq!(l2_penalty(&net), 4.5);
    }

    #[test]
    fn kl_examples() {
        let rho = 0.05;
        let at_rho = kl_sparsity_penalty(&Matrix::filled(3, 4, rho), rho);
        assert!(at_rho.value.abs() < 1e-15);
        let half = kl_sparsity_penalty(&m(&[vec![0.5]]), rho);
        let expected = 0.05 * 0.1f64.ln() + 0.95 * 1.9f64.ln();
        assert!((half.value - expected).abs() < 1e-15);
        assert!((half.value - 0.4946).abs() < 1e-4);
        let edges = kl_sparsity_penalty(&m(&[vec![0.0, 1.0]]), rho);
        assert_eq!(edges.clamped, 2);
        assert!(edges.value.is_finite() && edges.value > 0.0);
    }

    #[test]
    fn total_objective_compositions() {
        let net = hand_net();
        let x = m(&[vec![0.5, -1.0], vec![-0.3, 0.8]]);
        let y = Targets::Values(m(&[vec![0.9], vec![-0.9]]));
        let t = net.forward(&x).unwrap();
        let emp = empirical_error(&ObjectiveSpec::default(), &t, &y).unwrap();

        let plain = total_objective(&ObjectiveSpec::default(), &net, &t, &y).unwrap();
        assert_eq!(plain.total, emp);

        let sw = ObjectiveSpec {
            weight_decay: 0.01,
            ..Default::default()
        };
        let got = total_objective(&sw, &net, &t, &y).unwrap();
        assert!((got.total - (emp + 0.01 * l2_penalty(&net))).abs() < 1e-15);

        // SE + W + LC-A written out term by term
        let spec = ObjectiveSpec {
            weight_decay: 0.01,
            lcnn_mode: LcnnMode::AllLayers,
            lcnn_d: 0.1,
            ..Default::default()
        };
        let w_sq: f64 = [1.0, 1.0, 0.25, 4.0, 2.25, 0.25].iter().sum();
        let mut pre_sq = 0.0;
        let mut sse = 0.0;
        for (i, target) in [(0usize, 0.9), (1, -0.9)] {
            let (x0, x1) = (x.get(i, 0), x.get(i, 1));
            let a1 = x0 - x1 + 0.1;
            let a2 = 0.5 * x0 + 2.0 * x1 - 0.2;
            let o = 1.5 * a1.tanh() - 0.5 * a2.tanh() + 0.25;
            pre_sq += a1 * a1 + a2 * a2 + o * o;
            sse += (target - o.tanh()).powi(2);
        }
        let by_hand = sse / 4.0 + 0.01 * 0.5 * w_sq + 0.1 / 2.0 * pre_sq;
        let got = total_objective(&spec, &net, &t, &y).unwrap();
        assert!((got.total - by_hand).abs() < 1e-14, "{} vs {by_hand}", got.total);
    }

    #[test]
    fn kl_on_classifier_is_a_spec_error() {
        let net = hand_net();
        let t = net.forward(&m(&[vec![0.0, 0.0]])).unwrap();
        let spec = ObjectiveSpec {
            kl_c: 1.0,
            ..Default::default()
        };
        let y = Targets::Values(m(&[vec![0.9]]));
        assert!(matches!(total_objective(&spec, &net, &t, &y), Err(Error::Spec(_))));
    }

    #[test]
    fn notation_json_round_trip() {
        let json = r#"{"SE": true, "W": true, "C": 0.001, "LC-A": true, "lcnn_D": 1e-5}"#;
        let spec: ObjectiveSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.loss, LossKind::SquaredError);
        assert_eq!(spec.lcnn_mode, LcnnMode::AllLayers);
        assert_eq!(spec.weight_decay, 0.001);
        assert_eq!(spec.label(), "SE+W+LC-A");
        let back: ObjectiveSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(spec, back);

        for bad in [
            r#"{"SE": true, "BN": true}"#,
            r#"{"S": true, "SE": true}"#,
            r#"{"SE": true, "LC-L": true, "LC-A": true}"#,
            r#"{"SE": true, "D": 1.0}"#,
        ] {
            assert!(serde_json::from_str::<ObjectiveSpec>(bad).is_err(), "{bad}");
        }
    }
}
