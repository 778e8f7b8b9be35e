//! Fully connected feedforward networks and the cached forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{activate, matmul_nt, ActivationKind, Matrix};

pub const NETWORK_FORMAT: &str = "lcnn-network";
pub const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `[input, hidden..., output]`
    pub layer_widths: Vec<usize>,
    /// One activation per non-input layer.
    pub activations: Vec<ActivationKind>,
    pub seed: u64,
}

impl NetworkConfig {
    /// Input, hidden layers sharing one activation, and an output layer.
    pub fn new(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_activation: ActivationKind,
        output_activation: ActivationKind,
        seed: u64,
    ) -> Self {
        let mut layer_widths = Vec::with_capacity(hidden.len() + 2);
        layer_widths.push(input);
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(output);
        let mut activations = vec![hidden_activation; hidden.len()];
        activations.push(output_activation);
        Self {
            layer_widths,
            activations,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Config(
                "a network needs at least an input and an output layer".into(),
            ));
        }
        if let Some(i) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("layer {i} has zero width")));
        }
        if self.activations.len() != self.layer_widths.len() - 1 {
            return Err(Error::Config(format!(
                "{} activations given for {} weight layers",
                self.activations.len(),
                self.layer_widths.len() - 1
            )));
        }
        let last = self.activations.len() - 1;
        if let Some(i) = self.activations[..last]
            .iter()
            .position(|a| *a == ActivationKind::Softmax)
        {
            return Err(Error::Config(format!(
                "softmax is only legal on the output layer (found on layer {})",
                i + 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `(fan_out, fan_in)`
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub activation: ActivationKind,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.rows()
    }

    /// Pre-activations `U · Wᵀ + b` for a batch `U` of shape `(M, fan_in)`.
    pub fn pre_activation(&self, input: &Matrix) -> Result<Matrix> {
        let mut a = matmul_nt(input, &self.weights)?;
        a.add_row_vector(&self.biases)?;
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub layers: Vec<Layer>,
}

/// Cached activations of one forward pass over a batch.
///
/// `pre[h]` and `post[h]` hold layer `h`'s pre-activations and activations,
/// one sample per row. The last entry of `pre` is the classifier's net input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Matrix,
    pub pre: Vec<Matrix>,
    pub post: Vec<Matrix>,
    pub dropout: Option<DropoutMask>,
}

/// Inverted-dropout multipliers applied to `post[layer]`: each entry is 0 or
/// `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub layer: usize,
    pub scale: Matrix,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    pub fn output_pre(&self) -> &Matrix {
        self.pre.last().expect("trace has an output layer")
    }

    pub fn output(&self) -> &Matrix {
        self.post.last().expect("trace has an output layer")
    }

    /// Activations feeding the output layer (the input batch when there are
    /// no hidden layers).
    pub fn penultimate(&self) -> &Matrix {
        match self.post.len() {
            0 | 1 => &self.input,
            n => &self.post[n - 2],
        }
    }

    /// Activations feeding layer `h`.
    pub fn layer_input(&self, h: usize) -> &Matrix {
        if h == 0 {
            &self.input
        } else {
            &self.post[h - 1]
        }
    }

    /// Penultimate activations with a constant 1 appended to each row.
    pub fn augmented_penultimate(&self) -> Matrix {
        self.penultimate().append_column(1.0)
    }
}

impl Network {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` weights from a ChaCha8 stream seeded
    /// with `config.seed`; zero biases.
    pub fn init(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = config
            .layer_widths
            .windows(2)
            .zip(&config.activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Layer {
                    weights: Matrix::from_vec(fan_out, fan_in, data).expect("sized above"),
                    biases: vec![0.0; fan_out],
                    activation,
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn input_width(&self) -> usize {
        self.config.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.config.layer_widths.last().expect("validated")
    }

    /// Width of the layer feeding the classifier.
    pub fn penultimate_width(&self) -> usize {
        let w = &self.config.layer_widths;
        w[w.len() - 2]
    }

    pub fn output_layer(&self) -> &Layer {
        self.layers.last().expect("validated")
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * l.weights.cols() + l.biases.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.biases.iter().all(|b| b.is_finite()))
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardTrace> {
        self.forward_impl(batch, None::<&mut ChaCha8Rng>, 0.0)
    }

    /// Forward pass with inverted dropout on the penultimate hidden layer.
    /// With no hidden layer or `rate == 0` this is a plain forward pass.
    pub fn forward_with_dropout<R: Rng + ?Sized>(
        &self,
        batch: &Matrix,
        rate: f64,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        self.forward_impl(batch, Some(rng), rate)
    }

    fn forward_impl<R: Rng + ?Sized>(&self, batch: &Matrix, rng: Option<&mut R>, rate: f64) -> Result<ForwardTrace> {
        if batch.cols() != self.input_width() {
            return Err(Error::Shape(format!(
                "batch has {} features, network expects {}",
                batch.cols(),
                self.input_width()
            )));
        }
        if !batch.is_finite() {
            return Err(Error::Data("batch contains non-finite values".into()));
        }
        let dropout_layer = match (rng.is_some() && rate > 0.0, self.layers.len()) {
            (true, n) if n >= 2 => Some(n - 2),
            _ => None,
        };
        let mut rng = rng;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        let mut dropout = None;
        for (h, layer) in self.layers.iter().enumerate() {
            let input = if h == 0 { batch } else { &post[h - 1] };
            let a = layer.pre_activation(input)?;
            let mut u = activate(layer.activation, &a);
            if Some(h) == dropout_layer {
                let rng = rng.as_deref_mut().expect("dropout requires an rng");
                let (masked, scale) = crate::training::apply_dropout(&u, rate, rng)?;
                u = masked;
                dropout = Some(DropoutMask { layer: h, scale });
            }
            pre.push(a);
            post.push(u);
        }
        Ok(ForwardTrace {
            input: batch.clone(),
            pre,
            post,
            dropout,
        })
    }

    /// Class indices. A single-output network thresholds its net input at 0
    /// (index 1 is the +1 class); otherwise the argmax over class scores, ties
    /// going to the lowest index.
    pub fn predict(&self, batch: &Matrix) -> Result<Vec<usize>> {
        let trace = self.forward(batch)?;
        Ok(predict_from_scores(trace.output_pre()))
    }

    /// Output weights and bias of unit `j` as one vector `β = (w, b)`.
    pub fn output_beta(&self, j: usize) -> Vec<f64> {
        let layer = self.output_layer();
        let mut beta = layer.weights.row(j).to_vec();
        beta.push(layer.biases[j]);
        beta
    }

    pub fn to_document(&self) -> NetworkDocument {
        NetworkDocument {
            format: NETWORK_FORMAT.into(),
            version: NETWORK_FORMAT_VERSION,
            kind: "feedforward".into(),
            layer_widths: self.config.layer_widths.clone(),
            activations: self.config.activations.clone(),
            seed: self.config.seed,
            weights: self.layers.iter().map(|l| l.weights.as_slice().to_vec()).collect(),
            biases: self.layers.iter().map(|l| l.biases.clone()).collect(),
        }
    }

    pub fn from_document(doc: NetworkDocument) -> Result<Self> {
        doc.check_header("feedforward")?;
        let config = NetworkConfig {
            layer_widths: doc.layer_widths,
            activations: doc.activations,
            seed: doc.seed,
        };
        config.validate()?;
        if doc.weights.len() != config.activations.len() || doc.biases.len() != doc.weights.len() {
            return Err(Error::Config("layer count does not match widths".into()));
        }
        let mut layers = Vec::with_capacity(doc.weights.len());
        for (h, (w, b)) in doc.weights.into_iter().zip(doc.biases).enumerate() {
            let (fan_in, fan_out) = (config.layer_widths[h], config.layer_widths[h + 1]);
            if b.len() != fan_out {
                return Err(Error::Config(format!("layer {h} bias length {}", b.len())));
            }
            let weights = Matrix::from_vec(fan_out, fan_in, w)?;
            if !weights.is_finite() || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("layer {h} has non-finite parameters")));
            }
            layers.push(Layer {
                weights,
                biases: b,
                activation: config.activations[h],
            });
        }
        Ok(Self { config, layers })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(s)?)
    }
}

pub fn predict_from_scores(scores: &Matrix) -> Vec<usize> {
    (0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            if row.len() == 1 {
                usize::from(row[0] >= 0.0)
            } else {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            }
        })
        .collect()
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Versioned JSON envelope shared by feedforward networks and autoencoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDocument {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub layer_widths: Vec<usize>,
    pub activations: Vec<ActivationKind>,
    pub seed: u64,
    /// Row-major `(fan_out, fan_in)` weights per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl NetworkDocument {
    pub(crate) fn check_header(&self, kind: &str) -> Result<()> {
        if self.format != NETWORK_FORMAT {
            return Err(Error::Config(format!("unknown format '{}'", self.format)));
        }
        if self.version != NETWORK_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported network document version {}",
                self.version
            )));
        }
        if self.kind != kind {
            return Err(Error::Config(format!(
                "expected a '{kind}' document, found '{}'",
                self.kind
            )));
        }
        Ok(())
    }
}
