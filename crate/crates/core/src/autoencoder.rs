//! Single-hidden-layer sparse autoencoder with logistic encoder and decoder,
//! trained on
//! `½Σ‖x − x̂‖² + C·ΣΣ KL(ρ‖u) + (D/2)·ΣΣ(decoder pre-activation)²`,
//! plus weight and filter diagnostics.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_tn, ActivationKind, Matrix};
use crate::network::{accuracy, ForwardTrace, Network, NetworkConfig, NetworkDocument};
use crate::objective::{kl_sparsity_penalty, LossKind, ObjectiveBreakdown, ObjectiveSpec, Targets, KL_CLAMP};
use crate::training::{
    mean_abs_gradient, sgd_train, Batch, EpochRecord, GradientCheck, Gradients, Holdout, TrainReport, TrainSchedule,
    FULL_CHECK_LIMIT, SUBSET_SIZE,
};

pub const AUTOENCODER_KIND: &str = "sparse_autoencoder";

/// Coefficients of the autoencoder objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeObjective {
    /// KL sparsity weight.
    pub c: f64,
    /// Weight on the decoder pre-activation penalty.
    pub d: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_rho() -> f64 {
    0.05
}

impl SaeObjective {
    pub fn new(c: f64, d: f64, rho: f64) -> Self {
        Self { c, d, rho }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("C", self.c), ("D", self.d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Spec(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Spec(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        Ok(())
    }
}

/// Encoder is layer 0 (`l × n`), decoder is layer 1 (`n × l`).
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    net: Network,
}

impl Autoencoder {
    pub fn init(inputs: usize, hidden: usize, seed: u64) -> Result<Self> {
        let config = NetworkConfig {
            layer_widths: vec![inputs, hidden, inputs],
            activations: vec![ActivationKind::Logistic; 2],
            seed,
        };
        Ok(Self {
            net: Network::init(config)?,
        })
    }

    fn from_network(net: Network) -> Result<Self> {
        let w = &net.config.layer_widths;
        if w.len() != 3 || w[0] != w[2] || net.layers.iter().any(|l| l.activation != ActivationKind::Logistic) {
            return Err(Error::Config(
                "an autoencoder is n-l-n with logistic encoder and decoder".into(),
            ));
        }
        Ok(Self { net })
    }

    pub fn inputs(&self) -> usize {
        self.net.config.layer_widths[0]
    }

    pub fn hidden(&self) -> usize {
        self.net.config.layer_widths[1]
    }

    pub fn encoder_weights(&self) -> &Matrix {
        &self.net.layers[0].weights
    }

    pub fn encoder_biases(&self) -> &[f64] {
        &self.net.layers[0].biases
    }

    pub fn decoder_weights(&self) -> &Matrix {
        &self.net.layers[1].weights
    }

    pub fn decoder_biases(&self) -> &[f64] {
        &self.net.layers[1].biases
    }

    /// The underlying `n-l-n` network.
    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    /// Encoder and decoder weights, biases excluded.
    pub fn all_weights(&self) -> Vec<f64> {
        let mut w = self.encoder_weights().as_slice().to_vec();
        w.extend_from_slice(self.decoder_weights().as_slice());
        w
    }

    /// Hidden activations `u` and reconstructions `x̂` in one trace.
    pub fn forward(&self, batch: &Matrix) -> Result<ForwardTrace> {
        if let Some(v) = batch.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!(
                "autoencoder inputs must be scaled to [0, 1], found {v}"
            )));
        }
        self.net.forward(batch)
    }

    pub fn encode(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward(batch)?.post.swap_remove(0))
    }

    pub fn to_document(&self) -> NetworkDocument {
        let mut doc = self.net.to_document();
        doc.kind = AUTOENCODER_KIND.into();
        doc
    }

    pub fn from_document(mut doc: NetworkDocument) -> Result<Self> {
        doc.check_header(AUTOENCODER_KIND)?;
        doc.kind = "feedforward".into();
        Self::from_network(Network::from_document(doc)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(s)?)
    }
}

/// `(u, x̂)` for a batch.
pub fn sae_forward(ae: &Autoencoder, batch: &Matrix) -> Result<(Matrix, Matrix)> {
    let mut t = ae.forward(batch)?;
    let x_hat = t.post.pop().expect("two layers");
    let u = t.post.pop().expect("two layers");
    Ok((u, x_hat))
}

/// Objective summed over the trace's batch. `empirical` holds the
/// reconstruction term, `kl` the weighted KL term, `lcnn` the decoder term.
pub fn sae_objective_from_trace(trace: &ForwardTrace, obj: &SaeObjective) -> Result<ObjectiveBreakdown> {
    obj.validate()?;
    let x_hat = trace.output();
    let recon = 0.5
        * x_hat
            .as_slice()
            .iter()
            .zip(trace.input.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    let kl = obj.c * kl_sparsity_penalty(&trace.post[0], obj.rho).value;
    let lcnn = 0.5 * obj.d * trace.output_pre().sum_squares();
    Ok(ObjectiveBreakdown {
        empirical: recon,
        weight_decay: 0.0,
        lcnn,
        kl,
        total: recon + kl + lcnn,
    })
}

pub fn sae_objective(ae: &Autoencoder, batch: &Matrix, obj: &SaeObjective) -> Result<ObjectiveBreakdown> {
    sae_objective_from_trace(&ae.forward(batch)?, obj)
}

/// Gradient of [`sae_objective_from_trace`] (the batch sum).
pub fn sae_backward(ae: &Autoencoder, trace: &ForwardTrace, obj: &SaeObjective) -> Result<Gradients> {
    let u = &trace.post[0];
    let x_hat = trace.output();
    let z2 = trace.output_pre();
    let mut dz2 = x_hat.clone();
    for ((d, &x), &z) in dz2
        .as_mut_slice()
        .iter_mut()
        .zip(trace.input.as_slice())
        .zip(z2.as_slice())
    {
        let f = *d;
        *d = (f - x) * f * (1.0 - f) + obj.d * z;
    }
    let gw_d = matmul_tn(&dz2, u)?;
    let gb_d = dz2.column_sums();

    let mut dz1 = matmul(&dz2, ae.decoder_weights())?;
    for (d, &a) in dz1.as_mut_slice().iter_mut().zip(u.as_slice()) {
        // the clamp used by the KL term has zero slope outside its range
        let kl = if (KL_CLAMP..=1.0 - KL_CLAMP).contains(&a) {
            obj.c * (-obj.rho / a + (1.0 - obj.rho) / (1.0 - a))
        } else {
            0.0
        };
        *d = (*d + kl) * a * (1.0 - a);
    }
    let gw_e = matmul_tn(&dz1, &trace.input)?;
    let gb_e = dz1.column_sums();
    Ok(Gradients {
        weights: vec![gw_e, gw_d],
        biases: vec![gb_e, gb_d],
    })
}

/// Central-difference check of [`sae_backward`], same error measure and
/// subset rule as the classifier check.
pub fn sae_gradient_check(
    ae: &Autoencoder,
    batch: &Matrix,
    obj: &SaeObjective,
    step: f64,
    seed: u64,
) -> Result<GradientCheck> {
    if batch.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let analytic = sae_backward(ae, &ae.forward(batch)?, obj)?;
    let mut params = Vec::new();
    for (h, layer) in ae.net.layers.iter().enumerate() {
        for r in 0..layer.weights.rows() {
            for c in 0..layer.weights.cols() {
                params.push((h, false, r, c));
            }
            params.push((h, true, r, 0));
        }
    }
    if params.len() > FULL_CHECK_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, params.len(), SUBSET_SIZE).into_vec();
        picked.sort_unstable();
        params = picked.into_iter().map(|i| params[i]).collect();
    }
    let mut probe = ae.clone();
    let mut worst: f64 = 0.0;
    let checked = params.len();
    for (h, is_bias, r, c) in params {
        let layer = &mut probe.net.layers[h];
        let original = if is_bias {
            layer.biases[r]
        } else {
            layer.weights.get(r, c)
        };
        let mut eval = |v: f64| -> Result<f64> {
            let layer = &mut probe.net.layers[h];
            if is_bias {
                layer.biases[r] = v;
            } else {
                layer.weights.set(r, c, v);
            }
            Ok(sae_objective(&probe, batch, obj)?.total)
        };
        let plus = eval(original + step)?;
        let minus = eval(original - step)?;
        eval(original)?;
        let numeric = (plus - minus) / (2.0 * step);
        let exact = if is_bias {
            analytic.biases[h][r]
        } else {
            analytic.weights[h].get(r, c)
        };
        worst = worst.max((exact - numeric).abs() / (exact.abs() + numeric.abs()).max(1e-8));
    }
    Ok(GradientCheck {
        max_relative_error: worst,
        checked,
        skipped: 0,
    })
}

/// Minibatch SGD on the autoencoder objective. Each step follows the batch
/// gradient divided by the batch size, so the learning rate is per sample.
/// Epoch records hold per-sample averages of the objective terms.
pub fn sae_train(
    ae: &mut Autoencoder,
    data: &Matrix,
    obj: &SaeObjective,
    schedule: &TrainSchedule,
) -> Result<TrainReport> {
    obj.validate()?;
    let m = data.rows();
    if data.cols() != ae.inputs() {
        return Err(Error::Shape(format!(
            "data has {} features, autoencoder expects {}",
            data.cols(),
            ae.inputs()
        )));
    }
    let mut report = TrainReport {
        epochs: Vec::with_capacity(schedule.epochs),
        network: ae.to_document(),
    };
    if schedule.epochs == 0 {
        return Ok(report);
    }
    schedule.validate(m)?;
    ae.forward(&data.select_rows(&[0]))?;
    if let Some(v) = data.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!(
            "autoencoder inputs must be scaled to [0, 1], found {v}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(schedule.shuffle_seed);
    let mut order: Vec<usize> = (0..m).collect();
    let mut lr = schedule.learning_rate;
    for epoch in 0..schedule.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut objective = ObjectiveBreakdown::default();
        let mut grad_sums = [0.0; 2];
        let mut steps = 0usize;
        for chunk in order.chunks(schedule.batch_size) {
            let x = data.select_rows(chunk);
            let trace = ae.net.forward(&x)?;
            let step_obj = sae_objective_from_trace(&trace, obj)?;
            if !step_obj.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    report: Box::new(report),
                });
            }
            objective.accumulate(&step_obj, 1.0 / m as f64);
            let grads = sae_backward(ae, &trace, obj)?.scale(1.0 / chunk.len() as f64);
            for (h, sum) in grad_sums.iter_mut().enumerate() {
                *sum += mean_abs_gradient(&grads, h)?;
            }
            for (layer, (gw, gb)) in ae.net.layers.iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
                layer.weights.add_scaled(gw, -lr)?;
                for (b, g) in layer.biases.iter_mut().zip(gb) {
                    *b -= lr * g;
                }
            }
            steps += 1;
        }
        if !ae.net.is_finite() {
            return Err(Error::Diverged {
                epoch,
                report: Box::new(report),
            });
        }
        report.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            objective,
            train_accuracy: None,
            validation_accuracy: None,
            mean_abs_gradient: grad_sums.iter().map(|s| s / steps as f64).collect(),
            seconds: started.elapsed().as_secs_f64(),
        });
        report.network = ae.to_document();
        lr *= schedule.lr_decay;
    }
    Ok(report)
}

/// Mean per-sample reconstruction error `½‖x − x̂‖²`.
pub fn reconstruction_error(ae: &Autoencoder, data: &Matrix) -> Result<f64> {
    if data.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let o = sae_objective(ae, data, &SaeObjective::new(0.0, 0.0, 0.05))?;
    Ok(o.empirical / data.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

/// Equal-width bins over `[-range, range]`; values beyond the range land in
/// the edge bins so the counts always sum to the number of weights.
pub fn weight_histogram(weights: &[f64], bin_count: usize, range: f64) -> Result<Vec<HistogramBin>> {
    if bin_count == 0 {
        return Err(Error::Config("bin count must be at least 1".into()));
    }
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::Config(format!("histogram range must be positive, got {range}")));
    }
    let width = 2.0 * range / bin_count as f64;
    let mut bins: Vec<HistogramBin> = (0..bin_count)
        .map(|b| HistogramBin {
            bin_low: -range + b as f64 * width,
            bin_high: if b + 1 == bin_count {
                range
            } else {
                -range + (b + 1) as f64 * width
            },
            count: 0,
        })
        .collect();
    for &w in weights {
        let b = ((w + range) / width).floor();
        let b = if b.is_nan() {
            0
        } else {
            (b.max(0.0) as usize).min(bin_count - 1)
        };
        bins[b].count += 1;
    }
    Ok(bins)
}

pub fn write_histogram_csv<W: Write>(bins: &[HistogramBin], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for b in bins {
        w.serialize(b)?;
    }
    w.flush()?;
    Ok(())
}

/// Share of weights with `|w| < eps`.
pub fn sparsity_fraction(weights: &[f64], eps: f64) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    weights.iter().filter(|w| w.abs() < eps).count() as f64 / weights.len() as f64
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Binary portable graymap (`P5`).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// One image per encoder row, min-max normalized to `[0, 255]`; a constant
/// row becomes uniform 128.
pub fn export_filters(encoder_weights: &Matrix, height: usize, width: usize) -> Result<Vec<GrayImage>> {
    if height * width != encoder_weights.cols() {
        return Err(Error::Config(format!(
            "{height}x{width} images need {} inputs, encoder has {}",
            height * width,
            encoder_weights.cols()
        )));
    }
    Ok((0..encoder_weights.rows())
        .map(|r| {
            let row = encoder_weights.row(r);
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pixels = row
                .iter()
                .map(|&v| {
                    if hi > lo {
                        (255.0 * (v - lo) / (hi - lo)).round() as u8
                    } else {
                        128
                    }
                })
                .collect();
            GrayImage { width, height, pixels }
        })
        .collect())
}

/// Tiles on a `ceil(√l)`-wide grid, unused cells black, no padding.
pub fn tile_sheet(images: &[GrayImage]) -> Result<GrayImage> {
    let Some(first) = images.first() else {
        return Err(Error::Config("no images to tile".into()));
    };
    let (w, h) = (first.width, first.height);
    if images.iter().any(|i| i.width != w || i.height != h) {
        return Err(Error::Config("tiles differ in size".into()));
    }
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let mut sheet = GrayImage {
        width: cols * w,
        height: rows * h,
        pixels: vec![0; cols * w * rows * h],
    };
    for (k, img) in images.iter().enumerate() {
        let (tx, ty) = (k % cols, k / cols);
        for y in 0..h {
            let dst = (ty * h + y) * sheet.width + tx * w;
            sheet.pixels[dst..dst + w].copy_from_slice(&img.pixels[y * w..(y + 1) * w]);
        }
    }
    Ok(sheet)
}

/// Writes `filter_NNN.pgm` per hidden unit and `filters_sheet.pgm`.
pub fn write_filters(dir: impl AsRef<Path>, images: &[GrayImage]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (k, img) in images.iter().enumerate() {
        std::fs::write(dir.join(format!("filter_{k:03}.pgm")), img.to_pgm())?;
    }
    std::fs::write(dir.join("filters_sheet.pgm"), tile_sheet(images)?.to_pgm())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub report: TrainReport,
}

/// Frozen encoder followed by a softmax layer trained with cross-entropy on
/// the hidden activations.
pub fn linear_probe(
    ae: &Autoencoder,
    train: (&Matrix, &[usize]),
    test: (&Matrix, &[usize]),
    classes: usize,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<ProbeResult> {
    let h_train = ae.encode(train.0)?;
    let h_test = ae.encode(test.0)?;
    let mut head = Network::init(NetworkConfig {
        layer_widths: vec![ae.hidden(), classes],
        activations: vec![ActivationKind::Softmax],
        seed,
    })?;
    let spec = ObjectiveSpec {
        loss: LossKind::SoftmaxCrossEntropy,
        ..ObjectiveSpec::default()
    };
    let targets = Targets::Classes(train.1.to_vec());
    let report = sgd_train(
        &mut head,
        Batch {
            features: &h_train,
            targets: &targets,
            labels: train.1,
        },
        Some(Holdout {
            features: &h_test,
            labels: test.1,
        }),
        &spec,
        schedule,
    )?;
    Ok(ProbeResult {
        train_accuracy: accuracy(&head.predict(&h_train)?, train.1),
        test_accuracy: accuracy(&head.predict(&h_test)?, test.1),
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::logistic;
    use rand::Rng;

    fn unit_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn zeroed(n: usize, l: usize) -> Autoencoder {
        let mut ae = Autoencoder::init(n, l, 0).unwrap();
        for layer in &mut ae.net.layers {
            layer.weights = Matrix::zeros(layer.weights.rows(), layer.weights.cols());
        }
        ae
    }

    #[test]
    fn zero_parameters_give_half() {
        let (u, x) = sae_forward(&zeroed(3, 2), &unit_batch(4, 3, 1)).unwrap();
        assert!(u.as_slice().iter().all(|&v| v == 0.5));
        assert!(x.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn one_one_one_hand_case() {
        let mut ae = zeroed(1, 1);
        ae.net.layers[0].weights.set(0, 0, 1.0);
        ae.net.layers[1].weights.set(0, 0, 2.0);
        ae.net.layers[1].biases[0] = -1.0;
        let (u, x) = sae_forward(&ae, &Matrix::zeros(1, 1)).unwrap();
        assert_eq!(u.get(0, 0), 0.5);
        assert_eq!(x.get(0, 0), 0.5);
    }

    #[test]
    fn rejects_unscaled_input() {
        let ae = Autoencoder::init(2, 2, 0).unwrap();
        let x = Matrix::from_rows(&[vec![0.5, 1.5]]).unwrap();
        assert!(matches!(sae_forward(&ae, &x), Err(Error::Data(_))));
    }

    #[test]
    fn outputs_stay_in_open_unit_interval() {
        let ae = Autoencoder::init(5, 3, 4).unwrap();
        let (u, x) = sae_forward(&ae, &unit_batch(10, 5, 2)).unwrap();
        assert!(u.as_slice().iter().chain(x.as_slice()).all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn objective_hand_case_matches_pieces() {
        let mut ae = zeroed(2, 1);
        ae.net.layers[0].weights = Matrix::from_rows(&[vec![0.3, -0.2]]).unwrap();
        ae.net.layers[0].biases = vec![0.1];
        ae.net.layers[1].weights = Matrix::from_rows(&[vec![0.7], vec![-0.4]]).unwrap();
        ae.net.layers[1].biases = vec![0.05, 0.2];
        let x = [0.6, 0.9];
        let u = logistic(0.3 * 0.6 - 0.2 * 0.9 + 0.1);
        let z = [0.7 * u + 0.05, -0.4 * u + 0.2];
        let xh = [logistic(z[0]), logistic(z[1])];
        let rho: f64 = 0.05;
        let kl = rho * (rho / u).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - u)).ln();
        let (c, d) = (0.3, 0.02);
        let recon = 0.5 * ((x[0] - xh[0]).powi(2) + (x[1] - xh[1]).powi(2));
        let expected = recon + c * kl + 0.5 * d * (z[0] * z[0] + z[1] * z[1]);
        let got = sae_objective(
            &ae,
            &Matrix::from_rows(&[x.to_vec()]).unwrap(),
            &SaeObjective::new(c, d, rho),
        )
        .unwrap();
        assert!((got.total - expected).abs() < 1e-14);
        assert!((got.empirical - recon).abs() < 1e-15);
    }

    #[test]
    fn objective_vanishes_at_perfect_sparse_reconstruction() {
        // u ≡ ρ needs pre-activation logit(ρ); x chosen as the reconstruction
        let rho: f64 = 0.05;
        let mut ae = zeroed(2, 3);
        ae.net.layers[0].biases = vec![(rho / (1.0 - rho)).ln(); 3];
        let (_, x_hat) = sae_forward(&ae, &Matrix::zeros(1, 2)).unwrap();
        let o = sae_objective(&ae, &x_hat, &SaeObjective::new(1.0, 0.0, rho)).unwrap();
        assert!(o.total.abs() < 1e-12, "{o:?}");
    }

    #[test]
    fn zero_coefficients_leave_reconstruction() {
        let ae = Autoencoder::init(4, 3, 1).unwrap();
        let x = unit_batch(5, 4, 3);
        let o = sae_objective(&ae, &x, &SaeObjective::new(0.0, 0.0, 0.05)).unwrap();
        assert_eq!(o.total, o.empirical);
        assert!((reconstruction_error(&ae, &x).unwrap() - o.empirical / 5.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_check_six_four_six() {
        let ae = Autoencoder::init(6, 4, 11).unwrap();
        let x = unit_batch(5, 6, 12);
        let g = sae_gradient_check(&ae, &x, &SaeObjective::new(1e-2, 1e-4, 0.05), 1e-5, 0).unwrap();
        assert_eq!(g.checked, 6 * 4 + 4 + 4 * 6 + 6);
        assert!(g.max_relative_error < 1e-5, "{g:?}");
    }

    #[test]
    fn kl_zero_iff_activations_at_rho() {
        let at = Matrix::filled(2, 3, 0.05);
        assert!(kl_sparsity_penalty(&at, 0.05).value.abs() < 1e-15);
        let off = Matrix::filled(2, 3, 0.06);
        assert!(kl_sparsity_penalty(&off, 0.05).value > 0.0);
    }

    #[test]
    fn training_reduces_objective_and_is_deterministic() {
        let x = unit_batch(40, 8, 5);
        let obj = SaeObjective::new(1e-3, 1e-4, 0.05);
        let schedule = TrainSchedule {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.5,
            lr_decay: 1.0,
            shuffle_seed: 2,
        };
        let mut a = Autoencoder::init(8, 5, 3).unwrap();
        let before = sae_objective(&a, &x, &obj).unwrap().total;
        let ra = sae_train(&mut a, &x, &obj, &schedule).unwrap();
        let after = sae_objective(&a, &x, &obj).unwrap().total;
        assert!(after < before);
        let mut b = Autoencoder::init(8, 5, 3).unwrap();
        let rb = sae_train(&mut b, &x, &obj, &schedule).unwrap();
        assert_eq!(ra.without_timing(), rb.without_timing());
        assert_eq!(a, b);
        assert_eq!(ra.network.kind, AUTOENCODER_KIND);
    }

    #[test]
    fn zero_d_matches_kl_only_objective() {
        let x = unit_batch(12, 4, 6);
        let schedule = TrainSchedule {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.2,
            lr_decay: 1.0,
            shuffle_seed: 0,
        };
        let mut a = Autoencoder::init(4, 3, 1).unwrap();
        let report = sae_train(&mut a, &x, &SaeObjective::new(0.1, 0.0, 0.05), &schedule).unwrap();
        assert!(report
            .epochs
            .iter()
            .all(|e| e.objective.lcnn == 0.0 && e.objective.kl > 0.0));
    }

    #[test]
    fn document_round_trip_and_kind_check() {
        let ae = Autoencoder::init(4, 2, 9).unwrap();
        let back = Autoencoder::from_json(&ae.to_json().unwrap()).unwrap();
        assert_eq!(back, ae);
        let plain = ae.network().to_json().unwrap();
        assert!(Autoencoder::from_json(&plain).is_err());
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity_fraction(&[0.0; 10], 0.01), 1.0);
        assert!((sparsity_fraction(&[-1.0, 0.0, 1.0], 0.5) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn histogram_partitions_weights() {
        let w: Vec<f64> = (0..101).map(|i| (i as f64 - 50.0) / 20.0).collect();
        let bins = weight_histogram(&w, 7, 1.0).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), w.len());
        assert_eq!(bins[0].bin_low, -1.0);
        assert_eq!(bins[6].bin_high, 1.0);
        let mut out = Vec::new();
        write_histogram_csv(&bins, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("bin_low,bin_high,count\n"));
        assert!(weight_histogram(&w, 0, 1.0).is_err());
    }

    #[test]
    fn constant_filter_is_mid_gray() {
        let imgs = export_filters(&Matrix::filled(1, 4, 0.3), 2, 2).unwrap();
        assert!(imgs[0].pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn ramp_filter_runs_left_to_right() {
        let (h, w) = (3, 4);
        let ramp = Matrix::from_vec(1, h * w, (0..h * w).map(|i| i as f64).collect()).unwrap();
        let img = &export_filters(&ramp, h, w).unwrap()[0];
        let px = |i: usize| (255.0 * i as f64 / (h * w - 1) as f64).round() as u8;
        assert_eq!(img.get(0, 0), 0);
        assert_eq!(img.get(w - 1, 0), px(w - 1));
        assert_eq!(img.get(0, h - 1), px((h - 1) * w));
        assert_eq!(img.get(w - 1, h - 1), 255);
        assert!(img.get(1, 0) > img.get(0, 0));
        assert!(export_filters(&ramp, 5, 5).is_err());
    }

    #[test]
    fn full_size_filter_export() {
        let ae = Autoencoder::init(784, 196, 0).unwrap();
        let imgs = export_filters(ae.encoder_weights(), 28, 28).unwrap();
        assert_eq!(imgs.len(), 196);
        let sheet = tile_sheet(&imgs).unwrap();
        assert_eq!((sheet.width, sheet.height), (14 * 28, 14 * 28));
        let dir = tempfile::tempdir().unwrap();
        write_filters(dir.path(), &imgs).unwrap();
        let pgm = std::fs::read(dir.path().join("filter_000.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n28 28\n255\n"));
        assert_eq!(pgm.len(), 13 + 784);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 197);
    }

    #[test]
    fn probe_learns_separable_codes() {
        let x = unit_batch(60, 4, 8);
        let labels: Vec<usize> = (0..60).map(|i| usize::from(x.get(i, 0) > 0.5)).collect();
        let mut ae = Autoencoder::init(4, 6, 2).unwrap();
        let schedule = TrainSchedule {
            epochs: 20,
            batch_size: 10,
            learning_rate: 0.5,
            lr_decay: 1.0,
            shuffle_seed: 1,
        };
        sae_train(&mut ae, &x, &SaeObjective::new(1e-3, 0.0, 0.05), &schedule).unwrap();
        let probe_schedule = TrainSchedule {
            epochs: 200,
            ..schedule
        };
        let r = linear_probe(&ae, (&x, &labels), (&x, &labels), 2, &probe_schedule, 0).unwrap();
        assert!(r.train_accuracy > 0.8, "{}", r.train_accuracy);
    }
}
