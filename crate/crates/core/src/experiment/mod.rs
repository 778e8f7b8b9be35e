//! Cross-validation, grid search, method comparison and manifest-driven
//! experiment runs.

pub mod stats;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capacity::{vc_bound, CapacityReport};
use crate::data::{self, encode_targets, kfold_split, knn_impute, CsvSchema, Dataset, Scaler};
use crate::error::{Error, Result};
use crate::linalg::{ActivationKind, Matrix};
use crate::network::{accuracy, Network, NetworkConfig};
use crate::objective::{LcnnMode, LossKind, ObjectiveConfig, ObjectiveSpec, Task};
use crate::training::{sgd_train, Batch, TrainReport, TrainSchedule};
use stats::{format_p_value, friedman_test, mean_std, wilcoxon_signed_rank, FriedmanResult, WilcoxonResult};

/// Seed for the `index`-th task of a given `stream` under a master seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng.next_u64()
}

/// A fully specified classifier: architecture, objective and schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    #[serde(default = "default_hidden_activation")]
    pub hidden_activation: ActivationKind,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub schedule: TrainSchedule,
}

fn default_hidden_activation() -> ActivationKind {
    ActivationKind::Tanh
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate(Task::Classifier)?;
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.hidden_activation == ActivationKind::Softmax {
            return Err(Error::Config("softmax is only allowed on the output layer".into()));
        }
        Ok(())
    }

    pub fn output_activation(&self) -> ActivationKind {
        match self.objective.loss {
            LossKind::SoftmaxCrossEntropy => ActivationKind::Softmax,
            LossKind::SquaredError => ActivationKind::Tanh,
        }
    }

    pub fn build_network(&self, inputs: usize, classes: usize, seed: u64) -> Result<Network> {
        Network::init(NetworkConfig::new(
            inputs,
            &self.hidden,
            data::output_width(classes, self.objective.loss),
            self.hidden_activation,
            self.output_activation(),
            seed,
        ))
    }
}

/// A network trained on one set of rows, with the scaler fitted on them.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub network: Network,
    pub scaler: Scaler,
    pub report: TrainReport,
}

impl TrainedModel {
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        self.network.predict(&self.scaler.transform(features)?)
    }

    pub fn accuracy_on(&self, ds: &Dataset, rows: &[usize]) -> Result<f64> {
        let x = ds.features.select_rows(rows);
        let labels: Vec<usize> = rows.iter().map(|&i| ds.labels[i]).collect();
        Ok(accuracy(&self.predict(&x)?, &labels))
    }
}

/// Fits the scaler on `rows`, encodes targets and trains a fresh network.
/// Initialization and shuffling draw from seeds derived from `seed`.
pub fn train_model(config: &ModelConfig, ds: &Dataset, rows: &[usize], seed: u64) -> Result<TrainedModel> {
    config.validate()?;
    if ds.missing_count() > 0 {
        return Err(Error::Data("impute missing values before training".into()));
    }
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scaler = Scaler::fit(&ds.features, rows)?;
    let x = scaler.transform(&ds.features.select_rows(rows))?;
    let labels: Vec<usize> = rows.iter().map(|&i| ds.labels[i]).collect();
    let targets = encode_targets(
        &labels,
        ds.class_count(),
        config.objective.loss,
        config.objective.target_magnitude,
    )?;
    let mut network = config.build_network(ds.feature_count(), ds.class_count(), derive_seed(seed, 0, 0))?;
    let schedule = TrainSchedule {
        batch_size: config.schedule.batch_size.min(rows.len()),
        shuffle_seed: derive_seed(seed, 1, 0),
        ..config.schedule
    };
    let report = sgd_train(
        &mut network,
        Batch {
            features: &x,
            targets: &targets,
            labels: &labels,
        },
        None,
        &config.objective,
        &schedule,
    )?;
    Ok(TrainedModel {
        network,
        scaler,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub repeat: usize,
    pub fold: usize,
    /// `None` when training diverged.
    pub accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    /// Over completed folds; 0 when every fold failed.
    pub mean: f64,
    pub std: f64,
    pub scores: Vec<FoldScore>,
    pub mean_seconds: f64,
    pub completed: usize,
    pub failed: usize,
    /// Set when any fold failed.
    pub warning: bool,
}

impl CvResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.scores.iter().filter_map(|s| s.accuracy).collect()
    }

    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.mean_seconds = 0.0;
        r.scores.iter_mut().for_each(|s| s.seconds = 0.0);
        r
    }
}

/// Repeated k-fold cross-validation: train on each training part, score on
/// the held-out fold. Folds run in parallel with per-fold derived seeds;
/// a diverged fold is recorded as failed.
pub fn cross_validate(config: &ModelConfig, ds: &Dataset, protocol: &Protocol) -> Result<CvResult> {
    config.validate()?;
    let splits = kfold_split(ds.len(), protocol.folds, protocol.repeats, protocol.seed)?;
    let scores: Vec<FoldScore> = splits
        .par_iter()
        .enumerate()
        .map(|(k, split)| {
            let started = Instant::now();
            let seed = derive_seed(protocol.seed, 2, k as u64);
            let accuracy = match train_model(config, ds, &split.train, seed) {
                Ok(model) => Some(model.accuracy_on(ds, &split.validation)?),
                Err(Error::Diverged { .. }) => None,
                Err(e) => return Err(e),
            };
            Ok(FoldScore {
                repeat: split.repeat,
                fold: split.fold,
                accuracy,
                seconds: started.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<_>>()?;
    let accs: Vec<f64> = scores.iter().filter_map(|s| s.accuracy).collect();
    let (mean, std) = if accs.is_empty() { (0.0, 0.0) } else { mean_std(&accs) };
    let failed = scores.len() - accs.len();
    Ok(CvResult {
        mean,
        std,
        mean_seconds: scores.iter().map(|s| s.seconds).sum::<f64>() / scores.len() as f64,
        completed: accs.len(),
        failed,
        warning: failed > 0,
        scores,
    })
}

/// Explicit candidate lists; an empty list keeps the base model's value.
/// `C` is the weight-decay coefficient, `D` the complexity-penalty
/// coefficient, `hidden` a width applied to every hidden layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    #[serde(rename = "C")]
    pub c: Vec<f64>,
    #[serde(rename = "D")]
    pub d: Vec<f64>,
    pub hidden: Vec<usize>,
    pub dropout: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "D")]
    pub d: f64,
    /// `None` for a network without hidden layers.
    pub hidden: Option<usize>,
    pub dropout: f64,
}

impl GridPoint {
    fn simplicity_key(&self) -> (f64, f64, usize, f64) {
        (self.d, self.c, self.hidden.unwrap_or(0), self.dropout)
    }
}

impl GridSpec {
    pub fn validate(&self, base: &ModelConfig) -> Result<()> {
        for (name, v) in self.c.iter().map(|v| ("C", v)).chain(self.d.iter().map(|v| ("D", v))) {
            if !(*v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "grid {name} value {v} must be a nonnegative number"
                )));
            }
        }
        if self.dropout.iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(Error::Config("grid dropout rates must lie in [0, 1)".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("grid hidden widths must be positive".into()));
        }
        if !self.hidden.is_empty() && base.hidden.is_empty() {
            return Err(Error::Config(
                "grid varies the hidden width of a network without hidden layers".into(),
            ));
        }
        if !self.d.is_empty() && base.objective.lcnn_mode == LcnnMode::Off {
            return Err(Error::Config(
                "grid varies D but the method has no complexity penalty".into(),
            ));
        }
        Ok(())
    }

    /// Every combination, ordered by width, then C, then D, then dropout.
    pub fn points(&self, base: &ModelConfig) -> Vec<GridPoint> {
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let widths: Vec<Option<usize>> = if self.hidden.is_empty() {
            vec![base.hidden.first().copied()]
        } else {
            self.hidden.iter().map(|&w| Some(w)).collect()
        };
        let mut out = Vec::new();
        for &hidden in &widths {
            for &c in &or(&self.c, base.objective.weight_decay) {
                for &d in &or(&self.d, base.objective.lcnn_d) {
                    for &dropout in &or(&self.dropout, base.objective.dropout_rate) {
                        out.push(GridPoint { c, d, hidden, dropout });
                    }
                }
            }
        }
        out
    }
}

pub fn apply_grid_point(base: &ModelConfig, p: &GridPoint) -> ModelConfig {
    let mut cfg = base.clone();
    cfg.objective.weight_decay = p.c;
    cfg.objective.lcnn_d = p.d;
    cfg.objective.dropout_rate = p.dropout;
    if let Some(w) = p.hidden {
        cfg.hidden.iter_mut().for_each(|h| *h = w);
    }
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: GridPoint,
    pub mean: f64,
    pub std: f64,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: GridPoint,
    pub best_config: ModelConfig,
    pub best_mean: f64,
    pub rows: Vec<GridRow>,
}

/// Cross-validates every grid point under `protocol` and picks the highest
/// mean accuracy; ties go to smaller D, then smaller C, then smaller width.
pub fn grid_search(grid: &GridSpec, base: &ModelConfig, ds: &Dataset, protocol: &Protocol) -> Result<GridResult> {
    base.validate()?;
    grid.validate(base)?;
    let points = grid.points(base);
    let rows: Vec<GridRow> = points
        .par_iter()
        .map(|p| {
            let cv = cross_validate(&apply_grid_point(base, p), ds, protocol)?;
            Ok(GridRow {
                point: *p,
                mean: cv.mean,
                std: cv.std,
                failed: cv.failed,
            })
        })
        .collect::<Result<_>>()?;
    let best = rows
        .iter()
        .fold(None::<&GridRow>, |acc, r| match acc {
            None => Some(r),
            Some(b) if r.mean > b.mean => Some(r),
            Some(b) if r.mean == b.mean && r.point.simplicity_key() < b.point.simplicity_key() => Some(r),
            keep => keep,
        })
        .ok_or_else(|| Error::Config("empty grid".into()))?;
    Ok(GridResult {
        best: best.point,
        best_config: apply_grid_point(base, &best.point),
        best_mean: best.mean,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub mean: f64,
    pub std: f64,
    pub completed: usize,
    pub failed: usize,
    pub mean_seconds: Option<f64>,
}

/// `datasets × methods` accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub datasets: Vec<String>,
    pub methods: Vec<String>,
    pub cells: Vec<Vec<ComparisonCell>>,
}

impl ComparisonTable {
    pub fn score_matrix(&self) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = self
            .cells
            .iter()
            .map(|r| {
                r.iter()
                    .map(|c| if c.completed > 0 { c.mean } else { f64::NAN })
                    .collect()
            })
            .collect();
        Matrix::from_rows(&rows)
    }

    pub fn without_timing(&self) -> Self {
        let mut t = self.clone();
        t.cells.iter_mut().flatten().for_each(|c| c.mean_seconds = None);
        t
    }

    /// `dataset,<method>...` with cells as `mean ± std` in percent.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["dataset".to_owned()];
        header.extend(self.methods.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.datasets.iter().zip(&self.cells) {
            let mut rec = vec![name.clone()];
            rec.extend(
                row.iter()
                    .map(|c| format!("{:.2} ± {:.2}", 100.0 * c.mean, 100.0 * c.std)),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_timing_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["dataset".to_owned()];
        header.extend(self.methods.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.datasets.iter().zip(&self.cells) {
            let mut rec = vec![name.clone()];
            rec.extend(
                row.iter()
                    .map(|c| c.mean_seconds.map(|s| format!("{s:.4}")).unwrap_or_default()),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub schema: CsvSchema,
    #[serde(default = "default_impute_k")]
    pub impute_k: usize,
}

fn default_impute_k() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub objective: ObjectiveConfig,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_hidden_activation")]
    pub hidden_activation: ActivationKind,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub schedule: TrainSchedule,
}

fn default_hidden() -> Vec<usize> {
    vec![10]
}

impl MethodSpec {
    pub fn model_config(&self) -> Result<ModelConfig> {
        if !self.objective.weight_decay && !self.grid.c.is_empty() {
            return Err(Error::Config(format!(
                "method {}: grid varies C but W is off",
                self.name
            )));
        }
        let cfg = ModelConfig {
            hidden: self.hidden.clone(),
            hidden_activation: self.hidden_activation,
            objective: ObjectiveSpec::try_from(self.objective.clone())?,
            schedule: self.schedule,
        };
        cfg.validate()?;
        self.grid.validate(&cfg)?;
        Ok(cfg)
    }
}

fn default_folds() -> usize {
    5
}

fn default_repeats() -> usize {
    10
}

fn default_inner_folds() -> usize {
    3
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Grid search uses its own, cheaper cross-validation.
    #[serde(default = "default_inner_folds")]
    pub inner_folds: usize,
    #[serde(default = "default_one")]
    pub inner_repeats: usize,
    pub datasets: Vec<DatasetSpec>,
    pub methods: Vec<MethodSpec>,
}

impl Manifest {
    /// Parses and validates a manifest, resolving dataset paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut m.datasets {
            if d.path.is_relative() {
                d.path = base.join(&d.path);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("manifest lists no datasets".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("manifest lists no methods".into()));
        }
        let unique = |names: Vec<&String>| names.iter().collect::<BTreeSet<_>>().len() == names.len();
        if !unique(self.datasets.iter().map(|d| &d.name).collect())
            || !unique(self.methods.iter().map(|m| &m.name).collect())
        {
            return Err(Error::Config("dataset and method names must be unique".into()));
        }
        if self.folds < 2 || self.inner_folds < 2 || self.repeats == 0 || self.inner_repeats == 0 {
            return Err(Error::Config("need at least 2 folds and 1 repeat".into()));
        }
        for d in &self.datasets {
            if !d.path.exists() {
                return Err(Error::Config(format!(
                    "dataset {} not found at {}",
                    d.name,
                    d.path.display()
                )));
            }
            if d.impute_k == 0 {
                return Err(Error::Config(format!("dataset {}: impute_k must be positive", d.name)));
            }
        }
        for m in &self.methods {
            m.model_config()?;
        }
        Ok(())
    }
}

/// Loads a CSV dataset and imputes missing cells.
pub fn prepare_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let mut ds = data::load_csv(&spec.path, &spec.schema)?;
    ds.name = spec.name.clone();
    if ds.missing_count() > 0 {
        ds = knn_impute(&ds, spec.impute_k)?;
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub result: Option<WilcoxonResult>,
    pub p_value: Option<String>,
    pub notice: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub wilcoxon: Vec<PairwiseTest>,
    pub friedman: Option<FriedmanResult>,
    pub friedman_p_value: Option<String>,
    pub notices: Vec<String>,
}

/// Pairwise Wilcoxon tests over per-dataset mean accuracies and a Friedman
/// test over the whole table, each skipped with a notice when undefined.
pub fn compare_methods(table: &ComparisonTable) -> Result<StatsReport> {
    let scores = table.score_matrix()?;
    let mut notices = Vec::new();
    let mut wilcoxon = Vec::new();
    for i in 0..table.methods.len() {
        for j in i + 1..table.methods.len() {
            let (a, b) = (scores.column(i), scores.column(j));
            let (result, notice) = match wilcoxon_signed_rank(&a, &b) {
                Ok(r) => (Some(r), None),
                Err(e @ Error::UndefinedTest(_)) => (None, Some(format!("Wilcoxon skipped: {e}"))),
                Err(e) => return Err(e),
            };
            wilcoxon.push(PairwiseTest {
                a: table.methods[i].clone(),
                b: table.methods[j].clone(),
                p_value: result.as_ref().map(|r| format_p_value(r.p_value)),
                result,
                notice,
            });
        }
    }
    let friedman = if table.methods.len() >= 2 && table.datasets.len() >= 2 && scores.is_finite() {
        Some(friedman_test(&scores)?)
    } else {
        notices.push("Friedman test skipped: needs at least 2 datasets, 2 methods and no failed cells".into());
        None
    };
    Ok(StatsReport {
        wilcoxon,
        friedman_p_value: friedman.as_ref().map(|f| format_p_value(f.p_value)),
        friedman,
        notices,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub dataset: String,
    pub method: String,
    pub grid: GridResult,
    pub cv: CvResult,
    /// Final model trained on every row with the chosen configuration.
    pub train: TrainReport,
    pub train_accuracy: f64,
    pub capacity: Option<CapacityReport>,
    pub notice: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub manifest: String,
    pub master_seed: u64,
    pub folds: usize,
    pub repeats: usize,
    pub inner_folds: usize,
    pub inner_repeats: usize,
    pub datasets: Vec<DatasetLog>,
    pub methods: Vec<String>,
    pub notices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetLog {
    pub name: String,
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub imputed_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingLog {
    pub total_seconds: f64,
    pub cells: Vec<CellTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub dataset: String,
    pub method: String,
    pub grid_seconds: f64,
    pub cv_mean_fold_seconds: f64,
    pub final_train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub table: ComparisonTable,
    pub stats: StatsReport,
    pub cells: Vec<CellReport>,
    pub log: RunLog,
    pub timing: TimingLog,
}

/// Runs impute → (per fold) scale → encode → grid search → repeated CV →
/// final fit and capacity report for every dataset and method, then the
/// comparison tests.
pub fn run_manifest(manifest: &Manifest) -> Result<ExperimentOutput> {
    manifest.validate()?;
    let started = Instant::now();
    let configs: Vec<ModelConfig> = manifest
        .methods
        .iter()
        .map(MethodSpec::model_config)
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    let mut table_cells = Vec::new();
    let mut timings = Vec::new();
    let mut dataset_logs = Vec::new();
    let mut notices = Vec::new();

    for (di, dspec) in manifest.datasets.iter().enumerate() {
        let raw = data::load_csv(&dspec.path, &dspec.schema)?;
        let imputed_cells = raw.missing_count();
        let ds = prepare_dataset(dspec)?;
        dataset_logs.push(DatasetLog {
            name: dspec.name.clone(),
            samples: ds.len(),
            features: ds.feature_count(),
            classes: ds.class_count(),
            imputed_cells,
        });
        let inner = Protocol {
            folds: manifest.inner_folds,
            repeats: manifest.inner_repeats,
            seed: derive_seed(manifest.seed, 10, di as u64),
        };
        let outer = Protocol {
            folds: manifest.folds,
            repeats: manifest.repeats,
            seed: derive_seed(manifest.seed, 11, di as u64),
        };
        let mut row = Vec::new();
        for (method, base) in manifest.methods.iter().zip(&configs) {
            let t0 = Instant::now();
            let grid = grid_search(&method.grid, base, &ds, &inner)?;
            let grid_seconds = t0.elapsed().as_secs_f64();
            let cv = cross_validate(&grid.best_config, &ds, &outer)?;
            if cv.warning {
                notices.push(format!("{}/{}: {} folds diverged", dspec.name, method.name, cv.failed));
            }
            let t1 = Instant::now();
            let all: Vec<usize> = (0..ds.len()).collect();
            let (train, train_accuracy, capacity, notice) =
                match train_model(&grid.best_config, &ds, &all, derive_seed(manifest.seed, 12, di as u64)) {
                    Ok(model) => {
                        let x = model.scaler.transform(&ds.features)?;
                        let trace = model.network.forward(&x)?;
                        let acc = accuracy(&model.network.predict(&x)?, &ds.labels);
                        let (cap, notice) =
                            match vc_bound(&model.network, &trace, grid.best_config.objective.target_magnitude) {
                                Ok(c) => (Some(c), None),
                                Err(e) => (None, Some(format!("capacity report unavailable: {e}"))),
                            };
                        (model.report, acc, cap, notice)
                    }
                    Err(Error::Diverged { report, .. }) => (*report, 0.0, None, Some("final training diverged".into())),
                    Err(e) => return Err(e),
                };
            let final_train_seconds = t1.elapsed().as_secs_f64();
            timings.push(CellTiming {
                dataset: dspec.name.clone(),
                method: method.name.clone(),
                grid_seconds,
                cv_mean_fold_seconds: cv.mean_seconds,
                final_train_seconds,
            });
            row.push(ComparisonCell {
                mean: cv.mean,
                std: cv.std,
                completed: cv.completed,
                failed: cv.failed,
                mean_seconds: Some(cv.mean_seconds),
            });
            cells.push(CellReport {
                dataset: dspec.name.clone(),
                method: method.name.clone(),
                grid,
                cv,
                train,
                train_accuracy,
                capacity,
                notice,
            });
        }
        table_cells.push(row);
    }

    let table = ComparisonTable {
        datasets: manifest.datasets.iter().map(|d| d.name.clone()).collect(),
        methods: manifest.methods.iter().map(|m| m.name.clone()).collect(),
        cells: table_cells,
    };
    let stats = compare_methods(&table)?;
    notices.extend(stats.notices.iter().cloned());
    notices.extend(
        stats
            .wilcoxon
            .iter()
            .filter_map(|w| w.notice.as_ref().map(|n| format!("{} vs {}: {n}", w.a, w.b))),
    );
    Ok(ExperimentOutput {
        log: RunLog {
            manifest: manifest.name.clone(),
            master_seed: manifest.seed,
            folds: manifest.folds,
            repeats: manifest.repeats,
            inner_folds: manifest.inner_folds,
            inner_repeats: manifest.inner_repeats,
            datasets: dataset_logs,
            methods: table.methods.clone(),
            notices,
        },
        table,
        stats,
        cells,
        timing: TimingLog {
            total_seconds: started.elapsed().as_secs_f64(),
            cells: timings,
        },
    })
}

fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes `bundle/` (reproducible from the manifest and seed) and
/// `timing/` (wall-clock measurements) under `out_dir`.
pub fn write_bundle(output: &ExperimentOutput, out_dir: impl AsRef<Path>) -> Result<()> {
    let out = out_dir.as_ref();
    let bundle = out.join("bundle");
    let timing = out.join("timing");
    for d in [&bundle, &bundle.join("cells"), &timing] {
        std::fs::create_dir_all(d)?;
    }
    let table = output.table.without_timing();
    write_json(&bundle.join("comparison.json"), &table)?;
    table.write_csv(std::fs::File::create(bundle.join("comparison.csv"))?)?;
    write_json(&bundle.join("stats.json"), &output.stats)?;
    write_json(&bundle.join("run_log.json"), &output.log)?;
    for cell in &output.cells {
        let mut c = cell.clone();
        c.cv = c.cv.without_timing();
        c.train = c.train.without_timing();
        let name = format!("{}__{}.json", file_stem(&cell.dataset), file_stem(&cell.method));
        write_json(&bundle.join("cells").join(name), &c)?;
    }
    write_json(&timing.join("timing.json"), &output.timing)?;
    output
        .table
        .write_timing_csv(std::fs::File::create(timing.join("mean_seconds.csv"))?)?;
    Ok(())
}

/// Loads a manifest, runs it and writes the bundle.
pub fn run_experiment(manifest_path: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<ExperimentOutput> {
    let manifest = Manifest::load(manifest_path)?;
    let output = run_manifest(&manifest)?;
    write_bundle(&output, out_dir)?;
    Ok(output)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub size: usize,
    pub seconds: f64,
    pub accuracy: f64,
}

/// Trains on nested prefixes of one seeded shuffle and scores each model on
/// the held-out last 20% of that shuffle.
pub fn scalability_probe(config: &ModelConfig, ds: &Dataset, sizes: &[usize], seed: u64) -> Result<Vec<ProbeRow>> {
    config.validate()?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let holdout_len = (ds.len() / 5).max(1);
    let (pool, holdout) = order.split_at(ds.len() - holdout_len);
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > pool.len()) {
        return Err(Error::Config(format!(
            "size {s} outside [1, {}] (the last {holdout_len} rows are held out)",
            pool.len()
        )));
    }
    sizes
        .iter()
        .map(|&size| {
            let started = Instant::now();
            let model = train_model(config, ds, &pool[..size], derive_seed(seed, 3, 0))?;
            let seconds = started.elapsed().as_secs_f64();
            Ok(ProbeRow {
                size,
                seconds,
                accuracy: model.accuracy_on(ds, holdout)?,
            })
        })
        .collect()
}
