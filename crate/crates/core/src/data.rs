//! Dataset ingestion and preparation: CSV and IDX loading, KNN imputation,
//! per-fold `[-1, 1]` scaling, target encoding and seeded k-fold splits.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::objective::{LossKind, Targets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    /// Defaults to the last column.
    pub label_column: Option<LabelColumn>,
    pub missing_token: String,
    pub header: bool,
    pub delimiter: char,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: None,
            missing_token: "?".into(),
            header: true,
            delimiter: ',',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    /// One sample per row; missing cells hold NaN.
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub feature_names: Vec<String>,
    /// Row-major, one flag per feature cell.
    pub missing: Vec<bool>,
    pub scaling: Option<Scaler>,
}

impl Dataset {
    pub fn new(name: &str, features: Matrix, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Data(format!("label {bad} without a class name")));
        }
        let feature_names = (0..features.cols()).map(|j| format!("x{}", j + 1)).collect();
        let missing = features.as_slice().iter().map(|v| v.is_nan()).collect();
        Ok(Self {
            name: name.into(),
            features,
            labels,
            class_names,
            feature_names,
            missing,
            scaling: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_count(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.missing[row * self.feature_count() + col]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let n = self.feature_count();
        let mut missing = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            missing.extend_from_slice(&self.missing[i * n..(i + 1) * n]);
        }
        Self {
            name: self.name.clone(),
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            feature_names: self.feature_names.clone(),
            missing,
            scaling: self.scaling.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Reads a delimited file. Labels are mapped to indices in order of first
/// appearance; cells equal to the missing token become NaN and are masked.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(file, schema, &name)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema, name: &str) -> Result<Dataset> {
    if !schema.delimiter.is_ascii() {
        return Err(Error::Config("delimiter must be an ASCII character".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(schema.header)
        .delimiter(schema.delimiter as u8)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Option<Vec<String>> = if schema.header {
        Some(rdr.headers()?.iter().map(str::to_owned).collect())
    } else {
        None
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    let mut class_index: HashMap<String, usize> = HashMap::new();
    let mut label_col = None;
    let mut width = 0;
    let first_row = usize::from(schema.header);

    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row_no = r + first_row;
        let lc = match label_col {
            Some(c) => c,
            None => {
                width = record.len();
                let c = resolve_label_column(schema, header.as_deref(), width)?;
                label_col = Some(c);
                c
            }
        };
        if record.len() != width {
            return Err(Error::Format {
                row: row_no,
                column: record.len().min(width),
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let mut row = Vec::with_capacity(width - 1);
        for (c, cell) in record.iter().enumerate() {
            if c == lc {
                continue;
            }
            if cell == schema.missing_token {
                row.push(f64::NAN);
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(Error::Format {
                        row: row_no,
                        column: c,
                        message: format!("cannot parse {cell:?} as a number"),
                    })
                }
            }
        }
        let label = &record[lc];
        let idx = *class_index.entry(label.to_owned()).or_insert_with(|| {
            class_names.push(label.to_owned());
            class_names.len() - 1
        });
        labels.push(idx);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    let lc = label_col.expect("at least one row was read");
    let features = Matrix::from_rows(&rows)?;
    let mut ds = Dataset::new(name, features, labels, class_names)?;
    if let Some(h) = header {
        ds.feature_names = h
            .into_iter()
            .enumerate()
            .filter(|&(c, _)| c != lc)
            .map(|(_, s)| s)
            .collect();
    }
    Ok(ds)
}

fn resolve_label_column(schema: &CsvSchema, header: Option<&[String]>, width: usize) -> Result<usize> {
    if width < 2 {
        return Err(Error::Data("need at least one feature and a label column".into()));
    }
    match &schema.label_column {
        None => Ok(width - 1),
        Some(LabelColumn::Index(i)) if *i < width => Ok(*i),
        Some(LabelColumn::Index(i)) => Err(Error::Config(format!("label column {i} out of range"))),
        Some(LabelColumn::Name(n)) => header
            .and_then(|h| h.iter().position(|c| c == n))
            .ok_or_else(|| Error::Config(format!("label column {n:?} not found"))),
    }
}

/// Fills each missing cell with the mean of that feature over the `k`
/// nearest rows that observe it. Distance between rows is
/// `sqrt(Σ_shared (a − b)² / |shared|)` over mutually observed features;
/// rows sharing nothing are not neighbors. Ties go to the lower row index.
pub fn knn_impute(ds: &Dataset, k: usize) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let (m, n) = ds.features.shape();
    for c in 0..n {
        if (0..m).all(|r| ds.is_missing(r, c)) {
            return Err(Error::Data(format!("feature {c} is missing in every row")));
        }
    }
    if let Some(r) = (0..m).find(|&r| (0..n).all(|c| ds.is_missing(r, c))) {
        return Err(Error::Data(format!("row {r} has no observed features")));
    }

    let mut out = ds.clone();
    for i in 0..m {
        let holes: Vec<usize> = (0..n).filter(|&c| ds.is_missing(i, c)).collect();
        if holes.is_empty() {
            continue;
        }
        let mut dists: Vec<(f64, usize)> = (0..m)
            .filter(|&j| j != i)
            .filter_map(|j| {
                let mut sum = 0.0;
                let mut shared = 0usize;
                for c in 0..n {
                    if !ds.is_missing(i, c) && !ds.is_missing(j, c) {
                        let d = ds.features.get(i, c) - ds.features.get(j, c);
                        sum += d * d;
                        shared += 1;
                    }
                }
                (shared > 0).then(|| ((sum / shared as f64).sqrt(), j))
            })
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for c in holes {
            let donors: Vec<f64> = dists
                .iter()
                .filter(|&&(_, j)| !ds.is_missing(j, c))
                .take(k)
                .map(|&(_, j)| ds.features.get(j, c))
                .collect();
            if donors.is_empty() {
                return Err(Error::Data(format!("no neighbor of row {i} observes feature {c}")));
            }
            out.features.set(i, c, donors.iter().sum::<f64>() / donors.len() as f64);
        }
    }
    out.missing.iter_mut().for_each(|f| *f = false);
    Ok(out)
}

/// Per-feature min/max fitted on training rows; maps to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaler {
    pub fn fit(features: &Matrix, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = features.cols();
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for &r in rows {
            for (c, &v) in features.row(r).iter().enumerate() {
                if v.is_nan() {
                    return Err(Error::Data(format!("row {r} still has missing values")));
                }
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        Ok(Self { min, max })
    }

    /// `2(x − min)/(max − min) − 1`, constant features to 0. Values outside
    /// the fitted range are not clamped.
    pub fn transform(&self, features: &Matrix) -> Result<Matrix> {
        self.check(features)?;
        let mut out = features.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                let span = self.max[c] - self.min[c];
                *v = if span > 0.0 {
                    2.0 * (*v - self.min[c]) / span - 1.0
                } else {
                    0.0
                };
            }
        }
        Ok(out)
    }

    /// Inverse of `transform`; constant features return their fitted value.
    pub fn inverse(&self, scaled: &Matrix) -> Result<Matrix> {
        self.check(scaled)?;
        let mut out = scaled.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                let span = self.max[c] - self.min[c];
                *v = if span > 0.0 {
                    (*v + 1.0) / 2.0 * span + self.min[c]
                } else {
                    self.min[c]
                };
            }
        }
        Ok(out)
    }

    fn check(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.min.len() {
            return Err(Error::Shape(format!(
                "scaler has {} features, data has {}",
                self.min.len(),
                features.cols()
            )));
        }
        Ok(())
    }
}

/// Scales every row with parameters fitted on `train_rows` only.
pub fn scale_features(ds: &Dataset, train_rows: &[usize]) -> Result<Dataset> {
    let scaler = Scaler::fit(&ds.features, train_rows)?;
    let mut out = ds.clone();
    out.features = scaler.transform(&ds.features)?;
    out.scaling = Some(scaler);
    Ok(out)
}

/// Training targets for `loss`. Two classes give one column of `±t`; more
/// give `+t` at the class column and `−t` elsewhere, or class indices for
/// the softmax loss.
pub fn encode_targets(labels: &[usize], classes: usize, loss: LossKind, t: f64) -> Result<Targets> {
    if classes < 2 {
        return Err(Error::Data("need at least two classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    if loss == LossKind::SoftmaxCrossEntropy {
        return Ok(Targets::Classes(labels.to_vec()));
    }
    if classes == 2 {
        let col = labels.iter().map(|&l| if l == 1 { t } else { -t }).collect();
        return Ok(Targets::Values(Matrix::from_vec(labels.len(), 1, col)?));
    }
    let mut m = Matrix::filled(labels.len(), classes, -t);
    for (i, &l) in labels.iter().enumerate() {
        m.set(i, l, t);
    }
    Ok(Targets::Values(m))
}

/// Output width a network needs for `classes` under `loss`.
pub fn output_width(classes: usize, loss: LossKind) -> usize {
    if classes == 2 && loss == LossKind::SquaredError {
        1
    } else {
        classes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub repeat: usize,
    pub fold: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Per repeat, a seeded shuffle cut into `folds` near-equal parts (the first
/// `m % folds` parts one larger); each part is the validation set once.
pub fn kfold_split(m: usize, folds: usize, repeats: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(Error::Config("need at least 2 folds".into()));
    }
    if m < folds {
        return Err(Error::Config(format!("{m} samples cannot fill {folds} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(folds * repeats);
    for repeat in 0..repeats {
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let (base, extra) = (m / folds, m % folds);
        let mut start = 0;
        for fold in 0..folds {
            let len = base + usize::from(fold < extra);
            let mut validation = order[start..start + len].to_vec();
            let mut train: Vec<usize> = order[..start].iter().chain(&order[start + len..]).copied().collect();
            validation.sort_unstable();
            train.sort_unstable();
            out.push(Fold {
                repeat,
                fold,
                train,
                validation,
            });
            start += len;
        }
    }
    Ok(out)
}

/// `maxᵢ ‖xⁱ‖` over the rows.
pub fn input_radius(features: &Matrix) -> f64 {
    (0..features.rows())
        .map(|r| features.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn idx_header(bytes: &[u8], kind: u8, dims: usize) -> Result<(Vec<usize>, usize)> {
    let head = 4 + 4 * dims;
    if bytes.len() < head || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != kind || bytes[3] as usize != dims {
        return Err(Error::Data("not an unsigned-byte IDX file of the expected rank".into()));
    }
    let sizes: Vec<usize> = (0..dims)
        .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().unwrap()) as usize)
        .collect();
    if bytes.len() < head + sizes.iter().product::<usize>() {
        return Err(Error::Data("IDX file is truncated".into()));
    }
    Ok((sizes, head))
}

/// Images from an IDX3 file (optionally gzipped), one flattened image per
/// row with pixels scaled to `[0, 1]`. Reads at most `limit` images.
pub fn read_idx_images(path: impl AsRef<Path>, limit: Option<usize>) -> Result<(Matrix, usize, usize)> {
    let bytes = open_maybe_gz(path.as_ref())?;
    let (sizes, head) = idx_header(&bytes, 0x08, 3)?;
    let (count, h, w) = (limit.map_or(sizes[0], |l| l.min(sizes[0])), sizes[1], sizes[2]);
    let data = bytes[head..head + count * h * w]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok((Matrix::from_vec(count, h * w, data)?, h, w))
}

pub fn read_idx_labels(path: impl AsRef<Path>, limit: Option<usize>) -> Result<Vec<usize>> {
    let bytes = open_maybe_gz(path.as_ref())?;
    let (sizes, head) = idx_header(&bytes, 0x08, 1)?;
    let count = limit.map_or(sizes[0], |l| l.min(sizes[0]));
    Ok(bytes[head..head + count].iter().map(|&b| b as usize).collect())
}

/// Train and test splits from a directory holding the four standard MNIST
/// IDX files (gzipped or not).
pub fn load_mnist(
    dir: impl AsRef<Path>,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let find = |stem: &str| -> Result<std::path::PathBuf> {
        [format!("{stem}.gz"), stem.to_owned()]
            .into_iter()
            .map(|f| dir.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Data(format!("{stem} not found in {}", dir.display())))
    };
    let classes: Vec<String> = (0..10).map(|d| d.to_string()).collect();
    let load = |prefix: &str, limit| -> Result<Dataset> {
        let (x, _, _) = read_idx_images(find(&format!("{prefix}-images-idx3-ubyte"))?, limit)?;
        let y = read_idx_labels(find(&format!("{prefix}-labels-idx1-ubyte"))?, limit)?;
        Dataset::new(&format!("mnist-{prefix}"), x, y, classes.clone())
    };
    Ok((load("train", train_limit)?, load("t10k", test_limit)?))
}

/// Two isotropic Gaussian classes in `n` dimensions whose means sit at
/// `±separation/2` along the first axis, alternating labels.
pub fn synthetic_blobs(m: usize, n: usize, separation: f64, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || m == 0 {
        return Err(Error::Config("blobs need at least one sample and one feature".into()));
    }
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(m, n);
    let labels: Vec<usize> = (0..m).map(|i| i % 2).collect();
    for (i, &l) in labels.iter().enumerate() {
        for v in x.row_mut(i).iter_mut() {
            *v = normal.sample(&mut rng);
        }
        x.row_mut(i)[0] += if l == 1 { separation / 2.0 } else { -separation / 2.0 };
    }
    Dataset::new("blobs", x, labels, vec!["neg".into(), "pos".into()])
}

/// Noisy XOR on the corners of `[-1, 1]²`.
pub fn synthetic_xor(m: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(m, 2);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let (a, b) = ((i & 1) as f64 * 2.0 - 1.0, ((i >> 1) & 1) as f64 * 2.0 - 1.0);
        x.set(i, 0, a + normal.sample(&mut rng));
        x.set(i, 1, b + normal.sample(&mut rng));
        labels.push(usize::from(a * b < 0.0));
    }
    Dataset::new("xor", x, labels, vec!["same".into(), "diff".into()])
}

pub const DATASET_FORMAT: &str = "lcnn-dataset";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Processed dataset cache, with the scaling parameters that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedDataset {
    pub format: String,
    pub version: u32,
    pub dataset: Dataset,
}

pub fn save_processed(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    if ds.missing_count() > 0 {
        return Err(Error::Data("impute missing values before caching".into()));
    }
    let doc = ProcessedDataset {
        format: DATASET_FORMAT.into(),
        version: DATASET_FORMAT_VERSION,
        dataset: ds.clone(),
    };
    std::fs::write(path, serde_json::to_string(&doc)?)?;
    Ok(())
}

pub fn load_processed(path: impl AsRef<Path>) -> Result<Dataset> {
    let doc: ProcessedDataset = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if doc.format != DATASET_FORMAT || doc.version != DATASET_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported dataset document {} v{}",
            doc.format, doc.version
        )));
    }
    Ok(doc.dataset)
}
