use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lcnn::autoencoder::{
    export_filters, linear_probe, reconstruction_error, sae_gradient_check, sae_train, sparsity_fraction,
    weight_histogram, write_filters, write_histogram_csv, Autoencoder, SaeObjective,
};
use lcnn::capacity::{bound_from_augmented, read_trace_csv, separability_check, theta_from_target, vc_bound};
use lcnn::data::{self, encode_targets, load_mnist, CsvSchema, Dataset, Scaler};
use lcnn::experiment::stats::{format_p_value, friedman_test, wilcoxon_signed_rank};
use lcnn::experiment::{
    cross_validate, grid_search, prepare_dataset, run_experiment, scalability_probe, train_model, DatasetSpec,
    GridSpec, ModelConfig, Protocol,
};
use lcnn::linalg::Matrix;
use lcnn::network::Network;
use lcnn::training::{gradient_check, TrainSchedule};
use lcnn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lcnn",
    version,
    about = "Feedforward networks with a complexity-controlling penalty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on every row of a dataset.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Model configuration JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated k-fold cross-validation of one model.
    Cv {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        protocol: ProtocolArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validated grid search over C, D, width and dropout.
    Gridsearch {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: PathBuf,
        /// Grid JSON with lists `C`, `D`, `hidden`, `dropout`.
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        protocol: ProtocolArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic gradient on a random network.
    Gradcheck {
        /// Model configuration JSON; omit with --sae.
        #[arg(long, required_unless_present = "sae")]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        inputs: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check the autoencoder objective with this hidden width instead.
        #[arg(long)]
        sae: Option<usize>,
        #[arg(long, default_value_t = 1e-2)]
        kl_c: f64,
        #[arg(long, default_value_t = 1e-4)]
        d: f64,
    },
    /// Margin, radius and VC-dimension bound of a trained classifier.
    Capacity {
        /// Network JSON.
        #[arg(long)]
        network: PathBuf,
        /// Dataset CSV or processed dataset JSON.
        #[arg(long, conflicts_with = "trace")]
        data: Option<PathBuf>,
        /// Scaler JSON written by `train`, applied to --data.
        #[arg(long)]
        scaler: Option<PathBuf>,
        /// CSV of penultimate activations with the label last.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Target magnitude used in training.
        #[arg(long, default_value_t = 0.9)]
        t: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a sparse autoencoder on MNIST IDX files.
    Sae {
        /// Directory holding the MNIST IDX files.
        #[arg(long)]
        mnist: PathBuf,
        #[arg(long, default_value_t = 10000)]
        train_limit: usize,
        #[arg(long, default_value_t = 2000)]
        test_limit: usize,
        #[arg(long, default_value_t = 196)]
        hidden: usize,
        #[arg(long, default_value_t = 3e-3)]
        c: f64,
        #[arg(long, default_value_t = 0.0)]
        d: f64,
        #[arg(long, default_value_t = 0.05)]
        rho: f64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 20)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also fit a softmax probe on the hidden code.
        #[arg(long)]
        probe: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wilcoxon and Friedman tests on a score table.
    Stats {
        /// CSV with a name column followed by one column per method.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Training time and accuracy on nested prefixes of one dataset.
    Probe {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment manifest and write the report bundle.
    Report {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset CSV (label in the last column unless --schema says otherwise).
    #[arg(long)]
    data: PathBuf,
    /// CSV schema JSON.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    impute_k: usize,
}

#[derive(Args)]
struct ProtocolArgs {
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ProtocolArgs {
    fn protocol(&self) -> Protocol {
        Protocol {
            folds: self.folds,
            repeats: self.repeats,
            seed: self.seed,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text + "\n")?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    let schema: CsvSchema = match &args.schema {
        Some(p) => read_json(p)?,
        None => CsvSchema::default(),
    };
    let name = args
        .data
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    prepare_dataset(&DatasetSpec {
        name,
        path: args.data.clone(),
        schema,
        impute_k: args.impute_k,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            data,
            config,
            seed,
            out,
        } => {
            let ds = load_data(&data)?;
            let cfg: ModelConfig = read_json(&config)?;
            let all: Vec<usize> = (0..ds.len()).collect();
            let model = train_model(&cfg, &ds, &all, seed)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("network.json"), model.network.to_json()?)?;
            emit(&model.scaler, Some(&out.join("scaler.json")))?;
            emit(&model.report, Some(&out.join("report.json")))?;
            model.report.write_csv(File::create(out.join("report.csv"))?)?;
            println!("training accuracy {:.4}", model.accuracy_on(&ds, &all)?);
        }
        Command::Cv {
            data,
            config,
            protocol,
            out,
        } => {
            let ds = load_data(&data)?;
            let cfg: ModelConfig = read_json(&config)?;
            let r = cross_validate(&cfg, &ds, &protocol.protocol())?;
            eprintln!(
                "accuracy {:.2} ± {:.2} over {} folds",
                100.0 * r.mean,
                100.0 * r.std,
                r.completed
            );
            emit(&r, out.as_deref())?;
        }
        Command::Gridsearch {
            data,
            config,
            grid,
            protocol,
            out,
        } => {
            let ds = load_data(&data)?;
            let cfg: ModelConfig = read_json(&config)?;
            let grid: GridSpec = read_json(&grid)?;
            let r = grid_search(&grid, &cfg, &ds, &protocol.protocol())?;
            eprintln!(
                "best C={} D={} hidden={:?} dropout={} mean accuracy {:.4}",
                r.best.c, r.best.d, r.best.hidden, r.best.dropout, r.best_mean
            );
            emit(&r, out.as_deref())?;
        }
        Command::Gradcheck {
            config,
            inputs,
            classes,
            samples,
            step,
            seed,
            sae,
            kl_c,
            d,
        } => {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let check = if let Some(hidden) = sae {
                use rand::Rng;
                let x = Matrix::from_vec(
                    samples,
                    inputs,
                    (0..samples * inputs).map(|_| rng.random::<f64>()).collect(),
                )?;
                let ae = Autoencoder::init(inputs, hidden, seed)?;
                sae_gradient_check(&ae, &x, &SaeObjective::new(kl_c, d, 0.05), step, seed)?
            } else {
                use rand::Rng;
                let cfg: ModelConfig = read_json(config.as_deref().expect("required by clap"))?;
                let net = cfg.build_network(inputs, classes, seed)?;
                let x = Matrix::from_vec(
                    samples,
                    inputs,
                    (0..samples * inputs).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )?;
                let labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
                let targets = encode_targets(&labels, classes, cfg.objective.loss, cfg.objective.target_magnitude)?;
                gradient_check(&net, &cfg.objective, &x, &targets, step, seed)?
            };
            emit(&check, None)?;
        }
        Command::Capacity {
            network,
            data,
            scaler,
            trace,
            t,
            out,
        } => {
            let net = Network::from_json(&fs::read_to_string(&network)?)?;
            let report = match (data, trace) {
                (Some(path), _) => {
                    let ds = if path.extension().is_some_and(|e| e == "json") {
                        data::load_processed(&path)?
                    } else {
                        data::knn_impute(&data::load_csv(&path, &CsvSchema::default())?, 5)?
                    };
                    let x = match &scaler {
                        Some(p) => read_json::<Scaler>(p)?.transform(&ds.features)?,
                        None => ds.features,
                    };
                    let tr = net.forward(&x)?;
                    vc_bound(&net, &tr, t)?
                }
                (None, Some(path)) => {
                    let (points, labels) = read_trace_csv(File::open(&path)?)?;
                    let kind = net.output_layer().activation;
                    let (theta, available) = match theta_from_target(kind, t) {
                        Ok(v) => (v, true),
                        Err(Error::Unsupported(_)) => (1.0, false),
                        Err(e) => return Err(e),
                    };
                    let betas: Vec<Vec<f64>> = (0..net.output_width()).map(|j| net.output_beta(j)).collect();
                    let report = bound_from_augmented(&points.append_column(1.0), &betas, theta, available)?;
                    eprintln!("labels linearly separable: {}", separability_check(&points, &labels));
                    report
                }
                (None, None) => return Err(Error::Config("pass --data or --trace".into())),
            };
            emit(&report, out.as_deref())?;
        }
        Command::Sae {
            mnist,
            train_limit,
            test_limit,
            hidden,
            c,
            d,
            rho,
            epochs,
            batch_size,
            learning_rate,
            seed,
            probe,
            out,
        } => {
            let (train, test) = load_mnist(&mnist, Some(train_limit), Some(test_limit))?;
            let mut ae = Autoencoder::init(train.feature_count(), hidden, seed)?;
            let schedule = TrainSchedule {
                epochs,
                batch_size,
                learning_rate,
                lr_decay: 1.0,
                shuffle_seed: seed,
            };
            let report = sae_train(&mut ae, &train.features, &SaeObjective::new(c, d, rho), &schedule)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("autoencoder.json"), ae.to_json()?)?;
            emit(&report, Some(&out.join("report.json")))?;
            let weights = ae.all_weights();
            write_histogram_csv(
                &weight_histogram(&weights, 100, 1.0)?,
                File::create(out.join("histogram.csv"))?,
            )?;
            let side = (train.feature_count() as f64).sqrt() as usize;
            if side * side == train.feature_count() {
                write_filters(out.join("filters"), &export_filters(ae.encoder_weights(), side, side)?)?;
            }
            println!(
                "sparsity fraction (|w| < 0.01) {:.4}",
                sparsity_fraction(&weights, 0.01)
            );
            println!(
                "test reconstruction error {:.4}",
                reconstruction_error(&ae, &test.features)?
            );
            if probe {
                let probe_schedule = TrainSchedule {
                    epochs: 20,
                    batch_size: 32,
                    learning_rate: 0.1,
                    lr_decay: 1.0,
                    shuffle_seed: seed,
                };
                let r = linear_probe(
                    &ae,
                    (&train.features, &train.labels),
                    (&test.features, &test.labels),
                    10,
                    &probe_schedule,
                    seed,
                )?;
                println!("probe test accuracy {:.4}", r.test_accuracy);
            }
        }
        Command::Stats { scores, out } => {
            let mut rdr = csv::Reader::from_path(&scores)?;
            let methods: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_owned).collect();
            let mut rows = Vec::new();
            for (r, rec) in rdr.records().enumerate() {
                let rec = rec?;
                let row = rec
                    .iter()
                    .skip(1)
                    .enumerate()
                    .map(|(c, v)| {
                        v.trim().parse::<f64>().map_err(|e| Error::Format {
                            row: r + 1,
                            column: c + 1,
                            message: e.to_string(),
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                rows.push(row);
            }
            let m = Matrix::from_rows(&rows)?;
            let mut pairs = Vec::new();
            for i in 0..methods.len() {
                for j in i + 1..methods.len() {
                    let entry = match wilcoxon_signed_rank(&m.column(i), &m.column(j)) {
                        Ok(w) => {
                            serde_json::json!({"a": methods[i], "b": methods[j], "p_value": format_p_value(w.p_value), "result": w})
                        }
                        Err(e) => serde_json::json!({"a": methods[i], "b": methods[j], "notice": e.to_string()}),
                    };
                    pairs.push(entry);
                }
            }
            let friedman = match friedman_test(&m) {
                Ok(f) => serde_json::json!({"p_value": format_p_value(f.p_value), "result": f}),
                Err(e) => serde_json::json!({"notice": e.to_string()}),
            };
            emit(
                &serde_json::json!({"methods": methods, "wilcoxon": pairs, "friedman": friedman}),
                out.as_deref(),
            )?;
        }
        Command::Probe {
            data,
            config,
            sizes,
            seed,
            out,
        } => {
            let ds = load_data(&data)?;
            let cfg: ModelConfig = read_json(&config)?;
            let rows = scalability_probe(&cfg, &ds, &sizes, seed)?;
            match out {
                Some(p) => {
                    let mut w = csv::Writer::from_path(p)?;
                    for r in &rows {
                        w.serialize(r)?;
                    }
                    w.flush()?;
                }
                None => emit(&rows, None)?,
            }
        }
        Command::Report { manifest, out } => {
            let output = run_experiment(&manifest, &out)?;
            for n in &output.log.notices {
                eprintln!("notice: {n}");
            }
            let mut csv_out = Vec::new();
            output.table.write_csv(&mut csv_out)?;
            print!("{}", String::from_utf8_lossy(&csv_out));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
