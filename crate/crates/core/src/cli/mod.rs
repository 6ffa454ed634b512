//! Command-line front end: `train`, `eval`, `baseline`, `sweep-lambda` and
//! `export-features`, all driven by a [`RunConfig`] file.

mod config;

pub use config::{Classifier, DatasetSource, DatasetSpec, RunConfig};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;

use crate::atomic::write_atomic;
use crate::classify::{accuracy, fisher_ratio, knn_predict, linear_predict, LabeledFeatures};
use crate::data::{one_hot, Dataset};
use crate::error::{Error, Result};
use crate::layer::{TraceRow, TrainConfig};
use crate::matrix::Matrix;
use crate::stack::{encode_stack, load_model, save_model, train_stack_with, StackModel, StackTraining};

#[derive(Debug, Parser)]
#[command(name = "diae", version, about = "Stacked discriminative autoencoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a stack and write the model plus one trace CSV per layer.
    Train { config: PathBuf },
    /// Encode the evaluation split and classify it.
    Eval {
        config: PathBuf,
        /// Defaults to `<output_dir>/model.diae`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Overrides the config's classifier.
        #[arg(long)]
        classifier: Option<Classifier>,
    },
    /// Train and evaluate the unsupervised (λ = 0) stack on the same setup.
    Baseline { config: PathBuf },
    /// Train one layer per λ and tabulate its losses and accuracy.
    SweepLambda {
        config: PathBuf,
        /// Comma-separated, all positive.
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
    },
    /// Write encoded features and labels as comma-separated text.
    ExportFeatures {
        config: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `train` or `test`.
        #[arg(long, default_value = "train")]
        split: String,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => cmd_train(&RunConfig::from_file(config)?).map(|_| ()),
        Command::Eval {
            config,
            model,
            classifier,
        } => {
            let mut cfg = RunConfig::from_file(config)?;
            if let Some(c) = classifier {
                cfg.classifier = c;
            }
            let model = model.unwrap_or_else(|| cfg.output_dir.join(MODEL_FILE));
            cmd_eval(&cfg, &model).map(|_| ())
        }
        Command::Baseline { config } => cmd_baseline(&RunConfig::from_file(config)?).map(|_| ()),
        Command::SweepLambda { config, lambdas } => {
            cmd_sweep_lambda(&RunConfig::from_file(config)?, &lambdas).map(|_| ())
        }
        Command::ExportFeatures {
            config,
            model,
            out,
            split,
        } => {
            let cfg = RunConfig::from_file(config)?;
            let model = model.unwrap_or_else(|| cfg.output_dir.join(MODEL_FILE));
            let split = match split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::Config(format!("unknown split `{other}`"))),
            };
            cmd_export_features(&cfg, &model, split, &out)
        }
    }
}

pub const MODEL_FILE: &str = "model.diae";
pub const BASELINE_MODEL_FILE: &str = "baseline_model.diae";

/// Loaded train and optional test splits with a shared class count.
pub struct Splits {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub classes: usize,
    pub seconds: f64,
}

impl Splits {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let start = Instant::now();
        let train = cfg.train.load(cfg.data_seed)?;
        let test = cfg.test.as_ref().map(|t| t.load(cfg.data_seed)).transpose()?;
        if let Some(t) = &test {
            if t.features() != train.features() {
                return Err(Error::dims(
                    "test split",
                    format!("{} features", train.features()),
                    format!("{}", t.features()),
                ));
            }
        }
        let seen = train
            .num_classes()
            .max(test.as_ref().map_or(0, Dataset::num_classes));
        let classes = match cfg.classes {
            Some(c) if c < seen => {
                return Err(Error::Config(format!("key `classes`: {c} but label {} occurs", seen - 1)))
            }
            Some(c) => c,
            None => seen,
        };
        info!("loaded {} training samples ({} features)", train.len(), train.features());
        Ok(Splits {
            train,
            test,
            classes,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// The test split when configured, otherwise the training split.
    pub fn eval(&self) -> &Dataset {
        self.test.as_ref().unwrap_or(&self.train)
    }
}

/// Key/value report lines in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report(pub Vec<(String, String)>);

impl Report {
    pub fn put(&mut self, key: impl Into<String>, value: impl ToString) {
        self.0.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_kv(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_text(&self, title: &str) -> String {
        let width = self.0.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = format!("{title}\n");
        for (k, v) in &self.0 {
            let _ = writeln!(s, "  {k:<width$}  {v}");
        }
        s
    }

    /// Writes `<stem>.txt` and `<stem>.kv` into `dir` and prints the text.
    pub fn emit(&self, dir: &Path, stem: &str, title: &str) -> Result<()> {
        let text = self.to_text(title);
        write_atomic(dir.join(format!("{stem}.txt")), text.as_bytes())?;
        write_atomic(dir.join(format!("{stem}.kv")), self.to_kv().as_bytes())?;
        print!("{text}");
        Ok(())
    }

    pub fn parse_kv(text: &str) -> Report {
        Report(
            text.lines()
                .filter_map(|l| l.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = format!("{}\n", TraceRow::CSV_HEADER);
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn train_model(cfg: &RunConfig, splits: &Splits) -> Result<StackTraining> {
    let l = one_hot(&splits.train.labels, splits.classes)?;
    let mut run = train_stack_with(
        &splits.train.x,
        l.as_matrix(),
        &cfg.widths,
        &cfg.layers,
        |k, r| {
            info!(
                "layer {k}: {} iterations in {:.2}s, final relative change {:?}",
                r.trace.len(),
                r.seconds,
                r.final_rel_change
            )
        },
    )?;
    let meta = &mut run.model.meta;
    meta.insert("dataset.fingerprint".into(), splits.train.fingerprint());
    meta.insert("dataset.name".into(), splits.train.name.clone());
    meta.insert("dataset.samples".into(), splits.train.len().to_string());
    meta.insert("classes".into(), splits.classes.to_string());
    Ok(run)
}

fn write_training(cfg: &RunConfig, run: &StackTraining, prefix: &str, model_file: &str) -> Result<Report> {
    create_dir(&cfg.output_dir)?;
    for (k, r) in run.reports.iter().enumerate() {
        write_atomic(
            cfg.output_dir.join(format!("{prefix}trace_layer{k}.csv")),
            trace_csv(&r.trace).as_bytes(),
        )?;
    }
    save_model(&run.model, cfg.output_dir.join(model_file))?;
    let mut rep = Report::default();
    rep.put("widths", join(&cfg.widths));
    for (k, r) in run.reports.iter().enumerate() {
        rep.put(format!("layer{k}.iterations"), r.trace.len());
        rep.put(format!("layer{k}.converged"), r.converged);
        if let Some(last) = r.trace.last() {
            rep.put(format!("layer{k}.recon_loss"), format!("{:?}", last.recon_loss));
            rep.put(format!("layer{k}.disc_loss"), format!("{:?}", last.disc_loss));
            rep.put(format!("layer{k}.objective"), format!("{:?}", last.objective));
        }
        rep.put(
            format!("layer{k}.final_rel_change"),
            r.final_rel_change.map_or("none".into(), |c| format!("{c:?}")),
        );
        rep.put(format!("time.train_layer{k}_s"), format!("{:.3}", r.seconds));
    }
    Ok(rep)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Trains, writes `model.diae`, `trace_layer<k>.csv` and the train report.
pub fn cmd_train(cfg: &RunConfig) -> Result<Report> {
    let splits = Splits::load(cfg)?;
    let run = train_model(cfg, &splits)?;
    let mut rep = write_training(cfg, &run, "", MODEL_FILE)?;
    rep.put("time.load_s", format!("{:.3}", splits.seconds));
    rep.emit(&cfg.output_dir, "train_report", "train")?;
    Ok(rep)
}

fn evaluate(cfg: &RunConfig, model: &StackModel, splits: &Splits, load_s: f64, rep: &mut Report) -> Result<()> {
    let target = splits.eval();
    let start = Instant::now();
    let query = encode_stack(model, &target.x)?;
    let reference = match cfg.classifier {
        Classifier::Knn => Some(encode_stack(model, &splits.train.x)?),
        Classifier::Linear => None,
    };
    let encode_s = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let pred = match reference {
        Some(r) => knn_predict(&LabeledFeatures::new(r, splits.train.labels.clone())?, &query, cfg.knn_k)?,
        None => linear_predict(&model.top().d, &query)?,
    };
    let acc = accuracy(&pred, &target.labels)?;
    let classify_s = start.elapsed().as_secs_f64();

    rep.put("classifier", cfg.classifier.name());
    if cfg.classifier == Classifier::Knn {
        rep.put("knn_k", cfg.knn_k);
    }
    rep.put("split", if splits.test.is_some() { "test" } else { "train" });
    rep.put("train_samples", splits.train.len());
    rep.put("eval_samples", target.len());
    rep.put("accuracy", format!("{acc:?}"));
    match fisher_ratio(&LabeledFeatures::new(query, target.labels.clone())?) {
        Ok(f) => rep.put("fisher_ratio", format!("{f:?}")),
        Err(e) => {
            rep.put("fisher_ratio", "NaN");
            rep.put("fisher_ratio_error", e);
        }
    }
    rep.put("time.load_s", format!("{load_s:.3}"));
    rep.put("time.encode_s", format!("{encode_s:.3}"));
    rep.put("time.classify_s", format!("{classify_s:.3}"));
    Ok(())
}

/// Evaluates a saved model; writes `eval_report.{txt,kv}`.
pub fn cmd_eval(cfg: &RunConfig, model_path: &Path) -> Result<Report> {
    let start = Instant::now();
    let model = load_model(model_path)?;
    let splits = Splits::load(cfg)?;
    let load_s = start.elapsed().as_secs_f64();
    let mut rep = Report::default();
    evaluate(cfg, &model, &splits, load_s, &mut rep)?;
    create_dir(&cfg.output_dir)?;
    rep.emit(&cfg.output_dir, "eval_report", "eval")?;
    Ok(rep)
}

/// Trains the λ = 0 stack with the configured seed and widths, then
/// evaluates it. Outputs carry a `baseline_` prefix.
pub fn cmd_baseline(cfg: &RunConfig) -> Result<Report> {
    let base = cfg.with_lambda(0.0);
    let splits = Splits::load(&base)?;
    let run = train_model(&base, &splits)?;
    write_training(&base, &run, "baseline_", BASELINE_MODEL_FILE)?;
    let mut rep = Report::default();
    evaluate(&base, &run.model, &splits, splits.seconds, &mut rep)?;
    for (k, r) in run.reports.iter().enumerate() {
        rep.put(format!("time.train_layer{k}_s"), format!("{:.3}", r.seconds));
    }
    rep.emit(&base.output_dir, "baseline_report", "baseline")?;
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub recon_loss: f64,
    pub disc_loss: f64,
    pub accuracy: f64,
}

/// One single-layer model per λ on the first configured width; writes
/// `sweep_lambda.csv`.
pub fn cmd_sweep_lambda(cfg: &RunConfig, lambdas: &[f64]) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::Config("the λ list is empty".into()));
    }
    if let Some(bad) = lambdas.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::Config(format!(
            "λ = {bad} rejected: a sweep needs λ > 0; use `baseline` for λ = 0"
        )));
    }
    let splits = Splits::load(cfg)?;
    let mut rows = Vec::with_capacity(lambdas.len());
    let mut csv = String::from("lambda,recon_loss,disc_loss,accuracy\n");
    for &lambda in lambdas {
        let one = RunConfig {
            widths: vec![cfg.widths[0]],
            layers: vec![TrainConfig {
                lambda,
                ..cfg.layers[0]
            }],
            ..cfg.clone()
        };
        let run = train_model(&one, &splits)?;
        let last = *run.reports[0]
            .trace
            .last()
            .ok_or_else(|| Error::Config("max_iter = 0 leaves nothing to sweep".into()))?;
        let mut rep = Report::default();
        evaluate(&one, &run.model, &splits, 0.0, &mut rep)?;
        let acc: f64 = rep.get("accuracy").and_then(|a| a.parse().ok()).unwrap_or(f64::NAN);
        let row = SweepRow {
            lambda,
            recon_loss: last.recon_loss,
            disc_loss: last.disc_loss,
            accuracy: acc,
        };
        let _ = writeln!(csv, "{:?},{:?},{:?},{:?}", row.lambda, row.recon_loss, row.disc_loss, row.accuracy);
        rows.push(row);
    }
    create_dir(&cfg.output_dir)?;
    write_atomic(cfg.output_dir.join("sweep_lambda.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Comma-separated `f0,…,f{h−1},label` rows with round-trip float text.
pub fn features_csv(features: &Matrix, labels: &[usize]) -> String {
    let h = features.rows();
    let mut s: String = (0..h).map(|i| format!("f{i},")).collect();
    s.push_str("label\n");
    let t = features.transpose();
    for (j, &l) in labels.iter().enumerate() {
        for v in t.row(j) {
            let _ = write!(s, "{v:?},");
        }
        let _ = writeln!(s, "{l}");
    }
    s
}

pub fn cmd_export_features(cfg: &RunConfig, model_path: &Path, split: Split, out: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let splits = Splits::load(cfg)?;
    let ds = match split {
        Split::Train => &splits.train,
        Split::Test => splits
            .test
            .as_ref()
            .ok_or_else(|| Error::Config("no `test.*` keys configured".into()))?,
    };
    let h = encode_stack(&model, &ds.x)?;
    write_atomic(out, features_csv(&h, &ds.labels).as_bytes())
}
