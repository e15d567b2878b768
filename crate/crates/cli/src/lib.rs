//! `ifcert` command-line surface. Every command prints one JSON document on
//! stdout; progress and training logs go to stderr.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use ifcert_core::dataset::{ingest_csv, train_test_split, DataSchema, Dataset};
use ifcert_core::evaluate::{evaluate, EvalReport};
use ifcert_core::metric::{learn_mahalanobis, load_metric, save_metric, MetricLearnConfig};
use ifcert_core::model::{load_model, save_model, Activation, FeatureSchema, NeuralNet};
use ifcert_core::pwl::DEFAULT_GRID_M;
use ifcert_core::solve::{certify, CertificationResult, SolveConfig, SolveStatus, DEFAULT_CUTOFF_SECS, DEFAULT_GAP_TOL};
use ifcert_core::train::{init_network, train_fair, train_standard, EpochLog, LossKind, TrainConfig};

pub const DEFAULT_EPS: f64 = 0.2;
/// Exit code when the cutoff stopped certification before convergence.
pub const EXIT_CUTOFF: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ifcert", version, about = "Certify and train individually fair neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bound the largest output change between metric-similar inputs.
    Certify(CertifyArgs),
    /// Train a model with MILP fair training or fairness through unawareness.
    Train(TrainArgs),
    /// Learn a Mahalanobis fairness metric from data.
    LearnMetric(LearnMetricArgs),
    /// Accuracy, balanced accuracy and EOD of a model on a data split.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    /// Similarity threshold ε.
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    /// Absolute gap at which branch-and-bound stops.
    #[arg(long, default_value_t = DEFAULT_GAP_TOL)]
    pub tau: f64,
    /// Wall-clock cutoff in seconds.
    #[arg(long, default_value_t = DEFAULT_CUTOFF_SECS)]
    pub cutoff: f64,
    /// PWL cells per smooth activation.
    #[arg(long, default_value_t = DEFAULT_GRID_M)]
    pub grid_m: usize,
    #[arg(long)]
    pub node_limit: Option<usize>,
}

impl SolveArgs {
    pub fn solve_config(&self) -> Result<SolveConfig> {
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            bail!("--cutoff must be a positive number of seconds");
        }
        Ok(SolveConfig {
            gap_tol: self.tau,
            time_cutoff: Duration::from_secs_f64(self.cutoff),
            node_limit: self.node_limit,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct CertifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub metric: PathBuf,
    /// Feature schema of the model inputs; defaults to the unit box.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[command(flatten)]
    pub solve: SolveArgs,
    /// Stream anytime bounds to stderr as JSON lines.
    #[arg(long)]
    pub progress: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Fair,
    Ftu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Bce,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Sigmoid => Activation::Sigmoid,
            ActivationArg::Tanh => Activation::Tanh,
            ActivationArg::Identity => Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Column description of the CSV file.
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let schema = DataSchema::load(&self.schema)?;
        Ok(ingest_csv(&self.data, &schema)?)
    }

    fn split(&self, data: &Dataset) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&self.train_fraction) {
            bail!("--train-fraction must lie in [0, 1]");
        }
        let (tr, te) = train_test_split(data.len(), self.train_fraction, self.seed);
        Ok((data.subset(&tr), data.subset(&te)))
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = Mode::Fair)]
    pub mode: Mode,
    /// Fairness metric; required in fair mode.
    #[arg(long)]
    pub metric: Option<PathBuf>,
    /// Where to write the trained model.
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the input feature schema (default: next to the model).
    #[arg(long)]
    pub features_out: Option<PathBuf>,
    /// Epoch log as JSON lines (default: stderr).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "8")]
    pub hidden: Vec<usize>,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    pub activation: ActivationArg,
    #[arg(long, value_enum, default_value_t = LossArg::Bce)]
    pub loss: LossArg,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// Epochs trained with λ = 1 before switching (default: half, rounded up).
    #[arg(long)]
    pub lambda_switch_epoch: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_M)]
    pub grid_m: usize,
    /// Per-sample MILP cutoff in seconds.
    #[arg(long, default_value_t = ifcert_core::train::DEFAULT_SAMPLE_CUTOFF_SECS)]
    pub sample_cutoff: f64,
}

#[derive(Debug, Clone, Args)]
pub struct LearnMetricArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = MetricLearnConfig::default().iterations)]
    pub iterations: usize,
    #[arg(long, default_value_t = MetricLearnConfig::default().min_direction_norm)]
    pub min_direction_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Test,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Also certify the model against this metric.
    #[arg(long)]
    pub metric: Option<PathBuf>,
    #[command(flatten)]
    pub solve: SolveArgs,
}

/// JSON document for stdout plus the process exit code.
#[derive(Debug)]
pub struct Outcome {
    pub output: Value,
    pub exit_code: i32,
}

impl Outcome {
    fn ok(output: Value) -> Self {
        Self { output, exit_code: 0 }
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Certify(a) => cmd_certify(&a),
        Command::Train(a) => cmd_train(&a),
        Command::LearnMetric(a) => cmd_learn_metric(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

fn certification_json(r: &CertificationResult, schema: &FeatureSchema) -> Value {
    let witness = r.witness.as_ref().map(|w| {
        json!({
            "x_prime": w.x_prime,
            "x_dprime": w.x_dprime,
            "delta_recomputed": w.delta,
            "x_prime_raw": schema.denormalize(&w.x_prime),
            "x_dprime_raw": schema.denormalize(&w.x_dprime),
        })
    });
    json!({
        "delta_lower": r.delta_lower,
        "delta_upper": r.delta_upper,
        "status": r.status,
        "witness": witness,
        "nodes": r.nodes,
        "wall_time": r.wall_time,
    })
}

fn status_exit_code(status: SolveStatus) -> i32 {
    match status {
        SolveStatus::Converged | SolveStatus::Infeasible => 0,
        SolveStatus::CutoffReached | SolveStatus::NodeLimit => EXIT_CUTOFF,
    }
}

fn load_features(path: Option<&Path>, net: &NeuralNet) -> Result<FeatureSchema> {
    let schema = match path {
        Some(p) => FeatureSchema::load(p)?,
        None => FeatureSchema::unit_box(net.input_dim(), &[]),
    };
    if schema.len() != net.input_dim() {
        bail!("feature schema has {} features, model expects {}", schema.len(), net.input_dim());
    }
    Ok(schema)
}

fn run_certify(
    net: &NeuralNet,
    metric_path: &Path,
    schema: &FeatureSchema,
    solve: &SolveArgs,
    progress: bool,
) -> Result<CertificationResult> {
    let metric = load_metric(metric_path)?;
    let cfg = solve.solve_config()?;
    let stderr = io::stderr();
    let mut on_progress = |p: &ifcert_core::solve::Progress| {
        if progress {
            let line = json!({"t": p.elapsed, "delta_lower": p.delta_lower, "delta_upper": p.delta_upper, "nodes": p.nodes});
            let _ = writeln!(stderr.lock(), "{line}");
        }
    };
    Ok(certify(net, &metric, solve.eps, schema, solve.grid_m, &cfg, &mut on_progress)?)
}

pub fn cmd_certify(a: &CertifyArgs) -> Result<Outcome> {
    let net = load_model(&a.model)?;
    let schema = load_features(a.features.as_deref(), &net)?;
    let r = run_certify(&net, &a.metric, &schema, &a.solve, a.progress)?;
    let mut out = certification_json(&r, &schema);
    out["config"] = json!({
        "eps": a.solve.eps,
        "tau": a.solve.tau,
        "cutoff": a.solve.cutoff,
        "grid_m": a.solve.grid_m,
    });
    Ok(Outcome {
        output: out,
        exit_code: status_exit_code(r.status),
    })
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    if !(a.sample_cutoff > 0.0 && a.sample_cutoff.is_finite()) {
        bail!("--sample-cutoff must be a positive number of seconds");
    }
    let defaults = TrainConfig::default();
    Ok(TrainConfig {
        learning_rate: a.learning_rate,
        l2_reg: a.l2,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lambda: a.lambda,
        lambda_switch_epoch: a.lambda_switch_epoch,
        eps: a.eps,
        loss: match a.loss {
            LossArg::Bce => LossKind::BinaryCrossEntropy,
            LossArg::Mse => LossKind::MeanSquaredError,
        },
        solve: SolveConfig {
            time_cutoff: Duration::from_secs_f64(a.sample_cutoff),
            ..defaults.solve
        },
        grid_m: a.grid_m,
        seed: a.data.seed,
    })
}

/// `model.json` → `model.features.json`
fn default_features_path(model: &Path) -> PathBuf {
    let stem = model.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    model.with_file_name(format!("{stem}.features.json"))
}

pub fn cmd_train(a: &TrainArgs) -> Result<Outcome> {
    let data = a.data.load()?;
    let (train, test) = a.data.split(&data)?;
    let cfg = train_config(a)?;
    let output_activation = match cfg.loss {
        LossKind::BinaryCrossEntropy => Activation::Sigmoid,
        LossKind::MeanSquaredError => Activation::Identity,
    };
    let init = init_network(data.schema.len(), &a.hidden, a.activation.into(), output_activation, a.data.seed)?;

    let mut sink: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stderr()),
    };
    let mut on_epoch = |e: &EpochLog| {
        let _ = writeln!(sink, "{}", serde_json::to_string(e).expect("log entry serializes"));
    };
    let outcome = match a.mode {
        Mode::Ftu => train_standard(&init, &train, &cfg, true, &mut on_epoch)?,
        Mode::Fair => {
            let Some(path) = &a.metric else {
                bail!("--metric is required in fair mode");
            };
            let metric = load_metric(path)?;
            train_fair(&init, &train, &metric, &cfg, &mut on_epoch)?
        }
    };
    save_model(&outcome.net, &a.out)?;
    let features = a.features_out.clone().unwrap_or_else(|| default_features_path(&a.out));
    data.schema.save(&features)?;
    Ok(Outcome::ok(json!({
        "model": a.out,
        "features": features,
        "dropped_columns": data.dropped,
        "train": evaluate(&outcome.net, &train.x, &train.y, &train.schema)?,
        "test": evaluate(&outcome.net, &test.x, &test.y, &test.schema)?,
    })))
}

pub fn cmd_learn_metric(a: &LearnMetricArgs) -> Result<Outcome> {
    let data = ingest_csv(&a.data, &DataSchema::load(&a.schema)?)?;
    let cfg = MetricLearnConfig {
        iterations: a.iterations,
        min_direction_norm: a.min_direction_norm,
        ..MetricLearnConfig::default()
    };
    let metric = learn_mahalanobis(&data.x, &data.schema, &cfg)?;
    save_metric(&metric, &a.out)?;
    Ok(Outcome::ok(json!({
        "metric": a.out,
        "features": data.schema.features().iter().map(|f| &f.name).collect::<Vec<_>>(),
        "sensitive": data.schema.sensitive_indices(),
    })))
}

#[derive(Serialize)]
struct EvalOutput {
    split: &'static str,
    #[serde(flatten)]
    report: EvalReport,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let net = load_model(&a.model)?;
    let data = a.data.load()?;
    if data.schema.len() != net.input_dim() {
        bail!("data has {} features after encoding, model expects {}", data.schema.len(), net.input_dim());
    }
    let (train, test) = a.data.split(&data)?;
    let (name, part) = match a.split {
        Split::All => ("all", &data),
        Split::Train => ("train", &train),
        Split::Test => ("test", &test),
    };
    let mut report = evaluate(&net, &part.x, &part.y, &part.schema)?;
    let mut exit_code = 0;
    if let Some(metric) = &a.metric {
        let r = run_certify(&net, metric, &data.schema, &a.solve, false)?;
        exit_code = status_exit_code(r.status);
        report.delta_certified = Some(r);
    }
    Ok(Outcome {
        output: serde_json::to_value(EvalOutput { split: name, report })?,
        exit_code,
    })
}
