//! The `ivim` command line tool.
//!
//! Every subcommand resolves its settings in three layers: built-in
//! defaults, then an optional `--config` JSON file, then command line flags
//! (`--set key.path=value` last). Flag names mirror the JSON keys with `-`
//! in place of `_`; nested keys are listed in each flag's help. The fully
//! resolved settings are written to a provenance JSON next to the primary
//! output, and that file can be passed back through `--config` to rerun the
//! command.

mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{IvimError, Result};
use crate::eval::{
    correlate_fraction_with_covariate, grid_search, sampling_factor_sweep, Method,
    SweepConfig, DEFAULT_STAGE_SPLIT,
};
use crate::fit::{fit_lsq, fit_segmented, FitBounds, FitResult, DEFAULT_B_THRESHOLD};
use crate::io;
use crate::model::{ivim_curve, normalize_curve, BValueSchedule, SignalCurve};
use crate::nn::{
    load_weights, predict, save_weights, train, LossAxis, NetworkConfig, NetworkWeights, TrainingConfig,
    TrainingMode,
};
use crate::simulate::{generate_dataset, protocol_schedule, snr_serde, ParamRanges, SimDatasetConfig};

pub use config::resolve;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "IVIM_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "ivim", version, about = "IVIM parameter estimation toolkit")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = ".")]
    pub out_dir: PathBuf,
    /// JSON settings file; command line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any setting by its dotted JSON path, e.g.
    /// `--set training.loss_weights.alpha_dc=0.5`. Values are parsed as JSON,
    /// falling back to a plain string.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic dataset.
    Simulate(SimulateArgs),
    /// Train a network estimator on a dataset CSV.
    Train(TrainArgs),
    /// Estimate parameters for every curve of a CSV.
    Fit(FitArgs),
    /// NRMSE of estimators across b-value sampling factors.
    Sweep(SweepArgs),
    /// One-dimensional search over a loss weight.
    Gridsearch(GridArgs),
    /// Pearson r between per-case f and a covariate, split into two stages.
    Correlate(CorrelateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of curves [count].
    #[arg(long)]
    pub count: Option<usize>,
    /// s0 / sigma; `inf` disables noise [snr].
    #[arg(long)]
    pub snr: Option<f64>,
    /// Low b-value sampling stride [factor].
    #[arg(long)]
    pub factor: Option<usize>,
    /// Explicit b-values, replacing the sampled protocol [b_values].
    #[arg(long, value_delimiter = ',')]
    pub b_values: Option<Vec<f64>>,
    /// [seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Signal at b=0 [s0].
    #[arg(long)]
    pub s0: Option<f64>,
    /// Output CSV (default: OUT_DIR/dataset.csv) [out].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset CSV [data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// supervised, ivimnet or super-dc [training.mode].
    #[arg(long)]
    pub mode: Option<TrainingMode>,
    /// [training.seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [training.learning_rate]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// [training.batch_size]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [training.validation_fraction]
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// [training.patience_epochs]
    #[arg(long)]
    pub patience_epochs: Option<usize>,
    /// [training.max_epochs]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// [training.loss_weights.alpha_d]
    #[arg(long)]
    pub alpha_d: Option<f64>,
    /// [training.loss_weights.alpha_f]
    #[arg(long)]
    pub alpha_f: Option<f64>,
    /// [training.loss_weights.alpha_d_star]
    #[arg(long)]
    pub alpha_dstar: Option<f64>,
    /// [training.loss_weights.alpha_dc]
    #[arg(long)]
    pub alpha_dc: Option<f64>,
    /// Hidden layer count (default 3) [hidden_layers].
    #[arg(long)]
    pub hidden_layers: Option<usize>,
    /// Hidden layer width (default: number of b-values) [hidden_width].
    #[arg(long)]
    pub hidden_width: Option<usize>,
    /// Weight file (default: OUT_DIR/weights.bin) [out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss history CSV (default: next to the weight file) [history].
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Curves CSV [data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// seg, lsq or net [method].
    #[arg(long)]
    pub method: Option<FitMethod>,
    /// Weight file, required by `net` [weights].
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// b-value separating the segmented fit's two stages [b_threshold].
    #[arg(long)]
    pub b_threshold: Option<f64>,
    /// Output CSV (default: OUT_DIR/fits.csv) [out].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated sampling factors [factors].
    #[arg(long, value_delimiter = ',')]
    pub factors: Option<Vec<usize>>,
    /// Comma-separated: super-dc, ivimnet, supervised, lsq, seg [methods].
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// [train_count]
    #[arg(long)]
    pub train_count: Option<usize>,
    /// [test_count]
    #[arg(long)]
    pub test_count: Option<usize>,
    /// `inf` disables noise [snr].
    #[arg(long)]
    pub snr: Option<f64>,
    /// [seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [training.learning_rate]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// [training.max_epochs]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// [training.loss_weights.alpha_dc]
    #[arg(long)]
    pub alpha_dc: Option<f64>,
    /// [hidden_layers]
    #[arg(long)]
    pub hidden_layers: Option<usize>,
    /// Output CSV (default: OUT_DIR/sweep.csv) [out].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// alpha_D, alpha_f, alpha_Dstar or alpha_dc [axis].
    #[arg(long)]
    pub axis: Option<LossAxis>,
    /// Comma-separated candidate values [grid].
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Training CSV; simulated when absent [data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Labelled evaluation CSV; simulated when absent [eval].
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Sampling factor of simulated data [factor].
    #[arg(long)]
    pub factor: Option<usize>,
    /// [train_count]
    #[arg(long)]
    pub train_count: Option<usize>,
    /// [test_count]
    #[arg(long)]
    pub test_count: Option<usize>,
    /// [snr]
    #[arg(long)]
    pub snr: Option<f64>,
    /// [seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// supervised, ivimnet or super-dc [training.mode].
    #[arg(long)]
    pub mode: Option<TrainingMode>,
    /// [training.max_epochs]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// [training.learning_rate]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Output CSV (default: OUT_DIR/gridsearch.csv) [out].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// Per-case estimates; first column is the case id [fits].
    #[arg(long)]
    pub fits: Option<PathBuf>,
    /// Per-case covariate; first column is the case id [covariate].
    #[arg(long)]
    pub covariate: Option<PathBuf>,
    /// Column of the fits table holding f [fits_column].
    #[arg(long)]
    pub fits_column: Option<String>,
    /// Column of the covariate table (default: second) [covariate_column].
    #[arg(long)]
    pub covariate_column: Option<String>,
    /// Covariate value separating the early and late stage [split].
    #[arg(long)]
    pub split: Option<f64>,
    /// Output CSV (default: OUT_DIR/correlation.csv) [out].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Seg,
    Lsq,
    Net,
}

impl std::str::FromStr for FitMethod {
    type Err = IvimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" | "segmented" => Ok(FitMethod::Seg),
            "lsq" => Ok(FitMethod::Lsq),
            "net" => Ok(FitMethod::Net),
            other => Err(IvimError::Config(format!("unknown fit method '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulateRun {
    pub count: usize,
    #[serde(with = "snr_serde")]
    pub snr: f64,
    pub factor: usize,
    pub b_values: Option<Vec<f64>>,
    pub seed: u64,
    pub s0: f64,
    pub ranges: ParamRanges,
    pub out: Option<PathBuf>,
}

impl Default for SimulateRun {
    fn default() -> Self {
        SimulateRun {
            count: 1000,
            snr: 10.0,
            factor: 1,
            b_values: None,
            seed: 0,
            s0: 1.0,
            ranges: ParamRanges::default(),
            out: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRun {
    pub data: Option<PathBuf>,
    pub training: TrainingConfig,
    pub hidden_layers: Option<usize>,
    pub hidden_width: Option<usize>,
    pub out: Option<PathBuf>,
    pub history: Option<PathBuf>,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            data: None,
            training: TrainingConfig::new(TrainingMode::SuperDc, 0),
            hidden_layers: None,
            hidden_width: None,
            out: None,
            history: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitRun {
    pub data: Option<PathBuf>,
    pub method: FitMethod,
    pub weights: Option<PathBuf>,
    pub b_threshold: f64,
    pub bounds: FitBounds,
    pub out: Option<PathBuf>,
}

impl Default for FitRun {
    fn default() -> Self {
        FitRun {
            data: None,
            method: FitMethod::Lsq,
            weights: None,
            b_threshold: DEFAULT_B_THRESHOLD,
            bounds: FitBounds::default(),
            out: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SweepRun {
    #[serde(flatten)]
    pub sweep: SweepConfig,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridRun {
    pub axis: LossAxis,
    pub grid: Vec<f64>,
    pub data: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub factor: usize,
    pub train_count: usize,
    pub test_count: usize,
    #[serde(with = "snr_serde")]
    pub snr: f64,
    pub seed: u64,
    pub ranges: ParamRanges,
    pub training: TrainingConfig,
    pub hidden_layers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Default for GridRun {
    fn default() -> Self {
        GridRun {
            axis: LossAxis::AlphaDc,
            grid: vec![0.0, 0.1, 0.3, 1.0, 3.0, 10.0],
            data: None,
            eval: None,
            factor: 1,
            train_count: 10_000,
            test_count: 1000,
            snr: 10.0,
            seed: 0,
            ranges: ParamRanges::default(),
            training: TrainingConfig::new(TrainingMode::SuperDc, 0),
            hidden_layers: None,
            out: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrelateRun {
    pub fits: Option<PathBuf>,
    pub covariate: Option<PathBuf>,
    pub fits_column: String,
    pub covariate_column: Option<String>,
    pub split: f64,
    pub out: Option<PathBuf>,
}

impl Default for CorrelateRun {
    fn default() -> Self {
        CorrelateRun {
            fits: None,
            covariate: None,
            fits_column: "f".into(),
            covariate_column: None,
            split: DEFAULT_STAGE_SPLIT,
            out: None,
        }
    }
}

/// Flag overrides as `(dotted key, value)` pairs; unset flags are skipped.
#[derive(Default)]
struct Overrides(Vec<(&'static str, Value)>);

impl Overrides {
    fn add<T: Serialize + 'static>(&mut self, key: &'static str, value: &Option<T>) {
        if let Some(v) = value {
            self.0.push((key, config::to_value(v)));
        }
    }
}

#[derive(Serialize)]
struct Provenance<'a, T: Serialize> {
    program: &'static str,
    version: &'static str,
    command: &'static str,
    args: &'a [String],
    settings: &'a T,
    outputs: Vec<String>,
    details: Value,
}

struct Context {
    out_dir: PathBuf,
    config: Option<Value>,
    set: Vec<String>,
    args: Vec<String>,
}

impl Context {
    fn settings<T: Serialize + serde::de::DeserializeOwned + Default>(&self, flags: Overrides) -> Result<T> {
        resolve(T::default(), self.config.as_ref(), &flags.0, &self.set)
    }

    fn output(&self, explicit: &Option<PathBuf>, default_name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out_dir.join(default_name))
    }

    fn provenance<T: Serialize>(
        &self,
        command: &'static str,
        primary: &Path,
        settings: &T,
        outputs: &[&Path],
        details: Value,
    ) -> Result<()> {
        let p = Provenance {
            program: "ivim",
            version: env!("CARGO_PKG_VERSION"),
            command,
            args: &self.args,
            settings,
            outputs: outputs.iter().map(|o| o.display().to_string()).collect(),
            details,
        };
        io::write_json(provenance_path(primary), &p)
    }
}

/// Provenance sidecar of an output file: `x.csv` -> `x.provenance.json`.
pub fn provenance_path(primary: &Path) -> PathBuf {
    primary.with_extension("provenance.json")
}

fn required(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| IvimError::Config(format!("missing required setting '{key}'")))
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_from<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&args).map_err(|e| IvimError::Config(e.to_string()))?;
    let rest = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    run(cli, rest)
}

/// Runs a parsed command line; `args` is recorded in the provenance file.
pub fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(IvimError::Config("--threads must be >= 1".into()));
        }
        // A second initialization in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let config = match &cli.config {
        Some(p) => Some(config::read_config(p)?),
        None => None,
    };
    let ctx = Context {
        out_dir: cli.out_dir,
        config,
        set: cli.set,
        args,
    };
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Fit(a) => cmd_fit(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Gridsearch(a) => cmd_gridsearch(&ctx, a),
        Command::Correlate(a) => cmd_correlate(&ctx, a),
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn sim_schedule(factor: usize, b_values: &Option<Vec<f64>>) -> Result<BValueSchedule> {
    match b_values {
        Some(b) => BValueSchedule::new(b.clone()),
        None => protocol_schedule(factor),
    }
}

fn cmd_simulate(ctx: &Context, a: SimulateArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.add("count", &a.count);
    o.add("snr", &a.snr);
    o.add("factor", &a.factor);
    o.add("b_values", &a.b_values);
    o.add("seed", &a.seed);
    o.add("s0", &a.s0);
    o.add("out", &a.out);
    let mut run: SimulateRun = ctx.settings(o)?;
    let out = ctx.output(&run.out, "dataset.csv");
    run.out = Some(out.clone());

    let sim = SimDatasetConfig {
        ranges: run.ranges,
        s0: run.s0,
        ..SimDatasetConfig::new(run.count, sim_schedule(run.factor, &run.b_values)?, run.snr, run.seed)
    };
    sim.validate().map_err(to_config)?;
    let dataset = generate_dataset(&sim)?;
    io::write_dataset(&out, &dataset)?;
    ctx.provenance("simulate", &out, &run, &[&out], json!({ "dataset": sim }))?;
    println!(
        "count={} schedule={} snr={}",
        dataset.len(),
        join(dataset.schedule.values()),
        run.snr
    );
    Ok(())
}

fn to_config(e: IvimError) -> IvimError {
    match e {
        IvimError::InvalidArgument(m) => IvimError::Config(m),
        other => other,
    }
}

fn cmd_train(ctx: &Context, a: TrainArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.add("data", &a.data);
    o.add("training.mode", &a.mode);
    o.add("training.seed", &a.seed);
    o.add("training.learning_rate", &a.learning_rate);
    o.add("training.batch_size", &a.batch_size);
    o.add("training.validation_fraction", &a.validation_fraction);
    o.add("training.patience_epochs", &a.patience_epochs);
    o.add("training.max_epochs", &a.max_epochs);
    o.add("training.loss_weights.alpha_d", &a.alpha_d);
    o.add("training.loss_weights.alpha_f", &a.alpha_f);
    o.add("training.loss_weights.alpha_d_star", &a.alpha_dstar);
    o.add("training.loss_weights.alpha_dc", &a.alpha_dc);
    o.add("hidden_layers", &a.hidden_layers);
    o.add("hidden_width", &a.hidden_width);
    o.add("out", &a.out);
    o.add("history", &a.history);
    let mut run: TrainRun = ctx.settings(o)?;
    run.training.validate().map_err(to_config)?;
    let data = required(&run.data, "data")?;
    let out = ctx.output(&run.out, "weights.bin");
    let history_path = run.history.clone().unwrap_or_else(|| {
        let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.with_file_name(format!("{stem}_history.csv"))
    });
    run.out = Some(out.clone());
    run.history = Some(history_path.clone());

    let dataset = io::read_curves(&data)?;
    if run.training.mode.needs_labels() && dataset.labels.is_none() {
        return Err(IvimError::MissingLabels(format!(
            "{} has no D,f,Dstar columns; mode {} needs them",
            data.display(),
            run.training.mode
        )));
    }
    let mut net = NetworkConfig::for_input(dataset.schedule.len());
    if let Some(l) = run.hidden_layers {
        net.hidden_layers = l;
    }
    if let Some(w) = run.hidden_width {
        net.hidden_width = w;
    }
    net.validate().map_err(to_config)?;

    let (weights, history) = match train(&dataset, &net, &run.training) {
        Ok(r) => r,
        Err(IvimError::Diverged { epoch, history }) => {
            io::write_history(&history_path, &history)?;
            return Err(IvimError::Diverged { epoch, history });
        }
        Err(e) => return Err(e),
    };
    save_weights(&weights, &out)?;
    io::write_history(&history_path, &history)?;
    ctx.provenance(
        "train",
        &out,
        &run,
        &[&out, &history_path],
        json!({
            "schedule": dataset.schedule.values(),
            "network": net,
            "epochs": history.epochs(),
            "best_epoch": history.best_epoch,
            "best_val_loss": history.best_val_loss(),
            "stopped_early": history.stopped_early,
        }),
    )?;
    println!(
        "epochs={} best_epoch={} best_val_loss={}",
        history.epochs(),
        history.best_epoch,
        history.best_val_loss()
    );
    Ok(())
}

fn fit_with_network(weights: &NetworkWeights, curve: &SignalCurve) -> Result<FitResult> {
    let normalized = normalize_curve(curve)?;
    let pred = predict(weights, &normalized)?;
    let s0 = curve.samples()[0] * pred.s0.unwrap_or(1.0);
    let model = ivim_curve(&pred.params, s0, curve.schedule())?;
    let residual_norm = model
        .samples()
        .iter()
        .zip(curve.samples())
        .map(|(m, s)| (m - s).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(FitResult {
        params: pred.params,
        s0_hat: s0,
        residual_norm,
        converged: true,
        iterations: 0,
    })
}

fn cmd_fit(ctx: &Context, a: FitArgs) -> Result<()> {
    use rayon::prelude::*;

    let mut o = Overrides::default();
    o.add("data", &a.data);
    o.add("method", &a.method);
    o.add("weights", &a.weights);
    o.add("b_threshold", &a.b_threshold);
    o.add("out", &a.out);
    let mut run: FitRun = ctx.settings(o)?;
    run.bounds.validate().map_err(to_config)?;
    let data = required(&run.data, "data")?;
    let out = ctx.output(&run.out, "fits.csv");
    run.out = Some(out.clone());

    let dataset = io::read_curves(&data)?;
    let weights = match run.method {
        FitMethod::Net => {
            let path = required(&run.weights, "weights")?;
            let w = load_weights(&path)?;
            if w.config().input_size != dataset.schedule.len() {
                return Err(IvimError::Shape(format!(
                    "network expects {} b-values, {} has {}",
                    w.config().input_size,
                    data.display(),
                    dataset.schedule.len()
                )));
            }
            Some(w)
        }
        _ => None,
    };
    let rows: Vec<Result<FitResult>> = dataset
        .curves
        .par_iter()
        .map(|c| match (run.method, &weights) {
            (FitMethod::Seg, _) => fit_segmented(c, run.b_threshold, &run.bounds),
            (FitMethod::Lsq, _) => fit_lsq(c, &run.bounds),
            (FitMethod::Net, Some(w)) => fit_with_network(w, c),
            (FitMethod::Net, None) => unreachable!(),
        })
        .collect();
    io::write_fit_results(&out, &rows)?;
    let failed = rows.iter().filter(|r| r.is_err()).count();
    ctx.provenance(
        "fit",
        &out,
        &run,
        &[&out],
        json!({ "rows": rows.len(), "failed": failed }),
    )?;
    println!("rows={} failed={}", rows.len(), failed);
    match rows.into_iter().find_map(|r| r.err()) {
        Some(e) if failed == dataset.len() => Err(e),
        _ => Ok(()),
    }
}

fn cmd_sweep(ctx: &Context, a: SweepArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.add("factors", &a.factors);
    o.add("methods", &a.methods);
    o.add("train_count", &a.train_count);
    o.add("test_count", &a.test_count);
    o.add("snr", &a.snr);
    o.add("seed", &a.seed);
    o.add("training.learning_rate", &a.learning_rate);
    o.add("training.max_epochs", &a.max_epochs);
    o.add("training.loss_weights.alpha_dc", &a.alpha_dc);
    o.add("hidden_layers", &a.hidden_layers);
    o.add("out", &a.out);
    let mut run: SweepRun = ctx.settings(o)?;
    run.sweep.validate().map_err(to_config)?;
    let out = ctx.output(&run.out, "sweep.csv");
    run.out = Some(out.clone());

    let result = sampling_factor_sweep(&run.sweep)?;
    io::write_sweep_table(&out, &result)?;
    let failed: Vec<Value> = result
        .cells
        .iter()
        .filter_map(|c| {
            c.error.as_ref().map(|e| {
                json!({ "method": c.method, "factor": c.factor, "parameter": c.parameter.to_string(), "error": e })
            })
        })
        .collect();
    ctx.provenance(
        "sweep",
        &out,
        &run,
        &[&out],
        json!({ "provenance": result.provenance, "failed_cells": failed }),
    )?;
    for c in &result.cells {
        match c.nrmse {
            Some(v) => println!("{} k={} {} nrmse={}", c.method, c.factor, c.parameter, io::fmt_f64(v)),
            None => println!("{} k={} {} failed", c.method, c.factor, c.parameter),
        }
    }
    Ok(())
}

fn cmd_gridsearch(ctx: &Context, a: GridArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.add("axis", &a.axis);
    o.add("grid", &a.grid);
    o.add("data", &a.data);
    o.add("eval", &a.eval);
    o.add("factor", &a.factor);
    o.add("train_count", &a.train_count);
    o.add("test_count", &a.test_count);
    o.add("snr", &a.snr);
    o.add("seed", &a.seed);
    o.add("training.mode", &a.mode);
    o.add("training.max_epochs", &a.max_epochs);
    o.add("training.learning_rate", &a.learning_rate);
    o.add("out", &a.out);
    let mut run: GridRun = ctx.settings(o)?;
    run.training.validate().map_err(to_config)?;
    if run.grid.is_empty() {
        return Err(IvimError::Config("grid must hold at least one value".into()));
    }
    let out = ctx.output(&run.out, "gridsearch.csv");
    run.out = Some(out.clone());

    let schedule = protocol_schedule(run.factor)?;
    let simulated = |count: usize, stream: u64| {
        let seed = crate::rng::derive_seed(run.seed, &[stream]);
        let cfg = SimDatasetConfig {
            ranges: run.ranges,
            ..SimDatasetConfig::new(count, schedule.clone(), run.snr, seed)
        };
        cfg.validate().map_err(to_config)?;
        generate_dataset(&cfg)
    };
    let train_set = match &run.data {
        Some(p) => io::read_curves(p)?,
        None => simulated(run.train_count, 0)?,
    };
    let eval_set = match &run.eval {
        Some(p) => io::read_curves(p)?,
        None => simulated(run.test_count, 1)?,
    };
    if !train_set.schedule.values().eq(eval_set.schedule.values()) {
        return Err(IvimError::ScheduleMismatch(
            "training and evaluation data use different schedules".into(),
        ));
    }
    let mut net = NetworkConfig::for_input(train_set.schedule.len());
    if let Some(l) = run.hidden_layers {
        net.hidden_layers = l;
    }
    let result = grid_search(&run.training, &net, run.axis, &run.grid, &train_set, &eval_set)?;

    io::write_grid_table(&out, &result)?;
    ctx.provenance(
        "gridsearch",
        &out,
        &run,
        &[&out],
        json!({ "network": net, "best": result.best }),
    )?;
    println!("best {}={}", result.axis, result.best);
    Ok(())
}

fn cmd_correlate(ctx: &Context, a: CorrelateArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.add("fits", &a.fits);
    o.add("covariate", &a.covariate);
    o.add("fits_column", &a.fits_column);
    o.add("covariate_column", &a.covariate_column);
    o.add("split", &a.split);
    o.add("out", &a.out);
    let mut run: CorrelateRun = ctx.settings(o)?;
    let fits_path = required(&run.fits, "fits")?;
    let cov_path = required(&run.covariate, "covariate")?;
    let out = ctx.output(&run.out, "correlation.csv");
    run.out = Some(out.clone());

    let fits = io::read_id_table(&fits_path, Some(&run.fits_column))?;
    let cov = io::read_id_table(&cov_path, run.covariate_column.as_deref())?;
    let stages = correlate_fraction_with_covariate(&fits, &cov, run.split)?;
    io::write_correlation_table(&out, &stages)?;
    ctx.provenance("correlate", &out, &run, &[&out], json!({ "stages": stages }))?;
    for s in &stages {
        match s.r {
            Some(r) => println!("{} n={} r={r}", s.stage, s.n),
            None => println!("{} n={} r=undefined", s.stage, s.n),
        }
    }
    Ok(())
}
