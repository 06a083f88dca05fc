use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use mkoop::dynamics::ManipulatorModel;
use mkoop::harness::{
    report, run_prediction_benchmark, tracking, DisturbanceChoice, PathKind, PathSpec, PredictionBenchmarkConfig,
    PredictionReport, TrackingConfig, TrackingReport,
};
use mkoop::koopman::{KoopmanModel, Variant};
use mkoop::training::{generate_dataset, train, GenerationConfig, TrainConfig, TrajectoryDataset};

/// Momentum-coordinate Koopman models and MPC for serial manipulators.
#[derive(Parser)]
#[command(name = "mkoop", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long, global = true, env = "MKOOP_OUT_DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "MKOOP_JOBS")]
    jobs: Option<usize>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a trajectory dataset.
    GenData {
        /// JSON: {"manipulator": name or model, "generation": {...}}.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on a dataset directory.
    ///
    /// With `--out model.json` the model is written to that file; otherwise
    /// `model_<variant>.json` goes into the output directory.
    Train {
        #[arg(long, alias = "data")]
        dataset: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        /// Training hyperparameters (JSON); defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the prediction benchmark.
    EvalPred {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Closed-loop tracking of a task-space path with a trained model.
    Track {
        #[arg(long)]
        model: PathBuf,
        /// Preset name or JSON model file.
        #[arg(long, default_value = "three_link_arm")]
        manipulator: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the path kind (hypotrochoid, petal, helix).
        #[arg(long)]
        path: Option<PathKind>,
        /// Overrides the disturbance preset (d0 to d3).
        #[arg(long)]
        disturbance: Option<String>,
        /// Runs without the observer.
        #[arg(long)]
        no_geso: bool,
    },
    /// Print the tables stored in a results directory and refresh its plot scripts.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    serde_json::from_value(Value::String(s.to_ascii_lowercase())).map_err(|_| format!("unknown variant `{s}`"))
}

/// Errors from bad arguments or configuration files exit with 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| {
                c.is::<UsageError>()
                    || matches!(
                        c.downcast_ref::<mkoop::Error>(),
                        Some(mkoop::Error::InvalidConfig { .. } | mkoop::Error::InvalidModel(_) | mkoop::Error::Json(_))
                    )
            });
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.common.jobs {
        if jobs == 0 {
            bail!(UsageError("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    match &cli.command {
        Command::GenData { config } => gen_data(&cli.common, config.as_deref()),
        Command::Train {
            dataset,
            variant,
            config,
        } => train_model(&cli.common, dataset, *variant, config.as_deref()),
        Command::EvalPred { config } => eval_pred(&cli.common, config.as_deref()),
        Command::Track {
            model,
            manipulator,
            config,
            path,
            disturbance,
            no_geso,
        } => {
            let mut cfg: TrackingConfig = read_config(config.as_deref())?;
            if let Some(kind) = path.filter(|k| *k != cfg.path.kind) {
                let duration = cfg.path.duration;
                cfg.path = PathSpec::preset(kind);
                cfg.path.duration = duration;
            }
            if let Some(d) = disturbance {
                cfg.disturbance = DisturbanceChoice::Preset(d.clone());
            }
            if *no_geso {
                cfg.geso = None;
            }
            track(&cli.common, model, manipulator, cfg)
        }
        Command::Report { input } => print_report(input),
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| UsageError(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| UsageError(format!("parsing {}: {e}", path.display())).into())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ManipulatorChoice {
    Preset(String),
    Model(ManipulatorModel),
}

impl ManipulatorChoice {
    fn resolve(&self) -> Result<ManipulatorModel> {
        Ok(match self {
            ManipulatorChoice::Preset(name) => ManipulatorModel::preset(name)?,
            ManipulatorChoice::Model(m) => {
                m.validate()?;
                m.clone()
            }
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct GenDataConfig {
    manipulator: ManipulatorChoice,
    generation: GenerationConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            manipulator: ManipulatorChoice::Preset("three_link_arm".into()),
            generation: GenerationConfig::default(),
        }
    }
}

/// Resolves a `--manipulator` argument: a preset name or a JSON file.
fn load_manipulator(arg: &str) -> Result<ManipulatorModel> {
    let path = Path::new(arg);
    if path.exists() {
        let text = fs::read_to_string(path)?;
        return Ok(ManipulatorModel::from_json(&text)?);
    }
    Ok(ManipulatorModel::preset(arg)?)
}

/// Writes the manifest file `path` with the resolved configuration and its hash.
fn write_manifest(path: &Path, command: &str, config: &impl Serialize, extra: Value) -> Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "config_hash": report::sha256_json(config)?,
        "details": extra,
    });
    fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(common: &Common, config: Option<&Path>) -> Result<()> {
    let mut cfg: GenDataConfig = read_config(config)?;
    if let Some(seed) = common.seed {
        cfg.generation.seed = seed;
    }
    let manip = cfg.manipulator.resolve()?;
    cfg.generation.validate()?;
    create_dir(&common.out)?;
    let ds = generate_dataset(&manip, &cfg.generation)?;
    let dir = common.out.join("dataset");
    ds.save(&dir)?;
    fs::write(common.out.join("manipulator.json"), serde_json::to_string_pretty(&manip)? + "\n")?;
    write_manifest(
        &common.out.join("manifest.json"),
        "gen-data",
        &cfg,
        json!({ "resampled": ds.resampled, "trajectories": ds.p(), "snapshots": ds.w() }),
    )?;
    info!("wrote {} trajectories to {}", ds.p(), dir.display());
    Ok(())
}

fn train_model(common: &Common, data: &Path, variant: Variant, config: Option<&Path>) -> Result<()> {
    let mut cfg: TrainConfig = read_config(config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let mut ds = TrajectoryDataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    if ds.convention != variant.convention() {
        let manip_path = data.parent().map(|p| p.join("manipulator.json"));
        let Some(manip_path) = manip_path.filter(|p| p.exists()) else {
            bail!(UsageError(format!(
                "{variant} needs {:?} states and no manipulator.json was found next to the dataset",
                variant.convention()
            )));
        };
        let manip = ManipulatorModel::from_json(&fs::read_to_string(manip_path)?)?;
        ds = ds.to_convention(variant.convention(), &manip)?;
    }
    cfg.validate()?;
    let model = train(&ds, &cfg, variant)?;
    let (dir, path, manifest_name) = if common.out.extension().is_some_and(|e| e == "json") {
        let dir = common.out.parent().unwrap_or(Path::new("")).to_path_buf();
        let stem = common.out.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        (dir, common.out.clone(), format!("{stem}.manifest.json"))
    } else {
        let path = common.out.join(format!("model_{variant}.json"));
        (common.out.clone(), path, "manifest.json".to_string())
    };
    if !dir.as_os_str().is_empty() {
        create_dir(&dir)?;
    }
    model.save(&path)?;
    let record = model.training.as_ref();
    write_manifest(
        &dir.join(manifest_name),
        "train",
        &cfg,
        json!({
            "variant": variant,
            "dataset": data,
            "learnable_params": model.count_learnable_params(),
            "stored_params": model.count_stored_params(),
            "best_epoch": record.map(|r| r.best_epoch),
            "model_hash": report::sha256_json(&model)?,
        }),
    )?;
    info!("wrote {}", path.display());
    Ok(())
}

fn eval_pred(common: &Common, config: Option<&Path>) -> Result<()> {
    let mut cfg: PredictionBenchmarkConfig = read_config(config)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    create_dir(&common.out)?;
    let report = run_prediction_benchmark(&cfg)?;
    report::write_prediction_report(&common.out, &report)?;
    write_manifest(&common.out.join("manifest.json"), "eval-pred", &cfg, json!({ "models": report.rows.len() }))?;
    print_prediction(&report);
    Ok(())
}

fn track(common: &Common, model_path: &Path, manipulator: &str, cfg: TrackingConfig) -> Result<()> {
    let manip = load_manipulator(manipulator)?;
    let model = KoopmanModel::load(model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    create_dir(&common.out)?;
    let run = tracking::run_tracking(&manip, &model, &cfg)?;
    tracking::write_control_log(&common.out.join("control.csv"), &run.log)?;
    tracking::write_observer_log(&common.out.join("observer.csv"), &run.log)?;
    tracking::write_path_log(&common.out.join(format!("path_{}.csv", cfg.path.kind)), &run.log)?;
    let row = tracking::TrackingRow {
        label: model_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        variant: model.variant,
        path: cfg.path.kind,
        disturbance: cfg.disturbance.label(),
        geso: cfg.geso.is_some(),
        summary: run.summary,
        config_hash: report::sha256_json(&cfg)?,
        model_hash: report::sha256_json(&model)?,
        seed: model.training.as_ref().map(|t| t.seed),
    };
    let report = TrackingReport { rows: vec![row] };
    report::write_tracking_report(&common.out, &report)?;
    write_manifest(
        &common.out.join("manifest.json"),
        "track",
        &cfg,
        json!({ "model": model_path, "manipulator": manip }),
    )?;
    print_tracking(&report);
    Ok(())
}

fn print_report(input: &Path) -> Result<()> {
    let mut found = false;
    let pred = input.join("prediction.json");
    if pred.exists() {
        let report: PredictionReport = serde_json::from_str(&fs::read_to_string(&pred)?)?;
        report::write_prediction_report(input, &report)?;
        print_prediction(&report);
        found = true;
    }
    let trk = input.join("tracking.json");
    if trk.exists() {
        let report: TrackingReport = serde_json::from_str(&fs::read_to_string(&trk)?)?;
        report::write_tracking_report(input, &report)?;
        print_tracking(&report);
        found = true;
    }
    if !found {
        bail!(UsageError(format!(
            "{} contains neither prediction.json nor tracking.json",
            input.display()
        )));
    }
    Ok(())
}

fn print_prediction(report: &PredictionReport) {
    println!(
        "{:>5} {:>6} {:>9} {:>12} {:>12}",
        "chain", "traj", "variant", "median_err", "native_err"
    );
    for m in &report.medians {
        println!(
            "{:>4}R {:>6} {:>9} {:>12.4} {:>12.4}",
            m.chain,
            m.trajectories,
            m.variant.to_string(),
            m.median_error,
            m.median_native_error
        );
    }
}

fn print_tracking(report: &TrackingReport) {
    println!(
        "{:>14} {:>5} {:>5} {:>12} {:>12} {:>7}",
        "path", "dist", "geso", "rmse_task_m", "max_err_m", "faults"
    );
    for r in &report.rows {
        println!(
            "{:>14} {:>5} {:>5} {:>12.5} {:>12.5} {:>7}",
            r.path.to_string(),
            r.disturbance,
            r.geso,
            r.summary.rmse_task,
            r.summary.max_task_error,
            r.summary.solver_faults
        );
    }
}
