use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use themes::metrics::{EvalReport, RunMetrics};
use themes::persist;
use themes::synthgen::{self, GeneratorConfig, GroundTruth};
use themes::themes::{self as pipeline, Ablation, ThemesConfig, ThemesModel, CONFIG_KEYS};
use themes::trajdata::{self, DataFormat, Dataset};
use themes::Error;

const DATA_FILE: &str = "data.jsonl";
const TRUTH_FILE: &str = "ground_truth.json";
const TRAIN_FILE: &str = "train.jsonl";
const TEST_FILE: &str = "test.jsonl";
const CONFIG_FILE: &str = "config.txt";
const MANIFEST_FILE: &str = "manifest.json";
const METRICS_FILE: &str = "run_metrics.json";
const LOCK_FILE: &str = ".themes.lock";

#[derive(Parser, Debug)]
#[command(name = "themes", version, about = "Time-aware hierarchical sub-trajectory apprenticeship learning")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic dataset with ground truth.
    #[command(alias = "synthgen")]
    Generate(GenerateArgs),
    /// Fit the full model on a dataset.
    Fit(FitArgs),
    /// Fit one of the pipeline variants.
    Ablate(AblateArgs),
    /// Predict per-timestep action probabilities.
    Predict(PredictArgs),
    /// Score a fitted run on its held-out split.
    Evaluate(EvaluateArgs),
    /// Aggregate metrics of several runs.
    Report(ReportArgs),
    /// Print the configuration.
    Config(ConfigArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value = "default")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of trajectories held out for evaluation.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Seed of the train/test split; defaults to the model seed.
    #[arg(long)]
    split_seed: Option<u64>,
    /// Ground truth to copy into the run for segmentation metrics.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// EDM, EM-EDM, MT-TICC&EDM, THEMES_0 or THEMES.
    #[arg(long)]
    name: String,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Run directory written by fit or ablate, or its model file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Run directory written by fit or ablate, or its model file.
    #[arg(long)]
    model: PathBuf,
    /// Test data; defaults to the run's held-out split.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Ground truth; defaults to the copy inside the run, if any.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Directory for metrics.csv, metrics.json and metrics.svg.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Print built-in defaults (plus any overrides).
    #[arg(long, conflicts_with = "file")]
    defaults: bool,
    /// Print this file after applying defaults.
    #[arg(long)]
    file: Option<PathBuf>,
}

#[derive(Serialize, Deserialize, Debug)]
struct OutputFile {
    file: String,
    sha256: String,
}

#[derive(Serialize, Deserialize, Debug)]
struct RunManifest {
    schema_version: u32,
    command: String,
    method: String,
    config: String,
    dataset: PathBuf,
    dataset_sha256: String,
    versions: Vec<(String, String)>,
    seed: u64,
    split_seed: u64,
    started_unix: u64,
    updated_unix: u64,
    stages: Vec<(String, u64)>,
    outputs: Vec<OutputFile>,
}

type CliResult<T> = std::result::Result<T, Error>;

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

/// Long flag for a configuration key.
fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn with_config_flags(cmd: Command) -> Command {
    CONFIG_KEYS.iter().fold(cmd, |c, (key, doc)| {
        c.arg(
            Arg::new(*key)
                .long(flag_name(key))
                .value_name("VALUE")
                .allow_hyphen_values(true)
                .help(format!("Override '{key}': {doc}"))
                .help_heading("Configuration overrides"),
        )
    })
}

fn build_command() -> Command {
    use clap::CommandFactory;
    Cli::command()
        .mut_subcommand("fit", with_config_flags)
        .mut_subcommand("ablate", with_config_flags)
        .mut_subcommand("config", with_config_flags)
}

fn load_config(file: Option<&Path>, overrides: &ArgMatches) -> CliResult<ThemesConfig> {
    let mut config = match file {
        Some(p) => ThemesConfig::load(p)?,
        None => ThemesConfig::default(),
    };
    for (key, _) in CONFIG_KEYS {
        if let Some(v) = overrides.get_one::<String>(key) {
            config.set(key, v)?;
        }
    }
    config.validate()?;
    Ok(config)
}

fn load_data(path: &Path) -> CliResult<Dataset<f64>> {
    if !path.is_file() {
        return Err(Error::Validation(format!("dataset '{}' does not exist", path.display())));
    }
    trajdata::load_dataset(path, DataFormat::from_path(path))
}

fn generate(args: &GenerateArgs) -> CliResult<()> {
    let mut cfg = GeneratorConfig::preset(&args.preset)?;
    cfg.seed = args.seed;
    if let Some(n) = args.trajectories {
        cfg.trajectories = n;
    }
    let (data, truth) = synthgen::generate(&cfg)?;
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    trajdata::save_jsonl(&data, &args.out.join(DATA_FILE))?;
    persist::save_json(&args.out.join(TRUTH_FILE), &truth)?;
    eprintln!("wrote {} trajectories to {}", data.len(), args.out.display());
    Ok(())
}

/// Exclusive lock on a run directory, released on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(LOCK_FILE);
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Consistency(format!("{} is locked by another run (remove {} if stale)", dir.display(), path.display()))
                } else {
                    io_err(&path, e)
                }
            })?;
        Ok(RunLock(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn save_manifest(dir: &Path, manifest: &mut RunManifest, stage: &str) -> CliResult<()> {
    let now = now_unix();
    manifest.updated_unix = now;
    manifest.stages.push((stage.to_string(), now));
    let mut outputs = Vec::new();
    for file in [CONFIG_FILE, TRAIN_FILE, TEST_FILE, TRUTH_FILE, pipeline::MODEL_FILE] {
        let p = dir.join(file);
        if p.is_file() {
            outputs.push(OutputFile { file: file.into(), sha256: sha256_file(&p)? });
        }
    }
    manifest.outputs = outputs;
    persist::save_json(&dir.join(MANIFEST_FILE), manifest)
}

fn fit_run(method: Ablation, args: &FitArgs, overrides: &ArgMatches) -> CliResult<()> {
    let config = load_config(args.config.as_deref(), overrides)?;
    let data = load_data(&args.data)?;
    let truth = args.truth.as_deref().map(GroundTruth::load).transpose()?;
    let split_seed = args.split_seed.unwrap_or(config.seed);
    let (train, test) = trajdata::split_dataset(&data, args.test_fraction, split_seed)?;
    let dir = &args.out;
    let _lock = RunLock::acquire(dir)?;
    let mut manifest = RunManifest {
        schema_version: persist::SCHEMA_VERSION,
        command: std::env::args().collect::<Vec<_>>().join(" "),
        method: method.name().into(),
        config: config.to_text(),
        dataset: args.data.clone(),
        dataset_sha256: sha256_file(&args.data)?,
        versions: vec![
            ("themes-cli".into(), env!("CARGO_PKG_VERSION").into()),
            ("themes-core".into(), themes::VERSION.into()),
        ],
        seed: config.seed,
        split_seed,
        started_unix: now_unix(),
        updated_unix: 0,
        stages: Vec::new(),
        outputs: Vec::new(),
    };
    persist::write_atomic(&dir.join(CONFIG_FILE), config.to_text().as_bytes())?;
    trajdata::save_jsonl(&train, &dir.join(TRAIN_FILE))?;
    trajdata::save_jsonl(&test, &dir.join(TEST_FILE))?;
    if let Some(t) = &truth {
        persist::save_json(&dir.join(TRUTH_FILE), t)?;
    }
    let _ = fs::remove_file(dir.join(METRICS_FILE));
    save_manifest(dir, &mut manifest, "prepared")?;
    log::info!("fitting {method} on {} trajectories ({} held out)", train.len(), test.len());
    let model = pipeline::run_ablation(method, &train, &config)?;
    model.save(dir)?;
    save_manifest(dir, &mut manifest, "fitted")?;
    eprintln!("{method}: K = {}, G = {}, {} outer iterations; model in {}", model.k, model.g, model.diagnostics.len(), dir.display());
    Ok(())
}

fn predict(args: &PredictArgs) -> CliResult<()> {
    let model = ThemesModel::<f64>::load(run_dir(&args.model))?;
    let data = load_data(&args.data)?;
    let probs = pipeline::predict_actions(&model, &data)?;
    let mut out = String::new();
    for (tr, p) in data.trajectories.iter().zip(&probs) {
        for (t, row) in p.iter().enumerate() {
            let line = serde_json::json!({
                "trajectory_id": tr.id,
                "t": t,
                "timestamp": tr.timestamps[t],
                "probabilities": row,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
    }
    persist::write_atomic(&args.out, out.as_bytes())?;
    eprintln!("wrote predictions for {} trajectories to {}", data.len(), args.out.display());
    Ok(())
}

/// Accepts either a run directory or the model file inside it.
fn run_dir(path: &Path) -> &Path {
    match path.file_name() {
        Some(name) if name == pipeline::MODEL_FILE && path.is_file() => path.parent().unwrap_or(Path::new(".")),
        _ => path,
    }
}

fn evaluate_dir(dir: &Path, data: Option<&Path>, truth: Option<&Path>) -> CliResult<RunMetrics> {
    let model = ThemesModel::<f64>::load(dir)?;
    let test_path = data.map_or_else(|| dir.join(TEST_FILE), Path::to_path_buf);
    let test = load_data(&test_path)?;
    let truth_path = truth.map(Path::to_path_buf).or_else(|| Some(dir.join(TRUTH_FILE)).filter(|p| p.is_file()));
    let regimes = match truth_path {
        Some(p) => Some(GroundTruth::load(&p)?.regimes_for(&test)?),
        None => None,
    };
    pipeline::evaluate(&model, &test, regimes.as_deref())
}

fn evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let dir = run_dir(&args.model);
    let run = evaluate_dir(dir, args.data.as_deref(), args.truth.as_deref())?;
    persist::save_json(&dir.join(METRICS_FILE), &run)?;
    println!("{}", serde_json::to_string_pretty(&run).map_err(|e| Error::Json { path: METRICS_FILE.into(), source: e })?);
    Ok(())
}

fn report(args: &ReportArgs) -> CliResult<()> {
    let mut runs = Vec::with_capacity(args.runs.len());
    for dir in &args.runs {
        let stored = dir.join(METRICS_FILE);
        runs.push(if stored.is_file() { persist::load_json(&stored)? } else { evaluate_dir(dir, None, None)? });
    }
    let report = EvalReport::from_runs(runs);
    report.write_csv(std::io::stdout().lock())?;
    if let Some(out) = &args.out {
        report.save(out)?;
        eprintln!("wrote report to {}", out.display());
    }
    Ok(())
}

fn config_cmd(args: &ConfigArgs, overrides: &ArgMatches) -> CliResult<()> {
    // With neither --file nor overrides this is just the defaults.
    let config = load_config(args.file.as_deref(), overrides)?;
    print!("{}", config.to_text());
    Ok(())
}

fn run(cli: &Cli, sub: &ArgMatches) -> CliResult<()> {
    match &cli.command {
        Cmd::Generate(a) => generate(a),
        Cmd::Fit(a) => fit_run(Ablation::Themes, a, sub),
        Cmd::Ablate(a) => fit_run(a.name.parse()?, &a.fit, sub),
        Cmd::Predict(a) => predict(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Report(a) => report(a),
        Cmd::Config(a) => config_cmd(a, sub),
    }
}

fn main() -> ExitCode {
    let matches = match build_command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let sub = matches.subcommand().map(|(_, m)| m.clone()).unwrap_or_default();
    match run(&cli, &sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Every variant already renders its source.
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
