//! `csdpc` — dataset generation, pattern/coverage analysis, poisoning
//! attacks, offline training, and full experiment runs from one binary.
//!
//! Every parameter comes from the JSON config (`--config`) or a flag;
//! environment variables are never read. Exit codes: 0 success, 1 usage
//! error, 2 stage failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use csdpc_core::dataset::{load, save, OfflineDataset};
use csdpc_core::harness::{
    attack_stage, build_env_and_behavior, config_hash, coverage_stage, detect_anomalies,
    discretize_dataset, eval_stage, generate_dataset, metrics_value, pattern_stage,
    run_experiment, sweep, train_stage, ExperimentConfig, FeatureStats, HarnessError, SweepAxis,
};
use csdpc_core::learners::{StateActionValue, TrainedModel};
use csdpc_core::poison::ATTACK_KINDS;

#[derive(Parser)]
#[command(name = "csdpc", version, about = "Coverage analysis and data poisoning for offline RL datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; built-in defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed, overriding the config's.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for artifacts; nothing is written when omitted.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Stdout format.
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the configured behavior policy into a dataset.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the feature extractor and k-means units for a dataset.
    Discretize {
        #[command(flatten)]
        common: Common,
        /// Input dataset; generated from the config when omitted.
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
    },
    /// Extract decision patterns and identify the rare set.
    Patterns {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
    },
    /// Coverage analysis: pattern-frequency proxy plus, for tabular
    /// environments, exact concentrability and Q-error bounds.
    Coverage {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
    },
    /// Poison a dataset with one attack kind.
    Poison {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        /// Attack kind; defaults to the config's first kind.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Train the configured offline learner on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
    },
    /// Evaluate a trained model in the configured environment.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model JSON written by `train` (or by `run`).
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
    },
    /// Score a dataset against clean feature statistics.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Dataset to score.
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Clean reference dataset; generated from the config when omitted.
        #[arg(long, value_name = "FILE")]
        clean: Option<PathBuf>,
        /// Attack report JSON whose poisoned_indices become ground truth.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Run the full pipeline: generate, discretize, patterns, coverage,
    /// attacks, training, evaluation, detection.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run the pipeline once per value of one config axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Axis: rho, eta, l, k, access_fraction, dedup, attack_kind.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values, e.g. `0.01,0.05` or `csdpc,none`.
        #[arg(long)]
        values: String,
    },
}

enum CliError {
    Usage(String),
    Stage(String),
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Stage(e.to_string()),
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn stage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Stage(e.to_string())
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn load_or_generate(
    data: &Option<PathBuf>,
    config: &ExperimentConfig,
) -> Result<OfflineDataset, CliError> {
    match data {
        Some(path) => load(path).map_err(stage),
        None => generate_dataset(config).map_err(CliError::from),
    }
}

fn ensure_out(out: &Option<PathBuf>) -> Result<(), CliError> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(stage)?;
    }
    Ok(())
}

fn write_text(out: &Option<PathBuf>, name: &str, text: &str) -> Result<(), CliError> {
    if let Some(dir) = out {
        fs::write(dir.join(name), text).map_err(stage)?;
    }
    Ok(())
}

fn write_json_artifact<T: serde::Serialize>(
    out: &Option<PathBuf>,
    name: &str,
    value: &T,
) -> Result<(), CliError> {
    if out.is_some() {
        let text = serde_json::to_string_pretty(value).map_err(stage)?;
        write_text(out, name, &(text + "\n"))?;
    }
    Ok(())
}

/// Two-column key,value CSV for outputs without a natural table shape.
fn flat_csv(value: &serde_json::Value) -> String {
    fn walk(prefix: &str, v: &serde_json::Value, rows: &mut Vec<(String, String)>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, rows);
                }
            }
            serde_json::Value::Array(items) => {
                let all_scalar = items.iter().all(|i| !i.is_object() && !i.is_array());
                if all_scalar {
                    let joined: Vec<String> = items.iter().map(render_scalar).collect();
                    rows.push((prefix.to_string(), joined.join(";")));
                } else {
                    for (i, item) in items.iter().enumerate() {
                        walk(&format!("{prefix}.{i}"), item, rows);
                    }
                }
            }
            other => rows.push((prefix.to_string(), render_scalar(other))),
        }
    }
    fn render_scalar(v: &serde_json::Value) -> String {
        match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
    let mut rows = Vec::new();
    walk("", value, &mut rows);
    let mut out = String::from("key,value\n");
    for (k, v) in rows {
        out.push_str(&format!("{k},{v}\n"));
    }
    out
}

fn emit<T: serde::Serialize>(format: Format, value: &T) -> Result<(), CliError> {
    match format {
        Format::Json => {
            println!("{}", serde_json::to_string_pretty(value).map_err(stage)?);
        }
        Format::Csv => {
            let v = serde_json::to_value(value).map_err(stage)?;
            print!("{}", flat_csv(&v));
        }
    }
    Ok(())
}

fn cmd_gen(common: &Common) -> Result<(), CliError> {
    let config = load_config(common)?;
    let dataset = generate_dataset(&config)?;
    ensure_out(&common.out)?;
    let mut path = None;
    if let Some(dir) = &common.out {
        let p = dir.join("clean.ord");
        save(&dataset, &p).map_err(stage)?;
        path = Some(p.display().to_string());
    }
    emit(
        common.format,
        &serde_json::json!({
            "env": dataset.meta.env,
            "n_trajectories": dataset.trajectories.len(),
            "n_transitions": dataset.n_transitions(),
            "state_dim": dataset.meta.state_dim,
            "action_dim": dataset.meta.action_dim,
            "seed": config.seed,
            "path": path,
        }),
    )
}

fn cmd_discretize(common: &Common, data: &Option<PathBuf>) -> Result<(), CliError> {
    let config = load_config(common)?;
    let dataset = load_or_generate(data, &config)?;
    let disc = discretize_dataset(&config, &dataset)?;
    ensure_out(&common.out)?;
    write_json_artifact(&common.out, "discretize.json", &disc)?;
    emit(
        common.format,
        &serde_json::json!({
            "k": disc.model.centroids.len(),
            "feature_dim": disc.extractor.output_dim(),
            "n_units": disc.units.labels.len(),
            "elbow_curve": disc.elbow_curve,
        }),
    )
}

fn cmd_patterns(common: &Common, data: &Option<PathBuf>) -> Result<(), CliError> {
    let config = load_config(common)?;
    let dataset = load_or_generate(data, &config)?;
    let disc = discretize_dataset(&config, &dataset)?;
    let artifacts = pattern_stage(&config, &dataset, &disc)?;
    ensure_out(&common.out)?;
    write_json_artifact(&common.out, "patterns.json", &artifacts.index.export())?;
    write_text(&common.out, "patterns.csv", &artifacts.index.to_csv())?;
    write_json_artifact(&common.out, "rare.json", &artifacts.rare)?;
    match common.format {
        Format::Csv => {
            print!("{}", artifacts.index.to_csv());
            Ok(())
        }
        Format::Json => emit(
            common.format,
            &serde_json::json!({
                "index": artifacts.index.export(),
                "rare": artifacts.rare,
                "access": artifacts.access,
            }),
        ),
    }
}

fn cmd_coverage(common: &Common, data: &Option<PathBuf>) -> Result<(), CliError> {
    let config = load_config(common)?;
    let dataset = load_or_generate(data, &config)?;
    let disc = discretize_dataset(&config, &dataset)?;
    let artifacts = pattern_stage(&config, &dataset, &disc)?;
    let (handle, _) = build_env_and_behavior(&config)?;
    let summary = coverage_stage(&config, &handle, &dataset, &artifacts.index)?;
    ensure_out(&common.out)?;
    write_json_artifact(&common.out, "coverage.json", &summary)?;
    emit(common.format, &summary)
}

fn cmd_poison(
    common: &Common,
    data: &Option<PathBuf>,
    kind: &Option<String>,
) -> Result<(), CliError> {
    let config = load_config(common)?;
    let kind = kind.clone().unwrap_or_else(|| config.attack.kinds[0].clone());
    if !ATTACK_KINDS.contains(&kind.as_str()) {
        return Err(CliError::Usage(format!(
            "unknown attack kind '{kind}' (known: {})",
            ATTACK_KINDS.join(", ")
        )));
    }
    let dataset = load_or_generate(data, &config)?;
    let disc = discretize_dataset(&config, &dataset)?;
    let artifacts = pattern_stage(&config, &dataset, &disc)?;
    let value_q = if kind == "value_target" {
        let (handle, _) = build_env_and_behavior(&config)?;
        let mut value_config = config.clone();
        value_config.train.kind = "fqi".to_string();
        match train_stage(&value_config, &handle, &dataset)? {
            TrainedModel::Q(q) => Some(q),
            TrainedModel::Policy(_) => None,
        }
    } else {
        None
    };
    let (poisoned, report) = attack_stage(
        &config,
        &kind,
        &dataset,
        &disc,
        &artifacts,
        value_q.as_ref().map(|q| q as &dyn StateActionValue),
    )?;
    ensure_out(&common.out)?;
    if let Some(dir) = &common.out {
        save(&poisoned, dir.join(format!("poisoned-{kind}.ord"))).map_err(stage)?;
    }
    write_json_artifact(&common.out, &format!("attack-{kind}.json"), &report)?;
    write_text(&common.out, &format!("attack-{kind}.csv"), &report.rows_csv())?;
    match common.format {
        Format::Csv => {
            print!("{}", report.rows_csv());
            Ok(())
        }
        Format::Json => emit(common.format, &report),
    }
}

fn cmd_train(common: &Common, data: &Option<PathBuf>) -> Result<(), CliError> {
    let config = load_config(common)?;
    let dataset = load_or_generate(data, &config)?;
    let (handle, _) = build_env_and_behavior(&config)?;
    let model = train_stage(&config, &handle, &dataset)?;
    ensure_out(&common.out)?;
    let mut path = None;
    if let Some(dir) = &common.out {
        let p = dir.join("model.json");
        let text = serde_json::to_string_pretty(&model).map_err(stage)?;
        fs::write(&p, text + "\n").map_err(stage)?;
        path = Some(p.display().to_string());
    }
    emit(
        common.format,
        &serde_json::json!({
            "learner": config.train.kind,
            "trained_on_transitions": dataset.n_transitions(),
            "path": path,
        }),
    )
}

fn cmd_eval(common: &Common, model: &Path) -> Result<(), CliError> {
    let config = load_config(common)?;
    let text = fs::read_to_string(model).map_err(stage)?;
    let model: TrainedModel = serde_json::from_str(&text).map_err(stage)?;
    let (handle, _) = build_env_and_behavior(&config)?;
    let acr = eval_stage(&config, &handle, &model)?;
    emit(
        common.format,
        &serde_json::json!({
            "acr": acr,
            "episodes": config.eval.episodes,
            "seeds": config.eval.seeds,
        }),
    )
}

#[derive(Deserialize)]
struct TruthOnly {
    poisoned_indices: Vec<usize>,
}

fn cmd_detect(
    common: &Common,
    data: &Path,
    clean: &Option<PathBuf>,
    report: &Option<PathBuf>,
) -> Result<(), CliError> {
    let config = load_config(common)?;
    let dataset = load(data).map_err(stage)?;
    let clean = match clean {
        Some(path) => load(path).map_err(stage)?,
        None => generate_dataset(&config)?,
    };
    let truth = match report {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(stage)?;
            let parsed: TruthOnly = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("invalid attack report: {e}")))?;
            parsed.poisoned_indices
        }
        None => Vec::new(),
    };
    let stats = FeatureStats::fit(&clean)?;
    let result = detect_anomalies(&stats, &dataset, config.detect.threshold_sigma, &truth);
    ensure_out(&common.out)?;
    write_json_artifact(&common.out, "detection.json", &result)?;
    emit(common.format, &result)
}

/// One row per attack kind, mirroring the sweep CSV without the value column.
fn run_csv(result: &csdpc_core::harness::RunResult) -> String {
    let mut out = String::from(
        "kind,clean_acr,poisoned_acr,aer,precision,recall,f1,poisoned_transitions,\
         distinct_before,distinct_after,rare_residual_total\n",
    );
    for (kind, a) in &result.attacks {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            kind,
            result.clean_acr,
            a.poisoned_acr,
            a.aer.map_or(String::new(), |x| x.to_string()),
            a.detection.precision,
            a.detection.recall,
            a.detection.f1,
            a.poisoned_transitions,
            a.distinct_patterns_before,
            a.distinct_patterns_after,
            a.rare_residual_total
        ));
    }
    out
}

fn cmd_run(common: &Common) -> Result<(), CliError> {
    let mut config = load_config(common)?;
    if let Some(dir) = &common.out {
        config.out_dir = Some(dir.display().to_string());
    }
    let result = run_experiment(&config)?;
    if let Some(root) = &config.out_dir {
        eprintln!(
            "artifacts: {}",
            Path::new(root).join(format!("run-{}", &config_hash(&config)[..12])).display()
        );
    }
    match common.format {
        Format::Csv => {
            print!("{}", run_csv(&result));
            Ok(())
        }
        Format::Json => emit(common.format, &metrics_value(&result)),
    }
}

fn parse_values(raw: &str) -> Result<Vec<serde_json::Value>, CliError> {
    let mut values = Vec::new();
    for token in raw.split(',') {
        let token = token.trim();
        if token.is_empty() {
            return Err(CliError::Usage("empty value in --values".to_string()));
        }
        match serde_json::from_str::<serde_json::Value>(token) {
            Ok(v) if v.is_number() || v.is_boolean() => values.push(v),
            _ => values.push(serde_json::Value::String(token.to_string())),
        }
    }
    Ok(values)
}

fn cmd_sweep(common: &Common, axis: &str, values: &str) -> Result<(), CliError> {
    let mut config = load_config(common)?;
    let axis: SweepAxis = axis.parse().map_err(usage)?;
    let values = parse_values(values)?;
    if let Some(dir) = &common.out {
        config.out_dir = Some(dir.display().to_string());
    }
    let table = sweep(&config, axis, &values)?;
    ensure_out(&common.out)?;
    write_json_artifact(&common.out, "sweep.json", &table)?;
    write_text(&common.out, "sweep.csv", &table.csv())?;
    for (value, error) in table.failures() {
        eprintln!("sweep {}={value} failed: {error}", table.axis);
    }
    match common.format {
        Format::Csv => {
            print!("{}", table.csv());
            Ok(())
        }
        Format::Json => emit(common.format, &table),
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Gen { common } => cmd_gen(common),
        Command::Discretize { common, data } => cmd_discretize(common, data),
        Command::Patterns { common, data } => cmd_patterns(common, data),
        Command::Coverage { common, data } => cmd_coverage(common, data),
        Command::Poison { common, data, kind } => cmd_poison(common, data, kind),
        Command::Train { common, data } => cmd_train(common, data),
        Command::Eval { common, model } => cmd_eval(common, model),
        Command::Detect { common, data, clean, report } => cmd_detect(common, data, clean, report),
        Command::Run { common } => cmd_run(common),
        Command::Sweep { common, axis, values } => cmd_sweep(common, axis, values),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version are successful outcomes, not usage errors.
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Stage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
