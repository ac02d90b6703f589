//! The `bohm` command line: configuration, run orchestration, output files
//! and the run manifest.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{load_config, parse_config, ConfigError, OutputFormat, RunConfig};

use crate::acceptance;
use crate::experiments::{build_scenario, registry, run_custom, run_scenario, ExperimentError, Report, ScenarioRun};
use crate::seeding;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILURE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "bohm", version, about = "Pilot-wave simulations with built-in statistical checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List scenarios, their parameters and checks.
    List {
        #[arg(long)]
        json: bool,
    },
    /// Run one scenario and write its report, tables and manifest.
    Run(RunArgs),
    /// Run the acceptance suite.
    Check {
        /// Only these criteria (comma separated numbers).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
        #[arg(long, env = "BOHM_OUT")]
        out: Option<PathBuf>,
    },
    /// Regenerate plot tables from a manifest and verify their digests.
    EmitPlots {
        #[arg(long, default_value = MANIFEST_FILE)]
        manifest: PathBuf,
        /// Directory for the regenerated files; the manifest's directory by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, env = "BOHM_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "BOHM_SCENARIO")]
    pub scenario: Option<String>,
    /// Parameter override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, env = "BOHM_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "BOHM_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long = "ensemble-size", short = 'n', env = "BOHM_ENSEMBLE_SIZE")]
    pub ensemble_size: Option<usize>,
    #[arg(long, env = "BOHM_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, env = "BOHM_FORMAT")]
    pub format: Option<OutputFormat>,
}

impl RunArgs {
    /// Config file (if any) with flags and environment layered on top.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut config = match (&self.config, &self.scenario) {
            (Some(path), _) => load_config(path)?,
            (None, Some(name)) => RunConfig::for_scenario(name)?,
            (None, None) => return Err(ConfigError::Missing("scenario".into())),
        };
        if let (Some(name), Some(_)) = (&self.scenario, &self.config) {
            if *name != config.scenario {
                config = RunConfig { overrides: BTreeMap::new(), checks: BTreeMap::new(), ..RunConfig::for_scenario(name)? };
            }
        }
        for item in &self.set {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| ConfigError::Range { key: "set".into(), message: format!("`{item}` is not KEY=VALUE") })?;
            let key = key.trim();
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| ConfigError::Type { key: key.to_string(), expected: "a number", line: None })?;
            config.overrides.insert(key.to_string(), value);
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(workers) = self.workers {
            config.workers = workers;
        }
        if let Some(n) = self.ensemble_size {
            config.ensemble_size = n;
        }
        if let Some(out) = &self.out {
            config.out = out.clone();
        }
        if let Some(format) = self.format {
            config.format = format;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Passed,
    CheckFailure,
    NumericalFault,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Passed => EXIT_OK,
            RunStatus::CheckFailure => EXIT_CHECK_FAILURE,
            RunStatus::NumericalFault => EXIT_NUMERICAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub enabled: bool,
    pub passed: bool,
    pub measured: Option<f64>,
    pub relation: String,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Everything needed to reproduce and audit a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seeding: String,
    pub config: RunConfig,
    pub wall_time_seconds: f64,
    pub status: RunStatus,
    pub exit_code: i32,
    pub checks: Vec<CheckResult>,
    /// Failed enabled checks, or the error that stopped the run.
    pub failures: Vec<String>,
    pub files: Vec<FileEntry>,
}

/// Runs the configured scenario on a pool of `config.workers` threads.
pub fn execute(config: &RunConfig) -> Result<ScenarioRun, RunError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(config.workers).build().map_err(|e| RunError::Pool(e.to_string()))?;
    let run = pool.install(|| -> Result<ScenarioRun, ExperimentError> {
        if config.scenario == config::CUSTOM {
            let spec = config.custom.as_ref().ok_or(ExperimentError::UnknownScenario(config::CUSTOM.into()))?;
            let mut run = run_custom(spec, config.ensemble_size, config.seed)?;
            run.report.scenario = config::CUSTOM.into();
            run.report.seed = config.seed;
            run.report.ensemble_size = config.ensemble_size;
            Ok(run)
        } else {
            let scenario = build_scenario(&config.scenario, &config.overrides)?.with_ensemble_size(config.ensemble_size)?;
            run_scenario(&scenario, config.seed)
        }
    })?;
    Ok(run)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Report and table files as (relative path, contents), in a fixed order.
pub fn render_outputs(run: &ScenarioRun, format: OutputFormat) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![(REPORT_FILE.to_string(), to_json(&run.report))];
    for table in &run.tables {
        match format {
            OutputFormat::Csv => {
                let mut buf = Vec::new();
                table.write_csv(&mut buf).expect("writing to memory");
                files.push((format!("{}.csv", table.name), buf));
            }
            OutputFormat::Json => files.push((format!("{}.json", table.name), to_json(table))),
        }
    }
    files
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serialisable");
    bytes.push(b'\n');
    bytes
}

fn check_results(report: &Report, config: &RunConfig) -> (Vec<CheckResult>, Vec<String>) {
    let mut failures = Vec::new();
    let results = report
        .checks
        .iter()
        .map(|c| {
            let enabled = config.check_enabled(&c.name);
            if enabled && !c.passed {
                failures.push(c.name.clone());
            }
            CheckResult {
                name: c.name.clone(),
                enabled,
                passed: c.passed,
                measured: c.measured.is_finite().then_some(c.measured),
                relation: c.relation.symbol().to_string(),
                bound: c.bound,
            }
        })
        .collect();
    (results, failures)
}

fn status_of(report: &Report, config: &RunConfig, failures: &[String]) -> RunStatus {
    let non_finite = report.checks.iter().any(|c| config.check_enabled(&c.name) && !c.measured.is_finite())
        || report.metrics.values().any(|v| !v.is_finite());
    if non_finite {
        RunStatus::NumericalFault
    } else if failures.is_empty() {
        RunStatus::Passed
    } else {
        RunStatus::CheckFailure
    }
}

fn write_files(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<Vec<FileEntry>, RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    files
        .iter()
        .map(|(name, bytes)| {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(io_err(&path))?;
            Ok(FileEntry { path: name.clone(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 })
        })
        .collect()
}

/// Runs a scenario, writes its outputs under `config.out` and returns the
/// manifest, which is also written. Failures inside the simulation are
/// recorded in the manifest rather than returned.
pub fn run(config: &RunConfig) -> Result<RunManifest, RunError> {
    config.validate()?;
    let start = Instant::now();
    let outcome = execute(config);
    let (status, checks, failures, files) = match outcome {
        Ok(run) => {
            let (checks, failures) = check_results(&run.report, config);
            let status = status_of(&run.report, config, &failures);
            let files = write_files(&config.out, &render_outputs(&run, config.format))?;
            (status, checks, failures, files)
        }
        Err(RunError::Experiment(e)) => {
            let status = if e.is_numerical() { RunStatus::NumericalFault } else { RunStatus::CheckFailure };
            fs::create_dir_all(&config.out).map_err(io_err(&config.out))?;
            (status, Vec::new(), vec![format!("error: {e}")], Vec::new())
        }
        Err(other) => return Err(other),
    };
    let manifest = RunManifest {
        tool: "bohm".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seeding: seeding::SCHEME.into(),
        config: config.clone(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        status,
        exit_code: status.exit_code(),
        checks,
        failures,
        files,
    };
    let path = config.out.join(MANIFEST_FILE);
    fs::write(&path, to_json(&manifest)).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| RunError::Manifest { path: path.display().to_string(), message: e.to_string() })
}

/// Outcome of regenerating a run's files from its manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmitReport {
    pub written: Vec<FileEntry>,
    /// Files whose regenerated digest differs from the recorded one.
    pub mismatched: Vec<String>,
}

/// Reruns the manifest's configuration, writes its tables to `out` and
/// compares every regenerated file with the recorded digest.
pub fn emit_plots(manifest: &RunManifest, out: &Path) -> Result<EmitReport, RunError> {
    let run = execute(&manifest.config)?;
    let files = render_outputs(&run, manifest.config.format);
    let written = write_files(out, &files[1..])?;
    let recorded: BTreeMap<&str, &str> = manifest.files.iter().map(|f| (f.path.as_str(), f.sha256.as_str())).collect();
    let mismatched = files
        .iter()
        .filter(|(name, bytes)| recorded.get(name.as_str()) != Some(&sha256_hex(bytes).as_str()))
        .map(|(name, _)| name.clone())
        .collect();
    Ok(EmitReport { written, mismatched })
}

fn print_list(json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(registry()).expect("serialisable"));
        return;
    }
    for info in registry() {
        println!("{} (default ensemble {})", info.name, info.default_ensemble);
        println!("  {}", info.summary);
        for p in info.params {
            let kind = if p.integer { " integer" } else { "" };
            println!("  {:<20} {:>10} in [{}, {}]{kind}  {}", p.name, p.default, p.min, p.max, p.doc);
        }
        println!("  checks: {}", info.checks.join(", "));
    }
    println!("custom (default ensemble {})", config::CUSTOM_DEFAULT_ENSEMBLE);
    println!("  user-defined Gaussian in a built-in potential, configured in a [custom] section");
}

fn fail(code: i32, message: &str) -> i32 {
    eprintln!("error: {message}");
    code
}

fn exit_for(e: &RunError) -> i32 {
    match e {
        RunError::Config(_) | RunError::Manifest { .. } => EXIT_CONFIG,
        RunError::Experiment(e) if e.is_numerical() => EXIT_NUMERICAL,
        RunError::Experiment(_) => EXIT_CHECK_FAILURE,
        RunError::Pool(_) | RunError::Io { .. } => EXIT_CONFIG,
    }
}

fn run_command(args: &RunArgs) -> i32 {
    let config = match args.resolve() {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, &e.to_string()),
    };
    match run(&config) {
        Ok(manifest) => {
            for c in &manifest.checks {
                let state = match (c.enabled, c.passed) {
                    (false, _) => "SKIP",
                    (true, true) => "PASS",
                    (true, false) => "FAIL",
                };
                let measured = c.measured.map_or("non-finite".to_string(), |m| format!("{m:.6e}"));
                println!("{state} {}: {measured} {} {:.6e}", c.name, c.relation, c.bound);
            }
            for f in &manifest.failures {
                eprintln!("failure: {f}");
            }
            println!("wrote {} files to {}", manifest.files.len() + 1, config.out.display());
            manifest.exit_code
        }
        Err(e) => fail(exit_for(&e), &e.to_string()),
    }
}

fn check_command(only: &[u8], out: Option<&Path>) -> i32 {
    let ids: Vec<u8> = if only.is_empty() { acceptance::CRITERIA.iter().map(|c| c.0).collect() } else { only.to_vec() };
    let mut results = Vec::new();
    for id in ids {
        let Some(result) = acceptance::run_criterion(id) else {
            return fail(EXIT_CONFIG, &format!("no criterion {id}"));
        };
        println!("{}", result.line());
        results.push(result);
    }
    if let Some(dir) = out {
        let path = dir.join("acceptance.json");
        if let Err(e) = fs::create_dir_all(dir).and_then(|_| fs::write(&path, to_json(&results))) {
            return fail(EXIT_CONFIG, &format!("{}: {e}", path.display()));
        }
    }
    if results.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILURE
    }
}

fn emit_command(manifest_path: &Path, out: Option<&Path>) -> i32 {
    let manifest = match read_manifest(manifest_path) {
        Ok(m) => m,
        Err(e) => return fail(exit_for(&e), &e.to_string()),
    };
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| manifest_path.parent().map(Path::to_path_buf).unwrap_or_default());
    match emit_plots(&manifest, &dir) {
        Ok(report) => {
            for f in &report.written {
                println!("{} {} {}", f.sha256, f.bytes, dir.join(&f.path).display());
            }
            if report.mismatched.is_empty() {
                println!("all digests match the manifest");
                EXIT_OK
            } else {
                for name in &report.mismatched {
                    eprintln!("digest mismatch: {name}");
                }
                EXIT_CHECK_FAILURE
            }
        }
        Err(e) => fail(exit_for(&e), &e.to_string()),
    }
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match &cli.command {
        Command::List { json } => {
            print_list(*json);
            EXIT_OK
        }
        Command::Run(args) => run_command(args),
        Command::Check { only, out } => check_command(only, out.as_deref()),
        Command::EmitPlots { manifest, out } => emit_command(manifest, out.as_deref()),
    }
}
