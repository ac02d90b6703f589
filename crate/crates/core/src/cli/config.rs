//! Run configuration: a TOML file with top-level settings, a `[checks]`
//! table of toggles, and one section of parameter overrides named after the
//! scenario (or `[custom]` for a user-defined setup).

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::dynamics::PotentialSpec;
use crate::experiments::{build_scenario, scenario_info, CustomSpec, ExperimentError};

pub const CUSTOM: &str = "custom";
pub const DEFAULT_OUT: &str = "bohm-out";
pub const CUSTOM_DEFAULT_ENSEMBLE: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{}unknown key `{key}`", location(*.line))]
    UnknownKey { key: String, line: Option<usize> },
    #[error("{}`{key}`: expected {expected}", location(*.line))]
    Type { key: String, expected: &'static str, line: Option<usize> },
    #[error("`{key}`: {message}")]
    Range { key: String, message: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("`{key}`: file {path} does not exist")]
    MissingFile { key: String, path: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

fn location(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

/// Fully validated run configuration with defaults applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: String,
    pub overrides: BTreeMap<String, f64>,
    pub custom: Option<CustomSpec>,
    pub ensemble_size: usize,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub format: OutputFormat,
    /// Checks switched on or off; unlisted checks are enabled.
    pub checks: BTreeMap<String, bool>,
}

impl RunConfig {
    /// Defaults for a named scenario.
    pub fn for_scenario(name: &str) -> Result<Self, ConfigError> {
        let info = scenario_info(name).ok_or_else(|| ConfigError::Range { key: "scenario".into(), message: format!("unknown scenario `{name}`") })?;
        Ok(Self {
            scenario: name.to_string(),
            overrides: BTreeMap::new(),
            custom: None,
            ensemble_size: info.default_ensemble,
            seed: 0,
            workers: default_workers(),
            out: PathBuf::from(DEFAULT_OUT),
            format: OutputFormat::Csv,
            checks: BTreeMap::new(),
        })
    }

    pub fn check_enabled(&self, name: &str) -> bool {
        self.checks.get(name).copied().unwrap_or(true)
    }

    /// Names of the checks this configuration can run.
    pub fn known_checks(&self) -> Vec<&'static str> {
        if self.scenario == CUSTOM {
            vec!["norm_conservation", "equivariance_bound"]
        } else {
            scenario_info(&self.scenario).map(|i| i.checks.to_vec()).unwrap_or_default()
        }
    }

    /// Re-checks every invariant; used after command-line overrides.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.ensemble_size == 0 {
            return Err(range("ensemble_size", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(range("workers", "must be at least 1"));
        }
        if self.scenario == CUSTOM {
            let spec = self.custom.as_ref().ok_or_else(|| ConfigError::Missing(CUSTOM.into()))?;
            spec.validate().map_err(|e| from_experiment(e, CUSTOM))?;
            if let Ok(PotentialSpec::Tabulated { path }) = spec.potential.parse::<PotentialSpec>() {
                if !std::path::Path::new(&path).exists() {
                    return Err(ConfigError::MissingFile { key: "potential".into(), path });
                }
            }
        } else {
            build_scenario(&self.scenario, &self.overrides).map_err(|e| from_experiment(e, &self.scenario))?;
        }
        let known = self.known_checks();
        if let Some(bad) = self.checks.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(ConfigError::UnknownKey { key: format!("checks.{bad}"), line: None });
        }
        Ok(())
    }
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn range(key: &str, message: &str) -> ConfigError {
    ConfigError::Range { key: key.to_string(), message: message.to_string() }
}

fn from_experiment(e: ExperimentError, section: &str) -> ConfigError {
    match e {
        ExperimentError::UnknownParameter { key, .. } => ConfigError::UnknownKey { key: format!("{section}.{key}"), line: None },
        ExperimentError::OutOfRange { key, value, min, max } => {
            ConfigError::Range { key: format!("{section}.{key}"), message: format!("{value} is outside [{min}, {max}]") }
        }
        ExperimentError::NotInteger { key, value } => ConfigError::Range { key: format!("{section}.{key}"), message: format!("{value} is not an integer") },
        ExperimentError::UnknownScenario(name) => range("scenario", &format!("unknown scenario `{name}`")),
        other => ConfigError::Range { key: section.to_string(), message: other.to_string() },
    }
}

/// 1-based line on which `key` is assigned inside `section` (`None` = top level).
fn line_of(text: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = Some(rest.trim_end_matches(']').trim().to_string());
            if section == current.as_deref() && key.is_empty() {
                return Some(i + 1);
            }
            continue;
        }
        if current.as_deref() != section {
            continue;
        }
        if let Some(rest) = line.strip_prefix(key) {
            let rest = rest.trim_start();
            if rest.starts_with('=') {
                return Some(i + 1);
            }
        }
    }
    None
}

/// Parses and validates a configuration file's text.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1).unwrap_or(1);
        ConfigError::Parse { line, message: e.message().trim().to_string() }
    })?;

    let scenario = match table.get("scenario") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ConfigError::Type { key: "scenario".into(), expected: "a string", line: line_of(text, None, "scenario") }),
        None => return Err(ConfigError::Missing("scenario".into())),
    };
    let mut config = if scenario == CUSTOM {
        RunConfig {
            scenario: CUSTOM.into(),
            overrides: BTreeMap::new(),
            custom: None,
            ensemble_size: CUSTOM_DEFAULT_ENSEMBLE,
            seed: 0,
            workers: default_workers(),
            out: PathBuf::from(DEFAULT_OUT),
            format: OutputFormat::Csv,
            checks: BTreeMap::new(),
        }
    } else {
        RunConfig::for_scenario(&scenario)?
    };

    for (key, value) in &table {
        let line = || line_of(text, None, key);
        let int = |min: i64| -> Result<i64, ConfigError> {
            match value {
                Value::Integer(i) if *i >= min => Ok(*i),
                Value::Integer(i) => Err(ConfigError::Range { key: key.clone(), message: format!("{i} is below the minimum {min}") }),
                _ => Err(ConfigError::Type { key: key.clone(), expected: "an integer", line: line() }),
            }
        };
        match key.as_str() {
            "scenario" => {}
            "ensemble_size" => config.ensemble_size = int(1)? as usize,
            "seed" => config.seed = int(0)? as u64,
            "workers" => config.workers = int(1)? as usize,
            "out" => match value {
                Value::String(s) => config.out = PathBuf::from(s),
                _ => return Err(ConfigError::Type { key: key.clone(), expected: "a string", line: line() }),
            },
            "format" => {
                config.format = match value.as_str() {
                    Some("csv") => OutputFormat::Csv,
                    Some("json") => OutputFormat::Json,
                    _ => return Err(ConfigError::Type { key: key.clone(), expected: "\"csv\" or \"json\"", line: line() }),
                }
            }
            "checks" => {
                let Value::Table(t) = value else {
                    return Err(ConfigError::Type { key: key.clone(), expected: "a table", line: line() });
                };
                for (name, v) in t {
                    let on = v.as_bool().ok_or_else(|| ConfigError::Type {
                        key: format!("checks.{name}"),
                        expected: "true or false",
                        line: line_of(text, Some("checks"), name),
                    })?;
                    config.checks.insert(name.clone(), on);
                }
            }
            section if section == scenario && scenario != CUSTOM => {
                let Value::Table(t) = value else {
                    return Err(ConfigError::Type { key: key.clone(), expected: "a table", line: line() });
                };
                for (name, v) in t {
                    let number = match v {
                        Value::Integer(i) => *i as f64,
                        Value::Float(f) => *f,
                        _ => {
                            return Err(ConfigError::Type {
                                key: format!("{section}.{name}"),
                                expected: "a number",
                                line: line_of(text, Some(section), name),
                            })
                        }
                    };
                    config.overrides.insert(name.clone(), number);
                }
            }
            CUSTOM if scenario == CUSTOM => {
                let spec: CustomSpec = value.clone().try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
                    line: line_of(text, Some(CUSTOM), "").unwrap_or(1),
                    message: format!("[custom]: {}", e.message().trim()),
                })?;
                config.custom = Some(spec);
            }
            other => {
                let line = line_of(text, None, other).or_else(|| line_of(text, Some(other), ""));
                return Err(ConfigError::UnknownKey { key: other.to_string(), line });
            }
        }
    }

    config.validate().map_err(|e| match e {
        ConfigError::UnknownKey { key, line: None } => {
            let line = key.split_once('.').and_then(|(section, k)| line_of(text, Some(section), k));
            ConfigError::UnknownKey { key, line }
        }
        other => other,
    })?;
    Ok(config)
}

/// Reads and parses a configuration file.
pub fn load_config(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config("scenario = \"double_slit\"\n").unwrap();
        assert_eq!(c.ensemble_size, 10_000);
        assert_eq!(c.seed, 0);
        assert_eq!(c.format, OutputFormat::Csv);
        assert!(c.overrides.is_empty());
        assert!(c.workers >= 1);
    }

    #[test]
    fn zero_workers_names_the_key() {
        let e = parse_config("scenario = \"double_slit\"\nworkers = 0\n").unwrap_err();
        assert!(matches!(&e, ConfigError::Range { key, .. } if key == "workers"), "{e}");
        assert!(e.to_string().contains("workers"));
    }

    #[test]
    fn overrides_are_kept() {
        let c = parse_config("scenario = \"double_slit\"\n[double_slit]\nslit_separation = 7.5\nfan_size = 40\n").unwrap();
        assert_eq!(c.overrides["slit_separation"], 7.5);
        assert_eq!(c.overrides["fan_size"], 40.0);
    }

    #[test]
    fn unknown_keys_report_their_line() {
        let e = parse_config("scenario = \"double_slit\"\nseed = 3\nbogus = 1\n").unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey { key: "bogus".into(), line: Some(3) });
        let e = parse_config("scenario = \"double_slit\"\n\n[double_slit]\nslit_width = 2.0\n").unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey { key: "double_slit.slit_width".into(), line: Some(4) });
        let e = parse_config("scenario = \"double_slit\"\n[checks]\nnonsense = false\n").unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey { key: "checks.nonsense".into(), line: Some(3) });
        let e = parse_config("scenario = \"double_slit\"\n[stern_gerlach]\nstrength = 2.0\n").unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey { key: "stern_gerlach".into(), line: Some(2) });
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let e = parse_config("scenario = \"double_slit\"\nseed = = 4\n").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 2, .. }), "{e}");
    }

    #[test]
    fn range_and_type_errors() {
        let e = parse_config("scenario = \"double_slit\"\n[double_slit]\nslit_separation = 100.0\n").unwrap_err();
        assert!(matches!(&e, ConfigError::Range { key, .. } if key == "double_slit.slit_separation"), "{e}");
        let e = parse_config("scenario = \"double_slit\"\nensemble_size = 0\n").unwrap_err();
        assert!(matches!(&e, ConfigError::Range { key, .. } if key == "ensemble_size"));
        let e = parse_config("scenario = \"double_slit\"\nseed = \"x\"\n").unwrap_err();
        assert_eq!(e, ConfigError::Type { key: "seed".into(), expected: "an integer", line: Some(2) });
        assert!(matches!(parse_config("seed = 1\n"), Err(ConfigError::Missing(_))));
        assert!(matches!(parse_config("scenario = \"nope\"\n"), Err(ConfigError::Range { .. })));
    }

    #[test]
    fn check_toggles() {
        let c = parse_config("scenario = \"double_slit\"\n[checks]\ntime_reversal = false\n").unwrap();
        assert!(!c.check_enabled("time_reversal"));
        assert!(c.check_enabled("fringe_maxima"));
    }

    #[test]
    fn custom_setup() {
        let text = "scenario = \"custom\"\nensemble_size = 500\n[custom]\nextent = [40.0]\npoints = [256]\ncenter = [0.0]\nwidth = [1.0]\npotential = \"harmonic(1.0)\"\nduration = 1.0\n";
        let c = parse_config(text).unwrap();
        let spec = c.custom.unwrap();
        assert_eq!(spec.points, vec![256]);
        assert_eq!(spec.snapshot_spacing, 0.05);
        let e = parse_config(&text.replace("duration", "durations")).unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 3, .. }), "{e}");
        let e = parse_config(&text.replace("harmonic(1.0)", "tabulated(/nonexistent/v.bin)")).unwrap_err();
        assert!(matches!(e, ConfigError::MissingFile { .. }), "{e}");
    }
}
