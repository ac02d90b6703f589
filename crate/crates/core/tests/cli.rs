use std::path::Path;
use std::process::Command;

use bohmian::cli::{emit_plots, parse_config, read_manifest, run, sha256_hex, RunStatus, EXIT_CHECK_FAILURE, EXIT_CONFIG, EXIT_OK, MANIFEST_FILE};

fn bohm(args: &[&str], dir: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_bohm"))
        .args(args)
        .current_dir(dir)
        .env_remove("BOHM_SEED")
        .env_remove("BOHM_WORKERS")
        .env_remove("BOHM_OUT")
        .env_remove("BOHM_FORMAT")
        .env_remove("BOHM_CONFIG")
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into(), String::from_utf8_lossy(&out.stderr).into())
}

#[test]
fn list_shows_every_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout, _) = bohm(&["list"], dir.path());
    assert_eq!(code, EXIT_OK);
    for name in ["double_slit", "packet_exchange", "stern_gerlach", "pointer_measurement", "epr_nonlocality", "asymptotic_momentum", "classical_limit", "permutation_symmetry"] {
        assert!(stdout.contains(name), "{name}");
    }
    let (code, stdout, _) = bohm(&["list", "--json"], dir.path());
    assert_eq!(code, EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 8);
}

#[test]
fn config_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "scenario = \"classical_limit\"\nworkers = 0\n").unwrap();
    let (code, _, stderr) = bohm(&["run", "--config", "bad.toml"], dir.path());
    assert_eq!(code, EXIT_CONFIG);
    assert!(stderr.contains("workers"));
    std::fs::write(dir.path().join("typo.toml"), "scenario = \"classical_limit\"\n\n[classical_limit]\namplitud = 2\n").unwrap();
    let (code, _, stderr) = bohm(&["run", "--config", "typo.toml"], dir.path());
    assert_eq!(code, EXIT_CONFIG);
    assert!(stderr.contains("line 4"), "{stderr}");
    let (code, _, _) = bohm(&["run", "--scenario", "classical_limit", "--format", "xml"], dir.path());
    assert_eq!(code, EXIT_CONFIG);
    let (code, _, _) = bohm(&["run"], dir.path());
    assert_eq!(code, EXIT_CONFIG);
    let out = Command::new(env!("CARGO_BIN_EXE_bohm"))
        .args(["run", "--scenario", "classical_limit"])
        .current_dir(dir.path())
        .env("BOHM_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn run_writes_verifiable_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let text = "scenario = \"classical_limit\"\nensemble_size = 200\nseed = 5\nworkers = 2\nformat = \"json\"\nout = \"first\"\n[classical_limit]\namplitude = 3.5\n";
    std::fs::write(dir.path().join("run.toml"), text).unwrap();
    let (code, stdout, _) = bohm(&["run", "--config", "run.toml"], dir.path());
    assert_eq!(code, EXIT_OK, "{stdout}");
    let manifest = read_manifest(&dir.path().join("first").join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.status, RunStatus::Passed);
    assert_eq!(manifest.config.overrides["amplitude"], 3.5);
    assert_eq!(manifest.config.seed, 5);
    assert!(manifest.failures.is_empty());
    for f in &manifest.files {
        let bytes = std::fs::read(dir.path().join("first").join(&f.path)).unwrap();
        assert_eq!(sha256_hex(&bytes), f.sha256);
        assert_eq!(bytes.len() as u64, f.bytes);
    }
    assert!(manifest.files.iter().any(|f| f.path == "orbit.json"));

    let (code, _, _) = bohm(&["run", "--config", "run.toml", "--out", "second", "--workers", "1"], dir.path());
    assert_eq!(code, EXIT_OK);
    let again = read_manifest(&dir.path().join("second").join(MANIFEST_FILE)).unwrap();
    assert_eq!(again.config.workers, 1);
    assert_eq!(manifest.files, again.files);

    let (code, stdout, _) = bohm(&["emit-plots", "--manifest", "first/manifest.json", "--out", "plots"], dir.path());
    assert_eq!(code, EXIT_OK, "{stdout}");
    assert!(dir.path().join("plots").join("orbit.json").exists());
}

#[test]
fn tampered_manifest_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = parse_config("scenario = \"permutation_symmetry\"\n").unwrap();
    config.out = dir.path().join("run");
    let manifest = run(&config).unwrap();
    assert_eq!(manifest.exit_code, EXIT_OK);
    let clean = emit_plots(&manifest, &dir.path().join("plots")).unwrap();
    assert!(clean.mismatched.is_empty());
    let mut tampered = manifest.clone();
    tampered.files[1].sha256 = "0".repeat(64);
    let report = emit_plots(&tampered, &dir.path().join("plots")).unwrap();
    assert_eq!(report.mismatched, vec![tampered.files[1].path.clone()]);

    let path = dir.path().join("run").join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_vec(&tampered).unwrap()).unwrap();
    let (code, _, stderr) = bohm(&["emit-plots", "--manifest", path.to_str().unwrap()], dir.path());
    assert_eq!(code, EXIT_CHECK_FAILURE);
    assert!(stderr.contains("digest mismatch"));
}

#[test]
fn failed_checks_exit_with_two_and_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, stderr) = bohm(
        &["run", "--scenario", "double_slit", "--set", "mask_slit=1", "--set", "fan_size=10", "--set", "reversal_members=10", "-n", "2000", "--out", "masked"],
        dir.path(),
    );
    assert_eq!(code, EXIT_CHECK_FAILURE);
    assert!(stderr.contains("failure: fringe_maxima"));
    let manifest = read_manifest(&dir.path().join("masked").join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.status, RunStatus::CheckFailure);
    assert!(manifest.failures.contains(&"fringe_maxima".to_string()));

    // switching off every failing check turns the same run into a pass
    let toggles: String = manifest.failures.iter().map(|f| format!("{f} = false\n")).collect();
    let text = format!("scenario = \"double_slit\"\nensemble_size = 2000\nout = \"toggled\"\n[double_slit]\nmask_slit = 1\nfan_size = 10\nreversal_members = 10\n[checks]\n{toggles}");
    std::fs::write(dir.path().join("toggled.toml"), text).unwrap();
    let (code, stdout, _) = bohm(&["run", "--config", "toggled.toml"], dir.path());
    assert_eq!(code, EXIT_OK, "{stdout}");
    assert!(stdout.contains("SKIP fringe_maxima"));
}

#[test]
fn custom_scenario_runs() {
    let dir = tempfile::tempdir().unwrap();
    let text = "scenario = \"custom\"\nensemble_size = 2000\nout = \"custom\"\n[custom]\nextent = [30.0]\npoints = [256]\ncenter = [1.0]\nwidth = [1.0]\nwavenumber = [0.5]\npotential = \"harmonic(0.5)\"\nduration = 2.0\n";
    std::fs::write(dir.path().join("custom.toml"), text).unwrap();
    let (code, stdout, stderr) = bohm(&["run", "--config", "custom.toml"], dir.path());
    assert_eq!(code, EXIT_OK, "{stdout}{stderr}");
    assert!(dir.path().join("custom").join("marginal_axis_1.csv").exists());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join("configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        bohmian::cli::load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 3);
}
