use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use trodo_core::benchmark::dataset::DatasetConfig;
use trodo_core::benchmark::train::TrainConfig;
use trodo_core::benchmark::zoo::{default_triggers, Architecture, ZooConfig, ZooManifest};
use trodo_core::calibration::CalibrationResult;
use trodo_core::scanner::ScanReport;

fn trodo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trodo"))
        .current_dir(dir)
        .env_remove("TRODO_SEED")
        .args(args)
        .output()
        .expect("spawn trodo")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny_zoo() -> ZooConfig {
    let dataset = DatasetConfig {
        num_classes: 4,
        train_per_class: 40,
        test_per_class: 10,
        image_size: 8,
        hue_jitter: 0.03,
        seed: 3,
    };
    ZooConfig {
        triggers: default_triggers(dataset.image_size)[..1].to_vec(),
        dataset,
        architecture: Architecture::Mlp { hidden: vec![16] },
        train: TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        },
        n_clean: 2,
        n_trojaned_per_attack: 1,
        asr_gate: 0.0,
        ..ZooConfig::default()
    }
}

struct Fixture {
    dir: PathBuf,
    manifest: ZooManifest,
}

impl Fixture {
    fn model(&self, i: usize) -> String {
        format!("zoo/{}", self.manifest.entries[i].path.display())
    }
}

/// A tiny zoo plus a calibration, built once per test binary.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = serde_json::json!({ "zoo": tiny_zoo() });
        std::fs::write(dir.join("run.json"), serde_json::to_vec(&cfg).unwrap()).unwrap();
        let out = trodo(&dir, &["--config", "run.json", "--out", "zoo", "zoo", "build"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let manifest = ZooManifest::load(dir.join("zoo/manifest.json")).unwrap();
        let surrogate = format!("zoo/{}", manifest.surrogate.path.display());
        let out = trodo(
            &dir,
            &[
                "--out", "cal", "calibrate", "--surrogate", &surrogate,
                "--sources", "zoo/benign.trodod", "--gamma-margin", "0.01",
            ],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        Fixture { dir, manifest }
    })
}

fn calibration() -> CalibrationResult {
    let text = std::fs::read_to_string(fixture().dir.join("cal/calibration.json")).unwrap();
    CalibrationResult::from_json(&text).unwrap()
}

/// Writes a copy of the fixture calibration with `tau` replaced.
fn calibration_with_tau(name: &str, tau: f64) -> String {
    let mut cal = calibration();
    cal.tau = tau;
    let path = format!("cal/{name}.json");
    std::fs::write(fixture().dir.join(&path), cal.to_json().unwrap()).unwrap();
    path
}

fn scan(out_dir: &str, model: &str, calibration: &str, extra: &[&str]) -> (Output, Option<ScanReport>) {
    let f = fixture();
    let mut args = vec![
        "--out", out_dir, "scan", "--model", model, "--calibration", calibration,
        "--sources", "zoo/benign.trodod",
    ];
    args.extend_from_slice(extra);
    let out = trodo(&f.dir, &args);
    let report = std::fs::read(f.dir.join(out_dir).join("report.json"))
        .ok()
        .map(|b| serde_json::from_slice(&b).unwrap());
    (out, report)
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = trodo(tmp.path(), &["scan", "--no-such-flag"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--no-such-flag"));
}

#[test]
fn help_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&trodo(tmp.path(), &["--help"])), 0);
}

#[test]
fn missing_file_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = trodo(
        tmp.path(),
        &["scan", "--model", "nope.trodo", "--calibration", "c.json", "--sources", "s.trodod"],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("model not found"), "{}", stderr(&out));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.json"), "{ \"seed\": 1, ").unwrap();
    let out = trodo(tmp.path(), &["--config", "bad.json", "selftest"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("malformed config"));

    std::fs::write(tmp.path().join("typo.json"), r#"{ "sede": 1 }"#).unwrap();
    let out = trodo(tmp.path(), &["--config", "typo.json", "selftest"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("unknown field"));
}

#[test]
fn bad_seed_env_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_trodo"))
        .current_dir(tmp.path())
        .env("TRODO_SEED", "abc")
        .arg("selftest")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("TRODO_SEED"));
}

#[test]
fn selftest_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = trodo(tmp.path(), &["selftest"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 4);

    let out = trodo(tmp.path(), &["--report", "json", "selftest"]);
    let checks: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(checks.as_array().unwrap().len(), 4);
}

#[test]
fn corrupt_model_is_a_runtime_error() {
    let f = fixture();
    std::fs::write(f.dir.join("corrupt.trodo"), b"TRODOMDL garbage").unwrap();
    let (out, _) = scan("scan_corrupt", "corrupt.trodo", "cal/calibration.json", &[]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn zoo_build_writes_manifest_and_sources() {
    let f = fixture();
    assert_eq!(f.manifest.entries.len(), 2 + 2);
    for name in ["manifest.json", "train.trodod", "test.trodod", "benign.trodod", "validation.trodod", "zoo_build.config.json"] {
        assert!(f.dir.join("zoo").join(name).exists(), "{name}");
    }
    let cal = calibration();
    assert!(cal.epsilon > 0.0 && cal.tau.is_finite());
    assert_eq!(cal.surrogate_fingerprint.as_deref(), Some(f.manifest.surrogate.fingerprint.as_str()));
}

#[test]
fn verdict_maps_to_exit_code() {
    let f = fixture();
    let high = calibration_with_tau("tau_high", 1e6);
    let (out, report) = scan("scan_high", &f.model(0), &high, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = report.unwrap();
    assert_eq!(format!("{:?}", report.verdict), "Clean");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.trim().lines().count(), 1, "one summary line: {stdout}");

    // Any positive shift exceeds a zero threshold.
    let zero = calibration_with_tau("tau_zero", 0.0);
    let (out, report) = scan("scan_zero", &f.model(2), &zero, &[]);
    let report = report.unwrap();
    assert!(report.signature_s > 0.0);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert_eq!(format!("{:?}", report.verdict), "Trojaned");
}

#[test]
fn zero_steps_give_zero_signature() {
    let f = fixture();
    let zero = calibration_with_tau("tau_zero_steps", 0.0);
    let (out, report) = scan("scan_steps0", &f.model(2), &zero, &["--steps", "0"]);
    let report = report.unwrap();
    assert_eq!(report.signature_s, 0.0);
    // z == τ is not above the threshold.
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn scan_rejects_gamma() {
    let f = fixture();
    let (out, _) = scan("scan_gamma", &f.model(0), "cal/calibration.json", &["--gamma", "0.6"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn scan_is_deterministic_and_echoes_config() {
    let f = fixture();
    let (a, ra) = scan("scan_det_a", &f.model(1), "cal/calibration.json", &["--seed", "9"]);
    let (b, rb) = scan("scan_det_b", &f.model(1), "cal/calibration.json", &["--seed", "9"]);
    assert_eq!(code(&a), code(&b));
    let (ra, rb) = (ra.unwrap(), rb.unwrap());
    assert_eq!(ra.signature_s, rb.signature_s);
    assert_eq!(ra.z_statistic, rb.z_statistic);
    let echo: serde_json::Value =
        serde_json::from_slice(&std::fs::read(f.dir.join("scan_det_a/scan.config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 9);
    assert_eq!(echo["command"], "scan");

    let (_, rc) = scan("scan_det_c", &f.model(1), "cal/calibration.json", &["--seed", "10"]);
    assert_ne!(rc.unwrap().signature_s, ra.signature_s);
}

#[test]
fn zoo_eval_writes_table_and_json() {
    let f = fixture();
    let out = trodo(&f.dir, &["--out", "eval", "zoo", "eval", "--manifest", "zoo/manifest.json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("overall"));
    let run: serde_json::Value =
        serde_json::from_slice(&std::fs::read(f.dir.join("eval/eval.json")).unwrap()).unwrap();
    assert_eq!(run["evaluation"]["models"].as_array().unwrap().len(), 4);
    assert!(f.dir.join("eval/eval.txt").exists());
}
