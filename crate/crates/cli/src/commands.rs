use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use trodo_core::benchmark::dataset::{load_dataset, save_dataset};
use trodo_core::benchmark::protocol::{run_protocol, EvalMode, EvalProtocol};
use trodo_core::benchmark::train::TrainMode;
use trodo_core::benchmark::zoo::{build_zoo, load_zoo_models, save_zoo, ZooConfig};
use trodo_core::calibration::{calibrate, CalibrationOptions, CalibrationResult};
use trodo_core::model_io::atomic_write;
use trodo_core::scanner::{scan, ScanConfig, Verdict};
use trodo_core::{load_model, ModelBundle};

use crate::config::{existing, resolve_seed, ConfigEcho, RunConfig};
use crate::{AttackArgs, Cli, Command, Preset, ReportFormat, UsageError, ZooCommand};

pub const EXIT_TROJANED: u8 = 3;

struct Ctx {
    file: RunConfig,
    seed: Option<u64>,
    jobs: Option<usize>,
    out: Option<PathBuf>,
    report: ReportFormat,
}

impl Ctx {
    fn out_dir(&self, default: &str) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .or_else(|| self.file.out.clone())
            .unwrap_or_else(|| PathBuf::from(default));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn emit(&self, text: &str, json: &impl Serialize) -> Result<()> {
        match self.report {
            ReportFormat::Text => println!("{}", text.trim_end()),
            ReportFormat::Json => println!("{}", serde_json::to_string_pretty(json)?),
        }
        Ok(())
    }
}

pub fn dispatch(cli: Cli) -> Result<u8> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = resolve_seed(cli.seed, file.seed)?;
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(UsageError("--jobs must be at least 1".into()).into());
        }
        // Fails only if a pool already exists, which keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let ctx = Ctx {
        file,
        seed,
        jobs: cli.jobs,
        out: cli.out,
        report: cli.report,
    };
    match cli.command {
        Command::Calibrate(a) => run_calibrate(&ctx, a),
        Command::Scan(a) => run_scan(&ctx, a),
        Command::Zoo(ZooCommand::Build(a)) => run_zoo_build(&ctx, a),
        Command::Zoo(ZooCommand::Eval(a)) => run_zoo_eval(&ctx, a),
        Command::Selftest => Ok(crate::selftest::run(ctx.report == ReportFormat::Json)),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

fn apply_calibration_overrides(opts: &mut CalibrationOptions, a: &AttackArgs) -> Result<()> {
    if let Some(g) = a.gamma {
        opts.gamma = g;
        opts.gamma_margin = None;
    }
    if let Some(m) = a.gamma_margin {
        opts.gamma_margin = Some(m);
    }
    if let Some(s) = a.steps {
        opts.attack.steps = s;
    }
    if let Some(e) = a.epsilon {
        if !(e > 0.0 && e.is_finite()) {
            return Err(UsageError(format!("--epsilon {e} must be > 0")).into());
        }
        opts.fixed_epsilon = Some(e);
    }
    Ok(())
}

fn run_calibrate(ctx: &Ctx, a: crate::CalibrateArgs) -> Result<u8> {
    let mut section = ctx.file.calibrate.clone().unwrap_or_default();
    section.surrogate = Some(existing(a.surrogate.or(section.surrogate), "surrogate model")?);
    section.sources = Some(existing(a.sources.or(section.sources), "sources dataset")?);
    if let Some(m) = a.attack.mode {
        section.mode = m.into();
    }
    apply_calibration_overrides(&mut section.options, &a.attack)?;
    if let Some(s) = ctx.seed {
        section.options.seed = s;
    }
    let out = ctx.out_dir(".")?;
    let surrogate = load_model(section.surrogate.as_ref().unwrap())?;
    let sources = load_dataset(section.sources.as_ref().unwrap())?;
    let cal = calibrate(&surrogate, &sources.images, &section.options)?;
    let seed = section.options.seed;
    write_json(&out.join("calibration.json"), &cal)?;
    write_json(&out.join("calibrate.config.json"), &ConfigEcho::new("calibrate", seed, &section))?;
    let text = format!(
        "epsilon={:.6} tau={:.6} gamma={:.6} mu={:.6} sigma={:.6} n_baseline={}",
        cal.epsilon, cal.tau, cal.gamma, cal.null_fit.mu, cal.null_fit.sigma, cal.n_baseline
    );
    ctx.emit(&text, &cal)?;
    Ok(0)
}

fn read_calibration(path: &Path) -> Result<CalibrationResult> {
    let text = std::fs::read_to_string(path)?;
    CalibrationResult::from_json(&text)
        .map_err(|e| UsageError(format!("malformed calibration {}: {e}", path.display())).into())
}

fn run_scan(ctx: &Ctx, a: crate::ScanArgs) -> Result<u8> {
    if a.attack.gamma.is_some() || a.attack.gamma_margin.is_some() {
        return Err(UsageError("--gamma applies to calibrate and zoo eval, not scan".into()).into());
    }
    let mut section = ctx.file.scan.clone().unwrap_or_default();
    section.model = Some(existing(a.model.or(section.model), "model")?);
    section.calibration = Some(existing(a.calibration.or(section.calibration), "calibration")?);
    section.sources = Some(existing(a.sources.or(section.sources), "sources dataset")?);
    if let Some(m) = a.attack.mode {
        section.mode = m.into();
    }
    if let Some(b) = a.batch_size {
        section.batch_size = b;
    }
    if a.attack.steps.is_some() {
        section.steps = a.attack.steps;
    }
    if a.attack.epsilon.is_some() {
        section.epsilon = a.attack.epsilon;
    }
    if section.batch_size == 0 {
        return Err(UsageError("--batch-size must be at least 1".into()).into());
    }
    let cal = read_calibration(section.calibration.as_ref().unwrap())?;
    let model = load_model(section.model.as_ref().unwrap())?;
    // Offset so a scan never reuses the calibration's OOD samples.
    let seed = ctx.seed.unwrap_or(0);
    let mut cfg = ScanConfig::new(
        section.mode.scan_mode(section.sources.clone().unwrap()),
        cal.clone(),
        seed.wrapping_add(1),
    );
    cfg.batch_size = section.batch_size;
    if section.steps.is_some() || section.epsilon.is_some() {
        let mut attack = cal.attack.clone();
        if let Some(s) = section.steps {
            attack.steps = s;
        }
        if let Some(e) = section.epsilon {
            attack.epsilon = e;
        }
        cfg.attack = Some(attack);
    }
    let out = ctx.out_dir(".")?;
    let report = scan(&model, &cfg)?;
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("scan.config.json"), &ConfigEcho::new("scan", seed, &section))?;
    ctx.emit(&report.summary_line(), &report)?;
    Ok(match report.verdict {
        Verdict::Clean => 0,
        Verdict::Trojaned => EXIT_TROJANED,
    })
}

fn run_zoo_build(ctx: &Ctx, a: crate::ZooBuildArgs) -> Result<u8> {
    let mut cfg = match &ctx.file.zoo {
        Some(z) => z.clone(),
        None => match a.preset {
            Preset::Desk => ZooConfig::desk(),
            Preset::Full => ZooConfig::default(),
        },
    };
    if a.adversarial {
        cfg.train.mode = TrainMode::adversarial_default();
    }
    if let Some(n) = a.n_clean {
        cfg.n_clean = n;
    }
    if let Some(n) = a.n_trojaned {
        cfg.n_trojaned_per_attack = n;
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let out = ctx.out_dir("zoo")?;
    let jobs = ctx.jobs.unwrap_or_else(rayon::current_num_threads);
    let mut zoo = build_zoo(&cfg, jobs)?;
    save_zoo(&mut zoo, &out)?;
    for mode in [EvalMode::Trodo, EvalMode::TrodoZero] {
        let sources = EvalProtocol::desk(mode).sources(&zoo.data.train)?;
        save_dataset(&sources, out.join(sources_file(mode)))?;
    }
    write_json(&out.join("zoo_build.config.json"), &ConfigEcho::new("zoo build", cfg.seed, &cfg))?;
    let m = &zoo.manifest;
    let admitted = m.entries.iter().filter(|e| e.admitted).count();
    let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    let text = format!(
        "models={} admitted={} surrogate_accuracy={:.4} clean_accuracy={} trojaned_accuracy={} gap={}\nmanifest={}",
        m.entries.len(),
        admitted,
        m.surrogate.clean_accuracy,
        show(m.mean_clean_accuracy),
        show(m.mean_trojaned_accuracy),
        show(m.accuracy_gap()),
        out.join("manifest.json").display()
    );
    ctx.emit(&text, m)?;
    Ok(0)
}

pub fn sources_file(mode: EvalMode) -> &'static str {
    match mode {
        EvalMode::Trodo => "benign.trodod",
        EvalMode::TrodoZero => "validation.trodod",
    }
}

fn run_zoo_eval(ctx: &Ctx, a: crate::ZooEvalArgs) -> Result<u8> {
    let mut section = ctx.file.eval.clone().unwrap_or_default();
    let manifest = existing(a.manifest.or(section.manifest.clone()), "zoo manifest")?;
    section.manifest = Some(manifest.clone());
    if let Some(m) = a.attack.mode {
        section.mode = m.into();
    }
    let mut protocol = section
        .protocol
        .clone()
        .unwrap_or_else(|| EvalProtocol::desk(section.mode));
    protocol.mode = section.mode;
    apply_calibration_overrides(&mut protocol.calibration, &a.attack)?;
    if let Some(s) = ctx.seed {
        protocol.calibration.seed = s;
        protocol.scan_seed = s.wrapping_add(1);
    }
    section.protocol = Some(protocol.clone());
    let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let (man, models) = load_zoo_models(&manifest)?;
    let surrogate = load_model(dir.join(&man.surrogate.path))?;
    let train = load_dataset(dir.join("train.trodod"))?;
    let sources = protocol.sources(&train)?;
    let scored: Vec<(&str, &ModelBundle)> = models.iter().map(|(e, m)| (e.id.as_str(), m)).collect();
    let run = run_protocol(&surrogate, &scored, &sources, &protocol)?;
    let out = ctx.out_dir(".")?;
    let table = run.evaluation.table();
    write_json(&out.join("eval.json"), &run)?;
    atomic_write(&out.join("eval.txt"), table.as_bytes())?;
    write_json(
        &out.join("zoo_eval.config.json"),
        &ConfigEcho::new("zoo eval", protocol.calibration.seed, &section),
    )?;
    ctx.emit(&table, &run)?;
    Ok(0)
}
