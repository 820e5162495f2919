use std::path::{Path, PathBuf};
use std::time::Instant;

use fusionet_core::data::{self, histogram_csv, precision_histogram, MetricsReport, ModalitySample};
use fusionet_core::encoders::ParamSet;
use fusionet_core::experiment::{self, ExperimentConfig, ReportFormat};
use fusionet_core::fusion::{self, Model};
use fusionet_core::{Error, Result};
use serde_json::{json, Map, Value};

use crate::manifest::{check_listed_files, unix_time, OutputDir, RUN_FILE};
use crate::Common;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CHECKPOINT_FILE: &str = "model.fusn";

fn config_error(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Defaults, then the config file or preset, then flags.
pub fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(path), _) => data::io::read_json(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    if let Some(m) = c.mode {
        cfg.model.fusion.mode = m;
    }
    if let Some(b) = c.beta {
        cfg.model.fusion.beta = b;
    }
    if let Some(lr) = c.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(e) = c.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(e) = c.epsilon {
        cfg.train.epsilon = e;
    }
    if let Some(k) = c.topk {
        cfg.top_k = k;
    }
    cfg.resolve()
}

fn meta(pairs: Value) -> Map<String, Value> {
    match pairs {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

fn write_metrics(out: &mut OutputDir, prefix: &str, m: &MetricsReport, formats: &[ReportFormat]) -> Result<()> {
    for f in formats {
        match f {
            ReportFormat::Json => out.write_json(&format!("{prefix}{METRICS_FILE}"), m)?,
            ReportFormat::Csv => out.write(&format!("{prefix}metrics.csv"), m.to_csv().as_bytes())?,
        };
    }
    Ok(())
}

pub fn synth(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let seed = cfg.seeds[0];
    let spec = data::SynthSpec {
        seed,
        ..cfg.synth.clone()
    };
    let ds = spec.generate()?;
    let mut out = OutputDir::create(&cfg.output_dir)?;
    out.write(TRAIN_FILE, data::io::samples_to_jsonl(&ds.train).as_bytes())?;
    out.write(TEST_FILE, data::io::samples_to_jsonl(&ds.test).as_bytes())?;
    println!(
        "wrote {} train and {} test samples to {}",
        ds.train.len(),
        ds.test.len(),
        out.root().display()
    );
    out.finish("synth", meta(json!({ "seed": seed, "spec": spec })))
}

fn load_split(dir: &Path, name: &str) -> Result<Vec<ModalitySample>> {
    let samples = data::io::read_jsonl(&dir.join(name))?;
    if samples.is_empty() {
        return Err(config_error(name, "dataset file is empty"));
    }
    Ok(samples)
}

pub fn train(c: &Common, data_dir: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(c)?;
    let data_dir = data_dir.unwrap_or_else(|| cfg.output_dir.clone());
    let train_set = load_split(&data_dir, TRAIN_FILE)?;
    let test_set = load_split(&data_dir, TEST_FILE)?;
    let seed = cfg.seeds[0];
    let mode = cfg.model.fusion.mode;
    let mut model = Model::init(cfg.model_config(mode), experiment::arm_seed(seed, mode))?;
    let mut copied = None;
    if let Some(path) = &c.warm_start {
        let ckpt = ParamSet::load(path)?;
        copied = Some(model.params_mut().warm_start_from(&ckpt)?);
    }
    if cfg.train.learning_rate == 0.0 {
        eprintln!("warning: learning rate is 0; parameters will not change");
    }
    let started = unix_time();
    let clock = Instant::now();
    let report = fusion::train(&mut model, &train_set, &cfg.train_config(seed))?;
    let wall = clock.elapsed().as_secs_f64();
    let metrics = model.evaluate(&test_set, cfg.top_k)?;
    let mut out = OutputDir::create(&cfg.output_dir)?;
    out.write(CHECKPOINT_FILE, &model.params().to_bytes())?;
    out.write("loss_trace.csv", report.to_csv().as_bytes())?;
    write_metrics(&mut out, "", &metrics, &cfg.report_formats)?;
    println!(
        "{} mode: {} epochs, final loss {:.6}, train accuracy {:.4}, test accuracy {:.4}",
        mode.name(),
        report.epochs_run(),
        report.final_loss(),
        report.final_train_accuracy(),
        metrics.accuracy
    );
    out.finish(
        "train",
        meta(json!({
            "seed": seed,
            "mode": mode,
            "epochs_run": report.epochs_run(),
            "converged": report.converged,
            "final_loss": report.final_loss(),
            "final_train_accuracy": report.final_train_accuracy(),
            "test_accuracy": metrics.accuracy,
            "warm_start": c.warm_start,
            "warm_start_tensors": copied,
            "started_at_unix": started,
            "wall_time_s": wall,
            "config": cfg,
        })),
    )
}

pub fn ablate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let started = unix_time();
    let (result, arms) = experiment::run_ablation(&cfg)?;
    let mut out = OutputDir::create(&cfg.output_dir)?;
    for arm in arms.iter().flatten().flatten() {
        let prefix = format!("seed-{}/{}/", arm.seed, arm.mode.name());
        write_metrics(&mut out, &prefix, &arm.metrics, &cfg.report_formats)?;
        out.write(&format!("{prefix}loss_trace.csv"), arm.train.to_csv().as_bytes())?;
    }
    out.write_json("ablation.json", &result)?;
    out.write("ablation.csv", result.to_csv().as_bytes())?;
    let a = &result.accuracy;
    println!(
        "median accuracy: late {:.4}  early {:.4}  dynamic {:.4}  ordering holds: {}",
        a.median_late, a.median_early, a.median_dynamic, result.verdict
    );
    for bad in &result.invalid {
        println!("seed {} excluded: {} arm: {}", bad.seed, bad.mode.name(), bad.reason);
    }
    out.finish(
        "ablate",
        meta(json!({ "seeds": cfg.seeds, "started_at_unix": started, "config": cfg })),
    )
}

fn parse_cuts(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || config_error("cuts", format!("expected two comma-separated numbers, got `{s}`"));
    match parts.as_slice() {
        [a, b] => Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?)),
        _ => Err(bad()),
    }
}

pub fn stratify(c: &Common, metrics: &Path, cuts: &str) -> Result<()> {
    let cuts = parse_cuts(cuts)?;
    let report: MetricsReport = data::io::read_json(metrics)?;
    let groups = data::stratify(&report, cuts)?;
    let dir = c
        .out
        .clone()
        .unwrap_or_else(|| metrics.parent().unwrap_or(Path::new(".")).to_path_buf());
    let mut out = OutputDir::create(&dir)?;
    out.write_json("groups.json", &groups)?;
    out.write("groups.csv", groups.to_csv().as_bytes())?;
    print!("{}", groups.to_csv());
    out.finish("stratify", meta(json!({ "metrics": metrics, "cuts": cuts })))
}

fn find_files(dir: &Path, name: &str, found: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_files(&p, name, found)?;
        } else if p.file_name().is_some_and(|f| f == name) {
            found.push(p);
        }
    }
    Ok(())
}

pub fn report(c: &Common, dir: &Path, bin_width: f64) -> Result<()> {
    let mut runs = Vec::new();
    find_files(dir, RUN_FILE, &mut runs)?;
    for r in &runs {
        check_listed_files(r)?;
    }
    let mut files = Vec::new();
    find_files(dir, METRICS_FILE, &mut files)?;
    if files.is_empty() {
        return Err(config_error("report", format!("no {METRICS_FILE} under {}", dir.display())));
    }
    let reports = files
        .iter()
        .map(|p| data::io::read_json::<MetricsReport>(p))
        .collect::<Result<Vec<_>>>()?;
    let merged = MetricsReport::merge(&reports)?;
    let bins = precision_histogram(&merged, bin_width)?;
    let out_dir = c.out.clone().unwrap_or_else(|| dir.join("report"));
    let mut out = OutputDir::create(&out_dir)?;
    out.write_json("report.json", &merged)?;
    out.write("precision_histogram.csv", histogram_csv(&bins).as_bytes())?;
    print!("{}", histogram_csv(&bins));
    let sources: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
    out.finish("report", meta(json!({ "sources": sources, "bin_width": bin_width })))
}
