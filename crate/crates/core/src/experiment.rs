//! Reproducible experiment drivers: ablation across fusion modes and the
//! warm-start transfer trial.
//!
//! All randomness comes from the per-seed root through named streams. The
//! dataset of a seed is shared by every arm; each arm draws its own
//! initialisation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{apply_text_dropout, stratify, Dataset, MetricsReport, ModalitySample, StratifiedGroups, SynthSpec};
use crate::encoders::FULL_FEATURE_DIM;
use crate::error::{Error, Result};
use crate::fusion::{train, FusionMode, Model, ModelConfig, TrainConfig, TrainReport};
use crate::rng;

pub const MIN_ABLATION_SEEDS: usize = 5;
pub const THREADS_ENV: &str = "FUSIONET_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmStartSpec {
    pub mode: FusionMode,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub cuts: (f64, f64),
    /// Leave classifier heads at their fresh initialization instead of
    /// copying them from the source model.
    pub reset_heads: bool,
}

impl Default for WarmStartSpec {
    fn default() -> Self {
        WarmStartSpec {
            mode: FusionMode::Early,
            epsilon: 0.05,
            max_epochs: 150,
            cuts: crate::data::DEFAULT_CUTS,
            reset_heads: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub report_formats: Vec<ReportFormat>,
    pub top_k: usize,
    /// Extra evaluation with text removed from this fraction of test
    /// samples. Zero disables it.
    pub test_text_dropout: f64,
    pub warm_start: WarmStartSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::noisy_complementary()
    }
}

impl ExperimentConfig {
    /// Both modalities partially informative with complementary failures.
    pub fn noisy_complementary() -> Self {
        let synth = SynthSpec {
            classes: 10,
            samples_per_class: 200,
            image_dims: [8, 8, 3],
            contrast: 1.0,
            image_noise: 0.5,
            signal_rate: 0.75,
            text_overlap: 0.3,
            text_dropout: 0.1,
            ..Default::default()
        };
        ExperimentConfig {
            synth,
            model: ModelConfig::default(),
            train: TrainConfig {
                learning_rate: 0.1,
                max_epochs: 30,
                epsilon: 1e-3,
                batch_size: Some(32),
                seed: 0,
                mask_tokens: false,
            },
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("runs"),
            report_formats: vec![ReportFormat::Json, ReportFormat::Csv],
            top_k: 5,
            test_text_dropout: 0.0,
            warm_start: WarmStartSpec::default(),
        }
    }

    /// Images reduced to noise; text carries nearly all the signal.
    pub fn single_modality_informative() -> Self {
        let mut c = Self::noisy_complementary();
        c.synth.image_noise = 5.0;
        c.synth.contrast = 0.2;
        c
    }

    /// The wide feature width of the full-size model.
    pub fn full_scale() -> Self {
        let mut c = Self::noisy_complementary();
        c.model.fusion.feature_dim = FULL_FEATURE_DIM;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "noisy-complementary" => Ok(Self::noisy_complementary()),
            "single-modality-informative" => Ok(Self::single_modality_informative()),
            "full-scale" => Ok(Self::full_scale()),
            _ => Err(Error::config("preset", format!("unknown preset `{name}`"))),
        }
    }

    /// Copy input extents, vocabulary and class count from the data spec
    /// into the model and validate everything.
    pub fn resolve(mut self) -> Result<Self> {
        self.model.image.input = self.synth.image_dims;
        self.model.text.vocab_size = self.synth.vocab_size;
        self.model.fusion.classes = self.synth.classes;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.model.image.input_dims() != self.synth.image_dims {
            return Err(Error::config(
                "model.image",
                "scaled input extents must match synth.image_dims",
            ));
        }
        if self.model.text.vocab_size != self.synth.vocab_size || self.model.fusion.classes != self.synth.classes {
            return Err(Error::config("model", "vocabulary and class count must match synth"));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.test_text_dropout) {
            return Err(Error::config("test_text_dropout", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        SynthSpec { seed, ..self.synth.clone() }.generate()
    }

    pub fn model_config(&self, mode: FusionMode) -> ModelConfig {
        let mut m = self.model.clone();
        m.fusion.mode = mode;
        m
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

/// Initialisation seed of one arm.
pub fn arm_seed(seed: u64, mode: FusionMode) -> u64 {
    rng::stream_seed(seed, mode.name())
}

/// Worker count from [`THREADS_ENV`], defaulting to the available cores.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Apply `f` to every item with at most `threads` workers. Output order
/// follows input order.
pub fn parallel_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<U>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                results.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots.into_iter().map(|u| u.expect("every item processed")).collect()
}

/// One trained and evaluated arm.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub mode: FusionMode,
    pub seed: u64,
    pub model: Model,
    pub train: TrainReport,
    pub metrics: MetricsReport,
    /// Accuracy with test text dropped at `test_text_dropout`.
    pub dropout_accuracy: Option<f64>,
}

pub fn run_arm(cfg: &ExperimentConfig, mode: FusionMode, seed: u64, data: &Dataset) -> Result<ArmResult> {
    let mut model = Model::init(cfg.model_config(mode), arm_seed(seed, mode))?;
    let report = train(&mut model, &data.train, &cfg.train_config(seed))?;
    let metrics = model.evaluate(&data.test, cfg.top_k)?;
    let dropout_accuracy = if cfg.test_text_dropout > 0.0 {
        let test = dropped_test(&data.test, cfg.test_text_dropout, seed);
        Some(model.evaluate(&test, cfg.top_k)?.accuracy)
    } else {
        None
    };
    Ok(ArmResult {
        mode,
        seed,
        model,
        train: report,
        metrics,
        dropout_accuracy,
    })
}

pub fn dropped_test(test: &[ModalitySample], rate: f64, seed: u64) -> Vec<ModalitySample> {
    let mut t = test.to_vec();
    apply_text_dropout(&mut t, rate, seed);
    t
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAccuracies {
    pub late: Vec<f64>,
    pub early: Vec<f64>,
    pub dynamic: Vec<f64>,
    pub median_late: f64,
    pub median_early: f64,
    pub median_dynamic: f64,
}

impl ModeAccuracies {
    fn new(late: Vec<f64>, early: Vec<f64>, dynamic: Vec<f64>) -> Self {
        ModeAccuracies {
            median_late: median(&late),
            median_early: median(&early),
            median_dynamic: median(&dynamic),
            late,
            early,
            dynamic,
        }
    }

    pub fn get(&self, mode: FusionMode) -> &[f64] {
        match mode {
            FusionMode::Late => &self.late,
            FusionMode::Early => &self.early,
            FusionMode::Dynamic => &self.dynamic,
        }
    }

    pub fn median(&self, mode: FusionMode) -> f64 {
        match mode {
            FusionMode::Late => self.median_late,
            FusionMode::Early => self.median_early,
            FusionMode::Dynamic => self.median_dynamic,
        }
    }

    /// `dynamic >= early >= late` on the medians.
    pub fn ordered(&self) -> bool {
        self.median_dynamic >= self.median_early && self.median_early >= self.median_late
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvalidSeed {
    pub seed: u64,
    pub mode: FusionMode,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    /// Seeds whose three arms all trained.
    pub seeds: Vec<u64>,
    pub accuracy: ModeAccuracies,
    pub verdict: bool,
    pub test_text_dropout: f64,
    pub dropout_accuracy: Option<ModeAccuracies>,
    pub invalid: Vec<InvalidSeed>,
}

impl AblationResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,late,early,dynamic\n");
        for (i, seed) in self.seeds.iter().enumerate() {
            let a = &self.accuracy;
            s.push_str(&format!("{seed},{},{},{}\n", a.late[i], a.early[i], a.dynamic[i]));
        }
        let a = &self.accuracy;
        s.push_str(&format!("median,{},{},{}\n", a.median_late, a.median_early, a.median_dynamic));
        s
    }
}

/// The three arms of one seed, or the first arm that diverged.
pub type SeedArms = std::result::Result<Vec<ArmResult>, InvalidSeed>;

/// Train and evaluate every mode on every seed. Divergent seeds are
/// excluded from the medians and reported. The per-seed arms are
/// returned alongside the summary.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<(AblationResult, Vec<SeedArms>)> {
    if cfg.seeds.len() < MIN_ABLATION_SEEDS {
        return Err(Error::config(
            "seeds",
            format!("ablation needs at least {MIN_ABLATION_SEEDS} seeds, got {}", cfg.seeds.len()),
        ));
    }
    cfg.validate()?;
    let per_seed = parallel_map(&cfg.seeds, worker_threads(), |&seed| -> Result<SeedArms> {
        let data = cfg.dataset(seed)?;
        let mut arms = Vec::new();
        for mode in FusionMode::ALL {
            match run_arm(cfg, mode, seed, &data) {
                Ok(a) => arms.push(a),
                Err(e @ Error::Diverged { .. }) => {
                    return Ok(Err(InvalidSeed {
                        seed,
                        mode,
                        reason: e.to_string(),
                    }))
                }
                Err(e) => return Err(e),
            }
        }
        Ok(Ok(arms))
    });
    let per_seed: Vec<SeedArms> = per_seed.into_iter().collect::<Result<_>>()?;
    Ok((summarise(cfg, &per_seed), per_seed))
}

pub fn summarise(cfg: &ExperimentConfig, per_seed: &[SeedArms]) -> AblationResult {
    let mut seeds = Vec::new();
    let mut invalid = Vec::new();
    let mut acc: [Vec<f64>; 3] = Default::default();
    let mut drop: [Vec<f64>; 3] = Default::default();
    for s in per_seed {
        match s {
            Ok(arms) => {
                seeds.push(arms[0].seed);
                for (i, a) in arms.iter().enumerate() {
                    acc[i].push(a.metrics.accuracy);
                    if let Some(d) = a.dropout_accuracy {
                        drop[i].push(d);
                    }
                }
            }
            Err(bad) => invalid.push(bad.clone()),
        }
    }
    let [l, e, d] = acc;
    let accuracy = ModeAccuracies::new(l, e, d);
    let dropout_accuracy = (cfg.test_text_dropout > 0.0).then(|| {
        let [l, e, d] = drop;
        ModeAccuracies::new(l, e, d)
    });
    AblationResult {
        verdict: accuracy.ordered(),
        seeds,
        accuracy,
        test_text_dropout: cfg.test_text_dropout,
        dropout_accuracy,
        invalid,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStartTrial {
    pub seed: u64,
    pub groups: StratifiedGroups,
    pub source_epochs: usize,
    pub cold_epochs: usize,
    pub cold_converged: bool,
    pub warm_epochs: usize,
    pub warm_converged: bool,
    pub copied_tensors: usize,
}

impl WarmStartTrial {
    /// Warm start reached epsilon no later than cold start did.
    pub fn success(&self) -> bool {
        self.warm_converged && (!self.cold_converged || self.warm_epochs <= self.cold_epochs)
    }
}

fn subset(samples: &[ModalitySample], classes: &[usize]) -> Vec<ModalitySample> {
    samples.iter().filter(|s| classes.contains(&s.label)).cloned().collect()
}

/// Stratify classes by `reference`, train a source model on the best
/// group, then fit the poor group from scratch and from the source
/// weights. Class indices are kept, so every tensor transfers.
pub fn warm_start_trial(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &Dataset,
    reference: &MetricsReport,
) -> Result<WarmStartTrial> {
    let ws = &cfg.warm_start;
    let groups = stratify(reference, ws.cuts)?;
    let model_cfg = cfg.model_config(ws.mode);
    let tc = TrainConfig {
        epsilon: ws.epsilon,
        max_epochs: ws.max_epochs,
        ..cfg.train_config(seed)
    };
    let best = subset(&data.train, &groups.best.classes);
    let poor = subset(&data.train, &groups.poor.classes);
    let mut source = Model::init(model_cfg.clone(), rng::stream_seed(seed, "warm/source"))?;
    let source_report = train(&mut source, &best, &tc)?;
    let target_seed = rng::stream_seed(seed, "warm/target");
    let mut cold = Model::init(model_cfg.clone(), target_seed)?;
    let cold_report = train(&mut cold, &poor, &tc)?;
    let mut warm = Model::init(model_cfg, target_seed)?;
    let copied = warm
        .params_mut()
        .warm_start_where(source.params(), |n| !(ws.reset_heads && n.contains(".head.")))?;
    let warm_report = train(&mut warm, &poor, &tc)?;
    Ok(WarmStartTrial {
        seed,
        groups,
        source_epochs: source_report.epochs_run(),
        cold_epochs: cold_report.epochs_run(),
        cold_converged: cold_report.converged,
        warm_epochs: warm_report.epochs_run(),
        warm_converged: warm_report.converged,
        copied_tensors: copied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v: Vec<u64> = (0..20).collect();
        assert_eq!(parallel_map(&v, 3, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert_eq!(parallel_map(&v, 1, |x| x + 1)[19], 20);
    }

    #[test]
    fn ablation_needs_five_seeds() {
        let cfg = ExperimentConfig {
            seeds: vec![1],
            ..Default::default()
        };
        let err = run_ablation(&cfg.resolve().unwrap()).unwrap_err();
        assert!(err.to_string().contains("seeds"));
    }

    #[test]
    fn presets_resolve() {
        for name in ["noisy-complementary", "single-modality-informative", "full-scale"] {
            ExperimentConfig::preset(name).unwrap().resolve().unwrap();
        }
        assert!(ExperimentConfig::preset("other").is_err());
    }

    #[test]
    fn config_json_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"seeds":[7]}"#).unwrap();
        assert_eq!(c.seeds, vec![7]);
        assert_eq!(c.synth, ExperimentConfig::default().synth);
    }
}
