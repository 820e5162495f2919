//! Synthetic data, metrics and reporting.

pub mod histogram;
pub mod io;
pub mod metrics;
pub mod sample;
pub mod stratify;
pub mod synth;

pub use histogram::{histogram, histogram_csv, precision_histogram, HistogramBin};
pub use metrics::{f1_score, rank_of, ClassMetrics, MetricsReport};
pub use sample::ModalitySample;
pub use stratify::{stratify, stratify_scores, GroupStats, StratifiedGroups, DEFAULT_CUTS};
pub use synth::{apply_text_dropout, Dataset, SynthSpec};
