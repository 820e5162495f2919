//! Late, early and entropy-gated dynamic fusion of two modalities.
//!
//! The value-level functions here operate on single samples and are the
//! reference for the batched graph forward in [`model`].

pub mod model;
pub mod train;

pub use model::{ForwardOutput, Model, ModelConfig};
pub use train::{train, EpochStats, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};

use crate::encoders::ParamSet;
use crate::error::{Error, Result};
use crate::nn::prob::SIMPLEX_TOL;
use crate::nn::{self, LogitVector};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Late,
    Early,
    Dynamic,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Late, FusionMode::Early, FusionMode::Dynamic];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Late => "late",
            FusionMode::Early => "early",
            FusionMode::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "late" => Ok(FusionMode::Late),
            "early" => Ok(FusionMode::Early),
            "dynamic" => Ok(FusionMode::Dynamic),
            _ => Err(Error::config("fusion.mode", format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub beta: f64,
    /// Text weight `w_t`; only 1 is accepted.
    pub text_weight: f64,
    pub feature_dim: usize,
    pub classes: usize,
    /// Weight of the unimodal cross-entropy terms added to the dynamic
    /// objective.
    pub aux_weight: f64,
    /// Train only up-samplers and heads.
    pub freeze_encoders: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::Dynamic,
            beta: 0.5,
            text_weight: 1.0,
            feature_dim: crate::encoders::DEFAULT_FEATURE_DIM,
            classes: 10,
            aux_weight: 1.0,
            freeze_encoders: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("fusion.beta", format!("{} is outside [0, 1]", self.beta)));
        }
        if self.text_weight != 1.0 {
            return Err(Error::config("fusion.text_weight", "is fixed at 1"));
        }
        if self.classes < 2 {
            return Err(Error::config("fusion.classes", "must be >= 2"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("fusion.feature_dim", "must be >= 1"));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::config("fusion.aux_weight", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// A class distribution and its Shannon entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub probs: Vec<f64>,
    pub uncertainty: f64,
}

impl Posterior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let uncertainty = nn::shannon_entropy(&probs)?;
        Ok(Posterior { probs, uncertainty })
    }

    pub fn from_logits(z: &LogitVector) -> Self {
        Self::new(nn::stable_softmax(z)).expect("softmax output is a distribution")
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedDecision {
    pub fused: Vec<f64>,
    pub predicted: usize,
    pub text: Option<Posterior>,
    pub visual: Option<Posterior>,
    /// Visual weight `w_v` in dynamic mode.
    pub visual_weight: Option<f64>,
}

impl FusedDecision {
    fn new(fused: Vec<f64>, text: Option<Posterior>, visual: Option<Posterior>, visual_weight: Option<f64>) -> Self {
        FusedDecision {
            predicted: nn::argmax(&fused),
            fused,
            text,
            visual,
            visual_weight,
        }
    }
}

fn same_len(op: &str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::config(op, format!("class counts differ: {a} vs {b}")))
    }
}

/// `sigmoid(u) - beta`.
pub fn visual_weight(uncertainty: f64, beta: f64) -> f64 {
    nn::sigmoid(uncertainty) - beta
}

/// Logits `feature · W + b` from the head `{prefix}.w`, `{prefix}.b`.
pub fn classify_head(feature: &Tensor, params: &ParamSet, prefix: &str) -> Result<LogitVector> {
    let get = |leaf: &str| {
        params
            .get(&format!("{prefix}.{leaf}"))
            .ok_or_else(|| Error::config(format!("{prefix}.{leaf}"), "missing head parameter"))
    };
    let (w, b) = (get("w")?, get("b")?);
    let (d, c) = (w.dims()[0], w.dims()[1]);
    if feature.dims() != [d] || b.dims() != [c] {
        return Err(Error::config(
            format!("{prefix}.w"),
            format!("head expects a [{d}] feature, got {}", feature.shape()),
        ));
    }
    let z = crate::graph::matmul_raw(feature.values(), w.values(), 1, d, c);
    let z: Vec<f64> = z.iter().zip(b.values()).map(|(a, b)| a + b).collect();
    LogitVector::from_slice(&z)
}

/// `wt * ft + wv * fv`.
pub fn weighted_fuse(ft: &Tensor, fv: &Tensor, wt: f64, wv: f64) -> Result<Tensor> {
    if ft.shape() != fv.shape() || ft.dims().len() != 1 {
        return Err(Error::config(
            "weighted_fuse",
            format!("need equal rank-1 features, got {} and {}", ft.shape(), fv.shape()),
        ));
    }
    let v: Vec<f64> = ft.values().iter().zip(fv.values()).map(|(a, b)| wt * a + wv * b).collect();
    Ok(Tensor::vector(&v)?)
}

/// `softmax(p_t + (sigmoid(H(p_t)) - beta) * softmax(z_v))` with
/// `p_t = softmax(z_t)`.
pub fn dynamic_fuse(text_logits: &LogitVector, visual_logits: &LogitVector, beta: f64) -> Result<FusedDecision> {
    same_len("dynamic_fuse", text_logits.len(), visual_logits.len())?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config("beta", format!("{beta} is outside [0, 1]")));
    }
    let pt = Posterior::from_logits(text_logits);
    let pv = Posterior::from_logits(visual_logits);
    let wv = visual_weight(pt.uncertainty, beta);
    let pre: Vec<f64> = pt.probs.iter().zip(&pv.probs).map(|(t, v)| t + wv * v).collect();
    let fused = nn::stable_softmax(&LogitVector::from_slice(&pre)?);
    Ok(FusedDecision::new(fused, Some(pt), Some(pv), Some(wv)))
}

/// Unweighted mean of the two posteriors.
pub fn late_fuse(text: &Posterior, visual: &Posterior) -> Result<FusedDecision> {
    same_len("late_fuse", text.len(), visual.len())?;
    let fused: Vec<f64> = text.probs.iter().zip(&visual.probs).map(|(t, v)| 0.5 * (t + v)).collect();
    Ok(FusedDecision::new(fused, Some(text.clone()), Some(visual.clone()), None))
}

/// Softmax of the `joint.head` applied to `[ft, fv]`.
pub fn early_fuse(ft: &Tensor, fv: &Tensor, params: &ParamSet) -> Result<FusedDecision> {
    if ft.dims().len() != 1 || fv.dims().len() != 1 {
        return Err(Error::config("early_fuse", "features must be rank 1"));
    }
    let mut joint = ft.values().to_vec();
    joint.extend_from_slice(fv.values());
    let z = classify_head(&Tensor::vector(&joint)?, params, model::JOINT_HEAD)?;
    Ok(FusedDecision::new(nn::stable_softmax(&z), None, None, None))
}

/// True when `p` is a distribution within [`SIMPLEX_TOL`].
pub fn is_distribution(p: &[f64]) -> bool {
    p.iter().all(|&v| v >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
}
