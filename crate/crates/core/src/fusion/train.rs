//! Fixed-rate mini-batch gradient descent.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{is_encoder_param, Model};
use crate::data::ModalitySample;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn;
use crate::rng;
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once the epoch-mean objective is at or below this.
    pub epsilon: f64,
    /// `None` trains on the full set per step.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Replace tokens by the mask id with the text encoder's mask fraction.
    pub mask_tokens: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            max_epochs: 100,
            epsilon: 1e-3,
            batch_size: None,
            seed: 0,
            mask_tokens: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and >= 0"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be >= 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::config("train.epsilon", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy of the fused predictions seen during the epoch's forward
    /// passes.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<EpochStats>,
    pub converged: bool,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.trace.len()
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |e| e.mean_loss)
    }

    pub fn final_train_accuracy(&self) -> f64 {
        self.trace.last().map_or(0.0, |e| e.train_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,train_accuracy\n");
        for e in &self.trace {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.mean_loss, e.train_accuracy));
        }
        s
    }
}

/// Graph errors from non-finite values become a divergence report.
fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Train `model` in place. Epochs are numbered from 1.
pub fn train(model: &mut Model, data: &[ModalitySample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("train", "training set is empty"));
    }
    let classes = model.config().fusion.classes;
    for s in data {
        s.validate(classes)?;
    }
    let freeze = model.config().fusion.freeze_encoders;
    let trainable = move |name: &str| !(freeze && is_encoder_param(name));
    let batch = cfg.batch_size.unwrap_or(data.len()).min(data.len());
    let mut shuffle = rng::stream(cfg.seed, "shuffle");
    let mut mask = rng::stream(cfg.seed, "mask");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        if batch < data.len() {
            order.shuffle(&mut shuffle);
        }
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(batch) {
            let samples: Vec<&ModalitySample> = idx.iter().map(|&i| &data[i]).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let (images, bags) = model
                .batch_inputs(&samples, cfg.mask_tokens.then_some(&mut mask))?;
            let mut g = Graph::new();
            let b = model.params().bind(&mut g, trainable);
            let (xi, xt) = (g.constant(images), g.constant(bags));
            let step = (|| -> Result<f64> {
                let out = model.forward(&mut g, &b, xi, xt)?;
                let loss = model.loss(&mut g, &out, &labels)?;
                let fused = g.value(out.fused).values();
                correct += fused
                    .chunks(classes)
                    .zip(&labels)
                    .filter(|(p, &y)| nn::argmax(p) == y)
                    .count();
                g.backward(loss)?;
                Ok(g.value(loss).item().expect("scalar loss"))
            })()
            .map_err(diverged(epoch))?;
            if !step.is_finite() {
                return Err(Error::Diverged { epoch, loss: step });
            }
            loss_sum += step * idx.len() as f64;
            model.params_mut().apply_gradients(&g, &b, cfg.learning_rate);
            if model.params().iter().any(|(_, t)| !t.all_finite()) {
                return Err(Error::Diverged { epoch, loss: step });
            }
        }
        let mean_loss = loss_sum / data.len() as f64;
        trace.push(EpochStats {
            epoch,
            mean_loss,
            train_accuracy: correct as f64 / data.len() as f64,
        });
        if mean_loss <= cfg.epsilon {
            return Ok(TrainReport { trace, converged: true });
        }
    }
    Ok(TrainReport { trace, converged: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::model::tests::tiny;
    use crate::fusion::{FusionMode, ModelConfig};

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (cfg, spec) = tiny(FusionMode::Dynamic);
        let ds = spec.generate().unwrap();
        let mut model = Model::init(cfg, 0).unwrap();
        let before = model.params().clone();
        let tc = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 3,
            ..Default::default()
        };
        let r = train(&mut model, &ds.train, &tc).unwrap();
        assert_eq!(model.params(), &before);
        assert_eq!(r.epochs_run(), 3);
        assert!(r.trace.windows(2).all(|w| w[0].mean_loss == w[1].mean_loss));
    }

    #[test]
    fn deterministic_given_seed() {
        let (cfg, spec) = tiny(FusionMode::Early);
        let ds = spec.generate().unwrap();
        let tc = TrainConfig {
            max_epochs: 3,
            batch_size: Some(4),
            mask_tokens: true,
            ..Default::default()
        };
        let run = || {
            let mut m = Model::init(cfg.clone(), 0).unwrap();
            let r = train(&mut m, &ds.train, &tc).unwrap();
            (m, r)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_names_epoch() {
        let (cfg, spec) = tiny(FusionMode::Late);
        let ds = spec.generate().unwrap();
        let mut model = Model::init(cfg, 0).unwrap();
        let tc = TrainConfig {
            learning_rate: f64::MAX,
            ..Default::default()
        };
        match train(&mut model, &ds.train, &tc) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn frozen_encoders_do_not_move() {
        let (mut cfg, spec) = tiny(FusionMode::Dynamic);
        cfg.fusion.freeze_encoders = true;
        let ds = spec.generate().unwrap();
        let mut model = Model::init(cfg, 0).unwrap();
        let before = model.params().clone();
        train(&mut model, &ds.train, &TrainConfig { max_epochs: 2, ..Default::default() }).unwrap();
        for (name, t) in model.params().iter() {
            let unchanged = before.get(name).unwrap() == t;
            assert_eq!(unchanged, is_encoder_param(name), "{name}");
        }
    }

    #[test]
    fn rejects_bad_config_and_empty_data() {
        let mut model = Model::init(ModelConfig::default(), 0).unwrap();
        assert!(train(&mut model, &[], &TrainConfig::default()).is_err());
        let bad = TrainConfig {
            batch_size: Some(0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
