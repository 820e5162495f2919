//! Synthetic two-modality dataset with controllable noise.
//!
//! Each class owns an image prototype and a token distribution. A token
//! distribution draws from the class's signature ids with probability
//! `signal_rate` and from a pool of ids shared by all classes otherwise.
//! Samples are prototype plus clamped Gaussian pixel noise, and a bag of
//! tokens subject to overlap, dropout and label noise.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sample::ModalitySample;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Fraction of each class's samples assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    /// `[h, w, channels]`.
    pub image_dims: [usize; 3],
    /// Prototype pixels are `0.5 + contrast * (u - 0.5)`, `u ~ U(0, 1)`.
    pub contrast: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub image_noise: f64,
    pub tokens_per_sample: usize,
    pub vocab_size: usize,
    /// Signature ids owned by each class.
    pub signature_tokens: usize,
    /// Probability that a token comes from the class signature rather than
    /// the shared pool.
    pub signal_rate: f64,
    /// Probability that a sample's bag is contaminated by another class:
    /// each of its tokens is then drawn from that class's distribution
    /// with probability 1/2.
    pub text_overlap: f64,
    /// Probability that a sample has no text.
    pub text_dropout: f64,
    /// Probability that a sample's label is replaced by another class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            samples_per_class: 200,
            image_dims: [8, 8, 3],
            contrast: 1.0,
            image_noise: 0.3,
            tokens_per_sample: 6,
            vocab_size: 200,
            signature_tokens: 4,
            signal_rate: 0.6,
            text_overlap: 0.3,
            text_dropout: 0.1,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<ModalitySample>,
    pub test: Vec<ModalitySample>,
}

fn unit_interval(field: &str, v: f64, closed_top: bool) -> Result<()> {
    let ok = if closed_top {
        (0.0..=1.0).contains(&v)
    } else {
        (0.0..1.0).contains(&v)
    };
    if ok {
        Ok(())
    } else {
        let range = if closed_top { "[0, 1]" } else { "[0, 1)" };
        Err(Error::config(field, format!("{v} is outside {range}")))
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("synth.classes", "must be >= 2"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("synth.samples_per_class", "must be >= 1"));
        }
        if self.image_dims.contains(&0) {
            return Err(Error::config("synth.image_dims", "extents must be >= 1"));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::config("synth.contrast", format!("{} is outside (0, 1]", self.contrast)));
        }
        if !(self.image_noise >= 0.0 && self.image_noise.is_finite()) {
            return Err(Error::config("synth.image_noise", "must be finite and >= 0"));
        }
        if self.tokens_per_sample == 0 || self.signature_tokens == 0 {
            return Err(Error::config("synth.tokens_per_sample", "token counts must be >= 1"));
        }
        if self.vocab_size <= self.classes * self.signature_tokens {
            return Err(Error::config(
                "synth.vocab_size",
                format!(
                    "needs more than classes * signature_tokens = {} ids",
                    self.classes * self.signature_tokens
                ),
            ));
        }
        unit_interval("synth.signal_rate", self.signal_rate, true)?;
        unit_interval("synth.text_overlap", self.text_overlap, false)?;
        // A dropout of exactly 1 is accepted: it yields a text-free dataset.
        unit_interval("synth.text_dropout", self.text_dropout, true)?;
        unit_interval("synth.label_noise", self.label_noise, false)?;
        Ok(())
    }

    fn signature(&self, class: usize) -> std::ops::Range<u32> {
        let s = self.signature_tokens;
        (class * s) as u32..((class + 1) * s) as u32
    }

    fn draw_token(&self, class: usize, rng: &mut impl Rng) -> u32 {
        if rng.random::<f64>() < self.signal_rate {
            rng.random_range(self.signature(class))
        } else {
            let shared = (self.classes * self.signature_tokens) as u32;
            rng.random_range(shared..self.vocab_size as u32)
        }
    }

    fn other_class(&self, class: usize, rng: &mut impl Rng) -> usize {
        let others: Vec<usize> = (0..self.classes).filter(|&c| c != class).collect();
        *others.choose(rng).expect("at least two classes")
    }

    /// One image prototype per class.
    pub fn prototypes(&self) -> Vec<Tensor> {
        let mut r = rng::stream(self.seed, "data/prototypes");
        let n: usize = self.image_dims.iter().product();
        (0..self.classes)
            .map(|_| {
                let px: Vec<f64> = (0..n)
                    .map(|_| 0.5 + self.contrast * (r.random::<f64>() - 0.5))
                    .collect();
                Tensor::build(self.image_dims.to_vec(), px).expect("dims validated")
            })
            .collect()
    }

    fn sample(&self, class: usize, proto: &Tensor, r: &mut impl Rng) -> ModalitySample {
        let noise = Normal::new(0.0, self.image_noise.max(0.0)).expect("finite sigma");
        let image = if self.image_noise > 0.0 {
            let px: Vec<f64> = proto
                .values()
                .iter()
                .map(|p| (p + noise.sample(r)).clamp(0.0, 1.0))
                .collect();
            Tensor::build(proto.dims().to_vec(), px).expect("same shape")
        } else {
            proto.clone()
        };
        let mixer = (r.random::<f64>() < self.text_overlap).then(|| self.other_class(class, r));
        let tokens: Vec<u32> = (0..self.tokens_per_sample)
            .map(|_| match mixer {
                Some(o) if r.random::<bool>() => self.draw_token(o, r),
                _ => self.draw_token(class, r),
            })
            .collect();
        let label = if r.random::<f64>() < self.label_noise {
            self.other_class(class, r)
        } else {
            class
        };
        let mut s = ModalitySample::new(image, tokens, label);
        if r.random::<f64>() < self.text_dropout {
            s.drop_text();
        }
        s
    }

    /// Stratified 75/25 split, deterministic in `seed`. Each class draws
    /// from its own sub-stream.
    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let protos = self.prototypes();
        let n_train = ((self.samples_per_class as f64) * TRAIN_FRACTION).round() as usize;
        let mut ds = Dataset {
            train: Vec::new(),
            test: Vec::new(),
        };
        for (class, proto) in protos.iter().enumerate() {
            let mut r = rng::stream(self.seed, &format!("data/class{class}"));
            for i in 0..self.samples_per_class {
                let s = self.sample(class, proto, &mut r);
                if i < n_train {
                    ds.train.push(s);
                } else {
                    ds.test.push(s);
                }
            }
        }
        Ok(ds)
    }
}

/// Remove text from each sample independently with probability `rate`.
pub fn apply_text_dropout(samples: &mut [ModalitySample], rate: f64, seed: u64) {
    let mut r = rng::stream(seed, "data/test-dropout");
    for s in samples {
        if r.random::<f64>() < rate {
            s.drop_text();
        }
    }
}
