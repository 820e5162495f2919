//! The full two-branch model: encoders, up-samplers, heads and fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FusedDecision, FusionConfig, FusionMode, Posterior};
use crate::data::ModalitySample;
use crate::encoders::{Bindings, ImageEncoderConfig, Modality, ParamSet, TextEncoderConfig, Upsampler};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::prob::PROB_FLOOR;
use crate::nn::{self, ActivationKind};
use crate::rng;
use crate::tensor::Tensor;

pub const TEXT_HEAD: &str = "text.head";
pub const VISUAL_HEAD: &str = "visual.head";
pub const JOINT_HEAD: &str = "joint.head";

/// Samples per graph during batched prediction.
const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        self.fusion.validate()
    }

    pub fn visual_upsampler(&self) -> Upsampler {
        Upsampler {
            modality: Modality::Visual,
            in_dim: self.image.output_dims()[2],
            out_dim: self.fusion.feature_dim,
        }
    }

    pub fn text_upsampler(&self) -> Upsampler {
        Upsampler {
            modality: Modality::Textual,
            in_dim: self.text.hidden_dim,
            out_dim: self.fusion.feature_dim,
        }
    }
}

/// Graph handles produced by [`Model::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub text_probs: Option<Var>,
    pub visual_probs: Option<Var>,
    /// `[n]` visual weights in dynamic mode.
    pub visual_weight: Option<Var>,
    /// `[n, c]` fused distributions.
    pub fused: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
}

/// Encoder tensors, as opposed to up-samplers and heads.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("image.") || name.starts_with("text.embed") || name.starts_with("text.hidden")
}

fn head_params(params: &mut ParamSet, prefix: &str, d: usize, c: usize, rng: &mut impl Rng) -> Result<()> {
    params.insert_he(format!("{prefix}.w"), vec![d, c], d, rng)?;
    params.insert_zeros(format!("{prefix}.b"), vec![c])
}

fn head(g: &mut Graph, p: &Bindings, x: Var, prefix: &str) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    Ok(nn::linear(g, x, w, b)?)
}

impl Model {
    /// Fresh weights drawn from the `init` stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "init");
        let mut params = ParamSet::new();
        config.image.init_params(&mut params, &mut r)?;
        config.text.init_params(&mut params, &mut r)?;
        config.visual_upsampler().init_params(&mut params, &mut r)?;
        config.text_upsampler().init_params(&mut params, &mut r)?;
        let (d, c) = (config.fusion.feature_dim, config.fusion.classes);
        match config.fusion.mode {
            FusionMode::Early => head_params(&mut params, JOINT_HEAD, 2 * d, c, &mut r)?,
            FusionMode::Late | FusionMode::Dynamic => {
                head_params(&mut params, TEXT_HEAD, d, c, &mut r)?;
                head_params(&mut params, VISUAL_HEAD, d, c, &mut r)?;
            }
        }
        Ok(Model { config, params })
    }

    /// Wrap existing weights. Every tensor the configuration needs must be
    /// present with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut model = Model::init(config, 0)?;
        let copied = model.params.warm_start_from(&params)?;
        if copied != model.params.len() {
            let missing = model
                .params
                .names()
                .find(|n| params.get(n).is_none())
                .unwrap_or_default()
                .to_string();
            return Err(Error::CheckpointMismatch {
                name: missing,
                reason: "missing from checkpoint".into(),
            });
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn mode(&self) -> FusionMode {
        self.config.fusion.mode
    }

    /// Stacked `[n, h, w, c]` images and `[n, V + 2]` bag matrix.
    pub fn batch_inputs<R: Rng>(&self, samples: &[&ModalitySample], mask: Option<&mut R>) -> Result<(Tensor, Tensor)> {
        let dims = self.config.image.input_dims();
        let per: usize = dims.iter().product();
        let mut pixels = Vec::with_capacity(samples.len() * per);
        for s in samples {
            if s.image.dims() != dims {
                return Err(Error::config(
                    "image",
                    format!("sample grid {} does not match encoder input {dims:?}", s.image.shape()),
                ));
            }
            pixels.extend_from_slice(s.image.values());
        }
        let images = Tensor::build(vec![samples.len(), dims[0], dims[1], dims[2]], pixels)?;
        let bags: Vec<&[u32]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
        let bag = self.config.text.bag_matrix(&bags, mask)?;
        Ok((images, bag))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, images: Var, bags: Var) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let fmap = cfg.image.forward(g, p, images)?;
        let fv = cfg.visual_upsampler().forward(g, p, fmap)?;
        let th = cfg.text.forward(g, p, bags)?;
        let ft = cfg.text_upsampler().forward(g, p, th)?;
        if cfg.fusion.mode == FusionMode::Early {
            let joint = g.concat(ft, fv)?;
            let z = head(g, p, joint, JOINT_HEAD)?;
            return Ok(ForwardOutput {
                text_probs: None,
                visual_probs: None,
                visual_weight: None,
                fused: g.softmax_rows(z)?,
            });
        }
        let zt = head(g, p, ft, TEXT_HEAD)?;
        let zv = head(g, p, fv, VISUAL_HEAD)?;
        let pt = g.softmax_rows(zt)?;
        let pv = g.softmax_rows(zv)?;
        let (fused, wv) = if cfg.fusion.mode == FusionMode::Late {
            let sum = g.add(pt, pv)?;
            (g.scale(sum, 0.5)?, None)
        } else {
            let u = g.entropy_rows(pt)?;
            let s = g.activation(u, ActivationKind::Sigmoid)?;
            let wv = g.add_scalar(s, -cfg.fusion.beta)?;
            let weighted = g.mul_rows(pv, wv)?;
            let text = g.scale(pt, cfg.fusion.text_weight)?;
            let pre = g.add(text, weighted)?;
            (g.softmax_rows(pre)?, Some(wv))
        };
        Ok(ForwardOutput {
            text_probs: Some(pt),
            visual_probs: Some(pv),
            visual_weight: wv,
            fused,
        })
    }

    /// Training objective for the configured mode:
    ///
    /// - late: `CE(p_t) + CE(p_v)`, the branches train independently;
    /// - early: `CE(fused)`;
    /// - dynamic: `CE(fused) + aux_weight * (CE(p_t) + CE(p_v))`.
    pub fn loss(&self, g: &mut Graph, out: &ForwardOutput, labels: &[usize]) -> Result<Var> {
        let ce = |g: &mut Graph, v: Var| g.nll_mean(v, labels, PROB_FLOOR);
        match self.config.fusion.mode {
            FusionMode::Early => Ok(ce(g, out.fused)?),
            FusionMode::Late => {
                let t = ce(g, out.text_probs.expect("late has a text head"))?;
                let v = ce(g, out.visual_probs.expect("late has a visual head"))?;
                Ok(g.add(t, v)?)
            }
            FusionMode::Dynamic => {
                let f = ce(g, out.fused)?;
                let aux = self.config.fusion.aux_weight;
                if aux == 0.0 {
                    return Ok(f);
                }
                let t = ce(g, out.text_probs.expect("dynamic has a text head"))?;
                let v = ce(g, out.visual_probs.expect("dynamic has a visual head"))?;
                let tv = g.add(t, v)?;
                let tv = g.scale(tv, aux)?;
                Ok(g.add(f, tv)?)
            }
        }
    }

    pub fn predict_batch(&self, samples: &[ModalitySample]) -> Result<Vec<FusedDecision>> {
        let c = self.config.fusion.classes;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(PREDICT_CHUNK) {
            let refs: Vec<&ModalitySample> = chunk.iter().collect();
            let (images, bags) = self.batch_inputs::<rng::StreamRng>(&refs, None)?;
            let mut g = Graph::new();
            let b = self.params.bind_frozen(&mut g);
            let (xi, xt) = (g.constant(images), g.constant(bags));
            let f = self.forward(&mut g, &b, xi, xt)?;
            let rows = |v: Option<Var>, i: usize| -> Result<Option<Posterior>> {
                v.map(|v| Posterior::new(g.value(v).values()[i * c..(i + 1) * c].to_vec()))
                    .transpose()
            };
            for i in 0..chunk.len() {
                out.push(FusedDecision::new(
                    g.value(f.fused).values()[i * c..(i + 1) * c].to_vec(),
                    rows(f.text_probs, i)?,
                    rows(f.visual_probs, i)?,
                    f.visual_weight.map(|w| g.value(w).values()[i]),
                ));
            }
        }
        Ok(out)
    }

    pub fn predict(&self, sample: &ModalitySample) -> Result<FusedDecision> {
        Ok(self.predict_batch(std::slice::from_ref(sample))?.remove(0))
    }

    /// Fused distributions for `samples`, one per row.
    pub fn probabilities(&self, samples: &[ModalitySample]) -> Result<Vec<Vec<f64>>> {
        Ok(self.predict_batch(samples)?.into_iter().map(|d| d.fused).collect())
    }

    pub fn evaluate(&self, test: &[ModalitySample], top_k: usize) -> Result<crate::data::MetricsReport> {
        let probs = self.probabilities(test)?;
        let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
        crate::data::MetricsReport::from_probabilities(&labels, &probs, self.config.fusion.classes, top_k)
    }
}
