//! Staged convolutional image encoder.
//!
//! Early stages use fused blocks (a single `k×k` convolution, optionally
//! expanded and projected back with a `1×1`); late stages use depthwise
//! blocks (`1×1` expand, depthwise `k×k`, `1×1` project). Every
//! convolution is followed by the configured activation, except the very
//! last one which is always Mish. The first layer of every stage after the
//! first downsamples with stride 2.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bindings, ParamSet};
use super::scaling::ScalingCoefficients;
use super::{FeatureMap, Modality};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::ActivationKind;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    FusedEarly,
    DepthwiseLate,
}

impl BlockKind {
    pub fn allowed_expansions(self) -> &'static [usize] {
        match self {
            BlockKind::FusedEarly => &[1, 4],
            BlockKind::DepthwiseLate => &[4, 6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub kind: BlockKind,
    pub channels: usize,
    pub layers: usize,
    pub expansion: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    /// Base `[height, width, channels]` before resolution scaling.
    pub input: [usize; 3],
    pub stages: Vec<StageConfig>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub scaling: ScalingCoefficients,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
}

fn default_kernel() -> usize {
    3
}

fn default_activation() -> ActivationKind {
    ActivationKind::Mish
}

/// One resolved layer of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub stage: usize,
    pub layer: usize,
    pub kind: BlockKind,
    pub c_in: usize,
    pub c_out: usize,
    pub expansion: usize,
    pub stride: usize,
}

impl BlockSpec {
    fn prefix(&self) -> String {
        format!("image.s{}.l{}", self.stage, self.layer)
    }
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            input: [8, 8, 3],
            stages: vec![
                StageConfig {
                    kind: BlockKind::FusedEarly,
                    channels: 4,
                    layers: 1,
                    expansion: 1,
                },
                StageConfig {
                    kind: BlockKind::DepthwiseLate,
                    channels: 8,
                    layers: 1,
                    expansion: 4,
                },
            ],
            kernel: 3,
            scaling: ScalingCoefficients::default(),
            activation: ActivationKind::Mish,
        }
    }
}

impl ImageEncoderConfig {
    /// Input grid after resolution scaling, `[h, w, channels]`.
    pub fn input_dims(&self) -> [usize; 3] {
        let w = self.scaling.resolution_multiplier();
        let scale = |v: usize| ((v as f64) * w).round().max(1.0) as usize;
        [scale(self.input[0]), scale(self.input[1]), self.input[2]]
    }

    /// Channel and layer counts after compound scaling, per stage.
    pub fn scaled_stages(&self) -> Vec<(BlockKind, usize, usize, usize)> {
        let c = self.scaling.channel_multiplier();
        let d = self.scaling.depth_multiplier();
        self.stages
            .iter()
            .map(|s| {
                let ch = ((s.channels as f64) * c).ceil() as usize;
                let layers = ((s.layers as f64) * d).ceil() as usize;
                (s.kind, ch.max(1), layers.max(1), s.expansion)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let Err(v) = self.scaling.validate() {
            let msg: Vec<String> = v.iter().map(ToString::to_string).collect();
            return Err(Error::config("image.scaling", msg.join("; ")));
        }
        if self.stages.is_empty() {
            return Err(Error::config("image.stages", "at least one stage is required"));
        }
        if self.kernel == 0 || self.input.contains(&0) {
            return Err(Error::config("image.input", "extents and kernel must be >= 1"));
        }
        let mut seen_late = false;
        for (i, s) in self.stages.iter().enumerate() {
            match s.kind {
                BlockKind::DepthwiseLate => seen_late = true,
                BlockKind::FusedEarly if seen_late => {
                    return Err(Error::config(
                        format!("image.stages[{i}]"),
                        "fused-early stage after a depthwise-late stage",
                    ))
                }
                BlockKind::FusedEarly => {}
            }
            if !s.kind.allowed_expansions().contains(&s.expansion) {
                return Err(Error::config(
                    format!("image.stages[{i}].expansion"),
                    format!(
                        "{} not in {:?} for {:?}",
                        s.expansion,
                        s.kind.allowed_expansions(),
                        s.kind
                    ),
                ));
            }
            if s.channels == 0 || s.layers == 0 {
                return Err(Error::config(
                    format!("image.stages[{i}]"),
                    "channels and layers must be >= 1",
                ));
            }
        }
        let scaled = self.scaled_stages();
        for (i, pair) in scaled.windows(2).enumerate() {
            if pair[1].2 < pair[0].2 {
                return Err(Error::config(
                    format!("image.stages[{}].layers", i + 1),
                    format!(
                        "scaled layer count {} is below the previous stage's {}",
                        pair[1].2, pair[0].2
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Every layer in forward order.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut out = Vec::new();
        let mut c_in = self.input[2];
        for (si, (kind, ch, layers, expansion)) in self.scaled_stages().into_iter().enumerate() {
            for li in 0..layers {
                let stride = if si > 0 && li == 0 { 2 } else { 1 };
                out.push(BlockSpec {
                    stage: si,
                    layer: li,
                    kind,
                    c_in,
                    c_out: ch,
                    expansion,
                    stride,
                });
                c_in = ch;
            }
        }
        out
    }

    /// `[h, w, c]` of the encoder output.
    pub fn output_dims(&self) -> [usize; 3] {
        let [mut h, mut w, _] = self.input_dims();
        let blocks = self.blocks();
        for b in &blocks {
            h = h.div_ceil(b.stride);
            w = w.div_ceil(b.stride);
        }
        [h, w, blocks.last().map_or(self.input[2], |b| b.c_out)]
    }

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        let k = self.kernel;
        for b in self.blocks() {
            let p = b.prefix();
            let hidden = b.c_in * b.expansion;
            match b.kind {
                BlockKind::FusedEarly => {
                    let mid = if b.expansion == 1 { b.c_out } else { hidden };
                    params.insert_he(format!("{p}.conv.w"), vec![k, k, b.c_in, mid], k * k * b.c_in, rng)?;
                    params.insert_zeros(format!("{p}.conv.b"), vec![mid])?;
                    if b.expansion != 1 {
                        params.insert_he(format!("{p}.project.w"), vec![mid, b.c_out], mid, rng)?;
                        params.insert_zeros(format!("{p}.project.b"), vec![b.c_out])?;
                    }
                }
                BlockKind::DepthwiseLate => {
                    params.insert_he(format!("{p}.expand.w"), vec![b.c_in, hidden], b.c_in, rng)?;
                    params.insert_zeros(format!("{p}.expand.b"), vec![hidden])?;
                    params.insert_he(format!("{p}.dw.w"), vec![k, k, hidden], k * k, rng)?;
                    params.insert_zeros(format!("{p}.dw.b"), vec![hidden])?;
                    params.insert_he(format!("{p}.project.w"), vec![hidden, b.c_out], hidden, rng)?;
                    params.insert_zeros(format!("{p}.project.b"), vec![b.c_out])?;
                }
            }
        }
        Ok(())
    }

    /// Forward a `[n, h, w, c]` batch. Output is `[n, h', w', c']`.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let dims = g.try_value(x)?.dims().to_vec();
        let want = self.input_dims();
        if dims.len() != 4 || dims[1..] != want {
            return Err(Error::config(
                "image",
                format!("expected batch of {want:?} grids, got shape {:?}", dims),
            ));
        }
        let blocks = self.blocks();
        let last = blocks.len() - 1;
        let mut h = x;
        for (i, b) in blocks.iter().enumerate() {
            let pre = b.prefix();
            // The final convolution of the encoder is always Mish.
            let act_at = |is_final_conv: bool| {
                if i == last && is_final_conv {
                    ActivationKind::Mish
                } else {
                    self.activation
                }
            };
            h = match b.kind {
                BlockKind::FusedEarly => {
                    let single = b.expansion == 1;
                    let conv = g.conv2d(h, p.get(&format!("{pre}.conv.w"))?, b.stride)?;
                    let conv = g.add_bias(conv, p.get(&format!("{pre}.conv.b"))?)?;
                    let conv = g.activation(conv, act_at(single))?;
                    if single {
                        conv
                    } else {
                        pointwise(g, p, conv, &format!("{pre}.project"), act_at(true))?
                    }
                }
                BlockKind::DepthwiseLate => {
                    let e = pointwise(g, p, h, &format!("{pre}.expand"), self.activation)?;
                    let d = g.depthwise_conv2d(e, p.get(&format!("{pre}.dw.w"))?, b.stride)?;
                    let d = g.add_bias(d, p.get(&format!("{pre}.dw.b"))?)?;
                    let d = g.activation(d, self.activation)?;
                    pointwise(g, p, d, &format!("{pre}.project"), act_at(true))?
                }
            };
        }
        Ok(h)
    }
}

/// `1×1` convolution as a matmul over flattened pixels.
fn pointwise(g: &mut Graph, p: &Bindings, x: Var, prefix: &str, act: ActivationKind) -> Result<Var> {
    let dims = g.value(x).dims().to_vec();
    let w = p.get(&format!("{prefix}.w"))?;
    let c_out = g.value(w).dims()[1];
    let pixels = dims[0] * dims[1] * dims[2];
    let flat = g.reshape(x, vec![pixels, dims[3]])?;
    let y = crate::nn::dense(g, flat, w, p.get(&format!("{prefix}.b"))?, act)?;
    Ok(g.reshape(y, vec![dims[0], dims[1], dims[2], c_out])?)
}

/// Encode one `[h, w, c]` grid.
pub fn image_encode(img: &Tensor, cfg: &ImageEncoderConfig, params: &ParamSet) -> Result<FeatureMap> {
    let mut dims = vec![1];
    dims.extend_from_slice(img.dims());
    let batch = img.reshape(dims)?;
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let x = g.constant(batch);
    let y = cfg.forward(&mut g, &b, x)?;
    let out = g.value(y);
    let tensor = out.reshape(out.dims()[1..].to_vec())?;
    Ok(FeatureMap::new(tensor, Modality::Visual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::activation::mish_scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_stage(channels: usize) -> ImageEncoderConfig {
        ImageEncoderConfig {
            input: [4, 4, channels],
            stages: vec![StageConfig {
                kind: BlockKind::FusedEarly,
                channels,
                layers: 1,
                expansion: 1,
            }],
            scaling: ScalingCoefficients {
                phi: 0.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = ImageEncoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.blocks().len(), 4);
        assert_eq!(cfg.output_dims(), [4, 4, 8]);
    }

    #[test]
    fn identity_kernel_on_constant_input() {
        let cfg = single_stage(2);
        let mut params = ParamSet::new();
        let mut k = Tensor::zeros(vec![3, 3, 2, 2]).unwrap();
        // centre tap, c_in == c_out
        let centre = (3 + 1) * 4;
        k.values_mut()[centre] = 1.0;
        k.values_mut()[centre + 3] = 1.0;
        params.insert("image.s0.l0.conv.w", k);
        params.insert("image.s0.l0.conv.b", Tensor::zeros(vec![2]).unwrap());
        let img = Tensor::build(vec![4, 4, 2], 0.7).unwrap();
        let f = image_encode(&img, &cfg, &params).unwrap();
        assert_eq!(f.modality(), Modality::Visual);
        for &v in f.tensor().values() {
            assert_eq!(v, mish_scalar(0.7));
        }
    }

    #[test]
    fn zero_weights_give_mish_of_bias() {
        let cfg = ImageEncoderConfig::default();
        let mut params = ParamSet::new();
        cfg.init_params(&mut params, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let names: Vec<String> = params.names().map(String::from).collect();
        for n in &names {
            let t = params.get_mut(n).unwrap();
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let img = Tensor::build(vec![8, 8, 3], 0.9).unwrap();
        let f = image_encode(&img, &cfg, &params).unwrap();
        assert!(f.tensor().values().iter().all(|&v| v == 0.0));

        let last_bias = "image.s1.l1.project.b";
        params.get_mut(last_bias).unwrap().values_mut()[0] = 0.4;
        let f = image_encode(&img, &cfg, &params).unwrap();
        let c = f.tensor().dims()[2];
        for (i, &v) in f.tensor().values().iter().enumerate() {
            let want = if i % c == 0 { mish_scalar(0.4) } else { 0.0 };
            assert_eq!(v, want);
        }
    }

    #[test]
    fn rejects_bad_stage_orders_and_expansions() {
        let mut cfg = ImageEncoderConfig::default();
        cfg.stages.swap(0, 1);
        assert!(cfg.validate().is_err());

        let mut cfg = ImageEncoderConfig::default();
        cfg.stages[1].expansion = 1;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("expansion"), "{err}");

        let mut cfg = ImageEncoderConfig::default();
        cfg.stages[0].layers = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn input_shape_checked() {
        let cfg = ImageEncoderConfig::default();
        let mut params = ParamSet::new();
        cfg.init_params(&mut params, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let img = Tensor::zeros(vec![6, 6, 3]).unwrap();
        assert!(image_encode(&img, &cfg, &params).is_err());
    }

    #[test]
    fn fused_expansion_adds_projection() {
        let mut cfg = ImageEncoderConfig::default();
        cfg.stages[0].expansion = 4;
        cfg.validate().unwrap();
        let mut params = ParamSet::new();
        cfg.init_params(&mut params, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(params.get("image.s0.l0.project.w").is_some());
        let img = Tensor::build(vec![8, 8, 3], 0.2).unwrap();
        let f = image_encode(&img, &cfg, &params).unwrap();
        assert_eq!(f.tensor().dims(), &[4, 4, 8]);
    }
}
