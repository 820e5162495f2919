//! Image and text encoders, feature up-sampling and parameter storage.

pub mod image;
pub mod params;
pub mod scaling;
pub mod text;

pub use image::{image_encode, BlockKind, BlockSpec, ImageEncoderConfig, StageConfig};
pub use params::{Bindings, ParamSet};
pub use scaling::{ScalingCoefficients, ScalingViolation, ValidScaling};
pub use text::{text_encode, TextEncoderConfig};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, ActivationKind};
use crate::tensor::Tensor;

/// Up-sampled feature width used by the full-size preset.
pub const FULL_FEATURE_DIM: usize = 256;
/// Up-sampled feature width used at desk scale.
pub const DEFAULT_FEATURE_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor,
    modality: Modality,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, modality: Modality) -> Self {
        FeatureMap { tensor, modality }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }
}

/// Dense + ReLU + global average pooling onto a shared width `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Upsampler {
    pub modality: Modality,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Upsampler {
    fn name(&self, leaf: &str) -> String {
        format!("{}.up.{leaf}", self.modality.prefix())
    }

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        params.insert_he(self.name("w"), vec![self.in_dim, self.out_dim], self.in_dim, rng)?;
        params.insert_zeros(self.name("b"), vec![self.out_dim])
    }

    /// `[n, in]` or `[n, h, w, in]` to `[n, out]`.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let dims = g.try_value(x)?.dims().to_vec();
        if dims.last() != Some(&self.in_dim) {
            return Err(Error::config(
                self.name("w"),
                format!("expected feature width {}, got shape {:?}", self.in_dim, dims),
            ));
        }
        let (w, b) = (p.get(&self.name("w"))?, p.get(&self.name("b"))?);
        match dims.len() {
            2 => Ok(nn::dense(g, x, w, b, ActivationKind::Relu)?),
            4 => {
                let flat = g.reshape(x, vec![dims[0] * dims[1] * dims[2], dims[3]])?;
                let y = nn::dense(g, flat, w, b, ActivationKind::Relu)?;
                let grid = g.reshape(y, vec![dims[0], dims[1], dims[2], self.out_dim])?;
                Ok(nn::global_average_pool(g, grid)?)
            }
            _ => Err(Error::config(
                self.name("w"),
                format!("unsupported feature rank {}", dims.len()),
            )),
        }
    }
}

/// Up-sample one feature map (`[in]` or `[h, w, in]`) to a length-`d`
/// vector using weights from `params`.
pub fn feature_upsample(f: &FeatureMap, params: &ParamSet) -> Result<Tensor> {
    let w = params
        .get(&format!("{}.up.w", f.modality().prefix()))
        .ok_or_else(|| Error::config("up.w", "missing up-sampling weights"))?;
    let up = Upsampler {
        modality: f.modality(),
        in_dim: w.dims()[0],
        out_dim: w.dims()[1],
    };
    let mut dims = vec![1];
    dims.extend_from_slice(f.tensor().dims());
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let x = g.constant(f.tensor().reshape(dims)?);
    let y = up.forward(&mut g, &b, x)?;
    Ok(g.value(y).reshape(vec![up.out_dim])?)
}
