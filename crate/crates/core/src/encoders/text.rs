//! Token-bag text encoder: embed, average, one hidden dense layer.
//!
//! Ids `0..vocab_size` are real tokens. Two extra embedding rows are
//! reserved: [`TextEncoderConfig::null_id`] stands in for an empty bag
//! (missing text) and [`TextEncoderConfig::mask_id`] replaces tokens under
//! the masking augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bindings, ParamSet};
use super::{FeatureMap, Modality};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, ActivationKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    #[serde(default = "default_mask_fraction")]
    pub mask_fraction: f64,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
}

fn default_mask_fraction() -> f64 {
    0.15
}

fn default_activation() -> ActivationKind {
    ActivationKind::Mish
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            vocab_size: 200,
            embed_dim: 32,
            hidden_dim: 32,
            mask_fraction: default_mask_fraction(),
            activation: default_activation(),
        }
    }
}

impl TextEncoderConfig {
    pub fn null_id(&self) -> usize {
        self.vocab_size
    }

    pub fn mask_id(&self) -> usize {
        self.vocab_size + 1
    }

    /// Rows in the embedding table.
    pub fn table_rows(&self) -> usize {
        self.vocab_size + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("text.vocab_size", "must be >= 2"));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::config("text", "dimensions must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::config("text.mask_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        params.insert_he("text.embed", vec![self.table_rows(), self.embed_dim], 2, rng)?;
        params.insert_he(
            "text.hidden.w",
            vec![self.embed_dim, self.hidden_dim],
            self.embed_dim,
            rng,
        )?;
        params.insert_zeros("text.hidden.b", vec![self.hidden_dim])?;
        Ok(())
    }

    /// Row-normalised bag-of-ids matrix `[n, table_rows]`. An empty bag
    /// selects the null row. With `mask`, each token is independently
    /// replaced by the mask id with probability `mask_fraction`.
    pub fn bag_matrix<R: Rng>(&self, bags: &[&[u32]], mut mask: Option<&mut R>) -> Result<Tensor> {
        let rows = self.table_rows();
        let mut data = vec![0.0; bags.len() * rows];
        for (i, bag) in bags.iter().enumerate() {
            let row = &mut data[i * rows..(i + 1) * rows];
            if bag.is_empty() {
                row[self.null_id()] = 1.0;
                continue;
            }
            let w = 1.0 / bag.len() as f64;
            for &t in bag.iter() {
                let t = t as usize;
                if t >= self.vocab_size {
                    return Err(Error::config(
                        "tokens",
                        format!("token id {t} outside vocabulary of {}", self.vocab_size),
                    ));
                }
                let masked = match mask.as_deref_mut() {
                    Some(rng) => rng.random::<f64>() < self.mask_fraction,
                    None => false,
                };
                let id = if masked { self.mask_id() } else { t };
                row[id] += w;
            }
        }
        Ok(Tensor::build(vec![bags.len().max(1), rows], data)?)
    }

    /// `[n, hidden_dim]` features for a bag matrix.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, bag: Var) -> Result<Var> {
        let emb = g.matmul(bag, p.get("text.embed")?)?;
        Ok(nn::dense(
            g,
            emb,
            p.get("text.hidden.w")?,
            p.get("text.hidden.b")?,
            self.activation,
        )?)
    }
}

/// Encode one token multiset without augmentation.
pub fn text_encode(tokens: &[u32], cfg: &TextEncoderConfig, params: &ParamSet) -> Result<FeatureMap> {
    let bag = cfg.bag_matrix::<rand_chacha::ChaCha8Rng>(&[tokens], None)?;
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let x = g.constant(bag);
    let y = cfg.forward(&mut g, &b, x)?;
    let t = g.value(y).reshape(vec![cfg.hidden_dim])?;
    Ok(FeatureMap::new(t, Modality::Textual))
}
