//! Named parameter tensors and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"FUSN"            magic
//! u32                version (1)
//! repeated until EOF:
//!   u32              name length in bytes
//!   [u8]             UTF-8 name
//!   u32              rank
//!   [u64; rank]      dims
//!   [f64; numel]     row-major payload
//! ```
//!
//! Records are written in name order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FUSN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Normal(0, sqrt(2 / fan_in)) weights.
    pub fn insert_he(
        &mut self,
        name: impl Into<String>,
        dims: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let n: usize = dims.iter().product();
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::build(dims, data)?);
        Ok(())
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, dims: Vec<usize>) -> Result<()> {
        self.insert(name, Tensor::zeros(dims)?);
        Ok(())
    }

    /// Register every tensor on `g`; names for which `trainable` returns
    /// false become constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bindings { vars }
    }

    /// Bind everything as constants.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bindings {
        self.bind(g, |_| false)
    }

    /// `p -= lr * grad` for every bound tensor that received a gradient.
    pub fn apply_gradients(&mut self, g: &Graph, bindings: &Bindings, lr: f64) {
        for (name, t) in self.tensors.iter_mut() {
            let Some(v) = bindings.vars.get(name) else { continue };
            let Some(grad) = g.grad(*v) else { continue };
            for (p, d) in t.values_mut().iter_mut().zip(grad.values()) {
                *p -= lr * d;
            }
        }
    }

    /// Overwrite tensors that also exist in `source`. Shapes must agree;
    /// names unknown to `self` are skipped. Returns the number copied.
    pub fn warm_start_from(&mut self, source: &ParamSet) -> Result<usize> {
        self.warm_start_where(source, |_| true)
    }

    /// Like [`warm_start_from`](Self::warm_start_from), restricted to names
    /// accepted by `keep`.
    pub fn warm_start_where(&mut self, source: &ParamSet, keep: impl Fn(&str) -> bool) -> Result<usize> {
        for (name, t) in source.tensors.iter().filter(|(n, _)| keep(n)) {
            if let Some(own) = self.tensors.get(name) {
                if own.shape() != t.shape() {
                    return Err(Error::CheckpointMismatch {
                        name: name.clone(),
                        reason: format!("checkpoint shape {} vs model shape {}", t.shape(), own.shape()),
                    });
                }
            }
        }
        let mut copied = 0;
        for (name, t) in source.tensors.iter().filter(|(n, _)| keep(n)) {
            if let Some(own) = self.tensors.get_mut(name) {
                *own = t.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.num_scalars() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointFormat("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointFormat(format!("unsupported version {version}")));
        }
        let mut set = ParamSet::new();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::CheckpointFormat("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::CheckpointFormat(format!("`{name}` is too large")))?;
            let payload = r.take(n.checked_mul(8).ok_or_else(|| {
                Error::CheckpointFormat(format!("`{name}` is too large"))
            })?)?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::build(dims, data).map_err(|e: TensorError| {
                Error::CheckpointFormat(format!("`{name}`: {e}"))
            })?;
            set.insert(name, t);
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CheckpointFormat("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl FromIterator<(String, Var)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bindings {
            vars: iter.into_iter().collect(),
        }
    }
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(name, "parameter missing from weight set"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::build(vec![1], vec![2.0]).unwrap());
        let b = p.to_bytes();
        assert_eq!(&b[..4], b"FUSN");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(b[12], b'w');
        assert_eq!(u32::from_le_bytes(b[13..17].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[17..25].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(b[25..33].try_into().unwrap()), 2.0);
        assert_eq!(b.len(), 33);
    }

    #[test]
    fn warm_start_filter_skips_rejected_names() {
        let mut src = ParamSet::new();
        src.insert("enc.w", Tensor::build(vec![2], 1.0).unwrap());
        src.insert("text.head.w", Tensor::build(vec![2], 2.0).unwrap());
        let mut dst = ParamSet::new();
        dst.insert("enc.w", Tensor::zeros(vec![2]).unwrap());
        dst.insert("text.head.w", Tensor::zeros(vec![3]).unwrap());
        assert!(dst.clone().warm_start_from(&src).is_err());
        let n = dst.warm_start_where(&src, |n| !n.contains(".head.")).unwrap();
        assert_eq!(n, 1);
        assert_eq!(dst.get("enc.w").unwrap().values(), &[1.0, 1.0]);
        assert_eq!(dst.get("text.head.w").unwrap().values(), &[0.0; 3]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(ParamSet::from_bytes(b"NOPE\x01\x00\x00\x00").is_err());
        let mut p = ParamSet::new();
        p.insert("a", Tensor::zeros(vec![2, 3]).unwrap());
        let b = p.to_bytes();
        assert!(matches!(
            ParamSet::from_bytes(&b[..b.len() - 3]),
            Err(Error::CheckpointFormat(_))
        ));
    }

    #[test]
    fn warm_start_names_mismatched_tensor() {
        let mut model = ParamSet::new();
        model.insert("head.w", Tensor::zeros(vec![4, 3]).unwrap());
        model.insert("enc.w", Tensor::zeros(vec![2]).unwrap());
        let mut ckpt = ParamSet::new();
        ckpt.insert("head.w", Tensor::zeros(vec![4, 5]).unwrap());
        ckpt.insert("enc.w", Tensor::build(vec![2], 1.0).unwrap());
        let err = model.warm_start_from(&ckpt).unwrap_err();
        assert!(err.to_string().contains("head.w"), "{err}");
        // nothing copied on failure
        assert_eq!(model.get("enc.w").unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn warm_start_copies_matching_and_skips_unknown() {
        let mut model = ParamSet::new();
        model.insert("enc.w", Tensor::zeros(vec![2]).unwrap());
        let mut ckpt = ParamSet::new();
        ckpt.insert("enc.w", Tensor::build(vec![2], 1.0).unwrap());
        ckpt.insert("other", Tensor::zeros(vec![1]).unwrap());
        assert_eq!(model.warm_start_from(&ckpt).unwrap(), 1);
        assert_eq!(model.get("enc.w").unwrap().values(), &[1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            tensors in proptest::collection::btree_map(
                "[a-z.]{1,12}",
                (proptest::collection::vec(1usize..4, 0..3), any::<u64>()),
                0..5,
            )
        ) {
            let mut p = ParamSet::new();
            for (name, (dims, seed)) in tensors {
                let n: usize = dims.iter().product();
                let data: Vec<f64> = (0..n).map(|i| (seed as f64).sin() * i as f64 - 0.5).collect();
                p.insert(name, Tensor::build(dims, data).unwrap());
            }
            let back = ParamSet::from_bytes(&p.to_bytes()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
