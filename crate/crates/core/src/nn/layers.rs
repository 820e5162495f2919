//! Graph-level layers.

use crate::graph::{Graph, Reduce, Var};
use crate::nn::activation::ActivationKind;
use crate::tensor::{Result, TensorError};

/// `act(x · W + b)` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
pub fn dense(g: &mut Graph, x: Var, w: Var, b: Var, act: ActivationKind) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    let z = g.add_bias(xw, b)?;
    g.activation(z, act)
}

/// Dense layer without activation.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

/// Mean over the two spatial axes.
///
/// Rank 2 is a single-channel `[h, w]` grid and pools to `[1]`; rank 3 is
/// `[h, w, c]` and pools to `[c]`; rank 4 is `[n, h, w, c]` and pools to
/// `[n, c]`.
pub fn global_average_pool(g: &mut Graph, x: Var) -> Result<Var> {
    let dims = g.try_value(x)?.dims().to_vec();
    match dims.len() {
        2 => {
            let m = g.mean(x)?;
            g.reshape(m, vec![1])
        }
        3 => {
            let flat = g.reshape(x, vec![dims[0] * dims[1], dims[2]])?;
            Ok(g.reduce(flat, Reduce::Mean, Some(0))?.0)
        }
        4 => {
            let flat = g.reshape(x, vec![dims[0], dims[1] * dims[2], dims[3]])?;
            Ok(g.reduce(flat, Reduce::Mean, Some(1))?.0)
        }
        _ => Err(TensorError::RankMismatch {
            op: "global_average_pool",
            expected: "2, 3 or 4",
            shape: g.value(x).shape().clone(),
        }),
    }
}

/// Mish assembled from `softplus`, `tanh` and a product, so that its
/// gradient comes from the chain rule instead of the closed form.
pub fn mish_composite(g: &mut Graph, x: Var) -> Result<Var> {
    let sp = g.activation(x, ActivationKind::Softplus)?;
    let t = g.activation(sp, ActivationKind::Tanh)?;
    g.mul(x, t)
}
