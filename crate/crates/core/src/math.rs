//! Differentiable building blocks shared by the motion and detail indicators.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// Softmax along the last axis with a temperature divisor.
pub fn softmax(g: &mut Graph, x: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Domain {
            op: "softmax",
            detail: format!("temperature {temperature} must be positive"),
        });
    }
    if temperature == 1.0 {
        return g.softmax(x);
    }
    let scaled = g.scale(x, 1.0 / temperature)?;
    g.softmax(scaled)
}

/// Cosine similarity along the last axis; `[.., n] x [.., n] -> [..]`.
///
/// Zero-norm operands are rejected. The result is clamped to `[-1, 1]`.
pub fn cosine_similarity(g: &mut Graph, u: Var, v: Var) -> Result<Var> {
    if g.shape(u) != g.shape(v) {
        return Err(Error::dim("cosine_similarity", g.shape(u), g.shape(v)));
    }
    let un = g.normalize_last(u)?;
    let vn = g.normalize_last(v)?;
    let prod = g.mul(un, vn)?;
    let last = g.shape(prod).len() - 1;
    let dot = g.sum_axis(prod, last)?;
    g.clamp(dot, -1.0, 1.0)
}

/// Cosine similarity of every query row against every key row;
/// `[b, n] x [s, n] -> [b, s]`.
pub fn cosine_matrix(g: &mut Graph, queries: Var, keys: Var) -> Result<Var> {
    let (sq, sk) = (g.shape(queries), g.shape(keys));
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::dim("cosine_matrix", sq, sk));
    }
    let qn = g.normalize_last(queries)?;
    let kn = g.normalize_last(keys)?;
    let kt = g.transpose(kn)?;
    let sims = g.matmul(qn, kt)?;
    g.clamp(sims, -1.0, 1.0)
}

/// `KL(p || q)` along the last axis.
pub fn kl_divergence(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    g.kl_last(p, q)
}

/// Mean over the trailing two (spatial) axes: `[.., c, s, s] -> [.., c]`.
pub fn avg_pool_spatial(g: &mut Graph, f: Var) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    let r = shape.len();
    if r < 3 || shape[r - 1] != shape[r - 2] {
        return Err(Error::dim("avg_pool_spatial", &shape, &[]));
    }
    let mut flat = shape[..r - 2].to_vec();
    flat.push(shape[r - 1] * shape[r - 2]);
    let x = g.reshape(f, &flat)?;
    g.mean_axis(x, r - 2)
}

/// Convex combination `sum_i softmax(logits)_i * inputs_i`.
pub fn weighted_sum(g: &mut Graph, inputs: &[Var], logits: Var) -> Result<Var> {
    let k = g.value(logits).numel();
    if inputs.is_empty() || inputs.len() != k || g.shape(logits).len() != 1 {
        return Err(Error::dim("weighted_sum", &[inputs.len()], g.shape(logits)));
    }
    let shape = g.shape(inputs[0]).to_vec();
    if let Some(bad) = inputs.iter().find(|&&v| g.shape(v) != shape.as_slice()) {
        return Err(Error::dim("weighted_sum", &shape, g.shape(*bad)));
    }
    let w = g.softmax(logits)?;
    let mut acc: Option<Var> = None;
    for (i, &x) in inputs.iter().enumerate() {
        let wi = g.slice_last(w, i, 1)?;
        let term = g.mul_scalar(x, wi)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty inputs"))
}

/// Scalar hinge `max(0, x - margin)` applied elementwise.
pub fn hinge(g: &mut Graph, x: Var, margin: f64) -> Result<Var> {
    let shifted = g.add_scalar(x, -margin)?;
    g.relu(shifted)
}
