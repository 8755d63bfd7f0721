//! Motion indicator: an identity-stripped motion embedding built from the
//! multi-scale encoder features.
//!
//! The fourth scale goes through a query extractor (learnable query tokens
//! cross-attending to the grid cells, followed by a feed-forward layer, with
//! the tokens mean-pooled at the end). Every other scale is average pooled.
//! Each contribution is projected to `d_z` without bias and the five are
//! mixed by a learnable convex weighting.

use rand::Rng;

use crate::config::{ModelConfig, DETAIL_SCALE, SCALES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math::{avg_pool_spatial, cosine_similarity, hinge, weighted_sum};
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Per-scale grids `[batch, c_k, s_k, s_k]` plus the top code `[batch, d_top]`.
#[derive(Clone, Copy, Debug)]
pub struct MultiScaleFeatures {
    pub grids: [Var; SCALES],
    pub top: Var,
}

impl MultiScaleFeatures {
    pub fn detail(&self) -> Var {
        self.grids[DETAIL_SCALE]
    }
}

/// Turns a grid `[b, c, s, s]` into tokens `[b, s*s, c]`.
pub fn grid_to_tokens(g: &mut Graph, grid: Var) -> Result<Var> {
    let shape = g.shape(grid).to_vec();
    if shape.len() != 4 || shape[2] != shape[3] {
        return Err(Error::dim("grid_to_tokens", &shape, &[]));
    }
    let (b, c, t) = (shape[0], shape[1], shape[2] * shape[3]);
    let flat = g.reshape(grid, &[b, c, t])?;
    g.permute(flat, &[0, 2, 1])
}

/// Inverse of [`grid_to_tokens`].
pub fn tokens_to_grid(g: &mut Graph, tokens: Var, side: usize) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 3 || shape[1] != side * side {
        return Err(Error::dim("tokens_to_grid", &shape, &[side, side]));
    }
    let (b, c) = (shape[0], shape[2]);
    let chan_first = g.permute(tokens, &[0, 2, 1])?;
    g.reshape(chan_first, &[b, c, side, side])
}

#[derive(Clone, Debug)]
struct ExtractorBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// Learnable-query cross-attention stack over the scale-4 grid cells.
#[derive(Clone, Debug)]
pub struct QueryExtractor {
    pub queries: ParamId,
    pub in_proj: Linear,
    blocks: Vec<ExtractorBlock>,
    d_model: usize,
    channels: usize,
}

/// Output of the extractor together with per-block attention maps
/// `[batch, M, tokens]`.
pub struct ExtractorTrace {
    pub output: Var,
    pub attention: Vec<Var>,
}

impl QueryExtractor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let queries = store.register(
            "emi.q_l",
            Tensor::randn(&[cfg.query_tokens, d], 1.0, rng),
        )?;
        let in_proj = Linear::new(store, "emi.in_proj", cfg.detail_channels(), d, true, rng)?;
        let mut blocks = Vec::with_capacity(cfg.extractor_blocks);
        for i in 0..cfg.extractor_blocks {
            let name = |part: &str| format!("emi.block{i}.{part}");
            blocks.push(ExtractorBlock {
                q: Linear::new(store, &name("q"), d, d, true, rng)?,
                k: Linear::new(store, &name("k"), d, d, false, rng)?,
                v: Linear::new(store, &name("v"), d, d, true, rng)?,
                o: Linear::new(store, &name("o"), d, d, true, rng)?,
                ffn_in: Linear::new(store, &name("ffn_in"), d, 2 * d, true, rng)?,
                ffn_out: Linear::new(store, &name("ffn_out"), 2 * d, d, true, rng)?,
            });
        }
        Ok(QueryExtractor {
            queries,
            in_proj,
            blocks,
            d_model: d,
            channels: cfg.detail_channels(),
        })
    }

    pub fn block_value_projection(&self, block: usize) -> Option<&Linear> {
        self.blocks.get(block).map(|b| &b.v)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, f4: Var) -> Result<Var> {
        Ok(self.forward_traced(g, p, f4)?.output)
    }

    pub fn forward_traced(&self, g: &mut Graph, p: &Bound, f4: Var) -> Result<ExtractorTrace> {
        let shape = g.shape(f4).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::dim("extract_p", &shape, &[self.channels]));
        }
        let batch = shape[0];
        let tokens = grid_to_tokens(g, f4)?;
        let keys_src = self.in_proj.forward(g, p, tokens)?;
        let mut x = g.broadcast_leading(p[self.queries], batch)?;
        let scale = 1.0 / (self.d_model as f64).sqrt();
        let mut attention = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            let q = blk.q.forward(g, p, x)?;
            let k = blk.k.forward(g, p, keys_src)?;
            let v = blk.v.forward(g, p, keys_src)?;
            let kt = g.transpose(k)?;
            let scores = g.bmm(q, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores).map_err(|e| block_error(i, e))?;
            attention.push(attn);
            let mixed = g.bmm(attn, v)?;
            let out = blk.o.forward(g, p, mixed)?;
            x = g.add(x, out)?;
            let h = blk.ffn_in.forward(g, p, x)?;
            let h = g.relu(h)?;
            let h = blk.ffn_out.forward(g, p, h)?;
            x = g.add(x, h)?;
            if !g.value(x).is_finite() {
                return Err(Error::Numeric {
                    op: format!("extract_p block {i}"),
                    detail: "non-finite activation".into(),
                });
            }
        }
        let output = g.mean_axis(x, 1)?;
        Ok(ExtractorTrace { output, attention })
    }
}

fn block_error(block: usize, e: Error) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op: format!("extract_p block {block}: {op}"),
            detail,
        },
        other => other,
    }
}

/// Full motion indicator: extractor on scale 4, pooling elsewhere, convex fusion.
#[derive(Clone, Debug)]
pub struct MotionIndicator {
    pub extractor: QueryExtractor,
    pub projections: Vec<Linear>,
    pub fusion_logits: ParamId,
}

impl MotionIndicator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let extractor = QueryExtractor::new(store, cfg, rng)?;
        let mut projections = Vec::with_capacity(SCALES);
        for k in 0..SCALES {
            let fan_in = if k == DETAIL_SCALE {
                cfg.d_model
            } else {
                cfg.scale_channels[k]
            };
            projections.push(Linear::new(
                store,
                &format!("emi.proj{}", k + 1),
                fan_in,
                cfg.d_z,
                false,
                rng,
            )?);
        }
        let fusion_logits = store.register("emi.fusion_logits", Tensor::zeros(&[SCALES]))?;
        Ok(MotionIndicator {
            extractor,
            projections,
            fusion_logits,
        })
    }

    /// Projected per-scale contributions, each `[batch, d_z]`.
    pub fn contributions(
        &self,
        g: &mut Graph,
        p: &Bound,
        feats: &MultiScaleFeatures,
    ) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(SCALES);
        for (k, proj) in self.projections.iter().enumerate() {
            let pooled = if k == DETAIL_SCALE {
                self.extractor.forward(g, p, feats.grids[k])?
            } else {
                avg_pool_spatial(g, feats.grids[k])?
            };
            out.push(proj.forward(g, p, pooled)?);
        }
        Ok(out)
    }

    pub fn fuse_motion(&self, g: &mut Graph, p: &Bound, feats: &MultiScaleFeatures) -> Result<Var> {
        let parts = self.contributions(g, p, feats)?;
        weighted_sum(g, &parts, p[self.fusion_logits])
    }
}

/// Ablation fallback: the mean of bias-free projections of every pooled scale.
#[derive(Clone, Debug)]
pub struct PooledMotion {
    pub projections: Vec<Linear>,
}

impl PooledMotion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let projections = (0..SCALES)
            .map(|k| {
                Linear::new(
                    store,
                    &format!("motion.pool_proj{}", k + 1),
                    cfg.scale_channels[k],
                    cfg.d_z,
                    false,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(PooledMotion { projections })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, feats: &MultiScaleFeatures) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (k, proj) in self.projections.iter().enumerate() {
            let pooled = avg_pool_spatial(g, feats.grids[k])?;
            let z = proj.forward(g, p, pooled)?;
            acc = Some(match acc {
                Some(a) => g.add(a, z)?,
                None => z,
            });
        }
        g.scale(acc.expect("five scales"), 1.0 / SCALES as f64)
    }
}

#[derive(Clone, Debug)]
pub enum MotionHead {
    Enhanced(MotionIndicator),
    Pooled(PooledMotion),
}

impl MotionHead {
    pub fn forward(&self, g: &mut Graph, p: &Bound, feats: &MultiScaleFeatures) -> Result<Var> {
        match self {
            MotionHead::Enhanced(m) => m.fuse_motion(g, p, feats),
            MotionHead::Pooled(m) => m.forward(g, p, feats),
        }
    }

    pub fn indicator(&self) -> Option<&MotionIndicator> {
        match self {
            MotionHead::Enhanced(m) => Some(m),
            MotionHead::Pooled(_) => None,
        }
    }
}

/// `mean_b max(0, cos(z_s, z_d) - xi)`.
pub fn disentanglement_loss(g: &mut Graph, z_s: Var, z_d: Var, xi: f64) -> Result<Var> {
    let cos = cosine_similarity(g, z_s, z_d)?;
    let h = hinge(g, cos, xi)?;
    g.mean(h)
}

/// `z_d - z_s`.
pub fn motion_difference(g: &mut Graph, z_d: Var, z_s: Var) -> Result<Var> {
    g.sub(z_d, z_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, MotionIndicator, ModelConfig) {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = MotionIndicator::new(&mut store, &cfg, &mut rng).unwrap();
        (store, m, cfg)
    }

    fn random_features(
        g: &mut Graph,
        cfg: &ModelConfig,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> MultiScaleFeatures {
        let grids = std::array::from_fn(|k| {
            let s = cfg.scale_sizes[k];
            g.constant(Tensor::randn(&[batch, cfg.scale_channels[k], s, s], 1.0, rng))
        });
        let top = g.constant(Tensor::randn(&[batch, cfg.d_top], 1.0, rng));
        MultiScaleFeatures { grids, top }
    }

    #[test]
    fn zero_grid_with_zero_value_projection_is_deterministic() {
        let (mut store, m, cfg) = setup();
        for b in 0..cfg.extractor_blocks {
            let v = m.extractor.block_value_projection(b).unwrap().weight;
            let shape = store.get(v).shape().to_vec();
            *store.get_mut(v) = Tensor::zeros(&shape);
        }
        let run = || {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let c = cfg.detail_channels();
            let s = cfg.detail_size();
            let f4 = g.constant(Tensor::zeros(&[1, c, s, s]));
            let out = m.extractor.forward(&mut g, &p, f4).unwrap();
            g.value(out).clone()
        };
        let a = run();
        assert!(a.is_finite());
        assert_eq!(a, run());
    }

    #[test]
    fn single_token_gets_full_attention() {
        let (store, m, cfg) = setup();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f4 = g.constant(Tensor::randn(&[2, cfg.detail_channels(), 1, 1], 1.0, &mut rng));
        let trace = m.extractor.forward_traced(&mut g, &p, f4).unwrap();
        assert_eq!(trace.attention.len(), cfg.extractor_blocks);
        for a in trace.attention {
            assert!(g.value(a).data().iter().all(|&w| w == 1.0));
        }
        assert_eq!(g.shape(trace.output), &[2, cfg.d_model]);
    }

    #[test]
    fn token_order_does_not_matter() {
        let (store, m, cfg) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg.detail_channels();
        let s = cfg.detail_size();
        let grid = Tensor::randn(&[1, c, s, s], 1.0, &mut rng);
        // reverse the cell order within every channel
        let t = s * s;
        let mut flipped = grid.clone();
        for ch in 0..c {
            for i in 0..t {
                flipped.data_mut()[ch * t + i] = grid.data()[ch * t + (t - 1 - i)];
            }
        }
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let f4 = g.constant(x.clone());
            let out = m.extractor.forward(&mut g, &p, f4).unwrap();
            g.value(out).clone()
        };
        let (a, b) = (eval(&grid), eval(&flipped));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn output_width_is_independent_of_grid_size() {
        let (store, m, cfg) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for s in [1, 2, 3, 5] {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let f4 = g.constant(Tensor::randn(&[3, cfg.detail_channels(), s, s], 1.0, &mut rng));
            let out = m.extractor.forward(&mut g, &p, f4).unwrap();
            assert_eq!(g.shape(out), &[3, cfg.d_model]);
        }
    }

    #[test]
    fn fusion_saturated_to_scale_four() {
        let (mut store, m, cfg) = setup();
        *store.get_mut(m.fusion_logits) =
            Tensor::from_vec(vec![-40.0, -40.0, -40.0, 40.0, -40.0]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = random_features(&mut g, &cfg, 2, &mut rng);
        let parts = m.contributions(&mut g, &p, &feats).unwrap();
        let z = m.fuse_motion(&mut g, &p, &feats).unwrap();
        assert_eq!(g.shape(z), &[2, cfg.d_z]);
        for (a, b) in g.value(z).data().iter().zip(g.value(parts[3]).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_motion_is_pure() {
        let (store, m, cfg) = setup();
        let eval = || {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let feats = random_features(&mut g, &cfg, 2, &mut rng);
            let z = m.fuse_motion(&mut g, &p, &feats).unwrap();
            g.value(z).clone()
        };
        assert_eq!(eval(), eval());
    }

    #[test]
    fn disentanglement_loss_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(vec![0.2, -1.0, 3.0]));
        let l = disentanglement_loss(&mut g, z, z, 0.1).unwrap();
        assert!((g.scalar(l) - 0.9).abs() < 1e-12);

        let a = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let b = g.constant(Tensor::from_vec(vec![0.0, 2.0]));
        let l = disentanglement_loss(&mut g, a, b, 0.1).unwrap();
        assert_eq!(g.scalar(l), 0.0);

        // cos = 0.5 at 60 degrees
        let c = g.constant(Tensor::from_vec(vec![0.5, 3f64.sqrt() / 2.0]));
        let l = disentanglement_loss(&mut g, a, c, 0.1).unwrap();
        assert!((g.scalar(l) - 0.4).abs() < 1e-6);

        let zero = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            disentanglement_loss(&mut g, zero, a, 0.1),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn hinge_region_has_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_vec(vec![1.0, 0.2, -0.3]));
        let b = g.param(Tensor::from_vec(vec![-0.1, 1.0, 0.4]));
        let l = disentanglement_loss(&mut g, a, b, 0.1).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(a).l2_norm() < 1e-10);
        assert!(grads.get(b).l2_norm() < 1e-10);
    }

    #[test]
    fn motion_difference_examples() {
        let mut g = Graph::new();
        let zs = g.param(Tensor::from_vec(vec![0.5, -1.0, 2.0]));
        let d = motion_difference(&mut g, zs, zs).unwrap();
        assert_eq!(g.value(d).data(), &[0.0; 3]);

        let zd = g.constant(Tensor::from_vec(vec![0.75, -1.0, 2.5]));
        let d = motion_difference(&mut g, zd, zs).unwrap();
        assert_eq!(g.value(d).data(), &[0.25, 0.0, 0.5]);

        let mismatch = g.constant(Tensor::from_vec(vec![1.0]));
        assert!(motion_difference(&mut g, mismatch, zs).is_err());
    }
}
