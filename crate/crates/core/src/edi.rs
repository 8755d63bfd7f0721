//! Detail indicator: a dual slot memory for the scale-4 detail feature.
//!
//! Training writes compressed driven tokens into the driven-identity bank
//! `M_d` (by gradient descent on the recall distance) and teaches the
//! motion-source bank `M_ms` to produce the same addresses from
//! `concat(source token, z_d - z_s)`. Inference reads `M_d` with the
//! motion-source address, decompresses the recalled token to a grid and fuses
//! it into the source scale-4 skip with multi-head cross-attention.

use rand::Rng;

use crate::config::ModelConfig;
use crate::emi::{grid_to_tokens, tokens_to_grid};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math::{avg_pool_spatial, cosine_matrix, kl_divergence, softmax};
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::world::unit_vector;

/// Recall accepts addresses whose rows sum to one within this tolerance.
pub const RECALL_SIMPLEX_TOL: f64 = 1e-5;

/// Slots whose norm falls below this are re-drawn.
pub const SLOT_UNDERFLOW: f64 = 1e-6;

/// Average pooling followed by a learnable per-output convex channel mix.
#[derive(Clone, Debug)]
pub struct Compressor {
    pub logits: ParamId,
    channels: usize,
    d_c: usize,
}

impl Compressor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let channels = cfg.detail_channels();
        let logits = store.register("edi.pi.logits", Tensor::randn(&[cfg.d_c, channels], 1.0, rng))?;
        Ok(Compressor {
            logits,
            channels,
            d_c: cfg.d_c,
        })
    }

    /// `[b, c, s, s] -> [b, d_c]`.
    pub fn compress(&self, g: &mut Graph, p: &Bound, f4: Var) -> Result<Var> {
        let shape = g.shape(f4).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::dim("compress", &shape, &[self.channels]));
        }
        let pooled = avg_pool_spatial(g, f4)?;
        let w = g.softmax(p[self.logits])?; // [d_c, c], rows convex
        let wt = g.transpose(w)?;
        let out = g.matmul(pooled, wt)?;
        debug_assert_eq!(g.shape(out)[1], self.d_c);
        Ok(out)
    }
}

/// Token-to-channel linear map broadcast over the grid plus positional embeddings.
#[derive(Clone, Debug)]
pub struct Decompressor {
    pub proj: Linear,
    pub positions: ParamId,
    channels: usize,
    side: usize,
}

impl Decompressor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let channels = cfg.detail_channels();
        let side = cfg.detail_size();
        let proj = Linear::new(store, "edi.lambda.proj", cfg.d_c, channels, true, rng)?;
        let positions = store.register(
            "edi.lambda.pos",
            Tensor::randn(&[side, side, channels], 0.1, rng),
        )?;
        Ok(Decompressor {
            proj,
            positions,
            channels,
            side,
        })
    }

    pub fn target_shape(&self) -> [usize; 3] {
        [self.channels, self.side, self.side]
    }

    /// `[b, d_c] -> [b, c, s, s]`; `target` must equal the configured grid shape.
    pub fn decompress(&self, g: &mut Graph, p: &Bound, token: Var, target: [usize; 3]) -> Result<Var> {
        if target != self.target_shape() {
            return Err(Error::dim("decompress", &target, &self.target_shape()));
        }
        let batch = g.shape(token)[0];
        let t = self.side * self.side;
        let lifted = self.proj.forward(g, p, token)?; // [b, c]
        let rep = g.broadcast_leading(lifted, t)?; // [t, b, c]
        let tokens = g.permute(rep, &[1, 0, 2])?; // [b, t, c]
        let pos = g.reshape(p[self.positions], &[t, self.channels])?;
        let pos = g.broadcast_leading(pos, batch)?;
        let tokens = g.add(tokens, pos)?;
        tokens_to_grid(g, tokens, self.side)
    }
}

/// Multi-head cross-attention: queries from the source grid, keys and values
/// from the decompressed detail grid, residual on the source grid.
#[derive(Clone, Debug)]
pub struct CrossAttentionFuser {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    heads: usize,
    channels: usize,
}

impl CrossAttentionFuser {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.detail_channels();
        if c % cfg.heads != 0 {
            return Err(Error::Contract(format!(
                "{} heads do not divide {c} channels",
                cfg.heads
            )));
        }
        Ok(CrossAttentionFuser {
            q: Linear::new(store, "edi.mhca.q", c, c, true, rng)?,
            k: Linear::new(store, "edi.mhca.k", c, c, false, rng)?,
            v: Linear::new(store, "edi.mhca.v", c, c, true, rng)?,
            o: Linear::new(store, "edi.mhca.o", c, c, false, rng)?,
            heads: cfg.heads,
            channels: c,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let dh = self.channels / self.heads;
        let r = g.reshape(x, &[s[0], s[1], self.heads, dh])?;
        g.permute(r, &[0, 2, 1, 3])
    }

    /// Returns the fused grid and the attention map `[b, heads, t, t]`.
    pub fn fuse_traced(&self, g: &mut Graph, p: &Bound, f_s4: Var, f_hat4: Var) -> Result<(Var, Var)> {
        if g.shape(f_s4) != g.shape(f_hat4) {
            return Err(Error::dim("mhca_fuse", g.shape(f_s4), g.shape(f_hat4)));
        }
        let shape = g.shape(f_s4).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::dim("mhca_fuse", &shape, &[self.channels]));
        }
        let (b, side) = (shape[0], shape[2]);
        let t = side * side;
        let x = grid_to_tokens(g, f_s4)?;
        let y = grid_to_tokens(g, f_hat4)?;
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, y)?;
        let v = self.v.forward(g, p, y)?;
        let (qh, kh, vh) = (
            self.split_heads(g, q)?,
            self.split_heads(g, k)?,
            self.split_heads(g, v)?,
        );
        let kt = g.transpose(kh)?;
        let scores = g.bmm(qh, kt)?;
        let dh = (self.channels / self.heads) as f64;
        let scores = g.scale(scores, 1.0 / dh.sqrt())?;
        let attn = g.softmax(scores)?;
        let mixed = g.bmm(attn, vh)?; // [b, h, t, dh]
        let merged = g.permute(mixed, &[0, 2, 1, 3])?;
        let merged = g.reshape(merged, &[b, t, self.channels])?;
        let out = self.o.forward(g, p, merged)?;
        let fused = g.add(x, out)?;
        Ok((tokens_to_grid(g, fused, side)?, attn))
    }

    pub fn fuse(&self, g: &mut Graph, p: &Bound, f_s4: Var, f_hat4: Var) -> Result<Var> {
        Ok(self.fuse_traced(g, p, f_s4, f_hat4)?.0)
    }
}

/// Both memory banks; slot `i` of one corresponds to slot `i` of the other.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    pub driven: ParamId,
    pub motion_source: ParamId,
    pub slots: usize,
}

impl MemoryBank {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let driven = store.register("edi.M_d", unit_rows(cfg.slots, cfg.d_c, rng))?;
        let motion_source =
            store.register("edi.M_ms", unit_rows(cfg.slots, cfg.d_c + cfg.d_z, rng))?;
        Ok(MemoryBank {
            driven,
            motion_source,
            slots: cfg.slots,
        })
    }

    /// Re-draws any slot whose norm underflowed. Returns how many were reset.
    pub fn guard_slots<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> usize {
        let mut reset = 0;
        for (name, id) in [("edi.M_d", self.driven), ("edi.M_ms", self.motion_source)] {
            let t = store.get_mut(id);
            let width = t.shape()[1];
            for (i, row) in t.data_mut().chunks_mut(width).enumerate() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < SLOT_UNDERFLOW || !norm.is_finite() {
                    row.copy_from_slice(&unit_vector(width, rng));
                    log::warn!("{name} slot {i} norm {norm:e} underflowed; re-initialized");
                    reset += 1;
                }
            }
        }
        reset
    }
}

fn unit_rows<R: Rng + ?Sized>(rows: usize, width: usize, rng: &mut R) -> Tensor {
    let data: Vec<f64> = (0..rows).flat_map(|_| unit_vector(width, rng)).collect();
    Tensor::new(vec![rows, width], data).expect("slot matrix")
}

/// Cosine-softmax addressing: `softmax_i cos(query, slot_i)`; `[b, n] x [S, n] -> [b, S]`.
pub fn address(g: &mut Graph, query: Var, slots: Var, temperature: f64) -> Result<Var> {
    let sims = cosine_matrix(g, query, slots)?;
    softmax(g, sims, temperature)
}

/// Address of the driven-identity bank from a driven token.
pub fn address_driven(g: &mut Graph, f_d_pi: Var, m_d: Var, temperature: f64) -> Result<Var> {
    address(g, f_d_pi, m_d, temperature)
}

/// Address of the motion-source bank from `concat(f_s_pi, z_ds)`.
pub fn address_motion_source(
    g: &mut Graph,
    f_s_pi: Var,
    z_ds: Var,
    m_ms: Var,
    temperature: f64,
) -> Result<Var> {
    let q = g.concat_last(f_s_pi, z_ds)?;
    address(g, q, m_ms, temperature)
}

/// Convex combination of driven-bank slots: `[b, S] x [S, d_c] -> [b, d_c]`.
pub fn recall(g: &mut Graph, omega: Var, m_d: Var) -> Result<Var> {
    let shape = g.shape(omega).to_vec();
    let n = *shape.last().unwrap_or(&0);
    for (r, row) in g.value(omega).data().chunks(n.max(1)).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > RECALL_SIMPLEX_TOL || row.iter().any(|&w| w < -RECALL_SIMPLEX_TOL) {
            return Err(Error::Contract(format!(
                "recall address row {r} is off the simplex (sum {sum})"
            )));
        }
    }
    g.matmul(omega, m_d)
}

/// Mean L2 distance between tokens and their recalls.
pub fn memory_loss(g: &mut Graph, f_d_pi: Var, recalled: Var) -> Result<Var> {
    let diff = g.sub(f_d_pi, recalled)?;
    let n = g.norm_last(diff)?;
    g.mean(n)
}

/// Mean `KL(omega_ms || omega_d)` with the driven address held fixed.
pub fn alignment_loss(g: &mut Graph, omega_ms: Var, omega_d: Var) -> Result<Var> {
    let target = g.detach(omega_d);
    let kl = kl_divergence(g, omega_ms, target)?;
    g.mean(kl)
}

/// All detail-indicator parameters.
#[derive(Clone, Debug)]
pub struct DetailIndicator {
    pub compressor: Compressor,
    pub decompressor: Decompressor,
    pub memory: MemoryBank,
    pub fuser: CrossAttentionFuser,
    pub temperature: f64,
}

impl DetailIndicator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(DetailIndicator {
            compressor: Compressor::new(store, cfg, rng)?,
            decompressor: Decompressor::new(store, cfg, rng)?,
            memory: MemoryBank::new(store, cfg, rng)?,
            fuser: CrossAttentionFuser::new(store, cfg, rng)?,
            temperature: cfg.address_temperature,
        })
    }

    /// Recalls through the motion-source address and fuses into `f_s4`.
    pub fn render_detail(&self, g: &mut Graph, p: &Bound, f_s4: Var, token: Var) -> Result<Var> {
        let hat = self
            .decompressor
            .decompress(g, p, token, self.decompressor.target_shape())?;
        self.fuser.fuse(g, p, f_s4, hat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, DetailIndicator, ModelConfig) {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let edi = DetailIndicator::new(&mut store, &cfg, &mut rng).unwrap();
        (store, edi, cfg)
    }

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn compress_shape_and_constant_grid() {
        let (store, edi, cfg) = setup();
        let c = cfg.detail_channels();
        for s in [1, 2, 4] {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let f4 = g.constant(Tensor::full(&[2, c, s, s], 0.7));
            let tok = edi.compressor.compress(&mut g, &p, f4).unwrap();
            assert_eq!(g.shape(tok), &[2, cfg.d_c]);
            // convex weights of a constant grid reproduce the constant
            for v in g.value(tok).data() {
                assert!((v - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decompress_restores_shape_and_is_affine() {
        let (mut store, edi, cfg) = setup();
        let c = cfg.detail_channels();
        let s = cfg.detail_size();
        *store.get_mut(edi.decompressor.positions) = Tensor::zeros(&[s, s, c]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let zero = g.constant(Tensor::zeros(&[1, cfg.d_c]));
        let grid = edi
            .decompressor
            .decompress(&mut g, &p, zero, [c, s, s])
            .unwrap();
        assert_eq!(g.shape(grid), &[1, c, s, s]);
        // zero token, zero positions: every cell equals the bias
        let bias = store.get(edi.decompressor.proj.bias.unwrap()).data().to_vec();
        for ch in 0..c {
            for cell in 0..s * s {
                assert_eq!(g.value(grid).data()[ch * s * s + cell], bias[ch]);
            }
        }
        assert!(edi
            .decompressor
            .decompress(&mut g, &p, zero, [c, s + 1, s + 1])
            .is_err());
    }

    #[test]
    fn decompress_projection_has_full_column_rank() {
        let (store, edi, cfg) = setup();
        // weight is [d_c, c]; tokens map injectively iff rank == d_c
        let w = store.get(edi.decompressor.proj.weight);
        let rank = numeric_rank(w.data(), cfg.d_c, cfg.detail_channels());
        assert_eq!(rank, cfg.d_c);
    }

    fn numeric_rank(data: &[f64], rows: usize, cols: usize) -> usize {
        let mut m: Vec<Vec<f64>> = (0..rows).map(|r| data[r * cols..(r + 1) * cols].to_vec()).collect();
        let mut rank = 0;
        for col in 0..cols {
            let Some(piv) = (rank..rows).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())) else {
                break;
            };
            if m[piv][col].abs() < 1e-9 {
                continue;
            }
            m.swap(rank, piv);
            for r in 0..rows {
                if r != rank {
                    let f = m[r][col] / m[rank][col];
                    for c in 0..cols {
                        m[r][c] -= f * m[rank][c];
                    }
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn address_peaks_at_matching_slot() {
        let mut g = Graph::new();
        let slots = g.constant(mat(3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let q = g.constant(mat(1, 3, &[0., 2., 0.]));
        let w = address_driven(&mut g, q, slots, 1.0).unwrap();
        let v = g.value(w).data();
        assert!(v[1] > v[0] && v[1] > v[2]);
    }

    #[test]
    fn address_reference_similarities() {
        // slots at angles giving cosines 1, 0, -1 with the query
        let mut g = Graph::new();
        let slots = g.constant(mat(3, 2, &[1., 0., 0., 1., -1., 0.]));
        let q = g.constant(mat(1, 2, &[3., 0.]));
        let w = address_driven(&mut g, q, slots, 1.0).unwrap();
        for (v, e) in g.value(w).data().iter().zip([0.66524, 0.24473, 0.09003]) {
            assert!((v - e).abs() < 1e-4);
        }
    }

    #[test]
    fn identical_slots_give_uniform_address() {
        let mut g = Graph::new();
        let slots = g.constant(mat(4, 2, &[1., 2., 1., 2., 1., 2., 1., 2.]));
        let q = g.constant(mat(1, 2, &[-0.3, 0.9]));
        let w = address_driven(&mut g, q, slots, 1.0).unwrap();
        for v in g.value(w).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn motion_source_address_with_zero_difference() {
        let mut g = Graph::new();
        let slots = g.constant(mat(3, 3, &[1., 0., 0.5, 0., 1., 0., -1., 0., 0.]));
        let f = g.constant(mat(1, 2, &[1.0, 0.2]));
        let z = g.constant(mat(1, 1, &[0.0]));
        let w = address_motion_source(&mut g, f, z, slots, 1.0).unwrap();
        let w2 = address_motion_source(&mut g, f, z, slots, 1.0).unwrap();
        assert_eq!(g.value(w), g.value(w2));
        assert!((g.value(w).data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(address_motion_source(&mut g, f, f, slots, 1.0).is_err());
    }

    #[test]
    fn recall_examples() {
        let mut g = Graph::new();
        let slots = g.constant(mat(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let one_hot = g.constant(mat(1, 3, &[0., 1., 0.]));
        let r = recall(&mut g, one_hot, slots).unwrap();
        assert_eq!(g.value(r).data(), &[3., 4.]);

        let same = g.constant(mat(3, 2, &[2., -1., 2., -1., 2., -1.]));
        let uni = g.constant(mat(1, 3, &[1. / 3., 1. / 3., 1. / 3.]));
        let r = recall(&mut g, uni, same).unwrap();
        for (v, e) in g.value(r).data().iter().zip([2., -1.]) {
            assert!((v - e).abs() < 1e-12);
        }

        let two = g.constant(mat(2, 2, &[0., 0., 4., 8.]));
        let w = g.constant(mat(1, 2, &[0.25, 0.75]));
        let r = recall(&mut g, w, two).unwrap();
        assert_eq!(g.value(r).data(), &[3., 6.]);

        let bad = g.constant(mat(1, 2, &[0.5, 0.6]));
        assert!(matches!(recall(&mut g, bad, two), Err(Error::Contract(_))));
    }

    #[test]
    fn memory_loss_examples() {
        let mut g = Graph::new();
        let a = g.constant(mat(1, 2, &[1., 1.]));
        let l = memory_loss(&mut g, a, a).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let b = g.constant(mat(1, 2, &[4., 5.]));
        let l = memory_loss(&mut g, b, a).unwrap();
        assert!((g.scalar(l) - 5.0).abs() < 1e-12);
        let c = g.constant(mat(1, 3, &[4., 5., 0.]));
        assert!(memory_loss(&mut g, c, a).is_err());
    }

    #[test]
    fn memory_loss_reaches_slots() {
        let (store, edi, cfg) = setup();
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tok = g.constant(Tensor::randn(&[3, cfg.d_c], 1.0, &mut rng));
        let m_d = p[edi.memory.driven];
        let w = address_driven(&mut g, tok, m_d, 1.0).unwrap();
        let r = recall(&mut g, w, m_d).unwrap();
        let l = memory_loss(&mut g, tok, r).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(m_d).l2_norm() > 0.0);
    }

    #[test]
    fn alignment_loss_examples_and_blocked_target() {
        let mut g = Graph::new();
        let p = g.param(mat(1, 2, &[0.5, 0.5]));
        let q = g.param(mat(1, 2, &[0.9, 0.1]));
        let l = alignment_loss(&mut g, p, p).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);
        let l = alignment_loss(&mut g, p, q).unwrap();
        assert!((g.scalar(l) - 0.5108).abs() < 1e-3);
        let grads = g.backward(l).unwrap();
        assert!(!grads.has(q));
        assert_eq!(grads.get(q).data(), &[0.0, 0.0]);
        assert!(grads.get(p).l2_norm() > 0.0);
    }

    #[test]
    fn mhca_single_position_and_residual() {
        let mut cfg = ModelConfig::default();
        cfg.scale_sizes = [6, 5, 4, 1, 1];
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fuser = CrossAttentionFuser::new(&mut store, &cfg, &mut rng).unwrap();
        let c = cfg.detail_channels();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let fs = g.constant(Tensor::randn(&[2, c, 1, 1], 1.0, &mut rng));
        let fh = g.constant(Tensor::randn(&[2, c, 1, 1], 1.0, &mut rng));
        let (out, attn) = fuser.fuse_traced(&mut g, &p, fs, fh).unwrap();
        assert!(g.value(attn).data().iter().all(|&w| w == 1.0));
        // output = f_s + O(V(f_hat))
        let y = grid_to_tokens(&mut g, fh).unwrap();
        let v = fuser.v.forward(&mut g, &p, y).unwrap();
        let o = fuser.o.forward(&mut g, &p, v).unwrap();
        let og = tokens_to_grid(&mut g, o, 1).unwrap();
        let expected = g.add(fs, og).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(expected).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mhca_zero_detail_is_residual_only() {
        let (store, edi, cfg) = setup();
        let c = cfg.detail_channels();
        let s = cfg.detail_size();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let fs = g.constant(Tensor::randn(&[2, c, s, s], 1.0, &mut rng));
        let zero = g.constant(Tensor::zeros(&[2, c, s, s]));
        let out = edi.fuser.fuse(&mut g, &p, fs, zero).unwrap();
        assert_eq!(g.value(out), g.value(fs));
    }

    #[test]
    fn mhca_identity_projections_self_fusion() {
        let mut cfg = ModelConfig::default();
        cfg.heads = 1;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fuser = CrossAttentionFuser::new(&mut store, &cfg, &mut rng).unwrap();
        let c = cfg.detail_channels();
        for lin in [&fuser.q, &fuser.k, &fuser.v, &fuser.o] {
            *store.get_mut(lin.weight) = Tensor::eye(c);
        }
        let s = cfg.detail_size();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let fs = g.constant(Tensor::randn(&[1, c, s, s], 1.0, &mut rng));
        let out = fuser.fuse(&mut g, &p, fs, fs).unwrap();
        assert_eq!(g.shape(out), &[1, c, s, s]);
        assert!(g.value(out).is_finite());
    }

    #[test]
    fn slot_guard_reinitializes_collapsed_slots() {
        let (mut store, edi, cfg) = setup();
        {
            let t = store.get_mut(edi.memory.driven);
            t.data_mut()[..cfg.d_c].iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(edi.memory.guard_slots(&mut store, &mut rng), 1);
        let row = &store.get(edi.memory.driven).data()[..cfg.d_c];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert_eq!(edi.memory.guard_slots(&mut store, &mut rng), 0);
    }
}
