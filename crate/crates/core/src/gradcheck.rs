//! Central-difference verification of every adjoint on the tape, plus the
//! composed losses and modules built from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::edi::{
    address_driven, address_motion_source, alignment_loss, memory_loss, recall, Compressor,
    CrossAttentionFuser, Decompressor,
};
use crate::emi::{disentanglement_loss, MotionIndicator, MultiScaleFeatures, QueryExtractor};
use crate::error::Result;
use crate::graph::{Graph, OpKind, Var};
use crate::math;
use crate::nn::{Bound, ParamStore};
use crate::pipeline::{adversarial_loss, generator_adversarial_loss, reconstruction_loss};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_PROBES: usize = 100;

/// Inputs are resampled until no coordinate lies this close to a kink.
const KINK_MARGIN: f64 = 1e-3;

type Sampler = fn(&mut ChaCha8Rng) -> Vec<Tensor>;
type Eval = fn(&mut Graph, &[Var]) -> Result<Var>;

/// One registered differentiable computation.
#[derive(Clone, Copy)]
pub struct Check {
    pub name: &'static str,
    /// The tape primitive this check isolates, if any.
    pub kind: Option<OpKind>,
    /// Trailing inputs held fixed: they feed a gradient-blocked path.
    frozen: usize,
    sample: Sampler,
    eval: Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
    pub passed: bool,
}

/// `|a - c| / (|a| + |c| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn scalarize(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn loss_value(eval: Eval, inputs: &[Tensor], weights: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = eval(&mut g, &vars)?;
    let l = scalarize(&mut g, out, weights)?;
    Ok(g.scalar(l))
}

/// Max relative error between the tape gradient of `sum(w * eval(inputs))`
/// and central differences, over every input coordinate.
pub fn finite_difference_check(
    eval: Eval,
    inputs: &[Tensor],
    weights: Option<&Tensor>,
    frozen: usize,
    h: f64,
    fault: Option<OpKind>,
) -> Result<f64> {
    let mut g = match fault {
        Some(kind) => Graph::with_adjoint_fault(kind),
        None => Graph::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = eval(&mut g, &vars)?;
    let w = match weights {
        Some(w) => w.clone(),
        None => Tensor::ones(g.shape(out)),
    };
    let loss = scalarize(&mut g, out, &w)?;
    let grads = g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    let live = vars.len().saturating_sub(frozen);
    for (i, v) in vars.iter().enumerate().take(live) {
        let analytic = grads.get(*v);
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let up = loss_value(eval, &probe, &w)?;
            probe[i].data_mut()[j] = x0 - h;
            let down = loss_value(eval, &probe, &w)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

impl Check {
    /// Runs `probes` random probes; the output is contracted with random weights.
    pub fn run(&self, probes: usize, seed: u64, h: f64, fault: Option<OpKind>) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..probes {
            let inputs = (self.sample)(&mut rng);
            let shape = {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                let out = (self.eval)(&mut g, &vars)?;
                g.shape(out).to_vec()
            };
            let w = Tensor::uniform(&shape, 0.5, 1.5, &mut rng);
            worst = worst.max(finite_difference_check(self.eval, &inputs, Some(&w), self.frozen, h, fault)?);
        }
        Ok(worst)
    }
}

// ---- samplers ----

fn gauss(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Gaussian entries kept at least `KINK_MARGIN` away from every kink point.
fn gauss_away(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64]) -> Tensor {
    let mut t = gauss(rng, shape);
    for x in t.data_mut() {
        while kinks.iter().any(|k| (*x - k).abs() < KINK_MARGIN) {
            *x = rng.random_range(-2.0..2.0);
        }
    }
    t
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

// ---- tiny module configuration ----

fn tiny() -> ModelConfig {
    ModelConfig {
        scale_channels: [2, 2, 2, 4, 2],
        scale_sizes: [5, 4, 3, 2, 1],
        d_top: 3,
        d_z: 3,
        d_model: 4,
        query_tokens: 2,
        extractor_blocks: 1,
        slots: 4,
        d_c: 3,
        heads: 2,
        xi: 0.1,
        address_temperature: 1.0,
        train_uses_recall: true,
        gen_hidden: 4,
        disc_hidden: 3,
    }
}

fn module_params<M>(
    build: fn(&mut ParamStore, &ModelConfig, &mut ChaCha8Rng) -> Result<M>,
    rng: &mut ChaCha8Rng,
) -> Vec<Tensor> {
    let mut store = ParamStore::new();
    build(&mut store, &tiny(), rng).expect("tiny module builds");
    store.iter().map(|(_, t)| t.clone()).collect()
}

/// Rebuilds the module layout and binds its parameters to `vars`.
fn module_layout<M>(
    build: fn(&mut ParamStore, &ModelConfig, &mut ChaCha8Rng) -> Result<M>,
    vars: &[Var],
) -> Result<(M, Bound)> {
    let mut store = ParamStore::new();
    let m = build(&mut store, &tiny(), &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok((m, Bound::from_vars(vars.to_vec())))
}

fn detail_grid(rng: &mut ChaCha8Rng) -> Tensor {
    gauss(rng, &[2, 4, 2, 2])
}

fn build_extractor(s: &mut ParamStore, c: &ModelConfig, r: &mut ChaCha8Rng) -> Result<QueryExtractor> {
    QueryExtractor::new(s, c, r)
}
fn build_motion(s: &mut ParamStore, c: &ModelConfig, r: &mut ChaCha8Rng) -> Result<MotionIndicator> {
    MotionIndicator::new(s, c, r)
}
fn build_compressor(s: &mut ParamStore, c: &ModelConfig, r: &mut ChaCha8Rng) -> Result<Compressor> {
    Compressor::new(s, c, r)
}
fn build_decompressor(s: &mut ParamStore, c: &ModelConfig, r: &mut ChaCha8Rng) -> Result<Decompressor> {
    Decompressor::new(s, c, r)
}
fn build_fuser(s: &mut ParamStore, c: &ModelConfig, r: &mut ChaCha8Rng) -> Result<CrossAttentionFuser> {
    CrossAttentionFuser::new(s, c, r)
}

fn with_params<M>(
    data: Vec<Tensor>,
    build: fn(&mut ParamStore, &ModelConfig, &mut ChaCha8Rng) -> Result<M>,
    rng: &mut ChaCha8Rng,
) -> Vec<Tensor> {
    let mut v = data;
    v.extend(module_params(build, rng));
    v
}

/// Rows of `(u, v)` whose cosine stays clear of the hinge margin.
fn hinge_safe_pair(rng: &mut ChaCha8Rng, xi: f64) -> Vec<Tensor> {
    loop {
        let u = gauss(rng, &[4, 3]);
        let v = gauss(rng, &[4, 3]);
        let ok = u
            .data()
            .chunks(3)
            .zip(v.data().chunks(3))
            .all(|(a, b)| (crate::world::cosine(a, b) - xi).abs() > KINK_MARGIN);
        if ok {
            return vec![u, v];
        }
    }
}

/// Every registered check: all tape primitives first, then composed pieces.
pub fn registry() -> Vec<Check> {
    use OpKind as K;
    let c = |name, kind, sample: Sampler, eval: Eval| Check {
        name,
        kind,
        frozen: 0,
        sample,
        eval,
    };
    vec![
        c("matmul", Some(K::MatMul), |r| vec![gauss(r, &[3, 4]), gauss(r, &[4, 2])], |g, v| g.matmul(v[0], v[1])),
        c("batch_matmul", Some(K::BatchMatMul), |r| vec![gauss(r, &[2, 3, 4]), gauss(r, &[2, 4, 2])], |g, v| g.bmm(v[0], v[1])),
        c("permute", Some(K::Permute), |r| vec![gauss(r, &[2, 3, 4])], |g, v| {
            let p = g.permute(v[0], &[2, 0, 1])?;
            g.tanh(p)
        }),
        c("reshape", Some(K::Reshape), |r| vec![gauss(r, &[2, 6])], |g, v| {
            let x = g.reshape(v[0], &[3, 4])?;
            g.tanh(x)
        }),
        c("add", Some(K::Add), |r| vec![gauss(r, &[3, 2]), gauss(r, &[3, 2])], |g, v| g.add(v[0], v[1])),
        c("sub", Some(K::Sub), |r| vec![gauss(r, &[3, 2]), gauss(r, &[3, 2])], |g, v| g.sub(v[0], v[1])),
        c("mul", Some(K::Mul), |r| vec![gauss(r, &[3, 2]), gauss(r, &[3, 2])], |g, v| g.mul(v[0], v[1])),
        c("add_row", Some(K::AddRow), |r| vec![gauss(r, &[2, 3, 4]), gauss(r, &[4])], |g, v| g.add_row(v[0], v[1])),
        c("affine", Some(K::Affine), |r| vec![gauss(r, &[5])], |g, v| g.affine(v[0], -1.7, 0.3)),
        c("mul_scalar", Some(K::MulScalar), |r| vec![gauss(r, &[4]), gauss(r, &[])], |g, v| g.mul_scalar(v[0], v[1])),
        c("tanh", Some(K::Tanh), |r| vec![gauss(r, &[6])], |g, v| g.tanh(v[0])),
        c("relu", Some(K::Relu), |r| vec![gauss_away(r, &[6], &[0.0])], |g, v| g.relu(v[0])),
        c("sigmoid", Some(K::Sigmoid), |r| vec![gauss(r, &[6])], |g, v| g.sigmoid(v[0])),
        c("exp", Some(K::Exp), |r| vec![gauss(r, &[6])], |g, v| g.exp(v[0])),
        c("ln", Some(K::Ln), |r| vec![positive(r, &[6])], |g, v| g.ln(v[0])),
        c("abs", Some(K::Abs), |r| vec![gauss_away(r, &[6], &[0.0])], |g, v| g.abs(v[0])),
        c("clamp", Some(K::Clamp), |r| vec![gauss_away(r, &[6], &[-0.5, 0.5])], |g, v| g.clamp(v[0], -0.5, 0.5)),
        c("softmax", Some(K::Softmax), |r| vec![gauss(r, &[3, 5])], |g, v| g.softmax(v[0])),
        c("sum_axis", Some(K::SumAxis), |r| vec![gauss(r, &[2, 3, 4])], |g, v| {
            let s = g.sum_axis(v[0], 1)?;
            g.tanh(s)
        }),
        c("sum_all", Some(K::SumAll), |r| vec![gauss(r, &[3, 4])], |g, v| {
            let t = g.tanh(v[0])?;
            g.sum(t)
        }),
        c("concat_last", Some(K::ConcatLast), |r| vec![gauss(r, &[2, 3]), gauss(r, &[2, 2])], |g, v| {
            let x = g.concat_last(v[0], v[1])?;
            g.tanh(x)
        }),
        c("slice_last", Some(K::SliceLast), |r| vec![gauss(r, &[2, 6])], |g, v| {
            let x = g.slice_last(v[0], 1, 3)?;
            g.tanh(x)
        }),
        c("broadcast_leading", Some(K::BroadcastLeading), |r| vec![gauss(r, &[2, 3])], |g, v| {
            let x = g.broadcast_leading(v[0], 3)?;
            g.tanh(x)
        }),
        c("normalize_last", Some(K::NormalizeLast), |r| vec![gauss(r, &[3, 4])], |g, v| g.normalize_last(v[0])),
        c("norm_last", Some(K::NormLast), |r| vec![gauss(r, &[3, 4])], |g, v| g.norm_last(v[0])),
        c("kl_last", Some(K::KlLast), |r| vec![gauss(r, &[3, 4]), gauss(r, &[3, 4])], |g, v| {
            let p = g.softmax(v[0])?;
            let q = g.softmax(v[1])?;
            g.kl_last(p, q)
        }),
        // primitives of the model vocabulary
        c("linear_map", None, |r| vec![gauss(r, &[4]), gauss(r, &[4, 3])], |g, v| {
            let x = g.reshape(v[0], &[1, 4])?;
            g.matmul(x, v[1])
        }),
        c("softmax_temperature", None, |r| vec![Tensor::randn(&[2, 5], 0.3, r)], |g, v| math::softmax(g, v[0], 0.3)),
        c("softmax_dot_chain", None, |r| vec![gauss(r, &[3, 4]), gauss(r, &[4])], |g, v| {
            let b = g.reshape(v[1], &[4, 1])?;
            let d = g.matmul(v[0], b)?;
            let d = g.reshape(d, &[3])?;
            g.softmax(d)
        }),
        c("cosine_similarity", None, |r| vec![gauss(r, &[3, 4]), gauss(r, &[3, 4])], |g, v| math::cosine_similarity(g, v[0], v[1])),
        c("kl_divergence", None, |r| vec![gauss(r, &[4]), gauss(r, &[4])], |g, v| {
            let p = g.softmax(v[0])?;
            let q = g.softmax(v[1])?;
            math::kl_divergence(g, p, q)
        }),
        c("avg_pool_spatial", None, |r| vec![gauss(r, &[2, 3, 2, 2])], |g, v| {
            let p = math::avg_pool_spatial(g, v[0])?;
            g.tanh(p)
        }),
        c("weighted_sum", None, |r| vec![gauss(r, &[4]), gauss(r, &[4]), gauss(r, &[4]), gauss(r, &[3])], |g, v| {
            math::weighted_sum(g, &v[..3], v[3])
        }),
        // indicator modules
        c("query_extractor", None, |r| with_params(vec![detail_grid(r)], build_extractor, r), |g, v| {
            let (m, p) = module_layout(build_extractor, &v[1..])?;
            m.forward(g, &p, v[0])
        }),
        c("motion_fusion", None, |r| {
            let cfg = tiny();
            let grids = (0..5)
                .map(|k| gauss(r, &[2, cfg.scale_channels[k], cfg.scale_sizes[k], cfg.scale_sizes[k]]))
                .collect();
            with_params(grids, build_motion, r)
        }, |g, v| {
            let (m, p) = module_layout(build_motion, &v[5..])?;
            let feats = MultiScaleFeatures {
                grids: [v[0], v[1], v[2], v[3], v[4]],
                top: v[0],
            };
            m.fuse_motion(g, &p, &feats)
        }),
        c("compress", None, |r| with_params(vec![detail_grid(r)], build_compressor, r), |g, v| {
            let (m, p) = module_layout(build_compressor, &v[1..])?;
            m.compress(g, &p, v[0])
        }),
        c("decompress", None, |r| with_params(vec![gauss(r, &[2, 3])], build_decompressor, r), |g, v| {
            let (m, p) = module_layout(build_decompressor, &v[1..])?;
            let target = m.target_shape();
            m.decompress(g, &p, v[0], target)
        }),
        c("mhca_fuse", None, |r| with_params(vec![detail_grid(r), detail_grid(r)], build_fuser, r), |g, v| {
            let (m, p) = module_layout(build_fuser, &v[2..])?;
            m.fuse(g, &p, v[0], v[1])
        }),
        c("address_driven", None, |r| vec![gauss(r, &[2, 3]), gauss(r, &[4, 3])], |g, v| address_driven(g, v[0], v[1], 1.0)),
        c("address_motion_source", None, |r| vec![gauss(r, &[2, 3]), gauss(r, &[2, 3]), gauss(r, &[4, 6])], |g, v| {
            address_motion_source(g, v[0], v[1], v[2], 0.5)
        }),
        c("recall", None, |r| vec![gauss(r, &[2, 4]), gauss(r, &[4, 3])], |g, v| {
            let omega = g.softmax(v[0])?;
            recall(g, omega, v[1])
        }),
        // composed losses
        c("L_dis", None, |r| hinge_safe_pair(r, 0.1), |g, v| disentanglement_loss(g, v[0], v[1], 0.1)),
        c("L_dmem", None, |r| vec![gauss(r, &[2, 3]), gauss(r, &[4, 3])], |g, v| {
            let omega = address_driven(g, v[0], v[1], 1.0)?;
            let recalled = recall(g, omega, v[1])?;
            memory_loss(g, v[0], recalled)
        }),
        Check { frozen: 2, ..c("L_align", None, |r| vec![gauss(r, &[2, 3]), gauss(r, &[2, 3]), gauss(r, &[4, 6]), gauss(r, &[2, 3]), gauss(r, &[4, 3])], |g, v| {
            let ms = address_motion_source(g, v[0], v[1], v[2], 1.0)?;
            let d = address_driven(g, v[3], v[4], 1.0)?;
            alignment_loss(g, ms, d)
        }) },
        c("L_rec", None, |r| {
            let a = gauss(r, &[2, 5]);
            let mut b = gauss(r, &[2, 5]);
            for (x, y) in b.data_mut().iter_mut().zip(a.data()) {
                while (*x - y).abs() < KINK_MARGIN {
                    *x = r.random_range(-2.0..2.0);
                }
            }
            vec![a, b]
        }, |g, v| reconstruction_loss(g, v[0], v[1])),
        c("L_adv", None, |r| vec![Tensor::uniform(&[4], 0.05, 0.95, r), Tensor::uniform(&[4], 0.05, 0.95, r)], |g, v| {
            adversarial_loss(g, v[0], v[1])
        }),
        c("L_adv_generator", None, |r| vec![Tensor::uniform(&[4], 0.05, 0.95, r)], |g, v| generator_adversarial_loss(g, v[0])),
    ]
}

/// Runs the whole registry; `fault` corrupts one primitive's adjoint.
pub fn run_all(probes: usize, seed: u64, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let results = registry()
        .iter()
        .enumerate()
        .map(|(i, check)| {
            let err = check.run(probes, seed.wrapping_add(i as u64), DEFAULT_STEP, fault)?;
            Ok(CheckResult {
                name: check.name.into(),
                probes,
                max_rel_error: err,
                passed: err < DEFAULT_TOLERANCE,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let passed = results.iter().all(|r| r.passed);
    Ok(GradcheckReport {
        step: DEFAULT_STEP,
        tolerance: DEFAULT_TOLERANCE,
        results,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_tape_primitive_is_registered() {
        let reg = registry();
        for kind in OpKind::DIFFERENTIABLE {
            assert!(reg.iter().any(|c| c.kind == Some(kind)), "{kind} missing");
        }
    }

    #[test]
    fn linear_map_is_exact() {
        let check = registry().into_iter().find(|c| c.name == "linear_map").unwrap();
        assert!(check.run(10, 1, DEFAULT_STEP, None).unwrap() < 1e-8);
    }

    #[test]
    fn relative_error_formula() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 3.0) - 0.5).abs() < 1e-12);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }

    #[test]
    fn corrupted_adjoint_is_caught_by_name() {
        let report = run_all(3, 5, Some(OpKind::Tanh)).unwrap();
        let tanh = report.results.iter().find(|r| r.name == "tanh").unwrap();
        assert!(!tanh.passed);
        assert!(!report.passed);
        let matmul = report.results.iter().find(|r| r.name == "matmul").unwrap();
        assert!(matmul.passed);
    }
}
