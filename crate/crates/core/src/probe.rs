//! Leakage measurements on frozen models: linear identity probes, the
//! per-scale feature swap sweep, the self/cross reconstruction gap, memory
//! retrieval fidelity and memory bank statistics.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, SCALES};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::pipeline::{AnimateOptions, Model, PairBatch, Swap};
use crate::tensor::Tensor;
use crate::world::{cosine, SyntheticSample, World};

pub const PROBE_RIDGE: f64 = 1e-6;
/// Fraction of samples used for fitting; the rest is the holdout.
pub const PROBE_TRAIN_FRACTION: f64 = 0.75;
/// A probe needs at least this many samples per representation dimension.
pub const SAMPLES_PER_DIM: usize = 10;

const OBS_PROBE_STREAM: u64 = 0x0b5e;
const MOTION_PROBE_STREAM: u64 = 0x2d0e;
const SWEEP_STREAM: u64 = 0x5feb;
const GAP_STREAM: u64 = 0x6a9e;
const RETRIEVAL_STREAM: u64 = 0x7e7e;
const INSPECT_STREAM: u64 = 0x1a5c;

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xa076_1d64_78bd_642f) ^ tag)
}

/// Closed-form ridge regressor with intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityProbe {
    /// `[(input_dim + 1) x output_dim]`, intercept row last.
    coef: DMatrix<f64>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub train_r2: f64,
    pub holdout_r2: f64,
}

fn design(rows: &[Vec<f64>], dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), dim + 1, |i, j| if j < dim { rows[i][j] } else { 1.0 })
}

fn targets(rows: &[Vec<f64>], dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j])
}

/// Pooled coefficient of determination over all output dimensions.
pub fn r_squared(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    let mut sse = 0.0;
    let mut sst = 0.0;
    for j in 0..truth.ncols() {
        let col = truth.column(j);
        let mean = col.mean();
        for i in 0..truth.nrows() {
            sse += (truth[(i, j)] - pred[(i, j)]).powi(2);
            sst += (truth[(i, j)] - mean).powi(2);
        }
    }
    if sst == 0.0 {
        return if sse == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - sse / sst
}

fn check_rows(rows: &[Vec<f64>], what: &'static str) -> Result<usize> {
    let dim = rows.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(Error::Contract(format!("{what}: empty input")));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::dim(what, &[bad.len()], &[dim]));
    }
    Ok(dim)
}

/// Fits on the first 75% of the samples, reports R² on both parts.
pub fn fit_identity_probe(reps: &[Vec<f64>], target_rows: &[Vec<f64>]) -> Result<IdentityProbe> {
    if reps.len() != target_rows.len() {
        return Err(Error::dim("identity probe", &[reps.len()], &[target_rows.len()]));
    }
    let p = check_rows(reps, "identity probe")?;
    let q = check_rows(target_rows, "identity probe")?;
    if reps.len() < SAMPLES_PER_DIM * p {
        return Err(Error::Contract(format!(
            "identity probe needs at least {} samples for dimension {p}, got {}",
            SAMPLES_PER_DIM * p,
            reps.len()
        )));
    }
    let n_train = ((reps.len() as f64) * PROBE_TRAIN_FRACTION).round() as usize;
    let x = design(&reps[..n_train], p);
    let y = targets(&target_rows[..n_train], q);
    let xtx = x.transpose() * &x + DMatrix::identity(p + 1, p + 1) * PROBE_RIDGE;
    let xty = x.transpose() * &y;
    let chol = xtx.cholesky().ok_or_else(|| Error::Numeric {
        op: "identity probe".into(),
        detail: "normal equations not positive definite after ridge".into(),
    })?;
    let coef = chol.solve(&xty);
    if coef.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op: "identity probe".into(),
            detail: "non-finite coefficients".into(),
        });
    }
    let train_r2 = r_squared(&(&x * &coef), &y);
    let xh = design(&reps[n_train..], p);
    let yh = targets(&target_rows[n_train..], q);
    let holdout_r2 = r_squared(&(&xh * &coef), &yh);
    Ok(IdentityProbe {
        coef,
        input_dim: p,
        output_dim: q,
        train_r2,
        holdout_r2,
    })
}

impl IdentityProbe {
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::dim("probe predict", &[x.len()], &[self.input_dim]));
        }
        let row = DVector::from_iterator(
            self.input_dim + 1,
            x.iter().copied().chain(std::iter::once(1.0)),
        );
        Ok((self.coef.transpose() * row).iter().copied().collect())
    }
}

fn random_samples<R: Rng + ?Sized>(world: &World, n: usize, rng: &mut R) -> Result<Vec<SyntheticSample>> {
    (0..n)
        .map(|_| {
            let id = rng.random_range(0..world.identity_count());
            let m = world.random_motion(rng);
            world.sample(world.identity(id)?, &m)
        })
        .collect()
}

fn observations(samples: &[&SyntheticSample]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.observation.clone()).collect();
    Tensor::from_rows(&rows)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.shape()[1];
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

/// Identity probe on raw observations; the instrument that reads identity
/// off generated outputs.
pub fn observation_probe(world: &World, eval: &EvalConfig) -> Result<IdentityProbe> {
    let samples = random_samples(world, eval.probe_samples, &mut stream(eval.seed, OBS_PROBE_STREAM))?;
    let reps: Vec<Vec<f64>> = samples.iter().map(|s| s.observation.clone()).collect();
    let ids: Vec<Vec<f64>> = samples.iter().map(|s| s.identity.clone()).collect();
    fit_identity_probe(&reps, &ids)
}

/// Holdout R² of identity regressed from motion embeddings of driven frames.
pub fn motion_leakage_score(model: &Model, world: &World, eval: &EvalConfig) -> Result<f64> {
    let samples = random_samples(world, eval.probe_samples, &mut stream(eval.seed, MOTION_PROBE_STREAM))?;
    let refs: Vec<&SyntheticSample> = samples.iter().collect();
    let z = model.embed_motion(&observations(&refs)?)?;
    let ids: Vec<Vec<f64>> = samples.iter().map(|s| s.identity.clone()).collect();
    Ok(fit_identity_probe(&rows_of(&z), &ids)?.holdout_r2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    #[serde(rename = "self")]
    SelfDriven,
    Cross,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::SelfDriven => "self",
            Setting::Cross => "cross",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Setting::SelfDriven),
            "cross" => Ok(Setting::Cross),
            other => Err(Error::Contract(format!(
                "unknown setting `{other}`, expected self or cross"
            ))),
        }
    }
}

/// Swap measurement for one intermediate variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapEntry {
    pub variable: String,
    pub similarity_to_source: f64,
    pub similarity_to_driven: f64,
    pub reconstruction_error: f64,
    /// Change of `(sim_driven - sim_source)` relative to the unswapped output.
    pub shift_toward_driven: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub setting: Setting,
    pub pairs: usize,
    pub baseline: SwapEntry,
    /// Scales 1 to 5 in order.
    pub scales: Vec<SwapEntry>,
    /// Top-level code and motion embedding swaps.
    pub extra: Vec<SwapEntry>,
    pub motion_probe_r2: f64,
}

impl ProbeReport {
    /// One-based index of the scale with the largest shift toward the driven identity.
    pub fn dominant_scale(&self) -> usize {
        let mut best = 0;
        for (k, e) in self.scales.iter().enumerate() {
            if e.shift_toward_driven > self.scales[best].shift_toward_driven {
                best = k;
            }
        }
        best + 1
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "setting,scale,similarity_to_source,similarity_to_driven,reconstruction_error,shift_toward_driven\n",
        );
        for (k, e) in self.scales.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.setting,
                k + 1,
                e.similarity_to_source,
                e.similarity_to_driven,
                e.reconstruction_error,
                e.shift_toward_driven
            ));
        }
        out
    }
}

/// Source/driven pairs for a setting, drawn deterministically.
pub fn probe_pairs(world: &World, setting: Setting, n: usize, seed: u64) -> Result<PairBatch> {
    let mut rng = stream(seed, SWEEP_STREAM);
    let count = world.identity_count();
    let pairs = (0..n)
        .map(|_| {
            let id_s = rng.random_range(0..count);
            match setting {
                Setting::SelfDriven => world.sample_pair(id_s, &mut rng),
                Setting::Cross => {
                    let id_d = (id_s + rng.random_range(1..count)) % count;
                    world.sample_cross_pair(id_s, id_d, &mut rng)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    PairBatch::new(pairs)
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn swap_entry(
    model: &Model,
    probe: &IdentityProbe,
    batch: &PairBatch,
    swap: Option<Swap>,
    variable: &str,
) -> Result<SwapEntry> {
    let anim = model.animate(
        &batch.source,
        &batch.driven,
        AnimateOptions {
            swap,
            ..Default::default()
        },
    )?;
    let d_img = model.d_img;
    let (mut sim_s, mut sim_d, mut err) = (0.0, 0.0, 0.0);
    for (out, (s, d)) in anim.generated.data().chunks(d_img).zip(&batch.pairs) {
        let a_hat = probe.predict(out)?;
        sim_s += cosine(&a_hat, &s.identity);
        sim_d += cosine(&a_hat, &d.identity);
        err += mean_abs_diff(out, &d.observation);
    }
    let n = batch.len() as f64;
    Ok(SwapEntry {
        variable: variable.into(),
        similarity_to_source: sim_s / n,
        similarity_to_driven: sim_d / n,
        reconstruction_error: err / n,
        shift_toward_driven: 0.0,
    })
}

/// Regenerates with each driven-frame variable substituted for the source one.
pub fn feature_swap_sweep_on(
    model: &Model,
    probe: &IdentityProbe,
    batch: &PairBatch,
    setting: Setting,
    motion_probe_r2: f64,
) -> Result<ProbeReport> {
    let baseline = swap_entry(model, probe, batch, None, "none")?;
    let gap = baseline.similarity_to_driven - baseline.similarity_to_source;
    let shifted = |mut e: SwapEntry| {
        e.shift_toward_driven = (e.similarity_to_driven - e.similarity_to_source) - gap;
        e
    };
    let scales = (0..SCALES)
        .map(|k| {
            swap_entry(model, probe, batch, Some(Swap::Scale(k)), &format!("f{}", k + 1)).map(shifted)
        })
        .collect::<Result<Vec<_>>>()?;
    let extra = vec![
        shifted(swap_entry(model, probe, batch, Some(Swap::Top), "f")?),
        shifted(swap_entry(model, probe, batch, Some(Swap::Motion), "z")?),
    ];
    Ok(ProbeReport {
        setting,
        pairs: batch.len(),
        baseline,
        scales,
        extra,
        motion_probe_r2,
    })
}

pub fn feature_swap_sweep(
    model: &Model,
    world: &World,
    setting: Setting,
    eval: &EvalConfig,
) -> Result<ProbeReport> {
    let probe = observation_probe(world, eval)?;
    let batch = probe_pairs(world, setting, eval.pairs, eval.seed)?;
    let r2 = motion_leakage_score(model, world, eval)?;
    feature_swap_sweep_on(model, &probe, &batch, setting, r2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub rec_error_self: f64,
    pub rec_error_cross: f64,
}

impl GapReport {
    pub fn gap(&self) -> f64 {
        self.rec_error_cross - self.rec_error_self
    }
}

/// Matched trials: same source frame and driven motion in both settings, only
/// the driven identity differs; the target is the source identity performing
/// the driven motion.
pub fn self_vs_cross_gap(model: &Model, world: &World, eval: &EvalConfig) -> Result<GapReport> {
    let mut rng = stream(eval.seed, GAP_STREAM);
    let count = world.identity_count();
    let (mut src, mut drv_self, mut drv_cross, mut target) = (vec![], vec![], vec![], vec![]);
    for _ in 0..eval.pairs {
        let id_s = rng.random_range(0..count);
        let id_d = (id_s + rng.random_range(1..count)) % count;
        let a_s = world.identity(id_s)?;
        let a_d = world.identity(id_d)?;
        let m_s = world.random_motion(&mut rng);
        let m_d = world.random_motion(&mut rng);
        src.push(world.render(a_s, &m_s)?);
        let t = world.render(a_s, &m_d)?;
        drv_self.push(t.clone());
        target.push(t);
        drv_cross.push(world.render(a_d, &m_d)?);
    }
    let src = Tensor::from_rows(&src)?;
    let err = |driven: Vec<Vec<f64>>| -> Result<f64> {
        let anim = model.animate(&src, &Tensor::from_rows(&driven)?, AnimateOptions::default())?;
        let total: f64 = anim
            .generated
            .data()
            .chunks(model.d_img)
            .zip(&target)
            .map(|(o, t)| mean_abs_diff(o, t))
            .sum();
        Ok(total / target.len() as f64)
    };
    Ok(GapReport {
        rec_error_self: err(drv_self)?,
        rec_error_cross: err(drv_cross)?,
    })
}

/// Fraction of held-out same-identity pairs whose inference-time recall is
/// closer (in cosine) to the true driven token than to the token of a random
/// frame of another identity.
pub fn retrieval_fidelity(model: &Model, world: &World, trials: usize, seed: u64) -> Result<f64> {
    if model.detail.is_none() {
        return Err(Error::Capability("model has no detail indicator".into()));
    }
    let mut rng = stream(seed, RETRIEVAL_STREAM);
    let count = world.identity_count();
    let mut pairs = Vec::with_capacity(trials);
    let mut other = Vec::with_capacity(trials);
    for _ in 0..trials {
        let id = rng.random_range(0..count);
        let id_o = (id + rng.random_range(1..count)) % count;
        let (s, d) = world.sample_pair(id, &mut rng)?;
        let m_o = world.random_motion(&mut rng);
        other.push(world.render(world.identity(id_o)?, &m_o)?);
        pairs.push((s, d));
    }
    let batch = PairBatch::new(pairs)?;
    let anim = model.animate(&batch.source, &batch.driven, AnimateOptions::default())?;
    let trace = anim.detail.expect("detail trace present");
    let mismatched = model.detail_tokens(&Tensor::from_rows(&other)?)?;
    let d_c = trace.recalled.shape()[1];
    let hits = trace
        .recalled
        .data()
        .chunks(d_c)
        .zip(trace.f_d_pi.data().chunks(d_c))
        .zip(mismatched.data().chunks(d_c))
        .filter(|((r, t), m)| cosine(r, t) > cosine(r, m))
        .count();
    Ok(hits as f64 / trials as f64)
}

/// Mean reconstruction loss on held-out pairs through the training-time path.
pub fn heldout_reconstruction(model: &Model, batch: &PairBatch) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let pd = model.disc_params.bind(&mut g, false);
    let tg = model.train_forward(&mut g, &p, &pd, batch, &Default::default())?;
    Ok(g.scalar(tg.rec))
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankStats {
    pub slot_norms: Vec<f64>,
    pub min_norm: f64,
    /// Counts of pairwise slot cosines over `HISTOGRAM_BINS` equal bins of [-1, 1].
    pub cosine_histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub slots: usize,
    pub max_entropy: f64,
    pub driven: BankStats,
    pub motion_source: BankStats,
    /// Entropy of the mean driven address over the sample batch.
    pub usage_entropy_driven: f64,
    /// Entropy of the mean motion-source address over the sample batch.
    pub usage_entropy_motion_source: f64,
    pub samples: usize,
}

fn bank_stats(bank: &Tensor) -> BankStats {
    let rows = rows_of(bank);
    let slot_norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut hist = vec![0; HISTOGRAM_BINS];
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let c = cosine(&rows[i], &rows[j]);
            let bin = (((c + 1.0) / 2.0) * HISTOGRAM_BINS as f64) as usize;
            hist[bin.min(HISTOGRAM_BINS - 1)] += 1;
        }
    }
    BankStats {
        min_norm: slot_norms.iter().copied().fold(f64::INFINITY, f64::min),
        slot_norms,
        cosine_histogram: hist,
    }
}

fn usage_entropy(omega: &Tensor) -> f64 {
    let s = omega.shape()[1];
    let n = omega.shape()[0] as f64;
    let mut mean = vec![0.0; s];
    for row in omega.data().chunks(s) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    -mean
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Slot statistics for both banks plus address usage over `samples` pairs.
pub fn memory_inspect(model: &Model, world: &World, samples: usize, seed: u64) -> Result<MemoryReport> {
    let edi = model
        .detail
        .as_ref()
        .ok_or_else(|| Error::Capability("model has no detail indicator (edi.M_d, edi.M_ms)".into()))?;
    let mut rng = stream(seed, INSPECT_STREAM);
    let count = world.identity_count();
    let pairs = (0..samples)
        .map(|_| world.sample_pair(rng.random_range(0..count), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let batch = PairBatch::new(pairs)?;
    let anim = model.animate(&batch.source, &batch.driven, AnimateOptions::default())?;
    let trace = anim.detail.expect("detail trace present");
    let slots = edi.memory.slots;
    Ok(MemoryReport {
        slots,
        max_entropy: (slots as f64).ln(),
        driven: bank_stats(model.params.get(edi.memory.driven)),
        motion_source: bank_stats(model.params.get(edi.memory.motion_source)),
        usage_entropy_driven: usage_entropy(&trace.omega_d),
        usage_entropy_motion_source: usage_entropy(&trace.omega_ms),
        samples,
    })
}

const EVAL_STREAM: u64 = 0xe7a1;

/// Headline measurements for one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub motion_leakage_r2: f64,
    pub rec_error_self: f64,
    pub rec_error_cross: f64,
    pub cross_minus_self: f64,
    /// One-based scale with the largest cross-setting identity shift.
    pub dominant_scale: usize,
    pub scale_shifts: Vec<f64>,
    pub heldout_reconstruction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval_fidelity: Option<f64>,
}

pub fn evaluate(model: &Model, world: &World, eval: &EvalConfig) -> Result<EvalReport> {
    let gap = self_vs_cross_gap(model, world, eval)?;
    let sweep = feature_swap_sweep(model, world, Setting::Cross, eval)?;
    let mut rng = stream(eval.seed, EVAL_STREAM);
    let batch = crate::train::sample_pairs(world, eval.pairs, &mut rng)?;
    let retrieval = match model.detail {
        Some(_) => Some(retrieval_fidelity(model, world, eval.pairs, eval.seed)?),
        None => None,
    };
    Ok(EvalReport {
        motion_leakage_r2: sweep.motion_probe_r2,
        rec_error_self: gap.rec_error_self,
        rec_error_cross: gap.rec_error_cross,
        cross_minus_self: gap.gap(),
        dominant_scale: sweep.dominant_scale(),
        scale_shifts: sweep.scales.iter().map(|e| e.shift_toward_driven).collect(),
        heldout_reconstruction: heldout_reconstruction(model, &batch)?,
        alignment_kl: crate::train::mean_alignment_kl(model, &batch)?,
        retrieval_fidelity: retrieval,
    })
}
