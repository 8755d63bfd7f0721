//! The miniature encoder / generator / discriminator carrier and its
//! self-supervised objective, with both indicators mounted behind ablation
//! flags.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, LossWeights, ModelConfig, DETAIL_SCALE, SCALES};
use crate::edi::{
    address_driven, address_motion_source, alignment_loss, memory_loss, recall, DetailIndicator,
};
use crate::emi::{disentanglement_loss, motion_difference, MotionHead, MotionIndicator, MultiScaleFeatures, PooledMotion};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::Tensor;
use crate::world::SyntheticSample;

/// Probabilities entering a logarithm are clamped to `[ADV_EPS, 1 - ADV_EPS]`.
pub const ADV_EPS: f64 = 1e-7;

// Independent init streams so toggling one indicator leaves the others' init intact.
const STREAM_ENCODER: u64 = 0x0e1c;
const STREAM_MOTION: u64 = 0x0e31;
const STREAM_DETAIL: u64 = 0x0ed1;
const STREAM_GENERATOR: u64 = 0x0e6e;
const STREAM_DISCRIMINATOR: u64 = 0x0ed5;

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    scales: Vec<Linear>,
    top: Linear,
    channels: [usize; SCALES],
    sizes: [usize; SCALES],
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        d_img: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let scales = (0..SCALES)
            .map(|k| {
                Linear::new(
                    store,
                    &format!("enc.scale{}", k + 1),
                    d_img,
                    cfg.scale_len(k),
                    true,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let top = Linear::new(store, "enc.top", d_img, cfg.d_top, true, rng)?;
        Ok(Encoder {
            scales,
            top,
            channels: cfg.scale_channels,
            sizes: cfg.scale_sizes,
        })
    }

    /// `[b, d_img]` observations to multi-scale features.
    pub fn encode(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<MultiScaleFeatures> {
        let batch = g.shape(x)[0];
        let mut grids = Vec::with_capacity(SCALES);
        for (k, lin) in self.scales.iter().enumerate() {
            let h = lin.forward(g, p, x)?;
            let h = g.tanh(h)?;
            let s = self.sizes[k];
            grids.push(g.reshape(h, &[batch, self.channels[k], s, s])?);
        }
        let top = self.top.forward(g, p, x)?;
        let top = g.tanh(top)?;
        Ok(MultiScaleFeatures {
            grids: grids.try_into().expect("five scales"),
            top,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    lift: Linear,
    top: Linear,
    skips: Vec<Linear>,
    mid: Linear,
    out: Linear,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        d_img: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let h = cfg.gen_hidden;
        let lift = Linear::new(store, "gen.lift", cfg.d_z, cfg.d_top, false, rng)?;
        let top = Linear::new(store, "gen.top", cfg.d_top, h, true, rng)?;
        let skips = (0..SCALES)
            .map(|k| {
                Linear::new(
                    store,
                    &format!("gen.skip{}", k + 1),
                    cfg.scale_len(k),
                    h,
                    false,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let mid = Linear::new(store, "gen.mid", h, h, true, rng)?;
        let out = Linear::new(store, "gen.out", h, d_img, true, rng)?;
        Ok(Generator {
            lift,
            top,
            skips,
            mid,
            out,
        })
    }

    /// `G(f_s + lift(z_d), skips)`, with `fused4` replacing the scale-4 skip.
    pub fn generate(
        &self,
        g: &mut Graph,
        p: &Bound,
        top_s: Var,
        z_d: Var,
        skips: &[Var; SCALES],
        fused4: Option<Var>,
    ) -> Result<Var> {
        let lifted = self.lift.forward(g, p, z_d)?;
        let code = g.add(top_s, lifted)?;
        let mut h = self.top.forward(g, p, code)?;
        let batch = g.shape(top_s)[0];
        for (k, lin) in self.skips.iter().enumerate() {
            let grid = match (k, fused4) {
                (DETAIL_SCALE, Some(f)) => {
                    if g.shape(f) != g.shape(skips[k]) {
                        return Err(Error::dim("generate", g.shape(f), g.shape(skips[k])));
                    }
                    f
                }
                _ => skips[k],
            };
            let flat = g.reshape(grid, &[batch, lin.fan_in])?;
            let s = lin.forward(g, p, flat)?;
            h = g.add(h, s)?;
        }
        let h = g.tanh(h)?;
        let h = self.mid.forward(g, p, h)?;
        let h = g.tanh(h)?;
        self.out.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    hidden: Linear,
    out: Linear,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        d_img: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Discriminator {
            hidden: Linear::new(store, "disc.hidden", d_img, cfg.disc_hidden, true, rng)?,
            out: Linear::new(store, "disc.out", cfg.disc_hidden, 1, true, rng)?,
        })
    }

    /// Probability in `(0, 1)` per row; `[b, d_img] -> [b]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let batch = g.shape(x)[0];
        let h = self.hidden.forward(g, p, x)?;
        let h = g.tanh(h)?;
        let o = self.out.forward(g, p, h)?;
        let o = g.sigmoid(o)?;
        g.reshape(o, &[batch])
    }
}

/// Mean absolute error.
pub fn reconstruction_loss(g: &mut Graph, i_d: Var, i_g: Var) -> Result<Var> {
    let d = g.sub(i_d, i_g)?;
    let a = g.abs(d)?;
    g.mean(a)
}

fn clamped_ln(g: &mut Graph, p: Var) -> Result<Var> {
    let c = g.clamp(p, ADV_EPS, 1.0 - ADV_EPS)?;
    g.ln(c)
}

/// `mean(log D(real) + log(1 - D(fake)))`, the discriminator's objective.
pub fn adversarial_loss(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<Var> {
    let lr = clamped_ln(g, d_real)?;
    let one_minus = g.affine(d_fake, -1.0, 1.0)?;
    let lf = clamped_ln(g, one_minus)?;
    let s = g.add(lr, lf)?;
    g.mean(s)
}

/// Non-saturating generator form `mean(-log D(fake))`.
pub fn generator_adversarial_loss(g: &mut Graph, d_fake: Var) -> Result<Var> {
    let l = clamped_ln(g, d_fake)?;
    let m = g.mean(l)?;
    g.scale(m, -1.0)
}

/// A batch of (source, driven) observations with their ground truth.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub source: Tensor,
    pub driven: Tensor,
    pub pairs: Vec<(SyntheticSample, SyntheticSample)>,
}

impl PairBatch {
    pub fn new(pairs: Vec<(SyntheticSample, SyntheticSample)>) -> Result<Self> {
        let src: Vec<Vec<f64>> = pairs.iter().map(|(s, _)| s.observation.clone()).collect();
        let drv: Vec<Vec<f64>> = pairs.iter().map(|(_, d)| d.observation.clone()).collect();
        Ok(PairBatch {
            source: Tensor::from_rows(&src)?,
            driven: Tensor::from_rows(&drv)?,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Per-term loss handles on a training graph.
#[derive(Clone, Copy, Debug)]
pub struct TrainGraph {
    pub generated: Var,
    pub rec: Var,
    pub adv: Var,
    pub dis: Option<Var>,
    pub dmem: Option<Var>,
    pub align: Option<Var>,
    pub total: Var,
}

/// Which intermediate variable of the driven frame replaces the source one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Swap {
    /// Skip feature at zero-based scale index.
    Scale(usize),
    /// Top-level code.
    Top,
    /// The motion embedding fed to the generator is taken from the source frame.
    Motion,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AnimateOptions {
    pub swap: Option<Swap>,
    /// Recall through the driven address instead of the motion-source one
    /// (the training-time route).
    pub driven_address: bool,
}

/// Values produced by one inference pass.
#[derive(Clone, Debug)]
pub struct Animation {
    pub generated: Tensor,
    pub z_s: Tensor,
    pub z_d: Tensor,
    pub detail: Option<DetailTrace>,
}

#[derive(Clone, Debug)]
pub struct DetailTrace {
    pub f_s_pi: Tensor,
    pub f_d_pi: Tensor,
    pub omega_ms: Tensor,
    pub omega_d: Tensor,
    pub recalled: Tensor,
}

/// The full model: trainable parameters plus module layouts.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub flags: Ablation,
    pub d_img: usize,
    pub params: ParamStore,
    pub disc_params: ParamStore,
    pub encoder: Encoder,
    pub motion: MotionHead,
    pub detail: Option<DetailIndicator>,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl Model {
    pub fn new(cfg: &ModelConfig, flags: Ablation, d_img: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, cfg, d_img, &mut stream(seed, STREAM_ENCODER))?;
        let mut rng = stream(seed, STREAM_MOTION);
        let motion = if flags.emi_on {
            MotionHead::Enhanced(MotionIndicator::new(&mut params, cfg, &mut rng)?)
        } else {
            MotionHead::Pooled(PooledMotion::new(&mut params, cfg, &mut rng)?)
        };
        let detail = if flags.edi_on {
            Some(DetailIndicator::new(
                &mut params,
                cfg,
                &mut stream(seed, STREAM_DETAIL),
            )?)
        } else {
            None
        };
        let generator =
            Generator::new(&mut params, cfg, d_img, &mut stream(seed, STREAM_GENERATOR))?;
        let mut disc_params = ParamStore::new();
        let discriminator = Discriminator::new(
            &mut disc_params,
            cfg,
            d_img,
            &mut stream(seed, STREAM_DISCRIMINATOR),
        )?;
        Ok(Model {
            cfg: cfg.clone(),
            flags,
            d_img,
            params,
            disc_params,
            encoder,
            motion,
            detail,
            generator,
            discriminator,
        })
    }

    pub fn indicator(&self) -> Option<&MotionIndicator> {
        self.motion.indicator()
    }

    fn input(&self, g: &mut Graph, x: &Tensor) -> Result<Var> {
        if x.shape().len() != 2 || x.shape()[1] != self.d_img {
            return Err(Error::dim("model input", x.shape(), &[self.d_img]));
        }
        Ok(g.constant(x.clone()))
    }

    /// Builds the training objective for one batch on `g`.
    pub fn train_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        pd: &Bound,
        batch: &PairBatch,
        w: &LossWeights,
    ) -> Result<TrainGraph> {
        let xs = self.input(g, &batch.source)?;
        let xd = self.input(g, &batch.driven)?;
        let fs = self.encoder.encode(g, p, xs)?;
        let fd = self.encoder.encode(g, p, xd)?;
        let z_s = self.motion.forward(g, p, &fs)?;
        let z_d = self.motion.forward(g, p, &fd)?;

        let dis = if self.flags.emi_on && self.flags.ldis_on {
            Some(disentanglement_loss(g, z_s, z_d, self.cfg.xi)?)
        } else {
            None
        };

        let (fused4, dmem, align) = match &self.detail {
            Some(edi) => {
                let f_s_pi = edi.compressor.compress(g, p, fs.detail())?;
                let f_d_pi = edi.compressor.compress(g, p, fd.detail())?;
                let query = f_d_pi;
                let m_d = p[edi.memory.driven];
                let omega_d = address_driven(g, query, m_d, edi.temperature)?;
                let recalled = recall(g, omega_d, m_d)?;
                let dmem = memory_loss(g, query, recalled)?;
                let z_ds = motion_difference(g, z_d, z_s)?;
                let omega_ms =
                    address_motion_source(g, f_s_pi, z_ds, p[edi.memory.motion_source], edi.temperature)?;
                let align = alignment_loss(g, omega_ms, omega_d)?;
                let token = if self.cfg.train_uses_recall {
                    recalled
                } else {
                    f_d_pi
                };
                let fused = edi.render_detail(g, p, fs.detail(), token)?;
                (Some(fused), Some(dmem), Some(align))
            }
            None => (None, None, None),
        };

        let generated = self.generator.generate(g, p, fs.top, z_d, &fs.grids, fused4)?;
        let rec = reconstruction_loss(g, xd, generated)?;
        let d_fake = self.discriminator.forward(g, pd, generated)?;
        let adv = generator_adversarial_loss(g, d_fake)?;

        let mut total = g.scale(rec, w.rec)?;
        let weighted = [
            (Some(adv), w.adv),
            (dis, w.dis),
            (dmem, w.dmem),
            (align, w.align),
        ];
        for (term, weight) in weighted {
            if let Some(t) = term {
                let s = g.scale(t, weight)?;
                total = g.add(total, s)?;
            }
        }
        Ok(TrainGraph {
            generated,
            rec,
            adv,
            dis,
            dmem,
            align,
            total,
        })
    }

    /// Inference: animate each source with the paired driven frame.
    pub fn animate(&self, source: &Tensor, driven: &Tensor, opts: AnimateOptions) -> Result<Animation> {
        if source.shape() != driven.shape() {
            return Err(Error::dim("animate", source.shape(), driven.shape()));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xs = self.input(&mut g, source)?;
        let xd = self.input(&mut g, driven)?;
        let fs = self.encoder.encode(&mut g, &p, xs)?;
        let fd = self.encoder.encode(&mut g, &p, xd)?;
        let z_s = self.motion.forward(&mut g, &p, &fs)?;
        let z_d = self.motion.forward(&mut g, &p, &fd)?;

        let mut skips = fs.grids;
        let mut top = fs.top;
        let mut z_gen = z_d;
        match opts.swap {
            Some(Swap::Scale(k)) if k < SCALES => skips[k] = fd.grids[k],
            Some(Swap::Scale(k)) => {
                return Err(Error::Contract(format!("scale index {k} out of range")))
            }
            Some(Swap::Top) => top = fd.top,
            Some(Swap::Motion) => z_gen = z_s,
            None => {}
        }

        let (fused4, detail) = match &self.detail {
            Some(edi) => {
                let f_s_pi = edi.compressor.compress(&mut g, &p, fs.detail())?;
                let f_d_pi = edi.compressor.compress(&mut g, &p, fd.detail())?;
                let m_d = p[edi.memory.driven];
                let omega_d = address_driven(&mut g, f_d_pi, m_d, edi.temperature)?;
                let z_ds = motion_difference(&mut g, z_d, z_s)?;
                let omega_ms = address_motion_source(
                    &mut g,
                    f_s_pi,
                    z_ds,
                    p[edi.memory.motion_source],
                    edi.temperature,
                )?;
                let omega = if opts.driven_address { omega_d } else { omega_ms };
                let recalled = recall(&mut g, omega, m_d)?;
                let fused = edi.render_detail(&mut g, &p, skips[DETAIL_SCALE], recalled)?;
                let trace = DetailTrace {
                    f_s_pi: g.value(f_s_pi).clone(),
                    f_d_pi: g.value(f_d_pi).clone(),
                    omega_ms: g.value(omega_ms).clone(),
                    omega_d: g.value(omega_d).clone(),
                    recalled: g.value(recalled).clone(),
                };
                (Some(fused), Some(trace))
            }
            None => (None, None),
        };
        let generated = self
            .generator
            .generate(&mut g, &p, top, z_gen, &skips, fused4)?;
        Ok(Animation {
            generated: g.value(generated).clone(),
            z_s: g.value(z_s).clone(),
            z_d: g.value(z_d).clone(),
            detail,
        })
    }

    /// Motion embeddings for a batch of observations.
    pub fn embed_motion(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = self.input(&mut g, x)?;
        let f = self.encoder.encode(&mut g, &p, xv)?;
        let z = self.motion.forward(&mut g, &p, &f)?;
        Ok(g.value(z).clone())
    }

    /// Compressed scale-4 tokens for a batch of observations.
    pub fn detail_tokens(&self, x: &Tensor) -> Result<Tensor> {
        let edi = self
            .detail
            .as_ref()
            .ok_or_else(|| Error::Capability("model has no detail indicator".into()))?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = self.input(&mut g, x)?;
        let f = self.encoder.encode(&mut g, &p, xv)?;
        let t = edi.compressor.compress(&mut g, &p, f.detail())?;
        Ok(g.value(t).clone())
    }

    /// Discriminator probabilities for a batch of observations.
    pub fn discriminate(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let pd = self.disc_params.bind(&mut g, false);
        let xv = self.input(&mut g, x)?;
        let d = self.discriminator.forward(&mut g, &pd, xv)?;
        Ok(g.value(d).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstruction_loss_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let l = reconstruction_loss(&mut g, a, a).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let b = g.constant(Tensor::from_vec(vec![3.0, 0.0, 5.0]));
        let l = reconstruction_loss(&mut g, a, b).unwrap();
        assert_eq!(g.scalar(l), 2.0);
        let x = g.constant(Tensor::from_vec(vec![1.0, 1.0]));
        let y = g.constant(Tensor::from_vec(vec![0.0, 4.0]));
        let l = reconstruction_loss(&mut g, x, y).unwrap();
        assert_eq!(g.scalar(l), 2.0);
        assert!(reconstruction_loss(&mut g, a, x).is_err());
    }

    #[test]
    fn adversarial_loss_examples() {
        let mut g = Graph::new();
        let half = g.constant(Tensor::from_vec(vec![0.5]));
        let l = adversarial_loss(&mut g, half, half).unwrap();
        assert!((g.scalar(l) + 1.3863).abs() < 1e-4);
        assert!((g.scalar(l) - 2.0 * 0.5f64.ln()).abs() < 1e-12);

        let one = g.constant(Tensor::from_vec(vec![1.0]));
        let zero = g.constant(Tensor::from_vec(vec![0.0]));
        let l = adversarial_loss(&mut g, one, zero).unwrap();
        assert!(g.scalar(l) < 0.0 && g.scalar(l) > -1e-6);

        let l = adversarial_loss(&mut g, zero, zero).unwrap();
        assert!(g.scalar(l).is_finite());
        let l = generator_adversarial_loss(&mut g, zero).unwrap();
        assert!(g.scalar(l).is_finite());
    }

    use crate::world::{World, WorldConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize) -> (World, PairBatch) {
        let world = World::new(WorldConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs = (0..n)
            .map(|i| world.sample_pair(i % world.identity_count(), &mut rng))
            .collect::<Result<Vec<_>>>()
            .unwrap();
        (world, PairBatch::new(pairs).unwrap())
    }

    fn model(flags: Ablation) -> Model {
        Model::new(&ModelConfig::default(), flags, 64, 9).unwrap()
    }

    #[test]
    fn fused_grid_equal_to_skip_matches_the_plain_path() {
        let m = model(Ablation::BASELINE);
        let (_, b) = batch(3);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let xs = g.constant(b.source.clone());
        let xd = g.constant(b.driven.clone());
        let fs = m.encoder.encode(&mut g, &p, xs).unwrap();
        let fd = m.encoder.encode(&mut g, &p, xd).unwrap();
        let z = m.motion.forward(&mut g, &p, &fd).unwrap();
        let plain = m.generator.generate(&mut g, &p, fs.top, z, &fs.grids, None).unwrap();
        let fused = m
            .generator
            .generate(&mut g, &p, fs.top, z, &fs.grids, Some(fs.grids[DETAIL_SCALE]))
            .unwrap();
        assert_eq!(g.value(plain), g.value(fused));
        assert_eq!(g.shape(plain), &[3, 64]);
    }

    #[test]
    fn gradients_reach_every_encoder_scale_and_the_motion_code() {
        let m = model(Ablation::FULL);
        let (_, b) = batch(4);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, true);
        let pd = m.disc_params.bind(&mut g, false);
        let tg = m.train_forward(&mut g, &p, &pd, &b, &LossWeights::default()).unwrap();
        let grads = g.backward(tg.rec).unwrap();
        for k in 1..=SCALES {
            let id = m.params.id(&format!("enc.scale{k}.w")).unwrap();
            let norm: f64 = grads.get(p[id]).data().iter().map(|x| x * x).sum();
            assert!(norm > 0.0, "scale {k}");
        }

        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let xs = g.constant(b.source.clone());
        let fs = m.encoder.encode(&mut g, &p, xs).unwrap();
        let z = g.param(Tensor::zeros(&[4, m.cfg.d_z]));
        let out = m.generator.generate(&mut g, &p, fs.top, z, &fs.grids, None).unwrap();
        let loss = g.mean(out).unwrap();
        let gz = g.backward(loss).unwrap().get(z);
        assert!(gz.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn discriminator_outputs_are_probabilities() {
        let m = model(Ablation::FULL);
        let (_, b) = batch(16);
        let d = m.discriminate(&b.driven).unwrap();
        assert!(d.data().iter().all(|&x| x > 0.0 && x < 1.0));
        let wild = Tensor::new(vec![2, 64], vec![1e6; 128]).unwrap();
        let d = m.discriminate(&wild).unwrap();
        assert!(d.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        let mut g = Graph::new();
        let dv = g.constant(d);
        let l = adversarial_loss(&mut g, dv, dv).unwrap();
        assert!(g.scalar(l).is_finite());
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let (_, b) = batch(5);
        let a = model(Ablation::FULL).animate(&b.source, &b.driven, AnimateOptions::default()).unwrap();
        let c = model(Ablation::FULL).animate(&b.source, &b.driven, AnimateOptions::default()).unwrap();
        assert_eq!(a.generated, c.generated);
        assert_eq!(a.z_d, c.z_d);
    }

    #[test]
    fn toggling_one_indicator_keeps_the_other_modules_initialization() {
        let full = model(Ablation::FULL);
        let no_edi = model(Ablation { edi_on: false, ..Ablation::FULL });
        for (name, t) in no_edi.params.iter() {
            assert_eq!(full.params.by_name(name), Some(t), "{name}");
        }
        assert_eq!(full.params.count_with_prefix("emi."), no_edi.params.count_with_prefix("emi."));
        let no_emi = model(Ablation { emi_on: false, ..Ablation::FULL });
        assert_eq!(full.params.count_with_prefix("edi."), no_emi.params.count_with_prefix("edi."));
        assert_eq!(no_emi.params.count_with_prefix("emi."), 0);
    }
}
