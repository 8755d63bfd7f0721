//! The self-supervised trainer: alternating generator-side and
//! discriminator steps over same-identity pairs drawn from the world.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, write_atomic};
use crate::config::{RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::AdaptiveOptimizer;
use crate::pipeline::{adversarial_loss, AnimateOptions, Model, PairBatch};
use crate::world::World;

const BATCH_STREAM: u64 = 0xba7c;
const HELDOUT_STREAM: u64 = 0x4e1d;
const GUARD_STREAM: u64 = 0x6a2d;

/// One metrics record per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    #[serde(rename = "L_rec")]
    pub rec: f64,
    #[serde(rename = "L_adv")]
    pub adv: f64,
    #[serde(rename = "L_dis", default, skip_serializing_if = "Option::is_none")]
    pub dis: Option<f64>,
    #[serde(rename = "L_dmem", default, skip_serializing_if = "Option::is_none")]
    pub dmem: Option<f64>,
    #[serde(rename = "L_align", default, skip_serializing_if = "Option::is_none")]
    pub align: Option<f64>,
    pub total: f64,
}

/// Held-out alignment measurement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPoint {
    pub step: usize,
    pub kl: f64,
}

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xd134_2543_de82_ef95) ^ tag)
}

/// Draws `n` same-identity pairs over the world's identity table.
pub fn sample_pairs<R: Rng + ?Sized>(world: &World, n: usize, rng: &mut R) -> Result<PairBatch> {
    let pairs = (0..n)
        .map(|_| {
            let id = rng.random_range(0..world.identity_count());
            world.sample_pair(id, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    PairBatch::new(pairs)
}

/// Mean `KL(Ω_ms || Ω_d)` over a batch, or `None` without a detail indicator.
pub fn mean_alignment_kl(model: &Model, batch: &PairBatch) -> Result<Option<f64>> {
    if model.detail.is_none() {
        return Ok(None);
    }
    let anim = model.animate(&batch.source, &batch.driven, AnimateOptions::default())?;
    let trace = anim.detail.expect("detail trace present");
    let s = trace.omega_ms.shape()[1];
    let mut total = 0.0;
    for (p, q) in trace
        .omega_ms
        .data()
        .chunks(s)
        .zip(trace.omega_d.data().chunks(s))
    {
        total += p
            .iter()
            .zip(q)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, qi)| pi * (pi / qi.max(crate::graph::EPS)).ln())
            .sum::<f64>();
    }
    Ok(Some(total / batch.len() as f64))
}

pub struct Trainer<'w> {
    world: &'w World,
    cfg: TrainConfig,
    model: Model,
    opt: AdaptiveOptimizer,
    disc_opt: AdaptiveOptimizer,
    batch_rng: ChaCha8Rng,
    guard_rng: ChaCha8Rng,
    heldout: PairBatch,
    step: usize,
}

impl<'w> Trainer<'w> {
    pub fn new(world: &'w World, model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.d_img != world.config().d_img {
            return Err(Error::dim(
                "trainer",
                &[model.d_img],
                &[world.config().d_img],
            ));
        }
        let opt = AdaptiveOptimizer::new(cfg.optimizer, &model.params);
        let disc_opt = AdaptiveOptimizer::new(cfg.optimizer, &model.disc_params);
        let heldout = sample_pairs(world, cfg.heldout_pairs, &mut stream(cfg.seed, HELDOUT_STREAM))?;
        Ok(Trainer {
            world,
            batch_rng: stream(cfg.seed, BATCH_STREAM),
            guard_rng: stream(cfg.seed, GUARD_STREAM),
            cfg,
            model,
            opt,
            disc_opt,
            heldout,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn heldout(&self) -> &PairBatch {
        &self.heldout
    }

    pub fn sample_batch(&mut self) -> Result<PairBatch> {
        sample_pairs(self.world, self.cfg.batch_size, &mut self.batch_rng)
    }

    pub fn heldout_alignment(&self) -> Result<Option<f64>> {
        mean_alignment_kl(&self.model, &self.heldout)
    }

    /// One generator-side update followed by one discriminator update.
    pub fn train_step(&mut self, batch: &PairBatch) -> Result<LossReport> {
        let step = self.step;
        let w = self.cfg.weights;
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, true);
        let pd = self.model.disc_params.bind(&mut g, false);
        let tg = self.model.train_forward(&mut g, &p, &pd, batch, &w)?;

        let finite = |g: &Graph, v, term| {
            let x = g.scalar(v);
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::NonFiniteLoss { term, step })
            }
        };
        let report = LossReport {
            step,
            rec: finite(&g, tg.rec, "L_rec")?,
            adv: finite(&g, tg.adv, "L_adv")?,
            dis: tg.dis.map(|v| finite(&g, v, "L_dis")).transpose()?,
            dmem: tg.dmem.map(|v| finite(&g, v, "L_dmem")).transpose()?,
            align: tg.align.map(|v| finite(&g, v, "L_align")).transpose()?,
            total: finite(&g, tg.total, "total")?,
        };
        let fake = g.value(tg.generated).clone();

        let mut grads = g.backward(tg.total)?;
        let grads = self.model.params.gradients(&p, &mut grads);
        self.opt.step(&mut self.model.params, &grads);

        // discriminator ascends its objective on the detached reconstruction
        let mut gd = Graph::new();
        let pd = self.model.disc_params.bind(&mut gd, true);
        let real = gd.constant(batch.driven.clone());
        let fake = gd.constant(fake);
        let d_real = self.model.discriminator.forward(&mut gd, &pd, real)?;
        let d_fake = self.model.discriminator.forward(&mut gd, &pd, fake)?;
        let objective = adversarial_loss(&mut gd, d_real, d_fake)?;
        let d_loss = gd.scale(objective, -w.adv)?;
        if !gd.scalar(d_loss).is_finite() {
            return Err(Error::NonFiniteLoss {
                term: "L_adv(discriminator)",
                step,
            });
        }
        let mut dgrads = gd.backward(d_loss)?;
        let dgrads = self.model.disc_params.gradients(&pd, &mut dgrads);
        self.disc_opt.step(&mut self.model.disc_params, &dgrads);

        if let Some(edi) = &self.model.detail {
            edi.memory
                .guard_slots(&mut self.model.params, &mut self.guard_rng);
        }
        self.step += 1;
        Ok(report)
    }
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub model: Model,
    pub history: Vec<LossReport>,
    pub alignment: Vec<AlignmentPoint>,
}

/// Trains a fresh model for `cfg.train.steps` steps; `on_step` sees every record.
pub fn run_training(
    cfg: &RunConfig,
    world: &World,
    mut on_step: impl FnMut(&LossReport),
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let model = Model::new(
        &cfg.model,
        cfg.train.flags,
        world.config().d_img,
        cfg.train.seed,
    )?;
    let mut trainer = Trainer::new(world, model, cfg.train.clone())?;
    let mut history = Vec::with_capacity(cfg.train.steps);
    let mut alignment = Vec::new();
    for step in 0..cfg.train.steps {
        if step % cfg.train.eval_every == 0 {
            if let Some(kl) = trainer.heldout_alignment()? {
                alignment.push(AlignmentPoint { step, kl });
            }
        }
        let batch = trainer.sample_batch()?;
        let report = trainer.train_step(&batch)?;
        on_step(&report);
        history.push(report);
    }
    if let Some(kl) = trainer.heldout_alignment()? {
        alignment.push(AlignmentPoint {
            step: cfg.train.steps,
            kl,
        });
    }
    log::info!(
        "trained {} steps, final L_rec {:.5}",
        cfg.train.steps,
        history.last().map_or(f64::NAN, |r| r.rec)
    );
    Ok(TrainingOutcome {
        model: trainer.into_model(),
        history,
        alignment,
    })
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ALIGNMENT_FILE: &str = "alignment.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

fn jsonl<T: Serialize>(records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
        .collect()
}

/// Writes the metrics log, alignment log, config snapshot and checkpoint into `dir`.
pub fn write_run(dir: &Path, cfg: &RunConfig, outcome: &TrainingOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(METRICS_FILE), jsonl(&outcome.history).as_bytes())?;
    write_atomic(&dir.join(ALIGNMENT_FILE), jsonl(&outcome.alignment).as_bytes())?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_json_pretty().as_bytes())?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), cfg, &outcome.model)
}
