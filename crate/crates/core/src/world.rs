//! Procedural identity x motion world with exact ground-truth factors.
//!
//! An observation is a frozen nonlinear rendering of `concat(a, m)` where `a`
//! is a unit-norm identity latent and `m` a motion latent in `[-1, 1]^d_mo`.
//! The renderer and the identity table are derived from the world seed only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const RENDER_GAIN: f64 = 1.5;
const RENDER_STREAM: u64 = 0x5245_4e44;
const IDENTITY_STREAM: u64 = 0x4944_454e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub d_id: usize,
    pub d_mo: usize,
    pub d_img: usize,
    pub identity_count: usize,
    /// Frames in a clip from [`World::sample_clip`]; pairs draw motions continuously.
    pub motions_per_identity: usize,
    /// Number of linear layers in the renderer, with `tanh` between them.
    pub mixing_depth: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 7,
            d_id: 8,
            d_mo: 4,
            d_img: 64,
            identity_count: 32,
            motions_per_identity: 16,
            mixing_depth: 2,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("world.d_id", self.d_id),
            ("world.d_mo", self.d_mo),
            ("world.d_img", self.d_img),
            ("world.motions_per_identity", self.motions_per_identity),
            ("world.mixing_depth", self.mixing_depth),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    path: path.into(),
                    message: "must be positive".into(),
                });
            }
        }
        if self.identity_count < 2 {
            return Err(Error::Config {
                path: "world.identity_count".into(),
                message: "at least two identities are needed for cross pairs".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub identity: Vec<f64>,
    pub motion: Vec<f64>,
    pub observation: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Layer {
    weight: Vec<f64>, // [out x in]
    bias: Vec<f64>,
    fan_in: usize,
    fan_out: usize,
}

impl Layer {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.fan_out)
            .map(|o| {
                let row = &self.weight[o * self.fan_in..(o + 1) * self.fan_in];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

/// The frozen world: renderer parameters plus the identity table.
#[derive(Clone, Debug)]
pub struct World {
    cfg: WorldConfig,
    layers: Vec<Layer>,
    identities: Vec<Vec<f64>>,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ RENDER_STREAM);
        let d_in = cfg.d_id + cfg.d_mo;
        let mut layers = Vec::with_capacity(cfg.mixing_depth);
        for l in 0..cfg.mixing_depth {
            let fan_in = if l == 0 { d_in } else { cfg.d_img };
            let last = l + 1 == cfg.mixing_depth;
            let gain = if last { 1.0 } else { RENDER_GAIN };
            let std = gain / (fan_in as f64).sqrt();
            let weight = Tensor::randn(&[cfg.d_img, fan_in], std, &mut rng).into_data();
            let bias = Tensor::randn(&[cfg.d_img], 0.1, &mut rng).into_data();
            layers.push(Layer {
                weight,
                bias,
                fan_in,
                fan_out: cfg.d_img,
            });
        }
        let mut id_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ IDENTITY_STREAM);
        let identities = (0..cfg.identity_count)
            .map(|_| unit_vector(cfg.d_id, &mut id_rng))
            .collect();
        Ok(World {
            cfg,
            layers,
            identities,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn identity_count(&self) -> usize {
        self.identities.len()
    }

    pub fn identity(&self, index: usize) -> Result<&[f64]> {
        self.identities
            .get(index)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::Contract(format!(
                    "identity {index} does not exist (world has {})",
                    self.identities.len()
                ))
            })
    }

    /// Deterministic observation of identity `a` performing motion `m`.
    pub fn render(&self, a: &[f64], m: &[f64]) -> Result<Vec<f64>> {
        if a.len() != self.cfg.d_id || m.len() != self.cfg.d_mo {
            return Err(Error::dim(
                "render",
                &[a.len(), m.len()],
                &[self.cfg.d_id, self.cfg.d_mo],
            ));
        }
        let mut h: Vec<f64> = a.iter().chain(m).copied().collect();
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if l + 1 < self.layers.len() {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        Ok(h)
    }

    pub fn sample(&self, a: &[f64], m: &[f64]) -> Result<SyntheticSample> {
        Ok(SyntheticSample {
            identity: a.to_vec(),
            motion: m.to_vec(),
            observation: self.render(a, m)?,
        })
    }

    pub fn random_motion<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.cfg.d_mo).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// A fresh identity outside the table.
    pub fn random_identity<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        unit_vector(self.cfg.d_id, rng)
    }

    fn distinct_motions<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let m_s = self.random_motion(rng);
        loop {
            let m_d = self.random_motion(rng);
            let gap = m_s
                .iter()
                .zip(&m_d)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            if gap > 1e-6 {
                return (m_s, m_d);
            }
        }
    }

    /// Self-supervised pair: shared identity, different motions.
    pub fn sample_pair<R: Rng + ?Sized>(
        &self,
        identity: usize,
        rng: &mut R,
    ) -> Result<(SyntheticSample, SyntheticSample)> {
        let a = self.identity(identity)?.to_vec();
        let (m_s, m_d) = self.distinct_motions(rng);
        Ok((self.sample(&a, &m_s)?, self.sample(&a, &m_d)?))
    }

    /// `motions_per_identity` frames of one identity under independent motions.
    pub fn sample_clip<R: Rng + ?Sized>(&self, identity: usize, rng: &mut R) -> Result<Vec<SyntheticSample>> {
        let a = self.identity(identity)?.to_vec();
        (0..self.cfg.motions_per_identity)
            .map(|_| self.sample(&a, &self.random_motion(rng)))
            .collect()
    }

    /// Cross-driven pair: distinct identities, independent motions.
    pub fn sample_cross_pair<R: Rng + ?Sized>(
        &self,
        id_s: usize,
        id_d: usize,
        rng: &mut R,
    ) -> Result<(SyntheticSample, SyntheticSample)> {
        if id_s == id_d {
            return Err(Error::Contract(format!(
                "cross pair needs distinct identities, got {id_s} twice"
            )));
        }
        let a_s = self.identity(id_s)?.to_vec();
        let a_d = self.identity(id_d)?.to_vec();
        let m_s = self.random_motion(rng);
        let m_d = self.random_motion(rng);
        Ok((self.sample(&a_s, &m_s)?, self.sample(&a_d, &m_d)?))
    }
}

pub fn unit_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v = Tensor::randn(&[d], 1.0, rng).into_data();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (dot / (nu * nv).max(1e-300)).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(WorldConfig::default()).unwrap()
    }

    #[test]
    fn render_is_deterministic() {
        let w = world();
        let a = w.identity(0).unwrap().to_vec();
        let m = vec![0.1, -0.3, 0.7, 0.0];
        assert_eq!(w.render(&a, &m).unwrap(), w.render(&a, &m).unwrap());
        let w2 = world();
        assert_eq!(w.render(&a, &m).unwrap(), w2.render(&a, &m).unwrap());
    }

    #[test]
    fn render_separates_motion_and_identity() {
        let w = world();
        let a1 = w.identity(0).unwrap().to_vec();
        let a2 = w.identity(1).unwrap().to_vec();
        let m1 = vec![0.1, -0.3, 0.7, 0.0];
        let m2 = vec![0.1, -0.3, 0.7, 0.2];
        let dist = |x: &[f64], y: &[f64]| {
            x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
        };
        assert!(dist(&w.render(&a1, &m1).unwrap(), &w.render(&a1, &m2).unwrap()) > 0.0);
        assert!(dist(&w.render(&a1, &m1).unwrap(), &w.render(&a2, &m1).unwrap()) > 0.0);
    }

    #[test]
    fn render_rejects_wrong_dims() {
        let w = world();
        assert!(matches!(
            w.render(&[1.0; 3], &[0.0; 4]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn pairs_share_identity_and_differ_in_motion() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..1000 {
            let (s, d) = w.sample_pair(i % w.identity_count(), &mut rng).unwrap();
            assert_eq!(s.identity, d.identity);
            let gap = s
                .motion
                .iter()
                .zip(&d.motion)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(gap > 1e-6);
            assert!((s.identity.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(s.motion.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn cross_pairs() {
        let w = world();
        assert!(w.sample_cross_pair(2, 2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let a = w
            .sample_cross_pair(0, 1, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = w
            .sample_cross_pair(0, 1, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0.identity, a.1.identity);
    }

    #[test]
    fn random_identity_cosines_average_to_zero() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1000;
        let mean: f64 = (0..n)
            .map(|_| {
                let a = w.random_identity(&mut rng);
                let b = w.random_identity(&mut rng);
                cosine(&a, &b)
            })
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 0.1, "mean cosine {mean}");
    }

    #[test]
    fn no_duplicate_observations() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let id = rng.random_range(0..w.identity_count());
            let m = w.random_motion(&mut rng);
            let obs = w.render(w.identity(id).unwrap(), &m).unwrap();
            let key: Vec<u64> = obs.iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(key));
        }
    }

    #[test]
    fn seeds_change_the_renderer() {
        let w1 = world();
        let w2 = World::new(WorldConfig {
            seed: 8,
            ..WorldConfig::default()
        })
        .unwrap();
        let a = unit_vector(8, &mut ChaCha8Rng::seed_from_u64(1));
        let m = vec![0.0; 4];
        assert_ne!(w1.render(&a, &m).unwrap(), w2.render(&a, &m).unwrap());
    }

    #[test]
    fn clips_share_one_identity() {
        let w = world();
        let clip = w.sample_clip(3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(clip.len(), w.config().motions_per_identity);
        assert!(clip.iter().all(|s| s.identity == w.identity(3).unwrap()));
        assert_ne!(clip[0].motion, clip[1].motion);
    }
}
