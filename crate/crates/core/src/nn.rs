//! Named parameter storage, dense layers and the optimizer.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, uniquely named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        let (idx, _) = self.params.insert_full(name, value);
        Ok(ParamId(idx))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Places every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .values()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound(vars)
    }

    /// Collects per-parameter gradients after a backward sweep.
    pub fn gradients(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Vec<f64>> {
        bound
            .0
            .iter()
            .zip(self.params.values())
            .map(|(&v, t)| grads.take_data(v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

/// Graph handles for every parameter of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Scaled Gaussian init with standard deviation `1/sqrt(fan_in)`.
pub fn init_weight<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Dense map over the last axis: `[.., in] -> [.., out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{name}.w"),
            init_weight(&[fan_in, fan_out], fan_in, rng),
        )?;
        let bias = if bias {
            Some(store.register(format!("{name}.b"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.fan_in) {
            return Err(Error::dim("linear", &shape, &[self.fan_in, self.fan_out]));
        }
        let rows = g.value(x).numel() / self.fan_in;
        let flat = if shape.len() == 2 {
            x
        } else {
            g.reshape(x, &[rows, self.fan_in])?
        };
        let mut y = g.matmul(flat, p[self.weight])?;
        if let Some(b) = self.bias {
            y = g.add_row(y, p[b])?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.fan_out;
        g.reshape(y, &out_shape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            beta: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-coordinate adaptive step without a momentum term: a running average
/// of squared gradients (bias-corrected) scales each step.
#[derive(Clone, Debug)]
pub struct AdaptiveOptimizer {
    cfg: OptimizerConfig,
    second_moment: Vec<Vec<f64>>,
    steps: u64,
}

impl AdaptiveOptimizer {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        AdaptiveOptimizer {
            cfg,
            second_moment: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            steps: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.steps += 1;
        let OptimizerConfig {
            learning_rate,
            beta,
            epsilon,
        } = self.cfg;
        let correction = 1.0 - beta.powi(self.steps.min(i32::MAX as u64) as i32);
        for (((_, param), g), v) in store
            .iter_mut()
            .zip(grads)
            .zip(self.second_moment.iter_mut())
        {
            for ((w, &gi), vi) in param.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = beta * *vi + (1.0 - beta) * gi * gi;
                let vhat = *vi / correction;
                *w -= learning_rate * gi / (vhat.sqrt() + epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.register("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.register("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn linear_handles_leading_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let lin = Linear::new(&mut s, "l", 3, 2, true, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = s.bind(&mut g, true);
        let x = g.constant(Tensor::randn(&[4, 5, 3], 1.0, &mut rng));
        let y = lin.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[4, 5, 2]);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = ParamStore::new();
        s.register("a", Tensor::from_vec(vec![1.0, -2.0])).unwrap();
        let before = s.clone();
        let mut opt = AdaptiveOptimizer::new(OptimizerConfig::default(), &s);
        opt.step(&mut s, &[vec![0.0, 0.0]]);
        assert_eq!(s.by_name("a"), before.by_name("a"));
    }

    #[test]
    fn optimizer_descends_a_quadratic() {
        let mut s = ParamStore::new();
        let id = s.register("x", Tensor::from_vec(vec![3.0])).unwrap();
        let mut opt = AdaptiveOptimizer::new(
            OptimizerConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
            &s,
        );
        for _ in 0..200 {
            let x = s.get(id).data()[0];
            opt.step(&mut s, &[vec![2.0 * x]]);
        }
        assert!(s.get(id).data()[0].abs() < 0.1);
    }
}
