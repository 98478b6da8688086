//! Named parameter storage and the linear layer shared by every network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Which optimizer group a parameter belongs to. The trainer enables
/// groups per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Fixed input statistics; never updated by the optimizer.
    FeatureNorm,
    SpeechEncoder,
    TextEmbedding,
    TextProjection,
    Temperature,
    Classifier,
    Discriminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn for_tests(i: usize) -> Self {
        Self(i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn in_group(&self, group: ParamGroup) -> impl Iterator<Item = ParamId> + '_ {
        self.iter()
            .filter(move |(_, p)| p.group == group)
            .map(|(id, _)| id)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Overwrites every value from `other`, which must have identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::shape("parameter count differs"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::shape(format!(
                    "parameter {} does not match {}",
                    dst.name, src.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Graph leaves for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Adds every parameter to `graph` as a leaf; those whose group passes
    /// `trainable` require gradients.
    pub fn new(
        graph: &mut Graph,
        store: &ParamStore,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Self {
        let vars = store
            .params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), trainable(p.group)))
            .collect();
        Self { vars }
    }

    /// Wraps leaves created elsewhere, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    /// Binds everything as constants.
    pub fn frozen(graph: &mut Graph, store: &ParamStore) -> Self {
        Self::new(graph, store, |_| false)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient accumulated for `id`, or zeros if none reached it.
    pub fn grad(&self, graph: &Graph, store: &ParamStore, id: ParamId) -> Vec<f64> {
        graph
            .grad(self.var(id))
            .map_or_else(|| vec![0.0; store.get(id).len()], <[f64]>::to_vec)
    }
}

/// Uniform fan-in scaled init, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn kaiming_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(fan_in, fan_out, data).expect("shape matches")
}

/// `y = x · W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            kaiming_uniform(rng, fan_in, fan_out),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).rows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).cols()
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let xw = g.matmul(x, b.var(self.weight))?;
        g.add_row(xw, b.var(self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn kaiming_bounds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let w = kaiming_uniform(&mut rng, 24, 10);
        let bound = 0.5;
        assert!(w.data().iter().all(|v| v.abs() < bound));
        assert_eq!(w.shape(), (24, 10));
    }

    #[test]
    fn linear_forward() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", ParamGroup::Classifier, 2, 1, &mut rng);
        *store.get_mut(lin.weight) = Tensor::new(2, 1, vec![2.0, -1.0]).unwrap();
        *store.get_mut(lin.bias) = Tensor::scalar(0.5);
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &store);
        let x = g.constant(Tensor::new(1, 2, vec![3.0, 4.0]).unwrap());
        let y = lin.forward(&mut g, &b, x).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
        assert_eq!(store.find("l.bias"), Some(lin.bias));
    }
}
