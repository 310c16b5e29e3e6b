//! Named parameter storage and graph sessions that bind parameters lazily.

use std::collections::HashMap;

use rand::Rng;

use crate::numerics::{Gradients, Graph, NumericsError, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Ordered collection of named tensors.
///
/// Names are dotted paths (`core.na.fc0.w`, `ns.en.conv2.k`, `lutp.es`) and the
/// first segment(s) identify the parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Parameters whose name is `prefix` or starts with `prefix.`.
    pub fn group(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| {
                let n = self.name(id);
                n == prefix || (n.starts_with(prefix) && n.as_bytes().get(prefix.len()) == Some(&b'.'))
            })
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Fully connected `x·W + b` layer.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        init_sd: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{prefix}.w"), Tensor::randn(vec![fan_in, fan_out], init_sd, rng));
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(vec![fan_out]));
        Dense { w, b }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var, NumericsError> {
        let (w, b) = (s.param(self.w), s.param(self.b));
        s.graph.affine(x, w, b)
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.get(self.w).shape()[0]
    }
}

/// Stack of dense layers with ReLU between them and a linear last layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`; layer names are `{prefix}.fc{i}`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        sizes: &[usize],
        init_sd: f64,
        rng: &mut R,
    ) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{prefix}.fc{i}"), w[0], w[1], init_sd, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var, NumericsError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h)?;
            if i + 1 < self.layers.len() {
                h = s.graph.relu(h);
            }
        }
        Ok(h)
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    /// Adds every gradient of `other`, in parameter order.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// A graph plus lazy bindings of store parameters as leaves.
///
/// Parameters outside the trainable mask are bound as constants, so gradients
/// still flow through them to trainable inputs but are never computed for them.
pub struct Session<'m> {
    pub graph: Graph<'m>,
    store: &'m ParamStore,
    trainable: Vec<bool>,
    bound: Vec<Option<Var>>,
}

impl<'m> Session<'m> {
    /// Session where every parameter is trainable.
    pub fn new(store: &'m ParamStore) -> Self {
        Self::with_trainable(store, &store.ids().collect::<Vec<_>>())
    }

    /// Session for inference: nothing is trainable.
    pub fn frozen(store: &'m ParamStore) -> Self {
        Self::with_trainable(store, &[])
    }

    pub fn with_trainable(store: &'m ParamStore, trainable: &[ParamId]) -> Self {
        let mut mask = vec![false; store.len()];
        for id in trainable {
            mask[id.0] = true;
        }
        Session { graph: Graph::new(), store, trainable: mask, bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'m ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id), self.trainable[id.0]);
        self.bound[id.0] = Some(v);
        v
    }

    /// Whether `id` has been bound in this session.
    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Gradients of `loss` for all bound trainable parameters.
    pub fn gradients(&self, loss: Var) -> Result<ParamGrads, NumericsError> {
        let mut raw: Gradients = self.graph.backward(loss)?;
        let mut out = ParamGrads::zeros_like(self.store);
        for (i, b) in self.bound.iter().enumerate() {
            if let (Some(v), true) = (b, self.trainable[i]) {
                out.grads[i] = Some(raw.take(*v).unwrap_or_else(|| Tensor::zeros(self.store.values[i].shape().to_vec())));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn group_matches_whole_segments_only() {
        let mut store = ParamStore::new();
        store.add("ns.en.fc0.w", Tensor::zeros(vec![1]));
        store.add("ns.es.fc0.w", Tensor::zeros(vec![1]));
        store.add("ns.enx.fc0.w", Tensor::zeros(vec![1]));
        store.add("lutp.en", Tensor::zeros(vec![1]));
        assert_eq!(store.group("ns.en").len(), 1);
        assert_eq!(store.group("ns").len(), 3);
        assert_eq!(store.group("lutp.en").len(), 1);
    }

    #[test]
    fn frozen_parameters_pass_gradient_but_get_none() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let first = Mlp::new(&mut store, "a", &[3, 4, 2], 0.5, &mut rng);
        let second = Mlp::new(&mut store, "b", &[2, 4, 1], 0.5, &mut rng);
        let trainable = store.group("a");
        let mut s = Session::with_trainable(&store, &trainable);
        let x = s.constant(Tensor::vector(vec![0.2, -0.4, 1.0]));
        let h = first.forward(&mut s, x).unwrap();
        let y = second.forward(&mut s, h).unwrap();
        let loss = s.graph.sum(y);
        let grads = s.gradients(loss).unwrap();
        for id in store.group("a") {
            assert!(grads.get(id).is_some());
        }
        for id in store.group("b") {
            assert!(grads.get(id).is_none());
        }
    }
}
