//! Named parameter storage and the per-forward-pass context that turns
//! parameters into graph leaves.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether AdamW applies decoupled weight decay to this tensor.
    pub decay: bool,
}

/// Flat registry of every trainable tensor of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Overwrites values from `(name, tensor)` pairs, checking that the set of
    /// names and every shape agree.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                entries.len(),
                self.params.len()
            )));
        }
        let mut by_name: HashMap<String, Tensor> = entries.into_iter().collect();
        for p in &mut self.params {
            let t = by_name
                .remove(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_checkpoint",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = t;
        }
        Ok(())
    }
}

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// One forward pass: the graph being built, read-only parameters, and the
/// random stream used by dropout.
pub struct Ctx<'g> {
    pub graph: &'g Graph,
    store: &'g ParamStore,
    leaves: RefCell<HashMap<ParamId, Var<'g>>>,
    pub mode: Mode,
    rng: RefCell<ChaCha8Rng>,
}

impl<'g> Ctx<'g> {
    pub fn new(graph: &'g Graph, store: &'g ParamStore, mode: Mode, rng: ChaCha8Rng) -> Self {
        Self {
            graph,
            store,
            leaves: RefCell::new(HashMap::new()),
            mode,
            rng: RefCell::new(rng),
        }
    }

    pub fn store(&self) -> &'g ParamStore {
        self.store
    }

    /// Graph leaf for `id`, created on first use.
    pub fn param(&self, id: ParamId) -> Var<'g> {
        *self
            .leaves
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| self.graph.leaf(self.store.get(id).clone()))
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    pub fn dropout(&self, x: Var<'g>, p: f64) -> Result<Var<'g>> {
        x.dropout(p, self.mode.is_train(), &mut *self.rng.borrow_mut())
    }

    /// Gradient for every parameter in the store; parameters that were not
    /// touched by this pass, or that nothing reached, get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        let leaves = self.leaves.borrow();
        self.store
            .iter()
            .map(|(id, p)| match leaves.get(&id) {
                Some(&v) => grads.get_or_zeros(v),
                None => Tensor::zeros(p.value.shape()),
            })
            .collect()
    }
}

/// Dense affine layer `x·W + b`, `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Normal init with standard deviation `1/sqrt(d_in)` and zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        Self::with_weight(store, name, normal_tensor(&[d_in, d_out], std, rng), d_out)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_weight(store, name, Tensor::zeros(&[d_in, d_out]), d_out)
    }

    pub fn with_weight(store: &mut ParamStore, name: &str, weight: Tensor, d_out: usize) -> Self {
        let d_in = weight.shape()[0];
        let weight = store.add(format!("{name}.weight"), weight, true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), false);
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// Applies the layer to the last axis of `x`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: vec![self.d_in, self.d_out],
            });
        }
        let rows = shape.iter().product::<usize>() / self.d_in;
        let y = x
            .reshape(&[rows, self.d_in])?
            .matmul(ctx.param(self.weight))?
            .add_bias(ctx.param(self.bias))?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        y.reshape(&out_shape)
    }
}

/// Learnable affine layer normalization over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(ctx.param(self.gain), ctx.param(self.bias))
    }
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Square matrix with orthonormal columns (Gram-Schmidt on a Gaussian draw).
pub fn orthogonal_matrix(n: usize, rng: &mut impl Rng) -> Tensor {
    loop {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut ok = true;
        for _ in 0..n {
            let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            // two passes keep the basis orthogonal to working precision
            for _ in 0..2 {
                for c in &cols {
                    let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
        if ok {
            return Tensor::from_fn(&[n, n], |i| cols[i % n][i / n]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn orthogonal_init_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = orthogonal_matrix(16, &mut rng);
        for i in 0..16 {
            for j in 0..16 {
                let dot: f64 = (0..16)
                    .map(|r| q.data()[r * 16 + i] * q.data()[r * 16 + j])
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn params_become_single_leaves() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0), true);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let a = ctx.param(id);
        let b = ctx.param(id);
        assert_eq!(a.id, b.id);
        let y = a.mul(b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(ctx.param_grads(&grads)[0].item(), 4.0);
    }
}
