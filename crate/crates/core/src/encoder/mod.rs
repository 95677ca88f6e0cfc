//! Embedding bags, tanh towers and the two scoring architectures.
//!
//! Both models keep separate embedding tables for the input and response side,
//! shared across the per-feature subnetworks of that side. Every layer of a
//! [`Tower`] applies `tanh`, so tower outputs lie in `(-1, 1)`.

mod dot;
mod file;
mod joint;

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::numeric::{dot, Real};
use crate::text::FeatureBag;

pub use dot::{DotConfig, DotGrads, DotProductEncoder, Encoding, SideTrace};
pub use file::{load_model, save_model, AnyModel, SavedModel, MODEL_MAGIC, MODEL_VERSION};
pub use joint::{JointConfig, JointGrads, JointScorer, PairTrace};

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn uniform_vec<T: Real, R: Rng>(rng: &mut R, len: usize, bound: f64) -> Vec<T> {
    (0..len).map(|_| T::lit(rng.random_range(-bound..=bound))).collect()
}

pub(crate) fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|&x| U::lit(x.as_f64())).collect()
}

/// Dense `rows x dim` table of n-gram embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    rows: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> EmbeddingTable<T> {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingTable {
            rows,
            dim,
            data: vec![T::zero(); rows * dim],
        }
    }

    pub fn random<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Self {
        let bound = glorot_bound(rows, dim);
        EmbeddingTable {
            rows,
            dim,
            data: uniform_vec(rng, rows * dim, bound),
        }
    }

    pub fn from_data(rows: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        check_dim("embedding table", rows * dim, data.len())?;
        Ok(EmbeddingTable { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, id: usize) -> &[T] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn row_mut(&mut self, id: usize) -> &mut [T] {
        &mut self.data[id * self.dim..(id + 1) * self.dim]
    }

    /// Sum of `count * row(id)` over the bag; the empty bag maps to zero.
    pub fn embed_bag(&self, bag: &FeatureBag) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.dim];
        for &(id, count) in &bag.items {
            let id = id as usize;
            if id >= self.rows {
                return Err(Error::OutOfRange {
                    context: "embedding table",
                    index: id,
                    len: self.rows,
                });
            }
            let c = T::lit(count as f64);
            for (o, &w) in out.iter_mut().zip(self.row(id)) {
                *o += c * w;
            }
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> EmbeddingTable<U> {
        EmbeddingTable {
            rows: self.rows,
            dim: self.dim,
            data: cast_vec(&self.data),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Gradient of an embedding table restricted to the rows a batch touched.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows<T> {
    dim: usize,
    rows: BTreeMap<u32, Vec<T>>,
}

impl<T: Real> SparseRows<T> {
    pub fn new(dim: usize) -> Self {
        SparseRows {
            dim,
            rows: BTreeMap::new(),
        }
    }

    /// Adds `count * grad` to every row named in `bag`.
    pub fn accumulate_bag(&mut self, bag: &FeatureBag, grad: &[T]) {
        for &(id, count) in &bag.items {
            let c = T::lit(count as f64);
            let row = self.rows.entry(id).or_insert_with(|| vec![T::zero(); self.dim]);
            for (r, &g) in row.iter_mut().zip(grad) {
                *r += c * g;
            }
        }
    }

    /// Gradient for `id`; untouched rows are zero.
    pub fn row(&self, id: u32) -> Vec<T> {
        self.rows.get(&id).cloned().unwrap_or_else(|| vec![T::zero(); self.dim])
    }

    pub fn touched(&self) -> impl Iterator<Item = (u32, &[T])> {
        self.rows.iter().map(|(&id, r)| (id, r.as_slice()))
    }

    pub fn squared_norm(&self) -> f64 {
        self.rows.values().flatten().map(|x| x.as_f64().powi(2)).sum()
    }

    pub fn apply(&self, table: &mut EmbeddingTable<T>, lr: T) {
        for (&id, g) in &self.rows {
            for (w, &gi) in table.row_mut(id as usize).iter_mut().zip(g) {
                *w -= lr * gi;
            }
        }
    }

    pub fn to_dense(&self, rows: usize) -> Vec<T> {
        let mut out = vec![T::zero(); rows * self.dim];
        for (&id, g) in &self.rows {
            out[id as usize * self.dim..(id as usize + 1) * self.dim].copy_from_slice(g);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.rows.values().flatten().all(|x| x.is_finite())
    }
}

/// Affine map `W x + b` with `W` stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn random<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Dense {
            inputs,
            outputs,
            weights: uniform_vec(rng, inputs * outputs, glorot_bound(inputs, outputs)),
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn from_parts(inputs: usize, outputs: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        check_dim("dense weights", inputs * outputs, weights.len())?;
        check_dim("dense bias", outputs, bias.len())?;
        Ok(Dense {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    pub fn row(&self, o: usize) -> &[T] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }

    pub fn affine(&self, x: &[T]) -> Vec<T> {
        (0..self.outputs).map(|o| dot(self.row(o), x) + self.bias[o]).collect()
    }

    /// Given `dz = dL/d(Wx+b)`, accumulates parameter gradients into `grads`
    /// and returns `dL/dx`.
    pub fn backward(&self, x: &[T], dz: &[T], grads: &mut Dense<T>) -> Vec<T> {
        let mut dx = vec![T::zero(); self.inputs];
        for o in 0..self.outputs {
            let g = dz[o];
            if g == T::zero() {
                continue;
            }
            grads.bias[o] += g;
            let w = self.row(o);
            let gw = &mut grads.weights[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                gw[i] += g * x[i];
                dx[i] += g * w[i];
            }
        }
        dx
    }

    pub fn zeros_like(&self) -> Self {
        Dense::zeros(self.inputs, self.outputs)
    }

    pub fn add_scaled(&mut self, other: &Dense<T>, scale: T) {
        for (w, &g) in self.weights.iter_mut().zip(&other.weights) {
            *w += scale * g;
        }
        for (b, &g) in self.bias.iter_mut().zip(&other.bias) {
            *b += scale * g;
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.weights.iter().chain(&self.bias).map(|x| x.as_f64().powi(2)).sum()
    }

    pub fn cast<U: Real>(&self) -> Dense<U> {
        Dense {
            inputs: self.inputs,
            outputs: self.outputs,
            weights: cast_vec(&self.weights),
            bias: cast_vec(&self.bias),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|x| x.is_finite())
    }
}

/// Stack of `tanh(W x + b)` layers. A tower with no layers is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower<T> {
    input_dim: usize,
    layers: Vec<Dense<T>>,
}

impl<T: Real> Tower<T> {
    pub fn random<R: Rng>(input_dim: usize, sizes: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut prev = input_dim;
        for &s in sizes {
            layers.push(Dense::random(prev, s, rng));
            prev = s;
        }
        Tower { input_dim, layers }
    }

    pub fn identity(input_dim: usize) -> Self {
        Tower {
            input_dim,
            layers: Vec::new(),
        }
    }

    pub fn from_layers(input_dim: usize, layers: Vec<Dense<T>>) -> Result<Self> {
        let mut prev = input_dim;
        for l in &layers {
            check_dim("tower layer input", prev, l.inputs)?;
            prev = l.outputs;
        }
        Ok(Tower { input_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.outputs)
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    /// Layer sizes `[input, out_1, ..., out_L]`.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim).chain(self.layers.iter().map(|l| l.outputs)).collect()
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        check_dim("tower input", self.input_dim, x.len())?;
        let mut h = x.to_vec();
        for l in &self.layers {
            h = l.affine(&h);
            h.iter_mut().for_each(|v| *v = v.tanh());
        }
        Ok(h)
    }

    /// Activations `[x, h_1, ..., h_L]` for use by [`Tower::backward`].
    pub fn forward_trace(&self, x: Vec<T>) -> Result<Vec<Vec<T>>> {
        check_dim("tower input", self.input_dim, x.len())?;
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(x);
        for l in &self.layers {
            let mut h = l.affine(trace.last().unwrap());
            h.iter_mut().for_each(|v| *v = v.tanh());
            trace.push(h);
        }
        Ok(trace)
    }

    /// Backpropagates `grad_out = dL/dh_L` through the tower, accumulating into
    /// `grads` (a tower of the same shape), and returns `dL/dx`.
    pub fn backward(&self, trace: &[Vec<T>], grad_out: &[T], grads: &mut Tower<T>) -> Vec<T> {
        let mut g = grad_out.to_vec();
        for (k, l) in self.layers.iter().enumerate().rev() {
            let h = &trace[k + 1];
            let dz: Vec<T> = g.iter().zip(h).map(|(&gi, &hi)| gi * (T::one() - hi * hi)).collect();
            g = l.backward(&trace[k], &dz, &mut grads.layers[k]);
        }
        g
    }

    pub fn zeros_like(&self) -> Self {
        Tower {
            input_dim: self.input_dim,
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Tower<T>, scale: T) {
        for (l, g) in self.layers.iter_mut().zip(&other.layers) {
            l.add_scaled(g, scale);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers.iter().map(Dense::squared_norm).sum()
    }

    pub fn cast<U: Real>(&self) -> Tower<U> {
        Tower {
            input_dim: self.input_dim,
            layers: self.layers.iter().map(Dense::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(Dense::all_finite)
    }

    pub(crate) fn for_each_slice_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut [T])) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            f(format!("{name}.{k}.w"), &mut l.weights);
            f(format!("{name}.{k}.b"), &mut l.bias);
        }
    }

    pub(crate) fn for_each_slice(&self, name: &str, f: &mut dyn FnMut(String, &[T])) {
        for (k, l) in self.layers.iter().enumerate() {
            f(format!("{name}.{k}.w"), &l.weights);
            f(format!("{name}.{k}.b"), &l.bias);
        }
    }
}

/// `h_x . h_y`.
pub fn score_dot<T: Real>(hx: &[T], hy: &[T]) -> Result<T> {
    check_dim("score_dot", hx.len(), hy.len())?;
    Ok(dot(hx, hy))
}

/// `K x K` matrix of `score_dot(hx[i], hy[j])`, row-major.
pub fn batch_score_matrix<T: Real>(hx: &[Vec<T>], hy: &[Vec<T>]) -> Result<Vec<T>> {
    check_dim("batch_score_matrix", hx.len(), hy.len())?;
    let mut out = Vec::with_capacity(hx.len() * hy.len());
    for x in hx {
        for y in hy {
            out.push(score_dot(x, y)?);
        }
    }
    Ok(out)
}
