//! A small tape-based reverse-mode autodiff engine over `f64` matrices.
//!
//! A [`Graph`] records primitive operations during a forward pass. Calling
//! [`Graph::backward`] once walks the tape in reverse, returns the gradient of
//! every node and accumulates parameter gradients into a [`ParamStore`].

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Named parameter arrays with matching gradient accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) -> usize {
        if let Some(&i) = self.index.get(name) {
            self.grads[i] = Matrix::zeros(value.raw_dim());
            self.values[i] = value;
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.grads.push(Matrix::zeros(value.raw_dim()));
        self.values.push(value);
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        Ok(&self.values[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        let i = self.id(name)?;
        Ok(&mut self.values[i])
    }

    pub fn grad(&self, name: &str) -> Result<&Matrix> {
        Ok(&self.grads[self.id(name)?])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|v| v.iter().copied()).collect()
    }

    /// Flat gradient restricted to parameters whose name starts with `prefix`.
    pub fn flat_grads_with_prefix(&self, prefix: &str) -> Vec<f64> {
        self.names
            .iter()
            .zip(&self.grads)
            .filter(|(n, _)| n.starts_with(prefix))
            .flat_map(|(_, g)| g.iter().copied())
            .collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.size() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.size())));
        }
        let mut it = flat.iter();
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x = *it.next().unwrap());
        }
        Ok(())
    }

    /// Name of the parameter owning flat coordinate `i`.
    pub fn name_of_flat(&self, mut i: usize) -> &str {
        for (n, v) in self.names.iter().zip(&self.values) {
            if i < v.len() {
                return n;
            }
            i -= v.len();
        }
        "<out of range>"
    }

    fn accumulate(&mut self, id: usize, g: &Matrix) {
        self.grads[id] += g;
    }

    /// Dense layer `name`: Glorot-uniform weights `in x out` and zero bias `1 x out`.
    pub fn init_dense<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Matrix::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-limit..=limit));
        self.insert(&format!("{name}.w"), w);
        self.insert(&format!("{name}.b"), Matrix::zeros((1, fan_out)));
    }

    /// Writes `<path>.bin` (little-endian f64, manifest order) and
    /// `<path>.json` (names, shapes and offsets).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bin = path.with_extension("bin");
        let json = path.with_extension("json");
        let mut bytes = Vec::with_capacity(self.size() * 8);
        let mut entries = Vec::with_capacity(self.len());
        let mut offset = 0;
        for (name, v) in self.names.iter().zip(&self.values) {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: v.shape().to_vec(),
                offset,
            });
            offset += v.len();
            for x in v.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: "catgrad-params".into(),
            version: 1,
            entries,
        };
        fs::write(&bin, bytes).map_err(|e| Error::io(bin.clone(), e))?;
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Malformed(e.to_string()))?;
        fs::write(&json, text).map_err(|e| Error::io(json.clone(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bin = path.with_extension("bin");
        let json = path.with_extension("json");
        let text = fs::read_to_string(&json).map_err(|e| Error::io(json.clone(), e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", json.display())))?;
        let bytes = fs::read(&bin).map_err(|e| Error::io(bin.clone(), e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Malformed(format!("{}: length not a multiple of 8", bin.display())));
        }
        let floats: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut store = ParamStore::new();
        for e in manifest.entries {
            if e.shape.len() != 2 {
                return Err(Error::Malformed(format!("parameter {} is not a matrix", e.name)));
            }
            let n = e.shape[0] * e.shape[1];
            let data = floats
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Malformed(format!("parameter {} out of bounds", e.name)))?;
            let m = Matrix::from_shape_vec((e.shape[0], e.shape[1]), data.to_vec())
                .map_err(|err| Error::Malformed(err.to_string()))?;
            store.insert(&e.name, m);
        }
        Ok(store)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    SumRows(NodeId),
    /// Elementwise `-[t log s(z) + (1-t) log(1-s(z))]` for logits `z`, targets `t`.
    BceWithLogits(NodeId, NodeId),
    /// `sum (a - b)^2` as a 1x1 matrix.
    SquaredError(NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Recorded forward computation.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    output: Option<NodeId>,
    consumed: bool,
}

/// Gradient of the backward root with respect to every node.
#[derive(Debug, Clone)]
pub struct NodeGrads {
    grads: Vec<Option<Matrix>>,
}

impl NodeGrads {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(op: &str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let id = store.id(name)?;
        Ok(self.push(Op::Param(id), store.values[id].clone()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", va, vb));
        }
        let v = va.dot(vb);
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// Adds a `1 x n` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.nrows() != 1 || vb.ncols() != vx.ncols() {
            return Err(shape_err("add_bias", vx, vb));
        }
        let v = vx + vb;
        Ok(self.push(Op::AddBias(x, b), v))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|a| a.max(0.0));
        self.push(Op::Relu(x), v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|a| (a - max).exp());
            let s = row.sum();
            row.mapv_inplace(|a| a / s);
        }
        self.push(Op::SoftmaxRows(x), v)
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|a| a - lse);
        }
        self.push(Op::LogSoftmaxRows(x), v)
    }

    fn binary_same_shape(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va, vb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x) * c;
        self.push(Op::Scale(x, c), v)
    }

    /// Sum of all entries as a `1 x 1` matrix.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Matrix::from_elem((1, 1), s))
    }

    /// Row sums as an `n x 1` matrix.
    pub fn sum_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumRows(x), v)
    }

    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.binary_same_shape("bce_with_logits", logits, targets)?;
        let mut v = self.value(logits).clone();
        v.zip_mut_with(self.value(targets), |z, &t| {
            *z = z.max(0.0) - *z * t + (1.0 + (-z.abs()).exp()).ln();
        });
        Ok(self.push(Op::BceWithLogits(logits, targets), v))
    }

    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("squared_error", a, b)?;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Op::SquaredError(a, b), Matrix::from_elem((1, 1), s)))
    }

    /// Backpropagates `upstream` from the recorded output.
    pub fn backward(&mut self, upstream: &Matrix, store: &mut ParamStore) -> Result<NodeGrads> {
        let root = self
            .output
            .ok_or_else(|| Error::InvalidArgument("graph has no output node".into()))?;
        self.backward_from(root, upstream, store)
    }

    /// Backpropagates `upstream` from `root`. A graph can be consumed once.
    pub fn backward_from(&mut self, root: NodeId, upstream: &Matrix, store: &mut ParamStore) -> Result<NodeGrads> {
        self.run_backward(root, upstream, Some(store))
    }

    /// Backpropagates without touching any parameter accumulator; only the
    /// returned node gradients are produced.
    pub fn backward_detached(&mut self, root: NodeId, upstream: &Matrix) -> Result<NodeGrads> {
        self.run_backward(root, upstream, None)
    }

    fn run_backward(&mut self, root: NodeId, upstream: &Matrix, mut store: Option<&mut ParamStore>) -> Result<NodeGrads> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if upstream.shape() != self.value(root).shape() {
            return Err(shape_err("backward upstream", upstream, self.value(root)));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(upstream.clone());

        fn acc(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
            match &mut grads[id.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    if let Some(store) = store.as_deref_mut() {
                        store.accumulate(pid, &g);
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    acc(&mut grads, a, ga);
                    acc(&mut grads, b, gb);
                }
                Op::AddBias(x, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, b, gb);
                    acc(&mut grads, x, g.clone());
                }
                Op::Relu(x) => {
                    let mut gx = g.clone();
                    gx.zip_mut_with(&self.nodes[x.0].value, |a, &pre| {
                        if pre <= 0.0 {
                            *a = 0.0;
                        }
                    });
                    acc(&mut grads, x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g.clone();
                    gx.zip_mut_with(&node.value, |a, &s| *a *= s * (1.0 - s));
                    acc(&mut grads, x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let inner = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let gx = y * &(&g - &inner);
                    acc(&mut grads, x, gx);
                }
                Op::LogSoftmaxRows(x) => {
                    let p = node.value.mapv(f64::exp);
                    let total = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let gx = &g - &(&p * &total);
                    acc(&mut grads, x, gx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, b, -&g);
                    acc(&mut grads, a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    acc(&mut grads, a, ga);
                    acc(&mut grads, b, gb);
                }
                Op::Scale(x, c) => acc(&mut grads, x, &g * c),
                Op::Sum(x) => {
                    let s = g[[0, 0]];
                    let shape = self.nodes[x.0].value.raw_dim();
                    acc(&mut grads, x, Matrix::from_elem(shape, s));
                }
                Op::SumRows(x) => {
                    let shape = self.nodes[x.0].value.raw_dim();
                    let gx = Matrix::from_shape_fn(shape, |(r, _)| g[[r, 0]]);
                    acc(&mut grads, x, gx);
                }
                Op::BceWithLogits(z, t) => {
                    let zv = &self.nodes[z.0].value;
                    let tv = &self.nodes[t.0].value;
                    let mut gz = zv.mapv(sigmoid) - tv;
                    gz *= &g;
                    let gt = -(zv * &g);
                    acc(&mut grads, z, gz);
                    acc(&mut grads, t, gt);
                }
                Op::SquaredError(a, b) => {
                    let s = g[[0, 0]];
                    let diff = &self.nodes[a.0].value - &self.nodes[b.0].value;
                    acc(&mut grads, a, &diff * (2.0 * s));
                    acc(&mut grads, b, &diff * (-2.0 * s));
                }
            }
            grads[i] = Some(g);
        }
        Ok(NodeGrads { grads })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

/// One dense layer `x W + b` followed by an activation. Parameters are named
/// `<name>.w` and `<name>.b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Layer list for a multilayer perceptron: ReLU on hidden layers, `last` on
/// the output layer.
pub fn mlp(prefix: &str, sizes: &[usize], last: Activation) -> Vec<LayerSpec> {
    let n = sizes.len().saturating_sub(1);
    (0..n)
        .map(|i| LayerSpec {
            name: format!("{prefix}{i}"),
            in_dim: sizes[i],
            out_dim: sizes[i + 1],
            activation: if i + 1 == n { last } else { Activation::Relu },
        })
        .collect()
}

pub fn init_layers<R: Rng + ?Sized>(store: &mut ParamStore, layers: &[LayerSpec], rng: &mut R) {
    for l in layers {
        store.init_dense(&l.name, l.in_dim, l.out_dim, rng);
    }
}

/// Records `layers` applied to the node `x` on an existing graph.
pub fn apply_layers(graph: &mut Graph, params: &ParamStore, layers: &[LayerSpec], mut x: NodeId) -> Result<NodeId> {
    for l in layers {
        let v = graph.value(x);
        if v.ncols() != l.in_dim {
            return Err(Error::Shape(format!(
                "layer `{}` expects {} inputs, got {}",
                l.name,
                l.in_dim,
                v.ncols()
            )));
        }
        let w = graph.param(params, &format!("{}.w", l.name))?;
        let b = graph.param(params, &format!("{}.b", l.name))?;
        if graph.value(w).shape() != [l.in_dim, l.out_dim] || graph.value(b).shape() != [1, l.out_dim] {
            return Err(Error::Shape(format!("parameters of layer `{}` have the wrong shape", l.name)));
        }
        let h = graph.matmul(x, w)?;
        let h = graph.add_bias(h, b)?;
        x = match l.activation {
            Activation::Linear => h,
            Activation::Relu => graph.relu(h),
            Activation::Sigmoid => graph.sigmoid(h),
        };
    }
    Ok(x)
}

/// Runs `layers` on `input`, returning the output and the recorded tape.
pub fn forward(params: &ParamStore, layers: &[LayerSpec], input: &Matrix) -> Result<(Matrix, Graph)> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let out = apply_layers(&mut g, params, layers, x)?;
    g.set_output(out);
    Ok((g.value(out).clone(), g))
}

/// Forward pass without recording a tape.
pub fn predict(params: &ParamStore, layers: &[LayerSpec], input: &Matrix) -> Result<Matrix> {
    let mut x = input.clone();
    for l in layers {
        if x.ncols() != l.in_dim {
            return Err(Error::Shape(format!(
                "layer `{}` expects {} inputs, got {}",
                l.name,
                l.in_dim,
                x.ncols()
            )));
        }
        let w = params.get(&format!("{}.w", l.name))?;
        let b = params.get(&format!("{}.b", l.name))?;
        let mut h = x.dot(w);
        h += b;
        x = match l.activation {
            Activation::Linear => h,
            Activation::Relu => h.mapv(|a| a.max(0.0)),
            Activation::Sigmoid => h.mapv(sigmoid),
        };
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Rmsprop { lr: f64, rho: f64, eps: f64 },
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }

    pub fn rmsprop(lr: f64) -> Self {
        Optimizer::Rmsprop { lr, rho: 0.9, eps: 1e-7 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Adam { lr, .. } | Optimizer::Rmsprop { lr, .. } | Optimizer::Sgd { lr } => lr,
        }
    }
}

/// Moment accumulators for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub optimizer: Optimizer,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimState {
    pub fn new(optimizer: Optimizer, size: usize) -> Self {
        Self {
            optimizer,
            step: 0,
            m: vec![0.0; size],
            v: vec![0.0; size],
        }
    }

    /// One descent step `params <- params - update(grads)`. A non-finite
    /// gradient aborts the step before anything is modified and reports the
    /// coordinate through `name_of`.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64], name_of: impl Fn(usize) -> String) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer state has {} entries, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name_of(i)));
        }
        self.step += 1;
        match self.optimizer {
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
            Optimizer::Rmsprop { lr, rho, eps } => {
                for i in 0..params.len() {
                    let g = grads[i];
                    self.v[i] = rho * self.v[i] + (1.0 - rho) * g * g;
                    params[i] -= lr * g / (self.v[i].sqrt() + eps);
                }
            }
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
        }
        Ok(())
    }

    /// Descent step on every parameter of `store` using its accumulated gradients.
    pub fn step_store(&mut self, store: &mut ParamStore) -> Result<()> {
        let mut flat = store.flat_values();
        let grads = store.flat_grads();
        self.step_flat(&mut flat, &grads, |i| store.name_of_flat(i).to_string())?;
        store.set_flat_values(&flat)
    }
}

pub fn adam_step(state: &mut OptimState, params: &mut ParamStore) -> Result<()> {
    state.step_store(params)
}

pub fn rmsprop_step(state: &mut OptimState, params: &mut ParamStore) -> Result<()> {
    state.step_store(params)
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub passed: bool,
}

/// Relative error with a floor on the denominator so that coordinates with
/// vanishing gradient are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares `analytic` with central differences of `loss` on up to
/// `max(50, ...)` randomly chosen coordinates (all of them when there are
/// fewer than 50).
pub fn finite_diff_check<F, R>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
    rng: &mut R,
) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    if params.len() != analytic.len() {
        return Err(Error::Shape("analytic gradient length differs from params".into()));
    }
    let coords: Vec<usize> = if params.len() <= 50 {
        (0..params.len()).collect()
    } else {
        rand::seq::index::sample(rng, params.len(), 50).into_vec()
    };
    let mut p = params.to_vec();
    let mut worst = (0.0, 0);
    for &i in &coords {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p);
        p[i] = orig - h;
        let down = loss(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let e = rel_err(analytic[i], fd);
        if !(e <= worst.0) {
            worst = (e, i);
        }
    }
    Ok(FdReport {
        checked: coords.len(),
        max_rel_err: worst.0,
        worst_coord: worst.1,
        passed: worst.0 < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_relu_layer() {
        let mut store = ParamStore::new();
        store.insert("l.w", Matrix::eye(3));
        store.insert("l.b", Matrix::zeros((1, 3)));
        let layers = vec![LayerSpec {
            name: "l".into(),
            in_dim: 3,
            out_dim: 3,
            activation: Activation::Relu,
        }];
        let x = array![[0.0, 1.5, 2.0], [3.0, 0.25, 0.0]];
        let (y, _) = forward(&store, &layers, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut store = ParamStore::new();
        store.insert("l.w", Matrix::zeros((2, 3)));
        store.insert("l.b", array![[1.0, -2.0, 0.5]]);
        let layers = mlp("l", &[2, 3], Activation::Linear);
        assert_eq!(layers[0].name, "l0");
        let mut store2 = ParamStore::new();
        store2.insert("l0.w", store.get("l.w").unwrap().clone());
        store2.insert("l0.b", store.get("l.b").unwrap().clone());
        let (y, _) = forward(&store2, &layers, &array![[3.0, 4.0], [-1.0, 9.0]]).unwrap();
        for row in y.rows() {
            assert_eq!(row.to_vec(), vec![1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layers = mlp("enc", &[4, 3, 2], Activation::Linear);
        let mut store = ParamStore::new();
        init_layers(&mut store, &layers, &mut rng);
        let err = forward(&store, &layers, &Matrix::zeros((2, 5))).unwrap_err();
        assert!(err.to_string().contains("enc0"), "{err}");
    }

    #[test]
    fn linear_layer_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.insert("w", random_matrix(3, 2, &mut rng));
        let x = random_matrix(4, 3, &mut rng);
        let u = random_matrix(4, 2, &mut rng);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let w = g.param(&store, "w").unwrap();
        let y = g.matmul(xi, w).unwrap();
        g.set_output(y);
        g.backward(&u, &mut store).unwrap();
        let expected = x.t().dot(&u);
        assert!((store.grad("w").unwrap() - &expected).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn relu_blocks_negative_units() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(array![[-1.0, 2.0]]);
        let y = g.relu(x);
        g.set_output(y);
        let grads = g.backward(&array![[5.0, 5.0]], &mut store).unwrap();
        assert_eq!(grads.get(x).unwrap(), &array![[0.0, 5.0]]);
    }

    #[test]
    fn tape_cannot_be_consumed_twice() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(array![[1.0]]);
        let y = g.scale(x, 2.0);
        g.set_output(y);
        g.backward(&array![[1.0]], &mut store).unwrap();
        assert!(matches!(g.backward(&array![[1.0]], &mut store), Err(Error::TapeConsumed)));
    }

    #[test]
    fn upstream_shape_is_checked() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(array![[1.0, 2.0]]);
        g.set_output(x);
        assert!(g.backward(&array![[1.0]], &mut store).is_err());
    }

    /// Scalar function of one input matrix built from a single primitive, for
    /// finite-difference checks.
    fn primitive_loss(kind: &str, x: &Matrix, other: &Matrix) -> (f64, Matrix) {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let oi = g.input(other.clone());
        let y = match kind {
            "relu" => g.relu(xi),
            "sigmoid" => g.sigmoid(xi),
            "softmax" => g.softmax_rows(xi),
            "log_softmax" => g.log_softmax_rows(xi),
            "add" => g.add(xi, oi).unwrap(),
            "sub" => g.sub(oi, xi).unwrap(),
            "mul" => g.mul(xi, oi).unwrap(),
            "scale" => g.scale(xi, -1.7),
            "sum_rows" => g.sum_rows(xi),
            "bce" => g.bce_with_logits(xi, oi).unwrap(),
            "bce_target" => g.bce_with_logits(oi, xi).unwrap(),
            "sq" => g.squared_error(xi, oi).unwrap(),
            "matmul" => {
                let t = g.input(other.t().to_owned());
                g.matmul(xi, t).unwrap()
            }
            "bias" => {
                let b = g.input(other.row(0).to_owned().insert_axis(Axis(0)));
                g.add_bias(xi, b).unwrap()
            }
            _ => unreachable!(),
        };
        // Weighted sum so every output entry matters.
        let weights = Matrix::from_shape_fn(g.value(y).raw_dim(), |(r, c)| 0.3 + 0.7 * ((r * 7 + c * 3) % 5) as f64);
        let wi = g.input(weights);
        let z = g.mul(y, wi).unwrap();
        let s = g.sum(z);
        g.set_output(s);
        let value = g.value(s)[[0, 0]];
        let grads = g.backward(&array![[1.0]], &mut store).unwrap();
        (value, grads.get(xi).cloned().unwrap_or_else(|| Matrix::zeros(x.raw_dim())))
    }

    #[test]
    fn every_primitive_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [
            "relu", "sigmoid", "softmax", "log_softmax", "add", "sub", "mul", "scale", "sum_rows", "bce",
            "bce_target", "sq", "matmul", "bias",
        ] {
            let x = random_matrix(3, 4, &mut rng).mapv(|v| if v.abs() < 0.05 { 0.3 } else { v });
            let other = if kind == "bce" {
                Matrix::from_shape_fn((3, 4), |_| if rng.gen::<bool>() { 1.0 } else { 0.0 })
            } else {
                random_matrix(3, 4, &mut rng)
            };
            let (_, analytic) = primitive_loss(kind, &x, &other);
            let flat: Vec<f64> = x.iter().copied().collect();
            let report = finite_diff_check(
                |p| primitive_loss(kind, &Matrix::from_shape_vec((3, 4), p.to_vec()).unwrap(), &other).0,
                &flat,
                &analytic.iter().copied().collect::<Vec<_>>(),
                1e-4,
                1e-4,
                &mut rng,
            )
            .unwrap();
            assert!(report.passed, "{kind}: {report:?}");
        }
    }

    fn mlp_loss(store: &ParamStore, layers: &[LayerSpec], x: &Matrix, t: &Matrix) -> f64 {
        let y = predict(store, layers, x).unwrap();
        y.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layers = mlp("net", &[5, 8, 6, 3], Activation::Sigmoid);
        let mut store = ParamStore::new();
        init_layers(&mut store, &layers, &mut rng);
        let x = random_matrix(7, 5, &mut rng);
        let t = random_matrix(7, 3, &mut rng);
        let (_, mut g) = forward(&store, &layers, &x).unwrap();
        let out = g.output().unwrap();
        let ti = g.input(t.clone());
        let loss = g.squared_error(out, ti).unwrap();
        g.backward_from(loss, &array![[1.0]], &mut store).unwrap();
        let analytic = store.flat_grads();
        let base = store.flat_values();
        let mut probe = store.clone();
        let report = finite_diff_check(
            |p| {
                probe.set_flat_values(p).unwrap();
                mlp_loss(&probe, &layers, &x, &t)
            },
            &base,
            &analytic,
            1e-4,
            1e-4,
            &mut rng,
        )
        .unwrap();
        assert!(report.checked >= 50);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn finite_diff_check_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..80).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let grad: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let quad = |q: &[f64]| q.iter().map(|v| v * v).sum::<f64>();
        let ok = finite_diff_check(quad, &p, &grad, 1e-4, 1e-8, &mut rng).unwrap();
        assert!(ok.passed && ok.max_rel_err < 1e-9, "{ok:?}");
        let mut bad = grad.clone();
        bad.iter_mut().for_each(|v| *v *= 1.01);
        let fail = finite_diff_check(quad, &p, &bad, 1e-4, 1e-4, &mut rng).unwrap();
        assert!(!fail.passed);
        assert!(finite_diff_check(quad, &p, &grad, 0.0, 1e-4, &mut rng).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut state = OptimState::new(Optimizer::adam(1e-3), 3);
        let mut p = vec![1.0, -2.0, 0.5];
        state.step_flat(&mut p, &[0.3, -4.0, 1e-2], |i| i.to_string()).unwrap();
        let moved: Vec<f64> = p.iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| a - b).collect();
        assert!((moved[0] + 1e-3).abs() < 1e-8);
        assert!((moved[1] - 1e-3).abs() < 1e-8);
        assert!((moved[2] + 1e-3).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for opt in [Optimizer::adam(0.1), Optimizer::rmsprop(0.1)] {
            let mut state = OptimState::new(opt, 2);
            let mut p = vec![0.7, -0.2];
            for _ in 0..5 {
                state.step_flat(&mut p, &[0.0, 0.0], |i| i.to_string()).unwrap();
            }
            assert_eq!(p, vec![0.7, -0.2]);
        }
    }

    #[test]
    fn rmsprop_first_step() {
        let mut state = OptimState::new(Optimizer::Rmsprop { lr: 0.5, rho: 0.9, eps: 0.0 }, 2);
        let mut p = vec![0.0, 0.0];
        state.step_flat(&mut p, &[3.0, -0.01], |i| i.to_string()).unwrap();
        let expected = 0.5 / 0.1f64.sqrt();
        assert!((p[0] + expected).abs() < 1e-12);
        assert!((p[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.insert("enc0.w", Matrix::zeros((2, 2)));
        store.insert("enc0.b", Matrix::zeros((1, 2)));
        store.grads[1][[0, 1]] = f64::NAN;
        let mut state = OptimState::new(Optimizer::adam(0.1), store.size());
        let err = adam_step(&mut state, &mut store).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient for parameter `enc0.b`");
        assert_eq!(state.step, 0);
    }

    #[test]
    fn optimizers_are_deterministic() {
        let run = |opt: Optimizer| {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let layers = mlp("m", &[4, 6, 2], Activation::Linear);
            let mut store = ParamStore::new();
            init_layers(&mut store, &layers, &mut rng);
            let mut state = OptimState::new(opt, store.size());
            let x = random_matrix(8, 4, &mut rng);
            let t = random_matrix(8, 2, &mut rng);
            for _ in 0..100 {
                store.zero_grad();
                let (_, mut g) = forward(&store, &layers, &x).unwrap();
                let out = g.output().unwrap();
                let ti = g.input(t.clone());
                let l = g.squared_error(out, ti).unwrap();
                g.backward_from(l, &array![[1.0]], &mut store).unwrap();
                state.step_store(&mut store).unwrap();
            }
            store.flat_values()
        };
        for opt in [Optimizer::adam(1e-2), Optimizer::rmsprop(1e-2)] {
            let a = run(opt);
            let b = run(opt);
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        init_layers(&mut store, &mlp("dec", &[3, 5, 2], Activation::Linear), &mut rng);
        let path = dir.path().join("ckpt");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(loaded.names(), store.names());
        assert_eq!(loaded.flat_values(), store.flat_values());
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("json")).unwrap()).unwrap();
        assert_eq!(manifest["entries"][0]["name"], "dec0.w");
        assert_eq!(manifest["entries"][0]["shape"], serde_json::json!([3, 5]));
    }
}
