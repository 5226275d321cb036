//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Nodes are appended in execution order, so every node sits after its
//! inputs and a single reverse sweep visits each node exactly once.
//! Parameter leaves borrow their values from a [`ParamStore`]; the tape
//! never copies weights.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// right operand is `rows x 1`, repeated over columns
    Column,
    /// right operand is `1 x 1`
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var, Bcast),
    Scale(Var, f64),
    Elu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    Concat(Var, Var, usize),
    Slice(Var, usize, usize),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    RepeatCols(Var, usize),
    PairwiseAdd(Var, Var),
    Gather(Var, Vec<usize>),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
    OneVsAllBce { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
}

#[derive(Debug)]
enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    shape: [usize; 2],
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics computed by a training-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the value blended into running statistics.
    pub var_unbiased: Vec<f64>,
}

pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Vec<f64>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { store: None, nodes: Vec::new(), param_vars: HashMap::new(), leaf_grads: HashMap::new() }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self { store: Some(store), ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- leaves -------------------------------------------------------

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape();
        self.push_raw(shape, Value::Owned(t.into_data()), Op::Leaf, false)
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape();
        self.push_raw(shape, Value::Owned(t.into_data()), Op::Leaf, true)
    }

    /// Leaf backed by a stored parameter. Repeated calls with the same id
    /// return the same node so tied weights accumulate one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let shape = store.get(id).shape();
        let rg = store.is_trainable(id);
        let v = self.push_raw(shape, Value::Param(id), Op::Leaf, rg);
        self.param_vars.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.tensor(v);
        self.constant(t)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros(rows, cols))
    }

    fn push_raw(&mut self, shape: [usize; 2], value: Value, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: [usize; 2], data: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        debug_assert_eq!(shape[0] * shape[1], data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(shape, Value::Owned(data), op, rg))
    }

    // ---- accessors ----------------------------------------------------

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.store.expect("store").get(*id).data(),
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let [r, c] = self.shape(v);
        Tensor::new(r, c, self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- operations ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_into(self.value(a), self.value(b), m, k, n, &mut out);
        self.push("matmul", [m, n], out, Op::MatMul(a, b), &[a, b])
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb == [sa[0], 1] {
            Ok(Bcast::Column)
        } else if sb == [1, 1] {
            Ok(Bcast::Scalar)
        } else {
            Err(Error::shape(op, format!("cannot broadcast {}x{} onto {}x{}", sb[0], sb[1], sa[0], sa[1])))
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let bc = self.bcast(name, a, b)?;
        let [r, c] = self.shape(a);
        let av = self.value(a);
        let bv = self.value(b);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<f64> = match bc {
            Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Column => (0..r * c).map(|i| f(av[i], bv[i / c])).collect(),
            Bcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
        };
        self.push(name, [r, c], out, Op::Binary(kind, a, b, bc), &[a, b])
    }

    /// Elementwise sum; `b` may be a column vector or scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise (Hadamard) product with the same broadcast rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        self.push("scale", self.shape(a), out, Op::Scale(a, factor), &[a])
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| if x > 0.0 { x } else { x.exp_m1() }).collect();
        self.push("elu", self.shape(a), out, Op::Elu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push("tanh", self.shape(a), out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push("sigmoid", self.shape(a), out, Op::Sigmoid(a), &[a])
    }

    /// Softmax over `axis`: 0 normalizes each column, 1 normalizes each row.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis > 1 {
            return Err(Error::shape("softmax", format!("axis {axis} out of range")));
        }
        let [r, c] = self.shape(a);
        let mut out = self.value(a).to_vec();
        for_each_slice(r, c, axis, |idx| softmax_slice(&mut out, idx));
        self.push("softmax", [r, c], out, Op::Softmax(a, axis), &[a])
    }

    /// Stack along `axis`: 0 appends rows, 1 appends columns.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let [ra, ca] = self.shape(a);
        let [rb, cb] = self.shape(b);
        let (av, bv) = (self.value(a), self.value(b));
        let (shape, out) = match axis {
            0 if ca == cb => ([ra + rb, ca], [av, bv].concat()),
            1 if ra == rb => {
                let mut out = Vec::with_capacity(ra * (ca + cb));
                for i in 0..ra {
                    out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
                    out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
                }
                ([ra, ca + cb], out)
            }
            0 | 1 => return Err(Error::shape("concat", format!("{ra}x{ca} with {rb}x{cb} on axis {axis}"))),
            _ => return Err(Error::shape("concat", format!("axis {axis} out of range"))),
        };
        self.push("concat", shape, out, Op::Concat(a, b, axis), &[a, b])
    }

    /// Contiguous block `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        let av = self.value(a);
        let (shape, out) = match axis {
            0 if start + len <= r => ([len, c], av[start * c..(start + len) * c].to_vec()),
            1 if start + len <= c => {
                let mut out = Vec::with_capacity(r * len);
                for i in 0..r {
                    out.extend_from_slice(&av[i * c + start..i * c + start + len]);
                }
                ([r, len], out)
            }
            _ => return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {r}x{c}", start + len))),
        };
        self.push("slice", shape, out, Op::Slice(a, axis, start), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        let out = tensor::transpose(self.value(a), r, c);
        self.push("transpose", [c, r], out, Op::Transpose(a), &[a])
    }

    /// Reinterpret the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if r * c != rows * cols {
            return Err(Error::shape("reshape", format!("{r}x{c} to {rows}x{cols}")));
        }
        let out = self.value(a).to_vec();
        self.push("reshape", [rows, cols], out, Op::Reshape(a), &[a])
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", [1, 1], vec![s], Op::Sum(a), &[a])
    }

    /// `[a a ... a]` with `times` copies side by side.
    pub fn repeat_cols(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::shape("repeat_cols", "zero repeats"));
        }
        let [r, c] = self.shape(a);
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * c * times);
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        self.push("repeat_cols", [r, c * times], out, Op::RepeatCols(a, times), &[a])
    }

    /// For `a: d x N`, `b: d x S`, column `i * S + s` of the result is `a[:, i] + b[:, s]`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let [d, n] = self.shape(a);
        let [d2, s] = self.shape(b);
        if d != d2 {
            return Err(Error::shape("pairwise_add", format!("{d}x{n} with {d2}x{s}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(d * n * s);
        for r in 0..d {
            for i in 0..n {
                let x = av[r * n + i];
                out.extend(bv[r * s..(r + 1) * s].iter().map(|y| x + y));
            }
        }
        self.push("pairwise_add", [d, n * s], out, Op::PairwiseAdd(a, b), &[a, b])
    }

    /// Column `s` of the result is row `indices[s]` of `table`.
    pub fn gather_rows_as_columns(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let [v, d] = self.shape(table);
        if let Some(bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Invalid(format!("token index {bad} out of range for vocabulary of {v}")));
        }
        let tv = self.value(table);
        let s = indices.len();
        let mut out = vec![0.0; d * s];
        for (j, &idx) in indices.iter().enumerate() {
            for r in 0..d {
                out[r * s + j] = tv[idx * d + r];
            }
        }
        self.push("gather", [d, s], out, Op::Gather(table, indices.to_vec()), &[table])
    }

    /// Training-mode batch normalization of `x: features x batch` using the
    /// batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let [f, b] = self.shape(x);
        if b < 2 {
            return Err(Error::Config(format!("batch norm in training mode needs batch >= 2, got {b}")));
        }
        if self.shape(gamma) != [f, 1] || self.shape(beta) != [f, 1] {
            return Err(Error::shape("batch_norm", "scale/shift must be features x 1"));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; f * b];
        let mut out = vec![0.0; f * b];
        let mut inv_std = vec![0.0; f];
        let mut stats = BatchStats { mean: vec![0.0; f], var_unbiased: vec![0.0; f] };
        for r in 0..f {
            let row = &xv[r * b..(r + 1) * b];
            let mean = row.iter().sum::<f64>() / b as f64;
            let ss = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            let var = ss / b as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            stats.mean[r] = mean;
            stats.var_unbiased[r] = ss / (b - 1) as f64;
            for j in 0..b {
                let h = (row[j] - mean) * is;
                xhat[r * b + j] = h;
                out[r * b + j] = gv[r] * h + bv[r];
            }
        }
        let v = self.push("batch_norm", [f, b], out, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Mean softmax cross-entropy of `logits: classes x batch`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [c, b] = self.shape(logits);
        check_labels("cross_entropy", labels, c, b)?;
        let mut probs = tensor::transpose(self.value(logits), c, b);
        let mut loss = 0.0;
        for (j, &y) in labels.iter().enumerate() {
            let col = &mut probs[j * c..(j + 1) * c];
            let lse = log_sum_exp(col);
            loss += lse - col[y];
            col.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        loss /= b as f64;
        let op = Op::CrossEntropy { logits, probs, labels: labels.to_vec() };
        self.push("cross_entropy", [1, 1], vec![loss], op, &[logits])
    }

    /// Binary cross-entropy of each class logit against its one-hot target,
    /// summed over classes and averaged over the batch.
    pub fn one_vs_all_bce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [c, b] = self.shape(logits);
        check_labels("bce", labels, c, b)?;
        let lv = self.value(logits);
        let mut probs = vec![0.0; c * b];
        let mut loss = 0.0;
        for k in 0..c {
            for j in 0..b {
                let x = lv[k * b + j];
                let t = if labels[j] == k { 1.0 } else { 0.0 };
                // log(1 + e^x) - t x, stable form
                loss += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
                probs[k * b + j] = sigmoid(x);
            }
        }
        loss /= b as f64;
        let op = Op::OneVsAllBce { logits, probs, labels: labels.to_vec() };
        self.push("bce", [1, 1], vec![loss], op, &[logits])
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients of differentiable leaves
    /// accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1, 1] {
            let [r, c] = self.shape(loss);
            return Err(Error::shape("backward", format!("loss must be scalar, got {r}x{c}")));
        }
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))])
    }

    /// Reverse sweep seeded with explicit output gradients.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Tensor)]) -> Result<()> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(Error::shape("backward", "seed gradient shape differs from node"));
            }
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            accumulate(&mut grads, *v, self.shape(*v)).iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            last = last.max(v.0 + 1);
        }
        for i in (0..last).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].requires_grad && matches!(self.nodes[i].op, Op::Leaf) {
                    match self.leaf_grads.get_mut(&i) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            self.leaf_grads.insert(i, g);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let [r, c] = node.shape;
        let out = self.value(Var(i));
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, k] = self.shape(*a);
                let n = self.shape(*b)[1];
                if rg(a) {
                    let bv = self.value(*b);
                    tensor::matmul_grad_a(g, bv, m, k, n, accumulate(grads, *a, [m, k]));
                }
                if rg(b) {
                    let av = self.value(*a);
                    tensor::matmul_grad_b(av, g, m, k, n, accumulate(grads, *b, [k, n]));
                }
            }
            Op::Binary(kind, a, b, bc) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bidx = |idx: usize| match bc {
                    Bcast::Same => idx,
                    Bcast::Column => idx / c,
                    Bcast::Scalar => 0,
                };
                if rg(a) {
                    let ga = accumulate(grads, *a, [r, c]);
                    match kind {
                        Binary::Add | Binary::Sub => ga.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                        Binary::Mul => (0..r * c).for_each(|idx| ga[idx] += g[idx] * bv[bidx(idx)]),
                    }
                }
                if rg(b) {
                    let sb = self.shape(*b);
                    let gb = accumulate(grads, *b, sb);
                    for idx in 0..r * c {
                        let contrib = match kind {
                            Binary::Add => g[idx],
                            Binary::Sub => -g[idx],
                            Binary::Mul => g[idx] * av[idx],
                        };
                        gb[bidx(idx)] += contrib;
                    }
                }
            }
            Op::Scale(a, f) => {
                if rg(a) {
                    let ga = accumulate(grads, *a, [r, c]);
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
                }
            }
            Op::Elu(a) | Op::Tanh(a) | Op::Sigmoid(a) => {
                if rg(a) {
                    let ga = accumulate(grads, *a, [r, c]);
                    let d: fn(f64) -> f64 = match &node.op {
                        Op::Elu(_) => |y| if y > 0.0 { 1.0 } else { y + 1.0 },
                        Op::Tanh(_) => |y| 1.0 - y * y,
                        _ => |y| y * (1.0 - y),
                    };
                    for ((x, &y), &gi) in ga.iter_mut().zip(out).zip(g) {
                        *x += gi * d(y);
                    }
                }
            }
            Op::Softmax(a, axis) => {
                if rg(a) {
                    let ga = accumulate(grads, *a, [r, c]);
                    for_each_slice(r, c, *axis, |idx| {
                        let s: f64 = idx.clone().map(|k| g[k] * out[k]).sum();
                        for k in idx {
                            ga[k] += out[k] * (g[k] - s);
                        }
                    });
                }
            }
            Op::Concat(a, b, axis) => {
                let [ra, ca] = self.shape(*a);
                let [rb, cb] = self.shape(*b);
                if rg(a) {
                    let ga = accumulate(grads, *a, [ra, ca]);
                    match axis {
                        0 => ga.iter_mut().zip(&g[..ra * ca]).for_each(|(x, y)| *x += y),
                        _ => (0..ra).for_each(|row| {
                            let src = &g[row * c..row * c + ca];
                            ga[row * ca..(row + 1) * ca].iter_mut().zip(src).for_each(|(x, y)| *x += y)
                        }),
                    }
                }
                if rg(b) {
                    let gb = accumulate(grads, *b, [rb, cb]);
                    match axis {
                        0 => gb.iter_mut().zip(&g[ra * ca..]).for_each(|(x, y)| *x += y),
                        _ => (0..rb).for_each(|row| {
                            let src = &g[row * c + ca..(row + 1) * c];
                            gb[row * cb..(row + 1) * cb].iter_mut().zip(src).for_each(|(x, y)| *x += y)
                        }),
                    }
                }
            }
            Op::Slice(a, axis, start) => {
                if rg(a) {
                    let [ra, ca] = self.shape(*a);
                    let ga = accumulate(grads, *a, [ra, ca]);
                    match axis {
                        0 => ga[start * ca..(start + r) * ca].iter_mut().zip(g).for_each(|(x, y)| *x += y),
                        _ => (0..r).for_each(|row| {
                            let dst = &mut ga[row * ca + start..row * ca + start + c];
                            dst.iter_mut().zip(&g[row * c..(row + 1) * c]).for_each(|(x, y)| *x += y)
                        }),
                    }
                }
            }
            Op::Transpose(a) => {
                if rg(a) {
                    let gt = tensor::transpose(g, r, c);
                    let ga = accumulate(grads, *a, [c, r]);
                    ga.iter_mut().zip(&gt).for_each(|(x, y)| *x += y);
                }
            }
            Op::Reshape(a) => {
                if rg(a) {
                    let sa = self.shape(*a);
                    let ga = accumulate(grads, *a, sa);
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sum(a) => {
                if rg(a) {
                    let sa = self.shape(*a);
                    accumulate(grads, *a, sa).iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::RepeatCols(a, times) => {
                if rg(a) {
                    let [ra, ca] = self.shape(*a);
                    let ga = accumulate(grads, *a, [ra, ca]);
                    for row in 0..ra {
                        for t in 0..*times {
                            let src = &g[row * c + t * ca..row * c + (t + 1) * ca];
                            ga[row * ca..(row + 1) * ca].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::PairwiseAdd(a, b) => {
                let [d, n] = self.shape(*a);
                let s = self.shape(*b)[1];
                if rg(a) {
                    let ga = accumulate(grads, *a, [d, n]);
                    for row in 0..d {
                        for i in 0..n {
                            let base = row * c + i * s;
                            ga[row * n + i] += g[base..base + s].iter().sum::<f64>();
                        }
                    }
                }
                if rg(b) {
                    let gb = accumulate(grads, *b, [d, s]);
                    for row in 0..d {
                        for i in 0..n {
                            let base = row * c + i * s;
                            let dst = &mut gb[row * s..(row + 1) * s];
                            dst.iter_mut().zip(&g[base..base + s]).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::Gather(table, indices) => {
                if rg(table) {
                    let [v, d] = self.shape(*table);
                    let gt = accumulate(grads, *table, [v, d]);
                    let s = indices.len();
                    for (j, &idx) in indices.iter().enumerate() {
                        for row in 0..d {
                            gt[idx * d + row] += g[row * s + j];
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = self.value(*gamma);
                let bsz = c as f64;
                if rg(gamma) {
                    let gg = accumulate(grads, *gamma, [r, 1]);
                    for row in 0..r {
                        gg[row] += (0..c).map(|j| g[row * c + j] * xhat[row * c + j]).sum::<f64>();
                    }
                }
                if rg(beta) {
                    let gb = accumulate(grads, *beta, [r, 1]);
                    for row in 0..r {
                        gb[row] += g[row * c..(row + 1) * c].iter().sum::<f64>();
                    }
                }
                if rg(x) {
                    let gx = accumulate(grads, *x, [r, c]);
                    for row in 0..r {
                        let span = row * c..(row + 1) * c;
                        let gh: Vec<f64> = g[span.clone()].iter().map(|v| v * gv[row]).collect();
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_ghx: f64 = gh.iter().zip(&xhat[span.clone()]).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            let h = xhat[row * c + j];
                            gx[row * c + j] += inv_std[row] / bsz * (bsz * gh[j] - sum_gh - h * sum_ghx);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, probs, labels } => {
                if rg(logits) {
                    let [cl, b] = self.shape(*logits);
                    let gl = accumulate(grads, *logits, [cl, b]);
                    let scale = g[0] / b as f64;
                    for j in 0..b {
                        for k in 0..cl {
                            let t = if labels[j] == k { 1.0 } else { 0.0 };
                            gl[k * b + j] += scale * (probs[j * cl + k] - t);
                        }
                    }
                }
            }
            Op::OneVsAllBce { logits, probs, labels } => {
                if rg(logits) {
                    let [cl, b] = self.shape(*logits);
                    let gl = accumulate(grads, *logits, [cl, b]);
                    let scale = g[0] / b as f64;
                    for k in 0..cl {
                        for j in 0..b {
                            let t = if labels[j] == k { 1.0 } else { 0.0 };
                            gl[k * b + j] += scale * (probs[k * b + j] - t);
                        }
                    }
                }
            }
        }
    }

    // ---- gradients ----------------------------------------------------

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads.get(&v.0).map(|g| {
            let [r, c] = self.shape(v);
            Tensor::new(r, c, g.clone()).expect("grad shape")
        })
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Add this tape's parameter gradients into `out`.
    pub fn collect_param_grads(&self, out: &mut Gradients) {
        for (id, v) in &self.param_vars {
            if let Some(g) = self.leaf_grads.get(&v.0) {
                out.accumulate(*id, g);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, shape: [usize; 2]) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; shape[0] * shape[1]])
}

fn check_labels(op: &'static str, labels: &[usize], classes: usize, batch: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape(op, format!("{} labels for batch of {batch}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Invalid(format!("label {bad} out of range for {classes} answers")));
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Visit index ranges of each softmax slice. Rows are contiguous; columns
/// are strided, so they are yielded as step ranges.
fn for_each_slice(r: usize, c: usize, axis: usize, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    if axis == 1 {
        for i in 0..r {
            f((i * c..(i + 1) * c).step_by(1));
        }
    } else {
        for j in 0..c {
            f((j..r * c).step_by(c));
        }
    }
}

fn softmax_slice(buf: &mut [f64], idx: std::iter::StepBy<std::ops::Range<usize>>) {
    let m = idx.clone().map(|k| buf[k]).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for k in idx.clone() {
        buf[k] = (buf[k] - m).exp();
        z += buf[k];
    }
    for k in idx {
        buf[k] /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` with respect to every input entry,
    /// compared with reverse-mode gradients. Returns the worst relative error
    /// over entries whose absolute error exceeds 1e-7.
    fn check<F>(inputs: Vec<Tensor>, h: f64, f: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|t| tape.input(t)).collect();
        let out = f(&mut tape, &vars).unwrap();
        let loss = tape.sum(out).unwrap();
        tape.backward(loss).unwrap();
        let eval = |xs: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().cloned().map(|x| t.constant(x)).collect();
            let o = f(&mut t, &vs).unwrap();
            t.value(o).iter().sum::<f64>()
        };
        let mut worst: f64 = 0.0;
        for (k, v) in vars.iter().enumerate() {
            let analytic = tape.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[k].rows(), inputs[k].cols()));
            for idx in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[idx];
                let err = (a - numeric).abs();
                if err > 1e-7 {
                    worst = worst.max(err / a.abs().max(numeric.abs()));
                }
            }
        }
        worst
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        assert!(check(vec![a, b], 1e-5, |t, v| t.matmul(v[0], v[1])) < 1e-6);
    }

    #[test]
    fn elementwise_definitions() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.0, -1e9, 2.0]));
        let y = t.elu(x).unwrap();
        assert_eq!(t.value(y), &[0.0, -1.0, 2.0]);
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.scalar(s), 0.5);
    }

    #[test]
    fn tanh_gradient_at_point_three() {
        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(0.3));
        let y = t.tanh(x).unwrap();
        t.backward(y).unwrap();
        let want = 1.0 - 0.3f64.tanh().powi(2);
        assert!((t.grad(x).unwrap().data()[0] - want).abs() / want < 1e-12);
        assert!(check(vec![Tensor::scalar(0.3)], 1e-5, |t, v| t.tanh(v[0])) < 1e-6);
    }

    #[test]
    fn every_op_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, 3, 4);
        let y = rand_tensor(&mut rng, 3, 4);
        let col = rand_tensor(&mut rng, 3, 1);
        let sc = rand_tensor(&mut rng, 1, 1);
        let tol = 1e-4;
        let h = 1e-4;
        // weights make the summed output sensitive to every entry
        let w = rand_tensor(&mut rng, 3, 4);
        type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
        let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
            ("add", vec![x.clone(), y.clone()], |t, v| t.add(v[0], v[1])),
            ("sub_col", vec![x.clone(), col.clone()], |t, v| t.sub(v[0], v[1])),
            ("mul_col", vec![x.clone(), col.clone()], |t, v| t.mul(v[0], v[1])),
            ("mul_scalar", vec![x.clone(), sc.clone()], |t, v| t.mul(v[0], v[1])),
            ("elu", vec![x.clone(), w.clone()], |t, v| {
                let e = t.elu(v[0])?;
                t.mul(e, v[1])
            }),
            ("sigmoid", vec![x.clone(), w.clone()], |t, v| {
                let e = t.sigmoid(v[0])?;
                t.mul(e, v[1])
            }),
            ("softmax0", vec![x.clone(), w.clone()], |t, v| {
                let e = t.softmax(v[0], 0)?;
                t.mul(e, v[1])
            }),
            ("softmax1", vec![x.clone(), w.clone()], |t, v| {
                let e = t.softmax(v[0], 1)?;
                t.mul(e, v[1])
            }),
            ("concat0", vec![x.clone(), y.clone()], |t, v| {
                let c = t.concat(v[0], v[1], 0)?;
                t.tanh(c)
            }),
            ("concat1", vec![x.clone(), col.clone()], |t, v| {
                let c = t.concat(v[0], v[1], 1)?;
                t.tanh(c)
            }),
            ("slice", vec![x.clone()], |t, v| {
                let a = t.slice(v[0], 1, 1, 2)?;
                let b = t.slice(v[0], 0, 1, 2)?;
                let a = t.tanh(a)?;
                let b = t.sigmoid(b)?;
                let sa = t.sum(a)?;
                let sb = t.sum(b)?;
                t.mul(sa, sb)
            }),
            ("transpose_reshape", vec![x.clone(), y.clone()], |t, v| {
                let a = t.transpose(v[0])?;
                let a = t.reshape(a, 3, 4)?;
                let a = t.tanh(a)?;
                t.mul(a, v[1])
            }),
            ("repeat_cols", vec![col.clone(), x.clone()], |t, v| {
                let r = t.repeat_cols(v[0], 4)?;
                let r = t.tanh(r)?;
                t.mul(r, v[1])
            }),
            ("pairwise", vec![x.clone(), rand_tensor(&mut rng, 3, 2)], |t, v| {
                let p = t.pairwise_add(v[0], v[1])?;
                t.tanh(p)
            }),
            ("gather", vec![x.clone()], |t, v| {
                let g = t.gather_rows_as_columns(v[0], &[2, 0, 2])?;
                t.tanh(g)
            }),
            ("matmul_chain", vec![x.clone(), rand_tensor(&mut rng, 4, 2)], |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let m = t.elu(m)?;
                let tr = t.transpose(m)?;
                t.matmul(tr, m)
            }),
        ];
        for (name, inputs, f) in cases {
            let err = check(inputs, h, f);
            assert!(err < tol, "{name}: rel err {err}");
        }
    }

    #[test]
    fn batch_norm_and_losses_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 3, 5);
        let gamma = rand_tensor(&mut rng, 3, 1);
        let beta = rand_tensor(&mut rng, 3, 1);
        let w = rand_tensor(&mut rng, 3, 5);
        let err = check(vec![x.clone(), gamma, beta, w], 1e-4, |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            let y = t.tanh(y)?;
            t.mul(y, v[3])
        });
        assert!(err < 1e-4, "batch norm rel err {err}");
        let err = check(vec![x.clone()], 1e-4, |t, v| t.cross_entropy(v[0], &[0, 2, 1, 1, 0]));
        assert!(err < 1e-4, "ce rel err {err}");
        let err = check(vec![x], 1e-4, |t, v| t.one_vs_all_bce(v[0], &[0, 2, 1, 1, 0]));
        assert!(err < 1e-4, "bce rel err {err}");
    }

    #[test]
    fn softmax_examples_and_stability() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
        let sa = t.softmax(a, 1).unwrap();
        assert!(t.value(sa).iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let b = t.constant(Tensor::row(vec![1000.0, 1000.0]));
        let sb = t.softmax(b, 1).unwrap();
        assert_eq!(t.value(sb), &[0.5, 0.5]);
        let c = t.constant(Tensor::row(vec![0.0, 3f64.ln()]));
        let sc = t.softmax(c, 1).unwrap();
        assert!((t.value(sc)[0] - 0.25).abs() < 1e-15 && (t.value(sc)[1] - 0.75).abs() < 1e-15);
        assert!(t.softmax(c, 2).is_err());
    }

    #[test]
    fn concat_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::row(vec![1.0, 2.0]));
        let b = t.constant(Tensor::row(vec![3.0]));
        let c = t.concat(a, b, 1).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0]);
        let v = t.constant(Tensor::zeros(4, 3));
        let w = t.constant(Tensor::zeros(4, 3));
        let x = t.concat(v, w, 0).unwrap();
        assert_eq!(t.shape(x), [8, 3]);
        assert!(t.concat(a, b, 0).is_err());
    }

    #[test]
    fn batch_norm_examples() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::column(vec![2.0, 1.0]));
        let b = t.constant(Tensor::column(vec![0.5, 0.0]));
        let x = t.constant(Tensor::from_rows(&[vec![3.0, 3.0], vec![-1.0, 1.0]]).unwrap());
        let (y, stats) = t.batch_norm_train(x, g, b, 1e-5).unwrap();
        let y = t.value(y);
        // constant feature collapses to the shift
        assert_eq!(&y[..2], &[0.5, 0.5]);
        // unit-variance feature: [-1, 1] / sqrt(1 + eps)
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[2] + want).abs() < 1e-15 && (y[3] - want).abs() < 1e-15);
        assert_eq!(stats.mean, vec![3.0, 0.0]);
        assert_eq!(stats.var_unbiased, vec![0.0, 2.0]);

        let one = t.constant(Tensor::column(vec![1.0, 2.0]));
        assert!(matches!(t.batch_norm_train(one, g, b, 1e-5), Err(Error::Config(_))));
    }

    #[test]
    fn quadratic_backward_and_accumulation() {
        let mut t = Tape::new();
        let w = t.input(Tensor::row(vec![1.0, 2.0]));
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[2.0, 4.0]);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[4.0, 8.0]);
        t.zero_grad();
        assert!(t.grad(w).is_none());
        assert!(t.backward(sq).is_err());
    }

    #[test]
    fn detached_tensor_gets_no_gradient() {
        let mut t = Tape::new();
        let w = t.input(Tensor::row(vec![1.0, 2.0]));
        let d = t.detach(w);
        let p = t.mul(w, d).unwrap();
        let loss = t.sum(p).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(d).is_none());
        assert_eq!(t.grad(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn sum_of_losses_backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_tensor(&mut rng, 3, 3);
        let build = |t: &mut Tape, x: Var| -> (Var, Var) {
            let a = t.tanh(x).unwrap();
            let a = t.sum(a).unwrap();
            let b = t.softmax(x, 0).unwrap();
            let b = t.mul(b, x).unwrap();
            let b = t.sum(b).unwrap();
            (a, b)
        };
        let mut t = Tape::new();
        let x = t.input(x0.clone());
        let (a, b) = build(&mut t, x);
        let s = t.add(a, b).unwrap();
        t.backward(s).unwrap();
        let joint = t.grad(x).unwrap();

        let mut t = Tape::new();
        let x = t.input(x0);
        let (a, b) = build(&mut t, x);
        t.backward(a).unwrap();
        t.backward(b).unwrap();
        assert!(t.grad(x).unwrap().max_abs_diff(&joint) < 1e-14);
    }

    #[test]
    fn broadcast_rules_are_strict() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(3, 4));
        let row = t.constant(Tensor::zeros(1, 4));
        assert!(matches!(t.add(a, row), Err(Error::Shape { .. })));
        let bad = t.constant(Tensor::zeros(2, 1));
        assert!(t.mul(a, bad).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(t.scale(a, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let mut t = Tape::new();
        let table = t.constant(Tensor::zeros(3, 2));
        assert!(t.gather_rows_as_columns(table, &[0, 3]).is_err());
        let same = t.gather_rows_as_columns(table, &[1, 1]).unwrap();
        assert_eq!(t.shape(same), [2, 2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one_and_is_shift_invariant(
                vals in proptest::collection::vec(-50.0f64..50.0, 6),
                shift in -100.0f64..100.0,
            ) {
                let mut t = Tape::new();
                let x = t.constant(Tensor::new(2, 3, vals.clone()).unwrap());
                let xs = t.constant(Tensor::new(2, 3, vals.iter().map(|v| v + shift).collect()).unwrap());
                let a = t.softmax(x, 1).unwrap();
                let b = t.softmax(xs, 1).unwrap();
                for row in t.value(a).chunks(3) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
                for (p, q) in t.value(a).iter().zip(t.value(b)) {
                    prop_assert!((p - q).abs() <= 1e-12);
                }
            }
        }
    }
}
