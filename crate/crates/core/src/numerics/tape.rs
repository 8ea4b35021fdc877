//! Reverse-mode differentiation over a recorded program.
//!
//! A [`Tape`] is built eagerly: every primitive computes its value when it is
//! recorded. The recorded program can later be replayed on new inputs (or with
//! an intermediate node overridden), and gradients of any scalar node can be
//! taken with respect to any set of recorded nodes, including intermediate
//! activations.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, dot, gelu, gelu_grad, log_sum_exp, softmax_into};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input(String),
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[n, d] + [d]`, bias broadcast over rows.
    AddRow(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    },
    /// Rows of `table` at `indices`.
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    ConcatCols(Var, Var),
    /// Flat elements of `x` at `indices`, as a vector.
    Pick {
        x: Var,
        indices: Vec<usize>,
    },
    SumAll(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    /// Copy of `x` with selected flat elements replaced by constants.
    Override {
        x: Var,
        indices: Vec<usize>,
        values: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CausalAttention { .. } => "causal_attention",
            Op::Gather { .. } => "gather",
            Op::ConcatCols(..) => "concat_cols",
            Op::Pick { .. } => "pick",
            Op::SumAll(_) => "sum_all",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Override { .. } => "override",
        }
    }

    fn operands(&self) -> Vec<Var> {
        match self {
            Op::Input(_) | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Gelu(a) | Op::SumAll(a) | Op::SoftmaxRows(a) => {
                vec![*a]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Gather { table, .. } => vec![*table],
            Op::Pick { x, .. } | Op::Override { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Values of every node of a tape, from the recording run or a replay.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Arc<Tensor>>,
    watched: BTreeMap<String, Var>,
}

impl Evaluation {
    pub fn get(&self, var: Var) -> &Tensor {
        &self.values[var.0]
    }

    /// Watched nodes by name.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        self.watched
            .iter()
            .map(|(k, v)| (k.clone(), (*self.values[v.0]).clone()))
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Arc<Tensor>>,
    watched: BTreeMap<String, Var>,
}

fn shape_err(op: &'static str, node: usize, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        node,
        detail: detail.into(),
    }
}

fn same_shape(op: &'static str, node: usize, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            node,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn dims2(op: &'static str, node: usize, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .map_err(|_| shape_err(op, node, format!("expected a matrix, got {:?}", t.shape())))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

/// Per-row normalisation statistics for layer norm: `(mean, 1/std)`.
fn layer_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mut mean = 0.0;
    for &x in row {
        mean += x;
    }
    mean /= d;
    let mut var = 0.0;
    for &x in row {
        var += (x - mean) * (x - mean);
    }
    var /= d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Causal softmax attention probabilities for one head: `[t, t]`, zero above the diagonal.
fn attention_probs(q: &Tensor, k: &Tensor, head: usize, dh: usize) -> Vec<f64> {
    let (t, d) = (q.shape()[0], q.shape()[1]);
    let scale = 1.0 / (dh as f64).sqrt();
    let off = head * dh;
    let mut p = vec![0.0; t * t];
    let mut scores = vec![0.0; t];
    for i in 0..t {
        let qi = &q.data()[i * d + off..i * d + off + dh];
        for j in 0..=i {
            let kj = &k.data()[j * d + off..j * d + off + dh];
            scores[j] = dot(qi, kj) * scale;
        }
        softmax_into(&scores[..=i], &mut p[i * t..i * t + i + 1]);
    }
    p
}

fn compute(op: &Op, node: usize, vals: &[Arc<Tensor>]) -> Result<Tensor> {
    let v = |x: &Var| -> &Tensor { &vals[x.0] };
    let name = op.name();
    Ok(match op {
        Op::Input(_) | Op::Constant => unreachable!("leaves are not computed"),
        Op::Add(a, b) => {
            same_shape(name, node, v(a), v(b))?;
            zip_map(v(a), v(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape(name, node, v(a), v(b))?;
            zip_map(v(a), v(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape(name, node, v(a), v(b))?;
            zip_map(v(a), v(b), |x, y| x * y)
        }
        Op::Scale(a, c) => map(v(a), |x| x * c),
        Op::AddRow(a, b) => {
            let (n, d) = dims2(name, node, v(a))?;
            if v(b).shape() != [d] {
                return Err(shape_err(
                    name,
                    node,
                    format!("bias {:?} vs rows of width {d}", v(b).shape()),
                ));
            }
            let bias = v(b).data();
            let mut out = v(a).data().to_vec();
            for i in 0..n {
                for (o, &bb) in out[i * d..(i + 1) * d].iter_mut().zip(bias) {
                    *o += bb;
                }
            }
            Tensor::new(vec![n, d], out)?
        }
        Op::MatMul(a, b) => {
            let (n, k) = dims2(name, node, v(a))?;
            let (k2, m) = dims2(name, node, v(b))?;
            if k != k2 {
                return Err(shape_err(
                    name,
                    node,
                    format!("{:?} x {:?}", v(a).shape(), v(b).shape()),
                ));
            }
            Tensor::new(vec![n, m], kernels::matmul(v(a).data(), v(b).data(), n, k, m))?
        }
        Op::Relu(a) => map(v(a), |x| if x > 0.0 { x } else { 0.0 }),
        Op::Gelu(a) => map(v(a), gelu),
        Op::LayerNorm { x, gain, bias, eps } => {
            let (n, d) = dims2(name, node, v(x))?;
            if v(gain).shape() != [d] || v(bias).shape() != [d] {
                return Err(shape_err(name, node, "gain/bias width mismatch"));
            }
            let (g, b) = (v(gain).data(), v(bias).data());
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                let row = v(x).row(i);
                let (mean, rstd) = layer_norm_stats(row, *eps);
                for j in 0..d {
                    out[i * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
                }
            }
            Tensor::new(vec![n, d], out)?
        }
        Op::CausalAttention { q, k, v: vv, heads } => {
            let (t, d) = dims2(name, node, v(q))?;
            if v(k).shape() != [t, d] || v(vv).shape() != [t, d] {
                return Err(shape_err(name, node, "q/k/v shapes differ"));
            }
            if *heads == 0 || d % heads != 0 {
                return Err(shape_err(name, node, format!("{d} not divisible by {heads} heads")));
            }
            let dh = d / heads;
            let vd = v(vv).data();
            let mut out = vec![0.0; t * d];
            for h in 0..*heads {
                let p = attention_probs(v(q), v(k), h, dh);
                for i in 0..t {
                    let oi = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                    for j in 0..=i {
                        let pij = p[i * t + j];
                        kernels::axpy(pij, &vd[j * d + h * dh..j * d + (h + 1) * dh], oi);
                    }
                }
            }
            Tensor::new(vec![t, d], out)?
        }
        Op::Gather { table, indices } => {
            let (rows, d) = dims2(name, node, v(table))?;
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                if i >= rows {
                    return Err(shape_err(name, node, format!("row {i} of {rows}")));
                }
                out.extend_from_slice(v(table).row(i));
            }
            Tensor::new(vec![indices.len(), d], out)?
        }
        Op::ConcatCols(a, b) => {
            let (n, da) = dims2(name, node, v(a))?;
            let (n2, db) = dims2(name, node, v(b))?;
            if n != n2 {
                return Err(shape_err(name, node, format!("{n} vs {n2} rows")));
            }
            let mut out = Vec::with_capacity(n * (da + db));
            for i in 0..n {
                out.extend_from_slice(v(a).row(i));
                out.extend_from_slice(v(b).row(i));
            }
            Tensor::new(vec![n, da + db], out)?
        }
        Op::Pick { x, indices } => {
            let data = v(x).data();
            let mut out = Vec::with_capacity(indices.len());
            for &i in indices {
                out.push(
                    *data
                        .get(i)
                        .ok_or_else(|| shape_err(name, node, format!("index {i} of {}", data.len())))?,
                );
            }
            Tensor::vector(out)
        }
        Op::SumAll(a) => {
            let mut s = 0.0;
            for &x in v(a).data() {
                s += x;
            }
            Tensor::scalar(s)
        }
        Op::SoftmaxRows(a) => {
            let (n, d) = dims2(name, node, v(a))?;
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                softmax_into(v(a).row(i), &mut out[i * d..(i + 1) * d]);
            }
            Tensor::new(vec![n, d], out)?
        }
        Op::CrossEntropy { logits, targets } => {
            let (n, c) = dims2(name, node, v(logits))?;
            if targets.len() != n || targets.iter().any(|&t| t >= c) {
                return Err(shape_err(name, node, "targets do not match logits"));
            }
            let mut total = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                let row = v(logits).row(i);
                total += log_sum_exp(row) - row[t];
            }
            Tensor::scalar(total / n as f64)
        }
        Op::Override { x, indices, values } => {
            let mut out = (*vals[x.0]).clone();
            let n = out.numel();
            for (&i, &val) in indices.iter().zip(values) {
                if i >= n {
                    return Err(shape_err(name, node, format!("index {i} of {n}")));
                }
                out.data_mut()[i] = val;
            }
            out.with_dtype(super::tensor::DType::F64)
        }
    })
}

fn accumulate(adj: &mut [Option<Vec<f64>>], var: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = adj[var.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push_leaf(&mut self, op: Op, value: Arc<Tensor>) -> Var {
        self.ops.push(op);
        self.values.push(value);
        Var(self.ops.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let node = self.ops.len();
        let value = compute(&op, node, &self.values)?;
        self.ops.push(op);
        self.values.push(Arc::new(value));
        Ok(Var(node))
    }

    /// Named input; replaced by name in [`Tape::evaluate`].
    pub fn input(&mut self, name: &str, value: Tensor) -> Var {
        self.push_leaf(Op::Input(name.to_string()), Arc::new(value))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Op::Constant, Arc::new(value))
    }

    /// Constant sharing storage with the caller (model parameters).
    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_leaf(Op::Constant, value)
    }

    /// Registers `var` under `name` so evaluations report it.
    pub fn watch(&mut self, name: &str, var: Var) {
        self.watched.insert(name.to_string(), var);
    }

    pub fn watched(&self) -> &BTreeMap<String, Var> {
        &self.watched
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.values[var.0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRow(a, bias))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `x * w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.push(Op::CausalAttention { q, k, v, heads })
    }

    pub fn gather(&mut self, table: Var, indices: Vec<usize>) -> Result<Var> {
        self.push(Op::Gather { table, indices })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::ConcatCols(a, b))
    }

    pub fn pick(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        self.push(Op::Pick { x, indices })
    }

    /// Scalar node holding one flat element of `x`.
    pub fn element(&mut self, x: Var, index: usize) -> Result<Var> {
        let picked = self.pick(x, vec![index])?;
        self.sum_all(picked)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumAll(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(a))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.push(Op::CrossEntropy { logits, targets })
    }

    pub fn override_elements(&mut self, x: Var, indices: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if indices.len() != values.len() {
            return Err(Error::invalid("override indices and values differ in length"));
        }
        self.push(Op::Override { x, indices, values })
    }

    /// Values from the recording run.
    pub fn recorded(&self) -> Evaluation {
        Evaluation {
            values: self.values.clone(),
            watched: self.watched.clone(),
        }
    }

    /// Replays the program on new named inputs.
    pub fn evaluate(&self, inputs: &BTreeMap<String, Tensor>) -> Result<Evaluation> {
        self.evaluate_with_overrides(inputs, &[])
    }

    /// Replays the program with inputs substituted by name and the listed
    /// nodes pinned to the given values.
    pub fn evaluate_with_overrides(
        &self,
        inputs: &BTreeMap<String, Tensor>,
        overrides: &[(Var, Tensor)],
    ) -> Result<Evaluation> {
        let mut values: Vec<Arc<Tensor>> = Vec::with_capacity(self.ops.len());
        for (node, op) in self.ops.iter().enumerate() {
            if let Some((_, t)) = overrides.iter().find(|(v, _)| v.0 == node) {
                if t.shape() != self.values[node].shape() {
                    return Err(shape_err(op.name(), node, "override shape differs from recorded"));
                }
                values.push(Arc::new(t.clone()));
                continue;
            }
            let value = match op {
                Op::Input(name) => {
                    let t = inputs
                        .get(name)
                        .ok_or_else(|| Error::MissingInput(name.clone()))?;
                    if t.shape() != self.values[node].shape() {
                        return Err(shape_err(
                            "input",
                            node,
                            format!(
                                "`{name}` declared {:?}, got {:?}",
                                self.values[node].shape(),
                                t.shape()
                            ),
                        ));
                    }
                    Arc::new(t.clone())
                }
                Op::Constant => self.values[node].clone(),
                _ => Arc::new(compute(op, node, &values)?),
            };
            values.push(value);
        }
        Ok(Evaluation {
            values,
            watched: self.watched.clone(),
        })
    }

    /// Recomputes nodes after `from` with `from` pinned to `value`, reusing
    /// recorded values for everything earlier.
    fn replay_from(&self, base: &Evaluation, from: Var, value: Tensor) -> Result<Evaluation> {
        let mut values = base.values[..from.0].to_vec();
        values.push(Arc::new(value));
        for node in from.0 + 1..self.ops.len() {
            let op = &self.ops[node];
            let v = match op {
                Op::Input(_) | Op::Constant => base.values[node].clone(),
                _ => Arc::new(compute(op, node, &values)?),
            };
            values.push(v);
        }
        Ok(Evaluation {
            values,
            watched: self.watched.clone(),
        })
    }

    /// Gradient of scalar `output` with respect to each node in `wrt`, at the
    /// recorded values.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        self.gradient_at(&self.recorded(), output, wrt)
    }

    /// Gradient at the values of a replay.
    pub fn gradient_at(&self, eval: &Evaluation, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let vals = &eval.values;
        let out_val = &vals[output.0];
        if out_val.numel() != 1 {
            return Err(Error::NonScalarOutput(out_val.shape().to_vec()));
        }
        let n = output.0 + 1;
        // Nodes that depend on some requested node; only these need adjoints.
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for node in 0..n {
            if !relevant[node] && self.ops[node].operands().iter().any(|o| relevant[o.0]) {
                relevant[node] = true;
            }
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        if relevant[output.0] {
            adj[output.0] = Some(vec![1.0]);
        }
        for node in (0..n).rev() {
            let Some(g) = adj[node].take() else { continue };
            let is_wrt = wrt.iter().any(|w| w.0 == node);
            self.backward_op(node, &g, vals, &mut adj, &relevant)?;
            if is_wrt {
                adj[node] = Some(g);
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                let shape = vals[w.0].shape().to_vec();
                match (w.0 < n).then(|| adj[w.0].clone()).flatten() {
                    Some(g) => Tensor::new(shape, g).expect("adjoint shape"),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn backward_op(
        &self,
        node: usize,
        g: &[f64],
        vals: &[Arc<Tensor>],
        adj: &mut [Option<Vec<f64>>],
        relevant: &[bool],
    ) -> Result<()> {
        let v = |x: &Var| -> &Tensor { &vals[x.0] };
        let want = |x: &Var| relevant[x.0];
        match &self.ops[node] {
            Op::Input(_) | Op::Constant => {}
            Op::Add(a, b) => {
                for x in [a, b] {
                    if want(x) {
                        accumulate(adj, *x, g.len(), |s| kernels::axpy(1.0, g, s));
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    accumulate(adj, *a, g.len(), |s| kernels::axpy(1.0, g, s));
                }
                if want(b) {
                    accumulate(adj, *b, g.len(), |s| kernels::axpy(-1.0, g, s));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    let other = v(b).data();
                    accumulate(adj, *a, g.len(), |s| {
                        for ((s, &g), &o) in s.iter_mut().zip(g).zip(other) {
                            *s += g * o;
                        }
                    });
                }
                if want(b) {
                    let other = v(a).data();
                    accumulate(adj, *b, g.len(), |s| {
                        for ((s, &g), &o) in s.iter_mut().zip(g).zip(other) {
                            *s += g * o;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if want(a) {
                    accumulate(adj, *a, g.len(), |s| kernels::axpy(*c, g, s));
                }
            }
            Op::AddRow(a, b) => {
                if want(a) {
                    accumulate(adj, *a, g.len(), |s| kernels::axpy(1.0, g, s));
                }
                if want(b) {
                    let d = v(b).numel();
                    accumulate(adj, *b, d, |s| {
                        for row in g.chunks(d) {
                            kernels::axpy(1.0, row, s);
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = v(a).dims2()?;
                let m = v(b).shape()[1];
                if want(a) {
                    let da = kernels::matmul_nt(g, v(b).data(), n, m, k);
                    accumulate(adj, *a, n * k, |s| kernels::axpy(1.0, &da, s));
                }
                if want(b) {
                    let db = kernels::matmul_tn(v(a).data(), g, n, k, m);
                    accumulate(adj, *b, k * m, |s| kernels::axpy(1.0, &db, s));
                }
            }
            Op::Relu(a) => {
                if want(a) {
                    let x = v(a).data();
                    accumulate(adj, *a, g.len(), |s| {
                        for ((s, &g), &x) in s.iter_mut().zip(g).zip(x) {
                            if x > 0.0 {
                                *s += g;
                            }
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if want(a) {
                    let x = v(a).data();
                    accumulate(adj, *a, g.len(), |s| {
                        for ((s, &g), &x) in s.iter_mut().zip(g).zip(x) {
                            *s += g * gelu_grad(x);
                        }
                    });
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (n, d) = v(x).dims2()?;
                let gw = v(gain).data();
                let mut dx = vec![0.0; n * d];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for i in 0..n {
                    let row = v(x).row(i);
                    let (mean, rstd) = layer_norm_stats(row, *eps);
                    let gi = &g[i * d..(i + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = gi[j] * gw[j];
                        dg[j] += gi[j] * xhat[j];
                        db[j] += gi[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[i * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if want(x) {
                    accumulate(adj, *x, n * d, |s| kernels::axpy(1.0, &dx, s));
                }
                if want(gain) {
                    accumulate(adj, *gain, d, |s| kernels::axpy(1.0, &dg, s));
                }
                if want(bias) {
                    accumulate(adj, *bias, d, |s| kernels::axpy(1.0, &db, s));
                }
            }
            Op::CausalAttention { q, k, v: vv, heads } => {
                let (t, d) = v(q).dims2()?;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (v(q).data(), v(k).data(), v(vv).data());
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut dp = vec![0.0; t];
                for h in 0..*heads {
                    let p = attention_probs(v(q), v(k), h, dh);
                    let off = h * dh;
                    for i in 0..t {
                        let gi = &g[i * d + off..i * d + off + dh];
                        let mut inner = 0.0;
                        for j in 0..=i {
                            let pij = p[i * t + j];
                            dp[j] = dot(gi, &vd[j * d + off..j * d + off + dh]);
                            inner += pij * dp[j];
                            kernels::axpy(pij, gi, &mut dv[j * d + off..j * d + off + dh]);
                        }
                        for j in 0..=i {
                            let ds = p[i * t + j] * (dp[j] - inner) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kd[j * d + off..j * d + off + dh];
                            kernels::axpy(ds, kj, &mut dq[i * d + off..i * d + off + dh]);
                            let qi = &qd[i * d + off..i * d + off + dh];
                            kernels::axpy(ds, qi, &mut dk[j * d + off..j * d + off + dh]);
                        }
                    }
                }
                for (var, grad) in [(q, dq), (k, dk), (vv, dv)] {
                    if want(var) {
                        accumulate(adj, *var, t * d, |s| kernels::axpy(1.0, &grad, s));
                    }
                }
            }
            Op::Gather { table, indices } => {
                if want(table) {
                    let (rows, d) = v(table).dims2()?;
                    accumulate(adj, *table, rows * d, |s| {
                        for (r, &i) in indices.iter().enumerate() {
                            kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut s[i * d..(i + 1) * d]);
                        }
                    });
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, da) = v(a).dims2()?;
                let db = v(b).shape()[1];
                if want(a) {
                    accumulate(adj, *a, n * da, |s| {
                        for i in 0..n {
                            kernels::axpy(
                                1.0,
                                &g[i * (da + db)..i * (da + db) + da],
                                &mut s[i * da..(i + 1) * da],
                            );
                        }
                    });
                }
                if want(b) {
                    accumulate(adj, *b, n * db, |s| {
                        for i in 0..n {
                            kernels::axpy(
                                1.0,
                                &g[i * (da + db) + da..(i + 1) * (da + db)],
                                &mut s[i * db..(i + 1) * db],
                            );
                        }
                    });
                }
            }
            Op::Pick { x, indices } => {
                if want(x) {
                    let len = v(x).numel();
                    accumulate(adj, *x, len, |s| {
                        for (&i, &gi) in indices.iter().zip(g) {
                            s[i] += gi;
                        }
                    });
                }
            }
            Op::SumAll(a) => {
                if want(a) {
                    let len = v(a).numel();
                    accumulate(adj, *a, len, |s| {
                        for s in s.iter_mut() {
                            *s += g[0];
                        }
                    });
                }
            }
            Op::SoftmaxRows(a) => {
                if want(a) {
                    let y = &vals[node];
                    let (n, d) = y.dims2()?;
                    accumulate(adj, *a, n * d, |s| {
                        for i in 0..n {
                            let yi = y.row(i);
                            let gi = &g[i * d..(i + 1) * d];
                            let inner = dot(yi, gi);
                            for j in 0..d {
                                s[i * d + j] += yi[j] * (gi[j] - inner);
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if want(logits) {
                    let (n, c) = v(logits).dims2()?;
                    let scale = g[0] / n as f64;
                    let mut p = vec![0.0; c];
                    accumulate(adj, *logits, n * c, |s| {
                        for (i, &t) in targets.iter().enumerate() {
                            softmax_into(v(logits).row(i), &mut p);
                            p[t] -= 1.0;
                            kernels::axpy(scale, &p, &mut s[i * c..(i + 1) * c]);
                        }
                    });
                }
            }
            Op::Override { x, indices, .. } => {
                if want(x) {
                    let mut pass = g.to_vec();
                    for &i in indices {
                        pass[i] = 0.0;
                    }
                    accumulate(adj, *x, g.len(), |s| kernels::axpy(1.0, &pass, s));
                }
            }
        }
        Ok(())
    }

    /// Central-difference estimate of `d output / d wrt`, element by element.
    pub fn finite_difference_gradient(&self, output: Var, wrt: Var, step: f64) -> Result<Tensor> {
        if !(step > 0.0) {
            return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
        }
        let base = self.recorded();
        if base.values[output.0].numel() != 1 {
            return Err(Error::NonScalarOutput(base.values[output.0].shape().to_vec()));
        }
        let x = (*base.values[wrt.0]).clone();
        if output.0 < wrt.0 {
            return Ok(Tensor::zeros(x.shape()));
        }
        let mut grad = vec![0.0; x.numel()];
        for (i, g) in grad.iter_mut().enumerate() {
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            let fp = self.replay_from(&base, wrt, plus)?.get(output).item()?;
            let fm = self.replay_from(&base, wrt, minus)?.get(output).item()?;
            *g = (fp - fm) / (2.0 * step);
        }
        Tensor::new(x.shape().to_vec(), grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_linear_tapes_evaluate() {
        let mut tape = Tape::new();
        let x = tape.input("x", Tensor::vector(vec![1.0, 2.0]));
        tape.watch("x", x);
        let y = tape.scale(x, 2.0).unwrap();
        tape.watch("y", y);
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), Tensor::vector(vec![1.0, 2.0]));
        let out = tape.evaluate(&inputs).unwrap().named();
        assert_eq!(out["x"].data(), &[1.0, 2.0]);
        assert_eq!(out["y"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn evaluate_rejects_shape_mismatch_naming_the_op() {
        let mut tape = Tape::new();
        let x = tape.input("x", Tensor::vector(vec![1.0, 2.0]));
        let w = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        tape.add(x, w).unwrap();
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = tape.evaluate(&inputs).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "input", .. }), "{err}");
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let err = tape.add(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "add", .. }));
    }

    #[test]
    fn missing_input_is_rejected() {
        let mut tape = Tape::new();
        tape.input("x", Tensor::scalar(1.0));
        assert!(matches!(tape.evaluate(&BTreeMap::new()), Err(Error::MissingInput(_))));
    }

    #[test]
    fn scalar_derivatives() {
        // y = 3a
        let mut tape = Tape::new();
        let a = tape.input("a", Tensor::scalar(0.7));
        let y = tape.scale(a, 3.0).unwrap();
        assert_eq!(tape.gradient(y, &[a]).unwrap()[0].item().unwrap(), 3.0);
        let fd = tape.finite_difference_gradient(y, a, 1e-5).unwrap().item().unwrap();
        assert!((fd - 3.0).abs() < 1e-9);

        // y = a^2 at a = 1
        let mut tape = Tape::new();
        let a = tape.input("a", Tensor::scalar(1.0));
        let y = tape.mul(a, a).unwrap();
        assert_eq!(tape.gradient(y, &[a]).unwrap()[0].item().unwrap(), 2.0);
        let fd = tape.finite_difference_gradient(y, a, 1e-5).unwrap().item().unwrap();
        assert!((fd - 2.0).abs() < 1e-8);
    }

    #[test]
    fn non_scalar_gradient_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.input("a", Tensor::vector(vec![1.0, 2.0]));
        let y = tape.scale(a, 2.0).unwrap();
        assert!(matches!(tape.gradient(y, &[a]), Err(Error::NonScalarOutput(_))));
        assert!(tape.finite_difference_gradient(y, a, 0.0).is_err());
    }

    #[test]
    fn unreachable_node_gets_exact_zero() {
        let mut tape = Tape::new();
        let a = tape.input("a", Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.input("b", Tensor::vector(vec![3.0, 4.0]));
        let s = tape.sum_all(a).unwrap();
        let later = tape.scale(a, 5.0).unwrap();
        let g = tape.gradient(s, &[unused, later]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
        assert_eq!(g[1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn override_blocks_gradient_of_replaced_entries() {
        let mut tape = Tape::new();
        let a = tape.input("a", Tensor::vector(vec![1.0, 2.0, 3.0]));
        let o = tape.override_elements(a, vec![1], vec![10.0]).unwrap();
        assert_eq!(tape.value(o).data(), &[1.0, 10.0, 3.0]);
        let sq = tape.mul(o, o).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let g = tape.gradient(s, &[a, o]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 0.0, 6.0]);
        assert_eq!(g[1].data(), &[2.0, 20.0, 6.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.input("x", Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
        let w = tape.constant(Tensor::matrix(3, 2, vec![1.0, 0.5, -0.3, 0.2, 0.7, -1.1]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        let z = tape.gelu(y).unwrap();
        let mut inputs = BTreeMap::new();
        inputs.insert("x".into(), tape.value(x).clone());
        let a = tape.evaluate(&inputs).unwrap();
        let b = tape.evaluate(&inputs).unwrap();
        assert_eq!(a.get(z), b.get(z));
        assert_eq!(a.get(z), tape.value(z));
    }
}
