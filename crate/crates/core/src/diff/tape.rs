use super::kernels;
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LogSumExp { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    L2Normalize { x: Var, axis: usize, norms: Vec<f64> },
    ExpandRows { x: Var },
    ExpandCols { x: Var },
    Pick { x: Var, idx: Vec<Option<usize>> },
    Reshape(Var),
    Pairwise { ms: [Var; 4], kind: kernels::PairKernel },
    PairwiseJs { ms: [Var; 4], draws: kernels::JsDraws },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Clamp { .. } => "clamp",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::ExpandRows { .. } => "expand_rows",
            Op::ExpandCols { .. } => "expand_cols",
            Op::Pick { .. } => "pick",
            Op::Reshape(..) => "reshape",
            Op::Pairwise { .. } => "pairwise",
            Op::PairwiseJs { .. } => "pairwise_js",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order; the
/// backward pass walks them in strict reverse. A tape supports one backward
/// pass; call [`Tape::reset`] before reusing it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients from one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `None` when the node was not reached from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zero-filled when unreached.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
}

/// Adds `src` into the optional accumulator slot.
fn accumulate(slot: &mut Option<Tensor>, src: Tensor) {
    match slot {
        Some(acc) => {
            for (a, s) in acc.data_mut().iter_mut().zip(src.data()) {
                *a += s;
            }
        }
        None => *slot = Some(src),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears all nodes so the tape can record a new step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable input (parameter or anything we want a gradient for).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "op `{}` produced a non-finite value at node {id}",
                op.name()
            )));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(id))
    }

    fn binary_shapes(&self, a: Var, b: Var, name: &str) -> Result<Vec<usize>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if same_shape(ta, tb) {
            return Ok(ta.shape().to_vec());
        }
        if tb.is_scalar() {
            return Ok(ta.shape().to_vec());
        }
        if ta.is_scalar() {
            return Ok(tb.shape().to_vec());
        }
        Err(Error::Contract(format!(
            "{name}: shapes {:?} and {:?} differ (only scalar broadcasting is supported)",
            ta.shape(),
            tb.shape()
        )))
    }

    fn zip_with(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let shape = self.binary_shapes(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n: usize = shape.iter().product();
        let data = match (ta.len() == n, tb.len() == n) {
            (true, true) => ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            (true, false) => ta.data().iter().map(|&x| f(x, tb.data()[0])).collect(),
            (false, true) => tb.data().iter().map(|&y| f(ta.data()[0], y)).collect(),
            (false, false) => vec![f(ta.data()[0], tb.data()[0])],
        };
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "div", |x, y| x / y)?;
        self.push(t, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        contract!(k == k2, "matmul: inner dimensions {k} and {k2} differ");
        let data = kernels::matmul(self.value(a).data(), m, k, self.value(b).data(), n);
        self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), &[a, b])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Log(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::sqrt);
        self.push(t, Op::Sqrt(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        contract!(lo <= hi, "clamp bounds [{lo}, {hi}] are inverted");
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(t, Op::Clamp { x: a, lo, hi }, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (o, n, i) = x.axis_split(axis)?;
        let t = Tensor::from_parts(x.shape().to_vec(), kernels::softmax(x.data(), o, n, i));
        self.push(t, Op::Softmax { x: a, axis }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (o, n, i) = x.axis_split(axis)?;
        let t = Tensor::from_parts(x.shape().to_vec(), kernels::log_softmax(x.data(), o, n, i));
        self.push(t, Op::LogSoftmax { x: a, axis }, &[a])
    }

    /// Reduces `axis` with log-sum-exp; the axis is removed from the shape.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (o, n, i) = x.axis_split(axis)?;
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::from_parts(shape, kernels::logsumexp(x.data(), o, n, i));
        self.push(t, Op::LogSumExp { x: a, axis }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        contract!(!x.is_empty(), "mean of an empty tensor");
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (o, n, i) = x.axis_split(axis)?;
        let mut out = vec![0.0; o * i];
        for oo in 0..o {
            for j in 0..n {
                for ii in 0..i {
                    out[oo * i + ii] += x.data()[oo * n * i + j * i + ii];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        self.push(Tensor::from_parts(shape, out), Op::SumAxis { x: a, axis }, &[a])
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (o, n, i) = x.axis_split(axis)?;
        contract!(
            start + len <= n,
            "slice {start}..{} exceeds axis length {n}",
            start + len
        );
        let mut out = Vec::with_capacity(o * len * i);
        for oo in 0..o {
            let base = oo * n * i + start * i;
            out.extend_from_slice(&x.data()[base..base + len * i]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, out), Op::Slice { x: a, axis, start }, &[a])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        contract!(!xs.is_empty(), "concat of zero tensors");
        let first = self.value(xs[0]).shape().to_vec();
        contract!(axis < first.len(), "concat axis {axis} out of range for {:?}", first);
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            contract!(
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b),
                "concat: shape {:?} incompatible with {:?} along axis {axis}",
                s,
                first
            );
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, out), Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    /// Divides each slice along `axis` by its l2 norm.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (o, n, i) = x.axis_split(axis)?;
        let (data, norms) = kernels::l2_normalize(x.data(), o, n, i);
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(t, Op::L2Normalize { x: a, axis, norms }, &[a])
    }

    /// Repeats a length-`m` vector (or `1×m` matrix) into `rows×m`.
    pub fn expand_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let x = self.value(a);
        let m = match x.shape() {
            [m] => *m,
            [1, m] => *m,
            s => return Err(Error::Contract(format!("expand_rows needs a vector or 1×m, got {s:?}"))),
        };
        let mut out = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            out.extend_from_slice(x.data());
        }
        self.push(Tensor::from_parts(vec![rows, m], out), Op::ExpandRows { x: a }, &[a])
    }

    /// Repeats a length-`n` vector (or `n×1` matrix) into `n×cols`.
    pub fn expand_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let x = self.value(a);
        let n = match x.shape() {
            [n] => *n,
            [n, 1] => *n,
            s => return Err(Error::Contract(format!("expand_cols needs a vector or n×1, got {s:?}"))),
        };
        let mut out = Vec::with_capacity(n * cols);
        for &v in x.data() {
            out.extend(std::iter::repeat_n(v, cols));
        }
        self.push(Tensor::from_parts(vec![n, cols], out), Op::ExpandCols { x: a }, &[a])
    }

    /// Selects one column per row; rows with `None` yield 0 and get no gradient.
    pub fn pick(&mut self, a: Var, idx: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        contract!(idx.len() == rows, "pick: {} indices for {} rows", idx.len(), rows);
        let x = self.value(a).data();
        let mut out = vec![0.0; rows];
        for (r, ix) in idx.iter().enumerate() {
            if let Some(c) = *ix {
                contract!(c < cols, "pick: column {c} out of range for {cols} columns");
                out[r] = x[r * cols + c];
            }
        }
        self.push(
            Tensor::vector(out),
            Op::Pick {
                x: a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        contract!(
            shape.iter().product::<usize>() == x.len(),
            "reshape {:?} -> {:?} changes the element count",
            x.shape(),
            shape
        );
        let t = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        self.push(t, Op::Reshape(a), &[a])
    }

    /// `[n, k]` closed-form log-similarities between the Gaussians
    /// `(mean_a, var_a)` (`n × d`) and `(mean_b, var_b)` (`k × d`).
    pub fn pairwise(
        &mut self,
        mean_a: Var,
        var_a: Var,
        mean_b: Var,
        var_b: Var,
        kind: kernels::PairKernel,
    ) -> Result<Var> {
        let (n, d) = self.value(mean_a).dims2()?;
        let (k, db) = self.value(mean_b).dims2()?;
        contract!(
            self.shape(var_a) == [n, d] && self.shape(var_b) == [k, db] && d == db,
            "pairwise: mean/var shapes {:?}/{:?} and {:?}/{:?} disagree",
            self.shape(mean_a),
            self.shape(var_a),
            self.shape(mean_b),
            self.shape(var_b)
        );
        contract!(
            self.value(var_a)
                .data()
                .iter()
                .chain(self.value(var_b).data())
                .all(|v| *v > 0.0),
            "pairwise: variances must be positive"
        );
        if let kernels::PairKernel::Ppk(rho) = kind {
            contract!(rho > 0.0, "pairwise: rho must be positive, got {rho}");
        }
        let out = kernels::pair_scores(
            kind,
            self.value(mean_a).data(),
            self.value(var_a).data(),
            self.value(mean_b).data(),
            self.value(var_b).data(),
            d,
        );
        let ms = [mean_a, var_a, mean_b, var_b];
        self.push(Tensor::from_parts(vec![n, k], out), Op::Pairwise { ms, kind }, &ms)
    }

    /// `[n, k]` negative Monte-Carlo Jensen–Shannon divergences between
    /// anchor Gaussians `(mean_a, var_a)` and `(mean_b, var_b)` under the
    /// fixed reparameterized `draws`.
    pub fn pairwise_js(
        &mut self,
        mean_a: Var,
        var_a: Var,
        mean_b: Var,
        var_b: Var,
        draws: kernels::JsDraws,
    ) -> Result<Var> {
        let (n, d) = self.value(mean_a).dims2()?;
        let (k, db) = self.value(mean_b).dims2()?;
        contract!(
            self.shape(var_a) == [n, d] && self.shape(var_b) == [k, db] && d == db,
            "pairwise_js: mean/var shapes {:?}/{:?} and {:?}/{:?} disagree",
            self.shape(mean_a),
            self.shape(var_a),
            self.shape(mean_b),
            self.shape(var_b)
        );
        contract!(
            self.value(var_a)
                .data()
                .iter()
                .chain(self.value(var_b).data())
                .all(|v| *v > 0.0),
            "pairwise_js: variances must be positive"
        );
        contract!(
            draws.samples >= 1 && draws.eps_x.len() == draws.samples * d && draws.eps_y.len() == draws.samples * d,
            "pairwise_js: need {} × {d} draws per side",
            draws.samples
        );
        let out = kernels::js_scores(
            self.value(mean_a).data(),
            self.value(var_a).data(),
            self.value(mean_b).data(),
            self.value(var_b).data(),
            d,
            &draws,
        );
        let ms = [mean_a, var_a, mean_b, var_b];
        self.push(Tensor::from_parts(vec![n, k], out), Op::PairwiseJs { ms, draws }, &ms)
    }

    /// `x · w + b` with `b` expanded over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let rows = self.shape(xw)[0];
        let bb = self.expand_rows(b, rows)?;
        self.add(xw, bb)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        contract!(
            !self.consumed,
            "backward already ran on this tape; call reset() before recording a new step"
        );
        contract!(loss.0 < self.nodes.len(), "loss node {} is not on this tape", loss.0);
        contract!(
            self.value(loss).len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::from_parts(self.value(loss).shape().to_vec(), vec![1.0]));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.pullback(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.nodes[v.0].needs_grad {
            accumulate(&mut grads[v.0], g);
        }
    }

    /// Reduces a gradient to the operand's shape (sums when the operand was
    /// a broadcast scalar).
    fn fit(&self, v: Var, g: Tensor) -> Tensor {
        let t = self.value(v);
        if t.len() == 1 && g.len() != 1 {
            Tensor::from_parts(t.shape().to_vec(), vec![g.data().iter().sum()])
        } else {
            g
        }
    }

    fn operand_at(&self, v: Var, i: usize) -> f64 {
        let t = self.value(v);
        if t.len() == 1 {
            t.data()[0]
        } else {
            t.data()[i]
        }
    }

    fn pullback(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let y = &node.value;
        let gd = g.data();
        let shaped = |data: Vec<f64>| Tensor::from_parts(y.shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, self.fit(*a, g.clone()));
                self.send(grads, *b, self.fit(*b, g.clone()));
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, self.fit(*a, g.clone()));
                self.send(grads, *b, self.fit(*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                let ga = (0..gd.len()).map(|i| gd[i] * self.operand_at(*b, i)).collect();
                let gb = (0..gd.len()).map(|i| gd[i] * self.operand_at(*a, i)).collect();
                self.send(grads, *a, self.fit(*a, shaped(ga)));
                self.send(grads, *b, self.fit(*b, shaped(gb)));
            }
            Op::Div(a, b) => {
                let ga = (0..gd.len()).map(|i| gd[i] / self.operand_at(*b, i)).collect();
                let gb = (0..gd.len())
                    .map(|i| {
                        let bv = self.operand_at(*b, i);
                        -gd[i] * self.operand_at(*a, i) / (bv * bv)
                    })
                    .collect();
                self.send(grads, *a, self.fit(*a, shaped(ga)));
                self.send(grads, *b, self.fit(*b, shaped(gb)));
            }
            Op::Scale(a, c) => self.send(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.send(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).shape()[1];
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gd, false, self.value(*b).data(), true, &mut ga);
                    self.send(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.value(*a).data(), true, gd, false, &mut gb);
                    self.send(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, y)| g * y).collect();
                self.send(grads, *a, shaped(d));
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| g / x).collect();
                self.send(grads, *a, shaped(d));
            }
            Op::Sqrt(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, y)| 0.5 * g / y).collect();
                self.send(grads, *a, shaped(d));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                self.send(grads, *a, shaped(d));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                    .collect();
                self.send(grads, *x, shaped(d));
            }
            Op::Softmax { x, axis } => {
                let (o, n, i) = y.axis_split(*axis)?;
                let yd = y.data();
                let mut d = vec![0.0; yd.len()];
                for oo in 0..o {
                    for ii in 0..i {
                        let at = |j: usize| oo * n * i + j * i + ii;
                        let dot: f64 = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..n {
                            d[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                self.send(grads, *x, shaped(d));
            }
            Op::LogSoftmax { x, axis } => {
                let (o, n, i) = y.axis_split(*axis)?;
                let yd = y.data();
                let mut d = vec![0.0; yd.len()];
                for oo in 0..o {
                    for ii in 0..i {
                        let at = |j: usize| oo * n * i + j * i + ii;
                        let gs: f64 = (0..n).map(|j| gd[at(j)]).sum();
                        for j in 0..n {
                            d[at(j)] = gd[at(j)] - yd[at(j)].exp() * gs;
                        }
                    }
                }
                self.send(grads, *x, shaped(d));
            }
            Op::LogSumExp { x, axis } => {
                let xt = self.value(*x);
                let (o, n, i) = xt.axis_split(*axis)?;
                let xd = xt.data();
                let mut d = vec![0.0; xd.len()];
                for oo in 0..o {
                    for ii in 0..i {
                        let lse = y.data()[oo * i + ii];
                        let gg = gd[oo * i + ii];
                        for j in 0..n {
                            let at = oo * n * i + j * i + ii;
                            d[at] = gg * (xd[at] - lse).exp();
                        }
                    }
                }
                self.send(grads, *x, Tensor::from_parts(xt.shape().to_vec(), d));
            }
            Op::Sum(a) => {
                let s = self.value(*a).shape().to_vec();
                self.send(grads, *a, Tensor::full(&s, gd[0]));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let v = gd[0] / t.len() as f64;
                self.send(grads, *a, Tensor::full(t.shape(), v));
            }
            Op::SumAxis { x, axis } => {
                let xt = self.value(*x);
                let (o, n, i) = xt.axis_split(*axis)?;
                let mut d = vec![0.0; xt.len()];
                for oo in 0..o {
                    for j in 0..n {
                        for ii in 0..i {
                            d[oo * n * i + j * i + ii] = gd[oo * i + ii];
                        }
                    }
                }
                self.send(grads, *x, Tensor::from_parts(xt.shape().to_vec(), d));
            }
            Op::Slice { x, axis, start } => {
                let xt = self.value(*x);
                let (o, n, i) = xt.axis_split(*axis)?;
                let len = y.shape()[*axis];
                let mut d = vec![0.0; xt.len()];
                for oo in 0..o {
                    let dst = oo * n * i + start * i;
                    let src = oo * len * i;
                    d[dst..dst + len * i].copy_from_slice(&gd[src..src + len * i]);
                }
                self.send(grads, *x, Tensor::from_parts(xt.shape().to_vec(), d));
            }
            Op::Concat { xs, axis } => {
                let outer: usize = y.shape()[..*axis].iter().product();
                let inner: usize = y.shape()[axis + 1..].iter().product();
                let total = y.shape()[*axis];
                let mut offset = 0;
                for &v in xs {
                    let t = self.value(v);
                    let n = t.shape()[*axis];
                    let mut d = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        d.extend_from_slice(&gd[base..base + n * inner]);
                    }
                    offset += n;
                    self.send(grads, v, Tensor::from_parts(t.shape().to_vec(), d));
                }
            }
            Op::L2Normalize { x, axis, norms } => {
                let (o, n, i) = y.axis_split(*axis)?;
                let yd = y.data();
                let mut d = vec![0.0; yd.len()];
                for oo in 0..o {
                    for ii in 0..i {
                        let at = |j: usize| oo * n * i + j * i + ii;
                        let r = norms[oo * i + ii];
                        let dot: f64 = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..n {
                            d[at(j)] = (gd[at(j)] - yd[at(j)] * dot) / r;
                        }
                    }
                }
                self.send(grads, *x, shaped(d));
            }
            Op::ExpandRows { x } => {
                let xt = self.value(*x);
                let m = xt.len();
                let mut d = vec![0.0; m];
                for row in gd.chunks(m) {
                    for (acc, v) in d.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.send(grads, *x, Tensor::from_parts(xt.shape().to_vec(), d));
            }
            Op::ExpandCols { x } => {
                let xt = self.value(*x);
                let cols = y.shape()[1];
                let d = gd.chunks(cols).map(|row| row.iter().sum()).collect();
                self.send(grads, *x, Tensor::from_parts(xt.shape().to_vec(), d));
            }
            Op::Pick { x, idx } => {
                let xt = self.value(*x);
                let cols = xt.shape()[1];
                let mut d = vec![0.0; xt.len()];
                for (r, ix) in idx.iter().enumerate() {
                    if let Some(c) = ix {
                        d[r * cols + c] = gd[r];
                    }
                }
                self.send(grads, *x, Tensor::from_parts(xt.shape().to_vec(), d));
            }
            Op::Reshape(a) => {
                let s = self.value(*a).shape().to_vec();
                self.send(grads, *a, Tensor::from_parts(s, gd.to_vec()));
            }
            Op::Pairwise { ms, kind } => {
                let d = self.value(ms[0]).shape()[1];
                let parts = kernels::pair_scores_grad(
                    *kind,
                    self.value(ms[0]).data(),
                    self.value(ms[1]).data(),
                    self.value(ms[2]).data(),
                    self.value(ms[3]).data(),
                    d,
                    gd,
                );
                for (v, part) in ms.iter().zip(parts) {
                    let s = self.value(*v).shape().to_vec();
                    self.send(grads, *v, Tensor::from_parts(s, part));
                }
            }
            Op::PairwiseJs { ms, draws } => {
                let d = self.value(ms[0]).shape()[1];
                let parts = kernels::js_scores_grad(
                    self.value(ms[0]).data(),
                    self.value(ms[1]).data(),
                    self.value(ms[2]).data(),
                    self.value(ms[3]).data(),
                    d,
                    draws,
                    gd,
                );
                for (v, part) in ms.iter().zip(parts) {
                    let s = self.value(*v).shape().to_vec();
                    self.send(grads, *v, Tensor::from_parts(s, part));
                }
            }
        }
        Ok(())
    }
}
