use std::borrow::Cow;

use super::kernels::{self, ConvGeom};
use super::{window_out_extent, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation kinds accepted by [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Scale(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatVec { a: Var, x: Var, m: usize, k: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { a: Var, bias: Var },
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Ln(Var),
    Clamp { a: Var, lo: f64, hi: f64 },
    Maximum(Var, Var),
    Minimum(Var, Var),
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom },
    MaxPool { input: Var, argmax: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Dot(Var, Var),
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Values are evaluated eagerly as operations are added;
/// [`Graph::backward`] walks the records in reverse.
///
/// Parameters can be borrowed for the graph's lifetime `'p`, so building a
/// graph over a large model does not copy its weights.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    branches: Option<Branches>,
}

/// Discrete choices of the piecewise operations (ReLU, clamp, elementwise
/// max/min, max pooling), one entry per output element in evaluation order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BranchTrace {
    choices: Vec<u32>,
}

impl BranchTrace {
    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }
}

enum Branches {
    Record(BranchTrace),
    Replay { trace: BranchTrace, cursor: usize, diverged: usize },
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that records every piecewise choice; see [`Graph::take_branch_trace`].
    pub fn recording() -> Self {
        Self { branches: Some(Branches::Record(BranchTrace::default())), ..Self::default() }
    }

    /// Graph whose piecewise operations follow `trace` instead of their inputs,
    /// so the same operation sequence evaluates one fixed smooth branch.
    /// Forward only: [`Graph::backward`] rejects it.
    pub fn replaying(trace: BranchTrace) -> Self {
        Self { branches: Some(Branches::Replay { trace, cursor: 0, diverged: 0 }), ..Self::default() }
    }

    pub fn take_branch_trace(&mut self) -> Option<BranchTrace> {
        match self.branches.take() {
            Some(Branches::Record(t)) => Some(t),
            other => {
                self.branches = other;
                None
            }
        }
    }

    /// Replayed choices that differ from what the inputs would have selected.
    pub fn diverged(&self) -> usize {
        match &self.branches {
            Some(Branches::Replay { diverged, .. }) => *diverged,
            _ => 0,
        }
    }

    fn decide(&mut self, natural: Vec<u32>) -> Vec<u32> {
        match &mut self.branches {
            None => natural,
            Some(Branches::Record(t)) => {
                t.choices.extend_from_slice(&natural);
                natural
            }
            Some(Branches::Replay { trace, cursor, diverged }) => {
                let end = *cursor + natural.len();
                let forced = trace
                    .choices
                    .get(*cursor..end)
                    .expect("replayed graph must repeat the recorded operations")
                    .to_vec();
                *diverged += forced.iter().zip(&natural).filter(|(a, b)| a != b).count();
                *cursor = end;
                forced
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; gradients never flow into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(data, shape, Op::Leaf, false)
    }

    /// Owned leaf that accumulates a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(data, shape, Op::Leaf, true)
    }

    /// Borrowed parameter leaf that accumulates a gradient.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t.data()),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("graph node holds a valid tensor")
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.leaf_grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }, ng))
    }

    /// Matrix `[m, k]` times vector `[k]`, giving `[m]`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(a), self.shape(x));
        if sa.len() != 2 || sx.len() != 1 || sa[1] != sx[0] {
            return Err(mismatch("matvec", sa, sx));
        }
        let (m, k) = (sa[0], sa[1]);
        let out = kernels::matvec(self.value(a), self.value(x), m, k);
        let ng = self.ng(a) || self.ng(x);
        Ok(self.push(out, vec![m], Op::MatVec { a, x, m, k }, ng))
    }

    pub fn elementwise(&mut self, kind: Elementwise, operands: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(TensorError::Invalid(format!(
                "{kind:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        match kind {
            Elementwise::Add => self.add(operands[0], operands[1]),
            Elementwise::Sub => self.sub(operands[0], operands[1]),
            Elementwise::Mul => self.mul(operands[0], operands[1]),
            Elementwise::Sigmoid => Ok(self.sigmoid(operands[0])),
            Elementwise::Tanh => Ok(self.tanh(operands[0])),
            Elementwise::Relu => Ok(self.relu(operands[0])),
            Elementwise::Scale(s) => Ok(self.scale(operands[0], s)),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, shape, op, ng))
    }

    /// Elementwise choice between `a` and `b` through [`Graph::decide`].
    fn select(&mut self, name: &'static str, a: Var, b: Var, pick_a: impl Fn(f64, f64) -> bool, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let natural = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| pick_a(x, y) as u32).collect();
        let choice = self.decide(natural);
        let out = choice
            .iter()
            .zip(self.value(a).iter().zip(self.value(b)))
            .map(|(&c, (&x, &y))| if c == 1 { x } else { y })
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, shape, op, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(out, shape, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties select `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.branches.is_some() {
            return self.select("maximum", a, b, |x, y| x >= y, Op::Maximum(a, b));
        }
        self.binary("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    /// Elementwise minimum; ties select `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.branches.is_some() {
            return self.select("minimum", a, b, |x, y| x <= y, Op::Minimum(a, b));
        }
        self.binary("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    /// Adds `bias` of shape `[n]` to every row of `a` (shape `[n]` or `[batch, n]`).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        let n = *sa.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n || sa.len() > 2 {
            return Err(mismatch("add_bias", sa, sb));
        }
        let bv = self.value(bias);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let shape = sa.to_vec();
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out, shape, Op::AddBias { a, bias }, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Shift(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if self.branches.is_some() {
            let natural = self.value(a).iter().map(|&x| (x > 0.0) as u32).collect();
            let choice = self.decide(natural);
            let out = choice.iter().zip(self.value(a)).map(|(&c, &x)| if c == 1 { x } else { 0.0 }).collect();
            let shape = self.shape(a).to_vec();
            let ng = self.ng(a);
            return self.push(out, shape, Op::Relu(a), ng);
        }
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        if self.branches.is_some() {
            let natural = self.value(a).iter().map(|&x| if x < lo { 0 } else if x > hi { 2 } else { 1 }).collect();
            let choice = self.decide(natural);
            let out = choice
                .iter()
                .zip(self.value(a))
                .map(|(&c, &x)| match c {
                    0 => lo,
                    1 => x,
                    _ => hi,
                })
                .collect();
            let shape = self.shape(a).to_vec();
            let ng = self.ng(a);
            return self.push(out, shape, Op::Clamp { a, lo, hi }, ng);
        }
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(out, shape.to_vec(), Op::Reshape(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![s], vec![1], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of scalar nodes, added left to right.
    pub fn sum_scalars(&mut self, vars: &[Var]) -> Result<Var> {
        let (first, rest) = vars
            .split_first()
            .ok_or_else(|| TensorError::Invalid("sum of zero terms".into()))?;
        rest.iter().try_fold(*first, |acc, &v| self.add(acc, v))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("dot", self.shape(a), self.shape(b)));
        }
        let s = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![s], vec![1], Op::Dot(a, b), ng))
    }

    /// Cross-correlation of `input [C_in, H, W]` with `kernel [C_out, C_in, kh, kw]`
    /// plus a per-output-channel `bias [C_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] {
            return Err(mismatch("conv2d", si, sk));
        }
        if sb != [sk[0]] {
            return Err(mismatch("conv2d bias", sk, sb));
        }
        let (h_out, w_out) = match (
            window_out_extent(si[1], sk[2], stride, padding),
            window_out_extent(si[2], sk[3], stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(TensorError::InvalidGeometry {
                    op: "conv2d",
                    reason: format!(
                        "input {si:?}, kernel {sk:?}, stride {stride}, padding {padding} gives an empty output"
                    ),
                })
            }
        };
        let geom = ConvGeom {
            c_in: si[0],
            h: si[1],
            w: si[2],
            c_out: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            padding,
            h_out,
            w_out,
        };
        let out = kernels::conv2d_forward(self.value(input), self.value(kernel), self.value(bias), &geom);
        let ng = self.ng(input) || self.ng(kernel) || self.ng(bias);
        Ok(self.push(
            out,
            vec![geom.c_out, h_out, w_out],
            Op::Conv2d { input, kernel, bias, geom },
            ng,
        ))
    }

    /// Square-window max pooling over `[C, H, W]`.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input);
        let geometry_err = |reason: String| TensorError::InvalidGeometry { op: "maxpool2d", reason };
        if si.len() != 3 {
            return Err(geometry_err(format!("expected [C, H, W], got {si:?}")));
        }
        if window == 0 || padding >= window {
            return Err(geometry_err(format!("window {window} with padding {padding}")));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (h_out, w_out) = match (
            window_out_extent(h, window, stride, padding),
            window_out_extent(w, window, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(geometry_err(format!(
                    "input {si:?}, window {window}, stride {stride}, padding {padding} gives an empty output"
                )))
            }
        };
        let (mut out, mut argmax) =
            kernels::maxpool_forward(self.value(input), c, h, w, window, stride, padding, h_out, w_out);
        if self.branches.is_some() {
            let natural = argmax.iter().map(|&i| i as u32).collect();
            argmax = self.decide(natural).into_iter().map(|i| i as usize).collect();
            let iv = self.value(input);
            out = argmax.iter().map(|&i| iv[i]).collect();
        }
        let ng = self.ng(input);
        Ok(self.push(out, vec![c, h_out, w_out], Op::MaxPool { input, argmax }, ng))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if matches!(self.branches, Some(Branches::Replay { .. })) {
            return Err(TensorError::Invalid("backward on a replayed graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                let n = &nodes[v.0];
                if !n.needs_grad {
                    return;
                }
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
                f(buf);
            };
            let val = |v: Var| -> &[f64] { &nodes[v.0].value };
            match &node.op {
                Op::Leaf => {
                    let slot = self.leaf_grads[idx].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (s, x) in slot.iter_mut().zip(&g) {
                        *s += x;
                    }
                }
                &Op::MatMul { a, b, m, k, n } => {
                    let (av, bv) = (val(a), val(b));
                    acc(a, &mut |ga| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bv[p * n + j];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    });
                    acc(b, &mut |gb| {
                        for i in 0..m {
                            for p in 0..k {
                                let aip = av[i * k + p];
                                for j in 0..n {
                                    gb[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    });
                }
                &Op::MatVec { a, x, m, k } => {
                    let (av, xv) = (val(a), val(x));
                    acc(a, &mut |ga| {
                        for i in 0..m {
                            let gi = g[i];
                            for (dst, &xp) in ga[i * k..(i + 1) * k].iter_mut().zip(xv) {
                                *dst += gi * xp;
                            }
                        }
                    });
                    acc(x, &mut |gx| {
                        for i in 0..m {
                            let gi = g[i];
                            for (dst, &w) in gx.iter_mut().zip(&av[i * k..(i + 1) * k]) {
                                *dst += w * gi;
                            }
                        }
                    });
                }
                &Op::Add(a, b) => {
                    acc(a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(d, x)| *d += x));
                    acc(b, &mut |gb| gb.iter_mut().zip(&g).for_each(|(d, x)| *d += x));
                }
                &Op::Sub(a, b) => {
                    acc(a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(d, x)| *d += x));
                    acc(b, &mut |gb| gb.iter_mut().zip(&g).for_each(|(d, x)| *d -= x));
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    acc(a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    });
                    acc(b, &mut |gb| {
                        for i in 0..gb.len() {
                            gb[i] += g[i] * av[i];
                        }
                    });
                }
                &Op::Maximum(a, b) | &Op::Minimum(a, b) => {
                    let is_max = matches!(node.op, Op::Maximum(..));
                    let (av, bv) = (val(a), val(b));
                    let picks_a = |i: usize| if is_max { av[i] >= bv[i] } else { av[i] <= bv[i] };
                    acc(a, &mut |ga| {
                        for i in 0..ga.len() {
                            if picks_a(i) {
                                ga[i] += g[i];
                            }
                        }
                    });
                    acc(b, &mut |gb| {
                        for i in 0..gb.len() {
                            if !picks_a(i) {
                                gb[i] += g[i];
                            }
                        }
                    });
                }
                &Op::AddBias { a, bias } => {
                    acc(a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(d, x)| *d += x));
                    acc(bias, &mut |gb| {
                        let n = gb.len();
                        for (i, x) in g.iter().enumerate() {
                            gb[i % n] += x;
                        }
                    });
                }
                &Op::Scale(a, s) => {
                    acc(a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(d, x)| *d += s * x));
                }
                &Op::Shift(a) | &Op::Reshape(a) => {
                    acc(a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(d, x)| *d += x));
                }
                &Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
                &Op::Tanh(a) => {
                    let y = &node.value;
                    acc(a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
                &Op::Relu(a) => {
                    let xv = val(a);
                    acc(a, &mut |ga| {
                        for i in 0..ga.len() {
                            if xv[i] > 0.0 {
                                ga[i] += g[i];
                            }
                        }
                    });
                }
                &Op::Ln(a) => {
                    let xv = val(a);
                    acc(a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] / xv[i];
                        }
                    });
                }
                &Op::Clamp { a, lo, hi } => {
                    let xv = val(a);
                    acc(a, &mut |ga| {
                        for i in 0..ga.len() {
                            if xv[i] >= lo && xv[i] <= hi {
                                ga[i] += g[i];
                            }
                        }
                    });
                }
                &Op::Sum(a) => {
                    acc(a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0]));
                }
                &Op::Dot(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    acc(a, &mut |ga| ga.iter_mut().zip(bv).for_each(|(d, y)| *d += g[0] * y));
                    acc(b, &mut |gb| gb.iter_mut().zip(av).for_each(|(d, x)| *d += g[0] * x));
                }
                &Op::Conv2d { input, kernel, bias, geom } => {
                    let (iv, kv) = (val(input), val(kernel));
                    let mut di = nodes[input.0].needs_grad.then(|| {
                        grads[input.0].take().unwrap_or_else(|| vec![0.0; iv.len()])
                    });
                    let mut dk = nodes[kernel.0].needs_grad.then(|| {
                        grads[kernel.0].take().unwrap_or_else(|| vec![0.0; kv.len()])
                    });
                    let mut db = nodes[bias.0].needs_grad.then(|| {
                        grads[bias.0].take().unwrap_or_else(|| vec![0.0; geom.c_out])
                    });
                    kernels::conv2d_backward(
                        iv,
                        kv,
                        &g,
                        &geom,
                        di.as_deref_mut(),
                        dk.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    if let Some(d) = di {
                        grads[input.0] = Some(d);
                    }
                    if let Some(d) = dk {
                        merge(&mut grads[kernel.0], d);
                    }
                    if let Some(d) = db {
                        merge(&mut grads[bias.0], d);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    acc(*input, &mut |gi| {
                        for (o, &src) in argmax.iter().enumerate() {
                            gi[src] += g[o];
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn merge(slot: &mut Option<Vec<f64>>, d: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(&d).for_each(|(e, x)| *e += x),
        None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_product() {
        let mut g = Graph::new();
        let i2 = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.input(t(&[1, 2], &[1.0, 2.0]));
        let b = g.input(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p), &[11.0]);
        assert_eq!(g.shape(p), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros([2, 3]));
        let b = g.input(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn matmul_backward_of_sum() {
        // d/da sum(a b) = 1 · bᵀ, each row gets the row sums of b
        let mut g = Graph::new();
        let a = g.variable(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.variable(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let p = g.matmul(a, b).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[5.0, 9.0, 5.0, 9.0]);

        let fd = finite_diff_grad(
            |ps| {
                let mut g = Graph::new();
                let a = g.input(ps[0].clone());
                let b = g.input(ps[1].clone());
                let p = g.matmul(a, b).unwrap();
                let s = g.sum(p);
                g.scalar(s)
            },
            &mut [t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), t(&[2, 2], &[2.0, 3.0, 4.0, 5.0])],
            1e-5,
        );
        for (x, y) in fd[0].iter().zip(g.grad(a).unwrap()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let z = g.input(Tensor::scalar(0.0));
        let s = g.elementwise(Elementwise::Sigmoid, &[z]).unwrap();
        let th = g.elementwise(Elementwise::Tanh, &[z]).unwrap();
        assert_eq!(g.scalar(s), 0.5);
        assert_eq!(g.scalar(th), 0.0);
        let a = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = g.input(Tensor::vector(vec![4.0, 5.0, 6.0]));
        let m = g.elementwise(Elementwise::Mul, &[a, b]).unwrap();
        assert_eq!(g.value(m), &[4.0, 10.0, 18.0]);
        assert!(g.elementwise(Elementwise::Add, &[a, z]).is_err());
        assert!(g.elementwise(Elementwise::Add, &[a]).is_err());
    }

    #[test]
    fn relu_subgradient_zero_at_origin() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        let l = g.sum(r);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn add_bias_broadcasts_over_leading_extent_only() {
        let mut g = Graph::new();
        let a = g.variable(t(&[2, 3], &[0.0; 6]));
        let b = g.variable(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.add_bias(a, b).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
        let bad = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.add_bias(a, bad).is_err());
    }

    #[test]
    fn conv_identity_and_overlap_counts() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled([1, 3, 3], 1.0));
        let k = g.input(Tensor::filled([1, 1, 1, 1], 1.0));
        let b = g.input(Tensor::zeros([1]));
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.value(y), &[1.0; 9]);

        let x = g.input(Tensor::filled([1, 4, 4], 1.0));
        let k = g.input(Tensor::filled([1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, b, 1, 1).unwrap();
        #[rustfmt::skip]
        let expected = [
            4.0, 6.0, 6.0, 4.0,
            6.0, 9.0, 9.0, 6.0,
            6.0, 9.0, 9.0, 6.0,
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(g.value(y), &expected);
    }

    #[test]
    fn conv_kernel_grad_is_window_sum() {
        // 1x1 output: each kernel weight touches exactly one input element
        let input: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3, 3], &input));
        let k = g.variable(Tensor::filled([1, 1, 2, 2], 0.3));
        let b = g.variable(Tensor::zeros([1]));
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        // kernel (0,0) touches outputs at input windows starting (0,0),(0,1),(1,0),(1,1)
        assert_eq!(g.grad(k).unwrap(), &[0.0 + 1.0 + 3.0 + 4.0, 1.0 + 2.0 + 4.0 + 5.0, 3.0 + 4.0 + 6.0 + 7.0, 4.0 + 5.0 + 7.0 + 8.0]);
        assert_eq!(g.grad(b).unwrap(), &[4.0]);
    }

    #[test]
    fn conv_invalid_geometry() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 2, 2]));
        let k = g.input(Tensor::zeros([1, 1, 5, 5]));
        let b = g.input(Tensor::zeros([1]));
        assert!(matches!(
            g.conv2d(x, k, b, 1, 0),
            Err(TensorError::InvalidGeometry { .. })
        ));
    }

    #[test]
    fn maxpool_single_window_and_ties() {
        let mut g = Graph::new();
        let x = g.variable(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2d(x, 2, 2, 0).unwrap();
        assert_eq!(g.value(y), &[4.0]);

        let c = g.variable(Tensor::filled([1, 4, 4], 7.0));
        let y = g.maxpool2d(c, 2, 2, 0).unwrap();
        assert_eq!(g.value(y), &[7.0; 4]);
        let l = g.sum(y);
        g.backward(l).unwrap();
        // first element of each 2x2 window in row-major order
        #[rustfmt::skip]
        let routed = [
            1.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
            1.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(g.grad(c).unwrap(), &routed);
    }

    #[test]
    fn maxpool_padding_never_wins() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled([1, 3, 3], -5.0));
        let y = g.maxpool2d(x, 3, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2]);
        assert!(g.value(y).iter().all(|&v| v == -5.0));
        let big = g.input(Tensor::zeros([1, 64, 64]));
        let y = g.maxpool2d(big, 3, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 32, 32]);
        assert!(g.maxpool2d(x, 2, 2, 2).is_err());
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new();
        let p = g.variable(Tensor::vector(vec![1.0, -2.0]));
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0, 1.0]);
        g.zero_grad();

        let sq = g.mul(p, p).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[2.0, -4.0]);
        // repeated calls accumulate
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[4.0, -8.0]);

        assert_eq!(g.backward(p), Err(TensorError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn max_min_route_ties_to_first_operand() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let b = g.variable(Tensor::vector(vec![1.0, 3.0]));
        let m = g.maximum(a, b).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 0.0]);
        assert_eq!(g.grad(b).unwrap(), &[0.0, 1.0]);
        g.zero_grad();
        let m = g.minimum(a, b).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(b), Some(&[0.0, 0.0][..]));
    }

    fn piecewise_chain(g: &mut Graph<'_>, shift: f64) -> Vec<f64> {
        let x = g.input(t(&[1, 2, 2], &[0.5 + shift, -0.5 + shift, 0.2, 0.1 + shift]));
        let r = g.relu(x);
        let c = g.clamp(r, 0.0, 0.55);
        let p = g.maxpool2d(c, 2, 2, 0).unwrap();
        let q = g.input(Tensor::vector(vec![0.3]));
        let p = g.reshape(p, &[1]).unwrap();
        let m = g.maximum(p, q).unwrap();
        g.value(m).to_vec()
    }

    #[test]
    fn replay_follows_recorded_branches() {
        let mut rec = Graph::recording();
        assert_eq!(piecewise_chain(&mut rec, 0.0), vec![0.5]);
        let trace = rec.take_branch_trace().unwrap();
        assert_eq!(trace.len(), 4 + 4 + 1 + 1);

        // small shift stays on the same branches
        let mut g = Graph::replaying(trace.clone());
        assert_eq!(piecewise_chain(&mut g, 0.01), vec![0.51]);
        assert_eq!(g.diverged(), 0);

        // a large shift would flip relu, clamp and pool choices; replay keeps them
        let mut g = Graph::replaying(trace);
        let v = piecewise_chain(&mut g, 0.6);
        assert_eq!(v, vec![1.1]);
        assert!(g.diverged() > 0);
        let l = g.input(Tensor::scalar(0.0));
        assert!(g.backward(l).is_err());
    }
}
