use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use super::{gemm, numel, Layout, Real, Tensor};
use crate::error::{Error, Result};

enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    /// `x + b` where `b.shape` is a suffix of `x.shape`.
    AddTrailing(usize, usize),
    /// Element-wise product with a constant of the same shape.
    MulConst(usize, Rc<Tensor<T>>),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    GatherRows(usize, Rc<[usize]>),
    ScatterRows(usize, Rc<[usize]>),
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SoftCrossEntropy {
        logits: usize,
        probs: Vec<T>,
        target: Rc<Tensor<T>>,
    },
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddTrailing(a, b) => vec![*a, *b],
            Op::MatMul(a, b) | Op::BatchMatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a)
            | Op::Gelu(a) => vec![*a],
            Op::Concat(parts, _) => parts.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SoftCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass and differentiates them.
///
/// A tape is single-threaded; create one per training step.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, requires_grad)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a one-element `loss`.
    ///
    /// Each recorded operation is visited once, in reverse recording order.
    /// Gradients of intermediate results are released as soon as they have
    /// been propagated; see [`Tape::backward_retaining`] to keep some.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.backward_retaining(loss, &[])
    }

    /// [`Tape::backward`] that also keeps the gradients of `retain`.
    pub fn backward_retaining(&self, loss: Var<'_, T>, retain: &[Var<'_, T>]) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        }

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if retain.iter().any(|v| v.id == id) {
                grads[id] = Some(g.clone());
            }
            let needs = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| &*nodes[i].value;
            let mut acc = |i: usize, t: Tensor<T>| accumulate(&mut grads[i], t);

            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if needs(*b) {
                        acc(*b, g.clone());
                    }
                    if needs(*a) {
                        acc(*a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        acc(*b, g.map(|x| -x));
                    }
                    if needs(*a) {
                        acc(*a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, zip(&g, val(*b), |x, y| x * y));
                    }
                    if needs(*b) {
                        acc(*b, zip(&g, val(*a), |x, y| x * y));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(*a, g.map(|x| x * s));
                }
                Op::AddTrailing(x, b) => {
                    if needs(*b) {
                        let bl = val(*b).len();
                        let mut gb = vec![T::zero(); bl];
                        for chunk in g.data().chunks(bl.max(1)) {
                            for (s, &v) in gb.iter_mut().zip(chunk) {
                                *s += v;
                            }
                        }
                        acc(*b, Tensor::new(val(*b).shape().to_vec(), gb).unwrap());
                    }
                    if needs(*x) {
                        acc(*x, g);
                    }
                }
                Op::MulConst(a, c) => acc(*a, zip(&g, c, |x, y| x * y)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if needs(*a) {
                        let mut ga = vec![T::zero(); m * k];
                        gemm(m, n, k, g.data(), Layout::Normal, bv.data(), Layout::Transposed, &mut ga, false);
                        acc(*a, Tensor::new(vec![m, k], ga).unwrap());
                    }
                    if needs(*b) {
                        let mut gb = vec![T::zero(); k * n];
                        gemm(k, m, n, av.data(), Layout::Transposed, g.data(), Layout::Normal, &mut gb, false);
                        acc(*b, Tensor::new(vec![k, n], gb).unwrap());
                    }
                }
                Op::BatchMatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                    if needs(*a) {
                        let mut ga = vec![T::zero(); bs * m * k];
                        batched(&mut ga, m * k, |i, out| {
                            gemm(
                                m,
                                n,
                                k,
                                &g.data()[i * m * n..(i + 1) * m * n],
                                Layout::Normal,
                                &bv.data()[i * k * n..(i + 1) * k * n],
                                Layout::Transposed,
                                out,
                                false,
                            )
                        });
                        acc(*a, Tensor::new(vec![bs, m, k], ga).unwrap());
                    }
                    if needs(*b) {
                        let mut gb = vec![T::zero(); bs * k * n];
                        batched(&mut gb, k * n, |i, out| {
                            gemm(
                                k,
                                m,
                                n,
                                &av.data()[i * m * k..(i + 1) * m * k],
                                Layout::Transposed,
                                &g.data()[i * m * n..(i + 1) * m * n],
                                Layout::Normal,
                                out,
                                false,
                            )
                        });
                        acc(*b, Tensor::new(vec![bs, k, n], gb).unwrap());
                    }
                }
                Op::Permute(a, perm) => {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    acc(*a, g.permute(&inverse).unwrap());
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc(*a, g.reshape(&shape).unwrap());
                }
                Op::Concat(parts, axis) => {
                    let shape = g.shape().to_vec();
                    let outer = numel(&shape[..*axis]);
                    let inner = numel(&shape[axis + 1..]);
                    let total = shape[*axis] * inner;
                    let mut start = 0;
                    for &p in parts {
                        let pshape = val(p).shape().to_vec();
                        let width = pshape[*axis] * inner;
                        if needs(p) {
                            let mut data = Vec::with_capacity(outer * width);
                            for o in 0..outer {
                                data.extend_from_slice(&g.data()[o * total + start..o * total + start + width]);
                            }
                            acc(p, Tensor::new(pshape, data).unwrap());
                        }
                        start += width;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let av = val(*a);
                    let w = av.row_len();
                    let mut ga = Tensor::zeros(av.shape());
                    for (src, &dst) in idx.iter().enumerate() {
                        for (d, &s) in ga.data[dst * w..(dst + 1) * w]
                            .iter_mut()
                            .zip(&g.data()[src * w..(src + 1) * w])
                        {
                            *d += s;
                        }
                    }
                    acc(*a, ga);
                }
                Op::ScatterRows(a, idx) => acc(*a, g.gather_rows(idx).unwrap()),
                Op::Sum(a) => {
                    let s = g.item();
                    acc(*a, Tensor::full(val(*a).shape(), s));
                }
                Op::Mean(a) => {
                    let shape = val(*a).shape().to_vec();
                    let s = g.item() / T::of(numel(&shape) as f64);
                    acc(*a, Tensor::full(&shape, s));
                }
                Op::Softmax(a) => {
                    let y = &*node.value;
                    let n = last_extent(y.shape());
                    let mut gx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(n.max(1)).zip(g.data().chunks(n.max(1))) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        gx.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                    }
                    acc(*a, Tensor::new(y.shape().to_vec(), gx).unwrap());
                }
                Op::Gelu(a) => {
                    let x = val(*a);
                    acc(*a, zip(&g, x, |gi, xi| gi * gelu_grad(xi)));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = val(*gamma);
                    let d = gv.len();
                    if needs(*beta) {
                        let mut gb = vec![T::zero(); d];
                        for row in g.data().chunks(d) {
                            for (s, &v) in gb.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        acc(*beta, Tensor::new(vec![d], gb).unwrap());
                    }
                    if needs(*gamma) {
                        let mut gg = vec![T::zero(); d];
                        for (row, hrow) in g.data().chunks(d).zip(xhat.chunks(d)) {
                            for ((s, &v), &h) in gg.iter_mut().zip(row).zip(hrow) {
                                *s += v * h;
                            }
                        }
                        acc(*gamma, Tensor::new(vec![d], gg).unwrap());
                    }
                    if needs(*x) {
                        let inv_d = T::of(1.0 / d as f64);
                        let mut gx = Vec::with_capacity(g.len());
                        let mut gxh = vec![T::zero(); d];
                        for ((row, hrow), &r) in g.data().chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                            for ((o, &v), &gm) in gxh.iter_mut().zip(row).zip(gv.data()) {
                                *o = v * gm;
                            }
                            let mean_g: T = gxh.iter().copied().sum::<T>() * inv_d;
                            let mean_gh: T = gxh.iter().zip(hrow).map(|(&a, &h)| a * h).sum::<T>() * inv_d;
                            gx.extend(gxh.iter().zip(hrow).map(|(&a, &h)| r * (a - mean_g - h * mean_gh)));
                        }
                        acc(*x, Tensor::new(val(*x).shape().to_vec(), gx).unwrap());
                    }
                }
                Op::SoftCrossEntropy { logits, probs, target } => {
                    let shape = val(*logits).shape().to_vec();
                    let c = shape[1];
                    let scale = g.item() / T::of(shape[0] as f64);
                    let mut gl = Vec::with_capacity(probs.len());
                    for (prow, trow) in probs.chunks(c).zip(target.data().chunks(c)) {
                        let mass: T = trow.iter().copied().sum();
                        gl.extend(prow.iter().zip(trow).map(|(&p, &t)| (p * mass - t) * scale));
                    }
                    acc(*logits, Tensor::new(shape, gl).unwrap());
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&t),
        None => *slot = Some(t),
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn last_extent(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

/// Fills `out` in chunks of `chunk`, one per batch entry.
fn batched<T: Real>(out: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf());
    let pdf = T::of(FRAC_1_SQRT_2PI) * (-(x * x) * T::of(0.5)).exp();
    cdf + x * pdf
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads[v.id].as_ref()
    }

    /// Gradient of `v`, zero-filled if the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.grads[v.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads[v.id].take()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_shape(&self, other: Var<'t, T>, op: &'static str) -> Result<(Rc<Tensor<T>>, Rc<Tensor<T>>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        Ok((a, b))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        let (a, b) = self.same_shape(other, "add")?;
        Ok(self.tape.record(zip(&a, &b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        let (a, b) = self.same_shape(other, "sub")?;
        Ok(self.tape.record(zip(&a, &b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        let (a, b) = self.same_shape(other, "mul")?;
        Ok(self.tape.record(zip(&a, &b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, s: T) -> Self {
        let a = self.value();
        self.tape.record(a.map(|x| x * s), Op::Scale(self.id, s))
    }

    /// Adds `bias`, whose shape must equal the trailing axes of `self`
    /// (a `[d]` bias, or a `[tokens, d]` positional table).
    pub fn add_trailing(self, bias: Var<'t, T>) -> Result<Self> {
        let (x, b) = (self.value(), bias.value());
        let (xs, bs) = (x.shape(), b.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::shape("add_trailing", xs, bs));
        }
        let bl = b.len().max(1);
        let data = x
            .data()
            .chunks(bl)
            .flat_map(|c| c.iter().zip(b.data()).map(|(&u, &v)| u + v))
            .collect();
        Ok(self
            .tape
            .record(Tensor::new(xs.to_vec(), data)?, Op::AddTrailing(self.id, bias.id)))
    }

    /// Element-wise product with a constant tensor of the same shape.
    pub fn mul_const(self, c: Tensor<T>) -> Result<Self> {
        let a = self.value();
        if a.shape() != c.shape() {
            return Err(Error::shape("mul_const", a.shape(), c.shape()));
        }
        let out = zip(&a, &c, |x, y| x * y);
        Ok(self.tape.record(out, Op::MulConst(self.id, Rc::new(c))))
    }

    /// Zeroes each element with probability `p`, scaling survivors by `1/(1-p)`.
    pub fn dropout(self, p: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask = Tensor::from_fn(&self.shape(), |_| if rng.random::<f64>() < p { T::zero() } else { keep });
        self.mul_const(mask)
    }

    /// Per-sample variant of [`Var::dropout`]: every slice along axis 0 is kept
    /// or zeroed as a whole (stochastic depth on a residual branch).
    pub fn drop_samples(self, p: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("drop probability {p} outside [0, 1)")));
        }
        let shape = self.shape();
        let rows = shape.first().copied().unwrap_or(1);
        let w = numel(&shape).checked_div(rows).unwrap_or(0);
        let keep = T::of(1.0 / (1.0 - p));
        let per_row: Vec<T> = (0..rows)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mask = Tensor::from_fn(&shape, |i| per_row[i / w.max(1)]);
        self.mul_const(mask)
    }

    /// `[m,k]·[k,n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), Layout::Normal, b.data(), Layout::Normal, &mut c, false);
        Ok(self
            .tape
            .record(Tensor::new(vec![m, n], c)?, Op::MatMul(self.id, other.id)))
    }

    /// `[B,m,k]·[B,k,n]`.
    pub fn bmm(self, other: Var<'t, T>) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (a, b) = (&*a, &*b);
        let mut c = vec![T::zero(); bs * m * n];
        batched(&mut c, m * n, |i, out| {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                Layout::Normal,
                &b.data()[i * k * n..(i + 1) * k * n],
                Layout::Normal,
                out,
                false,
            )
        });
        Ok(self
            .tape
            .record(Tensor::new(vec![bs, m, n], c)?, Op::BatchMatMul(self.id, other.id)))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        let out = self.value().permute(perm)?;
        Ok(self.tape.record(out, Op::Permute(self.id, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Self> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::invalid("transpose needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.record(out, Op::Reshape(self.id)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut extent = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(Error::shape("concat", &base, s));
            }
            extent += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for v in &values {
                let w = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = extent;
        Ok(tape.record(
            Tensor::new(shape, data)?,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
        ))
    }

    /// Rows of axis 0 selected by `idx` (repeats allowed).
    pub fn gather_rows(self, idx: &[usize]) -> Result<Self> {
        let out = self.value().gather_rows(idx)?;
        Ok(self.tape.record(out, Op::GatherRows(self.id, idx.into())))
    }

    /// Embedding lookup: rows of a `[vocab, d]` table.
    pub fn embedding(self, ids: &[usize]) -> Result<Self> {
        self.gather_rows(ids)
    }

    /// Writes row `i` to row `idx[i]` of a zero tensor with `rows` rows.
    pub fn scatter_rows(self, idx: &[usize], rows: usize) -> Result<Self> {
        let out = self.value().scatter_rows(idx, rows)?;
        Ok(self.tape.record(out, Op::ScatterRows(self.id, idx.into())))
    }

    pub fn sum(self) -> Self {
        let s = self.value().sum();
        self.tape.record(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let v = self.value();
        let s = v.sum() / T::of(v.len() as f64);
        self.tape.record(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(self) -> Self {
        let x = self.value();
        let n = last_extent(x.shape()).max(1);
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= total;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out).unwrap();
        self.tape.record(out, Op::Softmax(self.id))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(self) -> Self {
        let out = self.value().map(gelu);
        self.tape.record(out, Op::Gelu(self.id))
    }

    /// Layer normalisation over the last axis with population variance.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Self> {
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let d = last_extent(x.shape());
        if x.shape().is_empty() || d == 0 {
            return Err(Error::invalid("layer_norm over an empty axis"));
        }
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", x.shape(), gv.shape()));
        }
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::invalid(format!("layer_norm eps must be non-negative, got {eps}")));
        }
        let inv_d = T::of(1.0 / d as f64);
        let eps = T::of(eps);
        let rows = x.len() / d;
        let mut xhat = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for ((&v, &g), &b) in row.iter().zip(gv.data()).zip(bv.data()) {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g + b);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean over the batch of `-Σ target·log softmax(logits)` for `[b, c]`
    /// logits and (soft) targets.
    pub fn soft_cross_entropy(self, target: Tensor<T>) -> Result<Self> {
        let z = self.value();
        if z.rank() != 2 || z.shape() != target.shape() || z.shape()[0] == 0 {
            return Err(Error::shape("soft_cross_entropy", z.shape(), target.shape()));
        }
        let c = z.shape()[1];
        let mut probs = Vec::with_capacity(z.len());
        let mut loss = T::zero();
        for (row, trow) in z.data().chunks(c).zip(target.data().chunks(c)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for (&v, &t) in row.iter().zip(trow) {
                probs.push((v - lse).exp());
                loss -= t * (v - lse);
            }
        }
        let loss = loss / T::of(z.shape()[0] as f64);
        Ok(self.tape.record(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits: self.id,
                probs,
                target: Rc::new(target),
            },
        ))
    }
}
