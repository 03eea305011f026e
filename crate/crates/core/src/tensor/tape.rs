//! Reverse-mode autodiff tape.
//!
//! Every operation appends a node holding its forward value and enough
//! metadata to propagate adjoints. `backward` walks the nodes in reverse
//! creation order, so input ids always precede their consumers. The walk is
//! single-threaded and the accumulation order is fixed, which makes
//! gradients bit-deterministic run to run.
//!
//! Elementwise binary ops broadcast only over a trailing run of singleton
//! axes of one operand (for example `(L,N) * (L,1)`); anything fancier must
//! be spelled out with reshapes, row ops or explicit expansion.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{ln_row, mm_nn, mm_nt, mm_tn, softmax_row};
use super::{numel, Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Id(usize);

/// Pointwise nonlinearities with analytic derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Silu,
    Gelu,
    /// `f(z) = expm1(z)/z` with `f(0) = 1`; the zero-order-hold coefficient
    /// used when discretizing a continuous state-space system.
    DiscretizeCoef,
}

enum Buf<E: Element> {
    Owned(Vec<E>),
    Shared(Arc<Vec<E>>),
}

impl<E: Element> Buf<E> {
    fn as_slice(&self) -> &[E] {
        match self {
            Buf::Owned(v) => v,
            Buf::Shared(a) => a,
        }
    }
}

enum Op {
    Leaf,
    Add { a: Id, b: Id },
    Sub { a: Id, b: Id },
    Mul { a: Id, b: Id },
    Div { a: Id, b: Id },
    AddScalar { a: Id },
    MulScalar { a: Id, c: f64 },
    AddRow { a: Id, v: Id },
    MulRow { a: Id, v: Id },
    Unary { a: Id, kind: UnaryKind },
    Matmul { a: Id, b: Id },
    SoftmaxLast { a: Id },
    LayerNorm { x: Id, gamma: Option<Id>, beta: Option<Id>, eps: f64 },
    Reshape { a: Id },
    Transpose { a: Id, ax0: usize, ax1: usize },
    Concat { parts: Vec<Id>, axis: usize },
    Slice { a: Id, axis: usize, start: usize },
    Cumsum { a: Id, axis: usize },
    SumAll { a: Id },
    MeanAll { a: Id },
    GatherRows { table: Id, idx: Vec<usize> },
    Patchify { a: Id, c: usize, h: usize, w: usize, p: usize },
    Unpatchify { a: Id, c: usize, h: usize, w: usize, p: usize },
    SsmScan { x: Id, log_a: Id, b_bar: Id, c_in: Id },
}

struct Node<E: Element> {
    shape: Vec<usize>,
    data: Buf<E>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<E>>,
}

/// Recording tape. One tape per forward/backward pass; a tape must not be
/// shared across threads while recording.
///
/// Tensors bound via [`Tape::leaf`] or [`Tape::constant`] are deduplicated by
/// storage pointer: binding the same tensor twice returns the same node, so
/// weight sharing accumulates gradients into one slot and callers can look the
/// node up again after the pass with [`Tape::id_of`] / [`Tape::grad_of`].
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    bound: HashMap<usize, Id>,
}

/// How a broadcast pairs the small operand with the big one.
enum Bcast {
    Equal,
    /// Big on the left; small indexed by `flat / tail`.
    SmallIsB { tail: usize },
    SmallIsA { tail: usize },
}

fn broadcast_plan(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Bcast)> {
    if a == b {
        return Some((a.to_vec(), Bcast::Equal));
    }
    if a.len() != b.len() {
        return None;
    }
    // One side must equal the other with a trailing run of axes set to 1.
    let trailing_ok = |big: &[usize], small: &[usize]| -> Option<usize> {
        let mut split = big.len();
        while split > 0 && small[split - 1] == 1 && big[split - 1] != 1 {
            split -= 1;
        }
        if big[..split] == small[..split] && small[split..].iter().all(|&d| d == 1) {
            Some(big[split..].iter().product())
        } else {
            None
        }
    };
    if let Some(tail) = trailing_ok(a, b) {
        return Some((a.to_vec(), Bcast::SmallIsB { tail }));
    }
    if let Some(tail) = trailing_ok(b, a) {
        return Some((b.to_vec(), Bcast::SmallIsA { tail }));
    }
    None
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[inline]
fn unary_eval<E: Element>(kind: UnaryKind, x: E) -> E {
    match kind {
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Silu => x * sigmoid(x),
        UnaryKind::Gelu => gelu(x),
        UnaryKind::DiscretizeCoef => discretize_coef(x),
    }
}

#[inline]
fn unary_deriv<E: Element>(kind: UnaryKind, x: E) -> E {
    match kind {
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => E::ONE / x,
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Sigmoid => {
            let s = sigmoid(x);
            s * (E::ONE - s)
        }
        UnaryKind::Silu => {
            let s = sigmoid(x);
            s * (E::ONE + x * (E::ONE - s))
        }
        UnaryKind::Gelu => gelu_deriv(x),
        UnaryKind::DiscretizeCoef => discretize_coef_deriv(x),
    }
}

/// `ln(1 + e^x)` with saturation guards on both tails.
#[inline]
pub fn softplus<E: Element>(x: E) -> E {
    let hi = E::from_f64(30.0);
    let lo = E::from_f64(-30.0);
    if x > hi {
        x
    } else if x < lo {
        x.exp()
    } else {
        (x.exp() + E::ONE).ln()
    }
}

/// Inverse of [`softplus`]: the pre-activation producing a given positive value.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid<E: Element>(x: E) -> E {
    let hi = E::from_f64(30.0);
    let lo = E::from_f64(-30.0);
    if x > hi {
        E::ONE
    } else if x < lo {
        x.exp()
    } else {
        E::ONE / (E::ONE + (-x).exp())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
fn gelu<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let u = E::from_f64(GELU_C) * (x + E::from_f64(GELU_A) * x * x * x);
    half * x * (E::ONE + u.tanh())
}

#[inline]
fn gelu_deriv<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let u = E::from_f64(GELU_C) * (x + E::from_f64(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = E::from_f64(GELU_C) * (E::ONE + E::from_f64(3.0 * GELU_A) * x * x);
    half * (E::ONE + t) + half * x * (E::ONE - t * t) * du
}

/// `expm1(z)/z`, continuously extended to 1 at zero.
#[inline]
fn discretize_coef<E: Element>(z: E) -> E {
    if z == E::ZERO {
        E::ONE
    } else {
        z.expm1() / z
    }
}

/// Derivative of `expm1(z)/z`. Near zero the direct expression cancels
/// catastrophically, so a series takes over below a precision-dependent cut.
#[inline]
fn discretize_coef_deriv<E: Element>(z: E) -> E {
    let cut = if E::BITS == 32 { 0.25 } else { 0.02 };
    if z.abs().to_f64() < cut {
        // f'(z) = 1/2 + z/3 + z^2/8 + z^3/30 + z^4/144 + O(z^5)
        let z2 = z * z;
        E::from_f64(0.5)
            + z * E::from_f64(1.0 / 3.0)
            + z2 * E::from_f64(0.125)
            + z2 * z * E::from_f64(1.0 / 30.0)
            + z2 * z2 * E::from_f64(1.0 / 144.0)
    } else {
        (z.exp() * (z - E::ONE) + E::ONE) / (z * z)
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<E>, op: Op, needs_grad: bool) -> Id {
        debug_assert_eq!(numel(&shape), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by a tape op (shape {:?})",
            shape
        );
        self.nodes.push(Node {
            shape,
            data: Buf::Owned(data),
            op,
            needs_grad,
            grad: None,
        });
        Id(self.nodes.len() - 1)
    }

    /// Records a tensor as an input node, honoring its `requires_grad` flag.
    /// Binding the same storage twice returns the existing node.
    pub fn leaf(&mut self, t: &Tensor<E>) -> Id {
        self.bind(t, t.requires_grad)
    }

    /// Records a tensor as a constant input regardless of its flag.
    pub fn constant(&mut self, t: &Tensor<E>) -> Id {
        self.bind(t, false)
    }

    fn bind(&mut self, t: &Tensor<E>, needs_grad: bool) -> Id {
        let key = Arc::as_ptr(&t.arc()) as usize;
        if let Some(&id) = self.bound.get(&key) {
            assert_eq!(
                self.nodes[id.0].needs_grad, needs_grad,
                "tensor bound both as leaf and as constant on one tape"
            );
            return id;
        }
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: Buf::Shared(t.arc()),
            op: Op::Leaf,
            needs_grad,
            grad: None,
        });
        let id = Id(self.nodes.len() - 1);
        self.bound.insert(key, id);
        id
    }

    /// Node previously bound for this tensor's storage, if any.
    pub fn id_of(&self, t: &Tensor<E>) -> Option<Id> {
        self.bound.get(&(Arc::as_ptr(&t.arc()) as usize)).copied()
    }

    /// Accumulated gradient for a bound tensor, if one was produced.
    pub fn grad_of(&self, t: &Tensor<E>) -> Option<&[E]> {
        self.id_of(t).and_then(|id| self.grad(id))
    }

    /// Records a raw buffer as an input node.
    pub fn leaf_vec(&mut self, shape: &[usize], data: Vec<E>, requires_grad: bool) -> Id {
        assert_eq!(numel(shape), data.len(), "leaf shape/buffer mismatch");
        self.nodes.push(Node {
            shape: shape.to_vec(),
            data: Buf::Owned(data),
            op: Op::Leaf,
            needs_grad: requires_grad,
            grad: None,
        });
        Id(self.nodes.len() - 1)
    }

    pub fn val(&self, id: Id) -> &[E] {
        self.nodes[id.0].data.as_slice()
    }

    pub fn shape_of(&self, id: Id) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: Id) -> Option<&[E]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, id: Id) -> Option<Vec<E>> {
        self.nodes[id.0].grad.take()
    }

    /// Value of a single-element node as `f64`.
    pub fn scalar(&self, id: Id) -> f64 {
        let v = self.val(id);
        assert_eq!(v.len(), 1, "scalar() on node of shape {:?}", self.shape_of(id));
        v[0].to_f64()
    }

    fn needs(&self, id: Id) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- elementwise ----

    fn binary(&mut self, a: Id, b: Id, op_name: &str, f: impl Fn(E, E) -> E) -> (Vec<usize>, Vec<E>) {
        let (out_shape, plan) = broadcast_plan(self.shape_of(a), self.shape_of(b))
            .unwrap_or_else(|| {
                panic!(
                    "{op_name}: shapes {:?} and {:?} are not compatible (equal or trailing-singleton broadcast required)",
                    self.shape_of(a),
                    self.shape_of(b)
                )
            });
        let av = self.val(a);
        let bv = self.val(b);
        let n = numel(&out_shape);
        let mut out = Vec::with_capacity(n);
        match plan {
            Bcast::Equal => {
                for (&x, &y) in av.iter().zip(bv) {
                    out.push(f(x, y));
                }
            }
            Bcast::SmallIsB { tail } => {
                for (blk, &y) in bv.iter().enumerate() {
                    let base = blk * tail;
                    for &x in &av[base..base + tail] {
                        out.push(f(x, y));
                    }
                }
            }
            Bcast::SmallIsA { tail } => {
                for (blk, &x) in av.iter().enumerate() {
                    let base = blk * tail;
                    for &y in &bv[base..base + tail] {
                        out.push(f(x, y));
                    }
                }
            }
        }
        (out_shape, out)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let (shape, out) = self.binary(a, b, "add", |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(shape, out, Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        let (shape, out) = self.binary(a, b, "sub", |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(shape, out, Op::Sub { a, b }, ng)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        let (shape, out) = self.binary(a, b, "mul", |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(shape, out, Op::Mul { a, b }, ng)
    }

    pub fn div(&mut self, a: Id, b: Id) -> Id {
        let (shape, out) = self.binary(a, b, "div", |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        self.push(shape, out, Op::Div { a, b }, ng)
    }

    pub fn add_scalar(&mut self, a: Id, c: f64) -> Id {
        let cv = E::from_f64(c);
        let out: Vec<E> = self.val(a).iter().map(|&x| x + cv).collect();
        let ng = self.needs(a);
        self.push(self.shape_of(a).to_vec(), out, Op::AddScalar { a }, ng)
    }

    pub fn mul_scalar(&mut self, a: Id, c: f64) -> Id {
        let cv = E::from_f64(c);
        let out: Vec<E> = self.val(a).iter().map(|&x| x * cv).collect();
        let ng = self.needs(a);
        self.push(self.shape_of(a).to_vec(), out, Op::MulScalar { a, c }, ng)
    }

    fn row_op_check(&self, a: Id, v: Id, name: &str) -> usize {
        let ash = self.shape_of(a);
        let vsh = self.shape_of(v);
        assert!(
            vsh.len() == 1 && !ash.is_empty() && ash[ash.len() - 1] == vsh[0],
            "{name}: last axis of {:?} must match vector {:?}",
            ash,
            vsh
        );
        vsh[0]
    }

    /// `a + v` where `v` is broadcast across every leading axis of `a`.
    pub fn add_row(&mut self, a: Id, v: Id) -> Id {
        let n = self.row_op_check(a, v, "add_row");
        let av = self.val(a);
        let vv = self.val(v);
        let mut out = Vec::with_capacity(av.len());
        for row in av.chunks_exact(n) {
            for (x, y) in row.iter().zip(vv) {
                out.push(*x + *y);
            }
        }
        let ng = self.needs(a) || self.needs(v);
        self.push(self.shape_of(a).to_vec(), out, Op::AddRow { a, v }, ng)
    }

    /// `a * v` with `v` broadcast across leading axes.
    pub fn mul_row(&mut self, a: Id, v: Id) -> Id {
        let n = self.row_op_check(a, v, "mul_row");
        let av = self.val(a);
        let vv = self.val(v);
        let mut out = Vec::with_capacity(av.len());
        for row in av.chunks_exact(n) {
            for (x, y) in row.iter().zip(vv) {
                out.push(*x * *y);
            }
        }
        let ng = self.needs(a) || self.needs(v);
        self.push(self.shape_of(a).to_vec(), out, Op::MulRow { a, v }, ng)
    }

    fn unary(&mut self, a: Id, kind: UnaryKind) -> Id {
        let out: Vec<E> = self.val(a).iter().map(|&x| unary_eval(kind, x)).collect();
        let ng = self.needs(a);
        self.push(self.shape_of(a).to_vec(), out, Op::Unary { a, kind }, ng)
    }

    pub fn exp(&mut self, a: Id) -> Id {
        self.unary(a, UnaryKind::Exp)
    }
    pub fn log(&mut self, a: Id) -> Id {
        self.unary(a, UnaryKind::Log)
    }
    pub fn softplus(&mut self, a: Id) -> Id {
        self.unary(a, UnaryKind::Softplus)
    }
    pub fn sigmoid(&mut self, a: Id) -> Id {
        self.unary(a, UnaryKind::Sigmoid)
    }
    pub fn silu(&mut self, a: Id) -> Id {
        self.unary(a, UnaryKind::Silu)
    }
    pub fn gelu(&mut self, a: Id) -> Id {
        self.unary(a, UnaryKind::Gelu)
    }
    pub fn discretize_coef(&mut self, a: Id) -> Id {
        self.unary(a, UnaryKind::DiscretizeCoef)
    }

    // ---- contractions and reductions ----

    /// Matrix product over the last two axes; leading axes must match and
    /// batch the product.
    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let ash = self.shape_of(a).to_vec();
        let bsh = self.shape_of(b).to_vec();
        assert!(
            ash.len() >= 2 && bsh.len() == ash.len() && ash[..ash.len() - 2] == bsh[..bsh.len() - 2],
            "matmul: incompatible ranks/batching for {:?} x {:?}",
            ash,
            bsh
        );
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        assert_eq!(
            k, kb,
            "matmul: inner dims disagree for {:?} x {:?}",
            ash, bsh
        );
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut out = vec![E::ZERO; batch * m * n];
        let av = self.val(a);
        let bv = self.val(b);
        for bi in 0..batch {
            mm_nn(
                &av[bi * m * k..(bi + 1) * m * k],
                &bv[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = ash[..ash.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let ng = self.needs(a) || self.needs(b);
        self.push(shape, out, Op::Matmul { a, b }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Id) -> Id {
        let shape = self.shape_of(a).to_vec();
        let n = *shape.last().expect("softmax_last on rank-0 tensor");
        let mut out = self.val(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_row(row);
        }
        let ng = self.needs(a);
        self.push(shape, out, Op::SoftmaxLast { a }, ng)
    }

    /// Layer norm over the last axis; `affine` optionally supplies
    /// `(gamma, beta)` vectors of that axis length.
    pub fn layer_norm(&mut self, x: Id, affine: Option<(Id, Id)>, eps: f64) -> Id {
        let shape = self.shape_of(x).to_vec();
        let n = *shape.last().expect("layer_norm on rank-0 tensor");
        if let Some((g, b)) = affine {
            assert_eq!(self.shape_of(g), &[n], "layer_norm gamma shape");
            assert_eq!(self.shape_of(b), &[n], "layer_norm beta shape");
        }
        let xv = self.val(x);
        let mut out = vec![E::ZERO; xv.len()];
        for (xrow, orow) in xv.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            ln_row(xrow, orow, eps);
        }
        if let Some((g, b)) = affine {
            let gv = self.val(g);
            let bv = self.val(b);
            for row in out.chunks_exact_mut(n) {
                for ((o, &gm), &bt) in row.iter_mut().zip(gv).zip(bv) {
                    *o = *o * gm + bt;
                }
            }
        }
        let ng = self.needs(x)
            || affine.map_or(false, |(g, b)| self.needs(g) || self.needs(b));
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma: affine.map(|(g, _)| g),
                beta: affine.map(|(_, b)| b),
                eps,
            },
            ng,
        )
    }

    // ---- data movement ----

    pub fn reshape(&mut self, a: Id, shape: &[usize]) -> Id {
        assert_eq!(
            numel(shape),
            numel(self.shape_of(a)),
            "reshape {:?} -> {:?} changes element count",
            self.shape_of(a),
            shape
        );
        let out = self.val(a).to_vec();
        let ng = self.needs(a);
        self.push(shape.to_vec(), out, Op::Reshape { a }, ng)
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Id, ax0: usize, ax1: usize) -> Id {
        let shape = self.shape_of(a).to_vec();
        assert!(
            ax0 < shape.len() && ax1 < shape.len(),
            "transpose axes ({ax0},{ax1}) out of range for {:?}",
            shape
        );
        let (out_shape, out) = transpose_two(self.val(a), &shape, ax0, ax1);
        let ng = self.needs(a);
        self.push(out_shape, out, Op::Transpose { a, ax0, ax1 }, ng)
    }

    pub fn concat(&mut self, parts: &[Id], axis: usize) -> Id {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.shape_of(parts[0]).to_vec();
        assert!(axis < first.len(), "concat axis {axis} out of range for {:?}", first);
        let mut axis_total = 0usize;
        for &p in parts {
            let sh = self.shape_of(p);
            assert!(
                sh.len() == first.len()
                    && sh
                        .iter()
                        .enumerate()
                        .all(|(i, &d)| i == axis || d == first[i]),
                "concat: {:?} incompatible with {:?} along axis {axis}",
                sh,
                first
            );
            axis_total += sh[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let alen = self.shape_of(p)[axis];
                let pv = self.val(p);
                let base = o * alen * inner;
                out.extend_from_slice(&pv[base..base + alen * inner]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out_shape, out, Op::Concat { parts: parts.to_vec(), axis }, ng)
    }

    pub fn slice(&mut self, a: Id, axis: usize, start: usize, len: usize) -> Id {
        let shape = self.shape_of(a).to_vec();
        assert!(
            axis < shape.len() && start + len <= shape[axis],
            "slice [{start}..{}) on axis {axis} out of range for {:?}",
            start + len,
            shape
        );
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let alen = shape[axis];
        let av = self.val(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&av[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.needs(a);
        self.push(out_shape, out, Op::Slice { a, axis, start }, ng)
    }

    /// Inclusive cumulative sum along an axis.
    pub fn cumsum(&mut self, a: Id, axis: usize) -> Id {
        let shape = self.shape_of(a).to_vec();
        assert!(axis < shape.len(), "cumsum axis {axis} out of range for {:?}", shape);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let alen = shape[axis];
        let mut out = self.val(a).to_vec();
        for o in 0..outer {
            for s in 1..alen {
                let prev = (o * alen + s - 1) * inner;
                let cur = (o * alen + s) * inner;
                for i in 0..inner {
                    let pv = out[prev + i];
                    out[cur + i] += pv;
                }
            }
        }
        let ng = self.needs(a);
        self.push(shape, out, Op::Cumsum { a, axis }, ng)
    }

    pub fn sum_all(&mut self, a: Id) -> Id {
        let mut acc = E::ZERO;
        for &v in self.val(a) {
            acc += v;
        }
        let ng = self.needs(a);
        self.push(vec![1], vec![acc], Op::SumAll { a }, ng)
    }

    pub fn mean_all(&mut self, a: Id) -> Id {
        let n = self.val(a).len();
        let mut acc = E::ZERO;
        for &v in self.val(a) {
            acc += v;
        }
        let mean = acc / E::from_f64(n as f64);
        let ng = self.needs(a);
        self.push(vec![1], vec![mean], Op::MeanAll { a }, ng)
    }

    /// Mean squared difference, reduced over all elements.
    pub fn mse(&mut self, a: Id, b: Id) -> Id {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Selects rows of a 2-D tensor; duplicate indices are allowed and
    /// their gradients accumulate.
    pub fn gather_rows(&mut self, table: Id, idx: &[usize]) -> Id {
        let shape = self.shape_of(table).to_vec();
        assert_eq!(shape.len(), 2, "gather_rows expects a 2-D table, got {:?}", shape);
        let (rows, cols) = (shape[0], shape[1]);
        let tv = self.val(table);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < rows, "gather_rows index {i} out of range for {rows} rows");
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let ng = self.needs(table);
        self.push(
            vec![idx.len(), cols],
            out,
            Op::GatherRows { table, idx: idx.to_vec() },
            ng,
        )
    }

    /// `(C,H,W)` image to `(Ht*Wt, C*p*p)` tokens; tokens in row-major patch
    /// order, each token channel-major then row-major within its patch.
    pub fn patchify(&mut self, a: Id, p: usize) -> Id {
        let shape = self.shape_of(a).to_vec();
        assert_eq!(shape.len(), 3, "patchify expects (C,H,W), got {:?}", shape);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert!(
            p >= 1 && h % p == 0 && w % p == 0,
            "patch size {p} must divide spatial dims of {:?}",
            shape
        );
        let (ht, wt) = (h / p, w / p);
        let av = self.val(a);
        let mut out = vec![E::ZERO; c * h * w];
        patch_map(c, h, w, p, |img_idx, tok_idx| {
            out[tok_idx] = av[img_idx];
        });
        let ng = self.needs(a);
        self.push(
            vec![ht * wt, c * p * p],
            out,
            Op::Patchify { a, c, h, w, p },
            ng,
        )
    }

    /// Inverse of [`Tape::patchify`]: tokens back to a `(C,H,W)` image.
    pub fn unpatchify(&mut self, a: Id, c: usize, h: usize, w: usize, p: usize) -> Id {
        let shape = self.shape_of(a).to_vec();
        assert!(
            p >= 1 && h % p == 0 && w % p == 0,
            "patch size {p} must divide ({h},{w})"
        );
        assert_eq!(
            shape,
            vec![(h / p) * (w / p), c * p * p],
            "unpatchify: got {:?}, expected {:?} for (C,H,W,p)=({c},{h},{w},{p})",
            shape,
            vec![(h / p) * (w / p), c * p * p]
        );
        let av = self.val(a);
        let mut out = vec![E::ZERO; c * h * w];
        patch_map(c, h, w, p, |img_idx, tok_idx| {
            out[img_idx] = av[tok_idx];
        });
        let ng = self.needs(a);
        self.push(vec![c, h, w], out, Op::Unpatchify { a, c, h, w, p }, ng)
    }

    /// Linear state-space scan `h_t = abar_t h_{t-1} + bbar_t x_t^T`,
    /// `y_t = c_t^T h_t` with scalar per-step decay `abar_t = exp(log_a_t)`.
    ///
    /// `x: (L,P)`, `log_a: (L,)`, `b_bar: (L,N)`, `c_in: (L,N)` -> `(L,P)`.
    /// The forward runs in chunked state-space-duality form (dense matmuls
    /// inside chunks, recurrence between chunks); the backward is the
    /// adjoint of the recurrence.
    pub fn ssm_scan(&mut self, x: Id, log_a: Id, b_bar: Id, c_in: Id, chunk: usize) -> Id {
        let (l, p_dim) = {
            let s = self.shape_of(x);
            assert_eq!(s.len(), 2, "ssm_scan x must be (L,P), got {:?}", s);
            (s[0], s[1])
        };
        let n_dim = {
            let s = self.shape_of(b_bar);
            assert_eq!(s.len(), 2, "ssm_scan b_bar must be (L,N), got {:?}", s);
            assert_eq!(s[0], l, "ssm_scan b_bar rows {:?} != L={l}", s);
            s[1]
        };
        assert_eq!(
            self.shape_of(c_in),
            &[l, n_dim],
            "ssm_scan c_in shape {:?} != (L,N)=({l},{n_dim})",
            self.shape_of(c_in)
        );
        assert_eq!(
            self.shape_of(log_a),
            &[l],
            "ssm_scan log_a shape {:?} != (L,)=({l},)",
            self.shape_of(log_a)
        );
        assert!(chunk >= 1, "ssm_scan chunk size must be >= 1");
        let out = scan_chunked_raw(
            self.val(x),
            self.val(log_a),
            self.val(b_bar),
            self.val(c_in),
            l,
            n_dim,
            p_dim,
            chunk,
        );
        let ng = self.needs(x) || self.needs(log_a) || self.needs(b_bar) || self.needs(c_in);
        self.push(vec![l, p_dim], out, Op::SsmScan { x, log_a, b_bar, c_in }, ng)
    }

    // ---- backward ----

    fn grad_buf(&mut self, id: Id) -> &mut Vec<E> {
        let n = numel(&self.nodes[id.0].shape);
        self.nodes[id.0].grad.get_or_insert_with(|| vec![E::ZERO; n])
    }

    fn add_grad(&mut self, id: Id, delta: &[E]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let buf = self.grad_buf(id);
        for (g, d) in buf.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    /// Propagates adjoints from a scalar node back to every leaf that
    /// requires gradients. Leaf gradients accumulate across repeated calls.
    pub fn backward(&mut self, loss: Id) {
        assert_eq!(
            numel(&self.nodes[loss.0].shape),
            1,
            "backward target must be a scalar, got shape {:?}",
            self.nodes[loss.0].shape
        );
        if !self.nodes[loss.0].needs_grad {
            return;
        }
        {
            let buf = self.grad_buf(loss);
            buf[0] += E::ONE;
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // leaf grads stay in place for the caller
            }
            let g = self.nodes[i].grad.take().expect("grad present");
            self.backprop_node(Id(i), &g);
        }
    }

    fn backprop_node(&mut self, id: Id, g: &[E]) {
        // Split immutable reads of this node from mutable writes to inputs:
        // inputs always have smaller indices.
        let op = std::mem::replace(&mut self.nodes[id.0].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.bcast_grad(*a, *b, g, |_, _| (E::ONE, E::ONE));
            }
            Op::Sub { a, b } => {
                self.bcast_grad(*a, *b, g, |_, _| (E::ONE, -E::ONE));
            }
            Op::Mul { a, b } => {
                self.bcast_grad(*a, *b, g, |x, y| (y, x));
            }
            Op::Div { a, b } => {
                self.bcast_grad(*a, *b, g, |x, y| (E::ONE / y, -x / (y * y)));
            }
            Op::AddScalar { a } => self.add_grad(*a, g),
            Op::MulScalar { a, c } => {
                let cv = E::from_f64(*c);
                let da: Vec<E> = g.iter().map(|&v| v * cv).collect();
                self.add_grad(*a, &da);
            }
            Op::AddRow { a, v } => {
                self.add_grad(*a, g);
                if self.needs(*v) {
                    let n = self.shape_of(*v)[0];
                    let mut dv = vec![E::ZERO; n];
                    for row in g.chunks_exact(n) {
                        for (d, &gv) in dv.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.add_grad(*v, &dv);
                }
            }
            Op::MulRow { a, v } => {
                let n = self.shape_of(*v)[0];
                if self.needs(*a) {
                    let vv = self.val(*v).to_vec();
                    let mut da = Vec::with_capacity(g.len());
                    for row in g.chunks_exact(n) {
                        for (&gv, &val) in row.iter().zip(&vv) {
                            da.push(gv * val);
                        }
                    }
                    self.add_grad(*a, &da);
                }
                if self.needs(*v) {
                    let av = self.val(*a);
                    let mut dv = vec![E::ZERO; n];
                    for (grow, arow) in g.chunks_exact(n).zip(av.chunks_exact(n)) {
                        for ((d, &gv), &xv) in dv.iter_mut().zip(grow).zip(arow) {
                            *d += gv * xv;
                        }
                    }
                    self.add_grad(*v, &dv);
                }
            }
            Op::Unary { a, kind } => {
                let da: Vec<E> = self
                    .val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| gv * unary_deriv(*kind, x))
                    .collect();
                self.add_grad(*a, &da);
            }
            Op::Matmul { a, b } => {
                let ash = self.shape_of(*a).to_vec();
                let bsh = self.shape_of(*b).to_vec();
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let batch: usize = ash[..ash.len() - 2].iter().product();
                if self.needs(*a) {
                    let bv = self.val(*b);
                    let mut da = vec![E::ZERO; batch * m * k];
                    for bi in 0..batch {
                        mm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bi * k * n..(bi + 1) * k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.add_grad(*a, &da);
                }
                if self.needs(*b) {
                    let av = self.val(*a);
                    let mut db = vec![E::ZERO; batch * k * n];
                    for bi in 0..batch {
                        mm_tn(
                            &av[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.add_grad(*b, &db);
                }
            }
            Op::SoftmaxLast { a } => {
                let shape = self.shape_of(id).to_vec();
                let n = *shape.last().unwrap();
                let yv = self.val(id);
                let mut da = Vec::with_capacity(g.len());
                for (yrow, grow) in yv.chunks_exact(n).zip(g.chunks_exact(n)) {
                    let mut dot = E::ZERO;
                    for (&y, &gv) in yrow.iter().zip(grow) {
                        dot += y * gv;
                    }
                    for (&y, &gv) in yrow.iter().zip(grow) {
                        da.push(y * (gv - dot));
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.layer_norm_backward(*x, *gamma, *beta, *eps, g);
            }
            Op::Reshape { a } => self.add_grad(*a, g),
            Op::Transpose { a, ax0, ax1 } => {
                let out_shape = self.shape_of(id).to_vec();
                let (_, dg) = transpose_two(g, &out_shape, *ax0, *ax1);
                self.add_grad(*a, &dg);
            }
            Op::Concat { parts, axis } => {
                let first = self.shape_of(parts[0]).to_vec();
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[*axis + 1..].iter().product();
                let total_axis: usize = parts.iter().map(|&p| self.shape_of(p)[*axis]).sum();
                let mut offset = 0usize;
                for &p in parts {
                    let alen = self.shape_of(p)[*axis];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(outer * alen * inner);
                        for o in 0..outer {
                            let base = (o * total_axis + offset) * inner;
                            dp.extend_from_slice(&g[base..base + alen * inner]);
                        }
                        self.add_grad(p, &dp);
                    }
                    offset += alen;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.shape_of(*a).to_vec();
                let out_shape = self.shape_of(id).to_vec();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let alen = in_shape[*axis];
                let len = out_shape[*axis];
                let mut da = vec![E::ZERO; numel(&in_shape)];
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        da[dst + i] += g[src + i];
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::Cumsum { a, axis } => {
                let shape = self.shape_of(*a).to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let alen = shape[*axis];
                // d x_s = sum_{t >= s} d y_t: reverse cumulative sum.
                let mut da = g.to_vec();
                for o in 0..outer {
                    for s in (0..alen.saturating_sub(1)).rev() {
                        let cur = (o * alen + s) * inner;
                        let next = (o * alen + s + 1) * inner;
                        for i in 0..inner {
                            let nv = da[next + i];
                            da[cur + i] += nv;
                        }
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::SumAll { a } => {
                let da = vec![g[0]; numel(self.shape_of(*a))];
                self.add_grad(*a, &da);
            }
            Op::MeanAll { a } => {
                let n = numel(self.shape_of(*a));
                let da = vec![g[0] / E::from_f64(n as f64); n];
                self.add_grad(*a, &da);
            }
            Op::GatherRows { table, idx } => {
                if self.needs(*table) {
                    let cols = self.shape_of(*table)[1];
                    let mut dt = vec![E::ZERO; numel(self.shape_of(*table))];
                    for (row, &i) in idx.iter().enumerate() {
                        for cix in 0..cols {
                            dt[i * cols + cix] += g[row * cols + cix];
                        }
                    }
                    self.add_grad(*table, &dt);
                }
            }
            Op::Patchify { a, c, h, w, p } => {
                let mut da = vec![E::ZERO; c * h * w];
                patch_map(*c, *h, *w, *p, |img_idx, tok_idx| {
                    da[img_idx] = g[tok_idx];
                });
                self.add_grad(*a, &da);
            }
            Op::Unpatchify { a, c, h, w, p } => {
                let mut da = vec![E::ZERO; c * h * w];
                patch_map(*c, *h, *w, *p, |img_idx, tok_idx| {
                    da[tok_idx] = g[img_idx];
                });
                self.add_grad(*a, &da);
            }
            Op::SsmScan { x, log_a, b_bar, c_in } => {
                self.ssm_scan_backward(*x, *log_a, *b_bar, *c_in, g);
            }
        }
        self.nodes[id.0].op = op;
    }

    /// Shared backward for broadcasting binary ops: `d(a) = g * fa(a,b)`,
    /// `d(b) = g * fb(a,b)`, with the small side reduced over its tail.
    fn bcast_grad(&mut self, a: Id, b: Id, g: &[E], partials: impl Fn(E, E) -> (E, E)) {
        let (_, plan) = broadcast_plan(self.shape_of(a), self.shape_of(b)).expect("checked in forward");
        let av = self.val(a).to_vec();
        let bv = self.val(b).to_vec();
        let na = self.needs(a);
        let nb = self.needs(b);
        let mut da = if na { vec![E::ZERO; av.len()] } else { Vec::new() };
        let mut db = if nb { vec![E::ZERO; bv.len()] } else { Vec::new() };
        match plan {
            Bcast::Equal => {
                for i in 0..g.len() {
                    let (pa, pb) = partials(av[i], bv[i]);
                    if na {
                        da[i] += g[i] * pa;
                    }
                    if nb {
                        db[i] += g[i] * pb;
                    }
                }
            }
            Bcast::SmallIsB { tail } => {
                for blk in 0..bv.len() {
                    let y = bv[blk];
                    let base = blk * tail;
                    for t in 0..tail {
                        let (pa, pb) = partials(av[base + t], y);
                        if na {
                            da[base + t] += g[base + t] * pa;
                        }
                        if nb {
                            db[blk] += g[base + t] * pb;
                        }
                    }
                }
            }
            Bcast::SmallIsA { tail } => {
                for blk in 0..av.len() {
                    let x = av[blk];
                    let base = blk * tail;
                    for t in 0..tail {
                        let (pa, pb) = partials(x, bv[base + t]);
                        if na {
                            da[blk] += g[base + t] * pa;
                        }
                        if nb {
                            db[base + t] += g[base + t] * pb;
                        }
                    }
                }
            }
        }
        if na {
            self.add_grad(a, &da);
        }
        if nb {
            self.add_grad(b, &db);
        }
    }

    fn layer_norm_backward(
        &mut self,
        x: Id,
        gamma: Option<Id>,
        beta: Option<Id>,
        eps: f64,
        g: &[E],
    ) {
        let shape = self.shape_of(x).to_vec();
        let n = *shape.last().unwrap();
        let inv_n = E::ONE / E::from_f64(n as f64);
        let xv = self.val(x).to_vec();
        let gv = gamma.map(|gid| self.val(gid).to_vec());
        let mut dx = vec![E::ZERO; xv.len()];
        let mut dgamma = vec![E::ZERO; n];
        let mut dbeta = vec![E::ZERO; n];
        let mut xhat = vec![E::ZERO; n];
        for (row_i, (xrow, grow)) in xv.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
            let (_, inv_std) = ln_row(xrow, &mut xhat, eps);
            // dxhat = g * gamma (or g); then the standard two-moment correction.
            let mut sum_d = E::ZERO;
            let mut sum_dx = E::ZERO;
            let dxhat: Vec<E> = grow
                .iter()
                .enumerate()
                .map(|(j, &gj)| {
                    let d = match &gv {
                        Some(gamma_v) => gj * gamma_v[j],
                        None => gj,
                    };
                    sum_d += d;
                    sum_dx += d * xhat[j];
                    d
                })
                .collect();
            let drow = &mut dx[row_i * n..(row_i + 1) * n];
            for j in 0..n {
                drow[j] = inv_std * (dxhat[j] - inv_n * sum_d - xhat[j] * inv_n * sum_dx);
            }
            if gamma.is_some() {
                for j in 0..n {
                    dgamma[j] += grow[j] * xhat[j];
                    dbeta[j] += grow[j];
                }
            }
        }
        self.add_grad(x, &dx);
        if let Some(gid) = gamma {
            self.add_grad(gid, &dgamma);
        }
        if let Some(bid) = beta {
            self.add_grad(bid, &dbeta);
        }
    }

    fn ssm_scan_backward(&mut self, x: Id, log_a: Id, b_bar: Id, c_in: Id, g: &[E]) {
        let l = self.shape_of(x)[0];
        let p_dim = self.shape_of(x)[1];
        let n_dim = self.shape_of(b_bar)[1];
        let xv = self.val(x).to_vec();
        let lav = self.val(log_a).to_vec();
        let bv = self.val(b_bar).to_vec();
        let cv = self.val(c_in).to_vec();

        // Recompute the state trajectory; the adjoint needs h_t at every step.
        let mut h_all = vec![E::ZERO; l * n_dim * p_dim];
        {
            let mut h = vec![E::ZERO; n_dim * p_dim];
            for t in 0..l {
                let abar = lav[t].exp();
                let xrow = &xv[t * p_dim..(t + 1) * p_dim];
                let brow = &bv[t * n_dim..(t + 1) * n_dim];
                for ni in 0..n_dim {
                    let hrow = &mut h[ni * p_dim..(ni + 1) * p_dim];
                    let bn = brow[ni];
                    for (hv, &xvp) in hrow.iter_mut().zip(xrow) {
                        *hv = *hv * abar + bn * xvp;
                    }
                }
                h_all[t * n_dim * p_dim..(t + 1) * n_dim * p_dim].copy_from_slice(&h);
            }
        }

        let mut dx = vec![E::ZERO; l * p_dim];
        let mut dlog_a = vec![E::ZERO; l];
        let mut db = vec![E::ZERO; l * n_dim];
        let mut dc = vec![E::ZERO; l * n_dim];
        // lambda = dL/dh_t, maintained backwards in time.
        let mut lambda = vec![E::ZERO; n_dim * p_dim];
        for t in (0..l).rev() {
            if t + 1 < l {
                let abar_next = lav[t + 1].exp();
                for v in lambda.iter_mut() {
                    *v *= abar_next;
                }
            }
            let grow = &g[t * p_dim..(t + 1) * p_dim];
            let crow = &cv[t * n_dim..(t + 1) * n_dim];
            let hrow_full = &h_all[t * n_dim * p_dim..(t + 1) * n_dim * p_dim];
            for ni in 0..n_dim {
                let lam = &mut lambda[ni * p_dim..(ni + 1) * p_dim];
                let cn = crow[ni];
                let hn = &hrow_full[ni * p_dim..(ni + 1) * p_dim];
                let mut dcn = E::ZERO;
                for ((lv, &gp), &hp) in lam.iter_mut().zip(grow).zip(hn) {
                    *lv += cn * gp;
                    dcn += hp * gp;
                }
                dc[t * n_dim + ni] += dcn;
            }
            let xrow = &xv[t * p_dim..(t + 1) * p_dim];
            let brow = &bv[t * n_dim..(t + 1) * n_dim];
            let dxrow = &mut dx[t * p_dim..(t + 1) * p_dim];
            for ni in 0..n_dim {
                let lam = &lambda[ni * p_dim..(ni + 1) * p_dim];
                let bn = brow[ni];
                let mut dbn = E::ZERO;
                for ((dxp, &lv), &xp) in dxrow.iter_mut().zip(lam).zip(xrow) {
                    *dxp += bn * lv;
                    dbn += lv * xp;
                }
                db[t * n_dim + ni] += dbn;
            }
            if t > 0 {
                let hprev = &h_all[(t - 1) * n_dim * p_dim..t * n_dim * p_dim];
                let mut dabar = E::ZERO;
                for (&lv, &hp) in lambda.iter().zip(hprev) {
                    dabar += lv * hp;
                }
                dlog_a[t] += dabar * lav[t].exp();
            }
            // h_{-1} = 0, so dlog_a[0] through the state term is zero.
        }
        self.add_grad(x, &dx);
        self.add_grad(log_a, &dlog_a);
        self.add_grad(b_bar, &db);
        self.add_grad(c_in, &dc);
    }
}

/// Applies `f(image_index, token_index)` over the patch bijection between an
/// `(C,H,W)` image and its `(Ht*Wt, C*p*p)` token matrix.
fn patch_map(c: usize, h: usize, w: usize, p: usize, mut f: impl FnMut(usize, usize)) {
    let wt = w / p;
    let cp2 = c * p * p;
    for ti in 0..h / p {
        for tj in 0..wt {
            let tok_base = (ti * wt + tj) * cp2;
            for ci in 0..c {
                for dy in 0..p {
                    let img_row = ci * h * w + (ti * p + dy) * w + tj * p;
                    let tok_row = tok_base + ci * p * p + dy * p;
                    for dx in 0..p {
                        f(img_row + dx, tok_row + dx);
                    }
                }
            }
        }
    }
}

fn transpose_two<E: Element>(
    data: &[E],
    shape: &[usize],
    ax0: usize,
    ax1: usize,
) -> (Vec<usize>, Vec<E>) {
    if ax0 == ax1 {
        return (shape.to_vec(), data.to_vec());
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    let out_strides = strides(&out_shape);
    let rank = shape.len();
    let n = data.len();
    let mut out = vec![E::ZERO; n];
    let mut idx = vec![0usize; rank];
    for &v in data.iter().take(n) {
        // idx is the input multi-index; map through the axis swap.
        let mut off = 0usize;
        for ax in 0..rank {
            let out_ax = if ax == ax0 {
                ax1
            } else if ax == ax1 {
                ax0
            } else {
                ax
            };
            off += idx[ax] * out_strides[out_ax];
        }
        out[off] = v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

/// Chunked scan forward in state-space-duality form: within each chunk the
/// output is two dense matmuls against decay-weighted coefficient matrices;
/// the running state crosses chunk boundaries through the recurrence.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_chunked_raw<E: Element>(
    x: &[E],
    log_a: &[E],
    b_bar: &[E],
    c_in: &[E],
    l: usize,
    n_dim: usize,
    p_dim: usize,
    chunk: usize,
) -> Vec<E> {
    let mut y = vec![E::ZERO; l * p_dim];
    let mut h = vec![E::ZERO; n_dim * p_dim];
    let mut s0 = 0usize;
    while s0 < l {
        let q = chunk.min(l - s0);
        // Inclusive cumulative log-decay within the chunk.
        let mut cl = vec![E::ZERO; q];
        let mut acc = E::ZERO;
        for i in 0..q {
            acc += log_a[s0 + i];
            cl[i] = acc;
        }
        let x_chunk = &x[s0 * p_dim..(s0 + q) * p_dim];
        let b_chunk = &b_bar[s0 * n_dim..(s0 + q) * n_dim];
        let c_chunk = &c_in[s0 * n_dim..(s0 + q) * n_dim];
        let y_chunk = &mut y[s0 * p_dim..(s0 + q) * p_dim];

        // Carry-in state: y_i += (c_i * exp(cl_i)) . h
        let mut cmod = vec![E::ZERO; q * n_dim];
        for i in 0..q {
            let scale = cl[i].exp();
            for ni in 0..n_dim {
                cmod[i * n_dim + ni] = c_chunk[i * n_dim + ni] * scale;
            }
        }
        mm_nn(&cmod, &h, y_chunk, q, n_dim, p_dim);

        // Intra-chunk: masked decay kernel M[i][j] = exp(cl_i - cl_j) c_i.b_j.
        let mut gmat = vec![E::ZERO; q * q];
        mm_nt(c_chunk, b_chunk, &mut gmat, q, n_dim, q);
        for i in 0..q {
            for j in 0..q {
                let m = &mut gmat[i * q + j];
                if j > i {
                    *m = E::ZERO;
                } else {
                    *m *= (cl[i] - cl[j]).exp();
                }
            }
        }
        mm_nn(&gmat, x_chunk, y_chunk, q, q, p_dim);

        // State update: h = exp(cl_last) h + sum_j exp(cl_last - cl_j) b_j x_j^T.
        let last = cl[q - 1];
        let decay = last.exp();
        for v in h.iter_mut() {
            *v *= decay;
        }
        let mut bmod = vec![E::ZERO; q * n_dim];
        for j in 0..q {
            let scale = (last - cl[j]).exp();
            for ni in 0..n_dim {
                bmod[j * n_dim + ni] = b_chunk[j * n_dim + ni] * scale;
            }
        }
        mm_tn(&bmod, x_chunk, &mut h, q, n_dim, p_dim);
        s0 += q;
    }
    y
}
