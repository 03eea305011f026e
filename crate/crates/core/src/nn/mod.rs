//! Transformer-side building blocks: linear/attention/feed-forward layers,
//! timestep conditioning with per-block scale/shift/gate modulation, patch
//! embedding, and the two positional-encoding variants.
//!
//! Attention projections carry no bias, so a single-token sequence reduces
//! exactly to `W_o W_v x`. Conditioning follows the gate-zero convention:
//! each block's modulation MLP is zero-initialized, which makes every block
//! an identity map on the residual stream at init.

use rand_chacha::ChaCha8Rng;

use crate::params::{join, ParamSet};
use crate::tensor::{ln_row, mm_nn, mm_nt, sigmoid, softmax_row, Element, Id, Tape, Tensor};

/// Init standard deviation for all projections in this module.
const INIT_STD: f64 = 0.02;

/// Epsilon inside layer-norm denominators.
pub const LN_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Dense layer `y = x W (+ b)`.
#[derive(Clone, Debug)]
pub struct Linear<E: Element> {
    pub w: Tensor<E>,
    pub b: Option<Tensor<E>>,
}

impl<E: Element> Linear<E> {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Tensor::randn(&[d_in, d_out], INIT_STD, rng).param(),
            b: bias.then(|| Tensor::zeros(&[d_out]).param()),
        }
    }

    /// All-zero weights (and bias); used where a head must start silent.
    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            w: Tensor::zeros(&[d_in, d_out]).param(),
            b: bias.then(|| Tensor::zeros(&[d_out]).param()),
        }
    }

    pub fn forward(&self, t: &mut Tape<E>, x: Id) -> Id {
        let w = t.leaf(&self.w);
        let y = t.matmul(x, w);
        match &self.b {
            Some(b) => {
                let b = t.leaf(b);
                t.add_row(y, b)
            }
            None => y,
        }
    }

    /// `x (rows, d_in)` row-major.
    pub fn infer(&self, x: &[E], rows: usize) -> Vec<E> {
        let d_in = self.w.shape()[0];
        let d_out = self.w.shape()[1];
        assert_eq!(x.len(), rows * d_in, "linear input length mismatch");
        let mut y = vec![E::ZERO; rows * d_out];
        mm_nn(x, self.w.data(), &mut y, rows, d_in, d_out);
        if let Some(b) = &self.b {
            for r in 0..rows {
                for (j, &bv) in b.data().iter().enumerate() {
                    y[r * d_out + j] += bv;
                }
            }
        }
        y
    }
}

impl<E: Element> ParamSet<E> for Linear<E> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<E>)>) {
        out.push((join(prefix, "w"), &self.w));
        if let Some(b) = &self.b {
            out.push((join(prefix, "b"), b));
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<E>)>) {
        out.push((join(prefix, "w"), &mut self.w));
        if let Some(b) = &mut self.b {
            out.push((join(prefix, "b"), b));
        }
    }
}

// ---------------------------------------------------------------------------
// Self-attention
// ---------------------------------------------------------------------------

/// Full (non-causal) multi-head self-attention, bias-free projections.
#[derive(Clone, Debug)]
pub struct AttentionLayer<E: Element> {
    pub d: usize,
    pub heads: usize,
    pub w_q: Tensor<E>,
    pub w_k: Tensor<E>,
    pub w_v: Tensor<E>,
    pub w_o: Tensor<E>,
}

impl<E: Element> AttentionLayer<E> {
    pub fn new(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
        AttentionLayer {
            d,
            heads,
            w_q: Tensor::randn(&[d, d], INIT_STD, rng).param(),
            w_k: Tensor::randn(&[d, d], INIT_STD, rng).param(),
            w_v: Tensor::randn(&[d, d], INIT_STD, rng).param(),
            w_o: Tensor::randn(&[d, d], INIT_STD, rng).param(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn forward(&self, t: &mut Tape<E>, x: Id) -> Id {
        assert_eq!(t.shape_of(x)[1], self.d, "attention input dim mismatch");
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let w_q = t.leaf(&self.w_q);
        let w_k = t.leaf(&self.w_k);
        let w_v = t.leaf(&self.w_v);
        let w_o = t.leaf(&self.w_o);
        let q = t.matmul(x, w_q);
        let k = t.matmul(x, w_k);
        let v = t.matmul(x, w_v);
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice(q, 1, h * dh, dh);
            let kh = t.slice(k, 1, h * dh, dh);
            let vh = t.slice(v, 1, h * dh, dh);
            let kt = t.transpose(kh, 0, 1);
            let scores = t.matmul(qh, kt);
            let scaled = t.mul_scalar(scores, scale);
            let probs = t.softmax_last(scaled);
            head_outs.push(t.matmul(probs, vh));
        }
        let cat = t.concat(&head_outs, 1);
        t.matmul(cat, w_o)
    }

    /// Tape-free forward with O(L) working memory: attention rows are
    /// computed one query at a time, never materializing the L x L matrix.
    pub fn infer(&self, x: &[E], l: usize) -> Vec<E> {
        let d = self.d;
        assert_eq!(x.len(), l * d, "attention input length mismatch");
        let dh = self.head_dim();
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let mut q = vec![E::ZERO; l * d];
        let mut k = vec![E::ZERO; l * d];
        let mut v = vec![E::ZERO; l * d];
        mm_nn(x, self.w_q.data(), &mut q, l, d, d);
        mm_nn(x, self.w_k.data(), &mut k, l, d, d);
        mm_nn(x, self.w_v.data(), &mut v, l, d, d);

        let mut cat = vec![E::ZERO; l * d];
        let mut kh = vec![E::ZERO; l * dh];
        let mut vh = vec![E::ZERO; l * dh];
        let mut scores = vec![E::ZERO; l];
        for h in 0..self.heads {
            for r in 0..l {
                kh[r * dh..(r + 1) * dh].copy_from_slice(&k[r * d + h * dh..r * d + (h + 1) * dh]);
                vh[r * dh..(r + 1) * dh].copy_from_slice(&v[r * d + h * dh..r * d + (h + 1) * dh]);
            }
            for r in 0..l {
                let qrow = &q[r * d + h * dh..r * d + (h + 1) * dh];
                scores.iter_mut().for_each(|s| *s = E::ZERO);
                mm_nt(qrow, &kh, &mut scores, 1, dh, l);
                for s in scores.iter_mut() {
                    *s *= scale;
                }
                softmax_row(&mut scores);
                let out = &mut cat[r * d + h * dh..r * d + (h + 1) * dh];
                mm_nn(&scores, &vh, out, 1, l, dh);
            }
        }
        let mut y = vec![E::ZERO; l * d];
        mm_nn(&cat, self.w_o.data(), &mut y, l, d, d);
        y
    }
}

impl<E: Element> ParamSet<E> for AttentionLayer<E> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<E>)>) {
        out.push((join(prefix, "w_q"), &self.w_q));
        out.push((join(prefix, "w_k"), &self.w_k));
        out.push((join(prefix, "w_v"), &self.w_v));
        out.push((join(prefix, "w_o"), &self.w_o));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<E>)>) {
        out.push((join(prefix, "w_q"), &mut self.w_q));
        out.push((join(prefix, "w_k"), &mut self.w_k));
        out.push((join(prefix, "w_v"), &mut self.w_v));
        out.push((join(prefix, "w_o"), &mut self.w_o));
    }
}

// ---------------------------------------------------------------------------
// Cross-attention
// ---------------------------------------------------------------------------

/// Multi-head attention with queries from the token stream and keys/values
/// from a context sequence (the text embedding). Output length equals the
/// query length regardless of context length.
#[derive(Clone, Debug)]
pub struct CrossAttentionLayer<E: Element> {
    pub d: usize,
    pub d_ctx: usize,
    pub heads: usize,
    pub w_q: Tensor<E>,
    pub w_k: Tensor<E>,
    pub w_v: Tensor<E>,
    pub w_o: Tensor<E>,
}

impl<E: Element> CrossAttentionLayer<E> {
    pub fn new(d: usize, d_ctx: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
        CrossAttentionLayer {
            d,
            d_ctx,
            heads,
            w_q: Tensor::randn(&[d, d], INIT_STD, rng).param(),
            w_k: Tensor::randn(&[d_ctx, d], INIT_STD, rng).param(),
            w_v: Tensor::randn(&[d_ctx, d], INIT_STD, rng).param(),
            w_o: Tensor::randn(&[d, d], INIT_STD, rng).param(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn forward(&self, t: &mut Tape<E>, x: Id, ctx: Id) -> Id {
        assert_eq!(t.shape_of(x)[1], self.d, "cross-attention query dim mismatch");
        assert_eq!(t.shape_of(ctx)[1], self.d_ctx, "cross-attention context dim mismatch");
        assert!(t.shape_of(ctx)[0] >= 1, "cross-attention requires a non-empty context");
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let w_q = t.leaf(&self.w_q);
        let w_k = t.leaf(&self.w_k);
        let w_v = t.leaf(&self.w_v);
        let w_o = t.leaf(&self.w_o);
        let q = t.matmul(x, w_q);
        let k = t.matmul(ctx, w_k);
        let v = t.matmul(ctx, w_v);
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice(q, 1, h * dh, dh);
            let kh = t.slice(k, 1, h * dh, dh);
            let vh = t.slice(v, 1, h * dh, dh);
            let kt = t.transpose(kh, 0, 1);
            let scores = t.matmul(qh, kt);
            let scaled = t.mul_scalar(scores, scale);
            let probs = t.softmax_last(scaled);
            head_outs.push(t.matmul(probs, vh));
        }
        let cat = t.concat(&head_outs, 1);
        t.matmul(cat, w_o)
    }

    pub fn infer(&self, x: &[E], l: usize, ctx: &[E], l_ctx: usize) -> Vec<E> {
        let d = self.d;
        assert_eq!(x.len(), l * d, "cross-attention query length mismatch");
        assert_eq!(ctx.len(), l_ctx * self.d_ctx, "cross-attention context length mismatch");
        assert!(l_ctx >= 1, "cross-attention requires a non-empty context");
        let dh = self.head_dim();
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let mut q = vec![E::ZERO; l * d];
        let mut k = vec![E::ZERO; l_ctx * d];
        let mut v = vec![E::ZERO; l_ctx * d];
        mm_nn(x, self.w_q.data(), &mut q, l, d, d);
        mm_nn(ctx, self.w_k.data(), &mut k, l_ctx, self.d_ctx, d);
        mm_nn(ctx, self.w_v.data(), &mut v, l_ctx, self.d_ctx, d);

        let mut cat = vec![E::ZERO; l * d];
        let mut kh = vec![E::ZERO; l_ctx * dh];
        let mut vh = vec![E::ZERO; l_ctx * dh];
        let mut scores = vec![E::ZERO; l_ctx];
        for h in 0..self.heads {
            for r in 0..l_ctx {
                kh[r * dh..(r + 1) * dh].copy_from_slice(&k[r * d + h * dh..r * d + (h + 1) * dh]);
                vh[r * dh..(r + 1) * dh].copy_from_slice(&v[r * d + h * dh..r * d + (h + 1) * dh]);
            }
            for r in 0..l {
                let qrow = &q[r * d + h * dh..r * d + (h + 1) * dh];
                scores.iter_mut().for_each(|s| *s = E::ZERO);
                mm_nt(qrow, &kh, &mut scores, 1, dh, l_ctx);
                for s in scores.iter_mut() {
                    *s *= scale;
                }
                softmax_row(&mut scores);
                let out = &mut cat[r * d + h * dh..r * d + (h + 1) * dh];
                mm_nn(&scores, &vh, out, 1, l_ctx, dh);
            }
        }
        let mut y = vec![E::ZERO; l * d];
        mm_nn(&cat, self.w_o.data(), &mut y, l, d, d);
        y
    }
}

impl<E: Element> ParamSet<E> for CrossAttentionLayer<E> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<E>)>) {
        out.push((join(prefix, "w_q"), &self.w_q));
        out.push((join(prefix, "w_k"), &self.w_k));
        out.push((join(prefix, "w_v"), &self.w_v));
        out.push((join(prefix, "w_o"), &self.w_o));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<E>)>) {
        out.push((join(prefix, "w_q"), &mut self.w_q));
        out.push((join(prefix, "w_k"), &mut self.w_k));
        out.push((join(prefix, "w_v"), &mut self.w_v));
        out.push((join(prefix, "w_o"), &mut self.w_o));
    }
}

// ---------------------------------------------------------------------------
// Feed-forward
// ---------------------------------------------------------------------------

/// Two-layer MLP with expansion 4 and gelu.
#[derive(Clone, Debug)]
pub struct Ffn<E: Element> {
    pub lin1: Linear<E>,
    pub lin2: Linear<E>,
}

impl<E: Element> Ffn<E> {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Ffn {
            lin1: Linear::new(d, 4 * d, true, rng),
            lin2: Linear::new(4 * d, d, true, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape<E>, x: Id) -> Id {
        let h = self.lin1.forward(t, x);
        let g = t.gelu(h);
        self.lin2.forward(t, g)
    }

    pub fn infer(&self, x: &[E], rows: usize) -> Vec<E> {
        let mut h = self.lin1.infer(x, rows);
        for v in h.iter_mut() {
            *v = gelu_scalar(*v);
        }
        self.lin2.infer(&h, rows)
    }
}

/// Tanh-form gelu matching the tape op.
fn gelu_scalar<E: Element>(x: E) -> E {
    let c = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = E::from_f64(0.044_715);
    let half = E::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (E::ONE + inner.tanh())
}

impl<E: Element> ParamSet<E> for Ffn<E> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<E>)>) {
        self.lin1.visit(&join(prefix, "lin1"), out);
        self.lin2.visit(&join(prefix, "lin2"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<E>)>) {
        self.lin1.visit_mut(&join(prefix, "lin1"), out);
        self.lin2.visit_mut(&join(prefix, "lin2"), out);
    }
}

// ---------------------------------------------------------------------------
// Timestep conditioning
// ---------------------------------------------------------------------------

/// Sinusoidal embedding of the diffusion step followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct TimestepEmbedder<E: Element> {
    pub d: usize,
    pub lin1: Linear<E>,
    pub lin2: Linear<E>,
}

impl<E: Element> TimestepEmbedder<E> {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(d % 2 == 0, "timestep embedding dim {d} must be even");
        TimestepEmbedder {
            d,
            lin1: Linear::new(d, d, true, rng),
            lin2: Linear::new(d, d, true, rng),
        }
    }

    /// Interleaved `[sin, cos]` pairs over a geometric frequency ladder.
    pub fn sinusoid(&self, step: f64) -> Vec<f64> {
        let pairs = self.d / 2;
        let mut out = Vec::with_capacity(self.d);
        for k in 0..pairs {
            let freq = (10_000.0_f64).powf(-(k as f64) / pairs as f64);
            out.push((step * freq).sin());
            out.push((step * freq).cos());
        }
        out
    }

    /// Embeds one timestep; returns a `(1, d)` node.
    pub fn forward(&self, t: &mut Tape<E>, step: f64) -> Id {
        let sinu = self.sinusoid(step);
        let data: Vec<E> = sinu.iter().map(|&v| E::from_f64(v)).collect();
        let x = t.leaf_vec(&[1, self.d], data, false);
        let h = self.lin1.forward(t, x);
        let g = t.silu(h);
        self.lin2.forward(t, g)
    }

    pub fn infer(&self, step: f64) -> Vec<E> {
        let sinu: Vec<E> = self.sinusoid(step).iter().map(|&v| E::from_f64(v)).collect();
        let mut h = self.lin1.infer(&sinu, 1);
        for v in h.iter_mut() {
            *v = *v * sigmoid(*v);
        }
        self.lin2.infer(&h, 1)
    }
}

impl<E: Element> ParamSet<E> for TimestepEmbedder<E> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<E>)>) {
        self.lin1.visit(&join(prefix, "lin1"), out);
        self.lin2.visit(&join(prefix, "lin2"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<E>)>) {
        self.lin1.visit_mut(&join(prefix, "lin1"), out);
        self.lin2.visit_mut(&join(prefix, "lin2"), out);
    }
}

/// Per-block conditioning head: `silu(t_embed)` through a zero-initialized
/// linear layer emitting three `(scale, shift, gate)` triplets — one per
/// sub-layer. Zero init makes all scales/shifts/gates start at zero, so the
/// block starts as an identity on the residual stream.
#[derive(Clone, Debug)]
pub struct Modulation<E: Element> {
    pub d: usize,
    pub lin: Linear<E>,
}

/// Number of `(scale, shift, gate)` triplets a block consumes.
pub const MOD_TRIPLETS: usize = 3;

impl<E: Element> Modulation<E> {
    pub fn new(d: usize) -> Self {
        Modulation { d, lin: Linear::zeros(d, 9 * d, true) }
    }

    /// Returns nine `(d,)` vectors `[a0, b0, g0, a1, b1, g1, a2, b2, g2]`.
    pub fn forward(&self, t: &mut Tape<E>, t_embed: Id) -> Vec<Id> {
        let s = t.silu(t_embed);
        let m = self.lin.forward(t, s); // (1, 9d)
        let flat = t.reshape(m, &[9 * self.d]);
        (0..9).map(|i| t.slice(flat, 0, i * self.d, self.d)).collect()
    }

    pub fn infer(&self, t_embed: &[E]) -> Vec<Vec<E>> {
        let s: Vec<E> = t_embed.iter().map(|&v| v * sigmoid(v)).collect();
        let m = self.lin.infer(&s, 1);
        (0..9).map(|i| m[i * self.d..(i + 1) * self.d].to_vec()).collect()
    }
}

impl<E: Element> ParamSet<E> for Modulation<E> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<E>)>) {
        self.lin.visit(&join(prefix, "mod"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<E>)>) {
        self.lin.visit_mut(&join(prefix, "mod"), out);
    }
}

/// `(1 + scale) * LN(x) + shift`, layer-norm without learned affine.
pub fn modulate<E: Element>(t: &mut Tape<E>, x: Id, scale: Id, shift: Id) -> Id {
    let ln = t.layer_norm(x, None, LN_EPS);
    let one_plus = t.add_scalar(scale, 1.0);
    let scaled = t.mul_row(ln, one_plus);
    t.add_row(scaled, shift)
}

/// Tape-free counterpart of [`modulate`]; `x (rows, d)` is normalized per
/// row then scaled and shifted.
pub fn modulate_infer<E: Element>(x: &mut [E], rows: usize, d: usize, scale: &[E], shift: &[E]) {
    let mut tmp = vec![E::ZERO; d];
    for r in 0..rows {
        let row = &mut x[r * d..(r + 1) * d];
        tmp.copy_from_slice(row);
        ln_row(&tmp, row, LN_EPS);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (E::ONE + scale[j]) * *v + shift[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Positional encoding
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosEncVariant {
    /// Integer grid coordinates; tied to the grid the model trained on.
    Standard,
    /// Coordinates centered on the grid and divided by the long-edge length,
    /// so the center of any grid maps to (0,0) and same-long-edge grids
    /// agree wherever their center offsets coincide.
    CenteredNormalized,
}

/// Fixed span multiplying centered-normalized coordinates inside the phase,
/// so the base grid covers the same phase range as integer coordinates
/// would. Resolution-independent by construction.
pub const CENTER_PE_SPAN: f64 = 16.0;

/// Per-axis coordinate arrays for the centered-normalized map: value
/// `(idx - (n-1)/2) / long_edge`, long edge shared by both axes.
pub fn centered_coords(ht: usize, wt: usize) -> (Vec<f64>, Vec<f64>) {
    let long = ht.max(wt) as f64;
    let center = |n: usize| -> Vec<f64> {
        let mid = (n as f64 - 1.0) / 2.0;
        (0..n).map(|i| (i as f64 - mid) / long).collect()
    };
    (center(ht), center(wt))
}

/// 2-D sine-cosine positional table `(ht*wt, d)`; the first `d/2` channels
/// encode the row coordinate, the rest the column coordinate, each as
/// interleaved `[sin, cos]` pairs over a geometric frequency ladder.
pub fn positional_encoding<E: Element>(
    ht: usize,
    wt: usize,
    d: usize,
    variant: PosEncVariant,
) -> Tensor<E> {
    assert!(d % 4 == 0, "positional encoding needs d divisible by 4, got {d}");
    let (rows, cols) = match variant {
        PosEncVariant::Standard => (
            (0..ht).map(|i| i as f64).collect::<Vec<_>>(),
            (0..wt).map(|i| i as f64).collect::<Vec<_>>(),
        ),
        PosEncVariant::CenteredNormalized => {
            let (r, c) = centered_coords(ht, wt);
            (
                r.iter().map(|v| v * CENTER_PE_SPAN).collect(),
                c.iter().map(|v| v * CENTER_PE_SPAN).collect(),
            )
        }
    };
    let half = d / 2;
    let pairs = half / 2;
    let axis_embed = |coord: f64, out: &mut Vec<E>| {
        for k in 0..pairs {
            let freq = (10_000.0_f64).powf(-(k as f64) / pairs as f64);
            out.push(E::from_f64((coord * freq).sin()));
            out.push(E::from_f64((coord * freq).cos()));
        }
    };
    let mut data = Vec::with_capacity(ht * wt * d);
    for r in 0..ht {
        for c in 0..wt {
            axis_embed(rows[r], &mut data);
            axis_embed(cols[c], &mut data);
        }
    }
    Tensor::new(&[ht * wt, d], data)
}

// ---------------------------------------------------------------------------
// Patch embedding and output head
// ---------------------------------------------------------------------------

/// Projects `p*p` latent patches (channel-major within each patch) to model
/// width.
#[derive(Clone, Debug)]
pub struct PatchEmbed<E: Element> {
    pub channels: usize,
    pub p: usize,
    pub lin: Linear<E>,
}

impl<E: Element> PatchEmbed<E> {
    pub fn new(channels: usize, p: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        PatchEmbed { channels, p, lin: Linear::new(channels * p * p, d, true, rng) }
    }

    /// `latent (C,H,W)` on the tape; returns tokens `(H/p * W/p, d)`.
    pub fn forward(&self, t: &mut Tape<E>, latent: Id) -> Id {
        let tokens = t.patchify(latent, self.p);
        self.lin.forward(t, tokens)
    }

    pub fn infer(&self, latent: &[E], h: usize, w: usize) -> Vec<E> {
        let c = self.channels;
        let p = self.p;
        assert!(h % p == 0 && w % p == 0, "latent {h}x{w} not divisible by patch {p}");
        let (gh, gw) = (h / p, w / p);
        let k = c * p * p;
        let mut tokens = vec![E::ZERO; gh * gw * k];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let tok = (y / p) * gw + (x / p);
                    let within = ci * p * p + (y % p) * p + (x % p);
                    tokens[tok * k + within] = latent[ci * h * w + y * w + x];
                }
            }
        }
        self.lin.infer(&tokens, gh * gw)
    }
}

impl<E: Element> ParamSet<E> for PatchEmbed<E> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<E>)>) {
        self.lin.visit(&join(prefix, "patch"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<E>)>) {
        self.lin.visit_mut(&join(prefix, "patch"), out);
    }
}

/// Final projection back to latent space: non-affine layer norm followed by
/// a zero-initialized linear layer, so an untrained model emits exactly
/// zero.
#[derive(Clone, Debug)]
pub struct FinalHead<E: Element> {
    pub channels: usize,
    pub p: usize,
    pub lin: Linear<E>,
}

impl<E: Element> FinalHead<E> {
    pub fn new(channels: usize, p: usize, d: usize) -> Self {
        FinalHead { channels, p, lin: Linear::zeros(d, channels * p * p, true) }
    }

    /// Tokens `(L, d)` back to a latent `(C, H, W)` node.
    pub fn forward(&self, t: &mut Tape<E>, tokens: Id, h: usize, w: usize) -> Id {
        let ln = t.layer_norm(tokens, None, LN_EPS);
        let proj = self.lin.forward(t, ln);
        t.unpatchify(proj, self.channels, h, w, self.p)
    }

    pub fn infer(&self, tokens: &[E], l: usize, h: usize, w: usize) -> Vec<E> {
        let d = self.lin.w.shape()[0];
        let mut normed = vec![E::ZERO; l * d];
        for r in 0..l {
            ln_row(&tokens[r * d..(r + 1) * d], &mut normed[r * d..(r + 1) * d], LN_EPS);
        }
        let proj = self.lin.infer(&normed, l);
        let c = self.channels;
        let p = self.p;
        let (gh, gw) = (h / p, w / p);
        assert_eq!(l, gh * gw, "token count does not match target grid");
        let k = c * p * p;
        let mut latent = vec![E::ZERO; c * h * w];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let tok = (y / p) * gw + (x / p);
                    let within = ci * p * p + (y % p) * p + (x % p);
                    latent[ci * h * w + y * w + x] = proj[tok * k + within];
                }
            }
        }
        latent
    }
}

impl<E: Element> ParamSet<E> for FinalHead<E> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<E>)>) {
        self.lin.visit(&join(prefix, "head"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<E>)>) {
        self.lin.visit_mut(&join(prefix, "head"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_token_attention_is_output_of_value_path() {
        let mut r = rng(1);
        let attn: AttentionLayer<f64> = AttentionLayer::new(8, 2, &mut r);
        let x = Tensor::<f64>::randn(&[1, 8], 1.0, &mut r);
        let y = attn.infer(x.data(), 1);
        // Softmax over a single key is 1, so y = x W_v W_o.
        let mut v = vec![0.0; 8];
        mm_nn(x.data(), attn.w_v.data(), &mut v, 1, 8, 8);
        let mut expect = vec![0.0; 8];
        mm_nn(&v, attn.w_o.data(), &mut expect, 1, 8, 8);
        for i in 0..8 {
            assert!((y[i] - expect[i]).abs() < 1e-12, "channel {i}");
        }
    }

    #[test]
    fn attention_matches_direct_formula() {
        let (l, d, heads) = (8, 16, 4);
        let dh = d / heads;
        let mut r = rng(2);
        let attn: AttentionLayer<f64> = AttentionLayer::new(d, heads, &mut r);
        let x = Tensor::<f64>::randn(&[l, d], 1.0, &mut r);
        let y = attn.infer(x.data(), l);

        // Literal evaluation: per head softmax(q k^T / sqrt(dh)) v, then W_o.
        let proj = |w: &Tensor<f64>| -> Vec<f64> {
            let mut out = vec![0.0; l * d];
            mm_nn(x.data(), w.data(), &mut out, l, d, d);
            out
        };
        let (q, k, v) = (proj(&attn.w_q), proj(&attn.w_k), proj(&attn.w_v));
        let mut cat = vec![0.0; l * d];
        for h in 0..heads {
            for i in 0..l {
                let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
                let mut logits = vec![0.0; l];
                for (j, lg) in logits.iter_mut().enumerate() {
                    let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
                    *lg = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()
                        / (dh as f64).sqrt();
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..l {
                    let w = exps[j] / z;
                    for c in 0..dh {
                        cat[i * d + h * dh + c] += w * v[j * d + h * dh + c];
                    }
                }
            }
        }
        let mut expect = vec![0.0; l * d];
        mm_nn(&cat, attn.w_o.data(), &mut expect, l, d, d);
        for i in 0..l * d {
            assert!(
                (y[i] - expect[i]).abs() < 1e-6,
                "position {i}: {} vs {}",
                y[i],
                expect[i]
            );
        }
    }

    #[test]
    fn attention_tape_matches_infer() {
        let mut r = rng(3);
        let attn: AttentionLayer<f64> = AttentionLayer::new(12, 3, &mut r);
        let x = Tensor::<f64>::randn(&[5, 12], 1.0, &mut r);
        let mut tape = Tape::new();
        let xid = tape.constant(&x);
        let yid = attn.forward(&mut tape, xid);
        let y_inf = attn.infer(x.data(), 5);
        for (a, b) in tape.val(yid).iter().zip(&y_inf) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let (l, d) = (6, 8);
        let mut r = rng(4);
        let attn: AttentionLayer<f64> = AttentionLayer::new(d, 2, &mut r);
        let x = Tensor::<f64>::randn(&[l, d], 1.0, &mut r);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut xp = vec![0.0; l * d];
        for (row, &src) in perm.iter().enumerate() {
            xp[row * d..(row + 1) * d].copy_from_slice(&x.data()[src * d..(src + 1) * d]);
        }
        let y = attn.infer(x.data(), l);
        let yp = attn.infer(&xp, l);
        for (row, &src) in perm.iter().enumerate() {
            for c in 0..d {
                assert!(
                    (yp[row * d + c] - y[src * d + c]).abs() < 1e-12,
                    "row {row} channel {c}"
                );
            }
        }
    }

    #[test]
    fn duplicate_tokens_produce_duplicate_outputs() {
        let d = 8;
        let mut r = rng(5);
        let attn: AttentionLayer<f64> = AttentionLayer::new(d, 2, &mut r);
        let row = Tensor::<f64>::randn(&[1, d], 1.0, &mut r);
        let mut x = row.data().to_vec();
        x.extend_from_slice(row.data());
        x.extend_from_slice(row.data());
        let y = attn.infer(&x, 3);
        for i in 0..d {
            assert!((y[i] - y[d + i]).abs() < 1e-12);
            assert!((y[i] - y[2 * d + i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_single_context_token() {
        let (d, dc) = (8, 6);
        let mut r = rng(6);
        let ca: CrossAttentionLayer<f64> = CrossAttentionLayer::new(d, dc, 2, &mut r);
        let x = Tensor::<f64>::randn(&[4, d], 1.0, &mut r);
        let ctx = Tensor::<f64>::randn(&[1, dc], 1.0, &mut r);
        let y = ca.infer(x.data(), 4, ctx.data(), 1);
        // One key: every query attends fully to it, so all rows equal
        // ctx W_v W_o.
        let mut v = vec![0.0; d];
        mm_nn(ctx.data(), ca.w_v.data(), &mut v, 1, dc, d);
        let mut expect = vec![0.0; d];
        mm_nn(&v, ca.w_o.data(), &mut expect, 1, d, d);
        for row in 0..4 {
            for i in 0..d {
                assert!((y[row * d + i] - expect[i]).abs() < 1e-12, "row {row}");
            }
        }
    }

    #[test]
    fn cross_attention_invariant_to_context_permutation() {
        let (d, dc, lc) = (8, 6, 5);
        let mut r = rng(7);
        let ca: CrossAttentionLayer<f64> = CrossAttentionLayer::new(d, dc, 2, &mut r);
        let x = Tensor::<f64>::randn(&[3, d], 1.0, &mut r);
        let ctx = Tensor::<f64>::randn(&[lc, dc], 1.0, &mut r);
        let perm = [4usize, 2, 0, 3, 1];
        let mut cp = vec![0.0; lc * dc];
        for (row, &src) in perm.iter().enumerate() {
            cp[row * dc..(row + 1) * dc].copy_from_slice(&ctx.data()[src * dc..(src + 1) * dc]);
        }
        let y = ca.infer(x.data(), 3, ctx.data(), lc);
        let yp = ca.infer(x.data(), 3, &cp, lc);
        for i in 0..3 * d {
            assert!((y[i] - yp[i]).abs() < 1e-12, "position {i}");
        }
    }

    #[test]
    #[should_panic(expected = "non-empty context")]
    fn cross_attention_rejects_empty_context() {
        let mut r = rng(8);
        let ca: CrossAttentionLayer<f64> = CrossAttentionLayer::new(8, 6, 2, &mut r);
        let x = vec![0.0; 2 * 8];
        ca.infer(&x, 2, &[], 0);
    }

    #[test]
    fn cross_attention_tape_matches_infer() {
        let mut r = rng(9);
        let ca: CrossAttentionLayer<f64> = CrossAttentionLayer::new(8, 6, 2, &mut r);
        let x = Tensor::<f64>::randn(&[4, 8], 1.0, &mut r);
        let ctx = Tensor::<f64>::randn(&[3, 6], 1.0, &mut r);
        let mut tape = Tape::new();
        let xid = tape.constant(&x);
        let cid = tape.constant(&ctx);
        let yid = ca.forward(&mut tape, xid, cid);
        let y_inf = ca.infer(x.data(), 4, ctx.data(), 3);
        for (a, b) in tape.val(yid).iter().zip(&y_inf) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ffn_tape_matches_infer() {
        let mut r = rng(10);
        let ffn: Ffn<f64> = Ffn::new(6, &mut r);
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut r);
        let mut tape = Tape::new();
        let xid = tape.constant(&x);
        let yid = ffn.forward(&mut tape, xid);
        let y_inf = ffn.infer(x.data(), 4);
        for (a, b) in tape.val(yid).iter().zip(&y_inf) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn modulation_starts_all_zero() {
        let d = 6;
        let m: Modulation<f64> = Modulation::new(d);
        let t_embed = vec![0.3; d];
        let vecs = m.infer(&t_embed);
        assert_eq!(vecs.len(), 9);
        for v in &vecs {
            assert!(v.iter().all(|&x| x == 0.0), "zero-init modulation must emit zeros");
        }
    }

    #[test]
    fn modulate_with_zero_scale_shift_is_plain_layer_norm() {
        let (l, d) = (3, 8);
        let mut r = rng(11);
        let x = Tensor::<f64>::randn(&[l, d], 2.0, &mut r);
        let mut data = x.data().to_vec();
        modulate_infer(&mut data, l, d, &vec![0.0; d], &vec![0.0; d]);
        let mut expect = vec![0.0; l * d];
        for row in 0..l {
            ln_row(
                &x.data()[row * d..(row + 1) * d],
                &mut expect[row * d..(row + 1) * d],
                LN_EPS,
            );
        }
        for i in 0..l * d {
            assert!((data[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn modulate_tape_matches_infer() {
        let (l, d) = (4, 6);
        let mut r = rng(12);
        let x = Tensor::<f64>::randn(&[l, d], 1.0, &mut r);
        let scale = Tensor::<f64>::randn(&[d], 0.5, &mut r);
        let shift = Tensor::<f64>::randn(&[d], 0.5, &mut r);
        let mut tape = Tape::new();
        let xid = tape.constant(&x);
        let sc = tape.constant(&scale);
        let sh = tape.constant(&shift);
        let out = modulate(&mut tape, xid, sc, sh);
        let mut data = x.data().to_vec();
        modulate_infer(&mut data, l, d, scale.data(), shift.data());
        for (a, b) in tape.val(out).iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn timestep_embedder_is_deterministic() {
        let mut r = rng(13);
        let emb: TimestepEmbedder<f64> = TimestepEmbedder::new(8, &mut r);
        let a = emb.infer(17.0);
        let b = emb.infer(17.0);
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        let c = emb.infer(18.0);
        assert!(a.iter().zip(&c).any(|(x, y)| x != y), "steps must embed differently");
    }

    #[test]
    fn center_token_embedding_alternates_zero_one() {
        for (ht, wt) in [(3, 3), (5, 7), (1, 1)] {
            let pe: Tensor<f64> =
                positional_encoding(ht, wt, 8, PosEncVariant::CenteredNormalized);
            let center = (ht / 2) * wt + wt / 2;
            let row = &pe.data()[center * 8..(center + 1) * 8];
            for (i, &v) in row.iter().enumerate() {
                let expect = if i % 2 == 0 { 0.0 } else { 1.0 };
                assert!(
                    (v - expect).abs() < 1e-12,
                    "grid {ht}x{wt} channel {i}: {v}"
                );
            }
        }
    }

    #[test]
    fn standard_origin_token_is_zero_coordinate() {
        let pe: Tensor<f64> = positional_encoding(4, 4, 8, PosEncVariant::Standard);
        let row = &pe.data()[..8];
        for (i, &v) in row.iter().enumerate() {
            let expect = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert!((v - expect).abs() < 1e-12, "channel {i}");
        }
    }

    #[test]
    fn all_positional_values_within_unit_interval() {
        for variant in [PosEncVariant::Standard, PosEncVariant::CenteredNormalized] {
            let pe: Tensor<f64> = positional_encoding(6, 9, 16, variant);
            for &v in pe.data() {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn centered_coordinate_range_is_resolution_invariant() {
        let max_abs = |n: usize| -> f64 {
            let (r, _) = centered_coords(n, n);
            r.iter().cloned().fold(0.0, |m, v| m.max(v.abs()))
        };
        let m4 = max_abs(4);
        let m8 = max_abs(8);
        assert!((m4 - 0.375).abs() < 1e-12, "4x4 max |coord| {m4}");
        assert!((m8 - 0.4375).abs() < 1e-12, "8x8 max |coord| {m8}");
        for n in [4usize, 8, 16] {
            let (r, _) = centered_coords(n, n);
            assert!(r.iter().all(|&v| (-0.5..0.5).contains(&v)));
        }
    }

    #[test]
    fn same_long_edge_grids_share_center_offset_embeddings() {
        let d = 8;
        let a: Tensor<f64> = positional_encoding(3, 5, d, PosEncVariant::CenteredNormalized);
        let b: Tensor<f64> = positional_encoding(5, 5, d, PosEncVariant::CenteredNormalized);
        // Offsets from center shared by both grids: rows -1..=1, cols -2..=2.
        for dr in -1i64..=1 {
            for dc in -2i64..=2 {
                let ra = (1 + dr) as usize * 5 + (2 + dc) as usize;
                let rb = (2 + dr) as usize * 5 + (2 + dc) as usize;
                for ch in 0..d {
                    let va = a.data()[ra * d + ch];
                    let vb = b.data()[rb * d + ch];
                    assert!(
                        (va - vb).abs() < 1e-12,
                        "offset ({dr},{dc}) channel {ch}: {va} vs {vb}"
                    );
                }
            }
        }
    }

    #[test]
    #[should_panic(expected = "divisible by 4")]
    fn positional_encoding_rejects_odd_width() {
        let _: Tensor<f64> = positional_encoding(2, 2, 6, PosEncVariant::Standard);
    }

    #[test]
    fn patch_embed_and_head_roundtrip_shapes() {
        let mut r = rng(14);
        let (c, h, w, p, d) = (3, 4, 6, 2, 8);
        let pe: PatchEmbed<f64> = PatchEmbed::new(c, p, d, &mut r);
        let latent = Tensor::<f64>::randn(&[c, h, w], 1.0, &mut r);
        let tokens = pe.infer(latent.data(), h, w);
        assert_eq!(tokens.len(), (h / p) * (w / p) * d);

        let head: FinalHead<f64> = FinalHead::new(c, p, d);
        let out = head.infer(&tokens, (h / p) * (w / p), h, w);
        assert_eq!(out.len(), c * h * w);
        assert!(out.iter().all(|&v| v == 0.0), "zero-init head must emit zeros");
    }

    #[test]
    fn patch_embed_tape_matches_infer() {
        let mut r = rng(15);
        let (c, h, w, p, d) = (2, 4, 4, 2, 8);
        let pe: PatchEmbed<f64> = PatchEmbed::new(c, p, d, &mut r);
        let latent = Tensor::<f64>::randn(&[c, h, w], 1.0, &mut r);
        let mut tape = Tape::new();
        let lid = tape.constant(&latent);
        let tid = pe.forward(&mut tape, lid);
        let t_inf = pe.infer(latent.data(), h, w);
        for (a, b) in tape.val(tid).iter().zip(&t_inf) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn final_head_tape_matches_infer_after_training_signal() {
        let mut r = rng(16);
        let (c, h, w, p, d) = (2, 4, 4, 2, 8);
        let mut head: FinalHead<f64> = FinalHead::new(c, p, d);
        // Give the head nonzero weights so the parity check is non-trivial.
        head.lin.w = Tensor::randn(&[d, c * p * p], 0.1, &mut r).param();
        let l = (h / p) * (w / p);
        let tokens = Tensor::<f64>::randn(&[l, d], 1.0, &mut r);
        let mut tape = Tape::new();
        let tid = tape.constant(&tokens);
        let out = head.forward(&mut tape, tid, h, w);
        let out_inf = head.infer(tokens.data(), l, h, w);
        for (a, b) in tape.val(out).iter().zip(&out_inf) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
