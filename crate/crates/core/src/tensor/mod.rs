//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! Tensors are value-semantic, row-major buffers of `f32` or `f64`. The
//! element type is chosen once per computation (32-bit for training and
//! benchmarks, 64-bit for verification) by instantiating the generic
//! structures with the corresponding [`Element`]; it is not a per-tensor
//! property. Gradients are produced by recording ops on a [`Tape`]
//! (`tape::Tape`) and walking it backwards.

mod kernels;
mod tape;

pub use kernels::{mm_nn, mm_nt, mm_tn, ln_row, softmax_row};
pub use tape::{sigmoid, softplus, softplus_inv, Id, Tape, UnaryKind};
pub(crate) use tape::scan_chunked_raw;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Scalar type a tensor computation runs in.
///
/// Implemented for `f32` and `f64`. All math the engine needs is routed
/// through this trait so every layer, loss and kernel is written once and
/// monomorphized per precision.
pub trait Element:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Number of bits in the representation (32 or 64).
    const BITS: u32;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;

    fn exp(self) -> Self;
    fn expm1(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn minv(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_element {
    ($t:ty, $bits:expr) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const BITS: u32 = $bits;

            #[inline(always)]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn from_f32(x: f32) -> Self {
                x as $t
            }
            #[inline(always)]
            fn to_f32(self) -> f32 {
                self as f32
            }

            #[inline(always)]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn expm1(self) -> Self {
                self.exp_m1()
            }
            #[inline(always)]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline(always)]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline(always)]
            fn maxv(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline(always)]
            fn minv(self, other: Self) -> Self {
                if self < other {
                    self
                } else {
                    other
                }
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_element!(f32, 32);
impl_element!(f64, 64);

/// Number of elements described by a shape.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A dense row-major tensor value.
///
/// The buffer is shared (`Arc`) so cloning a tensor or recording it as a
/// tape leaf never copies data; mutation goes through [`Tensor::data_mut`]
/// which unshares on demand. `grad` is only populated on parameters after
/// a backward pass has been reduced into them.
#[derive(Clone, Debug)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    pub requires_grad: bool,
    pub grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    /// Builds a tensor from a shape and matching buffer.
    ///
    /// Panics if the buffer length does not equal the shape's element count.
    pub fn new(shape: &[usize], data: Vec<E>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "tensor shape {:?} needs {} elements, buffer has {}",
            shape,
            numel(shape),
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape, vec![E::ZERO; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::new(shape, vec![E::from_f64(value); numel(shape)])
    }

    pub fn from_f64s(shape: &[usize], values: &[f64]) -> Self {
        Tensor::new(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(E::from_f64(std_normal(rng) * std));
        }
        Tensor::new(shape, data)
    }

    /// Marks the tensor as a trainable parameter.
    pub fn param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable view of the buffer, unsharing it if aliased.
    pub fn data_mut(&mut self) -> &mut [E] {
        let v: &mut Vec<E> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    pub(crate) fn arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }

    /// Adds `delta` into the accumulated gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[E]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        let grad = self
            .grad
            .get_or_insert_with(|| vec![E::ZERO; numel(&self.shape)]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        assert_eq!(
            numel(shape),
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        let mut t = self.clone();
        t.shape = shape.to_vec();
        t
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.to_f32()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.to_f64().abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard normal draw via Box-Muller, identical across element types.
pub fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    // gen_range never returns 1.0, so shift to (0, 1] for the log.
    let u1: f64 = 1.0 - rng.gen_range(0.0..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fills a buffer with standard normal draws.
pub fn fill_normal<E: Element>(out: &mut [E], rng: &mut ChaCha8Rng) {
    for v in out.iter_mut() {
        *v = E::from_f64(std_normal(rng));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tensor_roundtrips_shape_and_data() {
        let t = Tensor::<f64>::from_f64s(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.data()[4], 5.0);
    }

    #[test]
    #[should_panic(expected = "needs 6 elements")]
    fn tensor_rejects_wrong_buffer_length() {
        let _ = Tensor::<f64>::new(&[2, 3], vec![0.0; 5]);
    }

    #[test]
    fn clone_shares_until_mutated() {
        let mut a = Tensor::<f32>::zeros(&[4]);
        let b = a.clone();
        a.data_mut()[0] = 7.0;
        assert_eq!(a.data()[0], 7.0);
        assert_eq!(b.data()[0], 0.0);
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let mut t = Tensor::<f64>::zeros(&[3]).param();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[0.5, 0.5, 0.5]);
        assert_eq!(t.grad.as_deref(), Some(&[1.5, 2.5, 3.5][..]));
    }

    #[test]
    fn normal_draws_are_deterministic_per_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..8).map(|_| std_normal(&mut r1)).collect();
        let b: Vec<f64> = (0..8).map(|_| std_normal(&mut r2)).collect();
        assert_eq!(a, b);
    }
}
