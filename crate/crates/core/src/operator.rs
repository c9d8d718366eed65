//! Operator handles consumed by the autodiff graph and the solvers.
//!
//! Operators act on row-major 2D grids. A [`LinearOperator`] supplies its
//! transpose; a [`ForwardOperator`] is a possibly non-linear map that exposes
//! its Fréchet derivative, the adjoint of that derivative, and the second
//! order term needed to back-propagate through `(x, y) ↦ [∂A(x)]*(y)`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::{norm, Scalar};

pub trait LinearOperator<T: Scalar>: Send + Sync {
    fn domain(&self) -> [usize; 2];
    fn range(&self) -> [usize; 2];
    /// `y = A x`; `y` is overwritten.
    fn apply(&self, x: &[T], y: &mut [T]);
    /// `x = Aᵀ y`; `x` is overwritten.
    fn apply_adjoint(&self, y: &[T], x: &mut [T]);
}

pub trait ForwardOperator<T: Scalar>: Send + Sync {
    fn domain(&self) -> [usize; 2];
    fn range(&self) -> [usize; 2];
    /// `out = A(x)`.
    fn apply(&self, x: &[T], out: &mut [T]);
    /// `out = ∂A(x)(dx)`.
    fn derivative(&self, x: &[T], dx: &[T], out: &mut [T]);
    /// `out = [∂A(x)]*(dy)`.
    fn derivative_adjoint(&self, x: &[T], dy: &[T], out: &mut [T]);
    /// `out = ∇ₓ ⟨dy, ∂A(x)(v)⟩`, the adjoint of `x ↦ [∂A(x)]*(dy)` applied to `v`.
    /// Identically zero for linear operators.
    fn second_order_adjoint(&self, x: &[T], dy: &[T], v: &[T], out: &mut [T]);

    fn is_linear(&self) -> bool {
        false
    }
}

pub fn grid_len(shape: [usize; 2]) -> usize {
    shape[0] * shape[1]
}

/// Lifts a linear operator into a [`ForwardOperator`].
#[derive(Clone, Debug)]
pub struct Linear<L>(pub L);

impl<T: Scalar, L: LinearOperator<T>> ForwardOperator<T> for Linear<L> {
    fn domain(&self) -> [usize; 2] {
        self.0.domain()
    }

    fn range(&self) -> [usize; 2] {
        self.0.range()
    }

    fn apply(&self, x: &[T], out: &mut [T]) {
        self.0.apply(x, out)
    }

    fn derivative(&self, _x: &[T], dx: &[T], out: &mut [T]) {
        self.0.apply(dx, out)
    }

    fn derivative_adjoint(&self, _x: &[T], dy: &[T], out: &mut [T]) {
        self.0.apply_adjoint(dy, out)
    }

    fn second_order_adjoint(&self, _x: &[T], _dy: &[T], _v: &[T], out: &mut [T]) {
        out.fill(T::zero());
    }

    fn is_linear(&self) -> bool {
        true
    }
}

impl<T: Scalar, L: LinearOperator<T> + ?Sized> LinearOperator<T> for Arc<L> {
    fn domain(&self) -> [usize; 2] {
        (**self).domain()
    }

    fn range(&self) -> [usize; 2] {
        (**self).range()
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        (**self).apply(x, y)
    }

    fn apply_adjoint(&self, y: &[T], x: &mut [T]) {
        (**self).apply_adjoint(y, x)
    }
}

impl<T: Scalar, O: ForwardOperator<T> + ?Sized> ForwardOperator<T> for Arc<O> {
    fn domain(&self) -> [usize; 2] {
        (**self).domain()
    }

    fn range(&self) -> [usize; 2] {
        (**self).range()
    }

    fn apply(&self, x: &[T], out: &mut [T]) {
        (**self).apply(x, out)
    }

    fn derivative(&self, x: &[T], dx: &[T], out: &mut [T]) {
        (**self).derivative(x, dx, out)
    }

    fn derivative_adjoint(&self, x: &[T], dy: &[T], out: &mut [T]) {
        (**self).derivative_adjoint(x, dy, out)
    }

    fn second_order_adjoint(&self, x: &[T], dy: &[T], v: &[T], out: &mut [T]) {
        (**self).second_order_adjoint(x, dy, v, out)
    }

    fn is_linear(&self) -> bool {
        (**self).is_linear()
    }
}

/// `x ↦ factor · x` on a fixed grid.
#[derive(Clone, Debug)]
pub struct ScaledIdentity {
    pub shape: [usize; 2],
    pub factor: f64,
}

impl ScaledIdentity {
    pub fn new(shape: [usize; 2], factor: f64) -> Self {
        Self { shape, factor }
    }
}

impl<T: Scalar> LinearOperator<T> for ScaledIdentity {
    fn domain(&self) -> [usize; 2] {
        self.shape
    }

    fn range(&self) -> [usize; 2] {
        self.shape
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        let c = T::of(self.factor);
        for (o, &v) in y.iter_mut().zip(x) {
            *o = c * v;
        }
    }

    fn apply_adjoint(&self, y: &[T], x: &mut [T]) {
        self.apply(y, x)
    }
}

/// `factor · A`, keeping the transpose matched.
#[derive(Clone, Debug)]
pub struct Scaled<L> {
    pub inner: L,
    pub factor: f64,
}

impl<T: Scalar, L: LinearOperator<T>> LinearOperator<T> for Scaled<L> {
    fn domain(&self) -> [usize; 2] {
        self.inner.domain()
    }

    fn range(&self) -> [usize; 2] {
        self.inner.range()
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        self.inner.apply(x, y);
        let c = T::of(self.factor);
        y.iter_mut().for_each(|v| *v *= c);
    }

    fn apply_adjoint(&self, y: &[T], x: &mut [T]) {
        self.inner.apply_adjoint(y, x);
        let c = T::of(self.factor);
        x.iter_mut().for_each(|v| *v *= c);
    }
}

/// Call counters of a [`Counted`] operator.
#[derive(Debug, Default)]
pub struct CallCounts {
    pub apply: AtomicUsize,
    pub derivative: AtomicUsize,
    pub derivative_adjoint: AtomicUsize,
    pub second_order: AtomicUsize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallSnapshot {
    pub apply: usize,
    pub derivative: usize,
    pub derivative_adjoint: usize,
    pub second_order: usize,
}

impl CallCounts {
    pub fn snapshot(&self) -> CallSnapshot {
        CallSnapshot {
            apply: self.apply.load(Ordering::Relaxed),
            derivative: self.derivative.load(Ordering::Relaxed),
            derivative_adjoint: self.derivative_adjoint.load(Ordering::Relaxed),
            second_order: self.second_order.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.apply.store(0, Ordering::Relaxed);
        self.derivative.store(0, Ordering::Relaxed);
        self.derivative_adjoint.store(0, Ordering::Relaxed);
        self.second_order.store(0, Ordering::Relaxed);
    }
}

/// Instrumented wrapper counting every operator evaluation.
pub struct Counted<O> {
    pub inner: O,
    pub counts: Arc<CallCounts>,
}

impl<O> Counted<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            counts: Arc::new(CallCounts::default()),
        }
    }
}

impl<T: Scalar, O: ForwardOperator<T>> ForwardOperator<T> for Counted<O> {
    fn domain(&self) -> [usize; 2] {
        self.inner.domain()
    }

    fn range(&self) -> [usize; 2] {
        self.inner.range()
    }

    fn apply(&self, x: &[T], out: &mut [T]) {
        self.counts.apply.fetch_add(1, Ordering::Relaxed);
        self.inner.apply(x, out)
    }

    fn derivative(&self, x: &[T], dx: &[T], out: &mut [T]) {
        self.counts.derivative.fetch_add(1, Ordering::Relaxed);
        self.inner.derivative(x, dx, out)
    }

    fn derivative_adjoint(&self, x: &[T], dy: &[T], out: &mut [T]) {
        self.counts.derivative_adjoint.fetch_add(1, Ordering::Relaxed);
        self.inner.derivative_adjoint(x, dy, out)
    }

    fn second_order_adjoint(&self, x: &[T], dy: &[T], v: &[T], out: &mut [T]) {
        self.counts.second_order.fetch_add(1, Ordering::Relaxed);
        self.inner.second_order_adjoint(x, dy, v, out)
    }

    fn is_linear(&self) -> bool {
        self.inner.is_linear()
    }
}

/// The derivative `∂A(point)` of a forward operator, frozen as a linear map.
pub struct Linearized<'a, T, O: ?Sized> {
    pub op: &'a O,
    pub point: Vec<T>,
}

impl<T: Scalar, O: ForwardOperator<T> + ?Sized> LinearOperator<T> for Linearized<'_, T, O> {
    fn domain(&self) -> [usize; 2] {
        self.op.domain()
    }

    fn range(&self) -> [usize; 2] {
        self.op.range()
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        self.op.derivative(&self.point, x, y)
    }

    fn apply_adjoint(&self, y: &[T], x: &mut [T]) {
        self.op.derivative_adjoint(&self.point, y, x)
    }
}

/// Largest singular value of `op` by power iteration on `AᵀA`.
///
/// The start vector is drawn from a ChaCha8 stream seeded with `seed`, so the
/// estimate is a deterministic function of its inputs.
pub fn power_method_norm<T: Scalar, L: LinearOperator<T> + ?Sized>(
    op: &L,
    iterations: usize,
    seed: u64,
) -> f64 {
    let n = grid_len(op.domain());
    let m = grid_len(op.range());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<T> = (0..n).map(|_| T::of(rng.random::<f64>() - 0.5)).collect();
    let mut y = vec![T::zero(); m];
    let mut z = vec![T::zero(); n];
    let mut estimate = 0.0;
    let nx = norm(&x);
    if nx == 0.0 {
        return 0.0;
    }
    let inv = T::of(1.0 / nx);
    x.iter_mut().for_each(|v| *v *= inv);
    for _ in 0..iterations.max(1) {
        op.apply(&x, &mut y);
        op.apply_adjoint(&y, &mut z);
        let nz = norm(&z);
        if nz == 0.0 {
            return 0.0;
        }
        estimate = nz.sqrt();
        let inv = T::of(1.0 / nz);
        for (xi, &zi) in x.iter_mut().zip(&z) {
            *xi = zi * inv;
        }
    }
    estimate
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_method_identity_and_scaling() {
        let id = ScaledIdentity::new([4, 5], 1.0);
        assert!((power_method_norm::<f64, _>(&id, 20, 7) - 1.0).abs() < 1e-6);
        let two = ScaledIdentity::new([4, 5], 2.0);
        assert!((power_method_norm::<f64, _>(&two, 20, 7) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn counted_tracks_calls() {
        let op = Counted::new(Linear(ScaledIdentity::new([1, 3], 2.0)));
        let x = [1.0f64, 2.0, 3.0];
        let mut y = [0.0; 3];
        ForwardOperator::apply(&op, &x, &mut y);
        op.derivative_adjoint(&x, &x, &mut y);
        op.derivative_adjoint(&x, &x, &mut y);
        let s = op.counts.snapshot();
        assert_eq!((s.apply, s.derivative_adjoint, s.derivative), (1, 2, 0));
        assert_eq!(y, [2.0, 4.0, 6.0]);
    }
}
