// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scalar abstraction and the reduction helpers shared by every kernel.

use std::fmt::{Debug, Display};

use ndarray::{ArrayView1, NdFloat};
use num_traits::FromPrimitive;

/// Floating-point element type used throughout the crate.
///
/// Implemented for `f32` and `f64`. Traces are stored as `f32` on disk and
/// are usually widened to `f64` before scoring.
pub trait Scalar: NdFloat + FromPrimitive + Default + Debug + Display + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Below this norm a cosine is treated as undefined.
pub const NORM_EPS: f64 = 1e-12;

const PAIRWISE_BLOCK: usize = 8;

/// Converts an `f64` constant into `T`.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 constant representable in scalar type")
}

/// Widens (or narrows) a scalar to `f64`.
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().expect("scalar representable as f64")
}

/// Pairwise (cascade) summation of `f(0) + ... + f(n-1)`.
pub fn pairwise_sum_by<T: Scalar>(n: usize, f: &impl Fn(usize) -> T) -> T {
    fn rec<T: Scalar>(lo: usize, hi: usize, f: &impl Fn(usize) -> T) -> T {
        let len = hi - lo;
        if len <= PAIRWISE_BLOCK {
            let mut acc = T::zero();
            for i in lo..hi {
                acc += f(i);
            }
            acc
        } else {
            let mid = lo + len / 2;
            rec(lo, mid, f) + rec(mid, hi, f)
        }
    }
    rec(0, n, f)
}

pub fn pairwise_sum<T: Scalar>(xs: &[T]) -> T {
    pairwise_sum_by(xs.len(), &|i| xs[i])
}

pub fn dot<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    debug_assert_eq!(a.len(), b.len());
    pairwise_sum_by(a.len(), &|i| a[i] * b[i])
}

pub fn norm<T: Scalar>(a: ArrayView1<'_, T>) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity with a zero-norm guard.
///
/// Returns `(0, true)` when either vector has norm below [`NORM_EPS`].
/// The result is clamped to `[-1, 1]` to absorb rounding.
pub fn guarded_cosine<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> (T, bool) {
    let na = norm(a);
    let nb = norm(b);
    let eps = lit::<T>(NORM_EPS);
    if !(na >= eps && nb >= eps) {
        return (T::zero(), true);
    }
    let c = dot(a, b) / (na * nb);
    (c.max(-T::one()).min(T::one()), false)
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std<T: Scalar>(xs: &[T]) -> (T, T) {
    if xs.is_empty() {
        return (T::zero(), T::zero());
    }
    let n = lit::<T>(xs.len() as f64);
    let mean = pairwise_sum(xs) / n;
    let var = pairwise_sum_by(xs.len(), &|i| {
        let d = xs[i] - mean;
        d * d
    }) / n;
    (mean, var.max(T::zero()).sqrt())
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> Option<T> {
    assert_eq!(x.len(), y.len(), "pearson: length mismatch");
    if x.len() < 2 {
        return None;
    }
    let (mx, _) = mean_std(x);
    let (my, _) = mean_std(y);
    let sxy = pairwise_sum_by(x.len(), &|i| (x[i] - mx) * (y[i] - my));
    let sxx = pairwise_sum_by(x.len(), &|i| (x[i] - mx) * (x[i] - mx));
    let syy = pairwise_sum_by(y.len(), &|i| (y[i] - my) * (y[i] - my));
    if sxx <= T::zero() || syy <= T::zero() {
        return None;
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Some(r.max(-T::one()).min(T::one()))
}

/// Average ranks (1-based) with ties sharing their midrank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share ranks i+1..=j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}
