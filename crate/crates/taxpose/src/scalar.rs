use crate::error::Result;
use crate::mat3::Mat3;
use num_traits::{Float, FromPrimitive};
use std::fmt::{Debug, Display};
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Floating-point scalar the numeric core is generic over: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("literal out of range")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Full SVD of a 3x3 matrix, `m = u * diag(sigma) * v^T`.
#[derive(Debug, Clone, Copy)]
pub struct Svd3Parts<T> {
    pub u: Mat3<T>,
    pub sigma: [T; 3],
    pub v: Mat3<T>,
}

/// A real number in a computation that may be tracked for reverse-mode
/// differentiation.
///
/// Implemented by plain scalars (`f32`, `f64`; no tracking, zero overhead)
/// and by [`crate::autodiff::Var`] (records onto a tape). Numeric routines
/// written against this trait — the Procrustes solve, the model forward
/// pass, the losses — run identically in both modes.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    type Repr: Scalar;
    /// Evaluation context: `()` for plain scalars, a tape reference for
    /// tracked variables.
    type Ctx: Copy;

    /// Embeds a plain value as an untracked constant.
    fn lift(ctx: Self::Ctx, value: Self::Repr) -> Self;

    /// The current numeric value.
    fn value(self) -> Self::Repr;

    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;

    /// Dot product of two equal-length slices. A single fused tape node.
    fn dot(ctx: Self::Ctx, a: &[Self], b: &[Self]) -> Self;

    /// Dot product against constant coefficients.
    fn dot_const(ctx: Self::Ctx, a: &[Self], coeff: &[Self::Repr]) -> Self;

    /// Sum of a slice. A single fused tape node.
    fn sum(ctx: Self::Ctx, xs: &[Self]) -> Self;

    /// Full 3x3 SVD. On a tape this registers the analytic differential,
    /// which requires separated squared singular values
    /// (`NearDegenerateSpectrum` otherwise); the plain path never fails.
    fn svd3(ctx: Self::Ctx, m: &Mat3<Self>) -> Result<Svd3Parts<Self>>;

    /// Shorthand for lifting an `f64` literal.
    fn lit(ctx: Self::Ctx, x: f64) -> Self {
        Self::lift(ctx, Self::Repr::of(x))
    }
}

impl<S: Scalar> Real for S {
    type Repr = S;
    type Ctx = ();

    #[inline]
    fn lift(_ctx: (), value: S) -> S {
        value
    }

    #[inline]
    fn value(self) -> S {
        self
    }

    #[inline]
    fn sqrt(self) -> S {
        Float::sqrt(self)
    }

    #[inline]
    fn exp(self) -> S {
        Float::exp(self)
    }

    #[inline]
    fn ln(self) -> S {
        Float::ln(self)
    }

    #[inline]
    fn tanh(self) -> S {
        Float::tanh(self)
    }

    #[inline]
    fn dot(_ctx: (), a: &[S], b: &[S]) -> S {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = S::zero();
        for (x, y) in a.iter().zip(b) {
            acc = acc + *x * *y;
        }
        acc
    }

    #[inline]
    fn dot_const(_ctx: (), a: &[S], coeff: &[S]) -> S {
        Self::dot((), a, coeff)
    }

    #[inline]
    fn sum(_ctx: (), xs: &[S]) -> S {
        let mut acc = S::zero();
        for x in xs {
            acc = acc + *x;
        }
        acc
    }

    fn svd3(_ctx: (), m: &Mat3<S>) -> Result<Svd3Parts<S>> {
        Ok(crate::mat3::svd3_values(m))
    }
}
