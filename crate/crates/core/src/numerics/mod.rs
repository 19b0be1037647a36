//! Numerics core: dense arrays, a reverse-mode tape, and gradient checking.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient verification.
//! Determinism contract: all reductions run in a fixed sequential order, so a
//! computation repeated on identical inputs is bit-identical.

mod array;
mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::{
    check_gradients, finite_difference_gradient, forward_backward, GradCheckSettings, GradReport,
};
pub use tape::{Gradients, Tape, TensorId};

use crate::error::{OwmError, Result};

/// Floating-point element type of arrays and tapes.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C += A * B with explicit row/col strides per operand. Routes to the
    /// matrixmultiply kernels, which are single-threaded and deterministic
    /// for fixed operand layouts.
    ///
    /// # Safety
    /// Pointers must cover every element reachable via (m, k, n) with the
    /// given strides; C must not alias A or B.
    unsafe fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 1.0, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 1.0, c, rsc, csc);
    }
}

/// Validates that every element is finite; `op` names the producer.
pub fn ensure_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(OwmError::numeric(op, format!("non-finite value {v} at flat index {i}")));
        }
    }
    Ok(())
}
