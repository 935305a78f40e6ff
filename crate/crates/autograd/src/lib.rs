//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns a [`Gradients`]
//! table holding the adjoint of every node that requires a gradient.
//!
//! The engine is generic over [`Float`] so the same model code can train in
//! `f32` and be checked against finite differences in `f64`.
//!
//! ```
//! use facedyn_autograd::Graph;
//! use ndarray::arr1;
//!
//! let g = Graph::<f64>::new();
//! let x = g.leaf(arr1(&[1.0, 2.0, 3.0]).into_dyn());
//! let y = (x * x).sum_all();
//! let grads = g.backward(y);
//! assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod backward;
pub mod check;
mod graph;
mod kernels;

pub use backward::Gradients;
pub use graph::{concat, Graph, Var};

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Scalar types the tape can differentiate.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn cst(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Float for f32 {
    #[inline]
    fn cst(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
