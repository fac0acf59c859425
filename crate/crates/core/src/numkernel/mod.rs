//! Dense tensors with tape-based reverse-mode differentiation.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error};
pub use tape::{NodeId, Reduce, Tape};
pub use tensor::Tensor;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Matrix product without gradient tracking.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(a, b)?;
    Ok(tape.value(out).clone())
}

/// Softmax of `x / temperature` over the last dimension.
pub fn softmax<T: Scalar>(x: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let out = tape.softmax_rows(x, temperature)?;
    Ok(tape.value(out).clone())
}

pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if x.cols() == 0 {
        return shape_err("layernorm over an empty dimension");
    }
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let g = tape.constant(gain.clone());
    let b = tape.constant(bias.clone());
    let out = tape.layernorm(x, g, b, eps)?;
    Ok(tape.value(out).clone())
}
