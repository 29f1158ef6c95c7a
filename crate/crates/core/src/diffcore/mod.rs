//! Dense tensors with define-by-run reverse-mode differentiation.

pub(crate) mod conv;
mod element;
mod tape;
mod tensor;

pub use conv::{conv_output_size, conv_transpose_output_size, ConvGeometry};
pub use element::Element;
pub use tape::{BinaryOp, Gradients, Primitive, ReduceOp, ScalarOp, Tape, UnaryOp, Var};
pub use tensor::Tensor;


use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function.
///
/// Element `i` of the result is `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Element,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if !(eps > T::zero()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (eps + eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}
