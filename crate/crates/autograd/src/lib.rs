//! Minimal reverse-mode autodiff for small CPU models.
//!
//! Tensors are dense and row-major; the element type is any [`Scalar`]
//! (`f32` or `f64`). A [`Tape`] records one forward pass. Parameters live
//! in a [`ParamStore`] and are bound onto each tape as leaves, so separate
//! samples can be differentiated on separate tapes and their gradients
//! summed.

pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use optim::{clip_grad_norm, cosine_lr, Adam};
pub use params::{sum_grads, Bound, ParamId, ParamStore};
pub use scalar::{cast, Scalar};
pub use tape::{Gradients, Pinhole, Tape, Var};
pub use tensor::Tensor;

/// Central finite-difference estimate of `d f / d x_i` for selected indices.
pub fn finite_difference<T: Scalar>(x: &[T], indices: &[usize], h: f64, mut f: impl FnMut(&[T]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = buf[i];
            buf[i] = orig + cast(h);
            let fp = f(&buf);
            buf[i] = orig - cast(h);
            let fm = f(&buf);
            buf[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
