//! Reverse-mode differentiation over a fixed set of image operations.
//!
//! The op set covers what the joint reconstruction loss needs: element-wise
//! arithmetic, activations, same-padded convolutions, 2x upsampling, channel
//! normalisation, bilinear warping driven by transform parameters, box
//! downsampling, Charbonnier total variation and (masked) MSE. All values are
//! `f64`.
//!
//! ```
//! use thermal_nuc::diffengine::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let g = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad(true));
//! let x = tape.constant(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
//! let p = tape.mul(g, x).unwrap();
//! let loss = tape.sum(p);
//! tape.forward(&[loss]).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(g).unwrap(), &[4.0, 5.0, 6.0]);
//! ```

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, op_suite, GradCheckReport, SuiteCase, SUITE_STEP, SUITE_TOLERANCE, TV_STEP, WARP_PARAM_STEP};
pub use tape::{NodeId, OpKind, Tape, NORM_EPS, TV_EPS};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use tape::sigmoid;
