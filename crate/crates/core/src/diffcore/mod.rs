//! Small reverse-mode differentiation core: dense tensors, the primitives the
//! reconstruction pipeline is built from, and a finite-difference checker.

mod attention;
mod conv;
mod gradcheck;
mod graph;
mod ops;
mod params;
mod real;
mod sample;
mod tensor;

pub use attention::{attention_logits, rope3d_tensor, ROPE_BASE, ROPE_POSITION_SCALE};
pub use conv::Conv2dSpec;
pub use gradcheck::{grad_check, param_grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{GradSink, Gradients, Graph, Var};
pub use ops::RMSNORM_EPS;
pub use params::{ParamId, ParamStore, Parameter};
pub use real::{lit, matmul_into, to_f64, Real};
pub use sample::{bilinear_sample_into, bilinear_taps, BilinearTaps, DeformLayout};
pub use tensor::Tensor;
