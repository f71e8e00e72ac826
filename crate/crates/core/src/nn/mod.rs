//! Dense-matrix numerical core: tensors, MLPs, losses, reverse-mode
//! gradients, Adam and a finite-difference gradient checker.

mod adam;
mod gradcheck;
mod mlp;
mod ops;
mod tape;
mod tensor;
pub mod weights;

pub use adam::AdamState;
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, ParamSet};
pub use mlp::{Activation, Layer, MlpParams, MlpSpec, MlpVars, OutputActivation};
pub use ops::{bce_loss, row_softmax, sigmoid, BceValue, BCE_EPS};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor2;
