//! Dense tensors, trainable parameters and reverse-mode gradients.

mod checkpoint;
mod gradcheck;
mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, FORMAT_VERSION};
pub use gradcheck::{check_input_gradient, gradient_check, CheckOptions, GradCheckReport, FD_STEP};
pub use nn::{kl_standard_normal, mse, softmax, Activation, GruCell, GruCellSpec, Mlp, MlpSpec};
pub use optim::{Optimizer, OptimizerRule};
pub use params::{Param, ParamId, ParamSet};
pub use tape::{masked_softmax, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
