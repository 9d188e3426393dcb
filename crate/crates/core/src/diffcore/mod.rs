//! Dense math and reverse-mode differentiation for small networks.

mod fd;
mod matrix;
mod mlp;
mod params;
mod tape;

pub use fd::{default_eps, hvp_fd, hvp_fd_scaled};
pub use matrix::Matrix;
pub use mlp::{mlp_forward, mlp_forward_batch, mlp_tape, Activation, MlpSpec};
pub use params::{Layout, NamedTensor, ParamBlock, ParameterVector};
pub use tape::{grad, value, Tape, Var};
