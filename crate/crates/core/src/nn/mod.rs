//! Minimal tensor library: dense tensors, a reverse-mode tape, layers, and SGD.

pub mod alloc;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{apply_stat_updates, BatchNorm, Conv, ConvBnRelu, Linear};
pub use ops::{softmax_rows, ConvGeom};
pub use optim::Sgd;
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use tape::{Ctx, Grads, Mode, StatUpdate, Tape, Var};
pub use tensor::{Float, Tensor};
