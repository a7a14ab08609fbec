//! Dense tensors, a reverse-mode tape and the layer primitives built on it.

pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod weights;

pub use gradcheck::{gradcheck, GradCheckOptions, GradReport};
pub use layers::{Activation, BatchNorm, Conv2d, ConvBnAct, ConvSpec, MlpGate};
pub use params::Parameterized;
pub use rng::RngStream;
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorId};
