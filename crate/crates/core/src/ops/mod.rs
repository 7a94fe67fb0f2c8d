//! Raw forward/backward kernels shared by the tape, the streaming runtime and tests.

pub mod conv;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, ConvGeometry};
pub use loss::{cross_entropy, softmax_temperature};
pub use norm::{BN_EPS, BN_MOMENTUM};
