//! Pacemaker knowledge distillation for on-the-fly (1×N filter) CNNs.
//!
//! The crate covers the whole loop: a small tensor library with tape-based
//! autodiff, architecture builders in N×N / 1×N / N×1 filter modes, the
//! three-phase distillation pipeline, dataset ingestion, checkpointing and a
//! row-by-row streaming runtime for trained 1×N students.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod model;
pub mod ops;
pub mod optim;
#[cfg(feature = "oracle")]
pub mod oracle;
pub mod stream;
pub mod tape;
pub mod tensor;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use ops::ConvGeometry;
pub use model::{ArchSpec, FilterMode, Model, SurgeryMode};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
