//! U-CycleMLP: a U-shaped encoder-decoder segmentation network built on a
//! small reverse-mode autodiff engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, the gradient tape and the parameter store
//! - [`blocks`]: PAWE, weight excitation, dense-atrous, CAWE, CycleFC/CycleMLP
//!   and the channel-CycleMLP skip block
//! - [`network`]: the wired model with parameter and FLOP accounting
//! - [`objectives`]: training losses and segmentation metrics
//! - [`trainer`]: AdamW, gradient clipping, Dice-gated checkpointing
//! - [`dataio`]: PGM/PPM I/O, augmentation, splits, synthetic datasets
//! - [`oracle`]: naive reference kernels and finite-difference checks
//! - [`cli`]: the command surface behind the `ucyclemlp` binary

pub mod blocks;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod network;
pub mod objectives;
pub mod oracle;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{ModelConfig, UCycleMLP};
pub use tensor::{Graph, Tensor, Var};
