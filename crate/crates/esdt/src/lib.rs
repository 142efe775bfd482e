//! Elastic sparse diffusion transformer, desk scale.
//!
//! A three-stage diffusion transformer with adaptive sparse self-attention,
//! width-elastic supernetwork training, flow-matching / knowledge-distillation
//! objectives, and knowledge-guided distribution-matching step distillation —
//! all on a self-contained tensor and reverse-mode autodiff substrate so that
//! every training claim can be checked against brute-force attention oracles,
//! finite-difference gradients, and closed-form Gaussian-mixture velocity
//! fields.

pub mod attention;
pub mod bench;
pub mod checks;
pub mod config;
pub mod data_io;
pub mod elastic;
pub mod error;
pub mod kdmd;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod oracle;
pub mod train;
pub mod velocity;

pub use error::{EsdtError, Result};
