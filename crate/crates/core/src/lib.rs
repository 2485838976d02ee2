//! Dynamic deformable kernels for 2-D deformable image registration.
//!
//! The crate is built bottom-up:
//!
//! * [`tensor`], [`autodiff`] and [`params`]: dense `f64` arrays, a
//!   define-by-run tape with a closed op set, and AdamW.
//! * [`sampling`]: static windows, predicted offsets, deformed windows and
//!   bilinear sampling.
//! * [`attention`]: the dynamic stream block (point attention over deformed
//!   samples fused with channel weights).
//! * [`network`], [`losses`], [`metrics`]: the symmetric registration model,
//!   its bidirectional loss and evaluation metrics.
//! * [`complexity`]: the combinatorial-explosion model and its brute-force
//!   oracle.
//! * [`gradcheck`]: finite-difference checks of every op and of the full
//!   bidirectional loss.
//! * [`config`], [`data`], [`pgm`], [`commands`]: the command-line workflow.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod complexity;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;
pub mod params;
pub mod pgm;
pub mod sampling;
pub mod tensor;
pub mod training;

pub use autodiff::{finite_diff_grad, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use params::{AdamW, ParamStore};
pub use tensor::Tensor;
