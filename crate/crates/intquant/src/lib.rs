//! Integer-only approximations of transformer nonlinearities (softmax,
//! GELU, LayerNorm) built from shift-add exp/ln kernels, plus
//! reorder-based group quantization with power-of-two scales, calibration
//! statistics, a knapsack group allocator, floating-point oracles, and a
//! tensor/config file layer for the CLI driver.

pub mod approxnl;
pub mod calib;
pub mod cli;
pub mod fxp;
pub mod groupquant;
pub mod refmodel;
pub mod tensorio;

pub use approxnl::{KernelError, KernelId, OpCounter};
pub use fxp::{FxError, FxFormat, FxStatus, FxValue};
