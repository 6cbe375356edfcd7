//! Dense f64 tensors with reverse-mode differentiation, parameter storage,
//! Adam, and the `T2FP` checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;

pub use checkpoint::{load_params, read_params, save_params, write_params};
pub use params::{AdamConfig, ParamStore, Parameter};
pub use tape::{gelu, Tape, Var};
