#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod rng;
pub mod rotation;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod verify;
pub mod vn;

pub use error::{Error, Result};
pub use params::{Bound, ParamStore};
pub use rotation::{sample_rotation, Protocol, Rotation};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{set_precision, Precision, Tensor};
