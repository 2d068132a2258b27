pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoder_decoder;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sspp;
pub mod swin;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{gradcheck, GradcheckOptions, GradcheckReport, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
