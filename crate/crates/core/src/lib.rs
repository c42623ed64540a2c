pub mod autodiff;
pub mod cost;
pub mod edit;
pub mod error;
pub mod kernel;
pub mod losses;
pub mod ppm;
pub mod renderer;
pub mod spatial;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Axis, Real, Tensor};
