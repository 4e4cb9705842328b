pub mod arch;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod params;
pub mod runtime;
pub mod stgraph;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SrnnError};
