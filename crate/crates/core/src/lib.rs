pub mod autodiff;
pub mod data;
pub mod error;
pub mod flow;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
