//! Layers, parameter storage, optimizer and learning-rate schedule.

mod adam;
mod linear;
mod params;
mod residual;
mod schedule;

pub use adam::Adam;
pub use linear::{xavier_uniform, Activation, Linear, Mlp};
pub use params::{Bound, Param, ParamGroup, ParamId, ParamStore};
pub use residual::ResidualBlock;
pub use schedule::LrSchedule;
