//! Inverse autoregressive flow: masked autoregressive networks, affine
//! refinement steps, chaining with log-determinant accumulation, inversion
//! and change-of-variables densities.

mod iaf;
mod made;

pub use iaf::{
    affine_step, flow_log_density, gaussian_log_density, FlowChain, FlowSample, IafStep, StepOutput,
    DEFAULT_GATE_BIAS,
};
pub use made::{MadeNetwork, Ordering};
