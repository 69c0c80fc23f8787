//! Small reverse-mode neural network stack: matrices, a differentiation
//! tape, layers, the agent network, and Adam.

pub mod adam;
pub mod agent;
pub mod layers;
pub mod mat;
pub mod tape;

pub use adam::{Adam, AdamConfig};
pub use agent::{AgentArch, AgentNetwork, DepthMask, NetConfig, NetOutputs, QEstimate};
pub use layers::{ParamId, ParamSet, ParamVars};
pub use mat::Mat;
pub use tape::{Tape, Var};
