pub mod compiler;
pub mod error;
pub mod experiments;
pub mod jet;
pub mod network;
pub mod pde;
pub mod posterior;
pub mod prior;
pub mod spline;

pub use error::{Error, Result};
pub use jet::Jet2;
pub use network::{forward_jet, Architecture, ClipSpec, Evaluator, NetworkParams};
