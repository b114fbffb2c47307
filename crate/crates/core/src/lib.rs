//! Event-triggered and self-triggered control of networked control systems
//! modelled as hybrid systems.

pub mod experiments;
pub mod functions;
pub mod hybrid;
pub mod lie;
pub mod monitor;
pub mod ncs;
pub mod ode;
pub mod protocols;
pub mod roots;
pub mod sampling;
pub mod triggers;
