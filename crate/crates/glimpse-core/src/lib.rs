//! Active perception in miniature: agents that explore an image through
//! small glimpses and jointly learn where to look and what to predict.
//!
//! The crate is organized around a POMDP contract ([`pomdp`]) implemented by
//! three glimpse environments ([`envs`]), a shared sequence backbone with
//! policy / prediction / Q heads ([`nn`]), episode replay with dynamic reward
//! recomputation ([`replay`]), and off-policy actor-critic agents ([`agents`])
//! evaluated by the metrics in [`eval`].

pub mod agents;
pub mod envs;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod pomdp;
pub mod replay;

mod real;

pub use real::Real;
