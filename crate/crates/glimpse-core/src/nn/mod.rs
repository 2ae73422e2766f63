//! Shared perception stack: glimpse encoders, a temporal transformer (or
//! LSTM), and policy / prediction / Q heads reading the per-step embeddings.

pub mod attention;
pub mod heads;
pub mod layers;
pub mod lstm;
pub mod store;
