//! Onion-routed delegation of aggregation tasks over gossip peer sampling,
//! a deterministic discrete-event simulator to run it on, and an adversary
//! harness that measures what observers learn about origins.

pub mod adversary;
pub mod aggregation;
pub mod cli;
pub mod config;
pub mod crypto;
pub mod delegation;
pub mod onion;
pub mod result_return;
pub mod sampling;
pub mod sim;
pub mod wire;
pub mod world;
