//! Deterministic simulator of a digital magnet power-supply control stack.

pub mod channel;
pub mod controller;
pub mod feedback;
pub mod link;
pub mod machine;
pub mod metrics;
pub mod plant;
pub mod protocol;
pub mod scenario;
pub mod sim;
pub mod world;
