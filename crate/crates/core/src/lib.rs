//! Selective decoupled federated LoRA: a desk-scale engine and simulation harness.
//!
//! Each client carries a dual adapter per layer. The shared half is uploaded, stacked across
//! clients and re-compressed to a rank budget; the private half stays on the device.

pub mod adapters;
pub mod aggregation;
pub mod config;
pub mod federation;
pub mod privacy;
pub mod tasks;
pub mod tensor;
