//! Diagnostic-driven progressive evolution of a multimodal model: diagnose
//! per-category weaknesses, generate targeted training data under exact
//! quotas, filter it by learnability and train with group-relative policy
//! optimization, then diagnose again.

pub mod agents;
pub mod analysis;
pub mod capability;
pub mod config;
pub mod diagnosis;
pub mod questioner;
pub mod quota;
pub mod store;
pub mod util;
pub mod grpo;
pub mod learnability;
pub mod error;
pub mod pipeline;
