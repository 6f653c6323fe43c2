//! Critical-layer-isolation transformer compression at desk scale.
//!
//! The crate builds GPT-style teacher and compressed student models from a
//! declarative [`model::LayerPlan`], scores per-layer importance by output
//! ablation, and trains students against a frozen teacher with a
//! temperature-scaled distillation loss.

pub mod data;
pub mod distill;
pub mod importance;
pub mod model;
pub mod tensor;
