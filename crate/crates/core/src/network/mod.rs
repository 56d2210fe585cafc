//! The multi-scale grid network and its ablation variants.

pub mod blocks;
mod config;
mod model;
mod params;

pub use blocks::FusionKind;
pub use config::{GridConfig, OutputHead, VariantSpec};
pub use model::{build, FeatureTap, GraphOutput, IndirectOutput, Model, TapVar};
pub use params::{param_count, ParamSpec, ParameterStore};

#[cfg(test)]
mod tests;
