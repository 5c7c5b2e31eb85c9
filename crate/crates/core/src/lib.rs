//! Building blocks for modular conversational recommender systems.
//!
//! Dialogs travel between modules as plain text with inline entity markup
//! ([`protocol`]). Recommenders, generators and processors implement
//! [`module::Module`]; [`pipeline`] composes them, [`artifact`] saves, loads
//! and shares them, and [`monitor`] records per-request span traces.

pub mod artifact;
pub mod demo;
pub mod generator;
pub mod linker;
pub mod module;
pub mod monitor;
pub mod pipeline;
pub mod protocol;
pub mod recommender;
pub mod tensor;
pub mod tokenization;

#[cfg(feature = "testkit")]
pub mod testkit;

pub use artifact::{from_pretrained, push_to_hub, save_pretrained, ArtifactError, ArtifactManifest, LoadOptions, Loaded};
pub use module::{Module, ModuleConfig, ModuleError, ModuleKind, ModuleOutput, ModuleRequest, RecItem, RecList};
pub use monitor::Monitor;
pub use pipeline::{Pipeline, PipelineConfig, PipelineError, PipelineKind, PipelineOutput, RespondOptions};
pub use protocol::{parse_dialog, render_dialog, Dialog, EntitySpan, ProtocolError, Role, Utterance};
