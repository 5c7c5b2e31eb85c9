//! Module-level contract shared by recommenders, generators and processors.
//!
//! Every module exposes a tensor-level [`Module::forward`] used internally and
//! a text-level [`Module::response`] that pipelines call. Pipelines never see
//! tensors; all cross-module traffic is dialog text plus ranked item lists.

use std::collections::BTreeMap;
use std::fmt::Debug;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use tokio::sync::mpsc::UnboundedSender;
use tokio_util::sync::CancellationToken;

use crate::generator::GenError;
use crate::protocol::{Dialog, ProtocolError};
use crate::recommender::RecError;
use crate::tensor::{Tensor, WeightsError, WeightsFile};
use crate::tokenization::{CompositeTokenizer, EncodedInputs, TokenizerError};

pub const CONFIG_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum ModuleError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Recommender(#[from] RecError),
    #[error(transparent)]
    Generator(#[from] GenError),
    #[error("dialog does not end with a user turn")]
    NoUserTurn,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid kwargs: {0}")]
    Kwargs(String),
    #[error("missing input feature {0:?}")]
    MissingFeature(String),
    #[error("cancelled")]
    Cancelled,
}

impl ModuleError {
    pub fn is_cancelled(&self) -> bool {
        matches!(
            self,
            ModuleError::Cancelled | ModuleError::Generator(GenError::Cancelled)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Recommender,
    Generator,
    Processor,
}

impl ModuleKind {
    /// Span prefix used by the monitor for modules of this kind.
    pub fn span_prefix(self) -> &'static str {
        match self {
            ModuleKind::Recommender => "rec",
            ModuleKind::Generator => "gen",
            ModuleKind::Processor => "proc",
        }
    }
}

/// Persisted as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleConfig {
    pub module_type: String,
    pub version: String,
    #[serde(default)]
    pub params: Value,
}

impl ModuleConfig {
    pub fn new(module_type: impl Into<String>, params: Value) -> Self {
        ModuleConfig {
            module_type: module_type.into(),
            version: CONFIG_VERSION.to_string(),
            params,
        }
    }

    /// Deserializes `params` into a typed config.
    pub fn params_as<T: serde::de::DeserializeOwned>(&self) -> Result<T, ModuleError> {
        serde_json::from_value(self.params.clone())
            .map_err(|e| ModuleError::Config(format!("{}: {e}", self.module_type)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecItem {
    pub item_id: u32,
    pub name: String,
    pub score: f32,
}

/// Ranked items, scores non-increasing.
pub type RecList = Vec<RecItem>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleOutput {
    Text(String),
    Recommendations(RecList),
}

impl ModuleOutput {
    pub fn into_text(self) -> Option<String> {
        match self {
            ModuleOutput::Text(t) => Some(t),
            ModuleOutput::Recommendations(_) => None,
        }
    }

    pub fn into_recommendations(self) -> Option<RecList> {
        match self {
            ModuleOutput::Recommendations(r) => Some(r),
            ModuleOutput::Text(_) => None,
        }
    }
}

/// Per-call inputs beyond the dialog.
#[derive(Debug, Clone, Default)]
pub struct ModuleRequest {
    /// Free-form keyword arguments for this module.
    pub kwargs: Map<String, Value>,
    /// Item names a generator should talk about.
    pub items: Vec<String>,
    /// Number of placeholder slots a fill-blank generator should emit.
    pub slots: Option<usize>,
    /// Placeholder token for fill-blank generation.
    pub placeholder: Option<String>,
    /// Receives streamed text fragments as they are produced.
    pub chunks: Option<UnboundedSender<String>>,
    pub cancel: CancellationToken,
}

impl ModuleRequest {
    pub fn with_kwargs(kwargs: Map<String, Value>) -> Self {
        ModuleRequest {
            kwargs,
            ..Default::default()
        }
    }

    pub fn kwarg_usize(&self, key: &str) -> Result<Option<usize>, ModuleError> {
        match self.kwargs.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v
                .as_u64()
                .map(|n| Some(n as usize))
                .ok_or_else(|| ModuleError::Kwargs(format!("{key} must be a non-negative integer"))),
        }
    }

    pub fn kwarg_f64(&self, key: &str) -> Result<Option<f64>, ModuleError> {
        match self.kwargs.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v
                .as_f64()
                .map(Some)
                .ok_or_else(|| ModuleError::Kwargs(format!("{key} must be a number"))),
        }
    }

    pub fn kwarg_bool(&self, key: &str) -> Result<Option<bool>, ModuleError> {
        match self.kwargs.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v
                .as_bool()
                .map(Some)
                .ok_or_else(|| ModuleError::Kwargs(format!("{key} must be a boolean"))),
        }
    }

    pub fn kwarg_str(&self, key: &str) -> Result<Option<&str>, ModuleError> {
        match self.kwargs.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v
                .as_str()
                .map(Some)
                .ok_or_else(|| ModuleError::Kwargs(format!("{key} must be a string"))),
        }
    }

    pub(crate) fn emit(&self, chunk: &str) {
        if let Some(tx) = &self.chunks {
            let _ = tx.send(chunk.to_string());
        }
    }
}

pub type TensorMap = BTreeMap<String, Tensor>;

#[async_trait]
pub trait Module: Send + Sync + Debug {
    /// Artifact name, e.g. `redial-rec`.
    fn name(&self) -> &str;

    fn kind(&self) -> ModuleKind;

    fn config(&self) -> ModuleConfig;

    fn tokenizer(&self) -> Option<&CompositeTokenizer> {
        None
    }

    /// Tensor-level computation on already-encoded inputs.
    fn forward(&self, inputs: &EncodedInputs) -> Result<TensorMap, ModuleError>;

    /// Text-level entry point used by pipelines.
    async fn response(&self, dialog: &Dialog, req: &ModuleRequest) -> Result<ModuleOutput, ModuleError>;

    fn weights(&self) -> Option<WeightsFile> {
        None
    }

    /// Extra files (tokenizer assets, lexicons) relative to the artifact root.
    fn assets(&self) -> Vec<(String, Vec<u8>)> {
        self.tokenizer().map(|t| t.to_files()).unwrap_or_default()
    }

    /// Defaults shown to UI clients for the per-module kwargs form.
    fn default_kwargs(&self) -> Value {
        Value::Object(Map::new())
    }
}
