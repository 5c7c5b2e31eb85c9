//! Sentiment-driven AutoRec recommender.
//!
//! Entity mentions in user turns become ±1 ratings via a sentiment lexicon;
//! the autoencoder scores the whole catalog and the top-k items not already
//! mentioned are returned.

pub mod autorec;
pub mod sentiment;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::module::{
    Module, ModuleConfig, ModuleError, ModuleKind, ModuleOutput, ModuleRequest, RecItem, RecList, TensorMap,
};
use crate::monitor;
use crate::protocol::Dialog;
use crate::tensor::{Tensor, WeightsFile};
use crate::tokenization::{CompositeTokenizer, EncodedInputs, EntityCatalog, Vocab};

pub use autorec::{autorec_forward, autorec_loss_grad, train, AutoRecParams, Gradients, TrainConfig, TrainReport};
pub use sentiment::{extract_ratings, mention_sentiment, RatingVector, SentimentLexicon};

pub const MODULE_TYPE: &str = "redial_rec";
pub const LEXICON_FILE: &str = "tokenizer/sentiment.json";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("training diverged at epoch {epoch}")]
    DivergenceDetected { epoch: usize },
    #[error("learning rate must be finite and non-negative, got {0}")]
    InvalidLearningRate(f64),
    #[error("parameters contain non-finite values")]
    NonFiniteParams,
    #[error("item {id} out of range for catalog of {n}")]
    ItemOutOfRange { id: u32, n: usize },
    #[error("rating must be ±1, got {0}")]
    InvalidRating(i8),
    #[error("invalid sentiment lexicon: {0}")]
    InvalidLexicon(String),
}

/// Ranks `scores` descending with ties broken by ascending id, skipping
/// `excluded`, and keeps at most `k`.
pub fn rank_items(scores: &[f64], excluded: &[u32], k: usize) -> Vec<(u32, f64)> {
    let mut ranked: Vec<(u32, f64)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (i as u32, s))
        .filter(|(i, _)| !excluded.contains(i))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RedialRecConfig {
    pub hidden: usize,
    pub top_k: usize,
    pub exclude_mentioned: bool,
}

impl Default for RedialRecConfig {
    fn default() -> Self {
        RedialRecConfig {
            hidden: autorec::DEFAULT_HIDDEN,
            top_k: 3,
            exclude_mentioned: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RedialRec {
    name: String,
    cfg: RedialRecConfig,
    params: AutoRecParams,
    tokenizer: CompositeTokenizer,
    lexicon: SentimentLexicon,
}

impl RedialRec {
    /// Parameters are rounded to f32 so that a saved and reloaded module is
    /// bitwise identical to this one.
    pub fn new(
        name: impl Into<String>,
        params: AutoRecParams,
        tokenizer: CompositeTokenizer,
        lexicon: SentimentLexicon,
        mut cfg: RedialRecConfig,
    ) -> Result<Self, ModuleError> {
        params.validate()?;
        if params.n() != tokenizer.catalog().len() {
            return Err(RecError::ShapeMismatch(format!(
                "model has {} items, catalog has {}",
                params.n(),
                tokenizer.catalog().len()
            ))
            .into());
        }
        cfg.hidden = params.d();
        Ok(RedialRec {
            name: name.into(),
            cfg,
            params: params.quantized(),
            tokenizer,
            lexicon,
        })
    }

    /// Tokenizer whose vocab covers catalog names and lexicon words.
    pub fn default_tokenizer(catalog: EntityCatalog, lexicon: &SentimentLexicon) -> CompositeTokenizer {
        let corpus: Vec<&str> = catalog
            .names()
            .iter()
            .map(String::as_str)
            .chain(lexicon.words())
            .collect();
        CompositeTokenizer::word(Vocab::build(corpus, 1), catalog)
    }

    pub fn from_parts(
        name: &str,
        config: &ModuleConfig,
        tokenizer: CompositeTokenizer,
        lexicon: SentimentLexicon,
        weights: &WeightsFile,
    ) -> Result<Self, ModuleError> {
        let cfg: RedialRecConfig = config.params_as()?;
        let params = AutoRecParams::from_weights(weights)?;
        if params.d() != cfg.hidden {
            return Err(ModuleError::Config(format!(
                "config hidden={} but weights have d={}",
                cfg.hidden,
                params.d()
            )));
        }
        Self::new(name, params, tokenizer, lexicon, cfg)
    }

    pub fn params(&self) -> &AutoRecParams {
        &self.params
    }

    pub fn lexicon(&self) -> &SentimentLexicon {
        &self.lexicon
    }

    /// Token ids and entity ids plus the dense `ratings` feature.
    pub fn encode(&self, dialog: &Dialog) -> EncodedInputs {
        let mut enc = self.tokenizer.encode(dialog);
        let ratings = extract_ratings(dialog, self.tokenizer.catalog(), &self.lexicon);
        let dense = ratings.dense().into_iter().map(|x| x as f32).collect();
        enc.features.insert("ratings".into(), Tensor::vector(dense));
        enc
    }
}

#[async_trait]
impl Module for RedialRec {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> ModuleKind {
        ModuleKind::Recommender
    }

    fn config(&self) -> ModuleConfig {
        ModuleConfig::new(MODULE_TYPE, json!(self.cfg))
    }

    fn tokenizer(&self) -> Option<&CompositeTokenizer> {
        Some(&self.tokenizer)
    }

    fn forward(&self, inputs: &EncodedInputs) -> Result<TensorMap, ModuleError> {
        let ratings = inputs
            .features
            .get("ratings")
            .ok_or_else(|| ModuleError::MissingFeature("ratings".into()))?;
        let x: ndarray::Array1<f64> = ratings.data().iter().map(|&v| v as f64).collect();
        let scores = self.params.forward_dense(x.view())?;
        let scores = scores.iter().map(|&s| s as f32).collect();
        Ok(TensorMap::from([("scores".to_string(), Tensor::vector(scores))]))
    }

    async fn response(&self, dialog: &Dialog, req: &ModuleRequest) -> Result<ModuleOutput, ModuleError> {
        let k = req.kwarg_usize("top_k")?.unwrap_or(self.cfg.top_k);
        let exclude = req
            .kwarg_bool("exclude_mentioned")?
            .unwrap_or(self.cfg.exclude_mentioned);
        let enc = self.encode(dialog);
        let out = monitor::instrument_sync(
            "rec.forward",
            || format!("entity_ids={:?}", enc.entity_ids),
            || self.forward(&enc),
        )?;
        let scores: Vec<f64> = out["scores"].data().iter().map(|&s| s as f64).collect();
        let excluded = if exclude { enc.entity_ids.clone() } else { Vec::new() };
        let catalog = self.tokenizer.catalog();
        let recs: RecList = rank_items(&scores, &excluded, k)
            .into_iter()
            .map(|(id, score)| RecItem {
                item_id: id,
                name: catalog.name(id).expect("id < N").to_string(),
                score: score as f32,
            })
            .collect();
        Ok(ModuleOutput::Recommendations(recs))
    }

    fn weights(&self) -> Option<WeightsFile> {
        Some(self.params.to_weights())
    }

    fn assets(&self) -> Vec<(String, Vec<u8>)> {
        let mut files = self.tokenizer.to_files();
        files.push((LEXICON_FILE.into(), self.lexicon.to_json().into_bytes()));
        files
    }

    fn default_kwargs(&self) -> serde_json::Value {
        json!({ "top_k": self.cfg.top_k, "exclude_mentioned": self.cfg.exclude_mentioned })
    }
}
