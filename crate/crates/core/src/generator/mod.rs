//! Response generators: a prompted chat-completion generator and an offline
//! template generator with the same interface.

pub mod client;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::module::{Module, ModuleConfig, ModuleError, ModuleKind, ModuleOutput, ModuleRequest, TensorMap};
use crate::monitor;
use crate::protocol::{render_dialog, Dialog};
use crate::tokenization::EncodedInputs;

pub use client::{GenChunk, GenOverrides, GenStream, LlmClient, LlmEndpointConfig};

pub const TEMPLATE_MODULE_TYPE: &str = "template_gen";
pub const LLM_MODULE_TYPE: &str = "llm_gen";
pub const DEFAULT_PLACEHOLDER: &str = "<item>";

pub const DEFAULT_EXPANSION_PROMPT: &str = "You are a friendly movie recommender chatting with a user. \
The conversation so far, turns separated by <sep>:\n{context}\n\n\
Write the next system reply. Recommend these movies and write each title exactly as given: {items}";

pub const DEFAULT_FILLBLANK_PROMPT: &str = "You are a friendly movie recommender chatting with a user. \
The conversation so far, turns separated by <sep>:\n{context}\n\n\
Write the next system reply. Wherever you would name a specific movie, write the placeholder <item> instead of a title.";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenError {
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("remote error (status {status}): {body}")]
    Remote { status: u16, body: String },
    #[error("malformed completion stream: {0}")]
    BadStream(String),
    #[error("generation cancelled")]
    Cancelled,
    #[error("invalid prompt template: {0}")]
    InvalidTemplate(String),
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenStyle {
    Expansion,
    Fillblank,
}

/// Template with optional `{context}` and `{items}` slots, each at most once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self, GenError> {
        let template = template.into();
        let (mut context, mut items) = (0, 0);
        let mut rest = template.as_str();
        while let Some(open) = rest.find('{') {
            let tail = &rest[open + 1..];
            match tail.find(['{', '}']) {
                Some(close) if tail.as_bytes()[close] == b'}' => {
                    let name = &tail[..close];
                    let is_ident = !name.is_empty() && name.chars().all(|c| c.is_alphanumeric() || c == '_');
                    match name {
                        "context" => context += 1,
                        "items" => items += 1,
                        _ if is_ident => {
                            return Err(GenError::InvalidTemplate(format!("unknown slot {{{name}}}")))
                        }
                        _ => {}
                    }
                    rest = &tail[close + 1..];
                }
                _ => rest = tail,
            }
        }
        if context > 1 || items > 1 {
            return Err(GenError::InvalidTemplate("slots may appear at most once".into()));
        }
        Ok(PromptTemplate(template))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = GenError;

    fn try_from(s: String) -> Result<Self, GenError> {
        Self::new(s)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> String {
        t.0
    }
}

/// Single-pass slot substitution, so slot-like text inside the dialog is
/// never expanded.
pub fn render_prompt(t: &PromptTemplate, d: &Dialog, items: &[String]) -> String {
    let context = render_dialog(d);
    let items = items.join("; ");
    let mut out = String::with_capacity(t.0.len() + context.len() + items.len());
    let mut rest = t.as_str();
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{context}") {
            out.push_str(&context);
            rest = after;
        } else if let Some(after) = tail.strip_prefix("{items}") {
            out.push_str(&items);
            rest = after;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    out
}

/// Deterministic offline response.
pub fn template_generate(items: &[String], style: GenStyle, slots: usize, placeholder: &str) -> String {
    match style {
        GenStyle::Expansion if items.is_empty() => "Tell me more about what you like.".to_string(),
        GenStyle::Expansion => format!("You might enjoy {}.", items.join(", ")),
        GenStyle::Fillblank => vec![format!("I recommend {placeholder}."); slots].join(" "),
    }
}

fn slots_for(req: &ModuleRequest, default: usize) -> Result<usize, ModuleError> {
    Ok(req.kwarg_usize("slots")?.or(req.slots).unwrap_or(default))
}

fn placeholder_for(req: &ModuleRequest) -> &str {
    req.placeholder.as_deref().unwrap_or(DEFAULT_PLACEHOLDER)
}

/// Emits `text` as whitespace-delimited chunks.
fn emit_words(req: &ModuleRequest, text: &str) {
    for piece in text.split_inclusive(' ') {
        req.emit(piece);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateGenConfig {
    pub style: GenStyle,
    #[serde(default = "one")]
    pub slots: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone)]
pub struct TemplateGen {
    name: String,
    cfg: TemplateGenConfig,
}

impl TemplateGen {
    pub fn new(name: impl Into<String>, style: GenStyle) -> Self {
        TemplateGen {
            name: name.into(),
            cfg: TemplateGenConfig { style, slots: 1 },
        }
    }

    pub fn from_config(name: &str, config: &ModuleConfig) -> Result<Self, ModuleError> {
        Ok(TemplateGen {
            name: name.to_string(),
            cfg: config.params_as()?,
        })
    }

    pub fn style(&self) -> GenStyle {
        self.cfg.style
    }
}

#[async_trait]
impl Module for TemplateGen {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> ModuleKind {
        ModuleKind::Generator
    }

    fn config(&self) -> ModuleConfig {
        ModuleConfig::new(TEMPLATE_MODULE_TYPE, json!(self.cfg))
    }

    fn forward(&self, _inputs: &EncodedInputs) -> Result<TensorMap, ModuleError> {
        Ok(TensorMap::new())
    }

    async fn response(&self, _dialog: &Dialog, req: &ModuleRequest) -> Result<ModuleOutput, ModuleError> {
        let slots = slots_for(req, self.cfg.slots)?;
        let text = template_generate(&req.items, self.cfg.style, slots, placeholder_for(req));
        if req.cancel.is_cancelled() {
            return Err(GenError::Cancelled.into());
        }
        emit_words(req, &text);
        Ok(ModuleOutput::Text(text))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmGenConfig {
    pub endpoint: LlmEndpointConfig,
    pub style: GenStyle,
    pub prompt: PromptTemplate,
    /// Placeholder slots for the offline fallback in fill-blank style.
    #[serde(default = "one")]
    pub slots: usize,
}

impl LlmGenConfig {
    pub fn with_default_prompt(endpoint: LlmEndpointConfig, style: GenStyle) -> Self {
        let prompt = match style {
            GenStyle::Expansion => DEFAULT_EXPANSION_PROMPT,
            GenStyle::Fillblank => DEFAULT_FILLBLANK_PROMPT,
        };
        LlmGenConfig {
            endpoint,
            style,
            prompt: PromptTemplate::new(prompt).expect("default prompts are valid"),
            slots: 1,
        }
    }
}

/// Prompted remote generator. In offline mode it answers with
/// [`template_generate`] instead of calling the endpoint.
#[derive(Debug, Clone)]
pub struct LlmGen {
    name: String,
    cfg: LlmGenConfig,
    client: LlmClient,
    offline: bool,
}

impl LlmGen {
    pub fn new(name: impl Into<String>, cfg: LlmGenConfig) -> Result<Self, ModuleError> {
        let client = LlmClient::new(cfg.endpoint.clone())?;
        Ok(LlmGen {
            name: name.into(),
            cfg,
            client,
            offline: false,
        })
    }

    pub fn from_config(name: &str, config: &ModuleConfig) -> Result<Self, ModuleError> {
        Self::new(name, config.params_as()?)
    }

    pub fn offline(mut self, offline: bool) -> Self {
        self.offline = offline;
        self
    }

    pub fn is_offline(&self) -> bool {
        self.offline
    }

    pub fn prompt_for(&self, dialog: &Dialog, items: &[String]) -> String {
        render_prompt(&self.cfg.prompt, dialog, items)
    }
}

#[async_trait]
impl Module for LlmGen {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> ModuleKind {
        ModuleKind::Generator
    }

    fn config(&self) -> ModuleConfig {
        ModuleConfig::new(LLM_MODULE_TYPE, json!(self.cfg))
    }

    fn forward(&self, _inputs: &EncodedInputs) -> Result<TensorMap, ModuleError> {
        Ok(TensorMap::new())
    }

    async fn response(&self, dialog: &Dialog, req: &ModuleRequest) -> Result<ModuleOutput, ModuleError> {
        if self.offline {
            let slots = slots_for(req, self.cfg.slots)?;
            let text = template_generate(&req.items, self.cfg.style, slots, placeholder_for(req));
            emit_words(req, &text);
            return Ok(ModuleOutput::Text(text));
        }
        let prompt = self.prompt_for(dialog, &req.items);
        let overrides = GenOverrides {
            model: req.kwarg_str("model")?.map(String::from),
            temperature: req.kwarg_f64("temperature")?,
        };
        let text = monitor::instrument(
            "gen.generate",
            || prompt.clone(),
            self.client
                .generate_text(&prompt, &overrides, &req.cancel, |chunk| req.emit(chunk)),
        )
        .await?;
        Ok(ModuleOutput::Text(text))
    }

    fn default_kwargs(&self) -> serde_json::Value {
        json!({ "model": self.cfg.endpoint.model, "temperature": self.cfg.endpoint.temperature })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::parse_dialog;

    fn items(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn prompt_substitution() {
        let t = PromptTemplate::new("C:{context} I:{items}").unwrap();
        let d = parse_dialog("User: Hello!").unwrap();
        assert_eq!(render_prompt(&t, &d, &items(&["A", "B"])), "C:User: Hello! I:A; B");
        assert_eq!(render_prompt(&t, &d, &[]), "C:User: Hello! I:");
        let plain = PromptTemplate::new("no slots {here too").unwrap();
        assert_eq!(render_prompt(&plain, &d, &items(&["A"])), "no slots {here too");
    }

    #[test]
    fn slot_text_inside_dialog_is_not_expanded() {
        let t = PromptTemplate::new("{context}|{items}").unwrap();
        let d = parse_dialog("User: say {items}").unwrap();
        assert_eq!(render_prompt(&t, &d, &items(&["X"])), "User: say {items}|X");
    }

    #[test]
    fn template_validation() {
        assert!(PromptTemplate::new("{context}{context}").is_err());
        assert!(PromptTemplate::new("{name}").is_err());
        assert!(PromptTemplate::new("json {\"a\": 1} {items}").is_ok());
        assert!(PromptTemplate::new(DEFAULT_EXPANSION_PROMPT).is_ok());
        assert!(PromptTemplate::new(DEFAULT_FILLBLANK_PROMPT).is_ok());
    }

    #[test]
    fn offline_templates() {
        assert_eq!(
            template_generate(&items(&["A", "B"]), GenStyle::Expansion, 0, "<item>"),
            "You might enjoy A, B."
        );
        assert_eq!(
            template_generate(&[], GenStyle::Expansion, 0, "<item>"),
            "Tell me more about what you like."
        );
        assert_eq!(
            template_generate(&[], GenStyle::Fillblank, 2, "<item>"),
            "I recommend <item>. I recommend <item>."
        );
    }

    #[tokio::test]
    async fn template_gen_streams_its_text() {
        let g = TemplateGen::new("g", GenStyle::Expansion);
        let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
        let req = ModuleRequest {
            items: items(&["A"]),
            chunks: Some(tx),
            ..Default::default()
        };
        let out = g.response(&parse_dialog("User: hi").unwrap(), &req).await.unwrap();
        drop(req);
        let mut streamed = String::new();
        while let Some(c) = rx.recv().await {
            streamed.push_str(&c);
        }
        let text = out.into_text().unwrap();
        assert!(text.contains('A'));
        assert_eq!(streamed, text);
    }

    #[tokio::test]
    async fn llm_gen_offline_uses_template() {
        let cfg = LlmGenConfig::with_default_prompt(
            LlmEndpointConfig::new("http://127.0.0.1:9", "m", "CRSKIT_TEST_UNSET_KEY_VAR"),
            GenStyle::Expansion,
        );
        let g = LlmGen::new("g", cfg).unwrap().offline(true);
        let req = ModuleRequest {
            items: items(&["A"]),
            ..Default::default()
        };
        let out = g.response(&parse_dialog("User: hi").unwrap(), &req).await.unwrap();
        assert_eq!(out, ModuleOutput::Text("You might enjoy A.".into()));
    }
}
