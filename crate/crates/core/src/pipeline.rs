//! Pipeline level: when to call which module and how to merge the results.
//!
//! * Expansion: recommend first, then let the generator write around the
//!   recommended names, which are tagged as entities in the final text.
//! * Fill-blank: the generator writes a reply with placeholder tokens, which
//!   are then filled in order with the top-ranked items.
//!
//! Modules are only reached through [`Module::response`]; every call runs
//! inside a monitored root span.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;
use tokio::sync::mpsc::UnboundedSender;
use tokio_util::sync::CancellationToken;

use crate::linker::{EntityMatcher, LinkerConfig};
use crate::module::{Module, ModuleConfig, ModuleError, ModuleKind, ModuleOutput, ModuleRequest, RecList};
use crate::monitor::{self, Monitor};
use crate::protocol::{
    find_reserved, parse_dialog, parse_utterance, render_dialog, Dialog, EntitySpan, ProtocolError, Role, Utterance,
    RESERVED_TOKENS,
};

pub const MODULE_TYPE: &str = "pipeline";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Expansion,
    Fillblank,
}

fn default_top_k() -> usize {
    3
}

fn default_placeholder() -> String {
    crate::generator::DEFAULT_PLACEHOLDER.to_string()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub kind: PipelineKind,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_placeholder")]
    pub placeholder: String,
    #[serde(default = "default_true")]
    pub auto_link: bool,
}

impl PipelineConfig {
    pub fn new(kind: PipelineKind) -> Self {
        PipelineConfig {
            kind,
            top_k: default_top_k(),
            placeholder: default_placeholder(),
            auto_link: true,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.placeholder.is_empty() {
            return Err(PipelineError::Config("placeholder must be non-empty".into()));
        }
        if let Some(tok) = find_reserved(&self.placeholder) {
            return Err(PipelineError::Config(format!("placeholder contains reserved token {tok}")));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("invalid kwargs: {0}")]
    Kwargs(String),
    #[error("{role} module {module:?} failed: {source}")]
    Module {
        role: &'static str,
        module: String,
        #[source]
        source: ModuleError,
    },
    #[error("{placeholders} placeholders but only {available} recommendations available")]
    InsufficientRecommendations { placeholders: usize, available: usize },
}

impl PipelineError {
    pub fn is_cancelled(&self) -> bool {
        matches!(self, PipelineError::Module { source, .. } if source.is_cancelled())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    /// System reply body with entity markup.
    pub text: String,
    pub recommendations: RecList,
    pub trace_id: String,
    /// The final user turn as the pipeline saw it (after entity linking).
    pub user_turn: String,
}

/// A dialog, or its wire form.
#[derive(Debug, Clone, Copy)]
pub enum PipelineInput<'a> {
    Dialog(&'a Dialog),
    Wire(&'a str),
}

impl<'a> From<&'a Dialog> for PipelineInput<'a> {
    fn from(d: &'a Dialog) -> Self {
        PipelineInput::Dialog(d)
    }
}

impl<'a> From<&'a str> for PipelineInput<'a> {
    fn from(s: &'a str) -> Self {
        PipelineInput::Wire(s)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RespondOptions {
    /// Keyword arguments; `rec`, `gen` and `proc` hold per-module objects,
    /// other top-level keys are shared by all modules.
    pub kwargs: Map<String, Value>,
    pub chunks: Option<UnboundedSender<String>>,
    pub cancel: CancellationToken,
}

impl RespondOptions {
    pub fn with_kwargs(kwargs: Value) -> Self {
        RespondOptions {
            kwargs: match kwargs {
                Value::Object(m) => m,
                _ => Map::new(),
            },
            ..Default::default()
        }
    }
}

const ROUTING_KEYS: [&str; 3] = ["rec", "gen", "proc"];

fn route_kwargs(all: &Map<String, Value>, role: &str) -> Result<Map<String, Value>, PipelineError> {
    let mut out: Map<String, Value> = all
        .iter()
        .filter(|(k, _)| !ROUTING_KEYS.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    match all.get(role) {
        None | Some(Value::Null) => {}
        Some(Value::Object(own)) => out.extend(own.iter().map(|(k, v)| (k.clone(), v.clone()))),
        Some(_) => return Err(PipelineError::Kwargs(format!("kwargs.{role} must be an object"))),
    }
    Ok(out)
}

/// Removes markup tokens a generator may have produced.
fn strip_reserved(text: &str) -> String {
    let mut out = text.to_string();
    while let Some(tok) = find_reserved(&out) {
        out = out.replace(tok, "");
    }
    debug_assert!(RESERVED_TOKENS.iter().all(|t| !out.contains(t)));
    out
}

/// Wraps verbatim (case-sensitive) occurrences of recommended names.
fn tag_recommended(text: &str, recs: &RecList) -> Utterance {
    let names: Vec<&str> = recs.iter().map(|r| r.name.as_str()).collect();
    let matcher = EntityMatcher::from_names(
        names.iter().copied(),
        LinkerConfig {
            case_sensitive: true,
            boundary_mode: false,
        },
    );
    let spans = matcher
        .find(text)
        .into_iter()
        .map(|mut s| {
            s.entity_id = s.entity_id.map(|local| recs[local as usize].item_id);
            s
        })
        .collect();
    Utterance::new(Role::System, text, spans).expect("text is reserved-token free and spans are disjoint")
}

/// Replaces the i-th placeholder with the i-th item, tagged.
fn fill_placeholders(text: &str, placeholder: &str, recs: &RecList) -> Utterance {
    let mut out = String::with_capacity(text.len());
    let mut spans = Vec::new();
    let mut chars = 0usize;
    for (i, piece) in text.split(placeholder).enumerate() {
        if i > 0 {
            let item = &recs[i - 1];
            let len = item.name.chars().count();
            spans.push(EntitySpan {
                surface: item.name.clone(),
                start: chars,
                end: chars + len,
                entity_id: Some(item.item_id),
            });
            out.push_str(&item.name);
            chars += len;
        }
        out.push_str(piece);
        chars += piece.chars().count();
    }
    Utterance::new(Role::System, out, spans).expect("names and text are reserved-token free")
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    name: String,
    cfg: PipelineConfig,
    rec: Arc<dyn Module>,
    gen: Arc<dyn Module>,
    proc: Option<Arc<dyn Module>>,
    monitor: Monitor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineModules {
    pub rec: String,
    pub gen: String,
    pub proc: Option<String>,
}

impl Pipeline {
    pub fn new(
        name: impl Into<String>,
        cfg: PipelineConfig,
        rec: Arc<dyn Module>,
        gen: Arc<dyn Module>,
        proc: Option<Arc<dyn Module>>,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let expect = |m: &Arc<dyn Module>, kind: ModuleKind| {
            if m.kind() == kind {
                Ok(())
            } else {
                Err(PipelineError::Config(format!(
                    "module {:?} is a {:?}, expected {kind:?}",
                    m.name(),
                    m.kind()
                )))
            }
        };
        expect(&rec, ModuleKind::Recommender)?;
        expect(&gen, ModuleKind::Generator)?;
        if let Some(p) = &proc {
            expect(p, ModuleKind::Processor)?;
        }
        Ok(Pipeline {
            name: name.into(),
            cfg,
            rec,
            gen,
            proc,
            monitor: Monitor::default(),
        })
    }

    /// Records traces into `monitor` instead of a private one.
    pub fn with_monitor(mut self, monitor: Monitor) -> Self {
        self.monitor = monitor;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn rec(&self) -> &Arc<dyn Module> {
        &self.rec
    }

    pub fn gen(&self) -> &Arc<dyn Module> {
        &self.gen
    }

    pub fn proc(&self) -> Option<&Arc<dyn Module>> {
        self.proc.as_ref()
    }

    pub fn modules(&self) -> PipelineModules {
        PipelineModules {
            rec: self.rec.name().to_string(),
            gen: self.gen.name().to_string(),
            proc: self.proc.as_ref().map(|p| p.name().to_string()),
        }
    }

    /// Per-module kwargs defaults, keyed by routing key.
    pub fn default_kwargs(&self) -> Value {
        let mut rec = self.rec.default_kwargs();
        if let Value::Object(m) = &mut rec {
            m.insert("top_k".into(), json!(self.cfg.top_k));
        }
        json!({
            "rec": rec,
            "gen": self.gen.default_kwargs(),
            "proc": self.proc.as_ref().map(|p| p.default_kwargs()).unwrap_or_else(|| json!({})),
        })
    }

    /// Persisted form: kind, options, and sub-artifacts referenced by name.
    pub fn module_config(&self) -> ModuleConfig {
        let mut params = serde_json::to_value(&self.cfg).expect("config serializes");
        params["modules"] = serde_json::to_value(self.modules()).expect("names serialize");
        ModuleConfig::new(MODULE_TYPE, params)
    }

    pub async fn respond<'a>(
        &self,
        input: impl Into<PipelineInput<'a>>,
        opts: RespondOptions,
    ) -> Result<PipelineOutput, PipelineError> {
        let dialog = match input.into() {
            PipelineInput::Dialog(d) => d.clone(),
            PipelineInput::Wire(w) => parse_dialog(w)?,
        };
        let (trace_id, out) = self
            .monitor
            .root("pipeline.respond", render_dialog(&dialog), self.run(dialog, &opts))
            .await;
        let (text, recommendations, user_turn) = out?;
        Ok(PipelineOutput {
            text,
            recommendations,
            trace_id,
            user_turn,
        })
    }

    async fn run(&self, dialog: Dialog, opts: &RespondOptions) -> Result<(String, RecList, String), PipelineError> {
        let dialog = self.maybe_link(dialog, opts).await?;
        let user_turn = dialog.last().render_body();
        let (reply, recs) = match self.cfg.kind {
            PipelineKind::Expansion => self.expansion(&dialog, opts).await?,
            PipelineKind::Fillblank => self.fillblank(&dialog, opts).await?,
        };
        Ok((reply.render_body(), recs, user_turn))
    }

    async fn maybe_link(&self, dialog: Dialog, opts: &RespondOptions) -> Result<Dialog, PipelineError> {
        let Some(proc) = self.proc.as_ref().filter(|_| self.cfg.auto_link) else {
            return Ok(dialog);
        };
        if dialog.last_user_turn().is_none_or(|u| !u.spans().is_empty()) {
            return Ok(dialog);
        }
        let req = self.request(opts, "proc")?;
        let out = self.call("proc", proc, &dialog, &req).await?;
        let text = self.expect_text("proc", proc, out)?;
        let linked = parse_utterance(&text).map_err(|e| PipelineError::Module {
            role: "proc",
            module: proc.name().to_string(),
            source: e.into(),
        })?;
        Ok(dialog.with_last(linked))
    }

    fn request(&self, opts: &RespondOptions, role: &str) -> Result<ModuleRequest, PipelineError> {
        Ok(ModuleRequest {
            kwargs: route_kwargs(&opts.kwargs, role)?,
            cancel: opts.cancel.clone(),
            ..Default::default()
        })
    }

    async fn call(
        &self,
        role: &'static str,
        module: &Arc<dyn Module>,
        dialog: &Dialog,
        req: &ModuleRequest,
    ) -> Result<ModuleOutput, PipelineError> {
        let span = format!("{role}.respond");
        monitor::instrument(
            &span,
            || format!("{} | kwargs={}", render_dialog(dialog), Value::Object(req.kwargs.clone())),
            module.response(dialog, req),
        )
        .await
        .map_err(|source| PipelineError::Module {
            role,
            module: module.name().to_string(),
            source,
        })
    }

    fn expect_text(&self, role: &'static str, m: &Arc<dyn Module>, out: ModuleOutput) -> Result<String, PipelineError> {
        out.into_text().ok_or_else(|| PipelineError::Module {
            role,
            module: m.name().to_string(),
            source: ModuleError::Config("expected text output".into()),
        })
    }

    async fn recommend(&self, dialog: &Dialog, opts: &RespondOptions, k: Option<usize>) -> Result<RecList, PipelineError> {
        let mut req = self.request(opts, "rec")?;
        // A malformed top_k is left for the recommender to reject.
        let top_k = match (k, req.kwarg_usize("top_k")) {
            (Some(k), _) => Some(k),
            (None, Ok(Some(k))) => Some(k),
            (None, Ok(None)) => Some(self.cfg.top_k),
            (None, Err(_)) => None,
        };
        if let Some(k) = top_k {
            req.kwargs.insert("top_k".into(), json!(k));
        }
        let out = self.call("rec", &self.rec, dialog, &req).await?;
        let mut recs = out.into_recommendations().ok_or_else(|| PipelineError::Module {
            role: "rec",
            module: self.rec.name().to_string(),
            source: ModuleError::Config("expected recommendations".into()),
        })?;
        if let Some(k) = top_k {
            recs.truncate(k);
        }
        Ok(recs)
    }

    async fn expansion(&self, dialog: &Dialog, opts: &RespondOptions) -> Result<(Utterance, RecList), PipelineError> {
        let recs = self.recommend(dialog, opts, None).await?;
        let mut req = self.request(opts, "gen")?;
        req.items = recs.iter().map(|r| r.name.clone()).collect();
        req.chunks = opts.chunks.clone();
        let out = self.call("gen", &self.gen, dialog, &req).await?;
        let text = strip_reserved(&self.expect_text("gen", &self.gen, out)?);
        Ok((tag_recommended(&text, &recs), recs))
    }

    async fn fillblank(&self, dialog: &Dialog, opts: &RespondOptions) -> Result<(Utterance, RecList), PipelineError> {
        let mut req = self.request(opts, "gen")?;
        req.slots = Some(self.cfg.top_k);
        req.placeholder = Some(self.cfg.placeholder.clone());
        let out = self.call("gen", &self.gen, dialog, &req).await?;
        let template = strip_reserved(&self.expect_text("gen", &self.gen, out)?);
        let placeholders = template.matches(self.cfg.placeholder.as_str()).count();
        if placeholders == 0 {
            let reply = Utterance::plain(Role::System, template).expect("reserved tokens stripped");
            self.emit(opts, &reply);
            return Ok((reply, RecList::new()));
        }
        let recs = self.recommend(dialog, opts, Some(placeholders)).await?;
        if recs.len() < placeholders {
            return Err(PipelineError::InsufficientRecommendations {
                placeholders,
                available: recs.len(),
            });
        }
        let reply = fill_placeholders(&template, &self.cfg.placeholder, &recs);
        self.emit(opts, &reply);
        Ok((reply, recs))
    }

    fn emit(&self, opts: &RespondOptions, reply: &Utterance) {
        if let Some(tx) = &opts.chunks {
            let _ = tx.send(reply.text().to_string());
        }
    }
}
