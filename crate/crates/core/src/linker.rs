//! Dictionary entity linking: greedy leftmost-longest catalog matches.

use std::collections::HashMap;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::module::{Module, ModuleConfig, ModuleError, ModuleKind, ModuleOutput, ModuleRequest, TensorMap};
use crate::monitor;
use crate::protocol::{Dialog, EntitySpan, Utterance};
use crate::tensor::Tensor;
use crate::tokenization::{fold_char, CompositeTokenizer, EncodedInputs, EntityCatalog};

pub const MODULE_TYPE: &str = "entity_linker";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkerConfig {
    pub case_sensitive: bool,
    /// Require matches to start and end on word boundaries.
    pub boundary_mode: bool,
}

impl Default for LinkerConfig {
    fn default() -> Self {
        LinkerConfig {
            case_sensitive: false,
            boundary_mode: true,
        }
    }
}

pub fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// True when a match may begin at `i`.
pub fn starts_at_boundary(chars: &[char], i: usize) -> bool {
    i == 0 || !is_word_char(chars[i - 1]) || !is_word_char(chars[i])
}

/// True when a match may end at `e` (exclusive).
pub fn ends_at_boundary(chars: &[char], e: usize) -> bool {
    e == chars.len() || !is_word_char(chars[e]) || !is_word_char(chars[e - 1])
}

#[derive(Debug, Default, Clone)]
struct TrieNode {
    next: HashMap<char, usize>,
    id: Option<u32>,
}

/// Char trie over catalog names.
#[derive(Debug, Clone)]
pub struct EntityMatcher {
    nodes: Vec<TrieNode>,
    cfg: LinkerConfig,
}

impl EntityMatcher {
    pub fn new(catalog: &EntityCatalog, cfg: LinkerConfig) -> Self {
        Self::from_names(catalog.names().iter().map(String::as_str), cfg)
    }

    /// Names get ids by position.
    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>, cfg: LinkerConfig) -> Self {
        let mut nodes = vec![TrieNode::default()];
        for (id, name) in names.into_iter().enumerate() {
            let mut cur = 0;
            for c in name.chars() {
                let c = if cfg.case_sensitive { c } else { fold_char(c) };
                cur = match nodes[cur].next.get(&c) {
                    Some(&n) => n,
                    None => {
                        nodes.push(TrieNode::default());
                        let n = nodes.len() - 1;
                        nodes[cur].next.insert(c, n);
                        n
                    }
                };
            }
            // First name wins when two fold to the same key.
            nodes[cur].id.get_or_insert(id as u32);
        }
        EntityMatcher { nodes, cfg }
    }

    /// Non-overlapping spans, scanning left to right and taking the longest
    /// acceptable match at each position.
    pub fn find(&self, text: &str) -> Vec<EntitySpan> {
        let chars: Vec<char> = text.chars().collect();
        let keys: Vec<char> = if self.cfg.case_sensitive {
            chars.clone()
        } else {
            chars.iter().copied().map(fold_char).collect()
        };
        let mut spans = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let best = if self.cfg.boundary_mode && !starts_at_boundary(&chars, i) {
                None
            } else {
                self.longest_at(&chars, &keys, i)
            };
            match best {
                Some((end, id)) => {
                    spans.push(EntitySpan {
                        surface: chars[i..end].iter().collect(),
                        start: i,
                        end,
                        entity_id: Some(id),
                    });
                    i = end;
                }
                None => i += 1,
            }
        }
        spans
    }

    fn longest_at(&self, chars: &[char], keys: &[char], start: usize) -> Option<(usize, u32)> {
        let mut cur = 0;
        let mut best = None;
        for (offset, c) in keys[start..].iter().enumerate() {
            match self.nodes[cur].next.get(c) {
                Some(&n) => cur = n,
                None => break,
            }
            let end = start + offset + 1;
            if let Some(id) = self.nodes[cur].id {
                if !self.cfg.boundary_mode || ends_at_boundary(chars, end) {
                    best = Some((end, id));
                }
            }
        }
        best
    }

    /// Links an utterance that has no spans yet; annotated input is returned
    /// unchanged.
    pub fn link_utterance(&self, u: &Utterance) -> Utterance {
        if !u.spans().is_empty() {
            return u.clone();
        }
        u.with_spans(self.find(u.text()))
            .expect("matches are sorted, disjoint substrings of reserved-token-free text")
    }
}

/// Builds a matcher for one call. Prefer holding an [`EntityMatcher`] when
/// linking many texts against the same catalog.
pub fn link_entities(text: &str, catalog: &EntityCatalog, cfg: LinkerConfig) -> Vec<EntitySpan> {
    EntityMatcher::new(catalog, cfg).find(text)
}

/// Processor module wrapping [`EntityMatcher`].
#[derive(Debug, Clone)]
pub struct EntityLinker {
    name: String,
    cfg: LinkerConfig,
    tokenizer: CompositeTokenizer,
    matcher: EntityMatcher,
}

impl EntityLinker {
    pub fn new(name: impl Into<String>, tokenizer: CompositeTokenizer, cfg: LinkerConfig) -> Self {
        let matcher = EntityMatcher::new(tokenizer.catalog(), cfg);
        EntityLinker {
            name: name.into(),
            cfg,
            tokenizer,
            matcher,
        }
    }

    pub fn from_config(
        name: &str,
        config: &ModuleConfig,
        tokenizer: CompositeTokenizer,
    ) -> Result<Self, ModuleError> {
        Ok(Self::new(name, tokenizer, config.params_as()?))
    }

    pub fn matcher(&self) -> &EntityMatcher {
        &self.matcher
    }
}

#[async_trait]
impl Module for EntityLinker {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> ModuleKind {
        ModuleKind::Processor
    }

    fn config(&self) -> ModuleConfig {
        ModuleConfig::new(MODULE_TYPE, json!(self.cfg))
    }

    fn tokenizer(&self) -> Option<&CompositeTokenizer> {
        Some(&self.tokenizer)
    }

    fn forward(&self, inputs: &EncodedInputs) -> Result<TensorMap, ModuleError> {
        let ids = inputs.entity_ids.iter().map(|&i| i as f32).collect();
        Ok(TensorMap::from([("entity_ids".to_string(), Tensor::vector(ids))]))
    }

    async fn response(&self, dialog: &Dialog, _req: &ModuleRequest) -> Result<ModuleOutput, ModuleError> {
        let last = dialog.last_user_turn().ok_or(ModuleError::NoUserTurn)?;
        let linked = monitor::instrument_sync(
            "proc.link",
            || last.text().to_string(),
            || Ok::<_, ModuleError>(self.matcher.link_utterance(last)),
        )?;
        Ok(ModuleOutput::Text(linked.render()))
    }
}
