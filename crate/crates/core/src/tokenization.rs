//! Composite tokenizer: named word-level sub-tokenizers plus an entity catalog.
//!
//! Sub-tokenizers see the clean utterance text only; entity markup is resolved
//! separately against the catalog so modules receive both token ids and
//! entity ids.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::Dialog;
use crate::tensor::Tensor;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const RESERVED_LITERALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("unknown sub-tokenizer {0:?}")]
    UnknownSubTokenizer(String),
    #[error("token id {id} out of range for vocab of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("invalid vocab: {0}")]
    InvalidVocab(String),
    #[error("invalid entity catalog: {0}")]
    InvalidCatalog(String),
    #[error("composite tokenizer needs at least one sub-tokenizer")]
    NoSubTokenizers,
    #[error("duplicate sub-tokenizer name {0:?}")]
    DuplicateSubTokenizer(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Lowercases, splits on whitespace, and peels leading/trailing ASCII
/// punctuation off each chunk as single-character tokens.
pub fn word_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chunk = chunk.to_lowercase();
        let core_start = chunk
            .char_indices()
            .find(|(_, c)| !c.is_ascii_punctuation())
            .map(|(i, _)| i)
            .unwrap_or(chunk.len());
        let core_end = chunk
            .char_indices()
            .rev()
            .find(|(_, c)| !c.is_ascii_punctuation())
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or(core_start)
            .max(core_start);
        out.extend(chunk[..core_start].chars().map(String::from));
        if core_start < core_end {
            out.push(chunk[core_start..core_end].to_string());
        }
        out.extend(chunk[core_end..].chars().map(String::from));
    }
    out
}

/// Token vocabulary. Ids 0..4 are the reserved literals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(RESERVED_LITERALS.iter().map(|s| s.to_string()))
            .expect("reserved literals form a valid vocab")
    }
}

impl Vocab {
    /// Builds from an ordered token list whose first four entries must be the
    /// reserved literals.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self, TokenizerError> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.len() < 4 || tokens[..4] != RESERVED_LITERALS {
            return Err(TokenizerError::InvalidVocab(
                "first four entries must be <pad>, <unk>, <bos>, <eos>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return Err(TokenizerError::InvalidVocab(format!("bad token at line {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Collects every token appearing at least `min_freq` times in `corpus`.
    /// Ordering is by descending frequency, then lexicographic.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in word_tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED_LITERALS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED_LITERALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens).expect("built vocab is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `vocab.txt` layout: one token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        Self::from_tokens(text.lines().map(String::from))
    }
}

/// Bijective entity-name ↔ id mapping. Ids are contiguous in `[0, N)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityCatalog {
    names: Vec<String>,
    index: HashMap<String, u32>,
    folded: HashMap<String, u32>,
}

impl EntityCatalog {
    /// Id order follows the iteration order of `names`.
    pub fn new(names: impl IntoIterator<Item = impl Into<String>>) -> Result<Self, TokenizerError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(names.len());
        let mut folded = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(TokenizerError::InvalidCatalog("empty entity name".into()));
            }
            if let Some(token) = crate::protocol::find_reserved(n) {
                return Err(TokenizerError::InvalidCatalog(format!(
                    "entity name {n:?} contains {token}"
                )));
            }
            if index.insert(n.clone(), i as u32).is_some() {
                return Err(TokenizerError::InvalidCatalog(format!("duplicate name {n:?}")));
            }
            folded.entry(fold_case(n)).or_insert(i as u32);
        }
        Ok(EntityCatalog {
            names,
            index,
            folded,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    /// Exact lookup, then case-folded lookup (the linker matches
    /// case-insensitively, so surfaces may differ in case from the name).
    pub fn lookup(&self, surface: &str) -> Option<u32> {
        self.index
            .get(surface)
            .or_else(|| self.folded.get(&fold_case(surface)))
            .copied()
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, u32> = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i as u32))
            .collect();
        serde_json::to_string_pretty(&map).expect("string map serializes")
    }

    /// Parses `entity2id.json`, an object mapping name → id.
    pub fn from_json(json: &str) -> Result<Self, TokenizerError> {
        let map: HashMap<String, u32> = serde_json::from_str(json)?;
        let mut slots: Vec<Option<String>> = vec![None; map.len()];
        for (name, id) in map {
            let slot = slots.get_mut(id as usize).ok_or_else(|| {
                TokenizerError::InvalidCatalog(format!("id {id} not in [0, N)"))
            })?;
            if slot.replace(name).is_some() {
                return Err(TokenizerError::InvalidCatalog(format!("id {id} assigned twice")));
            }
        }
        // Every slot is filled: N distinct ids < N.
        Self::new(slots.into_iter().map(|s| s.expect("bijection")))
    }
}

/// Per-char lowercase mapping that never changes the char count, so offsets
/// computed on folded text are valid on the original.
pub fn fold_char(c: char) -> char {
    let mut lower = c.to_lowercase();
    match (lower.next(), lower.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

pub fn fold_case(s: &str) -> String {
    s.chars().map(fold_char).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubTokenizerKind {
    Word,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubTokenizer {
    pub kind: SubTokenizerKind,
    pub vocab: Vocab,
}

impl SubTokenizer {
    pub fn word(vocab: Vocab) -> Self {
        SubTokenizer {
            kind: SubTokenizerKind::Word,
            vocab,
        }
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        match self.kind {
            SubTokenizerKind::Word => word_tokenize(text)
                .iter()
                .map(|t| self.vocab.id(t))
                .collect(),
        }
    }
}

/// Output of [`CompositeTokenizer::encode`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncodedInputs {
    /// Sub-tokenizer name → one id sequence per utterance, in dialog order.
    pub token_ids: IndexMap<String, Vec<Vec<u32>>>,
    /// Resolved catalog ids in mention order.
    pub entity_ids: Vec<u32>,
    /// Surfaces that did not resolve, in mention order.
    pub unknown_entities: Vec<String>,
    /// Module-specific dense features (e.g. a rating vector) attached by the
    /// owning module before `forward`.
    pub features: BTreeMap<String, Tensor>,
}

impl EncodedInputs {
    /// The id sequences of one sub-tokenizer concatenated in dialog order.
    pub fn flat(&self, sub: &str) -> Option<Vec<u32>> {
        self.token_ids
            .get(sub)
            .map(|per_utt| per_utt.iter().flatten().copied().collect())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TokenizerManifest {
    sub_tokenizers: Vec<SubTokenizerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SubTokenizerEntry {
    name: String,
    kind: SubTokenizerKind,
    vocab_file: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositeTokenizer {
    subs: IndexMap<String, SubTokenizer>,
    catalog: EntityCatalog,
}

impl CompositeTokenizer {
    pub fn new(
        subs: impl IntoIterator<Item = (String, SubTokenizer)>,
        catalog: EntityCatalog,
    ) -> Result<Self, TokenizerError> {
        let mut map = IndexMap::new();
        for (name, sub) in subs {
            if map.contains_key(&name) {
                return Err(TokenizerError::DuplicateSubTokenizer(name));
            }
            map.insert(name, sub);
        }
        if map.is_empty() {
            return Err(TokenizerError::NoSubTokenizers);
        }
        Ok(CompositeTokenizer { subs: map, catalog })
    }

    /// A tokenizer with a single `word` sub-tokenizer.
    pub fn word(vocab: Vocab, catalog: EntityCatalog) -> Self {
        Self::new([("word".to_string(), SubTokenizer::word(vocab))], catalog)
            .expect("one sub-tokenizer")
    }

    pub fn catalog(&self) -> &EntityCatalog {
        &self.catalog
    }

    pub fn sub_tokenizers(&self) -> impl Iterator<Item = (&str, &SubTokenizer)> {
        self.subs.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn encode(&self, d: &Dialog) -> EncodedInputs {
        let token_ids = self
            .subs
            .iter()
            .map(|(name, sub)| {
                let seqs = d
                    .utterances()
                    .iter()
                    .map(|u| sub.encode_text(u.text()))
                    .collect();
                (name.clone(), seqs)
            })
            .collect();
        let mut entity_ids = Vec::new();
        let mut unknown_entities = Vec::new();
        for (_, span) in d.mentions() {
            match span.entity_id.or_else(|| self.catalog.lookup(&span.surface)) {
                Some(id) if (id as usize) < self.catalog.len() => entity_ids.push(id),
                _ => unknown_entities.push(span.surface.clone()),
            }
        }
        EncodedInputs {
            token_ids,
            entity_ids,
            unknown_entities,
            features: BTreeMap::new(),
        }
    }

    pub fn decode(&self, sub: &str, ids: &[u32]) -> Result<String, TokenizerError> {
        let sub = self
            .subs
            .get(sub)
            .ok_or_else(|| TokenizerError::UnknownSubTokenizer(sub.to_string()))?;
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = sub.vocab.token(id).ok_or(TokenizerError::IdOutOfRange {
                id,
                size: sub.vocab.len(),
            })?;
            if id > EOS_ID {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }

    /// Asset files relative to the artifact root.
    pub fn to_files(&self) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut entries = Vec::new();
        for (i, (name, sub)) in self.subs.iter().enumerate() {
            let vocab_file = if i == 0 {
                "vocab.txt".to_string()
            } else {
                format!("vocab.{name}.txt")
            };
            files.push((format!("tokenizer/{vocab_file}"), sub.vocab.to_text().into_bytes()));
            entries.push(SubTokenizerEntry {
                name: name.clone(),
                kind: sub.kind,
                vocab_file,
            });
        }
        let manifest = TokenizerManifest {
            sub_tokenizers: entries,
        };
        files.push((
            "tokenizer/tokenizer.json".into(),
            serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
        ));
        files.push((
            "tokenizer/entity2id.json".into(),
            self.catalog.to_json().into_bytes(),
        ));
        files
    }

    /// Loads from an artifact root directory.
    pub fn load(root: &Path) -> Result<Self, TokenizerError> {
        let dir = root.join("tokenizer");
        let catalog = EntityCatalog::from_json(&fs::read_to_string(dir.join("entity2id.json"))?)?;
        let manifest_path = dir.join("tokenizer.json");
        let entries = if manifest_path.exists() {
            serde_json::from_str::<TokenizerManifest>(&fs::read_to_string(manifest_path)?)?
                .sub_tokenizers
        } else {
            vec![SubTokenizerEntry {
                name: "word".into(),
                kind: SubTokenizerKind::Word,
                vocab_file: "vocab.txt".into(),
            }]
        };
        let mut subs = Vec::with_capacity(entries.len());
        for e in entries {
            if e.vocab_file.contains('/') || e.vocab_file.contains("..") {
                return Err(TokenizerError::InvalidVocab(format!(
                    "vocab file {:?} escapes tokenizer dir",
                    e.vocab_file
                )));
            }
            let vocab = Vocab::from_text(&fs::read_to_string(dir.join(&e.vocab_file))?)?;
            subs.push((e.name, SubTokenizer { kind: e.kind, vocab }));
        }
        Self::new(subs, catalog)
    }
}
