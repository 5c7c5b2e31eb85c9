//! Text wire format exchanged between modules.
//!
//! A dialog travels as a single string:
//!
//! ```text
//! dialog := utt ("<sep>" utt)*
//! utt    := ("User" | "System") ": " body
//! body   := (plain | "<entity>" name "</entity>")*
//! ```
//!
//! [`parse_dialog`] turns that string into a [`Dialog`] whose utterances carry
//! clean text plus character-offset [`EntitySpan`]s; [`render_dialog`] is the
//! exact inverse for every string the parser accepts.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SEP: &str = "<sep>";
pub const ENTITY_OPEN: &str = "<entity>";
pub const ENTITY_CLOSE: &str = "</entity>";

/// The three reserved markup tokens. None of them may appear in clean text.
pub const RESERVED_TOKENS: [&str; 3] = [SEP, ENTITY_OPEN, ENTITY_CLOSE];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("dialog is empty")]
    EmptyDialog,
    #[error("utterance {index}: expected \"User: \" or \"System: \" prefix, found {found:?}")]
    BadRole { index: usize, found: String },
    #[error("utterance {index}: unbalanced entity tag")]
    UnbalancedEntityTag { index: usize },
    #[error("utterance {index}: nested entity tag")]
    NestedEntityTag { index: usize },
    #[error("utterance {index}: empty entity tag")]
    EmptyEntity { index: usize },
    #[error("reserved token {token:?} in text")]
    ReservedToken { token: &'static str },
    #[error("invalid entity span {start}..{end}: {reason}")]
    InvalidSpan {
        start: usize,
        end: usize,
        reason: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    User,
    System,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "User",
            Role::System => "System",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An entity mention inside an utterance. Offsets count `char`s, not bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub surface: String,
    pub start: usize,
    pub end: usize,
    /// Catalog id, when the surface resolved. The wire format does not carry
    /// ids, so a freshly parsed span always has `None`.
    pub entity_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    role: Role,
    text: String,
    spans: Vec<EntitySpan>,
}

/// Returns the first reserved token found in `text`, if any.
pub fn find_reserved(text: &str) -> Option<&'static str> {
    RESERVED_TOKENS.into_iter().find(|t| text.contains(t))
}

impl Utterance {
    /// Builds an utterance, checking every span and markup invariant.
    pub fn new(
        role: Role,
        text: impl Into<String>,
        spans: Vec<EntitySpan>,
    ) -> Result<Self, ProtocolError> {
        let text = text.into();
        if let Some(token) = find_reserved(&text) {
            return Err(ProtocolError::ReservedToken { token });
        }
        let chars: Vec<char> = text.chars().collect();
        let mut prev_end = 0;
        for span in &spans {
            let bad = |reason| ProtocolError::InvalidSpan {
                start: span.start,
                end: span.end,
                reason,
            };
            if span.start >= span.end {
                return Err(bad("empty or inverted"));
            }
            if span.end > chars.len() {
                return Err(bad("out of range"));
            }
            if span.start < prev_end {
                return Err(bad("overlapping or unsorted"));
            }
            let sub: String = chars[span.start..span.end].iter().collect();
            if sub != span.surface {
                return Err(bad("surface does not match text"));
            }
            prev_end = span.end;
        }
        Ok(Utterance { role, text, spans })
    }

    /// An utterance with no entity spans.
    pub fn plain(role: Role, text: impl Into<String>) -> Result<Self, ProtocolError> {
        Self::new(role, text, Vec::new())
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn spans(&self) -> &[EntitySpan] {
        &self.spans
    }

    /// Returns a copy with spans replaced. The new spans are validated.
    pub fn with_spans(&self, spans: Vec<EntitySpan>) -> Result<Self, ProtocolError> {
        Self::new(self.role, self.text.clone(), spans)
    }

    /// Sets catalog ids on existing spans; span geometry is unchanged.
    pub fn resolve_ids(&mut self, mut lookup: impl FnMut(&str) -> Option<u32>) {
        for span in &mut self.spans {
            span.entity_id = lookup(&span.surface);
        }
    }

    /// Renders the body (text with entity markup) without the role prefix.
    pub fn render_body(&self) -> String {
        let mut out = String::with_capacity(self.text.len() + self.spans.len() * 17);
        let mut chars = self.text.chars();
        let mut pos = 0;
        for span in &self.spans {
            out.extend(chars.by_ref().take(span.start - pos));
            out.push_str(ENTITY_OPEN);
            out.extend(chars.by_ref().take(span.end - span.start));
            out.push_str(ENTITY_CLOSE);
            pos = span.end;
        }
        out.extend(chars);
        out
    }

    /// Renders `role ": " body`.
    pub fn render(&self) -> String {
        format!("{}: {}", self.role, self.render_body())
    }
}

/// A non-empty ordered list of utterances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    utterances: Vec<Utterance>,
}

impl Dialog {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self, ProtocolError> {
        if utterances.is_empty() {
            return Err(ProtocolError::EmptyDialog);
        }
        Ok(Dialog { utterances })
    }

    pub fn single(utterance: Utterance) -> Self {
        Dialog {
            utterances: vec![utterance],
        }
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn last(&self) -> &Utterance {
        self.utterances.last().expect("dialog is non-empty")
    }

    /// The final utterance if it is a user turn.
    pub fn last_user_turn(&self) -> Option<&Utterance> {
        Some(self.last()).filter(|u| u.role() == Role::User)
    }

    /// Replaces the final utterance. Used by processors that annotate the
    /// latest turn.
    pub fn with_last(&self, utterance: Utterance) -> Dialog {
        let mut utterances = self.utterances.clone();
        *utterances.last_mut().expect("dialog is non-empty") = utterance;
        Dialog { utterances }
    }

    /// All entity mentions in dialog order, paired with their utterance.
    pub fn mentions(&self) -> impl Iterator<Item = (&Utterance, &EntitySpan)> {
        self.utterances
            .iter()
            .flat_map(|u| u.spans().iter().map(move |s| (u, s)))
    }
}

/// Returns `d` with `u` appended; `d` itself is untouched.
pub fn append_utterance(d: &Dialog, u: Utterance) -> Dialog {
    let mut utterances = Vec::with_capacity(d.len() + 1);
    utterances.extend_from_slice(d.utterances());
    utterances.push(u);
    Dialog { utterances }
}

pub fn render_dialog(d: &Dialog) -> String {
    d.utterances
        .iter()
        .map(Utterance::render)
        .collect::<Vec<_>>()
        .join(SEP)
}

pub fn parse_dialog(wire: &str) -> Result<Dialog, ProtocolError> {
    if wire.trim().is_empty() {
        return Err(ProtocolError::EmptyDialog);
    }
    let utterances = wire
        .split(SEP)
        .enumerate()
        .map(|(index, raw)| parse_utterance_at(raw, index))
        .collect::<Result<Vec<_>, _>>()?;
    Dialog::new(utterances)
}

/// Parses a single `role ": " body` segment.
pub fn parse_utterance(raw: &str) -> Result<Utterance, ProtocolError> {
    if raw.contains(SEP) {
        return Err(ProtocolError::ReservedToken { token: SEP });
    }
    parse_utterance_at(raw, 0)
}

/// Parses a markup body (no role prefix) for the given role.
pub fn parse_body(role: Role, body: &str) -> Result<Utterance, ProtocolError> {
    if body.contains(SEP) {
        return Err(ProtocolError::ReservedToken { token: SEP });
    }
    parse_body_at(role, body, 0)
}

fn parse_utterance_at(raw: &str, index: usize) -> Result<Utterance, ProtocolError> {
    let (role, body) = if let Some(body) = raw.strip_prefix("User: ") {
        (Role::User, body)
    } else if let Some(body) = raw.strip_prefix("System: ") {
        (Role::System, body)
    } else {
        let found: String = raw.chars().take(16).collect();
        return Err(ProtocolError::BadRole { index, found });
    };
    parse_body_at(role, body, index)
}

fn parse_body_at(role: Role, body: &str, index: usize) -> Result<Utterance, ProtocolError> {
    let mut text = String::with_capacity(body.len());
    let mut text_chars = 0usize;
    let mut spans = Vec::new();
    let mut rest = body;
    // Char offset where the currently open entity began.
    let mut open: Option<usize> = None;

    loop {
        let next_open = rest.find(ENTITY_OPEN);
        let next_close = rest.find(ENTITY_CLOSE);
        let (pos, is_open) = match (next_open, next_close) {
            (None, None) => break,
            (Some(o), None) => (o, true),
            (None, Some(c)) => (c, false),
            (Some(o), Some(c)) => {
                if o < c {
                    (o, true)
                } else {
                    (c, false)
                }
            }
        };
        let chunk = &rest[..pos];
        text.push_str(chunk);
        text_chars += chunk.chars().count();
        if is_open {
            if open.is_some() {
                return Err(ProtocolError::NestedEntityTag { index });
            }
            open = Some(text_chars);
            rest = &rest[pos + ENTITY_OPEN.len()..];
        } else {
            let start = open.take().ok_or(ProtocolError::UnbalancedEntityTag { index })?;
            if start == text_chars {
                return Err(ProtocolError::EmptyEntity { index });
            }
            let surface: String = text.chars().skip(start).collect();
            spans.push(EntitySpan {
                surface,
                start,
                end: text_chars,
                entity_id: None,
            });
            rest = &rest[pos + ENTITY_CLOSE.len()..];
        }
    }
    if open.is_some() {
        return Err(ProtocolError::UnbalancedEntityTag { index });
    }
    text.push_str(rest);
    Utterance::new(role, text, spans)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAPER_CONTEXT: [&str; 3] = [
        "User: Hello!",
        "System: Hello, I have some movie ideas for you. Have you watched the movie <entity>Forever My Girl (2018)</entity> ?",
        "User: Looking for movies in the comedy category. I like Adam Sandler movies like <entity>Billy Madison (1995)</entity> Oh no is that good?",
    ];

    #[test]
    fn parses_three_turn_context() {
        let wire = PAPER_CONTEXT.join(SEP);
        let d = parse_dialog(&wire).unwrap();
        let roles: Vec<Role> = d.utterances().iter().map(|u| u.role()).collect();
        assert_eq!(roles, vec![Role::User, Role::System, Role::User]);
        let surfaces: Vec<&str> = d.mentions().map(|(_, s)| s.surface.as_str()).collect();
        assert_eq!(surfaces, vec!["Forever My Girl (2018)", "Billy Madison (1995)"]);
        assert_eq!(render_dialog(&d), wire);
    }

    #[test]
    fn single_plain_turn() {
        let d = parse_dialog("User: Hello!").unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.last().role(), Role::User);
        assert_eq!(d.last().text(), "Hello!");
        assert!(d.last().spans().is_empty());
    }

    #[test]
    fn empty_and_whitespace_rejected() {
        assert_eq!(parse_dialog(""), Err(ProtocolError::EmptyDialog));
        assert_eq!(parse_dialog("  \n\t"), Err(ProtocolError::EmptyDialog));
    }

    #[test]
    fn role_errors() {
        assert!(matches!(
            parse_dialog("user: hi"),
            Err(ProtocolError::BadRole { index: 0, .. })
        ));
        assert!(matches!(
            parse_dialog("User:hi"),
            Err(ProtocolError::BadRole { .. })
        ));
        assert!(matches!(
            parse_dialog("User:  hi<sep>Bot: x"),
            Err(ProtocolError::BadRole { index: 1, .. })
        ));
        assert!(matches!(
            parse_dialog("User: hi<sep>"),
            Err(ProtocolError::BadRole { index: 1, .. })
        ));
    }

    #[test]
    fn tag_errors() {
        assert!(matches!(
            parse_dialog("User: <entity>Up"),
            Err(ProtocolError::UnbalancedEntityTag { .. })
        ));
        assert!(matches!(
            parse_dialog("User: Up</entity>"),
            Err(ProtocolError::UnbalancedEntityTag { .. })
        ));
        assert!(matches!(
            parse_dialog("User: <entity>a<entity>b</entity></entity>"),
            Err(ProtocolError::NestedEntityTag { .. })
        ));
        assert!(matches!(
            parse_dialog("User: <entity></entity>"),
            Err(ProtocolError::EmptyEntity { .. })
        ));
    }

    #[test]
    fn markup_that_reassembles_a_reserved_token_is_rejected() {
        assert!(matches!(
            parse_dialog("User: <se<entity>p></entity>"),
            Err(ProtocolError::ReservedToken { token: SEP })
        ));
    }

    #[test]
    fn render_wraps_spans() {
        let u = Utterance::plain(Role::User, "Hello!").unwrap();
        assert_eq!(render_dialog(&Dialog::single(u)), "User: Hello!");

        let span = EntitySpan {
            surface: "Up (2009)".into(),
            start: 7,
            end: 16,
            entity_id: None,
        };
        let u = Utterance::new(Role::User, "I like Up (2009)", vec![span]).unwrap();
        assert_eq!(
            render_dialog(&Dialog::single(u)),
            "User: I like <entity>Up (2009)</entity>"
        );
    }

    #[test]
    fn offsets_are_in_chars() {
        let d = parse_dialog("User: Ça <entity>Amélie (2001)</entity>!").unwrap();
        let s = &d.last().spans()[0];
        assert_eq!((s.start, s.end), (3, 16));
        assert_eq!(s.surface, "Amélie (2001)");
    }

    #[test]
    fn utterance_rejects_bad_spans() {
        let span = |s: usize, e: usize, surface: &str| EntitySpan {
            surface: surface.into(),
            start: s,
            end: e,
            entity_id: None,
        };
        assert!(Utterance::new(Role::User, "abc", vec![span(1, 1, "")]).is_err());
        assert!(Utterance::new(Role::User, "abc", vec![span(2, 4, "c")]).is_err());
        assert!(Utterance::new(Role::User, "abc", vec![span(0, 2, "ab"), span(1, 3, "bc")]).is_err());
        assert!(Utterance::new(Role::User, "abc", vec![span(0, 2, "xx")]).is_err());
        assert!(Utterance::plain(Role::User, "a <sep> b").is_err());
    }

    #[test]
    fn append_is_value_semantics() {
        let d = parse_dialog("User: Hello!").unwrap();
        let u = Utterance::plain(Role::System, "Hi").unwrap();
        let d2 = append_utterance(&d, u.clone());
        assert_eq!(d.len(), 1);
        assert_eq!(d2.len(), 2);
        assert_eq!(d2.last(), &u);
    }

    #[test]
    fn adjacent_spans_round_trip() {
        let wire = "System: <entity>A</entity><entity>B</entity> and more";
        let d = parse_dialog(wire).unwrap();
        assert_eq!(d.last().spans().len(), 2);
        assert_eq!(render_dialog(&d), wire);
    }
}
