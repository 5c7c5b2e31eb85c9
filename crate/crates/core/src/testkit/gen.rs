//! Random inputs for property checks.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::protocol::{Dialog, EntitySpan, Role, Utterance};

/// Plain-text alphabet with markup-ish characters, multi-byte chars and
/// whitespace so offsets and escaping get exercised.
const TEXT_CHARS: &[char] = &[
    'a', 'b', 'e', 'n', 's', 'p', 't', 'y', 'U', 'S', ' ', ' ', ' ', '<', '>', '/', ':', '!', '?', '(', ')', '1', '9',
    'é', 'ß', '日', '本', '\u{1F3AC}', '\n', '\t', '-', '\'',
];

const SURFACE_CHARS: &[char] = &[
    'A', 'b', 'c', 'M', 'o', 'v', 'i', 'e', ' ', '(', ')', '2', '0', '<', '>', 'ü', '日', ':',
];

fn text_from(rng: &mut impl Rng, alphabet: &[char], len: std::ops::Range<usize>) -> String {
    let len = rng.random_range(len);
    (0..len).map(|_| *alphabet.choose(rng).expect("non-empty alphabet")).collect()
}

/// One utterance with 0..4 entity spans (ids absent, as on the wire).
pub fn random_utterance(rng: &mut impl Rng) -> Utterance {
    loop {
        let role = if rng.random_bool(0.5) { Role::User } else { Role::System };
        let mut text = String::new();
        let mut chars = 0;
        let mut spans = Vec::new();
        for _ in 0..rng.random_range(0..=4) {
            let plain = text_from(rng, TEXT_CHARS, 0..12);
            chars += plain.chars().count();
            text.push_str(&plain);
            let surface = text_from(rng, SURFACE_CHARS, 1..10);
            let len = surface.chars().count();
            spans.push(EntitySpan {
                surface: surface.clone(),
                start: chars,
                end: chars + len,
                entity_id: None,
            });
            chars += len;
            text.push_str(&surface);
        }
        text.push_str(&text_from(rng, TEXT_CHARS, 0..12));
        // Adjacent pieces can spell a reserved token; draw again.
        if let Ok(u) = Utterance::new(role, text, spans) {
            return u;
        }
    }
}

pub fn random_dialog(rng: &mut impl Rng) -> Dialog {
    let turns = rng.random_range(1..=6);
    Dialog::new((0..turns).map(|_| random_utterance(rng)).collect()).expect("non-empty")
}

const NAME_WORDS: &[&str] = &[
    "up", "it", "the", "ring", "star", "wars", "night", "day", "love", "a", "dark", "knight", "toy", "story", "héros",
];

/// `count` distinct titles built from a small word pool, so that prefixes
/// and overlaps between names are common.
pub fn random_catalog_names(rng: &mut impl Rng, count: usize) -> Vec<String> {
    let mut names: Vec<String> = Vec::with_capacity(count);
    while names.len() < count {
        let words = rng.random_range(1..=3);
        let mut name = (0..words)
            .map(|_| capitalize(NAME_WORDS.choose(rng).expect("non-empty")))
            .collect::<Vec<_>>()
            .join(" ");
        if rng.random_bool(0.4) {
            name.push_str(&format!(" ({})", rng.random_range(1990..2000)));
        }
        if !names.contains(&name) {
            names.push(name);
        }
    }
    names
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Text mixing catalog names (in varied casing), pool words, glued
/// alphanumerics and punctuation.
pub fn random_linker_text(rng: &mut impl Rng, names: &[String]) -> String {
    let mut out = String::new();
    for _ in 0..rng.random_range(1..20) {
        let piece = match rng.random_range(0..6) {
            0 | 1 => {
                let n = names.choose(rng).expect("non-empty catalog").clone();
                match rng.random_range(0..3) {
                    0 => n.to_lowercase(),
                    1 => n.to_uppercase(),
                    _ => n,
                }
            }
            2 | 3 => NAME_WORDS.choose(rng).expect("non-empty").to_string(),
            4 => ["x", "s", "9", "_"].choose(rng).expect("non-empty").to_string(),
            _ => [",", ".", "!", "(1995)", "-", "'"].choose(rng).expect("non-empty").to_string(),
        };
        out.push_str(&piece);
        if rng.random_bool(0.7) {
            out.push(' ');
        }
    }
    out
}
