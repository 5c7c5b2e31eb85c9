//! Lexicon sentiment around entity mentions, turned into ±1 ratings.

use std::collections::BTreeMap;

use crate::protocol::{Dialog, EntitySpan, Role, Utterance};
use crate::tokenization::{word_tokenize, EntityCatalog};

use super::RecError;

/// Tokens on each side of a mention that count toward its sentiment.
pub const SENTIMENT_WINDOW: usize = 5;

const POSITIVE: &[&str] = &[
    "like", "liked", "likes", "love", "loved", "loves", "enjoy", "enjoyed", "enjoys", "great",
    "good", "awesome", "amazing", "favorite", "fun", "funny", "best", "fantastic", "excellent",
    "hilarious", "wonderful",
];
const NEGATIVE: &[&str] = &[
    "hate", "hated", "hates", "dislike", "disliked", "boring", "bad", "awful", "terrible",
    "worst", "horrible", "lame", "meh",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentimentLexicon {
    polarity: BTreeMap<String, i8>,
}

impl Default for SentimentLexicon {
    fn default() -> Self {
        let entries = POSITIVE
            .iter()
            .map(|w| (w.to_string(), 1))
            .chain(NEGATIVE.iter().map(|w| (w.to_string(), -1)));
        Self::new(entries).expect("built-in lexicon is valid")
    }
}

impl SentimentLexicon {
    pub fn new(entries: impl IntoIterator<Item = (String, i8)>) -> Result<Self, RecError> {
        let mut polarity = BTreeMap::new();
        for (word, p) in entries {
            if word.is_empty() || word != word.to_lowercase() {
                return Err(RecError::InvalidLexicon(format!("{word:?} is not lowercase")));
            }
            if p != 1 && p != -1 {
                return Err(RecError::InvalidLexicon(format!("{word:?} has polarity {p}")));
            }
            if polarity.insert(word.clone(), p).is_some() {
                return Err(RecError::InvalidLexicon(format!("duplicate word {word:?}")));
            }
        }
        Ok(SentimentLexicon { polarity })
    }

    pub fn polarity(&self, word: &str) -> i32 {
        self.polarity.get(word).copied().unwrap_or(0) as i32
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.polarity.keys().map(String::as_str)
    }

    /// `tokenizer/sentiment.json`: word → ±1.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.polarity).expect("map serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, RecError> {
        let map: BTreeMap<String, i8> =
            serde_json::from_str(json).map_err(|e| RecError::InvalidLexicon(e.to_string()))?;
        Self::new(map)
    }
}

/// Sign of the summed polarity of up to [`SENTIMENT_WINDOW`] tokens on each
/// side of the span. Neutral mentions count as +1.
pub fn mention_sentiment(utterance: &Utterance, span: &EntitySpan, lexicon: &SentimentLexicon) -> i8 {
    let before: String = utterance.text().chars().take(span.start).collect();
    let after: String = utterance.text().chars().skip(span.end).collect();
    let before = word_tokenize(&before);
    let after = word_tokenize(&after);
    let sum: i32 = before
        .iter()
        .rev()
        .take(SENTIMENT_WINDOW)
        .chain(after.iter().take(SENTIMENT_WINDOW))
        .map(|t| lexicon.polarity(t))
        .sum();
    if sum < 0 {
        -1
    } else {
        1
    }
}

/// Sparse ±1 ratings over a catalog of `n` items.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RatingVector {
    n: usize,
    ratings: BTreeMap<u32, i8>,
}

impl RatingVector {
    pub fn new(n: usize) -> Self {
        RatingVector {
            n,
            ratings: BTreeMap::new(),
        }
    }

    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (u32, i8)>) -> Result<Self, RecError> {
        let mut r = Self::new(n);
        for (id, v) in pairs {
            r.set(id, v)?;
        }
        Ok(r)
    }

    pub fn set(&mut self, id: u32, rating: i8) -> Result<(), RecError> {
        if id as usize >= self.n {
            return Err(RecError::ItemOutOfRange { id, n: self.n });
        }
        if rating != 1 && rating != -1 {
            return Err(RecError::InvalidRating(rating));
        }
        self.ratings.insert(id, rating);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<i8> {
        self.ratings.get(&id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, i8)> + '_ {
        self.ratings.iter().map(|(&k, &v)| (k, v))
    }

    /// Dense {-1, 0, +1} vector.
    pub fn dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.n];
        for (id, r) in self.iter() {
            v[id as usize] = r as f64;
        }
        v
    }
}

/// Ratings from User-turn mentions; the last mention of an item wins.
pub fn extract_ratings(d: &Dialog, catalog: &EntityCatalog, lexicon: &SentimentLexicon) -> RatingVector {
    let mut out = RatingVector::new(catalog.len());
    for (u, span) in d.mentions().filter(|(u, _)| u.role() == Role::User) {
        let id = span.entity_id.or_else(|| catalog.lookup(&span.surface));
        if let Some(id) = id.filter(|&id| (id as usize) < catalog.len()) {
            out.set(id, mention_sentiment(u, span, lexicon))
                .expect("id checked against catalog size");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::parse_dialog;

    fn lex(entries: &[(&str, i8)]) -> SentimentLexicon {
        SentimentLexicon::new(entries.iter().map(|(w, p)| (w.to_string(), *p))).unwrap()
    }

    /// Independent window oracle: replace the mention by a sentinel token and
    /// read neighbours off one token stream.
    fn oracle(u: &Utterance, span: &EntitySpan, lexicon: &SentimentLexicon) -> i8 {
        let chars: Vec<char> = u.text().chars().collect();
        let before: String = chars[..span.start].iter().collect();
        let after: String = chars[span.end..].iter().collect();
        let mut toks = word_tokenize(&before);
        let at = toks.len();
        toks.push("\u{0}mention".into());
        toks.extend(word_tokenize(&after));
        let lo = at.saturating_sub(5);
        let hi = (at + 6).min(toks.len());
        let sum: i32 = (lo..hi).filter(|&i| i != at).map(|i| lexicon.polarity(&toks[i])).sum();
        if sum < 0 { -1 } else { 1 }
    }

    fn first_mention(wire: &str) -> (Utterance, EntitySpan) {
        let d = parse_dialog(wire).unwrap();
        let u = d.last().clone();
        let s = u.spans()[0].clone();
        (u, s)
    }

    #[test]
    fn windowed_examples() {
        let l = lex(&[("like", 1), ("hated", -1)]);
        let (u, s) = first_mention("User: I like <entity>Billy Madison (1995)</entity>");
        assert_eq!(mention_sentiment(&u, &s, &l), 1);
        assert_eq!(oracle(&u, &s, &l), 1);
        let (u, s) = first_mention("User: I hated <entity>X</entity>");
        assert_eq!(mention_sentiment(&u, &s, &l), -1);
        assert_eq!(oracle(&u, &s, &l), -1);
        let (u, s) = first_mention("User: what about <entity>X</entity>");
        assert_eq!(mention_sentiment(&u, &s, &l), 1);
    }

    #[test]
    fn window_is_five_tokens() {
        let l = lex(&[("hated", -1)]);
        // "hated" is the sixth token before the mention.
        let (u, s) = first_mention("User: hated a b c d e <entity>X</entity>");
        assert_eq!(mention_sentiment(&u, &s, &l), 1);
        let (u, s) = first_mention("User: hated b c d e <entity>X</entity>");
        assert_eq!(mention_sentiment(&u, &s, &l), -1);
        let (u, s) = first_mention("User: <entity>X</entity> a b c d hated");
        assert_eq!(mention_sentiment(&u, &s, &l), -1);
    }

    #[test]
    fn window_matches_oracle_on_many_texts() {
        use rand::{rngs::StdRng, Rng, SeedableRng};
        let l = lex(&[("good", 1), ("bad", -1), ("great", 1)]);
        let words = ["good", "bad", "great", "the", "a", ",", "movie", "!"];
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..300 {
            let mut parts = Vec::new();
            for _ in 0..rng.random_range(0..12) {
                parts.push(words[rng.random_range(0..words.len())].to_string());
            }
            let at = rng.random_range(0..=parts.len());
            parts.insert(at, "<entity>Some Film</entity>".into());
            let wire = format!("User: {}", parts.join(" "));
            let (u, s) = first_mention(&wire);
            assert_eq!(mention_sentiment(&u, &s, &l), oracle(&u, &s, &l), "{wire}");
        }
    }

    #[test]
    fn ratings_from_user_turns_last_wins() {
        let catalog = EntityCatalog::new(["A", "B"]).unwrap();
        let l = lex(&[("like", 1), ("hate", -1)]);
        let d = parse_dialog("User: hello").unwrap();
        assert!(extract_ratings(&d, &catalog, &l).is_empty());

        let d = parse_dialog("User: I like <entity>B</entity>").unwrap();
        let r = extract_ratings(&d, &catalog, &l);
        assert_eq!(r.iter().collect::<Vec<_>>(), vec![(1, 1)]);

        let d = parse_dialog(
            "User: I like <entity>A</entity><sep>System: I hate <entity>B</entity><sep>User: actually I hate <entity>A</entity>",
        )
        .unwrap();
        let r = extract_ratings(&d, &catalog, &l);
        assert_eq!(r.iter().collect::<Vec<_>>(), vec![(0, -1)]);
    }

    #[test]
    fn lexicon_validation() {
        assert!(SentimentLexicon::new([("Good".to_string(), 1)]).is_err());
        assert!(SentimentLexicon::new([("good".to_string(), 2)]).is_err());
        let l = SentimentLexicon::default();
        assert_eq!(SentimentLexicon::from_json(&l.to_json()).unwrap(), l);
    }
}
