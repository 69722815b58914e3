//! Token classes for the improvement breakdown.
//!
//! A tagger labels character spans of a text with its own segmentation.
//! Each model token takes the label covering most of its characters; ties
//! go to the alphabetically first label and uncovered tokens are `OTHER`.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub const CONTENT: &str = "CONTENT";
pub const FUNCTION: &str = "FUNCTION";
pub const NUMBER: &str = "NUMBER";
pub const OTHER: &str = "OTHER";

pub trait SpanTagger {
    fn tag_text(&self, text: &str) -> Vec<(Range<usize>, String)>;
}

const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "the", "of", "to", "in", "on", "at", "by", "for", "with", "from", "as", "into", "about", "over",
    "under", "and", "or", "but", "nor", "so", "yet", "if", "than", "that", "this", "these", "those", "is", "are",
    "was", "were", "be", "been", "being", "am", "it", "its", "he", "she", "they", "we", "you", "i", "his", "her",
    "their", "our", "your", "my", "not", "no", "do", "does", "did", "has", "have", "had", "what", "which", "who",
    "whom", "whose", "there", "here",
];

fn spans(text: &str) -> impl Iterator<Item = (Range<usize>, &str)> {
    text.split_whitespace().map(move |w| {
        let start = w.as_ptr() as usize - text.as_ptr() as usize;
        (start..start + w.len(), w)
    })
}

/// Function-word list plus numeral detection.
#[derive(Clone, Copy, Debug, Default)]
pub struct BuiltinTagger;

impl BuiltinTagger {
    pub fn classify(word: &str) -> &'static str {
        let w = word.to_lowercase();
        if !w.is_empty() && w.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',') && w.chars().any(|c| c.is_ascii_digit()) {
            NUMBER
        } else if FUNCTION_WORDS.contains(&w.as_str()) {
            FUNCTION
        } else if w.chars().any(char::is_alphanumeric) {
            CONTENT
        } else {
            OTHER
        }
    }
}

impl SpanTagger for BuiltinTagger {
    fn tag_text(&self, text: &str) -> Vec<(Range<usize>, String)> {
        spans(text).map(|(r, w)| (r, Self::classify(w).to_string())).collect()
    }
}

/// Word-to-tag lexicon read from a `word<whitespace>TAG` file; unknown
/// words fall back to the built-in classes.
#[derive(Clone, Debug, Default)]
pub struct LexiconTagger {
    pub tags: HashMap<String, String>,
}

impl LexiconTagger {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut tags = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(w), Some(t), None) => {
                    tags.insert(w.to_lowercase(), t.to_string());
                }
                _ => return Err(Error::Parse(format!("{}:{}: expected `word TAG`", path.display(), i + 1))),
            }
        }
        Ok(LexiconTagger { tags })
    }
}

impl SpanTagger for LexiconTagger {
    fn tag_text(&self, text: &str) -> Vec<(Range<usize>, String)> {
        spans(text)
            .map(|(r, w)| {
                let tag = self.tags.get(&w.to_lowercase()).cloned().unwrap_or_else(|| BuiltinTagger::classify(w).to_string());
                (r, tag)
            })
            .collect()
    }
}

/// Labels each token of `tokens` (joined by single spaces) by majority vote
/// over the tagger's spans.
pub fn tag_tokens(tagger: &dyn SpanTagger, tokens: &[&str]) -> Vec<String> {
    let text = tokens.join(" ");
    let tagged = tagger.tag_text(&text);
    let mut pos = 0;
    tokens
        .iter()
        .map(|tok| {
            let span = pos..pos + tok.len();
            pos = span.end + 1;
            let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
            for (r, tag) in &tagged {
                let overlap = r.end.min(span.end).saturating_sub(r.start.max(span.start));
                if overlap > 0 {
                    *votes.entry(tag.as_str()).or_default() += overlap;
                }
            }
            let mut best: Option<(&str, usize)> = None;
            for (tag, n) in votes {
                if best.map_or(true, |(_, b)| n > b) {
                    best = Some((tag, n));
                }
            }
            best.map(|b| b.0.to_string()).unwrap_or_else(|| OTHER.to_string())
        })
        .collect()
}
