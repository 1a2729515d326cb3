//! Tokenization and word-level helpers shared by every phase.
//!
//! Tokens are maximal runs of alphanumeric characters. An apostrophe or hyphen
//! stays inside a token only when it sits between two alphanumerics, so
//! `agent's` and `multi-turn` are single tokens while `(RL)` becomes `rl`.
//! Tokens are lowercased and typographic apostrophes/hyphens are folded to
//! their ASCII forms.

use serde::{Deserialize, Serialize};

/// Normalized tokens plus the byte span of each token in its source text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub tokens: Vec<String>,
    pub offsets: Vec<(usize, usize)>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Character length of tokens `range` joined by single spaces.
    pub fn joined_len(&self, range: std::ops::Range<usize>) -> usize {
        let n = range.len();
        let chars: usize = self.tokens[range].iter().map(|t| t.chars().count()).sum();
        chars + n.saturating_sub(1)
    }
}

fn is_connector(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}' | '\u{02BC}' | '-' | '\u{2010}' | '\u{2011}')
}

fn fold_char(c: char, out: &mut String) {
    match c {
        '\u{2019}' | '\u{02BC}' => out.push('\''),
        '\u{2010}' | '\u{2011}' => out.push('-'),
        _ => out.extend(c.to_lowercase()),
    }
}

pub fn tokenize(text: &str) -> TokenStream {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut stream = TokenStream::default();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].1.is_alphanumeric() {
            i += 1;
            continue;
        }
        let start = chars[i].0;
        let mut token = String::new();
        let mut j = i;
        while j < chars.len() {
            let c = chars[j].1;
            if c.is_alphanumeric() {
                fold_char(c, &mut token);
                j += 1;
            } else if is_connector(c)
                && j + 1 < chars.len()
                && chars[j + 1].1.is_alphanumeric()
            {
                fold_char(c, &mut token);
                j += 1;
            } else {
                break;
            }
        }
        let end = chars.get(j).map_or(text.len(), |(b, _)| *b);
        stream.tokens.push(token);
        stream.offsets.push((start, end));
        i = j;
    }
    stream
}

/// Lowercases, folds typographic variants, and collapses whitespace runs.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        match c {
            '\u{2018}' | '\u{2019}' | '\u{02BC}' => out.push('\''),
            '\u{201C}' | '\u{201D}' => out.push('"'),
            '\u{2010}' | '\u{2011}' | '\u{2012}' | '\u{2013}' | '\u{2014}' => out.push('-'),
            '\u{2026}' => out.push_str("..."),
            _ => out.extend(c.to_lowercase()),
        }
    }
    out
}

/// Whitespace-separated word count. Hyphenated words count once.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keeps the first `limit` whitespace-separated words, re-joined by single spaces.
/// Returns `None` when the text is already within the limit.
pub fn truncate_words(text: &str, limit: usize) -> Option<String> {
    if word_count(text) <= limit {
        return None;
    }
    Some(text.split_whitespace().take(limit).collect::<Vec<_>>().join(" "))
}
