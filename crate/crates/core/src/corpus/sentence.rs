use std::collections::HashMap;

/// A token that suppresses a sentence break when it precedes a period.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Abbreviation {
    /// Token text without the trailing period, matched case-insensitively.
    pub token: String,
    /// Only suppress when the next non-space character is a digit ("No. 4").
    pub before_digit_only: bool,
}

impl Abbreviation {
    pub fn new(token: &str) -> Self {
        Self {
            token: token.to_lowercase(),
            before_digit_only: false,
        }
    }

    pub fn before_digit(token: &str) -> Self {
        Self {
            token: token.to_lowercase(),
            before_digit_only: true,
        }
    }
}

/// Rule-based sentence splitter.
///
/// A break falls after `.`, `!` or `?` when the terminator is followed by
/// whitespace and an uppercase letter, or by the end of the text. A period
/// closing a listed abbreviation never breaks.
#[derive(Debug, Clone)]
pub struct SentenceSplitter {
    abbreviations: HashMap<String, Abbreviation>,
}

impl Default for SentenceSplitter {
    fn default() -> Self {
        let mut splitter = Self {
            abbreviations: HashMap::new(),
        };
        for token in ["Dr", "Mr", "Mrs", "vs", "e.g", "i.e", "approx", "cm", "mm"] {
            splitter.add(Abbreviation::new(token));
        }
        splitter.add(Abbreviation::before_digit("No"));
        splitter
    }
}

impl SentenceSplitter {
    /// A splitter with no abbreviations at all.
    pub fn empty() -> Self {
        Self {
            abbreviations: HashMap::new(),
        }
    }

    pub fn add(&mut self, abbreviation: Abbreviation) {
        self.abbreviations.insert(abbreviation.token.clone(), abbreviation);
    }

    pub fn with(mut self, abbreviation: Abbreviation) -> Self {
        self.add(abbreviation);
        self
    }

    pub fn split<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let mut sentences = Vec::new();
        let mut start = 0;
        for (idx, ch) in text.char_indices() {
            if !matches!(ch, '.' | '!' | '?') {
                continue;
            }
            let end = idx + 1;
            let rest = &text[end..];
            let after_space = rest.trim_start();
            let breaks = if after_space.is_empty() {
                true
            } else {
                let has_space = after_space.len() < rest.len();
                has_space && after_space.chars().next().is_some_and(char::is_uppercase)
            };
            if !breaks || (ch == '.' && self.suppressed(&text[start..idx], after_space)) {
                continue;
            }
            push_trimmed(&mut sentences, &text[start..end]);
            start = end;
        }
        push_trimmed(&mut sentences, &text[start..]);
        sentences
    }

    fn suppressed(&self, before: &str, after: &str) -> bool {
        let token = before
            .rsplit(char::is_whitespace)
            .next()
            .unwrap_or("")
            .trim_start_matches(|c: char| !c.is_alphanumeric());
        match self.abbreviations.get(&token.to_lowercase()) {
            Some(abbr) if abbr.before_digit_only => after.chars().next().is_some_and(|c| c.is_ascii_digit()),
            Some(_) => true,
            None => false,
        }
    }
}

fn push_trimmed<'a>(out: &mut Vec<&'a str>, piece: &'a str) {
    let piece = piece.trim();
    if !piece.is_empty() {
        out.push(piece);
    }
}

/// Splits text into trimmed sentences with the default clinical abbreviations.
pub fn segment_sentences(text: &str) -> Vec<String> {
    thread_local! {
        static DEFAULT: SentenceSplitter = SentenceSplitter::default();
    }
    DEFAULT.with(|s| s.split(text).into_iter().map(str::to_owned).collect())
}
