//! Knowledge extractors: mine candidate fragments from a user's dialogue input.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, GenerationRequest, Generator, DEFAULT_MAX_LENGTH, EXTRACT_TEMPLATE};
use crate::text;

/// Sentences shorter than this many tokens are never candidates.
pub const MIN_SENTENCE_TOKENS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub candidates: Vec<Candidate>,
    /// Soft failures, e.g. an unparseable judge reply.
    pub warnings: Vec<String>,
}

impl ExtractionResult {
    fn push_unique(&mut self, seen: &mut BTreeSet<String>, text: &str, confidence: f64) {
        let key = text::tokens(text).join(" ");
        if !key.is_empty() && seen.insert(key) {
            self.candidates.push(Candidate {
                text: String::from(text.trim()),
                confidence: confidence.clamp(0.0, 1.0),
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExtractError {
    #[error("lexicon is empty")]
    EmptyLexicon,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub trait Extractor {
    fn extract(&self, user_input: &str) -> Result<ExtractionResult, ExtractError>;
}

impl<E: Extractor + ?Sized> Extractor for &E {
    fn extract(&self, user_input: &str) -> Result<ExtractionResult, ExtractError> {
        (**self).extract(user_input)
    }
}

/// Extracts nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullExtractor;

impl Extractor for NullExtractor {
    fn extract(&self, _: &str) -> Result<ExtractionResult, ExtractError> {
        Ok(ExtractionResult::default())
    }
}

/// Lowercased single-token domain terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    terms: BTreeSet<String>,
}

impl Lexicon {
    pub fn new<I, S>(terms: I) -> Result<Self, ExtractError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let terms: BTreeSet<String> = terms
            .into_iter()
            .flat_map(|t| text::tokens(t.as_ref()))
            .collect();
        if terms.is_empty() {
            return Err(ExtractError::EmptyLexicon);
        }
        Ok(Self { terms })
    }

    /// One term per line; `#` starts a comment; blank lines are skipped.
    pub fn parse(source: &str) -> Result<Self, ExtractError> {
        Self::new(
            source
                .lines()
                .map(|line| line.split('#').next().unwrap_or("").trim())
                .filter(|line| !line.is_empty()),
        )
    }

    pub fn contains(&self, token: &str) -> bool {
        self.terms.contains(token)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Splits on `.`, `!` or `?` followed by whitespace or end of input, and on newlines.
pub fn split_sentences(input: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = input.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let boundary = match c {
            '\n' => true,
            '.' | '!' | '?' => chars.peek().is_none_or(|&(_, next)| next.is_whitespace()),
            _ => false,
        };
        if boundary {
            let end = i + c.len_utf8();
            let s = input[start..end].trim();
            if !s.is_empty() && s != "." && s != "!" && s != "?" {
                out.push(s);
            }
            start = end;
        }
    }
    let tail = input[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Keeps sentences with at least one lexicon term and at least
/// [`MIN_SENTENCE_TOKENS`] tokens. Confidence is matched tokens over sentence tokens.
pub fn extract_rule_based(user_input: &str, lexicon: &Lexicon) -> ExtractionResult {
    let mut result = ExtractionResult::default();
    let mut seen = BTreeSet::new();
    for sentence in split_sentences(user_input) {
        let toks = text::tokens(sentence);
        if toks.len() < MIN_SENTENCE_TOKENS {
            continue;
        }
        let matched = toks.iter().filter(|t| lexicon.contains(t)).count();
        if matched == 0 {
            continue;
        }
        result.push_unique(&mut seen, sentence, matched as f64 / toks.len() as f64);
    }
    result
}

#[derive(Debug, Clone)]
pub struct RuleBasedExtractor {
    pub lexicon: Lexicon,
}

impl RuleBasedExtractor {
    pub fn new(lexicon: Lexicon) -> Self {
        Self { lexicon }
    }
}

impl Extractor for RuleBasedExtractor {
    fn extract(&self, user_input: &str) -> Result<ExtractionResult, ExtractError> {
        Ok(extract_rule_based(user_input, &self.lexicon))
    }
}

/// Parses a bulleted (`-`, `*`, `•`) or numbered (`1.`, `1)`) list.
/// Returns `None` when the reply holds no list items.
pub fn parse_list_reply(reply: &str) -> Option<Vec<String>> {
    let mut items = Vec::new();
    for line in reply.lines() {
        let line = line.trim();
        let item = if let Some(rest) = line
            .strip_prefix("- ")
            .or_else(|| line.strip_prefix("* "))
            .or_else(|| line.strip_prefix("• "))
        {
            Some(rest)
        } else {
            let digits = line.chars().take_while(char::is_ascii_digit).count();
            if digits > 0 {
                let rest = &line[digits..];
                rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") "))
            } else {
                None
            }
        };
        if let Some(item) = item.map(str::trim).filter(|s| !s.is_empty()) {
            items.push(String::from(item));
        }
    }
    if items.is_empty() {
        None
    } else {
        Some(items)
    }
}

/// Asks a generator to list the knowledge in `user_input`. Empty input
/// never reaches the backend; an unparseable reply yields no candidates
/// and a warning.
pub fn extract_with_judge<G: Generator + ?Sized>(
    user_input: &str,
    backend: &G,
) -> Result<ExtractionResult, ExtractError> {
    if user_input.trim().is_empty() {
        return Ok(ExtractionResult::default());
    }
    let reply = backend.generate(&GenerationRequest {
        fragments: vec![String::from(user_input)],
        instruction: String::from(EXTRACT_TEMPLATE),
        max_length: DEFAULT_MAX_LENGTH,
    })?;
    let mut result = ExtractionResult::default();
    match parse_list_reply(&reply) {
        Some(items) => {
            let mut seen = BTreeSet::new();
            for item in items.iter().filter(|i| !i.eq_ignore_ascii_case("none")) {
                result.push_unique(&mut seen, item, 1.0);
            }
        }
        None => result
            .warnings
            .push(format!("extraction reply had no list items ({} chars)", reply.len())),
    }
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct JudgeExtractor<G> {
    pub backend: G,
}

impl<G: Generator> JudgeExtractor<G> {
    pub fn new(backend: G) -> Self {
        Self { backend }
    }
}

impl<G: Generator> Extractor for JudgeExtractor<G> {
    fn extract(&self, user_input: &str) -> Result<ExtractionResult, ExtractError> {
        extract_with_judge(user_input, &self.backend)
    }
}
