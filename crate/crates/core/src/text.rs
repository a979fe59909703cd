//! Text normalization shared by dedup, selection, extraction and the mock judges.

use alloc::string::String;
use alloc::vec::Vec;

/// Dedup key: lowercased, whitespace-collapsed, trimmed.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&word.to_lowercase());
    }
    out
}

/// Lowercased word tokens with leading/trailing punctuation stripped.
pub fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Text up to (not including) the first clause delimiter, trimmed.
/// Falls back to the whole trimmed text when the leading clause is empty.
pub fn first_clause(text: &str) -> &str {
    let trimmed = text.trim();
    let end = trimmed
        .char_indices()
        .find(|&(i, c)| is_clause_delimiter(trimmed, i, c))
        .map(|(i, _)| i)
        .unwrap_or(trimmed.len());
    let clause = trimmed[..end].trim();
    if clause.is_empty() {
        trimmed
    } else {
        clause
    }
}

fn is_clause_delimiter(text: &str, at: usize, c: char) -> bool {
    match c {
        ',' | ';' | ':' | '!' | '?' | '\n' => true,
        // "3.5%" is not a clause break; a period followed by whitespace or end is.
        '.' => text[at + 1..]
            .chars()
            .next()
            .is_none_or(char::is_whitespace),
        _ => false,
    }
}

/// Truncates to at most `max_chars` characters on a char boundary.
pub fn truncate_chars(text: &mut String, max_chars: usize) {
    if let Some((idx, _)) = text.char_indices().nth(max_chars) {
        text.truncate(idx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_collapses_and_lowercases() {
        assert_eq!(normalize("  Fed   RAISES\trates \n"), "fed raises rates");
        assert_eq!(normalize(" \t\n "), "");
    }

    #[test]
    fn tokens_strip_punctuation() {
        assert_eq!(
            tokens("I think BTC halving cuts issuance."),
            ["i", "think", "btc", "halving", "cuts", "issuance"]
        );
        assert_eq!(tokens("-- ... !"), Vec::<String>::new());
    }

    #[test]
    fn first_clause_stops_at_delimiters() {
        assert_eq!(first_clause("Yields rose, stocks fell."), "Yields rose");
        assert_eq!(first_clause("CPI at 3.5% beat estimates. More later"), "CPI at 3.5% beat estimates");
        assert_eq!(first_clause("no delimiter here"), "no delimiter here");
        assert_eq!(first_clause(", leading comma"), ", leading comma");
    }

    #[test]
    fn truncate_respects_char_boundaries() {
        let mut s = String::from("héllo");
        truncate_chars(&mut s, 2);
        assert_eq!(s, "hé");
        let mut t = String::from("abc");
        truncate_chars(&mut t, 10);
        assert_eq!(t, "abc");
    }
}
