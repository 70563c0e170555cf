//! Parsing of single-value replies.

use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

static STRICT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([+-]?\d+)(?:\.(0*))?$").expect("valid regex"));
static FIRST_INT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").expect("valid regex"));

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedValue {
    pub value: i64,
    /// The reply was not a bare number; `value` is its first integer token.
    pub loose: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("reply contains no digits: {0:?}")]
    NoDigits(String),
    #[error("number out of range in reply {0:?}")]
    Overflow(String),
}

/// Reads a numeric answer.
///
/// After trimming whitespace and one trailing period, a bare integer or an
/// integer-valued decimal (`55.0`) parses strictly. Anything else falls back
/// to the first run of digits and is flagged loose.
pub fn parse_single_value(raw: &str) -> Result<ParsedValue, ParseError> {
    let trimmed = raw.trim();
    let body = trimmed.strip_suffix('.').unwrap_or(trimmed).trim_end();
    if let Some(caps) = STRICT.captures(body) {
        let value = caps[1]
            .parse::<i64>()
            .map_err(|_| ParseError::Overflow(raw.to_string()))?;
        return Ok(ParsedValue { value, loose: false });
    }
    let token = FIRST_INT
        .find(trimmed)
        .ok_or_else(|| ParseError::NoDigits(raw.to_string()))?;
    let value = token
        .as_str()
        .parse::<i64>()
        .map_err(|_| ParseError::Overflow(raw.to_string()))?;
    Ok(ParsedValue { value, loose: true })
}
