//! Tolerant JSON parsing for model output.
//!
//! Strict parse first, then in order: code-fence stripping, first-`{`-to-last-`}`
//! span extraction, and bracket-based truncation of trailing incomplete content.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFallback {
    /// Parsed as-is.
    None,
    Fence,
    Span,
    Truncation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedOutput {
    pub value: Value,
    pub fallback: ParseFallback,
}

fn strict(text: &str) -> Option<Value> {
    serde_json::from_str(text.trim()).ok()
}

fn strip_fences(text: &str) -> Option<&str> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    // Skip the info string (e.g. `json`) up to the end of that line.
    let body_start = after.find('\n').map_or(0, |i| i + 1);
    let body = &after[body_start..];
    let end = body.find("```").unwrap_or(body.len());
    Some(&body[..end])
}

fn span(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (start < end).then(|| &text[start..=end])
}

/// Cut points lie just after a closing bracket or just before a comma, outside
/// strings and at depth >= 1. Each cut is completed by closing the open brackets.
/// The longest candidate that parses wins.
fn truncate_repair(text: &str) -> Option<Value> {
    let start = text.find(['{', '['])?;
    let body = &text[start..];
    let mut stack: Vec<char> = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    let mut cuts: Vec<(usize, Vec<char>)> = Vec::new();
    for (i, c) in body.char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' | '[' => stack.push(c),
            '}' | ']' => {
                stack.pop();
                if stack.is_empty() {
                    return serde_json::from_str(&body[..=i]).ok();
                }
                cuts.push((i + 1, stack.clone()));
            }
            ',' if !stack.is_empty() => cuts.push((i, stack.clone())),
            _ => {}
        }
    }
    cuts.iter().rev().find_map(|(at, open)| {
        let mut candidate = body[..*at].trim_end().to_string();
        for b in open.iter().rev() {
            candidate.push(if *b == '{' { '}' } else { ']' });
        }
        serde_json::from_str(&candidate).ok()
    })
}

pub fn parse_structured_output(raw: &str) -> Result<ParsedOutput> {
    if raw.trim().is_empty() {
        return Err(Error::Parse {
            reason: "empty output".into(),
            raw: raw.to_string(),
        });
    }
    let ok = |value, fallback| Ok(ParsedOutput { value, fallback });
    if let Some(v) = strict(raw) {
        return ok(v, ParseFallback::None);
    }
    let defenced = strip_fences(raw);
    if let Some(v) = defenced.and_then(strict) {
        return ok(v, ParseFallback::Fence);
    }
    let base = defenced.unwrap_or(raw);
    if let Some(v) = span(base).and_then(strict).or_else(|| span(raw).and_then(strict)) {
        return ok(v, ParseFallback::Span);
    }
    if let Some(v) = truncate_repair(base).or_else(|| truncate_repair(raw)) {
        return ok(v, ParseFallback::Truncation);
    }
    Err(Error::Parse {
        reason: "no fallback produced valid JSON".into(),
        raw: raw.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn strict_json_uses_no_fallback() {
        let p = parse_structured_output(r#" {"a": 1} "#).unwrap();
        assert_eq!(p.value, json!({"a": 1}));
        assert_eq!(p.fallback, ParseFallback::None);
    }

    #[test]
    fn fence_fallback() {
        let p = parse_structured_output("```json\n{\"a\":1}\n```").unwrap();
        assert_eq!(p.value, json!({"a": 1}));
        assert_eq!(p.fallback, ParseFallback::Fence);
    }

    #[test]
    fn span_fallback() {
        let p = parse_structured_output("noise {\"a\":1} noise").unwrap();
        assert_eq!(p.value, json!({"a": 1}));
        assert_eq!(p.fallback, ParseFallback::Span);
    }

    #[test]
    fn truncation_drops_the_possibly_incomplete_tail() {
        let p = parse_structured_output("{\"a\":[1,2").unwrap();
        assert_eq!(p.value, json!({"a": [1]}));
        assert_eq!(p.fallback, ParseFallback::Truncation);

        let p = parse_structured_output(r#"{"items": [{"x": "one"}, {"x": "tw"#).unwrap();
        assert_eq!(p.value, json!({"items": [{"x": "one"}]}));
    }

    #[test]
    fn braces_inside_strings_are_ignored() {
        let p = parse_structured_output(r#"{"a": "}{", "b": [1, {"c": "]"#).unwrap();
        assert_eq!(p.value, json!({"a": "}{", "b": [1]}));
    }

    #[test]
    fn exhausted_fallbacks_carry_raw_text() {
        match parse_structured_output("{\"a\":\"unterminated") {
            Err(Error::Parse { raw, .. }) => assert_eq!(raw, "{\"a\":\"unterminated"),
            other => panic!("expected parse failure, got {other:?}"),
        }
        assert!(parse_structured_output("   ").is_err());
        assert!(parse_structured_output("plain words").is_err());
    }
}
