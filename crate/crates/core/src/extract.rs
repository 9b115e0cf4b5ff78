//! Locating structured payloads inside free-form model replies.
//!
//! Models rarely answer with a bare JSON document. Replies are wrapped in
//! code fences, preceded by a sentence of prose, or use tuple syntax copied
//! from the prompt (`("N1", "dog")`). The helpers here find the first
//! balanced object or array that parses, and give key lookup that ignores
//! case and separators (`Parent-IDS`, `parent_ids` and `ParentIds` are the
//! same field).

use alloc::string::String;
use alloc::vec::Vec;

use serde_json::{Map, Value};

/// A parsed value together with the non-fatal issues met while parsing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

impl<T> Parsed<T> {
    pub fn new(value: T) -> Self {
        Self {
            value,
            warnings: Vec::new(),
        }
    }

    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> Parsed<U> {
        Parsed {
            value: f(self.value),
            warnings: self.warnings,
        }
    }
}

/// Returns the first balanced `{...}` in `raw` that parses as a JSON object.
pub fn first_object(raw: &str) -> Option<Map<String, Value>> {
    first_balanced(raw, b'{', |v| match v {
        Value::Object(map) => Some(map),
        _ => None,
    })
}

/// Returns the first balanced `[...]` in `raw` that parses as a JSON array.
pub fn first_array(raw: &str) -> Option<Vec<Value>> {
    first_balanced(raw, b'[', |v| match v {
        Value::Array(items) => Some(items),
        _ => None,
    })
}

/// Returns the first balanced object or array in `raw` that parses,
/// whichever starts earlier.
pub fn first_value(raw: &str) -> Option<Value> {
    first_balanced_any(raw, b"{[", |v| match v {
        Value::Object(_) | Value::Array(_) => Some(v),
        _ => None,
    })
}

fn first_balanced<T>(raw: &str, open: u8, accept: impl Fn(Value) -> Option<T>) -> Option<T> {
    first_balanced_any(raw, &[open], accept)
}

fn first_balanced_any<T>(raw: &str, open: &[u8], accept: impl Fn(Value) -> Option<T>) -> Option<T> {
    let bytes = raw.as_bytes();
    let mut start = 0;
    while let Some(offset) = bytes[start..].iter().position(|b| open.contains(b)) {
        let begin = start + offset;
        if let Some(end) = balanced_end(bytes, begin) {
            let slice = &raw[begin..end];
            if let Some(found) = parse_lenient(slice).and_then(&accept) {
                return Some(found);
            }
        }
        start = begin + 1;
    }
    None
}

fn parse_lenient(slice: &str) -> Option<Value> {
    if let Ok(v) = serde_json::from_str::<Value>(slice) {
        return Some(v);
    }
    let repaired = tuples_to_arrays(slice);
    serde_json::from_str::<Value>(&repaired).ok()
}

/// Scans from the opening bracket at `begin` to just past its matching
/// closer, honouring string literals. Parentheses count as brackets so
/// tuple-style pairs nest correctly.
fn balanced_end(bytes: &[u8], begin: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(begin) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' | b'[' | b'(' => depth += 1,
            b'}' | b']' | b')' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn tuples_to_arrays(slice: &str) -> String {
    let mut out = String::with_capacity(slice.len());
    let mut in_string = false;
    let mut escaped = false;
    for c in slice.chars() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            out.push(c);
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                out.push(c);
            }
            '(' => out.push('['),
            ')' => out.push(']'),
            _ => out.push(c),
        }
    }
    out
}

fn normalize_key(key: &str) -> impl Iterator<Item = char> + '_ {
    key.chars()
        .filter(|c| !matches!(c, '-' | '_' | ' '))
        .flat_map(char::to_lowercase)
}

/// Looks up `key` ignoring ASCII case, `-`, `_` and spaces.
pub fn field<'a>(map: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    if let Some(v) = map.get(key) {
        return Some(v);
    }
    map.iter()
        .find(|(k, _)| normalize_key(k).eq(normalize_key(key)))
        .map(|(_, v)| v)
}

/// Like [`field`] but tries several spellings in order.
pub fn field_any<'a>(map: &'a Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| field(map, k))
}

/// Interprets JSON booleans plus the usual string spellings.
pub fn as_bool(value: &Value) -> Option<bool> {
    match value {
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "yes" | "correct" | "1" => Some(true),
            "false" | "no" | "incorrect" | "0" => Some(false),
            _ => None,
        },
        Value::Number(n) => n.as_u64().and_then(|n| match n {
            0 => Some(false),
            1 => Some(true),
            _ => None,
        }),
        _ => None,
    }
}

/// Interprets numbers and numeric strings.
pub fn as_f64(value: &Value) -> Option<f64> {
    match value {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok().filter(|v| v.is_finite()),
        _ => None,
    }
}

/// True for JSON null and the textual spellings models use for "nothing".
pub fn is_none_like(value: &Value) -> bool {
    match value {
        Value::Null => true,
        Value::String(s) => {
            let t = s.trim();
            t.is_empty()
                || t.eq_ignore_ascii_case("none")
                || t.eq_ignore_ascii_case("null")
                || t.eq_ignore_ascii_case("n/a")
        }
        Value::Array(items) => items.is_empty(),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_object_in_code_fence() {
        let raw = "Sure, here it is:\n```json\n{\"a\": 1}\n```\nDone.";
        let obj = first_object(raw).unwrap();
        assert_eq!(obj["a"], 1);
    }

    #[test]
    fn skips_unparsable_braces() {
        let raw = "use {placeholder} then {\"ok\": true}";
        let obj = first_object(raw).unwrap();
        assert_eq!(obj["ok"], true);
    }

    #[test]
    fn braces_inside_strings_do_not_confuse_depth() {
        let raw = r#"{"text": "a } b { c", "n": 2}"#;
        let obj = first_object(raw).unwrap();
        assert_eq!(obj["n"], 2);
    }

    #[test]
    fn tuple_syntax_is_repaired() {
        let raw = r#"{"from": ("N1", "dog"), "to": ("N2", "ball")}"#;
        let obj = first_object(raw).unwrap();
        assert_eq!(obj["from"][0], "N1");
        assert_eq!(obj["to"][1], "ball");
    }

    #[test]
    fn parentheses_inside_strings_survive_repair() {
        let raw = r#"{"from": ("N1", "dog (brown)"), "x": "(a)"}"#;
        let obj = first_object(raw).unwrap();
        assert_eq!(obj["from"][1], "dog (brown)");
        assert_eq!(obj["x"], "(a)");
    }

    #[test]
    fn no_object_in_prose() {
        assert!(first_object("the image shows a dog").is_none());
        assert!(first_object("unbalanced { \"a\": 1").is_none());
    }

    #[test]
    fn key_lookup_ignores_case_and_separators() {
        let obj = first_object(r#"{"Parent-IDS": [1]}"#).unwrap();
        assert!(field(&obj, "parent_ids").is_some());
        assert!(field(&obj, "ParentIds").is_some());
        assert!(field(&obj, "parent").is_none());
    }

    #[test]
    fn none_like_values() {
        assert!(is_none_like(&Value::Null));
        assert!(is_none_like(&Value::String("None".into())));
        assert!(is_none_like(&Value::String("  ".into())));
        assert!(!is_none_like(&Value::String("check the sofa".into())));
    }
}
