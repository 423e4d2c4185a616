//! Intent/slot records and their flattened dictionary-literal form.
//!
//! Canonical rendering:
//!
//! ```text
//! {'scenario': 'alarm', 'action': 'set', 'entities': [{'type': 'time', 'filler': 'five am'}]}
//! ```
//!
//! Parsing is total: any input yields a record. A string that is not a
//! well-formed dictionary literal becomes the empty record, a missing or
//! wrongly shaped scenario/action becomes `"none"`, and a malformed entity
//! inside an otherwise valid list is dropped.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Replacement value for missing or invalid identifiers.
pub const NONE: &str = "none";

const MAX_DEPTH: usize = 32;

/// Lowercases and maps every character outside `[a-z0-9_]` to `_`. Empty
/// input becomes [`NONE`].
pub fn normalize_identifier(s: &str) -> String {
    let out: String = s
        .trim()
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' { c } else { '_' })
        .collect();
    if out.is_empty() {
        NONE.to_string()
    } else {
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub kind: String,
    pub filler: String,
}

impl Entity {
    pub fn new(kind: &str, filler: impl Into<String>) -> Self {
        Self {
            kind: normalize_identifier(kind),
            filler: filler.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticsRecord {
    scenario: String,
    action: String,
    pub entities: Vec<Entity>,
}

impl SemanticsRecord {
    pub fn new(scenario: &str, action: &str, entities: Vec<Entity>) -> Self {
        Self {
            scenario: normalize_identifier(scenario),
            action: normalize_identifier(action),
            entities,
        }
    }

    /// The record produced for unparseable input.
    pub fn empty() -> Self {
        Self::new(NONE, NONE, Vec::new())
    }

    pub fn scenario(&self) -> &str {
        &self.scenario
    }

    pub fn action(&self) -> &str {
        &self.action
    }

    /// `scenario_action`, the intent label.
    pub fn intent(&self) -> String {
        format!("{}_{}", self.scenario, self.action)
    }

    pub fn flatten(&self) -> String {
        flatten(self)
    }
}

impl fmt::Display for SemanticsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&flatten(self))
    }
}

fn push_quoted(out: &mut String, s: &str) {
    out.push('\'');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\'' => out.push_str("\\'"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('\'');
}

/// Renders the canonical flattened string.
pub fn flatten(r: &SemanticsRecord) -> String {
    let mut out = String::with_capacity(64 + 48 * r.entities.len());
    out.push_str("{'scenario': ");
    push_quoted(&mut out, &r.scenario);
    out.push_str(", 'action': ");
    push_quoted(&mut out, &r.action);
    out.push_str(", 'entities': [");
    for (i, e) in r.entities.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str("{'type': ");
        push_quoted(&mut out, &e.kind);
        out.push_str(", 'filler': ");
        push_quoted(&mut out, &e.filler);
        out.push('}');
    }
    out.push_str("]}");
    out
}

/// Parses arbitrary text into a record, applying the recovery rules.
pub fn parse(s: &str) -> SemanticsRecord {
    let mut p = Parser { src: s.as_bytes(), text: s, pos: 0 };
    let value = match p.document() {
        Some(v) => v,
        None => return SemanticsRecord::empty(),
    };
    let Value::Dict(pairs) = value else {
        return SemanticsRecord::empty();
    };
    let scenario = string_field(&pairs, "scenario");
    let action = string_field(&pairs, "action");
    let entities = match lookup(&pairs, "entities") {
        Some(Value::List(items)) => items.iter().filter_map(entity_from).collect(),
        _ => Vec::new(),
    };
    SemanticsRecord::new(
        scenario.as_deref().unwrap_or(NONE),
        action.as_deref().unwrap_or(NONE),
        entities,
    )
}

/// Lossy UTF-8 entry point for raw bytes.
pub fn parse_bytes(bytes: &[u8]) -> SemanticsRecord {
    parse(&String::from_utf8_lossy(bytes))
}

/// `flatten(parse(s))`; idempotent.
pub fn canonicalize(s: &str) -> String {
    flatten(&parse(s))
}

fn lookup<'a>(pairs: &'a [(String, Value)], key: &str) -> Option<&'a Value> {
    // later duplicates win, as in a dict literal
    pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v)
}

fn string_field(pairs: &[(String, Value)], key: &str) -> Option<String> {
    match lookup(pairs, key) {
        Some(Value::Str(s)) if !s.trim().is_empty() => Some(s.clone()),
        _ => None,
    }
}

fn entity_from(v: &Value) -> Option<Entity> {
    let Value::Dict(pairs) = v else { return None };
    let kind = string_field(pairs, "type")?;
    let filler = match lookup(pairs, "filler") {
        Some(Value::Str(s)) => s.clone(),
        _ => return None,
    };
    Some(Entity::new(&kind, filler))
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Str(String),
    Atom,
    List(Vec<Value>),
    Dict(Vec<(String, Value)>),
}

struct Parser<'a> {
    src: &'a [u8],
    text: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn document(&mut self) -> Option<Value> {
        self.skip_ws();
        let v = self.value(0)?;
        self.skip_ws();
        (self.pos == self.src.len()).then_some(v)
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn value(&mut self, depth: usize) -> Option<Value> {
        if depth > MAX_DEPTH {
            return None;
        }
        self.skip_ws();
        match self.peek()? {
            b'{' => self.dict(depth),
            b'[' => self.list(depth),
            b'\'' | b'"' => self.string().map(Value::Str),
            c if c.is_ascii_alphanumeric() || c == b'_' || c == b'-' || c == b'.' => {
                while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_' || c == b'-' || c == b'.') {
                    self.pos += 1;
                }
                Some(Value::Atom)
            }
            _ => None,
        }
    }

    fn dict(&mut self, depth: usize) -> Option<Value> {
        self.pos += 1;
        let mut pairs = Vec::new();
        loop {
            if self.eat(b'}') {
                return Some(Value::Dict(pairs));
            }
            self.skip_ws();
            let key = match self.peek()? {
                b'\'' | b'"' => self.string()?,
                _ => return None,
            };
            if !self.eat(b':') {
                return None;
            }
            let v = self.value(depth + 1)?;
            pairs.push((key, v));
            if !self.eat(b',') {
                return self.eat(b'}').then_some(Value::Dict(pairs));
            }
        }
    }

    fn list(&mut self, depth: usize) -> Option<Value> {
        self.pos += 1;
        let mut items = Vec::new();
        loop {
            if self.eat(b']') {
                return Some(Value::List(items));
            }
            items.push(self.value(depth + 1)?);
            if !self.eat(b',') {
                return self.eat(b']').then_some(Value::List(items));
            }
        }
    }

    fn string(&mut self) -> Option<String> {
        let quote = self.peek()?;
        self.pos += 1;
        let mut out = String::new();
        let mut run_start = self.pos;
        loop {
            let c = self.peek()?;
            if c == quote {
                out.push_str(&self.text[run_start..self.pos]);
                self.pos += 1;
                return Some(out);
            }
            if c == b'\\' {
                out.push_str(&self.text[run_start..self.pos]);
                self.pos += 1;
                let esc = self.text[self.pos..].chars().next()?;
                self.pos += esc.len_utf8();
                match esc {
                    'n' => out.push('\n'),
                    't' => out.push('\t'),
                    'r' => out.push('\r'),
                    other => out.push(other),
                }
                run_start = self.pos;
            } else {
                self.pos += 1;
            }
        }
    }
}
