//! Prompt templates and parsers for the structured replies they request.
//!
//! Templates are plain text with `{name}` placeholders. Rendering is a
//! single left-to-right pass: substituted text is never rescanned, so a
//! caption that itself contains `{caption}` is inserted verbatim. Braces
//! that do not form a declared placeholder (the JSON examples inside the
//! prompts) are left alone.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde_json::{Map, Value};

use crate::extract::{self, as_bool, as_f64, field, field_any, is_none_like, Parsed};
use crate::graph::NodeId;
use crate::hieg::{QuestionBatch, QuestionItem};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("no substitution for placeholder {{{0}}}")]
    MissingPlaceholder(String),
    #[error("substitution {{{0}}} is not a placeholder of this template")]
    UnknownPlaceholder(String),
    #[error("template {template} uses undeclared placeholder {{{placeholder}}}")]
    UndeclaredPlaceholder {
        template: String,
        placeholder: String,
    },
    #[error("malformed output: no JSON object found in model reply")]
    MalformedOutput,
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("question batch is empty")]
    EmptyBatch,
}

/// The eight evaluation prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateName {
    DirectPrompt,
    CoTPrompt,
    SemanticGraphGen,
    QuestionGen,
    Vqa,
    AnswerEval,
    CoverageCheck,
    Explain,
}

impl TemplateName {
    pub const ALL: [TemplateName; 8] = [
        TemplateName::DirectPrompt,
        TemplateName::CoTPrompt,
        TemplateName::SemanticGraphGen,
        TemplateName::QuestionGen,
        TemplateName::Vqa,
        TemplateName::AnswerEval,
        TemplateName::CoverageCheck,
        TemplateName::Explain,
    ];

    /// File name (without `.txt`) used for shipped and override templates.
    pub fn file_stem(self) -> &'static str {
        match self {
            TemplateName::DirectPrompt => "direct_prompt",
            TemplateName::CoTPrompt => "cot_prompt",
            TemplateName::SemanticGraphGen => "semantic_graph_gen",
            TemplateName::QuestionGen => "question_gen",
            TemplateName::Vqa => "vqa",
            TemplateName::AnswerEval => "answer_eval",
            TemplateName::CoverageCheck => "coverage_check",
            TemplateName::Explain => "explain",
        }
    }

    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateName::DirectPrompt | TemplateName::CoTPrompt => &["caption"],
            TemplateName::SemanticGraphGen => &["example", "caption"],
            TemplateName::QuestionGen => &[
                "semantic-graph",
                "unverified-elements",
                "previous-HIEG",
                "suggestion",
                "current-level",
            ],
            TemplateName::Vqa => &["question"],
            TemplateName::AnswerEval => &["question", "expected-answer", "actual-answer"],
            TemplateName::CoverageCheck => &["semantic-graph", "hieg"],
            TemplateName::Explain => &["hieg", "caption", "consistency-decision"],
        }
    }

    pub fn builtin_body(self) -> &'static str {
        match self {
            TemplateName::DirectPrompt => include_str!("../templates/direct_prompt.txt"),
            TemplateName::CoTPrompt => include_str!("../templates/cot_prompt.txt"),
            TemplateName::SemanticGraphGen => include_str!("../templates/semantic_graph_gen.txt"),
            TemplateName::QuestionGen => include_str!("../templates/question_gen.txt"),
            TemplateName::Vqa => include_str!("../templates/vqa.txt"),
            TemplateName::AnswerEval => include_str!("../templates/answer_eval.txt"),
            TemplateName::CoverageCheck => include_str!("../templates/coverage_check.txt"),
            TemplateName::Explain => include_str!("../templates/explain.txt"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

/// A template body bound to its declared placeholder set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    body: String,
    placeholders: &'static [&'static str],
}

impl Template {
    /// Checks that every `{name}` token in `body` that looks like a
    /// placeholder is declared.
    pub fn new(
        name: impl Into<String>,
        body: impl Into<String>,
        placeholders: &'static [&'static str],
    ) -> Result<Self, PromptError> {
        let name = name.into();
        let body = body.into();
        for token in placeholder_tokens(&body) {
            if !placeholders.contains(&token) {
                return Err(PromptError::UndeclaredPlaceholder {
                    template: name,
                    placeholder: token.to_owned(),
                });
            }
        }
        Ok(Self {
            name,
            body,
            placeholders,
        })
    }

    pub fn builtin(name: TemplateName) -> Self {
        Self {
            name: name.file_stem().into(),
            body: name.builtin_body().into(),
            placeholders: name.placeholders(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholders(&self) -> &'static [&'static str] {
        self.placeholders
    }

    /// Substitutes every declared placeholder. `substitutions` must name
    /// each declared placeholder exactly once and nothing else.
    pub fn render(&self, substitutions: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut keys = BTreeSet::new();
        for (key, _) in substitutions {
            if !self.placeholders.contains(key) {
                return Err(PromptError::UnknownPlaceholder((*key).to_owned()));
            }
            keys.insert(*key);
        }
        if let Some(missing) = self.placeholders.iter().find(|p| !keys.contains(*p)) {
            return Err(PromptError::MissingPlaceholder((*missing).to_owned()));
        }

        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open..];
            match placeholder_at(after).filter(|t| self.placeholders.contains(t)) {
                Some(token) => {
                    let value = substitutions
                        .iter()
                        .find(|(k, _)| *k == token)
                        .map(|(_, v)| *v)
                        .unwrap_or_default();
                    out.push_str(value);
                    rest = &after[token.len() + 2..];
                }
                None => {
                    out.push('{');
                    rest = &after[1..];
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// If `s` starts with `{name}` where name is `[A-Za-z][A-Za-z0-9-]*`,
/// returns the name.
fn placeholder_at(s: &str) -> Option<&str> {
    let inner = s.strip_prefix('{')?;
    let end = inner.find('}')?;
    let token = &inner[..end];
    let mut chars = token.chars();
    let first = chars.next()?;
    (first.is_ascii_alphabetic() && chars.all(|c| c.is_ascii_alphanumeric() || c == '-'))
        .then_some(token)
}

fn placeholder_tokens(body: &str) -> impl Iterator<Item = &str> {
    body.match_indices('{')
        .filter_map(move |(i, _)| placeholder_at(&body[i..]))
}

/// The full set of evaluation templates, builtin unless overridden.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: Vec<Template>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            templates: TemplateName::ALL.iter().map(|n| Template::builtin(*n)).collect(),
        }
    }

    pub fn get(&self, name: TemplateName) -> &Template {
        let index = TemplateName::ALL
            .iter()
            .position(|n| *n == name)
            .unwrap_or_default();
        &self.templates[index]
    }

    /// Replaces one template body, validating its placeholders.
    pub fn with_override(mut self, name: TemplateName, body: &str) -> Result<Self, PromptError> {
        let template = Template::new(name.file_stem(), body, name.placeholders())?;
        let index = TemplateName::ALL
            .iter()
            .position(|n| *n == name)
            .unwrap_or_default();
        self.templates[index] = template;
        Ok(self)
    }

    pub fn render(
        &self,
        name: TemplateName,
        substitutions: &[(&str, &str)],
    ) -> Result<String, PromptError> {
        self.get(name).render(substitutions)
    }
}

/// Few-shot example slotted into the graph-generation prompt.
pub const GRAPH_EXAMPLE: &str = r#"Caption: A brown dog catches a red frisbee in a park.
{
    "nodes": [
        {"id": "N1", "type": "Entity", "label": "dog"},
        {"id": "N2", "type": "Attribute", "label": "brown"},
        {"id": "N3", "type": "Entity", "label": "frisbee"},
        {"id": "N4", "type": "Attribute", "label": "red"},
        {"id": "N5", "type": "Location", "label": "park"}
    ],
    "edges": [
        {"from": ["N1", "dog"], "to": ["N2", "brown"], "type": "Has Attribute", "label": "color", "description": "The dog is brown."},
        {"from": ["N1", "dog"], "to": ["N3", "frisbee"], "type": "Action", "label": "catches", "description": "The dog catches the frisbee."},
        {"from": ["N3", "frisbee"], "to": ["N4", "red"], "type": "Has Attribute", "label": "color", "description": "The frisbee is red."},
        {"from": ["N1", "dog"], "to": ["N5", "park"], "type": "Spatial", "label": "in", "description": "The dog is in the park."}
    ]
}"#;

#[derive(Debug, Clone, PartialEq)]
pub struct VqaReply {
    pub answer: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalReply {
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageReply {
    pub verified_complete: bool,
    pub examined_nodes: BTreeSet<NodeId>,
    pub examined_edges: BTreeSet<usize>,
    pub next_level_suggestion: Option<String>,
}

/// Reply to the direct or chain-of-thought consistency prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectReply {
    /// `true` when the model says the image matches the caption.
    pub matches: bool,
    pub explanation: Option<String>,
}

fn object(raw: &str) -> Result<Map<String, Value>, PromptError> {
    extract::first_object(raw).ok_or(PromptError::MalformedOutput)
}

fn text_of(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.trim().to_owned()),
        Value::Number(n) => Some(format!("{n}")),
        Value::Bool(b) => Some(format!("{b}")),
        _ => None,
    }
}

/// Parses `{"Answer": ..., "Confidence": ...}`. A missing confidence means
/// 1.0; values outside `[0, 1]` are clamped.
pub fn parse_vqa_reply(raw: &str) -> Result<Parsed<VqaReply>, PromptError> {
    let obj = object(raw)?;
    let mut warnings = Vec::new();
    let answer = field(&obj, "Answer")
        .and_then(text_of)
        .ok_or_else(|| PromptError::SchemaViolation("missing \"Answer\"".into()))?;
    let confidence = match field(&obj, "Confidence") {
        None | Some(Value::Null) => 1.0,
        Some(v) => match as_f64(v) {
            Some(c) => {
                let clamped = c.clamp(0.0, 1.0);
                if clamped != c {
                    warnings.push(format!("confidence {c} clamped to {clamped}"));
                }
                clamped
            }
            None => {
                warnings.push(format!("unreadable confidence {v}; using 1.0"));
                1.0
            }
        },
    };
    Ok(Parsed {
        value: VqaReply { answer, confidence },
        warnings,
    })
}

/// Parses `{"Correct": boolean}`.
pub fn parse_eval_reply(raw: &str) -> Result<EvalReply, PromptError> {
    let obj = object(raw)?;
    let value = field(&obj, "Correct")
        .ok_or_else(|| PromptError::SchemaViolation("missing \"Correct\"".into()))?;
    let correct = as_bool(value)
        .ok_or_else(|| PromptError::SchemaViolation(format!("\"Correct\" is not boolean: {value}")))?;
    Ok(EvalReply { correct })
}

fn string_set(value: Option<&Value>) -> BTreeSet<String> {
    match value {
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(text_of)
            .filter(|s| !is_none_like(&Value::String(s.clone())))
            .collect(),
        Some(v @ Value::String(_)) if !is_none_like(v) => v
            .as_str()
            .unwrap_or_default()
            .split(',')
            .map(|s| s.trim().to_owned())
            .filter(|s| !s.is_empty())
            .collect(),
        _ => BTreeSet::new(),
    }
}

fn node_ids(value: Option<&Value>, warnings: &mut Vec<String>) -> BTreeSet<NodeId> {
    string_set(value)
        .into_iter()
        .filter_map(|s| match NodeId::new(&s) {
            Ok(id) => Some(id),
            Err(_) => {
                warnings.push(format!("ignored invalid node id {s:?}"));
                None
            }
        })
        .collect()
}

fn edge_indices(value: Option<&Value>, warnings: &mut Vec<String>) -> BTreeSet<usize> {
    let items: Vec<Value> = match value {
        Some(Value::Array(items)) => items.clone(),
        Some(Value::Number(n)) => alloc::vec![Value::Number(n.clone())],
        Some(v @ Value::String(_)) if !is_none_like(v) => v
            .as_str()
            .unwrap_or_default()
            .split(',')
            .map(|s| Value::String(s.trim().to_owned()))
            .collect(),
        _ => Vec::new(),
    };
    items
        .iter()
        .filter_map(|item| {
            let parsed = match item {
                Value::Number(n) => n.as_u64().map(|n| n as usize),
                Value::String(s) => {
                    let t = s.trim();
                    let t = t.strip_prefix(['E', 'e']).unwrap_or(t);
                    t.parse::<usize>().ok()
                }
                _ => None,
            };
            if parsed.is_none() {
                warnings.push(format!("ignored invalid edge index {item}"));
            }
            parsed
        })
        .collect()
}

/// Parses the question-generation reply into a batch at `level`.
///
/// Accepts `{"Questions": [...]}`, any object holding a single array of
/// question objects, or a bare array. Items repeating an earlier question
/// text are dropped with a warning.
pub fn parse_question_batch(raw: &str, level: u32) -> Result<Parsed<QuestionBatch>, PromptError> {
    let items: Vec<Value> = match extract::first_value(raw).ok_or(PromptError::MalformedOutput)? {
        Value::Array(items) => items,
        Value::Object(obj) => {
            if let Some(v) = field_any(&obj, &["Questions", "Nodes", "Items"]) {
                v.as_array().cloned().unwrap_or_default()
            } else if field(&obj, "Question").is_some() {
                alloc::vec![Value::Object(obj)]
            } else {
                obj.values()
                    .find_map(|v| v.as_array().cloned())
                    .ok_or(PromptError::MalformedOutput)?
            }
        }
        _ => return Err(PromptError::MalformedOutput),
    };

    let mut warnings = Vec::new();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let obj = item
            .as_object()
            .ok_or_else(|| PromptError::SchemaViolation(format!("question {i} is not an object")))?;
        let question = field(obj, "Question")
            .and_then(text_of)
            .filter(|q| !q.is_empty())
            .ok_or_else(|| PromptError::SchemaViolation(format!("question {i}: missing \"Question\"")))?;
        let expected_answer = field(obj, "Expected-Answer")
            .and_then(text_of)
            .ok_or_else(|| {
                PromptError::SchemaViolation(format!("question {i}: missing \"Expected-Answer\""))
            })?;
        let verify_fact = match field(obj, "Verify-Fact").and_then(text_of) {
            Some(f) => f,
            None => {
                warnings.push(format!("question {i}: missing Verify-Fact"));
                String::new()
            }
        };
        if !seen.insert(question.clone()) {
            warnings.push(format!("dropped duplicate question {question:?}"));
            continue;
        }
        let parent_ids = string_set(field_any(obj, &["Parent-IDS", "Parent-IDs", "Parents"]));
        let covered_nodes = node_ids(field_any(obj, &["Covered-Nodes", "Nodes"]), &mut warnings);
        let covered_edges = edge_indices(field_any(obj, &["Covered-Edges", "Edges"]), &mut warnings);
        out.push(QuestionItem {
            question,
            verify_fact,
            expected_answer,
            parent_ids,
            covered_nodes,
            covered_edges,
        });
    }
    if out.is_empty() {
        return Err(PromptError::EmptyBatch);
    }
    Ok(Parsed {
        value: QuestionBatch { level, items: out },
        warnings,
    })
}

/// Parses the coverage-check reply. When `Verified-Complete` is absent it
/// is inferred from the suggestion being `None`.
pub fn parse_coverage_reply(raw: &str) -> Result<Parsed<CoverageReply>, PromptError> {
    let obj = object(raw)?;
    let mut warnings = Vec::new();
    let suggestion = match field_any(&obj, &["Next-Level-Suggestion", "Suggestion"]) {
        None => None,
        Some(v) if is_none_like(v) => None,
        Some(v) => Some(text_of(v).ok_or_else(|| {
            PromptError::SchemaViolation(format!("Next-Level-Suggestion is not text: {v}"))
        })?),
    };
    let verified_complete = match field_any(&obj, &["Verified-Complete", "Complete"]) {
        Some(v) => as_bool(v).ok_or_else(|| {
            PromptError::SchemaViolation(format!("Verified-Complete is not boolean: {v}"))
        })?,
        None => {
            warnings.push("Verified-Complete missing; inferred from suggestion".into());
            suggestion.is_none()
        }
    };
    if verified_complete && suggestion.is_some() {
        return Err(PromptError::SchemaViolation(
            "verification declared complete but a next-level suggestion was given".into(),
        ));
    }
    let examined_nodes = node_ids(field(&obj, "Examined-Nodes"), &mut warnings);
    let examined_edges = edge_indices(field(&obj, "Examined-Edges"), &mut warnings);
    Ok(Parsed {
        value: CoverageReply {
            verified_complete,
            examined_nodes,
            examined_edges,
            next_level_suggestion: suggestion,
        },
        warnings,
    })
}

/// Parses a Yes/No consistency reply. Accepts the JSON shape the prompt
/// asks for or plain prose starting with yes or no.
pub fn parse_direct_reply(raw: &str) -> Result<DirectReply, PromptError> {
    if let Some(obj) = extract::first_object(raw) {
        if let Some(answer) = field(&obj, "Answer") {
            let matches = match answer {
                Value::String(s) => yes_no(s),
                other => as_bool(other),
            }
            .ok_or_else(|| PromptError::SchemaViolation(format!("Answer is not yes/no: {answer}")))?;
            let explanation = field(&obj, "Explanation").and_then(text_of);
            return Ok(DirectReply {
                matches,
                explanation,
            });
        }
    }
    let matches = yes_no(raw).ok_or(PromptError::MalformedOutput)?;
    Ok(DirectReply {
        matches,
        explanation: Some(raw.trim().to_owned()),
    })
}

fn yes_no(text: &str) -> Option<bool> {
    let word: String = text
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect();
    if word.eq_ignore_ascii_case("yes") {
        Some(true)
    } else if word.eq_ignore_ascii_case("no") {
        Some(false)
    } else {
        None
    }
}
