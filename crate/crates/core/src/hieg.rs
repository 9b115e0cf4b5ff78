//! The hierarchical evaluation graph: question/answer records grouped by
//! level, each optionally depending on records from shallower levels.
//!
//! A [`Hieg`] only grows. [`Hieg::expand`] returns a new value with one
//! more level appended, so dependency edges always point from a lower
//! level to a higher one and the graph is acyclic by construction.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Serialize, Serializer};
use serde_json::{json, Value};

use crate::graph::NodeId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HiegError {
    #[error("max level must be at least 1")]
    InvalidMaxLevel,
    #[error("batch level {got} does not follow deepest level {deepest}")]
    LevelGap { deepest: u32, got: u32 },
    #[error("batch level {level} exceeds max level {max}")]
    LevelExceedsMax { level: u32, max: u32 },
    #[error("question {question:?} names unknown or same-level parent {parent}")]
    UnknownParent { question: String, parent: String },
    #[error("question already present: {0:?}")]
    DuplicateQuestion(String),
    #[error("batch has {items} items but {answers} answers and {verdicts} verdicts")]
    MisalignedInputs {
        items: usize,
        answers: usize,
        verdicts: usize,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("verdict for {0:?} disagrees with whether it was answered")]
    PendingMismatch(String),
    #[error("evaluation graph has no questions")]
    EmptyHieg,
    #[error("question {0} has no verdict yet")]
    PendingNode(String),
}

/// Tri-state correctness flag. `Pending` exactly when no answer exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Correct,
    Incorrect,
    Pending,
}

impl Verdict {
    pub fn from_bool(correct: bool) -> Self {
        if correct {
            Verdict::Correct
        } else {
            Verdict::Incorrect
        }
    }

    fn as_json(self) -> Value {
        match self {
            Verdict::Correct => Value::Bool(true),
            Verdict::Incorrect => Value::Bool(false),
            Verdict::Pending => Value::Null,
        }
    }
}

impl Serialize for Verdict {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.as_json().serialize(serializer)
    }
}

/// Overall verdict on an image/caption pair. Serialized as the bit
/// `1` (consistent) or `0` (inconsistent).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Consistent,
    Inconsistent,
}

impl Decision {
    pub fn as_bit(self) -> u8 {
        match self {
            Decision::Consistent => 1,
            Decision::Inconsistent => 0,
        }
    }

    /// Detector convention: `1` means the pair was flagged as inconsistent.
    pub fn flagged(self) -> u8 {
        1 - self.as_bit()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Consistent => "consistent",
            Decision::Inconsistent => "inconsistent",
        }
    }

    /// Capitalised spelling used inside the explanation prompt.
    pub fn title(self) -> &'static str {
        match self {
            Decision::Consistent => "Consistent",
            Decision::Inconsistent => "Inconsistent",
        }
    }
}

impl Serialize for Decision {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.as_bit())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalNode {
    #[serde(rename = "Question-ID")]
    pub id: String,
    #[serde(rename = "Level")]
    pub level: u32,
    #[serde(rename = "Question")]
    pub question: String,
    #[serde(rename = "Verify-Fact")]
    pub verify_fact: String,
    #[serde(rename = "Expected-Answer")]
    pub expected_answer: String,
    #[serde(rename = "Actual-Answer")]
    pub actual_answer: Option<String>,
    #[serde(rename = "Confidence")]
    pub confidence: f64,
    #[serde(rename = "Eval-Correct")]
    pub correct: Verdict,
    #[serde(rename = "Parent-IDS")]
    pub parent_ids: BTreeSet<String>,
    #[serde(rename = "Covered-Nodes")]
    pub covered_nodes: BTreeSet<NodeId>,
    #[serde(rename = "Covered-Edges")]
    pub covered_edges: BTreeSet<usize>,
}

impl EvalNode {
    /// The seven fields the question-generation, coverage and explanation
    /// prompts describe.
    pub fn prompt_view(&self) -> Value {
        json!({
            "Question-ID": self.id,
            "Question": self.question,
            "Verify-Fact": self.verify_fact,
            "Expected-Answer": self.expected_answer,
            "Actual-Answer": self.actual_answer,
            "Eval-Correct": self.correct.as_json(),
            "Parent-IDS": self.parent_ids,
        })
    }
}

/// One generated question before it is answered.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QuestionItem {
    pub question: String,
    pub verify_fact: String,
    pub expected_answer: String,
    pub parent_ids: BTreeSet<String>,
    pub covered_nodes: BTreeSet<NodeId>,
    pub covered_edges: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionBatch {
    pub level: u32,
    pub items: Vec<QuestionItem>,
}

/// What the answering model said for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub text: Option<String>,
    pub confidence: f64,
}

impl Answer {
    pub fn new(text: impl Into<String>, confidence: f64) -> Self {
        Self {
            text: Some(text.into()),
            confidence,
        }
    }
}

/// Per-level aggregate feeding the scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelStats {
    pub level: u32,
    pub count: usize,
    /// Sum of confidence over the level's correct answers.
    pub correct_weighted_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hieg {
    max_level: u32,
    nodes: Vec<EvalNode>,
}

impl Hieg {
    pub fn new(max_level: u32) -> Result<Self, HiegError> {
        if max_level == 0 {
            return Err(HiegError::InvalidMaxLevel);
        }
        Ok(Self {
            max_level,
            nodes: Vec::new(),
        })
    }

    pub fn max_level(&self) -> u32 {
        self.max_level
    }

    /// Nodes ordered by level, then by position within the level.
    pub fn nodes(&self) -> &[EvalNode] {
        &self.nodes
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Deepest populated level, `0` for an empty graph.
    pub fn depth(&self) -> u32 {
        self.nodes.last().map_or(0, |n| n.level)
    }

    pub fn node(&self, id: &str) -> Option<&EvalNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn level(&self, level: u32) -> impl Iterator<Item = &EvalNode> {
        self.nodes.iter().filter(move |n| n.level == level)
    }

    /// Question counts for levels `1..=depth`.
    pub fn level_counts(&self) -> Vec<usize> {
        (1..=self.depth()).map(|l| self.level(l).count()).collect()
    }

    pub fn contains_question(&self, text: &str) -> bool {
        self.nodes.iter().any(|n| n.question == text)
    }

    /// Appends one level. `answers` and `verdicts` align with
    /// `batch.items` by index. New ids are `Q<level>.<ordinal>`, ordinals
    /// starting at 1.
    pub fn expand(
        &self,
        batch: &QuestionBatch,
        answers: &[Answer],
        verdicts: &[Verdict],
    ) -> Result<Hieg, HiegError> {
        let expected = self.depth() + 1;
        if batch.level != expected {
            return Err(HiegError::LevelGap {
                deepest: self.depth(),
                got: batch.level,
            });
        }
        if batch.level > self.max_level {
            return Err(HiegError::LevelExceedsMax {
                level: batch.level,
                max: self.max_level,
            });
        }
        if batch.items.is_empty() {
            return Err(HiegError::EmptyBatch);
        }
        if answers.len() != batch.items.len() || verdicts.len() != batch.items.len() {
            return Err(HiegError::MisalignedInputs {
                items: batch.items.len(),
                answers: answers.len(),
                verdicts: verdicts.len(),
            });
        }

        let mut next = self.clone();
        let mut batch_questions = BTreeSet::new();
        for (ordinal, ((item, answer), verdict)) in
            batch.items.iter().zip(answers).zip(verdicts).enumerate()
        {
            if self.contains_question(&item.question)
                || !batch_questions.insert(item.question.as_str())
            {
                return Err(HiegError::DuplicateQuestion(item.question.clone()));
            }
            for parent in &item.parent_ids {
                let resolves = self.node(parent).is_some_and(|p| p.level < batch.level);
                if !resolves {
                    return Err(HiegError::UnknownParent {
                        question: item.question.clone(),
                        parent: parent.clone(),
                    });
                }
            }
            if !(0.0..=1.0).contains(&answer.confidence) {
                return Err(HiegError::InvalidConfidence(answer.confidence));
            }
            if (*verdict == Verdict::Pending) != answer.text.is_none() {
                return Err(HiegError::PendingMismatch(item.question.clone()));
            }
            next.nodes.push(EvalNode {
                id: format!("Q{}.{}", batch.level, ordinal + 1),
                level: batch.level,
                question: item.question.clone(),
                verify_fact: item.verify_fact.clone(),
                expected_answer: item.expected_answer.clone(),
                actual_answer: answer.text.clone(),
                confidence: answer.confidence,
                correct: *verdict,
                parent_ids: item.parent_ids.clone(),
                covered_nodes: item.covered_nodes.clone(),
                covered_edges: item.covered_edges.clone(),
            });
        }
        Ok(next)
    }

    /// Consistent only when every question was answered correctly.
    pub fn overall_decision(&self) -> Result<Decision, HiegError> {
        if self.nodes.is_empty() {
            return Err(HiegError::EmptyHieg);
        }
        let mut decision = Decision::Consistent;
        for node in &self.nodes {
            match node.correct {
                Verdict::Pending => return Err(HiegError::PendingNode(node.id.clone())),
                Verdict::Incorrect => decision = Decision::Inconsistent,
                Verdict::Correct => {}
            }
        }
        Ok(decision)
    }

    pub fn level_stats(&self) -> Result<Vec<LevelStats>, HiegError> {
        let mut stats: Vec<LevelStats> = Vec::new();
        for node in &self.nodes {
            let hit = match node.correct {
                Verdict::Pending => return Err(HiegError::PendingNode(node.id.clone())),
                Verdict::Correct => node.confidence,
                Verdict::Incorrect => 0.0,
            };
            match stats.last_mut() {
                Some(s) if s.level == node.level => {
                    s.count += 1;
                    s.correct_weighted_sum += hit;
                }
                _ => stats.push(LevelStats {
                    level: node.level,
                    count: 1,
                    correct_weighted_sum: hit,
                }),
            }
        }
        Ok(stats)
    }

    /// JSON array of the prompt-facing node views.
    pub fn to_prompt_json(&self) -> String {
        let view: Vec<Value> = self.nodes.iter().map(EvalNode::prompt_view).collect();
        serde_json::to_string_pretty(&view).unwrap_or_else(|_| "[]".to_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn item(q: &str, parents: &[&str]) -> QuestionItem {
        QuestionItem {
            question: q.to_string(),
            verify_fact: "fact".into(),
            expected_answer: "yes".into(),
            parent_ids: parents.iter().map(|p| p.to_string()).collect(),
            ..Default::default()
        }
    }

    fn grow(h: &Hieg, level: u32, items: Vec<QuestionItem>, ys: &[bool], cs: &[f64]) -> Result<Hieg, HiegError> {
        let answers: Vec<Answer> = cs.iter().map(|&c| Answer::new("a", c)).collect();
        let verdicts: Vec<Verdict> = ys.iter().map(|&y| Verdict::from_bool(y)).collect();
        h.expand(&QuestionBatch { level, items }, &answers, &verdicts)
    }

    #[test]
    fn first_level_expansion() {
        let h = Hieg::new(5).unwrap();
        let h = grow(&h, 1, vec![item("a?", &[]), item("b?", &[])], &[true, true], &[1.0, 1.0]).unwrap();
        assert_eq!(h.len(), 2);
        assert_eq!(h.depth(), 1);
        assert_eq!(h.nodes()[0].id, "Q1.1");
        assert_eq!(h.nodes()[1].id, "Q1.2");
    }

    #[test]
    fn level_gap_rejected() {
        let h = Hieg::new(5).unwrap();
        let h = grow(&h, 1, vec![item("a?", &[])], &[true], &[1.0]).unwrap();
        assert_eq!(
            grow(&h, 3, vec![item("b?", &[])], &[true], &[1.0]).unwrap_err(),
            HiegError::LevelGap { deepest: 1, got: 3 }
        );
    }

    #[test]
    fn same_level_parent_rejected() {
        let h = Hieg::new(5).unwrap();
        let h = grow(&h, 1, vec![item("a?", &[])], &[true], &[1.0]).unwrap();
        let err = grow(&h, 2, vec![item("b?", &["Q2.1"])], &[true], &[1.0]).unwrap_err();
        assert!(matches!(err, HiegError::UnknownParent { .. }));
        let ok = grow(&h, 2, vec![item("b?", &["Q1.1"])], &[true], &[1.0]).unwrap();
        assert_eq!(ok.node("Q2.1").unwrap().parent_ids.len(), 1);
    }

    #[test]
    fn duplicates_rejected() {
        let h = Hieg::new(5).unwrap();
        let h = grow(&h, 1, vec![item("a?", &[])], &[true], &[1.0]).unwrap();
        assert_eq!(
            grow(&h, 2, vec![item("a?", &[])], &[true], &[1.0]).unwrap_err(),
            HiegError::DuplicateQuestion("a?".into())
        );
        assert!(grow(&h, 2, vec![item("b?", &[]), item("b?", &[])], &[true, true], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn max_level_and_alignment() {
        let h = Hieg::new(1).unwrap();
        let h = grow(&h, 1, vec![item("a?", &[])], &[true], &[1.0]).unwrap();
        assert!(matches!(
            grow(&h, 2, vec![item("b?", &[])], &[true], &[1.0]),
            Err(HiegError::LevelExceedsMax { .. })
        ));
        let h = Hieg::new(3).unwrap();
        assert!(matches!(
            grow(&h, 1, vec![item("a?", &[])], &[true, false], &[1.0]),
            Err(HiegError::MisalignedInputs { .. })
        ));
        assert!(matches!(
            grow(&h, 1, vec![item("a?", &[])], &[true], &[1.5]),
            Err(HiegError::InvalidConfidence(_))
        ));
        assert_eq!(Hieg::new(0).unwrap_err(), HiegError::InvalidMaxLevel);
    }

    #[test]
    fn decision_cases() {
        let h = Hieg::new(5).unwrap();
        assert_eq!(h.overall_decision().unwrap_err(), HiegError::EmptyHieg);
        let mut g = h.clone();
        for l in 1..=5 {
            g = grow(&g, l, vec![item(&format!("q{l}"), &[])], &[true], &[1.0]).unwrap();
        }
        assert_eq!(g.overall_decision().unwrap(), Decision::Consistent);
        let mut g = h;
        for l in 1..=5 {
            g = grow(&g, l, vec![item(&format!("q{l}"), &[])], &[l != 3], &[1.0]).unwrap();
        }
        assert_eq!(g.overall_decision().unwrap(), Decision::Inconsistent);
    }

    #[test]
    fn pending_nodes_block_decision() {
        let h = Hieg::new(2).unwrap();
        let batch = QuestionBatch {
            level: 1,
            items: vec![item("a?", &[])],
        };
        let pending = h
            .expand(&batch, &[Answer { text: None, confidence: 0.0 }], &[Verdict::Pending])
            .unwrap();
        assert_eq!(pending.overall_decision().unwrap_err(), HiegError::PendingNode("Q1.1".into()));
        assert!(pending.level_stats().is_err());
        assert!(matches!(
            h.expand(&batch, &[Answer::new("x", 1.0)], &[Verdict::Pending]),
            Err(HiegError::PendingMismatch(_))
        ));
    }

    #[test]
    fn stats_per_level() {
        let h = Hieg::new(5).unwrap();
        let h = grow(&h, 1, vec![item("a?", &[]), item("b?", &[])], &[true, false], &[1.0, 1.0]).unwrap();
        let h = grow(&h, 2, vec![item("c?", &[])], &[true], &[0.8]).unwrap();
        let s = h.level_stats().unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].count, s[0].correct_weighted_sum), (2, 1.0));
        assert_eq!((s[1].count, s[1].correct_weighted_sum), (1, 0.8));
        assert_eq!(h.level_counts(), vec![2, 1]);

        let all_false = grow(&Hieg::new(1).unwrap(), 1, vec![item("a?", &[]), item("b?", &[])], &[false, false], &[0.9, 0.7]).unwrap();
        assert_eq!(all_false.level_stats().unwrap()[0].correct_weighted_sum, 0.0);
    }

    #[test]
    fn prompt_view_uses_table_field_names() {
        let h = grow(&Hieg::new(2).unwrap(), 1, vec![item("a?", &[])], &[false], &[0.5]).unwrap();
        let v = h.nodes()[0].prompt_view();
        let obj = v.as_object().unwrap();
        let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        for k in ["Question-ID", "Question", "Verify-Fact", "Expected-Answer", "Actual-Answer", "Eval-Correct", "Parent-IDS"] {
            assert!(keys.contains(&k), "{k}");
        }
        assert_eq!(obj["Eval-Correct"], Value::Bool(false));
        assert_eq!(obj.len(), 7);
    }
}
