//! Allocation-only core of `hmgie`, a hierarchical evaluator for
//! image/caption inconsistency.
//!
//! Everything here is pure: parsing model replies into typed values,
//! growing the evaluation graph, rendering prompts and computing scores.
//! Model transport, file formats and the command line live in the `hmgie`
//! crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod extract;
pub mod forge;
pub mod graph;
pub mod hieg;
pub mod prompt;
pub mod scoring;

pub use extract::Parsed;
pub use graph::{
    fresh_mask, parse_semantic_graph, CoverageMask, EdgeKind, GraphError, NodeId, NodeKind,
    SemanticEdge, SemanticGraph, SemanticNode,
};
pub use hieg::{
    Answer, Decision, EvalNode, Hieg, HiegError, LevelStats, QuestionBatch, QuestionItem, Verdict,
};
pub use prompt::{
    CoverageReply, DirectReply, EvalReply, PromptError, Template, TemplateName, TemplateSet,
    VqaReply,
};
pub use scoring::{
    Confusion, MetricsSummary, RougeScore, ScoringConfig, ScoringError, WeightDirection,
};
