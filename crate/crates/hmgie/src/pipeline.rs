//! End-to-end evaluation of image/caption pairs.
//!
//! One evaluation parses the caption into a semantic graph, then grows the
//! evaluation graph level by level. Each level asks the question generator
//! for new questions aimed at still-unverified graph elements, answers them
//! against the image, judges the answers, and updates the coverage mask.
//! The loop stops at the configured maximum level, when every element is
//! covered, when the coverage checker declares the graph verified, or when
//! no new questions come back. Scores, the decision and an explanation are
//! computed from the finished graph.

use std::collections::BTreeSet;
use std::fmt;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use hmgie_core::graph::{fresh_mask, parse_semantic_graph, CoverageMask, GraphError, NodeId, SemanticGraph};
use hmgie_core::hieg::{Answer, Decision, Hieg, HiegError, LevelStats, QuestionBatch, QuestionItem, Verdict};
use hmgie_core::prompt::{
    parse_coverage_reply, parse_eval_reply, parse_question_batch, parse_vqa_reply, PromptError,
    TemplateName, TemplateSet, GRAPH_EXAMPLE,
};
use hmgie_core::scoring::{
    compute_h_acc, compute_h_comp, detection_metrics_by_granularity, MetricsSummary, ScoringConfig,
    ScoringError, WeightDirection,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gateway::{Binding, GatewayError};
use crate::image::ImageInput;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    /// Maximum number of levels `K`.
    pub max_level: u32,
    /// Question cap per level `N_l`.
    pub max_questions_per_level: usize,
    /// Extra attempts when a reply cannot be parsed.
    pub retry_limit: u32,
    pub weight_ratio: f64,
    pub weight_direction: WeightDirection,
    /// Questions answered concurrently within one level.
    pub question_parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_level: 5,
            max_questions_per_level: 10,
            retry_limit: 2,
            weight_ratio: 1.2,
            weight_direction: WeightDirection::IncreasingWithDepth,
            question_parallelism: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: &str| Err(PipelineError::InvalidConfig(m.to_owned()));
        if self.max_level == 0 {
            return fail("max_level must be at least 1");
        }
        if self.max_questions_per_level == 0 {
            return fail("max_questions_per_level must be at least 1");
        }
        if !(self.weight_ratio.is_finite() && self.weight_ratio > 0.0) {
            return fail("weight_ratio must be a positive number");
        }
        if self.question_parallelism == 0 {
            return fail("question_parallelism must be at least 1");
        }
        Ok(())
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            weight_ratio: self.weight_ratio,
            max_level: self.max_level as usize,
            max_per_level: vec![self.max_questions_per_level; self.max_level as usize],
            weight_direction: self.weight_direction,
        }
    }
}

/// Model bindings for each pipeline role.
#[derive(Clone)]
pub struct Bindings {
    pub graph_gen: Binding,
    pub question_gen: Binding,
    pub vqa: Binding,
    pub eval: Binding,
    pub coverage: Binding,
    pub explain: Binding,
}

impl Bindings {
    pub fn uniform(binding: Binding) -> Self {
        Self {
            graph_gen: binding.clone(),
            question_gen: binding.clone(),
            vqa: binding.clone(),
            eval: binding.clone(),
            coverage: binding.clone(),
            explain: binding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    GraphGen,
    QuestionGen,
    Vqa,
    AnswerEval,
    Coverage,
    Explain,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::GraphGen => "graph generation",
            Stage::QuestionGen => "question generation",
            Stage::Vqa => "visual question answering",
            Stage::AnswerEval => "answer evaluation",
            Stage::Coverage => "coverage check",
            Stage::Explain => "explanation",
        })
    }
}

/// A recoverable issue met during evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<u32>,
    pub message: String,
}

impl Diagnostic {
    fn new(stage: Stage, level: Option<u32>, message: impl Into<String>) -> Self {
        Self {
            stage,
            level,
            message: message.into(),
        }
    }
}

/// One question's answer and verdict, or the stage whose call failed.
type AnswerOutcome = Result<(Answer, Verdict, Vec<Diagnostic>), (Stage, GatewayError)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    FullyCovered,
    VerifiedComplete,
    EmptyBatch,
    MaxLevel,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
    #[error("caption is empty")]
    EmptyCaption,
    #[error("semantic graph generation failed: {reason}")]
    GraphGenFailed { reason: String },
    #[error("no questions were generated at level 1")]
    EmptyHieg { diagnostics: Vec<Diagnostic> },
    #[error("{stage} failed{}: {source}", level.map(|l| format!(" at level {l}")).unwrap_or_default())]
    Backend {
        stage: Stage,
        level: Option<u32>,
        #[source]
        source: GatewayError,
        partial: Option<Box<Hieg>>,
    },
    #[error("template: {0}")]
    Template(#[from] PromptError),
    #[error("evaluation graph: {0}")]
    Hieg(#[from] HiegError),
    #[error("scoring: {0}")]
    Scoring(#[from] ScoringError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub caption: String,
    /// `1` when consistent.
    pub decision: Decision,
    pub h_acc: f64,
    pub h_comp: f64,
    pub realized_depth: u32,
    pub stop_reason: StopReason,
    pub per_level: Vec<LevelStats>,
    pub explanation: String,
    pub semantic_graph: SemanticGraph,
    pub coverage: CoverageMask,
    pub hieg: Hieg,
    pub diagnostics: Vec<Diagnostic>,
}

/// Runs evaluations with fixed bindings, templates and configuration.
pub struct Evaluator {
    bindings: Bindings,
    templates: TemplateSet,
    config: PipelineConfig,
}

type Asked<T, E> = Result<Result<T, (E, String)>, GatewayError>;

struct Level {
    level: u32,
    diagnostics: Vec<Diagnostic>,
}

impl Level {
    fn note(&mut self, stage: Stage, message: impl Into<String>) {
        self.diagnostics
            .push(Diagnostic::new(stage, Some(self.level), message));
    }
}

impl Evaluator {
    pub fn new(bindings: Bindings, config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self {
            bindings,
            templates: TemplateSet::builtin(),
            config,
        })
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = templates;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn ask<T, E>(
        &self,
        binding: &Binding,
        prompt: &str,
        image: Option<&ImageInput>,
        parse: impl Fn(&str) -> Result<T, E>,
        retryable: impl Fn(&E) -> bool,
    ) -> Asked<T, E> {
        binding.ask_parsed(prompt, image, self.config.retry_limit, parse, retryable)
    }

    pub fn evaluate_pair(
        &self,
        image: &ImageInput,
        caption: &str,
    ) -> Result<EvaluationReport, PipelineError> {
        let caption = caption.trim();
        if caption.is_empty() {
            return Err(PipelineError::EmptyCaption);
        }
        let mut diagnostics = Vec::new();
        let graph = self.generate_graph(caption, &mut diagnostics)?;
        let graph_json = serde_json::to_string_pretty(&graph.to_prompt_payload())
            .expect("graph payload serializes");

        let mut hieg = Hieg::new(self.config.max_level)?;
        let mut mask = fresh_mask(&graph);
        let mut suggestion: Option<String> = None;
        let mut stop_reason = StopReason::MaxLevel;

        for level in 1..=self.config.max_level {
            let mut ctx = Level {
                level,
                diagnostics: Vec::new(),
            };
            let backend_err = |stage, source, hieg: &Hieg| PipelineError::Backend {
                stage,
                level: Some(level),
                source,
                partial: Some(Box::new(hieg.clone())),
            };

            let level_text = level.to_string();
            let prompt = self.templates.render(
                TemplateName::QuestionGen,
                &[
                    ("semantic-graph", &graph_json),
                    ("unverified-elements", &graph.describe_unverified(&mask)),
                    ("previous-HIEG", &hieg.to_prompt_json()),
                    ("suggestion", suggestion.as_deref().unwrap_or("None")),
                    ("current-level", &level_text),
                ],
            )?;
            suggestion = None;
            let asked = self.ask(
                &self.bindings.question_gen,
                &prompt,
                None,
                |raw| parse_question_batch(raw, level),
                |e| !matches!(e, PromptError::EmptyBatch),
            );
            let batch = match asked.map_err(|e| backend_err(Stage::QuestionGen, e, &hieg))? {
                Ok(parsed) => {
                    for w in parsed.warnings {
                        ctx.note(Stage::QuestionGen, w);
                    }
                    parsed.value
                }
                Err((PromptError::EmptyBatch, _)) => {
                    ctx.note(Stage::QuestionGen, "generator returned no questions");
                    diagnostics.append(&mut ctx.diagnostics);
                    stop_reason = StopReason::EmptyBatch;
                    break;
                }
                Err((e, raw)) => {
                    ctx.note(
                        Stage::QuestionGen,
                        format!("unusable reply ({e}); stopping: {}", excerpt(&raw)),
                    );
                    diagnostics.append(&mut ctx.diagnostics);
                    stop_reason = StopReason::EmptyBatch;
                    break;
                }
            };
            let batch = self.repair_batch(batch, &hieg, &graph, &mut ctx);
            if batch.items.is_empty() {
                ctx.note(Stage::QuestionGen, "no usable questions after repair");
                diagnostics.append(&mut ctx.diagnostics);
                stop_reason = StopReason::EmptyBatch;
                break;
            }

            let answered = self.answer_batch(&batch, image, level);
            let mut answers = Vec::with_capacity(answered.len());
            let mut verdicts = Vec::with_capacity(answered.len());
            for result in answered {
                let (answer, verdict, notes) =
                    result.map_err(|(stage, e)| backend_err(stage, e, &hieg))?;
                answers.push(answer);
                verdicts.push(verdict);
                ctx.diagnostics.extend(notes);
            }
            hieg = hieg.expand(&batch, &answers, &verdicts)?;

            let declared_nodes: BTreeSet<&NodeId> =
                batch.items.iter().flat_map(|i| &i.covered_nodes).collect();
            let declared_edges: BTreeSet<usize> = batch
                .items
                .iter()
                .flat_map(|i| i.covered_edges.iter().copied())
                .collect();
            mask = mask
                .apply_coverage(declared_nodes.iter().map(|n| n.as_str()), declared_edges)
                .expect("declared coverage was filtered against the graph");
            if mask.is_fully_covered() {
                diagnostics.append(&mut ctx.diagnostics);
                stop_reason = StopReason::FullyCovered;
                break;
            }

            let prompt = self.templates.render(
                TemplateName::CoverageCheck,
                &[("semantic-graph", &graph_json), ("hieg", &hieg.to_prompt_json())],
            )?;
            let asked = self.ask(&self.bindings.coverage, &prompt, None, parse_coverage_reply, |_| true);
            match asked.map_err(|e| backend_err(Stage::Coverage, e, &hieg))? {
                Ok(parsed) => {
                    for w in parsed.warnings {
                        ctx.note(Stage::Coverage, w);
                    }
                    let reply = parsed.value;
                    let nodes: Vec<&str> = reply
                        .examined_nodes
                        .iter()
                        .map(NodeId::as_str)
                        .filter(|id| known_node(&mask, id, &mut ctx))
                        .collect();
                    let edges: Vec<usize> = reply
                        .examined_edges
                        .iter()
                        .copied()
                        .filter(|i| known_edge(&mask, *i, &mut ctx))
                        .collect();
                    mask = mask
                        .apply_coverage(nodes, edges)
                        .expect("examined elements were filtered against the graph");
                    if reply.verified_complete {
                        diagnostics.append(&mut ctx.diagnostics);
                        stop_reason = StopReason::VerifiedComplete;
                        break;
                    }
                    if mask.is_fully_covered() {
                        diagnostics.append(&mut ctx.diagnostics);
                        stop_reason = StopReason::FullyCovered;
                        break;
                    }
                    suggestion = reply.next_level_suggestion;
                }
                Err((e, raw)) => ctx.note(
                    Stage::Coverage,
                    format!("unusable reply ({e}); continuing: {}", excerpt(&raw)),
                ),
            }
            diagnostics.append(&mut ctx.diagnostics);
        }

        if hieg.is_empty() {
            return Err(PipelineError::EmptyHieg { diagnostics });
        }
        let scoring = self.config.scoring();
        let per_level = hieg.level_stats()?;
        let h_acc = compute_h_acc(&per_level, &scoring)?;
        let h_comp = compute_h_comp(&hieg.level_counts(), &scoring)?;
        let decision = hieg.overall_decision()?;
        let explanation = self.explain(&hieg, caption, decision, &mut diagnostics)?;

        Ok(EvaluationReport {
            caption: caption.to_owned(),
            decision,
            h_acc,
            h_comp,
            realized_depth: hieg.depth(),
            stop_reason,
            per_level,
            explanation,
            semantic_graph: graph,
            coverage: mask,
            hieg,
            diagnostics,
        })
    }

    fn generate_graph(
        &self,
        caption: &str,
        diagnostics: &mut Vec<Diagnostic>,
    ) -> Result<SemanticGraph, PipelineError> {
        let prompt = self.templates.render(
            TemplateName::SemanticGraphGen,
            &[("example", GRAPH_EXAMPLE), ("caption", caption)],
        )?;
        let asked = self.ask(
            &self.bindings.graph_gen,
            &prompt,
            None,
            |raw| parse_semantic_graph(raw, caption),
            |e| !matches!(e, GraphError::EmptyCaption),
        );
        match asked {
            Ok(Ok(parsed)) => {
                diagnostics.extend(
                    parsed
                        .warnings
                        .into_iter()
                        .map(|w| Diagnostic::new(Stage::GraphGen, None, w)),
                );
                Ok(parsed.value)
            }
            Ok(Err((e, raw))) => Err(PipelineError::GraphGenFailed {
                reason: format!(
                    "{e} after {} attempt(s); last reply: {}",
                    self.config.retry_limit + 1,
                    excerpt(&raw)
                ),
            }),
            Err(source) => Err(PipelineError::Backend {
                stage: Stage::GraphGen,
                level: None,
                source,
                partial: None,
            }),
        }
    }

    /// Drops repeats of earlier questions, unresolvable parents and unknown
    /// graph elements, and enforces the per-level cap.
    fn repair_batch(
        &self,
        batch: QuestionBatch,
        hieg: &Hieg,
        graph: &SemanticGraph,
        ctx: &mut Level,
    ) -> QuestionBatch {
        let mut items: Vec<QuestionItem> = Vec::with_capacity(batch.items.len());
        for mut item in batch.items {
            if item.question.trim().is_empty() {
                ctx.note(Stage::QuestionGen, "dropped a question with empty text");
                continue;
            }
            if hieg.contains_question(&item.question) {
                ctx.note(
                    Stage::QuestionGen,
                    format!("dropped repeat of an earlier question: {}", item.question),
                );
                continue;
            }
            let (kept, dropped): (BTreeSet<String>, BTreeSet<String>) = item
                .parent_ids
                .into_iter()
                .partition(|p| hieg.node(p).is_some());
            for p in dropped {
                ctx.note(Stage::QuestionGen, format!("dropped unknown parent {p} of: {}", item.question));
            }
            item.parent_ids = kept;
            let unknown_nodes: Vec<NodeId> = item
                .covered_nodes
                .iter()
                .filter(|n| graph.node(n.as_str()).is_none())
                .cloned()
                .collect();
            for n in unknown_nodes {
                ctx.note(Stage::QuestionGen, format!("ignored unknown covered node {n}"));
                item.covered_nodes.remove(&n);
            }
            let edge_count = graph.edges().len();
            let unknown_edges: Vec<usize> =
                item.covered_edges.range(edge_count..).copied().collect();
            for e in unknown_edges {
                ctx.note(Stage::QuestionGen, format!("ignored unknown covered edge {e}"));
                item.covered_edges.remove(&e);
            }
            items.push(item);
        }
        let cap = self.config.max_questions_per_level;
        if items.len() > cap {
            ctx.note(
                Stage::QuestionGen,
                format!("truncated {} questions to the cap of {cap}", items.len()),
            );
            items.truncate(cap);
        }
        QuestionBatch {
            level: batch.level,
            items,
        }
    }

    fn answer_batch(
        &self,
        batch: &QuestionBatch,
        image: &ImageInput,
        level: u32,
    ) -> Vec<AnswerOutcome> {
        let workers = self.config.question_parallelism.min(batch.items.len());
        if workers <= 1 {
            return batch
                .items
                .iter()
                .map(|item| self.answer_one(item, image, level))
                .collect();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            Ok(pool) => pool.install(|| {
                batch
                    .items
                    .par_iter()
                    .map(|item| self.answer_one(item, image, level))
                    .collect()
            }),
            Err(e) => {
                log::warn!("cannot start worker pool ({e}); answering sequentially");
                batch
                    .items
                    .iter()
                    .map(|item| self.answer_one(item, image, level))
                    .collect()
            }
        }
    }

    /// Asks one question against the image, then judges the answer.
    fn answer_one(
        &self,
        item: &QuestionItem,
        image: &ImageInput,
        level: u32,
    ) -> Result<(Answer, Verdict, Vec<Diagnostic>), (Stage, GatewayError)> {
        let mut notes = Vec::new();
        let note = |stage, msg: String| Diagnostic::new(stage, Some(level), msg);

        let prompt = self
            .templates
            .render(TemplateName::Vqa, &[("question", &item.question)])
            .expect("vqa template takes only the question");
        let answer = match self
            .ask(&self.bindings.vqa, &prompt, Some(image), parse_vqa_reply, |_| true)
            .map_err(|e| (Stage::Vqa, e))?
        {
            Ok(parsed) => {
                notes.extend(parsed.warnings.into_iter().map(|w| note(Stage::Vqa, w)));
                Answer::new(parsed.value.answer, parsed.value.confidence)
            }
            Err((e, raw)) => {
                notes.push(note(
                    Stage::Vqa,
                    format!("unstructured answer to \"{}\" ({e}); using raw text with confidence 1", item.question),
                ));
                Answer::new(raw.trim(), 1.0)
            }
        };

        let actual = answer.text.as_deref().unwrap_or_default();
        let prompt = self
            .templates
            .render(
                TemplateName::AnswerEval,
                &[
                    ("question", &item.question),
                    ("expected-answer", &item.expected_answer),
                    ("actual-answer", actual),
                ],
            )
            .expect("answer-eval template placeholders are fixed");
        let verdict = match self
            .ask(&self.bindings.eval, &prompt, None, parse_eval_reply, |_| true)
            .map_err(|e| (Stage::AnswerEval, e))?
        {
            Ok(reply) => Verdict::from_bool(reply.correct),
            Err((e, raw)) => {
                notes.push(note(
                    Stage::AnswerEval,
                    format!("unusable verdict for \"{}\" ({e}); marked incorrect: {}", item.question, excerpt(&raw)),
                ));
                Verdict::Incorrect
            }
        };
        Ok((answer, verdict, notes))
    }

    fn explain(
        &self,
        hieg: &Hieg,
        caption: &str,
        decision: Decision,
        diagnostics: &mut Vec<Diagnostic>,
    ) -> Result<String, PipelineError> {
        let prompt = self.templates.render(
            TemplateName::Explain,
            &[
                ("hieg", &hieg.to_prompt_json()),
                ("caption", caption),
                ("consistency-decision", decision.title()),
            ],
        )?;
        match self.bindings.explain.ask(prompt, None, false) {
            Ok(reply) => Ok(reply.text.trim().to_owned()),
            Err(e) => {
                diagnostics.push(Diagnostic::new(Stage::Explain, None, format!("no explanation: {e}")));
                Ok(String::new())
            }
        }
    }

    /// Evaluates every item, `parallelism` at a time. Outcomes keep input
    /// order; item failures are recorded instead of aborting the batch.
    pub fn evaluate_batch(
        &self,
        items: &[DatasetItem],
        base_dir: &Path,
        parallelism: usize,
        per_granularity: bool,
    ) -> BatchOutcome {
        let run = |item: &DatasetItem| self.evaluate_item(item, base_dir);
        let outcomes: Vec<ItemOutcome> = if parallelism <= 1 || items.len() <= 1 {
            items.iter().map(run).collect()
        } else {
            match rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
                Ok(pool) => pool.install(|| items.par_iter().map(run).collect()),
                Err(e) => {
                    log::warn!("cannot start worker pool ({e}); evaluating sequentially");
                    items.iter().map(run).collect()
                }
            }
        };
        BatchOutcome::summarize(outcomes, per_granularity)
    }

    fn evaluate_item(&self, item: &DatasetItem, base_dir: &Path) -> ItemOutcome {
        let path = item.resolve_image(base_dir);
        let result = ImageInput::load(&path)
            .map_err(|e| e.to_string())
            .and_then(|image| self.evaluate_pair(&image, &item.caption).map_err(|e| e.to_string()));
        match &result {
            Ok(r) => log::info!("{}: decision {} h_acc {:.4}", item.id, r.decision.as_str(), r.h_acc),
            Err(e) => log::error!("{}: {e}", item.id),
        }
        let (report, error) = match result {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e)),
        };
        ItemOutcome {
            id: item.id.clone(),
            label: item.label,
            granularity: item.granularity,
            report,
            error,
        }
    }
}

fn known_node(mask: &CoverageMask, id: &str, ctx: &mut Level) -> bool {
    let known = mask.contains_node(id);
    if !known {
        ctx.note(Stage::Coverage, format!("ignored unknown examined node {id}"));
    }
    known
}

fn known_edge(mask: &CoverageMask, index: usize, ctx: &mut Level) -> bool {
    let known = mask.contains_edge(index);
    if !known {
        ctx.note(Stage::Coverage, format!("ignored unknown examined edge {index}"));
    }
    known
}

fn excerpt(raw: &str) -> String {
    let flat: String = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    match flat.char_indices().nth(120) {
        Some((i, _)) => format!("{}...", &flat[..i]),
        None => flat,
    }
}

/// One line of an evaluation dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    #[serde(default)]
    pub id: String,
    pub image_path: String,
    pub caption: String,
    /// `0` consistent, `1` inconsistent, absent when unknown.
    #[serde(default)]
    pub label: Option<u8>,
    #[serde(default)]
    pub granularity: Option<u8>,
}

impl DatasetItem {
    /// Relative image paths are taken from `base_dir`.
    pub fn resolve_image(&self, base_dir: &Path) -> PathBuf {
        let p = Path::new(&self.image_path);
        if p.is_absolute() {
            p.to_owned()
        } else {
            base_dir.join(p)
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
}

/// Reads a JSONL dataset, skipping blank lines. Items without an id get
/// `line-<n>`.
pub fn read_dataset(reader: impl BufRead) -> Result<Vec<DatasetItem>, DatasetError> {
    let mut items = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| DatasetError::Line {
            line: line_no,
            message,
        };
        let mut item: DatasetItem = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if item.id.is_empty() {
            item.id = format!("line-{line_no}");
        }
        if let Some(l) = item.label.filter(|l| *l > 1) {
            return Err(bad(format!("label must be 0, 1 or null, got {l}")));
        }
        if let Some(g) = item.granularity.filter(|g| !(1..=4).contains(g)) {
            return Err(bad(format!("granularity must be 1-4, got {g}")));
        }
        if !ids.insert(item.id.clone()) {
            return Err(bad(format!("duplicate id {}", item.id)));
        }
        items.push(item);
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemOutcome {
    pub id: String,
    pub label: Option<u8>,
    pub granularity: Option<u8>,
    pub report: Option<EvaluationReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchOutcome {
    pub items: Vec<ItemOutcome>,
    /// Present when every item carries a label and at least one was decided.
    pub metrics: Option<MetricsSummary>,
    pub note: Option<String>,
}

impl BatchOutcome {
    fn summarize(items: Vec<ItemOutcome>, per_granularity: bool) -> Self {
        let all_labeled = !items.is_empty() && items.iter().all(|i| i.label.is_some());
        let decided: Vec<(u8, u8, Option<u8>)> = items
            .iter()
            .filter_map(|i| {
                let r = i.report.as_ref()?;
                Some((r.decision.flagged(), i.label?, i.granularity))
            })
            .collect();
        let failed = items.len() - items.iter().filter(|i| i.report.is_some()).count();
        let metrics = if all_labeled {
            detection_metrics_by_granularity(&decided).ok().map(|mut m| {
                if !per_granularity {
                    m.per_granularity = None;
                }
                m
            })
        } else {
            None
        };
        let note = (failed > 0).then(|| {
            format!(
                "{} of {} items decided; {failed} failed and are excluded from metrics",
                decided.len(),
                items.len()
            )
        });
        Self {
            items,
            metrics,
            note,
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &ItemOutcome> {
        self.items.iter().filter(|i| i.error.is_some())
    }
}
