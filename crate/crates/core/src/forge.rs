//! Types and prompts for building multi-granularity adversarial caption
//! datasets. The driver that calls models lives in the `hmgie` crate.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::Serialize;

use crate::prompt::{PromptError, Template};

/// Caption detail tier with its generation instructions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GranularitySpec {
    pub level: u8,
    pub name: String,
    pub prompt: String,
    pub target_word_range: (u32, u32),
}

impl GranularitySpec {
    /// The four standard tiers, basic through complete. Word ranges span
    /// one standard deviation around the observed mean lengths (about 11,
    /// 24, 41 and 64 words).
    pub fn standard() -> Vec<GranularitySpec> {
        [
            (
                1,
                "Basic",
                "Identify the main objects and the basic scene type in one simple sentence.",
                (9, 13),
            ),
            (
                2,
                "Extended",
                "Describe the main objects with their basic visual attributes, their locations and the primary spatial relationships between them.",
                (20, 29),
            ),
            (
                3,
                "Detailed",
                "Describe the main objects and the secondary objects, their specific visual features and the more complex relationships between them.",
                (34, 48),
            ),
            (
                4,
                "Complete",
                "Describe all visual elements with full attribute descriptions and comprehensive scene details, including lighting, materials and the overall arrangement.",
                (55, 73),
            ),
        ]
        .into_iter()
        .map(|(level, name, prompt, range)| GranularitySpec {
            level,
            name: name.into(),
            prompt: prompt.into(),
            target_word_range: range,
        })
        .collect()
    }

    fn range_strings(&self) -> (String, String) {
        (
            self.target_word_range.0.to_string(),
            self.target_word_range.1.to_string(),
        )
    }
}

/// How an adversarial search for one caption ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeStatus {
    /// No perturbation attempted yet.
    Clean,
    /// A perturbed caption the detector judged consistent.
    AdversarialFound,
    /// Every attempt was detected.
    MaxIterReached,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ForgeRecord {
    pub image_path: String,
    pub granularity: u8,
    pub ground_truth_caption: String,
    pub perturbed_caption: Option<String>,
    pub perturbation_history: Vec<String>,
    /// One bit per attempt; `1` means the detector flagged the caption.
    pub detector_verdicts: Vec<u8>,
    pub status: ForgeStatus,
}

/// One line of a forged dataset file. Shares the evaluation input schema
/// and adds provenance fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetLine {
    pub id: String,
    pub image_path: String,
    pub caption: String,
    pub label: u8,
    pub granularity: u8,
    pub ground_truth: String,
    pub perturbation_history: Vec<String>,
    pub status: ForgeStatus,
}

impl ForgeRecord {
    /// The clean line and, when an evading perturbation exists (or
    /// `include_undetected` is set and any attempt exists), the perturbed
    /// line. `stem` prefixes the ids.
    pub fn dataset_lines(&self, stem: &str, include_undetected: bool) -> Vec<DatasetLine> {
        let base = format!("{stem}-g{}", self.granularity);
        let mut lines = Vec::with_capacity(2);
        lines.push(DatasetLine {
            id: format!("{base}-clean"),
            image_path: self.image_path.clone(),
            caption: self.ground_truth_caption.clone(),
            label: 0,
            granularity: self.granularity,
            ground_truth: self.ground_truth_caption.clone(),
            perturbation_history: Vec::new(),
            status: ForgeStatus::Clean,
        });
        let keep = match self.status {
            ForgeStatus::AdversarialFound => true,
            ForgeStatus::MaxIterReached => include_undetected,
            ForgeStatus::Clean => false,
        };
        if let (true, Some(caption)) = (keep, &self.perturbed_caption) {
            if *caption != self.ground_truth_caption {
                lines.push(DatasetLine {
                    id: format!("{base}-adv"),
                    image_path: self.image_path.clone(),
                    caption: caption.clone(),
                    label: 1,
                    granularity: self.granularity,
                    ground_truth: self.ground_truth_caption.clone(),
                    perturbation_history: self.perturbation_history.clone(),
                    status: self.status,
                });
            }
        }
        lines
    }
}

const CAPTION_KEYS: &[&str] = &["granularity-instructions", "min-words", "max-words"];
const FUSION_KEYS: &[&str] = &["granularity-instructions", "min-words", "max-words", "captions"];
const PERTURB_KEYS: &[&str] = &["ground-truth", "history"];

/// Prompts used while forging datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForgeTemplate {
    Caption,
    Fusion,
    Perturb,
}

impl ForgeTemplate {
    pub const ALL: [ForgeTemplate; 3] = [ForgeTemplate::Caption, ForgeTemplate::Fusion, ForgeTemplate::Perturb];

    pub fn file_stem(self) -> &'static str {
        match self {
            ForgeTemplate::Caption => "forge_caption",
            ForgeTemplate::Fusion => "forge_fusion",
            ForgeTemplate::Perturb => "forge_perturb",
        }
    }

    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            ForgeTemplate::Caption => CAPTION_KEYS,
            ForgeTemplate::Fusion => FUSION_KEYS,
            ForgeTemplate::Perturb => PERTURB_KEYS,
        }
    }

    pub fn template(self) -> Template {
        let body = match self {
            ForgeTemplate::Caption => include_str!("../templates/forge_caption.txt"),
            ForgeTemplate::Fusion => include_str!("../templates/forge_fusion.txt"),
            ForgeTemplate::Perturb => include_str!("../templates/forge_perturb.txt"),
        };
        Template::new(self.file_stem(), body, self.placeholders())
            .unwrap_or_else(|e| panic!("shipped template {} invalid: {e}", self.file_stem()))
    }
}

pub fn render_caption_prompt(spec: &GranularitySpec) -> Result<String, PromptError> {
    let (lo, hi) = spec.range_strings();
    ForgeTemplate::Caption.template().render(&[
        ("granularity-instructions", &spec.prompt),
        ("min-words", &lo),
        ("max-words", &hi),
    ])
}

pub fn render_fusion_prompt(spec: &GranularitySpec, captions: &[String]) -> Result<String, PromptError> {
    let (lo, hi) = spec.range_strings();
    let listed = numbered(captions);
    ForgeTemplate::Fusion.template().render(&[
        ("granularity-instructions", &spec.prompt),
        ("min-words", &lo),
        ("max-words", &hi),
        ("captions", &listed),
    ])
}

/// Perturbation prompt embedding the ground truth and every earlier
/// attempt, oldest first.
pub fn render_perturb_prompt(ground_truth: &str, history: &[String]) -> Result<String, PromptError> {
    let listed = if history.is_empty() {
        "None".to_string()
    } else {
        numbered(history)
    };
    ForgeTemplate::Perturb
        .template()
        .render(&[("ground-truth", ground_truth), ("history", &listed)])
}

fn numbered(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {}", i + 1, c))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Normalizes a free-text caption reply: trims whitespace, code fences and
/// surrounding quotes.
pub fn clean_caption(raw: &str) -> String {
    let mut text = raw.trim();
    if let Some(inner) = text.strip_prefix("```") {
        let inner = inner.split_once('\n').map_or(inner, |(_, rest)| rest);
        text = inner.strip_suffix("```").unwrap_or(inner).trim();
    }
    for (open, close) in [('"', '"'), ('\u{201c}', '\u{201d}')] {
        if text.len() >= 2 && text.starts_with(open) && text.ends_with(close) {
            text = text[open.len_utf8()..text.len() - close.len_utf8()].trim();
        }
    }
    text.to_string()
}
