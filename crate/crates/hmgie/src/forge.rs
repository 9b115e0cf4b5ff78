//! Multi-granularity adversarial dataset construction.
//!
//! For every image and granularity tier an ensemble of captioners writes a
//! caption, a fusion model merges them into the ground truth, and a
//! perturbation model then rewrites it with one planted error at a time.
//! Each attempt sees all earlier attempts. A consistency detector judges
//! every attempt; the first one it accepts as consistent is kept as an
//! adversarial sample.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use hmgie_core::forge::{
    clean_caption, render_caption_prompt, render_fusion_prompt, render_perturb_prompt, ForgeRecord,
    ForgeStatus, GranularitySpec,
};
use hmgie_core::prompt::{parse_direct_reply, PromptError, TemplateName, TemplateSet};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gateway::{Binding, GatewayError};
use crate::image::{ImageError, ImageInput};

/// Which consistency prompt the detector answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorPrompt {
    #[default]
    Direct,
    ChainOfThought,
}

impl DetectorPrompt {
    fn template(self) -> TemplateName {
        match self {
            DetectorPrompt::Direct => TemplateName::DirectPrompt,
            DetectorPrompt::ChainOfThought => TemplateName::CoTPrompt,
        }
    }
}

#[derive(Clone)]
pub struct ForgeBindings {
    pub captioners: Vec<Binding>,
    pub fusion: Binding,
    pub perturb: Binding,
    pub detector: Binding,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForgeConfig {
    pub max_iterations: u32,
    /// Keep the last perturbation of records the detector always caught.
    pub include_undetected: bool,
    pub detector_prompt: DetectorPrompt,
    /// Images forged concurrently.
    pub parallelism: usize,
    /// Extra attempts when a detector reply cannot be parsed.
    pub retry_limit: u32,
    pub specs: Vec<GranularitySpec>,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            include_undetected: false,
            detector_prompt: DetectorPrompt::Direct,
            parallelism: 4,
            retry_limit: 2,
            specs: GranularitySpec::standard(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error("invalid forge configuration: {0}")]
    InvalidConfig(String),
    #[error("ground-truth caption is empty")]
    EmptyGroundTruth,
    #[error("every captioner failed: {}", .0.join("; "))]
    AllCaptionersFailed(Vec<String>),
    #[error("{stage} failed: {source}")]
    Backend {
        stage: &'static str,
        #[source]
        source: GatewayError,
        partial: Option<Box<ForgeRecord>>,
    },
    #[error("template: {0}")]
    Template(#[from] PromptError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<(), ForgeError> {
        let fail = |m: &str| Err(ForgeError::InvalidConfig(m.to_owned()));
        if self.max_iterations == 0 {
            return fail("max_iterations must be at least 1");
        }
        if self.parallelism == 0 {
            return fail("parallelism must be at least 1");
        }
        let mut levels: Vec<u8> = self.specs.iter().map(|s| s.level).collect();
        levels.sort_unstable();
        levels.dedup();
        if levels.len() != self.specs.len() || levels.iter().any(|l| !(1..=4).contains(l)) {
            return fail("granularity levels must be distinct values in 1-4");
        }
        Ok(())
    }
}

/// Per-granularity line counts of a forged dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GranularityCounts {
    pub clean: usize,
    pub adversarial: usize,
    /// Records whose every perturbation was detected.
    pub undetected_omitted: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ForgeSummary {
    pub images: usize,
    pub lines: usize,
    pub per_granularity: BTreeMap<u8, GranularityCounts>,
    /// One message per record or image that could not be forged.
    pub skipped: Vec<String>,
}

pub struct Forge {
    bindings: ForgeBindings,
    templates: TemplateSet,
    config: ForgeConfig,
}

impl Forge {
    pub fn new(bindings: ForgeBindings, config: ForgeConfig) -> Result<Self, ForgeError> {
        config.validate()?;
        if bindings.captioners.is_empty() {
            return Err(ForgeError::InvalidConfig("at least one captioner is required".into()));
        }
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

    pub fn config(&self) -> &ForgeConfig {
        &self.config
    }

    /// Captions `image` with every ensemble member and fuses the results.
    /// A single surviving caption is returned unchanged.
    pub fn generate_ground_truth(
        &self,
        image: &ImageInput,
        spec: &GranularitySpec,
    ) -> Result<String, ForgeError> {
        let prompt = render_caption_prompt(spec)?;
        let mut captions = Vec::new();
        let mut failures = Vec::new();
        for captioner in &self.bindings.captioners {
            match captioner.ask(prompt.clone(), Some(image), false) {
                Ok(reply) => {
                    let caption = clean_caption(&reply.text);
                    if caption.is_empty() {
                        failures.push(format!("{}: empty caption", captioner.model_id));
                    } else {
                        captions.push(caption);
                    }
                }
                Err(e) => failures.push(format!("{}: {e}", captioner.model_id)),
            }
        }
        for f in &failures {
            log::warn!("captioner failed: {f}");
        }
        match captions.len() {
            0 => Err(ForgeError::AllCaptionersFailed(failures)),
            1 => Ok(captions.remove(0)),
            _ => {
                let prompt = render_fusion_prompt(spec, &captions)?;
                let reply = self.bindings.fusion.ask(prompt, None, false).map_err(|source| {
                    ForgeError::Backend {
                        stage: "caption fusion",
                        source,
                        partial: None,
                    }
                })?;
                let fused = clean_caption(&reply.text);
                if fused.is_empty() {
                    return Err(ForgeError::EmptyGroundTruth);
                }
                Ok(fused)
            }
        }
    }

    /// Plants errors into `ground_truth` until the detector accepts one or
    /// the iteration budget runs out.
    pub fn perturb_iteratively(
        &self,
        ground_truth: &str,
        image: &ImageInput,
        image_path: &str,
        granularity: u8,
    ) -> Result<ForgeRecord, ForgeError> {
        let ground_truth = ground_truth.trim();
        if ground_truth.is_empty() {
            return Err(ForgeError::EmptyGroundTruth);
        }
        let mut record = ForgeRecord {
            image_path: image_path.to_owned(),
            granularity,
            ground_truth_caption: ground_truth.to_owned(),
            perturbed_caption: None,
            perturbation_history: Vec::new(),
            detector_verdicts: Vec::new(),
            status: ForgeStatus::Clean,
        };
        let fail = |stage, source, record: &ForgeRecord| ForgeError::Backend {
            stage,
            source,
            partial: Some(Box::new(record.clone())),
        };
        for _ in 0..self.config.max_iterations {
            let prompt = render_perturb_prompt(ground_truth, &record.perturbation_history)?;
            let reply = self
                .bindings
                .perturb
                .ask(prompt, None, false)
                .map_err(|e| fail("perturbation", e, &record))?;
            let candidate = clean_caption(&reply.text);
            record.perturbation_history.push(candidate.clone());
            record.perturbed_caption = Some(candidate.clone());

            if candidate.is_empty() || candidate == ground_truth {
                log::warn!("{image_path} G{granularity}: perturbation left the caption unchanged");
                record.detector_verdicts.push(1);
                continue;
            }
            let prompt = self
                .templates
                .render(self.config.detector_prompt.template(), &[("caption", &candidate)])?;
            let asked = self
                .bindings
                .detector
                .ask_parsed(&prompt, Some(image), self.config.retry_limit, parse_direct_reply, |_| true)
                .map_err(|e| fail("detection", e, &record))?;
            let fooled = match asked {
                Ok(reply) => reply.matches,
                Err((e, _)) => {
                    log::warn!("{image_path} G{granularity}: unusable detector reply ({e}); counted as detected");
                    false
                }
            };
            record.detector_verdicts.push(u8::from(!fooled));
            if fooled {
                record.status = ForgeStatus::AdversarialFound;
                return Ok(record);
            }
        }
        record.status = ForgeStatus::MaxIterReached;
        Ok(record)
    }

    /// Ground truth plus perturbation for every configured granularity of
    /// one image. Errors are per granularity.
    pub fn forge_image(&self, path: &Path) -> Result<Vec<Result<ForgeRecord, String>>, ForgeError> {
        let image = ImageInput::load(path)?;
        let shown = path.display().to_string();
        Ok(self
            .config
            .specs
            .iter()
            .map(|spec| {
                let gt = self
                    .generate_ground_truth(&image, spec)
                    .map_err(|e| format!("{shown} G{}: {e}", spec.level))?;
                self.perturb_iteratively(&gt, &image, &shown, spec.level)
                    .map_err(|e| format!("{shown} G{}: {e}", spec.level))
            })
            .collect())
    }

    /// Forges every image and writes the dataset as JSONL, ordered by image
    /// path and granularity.
    pub fn build_dataset(
        &self,
        images: &[PathBuf],
        out: &mut impl Write,
    ) -> std::io::Result<ForgeSummary> {
        let mut images = images.to_vec();
        images.sort();
        let mut summary = ForgeSummary {
            images: images.len(),
            ..ForgeSummary::default()
        };
        for spec in &self.config.specs {
            summary.per_granularity.insert(spec.level, GranularityCounts::default());
        }
        if images.is_empty() {
            log::warn!("no images to forge; writing an empty dataset");
        }
        let run = |p: &PathBuf| self.forge_image(p);
        let results: Vec<_> = if self.config.parallelism <= 1 || images.len() <= 1 {
            images.iter().map(run).collect()
        } else {
            match rayon::ThreadPoolBuilder::new().num_threads(self.config.parallelism).build() {
                Ok(pool) => pool.install(|| images.par_iter().map(run).collect()),
                Err(e) => {
                    log::warn!("cannot start worker pool ({e}); forging sequentially");
                    images.iter().map(run).collect()
                }
            }
        };

        for (path, result) in images.iter().zip(results) {
            let records = match result {
                Ok(r) => r,
                Err(e) => {
                    log::error!("{e}");
                    summary.skipped.push(e.to_string());
                    continue;
                }
            };
            let stem = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            for record in records {
                let record = match record {
                    Ok(r) => r,
                    Err(e) => {
                        log::error!("{e}");
                        summary.skipped.push(e);
                        continue;
                    }
                };
                let counts = summary.per_granularity.entry(record.granularity).or_default();
                let lines = record.dataset_lines(&stem, self.config.include_undetected);
                for line in &lines {
                    serde_json::to_writer(&mut *out, line)?;
                    out.write_all(b"\n")?;
                    if line.label == 0 {
                        counts.clean += 1;
                    } else {
                        counts.adversarial += 1;
                    }
                }
                if record.status == ForgeStatus::MaxIterReached && lines.len() == 1 {
                    counts.undetected_omitted += 1;
                    log::info!(
                        "{stem} G{}: every perturbation was detected; adversarial line omitted",
                        record.granularity
                    );
                }
                summary.lines += lines.len();
            }
        }
        out.flush()?;
        Ok(summary)
    }
}

/// Image files directly inside `dir`, recognized by extension.
pub fn list_images(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "gif", "webp", "bmp"];
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
