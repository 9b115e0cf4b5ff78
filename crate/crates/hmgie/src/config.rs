//! Run configuration merged from defaults, a TOML file, environment
//! variables and command-line flags, in increasing precedence.
//!
//! Every source is first read into a [`ConfigLayer`] of optional values.
//! Layers are overlaid and the result is validated once into a
//! [`RunConfig`], which also knows how to build model bindings.
//!
//! Environment variables:
//!
//! | variable | setting |
//! |---|---|
//! | `HMGIE_API_KEY`, `HMGIE_ENDPOINT`, `HMGIE_MODEL` | defaults for every role |
//! | `HMGIE_<ROLE>_API_KEY`, `_ENDPOINT`, `_MODEL` | one role, e.g. `HMGIE_VQA_MODEL` |
//! | `HMGIE_CACHE_DIR` | persistent response cache |
//! | `HMGIE_TEMPLATES_DIR` | prompt overrides |
//! | `HMGIE_MAX_LEVEL`, `HMGIE_MAX_PER_LEVEL`, `HMGIE_WEIGHT_RATIO` | scoring |
//! | `HMGIE_PARALLELISM`, `HMGIE_TEMPERATURE`, `HMGIE_MAX_ITER` | run settings |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use hmgie_core::forge::GranularitySpec;
use hmgie_core::prompt::{TemplateName, TemplateSet};
use hmgie_core::scoring::WeightDirection;
use serde::Deserialize;

use crate::forge::{DetectorPrompt, ForgeBindings, ForgeConfig};
use crate::gateway::{
    Backend, Binding, FixtureStore, Gateway, HttpBackend, RecordingBackend, ReplayBackend, RetryPolicy,
};
use crate::pipeline::{Bindings, PipelineConfig};

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const DEFAULT_MODEL: &str = "gpt-4o";

/// A model role. Each role can point at its own endpoint, key and model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    GraphGen,
    QuestionGen,
    Vqa,
    Eval,
    Coverage,
    Explain,
    Caption,
    Fusion,
    Perturb,
    Detector,
}

impl Role {
    pub const ALL: [Role; 10] = [
        Role::GraphGen,
        Role::QuestionGen,
        Role::Vqa,
        Role::Eval,
        Role::Coverage,
        Role::Explain,
        Role::Caption,
        Role::Fusion,
        Role::Perturb,
        Role::Detector,
    ];

    pub const EVALUATE: [Role; 6] = [
        Role::GraphGen,
        Role::QuestionGen,
        Role::Vqa,
        Role::Eval,
        Role::Coverage,
        Role::Explain,
    ];

    pub const FORGE: [Role; 4] = [Role::Caption, Role::Fusion, Role::Perturb, Role::Detector];

    /// Name used in config files, e.g. `[roles.graph-gen]`.
    pub fn key(self) -> &'static str {
        match self {
            Role::GraphGen => "graph-gen",
            Role::QuestionGen => "question-gen",
            Role::Vqa => "vqa",
            Role::Eval => "eval",
            Role::Coverage => "coverage",
            Role::Explain => "explain",
            Role::Caption => "caption",
            Role::Fusion => "fusion",
            Role::Perturb => "perturb",
            Role::Detector => "detector",
        }
    }

    /// Infix used in environment variables, e.g. `GRAPH_GEN`.
    pub fn env_name(self) -> String {
        self.key().replace('-', "_").to_ascii_uppercase()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RoleLayer {
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub model: Option<String>,
}

impl RoleLayer {
    fn overlay(self, higher: RoleLayer) -> RoleLayer {
        RoleLayer {
            endpoint: higher.endpoint.or(self.endpoint),
            api_key: higher.api_key.or(self.api_key),
            model: higher.model.or(self.model),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionSetting {
    Increasing,
    Decreasing,
}

impl From<DirectionSetting> for WeightDirection {
    fn from(d: DirectionSetting) -> Self {
        match d {
            DirectionSetting::Increasing => WeightDirection::IncreasingWithDepth,
            DirectionSetting::Decreasing => WeightDirection::DecreasingWithDepth,
        }
    }
}

/// Optional settings from one source.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ConfigLayer {
    pub max_level: Option<u32>,
    pub max_per_level: Option<usize>,
    pub weight_ratio: Option<f64>,
    pub weight_direction: Option<DirectionSetting>,
    pub retry_limit: Option<u32>,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub parallelism: Option<usize>,
    pub question_parallelism: Option<usize>,
    pub max_attempts: Option<u32>,
    pub initial_backoff_ms: Option<u64>,
    pub max_total_backoff_ms: Option<u64>,
    pub timeout_secs: Option<u64>,
    pub cache_dir: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub max_iter: Option<u32>,
    pub include_undetected: Option<bool>,
    pub detector_prompt: Option<DetectorPrompt>,
    pub captioners: Option<Vec<String>>,
    /// Defaults shared by every role.
    #[serde(default)]
    pub backend: RoleLayer,
    #[serde(default)]
    pub roles: BTreeMap<String, RoleLayer>,
}

macro_rules! overlay_fields {
    ($low:ident, $high:ident; $($f:ident),* $(,)?) => {
        ConfigLayer {
            $($f: $high.$f.or($low.$f),)*
            backend: $low.backend.overlay($high.backend),
            roles: {
                let mut roles = $low.roles;
                for (k, v) in $high.roles {
                    let merged = roles.remove(&k).unwrap_or_default().overlay(v);
                    roles.insert(k, merged);
                }
                roles
            },
        }
    };
}

fn parse_env<T: FromStr>(name: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| ConfigError::new(name, format!("cannot parse {value:?}: {e}")))
}

impl ConfigLayer {
    /// `higher` wins wherever it has a value.
    pub fn overlay(self, higher: ConfigLayer) -> ConfigLayer {
        let low = self;
        overlay_fields!(low, higher;
            max_level, max_per_level, weight_ratio, weight_direction, retry_limit,
            temperature, max_output_tokens, parallelism, question_parallelism,
            max_attempts, initial_backoff_ms, max_total_backoff_ms, timeout_secs,
            cache_dir, templates_dir, max_iter, include_undetected, detector_prompt,
            captioners,
        )
    }

    pub fn from_toml_str(text: &str) -> Result<ConfigLayer, ConfigError> {
        let layer: ConfigLayer =
            toml::from_str(text).map_err(|e| ConfigError::new("config file", e.to_string()))?;
        for key in layer.roles.keys() {
            if !Role::ALL.iter().any(|r| r.key() == key) {
                return Err(ConfigError::new(
                    format!("roles.{key}"),
                    "unknown role; expected one of graph-gen, question-gen, vqa, eval, coverage, explain, caption, fusion, perturb, detector",
                ));
            }
        }
        Ok(layer)
    }

    pub fn from_file(path: &Path) -> Result<ConfigLayer, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("config file", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| ConfigError::new(e.field, format!("{}: {}", path.display(), e.message)))
    }

    /// Reads the `HMGIE_*` variables from `vars`; others are ignored.
    pub fn from_env<'a>(vars: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<ConfigLayer, ConfigError> {
        let mut layer = ConfigLayer::default();
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix("HMGIE_") else {
                continue;
            };
            match rest {
                "MAX_LEVEL" => layer.max_level = Some(parse_env(name, value)?),
                "MAX_PER_LEVEL" => layer.max_per_level = Some(parse_env(name, value)?),
                "WEIGHT_RATIO" => layer.weight_ratio = Some(parse_env(name, value)?),
                "PARALLELISM" => layer.parallelism = Some(parse_env(name, value)?),
                "TEMPERATURE" => layer.temperature = Some(parse_env(name, value)?),
                "MAX_ITER" => layer.max_iter = Some(parse_env(name, value)?),
                "CACHE_DIR" => layer.cache_dir = Some(PathBuf::from(value)),
                "TEMPLATES_DIR" => layer.templates_dir = Some(PathBuf::from(value)),
                "API_KEY" => layer.backend.api_key = Some(value.to_owned()),
                "ENDPOINT" => layer.backend.endpoint = Some(value.to_owned()),
                "MODEL" => layer.backend.model = Some(value.to_owned()),
                "CONFIG" | "LOG" => {}
                _ => {
                    let role = Role::ALL.iter().find_map(|r| {
                        let field = rest.strip_prefix(&r.env_name())?.strip_prefix('_')?;
                        Some((*r, field))
                    });
                    let entry = |layer: &mut ConfigLayer, r: Role| -> RoleLayer {
                        layer.roles.remove(r.key()).unwrap_or_default()
                    };
                    match role {
                        Some((r, field @ ("API_KEY" | "ENDPOINT" | "MODEL"))) => {
                            let mut settings = entry(&mut layer, r);
                            let v = Some(value.to_owned());
                            match field {
                                "API_KEY" => settings.api_key = v,
                                "ENDPOINT" => settings.endpoint = v,
                                _ => settings.model = v,
                            }
                            layer.roles.insert(r.key().to_owned(), settings);
                        }
                        _ => log::warn!("ignoring unrecognized environment variable {name}"),
                    }
                }
            }
        }
        Ok(layer)
    }

    /// Validates the merged layer, filling gaps with defaults.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let pipe_default = PipelineConfig::default();
        let forge_default = ForgeConfig::default();
        let retry_default = RetryPolicy::default();

        let positive = |field: &str, v: u64| {
            if v == 0 {
                Err(ConfigError::new(field, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        let max_level = self.max_level.unwrap_or(pipe_default.max_level);
        positive("max-level", max_level.into())?;
        let max_per_level = self.max_per_level.unwrap_or(pipe_default.max_questions_per_level);
        positive("max-per-level", max_per_level as u64)?;
        let weight_ratio = self.weight_ratio.unwrap_or(pipe_default.weight_ratio);
        if !(weight_ratio.is_finite() && weight_ratio > 0.0) {
            return Err(ConfigError::new("weight-ratio", format!("must be a positive number, got {weight_ratio}")));
        }
        let parallelism = self.parallelism.unwrap_or(4);
        positive("parallelism", parallelism as u64)?;
        let question_parallelism = self.question_parallelism.unwrap_or(pipe_default.question_parallelism);
        positive("question-parallelism", question_parallelism as u64)?;
        let temperature = self.temperature.unwrap_or(crate::gateway::DEFAULT_TEMPERATURE);
        if !(temperature.is_finite() && temperature >= 0.0) {
            return Err(ConfigError::new("temperature", format!("must be non-negative, got {temperature}")));
        }
        let max_output_tokens = self.max_output_tokens.unwrap_or(crate::gateway::DEFAULT_MAX_OUTPUT_TOKENS);
        positive("max-output-tokens", max_output_tokens.into())?;
        let max_attempts = self.max_attempts.unwrap_or(retry_default.max_attempts);
        positive("max-attempts", max_attempts.into())?;
        let max_iter = self.max_iter.unwrap_or(forge_default.max_iterations);
        positive("max-iter", max_iter.into())?;
        let timeout_secs = self.timeout_secs.unwrap_or(120);
        positive("timeout-secs", timeout_secs)?;
        let captioners = self
            .captioners
            .clone()
            .unwrap_or_default();
        if captioners.iter().any(|c| c.trim().is_empty()) {
            return Err(ConfigError::new("captioners", "model ids must be non-empty"));
        }

        let mut roles = BTreeMap::new();
        for role in Role::ALL {
            let own = self.roles.get(role.key()).cloned().unwrap_or_default();
            let merged = self.backend.clone().overlay(own);
            let endpoint = merged.endpoint.unwrap_or_else(|| DEFAULT_ENDPOINT.to_owned());
            if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
                return Err(ConfigError::new(
                    format!("roles.{}.endpoint", role.key()),
                    format!("must be an http(s) URL, got {endpoint:?}"),
                ));
            }
            let model = merged.model.unwrap_or_else(|| DEFAULT_MODEL.to_owned());
            if model.trim().is_empty() {
                return Err(ConfigError::new(format!("roles.{}.model", role.key()), "must be non-empty"));
            }
            roles.insert(
                role,
                RoleSettings {
                    endpoint,
                    api_key: merged.api_key.filter(|k| !k.trim().is_empty()),
                    model,
                },
            );
        }

        Ok(RunConfig {
            pipeline: PipelineConfig {
                max_level,
                max_questions_per_level: max_per_level,
                retry_limit: self.retry_limit.unwrap_or(pipe_default.retry_limit),
                weight_ratio,
                weight_direction: self
                    .weight_direction
                    .map(Into::into)
                    .unwrap_or(pipe_default.weight_direction),
                question_parallelism,
            },
            forge: ForgeConfig {
                max_iterations: max_iter,
                include_undetected: self.include_undetected.unwrap_or(forge_default.include_undetected),
                detector_prompt: self.detector_prompt.unwrap_or(forge_default.detector_prompt),
                parallelism,
                retry_limit: self.retry_limit.unwrap_or(forge_default.retry_limit),
                specs: GranularitySpec::standard(),
            },
            parallelism,
            temperature,
            max_output_tokens,
            retry: RetryPolicy {
                max_attempts,
                initial_delay: self
                    .initial_backoff_ms
                    .map(Duration::from_millis)
                    .unwrap_or(retry_default.initial_delay),
                multiplier: retry_default.multiplier,
                max_total_delay: self
                    .max_total_backoff_ms
                    .map(Duration::from_millis)
                    .unwrap_or(retry_default.max_total_delay),
            },
            timeout: Duration::from_secs(timeout_secs),
            cache_dir: self.cache_dir.clone(),
            templates_dir: self.templates_dir.clone(),
            roles,
            captioners,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleSettings {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
}

/// Validated settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub forge: ForgeConfig,
    /// Items evaluated or images forged concurrently.
    pub parallelism: usize,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub retry: RetryPolicy,
    pub timeout: Duration,
    pub cache_dir: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub roles: BTreeMap<Role, RoleSettings>,
    /// Caption ensemble model ids; empty means the caption role's model.
    pub captioners: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        ConfigLayer::default()
            .resolve()
            .expect("defaults are valid")
    }
}

/// Where model replies come from.
#[derive(Clone)]
pub enum BackendSource {
    /// HTTP backends, with the persistent cache when configured.
    Live,
    /// HTTP backends whose replies are also written to a fixture store.
    Record(PathBuf),
    /// Fixture replies only; no network access.
    Replay(PathBuf),
    /// One caller-supplied backend for every role.
    Custom(Arc<dyn Backend>),
}

/// Builds gateways on demand, sharing one per distinct backend.
struct GatewayPool<'a> {
    config: &'a RunConfig,
    source: &'a BackendSource,
    shared: Option<Arc<Gateway>>,
    by_endpoint: BTreeMap<(String, String), Arc<Gateway>>,
}

impl<'a> GatewayPool<'a> {
    fn new(config: &'a RunConfig, source: &'a BackendSource) -> Self {
        Self {
            config,
            source,
            shared: None,
            by_endpoint: BTreeMap::new(),
        }
    }

    fn finish(&self, gateway: Gateway) -> Gateway {
        gateway.with_retry(self.config.retry)
    }

    fn gateway(&mut self, role: Role) -> Result<Arc<Gateway>, ConfigError> {
        let backend: Arc<dyn Backend> = match self.source {
            BackendSource::Replay(dir) => {
                if let Some(g) = &self.shared {
                    return Ok(Arc::clone(g));
                }
                Arc::new(ReplayBackend::new(FixtureStore::new(dir)))
            }
            BackendSource::Custom(backend) => {
                if let Some(g) = &self.shared {
                    return Ok(Arc::clone(g));
                }
                Arc::clone(backend)
            }
            BackendSource::Live | BackendSource::Record(_) => {
                let settings = &self.config.roles[&role];
                let key = settings.api_key.clone().ok_or_else(|| {
                    ConfigError::new(
                        format!("HMGIE_{}_API_KEY", role.env_name()),
                        format!("no API key configured for the {} role (set it or HMGIE_API_KEY)", role.key()),
                    )
                })?;
                let id = (settings.endpoint.clone(), key.clone());
                if let Some(g) = self.by_endpoint.get(&id) {
                    return Ok(Arc::clone(g));
                }
                let http: Arc<dyn Backend> =
                    Arc::new(HttpBackend::new(&settings.endpoint, key, self.config.timeout));
                let gateway = match self.source {
                    BackendSource::Record(dir) => Gateway::new(Arc::new(RecordingBackend::new(
                        http,
                        FixtureStore::new(dir),
                    ))),
                    _ => match &self.config.cache_dir {
                        Some(dir) => Gateway::new(http).with_disk_cache(FixtureStore::new(dir)),
                        None => Gateway::new(http),
                    },
                };
                let gateway = Arc::new(self.finish(gateway));
                self.by_endpoint.insert(id, Arc::clone(&gateway));
                return Ok(gateway);
            }
        };
        let gateway = Arc::new(self.finish(Gateway::new(backend)));
        self.shared = Some(Arc::clone(&gateway));
        Ok(gateway)
    }

    fn binding(&mut self, role: Role, model: Option<&str>) -> Result<Binding, ConfigError> {
        let gateway = self.gateway(role)?;
        let model = model.unwrap_or(&self.config.roles[&role].model);
        let mut binding = Binding::new(gateway, model);
        binding.temperature = self.config.temperature;
        binding.max_output_tokens = self.config.max_output_tokens;
        Ok(binding)
    }
}

impl RunConfig {
    pub fn pipeline_bindings(&self, source: &BackendSource) -> Result<Bindings, ConfigError> {
        let mut pool = GatewayPool::new(self, source);
        Ok(Bindings {
            graph_gen: pool.binding(Role::GraphGen, None)?,
            question_gen: pool.binding(Role::QuestionGen, None)?,
            vqa: pool.binding(Role::Vqa, None)?,
            eval: pool.binding(Role::Eval, None)?,
            coverage: pool.binding(Role::Coverage, None)?,
            explain: pool.binding(Role::Explain, None)?,
        })
    }

    pub fn forge_bindings(&self, source: &BackendSource) -> Result<ForgeBindings, ConfigError> {
        let mut pool = GatewayPool::new(self, source);
        let captioners = if self.captioners.is_empty() {
            vec![pool.binding(Role::Caption, None)?]
        } else {
            self.captioners
                .iter()
                .map(|m| pool.binding(Role::Caption, Some(m)))
                .collect::<Result<_, _>>()?
        };
        Ok(ForgeBindings {
            captioners,
            fusion: pool.binding(Role::Fusion, None)?,
            perturb: pool.binding(Role::Perturb, None)?,
            detector: pool.binding(Role::Detector, None)?,
        })
    }

    /// Builtin templates with any `<name>.txt` overrides from the
    /// templates directory.
    pub fn templates(&self) -> Result<TemplateSet, ConfigError> {
        let mut set = TemplateSet::builtin();
        let Some(dir) = &self.templates_dir else {
            return Ok(set);
        };
        if !dir.is_dir() {
            return Err(ConfigError::new(
                "templates-dir",
                format!("{} is not a directory", dir.display()),
            ));
        }
        for name in TemplateName::ALL {
            let path = dir.join(format!("{}.txt", name.file_stem()));
            if !path.exists() {
                continue;
            }
            let body = std::fs::read_to_string(&path)
                .map_err(|e| ConfigError::new("templates-dir", format!("{}: {e}", path.display())))?;
            set = set
                .with_override(name, &body)
                .map_err(|e| ConfigError::new("templates-dir", format!("{}: {e}", path.display())))?;
            log::info!("using template override {}", path.display());
        }
        Ok(set)
    }
}
