//! TOML configuration: endpoints per role, store location, and defaults for
//! refinement, DPO export and evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use recap_core::dpo::DpoHyperparams;
use recap_core::eval::capture::{CaptureWeights, DEFAULT_SOFT_THRESHOLD};
use recap_core::{RefineConfig, Role};
use serde::{Deserialize, Serialize};

pub const DEFAULT_CONFIG_PATH: &str = "recapd.toml";
pub const DEFAULT_STORE_DIR: &str = "recap-store";
pub const DEFAULT_SCALE_MAX: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    HttpChat,
    HttpT2i,
    Mock,
    Scripted,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::HttpChat => "http_chat",
            Backend::HttpT2i => "http_t2i",
            Backend::Mock => "mock",
            Backend::Scripted => "scripted",
        }
    }

    /// Mock and scripted backends never touch the network.
    pub fn is_offline(self) -> bool {
        matches!(self, Backend::Mock | Backend::Scripted)
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One remote model endpoint as written in the config file (`[endpoints.<role>]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointSettings {
    pub backend: Backend,
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: Option<String>,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub rate_limit_rpm: u32,
    pub max_in_flight: u32,
    /// Scripted backend: JSON fixture file.
    pub fixtures: Option<PathBuf>,
    /// Mock backend: artificial latency per call.
    pub latency_ms: u64,
}

impl Default for EndpointSettings {
    fn default() -> Self {
        Self {
            backend: Backend::Mock,
            base_url: String::new(),
            model_name: String::new(),
            auth_env: None,
            timeout_s: 120.0,
            max_retries: 3,
            backoff_base_ms: 500,
            rate_limit_rpm: 600,
            max_in_flight: 4,
            fixtures: None,
            latency_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub role: Role,
    pub settings: EndpointSettings,
}

impl std::ops::Deref for EndpointConfig {
    type Target = EndpointSettings;

    fn deref(&self) -> &EndpointSettings {
        &self.settings
    }
}

impl EndpointConfig {
    pub fn new(role: Role, settings: EndpointSettings) -> Self {
        Self { role, settings }
    }

    pub fn mock(role: Role) -> Self {
        Self::new(
            role,
            EndpointSettings {
                model_name: format!("mock-{role}"),
                rate_limit_rpm: 60_000,
                max_in_flight: 16,
                ..Default::default()
            },
        )
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.settings;
        let bad = |reason: &str| ConfigError::InvalidEndpoint {
            role: self.role,
            reason: reason.to_string(),
        };
        if !(s.timeout_s > 0.0 && s.timeout_s.is_finite()) {
            return Err(bad("timeout_s must be positive"));
        }
        if s.rate_limit_rpm == 0 {
            return Err(bad("rate_limit_rpm must be positive"));
        }
        if s.max_in_flight == 0 {
            return Err(bad("max_in_flight must be at least 1"));
        }
        match s.backend {
            Backend::HttpChat if self.role == Role::T2i => {
                return Err(bad("the t2i role needs the http_t2i backend"))
            }
            Backend::HttpT2i if self.role != Role::T2i => {
                return Err(bad("http_t2i only serves the t2i role"))
            }
            Backend::HttpChat | Backend::HttpT2i if s.base_url.is_empty() => {
                return Err(bad("base_url is required for http backends"))
            }
            Backend::Scripted if s.fixtures.is_none() => {
                return Err(bad("the scripted backend needs a fixtures file"))
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalDefaults {
    pub soft_threshold: f64,
    pub weights: CaptureWeights,
    pub scale_max: u32,
}

impl Default for EvalDefaults {
    fn default() -> Self {
        Self {
            soft_threshold: DEFAULT_SOFT_THRESHOLD,
            weights: CaptureWeights::default(),
            scale_max: DEFAULT_SCALE_MAX,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    store: Option<PathBuf>,
    cache: Option<bool>,
    templates_dir: Option<PathBuf>,
    refine: RefineConfig,
    dpo: DpoHyperparams,
    eval: EvalDefaults,
    endpoints: BTreeMap<String, EndpointSettings>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub store: PathBuf,
    pub cache: bool,
    pub templates_dir: Option<PathBuf>,
    pub refine: RefineConfig,
    pub dpo: DpoHyperparams,
    pub eval: EvalDefaults,
    pub endpoints: BTreeMap<Role, EndpointConfig>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            store: PathBuf::from(DEFAULT_STORE_DIR),
            cache: true,
            templates_dir: None,
            refine: RefineConfig::default(),
            dpo: DpoHyperparams::default(),
            eval: EvalDefaults::default(),
            endpoints: BTreeMap::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unknown role {0:?} in [endpoints]")]
    UnknownRole(String),
    #[error("endpoint {role}: {reason}")]
    InvalidEndpoint { role: Role, reason: String },
    #[error("no endpoint configured for role {0}")]
    MissingRole(Role),
    #[error("environment variable {var} (auth for {role}) is not set")]
    MissingSecret { role: Role, var: String },
    #[error("invalid refine settings: {0}")]
    InvalidRefine(String),
}

impl CliConfig {
    /// Parses TOML text; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path, origin: &Path) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base_dir.join(p) };

        let mut endpoints = BTreeMap::new();
        for (name, mut settings) in raw.endpoints {
            let role = Role::from_str(&name).map_err(|_| ConfigError::UnknownRole(name.clone()))?;
            settings.fixtures = settings.fixtures.map(resolve);
            if settings.model_name.is_empty() {
                settings.model_name = format!("{}-{role}", settings.backend);
            }
            let ep = EndpointConfig::new(role, settings);
            ep.validate()?;
            endpoints.insert(role, ep);
        }
        let config = Self {
            store: raw.store.map(resolve).unwrap_or_else(|| PathBuf::from(DEFAULT_STORE_DIR)),
            cache: raw.cache.unwrap_or(true),
            templates_dir: raw.templates_dir.map(resolve),
            refine: raw.refine,
            dpo: raw.dpo,
            eval: raw.eval,
            endpoints,
        };
        config.validate_refine()?;
        Ok(config)
    }

    /// Loads `path`. A missing file is an error only when `explicit`.
    pub fn load(path: &Path, explicit: bool) -> Result<Self, ConfigError> {
        match fs::read_to_string(path) {
            Ok(text) => {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                Self::from_toml(&text, base, path)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && !explicit => Ok(Self::default()),
            Err(source) => Err(ConfigError::Read {
                path: path.to_path_buf(),
                source,
            }),
        }
    }

    pub fn validate_refine(&self) -> Result<(), ConfigError> {
        self.refine
            .variant
            .validate()
            .map_err(|e| ConfigError::InvalidRefine(e.to_string()))?;
        if !(1..=3).contains(&self.refine.initial_prompt_id) {
            return Err(ConfigError::InvalidRefine(format!(
                "initial_prompt_id must be 1, 2 or 3, not {}",
                self.refine.initial_prompt_id
            )));
        }
        Ok(())
    }

    pub fn endpoint(&self, role: Role) -> Result<&EndpointConfig, ConfigError> {
        self.endpoints.get(&role).ok_or(ConfigError::MissingRole(role))
    }

    /// All four roles served by in-process mocks.
    pub fn all_mock() -> Self {
        Self {
            endpoints: Role::ALL.iter().map(|&r| (r, EndpointConfig::mock(r))).collect(),
            ..Default::default()
        }
    }
}
