//! Refinement configuration and the per-image iteration record.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::hashing::sha256_hex;
use crate::image_ref::ImageRef;
use crate::prompt::PromptVariant;

/// The four remote model roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Captioner,
    T2i,
    Reviser,
    Judge,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Captioner, Role::T2i, Role::Reviser, Role::Judge];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Captioner => "captioner",
            Role::T2i => "t2i",
            Role::Reviser => "reviser",
            Role::Judge => "judge",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub n_iterations: u32,
    pub early_stop_on_fixed_point: bool,
    pub variant: PromptVariant,
    pub initial_prompt_id: u8,
    pub retry_on_parse_failure: u32,
    pub seed: Option<u64>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            n_iterations: 2,
            early_stop_on_fixed_point: false,
            variant: PromptVariant::default(),
            initial_prompt_id: 1,
            retry_on_parse_failure: 1,
            seed: None,
        }
    }
}

/// Identity of the endpoint that served a role, recorded for provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointIdentity {
    pub role: Role,
    pub backend: String,
    pub model_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CallOutput {
    Text { text: String },
    Image { image: ImageRef },
}

/// One remote call as recorded in a trace. Latency and cache provenance live
/// in the timing sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: Role,
    pub request_hash: String,
    pub output: CallOutput,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub reconstruction: CallRecord,
    /// Every reviser call for this step, in order; more than one when the
    /// first response could not be parsed.
    pub revisions: Vec<CallRecord>,
    /// The reviser never produced a parseable caption and the previous
    /// caption was carried over.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum InitialCaption {
    /// Caption came with the input (manifest or command line).
    Supplied { prompt_id: u8, prompt: String },
    /// Caption produced by the captioner from `prompt`.
    Generated {
        prompt_id: u8,
        prompt: String,
        call: CallRecord,
    },
}

impl InitialCaption {
    /// Initial-captioning prompt associated with the trace.
    pub fn prompt(&self) -> &str {
        match self {
            InitialCaption::Supplied { prompt, .. } | InitialCaption::Generated { prompt, .. } => {
                prompt
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum TraceStatus {
    Complete,
    Failed { error: String },
    Interrupted,
    InProgress,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CallTiming {
    pub request_hash: String,
    pub latency_ms: u64,
    pub from_cache: bool,
}

/// Wall-clock data. Excluded from trace equality and checksums.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceTiming {
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
    pub step_latencies_ms: Vec<u64>,
    pub calls: Vec<CallTiming>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub id: String,
    /// The original image.
    pub image: ImageRef,
    pub initial: InitialCaption,
    /// `captions[0]` is the initial caption, `captions[i]` the output of step i.
    pub captions: Vec<String>,
    /// `reconstructions[i]` was rendered from `captions[i]`.
    pub reconstructions: Vec<ImageRef>,
    pub analyses: Vec<Option<String>>,
    pub steps: Vec<StepRecord>,
    pub endpoints: Vec<EndpointIdentity>,
    pub config: RefineConfig,
    pub status: TraceStatus,
    pub early_stopped: bool,
    #[serde(default)]
    pub timing: TraceTiming,
}

impl PartialEq for RefinementTrace {
    fn eq(&self, other: &Self) -> bool {
        self.canonical_bytes() == other.canonical_bytes()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceShapeError {
    #[error("expected {expected} captions for {completed} completed steps, found {found}")]
    Captions {
        completed: usize,
        expected: usize,
        found: usize,
    },
    #[error("analyses ({analyses}) and step records ({steps}) must match reconstructions ({reconstructions})")]
    Steps {
        reconstructions: usize,
        analyses: usize,
        steps: usize,
    },
}

impl RefinementTrace {
    pub fn n_completed(&self) -> usize {
        self.reconstructions.len()
    }

    pub fn initial_caption(&self) -> &str {
        &self.captions[0]
    }

    pub fn final_caption(&self) -> &str {
        self.captions.last().map(String::as_str).unwrap_or_default()
    }

    pub fn is_complete(&self) -> bool {
        self.status == TraceStatus::Complete
    }

    pub fn any_degenerate(&self) -> bool {
        self.steps.iter().any(|s| s.degenerate)
    }

    pub fn all_degenerate(&self) -> bool {
        !self.steps.is_empty() && self.steps.iter().all(|s| s.degenerate)
    }

    /// JSON encoding without the timing sidecar. Deterministic for equal
    /// traces.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut value = serde_json::to_value(self).expect("trace serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("timing");
        }
        serde_json::to_vec(&value).expect("trace serializes")
    }

    pub fn checksum(&self) -> String {
        sha256_hex(&self.canonical_bytes())
    }

    pub fn check_shape(&self) -> Result<(), TraceShapeError> {
        let completed = self.reconstructions.len();
        if self.captions.len() != completed + 1 {
            return Err(TraceShapeError::Captions {
                completed,
                expected: completed + 1,
                found: self.captions.len(),
            });
        }
        if self.analyses.len() != completed || self.steps.len() != completed {
            return Err(TraceShapeError::Steps {
                reconstructions: completed,
                analyses: self.analyses.len(),
                steps: self.steps.len(),
            });
        }
        Ok(())
    }
}
