//! Edit job records as stored and served.

use inpaintkit_models::sampler::GuidanceSchedule;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            JobStatus::Queued => "queued",
            JobStatus::Running => "running",
            JobStatus::Done => "done",
            JobStatus::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Queued, Self::Running, Self::Done, Self::Failed]
            .into_iter()
            .find(|v| v.as_str() == s)
    }

    /// Position in the state machine; transitions must strictly increase it.
    pub fn rank(&self) -> u8 {
        match self {
            JobStatus::Queued => 0,
            JobStatus::Running => 1,
            JobStatus::Done | JobStatus::Failed => 2,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.rank() == 2
    }

    pub fn can_move_to(&self, next: JobStatus) -> bool {
        next.rank() > self.rank()
    }
}

fn default_n() -> usize {
    4
}
fn default_steps() -> usize {
    20
}
fn default_sr_steps() -> Option<usize> {
    Some(8)
}
fn default_guidance() -> String {
    GuidanceSchedule::default().to_string()
}

/// Sampling parameters sent as the `params` JSON part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditParams {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_sr_steps")]
    pub sr_steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// `constant:W` or `oscillate:LO,HI`.
    #[serde(default = "default_guidance")]
    pub guidance: String,
    /// Cascade id from the model index; the default cascade when absent.
    #[serde(default)]
    pub model: Option<String>,
    /// Sample without a prompt, using the null text sequence.
    #[serde(default)]
    pub unconditional: bool,
}

impl Default for EditParams {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

pub const MAX_SAMPLES: usize = 16;
pub const MAX_STEPS: usize = 1000;

impl EditParams {
    pub fn schedule(&self) -> Result<GuidanceSchedule> {
        self.guidance
            .parse()
            .map_err(|e| ServiceError::bad_request("invalid_params", format!("{e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ServiceError::bad_request("invalid_params", m));
        if self.n == 0 || self.n > MAX_SAMPLES {
            return bad(format!("n must be in 1..={MAX_SAMPLES}"));
        }
        for s in std::iter::once(self.steps).chain(self.sr_steps) {
            if !(2..=MAX_STEPS).contains(&s) {
                return bad(format!("steps must be in 2..={MAX_STEPS}"));
            }
        }
        self.schedule().map(|_| ())
    }
}

/// The stored request; rasters are referenced by blob hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub image: String,
    pub mask: String,
    pub prompt: String,
    pub params: EditParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub guidance: GuidanceSchedule,
    pub guidance_spec: String,
    pub model: String,
    pub checkpoint_hash: String,
    pub steps: usize,
    pub sr_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub queued_at_ms: u64,
    pub started_at_ms: Option<u64>,
    pub finished_at_ms: Option<u64>,
}

/// A job as returned by `GET /v1/edit/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditJob {
    pub job_id: String,
    pub status: JobStatus,
    pub request: EditRequest,
    /// Output blob URIs, one per sample once done.
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub timings: Timings,
}

pub fn blob_uri(hash: &str) -> String {
    format!("/v1/blobs/{hash}")
}

pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
