//! Shared domain vocabulary: simulated time, priorities, requests, and the
//! envelopes that move between agent instances.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in milliseconds. Fractional values are allowed; negative
/// values are not representable through the public constructors.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    /// Builds a time from milliseconds, clamping tiny negative rounding
    /// artifacts to zero. Panics on genuinely negative input.
    pub fn from_ms(ms: f64) -> SimTime {
        assert!(ms >= -1e-9, "SimTime must be non-negative, got {ms}");
        SimTime(ms.max(0.0))
    }

    pub fn from_secs(s: f64) -> SimTime {
        SimTime::from_ms(s * 1000.0)
    }

    pub fn as_ms(self) -> f64 {
        self.0
    }

    pub fn as_secs(self) -> f64 {
        self.0 / 1000.0
    }

    pub fn add_ms(self, ms: f64) -> SimTime {
        SimTime::from_ms(self.0 + ms)
    }

    pub fn max(self, other: SimTime) -> SimTime {
        if other.0 > self.0 {
            other
        } else {
            self
        }
    }
}

impl Eq for SimTime {}

#[allow(clippy::derive_ord_xor_partial_ord)]
impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Times are finite and non-negative by construction.
        self.0.partial_cmp(&other.0).expect("SimTime is never NaN")
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

/// Two service classes with an 8-level refinement. Interactive traffic
/// conventionally occupies levels 4..=7.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorityClass {
    Background,
    Interactive,
}

/// Ordering is lexicographic on (class, level): any interactive request
/// outranks any background request, and level refines within a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Priority {
    pub class: PriorityClass,
    pub level: u8,
}

pub const MAX_PRIORITY_LEVEL: u8 = 7;

impl Priority {
    pub fn new(class: PriorityClass, level: u8) -> Priority {
        assert!(level <= MAX_PRIORITY_LEVEL, "priority level out of range");
        Priority { class, level }
    }

    /// Default interactive priority (level 5).
    pub fn interactive() -> Priority {
        Priority::new(PriorityClass::Interactive, 5)
    }

    /// Default background priority (level 2).
    pub fn background() -> Priority {
        Priority::new(PriorityClass::Background, 2)
    }

    pub fn is_interactive(&self) -> bool {
        self.class == PriorityClass::Interactive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u64);

/// A serving node: `index` orders replicas within a role. Display form is
/// `role/index`, e.g. `tester/1`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId {
    pub role: String,
    pub index: u32,
}

impl AgentId {
    pub fn new(role: &str, index: u32) -> AgentId {
        AgentId { role: role.to_string(), index }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.role, self.index)
    }
}

/// A unit of user work flowing through an agent pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub arrival: SimTime,
    pub priority: Priority,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub slo_deadline: Option<SimTime>,
    pub session: SessionId,
    /// Ordered role names the request traverses.
    pub hops: Vec<String>,
}

/// Validates every `Request` invariant, reporting the first violated field.
pub fn validate_request(r: &Request) -> Result<(), ModelError> {
    if r.prompt_tokens < 1 {
        return Err(ModelError::InvalidField {
            field: "prompt_tokens",
            reason: "must be at least 1".into(),
        });
    }
    if r.output_tokens < 1 {
        return Err(ModelError::InvalidField {
            field: "output_tokens",
            reason: "must be at least 1".into(),
        });
    }
    if r.priority.level > MAX_PRIORITY_LEVEL {
        return Err(ModelError::InvalidField {
            field: "priority",
            reason: format!("level {} exceeds {}", r.priority.level, MAX_PRIORITY_LEVEL),
        });
    }
    if let Some(deadline) = r.slo_deadline {
        if deadline <= r.arrival {
            return Err(ModelError::InvalidField {
                field: "slo_deadline",
                reason: "deadline must be strictly after arrival".into(),
            });
        }
    }
    Ok(())
}

/// Transmission granularity of a link. Runtime-reconfigurable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Granularity {
    TokenStream { chunk_tokens: u32 },
    PerFunction,
    BatchAll,
}

impl Granularity {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Granularity::TokenStream { chunk_tokens } if *chunk_tokens < 1 => {
                Err(ModelError::InvalidGranularity)
            }
            _ => Ok(()),
        }
    }

    /// Parses the textual knob form: `batch_all`, `per_function`,
    /// `token_stream` or `token_stream(N)`.
    pub fn parse(text: &str) -> Result<Granularity, ModelError> {
        let text = text.trim();
        match text {
            "batch_all" => return Ok(Granularity::BatchAll),
            "per_function" => return Ok(Granularity::PerFunction),
            "token_stream" => return Ok(Granularity::TokenStream { chunk_tokens: 16 }),
            _ => {}
        }
        if let Some(rest) = text.strip_prefix("token_stream(") {
            if let Some(num) = rest.strip_suffix(')') {
                let chunk: u32 = num
                    .trim()
                    .parse()
                    .map_err(|_| ModelError::InvalidGranularity)?;
                let g = Granularity::TokenStream { chunk_tokens: chunk };
                g.validate()?;
                return Ok(g);
            }
        }
        Err(ModelError::InvalidGranularity)
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::TokenStream { chunk_tokens } => write!(f, "token_stream({chunk_tokens})"),
            Granularity::PerFunction => write!(f, "per_function"),
            Granularity::BatchAll => write!(f, "batch_all"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnvelopeId(pub u64);

/// What the payload boundary of an envelope means to the receiver: a partial
/// chunk of an ongoing generation, or a sender-declared function boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Chunk,
    FunctionBoundary,
}

/// A data-plane transmission unit. `seq` is contiguous from 0 per
/// (request, link); exactly one envelope per request carries `is_final`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageEnvelope {
    pub id: EnvelopeId,
    pub request_id: RequestId,
    pub session: SessionId,
    pub source: AgentId,
    pub destination: AgentId,
    pub payload_tokens: u32,
    pub seq: u32,
    pub is_final: bool,
    pub segment: SegmentKind,
    pub priority: Priority,
    pub created: SimTime,
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid field {field}: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("invalid granularity: chunk_tokens must be at least 1")]
    InvalidGranularity,
}
