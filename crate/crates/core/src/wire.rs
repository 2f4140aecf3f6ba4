//! Canonical JSON envelopes shared by every service.
//!
//! Every HTTP body is one envelope:
//!
//! ```json
//! {"v":"ual/0.1","kind":"resolver_query","body":{…},"ts":"2025-11-14T12:00:00.000Z"}
//! ```
//!
//! Encoding is canonical — object keys sorted, no insignificant whitespace —
//! so a decoded message re-encodes byte-identically and context fingerprints
//! can hash serialized bytes. Unknown `kind` values and version mismatches
//! are rejected with distinct errors; unknown body fields are rejected
//! except where a type has an `extra` map (contexts), where they land.
//!
//! # Message kinds and body fields
//!
//! | kind | body fields |
//! |------|-------------|
//! | `resolver_query` | `query_id`, `name`, `context`, `accept_negotiation` |
//! | `resolver_answer` | `kind`, `body` (referral / tailored / negotiation_invitation) |
//! | `facts_card` | `agent_name`, `label`, `capabilities`, `context_requirements`, `ttl_seconds`, `published_at` |
//! | `facts_list` | `cards` |
//! | `zone_delegation` | `zone`, `child_server_url`, `kind`, `ttl_seconds` |
//! | `deployment_record` | `agent_name`, `endpoints`, `context_fields_needed`, `policy`, `negotiation_required` (+ optional `weights`, `target_context`, `role_endpoints`) |
//! | `status_update` | `agent_name`, `endpoint_url`, `load`, `healthy` |
//! | `negotiate_offer` | `supplied`, `demands`, `accept` (+ optional `requester_name`, `refused_fields`) |
//! | `negotiate_reply` | `status` + counter/agreed fields |
//! | `comms_spec` | `session_id`, `participants`, `variables`, `constraints`, `objective` |
//! | `placement_spec` | `session_id`, `assignment`, `expected_cost`, `expected_latency_ms`, `endpoints` |
//! | `deploy_reply` | `endpoints`, `placement`, `ttl_seconds`, `fingerprint`, `policy_used` |
//! | `ack` | `ok` (+ optional `detail`) |
//! | `error` | `code`, `message` |

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::adaptive::{CommsSpec, DeployReply, NegotiateOffer, NegotiateReply, PlacementSpec};
use crate::canon;
use crate::clock::to_rfc3339;
use crate::facts::AgentFactsCard;
use crate::name::ZonePath;
use crate::nameserver::{AgentDeploymentRecord, DelegationKind, ResolverAnswer};
use crate::resolver::ResolverQuery;
use crate::transport::ServiceError;

/// Protocol version carried in every envelope.
pub const PROTOCOL_VERSION: &str = "ual/0.1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("decode error: {0}")]
    Decode(String),
    #[error("version mismatch: expected {expected:?}, got {got:?}")]
    VersionMismatch { expected: String, got: String },
    #[error("unknown message kind {0:?}")]
    UnknownKind(String),
}

/// Body of a `POST /zones` registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneDelegation {
    pub zone: ZonePath,
    pub child_server_url: String,
    pub kind: DelegationKind,
    pub ttl_seconds: u64,
}

/// Body of a `PATCH /agents/{name}/status`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusUpdate {
    pub agent_name: String,
    pub endpoint_url: String,
    pub load: f64,
    pub healthy: bool,
}

/// Result set for a tag lookup against the facts registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactsList {
    pub cards: Vec<AgentFactsCard>,
}

/// Generic success acknowledgment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ack {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Ack {
    pub fn ok() -> Self {
        Self { ok: true, detail: None }
    }
}

/// Every message that can travel in an envelope.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    ResolverQuery(ResolverQuery),
    ResolverAnswer(ResolverAnswer),
    FactsCard(AgentFactsCard),
    FactsList(FactsList),
    ZoneDelegation(ZoneDelegation),
    DeploymentRecord(AgentDeploymentRecord),
    StatusUpdate(StatusUpdate),
    NegotiateOffer(NegotiateOffer),
    NegotiateReply(NegotiateReply),
    CommsSpec(CommsSpec),
    PlacementSpec(PlacementSpec),
    DeployReply(DeployReply),
    Ack(Ack),
    Error(ServiceError),
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::ResolverQuery(_) => "resolver_query",
            Message::ResolverAnswer(_) => "resolver_answer",
            Message::FactsCard(_) => "facts_card",
            Message::FactsList(_) => "facts_list",
            Message::ZoneDelegation(_) => "zone_delegation",
            Message::DeploymentRecord(_) => "deployment_record",
            Message::StatusUpdate(_) => "status_update",
            Message::NegotiateOffer(_) => "negotiate_offer",
            Message::NegotiateReply(_) => "negotiate_reply",
            Message::CommsSpec(_) => "comms_spec",
            Message::PlacementSpec(_) => "placement_spec",
            Message::DeployReply(_) => "deploy_reply",
            Message::Ack(_) => "ack",
            Message::Error(_) => "error",
        }
    }

    fn body_value(&self) -> Result<Value, WireError> {
        let result = match self {
            Message::ResolverQuery(m) => serde_json::to_value(m),
            Message::ResolverAnswer(m) => serde_json::to_value(m),
            Message::FactsCard(m) => serde_json::to_value(m),
            Message::FactsList(m) => serde_json::to_value(m),
            Message::ZoneDelegation(m) => serde_json::to_value(m),
            Message::DeploymentRecord(m) => serde_json::to_value(m),
            Message::StatusUpdate(m) => serde_json::to_value(m),
            Message::NegotiateOffer(m) => serde_json::to_value(m),
            Message::NegotiateReply(m) => serde_json::to_value(m),
            Message::CommsSpec(m) => serde_json::to_value(m),
            Message::PlacementSpec(m) => serde_json::to_value(m),
            Message::DeployReply(m) => serde_json::to_value(m),
            Message::Ack(m) => serde_json::to_value(m),
            Message::Error(m) => serde_json::to_value(m),
        };
        result.map_err(|e| WireError::Decode(e.to_string()))
    }

    fn from_parts(kind: &str, body: Value) -> Result<Self, WireError> {
        fn parse<T: serde::de::DeserializeOwned>(body: Value) -> Result<T, WireError> {
            serde_json::from_value(body).map_err(|e| WireError::Decode(e.to_string()))
        }
        Ok(match kind {
            "resolver_query" => Message::ResolverQuery(parse(body)?),
            "resolver_answer" => Message::ResolverAnswer(parse(body)?),
            "facts_card" => Message::FactsCard(parse(body)?),
            "facts_list" => Message::FactsList(parse(body)?),
            "zone_delegation" => Message::ZoneDelegation(parse(body)?),
            "deployment_record" => Message::DeploymentRecord(parse(body)?),
            "status_update" => Message::StatusUpdate(parse(body)?),
            "negotiate_offer" => Message::NegotiateOffer(parse(body)?),
            "negotiate_reply" => Message::NegotiateReply(parse(body)?),
            "comms_spec" => Message::CommsSpec(parse(body)?),
            "placement_spec" => Message::PlacementSpec(parse(body)?),
            "deploy_reply" => Message::DeployReply(parse(body)?),
            "ack" => Message::Ack(parse(body)?),
            "error" => Message::Error(parse(body)?),
            other => return Err(WireError::UnknownKind(other.to_string())),
        })
    }
}

/// Envelope metadata that travels alongside a message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvelopeMeta {
    pub version: String,
    pub ts: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvelope {
    v: String,
    kind: String,
    body: Value,
    ts: String,
}

/// Encodes a message with an explicit RFC 3339 timestamp string.
pub fn encode_with_ts(message: &Message, ts: &str) -> Result<String, WireError> {
    let raw = RawEnvelope {
        v: PROTOCOL_VERSION.to_string(),
        kind: message.kind().to_string(),
        body: message.body_value()?,
        ts: ts.to_string(),
    };
    let value = serde_json::to_value(&raw).map_err(|e| WireError::Decode(e.to_string()))?;
    Ok(canon::to_canonical_string(&value))
}

/// Encodes a message, stamping the timestamp from epoch milliseconds.
pub fn encode(message: &Message, now_ms: u64) -> Result<String, WireError> {
    encode_with_ts(message, &to_rfc3339(now_ms))
}

/// Decodes an envelope, enforcing version, kind, and body shape.
pub fn decode(bytes: &[u8]) -> Result<(Message, EnvelopeMeta), WireError> {
    let raw: RawEnvelope =
        serde_json::from_slice(bytes).map_err(|e| WireError::Decode(e.to_string()))?;
    if raw.v != PROTOCOL_VERSION {
        return Err(WireError::VersionMismatch {
            expected: PROTOCOL_VERSION.to_string(),
            got: raw.v,
        });
    }
    if chrono::DateTime::parse_from_rfc3339(&raw.ts).is_err() {
        return Err(WireError::Decode(format!("ts {:?} is not RFC 3339", raw.ts)));
    }
    let message = Message::from_parts(&raw.kind, raw.body)?;
    Ok((message, EnvelopeMeta { version: raw.v, ts: raw.ts }))
}

/// Top-level body keys each kind serializes in full; optional fields that
/// were absent stay absent. Conformance tests cross-check golden files
/// against these tables.
pub fn documented_body_keys(kind: &str) -> Option<&'static [&'static str]> {
    Some(match kind {
        "resolver_query" => &["accept_negotiation", "context", "name", "query_id"],
        "resolver_answer" => &["body", "kind"],
        "facts_card" => &[
            "agent_name",
            "capabilities",
            "context_requirements",
            "label",
            "published_at",
            "ttl_seconds",
        ],
        "facts_list" => &["cards"],
        "zone_delegation" => &["child_server_url", "kind", "ttl_seconds", "zone"],
        "deployment_record" => &[
            "agent_name",
            "context_fields_needed",
            "endpoints",
            "negotiation_required",
            "policy",
        ],
        "status_update" => &["agent_name", "endpoint_url", "healthy", "load"],
        "negotiate_offer" => &["accept", "demands", "supplied"],
        "negotiate_reply" => &["status"],
        "comms_spec" => &["constraints", "objective", "participants", "session_id", "variables"],
        "placement_spec" => &[
            "assignment",
            "endpoints",
            "expected_cost",
            "expected_latency_ms",
            "session_id",
        ],
        "deploy_reply" => &["endpoints", "fingerprint", "placement", "policy_used", "ttl_seconds"],
        "ack" => &["ok"],
        "error" => &["code", "message"],
        _ => return None,
    })
}

#[cfg(test)]
mod tests;
