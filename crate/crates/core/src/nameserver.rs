//! The name-server daemon state machine.
//!
//! One server type plays every role; what it answers depends on its data.
//! A server owns a zone prefix. Queries for names under a *delegated*
//! child zone get a [`Referral`]; queries for an agent the server holds a
//! deployment record for get either a [`TailoredResponse`] (requirements
//! satisfied, negotiation not required) or a negotiation invitation.
//! Everything else is `NameNotFound`.
//!
//! Zone state (delegations, records, endpoint status) persists to a JSON
//! zone file rewritten atomically on every mutation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive::{NegotiationInvitation, OpenSession, Resource, SessionManager};
use crate::clock::SharedClock;
use crate::context::{check_satisfaction, fingerprint, Context, ContextFingerprint, ContextRequirements};
use crate::ids::IdSource;
use crate::name::{AgentName, ZonePath};
use crate::resolver::ResolverQuery;
use crate::tailor::{self, Policy, PolicyInput, Weights};

pub const DEFAULT_REFERRAL_TTL_S: u64 = 300;
pub const DEFAULT_TAILORED_TTL_S: u64 = 30;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServerError {
    #[error("zone {0} already has a live delegation")]
    ZoneConflict(String),
    #[error("not responsible for this zone: {0}")]
    NotMyZone(String),
    #[error("malformed deployment record: {0}")]
    MalformedRecord(String),
    #[error("malformed query: {0}")]
    MalformedQuery(String),
    #[error("name not found")]
    NameNotFound,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("registration secret missing or wrong")]
    Unauthorized,
    #[error("zone file i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelegationKind {
    Delegation,
    AuthoritativeDelegation,
}

/// A live delegation of a child zone to another server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneRecord {
    pub zone: ZonePath,
    pub kind: DelegationKind,
    pub server_url: String,
    pub ttl_seconds: u64,
}

/// One candidate communication endpoint in a deployment record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointCandidate {
    pub url: String,
    pub geo: crate::context::GeoPoint,
    pub capacity_ops_per_s: f64,
    pub current_load: f64,
    pub cost_units_per_op: f64,
    pub healthy: bool,
}

/// The authoritative side's private record for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentDeploymentRecord {
    pub agent_name: AgentName,
    pub endpoints: Vec<EndpointCandidate>,
    #[serde(default)]
    pub context_fields_needed: Vec<String>,
    pub policy: Policy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Weights>,
    #[serde(default)]
    pub negotiation_required: bool,
    /// The target's own context, used when assembling a comms spec during
    /// negotiation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_context: Option<Context>,
    /// Per-role endpoint URLs keyed by the requester's `extra.role` field;
    /// lets one record serve distinct URLs to the roles of a group channel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role_endpoints: Option<BTreeMap<String, String>>,
}

impl AgentDeploymentRecord {
    pub fn validate(&self) -> Result<(), ServerError> {
        if self.endpoints.is_empty() {
            return Err(ServerError::MalformedRecord("no endpoints".into()));
        }
        for e in &self.endpoints {
            if e.url.is_empty() {
                return Err(ServerError::MalformedRecord("endpoint with empty url".into()));
            }
            if !e.capacity_ops_per_s.is_finite() || e.capacity_ops_per_s <= 0.0 {
                return Err(ServerError::MalformedRecord(format!(
                    "endpoint {} capacity must be positive",
                    e.url
                )));
            }
            if !e.current_load.is_finite() || e.current_load < 0.0 {
                return Err(ServerError::MalformedRecord(format!(
                    "endpoint {} load must be non-negative",
                    e.url
                )));
            }
            if !e.cost_units_per_op.is_finite() || e.cost_units_per_op < 0.0 {
                return Err(ServerError::MalformedRecord(format!(
                    "endpoint {} cost must be non-negative",
                    e.url
                )));
            }
        }
        if let Some(w) = &self.weights {
            w.validate().map_err(ServerError::MalformedRecord)?;
        }
        let needed = self.policy.context_fields(&self.weights.unwrap_or_default());
        for field in &needed {
            if !self.context_fields_needed.contains(field) {
                return Err(ServerError::MalformedRecord(format!(
                    "policy {} needs context field {field:?}, add it to context_fields_needed",
                    self.policy.as_str()
                )));
            }
        }
        if let Some(ctx) = &self.target_context {
            ctx.validate().map_err(|e| ServerError::MalformedRecord(e.to_string()))?;
        }
        let requirements = self.requirements();
        requirements.validate().map_err(|e| ServerError::MalformedRecord(e.to_string()))?;
        Ok(())
    }

    /// The demands this record places on a requester's context.
    pub fn requirements(&self) -> ContextRequirements {
        ContextRequirements {
            required_fields: self.context_fields_needed.iter().cloned().collect(),
            restrictions: Vec::new(),
        }
    }

    /// Every context field a tailored answer for this record depends on:
    /// the required fields, whatever the policy reads, and the role key
    /// when role endpoints are in play. Sorted and de-duplicated; these are
    /// the fingerprint's covered fields.
    pub fn covered_fields(&self) -> Vec<String> {
        let mut fields: Vec<String> = self.context_fields_needed.clone();
        fields.extend(self.policy.context_fields(&self.weights.unwrap_or_default()));
        if self.role_endpoints.is_some() {
            fields.push("extra.role".into());
        }
        fields.sort();
        fields.dedup();
        fields
    }
}

/// Latest reported status for one endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointStatus {
    pub load: f64,
    pub healthy: bool,
    pub updated_at_ms: u64,
}

/// The context-dependent answer of an authoritative server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailoredResponse {
    pub endpoint_url: String,
    pub ttl_seconds: u64,
    pub fingerprint: ContextFingerprint,
    pub policy_used: Policy,
}

/// Points the resolver at the server responsible for a deeper zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Referral {
    pub zone: ZonePath,
    pub next_server_url: String,
    pub ttl_seconds: u64,
}

/// The three possible resolution answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "snake_case")]
pub enum ResolverAnswer {
    Referral(Referral),
    Tailored(TailoredResponse),
    NegotiationInvitation(NegotiationInvitation),
}

impl ResolverAnswer {
    pub fn kind(&self) -> &'static str {
        match self {
            ResolverAnswer::Referral(_) => "referral",
            ResolverAnswer::Tailored(_) => "tailored",
            ResolverAnswer::NegotiationInvitation(_) => "negotiation_invitation",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NameServerConfig {
    pub nid: String,
    /// Labels of the zone this server owns; empty for the namespace root.
    #[serde(default)]
    pub zone: Vec<String>,
    /// This server's public URL, used as referral target and session base.
    pub url: String,
    #[serde(default = "default_referral_ttl")]
    pub referral_ttl_s: u64,
    #[serde(default = "default_tailored_ttl")]
    pub tailored_ttl_s: u64,
    /// Shared secret required on zone and record registrations when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registration_secret: Option<String>,
    #[serde(default = "default_session_timeout")]
    pub session_timeout_s: u64,
    /// Physical resources this server can broker during adaptive setup.
    #[serde(default)]
    pub resources: Vec<Resource>,
}

fn default_referral_ttl() -> u64 {
    DEFAULT_REFERRAL_TTL_S
}

fn default_tailored_ttl() -> u64 {
    DEFAULT_TAILORED_TTL_S
}

fn default_session_timeout() -> u64 {
    crate::adaptive::DEFAULT_INACTIVITY_TIMEOUT_S
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AgentEntry {
    record: AgentDeploymentRecord,
    #[serde(default)]
    status: BTreeMap<String, EndpointStatus>,
    #[serde(default)]
    rotation: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ServerState {
    delegations: BTreeMap<String, ZoneRecord>,
    agents: BTreeMap<String, AgentEntry>,
}

/// One name server instance. Shareable across threads; zone mutations are
/// serialized behind a write lock while queries take read snapshots.
pub struct NameServer {
    config: NameServerConfig,
    own_zone: ZonePath,
    state: RwLock<ServerState>,
    sessions: SessionManager,
    clock: SharedClock,
    zone_file: Option<PathBuf>,
}

impl NameServer {
    pub fn new(
        config: NameServerConfig,
        clock: SharedClock,
        ids: Arc<IdSource>,
    ) -> Result<Self, ServerError> {
        let labels: Vec<&str> = config.zone.iter().map(String::as_str).collect();
        let own_zone = ZonePath::new(&config.nid, &labels)
            .map_err(|e| ServerError::MalformedRecord(e.to_string()))?;
        validate_server_url(&config.url)?;
        let sessions = SessionManager::new(clock.clone(), ids, config.session_timeout_s);
        sessions
            .set_resources(config.resources.clone())
            .map_err(|e| ServerError::MalformedRecord(e.to_string()))?;
        Ok(Self { config, own_zone, state: RwLock::new(ServerState::default()), sessions, clock, zone_file: None })
    }

    /// Attaches a zone file, loading existing state from it when present.
    pub fn with_zone_file(mut self, path: &Path) -> Result<Self, ServerError> {
        if path.exists() {
            let bytes = std::fs::read(path).map_err(|e| ServerError::Io(e.to_string()))?;
            let state: ServerState =
                serde_json::from_slice(&bytes).map_err(|e| ServerError::Io(e.to_string()))?;
            *self.state.write().expect("state lock") = state;
        }
        self.zone_file = Some(path.to_path_buf());
        Ok(self)
    }

    pub fn url(&self) -> &str {
        &self.config.url
    }

    pub fn nid(&self) -> &str {
        &self.config.nid
    }

    pub fn zone(&self) -> &ZonePath {
        &self.own_zone
    }

    pub fn sessions(&self) -> &SessionManager {
        &self.sessions
    }

    pub fn config(&self) -> &NameServerConfig {
        &self.config
    }

    fn authorize(&self, secret: Option<&str>) -> Result<(), ServerError> {
        match &self.config.registration_secret {
            None => Ok(()),
            Some(expect) if secret == Some(expect.as_str()) => Ok(()),
            Some(_) => Err(ServerError::Unauthorized),
        }
    }

    /// Registers `child_server` as owner of `zone`, one level below this
    /// server's own zone.
    pub fn register_zone(
        &self,
        zone: ZonePath,
        child_server: &str,
        kind: DelegationKind,
        ttl_seconds: u64,
        secret: Option<&str>,
    ) -> Result<(), ServerError> {
        self.authorize(secret)?;
        validate_server_url(child_server)?;
        if ttl_seconds == 0 {
            return Err(ServerError::MalformedRecord("delegation ttl must be positive".into()));
        }
        if zone.nid() != self.own_zone.nid() || !self.own_zone.is_prefix_of(&zone) {
            return Err(ServerError::NotMyZone(format!(
                "{zone} is not under {}",
                self.own_zone
            )));
        }
        if zone.depth() != self.own_zone.depth() + 1 {
            return Err(ServerError::NotMyZone(format!(
                "{zone} is not exactly one level below {}",
                self.own_zone
            )));
        }
        let mut state = self.state.write().expect("state lock");
        let key = zone.to_string();
        if state.delegations.contains_key(&key) {
            return Err(ServerError::ZoneConflict(key));
        }
        state.delegations.insert(
            key,
            ZoneRecord { zone, kind, server_url: child_server.to_string(), ttl_seconds },
        );
        self.persist(&state)
    }

    /// Stores (or replaces) the deployment record for an agent under this
    /// server's zone, making this server authoritative for the name.
    pub fn record_agent(
        &self,
        record: AgentDeploymentRecord,
        secret: Option<&str>,
    ) -> Result<(), ServerError> {
        self.authorize(secret)?;
        record.validate()?;
        if !self.own_zone.covers(&record.agent_name) {
            return Err(ServerError::NotMyZone(format!(
                "{} is not under {}",
                record.agent_name, self.own_zone
            )));
        }
        let mut state = self.state.write().expect("state lock");
        let key = record.agent_name.canonical();
        state.agents.insert(key, AgentEntry { record, status: BTreeMap::new(), rotation: 0 });
        self.persist(&state)
    }

    /// Updates the monitored load/health of one endpoint.
    pub fn update_status(
        &self,
        agent_name: &str,
        endpoint_url: &str,
        load: f64,
        healthy: bool,
    ) -> Result<(), ServerError> {
        let name = AgentName::parse(agent_name)
            .map_err(|e| ServerError::MalformedQuery(e.to_string()))?;
        if !load.is_finite() || load < 0.0 {
            return Err(ServerError::MalformedRecord(format!("load {load} must be non-negative")));
        }
        let mut state = self.state.write().expect("state lock");
        let entry = state
            .agents
            .get_mut(&name.canonical())
            .ok_or_else(|| ServerError::NotFound(format!("no record for {name}")))?;
        if !entry.record.endpoints.iter().any(|e| e.url == endpoint_url) {
            return Err(ServerError::NotFound(format!("no endpoint {endpoint_url} on {name}")));
        }
        entry.status.insert(
            endpoint_url.to_string(),
            EndpointStatus { load, healthy, updated_at_ms: self.clock.now_ms() },
        );
        self.persist(&state)
    }

    /// Answers a resolution query: referral, tailored response, or
    /// negotiation invitation.
    pub fn answer_query(&self, query: &ResolverQuery) -> Result<ResolverAnswer, ServerError> {
        let name =
            AgentName::parse(&query.name).map_err(|e| ServerError::MalformedQuery(e.to_string()))?;
        query.context.validate().map_err(|e| ServerError::MalformedQuery(e.to_string()))?;
        if !self.own_zone.covers(&name) {
            return Err(ServerError::NameNotFound);
        }

        // Deepest delegation below our own zone that still covers the name.
        {
            let state = self.state.read().expect("state lock");
            for depth in (self.own_zone.depth() + 1..=name.depth()).rev() {
                let zone = name.zone(depth).expect("depth bounded by name");
                if let Some(delegation) = state.delegations.get(&zone.to_string()) {
                    return Ok(ResolverAnswer::Referral(Referral {
                        zone: delegation.zone.clone(),
                        next_server_url: delegation.server_url.clone(),
                        ttl_seconds: delegation.ttl_seconds,
                    }));
                }
            }
            if !state.agents.contains_key(&name.canonical()) {
                return Err(ServerError::NameNotFound);
            }
        }

        // Authoritative path; may rotate the tie-break counter or open a
        // negotiation session.
        let mut state = self.state.write().expect("state lock");
        let entry = match state.agents.get_mut(&name.canonical()) {
            Some(entry) => entry,
            None => return Err(ServerError::NameNotFound),
        };
        let record = entry.record.clone();
        let requirements = record.requirements();
        let satisfaction = check_satisfaction(&requirements, &query.context);

        if record.negotiation_required || !satisfaction.satisfied {
            let params = OpenSession {
                agent_name: name.canonical(),
                target_demands: requirements,
                target_ctx: record.target_context.clone().unwrap_or_default(),
                initial_requester_ctx: query.context.clone(),
                missing_fields: satisfaction.missing,
                covered_fields: record.covered_fields(),
                response_ttl_s: self.config.tailored_ttl_s,
                policy_used: record.policy,
            };
            drop(state);
            let invitation = self.sessions.open(params, &self.config.url);
            return Ok(ResolverAnswer::NegotiationInvitation(invitation));
        }

        // Effective candidates: record entries overlaid with the latest
        // monitored status, unhealthy ones excluded.
        let candidates: Vec<EndpointCandidate> = record
            .endpoints
            .iter()
            .map(|e| {
                let mut c = e.clone();
                if let Some(s) = entry.status.get(&e.url) {
                    c.current_load = s.load;
                    c.healthy = s.healthy;
                }
                c
            })
            .filter(|c| c.healthy)
            .collect();
        if candidates.is_empty() {
            return Err(ServerError::NameNotFound);
        }

        let input = PolicyInput {
            candidates: &candidates,
            requester_ctx: &query.context,
            weights: record.weights,
        };
        let rotation = entry.rotation;
        let chosen = tailor::select(record.policy, &input, rotation)
            .map_err(|e| ServerError::MalformedQuery(e.to_string()))?;
        entry.rotation = entry.rotation.wrapping_add(1);

        let mut endpoint_url = candidates[chosen].url.clone();
        if let Some(roles) = &record.role_endpoints {
            if let Some(crate::context::FieldValue::Str(role)) = query.context.field("extra.role") {
                if let Some(url) = roles.get(&role) {
                    endpoint_url = url.clone();
                }
            }
        }

        let response = TailoredResponse {
            endpoint_url,
            ttl_seconds: self.config.tailored_ttl_s,
            fingerprint: fingerprint(&query.context, &record.covered_fields()),
            policy_used: record.policy,
        };
        self.persist(&state)?;
        Ok(ResolverAnswer::Tailored(response))
    }

    /// Registered delegations, for inspection and tests.
    pub fn delegations(&self) -> Vec<ZoneRecord> {
        self.state.read().expect("state lock").delegations.values().cloned().collect()
    }

    pub fn agent_names(&self) -> Vec<String> {
        self.state.read().expect("state lock").agents.keys().cloned().collect()
    }

    fn persist(&self, state: &ServerState) -> Result<(), ServerError> {
        let Some(path) = &self.zone_file else { return Ok(()) };
        let json = serde_json::to_vec_pretty(state).map_err(|e| ServerError::Io(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json).map_err(|e| ServerError::Io(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| ServerError::Io(e.to_string()))?;
        Ok(())
    }
}

impl std::fmt::Debug for NameServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NameServer")
            .field("url", &self.config.url)
            .field("zone", &self.own_zone.to_string())
            .finish()
    }
}

// Referral targets must be https in production; plain http is tolerated
// for loopback hosts so integration tests can run real sockets.
fn validate_server_url(url: &str) -> Result<(), ServerError> {
    if url.starts_with("https://") && url.len() > 8 {
        return Ok(());
    }
    if let Some(rest) = url.strip_prefix("http://") {
        let host = rest.split(['/', ':']).next().unwrap_or("");
        if matches!(host, "127.0.0.1" | "localhost" | "[::1]") {
            return Ok(());
        }
    }
    Err(ServerError::MalformedRecord(format!("server url {url:?} must be https")))
}
