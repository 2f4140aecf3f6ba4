//! Adaptive channel establishment.
//!
//! When a direct tailored answer is not possible (the target demands more
//! context, or always requires negotiation), the authoritative server opens
//! a channel session and the requester drives it through three phases:
//!
//! 1. **Negotiate** — bounded alternating offers until both sides'
//!    requirements check out, producing a [`CommsSpec`]: components to
//!    place, constraints, and an objective.
//! 2. **Optimize** — [`optimize_placement`] assigns components to
//!    resources, exhaustively when the search space is small and greedily
//!    otherwise, never relaxing a constraint.
//! 3. **Deploy** — every resource owner sets up its section and must
//!    acknowledge before either agent sees an endpoint URL.
//!
//! Sessions advance `negotiating → optimizing → deploying → active` and can
//! drop to `torn_down` from any state; idle sessions are swept by an
//! inactivity timeout against the injected clock.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::clock::SharedClock;
use crate::context::{
    check_satisfaction, fingerprint, Context, ContextFingerprint, ContextRequirements, GeoPoint,
};
use crate::ids::IdSource;
use crate::name::AgentName;
use crate::tailor::Policy;

/// Hard cap on negotiation exchanges; guarantees termination.
pub const MAX_NEGOTIATION_ROUNDS: u32 = 8;

/// Exhaustive search is used while the assignment space is at most this.
pub const EXHAUSTIVE_ASSIGNMENT_LIMIT: u64 = 1_000_000;

/// Default objective blend: latency-heavy.
pub const DEFAULT_LATENCY_WEIGHT: f64 = 0.7;
pub const DEFAULT_COST_WEIGHT: f64 = 0.3;

/// Default session inactivity timeout in seconds.
pub const DEFAULT_INACTIVITY_TIMEOUT_S: u64 = 300;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NegotiationError {
    #[error("negotiation failed: {0}")]
    Failed(String),
    #[error("session expired")]
    SessionExpired,
    #[error("unknown session {0}")]
    UnknownSession(Uuid),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlacementError {
    #[error("no assignment satisfies the constraints: {0}")]
    Infeasible(String),
    #[error("malformed comms spec: {0}")]
    MalformedSpec(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OptimizeError {
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error("session expired")]
    SessionExpired,
    #[error("unknown session {0}")]
    UnknownSession(Uuid),
    #[error("negotiation has not concluded")]
    NotReady,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeployError {
    #[error("deployment failed: {0}")]
    Failed(String),
    #[error("session expired")]
    SessionExpired,
    #[error("unknown session {0}")]
    UnknownSession(Uuid),
    #[error("session is not ready to deploy: {0}")]
    NotReady(String),
}

/// Authoritative answer demanding more context before an endpoint is issued.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegotiationInvitation {
    pub session_id: Uuid,
    pub missing_fields: Vec<String>,
    pub target_demands: ContextRequirements,
    pub negotiation_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Constraint {
    MaxLatencyMs { value: f64 },
    MinThroughputMbps { value: f64 },
    MaxTotalCost { value: f64 },
    Colocate { components: Vec<String> },
    RequireCapability { component: String, capability: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentVar {
    pub component_id: String,
    pub candidate_resource_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub latency: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveSense {
    Minimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub weights: ObjectiveWeights,
    pub sense: ObjectiveSense,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            weights: ObjectiveWeights { latency: DEFAULT_LATENCY_WEIGHT, cost: DEFAULT_COST_WEIGHT },
            sense: ObjectiveSense::Minimize,
        }
    }
}

/// Negotiated variables, constraints, and objective for channel placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommsSpec {
    pub session_id: Uuid,
    pub participants: Vec<String>,
    pub variables: Vec<ComponentVar>,
    pub constraints: Vec<Constraint>,
    pub objective: Objective,
}

impl CommsSpec {
    pub fn validate(&self) -> Result<(), PlacementError> {
        if self.participants.len() < 2 {
            return Err(PlacementError::MalformedSpec("needs at least two participants".into()));
        }
        if self.variables.is_empty() {
            return Err(PlacementError::MalformedSpec("no components declared".into()));
        }
        let mut seen = BTreeSet::new();
        for v in &self.variables {
            if v.candidate_resource_ids.is_empty() {
                return Err(PlacementError::MalformedSpec(format!(
                    "component {:?} has no candidate resources",
                    v.component_id
                )));
            }
            if !seen.insert(&v.component_id) {
                return Err(PlacementError::MalformedSpec(format!(
                    "duplicate component {:?}",
                    v.component_id
                )));
            }
        }
        for c in &self.constraints {
            let refs: Vec<&String> = match c {
                Constraint::Colocate { components } => components.iter().collect(),
                Constraint::RequireCapability { component, .. } => vec![component],
                _ => Vec::new(),
            };
            for r in refs {
                if !seen.contains(r) {
                    return Err(PlacementError::MalformedSpec(format!(
                        "constraint references undeclared component {r:?}"
                    )));
                }
            }
        }
        let w = self.objective.weights;
        if !w.latency.is_finite() || !w.cost.is_finite() || w.latency < 0.0 || w.cost < 0.0 {
            return Err(PlacementError::MalformedSpec("objective weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    Datacenter,
    Edge,
    Device,
}

impl ResourceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ResourceKind::Datacenter => "datacenter",
            ResourceKind::Edge => "edge",
            ResourceKind::Device => "device",
        }
    }

    /// Nominal best-case throughput used when a spec constrains bandwidth;
    /// resources do not declare their own figure.
    pub fn throughput_mbps(&self) -> f64 {
        match self {
            ResourceKind::Datacenter => 10_000.0,
            ResourceKind::Edge => 1_000.0,
            ResourceKind::Device => 100.0,
        }
    }
}

/// A deployable unit of the physical environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resource {
    pub resource_id: String,
    pub owner: String,
    pub geo: GeoPoint,
    pub kind: ResourceKind,
    pub capacity_units: f64,
    pub cost_per_unit: f64,
    /// Latency to other resources; symmetric where both entries appear.
    #[serde(default)]
    pub link_latency_ms: BTreeMap<String, f64>,
}

impl Resource {
    pub fn validate(&self) -> Result<(), PlacementError> {
        if self.resource_id.is_empty() {
            return Err(PlacementError::MalformedSpec("resource_id empty".into()));
        }
        if !self.capacity_units.is_finite() || self.capacity_units <= 0.0 {
            return Err(PlacementError::MalformedSpec(format!(
                "resource {:?} capacity must be positive",
                self.resource_id
            )));
        }
        if !self.cost_per_unit.is_finite() || self.cost_per_unit < 0.0 {
            return Err(PlacementError::MalformedSpec(format!(
                "resource {:?} cost must be non-negative",
                self.resource_id
            )));
        }
        for (peer, ms) in &self.link_latency_ms {
            if !ms.is_finite() || *ms <= 0.0 {
                return Err(PlacementError::MalformedSpec(format!(
                    "link {} -> {} latency must be positive",
                    self.resource_id, peer
                )));
            }
        }
        Ok(())
    }
}

/// Validates a resource set, including latency-map symmetry.
pub fn validate_resources(resources: &[Resource]) -> Result<(), PlacementError> {
    let mut by_id: BTreeMap<&str, &Resource> = BTreeMap::new();
    for r in resources {
        r.validate()?;
        if by_id.insert(&r.resource_id, r).is_some() {
            return Err(PlacementError::MalformedSpec(format!(
                "duplicate resource id {:?}",
                r.resource_id
            )));
        }
    }
    for r in resources {
        for (peer, ms) in &r.link_latency_ms {
            if let Some(p) = by_id.get(peer.as_str()) {
                if let Some(back) = p.link_latency_ms.get(&r.resource_id) {
                    if (back - ms).abs() > f64::EPSILON {
                        return Err(PlacementError::MalformedSpec(format!(
                            "asymmetric link latency between {:?} and {:?}",
                            r.resource_id, peer
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// The optimizer's output: a total assignment plus expected figures.
/// `endpoints` stays empty until deployment completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementSpec {
    pub session_id: Uuid,
    pub assignment: BTreeMap<String, String>,
    pub expected_cost: f64,
    pub expected_latency_ms: f64,
    #[serde(default)]
    pub endpoints: BTreeMap<String, String>,
}

// ---------------------------------------------------------------------------
// Assignment evaluation and optimization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentEval {
    pub cost: f64,
    pub latency_ms: f64,
    pub objective: f64,
}

fn link_latency(
    by_id: &BTreeMap<&str, &Resource>,
    a: &str,
    b: &str,
) -> Result<f64, String> {
    if a == b {
        return Ok(0.0);
    }
    let fwd = by_id.get(a).and_then(|r| r.link_latency_ms.get(b));
    let back = by_id.get(b).and_then(|r| r.link_latency_ms.get(a));
    fwd.or(back).copied().ok_or_else(|| format!("no link between {a:?} and {b:?}"))
}

/// Scores a total assignment against a spec, or explains the violation.
///
/// Path latency sums the links between consecutive components in variable
/// order; distinct resources without a declared link are unreachable. Each
/// component consumes one capacity unit of its resource; throughput is the
/// bottleneck of the assigned resources' nominal kind throughput.
pub fn evaluate_assignment(
    spec: &CommsSpec,
    resources: &[Resource],
    assignment: &BTreeMap<String, String>,
) -> Result<AssignmentEval, String> {
    let by_id: BTreeMap<&str, &Resource> = resources.iter().map(|r| (r.resource_id.as_str(), r)).collect();

    for v in &spec.variables {
        let rid = assignment
            .get(&v.component_id)
            .ok_or_else(|| format!("component {:?} unassigned", v.component_id))?;
        if !v.candidate_resource_ids.contains(rid) {
            return Err(format!("component {:?} assigned outside its candidates", v.component_id));
        }
        if !by_id.contains_key(rid.as_str()) {
            return Err(format!("unknown resource {rid:?}"));
        }
    }

    let mut usage: BTreeMap<&str, f64> = BTreeMap::new();
    for rid in assignment.values() {
        *usage.entry(rid.as_str()).or_default() += 1.0;
    }
    for (rid, used) in &usage {
        let cap = by_id[rid].capacity_units;
        if *used > cap {
            return Err(format!("resource {rid:?} over capacity ({used} > {cap})"));
        }
    }

    let cost: f64 = assignment.values().map(|rid| by_id[rid.as_str()].cost_per_unit).sum();

    let mut latency_ms = 0.0;
    for pair in spec.variables.windows(2) {
        let a = &assignment[&pair[0].component_id];
        let b = &assignment[&pair[1].component_id];
        latency_ms += link_latency(&by_id, a, b)?;
    }

    let throughput = assignment
        .values()
        .map(|rid| by_id[rid.as_str()].kind.throughput_mbps())
        .fold(f64::INFINITY, f64::min);

    for (idx, c) in spec.constraints.iter().enumerate() {
        let ok = match c {
            Constraint::MaxLatencyMs { value } => latency_ms <= *value,
            Constraint::MinThroughputMbps { value } => throughput >= *value,
            Constraint::MaxTotalCost { value } => cost <= *value,
            Constraint::Colocate { components } => {
                let mut rids = components.iter().map(|c| &assignment[c]);
                match rids.next() {
                    Some(first) => rids.all(|r| r == first),
                    None => true,
                }
            }
            Constraint::RequireCapability { component, capability } => {
                by_id[assignment[component].as_str()].kind.as_str() == capability
            }
        };
        if !ok {
            return Err(format!("constraint #{idx} violated: {c:?}"));
        }
    }

    let w = spec.objective.weights;
    Ok(AssignmentEval { cost, latency_ms, objective: w.latency * latency_ms + w.cost * cost })
}

/// Finds the assignment minimizing the objective subject to every
/// constraint. Exhaustive while the space is within
/// [`EXHAUSTIVE_ASSIGNMENT_LIMIT`], greedy best-insertion beyond it;
/// infeasibility is reported, never silently relaxed.
pub fn optimize_placement(
    spec: &CommsSpec,
    resources: &[Resource],
) -> Result<PlacementSpec, PlacementError> {
    spec.validate()?;
    validate_resources(resources)?;
    let known: BTreeSet<&str> = resources.iter().map(|r| r.resource_id.as_str()).collect();
    for v in &spec.variables {
        for rid in &v.candidate_resource_ids {
            if !known.contains(rid.as_str()) {
                return Err(PlacementError::MalformedSpec(format!(
                    "candidate {rid:?} for {:?} is not a known resource",
                    v.component_id
                )));
            }
        }
    }

    let space: u64 = spec
        .variables
        .iter()
        .map(|v| v.candidate_resource_ids.len() as u64)
        .try_fold(1u64, u64::checked_mul)
        .unwrap_or(u64::MAX);

    let assignment = if space <= EXHAUSTIVE_ASSIGNMENT_LIMIT {
        exhaustive_search(spec, resources)?
    } else {
        greedy_search(spec, resources)?
    };

    let eval = evaluate_assignment(spec, resources, &assignment)
        .map_err(|e| PlacementError::Infeasible(format!("internal: best assignment failed re-check: {e}")))?;

    Ok(PlacementSpec {
        session_id: spec.session_id,
        assignment,
        expected_cost: eval.cost,
        expected_latency_ms: eval.latency_ms,
        endpoints: BTreeMap::new(),
    })
}

fn exhaustive_search(
    spec: &CommsSpec,
    resources: &[Resource],
) -> Result<BTreeMap<String, String>, PlacementError> {
    let radix: Vec<usize> = spec.variables.iter().map(|v| v.candidate_resource_ids.len()).collect();
    let mut counter = vec![0usize; radix.len()];
    let mut best: Option<(f64, BTreeMap<String, String>)> = None;

    loop {
        let assignment: BTreeMap<String, String> = spec
            .variables
            .iter()
            .zip(&counter)
            .map(|(v, &i)| (v.component_id.clone(), v.candidate_resource_ids[i].clone()))
            .collect();
        if let Ok(eval) = evaluate_assignment(spec, resources, &assignment) {
            let better = match &best {
                None => true,
                Some((obj, _)) => eval.objective < *obj,
            };
            if better {
                best = Some((eval.objective, assignment));
            }
        }

        // Mixed-radix increment.
        let mut pos = 0;
        loop {
            if pos == counter.len() {
                return best.map(|(_, a)| a).ok_or_else(|| {
                    PlacementError::Infeasible("exhausted the assignment space".into())
                });
            }
            counter[pos] += 1;
            if counter[pos] < radix[pos] {
                break;
            }
            counter[pos] = 0;
            pos += 1;
        }
    }
}

// Most-constrained component first, then the locally best feasible
// candidate given the partial assignment. No backtracking: a dead end is
// reported as infeasible even if a cleverer order would have succeeded.
fn greedy_search(
    spec: &CommsSpec,
    resources: &[Resource],
) -> Result<BTreeMap<String, String>, PlacementError> {
    let mut order: Vec<usize> = (0..spec.variables.len()).collect();
    order.sort_by_key(|&i| (spec.variables[i].candidate_resource_ids.len(), i));

    let mut assignment: BTreeMap<String, String> = BTreeMap::new();
    for &i in &order {
        let v = &spec.variables[i];
        let mut best: Option<(f64, &String)> = None;
        for rid in &v.candidate_resource_ids {
            assignment.insert(v.component_id.clone(), rid.clone());
            if let Ok(eval) = evaluate_partial(spec, resources, &assignment) {
                let better = match &best {
                    None => true,
                    Some((obj, _)) => eval.objective < *obj,
                };
                if better {
                    best = Some((eval.objective, rid));
                }
            }
        }
        match best {
            Some((_, rid)) => {
                assignment.insert(v.component_id.clone(), rid.clone());
            }
            None => {
                return Err(PlacementError::Infeasible(format!(
                    "no feasible resource for component {:?} given earlier choices",
                    v.component_id
                )))
            }
        }
    }
    Ok(assignment)
}

// Like `evaluate_assignment` but tolerant of unassigned components:
// latency counts only fully assigned adjacent pairs, constraints are
// checked only once every referenced component is assigned.
fn evaluate_partial(
    spec: &CommsSpec,
    resources: &[Resource],
    partial: &BTreeMap<String, String>,
) -> Result<AssignmentEval, String> {
    let by_id: BTreeMap<&str, &Resource> = resources.iter().map(|r| (r.resource_id.as_str(), r)).collect();

    let mut usage: BTreeMap<&str, f64> = BTreeMap::new();
    for rid in partial.values() {
        if !by_id.contains_key(rid.as_str()) {
            return Err(format!("unknown resource {rid:?}"));
        }
        *usage.entry(rid.as_str()).or_default() += 1.0;
    }
    for (rid, used) in &usage {
        if *used > by_id[rid].capacity_units {
            return Err(format!("resource {rid:?} over capacity"));
        }
    }

    let cost: f64 = partial.values().map(|rid| by_id[rid.as_str()].cost_per_unit).sum();

    let mut latency_ms = 0.0;
    for pair in spec.variables.windows(2) {
        if let (Some(a), Some(b)) = (partial.get(&pair[0].component_id), partial.get(&pair[1].component_id)) {
            latency_ms += link_latency(&by_id, a, b)?;
        }
    }

    let throughput = partial
        .values()
        .map(|rid| by_id[rid.as_str()].kind.throughput_mbps())
        .fold(f64::INFINITY, f64::min);

    for (idx, c) in spec.constraints.iter().enumerate() {
        let ok = match c {
            Constraint::MaxLatencyMs { value } => {
                let total = spec.variables.iter().all(|v| partial.contains_key(&v.component_id));
                !total || latency_ms <= *value
            }
            Constraint::MinThroughputMbps { value } => partial.is_empty() || throughput >= *value,
            // Costs only grow as the assignment fills in.
            Constraint::MaxTotalCost { value } => cost <= *value,
            Constraint::Colocate { components } => {
                let assigned: Vec<&String> = components.iter().filter_map(|c| partial.get(c)).collect();
                assigned.windows(2).all(|w| w[0] == w[1])
            }
            Constraint::RequireCapability { component, capability } => match partial.get(component) {
                Some(rid) => by_id[rid.as_str()].kind.as_str() == capability,
                None => true,
            },
        };
        if !ok {
            return Err(format!("constraint #{idx} violated"));
        }
    }

    let w = spec.objective.weights;
    Ok(AssignmentEval { cost, latency_ms, objective: w.latency * latency_ms + w.cost * cost })
}

// ---------------------------------------------------------------------------
// Negotiation wire messages
// ---------------------------------------------------------------------------

fn default_true() -> bool {
    true
}

/// One requester round: supply fields, state demands, or refuse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegotiateOffer {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requester_name: Option<String>,
    #[serde(default)]
    pub supplied: Context,
    #[serde(default)]
    pub demands: ContextRequirements,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refused_fields: Vec<String>,
    /// Accept the current terms once both sides' checks pass.
    #[serde(default = "default_true")]
    pub accept: bool,
}

impl Default for NegotiateOffer {
    fn default() -> Self {
        Self {
            requester_name: None,
            supplied: Context::default(),
            demands: ContextRequirements::default(),
            refused_fields: Vec::new(),
            accept: true,
        }
    }
}

/// Target's response to an offer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NegotiateReply {
    /// Demands remain; `target_supplied` carries the target context fields
    /// the requester asked for.
    Counter {
        still_missing: Vec<String>,
        still_violated: Vec<usize>,
        target_supplied: Context,
        round: u32,
    },
    /// Both sides satisfied; the comms spec is fixed.
    Agreed { comms_spec: CommsSpec, target_supplied: Context, rounds_used: u32 },
}

/// Returned by a completed deployment; the only place endpoint URLs appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployReply {
    pub endpoints: BTreeMap<String, String>,
    /// Final placement, including any replanning done during deployment.
    pub placement: PlacementSpec,
    pub ttl_seconds: u64,
    pub fingerprint: ContextFingerprint,
    pub policy_used: Policy,
}

// ---------------------------------------------------------------------------
// Sessions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Negotiating,
    Optimizing,
    Deploying,
    Active,
    TornDown,
}

impl SessionState {
    fn index(&self) -> u8 {
        match self {
            SessionState::Negotiating => 0,
            SessionState::Optimizing => 1,
            SessionState::Deploying => 2,
            SessionState::Active => 3,
            SessionState::TornDown => 4,
        }
    }
}

/// One adaptive-resolution session, owned by the authoritative server.
#[derive(Debug, Clone)]
pub struct ChannelSession {
    pub session_id: Uuid,
    pub state: SessionState,
    pub last_activity_ms: u64,
    pub inactivity_timeout_s: u64,
    pub agent_name: String,
    pub requester_name: String,
    pub target_demands: ContextRequirements,
    pub target_ctx: Context,
    pub requester_view: Context,
    pub requester_demands: ContextRequirements,
    pub covered_fields: Vec<String>,
    pub response_ttl_s: u64,
    pub policy_used: Policy,
    pub rounds_used: u32,
    posts: u32,
    last_counter_sig: Option<String>,
    pub comms_spec: Option<CommsSpec>,
    pub placement: Option<PlacementSpec>,
    pub endpoints: Option<BTreeMap<String, String>>,
}

impl ChannelSession {
    /// Forward-only transitions, except that teardown is always allowed.
    fn advance(&mut self, to: SessionState) -> Result<(), String> {
        if to == SessionState::TornDown || to.index() > self.state.index() {
            self.state = to;
            Ok(())
        } else {
            Err(format!("cannot move from {:?} to {:?}", self.state, to))
        }
    }
}

/// What the authoritative server knows when it opens a session.
#[derive(Debug, Clone)]
pub struct OpenSession {
    pub agent_name: String,
    pub target_demands: ContextRequirements,
    pub target_ctx: Context,
    pub initial_requester_ctx: Context,
    pub missing_fields: Vec<String>,
    pub covered_fields: Vec<String>,
    pub response_ttl_s: u64,
    pub policy_used: Policy,
}

/// Per-owner slice of a placement, handed to the owner's setup interface.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OwnerSection {
    pub owner: String,
    pub session_id: Uuid,
    /// (component id, resource id) pairs this owner must set up.
    pub assignments: Vec<(String, String)>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("owner {owner} failed: {reason}")]
pub struct OwnerError {
    pub owner: String,
    pub reason: String,
}

/// Deployment interface a resource owner exposes to the broker.
pub trait ResourceOwner: Send + Sync {
    fn setup(&self, section: &OwnerSection) -> Result<(), OwnerError>;
}

/// Owner that always acknowledges.
#[derive(Debug, Default)]
pub struct AckOwner;

impl ResourceOwner for AckOwner {
    fn setup(&self, _section: &OwnerSection) -> Result<(), OwnerError> {
        Ok(())
    }
}

/// Owner that fails the first `n` setup calls, then acknowledges.
#[derive(Debug, Default)]
pub struct FlakyOwner {
    remaining_failures: std::sync::atomic::AtomicU32,
}

impl FlakyOwner {
    pub fn failing(times: u32) -> Self {
        Self { remaining_failures: std::sync::atomic::AtomicU32::new(times) }
    }
}

impl ResourceOwner for FlakyOwner {
    fn setup(&self, section: &OwnerSection) -> Result<(), OwnerError> {
        use std::sync::atomic::Ordering;
        let mut now = self.remaining_failures.load(Ordering::SeqCst);
        while now > 0 {
            match self.remaining_failures.compare_exchange(now, now - 1, Ordering::SeqCst, Ordering::SeqCst) {
                Ok(_) => {
                    return Err(OwnerError { owner: section.owner.clone(), reason: "setup refused".into() })
                }
                Err(actual) => now = actual,
            }
        }
        Ok(())
    }
}

/// Broker state for all sessions of one authoritative server.
pub struct SessionManager {
    clock: SharedClock,
    ids: Arc<IdSource>,
    timeout_s: u64,
    resources: RwLock<Vec<Resource>>,
    owners: RwLock<BTreeMap<String, Arc<dyn ResourceOwner>>>,
    sessions: Mutex<BTreeMap<Uuid, ChannelSession>>,
}

impl SessionManager {
    pub fn new(clock: SharedClock, ids: Arc<IdSource>, timeout_s: u64) -> Self {
        Self {
            clock,
            ids,
            timeout_s,
            resources: RwLock::new(Vec::new()),
            owners: RwLock::new(BTreeMap::new()),
            sessions: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn set_resources(&self, resources: Vec<Resource>) -> Result<(), PlacementError> {
        validate_resources(&resources)?;
        *self.resources.write().expect("resources lock") = resources;
        Ok(())
    }

    pub fn resources(&self) -> Vec<Resource> {
        self.resources.read().expect("resources lock").clone()
    }

    pub fn register_owner(&self, name: &str, owner: Arc<dyn ResourceOwner>) {
        self.owners.write().expect("owners lock").insert(name.to_string(), owner);
    }

    /// Opens a session and returns the invitation to send back.
    pub fn open(&self, params: OpenSession, server_url: &str) -> NegotiationInvitation {
        let session_id = self.ids.next_uuid();
        let now = self.clock.now_ms();
        let session = ChannelSession {
            session_id,
            state: SessionState::Negotiating,
            last_activity_ms: now,
            inactivity_timeout_s: self.timeout_s,
            agent_name: params.agent_name,
            requester_name: "requester".into(),
            target_demands: params.target_demands.clone(),
            target_ctx: params.target_ctx,
            requester_view: params.initial_requester_ctx,
            requester_demands: ContextRequirements::default(),
            covered_fields: params.covered_fields,
            response_ttl_s: params.response_ttl_s,
            policy_used: params.policy_used,
            rounds_used: 0,
            posts: 0,
            last_counter_sig: None,
            comms_spec: None,
            placement: None,
            endpoints: None,
        };
        self.sessions.lock().expect("sessions lock").insert(session_id, session);
        NegotiationInvitation {
            session_id,
            missing_fields: params.missing_fields,
            target_demands: params.target_demands,
            negotiation_url: format!("{}/sessions/{}/negotiate", server_url.trim_end_matches('/'), session_id),
        }
    }

    fn check_alive(&self, session: &mut ChannelSession, now: u64) -> bool {
        if session.state == SessionState::TornDown {
            return false;
        }
        if now.saturating_sub(session.last_activity_ms) > session.inactivity_timeout_s * 1_000 {
            session.state = SessionState::TornDown;
            return false;
        }
        true
    }

    /// Server side of one negotiation round.
    pub fn negotiate(&self, id: Uuid, offer: &NegotiateOffer) -> Result<NegotiateReply, NegotiationError> {
        let now = self.clock.now_ms();
        let mut sessions = self.sessions.lock().expect("sessions lock");
        let session = sessions.get_mut(&id).ok_or(NegotiationError::UnknownSession(id))?;
        if !self.check_alive(session, now) {
            return Err(NegotiationError::SessionExpired);
        }
        session.last_activity_ms = now;

        // Replay after agreement returns the settled spec.
        if let Some(spec) = &session.comms_spec {
            let supplied =
                session.target_ctx.project_sections(&referenced_vec(&session.requester_demands));
            return Ok(NegotiateReply::Agreed {
                comms_spec: spec.clone(),
                target_supplied: supplied,
                rounds_used: session.rounds_used,
            });
        }

        if let Some(name) = &offer.requester_name {
            session.requester_name = name.clone();
        }

        if !offer.refused_fields.is_empty() {
            let demanded = session.target_demands.referenced_fields();
            let refused_needed: Vec<&String> =
                offer.refused_fields.iter().filter(|f| demanded.contains(*f)).collect();
            if !refused_needed.is_empty() {
                session.advance(SessionState::TornDown).ok();
                return Err(NegotiationError::Failed(format!(
                    "requester refused required fields {refused_needed:?}"
                )));
            }
        }

        session.posts += 1;
        if session.posts > MAX_NEGOTIATION_ROUNDS {
            session.advance(SessionState::TornDown).ok();
            return Err(NegotiationError::Failed(format!(
                "round cap of {MAX_NEGOTIATION_ROUNDS} reached"
            )));
        }

        let merged = session.requester_view.merged_with(&offer.supplied);
        let mut new_demands = session.requester_demands.clone();
        new_demands.required_fields.extend(offer.demands.required_fields.iter().cloned());
        for r in &offer.demands.restrictions {
            if !new_demands.restrictions.contains(r) {
                new_demands.restrictions.push(r.clone());
            }
        }
        let new_info = merged != session.requester_view || new_demands != session.requester_demands;
        session.requester_view = merged;
        session.requester_demands = new_demands;
        if new_info {
            session.rounds_used += 1;
        }

        let sat_target = check_satisfaction(&session.target_demands, &session.requester_view);
        let sat_requester = check_satisfaction(&session.requester_demands, &session.target_ctx);
        let target_supplied =
            session.target_ctx.project_sections(&referenced_vec(&session.requester_demands));

        if sat_target.satisfied && sat_requester.satisfied && offer.accept {
            let resources = self.resources.read().expect("resources lock");
            let spec = assemble_comms_spec(session, &resources)?;
            session.comms_spec = Some(spec.clone());
            session
                .advance(SessionState::Optimizing)
                .map_err(NegotiationError::Failed)?;
            return Ok(NegotiateReply::Agreed {
                comms_spec: spec,
                target_supplied,
                rounds_used: session.rounds_used,
            });
        }

        // A round that changed nothing and still isn't satisfied will never
        // converge; fail fast instead of burning the cap.
        let sig = format!("{:?}|{:?}|{:?}", sat_target.missing, sat_target.violated, session.requester_demands);
        if session.last_counter_sig.as_deref() == Some(sig.as_str()) && !new_info {
            session.advance(SessionState::TornDown).ok();
            return Err(NegotiationError::Failed("no progress between rounds".into()));
        }
        session.last_counter_sig = Some(sig);

        Ok(NegotiateReply::Counter {
            still_missing: sat_target.missing,
            still_violated: sat_target.violated,
            target_supplied,
            round: session.rounds_used,
        })
    }

    /// Runs the optimizer over the agreed spec; placement is stored but no
    /// endpoint exists yet.
    pub fn optimize(&self, id: Uuid) -> Result<PlacementSpec, OptimizeError> {
        let now = self.clock.now_ms();
        let mut sessions = self.sessions.lock().expect("sessions lock");
        let session = sessions.get_mut(&id).ok_or(OptimizeError::UnknownSession(id))?;
        if !self.check_alive(session, now) {
            return Err(OptimizeError::SessionExpired);
        }
        session.last_activity_ms = now;
        let spec = session.comms_spec.clone().ok_or(OptimizeError::NotReady)?;
        let resources = self.resources.read().expect("resources lock").clone();
        match optimize_placement(&spec, &resources) {
            Ok(placement) => {
                session.placement = Some(placement.clone());
                Ok(placement)
            }
            Err(e) => {
                session.advance(SessionState::TornDown).ok();
                Err(e.into())
            }
        }
    }

    /// Deploys the stored placement. Owners acknowledge section by section;
    /// one owner failure triggers a single re-optimization with that
    /// owner's resources excluded. Endpoints become visible only after
    /// every owner has acknowledged.
    pub fn deploy(&self, id: Uuid) -> Result<DeployReply, DeployError> {
        let now = self.clock.now_ms();
        // Phase 1: snapshot under the lock.
        let (mut placement, spec) = {
            let mut sessions = self.sessions.lock().expect("sessions lock");
            let session = sessions.get_mut(&id).ok_or(DeployError::UnknownSession(id))?;
            if !self.check_alive(session, now) {
                return Err(DeployError::SessionExpired);
            }
            session.last_activity_ms = now;
            if session.state == SessionState::Active {
                if let (Some(endpoints), Some(placement)) = (&session.endpoints, &session.placement) {
                    // Idempotent replay.
                    return Ok(DeployReply {
                        endpoints: endpoints.clone(),
                        placement: placement.clone(),
                        ttl_seconds: session.response_ttl_s,
                        fingerprint: fingerprint(&session.requester_view, &session.covered_fields),
                        policy_used: session.policy_used,
                    });
                }
            }
            let placement = session
                .placement
                .clone()
                .ok_or_else(|| DeployError::NotReady("no placement computed".into()))?;
            let spec = session
                .comms_spec
                .clone()
                .ok_or_else(|| DeployError::NotReady("no comms spec".into()))?;
            session.advance(SessionState::Deploying).map_err(DeployError::Failed)?;
            (placement, spec)
        };

        // Phase 2: owner setup outside the lock, so observers can probe
        // that endpoints are withheld mid-deployment.
        let resources = self.resources.read().expect("resources lock").clone();
        if let Err(failed) = self.run_owner_setup(id, &placement, &resources) {
            // One retry with the failed owner's assigned resources excluded.
            let excluded: BTreeSet<String> = placement
                .assignment
                .values()
                .filter(|rid| resource_owner(&resources, rid) == Some(failed.owner.as_str()))
                .cloned()
                .collect();
            let reduced = reduce_spec(&spec, &excluded);
            let replanned = match reduced.and_then(|s| {
                optimize_placement(&s, &resources).map(|p| (s, p))
            }) {
                Ok((_, p)) => p,
                Err(e) => {
                    self.teardown(id);
                    return Err(DeployError::Failed(format!(
                        "owner {} failed and no alternative placement exists: {e}",
                        failed.owner
                    )));
                }
            };
            if let Err(second) = self.run_owner_setup(id, &replanned, &resources) {
                self.teardown(id);
                return Err(DeployError::Failed(format!(
                    "retry after excluding {} also failed: {second}",
                    failed.owner
                )));
            }
            placement = replanned;
        }

        // Phase 3: all owners acknowledged; release endpoints.
        let mut sessions = self.sessions.lock().expect("sessions lock");
        let session = sessions.get_mut(&id).ok_or(DeployError::UnknownSession(id))?;
        if session.state == SessionState::TornDown {
            return Err(DeployError::SessionExpired);
        }
        let endpoints = build_endpoints(&session.agent_name, &session.requester_name, id, &placement);
        let mut final_placement = placement;
        final_placement.endpoints = endpoints.clone();
        session.placement = Some(final_placement.clone());
        session.endpoints = Some(endpoints.clone());
        session.advance(SessionState::Active).map_err(DeployError::Failed)?;
        session.last_activity_ms = self.clock.now_ms();
        Ok(DeployReply {
            endpoints,
            placement: final_placement,
            ttl_seconds: session.response_ttl_s,
            fingerprint: fingerprint(&session.requester_view, &session.covered_fields),
            policy_used: session.policy_used,
        })
    }

    fn run_owner_setup(
        &self,
        id: Uuid,
        placement: &PlacementSpec,
        resources: &[Resource],
    ) -> Result<(), OwnerError> {
        let mut sections: BTreeMap<String, OwnerSection> = BTreeMap::new();
        for (component, rid) in &placement.assignment {
            let owner = resource_owner(resources, rid).unwrap_or("unknown").to_string();
            sections
                .entry(owner.clone())
                .or_insert_with(|| OwnerSection { owner, session_id: id, assignments: Vec::new() })
                .assignments
                .push((component.clone(), rid.clone()));
        }
        let owners = self.owners.read().expect("owners lock");
        for (name, section) in &sections {
            match owners.get(name) {
                Some(owner) => owner.setup(section)?,
                // Unregistered owners acknowledge implicitly.
                None => AckOwner.setup(section)?,
            }
        }
        Ok(())
    }

    pub fn touch(&self, id: Uuid) -> bool {
        let now = self.clock.now_ms();
        let mut sessions = self.sessions.lock().expect("sessions lock");
        match sessions.get_mut(&id) {
            Some(s) if s.state != SessionState::TornDown => {
                s.last_activity_ms = now;
                true
            }
            _ => false,
        }
    }

    /// Tears down active sessions idle past their timeout; returns the ids
    /// torn down by this sweep (a second sweep returns nothing for them).
    pub fn sweep_inactive(&self) -> Vec<Uuid> {
        let now = self.clock.now_ms();
        let mut sessions = self.sessions.lock().expect("sessions lock");
        let mut swept = Vec::new();
        for (id, s) in sessions.iter_mut() {
            if s.state == SessionState::Active
                && now.saturating_sub(s.last_activity_ms) > s.inactivity_timeout_s * 1_000
            {
                s.state = SessionState::TornDown;
                swept.push(*id);
            }
        }
        swept
    }

    /// Idempotent teardown; true when this call changed the state.
    pub fn teardown(&self, id: Uuid) -> bool {
        let mut sessions = self.sessions.lock().expect("sessions lock");
        match sessions.get_mut(&id) {
            Some(s) if s.state != SessionState::TornDown => {
                s.state = SessionState::TornDown;
                true
            }
            _ => false,
        }
    }

    pub fn session_state(&self, id: Uuid) -> Option<SessionState> {
        self.sessions.lock().expect("sessions lock").get(&id).map(|s| s.state)
    }

    /// Endpoints are only present once deployment fully completed.
    pub fn endpoints_of(&self, id: Uuid) -> Option<BTreeMap<String, String>> {
        self.sessions.lock().expect("sessions lock").get(&id).and_then(|s| s.endpoints.clone())
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("sessions lock").len()
    }
}

impl std::fmt::Debug for SessionManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionManager").field("timeout_s", &self.timeout_s).finish()
    }
}

fn referenced_vec(req: &ContextRequirements) -> Vec<String> {
    req.referenced_fields().into_iter().collect()
}

fn resource_owner<'a>(resources: &'a [Resource], rid: &str) -> Option<&'a str> {
    resources.iter().find(|r| r.resource_id == rid).map(|r| r.owner.as_str())
}

fn reduce_spec(spec: &CommsSpec, excluded: &BTreeSet<String>) -> Result<CommsSpec, PlacementError> {
    let mut out = spec.clone();
    for v in &mut out.variables {
        v.candidate_resource_ids.retain(|rid| !excluded.contains(rid));
        if v.candidate_resource_ids.is_empty() {
            return Err(PlacementError::Infeasible(format!(
                "component {:?} has no candidates left after excluding failed resources",
                v.component_id
            )));
        }
    }
    Ok(out)
}

fn component_id_for(participant: &str) -> String {
    format!("comms:{participant}")
}

fn endpoint_label(participant: &str) -> String {
    match AgentName::parse(participant) {
        Ok(name) => name.labels().last().cloned().unwrap_or_else(|| "agent".into()),
        Err(_) => participant
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c.to_ascii_lowercase() } else { '-' })
            .collect(),
    }
}

fn build_endpoints(
    agent_name: &str,
    requester_name: &str,
    session_id: Uuid,
    placement: &PlacementSpec,
) -> BTreeMap<String, String> {
    let sid = session_id.simple().to_string();
    let mut endpoints = BTreeMap::new();
    for participant in [requester_name, agent_name] {
        if let Some(rid) = placement.assignment.get(&component_id_for(participant)) {
            endpoints.insert(
                participant.to_string(),
                format!("https://{rid}/ch/{sid}/{}", endpoint_label(participant)),
            );
        }
    }
    endpoints
}

/// Builds the agreed spec out of both parties' context sections. Latency
/// and cost ceilings take the tighter of the two sides; a bulk-transfer
/// usage pattern on either side forces colocation.
fn assemble_comms_spec(
    session: &ChannelSession,
    resources: &[Resource],
) -> Result<CommsSpec, NegotiationError> {
    if resources.is_empty() {
        return Err(NegotiationError::Failed("no resources available for placement".into()));
    }
    let candidates: Vec<String> = resources.iter().map(|r| r.resource_id.clone()).collect();
    let requester_component = component_id_for(&session.requester_name);
    let target_component = component_id_for(&session.agent_name);

    let mut constraints = Vec::new();
    let (req, tgt) = (&session.requester_view, &session.target_ctx);
    let latencies: Vec<f64> = [req.qos.as_ref(), tgt.qos.as_ref()]
        .into_iter()
        .flatten()
        .map(|q| q.max_latency_ms)
        .collect();
    if let Some(v) = latencies.iter().copied().reduce(f64::min) {
        constraints.push(Constraint::MaxLatencyMs { value: v });
    }
    let throughputs: Vec<f64> = [req.qos.as_ref(), tgt.qos.as_ref()]
        .into_iter()
        .flatten()
        .map(|q| q.min_throughput_mbps)
        .collect();
    if let Some(v) = throughputs.iter().copied().reduce(f64::max) {
        constraints.push(Constraint::MinThroughputMbps { value: v });
    }
    let costs: Vec<f64> = [req.cost.as_ref(), tgt.cost.as_ref()]
        .into_iter()
        .flatten()
        .map(|c| c.max_cost_units)
        .collect();
    if let Some(v) = costs.iter().copied().reduce(f64::min) {
        constraints.push(Constraint::MaxTotalCost { value: v });
    }
    let bulk = [req.usage.as_ref(), tgt.usage.as_ref()]
        .into_iter()
        .flatten()
        .any(|u| u.pattern == crate::context::UsagePattern::BulkTransfer);
    if bulk {
        constraints.push(Constraint::Colocate {
            components: vec![requester_component.clone(), target_component.clone()],
        });
    }

    Ok(CommsSpec {
        session_id: session.session_id,
        participants: vec![session.requester_name.clone(), session.agent_name.clone()],
        variables: vec![
            ComponentVar { component_id: requester_component, candidate_resource_ids: candidates.clone() },
            ComponentVar { component_id: target_component, candidate_resource_ids: candidates },
        ],
        constraints,
        objective: Objective::default(),
    })
}

// ---------------------------------------------------------------------------
// Requester-side handshake driver
// ---------------------------------------------------------------------------

/// Transport view the handshake needs; implemented by the in-process
/// network and the HTTP client.
pub trait SessionTransport: Send + Sync {
    fn negotiate(&self, negotiation_url: &str, offer: &NegotiateOffer) -> Result<NegotiateReply, String>;
    fn optimize(&self, session_base_url: &str) -> Result<PlacementSpec, String>;
    fn deploy(&self, session_base_url: &str) -> Result<DeployReply, String>;
    fn teardown(&self, session_base_url: &str) -> Result<(), String>;
}

/// Everything the requester learns from a completed handshake.
#[derive(Debug, Clone, PartialEq)]
pub struct HandshakeOutcome {
    pub comms_spec: CommsSpec,
    pub placement: PlacementSpec,
    pub endpoints: BTreeMap<String, String>,
    pub ttl_seconds: u64,
    pub fingerprint: ContextFingerprint,
    pub policy_used: Policy,
    pub rounds_used: u32,
}

/// Strips the trailing verb off a negotiation URL to get the session base.
pub fn session_base_url(negotiation_url: &str) -> &str {
    negotiation_url.strip_suffix("/negotiate").unwrap_or(negotiation_url)
}

/// Extracts the session id from a `…/sessions/{id}[/verb]` URL.
pub fn session_id_from_url(url: &str) -> Option<Uuid> {
    let (_, tail) = url.split_once("/sessions/")?;
    let id = tail.split('/').next()?;
    Uuid::parse_str(id).ok()
}

/// Drives negotiate → optimize → deploy on behalf of the requester.
///
/// Supplies only fields the target demanded and the requester actually
/// holds; a demand the requester cannot meet fails the negotiation (after
/// tearing the session down server-side).
pub fn run_handshake(
    transport: &dyn SessionTransport,
    invitation: &NegotiationInvitation,
    negotiation_ctx: &Context,
    requester_demands: &ContextRequirements,
    requester_name: &str,
) -> Result<HandshakeOutcome, NegotiationError> {
    let base = session_base_url(&invitation.negotiation_url).to_string();
    let demanded: Vec<String> = invitation.target_demands.referenced_fields().into_iter().collect();

    let mut offer = NegotiateOffer {
        requester_name: Some(requester_name.to_string()),
        supplied: negotiation_ctx.project_sections(&demanded),
        demands: requester_demands.clone(),
        refused_fields: Vec::new(),
        accept: true,
    };

    let mut target_view = Context::default();
    let agreement = loop {
        match transport.negotiate(&invitation.negotiation_url, &offer).map_err(NegotiationError::Failed)? {
            NegotiateReply::Agreed { comms_spec, target_supplied, rounds_used } => {
                target_view = target_view.merged_with(&target_supplied);
                let sat = check_satisfaction(requester_demands, &target_view);
                if !sat.satisfied {
                    let _ = transport.teardown(&base);
                    return Err(NegotiationError::Failed(format!(
                        "target cannot meet requester demands; missing {:?}",
                        sat.missing
                    )));
                }
                break (comms_spec, rounds_used);
            }
            NegotiateReply::Counter { still_missing, still_violated, target_supplied, .. } => {
                target_view = target_view.merged_with(&target_supplied);
                if !still_violated.is_empty() {
                    let _ = transport.teardown(&base);
                    return Err(NegotiationError::Failed(format!(
                        "requester context violates target restrictions {still_violated:?}"
                    )));
                }
                let unsuppliable: Vec<String> = still_missing
                    .iter()
                    .filter(|f| !negotiation_ctx.has_field(f))
                    .cloned()
                    .collect();
                if !unsuppliable.is_empty() {
                    let _ = transport.teardown(&base);
                    return Err(NegotiationError::Failed(format!(
                        "requester cannot supply demanded fields {unsuppliable:?}"
                    )));
                }
                offer = NegotiateOffer {
                    requester_name: Some(requester_name.to_string()),
                    supplied: negotiation_ctx.project_sections(&still_missing),
                    demands: requester_demands.clone(),
                    refused_fields: Vec::new(),
                    accept: true,
                };
            }
        }
    };

    transport.optimize(&base).map_err(NegotiationError::Failed)?;
    let reply = transport.deploy(&base).map_err(NegotiationError::Failed)?;
    Ok(HandshakeOutcome {
        comms_spec: agreement.0,
        placement: reply.placement,
        endpoints: reply.endpoints,
        ttl_seconds: reply.ttl_seconds,
        fingerprint: reply.fingerprint,
        policy_used: reply.policy_used,
        rounds_used: agreement.1,
    })
}
