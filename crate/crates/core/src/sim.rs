//! Deterministic in-process scenario harness.
//!
//! A scenario file declares a namespace layout (servers, delegations),
//! agents (facts cards and deployment records), a timed workload of
//! resolutions and status changes, and declarative assertions. The harness
//! boots everything in one process against a mock clock and a seeded id
//! source, so a scenario run is reproducible byte for byte: no sockets, no
//! sleeps, no wall-clock reads.
//!
//! The same [`SimNetwork`] doubles as the transport for resolver unit
//! tests: it routes query and session calls to nodes by URL prefix.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive::{
    session_id_from_url, DeployReply, NegotiateOffer, NegotiateReply, PlacementSpec,
    SessionTransport,
};
use crate::clock::{Clock, MockClock};
use crate::context::{Context, ContextRequirements};
use crate::facts::{AgentFactsCard, FactsRegistry};
use crate::ids::IdSource;
use crate::name::ZonePath;
use crate::nameserver::{
    AgentDeploymentRecord, DelegationKind, NameServer, NameServerConfig, ResolverAnswer,
};
use crate::resolver::{ResolveOptions, Resolver, ResolverConfig, ResolverQuery};
use crate::transport::{QueryTransport, TransportError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario i/o: {0}")]
    Io(String),
}

// ---------------------------------------------------------------------------
// In-process network
// ---------------------------------------------------------------------------

/// Relay that agents connect out to when neither side accepts inbound
/// traffic; records who connected.
#[derive(Debug)]
pub struct RelayStub {
    url: String,
    connections: Mutex<Vec<String>>,
}

impl RelayStub {
    pub fn new(url: &str) -> Self {
        Self { url: url.to_string(), connections: Mutex::new(Vec::new()) }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn connect(&self, agent: &str) {
        self.connections.lock().expect("relay lock").push(agent.to_string());
    }

    pub fn connections(&self) -> Vec<String> {
        self.connections.lock().expect("relay lock").clone()
    }
}

#[derive(Debug, Clone)]
enum SimNode {
    Name(Arc<NameServer>),
    Facts(Arc<FactsRegistry>),
    Relay(Arc<RelayStub>),
}

/// Routes calls to in-process nodes by URL prefix.
#[derive(Debug, Default)]
pub struct SimNetwork {
    nodes: RwLock<BTreeMap<String, SimNode>>,
}

impl SimNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_name_server(&self, server: Arc<NameServer>) {
        let url = server.url().to_string();
        self.nodes.write().expect("nodes lock").insert(url, SimNode::Name(server));
    }

    pub fn add_facts_registry(&self, url: &str, registry: Arc<FactsRegistry>) {
        self.nodes.write().expect("nodes lock").insert(url.to_string(), SimNode::Facts(registry));
    }

    pub fn add_relay(&self, relay: Arc<RelayStub>) {
        let url = relay.url().to_string();
        self.nodes.write().expect("nodes lock").insert(url, SimNode::Relay(relay));
    }

    fn node_for(&self, url: &str) -> Option<SimNode> {
        let nodes = self.nodes.read().expect("nodes lock");
        // Longest prefix wins so session URLs land on their server.
        nodes
            .iter()
            .filter(|(key, _)| url.starts_with(key.as_str()))
            .max_by_key(|(key, _)| key.len())
            .map(|(_, node)| node.clone())
    }

    pub fn name_server(&self, url: &str) -> Result<Arc<NameServer>, String> {
        match self.node_for(url) {
            Some(SimNode::Name(ns)) => Ok(ns),
            Some(_) => Err(format!("{url} is not a name server")),
            None => Err(format!("no route to {url}")),
        }
    }

    /// Simulates an agent's outbound connection to an endpoint; only
    /// relay nodes accept one.
    pub fn connect_outbound(&self, endpoint_url: &str, agent: &str) -> Result<(), String> {
        match self.node_for(endpoint_url) {
            Some(SimNode::Relay(relay)) => {
                relay.connect(agent);
                Ok(())
            }
            Some(_) => Err(format!("{endpoint_url} does not accept raw connections")),
            None => Err(format!("no route to {endpoint_url}")),
        }
    }

    pub fn relay(&self, url: &str) -> Option<Arc<RelayStub>> {
        match self.node_for(url) {
            Some(SimNode::Relay(r)) => Some(r),
            _ => None,
        }
    }

    pub fn facts_registry(&self, url: &str) -> Option<Arc<FactsRegistry>> {
        match self.node_for(url) {
            Some(SimNode::Facts(f)) => Some(f),
            _ => None,
        }
    }
}

impl QueryTransport for SimNetwork {
    fn resolve(&self, server_url: &str, query: &ResolverQuery) -> Result<ResolverAnswer, TransportError> {
        match self.node_for(server_url) {
            Some(SimNode::Name(ns)) => {
                ns.answer_query(query).map_err(|e| TransportError::Service(e.into()))
            }
            Some(_) => Err(TransportError::Protocol(format!("{server_url} is not a name server"))),
            None => Err(TransportError::Unreachable {
                url: server_url.to_string(),
                reason: "no such node".into(),
            }),
        }
    }
}

impl SessionTransport for SimNetwork {
    fn negotiate(&self, url: &str, offer: &NegotiateOffer) -> Result<NegotiateReply, String> {
        let ns = self.name_server(url)?;
        let id = session_id_from_url(url).ok_or_else(|| format!("bad session url {url}"))?;
        ns.sessions().negotiate(id, offer).map_err(|e| e.to_string())
    }

    fn optimize(&self, url: &str) -> Result<PlacementSpec, String> {
        let ns = self.name_server(url)?;
        let id = session_id_from_url(url).ok_or_else(|| format!("bad session url {url}"))?;
        ns.sessions().optimize(id).map_err(|e| e.to_string())
    }

    fn deploy(&self, url: &str) -> Result<DeployReply, String> {
        let ns = self.name_server(url)?;
        let id = session_id_from_url(url).ok_or_else(|| format!("bad session url {url}"))?;
        ns.sessions().deploy(id).map_err(|e| e.to_string())
    }

    fn teardown(&self, url: &str) -> Result<(), String> {
        let ns = self.name_server(url)?;
        let id = session_id_from_url(url).ok_or_else(|| format!("bad session url {url}"))?;
        ns.sessions().teardown(id);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scenario model
// ---------------------------------------------------------------------------

pub const SCENARIO_SCHEMA: &str = "ual-scenario/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub servers: Vec<NameServerConfig>,
    #[serde(default)]
    pub delegations: Vec<DelegationDecl>,
    #[serde(default)]
    pub agents: Vec<AgentDecl>,
    #[serde(default)]
    pub facts: Option<FactsDecl>,
    #[serde(default)]
    pub relays: Vec<RelayDecl>,
    pub workload: Vec<WorkItem>,
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelegationDecl {
    pub parent: String,
    pub nid: String,
    pub zone: Vec<String>,
    pub child: String,
    pub kind: DelegationKind,
    pub ttl_seconds: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentDecl {
    pub server: String,
    pub record: AgentDeploymentRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactsDecl {
    pub url: String,
    pub cards: Vec<AgentFactsCard>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelayDecl {
    pub url: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkItem {
    pub at_ms: u64,
    #[serde(flatten)]
    pub op: WorkOp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum WorkOp {
    /// One or more identical resolutions; each repeat is its own call.
    Resolve {
        name: String,
        #[serde(default)]
        context: Context,
        #[serde(default)]
        accept_negotiation: bool,
        #[serde(default)]
        negotiation_context: Option<Context>,
        #[serde(default)]
        demands: Option<ContextRequirements>,
        #[serde(default)]
        requester_name: Option<String>,
        #[serde(default = "one")]
        repeat: u32,
    },
    /// Push monitored endpoint status into an authoritative server.
    UpdateStatus { server: String, agent: String, endpoint: String, load: f64, healthy: bool },
    /// (Re-)record an agent deployment, e.g. after the agent moved.
    RecordAgent { server: String, record: AgentDeploymentRecord },
    /// Agents dial out to the endpoint a previous call resolved.
    ConnectOutbound { call: u32, agents: Vec<String> },
    /// Look a card up in the scenario's facts registry (discovery step).
    LookupFacts { name: String },
    /// Drop every cached referral and answer in the shared resolver.
    FlushResolverCache,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Assertion {
    /// Call answered with exactly this endpoint URL.
    EndpointIs { call: u32, url: String },
    /// Call answered and the endpoint URL contains the needle.
    EndpointContains { call: u32, needle: String },
    /// Call issued exactly this many upstream queries.
    QueriesEq { call: u32, count: u32 },
    /// Whether the call was served from the resolver cache.
    Cached { call: u32, cached: bool },
    /// The listed calls all resolved to one endpoint.
    SameEndpoint { calls: Vec<u32> },
    /// The listed calls resolved to pairwise distinct endpoints.
    DistinctEndpoints { calls: Vec<u32> },
    /// max/min selection-count ratio over the endpoint histogram.
    SpreadRatioMax { value: f64 },
    /// Exact selection count for one endpoint (0 asserts exclusion).
    SelectionCount { url: String, count: u64 },
    /// The call's negotiated placement put every component on one resource.
    Colocated { call: u32 },
    /// The relay saw exactly these outbound connections, in order.
    RelayConnections { relay: String, agents: Vec<String> },
    /// The call failed with an error containing this fragment.
    ErrorContains { call: u32, needle: String },
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub calls: Vec<CallReport>,
    pub endpoint_histogram: BTreeMap<String, u64>,
    pub assertions: Vec<AssertionReport>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CallReport {
    pub index: u32,
    pub at_ms: u64,
    pub name: String,
    #[serde(flatten)]
    pub outcome: CallOutcome,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum CallOutcome {
    Answered {
        endpoint_url: String,
        upstream_queries: u32,
        cached: bool,
        negotiated: bool,
        negotiation_rounds: u32,
        #[serde(skip_serializing_if = "Option::is_none")]
        placement: Option<PlacementSpec>,
    },
    Failed { error: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct AssertionReport {
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

/// Histogram summary used by the load-spread criterion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadSpread {
    pub max_load: u64,
    pub min_load: u64,
    pub ratio: f64,
}

/// max/min selection counts over endpoints that were selected at least
/// once; a single endpoint trivially has ratio 1.
pub fn load_spread_report(report: &ScenarioReport) -> LoadSpread {
    let max = report.endpoint_histogram.values().copied().max().unwrap_or(0);
    let min = report.endpoint_histogram.values().copied().min().unwrap_or(0);
    let ratio = if min == 0 { f64::INFINITY } else { max as f64 / min as f64 };
    LoadSpread { max_load: max, min_load: min, ratio }
}

impl ScenarioReport {
    /// Canonical JSON (sorted keys); byte-identical across runs with the
    /// same seed.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        crate::canon::to_canonical_string(&value)
    }

    /// Human-readable summary, one line per call and assertion.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("scenario {} (seed {})\n", self.scenario, self.seed));
        for call in &self.calls {
            match &call.outcome {
                CallOutcome::Answered { endpoint_url, upstream_queries, cached, negotiated, .. } => {
                    out.push_str(&format!(
                        "  call {:>3} t={:>6}ms {} -> {} ({} queries{}{})\n",
                        call.index,
                        call.at_ms,
                        call.name,
                        endpoint_url,
                        upstream_queries,
                        if *cached { ", cached" } else { "" },
                        if *negotiated { ", negotiated" } else { "" },
                    ));
                }
                CallOutcome::Failed { error } => {
                    out.push_str(&format!(
                        "  call {:>3} t={:>6}ms {} -> ERROR {}\n",
                        call.index, call.at_ms, call.name, error
                    ));
                }
            }
        }
        if !self.endpoint_histogram.is_empty() {
            out.push_str("  endpoint selections:\n");
            for (url, count) in &self.endpoint_histogram {
                out.push_str(&format!("    {count:>5}  {url}\n"));
            }
        }
        for a in &self.assertions {
            out.push_str(&format!(
                "  [{}] {} {}\n",
                if a.passed { "PASS" } else { "FAIL" },
                a.description,
                if a.detail.is_empty() { String::new() } else { format!("({})", a.detail) }
            ));
        }
        out.push_str(&format!("  result: {}\n", if self.passed { "PASS" } else { "FAIL" }));
        out
    }
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

struct RunState {
    network: Arc<SimNetwork>,
    clock: Arc<MockClock>,
    resolver: Resolver,
    facts: Option<(String, Arc<FactsRegistry>)>,
}

/// Loads a scenario from JSON text.
pub fn parse_scenario(json: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario =
        serde_json::from_str(json).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    if scenario.schema != SCENARIO_SCHEMA {
        return Err(ScenarioError::Invalid(format!(
            "schema {:?}, expected {SCENARIO_SCHEMA:?}",
            scenario.schema
        )));
    }
    Ok(scenario)
}

fn validate(scenario: &Scenario) -> Result<(), ScenarioError> {
    let server_urls: Vec<&str> = scenario.servers.iter().map(|s| s.url.as_str()).collect();
    let mut total_calls: u64 = 0;
    for d in &scenario.delegations {
        if !server_urls.contains(&d.parent.as_str()) {
            return Err(ScenarioError::Invalid(format!("delegation parent {} unknown", d.parent)));
        }
    }
    for a in &scenario.agents {
        if !server_urls.contains(&a.server.as_str()) {
            return Err(ScenarioError::Invalid(format!("agent server {} unknown", a.server)));
        }
    }
    for item in &scenario.workload {
        match &item.op {
            WorkOp::Resolve { repeat, .. } => total_calls += u64::from(*repeat),
            WorkOp::UpdateStatus { server, .. } | WorkOp::RecordAgent { server, .. } => {
                if !server_urls.contains(&server.as_str()) {
                    return Err(ScenarioError::Invalid(format!("workload server {server} unknown")));
                }
            }
            WorkOp::ConnectOutbound { call, .. } => {
                if u64::from(*call) >= total_calls {
                    return Err(ScenarioError::Invalid(format!(
                        "connect_outbound references future call {call}"
                    )));
                }
            }
            WorkOp::LookupFacts { .. } => {
                if scenario.facts.is_none() {
                    return Err(ScenarioError::Invalid("lookup_facts without a facts registry".into()));
                }
            }
            WorkOp::FlushResolverCache => {}
        }
    }
    let call_refs = scenario.assertions.iter().flat_map(|a| match a {
        Assertion::EndpointIs { call, .. }
        | Assertion::EndpointContains { call, .. }
        | Assertion::QueriesEq { call, .. }
        | Assertion::Cached { call, .. }
        | Assertion::Colocated { call }
        | Assertion::ErrorContains { call, .. } => vec![*call],
        Assertion::SameEndpoint { calls } | Assertion::DistinctEndpoints { calls } => calls.clone(),
        _ => Vec::new(),
    });
    for call in call_refs {
        if u64::from(call) >= total_calls {
            return Err(ScenarioError::Invalid(format!("assertion references missing call {call}")));
        }
    }
    Ok(())
}

fn boot(scenario: &Scenario) -> Result<RunState, ScenarioError> {
    let clock = Arc::new(MockClock::new(0));
    let ids = Arc::new(IdSource::seeded(scenario.seed));
    let network = Arc::new(SimNetwork::new());

    let mut roots = BTreeMap::new();
    for config in &scenario.servers {
        if config.zone.is_empty() {
            roots.insert(config.nid.clone(), config.url.clone());
        }
        let server = NameServer::new(config.clone(), clock.clone(), ids.clone())
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        network.add_name_server(Arc::new(server));
    }

    for d in &scenario.delegations {
        let labels: Vec<&str> = d.zone.iter().map(String::as_str).collect();
        let zone = ZonePath::new(&d.nid, &labels).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let parent = network
            .name_server(&d.parent)
            .map_err(ScenarioError::Invalid)?;
        parent
            .register_zone(zone, &d.child, d.kind, d.ttl_seconds, parent.config().registration_secret.as_deref())
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    }

    for a in &scenario.agents {
        let server = network.name_server(&a.server).map_err(ScenarioError::Invalid)?;
        server
            .record_agent(a.record.clone(), server.config().registration_secret.as_deref())
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    }

    let facts = match &scenario.facts {
        Some(decl) => {
            let registry = Arc::new(FactsRegistry::new(clock.clone()));
            for card in &decl.cards {
                registry
                    .publish_facts(card.clone())
                    .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            }
            network.add_facts_registry(&decl.url, registry.clone());
            Some((decl.url.clone(), registry))
        }
        None => None,
    };

    for relay in &scenario.relays {
        network.add_relay(Arc::new(RelayStub::new(&relay.url)));
    }

    let resolver = Resolver::new(
        ResolverConfig { roots, ..ResolverConfig::default() },
        network.clone(),
        clock.clone(),
        ids,
    );

    Ok(RunState { network, clock, resolver, facts })
}

/// Runs a scenario to completion and evaluates its assertions. Assertion
/// failures land in the report; only an unrunnable scenario is an error.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioReport, ScenarioError> {
    validate(scenario)?;
    let state = boot(scenario)?;

    let mut calls: Vec<CallReport> = Vec::new();
    let mut histogram: BTreeMap<String, u64> = BTreeMap::new();

    for item in &scenario.workload {
        if item.at_ms > state.clock.now_ms() {
            state.clock.set_ms(item.at_ms);
        }
        match &item.op {
            WorkOp::Resolve {
                name,
                context,
                accept_negotiation,
                negotiation_context,
                demands,
                requester_name,
                repeat,
            } => {
                let opts = ResolveOptions {
                    accept_negotiation: *accept_negotiation,
                    requester_demands: demands.clone().unwrap_or_default(),
                    negotiation_context: negotiation_context.clone(),
                    requester_name: requester_name.clone(),
                };
                for _ in 0..*repeat {
                    let index = calls.len() as u32;
                    let outcome = match state.resolver.resolve_with(name, context, &opts) {
                        Ok(out) => {
                            *histogram.entry(out.response.endpoint_url.clone()).or_default() += 1;
                            CallOutcome::Answered {
                                endpoint_url: out.response.endpoint_url,
                                upstream_queries: out.upstream_queries,
                                cached: out.served_from_cache,
                                negotiated: out.placement.is_some(),
                                negotiation_rounds: out.negotiation_rounds,
                                placement: out.placement,
                            }
                        }
                        Err(e) => CallOutcome::Failed { error: e.to_string() },
                    };
                    calls.push(CallReport {
                        index,
                        at_ms: state.clock.now_ms(),
                        name: name.clone(),
                        outcome,
                    });
                }
            }
            WorkOp::UpdateStatus { server, agent, endpoint, load, healthy } => {
                let ns = state.network.name_server(server).map_err(ScenarioError::Invalid)?;
                ns.update_status(agent, endpoint, *load, *healthy)
                    .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            }
            WorkOp::RecordAgent { server, record } => {
                let ns = state.network.name_server(server).map_err(ScenarioError::Invalid)?;
                ns.record_agent(record.clone(), ns.config().registration_secret.as_deref())
                    .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            }
            WorkOp::ConnectOutbound { call, agents } => {
                let endpoint = answered_endpoint(&calls, *call).ok_or_else(|| {
                    ScenarioError::Invalid(format!("connect_outbound: call {call} was not answered"))
                })?;
                for agent in agents {
                    state
                        .network
                        .connect_outbound(&endpoint, agent)
                        .map_err(ScenarioError::Invalid)?;
                }
            }
            WorkOp::LookupFacts { name } => {
                let (_, registry) =
                    state.facts.as_ref().expect("validated: facts registry present");
                registry
                    .get_facts(name)
                    .map_err(|e| ScenarioError::Invalid(format!("lookup_facts: {e}")))?;
            }
            WorkOp::FlushResolverCache => state.resolver.flush_cache(),
        }
    }

    let mut reports = Vec::new();
    for assertion in &scenario.assertions {
        reports.push(evaluate(assertion, &calls, &histogram, &state));
    }
    let passed = reports.iter().all(|r| r.passed);

    Ok(ScenarioReport {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        calls,
        endpoint_histogram: histogram,
        assertions: reports,
        passed,
    })
}

fn answered_endpoint(calls: &[CallReport], index: u32) -> Option<String> {
    calls.get(index as usize).and_then(|c| match &c.outcome {
        CallOutcome::Answered { endpoint_url, .. } => Some(endpoint_url.clone()),
        CallOutcome::Failed { .. } => None,
    })
}

fn evaluate(
    assertion: &Assertion,
    calls: &[CallReport],
    histogram: &BTreeMap<String, u64>,
    state: &RunState,
) -> AssertionReport {
    let (description, passed, detail) = match assertion {
        Assertion::EndpointIs { call, url } => {
            let got = answered_endpoint(calls, *call);
            (
                format!("call {call} endpoint is {url}"),
                got.as_deref() == Some(url.as_str()),
                format!("got {got:?}"),
            )
        }
        Assertion::EndpointContains { call, needle } => {
            let got = answered_endpoint(calls, *call);
            (
                format!("call {call} endpoint contains {needle:?}"),
                got.as_deref().map(|u| u.contains(needle)).unwrap_or(false),
                format!("got {got:?}"),
            )
        }
        Assertion::QueriesEq { call, count } => {
            let got = calls.get(*call as usize).and_then(|c| match &c.outcome {
                CallOutcome::Answered { upstream_queries, .. } => Some(*upstream_queries),
                CallOutcome::Failed { .. } => None,
            });
            (format!("call {call} used {count} queries"), got == Some(*count), format!("got {got:?}"))
        }
        Assertion::Cached { call, cached } => {
            let got = calls.get(*call as usize).and_then(|c| match &c.outcome {
                CallOutcome::Answered { cached, .. } => Some(*cached),
                CallOutcome::Failed { .. } => None,
            });
            (format!("call {call} cached={cached}"), got == Some(*cached), format!("got {got:?}"))
        }
        Assertion::SameEndpoint { calls: list } => {
            let endpoints: Vec<Option<String>> =
                list.iter().map(|c| answered_endpoint(calls, *c)).collect();
            let ok = endpoints.iter().all(|e| e.is_some() && *e == endpoints[0]);
            (format!("calls {list:?} share one endpoint"), ok, format!("got {endpoints:?}"))
        }
        Assertion::DistinctEndpoints { calls: list } => {
            let endpoints: Vec<Option<String>> =
                list.iter().map(|c| answered_endpoint(calls, *c)).collect();
            let mut unique: Vec<&Option<String>> = endpoints.iter().collect();
            unique.sort();
            unique.dedup();
            let ok = endpoints.iter().all(Option::is_some) && unique.len() == endpoints.len();
            (format!("calls {list:?} have distinct endpoints"), ok, format!("got {endpoints:?}"))
        }
        Assertion::SpreadRatioMax { value } => {
            let max = histogram.values().copied().max().unwrap_or(0);
            let min = histogram.values().copied().min().unwrap_or(0);
            let ratio = if min == 0 { f64::INFINITY } else { max as f64 / min as f64 };
            (
                format!("selection spread ratio <= {value}"),
                !histogram.is_empty() && ratio <= *value,
                format!("max {max} min {min} ratio {ratio:.4}"),
            )
        }
        Assertion::SelectionCount { url, count } => {
            let got = histogram.get(url).copied().unwrap_or(0);
            (format!("{url} selected {count} times"), got == *count, format!("got {got}"))
        }
        Assertion::Colocated { call } => {
            let placement = calls.get(*call as usize).and_then(|c| match &c.outcome {
                CallOutcome::Answered { placement, .. } => placement.as_ref(),
                CallOutcome::Failed { .. } => None,
            });
            let ok = placement
                .map(|p| {
                    let mut rids: Vec<&String> = p.assignment.values().collect();
                    rids.sort();
                    rids.dedup();
                    rids.len() == 1
                })
                .unwrap_or(false);
            (
                format!("call {call} placement is colocated"),
                ok,
                format!("assignment {:?}", placement.map(|p| &p.assignment)),
            )
        }
        Assertion::RelayConnections { relay, agents } => {
            let got = state.network.relay(relay).map(|r| r.connections());
            (
                format!("relay {relay} saw connections {agents:?}"),
                got.as_deref() == Some(agents.as_slice()),
                format!("got {got:?}"),
            )
        }
        Assertion::ErrorContains { call, needle } => {
            let got = calls.get(*call as usize).and_then(|c| match &c.outcome {
                CallOutcome::Failed { error } => Some(error.clone()),
                CallOutcome::Answered { .. } => None,
            });
            (
                format!("call {call} fails with {needle:?}"),
                got.as_deref().map(|e| e.contains(needle)).unwrap_or(false),
                format!("got {got:?}"),
            )
        }
    };
    AssertionReport { description, passed, detail }
}
