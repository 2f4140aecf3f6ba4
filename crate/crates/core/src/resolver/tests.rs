use std::sync::atomic::{AtomicU32, Ordering};

use super::*;
use crate::adaptive::{DeployReply, NegotiateOffer, NegotiateReply, Resource, ResourceKind, SessionTransport};
use crate::clock::MockClock;
use crate::context::{Geo, GeoPoint};
use crate::nameserver::{
    AgentDeploymentRecord, DelegationKind, EndpointCandidate, NameServer, NameServerConfig,
};
use crate::name::ZonePath;
use crate::sim::SimNetwork;
use crate::tailor::Policy;

const NID: &str = "nanda.mit.edu";
const ROBOT: &str = "ual:nanda.mit.edu:lab15:robot42";
const ROOT_URL: &str = "https://nanda.mit.edu";
const MID_URL: &str = "https://lab15.ns.example";
const AUTH_URL: &str = "https://auth.lab15.ns.example";

/// Counts upstream resolve calls independently of the resolver's own
/// bookkeeping.
struct CountingTransport {
    inner: Arc<SimNetwork>,
    resolves: AtomicU32,
}

impl CountingTransport {
    fn count(&self) -> u32 {
        self.resolves.load(Ordering::SeqCst)
    }
}

impl crate::transport::QueryTransport for CountingTransport {
    fn resolve(
        &self,
        server_url: &str,
        query: &ResolverQuery,
    ) -> Result<crate::nameserver::ResolverAnswer, crate::transport::TransportError> {
        self.resolves.fetch_add(1, Ordering::SeqCst);
        self.inner.resolve(server_url, query)
    }
}

impl SessionTransport for CountingTransport {
    fn negotiate(&self, url: &str, offer: &NegotiateOffer) -> Result<NegotiateReply, String> {
        self.inner.negotiate(url, offer)
    }
    fn optimize(&self, url: &str) -> Result<crate::adaptive::PlacementSpec, String> {
        self.inner.optimize(url)
    }
    fn deploy(&self, url: &str) -> Result<DeployReply, String> {
        self.inner.deploy(url)
    }
    fn teardown(&self, url: &str) -> Result<(), String> {
        self.inner.teardown(url)
    }
}

struct Fixture {
    resolver: Resolver,
    transport: Arc<CountingTransport>,
    clock: Arc<MockClock>,
    network: Arc<SimNetwork>,
}

fn server_config(zone: &[&str], url: &str) -> NameServerConfig {
    NameServerConfig {
        nid: NID.into(),
        zone: zone.iter().map(|s| s.to_string()).collect(),
        url: url.into(),
        referral_ttl_s: 300,
        tailored_ttl_s: 30,
        registration_secret: None,
        session_timeout_s: 300,
        resources: Vec::new(),
    }
}

fn endpoint(url: &str, lat: f64, lon: f64) -> EndpointCandidate {
    EndpointCandidate {
        url: url.into(),
        geo: GeoPoint { lat, lon },
        capacity_ops_per_s: 100.0,
        current_load: 0.2,
        cost_units_per_op: 1.0,
        healthy: true,
    }
}

fn robot_record() -> AgentDeploymentRecord {
    AgentDeploymentRecord {
        agent_name: crate::name::AgentName::parse(ROBOT).unwrap(),
        endpoints: vec![
            endpoint("https://bos.endpoints.example", 42.36, -71.06),
            endpoint("https://fra.endpoints.example", 50.11, 8.68),
        ],
        context_fields_needed: vec!["geo.lat".into(), "geo.lon".into()],
        policy: Policy::GeoNearest,
        weights: None,
        negotiation_required: false,
        target_context: None,
        role_endpoints: None,
    }
}

/// Root delegates lab15 to the intermediate, which delegates the leaf zone
/// to the authoritative holding the robot record.
fn three_level_fixture() -> Fixture {
    let clock = Arc::new(MockClock::new(0));
    let ids = Arc::new(IdSource::seeded(7));
    let network = Arc::new(SimNetwork::new());

    let root = Arc::new(NameServer::new(server_config(&[], ROOT_URL), clock.clone(), ids.clone()).unwrap());
    let mid = Arc::new(NameServer::new(server_config(&["lab15"], MID_URL), clock.clone(), ids.clone()).unwrap());
    let mut auth_config = server_config(&["lab15", "robot42"], AUTH_URL);
    auth_config.resources = vec![Resource {
        resource_id: "dc-bos.example".into(),
        owner: "acme".into(),
        geo: GeoPoint { lat: 42.36, lon: -71.06 },
        kind: ResourceKind::Datacenter,
        capacity_units: 8.0,
        cost_per_unit: 1.0,
        link_latency_ms: std::collections::BTreeMap::new(),
    }];
    let auth = Arc::new(NameServer::new(auth_config, clock.clone(), ids.clone()).unwrap());

    root.register_zone(
        ZonePath::new(NID, &["lab15"]).unwrap(),
        MID_URL,
        DelegationKind::Delegation,
        300,
        None,
    )
    .unwrap();
    mid.register_zone(
        ZonePath::new(NID, &["lab15", "robot42"]).unwrap(),
        AUTH_URL,
        DelegationKind::AuthoritativeDelegation,
        300,
        None,
    )
    .unwrap();
    auth.record_agent(robot_record(), None).unwrap();

    network.add_name_server(root);
    network.add_name_server(mid);
    network.add_name_server(auth);

    let transport = Arc::new(CountingTransport { inner: network.clone(), resolves: AtomicU32::new(0) });
    let roots = [(NID.to_string(), ROOT_URL.to_string())].into_iter().collect();
    let resolver = Resolver::new(
        ResolverConfig { roots, ..ResolverConfig::default() },
        transport.clone(),
        clock.clone(),
        ids,
    );
    Fixture { resolver, transport, clock, network }
}

fn boston_ctx() -> Context {
    Context {
        geo: Some(Geo { lat: 42.36, lon: -71.06, city: Some("Boston".into()) }),
        ..Context::default()
    }
}

fn frankfurt_ctx() -> Context {
    Context {
        geo: Some(Geo { lat: 50.11, lon: 8.68, city: Some("Frankfurt".into()) }),
        ..Context::default()
    }
}

#[test]
fn cold_cache_walks_all_three_levels() {
    let f = three_level_fixture();
    let out = f.resolver.resolve(ROBOT, &boston_ctx()).unwrap();
    assert_eq!(out.upstream_queries, 3);
    assert_eq!(f.transport.count(), 3);
    assert_eq!(out.chain, vec![ROOT_URL.to_string(), MID_URL.to_string(), AUTH_URL.to_string()]);
    assert_eq!(out.response.endpoint_url, "https://bos.endpoints.example");
    assert!(!out.served_from_cache);
}

#[test]
fn identical_context_reuses_the_cached_answer() {
    let f = three_level_fixture();
    let first = f.resolver.resolve(ROBOT, &boston_ctx()).unwrap();
    let second = f.resolver.resolve(ROBOT, &boston_ctx()).unwrap();
    assert_eq!(second.upstream_queries, 0);
    assert!(second.served_from_cache);
    assert_eq!(second.response, first.response);
    assert_eq!(f.transport.count(), 3, "no extra upstream traffic");
}

#[test]
fn equal_fingerprint_different_uncovered_fields_still_reuses() {
    let f = three_level_fixture();
    f.resolver.resolve(ROBOT, &boston_ctx()).unwrap();
    // Covered fields are geo.lat/geo.lon; changing extra data must not
    // force a fresh query.
    let mut ctx = boston_ctx();
    ctx.extra.insert("shift".into(), "night".into());
    ctx.geo.as_mut().unwrap().city = Some("Cambridge".into());
    let out = f.resolver.resolve(ROBOT, &ctx).unwrap();
    assert!(out.served_from_cache);
    assert_eq!(out.upstream_queries, 0);
}

#[test]
fn changed_covered_field_goes_back_upstream_once() {
    let f = three_level_fixture();
    f.resolver.resolve(ROBOT, &boston_ctx()).unwrap();
    let out = f.resolver.resolve(ROBOT, &frankfurt_ctx()).unwrap();
    // Referrals are warm, fingerprint differs: exactly one authoritative query.
    assert_eq!(out.upstream_queries, 1);
    assert_eq!(out.chain, vec![AUTH_URL.to_string()]);
    assert_eq!(out.response.endpoint_url, "https://fra.endpoints.example");
    assert_eq!(f.transport.count(), 4);
}

#[test]
fn expired_tailored_answer_is_never_served() {
    let f = three_level_fixture();
    f.resolver.resolve(ROBOT, &boston_ctx()).unwrap();
    f.clock.advance_ms(30_000); // exactly the tailored ttl
    let out = f.resolver.resolve(ROBOT, &boston_ctx()).unwrap();
    assert!(!out.served_from_cache);
    assert_eq!(out.upstream_queries, 1, "referrals still warm, answer refetched");
}

#[test]
fn expired_referrals_force_a_full_walk() {
    let f = three_level_fixture();
    f.resolver.resolve(ROBOT, &boston_ctx()).unwrap();
    f.clock.advance_ms(301_000); // past the 300 s referral ttl
    let out = f.resolver.resolve(ROBOT, &boston_ctx()).unwrap();
    assert_eq!(out.upstream_queries, 3);
}

#[test]
fn cold_and_warm_answers_agree_with_frozen_state() {
    let f = three_level_fixture();
    let cold = f.resolver.resolve(ROBOT, &boston_ctx()).unwrap();
    let warm = f.resolver.resolve(ROBOT, &boston_ctx()).unwrap();
    assert_eq!(cold.response, warm.response);
}

#[test]
fn unknown_name_is_negatively_cached() {
    let f = three_level_fixture();
    let ghost = "ual:nanda.mit.edu:lab15:ghost";
    assert!(matches!(f.resolver.resolve(ghost, &boston_ctx()), Err(ResolveError::NameNotFound)));
    let after_first = f.transport.count();
    assert!(matches!(f.resolver.resolve(ghost, &boston_ctx()), Err(ResolveError::NameNotFound)));
    assert_eq!(f.transport.count(), after_first, "second miss served from negative cache");

    f.clock.advance_ms(NEGATIVE_TTL_S * 1_000);
    assert!(matches!(f.resolver.resolve(ghost, &boston_ctx()), Err(ResolveError::NameNotFound)));
    assert!(f.transport.count() > after_first, "negative entry expired");
}

#[test]
fn malformed_names_fail_before_any_query() {
    let f = three_level_fixture();
    assert!(matches!(f.resolver.resolve("not a name", &Context::default()), Err(ResolveError::Malformed(_))));
    assert_eq!(f.transport.count(), 0);
}

#[test]
fn referral_cycle_is_detected() {
    let clock = Arc::new(MockClock::new(0));
    let ids = Arc::new(IdSource::seeded(7));
    let network = Arc::new(SimNetwork::new());

    let root = Arc::new(NameServer::new(server_config(&[], ROOT_URL), clock.clone(), ids.clone()).unwrap());
    let mid = Arc::new(NameServer::new(server_config(&["lab15"], MID_URL), clock.clone(), ids.clone()).unwrap());
    root.register_zone(ZonePath::new(NID, &["lab15"]).unwrap(), MID_URL, DelegationKind::Delegation, 300, None)
        .unwrap();
    // Cycle: the intermediate claims the leaf zone is back at the root.
    mid.register_zone(
        ZonePath::new(NID, &["lab15", "robot42"]).unwrap(),
        ROOT_URL,
        DelegationKind::Delegation,
        300,
        None,
    )
    .unwrap();
    network.add_name_server(root);
    network.add_name_server(mid);

    let roots = [(NID.to_string(), ROOT_URL.to_string())].into_iter().collect();
    let resolver = Resolver::new(
        ResolverConfig { roots, ..ResolverConfig::default() },
        network,
        clock,
        ids,
    );
    match resolver.resolve(ROBOT, &boston_ctx()) {
        Err(ResolveError::ResolutionLoop(url)) => assert_eq!(url, ROOT_URL),
        other => panic!("expected resolution loop, got {other:?}"),
    }
}

#[test]
fn depth_limit_caps_long_chains() {
    let f = three_level_fixture();
    let roots = [(NID.to_string(), ROOT_URL.to_string())].into_iter().collect();
    let shallow = Resolver::new(
        ResolverConfig { max_depth: 2, roots, ..ResolverConfig::default() },
        f.transport.clone(),
        f.clock.clone(),
        Arc::new(IdSource::seeded(9)),
    );
    assert!(matches!(shallow.resolve(ROBOT, &boston_ctx()), Err(ResolveError::DepthExceeded)));
}

#[test]
fn unreachable_root_reports_unreachable() {
    let f = three_level_fixture();
    let roots = [(NID.to_string(), "https://blackhole.example".to_string())].into_iter().collect();
    let resolver = Resolver::new(
        ResolverConfig { roots, ..ResolverConfig::default() },
        f.transport.clone(),
        f.clock.clone(),
        Arc::new(IdSource::seeded(9)),
    );
    assert!(matches!(resolver.resolve(ROBOT, &boston_ctx()), Err(ResolveError::Unreachable(_))));
}

#[test]
fn derives_root_url_when_no_override_exists() {
    let f = three_level_fixture();
    // nid == root host in this fixture, so dropping the override still works.
    let resolver = Resolver::new(
        ResolverConfig::default(),
        f.transport.clone(),
        f.clock.clone(),
        Arc::new(IdSource::seeded(9)),
    );
    let out = resolver.resolve(ROBOT, &boston_ctx()).unwrap();
    assert_eq!(out.chain[0], ROOT_URL);
}

#[test]
fn invitation_without_acceptance_is_declined() {
    let f = three_level_fixture();
    let auth = f.network.name_server(AUTH_URL).unwrap();
    let mut record = robot_record();
    record.negotiation_required = true;
    auth.record_agent(record, None).unwrap();

    assert!(matches!(
        f.resolver.resolve(ROBOT, &boston_ctx()),
        Err(ResolveError::NegotiationDeclined)
    ));
}

#[test]
fn invitation_with_acceptance_runs_the_handshake() {
    let f = three_level_fixture();
    let auth = f.network.name_server(AUTH_URL).unwrap();
    let mut record = robot_record();
    record.context_fields_needed.push("geo.city".into());
    auth.record_agent(record, None).unwrap();

    // Query context lacks the city; the negotiation context supplies it.
    let mut query_ctx = boston_ctx();
    query_ctx.geo.as_mut().unwrap().city = None;
    let opts = ResolveOptions {
        accept_negotiation: true,
        negotiation_context: Some(boston_ctx()),
        requester_name: Some("ual:nanda.mit.edu:lab15:courier7".into()),
        ..ResolveOptions::default()
    };
    let out = f.resolver.resolve_with(ROBOT, &query_ctx, &opts).unwrap();

    assert_eq!(out.negotiation_rounds, 1);
    assert!(out.placement.is_some());
    let endpoints = out.channel_endpoints.unwrap();
    assert_eq!(endpoints.len(), 2);
    assert_eq!(out.response.endpoint_url, endpoints["ual:nanda.mit.edu:lab15:courier7"]);
    assert!(out.response.endpoint_url.contains("dc-bos.example"));
}

#[test]
fn negotiated_answers_cache_like_tailored_ones() {
    let f = three_level_fixture();
    let auth = f.network.name_server(AUTH_URL).unwrap();
    let mut record = robot_record();
    record.negotiation_required = true;
    auth.record_agent(record, None).unwrap();

    let opts = ResolveOptions { accept_negotiation: true, ..ResolveOptions::default() };
    let first = f.resolver.resolve_with(ROBOT, &boston_ctx(), &opts).unwrap();
    assert!(!first.served_from_cache);
    let second = f.resolver.resolve_with(ROBOT, &boston_ctx(), &opts).unwrap();
    assert!(second.served_from_cache);
    assert_eq!(second.response.endpoint_url, first.response.endpoint_url);
    assert_eq!(second.upstream_queries, 0);
}
