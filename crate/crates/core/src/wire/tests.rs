use std::collections::BTreeMap;
use std::path::PathBuf;

use super::*;
use crate::adaptive::{
    ComponentVar, Constraint, NegotiationInvitation, Objective,
};
use crate::context::{
    fingerprint, Context, ContextRequirements, CostCeiling, Geo, GeoPoint, Predicate, Qos,
    RequirementValue, Restriction, Usage, UsagePattern,
};
use crate::name::AgentName;
use crate::nameserver::{EndpointCandidate, Referral, TailoredResponse};
use crate::tailor::{Policy, Weights};
use crate::transport::ErrorCode;
use uuid::Uuid;

const GOLDEN_TS: &str = "2025-11-14T12:00:00.000Z";

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("testdata").join("wire")
}

fn sample_uuid() -> Uuid {
    Uuid::parse_str("1f2e3d4c-5b6a-4798-8091-a2b3c4d5e6f7").unwrap()
}

fn sample_context() -> Context {
    Context {
        geo: Some(Geo { lat: 42.36, lon: -71.06, city: Some("Boston".into()) }),
        topology_cidr: Some("18.1.2.0/24".into()),
        qos: Some(Qos { max_latency_ms: 80.0, min_throughput_mbps: 25.0 }),
        usage: Some(Usage {
            pattern: UsagePattern::RequestResponse,
            est_bytes_per_op: 2048.0,
            ops_per_minute: 120.0,
        }),
        cost: Some(CostCeiling { max_cost_units: 10.0 }),
        extra: [("role".to_string(), "conductor".to_string())].into_iter().collect(),
    }
}

fn sample_requirements() -> ContextRequirements {
    ContextRequirements {
        required_fields: ["geo.city".to_string(), "topology_cidr".to_string()].into_iter().collect(),
        restrictions: vec![Restriction {
            field: "topology_cidr".into(),
            predicate: Predicate::WithinCidr,
            value: RequirementValue::Str("18.0.0.0/8".into()),
        }],
    }
}

fn sample_record() -> AgentDeploymentRecord {
    AgentDeploymentRecord {
        agent_name: AgentName::parse("ual:nanda.mit.edu:lab15:robot42").unwrap(),
        endpoints: vec![EndpointCandidate {
            url: "https://bos.endpoints.example".into(),
            geo: GeoPoint { lat: 42.36, lon: -71.06 },
            capacity_ops_per_s: 500.0,
            current_load: 0.25,
            cost_units_per_op: 0.8,
            healthy: true,
        }],
        context_fields_needed: vec!["geo.lat".into(), "geo.lon".into()],
        policy: Policy::Weighted,
        weights: Some(Weights { w_dist: 0.5, w_load: 0.3, w_cost: 0.2 }),
        negotiation_required: false,
        target_context: Some(Context {
            qos: Some(Qos { max_latency_ms: 60.0, min_throughput_mbps: 50.0 }),
            ..Context::default()
        }),
        role_endpoints: Some(
            [("conductor".to_string(), "https://conductor.group.example".to_string())]
                .into_iter()
                .collect(),
        ),
    }
}

fn sample_comms_spec() -> CommsSpec {
    CommsSpec {
        session_id: sample_uuid(),
        participants: vec!["ual:nanda.mit.edu:lab15:courier7".into(), "ual:nanda.mit.edu:lab15:robot42".into()],
        variables: vec![
            ComponentVar {
                component_id: "comms:ual:nanda.mit.edu:lab15:courier7".into(),
                candidate_resource_ids: vec!["dc-bos.example".into(), "edge-cam.example".into()],
            },
            ComponentVar {
                component_id: "comms:ual:nanda.mit.edu:lab15:robot42".into(),
                candidate_resource_ids: vec!["dc-bos.example".into(), "edge-cam.example".into()],
            },
        ],
        constraints: vec![
            Constraint::MaxLatencyMs { value: 60.0 },
            Constraint::MaxTotalCost { value: 10.0 },
            Constraint::Colocate {
                components: vec![
                    "comms:ual:nanda.mit.edu:lab15:courier7".into(),
                    "comms:ual:nanda.mit.edu:lab15:robot42".into(),
                ],
            },
        ],
        objective: Objective::default(),
    }
}

fn sample_placement() -> PlacementSpec {
    PlacementSpec {
        session_id: sample_uuid(),
        assignment: [
            ("comms:ual:nanda.mit.edu:lab15:courier7".to_string(), "dc-bos.example".to_string()),
            ("comms:ual:nanda.mit.edu:lab15:robot42".to_string(), "dc-bos.example".to_string()),
        ]
        .into_iter()
        .collect(),
        expected_cost: 1.6,
        expected_latency_ms: 0.0,
        endpoints: BTreeMap::new(),
    }
}

fn sample_deploy_reply() -> DeployReply {
    let mut placement = sample_placement();
    let sid = sample_uuid().simple().to_string();
    let endpoints: BTreeMap<String, String> = [
        (
            "ual:nanda.mit.edu:lab15:courier7".to_string(),
            format!("https://dc-bos.example/ch/{sid}/courier7"),
        ),
        (
            "ual:nanda.mit.edu:lab15:robot42".to_string(),
            format!("https://dc-bos.example/ch/{sid}/robot42"),
        ),
    ]
    .into_iter()
    .collect();
    placement.endpoints = endpoints.clone();
    DeployReply {
        endpoints,
        placement,
        ttl_seconds: 30,
        fingerprint: fingerprint(&sample_context(), &["geo.lat".to_string(), "geo.lon".to_string()]),
        policy_used: Policy::Weighted,
    }
}

/// Every message kind with a deterministic sample, used for round-trip
/// tests and to regenerate the committed golden files.
pub(crate) fn sample_messages() -> Vec<(&'static str, Message)> {
    vec![
        (
            "resolver_query",
            Message::ResolverQuery(ResolverQuery {
                query_id: sample_uuid(),
                name: "ual:nanda.mit.edu:lab15:robot42".into(),
                context: sample_context(),
                accept_negotiation: true,
            }),
        ),
        (
            "resolver_answer_referral",
            Message::ResolverAnswer(ResolverAnswer::Referral(Referral {
                zone: crate::name::ZonePath::new("nanda.mit.edu", &["lab15"]).unwrap(),
                next_server_url: "https://lab15.ns.example".into(),
                ttl_seconds: 300,
            })),
        ),
        (
            "resolver_answer_tailored",
            Message::ResolverAnswer(ResolverAnswer::Tailored(TailoredResponse {
                endpoint_url: "https://bos.endpoints.example".into(),
                ttl_seconds: 30,
                fingerprint: fingerprint(
                    &sample_context(),
                    &["geo.lat".to_string(), "geo.lon".to_string()],
                ),
                policy_used: Policy::GeoNearest,
            })),
        ),
        (
            "resolver_answer_invitation",
            Message::ResolverAnswer(ResolverAnswer::NegotiationInvitation(NegotiationInvitation {
                session_id: sample_uuid(),
                missing_fields: vec!["geo.city".into()],
                target_demands: sample_requirements(),
                negotiation_url: format!(
                    "https://auth.lab15.ns.example/sessions/{}/negotiate",
                    sample_uuid()
                ),
            })),
        ),
        (
            "facts_card",
            Message::FactsCard(AgentFactsCard {
                agent_name: AgentName::parse("ual:nanda.mit.edu:lab15:robot42").unwrap(),
                label: "Lab 15 gripper robot".into(),
                capabilities: vec!["robot".into(), "gripper".into()],
                context_requirements: sample_requirements(),
                ttl_seconds: 600,
                published_at: 1_763_121_600_000,
            }),
        ),
        (
            "zone_delegation",
            Message::ZoneDelegation(ZoneDelegation {
                zone: crate::name::ZonePath::new("nanda.mit.edu", &["lab15"]).unwrap(),
                child_server_url: "https://lab15.ns.example".into(),
                kind: DelegationKind::Delegation,
                ttl_seconds: 300,
            }),
        ),
        ("deployment_record", Message::DeploymentRecord(sample_record())),
        (
            "status_update",
            Message::StatusUpdate(StatusUpdate {
                agent_name: "ual:nanda.mit.edu:lab15:robot42".into(),
                endpoint_url: "https://bos.endpoints.example".into(),
                load: 0.42,
                healthy: true,
            }),
        ),
        (
            "negotiate_offer",
            Message::NegotiateOffer(NegotiateOffer {
                requester_name: Some("ual:nanda.mit.edu:lab15:courier7".into()),
                supplied: sample_context(),
                demands: ContextRequirements::require(&["qos.max_latency_ms"]),
                refused_fields: Vec::new(),
                accept: true,
            }),
        ),
        (
            "negotiate_reply_counter",
            Message::NegotiateReply(NegotiateReply::Counter {
                still_missing: vec!["topology_cidr".into()],
                still_violated: vec![0],
                target_supplied: Context {
                    qos: Some(Qos { max_latency_ms: 60.0, min_throughput_mbps: 50.0 }),
                    ..Context::default()
                },
                round: 1,
            }),
        ),
        (
            "negotiate_reply_agreed",
            Message::NegotiateReply(NegotiateReply::Agreed {
                comms_spec: sample_comms_spec(),
                target_supplied: Context::default(),
                rounds_used: 1,
            }),
        ),
        (
            "facts_list",
            Message::FactsList(FactsList {
                cards: vec![AgentFactsCard {
                    agent_name: AgentName::parse("ual:nanda.mit.edu:lab15:robot42").unwrap(),
                    label: "Lab 15 gripper robot".into(),
                    capabilities: vec!["robot".into()],
                    context_requirements: ContextRequirements::default(),
                    ttl_seconds: 600,
                    published_at: 1_763_121_600_000,
                }],
            }),
        ),
        ("comms_spec", Message::CommsSpec(sample_comms_spec())),
        ("placement_spec", Message::PlacementSpec(sample_placement())),
        ("deploy_reply", Message::DeployReply(sample_deploy_reply())),
        ("ack", Message::Ack(Ack::ok())),
        (
            "error",
            Message::Error(ServiceError::new(ErrorCode::NameNotFound, "name not found")),
        ),
    ]
}

#[test]
fn all_samples_round_trip_byte_identically() {
    for (name, message) in sample_messages() {
        let encoded = encode_with_ts(&message, GOLDEN_TS).unwrap();
        let (decoded, meta) = decode(encoded.as_bytes()).unwrap();
        assert_eq!(decoded, message, "{name}");
        assert_eq!(meta.ts, GOLDEN_TS);
        let re_encoded = encode_with_ts(&decoded, &meta.ts).unwrap();
        assert_eq!(re_encoded, encoded, "{name}");
    }
}

#[test]
fn encoding_is_canonical() {
    let (_, message) = &sample_messages()[0];
    let encoded = encode_with_ts(message, GOLDEN_TS).unwrap();
    let value: Value = serde_json::from_str(&encoded).unwrap();
    assert_eq!(encoded, crate::canon::to_canonical_string(&value));
    assert!(!encoded.contains(": "), "no insignificant whitespace");
}

#[test]
fn version_mismatch_is_a_distinct_error() {
    let encoded = encode_with_ts(&Message::Ack(Ack::ok()), GOLDEN_TS).unwrap();
    let bad = encoded.replace("ual/0.1", "ual/9.9");
    match decode(bad.as_bytes()) {
        Err(WireError::VersionMismatch { expected, got }) => {
            assert_eq!(expected, PROTOCOL_VERSION);
            assert_eq!(got, "ual/9.9");
        }
        other => panic!("expected version mismatch, got {other:?}"),
    }
}

#[test]
fn unknown_kind_is_rejected() {
    let encoded = encode_with_ts(&Message::Ack(Ack::ok()), GOLDEN_TS).unwrap();
    let bad = encoded.replace("\"ack\"", "\"teleport\"");
    assert!(matches!(decode(bad.as_bytes()), Err(WireError::UnknownKind(k)) if k == "teleport"));
}

#[test]
fn truncated_input_is_a_decode_error() {
    let encoded = encode_with_ts(&Message::Ack(Ack::ok()), GOLDEN_TS).unwrap();
    let truncated = &encoded.as_bytes()[..encoded.len() - 5];
    assert!(matches!(decode(truncated), Err(WireError::Decode(_))));
}

#[test]
fn missing_required_field_is_a_decode_error() {
    let json = format!(
        r#"{{"body":{{"context":{{}},"accept_negotiation":false,"query_id":"{}"}},"kind":"resolver_query","ts":"{GOLDEN_TS}","v":"ual/0.1"}}"#,
        sample_uuid()
    );
    assert!(matches!(decode(json.as_bytes()), Err(WireError::Decode(msg)) if msg.contains("name")));
}

#[test]
fn unknown_body_field_is_rejected_where_no_extra_exists() {
    let json = format!(
        r#"{{"body":{{"ok":true,"stray":1}},"kind":"ack","ts":"{GOLDEN_TS}","v":"ual/0.1"}}"#
    );
    assert!(matches!(decode(json.as_bytes()), Err(WireError::Decode(_))));
}

#[test]
fn unknown_context_keys_land_in_extra() {
    let json = format!(
        r#"{{"body":{{"accept_negotiation":false,"context":{{"datacenter_hint":"east"}},"name":"ual:x.example:a","query_id":"{}"}},"kind":"resolver_query","ts":"{GOLDEN_TS}","v":"ual/0.1"}}"#,
        sample_uuid()
    );
    let (message, _) = decode(json.as_bytes()).unwrap();
    match message {
        Message::ResolverQuery(q) => {
            assert_eq!(q.context.extra.get("datacenter_hint").map(String::as_str), Some("east"));
        }
        other => panic!("wrong message {other:?}"),
    }
}

#[test]
fn bad_timestamp_is_a_decode_error() {
    let json = r#"{"body":{"ok":true},"kind":"ack","ts":"yesterday","v":"ual/0.1"}"#;
    assert!(matches!(decode(json.as_bytes()), Err(WireError::Decode(msg)) if msg.contains("RFC 3339")));
}

#[test]
fn every_sample_kind_has_a_documented_table() {
    for (_, message) in sample_messages() {
        assert!(
            documented_body_keys(message.kind()).is_some(),
            "no field table for {}",
            message.kind()
        );
    }
    assert!(documented_body_keys("teleport").is_none());
}

/// Regenerates the committed golden corpus. Run explicitly:
/// `cargo test -p ual-core --lib wire -- --ignored regenerate`
#[test]
#[ignore]
fn regenerate_golden_files() {
    let dir = golden_dir();
    std::fs::create_dir_all(&dir).unwrap();
    for (name, message) in sample_messages() {
        let encoded = encode_with_ts(&message, GOLDEN_TS).unwrap();
        std::fs::write(dir.join(format!("{name}.json")), encoded).unwrap();
    }
}

#[test]
fn golden_files_decode_and_reencode_byte_identically() {
    let dir = golden_dir();
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).expect("golden dir exists; run regenerate_golden_files") {
        let path = entry.unwrap().path();
        if path.extension().map(|e| e != "json").unwrap_or(true) || path.is_dir() {
            continue;
        }
        let bytes = std::fs::read(&path).unwrap();
        let (message, meta) = decode(&bytes).unwrap_or_else(|e| panic!("{path:?}: {e}"));
        let re_encoded = encode_with_ts(&message, &meta.ts).unwrap();
        assert_eq!(re_encoded.as_bytes(), bytes.as_slice(), "{path:?}");
        seen += 1;
    }
    assert_eq!(seen, sample_messages().len(), "golden corpus incomplete");
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn context_strategy() -> impl Strategy<Value = Context> {
        (
            proptest::option::of((-90.0f64..90.0, -180.0f64..180.0)),
            proptest::option::of(1.0f64..1000.0),
            proptest::collection::btree_map("[a-z]{1,6}", "[a-z0-9]{1,8}", 0..3),
        )
            .prop_map(|(geo, latency, extra)| Context {
                geo: geo.map(|(lat, lon)| Geo { lat, lon, city: None }),
                topology_cidr: None,
                qos: latency.map(|l| Qos { max_latency_ms: l, min_throughput_mbps: 1.0 }),
                usage: None,
                cost: None,
                extra,
            })
    }

    proptest! {
        #[test]
        fn random_queries_round_trip(ctx in context_strategy(), accept in proptest::bool::ANY) {
            let message = Message::ResolverQuery(ResolverQuery {
                query_id: sample_uuid(),
                name: "ual:x.example:a:b".into(),
                context: ctx,
                accept_negotiation: accept,
            });
            let encoded = encode_with_ts(&message, GOLDEN_TS).unwrap();
            let (decoded, meta) = decode(encoded.as_bytes()).unwrap();
            prop_assert_eq!(&decoded, &message);
            prop_assert_eq!(encode_with_ts(&decoded, &meta.ts).unwrap(), encoded);
        }
    }
}
