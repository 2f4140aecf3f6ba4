//! Requester/target context metadata and requirement checking.
//!
//! A [`Context`] is the bundle of environment metadata a requester attaches
//! to a resolution query: geographic position, topological address (CIDR),
//! QoS needs, expected usage pattern, and a cost ceiling, plus a free-form
//! `extra` string map for anything outside the core schema. A target
//! publishes [`ContextRequirements`] over the same field space; whether a
//! context satisfies them decides if resolution can answer directly or must
//! invite negotiation.
//!
//! Field paths address individual leaves: `geo.lat`, `geo.city`,
//! `topology_cidr`, `qos.max_latency_ms`, `usage.pattern`,
//! `cost.max_cost_units`, `extra.<key>`.
//!
//! [`fingerprint`] condenses the covered slice of a context into a SHA-256
//! digest of its canonical serialization; equal digests over the same
//! covered fields are what make a tailored answer reusable between queries.

use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canon;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContextError {
    #[error("invalid context: {0}")]
    Invalid(String),
    #[error("invalid CIDR {0:?}")]
    BadCidr(String),
    #[error("invalid requirement: {0}")]
    BadRequirement(String),
}

/// A latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geo {
    pub lat: f64,
    pub lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub city: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Qos {
    pub max_latency_ms: f64,
    pub min_throughput_mbps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsagePattern {
    RequestResponse,
    Streaming,
    BulkTransfer,
    Session,
}

impl UsagePattern {
    pub fn as_str(&self) -> &'static str {
        match self {
            UsagePattern::RequestResponse => "request_response",
            UsagePattern::Streaming => "streaming",
            UsagePattern::BulkTransfer => "bulk_transfer",
            UsagePattern::Session => "session",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Usage {
    pub pattern: UsagePattern,
    pub est_bytes_per_op: f64,
    pub ops_per_minute: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostCeiling {
    pub max_cost_units: f64,
}

/// Requester-side environment metadata. All sections optional.
///
/// Unknown top-level string fields land in `extra` when deserialized.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Context {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo: Option<Geo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology_cidr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qos: Option<Qos>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostCeiling>,
    #[serde(default, flatten, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

/// A single scalar read out of a context by field path.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Str(String),
    Num(f64),
}

impl FieldValue {
    fn to_json(&self) -> serde_json::Value {
        match self {
            FieldValue::Str(s) => serde_json::Value::String(s.clone()),
            FieldValue::Num(n) => serde_json::Number::from_f64(*n)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
        }
    }
}

/// All addressable non-`extra` field paths, for requirement validation.
pub const SCHEMA_FIELDS: [&str; 11] = [
    "geo.lat",
    "geo.lon",
    "geo.city",
    "topology_cidr",
    "qos.max_latency_ms",
    "qos.min_throughput_mbps",
    "usage.pattern",
    "usage.est_bytes_per_op",
    "usage.ops_per_minute",
    "cost.max_cost_units",
    "extra",
];

fn is_numeric_field(path: &str) -> bool {
    matches!(
        path,
        "geo.lat"
            | "geo.lon"
            | "qos.max_latency_ms"
            | "qos.min_throughput_mbps"
            | "usage.est_bytes_per_op"
            | "usage.ops_per_minute"
            | "cost.max_cost_units"
    )
}

fn is_schema_field(path: &str) -> bool {
    SCHEMA_FIELDS.contains(&path) && path != "extra" || path.starts_with("extra.")
}

impl Context {
    /// Checks the range and syntax invariants on every present field.
    pub fn validate(&self) -> Result<(), ContextError> {
        if let Some(geo) = &self.geo {
            if !geo.lat.is_finite() || !(-90.0..=90.0).contains(&geo.lat) {
                return Err(ContextError::Invalid(format!("lat {} out of range", geo.lat)));
            }
            if !geo.lon.is_finite() || !(-180.0..=180.0).contains(&geo.lon) {
                return Err(ContextError::Invalid(format!("lon {} out of range", geo.lon)));
            }
        }
        if let Some(cidr) = &self.topology_cidr {
            parse_cidr(cidr)?;
        }
        if let Some(qos) = &self.qos {
            for (name, v) in [("qos.max_latency_ms", qos.max_latency_ms), ("qos.min_throughput_mbps", qos.min_throughput_mbps)] {
                if !v.is_finite() || v <= 0.0 {
                    return Err(ContextError::Invalid(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if let Some(usage) = &self.usage {
            for (name, v) in [("usage.est_bytes_per_op", usage.est_bytes_per_op), ("usage.ops_per_minute", usage.ops_per_minute)] {
                if !v.is_finite() || v < 0.0 {
                    return Err(ContextError::Invalid(format!("{name} must be non-negative, got {v}")));
                }
            }
        }
        if let Some(cost) = &self.cost {
            if !cost.max_cost_units.is_finite() || cost.max_cost_units < 0.0 {
                return Err(ContextError::Invalid(format!(
                    "cost.max_cost_units must be non-negative, got {}",
                    cost.max_cost_units
                )));
            }
        }
        Ok(())
    }

    /// Reads the value at a field path, if present.
    pub fn field(&self, path: &str) -> Option<FieldValue> {
        match path {
            "geo.lat" => self.geo.as_ref().map(|g| FieldValue::Num(g.lat)),
            "geo.lon" => self.geo.as_ref().map(|g| FieldValue::Num(g.lon)),
            "geo.city" => self.geo.as_ref().and_then(|g| g.city.clone()).map(FieldValue::Str),
            "topology_cidr" => self.topology_cidr.clone().map(FieldValue::Str),
            "qos.max_latency_ms" => self.qos.as_ref().map(|q| FieldValue::Num(q.max_latency_ms)),
            "qos.min_throughput_mbps" => self.qos.as_ref().map(|q| FieldValue::Num(q.min_throughput_mbps)),
            "usage.pattern" => self.usage.as_ref().map(|u| FieldValue::Str(u.pattern.as_str().into())),
            "usage.est_bytes_per_op" => self.usage.as_ref().map(|u| FieldValue::Num(u.est_bytes_per_op)),
            "usage.ops_per_minute" => self.usage.as_ref().map(|u| FieldValue::Num(u.ops_per_minute)),
            "cost.max_cost_units" => self.cost.as_ref().map(|c| FieldValue::Num(c.max_cost_units)),
            _ => path.strip_prefix("extra.").and_then(|k| self.extra.get(k)).cloned().map(FieldValue::Str),
        }
    }

    pub fn has_field(&self, path: &str) -> bool {
        self.field(path).is_some()
    }

    /// Geographic position without the city annotation.
    pub fn geo_point(&self) -> Option<GeoPoint> {
        self.geo.as_ref().map(|g| GeoPoint { lat: g.lat, lon: g.lon })
    }

    /// A context carrying only the sections touched by the listed fields.
    ///
    /// Sections are copied whole: projecting `geo.city` carries the real
    /// coordinates too, because the schema makes lat/lon mandatory inside a
    /// present `geo` and fabricating zeros would assert a false position.
    pub fn project_sections(&self, fields: &[String]) -> Context {
        let mut out = Context::default();
        for path in fields {
            match path.split('.').next().unwrap_or(path) {
                "geo" => out.geo = self.geo.clone(),
                "topology_cidr" => out.topology_cidr = self.topology_cidr.clone(),
                "qos" => out.qos = self.qos.clone(),
                "usage" => out.usage = self.usage.clone(),
                "cost" => out.cost = self.cost.clone(),
                "extra" => {
                    if let Some(k) = path.strip_prefix("extra.") {
                        if let Some(v) = self.extra.get(k) {
                            out.extra.insert(k.to_string(), v.clone());
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Overlays `other`'s present fields onto `self`.
    pub fn merged_with(&self, other: &Context) -> Context {
        let mut out = self.clone();
        if other.geo.is_some() {
            // Merge lat/lon and city separately so a supplied city does not
            // erase coordinates already known.
            let city = other.geo.as_ref().and_then(|g| g.city.clone()).or_else(|| out.geo.as_ref().and_then(|g| g.city.clone()));
            let mut geo = other.geo.clone().unwrap();
            geo.city = city;
            out.geo = Some(geo);
        }
        if other.topology_cidr.is_some() {
            out.topology_cidr = other.topology_cidr.clone();
        }
        if other.qos.is_some() {
            out.qos = other.qos.clone();
        }
        if other.usage.is_some() {
            out.usage = other.usage.clone();
        }
        if other.cost.is_some() {
            out.cost = other.cost.clone();
        }
        for (k, v) in &other.extra {
            out.extra.insert(k.clone(), v.clone());
        }
        out
    }

}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RequirementValue {
    Num(f64),
    Str(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Equals,
    WithinCidr,
    Max,
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Restriction {
    pub field: String,
    pub predicate: Predicate,
    pub value: RequirementValue,
}

/// What a target demands of a requester's context.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextRequirements {
    #[serde(default)]
    pub required_fields: BTreeSet<String>,
    #[serde(default)]
    pub restrictions: Vec<Restriction>,
}

impl ContextRequirements {
    pub fn require(fields: &[&str]) -> Self {
        Self {
            required_fields: fields.iter().map(|s| s.to_string()).collect(),
            restrictions: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.required_fields.is_empty() && self.restrictions.is_empty()
    }

    /// Every field path this requirement set reads.
    pub fn referenced_fields(&self) -> BTreeSet<String> {
        let mut out = self.required_fields.clone();
        out.extend(self.restrictions.iter().map(|r| r.field.clone()));
        out
    }

    /// Field paths must exist in the schema and predicates must type-check.
    pub fn validate(&self) -> Result<(), ContextError> {
        for path in &self.required_fields {
            if !is_schema_field(path) {
                return Err(ContextError::BadRequirement(format!("unknown field path {path:?}")));
            }
        }
        for r in &self.restrictions {
            if !is_schema_field(&r.field) {
                return Err(ContextError::BadRequirement(format!("unknown field path {:?}", r.field)));
            }
            match r.predicate {
                Predicate::WithinCidr => {
                    if r.field != "topology_cidr" {
                        return Err(ContextError::BadRequirement(format!(
                            "within_cidr applies to topology_cidr, not {:?}",
                            r.field
                        )));
                    }
                    match &r.value {
                        RequirementValue::Str(s) => {
                            parse_cidr(s)?;
                        }
                        RequirementValue::Num(_) => {
                            return Err(ContextError::BadRequirement("within_cidr needs a CIDR string".into()))
                        }
                    }
                }
                Predicate::Max | Predicate::Min => {
                    if !is_numeric_field(&r.field) {
                        return Err(ContextError::BadRequirement(format!(
                            "{:?} is not numeric, cannot apply max/min",
                            r.field
                        )));
                    }
                    if !matches!(r.value, RequirementValue::Num(_)) {
                        return Err(ContextError::BadRequirement("max/min needs a numeric value".into()));
                    }
                }
                Predicate::Equals => {}
            }
        }
        Ok(())
    }
}

/// Result of checking a context against a requirement set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Satisfaction {
    pub satisfied: bool,
    pub missing: Vec<String>,
    pub violated: Vec<usize>,
}

impl Satisfaction {
    pub fn satisfied_empty() -> Self {
        Self { satisfied: true, missing: Vec::new(), violated: Vec::new() }
    }
}

/// Total check: never fails, reports missing fields and violated
/// restriction indices. A restriction over an absent field counts as
/// violated, which keeps satisfaction monotone under added fields.
pub fn check_satisfaction(req: &ContextRequirements, ctx: &Context) -> Satisfaction {
    let missing: Vec<String> =
        req.required_fields.iter().filter(|p| !ctx.has_field(p)).cloned().collect();

    let mut violated = Vec::new();
    for (idx, r) in req.restrictions.iter().enumerate() {
        if !restriction_holds(r, ctx) {
            violated.push(idx);
        }
    }

    Satisfaction { satisfied: missing.is_empty() && violated.is_empty(), missing, violated }
}

fn restriction_holds(r: &Restriction, ctx: &Context) -> bool {
    let Some(actual) = ctx.field(&r.field) else {
        return false;
    };
    match (r.predicate, &actual, &r.value) {
        (Predicate::Equals, FieldValue::Str(a), RequirementValue::Str(b)) => a == b,
        (Predicate::Equals, FieldValue::Num(a), RequirementValue::Num(b)) => a == b,
        (Predicate::Max, FieldValue::Num(a), RequirementValue::Num(b)) => a <= b,
        (Predicate::Min, FieldValue::Num(a), RequirementValue::Num(b)) => a >= b,
        (Predicate::WithinCidr, FieldValue::Str(a), RequirementValue::Str(b)) => {
            cidr_contains(b, a).unwrap_or(false)
        }
        _ => false,
    }
}

/// Digest over the covered slice of a context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextFingerprint {
    #[serde(with = "hex::serde")]
    pub digest: [u8; 32],
    pub fields_covered: Vec<String>,
}

/// Fingerprints a context over a set of field paths.
///
/// The digest is SHA-256 over the canonical JSON of a map from field path to
/// value, with absent fields serialized as explicit `null`. Fields are
/// sorted and de-duplicated, so callers may pass them in any order.
pub fn fingerprint(ctx: &Context, fields: &[String]) -> ContextFingerprint {
    let mut covered: Vec<String> = fields.to_vec();
    covered.sort();
    covered.dedup();

    let mut doc = serde_json::Map::new();
    for path in &covered {
        let value = ctx.field(path).map(|v| v.to_json()).unwrap_or(serde_json::Value::Null);
        doc.insert(path.clone(), value);
    }
    let bytes = canon::to_canonical_string(&serde_json::Value::Object(doc));

    let mut hasher = Sha256::new();
    hasher.update(bytes.as_bytes());
    ContextFingerprint { digest: hasher.finalize().into(), fields_covered: covered }
}

/// Parses `addr/prefix_len` into the base address and prefix length.
pub fn parse_cidr(cidr: &str) -> Result<(IpAddr, u8), ContextError> {
    let (addr, len) = cidr.split_once('/').ok_or_else(|| ContextError::BadCidr(cidr.into()))?;
    let addr: IpAddr = addr.parse().map_err(|_| ContextError::BadCidr(cidr.into()))?;
    let len: u8 = len.parse().map_err(|_| ContextError::BadCidr(cidr.into()))?;
    let max = match addr {
        IpAddr::V4(_) => 32,
        IpAddr::V6(_) => 128,
    };
    if len > max {
        return Err(ContextError::BadCidr(cidr.into()));
    }
    Ok((addr, len))
}

/// True when every address in `inner` falls within `outer`.
pub fn cidr_contains(outer: &str, inner: &str) -> Result<bool, ContextError> {
    let (outer_addr, outer_len) = parse_cidr(outer)?;
    let (inner_addr, inner_len) = parse_cidr(inner)?;
    match (outer_addr, inner_addr) {
        (IpAddr::V4(o), IpAddr::V4(i)) => {
            if inner_len < outer_len {
                return Ok(false);
            }
            let mask = if outer_len == 0 { 0 } else { u32::MAX << (32 - outer_len as u32) };
            Ok(u32::from(o) & mask == u32::from(i) & mask)
        }
        (IpAddr::V6(o), IpAddr::V6(i)) => {
            if inner_len < outer_len {
                return Ok(false);
            }
            let mask = if outer_len == 0 { 0 } else { u128::MAX << (128 - outer_len as u32) };
            Ok(u128::from(o) & mask == u128::from(i) & mask)
        }
        _ => Ok(false),
    }
}

/// Mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle distance between two points, haversine formula.
pub fn haversine_km(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let (lat1, lon1) = (a.lat.to_radians(), a.lon.to_radians());
    let (lat2, lon2) = (b.lat.to_radians(), b.lon.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().asin()
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn ctx_strategy() -> impl Strategy<Value = Context> {
        (
            proptest::option::of((-90.0f64..90.0, -180.0f64..180.0, proptest::option::of("[A-Z][a-z]{2,8}"))),
            proptest::option::of(prop_oneof![Just("18.1.2.0/24".to_string()), Just("10.0.0.0/8".to_string())]),
            proptest::option::of((1.0f64..500.0, 0.5f64..100.0)),
            proptest::option::of(0.0f64..100.0),
        )
            .prop_map(|(geo, cidr, qos, cost)| Context {
                geo: geo.map(|(lat, lon, city)| Geo { lat, lon, city }),
                topology_cidr: cidr,
                qos: qos.map(|(l, t)| Qos { max_latency_ms: l, min_throughput_mbps: t }),
                usage: None,
                cost: cost.map(|c| CostCeiling { max_cost_units: c }),
                extra: BTreeMap::new(),
            })
    }

    fn req_strategy() -> impl Strategy<Value = ContextRequirements> {
        proptest::collection::btree_set(
            prop_oneof![
                Just("geo.lat".to_string()),
                Just("geo.city".to_string()),
                Just("topology_cidr".to_string()),
                Just("qos.max_latency_ms".to_string()),
                Just("cost.max_cost_units".to_string()),
            ],
            0..4,
        )
        .prop_map(|required_fields| ContextRequirements { required_fields, restrictions: Vec::new() })
    }

    proptest! {
        #[test]
        fn adding_fields_never_breaks_satisfaction(ctx in ctx_strategy(), req in req_strategy()) {
            let sat = check_satisfaction(&req, &ctx);
            prop_assume!(sat.satisfied);
            let mut richer = ctx.clone();
            if richer.geo.is_none() {
                richer.geo = Some(Geo { lat: 1.0, lon: 2.0, city: Some("X".into()) });
            }
            richer.extra.insert("k".into(), "v".into());
            richer.cost.get_or_insert(CostCeiling { max_cost_units: 1.0 });
            prop_assert!(check_satisfaction(&req, &richer).satisfied);
        }

        #[test]
        fn subset_of_satisfied_requirements_stays_satisfied(ctx in ctx_strategy(), req in req_strategy()) {
            let sat = check_satisfaction(&req, &ctx);
            prop_assume!(sat.satisfied);
            let mut sub = req.clone();
            if let Some(first) = sub.required_fields.iter().next().cloned() {
                sub.required_fields.remove(&first);
            }
            prop_assert!(check_satisfaction(&sub, &ctx).satisfied);
        }

        #[test]
        fn fingerprint_depends_only_on_covered_fields(ctx in ctx_strategy()) {
            let fields = vec!["geo.lat".to_string(), "geo.lon".to_string()];
            let mut noise = ctx.clone();
            noise.extra.insert("noise".into(), "zz".into());
            noise.cost = Some(CostCeiling { max_cost_units: 99.0 });
            prop_assert_eq!(fingerprint(&ctx, &fields).digest, fingerprint(&noise, &fields).digest);
        }
    }
}
