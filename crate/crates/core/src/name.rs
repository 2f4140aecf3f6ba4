//! Agent name grammar and zone paths.
//!
//! An agent name locates an agent as a leaf in a delegated hierarchy:
//! a namespace identifier (a DNS name, which doubles as the address of the
//! namespace's root server) followed by one or more path labels. The
//! canonical text form is colon separated:
//!
//! ```text
//! ual:nanda.mit.edu:lab15:robot42
//! ```
//!
//! Several surface spellings are accepted on input and all normalize to the
//! canonical form: slash separators (`ual:nanda.mit.edu/lab15/robot42`), the
//! `agent:` and `agent://` scheme variants, the `urn:agent:` prefix, and the
//! `@nanda.mit.edu:lab15:robot42` shorthand. Output is always canonical.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Canonical scheme token.
pub const SCHEME: &str = "ual";

/// Hard bound on path depth; also bounds referral-chain length.
pub const MAX_PATH_DEPTH: usize = 8;

const MAX_LABEL_LEN: usize = 63;
const MAX_NID_LEN: usize = 253;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NameError {
    #[error("malformed agent name: {0}")]
    Malformed(String),
    #[error("zone depth {depth} out of range for path of {max} labels")]
    OutOfRange { depth: usize, max: usize },
}

/// A parsed, normalized agent name.
///
/// Immutable after construction; the scheme is always [`SCHEME`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgentName {
    nid: String,
    path: Vec<String>,
}

impl AgentName {
    /// Builds a name from parts, validating and case-folding them.
    pub fn new(nid: &str, path: &[&str]) -> Result<Self, NameError> {
        let nid = validate_nid(nid)?;
        if path.is_empty() {
            return Err(NameError::Malformed("empty path".into()));
        }
        if path.len() > MAX_PATH_DEPTH {
            return Err(NameError::Malformed(format!(
                "path has {} labels, maximum is {MAX_PATH_DEPTH}",
                path.len()
            )));
        }
        let path = path.iter().map(|l| validate_label(l)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { nid, path })
    }

    /// Parses any accepted surface form into the canonical name.
    pub fn parse(text: &str) -> Result<Self, NameError> {
        let t = text.trim();
        if t.is_empty() {
            return Err(NameError::Malformed("empty input".into()));
        }

        let rest = if let Some(stripped) = t.strip_prefix('@') {
            stripped
        } else {
            strip_scheme(t)?
        };

        let segments: Vec<&str> = rest.split(|c| c == ':' || c == '/').collect();
        if segments.len() < 2 {
            return Err(NameError::Malformed(format!("missing path in {t:?}")));
        }
        let path: Vec<&str> = segments[1..].to_vec();
        if path.iter().any(|s| s.is_empty()) {
            return Err(NameError::Malformed(format!("empty label in {t:?}")));
        }
        Self::new(segments[0], &path)
    }

    /// Canonical colon form; re-parses to an equal value.
    pub fn canonical(&self) -> String {
        format!("{SCHEME}:{}:{}", self.nid, self.path.join(":"))
    }

    pub fn scheme(&self) -> &'static str {
        SCHEME
    }

    pub fn nid(&self) -> &str {
        &self.nid
    }

    pub fn labels(&self) -> &[String] {
        &self.path
    }

    pub fn depth(&self) -> usize {
        self.path.len()
    }

    /// The first `depth` labels as a zone in the same namespace.
    pub fn zone(&self, depth: usize) -> Result<ZonePath, NameError> {
        if depth > self.path.len() {
            return Err(NameError::OutOfRange { depth, max: self.path.len() });
        }
        Ok(ZonePath { nid: self.nid.clone(), labels: self.path[..depth].to_vec() })
    }

    /// URL of the namespace's root server, unless overridden by a roots map.
    pub fn root_url(&self) -> String {
        format!("https://{}", self.nid)
    }
}

impl fmt::Display for AgentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl FromStr for AgentName {
    type Err = NameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for AgentName {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.canonical())
    }
}

impl<'de> Deserialize<'de> for AgentName {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Self::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Root-server URL for a namespace identifier: `https://<nid>`.
pub fn derive_root_url(nid: &str) -> Result<String, NameError> {
    let nid = validate_nid(nid)?;
    Ok(format!("https://{nid}"))
}

/// A prefix of an agent name's path; empty labels means the namespace root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ZonePath {
    nid: String,
    labels: Vec<String>,
}

impl ZonePath {
    pub fn root(nid: &str) -> Result<Self, NameError> {
        Ok(Self { nid: validate_nid(nid)?, labels: Vec::new() })
    }

    pub fn new(nid: &str, labels: &[&str]) -> Result<Self, NameError> {
        if labels.len() > MAX_PATH_DEPTH {
            return Err(NameError::Malformed("zone too deep".into()));
        }
        let labels = labels.iter().map(|l| validate_label(l)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { nid: validate_nid(nid)?, labels })
    }

    pub fn nid(&self) -> &str {
        &self.nid
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn depth(&self) -> usize {
        self.labels.len()
    }

    /// Zone extended by one label.
    pub fn child(&self, label: &str) -> Result<Self, NameError> {
        let mut labels = self.labels.clone();
        labels.push(validate_label(label)?);
        if labels.len() > MAX_PATH_DEPTH {
            return Err(NameError::Malformed("zone too deep".into()));
        }
        Ok(Self { nid: self.nid.clone(), labels })
    }

    /// True when `self` is a (non-strict) prefix of `other`.
    pub fn is_prefix_of(&self, other: &ZonePath) -> bool {
        self.nid == other.nid
            && self.labels.len() <= other.labels.len()
            && self.labels == other.labels[..self.labels.len()]
    }

    /// True when `self` is a (non-strict) prefix of `name`'s path.
    pub fn covers(&self, name: &AgentName) -> bool {
        self.nid == name.nid()
            && self.labels.len() <= name.depth()
            && self.labels[..] == name.labels()[..self.labels.len()]
    }
}

impl fmt::Display for ZonePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.labels.is_empty() {
            f.write_str(&self.nid)
        } else {
            write!(f, "{}:{}", self.nid, self.labels.join(":"))
        }
    }
}

fn strip_scheme(t: &str) -> Result<&str, NameError> {
    // Longest alias first so `urn:agent:` is not read as scheme `urn`.
    const ALIASES: [&str; 4] = ["urn:agent", "urn:ual", "agent", "ual"];
    let lower = t.to_ascii_lowercase();
    for alias in ALIASES {
        if let Some(rest) = lower
            .strip_prefix(alias)
            .and_then(|r| r.strip_prefix("://").or_else(|| r.strip_prefix(':')))
        {
            // Slice the original input at the same offset to avoid folding
            // the whole string twice; labels fold individually later.
            let offset = t.len() - rest.len();
            return Ok(&t[offset..]);
        }
    }
    Err(NameError::Malformed(format!("unrecognized scheme in {t:?}")))
}

fn validate_label(label: &str) -> Result<String, NameError> {
    let folded = label.to_ascii_lowercase();
    if folded.is_empty() || folded.len() > MAX_LABEL_LEN {
        return Err(NameError::Malformed(format!("label {label:?} length out of range")));
    }
    if !folded.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-' || b == b'_') {
        return Err(NameError::Malformed(format!("label {label:?} has illegal characters")));
    }
    Ok(folded)
}

fn validate_nid(nid: &str) -> Result<String, NameError> {
    let folded = nid.trim().to_ascii_lowercase();
    if folded.is_empty() || folded.len() > MAX_NID_LEN {
        return Err(NameError::Malformed(format!("nid {nid:?} length out of range")));
    }
    for part in folded.split('.') {
        if part.is_empty() || part.len() > MAX_LABEL_LEN {
            return Err(NameError::Malformed(format!("nid {nid:?} has a bad dns label")));
        }
        if !part.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-') {
            return Err(NameError::Malformed(format!("nid {nid:?} has illegal characters")));
        }
        if part.starts_with('-') || part.ends_with('-') {
            return Err(NameError::Malformed(format!("nid {nid:?} label starts or ends with '-'")));
        }
    }
    Ok(folded)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CANON: &str = "ual:nanda.mit.edu:lab15:robot42";

    #[test]
    fn parses_canonical_colon_form() {
        let n = AgentName::parse(CANON).unwrap();
        assert_eq!(n.scheme(), "ual");
        assert_eq!(n.nid(), "nanda.mit.edu");
        assert_eq!(n.labels(), ["lab15", "robot42"]);
    }

    #[test]
    fn all_surface_forms_normalize_to_one_name() {
        let forms = [
            "ual:nanda.mit.edu:lab15:robot42",
            "ual:nanda.mit.edu/lab15/robot42",
            "agent:nanda.mit.edu:lab15:robot42",
            "agent:nanda.mit.edu/lab15/robot42",
            "@nanda.mit.edu:lab15:robot42",
            "agent://nanda.mit.edu/lab15/robot42",
            "urn:agent:nanda.mit.edu:lab15:robot42",
        ];
        let expect = AgentName::parse(CANON).unwrap();
        for form in forms {
            let parsed = AgentName::parse(form).unwrap();
            assert_eq!(parsed, expect, "form {form:?}");
            assert_eq!(parsed.canonical(), CANON);
        }
    }

    #[test]
    fn input_is_case_folded() {
        let n = AgentName::parse("UAL:Nanda.MIT.edu:Lab15:Robot42").unwrap();
        assert_eq!(n.canonical(), CANON);
    }

    #[test]
    fn empty_path_rejected() {
        assert!(matches!(AgentName::parse("ual:nanda.mit.edu:"), Err(NameError::Malformed(_))));
        assert!(matches!(AgentName::parse("ual:nanda.mit.edu"), Err(NameError::Malformed(_))));
    }

    #[test]
    fn illegal_labels_rejected() {
        for bad in ["ual:x.example:with space", "ual:x.example:a:b!", "ual:x.example::b"] {
            assert!(AgentName::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn bad_scheme_rejected() {
        assert!(AgentName::parse("http://x.example/a").is_err());
        assert!(AgentName::parse("urn:other:x.example:a").is_err());
    }

    #[test]
    fn invalid_nid_rejected() {
        for bad in ["ual:-bad-.:a", "ual:a..b:x", "ual:a_b.example:x"] {
            assert!(AgentName::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn max_depth_enforced() {
        let deep = format!("ual:x.example:{}", vec!["l"; MAX_PATH_DEPTH + 1].join(":"));
        assert!(AgentName::parse(&deep).is_err());
        let ok = format!("ual:x.example:{}", vec!["l"; MAX_PATH_DEPTH].join(":"));
        assert!(AgentName::parse(&ok).is_ok());
    }

    #[test]
    fn format_round_trips() {
        let n = AgentName::new("x.example", &["a"]).unwrap();
        assert_eq!(n.canonical(), "ual:x.example:a");
        assert_eq!(AgentName::parse(&n.canonical()).unwrap(), n);
    }

    #[test]
    fn derive_root_url_examples() {
        assert_eq!(derive_root_url("nanda.mit.edu").unwrap(), "https://nanda.mit.edu");
        assert_eq!(derive_root_url("a.b").unwrap(), "https://a.b");
        assert!(derive_root_url("-bad-.").is_err());
    }

    #[test]
    fn zone_of_prefixes() {
        let n = AgentName::parse(CANON).unwrap();
        let z1 = n.zone(1).unwrap();
        assert_eq!(z1, ZonePath::new("nanda.mit.edu", &["lab15"]).unwrap());
        assert_eq!(n.zone(0).unwrap(), ZonePath::root("nanda.mit.edu").unwrap());
        assert_eq!(n.zone(2).unwrap().labels(), n.labels());
        assert!(matches!(n.zone(3), Err(NameError::OutOfRange { .. })));
    }

    #[test]
    fn zone_prefix_order() {
        let n = AgentName::new("x.example", &["a", "b", "c"]).unwrap();
        for i in 0..=3 {
            for j in i..=3 {
                assert!(n.zone(i).unwrap().is_prefix_of(&n.zone(j).unwrap()));
            }
        }
        assert!(!n.zone(2).unwrap().is_prefix_of(&n.zone(1).unwrap()));
    }

    #[test]
    fn zone_covers_name() {
        let n = AgentName::parse(CANON).unwrap();
        assert!(ZonePath::root("nanda.mit.edu").unwrap().covers(&n));
        assert!(ZonePath::new("nanda.mit.edu", &["lab15"]).unwrap().covers(&n));
        assert!(!ZonePath::new("nanda.mit.edu", &["lab16"]).unwrap().covers(&n));
        assert!(!ZonePath::root("other.example").unwrap().covers(&n));
    }

    #[test]
    fn serde_uses_canonical_string() {
        let n = AgentName::parse("agent://nanda.mit.edu/lab15/robot42").unwrap();
        let json = serde_json::to_string(&n).unwrap();
        assert_eq!(json, format!("\"{CANON}\""));
        let back: AgentName = serde_json::from_str(&json).unwrap();
        assert_eq!(back, n);
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn label_strategy() -> impl Strategy<Value = String> {
        proptest::string::string_regex("[a-z0-9_-]{1,12}").unwrap()
    }

    fn nid_strategy() -> impl Strategy<Value = String> {
        proptest::collection::vec(proptest::string::string_regex("[a-z0-9]{1,10}").unwrap(), 1..4)
            .prop_map(|parts| parts.join("."))
    }

    fn name_strategy() -> impl Strategy<Value = AgentName> {
        (nid_strategy(), proptest::collection::vec(label_strategy(), 1..=MAX_PATH_DEPTH)).prop_map(
            |(nid, labels)| {
                let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
                AgentName::new(&nid, &refs).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn round_trip_identity(name in name_strategy()) {
            prop_assert_eq!(AgentName::parse(&name.canonical()).unwrap(), name);
        }

        #[test]
        fn variant_confluence(name in name_strategy()) {
            let canon = name.canonical();
            let slash = format!("ual:{}/{}", name.nid(), name.labels().join("/"));
            let agent = format!("agent:{}:{}", name.nid(), name.labels().join(":"));
            let at = format!("@{}:{}", name.nid(), name.labels().join(":"));
            let uri = format!("agent://{}/{}", name.nid(), name.labels().join("/"));
            for form in [slash, agent, at, uri] {
                prop_assert_eq!(AgentName::parse(&form).unwrap().canonical(), canon.clone());
            }
        }

        #[test]
        fn zone_prefix_monotone(name in name_strategy(), i in 0usize..=8, j in 0usize..=8) {
            let (i, j) = (i.min(name.depth()), j.min(name.depth()));
            let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
            prop_assert!(name.zone(lo).unwrap().is_prefix_of(&name.zone(hi).unwrap()));
        }
    }
}
