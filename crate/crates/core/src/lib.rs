//! Context-aware hierarchical resolution of agent names.
//!
//! An agent name such as `ual:nanda.mit.edu:lab15:robot42` identifies an
//! agent as a leaf in a delegated name hierarchy. Resolution walks a chain
//! of name servers (root, intermediate, authoritative) and produces a
//! communication endpoint *tailored* to the context shared by the requester
//! and the target: geography, load, cost, usage pattern. When the target
//! demands more context than the query carried, the authoritative server
//! answers with a negotiation invitation instead, and the requester may run
//! the adaptive handshake (negotiate, optimize placement, deploy) to obtain
//! a channel endpoint.
//!
//! Module map:
//!
//! - [`name`] — UAL grammar, parsing, canonical form, zone prefixes
//! - [`context`] — context metadata, requirement checking, fingerprints
//! - [`facts`] — the discovery-side registry of agent facts cards
//! - [`tailor`] — endpoint-selection policies used by authoritative servers
//! - [`nameserver`] — the name-server state machine (all three roles)
//! - [`cache`] — TTL + LRU cache used by the recursive resolver
//! - [`resolver`] — the requester-side recursive resolver
//! - [`adaptive`] — negotiation, placement optimization, deployment sessions
//! - [`wire`] — canonical JSON envelopes shared by every service
//! - [`transport`] — how resolver queries reach servers (in-process or HTTP)
//! - [`sim`] — deterministic in-process scenario harness

pub mod adaptive;
pub mod cache;
pub mod canon;
pub mod clock;
pub mod context;
pub mod facts;
pub mod ids;
pub mod name;
pub mod nameserver;
pub mod resolver;
pub mod sim;
pub mod tailor;
pub mod transport;
pub mod wire;

pub use clock::{Clock, MockClock, SharedClock, SystemClock};
pub use context::{Context, ContextFingerprint, ContextRequirements};
pub use ids::IdSource;
pub use name::{AgentName, ZonePath};
pub use nameserver::{
    AgentDeploymentRecord, NameServer, NameServerConfig, ResolverAnswer, TailoredResponse,
};
pub use resolver::{ResolveOptions, ResolveOutcome, Resolver, ResolverConfig, ResolverQuery};
