//! The requester-side recursive resolver.
//!
//! Walks the referral chain from the namespace root (or the deepest cached
//! referral) down to the authoritative server, caching every referral by
//! zone and every tailored answer by `(name, context fingerprint)`. A
//! cached tailored answer is reused only when the new query fingerprints
//! identically over the fields the original answer covered — contexts that
//! differ on a covered field always reach the authoritative server again.
//!
//! Usable as a library or wrapped by the standalone daemon in the HTTP
//! crate. When a negotiation invitation arrives and the options allow it,
//! the resolver drives the adaptive handshake and returns the negotiated
//! channel endpoint as a tailored response.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::adaptive::{run_handshake, NegotiationError, PlacementSpec};
use crate::cache::TtlCache;
use crate::clock::SharedClock;
use crate::context::{fingerprint, Context, ContextRequirements};
use crate::ids::IdSource;
use crate::name::{derive_root_url, AgentName};
use crate::nameserver::{Referral, ResolverAnswer, TailoredResponse};
use crate::transport::{ErrorCode, Transport, TransportError};

/// Default bound on referral hops per resolution.
pub const DEFAULT_MAX_DEPTH: u32 = 10;

/// Default cache capacity (entries across all cache kinds).
pub const DEFAULT_CACHE_CAPACITY: usize = 4096;

/// How long a name-not-found answer is remembered.
pub const NEGATIVE_TTL_S: u64 = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResolveError {
    #[error("malformed name: {0}")]
    Malformed(String),
    #[error("name not found")]
    NameNotFound,
    #[error("server invited negotiation but the query does not accept it")]
    NegotiationDeclined,
    #[error("resolution loop: {0} consulted twice")]
    ResolutionLoop(String),
    #[error("referral depth exceeded")]
    DepthExceeded,
    #[error("{0}")]
    Unreachable(String),
    #[error(transparent)]
    Negotiation(#[from] NegotiationError),
    #[error("upstream error: {0}")]
    Upstream(String),
}

/// One resolution request as it travels to a name server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolverQuery {
    pub query_id: Uuid,
    pub name: String,
    #[serde(default)]
    pub context: Context,
    #[serde(default)]
    pub accept_negotiation: bool,
}

/// Per-call knobs beyond name and context.
#[derive(Debug, Clone, Default)]
pub struct ResolveOptions {
    /// Run the adaptive handshake when invited instead of failing.
    pub accept_negotiation: bool,
    /// What the requester demands of the target during negotiation.
    pub requester_demands: ContextRequirements,
    /// Richer context revealed only during negotiation; defaults to the
    /// query context.
    pub negotiation_context: Option<Context>,
    /// How the requester identifies itself in a negotiated channel.
    pub requester_name: Option<String>,
}

/// A resolution result plus how the resolver got there.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolveOutcome {
    pub response: TailoredResponse,
    /// Resolution queries sent upstream (handshake calls not included).
    pub upstream_queries: u32,
    pub served_from_cache: bool,
    /// Servers consulted, in order.
    pub chain: Vec<String>,
    /// Present when the answer came from an adaptive handshake.
    pub placement: Option<PlacementSpec>,
    pub channel_endpoints: Option<BTreeMap<String, String>>,
    pub negotiation_rounds: u32,
}

#[derive(Debug, Clone)]
pub struct ResolverConfig {
    pub cache_capacity: usize,
    pub max_depth: u32,
    pub negative_ttl_s: u64,
    /// Overrides `https://<nid>` as the root server address, keyed by nid.
    pub roots: BTreeMap<String, String>,
}

impl Default for ResolverConfig {
    fn default() -> Self {
        Self {
            cache_capacity: DEFAULT_CACHE_CAPACITY,
            max_depth: DEFAULT_MAX_DEPTH,
            negative_ttl_s: NEGATIVE_TTL_S,
            roots: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum CacheKey {
    /// Referral cache, keyed by zone.
    Zone(String),
    /// Tailored cache, keyed by name and fingerprint digest.
    Tailored(String, [u8; 32]),
    /// Negative cache, keyed by name.
    Negative(String),
}

#[derive(Debug, Clone)]
enum CacheValue {
    Referral(Referral),
    Tailored(TailoredResponse),
    Negative,
}

struct CacheState {
    entries: TtlCache<CacheKey, CacheValue>,
    /// Digests cached per name, so a lookup can fingerprint the incoming
    /// context over each cached answer's covered fields.
    tailored_digests: HashMap<String, HashSet<[u8; 32]>>,
}

impl CacheState {
    fn drain_evicted(&mut self) {
        for key in self.entries.take_evicted() {
            if let CacheKey::Tailored(name, digest) = key {
                if let Some(set) = self.tailored_digests.get_mut(&name) {
                    set.remove(&digest);
                    if set.is_empty() {
                        self.tailored_digests.remove(&name);
                    }
                }
            }
        }
    }
}

/// Recursive resolver with referral, tailored, and negative caches.
pub struct Resolver {
    config: ResolverConfig,
    transport: Arc<dyn Transport>,
    clock: SharedClock,
    ids: Arc<IdSource>,
    cache: Mutex<CacheState>,
}

impl Resolver {
    pub fn new(
        config: ResolverConfig,
        transport: Arc<dyn Transport>,
        clock: SharedClock,
        ids: Arc<IdSource>,
    ) -> Self {
        let entries = TtlCache::new(config.cache_capacity);
        Self {
            config,
            transport,
            clock,
            ids,
            cache: Mutex::new(CacheState { entries, tailored_digests: HashMap::new() }),
        }
    }

    /// Resolves with default options (no negotiation).
    pub fn resolve(&self, name: &str, context: &Context) -> Result<ResolveOutcome, ResolveError> {
        self.resolve_with(name, context, &ResolveOptions::default())
    }

    pub fn resolve_with(
        &self,
        name: &str,
        context: &Context,
        opts: &ResolveOptions,
    ) -> Result<ResolveOutcome, ResolveError> {
        let parsed = AgentName::parse(name).map_err(|e| ResolveError::Malformed(e.to_string()))?;
        let canonical = parsed.canonical();
        let now = self.clock.now_ms();

        // Cache pass: negative first, then tailored reuse under the
        // fingerprint gate.
        {
            let mut cache = self.cache.lock().expect("cache lock");
            if cache.entries.get(&CacheKey::Negative(canonical.clone()), now).is_some() {
                return Err(ResolveError::NameNotFound);
            }
            if let Some(hit) = self.tailored_lookup(&mut cache, &canonical, context, now) {
                return Ok(ResolveOutcome {
                    response: hit,
                    upstream_queries: 0,
                    served_from_cache: true,
                    chain: Vec::new(),
                    placement: None,
                    channel_endpoints: None,
                    negotiation_rounds: 0,
                });
            }
        }

        // Start from the deepest cached referral, else the namespace root.
        let mut current_url = self.cached_start(&parsed, now).unwrap_or_else(|| self.root_for(&parsed));
        let query = ResolverQuery {
            query_id: self.ids.next_uuid(),
            name: canonical.clone(),
            context: context.clone(),
            accept_negotiation: opts.accept_negotiation,
        };

        let mut visited: HashSet<String> = HashSet::new();
        let mut chain: Vec<String> = Vec::new();
        let mut queries: u32 = 0;

        loop {
            if !visited.insert(current_url.clone()) {
                return Err(ResolveError::ResolutionLoop(current_url));
            }
            if queries >= self.config.max_depth {
                return Err(ResolveError::DepthExceeded);
            }
            chain.push(current_url.clone());
            let answer = match self.transport.resolve(&current_url, &query) {
                Ok(answer) => answer,
                Err(TransportError::Unreachable { url, reason }) => {
                    return Err(ResolveError::Unreachable(format!("{url}: {reason}")))
                }
                Err(TransportError::Service(err)) if err.code == ErrorCode::NameNotFound => {
                    let mut cache = self.cache.lock().expect("cache lock");
                    cache.entries.put(
                        CacheKey::Negative(canonical.clone()),
                        CacheValue::Negative,
                        self.config.negative_ttl_s * 1_000,
                        self.clock.now_ms(),
                    );
                    cache.drain_evicted();
                    return Err(ResolveError::NameNotFound);
                }
                Err(TransportError::Service(err)) => {
                    return Err(ResolveError::Upstream(err.to_string()))
                }
                Err(TransportError::Protocol(msg)) => return Err(ResolveError::Upstream(msg)),
            };
            queries += 1;

            match answer {
                ResolverAnswer::Referral(referral) => {
                    if !referral.zone.covers(&parsed) {
                        return Err(ResolveError::Upstream(format!(
                            "referral zone {} does not cover {canonical}",
                            referral.zone
                        )));
                    }
                    let mut cache = self.cache.lock().expect("cache lock");
                    cache.entries.put(
                        CacheKey::Zone(referral.zone.to_string()),
                        CacheValue::Referral(referral.clone()),
                        referral.ttl_seconds * 1_000,
                        self.clock.now_ms(),
                    );
                    cache.drain_evicted();
                    current_url = referral.next_server_url;
                }
                ResolverAnswer::Tailored(response) => {
                    self.cache_tailored(&canonical, &response);
                    return Ok(ResolveOutcome {
                        response,
                        upstream_queries: queries,
                        served_from_cache: false,
                        chain,
                        placement: None,
                        channel_endpoints: None,
                        negotiation_rounds: 0,
                    });
                }
                ResolverAnswer::NegotiationInvitation(invitation) => {
                    if !opts.accept_negotiation {
                        return Err(ResolveError::NegotiationDeclined);
                    }
                    let requester = opts.requester_name.as_deref().unwrap_or("requester");
                    let negotiation_ctx = match &opts.negotiation_context {
                        Some(richer) => context.merged_with(richer),
                        None => context.clone(),
                    };
                    let outcome = run_handshake(
                        &*self.transport,
                        &invitation,
                        &negotiation_ctx,
                        &opts.requester_demands,
                        requester,
                    )?;
                    let endpoint_url =
                        outcome.endpoints.get(requester).cloned().ok_or_else(|| {
                            ResolveError::Upstream(format!(
                                "deployment issued no endpoint for {requester:?}"
                            ))
                        })?;
                    let response = TailoredResponse {
                        endpoint_url,
                        ttl_seconds: outcome.ttl_seconds,
                        fingerprint: outcome.fingerprint.clone(),
                        policy_used: outcome.policy_used,
                    };
                    self.cache_tailored(&canonical, &response);
                    return Ok(ResolveOutcome {
                        response,
                        upstream_queries: queries,
                        served_from_cache: false,
                        chain,
                        placement: Some(outcome.placement),
                        channel_endpoints: Some(outcome.endpoints),
                        negotiation_rounds: outcome.rounds_used,
                    });
                }
            }
        }
    }

    fn root_for(&self, name: &AgentName) -> String {
        self.config
            .roots
            .get(name.nid())
            .cloned()
            .unwrap_or_else(|| derive_root_url(name.nid()).expect("nid validated by parse"))
    }

    // Longest-prefix referral from the cache.
    fn cached_start(&self, name: &AgentName, now: u64) -> Option<String> {
        let mut cache = self.cache.lock().expect("cache lock");
        for depth in (1..=name.depth()).rev() {
            let zone = name.zone(depth).expect("depth bounded");
            if let Some(CacheValue::Referral(r)) =
                cache.entries.get(&CacheKey::Zone(zone.to_string()), now)
            {
                return Some(r.next_server_url);
            }
        }
        None
    }

    fn tailored_lookup(
        &self,
        cache: &mut CacheState,
        name: &str,
        context: &Context,
        now: u64,
    ) -> Option<TailoredResponse> {
        let digests: Vec<[u8; 32]> =
            cache.tailored_digests.get(name)?.iter().copied().collect();
        for digest in digests {
            let key = CacheKey::Tailored(name.to_string(), digest);
            match cache.entries.get(&key, now) {
                Some(CacheValue::Tailored(cached)) => {
                    // Reuse gate: the incoming context must fingerprint
                    // identically over the cached answer's covered fields.
                    let fp = fingerprint(context, &cached.fingerprint.fields_covered);
                    if fp.digest == cached.fingerprint.digest {
                        return Some(cached);
                    }
                }
                _ => {
                    // Expired or evicted; drop the index entry.
                    if let Some(set) = cache.tailored_digests.get_mut(name) {
                        set.remove(&digest);
                    }
                }
            }
        }
        if cache.tailored_digests.get(name).map(|s| s.is_empty()).unwrap_or(false) {
            cache.tailored_digests.remove(name);
        }
        None
    }

    fn cache_tailored(&self, name: &str, response: &TailoredResponse) {
        let mut cache = self.cache.lock().expect("cache lock");
        let digest = response.fingerprint.digest;
        cache.entries.put(
            CacheKey::Tailored(name.to_string(), digest),
            CacheValue::Tailored(response.clone()),
            response.ttl_seconds * 1_000,
            self.clock.now_ms(),
        );
        cache.tailored_digests.entry(name.to_string()).or_default().insert(digest);
        cache.drain_evicted();
    }

    /// Number of live cache entries, for inspection.
    pub fn cache_len(&self) -> usize {
        self.cache.lock().expect("cache lock").entries.len()
    }

    /// Drops every cached referral, answer, and negative entry.
    pub fn flush_cache(&self) {
        let mut cache = self.cache.lock().expect("cache lock");
        cache.entries.clear();
        cache.tailored_digests.clear();
    }
}

impl std::fmt::Debug for Resolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Resolver").field("max_depth", &self.config.max_depth).finish()
    }
}

#[cfg(test)]
mod tests;
