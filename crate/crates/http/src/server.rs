//! Axum applications for the three daemons.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, patch, post, put};
use axum::Router;
use tracing::info;

use ual_core::clock::SharedClock;
use ual_core::facts::FactsRegistry;
use ual_core::name::AgentName;
use ual_core::nameserver::NameServer;
use ual_core::resolver::{ResolveOptions, Resolver, ResolverQuery};
use ual_core::transport::{ErrorCode, ServiceError};
use ual_core::wire::{self, Ack, FactsList, Message};

use crate::{service_error, status_for, REGISTRATION_SECRET_HEADER_NAME};

#[derive(Clone)]
struct NameServerState {
    server: Arc<NameServer>,
    clock: SharedClock,
}

#[derive(Clone)]
struct FactsState {
    registry: Arc<FactsRegistry>,
    clock: SharedClock,
}

#[derive(Clone)]
struct ResolverState {
    resolver: Arc<Resolver>,
    clock: SharedClock,
}

fn envelope_response(clock: &SharedClock, status: StatusCode, message: &Message) -> Response {
    let body = wire::encode(message, clock.now_ms()).unwrap_or_else(|e| {
        format!(r#"{{"v":"ual/0.1","kind":"error","body":{{"code":"internal","message":"{e}"}},"ts":"1970-01-01T00:00:00.000Z"}}"#)
    });
    (status, [("content-type", "application/json")], body).into_response()
}

fn error_response(clock: &SharedClock, err: ServiceError) -> Response {
    envelope_response(clock, status_for(err.code), &Message::Error(err))
}

fn decode_message(clock: &SharedClock, bytes: &Bytes) -> Result<Message, Response> {
    wire::decode(bytes).map(|(m, _)| m).map_err(|e| {
        let code = match e {
            wire::WireError::VersionMismatch { .. } => ErrorCode::VersionMismatch,
            _ => ErrorCode::DecodeError,
        };
        error_response(clock, service_error(code, e.to_string()))
    })
}

fn secret_of(headers: &HeaderMap) -> Option<String> {
    headers
        .get(REGISTRATION_SECRET_HEADER_NAME)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
}

// ---------------------------------------------------------------------------
// Name server
// ---------------------------------------------------------------------------

/// Router for one name server instance (any role).
pub fn nameserver_app(server: Arc<NameServer>, clock: SharedClock) -> Router {
    let state = NameServerState { server, clock };
    Router::new()
        .route("/resolve", post(ns_resolve))
        .route("/zones", post(ns_register_zone))
        .route("/agents/{name}", put(ns_record_agent))
        .route("/agents/{name}/status", patch(ns_update_status))
        .route("/sessions/{id}/negotiate", post(ns_negotiate))
        .route("/sessions/{id}/optimize", post(ns_optimize))
        .route("/sessions/{id}/deploy", post(ns_deploy))
        .route("/sessions/{id}", delete(ns_teardown))
        .route("/healthz", get(healthz))
        .with_state(state)
}

async fn healthz() -> impl IntoResponse {
    (StatusCode::OK, [("content-type", "application/json")], r#"{"ok":true}"#)
}

async fn ns_resolve(State(state): State<NameServerState>, bytes: Bytes) -> Response {
    let query = match decode_message(&state.clock, &bytes) {
        Ok(Message::ResolverQuery(q)) => q,
        Ok(other) => {
            return error_response(
                &state.clock,
                service_error(ErrorCode::DecodeError, format!("expected resolver_query, got {}", other.kind())),
            )
        }
        Err(resp) => return resp,
    };
    match state.server.answer_query(&query) {
        Ok(answer) => envelope_response(&state.clock, StatusCode::OK, &Message::ResolverAnswer(answer)),
        Err(e) => error_response(&state.clock, e.into()),
    }
}

async fn ns_register_zone(
    State(state): State<NameServerState>,
    headers: HeaderMap,
    bytes: Bytes,
) -> Response {
    let delegation = match decode_message(&state.clock, &bytes) {
        Ok(Message::ZoneDelegation(d)) => d,
        Ok(other) => {
            return error_response(
                &state.clock,
                service_error(ErrorCode::DecodeError, format!("expected zone_delegation, got {}", other.kind())),
            )
        }
        Err(resp) => return resp,
    };
    let secret = secret_of(&headers);
    match state.server.register_zone(
        delegation.zone,
        &delegation.child_server_url,
        delegation.kind,
        delegation.ttl_seconds,
        secret.as_deref(),
    ) {
        Ok(()) => envelope_response(&state.clock, StatusCode::OK, &Message::Ack(Ack::ok())),
        Err(e) => error_response(&state.clock, e.into()),
    }
}

async fn ns_record_agent(
    State(state): State<NameServerState>,
    Path(name): Path<String>,
    headers: HeaderMap,
    bytes: Bytes,
) -> Response {
    let record = match decode_message(&state.clock, &bytes) {
        Ok(Message::DeploymentRecord(r)) => r,
        Ok(other) => {
            return error_response(
                &state.clock,
                service_error(ErrorCode::DecodeError, format!("expected deployment_record, got {}", other.kind())),
            )
        }
        Err(resp) => return resp,
    };
    match AgentName::parse(&name) {
        Ok(parsed) if parsed == record.agent_name => {}
        _ => {
            return error_response(
                &state.clock,
                service_error(
                    ErrorCode::MalformedRecord,
                    format!("path name {name:?} does not match record {:?}", record.agent_name.canonical()),
                ),
            )
        }
    }
    let secret = secret_of(&headers);
    match state.server.record_agent(record, secret.as_deref()) {
        Ok(()) => envelope_response(&state.clock, StatusCode::OK, &Message::Ack(Ack::ok())),
        Err(e) => error_response(&state.clock, e.into()),
    }
}

async fn ns_update_status(
    State(state): State<NameServerState>,
    Path(name): Path<String>,
    bytes: Bytes,
) -> Response {
    let update = match decode_message(&state.clock, &bytes) {
        Ok(Message::StatusUpdate(u)) => u,
        Ok(other) => {
            return error_response(
                &state.clock,
                service_error(ErrorCode::DecodeError, format!("expected status_update, got {}", other.kind())),
            )
        }
        Err(resp) => return resp,
    };
    if update.agent_name != name {
        return error_response(
            &state.clock,
            service_error(ErrorCode::MalformedQuery, "path and body agent names differ"),
        );
    }
    match state.server.update_status(&update.agent_name, &update.endpoint_url, update.load, update.healthy) {
        Ok(()) => envelope_response(&state.clock, StatusCode::OK, &Message::Ack(Ack::ok())),
        Err(e) => error_response(&state.clock, e.into()),
    }
}

fn parse_session_id(id: &str) -> Result<uuid::Uuid, ServiceError> {
    uuid::Uuid::parse_str(id)
        .map_err(|_| ServiceError::new(ErrorCode::NotFound, format!("bad session id {id:?}")))
}

async fn ns_negotiate(
    State(state): State<NameServerState>,
    Path(id): Path<String>,
    bytes: Bytes,
) -> Response {
    let offer = match decode_message(&state.clock, &bytes) {
        Ok(Message::NegotiateOffer(o)) => o,
        Ok(other) => {
            return error_response(
                &state.clock,
                service_error(ErrorCode::DecodeError, format!("expected negotiate_offer, got {}", other.kind())),
            )
        }
        Err(resp) => return resp,
    };
    let id = match parse_session_id(&id) {
        Ok(id) => id,
        Err(e) => return error_response(&state.clock, e),
    };
    match state.server.sessions().negotiate(id, &offer) {
        Ok(reply) => envelope_response(&state.clock, StatusCode::OK, &Message::NegotiateReply(reply)),
        Err(e) => error_response(&state.clock, e.into()),
    }
}

async fn ns_optimize(State(state): State<NameServerState>, Path(id): Path<String>) -> Response {
    let id = match parse_session_id(&id) {
        Ok(id) => id,
        Err(e) => return error_response(&state.clock, e),
    };
    match state.server.sessions().optimize(id) {
        Ok(placement) => {
            envelope_response(&state.clock, StatusCode::OK, &Message::PlacementSpec(placement))
        }
        Err(e) => error_response(&state.clock, e.into()),
    }
}

async fn ns_deploy(State(state): State<NameServerState>, Path(id): Path<String>) -> Response {
    let id = match parse_session_id(&id) {
        Ok(id) => id,
        Err(e) => return error_response(&state.clock, e),
    };
    match state.server.sessions().deploy(id) {
        Ok(reply) => envelope_response(&state.clock, StatusCode::OK, &Message::DeployReply(reply)),
        Err(e) => error_response(&state.clock, e.into()),
    }
}

async fn ns_teardown(State(state): State<NameServerState>, Path(id): Path<String>) -> Response {
    let id = match parse_session_id(&id) {
        Ok(id) => id,
        Err(e) => return error_response(&state.clock, e),
    };
    let changed = state.server.sessions().teardown(id);
    envelope_response(
        &state.clock,
        StatusCode::OK,
        &Message::Ack(Ack { ok: true, detail: Some(format!("torn_down={changed}")) }),
    )
}

// ---------------------------------------------------------------------------
// Facts registry
// ---------------------------------------------------------------------------

pub fn facts_app(registry: Arc<FactsRegistry>, clock: SharedClock) -> Router {
    let state = FactsState { registry, clock };
    Router::new()
        .route("/facts", get(facts_find))
        .route("/facts/{name}", put(facts_put).get(facts_get))
        .route("/healthz", get(healthz))
        .with_state(state)
}

async fn facts_put(State(state): State<FactsState>, Path(name): Path<String>, bytes: Bytes) -> Response {
    let card = match decode_message(&state.clock, &bytes) {
        Ok(Message::FactsCard(c)) => c,
        Ok(other) => {
            return error_response(
                &state.clock,
                service_error(ErrorCode::DecodeError, format!("expected facts_card, got {}", other.kind())),
            )
        }
        Err(resp) => return resp,
    };
    match AgentName::parse(&name) {
        Ok(parsed) if parsed == card.agent_name => {}
        _ => {
            return error_response(
                &state.clock,
                service_error(ErrorCode::MalformedCard, "path and card agent names differ"),
            )
        }
    }
    match state.registry.publish_facts(card) {
        Ok(()) => envelope_response(&state.clock, StatusCode::OK, &Message::Ack(Ack::ok())),
        Err(e) => error_response(&state.clock, e.into()),
    }
}

async fn facts_get(State(state): State<FactsState>, Path(name): Path<String>) -> Response {
    match state.registry.get_facts(&name) {
        Ok(card) => envelope_response(&state.clock, StatusCode::OK, &Message::FactsCard(card)),
        Err(e) => error_response(&state.clock, e.into()),
    }
}

#[derive(serde::Deserialize)]
struct TagQuery {
    tag: String,
}

async fn facts_find(State(state): State<FactsState>, Query(q): Query<TagQuery>) -> Response {
    let cards = state.registry.find_by_tag(&q.tag);
    envelope_response(&state.clock, StatusCode::OK, &Message::FactsList(FactsList { cards }))
}

// ---------------------------------------------------------------------------
// Standalone recursive resolver
// ---------------------------------------------------------------------------

/// Router for the resolver daemon: accepts a resolver query and walks the
/// whole referral chain on the caller's behalf.
pub fn resolver_app(resolver: Arc<Resolver>, clock: SharedClock) -> Router {
    let state = ResolverState { resolver, clock };
    Router::new()
        .route("/resolve", post(proxy_resolve))
        .route("/healthz", get(healthz))
        .with_state(state)
}

async fn proxy_resolve(State(state): State<ResolverState>, bytes: Bytes) -> Response {
    let query = match decode_message(&state.clock, &bytes) {
        Ok(Message::ResolverQuery(q)) => q,
        Ok(other) => {
            return error_response(
                &state.clock,
                service_error(ErrorCode::DecodeError, format!("expected resolver_query, got {}", other.kind())),
            )
        }
        Err(resp) => return resp,
    };
    let resolver = state.resolver.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        let ResolverQuery { name, context, accept_negotiation, .. } = query;
        let opts = ResolveOptions { accept_negotiation, ..ResolveOptions::default() };
        resolver.resolve_with(&name, &context, &opts)
    })
    .await;
    match outcome {
        Ok(Ok(out)) => envelope_response(
            &state.clock,
            StatusCode::OK,
            &Message::ResolverAnswer(ual_core::nameserver::ResolverAnswer::Tailored(out.response)),
        ),
        Ok(Err(e)) => {
            let code = crate::code_for_resolve_error(&e);
            error_response(&state.clock, service_error(code, e.to_string()))
        }
        Err(join) => error_response(&state.clock, service_error(ErrorCode::Internal, join.to_string())),
    }
}

// ---------------------------------------------------------------------------
// Serving
// ---------------------------------------------------------------------------

/// Binds and serves an app on its own runtime until interrupted.
pub fn serve_blocking(app: Router, addr: SocketAddr) -> std::io::Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}
