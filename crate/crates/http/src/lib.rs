//! HTTP bindings for the name resolution services.
//!
//! Three daemons share one envelope convention (see `ual_core::wire`):
//!
//! - the name server: `POST /resolve`, `POST /zones`, `PUT /agents/{name}`,
//!   `PATCH /agents/{name}/status`, session endpoints under
//!   `/sessions/{id}`, and `GET /healthz`;
//! - the facts registry: `PUT /facts/{name}`, `GET /facts/{name}`,
//!   `GET /facts?tag=…`;
//! - the standalone recursive resolver: `POST /resolve` proxying the full
//!   recursion on behalf of its callers.
//!
//! Service errors map onto status codes: 422 for malformed inputs, 404 for
//! unknown names, 409 for zone conflicts and unsatisfiable negotiations,
//! 421 for zone misdirection, 428 when negotiation would be required but
//! the query declined it, 410 for expired sessions, 502 for deployment
//! failures, 400 for undecodable or version-mismatched envelopes.

pub mod client;
pub mod server;

use axum::http::StatusCode;
use ual_core::transport::{ErrorCode, ServiceError};

pub use client::{AdminClient, HttpTransport};
pub use server::{facts_app, nameserver_app, resolver_app, serve_blocking};

/// Header carrying the shared registration secret, when a server demands one.
pub const REGISTRATION_SECRET_HEADER_NAME: &str = "x-ual-registration-secret";

/// Status code for a service error crossing the HTTP boundary.
pub fn status_for(code: ErrorCode) -> StatusCode {
    match code {
        ErrorCode::MalformedName
        | ErrorCode::MalformedQuery
        | ErrorCode::MalformedCard
        | ErrorCode::MalformedRecord
        | ErrorCode::MalformedSpec => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorCode::NameNotFound | ErrorCode::NotFound => StatusCode::NOT_FOUND,
        ErrorCode::ZoneConflict | ErrorCode::NegotiationFailed | ErrorCode::Infeasible => {
            StatusCode::CONFLICT
        }
        ErrorCode::NotMyZone => StatusCode::MISDIRECTED_REQUEST,
        ErrorCode::Unauthorized => StatusCode::FORBIDDEN,
        ErrorCode::NegotiationDeclined => StatusCode::PRECONDITION_REQUIRED,
        ErrorCode::SessionExpired => StatusCode::GONE,
        ErrorCode::DeployFailed => StatusCode::BAD_GATEWAY,
        ErrorCode::VersionMismatch | ErrorCode::DecodeError => StatusCode::BAD_REQUEST,
        ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

/// Error code a failed resolve maps to when the daemon proxies recursion.
pub fn code_for_resolve_error(err: &ual_core::resolver::ResolveError) -> ErrorCode {
    use ual_core::resolver::ResolveError as E;
    match err {
        E::Malformed(_) => ErrorCode::MalformedName,
        E::NameNotFound => ErrorCode::NameNotFound,
        E::NegotiationDeclined => ErrorCode::NegotiationDeclined,
        E::ResolutionLoop(_) | E::DepthExceeded | E::Unreachable(_) | E::Upstream(_) => {
            ErrorCode::Internal
        }
        E::Negotiation(_) => ErrorCode::NegotiationFailed,
    }
}

pub(crate) fn service_error(code: ErrorCode, message: impl Into<String>) -> ServiceError {
    ServiceError::new(code, message)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_table_spot_checks() {
        assert_eq!(status_for(ErrorCode::NameNotFound), StatusCode::NOT_FOUND);
        assert_eq!(status_for(ErrorCode::ZoneConflict), StatusCode::CONFLICT);
        assert_eq!(status_for(ErrorCode::MalformedRecord), StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(status_for(ErrorCode::NegotiationDeclined), StatusCode::PRECONDITION_REQUIRED);
        assert_eq!(status_for(ErrorCode::VersionMismatch), StatusCode::BAD_REQUEST);
    }
}
