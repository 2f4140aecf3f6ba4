//! How resolver queries and session calls reach name servers.
//!
//! The recursive resolver is transport-agnostic: the scenario harness plugs
//! in an in-process router, the HTTP crate plugs in a real client. Service
//! errors travel as an [`ErrorCode`] plus message so callers can tell a
//! missing name from a malformed query from a dead server.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive::{DeployError, NegotiationError, OptimizeError, SessionTransport};
use crate::facts::FactsError;
use crate::nameserver::{ResolverAnswer, ServerError};
use crate::resolver::ResolverQuery;

/// Wire-visible error vocabulary shared by every service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    MalformedName,
    MalformedQuery,
    MalformedCard,
    MalformedRecord,
    MalformedSpec,
    NameNotFound,
    NotFound,
    ZoneConflict,
    NotMyZone,
    Unauthorized,
    NegotiationFailed,
    NegotiationDeclined,
    SessionExpired,
    Infeasible,
    DeployFailed,
    VersionMismatch,
    DecodeError,
    Internal,
}

impl ErrorCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::MalformedName => "malformed_name",
            ErrorCode::MalformedQuery => "malformed_query",
            ErrorCode::MalformedCard => "malformed_card",
            ErrorCode::MalformedRecord => "malformed_record",
            ErrorCode::MalformedSpec => "malformed_spec",
            ErrorCode::NameNotFound => "name_not_found",
            ErrorCode::NotFound => "not_found",
            ErrorCode::ZoneConflict => "zone_conflict",
            ErrorCode::NotMyZone => "not_my_zone",
            ErrorCode::Unauthorized => "unauthorized",
            ErrorCode::NegotiationFailed => "negotiation_failed",
            ErrorCode::NegotiationDeclined => "negotiation_declined",
            ErrorCode::SessionExpired => "session_expired",
            ErrorCode::Infeasible => "infeasible",
            ErrorCode::DeployFailed => "deploy_failed",
            ErrorCode::VersionMismatch => "version_mismatch",
            ErrorCode::DecodeError => "decode_error",
            ErrorCode::Internal => "internal",
        }
    }
}

/// A service-side failure carried across any transport.
#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[error("{code:?}: {message}")]
pub struct ServiceError {
    pub code: ErrorCode,
    pub message: String,
}

impl ServiceError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<ServerError> for ServiceError {
    fn from(e: ServerError) -> Self {
        let code = match &e {
            ServerError::ZoneConflict(_) => ErrorCode::ZoneConflict,
            ServerError::NotMyZone(_) => ErrorCode::NotMyZone,
            ServerError::MalformedRecord(_) => ErrorCode::MalformedRecord,
            ServerError::MalformedQuery(_) => ErrorCode::MalformedQuery,
            ServerError::NameNotFound => ErrorCode::NameNotFound,
            ServerError::NotFound(_) => ErrorCode::NotFound,
            ServerError::Unauthorized => ErrorCode::Unauthorized,
            ServerError::Io(_) => ErrorCode::Internal,
        };
        Self::new(code, e.to_string())
    }
}

impl From<FactsError> for ServiceError {
    fn from(e: FactsError) -> Self {
        let code = match &e {
            FactsError::MalformedCard(_) => ErrorCode::MalformedCard,
            FactsError::NotFound(_) => ErrorCode::NotFound,
            FactsError::Io(_) => ErrorCode::Internal,
        };
        Self::new(code, e.to_string())
    }
}

impl From<NegotiationError> for ServiceError {
    fn from(e: NegotiationError) -> Self {
        let code = match &e {
            NegotiationError::Failed(_) => ErrorCode::NegotiationFailed,
            NegotiationError::SessionExpired => ErrorCode::SessionExpired,
            NegotiationError::UnknownSession(_) => ErrorCode::NotFound,
        };
        Self::new(code, e.to_string())
    }
}

impl From<OptimizeError> for ServiceError {
    fn from(e: OptimizeError) -> Self {
        let code = match &e {
            OptimizeError::Placement(crate::adaptive::PlacementError::Infeasible(_)) => {
                ErrorCode::Infeasible
            }
            OptimizeError::Placement(crate::adaptive::PlacementError::MalformedSpec(_)) => {
                ErrorCode::MalformedSpec
            }
            OptimizeError::SessionExpired => ErrorCode::SessionExpired,
            OptimizeError::UnknownSession(_) => ErrorCode::NotFound,
            OptimizeError::NotReady => ErrorCode::MalformedSpec,
        };
        Self::new(code, e.to_string())
    }
}

impl From<DeployError> for ServiceError {
    fn from(e: DeployError) -> Self {
        let code = match &e {
            DeployError::Failed(_) => ErrorCode::DeployFailed,
            DeployError::SessionExpired => ErrorCode::SessionExpired,
            DeployError::UnknownSession(_) => ErrorCode::NotFound,
            DeployError::NotReady(_) => ErrorCode::MalformedSpec,
        };
        Self::new(code, e.to_string())
    }
}

/// A transport-layer or service-layer failure, as seen by the requester.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("{url} unreachable: {reason}")]
    Unreachable { url: String, reason: String },
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Sends resolution queries to a name server.
pub trait QueryTransport: Send + Sync {
    fn resolve(&self, server_url: &str, query: &ResolverQuery) -> Result<ResolverAnswer, TransportError>;
}

/// Full transport surface the recursive resolver needs.
pub trait Transport: QueryTransport + SessionTransport {}

impl<T: QueryTransport + SessionTransport + ?Sized> Transport for T {}
