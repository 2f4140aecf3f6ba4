//! Blocking HTTP client side: the resolver transport and an admin client
//! for registrations.

use std::sync::Arc;
use std::time::Duration;

use ual_core::adaptive::{
    DeployReply, NegotiateOffer, NegotiateReply, PlacementSpec, SessionTransport,
};
use ual_core::clock::SharedClock;
use ual_core::facts::AgentFactsCard;
use ual_core::nameserver::{AgentDeploymentRecord, ResolverAnswer};
use ual_core::resolver::ResolverQuery;
use ual_core::transport::{ErrorCode, QueryTransport, ServiceError, TransportError};
use ual_core::wire::{self, FactsList, Message, StatusUpdate, ZoneDelegation};

use crate::REGISTRATION_SECRET_HEADER_NAME;

/// Resolver transport over plain HTTP.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    clock: SharedClock,
}

impl HttpTransport {
    pub fn new(clock: SharedClock) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(10))
            .build()
            .expect("client builds");
        Self { client, clock }
    }

    fn post_message(&self, url: &str, message: &Message) -> Result<Message, TransportError> {
        let body = wire::encode(message, self.clock.now_ms())
            .map_err(|e| TransportError::Protocol(e.to_string()))?;
        let response = self
            .client
            .post(url)
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(|e| TransportError::Unreachable { url: url.to_string(), reason: e.to_string() })?;
        read_message(url, response)
    }

    fn post_empty(&self, url: &str) -> Result<Message, TransportError> {
        let response = self
            .client
            .post(url)
            .send()
            .map_err(|e| TransportError::Unreachable { url: url.to_string(), reason: e.to_string() })?;
        read_message(url, response)
    }

    fn delete(&self, url: &str) -> Result<Message, TransportError> {
        let response = self
            .client
            .delete(url)
            .send()
            .map_err(|e| TransportError::Unreachable { url: url.to_string(), reason: e.to_string() })?;
        read_message(url, response)
    }
}

fn read_message(url: &str, response: reqwest::blocking::Response) -> Result<Message, TransportError> {
    let bytes = response
        .bytes()
        .map_err(|e| TransportError::Unreachable { url: url.to_string(), reason: e.to_string() })?;
    let (message, _) = wire::decode(&bytes).map_err(|e| TransportError::Protocol(e.to_string()))?;
    match message {
        Message::Error(err) => Err(TransportError::Service(err)),
        other => Ok(other),
    }
}

impl QueryTransport for HttpTransport {
    fn resolve(&self, server_url: &str, query: &ResolverQuery) -> Result<ResolverAnswer, TransportError> {
        let url = format!("{}/resolve", server_url.trim_end_matches('/'));
        match self.post_message(&url, &Message::ResolverQuery(query.clone()))? {
            Message::ResolverAnswer(answer) => Ok(answer),
            other => Err(TransportError::Protocol(format!("unexpected reply kind {}", other.kind()))),
        }
    }
}

impl SessionTransport for HttpTransport {
    fn negotiate(&self, negotiation_url: &str, offer: &NegotiateOffer) -> Result<NegotiateReply, String> {
        match self.post_message(negotiation_url, &Message::NegotiateOffer(offer.clone())) {
            Ok(Message::NegotiateReply(reply)) => Ok(reply),
            Ok(other) => Err(format!("unexpected reply kind {}", other.kind())),
            Err(e) => Err(e.to_string()),
        }
    }

    fn optimize(&self, session_base_url: &str) -> Result<PlacementSpec, String> {
        match self.post_empty(&format!("{session_base_url}/optimize")) {
            Ok(Message::PlacementSpec(p)) => Ok(p),
            Ok(other) => Err(format!("unexpected reply kind {}", other.kind())),
            Err(e) => Err(e.to_string()),
        }
    }

    fn deploy(&self, session_base_url: &str) -> Result<DeployReply, String> {
        match self.post_empty(&format!("{session_base_url}/deploy")) {
            Ok(Message::DeployReply(r)) => Ok(r),
            Ok(other) => Err(format!("unexpected reply kind {}", other.kind())),
            Err(e) => Err(e.to_string()),
        }
    }

    fn teardown(&self, session_base_url: &str) -> Result<(), String> {
        self.delete(session_base_url).map(|_| ()).map_err(|e| e.to_string())
    }
}

/// Registration and lookup calls used by operators and tests.
pub struct AdminClient {
    transport: Arc<HttpTransport>,
}

impl AdminClient {
    pub fn new(clock: SharedClock) -> Self {
        Self { transport: Arc::new(HttpTransport::new(clock)) }
    }

    pub fn from_transport(transport: Arc<HttpTransport>) -> Self {
        Self { transport }
    }

    pub fn register_zone(
        &self,
        server_url: &str,
        delegation: ZoneDelegation,
        secret: Option<&str>,
    ) -> Result<(), ServiceError> {
        let url = format!("{}/zones", server_url.trim_end_matches('/'));
        self.post_with_secret(&url, &Message::ZoneDelegation(delegation), secret)
    }

    pub fn record_agent(
        &self,
        server_url: &str,
        record: AgentDeploymentRecord,
        secret: Option<&str>,
    ) -> Result<(), ServiceError> {
        let url = format!(
            "{}/agents/{}",
            server_url.trim_end_matches('/'),
            record.agent_name.canonical()
        );
        self.put_with_secret(&url, &Message::DeploymentRecord(record), secret)
    }

    pub fn update_status(&self, server_url: &str, update: StatusUpdate) -> Result<(), ServiceError> {
        let url = format!("{}/agents/{}/status", server_url.trim_end_matches('/'), update.agent_name);
        let body = wire::encode(&Message::StatusUpdate(update), self.transport.clock.now_ms())
            .map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))?;
        let response = self
            .transport
            .client
            .patch(&url)
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))?;
        expect_ack(&url, response)
    }

    pub fn publish_facts(&self, facts_url: &str, card: AgentFactsCard) -> Result<(), ServiceError> {
        let url =
            format!("{}/facts/{}", facts_url.trim_end_matches('/'), card.agent_name.canonical());
        self.put_with_secret(&url, &Message::FactsCard(card), None)
    }

    pub fn get_facts(&self, facts_url: &str, name: &str) -> Result<AgentFactsCard, ServiceError> {
        let url = format!("{}/facts/{name}", facts_url.trim_end_matches('/'));
        let response = self
            .transport
            .client
            .get(&url)
            .send()
            .map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))?;
        match read_message(&url, response) {
            Ok(Message::FactsCard(card)) => Ok(card),
            Ok(other) => Err(ServiceError::new(
                ErrorCode::Internal,
                format!("unexpected reply kind {}", other.kind()),
            )),
            Err(TransportError::Service(err)) => Err(err),
            Err(e) => Err(ServiceError::new(ErrorCode::Internal, e.to_string())),
        }
    }

    pub fn find_by_tag(&self, facts_url: &str, tag: &str) -> Result<FactsList, ServiceError> {
        let url = format!("{}/facts?tag={tag}", facts_url.trim_end_matches('/'));
        let response = self
            .transport
            .client
            .get(&url)
            .send()
            .map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))?;
        match read_message(&url, response) {
            Ok(Message::FactsList(list)) => Ok(list),
            Ok(other) => Err(ServiceError::new(
                ErrorCode::Internal,
                format!("unexpected reply kind {}", other.kind()),
            )),
            Err(TransportError::Service(err)) => Err(err),
            Err(e) => Err(ServiceError::new(ErrorCode::Internal, e.to_string())),
        }
    }

    fn post_with_secret(
        &self,
        url: &str,
        message: &Message,
        secret: Option<&str>,
    ) -> Result<(), ServiceError> {
        let body = wire::encode(message, self.transport.clock.now_ms())
            .map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))?;
        let mut request =
            self.transport.client.post(url).header("content-type", "application/json").body(body);
        if let Some(secret) = secret {
            request = request.header(REGISTRATION_SECRET_HEADER_NAME, secret);
        }
        let response =
            request.send().map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))?;
        expect_ack(url, response)
    }

    fn put_with_secret(
        &self,
        url: &str,
        message: &Message,
        secret: Option<&str>,
    ) -> Result<(), ServiceError> {
        let body = wire::encode(message, self.transport.clock.now_ms())
            .map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))?;
        let mut request =
            self.transport.client.put(url).header("content-type", "application/json").body(body);
        if let Some(secret) = secret {
            request = request.header(REGISTRATION_SECRET_HEADER_NAME, secret);
        }
        let response =
            request.send().map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))?;
        expect_ack(url, response)
    }
}

fn expect_ack(url: &str, response: reqwest::blocking::Response) -> Result<(), ServiceError> {
    match read_message(url, response) {
        Ok(Message::Ack(ack)) if ack.ok => Ok(()),
        Ok(other) => Err(ServiceError::new(
            ErrorCode::Internal,
            format!("unexpected reply kind {}", other.kind()),
        )),
        Err(TransportError::Service(err)) => Err(err),
        Err(e) => Err(ServiceError::new(ErrorCode::Internal, e.to_string())),
    }
}
