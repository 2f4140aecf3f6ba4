//! The discovery-side registry of agent facts cards.
//!
//! A facts card is the public metadata a target agent advertises: its name,
//! capability tags, and the context it will demand of requesters. The
//! registry serves exact-name and tag lookups; cards age out after their
//! TTL against the injected clock. Full discovery (search, ranking,
//! federation) is out of scope.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SharedClock;
use crate::context::ContextRequirements;
use crate::name::AgentName;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FactsError {
    #[error("malformed facts card: {0}")]
    MalformedCard(String),
    #[error("no facts card for {0}")]
    NotFound(String),
    #[error("facts store i/o: {0}")]
    Io(String),
}

/// Public discovery metadata for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentFactsCard {
    pub agent_name: AgentName,
    pub label: String,
    #[serde(default)]
    pub capabilities: Vec<String>,
    #[serde(default)]
    pub context_requirements: ContextRequirements,
    pub ttl_seconds: u64,
    /// Stamped by the registry at publish time (ms since epoch).
    #[serde(default)]
    pub published_at: u64,
}

impl AgentFactsCard {
    pub fn validate(&self) -> Result<(), FactsError> {
        if self.ttl_seconds == 0 {
            return Err(FactsError::MalformedCard("ttl_seconds must be at least 1".into()));
        }
        if self.capabilities.iter().any(|t| t.trim().is_empty()) {
            return Err(FactsError::MalformedCard("empty capability tag".into()));
        }
        self.context_requirements
            .validate()
            .map_err(|e| FactsError::MalformedCard(e.to_string()))?;
        Ok(())
    }

    fn expired_at(&self, now_ms: u64) -> bool {
        now_ms.saturating_sub(self.published_at) >= self.ttl_seconds * 1_000
    }
}

/// In-memory card store with optional JSON persistence.
pub struct FactsRegistry {
    clock: SharedClock,
    cards: RwLock<BTreeMap<String, AgentFactsCard>>,
    store_path: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct StoreFile {
    cards: Vec<AgentFactsCard>,
}

impl FactsRegistry {
    pub fn new(clock: SharedClock) -> Self {
        Self { clock, cards: RwLock::new(BTreeMap::new()), store_path: None }
    }

    /// Attaches a store file, loading existing cards from it when present.
    pub fn with_store_file(mut self, path: &Path) -> Result<Self, FactsError> {
        if path.exists() {
            let bytes = std::fs::read(path).map_err(|e| FactsError::Io(e.to_string()))?;
            let store: StoreFile =
                serde_json::from_slice(&bytes).map_err(|e| FactsError::Io(e.to_string()))?;
            let mut cards = self.cards.write().expect("cards lock");
            for card in store.cards {
                cards.insert(card.agent_name.canonical(), card);
            }
        }
        self.store_path = Some(path.to_path_buf());
        Ok(self)
    }

    /// Publishes a card; replaces any previous card for the same name and
    /// stamps the publish time.
    pub fn publish_facts(&self, mut card: AgentFactsCard) -> Result<(), FactsError> {
        card.validate()?;
        card.published_at = self.clock.now_ms();
        let mut cards = self.cards.write().expect("cards lock");
        cards.insert(card.agent_name.canonical(), card);
        self.persist(&cards)
    }

    /// Current card for an exact canonical name; expired cards are pruned.
    pub fn get_facts(&self, name: &str) -> Result<AgentFactsCard, FactsError> {
        let canonical = AgentName::parse(name)
            .map_err(|e| FactsError::MalformedCard(e.to_string()))?
            .canonical();
        let now = self.clock.now_ms();
        {
            let cards = self.cards.read().expect("cards lock");
            match cards.get(&canonical) {
                Some(card) if !card.expired_at(now) => return Ok(card.clone()),
                None => return Err(FactsError::NotFound(canonical)),
                Some(_) => {}
            }
        }
        let mut cards = self.cards.write().expect("cards lock");
        if cards.get(&canonical).map(|c| c.expired_at(now)).unwrap_or(false) {
            cards.remove(&canonical);
            self.persist(&cards)?;
        }
        Err(FactsError::NotFound(canonical))
    }

    /// All unexpired cards carrying `tag`, in name order.
    pub fn find_by_tag(&self, tag: &str) -> Vec<AgentFactsCard> {
        let now = self.clock.now_ms();
        let cards = self.cards.read().expect("cards lock");
        cards
            .values()
            .filter(|c| !c.expired_at(now) && c.capabilities.iter().any(|t| t == tag))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.cards.read().expect("cards lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn persist(&self, cards: &BTreeMap<String, AgentFactsCard>) -> Result<(), FactsError> {
        let Some(path) = &self.store_path else { return Ok(()) };
        let store = StoreFile { cards: cards.values().cloned().collect() };
        let json = serde_json::to_vec_pretty(&store).map_err(|e| FactsError::Io(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json).map_err(|e| FactsError::Io(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| FactsError::Io(e.to_string()))?;
        Ok(())
    }
}

impl std::fmt::Debug for FactsRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FactsRegistry").field("cards", &self.len()).finish()
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::clock::MockClock;

    fn card(name: &str, tags: &[&str], ttl: u64) -> AgentFactsCard {
        AgentFactsCard {
            agent_name: AgentName::parse(name).unwrap(),
            label: "test agent".into(),
            capabilities: tags.iter().map(|s| s.to_string()).collect(),
            context_requirements: ContextRequirements::default(),
            ttl_seconds: ttl,
            published_at: 0,
        }
    }

    fn registry() -> (FactsRegistry, Arc<MockClock>) {
        let clock = Arc::new(MockClock::new(1_000));
        (FactsRegistry::new(clock.clone()), clock)
    }

    #[test]
    fn publish_then_get_round_trips() {
        let (reg, _) = registry();
        let c = card("ual:x.example:robot", &["robot"], 60);
        reg.publish_facts(c.clone()).unwrap();
        let got = reg.get_facts("ual:x.example:robot").unwrap();
        assert_eq!(got.agent_name, c.agent_name);
        assert_eq!(got.capabilities, c.capabilities);
        assert_eq!(got.published_at, 1_000);
    }

    #[test]
    fn republish_is_last_writer_wins() {
        let (reg, _) = registry();
        reg.publish_facts(card("ual:x.example:robot", &["robot"], 60)).unwrap();
        reg.publish_facts(card("ual:x.example:robot", &["robot", "gripper"], 60)).unwrap();
        let got = reg.get_facts("ual:x.example:robot").unwrap();
        assert_eq!(got.capabilities, vec!["robot".to_string(), "gripper".to_string()]);
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn malformed_cards_are_rejected() {
        let (reg, _) = registry();
        let mut zero_ttl = card("ual:x.example:robot", &["robot"], 60);
        zero_ttl.ttl_seconds = 0;
        assert!(matches!(reg.publish_facts(zero_ttl), Err(FactsError::MalformedCard(_))));

        let empty_tag = card("ual:x.example:robot", &[""], 60);
        assert!(matches!(reg.publish_facts(empty_tag), Err(FactsError::MalformedCard(_))));
    }

    #[test]
    fn unknown_name_is_not_found() {
        let (reg, _) = registry();
        assert!(matches!(reg.get_facts("ual:x.example:ghost"), Err(FactsError::NotFound(_))));
    }

    #[test]
    fn cards_age_out_after_ttl() {
        let (reg, clock) = registry();
        reg.publish_facts(card("ual:x.example:robot", &["robot"], 60)).unwrap();
        clock.advance_ms(59_999);
        assert!(reg.get_facts("ual:x.example:robot").is_ok());
        clock.advance_ms(1);
        assert!(matches!(reg.get_facts("ual:x.example:robot"), Err(FactsError::NotFound(_))));
        // Pruned, not just hidden.
        assert_eq!(reg.len(), 0);
    }

    #[test]
    fn find_by_tag_sorts_by_name_and_drops_expired() {
        let (reg, clock) = registry();
        reg.publish_facts(card("ual:x.example:zeta", &["robot"], 600)).unwrap();
        reg.publish_facts(card("ual:x.example:alpha", &["robot"], 600)).unwrap();
        reg.publish_facts(card("ual:x.example:brief", &["robot"], 1)).unwrap();
        reg.publish_facts(card("ual:x.example:other", &["printer"], 600)).unwrap();

        clock.advance_ms(5_000); // expires "brief"
        let got: Vec<String> =
            reg.find_by_tag("robot").into_iter().map(|c| c.agent_name.canonical()).collect();
        assert_eq!(got, vec!["ual:x.example:alpha".to_string(), "ual:x.example:zeta".to_string()]);
        assert!(reg.find_by_tag("missing-tag").is_empty());
    }

    #[test]
    fn store_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("facts.json");
        let clock = Arc::new(MockClock::new(1_000));
        {
            let reg = FactsRegistry::new(clock.clone()).with_store_file(&path).unwrap();
            reg.publish_facts(card("ual:x.example:robot", &["robot"], 600)).unwrap();
        }
        let reg = FactsRegistry::new(clock).with_store_file(&path).unwrap();
        assert!(reg.get_facts("ual:x.example:robot").is_ok());
    }
}
