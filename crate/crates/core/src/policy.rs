//! Tabular softmax policy over discretized simulator states.
//!
//! States are (query, bitmask of gold pages fetched so far, last action
//! kind); actions pick a search pool, a result rank to fetch, or answer.
//! The preference table is sparse: absent entries mean preference 0, so a
//! fresh policy is uniform over whatever actions are valid.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Kind of the previous turn's action, as seen by the state encoding.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum LastActionKind {
    None,
    Search,
    Fetch,
}

/// Discretized simulator state.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateKey {
    pub query_id: String,
    /// Bit i set iff the i-th gold url (sorted order) has been fetched.
    pub gold_mask: u32,
    pub last_action: LastActionKind,
}

/// Discrete action available to the tabular policy.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ActionKey {
    /// Search the pool with this index (sorted pool-key order).
    Search(u8),
    /// Fetch the result at this 1-based rank of the previous search.
    Fetch(u8),
    Answer,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no valid actions for state {0:?}")]
    NoValidActions(String),
    #[error("malformed policy file: {0}")]
    MalformedFile(String),
}

/// Softmax policy backed by a sparse preference table.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    preferences: BTreeMap<(StateKey, ActionKey), f64>,
    temperature: f64,
}

impl Default for SoftmaxPolicy {
    fn default() -> Self {
        Self::new(1.0)
    }
}

impl SoftmaxPolicy {
    pub fn new(temperature: f64) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        Self {
            preferences: BTreeMap::new(),
            temperature,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn preference(&self, state: &StateKey, action: ActionKey) -> f64 {
        self.preferences
            .get(&(state.clone(), action))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn adjust_preference(&mut self, state: &StateKey, action: ActionKey, delta: f64) {
        *self
            .preferences
            .entry((state.clone(), action))
            .or_insert(0.0) += delta;
    }

    pub fn entry_count(&self) -> usize {
        self.preferences.len()
    }

    /// Action probabilities over the valid set, in the order given.
    pub fn action_probs(&self, state: &StateKey, valid: &[ActionKey]) -> Vec<f64> {
        assert!(!valid.is_empty(), "valid action set must not be empty");
        let logits: Vec<f64> = valid
            .iter()
            .map(|a| self.preference(state, *a) / self.temperature)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    }

    /// Samples one valid action by inverse CDF.
    pub fn sample(&self, state: &StateKey, valid: &[ActionKey], rng: &mut impl Rng) -> ActionKey {
        let probs = self.action_probs(state, valid);
        let draw: f64 = rng.random();
        let mut acc = 0.0;
        for (action, p) in valid.iter().zip(&probs) {
            acc += p;
            if draw < acc {
                return *action;
            }
        }
        *valid.last().expect("non-empty valid set")
    }

    pub fn to_json(&self) -> String {
        let entries: Vec<PolicyEntry> = self
            .preferences
            .iter()
            .map(|((state, action), value)| PolicyEntry {
                state: state.clone(),
                action: *action,
                preference: *value,
            })
            .collect();
        let file = PolicyFile {
            temperature: self.temperature,
            entries,
        };
        serde_json::to_string_pretty(&file).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let file: PolicyFile =
            serde_json::from_str(text).map_err(|e| PolicyError::MalformedFile(e.to_string()))?;
        if !(file.temperature > 0.0) {
            return Err(PolicyError::MalformedFile(
                "temperature must be positive".to_string(),
            ));
        }
        let mut policy = SoftmaxPolicy::new(file.temperature);
        for entry in file.entries {
            policy
                .preferences
                .insert((entry.state, entry.action), entry.preference);
        }
        Ok(policy)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    temperature: f64,
    entries: Vec<PolicyEntry>,
}

#[derive(Serialize, Deserialize)]
struct PolicyEntry {
    state: StateKey,
    action: ActionKey,
    preference: f64,
}

/// Anything that can drive an episode: the trained softmax policy, a fixed
/// script, or uniform random play.
pub trait RolloutPolicy {
    /// Called once at the start of each episode.
    fn begin_episode(&mut self, _query_id: &str) {}

    fn choose(&mut self, state: &StateKey, valid: &[ActionKey], rng: &mut dyn FnMut() -> f64)
        -> ActionKey;
}

impl RolloutPolicy for SoftmaxPolicy {
    fn choose(
        &mut self,
        state: &StateKey,
        valid: &[ActionKey],
        rng: &mut dyn FnMut() -> f64,
    ) -> ActionKey {
        let probs = self.action_probs(state, valid);
        let draw = rng();
        let mut acc = 0.0;
        for (action, p) in valid.iter().zip(&probs) {
            acc += p;
            if draw < acc {
                return *action;
            }
        }
        *valid.last().expect("non-empty valid set")
    }
}

/// Replays a fixed action sequence per query; answers when the script runs
/// out or the next scripted action is invalid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub scripts: BTreeMap<String, Vec<ActionKey>>,
    #[serde(skip)]
    cursor: usize,
    #[serde(skip)]
    current_query: String,
}

impl ScriptedPolicy {
    pub fn new(scripts: BTreeMap<String, Vec<ActionKey>>) -> Self {
        Self {
            scripts,
            cursor: 0,
            current_query: String::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let scripts: BTreeMap<String, Vec<ActionKey>> =
            serde_json::from_str(text).map_err(|e| PolicyError::MalformedFile(e.to_string()))?;
        Ok(Self::new(scripts))
    }
}

impl RolloutPolicy for ScriptedPolicy {
    fn begin_episode(&mut self, query_id: &str) {
        self.cursor = 0;
        self.current_query = query_id.to_string();
    }

    fn choose(
        &mut self,
        _state: &StateKey,
        valid: &[ActionKey],
        _rng: &mut dyn FnMut() -> f64,
    ) -> ActionKey {
        let next = self
            .scripts
            .get(&self.current_query)
            .and_then(|script| script.get(self.cursor))
            .copied();
        self.cursor += 1;
        match next {
            Some(action) if valid.contains(&action) => action,
            _ => ActionKey::Answer,
        }
    }
}
