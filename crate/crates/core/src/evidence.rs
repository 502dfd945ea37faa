//! Stable identities for atomic evidence units and the acquisition index.
//!
//! An atomic evidence unit is the smallest identifiable piece of external
//! information a trajectory acquires: one search-result item or one fetched
//! page snapshot. Identity is content-derived, so the same page observed in
//! two different trajectories maps to the same unit — the property every
//! cross-trajectory contribution estimate rests on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use url::Url;

use crate::trajectory::{Observation, RolloutGroup};

/// Content-derived identifier of one evidence unit (64 hex chars).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EvidenceId(String);

impl EvidenceId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EvidenceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    SearchItem,
    PageSnapshot,
}

impl fmt::Display for EvidenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvidenceKind::SearchItem => write!(f, "search_item"),
            EvidenceKind::PageSnapshot => write!(f, "page_snapshot"),
        }
    }
}

/// One atomic evidence unit with its stable identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceUnit {
    pub evidence_id: EvidenceId,
    pub kind: EvidenceKind,
    pub canonical_url: String,
    pub content_digest: String,
}

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("malformed url {url:?}: {message}")]
    MalformedUrl { url: String, message: String },
    #[error("answer turns carry no evidence")]
    NoneObservation,
    #[error("unknown trajectory {0}")]
    UnknownTrajectory(String),
    #[error("unknown evidence {0}")]
    UnknownEvidence(EvidenceId),
}

/// Normalizes a URL so that equivalent references compare equal: lowercased
/// scheme and host, fragment dropped, tracking parameters (`utm_*`, `fbclid`,
/// `gclid`) stripped, remaining query parameters sorted by key, and the empty
/// path normalized to `/`.
pub fn canonicalize_url(raw: &str) -> Result<String, EvidenceError> {
    let mut parsed = Url::parse(raw).map_err(|e| EvidenceError::MalformedUrl {
        url: raw.to_string(),
        message: e.to_string(),
    })?;

    parsed.set_fragment(None);

    let mut kept: Vec<(String, String)> = parsed
        .query_pairs()
        .filter(|(key, _)| !is_tracking_param(key))
        .map(|(k, v)| (k.into_owned(), v.into_owned()))
        .collect();
    // Stable sort keeps the relative order of repeated keys.
    kept.sort_by(|a, b| a.0.cmp(&b.0));

    if kept.is_empty() {
        parsed.set_query(None);
    } else {
        let mut serializer = url::form_urlencoded::Serializer::new(String::new());
        for (k, v) in &kept {
            serializer.append_pair(k, v);
        }
        parsed.set_query(Some(&serializer.finish()));
    }

    Ok(parsed.to_string())
}

fn is_tracking_param(key: &str) -> bool {
    key.starts_with("utm_") || key == "fbclid" || key == "gclid"
}

fn hex_sha256(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hex::encode(hasher.finalize())
}

/// Digest of the text a search item actually shows (title and snippet).
pub fn search_item_digest(title: &str, snippet: &str) -> String {
    hex_sha256(&[title.as_bytes(), snippet.as_bytes()])
}

fn evidence_id_for(kind: EvidenceKind, canonical_url: &str, content_digest: &str) -> EvidenceId {
    let tag: &[u8] = match kind {
        EvidenceKind::SearchItem => b"search_item",
        EvidenceKind::PageSnapshot => b"page_snapshot",
    };
    EvidenceId(hex_sha256(&[
        tag,
        canonical_url.as_bytes(),
        content_digest.as_bytes(),
    ]))
}

/// Which trajectories and turns acquired which evidence units, both ways.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AcquisitionIndex {
    by_evidence: BTreeMap<EvidenceId, BTreeSet<(String, u32)>>,
    by_turn: BTreeMap<(String, u32), BTreeSet<EvidenceId>>,
    units: BTreeMap<EvidenceId, EvidenceUnit>,
    turns_seen: BTreeMap<String, BTreeSet<u32>>,
}

impl AcquisitionIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers every evidence unit in a tool observation and updates both
    /// maps. Returns the ids in observation order (duplicates preserved).
    pub fn register_observation(
        &mut self,
        trajectory_id: &str,
        turn_index: u32,
        obs: &Observation,
    ) -> Result<Vec<EvidenceId>, EvidenceError> {
        let units: Vec<EvidenceUnit> = match obs {
            Observation::SearchResults { items } => items
                .iter()
                .map(|item| {
                    let canonical_url = canonicalize_url(&item.url)?;
                    let content_digest = search_item_digest(&item.title, &item.snippet);
                    let evidence_id =
                        evidence_id_for(EvidenceKind::SearchItem, &canonical_url, &content_digest);
                    Ok(EvidenceUnit {
                        evidence_id,
                        kind: EvidenceKind::SearchItem,
                        canonical_url,
                        content_digest,
                    })
                })
                .collect::<Result<_, EvidenceError>>()?,
            Observation::FetchedPages { pages } => pages
                .iter()
                .map(|page| {
                    let canonical_url = canonicalize_url(&page.url)?;
                    let evidence_id = evidence_id_for(
                        EvidenceKind::PageSnapshot,
                        &canonical_url,
                        &page.content_digest,
                    );
                    Ok(EvidenceUnit {
                        evidence_id,
                        kind: EvidenceKind::PageSnapshot,
                        canonical_url,
                        content_digest: page.content_digest.clone(),
                    })
                })
                .collect::<Result<_, EvidenceError>>()?,
            Observation::None {} => return Err(EvidenceError::NoneObservation),
        };

        self.record_turn(trajectory_id, turn_index);
        let key = (trajectory_id.to_string(), turn_index);
        let mut ids = Vec::with_capacity(units.len());
        for unit in units {
            let id = unit.evidence_id.clone();
            self.by_evidence
                .entry(id.clone())
                .or_default()
                .insert(key.clone());
            self.by_turn.entry(key.clone()).or_default().insert(id.clone());
            self.units.entry(id.clone()).or_insert(unit);
            ids.push(id);
        }
        Ok(ids)
    }

    /// Marks a turn as present without attaching evidence (answer turns and
    /// failed tool calls).
    pub fn record_turn(&mut self, trajectory_id: &str, turn_index: u32) {
        self.turns_seen
            .entry(trajectory_id.to_string())
            .or_default()
            .insert(turn_index);
        self.by_turn
            .entry((trajectory_id.to_string(), turn_index))
            .or_default();
    }

    /// All evidence ids, sorted.
    pub fn evidence_ids(&self) -> impl Iterator<Item = &EvidenceId> {
        self.by_evidence.keys()
    }

    pub fn unit(&self, id: &EvidenceId) -> Option<&EvidenceUnit> {
        self.units.get(id)
    }

    pub fn units(&self) -> impl Iterator<Item = &EvidenceUnit> {
        self.units.values()
    }

    pub fn contains_evidence(&self, id: &EvidenceId) -> bool {
        self.by_evidence.contains_key(id)
    }

    /// Every (trajectory, turn) that acquired the unit.
    pub fn acquiring_turns(&self, id: &EvidenceId) -> Option<&BTreeSet<(String, u32)>> {
        self.by_evidence.get(id)
    }

    /// Distinct trajectory ids that acquired the unit at least once; the
    /// acquisition indicator for trajectory n is membership in this set.
    pub fn acquiring_trajectories(&self, id: &EvidenceId) -> BTreeSet<&str> {
        self.by_evidence
            .get(id)
            .map(|turns| turns.iter().map(|(t, _)| t.as_str()).collect())
            .unwrap_or_default()
    }

    /// Per-turn evidence sets for one trajectory; turns without evidence
    /// (answers, failed tool calls) map to the empty set.
    pub fn turn_evidence_sets(
        &self,
        trajectory_id: &str,
    ) -> Result<BTreeMap<u32, BTreeSet<EvidenceId>>, EvidenceError> {
        let turns = self
            .turns_seen
            .get(trajectory_id)
            .ok_or_else(|| EvidenceError::UnknownTrajectory(trajectory_id.to_string()))?;
        let mut map = BTreeMap::new();
        for &turn in turns {
            let set = self
                .by_turn
                .get(&(trajectory_id.to_string(), turn))
                .cloned()
                .unwrap_or_default();
            map.insert(turn, set);
        }
        Ok(map)
    }

    /// Exhaustive inverse-map consistency check.
    pub fn is_consistent(&self) -> bool {
        let forward_ok = self.by_evidence.iter().all(|(id, turns)| {
            turns
                .iter()
                .all(|key| self.by_turn.get(key).is_some_and(|set| set.contains(id)))
        });
        let backward_ok = self.by_turn.iter().all(|(key, set)| {
            set.iter().all(|id| {
                self.by_evidence
                    .get(id)
                    .is_some_and(|turns| turns.contains(key))
            })
        });
        forward_ok && backward_ok
    }
}

/// Builds the acquisition index for a whole rollout group. Every turn of
/// every trajectory is covered; answer turns and failed tool calls contribute
/// empty sets.
pub fn build_index(group: &RolloutGroup) -> Result<AcquisitionIndex, EvidenceError> {
    let mut index = AcquisitionIndex::new();
    for trajectory in &group.trajectories {
        for turn in &trajectory.turns {
            if turn.observation.is_none() {
                index.record_turn(&trajectory.trajectory_id, turn.index);
            } else {
                index.register_observation(
                    &trajectory.trajectory_id,
                    turn.index,
                    &turn.observation,
                )?;
            }
        }
    }
    Ok(index)
}
