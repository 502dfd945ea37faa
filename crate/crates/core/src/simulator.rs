//! Seeded synthetic web world: a page graph, ranked search pools with
//! distractors, and a deterministic success criterion (every gold page
//! fetched before answering).
//!
//! The simulator provides ground truth the credit engine can be checked
//! against: gold pages causally drive success, distractors do not, so their
//! counterfactual contributions must separate. Episodes are pure functions
//! of (world, policy, seed).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evidence::{AcquisitionIndex, EvidenceId};
use crate::policy::{ActionKey, LastActionKind, RolloutPolicy, StateKey};
use crate::trajectory::{
    Action, ContentKind, Observation, PageRef, RolloutGroup, SearchResultItem, Trajectory, Turn,
    SCHEMA_VERSION,
};

/// Seed of the reference world preset.
pub const REFERENCE_WORLD_SEED: u64 = 17;

/// One synthetic page.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageSpec {
    pub url: String,
    pub payload_digest: String,
    pub token_cost: u64,
    pub gold_for: Vec<String>,
    pub is_distractor: bool,
}

/// One query with its gold evidence and ranked search pools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub query_id: String,
    pub query_text: String,
    pub gold_evidence: Vec<String>,
    /// Pool key -> ranked url list. Keys sort to define pool indices.
    pub search_pools: BTreeMap<String, Vec<String>>,
}

impl QuerySpec {
    /// Gold urls in sorted order; bit i of a state's gold mask tracks the
    /// i-th entry.
    pub fn sorted_gold(&self) -> Vec<String> {
        let mut gold = self.gold_evidence.clone();
        gold.sort();
        gold
    }

    pub fn pool_keys(&self) -> Vec<&String> {
        self.search_pools.keys().collect()
    }
}

/// A full synthetic world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub pages: Vec<PageSpec>,
    pub queries: Vec<QuerySpec>,
    pub results_per_search: u32,
    pub max_turns: u32,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("infeasible world spec: {0}")]
    InfeasibleSpec(String),
    #[error("unknown query {0}")]
    UnknownQuery(String),
    #[error("rollout group size {0} is below the minimum of 2")]
    BadGroupSize(usize),
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("trajectory does not replay against this world: {0}")]
    TraceMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed world file: {0}")]
    MalformedFile(String),
}

impl WorldSpec {
    pub fn query(&self, query_id: &str) -> Option<&QuerySpec> {
        self.queries.iter().find(|q| q.query_id == query_id)
    }

    pub fn page(&self, url: &str) -> Option<&PageSpec> {
        self.pages.iter().find(|p| p.url == url)
    }

    /// Structural invariants of the world.
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if self.max_turns < 3 {
            return Err(SimulatorError::InvalidWorld(format!(
                "max_turns {} is below 3",
                self.max_turns
            )));
        }
        if self.results_per_search < 1 {
            return Err(SimulatorError::InvalidWorld(
                "results_per_search must be at least 1".to_string(),
            ));
        }
        for query in &self.queries {
            if query.gold_evidence.is_empty() {
                return Err(SimulatorError::InvalidWorld(format!(
                    "query {} has no gold evidence",
                    query.query_id
                )));
            }
            if query.gold_evidence.len() > 32 {
                return Err(SimulatorError::InvalidWorld(format!(
                    "query {} has more than 32 gold pages",
                    query.query_id
                )));
            }
            for url in &query.gold_evidence {
                let page = self.page(url).ok_or_else(|| {
                    SimulatorError::InvalidWorld(format!("gold url {url} resolves to no page"))
                })?;
                if page.is_distractor {
                    return Err(SimulatorError::InvalidWorld(format!(
                        "page {url} is both gold for {} and a distractor",
                        query.query_id
                    )));
                }
                let in_some_pool = query
                    .search_pools
                    .values()
                    .any(|pool| pool.iter().any(|u| u == url));
                if !in_some_pool {
                    return Err(SimulatorError::InvalidWorld(format!(
                        "gold url {url} appears in no search pool of {}",
                        query.query_id
                    )));
                }
            }
            for pool in query.search_pools.values() {
                for url in pool {
                    if self.page(url).is_none() {
                        return Err(SimulatorError::InvalidWorld(format!(
                            "pool url {url} resolves to no page"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SimulatorError> {
        let world: WorldSpec =
            serde_json::from_str(text).map_err(|e| SimulatorError::MalformedFile(e.to_string()))?;
        world.validate()?;
        Ok(world)
    }

    pub fn save(&self, path: &Path) -> Result<(), SimulatorError> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SimulatorError> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

fn hex_digest(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hex::encode(hasher.finalize())
}

/// Parameters for [`generate_world`].
#[derive(Debug, Clone, Copy)]
pub struct WorldGenParams {
    pub n_pages: usize,
    pub n_gold_per_query: usize,
    pub n_queries: usize,
    /// Distractors per gold page in every search pool.
    pub distractor_ratio: usize,
    pub seed: u64,
}

impl WorldGenParams {
    /// The reference preset: 20 pages, 2 gold per query, 5 queries,
    /// distractor ratio 4.
    pub fn reference() -> Self {
        Self {
            n_pages: 20,
            n_gold_per_query: 2,
            n_queries: 5,
            distractor_ratio: 4,
            seed: REFERENCE_WORLD_SEED,
        }
    }
}

/// Deterministically generates a world from the parameters. Each query gets
/// one search pool per gold page; the gold page sits at a seeded rank so it
/// is not trivially top-ranked, padded with distractor pages.
pub fn generate_world(params: WorldGenParams) -> Result<WorldSpec, SimulatorError> {
    if params.n_gold_per_query < 1 {
        return Err(SimulatorError::InfeasibleSpec(
            "need at least one gold page per query".to_string(),
        ));
    }
    if params.n_queries < 1 {
        return Err(SimulatorError::InfeasibleSpec(
            "need at least one query".to_string(),
        ));
    }
    let gold_total = params.n_queries * params.n_gold_per_query;
    let needed = gold_total + params.distractor_ratio;
    if params.n_pages < needed {
        return Err(SimulatorError::InfeasibleSpec(format!(
            "{} pages cannot host {} gold pages plus {} pool distractors",
            params.n_pages, gold_total, params.distractor_ratio
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let seed_bytes = params.seed.to_le_bytes();

    let urls: Vec<String> = (0..params.n_pages)
        .map(|i| format!("https://sim.test/page/{i:03}"))
        .collect();
    let mut pages: Vec<PageSpec> = urls
        .iter()
        .map(|url| PageSpec {
            url: url.clone(),
            payload_digest: hex_digest(&[&seed_bytes, url.as_bytes()]),
            token_cost: rng.random_range(120..=600),
            gold_for: Vec::new(),
            is_distractor: false,
        })
        .collect();

    let mut order: Vec<usize> = (0..params.n_pages).collect();
    order.shuffle(&mut rng);
    let gold_indices = &order[..gold_total];
    let distractor_indices: Vec<usize> = order[gold_total..].to_vec();
    for &i in &distractor_indices {
        pages[i].is_distractor = true;
    }

    let pool_size = 1 + params.distractor_ratio;
    let mut queries = Vec::with_capacity(params.n_queries);
    for q in 0..params.n_queries {
        let query_id = format!("q{}", q + 1);
        let gold: Vec<String> = gold_indices[q * params.n_gold_per_query..]
            .iter()
            .take(params.n_gold_per_query)
            .map(|&i| {
                pages[i].gold_for.push(query_id.clone());
                urls[i].clone()
            })
            .collect();

        let mut search_pools = BTreeMap::new();
        for (j, gold_url) in gold.iter().enumerate() {
            let mut slots: Vec<String> = Vec::with_capacity(pool_size);
            let mut shuffled = distractor_indices.clone();
            shuffled.shuffle(&mut rng);
            for &i in shuffled.iter().take(params.distractor_ratio) {
                slots.push(urls[i].clone());
            }
            let gold_rank = rng.random_range(0..=slots.len());
            slots.insert(gold_rank, gold_url.clone());
            search_pools.insert(format!("pool-{j}"), slots);
        }

        queries.push(QuerySpec {
            query_id,
            query_text: format!("locate the gold evidence for topic {}", q + 1),
            gold_evidence: gold,
            search_pools,
        });
    }

    let world = WorldSpec {
        pages,
        queries,
        results_per_search: pool_size as u32,
        max_turns: (2 * params.n_gold_per_query as u32 + 4).max(3),
        seed: params.seed,
    };
    world.validate().map_err(|e| match e {
        SimulatorError::InvalidWorld(msg) => SimulatorError::InfeasibleSpec(msg),
        other => other,
    })?;
    Ok(world)
}

/// The reference world used by comparisons and tests.
pub fn reference_world() -> WorldSpec {
    generate_world(WorldGenParams::reference()).expect("reference preset is feasible")
}

/// Valid actions given how many pools the query has and how many results the
/// previous turn surfaced (0 unless the previous action was a search).
pub fn valid_actions(n_pools: usize, last_result_count: usize) -> Vec<ActionKey> {
    let mut actions = Vec::with_capacity(n_pools + last_result_count + 1);
    for p in 0..n_pools.min(u8::MAX as usize) {
        actions.push(ActionKey::Search(p as u8));
    }
    for r in 1..=last_result_count.min(u8::MAX as usize) {
        actions.push(ActionKey::Fetch(r as u8));
    }
    actions.push(ActionKey::Answer);
    actions
}

fn result_items(world: &WorldSpec, pool: &[String]) -> Vec<SearchResultItem> {
    pool.iter()
        .take(world.results_per_search as usize)
        .enumerate()
        .map(|(i, url)| {
            let page = world.page(url).expect("validated world resolves pool urls");
            SearchResultItem {
                url: url.clone(),
                title: format!("{} [{}]", url, &page.payload_digest[..8]),
                snippet: format!("excerpt {}", &page.payload_digest[8..24]),
                rank: i as u32 + 1,
            }
        })
        .collect()
}

/// Runs one episode: the policy alternates search/fetch until it answers or
/// the turn cap forces an answer. Outcome is 1 iff every gold page was
/// fetched before answering. Every turn generates exactly one token.
pub fn run_episode(
    world: &WorldSpec,
    query_id: &str,
    policy: &mut dyn RolloutPolicy,
    seed: u64,
) -> Result<Trajectory, SimulatorError> {
    let query = world
        .query(query_id)
        .ok_or_else(|| SimulatorError::UnknownQuery(query_id.to_string()))?;
    let gold = query.sorted_gold();
    let full_mask: u32 = if gold.is_empty() {
        0
    } else {
        (1u32 << gold.len()) - 1
    };
    let n_pools = query.search_pools.len();
    let pool_keys: Vec<String> = query.search_pools.keys().cloned().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    policy.begin_episode(query_id);

    let trajectory_id = format!("{query_id}-{seed:016x}");
    let mut turns: Vec<Turn> = Vec::new();
    let mut gold_mask = 0u32;
    let mut last_action = LastActionKind::None;
    let mut last_results: Vec<String> = Vec::new();

    for t in 1..=world.max_turns {
        let state = StateKey {
            query_id: query_id.to_string(),
            gold_mask,
            last_action,
        };
        let chosen = if t == world.max_turns {
            // Truncation forces the terminal answer.
            ActionKey::Answer
        } else {
            let result_count = if last_action == LastActionKind::Search {
                last_results.len()
            } else {
                0
            };
            let valid = valid_actions(n_pools, result_count);
            let mut draw = || rng.random::<f64>();
            policy.choose(&state, &valid, &mut draw)
        };

        let reasoning_digest = hex_digest(&[trajectory_id.as_bytes(), &t.to_le_bytes()])[..16]
            .to_string();

        match chosen {
            ActionKey::Search(p) => {
                let key = &pool_keys[p as usize];
                let items = result_items(world, &query.search_pools[key]);
                last_results = items.iter().map(|i| i.url.clone()).collect();
                last_action = LastActionKind::Search;
                turns.push(Turn {
                    index: t,
                    reasoning_digest,
                    action: Action::Search {
                        queries: vec![key.clone()],
                    },
                    observation: Observation::SearchResults { items },
                    generated_token_count: 1,
                });
            }
            ActionKey::Fetch(r) => {
                let url = last_results[(r - 1) as usize].clone();
                let page = world.page(&url).expect("validated world resolves urls");
                if let Some(bit) = gold.iter().position(|g| *g == url) {
                    gold_mask |= 1 << bit;
                }
                last_action = LastActionKind::Fetch;
                last_results.clear();
                turns.push(Turn {
                    index: t,
                    reasoning_digest,
                    action: Action::Fetch {
                        urls: vec![url.clone()],
                    },
                    observation: Observation::FetchedPages {
                        pages: vec![PageRef {
                            url,
                            content_digest: page.payload_digest.clone(),
                            content_kind: ContentKind::Snapshot,
                            token_count: page.token_cost,
                        }],
                    },
                    generated_token_count: 1,
                });
            }
            ActionKey::Answer => {
                turns.push(Turn {
                    index: t,
                    reasoning_digest,
                    action: Action::Answer {
                        answer_text: format!("answer:{query_id}:{gold_mask:b}"),
                    },
                    observation: Observation::none(),
                    generated_token_count: 1,
                });
                break;
            }
        }
    }

    let outcome = u8::from(gold_mask == full_mask && !gold.is_empty());
    Ok(Trajectory {
        schema_version: SCHEMA_VERSION,
        trajectory_id,
        query_id: query_id.to_string(),
        query_text: query.query_text.clone(),
        outcome,
        total_generated_tokens: turns.len() as u64,
        turns,
    })
}

/// Samples a group of episodes with derived seeds `seed+1..seed+G`.
pub fn rollout_group(
    world: &WorldSpec,
    query_id: &str,
    policy: &mut dyn RolloutPolicy,
    group_size: usize,
    seed: u64,
) -> Result<RolloutGroup, SimulatorError> {
    if group_size < 2 {
        return Err(SimulatorError::BadGroupSize(group_size));
    }
    let mut trajectories = Vec::with_capacity(group_size);
    for n in 1..=group_size as u64 {
        trajectories.push(run_episode(world, query_id, policy, seed.wrapping_add(n))?);
    }
    Ok(RolloutGroup {
        query_id: query_id.to_string(),
        trajectories,
    })
}

/// One policy decision recovered from a trajectory: the state the policy saw,
/// the action it took, and the actions that were valid there.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTurn {
    pub trajectory_id: String,
    pub turn_index: u32,
    pub state: StateKey,
    pub action: ActionKey,
    pub valid: Vec<ActionKey>,
}

/// Replays a simulator trajectory against its world, recovering the
/// (state, action) decision at every turn. Fails on trajectories the
/// simulator could not have produced.
pub fn decision_trace(
    world: &WorldSpec,
    trajectory: &Trajectory,
) -> Result<Vec<DecisionTurn>, SimulatorError> {
    let query = world
        .query(&trajectory.query_id)
        .ok_or_else(|| SimulatorError::UnknownQuery(trajectory.query_id.clone()))?;
    let gold = query.sorted_gold();
    let pool_keys = query.pool_keys();

    let mut decisions = Vec::with_capacity(trajectory.turns.len());
    let mut gold_mask = 0u32;
    let mut last_action = LastActionKind::None;
    let mut last_results: Vec<String> = Vec::new();

    for turn in &trajectory.turns {
        let result_count = if last_action == LastActionKind::Search {
            last_results.len()
        } else {
            0
        };
        let state = StateKey {
            query_id: trajectory.query_id.clone(),
            gold_mask,
            last_action,
        };
        let valid = valid_actions(pool_keys.len(), result_count);

        let action = match &turn.action {
            Action::Search { queries } => {
                let key = queries.first().ok_or_else(|| {
                    SimulatorError::TraceMismatch("search action with no query".to_string())
                })?;
                let pool = pool_keys.iter().position(|k| *k == key).ok_or_else(|| {
                    SimulatorError::TraceMismatch(format!("unknown search pool {key}"))
                })?;
                ActionKey::Search(pool as u8)
            }
            Action::Fetch { urls } => {
                let url = urls.first().ok_or_else(|| {
                    SimulatorError::TraceMismatch("fetch action with no url".to_string())
                })?;
                let rank = last_results.iter().position(|u| u == url).ok_or_else(|| {
                    SimulatorError::TraceMismatch(format!(
                        "fetched {url} absent from previous results"
                    ))
                })?;
                ActionKey::Fetch(rank as u8 + 1)
            }
            Action::Answer { .. } => ActionKey::Answer,
        };

        decisions.push(DecisionTurn {
            trajectory_id: trajectory.trajectory_id.clone(),
            turn_index: turn.index,
            state,
            action,
            valid,
        });

        match &turn.action {
            Action::Search { .. } => {
                last_action = LastActionKind::Search;
                last_results = match &turn.observation {
                    Observation::SearchResults { items } => {
                        items.iter().map(|i| i.url.clone()).collect()
                    }
                    _ => Vec::new(),
                };
            }
            Action::Fetch { urls } => {
                last_action = LastActionKind::Fetch;
                last_results.clear();
                for url in urls {
                    if let Some(bit) = gold.iter().position(|g| g == url) {
                        gold_mask |= 1 << bit;
                    }
                }
            }
            Action::Answer { .. } => {}
        }
    }

    Ok(decisions)
}

/// Brute-force counterfactual contributions: for every evidence unit, loop
/// over the trajectories, tally the four conditional counts directly, apply
/// the batch-rate fallback on empty branches, and take the difference. This
/// is the independent oracle the credit engine's estimator is checked
/// against.
pub fn oracle_delta(
    group: &RolloutGroup,
    index: &AcquisitionIndex,
) -> BTreeMap<EvidenceId, f64> {
    let n = group.len();
    if n == 0 {
        return BTreeMap::new();
    }
    let mut successes = 0usize;
    for trajectory in &group.trajectories {
        if trajectory.succeeded() {
            successes += 1;
        }
    }
    let batch_rate = successes as f64 / n as f64;

    let mut deltas = BTreeMap::new();
    for evidence_id in index.evidence_ids() {
        let mut acquired_success = 0usize;
        let mut acquired_count = 0usize;
        let mut other_success = 0usize;
        let mut other_count = 0usize;

        for trajectory in &group.trajectories {
            let turn_sets = index
                .turn_evidence_sets(&trajectory.trajectory_id)
                .unwrap_or_default();
            let acquired = turn_sets.values().any(|set| set.contains(evidence_id));
            if acquired {
                acquired_count += 1;
                if trajectory.succeeded() {
                    acquired_success += 1;
                }
            } else {
                other_count += 1;
                if trajectory.succeeded() {
                    other_success += 1;
                }
            }
        }

        let p1 = if acquired_count > 0 {
            acquired_success as f64 / acquired_count as f64
        } else {
            batch_rate
        };
        let p0 = if other_count > 0 {
            other_success as f64 / other_count as f64
        } else {
            batch_rate
        };
        deltas.insert(evidence_id.clone(), p1 - p0);
    }
    deltas
}
