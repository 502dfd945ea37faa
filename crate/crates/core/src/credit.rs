//! The credit engine: counterfactual evidence contributions, turn-level
//! aggregation, fetch-only temporal decay, tool-wise and batch-wise
//! normalization, and the mixed per-turn advantage.
//!
//! Everything is computed per rollout group. For each evidence unit the
//! engine estimates the empirical success probability conditioned on
//! acquiring it versus not; the difference is the unit's counterfactual
//! contribution. Turn credits average the contributions of the units the
//! turn introduced, fetch credits decay toward earlier turns, and credits
//! are standardized per tool before being mixed with the group-normalized
//! terminal outcome.
//!
//! All summations run in input order, so identical inputs produce
//! bit-identical tables regardless of scheduling.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::{AcquisitionIndex, EvidenceError, EvidenceId};
use crate::trajectory::{RolloutGroup, ToolKind};

/// Knobs of the credit computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CreditConfig {
    /// Temporal decay factor applied to fetch turns, in (0, 1].
    pub omega: f64,
    /// Weight of the per-turn advantage in the mixed signal.
    pub lambda_weight: f64,
    /// Additive guard on every standard deviation.
    pub epsilon: f64,
    /// Compute tool statistics over decayed credits (true) or raw credits.
    pub normalize_decayed: bool,
}

impl Default for CreditConfig {
    fn default() -> Self {
        Self {
            omega: 0.95,
            lambda_weight: 1.0,
            epsilon: 1e-6,
            normalize_decayed: true,
        }
    }
}

impl CreditConfig {
    pub fn validate(&self) -> Result<(), CreditError> {
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(CreditError::InvalidConfig(format!(
                "omega {} outside (0, 1]",
                self.omega
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(CreditError::InvalidConfig(format!(
                "epsilon {} must be positive",
                self.epsilon
            )));
        }
        if self.lambda_weight < 0.0 {
            return Err(CreditError::InvalidConfig(format!(
                "lambda_weight {} must be non-negative",
                self.lambda_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CreditError {
    #[error("empty rollout group")]
    EmptyGroup,
    #[error("group of size {0} is too small; need at least 2 trajectories")]
    GroupTooSmall(usize),
    #[error("unknown evidence {0}")]
    UnknownEvidence(EvidenceId),
    #[error("missing contribution for evidence {0}")]
    MissingContribution(EvidenceId),
    #[error("turn {turn} is not a tool turn of a {total}-turn trajectory")]
    BadTurnIndex { turn: u32, total: u32 },
    #[error("missing turn ({trajectory_id}, {turn_index}) in advantage table")]
    MissingTurn {
        trajectory_id: String,
        turn_index: u32,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
}

/// Which conditional estimator branches fell back to the batch success rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackBranch {
    None,
    PosBranch,
    NegBranch,
    Both,
}

/// Counterfactual contribution of one evidence unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceContribution {
    pub evidence_id: EvidenceId,
    pub p_success_given_acquired: f64,
    pub p_success_given_not: f64,
    pub delta: f64,
    pub fallback_used: FallbackBranch,
}

/// Credit state of one tool turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnCredit {
    pub trajectory_id: String,
    pub turn_index: u32,
    pub tool_kind: ToolKind,
    pub raw_credit: f64,
    pub decayed_credit: f64,
    pub normalized_advantage: f64,
}

/// Population mean and standard deviation of one tool group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToolStats {
    pub mu: f64,
    pub sigma: f64,
}

/// All statistics a group's advantage computation used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mu_r: f64,
    pub sigma_r: f64,
    pub tool: BTreeMap<ToolKind, ToolStats>,
}

/// Full per-group credit table: contributions, turn credits, terminal
/// advantages, and the mixed advantage of every turn.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageTable {
    pub query_id: String,
    pub contributions: BTreeMap<EvidenceId, EvidenceContribution>,
    /// Tool turns in batch order (trajectory order, then turn order).
    pub turn_credits: Vec<TurnCredit>,
    /// Group-normalized terminal outcome per trajectory.
    pub task_advantage: BTreeMap<String, f64>,
    /// Normalized advantage of every turn; the terminal turn carries the
    /// task advantage itself.
    pub normalized_advantage: BTreeMap<(String, u32), f64>,
    /// task advantage + lambda * normalized advantage, for every turn.
    pub mixed_advantage: BTreeMap<(String, u32), f64>,
    pub stats: GroupStats,
    pub config: CreditConfig,
}

impl AdvantageTable {
    pub fn mixed(&self, trajectory_id: &str, turn_index: u32) -> Option<f64> {
        self.mixed_advantage
            .get(&(trajectory_id.to_string(), turn_index))
            .copied()
    }
}

fn population_stats(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Mean outcome over the group.
pub fn batch_success_rate(group: &RolloutGroup) -> Result<f64, CreditError> {
    if group.is_empty() {
        return Err(CreditError::EmptyGroup);
    }
    let sum: u64 = group.trajectories.iter().map(|t| t.outcome as u64).sum();
    Ok(sum as f64 / group.len() as f64)
}

/// Conditional success estimators and the counterfactual contribution for
/// one evidence unit. A zero denominator on either branch falls back to the
/// batch success rate and is flagged.
pub fn conditional_success(
    evidence_id: &EvidenceId,
    index: &AcquisitionIndex,
    group: &RolloutGroup,
) -> Result<EvidenceContribution, CreditError> {
    if !index.contains_evidence(evidence_id) {
        return Err(CreditError::UnknownEvidence(evidence_id.clone()));
    }
    let batch_rate = batch_success_rate(group)?;
    let acquirers = index.acquiring_trajectories(evidence_id);

    let mut acquired_successes = 0u64;
    let mut acquired_total = 0u64;
    let mut other_successes = 0u64;
    let mut other_total = 0u64;
    for trajectory in &group.trajectories {
        if acquirers.contains(trajectory.trajectory_id.as_str()) {
            acquired_total += 1;
            acquired_successes += trajectory.outcome as u64;
        } else {
            other_total += 1;
            other_successes += trajectory.outcome as u64;
        }
    }

    let (p_acquired, pos_fell_back) = if acquired_total > 0 {
        (acquired_successes as f64 / acquired_total as f64, false)
    } else {
        (batch_rate, true)
    };
    let (p_not, neg_fell_back) = if other_total > 0 {
        (other_successes as f64 / other_total as f64, false)
    } else {
        (batch_rate, true)
    };
    let fallback_used = match (pos_fell_back, neg_fell_back) {
        (false, false) => FallbackBranch::None,
        (true, false) => FallbackBranch::PosBranch,
        (false, true) => FallbackBranch::NegBranch,
        (true, true) => FallbackBranch::Both,
    };

    Ok(EvidenceContribution {
        evidence_id: evidence_id.clone(),
        p_success_given_acquired: p_acquired,
        p_success_given_not: p_not,
        delta: p_acquired - p_not,
        fallback_used,
    })
}

/// Mean contribution over the units a turn introduced; empty turns (failed
/// tool calls) credit 0.
pub fn turn_raw_credit(
    deltas: &BTreeMap<EvidenceId, f64>,
    turn_set: &BTreeSet<EvidenceId>,
) -> Result<f64, CreditError> {
    if turn_set.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for id in turn_set {
        let delta = deltas
            .get(id)
            .ok_or_else(|| CreditError::MissingContribution(id.clone()))?;
        sum += delta;
    }
    Ok(sum / turn_set.len() as f64)
}

/// Temporal decay: fetch credits scale by omega^(T_n - t - 1), search
/// credits pass through unchanged.
pub fn apply_decay(
    raw: f64,
    tool: ToolKind,
    turn_index: u32,
    total_turns: u32,
    cfg: &CreditConfig,
) -> Result<f64, CreditError> {
    if turn_index < 1 || turn_index >= total_turns {
        return Err(CreditError::BadTurnIndex {
            turn: turn_index,
            total: total_turns,
        });
    }
    match tool {
        ToolKind::Search => Ok(raw),
        ToolKind::Fetch => {
            let exponent = (total_turns - turn_index - 1) as i32;
            Ok(raw * cfg.omega.powi(exponent))
        }
    }
}

/// Standardizes turn credits per tool with population statistics over the
/// whole batch. Returns the filled credits plus the statistics used.
pub fn normalize_tool_groups(
    mut credits: Vec<TurnCredit>,
    cfg: &CreditConfig,
) -> (Vec<TurnCredit>, BTreeMap<ToolKind, ToolStats>) {
    let value_of = |credit: &TurnCredit| {
        if cfg.normalize_decayed {
            credit.decayed_credit
        } else {
            credit.raw_credit
        }
    };

    let mut stats = BTreeMap::new();
    for tool in [ToolKind::Search, ToolKind::Fetch] {
        let values: Vec<f64> = credits
            .iter()
            .filter(|c| c.tool_kind == tool)
            .map(value_of)
            .collect();
        if values.is_empty() {
            continue;
        }
        let (mu, sigma) = population_stats(&values);
        stats.insert(tool, ToolStats { mu, sigma });
    }

    for credit in &mut credits {
        let ToolStats { mu, sigma } = stats[&credit.tool_kind];
        credit.normalized_advantage = (value_of(credit) - mu) / (sigma + cfg.epsilon);
    }
    (credits, stats)
}

/// Group-normalized terminal outcomes: A_n = (R_n - mu_R) / (sigma_R + eps).
pub fn terminal_advantage(
    group: &RolloutGroup,
    cfg: &CreditConfig,
) -> Result<BTreeMap<String, f64>, CreditError> {
    let (advantages, _, _) = terminal_advantage_with_stats(group, cfg)?;
    Ok(advantages)
}

fn terminal_advantage_with_stats(
    group: &RolloutGroup,
    cfg: &CreditConfig,
) -> Result<(BTreeMap<String, f64>, f64, f64), CreditError> {
    if group.len() < 2 {
        return Err(CreditError::GroupTooSmall(group.len()));
    }
    let outcomes: Vec<f64> = group
        .trajectories
        .iter()
        .map(|t| t.outcome as f64)
        .collect();
    let (mu_r, sigma_r) = population_stats(&outcomes);
    let advantages = group
        .trajectories
        .iter()
        .map(|t| {
            (
                t.trajectory_id.clone(),
                (t.outcome as f64 - mu_r) / (sigma_r + cfg.epsilon),
            )
        })
        .collect();
    Ok((advantages, mu_r, sigma_r))
}

/// Runs the whole credit pipeline for one group: contributions, raw credits,
/// decay, tool-wise normalization, terminal advantages, and the mixed
/// advantage of every turn. The terminal turn's normalized advantage is the
/// task advantage itself, so its mixed advantage is (1 + lambda) * A_n.
pub fn compute_advantage_table(
    group: &RolloutGroup,
    index: &AcquisitionIndex,
    cfg: &CreditConfig,
) -> Result<AdvantageTable, CreditError> {
    cfg.validate()?;
    if group.len() < 2 {
        return Err(CreditError::GroupTooSmall(group.len()));
    }

    let mut contributions = BTreeMap::new();
    let mut deltas = BTreeMap::new();
    for evidence_id in index.evidence_ids() {
        let contribution = conditional_success(evidence_id, index, group)?;
        deltas.insert(evidence_id.clone(), contribution.delta);
        contributions.insert(evidence_id.clone(), contribution);
    }

    let mut credits = Vec::new();
    for trajectory in &group.trajectories {
        let turn_sets = index.turn_evidence_sets(&trajectory.trajectory_id)?;
        let total_turns = trajectory.turn_count();
        for turn in &trajectory.turns {
            let Some(tool_kind) = turn.action.tool_kind() else {
                continue;
            };
            let empty = BTreeSet::new();
            let turn_set = turn_sets.get(&turn.index).unwrap_or(&empty);
            let raw_credit = turn_raw_credit(&deltas, turn_set)?;
            let decayed_credit = apply_decay(raw_credit, tool_kind, turn.index, total_turns, cfg)?;
            credits.push(TurnCredit {
                trajectory_id: trajectory.trajectory_id.clone(),
                turn_index: turn.index,
                tool_kind,
                raw_credit,
                decayed_credit,
                normalized_advantage: 0.0,
            });
        }
    }

    let (turn_credits, tool_stats) = normalize_tool_groups(credits, cfg);
    let (task_advantage, mu_r, sigma_r) = terminal_advantage_with_stats(group, cfg)?;

    let mut normalized_advantage = BTreeMap::new();
    for credit in &turn_credits {
        normalized_advantage.insert(
            (credit.trajectory_id.clone(), credit.turn_index),
            credit.normalized_advantage,
        );
    }
    for trajectory in &group.trajectories {
        let a_n = task_advantage[&trajectory.trajectory_id];
        normalized_advantage.insert(
            (trajectory.trajectory_id.clone(), trajectory.turn_count()),
            a_n,
        );
    }

    let mut mixed_advantage = BTreeMap::new();
    for trajectory in &group.trajectories {
        let a_n = task_advantage[&trajectory.trajectory_id];
        for turn in &trajectory.turns {
            let key = (trajectory.trajectory_id.clone(), turn.index);
            let normalized = normalized_advantage[&key];
            mixed_advantage.insert(key, a_n + cfg.lambda_weight * normalized);
        }
    }

    Ok(AdvantageTable {
        query_id: group.query_id.clone(),
        contributions,
        turn_credits,
        task_advantage,
        normalized_advantage,
        mixed_advantage,
        stats: GroupStats {
            mu_r,
            sigma_r,
            tool: tool_stats,
        },
        config: *cfg,
    })
}

/// Broadcasts each turn's mixed advantage over its policy-generated tokens.
/// Returns (token_count, advantage) per turn; observation tokens never
/// receive an advantage because they are never counted.
pub fn broadcast_to_tokens(
    table: &AdvantageTable,
    group: &RolloutGroup,
) -> Result<BTreeMap<(String, u32), (u64, f64)>, CreditError> {
    let mut out = BTreeMap::new();
    for trajectory in &group.trajectories {
        for turn in &trajectory.turns {
            let key = (trajectory.trajectory_id.clone(), turn.index);
            let advantage =
                table
                    .mixed_advantage
                    .get(&key)
                    .copied()
                    .ok_or(CreditError::MissingTurn {
                        trajectory_id: trajectory.trajectory_id.clone(),
                        turn_index: turn.index,
                    })?;
            out.insert(key, (turn.generated_token_count, advantage));
        }
    }
    Ok(out)
}
