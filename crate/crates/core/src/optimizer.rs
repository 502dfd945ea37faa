//! Desk-scale policy optimization: the asymmetric-clipped surrogate
//! objective with token normalization, one-step gradient ascent on the
//! tabular softmax policy, and the training loop that pits the dense mixed
//! advantage against outcome-only optimization.
//!
//! One simulator action counts as one token, so token normalization reduces
//! to dividing by the total number of turns in the batch. Ratios start at 1
//! because each rollout batch is consumed by a single gradient epoch by
//! default.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credit::{compute_advantage_table, AdvantageTable, CreditConfig, CreditError};
use crate::evidence::{build_index, EvidenceError};
use crate::policy::{ActionKey, SoftmaxPolicy, StateKey};
use crate::simulator::{decision_trace, rollout_group, DecisionTurn, SimulatorError, WorldSpec};
use crate::trajectory::RolloutGroup;

/// Asymmetric clipping bounds of the surrogate objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipBounds {
    pub low: f64,
    pub high: f64,
}

impl Default for ClipBounds {
    fn default() -> Self {
        Self {
            low: 0.8,
            high: 1.28,
        }
    }
}

impl ClipBounds {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.low > 0.0 && self.low < 1.0 && self.high > 1.0) {
            return Err(OptimizerError::InvalidConfig(format!(
                "clip bounds [{}, {}] must satisfy 0 < low < 1 < high",
                self.low, self.high
            )));
        }
        Ok(())
    }

    pub fn clamp(&self, ratio: f64) -> f64 {
        ratio.clamp(self.low, self.high)
    }
}

/// Training-loop configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub clip: ClipBounds,
    pub learning_rate: f64,
    pub group_size: usize,
    pub steps: usize,
    pub dynamic_sampling: bool,
    pub seed: u64,
    /// Gradient epochs per rollout batch. One keeps ratios at 1 during the
    /// update; more replays the batch with importance drift.
    pub epochs: usize,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            clip: ClipBounds::default(),
            learning_rate: 10.0,
            group_size: 8,
            steps: 100,
            dynamic_sampling: false,
            seed: 0,
            epochs: 1,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        self.clip.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(OptimizerError::InvalidConfig(
                "learning rate must be positive".to_string(),
            ));
        }
        if self.group_size < 2 {
            return Err(OptimizerError::InvalidConfig(
                "group size must be at least 2".to_string(),
            ));
        }
        if self.epochs < 1 {
            return Err(OptimizerError::InvalidConfig(
                "epochs must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Which advantage feeds the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    /// Outcome-only group-relative optimization (lambda forced to 0).
    Grpo,
    /// Dense mixed advantage.
    Ica,
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Algo::Grpo => write!(f, "grpo"),
            Algo::Ica => write!(f, "ica"),
        }
    }
}

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("importance ratio {0} is not positive")]
    NonpositiveRatio(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("advantage table does not cover turn ({trajectory_id}, {turn_index})")]
    ShapeMismatch {
        trajectory_id: String,
        turn_index: u32,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Simulator(#[from] SimulatorError),
    #[error(transparent)]
    Credit(#[from] CreditError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
}

/// PPO surrogate with asymmetric clipping:
/// `min(ratio * A, clamp(ratio, low, high) * A)`.
pub fn clipped_surrogate(
    ratio: f64,
    advantage: f64,
    clip: &ClipBounds,
) -> Result<f64, OptimizerError> {
    if !(ratio > 0.0) {
        return Err(OptimizerError::NonpositiveRatio(ratio));
    }
    Ok((ratio * advantage).min(clip.clamp(ratio) * advantage))
}

/// Derivative of the surrogate with respect to the ratio: the advantage when
/// the unclipped branch is active, zero once the clip has stopped the
/// gradient.
pub fn surrogate_ratio_derivative(ratio: f64, advantage: f64, clip: &ClipBounds) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = clip.clamp(ratio) * advantage;
    if unclipped <= clipped {
        advantage
    } else {
        0.0
    }
}

/// Token-normalized batch objective: the mean clipped surrogate over all
/// `(ratio, advantage)` tokens. `token_total` is the total token count of
/// the sampled trajectories and must equal the list length.
pub fn batch_objective(
    per_token: &[(f64, f64)],
    token_total: usize,
    clip: &ClipBounds,
) -> Result<f64, OptimizerError> {
    if per_token.is_empty() || token_total == 0 {
        return Err(OptimizerError::EmptyBatch);
    }
    let mut sum = 0.0;
    for &(ratio, advantage) in per_token {
        sum += clipped_surrogate(ratio, advantage, clip)?;
    }
    Ok(sum / token_total as f64)
}

/// Drops rollout groups whose outcomes are uniform (all 0 or all 1), which
/// carry zero terminal-advantage variance. Disabled, it is the identity.
pub fn dynamic_sampling_filter(groups: Vec<RolloutGroup>, enabled: bool) -> Vec<RolloutGroup> {
    if !enabled {
        return groups;
    }
    groups
        .into_iter()
        .filter(|group| {
            let outcomes = group.outcomes();
            let successes = outcomes.iter().filter(|&&o| o == 1).count();
            successes != 0 && successes != outcomes.len()
        })
        .collect()
}

/// Metrics of one gradient update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientStepMetrics {
    /// Batch objective evaluated after the update.
    pub objective: f64,
    /// Mean importance ratio after the update.
    pub mean_ratio: f64,
    /// Fraction of tokens whose post-update ratio left the clip range.
    pub clip_fraction: f64,
    pub mean_abs_advantage: f64,
}

/// One gradient ascent pass over a rollout batch. The frozen pre-update
/// policy plays the old policy; `cfg.epochs` passes replay the same batch.
pub fn policy_gradient_step(
    policy: &mut SoftmaxPolicy,
    decisions: &[DecisionTurn],
    tables: &[AdvantageTable],
    cfg: &UpdateConfig,
) -> Result<GradientStepMetrics, OptimizerError> {
    cfg.validate()?;
    if decisions.is_empty() {
        return Err(OptimizerError::EmptyBatch);
    }

    let mut advantage_of = BTreeMap::new();
    for table in tables {
        for (key, value) in &table.mixed_advantage {
            advantage_of.insert(key.clone(), *value);
        }
    }
    let advantages: Vec<f64> = decisions
        .iter()
        .map(|d| {
            advantage_of
                .get(&(d.trajectory_id.clone(), d.turn_index))
                .copied()
                .ok_or_else(|| OptimizerError::ShapeMismatch {
                    trajectory_id: d.trajectory_id.clone(),
                    turn_index: d.turn_index,
                })
        })
        .collect::<Result<_, _>>()?;

    let token_total = decisions.len();
    let old = policy.clone();
    let old_probs: Vec<f64> = decisions
        .iter()
        .map(|d| prob_of(&old, &d.state, d.action, &d.valid))
        .collect();

    for _ in 0..cfg.epochs {
        let gradient = objective_gradient(policy, decisions, &advantages, &old_probs, cfg)?;
        for ((state, action), g) in gradient {
            policy.adjust_preference(&state, action, cfg.learning_rate * g);
        }
    }

    // Post-update evaluation against the frozen policy.
    let mut per_token = Vec::with_capacity(token_total);
    let mut outside = 0usize;
    let mut ratio_sum = 0.0;
    for (decision, (&advantage, &old_p)) in
        decisions.iter().zip(advantages.iter().zip(&old_probs))
    {
        let ratio = prob_of(policy, &decision.state, decision.action, &decision.valid) / old_p;
        if !(ratio > 0.0) {
            return Err(OptimizerError::NonpositiveRatio(ratio));
        }
        if ratio < cfg.clip.low || ratio > cfg.clip.high {
            outside += 1;
        }
        ratio_sum += ratio;
        per_token.push((ratio, advantage));
    }
    let objective = batch_objective(&per_token, token_total, &cfg.clip)?;
    let mean_abs_advantage =
        advantages.iter().map(|a| a.abs()).sum::<f64>() / token_total as f64;

    Ok(GradientStepMetrics {
        objective,
        mean_ratio: ratio_sum / token_total as f64,
        clip_fraction: outside as f64 / token_total as f64,
        mean_abs_advantage,
    })
}

fn prob_of(policy: &SoftmaxPolicy, state: &StateKey, action: ActionKey, valid: &[ActionKey]) -> f64 {
    let probs = policy.action_probs(state, valid);
    valid
        .iter()
        .zip(&probs)
        .find(|(a, _)| **a == action)
        .map(|(_, p)| *p)
        .expect("chosen action is valid")
}

/// Analytic gradient of the token-normalized clipped objective with respect
/// to the preference table, evaluated at the current policy.
fn objective_gradient(
    policy: &SoftmaxPolicy,
    decisions: &[DecisionTurn],
    advantages: &[f64],
    old_probs: &[f64],
    cfg: &UpdateConfig,
) -> Result<BTreeMap<(StateKey, ActionKey), f64>, OptimizerError> {
    let token_total = decisions.len() as f64;
    let temperature = policy.temperature();
    let mut gradient: BTreeMap<(StateKey, ActionKey), f64> = BTreeMap::new();

    for (i, decision) in decisions.iter().enumerate() {
        let probs = policy.action_probs(&decision.state, &decision.valid);
        let p_new = decision
            .valid
            .iter()
            .zip(&probs)
            .find(|(a, _)| **a == decision.action)
            .map(|(_, p)| *p)
            .expect("chosen action is valid");
        let ratio = p_new / old_probs[i];
        if !(ratio > 0.0) {
            return Err(OptimizerError::NonpositiveRatio(ratio));
        }
        let dl_dratio = surrogate_ratio_derivative(ratio, advantages[i], &cfg.clip);
        if dl_dratio == 0.0 {
            continue;
        }
        let coefficient = dl_dratio * ratio / (temperature * token_total);
        for (action, p_b) in decision.valid.iter().zip(&probs) {
            let indicator = if *action == decision.action { 1.0 } else { 0.0 };
            *gradient
                .entry((decision.state.clone(), *action))
                .or_insert(0.0) += coefficient * (indicator - p_b);
        }
    }
    Ok(gradient)
}

/// Per-step training metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub success_rate: f64,
    pub objective: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub mean_abs_advantage: f64,
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub metrics: Vec<StepMetrics>,
    pub policy: SoftmaxPolicy,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed derivation for (step, stream) substreams.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(base);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b)
}

/// Trains a policy on the world. Each step samples one rollout group per
/// query from the frozen policy, judges outcomes, computes advantage tables
/// (lambda is forced to 0 for GRPO), optionally filters uniform-outcome
/// groups, and takes one gradient update. Fully determined by the seed.
pub fn train(
    world: &WorldSpec,
    algo: Algo,
    cfg: &UpdateConfig,
    credit_cfg: &CreditConfig,
) -> Result<TrainOutput, OptimizerError> {
    world.validate()?;
    cfg.validate()?;
    let effective_credit = match algo {
        Algo::Grpo => CreditConfig {
            lambda_weight: 0.0,
            ..*credit_cfg
        },
        Algo::Ica => *credit_cfg,
    };
    effective_credit.validate()?;

    let mut policy = SoftmaxPolicy::default();
    let mut metrics = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut frozen = policy.clone();
        let mut groups = Vec::with_capacity(world.queries.len());
        for (qi, query) in world.queries.iter().enumerate() {
            let group_seed = derive_seed(cfg.seed, step as u64, qi as u64);
            groups.push(rollout_group(
                world,
                &query.query_id,
                &mut frozen,
                cfg.group_size,
                group_seed,
            )?);
        }

        let sampled: usize = groups.iter().map(|g| g.len()).sum();
        let successes: usize = groups
            .iter()
            .flat_map(|g| g.trajectories.iter())
            .filter(|t| t.succeeded())
            .count();
        let success_rate = successes as f64 / sampled as f64;

        let kept = dynamic_sampling_filter(groups, cfg.dynamic_sampling);
        if kept.is_empty() {
            metrics.push(StepMetrics {
                step,
                success_rate,
                objective: 0.0,
                clip_fraction: 0.0,
                mean_ratio: 1.0,
                mean_abs_advantage: 0.0,
            });
            continue;
        }

        let mut tables = Vec::with_capacity(kept.len());
        let mut decisions = Vec::new();
        for group in &kept {
            let index = build_index(group)?;
            tables.push(compute_advantage_table(group, &index, &effective_credit)?);
            for trajectory in &group.trajectories {
                decisions.extend(decision_trace(world, trajectory)?);
            }
        }

        let update = policy_gradient_step(&mut policy, &decisions, &tables, cfg)?;
        metrics.push(StepMetrics {
            step,
            success_rate,
            objective: update.objective,
            clip_fraction: update.clip_fraction,
            mean_ratio: update.mean_ratio,
            mean_abs_advantage: update.mean_abs_advantage,
        });
    }

    Ok(TrainOutput { metrics, policy })
}

/// Success rate an arm settles at: the mean over the final tenth of the
/// metric series (at least one step).
pub fn final_success_rate(metrics: &[StepMetrics]) -> f64 {
    if metrics.is_empty() {
        return 0.0;
    }
    let window = (metrics.len() / 10).max(1);
    let tail = &metrics[metrics.len() - window..];
    tail.iter().map(|m| m.success_rate).sum::<f64>() / window as f64
}

/// First step whose success rate reaches half the final rate; the series
/// length when it never does.
pub fn steps_to_half_max(metrics: &[StepMetrics], final_rate: f64) -> usize {
    if final_rate <= 0.0 {
        return metrics.len();
    }
    metrics
        .iter()
        .position(|m| m.success_rate >= 0.5 * final_rate)
        .unwrap_or(metrics.len())
}

/// Summary of one training arm.
#[derive(Debug, Clone)]
pub struct ArmSummary {
    pub seed: u64,
    pub algo: Algo,
    pub final_success_rate: f64,
    pub steps_to_half_max: usize,
    pub mean_clip_fraction: f64,
    pub metrics: Vec<StepMetrics>,
}

/// Runs one arm and summarizes it.
pub fn run_arm(
    world: &WorldSpec,
    algo: Algo,
    cfg: &UpdateConfig,
    credit_cfg: &CreditConfig,
) -> Result<ArmSummary, OptimizerError> {
    let output = train(world, algo, cfg, credit_cfg)?;
    let final_rate = final_success_rate(&output.metrics);
    let half = steps_to_half_max(&output.metrics, final_rate);
    let mean_clip = if output.metrics.is_empty() {
        0.0
    } else {
        output.metrics.iter().map(|m| m.clip_fraction).sum::<f64>() / output.metrics.len() as f64
    };
    Ok(ArmSummary {
        seed: cfg.seed,
        algo,
        final_success_rate: final_rate,
        steps_to_half_max: half,
        mean_clip_fraction: mean_clip,
        metrics: output.metrics,
    })
}

/// Runs GRPO and ICA with paired seeds `base_seed .. base_seed + n_seeds`.
/// Returns one (grpo, ica) pair per seed.
pub fn compare_arms(
    world: &WorldSpec,
    cfg: &UpdateConfig,
    credit_cfg: &CreditConfig,
    n_seeds: usize,
) -> Result<Vec<(ArmSummary, ArmSummary)>, OptimizerError> {
    let mut pairs = Vec::with_capacity(n_seeds);
    for i in 0..n_seeds as u64 {
        let seeded = UpdateConfig {
            seed: cfg.seed.wrapping_add(i),
            ..*cfg
        };
        let grpo = run_arm(world, Algo::Grpo, &seeded, credit_cfg)?;
        let ica = run_arm(world, Algo::Ica, &seeded, credit_cfg)?;
        pairs.push((grpo, ica));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::LastActionKind;
    use crate::simulator::{generate_world, WorldGenParams};
    use crate::trajectory::Trajectory;

    fn bounds() -> ClipBounds {
        ClipBounds::default()
    }

    #[test]
    fn surrogate_identity_at_ratio_one() {
        for advantage in [-3.0, -1.0, 0.0, 0.5, 2.0] {
            assert_eq!(
                clipped_surrogate(1.0, advantage, &bounds()).unwrap(),
                advantage
            );
        }
    }

    #[test]
    fn surrogate_clips_high_ratio_with_positive_advantage() {
        assert_eq!(clipped_surrogate(1.5, 1.0, &bounds()).unwrap(), 1.28);
    }

    #[test]
    fn surrogate_clips_low_ratio_with_negative_advantage() {
        assert_eq!(clipped_surrogate(0.5, -1.0, &bounds()).unwrap(), -0.8);
    }

    #[test]
    fn surrogate_rejects_nonpositive_ratio() {
        assert!(matches!(
            clipped_surrogate(0.0, 1.0, &bounds()),
            Err(OptimizerError::NonpositiveRatio(_))
        ));
    }

    #[test]
    fn surrogate_is_monotone_in_advantage() {
        for ratio in [0.3, 0.8, 1.0, 1.28, 2.0] {
            let mut previous = f64::NEG_INFINITY;
            for advantage in [-2.0, -1.0, -0.1, 0.0, 0.1, 1.0, 2.0] {
                let value = clipped_surrogate(ratio, advantage, &bounds()).unwrap();
                assert!(value >= previous);
                previous = value;
            }
        }
    }

    #[test]
    fn gradient_stops_outside_the_clip_range() {
        // Positive advantage with ratio above the high bound.
        assert_eq!(surrogate_ratio_derivative(1.5, 1.0, &bounds()), 0.0);
        // Negative advantage with ratio below the low bound.
        assert_eq!(surrogate_ratio_derivative(0.5, -1.0, &bounds()), 0.0);
        // Inside the bounds the derivative is the advantage.
        assert_eq!(surrogate_ratio_derivative(1.0, 2.0, &bounds()), 2.0);
        // Clipping is one-sided: a high ratio with negative advantage flows.
        assert_eq!(surrogate_ratio_derivative(2.0, -1.0, &bounds()), -1.0);
    }

    #[test]
    fn gradient_stop_matches_finite_differences() {
        let clip = bounds();
        let h = 1e-7;
        for (ratio, advantage) in [(1.5, 1.0), (0.5, -1.0), (1.0, 0.7), (1.1, -0.4)] {
            let f = |r: f64| clipped_surrogate(r, advantage, &clip).unwrap();
            let numeric = (f(ratio + h) - f(ratio - h)) / (2.0 * h);
            let analytic = surrogate_ratio_derivative(ratio, advantage, &clip);
            assert!(
                (numeric - analytic).abs() <= 1e-5 * numeric.abs().max(1.0),
                "ratio {ratio}, advantage {advantage}: {numeric} vs {analytic}"
            );
        }
    }

    #[test]
    fn batch_objective_averages_surrogates() {
        let tokens = [(1.5, 1.0), (0.5, -1.0)];
        let value = batch_objective(&tokens, 2, &bounds()).unwrap();
        assert!((value - 0.24).abs() < 1e-12);
    }

    #[test]
    fn batch_objective_with_unit_ratios_is_the_mean_advantage() {
        let tokens = [(1.0, 0.2), (1.0, -0.6), (1.0, 1.0)];
        let value = batch_objective(&tokens, 3, &bounds()).unwrap();
        assert!((value - 0.2).abs() < 1e-12);
    }

    #[test]
    fn batch_objective_rejects_empty_input() {
        assert!(matches!(
            batch_objective(&[], 0, &bounds()),
            Err(OptimizerError::EmptyBatch)
        ));
    }

    fn group_with_outcomes(outcomes: &[u8]) -> RolloutGroup {
        let world = generate_world(WorldGenParams {
            n_pages: 4,
            n_gold_per_query: 1,
            n_queries: 1,
            distractor_ratio: 2,
            seed: 5,
        })
        .unwrap();
        let mut policy = SoftmaxPolicy::default();
        let base = crate::simulator::run_episode(&world, "q1", &mut policy, 1).unwrap();
        let trajectories: Vec<Trajectory> = outcomes
            .iter()
            .enumerate()
            .map(|(i, &outcome)| {
                let mut t = base.clone();
                t.trajectory_id = format!("t{i}");
                t.outcome = outcome;
                t
            })
            .collect();
        RolloutGroup {
            query_id: "q1".to_string(),
            trajectories,
        }
    }

    #[test]
    fn dynamic_sampling_drops_uniform_groups() {
        let groups = vec![
            group_with_outcomes(&[1, 1, 1, 1]),
            group_with_outcomes(&[1, 0, 1, 0]),
            group_with_outcomes(&[0, 0, 0, 0]),
        ];
        let kept = dynamic_sampling_filter(groups.clone(), true);
        assert_eq!(kept.len(), 1);
        let untouched = dynamic_sampling_filter(groups.clone(), false);
        assert_eq!(untouched.len(), 3);
    }

    fn single_state_decisions(advantage_action: ActionKey) -> (Vec<DecisionTurn>, StateKey) {
        let state = StateKey {
            query_id: "q1".to_string(),
            gold_mask: 0,
            last_action: LastActionKind::None,
        };
        let valid = vec![ActionKey::Search(0), ActionKey::Answer];
        let decisions = vec![DecisionTurn {
            trajectory_id: "t0".to_string(),
            turn_index: 1,
            state: state.clone(),
            action: advantage_action,
            valid,
        }];
        (decisions, state)
    }

    // Minimal hand-built table: only the mixed advantages matter here.
    fn table_for(turn_advantages: &[(&str, u32, f64)]) -> AdvantageTable {
        use crate::credit::GroupStats;
        let mixed: BTreeMap<(String, u32), f64> = turn_advantages
            .iter()
            .map(|(id, turn, a)| ((id.to_string(), *turn), *a))
            .collect();
        AdvantageTable {
            query_id: "q1".to_string(),
            contributions: BTreeMap::new(),
            turn_credits: Vec::new(),
            task_advantage: BTreeMap::new(),
            normalized_advantage: BTreeMap::new(),
            mixed_advantage: mixed,
            stats: GroupStats {
                mu_r: 0.0,
                sigma_r: 0.0,
                tool: BTreeMap::new(),
            },
            config: CreditConfig::default(),
        }
    }

    #[test]
    fn positive_advantage_raises_the_taken_action() {
        let (decisions, state) = single_state_decisions(ActionKey::Search(0));
        let tables = vec![table_for(&[("t0", 1, 1.0)])];
        let mut policy = SoftmaxPolicy::default();
        let cfg = UpdateConfig::default();
        policy_gradient_step(&mut policy, &decisions, &tables, &cfg).unwrap();
        assert!(policy.preference(&state, ActionKey::Search(0)) > 0.0);
        assert!(policy.preference(&state, ActionKey::Answer) < 0.0);
    }

    #[test]
    fn zero_advantages_leave_the_policy_unchanged() {
        let (decisions, state) = single_state_decisions(ActionKey::Search(0));
        let tables = vec![table_for(&[("t0", 1, 0.0)])];
        let mut policy = SoftmaxPolicy::default();
        let cfg = UpdateConfig::default();
        let metrics = policy_gradient_step(&mut policy, &decisions, &tables, &cfg).unwrap();
        assert_eq!(policy.preference(&state, ActionKey::Search(0)), 0.0);
        assert_eq!(metrics.clip_fraction, 0.0);
        assert_eq!(metrics.mean_ratio, 1.0);
    }

    #[test]
    fn missing_turn_in_tables_is_a_shape_mismatch() {
        let (decisions, _) = single_state_decisions(ActionKey::Search(0));
        let tables = vec![table_for(&[("other", 1, 1.0)])];
        let mut policy = SoftmaxPolicy::default();
        let cfg = UpdateConfig::default();
        assert!(matches!(
            policy_gradient_step(&mut policy, &decisions, &tables, &cfg),
            Err(OptimizerError::ShapeMismatch { .. })
        ));
    }

    // Central finite differences of the batch objective with respect to
    // every preference the decisions touch.
    fn finite_difference_gradient(
        policy: &SoftmaxPolicy,
        decisions: &[DecisionTurn],
        advantages: &[f64],
        cfg: &UpdateConfig,
        h: f64,
    ) -> BTreeMap<(StateKey, ActionKey), f64> {
        let old_probs: Vec<f64> = decisions
            .iter()
            .map(|d| prob_of(policy, &d.state, d.action, &d.valid))
            .collect();
        let objective = |candidate: &SoftmaxPolicy| -> f64 {
            let per_token: Vec<(f64, f64)> = decisions
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let ratio = prob_of(candidate, &d.state, d.action, &d.valid) / old_probs[i];
                    (ratio, advantages[i])
                })
                .collect();
            batch_objective(&per_token, per_token.len(), &cfg.clip).unwrap()
        };

        let mut keys = std::collections::BTreeSet::new();
        for d in decisions {
            for a in &d.valid {
                keys.insert((d.state.clone(), *a));
            }
        }
        let mut grad = BTreeMap::new();
        for key in keys {
            let mut plus = policy.clone();
            plus.adjust_preference(&key.0, key.1, h);
            let mut minus = policy.clone();
            minus.adjust_preference(&key.0, key.1, -h);
            grad.insert(key, (objective(&plus) - objective(&minus)) / (2.0 * h));
        }
        grad
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        // 3 states x 3 actions with mixed advantages and a perturbed policy
        // so ratios are not 1.
        let mut policy = SoftmaxPolicy::default();
        let states: Vec<StateKey> = (0..3)
            .map(|i| StateKey {
                query_id: format!("q{i}"),
                gold_mask: i,
                last_action: LastActionKind::None,
            })
            .collect();
        let valid = vec![ActionKey::Search(0), ActionKey::Search(1), ActionKey::Answer];
        for (i, state) in states.iter().enumerate() {
            policy.adjust_preference(state, ActionKey::Search(0), 0.3 * i as f64);
            policy.adjust_preference(state, ActionKey::Answer, -0.2);
        }

        let actions = [ActionKey::Search(0), ActionKey::Search(1), ActionKey::Answer];
        let advantages = vec![1.0, -0.7, 0.4];
        let decisions: Vec<DecisionTurn> = states
            .iter()
            .enumerate()
            .map(|(i, state)| DecisionTurn {
                trajectory_id: format!("t{i}"),
                turn_index: 1,
                state: state.clone(),
                action: actions[i],
                valid: valid.clone(),
            })
            .collect();

        let cfg = UpdateConfig::default();
        let old_probs: Vec<f64> = decisions
            .iter()
            .map(|d| prob_of(&policy, &d.state, d.action, &d.valid))
            .collect();
        let analytic =
            objective_gradient(&policy, &decisions, &advantages, &old_probs, &cfg).unwrap();
        let numeric = finite_difference_gradient(&policy, &decisions, &advantages, &cfg, 1e-6);

        for (key, numeric_value) in numeric {
            let analytic_value = analytic.get(&key).copied().unwrap_or(0.0);
            let scale = numeric_value.abs().max(1e-3);
            assert!(
                (numeric_value - analytic_value).abs() / scale <= 1e-5,
                "{key:?}: numeric {numeric_value} vs analytic {analytic_value}"
            );
        }
    }

    #[test]
    fn zero_steps_returns_an_empty_series() {
        let world = crate::simulator::reference_world();
        let cfg = UpdateConfig {
            steps: 0,
            ..UpdateConfig::default()
        };
        let out = train(&world, Algo::Ica, &cfg, &CreditConfig::default()).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.policy, SoftmaxPolicy::default());
    }

    #[test]
    fn identical_seeds_reproduce_identical_metric_series() {
        let world = crate::simulator::reference_world();
        let cfg = UpdateConfig {
            steps: 5,
            seed: 33,
            ..UpdateConfig::default()
        };
        let a = train(&world, Algo::Ica, &cfg, &CreditConfig::default()).unwrap();
        let b = train(&world, Algo::Ica, &cfg, &CreditConfig::default()).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn grpo_equals_ica_at_lambda_zero() {
        let world = crate::simulator::reference_world();
        let cfg = UpdateConfig {
            steps: 4,
            seed: 9,
            ..UpdateConfig::default()
        };
        let lambda_zero = CreditConfig {
            lambda_weight: 0.0,
            ..CreditConfig::default()
        };
        let grpo = train(&world, Algo::Grpo, &cfg, &CreditConfig::default()).unwrap();
        let ica = train(&world, Algo::Ica, &cfg, &lambda_zero).unwrap();
        assert_eq!(grpo.metrics, ica.metrics);
    }

    #[test]
    fn derive_seed_is_stable_and_spreads() {
        assert_eq!(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(2, 2, 3));
    }
}
