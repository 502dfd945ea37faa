//! Pure planning math for page acquisition: snapshot slicing geometry and
//! chunk merge/rank/budget planning, plus the token-budget comparison used
//! to contrast snapshot and text costs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slicing constants: 4480 px windows with 112 px vertical overlap, a
/// 20000 px rendering cap, and a 0.7x downsample per slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceGeometry {
    pub slice_height: u32,
    pub overlap: u32,
    pub cap: u32,
    pub scale: f64,
}

impl Default for SliceGeometry {
    fn default() -> Self {
        Self {
            slice_height: 4480,
            overlap: 112,
            cap: 20000,
            scale: 0.7,
        }
    }
}

/// Sliding-window plan over a page's pixel height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePlan {
    /// (y_start, y_end) pairs, in order.
    pub slices: Vec<(u32, u32)>,
    pub scale_factor: f64,
    pub effective_height: u32,
    pub truncated: bool,
}

/// One merged chunk: which input segments it holds and their token total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub segments: Vec<usize>,
    pub total_tokens: u64,
}

/// Chunk plan: merge output, then (after selection) the retained chunk
/// indices in rank order and the budget-capped token count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub chunks: Vec<Chunk>,
    pub selected: Vec<usize>,
    pub final_token_count: u64,
}

/// Snapshot-versus-text token cost comparison. Reductions are fractions of
/// the text cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBudgetReport {
    pub per_pair: Vec<f64>,
    pub min_reduction: f64,
    pub max_reduction: f64,
    /// Pooled reduction: (sum text - sum snapshot) / sum text.
    pub overall_reduction: f64,
}

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("bad geometry: {0}")]
    BadGeometry(String),
    #[error("{scores} scores for {chunks} chunks")]
    ScoreLengthMismatch { scores: usize, chunks: usize },
    #[error("score at position {0} is not a number")]
    InvalidScore(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("text cost at position {0} is not positive")]
    NonpositiveTextCost(usize),
    #[error("snapshot and text lists differ in length ({snapshots} vs {texts})")]
    LengthMismatch { snapshots: usize, texts: usize },
}

/// Plans the screenshot slices of a page: windows of `slice_height` step by
/// `slice_height - overlap` from the top until one reaches the effective
/// height, which is the page height capped at `cap`.
pub fn slice_plan(page_height: u32, geometry: &SliceGeometry) -> Result<SlicePlan, PlannerError> {
    if page_height == 0 {
        return Err(PlannerError::BadGeometry(
            "page height must be positive".to_string(),
        ));
    }
    if geometry.overlap >= geometry.slice_height {
        return Err(PlannerError::BadGeometry(format!(
            "overlap {} must be smaller than slice height {}",
            geometry.overlap, geometry.slice_height
        )));
    }

    let effective_height = page_height.min(geometry.cap);
    let truncated = page_height > geometry.cap;
    let step = geometry.slice_height - geometry.overlap;

    let mut slices = Vec::new();
    let mut start = 0u32;
    loop {
        let end = (start + geometry.slice_height).min(effective_height);
        slices.push((start, end));
        if end >= effective_height {
            break;
        }
        start += step;
        if start >= effective_height {
            break;
        }
    }

    Ok(SlicePlan {
        slices,
        scale_factor: geometry.scale,
        effective_height,
        truncated,
    })
}

/// Greedy left-to-right merge of adjacent segments: a chunk grows while its
/// total stays within `base`; a single oversize segment passes through as
/// its own chunk.
pub fn chunk_merge(segment_token_lengths: &[u64], base: u64) -> ChunkPlan {
    let mut chunks: Vec<Chunk> = Vec::new();
    let mut current_segments: Vec<usize> = Vec::new();
    let mut current_total = 0u64;

    for (i, &length) in segment_token_lengths.iter().enumerate() {
        if !current_segments.is_empty() && current_total + length > base {
            chunks.push(Chunk {
                segments: std::mem::take(&mut current_segments),
                total_tokens: current_total,
            });
            current_total = 0;
        }
        current_segments.push(i);
        current_total += length;
    }
    if !current_segments.is_empty() {
        chunks.push(Chunk {
            segments: current_segments,
            total_tokens: current_total,
        });
    }

    ChunkPlan {
        chunks,
        selected: Vec::new(),
        final_token_count: 0,
    }
}

/// Ranks chunks by score (ties to the lower index), keeps the top `k`, and
/// accumulates tokens in rank order until the budget is hit; the chunk that
/// would overflow is truncated to exactly fill the budget and the rest are
/// dropped.
pub fn select_and_truncate(
    mut plan: ChunkPlan,
    scores: &[f64],
    k: usize,
    budget: u64,
) -> Result<ChunkPlan, PlannerError> {
    if scores.len() != plan.chunks.len() {
        return Err(PlannerError::ScoreLengthMismatch {
            scores: scores.len(),
            chunks: plan.chunks.len(),
        });
    }
    if let Some(position) = scores.iter().position(|s| s.is_nan()) {
        return Err(PlannerError::InvalidScore(position));
    }

    let mut ranked: Vec<usize> = (0..plan.chunks.len()).collect();
    ranked.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores checked for NaN")
            .then(a.cmp(&b))
    });

    let mut selected = Vec::new();
    let mut used = 0u64;
    for &chunk_index in ranked.iter().take(k) {
        let remaining = budget - used;
        if remaining == 0 {
            break;
        }
        let tokens = plan.chunks[chunk_index].total_tokens;
        if tokens <= remaining {
            used += tokens;
            selected.push(chunk_index);
        } else {
            used += remaining;
            selected.push(chunk_index);
            break;
        }
    }

    plan.selected = selected;
    plan.final_token_count = used;
    Ok(plan)
}

/// Per-pair and pooled token reductions of snapshots relative to text.
pub fn token_budget_report(
    snapshot_token_costs: &[u64],
    text_token_costs: &[u64],
) -> Result<TokenBudgetReport, PlannerError> {
    if snapshot_token_costs.is_empty() || text_token_costs.is_empty() {
        return Err(PlannerError::EmptyInput);
    }
    if snapshot_token_costs.len() != text_token_costs.len() {
        return Err(PlannerError::LengthMismatch {
            snapshots: snapshot_token_costs.len(),
            texts: text_token_costs.len(),
        });
    }

    let mut per_pair = Vec::with_capacity(text_token_costs.len());
    for (i, (&snapshot, &text)) in snapshot_token_costs
        .iter()
        .zip(text_token_costs)
        .enumerate()
    {
        if text == 0 {
            return Err(PlannerError::NonpositiveTextCost(i));
        }
        per_pair.push((text as f64 - snapshot as f64) / text as f64);
    }

    let min_reduction = per_pair.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_reduction = per_pair.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let snapshot_sum: u64 = snapshot_token_costs.iter().sum();
    let text_sum: u64 = text_token_costs.iter().sum();
    let overall_reduction = (text_sum as f64 - snapshot_sum as f64) / text_sum as f64;

    Ok(TokenBudgetReport {
        per_pair,
        min_reduction,
        max_reduction,
        overall_reduction,
    })
}
