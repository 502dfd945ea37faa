//! Trajectory data model and the line-delimited rollout-log format.
//!
//! A trajectory is one complete rollout for a query: an ordered sequence of
//! turns, each pairing a policy action (search, fetch, answer) with the
//! observation the environment returned, plus the binary task outcome. Rollout
//! groups bundle the trajectories sampled for the same query; they are the
//! unit every downstream credit statistic is computed over.
//!
//! The on-disk format is JSONL: one trajectory per line, grouped by query id.
//! Field names are part of the contract and round-trip exactly.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Schema version stamped on every rollout-log record.
pub const SCHEMA_VERSION: u32 = 1;

/// Tool family a non-terminal turn belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    Search,
    Fetch,
}

impl fmt::Display for ToolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToolKind::Search => write!(f, "search"),
            ToolKind::Fetch => write!(f, "fetch"),
        }
    }
}

/// Policy action taken at one turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Action {
    Search { queries: Vec<String> },
    Fetch { urls: Vec<String> },
    Answer { answer_text: String },
}

impl Action {
    /// Tool family of this action; `None` for the terminal answer.
    pub fn tool_kind(&self) -> Option<ToolKind> {
        match self {
            Action::Search { .. } => Some(ToolKind::Search),
            Action::Fetch { .. } => Some(ToolKind::Fetch),
            Action::Answer { .. } => None,
        }
    }

    pub fn is_answer(&self) -> bool {
        matches!(self, Action::Answer { .. })
    }
}

/// One ranked entry of a search response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResultItem {
    pub url: String,
    pub title: String,
    pub snippet: String,
    /// 1-based rank within the observation.
    pub rank: u32,
}

/// How fetched page content is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentKind {
    Snapshot,
    Text,
}

/// Reference to one fetched page. Content itself is stored as a digest only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageRef {
    pub url: String,
    pub content_digest: String,
    pub content_kind: ContentKind,
    pub token_count: u64,
}

/// Environment response paired with a turn's action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Observation {
    SearchResults { items: Vec<SearchResultItem> },
    FetchedPages { pages: Vec<PageRef> },
    None {},
}

impl Observation {
    pub fn none() -> Self {
        Observation::None {}
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Observation::None {})
    }
}

/// One reason-act-observe cycle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    /// 1-based position within the trajectory.
    pub index: u32,
    /// Digest of the reasoning trace; full text is never stored.
    pub reasoning_digest: String,
    pub action: Action,
    pub observation: Observation,
    /// Policy-generated tokens only; observation tokens are excluded.
    pub generated_token_count: u64,
}

/// One complete rollout for a query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub schema_version: u32,
    pub trajectory_id: String,
    pub query_id: String,
    pub query_text: String,
    /// Binary task outcome: 1 on success, 0 on failure.
    pub outcome: u8,
    pub total_generated_tokens: u64,
    pub turns: Vec<Turn>,
}

impl Trajectory {
    /// Number of decision turns, written `T_n` elsewhere.
    pub fn turn_count(&self) -> u32 {
        self.turns.len() as u32
    }

    pub fn succeeded(&self) -> bool {
        self.outcome == 1
    }
}

/// The trajectories sampled for one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query_id: String,
    pub trajectories: Vec<Trajectory>,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn outcomes(&self) -> Vec<u8> {
        self.trajectories.iter().map(|t| t.outcome).collect()
    }
}

/// Named invariant checked by [`validate_trajectory`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationCode {
    IndexGap,
    AnswerNotTerminal,
    MissingTerminalAnswer,
    FetchUrlNotInPreviousResults,
    TokenTotalMismatch,
    ActionObservationMismatch,
    EmptyActionPayload,
    BadResultRanks,
    OutcomeNotBinary,
    UnsupportedSchemaVersion,
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ViolationCode::IndexGap => "index-gap",
            ViolationCode::AnswerNotTerminal => "answer-not-terminal",
            ViolationCode::MissingTerminalAnswer => "missing-terminal-answer",
            ViolationCode::FetchUrlNotInPreviousResults => "fetch-url-not-in-previous-results",
            ViolationCode::TokenTotalMismatch => "token-total-mismatch",
            ViolationCode::ActionObservationMismatch => "action-observation-mismatch",
            ViolationCode::EmptyActionPayload => "empty-action-payload",
            ViolationCode::BadResultRanks => "bad-result-ranks",
            ViolationCode::OutcomeNotBinary => "outcome-not-binary",
            ViolationCode::UnsupportedSchemaVersion => "unsupported-schema-version",
        };
        write!(f, "{name}")
    }
}

/// One violated invariant with enough context to locate it.
#[derive(Debug, Clone)]
pub struct Violation {
    pub code: ViolationCode,
    pub turn_index: Option<u32>,
    pub detail: String,
}

/// Result of validating one trajectory; empty iff every invariant holds.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }
}

/// Checks every trajectory invariant and reports all violations found.
/// Violations are report entries, never errors.
pub fn validate_trajectory(trajectory: &Trajectory) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut push = |code: ViolationCode, turn_index: Option<u32>, detail: String| {
        report.violations.push(Violation {
            code,
            turn_index,
            detail,
        });
    };

    if trajectory.schema_version != SCHEMA_VERSION {
        push(
            ViolationCode::UnsupportedSchemaVersion,
            None,
            format!(
                "schema_version {} (expected {})",
                trajectory.schema_version, SCHEMA_VERSION
            ),
        );
    }

    if trajectory.outcome > 1 {
        push(
            ViolationCode::OutcomeNotBinary,
            None,
            format!("outcome {} is not 0 or 1", trajectory.outcome),
        );
    }

    // Turn indices contiguous 1..T_n.
    for (pos, turn) in trajectory.turns.iter().enumerate() {
        let expected = pos as u32 + 1;
        if turn.index != expected {
            push(
                ViolationCode::IndexGap,
                Some(turn.index),
                format!("turn at position {} has index {}", pos + 1, turn.index),
            );
        }
    }

    // Exactly the final turn answers.
    match trajectory.turns.last() {
        Some(last) if last.action.is_answer() => {}
        Some(last) => push(
            ViolationCode::MissingTerminalAnswer,
            Some(last.index),
            "final turn does not answer".to_string(),
        ),
        None => push(
            ViolationCode::MissingTerminalAnswer,
            None,
            "trajectory has no turns".to_string(),
        ),
    }
    for turn in trajectory
        .turns
        .iter()
        .take(trajectory.turns.len().saturating_sub(1))
    {
        if turn.action.is_answer() {
            push(
                ViolationCode::AnswerNotTerminal,
                Some(turn.index),
                format!("answer action at non-final turn {}", turn.index),
            );
        }
    }

    for (pos, turn) in trajectory.turns.iter().enumerate() {
        // Non-empty action payloads.
        let empty = match &turn.action {
            Action::Search { queries } => queries.is_empty(),
            Action::Fetch { urls } => urls.is_empty(),
            Action::Answer { answer_text } => answer_text.is_empty(),
        };
        if empty {
            push(
                ViolationCode::EmptyActionPayload,
                Some(turn.index),
                "action carries an empty payload".to_string(),
            );
        }

        // Observation variants pair with their action kinds; NONE is legal for
        // failed tool calls and mandatory for answers.
        let mismatched = match (&turn.action, &turn.observation) {
            (Action::Search { .. }, Observation::SearchResults { .. }) => false,
            (Action::Fetch { .. }, Observation::FetchedPages { .. }) => false,
            (_, Observation::None {}) => false,
            _ => true,
        };
        if mismatched {
            push(
                ViolationCode::ActionObservationMismatch,
                Some(turn.index),
                "observation variant does not pair with the action".to_string(),
            );
        }

        // Ranks distinct and contiguous from 1.
        if let Observation::SearchResults { items } = &turn.observation {
            let mut ranks: Vec<u32> = items.iter().map(|i| i.rank).collect();
            ranks.sort_unstable();
            let contiguous = ranks
                .iter()
                .enumerate()
                .all(|(i, &r)| r == i as u32 + 1);
            if !contiguous {
                push(
                    ViolationCode::BadResultRanks,
                    Some(turn.index),
                    format!("ranks {ranks:?} are not 1..{}", items.len()),
                );
            }
        }

        // Fetch URLs come from the immediately preceding search results.
        if let Action::Fetch { urls } = &turn.action {
            let prev_urls: Option<Vec<&str>> = pos.checked_sub(1).and_then(|p| {
                match &trajectory.turns[p].observation {
                    Observation::SearchResults { items } => {
                        Some(items.iter().map(|i| i.url.as_str()).collect())
                    }
                    _ => None,
                }
            });
            match prev_urls {
                Some(prev) => {
                    for url in urls {
                        if !prev.contains(&url.as_str()) {
                            push(
                                ViolationCode::FetchUrlNotInPreviousResults,
                                Some(turn.index),
                                format!("fetched {url} absent from previous search results"),
                            );
                        }
                    }
                }
                None => push(
                    ViolationCode::FetchUrlNotInPreviousResults,
                    Some(turn.index),
                    "fetch turn not preceded by search results".to_string(),
                ),
            }
        }
    }

    let token_sum: u64 = trajectory
        .turns
        .iter()
        .map(|t| t.generated_token_count)
        .sum();
    if token_sum != trajectory.total_generated_tokens {
        push(
            ViolationCode::TokenTotalMismatch,
            None,
            format!(
                "total_generated_tokens {} but per-turn sum is {}",
                trajectory.total_generated_tokens, token_sum
            ),
        );
    }

    report
}

/// Errors raised by rollout-log I/O.
#[derive(Debug, Error)]
pub enum LogError {
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("trajectory {trajectory_id} violates invariant {violation}: {detail}")]
    InvariantViolation {
        trajectory_id: String,
        violation: String,
        detail: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Parses a rollout log: one trajectory per line, grouped by query id in
/// order of first appearance. Every trajectory invariant is validated.
pub fn parse_rollout_log(path: &Path) -> Result<Vec<RolloutGroup>, LogError> {
    let file = File::open(path)?;
    parse_rollout_reader(BufReader::new(file))
}

/// Same as [`parse_rollout_log`] but over any buffered reader.
pub fn parse_rollout_reader<R: BufRead>(reader: R) -> Result<Vec<RolloutGroup>, LogError> {
    let mut groups: Vec<RolloutGroup> = Vec::new();
    let mut group_pos: HashMap<String, usize> = HashMap::new();

    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let trajectory: Trajectory =
            serde_json::from_str(&line).map_err(|e| LogError::MalformedRecord {
                line: line_no + 1,
                message: e.to_string(),
            })?;

        let report = validate_trajectory(&trajectory);
        if let Some(first) = report.violations.first() {
            return Err(LogError::InvariantViolation {
                trajectory_id: trajectory.trajectory_id.clone(),
                violation: first.code.to_string(),
                detail: first.detail.clone(),
            });
        }

        match group_pos.get(&trajectory.query_id) {
            Some(&pos) => groups[pos].trajectories.push(trajectory),
            None => {
                group_pos.insert(trajectory.query_id.clone(), groups.len());
                groups.push(RolloutGroup {
                    query_id: trajectory.query_id.clone(),
                    trajectories: vec![trajectory],
                });
            }
        }
    }

    Ok(groups)
}

/// Writes groups as a rollout log. `parse_rollout_log` of the result
/// reproduces the input field for field.
pub fn write_rollout_log(groups: &[RolloutGroup], path: &Path) -> Result<(), LogError> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    write_rollout_writer(groups, &mut writer)?;
    writer.flush()?;
    Ok(())
}

/// Same as [`write_rollout_log`] but over any writer.
pub fn write_rollout_writer<W: Write>(
    groups: &[RolloutGroup],
    writer: &mut W,
) -> Result<(), LogError> {
    for group in groups {
        for trajectory in &group.trajectories {
            let line = serde_json::to_string(trajectory).map_err(|e| LogError::MalformedRecord {
                line: 0,
                message: e.to_string(),
            })?;
            writer.write_all(line.as_bytes())?;
            writer.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn search_turn(index: u32, urls: &[&str]) -> Turn {
        let items = urls
            .iter()
            .enumerate()
            .map(|(i, url)| SearchResultItem {
                url: (*url).to_string(),
                title: format!("title {i}"),
                snippet: format!("snippet {i}"),
                rank: i as u32 + 1,
            })
            .collect();
        Turn {
            index,
            reasoning_digest: format!("digest-{index}"),
            action: Action::Search {
                queries: vec![format!("query {index}")],
            },
            observation: Observation::SearchResults { items },
            generated_token_count: 1,
        }
    }

    fn fetch_turn(index: u32, url: &str) -> Turn {
        Turn {
            index,
            reasoning_digest: format!("digest-{index}"),
            action: Action::Fetch {
                urls: vec![url.to_string()],
            },
            observation: Observation::FetchedPages {
                pages: vec![PageRef {
                    url: url.to_string(),
                    content_digest: "ab12".repeat(16),
                    content_kind: ContentKind::Snapshot,
                    token_count: 100,
                }],
            },
            generated_token_count: 1,
        }
    }

    fn answer_turn(index: u32) -> Turn {
        Turn {
            index,
            reasoning_digest: format!("digest-{index}"),
            action: Action::Answer {
                answer_text: "final answer".to_string(),
            },
            observation: Observation::none(),
            generated_token_count: 1,
        }
    }

    fn well_formed(id: &str, query_id: &str, outcome: u8) -> Trajectory {
        let turns = vec![
            search_turn(1, &["https://a.test/x", "https://a.test/y"]),
            fetch_turn(2, "https://a.test/x"),
            answer_turn(3),
        ];
        Trajectory {
            schema_version: SCHEMA_VERSION,
            trajectory_id: id.to_string(),
            query_id: query_id.to_string(),
            query_text: "what is x?".to_string(),
            outcome,
            total_generated_tokens: turns.iter().map(|t| t.generated_token_count).sum(),
            turns,
        }
    }

    #[test]
    fn well_formed_trajectory_validates_clean() {
        let report = validate_trajectory(&well_formed("t1", "q1", 1));
        assert!(report.is_clean(), "{:?}", report.violations);
    }

    #[test]
    fn answer_at_non_final_turn_is_flagged() {
        let mut t = well_formed("t1", "q1", 0);
        t.turns[1] = answer_turn(2);
        let report = validate_trajectory(&t);
        assert!(report.has(ViolationCode::AnswerNotTerminal));
    }

    #[test]
    fn index_gap_is_flagged() {
        let mut t = well_formed("t1", "q1", 0);
        t.turns[1].index = 3;
        t.turns[2].index = 4;
        let report = validate_trajectory(&t);
        assert!(report.has(ViolationCode::IndexGap));
    }

    #[test]
    fn fetch_url_outside_previous_results_is_flagged() {
        let mut t = well_formed("t1", "q1", 0);
        if let Action::Fetch { urls } = &mut t.turns[1].action {
            urls[0] = "https://elsewhere.test/z".to_string();
        }
        let report = validate_trajectory(&t);
        assert!(report.has(ViolationCode::FetchUrlNotInPreviousResults));
    }

    #[test]
    fn fetch_at_first_turn_is_flagged() {
        let turns = vec![fetch_turn(1, "https://a.test/x"), answer_turn(2)];
        let t = Trajectory {
            schema_version: SCHEMA_VERSION,
            trajectory_id: "t1".to_string(),
            query_id: "q1".to_string(),
            query_text: "q".to_string(),
            outcome: 0,
            total_generated_tokens: 2,
            turns,
        };
        let report = validate_trajectory(&t);
        assert!(report.has(ViolationCode::FetchUrlNotInPreviousResults));
    }

    #[test]
    fn token_total_mismatch_is_flagged() {
        let mut t = well_formed("t1", "q1", 0);
        t.total_generated_tokens += 5;
        let report = validate_trajectory(&t);
        assert!(report.has(ViolationCode::TokenTotalMismatch));
    }

    #[test]
    fn non_contiguous_ranks_are_flagged() {
        let mut t = well_formed("t1", "q1", 0);
        if let Observation::SearchResults { items } = &mut t.turns[0].observation {
            items[1].rank = 5;
        }
        let report = validate_trajectory(&t);
        assert!(report.has(ViolationCode::BadResultRanks));
    }

    #[test]
    fn failed_tool_call_with_none_observation_is_legal() {
        let mut t = well_formed("t1", "q1", 0);
        t.turns[1].observation = Observation::none();
        // The fetch still has to point at previous results; only the
        // observation went empty.
        let report = validate_trajectory(&t);
        assert!(report.is_clean(), "{:?}", report.violations);
    }

    #[test]
    fn parse_groups_by_query_id_in_first_appearance_order() {
        let mut buf = Vec::new();
        let groups = vec![
            RolloutGroup {
                query_id: "q2".to_string(),
                trajectories: vec![well_formed("a", "q2", 1), well_formed("b", "q2", 0)],
            },
            RolloutGroup {
                query_id: "q1".to_string(),
                trajectories: vec![well_formed("c", "q1", 0)],
            },
        ];
        write_rollout_writer(&groups, &mut buf).unwrap();
        let parsed = parse_rollout_reader(buf.as_slice()).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].query_id, "q2");
        assert_eq!(parsed[0].len(), 2);
        assert_eq!(parsed[1].query_id, "q1");
        assert_eq!(parsed, groups);
    }

    #[test]
    fn parse_empty_input_yields_no_groups() {
        let parsed = parse_rollout_reader(&b""[..]).unwrap();
        assert!(parsed.is_empty());
    }

    #[test]
    fn parse_rejects_bad_fetch_url_with_invariant_violation() {
        let mut t = well_formed("t-bad", "q1", 0);
        if let Action::Fetch { urls } = &mut t.turns[1].action {
            urls[0] = "https://elsewhere.test/z".to_string();
        }
        let line = serde_json::to_string(&t).unwrap();
        let err = parse_rollout_reader(line.as_bytes()).unwrap_err();
        match err {
            LogError::InvariantViolation {
                trajectory_id,
                violation,
                ..
            } => {
                assert_eq!(trajectory_id, "t-bad");
                assert_eq!(violation, "fetch-url-not-in-previous-results");
            }
            other => panic!("expected invariant violation, got {other:?}"),
        }
    }

    #[test]
    fn parse_reports_line_number_for_malformed_records() {
        let good = serde_json::to_string(&well_formed("t1", "q1", 1)).unwrap();
        let input = format!("{good}\n{{not json}}\n");
        let err = parse_rollout_reader(input.as_bytes()).unwrap_err();
        match err {
            LogError::MalformedRecord { line, .. } => assert_eq!(line, 2),
            other => panic!("expected malformed record, got {other:?}"),
        }
    }

    #[test]
    fn write_to_unwritable_path_is_io_error() {
        let groups = vec![RolloutGroup {
            query_id: "q1".to_string(),
            trajectories: vec![well_formed("t1", "q1", 1)],
        }];
        let err = write_rollout_log(&groups, Path::new("/nonexistent-dir/out.jsonl")).unwrap_err();
        assert!(matches!(err, LogError::Io(_)));
    }

    #[test]
    fn round_trip_preserves_unicode_query_text() {
        let mut t = well_formed("t1", "q1", 1);
        t.query_text = "què és ∆? カタカナ \u{1F600}".to_string();
        let groups = vec![RolloutGroup {
            query_id: "q1".to_string(),
            trajectories: vec![t],
        }];
        let mut buf = Vec::new();
        write_rollout_writer(&groups, &mut buf).unwrap();
        let parsed = parse_rollout_reader(buf.as_slice()).unwrap();
        assert_eq!(parsed, groups);
    }

    #[test]
    fn record_field_names_match_the_contract() {
        let t = well_formed("t1", "q1", 1);
        let value: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        let obj = value.as_object().unwrap();
        for key in [
            "schema_version",
            "trajectory_id",
            "query_id",
            "query_text",
            "outcome",
            "total_generated_tokens",
            "turns",
        ] {
            assert!(obj.contains_key(key), "missing field {key}");
        }
        let turn = &value["turns"][0];
        for key in [
            "index",
            "reasoning_digest",
            "action",
            "observation",
            "generated_token_count",
        ] {
            assert!(turn.get(key).is_some(), "missing turn field {key}");
        }
        assert_eq!(turn["action"]["kind"], "search");
        assert!(turn["action"]["payload"]["queries"].is_array());
        assert_eq!(turn["observation"]["kind"], "search_results");
    }
}
