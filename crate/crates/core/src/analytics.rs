//! Evaluation metrics over episode results and labeled trajectories.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::EpisodeResult;
use crate::model::Trajectory;
use crate::reward::{RewardLabelRecord, StepReward};

/// What the reward means are computed over.
pub const LABEL_BASIS: &str = "normalized_label";

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("no results to summarize")]
    EmptyResults,
    #[error("task {task_id} step {step_index} has no normalized label")]
    MissingLabels { task_id: String, step_index: usize },
    #[error("label record for task {task_id} step {step_index} has no resolved flag")]
    MissingOutcome { task_id: String, step_index: usize },
    #[error("malformed report: {0}")]
    MalformedReport(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    pub resolved: bool,
    pub steps_used: usize,
    pub cost_usd: f64,
    #[serde(default)]
    pub failed: bool,
}

impl From<&EpisodeResult> for TaskRow {
    fn from(r: &EpisodeResult) -> Self {
        Self {
            task_id: r.task_id.clone(),
            resolved: r.resolved,
            steps_used: r.steps_used,
            cost_usd: r.total_cost_usd,
            failed: r.failed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub resolved_rate: f64,
    pub avg_cost_usd: f64,
    pub avg_steps: f64,
    pub n_tasks: usize,
    pub resolved_count: usize,
    pub rows: Vec<TaskRow>,
}

pub fn summarize_run(results: &[EpisodeResult]) -> Result<RunReport, AnalyticsError> {
    summarize_rows(results.iter().map(TaskRow::from).collect())
}

/// Means over the rows, accumulated in task-id order so the report does not
/// depend on the input order.
pub fn summarize_rows(mut rows: Vec<TaskRow>) -> Result<RunReport, AnalyticsError> {
    if rows.is_empty() {
        return Err(AnalyticsError::EmptyResults);
    }
    rows.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    let n = rows.len();
    let resolved_count = rows.iter().filter(|r| r.resolved).count();
    let steps: usize = rows.iter().map(|r| r.steps_used).sum();
    let cost: f64 = rows.iter().map(|r| r.cost_usd).sum();
    Ok(RunReport {
        resolved_rate: resolved_count as f64 / n as f64,
        avg_cost_usd: cost / n as f64,
        avg_steps: steps as f64 / n as f64,
        n_tasks: n,
        resolved_count,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardAnalysis {
    pub mean_reward_resolved: Option<f64>,
    pub mean_reward_unresolved: Option<f64>,
    pub n_steps_resolved: usize,
    pub n_steps_unresolved: usize,
}

fn gap_from(pairs: impl IntoIterator<Item = (bool, f64)>) -> RewardAnalysis {
    let (mut sr, mut nr, mut su, mut nu) = (0.0, 0, 0.0, 0);
    for (resolved, label) in pairs {
        if resolved {
            sr += label;
            nr += 1;
        } else {
            su += label;
            nu += 1;
        }
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    RewardAnalysis {
        mean_reward_resolved: mean(sr, nr),
        mean_reward_unresolved: mean(su, nu),
        n_steps_resolved: nr,
        n_steps_unresolved: nu,
    }
}

/// Step-weighted mean normalized label, grouped by trajectory outcome.
pub fn reward_gap(
    labeled: &[(Trajectory, Vec<StepReward>)],
) -> Result<RewardAnalysis, AnalyticsError> {
    let mut pairs = Vec::new();
    for (t, rewards) in labeled {
        for r in rewards {
            let label = r
                .normalized_label
                .ok_or_else(|| AnalyticsError::MissingLabels {
                    task_id: t.task_id.clone(),
                    step_index: r.step_index,
                })?;
            pairs.push((t.resolved, label));
        }
    }
    Ok(gap_from(pairs))
}

/// Same as [`reward_gap`], from label records that carry `label` and
/// `resolved`.
pub fn reward_gap_records(records: &[RewardLabelRecord]) -> Result<RewardAnalysis, AnalyticsError> {
    let mut pairs = Vec::with_capacity(records.len());
    for r in records {
        let label = r.label.ok_or_else(|| AnalyticsError::MissingLabels {
            task_id: r.task_id.clone(),
            step_index: r.step_index,
        })?;
        let resolved = r.resolved.ok_or_else(|| AnalyticsError::MissingOutcome {
            task_id: r.task_id.clone(),
            step_index: r.step_index,
        })?;
        pairs.push((resolved, label));
    }
    Ok(gap_from(pairs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedRun {
    pub method: String,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub runs: Vec<NamedRun>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_analysis: Option<RewardAnalysis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_basis: Option<String>,
}

impl ReportDocument {
    pub fn new(runs: &[(String, RunReport)], analysis: Option<&RewardAnalysis>) -> Self {
        Self {
            runs: runs
                .iter()
                .map(|(m, r)| NamedRun {
                    method: m.clone(),
                    report: r.clone(),
                })
                .collect(),
            reward_analysis: analysis.cloned(),
            label_basis: analysis.map(|_| LABEL_BASIS.to_string()),
        }
    }

    pub fn from_json(s: &str) -> Result<Self, AnalyticsError> {
        serde_json::from_str(s).map_err(|e| AnalyticsError::MalformedReport(e.to_string()))
    }
}

fn percent(rate: f64) -> String {
    let s = format!("{:.1}", rate * 100.0);
    format!("{}%", s.strip_suffix(".0").unwrap_or(&s))
}

/// Renders runs as the results table and the optional reward analysis as the
/// outcome table. Markdown costs use 3 decimals, steps 1 decimal.
pub fn emit_report(
    runs: &[(String, RunReport)],
    analysis: Option<&RewardAnalysis>,
    format: ReportFormat,
) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&ReportDocument::new(runs, analysis))
                .expect("report serialization cannot fail");
            s.push('\n');
            s
        }
        ReportFormat::Markdown => {
            let mut out = String::new();
            out.push_str("| Method | % Resolved | Avg. $ | Avg. Steps |\n");
            out.push_str("|---|---|---|---|\n");
            for (method, r) in runs {
                let _ = writeln!(
                    out,
                    "| {method} | {} | {:.3} | {:.1} |",
                    percent(r.resolved_rate),
                    r.avg_cost_usd,
                    r.avg_steps
                );
            }
            if let Some(a) = analysis {
                let fmt =
                    |m: Option<f64>| m.map_or_else(|| "--".to_string(), |v| format!("{v:.4}"));
                out.push_str("\n| Task Outcome | Average Reward |\n");
                out.push_str("|---|---|\n");
                let _ = writeln!(out, "| Resolved Tasks | {} |", fmt(a.mean_reward_resolved));
                let _ = writeln!(
                    out,
                    "| Unresolved Tasks | {} |",
                    fmt(a.mean_reward_unresolved)
                );
            }
            out
        }
    }
}
