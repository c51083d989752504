//! Reward-guided inference loop: propose, score, pick the argmax, execute.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{render_context, ContextConfig};
use crate::environment::{is_resolved, EnvError, EnvState, Environment, TerminationReason};
use crate::model::{Step, Task, Trajectory, DEFAULT_STEP_BUDGET};
use crate::policy::{Policy, PolicyContext, TokenUsage};
use crate::scorer::{ScoreRequest, Scorer};

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("{candidates} candidates but {scores} scores")]
    LengthMismatch { candidates: usize, scores: usize },
    #[error("no candidates to select from")]
    EmptyCandidates,
    #[error("score {score} at index {index} is outside [0, 1]")]
    InvalidScore { index: usize, score: f64 },
}

/// Index of the highest score; exact ties go to the lowest index.
pub fn select_action(candidates: &[String], scores: &[f64]) -> Result<usize, SelectionError> {
    if candidates.len() != scores.len() {
        return Err(SelectionError::LengthMismatch {
            candidates: candidates.len(),
            scores: scores.len(),
        });
    }
    if candidates.is_empty() {
        return Err(SelectionError::EmptyCandidates);
    }
    if let Some((index, &score)) = scores
        .iter()
        .enumerate()
        .find(|(_, s)| !(0.0..=1.0).contains(*s))
    {
        return Err(SelectionError::InvalidScore { index, score });
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub step_index: usize,
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
    pub chosen_index: usize,
    pub generation_cost_usd: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub duplicate_flags: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Policy,
    Scorer,
    Environment,
    Selection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub kind: FailureKind,
    pub step_index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: String,
    pub resolved: bool,
    pub steps_used: usize,
    pub total_cost_usd: f64,
    #[serde(default)]
    pub token_usage: TokenUsage,
    pub termination_reason: TerminationReason,
    pub trajectory: Trajectory,
    pub selection_log: Vec<SelectionEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<EpisodeFailure>,
}

impl EpisodeResult {
    fn empty(task: &Task) -> Self {
        Self {
            task_id: task.task_id.clone(),
            resolved: false,
            steps_used: 0,
            total_cost_usd: 0.0,
            token_usage: TokenUsage::default(),
            termination_reason: TerminationReason::None,
            trajectory: Trajectory {
                task_id: task.task_id.clone(),
                steps: Vec::new(),
                resolved: false,
                token_cost_usd: 0.0,
            },
            selection_log: Vec::new(),
            failure: None,
        }
    }

    fn fail(mut self, kind: FailureKind, message: impl std::fmt::Display) -> Self {
        let step_index = self.trajectory.steps.len();
        log::warn!(
            "episode {} failed at step {step_index}: {message}",
            self.task_id
        );
        self.failure = Some(EpisodeFailure {
            kind,
            step_index,
            message: message.to_string(),
        });
        self
    }

    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub budget: usize,
    pub k: usize,
    pub context: ContextConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_STEP_BUDGET,
            k: 4,
            context: ContextConfig::default(),
        }
    }
}

/// Runs one reward-guided episode. The environment is reset for `task`
/// first. Policy, scorer and environment errors end the episode and are
/// recorded in `failure`.
pub fn run_episode(
    task: &Task,
    policy: &dyn Policy,
    scorer: &dyn Scorer,
    env: &mut dyn Environment,
    cfg: &EpisodeConfig,
) -> EpisodeResult {
    drive(task, env, cfg.budget, |history, step_index, result| {
        let ctx = PolicyContext {
            task,
            history,
            step_index,
            budget: cfg.budget,
        };
        let cands = policy
            .propose(&ctx, cfg.k)
            .map_err(|e| (FailureKind::Policy, e.to_string()))?;
        result.total_cost_usd += cands.generation_cost_usd;
        result.token_usage += cands.token_usage;

        let context = render_context(task, history, step_index, &cfg.context)
            .map_err(|e| (FailureKind::Scorer, e.to_string()))?;
        let requests = cands
            .actions
            .iter()
            .map(|a| ScoreRequest::new(context.clone(), a.clone()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| (FailureKind::Scorer, e.to_string()))?;
        let scores = scorer
            .score_batch(&requests)
            .map_err(|e| (FailureKind::Scorer, e.to_string()))?;
        let chosen = select_action(&cands.actions, &scores)
            .map_err(|e| (FailureKind::Selection, e.to_string()))?;
        let action = cands.actions[chosen].clone();
        result.selection_log.push(SelectionEntry {
            step_index,
            candidates: cands.actions,
            scores,
            chosen_index: chosen,
            generation_cost_usd: cands.generation_cost_usd,
            duplicate_flags: cands.duplicate_flags,
        });
        Ok(action)
    })
}

/// The unguided agent: executes the policy's single proposal at every step.
pub fn run_unguided(
    task: &Task,
    policy: &dyn Policy,
    env: &mut dyn Environment,
    budget: usize,
) -> EpisodeResult {
    drive(task, env, budget, |history, step_index, result| {
        let ctx = PolicyContext {
            task,
            history,
            step_index,
            budget,
        };
        let cands = policy
            .propose(&ctx, 1)
            .map_err(|e| (FailureKind::Policy, e.to_string()))?;
        result.total_cost_usd += cands.generation_cost_usd;
        result.token_usage += cands.token_usage;
        cands
            .actions
            .into_iter()
            .next()
            .ok_or((FailureKind::Policy, "no candidate".to_string()))
    })
}

type StepChoice = Result<String, (FailureKind, String)>;

fn drive(
    task: &Task,
    env: &mut dyn Environment,
    budget: usize,
    mut choose: impl FnMut(&[Step], usize, &mut EpisodeResult) -> StepChoice,
) -> EpisodeResult {
    let mut result = EpisodeResult::empty(task);
    let mut steps: Vec<Step> = Vec::new();
    let mut state = match env.reset(task) {
        Ok(s) => s,
        Err(e) => return result.fail(FailureKind::Environment, e),
    };
    while !state.terminated && steps.len() < budget {
        let action = match choose(&steps, steps.len(), &mut result) {
            Ok(a) => a,
            Err((kind, msg)) => return finish(result, steps, task, &state).fail(kind, msg),
        };
        match env.exec_step(&action) {
            Ok((step, next)) => {
                steps.push(step);
                state = next;
            }
            Err(e) => return finish(result, steps, task, &state).fail(FailureKind::Environment, e),
        }
    }
    if !state.terminated {
        state.termination_reason = TerminationReason::StepBudgetExhausted;
    }
    finish(result, steps, task, &state)
}

fn finish(
    mut result: EpisodeResult,
    steps: Vec<Step>,
    task: &Task,
    state: &EnvState,
) -> EpisodeResult {
    result.steps_used = steps.len();
    result.resolved = is_resolved(state, task);
    result.termination_reason = state.termination_reason;
    result.trajectory.steps = steps;
    result.trajectory.resolved = result.resolved;
    result.trajectory.token_cost_usd = result.total_cost_usd;
    result
}

/// Builds a fresh environment for one task.
pub type EnvFactory<'a> = dyn Fn(&Task) -> Result<Box<dyn Environment>, EnvError> + Sync + 'a;

/// Runs one episode per task on a pool of `parallelism` threads. Results are
/// sorted by task id; one episode failing never affects the others.
pub fn run_batch(
    tasks: &[Task],
    policy: &dyn Policy,
    scorer: &dyn Scorer,
    env_factory: &EnvFactory<'_>,
    cfg: &EpisodeConfig,
    parallelism: usize,
) -> Result<Vec<EpisodeResult>, rayon::ThreadPoolBuildError> {
    run_batch_with(tasks, env_factory, parallelism, |task, env| {
        run_episode(task, policy, scorer, env, cfg)
    })
}

/// [`run_batch`] with an arbitrary per-task episode driver.
pub fn run_batch_with(
    tasks: &[Task],
    env_factory: &EnvFactory<'_>,
    parallelism: usize,
    episode: impl Fn(&Task, &mut dyn Environment) -> EpisodeResult + Sync,
) -> Result<Vec<EpisodeResult>, rayon::ThreadPoolBuildError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()?;
    let mut results: Vec<EpisodeResult> = pool.install(|| {
        tasks
            .par_iter()
            .map(|task| match env_factory(task) {
                Ok(mut env) => episode(task, env.as_mut()),
                Err(e) => EpisodeResult::empty(task).fail(FailureKind::Environment, e),
            })
            .collect()
    });
    results.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    Ok(results)
}

pub fn write_results(mut writer: impl Write, results: &[EpisodeResult]) -> std::io::Result<()> {
    for r in results {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_results(reader: impl BufRead) -> Result<Vec<EpisodeResult>, String> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}
