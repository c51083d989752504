//! PRM training samples: rendered context, candidate action and a label
//! min-max normalized over the whole emitted dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Step, Task, TaskIndex, Trajectory};
use crate::reward::StepReward;

pub const TRUNCATION_MARKER: &str = "...[truncated]";
pub const PROBLEM_HEADER: &str = "PROBLEM:";
pub const CURRENT_STEP_PREFIX: &str = "CURRENT STEP: ";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("step {t} is out of range for a history of {len} steps")]
    IndexOutOfRange { t: usize, len: usize },
    #[error("no returns to normalize")]
    EmptyInput,
    #[error("non-finite return {0}")]
    NonFiniteReturn(f64),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("trajectory for {task_id:?} has {steps} steps but {labels} labels")]
    UnlabeledTrajectory {
        task_id: String,
        steps: usize,
        labels: usize,
    },
    #[error("dataset line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Context rendering parameters shared by dataset construction and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextConfig {
    /// Number of prior steps kept in the window.
    pub history: usize,
    /// Byte budget per rendered observation.
    pub obs_cap_bytes: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            history: 5,
            obs_cap_bytes: 2000,
        }
    }
}

/// Cuts `text` to at most `cap` bytes on a char boundary and appends the
/// truncation marker when anything was dropped.
pub fn truncate_observation(text: &str, cap: usize) -> String {
    if text.len() <= cap {
        return text.to_string();
    }
    let mut end = cap;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}{TRUNCATION_MARKER}", &text[..end])
}

/// Renders the scoring context for step `t`: the problem block, then the
/// last `history` steps before `t`, then a `CURRENT STEP` line.
pub fn render_context(
    task: &Task,
    steps: &[Step],
    t: usize,
    cfg: &ContextConfig,
) -> Result<String, DatasetError> {
    if t > steps.len() {
        return Err(DatasetError::IndexOutOfRange {
            t,
            len: steps.len(),
        });
    }
    let mut out = String::new();
    let _ = writeln!(out, "{PROBLEM_HEADER}\n{}", task.problem_statement);
    for (i, step) in steps
        .iter()
        .enumerate()
        .take(t)
        .skip(t.saturating_sub(cfg.history))
    {
        let _ = write!(
            out,
            "\nSTEP {i}:\nACTION: {}\nOBSERVATION: {}\n",
            step.action_text,
            truncate_observation(&step.observation_text, cfg.obs_cap_bytes)
        );
    }
    let _ = write!(out, "\n{CURRENT_STEP_PREFIX}{t}");
    Ok(out)
}

/// Min-max normalization to `[0, 1]`; a constant input maps to 0.5.
pub fn normalize_labels(returns: &[f64]) -> Result<Vec<f64>, DatasetError> {
    if returns.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    if let Some(bad) = returns.iter().find(|g| !g.is_finite()) {
        return Err(DatasetError::NonFiniteReturn(*bad));
    }
    let min = returns.iter().copied().fold(f64::INFINITY, f64::min);
    let max = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.5; returns.len()]);
    }
    let range = max - min;
    Ok(returns
        .iter()
        .map(|g| ((g - min) / range).clamp(0.0, 1.0))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrmSample {
    pub task_id: String,
    pub step_index: usize,
    #[serde(rename = "context")]
    pub context_text: String,
    #[serde(rename = "action")]
    pub action_text: String,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sample_count: usize,
    pub label_min: f64,
    pub label_max: f64,
    pub label_mean: f64,
    /// Sample counts by task split.
    pub per_split: BTreeMap<String, usize>,
    /// Train/validation sample counts once the dataset has been partitioned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<BTreeMap<String, usize>>,
}

/// Turns labeled trajectories into one sample per step. Labels of the
/// `StepReward`s are filled in place with the normalized values.
pub fn build_dataset(
    labeled: &mut [(Trajectory, Vec<StepReward>)],
    tasks: &TaskIndex,
    ctx: &ContextConfig,
) -> Result<(Vec<PrmSample>, DatasetStats), DatasetError> {
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.sort_by(|&a, &b| labeled[a].0.task_id.cmp(&labeled[b].0.task_id));

    let mut samples = Vec::new();
    let mut returns = Vec::new();
    let mut per_split: BTreeMap<String, usize> = BTreeMap::new();
    for &i in &order {
        let (traj, rewards) = &labeled[i];
        let task = tasks
            .get(&traj.task_id)
            .ok_or_else(|| DatasetError::UnknownTask(traj.task_id.clone()))?;
        if rewards.len() != traj.steps.len() {
            return Err(DatasetError::UnlabeledTrajectory {
                task_id: traj.task_id.clone(),
                steps: traj.steps.len(),
                labels: rewards.len(),
            });
        }
        for (t, (step, reward)) in traj.steps.iter().zip(rewards).enumerate() {
            samples.push(PrmSample {
                task_id: traj.task_id.clone(),
                step_index: step.index,
                context_text: render_context(task, &traj.steps, t, ctx)?,
                action_text: step.action_text.clone(),
                label: 0.0,
            });
            returns.push(reward.discounted_return);
        }
        *per_split.entry(task.split.to_string()).or_insert(0) += traj.steps.len();
    }

    if samples.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    let labels = normalize_labels(&returns)?;
    for (s, l) in samples.iter_mut().zip(&labels) {
        s.label = *l;
    }
    let mut cursor = labels.iter();
    for &i in &order {
        for r in labeled[i].1.iter_mut() {
            r.normalized_label = cursor.next().copied();
        }
    }

    let stats = DatasetStats {
        sample_count: samples.len(),
        label_min: labels.iter().copied().fold(f64::INFINITY, f64::min),
        label_max: labels.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        label_mean: labels.iter().sum::<f64>() / labels.len() as f64,
        per_split,
        partition: None,
    };
    Ok((samples, stats))
}

/// Task-disjoint train/validation split. `round(val_fraction * n_tasks)`
/// tasks, picked by a seeded shuffle, go to validation. Sample order is
/// preserved on both sides.
pub fn split_dataset(
    samples: Vec<PrmSample>,
    val_fraction: f64,
    seed: u64,
) -> (Vec<PrmSample>, Vec<PrmSample>) {
    let task_ids: BTreeSet<&str> = samples.iter().map(|s| s.task_id.as_str()).collect();
    let mut task_ids: Vec<String> = task_ids.into_iter().map(str::to_string).collect();
    let n_val = ((val_fraction.clamp(0.0, 1.0) * task_ids.len() as f64).round() as usize)
        .min(task_ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    task_ids.shuffle(&mut rng);
    let val_ids: BTreeSet<String> = task_ids.into_iter().take(n_val).collect();
    samples
        .into_iter()
        .partition(|s| !val_ids.contains(&s.task_id))
}

pub fn write_samples(mut writer: impl Write, samples: &[PrmSample]) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut writer, s)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_samples(reader: impl BufRead) -> Result<Vec<PrmSample>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: PrmSample =
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })?;
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Split;
    use crate::reward::{label_trajectory, RewardConfig};
    use proptest::prelude::*;

    fn task(id: &str) -> Task {
        Task {
            task_id: id.into(),
            repo_ref: "r".into(),
            base_commit: "c".into(),
            problem_statement: format!("problem of {id}"),
            fail_to_pass_tests: vec!["f".into()],
            pass_to_pass_tests: vec![],
            relevant_files: ["a.py".to_string()].into_iter().collect(),
            split: Split::Train,
        }
    }

    fn steps(n: usize) -> Vec<Step> {
        (0..n)
            .map(|i| Step::new(i, format!("cat f{i}.py"), format!("obs {i}"), true, None))
            .collect()
    }

    #[test]
    fn context_at_start_is_problem_only() {
        let cfg = ContextConfig::default();
        let c = render_context(&task("a"), &steps(4), 0, &cfg).unwrap();
        assert!(c.starts_with("PROBLEM:\nproblem of a\n"));
        assert!(!c.contains("STEP 0:"));
        assert!(c.ends_with("CURRENT STEP: 0"));
    }

    #[test]
    fn context_window() {
        let cfg = ContextConfig {
            history: 5,
            obs_cap_bytes: 2000,
        };
        let c = render_context(&task("a"), &steps(10), 7, &cfg).unwrap();
        let shown: Vec<usize> = (0..10)
            .filter(|i| c.contains(&format!("STEP {i}:\n")))
            .collect();
        assert_eq!(shown, vec![2, 3, 4, 5, 6]);
        let pos: Vec<usize> = shown
            .iter()
            .map(|i| c.find(&format!("STEP {i}:\n")).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(
            render_context(&task("a"), &steps(3), 4, &cfg),
            Err(DatasetError::IndexOutOfRange { .. })
        ));
        // t == len is allowed: the context for the next action.
        assert!(render_context(&task("a"), &steps(3), 3, &cfg).is_ok());
    }

    #[test]
    fn observation_truncation() {
        let obs = "x".repeat(10_000);
        let out = truncate_observation(&obs, 2000);
        assert_eq!(out.len(), 2000 + TRUNCATION_MARKER.len());
        assert!(out.ends_with(TRUNCATION_MARKER));
        assert_eq!(truncate_observation("short", 2000), "short");
        // Multi-byte chars never split.
        let out = truncate_observation("ééé", 3);
        assert_eq!(out, format!("é{TRUNCATION_MARKER}"));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize_labels(&[0.0, 2.0, 4.0]).unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(normalize_labels(&[3.3; 3]).unwrap(), vec![0.5; 3]);
        assert_eq!(normalize_labels(&[-1.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(
            normalize_labels(&[]),
            Err(DatasetError::EmptyInput)
        ));
        assert!(matches!(
            normalize_labels(&[f64::NAN]),
            Err(DatasetError::NonFiniteReturn(_))
        ));
    }

    fn labeled(id: &str, n: usize) -> (Trajectory, Vec<StepReward>) {
        let mut s = steps(n);
        s.push(Step::new(n, "submit", "", true, None));
        let t = Trajectory {
            task_id: id.into(),
            steps: s,
            resolved: false,
            token_cost_usd: 0.0,
        };
        let r = label_trajectory(&t, &task(id), &RewardConfig::default(), 30).unwrap();
        (t, r)
    }

    #[test]
    fn build_counts_and_order() {
        let idx = TaskIndex::new([task("b"), task("a")]).unwrap();
        let mut data = vec![labeled("b", 3), labeled("a", 2)];
        let (samples, stats) = build_dataset(&mut data, &idx, &ContextConfig::default()).unwrap();
        assert_eq!(samples.len(), 7);
        assert_eq!(stats.sample_count, 7);
        assert_eq!(samples[0].task_id, "a");
        assert_eq!(
            samples.iter().map(|s| s.step_index).collect::<Vec<_>>(),
            vec![0, 1, 2, 0, 1, 2, 3]
        );
        assert_eq!(stats.per_split["train"], 7);
        assert_eq!(stats.label_min, 0.0);
        assert_eq!(stats.label_max, 1.0);
        assert!(data
            .iter()
            .all(|(_, r)| r.iter().all(|l| l.normalized_label.is_some())));
    }

    #[test]
    fn build_two_returns() {
        let idx = TaskIndex::new([task("a")]).unwrap();
        let (mut t, mut r) = labeled("a", 1);
        t.steps.truncate(2);
        r.truncate(2);
        r[0].discounted_return = 1.59;
        r[1].discounted_return = 1.1;
        let (samples, _) = build_dataset(&mut [(t, r)], &idx, &ContextConfig::default()).unwrap();
        assert_eq!(
            samples.iter().map(|s| s.label).collect::<Vec<_>>(),
            vec![1.0, 0.0]
        );
    }

    #[test]
    fn build_constant_and_errors() {
        let idx = TaskIndex::new([task("a")]).unwrap();
        let (t, mut r) = labeled("a", 2);
        for l in r.iter_mut() {
            l.discounted_return = 0.7;
        }
        let (samples, _) = build_dataset(
            &mut [(t.clone(), r.clone())],
            &idx,
            &ContextConfig::default(),
        )
        .unwrap();
        assert!(samples.iter().all(|s| s.label == 0.5));

        r.pop();
        assert!(matches!(
            build_dataset(&mut [(t.clone(), r)], &idx, &ContextConfig::default()),
            Err(DatasetError::UnlabeledTrajectory { .. })
        ));
        let (t2, r2) = labeled("zzz", 1);
        assert!(matches!(
            build_dataset(&mut [(t2, r2)], &idx, &ContextConfig::default()),
            Err(DatasetError::UnknownTask(_))
        ));
    }

    fn samples_for(n_tasks: usize) -> Vec<PrmSample> {
        (0..n_tasks)
            .flat_map(|t| {
                (0..3).map(move |s| PrmSample {
                    task_id: format!("task-{t:02}"),
                    step_index: s,
                    context_text: "PROBLEM:\nx".into(),
                    action_text: "ls".into(),
                    label: 0.5,
                })
            })
            .collect()
    }

    #[test]
    fn split_examples() {
        let (train, val) = split_dataset(samples_for(10), 0.0, 7);
        assert_eq!((train.len(), val.len()), (30, 0));

        let (train, val) = split_dataset(samples_for(10), 0.2, 7);
        let val_tasks: BTreeSet<_> = val.iter().map(|s| s.task_id.clone()).collect();
        let train_tasks: BTreeSet<_> = train.iter().map(|s| s.task_id.clone()).collect();
        assert_eq!(val_tasks.len(), 2);
        assert!(val_tasks.is_disjoint(&train_tasks));
        let (train2, val2) = split_dataset(samples_for(10), 0.2, 7);
        assert_eq!((train, val), (train2, val2));

        let (a, b) = split_dataset(samples_for(10), 0.5, 99);
        let at: BTreeSet<_> = a.iter().map(|s| &s.task_id).collect();
        assert!(b.iter().all(|s| !at.contains(&s.task_id)));
    }

    #[test]
    fn samples_round_trip() {
        let samples = samples_for(2);
        let mut buf = Vec::new();
        write_samples(&mut buf, &samples).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert!(line.starts_with(r#"{"task_id":"task-00","step_index":0,"context":"#));
        assert_eq!(read_samples(buf.as_slice()).unwrap(), samples);
    }

    proptest! {
        #[test]
        fn normalization_contract(returns in prop::collection::vec(-50.0f64..50.0, 1..200)) {
            let labels = normalize_labels(&returns).unwrap();
            prop_assert!(labels.iter().all(|l| (0.0..=1.0).contains(l)));
            let distinct = returns.iter().any(|g| *g != returns[0]);
            if distinct {
                prop_assert!(labels.contains(&0.0) && labels.contains(&1.0));
            } else {
                prop_assert!(labels.iter().all(|l| *l == 0.5));
            }
            for i in 0..returns.len() {
                for j in 0..returns.len() {
                    if returns[i] < returns[j] {
                        prop_assert!(labels[i] <= labels[j]);
                    }
                }
            }
        }

        #[test]
        fn context_is_injective_in_window(a in "[a-z ]{1,20}", b in "[a-z ]{1,20}") {
            let t = task("x");
            let cfg = ContextConfig::default();
            let sa = vec![Step::new(0, a.clone(), "o", true, None)];
            let sb = vec![Step::new(0, b.clone(), "o", true, None)];
            let ca = render_context(&t, &sa, 1, &cfg).unwrap();
            let cb = render_context(&t, &sb, 1, &cfg).unwrap();
            prop_assert_eq!(a == b, ca == cb);
            prop_assert_eq!(ca.clone(), render_context(&t, &sa, 1, &cfg).unwrap());
        }
    }
}
