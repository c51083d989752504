//! Heuristic step rewards and discounted returns.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate_trajectory, ActionKind, Step, Task, TestReport, TestStatus, Trajectory, Violation,
};

pub const EXEC: &str = "exec";
pub const READ_RELEVANT: &str = "read_relevant";
pub const EDIT_TARGET: &str = "edit_target";
pub const TEST_DELTA: &str = "test_delta";
pub const REPEAT: &str = "repeat";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub w_exec: f64,
    pub w_read_relevant: f64,
    pub w_edit_target: f64,
    pub w_test_pass_delta: f64,
    pub w_test_fail_delta: f64,
    pub w_repeat: f64,
    pub repeat_window: usize,
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_exec: 0.1,
            w_read_relevant: 0.3,
            w_edit_target: 0.5,
            w_test_pass_delta: 1.0,
            w_test_fail_delta: -0.2,
            w_repeat: -0.3,
            repeat_window: 3,
            gamma: 0.9,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        check_gamma(self.gamma)?;
        if self.repeat_window == 0 {
            return Err(RewardError::InvalidConfig(
                "repeat_window must be >= 1".into(),
            ));
        }
        let weights = [
            self.w_exec,
            self.w_read_relevant,
            self.w_edit_target,
            self.w_test_pass_delta,
            self.w_test_fail_delta,
            self.w_repeat,
        ];
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(RewardError::InvalidConfig(
                "reward weights must be finite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("reward sequence is empty")]
    EmptyInput,
    #[error("gamma must lie in (0, 1], got {0}")]
    InvalidGamma(f64),
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
    #[error("trajectory failed validation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidTrajectory(Vec<Violation>),
}

fn check_gamma(gamma: f64) -> Result<(), RewardError> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(RewardError::InvalidGamma(gamma))
    }
}

/// Reward bookkeeping for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReward {
    pub step_index: usize,
    pub components: BTreeMap<String, f64>,
    /// Immediate reward, the sum of `components`.
    pub immediate: f64,
    /// Discounted return from this step onward.
    pub discounted_return: f64,
    /// Dataset-level normalized label; `None` until normalization runs.
    pub normalized_label: Option<f64>,
}

/// Collapses whitespace runs so that cosmetic differences do not hide a repeat.
pub fn normalize_action(action: &str) -> String {
    action.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Computes the heuristic components of one step. `prior_actions` holds the
/// action texts of at most `repeat_window` preceding steps; the caller picks
/// the window. The discounted return is left at zero.
pub fn immediate_reward(
    step: &Step,
    task: &Task,
    prior_actions: &[String],
    prior_test_report: Option<&TestReport>,
    config: &RewardConfig,
) -> StepReward {
    let mut components = BTreeMap::new();

    if step.exec_success {
        components.insert(EXEC.to_string(), config.w_exec);
    }
    let touches_relevant = step
        .touched_paths
        .iter()
        .any(|p| task.relevant_files.contains(p));
    match step.action_kind {
        ActionKind::Read if touches_relevant => {
            components.insert(READ_RELEVANT.to_string(), config.w_read_relevant);
        }
        ActionKind::Edit if touches_relevant => {
            components.insert(EDIT_TARGET.to_string(), config.w_edit_target);
        }
        _ => {}
    }
    if step.action_kind.carries_test_report() {
        if let Some(report) = &step.test_report {
            let (newly_passing, newly_failing) = test_deltas(report, prior_test_report, task);
            let delta = config.w_test_pass_delta * newly_passing as f64
                + config.w_test_fail_delta * newly_failing as f64;
            components.insert(TEST_DELTA.to_string(), delta);
        }
    }
    let normalized = normalize_action(&step.action_text);
    if prior_actions
        .iter()
        .any(|a| normalize_action(a) == normalized)
    {
        components.insert(REPEAT.to_string(), config.w_repeat);
    }

    // `+ 0.0` turns the empty sum (-0.0) into 0.0.
    let immediate = components.values().sum::<f64>() + 0.0;
    StepReward {
        step_index: step.index,
        components,
        immediate,
        discounted_return: 0.0,
        normalized_label: None,
    }
}

/// Counts fail-to-pass tests that start passing and pass-to-pass tests that
/// start failing. A test absent from the prior report is taken at its base
/// state: fail-to-pass failing, pass-to-pass passing.
fn test_deltas(report: &TestReport, prior: Option<&TestReport>, task: &Task) -> (usize, usize) {
    let prior_status =
        |t: &str, base: TestStatus| prior.and_then(|p| p.get(t)).copied().unwrap_or(base);
    let newly_passing = task
        .fail_to_pass_tests
        .iter()
        .filter(|t| {
            report.get(*t) == Some(&TestStatus::Pass)
                && prior_status(t, TestStatus::Fail) != TestStatus::Pass
        })
        .count();
    let newly_failing = task
        .pass_to_pass_tests
        .iter()
        .filter(|t| {
            report.get(*t) == Some(&TestStatus::Fail)
                && prior_status(t, TestStatus::Pass) != TestStatus::Fail
        })
        .count();
    (newly_passing, newly_failing)
}

/// Backward recurrence `G_t = r_t + gamma * G_{t+1}`, `G_{T-1} = r_{T-1}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Result<Vec<f64>, RewardError> {
    if rewards.is_empty() {
        return Err(RewardError::EmptyInput);
    }
    check_gamma(gamma)?;
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (g, r) in returns.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *g = acc;
    }
    Ok(returns)
}

/// Labels every step of a validated trajectory.
pub fn label_trajectory(
    t: &Trajectory,
    task: &Task,
    config: &RewardConfig,
    budget: usize,
) -> Result<Vec<StepReward>, RewardError> {
    config.validate()?;
    let violations = validate_trajectory(t, task, budget);
    if !violations.is_empty() {
        return Err(RewardError::InvalidTrajectory(violations));
    }

    let mut window: VecDeque<String> = VecDeque::with_capacity(config.repeat_window);
    let mut prior_report: Option<&TestReport> = None;
    let mut labels = Vec::with_capacity(t.steps.len());
    for step in &t.steps {
        let prior: Vec<String> = window.iter().cloned().collect();
        labels.push(immediate_reward(step, task, &prior, prior_report, config));
        if window.len() == config.repeat_window {
            window.pop_front();
        }
        window.push_back(step.action_text.clone());
        if let Some(r) = &step.test_report {
            prior_report = Some(r);
        }
    }

    let rewards: Vec<f64> = labels.iter().map(|l| l.immediate).collect();
    let returns = discounted_returns(&rewards, config.gamma)?;
    for (label, g) in labels.iter_mut().zip(returns) {
        label.discounted_return = g;
    }
    Ok(labels)
}

/// One line of the reward-label JSONL format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLabelRecord {
    pub task_id: String,
    pub step_index: usize,
    pub components: BTreeMap<String, f64>,
    pub r: f64,
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved: Option<bool>,
}

impl RewardLabelRecord {
    pub fn from_step(task_id: &str, reward: &StepReward, resolved: Option<bool>) -> Self {
        Self {
            task_id: task_id.to_string(),
            step_index: reward.step_index,
            components: reward.components.clone(),
            r: reward.immediate,
            g: reward.discounted_return,
            label: reward.normalized_label,
            resolved,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Split, TestStatus};
    use proptest::prelude::*;

    fn task() -> Task {
        Task {
            task_id: "t1".into(),
            repo_ref: "r".into(),
            base_commit: "c".into(),
            problem_statement: "p".into(),
            fail_to_pass_tests: vec!["f1".into()],
            pass_to_pass_tests: vec!["p1".into()],
            relevant_files: ["src/a.py".to_string()].into_iter().collect(),
            split: Split::Train,
        }
    }

    fn oracle_sum(rewards: &[f64], gamma: f64, t: usize) -> f64 {
        rewards[t..]
            .iter()
            .enumerate()
            .map(|(k, r)| gamma.powi(k as i32) * r)
            .sum()
    }

    #[test]
    fn edit_relevant_exec() {
        let step = Step::new(0, "edit src/a.py <<< x", "", true, None);
        let r = immediate_reward(&step, &task(), &[], None, &RewardConfig::default());
        let expected: BTreeMap<String, f64> =
            [(EXEC.to_string(), 0.1), (EDIT_TARGET.to_string(), 0.5)]
                .into_iter()
                .collect();
        assert_eq!(r.components, expected);
        assert_eq!(r.immediate, 0.6);
    }

    #[test]
    fn repeated_failed_action() {
        let step = Step::new(1, "  echo   hi ", "", false, None);
        let r = immediate_reward(
            &step,
            &task(),
            &["echo hi".into()],
            None,
            &RewardConfig::default(),
        );
        assert_eq!(r.immediate, -0.3);
        assert_eq!(r.components.len(), 1);
    }

    #[test]
    fn no_triggers() {
        let step = Step::new(0, "echo hi", "", false, None);
        let r = immediate_reward(&step, &task(), &[], None, &RewardConfig::default());
        assert!(r.components.is_empty());
        assert_eq!(r.immediate, 0.0);
    }

    #[test]
    fn test_delta_against_prior_report() {
        let cfg = RewardConfig::default();
        let report: TestReport = [
            ("f1".to_string(), TestStatus::Pass),
            ("p1".to_string(), TestStatus::Fail),
        ]
        .into_iter()
        .collect();
        let step = Step::new(0, "pytest", "", false, Some(report.clone()));
        let r = immediate_reward(&step, &task(), &[], None, &cfg);
        assert!((r.components[TEST_DELTA] - 0.8).abs() < 1e-12);
        // Identical rerun earns nothing.
        let r = immediate_reward(&step, &task(), &[], Some(&report), &cfg);
        assert_eq!(r.components[TEST_DELTA], 0.0);
    }

    #[test]
    fn returns_examples() {
        let g = discounted_returns(&[1.0, 0.0, 1.0], 0.9).unwrap();
        let oracle: Vec<f64> = (0..3)
            .map(|t| oracle_sum(&[1.0, 0.0, 1.0], 0.9, t))
            .collect();
        for (a, b) in g.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((g[0] - 1.81).abs() < 1e-12 && (g[1] - 0.9).abs() < 1e-12 && g[2] == 1.0);
        assert_eq!(discounted_returns(&[0.0; 4], 0.5).unwrap(), vec![0.0; 4]);
        assert_eq!(discounted_returns(&[-2.5], 0.3).unwrap(), vec![-2.5]);
        assert!(matches!(
            discounted_returns(&[], 0.9),
            Err(RewardError::EmptyInput)
        ));
        assert!(matches!(
            discounted_returns(&[1.0], 0.0),
            Err(RewardError::InvalidGamma(_))
        ));
    }

    #[test]
    fn two_step_trajectory() {
        let report: TestReport = [
            ("f1".to_string(), TestStatus::Pass),
            ("p1".to_string(), TestStatus::Pass),
        ]
        .into_iter()
        .collect();
        let t = Trajectory {
            task_id: "t1".into(),
            steps: vec![
                Step::new(0, "edit src/a.py <<< fixed", "", true, None),
                Step::new(1, "submit", "", true, Some(report)),
            ],
            resolved: true,
            token_cost_usd: 0.0,
        };
        let labels = label_trajectory(&t, &task(), &RewardConfig::default(), 30).unwrap();
        let r: Vec<f64> = labels.iter().map(|l| l.immediate).collect();
        let g: Vec<f64> = labels.iter().map(|l| l.discounted_return).collect();
        assert!((r[0] - 0.6).abs() < 1e-12 && (r[1] - 1.1).abs() < 1e-12);
        assert!((g[0] - 1.59).abs() < 1e-12 && (g[1] - 1.1).abs() < 1e-12);
        assert!(labels.iter().all(|l| l.normalized_label.is_none()));
    }

    #[test]
    fn failed_other_actions_label_zero() {
        let steps = (0..3)
            .map(|i| Step::new(i, format!("echo {i}"), "", false, None))
            .collect();
        let t = Trajectory {
            task_id: "t1".into(),
            steps,
            resolved: false,
            token_cost_usd: 0.0,
        };
        let labels = label_trajectory(&t, &task(), &RewardConfig::default(), 3).unwrap();
        assert!(labels
            .iter()
            .all(|l| l.immediate == 0.0 && l.discounted_return == 0.0));
    }

    #[test]
    fn repeat_window_boundary() {
        let cfg = RewardConfig::default();
        let w = cfg.repeat_window;
        // Same action W+1 steps apart falls outside the window.
        let mut steps: Vec<Step> = vec![Step::new(0, "ls src", "", false, None)];
        for i in 1..=w {
            steps.push(Step::new(i, format!("echo {i}"), "", false, None));
        }
        steps.push(Step::new(w + 1, "ls src", "", false, None));
        let n = steps.len();
        let t = Trajectory {
            task_id: "t1".into(),
            steps,
            resolved: false,
            token_cost_usd: 0.0,
        };
        let labels = label_trajectory(&t, &task(), &cfg, n).unwrap();
        assert!(!labels[w + 1].components.contains_key(REPEAT));

        // W steps apart is still inside.
        let mut t2 = t.clone();
        t2.steps.remove(1);
        for (i, s) in t2.steps.iter_mut().enumerate() {
            s.index = i;
        }
        let labels = label_trajectory(&t2, &task(), &cfg, n - 1).unwrap();
        assert!(labels[w].components.contains_key(REPEAT));
    }

    #[test]
    fn invalid_trajectory_propagates() {
        let t = Trajectory {
            task_id: "t1".into(),
            steps: vec![Step::new(0, "ls", "", true, None)],
            resolved: true,
            token_cost_usd: 0.0,
        };
        assert!(matches!(
            label_trajectory(&t, &task(), &RewardConfig::default(), 1),
            Err(RewardError::InvalidTrajectory(_))
        ));
    }

    fn arb_step_text() -> impl Strategy<Value = String> {
        prop_oneof![
            Just("cat src/a.py".to_string()),
            Just("cat src/b.py".to_string()),
            Just("edit src/a.py <<< fix".to_string()),
            Just("edit src/b.py <<< oops".to_string()),
            Just("echo hi".to_string()),
        ]
    }

    proptest! {
        #[test]
        fn returns_match_summation(
            rewards in prop::collection::vec(-1.0f64..2.0, 1..40),
            gamma in prop_oneof![Just(0.5), Just(0.9), Just(1.0), 0.01f64..1.0],
        ) {
            let g = discounted_returns(&rewards, gamma).unwrap();
            for t in 0..rewards.len() {
                prop_assert!((g[t] - oracle_sum(&rewards, gamma, t)).abs() <= 1e-9);
            }
            if gamma == 1.0 {
                prop_assert!((g[0] - rewards.iter().sum::<f64>()).abs() <= 1e-9);
            }
        }

        #[test]
        fn immediate_is_component_sum(
            texts in prop::collection::vec(arb_step_text(), 1..12),
            exec in prop::collection::vec(any::<bool>(), 12),
        ) {
            let steps: Vec<Step> = texts.iter().enumerate()
                .map(|(i, a)| Step::new(i, a.clone(), "", exec[i], None)).collect();
            let n = steps.len();
            let t = Trajectory { task_id: "t1".into(), steps, resolved: false, token_cost_usd: 0.0 };
            for l in label_trajectory(&t, &task(), &RewardConfig::default(), n).unwrap() {
                let sum: f64 = l.components.values().sum();
                prop_assert!((l.immediate - sum).abs() <= 1e-12);
            }
        }

        #[test]
        fn raising_a_weight_never_lowers_triggered_returns(
            texts in prop::collection::vec(arb_step_text(), 1..12),
            exec in prop::collection::vec(any::<bool>(), 12),
            bump in 0.0f64..2.0,
            which in 0usize..3,
        ) {
            let steps: Vec<Step> = texts.iter().enumerate()
                .map(|(i, a)| Step::new(i, a.clone(), "", exec[i], None)).collect();
            let n = steps.len();
            let t = Trajectory { task_id: "t1".into(), steps, resolved: false, token_cost_usd: 0.0 };
            let base = RewardConfig::default();
            let mut raised = base.clone();
            let key = match which {
                0 => { raised.w_exec += bump; EXEC }
                1 => { raised.w_read_relevant += bump; READ_RELEVANT }
                _ => { raised.w_edit_target += bump; EDIT_TARGET }
            };
            let a = label_trajectory(&t, &task(), &base, n).unwrap();
            let b = label_trajectory(&t, &task(), &raised, n).unwrap();
            for i in 0..n {
                if a[i..].iter().any(|l| l.components.contains_key(key)) {
                    prop_assert!(b[i].discounted_return >= a[i].discounted_return - 1e-12);
                }
            }
        }

        #[test]
        fn repeat_ignores_whitespace(pad_l in "[ \t]{0,3}", pad_r in "[ \t]{0,3}", gap in "[ \t]{1,4}") {
            let prior = vec!["cat src/a.py".to_string()];
            let text = format!("{pad_l}cat{gap}src/a.py{pad_r}");
            let step = Step::new(1, text, "", false, None);
            let r = immediate_reward(&step, &task(), &prior, None, &RewardConfig::default());
            prop_assert!(r.components.contains_key(REPEAT));
        }
    }
}
