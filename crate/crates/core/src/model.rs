//! Tasks, trajectories and steps, plus the trajectory JSONL codec and the
//! action classifier shared by every later stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Step budget used by the reference evaluation setup.
pub const DEFAULT_STEP_BUDGET: usize = 30;

/// Corpus sizes of the benchmark the pipeline targets. Recorded metadata only.
pub const BENCHMARK_TOTAL_TASKS: usize = 2294;
pub const BENCHMARK_EVAL_TASKS: usize = 500;
pub const BENCHMARK_TRAIN_TASKS: usize = BENCHMARK_TOTAL_TASKS - BENCHMARK_EVAL_TASKS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Eval => f.write_str("eval"),
        }
    }
}

/// One issue-resolution problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub task_id: String,
    pub repo_ref: String,
    pub base_commit: String,
    pub problem_statement: String,
    #[serde(rename = "fail_to_pass")]
    pub fail_to_pass_tests: Vec<String>,
    #[serde(rename = "pass_to_pass")]
    pub pass_to_pass_tests: Vec<String>,
    pub relevant_files: BTreeSet<String>,
    pub split: Split,
}

impl Task {
    /// Checks the per-task invariants. Returns one message per violation.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.task_id.trim().is_empty() {
            out.push("task_id is empty".to_string());
        }
        if self.fail_to_pass_tests.is_empty() {
            out.push(format!(
                "task {}: fail_to_pass tests must be non-empty",
                self.task_id
            ));
        }
        for path in &self.relevant_files {
            if normalize_path(path).as_deref() != Some(path.as_str()) {
                out.push(format!(
                    "task {}: relevant file {path:?} is not a normalized relative path",
                    self.task_id
                ));
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum TaskFileError {
    #[error("task file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("duplicate task_id {0:?}")]
    DuplicateTask(String),
    #[error("invalid task: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tasks keyed by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskIndex {
    tasks: BTreeMap<String, Task>,
}

impl TaskIndex {
    pub fn new(tasks: impl IntoIterator<Item = Task>) -> Result<Self, TaskFileError> {
        let mut map = BTreeMap::new();
        for task in tasks {
            if let Some(v) = task.violations().into_iter().next() {
                return Err(TaskFileError::Invalid(v));
            }
            if map.contains_key(&task.task_id) {
                return Err(TaskFileError::DuplicateTask(task.task_id));
            }
            map.insert(task.task_id.clone(), task);
        }
        Ok(Self { tasks: map })
    }

    pub fn get(&self, task_id: &str) -> Option<&Task> {
        self.tasks.get(task_id)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Tasks in task_id order.
    pub fn iter(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values()
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for t in self.tasks.values() {
            *counts.entry(t.split).or_insert(0) += 1;
        }
        counts
    }
}

/// Reads a task file (one JSON task per line, blank lines ignored).
pub fn read_tasks(reader: impl BufRead) -> Result<TaskIndex, TaskFileError> {
    let mut tasks = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: Task = serde_json::from_str(&line).map_err(|e| TaskFileError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?;
        tasks.push(task);
    }
    TaskIndex::new(tasks)
}

pub fn write_tasks<'a>(
    mut writer: impl Write,
    tasks: impl IntoIterator<Item = &'a Task>,
) -> std::io::Result<()> {
    for t in tasks {
        serde_json::to_writer(&mut writer, t)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Read,
    Edit,
    RunTests,
    Submit,
    Other,
}

impl ActionKind {
    pub const ALL: [ActionKind; 5] = [
        ActionKind::Read,
        ActionKind::Edit,
        ActionKind::RunTests,
        ActionKind::Submit,
        ActionKind::Other,
    ];

    pub fn ordinal(self) -> usize {
        match self {
            ActionKind::Read => 0,
            ActionKind::Edit => 1,
            ActionKind::RunTests => 2,
            ActionKind::Submit => 3,
            ActionKind::Other => 4,
        }
    }

    pub fn carries_test_report(self) -> bool {
        matches!(self, ActionKind::RunTests | ActionKind::Submit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestStatus {
    Pass,
    Fail,
}

/// Test id → outcome.
pub type TestReport = BTreeMap<String, TestStatus>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub action_text: String,
    pub action_kind: ActionKind,
    pub touched_paths: Vec<String>,
    pub observation_text: String,
    pub exec_success: bool,
    pub test_report: Option<TestReport>,
}

impl Step {
    /// Builds a step, classifying the action text.
    pub fn new(
        index: usize,
        action_text: impl Into<String>,
        observation_text: impl Into<String>,
        exec_success: bool,
        test_report: Option<TestReport>,
    ) -> Self {
        let action_text = action_text.into();
        let (action_kind, touched_paths) = classify_action(&action_text);
        Self {
            index,
            action_text,
            action_kind,
            touched_paths,
            observation_text: observation_text.into(),
            exec_success,
            test_report,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub steps: Vec<Step>,
    pub resolved: bool,
    pub token_cost_usd: f64,
}

impl Trajectory {
    /// Most recent test report in the trajectory.
    pub fn final_test_report(&self) -> Option<&TestReport> {
        self.steps.iter().rev().find_map(|s| s.test_report.as_ref())
    }
}

/// True when every fail-to-pass and pass-to-pass test of `task` passes in
/// `report`. Tests missing from the report count as not passing.
pub fn report_resolves(report: &TestReport, task: &Task) -> bool {
    task.fail_to_pass_tests
        .iter()
        .chain(task.pass_to_pass_tests.iter())
        .all(|t| report.get(t) == Some(&TestStatus::Pass))
}

// ---------------------------------------------------------------------------
// Action classification

const READ_VERBS: &[&str] = &[
    "cat", "less", "head", "tail", "grep", "find", "ls", "open", "read",
];
const EDIT_VERBS: &[&str] = &["patch", "apply_patch", "str_replace", "write_file", "edit"];
const TEST_VERBS: &[&str] = &["pytest", "tox", "unittest", "test"];
const INTERPRETERS: &[&str] = &["python", "python3", "bash", "sh", "node", "ruby"];
const HEREDOC_MARKERS: &[&str] = &["<<<", "<<"];

const SOURCE_SUFFIXES: &[&str] = &[
    ".py", ".pyi", ".rs", ".js", ".ts", ".tsx", ".jsx", ".java", ".kt", ".c", ".h", ".cc", ".cpp",
    ".hpp", ".go", ".rb", ".php", ".cs", ".swift", ".scala", ".sh", ".txt", ".md", ".rst", ".cfg",
    ".toml", ".ini", ".yaml", ".yml", ".json", ".xml", ".html", ".css",
];

/// Classifies an agent action and extracts the repo paths it references.
///
/// Rules are checked in order: `submit` → Submit; editing verbs, `sed -i`
/// or a unified diff body → Edit; test runners or an executed test path →
/// RunTests; read verbs → Read; anything else → Other.
pub fn classify_action(action_text: &str) -> (ActionKind, Vec<String>) {
    let tokens: Vec<&str> = action_text.split_whitespace().collect();
    let Some(&first) = tokens.first() else {
        return (ActionKind::Other, Vec::new());
    };

    let diff_paths = unified_diff_paths(action_text);
    let kind = if first == "submit" {
        ActionKind::Submit
    } else if is_edit(first, &tokens) || diff_paths.is_some() {
        ActionKind::Edit
    } else if is_test_run(first, &tokens) {
        ActionKind::RunTests
    } else if READ_VERBS.contains(&first) {
        ActionKind::Read
    } else {
        ActionKind::Other
    };

    if kind == ActionKind::Other {
        return (kind, Vec::new());
    }
    let paths = match diff_paths {
        Some(p) => p,
        None => extract_paths(&tokens),
    };
    (kind, paths)
}

fn is_edit(first: &str, tokens: &[&str]) -> bool {
    if EDIT_VERBS.contains(&first) {
        return true;
    }
    first == "sed"
        && tokens
            .iter()
            .any(|t| t.starts_with("-i") || *t == "--in-place")
}

fn is_test_run(first: &str, tokens: &[&str]) -> bool {
    if tokens.iter().any(|t| TEST_VERBS.contains(t)) {
        return true;
    }
    // An executed script whose path looks like a test file.
    let target = if INTERPRETERS.contains(&first) {
        tokens[1..].iter().find(|t| !t.starts_with('-')).copied()
    } else if first.starts_with("./") || first.contains('/') {
        Some(first)
    } else {
        None
    };
    target.is_some_and(|t| t.contains("test"))
}

/// Paths from `---`/`+++` headers when `text` carries a unified diff body.
fn unified_diff_paths(text: &str) -> Option<Vec<String>> {
    let mut has_old = false;
    let mut has_new = false;
    let mut has_hunk = false;
    let mut paths = Vec::new();
    for line in text.lines() {
        let header = if let Some(rest) = line.strip_prefix("--- ") {
            has_old = true;
            rest
        } else if let Some(rest) = line.strip_prefix("+++ ") {
            has_new = true;
            rest
        } else {
            if line.starts_with("@@ ") {
                has_hunk = true;
            }
            continue;
        };
        let raw = header.split_whitespace().next().unwrap_or("");
        if raw.is_empty() || raw == "/dev/null" {
            continue;
        }
        let raw = raw
            .strip_prefix("a/")
            .or_else(|| raw.strip_prefix("b/"))
            .unwrap_or(raw);
        if let Some(p) = normalize_path(raw) {
            push_unique(&mut paths, p);
        }
    }
    (has_old && has_new && has_hunk).then_some(paths)
}

fn extract_paths(tokens: &[&str]) -> Vec<String> {
    let mut paths = Vec::new();
    for tok in tokens.iter().skip(1) {
        if HEREDOC_MARKERS.contains(tok) {
            break;
        }
        if tok.starts_with('-') {
            continue;
        }
        let Some(cleaned) = clean_path_token(tok) else {
            continue;
        };
        if !looks_like_path(&cleaned) {
            continue;
        }
        if let Some(p) = normalize_path(&cleaned) {
            push_unique(&mut paths, p);
        }
    }
    paths
}

fn clean_path_token(tok: &str) -> Option<String> {
    let tok = tok.trim_matches(|c| c == '"' || c == '\'' || c == '`');
    let tok = tok.trim_end_matches([',', ';', ':', ')']);
    let tok = tok.trim_start_matches('(');
    let tok = match tok.find("::") {
        Some(i) => &tok[..i],
        None => tok,
    };
    (!tok.is_empty()).then(|| tok.to_string())
}

fn looks_like_path(tok: &str) -> bool {
    tok.contains('/')
        || SOURCE_SUFFIXES
            .iter()
            .any(|s| tok.ends_with(s) && tok.len() > s.len())
}

fn push_unique(paths: &mut Vec<String>, p: String) {
    if !paths.contains(&p) {
        paths.push(p);
    }
}

/// Normalizes a path to repo-relative form: no leading `/`, no `.` or `..`
/// segments, no empty segments. `None` when nothing remains.
pub fn normalize_path(path: &str) -> Option<String> {
    let mut parts: Vec<&str> = Vec::new();
    for seg in path.split('/') {
        match seg {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            s => parts.push(s),
        }
    }
    (!parts.is_empty()).then(|| parts.join("/"))
}

// ---------------------------------------------------------------------------
// Validation

/// A broken invariant, located at a step when applicable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub step_index: Option<usize>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step_index {
            Some(i) => write!(f, "step {i}: {:?}: {}", self.rule, self.detail),
            None => write!(f, "{:?}: {}", self.rule, self.detail),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    TaskMismatch,
    NonEmpty,
    Contiguity,
    TestReportOnNonTestAction,
    Termination,
    ResolvedConsistency,
    NegativeCost,
}

/// Checks trajectory and step invariants against `task` and the step budget.
/// An empty result means the trajectory is well-formed.
pub fn validate_trajectory(t: &Trajectory, task: &Task, budget: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |step_index, rule, detail: String| {
        out.push(Violation {
            step_index,
            rule,
            detail,
        })
    };

    if t.task_id != task.task_id {
        push(
            None,
            Rule::TaskMismatch,
            format!("trajectory task {:?} != task {:?}", t.task_id, task.task_id),
        );
    }
    if !(t.token_cost_usd >= 0.0 && t.token_cost_usd.is_finite()) {
        push(
            None,
            Rule::NegativeCost,
            format!("token cost {}", t.token_cost_usd),
        );
    }
    let Some(last) = t.steps.last() else {
        push(None, Rule::NonEmpty, "trajectory has no steps".to_string());
        return out;
    };

    for (pos, step) in t.steps.iter().enumerate() {
        let expected = if pos == 0 {
            0
        } else {
            t.steps[pos - 1].index + 1
        };
        if step.index != expected {
            push(
                Some(pos),
                Rule::Contiguity,
                format!("expected index {expected}, found {}", step.index),
            );
        }
        if step.test_report.is_some() && !step.action_kind.carries_test_report() {
            push(
                Some(step.index),
                Rule::TestReportOnNonTestAction,
                format!(
                    "test report on {:?} action {:?}",
                    step.action_kind, step.action_text
                ),
            );
        }
    }

    let n = t.steps.len();
    if n > budget {
        push(
            None,
            Rule::Termination,
            format!("{n} steps exceed the budget of {budget}"),
        );
    } else if last.action_kind != ActionKind::Submit && n != budget {
        push(
            Some(last.index),
            Rule::Termination,
            format!(
                "last step is {:?} and {n} steps is below the budget of {budget}",
                last.action_kind
            ),
        );
    }

    if t.resolved {
        let ok = t
            .final_test_report()
            .is_some_and(|r| report_resolves(r, task));
        if !ok {
            push(
                None,
                Rule::ResolvedConsistency,
                "resolved=true but the final test report does not pass every required test"
                    .to_string(),
            );
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Trajectory JSONL codec

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("trajectory is for task {found:?}, expected {expected:?}")]
    TaskMismatch { expected: String, found: String },
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error("invalid trajectory: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Header {
        task_id: String,
        resolved: bool,
        token_cost_usd: f64,
    },
    Step {
        index: usize,
        action: String,
        observation: String,
        exec_success: bool,
        test_report: Option<TestReport>,
    },
}

/// Parses a trajectory stream: one header line, then one line per step.
///
/// Steps are ordered by their recorded index and re-indexed from 0. Step
/// level invariants are enforced; termination and resolution rules are left
/// to [`validate_trajectory`], which needs the step budget.
pub fn parse_trajectory(raw: impl BufRead, task: &Task) -> Result<Trajectory, TrajectoryError> {
    let mut header: Option<(String, bool, f64)> = None;
    let mut steps: Vec<(usize, Step)> = Vec::new();

    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| TrajectoryError::MalformedRecord {
            line: lineno,
            reason,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        match record {
            Record::Header {
                task_id,
                resolved,
                token_cost_usd,
            } => {
                if header.is_some() {
                    return Err(malformed("duplicate header".into()));
                }
                if !steps.is_empty() {
                    return Err(malformed("header after step records".into()));
                }
                if task_id != task.task_id {
                    return Err(TrajectoryError::TaskMismatch {
                        expected: task.task_id.clone(),
                        found: task_id,
                    });
                }
                header = Some((task_id, resolved, token_cost_usd));
            }
            Record::Step {
                index,
                action,
                observation,
                exec_success,
                test_report,
            } => {
                if header.is_none() {
                    return Err(malformed("step record before header".into()));
                }
                if action.trim().is_empty() {
                    return Err(malformed("empty action".into()));
                }
                steps.push((
                    index,
                    Step::new(index, action, observation, exec_success, test_report),
                ));
            }
        }
    }

    let Some((task_id, resolved, token_cost_usd)) = header else {
        return Err(TrajectoryError::MalformedRecord {
            line: 1,
            reason: "missing header".into(),
        });
    };
    if steps.is_empty() {
        return Err(TrajectoryError::EmptyTrajectory);
    }
    steps.sort_by_key(|(index, _)| *index);
    let steps: Vec<Step> = steps
        .into_iter()
        .enumerate()
        .map(|(pos, (_, mut s))| {
            s.index = pos;
            s
        })
        .collect();

    let trajectory = Trajectory {
        task_id,
        steps,
        resolved,
        token_cost_usd,
    };
    let step_violations: Vec<Violation> = validate_trajectory(&trajectory, task, usize::MAX)
        .into_iter()
        .filter(|v| matches!(v.rule, Rule::TestReportOnNonTestAction | Rule::NegativeCost))
        .collect();
    if !step_violations.is_empty() {
        return Err(TrajectoryError::Invalid(step_violations));
    }
    Ok(trajectory)
}

/// Writes a trajectory in the JSONL format read by [`parse_trajectory`].
pub fn write_trajectory(mut writer: impl Write, t: &Trajectory) -> std::io::Result<()> {
    let header = Record::Header {
        task_id: t.task_id.clone(),
        resolved: t.resolved,
        token_cost_usd: t.token_cost_usd,
    };
    serde_json::to_writer(&mut writer, &header)?;
    writer.write_all(b"\n")?;
    for s in &t.steps {
        let rec = Record::Step {
            index: s.index,
            action: s.action_text.clone(),
            observation: s.observation_text.clone(),
            exec_success: s.exec_success,
            test_report: s.test_report.clone(),
        };
        serde_json::to_writer(&mut writer, &rec)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn task() -> Task {
        Task {
            task_id: "t1".into(),
            repo_ref: "org/repo".into(),
            base_commit: "abc123".into(),
            problem_statement: "read_io breaks on empty files".into(),
            fail_to_pass_tests: vec!["tests/test_io.py::test_read".into()],
            pass_to_pass_tests: vec!["tests/test_io.py::test_write".into()],
            relevant_files: ["src/utils/io.py".to_string()].into_iter().collect(),
            split: Split::Train,
        }
    }

    fn report(pairs: &[(&str, TestStatus)]) -> TestReport {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn classify_examples() {
        assert_eq!(
            classify_action("cat src/utils/io.py"),
            (ActionKind::Read, vec!["src/utils/io.py".to_string()])
        );
        assert_eq!(
            classify_action("pytest tests/test_io.py::test_read"),
            (ActionKind::RunTests, vec!["tests/test_io.py".to_string()])
        );
        assert_eq!(classify_action("echo done"), (ActionKind::Other, vec![]));
    }

    #[test]
    fn classify_rule_table() {
        assert_eq!(classify_action("submit").0, ActionKind::Submit);
        assert_eq!(classify_action("grep -rn foo src/").0, ActionKind::Read);
        assert_eq!(classify_action("ls").0, ActionKind::Read);
        assert_eq!(
            classify_action("sed -n 1,10p src/a.py").0,
            ActionKind::Other
        );
        assert_eq!(
            classify_action("sed -i s/a/b/ src/a.py").0,
            ActionKind::Edit
        );
        assert_eq!(
            classify_action("python -m pytest -x").0,
            ActionKind::RunTests
        );
        assert_eq!(
            classify_action("python tests/run_tests.py").0,
            ActionKind::RunTests
        );
        assert_eq!(
            classify_action("./scripts/test_all.sh").0,
            ActionKind::RunTests
        );
        assert_eq!(
            classify_action("python setup.py build").0,
            ActionKind::Other
        );
        assert_eq!(classify_action("tox -e py311").0, ActionKind::RunTests);
    }

    #[test]
    fn edit_wins_over_test_pattern() {
        let (kind, paths) = classify_action("sed -i 's/x/y/' tests/test_x.py");
        assert_eq!(kind, ActionKind::Edit);
        assert!(paths.contains(&"tests/test_x.py".to_string()));
    }

    #[test]
    fn diff_body_is_edit_with_header_paths() {
        let diff = "cat <<'EOF' | git apply\n--- a/src/utils/io.py\n+++ b/src/utils/io.py\n@@ -1,2 +1,2 @@\n-x = 1\n+x = 2\nEOF";
        assert_eq!(
            classify_action(diff),
            (ActionKind::Edit, vec!["src/utils/io.py".to_string()])
        );
    }

    #[test]
    fn sim_grammar() {
        assert_eq!(
            classify_action("edit src/a.py <<< def f():\n    return 1/2"),
            (ActionKind::Edit, vec!["src/a.py".to_string()])
        );
        assert_eq!(classify_action("read src/a.py").0, ActionKind::Read);
        assert_eq!(classify_action("test"), (ActionKind::RunTests, vec![]));
    }

    #[test]
    fn path_extraction_skips_flags_and_normalizes() {
        let (_, paths) = classify_action("head -n 20 ./src//pkg/../mod.py README.md");
        assert_eq!(
            paths,
            vec!["src/mod.py".to_string(), "README.md".to_string()]
        );
        let (_, paths) = classify_action("cat /testbed/src/a.py");
        assert_eq!(paths, vec!["testbed/src/a.py".to_string()]);
    }

    #[test]
    fn normalize_rules() {
        assert_eq!(normalize_path("/a/./b/../c").as_deref(), Some("a/c"));
        assert_eq!(normalize_path("../../x").as_deref(), Some("x"));
        assert_eq!(normalize_path("./"), None);
        assert_eq!(normalize_path("src/io.py").as_deref(), Some("src/io.py"));
    }

    fn line_header(resolved: bool) -> String {
        format!(r#"{{"kind":"header","task_id":"t1","resolved":{resolved},"token_cost_usd":0.01}}"#)
    }

    #[test]
    fn parse_three_steps() {
        let raw = [
            line_header(false),
            r#"{"kind":"step","index":0,"action":"cat src/utils/io.py","observation":"x","exec_success":true,"test_report":null}"#.into(),
            r#"{"kind":"step","index":1,"action":"edit src/utils/io.py <<< y","observation":"ok","exec_success":true,"test_report":null}"#.into(),
            r#"{"kind":"step","index":2,"action":"submit","observation":"done","exec_success":true,"test_report":{"tests/test_io.py::test_read":"pass"}}"#.into(),
        ]
        .join("\n");
        let t = parse_trajectory(raw.as_bytes(), &task()).unwrap();
        assert_eq!(t.steps.len(), 3);
        assert_eq!(
            t.steps.iter().map(|s| s.index).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert_eq!(t.steps[0].action_kind, ActionKind::Read);
        assert_eq!(
            t.steps[0].touched_paths,
            vec!["src/utils/io.py".to_string()]
        );
        assert_eq!(t.steps[2].action_kind, ActionKind::Submit);
    }

    #[test]
    fn parse_reports_malformed_line() {
        let raw = format!("{}\n{{not json\n", line_header(false));
        match parse_trajectory(raw.as_bytes(), &task()) {
            Err(TrajectoryError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_test_report_on_read() {
        let raw = format!(
            "{}\n{}",
            line_header(false),
            r#"{"kind":"step","index":0,"action":"cat foo.py","observation":"","exec_success":true,"test_report":{"a":"pass"}}"#
        );
        match parse_trajectory(raw.as_bytes(), &task()) {
            Err(TrajectoryError::Invalid(v)) => {
                assert_eq!(v.len(), 1);
                assert_eq!(v[0].rule, Rule::TestReportOnNonTestAction);
                assert_eq!(v[0].step_index, Some(0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_task_mismatch_and_empty() {
        let raw = r#"{"kind":"header","task_id":"other","resolved":false,"token_cost_usd":0}"#;
        assert!(matches!(
            parse_trajectory(raw.as_bytes(), &task()),
            Err(TrajectoryError::TaskMismatch { .. })
        ));
        let raw = line_header(false);
        assert!(matches!(
            parse_trajectory(raw.as_bytes(), &task()),
            Err(TrajectoryError::EmptyTrajectory)
        ));
    }

    fn submit_traj(status: TestStatus, resolved: bool) -> Trajectory {
        Trajectory {
            task_id: "t1".into(),
            steps: vec![
                Step::new(0, "cat src/utils/io.py", "", true, None),
                Step::new(
                    1,
                    "submit",
                    "",
                    true,
                    Some(report(&[
                        ("tests/test_io.py::test_read", status),
                        ("tests/test_io.py::test_write", TestStatus::Pass),
                    ])),
                ),
            ],
            resolved,
            token_cost_usd: 0.0,
        }
    }

    #[test]
    fn validate_well_formed() {
        assert!(validate_trajectory(&submit_traj(TestStatus::Pass, true), &task(), 30).is_empty());
    }

    #[test]
    fn validate_resolved_consistency() {
        let v = validate_trajectory(&submit_traj(TestStatus::Fail, true), &task(), 30);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::ResolvedConsistency);
    }

    #[test]
    fn validate_contiguity() {
        let mut t = submit_traj(TestStatus::Pass, true);
        t.steps.insert(1, Step::new(2, "ls", "", true, None));
        t.steps[2].index = 3;
        let v = validate_trajectory(&t, &task(), 30);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].rule, Rule::Contiguity);
        assert_eq!(v[0].step_index, Some(1));
    }

    #[test]
    fn validate_termination() {
        let mut t = submit_traj(TestStatus::Pass, false);
        t.steps.pop();
        let v = validate_trajectory(&t, &task(), 30);
        assert_eq!(
            v.iter().map(|v| v.rule).collect::<Vec<_>>(),
            vec![Rule::Termination]
        );
        assert!(validate_trajectory(&t, &task(), 1).is_empty());
    }

    #[test]
    fn task_file_checks() {
        let mut t = task();
        let line = serde_json::to_string(&t).unwrap();
        assert!(line.contains("\"fail_to_pass\""));
        assert!(line.contains("\"split\":\"train\""));
        let idx = read_tasks(format!("{line}\n{line}\n").as_bytes());
        assert!(matches!(idx, Err(TaskFileError::DuplicateTask(_))));
        t.fail_to_pass_tests.clear();
        assert!(!t.violations().is_empty());
        let mut t = task();
        t.relevant_files.insert("/abs/x.py".into());
        assert!(!t.violations().is_empty());
    }
}
