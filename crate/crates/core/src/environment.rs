//! Environments that execute agent actions against a task workspace.
//!
//! [`SimEnvironment`] is an in-memory deterministic state machine over a
//! generated file tree with a four-verb grammar:
//!
//! ```text
//! read <path>
//! edit <path> <<< <content>
//! test
//! submit
//! ```
//!
//! [`ShellEnvironment`] runs actions through `sh -c` inside a copy of a
//! snapshot directory. It trusts its inputs: there is no container or
//! network isolation, only a lexical check that refuses paths escaping the
//! workspace.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::dataset::TRUNCATION_MARKER;
use crate::model::{
    classify_action, normalize_path, report_resolves, ActionKind, Split, Step, Task, TestReport,
    TestStatus, DEFAULT_STEP_BUDGET,
};

pub const BUG_MARKER: &str = "BUG_MARKER";
pub const FIX_MARKER: &str = "FIX_MARKER";
pub const SIM_BUG_TEST: &str = "sim::bug_fixed";
pub const SIM_TREE_TEST: &str = "sim::tree_intact";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub budget: usize,
    pub action_timeout_s: u64,
    pub obs_cap_bytes: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_STEP_BUDGET,
            action_timeout_s: 60,
            obs_cap_bytes: 65_536,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Submitted,
    StepBudgetExhausted,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub task_id: String,
    pub workspace_root: PathBuf,
    pub steps_taken: usize,
    pub budget: usize,
    pub last_test_report: Option<TestReport>,
    pub terminated: bool,
    pub termination_reason: TerminationReason,
}

impl EnvState {
    fn fresh(task_id: &str, workspace_root: PathBuf, budget: usize) -> Self {
        Self {
            task_id: task_id.to_string(),
            workspace_root,
            steps_taken: 0,
            budget,
            last_test_report: None,
            terminated: false,
            termination_reason: TerminationReason::None,
        }
    }

    /// Bookkeeping after one executed action.
    fn advance(&mut self, kind: ActionKind, report: Option<&TestReport>) {
        self.steps_taken += 1;
        if let Some(r) = report {
            self.last_test_report = Some(r.clone());
        }
        if kind == ActionKind::Submit {
            self.terminated = true;
            self.termination_reason = TerminationReason::Submitted;
        } else if self.steps_taken >= self.budget {
            self.terminated = true;
            self.termination_reason = TerminationReason::StepBudgetExhausted;
        }
    }

    fn check_open(&self) -> Result<(), EnvError> {
        if self.terminated || self.steps_taken >= self.budget {
            return Err(EnvError::EnvironmentTerminated(self.termination_reason));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("workspace setup failed: {0}")]
    WorkspaceSetupFailed(String),
    #[error("environment already terminated ({0:?})")]
    EnvironmentTerminated(TerminationReason),
    #[error("environment was not reset")]
    NotReset,
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Contract shared by all environments. One instance serves one episode at a
/// time.
pub trait Environment: Send {
    fn reset(&mut self, task: &Task) -> Result<EnvState, EnvError>;

    /// Executes one action. Timeouts and failing commands are reported in the
    /// step (`exec_success = false`), not as errors.
    fn exec_step(&mut self, action_text: &str) -> Result<(Step, EnvState), EnvError>;

    fn state(&self) -> Option<&EnvState>;

    /// Content hash of the current workspace.
    fn workspace_hash(&self) -> String;
}

/// True iff the last test report passes every fail-to-pass and pass-to-pass
/// test of `task`.
pub fn is_resolved(state: &EnvState, task: &Task) -> bool {
    state
        .last_test_report
        .as_ref()
        .is_some_and(|r| report_resolves(r, task))
}

/// Caps an observation at `cap` bytes in total, marker included.
pub fn cap_observation(text: &str, cap: usize) -> String {
    if text.len() <= cap {
        return text.to_string();
    }
    let (keep, marker) = if cap >= TRUNCATION_MARKER.len() {
        (cap - TRUNCATION_MARKER.len(), TRUNCATION_MARKER)
    } else {
        (cap, "")
    };
    let mut end = keep;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}{marker}", &text[..end])
}

// ---------------------------------------------------------------------------
// Simulated tasks

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTask {
    pub seed: u64,
    pub file_tree: BTreeMap<String, String>,
    pub bug_path: String,
    pub fix_content: String,
    pub decoy_paths: Vec<String>,
}

impl SimTask {
    pub fn validate(&self) -> Result<(), String> {
        let with_bug: Vec<&String> = self
            .file_tree
            .iter()
            .filter(|(_, c)| c.contains(BUG_MARKER))
            .map(|(p, _)| p)
            .collect();
        if with_bug != [&self.bug_path] {
            return Err(format!(
                "exactly one file must contain {BUG_MARKER}, found {with_bug:?}"
            ));
        }
        if !self.fix_content.contains(FIX_MARKER) || self.fix_content.contains(BUG_MARKER) {
            return Err("fix content must contain FIX_MARKER and not BUG_MARKER".into());
        }
        if let Some(d) = self
            .decoy_paths
            .iter()
            .find(|d| !self.file_tree.contains_key(*d) || **d == self.bug_path)
        {
            return Err(format!("decoy {d:?} is not a non-bug file of the tree"));
        }
        Ok(())
    }

    /// The sim test report for a given file tree.
    pub fn run_tests(&self, tree: &BTreeMap<String, String>) -> TestReport {
        let bug = tree.get(&self.bug_path).map(String::as_str).unwrap_or("");
        let fixed = bug.contains(FIX_MARKER) && !bug.contains(BUG_MARKER);
        let intact = tree.len() == self.file_tree.len()
            && self
                .file_tree
                .iter()
                .filter(|(p, _)| **p != self.bug_path)
                .all(|(p, c)| tree.get(p) == Some(c));
        let status = |ok: bool| {
            if ok {
                TestStatus::Pass
            } else {
                TestStatus::Fail
            }
        };
        [
            (SIM_BUG_TEST.to_string(), status(fixed)),
            (SIM_TREE_TEST.to_string(), status(intact)),
        ]
        .into_iter()
        .collect()
    }
}

const PACKAGES: &[&str] = &["core", "io", "net", "util", "parse", "cache", "auth", "cli"];
const MODULES: &[&str] = &[
    "reader", "writer", "config", "session", "buffer", "codec", "index", "router", "schema",
    "store", "token", "worker",
];
const FUNCS: &[&str] = &[
    "merge",
    "resolve",
    "normalize",
    "compute",
    "flush",
    "decode",
    "render",
    "lookup",
];
const OPS: &[(&str, &str)] = &[("+", "-"), ("*", "+"), ("-", "+"), ("//", "*")];

fn module_source(func: &str, op: &str, marker: Option<&str>) -> String {
    let tail = marker.map(|m| format!("  # {m}")).unwrap_or_default();
    format!(
        "\"\"\"{func} helpers.\"\"\"\n\n\ndef {func}(a, b):\n    return a {op} b{tail}\n\n\ndef {func}_all(items):\n    out = items[0]\n    for x in items[1:]:\n        out = {func}(out, x)\n    return out\n"
    )
}

/// Deterministically generates a sim task with `n_files` files, one of which
/// carries the bug, and up to `n_decoys` decoy files.
pub fn generate_sim_task(seed: u64, n_files: usize, n_decoys: usize) -> (Task, SimTask) {
    let n_files = n_files.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut paths: Vec<String> = Vec::new();
    while paths.len() < n_files {
        let pkg = PACKAGES.choose(&mut rng).expect("non-empty");
        let module = MODULES.choose(&mut rng).expect("non-empty");
        let path = if paths.len() < PACKAGES.len() * MODULES.len() {
            format!("src/{pkg}/{module}.py")
        } else {
            format!("src/{pkg}/{module}_{}.py", paths.len())
        };
        if !paths.contains(&path) {
            paths.push(path);
        }
    }

    let mut file_tree = BTreeMap::new();
    let mut funcs = Vec::new();
    for p in &paths {
        let func = *FUNCS.choose(&mut rng).expect("non-empty");
        let (good, _) = OPS[rng.random_range(0..OPS.len())];
        file_tree.insert(p.clone(), module_source(func, good, None));
        funcs.push(func);
    }

    let bug_idx = rng.random_range(0..paths.len());
    let bug_path = paths[bug_idx].clone();
    let (good, bad) = OPS[rng.random_range(0..OPS.len())];
    let func = funcs[bug_idx];
    file_tree.insert(bug_path.clone(), module_source(func, bad, Some(BUG_MARKER)));
    let fix_content = module_source(func, good, Some(FIX_MARKER));

    let mut others: Vec<String> = paths.iter().filter(|p| **p != bug_path).cloned().collect();
    others.shuffle(&mut rng);
    let mut decoy_paths: Vec<String> = others.into_iter().take(n_decoys).collect();
    decoy_paths.sort();

    let digest = Sha256::digest(serde_json::to_vec(&file_tree).expect("tree serializes"));
    let task = Task {
        task_id: format!("sim-{seed:05}"),
        repo_ref: format!("sim/repo-{seed}"),
        base_commit: hex::encode(&digest[..20]),
        problem_statement: format!(
            "`{func}` in {bug_path} returns the wrong value: {func}(a, b) should compute `a {good} b`. \
             The check {SIM_BUG_TEST} fails on the current code."
        ),
        fail_to_pass_tests: vec![SIM_BUG_TEST.to_string()],
        pass_to_pass_tests: vec![SIM_TREE_TEST.to_string()],
        relevant_files: [bug_path.clone()].into_iter().collect(),
        split: Split::Train,
    };
    let sim = SimTask {
        seed,
        file_tree,
        bug_path,
        fix_content,
        decoy_paths,
    };
    (task, sim)
}

pub const SIM_DEFAULT_FILES: usize = 6;
pub const SIM_DEFAULT_DECOYS: usize = 2;

/// Sim tasks for every seed, with the default tree shape, keyed by task id.
pub fn generate_sim_suite(
    seeds: impl IntoIterator<Item = u64>,
) -> (Vec<Task>, BTreeMap<String, SimTask>) {
    let mut tasks = Vec::new();
    let mut sims = BTreeMap::new();
    for seed in seeds {
        let (task, sim) = generate_sim_task(seed, SIM_DEFAULT_FILES, SIM_DEFAULT_DECOYS);
        sims.insert(task.task_id.clone(), sim);
        tasks.push(task);
    }
    (tasks, sims)
}

/// Action sequence that resolves a sim task: read the bug file, write the
/// fix, submit.
pub fn sim_oracle_plan(sim: &SimTask) -> Vec<String> {
    vec![
        format!("read {}", sim.bug_path),
        format!("edit {} <<< {}", sim.bug_path, sim.fix_content),
        "submit".to_string(),
    ]
}

fn hash_tree(tree: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (p, c) in tree {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
        h.update((c.len() as u64).to_le_bytes());
        h.update(c.as_bytes());
    }
    hex::encode(h.finalize())
}

fn render_report(report: &TestReport) -> String {
    report
        .iter()
        .map(|(t, s)| match s {
            TestStatus::Pass => format!("PASSED {t}"),
            TestStatus::Fail => format!("FAILED {t}"),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Deterministic in-memory environment for one [`SimTask`].
#[derive(Debug, Clone)]
pub struct SimEnvironment {
    sim: SimTask,
    config: EnvConfig,
    tree: BTreeMap<String, String>,
    state: Option<EnvState>,
}

impl SimEnvironment {
    pub fn new(sim: SimTask, config: EnvConfig) -> Self {
        let tree = sim.file_tree.clone();
        Self {
            sim,
            config,
            tree,
            state: None,
        }
    }

    pub fn sim_task(&self) -> &SimTask {
        &self.sim
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.tree
    }

    fn run(&mut self, action: &str) -> (String, bool, Option<TestReport>) {
        let trimmed = action.trim_start();
        let (verb, rest) = match trimmed.split_once(char::is_whitespace) {
            Some((v, r)) => (v, r.trim_start()),
            None => (trimmed.trim_end(), ""),
        };
        match verb {
            "read" => {
                let path = normalize_path(rest.trim()).unwrap_or_default();
                match self.tree.get(&path) {
                    Some(content) if rest.split_whitespace().count() == 1 => {
                        (content.clone(), true, None)
                    }
                    _ => (format!("error: no such file: {}", rest.trim()), false, None),
                }
            }
            "edit" => {
                let Some((path, content)) = parse_sim_edit(rest) else {
                    return (
                        "error: usage: edit <path> <<< <content>".into(),
                        false,
                        None,
                    );
                };
                match self.tree.get_mut(&path) {
                    Some(slot) => {
                        *slot = content.to_string();
                        (
                            format!("edited {path} ({} bytes)", content.len()),
                            true,
                            None,
                        )
                    }
                    None => (format!("error: no such file: {path}"), false, None),
                }
            }
            "test" if rest.is_empty() => {
                let report = self.sim.run_tests(&self.tree);
                let ok = report.values().all(|s| *s == TestStatus::Pass);
                (render_report(&report), ok, Some(report))
            }
            "submit" if rest.is_empty() => {
                let report = self.sim.run_tests(&self.tree);
                (
                    format!("submitted\n{}", render_report(&report)),
                    true,
                    Some(report),
                )
            }
            _ => (format!("error: unknown command: {verb}"), false, None),
        }
    }
}

fn parse_sim_edit(rest: &str) -> Option<(String, &str)> {
    let (path, after) = rest.split_once(char::is_whitespace)?;
    let after = after.trim_start().strip_prefix("<<<")?;
    let content = after
        .strip_prefix(' ')
        .or_else(|| after.strip_prefix('\n'))
        .unwrap_or(after);
    Some((normalize_path(path)?, content))
}

impl Environment for SimEnvironment {
    fn reset(&mut self, task: &Task) -> Result<EnvState, EnvError> {
        if !task.relevant_files.contains(&self.sim.bug_path) {
            return Err(EnvError::WorkspaceSetupFailed(format!(
                "sim task with bug file {} does not belong to task {}",
                self.sim.bug_path, task.task_id
            )));
        }
        self.sim
            .validate()
            .map_err(EnvError::WorkspaceSetupFailed)?;
        self.tree = self.sim.file_tree.clone();
        let state = EnvState::fresh(
            &task.task_id,
            PathBuf::from(format!("sim://{}", task.task_id)),
            self.config.budget,
        );
        self.state = Some(state.clone());
        Ok(state)
    }

    fn exec_step(&mut self, action_text: &str) -> Result<(Step, EnvState), EnvError> {
        self.state
            .as_ref()
            .ok_or(EnvError::NotReset)?
            .check_open()?;
        let (observation, ok, report) = self.run(action_text);
        let state = self.state.as_mut().ok_or(EnvError::NotReset)?;
        let mut step = Step::new(
            state.steps_taken,
            action_text,
            cap_observation(&observation, self.config.obs_cap_bytes),
            ok,
            None,
        );
        if step.action_kind.carries_test_report() {
            step.test_report = report;
        }
        state.advance(step.action_kind, step.test_report.as_ref());
        Ok((step, state.clone()))
    }

    fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    fn workspace_hash(&self) -> String {
        hash_tree(&self.tree)
    }
}

// ---------------------------------------------------------------------------
// Shell environment

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShellEnvConfig {
    pub env: EnvConfig,
    /// Parent directory for per-task workspaces.
    pub work_root: PathBuf,
    /// Command that runs one test id, which is appended as the last argument.
    pub test_command: String,
}

impl ShellEnvConfig {
    pub fn new(work_root: impl Into<PathBuf>) -> Self {
        Self {
            env: EnvConfig::default(),
            work_root: work_root.into(),
            test_command: "python -m pytest -q".into(),
        }
    }
}

/// Runs actions with `sh -c` in a fresh copy of `snapshot`.
#[derive(Debug)]
pub struct ShellEnvironment {
    snapshot: PathBuf,
    config: ShellEnvConfig,
    task: Option<Task>,
    state: Option<EnvState>,
}

struct CommandOutput {
    text: String,
    success: bool,
    timed_out: bool,
}

impl ShellEnvironment {
    pub fn new(snapshot: impl Into<PathBuf>, config: ShellEnvConfig) -> Self {
        Self {
            snapshot: snapshot.into(),
            config,
            task: None,
            state: None,
        }
    }

    fn workspace(&self) -> Option<&Path> {
        self.state.as_ref().map(|s| s.workspace_root.as_path())
    }

    fn run_command(&self, script: &str, cwd: &Path) -> std::io::Result<CommandOutput> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(script)
            .current_dir(cwd)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        let cap = self.config.env.obs_cap_bytes;
        let readers: Vec<_> = [
            child
                .stdout
                .take()
                .map(|s| Box::new(s) as Box<dyn Read + Send>),
            child
                .stderr
                .take()
                .map(|s| Box::new(s) as Box<dyn Read + Send>),
        ]
        .into_iter()
        .flatten()
        .map(|mut pipe| {
            std::thread::spawn(move || {
                let mut kept = Vec::new();
                let mut buf = [0u8; 8192];
                while let Ok(n) = pipe.read(&mut buf) {
                    if n == 0 {
                        break;
                    }
                    let room = (cap + 1).saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
                kept
            })
        })
        .collect();

        let timeout = Duration::from_secs(self.config.env.action_timeout_s);
        let (success, timed_out) = match child.wait_timeout(timeout)? {
            Some(status) => (status.success(), false),
            None => {
                let _ = child.kill();
                let _ = child.wait();
                (false, true)
            }
        };
        let mut text = String::new();
        for r in readers {
            let bytes = r.join().unwrap_or_default();
            text.push_str(&String::from_utf8_lossy(&bytes));
        }
        if timed_out {
            text.push_str(&format!(
                "\nerror: action timed out after {}s",
                self.config.env.action_timeout_s
            ));
        }
        Ok(CommandOutput {
            text,
            success,
            timed_out,
        })
    }

    fn run_declared_tests(&self, task: &Task, cwd: &Path) -> std::io::Result<(TestReport, String)> {
        let mut report = TestReport::new();
        let mut lines = Vec::new();
        for test in task
            .fail_to_pass_tests
            .iter()
            .chain(&task.pass_to_pass_tests)
        {
            let out = self.run_command(
                &format!("{} {}", self.config.test_command, shell_quote(test)),
                cwd,
            )?;
            let status = if out.success {
                TestStatus::Pass
            } else {
                TestStatus::Fail
            };
            lines.push(match status {
                TestStatus::Pass => format!("PASSED {test}"),
                TestStatus::Fail => format!("FAILED {test}"),
            });
            report.insert(test.clone(), status);
        }
        Ok((report, lines.join("\n")))
    }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Test outcomes for declared test ids mentioned on PASSED/FAILED lines.
fn parse_test_output(output: &str, task: &Task) -> Option<TestReport> {
    let mut report = TestReport::new();
    for line in output.lines() {
        for test in task
            .fail_to_pass_tests
            .iter()
            .chain(&task.pass_to_pass_tests)
        {
            if !line.contains(test.as_str()) {
                continue;
            }
            if line.contains("PASSED") {
                report.insert(test.clone(), TestStatus::Pass);
            } else if line.contains("FAILED") || line.contains("ERROR") {
                report.insert(test.clone(), TestStatus::Fail);
            }
        }
    }
    (!report.is_empty()).then_some(report)
}

/// `2>out`, `>>out`, `<in`, `&>out` → the path part.
fn strip_redirect(tok: &str) -> &str {
    let b = tok.as_bytes();
    let tok = if b.len() > 1 && b[0].is_ascii_digit() && matches!(b[1], b'>' | b'<') {
        &tok[1..]
    } else {
        tok
    };
    tok.trim_start_matches(['>', '<', '&'])
}

/// True if some path-like token of `action` points outside `root`.
pub fn escapes_workspace(action: &str, root: &Path) -> bool {
    action.split_whitespace().any(|tok| {
        let tok = strip_redirect(tok.trim_matches(|c| c == '"' || c == '\''));
        if tok.starts_with('~') {
            return true;
        }
        if !(tok.contains('/') || tok == "..") {
            return false;
        }
        let p = Path::new(tok);
        if p.is_absolute() {
            return !p.starts_with(root);
        }
        let mut depth: i64 = 0;
        for c in p.components() {
            match c {
                Component::ParentDir => depth -= 1,
                Component::Normal(_) => depth += 1,
                _ => {}
            }
            if depth < 0 {
                return true;
            }
        }
        false
    })
}

fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    for entry in walkdir::WalkDir::new(from).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry
            .path()
            .strip_prefix(from)
            .map_err(std::io::Error::other)?;
        let dest = to.join(rel);
        if entry.file_type().is_dir() {
            std::fs::create_dir_all(&dest)?;
        } else if entry.file_type().is_file() {
            std::fs::copy(entry.path(), &dest)?;
        }
    }
    Ok(())
}

impl Environment for ShellEnvironment {
    fn reset(&mut self, task: &Task) -> Result<EnvState, EnvError> {
        let setup = |e: std::io::Error| EnvError::WorkspaceSetupFailed(e.to_string());
        let safe_id: String = task
            .task_id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        let ws = self.config.work_root.join(safe_id);
        if ws.exists() {
            std::fs::remove_dir_all(&ws).map_err(setup)?;
        }
        std::fs::create_dir_all(&ws).map_err(setup)?;
        if !self.snapshot.is_dir() {
            return Err(EnvError::WorkspaceSetupFailed(format!(
                "snapshot {} is not a directory",
                self.snapshot.display()
            )));
        }
        copy_tree(&self.snapshot, &ws).map_err(setup)?;
        let ws = ws.canonicalize().map_err(setup)?;
        let state = EnvState::fresh(&task.task_id, ws, self.config.env.budget);
        self.task = Some(task.clone());
        self.state = Some(state.clone());
        Ok(state)
    }

    fn exec_step(&mut self, action_text: &str) -> Result<(Step, EnvState), EnvError> {
        self.state
            .as_ref()
            .ok_or(EnvError::NotReset)?
            .check_open()?;
        let task = self.task.clone().ok_or(EnvError::NotReset)?;
        let root = self.workspace().ok_or(EnvError::NotReset)?.to_path_buf();
        let (kind, _) = classify_action(action_text);

        let (observation, ok, report) = if kind == ActionKind::Submit {
            let (report, text) = self.run_declared_tests(&task, &root)?;
            (format!("submitted\n{text}"), true, Some(report))
        } else if escapes_workspace(action_text, &root) {
            ("error: path escapes the workspace".to_string(), false, None)
        } else {
            let out = self.run_command(action_text, &root)?;
            let report = if kind == ActionKind::RunTests {
                parse_test_output(&out.text, &task)
            } else {
                None
            };
            (out.text, out.success && !out.timed_out, report)
        };

        let state = self.state.as_mut().ok_or(EnvError::NotReset)?;
        let step = Step::new(
            state.steps_taken,
            action_text,
            cap_observation(&observation, self.config.env.obs_cap_bytes),
            ok,
            report,
        );
        state.advance(step.action_kind, step.test_report.as_ref());
        Ok((step, state.clone()))
    }

    fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    fn workspace_hash(&self) -> String {
        let mut tree = BTreeMap::new();
        if let Some(root) = self.workspace() {
            for entry in walkdir::WalkDir::new(root)
                .sort_by_file_name()
                .into_iter()
                .flatten()
            {
                if entry.file_type().is_file() {
                    let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
                    let content = std::fs::read(entry.path()).unwrap_or_default();
                    tree.insert(
                        rel.to_string_lossy().into_owned(),
                        hex::encode(Sha256::digest(content)),
                    );
                }
            }
        }
        hash_tree(&tree)
    }
}
