//! Candidate-action policies.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{render_context, ContextConfig};
use crate::environment::{sim_oracle_plan, SimTask};
use crate::model::{Step, Task};
use crate::reward::normalize_action;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy unavailable after {attempts} attempts: {last_error}")]
    PolicyUnavailable { attempts: usize, last_error: String },
    #[error("completion contained no action block")]
    EmptyCompletion,
    #[error("script has no entry for step {0}")]
    ScriptExhausted(usize),
    #[error("k must be >= 1")]
    InvalidK,
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    pub task: &'a Task,
    /// Every step of the episode so far.
    pub history: &'a [Step],
    pub step_index: usize,
    pub budget: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u64,
    pub completion: u64,
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt += rhs.prompt;
        self.completion += rhs.completion;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub actions: Vec<String>,
    pub generation_cost_usd: f64,
    pub token_usage: TokenUsage,
    /// `true` where the action repeats an earlier candidate.
    pub duplicate_flags: Vec<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl CandidateSet {
    /// Zero-cost candidate set, padded with its last entry (or truncated) to
    /// exactly `k` actions.
    pub fn free(mut actions: Vec<String>, k: usize) -> Self {
        pad_to(&mut actions, k);
        Self {
            duplicate_flags: duplicate_flags(&actions),
            actions,
            generation_cost_usd: 0.0,
            token_usage: TokenUsage::default(),
            warnings: Vec::new(),
        }
    }
}

fn pad_to(actions: &mut Vec<String>, k: usize) {
    actions.truncate(k);
    if let Some(last) = actions.last().cloned() {
        actions.resize(k, last);
    }
}

fn duplicate_flags(actions: &[String]) -> Vec<bool> {
    actions
        .iter()
        .enumerate()
        .map(|(i, a)| actions[..i].contains(a))
        .collect()
}

/// Proposes `k` candidate actions for the next step.
pub trait Policy: Send + Sync {
    fn propose(&self, ctx: &PolicyContext<'_>, k: usize) -> Result<CandidateSet, PolicyError>;
}

// ---------------------------------------------------------------------------
// Completion parsing

const ACTION_FENCE_TAGS: &[&str] = &["action", "bash", "sh", "shell", ""];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCompletion {
    pub action: String,
    pub warnings: Vec<String>,
}

/// Extracts the first fenced action block of an LLM completion.
pub fn parse_completion(raw: &str) -> Result<ParsedCompletion, PolicyError> {
    let text = raw.replace("\r\n", "\n");
    let mut blocks = Vec::new();
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        let Some(tag) = line.trim_start().strip_prefix("```") else {
            continue;
        };
        let tag = tag.trim();
        let mut body = Vec::new();
        let mut closed = false;
        for inner in lines.by_ref() {
            if inner.trim_start().starts_with("```") {
                closed = true;
                break;
            }
            body.push(inner);
        }
        if closed && ACTION_FENCE_TAGS.contains(&tag) {
            blocks.push(
                body.iter()
                    .map(|l| l.trim_end())
                    .collect::<Vec<_>>()
                    .join("\n"),
            );
        }
    }
    let mut warnings = Vec::new();
    if blocks.len() > 1 {
        warnings.push(format!(
            "{} action blocks found, using the first",
            blocks.len()
        ));
    }
    let action = blocks
        .into_iter()
        .next()
        .map(|b| b.trim_matches('\n').trim().to_string())
        .filter(|b| !b.is_empty())
        .ok_or(PolicyError::EmptyCompletion)?;
    Ok(ParsedCompletion { action, warnings })
}

// ---------------------------------------------------------------------------
// Scripted policies

/// Replays a fixed step → candidates table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub script: BTreeMap<usize, Vec<String>>,
}

impl ScriptedPolicy {
    pub fn new(script: BTreeMap<usize, Vec<String>>) -> Self {
        Self { script }
    }

    /// One candidate list per step, in order.
    pub fn from_steps<I, S>(steps: I) -> Self
    where
        I: IntoIterator<Item = Vec<S>>,
        S: Into<String>,
    {
        Self {
            script: steps
                .into_iter()
                .enumerate()
                .map(|(i, v)| (i, v.into_iter().map(Into::into).collect()))
                .collect(),
        }
    }
}

impl Policy for ScriptedPolicy {
    fn propose(&self, ctx: &PolicyContext<'_>, k: usize) -> Result<CandidateSet, PolicyError> {
        if k == 0 {
            return Err(PolicyError::InvalidK);
        }
        let actions = self
            .script
            .get(&ctx.step_index)
            .filter(|v| !v.is_empty())
            .ok_or(PolicyError::ScriptExhausted(ctx.step_index))?;
        Ok(CandidateSet::free(actions.clone(), k))
    }
}

/// Oracle agent for sim tasks. The next oracle action follows the plan
/// `read bug → edit fix → submit`, skipping plan actions the history already
/// executed successfully. With distractors enabled, `max(1, k-1)` distractor
/// actions join the oracle, the pool is shuffled and cut to `k`. Distractors
/// waste a step (a decoy read or a no-op) but never damage the tree.
#[derive(Debug, Clone)]
pub struct SimOraclePolicy {
    sims: BTreeMap<String, SimTask>,
    seed: u64,
    distractors: bool,
}

impl SimOraclePolicy {
    /// Oracle-only: every candidate is the next oracle action.
    pub fn oracle(sims: BTreeMap<String, SimTask>) -> Self {
        Self {
            sims,
            seed: 0,
            distractors: false,
        }
    }

    pub fn with_distractors(sims: BTreeMap<String, SimTask>, seed: u64) -> Self {
        Self {
            sims,
            seed,
            distractors: true,
        }
    }

    pub fn next_oracle_action(sim: &SimTask, history: &[Step]) -> String {
        let plan = sim_oracle_plan(sim);
        let mut done = 0;
        for step in history {
            if done < plan.len()
                && step.exec_success
                && normalize_action(&step.action_text) == normalize_action(&plan[done])
            {
                done += 1;
            }
        }
        plan[done.min(plan.len() - 1)].clone()
    }

    fn distractor_pool(sim: &SimTask, oracle: &str) -> Vec<String> {
        let mut pool = vec!["echo checking progress".to_string()];
        pool.extend(sim.decoy_paths.iter().map(|d| format!("read {d}")));
        pool.retain(|a| a != oracle);
        pool
    }

    fn rng_for(&self, task_id: &str, step_index: usize) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(task_id.as_bytes());
        h.update((step_index as u64).to_le_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

impl Policy for SimOraclePolicy {
    fn propose(&self, ctx: &PolicyContext<'_>, k: usize) -> Result<CandidateSet, PolicyError> {
        if k == 0 {
            return Err(PolicyError::InvalidK);
        }
        let sim = self
            .sims
            .get(&ctx.task.task_id)
            .ok_or_else(|| PolicyError::UnknownTask(ctx.task.task_id.clone()))?;
        let oracle = Self::next_oracle_action(sim, ctx.history);
        if !self.distractors {
            return Ok(CandidateSet::free(vec![oracle], k));
        }
        let mut rng = self.rng_for(&ctx.task.task_id, ctx.step_index);
        let pool = Self::distractor_pool(sim, &oracle);
        let mut actions = vec![oracle];
        for _ in 0..k.saturating_sub(1).max(1) {
            if let Some(d) = pool.choose(&mut rng) {
                actions.push(d.clone());
            }
        }
        actions.shuffle(&mut rng);
        Ok(CandidateSet::free(actions, k))
    }
}

// ---------------------------------------------------------------------------
// Remote chat-completions policy

pub const POLICY_API_KEY_ENV: &str = "SHEPHERD_POLICY_API_KEY";

const SYSTEM_PROMPT: &str = "You are a software engineering agent working in a code repository. \
Each turn you issue exactly one shell command. Put the command in a fenced block tagged `action`. \
When the issue is fixed, issue the command `submit`.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemotePolicyConfig {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub timeout: Duration,
    pub retries: usize,
    pub backoff_base: Duration,
    pub price_per_mtok_prompt: f64,
    pub price_per_mtok_completion: f64,
    pub context: ContextConfig,
}

impl RemotePolicyConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            temperature: 0.8,
            timeout: Duration::from_secs(120),
            retries: 3,
            backoff_base: Duration::from_secs(1),
            price_per_mtok_prompt: 0.0,
            price_per_mtok_completion: 0.0,
            context: ContextConfig::default(),
        }
    }

    pub fn cost(&self, usage: TokenUsage) -> f64 {
        usage.prompt as f64 * self.price_per_mtok_prompt / 1e6
            + usage.completion as f64 * self.price_per_mtok_completion / 1e6
    }
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    n: usize,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Running totals across every call made through one policy instance.
#[derive(Debug, Default)]
struct CostMeter {
    usage: TokenUsage,
    cost_usd: f64,
}

#[derive(Debug)]
pub struct RemotePolicy {
    config: RemotePolicyConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    meter: Mutex<CostMeter>,
}

impl RemotePolicy {
    /// Reads the API key from `SHEPHERD_POLICY_API_KEY` when set.
    pub fn new(config: RemotePolicyConfig) -> Result<Self, PolicyError> {
        let api_key = std::env::var(POLICY_API_KEY_ENV)
            .ok()
            .filter(|k| !k.is_empty());
        Self::with_api_key(config, api_key)
    }

    pub fn with_api_key(
        config: RemotePolicyConfig,
        api_key: Option<String>,
    ) -> Result<Self, PolicyError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| PolicyError::Protocol(format!("http client: {e}")))?;
        Ok(Self {
            config,
            api_key,
            client,
            meter: Mutex::new(CostMeter::default()),
        })
    }

    /// Total token usage and cost so far.
    pub fn totals(&self) -> (TokenUsage, f64) {
        let m = self.meter.lock().expect("cost meter poisoned");
        (m.usage, m.cost_usd)
    }

    fn prompt(&self, ctx: &PolicyContext<'_>) -> Result<String, PolicyError> {
        let rendered = render_context(
            ctx.task,
            ctx.history,
            ctx.step_index.min(ctx.history.len()),
            &self.config.context,
        )
        .map_err(|e| PolicyError::Protocol(e.to_string()))?;
        Ok(format!(
            "{rendered}\n\nYou have used {} of {} steps. Reply with exactly one ```action block.",
            ctx.step_index, ctx.budget
        ))
    }

    fn request(
        &self,
        prompt: &str,
        n: usize,
    ) -> Result<(Vec<String>, Vec<String>, TokenUsage), PolicyError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: SYSTEM_PROMPT,
                },
                ChatMessage {
                    role: "user",
                    content: prompt,
                },
            ],
            temperature: self.config.temperature,
            n,
        };
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let mut attempts = 0;
        let raw = loop {
            attempts += 1;
            let mut req = self.client.post(&url).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let result = req.send().map_err(|e| e.to_string()).and_then(|resp| {
                let status = resp.status();
                if status.is_success() {
                    resp.bytes().map_err(|e| e.to_string())
                } else {
                    Err(format!("HTTP {status}"))
                }
            });
            match result {
                Ok(raw) => break raw,
                Err(e) if attempts > self.config.retries => {
                    return Err(PolicyError::PolicyUnavailable {
                        attempts,
                        last_error: e,
                    });
                }
                Err(e) => {
                    log::warn!("chat completion attempt {attempts} failed: {e}");
                    std::thread::sleep(self.config.backoff_base * (1u32 << (attempts - 1).min(30)));
                }
            }
        };
        let resp: ChatResponse = serde_json::from_slice(&raw)
            .map_err(|e| PolicyError::Protocol(format!("bad completion body: {e}")))?;
        let usage = resp
            .usage
            .map(|u| TokenUsage {
                prompt: u.prompt_tokens,
                completion: u.completion_tokens,
            })
            .unwrap_or_default();
        let mut actions = Vec::new();
        let mut warnings = Vec::new();
        for choice in resp.choices {
            match parse_completion(choice.message.content.as_deref().unwrap_or("")) {
                Ok(p) => {
                    warnings.extend(p.warnings);
                    actions.push(p.action);
                }
                Err(_) => warnings.push("completion without an action block".to_string()),
            }
        }
        Ok((actions, warnings, usage))
    }
}

impl Policy for RemotePolicy {
    fn propose(&self, ctx: &PolicyContext<'_>, k: usize) -> Result<CandidateSet, PolicyError> {
        if k == 0 {
            return Err(PolicyError::InvalidK);
        }
        let prompt = self.prompt(ctx)?;
        let (mut actions, mut warnings, mut usage) = self.request(&prompt, k)?;
        if actions.len() < k {
            let (more, w, u) = self.request(&prompt, k - actions.len())?;
            actions.extend(more);
            warnings.extend(w);
            usage += u;
        }
        if actions.is_empty() {
            return Err(PolicyError::EmptyCompletion);
        }
        if actions.len() < k {
            warnings.push(format!(
                "padded {} missing candidates with the last valid one",
                k - actions.len()
            ));
        }
        pad_to(&mut actions, k);

        let cost = self.config.cost(usage);
        {
            let mut m = self.meter.lock().expect("cost meter poisoned");
            m.usage += usage;
            m.cost_usd += cost;
        }
        Ok(CandidateSet {
            duplicate_flags: duplicate_flags(&actions),
            actions,
            generation_cost_usd: cost,
            token_usage: usage,
            warnings,
        })
    }
}
