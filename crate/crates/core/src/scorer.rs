//! Process reward scorers.
//!
//! Every scorer maps a `(context, action)` pair to a value in `[0, 1]`. The
//! built-in [`FeatureScorer`] projects a small hand-built feature vector to a
//! scalar and is trained with mean squared error; [`RemoteScorer`] forwards
//! batches to an HTTP service hosting a language-model-backed scorer.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{PrmSample, CURRENT_STEP_PREFIX, PROBLEM_HEADER};
use crate::model::{classify_action, ActionKind, DEFAULT_STEP_BUDGET};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("invalid score request: {0}")]
    InvalidRequest(String),
    #[error("scorer unavailable after {attempts} attempts: {last_error}")]
    ScorerUnavailable { attempts: usize, last_error: String },
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    DivergenceDetected { epoch: usize, loss: f64 },
    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    #[serde(rename = "context")]
    pub context_text: String,
    #[serde(rename = "action")]
    pub action_text: String,
}

impl ScoreRequest {
    pub fn new(context: impl Into<String>, action: impl Into<String>) -> Result<Self, ScorerError> {
        let req = Self {
            context_text: context.into(),
            action_text: action.into(),
        };
        req.check()?;
        Ok(req)
    }

    fn check(&self) -> Result<(), ScorerError> {
        if self.context_text.trim().is_empty() {
            return Err(ScorerError::InvalidRequest("empty context".into()));
        }
        if self.action_text.trim().is_empty() {
            return Err(ScorerError::InvalidRequest("empty action".into()));
        }
        Ok(())
    }
}

/// Common scorer contract. Implementations must be deterministic for a fixed
/// model state and return values in `[0, 1]`.
pub trait Scorer: Send + Sync {
    fn score_batch(&self, requests: &[ScoreRequest]) -> Result<Vec<f64>, ScorerError>;

    fn score(&self, request: &ScoreRequest) -> Result<f64, ScorerError> {
        let mut out = self.score_batch(std::slice::from_ref(request))?;
        out.pop()
            .ok_or_else(|| ScorerError::ProtocolError("empty score batch".into()))
    }
}

fn clamp_unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

// ---------------------------------------------------------------------------
// Features

pub const FEATURE_DIM: usize = 11;
pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "kind_read",
    "kind_edit",
    "kind_run_tests",
    "kind_submit",
    "kind_other",
    "relevant_path",
    "repeat",
    "action_length_log",
    "step_fraction",
    "history_error",
    "bias",
];
pub const IDX_RELEVANT: usize = 5;
pub const IDX_REPEAT: usize = 6;
pub const IDX_LENGTH_LOG: usize = 7;
pub const IDX_STEP_FRACTION: usize = 8;
pub const IDX_HISTORY_ERROR: usize = 9;
pub const IDX_BIAS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn dot(&self, w: &[f64]) -> f64 {
        self.0.iter().zip(w).map(|(x, w)| x * w).sum()
    }
}

/// Builds the fixed-order feature vector for one request. `step_budget`
/// scales the step index parsed from the context's `CURRENT STEP` line.
pub fn featurize(request: &ScoreRequest, step_budget: usize) -> FeatureVector {
    let mut x = [0.0; FEATURE_DIM];
    let (kind, paths) = classify_action(&request.action_text);
    x[kind.ordinal()] = 1.0;

    let ctx = &request.context_text;
    let (problem, history) = split_context(ctx);
    if paths.iter().any(|p| problem.contains(p.as_str())) {
        x[IDX_RELEVANT] = 1.0;
    }
    let needle = format!("ACTION: {}\nOBSERVATION:", request.action_text);
    if history.contains(&needle) {
        x[IDX_REPEAT] = 1.0;
    }
    x[IDX_LENGTH_LOG] = (request.action_text.chars().count().max(1) as f64).ln();
    if let Some(step) = current_step(ctx) {
        x[IDX_STEP_FRACTION] = step as f64 / step_budget.max(1) as f64;
    }
    if history.contains("error") || history.contains("FAILED") {
        x[IDX_HISTORY_ERROR] = 1.0;
    }
    x[IDX_BIAS] = 1.0;
    debug_assert_eq!(ActionKind::ALL.len(), 5);
    FeatureVector(x)
}

/// Splits a rendered context into its problem block and the rest.
fn split_context(ctx: &str) -> (&str, &str) {
    let body = ctx.strip_prefix(PROBLEM_HEADER).unwrap_or(ctx);
    match body.find("\nSTEP ") {
        Some(i) => (&body[..i], &body[i..]),
        None => match body.rfind(&format!("\n{CURRENT_STEP_PREFIX}")) {
            Some(i) => (&body[..i], ""),
            None => (body, ""),
        },
    }
}

fn current_step(ctx: &str) -> Option<usize> {
    let line = ctx.lines().next_back()?;
    line.strip_prefix(CURRENT_STEP_PREFIX)?.trim().parse().ok()
}

// ---------------------------------------------------------------------------
// Linear feature scorer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub seed: u64,
    pub final_mse: f64,
    #[serde(default = "default_budget")]
    pub step_budget: usize,
}

fn default_budget() -> usize {
    DEFAULT_STEP_BUDGET
}

/// Persisted weights of the linear scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScorerModel {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub training_meta: TrainingMeta,
}

impl FeatureScorerModel {
    pub fn from_weights(weights: [f64; FEATURE_DIM]) -> Self {
        Self {
            dim: FEATURE_DIM,
            weights: weights.to_vec(),
            training_meta: TrainingMeta {
                epochs: 0,
                learning_rate: 0.0,
                l2: 0.0,
                seed: 0,
                final_mse: 0.0,
                step_budget: DEFAULT_STEP_BUDGET,
            },
        }
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        if self.dim != FEATURE_DIM || self.weights.len() != FEATURE_DIM {
            return Err(ScorerError::InvalidModel(format!(
                "expected {FEATURE_DIM} weights, found dim={} len={}",
                self.dim,
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(ScorerError::InvalidModel("non-finite weight".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ScorerError> {
        let m: Self =
            serde_json::from_str(s).map_err(|e| ScorerError::InvalidModel(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

/// `clamp(w·x, 0, 1)` over [`featurize`].
#[derive(Debug, Clone)]
pub struct FeatureScorer {
    model: FeatureScorerModel,
}

impl FeatureScorer {
    pub fn new(model: FeatureScorerModel) -> Result<Self, ScorerError> {
        model.validate()?;
        Ok(Self { model })
    }

    pub fn model(&self) -> &FeatureScorerModel {
        &self.model
    }

    pub fn raw(&self, request: &ScoreRequest) -> f64 {
        featurize(request, self.model.training_meta.step_budget).dot(&self.model.weights)
    }
}

impl Scorer for FeatureScorer {
    fn score_batch(&self, requests: &[ScoreRequest]) -> Result<Vec<f64>, ScorerError> {
        requests
            .iter()
            .map(|r| {
                r.check()?;
                Ok(clamp_unit(self.raw(r)))
            })
            .collect()
    }
}

/// Returns the same value for every request.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score_batch(&self, requests: &[ScoreRequest]) -> Result<Vec<f64>, ScorerError> {
        Ok(vec![clamp_unit(self.0); requests.len()])
    }
}

/// Uniform pseudo-random scores derived from a hash of `(seed, context,
/// action)`, so results do not depend on call order or threading.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score_batch(&self, requests: &[ScoreRequest]) -> Result<Vec<f64>, ScorerError> {
        Ok(requests
            .iter()
            .map(|r| {
                let mut h = Sha256::new();
                h.update(self.seed.to_le_bytes());
                h.update((r.context_text.len() as u64).to_le_bytes());
                h.update(r.context_text.as_bytes());
                h.update(r.action_text.as_bytes());
                let digest = h.finalize();
                let mut b = [0u8; 8];
                b.copy_from_slice(&digest[..8]);
                (u64::from_le_bytes(b) >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
    pub step_budget: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20_000,
            learning_rate: 0.01,
            l2: 0.0,
            seed: 7,
            step_budget: DEFAULT_STEP_BUDGET,
        }
    }
}

/// Design matrix and targets for the MSE objective.
#[derive(Debug, Clone)]
pub struct Design {
    pub features: Vec<FeatureVector>,
    pub labels: Vec<f64>,
}

impl Design {
    pub fn from_samples(samples: &[PrmSample], step_budget: usize) -> Self {
        let features = samples
            .iter()
            .map(|s| {
                featurize(
                    &ScoreRequest {
                        context_text: s.context_text.clone(),
                        action_text: s.action_text.clone(),
                    },
                    step_budget,
                )
            })
            .collect();
        Self {
            features,
            labels: samples.iter().map(|s| s.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `(1/n) Σ (w·x_i − y_i)² + l2·‖w‖²`
pub fn mse_loss(design: &Design, weights: &[f64], l2: f64) -> f64 {
    let n = design.len() as f64;
    let sse: f64 = design
        .features
        .iter()
        .zip(&design.labels)
        .map(|(x, y)| (x.dot(weights) - y).powi(2))
        .sum();
    sse / n + l2 * weights.iter().map(|w| w * w).sum::<f64>()
}

/// Analytic gradient of [`mse_loss`]: `(2/n) Xᵀ(Xw − y) + 2·l2·w`.
pub fn mse_gradient(design: &Design, weights: &[f64], l2: f64) -> Vec<f64> {
    let n = design.len() as f64;
    let mut grad = vec![0.0; weights.len()];
    for (x, y) in design.features.iter().zip(&design.labels) {
        let resid = x.dot(weights) - y;
        for (g, xi) in grad.iter_mut().zip(x.0.iter()) {
            *g += resid * xi;
        }
    }
    grad.iter_mut()
        .zip(weights)
        .for_each(|(g, w)| *g = 2.0 * *g / n + 2.0 * l2 * w);
    grad
}

/// Sufficient statistics of the quadratic objective, so that one epoch of
/// full-batch descent costs O(D²) instead of O(nD).
struct Normal {
    gram: [[f64; FEATURE_DIM]; FEATURE_DIM],
    xty: [f64; FEATURE_DIM],
    yty: f64,
    n: f64,
}

impl Normal {
    fn new(design: &Design) -> Self {
        let mut gram = [[0.0; FEATURE_DIM]; FEATURE_DIM];
        let mut xty = [0.0; FEATURE_DIM];
        let mut yty = 0.0;
        for (x, y) in design.features.iter().zip(&design.labels) {
            for i in 0..FEATURE_DIM {
                xty[i] += x.0[i] * y;
                for j in 0..FEATURE_DIM {
                    gram[i][j] += x.0[i] * x.0[j];
                }
            }
            yty += y * y;
        }
        Self {
            gram,
            xty,
            yty,
            n: design.len() as f64,
        }
    }

    fn gradient(&self, w: &[f64; FEATURE_DIM], l2: f64) -> [f64; FEATURE_DIM] {
        let mut g = [0.0; FEATURE_DIM];
        for i in 0..FEATURE_DIM {
            let gw: f64 = (0..FEATURE_DIM).map(|j| self.gram[i][j] * w[j]).sum();
            g[i] = 2.0 * (gw - self.xty[i]) / self.n + 2.0 * l2 * w[i];
        }
        g
    }

    fn loss(&self, w: &[f64; FEATURE_DIM], l2: f64) -> f64 {
        let mut quad = 0.0;
        for i in 0..FEATURE_DIM {
            for j in 0..FEATURE_DIM {
                quad += w[i] * self.gram[i][j] * w[j];
            }
        }
        let cross: f64 = (0..FEATURE_DIM).map(|i| w[i] * self.xty[i]).sum();
        let sq: f64 = w.iter().map(|v| v * v).sum();
        (quad - 2.0 * cross + self.yty) / self.n + l2 * sq
    }
}

/// Full-batch gradient descent on the L2-penalized MSE.
pub fn train_feature_scorer(
    samples: &[PrmSample],
    cfg: &TrainConfig,
) -> Result<FeatureScorerModel, ScorerError> {
    train_with_history(samples, cfg).map(|(m, _)| m)
}

/// Like [`train_feature_scorer`], also returning the objective value after
/// each epoch.
pub fn train_with_history(
    samples: &[PrmSample],
    cfg: &TrainConfig,
) -> Result<(FeatureScorerModel, Vec<f64>), ScorerError> {
    if samples.is_empty() {
        return Err(ScorerError::EmptyDataset);
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(ScorerError::InvalidRequest(format!(
            "learning rate {} must be > 0",
            cfg.learning_rate
        )));
    }
    let design = Design::from_samples(samples, cfg.step_budget);
    let normal = Normal::new(&design);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = [0.0; FEATURE_DIM];
    for v in w.iter_mut() {
        *v = rng.random_range(-1e-3..1e-3);
    }

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let g = normal.gradient(&w, cfg.l2);
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi -= cfg.learning_rate * gi;
        }
        let loss = normal.loss(&w, cfg.l2);
        if !loss.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(ScorerError::DivergenceDetected { epoch, loss });
        }
        history.push(loss);
    }

    let final_mse = mse_loss(&design, &w, 0.0);
    if !final_mse.is_finite() {
        return Err(ScorerError::DivergenceDetected {
            epoch: cfg.epochs,
            loss: final_mse,
        });
    }
    let model = FeatureScorerModel {
        dim: FEATURE_DIM,
        weights: w.to_vec(),
        training_meta: TrainingMeta {
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            l2: cfg.l2,
            seed: cfg.seed,
            final_mse,
            step_budget: cfg.step_budget,
        },
    };
    Ok((model, history))
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub spearman_rho: f64,
}

pub fn evaluate_scorer(
    scorer: &dyn Scorer,
    samples: &[PrmSample],
) -> Result<EvalMetrics, ScorerError> {
    if samples.len() < 2 {
        return Err(ScorerError::InsufficientSamples(samples.len()));
    }
    let requests: Vec<ScoreRequest> = samples
        .iter()
        .map(|s| ScoreRequest {
            context_text: s.context_text.clone(),
            action_text: s.action_text.clone(),
        })
        .collect();
    let preds = scorer.score_batch(&requests)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let mse = preds
        .iter()
        .zip(&labels)
        .map(|(p, y)| (p - y).powi(2))
        .sum::<f64>()
        / samples.len() as f64;
    Ok(EvalMetrics {
        mse,
        spearman_rho: spearman(&preds, &labels),
    })
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho as the Pearson correlation of average ranks. A constant
/// side yields 0.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)
}

// ---------------------------------------------------------------------------
// Remote scorer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteScorerConfig {
    pub base_url: String,
    pub timeout: Duration,
    pub retries: usize,
    /// First backoff delay; doubles on every retry.
    pub backoff_base: Duration,
}

impl RemoteScorerConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: Duration::from_secs(30),
            retries: 3,
            backoff_base: Duration::from_secs(1),
        }
    }

    /// Delays slept before each retry: `base, 2·base, 4·base, …`.
    pub fn backoff_schedule(&self) -> Vec<Duration> {
        (0..self.retries)
            .map(|i| self.backoff_base * (1u32 << i.min(30)))
            .collect()
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/score_batch", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Serialize)]
struct ScoreBatchBody<'a> {
    items: &'a [ScoreRequest],
}

#[derive(Debug, Deserialize)]
struct ScoreBatchResponse {
    scores: Vec<f64>,
}

/// Client for `POST /v1/score_batch`.
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    config: RemoteScorerConfig,
    client: reqwest::blocking::Client,
}

impl RemoteScorer {
    pub fn new(config: RemoteScorerConfig) -> Result<Self, ScorerError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ScorerError::InvalidRequest(format!("http client: {e}")))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &RemoteScorerConfig {
        &self.config
    }

    fn attempt(&self, body: &ScoreBatchBody<'_>) -> Result<Vec<u8>, String> {
        let resp = self
            .client
            .post(self.config.endpoint())
            .json(body)
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        resp.bytes().map(|b| b.to_vec()).map_err(|e| e.to_string())
    }
}

impl Scorer for RemoteScorer {
    fn score_batch(&self, requests: &[ScoreRequest]) -> Result<Vec<f64>, ScorerError> {
        if requests.is_empty() {
            return Err(ScorerError::InvalidRequest("empty batch".into()));
        }
        for r in requests {
            r.check()?;
        }
        let body = ScoreBatchBody { items: requests };
        let schedule = self.config.backoff_schedule();
        let mut attempts = 0;
        let raw = loop {
            attempts += 1;
            let started = Instant::now();
            match self.attempt(&body) {
                Ok(raw) => break raw,
                Err(e) => {
                    log::warn!(
                        "score_batch attempt {attempts} failed after {:?}: {e}",
                        started.elapsed()
                    );
                    match schedule.get(attempts - 1) {
                        Some(delay) => std::thread::sleep(*delay),
                        None => {
                            return Err(ScorerError::ScorerUnavailable {
                                attempts,
                                last_error: e,
                            })
                        }
                    }
                }
            }
        };

        let parsed: ScoreBatchResponse = serde_json::from_slice(&raw)
            .map_err(|e| ScorerError::ProtocolError(format!("bad response body: {e}")))?;
        if parsed.scores.len() != requests.len() {
            return Err(ScorerError::ProtocolError(format!(
                "{} scores for {} items",
                parsed.scores.len(),
                requests.len()
            )));
        }
        parsed
            .scores
            .into_iter()
            .map(|s| {
                if !s.is_finite() {
                    return Err(ScorerError::ProtocolError(format!("non-finite score {s}")));
                }
                if !(0.0..=1.0).contains(&s) {
                    log::warn!("remote score {s} outside [0, 1], clamping");
                }
                Ok(s.clamp(0.0, 1.0))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(ctx: &str, action: &str) -> ScoreRequest {
        ScoreRequest::new(ctx, action).unwrap()
    }

    const EMPTY_CTX: &str = "PROBLEM:\nfix src/a.py\n\nCURRENT STEP: 0";

    #[test]
    fn request_validation() {
        assert!(ScoreRequest::new("", "ls").is_err());
        assert!(ScoreRequest::new("ctx", "  ").is_err());
    }

    #[test]
    fn zero_and_constant_models() {
        let zero =
            FeatureScorer::new(FeatureScorerModel::from_weights([0.0; FEATURE_DIM])).unwrap();
        assert_eq!(zero.score(&req(EMPTY_CTX, "cat src/a.py")).unwrap(), 0.0);
        let mut w = [0.0; FEATURE_DIM];
        w[IDX_BIAS] = 0.5;
        let bias = FeatureScorer::new(FeatureScorerModel::from_weights(w)).unwrap();
        for a in ["cat src/a.py", "submit", "echo"] {
            assert_eq!(bias.score(&req(EMPTY_CTX, a)).unwrap(), 0.5);
        }
    }

    #[test]
    fn repeat_weight_example() {
        let mut w = [0.0; FEATURE_DIM];
        w[IDX_BIAS] = 0.9;
        w[IDX_REPEAT] = -0.6;
        let s = FeatureScorer::new(FeatureScorerModel::from_weights(w)).unwrap();
        let ctx = "PROBLEM:\np\n\nSTEP 0:\nACTION: ls\nOBSERVATION: a\n\nCURRENT STEP: 1";
        assert!((s.score(&req(ctx, "ls")).unwrap() - 0.3).abs() < 1e-12);
        assert!((s.score(&req(ctx, "ls -la")).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn featurize_examples() {
        let x = featurize(&req("PROBLEM:\np\n\nCURRENT STEP: 0", "submit"), 30).0;
        assert_eq!(x[ActionKind::Submit.ordinal()], 1.0);
        assert_eq!(x[..5].iter().sum::<f64>(), 1.0);
        assert_eq!(x[IDX_REPEAT], 0.0);
        assert_eq!(x[IDX_BIAS], 1.0);
        assert_eq!(x[IDX_STEP_FRACTION], 0.0);
        assert_eq!(x[IDX_LENGTH_LOG], 6f64.ln());

        let x = featurize(&req(EMPTY_CTX, "x"), 30).0;
        assert_eq!(x[IDX_LENGTH_LOG], 0.0);

        let ctx = "PROBLEM:\nbug in src/a.py\n\nSTEP 0:\nACTION: cat src/b.py\nOBSERVATION: FAILED x\n\nCURRENT STEP: 6";
        let x = featurize(&req(ctx, "cat src/a.py"), 30).0;
        assert_eq!(x[IDX_RELEVANT], 1.0);
        assert_eq!(x[IDX_HISTORY_ERROR], 1.0);
        assert!((x[IDX_STEP_FRACTION] - 0.2).abs() < 1e-12);
        // A path seen only in history is not a task hint.
        let x = featurize(&req(ctx, "cat src/b.py"), 30).0;
        assert_eq!(x[IDX_RELEVANT], 0.0);
        assert_eq!(x[IDX_REPEAT], 1.0);
    }

    #[test]
    fn featurize_is_deterministic() {
        let r = req(EMPTY_CTX, "edit src/a.py <<< fixed");
        let first = featurize(&r, 30);
        assert!((0..1000).all(|_| featurize(&r, 30) == first));
    }

    fn sample(label: f64, action: &str) -> PrmSample {
        PrmSample {
            task_id: "t".into(),
            step_index: 0,
            context_text: EMPTY_CTX.into(),
            action_text: action.into(),
            label,
        }
    }

    #[test]
    fn single_sample_interpolates() {
        let cfg = TrainConfig {
            epochs: 5000,
            learning_rate: 0.02,
            ..Default::default()
        };
        let m = train_feature_scorer(&[sample(0.73, "cat src/a.py")], &cfg).unwrap();
        assert!(
            m.training_meta.final_mse <= 1e-6,
            "{}",
            m.training_meta.final_mse
        );
    }

    #[test]
    fn huge_l2_collapses_to_zero() {
        let samples = vec![sample(0.9, "cat src/a.py"), sample(0.8, "submit")];
        let cfg = TrainConfig {
            epochs: 2000,
            learning_rate: 1e-10,
            l2: 1e9,
            ..Default::default()
        };
        let m = train_feature_scorer(&samples, &cfg).unwrap();
        assert!(m.weights.iter().all(|w| w.abs() < 1e-6));
        let s = FeatureScorer::new(m).unwrap();
        assert!(s.score(&req(EMPTY_CTX, "cat src/a.py")).unwrap() < 1e-6);
    }

    #[test]
    fn training_errors() {
        assert!(matches!(
            train_feature_scorer(&[], &TrainConfig::default()),
            Err(ScorerError::EmptyDataset)
        ));
        let samples = vec![sample(0.9, "cat src/a.py"), sample(0.1, "echo")];
        let cfg = TrainConfig {
            epochs: 5000,
            learning_rate: 50.0,
            ..Default::default()
        };
        assert!(matches!(
            train_feature_scorer(&samples, &cfg),
            Err(ScorerError::DivergenceDetected { .. })
        ));
    }

    #[test]
    fn gram_path_matches_direct_gradient() {
        let samples: Vec<PrmSample> = (0..20)
            .map(|i| {
                sample(
                    i as f64 / 20.0,
                    ["cat src/a.py", "submit", "echo hi", "edit src/a.py <<< z"][i % 4],
                )
            })
            .collect();
        let design = Design::from_samples(&samples, 30);
        let normal = Normal::new(&design);
        let w: [f64; FEATURE_DIM] = std::array::from_fn(|i| 0.1 * i as f64 - 0.3);
        let direct = mse_gradient(&design, &w, 0.01);
        let fast = normal.gradient(&w, 0.01);
        for (a, b) in direct.iter().zip(fast) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((mse_loss(&design, &w, 0.01) - normal.loss(&w, 0.01)).abs() < 1e-10);
    }

    #[test]
    fn spearman_conventions() {
        let labels = [0.1, 0.4, 0.2, 0.9];
        assert!((spearman(&labels, &labels) - 1.0).abs() < 1e-12);
        let anti: Vec<f64> = labels.iter().map(|l| 1.0 - l).collect();
        assert!((spearman(&anti, &labels) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[0.5; 4], &labels), 0.0);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn evaluate_examples() {
        let samples = vec![sample(0.0, "a"), sample(0.5, "bb"), sample(1.0, "ccc")];
        let mut w = [0.0; FEATURE_DIM];
        w[IDX_BIAS] = 0.25;
        let constant = FeatureScorer::new(FeatureScorerModel::from_weights(w)).unwrap();
        let m = evaluate_scorer(&constant, &samples).unwrap();
        assert_eq!(m.spearman_rho, 0.0);
        assert!((m.mse - (0.0625 + 0.0625 + 0.5625) / 3.0).abs() < 1e-12);
        assert!(matches!(
            evaluate_scorer(&constant, &samples[..1]),
            Err(ScorerError::InsufficientSamples(1))
        ));
    }

    #[test]
    fn random_scorer_is_order_independent() {
        let s = RandomScorer { seed: 3 };
        let a = req(EMPTY_CTX, "ls");
        let b = req(EMPTY_CTX, "cat x.py");
        let ab = s.score_batch(&[a.clone(), b.clone()]).unwrap();
        let ba = s.score_batch(&[b, a]).unwrap();
        assert_eq!(ab[0], ba[1]);
        assert!(ab.iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn model_json_round_trip() {
        let m = FeatureScorerModel::from_weights(std::array::from_fn(|i| i as f64 * 0.5));
        let mut m = m;
        m.training_meta.final_mse = 0.25;
        let back = FeatureScorerModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(v["dim"], 11);
        assert!(FeatureScorerModel::from_json(r#"{"dim":3,"weights":[1,2,3],"training_meta":{"epochs":1,"learning_rate":0.1,"final_mse":0}}"#).is_err());
    }

    #[test]
    fn backoff_schedule_doubles() {
        let cfg = RemoteScorerConfig::new("http://localhost:1");
        assert_eq!(
            cfg.backoff_schedule(),
            vec![
                Duration::from_secs(1),
                Duration::from_secs(2),
                Duration::from_secs(4)
            ]
        );
        assert_eq!(cfg.timeout, Duration::from_secs(30));
    }
}
