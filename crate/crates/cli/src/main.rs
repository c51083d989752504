//! `shepherd`: one subcommand per pipeline stage.

mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use shepherd_core::analytics::{
    emit_report, reward_gap_records, summarize_run, ReportFormat, RunReport,
};
use shepherd_core::dataset::{
    build_dataset, normalize_labels, read_samples, split_dataset, write_samples,
};
use shepherd_core::environment::{
    generate_sim_task, EnvError, Environment, ShellEnvConfig, ShellEnvironment, SimEnvironment,
    SimTask,
};
use shepherd_core::episode::{
    read_results, run_batch_with, run_episode, run_unguided, write_results, EpisodeConfig,
    EpisodeResult,
};
use shepherd_core::model::{
    parse_trajectory, read_tasks, write_tasks, write_trajectory, Task, TaskIndex, Trajectory,
};
use shepherd_core::policy::{
    Policy, RemotePolicy, RemotePolicyConfig, ScriptedPolicy, SimOraclePolicy,
};
use shepherd_core::reward::{label_trajectory, RewardLabelRecord, StepReward};
use shepherd_core::scorer::{
    evaluate_scorer, train_feature_scorer, ConstantScorer, FeatureScorer, FeatureScorerModel,
    RandomScorer, RemoteScorer, RemoteScorerConfig, Scorer,
};

use crate::config::{Config, ScorerKind};

/// Marks errors caused by the environment or a remote service (exit code 2).
#[derive(Debug)]
struct TransportFailure(String);

impl std::fmt::Display for TransportFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for TransportFailure {}

fn transport(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(TransportFailure(msg.into()))
}

#[derive(Parser, Debug)]
#[command(
    name = "shepherd",
    version,
    about = "Reward-guided code agent pipeline"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EnvKind {
    Sim,
    Shell,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Markdown,
}

#[derive(clap::Args, Debug)]
struct EpisodeArgs {
    /// Task file (JSONL).
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, value_enum, default_value = "sim")]
    env: EnvKind,
    /// remote | scripted | oracle | script:<file.json>
    #[arg(long, default_value = "scripted")]
    policy: String,
    /// Sim task directory; defaults to `sim/` next to the task file.
    #[arg(long)]
    sim_dir: Option<PathBuf>,
    /// Directory holding one repository snapshot per task id (shell env).
    #[arg(long)]
    repos: Option<PathBuf>,
    /// Test runner for the shell env; the test id is appended.
    #[arg(long, default_value = "python -m pytest -q")]
    test_command: String,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    parallel: Option<usize>,
    /// Seed of the sim policy's distractor draws.
    #[arg(long)]
    policy_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Generate deterministic sim tasks.
    Simgen {
        /// Inclusive seed range `a..b`.
        #[arg(long)]
        seeds: String,
        #[arg(long, default_value_t = shepherd_core::environment::SIM_DEFAULT_FILES)]
        files: usize,
        #[arg(long, default_value_t = shepherd_core::environment::SIM_DEFAULT_DECOYS)]
        decoys: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Record trajectories with the unguided policy.
    Collect {
        #[command(flatten)]
        episode: EpisodeArgs,
    },
    /// Attach heuristic step rewards to trajectories.
    Label {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the PRM dataset with a task-disjoint validation split.
    Dataset {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        history: Option<usize>,
        #[arg(long)]
        val_frac: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the linear feature scorer.
    Train {
        /// Dataset directory with train.jsonl (and optionally val.jsonl).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        l2: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reward-guided runs.
    Run {
        #[command(flatten)]
        episode: EpisodeArgs,
        /// feature:<model.json> | remote:<url> | random:<seed> | constant:<v>
        #[arg(long)]
        scorer: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Summarize runs and the reward gap.
    Analyze {
        /// Run directory, optionally as `name=dir`; repeatable.
        #[arg(long, required = true)]
        results: Vec<String>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "markdown")]
        format: FormatArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<TransportFailure>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    match cli.command {
        Command::Config => {
            print!("{}", config.to_toml());
            Ok(ExitCode::SUCCESS)
        }
        Command::Simgen {
            seeds,
            files,
            decoys,
            out,
        } => cmd_simgen(&seeds, files, decoys, &out),
        Command::Collect { episode } => cmd_collect(&config, &episode),
        Command::Label {
            trajectories,
            tasks,
            out,
        } => cmd_label(&config, &trajectories, &tasks, &out),
        Command::Dataset {
            trajectories,
            tasks,
            history,
            val_frac,
            seed,
            out,
        } => {
            let mut config = config;
            if let Some(h) = history {
                config.dataset.history = h;
            }
            if let Some(v) = val_frac {
                config.dataset.val_fraction = v;
            }
            if let Some(s) = seed {
                config.dataset.seed = s;
            }
            config.check()?;
            cmd_dataset(&config, &trajectories, &tasks, &out)
        }
        Command::Train {
            data,
            epochs,
            lr,
            l2,
            seed,
            out,
        } => {
            let mut config = config;
            if let Some(v) = epochs {
                config.train.epochs = v;
            }
            if let Some(v) = lr {
                config.train.learning_rate = v;
            }
            if let Some(v) = l2 {
                config.train.l2 = v;
            }
            if let Some(v) = seed {
                config.train.seed = v;
            }
            config.check()?;
            cmd_train(&config, &data, &out)
        }
        Command::Run { episode, scorer, k } => {
            let mut config = config;
            if let Some(k) = k {
                config.policy.k = k;
            }
            cmd_run(&config, &episode, scorer.as_deref())
        }
        Command::Analyze {
            results,
            labels,
            format,
            out,
        } => cmd_analyze(&results, labels.as_deref(), format, out.as_deref()),
    }
}

// ---------------------------------------------------------------------------
// File helpers

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open_file(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| {
        format!("missing input {}", path.display())
    })?))
}

fn load_tasks(path: &Path) -> Result<TaskIndex> {
    read_tasks(open_file(path)?).with_context(|| format!("reading tasks {}", path.display()))
}

/// `*.jsonl` files of a directory, sorted by name.
fn jsonl_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("missing input {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

fn load_trajectories(dir: &Path, tasks: &TaskIndex) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for path in jsonl_files(dir)? {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let task = tasks
            .get(stem)
            .ok_or_else(|| anyhow!("{}: no task {stem:?} in the task file", path.display()))?;
        let t = parse_trajectory(open_file(&path)?, task)
            .with_context(|| format!("parsing {}", path.display()))?;
        out.push(t);
    }
    Ok(out)
}

fn label_all(
    config: &Config,
    trajectories: Vec<Trajectory>,
    tasks: &TaskIndex,
) -> Result<Vec<(Trajectory, Vec<StepReward>)>> {
    trajectories
        .into_iter()
        .map(|t| {
            let task = tasks
                .get(&t.task_id)
                .expect("trajectory task resolved on load");
            let rewards = label_trajectory(&t, task, &config.reward, config.env.budget)
                .with_context(|| format!("labeling {}", t.task_id))?;
            Ok((t, rewards))
        })
        .collect()
}

fn parse_seed_range(s: &str) -> Result<std::ops::RangeInclusive<u64>> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| anyhow!("--seeds: expected a..b, got {s:?}"))?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let a: u64 = a
        .trim()
        .parse()
        .with_context(|| format!("--seeds: bad start {a:?}"))?;
    let b: u64 = b
        .trim()
        .parse()
        .with_context(|| format!("--seeds: bad end {b:?}"))?;
    anyhow::ensure!(a <= b, "--seeds: empty range {s:?}");
    Ok(a..=b)
}

// ---------------------------------------------------------------------------
// simgen

fn cmd_simgen(seeds: &str, files: usize, decoys: usize, out: &Path) -> Result<ExitCode> {
    let mut tasks = Vec::new();
    for seed in parse_seed_range(seeds)? {
        let (task, sim) = generate_sim_task(seed, files, decoys);
        let mut w = create_file(&out.join("sim").join(format!("{}.json", task.task_id)))?;
        serde_json::to_writer_pretty(&mut w, &sim)?;
        w.write_all(b"\n")?;
        w.flush()?;
        tasks.push(task);
    }
    let mut w = create_file(&out.join("tasks.jsonl"))?;
    write_tasks(&mut w, &tasks)?;
    w.flush()?;
    println!("wrote {} sim tasks to {}", tasks.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeSetup {
    tasks: Vec<Task>,
    sims: BTreeMap<String, SimTask>,
    budget: usize,
    parallelism: usize,
}

fn load_sims(dir: &Path, tasks: &[Task]) -> Result<BTreeMap<String, SimTask>> {
    let mut sims = BTreeMap::new();
    for t in tasks {
        let path = dir.join(format!("{}.json", t.task_id));
        let sim: SimTask = serde_json::from_reader(open_file(&path)?)
            .with_context(|| format!("parsing {}", path.display()))?;
        sims.insert(t.task_id.clone(), sim);
    }
    Ok(sims)
}

fn setup(config: &Config, args: &EpisodeArgs) -> Result<EpisodeSetup> {
    let index = load_tasks(&args.tasks)?;
    let tasks: Vec<Task> = index.iter().cloned().collect();
    let sims = match args.env {
        EnvKind::Sim => {
            let dir = args
                .sim_dir
                .clone()
                .unwrap_or_else(|| args.tasks.parent().unwrap_or(Path::new(".")).join("sim"));
            load_sims(&dir, &tasks)?
        }
        EnvKind::Shell => BTreeMap::new(),
    };
    let budget = args.budget.unwrap_or(config.env.budget);
    let parallelism = args.parallel.unwrap_or(config.parallelism);
    anyhow::ensure!(budget >= 1, "--budget: must be >= 1");
    anyhow::ensure!(parallelism >= 1, "--parallel: must be >= 1");
    Ok(EpisodeSetup {
        tasks,
        sims,
        budget,
        parallelism,
    })
}

fn make_policy(
    config: &Config,
    args: &EpisodeArgs,
    sims: &BTreeMap<String, SimTask>,
) -> Result<Box<dyn Policy>> {
    let seed = args.policy_seed.unwrap_or(config.policy.seed);
    let needs_sim = |name: &str| -> Result<()> {
        anyhow::ensure!(
            matches!(args.env, EnvKind::Sim),
            "--policy {name} requires --env sim"
        );
        Ok(())
    };
    Ok(match args.policy.as_str() {
        "scripted" => {
            needs_sim("scripted")?;
            Box::new(SimOraclePolicy::with_distractors(sims.clone(), seed))
        }
        "oracle" => {
            needs_sim("oracle")?;
            Box::new(SimOraclePolicy::oracle(sims.clone()))
        }
        "remote" => {
            let p = &config.policy;
            let mut rc = RemotePolicyConfig::new(p.base_url.clone(), p.model_name.clone());
            rc.temperature = p.temperature;
            rc.timeout = Duration::from_secs(p.timeout_s);
            rc.retries = p.retries;
            rc.price_per_mtok_prompt = p.price_per_mtok_prompt;
            rc.price_per_mtok_completion = p.price_per_mtok_completion;
            rc.context = config.dataset.context();
            Box::new(RemotePolicy::new(rc).map_err(|e| transport(e.to_string()))?)
        }
        other => match other.strip_prefix("script:") {
            Some(path) => {
                let script: BTreeMap<usize, Vec<String>> =
                    serde_json::from_reader(open_file(Path::new(path))?)
                        .with_context(|| format!("parsing script {path}"))?;
                Box::new(ScriptedPolicy::new(script))
            }
            None => bail!("--policy: unknown policy {other:?}"),
        },
    })
}

fn make_scorer(config: &Config, spec: Option<&str>) -> Result<(String, Box<dyn Scorer>)> {
    let spec = match spec {
        Some(s) => s.to_string(),
        None => match config.scorer.kind {
            ScorerKind::Feature => {
                let p = config
                    .scorer
                    .model_path
                    .as_ref()
                    .ok_or_else(|| anyhow!("scorer.model_path: not set"))?;
                format!("feature:{}", p.display())
            }
            ScorerKind::Remote => {
                format!(
                    "remote:{}",
                    config
                        .scorer
                        .url
                        .as_deref()
                        .ok_or_else(|| anyhow!("scorer.url: not set"))?
                )
            }
        },
    };
    let (kind, arg) = spec
        .split_once(':')
        .ok_or_else(|| anyhow!("--scorer: expected kind:arg, got {spec:?}"))?;
    let scorer: Box<dyn Scorer> = match kind {
        "feature" => {
            let text = fs::read_to_string(arg).with_context(|| format!("missing input {arg}"))?;
            let model = FeatureScorerModel::from_json(&text)
                .with_context(|| format!("parsing model {arg}"))?;
            Box::new(FeatureScorer::new(model)?)
        }
        "remote" => {
            let mut rc = RemoteScorerConfig::new(arg);
            rc.timeout = Duration::from_secs(config.scorer.timeout_s);
            rc.retries = config.scorer.retries;
            Box::new(RemoteScorer::new(rc).map_err(|e| transport(e.to_string()))?)
        }
        "random" => Box::new(RandomScorer {
            seed: arg
                .parse()
                .with_context(|| format!("--scorer: bad seed {arg:?}"))?,
        }),
        "constant" => {
            let v: f64 = arg
                .parse()
                .with_context(|| format!("--scorer: bad value {arg:?}"))?;
            anyhow::ensure!(
                (0.0..=1.0).contains(&v),
                "--scorer: constant must be in [0, 1]"
            );
            Box::new(ConstantScorer(v))
        }
        other => bail!("--scorer: unknown kind {other:?}"),
    };
    Ok((kind.to_string(), scorer))
}

fn run_episodes(
    config: &Config,
    args: &EpisodeArgs,
    setup: &EpisodeSetup,
    episode: impl Fn(&Task, &mut dyn Environment) -> EpisodeResult + Sync,
) -> Result<Vec<EpisodeResult>> {
    let sims = &setup.sims;
    let env_cfg = shepherd_core::environment::EnvConfig {
        budget: setup.budget,
        ..config.env
    };
    let work_root = args.out.join("workspaces");
    let factory = |t: &Task| -> Result<Box<dyn Environment>, EnvError> {
        match args.env {
            EnvKind::Sim => {
                let sim = sims
                    .get(&t.task_id)
                    .ok_or_else(|| EnvError::UnknownTask(t.task_id.clone()))?;
                Ok(Box::new(SimEnvironment::new(sim.clone(), env_cfg)))
            }
            EnvKind::Shell => {
                let repos = args.repos.as_ref().ok_or_else(|| {
                    EnvError::WorkspaceSetupFailed("--repos is required for --env shell".into())
                })?;
                let mut sc = ShellEnvConfig::new(work_root.clone());
                sc.env = env_cfg;
                sc.test_command = args.test_command.clone();
                Ok(Box::new(ShellEnvironment::new(repos.join(&t.task_id), sc)))
            }
        }
    };
    run_batch_with(&setup.tasks, &factory, setup.parallelism, episode)
        .map_err(|e| transport(e.to_string()))
}

fn write_run(out: &Path, results: &[EpisodeResult]) -> Result<()> {
    let mut w = create_file(&out.join("results.jsonl"))?;
    write_results(&mut w, results)?;
    w.flush()?;
    for r in results {
        let mut w = create_file(
            &out.join("trajectories")
                .join(format!("{}.jsonl", r.task_id)),
        )?;
        write_trajectory(&mut w, &r.trajectory)?;
        w.flush()?;
    }
    Ok(())
}

fn finish_run(out: &Path, results: &[EpisodeResult]) -> Result<ExitCode> {
    write_run(out, results)?;
    let failed: Vec<&EpisodeResult> = results.iter().filter(|r| r.failed()).collect();
    if !results.is_empty() {
        let report = summarize_run(results)?;
        println!(
            "{} tasks, {} resolved, {} failed, avg steps {:.1}",
            report.n_tasks,
            report.resolved_count,
            failed.len(),
            report.avg_steps
        );
    }
    for r in &failed {
        if let Some(f) = &r.failure {
            eprintln!("episode {} failed ({:?}): {}", r.task_id, f.kind, f.message);
        }
    }
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn cmd_collect(config: &Config, args: &EpisodeArgs) -> Result<ExitCode> {
    let setup = setup(config, args)?;
    let policy = make_policy(config, args, &setup.sims)?;
    let budget = setup.budget;
    let results = run_episodes(config, args, &setup, |task, env| {
        run_unguided(task, policy.as_ref(), env, budget)
    })?;
    finish_run(&args.out, &results)
}

fn cmd_run(config: &Config, args: &EpisodeArgs, scorer_spec: Option<&str>) -> Result<ExitCode> {
    config.check()?;
    let setup = setup(config, args)?;
    let policy = make_policy(config, args, &setup.sims)?;
    let (_, scorer) = make_scorer(config, scorer_spec)?;
    let cfg = EpisodeConfig {
        budget: setup.budget,
        k: config.policy.k,
        context: config.dataset.context(),
    };
    let results = run_episodes(config, args, &setup, |task, env| {
        run_episode(task, policy.as_ref(), scorer.as_ref(), env, &cfg)
    })?;
    finish_run(&args.out, &results)
}

// ---------------------------------------------------------------------------
// label / dataset / train

fn cmd_label(config: &Config, dir: &Path, tasks_path: &Path, out: &Path) -> Result<ExitCode> {
    let tasks = load_tasks(tasks_path)?;
    let labeled = label_all(config, load_trajectories(dir, &tasks)?, &tasks)?;
    let returns: Vec<f64> = labeled
        .iter()
        .flat_map(|(_, rs)| rs.iter().map(|r| r.discounted_return))
        .collect();
    let mut labels = if returns.is_empty() {
        Vec::new()
    } else {
        normalize_labels(&returns)?
    }
    .into_iter();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (t, rewards) in &labeled {
        let mut w = create_file(&out.join(format!("{}.jsonl", t.task_id)))?;
        for r in rewards {
            let mut r = r.clone();
            r.normalized_label = labels.next();
            serde_json::to_writer(
                &mut w,
                &RewardLabelRecord::from_step(&t.task_id, &r, Some(t.resolved)),
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    println!(
        "labeled {} trajectories ({} steps)",
        labeled.len(),
        returns.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_dataset(config: &Config, dir: &Path, tasks_path: &Path, out: &Path) -> Result<ExitCode> {
    let tasks = load_tasks(tasks_path)?;
    let mut labeled = label_all(config, load_trajectories(dir, &tasks)?, &tasks)?;
    let (samples, mut stats) = build_dataset(&mut labeled, &tasks, &config.dataset.context())?;
    let (train, val) = split_dataset(samples, config.dataset.val_fraction, config.dataset.seed);
    stats.partition = Some(
        [
            ("train".to_string(), train.len()),
            ("val".to_string(), val.len()),
        ]
        .into_iter()
        .collect(),
    );

    for (name, part) in [("train.jsonl", &train), ("val.jsonl", &val)] {
        let mut w = create_file(&out.join(name))?;
        write_samples(&mut w, part)?;
        w.flush()?;
    }
    let mut w = create_file(&out.join("stats.json"))?;
    serde_json::to_writer_pretty(&mut w, &stats)?;
    w.write_all(b"\n")?;
    w.flush()?;
    println!("{} train / {} val samples", train.len(), val.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(config: &Config, data: &Path, out: &Path) -> Result<ExitCode> {
    let train = read_samples(open_file(&data.join("train.jsonl"))?)?;
    let model = train_feature_scorer(&train, &config.train_config())?;
    let mut w = create_file(out)?;
    w.write_all(model.to_json().as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;

    let scorer = FeatureScorer::new(model)?;
    let val_path = data.join("val.jsonl");
    let mut metrics = BTreeMap::new();
    if train.len() >= 2 {
        metrics.insert("train", evaluate_scorer(&scorer, &train)?);
    }
    if val_path.exists() {
        let val = read_samples(open_file(&val_path)?)?;
        if val.len() >= 2 {
            metrics.insert("val", evaluate_scorer(&scorer, &val)?);
        }
    }
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// analyze

fn cmd_analyze(
    results: &[String],
    labels: Option<&Path>,
    format: FormatArg,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let mut runs: Vec<(String, RunReport)> = Vec::new();
    for spec in results {
        let (name, dir) = match spec.split_once('=') {
            Some((n, d)) => (n.to_string(), PathBuf::from(d)),
            None => {
                let d = PathBuf::from(spec);
                let name = d
                    .file_name()
                    .and_then(|s| s.to_str())
                    .unwrap_or(spec)
                    .to_string();
                (name, d)
            }
        };
        let path = dir.join("results.jsonl");
        let rs = read_results(open_file(&path)?).map_err(|e| anyhow!("{}: {e}", path.display()))?;
        runs.push((
            name,
            summarize_run(&rs).with_context(|| format!("summarizing {}", path.display()))?,
        ));
    }
    let analysis = match labels {
        Some(dir) => {
            let mut records = Vec::new();
            for path in jsonl_files(dir)? {
                for (i, line) in fs::read_to_string(&path)?.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let r: RewardLabelRecord = serde_json::from_str(line)
                        .with_context(|| format!("{}:{}", path.display(), i + 1))?;
                    records.push(r);
                }
            }
            Some(reward_gap_records(&records)?)
        }
        None => None,
    };
    let format = match format {
        FormatArg::Json => ReportFormat::Json,
        FormatArg::Markdown => ReportFormat::Markdown,
    };
    let doc = emit_report(&runs, analysis.as_ref(), format);
    match out {
        Some(p) => {
            let mut w = create_file(p)?;
            w.write_all(doc.as_bytes())?;
            w.flush()?;
        }
        None => print!("{doc}"),
    }
    Ok(ExitCode::SUCCESS)
}
