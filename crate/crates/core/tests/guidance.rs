//! End-to-end sim pipeline: collect with a random scorer, label, build the
//! dataset, train, then compare guided runs.

use std::collections::BTreeMap;

use shepherd_core::analytics::summarize_run;
use shepherd_core::dataset::{build_dataset, ContextConfig};
use shepherd_core::environment::{
    generate_sim_suite, EnvConfig, EnvError, Environment, SimEnvironment, SimTask,
};
use shepherd_core::episode::{run_batch, run_unguided, EpisodeConfig, EpisodeResult};
use shepherd_core::model::{validate_trajectory, Task, TaskIndex};
use shepherd_core::policy::SimOraclePolicy;
use shepherd_core::reward::{label_trajectory, RewardConfig};
use shepherd_core::scorer::{
    train_feature_scorer, FeatureScorer, RandomScorer, Scorer, TrainConfig,
};

fn run(
    tasks: &[Task],
    sims: &BTreeMap<String, SimTask>,
    seed: u64,
    scorer: &dyn Scorer,
    k: usize,
) -> Vec<EpisodeResult> {
    let policy = SimOraclePolicy::with_distractors(sims.clone(), seed);
    let factory = |t: &Task| -> Result<Box<dyn Environment>, EnvError> {
        Ok(Box::new(SimEnvironment::new(
            sims[&t.task_id].clone(),
            EnvConfig::default(),
        )))
    };
    let cfg = EpisodeConfig {
        budget: 30,
        k,
        context: ContextConfig::default(),
    };
    run_batch(tasks, &policy, scorer, &factory, &cfg, 4).unwrap()
}

fn median_steps(rs: &[EpisodeResult]) -> f64 {
    let mut v: Vec<f64> = rs
        .iter()
        .map(|r| {
            if r.resolved {
                r.steps_used as f64
            } else {
                f64::INFINITY
            }
        })
        .collect();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn trained_scorer() -> FeatureScorer {
    let (tasks, sims) = generate_sim_suite(1000..1200);
    let collected = run(&tasks, &sims, 99, &RandomScorer { seed: 99 }, 2);
    let index = TaskIndex::new(tasks).unwrap();
    let mut labeled: Vec<_> = collected
        .iter()
        .map(|r| {
            let task = index.get(&r.task_id).unwrap();
            assert!(validate_trajectory(&r.trajectory, task, 30).is_empty());
            (
                r.trajectory.clone(),
                label_trajectory(&r.trajectory, task, &RewardConfig::default(), 30).unwrap(),
            )
        })
        .collect();
    let (samples, stats) = build_dataset(&mut labeled, &index, &ContextConfig::default()).unwrap();
    assert_eq!((stats.label_min, stats.label_max), (0.0, 1.0));
    FeatureScorer::new(train_feature_scorer(&samples, &TrainConfig::default()).unwrap()).unwrap()
}

#[test]
fn trained_scorer_beats_random_guidance() {
    let scorer = trained_scorer();
    let (tasks, sims) = generate_sim_suite(5000..5030);
    let guided = run(&tasks, &sims, 1, &scorer, 2);
    let random = run(&tasks, &sims, 1, &RandomScorer { seed: 1 }, 2);
    let g = summarize_run(&guided).unwrap();
    let r = summarize_run(&random).unwrap();
    assert!(
        g.resolved_rate >= r.resolved_rate,
        "{} < {}",
        g.resolved_rate,
        r.resolved_rate
    );
    assert!(median_steps(&guided) < median_steps(&random));
    for res in guided.iter().chain(&random) {
        assert!(res.steps_used <= 30);
        for e in &res.selection_log {
            assert_eq!(e.scores.len(), e.candidates.len());
        }
    }
}

#[test]
fn single_candidate_runs_match_unguided_agent() {
    let (tasks, sims) = generate_sim_suite(7000..7020);
    let guided = run(&tasks, &sims, 4, &RandomScorer { seed: 2 }, 1);
    let policy = SimOraclePolicy::with_distractors(sims.clone(), 4);
    for (task, g) in tasks.iter().zip(&guided) {
        let mut env = SimEnvironment::new(sims[&task.task_id].clone(), EnvConfig::default());
        let u = run_unguided(task, &policy, &mut env, 30);
        assert_eq!(g.trajectory.steps, u.trajectory.steps);
        assert_eq!(g.resolved, u.resolved);
    }
}
