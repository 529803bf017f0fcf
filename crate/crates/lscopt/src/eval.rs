//! Metrics, trajectory statistics, and experiment drivers emitting CSV/JSON
//! artifacts.
//!
//! Ratios are computed against exact optima when an instance fits the
//! enumeration oracles and against the best-of-greedy proxy otherwise; every
//! emitted row records which reference was used. Wall-clock columns are
//! written as 0 unless timing is explicitly enabled, keeping identical runs
//! byte-identical.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use crate::agent::{self, EvalInstance, InstanceSource, TrainConfig, TrainResult};
use crate::baselines;
use crate::env::{self, Trajectory};
use crate::error::{Error, Result};
use crate::gen::{self, GenSpec};
use crate::graph::Graph;
use crate::model::ModelParams;
use crate::rng::{self, tag};
use crate::solution::{Action, Problem, Solution};

/// Whether a reported ratio improves upward or downward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    LargerBetter,
    SmallerBetter,
}

impl Direction {
    pub fn for_problem(problem: &Problem) -> Self {
        match problem {
            Problem::KCut { .. } => Direction::LargerBetter,
            Problem::Tsp => Direction::SmallerBetter,
        }
    }
}

/// `achieved / reference`. The direction tag records the reporting
/// convention; the formula is the same either way.
pub fn approx_ratio(achieved: f64, reference: f64, _direction: Direction) -> f64 {
    achieved / reference
}

/// A replayable episode plus the reference value its ratios are computed
/// against (a cut value for cut problems, a tour length for TSP).
#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub graph: Arc<Graph>,
    pub problem: Problem,
    pub initial: Solution,
    pub actions: Vec<Action>,
    pub reference: f64,
}

impl EpisodeTrace {
    pub fn from_trajectory(
        graph: Arc<Graph>,
        problem: Problem,
        traj: &Trajectory,
        reference: f64,
    ) -> Self {
        EpisodeTrace {
            graph,
            problem,
            initial: traj.initial.clone(),
            actions: traj.steps.iter().map(|s| s.action).collect(),
            reference,
        }
    }
}

/// Per-normalized-time statistics over a set of episodes, on a 100-point
/// grid with nearest-step assignment.
#[derive(Debug, Clone)]
pub struct TrajectoryStats {
    pub grid: Vec<f64>,
    pub mean_ratio: Vec<f64>,
    pub greedy_frequency: Vec<f64>,
    pub local_min_frequency: Vec<f64>,
}

pub const STATS_GRID_POINTS: usize = 100;

/// Replays each episode and aggregates, at each normalized-time grid point:
/// the mean approximation ratio, how often the executed action was a greedy
/// move (maximum immediate reward), and how often the visited state was a
/// local minimum (no strictly improving action).
pub fn trajectory_stats(episodes: &[EpisodeTrace]) -> Result<TrajectoryStats> {
    if episodes.is_empty() {
        return Err(Error::Protocol("trajectory statistics need at least one episode".into()));
    }
    let grid: Vec<f64> =
        (0..STATS_GRID_POINTS).map(|i| i as f64 / (STATS_GRID_POINTS - 1) as f64).collect();
    let mut ratio_sum = vec![0.0; STATS_GRID_POINTS];
    let mut local_sum = vec![0.0; STATS_GRID_POINTS];
    let mut greedy_sum = vec![0.0; STATS_GRID_POINTS];
    let mut greedy_count = vec![0usize; STATS_GRID_POINTS];

    for ep in episodes {
        let kind = ep.problem.action_kind();
        let total_steps = ep.actions.len();
        // Replay: per state the reported metric and the local-minimum flag;
        // per executed action whether it was a greedy move.
        let mut metric = Vec::with_capacity(total_steps + 1);
        let mut local_min = Vec::with_capacity(total_steps + 1);
        let mut greedy = Vec::with_capacity(total_steps);
        let mut sol = ep.initial.clone();
        let mut objective = env::objective(&ep.graph, &ep.problem, &sol)?;
        let total_weight = ep.graph.total_weight();
        let report = |obj: f64| match ep.problem {
            Problem::KCut { .. } => total_weight - obj,
            Problem::Tsp => obj,
        };
        let scan_best = |sol: &Solution| -> Result<f64> {
            let mut best = f64::NEG_INFINITY;
            for a in env::actions_of_kind(&ep.problem, sol, kind)? {
                best = best.max(env::action_reward(&ep.graph, &ep.problem, sol, &a)?);
            }
            Ok(best)
        };
        let mut best_reward = scan_best(&sol)?;
        metric.push(report(objective));
        local_min.push(best_reward <= 0.0);
        for a in &ep.actions {
            let r = env::action_reward(&ep.graph, &ep.problem, &sol, a)?;
            greedy.push(r == best_reward || a.is_dummy() && best_reward <= 0.0);
            sol = env::apply_action(&ep.graph, &ep.problem, &sol, a)?;
            objective -= r;
            best_reward = scan_best(&sol)?;
            metric.push(report(objective));
            local_min.push(best_reward <= 0.0);
        }

        for (gi, &gpoint) in grid.iter().enumerate() {
            let state_idx = (gpoint * total_steps as f64).round() as usize;
            ratio_sum[gi] += metric[state_idx] / ep.reference;
            local_sum[gi] += if local_min[state_idx] { 1.0 } else { 0.0 };
            if total_steps > 0 {
                let action_idx = state_idx.clamp(1, total_steps);
                greedy_sum[gi] += if greedy[action_idx - 1] { 1.0 } else { 0.0 };
                greedy_count[gi] += 1;
            }
        }
    }

    let n = episodes.len() as f64;
    Ok(TrajectoryStats {
        grid,
        mean_ratio: ratio_sum.into_iter().map(|x| x / n).collect(),
        greedy_frequency: greedy_sum
            .into_iter()
            .zip(greedy_count)
            .map(|(s, c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect(),
        local_min_frequency: local_sum.into_iter().map(|x| x / n).collect(),
    })
}

pub fn trajectory_stats_to_csv(stats: &TrajectoryStats) -> String {
    let mut out = String::from("t,mean_approx_ratio,greedy_frequency,local_min_frequency\n");
    for i in 0..stats.grid.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            stats.grid[i], stats.mean_ratio[i], stats.greedy_frequency[i], stats.local_min_frequency[i]
        ));
    }
    out
}

/// Solver selector shared by the CLI and the experiment drivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Agent,
    Greedy,
    TwoOpt,
    FarthestInsertion,
    Random,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "agent" => Method::Agent,
            "greedy" => Method::Greedy,
            "two-opt" => Method::TwoOpt,
            "farthest-insertion" => Method::FarthestInsertion,
            "random" => Method::Random,
            other => {
                return Err(Error::Config(format!(
                    "unknown method '{other}' (expected agent|greedy|two-opt|farthest-insertion|random)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Agent => "agent",
            Method::Greedy => "greedy",
            Method::TwoOpt => "two-opt",
            Method::FarthestInsertion => "farthest-insertion",
            Method::Random => "random",
        }
    }
}

/// One solver run on one instance.
pub struct MethodOutcome {
    /// Best minimized objective encountered.
    pub objective: f64,
    pub steps: usize,
    pub trajectory: Option<Trajectory>,
}

/// Runs `method` on one instance from a seeded random initial solution.
pub fn run_method(
    method: Method,
    g: &Arc<Graph>,
    problem: &Problem,
    params: Option<&ModelParams>,
    reserve: f64,
    seed: u64,
) -> Result<MethodOutcome> {
    match method {
        Method::Agent => {
            let params =
                params.ok_or_else(|| Error::Config("method 'agent' needs a checkpoint".into()))?;
            let init = env::init_solution(g, problem, seed)?;
            let traj = agent::solve_with_policy(
                params,
                Arc::clone(g),
                problem,
                init,
                env::default_max_steps(g.n()),
                reserve,
                seed,
            )?;
            Ok(MethodOutcome {
                objective: traj.best_objective,
                steps: traj.steps.len(),
                trajectory: Some(traj),
            })
        }
        Method::Greedy => {
            let init = env::init_solution(g, problem, seed)?;
            let traj = baselines::greedy_local_search(
                Arc::clone(g),
                problem,
                init,
                problem.action_kind(),
            )?;
            Ok(MethodOutcome {
                objective: traj.best_objective,
                steps: traj.steps.len(),
                trajectory: Some(traj),
            })
        }
        Method::TwoOpt => {
            if !matches!(problem, Problem::Tsp) {
                return Err(Error::Config("two-opt applies to TSP instances".into()));
            }
            let init = env::init_solution(g, problem, seed)?;
            let traj = baselines::two_opt(Arc::clone(g), init)?;
            Ok(MethodOutcome {
                objective: traj.best_objective,
                steps: traj.steps.len(),
                trajectory: Some(traj),
            })
        }
        Method::FarthestInsertion => {
            if !matches!(problem, Problem::Tsp) {
                return Err(Error::Config("farthest insertion applies to TSP instances".into()));
            }
            let sol = baselines::farthest_insertion(g)?;
            let obj = env::objective(g, problem, &sol)?;
            Ok(MethodOutcome { objective: obj, steps: g.n(), trajectory: None })
        }
        Method::Random => {
            let sol = env::init_solution(g, problem, seed)?;
            let obj = env::objective(g, problem, &sol)?;
            Ok(MethodOutcome { objective: obj, steps: 0, trajectory: None })
        }
    }
}

/// One line of a results table.
#[derive(Debug, Clone)]
pub struct ResultsRow {
    pub instance_id: usize,
    pub method: String,
    pub objective: f64,
    pub approx_ratio: f64,
    pub steps: usize,
    pub wall_ms: u64,
    pub reference_kind: String,
}

/// The pinned six-column results CSV.
pub fn results_to_csv(rows: &[ResultsRow]) -> String {
    let mut out = String::from("instance_id,method,objective,approx_ratio,steps,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.instance_id, r.method, r.objective, r.approx_ratio, r.steps, r.wall_ms
        ));
    }
    out
}

/// Results CSV extended with the reference kind used for each ratio.
pub fn results_to_csv_with_reference(rows: &[ResultsRow]) -> String {
    let mut out =
        String::from("instance_id,method,objective,approx_ratio,steps,wall_ms,reference\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.instance_id, r.method, r.objective, r.approx_ratio, r.steps, r.wall_ms, r.reference_kind
        ));
    }
    out
}

/// Worker cap: `LSCOPT_THREADS` when set, otherwise available parallelism.
pub fn thread_count(items: usize) -> usize {
    let cap = std::env::var("LSCOPT_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    cap.min(items.max(1))
}

/// Index-ordered parallel map over `0..count`; results come back in index
/// order regardless of scheduling.
pub fn parallel_map<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = thread_count(count);
    if workers <= 1 || count <= 1 {
        return (0..count).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<T>> = (0..count).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= count {
                            break;
                        }
                        local.push((i, f(i)));
                    }
                    local
                })
            })
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("all indices visited")).collect()
}

/// Test-instance recipe: the generator template is re-seeded per instance
/// from the experiment seed.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub template: GenSpec,
    pub count: usize,
}

impl TestSet {
    pub fn instances(&self, seed: u64) -> Result<Vec<Arc<Graph>>> {
        (0..self.count)
            .map(|i| {
                let mut spec = self.template.clone();
                spec.seed = rng::mix(seed, tag::EVAL_INSTANCE, i as u64);
                Ok(Arc::new(gen::generate(&spec)?))
            })
            .collect()
    }
}

/// Shared experiment settings.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub train_template: GenSpec,
    pub train: TrainConfig,
    pub test: TestSet,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub greedy_restarts: usize,
    pub timings: bool,
}

fn reference_for(
    g: &Arc<Graph>,
    problem: &Problem,
    restarts: usize,
    seed: u64,
) -> Result<(f64, String)> {
    let (r, kind) = baselines::reference_objective(g, problem, restarts, seed)?;
    Ok((r, kind.to_string()))
}

fn timed<T>(enabled: bool, f: impl FnOnce() -> T) -> (T, u64) {
    if enabled {
        let start = Instant::now();
        let out = f();
        (out, start.elapsed().as_millis() as u64)
    } else {
        (f(), 0)
    }
}

/// Trains once, then scores every method on held-out instances.
/// Returns `(rows, train_result)`; rows are sorted by instance then method.
pub fn run_quality_experiment(cfg: &ExperimentConfig) -> Result<(Vec<ResultsRow>, TrainResult)> {
    let instances = cfg.test.instances(cfg.seed)?;
    let references: Vec<(f64, String)> = {
        let refs = parallel_map(instances.len(), |i| {
            reference_for(&instances[i], &cfg.problem, cfg.greedy_restarts, rng::mix(cfg.seed, tag::BASELINE, i as u64))
        });
        refs.into_iter().collect::<Result<Vec<_>>>()?
    };
    let eval: Vec<EvalInstance> = instances
        .iter()
        .zip(&references)
        .map(|(g, (r, _))| EvalInstance { graph: Arc::clone(g), reference: *r })
        .collect();
    let needs_agent = cfg.methods.contains(&Method::Agent);
    let trained = if needs_agent {
        agent::train(
            &cfg.train,
            &InstanceSource::Generator(cfg.train_template.clone()),
            &cfg.problem,
            &eval,
        )?
    } else {
        // No learned method requested: skip training, keep an inert result.
        let mut quick = cfg.train.clone();
        quick.epochs = 1;
        quick.batch = usize::MAX / 2;
        quick.eval_every = 0;
        agent::train(
            &quick,
            &InstanceSource::Generator(cfg.train_template.clone()),
            &cfg.problem,
            &[],
        )?
    };
    let rows = score_methods(cfg, &instances, &references, Some(&trained.params))?;
    Ok((rows, trained))
}

fn score_methods(
    cfg: &ExperimentConfig,
    instances: &[Arc<Graph>],
    references: &[(f64, String)],
    params: Option<&ModelParams>,
) -> Result<Vec<ResultsRow>> {
    let tasks: Vec<(usize, Method)> = (0..instances.len())
        .flat_map(|i| cfg.methods.iter().map(move |&m| (i, m)))
        .collect();
    let rows = parallel_map(tasks.len(), |t| -> Result<ResultsRow> {
        let (i, method) = tasks[t];
        let g = &instances[i];
        let (reference, ref_kind) = &references[i];
        let seed = rng::mix(cfg.seed, tag::EVAL_INIT, i as u64);
        let (outcome, wall_ms) = timed(cfg.timings, || {
            run_method(method, g, &cfg.problem, params, cfg.train.reserve_ratio, seed)
        });
        let outcome = outcome?;
        let achieved = match cfg.problem {
            Problem::KCut { .. } => g.total_weight() - outcome.objective,
            Problem::Tsp => outcome.objective,
        };
        Ok(ResultsRow {
            instance_id: i,
            method: method.name().to_string(),
            objective: achieved,
            approx_ratio: approx_ratio(
                achieved,
                *reference,
                Direction::for_problem(&cfg.problem),
            ),
            steps: outcome.steps,
            wall_ms,
            reference_kind: ref_kind.clone(),
        })
    });
    let mut rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| (a.instance_id, &a.method).cmp(&(b.instance_id, &b.method)));
    Ok(rows)
}

/// Generalization row: a quality row at an explicit test size.
#[derive(Debug, Clone)]
pub struct GeneralizationRow {
    pub test_n: usize,
    pub row: ResultsRow,
}

pub fn generalization_to_csv(rows: &[GeneralizationRow]) -> String {
    let mut out = String::from(
        "test_n,instance_id,method,objective,approx_ratio,steps,wall_ms,reference\n",
    );
    for g in rows {
        let r = &g.row;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            g.test_n, r.instance_id, r.method, r.objective, r.approx_ratio, r.steps, r.wall_ms, r.reference_kind
        ));
    }
    out
}

/// Trains at the configured size, then evaluates on larger sizes without
/// retraining.
pub fn run_generalization(
    cfg: &ExperimentConfig,
    test_sizes: &[usize],
) -> Result<(Vec<GeneralizationRow>, TrainResult)> {
    let trained = agent::train(
        &cfg.train,
        &InstanceSource::Generator(cfg.train_template.clone()),
        &cfg.problem,
        &[],
    )?;
    let mut all = Vec::new();
    for &n in test_sizes {
        let mut template = cfg.test.template.clone();
        match &mut template.kind {
            gen::GenKind::Uniform { n: size } => *size = n,
            gen::GenKind::KClustered { m, k, sigmas } => {
                // Scale cluster population; keep k and sigma structure.
                *m = (n / (*k).max(1)).max(1);
                let _ = sigmas;
            }
        }
        let set = TestSet { template, count: cfg.test.count };
        let instances = set.instances(rng::mix(cfg.seed, tag::EVAL_INSTANCE, n as u64))?;
        let references: Vec<(f64, String)> = parallel_map(instances.len(), |i| {
            reference_for(
                &instances[i],
                &cfg.problem,
                cfg.greedy_restarts,
                rng::mix(cfg.seed, tag::BASELINE, (n * 1000 + i) as u64),
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let rows = score_methods(cfg, &instances, &references, Some(&trained.params))?;
        all.extend(rows.into_iter().map(|row| GeneralizationRow { test_n: n, row }));
    }
    Ok((all, trained))
}

/// One reserve-ratio setting in the efficiency/accuracy trade-off table.
#[derive(Debug, Clone)]
pub struct TradeoffRow {
    pub epsilon: f64,
    pub mean_approx_ratio: f64,
    pub mean_q_evals_per_decision: f64,
    pub decisions: usize,
    pub wall_ms: u64,
}

pub fn tradeoff_to_csv(rows: &[TradeoffRow]) -> String {
    let mut out =
        String::from("epsilon,mean_approx_ratio,mean_q_evals_per_decision,decisions,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epsilon, r.mean_approx_ratio, r.mean_q_evals_per_decision, r.decisions, r.wall_ms
        ));
    }
    out
}

/// Trains once, then replays the test set under each reserve ratio,
/// recording solution quality and candidate-evaluation counts per decision.
pub fn run_tradeoff(
    cfg: &ExperimentConfig,
    epsilons: &[f64],
) -> Result<(Vec<TradeoffRow>, TrainResult)> {
    if epsilons.is_empty() {
        return Err(Error::Config("tradeoff experiment needs at least one epsilon".into()));
    }
    let instances = cfg.test.instances(cfg.seed)?;
    let references: Vec<(f64, String)> = parallel_map(instances.len(), |i| {
        reference_for(&instances[i], &cfg.problem, cfg.greedy_restarts, rng::mix(cfg.seed, tag::BASELINE, i as u64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let trained = agent::train(
        &cfg.train,
        &InstanceSource::Generator(cfg.train_template.clone()),
        &cfg.problem,
        &[],
    )?;
    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let outcomes = parallel_map(instances.len(), |i| -> Result<(f64, Vec<u64>, u64)> {
            let g = &instances[i];
            let seed = rng::mix(cfg.seed, tag::EVAL_INIT, i as u64);
            let init = env::init_solution(g, &cfg.problem, seed)?;
            let (traj, wall) = timed(cfg.timings, || {
                agent::solve_with_policy(
                    &trained.params,
                    Arc::clone(g),
                    &cfg.problem,
                    init,
                    env::default_max_steps(g.n()),
                    eps,
                    seed,
                )
            });
            let traj = traj?;
            let achieved = match cfg.problem {
                Problem::KCut { .. } => g.total_weight() - traj.best_objective,
                Problem::Tsp => traj.best_objective,
            };
            let ratio = achieved / references[i].0;
            Ok((ratio, traj.q_evals_per_decision, wall))
        });
        let mut ratio_sum = 0.0;
        let mut evals: Vec<u64> = Vec::new();
        let mut wall_total = 0u64;
        let mut count = 0usize;
        for o in outcomes {
            let (ratio, ev, wall) = o?;
            ratio_sum += ratio;
            evals.extend(ev);
            wall_total += wall;
            count += 1;
        }
        let decisions = evals.len();
        rows.push(TradeoffRow {
            epsilon: eps,
            mean_approx_ratio: if count == 0 { f64::NAN } else { ratio_sum / count as f64 },
            mean_q_evals_per_decision: if decisions == 0 {
                0.0
            } else {
                evals.iter().sum::<u64>() as f64 / decisions as f64
            },
            decisions,
            wall_ms: wall_total,
        });
    }
    Ok((rows, trained))
}

/// Deterministic experiment manifest: the command plus every setting that
/// shaped the run, sorted by key.
pub fn manifest_json(command: &str, settings: &BTreeMap<String, String>) -> Result<String> {
    #[derive(serde::Serialize)]
    struct Manifest<'a> {
        command: &'a str,
        settings: &'a BTreeMap<String, String>,
    }
    Ok(serde_json::to_string_pretty(&Manifest { command, settings })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::greedy_local_search;
    use crate::solution::ActionKind;

    #[test]
    fn approx_ratio_is_plain_division() {
        assert!((approx_ratio(4.16, 4.0, Direction::LargerBetter) - 1.04).abs() < 1e-12);
        assert_eq!(approx_ratio(5.0, 5.0, Direction::SmallerBetter), 1.0);
        // moving achieved toward reference moves the ratio toward 1
        let worse = approx_ratio(6.0, 5.0, Direction::SmallerBetter);
        let better = approx_ratio(5.5, 5.0, Direction::SmallerBetter);
        assert!(better < worse && better > 1.0);
    }

    #[test]
    fn greedy_trajectories_have_unit_greedy_frequency() {
        let mut episodes = Vec::new();
        for seed in 0..5 {
            let spec = GenSpec::uniform(6, 2, 5, seed);
            let g = Arc::new(gen::generate(&spec).unwrap());
            let problem = Problem::max_cut();
            let init = env::init_solution(&g, &problem, seed).unwrap();
            let traj =
                greedy_local_search(Arc::clone(&g), &problem, init, ActionKind::Flip).unwrap();
            if traj.steps.is_empty() {
                continue;
            }
            let reference = baselines::brute_force_optimum(&g, &problem).unwrap();
            episodes.push(EpisodeTrace::from_trajectory(g, problem, &traj, reference));
        }
        assert!(!episodes.is_empty());
        let stats = trajectory_stats(&episodes).unwrap();
        for (i, &f) in stats.greedy_frequency.iter().enumerate() {
            assert!((f - 1.0).abs() < 1e-12, "grid point {i}: greedy freq {f}");
        }
        // greedy terminates in a local minimum
        let last = *stats.local_min_frequency.last().unwrap();
        assert_eq!(last, 1.0);
        // last bucket's ratio equals the mean final ratio
        let want: f64 = episodes
            .iter()
            .map(|ep| {
                let mut sol = ep.initial.clone();
                for a in &ep.actions {
                    sol = env::apply_action(&ep.graph, &ep.problem, &sol, a).unwrap();
                }
                env::cut_value(&ep.graph, &sol).unwrap() / ep.reference
            })
            .sum::<f64>()
            / episodes.len() as f64;
        assert!((stats.mean_ratio.last().unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn single_step_episode_maps_to_last_bucket() {
        let g = Arc::new(
            Graph::from_coords(4, 2, vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap(),
        );
        let problem = Problem::Tsp;
        let traj = baselines::two_opt(Arc::clone(&g), Solution::TspTour(vec![0, 2, 1, 3])).unwrap();
        assert_eq!(traj.steps.len(), 1);
        let reference = baselines::brute_force_optimum(&g, &problem).unwrap();
        let ep = EpisodeTrace::from_trajectory(g, problem, &traj, reference);
        let stats = trajectory_stats(&[ep]).unwrap();
        // the final bucket reflects the post-step tour (ratio 1.0 here)
        assert!((stats.mean_ratio.last().unwrap() - 1.0).abs() < 1e-12);
        // the first bucket reflects the crossed initial tour
        assert!(stats.mean_ratio[0] > 1.2);
        // 2-opt's terminal state is a local minimum
        assert_eq!(*stats.local_min_frequency.last().unwrap(), 1.0);
    }

    #[test]
    fn empty_episode_set_is_protocol_error() {
        assert!(matches!(trajectory_stats(&[]), Err(Error::Protocol(_))));
    }

    #[test]
    fn parallel_map_preserves_order() {
        let out = parallel_map(37, |i| i * i);
        assert_eq!(out, (0..37).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn results_csv_shapes() {
        let rows = vec![ResultsRow {
            instance_id: 0,
            method: "greedy".into(),
            objective: 4.25,
            approx_ratio: 0.97,
            steps: 6,
            wall_ms: 0,
            reference_kind: "brute_force".into(),
        }];
        let csv = results_to_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), "instance_id,method,objective,approx_ratio,steps,wall_ms");
        assert!(csv.contains("0,greedy,4.25,0.97,6,0"));
        let csv = results_to_csv_with_reference(&rows);
        assert!(csv.contains("brute_force"));
    }
}
