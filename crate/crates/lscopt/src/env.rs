//! Reversible-action environments for k-cut and TSP.
//!
//! A state is a `(graph, solution)` pair with a cached objective. Actions
//! perturb the solution in place-free (value) fashion; the reward of an
//! action is the objective decrease it causes, so rewards telescope exactly:
//! the final objective equals the initial one minus the total reward.

use std::sync::Arc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{self, tag};
use crate::solution::{Action, ActionKind, Problem, Solution};

/// Within-cluster weight: sum of `w[i][j]` over unordered pairs with equal
/// labels. This is the minimized k-cut objective.
pub fn objective_kcut(g: &Graph, sol: &Solution) -> Result<f64> {
    let labels = sol.labels()?;
    if labels.len() != g.n() {
        return Err(Error::InvalidSolution(format!(
            "{} labels for {} nodes",
            labels.len(),
            g.n()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l < 1) {
        return Err(Error::InvalidSolution(format!("label {bad} below 1")));
    }
    let mut total = 0.0;
    for i in 0..g.n() {
        for &j in g.neighbors(i) {
            if j > i && labels[i] == labels[j] {
                total += g.weight(i, j);
            }
        }
    }
    Ok(total)
}

/// Cut value: total edge weight minus the within-cluster weight. Reported for
/// Max-Cut style "larger is better" comparisons.
pub fn cut_value(g: &Graph, sol: &Solution) -> Result<f64> {
    Ok(g.total_weight() - objective_kcut(g, sol)?)
}

/// Closed-tour length over the complete metric (coordinates when present).
pub fn objective_tsp(g: &Graph, sol: &Solution) -> Result<f64> {
    let perm = sol.tour()?;
    if perm.len() != g.n() {
        return Err(Error::InvalidSolution(format!(
            "tour of length {} for {} nodes",
            perm.len(),
            g.n()
        )));
    }
    let n = perm.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut len = g.dist(perm[n - 1], perm[0]);
    for k in 0..n - 1 {
        len += g.dist(perm[k], perm[k + 1]);
    }
    Ok(len)
}

/// Problem-dispatched minimized objective.
pub fn objective(g: &Graph, problem: &Problem, sol: &Solution) -> Result<f64> {
    match problem {
        Problem::KCut { .. } => objective_kcut(g, sol),
        Problem::Tsp => objective_tsp(g, sol),
    }
}

/// Checks that `a` is structurally applicable to `sol` under `problem`,
/// naming the violated constraint otherwise.
fn check_action(g: &Graph, problem: &Problem, sol: &Solution, a: &Action) -> Result<()> {
    match (problem, a) {
        (_, Action::Dummy) => Ok(()),
        (Problem::KCut { k, sizes }, Action::Flip { node, label }) => {
            if sizes.is_some() {
                return Err(Error::ConstraintViolation(
                    "cluster sizes are prescribed; flips would change the label counts".into(),
                ));
            }
            let labels = sol.labels()?;
            if *node >= labels.len() {
                return Err(Error::ConstraintViolation(format!("node {node} out of range")));
            }
            if *label < 1 || *label > *k {
                return Err(Error::ConstraintViolation(format!(
                    "target label {label} outside 1..={k}"
                )));
            }
            if labels[*node] == *label {
                return Err(Error::ConstraintViolation(
                    "flip must assign a different label".into(),
                ));
            }
            let _ = g;
            Ok(())
        }
        (Problem::KCut { .. }, Action::Swap { i, j }) => {
            let labels = sol.labels()?;
            if *i >= labels.len() || *j >= labels.len() || i == j {
                return Err(Error::ConstraintViolation(format!("bad swap pair ({i},{j})")));
            }
            if labels[*i] == labels[*j] {
                return Err(Error::ConstraintViolation(
                    "swap requires nodes with differing labels".into(),
                ));
            }
            Ok(())
        }
        (Problem::Tsp, Action::SeqSwap { i, j }) => {
            let n = sol.tour()?.len();
            if !(*i < *j && *j < n) {
                return Err(Error::ConstraintViolation(format!(
                    "segment positions must satisfy i < j < n, got ({i},{j}) with n={n}"
                )));
            }
            Ok(())
        }
        _ => Err(Error::ConstraintViolation(
            "action family does not apply to this problem".into(),
        )),
    }
}

/// Applies `a` to `sol`, returning the perturbed solution. `sol` is untouched.
pub fn apply_action(g: &Graph, problem: &Problem, sol: &Solution, a: &Action) -> Result<Solution> {
    check_action(g, problem, sol, a)?;
    let mut out = sol.clone();
    match (&mut out, a) {
        (_, Action::Dummy) => {}
        (Solution::KCutLabels(labels), Action::Flip { node, label }) => labels[*node] = *label,
        (Solution::KCutLabels(labels), Action::Swap { i, j }) => labels.swap(*i, *j),
        (Solution::TspTour(perm), Action::SeqSwap { i, j }) => perm[*i..=*j].reverse(),
        _ => unreachable!("checked above"),
    }
    Ok(out)
}

/// Reward of taking `a` at `(g, sol)`: old objective minus new objective,
/// computed incrementally from the touched edges only.
pub fn action_reward(g: &Graph, problem: &Problem, sol: &Solution, a: &Action) -> Result<f64> {
    check_action(g, problem, sol, a)?;
    Ok(match a {
        Action::Dummy => 0.0,
        Action::Flip { node, label } => {
            let labels = sol.labels()?;
            let old = labels[*node];
            let mut r = 0.0;
            for &u in g.neighbors(*node) {
                if labels[u] == old {
                    r += g.weight(*node, u);
                } else if labels[u] == *label {
                    r -= g.weight(*node, u);
                }
            }
            r
        }
        Action::Swap { i, j } => {
            let labels = sol.labels()?;
            let (la, lb) = (labels[*i], labels[*j]);
            let mut r = 0.0;
            for &u in g.neighbors(*i) {
                if u == *j {
                    continue; // the i-j edge crosses labels before and after
                }
                if labels[u] == la {
                    r += g.weight(*i, u);
                } else if labels[u] == lb {
                    r -= g.weight(*i, u);
                }
            }
            for &u in g.neighbors(*j) {
                if u == *i {
                    continue;
                }
                if labels[u] == lb {
                    r += g.weight(*j, u);
                } else if labels[u] == la {
                    r -= g.weight(*j, u);
                }
            }
            r
        }
        Action::SeqSwap { i, j } => {
            let perm = sol.tour()?;
            seq_swap_reward(g, perm, *i, *j)
        }
    })
}

/// Reversing `perm[i..=j]` replaces the boundary edges
/// `(i-1,i)` and `(j,j+1)` with `(i-1,j)` and `(i,j+1)` (cyclic positions);
/// no interior edge changes. Reversing the full tour is a no-op.
pub fn seq_swap_reward(g: &Graph, perm: &[usize], i: usize, j: usize) -> f64 {
    let n = perm.len();
    if i == 0 && j == n - 1 {
        return 0.0;
    }
    let prev = perm[(i + n - 1) % n];
    let next = perm[(j + 1) % n];
    let (a, b) = (perm[i], perm[j]);
    g.dist(prev, a) + g.dist(b, next) - g.dist(prev, b) - g.dist(a, next)
}

/// Enumerates the non-dummy actions of `kind`, in canonical order (the
/// deterministic tie-break order used everywhere).
pub fn actions_of_kind(
    problem: &Problem,
    sol: &Solution,
    kind: ActionKind,
) -> Result<Vec<Action>> {
    match (kind, problem) {
        (ActionKind::Flip, Problem::KCut { k, sizes }) => {
            if sizes.is_some() {
                return Err(Error::ConstraintViolation(
                    "cluster sizes are prescribed; flips are not legal".into(),
                ));
            }
            let labels = sol.labels()?;
            let mut out = Vec::with_capacity(labels.len() * (*k as usize - 1));
            for (v, &lv) in labels.iter().enumerate() {
                for c in 1..=*k {
                    if c != lv {
                        out.push(Action::Flip { node: v, label: c });
                    }
                }
            }
            Ok(out)
        }
        (ActionKind::Swap, Problem::KCut { .. }) => {
            let labels = sol.labels()?;
            let n = labels.len();
            let mut out = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if labels[i] != labels[j] {
                        out.push(Action::Swap { i, j });
                    }
                }
            }
            Ok(out)
        }
        (ActionKind::SeqSwap, Problem::Tsp) => {
            let n = sol.tour()?.len();
            let mut out = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in (i + 1)..n {
                    out.push(Action::SeqSwap { i, j });
                }
            }
            Ok(out)
        }
        _ => Err(Error::ConstraintViolation(
            "action family does not apply to this problem".into(),
        )),
    }
}

/// Random initial solution: uniform labels, a uniform shuffle of the
/// prescribed label multiset, or a uniform random tour.
pub fn init_solution(g: &Graph, problem: &Problem, seed: u64) -> Result<Solution> {
    problem.validate(g.n())?;
    let mut rng = rng::substream(seed, tag::INIT_SOLUTION, 0);
    Ok(match problem {
        Problem::KCut { k, sizes: None } => {
            Solution::KCutLabels((0..g.n()).map(|_| rng.gen_range(1..=*k)).collect())
        }
        Problem::KCut { sizes: Some(sizes), .. } => {
            let mut labels: Vec<u32> = Vec::with_capacity(g.n());
            for (idx, &count) in sizes.iter().enumerate() {
                labels.extend(std::iter::repeat(idx as u32 + 1).take(count));
            }
            labels.shuffle(&mut rng);
            Solution::KCutLabels(labels)
        }
        Problem::Tsp => {
            let mut perm: Vec<usize> = (0..g.n()).collect();
            perm.shuffle(&mut rng);
            Solution::TspTour(perm)
        }
    })
}

/// Default episode cap: twice the graph size.
pub fn default_max_steps(n: usize) -> usize {
    2 * n
}

static AUDIT_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Environment state: shared graph, current solution, cached objective and
/// step bookkeeping. Value semantics; `step` returns a fresh state.
#[derive(Debug, Clone)]
pub struct EnvState {
    graph: Arc<Graph>,
    problem: Problem,
    solution: Solution,
    objective: f64,
    steps_taken: usize,
    max_steps: usize,
    terminated: bool,
}

impl EnvState {
    pub fn new(
        graph: Arc<Graph>,
        problem: Problem,
        solution: Solution,
        max_steps: usize,
    ) -> Result<Self> {
        problem.validate(graph.n())?;
        solution.validate(&problem, graph.n())?;
        let objective = objective(&graph, &problem, &solution)?;
        Ok(EnvState { graph, problem, solution, objective, steps_taken: 0, max_steps, terminated: false })
    }

    pub fn graph(&self) -> &Arc<Graph> {
        &self.graph
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn solution(&self) -> &Solution {
        &self.solution
    }

    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn is_done(&self) -> bool {
        self.terminated || self.steps_taken >= self.max_steps
    }

    /// Legal actions of the problem's own action family, dummy last.
    pub fn legal_actions(&self) -> Vec<Action> {
        let mut out = self
            .actions_of_kind(self.problem.action_kind())
            .expect("problem's own action kind is always enumerable");
        out.push(Action::Dummy);
        out
    }

    /// Non-dummy actions of an explicit family (baselines may pick swaps on
    /// an unconstrained instance, for example).
    pub fn actions_of_kind(&self, kind: ActionKind) -> Result<Vec<Action>> {
        actions_of_kind(&self.problem, &self.solution, kind)
    }

    pub fn apply_action(&self, a: &Action) -> Result<Solution> {
        apply_action(&self.graph, &self.problem, &self.solution, a)
    }

    pub fn reward(&self, a: &Action) -> Result<f64> {
        action_reward(&self.graph, &self.problem, &self.solution, a)
    }

    /// Executes `a`: returns the successor state, the reward, and whether the
    /// episode is over (dummy taken or step cap reached).
    pub fn step(&self, a: &Action) -> Result<(EnvState, f64, bool)> {
        if self.is_done() {
            return Err(Error::Protocol("step called on a finished episode".into()));
        }
        let reward = self.reward(a)?;
        let solution = self.apply_action(a)?;
        let next = EnvState {
            graph: Arc::clone(&self.graph),
            problem: self.problem.clone(),
            solution,
            objective: self.objective - reward,
            steps_taken: self.steps_taken + 1,
            max_steps: self.max_steps,
            terminated: a.is_dummy(),
        };
        if cfg!(debug_assertions) {
            // Cached-objective audit on a sampled subset of steps.
            let tick = AUDIT_COUNTER.fetch_add(1, Ordering::Relaxed);
            if tick % 1000 == 0 {
                let full = objective(&next.graph, &next.problem, &next.solution)?;
                debug_assert!(
                    (full - next.objective).abs() <= 1e-9,
                    "cached objective {} drifted from recomputed {}",
                    next.objective,
                    full
                );
            }
        }
        let done = next.is_done();
        Ok((next, reward, done))
    }
}

/// One executed step, as written to trajectory logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub action: Action,
    pub reward: f64,
    pub objective: f64,
}

/// A complete rollout: the initial solution, every step, and the best
/// solution encountered along the way (local search reports its best visit,
/// not necessarily its last).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial: Solution,
    pub initial_objective: f64,
    pub steps: Vec<StepRecord>,
    pub final_solution: Solution,
    pub final_objective: f64,
    pub best_solution: Solution,
    pub best_objective: f64,
    /// Candidate Q evaluations per decision (empty for non-learned solvers).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub q_evals_per_decision: Vec<u64>,
}

impl Trajectory {
    pub fn start(state: &EnvState) -> Self {
        Trajectory {
            initial: state.solution().clone(),
            initial_objective: state.objective(),
            steps: Vec::new(),
            final_solution: state.solution().clone(),
            final_objective: state.objective(),
            best_solution: state.solution().clone(),
            best_objective: state.objective(),
            q_evals_per_decision: Vec::new(),
        }
    }

    pub fn record(&mut self, state: &EnvState, action: Action, reward: f64) {
        self.steps.push(StepRecord {
            t: state.steps_taken(),
            action,
            reward,
            objective: state.objective(),
        });
        self.final_solution = state.solution().clone();
        self.final_objective = state.objective();
        if state.objective() < self.best_objective {
            self.best_objective = state.objective();
            self.best_solution = state.solution().clone();
        }
    }

    /// Serializes the per-step log as JSON lines.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }
}
