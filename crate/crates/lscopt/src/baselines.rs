//! Classical comparators and exact oracles: greedy local search, 2-opt,
//! farthest insertion, and brute-force optima for small instances.

use std::sync::Arc;

use crate::env::{self, EnvState, Trajectory};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{self, tag};
use crate::solution::{Action, ActionKind, Problem, Solution};

/// Size bound for exact k-cut enumeration.
pub const KCUT_ORACLE_MAX_N: usize = 14;
/// Size bound for exact tour enumeration.
pub const TSP_ORACLE_MAX_N: usize = 10;
/// Default restart count for the best-of-greedy optimum proxy.
pub const DEFAULT_GREEDY_RESTARTS: usize = 20;

/// Steepest-descent local search: repeatedly take the single action of
/// `kind` with the largest strictly positive reward (ties toward the lower
/// action index) until none improves.
pub fn greedy_local_search(
    g: Arc<Graph>,
    problem: &Problem,
    initial: Solution,
    kind: ActionKind,
) -> Result<Trajectory> {
    // Local search runs to a local optimum; it is not subject to the episode
    // cap, so give it room (each step strictly improves, so it terminates).
    let mut state = EnvState::new(g, problem.clone(), initial, usize::MAX)?;
    let mut traj = Trajectory::start(&state);
    loop {
        let actions = state.actions_of_kind(kind)?;
        let mut best: Option<(f64, Action)> = None;
        for a in actions {
            let r = state.reward(&a)?;
            if r > 0.0 && best.map_or(true, |(br, _)| r > br) {
                best = Some((r, a));
            }
        }
        let Some((_, a)) = best else { break };
        let (next, reward, _) = state.step(&a)?;
        traj.record(&next, a, reward);
        state = next;
    }
    Ok(traj)
}

/// 2-opt tour improvement: greedy local search over segment reversals.
pub fn two_opt(g: Arc<Graph>, initial: Solution) -> Result<Trajectory> {
    initial.validate(&Problem::Tsp, g.n())?;
    greedy_local_search(g, &Problem::Tsp, initial, ActionKind::SeqSwap)
}

/// Farthest-insertion construction: start from the farthest pair, then
/// repeatedly insert the city farthest from the tour at the cheapest
/// position. Deterministic; ties break toward lower indices.
pub fn farthest_insertion(g: &Graph) -> Result<Solution> {
    let n = g.n();
    if n == 0 {
        return Err(Error::InvalidSpec("empty graph".into()));
    }
    if n == 1 {
        return Ok(Solution::TspTour(vec![0]));
    }
    // Seed pair: maximum distance.
    let (mut si, mut sj, mut best) = (0, 1, f64::NEG_INFINITY);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = g.dist(i, j);
            if d > best {
                (si, sj, best) = (i, j, d);
            }
        }
    }
    let mut tour = vec![si, sj];
    let mut in_tour = vec![false; n];
    in_tour[si] = true;
    in_tour[sj] = true;
    // dist_to_tour[v] = min distance from v to any tour node
    let mut dist_to_tour: Vec<f64> =
        (0..n).map(|v| g.dist(v, si).min(g.dist(v, sj))).collect();
    while tour.len() < n {
        // Farthest unvisited city.
        let (mut city, mut far) = (usize::MAX, f64::NEG_INFINITY);
        for v in 0..n {
            if !in_tour[v] && dist_to_tour[v] > far {
                (city, far) = (v, dist_to_tour[v]);
            }
        }
        // Cheapest insertion position (between tour[i] and tour[i+1]).
        let m = tour.len();
        let (mut pos, mut inc) = (0, f64::INFINITY);
        for i in 0..m {
            let a = tour[i];
            let b = tour[(i + 1) % m];
            let delta = g.dist(a, city) + g.dist(city, b) - g.dist(a, b);
            if delta < inc {
                (pos, inc) = (i, delta);
            }
        }
        tour.insert(pos + 1, city);
        in_tour[city] = true;
        for v in 0..n {
            if !in_tour[v] {
                dist_to_tour[v] = dist_to_tour[v].min(g.dist(v, city));
            }
        }
    }
    Ok(Solution::TspTour(tour))
}

/// Exact optimum. For k-cut this is the maximum cut value (total weight
/// minus the minimum within-cluster weight); for TSP the minimum tour
/// length. Refuses instances above the enumeration bounds.
pub fn brute_force_optimum(g: &Graph, problem: &Problem) -> Result<f64> {
    match problem {
        Problem::KCut { k, sizes } => {
            if g.n() > KCUT_ORACLE_MAX_N {
                return Err(Error::OracleBound(format!(
                    "k-cut enumeration capped at n = {KCUT_ORACLE_MAX_N}, instance has {}",
                    g.n()
                )));
            }
            let min_within = match sizes {
                None => kcut_min_unconstrained(g, *k),
                Some(sizes) => {
                    problem.validate(g.n())?;
                    kcut_min_sized(g, *k, sizes)?
                }
            };
            Ok(g.total_weight() - min_within)
        }
        Problem::Tsp => {
            if g.n() > TSP_ORACLE_MAX_N {
                return Err(Error::OracleBound(format!(
                    "tour enumeration capped at n = {TSP_ORACLE_MAX_N}, instance has {}",
                    g.n()
                )));
            }
            Ok(tsp_min_tour(g))
        }
    }
}

fn kcut_min_unconstrained(g: &Graph, k: u32) -> f64 {
    let n = g.n();
    if n == 0 {
        return 0.0;
    }
    // Label permutations are symmetric: pin node 0 to label 1.
    let mut labels = vec![1u32; n];
    let mut best = f64::INFINITY;
    fn rec(g: &Graph, labels: &mut Vec<u32>, v: usize, k: u32, best: &mut f64) {
        if v == labels.len() {
            let sol = Solution::KCutLabels(labels.clone());
            let o = env::objective_kcut(g, &sol).expect("labels valid");
            if o < *best {
                *best = o;
            }
            return;
        }
        for c in 1..=k {
            labels[v] = c;
            rec(g, labels, v + 1, k, best);
        }
        labels[v] = 1;
    }
    rec(g, &mut labels, 1, k, &mut best);
    best
}

fn kcut_min_sized(g: &Graph, k: u32, sizes: &[usize]) -> Result<f64> {
    let n = g.n();
    let mut remaining: Vec<usize> = sizes.to_vec();
    let mut labels = vec![0u32; n];
    let mut best = f64::INFINITY;
    // Guard against multinomial blowups within the n bound.
    let mut estimate: f64 = 1.0;
    let mut assigned = 0usize;
    for &s in sizes {
        for i in 0..s {
            estimate *= (assigned + i + 1) as f64 / (i + 1) as f64;
        }
        assigned += s;
    }
    if estimate > 6e6 {
        return Err(Error::OracleBound(format!(
            "sized k-cut enumeration would visit ~{estimate:.0} assignments"
        )));
    }
    fn rec(
        g: &Graph,
        labels: &mut Vec<u32>,
        remaining: &mut Vec<usize>,
        v: usize,
        k: u32,
        best: &mut f64,
    ) {
        if v == labels.len() {
            let sol = Solution::KCutLabels(labels.clone());
            let o = env::objective_kcut(g, &sol).expect("labels valid");
            if o < *best {
                *best = o;
            }
            return;
        }
        for c in 0..k as usize {
            if remaining[c] > 0 {
                remaining[c] -= 1;
                labels[v] = c as u32 + 1;
                rec(g, labels, remaining, v + 1, k, best);
                remaining[c] += 1;
            }
        }
        labels[v] = 0;
    }
    rec(g, &mut labels, &mut remaining, 0, k, &mut best);
    Ok(best)
}

fn tsp_min_tour(g: &Graph) -> f64 {
    let n = g.n();
    if n < 3 {
        let sol = Solution::TspTour((0..n).collect());
        return env::objective_tsp(g, &sol).expect("valid tour");
    }
    // Fix the first city; halve by orientation (second < last).
    let mut rest: Vec<usize> = (1..n).collect();
    let mut best = f64::INFINITY;
    fn rec(g: &Graph, prefix: &mut Vec<usize>, rest: &mut Vec<usize>, best: &mut f64) {
        if rest.is_empty() {
            if prefix[1] < prefix[prefix.len() - 1] {
                let sol = Solution::TspTour(prefix.clone());
                let len = env::objective_tsp(g, &sol).expect("valid tour");
                if len < *best {
                    *best = len;
                }
            }
            return;
        }
        for i in 0..rest.len() {
            let city = rest.remove(i);
            prefix.push(city);
            rec(g, prefix, rest, best);
            prefix.pop();
            rest.insert(i, city);
        }
    }
    let mut prefix = vec![0];
    rec(g, &mut prefix, &mut rest, &mut best);
    best
}

/// Best objective over `restarts` greedy runs from random initial solutions;
/// the optimum proxy for instances beyond the exact oracles. Returns the
/// minimized objective.
pub fn best_of_greedy(
    g: &Arc<Graph>,
    problem: &Problem,
    kind: ActionKind,
    restarts: usize,
    seed: u64,
) -> Result<f64> {
    let mut best = f64::INFINITY;
    for r in 0..restarts {
        let init = env::init_solution(g, problem, rng::mix(seed, tag::BASELINE, r as u64))?;
        let traj = greedy_local_search(Arc::clone(g), problem, init, kind)?;
        best = best.min(traj.best_objective);
    }
    Ok(best)
}

/// Reference objective for ratio reporting: the exact optimum when the
/// instance is within oracle bounds, otherwise the best-of-greedy proxy.
/// Returns `(reference, kind_tag)` where the reference is a cut value for
/// cut problems and a tour length for TSP.
pub fn reference_objective(
    g: &Arc<Graph>,
    problem: &Problem,
    restarts: usize,
    seed: u64,
) -> Result<(f64, &'static str)> {
    match brute_force_optimum(g, problem) {
        Ok(opt) => Ok((opt, "brute_force")),
        Err(Error::OracleBound(_)) => {
            let kind = problem.action_kind();
            let best = best_of_greedy(g, problem, kind, restarts, seed)?;
            let reference = match problem {
                Problem::KCut { .. } => g.total_weight() - best,
                Problem::Tsp => best,
            };
            Ok((reference, "best_of_greedy"))
        }
        Err(e) => Err(e),
    }
}
