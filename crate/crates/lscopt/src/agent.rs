//! N-step Q-learning with a target network, experience replay, an
//! epsilon-greedy exploration schedule, and proposal-based action
//! elimination.
//!
//! Each epoch samples a fresh instance, rolls one episode with the current
//! policy, flushes N-step transitions (including truncated episode-tail
//! tuples with terminal targets) into the replay ring, then takes one
//! gradient step on the Q loss and one on the proposal loss, synchronizing
//! the target network every `target_sync` update rounds.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvState, Trajectory};
use crate::error::{Error, Result};
use crate::gen::{self, GenSpec};
use crate::graph::Graph;
use crate::model::{
    ap_loss, eliminate_actions, ModelConfig, ModelParams, NetVars, StateEval, StateNet, DUMMY_Q,
};
use crate::rng::{self, tag};
use crate::solution::{Action, Problem, Solution};
use crate::tensor::{Adam, Tape, Tensor};

/// A solution frozen in time together with its objective.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub solution: Solution,
    pub objective: f64,
}

/// N-step replay record: starting state and action, the rewards collected
/// over up to `N` following steps, and the state reached. `terminal` marks
/// records whose end state closed the episode (no bootstrap).
#[derive(Debug, Clone)]
pub struct Transition {
    pub graph: Arc<Graph>,
    pub problem: Problem,
    pub s0: Snapshot,
    pub a0: Action,
    pub rewards: Vec<f64>,
    pub sn: Snapshot,
    pub terminal: bool,
}

/// Fixed-capacity ring of transitions with uniform without-replacement
/// batch sampling.
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn push(&mut self, tr: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(tr);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, idx: usize) -> &Transition {
        &self.items[idx]
    }

    /// Uniform sample of `batch` distinct indices.
    pub fn sample_indices<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        rand::seq::index::sample(rng, self.items.len(), batch.min(self.items.len())).into_vec()
    }
}

/// Exploration probability: linear from 0.5 down to 0.1 over the first 90%
/// of training, then linear from 0.1 down to 0.
pub fn epsilon_schedule(epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return 0.5;
    }
    let e = (epoch as f64).min(total_epochs as f64);
    let knee = 0.9 * total_epochs as f64;
    if e <= knee {
        if knee == 0.0 {
            0.1
        } else {
            0.5 - 0.4 * (e / knee)
        }
    } else {
        0.1 * (1.0 - (e - knee) / (total_epochs as f64 - knee))
    }
}

/// Training hyper-parameters. `new(seed)` fills in the defaults
/// (N = 2 steps, 3 encoder rounds, gamma 0.9, lr 1e-3, target sync 5,
/// replay capacity 5000); batch and embedding width are desk-scale presets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub n_step: usize,
    pub gamma: f64,
    pub batch: usize,
    pub lr: f64,
    pub target_sync: usize,
    pub reserve_ratio: f64,
    pub embed_dim: usize,
    pub rounds: usize,
    pub lambda: f64,
    pub buffer_capacity: usize,
    /// Episode cap; `None` means twice the node count.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Evaluate on the held-out set every this many epochs (0 = final only).
    pub eval_every: usize,
    /// Serialize parameters every this many epochs (0 = never).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            epochs: 2000,
            n_step: 2,
            gamma: 0.9,
            batch: 64,
            lr: 1e-3,
            target_sync: 5,
            reserve_ratio: 1.0,
            embed_dim: 16,
            rounds: 3,
            lambda: crate::model::DEFAULT_LAMBDA,
            buffer_capacity: 5000,
            max_steps: None,
            seed,
            eval_every: 200,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must be in (0,1), got {}", self.gamma)));
        }
        if self.n_step == 0 {
            return Err(Error::Config("n_step must be >= 1".into()));
        }
        if self.batch == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config("batch and buffer capacity must be >= 1".into()));
        }
        if !(self.reserve_ratio > 0.0 && self.reserve_ratio <= 1.0) {
            return Err(Error::Config("reserve ratio must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Where training instances come from: a generator template (the per-epoch
/// seed is derived from the master seed) or a fixed pool cycled in order.
#[derive(Debug, Clone)]
pub enum InstanceSource {
    Generator(GenSpec),
    Fixed(Vec<Arc<Graph>>),
}

impl InstanceSource {
    pub fn sample(&self, master_seed: u64, epoch: usize) -> Result<Arc<Graph>> {
        match self {
            InstanceSource::Generator(template) => {
                let mut spec = template.clone();
                spec.seed = rng::mix(master_seed, tag::EPOCH_INSTANCE, epoch as u64);
                Ok(Arc::new(gen::generate(&spec)?))
            }
            InstanceSource::Fixed(pool) => {
                if pool.is_empty() {
                    return Err(Error::Config("instance source is empty".into()));
                }
                Ok(Arc::clone(&pool[epoch % pool.len()]))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let InstanceSource::Fixed(pool) = self {
            if pool.is_empty() {
                return Err(Error::Config("instance source is empty".into()));
            }
        }
        Ok(())
    }
}

/// Outcome of one action selection.
pub struct SelectOutcome {
    pub action: Action,
    /// Candidate Q evaluations spent on this decision.
    pub q_evals: u64,
    pub explored: bool,
}

/// Epsilon-greedy selection over the proposal-eliminated candidate set.
/// With probability `eps_explore` a uniform random non-dummy legal action is
/// taken; otherwise the argmax-Q action among `ceil(reserve * |legal|)`
/// sampled candidates, falling back to dummy when every candidate has
/// negative Q. Ties break toward the lowest action index.
pub fn select_action<R: Rng>(
    params: &ModelParams,
    state: &EnvState,
    eps_explore: f64,
    reserve: f64,
    rng: &mut R,
) -> Result<SelectOutcome> {
    let legal = state.actions_of_kind(state.problem().action_kind())?;
    if legal.is_empty() {
        return Ok(SelectOutcome { action: Action::Dummy, q_evals: 0, explored: false });
    }
    if eps_explore > 0.0 && rng.gen::<f64>() < eps_explore {
        let action = legal[rng.gen_range(0..legal.len())];
        return Ok(SelectOutcome { action, q_evals: 0, explored: true });
    }
    let mut se = StateEval::new(params, state.graph(), state.problem(), state.solution())?;
    let subset = eliminate_actions(&se.dist, reserve, rng)?;
    let mut best: Option<(f64, usize)> = None;
    for &idx in &subset {
        let action = se.actions[idx];
        let q = se.q_of(&action)?;
        if best.map_or(true, |(bq, _)| q > bq) {
            best = Some((q, idx));
        }
    }
    let (best_q, best_idx) = best.expect("subset is non-empty");
    let action = if best_q < DUMMY_Q { Action::Dummy } else { se.actions[best_idx] };
    Ok(SelectOutcome { action, q_evals: se.q_evals, explored: false })
}

/// Eq-style N-step target: discounted reward sum plus, for non-terminal end
/// states, the discounted maximum target-network Q over the eliminated
/// candidate set (dummy included, so the bootstrap never drops below 0).
pub fn n_step_target<R: Rng>(
    tr: &Transition,
    target: &ModelParams,
    gamma: f64,
    reserve: f64,
    rng: &mut R,
) -> Result<f64> {
    let mut y = 0.0;
    let mut discount = 1.0;
    for r in &tr.rewards {
        y += discount * r;
        discount *= gamma;
    }
    if !tr.terminal {
        let legal =
            env::actions_of_kind(&tr.problem, &tr.sn.solution, tr.problem.action_kind())?;
        let bootstrap = if legal.is_empty() {
            DUMMY_Q
        } else {
            let mut se = StateEval::new(target, &tr.graph, &tr.problem, &tr.sn.solution)?;
            let subset = eliminate_actions(&se.dist, reserve, rng)?;
            let mut best = DUMMY_Q; // dummy always available
            for &idx in &subset {
                let action = se.actions[idx];
                best = best.max(se.q_of(&action)?);
            }
            best
        };
        y += gamma.powi(tr.rewards.len() as i32) * bootstrap;
    }
    Ok(y)
}

/// Copies the online parameters into the target network.
pub fn sync_target(online: &ModelParams, target: &mut ModelParams) {
    *target = online.clone();
}

/// Sum of squared TD errors for a batch against precomputed targets, with
/// gradients accumulated into `params` (proposal tensors excluded).
/// Returns the loss value.
pub fn q_loss_batch(
    params: &mut ModelParams,
    batch: &[&Transition],
    targets: &[f64],
) -> Result<f64> {
    assert_eq!(batch.len(), targets.len());
    let mut tape = Tape::new();
    let vars = NetVars::insert(&mut tape, params);
    let mut terms = Vec::with_capacity(batch.len());
    for (tr, &y) in batch.iter().zip(targets) {
        let net = StateNet::build(&mut tape, &vars, &params.config, &tr.graph, &tr.s0.solution)?;
        let q = net.q_var(&mut tape, &vars, &tr.a0)?;
        let yv = tape.constant(Tensor::scalar(y));
        let diff = tape.sub(yv, q);
        terms.push(tape.square(diff));
    }
    let loss = tape.add_n(&terms);
    tape.backward(loss);
    let ap_names = ModelConfig::ap_tensor_names();
    for (name, var) in vars.iter() {
        if !ap_names.contains(&name.as_str()) {
            params.tensor_mut(name).accumulate_grad(tape.grad(*var));
        }
    }
    Ok(tape.value(loss).item())
}

/// Proposal loss over a batch of states: for each state, the distribution is
/// recomputed, a candidate subset drawn, the target network picks
/// `a* = argmax Q` within it, and the NLL-minus-entropy loss of `a*` under
/// the proposal accrues gradients for the proposal tensors only.
/// Returns the summed loss.
pub fn ap_loss_batch<R: Rng>(
    params: &mut ModelParams,
    target: &ModelParams,
    batch: &[&Transition],
    reserve: f64,
    lambda: f64,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = NetVars::insert(&mut tape, params);
    let mut terms = Vec::new();
    for tr in batch {
        let actions =
            env::actions_of_kind(&tr.problem, &tr.s0.solution, tr.problem.action_kind())?;
        if actions.is_empty() {
            continue;
        }
        let net = StateNet::build(&mut tape, &vars, &params.config, &tr.graph, &tr.s0.solution)?;
        let (logits, dist_var) = net.propose(&mut tape, &vars, &actions)?;
        let dist = tape.value(dist_var).data.clone();
        let subset = eliminate_actions(&dist, reserve, rng)?;
        let mut tse = StateEval::new(target, &tr.graph, &tr.problem, &tr.s0.solution)?;
        let mut best: Option<(f64, usize)> = None;
        for &idx in &subset {
            let action = tse.actions[idx];
            let q = tse.q_of(&action)?;
            if best.map_or(true, |(bq, _)| q > bq) {
                best = Some((q, idx));
            }
        }
        let (_bq, chosen) = best.expect("subset non-empty");
        terms.push(ap_loss(&mut tape, logits, chosen, lambda));
    }
    if terms.is_empty() {
        return Ok(0.0);
    }
    let total = tape.add_n(&terms);
    tape.backward(total);
    for name in ModelConfig::ap_tensor_names() {
        params.tensor_mut(name).accumulate_grad(tape.grad(vars.get(name)));
    }
    Ok(tape.value(total).item())
}

/// One row of the training metrics log.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub mean_approx_ratio: f64,
    pub mean_episode_len: f64,
    pub q_loss: f64,
    pub ap_loss: f64,
    pub epsilon: f64,
}

/// Held-out instance with the reference objective ratios are computed
/// against (exact optimum or best-of-greedy proxy; the caller decides).
#[derive(Debug, Clone)]
pub struct EvalInstance {
    pub graph: Arc<Graph>,
    pub reference: f64,
}

/// Everything a training run produces.
pub struct TrainResult {
    pub params: ModelParams,
    pub metrics: Vec<MetricsRow>,
    /// Serialized checkpoints at `checkpoint_every` boundaries.
    pub checkpoints: Vec<(usize, String)>,
    /// Best mean eval ratio seen at any eval point (max for cut problems,
    /// min for tours), tracking the best solution encountered over training.
    pub best_mean_ratio: f64,
    /// Per eval instance: best (lowest) objective seen at any eval point.
    pub best_eval_objectives: Vec<f64>,
}

fn is_cut(problem: &Problem) -> bool {
    matches!(problem, Problem::KCut { .. })
}

/// Achieved-vs-reference ratio in the problem's reporting convention:
/// cut value over reference for cut problems (larger better), tour length
/// over reference for TSP (smaller better).
pub fn report_ratio(g: &Graph, problem: &Problem, best_objective: f64, reference: f64) -> f64 {
    if is_cut(problem) {
        (g.total_weight() - best_objective) / reference
    } else {
        best_objective / reference
    }
}

/// Greedy-policy rollout (no exploration), recording per-decision Q-eval
/// counts and the best objective encountered.
pub fn solve_with_policy(
    params: &ModelParams,
    graph: Arc<Graph>,
    problem: &Problem,
    init: Solution,
    max_steps: usize,
    reserve: f64,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = rng::substream(seed, tag::ELIMINATE, 0);
    let mut state = EnvState::new(graph, problem.clone(), init, max_steps)?;
    let mut traj = Trajectory::start(&state);
    while !state.is_done() {
        let sel = select_action(params, &state, 0.0, reserve, &mut rng)?;
        let (next, reward, done) = state.step(&sel.action)?;
        traj.record(&next, sel.action, reward);
        traj.q_evals_per_decision.push(sel.q_evals);
        state = next;
        if done {
            break;
        }
    }
    Ok(traj)
}

/// The full training loop. Deterministic given the config seed.
pub fn train(
    config: &TrainConfig,
    source: &InstanceSource,
    problem: &Problem,
    eval_instances: &[EvalInstance],
) -> Result<TrainResult> {
    config.validate()?;
    source.validate()?;

    // Probe one instance to size the model.
    let probe = source.sample(config.seed, 0)?;
    let model_config =
        ModelConfig::new(problem, probe.coord_dim(), config.embed_dim, config.rounds)?;
    let mut params = ModelParams::init(model_config, config.seed);
    let mut target = params.clone();
    let mut adam = Adam::new(config.lr);

    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut rng_explore: ChaCha8Rng = rng::substream(config.seed, tag::EXPLORE, 0);
    let mut rng_buffer: ChaCha8Rng = rng::substream(config.seed, tag::BUFFER, 0);
    let mut rng_elim: ChaCha8Rng = rng::substream(config.seed, tag::ELIMINATE, 0);
    let mut rng_target: ChaCha8Rng = rng::substream(config.seed, tag::TARGET_ELIMINATE, 0);

    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut update_rounds = 0usize;
    let mut q_loss_acc = (0.0, 0usize);
    let mut ap_loss_acc = (0.0, 0usize);
    let mut episode_len_acc = (0.0, 0usize);
    let mut best_mean_ratio = if is_cut(problem) { f64::NEG_INFINITY } else { f64::INFINITY };
    let mut best_eval_objectives = vec![f64::INFINITY; eval_instances.len()];

    for epoch in 0..config.epochs {
        let epsilon = epsilon_schedule(epoch, config.epochs);
        let graph = source.sample(config.seed, epoch)?;
        let max_steps = config.max_steps.unwrap_or_else(|| env::default_max_steps(graph.n()));
        let init = env::init_solution(
            &graph,
            problem,
            rng::mix(config.seed, tag::INIT_SOLUTION, epoch as u64),
        )?;
        let mut state = EnvState::new(Arc::clone(&graph), problem.clone(), init, max_steps)?;

        // Roll one episode.
        let mut history: Vec<(Snapshot, Action, f64)> = Vec::new();
        while !state.is_done() {
            let sel =
                select_action(&params, &state, epsilon, config.reserve_ratio, &mut rng_explore)?;
            let snap = Snapshot { solution: state.solution().clone(), objective: state.objective() };
            let (next, reward, done) = state.step(&sel.action)?;
            history.push((snap, sel.action, reward));
            state = next;
            if done {
                break;
            }
        }
        episode_len_acc = (episode_len_acc.0 + history.len() as f64, episode_len_acc.1 + 1);

        // Flush N-step transitions, including the truncated episode tail.
        let episode_len = history.len();
        let final_snap =
            Snapshot { solution: state.solution().clone(), objective: state.objective() };
        for t0 in 0..episode_len {
            // A dummy can only close an episode; its Q is the pinned
            // constant, so the tuple carries no training signal.
            if history[t0].1.is_dummy() {
                continue;
            }
            let horizon = config.n_step.min(episode_len - t0);
            let rewards: Vec<f64> =
                (t0..t0 + horizon).map(|t| history[t].2).collect();
            let sn = if t0 + horizon == episode_len {
                final_snap.clone()
            } else {
                history[t0 + horizon].0.clone()
            };
            buffer.push(Transition {
                graph: Arc::clone(&graph),
                problem: problem.clone(),
                s0: history[t0].0.clone(),
                a0: history[t0].1,
                rewards,
                sn,
                terminal: t0 + horizon == episode_len,
            });
        }

        // One Q step and one proposal step, in that order.
        if buffer.len() >= config.batch {
            let idxs = buffer.sample_indices(config.batch, &mut rng_buffer);
            let batch: Vec<&Transition> = idxs.iter().map(|&i| buffer.get(i)).collect();
            let targets = batch
                .iter()
                .map(|tr| {
                    n_step_target(tr, &target, config.gamma, config.reserve_ratio, &mut rng_target)
                })
                .collect::<Result<Vec<f64>>>()?;
            let ql = q_loss_batch(&mut params, &batch, &targets)?;
            let ap_names = ModelConfig::ap_tensor_names();
            let names = params.tensor_names();
            for name in &names {
                if !ap_names.contains(&name.as_str()) {
                    adam.step(name, params.tensor_mut(name));
                }
            }
            let al = ap_loss_batch(
                &mut params,
                &target,
                &batch,
                config.reserve_ratio,
                config.lambda,
                &mut rng_elim,
            )?;
            for name in ap_names {
                adam.step(name, params.tensor_mut(name));
            }
            q_loss_acc = (q_loss_acc.0 + ql, q_loss_acc.1 + 1);
            ap_loss_acc = (ap_loss_acc.0 + al, ap_loss_acc.1 + 1);
            update_rounds += 1;
            if update_rounds % config.target_sync == 0 {
                sync_target(&params, &mut target);
            }
        }

        // Periodic held-out evaluation and metrics row.
        let is_last = epoch + 1 == config.epochs;
        let eval_due = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
        if eval_due || is_last {
            let mut ratios = Vec::with_capacity(eval_instances.len());
            let mut lens = Vec::with_capacity(eval_instances.len());
            for (i, ev) in eval_instances.iter().enumerate() {
                let init = env::init_solution(
                    &ev.graph,
                    problem,
                    rng::mix(config.seed, tag::EVAL_INIT, i as u64),
                )?;
                let max_steps = config.max_steps.unwrap_or_else(|| env::default_max_steps(ev.graph.n()));
                let traj = solve_with_policy(
                    &params,
                    Arc::clone(&ev.graph),
                    problem,
                    init,
                    max_steps,
                    config.reserve_ratio,
                    rng::mix(config.seed, tag::EVAL_INSTANCE, i as u64),
                )?;
                best_eval_objectives[i] = best_eval_objectives[i].min(traj.best_objective);
                ratios.push(report_ratio(&ev.graph, problem, traj.best_objective, ev.reference));
                lens.push(traj.steps.len() as f64);
            }
            let mean_ratio = if ratios.is_empty() {
                f64::NAN
            } else {
                ratios.iter().sum::<f64>() / ratios.len() as f64
            };
            if !ratios.is_empty() {
                best_mean_ratio = if is_cut(problem) {
                    best_mean_ratio.max(mean_ratio)
                } else {
                    best_mean_ratio.min(mean_ratio)
                };
            }
            metrics.push(MetricsRow {
                epoch: epoch + 1,
                mean_approx_ratio: mean_ratio,
                mean_episode_len: if episode_len_acc.1 == 0 {
                    0.0
                } else {
                    episode_len_acc.0 / episode_len_acc.1 as f64
                },
                q_loss: if q_loss_acc.1 == 0 { 0.0 } else { q_loss_acc.0 / q_loss_acc.1 as f64 },
                ap_loss: if ap_loss_acc.1 == 0 { 0.0 } else { ap_loss_acc.0 / ap_loss_acc.1 as f64 },
                epsilon,
            });
            q_loss_acc = (0.0, 0);
            ap_loss_acc = (0.0, 0);
            episode_len_acc = (0.0, 0);
        }

        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            checkpoints.push((epoch + 1, params.to_checkpoint_json()?));
        }
    }

    Ok(TrainResult { params, metrics, checkpoints, best_mean_ratio, best_eval_objectives })
}

/// Serializes metrics as the training CSV.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("epoch,mean_approx_ratio,mean_episode_len,q_loss,ap_loss,epsilon\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.mean_approx_ratio, r.mean_episode_len, r.q_loss, r.ap_loss, r.epsilon
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::GenSpec;

    fn small_instance(seed: u64) -> Arc<Graph> {
        Arc::new(gen::generate(&GenSpec::uniform(5, 2, 4, seed)).unwrap())
    }

    #[test]
    fn schedule_endpoints() {
        let e = 1000;
        assert_eq!(epsilon_schedule(0, e), 0.5);
        assert!((epsilon_schedule(900, e) - 0.1).abs() < 1e-12);
        assert!(epsilon_schedule(1000, e).abs() < 1e-12);
        // midpoint of the first leg
        assert!((epsilon_schedule(450, e) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn n_step_target_arithmetic() {
        // N=2, gamma 0.9, rewards (1,2), max next-Q forced to 3 is covered by
        // the enumeration-oracle acceptance test; here the terminal case
        // pins the reward-only sum: 1 + 0.9*2 = 2.8.
        let g = small_instance(1);
        let problem = Problem::max_cut();
        let sol = env::init_solution(&g, &problem, 3).unwrap();
        let obj = env::objective(&g, &problem, &sol).unwrap();
        let tr = Transition {
            graph: Arc::clone(&g),
            problem: problem.clone(),
            s0: Snapshot { solution: sol.clone(), objective: obj },
            a0: Action::Flip { node: 0, label: 2 },
            rewards: vec![1.0, 2.0],
            sn: Snapshot { solution: sol, objective: obj },
            terminal: true,
        };
        let cfg = ModelConfig::new(&problem, 2, 4, 2).unwrap();
        let params = ModelParams::init(cfg, 7);
        let mut rng = rng::substream(0, tag::TARGET_ELIMINATE, 0);
        let y = n_step_target(&tr, &params, 0.9, 1.0, &mut rng).unwrap();
        assert!((y - 2.8).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_equals_full_enumeration_at_reserve_one() {
        let g = small_instance(2);
        let problem = Problem::max_cut();
        let sol = env::init_solution(&g, &problem, 5).unwrap();
        let obj = env::objective(&g, &problem, &sol).unwrap();
        let tr = Transition {
            graph: Arc::clone(&g),
            problem: problem.clone(),
            s0: Snapshot { solution: sol.clone(), objective: obj },
            a0: Action::Flip { node: 0, label: 2 },
            rewards: vec![0.25, -0.5],
            sn: Snapshot { solution: sol.clone(), objective: obj },
            terminal: false,
        };
        let cfg = ModelConfig::new(&problem, 2, 4, 2).unwrap();
        let params = ModelParams::init(cfg, 11);
        let mut rng = rng::substream(1, tag::TARGET_ELIMINATE, 0);
        let y = n_step_target(&tr, &params, 0.9, 1.0, &mut rng).unwrap();

        // Brute-force oracle: enumerate every legal action, evaluate Q
        // directly, take the max against the dummy's 0.
        let legal = env::actions_of_kind(&problem, &sol, problem.action_kind()).unwrap();
        let mut best = DUMMY_Q;
        let mut se = StateEval::new(&params, &g, &problem, &sol).unwrap();
        for a in &legal {
            best = best.max(se.q_of(a).unwrap());
        }
        let want = 0.25 + 0.9 * -0.5 + 0.9f64.powi(2) * best;
        assert_eq!(y, want);
    }

    #[test]
    fn q_loss_zero_when_targets_match() {
        let g = small_instance(3);
        let problem = Problem::max_cut();
        let sol = env::init_solution(&g, &problem, 9).unwrap();
        let obj = env::objective(&g, &problem, &sol).unwrap();
        let cfg = ModelConfig::new(&problem, 2, 4, 2).unwrap();
        let mut params = ModelParams::init(cfg, 13);
        let a0 = Action::Flip { node: 1, label: 2 };
        let tr = Transition {
            graph: Arc::clone(&g),
            problem: problem.clone(),
            s0: Snapshot { solution: sol.clone(), objective: obj },
            a0,
            rewards: vec![0.0],
            sn: Snapshot { solution: sol, objective: obj },
            terminal: true,
        };
        let mut se = StateEval::new(&params, &g, &problem, &tr.s0.solution).unwrap();
        let q = se.q_of(&a0).unwrap();
        let loss = q_loss_batch(&mut params, &[&tr], &[q]).unwrap();
        assert!(loss.abs() < 1e-18);
        // single item, y=2, Q=0 comes from the zero-parameter model
        let mut zero = ModelParams::zeros(params.config.clone());
        let loss = q_loss_batch(&mut zero, &[&tr], &[2.0]).unwrap();
        assert_eq!(loss, 4.0);
    }

    #[test]
    fn selection_is_uniform_when_fully_exploring() {
        let g = small_instance(4);
        let problem = Problem::max_cut();
        let sol = env::init_solution(&g, &problem, 1).unwrap();
        let state = EnvState::new(Arc::clone(&g), problem.clone(), sol, 10).unwrap();
        let cfg = ModelConfig::new(&problem, 2, 4, 2).unwrap();
        let params = ModelParams::init(cfg, 5);
        let legal = state.actions_of_kind(state.problem().action_kind()).unwrap();
        let mut counts = vec![0usize; legal.len()];
        let mut rng = rng::substream(2, tag::EXPLORE, 0);
        let trials = 10_000;
        for _ in 0..trials {
            let sel = select_action(&params, &state, 1.0, 1.0, &mut rng).unwrap();
            assert!(sel.explored);
            let idx = legal.iter().position(|a| *a == sel.action).unwrap();
            counts[idx] += 1;
        }
        let want = 1.0 / legal.len() as f64;
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!((freq - want).abs() < 0.02, "action {i}: {freq} vs {want}");
        }
    }

    #[test]
    fn dummy_selected_when_all_q_negative() {
        let g = small_instance(6);
        let problem = Problem::max_cut();
        let sol = env::init_solution(&g, &problem, 2).unwrap();
        let state = EnvState::new(Arc::clone(&g), problem.clone(), sol, 10).unwrap();
        let cfg = ModelConfig::new(&problem, 2, 4, 2).unwrap();
        let mut params = ModelParams::init(cfg, 15);
        // Force Q < 0 for every action: relu output is nonnegative, so a
        // strictly negative W0 makes Q <= 0; subtract a margin via w0 and
        // verify at least one hidden unit fires, otherwise Q = 0 and dummy
        // still wins ties by construction only when Q < 0. Easiest robust
        // route: make W0 negative and check the outcome is dummy whenever
        // every candidate Q < 0.
        for v in params.tensor_mut("w0").data.iter_mut() {
            *v = -1.0;
        }
        let mut se = StateEval::new(&params, &g, &problem, state.solution()).unwrap();
        let all_negative =
            se.actions.clone().iter().all(|a| se.q_of(a).unwrap() < 0.0);
        let mut rng = rng::substream(3, tag::EXPLORE, 0);
        let sel = select_action(&params, &state, 0.0, 1.0, &mut rng).unwrap();
        if all_negative {
            assert!(sel.action.is_dummy());
        } else {
            // Degenerate (all-zero activations): the first action ties at 0
            // and wins by index.
            assert!(!sel.action.is_dummy());
        }
    }

    #[test]
    fn greedy_selection_matches_brute_force_argmax() {
        let g = small_instance(8);
        let problem = Problem::max_cut();
        let sol = env::init_solution(&g, &problem, 4).unwrap();
        let state = EnvState::new(Arc::clone(&g), problem.clone(), sol, 10).unwrap();
        let cfg = ModelConfig::new(&problem, 2, 4, 2).unwrap();
        let params = ModelParams::init(cfg, 17);
        let mut rng = rng::substream(4, tag::EXPLORE, 0);
        let sel = select_action(&params, &state, 0.0, 1.0, &mut rng).unwrap();

        let mut se = StateEval::new(&params, &g, &problem, state.solution()).unwrap();
        let actions = se.actions.clone();
        let mut best = (DUMMY_Q, Action::Dummy);
        for a in actions.iter().rev() {
            let q = se.q_of(a).unwrap();
            if q >= best.0 {
                best = (q, *a);
            }
        }
        let want = if best.0 < 0.0 { Action::Dummy } else { best.1 };
        assert_eq!(sel.action, want);
        assert_eq!(sel.q_evals, se.actions.len() as u64);
    }

    #[test]
    fn sync_target_copies_parameters() {
        let problem = Problem::max_cut();
        let cfg = ModelConfig::new(&problem, 2, 4, 2).unwrap();
        let online = ModelParams::init(cfg.clone(), 21);
        let mut target = ModelParams::init(cfg, 22);
        assert_ne!(online, target);
        sync_target(&online, &mut target);
        assert_eq!(online, target);
    }

    #[test]
    fn replay_buffer_ring_and_sampling() {
        let g = small_instance(10);
        let problem = Problem::max_cut();
        let sol = env::init_solution(&g, &problem, 0).unwrap();
        let obj = env::objective(&g, &problem, &sol).unwrap();
        let make = |i: usize| Transition {
            graph: Arc::clone(&g),
            problem: problem.clone(),
            s0: Snapshot { solution: sol.clone(), objective: obj },
            a0: Action::Flip { node: i % 5, label: 2 },
            rewards: vec![i as f64],
            sn: Snapshot { solution: sol.clone(), objective: obj },
            terminal: true,
        };
        let mut buf = ReplayBuffer::new(10);
        for i in 0..25 {
            buf.push(make(i));
            assert!(buf.len() <= 10);
        }
        assert_eq!(buf.len(), 10);
        // oldest entries were evicted
        assert_eq!(buf.get(0).rewards[0], 15.0);
        let mut rng = rng::substream(5, tag::BUFFER, 0);
        let idxs = buf.sample_indices(4, &mut rng);
        assert_eq!(idxs.len(), 4);
        let mut uniq = idxs.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 4, "sampling without replacement");
    }

    #[test]
    fn warmup_run_with_empty_updates_is_fine() {
        let problem = Problem::max_cut();
        let mut cfg = TrainConfig::new(42);
        cfg.epochs = 1;
        cfg.batch = 10_000; // never reached -> zero gradient updates
        cfg.eval_every = 1;
        let source = InstanceSource::Generator(GenSpec::uniform(5, 2, 4, 0));
        let result = train(&cfg, &source, &problem, &[]).unwrap();
        assert_eq!(result.metrics.len(), 1);
        assert!(result.metrics[0].q_loss == 0.0);
    }

    #[test]
    fn tiny_training_run_is_deterministic() {
        let problem = Problem::max_cut();
        let mut cfg = TrainConfig::new(77);
        cfg.epochs = 12;
        cfg.batch = 8;
        cfg.embed_dim = 4;
        cfg.eval_every = 6;
        let source = InstanceSource::Generator(GenSpec::uniform(5, 2, 4, 0));
        let eval = vec![EvalInstance { graph: small_instance(99), reference: 1.0 }];
        let a = train(&cfg, &source, &problem, &eval).unwrap();
        let b = train(&cfg, &source, &problem, &eval).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(metrics_to_csv(&a.metrics), metrics_to_csv(&b.metrics));
    }

    #[test]
    fn target_sync_fires_on_schedule() {
        // counter arithmetic only: every target_sync update rounds
        let mut rounds = 0;
        let mut syncs = Vec::new();
        for epoch in 0..12 {
            rounds += 1;
            if rounds % 5 == 0 {
                syncs.push(epoch);
            }
        }
        assert_eq!(syncs, vec![4, 9]);
    }
}
