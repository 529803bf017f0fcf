//! Network architecture: message-passing encoder, per-problem readouts, the
//! Q head, and the action-proposal network used for action elimination.
//!
//! One encoder round updates every node embedding as
//! `mu_v <- relu(theta0 x_v + theta1 mean_u w_uv mu_u + theta2 mean_u relu(theta3 w_uv))`
//! with means over the neighbor set and zero vectors for isolated nodes.
//! After `T` rounds the readouts assemble state/action embeddings:
//! cluster means plus an attention readout for k-cut, a recurrent pass over
//! the tour for TSP. `Q(s,a) = W0 relu([W1 H_s; W2 H_a])`, and the dummy
//! action is pinned to `Q = 0` so the policy stops when nothing is worth
//! taking.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{self, tag};
use crate::solution::{Action, Problem, Solution};
use crate::tensor::{LogitItem, Tape, Tensor, Var};

/// Q value of the dummy action (fixed, not learned).
pub const DUMMY_Q: f64 = 0.0;

/// Default entropy regularization weight in the proposal loss.
pub const DEFAULT_LAMBDA: f64 = 0.01;

/// Problem family as seen by the networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelProblem {
    KCut { k: u32, constrained: bool },
    Tsp,
}

/// Architecture hyper-parameters borne by every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub problem: ModelProblem,
    /// Node embedding width.
    pub d: usize,
    /// Static feature width (`k` for k-cut one-hots, coordinate dim for TSP).
    pub p: usize,
    /// Encoder rounds.
    pub rounds: usize,
}

impl ModelConfig {
    pub fn new(problem: &Problem, coord_dim: usize, d: usize, rounds: usize) -> Result<Self> {
        if d == 0 || rounds == 0 {
            return Err(Error::Config("d and rounds must be >= 1".into()));
        }
        Ok(match problem {
            Problem::KCut { k, sizes } => ModelConfig {
                problem: ModelProblem::KCut { k: *k, constrained: sizes.is_some() },
                d,
                p: *k as usize,
                rounds,
            },
            Problem::Tsp => {
                if coord_dim == 0 {
                    return Err(Error::Config("TSP model requires node coordinates".into()));
                }
                ModelConfig { problem: ModelProblem::Tsp, d, p: coord_dim, rounds }
            }
        })
    }

    /// Action embedding width: `2d` for single-node flips, `4d` for pairwise
    /// moves.
    pub fn action_dim(&self) -> usize {
        match self.problem {
            ModelProblem::KCut { constrained: false, .. } => 2 * self.d,
            _ => 4 * self.d,
        }
    }

    fn is_tsp(&self) -> bool {
        matches!(self.problem, ModelProblem::Tsp)
    }

    /// `(name, shape, fan_in)` for every tensor of this configuration, in
    /// the fixed initialization order.
    fn tensor_specs(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        let (d, p, da) = (self.d, self.p, self.action_dim());
        let mut specs = vec![
            ("theta0", vec![d, p], p),
            ("theta1", vec![d, d], d),
            ("theta2", vec![d, p], p),
            ("theta3", vec![p], 1),
        ];
        if self.is_tsp() {
            specs.push(("rnn_u", vec![d, d], d));
            specs.push(("rnn_v", vec![d, d], d));
            specs.push(("rnn_b", vec![d], d));
        } else {
            specs.push(("attn", vec![d, da], da));
        }
        specs.extend([
            ("w0", vec![1, 2 * d], 2 * d),
            ("w1", vec![d, d], d),
            ("w2", vec![d, da], da),
            ("ap_w1", vec![d, d], d),
            ("ap_b1", vec![d], d),
            ("ap_w2", vec![d, d], d),
            ("ap_b2", vec![d], d),
            ("prop_scalar", vec![1], 1),
        ]);
        specs
    }

    /// Names of the proposal-network tensors (the only ones the proposal
    /// loss may update).
    pub fn ap_tensor_names() -> &'static [&'static str] {
        &["ap_w1", "ap_b1", "ap_w2", "ap_b2", "prop_scalar"]
    }
}

/// All trainable tensors, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Fresh parameters, uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = rng::substream(seed, tag::PARAM_INIT, 0);
        let mut tensors = BTreeMap::new();
        for (name, shape, fan_in) in config.tensor_specs() {
            tensors.insert(name.to_string(), Tensor::uniform_init(&shape, fan_in, &mut rng));
        }
        ModelParams { config, tensors }
    }

    /// All-zero parameters (used by tests and sanity checks).
    pub fn zeros(config: ModelConfig) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, shape, _) in config.tensor_specs() {
            tensors.insert(name.to_string(), Tensor::zeros(&shape));
        }
        ModelParams { config, tensors }
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors.get_mut(name).expect("unknown tensor")
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Ck<'a> {
            version: u32,
            config: &'a ModelConfig,
            tensors: BTreeMap<&'a String, CkTensor<'a>>,
        }
        #[derive(Serialize)]
        struct CkTensor<'a> {
            shape: &'a Vec<usize>,
            data: &'a Vec<f64>,
        }
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| (k, CkTensor { shape: &t.shape, data: &t.data }))
            .collect();
        Ok(serde_json::to_string(&Ck { version: 1, config: &self.config, tensors })?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Ck {
            version: u32,
            config: ModelConfig,
            tensors: BTreeMap<String, CkTensor>,
        }
        #[derive(Deserialize)]
        struct CkTensor {
            shape: Vec<usize>,
            data: Vec<f64>,
        }
        let ck: Ck = serde_json::from_str(text)?;
        if ck.version != 1 {
            return Err(Error::Config(format!("unsupported checkpoint version {}", ck.version)));
        }
        let mut tensors = BTreeMap::new();
        for (name, shape, _) in ck.config.tensor_specs() {
            let t = ck
                .tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint missing tensor '{name}'")))?;
            if t.shape != shape {
                return Err(Error::Dimension(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    t.shape, shape
                )));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Dimension(format!("tensor '{name}' data length mismatch")));
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("tensor '{name}' contains non-finite values")));
            }
            tensors.insert(name.to_string(), Tensor::from_vec(&shape, t.data.clone()));
        }
        Ok(ModelParams { config: ck.config, tensors })
    }
}

/// Tape leaves for one parameter set.
pub struct NetVars {
    vars: BTreeMap<String, Var>,
}

impl NetVars {
    pub fn insert(tape: &mut Tape, params: &ModelParams) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        NetVars { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Static per-node features: one-hot current labels for k-cut, coordinates
/// for TSP.
pub fn features(config: &ModelConfig, g: &Graph, sol: &Solution) -> Result<Tensor> {
    match &config.problem {
        ModelProblem::KCut { k, .. } => {
            let labels = sol.labels()?;
            if labels.len() != g.n() {
                return Err(Error::Dimension("label count differs from node count".into()));
            }
            let kk = *k as usize;
            if config.p != kk {
                return Err(Error::Dimension("feature width differs from k".into()));
            }
            let mut x = vec![0.0; g.n() * kk];
            for (v, &l) in labels.iter().enumerate() {
                x[v * kk + (l - 1) as usize] = 1.0;
            }
            Ok(Tensor::from_vec(&[g.n(), kk], x))
        }
        ModelProblem::Tsp => {
            let coords = g
                .coords()
                .ok_or_else(|| Error::Config("TSP features require coordinates".into()))?;
            if g.coord_dim() != config.p {
                return Err(Error::Dimension(format!(
                    "coordinate dim {} differs from feature width {}",
                    g.coord_dim(),
                    config.p
                )));
            }
            Ok(Tensor::from_vec(&[g.n(), config.p], coords.to_vec()))
        }
    }
}

/// `T` encoder rounds over the graph; returns the `n x d` node embeddings.
pub fn mpnn_forward(
    tape: &mut Tape,
    g: &Graph,
    x: &Tensor,
    vars: &NetVars,
    config: &ModelConfig,
) -> Result<Var> {
    let n = g.n();
    let (xr, xc) = x.rc();
    if xr != n || xc != config.p {
        return Err(Error::Dimension(format!(
            "features are {xr}x{xc}, expected {n}x{}",
            config.p
        )));
    }
    // Row-normalized weighted adjacency for the neighbor-mean term.
    let mut adj = vec![0.0; n * n];
    let mut edges: Vec<Vec<f64>> = Vec::with_capacity(n);
    for v in 0..n {
        let nv = g.neighbors(v);
        if !nv.is_empty() {
            let inv = 1.0 / nv.len() as f64;
            for &u in nv {
                adj[v * n + u] = g.weight(v, u) * inv;
            }
        }
        edges.push(nv.iter().map(|&u| g.weight(v, u)).collect());
    }
    let adj = tape.constant(Tensor::from_vec(&[n, n], adj));
    let xv = tape.constant(x.clone());
    let (theta0, theta1, theta2, theta3) = (
        vars.get("theta0"),
        vars.get("theta1"),
        vars.get("theta2"),
        vars.get("theta3"),
    );
    let feat_term = tape.matmul_tb(xv, theta0); // n x d
    let edge_feats = tape.edge_mean_relu(theta3, edges); // n x p
    let edge_term = tape.matmul_tb(edge_feats, theta2); // n x d
    let static_part = tape.add(feat_term, edge_term);
    let mut mu = tape.constant(Tensor::zeros(&[n, config.d]));
    for _ in 0..config.rounds {
        let agg = tape.matmul(adj, mu); // n x d neighbor message
        let msg = tape.matmul_tb(agg, theta1);
        let pre = tape.add(static_part, msg);
        mu = tape.relu(pre);
    }
    Ok(mu)
}

/// Per-cluster membership lists for `labels` over `k` clusters.
pub fn cluster_groups(labels: &[u32], k: u32) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); k as usize];
    for (v, &l) in labels.iter().enumerate() {
        groups[(l - 1) as usize].push(v);
    }
    groups
}

/// Cluster means `H_c` (`k x d`), zero rows for empty clusters.
pub fn kcut_cluster_embed(tape: &mut Tape, mu: Var, labels: &[u32], k: u32) -> Var {
    let groups = cluster_groups(labels, k);
    tape.grouped_row_mean(mu, groups)
}

/// Action embedding: `[mu_u; H_c(j)]` for a flip of `u` to label `j`,
/// `[mu_u; mu_v; H_c(l(u)); H_c(l(v))]` for a swap.
pub fn kcut_action_embed(
    tape: &mut Tape,
    mu: Var,
    h_c: Var,
    labels: &[u32],
    action: &Action,
) -> Result<Var> {
    match *action {
        Action::Flip { node, label } => {
            let mu_u = tape.row(mu, node);
            let hc_j = tape.row(h_c, (label - 1) as usize);
            Ok(tape.concat(&[mu_u, hc_j]))
        }
        Action::Swap { i, j } => {
            let mu_i = tape.row(mu, i);
            let mu_j = tape.row(mu, j);
            let hc_i = tape.row(h_c, (labels[i] - 1) as usize);
            let hc_j = tape.row(h_c, (labels[j] - 1) as usize);
            Ok(tape.concat(&[mu_i, mu_j, hc_i, hc_j]))
        }
        _ => Err(Error::ConstraintViolation("k-cut embeds flips and swaps only".into())),
    }
}

/// Attention readout over cluster embeddings with the action embedding as
/// query: weights `softmax_i(H_c(i)^T W_a H_a)`, state `sum_i w(i) H_c(i)`.
/// Returns `(weights, H_s)`.
pub fn kcut_state_embed(tape: &mut Tape, h_c: Var, h_a: Var, vars: &NetVars) -> (Var, Var) {
    let attn = vars.get("attn");
    let query = tape.matmul(attn, h_a); // d x 1
    let logits = tape.matmul(h_c, query); // k x 1
    let weights = tape.softmax(logits);
    let h_s = tape.matmul_ta(h_c, weights); // d x 1
    (weights, h_s)
}

/// Recurrent readout over the tour order: `h_t = tanh(U mu_(perm t) + V h_(t-1) + b)`,
/// `h_0 = 0`; returns `h_n`.
pub fn tsp_state_embed(tape: &mut Tape, mu: Var, perm: &[usize], vars: &NetVars) -> Var {
    let (u, v, b) = (vars.get("rnn_u"), vars.get("rnn_v"), vars.get("rnn_b"));
    let d = tape.value(b).len();
    let mut h = tape.constant(Tensor::zeros(&[d]));
    for &node in perm {
        let x = tape.row(mu, node);
        let ux = tape.matmul(u, x);
        let vh = tape.matmul(v, h);
        let sum = tape.add(ux, vh);
        let pre = tape.add(sum, b);
        h = tape.tanh(pre);
    }
    h
}

/// Embedding of a segment reversal at tour positions `(i, j)`:
/// `[mu_i; mu_j; mu_(i-1); mu_(j+1)]` with cyclic position indexing.
pub fn tsp_action_embed(tape: &mut Tape, mu: Var, perm: &[usize], i: usize, j: usize) -> Var {
    let n = perm.len();
    let parts = [
        perm[i],
        perm[j],
        perm[(i + n - 1) % n],
        perm[(j + 1) % n],
    ];
    let rows: Vec<Var> = parts.iter().map(|&node| tape.row(mu, node)).collect();
    tape.concat(&rows)
}

/// `Q(s,a) = W0 relu([W1 H_s; W2 H_a])`.
pub fn q_value(tape: &mut Tape, h_s: Var, h_a: Var, vars: &NetVars) -> Var {
    let (w0, w1, w2) = (vars.get("w0"), vars.get("w1"), vars.get("w2"));
    let s_part = tape.matmul(w1, h_s);
    let a_part = tape.matmul(w2, h_a);
    let cat = tape.concat(&[s_part, a_part]);
    let hidden = tape.relu(cat);
    tape.matmul(w0, hidden) // 1 x 1
}

/// Proposal network: one hidden relu layer then a linear map, producing the
/// pseudo-action embedding.
pub fn ap_forward(tape: &mut Tape, h_s: Var, vars: &NetVars) -> Var {
    let (w1, b1, w2, b2) =
        (vars.get("ap_w1"), vars.get("ap_b1"), vars.get("ap_w2"), vars.get("ap_b2"));
    let lin1 = tape.matmul(w1, h_s);
    let pre1 = tape.add(lin1, b1);
    let hidden = tape.relu(pre1);
    let lin2 = tape.matmul(w2, hidden);
    tape.add(lin2, b2)
}

/// Maps an action to its proposal-logit recipe. Pairwise moves use the two
/// involved nodes; a flip of `u` scores as the bare `s(u)`.
pub fn logit_item(action: &Action, perm: Option<&[usize]>) -> Result<LogitItem> {
    Ok(match *action {
        Action::Flip { node, .. } => LogitItem::Single(node),
        Action::Swap { i, j } => LogitItem::Pair(i, j),
        Action::SeqSwap { i, j } => {
            let perm = perm.ok_or_else(|| Error::Protocol("segment move needs a tour".into()))?;
            LogitItem::Pair(perm[i], perm[j])
        }
        Action::Dummy => return Err(Error::Protocol("dummy has no proposal logit".into())),
    })
}

/// Proposal distribution over the non-dummy legal actions: node scores
/// `s(v) = a_tilde . mu_v`, pairwise logits
/// `s(v_i) + s(v_j) + theta * s(v_i) s(v_j)`, softmax-normalized.
/// Returns `(logits, dist)`.
pub fn ap_propose(
    tape: &mut Tape,
    h_s: Var,
    mu: Var,
    vars: &NetVars,
    actions: &[Action],
    perm: Option<&[usize]>,
) -> Result<(Var, Var)> {
    if actions.is_empty() {
        return Err(Error::Protocol("proposal over an empty action set".into()));
    }
    let a_tilde = ap_forward(tape, h_s, vars);
    let scores = tape.matmul(mu, a_tilde); // n x 1
    let items = actions
        .iter()
        .map(|a| logit_item(a, perm))
        .collect::<Result<Vec<_>>>()?;
    let logits = tape.proposal_logits(scores, vars.get("prop_scalar"), items);
    let dist = tape.softmax(logits);
    Ok((logits, dist))
}

/// Proposal loss: negative log-likelihood of the chosen action minus
/// `lambda` times the distribution entropy.
pub fn ap_loss(tape: &mut Tape, logits: Var, chosen: usize, lambda: f64) -> Var {
    tape.nll_entropy(logits, chosen, lambda)
}

/// Samples `ceil(epsilon * L)` distinct action indices without replacement,
/// proportional to `dist`. `epsilon = 1` returns the whole index range.
/// Indices come back sorted ascending.
pub fn eliminate_actions<R: Rng>(dist: &[f64], epsilon: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Config(format!("reserve ratio must be in (0, 1], got {epsilon}")));
    }
    let total = dist.len();
    if epsilon >= 1.0 {
        return Ok((0..total).collect());
    }
    let count = ((epsilon * total as f64).ceil() as usize).clamp(1, total);
    let mut weights = dist.to_vec();
    let mut chosen = Vec::with_capacity(count);
    for _ in 0..count {
        let sum: f64 = weights.iter().sum();
        let idx = if sum > 0.0 {
            let mut x = rng.gen::<f64>() * sum;
            let mut pick = None;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    x -= w;
                    if x <= 0.0 {
                        pick = Some(i);
                        break;
                    }
                }
            }
            // Round-off fallback: last remaining positive weight.
            pick.unwrap_or_else(|| {
                weights
                    .iter()
                    .enumerate()
                    .rev()
                    .find(|(_, &w)| w > 0.0)
                    .map(|(i, _)| i)
                    .expect("some weight remains")
            })
        } else {
            // All remaining mass is zero: fall back to the first unchosen.
            weights
                .iter()
                .enumerate()
                .find(|(i, _)| !chosen.contains(i))
                .map(|(i, _)| i)
                .expect("count <= total")
        };
        weights[idx] = 0.0;
        chosen.push(idx);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Incrementally maintained cluster sums/means over a fixed embedding
/// matrix. A flip or swap touches only the affected clusters.
#[derive(Debug, Clone)]
pub struct ClusterMeans {
    d: usize,
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl ClusterMeans {
    pub fn compute(mu: &Tensor, labels: &[u32], k: u32) -> Self {
        let (_n, d) = mu.rc();
        let mut cm = ClusterMeans { d, sums: vec![0.0; k as usize * d], counts: vec![0; k as usize] };
        for (v, &l) in labels.iter().enumerate() {
            cm.add(v, l, mu);
        }
        cm
    }

    fn add(&mut self, v: usize, label: u32, mu: &Tensor) {
        let c = (label - 1) as usize;
        self.counts[c] += 1;
        for t in 0..self.d {
            self.sums[c * self.d + t] += mu.data[v * self.d + t];
        }
    }

    fn remove(&mut self, v: usize, label: u32, mu: &Tensor) {
        let c = (label - 1) as usize;
        self.counts[c] -= 1;
        for t in 0..self.d {
            self.sums[c * self.d + t] -= mu.data[v * self.d + t];
        }
    }

    /// Updates for node `v` moving from `old` to `new` (two clusters touched).
    pub fn apply_flip(&mut self, mu: &Tensor, v: usize, old: u32, new: u32) {
        self.remove(v, old, mu);
        self.add(v, new, mu);
    }

    /// Updates for a label swap between `i` and `j`.
    pub fn apply_swap(&mut self, mu: &Tensor, i: usize, j: usize, label_i: u32, label_j: u32) {
        self.remove(i, label_i, mu);
        self.remove(j, label_j, mu);
        self.add(i, label_j, mu);
        self.add(j, label_i, mu);
    }

    /// Mean matrix `k x d`, zero rows for empty clusters.
    pub fn means(&self) -> Tensor {
        let k = self.counts.len();
        let mut data = vec![0.0; k * self.d];
        for c in 0..k {
            if self.counts[c] > 0 {
                let inv = 1.0 / self.counts[c] as f64;
                for t in 0..self.d {
                    data[c * self.d + t] = self.sums[c * self.d + t] * inv;
                }
            }
        }
        Tensor::from_vec(&[k, self.d], data)
    }
}

/// One state's network nodes on a caller-owned tape, so several states can
/// share trainable-parameter leaves (as the batched losses require).
pub struct StateNet {
    pub mu: Var,
    h_c: Option<Var>,
    h_s_tsp: Option<Var>,
    pub h_s_ap: Var,
    solution: Solution,
}

impl StateNet {
    /// Encoder plus the action-independent readout pieces.
    pub fn build(
        tape: &mut Tape,
        vars: &NetVars,
        config: &ModelConfig,
        g: &Graph,
        sol: &Solution,
    ) -> Result<Self> {
        let x = features(config, g, sol)?;
        let mu = mpnn_forward(tape, g, &x, vars, config)?;
        let (h_c, h_s_tsp, h_s_ap) = match (&config.problem, sol) {
            (ModelProblem::KCut { k, .. }, Solution::KCutLabels(labels)) => {
                let h_c = kcut_cluster_embed(tape, mu, labels, *k);
                // The proposal query sees the uniform-attention readout (the
                // attention itself is action-conditioned and not yet known).
                let kk = *k as usize;
                let uniform = tape.constant(Tensor::from_vec(&[kk], vec![1.0 / kk as f64; kk]));
                let h_s_ap = tape.matmul_ta(h_c, uniform);
                (Some(h_c), None, h_s_ap)
            }
            (ModelProblem::Tsp, Solution::TspTour(perm)) => {
                let h_s = tsp_state_embed(tape, mu, perm, vars);
                (None, Some(h_s), h_s)
            }
            _ => return Err(Error::InvalidSolution("solution does not match model".into())),
        };
        Ok(StateNet { mu, h_c, h_s_tsp, h_s_ap, solution: sol.clone() })
    }

    /// Tape variable for `Q(s, a)` (planning and the training gradient path).
    pub fn q_var(&self, tape: &mut Tape, vars: &NetVars, action: &Action) -> Result<Var> {
        match (&self.solution, action) {
            (Solution::KCutLabels(labels), Action::Flip { .. } | Action::Swap { .. }) => {
                let h_c = self.h_c.expect("k-cut net has cluster embeddings");
                let h_a = kcut_action_embed(tape, self.mu, h_c, labels, action)?;
                let (_w, h_s) = kcut_state_embed(tape, h_c, h_a, vars);
                Ok(q_value(tape, h_s, h_a, vars))
            }
            (Solution::TspTour(perm), Action::SeqSwap { i, j }) => {
                let perm = perm.clone();
                let h_a = tsp_action_embed(tape, self.mu, &perm, *i, *j);
                let h_s = self.h_s_tsp.expect("tsp net has a state embedding");
                Ok(q_value(tape, h_s, h_a, vars))
            }
            _ => Err(Error::ConstraintViolation("action family does not match state".into())),
        }
    }

    /// Proposal logits and distribution over `actions`.
    pub fn propose(
        &self,
        tape: &mut Tape,
        vars: &NetVars,
        actions: &[Action],
    ) -> Result<(Var, Var)> {
        let perm = match &self.solution {
            Solution::TspTour(p) => Some(p.as_slice()),
            Solution::KCutLabels(_) => None,
        };
        ap_propose(tape, self.h_s_ap, self.mu, vars, actions, perm)
    }
}

/// Fully evaluated state on its own tape: embeddings, the proposal
/// distribution over the canonical non-dummy action list, and a Q-evaluation
/// counter.
pub struct StateEval {
    pub tape: Tape,
    pub vars: NetVars,
    net: StateNet,
    pub actions: Vec<Action>,
    pub logits: Var,
    pub dist_var: Var,
    pub dist: Vec<f64>,
    pub q_evals: u64,
}

impl StateEval {
    /// Runs encoder + readout + proposal for one state.
    pub fn new(params: &ModelParams, g: &Graph, problem: &Problem, sol: &Solution) -> Result<Self> {
        sol.validate(problem, g.n())?;
        let actions = crate::env::actions_of_kind(problem, sol, problem.action_kind())?;
        if actions.is_empty() {
            return Err(Error::Protocol("state has no non-dummy legal actions".into()));
        }
        let mut tape = Tape::new();
        let vars = NetVars::insert(&mut tape, params);
        let net = StateNet::build(&mut tape, &vars, &params.config, g, sol)?;
        let (logits, dist_var) = net.propose(&mut tape, &vars, &actions)?;
        let dist = tape.value(dist_var).data.clone();
        Ok(StateEval { tape, vars, net, actions, logits, dist_var, dist, q_evals: 0 })
    }

    /// Q value of one candidate action (side effect: extends the tape and
    /// bumps the evaluation counter). Dummy is the pinned constant.
    pub fn q_of(&mut self, action: &Action) -> Result<f64> {
        if action.is_dummy() {
            return Ok(DUMMY_Q);
        }
        let var = self.net.q_var(&mut self.tape, &self.vars, action)?;
        self.q_evals += 1;
        Ok(self.tape.value(var).item())
    }

    /// Index of `action` in the canonical action list.
    pub fn action_index(&self, action: &Action) -> Option<usize> {
        self.actions.iter().position(|a| a == action)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::GenSpec;
    use crate::tensor::softmax_raw;

    fn small_graph() -> Graph {
        crate::gen::generate(&GenSpec::uniform(5, 2, 4, 3)).unwrap()
    }

    fn kcut_cfg(k: u32, d: usize) -> ModelConfig {
        ModelConfig::new(&Problem::KCut { k, sizes: None }, 2, d, 2).unwrap()
    }

    #[test]
    fn zero_params_give_zero_embeddings() {
        let g = small_graph();
        let cfg = kcut_cfg(2, 4);
        let params = ModelParams::zeros(cfg.clone());
        let sol = Solution::KCutLabels(vec![1, 2, 1, 2, 1]);
        let mut tape = Tape::new();
        let vars = NetVars::insert(&mut tape, &params);
        let x = features(&cfg, &g, &sol).unwrap();
        let mu = mpnn_forward(&mut tape, &g, &x, &vars, &cfg).unwrap();
        assert!(tape.value(mu).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_round_matches_analytic_form() {
        let g = small_graph();
        let mut cfg = kcut_cfg(2, 3);
        cfg.rounds = 1;
        let params = ModelParams::init(cfg.clone(), 9);
        let sol = Solution::KCutLabels(vec![1, 2, 2, 1, 1]);
        let mut tape = Tape::new();
        let vars = NetVars::insert(&mut tape, &params);
        let x = features(&cfg, &g, &sol).unwrap();
        let mu = mpnn_forward(&mut tape, &g, &x, &vars, &cfg).unwrap();
        // With mu0 = 0 the neighbor-message term vanishes:
        // mu1_v = relu(theta0 x_v + theta2 mean_u relu(theta3 w_uv)).
        let th0 = params.tensor("theta0");
        let th2 = params.tensor("theta2");
        let th3 = params.tensor("theta3");
        for v in 0..g.n() {
            for row in 0..cfg.d {
                let mut pre = 0.0;
                for c in 0..cfg.p {
                    pre += th0.at(row, c) * x.at(v, c);
                }
                let nv = g.neighbors(v);
                for c in 0..cfg.p {
                    let mean: f64 = nv
                        .iter()
                        .map(|&u| (g.weight(v, u) * th3.data[c]).max(0.0))
                        .sum::<f64>()
                        / nv.len() as f64;
                    pre += th2.at(row, c) * mean;
                }
                let want = pre.max(0.0);
                let got = tape.value(mu).at(v, row);
                assert!((want - got).abs() < 1e-12, "node {v} dim {row}");
            }
        }
    }

    #[test]
    fn singleton_cluster_mean_is_node_embedding() {
        let g = small_graph();
        let cfg = kcut_cfg(3, 4);
        let params = ModelParams::init(cfg.clone(), 2);
        let labels = vec![1, 1, 2, 1, 3]; // cluster 3 = {4}
        let sol = Solution::KCutLabels(labels.clone());
        let mut tape = Tape::new();
        let vars = NetVars::insert(&mut tape, &params);
        let x = features(&cfg, &g, &sol).unwrap();
        let mu = mpnn_forward(&mut tape, &g, &x, &vars, &cfg).unwrap();
        let h_c = kcut_cluster_embed(&mut tape, mu, &labels, 3);
        for t in 0..cfg.d {
            assert_eq!(tape.value(h_c).at(2, t), tape.value(mu).at(4, t));
        }
    }

    #[test]
    fn swap_embedding_is_block_permutation_of_reverse() {
        let g = small_graph();
        let cfg = ModelConfig::new(
            &Problem::KCut { k: 2, sizes: Some(vec![3, 2]) },
            2,
            4,
            2,
        )
        .unwrap();
        let params = ModelParams::init(cfg.clone(), 4);
        let labels = vec![1, 1, 2, 1, 2];
        let sol = Solution::KCutLabels(labels.clone());
        let mut tape = Tape::new();
        let vars = NetVars::insert(&mut tape, &params);
        let x = features(&cfg, &g, &sol).unwrap();
        let mu = mpnn_forward(&mut tape, &g, &x, &vars, &cfg).unwrap();
        let h_c = kcut_cluster_embed(&mut tape, mu, &labels, 2);
        let ab = kcut_action_embed(&mut tape, mu, h_c, &labels, &Action::Swap { i: 0, j: 2 }).unwrap();
        let ba = kcut_action_embed(&mut tape, mu, h_c, &labels, &Action::Swap { i: 2, j: 0 }).unwrap();
        let d = cfg.d;
        let fwd = &tape.value(ab).data;
        let rev = &tape.value(ba).data;
        assert_eq!(fwd[0..d], rev[d..2 * d]);
        assert_eq!(fwd[d..2 * d], rev[0..d]);
        assert_eq!(fwd[2 * d..3 * d], rev[3 * d..4 * d]);
        assert_eq!(fwd[3 * d..4 * d], rev[2 * d..3 * d]);
    }

    #[test]
    fn attention_weights_normalize_and_degenerate_cases() {
        let g = small_graph();
        // k = 1: the single cluster takes all the attention.
        let cfg1 = kcut_cfg(1, 4);
        let params1 = ModelParams::init(cfg1.clone(), 5);
        let labels1 = vec![1; 5];
        let sol1 = Solution::KCutLabels(labels1.clone());
        let mut tape = Tape::new();
        let vars = NetVars::insert(&mut tape, &params1);
        let x = features(&cfg1, &g, &sol1).unwrap();
        let mu = mpnn_forward(&mut tape, &g, &x, &vars, &cfg1).unwrap();
        let h_c = kcut_cluster_embed(&mut tape, mu, &labels1, 1);
        // k=1 has no flip actions; drive attention with a synthetic query.
        let h_a = tape.constant(Tensor::from_vec(&[2 * cfg1.d], vec![0.3; 2 * cfg1.d]));
        let (w, h_s) = kcut_state_embed(&mut tape, h_c, h_a, &vars);
        assert_eq!(tape.value(w).data, vec![1.0]);
        for t in 0..cfg1.d {
            assert_eq!(tape.value(h_s).data[t], tape.value(h_c).at(0, t));
        }

        // Zero attention matrix: uniform weights over k clusters.
        let cfg = kcut_cfg(3, 4);
        let mut params = ModelParams::init(cfg.clone(), 6);
        let attn_shape = params.tensor("attn").shape.clone();
        *params.tensor_mut("attn") = Tensor::zeros(&attn_shape);
        let labels = vec![1, 2, 3, 1, 2];
        let sol = Solution::KCutLabels(labels.clone());
        let mut tape = Tape::new();
        let vars = NetVars::insert(&mut tape, &params);
        let x = features(&cfg, &g, &sol).unwrap();
        let mu = mpnn_forward(&mut tape, &g, &x, &vars, &cfg).unwrap();
        let h_c = kcut_cluster_embed(&mut tape, mu, &labels, 3);
        let h_a =
            kcut_action_embed(&mut tape, mu, h_c, &labels, &Action::Flip { node: 0, label: 2 })
                .unwrap();
        let (w, _h_s) = kcut_state_embed(&mut tape, h_c, h_a, &vars);
        for &wi in &tape.value(w).data {
            assert!((wi - 1.0 / 3.0).abs() < 1e-12);
        }

        // Random case: weights sum to one.
        let params = ModelParams::init(cfg.clone(), 77);
        let mut tape = Tape::new();
        let vars = NetVars::insert(&mut tape, &params);
        let x = features(&cfg, &g, &sol).unwrap();
        let mu = mpnn_forward(&mut tape, &g, &x, &vars, &cfg).unwrap();
        let h_c = kcut_cluster_embed(&mut tape, mu, &labels, 3);
        let h_a =
            kcut_action_embed(&mut tape, mu, h_c, &labels, &Action::Flip { node: 1, label: 3 })
                .unwrap();
        let (w, _) = kcut_state_embed(&mut tape, h_c, h_a, &vars);
        let total: f64 = tape.value(w).data.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rnn_readout_cases() {
        let g = crate::gen::generate(&GenSpec::uniform(4, 2, 3, 8)).unwrap();
        let cfg = ModelConfig::new(&Problem::Tsp, 2, 4, 2).unwrap();

        // Zero parameters: H_s = 0 (tanh of zero everywhere).
        let zero = ModelParams::zeros(cfg.clone());
        let perm = vec![0, 1, 2, 3];
        let sol = Solution::TspTour(perm.clone());
        let mut tape = Tape::new();
        let vars = NetVars::insert(&mut tape, &zero);
        let x = features(&cfg, &g, &sol).unwrap();
        let mu = mpnn_forward(&mut tape, &g, &x, &vars, &cfg).unwrap();
        let h = tsp_state_embed(&mut tape, mu, &perm, &vars);
        assert!(tape.value(h).data.iter().all(|&v| v == 0.0));

        // Single node: H_s = tanh(U mu_0 + b).
        let g1 = Graph::from_coords(1, 2, vec![0.25, 0.5]).unwrap();
        let params = ModelParams::init(cfg.clone(), 11);
        let sol1 = Solution::TspTour(vec![0]);
        let mut tape = Tape::new();
        let vars = NetVars::insert(&mut tape, &params);
        let x1 = features(&cfg, &g1, &sol1).unwrap();
        let mu1 = mpnn_forward(&mut tape, &g1, &x1, &vars, &cfg).unwrap();
        let h1 = tsp_state_embed(&mut tape, mu1, &[0], &vars);
        let u = params.tensor("rnn_u");
        let b = params.tensor("rnn_b");
        for r in 0..cfg.d {
            let mut pre = b.data[r];
            for c in 0..cfg.d {
                pre += u.at(r, c) * tape.value(mu1).at(0, c);
            }
            assert!((tape.value(h1).data[r] - pre.tanh()).abs() < 1e-12);
        }

        // Generic weights distinguish tour orientation.
        let params = ModelParams::init(cfg.clone(), 13);
        let mut tape = Tape::new();
        let vars = NetVars::insert(&mut tape, &params);
        let x = features(&cfg, &g, &sol).unwrap();
        let mu = mpnn_forward(&mut tape, &g, &x, &vars, &cfg).unwrap();
        let fwd = tsp_state_embed(&mut tape, mu, &[0, 1, 2, 3], &vars);
        let rev = tsp_state_embed(&mut tape, mu, &[3, 2, 1, 0], &vars);
        let diff: f64 = tape
            .value(fwd)
            .data
            .iter()
            .zip(&tape.value(rev).data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "orientation should matter for generic weights");
    }

    #[test]
    fn tsp_action_embed_wraparound_positions() {
        let g = crate::gen::generate(&GenSpec::uniform(4, 2, 3, 8)).unwrap();
        let cfg = ModelConfig::new(&Problem::Tsp, 2, 4, 1).unwrap();
        let params = ModelParams::init(cfg.clone(), 3);
        let perm = vec![2, 0, 3, 1];
        let sol = Solution::TspTour(perm.clone());
        let mut tape = Tape::new();
        let vars = NetVars::insert(&mut tape, &params);
        let x = features(&cfg, &g, &sol).unwrap();
        let mu = mpnn_forward(&mut tape, &g, &x, &vars, &cfg).unwrap();
        let block = |tape: &Tape, v: Var, b: usize| {
            tape.value(v).data[b * cfg.d..(b + 1) * cfg.d].to_vec()
        };
        let mu_at = |tape: &Tape, pos: usize| {
            let node = perm[pos];
            (0..cfg.d).map(|t| tape.value(mu).at(node, t)).collect::<Vec<_>>()
        };
        // Middle segment (positions 1..=2): blocks are positions (1, 2, 0, 3).
        let ha = tsp_action_embed(&mut tape, mu, &perm, 1, 2);
        for (bi, pos) in [(0, 1), (1, 2), (2, 0), (3, 3)] {
            assert_eq!(block(&tape, ha, bi), mu_at(&tape, pos));
        }
        // First position wraps its predecessor to the tour end.
        let ha = tsp_action_embed(&mut tape, mu, &perm, 0, 2);
        assert_eq!(block(&tape, ha, 2), mu_at(&tape, 3));
        // Last position wraps its successor to the tour start.
        let ha = tsp_action_embed(&mut tape, mu, &perm, 1, 3);
        assert_eq!(block(&tape, ha, 3), mu_at(&tape, 0));
    }

    #[test]
    fn q_head_clamps() {
        let g = small_graph();
        let cfg = kcut_cfg(2, 4);

        // W0 = 0 forces Q = 0.
        let mut params = ModelParams::init(cfg.clone(), 19);
        let w0_shape = params.tensor("w0").shape.clone();
        *params.tensor_mut("w0") = Tensor::zeros(&w0_shape);
        let sol = Solution::KCutLabels(vec![1, 2, 1, 2, 1]);
        let mut se = StateEval::new(&params, &g, &Problem::max_cut(), &sol).unwrap();
        let a = se.actions[0];
        assert_eq!(se.q_of(&a).unwrap(), 0.0);

        // All-negative pre-activations die in the relu regardless of W0.
        let mut params = ModelParams::init(cfg.clone(), 23);
        for name in ["w1", "w2"] {
            let t = params.tensor_mut(name);
            for v in t.data.iter_mut() {
                *v = -v.abs() - 0.1;
            }
        }
        // Positive H_s/H_a components are guaranteed by relu embeddings, but
        // zero embeddings would still give zero; force a strictly negative
        // preactivation case by checking the hidden layer directly.
        let mut se = StateEval::new(&params, &g, &Problem::max_cut(), &sol).unwrap();
        let a = se.actions[0];
        let q = se.q_of(&a).unwrap();
        // hidden = relu(negative . nonnegative) = 0 unless embeddings are 0,
        // in which case Q = 0 anyway.
        assert_eq!(q, 0.0);
    }

    #[test]
    fn proposal_uniform_when_pseudo_action_is_zero() {
        let g = small_graph();
        let cfg = kcut_cfg(2, 4);
        let mut params = ModelParams::init(cfg.clone(), 31);
        for name in ["ap_w1", "ap_b1", "ap_w2", "ap_b2"] {
            let shape = params.tensor(name).shape.clone();
            *params.tensor_mut(name) = Tensor::zeros(&shape);
        }
        let sol = Solution::KCutLabels(vec![1, 2, 1, 2, 1]);
        let se = StateEval::new(&params, &g, &Problem::max_cut(), &sol).unwrap();
        let want = 1.0 / se.actions.len() as f64;
        for &p in &se.dist {
            assert!((p - want).abs() < 1e-12);
        }
        let total: f64 = se.dist.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn proposal_ranking_matches_brute_force_enumeration() {
        // Hand-set scores s = (1, 0, 0, 0) on a 4-node tour; enumerate all
        // C(4,2) pairwise logits directly and compare rankings.
        let scores = vec![1.0, 0.0, 0.0, 0.0];
        let theta = 0.7;
        let perm = vec![0, 1, 2, 3];
        let mut actions = Vec::new();
        for i in 0..4 {
            for j in (i + 1)..4 {
                actions.push(Action::SeqSwap { i, j });
            }
        }
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::from_vec(&[4], scores.clone()));
        let th = tape.leaf(Tensor::scalar(theta));
        let items = actions
            .iter()
            .map(|a| logit_item(a, Some(&perm)).unwrap())
            .collect::<Vec<_>>();
        let logits = tape.proposal_logits(s, th, items);
        let dist = tape.softmax(logits);
        let got = tape.value(dist).data.clone();

        let brute: Vec<f64> = actions
            .iter()
            .map(|a| match a {
                Action::SeqSwap { i, j } => {
                    let (si, sj) = (scores[perm[*i]], scores[perm[*j]]);
                    si + sj + theta * si * sj
                }
                _ => unreachable!(),
            })
            .collect();
        let brute = softmax_raw(&brute);
        for (g, b) in got.iter().zip(&brute) {
            assert!((g - b).abs() < 1e-12);
        }
        // Ranking: pairs touching node 0 (score 1) must lead.
        let mut order: Vec<usize> = (0..actions.len()).collect();
        order.sort_by(|&a, &b| got[b].partial_cmp(&got[a]).unwrap());
        for idx in &order[..3] {
            match actions[*idx] {
                Action::SeqSwap { i, j } => assert!(perm[i] == 0 || perm[j] == 0),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn eliminate_counts_and_degenerate_cases() {
        let mut rng = rng::substream(5, tag::ELIMINATE, 0);
        let dist = vec![1.0 / 45.0; 45];
        let full = eliminate_actions(&dist, 1.0, &mut rng).unwrap();
        assert_eq!(full, (0..45).collect::<Vec<_>>());
        let subset = eliminate_actions(&dist, 0.1, &mut rng).unwrap();
        assert_eq!(subset.len(), 5); // ceil(0.1 * 45)
        let mut sorted = subset.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 5, "indices must be distinct");
        assert!(eliminate_actions(&dist, 0.0, &mut rng).is_err());
        assert!(eliminate_actions(&dist, 1.5, &mut rng).is_err());
    }

    #[test]
    fn eliminate_frequency_matches_distribution() {
        let dist = vec![0.5, 0.3, 0.2];
        let mut counts = [0usize; 3];
        let trials = 100_000;
        let mut rng = rng::substream(9, tag::ELIMINATE, 1);
        for _ in 0..trials {
            let picked = eliminate_actions(&dist, 1e-9, &mut rng).unwrap();
            assert_eq!(picked.len(), 1);
            counts[picked[0]] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!((freq - dist[i]).abs() < 0.01, "action {i}: {freq} vs {}", dist[i]);
        }
    }

    #[test]
    fn cluster_means_incremental_matches_recompute() {
        let g = small_graph();
        let cfg = kcut_cfg(3, 4);
        let params = ModelParams::init(cfg.clone(), 41);
        let mut labels = vec![1, 2, 3, 1, 2];
        let sol = Solution::KCutLabels(labels.clone());
        let mut tape = Tape::new();
        let vars = NetVars::insert(&mut tape, &params);
        let x = features(&cfg, &g, &sol).unwrap();
        let mu_var = mpnn_forward(&mut tape, &g, &x, &vars, &cfg).unwrap();
        let mu = tape.value(mu_var).clone();

        let mut cm = ClusterMeans::compute(&mu, &labels, 3);
        // flip node 0: 1 -> 3
        cm.apply_flip(&mu, 0, 1, 3);
        labels[0] = 3;
        let full = ClusterMeans::compute(&mu, &labels, 3).means();
        for (a, b) in cm.means().data.iter().zip(&full.data) {
            assert!((a - b).abs() < 1e-9);
        }
        // swap labels of nodes 1 and 2 (2 <-> 3)
        cm.apply_swap(&mu, 1, 2, labels[1], labels[2]);
        labels.swap(1, 2);
        let full = ClusterMeans::compute(&mu, &labels, 3).means();
        for (a, b) in cm.means().data.iter().zip(&full.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_shape_validation() {
        let cfg = kcut_cfg(2, 4);
        let params = ModelParams::init(cfg, 55);
        let text = params.to_checkpoint_json().unwrap();
        let back = ModelParams::from_checkpoint_json(&text).unwrap();
        assert_eq!(params, back);

        // Corrupt a shape: load must fail with a dimension error.
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["tensors"]["w0"]["shape"] = serde_json::json!([2, 2]);
        let err = ModelParams::from_checkpoint_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "{err}");
    }

    #[test]
    fn ap_loss_uniform_and_deterministic_cases() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(&[4], vec![0.0; 4]));
        let l = ap_loss(&mut tape, logits, 1, 0.0);
        assert!((tape.value(l).item() - 4.0f64.ln()).abs() < 1e-12);
    }
}
