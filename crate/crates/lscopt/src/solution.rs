//! Problems, solutions and the reversible perturbations that act on them.
//!
//! Conventions: node indices and tour positions are 0-based throughout code
//! and serialized output; k-cut labels are the values `1..=k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which combinatorial problem a solution belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Problem {
    /// Minimize total within-cluster edge weight over `k` labels. When
    /// `sizes` is present the per-label counts are fixed and only swaps are
    /// legal; otherwise single-node flips are.
    KCut { k: u32, sizes: Option<Vec<usize>> },
    /// Closed-tour length minimization over the complete metric.
    Tsp,
}

/// The move family a problem's legal action set is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Flip,
    Swap,
    SeqSwap,
}

impl Problem {
    pub fn max_cut() -> Self {
        Problem::KCut { k: 2, sizes: None }
    }

    /// Default action family: flips for unconstrained k-cut, swaps when
    /// cluster sizes are prescribed, segment reversals for TSP.
    pub fn action_kind(&self) -> ActionKind {
        match self {
            Problem::KCut { sizes: None, .. } => ActionKind::Flip,
            Problem::KCut { sizes: Some(_), .. } => ActionKind::Swap,
            Problem::Tsp => ActionKind::SeqSwap,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            Problem::KCut { k, sizes } => {
                if *k == 0 {
                    return Err(Error::Config("k must be >= 1".into()));
                }
                if let Some(sizes) = sizes {
                    if sizes.len() != *k as usize {
                        return Err(Error::Config(format!(
                            "{} sizes given for k={k}",
                            sizes.len()
                        )));
                    }
                    if sizes.iter().sum::<usize>() != n {
                        return Err(Error::Config(format!(
                            "prescribed sizes sum to {}, graph has {n} nodes",
                            sizes.iter().sum::<usize>()
                        )));
                    }
                }
                Ok(())
            }
            Problem::Tsp => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Problem::KCut { sizes: None, k } if *k == 2 => "maxcut",
            Problem::KCut { .. } => "kcut",
            Problem::Tsp => "tsp",
        }
    }
}

/// A complete assignment: per-node labels for k-cut, a tour for TSP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Solution {
    KCutLabels(Vec<u32>),
    TspTour(Vec<usize>),
}

impl Solution {
    pub fn labels(&self) -> Result<&[u32]> {
        match self {
            Solution::KCutLabels(l) => Ok(l),
            Solution::TspTour(_) => Err(Error::InvalidSolution("expected labels, got a tour".into())),
        }
    }

    pub fn tour(&self) -> Result<&[usize]> {
        match self {
            Solution::TspTour(t) => Ok(t),
            Solution::KCutLabels(_) => Err(Error::InvalidSolution("expected a tour, got labels".into())),
        }
    }

    /// Structural validity against a problem on an `n`-node graph.
    pub fn validate(&self, problem: &Problem, n: usize) -> Result<()> {
        match (problem, self) {
            (Problem::KCut { k, sizes }, Solution::KCutLabels(labels)) => {
                if labels.len() != n {
                    return Err(Error::InvalidSolution(format!(
                        "{} labels for {n} nodes",
                        labels.len()
                    )));
                }
                for (v, &l) in labels.iter().enumerate() {
                    if l < 1 || l > *k {
                        return Err(Error::InvalidSolution(format!(
                            "label {l} of node {v} outside 1..={k}"
                        )));
                    }
                }
                if let Some(sizes) = sizes {
                    let mut counts = vec![0usize; *k as usize];
                    for &l in labels {
                        counts[(l - 1) as usize] += 1;
                    }
                    if &counts != sizes {
                        return Err(Error::InvalidSolution(format!(
                            "label counts {counts:?} differ from prescribed {sizes:?}"
                        )));
                    }
                }
                Ok(())
            }
            (Problem::Tsp, Solution::TspTour(perm)) => {
                if perm.len() != n {
                    return Err(Error::InvalidSolution(format!(
                        "tour of length {} for {n} nodes",
                        perm.len()
                    )));
                }
                let mut seen = vec![false; n];
                for &v in perm {
                    if v >= n || seen[v] {
                        return Err(Error::InvalidSolution("tour is not a permutation".into()));
                    }
                    seen[v] = true;
                }
                Ok(())
            }
            _ => Err(Error::InvalidSolution("solution variant does not match problem".into())),
        }
    }
}

/// A reversible perturbation. `Dummy` leaves the solution unchanged and
/// terminates an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    /// Set `node`'s label to `label` (must differ from its current one).
    Flip { node: usize, label: u32 },
    /// Exchange the labels of nodes `i` and `j` (must differ).
    Swap { i: usize, j: usize },
    /// Reverse the tour segment between positions `i..=j`, `i < j`.
    SeqSwap { i: usize, j: usize },
    Dummy,
}

impl Action {
    pub fn is_dummy(&self) -> bool {
        matches!(self, Action::Dummy)
    }
}

/// Solution file record: `{problem, labels|perm, objective}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub problem: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perm: Option<Vec<usize>>,
    pub objective: f64,
}

impl SolutionRecord {
    pub fn new(problem: &Problem, solution: &Solution, objective: f64) -> Self {
        let (labels, perm) = match solution {
            Solution::KCutLabels(l) => (Some(l.clone()), None),
            Solution::TspTour(p) => (None, Some(p.clone())),
        };
        SolutionRecord { problem: problem.name().to_string(), labels, perm, objective }
    }
}
