//! Weighted-graph problem instances.
//!
//! A [`Graph`] is an undirected weighted graph stored as a dense symmetric
//! weight matrix (`0` means "no edge") plus optional node coordinates. When
//! coordinates are present the full Euclidean metric stays available through
//! [`Graph::dist`] even after k-nearest-neighbor sparsification has zeroed
//! entries of the stored matrix; tour-length evaluation always uses the
//! complete metric while encoders see the sparsified edges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Immutable problem instance: symmetric non-negative weights, zero diagonal,
/// optional coordinates in `[0,1]^h`, and a derived adjacency list.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    h: usize,
    coords: Option<Vec<f64>>, // row-major n x h
    w: Vec<f64>,              // row-major n x n
    neighbors: Vec<Vec<usize>>,
}

/// On-disk JSON form: `{n, h, coords, w}` with `w` dense row-major.
#[derive(Serialize, Deserialize)]
struct GraphJson {
    n: usize,
    h: usize,
    coords: Option<Vec<Vec<f64>>>,
    w: Vec<f64>,
}

impl Graph {
    /// Builds a graph from an explicit weight matrix, validating symmetry,
    /// zero diagonal and non-negativity.
    pub fn from_weights(n: usize, w: Vec<f64>) -> Result<Self> {
        Self::from_parts(n, 0, None, w)
    }

    /// Builds a complete graph whose weights are pairwise Euclidean distances
    /// between `coords` (row-major, `n x h`).
    pub fn from_coords(n: usize, h: usize, coords: Vec<f64>) -> Result<Self> {
        if h == 0 {
            return Err(Error::InvalidSpec("coordinate dimension must be >= 1".into()));
        }
        if coords.len() != n * h {
            return Err(Error::InvalidSpec(format!(
                "expected {} coordinates, got {}",
                n * h,
                coords.len()
            )));
        }
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = euclidean(&coords[i * h..(i + 1) * h], &coords[j * h..(j + 1) * h]);
                w[i * n + j] = d;
                w[j * n + i] = d;
            }
        }
        Self::from_parts(n, h, Some(coords), w)
    }

    pub(crate) fn from_parts(
        n: usize,
        h: usize,
        coords: Option<Vec<f64>>,
        w: Vec<f64>,
    ) -> Result<Self> {
        if w.len() != n * n {
            return Err(Error::InvalidSpec(format!(
                "weight matrix has {} entries, expected {}",
                w.len(),
                n * n
            )));
        }
        if let Some(c) = &coords {
            if c.len() != n * h {
                return Err(Error::InvalidSpec("coords length mismatch".into()));
            }
        }
        for i in 0..n {
            if w[i * n + i] != 0.0 {
                return Err(Error::InvalidSpec(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let wij = w[i * n + j];
                if wij < 0.0 || !wij.is_finite() {
                    return Err(Error::InvalidSpec(format!("bad weight at ({i},{j}): {wij}")));
                }
                if wij != w[j * n + i] {
                    return Err(Error::InvalidSpec(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        let neighbors = build_neighbors(n, &w);
        Ok(Graph { n, h, coords, w, neighbors })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Coordinate dimension; 0 when no coordinates are stored.
    pub fn coord_dim(&self) -> usize {
        if self.coords.is_some() {
            self.h
        } else {
            0
        }
    }

    pub fn coords(&self) -> Option<&[f64]> {
        self.coords.as_deref()
    }

    /// Coordinates of node `v` (panics if the graph has none).
    pub fn coord(&self, v: usize) -> &[f64] {
        let c = self.coords.as_ref().expect("graph has no coordinates");
        &c[v * self.h..(v + 1) * self.h]
    }

    /// Stored edge weight (0 when the edge was sparsified away or absent).
    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    /// Complete-metric distance: Euclidean from coordinates when available,
    /// otherwise the stored weight.
    #[inline]
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        match &self.coords {
            Some(c) => euclidean(&c[i * self.h..(i + 1) * self.h], &c[j * self.h..(j + 1) * self.h]),
            None => self.weight(i, j),
        }
    }

    /// Sorted adjacency of node `i` (the `j` with `w[i][j] > 0`).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Sum of all stored edge weights over unordered pairs.
    pub fn total_weight(&self) -> f64 {
        let mut total = 0.0;
        for i in 0..self.n {
            for &j in &self.neighbors[i] {
                if j > i {
                    total += self.weight(i, j);
                }
            }
        }
        total
    }

    pub fn to_json(&self) -> Result<String> {
        let coords = self.coords.as_ref().map(|c| {
            (0..self.n)
                .map(|i| c[i * self.h..(i + 1) * self.h].to_vec())
                .collect()
        });
        let j = GraphJson { n: self.n, h: self.h, coords, w: self.w.clone() };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: GraphJson = serde_json::from_str(text)?;
        let coords = match j.coords {
            Some(rows) => {
                let mut flat = Vec::with_capacity(j.n * j.h);
                if rows.len() != j.n {
                    return Err(Error::InvalidSpec("coords row count != n".into()));
                }
                for row in rows {
                    if row.len() != j.h {
                        return Err(Error::InvalidSpec("coords row length != h".into()));
                    }
                    flat.extend_from_slice(&row);
                }
                Some(flat)
            }
            None => None,
        };
        Self::from_parts(j.n, j.h, coords, j.w)
    }
}

fn build_neighbors(n: usize, w: &[f64]) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| (0..n).filter(|&j| j != i && w[i * n + j] > 0.0).collect())
        .collect()
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
