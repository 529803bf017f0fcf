//! Synthetic instance generators and k-nearest-neighbor sparsification.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{self, tag};

/// What to generate.
#[derive(Debug, Clone, PartialEq)]
pub enum GenKind {
    /// `n` nodes sampled i.i.d. uniform on `[0,1]^h`.
    Uniform { n: usize },
    /// `k` uniform centroids, `m` Gaussian nodes per centroid with per-cluster
    /// standard deviations `sigmas` (length `k`). Node order is cluster-major.
    KClustered { k: usize, m: usize, sigmas: Vec<f64> },
}

/// Full generation spec. `knn` is the neighbor count for sparsification,
/// clamped to `n - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub kind: GenKind,
    pub h: usize,
    pub knn: usize,
    pub seed: u64,
}

impl GenSpec {
    pub fn uniform(n: usize, h: usize, knn: usize, seed: u64) -> Self {
        GenSpec { kind: GenKind::Uniform { n }, h, knn, seed }
    }

    pub fn k_clustered(k: usize, m: usize, sigmas: Vec<f64>, h: usize, knn: usize, seed: u64) -> Self {
        GenSpec { kind: GenKind::KClustered { k, m, sigmas }, h, knn, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.h < 1 {
            return Err(Error::InvalidSpec("h must be >= 1".into()));
        }
        if self.knn < 1 {
            return Err(Error::InvalidSpec("K must be >= 1".into()));
        }
        match &self.kind {
            GenKind::Uniform { n } => {
                if *n == 0 {
                    return Err(Error::InvalidSpec("n must be >= 1".into()));
                }
            }
            GenKind::KClustered { k, m, sigmas } => {
                if *k == 0 || *m == 0 {
                    return Err(Error::InvalidSpec("k and m must be >= 1".into()));
                }
                if sigmas.is_empty() {
                    return Err(Error::InvalidSpec("sigmas must not be empty".into()));
                }
                if sigmas.len() != *k {
                    return Err(Error::InvalidSpec(format!(
                        "need {} sigmas, got {}",
                        k,
                        sigmas.len()
                    )));
                }
                if sigmas.iter().any(|s| *s < 0.0 || !s.is_finite()) {
                    return Err(Error::InvalidSpec("sigmas must be finite and >= 0".into()));
                }
            }
        }
        Ok(())
    }
}

/// Generates an instance according to `spec.kind`.
pub fn generate(spec: &GenSpec) -> Result<Graph> {
    match spec.kind {
        GenKind::Uniform { .. } => gen_uniform(spec),
        GenKind::KClustered { .. } => gen_k_clustered(spec),
    }
}

/// Uniform instance: coordinates i.i.d. on `[0,1]^h`, complete Euclidean
/// weights, then KNN sparsification with `min(K, n-1)`.
pub fn gen_uniform(spec: &GenSpec) -> Result<Graph> {
    spec.validate()?;
    let n = match spec.kind {
        GenKind::Uniform { n } => n,
        _ => return Err(Error::InvalidSpec("spec kind is not Uniform".into())),
    };
    let mut rng = rng::substream(spec.seed, tag::GEN_UNIFORM, 0);
    let coords: Vec<f64> = (0..n * spec.h).map(|_| rng.gen::<f64>()).collect();
    let g = Graph::from_coords(n, spec.h, coords)?;
    Ok(knn_sparsify(&g, spec.knn.min(n.saturating_sub(1)).max(1)))
}

/// k-clustered instance: `k` uniform centroids, `m` nodes per centroid drawn
/// from an isotropic Gaussian, cluster-major node order, complete Euclidean
/// weights, then KNN sparsification with `min(K, k*m-1)`.
pub fn gen_k_clustered(spec: &GenSpec) -> Result<Graph> {
    spec.validate()?;
    let (k, m, sigmas) = match &spec.kind {
        GenKind::KClustered { k, m, sigmas } => (*k, *m, sigmas.clone()),
        _ => return Err(Error::InvalidSpec("spec kind is not KClustered".into())),
    };
    let n = k * m;
    let mut rng = rng::substream(spec.seed, tag::GEN_CLUSTERED, 0);
    let centroids: Vec<f64> = (0..k * spec.h).map(|_| rng.gen::<f64>()).collect();
    let mut coords = Vec::with_capacity(n * spec.h);
    for c in 0..k {
        for _ in 0..m {
            for d in 0..spec.h {
                let z = rng::standard_normal(&mut rng);
                coords.push(centroids[c * spec.h + d] + sigmas[c] * z);
            }
        }
    }
    let g = Graph::from_coords(n, spec.h, coords)?;
    Ok(knn_sparsify(&g, spec.knn.min(n.saturating_sub(1)).max(1)))
}

/// Keeps edge `(i,j)` iff `j` is among `i`'s `K` nearest neighbors or `i` is
/// among `j`'s (union closure, so the matrix stays symmetric). Ties at the
/// K-th position break toward the lower node index. `K >= n-1` is the
/// identity. Coordinates are carried through unchanged.
pub fn knn_sparsify(g: &Graph, k: usize) -> Graph {
    let n = g.n();
    let mut keep = vec![false; n * n];
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = g
            .neighbors(i)
            .iter()
            .map(|&j| (g.weight(i, j), j))
            .collect();
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in cand.iter().take(k) {
            keep[i * n + j] = true;
            keep[j * n + i] = true;
        }
    }
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if keep[i * n + j] {
                w[i * n + j] = g.weight(i, j);
            }
        }
    }
    let coords = g.coords().map(|c| c.to_vec());
    Graph::from_parts(n, g.coord_dim(), coords, w).expect("sparsified matrix stays valid")
}

/// Samples `k` per-cluster standard deviations uniformly from `[lo, hi)`.
pub fn sample_sigmas(k: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng::substream(seed, tag::SIGMA, 0);
    (0..k).map(|_| rng.gen_range(lo..hi)).collect()
}
