//! Graph data model: immutable clean networks with optional node features,
//! per-node class labels, and the adjacency views the models consume.

pub mod io;
pub mod sbm;
pub mod split;
pub mod stats;

pub use sbm::{sbm_generate, SbmConfig};
pub use split::{split_nodes, Split};
pub use stats::{
    degree_entropy, degree_entropy_raw, edge_similarity_distribution, gini_coefficient,
    powerlaw_exponent, triangle_count, SimilarityDistribution, StatsReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SparseMatrix, Tensor};

/// What the feature matrix holds, if anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Discrete,
    Continuous,
    None,
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureKind::Discrete => write!(f, "discrete"),
            FeatureKind::Continuous => write!(f, "continuous"),
            FeatureKind::None => write!(f, "none"),
        }
    }
}

/// Undirected, unweighted, simple graph with labels and optional features.
///
/// The edge list is canonical (u < v, sorted, deduplicated) and immutable
/// after construction; adjacency views are derived on demand.
#[derive(Debug, Clone)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    features: Option<Tensor>,
    feature_kind: FeatureKind,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Graph {
    /// Build a graph, canonicalizing the edge list. Self-loops and duplicate
    /// edges are dropped (counted in the log); everything else must be valid.
    pub fn new(
        n: usize,
        edges: Vec<(usize, usize)>,
        features: Option<Tensor>,
        feature_kind: FeatureKind,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {n} nodes",
                labels.len()
            )));
        }
        match (&features, feature_kind) {
            (None, FeatureKind::None) => {}
            (Some(f), FeatureKind::Discrete | FeatureKind::Continuous) => {
                if f.rows() != n {
                    return Err(Error::Dimension(format!(
                        "feature matrix has {} rows for {n} nodes",
                        f.rows()
                    )));
                }
            }
            _ => {
                return Err(Error::Parameter(
                    "feature kind does not match feature presence".into(),
                ))
            }
        }

        let mut canonical: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        let mut self_loops = 0usize;
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Dimension(format!(
                    "edge ({u},{v}) outside 0..{n}"
                )));
            }
            if u == v {
                self_loops += 1;
                continue;
            }
            canonical.push((u.min(v), u.max(v)));
        }
        canonical.sort_unstable();
        let before = canonical.len();
        canonical.dedup();
        let duplicates = before - canonical.len();
        if self_loops + duplicates > 0 {
            log::warn!("dropped {self_loops} self-loops and {duplicates} duplicate edges");
        }

        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in &canonical {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }

        let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);

        Ok(Graph {
            n,
            edges: canonical,
            neighbors,
            features,
            feature_kind,
            labels,
            num_classes,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Undirected edge count.
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Canonical (u < v) edge list.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[u]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors[u].binary_search(&v).is_ok()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(|l| l.len()).collect()
    }

    pub fn avg_degree(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            2.0 * self.edges.len() as f64 / self.n as f64
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_members(&self, class: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn feature_kind(&self) -> FeatureKind {
        self.feature_kind
    }

    pub fn features(&self) -> Option<&Tensor> {
        self.features.as_ref()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.as_ref().map_or(0, |f| f.cols())
    }

    /// Sum of all feature entries (the count of ones for discrete graphs).
    pub fn feature_sum(&self) -> f64 {
        self.features
            .as_ref()
            .map_or(0.0, |f| f.values().iter().sum())
    }

    /// Binary adjacency as CSR (zero diagonal).
    pub fn adjacency(&self) -> SparseMatrix {
        let mut triplets = Vec::with_capacity(2 * self.edges.len());
        for &(u, v) in &self.edges {
            triplets.push((u, v, 1.0));
            triplets.push((v, u, 1.0));
        }
        SparseMatrix::from_triplets(self.n, self.n, &triplets).expect("edges validated")
    }

    /// Symmetric GCN normalization of this graph's adjacency.
    pub fn normalized_adjacency(&self) -> SparseMatrix {
        normalized_adjacency(self.n, &self.edges)
    }

    /// Features as CSR of nonzero entries (dense rows for continuous data are
    /// simply rows with many nonzeros).
    pub fn features_sparse(&self) -> Option<SparseMatrix> {
        let f = self.features.as_ref()?;
        let mut triplets = Vec::new();
        for i in 0..f.rows() {
            for (j, &v) in f.row(i).iter().enumerate() {
                if v != 0.0 {
                    triplets.push((i, j, v));
                }
            }
        }
        Some(SparseMatrix::from_triplets(f.rows(), f.cols(), &triplets).expect("in range"))
    }
}

/// Symmetric normalization `D^{-1/2} (A + I) D^{-1/2}` with
/// `D_ii = sum_j (A + I)_ij`. Self-loops guarantee positive degrees.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> SparseMatrix {
    let mut deg = vec![1.0f64; n]; // +I contributes 1 per node
    for &(u, v) in edges {
        deg[u] += 1.0;
        deg[v] += 1.0;
    }
    let dinv: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut triplets = Vec::with_capacity(2 * edges.len() + n);
    for i in 0..n {
        triplets.push((i, i, dinv[i] * dinv[i]));
    }
    for &(u, v) in edges {
        let w = dinv[u] * dinv[v];
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    SparseMatrix::from_triplets(n, n, &triplets).expect("edges validated by caller")
}
