//! Label inference from a passive party's transcript.
//!
//! ID2Graph turns the instance spaces a passive party observed into a
//! sample-similarity graph, finds communities in it with Louvain and clusters
//! the party's own features augmented with community indicators. CL, UNI and
//! UNI+CL are the simpler baselines. Every entry point takes only what the
//! attacker holds: its transcript (or view) and its local feature slice.

pub mod graph;
pub mod kmeans;
pub mod louvain;

use serde::{Deserialize, Serialize};

pub use graph::{build_adjacency, build_adjacency_chunked, AdjacencyGraph, AttackerView, BuildParams};
pub use kmeans::{kmeans, KMeansParams, KMeansResult};
pub use louvain::{louvain, louvain_with_restarts, modularity, CommunityAssignment};

use crate::dataset::minmax_normalize;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::protocol::PartyTranscript;
use crate::tree::ModelKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Id2graph,
    Cl,
    Uni,
    UniCl,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 4] = [AttackMethod::Id2graph, AttackMethod::Cl, AttackMethod::Uni, AttackMethod::UniCl];

    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Id2graph => "id2graph",
            AttackMethod::Cl => "cl",
            AttackMethod::Uni => "uni",
            AttackMethod::UniCl => "uni_cl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackParams {
    /// Per-tree discount; `None` picks 1.0 for forests and 0.6 for boosting.
    pub eta: Option<f64>,
    pub alpha: f64,
    pub chunk_size: usize,
    pub inter_chunk_weight: f64,
    pub louvain_max_iter: usize,
    pub louvain_tol: f64,
    /// Extra shuffled-order runs, plus four perturbation rounds each.
    pub louvain_restarts: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub kmeans_n_init: usize,
    /// UNI over every known non-root space rather than attacker-leaves only.
    pub include_all_nodes: bool,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            eta: None,
            alpha: 3.0,
            chunk_size: 1000,
            inter_chunk_weight: 100.0,
            louvain_max_iter: 100,
            louvain_tol: 1e-6,
            louvain_restarts: 32,
            kmeans_max_iter: 300,
            kmeans_tol: 1e-4,
            kmeans_n_init: 10,
            include_all_nodes: false,
        }
    }
}

impl AttackParams {
    pub fn eta_for(&self, kind: ModelKind) -> f64 {
        self.eta.unwrap_or(match kind {
            ModelKind::RandomForest => 1.0,
            ModelKind::XgBoost => 0.6,
        })
    }

    fn kmeans(&self, k: usize, seed: u64) -> KMeansParams {
        KMeansParams {
            k,
            max_iter: self.kmeans_max_iter,
            tol: self.kmeans_tol,
            n_init: self.kmeans_n_init,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub method: AttackMethod,
    pub clusters: Vec<usize>,
    pub cluster_count: usize,
    pub iterations: usize,
    /// Louvain outcome, ID2Graph only.
    pub modularity: Option<f64>,
    pub community_count: Option<usize>,
    pub edge_count: Option<usize>,
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
    }

    /// Dense component id per element, numbered by first occurrence.
    pub fn components(&mut self) -> Vec<usize> {
        let n = self.parent.len();
        let mut id = vec![usize::MAX; n];
        let mut next = 0;
        (0..n)
            .map(|i| {
                let r = self.find(i);
                if id[r] == usize::MAX {
                    id[r] = next;
                    next += 1;
                }
                id[r]
            })
            .collect()
    }
}

/// One-hot columns for a labeling, scaled by `scale`. Labels shared by every
/// row carry no information and get no column.
fn one_hot(labels: &[usize], scale: f64) -> Matrix {
    let count = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0; count];
    for &l in labels {
        sizes[l] += 1;
    }
    let keep: Vec<usize> = (0..count).filter(|&c| sizes[c] < labels.len()).collect();
    let mut col = vec![usize::MAX; count];
    for (j, &c) in keep.iter().enumerate() {
        col[c] = j;
    }
    let mut m = Matrix::zeros(labels.len(), keep.len());
    for (i, &l) in labels.iter().enumerate() {
        if col[l] != usize::MAX {
            m.set(i, col[l], scale);
        }
    }
    m
}

fn cluster(method: AttackMethod, x: &Matrix, k: usize, params: &AttackParams, seed: u64) -> Result<ClusterResult> {
    if x.rows() != 0 && k > x.rows() {
        return Err(Error::InvalidParameter(format!("k = {k} exceeds {} samples", x.rows())));
    }
    let res = kmeans(x, &params.kmeans(k, seed))?;
    Ok(ClusterResult {
        method,
        clusters: res.labels,
        cluster_count: k,
        iterations: res.iterations,
        modularity: None,
        community_count: None,
        edge_count: None,
    })
}

/// K-means on `[minmax(X), alpha * onehot(communities)]`.
pub fn kmeans_block(
    local_features: &Matrix,
    communities: &CommunityAssignment,
    alpha: f64,
    k: usize,
    params: &AttackParams,
    seed: u64,
) -> Result<ClusterResult> {
    if k < 2 {
        return Err(Error::InvalidParameter("k must be at least 2".into()));
    }
    if alpha < 0.0 {
        return Err(Error::InvalidParameter("alpha must be non-negative".into()));
    }
    let x = minmax_normalize(local_features);
    let x = if alpha > 0.0 {
        x.hstack(&one_hot(&communities.communities, alpha))
    } else {
        x
    };
    let mut res = cluster(AttackMethod::Id2graph, &x, k, params, seed)?;
    res.modularity = Some(communities.modularity);
    res.community_count = Some(communities.community_count);
    Ok(res)
}

/// K-means on the attacker's min-max normalized features alone.
pub fn attack_cl(local_features: &Matrix, class_count: usize, params: &AttackParams, seed: u64) -> Result<ClusterResult> {
    cluster(AttackMethod::Cl, &minmax_normalize(local_features), class_count, params, seed)
}

/// Samples that ever share an attacker-leaf are put in one cluster.
pub fn attack_uni(view: &AttackerView, params: &AttackParams) -> ClusterResult {
    let mut uf = UnionFind::new(view.sample_count);
    let mut join = |space: &[u32]| {
        for w in space.windows(2) {
            uf.union(w[0] as usize, w[1] as usize);
        }
    };
    if params.include_all_nodes {
        view.non_root_spaces().for_each(&mut join);
    } else {
        view.leaves().for_each(|(_, s)| join(s));
    }
    let clusters = uf.components();
    let cluster_count = clusters.iter().copied().max().map_or(0, |m| m + 1);
    ClusterResult {
        method: AttackMethod::Uni,
        clusters,
        cluster_count,
        iterations: 0,
        modularity: None,
        community_count: None,
        edge_count: None,
    }
}

/// K-means on local features plus one-hot UNI components.
pub fn attack_uni_cl(
    view: &AttackerView,
    local_features: &Matrix,
    class_count: usize,
    params: &AttackParams,
    seed: u64,
) -> Result<ClusterResult> {
    let uni = attack_uni(view, params);
    let x = minmax_normalize(local_features).hstack(&one_hot(&uni.clusters, 1.0));
    cluster(AttackMethod::UniCl, &x, class_count, params, seed)
}

/// Full ID2Graph pipeline on an attacker view. A view without any shared
/// leaf yields no edges, and the result coincides with CL.
pub fn attack_id2graph_view(
    view: &AttackerView,
    local_features: &Matrix,
    class_count: usize,
    kind: ModelKind,
    params: &AttackParams,
    seed: u64,
) -> Result<ClusterResult> {
    if local_features.rows() != view.sample_count {
        return Err(Error::LengthMismatch {
            left: local_features.rows(),
            right: view.sample_count,
        });
    }
    let eta = params.eta_for(kind);
    let g = build_adjacency_chunked(view, eta, params.chunk_size, params.inter_chunk_weight)?;
    if g.edges.is_empty() {
        let mut res = attack_cl(local_features, class_count, params, seed)?;
        res.method = AttackMethod::Id2graph;
        res.modularity = Some(0.0);
        res.community_count = Some(view.sample_count);
        res.edge_count = Some(0);
        return Ok(res);
    }
    let communities = louvain_with_restarts(&g, params.louvain_max_iter, params.louvain_tol, params.louvain_restarts);
    let mut res = kmeans_block(local_features, &communities, params.alpha, class_count, params, seed)?;
    res.edge_count = Some(g.edges.len());
    Ok(res)
}

pub fn attack_id2graph(
    transcript: &PartyTranscript,
    local_features: &Matrix,
    class_count: usize,
    kind: ModelKind,
    params: &AttackParams,
    seed: u64,
) -> Result<ClusterResult> {
    attack_id2graph_view(
        &AttackerView::from_transcript(transcript),
        local_features,
        class_count,
        kind,
        params,
        seed,
    )
}

/// Runs `method` against one view.
pub fn run_attack(
    method: AttackMethod,
    view: &AttackerView,
    local_features: &Matrix,
    class_count: usize,
    kind: ModelKind,
    params: &AttackParams,
    seed: u64,
) -> Result<ClusterResult> {
    match method {
        AttackMethod::Id2graph => attack_id2graph_view(view, local_features, class_count, kind, params, seed),
        AttackMethod::Cl => attack_cl(local_features, class_count, params, seed),
        AttackMethod::Uni => Ok(attack_uni(view, params)),
        AttackMethod::UniCl => attack_uni_cl(view, local_features, class_count, params, seed),
    }
}
