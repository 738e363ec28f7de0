//! What a passive party knows about the trained trees, and the weighted
//! co-occurrence graph built from it.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::PartyTranscript;
use crate::tree::TreeModel;

/// Known instance spaces of one tree, deduplicated, in observation order,
/// followed by the sibling complements they imply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewTree {
    pub tree_id: usize,
    pub spaces: Vec<Vec<u32>>,
    /// Indices into `spaces` with no known proper subset in this tree.
    pub leaves: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackerView {
    pub sample_count: usize,
    /// Trees in the order they were first observed.
    pub trees: Vec<ViewTree>,
}

fn is_proper_subset(a: &[u32], b: &[u32]) -> bool {
    if a.len() >= b.len() {
        return false;
    }
    let mut j = 0;
    for &x in a {
        while j < b.len() && b[j] < x {
            j += 1;
        }
        if j == b.len() || b[j] != x {
            return false;
        }
        j += 1;
    }
    true
}

fn difference(a: &[u32], b: &[u32]) -> Vec<u32> {
    a.iter().copied().filter(|x| b.binary_search(x).is_err()).collect()
}

/// Splits are binary, so a known space with exactly one known child also
/// reveals the other child as the difference. Repeats until nothing new.
fn close_under_complement(spaces: &mut Vec<Vec<u32>>) {
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..spaces.len() {
            let subs: Vec<usize> = (0..spaces.len())
                .filter(|&j| is_proper_subset(&spaces[j], &spaces[i]))
                .collect();
            let maximal: Vec<usize> = subs
                .iter()
                .copied()
                .filter(|&j| !subs.iter().any(|&k| is_proper_subset(&spaces[j], &spaces[k])))
                .collect();
            if let [only] = maximal[..] {
                let rest = difference(&spaces[i], &spaces[only]);
                if !spaces.contains(&rest) {
                    spaces.push(rest);
                    changed = true;
                }
            }
        }
    }
}

fn minimal_spaces(spaces: &[Vec<u32>]) -> Vec<usize> {
    (0..spaces.len())
        .filter(|&i| !spaces.iter().any(|s| is_proper_subset(s, &spaces[i])))
        .collect()
}

impl AttackerView {
    /// Builds a view from `(tree_id, space)` observations in order.
    pub fn from_observed(sample_count: usize, observed: Vec<(usize, Vec<u32>)>) -> Self {
        let mut order: Vec<usize> = Vec::new();
        let mut by_tree: HashMap<usize, Vec<Vec<u32>>> = HashMap::new();
        for (tree_id, mut space) in observed {
            if space.is_empty() {
                continue;
            }
            space.sort_unstable();
            let entry = by_tree.entry(tree_id).or_insert_with(|| {
                order.push(tree_id);
                Vec::new()
            });
            if !entry.contains(&space) {
                entry.push(space);
            }
        }
        let trees = order
            .into_iter()
            .map(|tree_id| {
                let mut spaces = by_tree.remove(&tree_id).unwrap_or_default();
                close_under_complement(&mut spaces);
                let leaves = minimal_spaces(&spaces);
                ViewTree {
                    tree_id,
                    spaces,
                    leaves,
                }
            })
            .collect();
        Self { sample_count, trees }
    }

    /// View of the party that produced `t`.
    pub fn from_transcript(t: &PartyTranscript) -> Self {
        let observed = t
            .known_spaces()
            .into_iter()
            .map(|(tree, _, s)| (tree, s.to_vec()))
            .collect();
        Self::from_observed(t.sample_count, observed)
    }

    /// View of `party_id` reconstructed from a full model dump: every divided
    /// node counts as broadcast, plus both children of the party's own splits.
    /// Subtrees the label holder grew privately cannot be told apart in a
    /// model dump, so this over-approximates under ID-LMID.
    pub fn from_model(model: &TreeModel, party_id: usize, sample_count: usize) -> Self {
        let mut observed = Vec::new();
        for tree in &model.trees {
            for i in tree.reachable() {
                let node = &tree.nodes[i];
                if let (Some(split), Some((l, r))) = (node.split, node.children) {
                    observed.push((tree.tree_id, node.instance_space.clone()));
                    if split.owner_party == party_id {
                        observed.push((tree.tree_id, tree.nodes[l].instance_space.clone()));
                        observed.push((tree.tree_id, tree.nodes[r].instance_space.clone()));
                    }
                }
            }
        }
        Self::from_observed(sample_count, observed)
    }

    pub fn is_empty(&self) -> bool {
        self.trees.iter().all(|t| t.spaces.is_empty())
    }

    /// Attacker-leaves per tree, in observation order.
    pub fn leaves(&self) -> impl Iterator<Item = (usize, &[u32])> {
        self.trees
            .iter()
            .enumerate()
            .flat_map(|(rank, t)| t.leaves.iter().map(move |&i| (rank, t.spaces[i].as_slice())))
    }

    /// Every known space except whole-training-set ones.
    pub fn non_root_spaces(&self) -> impl Iterator<Item = &[u32]> {
        let n = self.sample_count;
        self.trees
            .iter()
            .flat_map(|t| t.spaces.iter())
            .filter(move |s| s.len() < n)
            .map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildParams {
    pub eta: f64,
    pub chunked: bool,
    pub chunk_size: usize,
    pub inter_chunk_weight: f64,
}

/// Symmetric weighted graph stored as upper-triangle edges `(i, j, w)` with
/// `i < j`, sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyGraph {
    pub vertex_count: usize,
    pub edges: Vec<(u32, u32, f64)>,
    pub params: BuildParams,
}

impl AdjacencyGraph {
    pub fn from_edges(vertex_count: usize, edges: impl IntoIterator<Item = (u32, u32, f64)>, params: BuildParams) -> Self {
        let mut acc: HashMap<(u32, u32), f64> = HashMap::new();
        for (a, b, w) in edges {
            if a == b || w == 0.0 {
                continue;
            }
            *acc.entry((a.min(b), a.max(b))).or_insert(0.0) += w;
        }
        let mut edges: Vec<(u32, u32, f64)> = acc.into_iter().map(|((a, b), w)| (a, b, w)).collect();
        edges.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        Self {
            vertex_count,
            edges,
            params,
        }
    }

    pub fn weight(&self, a: u32, b: u32) -> f64 {
        let key = (a.min(b), a.max(b));
        self.edges
            .binary_search_by(|e| (e.0, e.1).cmp(&key))
            .map_or(0.0, |i| self.edges[i].2)
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.2).sum()
    }

    /// Neighbor lists with both directions of every edge.
    pub fn adjacency_lists(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.vertex_count];
        for &(a, b, w) in &self.edges {
            adj[a as usize].push((b as usize, w));
            adj[b as usize].push((a as usize, w));
        }
        adj
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("eta must be in (0, 1], got {eta}")))
    }
}

fn complete(ids: &[u32], w: f64, out: &mut HashMap<(u32, u32), f64>) {
    for (k, &a) in ids.iter().enumerate() {
        for &b in &ids[k + 1..] {
            *out.entry((a.min(b), a.max(b))).or_insert(0.0) += w;
        }
    }
}

fn finish(view: &AttackerView, acc: HashMap<(u32, u32), f64>, params: BuildParams) -> AdjacencyGraph {
    let mut edges: Vec<(u32, u32, f64)> = acc.into_iter().map(|((a, b), w)| (a, b, w)).collect();
    edges.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    AdjacencyGraph {
        vertex_count: view.sample_count,
        edges,
        params,
    }
}

/// Each attacker-leaf of the `t`-th observed tree adds `eta^(t-1)` to every
/// pair of samples inside it.
pub fn build_adjacency(view: &AttackerView, eta: f64) -> Result<AdjacencyGraph> {
    check_eta(eta)?;
    let mut acc = HashMap::new();
    for (rank, leaf) in view.leaves() {
        complete(leaf, eta.powi(rank as i32), &mut acc);
    }
    Ok(finish(
        view,
        acc,
        BuildParams {
            eta,
            chunked: false,
            chunk_size: 0,
            inter_chunk_weight: 0.0,
        },
    ))
}

/// Bounded-memory variant: a leaf with at least `chunk_size` samples is cut
/// into consecutive chunks, each a complete subgraph, and the last sample of
/// every chunk is tied to the first of the next with weight
/// `inter_chunk_weight`. Smaller leaves are handled exactly.
pub fn build_adjacency_chunked(
    view: &AttackerView,
    eta: f64,
    chunk_size: usize,
    inter_chunk_weight: f64,
) -> Result<AdjacencyGraph> {
    check_eta(eta)?;
    if chunk_size < 2 {
        return Err(Error::InvalidParameter("chunk size must be at least 2".into()));
    }
    if !(inter_chunk_weight > 0.0) {
        return Err(Error::InvalidParameter("inter-chunk weight must be positive".into()));
    }
    let mut acc = HashMap::new();
    for (rank, leaf) in view.leaves() {
        let w = eta.powi(rank as i32);
        if leaf.len() < chunk_size {
            complete(leaf, w, &mut acc);
            continue;
        }
        let chunks: Vec<&[u32]> = leaf.chunks(chunk_size).collect();
        for c in &chunks {
            complete(c, w, &mut acc);
        }
        for pair in chunks.windows(2) {
            let (a, b) = (pair[0][pair[0].len() - 1], pair[1][0]);
            *acc.entry((a.min(b), a.max(b))).or_insert(0.0) += inter_chunk_weight;
        }
    }
    Ok(finish(
        view,
        acc,
        BuildParams {
            eta,
            chunked: true,
            chunk_size,
            inter_chunk_weight,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(trees: Vec<Vec<Vec<u32>>>, n: usize) -> AttackerView {
        let observed = trees
            .into_iter()
            .enumerate()
            .flat_map(|(t, spaces)| spaces.into_iter().map(move |s| (t, s)))
            .collect();
        AttackerView::from_observed(n, observed)
    }

    #[test]
    fn leaves_are_minimal_spaces() {
        let v = view(vec![vec![vec![0, 1, 2, 3], vec![0, 1], vec![2, 3], vec![0, 1]]], 4);
        assert_eq!(v.trees[0].spaces.len(), 3);
        let leaves: Vec<&[u32]> = v.leaves().map(|x| x.1).collect();
        assert_eq!(leaves, vec![&[0, 1][..], &[2, 3][..]]);
    }

    #[test]
    fn complement_of_single_known_child() {
        let v = view(vec![vec![vec![0, 1, 2, 3, 4], vec![0, 1], vec![0]]], 5);
        let mut leaves: Vec<Vec<u32>> = v.leaves().map(|x| x.1.to_vec()).collect();
        leaves.sort();
        assert_eq!(leaves, vec![vec![0], vec![1], vec![2, 3, 4]]);
    }

    #[test]
    fn two_known_children_add_nothing() {
        let mut spaces = vec![vec![0, 1, 2, 3], vec![0], vec![2, 3]];
        close_under_complement(&mut spaces);
        assert_eq!(spaces.len(), 3);
    }

    #[test]
    fn single_pair() {
        let g = build_adjacency(&view(vec![vec![vec![1, 2]]], 4), 1.0).unwrap();
        assert_eq!(g.edges, vec![(1, 2, 1.0)]);
        assert_eq!(g.weight(2, 1), 1.0);
    }

    #[test]
    fn discount_by_tree_rank() {
        let g = build_adjacency(&view(vec![vec![vec![0, 3]], vec![vec![1, 2]]], 4), 0.6).unwrap();
        assert!((g.weight(1, 2) - 0.6).abs() < 1e-15);
        assert_eq!(g.weight(0, 3), 1.0);
    }

    #[test]
    fn overlapping_leaves_accumulate() {
        let g = build_adjacency(&view(vec![vec![vec![1, 2, 3]], vec![vec![2, 3]]], 4), 1.0).unwrap();
        assert_eq!(g.weight(2, 3), 2.0);
        assert_eq!(g.weight(1, 2), 1.0);
        assert_eq!(g.weight(1, 3), 1.0);
    }

    #[test]
    fn chunked_golden() {
        let v = view(vec![vec![vec![1, 2, 3, 4, 5]]], 6);
        let g = build_adjacency_chunked(&v, 1.0, 2, 100.0).unwrap();
        assert_eq!(
            g.edges,
            vec![(1, 2, 1.0), (2, 3, 100.0), (3, 4, 1.0), (4, 5, 100.0)]
        );
    }

    #[test]
    fn empty_view_gives_empty_graph() {
        let v = view(vec![], 5);
        let g = build_adjacency(&v, 1.0).unwrap();
        assert!(g.edges.is_empty());
        assert_eq!(g.vertex_count, 5);
    }
}
