//! Louvain modularity optimization.
//!
//! Each phase moves single vertices to the neighboring community with the
//! largest modularity gain until a pass improves Q by no more than `tol`,
//! then collapses communities into super-vertices. Vertices are visited in
//! ascending id order, so results are deterministic.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{self, stream};

use super::graph::AdjacencyGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityAssignment {
    /// Dense community id per vertex, numbered by first occurrence.
    pub communities: Vec<usize>,
    pub community_count: usize,
    pub modularity: f64,
    /// Q on the input graph after each completed phase.
    pub phase_modularity: Vec<f64>,
}

/// Weighted graph with explicit self-loops. `self_loop[i]` is the ordered-pair
/// sum `A_ii` so that `degree[i] = sum_j A_ij + A_ii`.
struct WorkGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loop: Vec<f64>,
    degree: Vec<f64>,
    two_m: f64,
}

impl WorkGraph {
    fn from_graph(g: &AdjacencyGraph) -> Self {
        let adj = g.adjacency_lists();
        let self_loop = vec![0.0; adj.len()];
        let degree: Vec<f64> = adj.iter().map(|a| a.iter().map(|e| e.1).sum()).collect();
        let two_m = degree.iter().sum();
        Self {
            adj,
            self_loop,
            degree,
            two_m,
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn aggregate(&self, comm: &[usize], count: usize) -> Self {
        let mut self_loop = vec![0.0; count];
        let mut acc: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); count];
        for i in 0..self.len() {
            let ci = comm[i];
            self_loop[ci] += self.self_loop[i];
            for &(j, w) in &self.adj[i] {
                let cj = comm[j];
                if ci == cj {
                    self_loop[ci] += w;
                } else {
                    *acc[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        let adj: Vec<Vec<(usize, f64)>> = acc.into_iter().map(|m| m.into_iter().collect()).collect();
        let degree = (0..count)
            .map(|c| adj[c].iter().map(|e| e.1).sum::<f64>() + self_loop[c])
            .collect();
        Self {
            adj,
            self_loop,
            degree,
            two_m: self.two_m,
        }
    }

    fn modularity(&self, comm: &[usize]) -> f64 {
        let n = comm.iter().copied().max().map_or(0, |m| m + 1);
        let mut inside = vec![0.0; n];
        let mut tot = vec![0.0; n];
        for i in 0..self.len() {
            tot[comm[i]] += self.degree[i];
            inside[comm[i]] += self.self_loop[i];
            for &(j, w) in &self.adj[i] {
                if comm[j] == comm[i] {
                    inside[comm[i]] += w;
                }
            }
        }
        inside
            .iter()
            .zip(&tot)
            .map(|(a, t)| a / self.two_m - (t / self.two_m).powi(2))
            .sum()
    }

    /// Local moving from the given assignment; returns whether anything moved.
    fn local_moving(&self, comm: &mut [usize], tol: f64) -> bool {
        let n = self.len();
        let mut tot = vec![0.0; n];
        for i in 0..n {
            tot[comm[i]] += self.degree[i];
        }
        let mut weight_to = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut any_move = false;
        let mut q = self.modularity(comm);
        loop {
            let mut moved = false;
            for i in 0..n {
                let ci = comm[i];
                let ki = self.degree[i];
                for &(j, w) in &self.adj[i] {
                    let cj = comm[j];
                    if weight_to[cj] == 0.0 {
                        touched.push(cj);
                    }
                    weight_to[cj] += w;
                }
                tot[ci] -= ki;
                let gain = |c: usize, w: f64| w - tot[c] * ki / self.two_m;
                let mut best = ci;
                let mut best_gain = gain(ci, weight_to[ci]);
                touched.sort_unstable();
                for &c in &touched {
                    let g = gain(c, weight_to[c]);
                    if g > best_gain + 1e-12 * best_gain.abs().max(1.0) {
                        best = c;
                        best_gain = g;
                    }
                }
                tot[best] += ki;
                if best != ci {
                    comm[i] = best;
                    moved = true;
                }
                for &c in &touched {
                    weight_to[c] = 0.0;
                }
                touched.clear();
            }
            if !moved {
                break;
            }
            any_move = true;
            let next = self.modularity(comm);
            let improved = next - q;
            q = next;
            if improved <= tol {
                break;
            }
        }
        any_move
    }
}

/// Kernighan-Lin style refinement: each pass moves every vertex once, always
/// taking the best available move (possibly downhill, possibly into a new
/// community), then keeps the best prefix of the pass. Stops when a pass
/// brings no gain. Never lowers Q.
fn refine(g: &WorkGraph, comm: &mut [usize], max_passes: usize) -> bool {
    use std::collections::BTreeMap;
    let n = g.len();
    let mut improved_any = false;
    for _ in 0..max_passes {
        let mut cur = comm.to_vec();
        let mut tot = vec![0.0; n];
        let mut members = vec![0usize; n];
        for i in 0..n {
            tot[cur[i]] += g.degree[i];
            members[cur[i]] += 1;
        }
        let mut wt: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for i in 0..n {
            for &(j, w) in &g.adj[i] {
                *wt[i].entry(cur[j]).or_insert(0.0) += w;
            }
        }
        let m2 = g.two_m;
        let gain = |k: f64, w_to: f64, w_from: f64, tot_to: f64, tot_from: f64| {
            2.0 * (w_to - w_from) / m2 - 2.0 * k * (tot_to - tot_from) / (m2 * m2)
        };
        let mut locked = vec![false; n];
        let mut moves: Vec<(usize, usize)> = Vec::new();
        let (mut q, mut best_q, mut best_len) = (0.0, 0.0, 0);
        for _ in 0..n {
            let mut best: Option<(f64, usize, usize)> = None;
            let empty = members.iter().position(|&c| c == 0);
            for v in (0..n).filter(|&v| !locked[v]) {
                let a = cur[v];
                let k = g.degree[v];
                let w_from = wt[v].get(&a).copied().unwrap_or(0.0);
                let tot_from = tot[a] - k;
                let mut consider = |c: usize, w_to: f64| {
                    let d = gain(k, w_to, w_from, tot[c], tot_from);
                    if best.is_none_or(|(bd, _, _)| d > bd) {
                        best = Some((d, v, c));
                    }
                };
                for (&c, &w_to) in &wt[v] {
                    if c != a {
                        consider(c, w_to);
                    }
                }
                if let Some(e) = empty.filter(|_| members[a] > 1) {
                    consider(e, 0.0);
                }
            }
            let Some((d, v, b)) = best else { break };
            let a = cur[v];
            for &(j, w) in &g.adj[v] {
                let e = wt[j].entry(a).or_insert(0.0);
                *e -= w;
                if *e <= 0.0 {
                    wt[j].remove(&a);
                }
                *wt[j].entry(b).or_insert(0.0) += w;
            }
            tot[a] -= g.degree[v];
            tot[b] += g.degree[v];
            members[a] -= 1;
            members[b] += 1;
            cur[v] = b;
            locked[v] = true;
            moves.push((v, b));
            q += d;
            if q > best_q + 1e-12 {
                best_q = q;
                best_len = moves.len();
            }
        }
        if best_len == 0 {
            break;
        }
        for &(v, b) in &moves[..best_len] {
            comm[v] = b;
        }
        improved_any = true;
    }
    improved_any
}

fn renumber(comm: &mut [usize]) -> usize {
    let mut map = std::collections::HashMap::new();
    for c in comm.iter_mut() {
        let next = map.len();
        *c = *map.entry(*c).or_insert(next);
    }
    map.len()
}

/// Modularity of `communities` on `g`, with `2m` the ordered-pair weight sum.
/// Defined as 0 on a graph without edges.
pub fn modularity(g: &AdjacencyGraph, communities: &[usize]) -> f64 {
    let w = WorkGraph::from_graph(g);
    if w.two_m == 0.0 {
        return 0.0;
    }
    w.modularity(communities)
}

/// One Louvain run visiting vertices in ascending id order.
fn louvain_once(g: &AdjacencyGraph, max_iter: usize, tol: f64) -> CommunityAssignment {
    let base = WorkGraph::from_graph(g);
    let mut membership: Vec<usize> = (0..g.vertex_count).collect();
    let mut work = WorkGraph::from_graph(g);
    let mut phase_modularity = Vec::new();
    for _ in 0..max_iter {
        let mut comm: Vec<usize> = (0..work.len()).collect();
        let moved = work.local_moving(&mut comm, tol);
        let refined = refine(&work, &mut comm, max_iter);
        if !moved && !refined {
            break;
        }
        let count = renumber(&mut comm);
        for m in membership.iter_mut() {
            *m = comm[*m];
        }
        phase_modularity.push(base.modularity(&membership));
        if count == work.len() {
            break;
        }
        work = work.aggregate(&comm, count);
    }
    // Vertex-level polish and refinement on the input graph; never lowers Q.
    let before = base.modularity(&membership);
    let mut polished = membership.clone();
    if base.local_moving(&mut polished, tol) && base.modularity(&polished) > before {
        membership = polished;
    }
    let before = base.modularity(&membership);
    let mut refined = membership.clone();
    if refine(&base, &mut refined, max_iter) && base.modularity(&refined) > before {
        membership = refined;
    }
    let community_count = renumber(&mut membership);
    let q = base.modularity(&membership);
    if phase_modularity.last().is_none_or(|&last| q > last) {
        phase_modularity.push(q);
    }
    CommunityAssignment {
        communities: membership,
        community_count,
        modularity: q,
        phase_modularity,
    }
}

/// Same graph with vertex `v` renamed `perm[v]`.
fn relabel(g: &AdjacencyGraph, perm: &[usize]) -> AdjacencyGraph {
    let edges = g.edges.iter().map(|&(a, b, w)| {
        let (x, y) = (perm[a as usize] as u32, perm[b as usize] as u32);
        (x.min(y), x.max(y), w)
    });
    AdjacencyGraph::from_edges(g.vertex_count, edges, g.params)
}

pub fn louvain(g: &AdjacencyGraph, max_iter: usize, tol: f64) -> CommunityAssignment {
    louvain_with_restarts(g, max_iter, tol, 0)
}

/// Louvain in ascending vertex order, then `restarts` more runs on fixed
/// pseudo-random vertex orders; the highest Q wins, earliest on ties.
pub fn louvain_with_restarts(g: &AdjacencyGraph, max_iter: usize, tol: f64, restarts: usize) -> CommunityAssignment {
    let n = g.vertex_count;
    if g.total_weight() == 0.0 {
        return CommunityAssignment {
            communities: (0..n).collect(),
            community_count: n,
            modularity: 0.0,
            phase_modularity: Vec::new(),
        };
    }
    let mut best = louvain_once(g, max_iter, tol);
    let base = WorkGraph::from_graph(g);
    for r in 0..restarts {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::rng(r as u64, stream::LOUVAIN_ORDER));
        let mut run = louvain_once(&relabel(g, &perm), max_iter, tol);
        if run.modularity > best.modularity + 1e-12 * best.modularity.abs().max(1.0) {
            let mut communities: Vec<usize> = (0..n).map(|v| run.communities[perm[v]]).collect();
            run.community_count = renumber(&mut communities);
            run.communities = communities;
            best = run;
        }
    }
    if restarts > 0 {
        perturb(&base, &mut best, restarts * 4, max_iter, tol);
    }
    best
}

/// Iterated local search: move a few random vertices to random communities,
/// re-optimise, and keep the result only when Q rises.
fn perturb(base: &WorkGraph, best: &mut CommunityAssignment, rounds: usize, max_iter: usize, tol: f64) {
    let n = base.len();
    if n < 2 {
        return;
    }
    let mut r = rng::rng(0, stream::LOUVAIN_ORDER ^ 0xff);
    let kicks = (n / 10).clamp(2, 8).min(n);
    for _ in 0..rounds {
        let mut comm = best.communities.clone();
        for _ in 0..kicks {
            let v = r.random_range(0..n);
            comm[v] = r.random_range(0..=n);
        }
        renumber(&mut comm);
        base.local_moving(&mut comm, tol);
        refine(base, &mut comm, max_iter);
        let q = base.modularity(&comm);
        if q > best.modularity + 1e-12 * best.modularity.abs().max(1.0) {
            best.community_count = renumber(&mut comm);
            best.communities = comm;
            best.modularity = q;
            best.phase_modularity.push(q);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::graph::BuildParams;
    use super::*;

    fn graph(n: usize, edges: &[(u32, u32, f64)]) -> AdjacencyGraph {
        AdjacencyGraph::from_edges(
            n,
            edges.iter().copied(),
            BuildParams {
                eta: 1.0,
                chunked: false,
                chunk_size: 0,
                inter_chunk_weight: 0.0,
            },
        )
    }

    #[test]
    fn two_disjoint_edges() {
        let g = graph(4, &[(0, 1, 1.0), (2, 3, 1.0)]);
        let a = louvain(&g, 100, 1e-6);
        assert_eq!(a.communities, vec![0, 0, 1, 1]);
        assert!((a.modularity - 0.5).abs() < 1e-12);
    }

    #[test]
    fn complete_graph_single_community() {
        let edges: Vec<(u32, u32, f64)> = (0..4u32)
            .flat_map(|a| (a + 1..4).map(move |b| (a, b, 1.0)))
            .collect();
        let g = graph(4, &edges);
        let q = modularity(&g, &[0, 0, 0, 0]);
        assert!(q.abs() < 1e-12);
    }

    fn ring_of_cliques() -> AdjacencyGraph {
        let mut edges = Vec::new();
        for c in 0..4u32 {
            for a in 0..4 {
                for b in a + 1..4 {
                    edges.push((c * 4 + a, c * 4 + b, 1.0));
                }
            }
            edges.push((c * 4, ((c + 1) % 4) * 4 + 1, 0.5));
        }
        graph(16, &edges)
    }

    #[test]
    fn phases_never_lower_q() {
        let a = louvain_with_restarts(&ring_of_cliques(), 100, 1e-6, 4);
        assert!(a.phase_modularity.windows(2).all(|p| p[1] >= p[0] - 1e-12));
        assert_eq!(a.community_count, 4);
    }

    #[test]
    fn no_single_move_improves() {
        let g = ring_of_cliques();
        let a = louvain(&g, 100, 1e-6);
        for v in 0..16 {
            for c in 0..=a.community_count {
                let mut moved = a.communities.clone();
                moved[v] = c;
                assert!(modularity(&g, &moved) <= a.modularity + 1e-12);
            }
        }
    }

    #[test]
    fn restarts_do_not_lower_q() {
        let g = ring_of_cliques();
        let once = louvain(&g, 100, 1e-6).modularity;
        assert!(louvain_with_restarts(&g, 100, 1e-6, 8).modularity >= once);
    }

    #[test]
    fn isolated_vertex() {
        let a = louvain(&graph(1, &[]), 100, 1e-6);
        assert_eq!(a.communities, vec![0]);
        assert_eq!(a.modularity, 0.0);
    }
}
