//! Label differential privacy: randomized response, prior-aware randomized
//! response, the two-stage LP-MST procedure, and grafting of subtrees that
//! noisy labels pushed the wrong way.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{grow_subtree_local, Party};
use crate::rng::{self, stream};
use crate::tree::{majority, ModelKind, TreeModel, TreeNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Rr,
    Lp1st,
    Lp2st,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyLabels {
    /// The label holder's clean labels.
    pub original: Vec<usize>,
    pub labels: Vec<usize>,
    pub epsilon: f64,
    pub mechanism: Mechanism,
    /// Row positions noised in each stage.
    pub stages: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

/// Probability that randomized response reports the true label.
pub fn keep_probability(epsilon: f64, class_count: usize) -> f64 {
    1.0 / (1.0 + (class_count as f64 - 1.0) * (-epsilon).exp())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")))
    }
}

fn rr_one(y: usize, keep: f64, class_count: usize, r: &mut rng::Rng) -> usize {
    if r.random::<f64>() < keep {
        y
    } else {
        let other = r.random_range(0..class_count - 1);
        if other >= y {
            other + 1
        } else {
            other
        }
    }
}

/// Keeps each label with probability `e^eps / (e^eps + |C| - 1)`, otherwise
/// reports one of the other classes uniformly.
pub fn randomized_response(labels: &[usize], epsilon: f64, class_count: usize, seed: u64) -> Result<NoisyLabels> {
    check_epsilon(epsilon)?;
    let keep = keep_probability(epsilon, class_count);
    let mut r = rng::rng(seed, stream::LABEL_NOISE);
    let noisy = labels.iter().map(|&y| rr_one(y, keep, class_count, &mut r)).collect();
    Ok(NoisyLabels {
        original: labels.to_vec(),
        labels: noisy,
        epsilon,
        mechanism: Mechanism::Rr,
        stages: vec![(0..labels.len()).collect()],
        warnings: Vec::new(),
    })
}

fn validate_prior(prior: &[f64]) -> Result<()> {
    let total: f64 = prior.iter().sum();
    if prior.len() < 2 || prior.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter("prior must be a probability vector over at least two classes".into()));
    }
    Ok(())
}

/// Classes sorted by prior mass (descending, ties by id) and the size `k*`
/// of the candidate set that maximizes the chance of a correct report.
fn top_k(prior: &[f64], epsilon: f64) -> (Vec<usize>, usize) {
    let mut order: Vec<usize> = (0..prior.len()).collect();
    order.sort_by(|&a, &b| prior[b].total_cmp(&prior[a]).then(a.cmp(&b)));
    let mut best = (f64::NEG_INFINITY, 1);
    let mut mass = 0.0;
    for k in 1..=prior.len() {
        mass += prior[order[k - 1]];
        let v = keep_probability(epsilon, k) * mass;
        if v > best.0 {
            best = (v, k);
        }
    }
    (order, best.1)
}

/// Exact output distribution of [`rr_with_prior`] for a true label.
pub fn rr_with_prior_distribution(label: usize, prior: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    check_epsilon(epsilon)?;
    validate_prior(prior)?;
    if label >= prior.len() {
        return Err(Error::InvalidParameter(format!("label {label} outside prior support")));
    }
    let (order, k) = top_k(prior, epsilon);
    let top = &order[..k];
    let mut out = vec![0.0; prior.len()];
    if top.contains(&label) {
        let keep = keep_probability(epsilon, k);
        let other = if k > 1 { (1.0 - keep) / (k - 1) as f64 } else { 0.0 };
        for &c in top {
            out[c] = if c == label { keep } else { other };
        }
    } else {
        for &c in top {
            out[c] = 1.0 / k as f64;
        }
    }
    Ok(out)
}

/// Randomized response restricted to the `k*` most likely classes under
/// `prior`.
pub fn rr_with_prior(label: usize, prior: &[f64], epsilon: f64, r: &mut rng::Rng) -> Result<usize> {
    let dist = rr_with_prior_distribution(label, prior, epsilon)?;
    let u: f64 = r.random();
    let mut acc = 0.0;
    let mut last = label;
    for (c, p) in dist.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last = c;
            if u < acc {
                return Ok(c);
            }
        }
    }
    Ok(last)
}

/// Multi-stage label noising. With two stages the rows are shuffled into
/// halves; the first half gets plain randomized response and trains an
/// interim model through `trainer(stage1_rows, noisy_labels, stage2_rows)`,
/// whose per-row class distributions become the priors for the second half.
/// Every row is noised exactly once.
pub fn lp_mst<F>(
    labels: &[usize],
    class_count: usize,
    epsilon: f64,
    stages: usize,
    trainer: &mut F,
    seed: u64,
) -> Result<NoisyLabels>
where
    F: FnMut(&[usize], &[usize], &[usize]) -> Result<Vec<Vec<f64>>>,
{
    check_epsilon(epsilon)?;
    match stages {
        1 => {
            let mut out = randomized_response(labels, epsilon, class_count, seed)?;
            out.mechanism = Mechanism::Lp1st;
            Ok(out)
        }
        2 => {
            let n = labels.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::rng(seed, stream::LP_STAGES));
            let (a, b) = order.split_at(n / 2);
            let mut stage1 = a.to_vec();
            let mut stage2 = b.to_vec();
            stage1.sort_unstable();
            stage2.sort_unstable();

            let mut warnings = Vec::new();
            for (name, rows) in [("first", &stage1), ("second", &stage2)] {
                let mut seen = vec![false; class_count];
                for &i in rows.iter() {
                    seen[labels[i]] = true;
                }
                for (c, s) in seen.iter().enumerate() {
                    if !s {
                        warnings.push(format!("class {c} absent from the {name} stage"));
                    }
                }
            }

            let keep = keep_probability(epsilon, class_count);
            let mut r = rng::rng(seed, stream::LABEL_NOISE);
            let mut noisy = vec![0; n];
            for &i in &stage1 {
                noisy[i] = rr_one(labels[i], keep, class_count, &mut r);
            }
            let priors = trainer(&stage1, &noisy, &stage2)?;
            if priors.len() != stage2.len() {
                return Err(Error::LengthMismatch {
                    left: priors.len(),
                    right: stage2.len(),
                });
            }
            for (&i, prior) in stage2.iter().zip(&priors) {
                noisy[i] = rr_with_prior(labels[i], prior, epsilon, &mut r)?;
            }
            Ok(NoisyLabels {
                original: labels.to_vec(),
                labels: noisy,
                epsilon,
                mechanism: Mechanism::Lp2st,
                stages: vec![stage1, stage2],
                warnings,
            })
        }
        s => Err(Error::InvalidParameter(format!("stages must be 1 or 2, got {s}"))),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TreeGraftReport {
    pub tree_id: usize,
    /// Nodes whose noisy and clean majorities disagree, pre-repair ids.
    pub contaminated: Vec<usize>,
    /// Nodes whose subtree was erased and regrown on clean labels.
    pub resplit: Vec<usize>,
    pub erased_descendants: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraftReport {
    pub trees: Vec<TreeGraftReport>,
}

impl GraftReport {
    pub fn resplit_count(&self) -> usize {
        self.trees.iter().map(|t| t.resplit.len()).sum()
    }
}

fn counts(labels: &[usize], class_count: usize, space: &[u32]) -> Vec<usize> {
    let mut c = vec![0; class_count];
    for &i in space {
        c[labels[i as usize]] += 1;
    }
    c
}

/// True when the majority class under the noisy labels differs from the one
/// under the clean labels. Ties go to the lowest class id on both sides.
pub fn check_contam(space: &[u32], clean: &[usize], noisy: &[usize], class_count: usize) -> bool {
    majority(&counts(noisy, class_count, space)) != majority(&counts(clean, class_count, space))
}

struct GraftCtx<'a> {
    clean: &'a [usize],
    noisy: &'a [usize],
    class_count: usize,
    max_depth: usize,
    max_percentiles: usize,
    active: &'a Party,
}

fn descendants(nodes: &[TreeNode], id: usize) -> usize {
    match nodes[id].children {
        None => 0,
        Some((l, r)) => 2 + descendants(nodes, l) + descendants(nodes, r),
    }
}

fn graft_node(nodes: &mut Vec<TreeNode>, id: usize, ctx: &GraftCtx<'_>, rep: &mut TreeGraftReport) -> Result<bool> {
    let contaminated = |n: &TreeNode| check_contam(&n.instance_space, ctx.clean, ctx.noisy, ctx.class_count);
    let Some((l, r)) = nodes[id].children else {
        let c = contaminated(&nodes[id]);
        if c {
            rep.contaminated.push(id);
        }
        return Ok(c);
    };
    let cl = graft_node(nodes, l, ctx, rep)?;
    let cr = graft_node(nodes, r, ctx, rep)?;
    if !(cl || cr) {
        return Ok(false);
    }
    if contaminated(&nodes[id]) {
        rep.contaminated.push(id);
        return Ok(true);
    }
    rep.erased_descendants += descendants(nodes, id);
    rep.resplit.push(id);
    let node = &nodes[id];
    let fresh = grow_subtree_local(
        ctx.active,
        ctx.clean,
        ctx.class_count,
        node.instance_space.clone(),
        node.depth,
        ctx.max_depth,
        ctx.max_percentiles,
        None,
        node.tree_id,
    )?;
    let base = nodes.len();
    let map = |j: usize| if j == 0 { id } else { base + j - 1 };
    for (j, mut n) in fresh.into_iter().enumerate() {
        n.node_id = map(j);
        n.children = n.children.map(|(a, b)| (map(a), map(b)));
        if j == 0 {
            nodes[id] = n;
        } else {
            nodes.push(n);
        }
    }
    Ok(false)
}

/// Rebuilds the arena keeping only nodes reachable from the root, preorder.
fn compact(nodes: &[TreeNode]) -> Vec<TreeNode> {
    let mut order = Vec::new();
    let mut stack = vec![0];
    while let Some(i) = stack.pop() {
        order.push(i);
        if let Some((l, r)) = nodes[i].children {
            stack.push(r);
            stack.push(l);
        }
    }
    let mut new_id = vec![usize::MAX; nodes.len()];
    for (k, &i) in order.iter().enumerate() {
        new_id[i] = k;
    }
    order
        .iter()
        .map(|&i| {
            let mut n = nodes[i].clone();
            n.node_id = new_id[i];
            n.children = n.children.map(|(a, b)| (new_id[a], new_id[b]));
            n
        })
        .collect()
}

/// Postorder repair of a forest trained on noisy labels. A node with a
/// contaminated child either inherits the flag (if it is contaminated
/// itself) or has its subtree regrown from the label holder's features on
/// the clean labels, within the original depth budget. No message to a
/// passive party is involved.
pub fn grafting(
    model: &TreeModel,
    clean: &[usize],
    noisy: &[usize],
    active: &Party,
    max_percentiles: usize,
) -> Result<(TreeModel, GraftReport)> {
    if model.model_kind != ModelKind::RandomForest {
        return Err(Error::UnsupportedModel("grafting applies to random forests only"));
    }
    if clean.len() != noisy.len() {
        return Err(Error::LengthMismatch {
            left: clean.len(),
            right: noisy.len(),
        });
    }
    let ctx = GraftCtx {
        clean,
        noisy,
        class_count: model.class_count,
        max_depth: model.max_depth,
        max_percentiles,
        active,
    };
    let mut repaired = model.clone();
    let mut report = GraftReport::default();
    for tree in &mut repaired.trees {
        let mut rep = TreeGraftReport {
            tree_id: tree.tree_id,
            ..Default::default()
        };
        graft_node(&mut tree.nodes, 0, &ctx, &mut rep)?;
        if !rep.resplit.is_empty() {
            tree.nodes = compact(&tree.nodes);
        }
        report.trees.push(rep);
    }
    Ok((repaired, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_probability_closed_form() {
        assert!((keep_probability(2f64.ln(), 2) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(keep_probability(f64::INFINITY, 10), 1.0);
    }

    #[test]
    fn huge_epsilon_keeps_labels() {
        let labels: Vec<usize> = (0..200).map(|i| i % 3).collect();
        let out = randomized_response(&labels, 1e6, 3, 1).unwrap();
        assert_eq!(out.labels, labels);
    }

    #[test]
    fn uniform_prior_reduces_to_rr() {
        for c in 2..=10 {
            let prior = vec![1.0 / c as f64; c];
            for eps in [0.1, 0.5, 1.0, 2.0] {
                let d = rr_with_prior_distribution(0, &prior, eps).unwrap();
                let keep = keep_probability(eps, c);
                assert!((d[0] - keep).abs() < 1e-12);
                for p in &d[1..] {
                    assert!((p - (1.0 - keep) / (c - 1) as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn degenerate_prior_is_deterministic() {
        let mut r = rng::rng(1, 0);
        for _ in 0..50 {
            assert_eq!(rr_with_prior(0, &[1.0, 0.0, 0.0], 0.5, &mut r).unwrap(), 0);
        }
        assert!(rr_with_prior(0, &[0.5, 0.6], 0.5, &mut r).is_err());
    }

    #[test]
    fn one_stage_equals_rr() {
        let labels: Vec<usize> = (0..300).map(|i| i % 4).collect();
        let mut never = |_: &[usize], _: &[usize], _: &[usize]| -> Result<Vec<Vec<f64>>> { unreachable!() };
        let a = lp_mst(&labels, 4, 0.7, 1, &mut never, 3).unwrap();
        let b = randomized_response(&labels, 0.7, 4, 3).unwrap();
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn two_stages_partition_rows() {
        let labels: Vec<usize> = (0..101).map(|i| i % 2).collect();
        let mut uniform = |_: &[usize], _: &[usize], s2: &[usize]| Ok(vec![vec![0.5, 0.5]; s2.len()]);
        let out = lp_mst(&labels, 2, 1.0, 2, &mut uniform, 3).unwrap();
        let mut all: Vec<usize> = out.stages.concat();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_eq!(out.stages[0].len(), 50);
    }

    #[test]
    fn contamination_tracks_majority_only() {
        let clean = [0, 0, 0, 1];
        let noisy = [0, 0, 1, 1];
        assert!(!check_contam(&[0, 1, 2, 3], &clean, &clean, 2));
        // 2-2 tie resolves to class 0 under noise, matching the clean majority.
        assert!(!check_contam(&[0, 1, 2, 3], &clean, &noisy, 2));
        assert!(check_contam(&[2, 3], &clean, &noisy, 2));
    }
}
