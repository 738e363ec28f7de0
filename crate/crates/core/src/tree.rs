//! Party-agnostic tree structures and split scoring.
//!
//! Random Forest splits are scored by Gini gain over per-class counts;
//! XGBoost splits by the second-order gain over gradient/hessian sums. Both
//! scorers take a [`SplitStatistics`] so the protocol layer can evaluate a
//! candidate without caring which model is being trained.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    RandomForest,
    #[serde(rename = "xgboost")]
    XgBoost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoosterParams {
    pub lambda_reg: f64,
    pub gamma_reg: f64,
    pub learning_rate: f64,
}

impl Default for BoosterParams {
    fn default() -> Self {
        Self {
            lambda_reg: 1.0,
            gamma_reg: 0.0,
            learning_rate: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GradPair {
    pub g: f64,
    pub h: f64,
}

impl std::ops::Add for GradPair {
    type Output = GradPair;
    fn add(self, o: GradPair) -> GradPair {
        GradPair {
            g: self.g + o.g,
            h: self.h + o.h,
        }
    }
}

impl std::iter::Sum for GradPair {
    fn sum<I: Iterator<Item = GradPair>>(iter: I) -> Self {
        iter.fold(GradPair::default(), |a, b| a + b)
    }
}

/// Aggregates of a single node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStatistics {
    pub class_counts: Vec<usize>,
    pub grad: GradPair,
}

impl NodeStatistics {
    pub fn n(&self) -> usize {
        self.class_counts.iter().sum()
    }
}

/// Aggregates of a candidate binary split. Parent totals are derived, so
/// `n = n_L + n_R` and `g = g_L + g_R` hold by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitStatistics {
    pub left_counts: Vec<usize>,
    pub right_counts: Vec<usize>,
    pub left_grad: GradPair,
    pub right_grad: GradPair,
}

impl SplitStatistics {
    pub fn from_counts(left_counts: Vec<usize>, right_counts: Vec<usize>) -> Self {
        assert_eq!(left_counts.len(), right_counts.len());
        Self {
            left_counts,
            right_counts,
            left_grad: GradPair::default(),
            right_grad: GradPair::default(),
        }
    }

    pub fn from_grads(left: GradPair, right: GradPair) -> Self {
        Self {
            left_counts: Vec::new(),
            right_counts: Vec::new(),
            left_grad: left,
            right_grad: right,
        }
    }

    pub fn n_left(&self) -> usize {
        self.left_counts.iter().sum()
    }

    pub fn n_right(&self) -> usize {
        self.right_counts.iter().sum()
    }

    pub fn n(&self) -> usize {
        self.n_left() + self.n_right()
    }

    pub fn parent_counts(&self) -> Vec<usize> {
        self.left_counts
            .iter()
            .zip(&self.right_counts)
            .map(|(l, r)| l + r)
            .collect()
    }

    pub fn parent_grad(&self) -> GradPair {
        self.left_grad + self.right_grad
    }
}

fn sum_sq_fractions(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    counts.iter().map(|&c| (c as f64 / n).powi(2)).sum()
}

/// Weighted child purity minus parent purity (higher is better).
pub fn gini_gain(s: &SplitStatistics) -> Result<f64> {
    let (nl, nr) = (s.n_left(), s.n_right());
    if nl == 0 || nr == 0 {
        return Err(Error::InvalidSplit("gini gain needs two nonempty children"));
    }
    let n = (nl + nr) as f64;
    Ok(nl as f64 / n * sum_sq_fractions(&s.left_counts, nl)
        + nr as f64 / n * sum_sq_fractions(&s.right_counts, nr)
        - sum_sq_fractions(&s.parent_counts(), nl + nr))
}

/// Second-order boosting gain with L2 regularization `lambda` and split
/// penalty `gamma`.
pub fn xgb_gain(s: &SplitStatistics, p: &BoosterParams) -> Result<f64> {
    let (l, r) = (s.left_grad, s.right_grad);
    let parent = s.parent_grad();
    let dl = l.h + p.lambda_reg;
    let dr = r.h + p.lambda_reg;
    let dp = parent.h + p.lambda_reg;
    if dl <= 0.0 || dr <= 0.0 || dp <= 0.0 {
        return Err(Error::InvalidSplit("xgb gain denominator is not positive"));
    }
    Ok(0.5 * (l.g * l.g / dl + r.g * r.g / dr - parent.g * parent.g / dp) - p.gamma_reg)
}

/// Number of model outputs: one sigmoid margin for binary tasks, one softmax
/// margin per class otherwise.
pub fn output_count(class_count: usize) -> usize {
    if class_count == 2 {
        1
    } else {
        class_count
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(margins: &[f64]) -> Vec<f64> {
    let max = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = margins.iter().map(|m| (m - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Converts raw margins (one per output) into class probabilities.
pub fn margins_to_proba(margins: &[f64], class_count: usize) -> Vec<f64> {
    if class_count == 2 {
        let p = sigmoid(margins[0]);
        vec![1.0 - p, p]
    } else {
        softmax(margins)
    }
}

/// Cross-entropy gradients and diagonal hessians with respect to the margins.
/// `margins[i]` holds [`output_count`] values for sample `i`.
pub fn grad_hess(labels: &[usize], margins: &[Vec<f64>], class_count: usize) -> Vec<Vec<GradPair>> {
    labels
        .iter()
        .zip(margins)
        .map(|(&y, m)| {
            if class_count == 2 {
                let p = sigmoid(m[0]);
                let t = if y == 1 { 1.0 } else { 0.0 };
                vec![GradPair {
                    g: p - t,
                    h: p * (1.0 - p),
                }]
            } else {
                softmax(m)
                    .into_iter()
                    .enumerate()
                    .map(|(c, p)| GradPair {
                        g: p - if c == y { 1.0 } else { 0.0 },
                        h: p * (1.0 - p),
                    })
                    .collect()
            }
        })
        .collect()
}

/// Leaf value: the class distribution for forests, `-G / (H + lambda)` for
/// boosting (the learning rate is applied when margins are accumulated).
pub fn leaf_weight(s: &NodeStatistics, p: &BoosterParams, kind: ModelKind) -> Vec<f64> {
    match kind {
        ModelKind::RandomForest => {
            let n = s.n() as f64;
            s.class_counts.iter().map(|&c| c as f64 / n).collect()
        }
        ModelKind::XgBoost => vec![-s.grad.g / (s.grad.h + p.lambda_reg)],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub owner_party: usize,
    pub feature_index: usize,
    pub threshold: f64,
}

impl Split {
    /// Rows with `x < threshold` go left.
    #[inline]
    pub fn goes_left(&self, value: f64) -> bool {
        value < self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub node_id: usize,
    pub tree_id: usize,
    pub depth: usize,
    /// Sorted sample ids routed to this node during training.
    pub instance_space: Vec<u32>,
    pub split: Option<Split>,
    pub children: Option<(usize, usize)>,
    pub leaf_weight: Option<Vec<f64>>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Node arena; `nodes[0]` is the root and `node_id` equals the arena index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub tree_id: usize,
    /// Margin slot this tree contributes to (boosting only).
    pub output: usize,
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    /// Leaf reached by `row`, a full-width feature vector.
    pub fn route(&self, row: &[f64]) -> Result<&TreeNode> {
        let mut node = self.root();
        while let (Some(split), Some((l, r))) = (node.split, node.children) {
            let v = *row.get(split.feature_index).ok_or(Error::Routing {
                feature: split.feature_index,
                available: row.len(),
            })?;
            node = &self.nodes[if split.goes_left(v) { l } else { r }];
        }
        Ok(node)
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    /// Ids of nodes reachable from the root, preorder.
    pub fn reachable(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0];
        while let Some(i) = stack.pop() {
            out.push(i);
            if let Some((l, r)) = self.nodes[i].children {
                stack.push(r);
                stack.push(l);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub model_kind: ModelKind,
    pub class_count: usize,
    pub max_depth: usize,
    pub feature_subsample_ratio: f64,
    /// Number of forest trees or boosting rounds.
    pub tree_count: usize,
    pub params: BoosterParams,
    pub trees: Vec<Tree>,
}

impl TreeModel {
    pub fn empty(kind: ModelKind, class_count: usize, max_depth: usize, ratio: f64, params: BoosterParams) -> Self {
        Self {
            model_kind: kind,
            class_count,
            max_depth,
            feature_subsample_ratio: ratio,
            tree_count: 0,
            params,
            trees: Vec::new(),
        }
    }

    /// Raw boosting margins, learning rate applied.
    pub fn margins(&self, row: &[f64]) -> Result<Vec<f64>> {
        let mut m = vec![0.0; output_count(self.class_count)];
        for t in &self.trees {
            let leaf = t.route(row)?;
            let w = leaf.leaf_weight.as_ref().map_or(0.0, |w| w[0]);
            m[t.output] += self.params.learning_rate * w;
        }
        Ok(m)
    }

    /// Per-class scores for one full-width feature row.
    pub fn predict(&self, row: &[f64]) -> Result<Vec<f64>> {
        match self.model_kind {
            ModelKind::RandomForest => {
                let mut acc = vec![0.0; self.class_count];
                if self.trees.is_empty() {
                    return Ok(vec![1.0 / self.class_count as f64; self.class_count]);
                }
                for t in &self.trees {
                    let leaf = t.route(row)?;
                    if let Some(w) = &leaf.leaf_weight {
                        for (a, v) in acc.iter_mut().zip(w) {
                            *a += v;
                        }
                    }
                }
                let k = self.trees.len() as f64;
                Ok(acc.into_iter().map(|a| a / k).collect())
            }
            ModelKind::XgBoost => Ok(margins_to_proba(&self.margins(row)?, self.class_count)),
        }
    }

    pub fn predict_matrix(&self, x: &crate::matrix::Matrix) -> Result<Vec<Vec<f64>>> {
        (0..x.rows()).map(|r| self.predict(x.row(r))).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Index of the largest count; ties go to the lowest class id.
pub fn majority(counts: &[usize]) -> usize {
    counts
        .iter()
        .enumerate()
        .fold((0, 0), |(bi, bc), (i, &c)| if c > bc { (i, c) } else { (bi, bc) })
        .0
}

/// Argmax of a score vector; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    scores
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
