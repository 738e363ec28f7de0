//! Clustering and classification metrics, and aggregation over seeds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[class][cluster]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<usize>>,
}

impl ContingencyTable {
    pub fn new(truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::LengthMismatch {
                left: truth.len(),
                right: pred.len(),
            });
        }
        let rows = truth.iter().copied().max().map_or(0, |m| m + 1);
        let cols = pred.iter().copied().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0; cols]; rows];
        for (&t, &p) in truth.iter().zip(pred) {
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<usize> {
        let cols = self.counts.first().map_or(0, Vec::len);
        (0..cols).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }
}

fn entropy(marginal: &[usize], n: f64) -> f64 {
    marginal
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VMeasure {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
}

/// Homogeneity, completeness and their harmonic mean.
pub fn homogeneity_completeness_v(truth: &[usize], pred: &[usize]) -> Result<VMeasure> {
    if truth.is_empty() {
        return Err(Error::InvalidParameter("v-measure needs at least one sample".into()));
    }
    let t = ContingencyTable::new(truth, pred)?;
    let n = t.total() as f64;
    let rows = t.row_sums();
    let cols = t.col_sums();
    let h_c = entropy(&rows, n);
    let h_k = entropy(&cols, n);
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += (c / n) * ((c * n) / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    let homogeneity = if h_c == 0.0 { 1.0 } else { (mi / h_c).clamp(0.0, 1.0) };
    let completeness = if h_k == 0.0 { 1.0 } else { (mi / h_k).clamp(0.0, 1.0) };
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok(VMeasure {
        homogeneity,
        completeness,
        v_measure,
    })
}

pub fn v_measure(truth: &[usize], pred: &[usize]) -> Result<f64> {
    Ok(homogeneity_completeness_v(truth, pred)?.v_measure)
}

/// Rank-based binary AUC with midranks for ties.
pub fn auc_binary(positive: &[bool], scores: &[f64]) -> Result<f64> {
    if positive.len() != scores.len() {
        return Err(Error::LengthMismatch {
            left: positive.len(),
            right: scores.len(),
        });
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc("need at least one positive and one negative sample"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += midrank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUC of per-class scores: the positive-class column for two classes,
/// otherwise the unweighted mean of one-vs-rest AUCs.
pub fn auc(truth: &[usize], scores: &[Vec<f64>], class_count: usize) -> Result<f64> {
    if truth.len() != scores.len() {
        return Err(Error::LengthMismatch {
            left: truth.len(),
            right: scores.len(),
        });
    }
    if class_count == 2 {
        let pos: Vec<bool> = truth.iter().map(|&y| y == 1).collect();
        let s: Vec<f64> = scores.iter().map(|r| r[1]).collect();
        return auc_binary(&pos, &s);
    }
    let mut total = 0.0;
    for c in 0..class_count {
        let pos: Vec<bool> = truth.iter().map(|&y| y == c).collect();
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        total += auc_binary(&pos, &s)?;
    }
    Ok(total / class_count as f64)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `"m (±s)"` with three decimals.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3} (±{std:.3})")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub key: Vec<String>,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub formatted: String,
}

/// Groups `(key, value)` pairs and summarizes each group, ordered by key.
pub fn aggregate<I>(rows: I) -> Vec<SummaryRow>
where
    I: IntoIterator<Item = (Vec<String>, f64)>,
{
    let mut groups: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
    for (k, v) in rows {
        groups.entry(k).or_default().push(v);
    }
    groups
        .into_iter()
        .map(|(key, values)| {
            let (mean, std) = mean_std(&values);
            SummaryRow {
                key,
                count: values.len(),
                mean,
                std,
                formatted: format_mean_std(mean, std),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_relabeled() {
        assert_eq!(v_measure(&[0, 0, 1, 1, 2], &[2, 2, 0, 0, 1]).unwrap(), 1.0);
    }

    #[test]
    fn single_cluster_is_zero() {
        assert_eq!(v_measure(&[0, 1, 0, 1], &[0, 0, 0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn single_class_single_cluster() {
        assert_eq!(v_measure(&[0, 0, 0], &[0, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn auc_examples() {
        let pos = [false, false, true, true];
        assert_eq!(auc_binary(&pos, &[0.1, 0.2, 0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auc_binary(&pos, &[0.5; 4]).unwrap(), 0.5);
        assert!(matches!(auc_binary(&[true, true], &[0.1, 0.2]), Err(Error::UndefinedAuc(_))));
    }

    #[test]
    fn aggregate_examples() {
        let (m, s) = mean_std(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(mean_std(&[0.3; 5]).1, 0.0);
        let rows = aggregate(vec![
            (vec!["a".into()], 1.0),
            (vec!["b".into()], 2.0),
            (vec!["a".into()], 3.0),
        ]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].mean, 2.0);
        assert_eq!(format_mean_std(0.751, 0.106), "0.751 (±0.106)");
    }
}
