//! Dataset ingestion, synthetic fixtures, vertical partitioning and feature
//! ranking.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, stream};

/// Party id of the label holder.
pub const ACTIVE_PARTY: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub feature_names: Vec<String>,
    /// Row ids in the source table. Contiguous `0..N` for a freshly loaded
    /// table; a split keeps the ids of the rows it selected.
    pub row_ids: Vec<usize>,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        class_count: usize,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::LengthMismatch {
                left: labels.len(),
                right: features.rows(),
            });
        }
        if class_count < 2 {
            return Err(Error::LabelCoding(format!(
                "need at least two classes, got {class_count}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::LabelCoding(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if feature_names.len() != features.cols() {
            return Err(Error::LengthMismatch {
                left: feature_names.len(),
                right: features.cols(),
            });
        }
        if features.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite feature value".into()));
        }
        let row_ids = (0..labels.len()).collect();
        Ok(Self {
            features,
            labels,
            class_count,
            feature_names,
            row_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Subset of rows (by position), keeping source row ids.
    pub fn select_rows(&self, positions: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(positions),
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            class_count: self.class_count,
            feature_names: self.feature_names.clone(),
            row_ids: positions.iter().map(|&p| self.row_ids[p]).collect(),
        }
    }

    /// Writes the dataset as CSV with a trailing `label` column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.feature_names.clone();
        header.push("label".to_string());
        w.write_record(&header)?;
        for r in 0..self.len() {
            let mut rec: Vec<String> =
                self.features.row(r).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[r].to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Loads a headed CSV. Labels are recoded to dense ids in order of first
/// appearance; every other column must be numeric.
pub fn load_csv(path: &Path, label_column: &str, class_count: Option<usize>) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, label_column, class_count)
}

pub fn read_csv<R: std::io::Read>(
    reader: R,
    label_column: &str,
    class_count: Option<usize>,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::MalformedInput {
            row: 0,
            column: label_column.to_string(),
            reason: "label column not found in header".into(),
        })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut codes: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() != headers.len() {
            return Err(Error::MalformedInput {
                row,
                column: "*".into(),
                reason: format!("expected {} cells, found {}", headers.len(), rec.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if j == label_idx {
                if cell.is_empty() {
                    return Err(Error::MalformedInput {
                        row,
                        column: headers[j].clone(),
                        reason: "missing label".into(),
                    });
                }
                if let Ok(v) = cell.parse::<f64>() {
                    if v.fract() != 0.0 || !v.is_finite() {
                        return Err(Error::LabelCoding(format!(
                            "row {row}: numeric label `{cell}` is not an integer"
                        )));
                    }
                }
                let next = codes.len();
                labels.push(*codes.entry(cell.to_string()).or_insert(next));
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::MalformedInput {
                    row,
                    column: headers[j].clone(),
                    reason: if cell.is_empty() {
                        "missing value".into()
                    } else {
                        format!("`{cell}` is not numeric")
                    },
                })?;
                if !v.is_finite() {
                    return Err(Error::MalformedInput {
                        row,
                        column: headers[j].clone(),
                        reason: "non-finite value".into(),
                    });
                }
                data.push(v);
            }
        }
    }

    let distinct = codes.len();
    let class_count = match class_count {
        Some(c) if c < distinct => {
            return Err(Error::LabelCoding(format!(
                "{distinct} distinct labels exceed declared class count {c}"
            )))
        }
        Some(c) => c,
        None => distinct,
    };
    let rows = labels.len();
    let features = Matrix::from_vec(rows, feature_names.len(), data);
    Dataset::new(features, labels, class_count, feature_names)
}

/// Loads a headed all-numeric CSV, such as a party's local feature slice.
pub fn load_matrix_csv(path: &Path) -> Result<(Vec<String>, Matrix)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::MalformedInput {
                row: i + 1,
                column: headers.get(j).cloned().unwrap_or_default(),
                reason: format!("`{}` is not numeric", cell.trim()),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok((headers.clone(), Matrix::from_vec(rows, headers.len(), data)))
}

#[derive(Debug, Clone)]
pub struct TrainTestSplit {
    pub train: Dataset,
    pub test: Dataset,
    pub train_class_counts: Vec<usize>,
    pub test_class_counts: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Unstratified shuffled split. The test side gets `ceil(N * test_fraction)`
/// rows and the training side the remainder.
pub fn train_test_split(d: &Dataset, test_fraction: f64, seed: u64) -> Result<TrainTestSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let n = d.len();
    let n_test = ((n as f64 * test_fraction) - 1e-9).ceil().max(0.0) as usize;
    let n_test = n_test.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed, stream::SPLIT));
    let (test_pos, train_pos) = order.split_at(n_test);
    let mut train_pos = train_pos.to_vec();
    let mut test_pos = test_pos.to_vec();
    train_pos.sort_unstable();
    test_pos.sort_unstable();
    let train = d.select_rows(&train_pos);
    let test = d.select_rows(&test_pos);
    let train_class_counts = train.class_counts();
    let test_class_counts = test.class_counts();
    let warnings = train_class_counts
        .iter()
        .enumerate()
        .filter(|&(_, &c)| c == 0)
        .map(|(c, _)| format!("class {c} absent from training split"))
        .collect();
    Ok(TrainTestSplit {
        train,
        test,
        train_class_counts,
        test_class_counts,
        warnings,
    })
}

/// One party's slice of the federated feature space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerticalView {
    pub party_id: usize,
    pub feature_indices: Vec<usize>,
    pub has_labels: bool,
}

impl VerticalView {
    pub fn new(party_id: usize, mut feature_indices: Vec<usize>) -> Self {
        feature_indices.sort_unstable();
        Self {
            party_id,
            feature_indices,
            has_labels: party_id == ACTIVE_PARTY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    /// Shuffle features and give half (rounded down) to the attacker.
    RandomHalf { seed: u64 },
    /// Give the top `k_percent` of features by label MI to the attacker.
    TopKPercentileToAttacker { k_percent: u32 },
    /// Feature sets per party; index 0 is the active party.
    Explicit { parties: Vec<Vec<usize>> },
}

/// Splits the feature space into party views. Two-party modes return
/// `[active, attacker]`.
pub fn make_partition(d: &Dataset, spec: &PartitionSpec) -> Result<Vec<VerticalView>> {
    let f = d.feature_count();
    match spec {
        PartitionSpec::RandomHalf { seed } => {
            let mut order: Vec<usize> = (0..f).collect();
            order.shuffle(&mut rng::rng(*seed, stream::PARTITION));
            let (attacker, active) = order.split_at(f / 2);
            Ok(vec![
                VerticalView::new(ACTIVE_PARTY, active.to_vec()),
                VerticalView::new(ACTIVE_PARTY + 1, attacker.to_vec()),
            ])
        }
        PartitionSpec::TopKPercentileToAttacker { k_percent } => {
            if *k_percent > 100 {
                return Err(Error::InvalidPartition(format!(
                    "k_percent {k_percent} exceeds 100"
                )));
            }
            let ranking = importance_order(&feature_label_mi(d, 10)?);
            let take = (f * *k_percent as usize).div_ceil(100);
            let (attacker, active) = ranking.split_at(take);
            Ok(vec![
                VerticalView::new(ACTIVE_PARTY, active.to_vec()),
                VerticalView::new(ACTIVE_PARTY + 1, attacker.to_vec()),
            ])
        }
        PartitionSpec::Explicit { parties } => {
            if parties.is_empty() {
                return Err(Error::InvalidPartition("no parties listed".into()));
            }
            let mut owner = vec![None; f];
            for (p, set) in parties.iter().enumerate() {
                for &j in set {
                    if j >= f {
                        return Err(Error::InvalidPartition(format!(
                            "feature {j} out of range ({f} features)"
                        )));
                    }
                    if let Some(prev) = owner[j].replace(p) {
                        return Err(Error::InvalidPartition(format!(
                            "feature {j} assigned to parties {} and {}",
                            prev + 1,
                            p + 1
                        )));
                    }
                }
            }
            Ok(parties
                .iter()
                .enumerate()
                .map(|(p, set)| VerticalView::new(ACTIVE_PARTY + p, set.clone()))
                .collect())
        }
    }
}

/// Feature indices sorted by descending importance; ties keep index order.
pub fn importance_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Histogram estimate of I(feature; label) in nats, equal-width bins.
pub fn feature_label_mi(d: &Dataset, bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::InvalidParameter(format!("bins must be >= 2, got {bins}")));
    }
    let n = d.len();
    if n == 0 {
        return Ok(vec![0.0; d.feature_count()]);
    }
    let class_p: Vec<f64> = d.class_counts().iter().map(|&c| c as f64 / n as f64).collect();
    let mi = (0..d.feature_count())
        .map(|j| {
            let col = d.features.column(j);
            let (lo, hi) = col
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if hi <= lo {
                return 0.0;
            }
            let width = (hi - lo) / bins as f64;
            let mut joint = vec![0usize; bins * d.class_count];
            let mut marg = vec![0usize; bins];
            for (v, &y) in col.iter().zip(&d.labels) {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                joint[b * d.class_count + y] += 1;
                marg[b] += 1;
            }
            let mut total = 0.0;
            for b in 0..bins {
                let pb = marg[b] as f64 / n as f64;
                for (c, &pc) in class_p.iter().enumerate() {
                    let cnt = joint[b * d.class_count + c];
                    if cnt > 0 {
                        let pbc = cnt as f64 / n as f64;
                        total += pbc * (pbc / (pb * pc)).ln();
                    }
                }
            }
            total.max(0.0)
        })
        .collect();
    Ok(mi)
}

/// Maps each column affinely onto [0, 1]; constant columns become zeros.
pub fn minmax_normalize(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for c in 0..m.cols() {
        let (lo, hi) = (0..m.rows())
            .map(|r| m.get(r, c))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        for r in 0..m.rows() {
            let v = if span > 0.0 { (m.get(r, c) - lo) / span } else { 0.0 };
            out.set(r, c, v);
        }
    }
    out
}

/// Gaussian blobs: one random center in `[-1, 1]^f` per class, rows assigned
/// to classes round-robin, isotropic noise of standard deviation `spread`.
pub fn gen_synthetic(n: usize, f: usize, c: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if c < 2 || n < c || f < 2 {
        return Err(Error::InvalidParameter(format!(
            "need n >= c >= 2 and f >= 2 (got n={n}, f={f}, c={c})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidParameter(format!("spread must be >= 0, got {spread}")));
    }
    let mut rng = rng::rng(seed, stream::SYNTHETIC);
    let unit = Uniform::new(-1.0, 1.0).expect("valid range");
    let centers: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..f).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let mut data = Vec::with_capacity(n * f);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % c;
        labels.push(y);
        for &mu in &centers[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(mu + spread * z);
        }
    }
    let names = (0..f).map(|j| format!("x{j}")).collect();
    Dataset::new(Matrix::from_vec(n, f, data), labels, c, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        read_csv("f1,f2,y\n1,2,a\n3,4,b\n5,6,a\n".as_bytes(), "y", None).unwrap()
    }

    #[test]
    fn labels_recoded_by_first_appearance() {
        let d = tiny();
        assert_eq!(d.labels, vec![0, 1, 0]);
        assert_eq!(d.class_count, 2);
        assert_eq!(d.feature_names, vec!["f1", "f2"]);
    }

    #[test]
    fn non_numeric_cell_is_rejected_with_location() {
        let err = read_csv("f1,y\n1,a\nx,b\n".as_bytes(), "y", None).unwrap_err();
        match err {
            Error::MalformedInput { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "f1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_cell_is_rejected() {
        assert!(matches!(
            read_csv("f1,y\n,a\n2,b\n".as_bytes(), "y", None),
            Err(Error::MalformedInput { .. })
        ));
    }

    #[test]
    fn fractional_numeric_label_is_a_coding_error() {
        assert!(matches!(
            read_csv("f1,y\n1,0.5\n2,1\n".as_bytes(), "y", None),
            Err(Error::LabelCoding(_))
        ));
    }

    #[test]
    fn declared_class_count_too_small() {
        assert!(matches!(
            read_csv("f1,y\n1,a\n2,b\n3,c\n".as_bytes(), "y", Some(2)),
            Err(Error::LabelCoding(_))
        ));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let d = gen_synthetic(10, 2, 2, 0.1, 1).unwrap();
        let a = train_test_split(&d, 0.2, 7).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (8, 2));
        let b = train_test_split(&d, 0.2, 7).unwrap();
        assert_eq!(a.train.row_ids, b.train.row_ids);
        assert!(a.train.row_ids.iter().all(|r| !a.test.row_ids.contains(r)));
    }

    #[test]
    fn split_fraction_bounds() {
        let d = gen_synthetic(10, 2, 2, 0.1, 1).unwrap();
        assert!(train_test_split(&d, 0.0, 1).is_err());
        assert!(train_test_split(&d, 1.0, 1).is_err());
    }

    #[test]
    fn split_warns_on_missing_class() {
        let mut d = gen_synthetic(10, 2, 3, 0.1, 1).unwrap();
        // only one row of class 2
        for y in d.labels.iter_mut().skip(3) {
            if *y == 2 {
                *y = 0;
            }
        }
        let warned = (0..50).any(|s| {
            let s = train_test_split(&d, 0.2, s).unwrap();
            !s.warnings.is_empty() && s.train_class_counts[2] == 0
        });
        assert!(warned);
    }

    #[test]
    fn partition_boundaries() {
        let d = gen_synthetic(40, 10, 2, 0.5, 3).unwrap();
        let zero = make_partition(&d, &PartitionSpec::TopKPercentileToAttacker { k_percent: 0 }).unwrap();
        assert!(zero[1].feature_indices.is_empty());
        assert_eq!(zero[0].feature_indices.len(), 10);
        let all = make_partition(&d, &PartitionSpec::TopKPercentileToAttacker { k_percent: 100 }).unwrap();
        assert!(all[0].feature_indices.is_empty());
        assert!(all[0].has_labels && !all[1].has_labels);
        let third = make_partition(&d, &PartitionSpec::TopKPercentileToAttacker { k_percent: 33 }).unwrap();
        assert_eq!(third[1].feature_indices.len(), 4);
    }

    #[test]
    fn explicit_overlap_rejected() {
        let d = gen_synthetic(10, 4, 2, 0.5, 3).unwrap();
        let spec = PartitionSpec::Explicit {
            parties: vec![vec![0, 1], vec![1, 2]],
        };
        assert!(matches!(make_partition(&d, &spec), Err(Error::InvalidPartition(_))));
    }

    #[test]
    fn minmax_examples() {
        let m = Matrix::from_rows(&[vec![2.0, 5.0], vec![4.0, 5.0], vec![6.0, 5.0]]);
        let n = minmax_normalize(&m);
        assert_eq!(n.column(0), vec![0.0, 0.5, 1.0]);
        assert_eq!(n.column(1), vec![0.0, 0.0, 0.0]);
        assert_eq!(minmax_normalize(&n), n);
    }

    #[test]
    fn mi_perfect_binary_feature_is_ln2() {
        let n = 200;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let feat: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
        let konst = vec![3.0; n];
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![feat[i], konst[i]]).collect();
        let d = Dataset::new(Matrix::from_rows(&rows), labels, 2, vec!["a".into(), "b".into()]).unwrap();
        let mi = feature_label_mi(&d, 10).unwrap();
        assert!((mi[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(mi[1], 0.0);
        assert!(feature_label_mi(&d, 1).is_err());
    }

    #[test]
    fn mi_of_independent_noise_is_small() {
        // Monte Carlo: labels and feature drawn independently.
        let d = gen_synthetic(10_000, 2, 2, 0.0, 5).unwrap();
        let mut rng = rng::rng(99, 0);
        let unit = Uniform::new(0.0, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..d.len()).map(|_| vec![unit.sample(&mut rng), 0.0]).collect();
        let noise = Dataset::new(Matrix::from_rows(&rows), d.labels.clone(), 2, vec!["u".into(), "z".into()]).unwrap();
        let mi = feature_label_mi(&noise, 10).unwrap();
        assert!(mi[0] <= 0.05, "mi = {}", mi[0]);
    }

    #[test]
    fn synthetic_shape_and_determinism() {
        let a = gen_synthetic(100, 4, 2, 0.1, 11).unwrap();
        assert_eq!((a.len(), a.feature_count(), a.class_count), (100, 4, 2));
        assert_eq!(a, gen_synthetic(100, 4, 2, 0.1, 11).unwrap());
        assert!(gen_synthetic(1, 4, 2, 0.1, 11).is_err());
    }
}
