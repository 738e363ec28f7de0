//! Lloyd's k-means with k-means++ seeding and several restarts.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iter: usize,
    /// Scaled by the mean per-feature variance to give the absolute bound on
    /// the summed squared center shift.
    pub tol: f64,
    pub n_init: usize,
    pub seed: u64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iter: 300,
            tol: 1e-4,
            n_init: 10,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Matrix,
    pub inertia: f64,
    pub iterations: usize,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_variance(x: &Matrix) -> f64 {
    let (n, d) = (x.rows(), x.cols());
    if n == 0 || d == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for c in 0..d {
        let col = x.column(c);
        let mean = col.iter().sum::<f64>() / n as f64;
        total += col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    }
    total / d as f64
}

fn plus_plus(x: &Matrix, k: usize, r: &mut rng::Rng) -> Matrix {
    let n = x.rows();
    let mut centers = Vec::with_capacity(k);
    centers.push(x.row(r.random_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            r.random_range(0..n)
        };
        let c = x.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), &c));
        }
        centers.push(c);
    }
    Matrix::from_rows(&centers)
}

/// Nearest center per row (ties to the lowest index) and the squared
/// distance to it.
fn assign(x: &Matrix, centers: &Matrix) -> (Vec<usize>, Vec<f64>) {
    (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            let mut best = (0, f64::INFINITY);
            for c in 0..centers.rows() {
                let d = sq_dist(row, centers.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn single_run(x: &Matrix, p: &KMeansParams, tol_abs: f64, run: u64) -> KMeansResult {
    let (n, d, k) = (x.rows(), x.cols(), p.k);
    let mut r = rng::rng(rng::derive_seed(p.seed, run), stream::KMEANS);
    let mut centers = plus_plus(x, k, &mut r);
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < p.max_iter {
        let (mut labels, dist) = assign(x, &centers);
        history.push(dist.iter().sum());
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        // Re-seed empty clusters with the points farthest from their centers.
        if counts.contains(&0) {
            let mut far: Vec<usize> = (0..n).collect();
            far.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
            let mut donors = far.into_iter();
            for c in 0..k {
                if counts[c] == 0 {
                    for i in donors.by_ref() {
                        if counts[labels[i]] > 1 {
                            counts[labels[i]] -= 1;
                            labels[i] = c;
                            counts[c] = 1;
                            break;
                        }
                    }
                }
            }
        }
        let mut sums = vec![0.0; k * d];
        for (i, &l) in labels.iter().enumerate() {
            for (s, v) in sums[l * d..(l + 1) * d].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let mut next = Matrix::zeros(k, d);
        for c in 0..k {
            for j in 0..d {
                let v = if counts[c] > 0 {
                    sums[c * d + j] / counts[c] as f64
                } else {
                    centers.get(c, j)
                };
                next.set(c, j, v);
            }
        }
        let shift: f64 = (0..k).map(|c| sq_dist(centers.row(c), next.row(c))).sum();
        centers = next;
        iterations += 1;
        if shift <= tol_abs {
            break;
        }
    }
    let (labels, dist) = assign(x, &centers);
    let inertia = dist.iter().sum();
    history.push(inertia);
    KMeansResult {
        labels,
        centers,
        inertia,
        iterations,
        inertia_history: history,
    }
}

/// Best of `n_init` seeded runs by inertia (ties to the earliest run).
pub fn kmeans(x: &Matrix, p: &KMeansParams) -> Result<KMeansResult> {
    if p.k < 1 || p.k > x.rows() {
        return Err(Error::InvalidParameter(format!(
            "k = {} must be in [1, {}]",
            p.k,
            x.rows()
        )));
    }
    let tol_abs = p.tol * mean_variance(x);
    let runs: Vec<KMeansResult> = (0..p.n_init.max(1) as u64)
        .into_par_iter()
        .map(|run| single_run(x, p, tol_abs, run))
        .collect();
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.inertia < a.inertia { b } else { a })
        .expect("at least one run");
    Ok(best)
}
