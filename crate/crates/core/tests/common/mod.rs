//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use treeleak::idlmid::NodeClassCounts;

/// I(Y; membership) from the 2 x C joint table.
pub fn exact_mi(c: &NodeClassCounts) -> f64 {
    let n: f64 = c.class_totals.iter().sum::<usize>() as f64;
    let inside: f64 = c.node_counts.iter().sum::<usize>() as f64;
    let mut mi = 0.0;
    for (k, &t) in c.class_totals.iter().enumerate() {
        for (cell, side) in [(c.node_counts[k], inside), (t - c.node_counts[k], n - inside)] {
            if cell > 0 {
                let p = cell as f64 / n;
                mi += p * (p / ((t as f64 / n) * (side / n))).ln();
            }
        }
    }
    mi
}

/// Modularity with ordered-pair `2m`, evaluated pair by pair.
pub fn q_oracle(n: usize, w: &[Vec<f64>], comm: &[usize]) -> f64 {
    let k: Vec<f64> = (0..n).map(|i| w[i].iter().sum()).collect();
    let two_m: f64 = k.iter().sum();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if comm[i] == comm[j] {
                q += w[i][j] - k[i] * k[j] / two_m;
            }
        }
    }
    q / two_m
}

/// Restricted-growth strings enumerate each set partition once.
pub fn best_q(n: usize, w: &[Vec<f64>]) -> f64 {
    fn rec(i: usize, n: usize, a: &mut Vec<usize>, max: usize, w: &[Vec<f64>], best: &mut f64) {
        if i == n {
            *best = best.max(q_oracle(n, w, a));
            return;
        }
        for c in 0..=max + 1 {
            a[i] = c;
            rec(i + 1, n, a, max.max(c), w, best);
        }
    }
    let mut a = vec![0; n];
    let mut best = f64::NEG_INFINITY;
    rec(1, n, &mut a, 0, w, &mut best);
    best
}

pub fn connected(n: usize, edges: &[(u32, u32, f64)]) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &(a, b, _) in edges {
            for (x, y) in [(a, b), (b, a)] {
                if x as usize == v && !seen[y as usize] {
                    seen[y as usize] = true;
                    stack.push(y as usize);
                }
            }
        }
    }
    seen.into_iter().all(|s| s)
}

pub fn v_shadow(truth: &[usize], pred: &[usize]) -> f64 {
    let n = truth.len() as f64;
    let h = |xs: &[usize]| {
        let mut m = std::collections::HashMap::new();
        for &x in xs {
            *m.entry(x).or_insert(0.0) += 1.0;
        }
        m.values().map(|&c: &f64| -(c / n) * (c / n).ln()).sum::<f64>()
    };
    let joint: Vec<usize> = truth.iter().zip(pred).map(|(&a, &b)| a * 1000 + b).collect();
    let (hc, hk, hck) = (h(truth), h(pred), h(&joint));
    // H(C|K) = H(C,K) - H(K); H(K|C) = H(C,K) - H(C).
    let hom = if hc == 0.0 { 1.0 } else { 1.0 - (hck - hk) / hc };
    let com = if hk == 0.0 { 1.0 } else { 1.0 - (hck - hc) / hk };
    if hom + com == 0.0 {
        0.0
    } else {
        2.0 * hom * com / (hom + com)
    }
}

pub fn auc_pairs(pos: &[bool], s: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..s.len() {
        for j in 0..s.len() {
            if pos[i] && !pos[j] {
                den += 1.0;
                if s[i] > s[j] {
                    num += 1.0;
                } else if s[i] == s[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}
