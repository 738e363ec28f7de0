//! Mutual-information bound on instance-space disclosure and the secure
//! node-purity exchange used to enforce it.
//!
//! Revealing the instance space of node `w` tells a passive party the
//! indicator `S_w` of membership in `w`. The leakage `I(Y; S_w)` is bounded by
//! the larger of two KL divergences from the global prior: one for the class
//! distribution inside `w`, one for the distribution outside it.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::he::{HeCiphertext, HeKeypair, HePublicKey};

/// Class counts of one node against the training-set totals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeClassCounts {
    /// `N_c`, rows per class in the whole training set.
    pub class_totals: Vec<usize>,
    /// `n_w_c`, rows per class inside the node.
    pub node_counts: Vec<usize>,
}

impl NodeClassCounts {
    pub fn new(class_totals: Vec<usize>, node_counts: Vec<usize>) -> Result<Self> {
        if class_totals.len() != node_counts.len() {
            return Err(Error::LengthMismatch {
                left: class_totals.len(),
                right: node_counts.len(),
            });
        }
        if node_counts.iter().zip(&class_totals).any(|(n, t)| n > t) {
            return Err(Error::InvalidParameter("node count exceeds class total".into()));
        }
        Ok(Self {
            class_totals,
            node_counts,
        })
    }

    /// Counts of the rows in `space` (positions into `labels`).
    pub fn from_space(labels: &[usize], class_count: usize, space: &[u32]) -> Self {
        let mut class_totals = vec![0; class_count];
        for &y in labels {
            class_totals[y] += 1;
        }
        let mut node_counts = vec![0; class_count];
        for &i in space {
            node_counts[labels[i as usize]] += 1;
        }
        Self {
            class_totals,
            node_counts,
        }
    }

    pub fn total(&self) -> usize {
        self.class_totals.iter().sum()
    }

    pub fn node_size(&self) -> usize {
        self.node_counts.iter().sum()
    }

    pub fn complement_counts(&self) -> Vec<usize> {
        self.class_totals
            .iter()
            .zip(&self.node_counts)
            .map(|(t, n)| t - n)
            .collect()
    }
}

/// `KL(counts / n || prior)` in nats with `0 ln 0 = 0`; zero for an empty side.
fn kl_to_prior(counts: &[usize], totals: &[usize], total: usize) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let (n, total) = (n as f64, total as f64);
    counts
        .iter()
        .zip(totals)
        .filter(|(&c, _)| c > 0)
        .map(|(&c, &t)| {
            let p = c as f64 / n;
            p * (p / (t as f64 / total)).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Upper bound on `I(Y; S_w)`: the max of the in-node and complement KL terms.
pub fn mi_upper_bound(c: &NodeClassCounts) -> Result<f64> {
    if c.node_size() == 0 {
        return Err(Error::UndefinedNode);
    }
    let total = c.total();
    let inside = kl_to_prior(&c.node_counts, &c.class_totals, total);
    let outside = kl_to_prior(&c.complement_counts(), &c.class_totals, total);
    Ok(inside.max(outside))
}

/// Whether disclosing the node keeps the bound at or below `xi`.
pub fn admissible(c: &NodeClassCounts, xi: f64) -> Result<bool> {
    Ok(mi_upper_bound(c)? <= xi)
}

/// Encrypted one-hot labels, `[sample][class]`, as broadcast by the label
/// holder before the purity exchange.
#[derive(Debug, Clone)]
pub struct EncryptedLabels {
    pub class_count: usize,
    pub rows: Vec<Vec<HeCiphertext>>,
}

impl EncryptedLabels {
    pub fn encrypt(pk: &HePublicKey, labels: &[usize], class_count: usize, rng: &mut dyn RngCore) -> Self {
        let rows = labels
            .iter()
            .map(|&y| (0..class_count).map(|c| pk.encrypt(u64::from(c == y), rng)).collect())
            .collect();
        Self { class_count, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ciphertext_count(&self) -> u64 {
        (self.rows.len() * self.class_count) as u64
    }
}

/// A passive candidate as seen by its owner: the two child spaces.
#[derive(Debug, Clone, Copy)]
pub struct CandidateSpaces<'a> {
    pub left: &'a [u32],
    pub right: &'a [u32],
}

/// What a passive party returns for one candidate: per-class encrypted sums
/// over each side (and optionally each side's complement) with the public
/// row counts. The reciprocal scaling to class means happens after
/// decryption, since Paillier plaintexts are integers.
#[derive(Debug, Clone)]
pub struct PurityMessage {
    pub left: Vec<HeCiphertext>,
    pub right: Vec<HeCiphertext>,
    pub left_complement: Option<Vec<HeCiphertext>>,
    pub right_complement: Option<Vec<HeCiphertext>>,
    pub left_size: usize,
    pub right_size: usize,
}

impl PurityMessage {
    pub fn ciphertext_count(&self) -> u64 {
        let c = self.left.len();
        let sides = 2
            + usize::from(self.left_complement.is_some())
            + usize::from(self.right_complement.is_some());
        (sides * c) as u64
    }

    pub fn ciphertexts(&self) -> impl Iterator<Item = &HeCiphertext> {
        self.left
            .iter()
            .chain(&self.right)
            .chain(self.left_complement.iter().flatten())
            .chain(self.right_complement.iter().flatten())
    }
}

fn encrypted_sums(pk: &HePublicKey, enc: &EncryptedLabels, ids: impl Iterator<Item = usize>) -> Result<Vec<HeCiphertext>> {
    let mut acc = vec![pk.zero(); enc.class_count];
    for i in ids {
        let row = enc.rows.get(i).ok_or_else(|| {
            Error::Protocol(format!("sample id {i} outside the encrypted label universe of {}", enc.len()))
        })?;
        for (a, c) in acc.iter_mut().zip(row) {
            pk.add_assign(a, c)?;
        }
    }
    Ok(acc)
}

fn complement_ids(universe: usize, space: &[u32]) -> Result<Vec<usize>> {
    let mut member = vec![false; universe];
    for &i in space {
        *member.get_mut(i as usize).ok_or_else(|| {
            Error::Protocol(format!("sample id {i} outside the encrypted label universe of {universe}"))
        })? = true;
    }
    Ok((0..universe).filter(|&i| !member[i]).collect())
}

/// Passive side of the purity exchange: homomorphic per-class sums for every
/// candidate. `with_complements` adds the sums over the complement of each
/// child, which the boosting protocol needs because the label holder does
/// not otherwise learn per-class totals for those sets.
pub fn secure_node_purity(
    pk: &HePublicKey,
    enc: &EncryptedLabels,
    candidates: &[CandidateSpaces<'_>],
    with_complements: bool,
) -> Result<Vec<PurityMessage>> {
    candidates
        .iter()
        .map(|cand| {
            let left = encrypted_sums(pk, enc, cand.left.iter().map(|&i| i as usize))?;
            let right = encrypted_sums(pk, enc, cand.right.iter().map(|&i| i as usize))?;
            let (left_complement, right_complement) = if with_complements {
                let lc = complement_ids(enc.len(), cand.left)?;
                let rc = complement_ids(enc.len(), cand.right)?;
                (
                    Some(encrypted_sums(pk, enc, lc.into_iter())?),
                    Some(encrypted_sums(pk, enc, rc.into_iter())?),
                )
            } else {
                (None, None)
            };
            Ok(PurityMessage {
                left,
                right,
                left_complement,
                right_complement,
                left_size: cand.left.len(),
                right_size: cand.right.len(),
            })
        })
        .collect()
}

/// Decrypted content of one [`PurityMessage`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecryptedPurity {
    pub left_counts: Vec<usize>,
    pub right_counts: Vec<usize>,
    /// Per-class means `count / |side|`.
    pub left_purity: Vec<f64>,
    pub right_purity: Vec<f64>,
}

fn decrypt_counts(kp: &HeKeypair, cts: &[HeCiphertext]) -> Result<Vec<usize>> {
    cts.iter().map(|c| Ok(kp.decrypt_u64(c)? as usize)).collect()
}

fn means(counts: &[usize], n: usize) -> Vec<f64> {
    counts.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect()
}

/// Label-holder side: decrypts a message and checks it against the public
/// sizes and the label holder's class totals.
pub fn decrypt_purity(kp: &HeKeypair, msg: &PurityMessage, class_totals: &[usize]) -> Result<DecryptedPurity> {
    let left_counts = decrypt_counts(kp, &msg.left)?;
    let right_counts = decrypt_counts(kp, &msg.right)?;
    if left_counts.iter().sum::<usize>() != msg.left_size || right_counts.iter().sum::<usize>() != msg.right_size {
        return Err(Error::Protocol("decrypted class sums disagree with announced sizes".into()));
    }
    for (side, comp) in [(&left_counts, &msg.left_complement), (&right_counts, &msg.right_complement)] {
        if let Some(comp) = comp {
            let comp = decrypt_counts(kp, comp)?;
            let consistent = side.iter().zip(&comp).zip(class_totals).all(|((s, c), t)| s + c == *t);
            if !consistent {
                return Err(Error::Protocol("complement sums disagree with class totals".into()));
            }
        }
    }
    Ok(DecryptedPurity {
        left_purity: means(&left_counts, msg.left_size),
        right_purity: means(&right_counts, msg.right_size),
        left_counts,
        right_counts,
    })
}

/// Both children of a split may be disclosed under `xi`.
pub fn children_admissible(class_totals: &[usize], left: &[usize], right: &[usize], xi: f64) -> Result<bool> {
    let l = NodeClassCounts::new(class_totals.to_vec(), left.to_vec())?;
    let r = NodeClassCounts::new(class_totals.to_vec(), right.to_vec())?;
    Ok(admissible(&l, xi)? && admissible(&r, xi)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::{he_keygen, HeBackend};
    use crate::rng;

    fn counts(totals: &[usize], node: &[usize]) -> NodeClassCounts {
        NodeClassCounts::new(totals.to_vec(), node.to_vec()).unwrap()
    }

    #[test]
    fn root_bound_is_zero() {
        let c = counts(&[30, 70], &[30, 70]);
        assert_eq!(mi_upper_bound(&c).unwrap(), 0.0);
        assert!(admissible(&c, 0.0).unwrap());
    }

    #[test]
    fn pure_small_node_golden() {
        let c = counts(&[50, 50], &[10, 0]);
        let b = mi_upper_bound(&c).unwrap();
        assert!((b - std::f64::consts::LN_2).abs() < 1e-12);
        let outside = (40.0 / 90.0) * (40.0f64 / 90.0 / 0.5).ln() + (50.0 / 90.0) * (50.0f64 / 90.0 / 0.5).ln();
        assert!((outside - 0.0062).abs() < 1e-4);
        assert!(!admissible(&c, 0.5).unwrap());
        assert!(admissible(&c, 1.0).unwrap());
    }

    #[test]
    fn zero_xi_only_prior_matching_nodes() {
        assert!(admissible(&counts(&[50, 50], &[5, 5]), 0.0).unwrap());
        assert!(!admissible(&counts(&[50, 50], &[6, 4]), 0.0).unwrap());
    }

    #[test]
    fn empty_node_is_undefined() {
        assert!(matches!(mi_upper_bound(&counts(&[5, 5], &[0, 0])), Err(Error::UndefinedNode)));
    }

    #[test]
    fn purity_exchange_matches_plaintext() {
        let mut r = rng::rng(11, 0);
        let labels = [0usize, 0, 1, 1, 0, 2];
        let totals = [3, 2, 1];
        for backend in [HeBackend::Mock, HeBackend::Paillier] {
            let kp = he_keygen(backend, 512, &mut r).unwrap();
            let enc = EncryptedLabels::encrypt(&kp.public, &labels, 3, &mut r);
            let left = [0u32, 1, 2];
            let right = [3u32, 4, 5];
            let cands = [CandidateSpaces { left: &left, right: &right }];
            let msgs = secure_node_purity(&kp.public, &enc, &cands, true).unwrap();
            assert_eq!(msgs[0].ciphertext_count(), 12);
            let d = decrypt_purity(&kp, &msgs[0], &totals).unwrap();
            assert_eq!(d.left_counts, vec![2, 1, 0]);
            assert!((d.left_purity[0] - 2.0 / 3.0).abs() < 1e-15);
            assert_eq!(d.right_counts, vec![1, 1, 1]);
        }
    }

    #[test]
    fn purity_rejects_foreign_ids() {
        let mut r = rng::rng(12, 0);
        let kp = he_keygen(HeBackend::Mock, 0, &mut r).unwrap();
        let enc = EncryptedLabels::encrypt(&kp.public, &[0, 1], 2, &mut r);
        let left = [0u32];
        let right = [7u32];
        let cands = [CandidateSpaces { left: &left, right: &right }];
        assert!(matches!(
            secure_node_purity(&kp.public, &enc, &cands, false),
            Err(Error::Protocol(_))
        ));
    }
}
