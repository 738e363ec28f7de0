//! In-process simulation of federated split finding.
//!
//! The active party (id 1) holds labels and drives growth. At every node it
//! intends to divide it broadcasts the node's instance space, every party
//! proposes percentile splits over its own features, the active party picks
//! the best-scoring candidate and, if a passive party owns it, asks that party
//! for the child spaces. Messages travel over a [`Bus`] that stamps them with
//! a global sequence number and files what each passive party sees into its
//! [`PartyTranscript`].
//!
//! Scores are computed on plaintext at the active party; [`CommStats`]
//! charges the ciphertexts the encrypted protocol would exchange. The
//! ID-LMID path runs the purity exchange through a real [`crate::he`]
//! backend.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, VerticalView, ACTIVE_PARTY};
use crate::error::{Error, Result};
use crate::he::{batch_digest, he_keygen, HeBackend, HeKeypair};
use crate::idlmid::{
    children_admissible, decrypt_purity, mi_upper_bound, secure_node_purity, CandidateSpaces, EncryptedLabels,
    NodeClassCounts,
};
use crate::ldp::{grafting, lp_mst, GraftReport, NoisyLabels};
use crate::matrix::Matrix;
use crate::rng::{self, stream};
use crate::tree::{
    gini_gain, grad_hess, leaf_weight, output_count, xgb_gain, BoosterParams, GradPair, ModelKind, NodeStatistics,
    Split, SplitStatistics, Tree, TreeModel, TreeNode,
};

/// Gains at or below this are treated as no improvement.
pub const MIN_GAIN: f64 = 1e-12;

/// One participant: its view and the matching slice of the training table.
#[derive(Debug, Clone)]
pub struct Party {
    pub view: VerticalView,
    /// `N x |view|`, column `j` holds global feature `view.feature_indices[j]`.
    pub features: Matrix,
}

impl Party {
    pub fn from_view(data: &Dataset, view: VerticalView) -> Self {
        let features = data.features.select_cols(&view.feature_indices);
        Self { view, features }
    }

    pub fn party_id(&self) -> usize {
        self.view.party_id
    }

    pub fn is_active(&self) -> bool {
        self.view.party_id == ACTIVE_PARTY
    }
}

/// A split proposed by one party for one node.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitCandidate {
    pub owner_party: usize,
    pub candidate_id: usize,
    /// Global feature index; private to the owner.
    pub feature_index: usize,
    pub threshold: f64,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub score: f64,
}

/// Percentile of sorted values by linear interpolation between order
/// statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Candidates of party `p` on `node_space`, at most `l` percentile thresholds
/// per feature. Scores are left as NaN; the label holder fills them in.
pub fn propose_splits(p: &Party, node_space: &[u32], l: usize) -> Vec<SplitCandidate> {
    propose_splits_masked(p, node_space, l, None)
}

/// As [`propose_splits`], restricted to global features with `mask[f]` set.
pub fn propose_splits_masked(p: &Party, node_space: &[u32], l: usize, mask: Option<&[bool]>) -> Vec<SplitCandidate> {
    let mut out = Vec::new();
    for (local, &global) in p.view.feature_indices.iter().enumerate() {
        if mask.is_some_and(|m| !m[global]) {
            continue;
        }
        let mut pairs: Vec<(f64, u32)> = node_space
            .iter()
            .map(|&i| (p.features.get(i as usize, local), i))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let sorted: Vec<f64> = pairs.iter().map(|x| x.0).collect();
        let mut distinct = sorted.clone();
        distinct.dedup();
        let l_eff = l.min(distinct.len().saturating_sub(1));
        let mut last_left = usize::MAX;
        for j in 1..=l_eff {
            let threshold = percentile(&sorted, j as f64 / (l_eff + 1) as f64);
            let n_left = sorted.partition_point(|&v| v < threshold);
            if n_left == 0 || n_left == sorted.len() || n_left == last_left {
                continue;
            }
            last_left = n_left;
            let mut left: Vec<u32> = pairs[..n_left].iter().map(|x| x.1).collect();
            let mut right: Vec<u32> = pairs[n_left..].iter().map(|x| x.1).collect();
            left.sort_unstable();
            right.sort_unstable();
            out.push(SplitCandidate {
                owner_party: p.party_id(),
                candidate_id: out.len(),
                feature_index: global,
                threshold,
                left,
                right,
                score: f64::NAN,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CipherPurpose {
    Labels,
    Gradients,
    CandidateSums,
    PuritySums,
}

/// Protocol messages. Nothing here can carry a label, a plaintext gradient or
/// another party's feature value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    NodeBroadcast {
        tree_id: usize,
        node_id: usize,
        instance_space: Vec<u32>,
    },
    CandidateScores {
        tree_id: usize,
        node_id: usize,
        count: usize,
    },
    AdoptSplit {
        tree_id: usize,
        node_id: usize,
        candidate_id: usize,
    },
    ChildSpaces {
        tree_id: usize,
        node_id: usize,
        left: Vec<u32>,
        right: Vec<u32>,
    },
    Ciphertexts {
        purpose: CipherPurpose,
        count: u64,
        /// Set when real ciphertexts were produced.
        byte_len: Option<u64>,
        /// Hex SHA-256 over the ciphertext batch, when real.
        digest: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    pub from: usize,
    pub to: usize,
    pub message: Message,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TranscriptEvent {
    /// The label holder revealed this node's instance space.
    Broadcast {
        tree_id: usize,
        node_id: usize,
        instance_space: Vec<u32>,
    },
    /// This party's split was adopted; it knows the threshold and children.
    OwnedSplit {
        tree_id: usize,
        node_id: usize,
        feature_index: usize,
        threshold: f64,
        left: Vec<u32>,
        right: Vec<u32>,
    },
    Ciphertexts {
        sent: bool,
        purpose: CipherPurpose,
        count: u64,
        byte_len: Option<u64>,
        digest: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    /// Ciphertexts seen by this party up to and including this entry.
    pub ciphertext_count: u64,
    #[serde(flatten)]
    pub event: TranscriptEvent,
}

/// Everything one passive party observed during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartyTranscript {
    pub party_id: usize,
    pub sample_count: usize,
    pub ciphertext_count: u64,
    pub entries: Vec<TranscriptEntry>,
}

impl PartyTranscript {
    pub fn new(party_id: usize, sample_count: usize) -> Self {
        Self {
            party_id,
            sample_count,
            ciphertext_count: 0,
            entries: Vec::new(),
        }
    }

    fn push(&mut self, seq: u64, event: TranscriptEvent) {
        if let TranscriptEvent::Ciphertexts { count, .. } = &event {
            self.ciphertext_count += count;
        }
        self.entries.push(TranscriptEntry {
            seq,
            ciphertext_count: self.ciphertext_count,
            event,
        });
    }

    /// Every instance space this party knows, as `(tree_id, node_id, space)`
    /// in observation order. Owned splits contribute both children.
    pub fn known_spaces(&self) -> Vec<(usize, Option<usize>, &[u32])> {
        let mut out = Vec::new();
        for e in &self.entries {
            match &e.event {
                TranscriptEvent::Broadcast {
                    tree_id,
                    node_id,
                    instance_space,
                } => out.push((*tree_id, Some(*node_id), instance_space.as_slice())),
                TranscriptEvent::OwnedSplit {
                    tree_id, left, right, ..
                } => {
                    out.push((*tree_id, None, left.as_slice()));
                    out.push((*tree_id, None, right.as_slice()));
                }
                TranscriptEvent::Ciphertexts { .. } => {}
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Ordered in-process message queue. Keeps the full envelope log and files
/// every delivery to a passive party into that party's transcript.
#[derive(Debug, Clone)]
pub struct Bus {
    next_seq: u64,
    pub log: Vec<Envelope>,
    transcripts: BTreeMap<usize, PartyTranscript>,
}

impl Bus {
    pub fn new(passive_ids: &[usize], sample_count: usize) -> Self {
        Self {
            next_seq: 0,
            log: Vec::new(),
            transcripts: passive_ids
                .iter()
                .map(|&p| (p, PartyTranscript::new(p, sample_count)))
                .collect(),
        }
    }

    fn stamp(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    pub fn send(&mut self, from: usize, to: usize, message: Message) {
        let seq = self.stamp();
        let cipher_event = |msg: &Message, sent: bool| match msg {
            Message::Ciphertexts {
                purpose,
                count,
                byte_len,
                digest,
            } => Some(TranscriptEvent::Ciphertexts {
                sent,
                purpose: *purpose,
                count: *count,
                byte_len: *byte_len,
                digest: digest.clone(),
            }),
            _ => None,
        };
        if let Some(t) = self.transcripts.get_mut(&to) {
            let event = match &message {
                Message::NodeBroadcast {
                    tree_id,
                    node_id,
                    instance_space,
                } => Some(TranscriptEvent::Broadcast {
                    tree_id: *tree_id,
                    node_id: *node_id,
                    instance_space: instance_space.clone(),
                }),
                m => cipher_event(m, false),
            };
            if let Some(e) = event {
                t.push(seq, e);
            }
        }
        if let Some(t) = self.transcripts.get_mut(&from) {
            if let Some(e) = cipher_event(&message, true) {
                t.push(seq, e);
            }
        }
        self.log.push(Envelope { seq, from, to, message });
    }

    /// A party's private note, e.g. the details of its adopted split.
    pub fn record_local(&mut self, party: usize, event: TranscriptEvent) {
        let seq = self.stamp();
        if let Some(t) = self.transcripts.get_mut(&party) {
            t.push(seq, event);
        }
    }

    pub fn into_transcripts(self) -> Vec<PartyTranscript> {
        self.transcripts.into_values().collect()
    }

    pub fn transcripts(&self) -> impl Iterator<Item = &PartyTranscript> {
        self.transcripts.values()
    }
}

/// Ciphertext accounting for one training run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    pub label_ciphertexts: u64,
    pub gradient_ciphertexts: u64,
    pub candidate_ciphertexts: u64,
    pub purity_ciphertexts: u64,
    pub broadcasts: u64,
    pub passive_candidates: u64,
    /// Subtrees grown by the label holder alone because disclosure was
    /// inadmissible.
    pub hidden_subtrees: u64,
}

impl CommStats {
    pub fn total(&self) -> u64 {
        self.label_ciphertexts + self.gradient_ciphertexts + self.candidate_ciphertexts + self.purity_ciphertexts
    }
}

/// Ratio of defended to undefended ciphertext totals.
pub fn comm_rate(defended: &CommStats, baseline: &CommStats) -> Result<f64> {
    if baseline.total() == 0 {
        return Err(Error::UndefinedRate);
    }
    Ok(defended.total() as f64 / baseline.total() as f64)
}

fn default_stages() -> usize {
    2
}

fn default_key_bits() -> usize {
    512
}

fn default_backend() -> HeBackend {
    HeBackend::Mock
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Defense {
    None,
    /// Train on labels noised by the multi-stage label-DP procedure.
    LpMst {
        epsilon: f64,
        #[serde(default = "default_stages")]
        stages: usize,
    },
    /// LP-MST followed by grafting of contaminated subtrees.
    GraftingLdp {
        epsilon: f64,
        #[serde(default = "default_stages")]
        stages: usize,
    },
    /// Only disclose instance spaces whose MI bound is at most `xi`.
    IdLmid {
        xi: f64,
        #[serde(default = "default_backend")]
        he_backend: HeBackend,
        #[serde(default = "default_key_bits")]
        key_bits: usize,
    },
    /// The first tree is grown by the label holder alone.
    ReducedLeakage,
}

impl Defense {
    pub fn name(&self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::LpMst { .. } => "lp_mst",
            Defense::GraftingLdp { .. } => "grafting_ldp",
            Defense::IdLmid { .. } => "id_lmid",
            Defense::ReducedLeakage => "reduced_leakage",
        }
    }

    pub fn parameter(&self) -> Option<f64> {
        match self {
            Defense::LpMst { epsilon, .. } | Defense::GraftingLdp { epsilon, .. } => Some(*epsilon),
            Defense::IdLmid { xi, .. } => Some(*xi),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub model_kind: ModelKind,
    #[serde(default = "ProtocolConfig::default_depth")]
    pub max_depth: usize,
    #[serde(default = "ProtocolConfig::default_trees")]
    pub tree_count: usize,
    #[serde(default = "ProtocolConfig::default_ratio")]
    pub feature_subsample_ratio: f64,
    /// Upper bound on percentile thresholds per feature and node.
    #[serde(default = "ProtocolConfig::default_percentiles")]
    pub max_percentiles: usize,
    #[serde(default = "ProtocolConfig::default_min_samples")]
    pub min_samples_split: usize,
    #[serde(default)]
    pub booster: BoosterParams,
    #[serde(default = "ProtocolConfig::default_defense")]
    pub defense: Defense,
    #[serde(default)]
    pub seed: u64,
}

impl ProtocolConfig {
    fn default_depth() -> usize {
        6
    }
    fn default_trees() -> usize {
        5
    }
    fn default_ratio() -> f64 {
        0.8
    }
    fn default_percentiles() -> usize {
        32
    }
    fn default_min_samples() -> usize {
        2
    }
    fn default_defense() -> Defense {
        Defense::None
    }

    pub fn new(model_kind: ModelKind) -> Self {
        Self {
            model_kind,
            max_depth: 6,
            tree_count: 5,
            feature_subsample_ratio: 0.8,
            max_percentiles: 32,
            min_samples_split: 2,
            booster: BoosterParams::default(),
            defense: Defense::None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_depth < 1 {
            return Err(Error::InvalidParameter("max_depth must be at least 1".into()));
        }
        if self.tree_count < 1 {
            return Err(Error::InvalidParameter("tree_count must be at least 1".into()));
        }
        if !(self.feature_subsample_ratio > 0.0 && self.feature_subsample_ratio <= 1.0) {
            return Err(Error::InvalidParameter("feature_subsample_ratio must be in (0, 1]".into()));
        }
        if self.max_percentiles < 1 {
            return Err(Error::InvalidParameter("max_percentiles must be at least 1".into()));
        }
        if self.booster.lambda_reg < 0.0 || self.booster.gamma_reg < 0.0 {
            return Err(Error::InvalidParameter("lambda_reg and gamma_reg must be non-negative".into()));
        }
        match &self.defense {
            Defense::LpMst { epsilon, stages } | Defense::GraftingLdp { epsilon, stages } => {
                if !(*epsilon > 0.0) {
                    return Err(Error::InvalidParameter("epsilon must be positive".into()));
                }
                if !(1..=2).contains(stages) {
                    return Err(Error::InvalidParameter("stages must be 1 or 2".into()));
                }
                if matches!(self.defense, Defense::GraftingLdp { .. }) && self.model_kind == ModelKind::XgBoost {
                    return Err(Error::UnsupportedModel("grafting applies to random forests only"));
                }
            }
            Defense::IdLmid { xi, .. } => {
                if !(*xi >= 0.0) {
                    return Err(Error::InvalidParameter("xi must be non-negative".into()));
                }
            }
            Defense::None | Defense::ReducedLeakage => {}
        }
        Ok(())
    }
}

/// Label-holder state for the ID-LMID purity exchange.
struct PurityChannel {
    keypair: HeKeypair,
    enc: EncryptedLabels,
    xi: f64,
    with_complements: bool,
}

/// Per-tree growth context.
pub(crate) struct Grower<'a> {
    pub max_depth: usize,
    pub min_samples: usize,
    pub max_percentiles: usize,
    pub kind: ModelKind,
    pub params: BoosterParams,
    pub class_count: usize,
    pub labels: &'a [usize],
    pub class_totals: Vec<usize>,
    /// Gradients for the output this tree fits (boosting only).
    pub grads: Option<&'a [GradPair]>,
    pub mask: Option<&'a [bool]>,
    pub tree_id: usize,
    pub active: &'a Party,
    pub passives: &'a [Party],
}

struct Session<'s> {
    bus: &'s mut Bus,
    comm: &'s mut CommStats,
    purity: Option<&'s mut PurityChannel>,
}

impl Grower<'_> {
    fn node_stats(&self, space: &[u32]) -> NodeStatistics {
        let mut class_counts = vec![0; self.class_count];
        for &i in space {
            class_counts[self.labels[i as usize]] += 1;
        }
        let grad = match self.grads {
            Some(g) => space.iter().map(|&i| g[i as usize]).sum(),
            None => GradPair::default(),
        };
        NodeStatistics { class_counts, grad }
    }

    fn score(&self, parent: &NodeStatistics, left: &[u32]) -> Result<f64> {
        let l = self.node_stats(left);
        match self.kind {
            ModelKind::RandomForest => {
                let right: Vec<usize> = parent.class_counts.iter().zip(&l.class_counts).map(|(p, l)| p - l).collect();
                gini_gain(&SplitStatistics::from_counts(l.class_counts, right))
            }
            ModelKind::XgBoost => {
                let right = GradPair {
                    g: parent.grad.g - l.grad.g,
                    h: parent.grad.h - l.grad.h,
                };
                xgb_gain(&SplitStatistics::from_grads(l.grad, right), &self.params)
            }
        }
    }

    fn leaf(&self, nodes: &mut Vec<TreeNode>, space: Vec<u32>, depth: usize, stats: &NodeStatistics) -> usize {
        let id = nodes.len();
        nodes.push(TreeNode {
            node_id: id,
            tree_id: self.tree_id,
            depth,
            instance_space: space,
            split: None,
            children: None,
            leaf_weight: Some(leaf_weight(stats, &self.params, self.kind)),
        });
        id
    }

    /// Grows the subtree rooted at `space`. `session` is `None` when the
    /// label holder grows it alone.
    fn grow(
        &self,
        nodes: &mut Vec<TreeNode>,
        space: Vec<u32>,
        depth: usize,
        mut session: Option<&mut Session<'_>>,
    ) -> Result<usize> {
        let stats = self.node_stats(&space);
        let pure = stats.class_counts.iter().filter(|&&c| c > 0).count() <= 1;
        if depth >= self.max_depth || space.len() < self.min_samples || pure {
            return Ok(self.leaf(nodes, space, depth, &stats));
        }
        let node_id = nodes.len();
        let active_id = self.active.party_id();

        let mut candidates = propose_splits_masked(self.active, &space, self.max_percentiles, self.mask);
        if let Some(s) = session.as_deref_mut() {
            s.comm.broadcasts += 1;
            for p in self.passives {
                s.bus.send(
                    active_id,
                    p.party_id(),
                    Message::NodeBroadcast {
                        tree_id: self.tree_id,
                        node_id,
                        instance_space: space.clone(),
                    },
                );
            }
            for p in self.passives {
                let mut proposed = propose_splits_masked(p, &space, self.max_percentiles, self.mask);
                s.comm.passive_candidates += proposed.len() as u64;
                let per_candidate = match self.kind {
                    ModelKind::RandomForest => 2 * self.class_count as u64,
                    ModelKind::XgBoost => 4,
                };
                let split_cost = per_candidate * proposed.len() as u64;
                s.comm.candidate_ciphertexts += split_cost;
                let mut sent_purity = false;
                if let Some(ch) = s.purity.as_deref_mut() {
                    if !proposed.is_empty() {
                        let spaces: Vec<CandidateSpaces<'_>> = proposed
                            .iter()
                            .map(|c| CandidateSpaces {
                                left: &c.left,
                                right: &c.right,
                            })
                            .collect();
                        let msgs = secure_node_purity(&ch.keypair.public, &ch.enc, &spaces, ch.with_complements)?;
                        let count: u64 = msgs.iter().map(|m| m.ciphertext_count()).sum();
                        let digest = batch_digest(msgs.iter().flat_map(|m| m.ciphertexts()));
                        let byte_len = count * ch.keypair.public.ciphertext_bytes() as u64;
                        let mut keep = Vec::with_capacity(msgs.len());
                        for m in &msgs {
                            let d = decrypt_purity(&ch.keypair, m, &self.class_totals)?;
                            keep.push(children_admissible(&self.class_totals, &d.left_counts, &d.right_counts, ch.xi)?);
                        }
                        let mut it = keep.into_iter();
                        proposed.retain(|_| it.next().unwrap_or(false));
                        if ch.with_complements {
                            // Boosting: purity sums travel in addition to gradient sums.
                            s.comm.purity_ciphertexts += count;
                            s.bus.send(
                                p.party_id(),
                                active_id,
                                Message::Ciphertexts {
                                    purpose: CipherPurpose::CandidateSums,
                                    count: split_cost,
                                    byte_len: None,
                                    digest: None,
                                },
                            );
                        }
                        s.bus.send(
                            p.party_id(),
                            active_id,
                            Message::Ciphertexts {
                                purpose: if ch.with_complements {
                                    CipherPurpose::PuritySums
                                } else {
                                    CipherPurpose::CandidateSums
                                },
                                count,
                                byte_len: Some(byte_len),
                                digest: Some(digest),
                            },
                        );
                        sent_purity = true;
                    }
                }
                if !sent_purity && split_cost > 0 {
                    s.bus.send(
                        p.party_id(),
                        active_id,
                        Message::Ciphertexts {
                            purpose: CipherPurpose::CandidateSums,
                            count: split_cost,
                            byte_len: None,
                            digest: None,
                        },
                    );
                }
                s.bus.send(
                    p.party_id(),
                    active_id,
                    Message::CandidateScores {
                        tree_id: self.tree_id,
                        node_id,
                        count: proposed.len(),
                    },
                );
                candidates.extend(proposed);
            }
        }

        let mut best: Option<SplitCandidate> = None;
        for mut c in candidates {
            c.score = self.score(&stats, &c.left)?;
            let better = match &best {
                None => true,
                Some(b) => {
                    c.score > b.score
                        || (c.score == b.score
                            && (c.owner_party, c.feature_index, c.threshold)
                                .partial_cmp(&(b.owner_party, b.feature_index, b.threshold))
                                == Some(std::cmp::Ordering::Less))
                }
            };
            if better {
                best = Some(c);
            }
        }
        let Some(best) = best.filter(|b| b.score > MIN_GAIN) else {
            return Ok(self.leaf(nodes, space, depth, &stats));
        };

        let mut children_public = session.is_some();
        if let Some(s) = session.as_deref_mut() {
            if best.owner_party != active_id {
                s.bus.send(
                    active_id,
                    best.owner_party,
                    Message::AdoptSplit {
                        tree_id: self.tree_id,
                        node_id,
                        candidate_id: best.candidate_id,
                    },
                );
                s.bus.record_local(
                    best.owner_party,
                    TranscriptEvent::OwnedSplit {
                        tree_id: self.tree_id,
                        node_id,
                        feature_index: best.feature_index,
                        threshold: best.threshold,
                        left: best.left.clone(),
                        right: best.right.clone(),
                    },
                );
                s.bus.send(
                    best.owner_party,
                    active_id,
                    Message::ChildSpaces {
                        tree_id: self.tree_id,
                        node_id,
                        left: best.left.clone(),
                        right: best.right.clone(),
                    },
                );
            } else if let Some(ch) = s.purity.as_deref() {
                let l = self.node_stats(&best.left).class_counts;
                let r = self.node_stats(&best.right).class_counts;
                if !children_admissible(&self.class_totals, &l, &r, ch.xi)? {
                    children_public = false;
                    s.comm.hidden_subtrees += 1;
                }
            }
        }

        nodes.push(TreeNode {
            node_id,
            tree_id: self.tree_id,
            depth,
            instance_space: space,
            split: Some(Split {
                owner_party: best.owner_party,
                feature_index: best.feature_index,
                threshold: best.threshold,
            }),
            children: None,
            leaf_weight: None,
        });
        let child_session = if children_public { session } else { None };
        let (l, r) = match child_session {
            Some(s) => {
                let l = self.grow(nodes, best.left, depth + 1, Some(&mut *s))?;
                let r = self.grow(nodes, best.right, depth + 1, Some(&mut *s))?;
                (l, r)
            }
            None => {
                let l = self.grow(nodes, best.left, depth + 1, None)?;
                let r = self.grow(nodes, best.right, depth + 1, None)?;
                (l, r)
            }
        };
        nodes[node_id].children = Some((l, r));
        Ok(node_id)
    }
}

/// Grows a subtree with the label holder's features only, rooted at `space`
/// at depth `depth`. Node ids in the result are local (0 is the subtree
/// root). Used by the interim model of LP-MST and by grafting.
#[allow(clippy::too_many_arguments)]
pub fn grow_subtree_local(
    active: &Party,
    labels: &[usize],
    class_count: usize,
    space: Vec<u32>,
    depth: usize,
    max_depth: usize,
    max_percentiles: usize,
    mask: Option<&[bool]>,
    tree_id: usize,
) -> Result<Vec<TreeNode>> {
    let g = Grower {
        max_depth,
        min_samples: 2,
        max_percentiles,
        kind: ModelKind::RandomForest,
        params: BoosterParams::default(),
        class_count,
        labels,
        class_totals: Vec::new(),
        grads: None,
        mask,
        tree_id,
        active,
        passives: &[],
    };
    let mut nodes = Vec::new();
    g.grow(&mut nodes, space, depth, None)?;
    Ok(nodes)
}

/// One forest tree of the federated protocol, for single-tree experiments.
/// With `bus` set to `None` the tree is grown by the label holder alone.
#[allow(clippy::too_many_arguments)]
pub fn grow_tree(
    active: &Party,
    passives: &[Party],
    cfg: &ProtocolConfig,
    labels: &[usize],
    class_count: usize,
    tree_id: usize,
    mask: Option<&[bool]>,
    bus: Option<&mut Bus>,
    comm: &mut CommStats,
) -> Result<Tree> {
    let class_totals = class_totals(labels, class_count);
    let g = Grower {
        max_depth: cfg.max_depth,
        min_samples: cfg.min_samples_split,
        max_percentiles: cfg.max_percentiles,
        kind: ModelKind::RandomForest,
        params: cfg.booster,
        class_count,
        labels,
        class_totals,
        grads: None,
        mask,
        tree_id,
        active,
        passives,
    };
    let root: Vec<u32> = (0..labels.len() as u32).collect();
    let mut nodes = Vec::new();
    match bus {
        Some(bus) => {
            let mut s = Session {
                bus,
                comm,
                purity: None,
            };
            g.grow(&mut nodes, root, 0, Some(&mut s))?;
        }
        None => {
            g.grow(&mut nodes, root, 0, None)?;
        }
    }
    Ok(Tree {
        tree_id,
        output: 0,
        nodes,
    })
}

fn class_totals(labels: &[usize], class_count: usize) -> Vec<usize> {
    let mut t = vec![0; class_count];
    for &y in labels {
        t[y] += 1;
    }
    t
}

/// Global feature mask with `ceil(ratio * F)` features set.
pub fn subsample_features(feature_count: usize, ratio: f64, rng: &mut rng::Rng) -> Vec<bool> {
    let k = ((ratio * feature_count as f64) - 1e-9).ceil().max(1.0) as usize;
    let k = k.min(feature_count);
    let mut order: Vec<usize> = (0..feature_count).collect();
    order.shuffle(rng);
    let mut mask = vec![false; feature_count];
    for &f in &order[..k] {
        mask[f] = true;
    }
    mask
}

/// Result of a federated training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: TreeModel,
    /// Model before grafting, when grafting ran.
    pub unrepaired: Option<TreeModel>,
    /// One transcript per passive party, ordered by party id.
    pub transcripts: Vec<PartyTranscript>,
    pub comm: CommStats,
    pub noisy_labels: Option<NoisyLabels>,
    pub graft_report: Option<GraftReport>,
    /// Labels the ensemble was fit to (noised under label DP).
    pub training_labels: Vec<usize>,
    pub bus_log: Vec<Envelope>,
}

fn build_parties(data: &Dataset, views: &[VerticalView]) -> Result<(Party, Vec<Party>)> {
    let mut active = None;
    let mut passives = Vec::new();
    for v in views {
        let p = Party::from_view(data, v.clone());
        if p.is_active() {
            if active.is_some() {
                return Err(Error::InvalidPartition("more than one active party".into()));
            }
            active = Some(p);
        } else {
            passives.push(p);
        }
    }
    let active = active.ok_or_else(|| Error::InvalidPartition("no active party".into()))?;
    passives.sort_by_key(|p| p.party_id());
    Ok((active, passives))
}

/// Active-party-only forest on the rows in `rows`, used as the LP-MST
/// interim model.
fn train_local_forest(
    active: &Party,
    cfg: &ProtocolConfig,
    labels: &[usize],
    class_count: usize,
    rows: &[usize],
    feature_count: usize,
) -> Result<TreeModel> {
    let mut model = TreeModel::empty(
        ModelKind::RandomForest,
        class_count,
        cfg.max_depth,
        cfg.feature_subsample_ratio,
        cfg.booster,
    );
    let mut frng = rng::rng(cfg.seed, stream::LP_STAGES ^ stream::FEATURE_SUBSAMPLE);
    let root: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
    for t in 0..cfg.tree_count {
        let mask = subsample_features(feature_count, cfg.feature_subsample_ratio, &mut frng);
        let nodes = grow_subtree_local(
            active,
            labels,
            class_count,
            root.clone(),
            0,
            cfg.max_depth,
            cfg.max_percentiles,
            Some(&mask),
            t,
        )?;
        model.trees.push(Tree {
            tree_id: t,
            output: 0,
            nodes,
        });
    }
    model.tree_count = cfg.tree_count;
    Ok(model)
}

/// Trains the full ensemble under `cfg` on `data` split into `views`.
pub fn train_federated(cfg: &ProtocolConfig, views: &[VerticalView], data: &Dataset) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidParameter("training set is empty".into()));
    }
    let (active, passives) = build_parties(data, views)?;
    let n = data.len();
    let c = data.class_count;
    let f = data.feature_count();

    let noisy_labels = match &cfg.defense {
        Defense::LpMst { epsilon, stages } | Defense::GraftingLdp { epsilon, stages } => {
            let mut trainer = |stage1: &[usize], noisy: &[usize], stage2: &[usize]| -> Result<Vec<Vec<f64>>> {
                let interim = train_local_forest(&active, cfg, noisy, c, stage1, f)?;
                stage2.iter().map(|&r| interim.predict(data.features.row(r))).collect()
            };
            Some(lp_mst(&data.labels, c, *epsilon, *stages, &mut trainer, cfg.seed)?)
        }
        _ => None,
    };
    let labels: Vec<usize> = noisy_labels
        .as_ref()
        .map_or_else(|| data.labels.clone(), |nl| nl.labels.clone());
    let totals = class_totals(&labels, c);

    let passive_ids: Vec<usize> = passives.iter().map(Party::party_id).collect();
    let mut bus = Bus::new(&passive_ids, n);
    let mut comm = CommStats::default();

    let mut purity = match &cfg.defense {
        Defense::IdLmid {
            xi,
            he_backend,
            key_bits,
        } => {
            let mut hrng = rng::rng(cfg.seed, stream::HE);
            let keypair = he_keygen(*he_backend, *key_bits, &mut hrng)?;
            let enc = EncryptedLabels::encrypt(&keypair.public, &labels, c, &mut hrng);
            Some(PurityChannel {
                keypair,
                enc,
                xi: *xi,
                with_complements: cfg.model_kind == ModelKind::XgBoost,
            })
        }
        _ => None,
    };
    let reduced = matches!(cfg.defense, Defense::ReducedLeakage);
    let outputs = output_count(c);
    let total_trees = match cfg.model_kind {
        ModelKind::RandomForest => cfg.tree_count,
        ModelKind::XgBoost => cfg.tree_count * outputs,
    };
    let any_federated = !passives.is_empty() && !(reduced && total_trees == 1);
    let labels_broadcast = cfg.model_kind == ModelKind::RandomForest || purity.is_some();
    if any_federated && labels_broadcast {
        for p in &passives {
            let count = (n * c) as u64;
            comm.label_ciphertexts += count;
            let (byte_len, digest) = match &purity {
                Some(ch) => (
                    Some(count * ch.keypair.public.ciphertext_bytes() as u64),
                    Some(batch_digest(ch.enc.rows.iter().flatten())),
                ),
                None => (None, None),
            };
            bus.send(
                ACTIVE_PARTY,
                p.party_id(),
                Message::Ciphertexts {
                    purpose: CipherPurpose::Labels,
                    count,
                    byte_len,
                    digest,
                },
            );
        }
    }
    let mut model = TreeModel::empty(cfg.model_kind, c, cfg.max_depth, cfg.feature_subsample_ratio, cfg.booster);
    let mut frng = rng::rng(cfg.seed, stream::FEATURE_SUBSAMPLE);
    let root: Vec<u32> = (0..n as u32).collect();
    let mut margins = vec![vec![0.0; outputs]; n];

    let rounds = cfg.tree_count;
    let per_round = match cfg.model_kind {
        ModelKind::RandomForest => 1,
        ModelKind::XgBoost => outputs,
    };
    for round in 0..rounds {
        let gh = match cfg.model_kind {
            ModelKind::XgBoost => Some(grad_hess(&labels, &margins, c)),
            ModelKind::RandomForest => None,
        };
        for k in 0..per_round {
            let tree_id = round * per_round + k;
            let mask = subsample_features(f, cfg.feature_subsample_ratio, &mut frng);
            let column: Option<Vec<GradPair>> = gh.as_ref().map(|gh| gh.iter().map(|row| row[k]).collect());
            let grower = Grower {
                max_depth: cfg.max_depth,
                min_samples: cfg.min_samples_split,
                max_percentiles: cfg.max_percentiles,
                kind: cfg.model_kind,
                params: cfg.booster,
                class_count: c,
                labels: &labels,
                class_totals: totals.clone(),
                grads: column.as_deref(),
                mask: Some(&mask),
                tree_id,
                active: &active,
                passives: &passives,
            };
            let federated = !passives.is_empty() && !(reduced && tree_id == 0);
            let mut nodes = Vec::new();
            if federated {
                if cfg.model_kind == ModelKind::XgBoost {
                    for p in &passives {
                        let count = 2 * n as u64;
                        comm.gradient_ciphertexts += count;
                        bus.send(
                            ACTIVE_PARTY,
                            p.party_id(),
                            Message::Ciphertexts {
                                purpose: CipherPurpose::Gradients,
                                count,
                                byte_len: None,
                                digest: None,
                            },
                        );
                    }
                }
                let mut s = Session {
                    bus: &mut bus,
                    comm: &mut comm,
                    purity: purity.as_mut(),
                };
                grower.grow(&mut nodes, root.clone(), 0, Some(&mut s))?;
            } else {
                grower.grow(&mut nodes, root.clone(), 0, None)?;
            }
            if cfg.model_kind == ModelKind::XgBoost {
                for leaf in nodes.iter().filter(|n| n.is_leaf()) {
                    let w = leaf.leaf_weight.as_ref().map_or(0.0, |w| w[0]);
                    for &i in &leaf.instance_space {
                        margins[i as usize][k] += cfg.booster.learning_rate * w;
                    }
                }
            }
            model.trees.push(Tree {
                tree_id,
                output: k,
                nodes,
            });
        }
    }
    model.tree_count = cfg.tree_count;

    let (model, unrepaired, graft_report) = if matches!(cfg.defense, Defense::GraftingLdp { .. }) {
        let (repaired, report) = grafting(&model, &data.labels, &labels, &active, cfg.max_percentiles)?;
        (repaired, Some(model), Some(report))
    } else {
        (model, None, None)
    };

    Ok(TrainOutput {
        model,
        unrepaired,
        transcripts: bus.transcripts().cloned().collect(),
        comm,
        noisy_labels,
        graft_report,
        training_labels: labels,
        bus_log: bus.log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuditFinding {
    /// The space's MI bound exceeds the configured threshold.
    BoundExceeded { tree_id: usize, node_id: Option<usize>, bound: f64 },
    /// An owned split whose parent was never broadcast to this party.
    UnjustifiedSplit { tree_id: usize, node_id: usize },
    /// Owned children that do not partition their parent.
    NotAPartition { tree_id: usize, node_id: usize },
    /// A sample id outside the training set.
    UnknownId { tree_id: usize, id: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub party_id: usize,
    pub xi: Option<f64>,
    pub spaces_checked: usize,
    pub max_bound: f64,
    pub findings: Vec<AuditFinding>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Replays a transcript against the training labels: every visible or
/// derivable space must satisfy the MI bound (when `xi` is given) and every owned split must
/// partition a space that was broadcast to this party.
pub fn audit_transcript(t: &PartyTranscript, labels: &[usize], class_count: usize, xi: Option<f64>) -> Result<AuditReport> {
    let mut findings = Vec::new();
    let mut broadcast: BTreeMap<(usize, usize), &[u32]> = BTreeMap::new();
    let mut spaces_checked = 0;
    let mut max_bound: f64 = 0.0;
    let mut check = |tree_id: usize, node_id: Option<usize>, space: &[u32], findings: &mut Vec<AuditFinding>| {
        if let Some(&bad) = space.iter().find(|&&i| i as usize >= labels.len()) {
            findings.push(AuditFinding::UnknownId { tree_id, id: bad });
            return Ok::<(), Error>(());
        }
        if space.is_empty() {
            return Ok(());
        }
        spaces_checked += 1;
        let bound = mi_upper_bound(&NodeClassCounts::from_space(labels, class_count, space))?;
        max_bound = max_bound.max(bound);
        if let Some(xi) = xi {
            if bound > xi {
                findings.push(AuditFinding::BoundExceeded { tree_id, node_id, bound });
            }
        }
        Ok(())
    };
    for e in &t.entries {
        match &e.event {
            TranscriptEvent::Broadcast {
                tree_id,
                node_id,
                instance_space,
            } => {
                check(*tree_id, Some(*node_id), instance_space, &mut findings)?;
                broadcast.insert((*tree_id, *node_id), instance_space);
            }
            TranscriptEvent::OwnedSplit {
                tree_id,
                node_id,
                left,
                right,
                ..
            } => {
                match broadcast.get(&(*tree_id, *node_id)) {
                    None => findings.push(AuditFinding::UnjustifiedSplit {
                        tree_id: *tree_id,
                        node_id: *node_id,
                    }),
                    Some(parent) => {
                        let mut joined: Vec<u32> = left.iter().chain(right).copied().collect();
                        joined.sort_unstable();
                        if joined.as_slice() != *parent {
                            findings.push(AuditFinding::NotAPartition {
                                tree_id: *tree_id,
                                node_id: *node_id,
                            });
                        }
                    }
                }
                check(*tree_id, None, left, &mut findings)?;
                check(*tree_id, None, right, &mut findings)?;
            }
            TranscriptEvent::Ciphertexts { .. } => {}
        }
    }
    // Sibling complements the party can derive count as visible too.
    let seen: std::collections::BTreeSet<(usize, &[u32])> = t.known_spaces().into_iter().map(|(tree, _, s)| (tree, s)).collect();
    let view = crate::attack::AttackerView::from_transcript(t);
    for tree in &view.trees {
        for space in &tree.spaces {
            if !seen.contains(&(tree.tree_id, space.as_slice())) {
                check(tree.tree_id, None, space, &mut findings)?;
            }
        }
    }
    Ok(AuditReport {
        party_id: t.party_id,
        xi,
        spaces_checked,
        max_bound,
        findings,
    })
}
