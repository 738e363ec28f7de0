//! Simulator for label leakage in tree-based vertical federated learning.
//!
//! Parties hold disjoint feature slices of one table; the active party also
//! holds the labels. [`protocol::train_federated`] trains a random forest or
//! gradient-boosted ensemble under the split-finding protocol and records what
//! every passive party observed. [`attack`] recovers label clusters from such
//! a transcript, and [`ldp`] and [`idlmid`] implement the defenses.
//!
//! ```
//! use treeleak::dataset::{gen_synthetic, make_partition, PartitionSpec};
//! use treeleak::protocol::{train_federated, ProtocolConfig};
//! use treeleak::tree::ModelKind;
//!
//! let data = gen_synthetic(120, 6, 2, 0.5, 1).unwrap();
//! let views = make_partition(&data, &PartitionSpec::RandomHalf { seed: 1 }).unwrap();
//! let out = train_federated(&ProtocolConfig::new(ModelKind::RandomForest), &views, &data).unwrap();
//! assert_eq!(out.model.trees.len(), 5);
//! assert_eq!(out.transcripts.len(), 1);
//! ```

pub mod attack;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod he;
pub mod idlmid;
pub mod ldp;
pub mod matrix;
pub mod protocol;
pub mod rng;
pub mod tree;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/attack.md")]
    mod attack {}
    #[doc = include_str!("../../../book/src/defenses.md")]
    mod defenses {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
