//! Hierarchical multi-interest co-network (HCN) for coarse-grained ranking.
//!
//! The crate is organized as five subsystems:
//!
//! - [`tensor`] — dense-matrix engine with reverse-mode autodiff, Adam, and
//!   the parameter checkpoint format.
//! - [`data`] — interaction-log ingestion, vocabularies, long/short window
//!   sample assembly with negative sampling, and a synthetic
//!   planted-interest generator.
//! - [`model`] — the HCN network: hierarchical multi-interest extraction,
//!   the co-interest cross-attention, the two towers, aggregation scoring,
//!   and ablation variants.
//! - [`train`] — minibatch training, ranking metrics (AUC, hit rate, NDCG),
//!   the pairwise-Pearson diversity diagnostic, and the ablation driver.
//! - [`serve`] — offline item-embedding export and the request-time scoring
//!   path.

pub mod data;
pub mod model;
pub mod serve;
pub mod tensor;
pub mod train;
