//! Multilingual, multimodal knowledge graph construction and entity retrieval.
//!
//! The crate is split along the life of a graph:
//!
//! - [`kg`]: the typed graph itself and the relation-label mapping.
//! - [`pipeline`]: iterative expansion from seed nodes through the image
//!   filter cascade.
//! - [`embed`]: embedding providers, similarity kernels and the binary
//!   vector file format.
//! - [`retrieval`]: sentence/image to node ranking and the Hits@k harness.
//! - [`corpus`]: on-disk graph format, splits, statistics and embedding export.

pub mod corpus;
pub mod embed;
pub mod kg;
pub mod pipeline;
pub mod retrieval;
