//! Lossless cross-sequential re-parameterization of multi-branch TDNN
//! speaker-embedding networks.
//!
//! A CPU inference runtime ([`runtime`]), a layer-graph representation
//! ([`graph`]), the four-step rewrite that turns conv → activation → bn
//! multi-branch layers into a plain conv chain ([`reparam`]), the Rep-TDNN
//! architecture ([`rep_tdnn`]), a binary model container ([`container`]),
//! scoring metrics ([`metrics`]), a throughput harness ([`bench`]) and the
//! `csrep` command line ([`cli`]).

pub mod bench;
pub mod cli;
pub mod container;
pub mod element;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod rep_tdnn;
pub mod reparam;
pub mod runtime;
pub mod tensor;

pub use container::AnyModel;
pub use element::{DType, Element};
pub use error::{Error, Result};
pub use graph::{Branch, BranchOp, LayerOrder, ModelGraph, Node, PoolingHead, SequentialLayer};
pub use rep_tdnn::{build_rep_tdnn, RepTdnnConfig};
pub use reparam::{csrep_transform, RewriteReport, Step, TransformOptions};
pub use runtime::{Activation, BatchNormParams, TdnnLayer};
pub use tensor::{Matrix, Tensor3};
