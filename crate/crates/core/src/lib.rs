//! Nonparametric variational reinterpretation of Transformer attention.
//!
//! Standard attention is read as denoising a query against a mixture of
//! impulses at the keys. Replacing the impulses with a Dirichlet-process
//! posterior over Gaussians (plus a prior component) gives denoising
//! attention, and an identity-initialised NVIB projection makes the
//! reinterpreted model reproduce its standard twin until the `τ`
//! hyperparameters are moved away from the equivalence setting.

// `!(x > 0.0)` style checks are used deliberately so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod denoising;
pub mod error;
pub mod experiments;
pub mod format;
pub mod mixture;
pub mod model;
pub mod numeric;
pub mod nvib;
pub mod prior;

pub use attention::{attention, AttentionMask, AttentionParams};
pub use denoising::{eval_dattn_multihead, train_dattn_multihead, AttentionMap, DenoisingAttentionInputs};
pub use error::{NvError, Result};
pub use model::{forward_nv, forward_standard, greedy_decode, reinterpret, ModelConfig, ModelWeights, NvModel, Site};
pub use numeric::{Matrix, Rng};
pub use nvib::{identity_init, project, DpPosterior, EmpiricalPrior, LayerGroup, NvibProjection, TauConfig};
pub use prior::{estimate_priors, Example};
