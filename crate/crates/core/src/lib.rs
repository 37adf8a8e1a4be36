//! Multi-view listwise passage reranker.
//!
//! Each candidate passage is encoded independently behind `m` shared view
//! tokens; a one-token decoder turns every view into an anchor, and a
//! passage's score is the aggregated dot product of its view vectors with the
//! anchors. All candidates are scored in one decoding step, and no candidate
//! identifiers appear in any prompt, so the ranking does not depend on the
//! order the candidates arrive in.
//!
//! The numerical core (tensors, autodiff, losses, metrics, encoder, decoder,
//! model) is generic over [`Scalar`] (`f32` or `f64`). Training, checkpoints,
//! audits and the pipeline cost model work in `f64`; the aliases below name
//! the concrete types.

pub mod ablation;
pub mod audit;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numerics::Tensor<f64>;
pub type Graph = numerics::Graph<f64>;
pub type ModelParams = params::ModelParams<f64>;
pub type Model = model::MvpModel<f64>;
pub type RelevanceMatrix = encoder::RelevanceMatrix<f64>;
pub type AnchorSet = decoder::AnchorSet<f64>;
pub type ScoreVector = decoder::ScoreVector<f64>;
pub type Checkpoint = trainer::Checkpoint<f64>;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Model32 = model::MvpModel<f32>;
