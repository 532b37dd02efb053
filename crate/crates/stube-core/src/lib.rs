//! Core library for the semantic-tube experiment stack: a reverse-mode
//! autodiff tape over flat `f64` tensors, a toy decoder-only transformer with
//! low-rank adapters, a synthetic chain-sum corpus, trajectory-smoothness
//! losses and scores, linear/MLP next-state predictors, and the metric suite
//! plus grid runner that ties them together.

pub mod corpus;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod predict;
pub mod rng;
pub mod tensor;
pub mod trajectory;
