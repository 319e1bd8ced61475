//! Bigram toy language modeling with mixed forward and reverse cross-entropy
//! objectives.
//!
//! A random [`world::BigramWorld`] plays the role of the data distribution, a
//! small [`model::NeuralBigramLM`] is trained against it under one of the
//! [`objectives`], and [`metrics`] compares the learned transition matrix with
//! the gold one.

pub mod corpus;
pub mod grad;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod sampling;
pub mod trainer;
pub mod world;
