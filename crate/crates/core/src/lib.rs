//! Next taxi drop-off prediction.
//!
//! The pipeline turns raw trip records into per-driver pick-up/drop-off
//! sequences, clusters drop-offs with haversine K-means, derives POI
//! bag-of-concepts and CBOW zone embeddings, and trains an attention LSTM
//! whose softmax over clusters is mapped to coordinates through a trainable
//! centroid layer. Baselines and the error distance score live alongside.

pub mod clustering;
pub mod experiment;
pub mod features;
pub mod geo;
pub mod ingest;
pub mod model;
pub mod synthetic;
pub mod tensor_nn;
