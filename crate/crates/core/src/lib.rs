//! Sequential next-item recommendation for in-match purchase histories.
//!
//! The crate covers the whole benchmark pipeline: match ingestion and
//! preprocessing ([`data`]), a synthetic corpus generator with a known
//! optimal predictor ([`synth`]), a small reverse-mode autodiff core
//! ([`autodiff`]), eight rankers behind one contract ([`models`]), training
//! with early stopping ([`training`]), Recall@k / NDCG@k evaluation
//! ([`eval`]) and random hyperparameter search ([`hpo`]).

pub mod autodiff;
pub mod data;
pub mod models;
pub mod synth;
pub mod eval;
pub mod training;
pub mod hpo;
