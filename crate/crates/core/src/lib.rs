//! Budget-constrained data valuation and selection for MLP training.
//!
//! Given a pool of labeled samples split across heterogeneous sources and a
//! labeling/compute budget `B`, the engine scores candidate samples with a
//! composite of six value signals — activation quality, gradient relevance,
//! representation diversity, gradient impact, conditional uncertainty, and
//! training stability — and greedily assembles a training subset under
//! per-source quotas and a redundancy gate. Source draws are steered by a
//! UCB bandit; the weights combining the six signals are tuned online by a
//! small Gaussian-process optimizer against validation probes.
//!
//! Crate layout:
//! - [`mlp`]: the network, forward traces, per-layer gradients, SGD.
//! - [`cache`]: version-keyed LRU cache of per-sample evaluations.
//! - [`stats`]: Welford moments, gradient momentum, loss histories.
//! - [`lsh`]: random-hyperplane index behind the diversity signal.
//! - [`metrics`]: the six value signals and their composition.
//! - [`weights`]: simplex projection, GP surrogate, weight tuning.
//! - [`bandit`]: UCB1 source selection and regret simulation.
//! - [`data`]: synthetic pools, CSV/JSONL ingestion, splits.
//! - [`train`]: minibatch SGD loops and classifier evaluation.
//! - [`engine`]: the selection loop tying everything together.
//! - [`baselines`]: random and uncertainty selection for comparison.
//! - [`experiment`]: benchmark/scaling harnesses and text tables.

pub mod bandit;
pub mod baselines;
pub mod cache;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod lsh;
pub mod metrics;
pub mod mlp;
pub mod report;
pub mod stats;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use mlp::{Activation, ForwardTrace, LayerGradients, LossKind, MlpModel, OutputKind, SampleEval, Target};
