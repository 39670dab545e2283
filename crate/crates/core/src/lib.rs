//! Stability analysis for finite-state continuous-time hidden Markov models.
//!
//! The crate decides observability and detectability of a signal/observation
//! model with exact linear algebra, classifies the signal chain into ergodic
//! and transient parts, and checks the resulting verdicts empirically by
//! running pairs of Wonham filters from different priors on shared
//! observation paths. A linear-Gaussian counterpart (Riccati flow, Hautus
//! test, paired Kalman filters) lives in [`kalman`].

pub mod chain;
pub mod kalman;
pub mod model;
pub mod numlin;
pub mod observability;
pub mod rng;
pub mod verdict;
pub mod wonham;

pub use chain::{decompose, forward_flow, ChainDecomposition};
pub use model::{builtin_presets, find_preset, FiniteHmm, InitialPair, ModelSpec, ObsKind, Preset};
pub use numlin::Subspace;
pub use observability::{observable_space, ObservabilityResult};
pub use verdict::{analyze, assess, StabilityReport};
