//! Hessian-free online data valuation for dense networks.
//!
//! The crate bundles a small feed-forward network with manual backprop
//! ([`network`]), four influence estimators built on per-layer taps
//! ([`influence`]), Shapley and leave-one-out references under a one-step
//! utility ([`oracle`]), an SGD trainer that curates every batch by
//! estimated influence ([`trainer`]), synthetic noisy-label datasets
//! ([`data`]), and the fidelity / reporting layer ([`evaluation`]).
//!
//! Hot loops (Monte-Carlo permutations, batch scoring, checkpoint sweeps)
//! run on rayon when the `parallel` feature is enabled and fall back to
//! plain iterators otherwise. Results are identical in both modes: every
//! parallel map collects in index order and reductions stay sequential.

pub mod cli;
pub mod data;
pub mod evaluation;
pub mod influence;
pub mod network;
pub mod oracle;
pub mod par;
pub mod trainer;

mod numfmt;

pub use data::{DatasetBundle, Sample};
pub use influence::{Estimator, InfluenceScore, SignConvention};
pub use network::{Activation, LayerSpec, Mlp, ParamGrads, SampleTaps};
