//! Cooperative diffusion recovery likelihood at desk scale.
//!
//! A ladder of noise levels carries, at every level, an energy-based model of
//! the noisy data and a Gaussian initializer that proposes where Langevin
//! chains should start. The two are trained jointly: initializer proposals
//! are refined by a few Langevin steps under the energy model, the energy
//! model is fit by recovery likelihood against the refined samples, and the
//! initializer regresses onto them.

pub mod cli;
pub mod eval;
pub mod io;
pub mod models;
pub mod ndgrad;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;
