//! Desk-scale versions of the experimental protocols.

pub mod concentration;
pub mod gl;
pub mod output;
pub mod phase;
pub mod rank;
pub mod sampler;
pub mod seed;
pub mod semantic;

pub use concentration::{concentration_suite, ConcentrationReport};
pub use gl::{gl_curve, gl_score, GlCurve, GlCurveConfig, GlPoint};
pub use phase::{phase_grid, with_threads, Method, ModelFamily, PhaseGrid, PhaseSettings};
pub use rank::{mean_rank_by_time, rank_vs_snr, JacobianSource};
pub use sampler::{reverse_from, reverse_sample, SamplerConfig, ScoreSource};
pub use seed::derive_seed;
pub use semantic::{energy_split, semantic_sweep, SweepResult};
