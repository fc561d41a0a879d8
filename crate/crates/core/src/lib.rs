//! Visually-guided advantage shaping for group-relative policy optimization.
//!
//! Each generated token is scored by how close its hidden state lies to a
//! pooled prototype of the image tokens. High-scoring tokens in the tail of a
//! response receive a position-scheduled bonus, and the resulting weights
//! re-scale the group-relative advantage both within a response and across
//! the responses of a group.
//!
//! The crate also carries the surrounding machinery: the clipped surrogate
//! with analytic gradients, forgetting diagnostics, a line-delimited trace
//! format and a synthetic lab that trains a toy policy end to end.

pub mod compensation;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod focus;
pub mod grpo;
pub mod model;
pub mod pipeline;
pub mod reweight;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
pub use grpo::{ClipConfig, LossAgg};
pub use model::{
    validate_group, validate_trajectory, ImageTokens, RolloutGroup, Schedule, ShapedAdvantages, ShapedTrajectory,
    ShapingConfig, Span, StdMode, Trajectory, VisualContext,
};
pub use pipeline::{shape_from_focus, shape_group};
pub use synth::{Algo, SynthConfig};
