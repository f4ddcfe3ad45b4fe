//! Rotation-robust classification by enclosing a CNN backbone with quarter-turn
//! transforms, their reverse on feature maps, and a feature-map ensemble.

pub mod data;
pub mod ensemble;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use ensemble::{BranchSet, Combine, ScoreSet};
pub use geometry::{ContinuousTransform, QuarterTurn};
pub use model::{InferenceMode, ModeKind, ModelGraph};
pub use tensor::{Tape, Tensor4, TensorError, Var};
