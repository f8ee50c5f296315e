//! Tape-based reverse-mode automatic differentiation over dense row-major
//! `f64` arrays, with exactly the operator set a point-cloud scene-flow
//! network needs: linear layers, neighbor gathers and reductions, softmax
//! attention, feature normalization, and a differentiable 3×3 polar
//! rotation for weighted Kabsch alignment.

pub mod adam;
mod backward;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod param;
pub mod tape;

pub use adam::{decayed_lr, Adam};
pub use error::{Result, TensorError};
pub use gradcheck::{GradCheck, GradReport};
pub use ops::{Activation, Reduce};
pub use param::{AdamState, Buffer, BufferId, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Mode, Precision, StatUpdate, Tape, Var};
