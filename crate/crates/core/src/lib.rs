//! Knowledge-enhanced visual grounding for pathology crops.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`geometry`]: boxes, IoU/GIoU and the box-regression loss.
//! * [`synth`]: a deterministic synthetic corpus with magnification tags.
//! * [`knowledge`]: expansion of pathological terms into visual descriptions.
//! * [`model`]: the grounding network (visual branch, shared text encoder,
//!   knowledge fusion, cross-modal fusion with a regression token).
//! * [`train`]: optimisation loop, checkpoints and training logs.
//! * [`eval`]: magnification-aware accuracy and mIoU reporting.
//! * [`ablation`]: multi-seed runs over the knowledge pathways.

pub mod ablation;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod knowledge;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{BoundingBox, CornerBox, IouVariant, LossBreakdown, LossConfig};
pub use synth::{GroundingSample, Magnification, Split};

pub use candle_core::Device;
