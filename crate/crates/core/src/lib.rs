//! Grounding losses for two-stage visual-textual grounding: IoU/CIoU geometry,
//! semantic KL targets, semantic-weighted box refinement, a small trainable
//! grounding head and an evaluation harness.

pub mod cli;
pub mod error;
pub mod evalio;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod targets;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{ciou_loss, iou, CenterBox, CiouBreakdown, CiouOptions, CornerBox};
pub use losses::{compute_loss, GroundingKind, LossConfig, LossOutput, RefinementKind};
pub use model::{HeadParameters, ModelDims};
pub use targets::{build_target, ClassDistribution, TargetBundle};
