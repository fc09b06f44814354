//! Non-maximum suppression for object detection: a greedy reference,
//! the original MaxpoolNMS, and pyramid shifted MaxpoolNMS over recovered
//! score maps, plus the tooling to compare them.

pub mod bench;
pub mod boxcore;
pub mod config;
pub mod engine;
pub mod error;
pub mod greedy;
pub mod ingest;
pub mod metrics;
pub mod poolnms;
pub mod scoremap;

pub use boxcore::{iou, AnchorSource, BoundingBox, ClassId, DetId, Detection};
pub use engine::Engine;
pub use config::{Assignment, NmsConfig, StageKind, StageSpec};
pub use error::{NmsError, Result};
pub use greedy::{greedy_nms, greedy_nms_all_classes, ClassKept, KeptSet};
pub use poolnms::{maxpoolnms_legacy, psrr_nms, KernelSpec};
pub use scoremap::{Projection, ScoreMapStack};
