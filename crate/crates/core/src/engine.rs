//! Named engines, as selected on the command line and through the C API.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::boxcore::Detection;
use crate::config::{NmsConfig, StageKind, StageSpec};
use crate::error::{NmsError, Result};
use crate::greedy::{greedy_nms, per_class, ClassKept, KeptSet};
use crate::poolnms::{maxpool_pipeline, PipelineRun};
use crate::scoremap::Projection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Engine {
    Greedy,
    Psrr,
    Legacy(StageKind),
}

impl Engine {
    pub const LEGACY: [Engine; 3] = [
        Engine::Legacy(StageKind::Single),
        Engine::Legacy(StageKind::Ratio),
        Engine::Legacy(StageKind::Scale),
    ];

    pub fn needs_anchors(self) -> bool {
        matches!(self, Engine::Legacy(_))
    }

    /// Runs on one class's detections.
    pub fn run(self, dets: &[Detection], config: &NmsConfig) -> Result<KeptSet> {
        match self {
            Engine::Greedy => Ok(greedy_nms(dets, config.greedy_iou, config.top_k)),
            _ => Ok(self.run_detailed(dets, config)?.expect("score-map engine").kept),
        }
    }

    /// Score-map engines also report their sparsity trace and phase timings;
    /// greedy returns `None`.
    pub fn run_detailed(self, dets: &[Detection], config: &NmsConfig) -> Result<Option<PipelineRun>> {
        match self {
            Engine::Greedy => Ok(None),
            Engine::Psrr => maxpool_pipeline(dets, config, Projection::Recovery, &config.schedule).map(Some),
            Engine::Legacy(kind) => {
                maxpool_pipeline(dets, config, Projection::Legacy, &[StageSpec::new(kind, false)]).map(Some)
            }
        }
    }

    /// Validates the config and every detection, then runs class by class.
    pub fn run_all_classes(self, dets: &[Detection], config: &NmsConfig) -> Result<ClassKept> {
        config.validate()?;
        let mut seen = HashSet::with_capacity(dets.len());
        for d in dets {
            d.validate()?;
            if !seen.insert(d.det_id) {
                return Err(NmsError::InvalidInput { field: "det_id", reason: format!("duplicate id {}", d.det_id) });
            }
        }
        per_class(dets, config, |d| self.run(d, config))
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Engine::Greedy => f.write_str("greedy"),
            Engine::Psrr => f.write_str("psrr"),
            Engine::Legacy(kind) => write!(f, "legacy-{kind}"),
        }
    }
}

impl FromStr for Engine {
    type Err = NmsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Engine::Greedy),
            "psrr" => Ok(Engine::Psrr),
            "legacy-single" => Ok(Engine::Legacy(StageKind::Single)),
            "legacy-ratio" => Ok(Engine::Legacy(StageKind::Ratio)),
            "legacy-scale" => Ok(Engine::Legacy(StageKind::Scale)),
            other => Err(NmsError::config(format!(
                "unknown engine `{other}` (expected greedy, psrr, legacy-single, legacy-ratio, legacy-scale)"
            ))),
        }
    }
}

impl TryFrom<String> for Engine {
    type Error = NmsError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Engine> for String {
    fn from(e: Engine) -> Self {
        e.to_string()
    }
}
