//! Engine configuration. Defaults follow the usual detector setup:
//! α = 0.75, β = 16, four anchor scales from 64² to 512², ratios {0.5, 1, 2}
//! and the top 200 boxes per class.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{NmsError, Result};

/// How a score-map cell reduces the candidates projected onto it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Assignment {
    #[default]
    Max,
    Sum,
    Random,
}

impl Assignment {
    pub const ALL: [Assignment; 3] = [Assignment::Random, Assignment::Sum, Assignment::Max];

    pub fn as_str(self) -> &'static str {
        match self {
            Assignment::Max => "max",
            Assignment::Sum => "sum",
            Assignment::Random => "random",
        }
    }
}

/// Channel combination used by one pooling pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Single,
    Ratio,
    Scale,
    All,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Single => "single",
            StageKind::Ratio => "ratio",
            StageKind::Scale => "scale",
            StageKind::All => "all",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageKind {
    type Err = NmsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "single" => Ok(StageKind::Single),
            "ratio" => Ok(StageKind::Ratio),
            "scale" => Ok(StageKind::Scale),
            "all" => Ok(StageKind::All),
            other => Err(NmsError::config(format!("unknown stage kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub kind: StageKind,
    #[serde(default = "default_true")]
    pub shifted: bool,
}

fn default_true() -> bool {
    true
}

impl StageSpec {
    pub const fn new(kind: StageKind, shifted: bool) -> Self {
        Self { kind, shifted }
    }
}

/// Parses `single+ratio+scale+all`; every stage gets the given shift flag.
pub fn parse_schedule(s: &str, shifted: bool) -> Result<Vec<StageSpec>> {
    let stages = s
        .split('+')
        .map(|k| k.parse().map(|kind| StageSpec::new(kind, shifted)))
        .collect::<Result<Vec<_>>>()?;
    if stages.is_empty() {
        return Err(NmsError::config("empty schedule"));
    }
    Ok(stages)
}

pub fn schedule_label(schedule: &[StageSpec]) -> String {
    schedule.iter().map(|s| s.kind.as_str()).collect::<Vec<_>>().join("+")
}

pub fn default_schedule() -> Vec<StageSpec> {
    [StageKind::Single, StageKind::Ratio, StageKind::Scale, StageKind::All]
        .into_iter()
        .map(|k| StageSpec::new(k, true))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    /// Overlap threshold controlling kernel size.
    pub alpha: f64,
    /// Image pixels per score-map cell.
    pub beta: f64,
    /// Anchor areas in pixels², strictly increasing.
    pub scales: Vec<f64>,
    /// Height:width ratios, strictly increasing.
    pub ratios: Vec<f64>,
    pub image_w: f64,
    pub image_h: f64,
    pub top_k: usize,
    pub assignment: Assignment,
    pub schedule: Vec<StageSpec>,
    pub greedy_iou: f64,
    /// Seed for random assignment.
    pub seed: u64,
    /// Nearest-channel search in log space instead of raw area/ratio.
    pub log_space_channels: bool,
    /// Fan classes out over the rayon pool.
    pub parallel: bool,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            beta: 16.0,
            scales: vec![64.0 * 64.0, 128.0 * 128.0, 256.0 * 256.0, 512.0 * 512.0],
            ratios: vec![0.5, 1.0, 2.0],
            image_w: 1024.0,
            image_h: 768.0,
            top_k: 200,
            assignment: Assignment::Max,
            schedule: default_schedule(),
            greedy_iou: 0.5,
            seed: 0,
            log_space_channels: false,
            parallel: false,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(NmsError::config(format!("alpha {} not in (0, 1]", self.alpha)));
        }
        if !self.beta.is_finite() || self.beta < 1.0 {
            return Err(NmsError::config(format!("beta {} must be >= 1", self.beta)));
        }
        check_increasing("scales", &self.scales)?;
        check_increasing("ratios", &self.ratios)?;
        if !(self.image_w > 0.0 && self.image_h > 0.0)
            || !self.image_w.is_finite()
            || !self.image_h.is_finite()
        {
            return Err(NmsError::config("image size must be positive"));
        }
        if self.top_k == 0 {
            return Err(NmsError::config("top_k must be >= 1"));
        }
        if !(self.greedy_iou > 0.0 && self.greedy_iou < 1.0) {
            return Err(NmsError::config(format!("greedy_iou {} not in (0, 1)", self.greedy_iou)));
        }
        if self.schedule.is_empty() {
            return Err(NmsError::config("schedule must have at least one stage"));
        }
        Ok(())
    }

    pub fn with_image(&self, w: f64, h: f64) -> Self {
        Self { image_w: w, image_h: h, ..self.clone() }
    }

    pub fn num_channels(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    #[inline]
    pub fn channel_index(&self, scale_idx: usize, ratio_idx: usize) -> usize {
        scale_idx * self.ratios.len() + ratio_idx
    }

    /// `(scale_idx, ratio_idx)` of a channel.
    #[inline]
    pub fn channel_parts(&self, channel: usize) -> (usize, usize) {
        (channel / self.ratios.len(), channel % self.ratios.len())
    }

    /// Width and height of a channel's anchor: `w = sqrt(s/r)`, `h = sqrt(s·r)`.
    pub fn channel_box_size(&self, channel: usize) -> (f64, f64) {
        let (si, ri) = self.channel_parts(channel);
        let (s, r) = (self.scales[si], self.ratios[ri]);
        ((s / r).sqrt(), (s * r).sqrt())
    }

    /// Score-map width and height, rounded to nearest and at least one cell.
    pub fn map_size(&self) -> (usize, usize) {
        let w = (self.image_w / self.beta).round().max(1.0) as usize;
        let h = (self.image_h / self.beta).round().max(1.0) as usize;
        (w, h)
    }
}

fn check_increasing(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(NmsError::config(format!("{name} must not be empty")));
    }
    if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(NmsError::config(format!("{name} must be positive and finite")));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(NmsError::config(format!("{name} must be strictly increasing")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = NmsConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_channels(), 12);
        assert_eq!(cfg.map_size(), (64, 48));
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            NmsConfig { alpha: 0.0, ..Default::default() },
            NmsConfig { alpha: 1.5, ..Default::default() },
            NmsConfig { beta: 0.5, ..Default::default() },
            NmsConfig { scales: vec![4096.0, 4096.0], ..Default::default() },
            NmsConfig { ratios: vec![2.0, 1.0], ..Default::default() },
            NmsConfig { ratios: vec![], ..Default::default() },
            NmsConfig { top_k: 0, ..Default::default() },
            NmsConfig { greedy_iou: 1.0, ..Default::default() },
            NmsConfig { schedule: vec![], ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn channel_layout_is_scale_major() {
        let cfg = NmsConfig::default();
        assert_eq!(cfg.channel_index(0, 1), 1);
        assert_eq!(cfg.channel_index(2, 0), 6);
        assert_eq!(cfg.channel_parts(11), (3, 2));
        let (w, h) = cfg.channel_box_size(cfg.channel_index(0, 1));
        assert!((w - 64.0).abs() < 1e-9 && (h - 64.0).abs() < 1e-9);
    }

    #[test]
    fn map_size_rounds_to_nearest() {
        let cfg = NmsConfig { image_w: 500.0, image_h: 375.0, ..Default::default() };
        // 31.25 -> 31, 23.4375 -> 23
        assert_eq!(cfg.map_size(), (31, 23));
        let cfg = NmsConfig { image_w: 504.0, image_h: 8.0, ..Default::default() };
        assert_eq!(cfg.map_size(), (32, 1));
    }

    #[test]
    fn schedule_parsing() {
        let s = parse_schedule("single+ratio+scale+all", true).unwrap();
        assert_eq!(s, default_schedule());
        assert_eq!(schedule_label(&s), "single+ratio+scale+all");
        assert!(parse_schedule("single+bogus", true).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = NmsConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: NmsConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: NmsConfig = toml::from_str("alpha = 0.5\n").unwrap();
        assert_eq!(partial.alpha, 0.5);
        assert_eq!(partial.beta, 16.0);
    }
}
