//! Box geometry and the detection record shared by every engine.

use serde::{Deserialize, Serialize};

use crate::error::{NmsError, Result};

pub type DetId = u32;
pub type ClassId = u32;

/// Axis-aligned box in corner form, image-space pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Center position and size of a box, `(x_c, y_c, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterSize {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Box of the given size centered at `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite()
    }

    pub fn center_and_size(&self) -> CenterSize {
        CenterSize {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.width(),
            h: self.height(),
        }
    }

    /// Reorders corners so `x1 <= x2`, `y1 <= y2`, and clamps into
    /// `[0, w] x [0, h]` when an image size is given.
    pub fn normalize(&self, image: Option<(f64, f64)>) -> Result<Self> {
        if !self.is_finite() {
            return Err(NmsError::invalid("box", "non-finite coordinate"));
        }
        let mut b = Self::new(
            self.x1.min(self.x2),
            self.y1.min(self.y2),
            self.x1.max(self.x2),
            self.y1.max(self.y2),
        );
        if let Some((w, h)) = image {
            b.x1 = b.x1.clamp(0.0, w);
            b.x2 = b.x2.clamp(0.0, w);
            b.y1 = b.y1.clamp(0.0, h);
            b.y2 = b.y2.clamp(0.0, h);
        }
        Ok(b)
    }
}

/// Intersection over union. Degenerate boxes overlap nothing, themselves included.
#[inline]
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Pre-regression box a detection came from, with the score-map channel
/// the detector assigned to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorSource {
    pub anchor: BoundingBox,
    pub channel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub class_id: ClassId,
    pub det_id: DetId,
    pub source: Option<AnchorSource>,
}

impl Detection {
    pub fn new(det_id: DetId, bbox: BoundingBox, score: f64, class_id: ClassId) -> Self {
        Self { bbox, score, class_id, det_id, source: None }
    }

    pub fn with_source(mut self, anchor: BoundingBox, channel: usize) -> Self {
        self.source = Some(AnchorSource { anchor, channel });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.bbox.is_finite() {
            return Err(NmsError::invalid("box", "non-finite coordinate"));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(NmsError::invalid("score", format!("{} outside [0, 1]", self.score)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub class_id: ClassId,
}

/// Orders detections by descending score, ties by ascending det_id.
#[inline]
pub(crate) fn score_order(a_score: f64, a_id: DetId, b_score: f64, b_id: DetId) -> std::cmp::Ordering {
    b_score.total_cmp(&a_score).then(a_id.cmp(&b_id))
}
