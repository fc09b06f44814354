//! Detection dumps (line-delimited JSON) and seeded synthetic scenes.
//!
//! A dump starts with a header line `{"format":"nmsdump","version":1}`
//! followed by one JSON object per image:
//!
//! ```text
//! {"dets":[{"class":0,"score":0.9,"src":{"channel":1,"x1":..,"x2":..,"y1":..,"y2":..},
//!           "x1":..,"x2":..,"y1":..,"y2":..}],
//!  "gt":[{"class":0,"x1":..,"x2":..,"y1":..,"y2":..}],
//!  "h":768.0,"image_id":"000001","w":1024.0}
//! ```
//!
//! Keys are written sorted and floats in shortest round-trip form, so
//! writing a dump that was read back is byte-identical. A detection's det_id
//! is its index in `dets`. `src` and `gt` are optional.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxcore::{iou, BoundingBox, ClassId, DetId, Detection, GroundTruth};
use crate::config::NmsConfig;
use crate::error::{NmsError, Result};
use crate::scoremap::channel_recover;

pub const FORMAT_NAME: &str = "nmsdump";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub detections: Vec<Detection>,
    pub groundtruth: Option<Vec<GroundTruth>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionDump {
    pub images: Vec<ImageEntry>,
}

impl DetectionDump {
    pub fn has_groundtruth(&self) -> bool {
        self.images.iter().any(|i| i.groundtruth.is_some())
    }

    pub fn has_anchors(&self) -> bool {
        self.images.iter().flat_map(|i| &i.detections).all(|d| d.source.is_some())
    }

    pub fn num_detections(&self) -> usize {
        self.images.iter().map(|i| i.detections.len()).sum()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

// Field order is alphabetical: serde writes fields in declaration order.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SrcRecord {
    channel: usize,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetRecord {
    class: ClassId,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    src: Option<SrcRecord>,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtRecord {
    class: ClassId,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    dets: Vec<DetRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt: Option<Vec<GtRecord>>,
    h: f64,
    image_id: String,
    w: f64,
}

fn parse_err(line: usize, message: impl Into<String>) -> NmsError {
    NmsError::Parse { line, message: message.into() }
}

fn check_box(line: usize, field: &str, b: &BoundingBox) -> Result<BoundingBox> {
    b.normalize(None).map_err(|_| parse_err(line, format!("{field}: non-finite coordinate")))
}

fn image_from_record(line: usize, rec: ImageRecord) -> Result<ImageEntry> {
    for (name, v) in [("w", rec.w), ("h", rec.h)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(parse_err(line, format!("{name}: image size must be positive, got {v}")));
        }
    }
    let detections = rec
        .dets
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            if !(d.score.is_finite() && (0.0..=1.0).contains(&d.score)) {
                return Err(parse_err(line, format!("dets[{i}].score: {} outside [0, 1]", d.score)));
            }
            let bbox = check_box(line, &format!("dets[{i}]"), &BoundingBox::new(d.x1, d.y1, d.x2, d.y2))?;
            let mut det = Detection::new(i as DetId, bbox, d.score, d.class);
            if let Some(s) = d.src {
                let anchor = check_box(line, &format!("dets[{i}].src"), &BoundingBox::new(s.x1, s.y1, s.x2, s.y2))?;
                det = det.with_source(anchor, s.channel);
            }
            Ok(det)
        })
        .collect::<Result<Vec<_>>>()?;
    let groundtruth = rec
        .gt
        .map(|gts| {
            gts.into_iter()
                .enumerate()
                .map(|(i, g)| {
                    let bbox = check_box(line, &format!("gt[{i}]"), &BoundingBox::new(g.x1, g.y1, g.x2, g.y2))?;
                    Ok(GroundTruth { bbox, class_id: g.class })
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(ImageEntry { image_id: rec.image_id, width: rec.w, height: rec.h, detections, groundtruth })
}

fn record_from_image(img: &ImageEntry) -> ImageRecord {
    let dets = img
        .detections
        .iter()
        .map(|d| DetRecord {
            class: d.class_id,
            score: d.score,
            src: d.source.map(|s| SrcRecord {
                channel: s.channel,
                x1: s.anchor.x1,
                x2: s.anchor.x2,
                y1: s.anchor.y1,
                y2: s.anchor.y2,
            }),
            x1: d.bbox.x1,
            x2: d.bbox.x2,
            y1: d.bbox.y1,
            y2: d.bbox.y2,
        })
        .collect();
    let gt = img.groundtruth.as_ref().map(|gts| {
        gts.iter()
            .map(|g| GtRecord { class: g.class_id, x1: g.bbox.x1, x2: g.bbox.x2, y1: g.bbox.y1, y2: g.bbox.y2 })
            .collect()
    });
    ImageRecord { dets, gt, h: img.height, image_id: img.image_id.clone(), w: img.width }
}

/// Parses a dump. Blank lines are skipped; the header line is optional.
pub fn parse_dump<R: Read>(reader: R) -> Result<DetectionDump> {
    let mut images = Vec::new();
    let mut seen_content = false;
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if !seen_content {
            seen_content = true;
            if let Ok(h) = serde_json::from_str::<Header>(text) {
                if h.format != FORMAT_NAME || h.version != FORMAT_VERSION {
                    return Err(parse_err(
                        line_no,
                        format!("unsupported format {} version {}", h.format, h.version),
                    ));
                }
                continue;
            }
        }
        let de = &mut serde_json::Deserializer::from_str(text);
        let rec: ImageRecord = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            parse_err(line_no, format!("{path}: {}", e.into_inner()))
        })?;
        images.push(image_from_record(line_no, rec)?);
    }
    Ok(DetectionDump { images })
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<DetectionDump> {
    parse_dump(File::open(path)?)
}

/// Serializes a dump; an empty dump produces no output at all.
pub fn format_dump<W: Write>(dump: &DetectionDump, mut out: W) -> Result<()> {
    if dump.images.is_empty() {
        return Ok(());
    }
    let header = Header { format: FORMAT_NAME.to_string(), version: FORMAT_VERSION };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for img in &dump.images {
        serde_json::to_writer(&mut out, &record_from_image(img)).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dump(dump: &DetectionDump, path: impl AsRef<Path>) -> Result<()> {
    format_dump(dump, BufWriter::new(File::create(path)?))
}

/// Knobs for the synthetic scene generator.
///
/// Each scene holds `n_clusters` latent objects. Every detection is a jittered
/// copy of one object's box, scored higher the closer it lands to the
/// object. Its anchor is the object box displaced by `anchor_jitter`, snapped
/// to the nearest cell center and the nearest default channel, as a stand-in
/// for the prior the detector regressed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_scenes: usize,
    pub boxes_per_scene: usize,
    pub n_clusters: usize,
    pub n_classes: u32,
    pub image_w: f64,
    pub image_h: f64,
    /// Object side range, pixels (log-uniform).
    pub min_side: f64,
    pub max_side: f64,
    /// Object h:w range (log-uniform).
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Std-dev of detection center offset, as a fraction of object size.
    pub center_jitter: f64,
    /// Std-dev of log size change of each detection.
    pub size_jitter: f64,
    /// Std-dev of the anchor's displacement and log size change.
    pub anchor_jitter: f64,
    /// Std-dev of additive score noise.
    pub score_noise: f64,
    /// Per-object confidence range.
    pub min_confidence: f64,
    pub max_confidence: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 100,
            boxes_per_scene: 200,
            n_clusters: 10,
            n_classes: 1,
            image_w: 1024.0,
            image_h: 768.0,
            min_side: 32.0,
            max_side: 512.0,
            min_ratio: 0.5,
            max_ratio: 2.0,
            center_jitter: 0.1,
            size_jitter: 0.1,
            anchor_jitter: 0.3,
            score_noise: 0.05,
            min_confidence: 0.3,
            max_confidence: 1.0,
        }
    }
}

pub const SCORE_FLOOR: f64 = 0.01;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NmsError::config(format!("synthetic spec: {m}")));
        if self.boxes_per_scene > 0 && self.n_clusters == 0 {
            return bad("n_clusters must be >= 1 when boxes_per_scene > 0");
        }
        if self.n_classes == 0 {
            return bad("n_classes must be >= 1");
        }
        if !(self.image_w > 0.0 && self.image_h > 0.0) {
            return bad("image size must be positive");
        }
        if !(self.min_side > 0.0 && self.min_side <= self.max_side) {
            return bad("need 0 < min_side <= max_side");
        }
        if !(self.min_ratio > 0.0 && self.min_ratio <= self.max_ratio) {
            return bad("need 0 < min_ratio <= max_ratio");
        }
        if [self.center_jitter, self.size_jitter, self.anchor_jitter, self.score_noise]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("jitter and noise must be finite and >= 0");
        }
        if !(0.0 <= self.min_confidence && self.min_confidence <= self.max_confidence && self.max_confidence <= 1.0) {
            return bad("need 0 <= min_confidence <= max_confidence <= 1");
        }
        Ok(())
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo.ln()..hi.ln()).exp()
    }
}

fn gauss(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sd).expect("finite sd").sample(rng)
    }
}

/// Generates one scene; scenes are seeded independently so scene `k` does
/// not depend on how many scenes precede it.
pub fn generate_scene(spec: &SyntheticSpec, layout: &NmsConfig, scene: usize) -> ImageEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (scene as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (iw, ih) = (spec.image_w, spec.image_h);
    let layout = layout.with_image(iw, ih);

    struct Object {
        bbox: BoundingBox,
        class_id: ClassId,
        confidence: f64,
    }
    let objects: Vec<Object> = (0..spec.n_clusters)
        .map(|_| {
            let side = log_uniform(&mut rng, spec.min_side, spec.max_side);
            let ratio = log_uniform(&mut rng, spec.min_ratio, spec.max_ratio);
            let (w, h) = (side / ratio.sqrt(), side * ratio.sqrt());
            let cx = if w < iw { rng.random_range(w / 2.0..=iw - w / 2.0) } else { iw / 2.0 };
            let cy = if h < ih { rng.random_range(h / 2.0..=ih - h / 2.0) } else { ih / 2.0 };
            Object {
                bbox: BoundingBox::from_center(cx, cy, w, h),
                class_id: rng.random_range(0..spec.n_classes),
                confidence: rng.random_range(spec.min_confidence..=spec.max_confidence),
            }
        })
        .collect();

    let detections = (0..spec.boxes_per_scene)
        .map(|i| {
            let obj = &objects[i % objects.len()];
            let t = obj.bbox.center_and_size();
            let cx = t.cx + gauss(&mut rng, spec.center_jitter * t.w);
            let cy = t.cy + gauss(&mut rng, spec.center_jitter * t.h);
            let w = t.w * gauss(&mut rng, spec.size_jitter).exp();
            let h = t.h * gauss(&mut rng, spec.size_jitter).exp();
            let bbox = BoundingBox::from_center(cx, cy, w, h);
            let quality = iou(&bbox, &obj.bbox);
            let score = (obj.confidence * quality + gauss(&mut rng, spec.score_noise)).clamp(SCORE_FLOOR, 1.0);

            let acx = t.cx + gauss(&mut rng, spec.anchor_jitter * t.w);
            let acy = t.cy + gauss(&mut rng, spec.anchor_jitter * t.h);
            let aw = t.w * gauss(&mut rng, spec.anchor_jitter).exp();
            let ah = t.h * gauss(&mut rng, spec.anchor_jitter).exp();
            let channel = channel_recover(aw, ah, &layout).channel;
            let (cw, ch) = layout.channel_box_size(channel);
            let snap = |v: f64, limit: f64| {
                let b = layout.beta;
                ((v.clamp(0.0, limit - 1e-9) / b).floor() + 0.5) * b
            };
            let anchor = BoundingBox::from_center(snap(acx, iw), snap(acy, ih), cw, ch);
            Detection::new(i as DetId, bbox, score, obj.class_id).with_source(anchor, channel)
        })
        .collect();

    let groundtruth = objects.iter().map(|o| GroundTruth { bbox: o.bbox, class_id: o.class_id }).collect();
    ImageEntry {
        image_id: format!("synth-{:05}", scene),
        width: iw,
        height: ih,
        detections,
        groundtruth: Some(groundtruth),
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, layout: &NmsConfig) -> Result<DetectionDump> {
    spec.validate()?;
    layout.validate()?;
    Ok(DetectionDump { images: (0..spec.n_scenes).map(|k| generate_scene(spec, layout, k)).collect() })
}
