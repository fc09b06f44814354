//! Confidence score maps: projecting detections onto a `channel × Y × X`
//! grid and reducing each cell to a single box.
//!
//! Two projections are supported. Recovery places a box by its regressed
//! center and its regressed size/shape; legacy places it by the anchor it
//! was regressed from (original MaxpoolNMS). A third mixes the two: the
//! regressed center with the anchor's channel.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxcore::{DetId, Detection};
use crate::config::{Assignment, NmsConfig};
use crate::error::{NmsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    /// Regressed center and regressed size.
    #[default]
    Recovery,
    /// Regressed center, anchor channel.
    Spatial,
    /// Anchor center and anchor channel.
    Legacy,
}

impl Projection {
    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Recovery => "recovery",
            Projection::Spatial => "spatial",
            Projection::Legacy => "legacy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub score: f64,
    pub det_id: DetId,
}

/// Per-class stack of score maps, `cells[(c * map_h + y) * map_w + x]`.
#[derive(Debug, Clone)]
pub struct ScoreMapStack {
    pub channels: usize,
    pub map_w: usize,
    pub map_h: usize,
    /// `(scale, ratio)` per channel.
    pub channel_meta: Vec<(f64, f64)>,
    pub(crate) cells: Vec<Option<Cell>>,
    /// Occupied in-plane offsets (`y * map_w + x`) per channel.
    pub(crate) occupied: Vec<Vec<u32>>,
    /// Boxes with zero width or height seen while building.
    pub degenerate_boxes: usize,
}

impl PartialEq for ScoreMapStack {
    fn eq(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.map_w == other.map_w
            && self.map_h == other.map_h
            && self.cells == other.cells
    }
}

impl ScoreMapStack {
    pub fn empty(config: &NmsConfig) -> Self {
        let (map_w, map_h) = config.map_size();
        let channels = config.num_channels();
        let channel_meta = (0..channels)
            .map(|c| {
                let (si, ri) = config.channel_parts(c);
                (config.scales[si], config.ratios[ri])
            })
            .collect();
        Self {
            channels,
            map_w,
            map_h,
            channel_meta,
            cells: vec![None; channels * map_w * map_h],
            occupied: vec![Vec::new(); channels],
            degenerate_boxes: 0,
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.map_w * self.map_h
    }

    #[inline]
    pub fn index(&self, channel: usize, y: usize, x: usize) -> usize {
        (channel * self.map_h + y) * self.map_w + x
    }

    pub fn total_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> Option<Cell> {
        self.cells[self.index(channel, y, x)]
    }

    /// Writes a cell, replacing whatever was there.
    pub fn set(&mut self, channel: usize, y: usize, x: usize, cell: Option<Cell>) {
        let idx = self.index(channel, y, x);
        let offset = (y * self.map_w + x) as u32;
        match (self.cells[idx].is_some(), cell.is_some()) {
            (false, true) => self.occupied[channel].push(offset),
            (true, false) => self.occupied[channel].retain(|&o| o != offset),
            _ => {}
        }
        self.cells[idx] = cell;
    }

    pub fn non_empty(&self) -> usize {
        self.occupied.iter().map(Vec::len).sum()
    }

    /// Non-empty cells as `(channel, y, x, cell)`, in channel-major order.
    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize, usize, Cell)> + '_ {
        self.cells.iter().enumerate().filter_map(move |(i, c)| {
            c.map(|cell| {
                let plane = self.plane_len();
                let (ch, rest) = (i / plane, i % plane);
                (ch, rest / self.map_w, rest % self.map_w, cell)
            })
        })
    }

    /// Dense text dump: a header line, then one `map_h`-row slab per channel
    /// with empty cells written as 0.
    pub fn write_dense<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let join = |v: Vec<String>| v.join(",");
        writeln!(
            out,
            "# channels={} map_h={} map_w={} scales={} ratios={}",
            self.channels,
            self.map_h,
            self.map_w,
            join(self.channel_meta.iter().map(|m| format!("{}", m.0)).collect()),
            join(self.channel_meta.iter().map(|m| format!("{}", m.1)).collect()),
        )?;
        let mut line = String::new();
        for c in 0..self.channels {
            writeln!(out, "# channel {c}")?;
            for y in 0..self.map_h {
                line.clear();
                for x in 0..self.map_w {
                    if x > 0 {
                        line.push(' ');
                    }
                    let s = self.get(c, y, x).map_or(0.0, |cell| cell.score);
                    let _ = write!(line, "{s:.6}");
                }
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

/// Cell index of a box center: `floor(c / β)`, clamped into the map.
#[inline]
pub fn spatial_recover(cx: f64, cy: f64, beta: f64, map_w: usize, map_h: usize) -> (usize, usize) {
    let clamp = |v: f64, n: usize| -> usize {
        let i = (v / beta).floor();
        if i.is_nan() || i <= 0.0 {
            0
        } else {
            (i as usize).min(n - 1)
        }
    };
    (clamp(cx, map_w), clamp(cy, map_h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelMatch {
    pub channel: usize,
    /// Zero-width or zero-height box, placed on the smallest scale.
    pub degenerate: bool,
}

/// Index of the nearest value; equidistant ties go to the earlier (smaller) one.
fn nearest(values: &[f64], target: f64, log_space: bool) -> usize {
    let dist = |v: f64| if log_space { (v.ln() - target.ln()).abs() } else { (v - target).abs() };
    let mut best = 0;
    let mut best_d = dist(values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        let d = dist(v);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Nearest scale to `w·h` and nearest ratio to `h/w`.
pub fn channel_recover(w: f64, h: f64, config: &NmsConfig) -> ChannelMatch {
    if !(w > 0.0 && h > 0.0) {
        return ChannelMatch {
            channel: config.channel_index(0, nearest(&config.ratios, 1.0, false)),
            degenerate: true,
        };
    }
    let si = nearest(&config.scales, w * h, config.log_space_channels);
    let ri = nearest(&config.ratios, h / w, config.log_space_channels);
    ChannelMatch { channel: config.channel_index(si, ri), degenerate: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projected {
    pub channel: usize,
    pub x: usize,
    pub y: usize,
    pub degenerate: bool,
}

fn source_of<'a>(det: &'a Detection, config: &NmsConfig) -> Result<&'a crate::boxcore::AnchorSource> {
    let src = det.source.as_ref().ok_or_else(|| {
        NmsError::Unsupported(format!(
            "detection {} has no source anchor; legacy projection needs anchor boxes and default channels",
            det.det_id
        ))
    })?;
    if src.channel >= config.num_channels() {
        return Err(NmsError::invalid(
            "src.channel",
            format!("channel {} out of range (have {})", src.channel, config.num_channels()),
        ));
    }
    Ok(src)
}

/// Anchor channel and anchor-center cell, ignoring regression.
pub fn legacy_project(det: &Detection, config: &NmsConfig) -> Result<Projected> {
    let src = source_of(det, config)?;
    let (map_w, map_h) = config.map_size();
    let c = src.anchor.center_and_size();
    let (x, y) = spatial_recover(c.cx, c.cy, config.beta, map_w, map_h);
    Ok(Projected { channel: src.channel, x, y, degenerate: false })
}

pub fn project(det: &Detection, config: &NmsConfig, projection: Projection) -> Result<Projected> {
    if projection == Projection::Legacy {
        return legacy_project(det, config);
    }
    let (map_w, map_h) = config.map_size();
    let c = det.bbox.center_and_size();
    let (x, y) = spatial_recover(c.cx, c.cy, config.beta, map_w, map_h);
    match projection {
        Projection::Recovery => {
            let m = channel_recover(c.w, c.h, config);
            Ok(Projected { channel: m.channel, x, y, degenerate: m.degenerate })
        }
        _ => {
            let src = source_of(det, config)?;
            Ok(Projected { channel: src.channel, x, y, degenerate: false })
        }
    }
}

/// Candidates that landed on one cell, in projection order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellBucket {
    pub candidates: Vec<Cell>,
}

impl CellBucket {
    /// Highest score, ties to the lowest det_id.
    pub fn best(&self) -> Option<Cell> {
        self.candidates.iter().copied().reduce(|a, b| {
            if b.score > a.score || (b.score == a.score && b.det_id < a.det_id) {
                b
            } else {
                a
            }
        })
    }
}

/// Sparse buckets keyed by flat stack index.
#[derive(Debug, Clone)]
pub struct BucketGrid {
    pub buckets: HashMap<usize, CellBucket>,
    template: ScoreMapStack,
}

pub fn build_buckets(dets: &[Detection], config: &NmsConfig, projection: Projection) -> Result<BucketGrid> {
    let mut template = ScoreMapStack::empty(config);
    let mut buckets: HashMap<usize, CellBucket> = HashMap::new();
    for d in dets {
        let p = project(d, config, projection)?;
        template.degenerate_boxes += usize::from(p.degenerate);
        let idx = template.index(p.channel, p.y, p.x);
        buckets
            .entry(idx)
            .or_default()
            .candidates
            .push(Cell { score: d.score, det_id: d.det_id });
    }
    Ok(BucketGrid { buckets, template })
}

/// Reduces every bucket to one cell.
///
/// `max` keeps the best candidate. `sum` adds scores (capped at 1) under the
/// best candidate's id. `random` picks uniformly with a generator seeded from
/// `seed`, visiting cells in index order.
pub fn assign_scores(grid: &BucketGrid, variant: Assignment, seed: u64) -> ScoreMapStack {
    let mut stack = grid.template.clone();
    let mut keys: Vec<usize> = grid.buckets.keys().copied().collect();
    keys.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = stack.plane_len();
    for idx in keys {
        let bucket = &grid.buckets[&idx];
        let cell = match variant {
            Assignment::Max => bucket.best(),
            Assignment::Sum => bucket.best().map(|best| {
                // summed in id order so the result does not depend on input order
                let mut parts: Vec<_> = bucket.candidates.iter().map(|c| (c.det_id, c.score)).collect();
                parts.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
                let total: f64 = parts.iter().map(|p| p.1).sum();
                Cell { score: total.min(1.0), det_id: best.det_id }
            }),
            Assignment::Random => {
                let n = bucket.candidates.len();
                let pick = if n > 1 { rng.random_range(0..n) } else { 0 };
                bucket.candidates.get(pick).copied()
            }
        };
        if cell.is_some() {
            stack.cells[idx] = cell;
            stack.occupied[idx / plane].push((idx % plane) as u32);
        }
    }
    stack
}

/// Projects one class's detections onto a fresh stack and assigns scores.
pub fn build_score_maps(dets: &[Detection], config: &NmsConfig, projection: Projection) -> Result<ScoreMapStack> {
    if config.assignment != Assignment::Max {
        let grid = build_buckets(dets, config, projection)?;
        return Ok(assign_scores(&grid, config.assignment, config.seed));
    }
    // max-assign reduces in place; same result as going through buckets
    let mut stack = ScoreMapStack::empty(config);
    let plane = stack.plane_len();
    for d in dets {
        let p = project(d, config, projection)?;
        stack.degenerate_boxes += usize::from(p.degenerate);
        let idx = stack.index(p.channel, p.y, p.x);
        match stack.cells[idx] {
            None => {
                stack.cells[idx] = Some(Cell { score: d.score, det_id: d.det_id });
                stack.occupied[p.channel].push((idx % plane) as u32);
            }
            Some(cur) => {
                if d.score > cur.score || (d.score == cur.score && d.det_id < cur.det_id) {
                    stack.cells[idx] = Some(Cell { score: d.score, det_id: d.det_id });
                }
            }
        }
    }
    if stack.degenerate_boxes > 0 {
        log::debug!("{} degenerate boxes placed on the smallest scale", stack.degenerate_boxes);
    }
    Ok(stack)
}
