//! Max pooling over score maps.
//!
//! Each pass tiles the x-y plane of a channel group with non-overlapping
//! windows spanning the whole group depth. The best cell of each window keeps
//! its box at its original position and every other cell is cleared
//! (pool then unpool). A shifted pass offsets the tiling by half a kernel, as
//! if the map were zero-padded by that amount.
//!
//! Passes only touch occupied cells, so a pass costs O(boxes) rather than
//! O(map size).

use std::time::{Duration, Instant};

use crate::boxcore::Detection;
use crate::config::{NmsConfig, StageKind, StageSpec};
use crate::error::Result;
use crate::greedy::{per_class, ClassKept, Kept, KeptSet};
use crate::scoremap::{build_score_maps, Projection, ScoreMapStack};

/// Pooling kernel and stride, in cells. Stride always equals kernel size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelSpec {
    pub k_x: usize,
    pub k_y: usize,
    pub s_x: usize,
    pub s_y: usize,
}

impl KernelSpec {
    pub const fn square(k: usize) -> Self {
        Self { k_x: k, k_y: k, s_x: k, s_y: k }
    }

    pub const fn new(k_x: usize, k_y: usize) -> Self {
        Self { k_x, k_y, s_x: k_x, s_y: k_y }
    }

    /// Offset of the shifted pass, `(⌊k_x/2⌋, ⌊k_y/2⌋)`.
    pub fn half_shift(&self) -> (usize, usize) {
        (self.k_x / 2, self.k_y / 2)
    }
}

/// Kernel for a channel whose anchor has area `scale` and h:w `ratio`:
/// `max(round(α·w/β), 1)` with `w = sqrt(scale/ratio)`, and likewise for h.
pub fn kernel_for_channel(scale: f64, ratio: f64, alpha: f64, beta: f64) -> KernelSpec {
    let w = (scale / ratio).sqrt();
    let h = (scale * ratio).sqrt();
    let k = |side: f64| ((alpha * side / beta).round() as usize).max(1);
    KernelSpec::new(k(w), k(h))
}

pub fn channel_kernels(config: &NmsConfig) -> Vec<KernelSpec> {
    (0..config.num_channels())
        .map(|c| {
            let (si, ri) = config.channel_parts(c);
            kernel_for_channel(config.scales[si], config.ratios[ri], config.alpha, config.beta)
        })
        .collect()
}

/// Componentwise minimum over the group.
pub fn group_kernel(group: &[usize], specs: &[KernelSpec]) -> KernelSpec {
    assert!(!group.is_empty(), "empty channel group");
    group.iter().map(|&c| specs[c]).fold(KernelSpec::square(usize::MAX), |a, b| KernelSpec {
        k_x: a.k_x.min(b.k_x),
        k_y: a.k_y.min(b.k_y),
        s_x: a.s_x.min(b.s_x),
        s_y: a.s_y.min(b.s_y),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolStage {
    pub kind: StageKind,
    pub channel_groups: Vec<Vec<usize>>,
    pub shifted: bool,
}

impl PoolStage {
    /// Groups for a stage kind. Cross-scale groups are overlapping pairs of
    /// adjacent scales, ordered by ascending scale, then ratio.
    pub fn new(kind: StageKind, shifted: bool, config: &NmsConfig) -> Self {
        let (ns, nr) = (config.scales.len(), config.ratios.len());
        let ch = |s, r| config.channel_index(s, r);
        let channel_groups = match kind {
            StageKind::Single => (0..ns * nr).map(|c| vec![c]).collect(),
            StageKind::Ratio => (0..ns).map(|s| (0..nr).map(|r| ch(s, r)).collect()).collect(),
            StageKind::Scale if ns == 1 => (0..nr).map(|r| vec![ch(0, r)]).collect(),
            StageKind::Scale => (0..ns - 1)
                .flat_map(|s| (0..nr).map(move |r| vec![ch(s, r), ch(s + 1, r)]))
                .collect(),
            StageKind::All => vec![(0..ns * nr).collect()],
        };
        Self { kind, channel_groups, shifted }
    }

    pub fn from_spec(spec: StageSpec, config: &NmsConfig) -> Self {
        Self::new(spec.kind, spec.shifted, config)
    }
}

const NO_WINNER: u32 = u32::MAX;

/// Per-window winner table reused across passes.
#[derive(Debug, Default)]
pub struct PoolScratch {
    winners: Vec<u32>,
    touched: Vec<usize>,
}

/// In-place pooling of one channel group; see the module docs.
pub fn pool_keep_in_place(
    stack: &mut ScoreMapStack,
    group: &[usize],
    spec: KernelSpec,
    shift: (usize, usize),
    scratch: &mut PoolScratch,
) {
    let (map_w, map_h, plane) = (stack.map_w, stack.map_h, stack.plane_len());
    let (kx, ky) = (spec.s_x.max(1), spec.s_y.max(1));
    let (dx, dy) = shift;
    let nwx = (map_w + dx).div_ceil(kx);
    let nwy = (map_h + dy).div_ceil(ky);
    if scratch.winners.len() < nwx * nwy {
        scratch.winners.resize(nwx * nwy, NO_WINNER);
    }
    let window_of = |offset: u32| -> usize {
        let off = offset as usize;
        let (y, x) = (off / map_w, off % map_w);
        ((y + dy) / ky) * nwx + (x + dx) / kx
    };

    let cells = &mut stack.cells;
    for &c in group {
        for &off in &stack.occupied[c] {
            let idx = c * plane + off as usize;
            let w = window_of(off);
            let cur = scratch.winners[w];
            if cur == NO_WINNER {
                scratch.winners[w] = idx as u32;
                scratch.touched.push(w);
                continue;
            }
            let (a, b) = (cells[idx].expect("occupied"), cells[cur as usize].expect("occupied"));
            // ties: lowest (channel, y, x), i.e. lowest flat index
            if a.score > b.score || (a.score == b.score && idx < cur as usize) {
                scratch.winners[w] = idx as u32;
            }
        }
    }
    for &c in group {
        stack.occupied[c].retain(|&off| {
            let idx = c * plane + off as usize;
            if scratch.winners[window_of(off)] as usize == idx {
                true
            } else {
                cells[idx] = None;
                false
            }
        });
    }
    for w in scratch.touched.drain(..) {
        scratch.winners[w] = NO_WINNER;
    }
}

/// Pools one channel group of a copy of `stack`.
pub fn pool_keep(stack: &ScoreMapStack, group: &[usize], spec: KernelSpec, shift: (usize, usize)) -> ScoreMapStack {
    let mut out = stack.clone();
    pool_keep_in_place(&mut out, group, spec, shift, &mut PoolScratch::default());
    out
}

pub(crate) fn run_stage_in_place(
    stack: &mut ScoreMapStack,
    stage: &PoolStage,
    kernels: &[KernelSpec],
    scratch: &mut PoolScratch,
) {
    for group in &stage.channel_groups {
        let spec = group_kernel(group, kernels);
        pool_keep_in_place(stack, group, spec, (0, 0), scratch);
        if stage.shifted {
            pool_keep_in_place(stack, group, spec, spec.half_shift(), scratch);
        }
    }
}

/// One pyramid stage: each group pooled unshifted, then shifted if enabled.
pub fn run_stage(stack: &ScoreMapStack, stage: &PoolStage, config: &NmsConfig) -> ScoreMapStack {
    let mut out = stack.clone();
    run_stage_in_place(&mut out, stage, &channel_kernels(config), &mut PoolScratch::default());
    out
}

/// Non-empty cell count after building (first entry) and after each stage.
pub type SparsityTrace = Vec<usize>;

pub fn pyramid_run_traced(
    stack: &ScoreMapStack,
    schedule: &[StageSpec],
    config: &NmsConfig,
) -> (ScoreMapStack, SparsityTrace) {
    let mut out = stack.clone();
    let trace = pyramid_in_place(&mut out, schedule, config);
    (out, trace)
}

pub fn pyramid_run(stack: &ScoreMapStack, schedule: &[StageSpec], config: &NmsConfig) -> ScoreMapStack {
    pyramid_run_traced(stack, schedule, config).0
}

fn pyramid_in_place(stack: &mut ScoreMapStack, schedule: &[StageSpec], config: &NmsConfig) -> SparsityTrace {
    let kernels = channel_kernels(config);
    let mut scratch = PoolScratch::default();
    let mut trace = Vec::with_capacity(schedule.len() + 1);
    trace.push(stack.non_empty());
    for spec in schedule {
        run_stage_in_place(stack, &PoolStage::from_spec(*spec, config), &kernels, &mut scratch);
        trace.push(stack.non_empty());
    }
    trace
}

/// Surviving boxes by descending score (ties: lower det_id), truncated.
pub fn collect_survivors(stack: &ScoreMapStack, top_k: usize) -> KeptSet {
    let plane = stack.plane_len();
    let kept = stack
        .occupied
        .iter()
        .enumerate()
        .flat_map(|(c, offs)| offs.iter().map(move |&o| c * plane + o as usize))
        .filter_map(|idx| stack.cells[idx])
        .map(|cell| Kept { det_id: cell.det_id, score: cell.score })
        .collect();
    KeptSet::from_unsorted(kept, top_k)
}

/// Full output of one score-map pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub kept: KeptSet,
    pub trace: SparsityTrace,
    pub total_cells: usize,
    /// Time spent building score maps.
    pub build_time: Duration,
    /// Time spent pooling and collecting survivors.
    pub pool_time: Duration,
}

/// Build with `projection`, pool with `schedule`, collect survivors.
pub fn maxpool_pipeline(
    dets: &[Detection],
    config: &NmsConfig,
    projection: Projection,
    schedule: &[StageSpec],
) -> Result<PipelineRun> {
    let t0 = Instant::now();
    let mut stack = build_score_maps(dets, config, projection)?;
    let t1 = Instant::now();
    let trace = pyramid_in_place(&mut stack, schedule, config);
    let kept = collect_survivors(&stack, config.top_k);
    let t2 = Instant::now();
    Ok(PipelineRun {
        kept,
        trace,
        total_cells: stack.total_cells(),
        build_time: t1 - t0,
        pool_time: t2 - t1,
    })
}

/// Relationship recovery followed by the configured pyramid schedule.
pub fn psrr_nms(dets: &[Detection], config: &NmsConfig) -> Result<KeptSet> {
    Ok(maxpool_pipeline(dets, config, Projection::Recovery, &config.schedule)?.kept)
}

/// Original MaxpoolNMS: anchor projection and one unshifted pass.
pub fn maxpoolnms_legacy(dets: &[Detection], config: &NmsConfig, variant: StageKind) -> Result<KeptSet> {
    let schedule = [StageSpec::new(variant, false)];
    Ok(maxpool_pipeline(dets, config, Projection::Legacy, &schedule)?.kept)
}

pub fn psrr_nms_all_classes(dets: &[Detection], config: &NmsConfig) -> Result<ClassKept> {
    per_class(dets, config, |d| psrr_nms(d, config))
}

pub fn maxpoolnms_legacy_all_classes(dets: &[Detection], config: &NmsConfig, variant: StageKind) -> Result<ClassKept> {
    per_class(dets, config, |d| maxpoolnms_legacy(d, config, variant))
}
