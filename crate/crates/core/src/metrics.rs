//! Agreement with the greedy reference, score-map sparsity, VOC average
//! precision and wall-clock timing.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::boxcore::{iou, ClassId, DetId, Detection, GroundTruth};
use crate::config::NmsConfig;
use crate::engine::Engine;
use crate::error::{NmsError, Result};
use crate::greedy::KeptSet;
use crate::scoremap::ScoreMapStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OverlapMode {
    /// `|A ∩ G| / |A ∪ G|`
    #[default]
    Jaccard,
    /// `|A ∩ G| / |G|`
    Recall,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapReport {
    pub n_greedy: usize,
    pub n_approx: usize,
    pub n_common: usize,
    pub ratio: f64,
}

/// Agreement between two kept-id sets drawn from the same candidates.
/// Two empty sets agree perfectly.
pub fn overlap_ids(approx: &BTreeSet<DetId>, oracle: &BTreeSet<DetId>, mode: OverlapMode) -> OverlapReport {
    let n_common = approx.intersection(oracle).count();
    let (n_approx, n_greedy) = (approx.len(), oracle.len());
    let denom = match mode {
        OverlapMode::Jaccard => n_approx + n_greedy - n_common,
        OverlapMode::Recall => n_greedy,
    };
    let ratio = if denom == 0 { 1.0 } else { n_common as f64 / denom as f64 };
    OverlapReport { n_greedy, n_approx, n_common, ratio }
}

pub fn overlap_ratio(approx: &KeptSet, oracle: &KeptSet, mode: OverlapMode) -> OverlapReport {
    overlap_ids(&approx.id_set(), &oracle.id_set(), mode)
}

/// Fraction of non-empty cells.
pub fn sparsity(stack: &ScoreMapStack) -> f64 {
    match stack.total_cells() {
        0 => 0.0,
        n => stack.non_empty() as f64 / n as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ApMethod {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoints,
    /// Mean of the envelope sampled at recall 0, 0.1, …, 1.
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub class_id: ClassId,
    pub ap: f64,
    /// `(recall, precision)` after each detection, in score order.
    pub curve: Vec<(f64, f64)>,
    pub n_gt: usize,
    pub n_det: usize,
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Copy)]
pub struct EvalImage<'a> {
    pub dets: &'a [Detection],
    pub gt: &'a [GroundTruth],
}

/// True/false-positive flags for one class in evaluation order.
///
/// Detections are visited by descending score (ties keep input order, images
/// first). Each takes the ground-truth box it overlaps most (ties to the
/// lower index); it is a hit iff that IoU is at least `iou_match` and the box
/// has not been claimed yet.
pub fn match_detections(images: &[EvalImage<'_>], class_id: ClassId, iou_match: f64) -> (Vec<(f64, bool)>, usize) {
    let mut order: Vec<(usize, usize)> = Vec::new();
    let mut n_gt = 0;
    for (i, img) in images.iter().enumerate() {
        n_gt += img.gt.iter().filter(|g| g.class_id == class_id).count();
        order.extend(img.dets.iter().enumerate().filter(|(_, d)| d.class_id == class_id).map(|(j, _)| (i, j)));
    }
    order.sort_by(|a, b| images[b.0].dets[b.1].score.total_cmp(&images[a.0].dets[a.1].score));

    let mut claimed: Vec<Vec<bool>> = images.iter().map(|img| vec![false; img.gt.len()]).collect();
    let flags = order
        .into_iter()
        .map(|(i, j)| {
            let det = &images[i].dets[j];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in images[i].gt.iter().enumerate().filter(|(_, g)| g.class_id == class_id) {
                let o = iou(&det.bbox, &gt.bbox);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            let hit = match best {
                Some((g, o)) if o >= iou_match && !claimed[i][g] => {
                    claimed[i][g] = true;
                    true
                }
                _ => false,
            };
            (det.score, hit)
        })
        .collect();
    (flags, n_gt)
}

fn pr_curve(flags: &[(f64, bool)], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(k, &(_, hit))| {
            tp += usize::from(hit);
            (tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

pub fn ap_from_curve(curve: &[(f64, f64)], method: ApMethod) -> f64 {
    match method {
        ApMethod::AllPoints => {
            let mut rec = Vec::with_capacity(curve.len() + 2);
            let mut prec = Vec::with_capacity(curve.len() + 2);
            rec.push(0.0);
            prec.push(0.0);
            for &(r, p) in curve {
                rec.push(r);
                prec.push(p);
            }
            rec.push(1.0);
            prec.push(0.0);
            for i in (0..prec.len() - 1).rev() {
                prec[i] = prec[i].max(prec[i + 1]);
            }
            (0..rec.len() - 1)
                .filter(|&i| rec[i + 1] != rec[i])
                .map(|i| (rec[i + 1] - rec[i]) * prec[i + 1])
                .sum()
        }
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    curve.iter().filter(|(r, _)| *r >= t).map(|(_, p)| *p).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// AP of one class; `None` when the class has no ground truth.
pub fn voc_ap(images: &[EvalImage<'_>], class_id: ClassId, iou_match: f64, method: ApMethod) -> Option<ApResult> {
    let (flags, n_gt) = match_detections(images, class_id, iou_match);
    if n_gt == 0 {
        return None;
    }
    let curve = pr_curve(&flags, n_gt);
    Some(ApResult { class_id, ap: ap_from_curve(&curve, method), n_det: flags.len(), curve, n_gt })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanAp {
    pub per_class: Vec<ApResult>,
    pub map: f64,
    /// Classes that were detected but never appear in the ground truth.
    pub skipped: Vec<ClassId>,
}

pub fn mean_ap(images: &[EvalImage<'_>], iou_match: f64, method: ApMethod) -> MeanAp {
    let classes: BTreeSet<ClassId> = images
        .iter()
        .flat_map(|img| img.dets.iter().map(|d| d.class_id).chain(img.gt.iter().map(|g| g.class_id)))
        .collect();
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for c in classes {
        match voc_ap(images, c, iou_match, method) {
            Some(r) => per_class.push(r),
            None => {
                log::warn!("class {c} has no ground truth; excluded from mAP");
                skipped.push(c);
            }
        }
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|r| r.ap).sum::<f64>() / per_class.len() as f64
    };
    MeanAp { per_class, map, skipped }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    quantile(&s, 0.5)
}

/// Least-squares line `y = intercept + slope·x` and its R².
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingStats {
    pub engine: Engine,
    pub n_boxes: usize,
    /// End-to-end wall time per repeat, ms.
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub q1_ms: f64,
    pub q3_ms: f64,
    /// Score-map building time per repeat (score-map engines only).
    pub build_ms: Vec<f64>,
    /// Pooling plus survivor collection per repeat (score-map engines only).
    pub pool_ms: Vec<f64>,
}

impl TimingStats {
    pub fn iqr_ms(&self) -> f64 {
        self.q3_ms - self.q1_ms
    }

    pub fn build_median_ms(&self) -> Option<f64> {
        (!self.build_ms.is_empty()).then(|| median(&self.build_ms))
    }

    pub fn pool_median_ms(&self) -> Option<f64> {
        (!self.pool_ms.is_empty()).then(|| median(&self.pool_ms))
    }
}

/// Times `engine` on one class's detections with a monotonic clock,
/// discarding `warmup` runs first.
pub fn time_engine(engine: Engine, dets: &[Detection], config: &NmsConfig, repeats: usize, warmup: usize) -> Result<TimingStats> {
    if repeats < 3 {
        return Err(NmsError::config(format!("repeats must be >= 3, got {repeats}")));
    }
    if warmup < 1 {
        return Err(NmsError::config("warmup must be >= 1"));
    }
    if config.parallel {
        return time_fan_out(engine, dets, config, repeats, warmup);
    }
    for _ in 0..warmup {
        std::hint::black_box(engine.run(dets, config)?);
    }
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    let mut samples_ms = Vec::with_capacity(repeats);
    let mut build_ms = Vec::new();
    let mut pool_ms = Vec::new();
    for _ in 0..repeats {
        let start = Instant::now();
        let detail = engine.run_detailed(dets, config)?;
        let kept = match &detail {
            Some(run) => run.kept.len(),
            None => engine.run(dets, config)?.len(),
        };
        samples_ms.push(ms(start.elapsed()));
        std::hint::black_box(kept);
        if let Some(run) = detail {
            build_ms.push(ms(run.build_time));
            pool_ms.push(ms(run.pool_time));
        }
    }
    let mut sorted = samples_ms.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(TimingStats {
        engine,
        n_boxes: dets.len(),
        median_ms: quantile(&sorted, 0.5),
        q1_ms: quantile(&sorted, 0.25),
        q3_ms: quantile(&sorted, 0.75),
        samples_ms,
        build_ms,
        pool_ms,
    })
}

/// Parallel mode: times the class fan-out as a whole, so no phase split.
fn time_fan_out(engine: Engine, dets: &[Detection], config: &NmsConfig, repeats: usize, warmup: usize) -> Result<TimingStats> {
    for _ in 0..warmup {
        std::hint::black_box(engine.run_all_classes(dets, config)?);
    }
    let mut samples_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(engine.run_all_classes(dets, config)?);
        samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = samples_ms.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(TimingStats {
        engine,
        n_boxes: dets.len(),
        median_ms: quantile(&sorted, 0.5),
        q1_ms: quantile(&sorted, 0.25),
        q3_ms: quantile(&sorted, 0.75),
        samples_ms,
        build_ms: Vec::new(),
        pool_ms: Vec::new(),
    })
}

/// Per-class kept ids merged into one set per image.
pub fn union_ids(per_class: &BTreeMap<ClassId, KeptSet>) -> BTreeSet<DetId> {
    crate::greedy::kept_ids(per_class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxcore::BoundingBox;
    use crate::config::NmsConfig;
    use crate::scoremap::Cell;

    fn set(ids: &[DetId]) -> BTreeSet<DetId> {
        ids.iter().copied().collect()
    }

    #[test]
    fn overlap_examples() {
        let j = OverlapMode::Jaccard;
        assert_eq!(overlap_ids(&set(&[1, 2]), &set(&[1, 2]), j).ratio, 1.0);
        assert_eq!(overlap_ids(&set(&[1, 2]), &set(&[3]), j).ratio, 0.0);
        let r = overlap_ids(&set(&[0, 1]), &set(&[1, 2]), j);
        assert_eq!((r.n_common, r.n_approx, r.n_greedy), (1, 2, 2));
        assert!((r.ratio - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(overlap_ids(&set(&[]), &set(&[]), j).ratio, 1.0);
        let rec = overlap_ids(&set(&[0, 1]), &set(&[1, 2]), OverlapMode::Recall);
        assert_eq!(rec.ratio, 0.5);
    }

    fn det(id: DetId, b: BoundingBox, score: f64) -> Detection {
        Detection::new(id, b, score, 0)
    }

    fn gt(b: BoundingBox) -> GroundTruth {
        GroundTruth { bbox: b, class_id: 0 }
    }

    #[test]
    fn ap_examples() {
        let g1 = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let g2 = BoundingBox::new(20.0, 0.0, 30.0, 10.0);
        let gts = [gt(g1), gt(g2)];
        let perfect = [det(0, g1, 0.9), det(1, g2, 0.8)];
        let img = [EvalImage { dets: &perfect, gt: &gts }];
        assert_eq!(voc_ap(&img, 0, 0.5, ApMethod::AllPoints).unwrap().ap, 1.0);
        assert_eq!(voc_ap(&img, 0, 0.5, ApMethod::ElevenPoint).unwrap().ap, 1.0);

        let miss = [det(0, BoundingBox::new(50.0, 50.0, 60.0, 60.0), 0.9)];
        let img = [EvalImage { dets: &miss, gt: &gts }];
        assert_eq!(voc_ap(&img, 0, 0.5, ApMethod::AllPoints).unwrap().ap, 0.0);

        // one GT, two qualifying detections
        let one = [gt(g1)];
        let two = [det(0, g1, 0.9), det(1, BoundingBox::new(1.0, 0.0, 11.0, 10.0), 0.8)];
        let img = [EvalImage { dets: &two, gt: &one }];
        let r = voc_ap(&img, 0, 0.5, ApMethod::AllPoints).unwrap();
        assert_eq!(r.curve, vec![(1.0, 1.0), (1.0, 0.5)]);
        assert_eq!(r.ap, 1.0);
    }

    #[test]
    fn ap_partial_recall() {
        // hits at ranks 1 and 3 of 2 GT + 1 unmatched GT
        let g = [
            gt(BoundingBox::new(0.0, 0.0, 10.0, 10.0)),
            gt(BoundingBox::new(20.0, 0.0, 30.0, 10.0)),
            gt(BoundingBox::new(40.0, 0.0, 50.0, 10.0)),
        ];
        let d = [
            det(0, g[0].bbox, 0.9),
            det(1, BoundingBox::new(70.0, 0.0, 80.0, 10.0), 0.8),
            det(2, g[1].bbox, 0.7),
        ];
        let img = [EvalImage { dets: &d, gt: &g }];
        let r = voc_ap(&img, 0, 0.5, ApMethod::AllPoints).unwrap();
        // 1/3 * 1 + 1/3 * 2/3
        assert!((r.ap - (1.0 / 3.0 + 2.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn claimed_best_match_is_false_positive() {
        // second detection's best GT is already taken even though another GT qualifies
        let g = [gt(BoundingBox::new(0.0, 0.0, 10.0, 10.0)), gt(BoundingBox::new(3.0, 0.0, 13.0, 10.0))];
        let d = [det(0, g[0].bbox, 0.9), det(1, BoundingBox::new(1.0, 0.0, 11.0, 10.0), 0.8)];
        let img = [EvalImage { dets: &d, gt: &g }];
        let (flags, n_gt) = match_detections(&img, 0, 0.5);
        assert_eq!(n_gt, 2);
        assert_eq!(flags.iter().map(|f| f.1).collect::<Vec<_>>(), vec![true, false]);
    }

    #[test]
    fn missing_class_is_skipped() {
        let g = [gt(BoundingBox::new(0.0, 0.0, 10.0, 10.0))];
        let mut other = det(0, g[0].bbox, 0.9);
        other.class_id = 3;
        let d = [det(1, g[0].bbox, 0.8), other];
        let img = [EvalImage { dets: &d, gt: &g }];
        assert!(voc_ap(&img, 3, 0.5, ApMethod::AllPoints).is_none());
        let m = mean_ap(&img, 0.5, ApMethod::AllPoints);
        assert_eq!(m.skipped, vec![3]);
        assert_eq!(m.per_class.len(), 1);
        assert_eq!(m.map, 1.0);
    }

    #[test]
    fn sparsity_examples() {
        let cfg = NmsConfig { image_w: 160.0, image_h: 160.0, ..NmsConfig::default() };
        let mut s = ScoreMapStack::empty(&cfg);
        assert_eq!(sparsity(&s), 0.0);
        s.set(3, 4, 5, Some(Cell { score: 0.5, det_id: 0 }));
        assert_eq!(sparsity(&s), 1.0 / 1200.0);
    }

    #[test]
    fn quantiles_and_fit() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.5), 2.5);
        assert_eq!(quantile(&s, 0.25), 1.75);
        assert_eq!(median(&[5.0, 1.0, 3.0]), 3.0);
        let (m, b, r2) = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((m - 2.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn timing_validates_and_reports_phases() {
        let cfg = NmsConfig::default();
        assert!(time_engine(Engine::Greedy, &[], &cfg, 2, 1).is_err());
        assert!(time_engine(Engine::Greedy, &[], &cfg, 3, 0).is_err());
        let t = time_engine(Engine::Greedy, &[], &cfg, 3, 1).unwrap();
        assert_eq!(t.samples_ms.len(), 3);
        assert!(t.build_ms.is_empty());
        let d = [det(0, BoundingBox::new(0.0, 0.0, 50.0, 50.0), 0.5)];
        let t = time_engine(Engine::Psrr, &d, &cfg, 5, 1).unwrap();
        assert_eq!(t.build_ms.len(), 5);
        assert!(t.q1_ms <= t.median_ms && t.median_ms <= t.q3_ms);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn jaccard_symmetric(a in prop::collection::btree_set(0u32..30, 0..20), b in prop::collection::btree_set(0u32..30, 0..20)) {
                let ab = overlap_ids(&a, &b, OverlapMode::Jaccard);
                let ba = overlap_ids(&b, &a, OverlapMode::Jaccard);
                prop_assert_eq!(ab.ratio, ba.ratio);
                prop_assert!(ab.n_common <= ab.n_approx.min(ab.n_greedy));
                prop_assert!((0.0..=1.0).contains(&ab.ratio));
                prop_assert_eq!(overlap_ids(&a, &a, OverlapMode::Jaccard).ratio, 1.0);
            }
        }
    }
}
