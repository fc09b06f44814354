//! Greedy NMS. Used both as an engine and as the reference that the
//! score-map engines are measured against.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::boxcore::{iou, score_order, ClassId, DetId, Detection};
use crate::config::NmsConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kept {
    pub det_id: DetId,
    pub score: f64,
}

/// Detections selected by an engine, in descending score order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeptSet {
    pub kept: Vec<Kept>,
}

impl KeptSet {
    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = DetId> + '_ {
        self.kept.iter().map(|k| k.det_id)
    }

    pub fn id_set(&self) -> BTreeSet<DetId> {
        self.ids().collect()
    }

    /// Sorts by descending score (ties by ascending id) and truncates.
    pub(crate) fn from_unsorted(mut kept: Vec<Kept>, top_k: usize) -> Self {
        kept.sort_by(|a, b| score_order(a.score, a.det_id, b.score, b.det_id));
        kept.truncate(top_k);
        Self { kept }
    }
}

/// Kept sets keyed by class.
pub type ClassKept = BTreeMap<ClassId, KeptSet>;

/// Union of det_ids kept across all classes.
pub fn kept_ids(per_class: &ClassKept) -> BTreeSet<DetId> {
    per_class.values().flat_map(|k| k.ids()).collect()
}

/// Single-class greedy NMS: scan by descending score, keep a box iff its IoU
/// with every kept box is below `iou_thresh`, stop at `top_k`.
pub fn greedy_nms(dets: &[Detection], iou_thresh: f64, top_k: usize) -> KeptSet {
    debug_assert!(iou_thresh > 0.0 && iou_thresh < 1.0);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        score_order(dets[a].score, dets[a].det_id, dets[b].score, dets[b].det_id)
    });

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= top_k {
            break;
        }
        let bbox = &dets[i].bbox;
        if kept.iter().all(|&k| iou(&dets[k].bbox, bbox) < iou_thresh) {
            kept.push(i);
        }
    }
    KeptSet {
        kept: kept
            .into_iter()
            .map(|i| Kept { det_id: dets[i].det_id, score: dets[i].score })
            .collect(),
    }
}

pub fn partition_by_class(dets: &[Detection]) -> BTreeMap<ClassId, Vec<Detection>> {
    let mut out: BTreeMap<ClassId, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        out.entry(d.class_id).or_default().push(d.clone());
    }
    out
}

/// Runs `engine` once per class, in parallel when the config asks for it.
pub(crate) fn per_class<T, E, F>(dets: &[Detection], config: &NmsConfig, engine: F) -> Result<BTreeMap<ClassId, T>, E>
where
    T: Send,
    E: Send,
    F: Fn(&[Detection]) -> Result<T, E> + Sync,
{
    let classes = partition_by_class(dets);
    if config.parallel {
        classes
            .into_par_iter()
            .map(|(c, d)| engine(&d).map(|k| (c, k)))
            .collect()
    } else {
        classes.into_iter().map(|(c, d)| engine(&d).map(|k| (c, k))).collect()
    }
}

pub fn greedy_nms_all_classes(dets: &[Detection], config: &NmsConfig) -> ClassKept {
    per_class(dets, config, |d| {
        Ok::<_, std::convert::Infallible>(greedy_nms(d, config.greedy_iou, config.top_k))
    })
    .unwrap_or_else(|e| match e {})
}
