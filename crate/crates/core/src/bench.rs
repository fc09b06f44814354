//! The `run`, `timing`, `ablate` and `gen` commands as library calls.
//!
//! Everything is computed in memory first; files are only written once every
//! requested computation has succeeded.
//!
//! CSV schemas (version 1):
//!
//! | file      | columns |
//! |-----------|---------|
//! | overlap   | `scene,image_id,engine,n_boxes,n_greedy,n_approx,n_common,overlap,nonempty_built,nonempty_final,total_cells` |
//! | trace     | `scene,image_id,class,engine,step,stage,nonempty,total_cells,sparsity` |
//! | ap        | `engine,class,ap,n_gt,n_det` (plus one `mAP` row per engine) |
//! | ablation  | `ablation,variant,projection,schedule,shifted,assignment,n_images,mean_overlap,mean_kept,map` |
//! | timing    | `run_id,engine,n_boxes,repeats,median_ms,q1_ms,q3_ms,build_median_ms,pool_median_ms` |
//! | samples   | `run_id,engine,n_boxes,repeat,total_ms,build_ms,pool_ms` |

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxcore::{BoundingBox, ClassId, DetId, Detection};
use crate::config::{schedule_label, Assignment, NmsConfig, StageKind, StageSpec};
use crate::engine::Engine;
use crate::error::{NmsError, Result};
use crate::greedy::{greedy_nms, partition_by_class, KeptSet};
use crate::ingest::{generate_synthetic, read_dump, DetectionDump, ImageEntry, SyntheticSpec};
use crate::metrics::{mean_ap, overlap_ids, time_engine, ApMethod, EvalImage, OverlapMode, TimingStats};
use crate::poolnms::maxpool_pipeline;
use crate::scoremap::{build_score_maps, Projection};

pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const OVERLAP_HEADER: [&str; 11] = [
    "scene", "image_id", "engine", "n_boxes", "n_greedy", "n_approx", "n_common", "overlap",
    "nonempty_built", "nonempty_final", "total_cells",
];
pub const TRACE_HEADER: [&str; 9] =
    ["scene", "image_id", "class", "engine", "step", "stage", "nonempty", "total_cells", "sparsity"];
pub const AP_HEADER: [&str; 5] = ["engine", "class", "ap", "n_gt", "n_det"];
pub const ABLATION_HEADER: [&str; 10] = [
    "ablation", "variant", "projection", "schedule", "shifted", "assignment", "n_images", "mean_overlap",
    "mean_kept", "map",
];
pub const TIMING_HEADER: [&str; 9] =
    ["run_id", "engine", "n_boxes", "repeats", "median_ms", "q1_ms", "q3_ms", "build_median_ms", "pool_median_ms"];
pub const SAMPLES_HEADER: [&str; 7] = ["run_id", "engine", "n_boxes", "repeat", "total_ms", "build_ms", "pool_ms"];

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

fn csv_string<R: AsRef<[String]>>(header: &[&str], rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.as_ref())?;
    }
    let bytes = w.into_inner().map_err(|e| NmsError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSource {
    Dump(PathBuf),
    Synthetic(SyntheticSpec),
}

impl Default for InputSource {
    fn default() -> Self {
        InputSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub dir: PathBuf,
    pub overlap: String,
    pub ap: String,
    pub trace: String,
    /// Directory for dense score-map dumps; none when unset.
    pub maps: Option<PathBuf>,
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("."),
            overlap: "overlap.csv".into(),
            ap: "ap.csv".into(),
            trace: "trace.csv".into(),
            maps: None,
        }
    }
}

/// Declarative description of a `run` (and the input/config of `ablate`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    /// Overrides both the synthetic seed and the random-assignment seed.
    pub seed: Option<u64>,
    pub engines: Vec<Engine>,
    pub trace: bool,
    pub overlap_mode: OverlapMode,
    pub ap_method: ApMethod,
    pub iou_match: f64,
    pub config: NmsConfig,
    pub input: InputSource,
    pub outputs: Outputs,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            seed: None,
            engines: vec![Engine::Greedy, Engine::Psrr],
            trace: false,
            overlap_mode: OverlapMode::Jaccard,
            ap_method: ApMethod::AllPoints,
            iou_match: 0.5,
            config: NmsConfig::default(),
            input: InputSource::default(),
            outputs: Outputs::default(),
        }
    }
}

impl RunManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| NmsError::config(format!("manifest: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.engines.is_empty() {
            return Err(NmsError::config("at least one engine is required"));
        }
        if !(self.iou_match > 0.0 && self.iou_match <= 1.0) {
            return Err(NmsError::config("iou_match must be in (0, 1]"));
        }
        self.config.validate()?;
        if let InputSource::Synthetic(spec) = &self.input {
            spec.validate()?;
        }
        Ok(())
    }

    /// Config with the seed override applied.
    pub fn effective_config(&self) -> NmsConfig {
        let mut c = self.config.clone();
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        c
    }

    pub fn load_input(&self) -> Result<DetectionDump> {
        match &self.input {
            InputSource::Dump(path) => read_dump(path),
            InputSource::Synthetic(spec) => {
                let mut spec = spec.clone();
                if let Some(seed) = self.seed {
                    spec.seed = seed;
                }
                generate_synthetic(&spec, &self.config)
            }
        }
    }
}

fn require_anchors(dump: &DetectionDump, what: &str) -> Result<()> {
    for img in &dump.images {
        if let Some(d) = img.detections.iter().find(|d| d.source.is_none()) {
            return Err(NmsError::Unsupported(format!(
                "{what} needs source anchors (`src` with anchor box and channel) on every detection; \
                 image `{}` detection {} has none",
                img.image_id, d.det_id
            )));
        }
    }
    Ok(())
}

/// One score-map variant: how boxes are projected and pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub projection: Projection,
    pub schedule: Vec<StageSpec>,
}

impl Variant {
    pub fn for_engine(engine: Engine, config: &NmsConfig) -> Option<Self> {
        match engine {
            Engine::Greedy => None,
            Engine::Psrr => Some(Self { projection: Projection::Recovery, schedule: config.schedule.clone() }),
            Engine::Legacy(kind) => {
                Some(Self { projection: Projection::Legacy, schedule: vec![StageSpec::new(kind, false)] })
            }
        }
    }
}

#[derive(Debug, Clone)]
struct ClassRun {
    class_id: ClassId,
    kept: KeptSet,
    trace: Vec<usize>,
    total_cells: usize,
}

fn run_variant_on_image(img: &ImageEntry, config: &NmsConfig, variant: &Variant) -> Result<Vec<ClassRun>> {
    let config = config.with_image(img.width, img.height);
    config.validate()?;
    partition_by_class(&img.detections)
        .into_iter()
        .map(|(class_id, dets)| {
            let run = maxpool_pipeline(&dets, &config, variant.projection, &variant.schedule)?;
            Ok(ClassRun { class_id, kept: run.kept, trace: run.trace, total_cells: run.total_cells })
        })
        .collect()
}

fn greedy_on_image(img: &ImageEntry, config: &NmsConfig) -> Vec<ClassRun> {
    partition_by_class(&img.detections)
        .into_iter()
        .map(|(class_id, dets)| ClassRun {
            class_id,
            kept: greedy_nms(&dets, config.greedy_iou, config.top_k),
            trace: Vec::new(),
            total_cells: 0,
        })
        .collect()
}

fn ids_of(runs: &[ClassRun]) -> BTreeSet<DetId> {
    runs.iter().flat_map(|r| r.kept.ids()).collect()
}

fn kept_detections(img: &ImageEntry, ids: &BTreeSet<DetId>) -> Vec<Detection> {
    img.detections.iter().filter(|d| ids.contains(&d.det_id)).cloned().collect()
}

/// Mean AP of the kept detections of every image; `None` without ground truth.
fn kept_map(dump: &DetectionDump, kept: &[BTreeSet<DetId>], iou_match: f64, method: ApMethod) -> Option<crate::metrics::MeanAp> {
    if !dump.has_groundtruth() {
        return None;
    }
    let dets: Vec<Vec<Detection>> = dump.images.iter().zip(kept).map(|(img, ids)| kept_detections(img, ids)).collect();
    let images: Vec<EvalImage<'_>> = dump
        .images
        .iter()
        .zip(&dets)
        .map(|(img, d)| EvalImage { dets: d, gt: img.groundtruth.as_deref().unwrap_or(&[]) })
        .collect();
    Some(mean_ap(&images, iou_match, method))
}

/// CSV text produced by `run`; `None` for outputs that were not requested.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub overlap_csv: String,
    pub ap_csv: Option<String>,
    pub trace_csv: Option<String>,
    /// `(file name, contents)` of dense score-map dumps.
    pub maps: Vec<(String, String)>,
}

struct ImageResult {
    greedy: BTreeSet<DetId>,
    engines: Vec<(Engine, Vec<ClassRun>)>,
}

/// Runs every engine on every image and compares against the greedy reference.
pub fn run(manifest: &RunManifest, dump: &DetectionDump) -> Result<RunOutput> {
    manifest.validate()?;
    for e in manifest.engines.iter().filter(|e| e.needs_anchors()) {
        require_anchors(dump, &format!("engine {e}"))?;
    }
    let config = manifest.effective_config();
    let approx: Vec<Engine> = manifest.engines.iter().copied().filter(|e| *e != Engine::Greedy).collect();

    let results: Vec<ImageResult> = dump
        .images
        .par_iter()
        .map(|img| {
            let greedy = ids_of(&greedy_on_image(img, &config));
            let engines = approx
                .iter()
                .map(|&e| {
                    let v = Variant::for_engine(e, &config).expect("non-greedy engine");
                    run_variant_on_image(img, &config, &v).map(|r| (e, r))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ImageResult { greedy, engines })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut overlap_rows = Vec::new();
    let mut trace_rows = Vec::new();
    for (scene, (img, res)) in dump.images.iter().zip(&results).enumerate() {
        for (engine, runs) in &res.engines {
            let r = overlap_ids(&ids_of(runs), &res.greedy, manifest.overlap_mode);
            let built: usize = runs.iter().map(|c| c.trace[0]).sum();
            let fin: usize = runs.iter().map(|c| *c.trace.last().expect("trace")).sum();
            let cells: usize = runs.iter().map(|c| c.total_cells).sum();
            overlap_rows.push(vec![
                scene.to_string(),
                img.image_id.clone(),
                engine.to_string(),
                img.detections.len().to_string(),
                r.n_greedy.to_string(),
                r.n_approx.to_string(),
                r.n_common.to_string(),
                f6(r.ratio),
                built.to_string(),
                fin.to_string(),
                cells.to_string(),
            ]);
            if manifest.trace {
                let variant = Variant::for_engine(*engine, &config).expect("non-greedy engine");
                for c in runs {
                    let names = std::iter::once("build".to_string()).chain(variant.schedule.iter().map(|s| s.kind.to_string()));
                    for (step, (count, name)) in c.trace.iter().zip(names).enumerate() {
                        trace_rows.push(vec![
                            scene.to_string(),
                            img.image_id.clone(),
                            c.class_id.to_string(),
                            engine.to_string(),
                            step.to_string(),
                            name,
                            count.to_string(),
                            c.total_cells.to_string(),
                            f6(*count as f64 / c.total_cells as f64),
                        ]);
                    }
                }
            }
        }
    }

    let ap_csv = if dump.has_groundtruth() {
        let mut rows = Vec::new();
        for engine in &manifest.engines {
            let kept: Vec<BTreeSet<DetId>> = match engine {
                Engine::Greedy => results.iter().map(|r| r.greedy.clone()).collect(),
                e => results
                    .iter()
                    .map(|r| ids_of(&r.engines.iter().find(|(x, _)| x == e).expect("engine ran").1))
                    .collect(),
            };
            let m = kept_map(dump, &kept, manifest.iou_match, manifest.ap_method).expect("has groundtruth");
            for c in &m.per_class {
                rows.push(vec![engine.to_string(), c.class_id.to_string(), f6(c.ap), c.n_gt.to_string(), c.n_det.to_string()]);
            }
            let n_gt: usize = m.per_class.iter().map(|c| c.n_gt).sum();
            let n_det: usize = m.per_class.iter().map(|c| c.n_det).sum();
            rows.push(vec![engine.to_string(), "mAP".into(), f6(m.map), n_gt.to_string(), n_det.to_string()]);
        }
        Some(csv_string(&AP_HEADER, &rows)?)
    } else {
        None
    };

    let maps = if manifest.outputs.maps.is_some() { dense_maps(manifest, &config, dump, &approx)? } else { Vec::new() };

    Ok(RunOutput {
        overlap_csv: csv_string(&OVERLAP_HEADER, &overlap_rows)?,
        ap_csv,
        trace_csv: manifest.trace.then(|| csv_string(&TRACE_HEADER, &trace_rows)).transpose()?,
        maps,
    })
}

fn dense_maps(manifest: &RunManifest, config: &NmsConfig, dump: &DetectionDump, engines: &[Engine]) -> Result<Vec<(String, String)>> {
    let _ = manifest;
    let mut out = Vec::new();
    for img in &dump.images {
        let cfg = config.with_image(img.width, img.height);
        for (class_id, dets) in partition_by_class(&img.detections) {
            for &e in engines {
                let v = Variant::for_engine(e, &cfg).expect("non-greedy engine");
                let built = build_score_maps(&dets, &cfg, v.projection)?;
                let pooled = crate::poolnms::pyramid_run(&built, &v.schedule, &cfg);
                for (tag, stack) in [("built", &built), ("final", &pooled)] {
                    let mut buf = Vec::new();
                    stack.write_dense(&mut buf)?;
                    let name = format!("{}_class{}_{}_{}.txt", sanitize(&img.image_id), class_id, e, tag);
                    out.push((name, String::from_utf8(buf).expect("ascii")));
                }
            }
        }
    }
    Ok(out)
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes the outputs of [`run`] under `outputs.dir`; returns the paths written.
pub fn write_run_output(outputs: &Outputs, out: &RunOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(&outputs.dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: &str| -> Result<()> {
        let p = outputs.dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    put(&outputs.overlap, &out.overlap_csv)?;
    if let Some(ap) = &out.ap_csv {
        put(&outputs.ap, ap)?;
    }
    if let Some(t) = &out.trace_csv {
        put(&outputs.trace, t)?;
    }
    if let Some(dir) = &outputs.maps {
        fs::create_dir_all(dir)?;
        for (name, body) in &out.maps {
            let p = dir.join(name);
            fs::write(&p, body)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingOptions {
    /// Box counts, strictly ascending.
    pub n_list: Vec<usize>,
    pub engines: Vec<Engine>,
    /// Scene template; `boxes_per_scene` and `n_clusters` are set per N.
    pub spec: SyntheticSpec,
    /// Average detections per latent object.
    pub boxes_per_cluster: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub config: NmsConfig,
}

impl Default for TimingOptions {
    fn default() -> Self {
        Self {
            n_list: vec![1000, 2000, 4000, 8000],
            engines: vec![Engine::Greedy, Engine::Psrr],
            spec: SyntheticSpec { n_scenes: 1, ..SyntheticSpec::default() },
            boxes_per_cluster: 20,
            repeats: 15,
            warmup: 2,
            config: NmsConfig::default(),
        }
    }
}

impl TimingOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() {
            return Err(NmsError::config("n_list must not be empty"));
        }
        if self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(NmsError::config("n_list must be strictly ascending"));
        }
        if self.engines.is_empty() {
            return Err(NmsError::config("at least one engine is required"));
        }
        if self.repeats < 3 {
            return Err(NmsError::config(format!("repeats must be >= 3, got {}", self.repeats)));
        }
        if self.warmup < 1 {
            return Err(NmsError::config("warmup must be >= 1"));
        }
        if self.boxes_per_cluster == 0 {
            return Err(NmsError::config("boxes_per_cluster must be >= 1"));
        }
        self.config.validate()
    }

    /// One scene of `n` boxes.
    pub fn scene(&self, n: usize) -> Result<Vec<Detection>> {
        let spec = SyntheticSpec {
            n_scenes: 1,
            boxes_per_scene: n,
            n_clusters: n.div_ceil(self.boxes_per_cluster).max(1),
            ..self.spec.clone()
        };
        let config = self.config.with_image(spec.image_w, spec.image_h);
        Ok(generate_synthetic(&spec, &config)?.images.remove(0).detections)
    }
}

#[derive(Debug, Clone)]
pub struct TimingReport {
    pub run_id: String,
    pub stats: Vec<TimingStats>,
}

impl TimingReport {
    pub fn summary_csv(&self) -> Result<String> {
        let opt = |v: Option<f64>| v.map(f6).unwrap_or_default();
        let rows: Vec<Vec<String>> = self
            .stats
            .iter()
            .map(|s| {
                vec![
                    self.run_id.clone(),
                    s.engine.to_string(),
                    s.n_boxes.to_string(),
                    s.samples_ms.len().to_string(),
                    f6(s.median_ms),
                    f6(s.q1_ms),
                    f6(s.q3_ms),
                    opt(s.build_median_ms()),
                    opt(s.pool_median_ms()),
                ]
            })
            .collect();
        csv_string(&TIMING_HEADER, &rows)
    }

    pub fn samples_csv(&self) -> Result<String> {
        let mut rows = Vec::new();
        for s in &self.stats {
            for (i, t) in s.samples_ms.iter().enumerate() {
                rows.push(vec![
                    self.run_id.clone(),
                    s.engine.to_string(),
                    s.n_boxes.to_string(),
                    i.to_string(),
                    f6(*t),
                    s.build_ms.get(i).map(|v| f6(*v)).unwrap_or_default(),
                    s.pool_ms.get(i).map(|v| f6(*v)).unwrap_or_default(),
                ]);
            }
        }
        csv_string(&SAMPLES_HEADER, &rows)
    }
}

fn new_run_id() -> String {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    format!("{:x}-{}", nanos, std::process::id())
}

/// Times each engine on one synthetic scene per N. Engines run on one
/// thread unless `config.parallel` is set, which fans classes out.
/// `top_k` is lifted to N so greedy processes the whole list.
pub fn timing(opts: &TimingOptions) -> Result<TimingReport> {
    opts.validate()?;
    let mut stats = Vec::new();
    for &n in &opts.n_list {
        let dets = opts.scene(n)?;
        let config = NmsConfig {
            top_k: n.max(1),
            ..opts.config.with_image(opts.spec.image_w, opts.spec.image_h)
        };
        for &e in &opts.engines {
            stats.push(time_engine(e, &dets, &config, opts.repeats, opts.warmup)?);
        }
    }
    Ok(TimingReport { run_id: new_run_id(), stats })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Assignment,
    Schedule,
    Shift,
    Recovery,
}

impl std::str::FromStr for Ablation {
    type Err = NmsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "assignment" => Ok(Ablation::Assignment),
            "schedule" => Ok(Ablation::Schedule),
            "shift" => Ok(Ablation::Shift),
            "recovery" => Ok(Ablation::Recovery),
            other => Err(NmsError::config(format!(
                "unknown ablation `{other}` (expected assignment, schedule, shift, recovery)"
            ))),
        }
    }
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Assignment => "assignment",
            Ablation::Schedule => "schedule",
            Ablation::Shift => "shift",
            Ablation::Recovery => "recovery",
        }
    }
}

/// One cell of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub variant: String,
    pub projection: Projection,
    pub schedule: Vec<StageSpec>,
    pub assignment: Assignment,
}

fn stages(kinds: &[StageKind], shifted: bool) -> Vec<StageSpec> {
    kinds.iter().map(|&k| StageSpec::new(k, shifted)).collect()
}

pub fn ablation_grid(which: Ablation, config: &NmsConfig) -> Vec<AblationCell> {
    use StageKind::*;
    let cell = |variant: &str, projection, schedule, assignment| AblationCell {
        variant: variant.to_string(),
        projection,
        schedule,
        assignment,
    };
    let full = [Single, Ratio, Scale, All];
    match which {
        Ablation::Assignment => Assignment::ALL
            .iter()
            .map(|&a| cell(a.as_str(), Projection::Recovery, config.schedule.clone(), a))
            .collect(),
        Ablation::Schedule => {
            let mut cells: Vec<_> = [[Single], [Ratio], [Scale], [All]]
                .iter()
                .map(|k| cell("original", Projection::Recovery, stages(k, true), config.assignment))
                .collect();
            let multi: [&[StageKind]; 3] = [&[Single, Ratio], &[Single, Ratio, All], &full];
            for kinds in multi {
                cells.push(cell("original", Projection::Recovery, stages(kinds, true), config.assignment));
                let rev: Vec<_> = kinds.iter().rev().copied().collect();
                cells.push(cell("reverse", Projection::Recovery, stages(&rev, true), config.assignment));
            }
            cells
        }
        Ablation::Shift => [false, true]
            .iter()
            .map(|&s| {
                let name = if s { "with-shift" } else { "without-shift" };
                cell(name, Projection::Recovery, stages(&full, s), config.assignment)
            })
            .collect(),
        Ablation::Recovery => {
            let mut cells = Vec::new();
            for (name, p) in [("baseline", Projection::Legacy), ("spatial", Projection::Spatial), ("spatial+channel", Projection::Recovery)] {
                for k in full {
                    cells.push(cell(name, p, stages(&[k], true), config.assignment));
                }
            }
            cells
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub n_images: usize,
    pub mean_overlap: f64,
    pub mean_kept: f64,
    pub map: Option<f64>,
}

/// Evaluates one variant on every image: mean overlap with greedy, mean
/// kept count and (with ground truth) mAP of the kept boxes.
pub fn evaluate_variant(
    dump: &DetectionDump,
    config: &NmsConfig,
    variant: &Variant,
    mode: OverlapMode,
    ap: Option<(f64, ApMethod)>,
) -> Result<(f64, f64, Option<f64>)> {
    let per_image: Vec<(BTreeSet<DetId>, BTreeSet<DetId>)> = dump
        .images
        .par_iter()
        .map(|img| {
            let runs = run_variant_on_image(img, config, variant)?;
            Ok((ids_of(&runs), ids_of(&greedy_on_image(img, config))))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len().max(1) as f64;
    let mean_overlap = per_image.iter().map(|(a, g)| overlap_ids(a, g, mode).ratio).sum::<f64>() / n;
    let mean_kept = per_image.iter().map(|(a, _)| a.len() as f64).sum::<f64>() / n;
    let kept: Vec<_> = per_image.into_iter().map(|(a, _)| a).collect();
    let map = ap.and_then(|(iou, method)| kept_map(dump, &kept, iou, method)).map(|m| m.map);
    Ok((mean_overlap, mean_kept, map))
}

pub fn ablate(which: Ablation, manifest: &RunManifest, dump: &DetectionDump) -> Result<Vec<AblationRow>> {
    manifest.validate()?;
    let config = manifest.effective_config();
    let grid = ablation_grid(which, &config);
    if grid.iter().any(|c| c.projection != Projection::Recovery) {
        require_anchors(dump, &format!("the {} ablation", which.as_str()))?;
    }
    grid.into_iter()
        .map(|cell| {
            let cfg = NmsConfig { assignment: cell.assignment, schedule: cell.schedule.clone(), ..config.clone() };
            let variant = Variant { projection: cell.projection, schedule: cell.schedule.clone() };
            let (mean_overlap, mean_kept, map) = evaluate_variant(
                dump,
                &cfg,
                &variant,
                manifest.overlap_mode,
                Some((manifest.iou_match, manifest.ap_method)),
            )?;
            Ok(AblationRow { cell, n_images: dump.images.len(), mean_overlap, mean_kept, map })
        })
        .collect()
}

pub fn ablation_csv(which: Ablation, rows: &[AblationRow]) -> Result<String> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                which.as_str().to_string(),
                r.cell.variant.clone(),
                r.cell.projection.as_str().to_string(),
                schedule_label(&r.cell.schedule),
                r.cell.schedule.iter().any(|s| s.shifted).to_string(),
                r.cell.assignment.as_str().to_string(),
                r.n_images.to_string(),
                f6(r.mean_overlap),
                f6(r.mean_kept),
                r.map.map(f6).unwrap_or_default(),
            ]
        })
        .collect();
    csv_string(&ABLATION_HEADER, &rows)
}

/// Two boxes whose centers fall in horizontally adjacent cells on either
/// side of a 2-cell window boundary. Unshifted pooling keeps both; the
/// shifted pass keeps only the higher-scoring one.
pub fn edge_effect_fixture() -> (DetectionDump, NmsConfig) {
    let config = NmsConfig {
        alpha: 1.0,
        beta: 16.0,
        scales: vec![32.0 * 32.0],
        ratios: vec![1.0],
        image_w: 64.0,
        image_h: 48.0,
        ..NmsConfig::default()
    };
    // centers (24, 24) and (40, 24): cells X = 1 and X = 2, Y = 1; kernel 2
    let a = BoundingBox::new(8.0, 8.0, 40.0, 40.0);
    let b = BoundingBox::new(24.0, 8.0, 56.0, 40.0);
    let dets = vec![
        Detection::new(0, a, 0.9, 0).with_source(a, 0),
        Detection::new(1, b, 0.8, 0).with_source(b, 0),
    ];
    let dump = DetectionDump {
        images: vec![ImageEntry {
            image_id: "edge-effect".into(),
            width: config.image_w,
            height: config.image_h,
            detections: dets,
            groundtruth: None,
        }],
    };
    (dump, config)
}
