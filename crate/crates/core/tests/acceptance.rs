//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use nmsforge::bench::{self, edge_effect_fixture, evaluate_variant, RunManifest, TimingOptions, Variant};
use nmsforge::config::{parse_schedule, StageSpec};
use nmsforge::greedy::greedy_nms_all_classes;
use nmsforge::ingest::{generate_synthetic, read_dump, DetectionDump, SyntheticSpec};
use nmsforge::metrics::{linear_fit, voc_ap, ApMethod, EvalImage, OverlapMode};
use nmsforge::poolnms::{channel_kernels, group_kernel, maxpool_pipeline};
use nmsforge::scoremap::Projection;
use nmsforge::{BoundingBox, Detection, Engine, NmsConfig, StageKind};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

/// Plain IoU, kept separate from the library's.
fn ref_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let area = |r: &BoundingBox| (r.x2 - r.x1).max(0.0) * (r.y2 - r.y1).max(0.0);
    let union = area(a) + area(b) - inter;
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn corpus() -> (RunManifest, DetectionDump) {
    let m = RunManifest {
        seed: Some(1),
        input: bench::InputSource::Synthetic(SyntheticSpec { n_scenes: 100, ..Default::default() }),
        ..Default::default()
    };
    let dump = m.load_input().expect("corpus");
    (m, dump)
}

fn mean_overlap(m: &RunManifest, dump: &DetectionDump, variant: &Variant) -> f64 {
    evaluate_variant(dump, &m.effective_config(), variant, OverlapMode::Jaccard, None).expect("variant runs").0
}

fn greedy_soundness() -> Outcome {
    let spec = SyntheticSpec { seed: 11, n_scenes: 1000, n_classes: 3, ..Default::default() };
    let config = NmsConfig { top_k: usize::MAX, ..NmsConfig::default() };
    let dump = generate_synthetic(&spec, &config).map_err(|e| e.to_string())?;
    let thr = config.greedy_iou;
    let mut pairs = 0usize;
    for img in &dump.images {
        let kept_ids: BTreeSet<u32> =
            greedy_nms_all_classes(&img.detections, &config).values().flat_map(|k| k.ids()).collect();
        let kept: Vec<&Detection> = img.detections.iter().filter(|d| kept_ids.contains(&d.det_id)).collect();
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                if a.class_id == b.class_id {
                    pairs += 1;
                    let o = ref_iou(&a.bbox, &b.bbox);
                    ensure!(o < thr, "{}: kept {} and {} overlap {o}", img.image_id, a.det_id, b.det_id);
                }
            }
        }
        for d in img.detections.iter().filter(|d| !kept_ids.contains(&d.det_id)) {
            let covered = kept.iter().any(|k| {
                k.class_id == d.class_id
                    && (k.score > d.score || (k.score == d.score && k.det_id < d.det_id))
                    && ref_iou(&k.bbox, &d.bbox) >= thr
            });
            ensure!(covered, "{}: box {} suppressed without a covering kept box", img.image_id, d.det_id);
        }
    }
    Ok(format!("{} scenes, {pairs} kept pairs checked", dump.images.len()))
}

fn kernel_table() -> Outcome {
    // (k_x, k_y) per (scale, ratio), worked out by hand from
    // k = max(round(0.75 * side / 16), 1), w = sqrt(s/r), h = sqrt(s*r)
    let expected: [[(usize, usize); 3]; 4] = [
        [(4, 2), (3, 3), (2, 4)],
        [(8, 4), (6, 6), (4, 8)],
        [(17, 8), (12, 12), (8, 17)],
        [(34, 17), (24, 24), (17, 34)],
    ];
    let config = NmsConfig::default();
    let kernels = channel_kernels(&config);
    for (si, row) in expected.iter().enumerate() {
        for (ri, &(kx, ky)) in row.iter().enumerate() {
            let k = kernels[config.channel_index(si, ri)];
            ensure!((k.k_x, k.k_y) == (kx, ky), "scale {si} ratio {ri}: got ({}, {}), want ({kx}, {ky})", k.k_x, k.k_y);
            ensure!((k.s_x, k.s_y) == (kx, ky), "stride differs from kernel at scale {si} ratio {ri}");
        }
    }
    let all: Vec<usize> = (0..12).collect();
    let g = group_kernel(&all, &kernels);
    ensure!((g.k_x, g.k_y) == (2, 2), "all-channel group kernel ({}, {})", g.k_x, g.k_y);
    Ok("12 channels and the all-channel group match".into())
}

fn edge_effect() -> Outcome {
    let (dump, config) = edge_effect_fixture();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/edge_effect.jsonl");
    let shipped = read_dump(&path).map_err(|e| e.to_string())?;
    ensure!(shipped == dump, "fixture file differs from edge_effect_fixture()");
    let dets = &dump.images[0].detections;
    let count = |schedule: &[StageSpec]| {
        maxpool_pipeline(dets, &config, Projection::Recovery, schedule).map(|r| r.kept.len()).map_err(|e| e.to_string())
    };
    let unshifted = count(&[StageSpec::new(StageKind::Single, false)])?;
    let shifted = count(&[StageSpec::new(StageKind::Single, true)])?;
    ensure!(unshifted == 2 && shifted == 1, "unshifted {unshifted}, shifted {shifted}");
    Ok(format!("unshifted keeps {unshifted}, shifted keeps {shifted}"))
}

fn engine_ordering() -> Outcome {
    let (m, dump) = corpus();
    let config = m.effective_config();
    let psrr = mean_overlap(&m, &dump, &Variant::for_engine(Engine::Psrr, &config).unwrap());
    let mut detail = format!("psrr {psrr:.4}");
    for e in Engine::LEGACY {
        let o = mean_overlap(&m, &dump, &Variant::for_engine(e, &config).unwrap());
        detail += &format!(", {e} {o:.4}");
        ensure!(psrr > o, "psrr {psrr:.4} does not exceed {e} {o:.4}");
    }
    Ok(detail)
}

fn schedule_trend() -> Outcome {
    let (m, dump) = corpus();
    let labels = ["single+ratio+scale+all", "single+ratio+all", "single+ratio", "single"];
    let mut values = Vec::new();
    for l in labels {
        let schedule = parse_schedule(l, true).unwrap();
        values.push(mean_overlap(&m, &dump, &Variant { projection: Projection::Recovery, schedule }));
    }
    for i in 0..values.len() - 1 {
        ensure!(values[i] >= values[i + 1], "{} {:.4} < {} {:.4}", labels[i], values[i], labels[i + 1], values[i + 1]);
    }
    Ok(labels.iter().zip(&values).map(|(l, v)| format!("{l} {v:.4}")).collect::<Vec<_>>().join(" >= "))
}

fn sparsity_monotone() -> Outcome {
    let (m, dump) = corpus();
    let base = m.effective_config();
    let mut traces = 0usize;
    for img in &dump.images {
        let config = base.with_image(img.width, img.height);
        for e in [Engine::Psrr, Engine::LEGACY[0], Engine::LEGACY[1], Engine::LEGACY[2]] {
            let run = e.run_detailed(&img.detections, &config).map_err(|e| e.to_string())?.unwrap();
            ensure!(
                run.trace.windows(2).all(|w| w[0] >= w[1]),
                "{} {e}: trace {:?} increases",
                img.image_id,
                run.trace
            );
            traces += 1;
        }
    }
    Ok(format!("{traces} traces non-increasing"))
}

fn complexity_scaling() -> Outcome {
    let opts = TimingOptions::default();
    let report = bench::timing(&opts).map_err(|e| e.to_string())?;
    let median = |e: Engine, n: usize| report.stats.iter().find(|s| s.engine == e && s.n_boxes == n).map(|s| s.median_ms).unwrap();
    let xs: Vec<f64> = opts.n_list.iter().map(|&n| n as f64).collect();
    let ys: Vec<f64> = opts.n_list.iter().map(|&n| median(Engine::Psrr, n)).collect();
    let (_, _, r2) = linear_fit(&xs, &ys);
    let (g, p) = (median(Engine::Greedy, 8000), median(Engine::Psrr, 8000));
    let speedup = g / p;
    ensure!(r2 >= 0.9, "psrr linear fit R^2 {r2:.4} < 0.9 (medians {ys:?})");
    ensure!(p < g && speedup >= 2.0, "speedup {speedup:.2}x at N=8000 (greedy {g:.3} ms, psrr {p:.3} ms)");
    Ok(format!("R^2 {r2:.4}; N=8000 greedy {g:.3} ms, psrr {p:.3} ms, speedup {speedup:.1}x"))
}

/// AP by enumerating every TP/FP labelling and keeping the one that obeys
/// the matching rule: in rank order, a detection is a true positive exactly
/// when its highest-IoU ground truth (lowest index on ties) reaches the
/// threshold and no earlier detection holds it.
fn brute_force_ap(dets: &[(BoundingBox, f64)], gts: &[BoundingBox], thr: f64) -> (f64, f64) {
    let n = dets.len();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let best: Vec<(usize, f64)> = rank
        .iter()
        .map(|&i| {
            let mut b = (0, f64::NEG_INFINITY);
            for (g, gt) in gts.iter().enumerate() {
                let o = ref_iou(&dets[i].0, gt);
                if o > b.1 {
                    b = (g, o);
                }
            }
            b
        })
        .collect();
    let options = gts.len() + 1;
    let mut valid: Option<Vec<usize>> = None;
    let mut a = vec![0usize; n];
    for code in 0..options.pow(n as u32) {
        let mut c = code;
        for slot in a.iter_mut() {
            *slot = c % options;
            c /= options;
        }
        let ok = (0..n).all(|p| {
            let (g, o) = best[p];
            let held = a[..p].contains(&(g + 1));
            if a[p] == 0 {
                !(o >= thr && !held)
            } else {
                a[p] == g + 1 && o >= thr && !held
            }
        });
        if ok {
            assert!(valid.is_none(), "two labellings satisfy the rule");
            valid = Some(a.clone());
        }
    }
    let labels = valid.expect("some labelling satisfies the rule");
    let n_gt = gts.len() as f64;
    let mut tp = 0.0;
    let mut points = Vec::new();
    for (p, &l) in labels.iter().enumerate() {
        tp += f64::from(u8::from(l != 0));
        points.push((tp / n_gt, tp / (p + 1) as f64));
    }
    let max_prec_from = |p: usize| points[p..].iter().map(|x| x.1).fold(0.0, f64::max);
    let all_points: f64 = labels.iter().enumerate().filter(|(_, &l)| l != 0).map(|(p, _)| max_prec_from(p) / n_gt).sum();
    let eleven = (0..=10)
        .map(|k| {
            let t = k as f64 / 10.0;
            points.iter().filter(|x| x.0 >= t).map(|x| x.1).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0;
    (all_points, eleven)
}

fn ap_oracle() -> Outcome {
    let templates = [
        BoundingBox::new(0.0, 0.0, 10.0, 10.0),
        BoundingBox::new(4.0, 0.0, 14.0, 10.0),
        BoundingBox::new(30.0, 30.0, 40.0, 40.0),
    ];
    let pool = [
        BoundingBox::new(0.0, 0.0, 10.0, 10.0),
        BoundingBox::new(2.0, 0.0, 12.0, 10.0),
        BoundingBox::new(31.0, 30.0, 41.0, 40.0),
        BoundingBox::new(50.0, 50.0, 60.0, 60.0),
    ];
    let choices: Vec<(BoundingBox, f64)> = pool.iter().flat_map(|&b| [(b, 0.9), (b, 0.5)]).collect();
    let mut instances = 0usize;
    for mask in 0u32..8 {
        let gts: Vec<BoundingBox> = (0..3).filter(|i| mask & (1 << i) != 0).map(|i| templates[i]).collect();
        let gt: Vec<nmsforge::boxcore::GroundTruth> =
            gts.iter().map(|&bbox| nmsforge::boxcore::GroundTruth { bbox, class_id: 0 }).collect();
        for len in 0..=5u32 {
            for code in 0..choices.len().pow(len) {
                let mut c = code;
                let seq: Vec<(BoundingBox, f64)> = (0..len)
                    .map(|_| {
                        let x = choices[c % choices.len()];
                        c /= choices.len();
                        x
                    })
                    .collect();
                let dets: Vec<Detection> =
                    seq.iter().enumerate().map(|(i, &(b, s))| Detection::new(i as u32, b, s, 0)).collect();
                let images = [EvalImage { dets: &dets, gt: &gt }];
                let got_all = voc_ap(&images, 0, 0.5, ApMethod::AllPoints);
                let got_11 = voc_ap(&images, 0, 0.5, ApMethod::ElevenPoint);
                instances += 1;
                if gts.is_empty() {
                    ensure!(got_all.is_none() && got_11.is_none(), "class without ground truth was not skipped");
                    continue;
                }
                let (want_all, want_11) = brute_force_ap(&seq, &gts, 0.5);
                let (got_all, got_11) = (got_all.unwrap().ap, got_11.unwrap().ap);
                ensure!(
                    (got_all - want_all).abs() <= 1e-9 && (got_11 - want_11).abs() <= 1e-9,
                    "gt mask {mask} dets {seq:?}: all-points {got_all} vs {want_all}, 11-point {got_11} vs {want_11}"
                );
            }
        }
    }
    Ok(format!("{instances} instances agree"))
}

fn determinism() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_nmsforge");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = dir.path().join("m.toml");
    std::fs::write(
        &manifest,
        r#"
seed = 5
engines = ["greedy", "psrr", "legacy-single", "legacy-ratio", "legacy-scale"]
trace = true
[config]
assignment = "random"
[input.synthetic]
n_scenes = 20
n_classes = 2
"#,
    )
    .map_err(|e| e.to_string())?;
    let invoke = |tag: &str| -> Result<Vec<(String, Vec<u8>)>, String> {
        let out = dir.path().join(tag);
        let status = Command::new(exe)
            .args(["run", "--manifest"])
            .arg(&manifest)
            .arg("--out-dir")
            .arg(&out)
            .env_remove("NMSFORGE_SEED")
            .status()
            .map_err(|e| e.to_string())?;
        ensure!(status.success(), "run exited with {status}");
        let mut files = Vec::new();
        for name in ["overlap.csv", "ap.csv", "trace.csv"] {
            files.push((name.to_string(), std::fs::read(out.join(name)).map_err(|e| format!("{name}: {e}"))?));
        }
        for which in ["assignment", "schedule", "recovery"] {
            let o = Command::new(exe)
                .args(["ablate", which, "--manifest"])
                .arg(&manifest)
                .env_remove("NMSFORGE_SEED")
                .output()
                .map_err(|e| e.to_string())?;
            ensure!(o.status.success(), "ablate {which} failed: {}", String::from_utf8_lossy(&o.stderr));
            files.push((format!("ablate-{which}"), o.stdout));
        }
        Ok(files)
    };
    let first = invoke("a")?;
    let second = invoke("b")?;
    for ((name, a), (_, b)) in first.iter().zip(&second) {
        ensure!(a == b, "{name} differs between invocations");
        ensure!(a.len() > 100, "{name} is suspiciously short");
    }
    Ok(format!("{} outputs byte-identical", first.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("greedy oracle soundness", greedy_soundness),
        ("kernel size table", kernel_table),
        ("edge-effect fixture", edge_effect),
        ("engine overlap ordering", engine_ordering),
        ("schedule trend", schedule_trend),
        ("sparsity monotonicity", sparsity_monotone),
        ("complexity scaling", complexity_scaling),
        ("AP oracle equivalence", ap_oracle),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {}. {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
