use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::config::{AugmentKind, Command, RunConfig};
use super::CliError;
use crate::anchors::{autoanchor_with, AnchorSet, AutoAnchorConfig};
use crate::bench::{bench_forward, environment_note, BenchStats};
use crate::detector::Detector;
use crate::error::Error;
use crate::eval::{evaluate, write_report, FrameEval};
use crate::imaging::{
    annotate, augment, format_labels, load_frame, read_id_list, read_labels, save_frame, split_dataset,
    write_id_list, Augment, Frame, LabelBox,
};
use crate::netgraph::{
    build_yolov5n, count_params, default_class_names, format::TYM1_MAGIC, load_model, save_model, ModelGraph,
};
use crate::optim::{compare_optimizers, Hyper, OptimKind, Quadratic};
use crate::postprocess::{Detection, PostprocessConfig};
use crate::quantize::{
    calibrate, load_quantized, qmodel_to_bytes, quantize_model, save_quantized, CalibMode, CalibrationStats,
    TYQ1_MAGIC,
};
use crate::tensor::set_kernel_threads;

type CliResult<T> = Result<T, CliError>;

/// Floor for the detections that feed AP and the F1 sweep; P/R use `conf`.
const EVAL_CONF_FLOOR: f32 = 0.001;

fn is_tyq(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("tyq"))
}

/// `quantize --out m.tyq` names the model file; its directory takes the
/// other outputs.
pub(super) fn output_dir(cfg: &RunConfig) -> PathBuf {
    if cfg.command == Command::Quantize && is_tyq(&cfg.out) {
        match cfg.out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        }
    } else {
        cfg.out.clone()
    }
}

fn subdir(cfg: &RunConfig, name: &str) -> CliResult<PathBuf> {
    let d = output_dir(cfg).join(name);
    std::fs::create_dir_all(&d).map_err(|e| CliError::Io(format!("{}: {e}", d.display())))?;
    Ok(d)
}

pub(super) fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "frame".into())
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm"))
}

/// Expands directories into their image files, sorted by name.
fn list_frames(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(CliError::Config("--input: no frames given".into()));
    }
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let rd = std::fs::read_dir(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            let mut files: Vec<PathBuf> = rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && is_image(f))
                .collect();
            files.sort();
            out.extend(files);
        } else if p.exists() {
            out.push(p.clone());
        } else {
            return Err(CliError::Io(format!("{}: no such file or directory", p.display())));
        }
    }
    if out.is_empty() {
        return Err(CliError::Data("no PGM or PNG frames found in the inputs".into()));
    }
    Ok(out)
}

/// Labels for a frame; a missing label file means no objects.
fn labels_for(cfg: &RunConfig, frame: &Path) -> CliResult<Vec<LabelBox>> {
    let path = match &cfg.labels {
        Some(dir) => dir.join(format!("{}.txt", stem(frame))),
        None => frame.with_extension("txt"),
    };
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_labels(&path)?)
}

fn require_model(cfg: &RunConfig) -> CliResult<&Path> {
    cfg.model
        .as_deref()
        .ok_or_else(|| CliError::Config("--model: required for this command".into()))
}

fn magic(path: &Path) -> CliResult<[u8; 4]> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut m = [0u8; 4];
    f.read_exact(&mut m).map_err(|_| {
        CliError::Lib(Error::Truncated(format!("{}: shorter than a model header", path.display())))
    })?;
    Ok(m)
}

fn load_detector(path: &Path, size: Option<usize>) -> CliResult<Detector> {
    let m = magic(path)?;
    let det = if m == TYM1_MAGIC {
        Detector::from_graph(&load_model(path)?)?
    } else if m == TYQ1_MAGIC {
        Detector::Quantized(load_quantized(path)?)
    } else {
        return Err(Error::BadMagic { expected: TYM1_MAGIC, found: m }.into());
    };
    Ok(match size {
        Some(s) if s != det.input_size() => det.with_input_size(s)?,
        _ => det,
    })
}

fn load_float_model(cfg: &RunConfig) -> CliResult<ModelGraph> {
    let path = require_model(cfg)?;
    let m = magic(path)?;
    if m == TYQ1_MAGIC {
        return Err(Error::UnsupportedFormat(format!("{}: needs a float TYM1 model", path.display())).into());
    }
    let mut g = load_model(path)?;
    if let Some(s) = cfg.size {
        g.input_size = s;
    }
    Ok(g)
}

fn pool(threads: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("--threads: {e}")))
}

/// Order-preserving parallel map over frames.
fn par_map<T, R, F>(threads: usize, items: &[T], f: F) -> CliResult<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> CliResult<R> + Sync + Send,
{
    pool(threads)?.install(|| items.par_iter().map(f).collect())
}

pub(super) fn dispatch(cfg: &RunConfig) -> CliResult<()> {
    set_kernel_threads(1);
    match cfg.command {
        Command::Detect => detect(cfg),
        Command::Eval => eval(cfg),
        Command::Quantize => quantize(cfg),
        Command::Anchors => anchors(cfg),
        Command::Bench => bench(cfg),
        Command::Augment => augment_cmd(cfg),
        Command::Split => split(cfg),
        Command::OptimDemo => optim_demo(cfg),
        Command::Init => init(cfg),
    }
}

fn postprocess_config(cfg: &RunConfig, conf: f32) -> PostprocessConfig {
    PostprocessConfig { conf_threshold: conf, iou_threshold: cfg.iou, max_out: cfg.max_det }
}

/// Text record: the frame id, then one `class_id score x1 y1 x2 y2` line per detection.
pub fn detection_record(frame_id: &str, dets: &[Detection]) -> String {
    let mut s = format!("{frame_id}\n");
    for d in dets {
        let _ = writeln!(s, "{} {:.4} {:.1} {:.1} {:.1} {:.1}", d.class_id, d.score, d.x1, d.y1, d.x2, d.y2);
    }
    s
}

#[derive(Serialize)]
struct FrameRecord {
    frame: String,
    width: usize,
    height: usize,
    nonfinite_dropped: usize,
    detections: Vec<Detection>,
}

fn detect(cfg: &RunConfig) -> CliResult<()> {
    let det = load_detector(require_model(cfg)?, cfg.size)?;
    let paths = list_frames(&cfg.inputs)?;
    let pp = postprocess_config(cfg, cfg.conf);
    let results = par_map(cfg.threads, &paths, |p| {
        let f = load_frame(p)?;
        let r = det.detect(&f, &pp)?;
        Ok((f, r))
    })?;
    let dir = subdir(cfg, "detections")?;
    let mut records = Vec::with_capacity(paths.len());
    for (p, (frame, r)) in paths.iter().zip(&results) {
        let id = stem(p);
        let text = detection_record(&id, &r.detections);
        print!("{text}");
        write_text(&dir.join(format!("{id}.txt")), &text)?;
        annotate(frame, &r.detections).save_png(dir.join(format!("{id}.png")))?;
        records.push(FrameRecord {
            frame: id,
            width: frame.width,
            height: frame.height,
            nonfinite_dropped: r.decode.nonfinite,
            detections: r.detections.clone(),
        });
    }
    write_json(&subdir(cfg, "reports")?.join("detections.json"), &records)?;
    let total: usize = records.iter().map(|r| r.detections.len()).sum();
    eprintln!("{} frame(s), {total} detection(s) -> {}", records.len(), dir.display());
    Ok(())
}

fn eval(cfg: &RunConfig) -> CliResult<()> {
    let model = require_model(cfg)?;
    let oracle = model.as_os_str() == "oracle";
    let det = if oracle { None } else { Some(load_detector(model, cfg.size)?) };
    let paths = list_frames(&cfg.inputs)?;
    let pp = postprocess_config(cfg, cfg.conf.min(EVAL_CONF_FLOOR));
    let per_frame = par_map(cfg.threads, &paths, |p| {
        let f = load_frame(p)?;
        let gt = labels_for(cfg, p)?;
        let (dets, ms) = match &det {
            Some(d) => {
                let r = d.detect(&f, &pp)?;
                (r.detections, Some(r.times.total_ms()))
            }
            None => (oracle_detections(&gt, f.width, f.height), None),
        };
        Ok((FrameEval { width: f.width, height: f.height, detections: dets, ground_truth: gt }, ms))
    })?;
    let (frames, times): (Vec<FrameEval>, Vec<Option<f64>>) = per_frame.into_iter().unzip();
    let class_names = match &det {
        Some(d) => d.class_names().to_vec(),
        None => {
            let max_cls = frames.iter().flat_map(|f| &f.ground_truth).map(|g| g.class_id + 1).max();
            default_class_names(max_cls.unwrap_or(0).max(6))
        }
    };
    let mut report = evaluate(&frames, &class_names, cfg.conf, cfg.iou_match)?;
    let samples: Vec<f64> = times.into_iter().flatten().collect();
    if !samples.is_empty() {
        let note = format!("per-frame pipeline; {}", environment_note(cfg.threads));
        report.timing = Some(BenchStats::from_samples(&samples, 0, note)?);
    }
    let dir = subdir(cfg, "reports")?;
    for fmt in &cfg.formats {
        write_report(&report, dir.join(format!("eval.{}", fmt.extension())), *fmt)?;
    }
    println!(
        "mAP@{} {:.4}  P {:.4}  R {:.4}  best F1 {:.4} at conf {:.2}  ({} frames)",
        cfg.iou_match,
        report.map50,
        report.precision,
        report.recall,
        report.best_f1,
        report.best_confidence,
        frames.len()
    );
    for (name, ap) in &report.per_class_ap {
        println!("  {name:<10} AP {ap:.4}");
    }
    Ok(())
}

fn oracle_detections(gt: &[LabelBox], width: usize, height: usize) -> Vec<Detection> {
    gt.iter()
        .map(|g| {
            let [x1, y1, x2, y2] = g.to_pixels(width, height);
            Detection { x1, y1, x2, y2, class_id: g.class_id, score: 1.0 }
        })
        .collect()
}

fn calibrate_frames(g: &ModelGraph, frames: &[Frame], mode: CalibMode, threads: usize) -> CliResult<CalibrationStats> {
    let chunk = frames.len().div_ceil(threads.max(1)).max(1);
    let chunks: Vec<&[Frame]> = frames.chunks(chunk).collect();
    let parts = par_map(threads, &chunks, |c| Ok(calibrate(g, c, mode)?))?;
    let mut stats = CalibrationStats::new(mode);
    for p in &parts {
        stats.merge(p);
    }
    Ok(stats)
}

fn quantize(cfg: &RunConfig) -> CliResult<()> {
    let g = load_float_model(cfg)?;
    let calib_inputs = match &cfg.calib {
        Some(c) => vec![c.clone()],
        None => cfg.inputs.clone(),
    };
    if calib_inputs.is_empty() {
        return Err(CliError::Config("--calib: calibration frames required".into()));
    }
    let paths = list_frames(&calib_inputs)?;
    let frames = par_map(cfg.threads, &paths, |p| Ok(load_frame(p)?))?;
    let stats = calibrate_frames(&g, &frames, cfg.calib_mode, cfg.threads)?;
    let qm = quantize_model(&g, &stats)?;
    let target = match (&cfg.save, is_tyq(&cfg.out)) {
        (Some(p), _) => p.clone(),
        (None, true) => cfg.out.clone(),
        (None, false) => subdir(cfg, "models")?.join(format!("{}.tyq", stem(require_model(cfg)?))),
    };
    save_quantized(&qm, &target)?;
    let fp32_bytes = crate::netgraph::format::to_bytes(&g)?.len();
    let int8_bytes = qmodel_to_bytes(&qm)?.len();

    // Head deviation on the first calibration frame, in logit units.
    let (input, _, _) = crate::imaging::letterbox(&frames[0], g.input_size, &[])?;
    let fh = crate::netgraph::forward(&g, &input)?;
    let qh = qm.forward(&input)?;
    let mut head_err = Vec::new();
    for (a, b) in fh.iter().zip(&qh) {
        let (a, b) = (a.as_f32()?, b.as_f32()?);
        let max = a.iter().zip(b).fold(0.0f32, |m, (x, y)| m.max((x - y).abs()));
        let mean = a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64;
        head_err.push(json!({ "max_abs": max, "mean_abs": mean }));
    }
    let summary = json!({
        "source": require_model(cfg)?.display().to_string(),
        "output": target.display().to_string(),
        "calibration_frames": frames.len(),
        "calibration_mode": cfg.calib_mode,
        "activation_tensors": stats.tensors.len(),
        "conv_layers": qm.nodes.iter().map(|n| n.node.convs().len()).sum::<usize>(),
        "fp32_bytes": fp32_bytes,
        "int8_bytes": int8_bytes,
        "size_ratio": fp32_bytes as f64 / int8_bytes as f64,
        "head_error_first_frame": head_err,
    });
    write_json(&subdir(cfg, "reports")?.join("quantization.json"), &summary)?;
    println!(
        "quantized {} calibration frame(s): {} -> {} bytes ({:.2}x) -> {}",
        frames.len(),
        fp32_bytes,
        int8_bytes,
        fp32_bytes as f64 / int8_bytes as f64,
        target.display()
    );
    Ok(())
}

fn anchors(cfg: &RunConfig) -> CliResult<()> {
    let mut g = load_float_model(cfg)?;
    let size = g.input_size as f32;
    let paths = list_frames(&cfg.inputs)?;
    let per_frame = par_map(cfg.threads, &paths, |p| {
        let f = load_frame(p)?;
        let s = size / f.width.max(f.height) as f32;
        Ok(labels_for(cfg, p)?
            .iter()
            .map(|l| (l.w * f.width as f32 * s, l.h * f.height as f32 * s))
            .collect::<Vec<_>>())
    })?;
    let wh: Vec<(f32, f32)> = per_frame.into_iter().flatten().collect();
    let aa = AutoAnchorConfig { bpr_keep: cfg.bpr_keep, ..AutoAnchorConfig::default() };
    let outcome = autoanchor_with(&wh, &g.anchors, &aa, cfg.seed)?;
    println!("AutoAnchor: {}.", outcome.before);
    if outcome.recomputed {
        println!("AutoAnchor: Anchors are a poor fit to dataset, attempting to improve...");
        println!(
            "AutoAnchor: Running kmeans for 9 anchors on {} points, then {} generations of refinement...",
            wh.len(),
            aa.generations
        );
        println!("AutoAnchor: {}.", outcome.after);
        let pairs: Vec<String> = outcome.anchors.pairs().iter().map(|(w, h)| format!("{w:.0},{h:.0}")).collect();
        println!("AutoAnchor: n=9, img_size={}, anchors: {}", g.input_size, pairs.join(", "));
    } else if outcome.anchors != g.anchors {
        println!("AutoAnchor: Recomputed anchors did not improve BPR, keeping the original anchors.");
    } else {
        println!("AutoAnchor: Current anchors are a good fit to dataset ✓");
    }
    g.anchors = outcome.anchors.clone();
    let target = match &cfg.save {
        Some(p) => p.clone(),
        None => subdir(cfg, "models")?.join(format!("{}.tym", stem(require_model(cfg)?))),
    };
    save_model(&g, &target)?;
    println!("AutoAnchor: anchors written to {}", target.display());
    write_json(
        &subdir(cfg, "reports")?.join("anchors.json"),
        &json!({
            "labels": wh.len(),
            "before": outcome.before,
            "after": outcome.after,
            "recomputed": outcome.recomputed,
            "anchors": outcome.anchors,
            "model": target.display().to_string(),
        }),
    )
}

fn bench(cfg: &RunConfig) -> CliResult<()> {
    let model = require_model(cfg)?;
    let det = load_detector(model, None)?;
    let size = cfg.size.unwrap_or(det.input_size());
    set_kernel_threads(cfg.threads);
    let stats = bench_forward(&det, size, cfg.runs, cfg.warmup);
    set_kernel_threads(1);
    let stats = stats?;
    let dir = subdir(cfg, "bench")?;
    let name = stem(model);
    write_json(&dir.join(format!("{name}_{size}.json")), &stats)?;
    let csv = dir.join("bench.csv");
    let mut rows = if csv.exists() {
        std::fs::read_to_string(&csv).map_err(|e| CliError::Io(format!("{}: {e}", csv.display())))?
    } else {
        format!("model,size,{}\n", BenchStats::TABULAR_HEADER)
    };
    let _ = writeln!(rows, "{name},{size},{}", stats.tabular_row());
    write_text(&csv, &rows)?;
    println!("{}", BenchStats::TABULAR_HEADER);
    println!("{}", stats.tabular_row());
    println!("# {}", stats.env_note);

    // Earlier runs of the same model at other sizes, for the size/latency trend.
    let prefix = format!("{name}_");
    let mut prior: Vec<(usize, f64)> = std::fs::read_dir(&dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let s = p.file_stem()?.to_str()?.strip_prefix(&prefix)?.parse::<usize>().ok()?;
            let text = std::fs::read_to_string(&p).ok()?;
            let b: BenchStats = serde_json::from_str(&text).ok()?;
            Some((s, b.avg_ms))
        })
        .collect();
    prior.sort_by_key(|&(s, _)| s);
    if prior.len() > 1 {
        let base = prior[0].1;
        for (s, avg) in &prior {
            println!("  {s:>4}: avg {avg:.3} ms ({:.2}x of {})", avg / base, prior[0].0);
        }
        let increasing = prior.windows(2).all(|w| w[0].1 < w[1].1);
        println!("  latency increases with input size: {}", if increasing { "yes" } else { "no" });
    }
    Ok(())
}

fn augment_cmd(cfg: &RunConfig) -> CliResult<()> {
    let paths = list_frames(&cfg.inputs)?;
    let dir = subdir(cfg, "augmented")?;
    let load = |p: &PathBuf| -> CliResult<(Frame, Vec<LabelBox>)> { Ok((load_frame(p)?, labels_for(cfg, p)?)) };
    let save = |name: &str, f: &Frame, l: &[LabelBox]| -> CliResult<()> {
        save_frame(f, dir.join(format!("{name}.png")))?;
        write_text(&dir.join(format!("{name}.txt")), &format_labels(l))
    };
    let kind = match cfg.kind {
        AugmentKind::FlipH => Augment::FlipH,
        AugmentKind::Rotate => Augment::Rotate { degrees: cfg.degrees },
        AugmentKind::ScaleCrop => Augment::ScaleCrop { scale: cfg.scale, translate: cfg.translate },
        AugmentKind::Mosaic4 => Augment::Mosaic4 { target: cfg.target },
    };
    if cfg.kind == AugmentKind::Mosaic4 {
        if paths.len() != 4 {
            return Err(CliError::Config(format!("--input: mosaic4 needs exactly 4 frames, got {}", paths.len())));
        }
        let (frames, labels): (Vec<_>, Vec<_>) = paths.iter().map(load).collect::<CliResult<Vec<_>>>()?.into_iter().unzip();
        let (f, l) = augment(&frames, &labels, &kind, cfg.seed)?;
        save("mosaic4", &f, &l)?;
        println!("mosaic4: {} label(s) -> {}", l.len(), dir.display());
        return Ok(());
    }
    for (i, p) in paths.iter().enumerate() {
        let (f, l) = load(p)?;
        let (af, al) = augment(&[f], &[l], &kind, cfg.seed.wrapping_add(i as u64))?;
        save(&format!("{}_{}", stem(p), cfg.kind.name()), &af, &al)?;
    }
    println!("{}: {} frame(s) -> {}", cfg.kind.name(), paths.len(), dir.display());
    Ok(())
}

fn split(cfg: &RunConfig) -> CliResult<()> {
    let list_input = cfg.inputs.len() == 1
        && cfg.inputs[0].extension().is_some_and(|e| e == "txt")
        && cfg.inputs[0].is_file();
    let ids: Vec<String> = if list_input {
        read_id_list(&cfg.inputs[0])?
    } else {
        list_frames(&cfg.inputs)?.iter().map(|p| stem(p)).collect()
    };
    let (train, val) = split_dataset(&ids, cfg.fraction, cfg.seed)?;
    let dir = subdir(cfg, "splits")?;
    write_id_list(&train, dir.join("train.txt"))?;
    write_id_list(&val, dir.join("val.txt"))?;
    println!("{} ids: {} train, {} val -> {}", ids.len(), train.len(), val.len(), dir.display());
    Ok(())
}

fn optim_demo(cfg: &RunConfig) -> CliResult<()> {
    const DIM: usize = 16;
    // Condition number 100: curvatures spread log-uniformly over [0.1, 10].
    let diag: Vec<f32> = (0..DIM).map(|i| 10f32.powf(2.0 * i as f32 / (DIM - 1) as f32 - 1.0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let theta0: Vec<f32> = (0..DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let hypers = [
        (OptimKind::Sgd, Hyper::sgd()),
        (OptimKind::Adam, Hyper::adam().with_lr(0.01)),
        (OptimKind::AdamW, Hyper::adam().with_lr(0.01).with_weight_decay(0.05)),
    ];
    let rows = compare_optimizers(&Quadratic { diag }, &theta0, cfg.steps, hypers)?;
    let mut csv = String::from("step,sgd,adam,adamw\n");
    for (k, r) in rows.iter().enumerate() {
        let _ = writeln!(csv, "{k},{:e},{:e},{:e}", r[0], r[1], r[2]);
    }
    let path = subdir(cfg, "reports")?.join("optim_curves.csv");
    write_text(&path, &csv)?;
    let last = rows.last().expect("steps >= 1");
    println!(
        "after {} steps: sgd {:.3e}  adam {:.3e}  adamw {:.3e} -> {}",
        cfg.steps,
        last[0],
        last[1],
        last[2],
        path.display()
    );
    Ok(())
}

fn init(cfg: &RunConfig) -> CliResult<()> {
    let mut g = build_yolov5n(cfg.classes, cfg.size.unwrap_or(640), AnchorSet::default())?;
    g.randomize(cfg.seed);
    let target = match &cfg.save {
        Some(p) => p.clone(),
        None => subdir(cfg, "models")?.join("nano.tym"),
    };
    save_model(&g, &target)?;
    println!(
        "nano model: {} classes, input {}, {} parameters -> {}",
        g.num_classes,
        g.input_size,
        count_params(&g),
        target.display()
    );
    Ok(())
}
