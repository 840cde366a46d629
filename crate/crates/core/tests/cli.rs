use std::path::Path;
use std::process::{Command, Output};

use thermoyolo::cli::{self, parse_args, RunConfig, EXIT_CONFIG, EXIT_DATA, EXIT_FORMAT, EXIT_IO};
use thermoyolo::eval::read_report;
use thermoyolo::imaging::{save_frame, synthetic_scene, write_labels};

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thermoyolo")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn dataset(dir: &Path, n: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for s in 0..n {
        let (f, l) = synthetic_scene(160, 120, 6, s);
        let ext = if s % 2 == 0 { "png" } else { "pgm" };
        save_frame(&f, dir.join(format!("f{s:02}.{ext}"))).unwrap();
        write_labels(&l, dir.join(format!("f{s:02}.txt"))).unwrap();
    }
}

#[test]
fn table_settings_parse() {
    let c = parse_args(["thermoyolo", "detect", "--model", "m.tym", "--conf", "0.4", "--iou", "0.4", "--size", "640"])
        .unwrap();
    assert_eq!(c.command, cli::Command::Detect);
    assert_eq!((c.conf, c.iou, c.size), (0.4, 0.4, Some(640)));
    assert_eq!(c.model.as_deref(), Some(Path::new("m.tym")));
    assert_eq!(c.seed, 0);
}

#[test]
fn invalid_values_name_the_flag() {
    let e = parse_args(["thermoyolo", "detect", "--size", "130"]).unwrap_err();
    assert!(e.message().contains("size must be a multiple of 32"), "{}", e.message());
    assert_eq!(e.exit_code(), EXIT_CONFIG);
    let e = parse_args(["thermoyolo", "eval", "--conf", "1.5"]).unwrap_err();
    assert!(e.message().starts_with("--conf"));
    let e = parse_args(["thermoyolo", "detect", "--bogus", "1"]).unwrap_err();
    assert_eq!(e.exit_code(), EXIT_CONFIG);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# settings\nconf = 0.2\niou_match = 0.6\nseed=9\n").unwrap();
    let c = parse_args(["thermoyolo", "eval", "--config", cfg.to_str().unwrap(), "--conf", "0.3"]).unwrap();
    assert_eq!((c.conf, c.iou_match, c.seed), (0.3, 0.6, 9));

    std::fs::write(&cfg, "conf = 0.2\nwat = 1\n").unwrap();
    let e = parse_args(["thermoyolo", "eval", "--config", cfg.to_str().unwrap()]).unwrap_err();
    assert!(e.message().contains("unknown key"));
    assert_eq!(e.exit_code(), EXIT_CONFIG);

    std::fs::write(&cfg, "command = bench\n").unwrap();
    assert!(parse_args(["thermoyolo", "eval", "--config", cfg.to_str().unwrap()]).is_err());
}

#[test]
fn config_echo_reloads_to_the_same_config() {
    let c = parse_args([
        "thermoyolo", "quantize", "--model", "a.tym", "--input", "x,y", "--calib-mode", "percentile:99.99",
        "--seed", "4", "--size", "256",
    ])
    .unwrap();
    let mut back = RunConfig::new(c.command);
    back.apply_text(&c.to_text(), "echo").unwrap();
    assert_eq!(back, c);
}

#[test]
fn end_to_end_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    dataset(&root.join("data"), 6);

    let out = ok(&bin(&["init", "--out", "run", "--size", "128", "--seed", "2"], root));
    assert!(out.contains("parameters"));
    let model = "run/models/nano.tym";
    assert!(root.join(model).exists());
    assert!(root.join("run/config.txt").exists());

    // Detection: text records, annotated frames, structured report.
    ok(&bin(&["detect", "--model", model, "--input", "data", "--conf", "0.001", "--out", "run"], root));
    let rec = std::fs::read_to_string(root.join("run/detections/f00.txt")).unwrap();
    let mut lines = rec.lines();
    assert_eq!(lines.next(), Some("f00"));
    let first: Vec<&str> = lines.next().expect("a detection at conf 0.001").split(' ').collect();
    assert_eq!(first.len(), 6);
    assert!(root.join("run/detections/f01.png").exists());
    let report = std::fs::read(root.join("run/reports/detections.json")).unwrap();

    // Re-running from the echoed config reproduces the report byte for byte.
    ok(&bin(&["detect", "--config", "run/config.txt"], root));
    assert_eq!(std::fs::read(root.join("run/reports/detections.json")).unwrap(), report);

    // Oracle evaluation.
    ok(&bin(&["eval", "--model", "oracle", "--input", "data", "--out", "ev"], root));
    let r = read_report(root.join("ev/reports/eval.json")).unwrap();
    assert_eq!(r.map50, 1.0);
    assert!(root.join("ev/reports/eval.csv").exists() && root.join("ev/reports/eval.svg").exists());

    // Model evaluation carries timing.
    ok(&bin(&["eval", "--model", model, "--input", "data", "--out", "ev2", "--format", "structured"], root));
    let r = read_report(root.join("ev2/reports/eval.json")).unwrap();
    assert!(r.timing.is_some());
    assert!(!root.join("ev2/reports/eval.csv").exists());

    // Quantize straight to a named file.
    let out = ok(&bin(&["quantize", "--model", model, "--calib", "data", "--out", "q/m.tyq"], root));
    assert!(out.contains("calibration frame"));
    assert!(root.join("q/m.tyq").exists() && root.join("q/reports/quantization.json").exists());
    ok(&bin(&["detect", "--model", "q/m.tyq", "--input", "data/f03.pgm", "--out", "qd"], root));

    // Bench at two sizes; the second run lists the first.
    ok(&bin(&["bench", "--model", "q/m.tyq", "--size", "128", "--runs", "3", "--warmup", "1", "--out", "b"], root));
    let out = ok(&bin(&["bench", "--model", "q/m.tyq", "--size", "256", "--runs", "3", "--warmup", "1", "--out", "b"], root));
    assert!(out.contains("latency increases with input size"));
    let csv = std::fs::read_to_string(root.join("b/bench/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    // Anchors are written into a TYM1 header either way.
    let out = ok(&bin(&["anchors", "--model", model, "--input", "data", "--out", "an"], root));
    assert!(out.contains("Best Possible Recall (BPR)"));
    assert!(root.join("an/models/nano.tym").exists());

    ok(&bin(&["augment", "--input", "data/f00.png", "--kind", "flip-h", "--out", "au"], root));
    assert!(root.join("au/augmented/f00_flip-h.png").exists());
    ok(&bin(&["augment", "--input", "data/f00.png,data/f01.pgm,data/f02.png,data/f03.pgm", "--kind", "mosaic4", "--target", "128", "--out", "au"], root));
    assert!(root.join("au/augmented/mosaic4.txt").exists());

    ok(&bin(&["split", "--input", "data", "--fraction", "0.5", "--out", "sp"], root));
    let train = std::fs::read_to_string(root.join("sp/splits/train.txt")).unwrap();
    assert_eq!(train.lines().count(), 3);

    ok(&bin(&["optim-demo", "--steps", "50", "--out", "od"], root));
    let curves = std::fs::read_to_string(root.join("od/reports/optim_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 52);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    dataset(&root.join("data"), 1);
    std::fs::write(root.join("junk.tym"), b"JUNKJUNKJUNK").unwrap();
    std::fs::create_dir_all(root.join("empty")).unwrap();
    let code = |args: &[&str]| bin(args, root).status.code().unwrap();
    assert_eq!(code(&["detect", "--size", "130"]), EXIT_CONFIG);
    assert_eq!(code(&["detect", "--input", "data", "--out", "o"]), EXIT_CONFIG);
    assert_eq!(code(&["detect", "--model", "missing.tym", "--input", "data", "--out", "o"]), EXIT_IO);
    assert_eq!(code(&["detect", "--model", "junk.tym", "--input", "data", "--out", "o"]), EXIT_FORMAT);
    assert_eq!(code(&["split", "--input", "empty", "--out", "o"]), EXIT_DATA);
    assert_eq!(code(&["--help"]), 0);
    let out = bin(&["detect", "--size", "130"], root);
    assert!(String::from_utf8_lossy(&out.stderr).contains("size must be a multiple of 32"));
}
