//! Run configuration: flat `key = value` files overlaid by command-line
//! flags, validated into a [`RunConfig`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::eval::{ReportFormat, DEFAULT_IOU_MATCH};
use crate::quantize::CalibMode;

use super::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Detect,
    Eval,
    Quantize,
    Anchors,
    Bench,
    Augment,
    Split,
    OptimDemo,
    Init,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::Detect,
        Command::Eval,
        Command::Quantize,
        Command::Anchors,
        Command::Bench,
        Command::Augment,
        Command::Split,
        Command::OptimDemo,
        Command::Init,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Detect => "detect",
            Command::Eval => "eval",
            Command::Quantize => "quantize",
            Command::Anchors => "anchors",
            Command::Bench => "bench",
            Command::Augment => "augment",
            Command::Split => "split",
            Command::OptimDemo => "optim-demo",
            Command::Init => "init",
        }
    }

    pub fn about(self) -> &'static str {
        match self {
            Command::Detect => "Run detection on frames; writes text records and annotated PNGs",
            Command::Eval => "Evaluate a model (or the ground-truth oracle) on a labelled frame set",
            Command::Quantize => "Calibrate on frames and write an int8 TYQ1 model",
            Command::Anchors => "Check anchor fit on a labelled set and recompute anchors if needed",
            Command::Bench => "Time the forward pass at one input size",
            Command::Augment => "Apply one geometric augmentation to frames and labels",
            Command::Split => "Split frame ids into train and validation lists",
            Command::OptimDemo => "Compare SGD, Adam and AdamW on a built-in quadratic",
            Command::Init => "Write a randomly initialised nano model",
        }
    }

    pub fn from_name(s: &str) -> Option<Command> {
        Command::ALL.into_iter().find(|c| c.name() == s)
    }
}

use Command::*;

pub struct KeySpec {
    pub name: &'static str,
    pub value: &'static str,
    pub help: &'static str,
    pub commands: &'static [Command],
    pub repeatable: bool,
}

const fn key(
    name: &'static str,
    value: &'static str,
    help: &'static str,
    commands: &'static [Command],
) -> KeySpec {
    KeySpec { name, value, help, commands, repeatable: false }
}

/// Every accepted key, in echo order. Config files may use any of them
/// (with `-` or `_`); flags exist only on the commands listed.
pub const KEYS: &[KeySpec] = &[
    key("model", "PATH", "TYM1 or TYQ1 model file (eval also accepts `oracle`)", &[Detect, Eval, Quantize, Anchors, Bench]),
    KeySpec {
        name: "input",
        value: "PATH",
        help: "Frame file, frame directory or id list; repeat or comma-separate",
        commands: &[Detect, Eval, Quantize, Anchors, Augment, Split],
        repeatable: true,
    },
    key("labels", "DIR", "Directory of YOLO label files (default: next to each frame)", &[Eval, Anchors, Augment]),
    key("calib", "DIR", "Calibration frames (default: --input)", &[Quantize]),
    key("calib-mode", "MODE", "minmax or percentile:P", &[Quantize]),
    key("conf", "X", "Confidence threshold in [0, 1]", &[Detect, Eval]),
    key("iou", "X", "NMS IoU threshold in [0, 1]", &[Detect, Eval]),
    key("iou-match", "X", "Evaluation matching IoU in (0, 1]", &[Eval]),
    key("max-det", "N", "Maximum detections per frame", &[Detect, Eval]),
    key("size", "N", "Network input size, a multiple of 32 in [128, 640]", &[Detect, Eval, Quantize, Anchors, Bench, Init]),
    key("seed", "N", "Seed for every random choice", &[Detect, Eval, Quantize, Anchors, Bench, Augment, Split, OptimDemo, Init]),
    key("out", "DIR", "Output directory", &[Detect, Eval, Quantize, Anchors, Bench, Augment, Split, OptimDemo, Init]),
    key("save", "PATH", "Explicit path for the written model", &[Quantize, Anchors, Init]),
    key("format", "LIST", "Report formats: structured, tabular, pr-plot", &[Eval]),
    key("threads", "N", "Worker threads (frame-level; kernel-level for bench)", &[Detect, Eval, Quantize, Anchors, Bench]),
    key("runs", "N", "Timed runs", &[Bench]),
    key("warmup", "N", "Untimed warmup runs", &[Bench]),
    key("fraction", "X", "Train fraction in (0, 1)", &[Split]),
    key("kind", "KIND", "flip-h, rotate, scale-crop or mosaic4", &[Augment]),
    key("degrees", "X", "Rotation angle, counter-clockwise", &[Augment]),
    key("scale", "LO,HI", "Zoom range for scale-crop", &[Augment]),
    key("translate", "X", "Maximum shift for scale-crop as a fraction of the frame", &[Augment]),
    key("target", "N", "Mosaic canvas size", &[Augment]),
    key("bpr-keep", "X", "Keep anchors whose best possible recall reaches this", &[Anchors]),
    key("classes", "N", "Number of classes", &[Init]),
    key("steps", "N", "Optimizer steps", &[OptimDemo]),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentKind {
    FlipH,
    Rotate,
    ScaleCrop,
    Mosaic4,
}

impl AugmentKind {
    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::FlipH => "flip-h",
            AugmentKind::Rotate => "rotate",
            AugmentKind::ScaleCrop => "scale-crop",
            AugmentKind::Mosaic4 => "mosaic4",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub model: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub labels: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub calib_mode: CalibMode,
    pub conf: f32,
    pub iou: f32,
    pub iou_match: f32,
    pub max_det: usize,
    pub size: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
    pub save: Option<PathBuf>,
    pub formats: Vec<ReportFormat>,
    pub threads: usize,
    pub runs: usize,
    pub warmup: usize,
    pub fraction: f32,
    pub kind: AugmentKind,
    pub degrees: f32,
    pub scale: (f32, f32),
    pub translate: f32,
    pub target: usize,
    pub bpr_keep: f32,
    pub classes: usize,
    pub steps: usize,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        RunConfig {
            command,
            model: None,
            inputs: Vec::new(),
            labels: None,
            calib: None,
            calib_mode: CalibMode::MinMax,
            conf: 0.25,
            iou: 0.45,
            iou_match: DEFAULT_IOU_MATCH,
            max_det: crate::postprocess::DEFAULT_MAX_DETECTIONS,
            size: None,
            seed: 0,
            out: PathBuf::from("runs"),
            save: None,
            formats: vec![ReportFormat::Structured, ReportFormat::Tabular, ReportFormat::PrPlot],
            threads: 1,
            runs: 100,
            warmup: crate::bench::DEFAULT_WARMUP,
            fraction: 0.72,
            kind: AugmentKind::FlipH,
            degrees: 10.0,
            scale: (0.5, 1.5),
            translate: 0.1,
            target: 640,
            bpr_keep: crate::anchors::DEFAULT_BPR_KEEP,
            classes: 6,
            steps: 200,
        }
    }

    /// Sets one key from its textual value. Errors name the flag.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let bad = |what: &str| CliError::Config(format!("--{key}: {what}, got {value:?}"));
        let unit = |lo_open: bool| -> Result<f32, CliError> {
            let v: f32 = value.parse().map_err(|_| bad("expected a number"))?;
            let ok = if lo_open { v > 0.0 && v <= 1.0 } else { (0.0..=1.0).contains(&v) };
            if ok {
                Ok(v)
            } else if lo_open {
                Err(bad("must lie in (0, 1]"))
            } else {
                Err(bad("must lie in [0, 1]"))
            }
        };
        let count = |min: usize| -> Result<usize, CliError> {
            let v: usize = value.parse().map_err(|_| bad("expected a non-negative integer"))?;
            if v < min {
                return Err(bad(&format!("must be at least {min}")));
            }
            Ok(v)
        };
        let number = || -> Result<f32, CliError> {
            value
                .parse::<f32>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad("expected a finite number"))
        };
        let path = || (!value.is_empty()).then(|| PathBuf::from(value));
        match key.as_str() {
            "command" => {
                let c = Command::from_name(value).ok_or_else(|| bad("unknown command"))?;
                if c != self.command {
                    return Err(bad(&format!("config is for another command than {}", self.command.name())));
                }
            }
            "model" => self.model = path(),
            "input" => {
                self.inputs = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "labels" => self.labels = path(),
            "calib" => self.calib = path(),
            "calib-mode" => {
                self.calib_mode = if value == "minmax" {
                    CalibMode::MinMax
                } else if let Some(p) = value.strip_prefix("percentile:") {
                    let p: f32 = p.parse().map_err(|_| bad("expected percentile:P"))?;
                    if !(p > 0.0 && p <= 100.0) {
                        return Err(bad("percentile must lie in (0, 100]"));
                    }
                    CalibMode::Percentile { p }
                } else {
                    return Err(bad("expected minmax or percentile:P"));
                }
            }
            "conf" => self.conf = unit(false)?,
            "iou" => self.iou = unit(false)?,
            "iou-match" => self.iou_match = unit(true)?,
            "max-det" => self.max_det = count(1)?,
            "size" => {
                if value.is_empty() {
                    self.size = None;
                    return Ok(());
                }
                let v: usize = value.parse().map_err(|_| bad("expected an integer"))?;
                if !v.is_multiple_of(32) {
                    return Err(bad("size must be a multiple of 32"));
                }
                if !(128..=640).contains(&v) {
                    return Err(bad("size must lie in [128, 640]"));
                }
                self.size = Some(v);
            }
            "seed" => self.seed = value.parse().map_err(|_| bad("expected an unsigned integer"))?,
            "out" => self.out = path().ok_or_else(|| bad("must not be empty"))?,
            "save" => self.save = path(),
            "format" => {
                self.formats = value
                    .split(',')
                    .map(|s| match s.trim() {
                        "structured" | "json" => Ok(ReportFormat::Structured),
                        "tabular" | "csv" => Ok(ReportFormat::Tabular),
                        "pr-plot" | "svg" => Ok(ReportFormat::PrPlot),
                        _ => Err(bad("expected structured, tabular or pr-plot")),
                    })
                    .collect::<Result<_, _>>()?;
            }
            "threads" => self.threads = count(1)?,
            "runs" => self.runs = count(1)?,
            "warmup" => self.warmup = count(0)?,
            "fraction" => {
                let v = number()?;
                if !(v > 0.0 && v < 1.0) {
                    return Err(bad("must lie strictly between 0 and 1"));
                }
                self.fraction = v;
            }
            "kind" => {
                self.kind = match value {
                    "flip-h" | "flip_h" => AugmentKind::FlipH,
                    "rotate" => AugmentKind::Rotate,
                    "scale-crop" | "scale_crop" => AugmentKind::ScaleCrop,
                    "mosaic4" => AugmentKind::Mosaic4,
                    _ => return Err(bad("expected flip-h, rotate, scale-crop or mosaic4")),
                }
            }
            "degrees" => self.degrees = number()?,
            "scale" => {
                let (lo, hi) = value.split_once(',').ok_or_else(|| bad("expected LO,HI"))?;
                let lo: f32 = lo.trim().parse().map_err(|_| bad("expected LO,HI"))?;
                let hi: f32 = hi.trim().parse().map_err(|_| bad("expected LO,HI"))?;
                if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                    return Err(bad("need 0 < LO <= HI"));
                }
                self.scale = (lo, hi);
            }
            "translate" => {
                let v = number()?;
                if !(0.0..1.0).contains(&v) {
                    return Err(bad("must lie in [0, 1)"));
                }
                self.translate = v;
            }
            "target" => {
                let v = count(32)?;
                if v % 32 != 0 {
                    return Err(bad("size must be a multiple of 32"));
                }
                self.target = v;
            }
            "bpr-keep" => self.bpr_keep = unit(true)?,
            "classes" => self.classes = count(1)?,
            "steps" => self.steps = count(1)?,
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.apply(k, v)
                .map_err(|e| CliError::Config(format!("{origin}:{}: {}", n + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Fully resolved configuration in the same `key = value` form the
    /// loader accepts.
    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("command", self.command.name().into());
        put("model", opt(&self.model));
        put(
            "input",
            self.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
        );
        put("labels", opt(&self.labels));
        put("calib", opt(&self.calib));
        put(
            "calib-mode",
            match self.calib_mode {
                CalibMode::MinMax => "minmax".into(),
                CalibMode::Percentile { p } => format!("percentile:{p}"),
            },
        );
        put("conf", self.conf.to_string());
        put("iou", self.iou.to_string());
        put("iou-match", self.iou_match.to_string());
        put("max-det", self.max_det.to_string());
        put("size", self.size.map(|s| s.to_string()).unwrap_or_default());
        put("seed", self.seed.to_string());
        put("out", self.out.display().to_string());
        put("save", opt(&self.save));
        put(
            "format",
            self.formats
                .iter()
                .map(|f| match f {
                    ReportFormat::Structured => "structured",
                    ReportFormat::Tabular => "tabular",
                    ReportFormat::PrPlot => "pr-plot",
                })
                .collect::<Vec<_>>()
                .join(","),
        );
        put("threads", self.threads.to_string());
        put("runs", self.runs.to_string());
        put("warmup", self.warmup.to_string());
        put("fraction", self.fraction.to_string());
        put("kind", self.kind.name().into());
        put("degrees", self.degrees.to_string());
        put("scale", format!("{},{}", self.scale.0, self.scale.1));
        put("translate", self.translate.to_string());
        put("target", self.target.to_string());
        put("bpr-keep", self.bpr_keep.to_string());
        put("classes", self.classes.to_string());
        put("steps", self.steps.to_string());
        s
    }
}

fn clap_command() -> clap::Command {
    use clap::{Arg, ArgAction};
    let mut root = clap::Command::new("thermoyolo")
        .about("Tiny-YOLO thermal detector toolkit")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(super::EXIT_CODES_HELP);
    for cmd in Command::ALL {
        let mut sub = clap::Command::new(cmd.name()).about(cmd.about()).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("Flat key = value file; flags override its values"),
        );
        for k in KEYS.iter().filter(|k| k.commands.contains(&cmd)) {
            let mut arg = Arg::new(k.name).long(k.name).value_name(k.value).help(k.help);
            if k.repeatable {
                arg = arg.action(ArgAction::Append);
            }
            sub = sub.arg(arg);
        }
        root = root.subcommand(sub);
    }
    root
}

/// Parses `argv` (including the program name): config file first, then
/// flags on top.
pub fn parse_args<I, T>(argv: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = clap_command().try_get_matches_from(argv).map_err(CliError::Clap)?;
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let command = Command::from_name(name).expect("registered subcommand");
    let mut cfg = RunConfig::new(command);
    if let Some(path) = sub.get_one::<String>("config") {
        cfg.load_file(Path::new(path))?;
    }
    for k in KEYS.iter().filter(|k| k.commands.contains(&command)) {
        if let Some(vals) = sub.get_many::<String>(k.name) {
            let joined = vals.map(String::as_str).collect::<Vec<_>>().join(",");
            cfg.apply(k.name, &joined)?;
        }
    }
    Ok(cfg)
}
