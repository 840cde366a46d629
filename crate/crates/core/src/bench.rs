//! Latency harness: per-call monotonic timing with warmup, summarised as
//! mean, min and percentiles.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, StageTimes};
use crate::error::{Error, Result};
use crate::imaging::Frame;
use crate::postprocess::PostprocessConfig;
use crate::tensor::{kernel_threads, Dims, Tensor};

pub const DEFAULT_WARMUP: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub avg_ms: f64,
    pub min_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    pub runs: usize,
    pub warmup_runs: usize,
    pub env_note: String,
}

impl BenchStats {
    /// Summarises per-call samples in milliseconds. Percentiles use the
    /// nearest-rank definition so they are always observed samples.
    pub fn from_samples(samples_ms: &[f64], warmup_runs: usize, env_note: String) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::Empty("no timing samples"));
        }
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |q: f64| sorted[((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
        let avg_ms = (samples_ms.iter().sum::<f64>() / samples_ms.len() as f64).max(sorted[0]);
        Ok(BenchStats {
            avg_ms,
            min_ms: sorted[0],
            p50_ms: rank(0.5),
            p95_ms: rank(0.95),
            fps: 1000.0 / avg_ms,
            runs: samples_ms.len(),
            warmup_runs,
            env_note,
        })
    }

    pub fn is_consistent(&self) -> bool {
        self.runs >= 1
            && self.min_ms <= self.p50_ms
            && self.p50_ms <= self.p95_ms
            && self.min_ms <= self.avg_ms
            && (self.fps - 1000.0 / self.avg_ms).abs() <= 1e-9 * self.fps.max(1.0)
    }

    pub const TABULAR_HEADER: &'static str =
        "Average inference time/frame (ms),Minimum inference time (ms),p50 (ms),p95 (ms),FPS,runs,warmup";

    pub fn tabular_row(&self) -> String {
        format!(
            "{:.3},{:.3},{:.3},{:.3},{:.2},{},{}",
            self.avg_ms, self.min_ms, self.p50_ms, self.p95_ms, self.fps, self.runs, self.warmup_runs
        )
    }
}

/// Runs `f` `warmup` times untimed, then `runs` times timed individually.
pub fn time_calls<F>(runs: usize, warmup: usize, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut() -> Result<()>,
{
    if runs == 0 {
        return Err(Error::invalid("runs must be at least 1"));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        f()?;
        samples.push(ms(t0.elapsed()));
    }
    Ok(samples)
}

/// Fixed pseudo-random input in [0, 1), identical for every size request
/// of the same dimensions.
fn bench_input(size: usize) -> Result<Tensor> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x7e57);
    let d = Dims::new(1, 3, size, size);
    Tensor::from_f32(d, (0..d.len()).map(|_| rng.gen::<f32>()).collect())
}

/// Times the forward pass alone at `input_size` (same weights, resized input).
pub fn bench_forward(model: &Detector, input_size: usize, runs: usize, warmup: usize) -> Result<BenchStats> {
    let model = if model.input_size() == input_size {
        model.clone()
    } else {
        model.with_input_size(input_size)?
    };
    let x = bench_input(input_size)?;
    let samples = time_calls(runs, warmup, || model.forward(&x).map(|_| ()))?;
    let kind = if model.is_quantized() { "int8" } else { "fp32" };
    BenchStats::from_samples(
        &samples,
        warmup,
        format!("{kind} forward {input_size}x{input_size}; {}", environment_note(kernel_threads())),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineBench {
    pub total: BenchStats,
    /// Mean per-frame time of each stage over the timed runs.
    pub stages: StageTimes,
}

impl PipelineBench {
    /// Relative gap between the summed stage means and the mean total.
    pub fn stage_gap(&self) -> f64 {
        (self.total.avg_ms - self.stages.total_ms()).abs() / self.total.avg_ms
    }
}

/// End-to-end per-frame timing (letterbox, forward, postprocess), cycling
/// through `frames`.
pub fn bench_pipeline(
    model: &Detector,
    frames: &[Frame],
    cfg: &PostprocessConfig,
    runs: usize,
    warmup: usize,
) -> Result<PipelineBench> {
    if frames.is_empty() {
        return Err(Error::Empty("benchmark frames"));
    }
    let mut i = 0usize;
    let mut stage_sum = StageTimes::default();
    let mut timed = 0usize;
    let samples = time_calls(runs, warmup, || {
        let out = model.detect(&frames[i % frames.len()], cfg)?;
        if i >= warmup {
            stage_sum.letterbox_ms += out.times.letterbox_ms;
            stage_sum.forward_ms += out.times.forward_ms;
            stage_sum.postprocess_ms += out.times.postprocess_ms;
            timed += 1;
        }
        i += 1;
        Ok(())
    })?;
    let n = timed.max(1) as f64;
    let stages = StageTimes {
        letterbox_ms: stage_sum.letterbox_ms / n,
        forward_ms: stage_sum.forward_ms / n,
        postprocess_ms: stage_sum.postprocess_ms / n,
    };
    let kind = if model.is_quantized() { "int8" } else { "fp32" };
    let total = BenchStats::from_samples(
        &samples,
        warmup,
        format!(
            "{kind} pipeline at {0}x{0}; {1}",
            model.input_size(),
            environment_note(kernel_threads())
        ),
    )?;
    Ok(PipelineBench { total, stages })
}

pub(crate) fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Host description for the environment note.
pub fn environment_note(threads: usize) -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{}, {cpus} logical cpu(s), kernel threads {threads}, {} build",
        std::env::consts::OS,
        std::env::consts::ARCH,
        if cfg!(debug_assertions) { "debug" } else { "release" }
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample() {
        let s = BenchStats::from_samples(&[4.0], 0, String::new()).unwrap();
        assert_eq!((s.avg_ms, s.min_ms, s.p50_ms, s.p95_ms), (4.0, 4.0, 4.0, 4.0));
        assert_eq!(s.fps, 250.0);
        assert!(s.is_consistent());
    }

    #[test]
    fn ordering_and_fps() {
        let samples: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let s = BenchStats::from_samples(&samples, 10, "x".into()).unwrap();
        assert_eq!((s.min_ms, s.p50_ms, s.p95_ms), (1.0, 50.0, 95.0));
        assert_eq!(s.avg_ms, 50.5);
        assert_eq!(s.fps, 1000.0 / 50.5);
        assert!(s.is_consistent());
    }

    #[test]
    fn forward_and_pipeline() {
        use crate::anchors::AnchorSet;
        use crate::netgraph::build_yolov5n;
        let mut g = build_yolov5n(6, 64, AnchorSet::default()).unwrap();
        g.randomize(2);
        let d = Detector::from_graph(&g).unwrap();
        let s = bench_forward(&d, 64, 1, 0).unwrap();
        assert_eq!((s.avg_ms, s.p50_ms), (s.min_ms, s.min_ms));
        assert!(s.is_consistent());
        let frames = [Frame::filled(80, 60, 100)];
        let p = bench_pipeline(&d, &frames, &PostprocessConfig::default(), 3, 1).unwrap();
        assert_eq!(p.total.runs, 3);
        assert!(p.stages.forward_ms > 0.0 && p.total.is_consistent());
    }

    #[test]
    fn time_calls_counts() {
        let mut n = 0;
        let v = time_calls(3, 2, || {
            n += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!((v.len(), n), (3, 5));
        assert!(time_calls(0, 0, || Ok(())).is_err());
        assert!(BenchStats::from_samples(&[], 0, String::new()).is_err());
    }
}
