use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{letterbox, Frame};
use crate::netgraph::{InferenceModel, ModelGraph};
use crate::tensor::{QuantParams, Tensor};

use super::qparams_from_range;

pub const HIST_BINS: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CalibMode {
    MinMax,
    /// Clip each tensor to the given percentile (0–100] of |x|.
    Percentile { p: f32 },
}

/// Histogram of |x| over `[0, range)` with a power-of-two range, so two
/// histograms always align after repeated bin-pair merging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub range: f32,
    pub bins: Vec<u64>,
}

impl Histogram {
    fn covering(max_abs: f32) -> Self {
        let mut range = f32::powi(2.0, -20);
        while range <= max_abs {
            range *= 2.0;
        }
        Histogram {
            range,
            bins: vec![0; HIST_BINS],
        }
    }

    fn double(&mut self) {
        for i in 0..HIST_BINS / 2 {
            self.bins[i] = self.bins[2 * i] + self.bins[2 * i + 1];
        }
        self.bins[HIST_BINS / 2..].fill(0);
        self.range *= 2.0;
    }

    fn grow_to(&mut self, range: f32) {
        while self.range < range {
            self.double();
        }
    }

    fn add(&mut self, values: &[f32]) {
        let max_abs = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        while self.range <= max_abs {
            self.double();
        }
        let k = HIST_BINS as f32 / self.range;
        for v in values {
            let b = ((v.abs() * k) as usize).min(HIST_BINS - 1);
            self.bins[b] += 1;
        }
    }

    fn merge(&mut self, other: &Histogram) {
        let mut other = other.clone();
        let r = self.range.max(other.range);
        self.grow_to(r);
        other.grow_to(r);
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }

    /// Upper edge of the bin where the cumulative count reaches `p`%.
    pub fn percentile(&self, p: f32) -> f32 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let need = ((p as f64 / 100.0) * total as f64).ceil().max(1.0) as u64;
        let mut acc = 0u64;
        for (i, &c) in self.bins.iter().enumerate() {
            acc += c;
            if acc >= need {
                return (i + 1) as f32 * self.range / HIST_BINS as f32;
            }
        }
        self.range
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorStats {
    pub min: f32,
    pub max: f32,
    pub frames: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hist: Option<Histogram>,
}

impl TensorStats {
    fn observe(values: &[f32], with_hist: bool) -> Self {
        let (min, max) = values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let hist = with_hist.then(|| {
            let mut h = Histogram::covering(min.abs().max(max.abs()));
            h.add(values);
            h
        });
        TensorStats {
            min,
            max,
            frames: 1,
            hist,
        }
    }

    fn merge(&mut self, other: &TensorStats) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.frames += other.frames;
        match (&mut self.hist, &other.hist) {
            (Some(a), Some(b)) => a.merge(b),
            (None, Some(b)) => self.hist = Some(b.clone()),
            _ => {}
        }
    }

    /// Calibrated range under `mode`.
    pub fn range(&self, mode: CalibMode) -> (f32, f32) {
        match (mode, &self.hist) {
            (CalibMode::Percentile { p }, Some(h)) => {
                let clip = h.percentile(p);
                (self.min.max(-clip), self.max.min(clip))
            }
            _ => (self.min, self.max),
        }
    }
}

/// Per-tensor ranges keyed by probe name (`input`, `n{id}`, `n{id}.cv1.pre`, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub mode: CalibMode,
    pub frames: u64,
    pub tensors: BTreeMap<String, TensorStats>,
}

impl CalibrationStats {
    pub fn new(mode: CalibMode) -> Self {
        CalibrationStats {
            mode,
            frames: 0,
            tensors: BTreeMap::new(),
        }
    }

    fn wants_hist(&self) -> bool {
        matches!(self.mode, CalibMode::Percentile { .. })
    }

    pub fn record(&mut self, name: &str, t: &Tensor) {
        let Ok(values) = t.as_f32() else { return };
        if values.is_empty() {
            return;
        }
        let obs = TensorStats::observe(values, self.wants_hist());
        match self.tensors.get_mut(name) {
            // A name seen twice within one frame (aliases) must not count twice.
            Some(s) if s.frames > self.frames => {
                let frames = s.frames;
                s.merge(&obs);
                s.frames = frames;
            }
            Some(s) => s.merge(&obs),
            None => {
                self.tensors.insert(name.to_string(), obs);
            }
        }
    }

    fn end_frame(&mut self) {
        self.frames += 1;
    }

    /// Associative, commutative combination of two calibration runs.
    pub fn merge(&mut self, other: &CalibrationStats) {
        for (name, s) in &other.tensors {
            match self.tensors.get_mut(name) {
                Some(mine) => mine.merge(s),
                None => {
                    self.tensors.insert(name.clone(), s.clone());
                }
            }
        }
        self.frames += other.frames;
    }

    pub fn get(&self, name: &str) -> Option<&TensorStats> {
        self.tensors.get(name)
    }

    pub fn qparams(&self, name: &str) -> Result<QuantParams> {
        let s = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingStats(name.to_string()))?;
        let (lo, hi) = s.range(self.mode);
        qparams_from_range(lo, hi)
    }
}

/// Runs the float model on prepared input tensors and records every
/// intermediate activation.
pub fn calibrate_tensors(g: &ModelGraph, inputs: &[Tensor], mode: CalibMode) -> Result<CalibrationStats> {
    if inputs.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    if let CalibMode::Percentile { p } = mode {
        if !(p > 0.0 && p <= 100.0) {
            return Err(Error::invalid(format!("percentile {p} outside (0, 100]")));
        }
    }
    let model = InferenceModel::new(g)?;
    let mut stats = CalibrationStats::new(mode);
    for x in inputs {
        let mut probe = |name: &str, t: &Tensor| stats.record(name, t);
        model.forward_probed(x, &mut probe)?;
        stats.end_frame();
    }
    Ok(stats)
}

/// Letterboxes each frame to the model input size, then calibrates.
pub fn calibrate(g: &ModelGraph, frames: &[Frame], mode: CalibMode) -> Result<CalibrationStats> {
    if frames.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let inputs = frames
        .iter()
        .map(|f| letterbox(f, g.input_size, &[]).map(|(t, _, _)| t))
        .collect::<Result<Vec<_>>>()?;
    calibrate_tensors(g, &inputs, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    fn t(v: Vec<f32>) -> Tensor {
        Tensor::from_f32(Dims::new(1, 1, 1, v.len()), v).unwrap()
    }

    #[test]
    fn percentile_drops_outlier() {
        let mut values: Vec<f32> = (0..100_000).map(|i| (i as f32 / 50_000.0) - 1.0).collect();
        values.push(1000.0);
        let mut s = CalibrationStats::new(CalibMode::Percentile { p: 99.99 });
        s.record("x", &t(values));
        let (lo, hi) = s.get("x").unwrap().range(s.mode);
        assert!((1.0 - 1e-6..2.0).contains(&hi), "hi = {hi}");
        assert_eq!(lo, -1.0);
        let mm = CalibrationStats { mode: CalibMode::MinMax, ..s.clone() };
        assert_eq!(mm.get("x").unwrap().range(mm.mode).1, 1000.0);
    }

    #[test]
    fn merge_equals_joint_recording() {
        let a = t(vec![-3.0, 0.5, 0.25]);
        let b = t(vec![0.1, 9.0]);
        let mode = CalibMode::Percentile { p: 100.0 };
        let mut joint = CalibrationStats::new(mode);
        joint.record("x", &a);
        joint.end_frame();
        joint.record("x", &b);
        joint.end_frame();
        let mut sa = CalibrationStats::new(mode);
        sa.record("x", &a);
        sa.end_frame();
        let mut sb = CalibrationStats::new(mode);
        sb.record("x", &b);
        sb.end_frame();
        let mut ab = sa.clone();
        ab.merge(&sb);
        let mut ba = sb.clone();
        ba.merge(&sa);
        assert_eq!(ab, joint);
        assert_eq!(ba, joint);
        let s = joint.get("x").unwrap();
        assert_eq!((s.min, s.max, s.frames), (-3.0, 9.0, 2));
    }

    #[test]
    fn missing_stats_error() {
        let s = CalibrationStats::new(CalibMode::MinMax);
        assert!(matches!(s.qparams("n3"), Err(Error::MissingStats(_))));
    }
}
