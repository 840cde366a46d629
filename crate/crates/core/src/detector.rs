//! Frame-level detection with either the float or the int8 model.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::bench::ms;
use crate::error::{Error, Result};
use crate::imaging::{letterbox, Frame};
use crate::netgraph::{InferenceModel, ModelGraph};
use crate::postprocess::{postprocess_with, DecodeStats, Detection, PostprocessConfig};
use crate::quantize::{quantized_forward, QuantizedModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Detector {
    Float(InferenceModel),
    Quantized(QuantizedModel),
}

/// Wall time of each pipeline stage for one frame, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub letterbox_ms: f64,
    pub forward_ms: f64,
    pub postprocess_ms: f64,
}

impl StageTimes {
    pub fn total_ms(&self) -> f64 {
        self.letterbox_ms + self.forward_ms + self.postprocess_ms
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameDetections {
    pub detections: Vec<Detection>,
    pub decode: DecodeStats,
    pub times: StageTimes,
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::invalid(format!("size must be a multiple of 32, got {size}")));
    }
    Ok(())
}

impl Detector {
    pub fn from_graph(g: &ModelGraph) -> Result<Self> {
        Ok(Detector::Float(InferenceModel::new(g)?))
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Detector::Quantized(_))
    }

    pub fn input_size(&self) -> usize {
        match self {
            Detector::Float(m) => m.graph().input_size,
            Detector::Quantized(q) => q.input_size,
        }
    }

    pub fn anchors(&self) -> &AnchorSet {
        match self {
            Detector::Float(m) => &m.graph().anchors,
            Detector::Quantized(q) => &q.anchors,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Detector::Float(m) => m.graph().num_classes,
            Detector::Quantized(q) => q.num_classes,
        }
    }

    pub fn class_names(&self) -> &[String] {
        match self {
            Detector::Float(m) => &m.graph().class_names,
            Detector::Quantized(q) => &q.class_names,
        }
    }

    /// Same weights run at another square input size.
    pub fn with_input_size(&self, size: usize) -> Result<Self> {
        check_size(size)?;
        Ok(match self {
            Detector::Float(m) => {
                let mut g = m.graph().clone();
                g.input_size = size;
                Detector::Float(InferenceModel::new(&g)?)
            }
            Detector::Quantized(q) => {
                let mut q = q.clone();
                q.input_size = size;
                q.desc.input_size = size;
                Detector::Quantized(q)
            }
        })
    }

    pub fn forward(&self, input: &Tensor) -> Result<[Tensor; 3]> {
        match self {
            Detector::Float(m) => m.forward(input),
            Detector::Quantized(q) => quantized_forward(q, input),
        }
    }

    /// Letterbox, forward and postprocess one frame; boxes come back in the
    /// frame's own pixel coordinates.
    pub fn detect(&self, frame: &Frame, cfg: &PostprocessConfig) -> Result<FrameDetections> {
        let t0 = Instant::now();
        let (input, _, map) = letterbox(frame, self.input_size(), &[])?;
        let t1 = Instant::now();
        let heads = self.forward(&input)?;
        let t2 = Instant::now();
        let (detections, decode) = postprocess_with(&heads, self.anchors(), cfg, &map)?;
        let t3 = Instant::now();
        Ok(FrameDetections {
            detections,
            decode,
            times: StageTimes {
                letterbox_ms: ms(t1 - t0),
                forward_ms: ms(t2 - t1),
                postprocess_ms: ms(t3 - t2),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::build_yolov5n;

    #[test]
    fn resized_detector_keeps_weights() {
        let mut g = build_yolov5n(6, 64, AnchorSet::default()).unwrap();
        g.randomize(1);
        let d = Detector::from_graph(&g).unwrap();
        let d2 = d.with_input_size(96).unwrap();
        assert_eq!(d2.input_size(), 96);
        assert!(d.with_input_size(100).is_err());
        let frame = Frame::filled(120, 80, 90);
        let out = d2.detect(&frame, &PostprocessConfig::default()).unwrap();
        for det in &out.detections {
            assert!(det.x1 >= 0.0 && det.x2 <= 120.0 && det.y2 <= 80.0);
        }
        assert!(out.times.total_ms() > 0.0);
    }
}
