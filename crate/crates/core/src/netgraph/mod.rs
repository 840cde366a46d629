//! The nano detector as an explicit node graph: topology, forward inference,
//! parameter accounting and the TYM1 weight file.

mod exec;
pub mod format;
mod topology;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::tensor::{fold_batchnorm, BatchNorm, ConvSpec};

pub use exec::{forward, InferenceModel, Probe};
pub use format::{load_model, save_model};
pub use topology::{build_yolov5n, scale_channels, scale_depth, DEPTH_MULTIPLE, WIDTH_MULTIPLE};

/// Batch-norm epsilon used by the nano recipe.
pub const BN_EPS: f32 = 1e-3;

pub const DEFAULT_CLASS_NAMES: [&str; 6] = ["person", "car", "pole", "bike", "bus", "bicycle"];

pub const HEAD_STRIDES: [usize; 3] = [8, 16, 32];

/// Conv, optional batch-norm, optional SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: ConvSpec,
    pub bn: Option<BatchNorm>,
    pub act: bool,
}

impl ConvBlock {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Result<Self> {
        Self::with_padding(in_ch, out_ch, k, stride, k / 2)
    }

    pub fn with_padding(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(ConvBlock {
            conv: ConvSpec::zeros(in_ch, out_ch, k, stride, padding, 1)?,
            bn: Some(BatchNorm::identity(out_ch, BN_EPS)),
            act: true,
        })
    }

    pub fn out_ch(&self) -> usize {
        self.conv.out_ch
    }

    /// Trainable parameters: a BN-equipped conv carries no bias of its own.
    pub fn param_count(&self) -> usize {
        let w = self.conv.weight_len();
        match &self.bn {
            Some(bn) => w + 2 * bn.channels(),
            None => w + self.conv.out_ch,
        }
    }

    pub fn fused(&self) -> Result<ConvBlock> {
        let conv = match &self.bn {
            Some(bn) => fold_batchnorm(&self.conv, bn)?,
            None => self.conv.clone(),
        };
        Ok(ConvBlock {
            conv,
            bn: None,
            act: self.act,
        })
    }

    fn validate(&self) -> Result<()> {
        self.conv.validate()?;
        if let Some(bn) = &self.bn {
            bn.validate(self.conv.out_ch)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub shortcut: bool,
}

impl Bottleneck {
    /// The residual add only applies when input and output widths agree.
    pub fn adds(&self) -> bool {
        self.shortcut && self.cv1.conv.in_ch == self.cv2.out_ch()
    }
}

/// CSP bottleneck stack with three convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct C3 {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub cv3: ConvBlock,
    pub m: Vec<Bottleneck>,
}

/// Spatial pyramid pooling, fast variant: three cascaded k×k max-pools.
#[derive(Clone, Debug, PartialEq)]
pub struct Sppf {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub k: usize,
}

/// One 1×1 conv (with bias) per detection scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Detect {
    pub convs: Vec<ConvSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    ConvBnAct(ConvBlock),
    Bottleneck(Bottleneck),
    C3(C3),
    Sppf(Sppf),
    Upsample,
    Concat,
    Detect(Detect),
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::ConvBnAct(_) => "ConvBNAct",
            NodeKind::Bottleneck(_) => "Bottleneck",
            NodeKind::C3(_) => "C3",
            NodeKind::Sppf(_) => "SPPF",
            NodeKind::Upsample => "Upsample",
            NodeKind::Concat => "Concat",
            NodeKind::Detect(_) => "Detect",
        }
    }

    /// Conv blocks in storage order. Detect convs are reported separately.
    pub fn conv_blocks(&self) -> Vec<&ConvBlock> {
        match self {
            NodeKind::ConvBnAct(c) => vec![c],
            NodeKind::Bottleneck(b) => vec![&b.cv1, &b.cv2],
            NodeKind::C3(c) => {
                let mut v = vec![&c.cv1, &c.cv2, &c.cv3];
                for b in &c.m {
                    v.push(&b.cv1);
                    v.push(&b.cv2);
                }
                v
            }
            NodeKind::Sppf(s) => vec![&s.cv1, &s.cv2],
            NodeKind::Upsample | NodeKind::Concat | NodeKind::Detect(_) => vec![],
        }
    }

    pub fn conv_blocks_mut(&mut self) -> Vec<&mut ConvBlock> {
        match self {
            NodeKind::ConvBnAct(c) => vec![c],
            NodeKind::Bottleneck(b) => vec![&mut b.cv1, &mut b.cv2],
            NodeKind::C3(c) => {
                let mut v = vec![&mut c.cv1, &mut c.cv2, &mut c.cv3];
                for b in &mut c.m {
                    v.push(&mut b.cv1);
                    v.push(&mut b.cv2);
                }
                v
            }
            NodeKind::Sppf(s) => vec![&mut s.cv1, &mut s.cv2],
            NodeKind::Upsample | NodeKind::Concat | NodeKind::Detect(_) => vec![],
        }
    }
}

/// A graph node. An empty `inputs` list means the node reads the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: usize,
    pub inputs: Vec<usize>,
    pub kind: NodeKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Multiples {
    pub depth: f32,
    pub width: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub nodes: Vec<Node>,
    pub num_classes: usize,
    pub anchors: AnchorSet,
    pub input_size: usize,
    pub class_names: Vec<String>,
    pub multiples: Multiples,
}

impl ModelGraph {
    pub fn empty(num_classes: usize, input_size: usize, anchors: AnchorSet) -> Self {
        ModelGraph {
            nodes: Vec::new(),
            num_classes,
            anchors,
            input_size,
            class_names: default_class_names(num_classes),
            multiples: Multiples {
                depth: 1.0,
                width: 1.0,
            },
        }
    }

    /// Channels per anchor in a head output: box (4) + objectness + classes.
    pub fn outputs_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn detect(&self) -> Option<&Detect> {
        self.nodes.iter().find_map(|n| match &n.kind {
            NodeKind::Detect(d) => Some(d),
            _ => None,
        })
    }

    /// Checks topological order, input arity and the single-Detect rule.
    pub fn validate(&self) -> Result<()> {
        let mut detects = 0;
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.id != idx {
                return Err(Error::Corrupt(format!(
                    "node at position {idx} has id {}",
                    node.id
                )));
            }
            if let Some(&bad) = node.inputs.iter().find(|&&i| i >= node.id) {
                return Err(Error::Corrupt(format!(
                    "node {} reads node {bad}, which does not precede it",
                    node.id
                )));
            }
            let arity_ok = match &node.kind {
                NodeKind::Concat => node.inputs.len() >= 2,
                NodeKind::Detect(d) => {
                    detects += 1;
                    if d.convs.len() != 3 {
                        return Err(Error::Corrupt("Detect must own 3 convolutions".into()));
                    }
                    let per = 3 * self.outputs_per_anchor();
                    if let Some(c) = d.convs.iter().find(|c| c.out_ch != per) {
                        return Err(Error::Corrupt(format!(
                            "Detect conv emits {} channels, expected {per}",
                            c.out_ch
                        )));
                    }
                    for c in &d.convs {
                        c.validate()?;
                    }
                    node.inputs.len() == 3
                }
                _ => node.inputs.len() <= 1,
            };
            if !arity_ok {
                return Err(Error::Corrupt(format!(
                    "{} node {} has {} inputs",
                    node.kind.name(),
                    node.id,
                    node.inputs.len()
                )));
            }
            for block in node.kind.conv_blocks() {
                block.validate()?;
            }
        }
        if detects != 1 {
            return Err(Error::Corrupt(format!(
                "graph must contain exactly one Detect node, found {detects}"
            )));
        }
        Ok(())
    }

    /// Copy with every batch-norm folded into its convolution.
    pub fn fused(&self) -> Result<ModelGraph> {
        let mut g = self.clone();
        for node in &mut g.nodes {
            for block in node.kind.conv_blocks_mut() {
                *block = block.fused()?;
            }
        }
        Ok(g)
    }

    pub fn is_fused(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| n.kind.conv_blocks().iter().all(|b| b.bn.is_none()))
    }

    /// Seeded He-style initialization of every conv, with batch-norm
    /// statistics drawn near identity. Used for desk models and tests.
    pub fn randomize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for node in &mut self.nodes {
            for block in node.kind.conv_blocks_mut() {
                let bound = (6.0 / block.conv.fan_in() as f32).sqrt();
                block
                    .conv
                    .weights
                    .iter_mut()
                    .for_each(|w| *w = rng.gen_range(-bound..bound));
                match &mut block.bn {
                    Some(bn) => {
                        for c in 0..bn.channels() {
                            bn.gamma[c] = rng.gen_range(0.8..1.2);
                            bn.beta[c] = rng.gen_range(-0.2..0.2);
                            bn.mean[c] = rng.gen_range(-0.2..0.2);
                            bn.var[c] = rng.gen_range(0.8..1.25);
                        }
                    }
                    None => block
                        .conv
                        .bias
                        .iter_mut()
                        .for_each(|b| *b = rng.gen_range(-0.2..0.2)),
                }
            }
            if let NodeKind::Detect(d) = &mut node.kind {
                let per = 5 + self.num_classes;
                for (conv, stride) in d.convs.iter_mut().zip(HEAD_STRIDES) {
                    let bound = (3.0 / conv.fan_in() as f32).sqrt();
                    conv.weights
                        .iter_mut()
                        .for_each(|w| *w = rng.gen_range(-bound..bound));
                    // Untrained-detector priors: about 8 objects per 640² image
                    // and a near-uniform class distribution.
                    let obj = (8.0 / (640.0 / stride as f32).powi(2)).ln();
                    let cls = (0.6 / (self.num_classes as f32 - 0.99)).ln();
                    for (i, b) in conv.bias.iter_mut().enumerate() {
                        *b = match i % per {
                            4 => obj,
                            k if k >= 5 => cls,
                            _ => rng.gen_range(-0.5..0.5),
                        };
                    }
                }
            }
        }
    }
}

pub fn default_class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|i| {
            DEFAULT_CLASS_NAMES
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("class{i}"))
        })
        .collect()
}

/// Sum of weight and bias elements; batch-norm contributes γ and β
/// (running statistics are buffers, not parameters).
pub fn count_params(g: &ModelGraph) -> usize {
    g.nodes
        .iter()
        .map(|n| {
            let blocks: usize = n.kind.conv_blocks().iter().map(|b| b.param_count()).sum();
            let head: usize = match &n.kind {
                NodeKind::Detect(d) => d.convs.iter().map(|c| c.weight_len() + c.out_ch).sum(),
                _ => 0,
            };
            blocks + head
        })
        .sum()
}
