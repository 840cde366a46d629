use super::{Bottleneck, ConvBlock, ModelGraph, NodeKind, Sppf, C3};
use crate::error::{Error, Result};
use crate::tensor::{
    concat_channels, conv2d, kernels::activation_inplace, maxpool2d, upsample_nearest2x,
    Activation, Dims, Tensor,
};

/// Receives every named intermediate activation during a forward pass.
///
/// Naming: `input` for the image, `n{id}` for node outputs, and dotted
/// suffixes for block internals (`n4.m0.cv2.pre` is the pre-activation of the
/// second conv in the first bottleneck of node 4). Calibration keys on these.
pub trait Probe {
    fn record(&mut self, name: &str, t: &Tensor);
}

struct NoProbe;

impl Probe for NoProbe {
    fn record(&mut self, _: &str, _: &Tensor) {}
}

impl<F: FnMut(&str, &Tensor)> Probe for F {
    fn record(&mut self, name: &str, t: &Tensor) {
        self(name, t)
    }
}

/// A graph with batch-norm folded, ready for repeated inference.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    graph: ModelGraph,
}

impl InferenceModel {
    pub fn new(g: &ModelGraph) -> Result<Self> {
        g.validate()?;
        let graph = if g.is_fused() { g.clone() } else { g.fused()? };
        Ok(InferenceModel { graph })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn forward(&self, input: &Tensor) -> Result<[Tensor; 3]> {
        self.forward_probed(input, &mut NoProbe)
    }

    pub fn forward_probed(&self, input: &Tensor, probe: &mut dyn Probe) -> Result<[Tensor; 3]> {
        let g = &self.graph;
        let d = input.dims();
        let expected = Dims::new(1, 3, g.input_size, g.input_size);
        if d != expected {
            return Err(Error::shape(format!(
                "model expects input {expected}, got {d}"
            )));
        }
        input.as_f32()?;
        probe.record("input", input);

        let mut outputs: Vec<Option<Tensor>> = vec![None; g.nodes.len()];
        // Last consumer of each node, so activations can be dropped early.
        let mut last_use = vec![0usize; g.nodes.len()];
        for node in &g.nodes {
            for &i in &node.inputs {
                last_use[i] = node.id;
            }
        }

        for node in &g.nodes {
            let name = format!("n{}", node.id);
            let fetch = |i: usize| -> &Tensor { outputs[i].as_ref().expect("topological order") };
            let first = match node.inputs.first() {
                Some(&i) => fetch(i),
                None => input,
            };
            let out = match &node.kind {
                NodeKind::ConvBnAct(block) => conv_block(block, first, &name, probe)?,
                NodeKind::Bottleneck(b) => bottleneck(b, first, &name, probe)?,
                NodeKind::C3(c) => c3(c, first, &name, probe)?,
                NodeKind::Sppf(s) => sppf(s, first, &name, probe)?,
                NodeKind::Upsample => upsample_nearest2x(first)?,
                NodeKind::Concat => {
                    let mut acc = fetch(node.inputs[0]).clone();
                    for &i in &node.inputs[1..] {
                        acc = concat_channels(&acc, fetch(i))?;
                    }
                    acc
                }
                NodeKind::Detect(det) => {
                    let mut heads = Vec::with_capacity(3);
                    for (k, (conv, &i)) in det.convs.iter().zip(&node.inputs).enumerate() {
                        let h = conv2d(fetch(i), conv)?;
                        probe.record(&format!("{name}.h{k}"), &h);
                        heads.push(h);
                    }
                    let [a, b, c]: [Tensor; 3] = heads
                        .try_into()
                        .map_err(|_| Error::Corrupt("Detect must have three heads".into()))?;
                    return Ok([a, b, c]);
                }
            };
            probe.record(&name, &out);
            for &i in &node.inputs {
                if last_use[i] == node.id {
                    outputs[i] = None;
                }
            }
            outputs[node.id] = Some(out);
        }
        Err(Error::Corrupt("graph has no Detect node".into()))
    }
}

/// Convenience one-shot forward pass (folds batch-norm on every call).
pub fn forward(g: &ModelGraph, input: &Tensor) -> Result<[Tensor; 3]> {
    InferenceModel::new(g)?.forward(input)
}

fn conv_block(b: &ConvBlock, x: &Tensor, name: &str, probe: &mut dyn Probe) -> Result<Tensor> {
    let folded;
    let block = if b.bn.is_some() {
        folded = b.fused()?;
        &folded
    } else {
        b
    };
    let mut y = conv2d(x, &block.conv)?;
    if block.act {
        probe.record(&format!("{name}.pre"), &y);
        activation_inplace(&mut y, Activation::Silu)?;
    }
    probe.record(name, &y);
    Ok(y)
}

fn bottleneck(b: &Bottleneck, x: &Tensor, name: &str, probe: &mut dyn Probe) -> Result<Tensor> {
    let y = conv_block(&b.cv1, x, &format!("{name}.cv1"), probe)?;
    let mut y = conv_block(&b.cv2, &y, &format!("{name}.cv2"), probe)?;
    if b.adds() {
        for (o, i) in y.as_f32_mut()?.iter_mut().zip(x.as_f32()?) {
            *o += *i;
        }
    }
    probe.record(name, &y);
    Ok(y)
}

fn c3(c: &C3, x: &Tensor, name: &str, probe: &mut dyn Probe) -> Result<Tensor> {
    let mut a = conv_block(&c.cv1, x, &format!("{name}.cv1"), probe)?;
    for (j, b) in c.m.iter().enumerate() {
        a = bottleneck(b, &a, &format!("{name}.m{j}"), probe)?;
    }
    let b = conv_block(&c.cv2, x, &format!("{name}.cv2"), probe)?;
    let cat = concat_channels(&a, &b)?;
    probe.record(&format!("{name}.cat"), &cat);
    conv_block(&c.cv3, &cat, &format!("{name}.cv3"), probe)
}

fn sppf(s: &Sppf, x: &Tensor, name: &str, probe: &mut dyn Probe) -> Result<Tensor> {
    let x = conv_block(&s.cv1, x, &format!("{name}.cv1"), probe)?;
    let pad = s.k / 2;
    let y1 = maxpool2d(&x, s.k, 1, pad)?;
    let y2 = maxpool2d(&y1, s.k, 1, pad)?;
    let y3 = maxpool2d(&y2, s.k, 1, pad)?;
    let cat = concat_channels(&concat_channels(&concat_channels(&x, &y1)?, &y2)?, &y3)?;
    probe.record(&format!("{name}.cat"), &cat);
    conv_block(&s.cv2, &cat, &format!("{name}.cv2"), probe)
}
