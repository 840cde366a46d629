use std::collections::BTreeMap;

use super::calib::CalibrationStats;
use super::qconv::{
    qadd, qconcat, qconv2d, qconv2d_dequant, qmaxpool2d, qupsample_nearest2x, QConv, SiluLut,
};
use super::quantize_tensor;
use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::netgraph::format::GraphDesc;
use crate::netgraph::{ConvBlock, ModelGraph, NodeKind};
use crate::tensor::{ConvSpec, Dims, QuantParams, Tensor};

/// Conv followed by an optional SiLU table. With an activation the conv
/// requantizes to the pre-activation parameters and the table maps to the
/// block output parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QBlock {
    pub conv: QConv,
    pub act: Option<SiluLut>,
}

impl QBlock {
    pub fn output(&self) -> QuantParams {
        self.act.as_ref().map_or(self.conv.output, |l| l.output)
    }

    fn run(&self, x: &Tensor) -> Result<Tensor> {
        let y = qconv2d(x, &self.conv)?;
        match &self.act {
            Some(lut) => lut.apply(&y),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QBottleneck {
    pub cv1: QBlock,
    pub cv2: QBlock,
    /// Output parameters of the residual sum, when the shortcut is active.
    pub add: Option<QuantParams>,
}

impl QBottleneck {
    fn output(&self) -> QuantParams {
        self.add.unwrap_or_else(|| self.cv2.output())
    }

    fn run(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.cv2.run(&self.cv1.run(x)?)?;
        match self.add {
            Some(qp) => qadd(&y, x, qp),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QNode {
    Conv(QBlock),
    Bottleneck(QBottleneck),
    C3 {
        cv1: QBlock,
        cv2: QBlock,
        cv3: QBlock,
        m: Vec<QBottleneck>,
        cat: QuantParams,
    },
    Sppf {
        cv1: QBlock,
        cv2: QBlock,
        k: usize,
        cat: QuantParams,
    },
    Upsample,
    Concat {
        out: QuantParams,
    },
    Detect {
        convs: Vec<QConv>,
    },
}

impl QNode {
    /// Every conv in storage order: cv1, cv2, cv3, then each bottleneck's
    /// cv1 and cv2; Detect convs last.
    pub fn convs(&self) -> Vec<&QConv> {
        match self {
            QNode::Conv(b) => vec![&b.conv],
            QNode::Bottleneck(b) => vec![&b.cv1.conv, &b.cv2.conv],
            QNode::C3 { cv1, cv2, cv3, m, .. } => {
                let mut v = vec![&cv1.conv, &cv2.conv, &cv3.conv];
                for b in m {
                    v.push(&b.cv1.conv);
                    v.push(&b.cv2.conv);
                }
                v
            }
            QNode::Sppf { cv1, cv2, .. } => vec![&cv1.conv, &cv2.conv],
            QNode::Upsample | QNode::Concat { .. } => Vec::new(),
            QNode::Detect { convs } => convs.iter().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QNodeEntry {
    pub id: usize,
    pub inputs: Vec<usize>,
    pub node: QNode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub(crate) desc: GraphDesc,
    pub nodes: Vec<QNodeEntry>,
    pub input: QuantParams,
    /// Every activation tensor's parameters, keyed by probe name.
    pub qparams: BTreeMap<String, QuantParams>,
    pub num_classes: usize,
    pub input_size: usize,
    pub anchors: AnchorSet,
    pub class_names: Vec<String>,
}

/// Source of quantized conv arrays while assembling a model.
pub(crate) type ConvSource<'a> = dyn FnMut(&ConvSpec, QuantParams, QuantParams) -> Result<QConv> + 'a;

struct Builder<'a, 'b> {
    lookup: &'a dyn Fn(&str) -> Result<QuantParams>,
    make: &'a mut ConvSource<'b>,
    used: BTreeMap<String, QuantParams>,
}

impl Builder<'_, '_> {
    fn qp(&mut self, name: &str) -> Result<QuantParams> {
        let qp = (self.lookup)(name)?;
        self.used.insert(name.to_string(), qp);
        Ok(qp)
    }

    fn block(&mut self, b: &ConvBlock, name: &str, input: QuantParams) -> Result<QBlock> {
        if b.bn.is_some() {
            return Err(Error::invalid("quantization expects a batch-norm-folded graph"));
        }
        if b.act {
            let pre = self.qp(&format!("{name}.pre"))?;
            let out = self.qp(name)?;
            Ok(QBlock {
                conv: (self.make)(&b.conv, input, pre)?,
                act: Some(SiluLut::new(pre, out)),
            })
        } else {
            let out = self.qp(name)?;
            Ok(QBlock {
                conv: (self.make)(&b.conv, input, out)?,
                act: None,
            })
        }
    }

    fn bottleneck(
        &mut self,
        b: &crate::netgraph::Bottleneck,
        name: &str,
        input: QuantParams,
    ) -> Result<QBottleneck> {
        let cv1 = self.block(&b.cv1, &format!("{name}.cv1"), input)?;
        let cv2 = self.block(&b.cv2, &format!("{name}.cv2"), cv1.output())?;
        let add = if b.adds() { Some(self.qp(name)?) } else { None };
        Ok(QBottleneck { cv1, cv2, add })
    }
}

impl QuantizedModel {
    /// Assembles a model from a folded graph; `make` supplies each conv's
    /// integer arrays (quantized from float or read from a file).
    pub(crate) fn assemble(
        fused: &ModelGraph,
        lookup: &dyn Fn(&str) -> Result<QuantParams>,
        make: &mut ConvSource<'_>,
    ) -> Result<Self> {
        fused.validate()?;
        let mut b = Builder {
            lookup,
            make,
            used: BTreeMap::new(),
        };
        let input = b.qp("input")?;
        let mut out_qp: Vec<QuantParams> = Vec::with_capacity(fused.nodes.len());
        let mut nodes = Vec::with_capacity(fused.nodes.len());
        for n in &fused.nodes {
            let name = format!("n{}", n.id);
            let in_qp = n.inputs.first().map_or(input, |&i| out_qp[i]);
            let (node, out) = match &n.kind {
                NodeKind::ConvBnAct(block) => {
                    let q = b.block(block, &name, in_qp)?;
                    let o = q.output();
                    (QNode::Conv(q), o)
                }
                NodeKind::Bottleneck(bn) => {
                    let q = b.bottleneck(bn, &name, in_qp)?;
                    let o = q.output();
                    (QNode::Bottleneck(q), o)
                }
                NodeKind::C3(c) => {
                    // Storage order (cv1, cv2, cv3, bottlenecks), which the
                    // file reader depends on.
                    let cv1 = b.block(&c.cv1, &format!("{name}.cv1"), in_qp)?;
                    let cv2 = b.block(&c.cv2, &format!("{name}.cv2"), in_qp)?;
                    let cat = b.qp(&format!("{name}.cat"))?;
                    let cv3 = b.block(&c.cv3, &format!("{name}.cv3"), cat)?;
                    let mut cur = cv1.output();
                    let mut m = Vec::with_capacity(c.m.len());
                    for (j, bn) in c.m.iter().enumerate() {
                        let q = b.bottleneck(bn, &format!("{name}.m{j}"), cur)?;
                        cur = q.output();
                        m.push(q);
                    }
                    let o = cv3.output();
                    (QNode::C3 { cv1, cv2, cv3, m, cat }, o)
                }
                NodeKind::Sppf(s) => {
                    let cv1 = b.block(&s.cv1, &format!("{name}.cv1"), in_qp)?;
                    let cat = b.qp(&format!("{name}.cat"))?;
                    let cv2 = b.block(&s.cv2, &format!("{name}.cv2"), cat)?;
                    let o = cv2.output();
                    (QNode::Sppf { cv1, cv2, k: s.k, cat }, o)
                }
                NodeKind::Upsample => (QNode::Upsample, in_qp),
                NodeKind::Concat => {
                    let out = b.qp(&name)?;
                    (QNode::Concat { out }, out)
                }
                NodeKind::Detect(d) => {
                    let mut convs = Vec::with_capacity(d.convs.len());
                    for (k, (spec, &i)) in d.convs.iter().zip(&n.inputs).enumerate() {
                        let head = b.qp(&format!("{name}.h{k}"))?;
                        convs.push((b.make)(spec, out_qp[i], head)?);
                    }
                    (QNode::Detect { convs }, in_qp)
                }
            };
            out_qp.push(out);
            nodes.push(QNodeEntry {
                id: n.id,
                inputs: n.inputs.clone(),
                node,
            });
        }
        Ok(QuantizedModel {
            desc: GraphDesc::of(fused),
            nodes,
            input,
            qparams: b.used,
            num_classes: fused.num_classes,
            input_size: fused.input_size,
            anchors: fused.anchors.clone(),
            class_names: fused.class_names.clone(),
        })
    }

    /// Float graph with every conv replaced by its dequantized counterpart.
    pub fn dequantized(&self) -> Result<ModelGraph> {
        let mut g = self.desc.skeleton()?;
        for (n, q) in g.nodes.iter_mut().zip(&self.nodes) {
            let convs = q.node.convs();
            let targets: Vec<&mut ConvSpec> = match &mut n.kind {
                NodeKind::Detect(d) => d.convs.iter_mut().collect(),
                kind => kind.conv_blocks_mut().into_iter().map(|b| &mut b.conv).collect(),
            };
            if targets.len() != convs.len() {
                return Err(Error::Corrupt("quantized node does not match its graph node".into()));
            }
            for (t, c) in targets.into_iter().zip(convs) {
                *t = c.dequantized();
            }
        }
        g.validate()?;
        Ok(g)
    }

    pub fn forward(&self, input: &Tensor) -> Result<[Tensor; 3]> {
        quantized_forward(self, input)
    }
}

/// Folds batch-norm, then quantizes weights and fixes every activation's
/// parameters from `stats`.
pub fn quantize_model(g: &ModelGraph, stats: &CalibrationStats) -> Result<QuantizedModel> {
    let fused = if g.is_fused() { g.clone() } else { g.fused()? };
    let lookup = |name: &str| stats.qparams(name);
    let mut make = |spec: &ConvSpec, i: QuantParams, o: QuantParams| QConv::from_float(spec, i, o);
    QuantizedModel::assemble(&fused, &lookup, &mut make)
}

/// Quantizes the input, runs the integer graph and returns f32 heads.
pub fn quantized_forward(qm: &QuantizedModel, input: &Tensor) -> Result<[Tensor; 3]> {
    let expected = Dims::new(1, 3, qm.input_size, qm.input_size);
    if input.dims() != expected {
        return Err(Error::shape(format!("model expects input {expected}, got {}", input.dims())));
    }
    let x = quantize_tensor(input, qm.input)?;
    let mut last_use = vec![0usize; qm.nodes.len()];
    for n in &qm.nodes {
        for &i in &n.inputs {
            last_use[i] = n.id;
        }
    }
    let mut outputs: Vec<Option<Tensor>> = vec![None; qm.nodes.len()];
    for n in &qm.nodes {
        let fetch = |i: usize| outputs[i].as_ref().ok_or_else(|| Error::Corrupt("node read before it ran".into()));
        let first = match n.inputs.first() {
            Some(&i) => fetch(i)?,
            None => &x,
        };
        let out = match &n.node {
            QNode::Conv(b) => b.run(first)?,
            QNode::Bottleneck(b) => b.run(first)?,
            QNode::C3 { cv1, cv2, cv3, m, cat } => {
                let mut a = cv1.run(first)?;
                for b in m {
                    a = b.run(&a)?;
                }
                let c = cv2.run(first)?;
                cv3.run(&qconcat(&a, &c, *cat)?)?
            }
            QNode::Sppf { cv1, cv2, k, cat } => {
                let x0 = cv1.run(first)?;
                let pad = k / 2;
                let y1 = qmaxpool2d(&x0, *k, 1, pad)?;
                let y2 = qmaxpool2d(&y1, *k, 1, pad)?;
                let y3 = qmaxpool2d(&y2, *k, 1, pad)?;
                let c = qconcat(&qconcat(&qconcat(&x0, &y1, *cat)?, &y2, *cat)?, &y3, *cat)?;
                cv2.run(&c)?
            }
            QNode::Upsample => qupsample_nearest2x(first)?,
            QNode::Concat { out } => {
                let mut acc = fetch(n.inputs[0])?.clone();
                for &i in &n.inputs[1..] {
                    acc = qconcat(&acc, fetch(i)?, *out)?;
                }
                acc
            }
            QNode::Detect { convs } => {
                let mut heads = Vec::with_capacity(3);
                for (conv, &i) in convs.iter().zip(&n.inputs) {
                    heads.push(qconv2d_dequant(fetch(i)?, conv)?);
                }
                let [a, b, c]: [Tensor; 3] = heads
                    .try_into()
                    .map_err(|_| Error::Corrupt("Detect must have three heads".into()))?;
                return Ok([a, b, c]);
            }
        };
        for &i in &n.inputs {
            if last_use[i] == n.id {
                outputs[i] = None;
            }
        }
        outputs[n.id] = Some(out);
    }
    Err(Error::Corrupt("quantized graph has no Detect node".into()))
}
