//! TYM1 model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "TYM1"
//! version    u32      1
//! desc_len   u32      length of the description block
//! desc       UTF-8    JSON graph description (nodes, geometry, anchors, classes)
//! count      u64      number of f32 values that follow
//! payload    f32 × count, per node in order, per conv block in storage order:
//!                     weights, then γ β mean var when batch-norm is present,
//!                     otherwise the bias; Detect convs store weights + bias
//! crc32      u32      CRC-32 (IEEE) of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bottleneck, ConvBlock, Detect, ModelGraph, Multiples, Node, NodeKind, Sppf, C3};
use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::tensor::{BatchNorm, ConvSpec};

pub const TYM1_MAGIC: [u8; 4] = *b"TYM1";
pub const TYM1_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct ConvDesc {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 2],
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn_eps: Option<f32>,
    pub act: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct BottleneckDesc {
    pub cv1: ConvDesc,
    pub cv2: ConvDesc,
    pub shortcut: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub(crate) enum KindDesc {
    ConvBnAct {
        conv: ConvDesc,
    },
    Bottleneck(BottleneckDesc),
    C3 {
        cv1: ConvDesc,
        cv2: ConvDesc,
        cv3: ConvDesc,
        m: Vec<BottleneckDesc>,
    },
    Sppf {
        cv1: ConvDesc,
        cv2: ConvDesc,
        k: usize,
    },
    Upsample,
    Concat,
    Detect {
        convs: Vec<ConvDesc>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct NodeDesc {
    pub id: usize,
    pub inputs: Vec<usize>,
    #[serde(flatten)]
    pub kind: KindDesc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct GraphDesc {
    pub num_classes: usize,
    pub input_size: usize,
    pub class_names: Vec<String>,
    pub anchors: AnchorSet,
    pub multiples: Multiples,
    pub nodes: Vec<NodeDesc>,
}

fn conv_desc(spec: &ConvSpec, bn: Option<&BatchNorm>, act: bool) -> ConvDesc {
    ConvDesc {
        in_ch: spec.in_ch,
        out_ch: spec.out_ch,
        kernel: [spec.kernel.0, spec.kernel.1],
        stride: spec.stride,
        padding: spec.padding,
        groups: spec.groups,
        bn_eps: bn.map(|b| b.eps),
        act,
    }
}

fn block_desc(b: &ConvBlock) -> ConvDesc {
    conv_desc(&b.conv, b.bn.as_ref(), b.act)
}

fn bottleneck_desc(b: &Bottleneck) -> BottleneckDesc {
    BottleneckDesc {
        cv1: block_desc(&b.cv1),
        cv2: block_desc(&b.cv2),
        shortcut: b.shortcut,
    }
}

impl GraphDesc {
    pub(crate) fn of(g: &ModelGraph) -> Self {
        let nodes = g
            .nodes
            .iter()
            .map(|n| NodeDesc {
                id: n.id,
                inputs: n.inputs.clone(),
                kind: match &n.kind {
                    NodeKind::ConvBnAct(b) => KindDesc::ConvBnAct {
                        conv: block_desc(b),
                    },
                    NodeKind::Bottleneck(b) => KindDesc::Bottleneck(bottleneck_desc(b)),
                    NodeKind::C3(c) => KindDesc::C3 {
                        cv1: block_desc(&c.cv1),
                        cv2: block_desc(&c.cv2),
                        cv3: block_desc(&c.cv3),
                        m: c.m.iter().map(bottleneck_desc).collect(),
                    },
                    NodeKind::Sppf(s) => KindDesc::Sppf {
                        cv1: block_desc(&s.cv1),
                        cv2: block_desc(&s.cv2),
                        k: s.k,
                    },
                    NodeKind::Upsample => KindDesc::Upsample,
                    NodeKind::Concat => KindDesc::Concat,
                    NodeKind::Detect(d) => KindDesc::Detect {
                        convs: d.convs.iter().map(|c| conv_desc(c, None, false)).collect(),
                    },
                },
            })
            .collect();
        GraphDesc {
            num_classes: g.num_classes,
            input_size: g.input_size,
            class_names: g.class_names.clone(),
            anchors: g.anchors.clone(),
            multiples: g.multiples.clone(),
            nodes,
        }
    }

    /// Rebuilds the graph with zeroed weights; `fill` then supplies each
    /// conv block's values in storage order.
    pub(crate) fn skeleton(&self) -> Result<ModelGraph> {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let kind = match &n.kind {
                KindDesc::ConvBnAct { conv } => NodeKind::ConvBnAct(block_from(conv)?),
                KindDesc::Bottleneck(b) => NodeKind::Bottleneck(bottleneck_from(b)?),
                KindDesc::C3 { cv1, cv2, cv3, m } => NodeKind::C3(C3 {
                    cv1: block_from(cv1)?,
                    cv2: block_from(cv2)?,
                    cv3: block_from(cv3)?,
                    m: m.iter().map(bottleneck_from).collect::<Result<_>>()?,
                }),
                KindDesc::Sppf { cv1, cv2, k } => NodeKind::Sppf(Sppf {
                    cv1: block_from(cv1)?,
                    cv2: block_from(cv2)?,
                    k: *k,
                }),
                KindDesc::Upsample => NodeKind::Upsample,
                KindDesc::Concat => NodeKind::Concat,
                KindDesc::Detect { convs } => NodeKind::Detect(Detect {
                    convs: convs.iter().map(spec_from).collect::<Result<_>>()?,
                }),
            };
            nodes.push(Node {
                id: n.id,
                inputs: n.inputs.clone(),
                kind,
            });
        }
        let g = ModelGraph {
            nodes,
            num_classes: self.num_classes,
            anchors: self.anchors.clone(),
            input_size: self.input_size,
            class_names: self.class_names.clone(),
            multiples: self.multiples.clone(),
        };
        g.validate()?;
        Ok(g)
    }
}

fn spec_from(d: &ConvDesc) -> Result<ConvSpec> {
    let spec = ConvSpec {
        in_ch: d.in_ch,
        out_ch: d.out_ch,
        kernel: (d.kernel[0], d.kernel[1]),
        stride: d.stride,
        padding: d.padding,
        groups: d.groups,
        weights: vec![0.0; d.out_ch * (d.in_ch / d.groups.max(1)) * d.kernel[0] * d.kernel[1]],
        bias: vec![0.0; d.out_ch],
    };
    spec.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
    Ok(spec)
}

fn block_from(d: &ConvDesc) -> Result<ConvBlock> {
    Ok(ConvBlock {
        conv: spec_from(d)?,
        bn: d.bn_eps.map(|eps| BatchNorm::identity(d.out_ch, eps)),
        act: d.act,
    })
}

fn bottleneck_from(d: &BottleneckDesc) -> Result<Bottleneck> {
    Ok(Bottleneck {
        cv1: block_from(&d.cv1)?,
        cv2: block_from(&d.cv2)?,
        shortcut: d.shortcut,
    })
}

/// Visits every f32 array of the graph in payload order.
fn for_each_array<'a>(g: &'a ModelGraph, mut f: impl FnMut(&'a [f32])) {
    for node in &g.nodes {
        for block in node.kind.conv_blocks() {
            f(&block.conv.weights);
            match &block.bn {
                Some(bn) => {
                    f(&bn.gamma);
                    f(&bn.beta);
                    f(&bn.mean);
                    f(&bn.var);
                }
                None => f(&block.conv.bias),
            }
        }
        if let NodeKind::Detect(d) = &node.kind {
            for c in &d.convs {
                f(&c.weights);
                f(&c.bias);
            }
        }
    }
}

fn for_each_array_mut(g: &mut ModelGraph, mut f: impl FnMut(&mut [f32]) -> Result<()>) -> Result<()> {
    for node in &mut g.nodes {
        if let NodeKind::Detect(d) = &mut node.kind {
            for c in &mut d.convs {
                f(&mut c.weights)?;
                f(&mut c.bias)?;
            }
            continue;
        }
        for block in node.kind.conv_blocks_mut() {
            f(&mut block.conv.weights)?;
            match &mut block.bn {
                Some(bn) => {
                    f(&mut bn.gamma)?;
                    f(&mut bn.beta)?;
                    f(&mut bn.mean)?;
                    f(&mut bn.var)?;
                }
                None => f(&mut block.conv.bias)?,
            }
        }
    }
    Ok(())
}

/// Serialized description block + header prefix shared with TYQ1.
pub(crate) fn write_header(buf: &mut Vec<u8>, magic: [u8; 4], version: u32, desc: &[u8]) {
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&version.to_le_bytes());
    buf.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    buf.extend_from_slice(desc);
}

pub fn to_bytes(g: &ModelGraph) -> Result<Vec<u8>> {
    g.validate()?;
    let desc = serde_json::to_vec_pretty(&GraphDesc::of(g))
        .map_err(|e| Error::Corrupt(format!("cannot encode description: {e}")))?;
    let mut count = 0usize;
    for_each_array(g, |a| count += a.len());
    let mut buf = Vec::with_capacity(desc.len() + 4 * count + 32);
    write_header(&mut buf, TYM1_MAGIC, TYM1_VERSION, &desc);
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    for_each_array(g, |a| {
        for v in a {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Little-endian cursor over a checked file body.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt(what.into()))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Verifies magic and trailing CRC, returning the body (without CRC) and
/// the description bytes.
pub(crate) fn open_checked<'a>(
    bytes: &'a [u8],
    magic: [u8; 4],
    version: u32,
) -> Result<(Reader<'a>, &'a [u8])> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("file shorter than magic".into()));
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated("file shorter than header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    let mut r = Reader::new(body);
    r.take(4, "magic")?;
    let v = r.u32("version")?;
    let desc_len = r.u32("description length")? as usize;
    let desc = r.take(desc_len, "description");
    // A truncated file fails the length walk before the checksum is blamed.
    let desc = desc?;
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if v != version {
        return Err(Error::UnsupportedFormat(format!(
            "{} version {v} (supported: {version})",
            String::from_utf8_lossy(&magic)
        )));
    }
    Ok((r, desc))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    let (mut r, desc) = open_checked(bytes, TYM1_MAGIC, TYM1_VERSION)?;
    let desc: GraphDesc = serde_json::from_slice(desc)
        .map_err(|e| Error::Corrupt(format!("bad description block: {e}")))?;
    let mut g = desc.skeleton()?;
    let count = r.u64("payload length")? as usize;
    let mut expected = 0usize;
    for_each_array(&g, |a| expected += a.len());
    if count != expected {
        return Err(Error::Corrupt(format!(
            "payload holds {count} values, graph needs {expected}"
        )));
    }
    for_each_array_mut(&mut g, |a| {
        let vals = r.f32s(a.len(), "weights")?;
        a.copy_from_slice(&vals);
        Ok(())
    })?;
    if !r.is_done() {
        return Err(Error::Corrupt("trailing bytes after payload".into()));
    }
    g.validate()?;
    Ok(g)
}

pub fn save_model(g: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(g)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
