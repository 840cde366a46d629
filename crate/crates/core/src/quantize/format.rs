//! TYQ1 quantized model files.
//!
//! Same header framing as TYM1 (magic, version, description block, CRC-32
//! trailer). The description holds the folded graph plus the activation
//! parameter table; the payload stores, per conv in node storage order:
//!
//! ```text
//! w_scales  f32 × out_ch
//! bias      i32 × out_ch
//! weights   i8  × out_ch · fan_in
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::QuantizedModel;
use super::qconv::QConv;
use crate::error::{Error, Result};
use crate::netgraph::format::{open_checked, write_header, GraphDesc, Reader};
use crate::tensor::{ConvSpec, QuantParams};

pub const TYQ1_MAGIC: [u8; 4] = *b"TYQ1";
pub const TYQ1_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct QDesc {
    graph: GraphDesc,
    weight_dtype: String,
    activations: BTreeMap<String, QuantParams>,
}

pub fn qmodel_to_bytes(qm: &QuantizedModel) -> Result<Vec<u8>> {
    let desc = QDesc {
        graph: qm.desc.clone(),
        weight_dtype: "int8".into(),
        activations: qm.qparams.clone(),
    };
    let desc = serde_json::to_vec(&desc)
        .map_err(|e| Error::Corrupt(format!("cannot encode description: {e}")))?;
    let mut buf = Vec::new();
    write_header(&mut buf, TYQ1_MAGIC, TYQ1_VERSION, &desc);
    let convs: Vec<&QConv> = qm.nodes.iter().flat_map(|n| n.node.convs()).collect();
    buf.extend_from_slice(&(convs.len() as u64).to_le_bytes());
    for c in convs {
        for s in &c.w_scales {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        for b in &c.bias {
            buf.extend_from_slice(&b.to_le_bytes());
        }
        buf.extend(c.weights.iter().map(|&w| w as u8));
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn read_conv(r: &mut Reader<'_>, spec: &ConvSpec, input: QuantParams, output: QuantParams) -> Result<QConv> {
    let w_scales = r.f32s(spec.out_ch, "weight scales")?;
    let bias = r
        .take(4 * spec.out_ch, "bias")?
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let weights = r
        .take(spec.weight_len(), "weights")?
        .iter()
        .map(|&b| b as i8)
        .collect();
    let q = QConv {
        in_ch: spec.in_ch,
        out_ch: spec.out_ch,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        groups: spec.groups,
        weights,
        w_scales,
        bias,
        input,
        output,
    };
    q.validate()?;
    Ok(q)
}

pub fn qmodel_from_bytes(bytes: &[u8]) -> Result<QuantizedModel> {
    let (mut r, desc) = open_checked(bytes, TYQ1_MAGIC, TYQ1_VERSION)?;
    let desc: QDesc = serde_json::from_slice(desc)
        .map_err(|e| Error::Corrupt(format!("bad description block: {e}")))?;
    if desc.weight_dtype != "int8" {
        return Err(Error::UnsupportedFormat(format!("weight dtype {}", desc.weight_dtype)));
    }
    let skeleton = desc.graph.skeleton()?;
    let count = r.u64("conv count")? as usize;
    let activations = desc.activations;
    let lookup = |name: &str| {
        let qp = *activations
            .get(name)
            .ok_or_else(|| Error::MissingStats(name.to_string()))?;
        qp.validate().map_err(|_| Error::Corrupt(format!("bad parameters for {name}")))?;
        Ok(qp)
    };
    let mut seen = 0usize;
    let qm = {
        let mut make = |spec: &ConvSpec, i: QuantParams, o: QuantParams| {
            seen += 1;
            read_conv(&mut r, spec, i, o)
        };
        QuantizedModel::assemble(&skeleton, &lookup, &mut make)?
    };
    if seen != count {
        return Err(Error::Corrupt(format!("file lists {count} convs, graph has {seen}")));
    }
    if !r.is_done() {
        return Err(Error::Corrupt("trailing bytes after payload".into()));
    }
    Ok(qm)
}

pub fn save_quantized(qm: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, qmodel_to_bytes(qm)?).map_err(|e| Error::io(path, e))
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    qmodel_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::AnchorSet;
    use crate::netgraph::{build_yolov5n, format::to_bytes};
    use crate::quantize::{calibrate_tensors, quantize_model, CalibMode};
    use crate::tensor::{Dims, Tensor};

    fn qmodel(size: usize) -> (QuantizedModel, usize) {
        let mut g = build_yolov5n(6, size, AnchorSet::default()).unwrap();
        g.randomize(5);
        let x = Tensor::full(Dims::new(1, 3, size, size), 0.5);
        let stats = calibrate_tensors(&g, &[x], CalibMode::MinMax).unwrap();
        (quantize_model(&g, &stats).unwrap(), to_bytes(&g).unwrap().len())
    }

    #[test]
    fn bit_exact_roundtrip_and_size() {
        let (qm, tym1_len) = qmodel(64);
        let bytes = qmodel_to_bytes(&qm).unwrap();
        let back = qmodel_from_bytes(&bytes).unwrap();
        assert_eq!(back, qm);
        assert_eq!(qmodel_to_bytes(&back).unwrap(), bytes);
        assert!(bytes.len() as f64 <= tym1_len as f64 / 3.5, "{} vs {}", bytes.len(), tym1_len);
    }

    #[test]
    fn corruption_detected() {
        let (qm, _) = qmodel(64);
        let mut bytes = qmodel_to_bytes(&qm).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(qmodel_from_bytes(&bytes), Err(Error::Checksum { .. })));
        let mut wrong = qmodel_to_bytes(&qm).unwrap();
        wrong[3] = b'X';
        assert!(matches!(qmodel_from_bytes(&wrong), Err(Error::BadMagic { .. })));
    }
}
