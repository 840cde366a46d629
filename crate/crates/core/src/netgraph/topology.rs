use super::{
    default_class_names, Bottleneck, ConvBlock, Detect, ModelGraph, Multiples, Node, NodeKind,
    Sppf, C3,
};
use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::tensor::ConvSpec;

pub const DEPTH_MULTIPLE: f32 = 0.33;
pub const WIDTH_MULTIPLE: f32 = 0.25;

/// Repeat count after the depth multiple, never below one.
pub fn scale_depth(n: usize, depth_multiple: f32) -> usize {
    if n > 1 {
        ((n as f32 * depth_multiple).round() as usize).max(1)
    } else {
        n
    }
}

/// Channel width after the width multiple, rounded up to a multiple of 8.
pub fn scale_channels(c: usize, width_multiple: f32) -> usize {
    let scaled = c as f32 * width_multiple;
    ((scaled / 8.0).ceil() as usize) * 8
}

fn c3(c1: usize, c2: usize, n: usize, shortcut: bool) -> Result<C3> {
    let hidden = c2 / 2;
    let m = (0..n)
        .map(|_| {
            Ok(Bottleneck {
                cv1: ConvBlock::new(hidden, hidden, 1, 1)?,
                cv2: ConvBlock::new(hidden, hidden, 3, 1)?,
                shortcut,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(C3 {
        cv1: ConvBlock::new(c1, hidden, 1, 1)?,
        cv2: ConvBlock::new(c1, hidden, 1, 1)?,
        cv3: ConvBlock::new(2 * hidden, c2, 1, 1)?,
        m,
    })
}

fn sppf(c1: usize, c2: usize, k: usize) -> Result<Sppf> {
    let hidden = c1 / 2;
    Ok(Sppf {
        cv1: ConvBlock::new(c1, hidden, 1, 1)?,
        cv2: ConvBlock::new(hidden * 4, c2, 1, 1)?,
        k,
    })
}

/// The nano detector: 6×6/2 stem, C3 backbone, SPPF, PAN neck and three
/// 1×1 detection convs at strides 8, 16 and 32. Weights start at zero with
/// identity batch-norm; see [`ModelGraph::randomize`].
pub fn build_yolov5n(
    num_classes: usize,
    input_size: usize,
    anchors: AnchorSet,
) -> Result<ModelGraph> {
    if num_classes == 0 {
        return Err(Error::invalid("num_classes must be >= 1"));
    }
    if input_size == 0 || !input_size.is_multiple_of(32) {
        return Err(Error::invalid(format!(
            "input size {input_size} must be a positive multiple of 32"
        )));
    }
    let (gd, gw) = (DEPTH_MULTIPLE, WIDTH_MULTIPLE);
    let ch = |c: usize| scale_channels(c, gw);
    let rep = |n: usize| scale_depth(n, gd);
    let (c64, c128, c256, c512, c1024) = (ch(64), ch(128), ch(256), ch(512), ch(1024));

    let mut nodes: Vec<Node> = Vec::new();
    let mut push = |inputs: Vec<usize>, kind: NodeKind| -> usize {
        let id = nodes.len();
        nodes.push(Node { id, inputs, kind });
        id
    };
    let prev = |id: usize| vec![id];

    // backbone
    let p1 = push(
        vec![],
        NodeKind::ConvBnAct(ConvBlock::with_padding(3, c64, 6, 2, 2)?),
    );
    let p2 = push(prev(p1), NodeKind::ConvBnAct(ConvBlock::new(c64, c128, 3, 2)?));
    let b2 = push(prev(p2), NodeKind::C3(c3(c128, c128, rep(3), true)?));
    let p3 = push(prev(b2), NodeKind::ConvBnAct(ConvBlock::new(c128, c256, 3, 2)?));
    let b4 = push(prev(p3), NodeKind::C3(c3(c256, c256, rep(6), true)?));
    let p4 = push(prev(b4), NodeKind::ConvBnAct(ConvBlock::new(c256, c512, 3, 2)?));
    let b6 = push(prev(p4), NodeKind::C3(c3(c512, c512, rep(9), true)?));
    let p5 = push(prev(b6), NodeKind::ConvBnAct(ConvBlock::new(c512, c1024, 3, 2)?));
    let b8 = push(prev(p5), NodeKind::C3(c3(c1024, c1024, rep(3), true)?));
    let spp = push(prev(b8), NodeKind::Sppf(sppf(c1024, c1024, 5)?));

    // neck
    let h10 = push(prev(spp), NodeKind::ConvBnAct(ConvBlock::new(c1024, c512, 1, 1)?));
    let u11 = push(prev(h10), NodeKind::Upsample);
    let cat12 = push(vec![u11, b6], NodeKind::Concat);
    let h13 = push(prev(cat12), NodeKind::C3(c3(2 * c512, c512, rep(3), false)?));
    let h14 = push(prev(h13), NodeKind::ConvBnAct(ConvBlock::new(c512, c256, 1, 1)?));
    let u15 = push(prev(h14), NodeKind::Upsample);
    let cat16 = push(vec![u15, b4], NodeKind::Concat);
    let out_p3 = push(prev(cat16), NodeKind::C3(c3(2 * c256, c256, rep(3), false)?));
    let h18 = push(prev(out_p3), NodeKind::ConvBnAct(ConvBlock::new(c256, c256, 3, 2)?));
    let cat19 = push(vec![h18, h14], NodeKind::Concat);
    let out_p4 = push(prev(cat19), NodeKind::C3(c3(2 * c256, c512, rep(3), false)?));
    let h21 = push(prev(out_p4), NodeKind::ConvBnAct(ConvBlock::new(c512, c512, 3, 2)?));
    let cat22 = push(vec![h21, h10], NodeKind::Concat);
    let out_p5 = push(prev(cat22), NodeKind::C3(c3(2 * c512, c1024, rep(3), false)?));

    let per_head = 3 * (5 + num_classes);
    let convs = [c256, c512, c1024]
        .into_iter()
        .map(|c| ConvSpec::zeros(c, per_head, 1, 1, 0, 1))
        .collect::<Result<Vec<_>>>()?;
    push(
        vec![out_p3, out_p4, out_p5],
        NodeKind::Detect(Detect { convs }),
    );

    let g = ModelGraph {
        nodes,
        num_classes,
        anchors,
        input_size,
        class_names: default_class_names(num_classes),
        multiples: Multiples {
            depth: gd,
            width: gw,
        },
    };
    g.validate()?;
    Ok(g)
}
