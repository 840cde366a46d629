use serde::{Deserialize, Serialize};

use super::{Frame, LabelBox};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

/// Mid-gray fill for letterbox borders and uncovered augmentation canvas.
pub const PAD_VALUE: u8 = 114;

/// Coordinate bookkeeping between an original frame and its letterboxed
/// square network input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LetterboxMap {
    pub scale: f32,
    pub pad_left: usize,
    pub pad_top: usize,
    pub out_size: usize,
    pub src_width: usize,
    pub src_height: usize,
}

impl LetterboxMap {
    pub fn new(src_width: usize, src_height: usize, target: usize) -> Self {
        let scale = (target as f32 / src_width as f32).min(target as f32 / src_height as f32);
        let (rw, rh) = resized_dims(src_width, src_height, scale);
        LetterboxMap {
            scale,
            pad_left: (target - rw) / 2,
            pad_top: (target - rh) / 2,
            out_size: target,
            src_width,
            src_height,
        }
    }

    pub fn identity(size: usize) -> Self {
        LetterboxMap {
            scale: 1.0,
            pad_left: 0,
            pad_top: 0,
            out_size: size,
            src_width: size,
            src_height: size,
        }
    }

    /// Original-frame pixel coordinates to network-input coordinates.
    pub fn to_input(&self, x: f32, y: f32) -> (f32, f32) {
        (
            x * self.scale + self.pad_left as f32,
            y * self.scale + self.pad_top as f32,
        )
    }

    /// Network-input coordinates back to original-frame pixels.
    pub fn to_source(&self, x: f32, y: f32) -> (f32, f32) {
        (
            (x - self.pad_left as f32) / self.scale,
            (y - self.pad_top as f32) / self.scale,
        )
    }

    pub fn map_label(&self, b: &LabelBox) -> LabelBox {
        let t = self.out_size as f32;
        let (cx, cy) = self.to_input(b.cx * self.src_width as f32, b.cy * self.src_height as f32);
        LabelBox {
            class_id: b.class_id,
            cx: cx / t,
            cy: cy / t,
            w: b.w * self.src_width as f32 * self.scale / t,
            h: b.h * self.src_height as f32 * self.scale / t,
        }
    }
}

fn resized_dims(w: usize, h: usize, scale: f32) -> (usize, usize) {
    (
        ((w as f32 * scale).round() as usize).max(1),
        ((h as f32 * scale).round() as usize).max(1),
    )
}

/// Aspect-preserving bilinear resize (half-pixel centers) into a `target`²
/// canvas padded with [`PAD_VALUE`]; returns the gray canvas.
pub fn letterbox_frame(f: &Frame, target: usize) -> Result<(Frame, LetterboxMap)> {
    if target == 0 || !target.is_multiple_of(32) {
        return Err(Error::invalid(format!(
            "letterbox target {target} must be a positive multiple of 32"
        )));
    }
    if f.width == 0 || f.height == 0 {
        return Err(Error::invalid("cannot letterbox an empty frame"));
    }
    let map = LetterboxMap::new(f.width, f.height, target);
    let (rw, rh) = resized_dims(f.width, f.height, map.scale);
    let mut out = Frame::filled(target, target, PAD_VALUE);
    out.source = f.source.clone();
    let sx = f.width as f32 / rw as f32;
    let sy = f.height as f32 / rh as f32;
    let identity = rw == f.width && rh == f.height;
    for y in 0..rh {
        let dst_row = (y + map.pad_top) * target + map.pad_left;
        if identity {
            out.pixels[dst_row..dst_row + rw]
                .copy_from_slice(&f.pixels[y * f.width..(y + 1) * f.width]);
            continue;
        }
        let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy as usize).min(f.height - 1);
        let y1 = (y0 + 1).min(f.height - 1);
        let wy = fy - y0 as f32;
        for x in 0..rw {
            let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx as usize).min(f.width - 1);
            let x1 = (x0 + 1).min(f.width - 1);
            let wx = fx - x0 as f32;
            let p = |xx: usize, yy: usize| f.pixels[yy * f.width + xx] as f32;
            let top = p(x0, y0) * (1.0 - wx) + p(x1, y0) * wx;
            let bot = p(x0, y1) * (1.0 - wx) + p(x1, y1) * wx;
            let v = top * (1.0 - wy) + bot * wy;
            out.pixels[dst_row + x] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok((out, map))
}

/// Letterboxes a frame into a (1, 3, target, target) tensor in [0, 1] with
/// the gray channel replicated, remapping labels through the same transform.
pub fn letterbox(
    f: &Frame,
    target: usize,
    labels: &[LabelBox],
) -> Result<(Tensor, Vec<LabelBox>, LetterboxMap)> {
    let (canvas, map) = letterbox_frame(f, target)?;
    let plane: Vec<f32> = canvas.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    let tensor = Tensor::from_f32(Dims::new(1, 3, target, target), data)?;
    let labels = labels.iter().map(|b| map.map_label(b)).collect();
    Ok((tensor, labels, map))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vga_pads_top_and_bottom() {
        let f = Frame::filled(640, 480, 30);
        let (t, _, map) = letterbox(&f, 640, &[]).unwrap();
        assert_eq!(map.scale, 1.0);
        assert_eq!((map.pad_left, map.pad_top), (0, 80));
        assert_eq!(640 - 480 - map.pad_top, 80);
        assert_eq!(t.dims(), Dims::new(1, 3, 640, 640));
        assert_eq!(t.at(0, 0, 79, 10), 114.0 / 255.0);
        assert_eq!(t.at(0, 2, 80, 10), 30.0 / 255.0);
        assert_eq!(t.at(0, 1, 560, 10), 114.0 / 255.0);
    }

    #[test]
    fn square_input_is_identity() {
        let mut f = Frame::filled(640, 640, 0);
        f.set(3, 5, 99);
        let (canvas, map) = letterbox_frame(&f, 640).unwrap();
        assert_eq!(map, LetterboxMap::identity(640));
        assert_eq!(canvas.pixels, f.pixels);
    }

    #[test]
    fn centered_label_stays_centered() {
        let f = Frame::filled(640, 480, 0);
        let l = LabelBox {
            class_id: 1,
            cx: 0.5,
            cy: 0.5,
            w: 0.1,
            h: 0.2,
        };
        let (_, labels, _) = letterbox(&f, 640, &[l]).unwrap();
        assert_eq!(labels[0].cy, (0.5 * 480.0 + 80.0) / 640.0);
        assert_eq!(labels[0].cy, 0.5);
        assert!((labels[0].h - 0.2 * 480.0 / 640.0).abs() < 1e-7);
    }

    #[test]
    fn downscale_map_inverts() {
        let map = LetterboxMap::new(1280, 720, 416);
        for &(x, y) in &[(0.0, 0.0), (1279.0, 719.0), (640.5, 13.25)] {
            let (ix, iy) = map.to_input(x, y);
            let (bx, by) = map.to_source(ix, iy);
            assert!((bx - x).abs() <= 0.5 && (by - y).abs() <= 0.5);
        }
    }

    #[test]
    fn target_must_be_multiple_of_32() {
        assert!(letterbox_frame(&Frame::filled(8, 8, 0), 100).is_err());
    }
}
