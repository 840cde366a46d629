use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Frame, LabelBox, PAD_VALUE};
use crate::error::{Error, Result};

/// Boxes smaller than this after clipping (in square pixels) are dropped.
pub const MIN_BOX_AREA: f32 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augment {
    /// Horizontal mirror.
    FlipH,
    /// Rotation about the frame center, counter-clockwise in degrees, on a
    /// canvas of the same size.
    Rotate { degrees: f32 },
    /// Zoom by a factor drawn from `scale` and shift by up to `translate`
    /// of the frame size, then crop back to the original size.
    ScaleCrop { scale: (f32, f32), translate: f32 },
    /// Four frames tiled around a random center, cropped to `target`².
    Mosaic4 { target: usize },
}

/// Applies one geometric augmentation, carrying labels through the same
/// transform. Pixels are resampled nearest-neighbor; uncovered canvas is
/// filled with [`PAD_VALUE`].
pub fn augment(
    frames: &[Frame],
    labels: &[Vec<LabelBox>],
    kind: &Augment,
    seed: u64,
) -> Result<(Frame, Vec<LabelBox>)> {
    if frames.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} frames but {} label sets",
            frames.len(),
            labels.len()
        )));
    }
    let single = || -> Result<(&Frame, &[LabelBox])> {
        if frames.len() != 1 {
            return Err(Error::invalid(format!(
                "{kind:?} takes exactly one frame, got {}",
                frames.len()
            )));
        }
        Ok((&frames[0], &labels[0]))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        Augment::FlipH => {
            let (f, l) = single()?;
            Ok(flip_h(f, l))
        }
        Augment::Rotate { degrees } => {
            let (f, l) = single()?;
            let t = Affine::rotation(*degrees, f.width as f32 / 2.0, f.height as f32 / 2.0);
            Ok(warp(f, l, &t))
        }
        Augment::ScaleCrop { scale, translate } => {
            let (f, l) = single()?;
            if !(scale.0 > 0.0 && scale.0 <= scale.1) {
                return Err(Error::invalid("scale range must be positive and ordered"));
            }
            let s = if scale.0 == scale.1 {
                scale.0
            } else {
                rng.gen_range(scale.0..scale.1)
            };
            let tr = translate.abs();
            let mut shift = |len: usize| {
                if tr > 0.0 {
                    rng.gen_range(-tr..tr) * len as f32
                } else {
                    0.0
                }
            };
            let (tx, ty) = (shift(f.width), shift(f.height));
            let (cx, cy) = (f.width as f32 / 2.0, f.height as f32 / 2.0);
            let t = Affine {
                m: [[s, 0.0], [0.0, s]],
                t: [cx - s * cx + tx, cy - s * cy + ty],
            };
            Ok(warp(f, l, &t))
        }
        Augment::Mosaic4 { target } => {
            if frames.len() != 4 {
                return Err(Error::invalid(format!(
                    "mosaic4 needs exactly 4 frames, got {}",
                    frames.len()
                )));
            }
            if *target == 0 {
                return Err(Error::invalid("mosaic target must be positive"));
            }
            Ok(mosaic4(frames, labels, *target, &mut rng))
        }
    }
}

fn flip_h(f: &Frame, labels: &[LabelBox]) -> (Frame, Vec<LabelBox>) {
    let mut out = f.clone();
    for row in out.pixels.chunks_exact_mut(f.width.max(1)) {
        row.reverse();
    }
    let labels = labels
        .iter()
        .map(|b| LabelBox { cx: 1.0 - b.cx, ..*b })
        .collect();
    (out, labels)
}

/// `p' = m·p + t` in continuous pixel coordinates (pixel centers at i + 0.5).
#[derive(Clone, Copy, Debug)]
struct Affine {
    m: [[f32; 2]; 2],
    t: [f32; 2],
}

impl Affine {
    fn rotation(degrees: f32, cx: f32, cy: f32) -> Self {
        let (s, c) = exact_sin_cos(degrees);
        let m = [[c, s], [-s, c]];
        Affine {
            m,
            t: [cx - c * cx - s * cy, cy + s * cx - c * cy],
        }
    }

    fn apply(&self, x: f32, y: f32) -> (f32, f32) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.t[0],
            self.m[1][0] * x + self.m[1][1] * y + self.t[1],
        )
    }

    fn inverse(&self) -> Affine {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        let m = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(m[0][0] * self.t[0] + m[0][1] * self.t[1]),
            -(m[1][0] * self.t[0] + m[1][1] * self.t[1]),
        ];
        Affine { m, t }
    }
}

/// sin/cos with quarter turns snapped to exact values, so 90° rotations
/// permute pixels without resampling error.
fn exact_sin_cos(degrees: f32) -> (f32, f32) {
    let d = degrees.rem_euclid(360.0);
    if d.fract() == 0.0 && (d as u32).is_multiple_of(90) {
        return match d as u32 {
            0 => (0.0, 1.0),
            90 => (1.0, 0.0),
            180 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        };
    }
    let r = (d as f64).to_radians();
    (r.sin() as f32, r.cos() as f32)
}

fn warp(f: &Frame, labels: &[LabelBox], fwd: &Affine) -> (Frame, Vec<LabelBox>) {
    let inv = fwd.inverse();
    let mut out = Frame::filled(f.width, f.height, PAD_VALUE);
    out.source = f.source.clone();
    for y in 0..f.height {
        for x in 0..f.width {
            let (sx, sy) = inv.apply(x as f32 + 0.5, y as f32 + 0.5);
            let (ix, iy) = (sx.floor(), sy.floor());
            if ix >= 0.0 && iy >= 0.0 && (ix as usize) < f.width && (iy as usize) < f.height {
                out.pixels[y * f.width + x] = f.get(ix as usize, iy as usize);
            }
        }
    }
    let labels = labels
        .iter()
        .filter_map(|b| {
            let [x1, y1, x2, y2] = b.to_pixels(f.width, f.height);
            let corners = [
                fwd.apply(x1, y1),
                fwd.apply(x2, y1),
                fwd.apply(x1, y2),
                fwd.apply(x2, y2),
            ];
            let hull = corners.iter().fold(
                [f32::INFINITY, f32::INFINITY, f32::NEG_INFINITY, f32::NEG_INFINITY],
                |h, &(x, y)| [h[0].min(x), h[1].min(y), h[2].max(x), h[3].max(y)],
            );
            LabelBox::from_pixels(b.class_id, hull, f.width, f.height, MIN_BOX_AREA)
        })
        .collect();
    (out, labels)
}

fn resize_nearest(f: &Frame, w: usize, h: usize) -> Frame {
    let mut out = Frame::filled(w, h, 0);
    for y in 0..h {
        let sy = (y * f.height / h).min(f.height - 1);
        for x in 0..w {
            let sx = (x * f.width / w).min(f.width - 1);
            out.pixels[y * w + x] = f.get(sx, sy);
        }
    }
    out
}

fn mosaic4(
    frames: &[Frame],
    labels: &[Vec<LabelBox>],
    target: usize,
    rng: &mut ChaCha8Rng,
) -> (Frame, Vec<LabelBox>) {
    let s = target;
    let canvas_side = 2 * s;
    let mut canvas = Frame::filled(canvas_side, canvas_side, PAD_VALUE);
    let xc = rng.gen_range(s / 2..=s + s / 2);
    let yc = rng.gen_range(s / 2..=s + s / 2);
    // Canvas-space boxes before the final crop.
    let mut boxes: Vec<(usize, [f32; 4])> = Vec::new();

    for (i, (f, ls)) in frames.iter().zip(labels).enumerate() {
        let r = s as f32 / f.width.max(f.height) as f32;
        let w = ((f.width as f32 * r).round() as usize).max(1);
        let h = ((f.height as f32 * r).round() as usize).max(1);
        let tile = resize_nearest(f, w, h);
        // Canvas rectangle (a) and the matching tile rectangle (b).
        let (x1a, y1a, x2a, y2a, x1b, y1b) = match i {
            0 => {
                let (x1a, y1a) = (xc.saturating_sub(w), yc.saturating_sub(h));
                (x1a, y1a, xc, yc, w - (xc - x1a), h - (yc - y1a))
            }
            1 => {
                let (y1a, x2a) = (yc.saturating_sub(h), (xc + w).min(canvas_side));
                (xc, y1a, x2a, yc, 0, h - (yc - y1a))
            }
            2 => {
                let (x1a, y2a) = (xc.saturating_sub(w), (yc + h).min(canvas_side));
                (x1a, yc, xc, y2a, w - (xc - x1a), 0)
            }
            _ => {
                let (x2a, y2a) = ((xc + w).min(canvas_side), (yc + h).min(canvas_side));
                (xc, yc, x2a, y2a, 0, 0)
            }
        };
        for y in 0..(y2a - y1a) {
            let src = &tile.pixels[(y1b + y) * w + x1b..(y1b + y) * w + x1b + (x2a - x1a)];
            let dst_start = (y1a + y) * canvas_side + x1a;
            canvas.pixels[dst_start..dst_start + (x2a - x1a)].copy_from_slice(src);
        }
        let padw = x1a as f32 - x1b as f32;
        let padh = y1a as f32 - y1b as f32;
        for b in ls {
            let [bx1, by1, bx2, by2] = b.to_pixels(w, h);
            boxes.push((b.class_id, [bx1 + padw, by1 + padh, bx2 + padw, by2 + padh]));
        }
    }

    let off = s / 2;
    let mut out = Frame::filled(s, s, PAD_VALUE);
    out.source = frames[0].source.clone();
    for y in 0..s {
        let src = (y + off) * canvas_side + off;
        out.pixels[y * s..(y + 1) * s].copy_from_slice(&canvas.pixels[src..src + s]);
    }
    let o = off as f32;
    let labels = boxes
        .into_iter()
        .filter_map(|(c, [x1, y1, x2, y2])| {
            // Clip to the full canvas first (tile extent), then to the crop.
            let cs = canvas_side as f32;
            let clipped = [x1.clamp(0.0, cs), y1.clamp(0.0, cs), x2.clamp(0.0, cs), y2.clamp(0.0, cs)];
            LabelBox::from_pixels(
                c,
                [clipped[0] - o, clipped[1] - o, clipped[2] - o, clipped[3] - o],
                s,
                s,
                MIN_BOX_AREA,
            )
        })
        .collect();
    (out, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Frame {
        let px = (0..w * h).map(|i| (i % 251) as u8).collect();
        Frame::new(w, h, px, "g").unwrap()
    }

    fn lb(class_id: usize, cx: f32, cy: f32, w: f32, h: f32) -> LabelBox {
        LabelBox { class_id, cx, cy, w, h }
    }

    #[test]
    fn flip_is_an_involution() {
        let f = gradient(17, 9);
        let l = vec![lb(2, 0.2, 0.3, 0.1, 0.2)];
        let (f1, l1) = augment(std::slice::from_ref(&f), std::slice::from_ref(&l), &Augment::FlipH, 0).unwrap();
        assert!((l1[0].cx - 0.8).abs() < 1e-6);
        let (f2, l2) = augment(&[f1], &[l1], &Augment::FlipH, 0).unwrap();
        assert_eq!(f2, f);
        assert!((l2[0].cx - 0.2).abs() < 1e-6);
        assert_eq!(l2[0].cy, 0.3);
    }

    #[test]
    fn quarter_turns_permute_pixels() {
        let f = gradient(8, 8);
        let (r1, _) = augment(std::slice::from_ref(&f), &[vec![]], &Augment::Rotate { degrees: 90.0 }, 0).unwrap();
        // Counter-clockwise: the top-right corner moves to the top-left.
        assert_eq!(r1.get(0, 0), f.get(7, 0));
        let mut cur = f.clone();
        for _ in 0..4 {
            cur = augment(&[cur], &[vec![]], &Augment::Rotate { degrees: 90.0 }, 0).unwrap().0;
        }
        assert_eq!(cur, f);
    }

    #[test]
    fn rotated_labels_stay_in_bounds() {
        let f = gradient(64, 48);
        let l = vec![lb(0, 0.9, 0.9, 0.3, 0.3), lb(1, 0.5, 0.5, 0.2, 0.1)];
        let (_, out) = augment(&[f], &[l], &Augment::Rotate { degrees: 30.0 }, 0).unwrap();
        assert!(!out.is_empty());
        assert!(out.iter().all(LabelBox::is_valid));
    }

    #[test]
    fn scale_crop_is_seeded() {
        let f = gradient(32, 32);
        let l = vec![lb(0, 0.5, 0.5, 0.4, 0.4)];
        let kind = Augment::ScaleCrop { scale: (0.5, 1.5), translate: 0.1 };
        let a = augment(std::slice::from_ref(&f), std::slice::from_ref(&l), &kind, 9).unwrap();
        let b = augment(&[f], &[l], &kind, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.1.iter().all(LabelBox::is_valid));
    }

    #[test]
    fn identity_scale_crop() {
        let f = gradient(20, 10);
        let l = vec![lb(3, 0.25, 0.5, 0.2, 0.4)];
        let kind = Augment::ScaleCrop { scale: (1.0, 1.0), translate: 0.0 };
        let (g, out) = augment(std::slice::from_ref(&f), std::slice::from_ref(&l), &kind, 0).unwrap();
        assert_eq!(g, f);
        assert!((out[0].cx - 0.25).abs() < 1e-6 && (out[0].w - 0.2).abs() < 1e-6);
    }

    #[test]
    fn mosaic_of_constant_frames_is_constant() {
        let frames = vec![Frame::filled(64, 64, 40); 4];
        let labels: Vec<Vec<LabelBox>> = (0..4)
            .map(|i| vec![lb(i, 0.5, 0.5, 0.5, 0.5), lb(5, 0.1, 0.1, 0.05, 0.05)])
            .collect();
        let (m, out) = augment(&frames, &labels, &Augment::Mosaic4 { target: 64 }, 3).unwrap();
        assert_eq!((m.width, m.height), (64, 64));
        assert!(m.pixels.iter().all(|&p| p == 40));
        assert!(out.len() <= 8);
        assert!(out.iter().all(LabelBox::is_valid));
    }

    #[test]
    fn mosaic_requires_four_frames() {
        let frames = vec![Frame::filled(8, 8, 0); 3];
        let labels = vec![vec![]; 3];
        assert!(augment(&frames, &labels, &Augment::Mosaic4 { target: 8 }, 0).is_err());
    }
}
