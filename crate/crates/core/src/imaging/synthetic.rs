//! Deterministic thermal-like test scenes: a cool noisy background with
//! warm objects whose aspect ratio depends on the class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Frame, LabelBox};

/// Typical (w, h) of each default class as a fraction of the frame height.
const CLASS_SHAPES: [(f32, f32); 6] = [
    (0.08, 0.25), // person
    (0.30, 0.14), // car
    (0.03, 0.40), // pole
    (0.10, 0.12), // bike
    (0.45, 0.22), // bus
    (0.12, 0.14), // bicycle
];

pub fn synthetic_scene(width: usize, height: usize, num_classes: usize, seed: u64) -> (Frame, Vec<LabelBox>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = rng.gen_range(30.0..80.0f32);
    let tilt = rng.gen_range(-20.0..20.0f32);
    let mut frame = Frame::filled(width, height, 0);
    for y in 0..height {
        for x in 0..width {
            let v = base + tilt * y as f32 / height as f32 + rng.gen_range(-6.0..6.0f32);
            frame.set(x, y, v.clamp(0.0, 255.0) as u8);
        }
    }
    let count = rng.gen_range(1..=5);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.gen_range(0..num_classes.max(1));
        let (sw, sh) = CLASS_SHAPES[class_id % CLASS_SHAPES.len()];
        let jitter = rng.gen_range(0.7..1.3f32);
        let bw = (sw * jitter * height as f32).clamp(3.0, width as f32 * 0.9);
        let bh = (sh * jitter * height as f32).clamp(3.0, height as f32 * 0.9);
        let cx = rng.gen_range(bw / 2.0..width as f32 - bw / 2.0);
        let cy = rng.gen_range(bh / 2.0..height as f32 - bh / 2.0);
        let heat = rng.gen_range(150.0..250.0f32);
        let (x0, x1) = ((cx - bw / 2.0) as usize, ((cx + bw / 2.0) as usize).min(width));
        let (y0, y1) = ((cy - bh / 2.0) as usize, ((cy + bh / 2.0) as usize).min(height));
        for y in y0..y1 {
            for x in x0..x1 {
                // Elliptical falloff so blobs read as warm bodies.
                let dx = (x as f32 + 0.5 - cx) / (bw / 2.0);
                let dy = (y as f32 + 0.5 - cy) / (bh / 2.0);
                let r2 = dx * dx + dy * dy;
                if r2 <= 1.0 {
                    let v = heat * (1.0 - 0.4 * r2) + rng.gen_range(-4.0..4.0f32);
                    frame.set(x, y, v.clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(LabelBox {
            class_id,
            cx: cx / width as f32,
            cy: cy / height as f32,
            w: bw / width as f32,
            h: bh / height as f32,
        });
    }
    frame.source = format!("synthetic-{seed}");
    (frame, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let (a, la) = synthetic_scene(160, 120, 6, 9);
        let (b, lb) = synthetic_scene(160, 120, 6, 9);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(!la.is_empty() && la.iter().all(|l| l.is_valid()));
        assert_ne!(synthetic_scene(160, 120, 6, 10).0, a);
    }
}
