//! Detection overlays: 1-px class-colored rectangles with the class id and
//! score drawn in a 3×5 raster font.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::Frame;
use crate::error::{Error, Result};
use crate::postprocess::Detection;

pub const PALETTE: [[u8; 3]; 8] = [
    [255, 56, 56],
    [72, 249, 10],
    [0, 194, 255],
    [255, 178, 29],
    [207, 210, 49],
    [255, 55, 199],
    [146, 204, 23],
    [61, 219, 134],
];

/// 3×5 glyphs, one row per byte using the low three bits (MSB on the left).
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        ':' => [0b000, 0b010, 0b000, 0b010, 0b000],
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn from_gray(f: &Frame) -> Self {
        RgbImage {
            width: f.width,
            height: f.height,
            pixels: f.pixels.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.pixels[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn rect(&mut self, x1: i64, y1: i64, x2: i64, y2: i64, c: [u8; 3]) {
        for x in x1..=x2 {
            self.put(x, y1, c);
            self.put(x, y2, c);
        }
        for y in y1..=y2 {
            self.put(x1, y, c);
            self.put(x2, y, c);
        }
    }

    /// Draws `text` with its top-left corner at (x, y); unknown characters
    /// advance without drawing.
    pub fn text(&mut self, x: i64, y: i64, text: &str, c: [u8; 3]) {
        for (k, ch) in text.chars().enumerate() {
            let Some(rows) = glyph(ch) else { continue };
            let ox = x + 4 * k as i64;
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..3 {
                    if row & (0b100 >> dx) != 0 {
                        self.put(ox + dx, y + dy as i64, c);
                    }
                }
            }
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Corrupt(format!("PNG: {e}"));
        let mut w = enc.write_header().map_err(png_err)?;
        w.write_image_data(&self.pixels).map_err(png_err)?;
        w.finish().map_err(png_err)
    }
}

pub fn class_color(class_id: usize) -> [u8; 3] {
    PALETTE[class_id % PALETTE.len()]
}

/// Frame with every detection outlined and labelled "class:score".
pub fn annotate(frame: &Frame, dets: &[Detection]) -> RgbImage {
    let mut img = RgbImage::from_gray(frame);
    for d in dets {
        let c = class_color(d.class_id);
        let (x1, y1) = (d.x1.floor() as i64, d.y1.floor() as i64);
        let (x2, y2) = ((d.x2.ceil() as i64 - 1).max(x1), (d.y2.ceil() as i64 - 1).max(y1));
        img.rect(x1, y1, x2, y2, c);
        let ty = if y1 >= 6 { y1 - 6 } else { y1 + 2 };
        img.text(x1 + 1, ty, &format!("{}:{:.2}", d.class_id, d.score), c);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangle_outline_only() {
        let f = Frame::filled(40, 30, 10);
        let d = Detection { x1: 10.0, y1: 12.0, x2: 20.0, y2: 22.0, class_id: 1, score: 0.5 };
        let img = annotate(&f, &[d]);
        assert_eq!(img.get(10, 15), PALETTE[1]);
        assert_eq!(img.get(19, 21), PALETTE[1]);
        assert_eq!(img.get(15, 16), [10, 10, 10]);
        assert_eq!(img.get(25, 25), [10, 10, 10]);
    }

    #[test]
    fn digits_render() {
        let mut img = RgbImage::from_gray(&Frame::filled(12, 6, 0));
        img.text(0, 0, "1", [9, 9, 9]);
        assert_eq!(img.get(1, 0), [9, 9, 9]);
        assert_eq!(img.get(0, 0), [0, 0, 0]);
        img.text(0, 0, "x", [1, 1, 1]);
    }
}
