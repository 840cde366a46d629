//! Thermal frame ingestion, YOLO text labels, letterboxing, augmentation and
//! dataset splitting.

mod annotate;
mod augment;
mod letterbox;
mod split;
mod synthetic;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use annotate::{annotate, class_color, RgbImage, PALETTE};
pub use augment::{augment, Augment};
pub use letterbox::{letterbox, letterbox_frame, LetterboxMap, PAD_VALUE};
pub use split::{read_id_list, split_dataset, write_id_list};
pub use synthetic::synthetic_scene;

/// 8-bit grayscale frame. 16-bit sources are normalized on load.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub source: String,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, source: impl Into<String>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{} pixels do not fill a {width}x{height} frame",
                pixels.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            pixels,
            source: source.into(),
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Frame {
            width,
            height,
            pixels: vec![value; width * height],
            source: String::new(),
        }
    }

    /// Min-max normalizes 16-bit samples to 8 bits; a constant frame maps to zeros.
    pub fn from_gray16(width: usize, height: usize, samples: &[u16], source: impl Into<String>) -> Result<Self> {
        if samples.len() != width * height {
            return Err(Error::shape(format!(
                "{} samples do not fill a {width}x{height} frame",
                samples.len()
            )));
        }
        let lo = samples.iter().copied().min().unwrap_or(0);
        let hi = samples.iter().copied().max().unwrap_or(0);
        let pixels = if hi == lo {
            vec![0; samples.len()]
        } else {
            let range = (hi - lo) as f64;
            samples
                .iter()
                .map(|&v| ((v - lo) as f64 * 255.0 / range).round() as u8)
                .collect()
        };
        Frame::new(width, height, pixels, source)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }
}

/// Reads an 8- or 16-bit grayscale PGM (P5) or PNG.
pub fn load_frame(path: impl AsRef<Path>) -> Result<Frame> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes, source)
    } else if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(&bytes, source)
    } else {
        Err(Error::UnsupportedFormat(format!(
            "{}: not a binary PGM or PNG",
            path.display()
        )))
    }
}

pub fn decode_pgm(bytes: &[u8], source: String) -> Result<Frame> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments between header tokens.
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Corrupt("PGM header ends early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Corrupt("bad PGM header field".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Corrupt("PGM header missing separator".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    let n = width * height;
    let body = &bytes[pos..];
    match maxval {
        1..=255 => {
            if body.len() < n {
                return Err(Error::Corrupt("PGM pixel data truncated".into()));
            }
            Frame::new(width, height, body[..n].to_vec(), source)
        }
        256..=65535 => {
            if body.len() < 2 * n {
                return Err(Error::Corrupt("PGM pixel data truncated".into()));
            }
            let samples: Vec<u16> = body[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect();
            Frame::from_gray16(width, height, &samples, source)
        }
        _ => Err(Error::Corrupt(format!("PGM maxval {maxval} out of range"))),
    }
}

fn decode_png(bytes: &[u8], source: String) -> Result<Frame> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Corrupt(format!("PNG: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Corrupt(format!("PNG: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "PNG color type {other:?} (grayscale required)"
            )))
        }
    };
    let data = &buf[..info.buffer_size()];
    match info.bit_depth {
        png::BitDepth::Sixteen => {
            let samples: Vec<u16> = data
                .chunks_exact(2 * channels)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect();
            Frame::from_gray16(w, h, &samples, source)
        }
        _ => Frame::new(w, h, data.iter().step_by(channels).copied().collect(), source),
    }
}

/// Writes a frame as binary PGM, or as 8-bit grayscale PNG when the path ends in `.png`.
pub fn save_frame(frame: &Frame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let mut enc = png::Encoder::new(&mut out, frame.width as u32, frame.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Corrupt(format!("PNG: {e}")))?;
        w.write_image_data(&frame.pixels)
            .map_err(|e| Error::Corrupt(format!("PNG: {e}")))?;
        w.finish().map_err(|e| Error::Corrupt(format!("PNG: {e}")))?;
        Ok(())
    } else {
        write!(out, "P5\n{} {}\n255\n", frame.width, frame.height)
            .and_then(|_| out.write_all(&frame.pixels))
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// A ground-truth box in normalized center-size coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelBox {
    pub class_id: usize,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl LabelBox {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }

    /// Corner coordinates in pixels of a `width x height` frame.
    pub fn to_pixels(&self, width: usize, height: usize) -> [f32; 4] {
        let (fw, fh) = (width as f32, height as f32);
        [
            (self.cx - self.w / 2.0) * fw,
            (self.cy - self.h / 2.0) * fh,
            (self.cx + self.w / 2.0) * fw,
            (self.cy + self.h / 2.0) * fh,
        ]
    }

    /// Clips pixel corners to the frame and normalizes; `None` when the
    /// clipped box covers less than `min_area` square pixels.
    pub fn from_pixels(
        class_id: usize,
        corners: [f32; 4],
        width: usize,
        height: usize,
        min_area: f32,
    ) -> Option<LabelBox> {
        let (fw, fh) = (width as f32, height as f32);
        let x1 = corners[0].clamp(0.0, fw);
        let y1 = corners[1].clamp(0.0, fh);
        let x2 = corners[2].clamp(0.0, fw);
        let y2 = corners[3].clamp(0.0, fh);
        let (bw, bh) = (x2 - x1, y2 - y1);
        if !(bw > 0.0 && bh > 0.0) || bw * bh < min_area {
            return None;
        }
        let b = LabelBox {
            class_id,
            cx: ((x1 + x2) / 2.0 / fw).clamp(0.0, 1.0),
            cy: ((y1 + y2) / 2.0 / fh).clamp(0.0, 1.0),
            w: (bw / fw).min(1.0),
            h: (bh / fh).min(1.0),
        };
        b.is_valid().then_some(b)
    }
}

/// Parses YOLO label text: one `class cx cy w h` line per box.
pub fn parse_labels(text: &str) -> Result<Vec<LabelBox>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Corrupt(format!("label line {}: {line:?}", i + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            let class_id = f[0].parse::<usize>().map_err(|_| bad())?;
            let v: Vec<f32> = f[1..]
                .iter()
                .map(|s| s.parse::<f32>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let b = LabelBox {
                class_id,
                cx: v[0],
                cy: v[1],
                w: v[2],
                h: v[3],
            };
            if b.is_valid() {
                Ok(b)
            } else {
                Err(bad())
            }
        })
        .collect()
}

pub fn format_labels(labels: &[LabelBox]) -> String {
    labels
        .iter()
        .map(|b| format!("{} {:.6} {:.6} {:.6} {:.6}\n", b.class_id, b.cx, b.cy, b.w, b.h))
        .collect()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelBox>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

pub fn write_labels(labels: &[LabelBox], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_labels(labels)).map_err(|e| Error::io(path, e))
}
