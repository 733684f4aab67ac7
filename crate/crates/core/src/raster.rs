//! In-memory RGB images and binary masks plus 8-bit PNG / PNM I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| quantize(*v as f64)).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self { width, height, data: bytes.iter().map(|b| *b as f32 / 255.0).collect() }
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        if has_ext(path, "ppm") {
            return write_pnm(path, b"P6", self.width, self.height, &bytes);
        }
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        if has_ext(path, "ppm") {
            let (w, h, bytes) = read_pnm(path, b"P6", 3)?;
            return Ok(Self::from_bytes(w, h, &bytes));
        }
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_bytes(img.width() as usize, img.height() as usize, img.as_raw()))
    }
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn filled(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![true; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    /// Inclusive pixel range `(min_x, min_y, max_x, max_y)` of set pixels.
    pub fn extent(&self) -> Option<(usize, usize, usize, usize)> {
        let mut ext: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    ext = Some(match ext {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        ext
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(&other.data) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().map(|v| if *v { 255 } else { 0 }).collect();
        if has_ext(path, "pgm") {
            return write_pnm(path, b"P5", self.width, self.height, &bytes);
        }
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ExtendedColorType::L8)?;
        Ok(())
    }

    /// Loads an 8-bit gray mask; any nonzero value is foreground.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let (w, h, bytes) = if has_ext(path, "pgm") {
            read_pnm(path, b"P5", 1)?
        } else {
            let img = image::open(path)?.to_luma8();
            (img.width() as usize, img.height() as usize, img.into_raw())
        };
        Ok(Self { width: w, height: h, data: bytes.iter().map(|b| *b != 0).collect() })
    }
}

/// `round(255 v)` clamped to the byte range.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

fn has_ext(path: &Path, ext: &str) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn write_pnm(path: &Path, magic: &[u8], w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(bytes.len() + 32);
    out.extend_from_slice(magic);
    out.extend_from_slice(format!("\n{w} {h}\n255\n").as_bytes());
    out.extend_from_slice(bytes);
    fs::write(path, out)?;
    Ok(())
}

fn read_pnm(path: &Path, magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if !bytes.starts_with(magic) {
        return Err(Error::Format(format!("{}: expected {} header", path.display(), String::from_utf8_lossy(magic))));
    }
    // three whitespace-separated header fields, comments allowed
    let mut fields = Vec::new();
    let mut i = magic.len();
    while fields.len() < 3 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        let field: usize = std::str::from_utf8(&bytes[start..i])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("{}: malformed header", path.display())))?;
        fields.push(field);
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!("{}: only 8-bit maxval supported", path.display())));
    }
    i += 1;
    let (w, h) = (fields[0], fields[1]);
    let expected = i + w * h * channels;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile { expected, found: bytes.len() });
    }
    Ok((w, h, bytes[i..expected].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_image() -> RgbImage {
        let mut img = RgbImage::new(5, 3);
        for y in 0..3 {
            for x in 0..5 {
                img.set(x, y, [x as f32 / 4.0, y as f32 / 2.0, 17.0 / 255.0]);
            }
        }
        RgbImage::from_bytes(5, 3, &img.to_bytes())
    }

    #[test]
    fn png_and_ppm_are_lossless_for_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let img = sample_image();
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            img.save(&p).unwrap();
            assert_eq!(RgbImage::load(&p).unwrap(), img);
        }
        let mut m = Mask::new(4, 4);
        m.set(1, 2, true);
        m.set(3, 0, true);
        for name in ["m.png", "m.pgm"] {
            let p = dir.path().join(name);
            m.save(&p).unwrap();
            assert_eq!(Mask::load(&p).unwrap(), m);
        }
        assert_eq!(m.extent(), Some((1, 0, 3, 2)));
    }

    #[test]
    fn quantization_rounds() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(-0.1), 0);
        assert_eq!(quantize(1.2), 255);
    }
}
