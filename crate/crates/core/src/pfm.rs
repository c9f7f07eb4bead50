//! Portable float map (PFM) images, RGB, little-endian, rows bottom to top
//! on disk and top to bottom in memory.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, top row first.
    pub pixels: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("PF\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for y in (0..self.height).rev() {
            for p in &self.pixels[y * self.width..(y + 1) * self.width] {
                for c in p {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Parse("truncated PFM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        let channels = match fields[0].as_str() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(Error::Parse(format!("not a PFM file: {other}"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("PFM size {s:?}: {e}")));
        let (width, height) = (num(&fields[1])?, num(&fields[2])?);
        let scale: f32 = fields[3]
            .parse()
            .map_err(|e| Error::Parse(format!("PFM scale: {e}")))?;
        let need = width * height * channels * 4;
        let data = bytes.get(pos..pos + need).ok_or_else(|| Error::Truncated("PFM pixels".into()))?;
        let read = |i: usize| {
            let b = [data[4 * i], data[4 * i + 1], data[4 * i + 2], data[4 * i + 3]];
            if scale < 0.0 {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        };
        let mut img = Self::new(width, height);
        for row in 0..height {
            let y = height - 1 - row;
            for x in 0..width {
                let k = (row * width + x) * channels;
                img.pixels[y * width + x] = if channels == 3 {
                    [read(k), read(k + 1), read(k + 2)]
                } else {
                    [read(k); 3]
                };
            }
        }
        Ok(img)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut img = RgbImage::new(3, 2);
        img.pixels[1] = [1.0, 2.0, 3.0];
        img.pixels[5] = [-0.5, 1e-3, 7.0];
        let back = RgbImage::from_bytes(&img.to_bytes()).unwrap();
        assert_eq!(back, img);
        assert!(RgbImage::from_bytes(b"P6\n1 1\n255\n").is_err());
        assert!(RgbImage::from_bytes(b"PF\n2 2\n-1.0\n1234").is_err());
    }
}
