//! Grayscale images and the on-disk raster formats.
//!
//! Images are stored as binary PGM (P5, maxval 255). Depth maps use a 16-byte
//! header (magic `DPTH`, u32 LE width, u32 LE height, 4 reserved zero bytes)
//! followed by row-major little-endian f32 meters.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Row-major grayscale image with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(w: usize, h: usize) -> Self {
        GrayImage { w, h, data: vec![0.0; w * h] }
    }

    pub fn filled(w: usize, h: usize, v: f32) -> Self {
        GrayImage { w, h, data: vec![v; w * h] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.w + x] = v;
    }

    /// Bilinear sample at continuous pixel coordinates, clamped at borders.
    pub fn sample_bilinear(&self, x: f32, y: f32) -> f32 {
        let xc = x.clamp(0.0, (self.w - 1) as f32);
        let yc = y.clamp(0.0, (self.h - 1) as f32);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = xc - x0 as f32;
        let fy = yc - y0 as f32;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bot = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    pub fn mean_abs_diff(&self, other: &GrayImage) -> f32 {
        assert_eq!(self.data.len(), other.data.len());
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        (s / self.data.len() as f64) as f32
    }
}

/// Quantize to 8 bits and write binary PGM.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", img.w, img.h)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let mut r = BufReader::new(File::open(path)?);
    let mut content = Vec::new();
    r.read_to_end(&mut content)?;
    parse_pgm(&content).map_err(|m| Error::data(format!("{}: {m}", path.display())))
}

fn parse_pgm(content: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0usize;
    let mut token = |content: &[u8]| -> std::result::Result<String, String> {
        // Skip whitespace and `#` comments between header tokens.
        loop {
            while pos < content.len() && content[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < content.len() && content[pos] == b'#' {
                while pos < content.len() && content[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < content.len() && !content[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&content[start..pos]).into_owned())
    };

    if token(content)? != "P5" {
        return Err("not a binary PGM (expected P5)".into());
    }
    let w: usize = token(content)?.parse().map_err(|_| "bad width")?;
    let h: usize = token(content)?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token(content)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, expected 255"));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    pos += 1;
    if content.len() < pos + w * h {
        return Err("truncated pixel data".into());
    }
    let data = content[pos..pos + w * h]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok(GrayImage { w, h, data })
}

/// Row-major depth map in meters; 0 marks background.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(w: usize, h: usize) -> Self {
        DepthMap { w, h, data: vec![0.0; w * h] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }
}

const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

pub fn write_depth(path: &Path, d: &DepthMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DEPTH_MAGIC)?;
    w.write_all(&(d.w as u32).to_le_bytes())?;
    w.write_all(&(d.h as u32).to_le_bytes())?;
    w.write_all(&[0u8; 4])?;
    for v in &d.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[0..4] != DEPTH_MAGIC {
        return Err(Error::data(format!("{}: bad depth magic", path.display())));
    }
    let w = u32::from_le_bytes([header[4], header[5], header[6], header[7]]) as usize;
    let h = u32::from_le_bytes([header[8], header[9], header[10], header[11]]) as usize;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    if blob.len() != w * h * 4 {
        return Err(Error::data(format!(
            "{}: depth payload {} bytes, expected {}",
            path.display(),
            blob.len(),
            w * h * 4
        )));
    }
    let data = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(DepthMap { w, h, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_quantized() {
        let dir = std::env::temp_dir().join("sf_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        let mut img = GrayImage::new(5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f32 / 14.0;
        }
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.w, 5);
        assert_eq!(back.h, 3);
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn depth_round_trip_exact() {
        let dir = std::env::temp_dir().join("sf_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.dpth");
        let d = DepthMap { w: 3, h: 2, data: vec![0.0, 0.25, 0.5, 1e-30, 2.0, 0.0] };
        write_depth(&path, &d).unwrap();
        let back = read_depth(&path).unwrap();
        for (a, b) in back.data.iter().zip(&d.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bilinear_interpolates_midpoints() {
        let mut img = GrayImage::new(2, 2);
        img.data = vec![0.0, 1.0, 0.0, 1.0];
        assert!((img.sample_bilinear(0.5, 0.5) - 0.5).abs() < 1e-6);
        assert!((img.sample_bilinear(0.0, 0.0) - 0.0).abs() < 1e-6);
    }
}
