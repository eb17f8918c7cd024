//! Portable float map I/O (`PF` colour / `Pf` greyscale, little-endian,
//! rows stored bottom to top).

use std::io::Write;
use std::path::Path;

use super::{OracleError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    /// Row-major, top row first, channels interleaved.
    pub data: Vec<f32>,
}

impl PfmImage {
    pub fn from_f64(width: u32, height: u32, channels: usize, data: &[f64]) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(OracleError::Pfm(format!("{channels} channels cannot be stored as PFM")));
        }
        if data.len() != width as usize * height as usize * channels {
            return Err(OracleError::Pfm("data length does not match dimensions".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data: data.iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tag = if self.channels == 3 { "PF" } else { "Pf" };
        let mut out = format!("{tag}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        let row = self.width as usize * self.channels;
        for y in (0..self.height as usize).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| OracleError::Pfm(m.to_string());
        // Header: three whitespace-terminated tokens after the tag line.
        let mut tokens = Vec::new();
        let mut pos = 0;
        while tokens.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(err("truncated header"));
            }
            tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("header is not ascii"))?);
        }
        pos += 1; // single whitespace byte before the raster
        let channels = match tokens[0] {
            "PF" => 3,
            "Pf" => 1,
            _ => return Err(err("bad magic")),
        };
        let width: u32 = tokens[1].parse().map_err(|_| err("bad width"))?;
        let height: u32 = tokens[2].parse().map_err(|_| err("bad height"))?;
        let scale: f32 = tokens[3].parse().map_err(|_| err("bad scale"))?;
        let row = width as usize * channels;
        let expected = row * height as usize * 4;
        let raster = bytes.get(pos..).ok_or_else(|| err("missing raster"))?;
        if raster.len() != expected {
            return Err(err("raster size mismatch"));
        }
        let read = |chunk: &[u8]| {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            if scale < 0.0 {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        };
        let mut data = vec![0.0f32; row * height as usize];
        for (file_row, chunk) in raster.chunks_exact(row * 4).enumerate() {
            let y = height as usize - 1 - file_row;
            for (i, v) in chunk.chunks_exact(4).enumerate() {
                data[y * row + i] = read(v);
            }
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }
}

pub fn write_pfm(path: impl AsRef<Path>, image: &PfmImage) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&image.to_bytes())?;
    Ok(())
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<PfmImage> {
    PfmImage::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let img = PfmImage::from_f64(2, 1, 1, &[1.0, 2.0]).unwrap();
        let bytes = img.to_bytes();
        assert!(bytes.starts_with(b"Pf\n2 1\n-1.0\n"));
        assert_eq!(bytes.len(), 12 + 8);
        assert!(PfmImage::from_f64(1, 1, 4, &[0.0; 4]).is_err());
    }

    #[test]
    fn rejects_truncated() {
        let img = PfmImage::from_f64(2, 2, 3, &[0.5; 12]).unwrap();
        let bytes = img.to_bytes();
        assert!(PfmImage::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(PfmImage::from_bytes(b"P6\n1 1\n-1.0\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip(w in 1u32..6, h in 1u32..6, grey in any::<bool>(), seed in any::<u32>()) {
            let c = if grey { 1 } else { 3 };
            let data: Vec<f64> = (0..(w * h) as usize * c)
                .map(|i| ((i as u32).wrapping_mul(seed) % 1000) as f64 / 7.0)
                .collect();
            let img = PfmImage::from_f64(w, h, c, &data).unwrap();
            let back = PfmImage::from_bytes(&img.to_bytes()).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
