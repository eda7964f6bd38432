//! Float image buffers and their on-disk formats: 8-bit PNG for RGB,
//! PFM (32-bit little-endian floats) for depth, with 16-bit PNG plus a
//! JSON scale sidecar accepted for depth interchange.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("image io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("png error at {path}: {source}")]
    Png {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("bad pfm file {path}: {reason}")]
    BadPfm { path: String, reason: String },
    #[error("{context}: expected {expected} channels, got {got}")]
    ChannelMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("missing scale sidecar for {0}")]
    MissingSidecar(String),
}

/// Row-major float image, `channels` interleaved per pixel, origin top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Box-filter downsample by an integer factor (for feature-loss inputs).
    pub fn downsample(&self, factor: usize) -> Image {
        assert!(factor >= 1);
        let w = self.width / factor;
        let h = self.height / factor;
        let mut out = Image::new(w, h, self.channels);
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.get(x * factor + dx, y * factor + dy, c);
                        }
                    }
                    out.pixel_mut(x, y)[c] = acc * norm;
                }
            }
        }
        out
    }

    /// Mean absolute difference over an optional mask.
    pub fn mean_abs_diff(&self, other: &Image, mask: Option<&[bool]>) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let mut acc = 0.0;
        let mut count = 0usize;
        for p in 0..self.pixels() {
            if let Some(m) = mask {
                if !m[p] {
                    continue;
                }
            }
            for c in 0..self.channels {
                acc += (self.data[p * self.channels + c] - other.data[p * self.channels + c]).abs();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            acc / count as f64
        }
    }
}

/// Write an RGB image ([0,1] floats) as 8-bit PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<(), ImageError> {
    if img.channels != 3 {
        return Err(ImageError::ChannelMismatch {
            context: "write_png",
            expected: 3,
            got: img.channels,
        });
    }
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|source| ImageError::Png {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_png(path: &Path) -> Result<Image, ImageError> {
    let dynimg = image::open(path).map_err(|source| ImageError::Png {
        path: path.display().to_string(),
        source,
    })?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data: Vec<f64> = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image::from_data(w, h, 3, data))
}

/// Write single-channel depth as grayscale PFM (little-endian, negative
/// scale marker). PFM stores rows bottom-to-top.
pub fn write_pfm(path: &Path, img: &Image) -> Result<(), ImageError> {
    if img.channels != 1 {
        return Err(ImageError::ChannelMismatch {
            context: "write_pfm",
            expected: 1,
            got: img.channels,
        });
    }
    let io_err = |source| ImageError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    write!(w, "Pf\n{} {}\n-1.0\n", img.width, img.height).map_err(io_err)?;
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            let v = img.get(x, y, 0) as f32;
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_pfm(path: &Path) -> Result<Image, ImageError> {
    let io_err = |source| ImageError::Io {
        path: path.display().to_string(),
        source,
    };
    let bad = |reason: &str| ImageError::BadPfm {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut content = Vec::new();
    r.read_to_end(&mut content).map_err(io_err)?;

    // Header: three whitespace-separated tokens, then binary payload.
    let mut pos = 0usize;
    let mut token = |content: &[u8]| -> Result<String, ImageError> {
        while pos < content.len() && content[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < content.len() && !content[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::BadPfm {
                path: path.display().to_string(),
                reason: "truncated header".into(),
            });
        }
        let t = String::from_utf8_lossy(&content[start..pos]).into_owned();
        pos += 1; // single whitespace after each token
        Ok(t)
    };
    let magic = token(&content)?;
    if magic != "Pf" {
        return Err(bad("expected grayscale magic 'Pf'"));
    }
    let width: usize = token(&content)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&content)?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = token(&content)?.parse().map_err(|_| bad("bad scale"))?;
    let little_endian = scale < 0.0;
    let payload = &content[pos..];
    if payload.len() < width * height * 4 {
        return Err(bad("payload shorter than dimensions imply"));
    }
    let mut img = Image::new(width, height, 1);
    let mut idx = 0;
    for y in (0..height).rev() {
        for x in 0..width {
            let b: [u8; 4] = payload[idx..idx + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            img.pixel_mut(x, y)[0] = v as f64;
            idx += 4;
        }
    }
    Ok(img)
}

/// Depth as 16-bit PNG plus a JSON sidecar recording the scale factor.
pub fn write_depth_png16(path: &Path, img: &Image, scale: f64) -> Result<(), ImageError> {
    if img.channels != 1 {
        return Err(ImageError::ChannelMismatch {
            context: "write_depth_png16",
            expected: 1,
            got: img.channels,
        });
    }
    let mut bytes = Vec::with_capacity(img.data.len() * 2);
    for &v in &img.data {
        let q = ((v / scale) * 65535.0).round().clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&q.to_ne_bytes());
    }
    image::save_buffer(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        image::ColorType::L16,
    )
    .map_err(|source| ImageError::Png {
        path: path.display().to_string(),
        source,
    })?;
    let sidecar = path.with_extension("json");
    let body = serde_json::json!({ "scale": scale, "encoding": "depth = png16 / 65535 * scale" });
    std::fs::write(&sidecar, serde_json::to_string_pretty(&body).unwrap()).map_err(|source| {
        ImageError::Io {
            path: sidecar.display().to_string(),
            source,
        }
    })
}

pub fn read_depth_png16(path: &Path) -> Result<Image, ImageError> {
    let sidecar = path.with_extension("json");
    let text = std::fs::read_to_string(&sidecar)
        .map_err(|_| ImageError::MissingSidecar(path.display().to_string()))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|_| ImageError::MissingSidecar(sidecar.display().to_string()))?;
    let scale = v["scale"].as_f64().unwrap_or(1.0);
    let dynimg = image::open(path).map_err(|source| ImageError::Png {
        path: path.display().to_string(),
        source,
    })?;
    let gray = dynimg.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data: Vec<f64> = gray
        .as_raw()
        .iter()
        .map(|&q| q as f64 / 65535.0 * scale)
        .collect();
    Ok(Image::from_data(w, h, 1, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_roundtrip_is_lossless_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let mut img = Image::new(7, 5, 1);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.37 + 0.01) as f32 as f64;
        }
        write_pfm(&path, &img).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.width, 7);
        assert_eq!(back.height, 5);
        assert_eq!(img.data, back.data);
    }

    #[test]
    fn png_roundtrip_quantizes_to_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let mut img = Image::new(4, 3, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn depth_png16_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let mut img = Image::new(6, 4, 1);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64 * 0.123;
        }
        let scale = 4.0;
        write_depth_png16(&path, &img, scale).unwrap();
        let back = read_depth_png16(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= scale / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn downsample_box_filter() {
        let img = Image::from_data(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]);
        let d = img.downsample(2);
        assert_eq!(d.width, 1);
        assert!((d.get(0, 0, 0) - 0.5).abs() < 1e-12);
    }
}
