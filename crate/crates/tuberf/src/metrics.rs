//! Evaluation metrics computable without pretrained networks: PSNR,
//! SSIM / MS-SSIM, depth-MSE, and report generation.
//!
//! PSNR is computed on [0,1] floats (no 8-bit quantization). SSIM uses the
//! standard 11x11 Gaussian window with sigma 1.5; MS-SSIM uses the
//! canonical five scale weights, renormalized when small images force a
//! scale reduction. RGB metrics average the per-channel values. The report
//! schema reserves perceptual-metric columns so externally computed values
//! can be merged later.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::img::Image;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{context}: image dims {a:?} vs {b:?}")]
    DimMismatch {
        context: &'static str,
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("depth_mse: empty mask")]
    EmptyMask,
    #[error("report io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub const PSNR_CAP_DB: f64 = 120.0;

/// Peak signal-to-noise ratio in dB over all pixels and channels;
/// MSE below 1e-12 caps at 120 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(MetricsError::DimMismatch {
            context: "psnr",
            a: (a.width, a.height),
            b: (b.width, b.height),
        });
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse < 1e-12 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(-10.0 * mse.log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// Canonical five-scale weights.
const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Single-channel plane helper.
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn from_channel(img: &Image, c: usize) -> Self {
        let data = (0..img.pixels())
            .map(|p| img.data[p * img.channels + c])
            .collect();
        Self {
            w: img.width,
            h: img.height,
            data,
        }
    }

    fn convolve_separable(&self, k: &[f64; SSIM_WINDOW]) -> Plane {
        let half = SSIM_WINDOW / 2;
        let (w, h) = (self.w - 2 * half, self.h - 2 * half);
        // horizontal pass
        let mut tmp = vec![0.0; w * self.h];
        for y in 0..self.h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    acc += kv * self.data[y * self.w + x + i];
                }
                tmp[y * w + x] = acc;
            }
        }
        // vertical pass
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    acc += kv * tmp[(y + i) * w + x];
                }
                out[y * w + x] = acc;
            }
        }
        Plane { w, h, data: out }
    }

    fn halved(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = 0.25
                    * (self.data[2 * y * self.w + 2 * x]
                        + self.data[2 * y * self.w + 2 * x + 1]
                        + self.data[(2 * y + 1) * self.w + 2 * x]
                        + self.data[(2 * y + 1) * self.w + 2 * x + 1]);
            }
        }
        Plane { w, h, data: out }
    }
}

/// Gaussian-windowed mean luminance term and contrast-structure term for
/// one channel pair.
fn ssim_terms(a: &Plane, b: &Plane) -> (f64, f64) {
    let k = gaussian_kernel();
    let mu_a = a.convolve_separable(&k);
    let mu_b = b.convolve_separable(&k);
    let sq = |p: &Plane| Plane {
        w: p.w,
        h: p.h,
        data: p.data.iter().map(|v| v * v).collect(),
    };
    let prod = Plane {
        w: a.w,
        h: a.h,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    };
    let e_aa = sq(a).convolve_separable(&k);
    let e_bb = sq(b).convolve_separable(&k);
    let e_ab = prod.convolve_separable(&k);

    let n = mu_a.data.len();
    let mut lum = 0.0;
    let mut cs = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = (e_aa.data[i] - ma * ma).max(0.0);
        let vb = (e_bb.data[i] - mb * mb).max(0.0);
        let cov = e_ab.data[i] - ma * mb;
        lum += (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        cs += (2.0 * cov + C2) / (va + vb + C2);
    }
    (lum / n as f64, cs / n as f64)
}

/// Single-scale SSIM (channel average).
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(MetricsError::DimMismatch {
            context: "ssim",
            a: (a.width, a.height),
            b: (b.width, b.height),
        });
    }
    let mut acc = 0.0;
    for c in 0..a.channels {
        let pa = Plane::from_channel(a, c);
        let pb = Plane::from_channel(b, c);
        let (lum, cs) = ssim_terms(&pa, &pb);
        acc += lum * cs;
    }
    Ok(acc / a.channels as f64)
}

/// Multi-scale SSIM with automatic scale reduction on small images; the
/// second return is the number of scales actually used (a warning marker
/// when below the request).
pub fn ms_ssim(a: &Image, b: &Image, scales: usize) -> Result<(f64, usize), MetricsError> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(MetricsError::DimMismatch {
            context: "ms_ssim",
            a: (a.width, a.height),
            b: (b.width, b.height),
        });
    }
    let scales = scales.clamp(1, 5);
    // largest scale count the raster supports (each scale halves dims; the
    // finest surviving plane must still fit the 11x11 window)
    let mut usable = 1usize;
    for s in 1..=scales {
        let min_dim = a.width.min(a.height) >> (s - 1);
        if min_dim >= SSIM_WINDOW {
            usable = s;
        } else {
            break;
        }
    }
    let weights: Vec<f64> = {
        let raw = &MS_WEIGHTS[..usable];
        let sum: f64 = raw.iter().sum();
        raw.iter().map(|w| w / sum).collect()
    };

    let mut acc_per_channel = vec![1.0f64; a.channels];
    for c in 0..a.channels {
        let mut pa = Plane::from_channel(a, c);
        let mut pb = Plane::from_channel(b, c);
        for (s, &w) in weights.iter().enumerate() {
            let (lum, cs) = ssim_terms(&pa, &pb);
            let term = if s + 1 == usable { lum * cs } else { cs };
            // clamp negatives before the fractional power
            acc_per_channel[c] *= term.max(1e-9).powf(w);
            if s + 1 < usable {
                pa = pa.halved();
                pb = pb.halved();
            }
        }
    }
    Ok((
        acc_per_channel.iter().sum::<f64>() / a.channels as f64,
        usable,
    ))
}

/// Masked mean squared depth error in world units squared.
pub fn depth_mse(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<f64, MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::DimMismatch {
            context: "depth_mse",
            a: (a.width, a.height),
            b: (b.width, b.height),
        });
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for p in 0..a.pixels() {
        if let Some(m) = mask {
            if !m[p] {
                continue;
            }
        }
        let d = a.data[p] - b.data[p];
        acc += d * d;
        count += 1;
    }
    if count == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(acc / count as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub depth_mse: f64,
    /// Reserved for externally computed perceptual metrics.
    pub lpips_vgg: Option<f64>,
    pub lpips_alex: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub frame_count: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_ms_ssim: f64,
    pub mean_depth_mse: f64,
    pub config_hash: String,
    /// Set when images forced an MS-SSIM scale reduction.
    pub ms_ssim_scales_used: usize,
    pub warnings: Vec<String>,
    pub per_frame: Vec<FrameMetrics>,
}

impl EvalReport {
    pub fn from_frames(per_frame: Vec<FrameMetrics>, config_hash: String, scales_used: usize) -> Self {
        let n = per_frame.len().max(1) as f64;
        let mut warnings = Vec::new();
        if scales_used < 5 {
            warnings.push(format!(
                "ms_ssim reduced to {scales_used} scales for small images"
            ));
        }
        Self {
            frame_count: per_frame.len(),
            mean_psnr: per_frame.iter().map(|f| f.psnr).sum::<f64>() / n,
            mean_ssim: per_frame.iter().map(|f| f.ssim).sum::<f64>() / n,
            mean_ms_ssim: per_frame.iter().map(|f| f.ms_ssim).sum::<f64>() / n,
            mean_depth_mse: per_frame.iter().map(|f| f.depth_mse).sum::<f64>() / n,
            config_hash,
            ms_ssim_scales_used: scales_used,
            warnings,
            per_frame,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<(), MetricsError> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap()).map_err(|source| {
            MetricsError::Io {
                path: path.display().to_string(),
                source,
            }
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let mut out = String::from("frame,psnr,ssim,ms_ssim,depth_mse,lpips_vgg,lpips_alex\n");
        for f in &self.per_frame {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.8},{},{}\n",
                f.frame,
                f.psnr,
                f.ssim,
                f.ms_ssim,
                f.depth_mse,
                f.lpips_vgg.map_or(String::new(), |v| format!("{v:.6}")),
                f.lpips_alex.map_or(String::new(), |v| format!("{v:.6}")),
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.6},{:.8},,\n",
            self.mean_psnr, self.mean_ssim, self.mean_ms_ssim, self.mean_depth_mse
        ));
        std::fs::write(path, out).map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
