//! Pluggable semantic feature extraction for the feature-consistency loss.
//!
//! The built-in extractor is a fixed, seeded, untrained stack of three
//! valid (unpadded) 3x3 stride-2 convolutions with relu between layers and
//! per-location L2 normalization at the end. It is fully determined by
//! (seed, channels, stride), differentiable through its input, and exactly
//! translation-equivariant away from borders. Externally computed feature
//! maps (from any real backbone, produced out-of-band) are ingested from a
//! simple binary format for target images, which never need gradients.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_dims, NodeId, Tape, Tensor};
use crate::img::Image;

#[derive(Debug, thiserror::Error)]
pub enum FeaturesError {
    #[error("image {width}x{height} too small for stride {stride}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        stride: usize,
    },
    #[error("external feature file missing for frame {frame}: {path}")]
    ExternalMissing { frame: usize, path: String },
    #[error("external features for frame {frame} have dims {got:?}, expected {expected:?}")]
    ExternalDimMismatch {
        frame: usize,
        got: (usize, usize, usize),
        expected: (usize, usize, usize),
    },
    #[error("corrupt feature file {0}")]
    Corrupt(String),
    #[error("external extractor requires a frame id")]
    MissingFrameId,
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

/// Dense feature grid; `stride` is input pixels per feature cell.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: usize,
    /// Row-major [height, width, channels].
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    #[default]
    BuiltinRandomConv,
    ExternalPrecomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub kind: ExtractorKind,
    pub seed: u64,
    pub channels: usize,
    pub stride: usize,
    /// Directory of external feature files (external kind only).
    pub external_dir: Option<PathBuf>,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::BuiltinRandomConv,
            seed: 0,
            channels: 64,
            stride: 8,
            external_dir: None,
        }
    }
}

const KSIZE: usize = 3;

/// The instantiated extractor: three fixed conv layers (weights are not
/// trainable; gradients flow through the input only).
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub spec: ExtractorSpec,
    /// (weight [k*k*c_in, c_out], bias [c_out]) per layer.
    layers: Vec<(Tensor, Tensor)>,
}

impl FeatureExtractor {
    pub fn new(spec: ExtractorSpec) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
        let dims = [3usize, spec.channels / 4, spec.channels / 2, spec.channels];
        let mut layers = Vec::with_capacity(3);
        for l in 0..3 {
            let (c_in, c_out) = (dims[l].max(1), dims[l + 1].max(1));
            let fan_in = (KSIZE * KSIZE * c_in) as f64;
            let a = (2.0 / fan_in).sqrt();
            let w: Vec<f64> = (0..KSIZE * KSIZE * c_in * c_out)
                .map(|_| rng.gen_range(-a..a))
                .collect();
            let b: Vec<f64> = (0..c_out).map(|_| rng.gen_range(-0.1..0.1)).collect();
            layers.push((
                Tensor::new(vec![KSIZE * KSIZE * c_in, c_out], w).unwrap(),
                Tensor::from_vec(b),
            ));
        }
        Self { spec, layers }
    }

    /// Output grid dims for an input raster.
    pub fn output_dims(&self, width: usize, height: usize) -> (usize, usize) {
        let mut h = height;
        let mut w = width;
        for _ in 0..3 {
            let (oh, ow) = conv_out_dims(h, w, KSIZE, 2);
            h = oh;
            w = ow;
        }
        (w, h)
    }

    /// Feature extraction on a tape. `image` is an [h*w, 3] node in pixel
    /// row-major order; the result is [oh*ow, channels], L2-normalized per
    /// row. Conv weights enter as constants, so gradients flow only through
    /// the image.
    pub fn extract_on_tape(
        &self,
        tape: &mut Tape,
        image: NodeId,
        width: usize,
        height: usize,
    ) -> Result<(NodeId, usize, usize), FeaturesError> {
        // Three valid k=3 s=2 layers need at least 15 input pixels per axis.
        let (mut ch, mut cw) = (height, width);
        for _ in 0..3 {
            if ch < KSIZE || cw < KSIZE {
                return Err(FeaturesError::ImageTooSmall {
                    width,
                    height,
                    stride: self.spec.stride,
                });
            }
            let (oh, ow) = conv_out_dims(ch, cw, KSIZE, 2);
            ch = oh;
            cw = ow;
        }
        let mut h = height;
        let mut w = width;
        let mut node = image;
        let mut c_in = 3usize;
        for (li, (wt, bt)) in self.layers.iter().enumerate() {
            let cols = tape.im2col(node, h, w, c_in, KSIZE, 2)?;
            let wn = tape.input(wt.clone());
            let bn = tape.input(bt.clone());
            let lin = tape.matmul(cols, wn)?;
            let mut out = tape.add(lin, bn)?;
            if li + 1 < self.layers.len() {
                out = tape.relu(out);
            }
            let (oh, ow) = conv_out_dims(h, w, KSIZE, 2);
            h = oh;
            w = ow;
            c_in = wt.shape()[1];
            node = out;
        }
        // per-location L2 normalization
        let sq = tape.mul(node, node)?;
        let sums = tape.sum_axis1(sq)?;
        let sums = tape.add_scalar(sums, 1e-12);
        let inv = tape.rsqrt(sums);
        let normalized = tape.scale_rows(node, inv)?;
        Ok((normalized, w, h))
    }

    /// Frozen extraction; shares the tape kernels so both paths agree.
    pub fn extract_builtin(&self, image: &Image) -> Result<FeatureMap, FeaturesError> {
        let mut tape = Tape::new();
        let node = tape.input(Tensor::new(
            vec![image.width * image.height, image.channels],
            image.data.clone(),
        ).expect("image data is dense"));
        let (out, w, h) = self.extract_on_tape(&mut tape, node, image.width, image.height)?;
        Ok(FeatureMap {
            height: h,
            width: w,
            channels: self.spec.channels,
            stride: self.spec.stride,
            data: tape.value(out).data().to_vec(),
        })
    }

    /// Dispatch on the spec: builtin convolution or external file lookup.
    pub fn extract(&self, image: &Image, frame_id: Option<usize>) -> Result<FeatureMap, FeaturesError> {
        match self.spec.kind {
            ExtractorKind::BuiltinRandomConv => self.extract_builtin(image),
            ExtractorKind::ExternalPrecomputed => {
                let frame = frame_id.ok_or(FeaturesError::MissingFrameId)?;
                let dir = self.spec.external_dir.clone().unwrap_or_default();
                let map = read_feature_file(&dir, frame)?;
                let (ew, eh) = self.output_dims(image.width, image.height);
                if (map.width, map.height, map.channels) != (ew, eh, self.spec.channels) {
                    return Err(FeaturesError::ExternalDimMismatch {
                        frame,
                        got: (map.width, map.height, map.channels),
                        expected: (ew, eh, self.spec.channels),
                    });
                }
                Ok(map)
            }
        }
    }
}

const FEATURE_MAGIC: &[u8; 8] = b"TBFT\x00\x01\x00\x00";

#[derive(Debug, Serialize, Deserialize)]
struct FeatureHeader {
    height: usize,
    width: usize,
    channels: usize,
    stride: usize,
    frame_id: usize,
}

pub fn feature_file_path(dir: &Path, frame_id: usize) -> PathBuf {
    dir.join(format!("feat_{frame_id:06}.bin"))
}

/// Per-frame binary blob: JSON header plus little-endian f32 payload.
pub fn write_feature_file(dir: &Path, frame_id: usize, map: &FeatureMap) -> Result<(), FeaturesError> {
    std::fs::create_dir_all(dir).map_err(|_| FeaturesError::Corrupt(dir.display().to_string()))?;
    let path = feature_file_path(dir, frame_id);
    let header = serde_json::to_vec(&FeatureHeader {
        height: map.height,
        width: map.width,
        channels: map.channels,
        stride: map.stride,
        frame_id,
    })
    .unwrap();
    let mut f = std::fs::File::create(&path)
        .map_err(|_| FeaturesError::Corrupt(path.display().to_string()))?;
    let err = |_| FeaturesError::Corrupt(path.display().to_string());
    f.write_all(FEATURE_MAGIC).map_err(err)?;
    f.write_all(&(header.len() as u64).to_le_bytes()).map_err(err)?;
    f.write_all(&header).map_err(err)?;
    for &v in &map.data {
        f.write_all(&(v as f32).to_le_bytes()).map_err(err)?;
    }
    Ok(())
}

pub fn read_feature_file(dir: &Path, frame_id: usize) -> Result<FeatureMap, FeaturesError> {
    let path = feature_file_path(dir, frame_id);
    let mut f = std::fs::File::open(&path).map_err(|_| FeaturesError::ExternalMissing {
        frame: frame_id,
        path: path.display().to_string(),
    })?;
    let corrupt = || FeaturesError::Corrupt(path.display().to_string());
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| corrupt())?;
    if &magic != FEATURE_MAGIC {
        return Err(corrupt());
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len).map_err(|_| corrupt())?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    f.read_exact(&mut header).map_err(|_| corrupt())?;
    let header: FeatureHeader = serde_json::from_slice(&header).map_err(|_| corrupt())?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload).map_err(|_| corrupt())?;
    let expect = header.height * header.width * header.channels;
    if payload.len() < expect * 4 {
        return Err(corrupt());
    }
    let data: Vec<f64> = payload[..expect * 4]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(FeatureMap {
        height: header.height,
        width: header.width,
        channels: header.channels,
        stride: header.stride,
        data,
    })
}
