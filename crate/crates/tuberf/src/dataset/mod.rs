//! Synthetic tube-phantom generation, dataset I/O, and the train/test
//! split protocol.
//!
//! On-disk layout:
//!
//! ```text
//! dataset/
//!   poses.json        camera-to-world 4x4 (16 row-major reals) per frame,
//!                     one shared intrinsics block, near/far bounds
//!   rgb/%06d.png      8-bit RGB
//!   depth/%06d.pfm    32-bit float camera-space z depth (PNG16+sidecar
//!                     also accepted on load)
//!   phantom.json      generator provenance (config + seed), when generated
//! ```

mod curve;
mod phantom;

pub use curve::Curve;
pub use phantom::{PhantomError, TextureConfig, TextureTerm, TubePhantom, TubePhantomConfig};

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, Pose};
use crate::img::{self, Image};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing or unreadable file: {0}")]
    MissingFile(String),
    #[error("bad json in {path}: {reason}")]
    BadJson { path: String, reason: String },
    #[error("frame count mismatch: {poses} poses, {rgb} rgb, {depth} depth")]
    CountMismatch { poses: usize, rgb: usize, depth: usize },
    #[error("frame {id}: image dims {got:?} differ from intrinsics {expected:?}")]
    DimMismatch {
        id: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Image(#[from] crate::img::ImageError),
}

/// One captured frame: pose, RGB, and z-depth, all ground truth.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: usize,
    pub pose: Pose,
    pub rgb: Image,
    pub depth: Image,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub intrinsics: CameraIntrinsics,
    pub near: f64,
    pub far: f64,
    pub phantom: Option<TubePhantomConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IntrinsicsJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseEntry {
    id: usize,
    transform: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PosesJson {
    format_version: u32,
    intrinsics: IntrinsicsJson,
    near: f64,
    far: f64,
    frames: Vec<PoseEntry>,
}

/// Render every frame of a phantom and write the dataset directory.
/// Fully deterministic for a given config.
pub fn generate_phantom(config: &TubePhantomConfig, dir: &Path) -> Result<Dataset, DatasetError> {
    let phantom = TubePhantom::new(config.clone())?;
    let poses = phantom.camera_poses()?;
    let k = phantom.intrinsics();

    let rendered: Vec<(Image, Image)> = poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| phantom.render_frame(i, pose, &k))
        .collect::<Result<_, _>>()?;

    let io_err = |path: &Path| {
        let p = path.display().to_string();
        move |source| DatasetError::Io {
            path: p.clone(),
            source,
        }
    };
    fs::create_dir_all(dir.join("rgb")).map_err(io_err(&dir.join("rgb")))?;
    fs::create_dir_all(dir.join("depth")).map_err(io_err(&dir.join("depth")))?;

    let mut max_depth = 0.0f64;
    let mut frames = Vec::with_capacity(poses.len());
    for (i, ((rgb, depth), pose)) in rendered.into_iter().zip(&poses).enumerate() {
        img::write_png(&dir.join(format!("rgb/{i:06}.png")), &rgb)?;
        img::write_pfm(&dir.join(format!("depth/{i:06}.pfm")), &depth)?;
        max_depth = depth.data.iter().fold(max_depth, |a, &b| a.max(b));
        frames.push(Frame {
            id: i,
            pose: *pose,
            rgb,
            depth,
        });
    }
    let near = 0.02;
    let far = max_depth * 1.2;

    let poses_json = PosesJson {
        format_version: 1,
        intrinsics: IntrinsicsJson {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        },
        near,
        far,
        frames: frames
            .iter()
            .map(|f| PoseEntry {
                id: f.id,
                transform: f.pose.to_matrix4().to_vec(),
            })
            .collect(),
    };
    fs::write(
        dir.join("poses.json"),
        serde_json::to_string_pretty(&poses_json).unwrap(),
    )
    .map_err(io_err(&dir.join("poses.json")))?;
    fs::write(
        dir.join("phantom.json"),
        serde_json::to_string_pretty(config).unwrap(),
    )
    .map_err(io_err(&dir.join("phantom.json")))?;

    Ok(Dataset {
        frames,
        intrinsics: k,
        near,
        far,
        phantom: Some(config.clone()),
    })
}

/// Load a dataset directory; frames come back sorted by id regardless of
/// directory order, with dimension and count validation.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let poses_path = dir.join("poses.json");
    let text = fs::read_to_string(&poses_path)
        .map_err(|_| DatasetError::MissingFile(poses_path.display().to_string()))?;
    let poses: PosesJson = serde_json::from_str(&text).map_err(|e| DatasetError::BadJson {
        path: poses_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let ij = &poses.intrinsics;
    let intrinsics = CameraIntrinsics::new(ij.fx, ij.fy, ij.cx, ij.cy, ij.width, ij.height)
        .map_err(|e| DatasetError::BadJson {
            path: poses_path.display().to_string(),
            reason: e.to_string(),
        })?;

    let count_files = |sub: &str| -> Result<usize, DatasetError> {
        let p = dir.join(sub);
        Ok(fs::read_dir(&p)
            .map_err(|_| DatasetError::MissingFile(p.display().to_string()))?
            .filter_map(|e| e.ok())
            .filter(|e| {
                // depth sidecars are json companions, not frames
                let name = e.file_name();
                let name = name.to_string_lossy();
                !name.ends_with(".json")
            })
            .count())
    };
    let rgb_count = count_files("rgb")?;
    let depth_count = count_files("depth")?;
    if rgb_count != poses.frames.len() || depth_count != poses.frames.len() {
        return Err(DatasetError::CountMismatch {
            poses: poses.frames.len(),
            rgb: rgb_count,
            depth: depth_count,
        });
    }

    let mut entries = poses.frames;
    entries.sort_by_key(|e| e.id);

    let frames: Vec<Frame> = entries
        .par_iter()
        .map(|entry| -> Result<Frame, DatasetError> {
            let id = entry.id;
            if entry.transform.len() != 16 {
                return Err(DatasetError::BadJson {
                    path: poses_path.display().to_string(),
                    reason: format!("frame {id}: transform must have 16 entries"),
                });
            }
            let mut m = [0.0; 16];
            m.copy_from_slice(&entry.transform);
            let pose = Pose::from_matrix4(&m);
            let rgb_path = dir.join(format!("rgb/{id:06}.png"));
            let rgb = img::read_png(&rgb_path)
                .map_err(|_| DatasetError::MissingFile(rgb_path.display().to_string()))?;
            let pfm_path = dir.join(format!("depth/{id:06}.pfm"));
            let depth = if pfm_path.exists() {
                img::read_pfm(&pfm_path)?
            } else {
                let png16 = dir.join(format!("depth/{id:06}.png"));
                img::read_depth_png16(&png16)
                    .map_err(|_| DatasetError::MissingFile(pfm_path.display().to_string()))?
            };
            if rgb.width != intrinsics.width || rgb.height != intrinsics.height {
                return Err(DatasetError::DimMismatch {
                    id,
                    got: (rgb.width, rgb.height),
                    expected: (intrinsics.width, intrinsics.height),
                });
            }
            if depth.width != intrinsics.width || depth.height != intrinsics.height {
                return Err(DatasetError::DimMismatch {
                    id,
                    got: (depth.width, depth.height),
                    expected: (intrinsics.width, intrinsics.height),
                });
            }
            Ok(Frame {
                id,
                pose,
                rgb,
                depth,
            })
        })
        .collect::<Result<_, _>>()?;

    let phantom = fs::read_to_string(dir.join("phantom.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());

    Ok(Dataset {
        frames,
        intrinsics,
        near: poses.near,
        far: poses.far,
        phantom,
    })
}

/// Index-based train/test split. The uniform rule marks every frame with
/// index = offset (mod test_every) as test; `test_indices` overrides it for
/// dataset-specific protocols that a uniform rule cannot reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_every: usize,
    pub offset: usize,
    pub test_indices: Option<Vec<usize>>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_every: 4,
            offset: 3,
            test_indices: None,
        }
    }
}

impl SplitSpec {
    pub fn every(test_every: usize) -> Self {
        assert!(test_every >= 2, "test_every must be at least 2");
        Self {
            test_every,
            offset: test_every - 1,
            test_indices: None,
        }
    }

    /// (train, test) frame indices; deterministic, RNG-free partition.
    pub fn split(&self, n_frames: usize) -> (Vec<usize>, Vec<usize>) {
        let is_test: Vec<bool> = match &self.test_indices {
            Some(list) => {
                let mut mask = vec![false; n_frames];
                for &i in list {
                    if i < n_frames {
                        mask[i] = true;
                    }
                }
                mask
            }
            None => (0..n_frames)
                .map(|i| i % self.test_every == self.offset % self.test_every)
                .collect(),
        };
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, &t) in is_test.iter().enumerate() {
            if t {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }
}

/// `count` evenly spaced test indices over `n` frames (Bresenham spacing),
/// for reproducing published splits whose counts a uniform modulus cannot
/// produce.
pub fn evenly_spaced_test_indices(n: usize, count: usize) -> Vec<usize> {
    assert!(count <= n);
    (0..count)
        .map(|j| (j * n + n / 2) / count.max(1))
        .map(|i| i.min(n - 1))
        .collect()
}

/// Directory of a dataset, resolved relative to the current directory.
pub fn dataset_dir(path: &str) -> PathBuf {
    PathBuf::from(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_then_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TubePhantomConfig::straight_tube(6, 16, 16);
        let written = generate_phantom(&cfg, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.frames.len(), 6);
        assert_eq!(loaded.intrinsics.width, 16);
        assert!(loaded.phantom.is_some());
        for (a, b) in written.frames.iter().zip(&loaded.frames) {
            assert_eq!(a.id, b.id);
            // poses roundtrip through the 16-real json exactly enough
            for (x, y) in a.pose.to_matrix4().iter().zip(&b.pose.to_matrix4()) {
                assert!((x - y).abs() < 1e-12);
            }
            // depth is f32-lossless; rgb is 8-bit quantized
            for (x, y) in a.depth.data.iter().zip(&b.depth.data) {
                assert!((*x as f32 as f64 - *y).abs() < 1e-12);
            }
            for (x, y) in a.rgb.data.iter().zip(&b.rgb.data) {
                assert!((x - y).abs() < 0.5 / 255.0 + 1e-9);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = TubePhantomConfig::curved_tube(3, 12, 12);
        generate_phantom(&cfg, d1.path()).unwrap();
        generate_phantom(&cfg, d2.path()).unwrap();
        for sub in ["rgb/000001.png", "depth/000001.pfm", "poses.json"] {
            let a = std::fs::read(d1.path().join(sub)).unwrap();
            let b = std::fs::read(d2.path().join(sub)).unwrap();
            assert_eq!(a, b, "{sub} differs between identical runs");
        }
    }

    #[test]
    fn load_sorts_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TubePhantomConfig::straight_tube(5, 8, 8);
        generate_phantom(&cfg, dir.path()).unwrap();
        // shuffle entries in poses.json
        let p = dir.path().join("poses.json");
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        let frames = v["frames"].as_array_mut().unwrap();
        frames.reverse();
        std::fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let ids: Vec<usize> = loaded.frames.iter().map(|f| f.id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn load_rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TubePhantomConfig::straight_tube(4, 8, 8);
        generate_phantom(&cfg, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("rgb/000002.png")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DatasetError::CountMismatch { .. })
        ));
    }

    #[test]
    fn uniform_split_is_a_partition() {
        let spec = SplitSpec::every(4);
        let (train, test) = spec.split(120);
        assert_eq!(test.len(), 30);
        assert_eq!(train.len(), 90);
        let mut all: Vec<usize> = train.iter().chain(test.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..120).collect::<Vec<_>>());
    }

    #[test]
    fn override_split_reproduces_published_counts() {
        // 989 frames -> 233 test / 756 train; 54 frames -> 19 test / 35 train.
        let spec = SplitSpec {
            test_every: 4,
            offset: 3,
            test_indices: Some(evenly_spaced_test_indices(989, 233)),
        };
        let (train, test) = spec.split(989);
        assert_eq!((train.len(), test.len()), (756, 233));

        let spec = SplitSpec {
            test_every: 4,
            offset: 3,
            test_indices: Some(evenly_spaced_test_indices(54, 19)),
        };
        let (train, test) = spec.split(54);
        assert_eq!((train.len(), test.len()), (35, 19));
    }

    #[test]
    fn split_is_deterministic() {
        let spec = SplitSpec::default();
        assert_eq!(spec.split(97), spec.split(97));
    }
}
