//! Pose densification and pseudo-label manufacture: depth-based forward
//! warping into unseen views, spin-grid ray pools, and helix pseudo-labels.
//!
//! Warping is a forward splat: every valid source pixel is back-projected
//! with its depth, moved into the destination camera, and splatted to the
//! nearest destination pixel with a z-buffer (nearest depth wins). Unhit
//! destination pixels are invalid and carry sentinel depth 0; no loss ever
//! reads them.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    backproject, helix_poses, project, spin_pose_grid, vnorm, vsub, CameraIntrinsics, Pose, Vec3,
};
use crate::img::{self, Image};

#[derive(Debug, thiserror::Error)]
pub enum DensifyError {
    #[error("pseudo-label cache io at {path}: {source}")]
    CacheIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] crate::img::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseFamily {
    Original,
    Spin,
    Helix,
}

/// Warped RGB + depth supervision target at a synthesized pose. Depth is
/// camera-space z in the destination camera; invalid pixels carry 0.
#[derive(Debug, Clone)]
pub struct PseudoLabel {
    pub pose: Pose,
    pub rgb: Image,
    pub depth: Image,
    pub valid: Vec<bool>,
    pub source_frame: usize,
    pub family: PoseFamily,
}

impl PseudoLabel {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Forward-warp a source frame into a destination pose.
pub fn warp(
    src_rgb: &Image,
    src_depth: &Image,
    src_pose: &Pose,
    dst_pose: &Pose,
    k: &CameraIntrinsics,
    source_frame: usize,
    family: PoseFamily,
) -> PseudoLabel {
    let (w, h) = (k.width, k.height);
    let mut rgb = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut valid = vec![false; w * h];
    let mut zbuf = vec![f64::INFINITY; w * h];

    let src_to_dst = dst_pose.inverse().compose(src_pose);
    for y in 0..h {
        for x in 0..w {
            let d = src_depth.get(x, y, 0);
            if d <= 0.0 {
                continue;
            }
            let p_cam = match backproject((x as f64 + 0.5, y as f64 + 0.5), d, k) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let p_dst = src_to_dst.transform_point(p_cam);
            let ((u, v), inside) = project(p_dst, k);
            if !inside {
                continue;
            }
            let (xi, yi) = (u as usize, v as usize);
            let idx = yi * w + xi;
            if p_dst[2] < zbuf[idx] {
                zbuf[idx] = p_dst[2];
                let src_px = src_rgb.pixel(x, y);
                rgb.pixel_mut(xi, yi).copy_from_slice(src_px);
                depth.pixel_mut(xi, yi)[0] = p_dst[2];
                valid[idx] = true;
            }
        }
    }
    PseudoLabel {
        pose: *dst_pose,
        rgb,
        depth,
        valid,
        source_frame,
        family,
    }
}

/// One pooled supervision ray: destination pose index + pixel, with the
/// warped ground truth attached.
#[derive(Debug, Clone, Copy)]
pub struct PooledRay {
    pub pose_index: u32,
    pub x: u16,
    pub y: u16,
    pub rgb: [f64; 3],
    pub depth: f64,
}

/// All supervision rays warped into the spin-grid poses of one frame.
#[derive(Debug, Clone)]
pub struct RayPool {
    pub source_frame: usize,
    pub poses: Vec<Pose>,
    pub rays: Vec<PooledRay>,
    /// Incremented whenever a draw had to clamp to the pool size.
    pub short_draws: u32,
}

/// Warp a frame into its whole spin grid and pool the valid rays.
/// `max_rays_per_pose` subsamples each pose's rays (seeded by the source
/// frame id) to bound memory; `None` keeps everything.
pub fn build_spin_pool(
    frame_id: usize,
    rgb: &Image,
    depth: &Image,
    pose: &Pose,
    k: &CameraIntrinsics,
    angles_deg: &[f64],
    max_rays_per_pose: Option<usize>,
) -> RayPool {
    use rand::SeedableRng;
    let poses = spin_pose_grid(pose, angles_deg);
    let mut rays = Vec::new();
    for (pi, dst) in poses.iter().enumerate() {
        let label = warp(rgb, depth, pose, dst, k, frame_id, PoseFamily::Spin);
        let mut pose_rays: Vec<PooledRay> = Vec::new();
        for y in 0..k.height {
            for x in 0..k.width {
                if !label.valid[y * k.width + x] {
                    continue;
                }
                let px = label.rgb.pixel(x, y);
                pose_rays.push(PooledRay {
                    pose_index: pi as u32,
                    x: x as u16,
                    y: y as u16,
                    rgb: [px[0], px[1], px[2]],
                    depth: label.depth.get(x, y, 0),
                });
            }
        }
        if let Some(cap) = max_rays_per_pose {
            if pose_rays.len() > cap {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                    (frame_id as u64) << 32 | pi as u64,
                );
                let keep = index_sample(&mut rng, pose_rays.len(), cap);
                pose_rays = keep.into_iter().map(|i| pose_rays[i]).collect();
            }
        }
        rays.extend(pose_rays);
    }
    RayPool {
        source_frame: frame_id,
        poses,
        rays,
        short_draws: 0,
    }
}

/// Seeded uniform draw without replacement: min(count, pool size) rays.
pub fn sample_spin_rays<'p>(
    pool: &'p mut RayPool,
    count: usize,
    rng: &mut dyn RngCore,
) -> Vec<&'p PooledRay> {
    let n = pool.rays.len();
    if n == 0 {
        return Vec::new();
    }
    let take = count.min(n);
    if take < count {
        pool.short_draws += 1;
    }
    index_sample(rng, n, take)
        .into_iter()
        .map(|i| &pool.rays[i])
        .collect()
}

/// Pseudo-labels at helix poses between two consecutive frames. Each pose
/// is warped from the nearer source frame (by translation distance, earlier
/// frame on ties).
#[allow(clippy::too_many_arguments)]
pub fn build_helix_labels(
    frame_a: usize,
    rgb_a: &Image,
    depth_a: &Image,
    pose_a: &Pose,
    frame_b: usize,
    rgb_b: &Image,
    depth_b: &Image,
    pose_b: &Pose,
    k: &CameraIntrinsics,
    n: usize,
) -> Vec<PseudoLabel> {
    helix_poses(pose_a, pose_b, n)
        .into_iter()
        .map(|target| {
            let da = vnorm(vsub(target.translation, pose_a.translation));
            let db = vnorm(vsub(target.translation, pose_b.translation));
            let mut label = if da <= db {
                warp(rgb_a, depth_a, pose_a, &target, k, frame_a, PoseFamily::Helix)
            } else {
                warp(rgb_b, depth_b, pose_b, &target, k, frame_b, PoseFamily::Helix)
            };
            label.family = PoseFamily::Helix;
            label
        })
        .collect()
}

// ----- optional on-disk pseudo-label cache ---------------------------------

/// Stable content key for a pose, used in cache manifests.
pub fn pose_hash(pose: &Pose) -> String {
    let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |v: f64| {
        acc ^= v.to_bits();
        acc = acc.wrapping_mul(0x1000_0000_01b3);
    };
    for v in [
        pose.rotation.w,
        pose.rotation.x,
        pose.rotation.y,
        pose.rotation.z,
        pose.translation[0],
        pose.translation[1],
        pose.translation[2],
    ] {
        mix(v);
    }
    format!("{acc:016x}")
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    frame: usize,
    family: PoseFamily,
    pose_hash: String,
    transform: Vec<f64>,
    rgb: String,
    depth: String,
    valid: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CacheManifest {
    entries: Vec<CacheEntry>,
}

/// Write pseudo-labels as PNG/PFM pairs plus a JSON manifest keyed by
/// (frame id, family, pose hash).
pub fn save_pseudo_labels(dir: &Path, labels: &[PseudoLabel]) -> Result<(), DensifyError> {
    std::fs::create_dir_all(dir).map_err(|source| DensifyError::CacheIo {
        path: dir.display().to_string(),
        source,
    })?;
    let manifest_path = dir.join("manifest.json");
    let mut manifest: CacheManifest = std::fs::read_to_string(&manifest_path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    for label in labels {
        let hash = pose_hash(&label.pose);
        let family = match label.family {
            PoseFamily::Original => "original",
            PoseFamily::Spin => "spin",
            PoseFamily::Helix => "helix",
        };
        let stem = format!("{:06}_{}_{}", label.source_frame, family, hash);
        let rgb_file = format!("{stem}_rgb.png");
        let depth_file = format!("{stem}_depth.pfm");
        let valid_file = format!("{stem}_valid.png");
        img::write_png(&dir.join(&rgb_file), &label.rgb)?;
        img::write_pfm(&dir.join(&depth_file), &label.depth)?;
        let mask = Image::from_data(
            label.rgb.width,
            label.rgb.height,
            1,
            label.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        );
        // masks ride along as binary pfm for losslessness
        img::write_pfm(&dir.join(&valid_file), &mask)?;
        manifest.entries.push(CacheEntry {
            frame: label.source_frame,
            family: label.family,
            pose_hash: hash,
            transform: label.pose.to_matrix4().to_vec(),
            rgb: rgb_file,
            depth: depth_file,
            valid: valid_file,
        });
    }
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).unwrap(),
    )
    .map_err(|source| DensifyError::CacheIo {
        path: manifest_path.display().to_string(),
        source,
    })
}

/// Load every cached pseudo-label, keyed map by (frame, family, pose hash).
pub fn load_pseudo_labels(
    dir: &Path,
) -> Result<HashMap<(usize, String), PseudoLabel>, DensifyError> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|source| DensifyError::CacheIo {
        path: manifest_path.display().to_string(),
        source,
    })?;
    let manifest: CacheManifest = serde_json::from_str(&text).unwrap_or_default();
    let mut out = HashMap::new();
    for e in manifest.entries {
        let rgb = img::read_png(&dir.join(&e.rgb))?;
        let depth = img::read_pfm(&dir.join(&e.depth))?;
        let mask = img::read_pfm(&dir.join(&e.valid))?;
        let mut m = [0.0; 16];
        m.copy_from_slice(&e.transform);
        out.insert(
            (e.frame, e.pose_hash.clone()),
            PseudoLabel {
                pose: Pose::from_matrix4(&m),
                rgb,
                depth,
                valid: mask.data.iter().map(|&v| v > 0.5).collect(),
                source_frame: e.frame,
                family: e.family,
            },
        );
    }
    Ok(out)
}

// ----- supervision batches --------------------------------------------------

/// One supervised ray: world-space geometry plus ground truth. `dir_cam_z`
/// converts rendered ray distance into camera-space z for depth losses.
#[derive(Debug, Clone, Copy)]
pub struct RaySample {
    pub origin: Vec3,
    pub direction: Vec3,
    pub dir_cam_z: f64,
    pub rgb: [f64; 3],
    pub depth_z: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PatchDescriptor {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

/// Sampled supervision for one pose family: random rays plus (for the
/// original family) pixel patches.
#[derive(Debug, Clone)]
pub struct SupervisionBatch {
    pub family: PoseFamily,
    pub source_frame: usize,
    pub rand_samples: Vec<RaySample>,
    pub patch_samples: Vec<RaySample>,
    pub patches: Vec<PatchDescriptor>,
}

/// Build a [`RaySample`] for a pixel of a posed image pair.
pub fn ray_sample(
    pose: &Pose,
    k: &CameraIntrinsics,
    x: usize,
    y: usize,
    rgb: &Image,
    depth_z: f64,
) -> RaySample {
    let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
    let dir_cam = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
    let inv_len = 1.0 / crate::geometry::vnorm(dir_cam);
    let px = rgb.pixel(x, y);
    RaySample {
        origin: pose.translation,
        direction: pose.rotation.rotate(crate::geometry::vscale(dir_cam, inv_len)),
        dir_cam_z: inv_len,
        rgb: [px[0], px[1], px[2]],
        depth_z,
    }
}
