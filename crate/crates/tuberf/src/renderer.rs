//! Discretized volume rendering along rays: color, expected depth,
//! transmittance profile, and compositing weights, with a full-image path.
//!
//! Quadrature: samples at stratified bin starts (uniform in the bin when
//! jitter is on), alpha_j = 1 - exp(-sigma_j delta_j), T_j the running
//! product of (1 - alpha), w_j = T_j alpha_j. The last delta is
//! far - tau_last, which keeps homogeneous-medium transmittance analytic.
//! Depth is the weight-normalized expected termination distance.

use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::field::{encode_batch, FieldError, MultiLevelField};
use crate::geometry::{pixel_direction, CameraIntrinsics, Pose, Ray, Vec3};
use crate::img::Image;

/// Anything that can answer batched color/density queries against a frozen
/// snapshot. The radiance field implements it; tests plug in analytic media.
pub trait VolumeField: Sync {
    fn query_points(&self, xs: &[Vec3], ds: &[Vec3], active_stages: usize)
        -> (Vec<[f64; 3]>, Vec<f64>);
}

impl VolumeField for MultiLevelField {
    fn query_points(
        &self,
        xs: &[Vec3],
        ds: &[Vec3],
        active_stages: usize,
    ) -> (Vec<[f64; 3]>, Vec<f64>) {
        self.query_batch(xs, ds, active_stages)
            .expect("active_stages validated by caller")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub stratified_jitter: bool,
    pub background: [f64; 3],
    pub white_background: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 128,
            stratified_jitter: false,
            background: [0.0; 3],
            white_background: false,
        }
    }
}

impl RenderConfig {
    pub fn background_color(&self) -> [f64; 3] {
        if self.white_background {
            [1.0; 3]
        } else {
            self.background
        }
    }
}

/// Per-ray rendering result. `transmittance[j]` is the compositing
/// transmittance before sample j; weights and transmittance satisfy
/// sum(w) + final_transmittance = 1.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub depth: f64,
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
    pub final_transmittance: f64,
    pub taus: Vec<f64>,
}

/// Stratified sample distances: bin starts when jitter is off, uniform
/// within each bin otherwise. Bin width is (far - near) / samples.
pub fn sample_taus(ray: &Ray, samples: usize, jitter: Option<&mut dyn FnMut() -> f64>) -> Vec<f64> {
    debug_assert!(samples >= 2, "need at least 2 samples per ray");
    let delta = (ray.far - ray.near) / samples as f64;
    match jitter {
        None => (0..samples).map(|j| ray.near + j as f64 * delta).collect(),
        Some(u) => (0..samples)
            .map(|j| ray.near + (j as f64 + u()) * delta)
            .collect(),
    }
}

fn deltas(taus: &[f64], far: f64) -> Vec<f64> {
    let n = taus.len();
    let mut out = Vec::with_capacity(n);
    for j in 0..n - 1 {
        out.push(taus[j + 1] - taus[j]);
    }
    out.push(far - taus[n - 1]);
    out
}

/// Composite pre-queried samples into a [`RenderOutput`].
pub fn composite(
    taus: Vec<f64>,
    colors: &[[f64; 3]],
    sigmas: &[f64],
    far: f64,
    background: [f64; 3],
) -> RenderOutput {
    let n = taus.len();
    let ds = deltas(&taus, far);
    let mut transmittance = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut color = [0.0; 3];
    let mut depth_num = 0.0;
    let mut t = 1.0f64;
    for j in 0..n {
        transmittance.push(t);
        let alpha = 1.0 - (-sigmas[j] * ds[j]).exp();
        let w = t * alpha;
        weights.push(w);
        for c in 0..3 {
            color[c] += w * colors[j][c];
        }
        depth_num += w * taus[j];
        t *= 1.0 - alpha;
    }
    let weight_sum: f64 = weights.iter().sum();
    for c in 0..3 {
        color[c] += background[c] * t;
    }
    RenderOutput {
        color,
        depth: depth_num / weight_sum.max(1e-8),
        transmittance,
        weights,
        final_transmittance: t,
        taus,
    }
}

/// Render one ray against a frozen field.
pub fn render_ray(
    field: &dyn VolumeField,
    ray: &Ray,
    config: &RenderConfig,
    active_stages: usize,
    rng: Option<&mut dyn FnMut() -> f64>,
) -> RenderOutput {
    let taus = sample_taus(
        ray,
        config.samples_per_ray,
        if config.stratified_jitter { rng } else { None },
    );
    let xs: Vec<Vec3> = taus.iter().map(|&t| ray.at(t)).collect();
    let ds = vec![ray.direction; taus.len()];
    let (colors, sigmas) = field.query_points(&xs, &ds, active_stages);
    composite(taus, &colors, &sigmas, ray.far, config.background_color())
}

/// Per-sample transmittance values from a render, detached from any
/// gradient flow; these supervise the visibility head.
pub fn ray_transmittance_targets(output: &RenderOutput) -> Vec<f64> {
    output.transmittance.clone()
}

/// Render a batch of rays against a frozen field with one batched query.
pub fn render_rays(
    field: &dyn VolumeField,
    rays: &[Ray],
    config: &RenderConfig,
    active_stages: usize,
) -> Vec<RenderOutput> {
    let s = config.samples_per_ray;
    let mut xs = Vec::with_capacity(rays.len() * s);
    let mut dirs = Vec::with_capacity(rays.len() * s);
    let mut all_taus = Vec::with_capacity(rays.len());
    for ray in rays {
        let taus = sample_taus(ray, s, None);
        for &t in &taus {
            xs.push(ray.at(t));
            dirs.push(ray.direction);
        }
        all_taus.push(taus);
    }
    let (colors, sigmas) = field.query_points(&xs, &dirs, active_stages);
    rays.iter()
        .zip(all_taus)
        .enumerate()
        .map(|(i, (ray, taus))| {
            composite(
                taus,
                &colors[i * s..(i + 1) * s],
                &sigmas[i * s..(i + 1) * s],
                ray.far,
                config.background_color(),
            )
        })
        .collect()
}

/// Full-raster render: RGB and depth images. Deterministic when jitter is
/// off; data-parallel over pixel rows.
pub fn render_image(
    field: &dyn VolumeField,
    pose: &Pose,
    k: &CameraIntrinsics,
    config: &RenderConfig,
    active_stages: usize,
    near: f64,
    far: f64,
) -> (Image, Image) {
    let (w, h) = (k.width, k.height);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let rays: Vec<Ray> = (0..w)
                .map(|x| {
                    Ray::new(
                        pose.translation,
                        pixel_direction(pose, k, x as f64 + 0.5, y as f64 + 0.5),
                        near,
                        far,
                    )
                    .expect("near/far validated by caller")
                })
                .collect();
            let outs = render_rays(field, &rays, config, active_stages);
            let mut rgb = Vec::with_capacity(w * 3);
            let mut depth = Vec::with_capacity(w);
            for o in outs {
                rgb.extend_from_slice(&o.color);
                depth.push(o.depth);
            }
            (rgb, depth)
        })
        .collect();
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    for (r, d) in rows {
        rgb.extend(r);
        depth.extend(d);
    }
    (
        Image::from_data(w, h, 3, rgb),
        Image::from_data(w, h, 1, depth),
    )
}

/// Convert a ray-distance depth image (as produced by [`render_image`])
/// into camera-space z, the convention of stored depth maps.
pub fn ray_depth_to_z(depth: &mut Image, k: &CameraIntrinsics) {
    for y in 0..depth.height {
        for x in 0..depth.width {
            let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
            let du = (u - k.cx) / k.fx;
            let dv = (v - k.cy) / k.fy;
            let inv_len = 1.0 / (du * du + dv * dv + 1.0).sqrt();
            depth.pixel_mut(x, y)[0] *= inv_len;
        }
    }
}

/// Tape-path render of a ray batch: differentiable color and depth plus
/// detached transmittance targets for the visibility head.
pub struct DiffRender {
    /// [rays, 3] composited color.
    pub color: NodeId,
    /// [rays] expected termination distance.
    pub depth: NodeId,
    /// Detached compositing transmittance per sample, row-major [rays * samples].
    pub transmittance_targets: Vec<f64>,
    /// Sample positions, row-major per ray.
    pub points: Vec<Vec3>,
    /// Per-sample unit view directions.
    pub directions: Vec<Vec3>,
    /// Sample distances, row-major [rays * samples].
    pub taus: Vec<f64>,
}

pub fn render_rays_on_tape(
    tape: &mut Tape,
    field: &MultiLevelField,
    rays: &[Ray],
    config: &RenderConfig,
    active_stages: usize,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<DiffRender, FieldError> {
    let s = config.samples_per_ray;
    let r = rays.len();
    let mut taus = Vec::with_capacity(r * s);
    let mut points = Vec::with_capacity(r * s);
    let mut directions = Vec::with_capacity(r * s);
    let mut delta_data = Vec::with_capacity(r * s);
    let use_jitter = config.stratified_jitter && rng.is_some();
    for ray in rays {
        let mut draw = || match &mut rng {
            Some(rng) => rng.gen::<f64>(),
            None => 0.0,
        };
        let ts = if use_jitter {
            sample_taus(ray, s, Some(&mut draw))
        } else {
            sample_taus(ray, s, None)
        };
        delta_data.extend(deltas(&ts, ray.far));
        for &t in &ts {
            points.push(ray.at(t));
            directions.push(ray.direction);
        }
        taus.extend(ts);
    }

    let enc = &field.config.encoding;
    let enc_x = tape.input(encode_batch(&points, enc.position_bands, enc.include_input));
    let enc_d = tape.input(encode_batch(
        &directions,
        enc.direction_bands,
        enc.include_input,
    ));
    let queried = field.query_on_tape(tape, enc_x, enc_d, active_stages)?;

    // sigma [r, s] and optical depth per bin
    let sigma = tape.reshape(queried.density, vec![r, s])?;
    let delta = tape.input(Tensor::new(vec![r, s], delta_data).unwrap());
    let optical = tape.mul(sigma, delta)?;
    // T_j = exp(-sum_{l<j} sigma_l delta_l); alpha_j = 1 - exp(-sigma_j delta_j)
    let acc = tape.exclusive_cumsum_axis1(optical)?;
    let neg_acc = tape.neg(acc);
    let transmittance = tape.exp(neg_acc);
    let neg_opt = tape.neg(optical);
    let exp_opt = tape.exp(neg_opt);
    let neg_exp = tape.mul_scalar(exp_opt, -1.0);
    let alpha = tape.add_scalar(neg_exp, 1.0);
    let weights = tape.mul(transmittance, alpha)?;

    // color channels composited separately, then reassembled to [r, 3]
    let background = config.background_color();
    let total_optical = tape.sum_axis1(optical)?;
    let neg_total = tape.neg(total_optical);
    let t_final = tape.exp(neg_total);
    let mut channel_nodes = Vec::with_capacity(3);
    for c in 0..3 {
        let ch = tape.slice_cols(queried.color, c, c + 1)?;
        let ch = tape.reshape(ch, vec![r, s])?;
        let weighted = tape.mul(ch, weights)?;
        let summed = tape.sum_axis1(weighted)?;
        let with_bg = if background[c] != 0.0 {
            let bg = tape.mul_scalar(t_final, background[c]);
            tape.add(summed, bg)?
        } else {
            summed
        };
        channel_nodes.push(tape.reshape(with_bg, vec![r, 1])?);
    }
    let col01 = tape.concat(channel_nodes[0], channel_nodes[1])?;
    let color = tape.concat(col01, channel_nodes[2])?;

    // depth = sum(w tau) / max(sum w, 1e-8)
    let tau_node = tape.input(Tensor::new(vec![r, s], taus.clone()).unwrap());
    let wtau = tape.mul(weights, tau_node)?;
    let depth_num = tape.sum_axis1(wtau)?;
    let weight_sum = tape.sum_axis1(weights)?;
    let weight_sum = tape.clamp_min(weight_sum, 1e-8);
    let depth = tape.div(depth_num, weight_sum)?;

    let transmittance_targets = tape.value(transmittance).data().to_vec();
    Ok(DiffRender {
        color,
        depth,
        transmittance_targets,
        points,
        directions,
        taus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ActivationMode, EncodingConfig, FieldConfig};

    struct Homogeneous {
        sigma: f64,
        color: [f64; 3],
    }

    impl VolumeField for Homogeneous {
        fn query_points(
            &self,
            xs: &[Vec3],
            _ds: &[Vec3],
            _k: usize,
        ) -> (Vec<[f64; 3]>, Vec<f64>) {
            (vec![self.color; xs.len()], vec![self.sigma; xs.len()])
        }
    }

    /// Density grows linearly along z: sigma(z) = rate * z.
    struct LinearRamp {
        rate: f64,
    }

    impl VolumeField for LinearRamp {
        fn query_points(&self, xs: &[Vec3], _ds: &[Vec3], _k: usize) -> (Vec<[f64; 3]>, Vec<f64>) {
            (
                vec![[0.5; 3]; xs.len()],
                xs.iter().map(|p| self.rate * p[2].max(0.0)).collect(),
            )
        }
    }

    /// Deterministic pseudo-random medium for partition-of-unity checks.
    struct HashField;

    impl VolumeField for HashField {
        fn query_points(&self, xs: &[Vec3], _ds: &[Vec3], _k: usize) -> (Vec<[f64; 3]>, Vec<f64>) {
            let sig = |p: &Vec3| {
                let h = (p[0] * 12.9898 + p[1] * 78.233 + p[2] * 37.719).sin() * 43758.5453;
                (h - h.floor()) * 5.0
            };
            (vec![[0.3, 0.6, 0.9]; xs.len()], xs.iter().map(sig).collect())
        }
    }

    fn z_ray(near: f64, far: f64) -> Ray {
        Ray::new([0.0; 3], [0.0, 0.0, 1.0], near, far).unwrap()
    }

    #[test]
    fn empty_space_returns_background() {
        let cfg = RenderConfig {
            samples_per_ray: 32,
            ..Default::default()
        };
        let out = render_ray(&Homogeneous { sigma: 0.0, color: [0.7; 3] }, &z_ray(0.1, 2.0), &cfg, 1, None);
        assert_eq!(out.color, [0.0; 3]);
        assert_eq!(out.depth, 0.0, "guarded depth for zero weight sum");
        assert!((out.final_transmittance - 1.0).abs() < 1e-12);

        let white = RenderConfig {
            samples_per_ray: 32,
            white_background: true,
            ..Default::default()
        };
        let out = render_ray(&Homogeneous { sigma: 0.0, color: [0.7; 3] }, &z_ray(0.1, 2.0), &white, 1, None);
        assert_eq!(out.color, [1.0; 3]);
    }

    #[test]
    fn homogeneous_medium_matches_analytic_integral() {
        let cfg = RenderConfig {
            samples_per_ray: 256,
            ..Default::default()
        };
        let c = [0.4, 0.7, 0.2];
        let out = render_ray(
            &Homogeneous { sigma: 2.0, color: c },
            &z_ray(1e-9, 1.0),
            &cfg,
            1,
            None,
        );
        let expect_t = (-2.0f64).exp();
        assert!(
            (out.final_transmittance - expect_t).abs() < 1e-3,
            "T {} vs {}",
            out.final_transmittance,
            expect_t
        );
        for ch in 0..3 {
            let expect = c[ch] * (1.0 - expect_t);
            assert!((out.color[ch] - expect).abs() < 1e-3);
        }
    }

    #[test]
    fn transmittance_targets_match_analytic_profile() {
        let cfg = RenderConfig {
            samples_per_ray: 256,
            ..Default::default()
        };
        let sigma = 2.0;
        let out = render_ray(
            &Homogeneous { sigma, color: [0.5; 3] },
            &z_ray(1e-9, 1.0),
            &cfg,
            1,
            None,
        );
        let targets = ray_transmittance_targets(&out);
        for (j, &t) in targets.iter().enumerate() {
            let expect = (-sigma * out.taus[j]).exp();
            assert!(
                (t - expect).abs() < 1e-3,
                "sample {j}: {t} vs {expect}"
            );
        }
        // all-ones for empty space
        let out0 = render_ray(
            &Homogeneous { sigma: 0.0, color: [0.5; 3] },
            &z_ray(1e-9, 1.0),
            &cfg,
            1,
            None,
        );
        assert!(ray_transmittance_targets(&out0).iter().all(|&t| t == 1.0));
    }

    #[test]
    fn transmittance_profile_non_increasing() {
        let cfg = RenderConfig {
            samples_per_ray: 64,
            ..Default::default()
        };
        for seed in 0..10 {
            let origin = [seed as f64 * 0.3, 0.1, 0.0];
            let ray = Ray::new(origin, [0.2, 0.1, 1.0], 0.05, 3.0).unwrap();
            let out = render_ray(&HashField, &ray, &cfg, 1, None);
            for w in out.transmittance.windows(2) {
                assert!(w[1] <= w[0] + 1e-15);
            }
            assert!(out.weights.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn partition_of_unity_on_random_fields() {
        let cfg = RenderConfig {
            samples_per_ray: 96,
            ..Default::default()
        };
        for i in 0..20 {
            let ray = Ray::new([i as f64, -0.3, 0.2], [0.1, 0.9, 0.4], 0.1, 4.0).unwrap();
            let out = render_ray(&HashField, &ray, &cfg, 1, None);
            let total: f64 = out.weights.iter().sum::<f64>() + out.final_transmittance;
            assert!((total - 1.0).abs() < 1e-6, "partition violated: {total}");
        }
    }

    #[test]
    fn opaque_front_sample_dominates() {
        let cfg = RenderConfig {
            samples_per_ray: 64,
            ..Default::default()
        };
        let out = render_ray(
            &Homogeneous { sigma: 1e9, color: [0.3, 0.5, 0.9] },
            &z_ray(0.5, 1.5),
            &cfg,
            1,
            None,
        );
        let delta = 1.0 / 64.0;
        assert!((out.color[0] - 0.3).abs() < 1e-9);
        assert!((out.depth - 0.5).abs() <= delta, "depth {} vs bin at near", out.depth);
    }

    #[test]
    fn quadrature_error_at_least_halves_with_doubled_samples() {
        // Linear-density medium, analytic T = exp(-rate * (far^2-near^2) / 2).
        let rate = 3.0;
        let (near, far) = (1e-9, 1.0);
        let expect = f64::exp(-rate * (far * far - near * near) / 2.0);
        let mut errs = Vec::new();
        for s in [64usize, 128, 256] {
            let cfg = RenderConfig {
                samples_per_ray: s,
                ..Default::default()
            };
            let out = render_ray(&LinearRamp { rate }, &z_ray(near, far), &cfg, 1, None);
            errs.push((out.final_transmittance - expect).abs());
        }
        assert!(errs[1] <= errs[0] / 2.0 + 1e-12, "64->128: {errs:?}");
        assert!(errs[2] <= errs[1] / 2.0 + 1e-12, "128->256: {errs:?}");
    }

    #[test]
    fn image_render_is_deterministic_and_sized() {
        let field = MultiLevelField::new(FieldConfig {
            encoding: EncodingConfig {
                position_bands: 2,
                direction_bands: 1,
                include_input: true,
            },
            hidden: 8,
            trunk_layers: 1,
            color_hidden: 8,
            vis_hidden: 8,
            vis_layers: 1,
            activation: ActivationMode::PaperLiteral,
            seed: 7,
        });
        let k = CameraIntrinsics::new(16.0, 16.0, 8.0, 6.0, 16, 12).unwrap();
        let cfg = RenderConfig {
            samples_per_ray: 8,
            ..Default::default()
        };
        let (rgb1, d1) = render_image(&field, &Pose::identity(), &k, &cfg, 1, 0.1, 2.0);
        let (rgb2, d2) = render_image(&field, &Pose::identity(), &k, &cfg, 1, 0.1, 2.0);
        assert_eq!(rgb1.width, 16);
        assert_eq!(rgb1.height, 12);
        assert!(rgb1.data.iter().zip(&rgb2.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(d1.data.iter().zip(&d2.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn tape_path_matches_frozen_path() {
        let field = MultiLevelField::new(FieldConfig {
            encoding: EncodingConfig {
                position_bands: 3,
                direction_bands: 2,
                include_input: true,
            },
            hidden: 12,
            trunk_layers: 2,
            color_hidden: 8,
            vis_hidden: 8,
            vis_layers: 1,
            activation: ActivationMode::PaperLiteral,
            seed: 21,
        });
        let cfg = RenderConfig {
            samples_per_ray: 16,
            ..Default::default()
        };
        let rays = vec![
            Ray::new([0.0, 0.0, 0.0], [0.1, -0.2, 1.0], 0.2, 3.0).unwrap(),
            Ray::new([0.5, 0.1, -0.2], [-0.3, 0.1, 1.0], 0.2, 3.0).unwrap(),
        ];
        let frozen: Vec<RenderOutput> = render_rays(&field, &rays, &cfg, 1);
        let mut tape = Tape::new();
        let diff = render_rays_on_tape(&mut tape, &field, &rays, &cfg, 1, None).unwrap();
        let dc = tape.value(diff.color).data();
        let dd = tape.value(diff.depth).data();
        for (i, out) in frozen.iter().enumerate() {
            for c in 0..3 {
                assert!(
                    (dc[i * 3 + c] - out.color[c]).abs() < 1e-12,
                    "color ray {i} ch {c}: {} vs {}",
                    dc[i * 3 + c],
                    out.color[c]
                );
            }
            assert!((dd[i] - out.depth).abs() < 1e-9);
            for (j, &t) in out.transmittance.iter().enumerate() {
                assert!((diff.transmittance_targets[i * cfg.samples_per_ray + j] - t).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rendered_color_gradient_matches_finite_differences() {
        // 8-sample toy ray; wiggle the stage density bias.
        let mk = || {
            MultiLevelField::new(FieldConfig {
                encoding: EncodingConfig {
                    position_bands: 2,
                    direction_bands: 1,
                    include_input: true,
                },
                hidden: 8,
                trunk_layers: 1,
                color_hidden: 8,
                vis_hidden: 8,
                vis_layers: 1,
                activation: ActivationMode::PaperLiteral,
                seed: 3,
            })
        };
        let cfg = RenderConfig {
            samples_per_ray: 8,
            ..Default::default()
        };
        let ray = Ray::new([0.1, -0.1, 0.0], [0.0, 0.1, 1.0], 0.3, 2.0).unwrap();

        let loss_of = |field: &MultiLevelField| {
            let out = render_rays(field, std::slice::from_ref(&ray), &cfg, 1);
            out[0].color.iter().sum::<f64>()
        };

        let mut field = mk();
        let bias = field.params().find("stage0.density.b").unwrap();

        // analytic gradient via the tape
        let mut tape = Tape::new();
        let diff = render_rays_on_tape(&mut tape, &field, std::slice::from_ref(&ray), &cfg, 1, None).unwrap();
        let loss = tape.sum_all(diff.color);
        let mut params = field.params().clone();
        tape.backward(loss, &mut params).unwrap();
        let analytic = params.grad(bias).data()[0];

        let h = 1e-5;
        let base = field.params().value(bias).data()[0];
        field.params_mut().value_mut(bias).data_mut()[0] = base + h;
        let fp = loss_of(&field);
        field.params_mut().value_mut(bias).data_mut()[0] = base - h;
        let fm = loss_of(&field);
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-6);
        assert!(rel < 1e-3, "analytic {analytic} vs numeric {numeric} (rel {rel:.2e})");
    }
}
