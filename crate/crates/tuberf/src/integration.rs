//! Region integration: dual filtering of candidate blocks per query and
//! inverse-distance-weighted blending of per-block renders.

use serde::{Deserialize, Serialize};

use crate::field::MultiLevelField;
use crate::geometry::{vadd, vcross, vdot, vnorm, vscale, vsub, Vec3};
use crate::img::Image;
use crate::segmentation::Block;

#[derive(Debug, thiserror::Error)]
pub enum IntegrationError {
    #[error("no surviving blocks; caller must fall back to the nearest block")]
    NoSurvivors,
    #[error("blend weight count {weights} != render count {renders}")]
    WeightCount { weights: usize, renders: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    /// Rendering blend ratio (IDW exponent).
    pub epsilon: f64,
    /// Distance filter threshold in world units; `None` derives
    /// 1.5x the mean adjacent-block center spacing.
    pub distance_threshold: Option<f64>,
    pub visibility_threshold: f64,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            epsilon: 2.0,
            distance_threshold: None,
            visibility_threshold: 0.05,
        }
    }
}

impl IntegrationConfig {
    /// Resolve the distance threshold against actual block centers.
    pub fn resolved_distance_threshold(&self, centers: &[Vec3]) -> f64 {
        if let Some(t) = self.distance_threshold {
            return t;
        }
        if centers.len() < 2 {
            return f64::INFINITY;
        }
        let mut acc = 0.0;
        for w in centers.windows(2) {
            acc += vnorm(vsub(w[1], w[0]));
        }
        1.5 * acc / (centers.len() - 1) as f64
    }
}

/// Distance from a point to the infinite line through a and b; degenerates
/// to the point distance when the centers coincide.
pub fn point_line_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = vsub(b, a);
    let len = vnorm(ab);
    if len < 1e-12 {
        return vnorm(vsub(p, a));
    }
    vnorm(vcross(vsub(p, a), ab)) / len
}

/// Distance filter for one adjacent block pair: both blocks share the
/// verdict, retained iff the observation point lies within `threshold` of
/// the line joining their centers.
pub fn filter_by_distance(p_t: Vec3, center_a: Vec3, center_b: Vec3, threshold: f64) -> (bool, bool) {
    let keep = point_line_distance(p_t, center_a, center_b) < threshold;
    (keep, keep)
}

/// Visibility filter: keep the block iff its visibility head predicts
/// transmittance at or above the threshold for this point and direction.
pub fn filter_by_visibility(
    p_t: Vec3,
    direction: Vec3,
    field: &MultiLevelField,
    threshold: f64,
) -> bool {
    field.visibility(p_t, direction) >= threshold
}

/// Normalized inverse-distance weights over the surviving block centers.
/// An exact center hit (distance < 1e-9) takes weight 1.
pub fn idw_weights(p_t: Vec3, centers: &[Vec3], epsilon: f64) -> Result<Vec<f64>, IntegrationError> {
    if centers.is_empty() {
        return Err(IntegrationError::NoSurvivors);
    }
    let dists: Vec<f64> = centers.iter().map(|&c| vnorm(vsub(p_t, c))).collect();
    if let Some(hit) = dists.iter().position(|&d| d < 1e-9) {
        let mut w = vec![0.0; centers.len()];
        w[hit] = 1.0;
        return Ok(w);
    }
    let raw: Vec<f64> = dists.iter().map(|&d| d.powf(-epsilon)).collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / sum).collect())
}

/// A finished per-block render of one view.
#[derive(Debug, Clone)]
pub struct BlockRender {
    pub block_index: usize,
    pub center: Vec3,
    pub rgb: Image,
    pub depth: Image,
}

/// Pixel-wise convex combination of per-block renders.
pub fn blend(renders: &[BlockRender], weights: &[f64]) -> Result<(Image, Image), IntegrationError> {
    if renders.len() != weights.len() || renders.is_empty() {
        return Err(IntegrationError::WeightCount {
            weights: weights.len(),
            renders: renders.len(),
        });
    }
    let (w, h) = (renders[0].rgb.width, renders[0].rgb.height);
    let mut rgb = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    for (r, &wt) in renders.iter().zip(weights) {
        for (acc, &v) in rgb.data.iter_mut().zip(&r.rgb.data) {
            *acc += wt * v;
        }
        for (acc, &v) in depth.data.iter_mut().zip(&r.depth.data) {
            *acc += wt * v;
        }
    }
    Ok((rgb, depth))
}

/// Which blocks see a query, and with what normalized weights.
///
/// Runs the pairwise distance filter over adjacent blocks (a block stays if
/// any pair containing it passes), then the per-block visibility filter,
/// then IDW. When everything is filtered away the nearest-center block
/// renders alone.
pub fn select_blocks(
    p_t: Vec3,
    direction: Vec3,
    blocks: &[Block],
    fields: &[&MultiLevelField],
    config: &IntegrationConfig,
) -> Vec<(usize, f64)> {
    debug_assert_eq!(blocks.len(), fields.len());
    let centers: Vec<Vec3> = blocks.iter().map(|b| b.center).collect();
    let threshold = config.resolved_distance_threshold(&centers);

    let mut keep = vec![blocks.len() <= 1; blocks.len()];
    for i in 0..blocks.len().saturating_sub(1) {
        let (ka, kb) = filter_by_distance(p_t, centers[i], centers[i + 1], threshold);
        keep[i] = keep[i] || ka;
        keep[i + 1] = keep[i + 1] || kb;
    }
    for (i, k) in keep.iter_mut().enumerate() {
        if *k {
            *k = filter_by_visibility(p_t, direction, fields[i], config.visibility_threshold);
        }
    }

    let surviving: Vec<usize> = (0..blocks.len()).filter(|&i| keep[i]).collect();
    if surviving.is_empty() {
        // nearest-center fallback; dropping pixels is never acceptable
        let nearest = (0..blocks.len())
            .min_by(|&a, &b| {
                let da = vnorm(vsub(p_t, centers[a]));
                let db = vnorm(vsub(p_t, centers[b]));
                da.partial_cmp(&db).unwrap()
            })
            .expect("at least one block");
        return vec![(nearest, 1.0)];
    }
    let survivor_centers: Vec<Vec3> = surviving.iter().map(|&i| centers[i]).collect();
    let weights = idw_weights(p_t, &survivor_centers, config.epsilon)
        .expect("surviving set is non-empty");
    surviving.into_iter().zip(weights).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_line_distance_cases() {
        // on the line
        assert!(point_line_distance([1.0, 0.0, 0.0], [0.0; 3], [2.0, 0.0, 0.0]) < 1e-12);
        // textbook offset
        let d = point_line_distance([1.0, 1.0, 0.0], [0.0; 3], [2.0, 0.0, 0.0]);
        assert!((d - 1.0).abs() < 1e-12);
        // coincident centers degenerate to point distance
        let d = point_line_distance([3.0, 4.0, 0.0], [0.0; 3], [0.0; 3]);
        assert!((d - 5.0).abs() < 1e-12);
    }

    #[test]
    fn distance_filter_thresholds() {
        let a = [0.0; 3];
        let b = [2.0, 0.0, 0.0];
        let p = [1.0, 1.0, 0.0];
        assert_eq!(filter_by_distance(p, a, b, 1.5), (true, true));
        assert_eq!(filter_by_distance(p, a, b, 0.5), (false, false));
    }

    #[test]
    fn distance_filter_translation_invariant() {
        let t = [5.0, -3.0, 2.0];
        let a = [0.0; 3];
        let b = [2.0, 0.0, 0.0];
        let p = [1.0, 1.0, 0.0];
        let before = filter_by_distance(p, a, b, 1.5);
        let after = filter_by_distance(vadd(p, t), vadd(a, t), vadd(b, t), 1.5);
        assert_eq!(before, after);
    }

    #[test]
    fn idw_single_block() {
        let w = idw_weights([0.0; 3], &[[1.0, 0.0, 0.0]], 2.0).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn idw_equidistant_symmetry() {
        for eps in [0.5, 1.0, 2.0, 8.0] {
            let w = idw_weights(
                [0.0; 3],
                &[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
                eps,
            )
            .unwrap();
            assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn idw_distance_one_two() {
        let w = idw_weights(
            [0.0; 3],
            &[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            1.0,
        )
        .unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn idw_weights_normalize_and_bound() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let centers: Vec<Vec3> = (0..4)
                .map(|_| {
                    [
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                    ]
                })
                .collect();
            let w = idw_weights([0.1, 0.2, 0.3], &centers, 2.0).unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn idw_weight_monotone_in_distance() {
        let w = idw_weights(
            [0.0; 3],
            &[[1.0, 0.0, 0.0], [1.5, 0.0, 0.0], [3.0, 0.0, 0.0]],
            2.0,
        )
        .unwrap();
        assert!(w[0] > w[1] && w[1] > w[2]);
    }

    #[test]
    fn idw_large_epsilon_concentrates_on_nearest() {
        let w = idw_weights(
            [0.0; 3],
            &[[1.0, 0.0, 0.0], [1.3, 0.0, 0.0], [2.0, 0.0, 0.0]],
            64.0,
        )
        .unwrap();
        assert!((w[0] - 1.0).abs() < 1e-6, "nearest weight {}", w[0]);
    }

    #[test]
    fn idw_exact_hit_takes_all() {
        let w = idw_weights(
            [1.0, 0.0, 0.0],
            &[[1.0, 0.0, 0.0], [4.0, 0.0, 0.0]],
            2.0,
        )
        .unwrap();
        assert_eq!(w, vec![1.0, 0.0]);
    }

    #[test]
    fn idw_zero_blocks_errors() {
        assert!(matches!(
            idw_weights([0.0; 3], &[], 2.0),
            Err(IntegrationError::NoSurvivors)
        ));
    }

    fn const_render(index: usize, v: f64, d: f64) -> BlockRender {
        BlockRender {
            block_index: index,
            center: [index as f64, 0.0, 0.0],
            rgb: Image::from_data(2, 2, 3, vec![v; 12]),
            depth: Image::from_data(2, 2, 1, vec![d; 4]),
        }
    }

    #[test]
    fn blend_identical_renders_is_identity() {
        let renders = vec![const_render(0, 0.4, 1.0), const_render(1, 0.4, 1.0)];
        let (rgb, depth) = blend(&renders, &[0.3, 0.7]).unwrap();
        assert!(rgb.data.iter().all(|&v| (v - 0.4).abs() < 1e-12));
        assert!(depth.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn blend_degenerate_weights_select_first() {
        let renders = vec![const_render(0, 0.2, 1.0), const_render(1, 0.9, 2.0)];
        let (rgb, _) = blend(&renders, &[1.0, 0.0]).unwrap();
        assert!(rgb.data.iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn blend_convex_combination() {
        let renders = vec![const_render(0, 0.2, 1.0), const_render(1, 0.8, 3.0)];
        let (rgb, depth) = blend(&renders, &[0.25, 0.75]).unwrap();
        assert!(rgb.data.iter().all(|&v| (v - 0.65).abs() < 1e-12));
        assert!(depth.data.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn blend_stays_within_input_envelope() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let data: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
            let depth: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..3.0)).collect();
            BlockRender {
                block_index: 0,
                center: [0.0; 3],
                rgb: Image::from_data(2, 2, 3, data),
                depth: Image::from_data(2, 2, 1, depth),
            }
        };
        let renders = vec![mk(&mut rng), mk(&mut rng), mk(&mut rng)];
        let (rgb, _) = blend(&renders, &[0.2, 0.5, 0.3]).unwrap();
        for i in 0..12 {
            let lo = renders.iter().map(|r| r.rgb.data[i]).fold(f64::INFINITY, f64::min);
            let hi = renders.iter().map(|r| r.rgb.data[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(rgb.data[i] >= lo - 1e-12 && rgb.data[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn visibility_filter_thresholds() {
        use crate::field::{ActivationMode, EncodingConfig, FieldConfig, MultiLevelField};
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
            seed: 5,
        });
        let p = [0.1, 0.2, 0.3];
        let d = [0.0, 0.0, 1.0];
        // young head outputs near 0.5: kept at the default threshold
        assert!(filter_by_visibility(p, d, &field, 0.05));
        // nothing survives a threshold of 1.0 (sigmoid is strictly below 1)
        assert!(!filter_by_visibility(p, d, &field, 1.0));
    }

    #[test]
    fn derived_distance_threshold_uses_center_spacing() {
        let cfg = IntegrationConfig::default();
        let centers = vec![[0.0; 3], [2.0, 0.0, 0.0], [4.0, 0.0, 0.0]];
        assert!((cfg.resolved_distance_threshold(&centers) - 3.0).abs() < 1e-12);
        assert_eq!(
            IntegrationConfig {
                distance_threshold: Some(0.7),
                ..Default::default()
            }
            .resolved_distance_threshold(&centers),
            0.7
        );
    }
}
