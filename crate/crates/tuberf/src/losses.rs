//! Training objectives and their weighted combination.
//!
//! All losses are tape nodes so gradients flow to the rendered quantities;
//! supervision targets enter as constants. Masking is by construction: the
//! batch builders only include valid pixels, so a masked reduction can
//! never read an invalid value.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};
use crate::features::{FeatureExtractor, FeaturesError};
use crate::img::Image;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("{context}: prediction count {pred} != target count {target}")]
    CountMismatch {
        context: &'static str,
        pred: usize,
        target: usize,
    },
    #[error("loss component {0} is not finite")]
    NonFinite(&'static str),
    #[error("feature maps have different dims: {a:?} vs {b:?}")]
    FeatureDims { a: (usize, usize), b: (usize, usize) },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Features(#[from] FeaturesError),
}

/// Weights of the combined objective (depth, ori, feature, transparency).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub depth: f64,
    pub ori: f64,
    pub vit: f64,
    pub trans: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 8.0,
            ori: 1.0,
            vit: 10.0,
            trans: 1.0,
        }
    }
}

/// Mean over rays of the squared L2 color error (channel sum per ray).
pub fn pixel_loss(tape: &mut Tape, pred_rgb: NodeId, target_rgb: &[[f64; 3]]) -> Result<NodeId, LossError> {
    let pred_rows = tape.value(pred_rgb).rows();
    if pred_rows != target_rgb.len() {
        return Err(LossError::CountMismatch {
            context: "pixel_loss",
            pred: pred_rows,
            target: target_rgb.len(),
        });
    }
    let flat: Vec<f64> = target_rgb.iter().flatten().copied().collect();
    let t = tape.input(Tensor::new(vec![target_rgb.len(), 3], flat).unwrap());
    let diff = tape.sub(pred_rgb, t)?;
    let sq = tape.mul(diff, diff)?;
    let per_ray = tape.sum_axis1(sq)?;
    Ok(tape.mean(per_ray))
}

/// Plain mean squared error between a [n] prediction node and targets.
pub fn scalar_mse(tape: &mut Tape, pred: NodeId, target: &[f64]) -> Result<NodeId, LossError> {
    let n = tape.value(pred).numel();
    if n != target.len() {
        return Err(LossError::CountMismatch {
            context: "scalar_mse",
            pred: n,
            target: target.len(),
        });
    }
    let t = tape.input(Tensor::from_vec(target.to_vec()));
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Rendered-vs-target pairs for one sampled pixel set.
pub struct RenderedSamples<'a> {
    pub rgb_pred: NodeId,
    pub rgb_target: &'a [[f64; 3]],
    pub depth_pred: NodeId,
    pub depth_target: &'a [f64],
}

/// Original-pose loss: patch term plus random-sample term, each the sum of
/// an RGB MSE and a depth MSE over its pixel set.
pub fn ori_loss(
    tape: &mut Tape,
    patch: Option<&RenderedSamples>,
    rand: &RenderedSamples,
) -> Result<NodeId, LossError> {
    let rand_rgb = pixel_loss(tape, rand.rgb_pred, rand.rgb_target)?;
    let rand_depth = scalar_mse(tape, rand.depth_pred, rand.depth_target)?;
    let mut total = tape.add(rand_rgb, rand_depth)?;
    if let Some(p) = patch {
        let patch_rgb = pixel_loss(tape, p.rgb_pred, p.rgb_target)?;
        let patch_depth = scalar_mse(tape, p.depth_pred, p.depth_target)?;
        let patch_sum = tape.add(patch_rgb, patch_depth)?;
        total = tape.add(total, patch_sum)?;
    }
    Ok(total)
}

/// One warped-depth supervision term: already-masked prediction/target
/// pairs for a pose family.
pub struct DepthTerm<'a> {
    pub pred: NodeId,
    pub target: &'a [f64],
}

/// Result of the warped-view depth loss: the node (absent when every term
/// was degenerate) plus a count of empty terms.
pub struct DepthLoss {
    pub node: Option<NodeId>,
    pub degenerate_terms: u32,
}

/// Smooth-L1 depth loss against warped pseudo-depths: the sum of masked
/// means over the helix and spin families. Pixels enter pre-masked; an
/// empty family contributes zero and bumps the degenerate counter.
pub fn depth_loss(
    tape: &mut Tape,
    terms: &[Option<DepthTerm>],
    beta: f64,
) -> Result<DepthLoss, LossError> {
    let mut node: Option<NodeId> = None;
    let mut degenerate = 0u32;
    for term in terms {
        match term {
            Some(t) if !t.target.is_empty() => {
                let n = tape.value(t.pred).numel();
                if n != t.target.len() {
                    return Err(LossError::CountMismatch {
                        context: "depth_loss",
                        pred: n,
                        target: t.target.len(),
                    });
                }
                let target = tape.input(Tensor::from_vec(t.target.to_vec()));
                let diff = tape.sub(t.pred, target)?;
                let sl1 = tape.smooth_l1(diff, beta);
                let mean = tape.mean(sl1);
                node = Some(match node {
                    None => mean,
                    Some(acc) => tape.add(acc, mean)?,
                });
            }
            _ => degenerate += 1,
        }
    }
    Ok(DepthLoss {
        node,
        degenerate_terms: degenerate,
    })
}

/// Feature-consistency loss: MSE between the extractor's features of the
/// original view (detached target) and of the rendered view (differentiable).
/// `rendered` is an [h*w, 3] node; the original image must share its dims.
pub fn vit_loss(
    tape: &mut Tape,
    extractor: &FeatureExtractor,
    original: &Image,
    rendered: NodeId,
    width: usize,
    height: usize,
) -> Result<NodeId, LossError> {
    if original.width != width || original.height != height {
        return Err(LossError::FeatureDims {
            a: (original.width, original.height),
            b: (width, height),
        });
    }
    let target = extractor.extract(original, None)?;
    let (feat, fw, fh) = extractor.extract_on_tape(tape, rendered, width, height)?;
    debug_assert_eq!((fw, fh), (target.width, target.height));
    let t = tape.input(Tensor::new(vec![fh * fw, target.channels], target.data.clone()).unwrap());
    let diff = tape.sub(feat, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Mean absolute difference between visibility predictions [n] and detached
/// per-sample transmittance targets.
pub fn trans_loss(tape: &mut Tape, predictions: NodeId, targets: &[f64]) -> Result<NodeId, LossError> {
    let n = tape.value(predictions).numel();
    if n != targets.len() {
        return Err(LossError::CountMismatch {
            context: "trans_loss",
            pred: n,
            target: targets.len(),
        });
    }
    let t = tape.input(Tensor::from_vec(targets.to_vec()));
    let flat = tape.reshape(predictions, vec![n])?;
    let diff = tape.sub(flat, t)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

/// Per-iteration loss components; absent members mean the pose family is
/// disabled and contribute exactly zero.
#[derive(Default, Clone, Copy)]
pub struct LossComponents {
    pub depth: Option<NodeId>,
    pub ori: Option<NodeId>,
    pub vit: Option<NodeId>,
    pub trans: Option<NodeId>,
}

/// Values of the components (zeros where absent), for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossValues {
    pub depth: f64,
    pub ori: f64,
    pub vit: f64,
    pub trans: f64,
    pub total: f64,
}

/// Exact weighted sum of the present components. A non-finite component is
/// an error naming the offender.
pub fn total_loss(
    tape: &mut Tape,
    components: &LossComponents,
    weights: &LossWeights,
) -> Result<(NodeId, LossValues), LossError> {
    let named = [
        ("depth", components.depth, weights.depth),
        ("ori", components.ori, weights.ori),
        ("vit", components.vit, weights.vit),
        ("trans", components.trans, weights.trans),
    ];
    let mut values = LossValues::default();
    let mut total: Option<NodeId> = None;
    for (name, node, weight) in named {
        let Some(node) = node else { continue };
        let v = tape.value(node).item();
        if !v.is_finite() {
            return Err(LossError::NonFinite(match name {
                "depth" => "depth",
                "ori" => "ori",
                "vit" => "vit",
                _ => "trans",
            }));
        }
        match name {
            "depth" => values.depth = v,
            "ori" => values.ori = v,
            "vit" => values.vit = v,
            _ => values.trans = v,
        }
        let weighted = tape.mul_scalar(node, weight);
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let total = total.unwrap_or_else(|| tape.input(Tensor::scalar(0.0)));
    values.total = tape.value(total).item();
    Ok((total, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ExtractorSpec;

    fn input_rgb(tape: &mut Tape, rows: &[[f64; 3]]) -> NodeId {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        tape.input(Tensor::new(vec![rows.len(), 3], flat).unwrap())
    }

    #[test]
    fn pixel_loss_zero_when_equal() {
        let mut tape = Tape::new();
        let target = vec![[0.2, 0.4, 0.9]; 7];
        let pred = input_rgb(&mut tape, &target);
        let l = pixel_loss(&mut tape, pred, &target).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn pixel_loss_uniform_offset() {
        let mut tape = Tape::new();
        let target = vec![[0.5, 0.5, 0.5]; 10];
        let shifted: Vec<[f64; 3]> = target.iter().map(|c| c.map(|v| v + 0.1)).collect();
        let pred = input_rgb(&mut tape, &shifted);
        let l = pixel_loss(&mut tape, pred, &target).unwrap();
        assert!((tape.value(l).item() - 0.03).abs() < 1e-12);
    }

    #[test]
    fn pixel_loss_invariant_to_ray_order() {
        let rows: Vec<[f64; 3]> = (0..6)
            .map(|i| [i as f64 * 0.1, 0.3, 1.0 - i as f64 * 0.05])
            .collect();
        let target = vec![[0.4, 0.2, 0.6]; 6];
        let mut tape = Tape::new();
        let pred = input_rgb(&mut tape, &rows);
        let a = pixel_loss(&mut tape, pred, &target).unwrap();
        let mut perm_rows = rows.clone();
        perm_rows.reverse();
        let mut tape2 = Tape::new();
        let pred2 = input_rgb(&mut tape2, &perm_rows);
        let b = pixel_loss(&mut tape2, pred2, &target).unwrap();
        assert!((tape.value(a).item() - tape2.value(b).item()).abs() < 1e-12);
    }

    #[test]
    fn pixel_loss_count_mismatch_errors() {
        let mut tape = Tape::new();
        let pred = input_rgb(&mut tape, &[[0.0; 3]; 3]);
        assert!(pixel_loss(&mut tape, pred, &[[0.0; 3]; 4]).is_err());
    }

    #[test]
    fn ori_loss_zero_on_perfect_render() {
        let mut tape = Tape::new();
        let rgb = vec![[0.3, 0.3, 0.3]; 5];
        let depth = vec![1.5; 5];
        let rp = input_rgb(&mut tape, &rgb);
        let dp = tape.input(Tensor::from_vec(depth.clone()));
        let rand = RenderedSamples {
            rgb_pred: rp,
            rgb_target: &rgb,
            depth_pred: dp,
            depth_target: &depth,
        };
        let l = ori_loss(&mut tape, None, &rand).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn ori_loss_depth_only_error() {
        let mut tape = Tape::new();
        let rgb = vec![[0.3, 0.3, 0.3]; 5];
        let depth_true = vec![1.5; 5];
        let depth_off: Vec<f64> = depth_true.iter().map(|d| d + 0.25).collect();
        let rp = input_rgb(&mut tape, &rgb);
        let dp = tape.input(Tensor::from_vec(depth_off));
        let rand = RenderedSamples {
            rgb_pred: rp,
            rgb_target: &rgb,
            depth_pred: dp,
            depth_target: &depth_true,
        };
        let l = ori_loss(&mut tape, None, &rand).unwrap();
        assert!((tape.value(l).item() - 0.0625).abs() < 1e-12, "0.25^2");
    }

    #[test]
    fn ori_loss_is_patch_plus_rand() {
        let mut tape = Tape::new();
        let rgb_t = vec![[0.1, 0.6, 0.8]; 4];
        let rgb_p: Vec<[f64; 3]> = rgb_t.iter().map(|c| c.map(|v| v + 0.05)).collect();
        let depth_t = vec![2.0; 4];
        let depth_p: Vec<f64> = depth_t.iter().map(|d| d - 0.1).collect();

        let rp = input_rgb(&mut tape, &rgb_p);
        let dp = tape.input(Tensor::from_vec(depth_p.clone()));
        let rand = RenderedSamples {
            rgb_pred: rp,
            rgb_target: &rgb_t,
            depth_pred: dp,
            depth_target: &depth_t,
        };
        let pp = input_rgb(&mut tape, &rgb_p);
        let pd = tape.input(Tensor::from_vec(depth_p));
        let patch = RenderedSamples {
            rgb_pred: pp,
            rgb_target: &rgb_t,
            depth_pred: pd,
            depth_target: &depth_t,
        };
        let combined = ori_loss(&mut tape, Some(&patch), &rand).unwrap();
        // components recomputed independently
        let mut t2 = Tape::new();
        let rp2 = input_rgb(&mut t2, &rgb_p);
        let dp2 = tape.value(dp).clone();
        let dp2 = t2.input(dp2);
        let rgb_term = pixel_loss(&mut t2, rp2, &rgb_t).unwrap();
        let depth_term = scalar_mse(&mut t2, dp2, &depth_t).unwrap();
        let half = t2.value(rgb_term).item() + t2.value(depth_term).item();
        assert!((tape.value(combined).item() - 2.0 * half).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_branches() {
        // quadratic branch: uniform error 0.5 on one family only
        let mut tape = Tape::new();
        let pred = tape.input(Tensor::from_vec(vec![1.5; 6]));
        let target = vec![1.0; 6];
        let dl = depth_loss(
            &mut tape,
            &[
                Some(DepthTerm { pred, target: &target }),
                None,
            ],
            1.0,
        )
        .unwrap();
        assert_eq!(dl.degenerate_terms, 1);
        assert!((tape.value(dl.node.unwrap()).item() - 0.125).abs() < 1e-12);

        // linear branch against both families: 2 * (3 - 0.5)
        let mut tape = Tape::new();
        let pred_a = tape.input(Tensor::from_vec(vec![4.0; 5]));
        let pred_b = tape.input(Tensor::from_vec(vec![4.0; 5]));
        let t = vec![1.0; 5];
        let dl = depth_loss(
            &mut tape,
            &[
                Some(DepthTerm { pred: pred_a, target: &t }),
                Some(DepthTerm { pred: pred_b, target: &t }),
            ],
            1.0,
        )
        .unwrap();
        assert_eq!(dl.degenerate_terms, 0);
        assert!((tape.value(dl.node.unwrap()).item() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_zero_when_matching_and_counts_empty() {
        let mut tape = Tape::new();
        let dl = depth_loss(&mut tape, &[None, None], 1.0).unwrap();
        assert!(dl.node.is_none());
        assert_eq!(dl.degenerate_terms, 2);
    }

    #[test]
    fn vit_loss_zero_for_identical_images() {
        let ex = FeatureExtractor::new(ExtractorSpec {
            channels: 16,
            ..Default::default()
        });
        let mut img = Image::new(24, 24, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i as f64) * 0.013).sin() * 0.4 + 0.5;
        }
        let mut tape = Tape::new();
        let rendered = tape.input(Tensor::new(vec![24 * 24, 3], img.data.clone()).unwrap());
        let l = vit_loss(&mut tape, &ex, &img, rendered, 24, 24).unwrap();
        assert!(tape.value(l).item() < 1e-18);
    }

    #[test]
    fn vit_loss_matches_bruteforce_feature_mse() {
        let ex = FeatureExtractor::new(ExtractorSpec {
            channels: 16,
            ..Default::default()
        });
        let mk = |phase: f64| {
            let mut img = Image::new(24, 20, 3);
            for y in 0..20 {
                for x in 0..24 {
                    img.pixel_mut(x, y).copy_from_slice(&[
                        ((x as f64 + phase) * 0.4).sin() * 0.3 + 0.5,
                        (y as f64 * 0.3).cos() * 0.3 + 0.5,
                        0.5,
                    ]);
                }
            }
            img
        };
        let a = mk(0.0);
        let b = mk(2.0);
        let mut tape = Tape::new();
        let rendered = tape.input(Tensor::new(vec![24 * 20, 3], b.data.clone()).unwrap());
        let l = vit_loss(&mut tape, &ex, &a, rendered, 24, 20).unwrap();
        // brute force outside the loss
        let fa = ex.extract(&a, None).unwrap();
        let fb = ex.extract(&b, None).unwrap();
        let expect: f64 = fa
            .data
            .iter()
            .zip(&fb.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / fa.data.len() as f64;
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
        // symmetric in value
        let mut tape2 = Tape::new();
        let rendered2 = tape2.input(Tensor::new(vec![24 * 20, 3], a.data.clone()).unwrap());
        let l2 = vit_loss(&mut tape2, &ex, &b, rendered2, 24, 20).unwrap();
        assert!((tape.value(l).item() - tape2.value(l2).item()).abs() < 1e-12);
    }

    #[test]
    fn trans_loss_values() {
        let mut tape = Tape::new();
        let pred = tape.input(Tensor::from_vec(vec![0.5; 8]));
        let l = trans_loss(&mut tape, pred, &vec![0.5; 8]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let mut tape = Tape::new();
        let pred = tape.input(Tensor::from_vec(vec![0.5; 8]));
        let l = trans_loss(&mut tape, pred, &vec![1.0; 8]).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighted_sum() {
        let mut tape = Tape::new();
        let one = tape.input(Tensor::scalar(1.0));
        let comps = LossComponents {
            depth: Some(one),
            ori: Some(one),
            vit: Some(one),
            trans: Some(one),
        };
        let (node, values) = total_loss(&mut tape, &comps, &LossWeights::default()).unwrap();
        assert_eq!(tape.value(node).item(), 20.0);
        assert_eq!(values.total, 20.0);

        // doubling every weight doubles the total
        let w2 = LossWeights {
            depth: 16.0,
            ori: 2.0,
            vit: 20.0,
            trans: 2.0,
        };
        let (node2, _) = total_loss(&mut tape, &comps, &w2).unwrap();
        assert_eq!(tape.value(node2).item(), 40.0);
    }

    #[test]
    fn total_loss_zero_components() {
        let mut tape = Tape::new();
        let zero = tape.input(Tensor::scalar(0.0));
        let comps = LossComponents {
            depth: Some(zero),
            ori: Some(zero),
            vit: Some(zero),
            trans: Some(zero),
        };
        let (node, _) = total_loss(&mut tape, &comps, &LossWeights::default()).unwrap();
        assert_eq!(tape.value(node).item(), 0.0);
    }

    #[test]
    fn total_loss_rejects_non_finite() {
        let mut tape = Tape::new();
        let bad = tape.input(Tensor::scalar(f64::NAN));
        let comps = LossComponents {
            vit: Some(bad),
            ..Default::default()
        };
        let err = total_loss(&mut tape, &comps, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("vit"), "{err}");
    }

    #[test]
    fn losses_gradient_check_on_toy_batch() {
        use crate::autodiff::Params;
        // 4-ray toy batch: d(total)/d(pred) vs central differences
        let target_rgb = vec![[0.2, 0.5, 0.7]; 4];
        let target_depth = vec![1.0, 1.2, 0.8, 1.5];
        let base_rgb: Vec<f64> = vec![
            0.3, 0.4, 0.6, 0.1, 0.55, 0.72, 0.25, 0.43, 0.69, 0.2, 0.5, 0.66,
        ];
        let base_depth = vec![1.1, 1.0, 0.9, 1.4];

        let eval = |rgb: &[f64], depth: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let rp = tape.input(Tensor::new(vec![4, 3], rgb.to_vec()).unwrap());
            let dp = tape.input(Tensor::from_vec(depth.to_vec()));
            let rand = RenderedSamples {
                rgb_pred: rp,
                rgb_target: &target_rgb,
                depth_pred: dp,
                depth_target: &target_depth,
            };
            let ori = ori_loss(&mut tape, None, &rand).unwrap();
            let dpred = tape.input(Tensor::from_vec(depth.to_vec()));
            let dl = depth_loss(
                &mut tape,
                &[Some(DepthTerm { pred: dpred, target: &target_depth })],
                1.0,
            )
            .unwrap();
            let comps = LossComponents {
                ori: Some(ori),
                depth: dl.node,
                ..Default::default()
            };
            let (total, _) = total_loss(&mut tape, &comps, &LossWeights::default()).unwrap();
            tape.value(total).item()
        };

        // analytic gradients via params
        let mut params = Params::new();
        let rgb_id = params.register("rgb", Tensor::new(vec![4, 3], base_rgb.clone()).unwrap());
        let depth_id = params.register("depth", Tensor::from_vec(base_depth.clone()));
        let mut tape = Tape::new();
        let rp = tape.param(&params, rgb_id);
        let dp = tape.param(&params, depth_id);
        let rand = RenderedSamples {
            rgb_pred: rp,
            rgb_target: &target_rgb,
            depth_pred: dp,
            depth_target: &target_depth,
        };
        let ori = ori_loss(&mut tape, None, &rand).unwrap();
        let dl = depth_loss(
            &mut tape,
            &[Some(DepthTerm { pred: dp, target: &target_depth })],
            1.0,
        )
        .unwrap();
        let comps = LossComponents {
            ori: Some(ori),
            depth: dl.node,
            ..Default::default()
        };
        let (total, _) = total_loss(&mut tape, &comps, &LossWeights::default()).unwrap();
        tape.backward(total, &mut params).unwrap();

        let h = 1e-6;
        for i in 0..12 {
            let mut up = base_rgb.clone();
            up[i] += h;
            let mut dn = base_rgb.clone();
            dn[i] -= h;
            let numeric = (eval(&up, &base_depth) - eval(&dn, &base_depth)) / (2.0 * h);
            let analytic = params.grad(rgb_id).data()[i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(1e-3);
            assert!(rel < 1e-3, "rgb[{i}]: {analytic} vs {numeric}");
        }
        for i in 0..4 {
            let mut up = base_depth.clone();
            up[i] += h;
            let mut dn = base_depth.clone();
            dn[i] -= h;
            let numeric = (eval(&base_rgb, &up) - eval(&base_rgb, &dn)) / (2.0 * h);
            let analytic = params.grad(depth_id).data()[i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(1e-3);
            assert!(rel < 1e-3, "depth[{i}]: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn masked_depth_loss_ignores_invalid_pixels() {
        // Poison invalid pixels; the loss only sees masked-in values by
        // construction, so results must match a clean batch.
        let valid_pred = vec![1.0, 1.2, 0.9];
        let valid_target = vec![1.1, 1.0, 1.0];
        let mut tape = Tape::new();
        let p = tape.input(Tensor::from_vec(valid_pred.clone()));
        let dl = depth_loss(
            &mut tape,
            &[Some(DepthTerm { pred: p, target: &valid_target })],
            1.0,
        )
        .unwrap();
        let clean = tape.value(dl.node.unwrap()).item();
        // a batch that had poisoned entries stripped produces the same value
        let poisoned_pred = [f64::NAN, 1.0, f64::INFINITY, 1.2, 0.9];
        let mask = [false, true, false, true, true];
        let stripped: Vec<f64> = poisoned_pred
            .iter()
            .zip(mask)
            .filter(|(_, m)| *m)
            .map(|(v, _)| *v)
            .collect();
        let mut tape2 = Tape::new();
        let p2 = tape2.input(Tensor::from_vec(stripped));
        let dl2 = depth_loss(
            &mut tape2,
            &[Some(DepthTerm { pred: p2, target: &valid_target })],
            1.0,
        )
        .unwrap();
        assert_eq!(clean, tape2.value(dl2.node.unwrap()).item());
    }
}
