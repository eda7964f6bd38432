//! Per-block radiance field: positional encoding, per-stage MLPs, the
//! visibility head, and multi-level residual fusion.
//!
//! Stages run independently on the encoded inputs; their color and density
//! logits are summed and a single activation is applied to each sum. Adding
//! a stage copies the last stage's parameters, and the visibility head is
//! shared by all stages. Two query paths exist: a tape path for training and
//! a frozen path for rendering, built on the same kernels so they agree
//! bit-for-bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    matmul, sigmoid_scalar, softplus_scalar, Checkpoint, NodeId, ParamId, Params, Tape, Tensor,
};
use crate::geometry::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum FieldError {
    #[error("active stage count {requested} out of range 1..={available}")]
    StageOutOfRange { requested: usize, available: usize },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint metadata invalid: {0}")]
    BadMeta(String),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

/// Classic sinusoidal positional encoding configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub position_bands: usize,
    pub direction_bands: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            position_bands: 10,
            direction_bands: 4,
            include_input: true,
        }
    }
}

impl EncodingConfig {
    pub fn position_len(&self) -> usize {
        encoded_len(self.position_bands, self.include_input)
    }

    pub fn direction_len(&self) -> usize {
        encoded_len(self.direction_bands, self.include_input)
    }
}

pub fn encoded_len(bands: usize, include_input: bool) -> usize {
    3 * (usize::from(include_input) + 2 * bands)
}

/// [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(...)],
/// applied per component; the raw input is kept when `include_input`.
pub fn encode(x: Vec3, bands: usize, include_input: bool, out: &mut Vec<f64>) {
    if include_input {
        out.extend_from_slice(&x);
    }
    let mut freq = std::f64::consts::PI;
    for _ in 0..bands {
        for c in x {
            out.push((freq * c).sin());
        }
        for c in x {
            out.push((freq * c).cos());
        }
        freq *= 2.0;
    }
}

pub fn encode_one(x: Vec3, bands: usize, include_input: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_len(bands, include_input));
    encode(x, bands, include_input, &mut out);
    out
}

/// Encode a batch into a [n, encoded_len] tensor.
pub fn encode_batch(xs: &[Vec3], bands: usize, include_input: bool) -> Tensor {
    let width = encoded_len(bands, include_input);
    let mut data = Vec::with_capacity(xs.len() * width);
    for &x in xs {
        encode(x, bands, include_input, &mut data);
    }
    Tensor::new(vec![xs.len(), width], data).unwrap()
}

/// How the fused logit sums become density and color.
///
/// The default follows the source design: sigmoid on density and softplus on
/// color, with color clamped to [0, 1] for compositing. `Conventional` swaps
/// in the usual assignment (softplus density, sigmoid color) for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActivationMode {
    #[default]
    PaperLiteral,
    Conventional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub encoding: EncodingConfig,
    pub hidden: usize,
    pub trunk_layers: usize,
    pub color_hidden: usize,
    pub vis_hidden: usize,
    pub vis_layers: usize,
    pub activation: ActivationMode,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            encoding: EncodingConfig::default(),
            hidden: 128,
            trunk_layers: 4,
            color_hidden: 64,
            vis_hidden: 64,
            vis_layers: 2,
            activation: ActivationMode::PaperLiteral,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct StageIds {
    trunk: Vec<LinearIds>,
    density: LinearIds,
    color_hidden: LinearIds,
    color_out: LinearIds,
}

#[derive(Debug, Clone)]
struct VisIds {
    layers: Vec<LinearIds>,
    out: LinearIds,
}

/// Ordered radiance stages plus the shared visibility head, all backed by
/// one parameter registry.
#[derive(Debug, Clone)]
pub struct MultiLevelField {
    pub config: FieldConfig,
    params: Params,
    stages: Vec<StageIds>,
    vis: VisIds,
}

/// Output nodes of a tape-path field evaluation.
pub struct FieldNodes {
    pub color: NodeId,
    pub density: NodeId,
}

fn xavier(rng: &mut impl rand::Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

impl MultiLevelField {
    pub fn new(config: FieldConfig) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Params::new();
        let stage = Self::init_stage(&config, &mut params, &mut rng, 0);
        let vis = Self::init_vis(&config, &mut params, &mut rng);
        Self {
            config,
            params,
            stages: vec![stage],
            vis,
        }
    }

    fn linear(
        params: &mut Params,
        rng: &mut impl rand::Rng,
        name: String,
        rows: usize,
        cols: usize,
    ) -> LinearIds {
        let w = params.register(format!("{name}.w"), xavier(rng, rows, cols));
        let b = params.register(format!("{name}.b"), Tensor::zeros(&[cols]));
        LinearIds { w, b }
    }

    fn init_stage(
        config: &FieldConfig,
        params: &mut Params,
        rng: &mut impl rand::Rng,
        index: usize,
    ) -> StageIds {
        let enc_x = config.encoding.position_len();
        let enc_d = config.encoding.direction_len();
        let h = config.hidden;
        let mut trunk = Vec::with_capacity(config.trunk_layers);
        let mut in_dim = enc_x;
        for l in 0..config.trunk_layers {
            trunk.push(Self::linear(
                params,
                rng,
                format!("stage{index}.trunk{l}"),
                in_dim,
                h,
            ));
            in_dim = h;
        }
        let density = Self::linear(params, rng, format!("stage{index}.density"), h, 1);
        let color_hidden = Self::linear(
            params,
            rng,
            format!("stage{index}.color_hidden"),
            h + enc_d,
            config.color_hidden,
        );
        let color_out = Self::linear(
            params,
            rng,
            format!("stage{index}.color_out"),
            config.color_hidden,
            3,
        );
        StageIds {
            trunk,
            density,
            color_hidden,
            color_out,
        }
    }

    fn init_vis(config: &FieldConfig, params: &mut Params, rng: &mut impl rand::Rng) -> VisIds {
        let mut layers = Vec::with_capacity(config.vis_layers);
        let mut in_dim = config.encoding.position_len() + config.encoding.direction_len();
        for l in 0..config.vis_layers {
            layers.push(Self::linear(
                params,
                rng,
                format!("vis{l}"),
                in_dim,
                config.vis_hidden,
            ));
            in_dim = config.vis_hidden;
        }
        let out = Self::linear(params, rng, "vis_out".to_string(), in_dim, 1);
        VisIds { layers, out }
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Copy the last stage into a new trainable stage.
    pub fn add_stage(&mut self) {
        let src = self.stages.last().expect("field has at least one stage");
        let index = self.stages.len();
        let copy_linear = |params: &mut Params, ids: LinearIds, name: String| {
            let w = params.register(format!("{name}.w"), params.value(ids.w).clone());
            let b = params.register(format!("{name}.b"), params.value(ids.b).clone());
            LinearIds { w, b }
        };
        let src = src.clone();
        let trunk = src
            .trunk
            .iter()
            .enumerate()
            .map(|(l, ids)| copy_linear(&mut self.params, *ids, format!("stage{index}.trunk{l}")))
            .collect();
        let density = copy_linear(&mut self.params, src.density, format!("stage{index}.density"));
        let color_hidden = copy_linear(
            &mut self.params,
            src.color_hidden,
            format!("stage{index}.color_hidden"),
        );
        let color_out = copy_linear(
            &mut self.params,
            src.color_out,
            format!("stage{index}.color_out"),
        );
        self.stages.push(StageIds {
            trunk,
            density,
            color_hidden,
            color_out,
        });
    }

    /// Freeze or unfreeze all parameters of stages before `stage`.
    pub fn set_stages_trainable_below(&mut self, stage: usize, trainable: bool) {
        for s in self.stages.iter().take(stage) {
            let mut ids: Vec<ParamId> = Vec::new();
            for l in &s.trunk {
                ids.push(l.w);
                ids.push(l.b);
            }
            for l in [s.density, s.color_hidden, s.color_out] {
                ids.push(l.w);
                ids.push(l.b);
            }
            for id in ids {
                self.params.set_trainable(id, trainable);
            }
        }
    }

    /// All parameter ids of one stage, in registration order.
    pub fn stage_param_ids(&self, stage: usize) -> Vec<ParamId> {
        let s = &self.stages[stage];
        let mut ids = Vec::new();
        for l in &s.trunk {
            ids.push(l.w);
            ids.push(l.b);
        }
        for l in [s.density, s.color_hidden, s.color_out] {
            ids.push(l.w);
            ids.push(l.b);
        }
        ids
    }

    fn check_stages(&self, k: usize) -> Result<(), FieldError> {
        if k == 0 || k > self.stages.len() {
            return Err(FieldError::StageOutOfRange {
                requested: k,
                available: self.stages.len(),
            });
        }
        Ok(())
    }

    // ----- tape path -------------------------------------------------------

    /// Raw fused logit sums over the first `k` stages for pre-encoded inputs
    /// (`enc_x`: [n, enc], `enc_d`: [n, enc_dir]).
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        enc_x: NodeId,
        enc_d: NodeId,
        k: usize,
    ) -> Result<(NodeId, NodeId), FieldError> {
        self.check_stages(k)?;
        let mut color_sum: Option<NodeId> = None;
        let mut density_sum: Option<NodeId> = None;
        for stage in &self.stages[..k] {
            let mut h = enc_x;
            for l in &stage.trunk {
                let w = tape.param(&self.params, l.w);
                let b = tape.param(&self.params, l.b);
                let lin = tape.matmul(h, w)?;
                let lin = tape.add(lin, b)?;
                h = tape.relu(lin);
            }
            let wd = tape.param(&self.params, stage.density.w);
            let bd = tape.param(&self.params, stage.density.b);
            let sigma = tape.matmul(h, wd)?;
            let sigma = tape.add(sigma, bd)?;

            let joint = tape.concat(h, enc_d)?;
            let wc = tape.param(&self.params, stage.color_hidden.w);
            let bc = tape.param(&self.params, stage.color_hidden.b);
            let ch = tape.matmul(joint, wc)?;
            let ch = tape.add(ch, bc)?;
            let ch = tape.relu(ch);
            let wo = tape.param(&self.params, stage.color_out.w);
            let bo = tape.param(&self.params, stage.color_out.b);
            let c = tape.matmul(ch, wo)?;
            let c = tape.add(c, bo)?;

            color_sum = Some(match color_sum {
                None => c,
                Some(acc) => tape.add(acc, c)?,
            });
            density_sum = Some(match density_sum {
                None => sigma,
                Some(acc) => tape.add(acc, sigma)?,
            });
        }
        Ok((color_sum.unwrap(), density_sum.unwrap()))
    }

    /// Fused query on the tape: activated color [n, 3] and density [n, 1].
    pub fn query_on_tape(
        &self,
        tape: &mut Tape,
        enc_x: NodeId,
        enc_d: NodeId,
        k: usize,
    ) -> Result<FieldNodes, FieldError> {
        let (c_logits, d_logits) = self.logits_on_tape(tape, enc_x, enc_d, k)?;
        let (color, density) = match self.config.activation {
            ActivationMode::PaperLiteral => {
                let c = tape.softplus(c_logits);
                let c = tape.clamp_max(c, 1.0);
                (c, tape.sigmoid(d_logits))
            }
            ActivationMode::Conventional => {
                (tape.sigmoid(c_logits), tape.softplus(d_logits))
            }
        };
        Ok(FieldNodes { color, density })
    }

    /// Visibility head on the tape: transmittance prediction in (0, 1).
    pub fn visibility_on_tape(
        &self,
        tape: &mut Tape,
        enc_x: NodeId,
        enc_d: NodeId,
    ) -> Result<NodeId, FieldError> {
        let mut h = tape.concat(enc_x, enc_d)?;
        for l in &self.vis.layers {
            let w = tape.param(&self.params, l.w);
            let b = tape.param(&self.params, l.b);
            let lin = tape.matmul(h, w)?;
            let lin = tape.add(lin, b)?;
            h = tape.relu(lin);
        }
        let w = tape.param(&self.params, self.vis.out.w);
        let b = tape.param(&self.params, self.vis.out.b);
        let out = tape.matmul(h, w)?;
        let out = tape.add(out, b)?;
        Ok(tape.sigmoid(out))
    }

    // ----- frozen path -----------------------------------------------------

    fn linear_forward(&self, ids: LinearIds, input: &[f64], n: usize, in_dim: usize) -> Vec<f64> {
        let w = self.params.value(ids.w);
        let b = self.params.value(ids.b);
        let out_dim = w.shape()[1];
        let mut out = vec![0.0; n * out_dim];
        matmul(input, w.data(), &mut out, n, in_dim, out_dim);
        for row in out.chunks_mut(out_dim) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        out
    }

    /// Raw fused logit sums without a tape, for a pre-encoded batch.
    fn logits_frozen(&self, enc_x: &[f64], enc_d: &[f64], n: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
        let enc_x_dim = self.config.encoding.position_len();
        let enc_d_dim = self.config.encoding.direction_len();
        let h_dim = self.config.hidden;
        let mut color_sum = vec![0.0; n * 3];
        let mut density_sum = vec![0.0; n];
        for stage in &self.stages[..k] {
            let mut h = enc_x.to_vec();
            let mut in_dim = enc_x_dim;
            for l in &stage.trunk {
                h = self.linear_forward(*l, &h, n, in_dim);
                for v in &mut h {
                    *v = v.max(0.0);
                }
                in_dim = h_dim;
            }
            let sigma = self.linear_forward(stage.density, &h, n, h_dim);
            // concat trunk features with encoded directions
            let mut joint = vec![0.0; n * (h_dim + enc_d_dim)];
            for i in 0..n {
                joint[i * (h_dim + enc_d_dim)..i * (h_dim + enc_d_dim) + h_dim]
                    .copy_from_slice(&h[i * h_dim..(i + 1) * h_dim]);
                joint[i * (h_dim + enc_d_dim) + h_dim..(i + 1) * (h_dim + enc_d_dim)]
                    .copy_from_slice(&enc_d[i * enc_d_dim..(i + 1) * enc_d_dim]);
            }
            let mut ch = self.linear_forward(stage.color_hidden, &joint, n, h_dim + enc_d_dim);
            for v in &mut ch {
                *v = v.max(0.0);
            }
            let c = self.linear_forward(stage.color_out, &ch, n, self.config.color_hidden);
            for (acc, v) in color_sum.iter_mut().zip(&c) {
                *acc += v;
            }
            for (acc, v) in density_sum.iter_mut().zip(&sigma) {
                *acc += v;
            }
        }
        (color_sum, density_sum)
    }

    /// Batched frozen query: colors in [0,1]^3 and densities, one per point.
    /// Parallel over fixed chunks; safe against a frozen snapshot.
    pub fn query_batch(
        &self,
        xs: &[Vec3],
        ds: &[Vec3],
        k: usize,
    ) -> Result<(Vec<[f64; 3]>, Vec<f64>), FieldError> {
        self.check_stages(k)?;
        debug_assert_eq!(xs.len(), ds.len());
        let n = xs.len();
        let chunk = 4096;
        let results: Vec<(Vec<[f64; 3]>, Vec<f64>)> = xs
            .par_chunks(chunk)
            .zip(ds.par_chunks(chunk))
            .map(|(xc, dc)| {
                let enc_x = encode_batch(
                    xc,
                    self.config.encoding.position_bands,
                    self.config.encoding.include_input,
                );
                let enc_d = encode_batch(
                    dc,
                    self.config.encoding.direction_bands,
                    self.config.encoding.include_input,
                );
                let (c_logits, d_logits) =
                    self.logits_frozen(enc_x.data(), enc_d.data(), xc.len(), k);
                let mut colors = Vec::with_capacity(xc.len());
                let mut densities = Vec::with_capacity(xc.len());
                for i in 0..xc.len() {
                    let cl = [c_logits[i * 3], c_logits[i * 3 + 1], c_logits[i * 3 + 2]];
                    let (c, d) = activate(self.config.activation, cl, d_logits[i]);
                    colors.push(c);
                    densities.push(d);
                }
                (colors, densities)
            })
            .collect();
        let mut colors = Vec::with_capacity(n);
        let mut densities = Vec::with_capacity(n);
        for (c, d) in results {
            colors.extend(c);
            densities.extend(d);
        }
        Ok((colors, densities))
    }

    /// Single-point frozen query.
    pub fn query(&self, x: Vec3, d: Vec3, k: usize) -> Result<([f64; 3], f64), FieldError> {
        let (c, s) = self.query_batch(&[x], &[d], k)?;
        Ok((c[0], s[0]))
    }

    /// Frozen visibility prediction in (0, 1).
    pub fn visibility(&self, x: Vec3, d: Vec3) -> f64 {
        self.visibility_batch(&[x], &[d])[0]
    }

    pub fn visibility_batch(&self, xs: &[Vec3], ds: &[Vec3]) -> Vec<f64> {
        let n = xs.len();
        let enc_x = encode_batch(
            xs,
            self.config.encoding.position_bands,
            self.config.encoding.include_input,
        );
        let enc_d = encode_batch(
            ds,
            self.config.encoding.direction_bands,
            self.config.encoding.include_input,
        );
        let enc_x_dim = self.config.encoding.position_len();
        let enc_d_dim = self.config.encoding.direction_len();
        let mut h = vec![0.0; n * (enc_x_dim + enc_d_dim)];
        for i in 0..n {
            let w = enc_x_dim + enc_d_dim;
            h[i * w..i * w + enc_x_dim]
                .copy_from_slice(&enc_x.data()[i * enc_x_dim..(i + 1) * enc_x_dim]);
            h[i * w + enc_x_dim..(i + 1) * w]
                .copy_from_slice(&enc_d.data()[i * enc_d_dim..(i + 1) * enc_d_dim]);
        }
        let mut in_dim = enc_x_dim + enc_d_dim;
        for l in &self.vis.layers {
            h = self.linear_forward(*l, &h, n, in_dim);
            for v in &mut h {
                *v = v.max(0.0);
            }
            in_dim = self.config.vis_hidden;
        }
        let out = self.linear_forward(self.vis.out, &h, n, in_dim);
        out.iter().map(|&v| sigmoid_scalar(v)).collect()
    }

    // ----- checkpoints -----------------------------------------------------

    /// Parameter snapshot with the stage topology in the header.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.stages.len());
        ck.meta = serde_json::json!({ "field_config": self.config });
        for id in self.params.ids() {
            ck.insert(self.params.name(id).to_string(), self.params.value(id).clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, FieldError> {
        let config: FieldConfig = serde_json::from_value(ck.meta["field_config"].clone())
            .map_err(|e| FieldError::BadMeta(e.to_string()))?;
        let mut field = Self::new(config);
        for _ in 1..ck.stage_count {
            field.add_stage();
        }
        for id in field.params.ids().collect::<Vec<_>>() {
            let name = field.params.name(id).to_string();
            let t = ck
                .tensor(&name)
                .ok_or_else(|| FieldError::MissingTensor(name.clone()))?;
            *field.params.value_mut(id) = t.clone();
        }
        Ok(field)
    }
}

/// Apply the configured activations to fused logits.
pub fn activate(mode: ActivationMode, color_logits: [f64; 3], density_logit: f64) -> ([f64; 3], f64) {
    match mode {
        ActivationMode::PaperLiteral => (
            color_logits.map(|v| softplus_scalar(v).min(1.0)),
            sigmoid_scalar(density_logit),
        ),
        ActivationMode::Conventional => (
            color_logits.map(sigmoid_scalar),
            softplus_scalar(density_logit),
        ),
    }
}

/// Frame-sparsity schedule: stride 2^(S-i) at stage i (1-based), so each
/// stage doubles frame density and stage S uses every frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub total_frames: usize,
    pub stage_count: usize,
}

impl StageSchedule {
    pub fn new(total_frames: usize, stage_count: usize) -> Self {
        assert!(stage_count >= 1, "schedule needs at least one stage");
        Self {
            total_frames,
            stage_count,
        }
    }

    pub fn stride(&self, stage: usize) -> usize {
        assert!(
            (1..=self.stage_count).contains(&stage),
            "stage {stage} out of 1..={}",
            self.stage_count
        );
        1 << (self.stage_count - stage)
    }

    /// Frame indices used by `stage` (1-based): every stride-th frame.
    pub fn schedule_frames(&self, stage: usize) -> Vec<usize> {
        let stride = self.stride(stage);
        (0..self.total_frames).step_by(stride).collect()
    }
}
