//! Reverse-mode tape over dense tensors.
//!
//! Nodes are appended in construction order, so topological order holds by
//! construction and the backward pass is a single reverse sweep. Parameter
//! gradients accumulate into the [`Params`] registry and persist across
//! backward calls until the optimizer consumes them.

use super::kernels as kn;
use super::params::{ParamId, Params};
use super::tensor::Tensor;
use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant leaf; receives no gradient.
    Input,
    /// Trainable leaf; backward accumulates into the registry.
    Param(ParamId),
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// rhs is a row vector broadcast over the leading batch dimension.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// Per-row scale: lhs [r, c] times rhs [r].
    ScaleRows(NodeId, NodeId),
    Neg(NodeId),
    Concat(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    Reshape(NodeId),
    SumAll(NodeId),
    SumAxis1(NodeId),
    Mean(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    Rsqrt(NodeId),
    SmoothL1(NodeId, f64),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    ClampMin(NodeId, f64),
    ClampMax(NodeId, f64),
    /// y[i,j] = sum of x[i,l] for l < j.
    ExclusiveCumsumAxis1(NodeId),
    Im2Col {
        input: NodeId,
        height: usize,
        width: usize,
        channels: usize,
        ksize: usize,
        stride: usize,
    },
}

pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    /// Whether a node can reach a Param leaf; backward prunes the rest.
    needs_grad: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let needs = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            Op::Matmul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::ScaleRows(a, b)
            | Op::Concat(a, b) => self.needs_grad[a.0] || self.needs_grad[b.0],
            Op::Neg(a)
            | Op::SliceCols(a, _, _)
            | Op::SliceRows(a, _, _)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::SumAxis1(a)
            | Op::Mean(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Exp(a)
            | Op::Abs(a)
            | Op::Sqrt(a)
            | Op::Rsqrt(a)
            | Op::SmoothL1(a, _)
            | Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::ClampMin(a, _)
            | Op::ClampMax(a, _)
            | Op::ExclusiveCumsumAxis1(a)
            | Op::Im2Col { input: a, .. } => self.needs_grad[a.0],
        };
        self.ops.push(op);
        self.values.push(value);
        self.needs_grad.push(needs);
        NodeId(self.ops.len() - 1)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.values[id.0].shape()
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Constant copy of another node's value (cuts the gradient path).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.values[id.0].clone();
        self.push(Op::Input, v)
    }

    /// Trainable leaf referencing the registry.
    pub fn param(&mut self, params: &Params, id: ParamId) -> NodeId {
        self.push(Op::Param(id), params.value(id).clone())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kn::matmul(
            self.values[a.0].data(),
            self.values[b.0].data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Op::Matmul(a, b), Tensor::new(vec![m, n], out).unwrap()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.shape(a) == self.shape(b) {
            let v = kn::map_binary(self.values[a.0].data(), self.values[b.0].data(), |x, y| {
                x + y
            });
            let shape = self.shape(a).to_vec();
            return Ok(self.push(Op::Add(a, b), Tensor::new(shape, v).unwrap()));
        }
        // Row broadcast: [r, c] + [c].
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() == 1 && sa.last() == sb.last() {
            let c = sb[0];
            let av = self.values[a.0].data();
            let bv = self.values[b.0].data();
            let mut out = av.to_vec();
            for row in out.chunks_mut(c) {
                for (o, &v) in row.iter_mut().zip(bv) {
                    *o += v;
                }
            }
            let shape = sa.to_vec();
            return Ok(self.push(Op::AddRow(a, b), Tensor::new(shape, out).unwrap()));
        }
        Err(self.mismatch("add", a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("sub", a, b));
        }
        let v = kn::map_binary(self.values[a.0].data(), self.values[b.0].data(), |x, y| {
            x - y
        });
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sub(a, b), Tensor::new(shape, v).unwrap()))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let v = kn::map_binary(self.values[a.0].data(), self.values[b.0].data(), |x, y| {
            x * y
        });
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul(a, b), Tensor::new(shape, v).unwrap()))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("div", a, b));
        }
        let v = kn::map_binary(self.values[a.0].data(), self.values[b.0].data(), |x, y| {
            x / y
        });
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Div(a, b), Tensor::new(shape, v).unwrap()))
    }

    /// Scale each row of `a` [r, c] by the matching entry of `s` [r].
    pub fn scale_rows(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, AutodiffError> {
        let (sa, ss) = (self.shape(a), self.shape(s));
        if sa.len() != 2 || ss.len() != 1 || sa[0] != ss[0] {
            return Err(self.mismatch("scale_rows", a, s));
        }
        let (r, c) = (sa[0], sa[1]);
        let av = self.values[a.0].data();
        let sv = self.values[s.0].data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let f = sv[i];
            for j in 0..c {
                out[i * c + j] = av[i * c + j] * f;
            }
        }
        Ok(self.push(Op::ScaleRows(a, s), Tensor::new(vec![r, c], out).unwrap()))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = kn::map_unary(self.values[a.0].data(), |x| -x);
        let shape = self.shape(a).to_vec();
        self.push(Op::Neg(a), Tensor::new(shape, v).unwrap())
    }

    /// Concatenate along the last axis: [r, c1] ++ [r, c2] -> [r, c1+c2].
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(self.mismatch("concat", a, b));
        }
        let (r, c1, c2) = (sa[0], sa[1], sb[1]);
        let av = self.values[a.0].data();
        let bv = self.values[b.0].data();
        let mut out = Vec::with_capacity(r * (c1 + c2));
        for i in 0..r {
            out.extend_from_slice(&av[i * c1..(i + 1) * c1]);
            out.extend_from_slice(&bv[i * c2..(i + 1) * c2]);
        }
        Ok(self.push(
            Op::Concat(a, b),
            Tensor::new(vec![r, c1 + c2], out).unwrap(),
        ))
    }

    /// Columns [start, end) of a [r, c] node.
    pub fn slice_cols(
        &mut self,
        a: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, AutodiffError> {
        let sa = self.shape(a);
        if sa.len() != 2 || end > sa[1] || start >= end {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                lhs: sa.to_vec(),
                rhs: vec![start, end],
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let av = self.values[a.0].data();
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + end]);
        }
        Ok(self.push(
            Op::SliceCols(a, start, end),
            Tensor::new(vec![r, w], out).unwrap(),
        ))
    }

    /// Rows [start, end) along the leading axis (contiguous in memory).
    pub fn slice_rows(
        &mut self,
        a: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, AutodiffError> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() || end > sa[0] || start >= end {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_rows",
                lhs: sa,
                rhs: vec![start, end],
            });
        }
        let cols: usize = sa[1..].iter().product::<usize>().max(1);
        let av = self.values[a.0].data();
        let out = av[start * cols..end * cols].to_vec();
        let mut shape = sa.clone();
        shape[0] = end - start;
        Ok(self.push(
            Op::SliceRows(a, start, end),
            Tensor::new(shape, out).unwrap(),
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, AutodiffError> {
        let v = self.values[a.0].clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = kn::sum_all(self.values[a.0].data());
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    /// Row sums of a [r, c] node -> [r].
    pub fn sum_axis1(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "sum_axis1",
                lhs: sa.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let av = self.values[a.0].data();
        let out: Vec<f64> = (0..r).map(|i| av[i * c..(i + 1) * c].iter().sum()).collect();
        Ok(self.push(Op::SumAxis1(a), Tensor::from_vec(out)))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.values[a.0].numel().max(1);
        let s = kn::sum_all(self.values[a.0].data()) / n as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), kn::sigmoid)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus(a), kn::softplus)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn rsqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Rsqrt(a), |x| 1.0 / x.sqrt())
    }

    pub fn smooth_l1(&mut self, a: NodeId, beta: f64) -> NodeId {
        self.unary(a, Op::SmoothL1(a, beta), |x| kn::smooth_l1(x, beta))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::AddScalar(a, c), |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::MulScalar(a, c), |x| x * c)
    }

    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::ClampMin(a, c), |x| x.max(c))
    }

    pub fn clamp_max(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::ClampMax(a, c), |x| x.min(c))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64 + Sync) -> NodeId {
        let v = kn::map_unary(self.values[a.0].data(), f);
        let shape = self.shape(a).to_vec();
        self.push(op, Tensor::new(shape, v).unwrap())
    }

    /// Exclusive prefix sums along rows of [r, c]: y[i,0] = 0.
    pub fn exclusive_cumsum_axis1(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "exclusive_cumsum_axis1",
                lhs: sa.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let av = self.values[a.0].data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let mut acc = 0.0;
            for j in 0..c {
                out[i * c + j] = acc;
                acc += av[i * c + j];
            }
        }
        Ok(self.push(
            Op::ExclusiveCumsumAxis1(a),
            Tensor::new(vec![r, c], out).unwrap(),
        ))
    }

    /// Patch extraction for valid (unpadded) strided convolution.
    ///
    /// Input is an [h*w, channels] node read as an image in row-major pixel
    /// order; output is [oh*ow, ksize*ksize*channels], one patch per row.
    pub fn im2col(
        &mut self,
        a: NodeId,
        height: usize,
        width: usize,
        channels: usize,
        ksize: usize,
        stride: usize,
    ) -> Result<NodeId, AutodiffError> {
        let sa = self.shape(a);
        if sa.iter().product::<usize>() != height * width * channels
            || height < ksize
            || width < ksize
            || stride == 0
        {
            return Err(AutodiffError::ShapeMismatch {
                op: "im2col",
                lhs: sa.to_vec(),
                rhs: vec![height, width, channels],
            });
        }
        let (oh, ow) = conv_out_dims(height, width, ksize, stride);
        let av = self.values[a.0].data();
        let cols = ksize * ksize * channels;
        let mut out = vec![0.0; oh * ow * cols];
        for oy in 0..oh {
            for ox in 0..ow {
                let patch = &mut out[(oy * ow + ox) * cols..(oy * ow + ox + 1) * cols];
                let mut p = 0;
                for ky in 0..ksize {
                    let iy = oy * stride + ky;
                    for kx in 0..ksize {
                        let ix = ox * stride + kx;
                        let src = (iy * width + ix) * channels;
                        patch[p..p + channels].copy_from_slice(&av[src..src + channels]);
                        p += channels;
                    }
                }
            }
        }
        Ok(self.push(
            Op::Im2Col {
                input: a,
                height,
                width,
                channels,
                ksize,
                stride,
            },
            Tensor::new(vec![oh * ow, cols], out).unwrap(),
        ))
    }

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate into
    /// `params`; calling twice without zeroing doubles them.
    pub fn backward(&self, loss: NodeId, params: &mut Params) -> Result<(), AutodiffError> {
        if self.values[loss.0].numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        if self.needs_grad[loss.0] {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }

        for idx in (0..=loss.0).rev() {
            if !self.needs_grad[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.ops[idx] {
                Op::Input => {}
                Op::Param(pid) => params.accumulate_grad(*pid, &g),
                Op::Matmul(a, b) => {
                    let (m, k) = {
                        let s = self.shape(*a);
                        (s[0], s[1])
                    };
                    let n = self.shape(*b)[1];
                    let mut da = vec![0.0; m * k];
                    kn::matmul_a_bt(g.data(), self.values[b.0].data(), &mut da, m, n, k);
                    let mut db = vec![0.0; k * n];
                    kn::matmul_at_b(self.values[a.0].data(), g.data(), &mut db, k, m, n);
                    accumulate(&self.needs_grad, &mut grads, *a, Tensor::new(vec![m, k], da).unwrap());
                    accumulate(&self.needs_grad, &mut grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
                Op::Add(a, b) => {
                    accumulate(&self.needs_grad, &mut grads, *a, g.clone());
                    accumulate(&self.needs_grad, &mut grads, *b, g);
                }
                Op::AddRow(a, b) => {
                    let c = self.shape(*b)[0];
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(&self.needs_grad, &mut grads, *a, g.clone());
                    accumulate(&self.needs_grad, &mut grads, *b, Tensor::from_vec(db));
                }
                Op::Sub(a, b) => {
                    let db = kn::map_unary(g.data(), |x| -x);
                    let shape = self.shape(*b).to_vec();
                    accumulate(&self.needs_grad, &mut grads, *a, g.clone());
                    accumulate(&self.needs_grad, &mut grads, *b, Tensor::new(shape, db).unwrap());
                }
                Op::Mul(a, b) => {
                    let da = kn::map_binary(g.data(), self.values[b.0].data(), |g, y| g * y);
                    let db = kn::map_binary(g.data(), self.values[a.0].data(), |g, x| g * x);
                    let shape = self.shape(*a).to_vec();
                    accumulate(&self.needs_grad, &mut grads, *a, Tensor::new(shape.clone(), da).unwrap());
                    accumulate(&self.needs_grad, &mut grads, *b, Tensor::new(shape, db).unwrap());
                }
                Op::Div(a, b) => {
                    let bv = self.values[b.0].data();
                    let av = self.values[a.0].data();
                    let da = kn::map_binary(g.data(), bv, |g, y| g / y);
                    let db: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect();
                    let shape = self.shape(*a).to_vec();
                    accumulate(&self.needs_grad, &mut grads, *a, Tensor::new(shape.clone(), da).unwrap());
                    accumulate(&self.needs_grad, &mut grads, *b, Tensor::new(shape, db).unwrap());
                }
                Op::ScaleRows(a, s) => {
                    let (r, c) = {
                        let sa = self.shape(*a);
                        (sa[0], sa[1])
                    };
                    let sv = self.values[s.0].data();
                    let av = self.values[a.0].data();
                    let gv = g.data();
                    let mut da = vec![0.0; r * c];
                    let mut ds = vec![0.0; r];
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in 0..c {
                            da[i * c + j] = gv[i * c + j] * sv[i];
                            acc += gv[i * c + j] * av[i * c + j];
                        }
                        ds[i] = acc;
                    }
                    accumulate(&self.needs_grad, &mut grads, *a, Tensor::new(vec![r, c], da).unwrap());
                    accumulate(&self.needs_grad, &mut grads, *s, Tensor::from_vec(ds));
                }
                Op::Neg(a) => {
                    let da = kn::map_unary(g.data(), |x| -x);
                    let shape = self.shape(*a).to_vec();
                    accumulate(&self.needs_grad, &mut grads, *a, Tensor::new(shape, da).unwrap());
                }
                Op::Concat(a, b) => {
                    let (r, c1) = {
                        let s = self.shape(*a);
                        (s[0], s[1])
                    };
                    let c2 = self.shape(*b)[1];
                    let gv = g.data();
                    let mut da = Vec::with_capacity(r * c1);
                    let mut db = Vec::with_capacity(r * c2);
                    for i in 0..r {
                        da.extend_from_slice(&gv[i * (c1 + c2)..i * (c1 + c2) + c1]);
                        db.extend_from_slice(&gv[i * (c1 + c2) + c1..(i + 1) * (c1 + c2)]);
                    }
                    accumulate(&self.needs_grad, &mut grads, *a, Tensor::new(vec![r, c1], da).unwrap());
                    accumulate(&self.needs_grad, &mut grads, *b, Tensor::new(vec![r, c2], db).unwrap());
                }
                Op::SliceRows(a, start, end) => {
                    let sa = self.shape(*a);
                    let cols: usize = sa[1..].iter().product::<usize>().max(1);
                    let rows = sa[0];
                    let gv = g.data();
                    let mut da = vec![0.0; rows * cols];
                    da[start * cols..end * cols].copy_from_slice(gv);
                    let shape = sa.to_vec();
                    accumulate(&self.needs_grad, &mut grads, *a, Tensor::new(shape, da).unwrap());
                }
                Op::SliceCols(a, start, end) => {
                    let (r, c) = {
                        let s = self.shape(*a);
                        (s[0], s[1])
                    };
                    let w = end - start;
                    let gv = g.data();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        da[i * c + start..i * c + end].copy_from_slice(&gv[i * w..(i + 1) * w]);
                    }
                    accumulate(&self.needs_grad, &mut grads, *a, Tensor::new(vec![r, c], da).unwrap());
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a).to_vec();
                    let da = Tensor::new(shape, g.data().to_vec()).unwrap();
                    accumulate(&self.needs_grad, &mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let shape = self.shape(*a).to_vec();
                    accumulate(&self.needs_grad, &mut grads, *a, Tensor::full(&shape, g.item()));
                }
                Op::SumAxis1(a) => {
                    let (r, c) = {
                        let s = self.shape(*a);
                        (s[0], s[1])
                    };
                    let gv = g.data();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        da[i * c..(i + 1) * c].fill(gv[i]);
                    }
                    accumulate(&self.needs_grad, &mut grads, *a, Tensor::new(vec![r, c], da).unwrap());
                }
                Op::Mean(a) => {
                    let shape = self.shape(*a).to_vec();
                    let n: usize = shape.iter().product();
                    accumulate(&self.needs_grad, &mut grads, *a, Tensor::full(&shape, g.item() / n as f64));
                }
                Op::Relu(a) => self.unary_grad(&mut grads, *a, &g, |x, _| {
                    if x > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }),
                Op::Sigmoid(a) => self.unary_grad_from_out(&mut grads, *a, idx, &g, |y| y * (1.0 - y)),
                Op::Softplus(a) => self.unary_grad(&mut grads, *a, &g, |x, _| kn::sigmoid(x)),
                Op::Sin(a) => self.unary_grad(&mut grads, *a, &g, |x, _| x.cos()),
                Op::Cos(a) => self.unary_grad(&mut grads, *a, &g, |x, _| -x.sin()),
                Op::Exp(a) => self.unary_grad_from_out(&mut grads, *a, idx, &g, |y| y),
                Op::Abs(a) => self.unary_grad(&mut grads, *a, &g, |x, _| {
                    if x == 0.0 {
                        0.0
                    } else {
                        x.signum()
                    }
                }),
                Op::Sqrt(a) => self.unary_grad_from_out(&mut grads, *a, idx, &g, |y| 0.5 / y),
                Op::Rsqrt(a) => {
                    self.unary_grad(&mut grads, *a, &g, |x, _| -0.5 / (x * x.sqrt()))
                }
                Op::SmoothL1(a, beta) => {
                    let beta = *beta;
                    self.unary_grad(&mut grads, *a, &g, move |x, _| kn::smooth_l1_grad(x, beta))
                }
                Op::AddScalar(a, _) => accumulate(&self.needs_grad, &mut grads, *a, g),
                Op::MulScalar(a, c) => {
                    let c = *c;
                    let da = kn::map_unary(g.data(), |x| x * c);
                    let shape = self.shape(*a).to_vec();
                    accumulate(&self.needs_grad, &mut grads, *a, Tensor::new(shape, da).unwrap());
                }
                Op::ClampMin(a, c) => {
                    let c = *c;
                    self.unary_grad(&mut grads, *a, &g, move |x, _| if x > c { 1.0 } else { 0.0 })
                }
                Op::ClampMax(a, c) => {
                    let c = *c;
                    self.unary_grad(&mut grads, *a, &g, move |x, _| if x < c { 1.0 } else { 0.0 })
                }
                Op::ExclusiveCumsumAxis1(a) => {
                    // y_j sees x_l for l < j, so dx_l = sum of g_j for j > l.
                    let (r, c) = {
                        let s = self.shape(*a);
                        (s[0], s[1])
                    };
                    let gv = g.data();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in (0..c).rev() {
                            da[i * c + j] = acc;
                            acc += gv[i * c + j];
                        }
                    }
                    accumulate(&self.needs_grad, &mut grads, *a, Tensor::new(vec![r, c], da).unwrap());
                }
                Op::Im2Col {
                    input,
                    height,
                    width,
                    channels,
                    ksize,
                    stride,
                } => {
                    let (h, w, ch, k, st) = (*height, *width, *channels, *ksize, *stride);
                    let (oh, ow) = conv_out_dims(h, w, k, st);
                    let cols = k * k * ch;
                    let gv = g.data();
                    let mut da = vec![0.0; h * w * ch];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let patch = &gv[(oy * ow + ox) * cols..(oy * ow + ox + 1) * cols];
                            let mut p = 0;
                            for ky in 0..k {
                                let iy = oy * st + ky;
                                for kx in 0..k {
                                    let ix = ox * st + kx;
                                    let dst = (iy * w + ix) * ch;
                                    for cc in 0..ch {
                                        da[dst + cc] += patch[p + cc];
                                    }
                                    p += ch;
                                }
                            }
                        }
                    }
                    let shape = self.shape(*input).to_vec();
                    accumulate(&self.needs_grad, &mut grads, *input, Tensor::new(shape, da).unwrap());
                }
            }
        }
        Ok(())
    }

    fn unary_grad(
        &self,
        grads: &mut [Option<Tensor>],
        a: NodeId,
        g: &Tensor,
        dfdx: impl Fn(f64, f64) -> f64 + Sync,
    ) {
        let da = kn::map_binary(g.data(), self.values[a.0].data(), |g, x| g * dfdx(x, 0.0));
        let shape = self.shape(a).to_vec();
        accumulate_slice(&self.needs_grad, grads, a, Tensor::new(shape, da).unwrap());
    }

    fn unary_grad_from_out(
        &self,
        grads: &mut [Option<Tensor>],
        a: NodeId,
        out: usize,
        g: &Tensor,
        dfdy: impl Fn(f64) -> f64 + Sync,
    ) {
        let da = kn::map_binary(g.data(), self.values[out].data(), |g, y| g * dfdy(y));
        let shape = self.shape(a).to_vec();
        accumulate_slice(&self.needs_grad, grads, a, Tensor::new(shape, da).unwrap());
    }
}

pub(crate) fn conv_out_dims(h: usize, w: usize, k: usize, stride: usize) -> (usize, usize) {
    ((h - k) / stride + 1, (w - k) / stride + 1)
}

fn accumulate(needs: &[bool], grads: &mut Vec<Option<Tensor>>, id: NodeId, g: Tensor) {
    accumulate_slice(needs, grads.as_mut_slice(), id, g);
}

fn accumulate_slice(needs: &[bool], grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    if !needs[id.0] {
        return;
    }
    match &mut grads[id.0] {
        Some(existing) => {
            for (o, &v) in existing.data_mut().iter_mut().zip(g.data()) {
                *o += v;
            }
        }
        slot => *slot = Some(g),
    }
}
