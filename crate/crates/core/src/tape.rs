//! Reverse-mode differentiation over a Wengert tape.
//!
//! Ops are recorded in construction order, so every node's inputs precede it
//! and a single reverse sweep visits each node exactly once. [`Var`] is a
//! cheap handle into the tape; values are immutable once recorded.
//!
//! The op set is exactly what the segmentation/VQA model needs: 3x3 and 1x1
//! convolutions (stride 1, zero padding preserving spatial size), 2x2 max
//! pooling, nearest-neighbor 2x upsampling, affine layers, pointwise
//! nonlinearities, embedding lookup, channel/column concatenation, global
//! average pooling, and the two fused loss heads.

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Index { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Validation { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

fn shape_err<T>(op: &'static str, detail: String) -> Result<T, TapeError> {
    Err(TapeError::Shape { op, detail })
}

/// Handle to a tape node.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization mode for [`Tape::affine_channel`].
///
/// `FixedUnit` treats the incoming activations as already standardized
/// (unit statistics) and applies only the learned per-channel affine map;
/// `BatchStats` standardizes with per-channel batch mean/variance first.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    FixedUnit,
    BatchStats,
}

const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
struct BatchStatsSaved<S> {
    mean: Vec<S>,
    inv_std: Vec<S>,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var },
    Conv1x1 { input: Var, kernel: Var, bias: Var },
    MaxPool2 { input: Var, argmax: Vec<u32> },
    Upsample2 { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    Relu { input: Var },
    Sigmoid { input: Var },
    SoftmaxRows { input: Var },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatChannels { a: Var, b: Var },
    ConcatCols { parts: Vec<Var> },
    GlobalAvgPool { input: Var },
    SelectRows { input: Var, idx: Vec<usize> },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Flatten { input: Var },
    SumAll { input: Var },
    MeanAll { input: Var },
    Scale { input: Var, c: S },
    Axpby { a: Var, b: Var, ca: S, cb: S },
    AffineChannel { input: Var, gamma: Var, beta: Var, saved: Option<BatchStatsSaved<S>> },
    BceWithLogits { logits: Var, target: Tensor<S> },
    WeightedCe { logits: Var, targets: Vec<usize>, coeff: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Per-variable gradient accumulators produced by [`Tape::backward`].
pub struct Gradients<S> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.slots.get(var.0).and_then(|s| s.as_ref())
    }

    /// Gradient for `var`, zeros if no gradient flowed to it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<S> {
        match self.get(var) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf value (parameter or constant input).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims4(&self, var: Var, op: &'static str) -> Result<(usize, usize, usize, usize), TapeError> {
        match self.shape(var) {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => shape_err(op, format!("expected rank-4 NCHW tensor, got {other:?}")),
        }
    }

    fn dims2(&self, var: Var, op: &'static str) -> Result<(usize, usize), TapeError> {
        match self.shape(var) {
            &[n, d] => Ok((n, d)),
            other => shape_err(op, format!("expected rank-2 tensor, got {other:?}")),
        }
    }

    // ── convolutions ────────────────────────────────────────────────

    /// 3x3 convolution, stride 1, zero padding 1: output spatial dims equal
    /// input spatial dims.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var, TapeError> {
        let (n, c_in, h, w) = self.dims4(input, "conv2d")?;
        let (f, kc, kh, kw) = self.dims4(kernel, "conv2d")?;
        if kh != 3 || kw != 3 {
            return shape_err("conv2d", format!("kernel spatial size must be 3x3, got {kh}x{kw}"));
        }
        if kc != c_in {
            return shape_err(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            );
        }
        if self.shape(bias) != [f] {
            return shape_err(
                "conv2d",
                format!("bias shape {:?} does not match {f} filters", self.shape(bias)),
            );
        }

        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = vec![S::zero(); n * f * h * w];
        let plane = h * w;
        for ni in 0..n {
            for fi in 0..f {
                let out_base = (ni * f + fi) * plane;
                let bias_f = b[fi];
                for v in &mut out[out_base..out_base + plane] {
                    *v = bias_f;
                }
                for ci in 0..c_in {
                    let in_base = (ni * c_in + ci) * plane;
                    let k_base = (fi * c_in + ci) * 9;
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let wgt = k[k_base + ky * 3 + kx];
                            // out[y][x] += wgt * in[y+ky-1][x+kx-1]
                            let y_lo = 1usize.saturating_sub(ky);
                            let y_hi = (h + 1 - ky).min(h);
                            for y in y_lo..y_hi {
                                let iy = y + ky - 1;
                                let x_lo = 1usize.saturating_sub(kx);
                                let x_hi = (w + 1 - kx).min(w);
                                let orow = out_base + y * w;
                                let irow = in_base + iy * w;
                                for xx in x_lo..x_hi {
                                    out[orow + xx] += wgt * x[irow + xx + kx - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![n, f, h, w], out).expect("conv2d output shape");
        Ok(self.push(value, Op::Conv2d { input, kernel, bias }))
    }

    /// 1x1 convolution: per-pixel linear map over channels.
    pub fn conv1x1(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var, TapeError> {
        let (n, c_in, h, w) = self.dims4(input, "conv1x1")?;
        let (f, kc) = self.dims2(kernel, "conv1x1")?;
        if kc != c_in {
            return shape_err(
                "conv1x1",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            );
        }
        if self.shape(bias) != [f] {
            return shape_err(
                "conv1x1",
                format!("bias shape {:?} does not match {f} filters", self.shape(bias)),
            );
        }
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        let plane = h * w;
        let mut out = vec![S::zero(); n * f * plane];
        for ni in 0..n {
            for fi in 0..f {
                let out_base = (ni * f + fi) * plane;
                let bias_f = b[fi];
                for v in &mut out[out_base..out_base + plane] {
                    *v = bias_f;
                }
                for ci in 0..c_in {
                    let wgt = k[fi * c_in + ci];
                    let in_base = (ni * c_in + ci) * plane;
                    for p in 0..plane {
                        out[out_base + p] += wgt * x[in_base + p];
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![n, f, h, w], out).expect("conv1x1 output shape");
        Ok(self.push(value, Op::Conv1x1 { input, kernel, bias }))
    }

    // ── resampling ──────────────────────────────────────────────────

    /// 2x2 max pooling, stride 2. Ties route the gradient to the first
    /// window element in row-major order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var, TapeError> {
        let (n, c, h, w) = self.dims4(input, "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err("maxpool2", format!("spatial dims must be even, got {h}x{w}"));
        }
        let x = self.value(input).data();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![S::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i00 = in_base + (2 * oy) * w + 2 * ox;
                    // row-major window order: (0,0), (0,1), (1,0), (1,1);
                    // strict > keeps the first occurrence on ties
                    let mut best = x[i00];
                    let mut best_i = i00;
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let i = in_base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                    out[out_base + oy * ow + ox] = best;
                    argmax[out_base + oy * ow + ox] = best_i as u32;
                }
            }
        }
        let value = Tensor::from_vec(vec![n, c, oh, ow], out).expect("maxpool2 output shape");
        Ok(self.push(value, Op::MaxPool2 { input, argmax }))
    }

    /// Nearest-neighbor 2x upsampling; backward sums the four replicas.
    pub fn upsample2(&mut self, input: Var) -> Result<Var, TapeError> {
        let (n, c, h, w) = self.dims4(input, "upsample2")?;
        let x = self.value(input).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![S::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * oh * ow;
            for y in 0..h {
                for xx in 0..w {
                    let v = x[in_base + y * w + xx];
                    let o = out_base + (2 * y) * ow + 2 * xx;
                    out[o] = v;
                    out[o + 1] = v;
                    out[o + ow] = v;
                    out[o + ow + 1] = v;
                }
            }
        }
        let value = Tensor::from_vec(vec![n, c, oh, ow], out).expect("upsample2 output shape");
        Ok(self.push(value, Op::Upsample2 { input }))
    }

    // ── dense ───────────────────────────────────────────────────────

    /// Affine map: input [N, D_in] x weight [D_out, D_in] + bias [D_out].
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TapeError> {
        let (n, d_in) = self.dims2(input, "linear")?;
        let (d_out, wd_in) = self.dims2(weight, "linear")?;
        if wd_in != d_in {
            return shape_err(
                "linear",
                format!("weight expects {wd_in} input features, input has {d_in}"),
            );
        }
        if self.shape(bias) != [d_out] {
            return shape_err(
                "linear",
                format!("bias shape {:?} does not match {d_out} outputs", self.shape(bias)),
            );
        }
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![S::zero(); n * d_out];
        for ni in 0..n {
            let xrow = &x[ni * d_in..(ni + 1) * d_in];
            for oi in 0..d_out {
                let wrow = &wt[oi * d_in..(oi + 1) * d_in];
                let mut acc = b[oi];
                for (xv, wv) in xrow.iter().zip(wrow.iter()) {
                    acc += *xv * *wv;
                }
                out[ni * d_out + oi] = acc;
            }
        }
        let value = Tensor::from_vec(vec![n, d_out], out).expect("linear output shape");
        Ok(self.push(value, Op::Linear { input, weight, bias }))
    }

    // ── pointwise ───────────────────────────────────────────────────

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(value, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| x.sigmoid());
        self.push(value, Op::Sigmoid { input })
    }

    /// Row-wise softmax over a [N, C] tensor.
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var, TapeError> {
        let (n, c) = self.dims2(input, "softmax_rows")?;
        let x = self.value(input).data();
        let mut out = vec![S::zero(); n * c];
        for ni in 0..n {
            let row = &x[ni * c..(ni + 1) * c];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (o, &v) in out[ni * c..(ni + 1) * c].iter_mut().zip(row.iter()) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in &mut out[ni * c..(ni + 1) * c] {
                *o /= sum;
            }
        }
        let value = Tensor::from_vec(vec![n, c], out).expect("softmax output shape");
        Ok(self.push(value, Op::SoftmaxRows { input }))
    }

    // ── structured ──────────────────────────────────────────────────

    /// Lookup of `n * l` token ids in a [V, D] table, producing [N, L, D].
    /// The gradient scatter-adds into the table.
    pub fn embedding_lookup(
        &mut self,
        table: Var,
        ids: &[usize],
        n: usize,
        l: usize,
    ) -> Result<Var, TapeError> {
        let (v, d) = self.dims2(table, "embedding_lookup")?;
        if ids.len() != n * l {
            return shape_err(
                "embedding_lookup",
                format!("expected {} ids for a {n}x{l} batch, got {}", n * l, ids.len()),
            );
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(TapeError::Index {
                op: "embedding_lookup",
                detail: format!("token id {bad} out of range for vocabulary of {v}"),
            });
        }
        let tbl = self.value(table).data();
        let mut out = vec![S::zero(); n * l * d];
        for (row, &id) in ids.iter().enumerate() {
            out[row * d..(row + 1) * d].copy_from_slice(&tbl[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_vec(vec![n, l, d], out).expect("embedding output shape");
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Concatenate two NCHW tensors along the channel dim.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (na, ca, ha, wa) = self.dims4(a, "concat_channels")?;
        let (nb, cb, hb, wb) = self.dims4(b, "concat_channels")?;
        if na != nb || ha != hb || wa != wb {
            return shape_err(
                "concat_channels",
                format!(
                    "batch/spatial dims must agree: {:?} vs {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            );
        }
        let plane = ha * wa;
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let mut out = vec![S::zero(); na * (ca + cb) * plane];
        for ni in 0..na {
            let oa = ni * (ca + cb) * plane;
            out[oa..oa + ca * plane].copy_from_slice(&xa[ni * ca * plane..(ni + 1) * ca * plane]);
            out[oa + ca * plane..oa + (ca + cb) * plane]
                .copy_from_slice(&xb[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        let value =
            Tensor::from_vec(vec![na, ca + cb, ha, wa], out).expect("concat_channels shape");
        Ok(self.push(value, Op::ConcatChannels { a, b }))
    }

    /// Concatenate rank-2 tensors along the feature dim.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        if parts.is_empty() {
            return shape_err("concat_cols", "no tensors given".to_string());
        }
        let (n, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (np, dp) = self.dims2(p, "concat_cols")?;
            if np != n {
                return shape_err(
                    "concat_cols",
                    format!("row counts must agree: {n} vs {np}"),
                );
            }
            widths.push(dp);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![S::zero(); n * total];
        for ni in 0..n {
            let mut off = 0;
            for (&p, &dp) in parts.iter().zip(widths.iter()) {
                let src = self.value(p).data();
                out[ni * total + off..ni * total + off + dp]
                    .copy_from_slice(&src[ni * dp..(ni + 1) * dp]);
                off += dp;
            }
        }
        let value = Tensor::from_vec(vec![n, total], out).expect("concat_cols shape");
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Average over the spatial dims: [N, C, H, W] -> [N, C].
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TapeError> {
        let (n, c, h, w) = self.dims4(input, "global_avg_pool")?;
        let x = self.value(input).data();
        let plane = h * w;
        let inv = S::from_f64(1.0 / plane as f64);
        let mut out = vec![S::zero(); n * c];
        for nc in 0..n * c {
            let mut acc = S::zero();
            for &v in &x[nc * plane..(nc + 1) * plane] {
                acc += v;
            }
            out[nc] = acc * inv;
        }
        let value = Tensor::from_vec(vec![n, c], out).expect("gap shape");
        Ok(self.push(value, Op::GlobalAvgPool { input }))
    }

    /// Gather rows of the leading dim: input [B, ...] with indices into B.
    pub fn select_rows(&mut self, input: Var, idx: &[usize]) -> Result<Var, TapeError> {
        let shape = self.shape(input).to_vec();
        if shape.is_empty() {
            return shape_err("select_rows", "input must have a leading dim".to_string());
        }
        let b = shape[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= b) {
            return Err(TapeError::Index {
                op: "select_rows",
                detail: format!("row index {bad} out of range for leading dim {b}"),
            });
        }
        let row: usize = shape[1..].iter().product();
        let x = self.value(input).data();
        let mut out = vec![S::zero(); idx.len() * row];
        for (o, &i) in idx.iter().enumerate() {
            out[o * row..(o + 1) * row].copy_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = idx.len();
        let value = Tensor::from_vec(out_shape, out).expect("select_rows shape");
        Ok(self.push(value, Op::SelectRows { input, idx: idx.to_vec() }))
    }

    // ── elementwise / reductions ────────────────────────────────────

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        if self.shape(a) != self.shape(b) {
            return shape_err(
                "elementwise_mul",
                format!("shapes must agree: {:?} vs {:?}", self.shape(a), self.shape(b)),
            );
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data).expect("mul shape");
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        if self.shape(a) != self.shape(b) {
            return shape_err(
                "add",
                format!("shapes must agree: {:?} vs {:?}", self.shape(a), self.shape(b)),
            );
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data).expect("add shape");
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Collapse all trailing dims: [N, ...] -> [N, prod(rest)].
    pub fn flatten(&mut self, input: Var) -> Result<Var, TapeError> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return shape_err("flatten", format!("expected rank >= 2, got {shape:?}"));
        }
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        let value = self.value(input).reshape(&[n, rest]).expect("flatten shape");
        Ok(self.push(value, Op::Flatten { input }))
    }

    pub fn sum_all(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::SumAll { input })
    }

    pub fn mean_all(&mut self, input: Var) -> Var {
        let n = self.value(input).numel();
        let total: S = self.value(input).data().iter().copied().sum();
        let mean = total / S::from_f64(n as f64);
        self.push(Tensor::scalar(mean), Op::MeanAll { input })
    }

    pub fn scale(&mut self, input: Var, c: S) -> Var {
        let value = self.value(input).map(|x| x * c);
        self.push(value, Op::Scale { input, c })
    }

    /// out = ca*a + cb*b, elementwise over equal shapes.
    pub fn axpby(&mut self, a: Var, ca: S, b: Var, cb: S) -> Result<Var, TapeError> {
        if self.shape(a) != self.shape(b) {
            return shape_err(
                "axpby",
                format!("shapes must agree: {:?} vs {:?}", self.shape(a), self.shape(b)),
            );
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| ca * x + cb * y)
            .collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data).expect("axpby shape");
        Ok(self.push(value, Op::Axpby { a, b, ca, cb }))
    }

    /// Per-channel affine normalization y = gamma_c * x_hat + beta_c over
    /// NCHW input, with gamma/beta of shape [C].
    pub fn affine_channel(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
    ) -> Result<Var, TapeError> {
        let (n, c, h, w) = self.dims4(input, "affine_channel")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(
                "affine_channel",
                format!(
                    "gamma/beta must have shape [{c}], got {:?} and {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            );
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let plane = h * w;
        let mut out = vec![S::zero(); x.len()];
        let saved = match mode {
            NormMode::FixedUnit => {
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        for p in 0..plane {
                            out[base + p] = g[ci] * x[base + p] + b[ci];
                        }
                    }
                }
                None
            }
            NormMode::BatchStats => {
                let m = S::from_f64((n * plane) as f64);
                let eps = S::from_f64(BN_EPS);
                let mut mean = vec![S::zero(); c];
                let mut inv_std = vec![S::zero(); c];
                for ci in 0..c {
                    let mut acc = S::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for p in 0..plane {
                            acc += x[base + p];
                        }
                    }
                    let mu = acc / m;
                    let mut var = S::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for p in 0..plane {
                            let d = x[base + p] - mu;
                            var += d * d;
                        }
                    }
                    var = var / m;
                    let istd = S::one() / (var + eps).sqrt();
                    mean[ci] = mu;
                    inv_std[ci] = istd;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for p in 0..plane {
                            out[base + p] = g[ci] * ((x[base + p] - mu) * istd) + b[ci];
                        }
                    }
                }
                Some(BatchStatsSaved { mean, inv_std })
            }
        };
        let value = Tensor::from_vec(vec![n, c, h, w], out).expect("affine_channel shape");
        Ok(self.push(value, Op::AffineChannel { input, gamma, beta, saved }))
    }

    // ── fused loss heads (wrapped by the loss module) ───────────────

    /// Mean over all elements of the stabilized binary cross-entropy with
    /// logits: max(z,0) - z*p + ln(1 + e^(-|z|)).
    pub(crate) fn bce_with_logits(
        &mut self,
        logits: Var,
        target: Tensor<S>,
    ) -> Result<Var, TapeError> {
        if self.shape(logits) != target.shape() {
            return shape_err(
                "bce_with_logits",
                format!(
                    "logits shape {:?} vs target shape {:?}",
                    self.shape(logits),
                    target.shape()
                ),
            );
        }
        let z = self.value(logits).data();
        let p = target.data();
        let mut acc = S::zero();
        for (&zi, &pi) in z.iter().zip(p.iter()) {
            acc += zi.max(S::zero()) - zi * pi + (-zi.abs()).exp().ln_1p();
        }
        let mean = acc / S::from_f64(z.len() as f64);
        Ok(self.push(Tensor::scalar(mean), Op::BceWithLogits { logits, target }))
    }

    /// Normalized class-weighted cross-entropy over [N, C] logits:
    /// sum_n coeff_n * (-log softmax(x_n)[y_n]) with coeff_n = w_{y_n} / W
    /// precomputed by the caller (W = sum of target-class weights).
    pub(crate) fn weighted_ce(
        &mut self,
        logits: Var,
        targets: &[usize],
        coeff: &[S],
    ) -> Result<Var, TapeError> {
        let (n, c) = self.dims2(logits, "weighted_ce")?;
        if targets.len() != n || coeff.len() != n {
            return shape_err(
                "weighted_ce",
                format!("expected {n} targets/coefficients, got {}/{}", targets.len(), coeff.len()),
            );
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TapeError::Index {
                op: "weighted_ce",
                detail: format!("target class {bad} out of range for {c} classes"),
            });
        }
        let x = self.value(logits).data();
        let nll = rowwise_target_nll(x, n, c, targets);
        let mut acc = S::zero();
        for (&v, &cf) in nll.iter().zip(coeff.iter()) {
            acc += cf * v;
        }
        Ok(self.push(
            Tensor::scalar(acc),
            Op::WeightedCe { logits, targets: targets.to_vec(), coeff: coeff.to_vec() },
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// when a variable feeds multiple consumers.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, TapeError> {
        if self.value(loss).numel() != 1 {
            return Err(TapeError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut slots: Vec<Option<Tensor<S>>> = Vec::with_capacity(self.nodes.len());
        slots.resize_with(self.nodes.len(), || None);
        slots[loss.0] = Some(Tensor::full(self.shape(loss), S::one()));
        for id in (0..=loss.0).rev() {
            let (earlier, rest) = slots.split_at_mut(id);
            if let Some(grad) = rest[0].as_ref() {
                self.backward_node(id, grad, earlier);
            }
        }
        Ok(Gradients { slots })
    }

    fn backward_node(&self, id: usize, grad: &Tensor<S>, earlier: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[id];
        let g = grad.data();
        match &node.op {
            Op::Leaf => {}

            Op::Conv2d { input, kernel, bias } => {
                let (n, c_in, h, w) = {
                    let s = self.shape(*input);
                    (s[0], s[1], s[2], s[3])
                };
                let f = self.shape(*kernel)[0];
                let plane = h * w;
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();

                let dx = grad_slot(earlier, *input, &[n, c_in, h, w]);
                for ni in 0..n {
                    for fi in 0..f {
                        let g_base = (ni * f + fi) * plane;
                        for ci in 0..c_in {
                            let in_base = (ni * c_in + ci) * plane;
                            let k_base = (fi * c_in + ci) * 9;
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let wgt = k[k_base + ky * 3 + kx];
                                    let y_lo = 1usize.saturating_sub(ky);
                                    let y_hi = (h + 1 - ky).min(h);
                                    for y in y_lo..y_hi {
                                        let iy = y + ky - 1;
                                        let x_lo = 1usize.saturating_sub(kx);
                                        let x_hi = (w + 1 - kx).min(w);
                                        let grow = g_base + y * w;
                                        let irow = in_base + iy * w;
                                        for xx in x_lo..x_hi {
                                            dx[irow + xx + kx - 1] += wgt * g[grow + xx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }

                let dk = grad_slot(earlier, *kernel, &[f, c_in, 3, 3]);
                for ni in 0..n {
                    for fi in 0..f {
                        let g_base = (ni * f + fi) * plane;
                        for ci in 0..c_in {
                            let in_base = (ni * c_in + ci) * plane;
                            let k_base = (fi * c_in + ci) * 9;
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let mut acc = S::zero();
                                    let y_lo = 1usize.saturating_sub(ky);
                                    let y_hi = (h + 1 - ky).min(h);
                                    for y in y_lo..y_hi {
                                        let iy = y + ky - 1;
                                        let x_lo = 1usize.saturating_sub(kx);
                                        let x_hi = (w + 1 - kx).min(w);
                                        let grow = g_base + y * w;
                                        let irow = in_base + iy * w;
                                        for xx in x_lo..x_hi {
                                            acc += g[grow + xx] * x[irow + xx + kx - 1];
                                        }
                                    }
                                    dk[k_base + ky * 3 + kx] += acc;
                                }
                            }
                        }
                    }
                }

                let db = grad_slot(earlier, *bias, &[f]);
                for ni in 0..n {
                    for fi in 0..f {
                        let g_base = (ni * f + fi) * plane;
                        let mut acc = S::zero();
                        for &gv in &g[g_base..g_base + plane] {
                            acc += gv;
                        }
                        db[fi] += acc;
                    }
                }
            }

            Op::Conv1x1 { input, kernel, bias } => {
                let (n, c_in, h, w) = {
                    let s = self.shape(*input);
                    (s[0], s[1], s[2], s[3])
                };
                let f = self.shape(*kernel)[0];
                let plane = h * w;
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();

                let dx = grad_slot(earlier, *input, &[n, c_in, h, w]);
                for ni in 0..n {
                    for fi in 0..f {
                        let g_base = (ni * f + fi) * plane;
                        for ci in 0..c_in {
                            let wgt = k[fi * c_in + ci];
                            let in_base = (ni * c_in + ci) * plane;
                            for p in 0..plane {
                                dx[in_base + p] += wgt * g[g_base + p];
                            }
                        }
                    }
                }
                let dk = grad_slot(earlier, *kernel, &[f, c_in]);
                for ni in 0..n {
                    for fi in 0..f {
                        let g_base = (ni * f + fi) * plane;
                        for ci in 0..c_in {
                            let in_base = (ni * c_in + ci) * plane;
                            let mut acc = S::zero();
                            for p in 0..plane {
                                acc += g[g_base + p] * x[in_base + p];
                            }
                            dk[fi * c_in + ci] += acc;
                        }
                    }
                }
                let db = grad_slot(earlier, *bias, &[f]);
                for ni in 0..n {
                    for fi in 0..f {
                        let g_base = (ni * f + fi) * plane;
                        let mut acc = S::zero();
                        for &gv in &g[g_base..g_base + plane] {
                            acc += gv;
                        }
                        db[fi] += acc;
                    }
                }
            }

            Op::MaxPool2 { input, argmax } => {
                let shape = self.shape(*input).to_vec();
                let dx = grad_slot(earlier, *input, &shape);
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src as usize] += g[o];
                }
            }

            Op::Upsample2 { input } => {
                let shape = self.shape(*input).to_vec();
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = (2 * h, 2 * w);
                let dx = grad_slot(earlier, *input, &shape);
                for nc in 0..shape[0] * shape[1] {
                    let in_base = nc * h * w;
                    let out_base = nc * oh * ow;
                    for y in 0..h {
                        for xx in 0..w {
                            let o = out_base + (2 * y) * ow + 2 * xx;
                            dx[in_base + y * w + xx] +=
                                g[o] + g[o + 1] + g[o + ow] + g[o + ow + 1];
                        }
                    }
                }
            }

            Op::Linear { input, weight, bias } => {
                let (n, d_in) = {
                    let s = self.shape(*input);
                    (s[0], s[1])
                };
                let d_out = self.shape(*weight)[0];
                let x = self.value(*input).data();
                let wt = self.value(*weight).data();

                let dx = grad_slot(earlier, *input, &[n, d_in]);
                for ni in 0..n {
                    for oi in 0..d_out {
                        let gv = g[ni * d_out + oi];
                        let wrow = &wt[oi * d_in..(oi + 1) * d_in];
                        let drow = &mut dx[ni * d_in..(ni + 1) * d_in];
                        for (dv, &wv) in drow.iter_mut().zip(wrow.iter()) {
                            *dv += gv * wv;
                        }
                    }
                }
                let dw = grad_slot(earlier, *weight, &[d_out, d_in]);
                for ni in 0..n {
                    let xrow = &x[ni * d_in..(ni + 1) * d_in];
                    for oi in 0..d_out {
                        let gv = g[ni * d_out + oi];
                        let wrow = &mut dw[oi * d_in..(oi + 1) * d_in];
                        for (dv, &xv) in wrow.iter_mut().zip(xrow.iter()) {
                            *dv += gv * xv;
                        }
                    }
                }
                let db = grad_slot(earlier, *bias, &[d_out]);
                for ni in 0..n {
                    for oi in 0..d_out {
                        db[oi] += g[ni * d_out + oi];
                    }
                }
            }

            Op::Relu { input } => {
                let shape = self.shape(*input).to_vec();
                let x = self.value(*input).data();
                let dx = grad_slot(earlier, *input, &shape);
                for i in 0..x.len() {
                    if x[i] > S::zero() {
                        dx[i] += g[i];
                    }
                }
            }

            Op::Sigmoid { input } => {
                let shape = self.shape(*input).to_vec();
                let y = node.value.data();
                let dx = grad_slot(earlier, *input, &shape);
                for i in 0..y.len() {
                    dx[i] += g[i] * y[i] * (S::one() - y[i]);
                }
            }

            Op::SoftmaxRows { input } => {
                let (n, c) = {
                    let s = self.shape(*input);
                    (s[0], s[1])
                };
                let y = node.value.data();
                let dx = grad_slot(earlier, *input, &[n, c]);
                for ni in 0..n {
                    let base = ni * c;
                    let mut dot = S::zero();
                    for j in 0..c {
                        dot += g[base + j] * y[base + j];
                    }
                    for j in 0..c {
                        dx[base + j] += y[base + j] * (g[base + j] - dot);
                    }
                }
            }

            Op::Embedding { table, ids } => {
                let (v, d) = {
                    let s = self.shape(*table);
                    (s[0], s[1])
                };
                let dt = grad_slot(earlier, *table, &[v, d]);
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
            }

            Op::ConcatChannels { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (n, ca, cb) = (sa[0], sa[1], sb[1]);
                let plane = sa[2] * sa[3];
                let da = grad_slot(earlier, *a, &sa);
                for ni in 0..n {
                    let o = ni * (ca + cb) * plane;
                    for i in 0..ca * plane {
                        da[ni * ca * plane + i] += g[o + i];
                    }
                }
                let db = grad_slot(earlier, *b, &sb);
                for ni in 0..n {
                    let o = ni * (ca + cb) * plane + ca * plane;
                    for i in 0..cb * plane {
                        db[ni * cb * plane + i] += g[o + i];
                    }
                }
            }

            Op::ConcatCols { parts } => {
                let n = self.shape(parts[0])[0];
                let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &dp) in parts.iter().zip(widths.iter()) {
                    let dpart = grad_slot(earlier, p, &[n, dp]);
                    for ni in 0..n {
                        for j in 0..dp {
                            dpart[ni * dp + j] += g[ni * total + off + j];
                        }
                    }
                    off += dp;
                }
            }

            Op::GlobalAvgPool { input } => {
                let shape = self.shape(*input).to_vec();
                let plane = shape[2] * shape[3];
                let inv = S::from_f64(1.0 / plane as f64);
                let dx = grad_slot(earlier, *input, &shape);
                for nc in 0..shape[0] * shape[1] {
                    let gv = g[nc] * inv;
                    for p in 0..plane {
                        dx[nc * plane + p] += gv;
                    }
                }
            }

            Op::SelectRows { input, idx } => {
                let shape = self.shape(*input).to_vec();
                let row: usize = shape[1..].iter().product();
                let dx = grad_slot(earlier, *input, &shape);
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..row {
                        dx[i * row + j] += g[o * row + j];
                    }
                }
            }

            Op::Mul { a, b } => {
                let shape = self.shape(*a).to_vec();
                let xa = self.value(*a).data().to_vec();
                let xb = self.value(*b).data().to_vec();
                let da = grad_slot(earlier, *a, &shape);
                for i in 0..xb.len() {
                    da[i] += g[i] * xb[i];
                }
                let db = grad_slot(earlier, *b, &shape);
                for i in 0..xa.len() {
                    db[i] += g[i] * xa[i];
                }
            }

            Op::Add { a, b } => {
                let shape = self.shape(*a).to_vec();
                let da = grad_slot(earlier, *a, &shape);
                for i in 0..g.len() {
                    da[i] += g[i];
                }
                let db = grad_slot(earlier, *b, &shape);
                for i in 0..g.len() {
                    db[i] += g[i];
                }
            }

            Op::Flatten { input } => {
                let shape = self.shape(*input).to_vec();
                let dx = grad_slot(earlier, *input, &shape);
                for i in 0..g.len() {
                    dx[i] += g[i];
                }
            }

            Op::SumAll { input } => {
                let shape = self.shape(*input).to_vec();
                let gv = g[0];
                let dx = grad_slot(earlier, *input, &shape);
                for v in dx.iter_mut() {
                    *v += gv;
                }
            }

            Op::MeanAll { input } => {
                let shape = self.shape(*input).to_vec();
                let n: usize = shape.iter().product();
                let gv = g[0] / S::from_f64(n as f64);
                let dx = grad_slot(earlier, *input, &shape);
                for v in dx.iter_mut() {
                    *v += gv;
                }
            }

            Op::Scale { input, c } => {
                let shape = self.shape(*input).to_vec();
                let dx = grad_slot(earlier, *input, &shape);
                for i in 0..g.len() {
                    dx[i] += *c * g[i];
                }
            }

            Op::Axpby { a, b, ca, cb } => {
                let shape = self.shape(*a).to_vec();
                let da = grad_slot(earlier, *a, &shape);
                for i in 0..g.len() {
                    da[i] += *ca * g[i];
                }
                let db = grad_slot(earlier, *b, &shape);
                for i in 0..g.len() {
                    db[i] += *cb * g[i];
                }
            }

            Op::AffineChannel { input, gamma, beta, saved } => {
                let shape = self.shape(*input).to_vec();
                let (n, c) = (shape[0], shape[1]);
                let plane = shape[2] * shape[3];
                let x = self.value(*input).data();
                let gm = self.value(*gamma).data();

                match saved {
                    None => {
                        let dx = grad_slot(earlier, *input, &shape);
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * plane;
                                for p in 0..plane {
                                    dx[base + p] += gm[ci] * g[base + p];
                                }
                            }
                        }
                        let dg = grad_slot(earlier, *gamma, &[c]);
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * plane;
                                let mut acc = S::zero();
                                for p in 0..plane {
                                    acc += g[base + p] * x[base + p];
                                }
                                dg[ci] += acc;
                            }
                        }
                        let db = grad_slot(earlier, *beta, &[c]);
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * plane;
                                let mut acc = S::zero();
                                for &gv in &g[base..base + plane] {
                                    acc += gv;
                                }
                                db[ci] += acc;
                            }
                        }
                    }
                    Some(stats) => {
                        let m = S::from_f64((n * plane) as f64);
                        // per channel: x_hat = (x - mu) * istd
                        // dx = gamma*istd*(dy - mean(dy) - x_hat * mean(dy * x_hat))
                        let mut dg_acc = vec![S::zero(); c];
                        let mut db_acc = vec![S::zero(); c];
                        let mut sum_dy = vec![S::zero(); c];
                        let mut sum_dy_xhat = vec![S::zero(); c];
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * plane;
                                for p in 0..plane {
                                    let xhat = (x[base + p] - stats.mean[ci]) * stats.inv_std[ci];
                                    let gv = g[base + p];
                                    sum_dy[ci] += gv;
                                    sum_dy_xhat[ci] += gv * xhat;
                                    dg_acc[ci] += gv * xhat;
                                    db_acc[ci] += gv;
                                }
                            }
                        }
                        let dx = grad_slot(earlier, *input, &shape);
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * plane;
                                let k = gm[ci] * stats.inv_std[ci];
                                let mean_dy = sum_dy[ci] / m;
                                let mean_dy_xhat = sum_dy_xhat[ci] / m;
                                for p in 0..plane {
                                    let xhat = (x[base + p] - stats.mean[ci]) * stats.inv_std[ci];
                                    dx[base + p] += k * (g[base + p] - mean_dy - xhat * mean_dy_xhat);
                                }
                            }
                        }
                        let dg = grad_slot(earlier, *gamma, &[c]);
                        for ci in 0..c {
                            dg[ci] += dg_acc[ci];
                        }
                        let db = grad_slot(earlier, *beta, &[c]);
                        for ci in 0..c {
                            db[ci] += db_acc[ci];
                        }
                    }
                }
            }

            Op::BceWithLogits { logits, target } => {
                let shape = self.shape(*logits).to_vec();
                let z = self.value(*logits).data();
                let p = target.data();
                let inv = S::from_f64(1.0 / z.len() as f64);
                let gv = g[0] * inv;
                let dx = grad_slot(earlier, *logits, &shape);
                for i in 0..z.len() {
                    dx[i] += gv * (z[i].sigmoid() - p[i]);
                }
            }

            Op::WeightedCe { logits, targets, coeff } => {
                let (n, c) = {
                    let s = self.shape(*logits);
                    (s[0], s[1])
                };
                let x = self.value(*logits).data();
                let gv = g[0];
                let dx = grad_slot(earlier, *logits, &[n, c]);
                for ni in 0..n {
                    let row = &x[ni * c..(ni + 1) * c];
                    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let mut sum = S::zero();
                    for &v in row {
                        sum += (v - max).exp();
                    }
                    let cf = coeff[ni] * gv;
                    for j in 0..c {
                        let prob = (row[j] - max).exp() / sum;
                        let indicator = if j == targets[ni] { S::one() } else { S::zero() };
                        dx[ni * c + j] += cf * (prob - indicator);
                    }
                }
            }
        }
    }
}

/// Per-row negative log softmax probability of each row's target class,
/// via the max-shifted log-sum-exp form. Callers must have validated that
/// every target is < c.
pub(crate) fn rowwise_target_nll<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    targets: &[usize],
) -> Vec<S> {
    let mut nll = Vec::with_capacity(n);
    for (ni, &y) in targets.iter().enumerate() {
        let row = &x[ni * c..(ni + 1) * c];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        nll.push(max + sum.ln() - row[y]);
    }
    nll
}

/// Borrow the gradient accumulator for `var`, creating a zero tensor of
/// `shape` on first touch.
fn grad_slot<'a, S: Scalar>(
    slots: &'a mut [Option<Tensor<S>>],
    var: Var,
    shape: &[usize],
) -> &'a mut [S] {
    let slot = &mut slots[var.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
    }
    slot.as_mut().unwrap().data_mut()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv2d_zero_input_emits_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        let k = tape.leaf(t(&[2, 1, 3, 3], vec![0.37; 18]));
        let b = tape.leaf(t(&[2], vec![1.25, -0.5]));
        let out = tape.conv2d(x, k, b).unwrap();
        let data = tape.value(out).data();
        assert!(data[..9].iter().all(|&v| v == 1.25));
        assert!(data[9..].iter().all(|&v| v == -0.5));
    }

    #[test]
    fn conv2d_single_pixel_sees_only_center_tap() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 1, 1], vec![2.0]));
        let k = tape.leaf(t(&[1, 1, 3, 3], vec![1.0; 9]));
        let b = tape.leaf(t(&[1], vec![0.0]));
        let out = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, k, b), Err(TapeError::Shape { op: "conv2d", .. })));
    }

    #[test]
    fn maxpool2_takes_window_max() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let out = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(out).data(), &[4.0]);
    }

    #[test]
    fn maxpool2_rejects_odd_dims() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(matches!(tape.maxpool2(x), Err(TapeError::Shape { op: "maxpool2", .. })));
    }

    #[test]
    fn maxpool2_ties_route_gradient_to_first_window_element() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 3.0));
        let pooled = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(pooled).data(), &[3.0]);
        let loss = tape.sum_all(pooled);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample2_replicates_nearest() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 1, 1], vec![1.0]));
        let out = tape.upsample2(x).unwrap();
        assert_eq!(tape.shape(out), &[1, 1, 2, 2]);
        assert_eq!(tape.value(out).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn upsample_of_pooled_restores_shape() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 6, 4], 0.5));
        let pooled = tape.maxpool2(x).unwrap();
        let up = tape.upsample2(pooled).unwrap();
        assert_eq!(tape.shape(up), tape.shape(x));
    }

    #[test]
    fn linear_identity_and_constant_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let eye = tape.leaf(t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let zero_b = tape.leaf(Tensor::zeros(&[2]));
        let out = tape.linear(x, eye, zero_b).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(x).data());

        let zero_w = tape.leaf(Tensor::zeros(&[3, 2]));
        let b = tape.leaf(t(&[3], vec![0.7, -0.1, 2.0]));
        let out = tape.linear(x, zero_w, b).unwrap();
        assert_eq!(tape.value(out).data(), &[0.7, -0.1, 2.0, 0.7, -0.1, 2.0]);

        let bad_w = tape.leaf(Tensor::zeros(&[3, 5]));
        assert!(matches!(tape.linear(x, bad_w, b), Err(TapeError::Shape { op: "linear", .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 4], vec![0.3, -1.0, 2.0, 0.0, 5.0, 5.0, 5.0, 5.0]));
        let out = tape.softmax_rows(x).unwrap();
        let data = tape.value(out).data();
        for row in data.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // constant row: uniform 1/C
        assert!(data[4..].iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn relu_blocks_gradient_on_negative_side() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            tape.embedding_lookup(table, &[0, 4], 1, 2),
            Err(TapeError::Index { op: "embedding_lookup", .. })
        ));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(TapeError::NonScalarLoss(_))));
    }

    #[test]
    fn batch_stats_mode_standardizes_per_channel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(
            &[2, 2, 1, 2],
            vec![1.0, 5.0, -3.0, 0.5, 2.0, -4.0, 7.0, 0.5],
        ));
        let gamma = tape.leaf(Tensor::full(&[2], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.affine_channel(x, gamma, beta, NormMode::BatchStats).unwrap();
        let data = tape.value(y).data();
        // channel c occupies positions (n*2 + c)*2 .. +2
        for c in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| data[(n * 2 + c) * 2..(n * 2 + c) * 2 + 2].to_vec())
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / 4.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn select_rows_validates_indices() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            tape.select_rows(x, &[0, 3]),
            Err(TapeError::Index { op: "select_rows", .. })
        ));
    }
}
