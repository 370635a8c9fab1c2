//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Tensors are
//! owned by the tape and addressed by [`TensorId`]; `backward` walks the
//! recorded operations in reverse and accumulates gradients additively.
//! Tapes are cheap and short-lived: one per example per step.
//!
//! Shapes are 1-D vectors `[n]` or row-major 2-D matrices `[m, n]`;
//! scalars are `[1]`. Binary elementwise ops accept either two equal
//! shapes or a scalar `[1]` on the right-hand side.

use crate::error::{Error, Result};
use crate::store::ParameterStore;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Dense tensor with optional gradient buffer.
///
/// `grad` is allocated exactly when `requires_grad` is set, and always has
/// the same length as `data`.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    op: Op,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, f64),
    ClampMin(TensorId, f64),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Relu(TensorId),
    Sqrt(TensorId),
    Recip(TensorId),
    SumAll(TensorId),
    SumRows(TensorId),
    SumCols(TensorId),
    AddRow(TensorId, TensorId),
    ScaleRows(TensorId, TensorId),
    SoftmaxRows(TensorId),
    // Masked outputs are exactly zero, so backward needs no mask copy.
    MaskedSoftmaxRows(TensorId),
    SoftmaxAll(TensorId),
    MeanRows(TensorId, Vec<bool>),
    GatherRows(TensorId, Vec<usize>),
    ConcatCols(Vec<TensorId>),
    SliceCols(TensorId, usize, usize),
    Reshape(TensorId),
    Dropout(TensorId, Vec<f64>),
    LayerNormRows {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BceWithLogitsMean(TensorId, Vec<f64>),
}

/// Records one forward pass and runs its backward sweep.
pub struct Tape {
    nodes: Vec<Tensor>,
    bound_params: Vec<String>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Tape {
    /// A tape for evaluation: dropout is the identity, no randomness used.
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// A tape with explicit mode and dropout seed. Identical seeds replay
    /// identical dropout masks, which keeps finite-difference probes valid
    /// even in training mode.
    pub fn with_mode(training: bool, seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            bound_params: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let grad = requires_grad.then(|| vec![0.0; data.len()]);
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Record an input tensor.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf { param: None }))
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.push(vec![1], vec![value], false, Op::Leaf { param: None })
    }

    /// Bind a named parameter from the store as a differentiable leaf.
    /// Gradients flow back into the store via [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<TensorId> {
        let p = store.get(name)?;
        let idx = self.bound_params.len();
        self.bound_params.push(name.to_string());
        Ok(self.push(
            p.shape.clone(),
            p.value.clone(),
            true,
            Op::Leaf { param: Some(idx) },
        ))
    }

    // ---- elementwise binary ----------------------------------------------

    fn binary_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa == sb || self.nodes[b.0].numel() == 1 {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        self.binary_shape(op_name, a, b)?;
        let scalar_rhs = self.nodes[b.0].numel() == 1;
        let bv = self.nodes[b.0].data[0];
        let out: Vec<f64> = if scalar_rhs {
            self.nodes[a.0].data.iter().map(|&x| f(x, bv)).collect()
        } else {
            self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---- elementwise unary -----------------------------------------------

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), out, rg, op)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn clamp_min(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| x.max(c), Op::ClampMin(a, c))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].data.iter().any(|&x| x < 0.0) {
            return Err(Error::Numeric("sqrt of negative value".into()));
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn recip(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].data.iter().any(|&x| x == 0.0) {
            return Err(Error::Numeric("reciprocal of zero".into()));
        }
        Ok(self.unary(a, |x| 1.0 / x, Op::Recip(a)))
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = mm_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.requires(a);
        Ok(self.push(vec![n, m], out, rg, Op::Transpose(a)))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.requires(a);
        self.push(vec![1], vec![s], rg, Op::SumAll(a))
    }

    /// Per-row sums of a 2-D tensor: `[m, n] -> [m]`.
    pub fn sum_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let s = require_2d(&self.nodes[a.0].shape, "sum_rows")?;
        let (m, n) = s;
        let src = &self.nodes[a.0].data;
        let out: Vec<f64> = (0..m).map(|i| src[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = self.requires(a);
        Ok(self.push(vec![m], out, rg, Op::SumRows(a)))
    }

    /// Per-column sums of a 2-D tensor: `[m, n] -> [n]`.
    pub fn sum_cols(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = require_2d(&self.nodes[a.0].shape, "sum_cols")?;
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += src[i * n + j];
            }
        }
        let rg = self.requires(a);
        Ok(self.push(vec![n], out, rg, Op::SumCols(a)))
    }

    // ---- broadcast helpers ---------------------------------------------------

    /// Add a row vector `[n]` to every row of `[m, n]`.
    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = require_2d(&self.nodes[a.0].shape, "add_row")?;
        if self.nodes[b.0].shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = self.nodes[a.0].data.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += self.nodes[b.0].data[j];
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, rg, Op::AddRow(a, b)))
    }

    /// Scale row `i` of `[m, n]` by `s[i]`.
    pub fn scale_rows(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let (m, n) = require_2d(&self.nodes[a.0].shape, "scale_rows")?;
        if self.nodes[s.0].shape != [m] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[s.0].shape.clone(),
            });
        }
        let mut out = self.nodes[a.0].data.clone();
        for i in 0..m {
            let f = self.nodes[s.0].data[i];
            for j in 0..n {
                out[i * n + j] *= f;
            }
        }
        let rg = self.requires(a) || self.requires(s);
        Ok(self.push(vec![m, n], out, rg, Op::ScaleRows(a, s)))
    }

    // ---- softmax family --------------------------------------------------------

    /// Row-wise softmax of a 2-D tensor (or of a 1-D tensor as one row),
    /// computed with max subtraction.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
        if cols == 0 {
            return Err(Error::Degenerate("softmax over empty slice".into()));
        }
        if self.nodes[a.0].data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("softmax of non-finite input".into()));
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[a.0].data[r * cols..(r + 1) * cols];
            softmax_into(row, &mut out[r * cols..(r + 1) * cols]);
        }
        let rg = self.requires(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, rg, Op::SoftmaxRows(a)))
    }

    /// Row-wise softmax restricted to `mask == true` positions; masked
    /// positions are exactly zero. Every row must keep at least one
    /// unmasked entry.
    pub fn masked_softmax_rows(&mut self, a: TensorId, mask: &[bool]) -> Result<TensorId> {
        let (rows, cols) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
        if mask.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax_rows",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        if self.nodes[a.0].data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("softmax of non-finite input".into()));
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[a.0].data[r * cols..(r + 1) * cols];
            let rmask = &mask[r * cols..(r + 1) * cols];
            if !rmask.iter().any(|&b| b) {
                return Err(Error::Degenerate(format!(
                    "masked softmax row {r} has no unmasked entries"
                )));
            }
            let mx = row
                .iter()
                .zip(rmask)
                .filter(|(_, &b)| b)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..cols {
                if rmask[j] {
                    let e = (row[j] - mx).exp();
                    out[r * cols + j] = e;
                    denom += e;
                }
            }
            for j in 0..cols {
                if rmask[j] {
                    out[r * cols + j] /= denom;
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            out,
            rg,
            Op::MaskedSoftmaxRows(a),
        ))
    }

    /// Softmax over every entry of the tensor jointly.
    pub fn softmax_all(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].data.is_empty() {
            return Err(Error::Degenerate("softmax over empty tensor".into()));
        }
        if self.nodes[a.0].data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("softmax of non-finite input".into()));
        }
        let mut out = vec![0.0; self.nodes[a.0].data.len()];
        softmax_into(&self.nodes[a.0].data, &mut out);
        let rg = self.requires(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, rg, Op::SoftmaxAll(a)))
    }

    /// Mean over rows of `[m, n]` marked valid: `-> [n]`.
    pub fn mean_rows(&mut self, a: TensorId, valid: &[bool]) -> Result<TensorId> {
        let (m, n) = require_2d(&self.nodes[a.0].shape, "mean_rows")?;
        if valid.len() != m {
            return Err(Error::ShapeMismatch {
                op: "mean_rows",
                lhs: vec![m],
                rhs: vec![valid.len()],
            });
        }
        let count = valid.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::Degenerate("mean over zero valid rows".into()));
        }
        let mut out = vec![0.0; n];
        for i in 0..m {
            if valid[i] {
                for j in 0..n {
                    out[j] += self.nodes[a.0].data[i * n + j];
                }
            }
        }
        for v in &mut out {
            *v /= count as f64;
        }
        let rg = self.requires(a);
        Ok(self.push(vec![n], out, rg, Op::MeanRows(a, valid.to_vec())))
    }

    /// Gather rows of a 2-D tensor by index; duplicate indices accumulate
    /// gradient additively.
    pub fn gather_rows(&mut self, a: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (m, n) = require_2d(&self.nodes[a.0].shape, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::Data(format!(
                "gather index {bad} out of range for {m} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(&self.nodes[a.0].data[i * n..(i + 1) * n]);
        }
        let rg = self.requires(a);
        Ok(self.push(vec![ids.len(), n], out, rg, Op::GatherRows(a, ids.to_vec())))
    }

    /// Concatenate along the last axis. All parts must share the leading
    /// dimension (1-D parts are treated as single rows).
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Degenerate("concat of zero tensors".into()));
        }
        let one_d = self.nodes[parts[0].0].shape.len() == 1;
        let rows = self.nodes[parts[0].0].rows();
        let mut total = 0;
        for &p in parts {
            if self.nodes[p.0].rows() != rows || (self.nodes[p.0].shape.len() == 1) != one_d {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            total += self.nodes[p.0].cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.nodes[p.0].cols();
                out.extend_from_slice(&self.nodes[p.0].data[r * c..(r + 1) * c]);
            }
        }
        let shape = if one_d { vec![total] } else { vec![rows, total] };
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(shape, out, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `[from, to)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: TensorId, from: usize, to: usize) -> Result<TensorId> {
        let (m, n) = require_2d(&self.nodes[a.0].shape, "slice_cols")?;
        if from >= to || to > n {
            return Err(Error::Usage(format!(
                "slice_cols range {from}..{to} invalid for width {n}"
            )));
        }
        let w = to - from;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.nodes[a.0].data[i * n + from..i * n + to]);
        }
        let rg = self.requires(a);
        Ok(self.push(vec![m, w], out, rg, Op::SliceCols(a, from, to)))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if shape.iter().product::<usize>() != self.nodes[a.0].numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.requires(a);
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape(a)))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; in eval mode
    /// the input is returned unchanged.
    pub fn dropout(&mut self, a: TensorId, p: f64) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.nodes[a.0].numel())
            .map(|_| {
                if self.rng.gen::<f64>() < p {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let rg = self.requires(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, rg, Op::Dropout(a, mask)))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm_rows(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (rows, cols) = (self.nodes[x.0].rows(), self.nodes[x.0].cols());
        if self.nodes[gain.0].shape != [cols] || self.nodes[bias.0].shape != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_rows",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[x.0].data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let xn = (row[j] - mean) * is;
                normalized[r * cols + j] = xn;
                out[r * cols + j] = xn * self.nodes[gain.0].data[j] + self.nodes[bias.0].data[j];
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            out,
            rg,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Mean binary cross entropy between logits and soft targets in [0, 1],
    /// in the numerically stable logit formulation.
    pub fn bce_with_logits_mean(&mut self, logits: TensorId, targets: &[f64]) -> Result<TensorId> {
        let n = self.nodes[logits.0].numel();
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits_mean",
                lhs: vec![n],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| !(0.0..=1.0).contains(&y)) {
            return Err(Error::Data(format!("bce target {bad} outside [0, 1]")));
        }
        let mut total = 0.0;
        for (z, &y) in self.nodes[logits.0].data.iter().zip(targets) {
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let loss = total / n as f64;
        let rg = self.requires(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::BceWithLogitsMean(logits, targets.to_vec()),
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Backpropagate from a scalar output. Gradients accumulate additively
    /// into every tensor with `requires_grad`, and the scalar's own
    /// gradient is 1.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Usage(
                "backward from a tensor that does not require gradients".into(),
            ));
        }
        if let Some(g) = &mut self.nodes[loss.0].grad {
            g[0] += 1.0;
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match &self.nodes[i].grad {
                Some(g) if g.iter().any(|&v| v != 0.0) => g.clone(),
                _ => continue,
            };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: TensorId, delta: &[f64]) {
        if let Some(g) = &mut self.nodes[id.0].grad {
            for (gi, &d) in g.iter_mut().zip(delta) {
                *gi += d;
            }
        }
    }

    fn add_grad_scalar(&mut self, id: TensorId, delta: f64) {
        if let Some(g) = &mut self.nodes[id.0].grad {
            g[0] += delta;
        }
    }

    fn backprop_node(&mut self, idx: usize, g: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                if self.requires(a) {
                    self.add_grad(a, g);
                }
                if self.requires(b) {
                    if self.nodes[b.0].numel() == 1 {
                        self.add_grad_scalar(b, g.iter().sum());
                    } else {
                        self.add_grad(b, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires(a) {
                    self.add_grad(a, g);
                }
                if self.requires(b) {
                    if self.nodes[b.0].numel() == 1 {
                        self.add_grad_scalar(b, -g.iter().sum::<f64>());
                    } else {
                        let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                        self.add_grad(b, &neg);
                    }
                }
            }
            Op::Mul(a, b) => {
                let scalar_rhs = self.nodes[b.0].numel() == 1;
                if self.requires(a) {
                    let da: Vec<f64> = if scalar_rhs {
                        let bv = self.nodes[b.0].data[0];
                        g.iter().map(|&v| v * bv).collect()
                    } else {
                        g.iter().zip(&self.nodes[b.0].data).map(|(&v, &y)| v * y).collect()
                    };
                    self.add_grad(a, &da);
                }
                if self.requires(b) {
                    if scalar_rhs {
                        let db: f64 = g.iter().zip(&self.nodes[a.0].data).map(|(&v, &x)| v * x).sum();
                        self.add_grad_scalar(b, db);
                    } else {
                        let db: Vec<f64> =
                            g.iter().zip(&self.nodes[a.0].data).map(|(&v, &x)| v * x).collect();
                        self.add_grad(b, &db);
                    }
                }
            }
            Op::Div(a, b) => {
                let scalar_rhs = self.nodes[b.0].numel() == 1;
                if self.requires(a) {
                    let da: Vec<f64> = if scalar_rhs {
                        let bv = self.nodes[b.0].data[0];
                        g.iter().map(|&v| v / bv).collect()
                    } else {
                        g.iter().zip(&self.nodes[b.0].data).map(|(&v, &y)| v / y).collect()
                    };
                    self.add_grad(a, &da);
                }
                if self.requires(b) {
                    if scalar_rhs {
                        let bv = self.nodes[b.0].data[0];
                        let db: f64 = g
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(&v, &x)| -v * x / (bv * bv))
                            .sum();
                        self.add_grad_scalar(b, db);
                    } else {
                        let db: Vec<f64> = g
                            .iter()
                            .zip(self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data))
                            .map(|(&v, (&x, &y))| -v * x / (y * y))
                            .collect();
                        self.add_grad(b, &db);
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.requires(a) {
                    let da: Vec<f64> = g.iter().map(|&v| v * c).collect();
                    self.add_grad(a, &da);
                }
            }
            Op::ClampMin(a, c) => {
                if self.requires(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&v, &x)| if x > c { v } else { 0.0 })
                        .collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.requires(a) {
                    // dA = dC * B^T
                    let da = mm_nt(g, &self.nodes[b.0].data, m, n, k);
                    self.add_grad(a, &da);
                }
                if self.requires(b) {
                    // dB = A^T * dC
                    let db = mm_tn(&self.nodes[a.0].data, g, m, k, n);
                    self.add_grad(b, &db);
                }
            }
            Op::Transpose(a) => {
                if self.requires(a) {
                    let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::Relu(a) => {
                if self.requires(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&v, &x)| if x > 0.0 { v } else { 0.0 })
                        .collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Sqrt(a) => {
                if self.requires(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[idx].data)
                        .map(|(&v, &y)| v * 0.5 / y)
                        .collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Recip(a) => {
                if self.requires(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[idx].data)
                        .map(|(&v, &y)| -v * y * y)
                        .collect();
                    self.add_grad(a, &da);
                }
            }
            Op::SumAll(a) => {
                if self.requires(a) {
                    let da = vec![g[0]; self.nodes[a.0].numel()];
                    self.add_grad(a, &da);
                }
            }
            Op::SumRows(a) => {
                if self.requires(a) {
                    let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[i];
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::SumCols(a) => {
                if self.requires(a) {
                    let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j];
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::AddRow(a, b) => {
                if self.requires(a) {
                    self.add_grad(a, g);
                }
                if self.requires(b) {
                    let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::ScaleRows(a, s) => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                if self.requires(a) {
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let f = self.nodes[s.0].data[i];
                        for j in 0..n {
                            da[i * n + j] = g[i * n + j] * f;
                        }
                    }
                    self.add_grad(a, &da);
                }
                if self.requires(s) {
                    let mut ds = vec![0.0; m];
                    for i in 0..m {
                        for j in 0..n {
                            ds[i] += g[i * n + j] * self.nodes[a.0].data[i * n + j];
                        }
                    }
                    self.add_grad(s, &ds);
                }
            }
            Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                if self.requires(a) {
                    let (rows, cols) = (self.nodes[idx].rows(), self.nodes[idx].cols());
                    let y = &self.nodes[idx].data;
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let dot: f64 = (0..cols).map(|j| g[r * cols + j] * y[r * cols + j]).sum();
                        for j in 0..cols {
                            da[r * cols + j] = y[r * cols + j] * (g[r * cols + j] - dot);
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::SoftmaxAll(a) => {
                if self.requires(a) {
                    let y = &self.nodes[idx].data;
                    let dot: f64 = g.iter().zip(y).map(|(&v, &yy)| v * yy).sum();
                    let da: Vec<f64> = g.iter().zip(y).map(|(&v, &yy)| yy * (v - dot)).collect();
                    self.add_grad(a, &da);
                }
            }
            Op::MeanRows(a, valid) => {
                if self.requires(a) {
                    let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let count = valid.iter().filter(|&&b| b).count() as f64;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        if valid[i] {
                            for j in 0..n {
                                da[i * n + j] = g[j] / count;
                            }
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::GatherRows(a, ids) => {
                if self.requires(a) {
                    let n = self.nodes[a.0].shape[1];
                    let mut da = vec![0.0; self.nodes[a.0].numel()];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..n {
                            da[i * n + j] += g[r * n + j];
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[idx].rows();
                let total = self.nodes[idx].cols();
                let mut offset = 0;
                for &p in &parts {
                    let c = self.nodes[p.0].cols();
                    if self.requires(p) {
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        self.add_grad(p, &dp);
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, from, to) => {
                if self.requires(a) {
                    let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let w = to - from;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..w {
                            da[i * n + from + j] = g[i * w + j];
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::Reshape(a) => {
                if self.requires(a) {
                    self.add_grad(a, g);
                }
            }
            Op::Dropout(a, mask) => {
                if self.requires(a) {
                    let da: Vec<f64> = g.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                    self.add_grad(a, &da);
                }
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = (self.nodes[idx].rows(), self.nodes[idx].cols());
                if self.requires(gain) {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            dg[j] += g[r * cols + j] * normalized[r * cols + j];
                        }
                    }
                    self.add_grad(gain, &dg);
                }
                if self.requires(bias) {
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            db[j] += g[r * cols + j];
                        }
                    }
                    self.add_grad(bias, &db);
                }
                if self.requires(x) {
                    let gain_data = self.nodes[gain.0].data.clone();
                    let mut dx = vec![0.0; rows * cols];
                    let nf = cols as f64;
                    for r in 0..rows {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..cols {
                            let dxh = g[r * cols + j] * gain_data[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * normalized[r * cols + j];
                        }
                        for j in 0..cols {
                            let dxh = g[r * cols + j] * gain_data[j];
                            dx[r * cols + j] = inv_std[r]
                                * (dxh - sum_dxhat / nf
                                    - normalized[r * cols + j] * sum_dxhat_xhat / nf);
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::BceWithLogitsMean(logits, targets) => {
                if self.requires(logits) {
                    let n = targets.len() as f64;
                    let da: Vec<f64> = self.nodes[logits.0]
                        .data
                        .iter()
                        .zip(&targets)
                        .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n)
                        .collect();
                    self.add_grad(logits, &da);
                }
            }
        }
    }

    /// Fold the gradients of every bound parameter leaf into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParameterStore) -> Result<()> {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(idx) } = &node.op {
                if let Some(g) = &node.grad {
                    store.accumulate_grad(&self.bound_params[*idx], g)?;
                }
            }
        }
        Ok(())
    }

    /// Gradients of bound parameters as (name, grad) pairs, for callers
    /// that reduce across examples before touching the store.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Leaf { param: Some(idx) } = &node.op {
                if let Some(g) = &node.grad {
                    out.push((self.bound_params[*idx].clone(), g.clone()));
                }
            }
        }
        out
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn require_2d(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if shape.len() == 2 {
        Ok((shape[0], shape[1]))
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - mx).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

/// C[m,n] = A[m,k] * B[k,n]
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] * B[k,n]^T
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    c
}

/// C[k,n] = A[m,k]^T * B[m,n]
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}
