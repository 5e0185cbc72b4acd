//! Flat-buffer tensors on a reverse-mode gradient tape.
//!
//! A [`Tape`] owns every tensor created on it; handles are plain indices
//! into the tape's arena. Forward ops append a record, and [`Tape::backward`]
//! replays the records in reverse. Recording order is construction order, so
//! the tape is topologically sorted by construction and each op is visited
//! exactly once on the way back.
//!
//! Tapes are never shared across threads. Concurrent forward passes each
//! build their own tape over the same (read-only) weight data.
//!
//! Numerics: storage is f32. Every op computes in f64 from its inputs and
//! rounds once on store, so stored values carry a single rounding per op
//! and reruns are bit-identical. A tape built with [`Tape::probe`] also
//! keeps the unrounded f64 value of every tensor; finite-difference
//! checks read losses through that shadow, which keeps the difference
//! quotient free of f32 storage noise while the gradients being checked
//! remain the production f32 ones.

use crate::error::{Error, Result};

/// Handle to a tensor on a specific tape. Only meaningful on the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// One node in the tape arena. `data` is row-major; `grad` is populated by
/// `backward` for every `requires_grad` node reachable from the loss.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Layer-norm statistics cached at forward time for the backward pass.
#[derive(Debug)]
struct LnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Add {
        a: usize,
        b: usize,
        out: usize,
    },
    Sub {
        a: usize,
        b: usize,
        out: usize,
    },
    AddN {
        inputs: Vec<usize>,
        out: usize,
    },
    /// `[rows x cols] + [cols]`, bias broadcast over rows.
    AddRow {
        x: usize,
        bias: usize,
        out: usize,
        rows: usize,
        cols: usize,
    },
    Scale {
        x: usize,
        c: f32,
        out: usize,
    },
    Matmul {
        a: usize,
        b: usize,
        out: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: usize,
        out: usize,
        rows: usize,
        cols: usize,
    },
    SliceRows {
        x: usize,
        out: usize,
        cols: usize,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: usize,
        out: usize,
        rows: usize,
        cols: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<(usize, usize)>,
        out: usize,
        rows: usize,
    },
    SoftmaxRows {
        x: usize,
        out: usize,
        rows: usize,
        cols: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        out: usize,
        rows: usize,
        cols: usize,
        cache: LnCache,
    },
    Gelu {
        x: usize,
        out: usize,
    },
    Mean {
        x: usize,
        out: usize,
    },
    Sum {
        x: usize,
        out: usize,
    },
    Mse {
        a: usize,
        b: usize,
        out: usize,
    },
    /// Soft cross-entropy against a fixed probability target (not a node):
    /// `-(1/rows) * sum_ij target[i,j] * log softmax(logits)[i,j]`.
    SoftCrossEntropy {
        logits: usize,
        out: usize,
        target: Vec<f32>,
        softmax: Vec<f32>,
        rows: usize,
        cols: usize,
    },
    EmbeddingLookup {
        table: usize,
        out: usize,
        ids: Vec<usize>,
        dim: usize,
    },
    /// Forward value was substituted by the caller; backward is identity.
    StraightThrough {
        x: usize,
        out: usize,
    },
}

impl Op {
    fn out(&self) -> usize {
        match *self {
            Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::AddN { out, .. }
            | Op::AddRow { out, .. }
            | Op::Scale { out, .. }
            | Op::Matmul { out, .. }
            | Op::Transpose { out, .. }
            | Op::SliceRows { out, .. }
            | Op::SliceCols { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::SoftmaxRows { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::Gelu { out, .. }
            | Op::Mean { out, .. }
            | Op::Sum { out, .. }
            | Op::Mse { out, .. }
            | Op::SoftCrossEntropy { out, .. }
            | Op::EmbeddingLookup { out, .. }
            | Op::StraightThrough { out, .. } => out,
        }
    }
}

/// Gradient tape plus tensor arena.
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    /// Full f64 value per node on probe tapes, `None` otherwise.
    shadow: Vec<Option<Vec<f64>>>,
    /// Pre-rounding f64 value for scalar nodes (reductions and scalar
    /// arithmetic) on every tape, so loss totals read accurately even
    /// without a full shadow.
    exact: Vec<Option<f64>>,
    grad_enabled: bool,
    precise: bool,
    ran_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            shadow: Vec::new(),
            exact: Vec::new(),
            grad_enabled: true,
            precise: false,
            ran_backward: false,
        }
    }

    /// A tape that records nothing. Ops compute identical values but
    /// `backward` is unavailable; use for inference and teacher capture.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    /// A no-grad tape that additionally carries the unrounded f64 value of
    /// every tensor, for finite-difference probes. Stored f32 data still
    /// exists but may differ from a normal tape's by the ulps a normal
    /// tape loses to per-op rounding; callers read [`Tape::scalar_f64`].
    pub fn probe() -> Self {
        Tape {
            grad_enabled: false,
            precise: true,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// f64 view of a node: shadow on probe tapes, cast of f32 data otherwise.
    fn in64(&self, id: usize) -> Vec<f64> {
        match &self.shadow[id] {
            Some(s) => s.clone(),
            None => self.nodes[id].data.iter().map(|v| *v as f64).collect(),
        }
    }

    fn push_out(&mut self, shape: Vec<usize>, out64: Vec<f64>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(numel_of(&shape), out64.len());
        let data: Vec<f32> = out64.iter().map(|v| *v as f32).collect();
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
        });
        self.shadow.push(if self.precise { Some(out64) } else { None });
        self.exact.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, v: f64, requires_grad: bool) -> TensorId {
        let out = self.push_out(vec![], vec![v], requires_grad);
        self.exact[out.0] = Some(v);
        out
    }

    /// Best available f64 value of a single-element node.
    fn exact_of(&self, id: usize) -> f64 {
        if let Some(v) = self.exact[id] {
            return v;
        }
        if let Some(s) = &self.shadow[id] {
            return s.first().copied().unwrap_or(0.0);
        }
        self.nodes[id].data.first().copied().unwrap_or(0.0) as f64
    }

    /// Records the exact scalar when a newly pushed node is rank 0.
    fn shadow_scalar(&mut self, out: TensorId, v: f64) {
        if self.nodes[out.0].numel() == 1 {
            self.exact[out.0] = Some(v);
        }
    }

    fn record(&mut self, op: Op) {
        // Ops whose output cannot need a gradient are not recorded; the
        // backward replay therefore touches exactly the grad-relevant
        // subgraph and constants (teacher signals) are never visited.
        if self.nodes[op.out()].requires_grad {
            self.ops.push(op);
        }
    }

    fn check_finite(data: &[f32], what: &str) -> Result<()> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { what: what.into() });
        }
        Ok(())
    }

    /// Tensor with no gradient tracking, e.g. inputs and teacher signals.
    pub fn constant(&mut self, data: Vec<f32>, shape: Vec<usize>) -> Result<TensorId> {
        if numel_of(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                detail: format!(
                    "shape {:?} wants {} values, got {}",
                    shape,
                    numel_of(&shape),
                    data.len()
                ),
            });
        }
        Self::check_finite(&data, "constant")?;
        let out64 = data.iter().map(|v| *v as f64).collect();
        Ok(self.push_out(shape, out64, false))
    }

    pub fn scalar_const(&mut self, v: f32) -> Result<TensorId> {
        self.constant(vec![v], vec![])
    }

    /// Leaf with gradient tracking. Data is copied onto the tape; the caller
    /// keeps ownership of the master copy.
    pub fn param(&mut self, data: &[f32], shape: Vec<usize>) -> Result<TensorId> {
        if numel_of(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "param",
                detail: format!(
                    "shape {:?} wants {} values, got {}",
                    shape,
                    numel_of(&shape),
                    data.len()
                ),
            });
        }
        Self::check_finite(data, "param")?;
        let out64 = data.iter().map(|v| *v as f64).collect();
        Ok(self.push_out(shape, out64, true))
    }

    pub fn data(&self, t: TensorId) -> &[f32] {
        &self.nodes[t.0].data
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn grad(&self, t: TensorId) -> Option<&[f32]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn tensor(&self, t: TensorId) -> &Tensor {
        &self.nodes[t.0]
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, t: TensorId) -> f32 {
        debug_assert_eq!(self.nodes[t.0].numel(), 1);
        self.nodes[t.0].data[0]
    }

    /// Value of a single-element tensor at the precision the tape carries:
    /// the full f64 chain on probe tapes, the pre-rounding reduction total
    /// on normal tapes. Finite-difference quotients read losses through
    /// this so they are not drowned by f32 rounding of the total.
    pub fn scalar_f64(&self, t: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[t.0].numel(), 1);
        self.exact_of(t.0)
    }

    fn want_2d(&self, t: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[t.0].shape;
        if s.len() == 2 {
            Ok((s[0], s[1]))
        } else {
            Err(Error::ShapeMismatch {
                op,
                detail: format!("expected rank-2 tensor, got shape {:?}", s),
            })
        }
    }

    fn want_same_shape(&self, a: TensorId, b: TensorId, op: &'static str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!(
                    "shapes {:?} and {:?} differ",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            });
        }
        Ok(())
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|t| self.nodes[t.0].requires_grad)
    }

    // ── elementwise and linear ops ──────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.want_same_shape(a, b, "add")?;
        let out64: Vec<f64> = {
            let av = self.in64(a.0);
            let bv = self.in64(b.0);
            av.iter().zip(&bv).map(|(x, y)| x + y).collect()
        };
        let rg = self.needs_grad(&[a, b]);
        let out = self.push_out(self.nodes[a.0].shape.clone(), out64, rg);
        self.shadow_scalar(out, self.exact_of(a.0) + self.exact_of(b.0));
        self.record(Op::Add { a: a.0, b: b.0, out: out.0 });
        Ok(out)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.want_same_shape(a, b, "sub")?;
        let out64: Vec<f64> = {
            let av = self.in64(a.0);
            let bv = self.in64(b.0);
            av.iter().zip(&bv).map(|(x, y)| x - y).collect()
        };
        let rg = self.needs_grad(&[a, b]);
        let out = self.push_out(self.nodes[a.0].shape.clone(), out64, rg);
        self.shadow_scalar(out, self.exact_of(a.0) - self.exact_of(b.0));
        self.record(Op::Sub { a: a.0, b: b.0, out: out.0 });
        Ok(out)
    }

    /// Elementwise sum of any number of same-shaped tensors.
    pub fn add_n(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        let first = *inputs.first().ok_or_else(|| Error::ShapeMismatch {
            op: "add_n",
            detail: "empty input list".into(),
        })?;
        for t in &inputs[1..] {
            self.want_same_shape(first, *t, "add_n")?;
        }
        let n = self.nodes[first.0].numel();
        let mut out64 = vec![0.0f64; n];
        for t in inputs {
            let tv = self.in64(t.0);
            for (acc, v) in out64.iter_mut().zip(&tv) {
                *acc += v;
            }
        }
        let rg = self.needs_grad(inputs);
        let out = self.push_out(self.nodes[first.0].shape.clone(), out64, rg);
        self.shadow_scalar(out, inputs.iter().map(|t| self.exact_of(t.0)).sum());
        self.record(Op::AddN {
            inputs: inputs.iter().map(|t| t.0).collect(),
            out: out.0,
        });
        Ok(out)
    }

    /// `[rows x cols] + [cols]`: bias row broadcast.
    pub fn add_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.want_2d(x, "add_row")?;
        if self.nodes[bias.0].shape != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                detail: format!(
                    "bias shape {:?} does not match row width {}",
                    self.nodes[bias.0].shape, cols
                ),
            });
        }
        let out64: Vec<f64> = {
            let xv = self.in64(x.0);
            let bv = self.in64(bias.0);
            (0..rows * cols).map(|i| xv[i] + bv[i % cols]).collect()
        };
        let rg = self.needs_grad(&[x, bias]);
        let out = self.push_out(vec![rows, cols], out64, rg);
        self.record(Op::AddRow { x: x.0, bias: bias.0, out: out.0, rows, cols });
        Ok(out)
    }

    pub fn scale(&mut self, x: TensorId, c: f32) -> Result<TensorId> {
        let out64: Vec<f64> = self.in64(x.0).iter().map(|v| v * c as f64).collect();
        let rg = self.needs_grad(&[x]);
        let out = self.push_out(self.nodes[x.0].shape.clone(), out64, rg);
        self.shadow_scalar(out, self.exact_of(x.0) * c as f64);
        self.record(Op::Scale { x: x.0, c, out: out.0 });
        Ok(out)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.want_2d(a, "matmul")?;
        let (k2, n) = self.want_2d(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {} and {} differ", k, k2),
            });
        }
        let out64: Vec<f64> = {
            let av = self.in64(a.0);
            let bv = self.in64(b.0);
            let mut out = vec![0.0f64; m * n];
            for i in 0..m {
                let acc = &mut out[i * n..(i + 1) * n];
                for kk in 0..k {
                    let aik = av[i * k + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    let b_row = &bv[kk * n..(kk + 1) * n];
                    for (o, bv_) in acc.iter_mut().zip(b_row) {
                        *o += aik * bv_;
                    }
                }
            }
            out
        };
        let rg = self.needs_grad(&[a, b]);
        let out = self.push_out(vec![m, n], out64, rg);
        self.record(Op::Matmul { a: a.0, b: b.0, out: out.0, m, k, n });
        Ok(out)
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.want_2d(x, "transpose")?;
        let out64: Vec<f64> = {
            let xv = self.in64(x.0);
            let mut out = vec![0.0f64; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = xv[r * cols + c];
                }
            }
            out
        };
        let rg = self.needs_grad(&[x]);
        let out = self.push_out(vec![cols, rows], out64, rg);
        self.record(Op::Transpose { x: x.0, out: out.0, rows, cols });
        Ok(out)
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = self.want_2d(x, "slice_rows")?;
        if start + len > rows {
            return Err(Error::IndexOutOfRange {
                what: "row slice",
                index: start + len,
                bound: rows,
            });
        }
        let out64 = self.in64(x.0)[start * cols..(start + len) * cols].to_vec();
        let rg = self.needs_grad(&[x]);
        let out = self.push_out(vec![len, cols], out64, rg);
        self.record(Op::SliceRows { x: x.0, out: out.0, cols, start, len });
        Ok(out)
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = self.want_2d(x, "slice_cols")?;
        if start + len > cols {
            return Err(Error::IndexOutOfRange {
                what: "column slice",
                index: start + len,
                bound: cols,
            });
        }
        let out64: Vec<f64> = {
            let xv = self.in64(x.0);
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                let base = r * cols + start;
                out.extend_from_slice(&xv[base..base + len]);
            }
            out
        };
        let rg = self.needs_grad(&[x]);
        let out = self.push_out(vec![rows, len], out64, rg);
        self.record(Op::SliceCols { x: x.0, out: out.0, rows, cols, start, len });
        Ok(out)
    }

    /// Concatenate along the last dimension: `[r x c_i]` parts into `[r x sum c_i]`.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                detail: "empty part list".into(),
            });
        }
        let (rows, _) = self.want_2d(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            let (r, c) = self.want_2d(*p, "concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {} and {} differ", rows, r),
                });
            }
            widths.push(c);
            total += c;
        }
        let out64: Vec<f64> = {
            let views: Vec<Vec<f64>> = parts.iter().map(|p| self.in64(p.0)).collect();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (pv, w) in views.iter().zip(&widths) {
                    out.extend_from_slice(&pv[r * w..(r + 1) * w]);
                }
            }
            out
        };
        let rg = self.needs_grad(parts);
        let out = self.push_out(vec![rows, total], out64, rg);
        self.record(Op::ConcatCols {
            parts: parts.iter().zip(widths).map(|(p, w)| (p.0, w)).collect(),
            out: out.0,
            rows,
        });
        Ok(out)
    }

    // ── nonlinearities ──────────────────────────────────────────────────

    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.want_2d(x, "softmax_rows")?;
        let out64: Vec<f64> = {
            let xv = self.in64(x.0);
            let mut out = vec![0.0f64; rows * cols];
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0f64;
                for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                    *o = (v - max).exp();
                    denom += *o;
                }
                for o in out[r * cols..(r + 1) * cols].iter_mut() {
                    *o /= denom;
                }
            }
            out
        };
        let rg = self.needs_grad(&[x]);
        let out = self.push_out(vec![rows, cols], out64, rg);
        self.record(Op::SoftmaxRows { x: x.0, out: out.0, rows, cols });
        Ok(out)
    }

    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f32,
    ) -> Result<TensorId> {
        let (rows, cols) = self.want_2d(x, "layer_norm")?;
        if self.nodes[gamma.0].shape != [cols] || self.nodes[beta.0].shape != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} do not match width {}",
                    self.nodes[gamma.0].shape, self.nodes[beta.0].shape, cols
                ),
            });
        }
        let mut xhat = vec![0.0f32; rows * cols];
        let mut inv_std = vec![0.0f32; rows];
        let out64: Vec<f64> = {
            let xv = self.in64(x.0);
            let gv = self.in64(gamma.0);
            let bv = self.in64(beta.0);
            let mut out = vec![0.0f64; rows * cols];
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let istd = 1.0 / (var + eps as f64).sqrt();
                inv_std[r] = istd as f32;
                for c in 0..cols {
                    let xh = (row[c] - mean) * istd;
                    xhat[r * cols + c] = xh as f32;
                    out[r * cols + c] = gv[c] * xh + bv[c];
                }
            }
            out
        };
        let rg = self.needs_grad(&[x, gamma, beta]);
        let out = self.push_out(vec![rows, cols], out64, rg);
        self.record(Op::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            out: out.0,
            rows,
            cols,
            cache: LnCache { xhat, inv_std },
        });
        Ok(out)
    }

    /// Exact Gaussian-CDF GeLU, `x * Phi(x)` with `Phi` in erf form.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let out64: Vec<f64> = self
            .in64(x.0)
            .iter()
            .map(|&v| v * 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
            .collect();
        let rg = self.needs_grad(&[x]);
        let out = self.push_out(self.nodes[x.0].shape.clone(), out64, rg);
        self.record(Op::Gelu { x: x.0, out: out.0 });
        Ok(out)
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.nodes[x.0].numel().max(1);
        let total: f64 = self.in64(x.0).iter().sum::<f64>() / n as f64;
        let rg = self.needs_grad(&[x]);
        let out = self.push_scalar(total, rg);
        self.record(Op::Mean { x: x.0, out: out.0 });
        Ok(out)
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let total: f64 = self.in64(x.0).iter().sum();
        let rg = self.needs_grad(&[x]);
        let out = self.push_scalar(total, rg);
        self.record(Op::Sum { x: x.0, out: out.0 });
        Ok(out)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.want_same_shape(a, b, "mse")?;
        let n = self.nodes[a.0].numel().max(1);
        let total: f64 = {
            let av = self.in64(a.0);
            let bv = self.in64(b.0);
            av.iter()
                .zip(&bv)
                .map(|(x, y)| {
                    let d = x - y;
                    d * d
                })
                .sum::<f64>()
                / n as f64
        };
        let rg = self.needs_grad(&[a, b]);
        let out = self.push_scalar(total, rg);
        self.record(Op::Mse { a: a.0, b: b.0, out: out.0 });
        Ok(out)
    }

    /// `-(1/rows) * sum_ij target[i,j] * log softmax(logits)[i,j]` with a
    /// fixed probability target. Rows of `target` must each sum to 1; the
    /// target is data, not a node, so nothing flows back into it.
    pub fn soft_cross_entropy(&mut self, logits: TensorId, target: &[f32]) -> Result<TensorId> {
        let (rows, cols) = self.want_2d(logits, "soft_cross_entropy")?;
        if target.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "soft_cross_entropy",
                detail: format!(
                    "target has {} values, logits want {}",
                    target.len(),
                    rows * cols
                ),
            });
        }
        let mut softmax = vec![0.0f32; rows * cols];
        let total: f64 = {
            let xv = self.in64(logits.0);
            let mut total = 0.0f64;
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0f64;
                for v in row {
                    denom += (v - max).exp();
                }
                let log_denom = denom.ln();
                for c in 0..cols {
                    let log_sm = row[c] - max - log_denom;
                    softmax[r * cols + c] = log_sm.exp() as f32;
                    total -= target[r * cols + c] as f64 * log_sm;
                }
            }
            total / rows as f64
        };
        let rg = self.needs_grad(&[logits]);
        let out = self.push_scalar(total, rg);
        self.record(Op::SoftCrossEntropy {
            logits: logits.0,
            out: out.0,
            target: target.to_vec(),
            softmax,
            rows,
            cols,
        });
        Ok(out)
    }

    // ── structured ops ──────────────────────────────────────────────────

    /// Gather rows of `table` (`[vocab x dim]`) by token id.
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId> {
        let (vocab, dim) = self.want_2d(table, "embedding_lookup")?;
        let mut idx = Vec::with_capacity(ids.len());
        for &id in ids {
            let i = id as usize;
            if i >= vocab {
                return Err(Error::IndexOutOfRange { what: "token id", index: i, bound: vocab });
            }
            idx.push(i);
        }
        let out64: Vec<f64> = {
            let tv = self.in64(table.0);
            let mut out = Vec::with_capacity(ids.len() * dim);
            for &i in &idx {
                out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
            }
            out
        };
        let rg = self.needs_grad(&[table]);
        let out = self.push_out(vec![ids.len(), dim], out64, rg);
        self.record(Op::EmbeddingLookup { table: table.0, out: out.0, ids: idx, dim });
        Ok(out)
    }

    /// Replace the forward value of `x` with `values` while passing the
    /// gradient through unchanged. This is the straight-through estimator;
    /// the caller computes `values` (e.g. a ternary reconstruction).
    pub fn straight_through(&mut self, x: TensorId, values: Vec<f32>) -> Result<TensorId> {
        if values.len() != self.nodes[x.0].numel() {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                detail: format!(
                    "substituted value count {} does not match {}",
                    values.len(),
                    self.nodes[x.0].numel()
                ),
            });
        }
        Self::check_finite(&values, "straight_through")?;
        let out64 = values.iter().map(|v| *v as f64).collect();
        let rg = self.needs_grad(&[x]);
        let out = self.push_out(self.nodes[x.0].shape.clone(), out64, rg);
        self.record(Op::StraightThrough { x: x.0, out: out.0 });
        Ok(out)
    }

    /// Split `[n x d]` into H `[n x d/H]` head views.
    pub fn split_heads(&mut self, x: TensorId, heads: usize) -> Result<Vec<TensorId>> {
        let (_, d) = self.want_2d(x, "split_heads")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "split_heads",
                detail: format!("width {} not divisible into {} heads", d, heads),
            });
        }
        let dh = d / heads;
        (0..heads).map(|h| self.slice_cols(x, h * dh, dh)).collect()
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        self.concat_cols(parts)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` node reachable from `loss`; unreachable parameters
    /// get a zero gradient so optimizer code can stay uniform.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::GradDisabled);
        }
        if self.ran_backward {
            return Err(Error::DoubleBackward);
        }
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            });
        }
        self.ran_backward = true;

        let mut adj: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        macro_rules! grad_buf {
            ($adj:expr, $self:expr, $id:expr) => {
                $adj[$id].get_or_insert_with(|| vec![0.0f32; $self.nodes[$id].numel()])
            };
        }

        for op in self.ops.iter().rev() {
            let out_id = op.out();
            let d_out = match adj[out_id].take() {
                Some(d) => d,
                None => continue,
            };
            match op {
                Op::Add { a, b, out: _ } => {
                    for id in [*a, *b] {
                        if self.nodes[id].requires_grad {
                            let g = grad_buf!(adj, self, id);
                            for (gi, di) in g.iter_mut().zip(&d_out) {
                                *gi += di;
                            }
                        }
                    }
                }
                Op::Sub { a, b, out: _ } => {
                    if self.nodes[*a].requires_grad {
                        let g = grad_buf!(adj, self, *a);
                        for (gi, di) in g.iter_mut().zip(&d_out) {
                            *gi += di;
                        }
                    }
                    if self.nodes[*b].requires_grad {
                        let g = grad_buf!(adj, self, *b);
                        for (gi, di) in g.iter_mut().zip(&d_out) {
                            *gi -= di;
                        }
                    }
                }
                Op::AddN { inputs, out: _ } => {
                    for id in inputs {
                        if self.nodes[*id].requires_grad {
                            let g = grad_buf!(adj, self, *id);
                            for (gi, di) in g.iter_mut().zip(&d_out) {
                                *gi += di;
                            }
                        }
                    }
                }
                Op::AddRow { x, bias, out: _, rows, cols } => {
                    if self.nodes[*x].requires_grad {
                        let g = grad_buf!(adj, self, *x);
                        for (gi, di) in g.iter_mut().zip(&d_out) {
                            *gi += di;
                        }
                    }
                    if self.nodes[*bias].requires_grad {
                        let g = grad_buf!(adj, self, *bias);
                        for r in 0..*rows {
                            for c in 0..*cols {
                                g[c] += d_out[r * cols + c];
                            }
                        }
                    }
                }
                Op::Scale { x, c, out: _ } => {
                    if self.nodes[*x].requires_grad {
                        let g = grad_buf!(adj, self, *x);
                        for (gi, di) in g.iter_mut().zip(&d_out) {
                            *gi += c * di;
                        }
                    }
                }
                Op::Matmul { a, b, out: _, m, k, n } => {
                    // dA = g . B^T, dB = A^T . g; inner sums in f64, one
                    // rounding per accumulated element.
                    if self.nodes[*a].requires_grad {
                        let bv = &self.nodes[*b].data;
                        let g = grad_buf!(adj, self, *a);
                        let mut acc = vec![0.0f64; *k];
                        for i in 0..*m {
                            acc.iter_mut().for_each(|v| *v = 0.0);
                            for j in 0..*n {
                                let d = d_out[i * n + j] as f64;
                                if d == 0.0 {
                                    continue;
                                }
                                for (kk, av) in acc.iter_mut().enumerate() {
                                    *av += d * bv[kk * n + j] as f64;
                                }
                            }
                            for (ga, v) in g[i * k..(i + 1) * k].iter_mut().zip(&acc) {
                                *ga += *v as f32;
                            }
                        }
                    }
                    if self.nodes[*b].requires_grad {
                        let av = &self.nodes[*a].data;
                        let g = grad_buf!(adj, self, *b);
                        let mut acc = vec![0.0f64; *n];
                        for kk in 0..*k {
                            acc.iter_mut().for_each(|v| *v = 0.0);
                            for i in 0..*m {
                                let a_ik = av[i * k + kk] as f64;
                                if a_ik == 0.0 {
                                    continue;
                                }
                                let drow = &d_out[i * n..(i + 1) * n];
                                for (aj, dj) in acc.iter_mut().zip(drow) {
                                    *aj += a_ik * *dj as f64;
                                }
                            }
                            for (gb, v) in g[kk * n..(kk + 1) * n].iter_mut().zip(&acc) {
                                *gb += *v as f32;
                            }
                        }
                    }
                }
                Op::Transpose { x, out: _, rows, cols } => {
                    if self.nodes[*x].requires_grad {
                        let g = grad_buf!(adj, self, *x);
                        for r in 0..*rows {
                            for c in 0..*cols {
                                g[r * cols + c] += d_out[c * rows + r];
                            }
                        }
                    }
                }
                Op::SliceRows { x, out: _, cols, start, len } => {
                    if self.nodes[*x].requires_grad {
                        let g = grad_buf!(adj, self, *x);
                        for r in 0..*len {
                            for c in 0..*cols {
                                g[(start + r) * cols + c] += d_out[r * cols + c];
                            }
                        }
                    }
                }
                Op::SliceCols { x, out: _, rows, cols, start, len } => {
                    if self.nodes[*x].requires_grad {
                        let g = grad_buf!(adj, self, *x);
                        for r in 0..*rows {
                            for c in 0..*len {
                                g[r * cols + start + c] += d_out[r * len + c];
                            }
                        }
                    }
                }
                Op::ConcatCols { parts, out: _, rows } => {
                    let total: usize = parts.iter().map(|(_, w)| w).sum();
                    let mut offset = 0usize;
                    for (id, w) in parts {
                        if self.nodes[*id].requires_grad {
                            let g = grad_buf!(adj, self, *id);
                            for r in 0..*rows {
                                for c in 0..*w {
                                    g[r * w + c] += d_out[r * total + offset + c];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::SoftmaxRows { x, out, rows, cols } => {
                    if self.nodes[*x].requires_grad {
                        let y = &self.nodes[*out].data;
                        let g = grad_buf!(adj, self, *x);
                        for r in 0..*rows {
                            let y_row = &y[r * cols..(r + 1) * cols];
                            let d_row = &d_out[r * cols..(r + 1) * cols];
                            let dot: f64 = y_row
                                .iter()
                                .zip(d_row)
                                .map(|(yv, dv)| *yv as f64 * *dv as f64)
                                .sum();
                            let g_row = &mut g[r * cols..(r + 1) * cols];
                            for c in 0..*cols {
                                g_row[c] += (y_row[c] as f64 * (d_row[c] as f64 - dot)) as f32;
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, out: _, rows, cols, cache } => {
                    let d = *cols as f64;
                    if self.nodes[*gamma].requires_grad {
                        let g = grad_buf!(adj, self, *gamma);
                        for r in 0..*rows {
                            for c in 0..*cols {
                                g[c] += d_out[r * cols + c] * cache.xhat[r * cols + c];
                            }
                        }
                    }
                    if self.nodes[*beta].requires_grad {
                        let g = grad_buf!(adj, self, *beta);
                        for r in 0..*rows {
                            for c in 0..*cols {
                                g[c] += d_out[r * cols + c];
                            }
                        }
                    }
                    if self.nodes[*x].requires_grad {
                        let gamma_v = &self.nodes[*gamma].data;
                        let g = grad_buf!(adj, self, *x);
                        for r in 0..*rows {
                            let base = r * cols;
                            let mut sum_dxhat = 0.0f64;
                            let mut sum_dxhat_xhat = 0.0f64;
                            for c in 0..*cols {
                                let dxh = (d_out[base + c] * gamma_v[c]) as f64;
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * cache.xhat[base + c] as f64;
                            }
                            let istd = cache.inv_std[r] as f64;
                            for c in 0..*cols {
                                let dxh = (d_out[base + c] * gamma_v[c]) as f64;
                                let xh = cache.xhat[base + c] as f64;
                                g[base + c] +=
                                    (istd * (dxh - sum_dxhat / d - xh * sum_dxhat_xhat / d)) as f32;
                            }
                        }
                    }
                }
                Op::Gelu { x, out: _ } => {
                    if self.nodes[*x].requires_grad {
                        let xv = &self.nodes[*x].data;
                        let g = grad_buf!(adj, self, *x);
                        for (i, &v) in xv.iter().enumerate() {
                            let xf = v as f64;
                            let phi_cdf = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
                            let phi_pdf =
                                (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
                            g[i] += ((phi_cdf + xf * phi_pdf) * d_out[i] as f64) as f32;
                        }
                    }
                }
                Op::Mean { x, out: _ } => {
                    if self.nodes[*x].requires_grad {
                        let n = self.nodes[*x].numel().max(1) as f32;
                        let d = d_out[0] / n;
                        let g = grad_buf!(adj, self, *x);
                        for gi in g.iter_mut() {
                            *gi += d;
                        }
                    }
                }
                Op::Sum { x, out: _ } => {
                    if self.nodes[*x].requires_grad {
                        let d = d_out[0];
                        let g = grad_buf!(adj, self, *x);
                        for gi in g.iter_mut() {
                            *gi += d;
                        }
                    }
                }
                Op::Mse { a, b, out: _ } => {
                    let n = self.nodes[*a].numel().max(1) as f32;
                    let c = 2.0 * d_out[0] / n;
                    for (id, sign) in [(*a, 1.0f32), (*b, -1.0)] {
                        if self.nodes[id].requires_grad {
                            let diffs: Vec<f32> = self.nodes[*a]
                                .data
                                .iter()
                                .zip(&self.nodes[*b].data)
                                .map(|(x, y)| x - y)
                                .collect();
                            let g = grad_buf!(adj, self, id);
                            for (gi, di) in g.iter_mut().zip(&diffs) {
                                *gi += sign * c * di;
                            }
                        }
                    }
                }
                Op::SoftCrossEntropy { logits, out: _, target, softmax, rows, cols } => {
                    if self.nodes[*logits].requires_grad {
                        let c = d_out[0] / *rows as f32;
                        let g = grad_buf!(adj, self, *logits);
                        for i in 0..rows * cols {
                            g[i] += c * (softmax[i] - target[i]);
                        }
                    }
                }
                Op::EmbeddingLookup { table, out: _, ids, dim } => {
                    if self.nodes[*table].requires_grad {
                        let g = grad_buf!(adj, self, *table);
                        for (row, &id) in ids.iter().enumerate() {
                            for c in 0..*dim {
                                g[id * dim + c] += d_out[row * dim + c];
                            }
                        }
                    }
                }
                Op::StraightThrough { x, out: _ } => {
                    if self.nodes[*x].requires_grad {
                        let g = grad_buf!(adj, self, *x);
                        for (gi, di) in g.iter_mut().zip(&d_out) {
                            *gi += di;
                        }
                    }
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad {
                node.grad = Some(match adj[i].take() {
                    Some(g) => g,
                    None => vec![0.0; node.numel()],
                });
            }
        }
        Ok(())
    }
}
