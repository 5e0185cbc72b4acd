//! Ternary weight quantization with a straight-through estimator.
//!
//! A weight matrix is collapsed to codes in {-1, 0, +1} plus a nonnegative
//! scale. Codes come from a magnitude threshold at 0.7 times the mean
//! absolute value; the scale is the mean magnitude over the surviving
//! entries, which is the least-squares optimal scale for those codes.
//! Quantization runs at forward time only: master weights stay full
//! precision and gradients pass through the substitution unchanged.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};
use serde::{Deserialize, Serialize};

/// Scale grouping for ternarization. Per-tensor is the default; per-row
/// gives each matrix row its own threshold and scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerTensor,
    PerRow,
}

/// Ternary representation of one weight tensor: codes plus one scale per
/// group (a single group for per-tensor, one per row for per-row). Codes
/// are grouped contiguously in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryWeight {
    pub codes: Vec<i8>,
    pub scales: Vec<f32>,
}

impl TernaryWeight {
    /// The sole scale of a per-tensor quantization.
    pub fn scale(&self) -> f32 {
        debug_assert_eq!(self.scales.len(), 1);
        self.scales[0]
    }

    /// Dense reconstruction `scale * codes`.
    pub fn reconstruct(&self) -> Vec<f32> {
        let group = self.codes.len() / self.scales.len();
        self.codes
            .iter()
            .enumerate()
            .map(|(i, &c)| self.scales[i / group] * c as f32)
            .collect()
    }
}

fn ternarize_group(w: &[f32]) -> (Vec<i8>, f32) {
    let n = w.len().max(1);
    let mean_abs: f64 = w.iter().map(|v| v.abs() as f64).sum::<f64>() / n as f64;
    let delta = 0.7 * mean_abs;
    let mut codes = Vec::with_capacity(w.len());
    let mut kept_sum = 0.0f64;
    let mut kept = 0usize;
    for &v in w {
        if (v.abs() as f64) > delta {
            codes.push(if v > 0.0 { 1 } else { -1 });
            kept_sum += v.abs() as f64;
            kept += 1;
        } else {
            codes.push(0);
        }
    }
    let scale = if kept == 0 { 0.0 } else { (kept_sum / kept as f64) as f32 };
    (codes, scale)
}

/// Ternarize with a single scale over the whole tensor.
pub fn ternarize(w: &[f32]) -> Result<TernaryWeight> {
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { what: "ternarize input".into() });
    }
    let (codes, scale) = ternarize_group(w);
    Ok(TernaryWeight { codes, scales: vec![scale] })
}

/// Ternarize a `[rows x cols]` matrix with one threshold and scale per row.
pub fn ternarize_rows(w: &[f32], rows: usize, cols: usize) -> Result<TernaryWeight> {
    if w.len() != rows * cols {
        return Err(Error::ShapeMismatch {
            op: "ternarize_rows",
            detail: format!("{} values do not fill {} x {}", w.len(), rows, cols),
        });
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { what: "ternarize input".into() });
    }
    let mut codes = Vec::with_capacity(w.len());
    let mut scales = Vec::with_capacity(rows);
    for r in 0..rows {
        let (c, s) = ternarize_group(&w[r * cols..(r + 1) * cols]);
        codes.extend(c);
        scales.push(s);
    }
    Ok(TernaryWeight { codes, scales })
}

/// Ternarize a tape tensor and substitute the reconstruction into the
/// forward pass, passing the gradient through to the master weight
/// unchanged. Rank-1 tensors are treated as a single row.
pub fn ste_forward(tape: &mut Tape, w: TensorId, granularity: Granularity) -> Result<TensorId> {
    let data = tape.data(w).to_vec();
    let shape = tape.shape(w).to_vec();
    let tw = match granularity {
        Granularity::PerTensor => ternarize(&data)?,
        Granularity::PerRow => {
            let (rows, cols) = match shape.as_slice() {
                [r, c] => (*r, *c),
                [n] => (1, *n),
                other => {
                    return Err(Error::ShapeMismatch {
                        op: "ste_forward",
                        detail: format!("per-row wants rank 1 or 2, got {:?}", other),
                    })
                }
            };
            ternarize_rows(&data, rows, cols)?
        }
    };
    tape.straight_through(w, tw.reconstruct())
}

/// Per-layer flags for the six quantizable matrices. Embeddings, biases,
/// norms, and the head stay full precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerQuant {
    pub w_q: bool,
    pub w_k: bool,
    pub w_v: bool,
    pub w_o: bool,
    pub w_1: bool,
    pub w_2: bool,
}

impl LayerQuant {
    pub const ALL: LayerQuant =
        LayerQuant { w_q: true, w_k: true, w_v: true, w_o: true, w_1: true, w_2: true };
    pub const NONE: LayerQuant =
        LayerQuant { w_q: false, w_k: false, w_v: false, w_o: false, w_1: false, w_2: false };
    /// FFN sub-layer only.
    pub const FFN: LayerQuant =
        LayerQuant { w_q: false, w_k: false, w_v: false, w_o: false, w_1: true, w_2: true };
    /// Value/output projections plus FFN.
    pub const PROP_FFN: LayerQuant =
        LayerQuant { w_q: false, w_k: false, w_v: true, w_o: true, w_1: true, w_2: true };

    pub fn any(&self) -> bool {
        self.w_q || self.w_k || self.w_v || self.w_o || self.w_1 || self.w_2
    }
}

/// Which matrices are quantized in each layer during forward.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub layers: Vec<LayerQuant>,
}

impl QuantPlan {
    pub fn uniform(num_layers: usize, layer: LayerQuant) -> Self {
        QuantPlan { layers: vec![layer; num_layers] }
    }

    pub fn all(num_layers: usize) -> Self {
        Self::uniform(num_layers, LayerQuant::ALL)
    }

    pub fn none(num_layers: usize) -> Self {
        Self::uniform(num_layers, LayerQuant::NONE)
    }

    pub fn ffn_only(num_layers: usize) -> Self {
        Self::uniform(num_layers, LayerQuant::FFN)
    }

    pub fn prop_ffn(num_layers: usize) -> Self {
        Self::uniform(num_layers, LayerQuant::PROP_FFN)
    }

    /// True when no matrix anywhere is quantized.
    pub fn is_noop(&self) -> bool {
        !self.layers.iter().any(|l| l.any())
    }

    pub fn check_layers(&self, num_layers: usize) -> Result<()> {
        if self.layers.len() != num_layers {
            return Err(Error::PlanMismatch {
                detail: format!(
                    "plan covers {} layers, model has {}",
                    self.layers.len(),
                    num_layers
                ),
            });
        }
        Ok(())
    }
}
