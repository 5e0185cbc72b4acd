//! Distillation losses between teacher and student traces.
//!
//! Three components: an internal loss over hidden states and attention
//! scores, a prediction loss over logits, and an attention-output loss
//! that only some schedules enable. Each exists twice: as a pure function
//! of detached traces (for reporting) and as a tape builder (for
//! training). The two are cross-checked in tests.
//!
//! Teacher values always enter the tape as constants, so no gradient can
//! reach teacher buffers from any of these losses.

use crate::error::{Error, Result};
use crate::model::{ModelTrace, TaskHead, TraceIds};
use crate::tensor::{Tape, TensorId};
use serde::{Deserialize, Serialize};

/// Reduction across attention heads for the score term: mean keeps the
/// per-layer term a per-element average; sum weights layers by head count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsReduction {
    #[default]
    Mean,
    Sum,
}

/// Weighting knobs for the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    /// Multiplier on the attention-output loss when it is active.
    pub lambda_out: f32,
    pub as_reduction: AsReduction,
}

impl Default for DistillWeights {
    fn default() -> Self {
        DistillWeights { lambda_out: 1.0, as_reduction: AsReduction::Mean }
    }
}

/// All loss components of one example, plus per-layer detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_trm: f32,
    pub l_pred: f32,
    pub l_output: f32,
    pub total: f32,
    /// Hidden-state terms: embedding output first, then each layer output.
    pub per_layer_x_mse: Vec<f32>,
    pub per_layer_as_mse: Vec<f32>,
    pub per_layer_ao_mse: Vec<f32>,
}

fn mse64(a: &[f32], b: &[f32], what: &'static str) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: what,
            detail: format!("lengths {} and {} differ", a.len(), b.len()),
        });
    }
    let n = a.len().max(1) as f64;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

fn check_same_depth(student: &ModelTrace, teacher: &ModelTrace, what: &'static str) -> Result<()> {
    if student.layers.len() != teacher.layers.len() {
        return Err(Error::ShapeMismatch {
            op: what,
            detail: format!(
                "student has {} layers, teacher {}",
                student.layers.len(),
                teacher.layers.len()
            ),
        });
    }
    Ok(())
}

/// Internal loss: mean-squared error on the embedding output, every layer
/// output, and the pre-softmax attention scores of every layer. Returns
/// the total plus the per-state and per-layer score terms.
pub fn loss_trm(
    student: &ModelTrace,
    teacher: &ModelTrace,
    reduction: AsReduction,
) -> Result<(f32, Vec<f32>, Vec<f32>)> {
    check_same_depth(student, teacher, "loss_trm")?;
    let mut x_terms = Vec::with_capacity(student.layers.len() + 1);
    x_terms.push(mse64(&student.x0, &teacher.x0, "loss_trm")? as f32);
    for (s, t) in student.layers.iter().zip(&teacher.layers) {
        x_terms.push(mse64(&s.x_out, &t.x_out, "loss_trm")? as f32);
    }
    let mut as_terms = Vec::with_capacity(student.layers.len());
    for (s, t) in student.layers.iter().zip(&teacher.layers) {
        if s.as_heads.len() != t.as_heads.len() {
            return Err(Error::ShapeMismatch {
                op: "loss_trm",
                detail: format!(
                    "head counts {} and {} differ",
                    s.as_heads.len(),
                    t.as_heads.len()
                ),
            });
        }
        let mut acc = 0.0f64;
        for (sh, th) in s.as_heads.iter().zip(&t.as_heads) {
            acc += mse64(sh, th, "loss_trm")?;
        }
        if reduction == AsReduction::Mean {
            acc /= s.as_heads.len().max(1) as f64;
        }
        as_terms.push(acc as f32);
    }
    let total: f64 = x_terms.iter().map(|v| *v as f64).sum::<f64>()
        + as_terms.iter().map(|v| *v as f64).sum::<f64>();
    Ok((total as f32, x_terms, as_terms))
}

/// Teacher probability target from raw logits, computed at f64.
fn teacher_softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|v| (*v as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|v| (v / z) as f32).collect()
}

/// Prediction loss: soft cross-entropy of the student's logits against the
/// teacher's softmax for classification heads, mean-squared error on raw
/// outputs for regression heads.
pub fn loss_pred(student_logits: &[f32], teacher_logits: &[f32], head: TaskHead) -> Result<f32> {
    if student_logits.len() != teacher_logits.len() {
        return Err(Error::ShapeMismatch {
            op: "loss_pred",
            detail: format!(
                "logit lengths {} and {} differ",
                student_logits.len(),
                teacher_logits.len()
            ),
        });
    }
    match head {
        TaskHead::Regression => mse64(student_logits, teacher_logits, "loss_pred").map(|v| v as f32),
        TaskHead::Classification { .. } => {
            let target = teacher_softmax(teacher_logits);
            let max = student_logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = student_logits.iter().map(|v| (*v as f64 - max).exp()).sum();
            let log_z = z.ln();
            let mut ce = 0.0f64;
            for (t, s) in target.iter().zip(student_logits) {
                ce -= *t as f64 * (*s as f64 - max - log_z);
            }
            Ok(ce as f32)
        }
    }
}

/// Attention-output loss: summed per-layer MSE between student and teacher
/// attention outputs. Returns the total and the per-layer terms.
pub fn loss_output(student: &ModelTrace, teacher: &ModelTrace) -> Result<(f32, Vec<f32>)> {
    check_same_depth(student, teacher, "loss_output")?;
    let mut terms = Vec::with_capacity(student.layers.len());
    let mut total = 0.0f64;
    for (s, t) in student.layers.iter().zip(&teacher.layers) {
        let m = mse64(&s.ao, &t.ao, "loss_output")?;
        terms.push(m as f32);
        total += m;
    }
    Ok((total as f32, terms))
}

/// Every component at once, combined per the weights. The output loss is
/// computed for reporting even when inactive, but contributes to the
/// total only when `output_active` is set.
pub fn loss_breakdown(
    student: &ModelTrace,
    teacher: &ModelTrace,
    head: TaskHead,
    weights: &DistillWeights,
    output_active: bool,
) -> Result<LossBreakdown> {
    let (l_trm, per_layer_x_mse, per_layer_as_mse) =
        loss_trm(student, teacher, weights.as_reduction)?;
    let l_pred = loss_pred(&student.logits, &teacher.logits, head)?;
    let (l_output, per_layer_ao_mse) = loss_output(student, teacher)?;
    let gated = if output_active { l_output } else { 0.0 };
    let total =
        (l_trm as f64 + l_pred as f64 + weights.lambda_out as f64 * gated as f64) as f32;
    Ok(LossBreakdown {
        l_trm,
        l_pred,
        l_output: gated,
        total,
        per_layer_x_mse,
        per_layer_as_mse,
        per_layer_ao_mse,
    })
}

/// Tape handles for the combined training loss.
pub struct DistillLossIds {
    pub total: TensorId,
    pub l_trm: TensorId,
    pub l_pred: TensorId,
    /// Gated term; a zero constant when the schedule keeps it off.
    pub l_output: TensorId,
}

/// Build the combined distillation loss on a tape against a detached
/// teacher trace. Mirrors [`loss_breakdown`] exactly; tests hold the two
/// together.
pub fn build_distill_loss(
    tape: &mut Tape,
    student: &TraceIds,
    teacher: &ModelTrace,
    head: TaskHead,
    weights: &DistillWeights,
    output_active: bool,
) -> Result<DistillLossIds> {
    if student.layers.len() != teacher.layers.len() {
        return Err(Error::ShapeMismatch {
            op: "build_distill_loss",
            detail: format!(
                "student has {} layers, teacher {}",
                student.layers.len(),
                teacher.layers.len()
            ),
        });
    }
    let mut trm_terms = Vec::new();
    let tx0 = tape.constant(teacher.x0.clone(), tape.shape(student.x0).to_vec())?;
    trm_terms.push(tape.mse(student.x0, tx0)?);
    for (s, t) in student.layers.iter().zip(&teacher.layers) {
        let tx = tape.constant(t.x_out.clone(), tape.shape(s.x_out).to_vec())?;
        trm_terms.push(tape.mse(s.x_out, tx)?);
    }
    for (s, t) in student.layers.iter().zip(&teacher.layers) {
        if s.as_heads.len() != t.as_heads.len() {
            return Err(Error::ShapeMismatch {
                op: "build_distill_loss",
                detail: format!(
                    "head counts {} and {} differ",
                    s.as_heads.len(),
                    t.as_heads.len()
                ),
            });
        }
        let mut head_terms = Vec::with_capacity(s.as_heads.len());
        for (sh, th) in s.as_heads.iter().zip(&t.as_heads) {
            let tc = tape.constant(th.clone(), tape.shape(*sh).to_vec())?;
            head_terms.push(tape.mse(*sh, tc)?);
        }
        let summed = tape.add_n(&head_terms)?;
        let term = match weights.as_reduction {
            AsReduction::Mean => tape.scale(summed, 1.0 / s.as_heads.len().max(1) as f32)?,
            AsReduction::Sum => summed,
        };
        trm_terms.push(term);
    }
    let l_trm = tape.add_n(&trm_terms)?;

    let l_pred = match head {
        TaskHead::Regression => {
            let tl = tape.constant(teacher.logits.clone(), tape.shape(student.logits).to_vec())?;
            tape.mse(student.logits, tl)?
        }
        TaskHead::Classification { .. } => {
            let target = teacher_softmax(&teacher.logits);
            tape.soft_cross_entropy(student.logits, &target)?
        }
    };

    let l_output = if output_active {
        let mut ao_terms = Vec::with_capacity(student.layers.len());
        for (s, t) in student.layers.iter().zip(&teacher.layers) {
            let tc = tape.constant(t.ao.clone(), tape.shape(s.ao).to_vec())?;
            ao_terms.push(tape.mse(s.ao, tc)?);
        }
        tape.add_n(&ao_terms)?
    } else {
        tape.scalar_const(0.0)?
    };

    let weighted_out = tape.scale(l_output, weights.lambda_out)?;
    let base = tape.add(l_trm, l_pred)?;
    let total = tape.add(base, weighted_out)?;
    Ok(DistillLossIds { total, l_trm, l_pred, l_output })
}
