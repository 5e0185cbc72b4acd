//! Analysis instruments for trained models: layer-wise representation
//! MSE profiles, Hessian top-eigenvalue estimation via matrix-free power
//! iteration, 2-D loss-landscape slices with filter-normalized random
//! directions, attention ranking loss, and attention-map dumps.
//!
//! Everything here is read-only with respect to the model argument;
//! perturbed evaluations run on private copies.

use crate::error::{Error, Result};
use crate::model::{capture_teacher, ModelTrace, TransformerModel};
use crate::quant::{ternarize, ternarize_rows, Granularity, QuantPlan};
use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

fn l2_f64(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt()
}

fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
}

/// Standard normal samples via Box-Muller on the portable PRNG.
fn normal_vec(rng: &mut Xoshiro256StarStar, len: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let u1 = ((rng.next_u64() >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
        let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let r = (-2.0 * u1.ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * u2;
        out.push((r * t.cos()) as f32);
        if out.len() < len {
            out.push((r * t.sin()) as f32);
        }
    }
    out
}

/// Copy of all parameters in canonical order as one flat vector.
pub fn flatten_params(model: &TransformerModel) -> Vec<f32> {
    let mut out = Vec::with_capacity(model.num_params());
    model.for_each_param(|_, data| out.extend_from_slice(data));
    out
}

/// Overwrite all parameters from a flat vector in canonical order.
pub fn load_flat_params(model: &mut TransformerModel, flat: &[f32]) -> Result<()> {
    if flat.len() != model.num_params() {
        return Err(Error::ShapeMismatch {
            op: "load_flat_params",
            detail: format!("expected {} values, got {}", model.num_params(), flat.len()),
        });
    }
    let mut off = 0usize;
    model.for_each_param_mut(|_, data| {
        let len = data.len();
        data.copy_from_slice(&flat[off..off + len]);
        off += len;
    });
    Ok(())
}

/// Replace every matrix the plan flags with its ternary reconstruction,
/// leaving everything else untouched. The result forwards exactly like
/// the original bound with the same plan, so deployment-condition
/// diagnostics can run on a plain full-precision pipeline.
pub fn materialize_ternary(
    model: &TransformerModel,
    plan: &QuantPlan,
    granularity: Granularity,
) -> Result<TransformerModel> {
    plan.check_layers(model.config.num_layers)?;
    let d = model.config.d_model;
    let d_ff = model.config.d_ff;
    let mut out = model.clone();
    for (l, flags) in plan.layers.iter().enumerate() {
        let lw = &mut out.layers[l];
        let targets: [(bool, &mut Vec<f32>, usize, usize); 6] = [
            (flags.w_q, &mut lw.w_q, d, d),
            (flags.w_k, &mut lw.w_k, d, d),
            (flags.w_v, &mut lw.w_v, d, d),
            (flags.w_o, &mut lw.w_o, d, d),
            (flags.w_1, &mut lw.w_1, d, d_ff),
            (flags.w_2, &mut lw.w_2, d_ff, d),
        ];
        for (on, w, rows, cols) in targets {
            if !on {
                continue;
            }
            let tw = match granularity {
                Granularity::PerTensor => ternarize(w)?,
                Granularity::PerRow => ternarize_rows(w, rows, cols)?,
            };
            *w = tw.reconstruct();
        }
    }
    Ok(out)
}

/// Per-layer representation divergence between two models of the same
/// architecture: embedding output first, then each layer output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMseProfile {
    pub per_layer: Vec<f32>,
}

pub fn layer_mse_profile(
    student: &TransformerModel,
    teacher: &TransformerModel,
    batches: &[Vec<u32>],
) -> Result<LayerMseProfile> {
    if student.config != teacher.config {
        return Err(Error::ShapeMismatch {
            op: "layer_mse_profile",
            detail: "student and teacher configurations differ".into(),
        });
    }
    if batches.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "layer_mse_profile",
            detail: "no batches supplied".into(),
        });
    }
    let depth = student.config.num_layers + 1;
    let mut acc = vec![0.0f64; depth];
    for tokens in batches {
        let s = capture_teacher(student, tokens)?;
        let t = capture_teacher(teacher, tokens)?;
        acc[0] += mean_sq_diff(&s.x0, &t.x0);
        for l in 0..student.config.num_layers {
            acc[l + 1] += mean_sq_diff(&s.layers[l].x_out, &t.layers[l].x_out);
        }
    }
    let n = batches.len() as f64;
    Ok(LayerMseProfile {
        per_layer: acc.iter().map(|v| (v / n) as f32).collect(),
    })
}

fn mean_sq_diff(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|a, b| v[*a].partial_cmp(&v[*b]).unwrap_or(std::cmp::Ordering::Equal));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                out[idx[k]] = avg;
            }
            i = j + 1;
        }
        out
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    crate::train::pearson(&rx, &ry)
}

/// Hessian-vector product by central finite differences of first-order
/// gradients, with the step scaled to the direction's norm.
pub fn hvp<F>(grad: &mut F, theta: &[f32], v: &[f32]) -> Result<Vec<f32>>
where
    F: FnMut(&[f32]) -> Result<Vec<f32>>,
{
    let norm = l2_f64(v);
    if norm <= 0.0 {
        return Err(Error::ZeroVector { what: "hvp direction" });
    }
    hvp_with_eps(grad, theta, v, 1e-3 / norm)
}

pub fn hvp_with_eps<F>(grad: &mut F, theta: &[f32], v: &[f32], eps: f64) -> Result<Vec<f32>>
where
    F: FnMut(&[f32]) -> Result<Vec<f32>>,
{
    if theta.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "hvp",
            detail: format!("theta has {} entries, v has {}", theta.len(), v.len()),
        });
    }
    let plus: Vec<f32> = theta
        .iter()
        .zip(v)
        .map(|(t, d)| (*t as f64 + eps * *d as f64) as f32)
        .collect();
    let minus: Vec<f32> = theta
        .iter()
        .zip(v)
        .map(|(t, d)| (*t as f64 - eps * *d as f64) as f32)
        .collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    if gp.len() != theta.len() || gm.len() != theta.len() {
        return Err(Error::ShapeMismatch {
            op: "hvp",
            detail: "gradient length differs from parameter length".into(),
        });
    }
    let mut out = Vec::with_capacity(theta.len());
    for (p, m) in gp.iter().zip(&gm) {
        let h = ((*p as f64 - *m as f64) / (2.0 * eps)) as f32;
        if !h.is_finite() {
            return Err(Error::NonFiniteGradient { what: "hvp".into() });
        }
        out.push(h);
    }
    Ok(out)
}

/// Power-iteration estimate of the eigenvalue of largest magnitude.
/// `converged` reports whether the relative residual fell below `tol`
/// within the budget; the best estimate is returned either way. The
/// Rayleigh history need not be monotone in magnitude after burn-in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub lambda_max: f32,
    pub history: Vec<f32>,
    pub residual: f32,
    pub converged: bool,
    pub iterations: usize,
}

pub fn top_eigenvalue<F>(
    grad: &mut F,
    theta: &[f32],
    iters: usize,
    tol: f32,
    seed: u64,
) -> Result<HessianReport>
where
    F: FnMut(&[f32]) -> Result<Vec<f32>>,
{
    if iters == 0 {
        return Err(Error::InvalidConfig {
            pointer: "/hessian/iters".into(),
            message: "must be at least 1".into(),
        });
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut v = normal_vec(&mut rng, theta.len());
    let n0 = l2_f64(&v);
    for x in v.iter_mut() {
        *x = (*x as f64 / n0) as f32;
    }
    let mut history: Vec<f32> = Vec::new();
    let mut residual = f32::INFINITY;
    let mut converged = false;
    let mut steps = 0usize;
    for _ in 0..iters {
        steps += 1;
        let w = hvp(grad, theta, &v)?;
        let lambda = dot_f64(&v, &w);
        if let Some(prev) = history.last() {
            let denom = lambda.abs().max(f64::MIN_POSITIVE);
            residual = ((lambda - *prev as f64).abs() / denom) as f32;
        }
        history.push(lambda as f32);
        if residual < tol {
            converged = true;
            break;
        }
        let wn = l2_f64(&w);
        if wn <= 0.0 {
            // exactly zero curvature along v: the estimate is final
            converged = true;
            residual = 0.0;
            break;
        }
        for (x, y) in v.iter_mut().zip(&w) {
            *x = (*y as f64 / wn) as f32;
        }
    }
    Ok(HessianReport {
        lambda_max: *history.last().expect("at least one iteration"),
        history,
        residual,
        converged,
        iterations: steps,
    })
}

/// Loss surface over a 2-D slice through parameter space. Directions are
/// random, filter-normalized per weight matrix (each block rescaled to
/// the norm of the corresponding parameter block); rank-1 parameters
/// receive no component. `loss[i * grid_n + j]` sits at
/// `(alphas[i], betas[j])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSlice {
    pub grid_n: usize,
    pub alphas: Vec<f32>,
    pub betas: Vec<f32>,
    /// f64 keeps the surface fit exact; f32 rounding of large losses
    /// already exceeds the advertised residual tolerance.
    pub loss: Vec<f64>,
    pub center_loss: f64,
    pub seed: u64,
    /// Names of the parameter blocks that received direction components.
    pub blocks: Vec<String>,
}

impl LandscapeSlice {
    /// Grid rows as `alpha,beta,loss` lines for external plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,loss\n");
        for (i, a) in self.alphas.iter().enumerate() {
            for (j, b) in self.betas.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", a, b, self.loss[i * self.grid_n + j]));
            }
        }
        out
    }
}

pub fn landscape_slice<F>(
    model: &TransformerModel,
    loss_fn: &mut F,
    grid_n: usize,
    seed: u64,
) -> Result<LandscapeSlice>
where
    F: FnMut(&TransformerModel) -> Result<f64>,
{
    if grid_n < 3 || grid_n % 2 == 0 {
        return Err(Error::InvalidConfig {
            pointer: "/landscape/grid_n".into(),
            message: format!("must be an odd number of at least 3, got {grid_n}"),
        });
    }
    // snapshot of every block in canonical order, marking matrix blocks
    let mut base: Vec<Vec<f32>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    model.for_each_param(|name, data| {
        base.push(data.to_vec());
        names.push(name.to_string());
    });
    let layout = crate::model::param_layout(&model.config);
    let is_matrix: Vec<bool> = layout.iter().map(|(_, shape)| shape.len() >= 2).collect();

    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let make_direction = |rng: &mut Xoshiro256StarStar| -> Vec<Option<Vec<f32>>> {
        base.iter()
            .zip(&is_matrix)
            .map(|(block, m)| {
                if !*m {
                    return None;
                }
                let mut dir = normal_vec(rng, block.len());
                let wn = l2_f64(block);
                let dn = l2_f64(&dir);
                let scale = if dn > 0.0 { wn / dn } else { 0.0 };
                for x in dir.iter_mut() {
                    *x = (*x as f64 * scale) as f32;
                }
                Some(dir)
            })
            .collect()
    };
    let d1 = make_direction(&mut rng);
    let d2 = make_direction(&mut rng);

    let linspace = |n: usize| -> Vec<f32> {
        (0..n)
            .map(|i| (-1.0 + 2.0 * i as f64 / (n - 1) as f64) as f32)
            .collect()
    };
    let alphas = linspace(grid_n);
    let betas = linspace(grid_n);

    let mut work = model.clone();
    let mut loss = Vec::with_capacity(grid_n * grid_n);
    let mut center = 0.0f64;
    for (i, a) in alphas.iter().enumerate() {
        for (j, b) in betas.iter().enumerate() {
            let mut block = 0usize;
            work.for_each_param_mut(|_, data| {
                let src = &base[block];
                match (&d1[block], &d2[block]) {
                    (Some(u), Some(w)) => {
                        for k in 0..data.len() {
                            data[k] = (src[k] as f64
                                + *a as f64 * u[k] as f64
                                + *b as f64 * w[k] as f64)
                                as f32;
                        }
                    }
                    _ => data.copy_from_slice(src),
                }
                block += 1;
            });
            let v = loss_fn(&work)?;
            if i == grid_n / 2 && j == grid_n / 2 {
                center = v;
            }
            loss.push(v);
        }
    }
    Ok(LandscapeSlice {
        grid_n,
        alphas,
        betas,
        loss,
        center_loss: center,
        seed,
        blocks: names
            .into_iter()
            .zip(&is_matrix)
            .filter(|(_, m)| **m)
            .map(|(n, _)| n)
            .collect(),
    })
}

/// Mean normalized Kendall-tau distance between attention rows: the
/// fraction of key pairs ordered differently by student and teacher,
/// averaged over heads and query rows. Ties order by key index, so the
/// score is 0 exactly when every row agrees on its full ordering.
pub fn ranking_loss(student: &[Vec<f32>], teacher: &[Vec<f32>], n: usize) -> Result<f32> {
    if student.len() != teacher.len() {
        return Err(Error::ShapeMismatch {
            op: "ranking_loss",
            detail: format!("head counts {} and {} differ", student.len(), teacher.len()),
        });
    }
    for (h, (s, t)) in student.iter().zip(teacher).enumerate() {
        if s.len() != n * n || t.len() != n * n {
            return Err(Error::ShapeMismatch {
                op: "ranking_loss",
                detail: format!(
                    "head {} wants {} entries, got {} and {}",
                    h,
                    n * n,
                    s.len(),
                    t.len()
                ),
            });
        }
    }
    if student.is_empty() || n < 2 {
        return Ok(0.0);
    }
    let before = |row: &[f32], i: usize, j: usize| -> bool {
        row[i] > row[j] || (row[i] == row[j] && i < j)
    };
    let pairs = (n * (n - 1) / 2) as f64;
    let mut total = 0.0f64;
    for (s, t) in student.iter().zip(teacher) {
        for q in 0..n {
            let srow = &s[q * n..(q + 1) * n];
            let trow = &t[q * n..(q + 1) * n];
            let mut discordant = 0usize;
            for i in 0..n {
                for j in (i + 1)..n {
                    if before(srow, i, j) != before(trow, i, j) {
                        discordant += 1;
                    }
                }
            }
            total += discordant as f64 / pairs;
        }
    }
    Ok((total / (student.len() * n) as f64) as f32)
}

/// One head's attention map with its inputs, for external visualization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub layer: usize,
    pub head: usize,
    pub tokens: Vec<u32>,
    /// Row-major `tokens.len()` x `tokens.len()`, rows summing to one.
    pub map: Vec<f32>,
}

pub fn dump_attention(
    model: &TransformerModel,
    tokens: &[u32],
    layer: usize,
    head: usize,
) -> Result<AttentionDump> {
    if layer >= model.config.num_layers {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: layer,
            bound: model.config.num_layers,
        });
    }
    if head >= model.config.heads {
        return Err(Error::IndexOutOfRange {
            what: "head",
            index: head,
            bound: model.config.heads,
        });
    }
    let trace = capture_teacher(model, tokens)?;
    Ok(AttentionDump {
        layer,
        head,
        tokens: tokens.to_vec(),
        map: trace.layers[layer].sa_heads[head].clone(),
    })
}

/// Convenience accessor pairing `ranking_loss` with captured traces.
pub fn ranking_loss_at_layer(
    student: &ModelTrace,
    teacher: &ModelTrace,
    layer: usize,
) -> Result<f32> {
    if layer >= student.layers.len() || layer >= teacher.layers.len() {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: layer,
            bound: student.layers.len().min(teacher.layers.len()),
        });
    }
    ranking_loss(
        &student.layers[layer].sa_heads,
        &teacher.layers[layer].sa_heads,
        student.n_tok,
    )
}
