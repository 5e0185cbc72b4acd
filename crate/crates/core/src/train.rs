//! Training loops: full-precision teacher fine-tuning, and two-step QAT
//! of a ternary student guided by the frozen teacher.
//!
//! One training step is serial: build a tape, bind the model once (batch
//! gradients accumulate on the shared parameter nodes), run every batch
//! example through it, reduce to a mean loss, backprop, and apply Adam to
//! the latent full-precision weights. The teacher never trains here; its
//! per-example traces are captured once and cached, which is sound
//! because frozen weights make the trace a pure function of the tokens.
//!
//! Metrics stream to a CSV with a fixed header; one row per `eval_every`
//! iterations plus one for the final iteration.

use crate::checkpoint::{export_ternary, load_model, save_model};
use crate::config::RunConfig;
use crate::data::{Dataset, Example, Label};
use crate::distill::build_distill_loss;
use crate::error::{Error, Result};
use crate::model::{
    capture_teacher, BoundModel, InterventionInputs, ModelTrace, TaskHead, TransformerModel,
};
use crate::optim::Adam;
use crate::quant::QuantPlan;
use crate::schedule::plan_for;
use crate::tensor::{Tape, TensorId};
use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use std::io::Write as _;
use std::path::Path;

pub const METRICS_HEADER: &str =
    "iter,lr,total,l_trm,l_pred,l_output,train_metric,eval_metric,phase";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub lr: f32,
    pub total: f32,
    pub l_trm: f32,
    pub l_pred: f32,
    pub l_output: f32,
    pub train_metric: f32,
    pub eval_metric: f32,
    pub phase: String,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.lr,
            self.total,
            self.l_trm,
            self.l_pred,
            self.l_output,
            self.train_metric,
            self.eval_metric,
            self.phase
        )
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{METRICS_HEADER}")?;
    for row in rows {
        writeln!(out, "{}", row.csv_line())?;
    }
    Ok(())
}

/// Deterministic sequential-with-shuffle batching: one pass over a
/// shuffled index list per epoch, reshuffled when exhausted.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    rng: Xoshiro256StarStar,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> BatchStream {
        let mut s = BatchStream {
            order: (0..n).collect(),
            pos: 0,
            rng: Xoshiro256StarStar::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        // Fisher-Yates with modulo reduction, same portability argument
        // as the data generators
        for i in (1..self.order.len()).rev() {
            let j = (self.rng.next_u64() % (i as u64 + 1)) as usize;
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Load the configured dataset, or regenerate it from the config seed.
pub fn dataset_for(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => Dataset::load(p).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                Error::DatasetMissing { path: p.display().to_string() }
            }
            other => other,
        }),
        None => Ok(cfg
            .data
            .task
            .generate(cfg.data.seed, cfg.data.n_train, cfg.data.n_dev)),
    }
}

fn one_error(mut errs: Vec<Error>) -> Error {
    if errs.len() == 1 {
        return errs.remove(0);
    }
    let joined = errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ");
    Error::InvalidConfig { pointer: "/".into(), message: joined }
}

/// Ground-truth loss on one example's logits.
fn supervised_loss(
    tape: &mut Tape,
    logits: TensorId,
    label: &Label,
    head: TaskHead,
) -> Result<TensorId> {
    match (head, label) {
        (TaskHead::Classification { num_classes }, Label::Class(c)) => {
            if *c as usize >= num_classes {
                return Err(Error::IndexOutOfRange {
                    what: "label",
                    index: *c as usize,
                    bound: num_classes,
                });
            }
            let mut target = vec![0.0f32; num_classes];
            target[*c as usize] = 1.0;
            tape.soft_cross_entropy(logits, &target)
        }
        (TaskHead::Regression, Label::Value(v)) => {
            let shape = tape.shape(logits).to_vec();
            let t = tape.constant(vec![*v], shape)?;
            tape.mse(logits, t)
        }
        _ => Err(Error::ShapeMismatch {
            op: "supervised_loss",
            detail: "label kind does not match task head".into(),
        }),
    }
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() != ys.len() || xs.is_empty() {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx <= 0.0 || vy <= 0.0 {
        return 0.0;
    }
    cov / (vx.sqrt() * vy.sqrt())
}

/// Task metric plus the raw squared error (regression only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// Accuracy for classification, Pearson correlation for regression.
    pub metric: f32,
    /// Mean squared prediction error; zero for classification heads.
    pub mse: f32,
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Deterministic evaluation. `plan` ternarizes the selected matrices
/// first (the deployment condition); `None` evaluates full precision.
pub fn evaluate(
    model: &TransformerModel,
    examples: &[Example],
    plan: Option<&QuantPlan>,
    granularity: crate::quant::Granularity,
) -> Result<EvalReport> {
    let head = model.config.task_head;
    let mut correct = 0usize;
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for ex in examples {
        let mut tape = Tape::no_grad();
        let bound = BoundModel::bind(&mut tape, model, plan, granularity)?;
        let ids = bound.forward(
            &mut tape,
            &ex.tokens,
            &InterventionInputs::none(model.config.num_layers),
        )?;
        let logits = tape.data(ids.logits).to_vec();
        match (head, &ex.label) {
            (TaskHead::Classification { .. }, Label::Class(c)) => {
                if argmax(&logits) == *c as usize {
                    correct += 1;
                }
            }
            (TaskHead::Regression, Label::Value(v)) => {
                preds.push(logits[0] as f64);
                targets.push(*v as f64);
            }
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "evaluate",
                    detail: "label kind does not match task head".into(),
                })
            }
        }
    }
    match head {
        TaskHead::Classification { .. } => Ok(EvalReport {
            metric: correct as f32 / examples.len().max(1) as f32,
            mse: 0.0,
        }),
        TaskHead::Regression => {
            let mse = preds
                .iter()
                .zip(&targets)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / preds.len().max(1) as f64;
            Ok(EvalReport {
                metric: pearson(&preds, &targets) as f32,
                mse: mse as f32,
            })
        }
    }
}

fn metrics_due(iter: usize, total: usize, eval_every: usize) -> bool {
    (iter + 1) % eval_every == 0 || iter + 1 == total
}

/// Fine-tune a full-precision teacher on task labels. Writes the model
/// to `<out_dir>/teacher` and metrics to `<out_dir>/teacher_metrics.csv`.
pub fn train_teacher(cfg: &RunConfig) -> Result<(TransformerModel, Vec<MetricsRow>)> {
    cfg.validate().map_err(one_error)?;
    let dataset = dataset_for(cfg)?;
    let mut model = TransformerModel::init(&cfg.model, cfg.seed)?;
    let budget = cfg.schedule.budget;
    let total = budget.total_iters;
    let mut adam = Adam::new(cfg.optimizer.to_adam(total), &model);
    let mut stream = BatchStream::new(dataset.train.len(), cfg.seed);
    let head = cfg.model.task_head;
    let mut rows = Vec::new();
    for iter in 0..total {
        let batch = stream.next_batch(budget.batch_size);
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &model, None, cfg.quant.granularity)?;
        let mut losses = Vec::with_capacity(batch.len());
        for idx in batch {
            let ex = &dataset.train[idx];
            let ids = bound.forward(
                &mut tape,
                &ex.tokens,
                &InterventionInputs::none(cfg.model.num_layers),
            )?;
            losses.push(supervised_loss(&mut tape, ids.logits, &ex.label, head)?);
        }
        let summed = tape.add_n(&losses)?;
        let mean = tape.scale(summed, 1.0 / budget.batch_size as f32)?;
        let loss_val = tape.scalar(mean);
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss { iter });
        }
        tape.backward(mean)?;
        let grads = bound.collect_grads(&tape)?;
        let lr = adam.step(iter, &mut model, &grads)?;
        if metrics_due(iter, total, budget.eval_every) {
            let train = evaluate(&model, &dataset.train, None, cfg.quant.granularity)?;
            let dev = evaluate(&model, &dataset.dev, None, cfg.quant.granularity)?;
            rows.push(MetricsRow {
                iter,
                lr,
                total: loss_val,
                l_trm: 0.0,
                l_pred: loss_val,
                l_output: 0.0,
                train_metric: train.metric,
                eval_metric: dev.metric,
                phase: "teacher".into(),
            });
        }
    }
    save_model(&cfg.out_dir.join("teacher"), &model)?;
    write_metrics_csv(&cfg.out_dir.join("teacher_metrics.csv"), &rows)?;
    Ok((model, rows))
}

/// Two-step QAT under the configured schedule. Loads the teacher from
/// `teacher_dir`, trains a ternary student against it, and writes
/// `<out_dir>/student`, `<out_dir>/student_ternary`, and
/// `<out_dir>/qat_metrics.csv`.
pub fn qat(cfg: &RunConfig, teacher_dir: &Path) -> Result<(TransformerModel, Vec<MetricsRow>)> {
    cfg.validate().map_err(one_error)?;
    let teacher = load_model(teacher_dir)?;
    if teacher.config != cfg.model {
        return Err(Error::CheckpointMismatch {
            detail: "teacher checkpoint configuration differs from run config".into(),
        });
    }
    let dataset = dataset_for(cfg)?;
    let mut student = if cfg.init_from_teacher {
        teacher.clone()
    } else {
        TransformerModel::init(&cfg.model, cfg.seed)?
    };
    let budget = cfg.schedule.budget;
    let total = budget.total_iters;
    let layers = cfg.model.num_layers;
    let head = cfg.model.task_head;
    let mut adam = Adam::new(cfg.optimizer.to_adam(total), &student);
    let mut stream = BatchStream::new(dataset.train.len(), cfg.seed);
    let mut cache: Vec<Option<ModelTrace>> = vec![None; dataset.train.len()];
    let mut rows = Vec::new();
    for iter in 0..total {
        let plan = plan_for(&cfg.schedule, iter, layers)?;
        let batch = stream.next_batch(budget.batch_size);
        for idx in &batch {
            if cache[*idx].is_none() {
                cache[*idx] = Some(capture_teacher(&teacher, &dataset.train[*idx].tokens)?);
            }
        }
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &student, Some(&plan.quant), cfg.quant.granularity)?;
        let mut totals = Vec::with_capacity(batch.len());
        let mut comp = [0.0f64; 3];
        for idx in &batch {
            let ex = &dataset.train[*idx];
            let trace = cache[*idx].as_ref().expect("cached above");
            let ti = if plan.replace_ao {
                InterventionInputs::replace_ao(trace)
            } else if plan.replace_sa {
                InterventionInputs::replace_sa(trace)
            } else {
                InterventionInputs::none(layers)
            };
            let ids = bound.forward(&mut tape, &ex.tokens, &ti)?;
            let loss = build_distill_loss(
                &mut tape,
                &ids,
                trace,
                head,
                &cfg.distill,
                plan.output_loss_active,
            )?;
            comp[0] += tape.scalar_f64(loss.l_trm);
            comp[1] += tape.scalar_f64(loss.l_pred);
            comp[2] += tape.scalar_f64(loss.l_output);
            let ex_total = if cfg.label_loss_weight > 0.0 {
                let sup = supervised_loss(&mut tape, ids.logits, &ex.label, head)?;
                let weighted = tape.scale(sup, cfg.label_loss_weight)?;
                tape.add(loss.total, weighted)?
            } else {
                loss.total
            };
            totals.push(ex_total);
        }
        let summed = tape.add_n(&totals)?;
        let mean = tape.scale(summed, 1.0 / budget.batch_size as f32)?;
        let loss_val = tape.scalar(mean);
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss { iter });
        }
        tape.backward(mean)?;
        let grads = bound.collect_grads(&tape)?;
        let lr = adam.step(iter, &mut student, &grads)?;
        if metrics_due(iter, total, budget.eval_every) {
            let b = budget.batch_size as f64;
            let train =
                evaluate(&student, &dataset.train, Some(&plan.quant), cfg.quant.granularity)?;
            let dev = evaluate(&student, &dataset.dev, Some(&plan.quant), cfg.quant.granularity)?;
            rows.push(MetricsRow {
                iter,
                lr,
                total: loss_val,
                l_trm: (comp[0] / b) as f32,
                l_pred: (comp[1] / b) as f32,
                l_output: (comp[2] / b) as f32,
                train_metric: train.metric,
                eval_metric: dev.metric,
                phase: cfg.schedule.phase_label(iter).into(),
            });
        }
    }
    save_model(&cfg.out_dir.join("student"), &student)?;
    let deploy_plan = QuantPlan::all(layers);
    export_ternary(
        &cfg.out_dir.join("student_ternary"),
        &student,
        &deploy_plan,
        cfg.quant.granularity,
    )?;
    write_metrics_csv(&cfg.out_dir.join("qat_metrics.csv"), &rows)?;
    Ok((student, rows))
}
