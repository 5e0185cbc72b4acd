//! Command-line entry point: data generation, teacher training, QAT,
//! evaluation, diagnostics, and multi-seed mode sweeps.
//!
//! Every failure exits nonzero with a single `error: ...` line on
//! stderr; configuration problems carry JSON-pointer paths. Runs that
//! take a config write the fully resolved document next to their
//! outputs, and re-running from that file reproduces the outputs byte
//! for byte.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use tiqat::checkpoint::load_model;
use tiqat::config::RunConfig;
use tiqat::data::{Dataset, Example, TaskKind};
use tiqat::diagnostics::{
    dump_attention, flatten_params, landscape_slice, layer_mse_profile, load_flat_params,
    materialize_ternary, ranking_loss_at_layer, top_eigenvalue,
};
use tiqat::distill::{build_distill_loss, DistillWeights};
use tiqat::error::Error;
use tiqat::model::{capture_teacher, BoundModel, InterventionInputs, ModelTrace, TransformerModel};
use tiqat::quant::{Granularity, QuantPlan};
use tiqat::schedule::Mode;
use tiqat::tensor::Tape;
use tiqat::train::{evaluate, qat, train_teacher};

#[derive(Parser)]
#[command(name = "tiqat", version, about = "Ternary QAT lab for small transformer encoders")]
struct Cli {
    /// Base directory for all relative paths.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write its train/dev splits.
    GenData(GenDataArgs),
    /// Fine-tune a full-precision teacher from a run config.
    TrainTeacher(TrainTeacherArgs),
    /// Train a ternary student against a teacher checkpoint.
    Qat(QatArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Analysis reports on trained checkpoints.
    #[command(subcommand)]
    Diagnose(DiagnoseCmd),
    /// Train and compare several schedule modes over several seeds.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// copy_pair, induction, or similarity.
    #[arg(long)]
    task: String,
    #[arg(long)]
    seed: u64,
    /// Training split size.
    #[arg(long)]
    train: usize,
    /// Dev split size.
    #[arg(long)]
    dev: usize,
    /// Output stem; writes <out>.train.jsonl and <out>.dev.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainTeacherArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed (flag > TIQAT_SEED > config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct QatArgs {
    #[arg(long)]
    config: PathBuf,
    /// Teacher checkpoint directory.
    #[arg(long)]
    teacher: PathBuf,
    /// Schedule mode override: none, ti_o, ti_m, ti_g, ti_inverted,
    /// ti_stochastic, case1..case4.
    #[arg(long)]
    mode: Option<String>,
    /// Override the two-step split (defaults to on for ti_* modes).
    #[arg(long)]
    two_step: Option<bool>,
    /// Overrides the config seed (flag > TIQAT_SEED > config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset stem (as written by gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Evaluate with ternarized weights (the deployment condition).
    #[arg(long)]
    quantized: bool,
    /// per_tensor or per_row.
    #[arg(long, default_value = "per_tensor")]
    granularity: String,
}

#[derive(Subcommand)]
enum DiagnoseCmd {
    /// Per-layer representation MSE between two checkpoints.
    Mse(MseArgs),
    /// Top Hessian eigenvalue of the distillation loss.
    Hessian(HessianArgs),
    /// 2-D loss-landscape slice around a checkpoint.
    Landscape(LandscapeArgs),
    /// Attention ranking loss between student and teacher.
    Ranking(RankingArgs),
    /// One attention map with token annotations.
    Attention(AttentionArgs),
}

#[derive(Args)]
struct MseArgs {
    /// Student checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Teacher checkpoint directory.
    #[arg(long)]
    teacher: PathBuf,
    /// Dataset stem.
    #[arg(long)]
    data: PathBuf,
    /// Profile the ternarized student.
    #[arg(long)]
    quantized: bool,
    #[arg(long, default_value = "per_tensor")]
    granularity: String,
    /// Max dev examples to average over.
    #[arg(long, default_value_t = 64)]
    limit: usize,
    /// Report path (default <workdir>/diagnostics/mse.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HessianArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 1e-2)]
    tol: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dev examples in the probe batch.
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LandscapeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Odd grid edge length.
    #[arg(long, default_value_t = 11)]
    grid_n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate the grid with ternarized forward passes.
    #[arg(long)]
    quantized: bool,
    #[arg(long, default_value = "per_tensor")]
    granularity: String,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Report stem (default <workdir>/diagnostics/landscape).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RankingArgs {
    /// Student checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    limit: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttentionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    head: usize,
    /// Dev example index to visualize.
    #[arg(long, default_value_t = 0)]
    example: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Number of seeds (0..k).
    #[arg(long)]
    seeds: usize,
    /// Comma-separated schedule modes.
    #[arg(long)]
    modes: String,
    /// Parallel worker slots.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

type CliResult = Result<(), String>;

fn run(cli: Cli) -> CliResult {
    let wd = cli.workdir;
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&wd, a),
        Command::TrainTeacher(a) => cmd_train_teacher(&wd, a),
        Command::Qat(a) => cmd_qat(&wd, a),
        Command::Eval(a) => cmd_eval(&wd, a),
        Command::Diagnose(a) => match a {
            DiagnoseCmd::Mse(a) => cmd_diag_mse(&wd, a),
            DiagnoseCmd::Hessian(a) => cmd_diag_hessian(&wd, a),
            DiagnoseCmd::Landscape(a) => cmd_diag_landscape(&wd, a),
            DiagnoseCmd::Ranking(a) => cmd_diag_ranking(&wd, a),
            DiagnoseCmd::Attention(a) => cmd_diag_attention(&wd, a),
        },
        Command::Sweep(a) => cmd_sweep(&wd, a),
    }
}

fn under(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn show(e: Error) -> String {
    e.to_string()
}

fn show_all(errs: Vec<Error>) -> String {
    errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")
}

fn io_at(p: &Path, e: std::io::Error) -> String {
    format!("{}: {e}", p.display())
}

/// Load a run config and rebase its paths onto the workdir.
fn load_config(workdir: &Path, path: &Path) -> Result<RunConfig, String> {
    let p = under(workdir, path);
    let text = std::fs::read_to_string(&p).map_err(|e| io_at(&p, e))?;
    let mut cfg = RunConfig::from_json(&text).map_err(show)?;
    cfg.out_dir = under(workdir, &cfg.out_dir);
    if let Some(dp) = cfg.data.path.take() {
        cfg.data.path = Some(under(workdir, &dp));
    }
    Ok(cfg)
}

/// Finalize a config for execution: apply the seed precedence chain,
/// validate, and persist the resolved document beside the outputs.
fn prepare(cfg: &mut RunConfig, seed_flag: Option<u64>) -> CliResult {
    cfg.seed = cfg.resolve_seed(seed_flag).map_err(show)?;
    cfg.validate().map_err(show_all)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| io_at(&cfg.out_dir, e))?;
    let json = cfg.to_json_pretty().map_err(show)?;
    let path = cfg.out_dir.join("resolved_config.json");
    std::fs::write(&path, json).map_err(|e| io_at(&path, e))?;
    Ok(())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!(
            "unknown mode '{s}' (expected none, ti_o, ti_m, ti_g, ti_inverted, \
             ti_stochastic, case1, case2, case3, case4)"
        )
    })
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown granularity '{s}' (expected per_tensor or per_row)"))
}

fn cmd_gen_data(wd: &Path, a: GenDataArgs) -> CliResult {
    let task = TaskKind::parse(&a.task).map_err(show)?;
    let out = under(wd, &a.out);
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_at(parent, e))?;
    }
    let dataset = task.generate(a.seed, a.train, a.dev);
    dataset.save(&out).map_err(show)?;
    println!(
        "wrote {}.train.jsonl and {}.dev.jsonl (task={}, train={}, dev={}, seed={})",
        out.display(),
        out.display(),
        task.name(),
        a.train,
        a.dev,
        a.seed
    );
    Ok(())
}

fn cmd_train_teacher(wd: &Path, a: TrainTeacherArgs) -> CliResult {
    let mut cfg = load_config(wd, &a.config)?;
    prepare(&mut cfg, a.seed)?;
    let (_, rows) = train_teacher(&cfg).map_err(show)?;
    let (train_m, dev_m) = rows
        .last()
        .map(|r| (r.train_metric, r.eval_metric))
        .unwrap_or((f32::NAN, f32::NAN));
    println!(
        "teacher: {} (train_metric={train_m}, dev_metric={dev_m})",
        cfg.out_dir.join("teacher").display()
    );
    Ok(())
}

fn cmd_qat(wd: &Path, a: QatArgs) -> CliResult {
    let mut cfg = load_config(wd, &a.config)?;
    if let Some(mode_str) = &a.mode {
        let mode = parse_mode(mode_str)?;
        cfg.schedule.mode = mode;
        cfg.schedule.two_step_enabled = mode.is_ti();
    }
    if let Some(ts) = a.two_step {
        cfg.schedule.two_step_enabled = ts;
    }
    prepare(&mut cfg, a.seed)?;
    let teacher_dir = under(wd, &a.teacher);
    let (_, rows) = qat(&cfg, &teacher_dir).map_err(show)?;
    let (train_m, dev_m) = rows
        .last()
        .map(|r| (r.train_metric, r.eval_metric))
        .unwrap_or((f32::NAN, f32::NAN));
    println!(
        "student: {} (mode={}, train_metric={train_m}, dev_metric={dev_m})",
        cfg.out_dir.join("student").display(),
        mode_name(cfg.schedule.mode)
    );
    Ok(())
}

fn cmd_eval(wd: &Path, a: EvalArgs) -> CliResult {
    let granularity = parse_granularity(&a.granularity)?;
    let model = load_model(&under(wd, &a.ckpt)).map_err(show)?;
    let dataset = Dataset::load(&under(wd, &a.data)).map_err(show)?;
    let plan = a.quantized.then(|| QuantPlan::all(model.config.num_layers));
    let train = evaluate(&model, &dataset.train, plan.as_ref(), granularity).map_err(show)?;
    let dev = evaluate(&model, &dataset.dev, plan.as_ref(), granularity).map_err(show)?;
    println!(
        "{}",
        serde_json::json!({
            "task": dataset.name,
            "quantized": a.quantized,
            "train_metric": train.metric,
            "dev_metric": dev.metric,
            "dev_mse": dev.mse,
        })
    );
    Ok(())
}

fn report_path(wd: &Path, out: &Option<PathBuf>, default_name: &str) -> Result<PathBuf, String> {
    let p = match out {
        Some(p) => under(wd, p),
        None => wd.join("diagnostics").join(default_name),
    };
    if let Some(parent) = p.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_at(parent, e))?;
    }
    Ok(p)
}

fn write_report(path: &Path, value: &serde_json::Value) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_at(path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Dev-split token sequences for probe batches.
fn probe_tokens(dataset: &Dataset, limit: usize) -> Vec<Vec<u32>> {
    dataset.dev.iter().take(limit.max(1)).map(|e| e.tokens.clone()).collect()
}

fn cmd_diag_mse(wd: &Path, a: MseArgs) -> CliResult {
    let teacher = load_model(&under(wd, &a.teacher)).map_err(show)?;
    let mut student = load_model(&under(wd, &a.ckpt)).map_err(show)?;
    let granularity = parse_granularity(&a.granularity)?;
    if a.quantized {
        let plan = QuantPlan::all(student.config.num_layers);
        student = materialize_ternary(&student, &plan, granularity).map_err(show)?;
    }
    let dataset = Dataset::load(&under(wd, &a.data)).map_err(show)?;
    let batches = probe_tokens(&dataset, a.limit);
    let profile = layer_mse_profile(&student, &teacher, &batches).map_err(show)?;
    let path = report_path(wd, &a.out, "mse.json")?;
    write_report(
        &path,
        &serde_json::json!({
            "per_layer": profile.per_layer,
            "quantized": a.quantized,
            "examples": batches.len(),
        }),
    )
}

/// Mean distillation loss of `model` against fixed teacher traces,
/// differentiable through the tape when `grad` is set.
fn distill_probe(
    model: &TransformerModel,
    tokens: &[Vec<u32>],
    traces: &[ModelTrace],
    plan: Option<&QuantPlan>,
    granularity: Granularity,
    grad: bool,
) -> Result<(f64, Option<Vec<f32>>), Error> {
    let weights = DistillWeights::default();
    let head = model.config.task_head;
    let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
    let bound = BoundModel::bind(&mut tape, model, plan, granularity)?;
    let mut totals = Vec::with_capacity(tokens.len());
    for (t, trace) in tokens.iter().zip(traces) {
        let ids = bound.forward(&mut tape, t, &InterventionInputs::none(model.config.num_layers))?;
        let loss = build_distill_loss(&mut tape, &ids, trace, head, &weights, false)?;
        totals.push(loss.total);
    }
    let sum = tape.add_n(&totals)?;
    let mean = tape.scale(sum, 1.0 / tokens.len().max(1) as f32)?;
    let value = tape.scalar_f64(mean);
    if !grad {
        return Ok((value, None));
    }
    tape.backward(mean)?;
    let per_block = bound.collect_grads(&tape)?;
    Ok((value, Some(per_block.into_iter().flatten().collect())))
}

fn cmd_diag_hessian(wd: &Path, a: HessianArgs) -> CliResult {
    let student = load_model(&under(wd, &a.ckpt)).map_err(show)?;
    let teacher = load_model(&under(wd, &a.teacher)).map_err(show)?;
    let dataset = Dataset::load(&under(wd, &a.data)).map_err(show)?;
    let tokens = probe_tokens(&dataset, a.batch);
    let traces = tokens
        .iter()
        .map(|t| capture_teacher(&teacher, t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(show)?;
    let template = student.clone();
    let mut grad = |flat: &[f32]| -> Result<Vec<f32>, Error> {
        let mut m = template.clone();
        load_flat_params(&mut m, flat)?;
        let (_, g) = distill_probe(&m, &tokens, &traces, None, Granularity::PerTensor, true)?;
        Ok(g.expect("gradient requested"))
    };
    let theta = flatten_params(&student);
    let report = top_eigenvalue(&mut grad, &theta, a.iters, a.tol, a.seed).map_err(show)?;
    let path = report_path(wd, &a.out, "hessian.json")?;
    write_report(&path, &serde_json::to_value(&report).map_err(|e| e.to_string())?)
}

fn cmd_diag_landscape(wd: &Path, a: LandscapeArgs) -> CliResult {
    let student = load_model(&under(wd, &a.ckpt)).map_err(show)?;
    let teacher = load_model(&under(wd, &a.teacher)).map_err(show)?;
    let granularity = parse_granularity(&a.granularity)?;
    let dataset = Dataset::load(&under(wd, &a.data)).map_err(show)?;
    let tokens = probe_tokens(&dataset, a.batch);
    let traces = tokens
        .iter()
        .map(|t| capture_teacher(&teacher, t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(show)?;
    let plan = a.quantized.then(|| QuantPlan::all(student.config.num_layers));
    let mut loss_fn = |m: &TransformerModel| -> Result<f64, Error> {
        let (v, _) = distill_probe(m, &tokens, &traces, plan.as_ref(), granularity, false)?;
        Ok(v)
    };
    let slice = landscape_slice(&student, &mut loss_fn, a.grid_n, a.seed).map_err(show)?;
    let stem = match &a.out {
        Some(p) => under(wd, p),
        None => wd.join("diagnostics").join("landscape"),
    };
    if let Some(parent) = stem.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_at(parent, e))?;
    }
    let csv_path = stem.with_extension("csv");
    std::fs::write(&csv_path, slice.to_csv()).map_err(|e| io_at(&csv_path, e))?;
    println!("wrote {}", csv_path.display());
    let json_path = stem.with_extension("json");
    write_report(
        &json_path,
        &serde_json::to_value(&slice).map_err(|e| e.to_string())?,
    )
}

fn cmd_diag_ranking(wd: &Path, a: RankingArgs) -> CliResult {
    let student = load_model(&under(wd, &a.ckpt)).map_err(show)?;
    let teacher = load_model(&under(wd, &a.teacher)).map_err(show)?;
    if student.config != teacher.config {
        return Err("student and teacher configurations differ".into());
    }
    let dataset = Dataset::load(&under(wd, &a.data)).map_err(show)?;
    let tokens = probe_tokens(&dataset, a.limit);
    let layers = student.config.num_layers;
    let mut acc = vec![0.0f64; layers];
    for t in &tokens {
        let ts = capture_teacher(&student, t).map_err(show)?;
        let tt = capture_teacher(&teacher, t).map_err(show)?;
        for l in 0..layers {
            acc[l] += ranking_loss_at_layer(&ts, &tt, l).map_err(show)? as f64;
        }
    }
    let per_layer: Vec<f64> = acc.iter().map(|v| v / tokens.len().max(1) as f64).collect();
    let mean = per_layer.iter().sum::<f64>() / layers.max(1) as f64;
    let path = report_path(wd, &a.out, "ranking.json")?;
    write_report(
        &path,
        &serde_json::json!({
            "per_layer": per_layer,
            "mean": mean,
            "examples": tokens.len(),
        }),
    )
}

fn cmd_diag_attention(wd: &Path, a: AttentionArgs) -> CliResult {
    let model = load_model(&under(wd, &a.ckpt)).map_err(show)?;
    let dataset = Dataset::load(&under(wd, &a.data)).map_err(show)?;
    let example: &Example = dataset.dev.get(a.example).ok_or_else(|| {
        show(Error::IndexOutOfRange {
            what: "example",
            index: a.example,
            bound: dataset.dev.len(),
        })
    })?;
    let dump = dump_attention(&model, &example.tokens, a.layer, a.head).map_err(show)?;
    let path = report_path(wd, &a.out, "attention.json")?;
    write_report(&path, &serde_json::to_value(&dump).map_err(|e| e.to_string())?)
}

fn mode_name(mode: Mode) -> String {
    serde_json::to_value(mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| "unknown".into())
}

/// Run `jobs` worker threads over a list of tasks, stopping at the first
/// recorded error. Each task owns its index so outputs never collide.
fn run_pool<T: Sync>(jobs: usize, tasks: &[T], work: impl Fn(&T) -> CliResult + Sync) -> CliResult {
    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<String>> = Mutex::new(Vec::new());
    let workers = jobs.max(1).min(tasks.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if !failures.lock().expect("pool lock").is_empty() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= tasks.len() {
                    return;
                }
                if let Err(e) = work(&tasks[i]) {
                    failures.lock().expect("pool lock").push(e);
                }
            });
        }
    });
    let failures = failures.into_inner().expect("pool lock");
    match failures.into_iter().next() {
        None => Ok(()),
        Some(e) => Err(e),
    }
}

fn cmd_sweep(wd: &Path, a: SweepArgs) -> CliResult {
    let base = load_config(wd, &a.config)?;
    if a.seeds == 0 {
        return Err("/sweep/seeds: must be at least 1".into());
    }
    let modes = a
        .modes
        .split(',')
        .map(|s| parse_mode(s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    if modes.is_empty() {
        return Err("/sweep/modes: must name at least one mode".into());
    }
    let sweep_dir = base.out_dir.join("sweep");

    // stage 1: one teacher per seed, shared by every mode
    let mut teacher_cfgs = Vec::new();
    for seed in 0..a.seeds as u64 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.out_dir = sweep_dir.join(format!("seed{seed}"));
        prepare(&mut cfg, Some(seed))?;
        teacher_cfgs.push(cfg);
    }
    run_pool(a.jobs, &teacher_cfgs, |cfg| {
        train_teacher(cfg).map_err(show)?;
        Ok(())
    })?;

    // stage 2: every mode against its seed's teacher
    struct Cell {
        cfg: RunConfig,
        teacher_dir: PathBuf,
        mode_idx: usize,
        seed_idx: usize,
    }
    let mut cells = Vec::new();
    for (mode_idx, mode) in modes.iter().enumerate() {
        for seed in 0..a.seeds as u64 {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.schedule.mode = *mode;
            cfg.schedule.two_step_enabled = mode.is_ti();
            cfg.out_dir = sweep_dir.join(format!("seed{seed}")).join(mode_name(*mode));
            prepare(&mut cfg, Some(seed))?;
            cells.push(Cell {
                cfg,
                teacher_dir: sweep_dir.join(format!("seed{seed}")).join("teacher"),
                mode_idx,
                seed_idx: seed as usize,
            });
        }
    }
    let metrics: Mutex<Vec<Option<f32>>> = Mutex::new(vec![None; cells.len()]);
    let stride = a.seeds;
    run_pool(a.jobs, &cells, |cell| {
        let (_, rows) = qat(&cell.cfg, &cell.teacher_dir).map_err(show)?;
        let final_dev = rows.last().map(|r| r.eval_metric).unwrap_or(f32::NAN);
        metrics.lock().expect("metrics lock")[cell.mode_idx * stride + cell.seed_idx] =
            Some(final_dev);
        Ok(())
    })?;
    let metrics = metrics.into_inner().expect("metrics lock");

    // stage 3: aggregate into the comparison table
    let mut table = String::from("mode,task,seeds,mean_metric,std\n");
    for (mode_idx, mode) in modes.iter().enumerate() {
        let vals: Vec<f64> = (0..a.seeds)
            .map(|s| metrics[mode_idx * stride + s].expect("cell completed") as f64)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (vals.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        table.push_str(&format!(
            "{},{},{},{},{}\n",
            mode_name(*mode),
            base.data.task.name(),
            a.seeds,
            mean as f32,
            std as f32
        ));
    }
    std::fs::create_dir_all(&sweep_dir).map_err(|e| io_at(&sweep_dir, e))?;
    let table_path = sweep_dir.join("sweep_summary.csv");
    std::fs::write(&table_path, &table).map_err(|e| io_at(&table_path, e))?;
    print!("{table}");
    println!("wrote {}", table_path.display());
    Ok(())
}
