use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use clap::{Args, ValueEnum};
use funedit_core::composer::{
    compose_move, compose_paste, run_composite, scaled_dilation_kernel, CompositeEdit, CompositeEditWire, EdgeMode,
    MoveRequest, PasteRequest,
};
use funedit_core::diffusion::{load_checkpoint, read_checkpoint_header, save_checkpoint, save_trainer, Guidance, SamplerConfig, Trainer};
use funedit_core::eval::{evaluate_dataset, move_cases, EvalOptions, MAX_FAILURE_RATE};
use funedit_core::synthgen::{generate_dataset, read_dataset, read_manifest, write_dataset, AtomicSample, TaskSelection, MANIFEST_FILE};
use funedit_core::taskvocab::TaskId;
use funedit_core::{EditModel, Image, Mask};
use serde_json::json;

use crate::config::RunConfig;
use crate::CliError;

/// File written next to generated datasets with the effective config.
pub const RUN_CONFIG_FILE: &str = "run_config.json";

fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

fn read_file(path: &Path, what: &str) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Runtime(format!("cannot read {what} {}: {e}", path.display())))
}

fn read_image(path: &Path) -> Result<Image, CliError> {
    Ok(Image::from_png_bytes(&read_file(path, "image")?)?)
}

fn read_mask(path: &Path) -> Result<Mask, CliError> {
    Ok(Mask::from_png_bytes(&read_file(path, "mask")?)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<EditModel, CliError> {
    if !ckpt.is_file() {
        return Err(usage(format!("checkpoint {} not found", ckpt.display())));
    }
    Ok(load_checkpoint(ckpt, DType::F32, &Device::Cpu)?.model)
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// OR, EE, HR or all.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(t) = &a.task {
        cfg.data.task = t.clone();
    }
    if let Some(n) = a.n {
        cfg.data.n = n;
    }
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    if cfg.data.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let selection: TaskSelection = cfg.data.task.parse().map_err(|e| usage(format!("--task: {e}")))?;
    let samples = generate_dataset(selection, cfg.data.n, cfg.data.seed);
    write_dataset(&samples, &a.out)?;
    write_json(&a.out.join(RUN_CONFIG_FILE), &cfg.to_json())?;
    println!("{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path, rewritten at every checkpoint interval.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
    /// JSONL training log; defaults to the checkpoint path with a
    /// `.log.jsonl` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from `--out` if it exists.
    #[arg(long)]
    pub resume: bool,
}

/// Tasks present in the data, in canonical order.
fn dataset_tasks(data: &[AtomicSample]) -> Vec<TaskId> {
    TaskId::ALL.into_iter().filter(|t| data.iter().any(|s| s.task == *t)).collect()
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = a.log_every {
        t.log_every = v;
    }
    t.validate().map_err(|e| usage(e.to_string()))?;
    if !a.data.join(MANIFEST_FILE).is_file() {
        return Err(usage(format!("no dataset at {}", a.data.display())));
    }
    let data = read_dataset(&a.data)?;
    if data.is_empty() {
        return Err(CliError::Runtime("dataset is empty".into()));
    }
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.jsonl"));
    let resuming = a.resume && a.out.is_file();
    let mut trainer = if resuming {
        load_checkpoint(&a.out, DType::F32, &Device::Cpu)?.into_trainer(Some(cfg.train))?
    } else {
        let side = data[0].source.width();
        if side != cfg.model.image_size {
            return Err(CliError::Runtime(format!("dataset images are {side} px, model expects {}", cfg.model.image_size)));
        }
        let model = EditModel::init(&cfg.model, &dataset_tasks(&data), cfg.schedule, cfg.train.seed, DType::F32, &Device::Cpu)?;
        Trainer::new(model, cfg.train)?
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut log = OpenOptions::new().create(true).write(true).append(resuming).truncate(!resuming).open(&log_path)?;
    eprintln!(
        "training {} params on {} samples from step {} to {}",
        trainer.model().num_params(),
        data.len(),
        trainer.step(),
        cfg.train.steps
    );
    trainer.run(
        &data,
        |entry| {
            serde_json::to_writer(&mut log, entry)?;
            log.write_all(b"\n")?;
            log.flush()?;
            eprintln!("step {} loss {:.5} ({:.0}s)", entry.step, entry.loss, entry.elapsed_s);
            Ok(())
        },
        |tr| save_trainer(&a.out, tr),
    )?;
    save_trainer(&a.out, &trainer)?;
    println!("{}", a.out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EditOpKind {
    Move,
    Paste,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GuidanceMode {
    Off,
    Dual,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub guidance: Option<GuidanceMode>,
    #[arg(long, default_value_t = 1.5)]
    pub s_img: f64,
    #[arg(long, default_value_t = 7.5)]
    pub s_txt: f64,
}

impl SamplerArgs {
    fn apply(&self, base: &mut SamplerConfig) {
        if let Some(s) = self.steps {
            base.steps = s;
        }
        if let Some(s) = self.seed {
            base.seed = s;
        }
        match self.guidance {
            Some(GuidanceMode::Off) => base.guidance = Guidance::Off,
            Some(GuidanceMode::Dual) => base.guidance = Guidance::Dual { s_img: self.s_img, s_txt: self.s_txt },
            None => {}
        }
    }
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input image; for `raw` it replaces the image embedded in `--ops`.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub op: EditOpKind,
    #[arg(long)]
    pub src_mask: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub dx: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    pub dy: Option<i64>,
    /// Reference image holding the object to paste.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub ref_mask: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub x: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    pub y: Option<i64>,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Composite edit JSON (the wire form shared with the service).
    #[arg(long)]
    pub ops: Option<PathBuf>,
    #[arg(long)]
    pub dilation_kernel: Option<usize>,
    #[arg(long, value_enum)]
    pub edge: Option<EdgeArg>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output PNG; a sidecar `.json` is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EdgeArg {
    Band,
    Full,
}

impl From<EdgeArg> for EdgeMode {
    fn from(e: EdgeArg) -> Self {
        match e {
            EdgeArg::Band => EdgeMode::Band,
            EdgeArg::Full => EdgeMode::Full,
        }
    }
}

fn required<'a, T>(v: &'a Option<T>, flag: &str, op: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| usage(format!("--op {op} requires --{flag}")))
}

fn ops_echo(edit: &CompositeEdit) -> Result<serde_json::Value, CliError> {
    let ops = edit
        .ops
        .iter()
        .map(|op| Ok(json!({ "task": op.task, "area": op.mask.count(), "mask": op.mask.to_base64_png()? })))
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(serde_json::Value::Array(ops))
}

pub fn edit(a: &EditArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(k) = a.dilation_kernel {
        cfg.eval.dilation_kernel = Some(k);
    }
    if let Some(e) = a.edge {
        cfg.eval.edge = e.into();
    }
    let (edit, mut sampler) = match a.op {
        EditOpKind::Move => {
            let image = read_image(required(&a.image, "image", "move")?)?;
            let src_mask = read_mask(required(&a.src_mask, "src-mask", "move")?)?;
            let (dx, dy) = (*required(&a.dx, "dx", "move")?, *required(&a.dy, "dy", "move")?);
            let kernel = cfg.eval.dilation_kernel.unwrap_or_else(|| scaled_dilation_kernel(image.width()));
            (compose_move(&MoveRequest { image, src_mask, dx, dy }, kernel, cfg.eval.edge)?, cfg.sampler)
        }
        EditOpKind::Paste => {
            let target = read_image(required(&a.image, "image", "paste")?)?;
            let reference = read_image(required(&a.reference, "ref", "paste")?)?;
            let ref_mask = read_mask(required(&a.ref_mask, "ref-mask", "paste")?)?;
            let offset = (*required(&a.x, "x", "paste")?, *required(&a.y, "y", "paste")?);
            (compose_paste(&PasteRequest { target, reference, ref_mask, offset, scale: a.scale }, cfg.eval.edge)?, cfg.sampler)
        }
        EditOpKind::Raw => {
            let path = required(&a.ops, "ops", "raw")?;
            let text = String::from_utf8(read_file(path, "ops file")?).map_err(|e| usage(format!("--ops: {e}")))?;
            let mut wire: CompositeEditWire = serde_json::from_str(&text).map_err(|e| usage(format!("--ops: {e}")))?;
            if let Some(p) = &a.image {
                wire.image = read_image(p)?.to_base64_png()?;
            }
            (wire.decode()?, wire.sampler(cfg.sampler.seed))
        }
    };
    a.sampler.apply(&mut sampler);
    sampler.validate().map_err(|e| usage(e.to_string()))?;
    cfg.sampler = sampler;
    let model = load_model(&a.ckpt)?;
    let start = Instant::now();
    let (out, nfe) = run_composite(&model.denoiser, &model.conditioner(), &edit, &sampler, &model.schedule)?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, out.to_png_bytes()?)?;
    let sidecar = json!({
        "nfe": nfe,
        "latency_ms": latency_ms,
        "ops": ops_echo(&edit)?,
        "sampler": sampler,
        "config": cfg.to_json(),
    });
    write_json(&a.out.with_extension("json"), &sidecar)?;
    println!("{}", a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Atomic test set written by `gen-data`; generated held-out samples
    /// are used when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub per_task: Option<usize>,
    #[arg(long)]
    pub moves: Option<usize>,
    #[arg(long)]
    pub sequential: bool,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// `per_task` held-out samples for each task, one seed stream per task.
pub fn held_out_samples(tasks: &[TaskId], per_task: usize, seed: u64) -> Vec<(String, AtomicSample)> {
    let mut out = Vec::with_capacity(tasks.len() * per_task);
    for (j, &t) in TaskId::ALL.iter().enumerate() {
        if !tasks.contains(&t) {
            continue;
        }
        for (i, s) in generate_dataset(TaskSelection::One(t), per_task, seed.wrapping_add(j as u64)).into_iter().enumerate() {
            out.push((format!("{t}-{i:04}"), s));
        }
    }
    out
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(n) = a.per_task {
        cfg.eval.per_task = n;
    }
    if let Some(n) = a.moves {
        cfg.eval.moves = n;
    }
    if a.sequential {
        cfg.eval.sequential = true;
    }
    a.sampler.apply(&mut cfg.sampler);
    cfg.sampler.validate().map_err(|e| usage(e.to_string()))?;
    let model = load_model(&a.ckpt)?;
    let atomic = match &a.data {
        Some(dir) => {
            if !dir.join(MANIFEST_FILE).is_file() {
                return Err(usage(format!("no dataset at {}", dir.display())));
            }
            let ids = read_manifest(dir)?.entries.into_iter().map(|e| e.id);
            ids.zip(read_dataset(dir)?).collect()
        }
        None => held_out_samples(model.vocab.tasks(), cfg.eval.per_task, cfg.eval.data_seed),
    };
    let moves = if model.vocab.contains(TaskId::Removal) && model.vocab.contains(TaskId::EdgeEnhance) {
        move_cases(cfg.eval.moves, cfg.eval.move_seed, model.image_size())
    } else {
        Vec::new()
    };
    let opts = EvalOptions {
        sampler: cfg.sampler,
        dilation_kernel: cfg.eval.dilation_kernel,
        edge: cfg.eval.edge,
        sequential: cfg.eval.sequential,
    };
    let header = read_checkpoint_header(&a.ckpt)?;
    let echo = json!({ "run": cfg.to_json(), "checkpoint": a.ckpt.display().to_string(), "checkpoint_step": header.train.map(|t| t.step) });
    let report = evaluate_dataset(&model, &atomic, &moves, &opts, echo)?;
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(&a.report, &report)?;
    for kind in ["atomic:OR", "atomic:EE", "atomic:HR", "move"] {
        let line: Vec<String> = ["psnr_gain", "psnr_bg", "psnr_obj", "removed"]
            .iter()
            .filter_map(|m| report.aggregate_for(kind, m).map(|g| format!("{m} {:.2}±{:.2}", g.mean, g.std)))
            .collect();
        if !line.is_empty() {
            println!("{kind}: {}", line.join(", "));
        }
    }
    println!("failures {}/{}", report.failures, report.records.len());
    if report.failure_rate() > MAX_FAILURE_RATE {
        return Err(CliError::Runtime(format!("{} of {} cases failed", report.failures, report.records.len())));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Writes the model without optimizer state.
pub fn export(a: &ExportArgs) -> Result<(), CliError> {
    let model = load_model(&a.ckpt)?;
    save_checkpoint(&a.out, &model, None)?;
    println!("{}", a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Seed for `/samples` and for requests without a `seed` field.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Allowed CORS origin; any origin when absent.
    #[arg(long)]
    pub cors_origin: Option<String>,
}

pub fn serve(a: &ServeArgs) -> Result<(), CliError> {
    if !a.ckpt.is_file() {
        return Err(usage(format!("checkpoint {} not found", a.ckpt.display())));
    }
    let opts = funedit_service::ServeOptions {
        checkpoint: a.ckpt.clone(),
        host: a.host.clone(),
        port: a.port,
        seed: a.seed,
        cors_origin: a.cors_origin.clone(),
    };
    funedit_service::serve_blocking(opts).map_err(|e| CliError::Runtime(e.to_string()))
}
