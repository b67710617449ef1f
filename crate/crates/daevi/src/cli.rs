//! `daevi` subcommands.
//!
//! Machine-readable output goes to stdout as one JSON object per line, each
//! tagged with a `record` field; progress and tables for people go to
//! stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use daevi_core::config::RunConfig;
use daevi_core::data::{generate_clip, generate_masks, mse_crop, psnr_crop, ssim_crop, SyntheticScene};
use daevi_core::gradcheck;
use daevi_core::inference::{inpaint_video, plan_windows, InferenceMode};
use daevi_core::rng::SplitMix64;
use daevi_core::training::{Dataset, LossReport, Sample, Trainer};
use serde_json::json;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{self as cfgload, hash_hex};
use crate::container::{read_clip, write_clip};
use crate::{pnm, Error, Result};

pub const CLIP_FILE: &str = "clip.dvt";
pub const DEPTH_FILE: &str = "depth.dvt";
pub const MASK_FILE: &str = "mask.dvt";
pub const CHECKPOINT_FILE: &str = "checkpoint.dvck";

#[derive(Debug, Parser)]
#[command(name = "daevi", version, about = "Depth-aware endoscopic video inpainting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `training.iterations=10`; repeatable.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Offline,
    Online,
}

impl From<Mode> for InferenceMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Offline => InferenceMode::Offline,
            Mode::Online => InferenceMode::Online,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic clip, its depth and a corruption mask.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also export PPM/PGM frame directories.
        #[arg(long)]
        pnm: bool,
    },
    /// Train on synthetic clips, or on a directory written by `synth`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Inpaint a clip with a trained checkpoint.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Offline)]
        mode: Mode,
    },
    /// Crop metrics of a prediction against ground truth.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Backward-versus-finite-difference checks of every primitive and module.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = gradcheck::DEFAULT_SEEDS)]
        seeds: u64,
        /// Run only the named checks; repeatable.
        #[arg(long)]
        only: Vec<String>,
    },
}

struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Io<'_> {
    fn record(&mut self, v: serde_json::Value) -> Result<()> {
        writeln!(self.out, "{v}").map_err(|e| Error::io("<stdout>", e))
    }

    fn note(&mut self, text: &str) {
        let _ = writeln!(self.err, "{text}");
    }
}

fn print_config(io: &mut Io, cfg: &RunConfig) -> Result<()> {
    io.record(json!({ "record": "config", "hash": hash_hex(cfg), "config": cfg }))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Seed of synthetic clip `i` of a dataset.
pub fn scene_seed(cfg: &RunConfig, i: u64) -> u64 {
    SplitMix64::derive(cfg.data.scene_seed, i).next_u64()
}

fn synth(io: &mut Io, cfg: &RunConfig, out: &Path, export: bool) -> Result<()> {
    let d = &cfg.data;
    let (frames, depth) = generate_clip(&SyntheticScene::from_seed(scene_seed(cfg, 0)), d.clip_frames, d.height, d.width)?;
    let mask = generate_masks(&d.mask, d.clip_frames, d.height, d.width)?;
    create_dir(out)?;
    for (name, clip) in [(CLIP_FILE, &frames), (DEPTH_FILE, &depth), (MASK_FILE, &mask)] {
        let path = out.join(name);
        write_clip(&path, clip)?;
        io.record(json!({
            "record": "artifact",
            "path": path.display().to_string(),
            "frames": clip.frames, "channels": clip.channels, "height": clip.height, "width": clip.width,
        }))?;
    }
    if export {
        pnm::export_frames(&out.join("frames"), &frames)?;
        pnm::export_frames(&out.join("depth"), &depth)?;
        pnm::export_frames(&out.join("mask"), &mask)?;
    }
    let corrupted = mask.data.iter().filter(|&&v| v < 0.5).count() as f64 / mask.data.len() as f64;
    io.note(&format!("wrote {} frames of {}×{} to {} (corrupted fraction {corrupted:.4})", d.clip_frames, d.height, d.width, out.display()));
    Ok(())
}

fn load_dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset> {
    let Some(dir) = data else {
        return Ok(Dataset::synthetic(&cfg.data)?);
    };
    let frames = read_clip(&dir.join(CLIP_FILE))?;
    let depth = read_clip(&dir.join(DEPTH_FILE))?;
    let mask_path = dir.join(MASK_FILE);
    let mask = if mask_path.exists() { Some(read_clip(&mask_path)?) } else { None };
    if frames.channels != 3 || depth.channels != 1 || !frames.same_extent(&depth) {
        return Err(Error::Core(daevi_core::Error::Data("training clip and depth must be 3- and 1-channel clips of one extent".into())));
    }
    Ok(Dataset { samples: vec![Sample { frames, depth, mask }], mask_spec: cfg.data.mask.clone() })
}

pub fn loss_record(r: &LossReport) -> serde_json::Value {
    json!({
        "record": "loss",
        "iteration": r.iteration,
        "l_d": r.l_d, "l_i": r.l_i, "l_gen": r.l_gen, "l_p": r.l_p, "l_s": r.l_s,
        "total": r.total,
        "l_ded": r.l_ded,
    })
}

fn save_checkpoint(io: &mut Io, trainer: &Trainer<f32>, path: &Path) -> Result<()> {
    checkpoint::save(path, &Checkpoint { config: trainer.config.clone(), state: trainer.export_state() })?;
    io.record(json!({ "record": "checkpoint", "iteration": trainer.iteration, "path": path.display().to_string() }))
}

fn train(io: &mut Io, args: &ConfigArgs, out: &Path, data: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let (cfg, state) = match resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            let text = read_optional(args.config.as_deref())?;
            (cfgload::resolve_from(ck.config, text.as_deref(), &args.overrides, None)?, Some(ck.state))
        }
        None => (cfgload::load(args.config.as_deref(), &args.overrides)?, None),
    };
    print_config(io, &cfg)?;
    let dataset = load_dataset(&cfg, data)?;
    let mut trainer = Trainer::<f32>::new(cfg.clone())?;
    if let Some(s) = state {
        trainer.import_state(s)?;
    }
    create_dir(out)?;
    let start = Instant::now();
    let every = cfg.training.checkpoint_every;
    while trainer.iteration < cfg.training.iterations {
        let batch = trainer.next_batch(&dataset)?;
        let report = trainer.train_step(&batch)?;
        io.record(loss_record(&report))?;
        if report.iteration % 50 == 0 {
            io.note(&format!(
                "iter {:>6}  total {:.5}  l_i {:.5}  l_ded {:.4}  {:.1}s",
                report.iteration,
                report.total,
                report.l_i,
                report.l_ded,
                start.elapsed().as_secs_f64()
            ));
        }
        if every > 0 && trainer.iteration % every == 0 && trainer.iteration < cfg.training.iterations {
            save_checkpoint(io, &trainer, &out.join(format!("checkpoint-{:06}.dvck", trainer.iteration)))?;
        }
    }
    save_checkpoint(io, &trainer, &out.join(CHECKPOINT_FILE))
}

fn read_optional(path: Option<&Path>) -> Result<Option<String>> {
    path.map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e))).transpose()
}

fn infer(io: &mut Io, args: &ConfigArgs, ck_path: &Path, input: &Path, mask: &Path, out: &Path, mode: Mode) -> Result<()> {
    let ck = checkpoint::load(ck_path)?;
    let text = read_optional(args.config.as_deref())?;
    let cfg = cfgload::resolve_from(ck.config, text.as_deref(), &args.overrides, None)?;
    print_config(io, &cfg)?;
    let mut trainer = Trainer::<f32>::new(cfg.clone())?;
    trainer.import_state(ck.state)?;
    let frames = read_clip(input)?;
    let masks = read_clip(mask)?;
    let windows = plan_windows(frames.frames, &cfg.inference, mode.into(), cfg.seed)?;
    let mut records = Vec::with_capacity(windows.len());
    let mut last = Instant::now();
    let result = inpaint_video(&trainer.generator, &trainer.gen_params, cfg.model.grid(), &frames, &masks, &windows, |i, w, _| {
        let now = Instant::now();
        records.push(json!({
            "record": "window",
            "index": i,
            "mode": match mode { Mode::Offline => "offline", Mode::Online => "online" },
            "targets": w.targets,
            "written": w.write,
            "references": w.references,
            "seconds": (now - last).as_secs_f64(),
        }));
        last = now;
    })?;
    for r in records {
        io.record(r)?;
    }
    write_clip(out, &result)?;
    io.record(json!({ "record": "artifact", "path": out.display().to_string(), "frames": result.frames }))?;
    io.note(&format!("inpainted {} frames in {} windows ({:?} mode)", result.frames, windows.len(), mode));
    Ok(())
}

fn eval(io: &mut Io, pred: &Path, truth: &Path, mask: &Path) -> Result<()> {
    let (p, t, m) = (read_clip(pred)?, read_clip(truth)?, read_clip(mask)?);
    let mse = mse_crop(&p, &t, &m)?;
    let psnr = psnr_crop(&p, &t, &m)?;
    let ssim = ssim_crop(&p, &t, &m)?;
    io.record(json!({ "record": "metrics", "psnr_crop": psnr, "ssim_crop": ssim, "mse_crop": mse }))?;
    io.note(&format!("{:<10} {:>12}\n{:<10} {:>12.4}\n{:<10} {:>12.4}\n{:<10} {:>12.4}", "metric", "value", "PSNR(dB)", psnr, "SSIM", ssim, "MSE", mse));
    Ok(())
}

fn run_gradcheck(io: &mut Io, seeds: u64, only: &[String]) -> Result<()> {
    let suite = gradcheck::default_suite();
    if let Some(bad) = only.iter().find(|n| !suite.iter().any(|c| c.name == n.as_str())) {
        return Err(Error::Usage(format!("no gradient check named {bad}")));
    }
    let mut failed = Vec::new();
    for check in suite.iter().filter(|c| only.is_empty() || only.iter().any(|n| n == c.name)) {
        let r = gradcheck::run_check(check, seeds)?;
        io.record(json!({
            "record": "gradcheck",
            "name": r.name,
            "seeds": r.seeds,
            "max_rel_error": r.max_rel_error,
            "tolerance": gradcheck::TOLERANCE,
            "passed": r.passed,
        }))?;
        io.note(&format!("{:<34} {:>10.3e}  {}", r.name, r.max_rel_error, if r.passed { "pass" } else { "FAIL" }));
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

fn dispatch(io: &mut Io, cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, out, pnm } => {
            let c = cfgload::load(cfg.config.as_deref(), &cfg.overrides)?;
            print_config(io, &c)?;
            synth(io, &c, &out, pnm)
        }
        Command::Train { cfg, out, data, resume } => train(io, &cfg, &out, data.as_deref(), resume.as_deref()),
        Command::Infer { cfg, checkpoint, input, mask, out, mode } => infer(io, &cfg, &checkpoint, &input, &mask, &out, mode),
        Command::Eval { cfg, pred, truth, mask } => {
            let c = cfgload::load(cfg.config.as_deref(), &cfg.overrides)?;
            print_config(io, &c)?;
            eval(io, &pred, &truth, &mask)
        }
        Command::Gradcheck { cfg, seeds, only } => {
            let c = cfgload::load(cfg.config.as_deref(), &cfg.overrides)?;
            print_config(io, &c)?;
            run_gradcheck(io, seeds, &only)
        }
    }
}

/// Run one invocation and return its exit status.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    let mut io = Io { out, err };
    match dispatch(&mut io, cli) {
        Ok(()) => 0,
        Err(e) => {
            io.note(&format!("error: {e}"));
            e.exit_code()
        }
    }
}
