//! Command implementations behind the `streamdiff` binary.

pub mod config;

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;
use streamdiff::editor::{open_session, SessionOptions};
use streamdiff::memory::Strategy;
use streamdiff::metrics::{
    comparison_csv, edit_target, emit_report, evaluate_stream, measure_state_size, ReportFormat,
};
use streamdiff::model::Denoiser;
use streamdiff::svdt::{self, TensorArchive};
use streamdiff::train::{
    train_base, train_memory_segment_level, Adam, Phase, TrainReport, TrainState,
};
use streamdiff::video::{
    generate_video, random_videos, read_dataset, write_dataset, LabeledVideo, Manifest, VideoSpec,
};
use streamdiff::{Error, SeedTree};

pub use config::RunConfig;

/// Exit code 1 for anything caught before work starts, 2 for failures during it.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::OutOfRange { .. } | Error::InvalidAttr { .. } => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "streamdiff",
    version,
    about = "Streaming video editing with a compact temporal memory"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// none, svdiff, window_kv, temporal_shift, sliding_window or linear_attention.
    #[arg(long, global = true)]
    pub strategy: Option<Strategy>,
    /// Guidance scale.
    #[arg(long, global = true)]
    pub lambda: Option<f32>,
    /// Comma-separated denoising steps, e.g. 33,66,100.
    #[arg(long, global = true)]
    pub steps: Option<String>,
    /// Memory grid as HxW.
    #[arg(long, global = true)]
    pub memory_grid: Option<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Gen,
    /// Train the base denoiser or the memory, per `train.phase`.
    Train,
    /// Edit a stream of frames one at a time.
    EditStream,
    /// Compare strategies on held-out videos.
    Bench,
    /// Summarize a checkpoint, bank snapshot, dataset or tensor file.
    Inspect { path: PathBuf },
}

impl Cli {
    /// Config file (or defaults) with flags applied on top, validated.
    pub fn resolve_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(s) = self.strategy {
            cfg.edit.strategy = s;
        }
        if let Some(l) = self.lambda {
            cfg.guidance.lambda = l;
        }
        if let Some(list) = &self.steps {
            let steps = list
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| {
                    CliError::Validation(format!("--steps expects integers, got `{list}`"))
                })?;
            let mut steps = steps;
            steps.sort_unstable();
            cfg.guidance.steps = Some(steps);
        }
        if let Some(g) = &self.memory_grid {
            cfg.memory_grid = Some(g.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses arguments and runs the chosen command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Inspect { path } = &cli.command {
        println!(
            "{}",
            serde_json::to_string_pretty(&cmd_inspect(path)?).map_err(Error::from)?
        );
        return Ok(());
    }
    let cfg = cli.resolve_config()?;
    match cli.command {
        Command::Gen => cmd_gen(&cfg).map(|_| ()),
        Command::Train => cmd_train(&cfg).map(|_| ()),
        Command::EditStream => cmd_edit(&cfg).map(|_| ()),
        Command::Bench => cmd_bench(&cfg).map(|_| ()),
        Command::Inspect { .. } => unreachable!("handled above"),
    }
}

fn data_seeds(cfg: &RunConfig) -> SeedTree {
    SeedTree::new(cfg.seed).child("data", 0)
}

/// The configured videos: explicit specs, or random ones from the run seed.
pub fn build_videos(cfg: &RunConfig) -> Result<Vec<LabeledVideo>, CliError> {
    if cfg.data.specs.is_empty() {
        Ok(random_videos(
            &data_seeds(cfg),
            0,
            cfg.data.videos,
            cfg.data.frames,
            cfg.model.image_size,
        )?)
    } else {
        Ok(cfg
            .data
            .specs
            .iter()
            .map(generate_video)
            .collect::<streamdiff::Result<_>>()?)
    }
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let videos = build_videos(cfg)?;
    let dir = cfg.out.join("dataset");
    write_dataset(&videos, &dir)?;
    eprintln!("wrote {} videos to {}", videos.len(), dir.display());
    Ok(dir)
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    let p = path
        .as_deref()
        .ok_or_else(|| CliError::Validation(format!("{what} is required")))?;
    if p != Path::new("-") && !p.exists() {
        return Err(CliError::Validation(format!(
            "{what} {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

/// Model from a training checkpoint, re-gridded when `memory_grid` is set.
pub fn load_model(path: &Path, grid: Option<&str>) -> Result<Denoiser, CliError> {
    let (state, _) = TrainState::from_archive(TensorArchive::load(path)?)?;
    match grid {
        Some(g) => {
            let (h, w) = config::parse_grid(g)?;
            Ok(state.model.with_memory_grid(h, w)?)
        }
        None => Ok(state.model),
    }
}

pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub report: TrainReport,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutputs, CliError> {
    let phase = cfg.train.phase;
    let mut state = match (&cfg.paths.resume, phase) {
        (Some(_), _) => {
            let path = require(&cfg.paths.resume, "paths.resume")?;
            let (state, saved) = TrainState::from_archive(TensorArchive::load(path)?)?;
            if saved != Some(phase) {
                return Err(CliError::Validation(format!(
                    "{} is not a {phase:?}-phase checkpoint",
                    path.display()
                )));
            }
            state
        }
        (None, Phase::Base) => {
            TrainState::new(Denoiser::new(cfg.model.clone(), &SeedTree::new(cfg.seed))?)
        }
        (None, Phase::Memory) => {
            let path = require(
                &cfg.paths.base_checkpoint,
                "the memory phase needs paths.base_checkpoint; it",
            )?;
            let (mut state, _) = TrainState::from_archive(TensorArchive::load(path)?)?;
            state.step = 0;
            state.losses.clear();
            state.adam = Adam::new();
            state
        }
    };
    let videos = match &cfg.paths.dataset {
        Some(dir) => read_dataset(dir)?,
        None => build_videos(cfg)?,
    };
    let schedule = cfg.schedule()?;
    let every = (cfg.train.steps / 20).max(1);
    let mut log = |s: &TrainState| {
        if s.step % every == 0 || s.step == cfg.train.steps {
            eprintln!(
                "{phase:?} step {}/{} loss {:.5}",
                s.step,
                cfg.train.steps,
                s.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Ok(())
    };
    let mut report = match phase {
        Phase::Base => train_base(&mut state, &videos, &cfg.train, &schedule, Some(&mut log))?,
        Phase::Memory => {
            let steps = cfg.guidance()?.steps;
            train_memory_segment_level(
                &mut state,
                &videos,
                &cfg.train,
                &schedule,
                &steps,
                Some(&mut log),
            )?
        }
    };
    let tag = match phase {
        Phase::Base => "base",
        Phase::Memory => "memory",
    };
    fs::create_dir_all(&cfg.out)?;
    let checkpoint = cfg.out.join(format!("checkpoint_{tag}.svdi"));
    state.to_archive(phase)?.save(&checkpoint)?;
    report.checkpoint = Some(checkpoint.display().to_string());
    if !cfg.timing {
        report.wall_clock_s = 0.0;
    }
    fs::write(
        cfg.out.join(format!("train_report_{tag}.json")),
        serde_json::to_string_pretty(&report).map_err(Error::from)?,
    )?;
    fs::write(cfg.out.join(format!("loss_{tag}.csv")), report.loss_csv())?;
    Ok(TrainOutputs { checkpoint, report })
}

/// Frames from a dataset video, a file of concatenated SVDT tensors, or stdin.
enum FrameSource {
    Dataset(std::vec::IntoIter<streamdiff::Tensor>),
    Stream(Box<dyn Read>, u64),
}

impl FrameSource {
    fn next_frame(&mut self) -> Result<Option<streamdiff::Tensor>, CliError> {
        match self {
            FrameSource::Dataset(it) => Ok(it.next()),
            FrameSource::Stream(r, offset) => {
                let t = svdt::read_tensor(r, *offset)?;
                if let Some(t) = &t {
                    *offset += svdt::encode(t).len() as u64;
                }
                Ok(t)
            }
        }
    }
}

pub struct EditOutputs {
    pub frames: PathBuf,
    pub diagnostics: PathBuf,
    pub count: usize,
}

pub fn cmd_edit(cfg: &RunConfig) -> Result<EditOutputs, CliError> {
    let model = load_model(
        require(&cfg.paths.checkpoint, "paths.checkpoint")?,
        cfg.memory_grid.as_deref(),
    )?;
    let input = require(&cfg.paths.input, "paths.input")?;
    let (mut source, prompt) = if input.is_dir() {
        let mut videos = read_dataset(input)?;
        if cfg.edit.video >= videos.len() {
            return Err(CliError::Validation(format!(
                "edit.video {} but dataset holds {}",
                cfg.edit.video,
                videos.len()
            )));
        }
        let video = videos.swap_remove(cfg.edit.video);
        let prompt = cfg
            .edit
            .prompt
            .unwrap_or_else(|| edit_target(video.prompt()));
        (FrameSource::Dataset(video.frames.into_iter()), prompt)
    } else {
        let prompt = cfg.edit.prompt.ok_or_else(|| {
            CliError::Validation("edit.prompt is required for raw frame input".into())
        })?;
        let reader: Box<dyn Read> = if input == Path::new("-") {
            Box::new(BufReader::new(std::io::stdin()))
        } else {
            Box::new(BufReader::new(File::open(input)?))
        };
        (FrameSource::Stream(reader, 0), prompt)
    };
    let options = SessionOptions {
        memory_free_inversion: cfg.edit.memory_free_inversion,
        clip_x0: cfg.edit.clip_x0,
    };
    let mut session = open_session(
        &model,
        &cfg.schedule()?,
        &cfg.guidance()?,
        prompt,
        cfg.edit.strategy,
        options,
    )?;
    fs::create_dir_all(&cfg.out)?;
    let frames_path = cfg.out.join("edited.svdts");
    let diag_path = cfg.out.join("diagnostics.jsonl");
    let mut frames_out = BufWriter::new(File::create(&frames_path)?);
    let mut diag_out = BufWriter::new(File::create(&diag_path)?);
    let mut count = 0;
    while let Some(frame) = source.next_frame()? {
        let r = session.process_frame(&frame)?;
        svdt::write_tensor(&mut frames_out, &r.frame)?;
        let line = json!({
            "frame": r.index,
            "flops": r.flops,
            "latency_s": if cfg.timing { r.latency_s } else { 0.0 },
            "eps_norms": r.eps_norms,
            "state_size": measure_state_size(&session),
        });
        writeln!(diag_out, "{line}")?;
        count += 1;
    }
    frames_out.flush()?;
    diag_out.flush()?;
    if session.strategy() == Strategy::Svdiff {
        session.snapshot()?.save(cfg.out.join("bank.svdi"))?;
    }
    eprintln!("edited {count} frames into {}", frames_path.display());
    Ok(EditOutputs {
        frames: frames_path,
        diagnostics: diag_path,
        count,
    })
}

/// The held-out video for one bench seed; disjoint from training data streams.
pub fn bench_video(
    seed: u64,
    frames: usize,
    image_size: usize,
) -> streamdiff::Result<LabeledVideo> {
    generate_video(&VideoSpec::random(
        &SeedTree::new(seed).child("bench", 0),
        0,
        frames,
        image_size,
    ))
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let main = require(&cfg.paths.checkpoint, "paths.checkpoint")?;
    let grids: Vec<Option<String>> = if cfg.bench.memory_grids.is_empty() {
        vec![cfg.memory_grid.clone()]
    } else {
        cfg.bench.memory_grids.iter().cloned().map(Some).collect()
    };
    let mut models = Vec::new();
    for g in &grids {
        let model = match g.as_ref().and_then(|g| cfg.bench.grid_checkpoints.get(g)) {
            Some(path) => load_model(require(&Some(path.clone()), "grid checkpoint")?, None)?,
            None => load_model(main, g.as_deref())?,
        };
        models.push(model);
    }
    let schedule = cfg.schedule()?;
    let guidance = cfg.guidance()?;
    let dir = cfg.out.join("bench");
    fs::create_dir_all(&dir)?;
    let mut reports = Vec::new();
    for &seed in &cfg.bench.seeds {
        let video = bench_video(seed, cfg.bench.frames, models[0].cfg.image_size)?;
        let target = edit_target(video.prompt());
        for model in &models {
            let grid = format!("{}x{}", model.cfg.memory_h, model.cfg.memory_w);
            for &strategy in &cfg.bench.strategies {
                let name = format!("seed{seed}@{grid}");
                let options = SessionOptions {
                    memory_free_inversion: cfg.edit.memory_free_inversion,
                    clip_x0: cfg.edit.clip_x0,
                };
                let mut run = evaluate_stream(
                    model, &schedule, &guidance, &video, &name, target, strategy, options,
                )?;
                if !cfg.timing {
                    run.report.frames.iter_mut().for_each(|f| f.seconds = 0.0);
                }
                emit_report(
                    &run.report,
                    dir.join(format!("{strategy}_{name}.json")),
                    ReportFormat::Json,
                )?;
                eprintln!(
                    "{name} {strategy}: tem_con {:.4} edit_err {:.4}",
                    run.report.tem_con_adjacent, run.report.edit_err
                );
                reports.push(run.report);
            }
        }
    }
    let table = cfg.out.join("comparison.csv");
    fs::write(&table, comparison_csv(&reports)?)?;
    Ok(table)
}

/// JSON summary of whatever lives at `path`.
pub fn cmd_inspect(path: &Path) -> Result<serde_json::Value, CliError> {
    if path.is_dir() {
        let manifest: Manifest =
            serde_json::from_slice(&fs::read(path.join("manifest.json"))?).map_err(Error::from)?;
        let prompts: Vec<usize> = manifest.videos.iter().map(|v| v.prompt).collect();
        let frames: Vec<usize> = manifest.videos.iter().map(|v| v.spec.frames).collect();
        return Ok(
            json!({ "kind": "dataset", "version": manifest.version, "videos": manifest.videos.len(), "prompts": prompts, "frames": frames }),
        );
    }
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"SVDT") {
        let t = svdt::decode(&bytes)?;
        return Ok(json!({ "kind": "tensor", "shape": t.shape() }));
    }
    let ar = TensorArchive::from_bytes(&bytes)?;
    match ar.meta.get("kind").and_then(|k| k.as_str()) {
        Some("checkpoint") => {
            let meta = ar.meta.clone();
            let (state, phase) = TrainState::from_archive(ar)?;
            let store = &state.model.store;
            Ok(json!({
                "kind": "checkpoint",
                "phase": phase,
                "step": state.step,
                "config": meta.get("config"),
                "tensors": store.len(),
                "base_scalars": store.scalar_count(Some(streamdiff::nn::ParamGroup::Base)),
                "memory_scalars": store.scalar_count(Some(streamdiff::nn::ParamGroup::Memory)),
                "last_loss": state.losses.last(),
            }))
        }
        Some("memory_bank") => {
            let scalars: usize = ar.entries.iter().map(|(_, t, _)| t.numel()).sum();
            let sites: Vec<&str> = ar.entries.iter().map(|(n, _, _)| n.as_str()).collect();
            Ok(json!({
                "kind": "memory_bank",
                "strategy": ar.meta.get("strategy"),
                "grid": [ar.meta.get("h"), ar.meta.get("w")],
                "frames_processed": ar.meta.get("frames_processed"),
                "sites": sites,
                "scalars": scalars,
            }))
        }
        other => Err(CliError::Validation(format!(
            "unrecognized archive kind {other:?}"
        ))),
    }
}
