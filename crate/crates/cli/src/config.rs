use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use streamdiff::diffusion::{build_schedule, GuidanceConfig, NoiseSchedule};
use streamdiff::memory::Strategy;
use streamdiff::model::DenoiserConfig;
use streamdiff::train::TrainConfig;
use streamdiff::video::VideoSpec;

use crate::CliError;

/// Everything a command needs; one file plus flag overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Record wall-clock latencies. Off makes every output byte-reproducible.
    pub timing: bool,
    /// Re-grids loaded checkpoints for edit-stream and bench, e.g. "16x16".
    pub memory_grid: Option<String>,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceSection,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    pub edit: EditConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            timing: true,
            memory_grid: None,
            model: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            guidance: GuidanceSection::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
            edit: EditConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Linear betas over `model.total_steps`; unset ends use the scaled default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub lambda: f32,
    /// Explicit step subset; otherwise `count` evenly spaced steps.
    pub steps: Option<Vec<usize>>,
    pub count: usize,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            steps: None,
            count: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub videos: usize,
    pub frames: usize,
    /// Explicit videos; when non-empty they replace the random ones.
    pub specs: Vec<VideoSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            videos: 64,
            frames: 64,
            specs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory; training generates one in memory when unset.
    pub dataset: Option<PathBuf>,
    /// Phase-1 result, required by the memory phase.
    pub base_checkpoint: Option<PathBuf>,
    /// Training state to continue from.
    pub resume: Option<PathBuf>,
    /// Model used by edit-stream and bench.
    pub checkpoint: Option<PathBuf>,
    /// edit-stream input: a dataset directory, a file of SVDT frames, or `-`.
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub strategy: Strategy,
    /// Target prompt; dataset inputs default to the next palette color.
    pub prompt: Option<usize>,
    /// Which dataset video to stream.
    pub video: usize,
    pub memory_free_inversion: bool,
    /// Clamp predicted clean frames to the pixel range at every step.
    pub clip_x0: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Svdiff,
            prompt: None,
            video: 0,
            memory_free_inversion: false,
            clip_x0: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub strategies: Vec<Strategy>,
    /// One held-out video per seed.
    pub seeds: Vec<u64>,
    pub frames: usize,
    /// Memory grids as "HxW"; empty means the checkpoint's own grid.
    pub memory_grids: Vec<String>,
    /// Checkpoints trained at a specific grid, keyed "HxW".
    pub grid_checkpoints: BTreeMap<String, PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            seeds: (1..=5).collect(),
            frames: 32,
            memory_grids: Vec::new(),
            grid_checkpoints: BTreeMap::new(),
        }
    }
}

pub fn parse_grid(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Validation(format!("memory grid must look like 8x8, got `{s}`"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn schedule(&self) -> streamdiff::Result<NoiseSchedule> {
        let total = self.model.total_steps;
        match (self.schedule.beta_start, self.schedule.beta_end) {
            (None, None) => NoiseSchedule::scaled_linear(total),
            (start, end) => {
                let default = NoiseSchedule::scaled_linear(total)?;
                let betas: Vec<f64> = default.alphas().iter().map(|a| 1.0 - a).collect();
                build_schedule(
                    total,
                    start.unwrap_or(betas[0]),
                    end.unwrap_or(*betas.last().unwrap()),
                )
            }
        }
    }

    pub fn guidance(&self) -> streamdiff::Result<GuidanceConfig> {
        let total = self.model.total_steps;
        match &self.guidance.steps {
            Some(steps) => GuidanceConfig::new(self.guidance.lambda, steps.clone(), total),
            None => GuidanceConfig::evenly_spaced(self.guidance.lambda, self.guidance.count, total),
        }
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.schedule()?;
        self.guidance()?;
        self.train.validate()?;
        if self.data.frames < 1 {
            return Err(CliError::Validation("data.frames must be >= 1".into()));
        }
        if self.data.videos < 1 && self.data.specs.is_empty() {
            return Err(CliError::Validation("data.videos must be >= 1".into()));
        }
        for spec in &self.data.specs {
            spec.validate()?;
        }
        if self.bench.frames < 2 {
            return Err(CliError::Validation("bench.frames must be >= 2".into()));
        }
        if self.bench.seeds.is_empty() || self.bench.strategies.is_empty() {
            return Err(CliError::Validation(
                "bench needs at least one seed and one strategy".into(),
            ));
        }
        let grids = self
            .bench
            .memory_grids
            .iter()
            .chain(self.bench.grid_checkpoints.keys());
        for g in grids.chain(&self.memory_grid) {
            parse_grid(g)?;
        }
        Ok(())
    }
}
