//! Phase 1 trains the image denoiser on single frames. Phase 2 freezes it
//! and trains only the memory parameters clip by clip over long videos.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, recon_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::memory::{Branch, Strategy};
use crate::model::{patchify, Denoiser, StreamCtx};
use crate::nn::{ParamGroup, NULL_PROMPT};
use crate::rng::{gaussian_tensor, SeedTree};
use crate::svdt::TensorArchive;
use crate::tensor::{Gradients, Tape, Tensor};
use crate::video::{split_into_clips, LabeledVideo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Memory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub lr: f32,
    pub steps: usize,
    /// Frames per step in phase 1; phase 2 always uses one video.
    pub batch_size: usize,
    pub clip_len: usize,
    pub video_len: usize,
    pub seed: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    /// Probability of training on the null prompt.
    pub prompt_dropout: f32,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Base,
            lr: 1e-4,
            steps: 2000,
            batch_size: 8,
            clip_len: 8,
            video_len: 64,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            prompt_dropout: 0.1,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.lr));
        }
        if self.steps == 0 || self.batch_size == 0 || self.clip_len == 0 || self.video_len == 0 {
            return bad("steps, batch_size, clip_len and video_len must be positive".into());
        }
        if self.clip_len > self.video_len {
            return bad(format!(
                "clip_len {} exceeds video_len {}",
                self.clip_len, self.video_len
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
        {
            return bad("Adam moments must lie in [0, 1) and eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) || !(self.grad_clip >= 0.0) {
            return bad("prompt_dropout must lie in [0, 1] and grad_clip must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: Phase,
    pub losses: Vec<f64>,
    pub backward_passes: usize,
    pub checkpoint: Option<String>,
    pub wall_clock_s: f64,
}

impl TrainReport {
    /// Means of the first and last tenth of the loss curve.
    pub fn deciles(&self) -> (f64, f64) {
        let n = self.losses.len();
        let k = (n / 10).max(1);
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
        (
            mean(&self.losses[..k.min(n)]),
            mean(&self.losses[n.saturating_sub(k)..]),
        )
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

/// Adam with bias correction; moments keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub t: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(
        &mut self,
        model: &mut Denoiser,
        binding: &crate::nn::Binding,
        grads: &Gradients,
        cfg: &TrainConfig,
    ) -> Result<()> {
        let ids: Vec<_> = model
            .store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect();
        let mut gs = Vec::with_capacity(ids.len());
        let mut sq = 0.0f64;
        for &id in &ids {
            let g = grads
                .get(binding.get(id))
                .unwrap_or_else(|| Tensor::zeros(model.store.value(id).shape()));
            sq += g.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
            gs.push(g);
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step: self.t as usize,
                loss: norm,
            });
        }
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip as f64 {
            (cfg.grad_clip as f64 / norm) as f32
        } else {
            1.0
        };
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - (b1 as f64).powi(self.t as i32);
        let c2 = 1.0 - (b2 as f64).powi(self.t as i32);
        for (id, g) in ids.into_iter().zip(gs) {
            let param = model.store.get(id);
            let n = param.value.numel();
            let (m, v) = self
                .moments
                .entry(param.name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut data = param.value.to_vec();
            for i in 0..n {
                let gi = g.data()[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] as f64 / c1;
                let vh = v[i] as f64 / c2;
                data[i] -= (cfg.lr as f64 * mh / (vh.sqrt() + cfg.adam_eps as f64)) as f32;
            }
            let shape = param.value.shape().to_vec();
            model.store.set(id, Tensor::new(shape, data)?)?;
        }
        Ok(())
    }

    pub fn save_into(&self, ar: &mut TensorArchive) {
        for (name, (m, v)) in &self.moments {
            ar.push(format!("adam.m.{name}"), Tensor::from_vec(m.clone()), false);
            ar.push(format!("adam.v.{name}"), Tensor::from_vec(v.clone()), false);
        }
    }

    /// Splits an archive into optimizer state and the remaining tensors.
    pub fn take_from(ar: &mut TensorArchive, t: u64) -> Self {
        let mut adam = Adam {
            t,
            moments: BTreeMap::new(),
        };
        let mut rest = Vec::new();
        for (name, tensor, trainable) in ar.entries.drain(..) {
            if let Some(p) = name.strip_prefix("adam.m.") {
                adam.moments.entry(p.to_string()).or_default().0 = tensor.to_vec();
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                adam.moments.entry(p.to_string()).or_default().1 = tensor.to_vec();
            } else {
                rest.push((name, tensor, trainable));
            }
        }
        ar.entries = rest;
        adam
    }
}

/// Model, optimizer and progress; everything a resumed run needs.
#[derive(Clone)]
pub struct TrainState {
    pub model: Denoiser,
    pub adam: Adam,
    pub step: usize,
    pub losses: Vec<f64>,
}

impl TrainState {
    pub fn new(model: Denoiser) -> Self {
        Self {
            model,
            adam: Adam::new(),
            step: 0,
            losses: Vec::new(),
        }
    }

    pub fn to_archive(&self, phase: Phase) -> Result<TensorArchive> {
        let mut ar = self.model.to_archive(serde_json::json!({
            "phase": phase,
            "step": self.step,
            "adam_t": self.adam.t,
            "losses": self.losses,
        }))?;
        self.adam.save_into(&mut ar);
        Ok(ar)
    }

    pub fn from_archive(mut ar: TensorArchive) -> Result<(Self, Option<Phase>)> {
        let extra = ar.meta.get("extra").cloned().unwrap_or_default();
        let adam_t = extra.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(0);
        let adam = Adam::take_from(&mut ar, adam_t);
        let model = Denoiser::from_archive(&ar)?;
        let step = extra.get("step").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let losses = extra
            .get("losses")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default();
        let phase = extra
            .get("phase")
            .and_then(|v| serde_json::from_value(v.clone()).ok());
        Ok((
            Self {
                model,
                adam,
                step,
                losses,
            },
            phase,
        ))
    }
}

/// Uniform draw from `steps`.
pub fn sample_timestep<R: Rng>(rng: &mut R, steps: &[usize]) -> Result<usize> {
    if steps.is_empty() {
        return Err(Error::Config("timestep set is empty".into()));
    }
    Ok(steps[rng.random_range(0..steps.len())])
}

fn check_loss(step: usize, loss: f64) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::Divergence { step, loss });
    }
    Ok(loss)
}

/// Optional per-step observer, e.g. for progress logs or checkpoints.
pub type StepHook<'a> = &'a mut dyn FnMut(&TrainState) -> Result<()>;

/// Phase 1: single-frame noise prediction over the full schedule; only base
/// parameters move.
pub fn train_base(
    state: &mut TrainState,
    videos: &[LabeledVideo],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    mut hook: Option<StepHook<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.phase != Phase::Base {
        return Err(Error::Config("train_base needs phase = base".into()));
    }
    if videos.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let clock = crate::clock::Stopwatch::start();
    let seeds = SeedTree::new(cfg.seed).child("train.base", 0);
    state.model.store.set_trainable(ParamGroup::Base, true);
    state.model.store.set_trainable(ParamGroup::Memory, false);
    let mut backward_passes = 0;
    while state.step < cfg.steps {
        let mut rng = seeds.rng("step", state.step as u64);
        let tape = Tape::new();
        let p = state.model.store.bind_on(&tape);
        let mut total: Option<Tensor> = None;
        for _ in 0..cfg.batch_size {
            let video = &videos[rng.random_range(0..videos.len())];
            let frame = &video.frames[rng.random_range(0..video.len())];
            let t = rng.random_range(1..=sched.total());
            let prompt = if rng.random::<f32>() < cfg.prompt_dropout {
                NULL_PROMPT
            } else {
                video.prompt()
            };
            let eps = gaussian_tensor(&mut rng, frame.shape());
            let x_t = q_sample(frame, t, &eps, sched)?;
            let pred = state.model.forward_patches(&p, &x_t, t, prompt, None)?;
            let loss = recon_loss(&patchify(&eps, state.model.cfg.patch_size)?, &pred)?;
            total = Some(match total {
                Some(acc) => acc.add(&loss)?,
                None => loss,
            });
        }
        let loss = total
            .expect("batch is non-empty")
            .scale(1.0 / cfg.batch_size as f32)?;
        let value = check_loss(state.step, loss.item() as f64)?;
        let grads = loss.backward()?;
        backward_passes += 1;
        state.adam.step(&mut state.model, &p, &grads, cfg)?;
        state.losses.push(value);
        state.step += 1;
        if let Some(h) = hook.as_mut() {
            h(state)?;
        }
    }
    Ok(TrainReport {
        phase: Phase::Base,
        losses: state.losses.clone(),
        backward_passes,
        checkpoint: None,
        wall_clock_s: clock.seconds(),
    })
}

/// Phase 2: per iteration one video and one timestep from `steps`; the video
/// is cut into clips, memory flows through every frame, each clip gets its own
/// backward pass and the memory is detached at clip boundaries.
pub fn train_memory_segment_level(
    state: &mut TrainState,
    videos: &[LabeledVideo],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    steps: &[usize],
    mut hook: Option<StepHook<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.phase != Phase::Memory {
        return Err(Error::Config(
            "train_memory_segment_level needs phase = memory".into(),
        ));
    }
    if videos.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let clock = crate::clock::Stopwatch::start();
    let seeds = SeedTree::new(cfg.seed).child("train.memory", 0);
    state.model.store.set_trainable(ParamGroup::Base, false);
    state.model.store.set_trainable(ParamGroup::Memory, true);
    let mut backward_passes = 0;
    while state.step < cfg.steps {
        let mut rng = seeds.rng("iteration", state.step as u64);
        let video = &videos[rng.random_range(0..videos.len())];
        let t = sample_timestep(&mut rng, steps)?;
        let slot = steps
            .iter()
            .position(|&s| s == t)
            .expect("sampled from steps");
        let (prompt, branch) = if rng.random::<f32>() < cfg.prompt_dropout {
            (NULL_PROMPT, Branch::Uncond)
        } else {
            (video.prompt(), Branch::Cond)
        };
        let frames = &video.frames[..cfg.video_len.min(video.len())];
        let mut bank = state.model.new_bank(Strategy::Svdiff, steps.len());
        let mut sum = 0.0;
        for clip in split_into_clips(frames, cfg.clip_len)? {
            let tape = Tape::new();
            let p = state.model.store.bind_on(&tape);
            let mut total: Option<Tensor> = None;
            for frame in clip {
                let eps = gaussian_tensor(&mut rng, frame.shape());
                let x_t = q_sample(frame, t, &eps, sched)?;
                let ctx = StreamCtx {
                    bank: &mut bank,
                    branch,
                    step_slot: slot,
                };
                let pred = state
                    .model
                    .forward_patches(&p, &x_t, t, prompt, Some(ctx))?;
                let loss = recon_loss(&patchify(&eps, state.model.cfg.patch_size)?, &pred)?;
                total = Some(match total {
                    Some(acc) => acc.add(&loss)?,
                    None => loss,
                });
            }
            let total = total.expect("clips are non-empty");
            sum += check_loss(state.step, total.item() as f64)?;
            let loss = total.scale(1.0 / clip.len() as f32)?;
            let grads = loss.backward()?;
            backward_passes += 1;
            state.adam.step(&mut state.model, &p, &grads, cfg)?;
            bank.detach_all();
        }
        state.losses.push(sum / frames.len() as f64);
        state.step += 1;
        if let Some(h) = hook.as_mut() {
            h(state)?;
        }
    }
    Ok(TrainReport {
        phase: Phase::Memory,
        losses: state.losses.clone(),
        backward_passes,
        checkpoint: None,
        wall_clock_s: clock.seconds(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoiserConfig;
    use crate::video::random_videos;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            patch_size: 4,
            d: 16,
            layers: 2,
            heads: 2,
            total_steps: 10,
            memory_h: 2,
            memory_w: 2,
            ..DenoiserConfig::default()
        }
    }

    fn setup() -> (TrainState, Vec<LabeledVideo>, NoiseSchedule) {
        let mut model = Denoiser::new(tiny(), &SeedTree::new(1)).unwrap();
        // A zero head would block every upstream gradient.
        let w = model.head.weight;
        let mut rng = SeedTree::new(4).rng("head", 0);
        let shape = model.store.value(w).shape().to_vec();
        let head = gaussian_tensor(&mut rng, &shape).scale(0.1).unwrap();
        model.store.set(w, head).unwrap();
        let videos = random_videos(&SeedTree::new(2), 0, 3, 8, 8).unwrap();
        (
            TrainState::new(model),
            videos,
            NoiseSchedule::scaled_linear(10).unwrap(),
        )
    }

    fn base_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn mem_cfg(steps: usize, video_len: usize, clip_len: usize) -> TrainConfig {
        TrainConfig {
            phase: Phase::Memory,
            steps,
            video_len,
            clip_len,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn snapshot(model: &Denoiser, group: ParamGroup) -> Vec<Tensor> {
        model
            .store
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(_, p)| p.value.clone())
            .collect()
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut st, videos, sched) = setup();
        let before: Vec<Tensor> = st
            .model
            .store
            .iter()
            .map(|(_, p)| p.value.clone())
            .collect();
        train_base(
            &mut st,
            &videos,
            &TrainConfig {
                lr: 0.0,
                ..base_cfg(3)
            },
            &sched,
            None,
        )
        .unwrap();
        let after: Vec<Tensor> = st
            .model
            .store
            .iter()
            .map(|(_, p)| p.value.clone())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn base_training_is_deterministic_and_leaves_memory_alone() {
        let (st0, videos, sched) = setup();
        let mut a = st0.clone();
        let mut b = st0.clone();
        let ra = train_base(&mut a, &videos, &base_cfg(4), &sched, None).unwrap();
        let rb = train_base(&mut b, &videos, &base_cfg(4), &sched, None).unwrap();
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(
            snapshot(&a.model, ParamGroup::Memory),
            snapshot(&st0.model, ParamGroup::Memory)
        );
        assert_ne!(
            snapshot(&a.model, ParamGroup::Base),
            snapshot(&st0.model, ParamGroup::Base)
        );
    }

    #[test]
    fn memory_training_freezes_base_and_counts_backward_passes() {
        let (mut st, _, sched) = setup();
        let videos = random_videos(&SeedTree::new(3), 0, 2, 16, 8).unwrap();
        let base = snapshot(&st.model, ParamGroup::Base);
        let mem = snapshot(&st.model, ParamGroup::Memory);
        let r = train_memory_segment_level(
            &mut st,
            &videos,
            &mem_cfg(1, 16, 4),
            &sched,
            &[3, 6, 10],
            None,
        )
        .unwrap();
        assert_eq!(r.backward_passes, 4);
        assert_eq!(snapshot(&st.model, ParamGroup::Base), base);
        assert_ne!(snapshot(&st.model, ParamGroup::Memory), mem);
    }

    #[test]
    fn history_reaches_every_site() {
        let (st, _, sched) = setup();
        let videos = random_videos(&SeedTree::new(3), 0, 1, 2, 8).unwrap();
        let mut model = st.model.clone();
        for m in model.memory.clone() {
            let w = Tensor::full(model.store.value(m.attn.out_proj.weight).shape(), 0.05);
            model.store.set(m.attn.out_proj.weight, w).unwrap();
        }
        model.store.set_trainable(ParamGroup::Base, false);
        let tape = Tape::new();
        let p = model.store.bind_on(&tape);
        let mut bank = model.new_bank(Strategy::Svdiff, 1);
        let mut rng = SeedTree::new(0).rng("eps", 0);
        let mut total = Tensor::scalar(0.0);
        for frame in &videos[0].frames {
            let eps = gaussian_tensor(&mut rng, frame.shape());
            let x_t = q_sample(frame, 5, &eps, &sched).unwrap();
            let ctx = StreamCtx {
                bank: &mut bank,
                branch: Branch::Cond,
                step_slot: 0,
            };
            let pred = model.forward_patches(&p, &x_t, 5, 1, Some(ctx)).unwrap();
            total = total
                .add(&recon_loss(&patchify(&eps, 4).unwrap(), &pred).unwrap())
                .unwrap();
        }
        let g = total.backward().unwrap();
        for m in &model.memory {
            let ids = [m.w0, m.attn.q_proj.weight, m.attn.out_proj.weight];
            assert!(ids.iter().any(|&id| g.get(p.get(id)).unwrap().norm() > 0.0));
        }
    }

    #[test]
    fn single_frame_video_matches_stateless_loss() {
        let (mut st, _, sched) = setup();
        let videos = random_videos(&SeedTree::new(5), 0, 1, 1, 8).unwrap();
        let cfg = TrainConfig {
            prompt_dropout: 0.0,
            lr: 0.0,
            ..mem_cfg(1, 1, 1)
        };
        let r = train_memory_segment_level(&mut st, &videos, &cfg, &sched, &[7], None).unwrap();
        // Replay the same draws through the stateless model.
        let seeds = SeedTree::new(cfg.seed).child("train.memory", 0);
        let mut rng = seeds.rng("iteration", 0);
        let _video: usize = rng.random_range(0..1);
        let t = sample_timestep(&mut rng, &[7]).unwrap();
        let _drop: f32 = rng.random();
        let frame = &videos[0].frames[0];
        let eps = gaussian_tensor(&mut rng, frame.shape());
        let x_t = q_sample(frame, t, &eps, &sched).unwrap();
        let pred = st
            .model
            .forward_patches(&st.model.bind(), &x_t, t, videos[0].prompt(), None)
            .unwrap();
        let loss = recon_loss(&patchify(&eps, 4).unwrap(), &pred)
            .unwrap()
            .item() as f64;
        assert_eq!(r.losses, vec![loss]);
    }

    #[test]
    fn timestep_sampling() {
        let mut rng = SeedTree::new(1).rng("t", 0);
        assert!((0..20).all(|_| sample_timestep(&mut rng, &[42]).unwrap() == 42));
        assert!(sample_timestep(&mut rng, &[]).is_err());
        let steps = [33, 67, 100];
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let t = sample_timestep(&mut rng, &steps).unwrap();
            counts[steps.iter().position(|&s| s == t).unwrap()] += 1;
        }
        let expect = n as f64 / 3.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expect).powi(2) / expect)
            .sum();
        // 99.9th percentile of chi-square with 2 degrees of freedom.
        assert!(chi2 < 13.82, "{counts:?}");
        let sd = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - expect).abs() < 3.0 * sd));
        let a: Vec<usize> = (0..5)
            .map(|_| sample_timestep(&mut SeedTree::new(9).rng("t", 0), &steps).unwrap())
            .collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn resume_reproduces_next_step() {
        let (st0, videos, sched) = setup();
        let cfg = base_cfg(3);
        let mut full = st0.clone();
        train_base(&mut full, &videos, &cfg, &sched, None).unwrap();
        let mut part = st0.clone();
        train_base(
            &mut part,
            &videos,
            &TrainConfig {
                steps: 2,
                ..cfg.clone()
            },
            &sched,
            None,
        )
        .unwrap();
        let bytes = part.to_archive(Phase::Base).unwrap().to_bytes().unwrap();
        let (mut resumed, phase) =
            TrainState::from_archive(TensorArchive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(phase, Some(Phase::Base));
        train_base(&mut resumed, &videos, &cfg, &sched, None).unwrap();
        assert_eq!(resumed.losses, full.losses);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            clip_len: 9,
            video_len: 8,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let (mut st, videos, sched) = setup();
        assert!(train_base(&mut st, &videos, &mem_cfg(1, 8, 8), &sched, None).is_err());
    }
}
