//! Online editing: each arriving frame is inverted to noise and denoised
//! under the target prompt with classifier-free guidance. Every (layer, step,
//! branch) site keeps its own temporal state across frames.

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    cfg_combine, clamp_eps, ddim_invert_step, ddim_step, GuidanceConfig, NoiseSchedule,
};
use crate::error::{out_of_range, shape_err, Error, Result};
use crate::memory::{Branch, MemoryBank, Strategy};
use crate::model::{Denoiser, StreamCtx};
use crate::nn::{Binding, NULL_PROMPT};
use crate::svdt::TensorArchive;
use crate::tensor::{flops, Tensor};
use crate::video::PIXEL_RANGE;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameResult {
    pub index: usize,
    #[serde(skip)]
    pub frame: Tensor,
    /// Inversion eps norms (ascending t), then guided eps norms (descending t).
    pub eps_norms: Vec<f64>,
    pub latency_s: f64,
    pub flops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionOptions {
    /// Invert without temporal state instead of through the invert branch.
    pub memory_free_inversion: bool,
    /// Replace each eps by the one whose x0 prediction is clamped to the pixel
    /// range: at `t` when denoising, at the previous level when inverting.
    /// Near t = T the prediction divides by sqrt(ab_T), so small eps errors
    /// otherwise explode.
    pub clip_x0: bool,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            memory_free_inversion: false,
            clip_x0: true,
        }
    }
}

pub struct EditSession {
    model: Denoiser,
    binding: Binding,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
    prompt: usize,
    options: SessionOptions,
    bank: MemoryBank,
    n: usize,
    closed: bool,
}

pub fn open_session(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    prompt: usize,
    strategy: Strategy,
    options: SessionOptions,
) -> Result<EditSession> {
    if prompt >= model.cfg.vocab {
        return Err(out_of_range(
            "prompt",
            prompt as i64,
            format!("0..{}", model.cfg.vocab),
        ));
    }
    if schedule.total() != model.cfg.total_steps {
        return Err(Error::Config(format!(
            "schedule has {} steps, model expects {}",
            schedule.total(),
            model.cfg.total_steps
        )));
    }
    guidance.validate(schedule.total())?;
    Ok(EditSession {
        model: model.clone(),
        binding: model.bind(),
        schedule: schedule.clone(),
        guidance: guidance.clone(),
        prompt,
        options,
        bank: model.new_bank(strategy, guidance.steps.len()),
        n: 0,
        closed: false,
    })
}

impl EditSession {
    pub fn strategy(&self) -> Strategy {
        self.bank.strategy
    }

    pub fn frames_processed(&self) -> usize {
        self.n
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn guidance(&self) -> &GuidanceConfig {
        &self.guidance
    }

    pub fn prompt(&self) -> usize {
        self.prompt
    }

    /// Scalars of cached temporal state held by this session.
    pub fn state_size(&self) -> usize {
        self.bank.state_scalars()
    }

    fn eps(
        &mut self,
        x: &Tensor,
        t: usize,
        prompt: usize,
        branch: Branch,
        slot: usize,
        stateless: bool,
    ) -> Result<Tensor> {
        let ctx = match self.bank.strategy {
            Strategy::None => None,
            _ if stateless => None,
            _ => Some(StreamCtx {
                bank: &mut self.bank,
                branch,
                step_slot: slot,
            }),
        };
        self.model.denoise_forward(&self.binding, x, t, prompt, ctx)
    }

    fn clip(&self, x: &Tensor, t: usize, eps: Tensor) -> Result<Tensor> {
        if !self.options.clip_x0 {
            return Ok(eps);
        }
        clamp_eps(x, t, &eps, &self.schedule, PIXEL_RANGE.0, PIXEL_RANGE.1)
    }

    pub fn process_frame(&mut self, frame: &Tensor) -> Result<FrameResult> {
        if self.closed {
            return Err(Error::SessionClosed);
        }
        let expect = self.model.cfg.frame_shape();
        if frame.shape() != expect {
            return Err(Error::Frame {
                index: self.n,
                detail: format!("shape {:?}, expected {:?}", frame.shape(), expect),
            });
        }
        let clock = crate::clock::Stopwatch::start();
        let scope = flops::Scope::begin();
        let steps = self.guidance.steps.clone();
        let mut norms = Vec::with_capacity(2 * steps.len());

        let mut x = frame.detach();
        let mut t_prev = 0;
        for (slot, &t) in steps.iter().enumerate() {
            let stateless = self.options.memory_free_inversion;
            let eps = self.eps(&x, t, NULL_PROMPT, Branch::Invert, slot, stateless)?;
            // The inversion step predicts x0 from `x` at level `t_prev`; at
            // `t_prev = 0` that prediction is the frame itself.
            let eps = if t_prev > 0 {
                self.clip(&x, t_prev, eps)?
            } else {
                eps
            };
            norms.push(eps.norm());
            x = ddim_invert_step(&x, t_prev, t, &eps, &self.schedule)?;
            t_prev = t;
        }

        for (t, t_next) in self.guidance.denoise_pairs() {
            let slot = steps
                .iter()
                .position(|&s| s == t)
                .expect("pairs come from steps");
            let eps_c = self.eps(&x, t, self.prompt, Branch::Cond, slot, false)?;
            let eps_uc = self.eps(&x, t, NULL_PROMPT, Branch::Uncond, slot, false)?;
            let eps = cfg_combine(&eps_c, &eps_uc, self.guidance.lambda)?;
            let eps = self.clip(&x, t, eps)?;
            norms.push(eps.norm());
            x = ddim_step(&x, t, t_next, &eps, &self.schedule)?;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("edited frame {}", self.n)));
        }
        let result = FrameResult {
            index: self.n,
            frame: x,
            eps_norms: norms,
            latency_s: clock.seconds(),
            flops: scope.finish(),
        };
        self.n += 1;
        Ok(result)
    }

    /// Clears all temporal state; the next frame starts a new video.
    pub fn reset_session(&mut self) {
        self.bank.reset();
        self.n = 0;
        self.closed = false;
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    /// Memory states plus the frame counter. Only the svdiff strategy keeps
    /// its state in snapshot-able form.
    pub fn snapshot(&self) -> Result<TensorArchive> {
        if self.bank.strategy != Strategy::Svdiff {
            return Err(Error::Config(format!(
                "cannot snapshot a {} session",
                self.bank.strategy
            )));
        }
        let mut ar = self.bank.snapshot();
        ar.meta["frames_processed"] = self.n.into();
        Ok(ar)
    }

    pub fn restore(&mut self, ar: &TensorArchive) -> Result<()> {
        let bank = MemoryBank::restore(ar)?;
        let current = (
            self.bank.strategy,
            self.bank.h,
            self.bank.w,
            self.bank.layers,
            self.bank.steps,
        );
        if (bank.strategy, bank.h, bank.w, bank.layers, bank.steps) != current {
            return Err(shape_err(
                "restore",
                "snapshot does not match this session".to_string(),
            ));
        }
        self.bank = bank;
        self.n = ar
            .meta
            .get("frames_processed")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as usize;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MemoryKey;
    use crate::model::DenoiserConfig;
    use crate::video::random_videos;
    use crate::SeedTree;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            patch_size: 4,
            d: 16,
            layers: 2,
            heads: 2,
            total_steps: 20,
            memory_h: 2,
            memory_w: 2,
            ..DenoiserConfig::default()
        }
    }

    /// Every zero-initialized projection set to small random values so that
    /// memory and prompt both matter.
    fn live_model() -> Denoiser {
        let mut model = Denoiser::new(tiny(), &SeedTree::new(3)).unwrap();
        let mut rng = SeedTree::new(8).rng("live", 0);
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let v = model.store.value(id);
            if v.data().iter().all(|&x| x == 0.0) && v.rank() == 2 {
                let shape = v.shape().to_vec();
                let n = v.numel();
                let data = (0..n)
                    .map(|_| rand::Rng::random_range(&mut rng, -0.1f32..0.1))
                    .collect();
                model
                    .store
                    .set(id, Tensor::new(shape, data).unwrap())
                    .unwrap();
            }
        }
        model
    }

    fn setup() -> (Denoiser, NoiseSchedule, GuidanceConfig) {
        (
            live_model(),
            NoiseSchedule::scaled_linear(20).unwrap(),
            GuidanceConfig::evenly_spaced(1.0, 3, 20).unwrap(),
        )
    }

    fn frames(n: usize, seed: u64) -> Vec<Tensor> {
        random_videos(&SeedTree::new(seed), 0, 1, n, 8)
            .unwrap()
            .remove(0)
            .frames
    }

    #[test]
    fn rejects_bad_prompt_shape_and_closed_session() {
        let (m, s, g) = setup();
        assert!(open_session(&m, &s, &g, 99, Strategy::Svdiff, SessionOptions::default()).is_err());
        let mut sess =
            open_session(&m, &s, &g, 1, Strategy::Svdiff, SessionOptions::default()).unwrap();
        assert!(matches!(
            sess.process_frame(&Tensor::zeros(&[3, 4, 4])),
            Err(Error::Frame { index: 0, .. })
        ));
        sess.close();
        assert!(matches!(
            sess.process_frame(&frames(1, 1)[0]),
            Err(Error::SessionClosed)
        ));
    }

    #[test]
    fn sessions_are_independent() {
        let (m, s, g) = setup();
        let mut a =
            open_session(&m, &s, &g, 2, Strategy::Svdiff, SessionOptions::default()).unwrap();
        let mut b =
            open_session(&m, &s, &g, 2, Strategy::Svdiff, SessionOptions::default()).unwrap();
        let fs = frames(3, 4);
        assert!(b.bank().is_empty());
        let first = b.process_frame(&fs[0]).unwrap();
        for f in &fs {
            a.process_frame(f).unwrap();
        }
        assert_eq!(b.frames_processed(), 1);
        let mut c =
            open_session(&m, &s, &g, 2, Strategy::Svdiff, SessionOptions::default()).unwrap();
        assert_eq!(c.process_frame(&fs[0]).unwrap().frame, first.frame);
    }

    #[test]
    fn each_branch_advances_once_per_frame() {
        let (m, s, g) = setup();
        let mut sess =
            open_session(&m, &s, &g, 1, Strategy::Svdiff, SessionOptions::default()).unwrap();
        for f in &frames(2, 5) {
            sess.process_frame(f).unwrap();
        }
        for branch in [Branch::Cond, Branch::Uncond, Branch::Invert] {
            for layer in 0..2 {
                for step in 0..3 {
                    assert_eq!(
                        sess.bank().updates(&MemoryKey {
                            layer,
                            step,
                            branch
                        }),
                        2
                    );
                }
            }
        }
    }

    #[test]
    fn reset_replays_identically() {
        let (m, s, g) = setup();
        let mut sess =
            open_session(&m, &s, &g, 4, Strategy::Svdiff, SessionOptions::default()).unwrap();
        let fresh = sess.state_size();
        let fs = frames(3, 6);
        let a: Vec<_> = fs.iter().map(|f| sess.process_frame(f).unwrap()).collect();
        sess.reset_session();
        sess.reset_session();
        assert_eq!(sess.state_size(), fresh);
        assert_eq!(sess.frames_processed(), 0);
        let b: Vec<_> = fs.iter().map(|f| sess.process_frame(f).unwrap()).collect();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(
                (&x.frame, &x.eps_norms, x.flops),
                (&y.frame, &y.eps_norms, y.flops)
            );
        }
    }

    #[test]
    fn unguided_null_prompt_collapses_to_unconditional() {
        let (m, s, _) = setup();
        let g = GuidanceConfig::evenly_spaced(0.0, 3, 20).unwrap();
        let mut sess = open_session(
            &m,
            &s,
            &g,
            NULL_PROMPT,
            Strategy::Svdiff,
            SessionOptions::default(),
        )
        .unwrap();
        let fs = frames(2, 7);
        for f in &fs {
            sess.process_frame(f).unwrap();
        }
        let bank = sess.bank();
        for k in bank.keys().filter(|k| k.branch == Branch::Cond) {
            let twin = MemoryKey {
                branch: Branch::Uncond,
                ..*k
            };
            assert_eq!(bank.get(k).unwrap().state, bank.get(&twin).unwrap().state);
        }
    }

    #[test]
    fn fresh_model_round_trips_the_frame() {
        let m = Denoiser::new(tiny(), &SeedTree::new(3)).unwrap();
        let s = NoiseSchedule::scaled_linear(20).unwrap();
        let g = GuidanceConfig::evenly_spaced(1.0, 3, 20).unwrap();
        let mut sess = open_session(
            &m,
            &s,
            &g,
            NULL_PROMPT,
            Strategy::Svdiff,
            SessionOptions::default(),
        )
        .unwrap();
        let mut fs = frames(3, 8);
        // Saturated pixels would be clipped if inversion clamped x0.
        fs.push(Tensor::full(fs[0].shape(), PIXEL_RANGE.1));
        for f in &fs {
            let out = sess.process_frame(f).unwrap();
            assert!(out.frame.max_abs_diff(f) <= 1e-3);
        }
    }

    #[test]
    fn state_and_flops_are_constant() {
        let (m, s, g) = setup();
        for strategy in [
            Strategy::Svdiff,
            Strategy::LinearAttention,
            Strategy::TemporalShift,
        ] {
            let mut sess =
                open_session(&m, &s, &g, 1, strategy, SessionOptions::default()).unwrap();
            let fs = frames(6, 9);
            let r: Vec<_> = fs
                .iter()
                .map(|f| (sess.process_frame(f).unwrap().flops, sess.state_size()))
                .collect();
            assert!(r.windows(2).all(|w| w[0] == w[1]), "{strategy}: {r:?}");
        }
        let mut sess =
            open_session(&m, &s, &g, 1, Strategy::WindowKv, SessionOptions::default()).unwrap();
        let r: Vec<_> = frames(6, 9)
            .iter()
            .map(|f| (sess.process_frame(f).unwrap().flops, sess.state_size()))
            .collect();
        assert!(
            r[crate::memory::WINDOW..].windows(2).all(|w| w[0] == w[1]),
            "{r:?}"
        );
    }

    #[test]
    fn none_strategy_keeps_no_state() {
        let (m, s, g) = setup();
        let mut sess =
            open_session(&m, &s, &g, 1, Strategy::None, SessionOptions::default()).unwrap();
        let fs = frames(2, 10);
        let a = sess.process_frame(&fs[0]).unwrap();
        sess.process_frame(&fs[1]).unwrap();
        assert_eq!(sess.state_size(), 0);
        let mut other =
            open_session(&m, &s, &g, 1, Strategy::None, SessionOptions::default()).unwrap();
        other.process_frame(&fs[1]).unwrap();
        assert_eq!(other.process_frame(&fs[0]).unwrap().frame, a.frame);
    }

    #[test]
    fn memory_free_inversion_skips_invert_branch() {
        let (m, s, g) = setup();
        let opts = SessionOptions {
            memory_free_inversion: true,
            ..SessionOptions::default()
        };
        let mut sess = open_session(&m, &s, &g, 1, Strategy::Svdiff, opts).unwrap();
        sess.process_frame(&frames(1, 11)[0]).unwrap();
        assert!(sess.bank().keys().all(|k| k.branch != Branch::Invert));
    }

    #[test]
    fn snapshot_resumes_the_stream() {
        let (m, s, g) = setup();
        let fs = frames(4, 12);
        let mut a =
            open_session(&m, &s, &g, 3, Strategy::Svdiff, SessionOptions::default()).unwrap();
        a.process_frame(&fs[0]).unwrap();
        a.process_frame(&fs[1]).unwrap();
        let bytes = a.snapshot().unwrap().to_bytes().unwrap();
        let mut b =
            open_session(&m, &s, &g, 3, Strategy::Svdiff, SessionOptions::default()).unwrap();
        b.restore(&TensorArchive::from_bytes(&bytes).unwrap())
            .unwrap();
        for f in &fs[2..] {
            let (x, y) = (a.process_frame(f).unwrap(), b.process_frame(f).unwrap());
            assert_eq!((x.index, x.frame), (y.index, y.frame));
        }
    }
}
