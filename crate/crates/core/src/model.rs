//! The streaming denoiser: patch tokens, a flat transformer stack with a
//! temporal insertion site after every block, and a linear noise head.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::memory::{
    baseline_step, memory_attention, window_attention, Branch, InsertionMode, MemoryBank,
    MemoryKey, MemoryParams, Strategy,
};
use crate::nn::{
    Binding, EmbeddingTables, Init, LayerNorm, Linear, ParamGroup, ParamId, ParamStore,
    TransformerBlock,
};
use crate::rng::SeedTree;
use crate::svdt::TensorArchive;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub total_steps: usize,
    pub memory_h: usize,
    pub memory_w: usize,
    pub vocab: usize,
    pub insertion: InsertionMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            d: 64,
            layers: 4,
            heads: 4,
            total_steps: 100,
            memory_h: 8,
            memory_w: 8,
            vocab: crate::video::VOCAB,
            insertion: InsertionMode::Residual,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.d == 0 || self.d % self.heads != 0 {
            return bad(format!(
                "d {} not divisible by heads {}",
                self.d, self.heads
            ));
        }
        if self.channels == 0 || self.layers == 0 || self.total_steps == 0 || self.vocab < 2 {
            return bad("channels, layers and total_steps must be positive and vocab >= 2".into());
        }
        if self.memory_h == 0 || self.memory_w == 0 {
            return bad(format!(
                "memory grid must be non-empty, got {}x{}",
                self.memory_h, self.memory_w
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

/// Rearranges `[C x H x W]` into raster-ordered patches `[p x C*P*P]`.
pub fn patchify(frame: &Tensor, patch: usize) -> Result<Tensor> {
    let s = frame.shape();
    if s.len() != 3 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(shape_err(
            "patchify",
            format!("{s:?} is not [C x H x W] divisible by patch {patch}"),
        ));
    }
    let (c, gh, gw) = (s[0], s[1] / patch, s[2] / patch);
    frame
        .reshape(&[c, gh, patch, gw, patch])?
        .permute(&[1, 3, 0, 2, 4])?
        .reshape(&[gh * gw, c * patch * patch])
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, channels: usize, size: usize, patch: usize) -> Result<Tensor> {
    let g = size / patch;
    if patch == 0 || size % patch != 0 || patches.shape() != [g * g, channels * patch * patch] {
        return Err(shape_err(
            "unpatchify",
            format!(
                "{:?} does not tile a {channels}x{size}x{size} frame with patch {patch}",
                patches.shape()
            ),
        ));
    }
    patches
        .reshape(&[g, g, channels, patch, patch])?
        .permute(&[2, 0, 3, 1, 4])?
        .reshape(&[channels, size, size])
}

#[derive(Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub store: ParamStore,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub embed: EmbeddingTables,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
    pub memory: Vec<MemoryParams>,
}

/// Where a forward pass reads and writes temporal state.
pub struct StreamCtx<'a> {
    pub bank: &'a mut MemoryBank,
    pub branch: Branch,
    pub step_slot: usize,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, seeds: &SeedTree) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seeds, "model.init");
        let d = cfg.d;
        let patch_embed = Linear::new(
            &mut store,
            &mut init,
            "patch_embed",
            cfg.patch_dim(),
            d,
            ParamGroup::Base,
            false,
        );
        let pos_embed = store.add(
            "pos_embed",
            init.gaussian(&[cfg.tokens(), d]),
            ParamGroup::Base,
        );
        let embed = EmbeddingTables::new(&mut store, &mut init, cfg.vocab, d);
        let blocks = (0..cfg.layers)
            .map(|l| {
                TransformerBlock::new(&mut store, &mut init, &format!("block{l}"), d, cfg.heads)
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(&mut store, "final_norm", d, ParamGroup::Base);
        let head = Linear::new(
            &mut store,
            &mut init,
            "head",
            d,
            cfg.patch_dim(),
            ParamGroup::Base,
            true,
        );
        let mut mem_init = Init::new(seeds, "model.memory");
        let memory = (0..cfg.layers)
            .map(|l| {
                MemoryParams::new(
                    &mut store,
                    &mut mem_init,
                    &format!("memory{l}"),
                    d,
                    cfg.heads,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            store,
            patch_embed,
            pos_embed,
            embed,
            blocks,
            final_norm,
            head,
            memory,
        })
    }

    /// Base and memory parameter ids; disjoint and exhaustive.
    pub fn partition_parameters(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        (
            self.store.ids_in(ParamGroup::Base),
            self.store.ids_in(ParamGroup::Memory),
        )
    }

    pub fn bind(&self) -> Binding {
        self.store.bind()
    }

    fn check_frame(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.cfg.frame_shape() {
            return Err(shape_err(
                "denoise_forward",
                format!(
                    "expected frame {:?}, got {:?}",
                    self.cfg.frame_shape(),
                    x.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Patch embedding plus positional embedding.
    pub fn embed_frame(&self, p: &Binding, x: &Tensor) -> Result<Tensor> {
        self.check_frame(x)?;
        self.patch_embed
            .forward(p, &patchify(x, self.cfg.patch_size)?)?
            .add(p.get(self.pos_embed))
    }

    pub fn condition(&self, p: &Binding, t: usize, prompt: usize) -> Result<Tensor> {
        self.embed
            .time_embedding(p, t, self.cfg.total_steps)?
            .add(&self.embed.prompt_embedding(p, prompt)?)
    }

    /// Noise prediction in patch layout `[p x C*P*P]`.
    pub fn forward_patches(
        &self,
        p: &Binding,
        x_t: &Tensor,
        t: usize,
        prompt: usize,
        stream: Option<StreamCtx<'_>>,
    ) -> Result<Tensor> {
        let cond = self.condition(p, t, prompt)?;
        let tokens = match stream {
            None => self.run_blocks(p, self.embed_frame(p, x_t)?, &cond, |_, h| Ok(h))?,
            Some(ctx) => self.run_stream(p, x_t, &cond, ctx)?,
        };
        self.head.forward(p, &self.final_norm.forward(p, &tokens)?)
    }

    fn run_blocks(
        &self,
        p: &Binding,
        mut h: Tensor,
        cond: &Tensor,
        mut site: impl FnMut(usize, Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        for (l, block) in self.blocks.iter().enumerate() {
            h = site(l, block.forward(p, &h, cond)?)?;
        }
        Ok(h)
    }

    fn run_stream(
        &self,
        p: &Binding,
        x_t: &Tensor,
        cond: &Tensor,
        ctx: StreamCtx<'_>,
    ) -> Result<Tensor> {
        let StreamCtx {
            bank,
            branch,
            step_slot,
        } = ctx;
        let key = |layer| MemoryKey::new(layer, step_slot, branch);
        match bank.strategy {
            Strategy::None => self.run_blocks(p, self.embed_frame(p, x_t)?, cond, |_, h| Ok(h)),
            Strategy::Svdiff => self.run_blocks(p, self.embed_frame(p, x_t)?, cond, |l, h| {
                let params = &self.memory[l];
                let mem = bank.get_or_init(key(l), p, params)?;
                let (h, next) = memory_attention(p, params, &h, &mem, self.cfg.insertion)?;
                bank.store(key(l), next)?;
                Ok(h)
            }),
            Strategy::WindowKv | Strategy::TemporalShift | Strategy::LinearAttention => self
                .run_blocks(p, self.embed_frame(p, x_t)?, cond, |l, h| {
                    baseline_step(p, &self.memory[l], bank.baseline(key(l))?, &h)
                }),
            Strategy::SlidingWindow => {
                self.check_frame(x_t)?;
                let window = bank.push_window(step_slot, branch, x_t);
                let n = self.cfg.tokens();
                let mut hs = window
                    .iter()
                    .map(|x| self.embed_frame(p, x))
                    .collect::<Result<Vec<_>>>()?;
                for (l, block) in self.blocks.iter().enumerate() {
                    for h in hs.iter_mut() {
                        *h = block.forward(p, h, cond)?;
                    }
                    let joint = window_attention(
                        p,
                        &self.memory[l],
                        &Tensor::concat(&hs.iter().collect::<Vec<_>>(), 0)?,
                    )?;
                    hs = joint.split(0, &vec![n; hs.len()])?;
                }
                Ok(hs.pop().expect("window holds the current frame"))
            }
        }
    }

    /// Noise prediction with the frame's shape. `stream = None` is the plain
    /// image denoiser.
    pub fn denoise_forward(
        &self,
        p: &Binding,
        x_t: &Tensor,
        t: usize,
        prompt: usize,
        stream: Option<StreamCtx<'_>>,
    ) -> Result<Tensor> {
        self.check_frame(x_t)?;
        let out = self.forward_patches(p, x_t, t, prompt, stream)?;
        unpatchify(
            &out,
            self.cfg.channels,
            self.cfg.image_size,
            self.cfg.patch_size,
        )
    }

    /// Mean token after the middle block at `t = 1` with the null prompt.
    pub fn features(&self, p: &Binding, frame: &Tensor) -> Result<Tensor> {
        let cond = self.condition(p, 1, crate::nn::NULL_PROMPT)?;
        let mut h = self.embed_frame(p, frame)?;
        for block in &self.blocks[..self.cfg.layers.div_ceil(2)] {
            h = block.forward(p, &h, &cond)?;
        }
        let n = h.shape()[0];
        Tensor::full(&[1, n], 1.0 / n as f32)
            .matmul(&h)?
            .reshape(&[self.cfg.d])
    }

    pub fn new_bank(&self, strategy: Strategy, steps: usize) -> MemoryBank {
        MemoryBank::new(
            strategy,
            self.cfg.memory_h,
            self.cfg.memory_w,
            self.cfg.layers,
            steps,
        )
    }

    /// Checkpoint archive: config in the header, every parameter by name.
    pub fn to_archive(&self, extra: serde_json::Value) -> Result<TensorArchive> {
        let mut ar = TensorArchive::new(serde_json::json!({
            "kind": "checkpoint",
            "config": self.cfg,
            "extra": extra,
        }));
        for (_, param) in self.store.iter() {
            ar.push(param.name.clone(), param.value.clone(), param.trainable);
        }
        Ok(ar)
    }

    pub fn from_archive(ar: &TensorArchive) -> Result<Self> {
        if ar.meta.get("kind").and_then(|v| v.as_str()) != Some("checkpoint") {
            return Err(Error::Config("archive is not a model checkpoint".into()));
        }
        let cfg: DenoiserConfig =
            serde_json::from_value(ar.meta.get("config").cloned().unwrap_or_default())?;
        let mut model = Self::new(cfg, &SeedTree::new(0))?;
        model.load_values(ar)?;
        Ok(model)
    }

    /// Copies named tensors from `ar`; every parameter must be present.
    pub fn load_values(&mut self, ar: &TensorArchive) -> Result<()> {
        for (name, value, trainable) in &ar.entries {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| Error::Config(format!("checkpoint has unknown tensor `{name}`")))?;
            self.store.set(id, value.clone())?;
            self.store.set_trainable_id(id, *trainable);
        }
        if ar.entries.len() != self.store.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model needs {}",
                ar.entries.len(),
                self.store.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, extra: serde_json::Value) -> Result<()> {
        self.to_archive(extra)?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }

    /// The same parameters with a different memory grid; the grid only
    /// changes state shape.
    pub fn with_memory_grid(&self, h: usize, w: usize) -> Result<Self> {
        let mut model = self.clone();
        model.cfg.memory_h = h;
        model.cfg.memory_w = w;
        model.cfg.validate()?;
        Ok(model)
    }
}
