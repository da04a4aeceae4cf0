//! Spatial-aware temporal memory, its recurrent attention update, the
//! per-stream memory bank and the baseline temporal strategies.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{pos2d, Binding, Init, Linear, MultiHeadAttention, ParamGroup, ParamStore, LN_EPS};
use crate::svdt::TensorArchive;
use crate::tensor::Tensor;

/// Frames of history kept by the windowed baselines.
pub const WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Cond,
    Uncond,
    Invert,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Cond, Branch::Uncond, Branch::Invert];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Cond => "cond",
            Branch::Uncond => "uncond",
            Branch::Invert => "invert",
        }
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Branch::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown branch `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MemoryKey {
    pub layer: usize,
    pub step: usize,
    pub branch: Branch,
}

impl MemoryKey {
    pub fn new(layer: usize, step: usize, branch: Branch) -> Self {
        Self {
            layer,
            step,
            branch,
        }
    }
}

impl fmt::Display for MemoryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.layer, self.step, self.branch.name())
    }
}

impl FromStr for MemoryKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed memory key `{s}`"));
        let mut it = s.split('.');
        let layer = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let step = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let branch = it.next().ok_or_else(bad)?.parse()?;
        if it.next().is_some() {
            return Err(bad());
        }
        Ok(Self {
            layer,
            step,
            branch,
        })
    }
}

/// How temporal context enters the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Per-frame denoising with no temporal state.
    None,
    Svdiff,
    WindowKv,
    TemporalShift,
    SlidingWindow,
    LinearAttention,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::None,
        Strategy::Svdiff,
        Strategy::WindowKv,
        Strategy::TemporalShift,
        Strategy::SlidingWindow,
        Strategy::LinearAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Svdiff => "svdiff",
            Strategy::WindowKv => "window_kv",
            Strategy::TemporalShift => "temporal_shift",
            Strategy::SlidingWindow => "sliding_window",
            Strategy::LinearAttention => "linear_attention",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Whether the attention output is added to its inputs or replaces them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InsertionMode {
    #[default]
    Residual,
    Replace,
}

/// Learnable pieces of one insertion site.
#[derive(Debug, Clone, Copy)]
pub struct MemoryParams {
    pub w0: crate::nn::ParamId,
    pub init_fc1: Linear,
    pub init_fc2: Linear,
    pub attn: MultiHeadAttention,
    pub d: usize,
}

impl MemoryParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        let g = ParamGroup::Memory;
        Ok(Self {
            w0: store.add(format!("{name}.w0"), init.gaussian(&[d]), g),
            init_fc1: Linear::new(store, init, &format!("{name}.init1"), 2, d, g, false),
            init_fc2: Linear::new(store, init, &format!("{name}.init2"), d, d, g, false),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), d, heads, g, true)?,
            d,
        })
    }
}

/// `h * w` memory tokens of width `d`, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTemporalMemory {
    pub state: Tensor,
    pub h: usize,
    pub w: usize,
}

impl SpatialTemporalMemory {
    pub fn d(&self) -> usize {
        self.state.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn detach(&self) -> Self {
        Self {
            state: self.state.detach(),
            h: self.h,
            w: self.w,
        }
    }
}

/// `m_ij = w0 + FFN(pos2d(i, j))` for every grid cell.
pub fn memory_init(
    p: &Binding,
    params: &MemoryParams,
    h: usize,
    w: usize,
) -> Result<SpatialTemporalMemory> {
    if h == 0 || w == 0 {
        return Err(shape_err(
            "memory_init",
            format!("grid must be non-empty, got {h}x{w}"),
        ));
    }
    let mut pos = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            pos.extend_from_slice(pos2d(i, j, h, w)?.data());
        }
    }
    let pos = Tensor::new(vec![h * w, 2], pos)?;
    let hidden = params.init_fc1.forward(p, &pos)?.gelu()?;
    let state = params
        .init_fc2
        .forward(p, &hidden)?
        .add_row(p.get(params.w0))?;
    Ok(SpatialTemporalMemory { state, h, w })
}

/// Self-attention over `[frame; memory]`, split back into the aligned frame
/// features and the next memory state.
pub fn memory_attention(
    p: &Binding,
    params: &MemoryParams,
    frame: &Tensor,
    mem: &SpatialTemporalMemory,
    mode: InsertionMode,
) -> Result<(Tensor, SpatialTemporalMemory)> {
    let d = params.d;
    if frame.rank() != 2 || frame.shape()[1] != d {
        return Err(shape_err(
            "memory_attention",
            format!("frame tokens must be [p x {d}], got {:?}", frame.shape()),
        ));
    }
    if mem.state.shape() != [mem.tokens(), d] {
        return Err(shape_err(
            "memory_attention",
            format!(
                "memory must be [{} x {d}], got {:?}",
                mem.tokens(),
                mem.state.shape()
            ),
        ));
    }
    let n = frame.shape()[0];
    let joint = Tensor::concat(&[frame, &mem.state], 0)?;
    let mut out = params.attn.self_attention(p, &joint.layer_norm(LN_EPS)?)?;
    if mode == InsertionMode::Residual {
        out = joint.add(&out)?;
    }
    let parts = out.split(0, &[n, mem.tokens()])?;
    let next = SpatialTemporalMemory {
        state: parts[1].clone(),
        h: mem.h,
        w: mem.w,
    };
    Ok((parts[0].clone(), next))
}

/// Hands the end-of-clip memory to the next clip with the gradient path cut.
pub fn propagate_across_clips(mem: &SpatialTemporalMemory) -> SpatialTemporalMemory {
    mem.detach()
}

/// Replaces the first `channels` features with the previous frame's (zeros
/// when there is none). Returns the shifted tokens and the new cache.
pub fn temporal_shift(
    frame: &Tensor,
    prev: Option<&Tensor>,
    channels: usize,
) -> Result<(Tensor, Tensor)> {
    let (n, d) = (frame.shape()[0], frame.shape()[1]);
    let head = frame.narrow(1, 0, channels)?;
    let zeros;
    let prev = match prev {
        Some(t) => t,
        None => {
            zeros = Tensor::zeros(&[n, channels]);
            &zeros
        }
    };
    if prev.shape() != [n, channels] {
        return Err(shape_err(
            "temporal_shift",
            format!("cache {:?} vs [{n} x {channels}]", prev.shape()),
        ));
    }
    let shifted = if channels == d {
        prev.clone()
    } else {
        Tensor::concat(&[prev, &frame.narrow(1, channels, d - channels)?], 1)?
    };
    Ok((shifted, head))
}

pub fn shift_channels(d: usize) -> usize {
    d.div_ceil(8)
}

/// Running sums of causal linear attention for one head.
#[derive(Debug, Clone)]
pub struct LinearAttnHead {
    /// `sum phi(k)^T v`, `[dh x dh]`.
    pub s: Tensor,
    /// `sum phi(k)`, `[1 x dh]`.
    pub z: Tensor,
}

/// One frame of causal linear attention for a single head. The frame's own
/// keys are included, so every token attends to the whole current frame and
/// everything before it.
pub fn linear_attention_step(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    state: Option<&LinearAttnHead>,
) -> Result<(Tensor, LinearAttnHead)> {
    let (n, dh) = (q.shape()[0], q.shape()[1]);
    let fq = q.elu1()?;
    let fk = k.elu1()?;
    let s = fk.t_matmul(v)?;
    let z = Tensor::full(&[1, n], 1.0).matmul(&fk)?;
    // The first frame adds onto an explicit zero state so every frame costs the same.
    let (s, z) = match state {
        Some(prev) => (prev.s.add(&s)?, prev.z.add(&z)?),
        None => (
            Tensor::zeros(s.shape()).add(&s)?,
            Tensor::zeros(z.shape()).add(&z)?,
        ),
    };
    let num = fq.matmul(&s)?;
    let den = fq
        .matmul_t(&z)?
        .recip()?
        .matmul(&Tensor::full(&[1, dh], 1.0))?;
    Ok((num.mul(&den)?, LinearAttnHead { s, z }))
}

/// Per-site cache of a baseline strategy.
#[derive(Debug, Clone)]
pub enum BaselineState {
    WindowKv { cache: VecDeque<(Tensor, Tensor)> },
    TemporalShift { prev: Option<Tensor> },
    LinearAttention { heads: Option<Vec<LinearAttnHead>> },
}

impl BaselineState {
    pub fn new(strategy: Strategy) -> Result<Self> {
        match strategy {
            Strategy::WindowKv => Ok(Self::WindowKv {
                cache: VecDeque::new(),
            }),
            Strategy::TemporalShift => Ok(Self::TemporalShift { prev: None }),
            Strategy::LinearAttention => Ok(Self::LinearAttention { heads: None }),
            other => Err(Error::InvalidAttr {
                op: "baseline_step",
                detail: format!("`{other}` has no per-site baseline state"),
            }),
        }
    }

    pub fn scalars(&self) -> usize {
        match self {
            Self::WindowKv { cache } => cache.iter().map(|(k, v)| k.numel() + v.numel()).sum(),
            Self::TemporalShift { prev } => prev.as_ref().map_or(0, Tensor::numel),
            Self::LinearAttention { heads } => heads
                .as_ref()
                .map_or(0, |hs| hs.iter().map(|h| h.s.numel() + h.z.numel()).sum()),
        }
    }

    pub fn detach(&mut self) {
        match self {
            Self::WindowKv { cache } => cache.iter_mut().for_each(|(k, v)| {
                *k = k.detach();
                *v = v.detach();
            }),
            Self::TemporalShift { prev } => *prev = prev.as_ref().map(Tensor::detach),
            Self::LinearAttention { heads } => {
                if let Some(hs) = heads {
                    hs.iter_mut().for_each(|h| {
                        h.s = h.s.detach();
                        h.z = h.z.detach();
                    });
                }
            }
        }
    }
}

/// One causal step of a baseline at an insertion site. The site's attention
/// parameters drive every variant, added residually to the frame tokens.
pub fn baseline_step(
    p: &Binding,
    params: &MemoryParams,
    state: &mut BaselineState,
    frame: &Tensor,
) -> Result<Tensor> {
    let d = params.d;
    if frame.rank() != 2 || frame.shape()[1] != d {
        return Err(shape_err(
            "baseline_step",
            format!("frame tokens must be [p x {d}], got {:?}", frame.shape()),
        ));
    }
    let attn = &params.attn;
    let normed = frame.layer_norm(LN_EPS)?;
    let mixed = match state {
        BaselineState::WindowKv { cache } => {
            let (q, k, v) = attn.project(p, &normed)?;
            let mut ks = vec![&k];
            let mut vs = vec![&v];
            ks.extend(cache.iter().map(|(k, _)| k));
            vs.extend(cache.iter().map(|(_, v)| v));
            let heads = attn.attend(&q, &Tensor::concat(&ks, 0)?, &Tensor::concat(&vs, 0)?)?;
            cache.push_front((k, v));
            cache.truncate(WINDOW);
            attn.output(p, &heads)?
        }
        BaselineState::TemporalShift { prev } => {
            let (shifted, head) = temporal_shift(frame, prev.as_ref(), shift_channels(d))?;
            *prev = Some(head);
            attn.self_attention(p, &shifted.layer_norm(LN_EPS)?)?
        }
        BaselineState::LinearAttention { heads } => {
            let (q, k, v) = attn.project(p, &normed)?;
            let dh = attn.head_dim();
            let mut outs = Vec::with_capacity(attn.heads);
            let mut next = Vec::with_capacity(attn.heads);
            for h in 0..attn.heads {
                let prev = heads.as_ref().map(|hs| &hs[h]);
                let (o, st) = linear_attention_step(
                    &q.narrow(1, h * dh, dh)?,
                    &k.narrow(1, h * dh, dh)?,
                    &v.narrow(1, h * dh, dh)?,
                    prev,
                )?;
                outs.push(o);
                next.push(st);
            }
            *heads = Some(next);
            attn.output(p, &Tensor::concat(&outs.iter().collect::<Vec<_>>(), 1)?)?
        }
    };
    frame.add(&mixed)
}

/// Joint full attention over the tokens of several frames at a site; used by
/// the sliding-window baseline, which reruns the network over its buffer.
pub fn window_attention(p: &Binding, params: &MemoryParams, frames: &Tensor) -> Result<Tensor> {
    frames.add(&params.attn.self_attention(p, &frames.layer_norm(LN_EPS)?)?)
}

/// Per-stream temporal state for every (layer, step, branch) site.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    pub strategy: Strategy,
    pub h: usize,
    pub w: usize,
    pub layers: usize,
    pub steps: usize,
    memories: BTreeMap<MemoryKey, SpatialTemporalMemory>,
    baselines: BTreeMap<MemoryKey, BaselineState>,
    /// Raw inputs of the last frames, per (step, branch).
    windows: BTreeMap<(usize, Branch), VecDeque<Tensor>>,
    updates: BTreeMap<MemoryKey, u64>,
}

impl MemoryBank {
    pub fn new(strategy: Strategy, h: usize, w: usize, layers: usize, steps: usize) -> Self {
        Self {
            strategy,
            h,
            w,
            layers,
            steps,
            memories: BTreeMap::new(),
            baselines: BTreeMap::new(),
            windows: BTreeMap::new(),
            updates: BTreeMap::new(),
        }
    }

    fn check_key(&self, key: MemoryKey) -> Result<()> {
        if key.layer >= self.layers || key.step >= self.steps {
            return Err(Error::OutOfRange {
                what: "memory key",
                value: (key.layer.max(key.step)) as i64,
                range: format!("layer < {}, step < {} (got {key})", self.layers, self.steps),
            });
        }
        Ok(())
    }

    /// Existing memory for `key`, or a fresh initialization recorded in the bank.
    pub fn get_or_init(
        &mut self,
        key: MemoryKey,
        p: &Binding,
        params: &MemoryParams,
    ) -> Result<SpatialTemporalMemory> {
        self.check_key(key)?;
        if let Some(m) = self.memories.get(&key) {
            return Ok(m.clone());
        }
        // M^0 depends only on parameters, so it is not charged to any frame.
        let m = {
            let _paused = crate::tensor::flops::Paused::begin();
            memory_init(p, params, self.h, self.w)?
        };
        self.memories.insert(key, m.clone());
        Ok(m)
    }

    pub fn store(&mut self, key: MemoryKey, mem: SpatialTemporalMemory) -> Result<()> {
        self.check_key(key)?;
        if mem.h != self.h || mem.w != self.w {
            return Err(shape_err(
                "memory_bank",
                format!("grid {}x{} vs bank {}x{}", mem.h, mem.w, self.h, self.w),
            ));
        }
        if !mem.state.is_finite() {
            return Err(Error::NonFinite(format!("memory {key}")));
        }
        self.memories.insert(key, mem);
        *self.updates.entry(key).or_default() += 1;
        Ok(())
    }

    pub fn get(&self, key: &MemoryKey) -> Option<&SpatialTemporalMemory> {
        self.memories.get(key)
    }

    pub fn baseline(&mut self, key: MemoryKey) -> Result<&mut BaselineState> {
        self.check_key(key)?;
        if !self.baselines.contains_key(&key) {
            self.baselines
                .insert(key, BaselineState::new(self.strategy)?);
        }
        *self.updates.entry(key).or_default() += 1;
        Ok(self.baselines.get_mut(&key).expect("inserted above"))
    }

    /// Appends `x` to the raw window of `(step, branch)` and returns the
    /// buffered frames, oldest first, including `x`.
    pub fn push_window(&mut self, step: usize, branch: Branch, x: &Tensor) -> Vec<Tensor> {
        let buf = self.windows.entry((step, branch)).or_default();
        buf.push_back(x.clone());
        while buf.len() > WINDOW {
            buf.pop_front();
        }
        buf.iter().cloned().collect()
    }

    pub fn updates(&self, key: &MemoryKey) -> u64 {
        self.updates.get(key).copied().unwrap_or(0)
    }

    /// Number of populated sites.
    pub fn len(&self) -> usize {
        self.memories.len() + self.baselines.len() + self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> impl Iterator<Item = &MemoryKey> {
        self.memories.keys()
    }

    /// Scalars of cached temporal state across all sites.
    pub fn state_scalars(&self) -> usize {
        self.memories
            .values()
            .map(|m| m.state.numel())
            .sum::<usize>()
            + self
                .baselines
                .values()
                .map(BaselineState::scalars)
                .sum::<usize>()
            + self
                .windows
                .values()
                .flat_map(|b| b.iter().map(Tensor::numel))
                .sum::<usize>()
    }

    pub fn reset(&mut self) {
        self.memories.clear();
        self.baselines.clear();
        self.windows.clear();
        self.updates.clear();
    }

    /// Cuts every gradient path into the stored state.
    pub fn detach_all(&mut self) {
        for m in self.memories.values_mut() {
            *m = propagate_across_clips(m);
        }
        self.baselines.values_mut().for_each(BaselineState::detach);
        for buf in self.windows.values_mut() {
            buf.iter_mut().for_each(|t| *t = t.detach());
        }
    }

    /// Memory states as an archive keyed by `layer.step.branch`.
    pub fn snapshot(&self) -> TensorArchive {
        let mut ar = TensorArchive::new(serde_json::json!({
            "kind": "memory_bank",
            "strategy": self.strategy,
            "h": self.h,
            "w": self.w,
            "layers": self.layers,
            "steps": self.steps,
            "updates": self.updates.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
        }));
        for (k, m) in &self.memories {
            ar.push(k.to_string(), m.state.detach(), false);
        }
        ar
    }

    pub fn restore(ar: &TensorArchive) -> Result<Self> {
        let m = &ar.meta;
        let field = |name: &str| {
            m.get(name)
                .and_then(serde_json::Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| Error::Config(format!("bank snapshot missing `{name}`")))
        };
        let strategy: Strategy =
            serde_json::from_value(m.get("strategy").cloned().unwrap_or_default())?;
        let mut bank = Self::new(
            strategy,
            field("h")?,
            field("w")?,
            field("layers")?,
            field("steps")?,
        );
        for (name, t, _) in &ar.entries {
            let key: MemoryKey = name.parse()?;
            bank.check_key(key)?;
            bank.memories.insert(
                key,
                SpatialTemporalMemory {
                    state: t.clone(),
                    h: bank.h,
                    w: bank.w,
                },
            );
        }
        if let Some(u) = m.get("updates").and_then(serde_json::Value::as_object) {
            for (k, v) in u {
                bank.updates.insert(k.parse()?, v.as_u64().unwrap_or(0));
            }
        }
        Ok(bank)
    }
}
