//! Parameter storage and the neural building blocks the denoiser and the
//! memory attention are assembled from.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{out_of_range, shape_err, Result};
use crate::rng::SeedTree;
use crate::tensor::{Tape, Tensor};

pub const LN_EPS: f32 = 1e-5;
pub const INIT_STD: f32 = 0.02;

/// Which half of the parameter partition a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Base,
    Memory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    pub trainable: bool,
}

/// Flat, ordered, named parameter list.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            group,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(shape_err(
                "param_set",
                format!(
                    "`{}` expects {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    value.shape()
                ),
            ));
        }
        p.value = value.detach();
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Marks every parameter of `group` trainable or frozen.
    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.trainable = trainable;
        }
    }

    pub fn set_trainable_id(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn scalar_count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Constant binding for inference.
    pub fn bind(&self) -> Binding {
        Binding {
            values: self.params.iter().map(|p| p.value.clone()).collect(),
        }
    }

    /// Binding in which trainable parameters are leaves of `tape`.
    pub fn bind_on(&self, tape: &Tape) -> Binding {
        Binding {
            values: self
                .params
                .iter()
                .map(|p| {
                    if p.trainable {
                        tape.leaf(&p.value)
                    } else {
                        p.value.clone()
                    }
                })
                .collect(),
        }
    }
}

/// Parameter values for one forward pass, indexed by [`ParamId`].
#[derive(Clone)]
pub struct Binding {
    values: Vec<Tensor>,
}

impl Binding {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn replace(&mut self, id: ParamId, value: Tensor) {
        self.values[id.0] = value;
    }
}

/// Draws initial parameter values.
pub struct Init {
    rng: rand_chacha::ChaCha8Rng,
    normal: Normal<f32>,
}

impl Init {
    pub fn new(seeds: &SeedTree, label: &str) -> Self {
        Self {
            rng: seeds.rng(label, 0),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }
}

/// `y = x W^T + b` with `W: [out x in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        zero: bool,
    ) -> Self {
        let w = if zero {
            Tensor::zeros(&[out_dim, in_dim])
        } else {
            init.gaussian(&[out_dim, in_dim])
        };
        Self {
            weight: store.add(format!("{name}.weight"), w, group),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), group),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, p: &Binding, x: &Tensor) -> Result<Tensor> {
        x.matmul_t(p.get(self.weight))?.add_row(p.get(self.bias))
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, group: ParamGroup) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0), group),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]), group),
        }
    }

    pub fn forward(&self, p: &Binding, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(LN_EPS)?
            .mul_row(p.get(self.gain))?
            .add_row(p.get(self.bias))
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    /// `out_proj` starts at zero when `zero_out` is set, so a residual
    /// attention branch is initially inert.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d: usize,
        heads: usize,
        group: ParamGroup,
        zero_out: bool,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("model dim {d} not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            q_proj: Linear::new(store, init, &format!("{name}.q"), d, d, group, false),
            k_proj: Linear::new(store, init, &format!("{name}.k"), d, d, group, false),
            v_proj: Linear::new(store, init, &format!("{name}.v"), d, d, group, false),
            out_proj: Linear::new(store, init, &format!("{name}.out"), d, d, group, zero_out),
            heads,
            d,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != self.d {
            return Err(shape_err(
                "attention",
                format!("expected [n x {}] tokens, got {:?}", self.d, x.shape()),
            ));
        }
        Ok(())
    }

    /// Query, key and value projections of `x`.
    pub fn project(&self, p: &Binding, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        self.check_width(x)?;
        Ok((
            self.q_proj.forward(p, x)?,
            self.k_proj.forward(p, x)?,
            self.v_proj.forward(p, x)?,
        ))
    }

    /// Per-head `softmax(q k^T / sqrt(d_head)) v`, heads concatenated.
    /// `q: [n x d]`, `k, v: [m x d]`.
    pub fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow(1, h * dh, dh)?;
            let kh = k.narrow(1, h * dh, dh)?;
            let vh = v.narrow(1, h * dh, dh)?;
            let weights = qh.matmul_t(&kh)?.scale(scale)?.softmax()?;
            outs.push(weights.matmul(&vh)?);
        }
        Tensor::concat(&outs.iter().collect::<Vec<_>>(), 1)
    }

    pub fn output(&self, p: &Binding, heads: &Tensor) -> Result<Tensor> {
        self.out_proj.forward(p, heads)
    }

    /// Full self-attention over `x: [n x d]`.
    pub fn self_attention(&self, p: &Binding, x: &Tensor) -> Result<Tensor> {
        let (q, k, v) = self.project(p, x)?;
        self.output(p, &self.attend(&q, &k, &v)?)
    }
}

/// Pre-norm transformer block with additive conditioning.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        let g = ParamGroup::Base;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, g),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), d, heads, g, true)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, g),
            fc1: Linear::new(store, init, &format!("{name}.fc1"), d, 4 * d, g, false),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), 4 * d, d, g, true),
        })
    }

    /// `h = x + attn(norm(x + cond))`, then `h + ffn(norm(h))`.
    pub fn forward(&self, p: &Binding, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let d = self.attn.d;
        if cond.shape() != [d] {
            return Err(shape_err(
                "transformer_block",
                format!("cond must be [{d}], got {:?}", cond.shape()),
            ));
        }
        let a = self
            .attn
            .self_attention(p, &self.norm1.forward(p, &x.add_row(cond)?)?)?;
        let h = x.add(&a)?;
        let f = self.fc2.forward(
            p,
            &self.fc1.forward(p, &self.norm2.forward(p, &h)?)?.gelu()?,
        )?;
        h.add(&f)
    }
}

/// Sinusoidal encoding of a step index, `d` values (half sines, half cosines).
pub fn sinusoidal(t: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut out = vec![0.0f32; d];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    Tensor::from_vec(out)
}

/// Prompt table (row 0 is the null prompt) and the time-step MLP.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTables {
    pub prompt_table: ParamId,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    pub vocab: usize,
    pub d: usize,
}

pub const NULL_PROMPT: usize = 0;

impl EmbeddingTables {
    pub fn new(store: &mut ParamStore, init: &mut Init, vocab: usize, d: usize) -> Self {
        let g = ParamGroup::Base;
        Self {
            prompt_table: store.add("embed.prompt", init.gaussian(&[vocab, d]), g),
            time_fc1: Linear::new(store, init, "embed.time1", d, d, g, false),
            time_fc2: Linear::new(store, init, "embed.time2", d, d, g, false),
            vocab,
            d,
        }
    }

    pub fn time_embedding(&self, p: &Binding, t: usize, total: usize) -> Result<Tensor> {
        if t < 1 || t > total {
            return Err(out_of_range("time step", t as i64, format!("1..={total}")));
        }
        let enc = sinusoidal(t, self.d).reshape(&[1, self.d])?;
        let h = self.time_fc1.forward(p, &enc)?.gelu()?;
        self.time_fc2.forward(p, &h)?.reshape(&[self.d])
    }

    pub fn prompt_embedding(&self, p: &Binding, prompt: usize) -> Result<Tensor> {
        if prompt >= self.vocab {
            return Err(out_of_range(
                "prompt index",
                prompt as i64,
                format!("0..{}", self.vocab),
            ));
        }
        let mut onehot = vec![0.0; self.vocab];
        onehot[prompt] = 1.0;
        Tensor::new(vec![1, self.vocab], onehot)?
            .matmul(p.get(self.prompt_table))?
            .reshape(&[self.d])
    }
}

/// Grid position relative to the map center: `[i - h/2, j - w/2]`.
pub fn pos2d(i: usize, j: usize, h: usize, w: usize) -> Result<Tensor> {
    if i >= h {
        return Err(out_of_range("grid row", i as i64, format!("0..{h}")));
    }
    if j >= w {
        return Err(out_of_range("grid column", j as i64, format!("0..{w}")));
    }
    Ok(Tensor::from_vec(vec![
        i as f32 - h as f32 / 2.0,
        j as f32 - w as f32 / 2.0,
    ]))
}
