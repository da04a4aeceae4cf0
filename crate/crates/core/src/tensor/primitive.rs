//! The closed primitive set: forward kernels, vector-Jacobian products and
//! analytic FLOP costs.

use crate::error::{shape_err, Error, Result};

/// One differentiable primitive together with its attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    /// `[.., d] + [d]`, the right operand broadcast over leading axes.
    AddRow,
    /// `[.., d] * [d]`.
    MulRow,
    Scale(f32),
    MatMul {
        trans_a: bool,
        trans_b: bool,
    },
    /// Axis permutation; the 2-D transpose is `perm = [1, 0]`.
    Transpose {
        perm: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Concat {
        axis: usize,
    },
    /// Contiguous slice `start..start+len` along `axis`. `split` is built on it.
    Narrow {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Softmax over the last axis.
    Softmax,
    /// Affine-free layer normalization over the last axis.
    LayerNorm {
        eps: f32,
    },
    Gelu,
    /// `elu(x) + 1`, the positive feature map of linear attention.
    Elu1,
    /// Elementwise `1 / x`.
    Recip,
    Sum,
    Mean,
    MeanSquare,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::AddRow => "add_row",
            Primitive::MulRow => "mul_row",
            Primitive::Scale(_) => "scale",
            Primitive::MatMul { .. } => "matmul",
            Primitive::Transpose { .. } => "transpose",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Concat { .. } => "concat",
            Primitive::Narrow { .. } => "narrow",
            Primitive::Softmax => "softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Gelu => "gelu",
            Primitive::Elu1 => "elu1",
            Primitive::Recip => "recip",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::MeanSquare => "mean_square",
        }
    }

    /// Parses an attribute-free primitive name. Primitives that carry
    /// attributes take their defaults (`scale` = 1, `matmul` untransposed,
    /// `transpose` = 2-D swap, `concat` along axis 0, `layer_norm` eps 1e-5).
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "add_row" => Primitive::AddRow,
            "mul_row" => Primitive::MulRow,
            "scale" => Primitive::Scale(1.0),
            "matmul" => Primitive::MatMul {
                trans_a: false,
                trans_b: false,
            },
            "transpose" => Primitive::Transpose { perm: vec![1, 0] },
            "concat" => Primitive::Concat { axis: 0 },
            "softmax" => Primitive::Softmax,
            "layer_norm" => Primitive::LayerNorm { eps: 1e-5 },
            "gelu" => Primitive::Gelu,
            "elu1" => Primitive::Elu1,
            "recip" => Primitive::Recip,
            "sum" => Primitive::Sum,
            "mean" => Primitive::Mean,
            "mean_square" => Primitive::MeanSquare,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }

    pub fn arity(&self) -> usize {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::AddRow
            | Primitive::MulRow
            | Primitive::MatMul { .. } => 2,
            Primitive::Concat { .. } => usize::MAX,
            _ => 1,
        }
    }
}

/// Shape and data of an operand as seen by a kernel.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub shape: &'a [usize],
    pub data: &'a [f32],
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(shape_err(
            op,
            format!("needs a non-empty last axis, got {shape:?}"),
        )),
    }
}

/// Output shape of `prim` applied to operands of the given shapes.
pub(crate) fn infer_shape(prim: &Primitive, shapes: &[&[usize]]) -> Result<Vec<usize>> {
    let name = prim.name();
    if prim.arity() != usize::MAX && shapes.len() != prim.arity() {
        return Err(Error::InvalidAttr {
            op: name,
            detail: format!("expects {} inputs, got {}", prim.arity(), shapes.len()),
        });
    }
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            if shapes[0] != shapes[1] {
                return Err(shape_err(
                    name,
                    format!("{:?} vs {:?}", shapes[0], shapes[1]),
                ));
            }
            Ok(shapes[0].to_vec())
        }
        Primitive::AddRow | Primitive::MulRow => {
            let d = last_dim(name, shapes[0])?;
            if shapes[1] != [d] {
                return Err(shape_err(
                    name,
                    format!(
                        "row operand {:?} does not match last axis {d} of {:?}",
                        shapes[1], shapes[0]
                    ),
                ));
            }
            Ok(shapes[0].to_vec())
        }
        Primitive::Scale(_)
        | Primitive::Softmax
        | Primitive::Gelu
        | Primitive::Elu1
        | Primitive::Recip => {
            if matches!(prim, Primitive::Softmax) {
                last_dim(name, shapes[0])?;
            }
            Ok(shapes[0].to_vec())
        }
        Primitive::LayerNorm { eps } => {
            if !(*eps > 0.0) {
                return Err(Error::InvalidAttr {
                    op: name,
                    detail: format!("eps must be positive, got {eps}"),
                });
            }
            last_dim(name, shapes[0])?;
            Ok(shapes[0].to_vec())
        }
        Primitive::MatMul { trans_a, trans_b } => {
            let (a, b) = (shapes[0], shapes[1]);
            if a.len() != 2 || b.len() != 2 {
                return Err(shape_err(
                    name,
                    format!("operands must be 2-D, got {a:?} and {b:?}"),
                ));
            }
            let (m, ka) = if *trans_a { (a[1], a[0]) } else { (a[0], a[1]) };
            let (kb, n) = if *trans_b { (b[1], b[0]) } else { (b[0], b[1]) };
            if ka != kb {
                return Err(shape_err(
                    name,
                    format!("inner dimensions differ: {ka} vs {kb} (shapes {a:?}, {b:?})"),
                ));
            }
            Ok(vec![m, n])
        }
        Primitive::Transpose { perm } => {
            let s = shapes[0];
            let mut seen = vec![false; s.len()];
            if perm.len() != s.len()
                || perm
                    .iter()
                    .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
            {
                return Err(Error::InvalidAttr {
                    op: name,
                    detail: format!("{perm:?} is not a permutation of rank {}", s.len()),
                });
            }
            Ok(perm.iter().map(|&p| s[p]).collect())
        }
        Primitive::Reshape { shape } => {
            if numel(shape) != numel(shapes[0]) || shape.iter().any(|&d| d == 0) {
                return Err(shape_err(
                    name,
                    format!("cannot reshape {:?} into {shape:?}", shapes[0]),
                ));
            }
            Ok(shape.clone())
        }
        Primitive::Concat { axis } => {
            let first = shapes.first().ok_or_else(|| shape_err(name, "no inputs"))?;
            if *axis >= first.len() {
                return Err(Error::InvalidAttr {
                    op: name,
                    detail: format!("axis {axis} out of range for rank {}", first.len()),
                });
            }
            let mut out = first.to_vec();
            out[*axis] = 0;
            for s in shapes {
                if s.len() != first.len()
                    || s.iter()
                        .zip(first.iter())
                        .enumerate()
                        .any(|(i, (x, y))| i != *axis && x != y)
                {
                    return Err(shape_err(
                        name,
                        format!("{s:?} incompatible with {first:?} along axis {axis}"),
                    ));
                }
                out[*axis] += s[*axis];
            }
            Ok(out)
        }
        Primitive::Narrow { axis, start, len } => {
            let s = shapes[0];
            if *axis >= s.len() || *len == 0 || start + len > s[*axis] {
                return Err(Error::InvalidAttr {
                    op: name,
                    detail: format!("slice {start}..{} on axis {axis} of {s:?}", start + len),
                });
            }
            let mut out = s.to_vec();
            out[*axis] = *len;
            Ok(out)
        }
        Primitive::Sum | Primitive::Mean | Primitive::MeanSquare => Ok(vec![1]),
    }
}

/// Analytic floating-point operation count for one forward application.
pub(crate) fn flop_cost(prim: &Primitive, shapes: &[&[usize]], out_shape: &[usize]) -> u64 {
    let n = numel(out_shape) as u64;
    match prim {
        Primitive::MatMul { trans_a, .. } => {
            let a = shapes[0];
            let k = if *trans_a { a[0] } else { a[1] } as u64;
            2 * out_shape[0] as u64 * out_shape[1] as u64 * k
        }
        Primitive::Softmax => 5 * n,
        Primitive::LayerNorm { .. } => 8 * n,
        Primitive::Gelu => 8 * n,
        Primitive::Add
        | Primitive::Sub
        | Primitive::Mul
        | Primitive::AddRow
        | Primitive::MulRow
        | Primitive::Scale(_)
        | Primitive::Elu1
        | Primitive::Recip => n,
        Primitive::Sum | Primitive::Mean => numel(shapes[0]) as u64,
        Primitive::MeanSquare => 2 * numel(shapes[0]) as u64,
        Primitive::Transpose { .. }
        | Primitive::Reshape { .. }
        | Primitive::Concat { .. }
        | Primitive::Narrow { .. } => 0,
    }
}

/// Row-major strides.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `c += a * b` for strided row-major views, `a` is `m x k`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: all views are bounds-checked by the callers' shape inference;
    // the largest offset touched is (rows-1)*rs + (cols-1)*cs < len.
    debug_assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn mat_strides(shape: &[usize], trans: bool) -> (usize, usize) {
    let cols = shape[1];
    if trans {
        (1, cols)
    } else {
        (cols, 1)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let u = GELU_C * (x + GELU_A * x * x * x);
    (0.5 * x * (1.0 + u.tanh())) as f32
}

fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du) as f32
}

/// Permutes `src` (shape `shape`) by `perm` into a new buffer.
fn permute(src: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Forward kernel. Shapes have already been validated by [`infer_shape`].
pub(crate) fn forward(prim: &Primitive, ins: &[Operand<'_>], out_shape: &[usize]) -> Vec<f32> {
    let n_out = numel(out_shape);
    match prim {
        Primitive::Add => ins[0]
            .data
            .iter()
            .zip(ins[1].data)
            .map(|(a, b)| a + b)
            .collect(),
        Primitive::Sub => ins[0]
            .data
            .iter()
            .zip(ins[1].data)
            .map(|(a, b)| a - b)
            .collect(),
        Primitive::Mul => ins[0]
            .data
            .iter()
            .zip(ins[1].data)
            .map(|(a, b)| a * b)
            .collect(),
        Primitive::AddRow | Primitive::MulRow => {
            let row = ins[1].data;
            let d = row.len();
            let add = matches!(prim, Primitive::AddRow);
            ins[0]
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| if add { x + row[i % d] } else { x * row[i % d] })
                .collect()
        }
        Primitive::Scale(s) => ins[0].data.iter().map(|x| x * s).collect(),
        Primitive::MatMul { trans_a, trans_b } => {
            let (m, n) = (out_shape[0], out_shape[1]);
            let k = if *trans_a {
                ins[0].shape[0]
            } else {
                ins[0].shape[1]
            };
            let mut out = vec![0.0f32; m * n];
            gemm_acc(
                m,
                k,
                n,
                ins[0].data,
                mat_strides(ins[0].shape, *trans_a),
                ins[1].data,
                mat_strides(ins[1].shape, *trans_b),
                &mut out,
                (n, 1),
            );
            out
        }
        Primitive::Transpose { perm } => permute(ins[0].data, ins[0].shape, perm),
        Primitive::Reshape { .. } => ins[0].data.to_vec(),
        Primitive::Concat { axis } => {
            let (outer, _, inner) = split_axis(out_shape, *axis);
            let mut out = Vec::with_capacity(n_out);
            for o in 0..outer {
                for op in ins {
                    let chunk = op.shape[*axis] * inner;
                    out.extend_from_slice(&op.data[o * chunk..(o + 1) * chunk]);
                }
            }
            out
        }
        Primitive::Narrow { axis, start, len } => {
            let (outer, alen, inner) = split_axis(ins[0].shape, *axis);
            let mut out = Vec::with_capacity(n_out);
            for o in 0..outer {
                let base = o * alen * inner + start * inner;
                out.extend_from_slice(&ins[0].data[base..base + len * inner]);
            }
            out
        }
        Primitive::Softmax => {
            let d = *ins[0].shape.last().unwrap();
            let mut out = vec![0.0f32; n_out];
            let mut exps = vec![0.0f64; d];
            for (row, dst) in ins[0].data.chunks(d).zip(out.chunks_mut(d)) {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0f64;
                for (e, &x) in exps.iter_mut().zip(row) {
                    *e = ((x - max) as f64).exp();
                    total += *e;
                }
                for (o, e) in dst.iter_mut().zip(&exps) {
                    *o = (e / total) as f32;
                }
            }
            out
        }
        Primitive::LayerNorm { eps } => {
            let d = *ins[0].shape.last().unwrap();
            let mut out = vec![0.0f32; n_out];
            for (row, dst) in ins[0].data.chunks(d).zip(out.chunks_mut(d)) {
                let (mean, inv) = row_moments(row, *eps);
                for (o, &x) in dst.iter_mut().zip(row) {
                    *o = ((x as f64 - mean) * inv) as f32;
                }
            }
            out
        }
        Primitive::Gelu => ins[0].data.iter().map(|&x| gelu(x)).collect(),
        Primitive::Elu1 => ins[0]
            .data
            .iter()
            .map(|&x| if x > 0.0 { x + 1.0 } else { x.exp() })
            .collect(),
        Primitive::Recip => ins[0].data.iter().map(|&x| 1.0 / x).collect(),
        Primitive::Sum => vec![ins[0].data.iter().map(|&x| x as f64).sum::<f64>() as f32],
        Primitive::Mean => {
            let n = ins[0].data.len().max(1) as f64;
            vec![(ins[0].data.iter().map(|&x| x as f64).sum::<f64>() / n) as f32]
        }
        Primitive::MeanSquare => {
            let n = ins[0].data.len().max(1) as f64;
            vec![
                (ins[0]
                    .data
                    .iter()
                    .map(|&x| (x as f64) * (x as f64))
                    .sum::<f64>()
                    / n) as f32,
            ]
        }
    }
}

fn row_moments(row: &[f32], eps: f32) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().map(|&x| x as f64).sum::<f64>() / d;
    let var = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps as f64).sqrt())
}

/// Accumulates the vector-Jacobian product for input `which` into `acc`.
pub(crate) fn vjp(
    prim: &Primitive,
    ins: &[Operand<'_>],
    out: Operand<'_>,
    g: &[f32],
    which: usize,
    acc: &mut [f32],
) {
    match prim {
        Primitive::Add => add_into(acc, g),
        Primitive::Sub => {
            if which == 0 {
                add_into(acc, g)
            } else {
                acc.iter_mut().zip(g).for_each(|(a, g)| *a -= g)
            }
        }
        Primitive::Mul => {
            let other = ins[1 - which].data;
            acc.iter_mut()
                .zip(g.iter().zip(other))
                .for_each(|(a, (g, o))| *a += g * o)
        }
        Primitive::AddRow => {
            if which == 0 {
                add_into(acc, g)
            } else {
                let d = acc.len();
                let mut sums = vec![0.0f64; d];
                for (i, &gv) in g.iter().enumerate() {
                    sums[i % d] += gv as f64;
                }
                acc.iter_mut().zip(sums).for_each(|(a, s)| *a += s as f32);
            }
        }
        Primitive::MulRow => {
            let row = ins[1].data;
            let d = row.len();
            if which == 0 {
                acc.iter_mut()
                    .enumerate()
                    .for_each(|(i, a)| *a += g[i] * row[i % d]);
            } else {
                let mut sums = vec![0.0f64; d];
                for (i, (&gv, &x)) in g.iter().zip(ins[0].data).enumerate() {
                    sums[i % d] += gv as f64 * x as f64;
                }
                acc.iter_mut().zip(sums).for_each(|(a, s)| *a += s as f32);
            }
        }
        Primitive::Scale(s) => acc.iter_mut().zip(g).for_each(|(a, g)| *a += g * s),
        Primitive::MatMul { trans_a, trans_b } => {
            let (m, n) = (out.shape[0], out.shape[1]);
            let (a, b) = (ins[0], ins[1]);
            let k = if *trans_a { a.shape[0] } else { a.shape[1] };
            let (rsa, csa) = mat_strides(a.shape, *trans_a);
            let (rsb, csb) = mat_strides(b.shape, *trans_b);
            if which == 0 {
                // d(op A) = G * op(B)^T, written through op's strides.
                let dst = if *trans_a { (1, m) } else { (k, 1) };
                gemm_acc(m, n, k, g, (n, 1), b.data, (csb, rsb), acc, dst);
            } else {
                // d(op B) = op(A)^T * G.
                let dst = if *trans_b { (1, k) } else { (n, 1) };
                gemm_acc(k, m, n, a.data, (csa, rsa), g, (n, 1), acc, dst);
            }
        }
        Primitive::Transpose { perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let back = permute(g, out.shape, &inv);
            add_into(acc, &back);
        }
        Primitive::Reshape { .. } => add_into(acc, g),
        Primitive::Concat { axis } => {
            let (outer, total, inner) = split_axis(out.shape, *axis);
            let offset: usize = ins[..which].iter().map(|o| o.shape[*axis]).sum();
            let len = ins[which].shape[*axis];
            for o in 0..outer {
                let src = o * total * inner + offset * inner;
                let dst = o * len * inner;
                add_into(&mut acc[dst..dst + len * inner], &g[src..src + len * inner]);
            }
        }
        Primitive::Narrow { axis, start, len } => {
            let (outer, alen, inner) = split_axis(ins[0].shape, *axis);
            for o in 0..outer {
                let dst = o * alen * inner + start * inner;
                let src = o * len * inner;
                add_into(&mut acc[dst..dst + len * inner], &g[src..src + len * inner]);
            }
        }
        Primitive::Softmax => {
            let d = *out.shape.last().unwrap();
            for ((y, gy), a) in out.data.chunks(d).zip(g.chunks(d)).zip(acc.chunks_mut(d)) {
                let dot: f64 = y.iter().zip(gy).map(|(&y, &g)| y as f64 * g as f64).sum();
                for ((a, &y), &gv) in a.iter_mut().zip(y).zip(gy) {
                    *a += (y as f64 * (gv as f64 - dot)) as f32;
                }
            }
        }
        Primitive::LayerNorm { eps } => {
            let d = *out.shape.last().unwrap();
            let x = ins[0].data;
            for ((row, gy), a) in x.chunks(d).zip(g.chunks(d)).zip(acc.chunks_mut(d)) {
                let (mean, inv) = row_moments(row, *eps);
                let dm = d as f64;
                let ys: Vec<f64> = row.iter().map(|&v| (v as f64 - mean) * inv).collect();
                let g_mean: f64 = gy.iter().map(|&v| v as f64).sum::<f64>() / dm;
                let gy_mean: f64 = gy.iter().zip(&ys).map(|(&g, y)| g as f64 * y).sum::<f64>() / dm;
                for ((a, &gv), y) in a.iter_mut().zip(gy).zip(&ys) {
                    *a += (inv * (gv as f64 - g_mean - y * gy_mean)) as f32;
                }
            }
        }
        Primitive::Gelu => acc
            .iter_mut()
            .zip(g.iter().zip(ins[0].data))
            .for_each(|(a, (g, &x))| *a += g * gelu_grad(x)),
        Primitive::Elu1 => acc
            .iter_mut()
            .zip(g.iter().zip(ins[0].data))
            .for_each(|(a, (g, &x))| *a += if x > 0.0 { *g } else { g * x.exp() }),
        Primitive::Recip => acc
            .iter_mut()
            .zip(g.iter().zip(ins[0].data))
            .for_each(|(a, (g, &x))| *a -= g / (x * x)),
        Primitive::Sum => acc.iter_mut().for_each(|a| *a += g[0]),
        Primitive::Mean => {
            let s = g[0] / acc.len() as f32;
            acc.iter_mut().for_each(|a| *a += s);
        }
        Primitive::MeanSquare => {
            let s = 2.0 * g[0] as f64 / acc.len() as f64;
            acc.iter_mut()
                .zip(ins[0].data)
                .for_each(|(a, &x)| *a += (s * x as f64) as f32);
        }
    }
}

fn add_into(acc: &mut [f32], g: &[f32]) {
    acc.iter_mut().zip(g).for_each(|(a, g)| *a += g);
}
