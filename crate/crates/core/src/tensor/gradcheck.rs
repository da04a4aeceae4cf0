use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of the scalar function `f` at `x`.
///
/// The perturbation actually representable in `f32` is used as the step, and
/// the quotient is formed in `f64`.
pub fn finite_difference_grad<F>(f: F, x: &Tensor, eps: f32) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidAttr {
            op: "finite_difference_grad",
            detail: format!("eps must be positive, got {eps}"),
        });
    }
    let base = x.detach().to_vec();
    let mut grad = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        let plus = base[i] + eps;
        let minus = base[i] - eps;
        probe[i] = plus;
        let f_plus = eval(&f, x.shape(), &probe)?;
        probe[i] = minus;
        let f_minus = eval(&f, x.shape(), &probe)?;
        probe[i] = base[i];
        let h = plus as f64 - minus as f64;
        grad.push(((f_plus - f_minus) / h) as f32);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

fn eval<F>(f: &F, shape: &[usize], data: &[f32]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let out = f(&Tensor::from_parts(shape.to_vec(), data.to_vec()))?;
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss(out.shape().to_vec()));
    }
    Ok(out.item() as f64)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares the reverse-mode gradient of a tensor-valued `f` at `x` with
/// central differences and returns the norm-wise relative error.
///
/// The scalar probed is `sum(w * (f(x') - f(x)))` for fixed random weights
/// `w`. Subtracting the base value keeps the probe near zero so its `f32`
/// rounding stays far below the perturbation signal.
pub fn check_gradient<F>(f: F, x: &Tensor, eps: f32, seed: u64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let base = f(&x.detach())?.detach();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = base.map(|_| rng.random_range(-1.0f32..1.0));
    let probe = |y: Tensor| -> Result<Tensor> { y.sub(&base)?.mul(&weights)?.sum() };
    let tape = Tape::new();
    let leaf = tape.leaf(x);
    let analytic = probe(f(&leaf)?)?
        .backward()?
        .get(&leaf)
        .expect("leaf registered on this tape");
    let numeric = finite_difference_grad(|x| probe(f(x)?), x, eps)?;
    Ok(relative_error(&analytic, &numeric))
}
