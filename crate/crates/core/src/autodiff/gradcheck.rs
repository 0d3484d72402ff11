use crate::error::Result;

use super::{Tape, Tensor, Var};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the backward-pass gradient of the scalar `f(t)` against
/// fourth-order central differences
/// `(f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h` at every coordinate of
/// `t`; returns the max relative error.
pub fn grad_check<F>(f: F, t: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..t.numel()).collect();
    grad_check_coords(f, t, eps, &coords)
}

/// [`grad_check`] restricted to the listed flat coordinates.
pub fn grad_check_coords<F>(f: F, t: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |x: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data()[0])
    };
    let mut tape = Tape::new();
    let v = tape.param(t.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);

    let mut worst = 0.0f64;
    let mut probe = t.clone();
    for &i in coords {
        let orig = probe.data()[i];
        let mut at = |k: f64| {
            probe.data_mut()[i] = orig + k * eps;
            eval(&probe)
        };
        let (m2, m1, p1, p2) = (at(-2.0)?, at(-1.0)?, at(1.0)?, at(2.0)?);
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic[i], stencil(m2, m1, p1, p2, eps)));
    }
    Ok(worst)
}

/// Fourth-order central difference from `f` at `x - 2h, x - h, x + h, x + 2h`.
pub fn stencil(m2: f64, m1: f64, p1: f64, p2: f64, h: f64) -> f64 {
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
}
