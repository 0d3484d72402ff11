use super::Real;

/// Pointwise operation kinds exposed through [`super::Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise<T> {
    Add,
    Mul,
    Relu,
    Sigmoid,
    /// `scale * x + shift`
    ScalarAffine { scale: T, shift: T },
    /// `sigma * (exp(-(x - 0.5)^2) - exp(-1/4)) + 1`
    GaussAct { sigma: T },
}

/// Targets and per-element validity for the class-weighted binary cross-entropy.
///
/// `target` and `valid` follow the `[N, C, H, W]` layout of the prediction;
/// `weights` holds one weight per channel.
#[derive(Clone, Debug)]
pub struct BceTarget<T> {
    pub target: Vec<T>,
    pub valid: Vec<bool>,
    pub weights: Vec<T>,
    /// Only the `t * ln p` term, with no penalty on `t = 0` entries.
    pub literal: bool,
}

pub const BCE_CLIP: f64 = 1e-7;

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn gauss_act<T: Real>(x: T, sigma: T) -> T {
    let d = x - T::lit(0.5);
    sigma * ((-d * d).exp() - T::lit((-0.25f64).exp())) + T::one()
}

pub(crate) fn gauss_act_deriv<T: Real>(x: T, sigma: T) -> T {
    let d = x - T::lit(0.5);
    T::lit(-2.0) * sigma * d * (-d * d).exp()
}

/// Per-element loss and derivative with respect to the (unclipped) prediction.
pub(crate) fn bce_term<T: Real>(p: T, t: T, literal: bool) -> (T, T) {
    let lo = T::lit(BCE_CLIP);
    let hi = T::one() - lo;
    let inside = p > lo && p < hi;
    let pc = p.max(lo).min(hi);
    let (loss, dl) = if literal {
        (-t * pc.ln(), -t / pc)
    } else {
        (
            -(t * pc.ln() + (T::one() - t) * (T::one() - pc).ln()),
            -(t / pc) + (T::one() - t) / (T::one() - pc),
        )
    };
    (loss, if inside { dl } else { T::zero() })
}

/// Weighted loss value and normaliser `Σ valid μ_c`.
pub(crate) fn bce_forward<T: Real>(pred: &[T], spec: &BceTarget<T>, channels: usize, hw: usize) -> (T, f64) {
    let mut num = 0.0f64;
    let mut norm = 0.0f64;
    for (i, &p) in pred.iter().enumerate() {
        if !spec.valid[i] {
            continue;
        }
        let mu = spec.weights[(i / hw) % channels].as_f64();
        let (l, _) = bce_term(p, spec.target[i], spec.literal);
        num += mu * l.as_f64();
        norm += mu;
    }
    if norm == 0.0 {
        (T::zero(), 0.0)
    } else {
        (T::lit(num / norm), norm)
    }
}
