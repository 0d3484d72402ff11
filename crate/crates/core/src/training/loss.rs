//! Class-weighted multi-task loss with deep supervision and weight decay.

use crate::autodiff::{BceTarget, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::network::{NetworkOutputs, ParamKind, ParameterSet};

/// Per-class weights (vessel, artery, vein) and the weight-decay coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub vessel: f64,
    pub artery: f64,
    pub vein: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { vessel: 3.0 / 7.0, artery: 2.0 / 7.0, vein: 2.0 / 7.0, lambda: 5e-4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.vessel, self.artery, self.vein];
        if w.iter().any(|&v| !(v > 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!("class weights {w:?} must be positive and sum to 1")));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidParam(format!("lambda {} must be >= 0", self.lambda)));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.vessel, self.artery, self.vein]
    }
}

/// Where the `(lambda/2) ||theta||^2` term lives. Exactly one is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayMode {
    /// Explicit loss term, differentiated like the rest of the loss.
    LossTerm,
    /// `g += lambda * theta` inside the optimizer.
    Optimizer,
}

/// Scalar weighted BCE over per-pixel `(vessel, artery, vein)` triples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BceValue {
    pub loss: f64,
    /// No valid entry; the loss is defined as 0.
    pub all_invalid: bool,
}

pub fn weighted_bce(
    pred: &[[f64; 3]],
    target: &[[bool; 3]],
    valid: &[[bool; 3]],
    weights: &LossWeights,
    literal: bool,
) -> Result<BceValue> {
    if pred.len() != target.len() || pred.len() != valid.len() {
        return Err(Error::Shape("prediction, target and validity differ in length".into()));
    }
    let mu = weights.as_array();
    let (mut num, mut den) = (0.0, 0.0);
    for ((p, t), v) in pred.iter().zip(target).zip(valid) {
        for c in 0..3 {
            if !v[c] {
                continue;
            }
            let t = if t[c] { 1.0 } else { 0.0 };
            let (l, _) = crate::autodiff::bce_term(p[c], t, literal);
            num += mu[c] * l;
            den += mu[c];
        }
    }
    Ok(if den == 0.0 { BceValue { loss: 0.0, all_invalid: true } } else { BceValue { loss: num / den, all_invalid: false } })
}

/// Ground truth for a batch of patches, `[N, 3, P, P]` in
/// (vessel, artery, vein) order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelBatch {
    pub n: usize,
    pub size: usize,
    pub target: Vec<bool>,
    pub valid: Vec<bool>,
}

impl LabelBatch {
    fn channel_target<T: Real>(&self, channels: &[usize], weights: &[f64], literal: bool) -> BceTarget<T> {
        let hw = self.size * self.size;
        let mut target = Vec::with_capacity(self.n * channels.len() * hw);
        let mut valid = Vec::with_capacity(self.n * channels.len() * hw);
        for s in 0..self.n {
            for &c in channels {
                let off = (s * 3 + c) * hw;
                target.extend(self.target[off..off + hw].iter().map(|&t| if t { T::one() } else { T::zero() }));
                valid.extend_from_slice(&self.valid[off..off + hw]);
            }
        }
        BceTarget { target, valid, weights: weights.iter().map(|&w| T::lit(w)).collect(), literal }
    }
}

/// Handles to each term of the total loss.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub output: Var,
    pub sides: Vec<Var>,
    pub decay: Option<Var>,
}

/// `(lambda / 2) * sum of squared entries` over the given tensors.
pub fn decay_term<T: Real>(tape: &mut Tape<T>, tensors: &[Var], lambda: f64) -> Option<Var> {
    let mut acc: Option<Var> = None;
    for &v in tensors {
        let s = tape.sum_squares(v);
        acc = Some(match acc {
            Some(a) => tape.add(a, s).expect("scalars"),
            None => s,
        });
    }
    acc.map(|a| tape.affine(a, T::lit(lambda / 2.0), T::zero()))
}

/// `output + mean(sides) + decay`.
pub fn compose_loss<T: Real>(tape: &mut Tape<T>, output: Var, sides: &[Var], decay: Option<Var>) -> Result<Var> {
    let mut total = output;
    if !sides.is_empty() {
        let mut s = sides[0];
        for &v in &sides[1..] {
            s = tape.add(s, v)?;
        }
        let mean = tape.affine(s, T::lit(1.0 / sides.len() as f64), T::zero());
        total = tape.add(total, mean)?;
    }
    if let Some(d) = decay {
        total = tape.add(total, d)?;
    }
    Ok(total)
}

/// Builds the full training loss on the tape.
///
/// The output term pairs the vessel map with the artery/vein map (or uses
/// the artery/vein map alone for single-head networks); every side map is
/// scored on all three classes; the decay term covers conv weights only.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &NetworkOutputs,
    gt: &LabelBatch,
    weights: &LossWeights,
    params: &ParameterSet<T>,
    param_vars: &[(usize, Var)],
    decay: DecayMode,
    literal: bool,
) -> Result<LossParts> {
    let mu = weights.as_array();
    let output = match out.vessel_map {
        Some(v) => {
            let pred = tape.concat_channels(v, out.av_map)?;
            tape.weighted_bce(pred, gt.channel_target(&[0, 1, 2], &mu, literal))?.0
        }
        None => tape.weighted_bce(out.av_map, gt.channel_target(&[1, 2], &mu[1..], literal))?.0,
    };
    let mut sides = Vec::with_capacity(out.side_maps.len());
    for &s in &out.side_maps {
        sides.push(tape.weighted_bce(s, gt.channel_target(&[0, 1, 2], &mu, literal))?.0);
    }
    let decay = match decay {
        DecayMode::LossTerm if weights.lambda > 0.0 => {
            let conv_weights: Vec<Var> = param_vars
                .iter()
                .filter(|(i, _)| params.at(*i).kind == ParamKind::ConvWeight)
                .map(|&(_, v)| v)
                .collect();
            decay_term(tape, &conv_weights, weights.lambda)
        }
        _ => None,
    };
    let total = compose_loss(tape, output, &sides, decay)?;
    Ok(LossParts { total, output, sides, decay })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    const ALL: [bool; 3] = [true; 3];

    #[test]
    fn uniform_prediction_gives_ln2() {
        let pred = vec![[0.5; 3]; 10];
        let target: Vec<[bool; 3]> = (0..10).map(|i| [i % 2 == 0, i % 3 == 0, false]).collect();
        let v = weighted_bce(&pred, &target, &[ALL; 10], &LossWeights::default(), false).unwrap();
        assert!((v.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_near_zero() {
        let target = vec![[true, false, true], [false, false, false]];
        let pred: Vec<[f64; 3]> = target.iter().map(|t| t.map(|b| if b { 1.0 } else { 0.0 })).collect();
        let v = weighted_bce(&pred, &target, &[ALL; 2], &LossWeights::default(), false).unwrap();
        assert!(v.loss <= 1e-6);
    }

    #[test]
    fn single_pixel_hand_value() {
        let v = weighted_bce(&[[0.9, 0.8, 0.1]], &[[true, true, false]], &[ALL], &LossWeights::default(), false)
            .unwrap();
        let want = -(3.0 / 7.0 * 0.9f64.ln() + 2.0 / 7.0 * 0.8f64.ln() + 2.0 / 7.0 * 0.9f64.ln());
        assert!((v.loss - want).abs() < 1e-12);
        assert!((v.loss - 0.139013).abs() < 1e-5);
    }

    #[test]
    fn all_invalid_is_flagged_zero() {
        let v = weighted_bce(&[[0.3; 3]], &[[true; 3]], &[[false; 3]], &LossWeights::default(), false).unwrap();
        assert_eq!(v, BceValue { loss: 0.0, all_invalid: true });
    }

    #[test]
    fn literal_mode_ignores_negatives() {
        let v = weighted_bce(&[[0.9, 0.9, 0.9]], &[[false; 3]], &[ALL], &LossWeights::default(), true).unwrap();
        assert_eq!(v.loss, 0.0);
    }

    #[test]
    fn weights_validated() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { vessel: 0.5, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn toy_decay_term() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::scalar(1.0));
        let b = tape.param(Tensor::scalar(2.0));
        let zero = tape.constant(Tensor::scalar(0.0));
        let d = decay_term(&mut tape, &[a, b], 0.1);
        let total = compose_loss(&mut tape, zero, &[], d).unwrap();
        assert!((tape.value(total).data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn side_terms_are_averaged() {
        let mut tape = Tape::<f64>::new();
        let zero = tape.constant(Tensor::scalar(0.0));
        let s: Vec<Var> = [0.3, 0.9, 1.5].iter().map(|&v| tape.constant(Tensor::scalar(v))).collect();
        let total = compose_loss(&mut tape, zero, &s, None).unwrap();
        assert!((tape.value(total).data()[0] - 0.9).abs() < 1e-15);
    }
}
