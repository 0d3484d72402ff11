//! 64-bit finite-difference checks of every differentiable operation and of
//! the full network loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{grad_check, relative_error, stencil, BceTarget, BnMode, BnStats, Tape, Tensor, Var};
use crate::error::Result;
use crate::network::{build_network, forward, NetworkConfig, ParameterSet};
use crate::training::{total_loss, DecayMode, LabelBatch, LossWeights};

pub const OP_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-4;
/// Step for the smooth single-operation checks.
const OP_STEP: f64 = 1e-3;
/// Step for the network check; small enough that most probes stay on one
/// smooth piece of the relu network.
const NETWORK_STEP: f64 = 3e-5;
/// Probes per coordinate slot before giving up on finding a smooth one.
const MAX_DRAWS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    /// Coordinates compared.
    pub probes: usize,
    /// Probes discarded because the step crossed a relu kink or loss clip.
    pub kinked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// `sum(out * r)` for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let c = tape.constant(r.clone());
    let p = tape.mul(out, c)?;
    Ok(tape.sum(p))
}

/// Checks every differentiable operation on small random shapes.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| {
        out.push(CheckResult { name: name.into(), max_error: err, tolerance: OP_TOLERANCE, probes: 0, kinked: 0 })
    };

    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let x = randn(&mut rng, vec![2, 2, 5, 5]);
        let w = randn(&mut rng, vec![3, 2, 3, 3]);
        let b = randn(&mut rng, vec![3]);
        let oh = (5 + 2 * pad - 3) / stride + 1;
        let r = randn(&mut rng, vec![2, 3, oh, oh]);
        let tag = format!("conv2d[s{stride},p{pad}]");
        let (wc, bc, rc) = (w.clone(), b.clone(), r.clone());
        push(
            &format!("{tag}.input"),
            grad_check(
                |t, v| {
                    let (w, b) = (t.constant(wc.clone()), t.constant(bc.clone()));
                    let y = t.conv2d(v, w, Some(b), stride, pad)?;
                    project(t, y, &rc)
                },
                &x,
                OP_STEP,
            )?,
        );
        let (xc, rc) = (x.clone(), r.clone());
        push(
            &format!("{tag}.weight"),
            grad_check(
                |t, v| {
                    let (x, b) = (t.constant(xc.clone()), t.constant(b.clone()));
                    let y = t.conv2d(x, v, Some(b), stride, pad)?;
                    project(t, y, &rc)
                },
                &w,
                OP_STEP,
            )?,
        );
        push(
            &format!("{tag}.bias"),
            grad_check(
                |t, v| {
                    let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
                    let y = t.conv2d(x, w, Some(v), stride, pad)?;
                    project(t, y, &r)
                },
                &b,
                OP_STEP,
            )?,
        );
    }

    let shape = vec![2, 3, 4, 4];
    let a = randn(&mut rng, shape.clone());
    let other = randn(&mut rng, shape.clone());
    let bcast = randn(&mut rng, vec![2, 1, 4, 4]);
    let r = randn(&mut rng, shape.clone());
    for (name, b) in [("add", &other), ("add.broadcast", &bcast)] {
        push(
            name,
            grad_check(
                |t, v| {
                    let c = t.constant(b.clone());
                    let y = t.add(v, c)?;
                    project(t, y, &r)
                },
                &a,
                OP_STEP,
            )?,
        );
    }
    for (name, b) in [("mul", &other), ("mul.broadcast", &bcast)] {
        push(
            name,
            grad_check(
                |t, v| {
                    let c = t.constant(b.clone());
                    let y = t.mul(v, c)?;
                    project(t, y, &r)
                },
                &a,
                OP_STEP,
            )?,
        );
    }
    push(
        "mul.broadcast.rhs",
        grad_check(
            |t, v| {
                let c = t.constant(a.clone());
                let y = t.mul(c, v)?;
                project(t, y, &r)
            },
            &bcast,
            OP_STEP,
        )?,
    );
    // keep relu inputs away from the kink so central differences are valid
    let away = Tensor::from_fn(shape.clone(), |i| {
        let v = a.data()[i];
        if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v }
    });
    push("relu", grad_check(|t, v| { let y = t.relu(v); project(t, y, &r) }, &away, OP_STEP)?);
    push("sigmoid", grad_check(|t, v| { let y = t.sigmoid(v); project(t, y, &r) }, &a, OP_STEP)?);
    push("scalar_affine", grad_check(|t, v| { let y = t.affine(v, -1.7, 0.3); project(t, y, &r) }, &a, OP_STEP)?);
    let unit = Tensor::from_fn(shape.clone(), |_| rng.random_range(0.0..1.0));
    push("gauss_act", grad_check(|t, v| { let y = t.gauss_act(v, 0.8); project(t, y, &r) }, &unit, OP_STEP)?);

    let r2 = randn(&mut rng, vec![2, 3, 8, 8]);
    push("upsample2x", grad_check(|t, v| { let y = t.upsample_nearest2x(v)?; project(t, y, &r2) }, &a, OP_STEP)?);
    let r4 = randn(&mut rng, vec![2, 3, 16, 16]);
    push("upsample4x", grad_check(|t, v| { let y = t.upsample_nearest(v, 4)?; project(t, y, &r4) }, &a, OP_STEP)?);

    let b2 = randn(&mut rng, vec![2, 2, 4, 4]);
    let rc = randn(&mut rng, vec![2, 5, 4, 4]);
    push(
        "concat.lhs",
        grad_check(|t, v| { let c = t.constant(b2.clone()); let y = t.concat_channels(v, c)?; project(t, y, &rc) }, &a, OP_STEP)?,
    );
    push(
        "concat.rhs",
        grad_check(|t, v| { let c = t.constant(a.clone()); let y = t.concat_channels(c, v)?; project(t, y, &rc) }, &b2, OP_STEP)?,
    );

    let gamma = Tensor::from_fn(vec![3], |_| rng.random_range(0.5..1.5));
    let beta = randn(&mut rng, vec![3]);
    let stats = BnStats { mean: vec![0.2, -0.1, 0.4], var: vec![1.3, 0.7, 2.0] };
    for (mode, tag) in [(BnMode::Train, "train"), (BnMode::Eval, "eval")] {
        let st = stats.clone();
        push(
            &format!("batchnorm.{tag}.input"),
            grad_check(
                |t, v| {
                    let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
                    let y = t.batchnorm2d(v, g, b, &st, mode)?.0;
                    project(t, y, &r)
                },
                &a,
                OP_STEP,
            )?,
        );
        push(
            &format!("batchnorm.{tag}.gamma"),
            grad_check(
                |t, v| {
                    let (x, b) = (t.constant(a.clone()), t.constant(beta.clone()));
                    let y = t.batchnorm2d(x, v, b, &st, mode)?.0;
                    project(t, y, &r)
                },
                &gamma,
                OP_STEP,
            )?,
        );
        push(
            &format!("batchnorm.{tag}.beta"),
            grad_check(
                |t, v| {
                    let (x, g) = (t.constant(a.clone()), t.constant(gamma.clone()));
                    let y = t.batchnorm2d(x, g, v, &st, mode)?.0;
                    project(t, y, &r)
                },
                &beta,
                OP_STEP,
            )?,
        );
    }

    push("sum", grad_check(|t, v| Ok(t.sum(v)), &a, OP_STEP)?);
    push("sum_squares", grad_check(|t, v| Ok(t.sum_squares(v)), &a, OP_STEP)?);

    let target: Vec<f64> = (0..a.numel()).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let valid: Vec<bool> = (0..a.numel()).map(|_| rng.random_bool(0.8)).collect();
    for literal in [false, true] {
        let spec = BceTarget { target: target.clone(), valid: valid.clone(), weights: vec![3.0 / 7.0, 2.0 / 7.0, 2.0 / 7.0], literal };
        push(
            if literal { "weighted_bce.literal" } else { "weighted_bce" },
            grad_check(
                |t, v| {
                    let p = t.sigmoid(v);
                    Ok(t.weighted_bce(p, spec.clone())?.0)
                },
                &a,
                OP_STEP,
            )?,
        );
    }
    push(
        "sigmoid∘conv2d",
        grad_check(
            |t, v| {
                let w = t.constant(Tensor::from_fn(vec![2, 3, 3, 3], |i| ((i * 7 % 11) as f64 - 5.0) / 10.0));
                let y = t.conv2d(v, w, None, 1, 1)?;
                let s = t.sigmoid(y);
                Ok(t.sum(s))
            },
            &a,
            OP_STEP,
        )?,
    );
    Ok(out)
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, size: usize) -> LabelBatch {
    let hw = size * size;
    let mut target = vec![false; n * 3 * hw];
    let mut valid = vec![true; n * 3 * hw];
    for s in 0..n {
        for p in 0..hw {
            let vessel = rng.random_bool(0.3);
            let uncertain = vessel && rng.random_bool(0.1);
            let artery = vessel && !uncertain && rng.random_bool(0.5);
            target[(s * 3) * hw + p] = vessel;
            target[(s * 3 + 1) * hw + p] = artery;
            target[(s * 3 + 2) * hw + p] = vessel && !uncertain && !artery;
            valid[(s * 3 + 1) * hw + p] = !uncertain;
            valid[(s * 3 + 2) * hw + p] = !uncertain;
        }
    }
    LabelBatch { n, size, target, valid }
}

fn network_loss(
    params: &ParameterSet<f64>,
    cfg: &NetworkConfig,
    input: &Tensor<f64>,
    labels: &LabelBatch,
    want_grads: bool,
) -> Result<(f64, u64, Vec<Option<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let fw = forward(&mut tape, params, cfg, input.clone(), BnMode::Train)?;
    let parts =
        total_loss(&mut tape, &fw.outputs, labels, &LossWeights::default(), params, &fw.param_vars, DecayMode::LossTerm, false)?;
    let loss = tape.value(parts.total).data()[0];
    let sig = tape.kink_signature();
    let mut grads = vec![None; params.len()];
    if want_grads {
        tape.backward(parts.total)?;
        for &(i, v) in &fw.param_vars {
            grads[i] = tape.grad(v).map(<[f64]>::to_vec);
        }
    }
    Ok((loss, sig, grads))
}

/// Full training loss of a width-4, 16x16-patch network: analytic parameter
/// gradients against fourth-order central differences at `coords` random
/// coordinates of every trainable tensor.
///
/// The loss is only piecewise smooth (relu, probability clipping). A probe
/// whose stencil points do not all share the kink signature of the base
/// point is discarded and another coordinate of the same tensor is drawn.
pub fn network_check(seed: u64, coords: usize) -> Result<CheckResult> {
    let cfg = NetworkConfig { base_width: 4, patch: 16, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut params: ParameterSet<f64> = build_network(&cfg, seed)?;
    let input = randn(&mut rng, vec![2, 8, 16, 16]);
    let labels = random_labels(&mut rng, 2, 16);
    let (_, base_sig, grads) = network_loss(&params, &cfg, &input, &labels, true)?;
    let h = NETWORK_STEP;
    let (mut worst, mut probes, mut kinked) = (0.0f64, 0usize, 0usize);
    for i in 0..params.len() {
        if !params.at(i).kind.trainable() {
            continue;
        }
        let n = params.at(i).value.numel();
        let mut done = 0;
        for _ in 0..coords.min(n) * MAX_DRAWS {
            if done == coords.min(n) {
                break;
            }
            let j = rng.random_range(0..n);
            let orig = params.at(i).value.data()[j];
            let mut vals = [0.0; 4];
            let mut smooth = true;
            for (slot, k) in [-2.0, -1.0, 1.0, 2.0].into_iter().enumerate() {
                params.at_mut(i).value.data_mut()[j] = orig + k * h;
                let (loss, sig, _) = network_loss(&params, &cfg, &input, &labels, false)?;
                vals[slot] = loss;
                smooth &= sig == base_sig;
            }
            params.at_mut(i).value.data_mut()[j] = orig;
            if !smooth {
                kinked += 1;
                continue;
            }
            let analytic = grads[i].as_ref().map_or(0.0, |g| g[j]);
            worst = worst.max(relative_error(analytic, stencil(vals[0], vals[1], vals[2], vals[3], h)));
            probes += 1;
            done += 1;
        }
    }
    Ok(CheckResult { name: "network[w4,16x16]".into(), max_error: worst, tolerance: NETWORK_TOLERANCE, probes, kinked })
}

/// Worst error per check across all seeds, in first-seen order.
pub fn suite(seeds: &[u64], network_coords: usize) -> Result<Vec<CheckResult>> {
    let mut merged: Vec<CheckResult> = Vec::new();
    for &s in seeds {
        let mut results = op_checks(s)?;
        if network_coords > 0 {
            results.push(network_check(s, network_coords)?);
        }
        for r in results {
            match merged.iter_mut().find(|m| m.name == r.name) {
                Some(m) => {
                    m.max_error = m.max_error.max(r.max_error);
                    m.probes += r.probes;
                    m.kinked += r.kinked;
                }
                None => merged.push(r),
            }
        }
    }
    Ok(merged)
}
