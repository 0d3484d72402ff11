//! The training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{total_loss, DecayMode, LossWeights};
use super::optim::{lr_at, sgd_step, OptimState};
use super::sampler::{sample_patch_batch, TrainImage};
use crate::autodiff::{BnMode, Real, Tape};
use crate::error::{Error, Result};
use crate::network::{build_network, forward, NetworkConfig, ParameterSet};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub halving_period: usize,
    pub momentum: f64,
    pub seed: u64,
    pub decay: DecayMode,
    pub literal_bce: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            iterations: 2000,
            lr: 0.05,
            halving_period: 500,
            momentum: 0.9,
            seed: 0,
            decay: DecayMode::LossTerm,
            literal_bce: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidParam("batch size must be positive".into()));
        }
        if self.halving_period == 0 {
            return Err(Error::InvalidParam("halving period must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParam(format!("lr {} / momentum {} out of range", self.lr, self.momentum)));
        }
        Ok(())
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub params: ParameterSet<T>,
    pub optim: OptimState<T>,
    pub rng: ChaCha8Rng,
    /// Number of completed updates.
    pub iteration: usize,
}

impl<T: Real> TrainState<T> {
    /// Fresh parameters and sampler stream, both derived from `seed`.
    pub fn new(net: &NetworkConfig, seed: u64) -> Result<Self> {
        let params = build_network(net, seed)?;
        let optim = OptimState::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self { params, optim, rng, iteration: 0 })
    }
}

/// Losses of one update, measured before the parameters moved.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub loss: f64,
    pub output_loss: f64,
    pub lr: f64,
}

impl StepReport {
    /// One run-log line: `iteration<TAB>loss<TAB>lr`.
    pub fn log_line(&self) -> String {
        format!("{}\t{:.6}\t{}", self.iteration, self.loss, self.lr)
    }
}

/// Samples a batch, runs forward/backward and applies one SGD update.
/// On a non-finite loss the state is left untouched.
pub fn train_step<T: Real>(
    images: &[TrainImage],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
    state: &mut TrainState<T>,
) -> Result<StepReport> {
    let it = state.iteration;
    let mut rng = state.rng.clone();
    let batch = sample_patch_batch::<T, _>(images, net.patch, cfg.batch, net.input_channels, &mut rng)?;
    let mut tape = Tape::new();
    let fw = forward(&mut tape, &state.params, net, batch.input, BnMode::Train)?;
    let parts = total_loss(
        &mut tape,
        &fw.outputs,
        &batch.labels,
        weights,
        &state.params,
        &fw.param_vars,
        cfg.decay,
        cfg.literal_bce,
    )?;
    let loss = tape.value(parts.total).data()[0].as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: it, loss, batch: batch.picks });
    }
    let output_loss = tape.value(parts.output).data()[0].as_f64();
    tape.backward(parts.total)?;
    for &(i, v) in &fw.param_vars {
        state.params.at_mut(i).grad = tape.grad(v).map(<[T]>::to_vec);
    }
    drop(tape);
    state.params.apply_bn_updates(&fw.bn_updates)?;
    let lr = lr_at(it, cfg.lr, cfg.halving_period);
    let fold = if cfg.decay == DecayMode::Optimizer { weights.lambda } else { 0.0 };
    sgd_step(&mut state.params, &mut state.optim, lr, cfg.momentum, fold)?;
    state.rng = rng;
    state.iteration += 1;
    Ok(StepReport { iteration: it, loss, output_loss, lr })
}

/// Runs updates until `cfg.iterations` have been completed, calling
/// `observer` after each one (for logging and periodic checkpoints).
pub fn train<T: Real>(
    images: &[TrainImage],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
    state: &mut TrainState<T>,
    observer: &mut dyn FnMut(&StepReport, &TrainState<T>) -> Result<()>,
) -> Result<()> {
    net.validate()?;
    cfg.validate()?;
    weights.validate()?;
    while state.iteration < cfg.iterations {
        let report = train_step(images, net, cfg, weights, state)?;
        observer(&report, state)?;
    }
    Ok(())
}
