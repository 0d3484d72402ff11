//! Encoder-decoder network with deep-supervision side heads and the
//! multi-task output block.
//!
//! Layout (W = base width):
//!
//! ```text
//! input (8ch) -> expand 3x3 -> 4W, relu -> compress 1x1 -> 3
//!   -> stem 3x3 -> W -> stage1 (W, 1/1) -> stage2 (2W, 1/2) -> stage3 (4W, 1/4) -> stage4 (8W, 1/8)
//!      side heads on stages 1-3: 1x1 -> 3ch, sigmoid, nearest upsample to patch size
//!   decoder: 3 x (upsample 2x, concat skip, 2 x [3x3 conv, bn, relu])
//!   branch V: 3x3 conv W, relu = f_v -> 1x1 -> 1, sigmoid = vessel map x
//!   branch A: 3x3 conv W, relu = f_a;  f_a' = f_a * m(x)
//!   concat(f_v, f_a') -> 1x1 -> 2, sigmoid = artery/vein map
//! ```

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{BnMode, BnStats, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const ENCODER_STAGES: usize = 4;
pub const BLOCKS_PER_STAGE: usize = 2;
pub const SIDE_OUTPUTS: usize = 3;

/// Upper end of the spatial activation range: `1 + sigma (1 - e^{-1/4})`.
pub fn activation_peak(sigma: f64) -> f64 {
    1.0 + sigma * (1.0 - (-0.25f64).exp())
}

/// `m(x) = sigma (e^{-(x - 0.5)^2} - e^{-1/4}) + 1`.
pub fn spatial_activation_value(x: f64, sigma: f64) -> f64 {
    sigma * ((-(x - 0.5) * (x - 0.5)).exp() - (-0.25f64).exp()) + 1.0
}

/// Differentiable spatial activation of a vessel probability map.
pub fn spatial_activation<T: Real>(tape: &mut Tape<T>, x: Var, sigma: f64) -> Var {
    tape.gauss_act(x, T::lit(sigma))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub base_width: usize,
    pub sigma: f64,
    pub patch: usize,
    /// Separate vessel branch feeding the A/V head.
    pub multitask: bool,
    /// Spatial activation of branch-A features by the vessel map.
    pub activation: bool,
    pub deep_supervision: bool,
    /// Stop gradients from the activation map into the vessel branch.
    pub detach_activation: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_channels: 8,
            base_width: 16,
            sigma: 1.0,
            patch: 64,
            multitask: true,
            activation: true,
            deep_supervision: true,
            detach_activation: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.patch.is_multiple_of(8) {
            return Err(Error::InvalidParam(format!("patch size {} must be a positive multiple of 8", self.patch)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParam(format!("sigma {} must be finite and >= 0", self.sigma)));
        }
        if self.base_width == 0 {
            return Err(Error::InvalidParam("base width must be positive".into()));
        }
        if self.input_channels == 0 || self.input_channels > 8 {
            return Err(Error::InvalidParam(format!("input channels {} not in 1..=8", self.input_channels)));
        }
        if self.activation && !self.multitask {
            return Err(Error::InvalidParam("spatial activation requires the multi-task head".into()));
        }
        Ok(())
    }

    /// Canonical description; everything that changes the parameter layout
    /// or the forward computation.
    pub fn fingerprint(&self) -> String {
        format!(
            "in={};w={};stages={};blocks={};side={};sigma={:?};patch={};mt={};ac={};ds={};detach={}",
            self.input_channels,
            self.base_width,
            ENCODER_STAGES,
            BLOCKS_PER_STAGE,
            if self.deep_supervision { SIDE_OUTPUTS } else { 0 },
            self.sigma,
            self.patch,
            self.multitask,
            self.activation,
            self.deep_supervision,
            self.detach_activation
        )
    }

    /// Inverse of [`NetworkConfig::fingerprint`].
    pub fn from_fingerprint(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParam(format!("malformed network fingerprint {s:?}"));
        let mut kv = HashMap::new();
        for part in s.split(';') {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(bad);
        let num = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad());
        let flag = |k: &str| get(k)?.parse::<bool>().map_err(|_| bad());
        let cfg = Self {
            input_channels: num("in")?,
            base_width: num("w")?,
            sigma: get("sigma")?.parse().map_err(|_| bad())?,
            patch: num("patch")?,
            multitask: flag("mt")?,
            activation: flag("ac")?,
            deep_supervision: flag("ds")?,
            detach_activation: flag("detach")?,
        };
        if cfg.fingerprint() != s {
            return Err(bad());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.fingerprint().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn stage_width(&self, s: usize) -> usize {
        self.base_width << s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    pub fn tag(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "conv_w",
            ParamKind::ConvBias => "conv_b",
            ParamKind::BnGamma => "bn_gamma",
            ParamKind::BnBeta => "bn_beta",
            ParamKind::BnRunningMean => "bn_mean",
            ParamKind::BnRunningVar => "bn_var",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        [
            ParamKind::ConvWeight,
            ParamKind::ConvBias,
            ParamKind::BnGamma,
            ParamKind::BnBeta,
            ParamKind::BnRunningMean,
            ParamKind::BnRunningVar,
        ]
        .into_iter()
        .find(|k| k.tag() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
}

/// Named tensors in insertion order. Batch-norm running statistics are stored
/// alongside the trainable tensors but flagged non-trainable.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidParam(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, kind, value, grad: None });
        Ok(self.params.len() - 1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.position(name).map(move |i| &mut self.params[i])
    }

    pub fn at(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.kind.trainable()).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.iter().map(|v| U::lit(v.as_f64())).collect()),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    fn bn_stats(&self, prefix: &str) -> Result<BnStats<T>> {
        let get = |suffix: &str| {
            self.get(&format!("{prefix}.{suffix}"))
                .map(|p| p.value.data().to_vec())
                .ok_or_else(|| Error::InvalidParam(format!("missing {prefix}.{suffix}")))
        };
        Ok(BnStats { mean: get("mean")?, var: get("var")? })
    }

    /// Stores running statistics produced by a train-mode forward pass.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BnStats<T>)]) -> Result<()> {
        for (prefix, stats) in updates {
            for (suffix, v) in [("mean", &stats.mean), ("var", &stats.var)] {
                let p = self
                    .get_mut(&format!("{prefix}.{suffix}"))
                    .ok_or_else(|| Error::InvalidParam(format!("missing {prefix}.{suffix}")))?;
                p.value.data_mut().copy_from_slice(v);
            }
        }
        Ok(())
    }
}

struct Builder<'a, T> {
    set: ParameterSet<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Result<()> {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn(vec![cout, cin, k, k], |_| T::lit(normal.sample(self.rng)));
        self.set.insert(format!("{name}.w"), ParamKind::ConvWeight, w)?;
        if bias {
            self.set.insert(format!("{name}.b"), ParamKind::ConvBias, Tensor::zeros(vec![cout]))?;
        }
        Ok(())
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<()> {
        self.set.insert(format!("{name}.gamma"), ParamKind::BnGamma, Tensor::full(vec![c], T::one()))?;
        self.set.insert(format!("{name}.beta"), ParamKind::BnBeta, Tensor::zeros(vec![c]))?;
        self.set.insert(format!("{name}.mean"), ParamKind::BnRunningMean, Tensor::zeros(vec![c]))?;
        self.set.insert(format!("{name}.var"), ParamKind::BnRunningVar, Tensor::full(vec![c], T::one()))?;
        Ok(())
    }
}

/// Creates all parameters deterministically from `seed` (He-normal conv
/// weights, zero biases, unit/zero batch-norm affine terms).
pub fn build_network<T: Real>(cfg: &NetworkConfig, seed: u64) -> Result<ParameterSet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder { set: ParameterSet::new(), rng: &mut rng };
    let w = cfg.base_width;

    b.conv("expand", cfg.input_channels, 4 * w, 3, true)?;
    b.conv("compress", 4 * w, 3, 1, true)?;
    b.conv("stem", 3, w, 3, false)?;
    b.bn("stem.bn", w)?;

    let mut cin = w;
    for s in 0..ENCODER_STAGES {
        let cout = cfg.stage_width(s);
        for blk in 0..BLOCKS_PER_STAGE {
            let name = format!("enc{}.b{}", s + 1, blk);
            let block_in = if blk == 0 { cin } else { cout };
            b.conv(&format!("{name}.conv1"), block_in, cout, 3, false)?;
            b.bn(&format!("{name}.bn1"), cout)?;
            b.conv(&format!("{name}.conv2"), cout, cout, 3, false)?;
            b.bn(&format!("{name}.bn2"), cout)?;
            if blk == 0 && (s > 0 || block_in != cout) {
                b.conv(&format!("{name}.down"), block_in, cout, 1, false)?;
                b.bn(&format!("{name}.down_bn"), cout)?;
            }
        }
        cin = cout;
    }

    if cfg.deep_supervision {
        for s in 0..SIDE_OUTPUTS {
            b.conv(&format!("side{}", s + 1), cfg.stage_width(s), 3, 1, true)?;
        }
    }

    for d in 0..ENCODER_STAGES - 1 {
        let deep = cfg.stage_width(ENCODER_STAGES - 1 - d);
        let skip = cfg.stage_width(ENCODER_STAGES - 2 - d);
        let name = format!("dec{}", d + 1);
        b.conv(&format!("{name}.conv1"), deep + skip, skip, 3, false)?;
        b.bn(&format!("{name}.bn1"), skip)?;
        b.conv(&format!("{name}.conv2"), skip, skip, 3, false)?;
        b.bn(&format!("{name}.bn2"), skip)?;
    }

    b.conv("head_a.conv", w, w, 3, true)?;
    if cfg.multitask {
        b.conv("head_v.conv", w, w, 3, true)?;
        b.conv("head_v.out", w, 1, 1, true)?;
        b.conv("head_av.out", 2 * w, 2, 1, true)?;
    } else {
        b.conv("head_av.out", w, 2, 1, true)?;
    }
    Ok(b.set)
}

/// Handles to the network outputs on the tape.
#[derive(Clone, Debug)]
pub struct NetworkOutputs {
    /// `[N,1,h,w]` vessel probabilities; absent without the multi-task head.
    pub vessel_map: Option<Var>,
    /// `[N,2,h,w]` artery and vein probabilities.
    pub av_map: Var,
    /// Three `[N,3,h,w]` side-output maps when deep supervision is on.
    pub side_maps: Vec<Var>,
    /// `[N,1,h,w]` spatial activation map when the activation block is on.
    pub activation_map: Option<Var>,
}

pub struct Forward<T> {
    pub outputs: NetworkOutputs,
    /// Tape leaf of each parameter used, keyed by parameter index.
    pub param_vars: Vec<(usize, Var)>,
    /// New running statistics (train mode only).
    pub bn_updates: Vec<(String, BnStats<T>)>,
}

struct Ctx<'a, T: Real> {
    tape: &'a mut Tape<T>,
    params: &'a ParameterSet<T>,
    mode: BnMode,
    vars: HashMap<usize, Var>,
    updates: Vec<(String, BnStats<T>)>,
}

impl<T: Real> Ctx<'_, T> {
    fn p(&mut self, name: &str) -> Result<Var> {
        let i = self
            .params
            .position(name)
            .ok_or_else(|| Error::InvalidParam(format!("missing parameter {name}")))?;
        if let Some(v) = self.vars.get(&i) {
            return Ok(*v);
        }
        let v = self.tape.leaf(self.params.at(i).value.clone(), self.mode == BnMode::Train);
        self.vars.insert(i, v);
        Ok(v)
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = if bias { Some(self.p(&format!("{name}.b"))?) } else { None };
        let k = self.tape.shape(w)[2];
        self.tape.conv2d(x, w, b, stride, k / 2)
    }

    fn bn(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.p(&format!("{name}.gamma"))?;
        let b = self.p(&format!("{name}.beta"))?;
        let stats = self.params.bn_stats(name)?;
        let (y, upd) = self.tape.batchnorm2d(x, g, b, &stats, self.mode)?;
        if let Some(u) = upd {
            self.updates.push((name.to_string(), u));
        }
        Ok(y)
    }

    fn conv_bn_relu(&mut self, x: Var, conv: &str, bn: &str, stride: usize) -> Result<Var> {
        let y = self.conv(x, conv, stride, false)?;
        let y = self.bn(y, bn)?;
        Ok(self.tape.relu(y))
    }

    fn res_block(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let h = self.conv_bn_relu(x, &format!("{name}.conv1"), &format!("{name}.bn1"), stride)?;
        let h = self.conv(h, &format!("{name}.conv2"), 1, false)?;
        let h = self.bn(h, &format!("{name}.bn2"))?;
        let shortcut = if self.params.position(&format!("{name}.down.w")).is_some() {
            let s = self.conv(x, &format!("{name}.down"), stride, false)?;
            self.bn(s, &format!("{name}.down_bn"))?
        } else {
            x
        };
        let y = self.tape.add(h, shortcut)?;
        Ok(self.tape.relu(y))
    }
}

/// Runs the network on `[N, C, patch, patch]` input (C = configured input
/// channels; extra stack channels are dropped by the caller).
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    params: &ParameterSet<T>,
    cfg: &NetworkConfig,
    input: Tensor<T>,
    mode: BnMode,
) -> Result<Forward<T>> {
    let (_, c, h, w) = input.dims4()?;
    if c != cfg.input_channels || h != cfg.patch || w != cfg.patch {
        return Err(Error::Shape(format!(
            "input {:?} does not match config ({} channels, {}x{} patch)",
            input.shape(),
            cfg.input_channels,
            cfg.patch,
            cfg.patch
        )));
    }
    let mut cx = Ctx { tape, params, mode, vars: HashMap::new(), updates: Vec::new() };
    let x = cx.tape.constant(input);

    let e = cx.conv(x, "expand", 1, true)?;
    let e = cx.tape.relu(e);
    let e = cx.conv(e, "compress", 1, true)?;
    let mut feat = cx.conv_bn_relu(e, "stem", "stem.bn", 1)?;

    let mut skips = Vec::with_capacity(ENCODER_STAGES);
    for s in 0..ENCODER_STAGES {
        for blk in 0..BLOCKS_PER_STAGE {
            let stride = if blk == 0 && s > 0 { 2 } else { 1 };
            feat = cx.res_block(feat, &format!("enc{}.b{}", s + 1, blk), stride)?;
        }
        skips.push(feat);
    }

    let mut side_maps = Vec::new();
    if cfg.deep_supervision {
        for (s, &tap) in skips.iter().take(SIDE_OUTPUTS).enumerate() {
            let y = cx.conv(tap, &format!("side{}", s + 1), 1, true)?;
            let y = cx.tape.sigmoid(y);
            side_maps.push(cx.tape.upsample_nearest(y, 1 << s)?);
        }
    }

    let mut d = skips[ENCODER_STAGES - 1];
    for step in 0..ENCODER_STAGES - 1 {
        let name = format!("dec{}", step + 1);
        let up = cx.tape.upsample_nearest2x(d)?;
        let cat = cx.tape.concat_channels(up, skips[ENCODER_STAGES - 2 - step])?;
        let y = cx.conv_bn_relu(cat, &format!("{name}.conv1"), &format!("{name}.bn1"), 1)?;
        d = cx.conv_bn_relu(y, &format!("{name}.conv2"), &format!("{name}.bn2"), 1)?;
    }

    let fa = cx.conv(d, "head_a.conv", 1, true)?;
    let fa = cx.tape.relu(fa);
    let (vessel_map, activation_map, av_in) = if cfg.multitask {
        let fv = cx.conv(d, "head_v.conv", 1, true)?;
        let fv = cx.tape.relu(fv);
        let logit = cx.conv(fv, "head_v.out", 1, true)?;
        let vessel = cx.tape.sigmoid(logit);
        let (fa, act) = if cfg.activation {
            let src = if cfg.detach_activation { cx.tape.detach(vessel) } else { vessel };
            let m = spatial_activation(cx.tape, src, cfg.sigma);
            (cx.tape.mul(fa, m)?, Some(m))
        } else {
            (fa, None)
        };
        (Some(vessel), act, cx.tape.concat_channels(fv, fa)?)
    } else {
        (None, None, fa)
    };
    let logits = cx.conv(av_in, "head_av.out", 1, true)?;
    let av_map = cx.tape.sigmoid(logits);

    let mut param_vars: Vec<(usize, Var)> = cx.vars.into_iter().collect();
    param_vars.sort_unstable();
    Ok(Forward {
        outputs: NetworkOutputs { vessel_map, av_map, side_maps, activation_map },
        param_vars,
        bn_updates: cx.updates,
    })
}

/// Output probabilities copied off the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    /// `[N,1,h,w]`; for single-head networks this is `max(p_artery, p_vein)`.
    pub vessel: Tensor<T>,
    pub av: Tensor<T>,
    pub activation: Option<Tensor<T>>,
}

impl NetworkOutputs {
    pub fn prediction<T: Real>(&self, tape: &Tape<T>) -> Result<Prediction<T>> {
        let av = tape.value(self.av_map).clone();
        let vessel = match self.vessel_map {
            Some(v) => tape.value(v).clone(),
            None => {
                let (n, _, h, w) = av.dims4()?;
                let hw = h * w;
                let d = av.data();
                Tensor::from_fn(vec![n, 1, h, w], |i| {
                    let (s, p) = (i / hw, i % hw);
                    d[s * 2 * hw + p].max(d[(s * 2 + 1) * hw + p])
                })
            }
        };
        Ok(Prediction { vessel, av, activation: self.activation_map.map(|m| tape.value(m).clone()) })
    }
}

/// Eval-mode forward without gradient bookkeeping.
pub fn predict<T: Real>(params: &ParameterSet<T>, cfg: &NetworkConfig, input: Tensor<T>) -> Result<Prediction<T>> {
    let mut tape = Tape::new();
    let fw = forward(&mut tape, params, cfg, input, BnMode::Eval)?;
    fw.outputs.prediction(&tape)
}

impl fmt::Display for NetworkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.fingerprint())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(w: usize, patch: usize) -> NetworkConfig {
        NetworkConfig { base_width: w, patch, ..Default::default() }
    }

    #[test]
    fn activation_endpoints_and_peak() {
        assert_eq!(spatial_activation_value(0.0, 1.0), 1.0);
        assert_eq!(spatial_activation_value(1.0, 1.0), 1.0);
        assert!((spatial_activation_value(0.5, 1.0) - 1.221199).abs() < 1e-6);
        assert_eq!(spatial_activation_value(0.5, 1.0), activation_peak(1.0));
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = small(4, 16);
        let a: ParameterSet<f32> = build_network(&cfg, 9).unwrap();
        let b: ParameterSet<f32> = build_network(&cfg, 9).unwrap();
        assert_eq!(a, b);
        let c: ParameterSet<f32> = build_network(&cfg, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(small(4, 20).validate().is_err());
        assert!(NetworkConfig { sigma: -1.0, ..Default::default() }.validate().is_err());
        assert!(NetworkConfig { multitask: false, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn fingerprint_round_trips() {
        let cfg = NetworkConfig { sigma: 0.25, multitask: true, activation: false, input_channels: 3, ..small(8, 32) };
        assert_eq!(NetworkConfig::from_fingerprint(&cfg.fingerprint()).unwrap(), cfg);
        assert!(NetworkConfig::from_fingerprint("in=8;w=4").is_err());
    }

    #[test]
    fn output_shapes_desk_width() {
        let cfg = small(16, 64);
        let params: ParameterSet<f32> = build_network(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::from_fn(vec![2, 8, 64, 64], |i| ((i % 17) as f32 - 8.0) / 8.0);
        let fw = forward(&mut tape, &params, &cfg, x, BnMode::Train).unwrap();
        let o = &fw.outputs;
        assert_eq!(tape.shape(o.vessel_map.unwrap()), &[2, 1, 64, 64]);
        assert_eq!(tape.shape(o.av_map), &[2, 2, 64, 64]);
        assert_eq!(o.side_maps.len(), 3);
        for s in &o.side_maps {
            assert_eq!(tape.shape(*s), &[2, 3, 64, 64]);
        }
        let m = tape.value(o.activation_map.unwrap());
        assert!(m.data().iter().all(|&v| (1.0..=1.221_2).contains(&v)));
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let cfg = small(4, 16);
        let params: ParameterSet<f64> = build_network(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::zeros(vec![1, 8, 24, 24]);
        assert!(forward(&mut tape, &params, &cfg, x, BnMode::Eval).is_err());
    }
}
