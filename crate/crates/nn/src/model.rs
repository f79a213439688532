//! The recognizer (feature extractor plus classification and regression
//! heads) and the image generator, built from tape ops.
//!
//! Recognizer: four blocks of 3×3 stride-2 convolution, batch
//! normalization and leaky ReLU (slope 0.2) take a 64×64×3 patch down to
//! 4×4, a dense layer produces the feature vector `f`, and two linear heads
//! produce 9 class logits and 6 regression outputs in patch pixels.
//!
//! Generator: a dense projection of `z` reshaped to 4×4×C, then four 4×4
//! stride-2 transposed convolutions (C → C/2 → C/4 → C/8 → 3) with batch
//! normalization and ReLU between them, ending in tanh mapped to [0, 1].

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};
use crate::layers::NormSource;
use crate::params::{Group, ParamKind, ParameterStore, RunningUpdate};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PATCH_SIZE: usize = 64;
pub const NUM_CLASSES: usize = 9;
pub const NUM_PARAMS: usize = 6;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.9;
/// The regression head's linear output is read in units of the patch edge.
pub const REG_SCALE: f64 = PATCH_SIZE as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Output channels of the four convolution blocks.
    pub channels: [usize; 4],
    /// Length `N` of the feature vector.
    pub feature_dim: usize,
    /// Generator base channel count `C` (must be divisible by 8).
    pub gen_channels: usize,
    pub z_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 128],
            feature_dim: 256,
            gen_channels: 128,
            z_dim: 100,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.feature_dim == 0 || self.z_dim == 0 {
            return shape_err("backbone sizes must be positive");
        }
        if self.gen_channels < 8 || self.gen_channels % 8 != 0 {
            return shape_err(format!("generator channels {} must be a positive multiple of 8", self.gen_channels));
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        self.channels[3] * 16
    }

    fn gen_stage_channels(&self) -> [usize; 5] {
        let c = self.gen_channels;
        [c, c / 2, c / 4, c / 8, 3]
    }
}

/// How batch normalization behaves during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; `update_running` decides whether the caller gets
    /// running-average updates back.
    Train { update_running: bool },
    /// Stored running statistics; samples are independent.
    Inference,
}

fn normal_tensor<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("sized")
}

fn insert_weight<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParameterStore<T>,
    rng: &mut R,
    prefix: &str,
    group: Group,
    shape: &[usize],
    fan_in: usize,
    bias_len: usize,
) -> Result<()> {
    let std = (2.0 / fan_in as f64).sqrt();
    store.insert(&format!("{prefix}.weight"), group, ParamKind::Trainable, normal_tensor(rng, shape, std))?;
    store.insert(&format!("{prefix}.bias"), group, ParamKind::Trainable, Tensor::zeros(&[bias_len]))
}

fn insert_norm<T: Scalar>(store: &mut ParameterStore<T>, prefix: &str, group: Group, channels: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), group, ParamKind::Trainable, Tensor::full(&[channels], T::one()))?;
    store.insert(&format!("{prefix}.beta"), group, ParamKind::Trainable, Tensor::zeros(&[channels]))?;
    store.insert(&format!("{prefix}.running_mean"), group, ParamKind::Buffer, Tensor::zeros(&[channels]))?;
    store.insert(&format!("{prefix}.running_var"), group, ParamKind::Buffer, Tensor::full(&[channels], T::one()))
}

/// Feature extractor plus both heads (groups F, L_C, L_R).
pub fn init_recognizer<T: Scalar, R: Rng + ?Sized>(store: &mut ParameterStore<T>, cfg: &BackboneConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let mut in_c = 3;
    for (i, &out_c) in cfg.channels.iter().enumerate() {
        insert_weight(store, rng, &format!("f.conv{i}"), Group::F, &[out_c, in_c, 3, 3], in_c * 9, out_c)?;
        insert_norm(store, &format!("f.bn{i}"), Group::F, out_c)?;
        in_c = out_c;
    }
    let flat = cfg.flat_dim();
    insert_weight(store, rng, "f.fc", Group::F, &[cfg.feature_dim, flat], flat, cfg.feature_dim)?;
    insert_weight(store, rng, "lc", Group::LC, &[NUM_CLASSES, cfg.feature_dim], cfg.feature_dim * 2, NUM_CLASSES)?;
    insert_weight(store, rng, "lr", Group::LR, &[NUM_PARAMS, cfg.feature_dim], cfg.feature_dim * 2, NUM_PARAMS)
}

/// Generator weights (group G).
pub fn init_generator<T: Scalar, R: Rng + ?Sized>(store: &mut ParameterStore<T>, cfg: &BackboneConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let ch = cfg.gen_stage_channels();
    insert_weight(store, rng, "g.fc", Group::G, &[ch[0] * 16, cfg.z_dim], cfg.z_dim, ch[0] * 16)?;
    insert_norm(store, "g.bn0", Group::G, ch[0])?;
    for i in 0..4 {
        let (ic, oc) = (ch[i], ch[i + 1]);
        // Each output pixel of a 4×4 stride-2 kernel sees 2×2 taps per input channel.
        insert_weight(store, rng, &format!("g.deconv{i}"), Group::G, &[ic, oc, 4, 4], ic * 4, oc)?;
        if i < 3 {
            insert_norm(store, &format!("g.bn{}", i + 1), Group::G, oc)?;
        }
    }
    Ok(())
}

/// Single-logit real/fake head on the feature vector (group D_head).
pub fn init_discriminator_head<T: Scalar, R: Rng + ?Sized>(store: &mut ParameterStore<T>, cfg: &BackboneConfig, rng: &mut R) -> Result<()> {
    insert_weight(store, rng, "dhead", Group::DHead, &[1, cfg.feature_dim], cfg.feature_dim * 2, 1)
}

/// Recognizer and generator together.
pub fn init_all<T: Scalar, R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<ParameterStore<T>> {
    let mut store = ParameterStore::new();
    init_recognizer(&mut store, cfg, rng)?;
    init_generator(&mut store, cfg, rng)?;
    Ok(store)
}

fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParameterStore<T>, name: &str, trainable: &[Group]) -> Result<Var> {
    let entry = store
        .entry(name)
        .ok_or_else(|| crate::NnError::Graph(format!("missing parameter {name}")))?;
    if entry.kind == ParamKind::Trainable && trainable.contains(&entry.group) {
        Ok(tape.param(name, &entry.tensor))
    } else {
        Ok(tape.constant(entry.tensor.clone()))
    }
}

fn dense<T: Scalar>(tape: &mut Tape<T>, store: &ParameterStore<T>, prefix: &str, x: Var, trainable: &[Group]) -> Result<Var> {
    let w = bind(tape, store, &format!("{prefix}.weight"), trainable)?;
    let b = bind(tape, store, &format!("{prefix}.bias"), trainable)?;
    tape.linear(x, w, b)
}

fn norm<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    prefix: &str,
    x: Var,
    trainable: &[Group],
    mode: NormMode,
    updates: &mut Vec<RunningUpdate<T>>,
) -> Result<Var> {
    let gamma = bind(tape, store, &format!("{prefix}.gamma"), trainable)?;
    let beta = bind(tape, store, &format!("{prefix}.beta"), trainable)?;
    match mode {
        NormMode::Train { update_running } => {
            let (y, stats) = tape.batch_norm(x, gamma, beta, NormSource::Batch)?;
            if update_running {
                let stats = stats.expect("batch source yields statistics");
                updates.push(RunningUpdate {
                    prefix: prefix.to_string(),
                    mean: stats.mean,
                    var: stats.var,
                });
            }
            Ok(y)
        }
        NormMode::Inference => {
            let mean = store.tensor(&format!("{prefix}.running_mean"))?.data().to_vec();
            let var = store.tensor(&format!("{prefix}.running_var"))?.data().to_vec();
            let (y, _) = tape.batch_norm(x, gamma, beta, NormSource::Running { mean: &mean, var: &var })?;
            Ok(y)
        }
    }
}

/// Handles produced by one recognizer pass.
#[derive(Debug)]
pub struct RecognizerOutput<T> {
    /// `[B, N]` feature vectors.
    pub features: Var,
    /// `[B, 9]` class logits.
    pub class_logits: Var,
    /// `[B, 6]` regression outputs in patch pixels.
    pub reg_logits: Var,
    /// `[B, 1]` real/fake logit when the store carries a D_head.
    pub dhead_logit: Option<Var>,
    pub running: Vec<RunningUpdate<T>>,
}

/// Recognizer pass on `x: [B, 3, 64, 64]` with values in [0, 1].
pub fn network_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    x: Var,
    trainable: &[Group],
    mode: NormMode,
) -> Result<RecognizerOutput<T>> {
    network_forward_with_dropout(tape, store, x, trainable, mode, None)
}

/// Inverted dropout: zero each element with probability `rate` and scale
/// the survivors by `1 / (1 - rate)`.
pub fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, rate: f64, rng: &mut dyn RngCore) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return shape_err(format!("dropout rate {rate} outside [0, 1)"));
    }
    let shape = tape.value(x).shape().to_vec();
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask = (0..shape.iter().product::<usize>())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    tape.mul_const(x, &Tensor::new(&shape, mask)?)
}

/// [`network_forward`] with optional dropout `(rate, rng)` on the feature
/// vector seen by the heads. The returned `features` are taken before it.
pub fn network_forward_with_dropout<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    x: Var,
    trainable: &[Group],
    mode: NormMode,
    dropout_on_features: Option<(f64, &mut dyn RngCore)>,
) -> Result<RecognizerOutput<T>> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 4 || xs[1] != 3 || xs[2] != PATCH_SIZE || xs[3] != PATCH_SIZE {
        return shape_err(format!("recognizer input must be [B, 3, 64, 64], got {xs:?}"));
    }
    let batch = xs[0];
    let mut running = Vec::new();
    let mut h = tape.affine(x, 2.0, -1.0)?;
    for i in 0..4 {
        let w = bind(tape, store, &format!("f.conv{i}.weight"), trainable)?;
        let b = bind(tape, store, &format!("f.conv{i}.bias"), trainable)?;
        h = tape.conv2d(h, w, b, 2, 1)?;
        h = norm(tape, store, &format!("f.bn{i}"), h, trainable, mode, &mut running)?;
        h = tape.leaky_relu(h, LEAKY_SLOPE)?;
    }
    let flat_len = tape.value(h).row_len();
    let flat = tape.reshape(h, &[batch, flat_len])?;
    let f = dense(tape, store, "f.fc", flat, trainable)?;
    let features = tape.leaky_relu(f, LEAKY_SLOPE)?;
    let head_in = match dropout_on_features {
        Some((rate, rng)) => dropout(tape, features, rate, rng)?,
        None => features,
    };
    let class_logits = dense(tape, store, "lc", head_in, trainable)?;
    let raw_reg = dense(tape, store, "lr", head_in, trainable)?;
    let reg_logits = tape.affine(raw_reg, REG_SCALE, 0.0)?;
    let dhead_logit = if store.contains("dhead.weight") {
        Some(dense(tape, store, "dhead", head_in, trainable)?)
    } else {
        None
    };
    Ok(RecognizerOutput {
        features,
        class_logits,
        reg_logits,
        dhead_logit,
        running,
    })
}

/// Generator pass on `z: [B, z_dim]`; returns `[B, 3, 64, 64]` in [0, 1].
pub fn generator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    z: Var,
    trainable: &[Group],
    mode: NormMode,
) -> Result<(Var, Vec<RunningUpdate<T>>)> {
    let zs = tape.value(z).shape().to_vec();
    let z_dim = store.tensor("g.fc.weight")?.shape()[1];
    if zs.len() != 2 || zs[1] != z_dim {
        return shape_err(format!("generator input must be [B, {z_dim}], got {zs:?}"));
    }
    let batch = zs[0];
    let base = store.tensor("g.bn0.gamma")?.numel();
    let mut running = Vec::new();
    let h = dense(tape, store, "g.fc", z, trainable)?;
    let h = tape.reshape(h, &[batch, base, 4, 4])?;
    let h = norm(tape, store, "g.bn0", h, trainable, mode, &mut running)?;
    let mut h = tape.relu(h)?;
    for i in 0..4 {
        let w = bind(tape, store, &format!("g.deconv{i}.weight"), trainable)?;
        let b = bind(tape, store, &format!("g.deconv{i}.bias"), trainable)?;
        h = tape.conv_transpose2d(h, w, b, 2, 1)?;
        if i < 3 {
            h = norm(tape, store, &format!("g.bn{}", i + 1), h, trainable, mode, &mut running)?;
            h = tape.relu(h)?;
        }
    }
    let h = tape.tanh(h)?;
    let img = tape.affine(h, 0.5, 0.5)?;
    Ok((img, running))
}

/// Uniform noise in [-1, 1).
pub fn sample_noise<T: Scalar, R: Rng + ?Sized>(rng: &mut R, batch: usize, z_dim: usize) -> Tensor<T> {
    let data = (0..batch * z_dim).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
    Tensor::new(&[batch, z_dim], data).expect("sized")
}
