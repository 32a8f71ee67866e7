//! Training, evaluation and the ablation harness.
//!
//! A run has up to two stages: `joint` trains the network together with the
//! learnable sampling weights (a fresh mask is drawn every step), and
//! `frozen-mask` fixes one mask draw and fine-tunes the network alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use megre_autodiff::{adam_step, Adam, AdamState, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::admm::{admm_forward, AdmmConfig, AdmmModel};
use crate::container::{Axis, Container};
use crate::data::{CoilSensitivities, KSpaceData, MultiEchoImage};
use crate::dataset::{slice_seed, Slice};
use crate::error::{invalid, Error, Result};
use crate::forward_model::{self, EncodingOp};
use crate::loss::training_loss;
use crate::metrics::{self, finite_or_inf, mean_std};
use crate::qsm;
use crate::sampling::{manual_variable_density, SamplingMode, SamplingPattern};

const MASK_STREAM: u64 = 0x6D61_736B;
const EVAL_STREAM: u64 = 0x6576_616C;
const FREEZE_STREAM: u64 = 0x6672_7A6E;
const SHUFFLE_STREAM: u64 = 0x7368_7566;
const SPLIT_STREAM: u64 = 0x7370_6C74;
const MODEL_STREAM: u64 = 0x6D6F_646C;
const PATTERN_STREAM: u64 = 0x7370_6F77;

/// Name used for the sampling weights in optimizer state.
pub const SPO_WEIGHTS: &str = "spo.weights";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpoMode {
    None,
    Single,
    Multi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Joint,
    FrozenMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset directory (used by the command-line front end).
    pub dataset: Option<PathBuf>,
    pub unrolls: usize,
    /// Epochs of the configured stage.
    pub epochs: usize,
    /// Fixed-mask fine-tuning epochs appended after a joint stage.
    pub frozen_epochs: usize,
    pub learning_rate: f32,
    /// Learning rate of the sampling weights. Higher than the network's so the
    /// pattern moves away from its random start within a short run.
    pub spo_learning_rate: f32,
    pub seed: u64,
    pub spo: SpoMode,
    pub tff: bool,
    pub target_ratio: f32,
    /// Noise level the dataset was simulated with; checked against the slices.
    pub noise_sigma: f32,
    pub stage: Stage,
    pub width: usize,
    pub width_multiplier: usize,
    pub tff_hidden: usize,
    pub share_weights: bool,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub sigmoid_slope: f32,
    pub force_dc: bool,
    /// Fully sampled central block forced into learned masks (0 = off).
    pub spo_acs_lines: usize,
    pub vd_decay: f32,
    pub vd_acs_lines: usize,
    pub ssim_window: usize,
    pub train_slices: Option<usize>,
    pub val_slices: Option<usize>,
    pub train_fraction: f32,
    pub val_fraction: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: None,
            unrolls: 3,
            epochs: 30,
            frozen_epochs: 0,
            learning_rate: 1e-3,
            spo_learning_rate: 1e-2,
            seed: 0,
            spo: SpoMode::None,
            tff: false,
            target_ratio: 0.23,
            noise_sigma: 0.01,
            stage: Stage::Joint,
            width: 32,
            width_multiplier: 1,
            tff_hidden: 8,
            share_weights: true,
            cg_iters: 8,
            cg_tol: 1e-6,
            sigmoid_slope: 5.0,
            force_dc: true,
            spo_acs_lines: 0,
            vd_decay: 2.0,
            vd_acs_lines: 4,
            ssim_window: 11,
            train_slices: None,
            val_slices: None,
            train_fraction: 0.6,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    /// Full-size recipe: ten unrolls, 100 epochs.
    pub fn full_scale() -> Self {
        TrainConfig {
            unrolls: 10,
            epochs: 100,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.spo_learning_rate > 0.0) {
            return invalid("learning rates must be positive");
        }
        if self.unrolls == 0 {
            return invalid("need at least one unroll");
        }
        if !(self.target_ratio > 0.0 && self.target_ratio < 1.0) {
            return invalid(format!("target ratio must lie in (0, 1), got {}", self.target_ratio));
        }
        if !(self.train_fraction > 0.0 && self.val_fraction > 0.0 && self.train_fraction + self.val_fraction <= 1.0) {
            return invalid("split fractions must be positive and sum to at most 1");
        }
        if self.ssim_window.is_multiple_of(2) {
            return invalid("SSIM window must be odd");
        }
        Ok(())
    }

    pub fn admm_config(&self, n_echoes: usize) -> AdmmConfig {
        AdmmConfig {
            n_echoes,
            unrolls: self.unrolls,
            width: self.width,
            width_multiplier: self.width_multiplier,
            tff: self.tff,
            tff_hidden: self.tff_hidden,
            share_weights: self.share_weights,
            cg_iters: self.cg_iters,
            cg_tol: self.cg_tol,
        }
    }

    /// SHA-256 of the configuration's JSON form.
    pub fn fingerprint(&self) -> Result<String> {
        let digest = Sha256::digest(serde_json::to_vec(self)?);
        Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }

    fn adam(&self, lr: f32) -> Adam {
        Adam {
            lr,
            ..Adam::default()
        }
    }
}

/// Seeded train/validation/test partition of `0..n`.
pub fn split_indices(n: usize, config: &TrainConfig) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let n_train = config
        .train_slices
        .unwrap_or_else(|| (config.train_fraction as f64 * n as f64).round() as usize);
    let n_val = config
        .val_slices
        .unwrap_or_else(|| (config.val_fraction as f64 * n as f64).round() as usize);
    if n_train == 0 || n_val == 0 || n_train + n_val > n {
        return invalid(format!("cannot take {n_train} train and {n_val} validation slices from {n}"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ SPLIT_STREAM));
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok((order, val, test))
}

/// Everything needed to resume or deploy a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: AdmmModel,
    pub pattern: SamplingPattern,
    pub stage: Stage,
    /// Epochs completed in `stage`.
    pub epoch: usize,
    pub optimizer: BTreeMap<String, AdamState>,
}

#[derive(Serialize, Deserialize)]
struct PatternMeta {
    mode: SamplingMode,
    n_echoes: usize,
    target_ratio: f32,
    slope: f32,
    force_dc: bool,
    acs_lines: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    admm: AdmmConfig,
    stage: Stage,
    epoch: usize,
    pattern: PatternMeta,
    adam_steps: BTreeMap<String, u64>,
}

fn param_axes(rank: usize) -> Vec<Axis> {
    match rank {
        4 => vec![Axis::Channel, Axis::Channel, Axis::Y, Axis::X],
        3 => vec![Axis::Echo, Axis::Ky, Axis::Kx],
        _ => vec![Axis::Channel; rank],
    }
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let p = &self.pattern;
        let meta = CheckpointMeta {
            config: self.config.clone(),
            admm: self.model.config().clone(),
            stage: self.stage,
            epoch: self.epoch,
            pattern: PatternMeta {
                mode: p.mode(),
                n_echoes: p.n_echoes(),
                target_ratio: p.target_ratio(),
                slope: p.slope(),
                force_dc: p.force_dc(),
                acs_lines: p.acs_lines(),
            },
            adam_steps: self.optimizer.iter().map(|(k, s)| (k.clone(), s.step)).collect(),
        };
        let mut c = Container::new(serde_json::to_value(meta)?);
        for (name, t) in self.model.params() {
            c.push_f32(format!("param/{name}"), &param_axes(t.shape().len()), t.clone())?;
        }
        if let Some(w) = p.weights() {
            c.push_f32("spo/weights", &param_axes(3), w.clone())?;
        }
        if let Some(m) = p.fixed_masks() {
            c.push_f32("spo/masks", &param_axes(3), m.clone())?;
        }
        for (name, st) in &self.optimizer {
            let shape = if name == SPO_WEIGHTS {
                p.weights().map(|w| w.shape().to_vec())
            } else {
                self.model.param(name).map(|t| t.shape().to_vec())
            }
            .ok_or_else(|| Error::Contract(format!("optimizer state for unknown tensor `{name}`")))?;
            let axes = param_axes(shape.len());
            c.push_f32(format!("adam/{name}/m"), &axes, Tensor::new(shape.clone(), st.m.clone())?)?;
            c.push_f32(format!("adam/{name}/v"), &axes, Tensor::new(shape, st.v.clone())?)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Checkpoint> {
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
        let mut params = BTreeMap::new();
        for a in &c.arrays {
            if let Some(name) = a.name.strip_prefix("param/") {
                params.insert(name.to_string(), c.f32(&a.name)?.clone());
            }
        }
        let model = AdmmModel::from_params(meta.admm, params)?;
        let pm = meta.pattern;
        let pattern = SamplingPattern::from_parts(
            pm.mode,
            pm.n_echoes,
            pm.target_ratio,
            pm.slope,
            pm.force_dc,
            pm.acs_lines,
            c.f32("spo/weights").ok().cloned(),
            c.f32("spo/masks").ok().cloned(),
        )?;
        let mut optimizer = BTreeMap::new();
        for (name, step) in meta.adam_steps {
            let m = c.f32(&format!("adam/{name}/m"))?.data().to_vec();
            let v = c.f32(&format!("adam/{name}/v"))?.data().to_vec();
            optimizer.insert(name, AdamState { m, v, step });
        }
        Ok(Checkpoint {
            config: meta.config,
            model,
            pattern,
            stage: meta.stage,
            epoch: meta.epoch,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_container(&Container::read(path)?)
    }

    /// Masks used for evaluation: the fixed masks, or one seeded draw from a
    /// learnable pattern.
    pub fn eval_masks(&self) -> Result<Tensor> {
        self.pattern.sample(self.config.seed ^ EVAL_STREAM)
    }
}

/// Zero-filled reconstruction `A^H b` of the masked data.
pub fn zero_filled(kspace: &KSpaceData, coils: &CoilSensitivities, masks: &Tensor) -> Result<MultiEchoImage> {
    let under = kspace.undersample(masks)?;
    forward_model::adjoint(under.samples(), coils, under.masks())
}

/// Final ADMM iterate for `kspace` undersampled with `masks`; zero-filled when
/// the model has no unrolls.
pub fn reconstruct(
    model: &AdmmModel,
    kspace: &KSpaceData,
    coils: &CoilSensitivities,
    masks: &Tensor,
) -> Result<MultiEchoImage> {
    let under = kspace.undersample(masks)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let m = g.constant(under.masks().clone());
    let op = EncodingOp::new(&mut g, coils, m)?;
    let b = g.complex_constant(under.samples().clone());
    let iterates = admm_forward(&mut g, &bound, &op, b)?;
    match iterates.last() {
        Some(&s) => MultiEchoImage::new(g.complex_value(s)),
        None => forward_model::adjoint(under.samples(), coils, under.masks()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub slice: usize,
    #[serde(with = "finite_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-slice echo-combined metrics with their summary statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub per_slice: Vec<SliceEntry>,
    #[serde(with = "finite_or_inf")]
    pub mean_psnr: f64,
    #[serde(with = "finite_or_inf")]
    pub std_psnr: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
}

impl EvalReport {
    pub fn from_entries(fingerprint: String, per_slice: Vec<SliceEntry>) -> Self {
        let psnr: Vec<f64> = per_slice.iter().map(|e| e.psnr).collect();
        let ssim: Vec<f64> = per_slice.iter().map(|e| e.ssim).collect();
        let (mean_psnr, std_psnr) = mean_std(&psnr);
        let (mean_ssim, std_ssim) = mean_std(&ssim);
        EvalReport {
            fingerprint,
            per_slice,
            mean_psnr,
            std_psnr,
            mean_ssim,
            std_ssim,
        }
    }

    /// Scores reconstruction/label pairs, keyed by slice index.
    pub fn score(fingerprint: String, pairs: &[(usize, MultiEchoImage, MultiEchoImage)]) -> Result<Self> {
        let entries = pairs
            .par_iter()
            .map(|(i, recon, label)| {
                let s = metrics::score(recon, label)?;
                Ok(SliceEntry {
                    slice: *i,
                    psnr: s.psnr,
                    ssim: s.ssim,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport::from_entries(fingerprint, entries))
    }

    /// True when the stored summary matches a recomputation from `per_slice`.
    pub fn is_consistent(&self) -> bool {
        let again = EvalReport::from_entries(self.fingerprint.clone(), self.per_slice.clone());
        let same = |a: f64, b: f64| a == b || (a.is_nan() && b.is_nan());
        same(again.mean_psnr, self.mean_psnr)
            && same(again.std_psnr, self.std_psnr)
            && same(again.mean_ssim, self.mean_ssim)
            && same(again.std_ssim, self.std_ssim)
    }
}

/// Validation metrics of `model` on `slices` with fixed `masks`.
pub fn evaluate(model: &AdmmModel, slices: &[&Slice], masks: &Tensor, fingerprint: &str) -> Result<EvalReport> {
    let pairs = slices
        .par_iter()
        .map(|s| Ok((s.index, reconstruct(model, &s.kspace, &s.coils, masks)?, s.label.clone())))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::score(fingerprint.to_string(), &pairs)
}

pub fn evaluate_zero_filled(slices: &[&Slice], masks: &Tensor, fingerprint: &str) -> Result<EvalReport> {
    let pairs = slices
        .par_iter()
        .map(|s| Ok((s.index, zero_filled(&s.kspace, &s.coils, masks)?, s.label.clone())))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::score(fingerprint.to_string(), &pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    #[serde(with = "finite_or_inf")]
    pub val_psnr: f64,
    pub val_ssim: f64,
}

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("epoch,loss,val_psnr,val_ssim\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", i + 1, r.loss, r.val_psnr, r.val_ssim);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub fingerprint: String,
    pub curves: Vec<CurveRow>,
    pub validation: EvalReport,
    pub zero_filled: EvalReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

fn check_data(config: &TrainConfig, data: &[Slice]) -> Result<(usize, usize, usize)> {
    let Some(first) = data.first() else {
        return invalid("training needs at least one slice");
    };
    let (n, h, w) = (first.label.n_echoes(), first.label.height(), first.label.width());
    for s in data {
        if s.label.tensor().shape() != [n, h, w] {
            return invalid(format!("slice {} shape differs from slice {}", s.index, first.index));
        }
        if (s.kspace.noise_sigma() - config.noise_sigma).abs() > 1e-9 {
            return invalid(format!(
                "slice {} was simulated with noise {} but the config says {}",
                s.index,
                s.kspace.noise_sigma(),
                config.noise_sigma
            ));
        }
    }
    Ok((n, h, w))
}

/// Fresh model and sampling pattern for `config`.
pub fn initial_checkpoint(config: &TrainConfig, n_echoes: usize, height: usize, width: usize) -> Result<Checkpoint> {
    config.validate()?;
    let model = AdmmModel::new(config.admm_config(n_echoes), config.seed ^ MODEL_STREAM)?;
    let pattern = match config.spo {
        SpoMode::None => {
            let mask = manual_variable_density(
                height,
                width,
                config.target_ratio,
                config.vd_decay,
                config.vd_acs_lines,
                config.seed ^ PATTERN_STREAM,
            )?;
            SamplingPattern::manual(&mask, n_echoes)?
        }
        SpoMode::Single | SpoMode::Multi => {
            let mode = if config.spo == SpoMode::Single {
                SamplingMode::SpoSingle
            } else {
                SamplingMode::SpoMulti
            };
            SamplingPattern::learned(mode, n_echoes, height, width, config.target_ratio, config.seed ^ PATTERN_STREAM)?
                .with_slope(config.sigmoid_slope)?
                .with_forced(config.force_dc, config.spo_acs_lines)
        }
    };
    Ok(Checkpoint {
        config: config.clone(),
        model,
        pattern,
        stage: config.stage,
        epoch: 0,
        optimizer: BTreeMap::new(),
    })
}

fn non_finite(epoch: usize, step: usize, slice: usize, detail: impl Into<String>) -> Error {
    Error::NonFiniteLoss {
        epoch,
        step,
        slice,
        detail: detail.into(),
    }
}

/// Optional per-epoch hook (checkpoint path and progress callback).
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub checkpoint_path: Option<&'a Path>,
    pub on_epoch: Option<&'a mut dyn FnMut(&CurveRow)>,
}

/// Runs `config.epochs` epochs of `config.stage`.
///
/// `resume` continues an unfinished run of the same stage; a joint-stage
/// checkpoint passed to a frozen-mask run has its pattern frozen and its
/// optimizer state reset.
pub fn train(
    config: &TrainConfig,
    data: &[Slice],
    resume: Option<Checkpoint>,
    mut hooks: TrainHooks,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (n, h, w) = check_data(config, data)?;
    let fingerprint = config.fingerprint()?;
    let mut ck = match resume {
        Some(ck) if ck.stage == config.stage => ck,
        Some(ck) => {
            if config.stage != Stage::FrozenMask {
                return invalid("a frozen-mask checkpoint cannot resume a joint stage");
            }
            Checkpoint {
                pattern: ck.pattern.freeze(config.seed ^ FREEZE_STREAM)?,
                stage: Stage::FrozenMask,
                epoch: 0,
                optimizer: BTreeMap::new(),
                ..ck
            }
        }
        None => initial_checkpoint(config, n, h, w)?,
    };
    if config.stage == Stage::FrozenMask && !ck.pattern.is_fixed() {
        ck.pattern = ck.pattern.freeze(config.seed ^ FREEZE_STREAM)?;
    }
    ck.config = config.clone();
    if ck.model.config().n_echoes != n || ck.pattern.grid() != (h, w) {
        return invalid("checkpoint does not match the dataset geometry");
    }

    let (train_idx, val_idx, _) = split_indices(data.len(), config)?;
    let val: Vec<&Slice> = val_idx.iter().map(|&i| &data[i]).collect();
    let learn_pattern = config.stage == Stage::Joint && !ck.pattern.is_fixed();
    let model_adam = config.adam(config.learning_rate);
    let spo_adam = config.adam(config.spo_learning_rate);
    let mut curves = Vec::new();

    while ck.epoch < config.epochs {
        let epoch = ck.epoch;
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(slice_seed(config.seed ^ SHUFFLE_STREAM, epoch)));
        let mut loss_sum = 0.0f64;
        for (step, &idx) in order.iter().enumerate() {
            let slice = &data[idx];
            let mut g = Graph::new();
            let bound = ck.model.bind(&mut g, true);
            let spo_var = if learn_pattern {
                ck.pattern.weights().map(|wt| g.param(wt.clone()))
            } else {
                None
            };
            let draw_seed = slice_seed(config.seed ^ MASK_STREAM, epoch * order.len() + step);
            let masks = ck.pattern.masks_on_graph(&mut g, spo_var, draw_seed)?;
            let op = EncodingOp::new(&mut g, &slice.coils, masks)?;
            let full = g.complex_constant(slice.kspace.samples().clone());
            let b = op.apply_mask(&mut g, full)?;
            let iterates = admm_forward(&mut g, &bound, &op, b)?;
            let loss = training_loss(&mut g, &iterates, &slice.label, config.ssim_window)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(non_finite(epoch, step, slice.index, format!("loss = {value}")));
            }
            let grads = g.backward(loss)?;
            let mut updates: Vec<(String, Vec<f32>)> = Vec::new();
            for (name, &var) in bound.vars() {
                let grad = grads.tensor(var).into_data();
                if grad.iter().any(|v| !v.is_finite()) {
                    return Err(non_finite(epoch, step, slice.index, format!("gradient of `{name}`")));
                }
                updates.push((name.clone(), grad));
            }
            let spo_grad = match spo_var {
                Some(v) => {
                    let grad = grads.tensor(v).into_data();
                    if grad.iter().any(|x| !x.is_finite()) {
                        return Err(non_finite(epoch, step, slice.index, "gradient of sampling weights"));
                    }
                    Some(grad)
                }
                None => None,
            };
            drop(bound);
            for (name, grad) in updates {
                let param = ck
                    .model
                    .params_mut()
                    .get_mut(&name)
                    .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
                let state = ck
                    .optimizer
                    .entry(name)
                    .or_insert_with(|| AdamState::new(grad.len()));
                adam_step(param.data_mut(), &grad, state, &model_adam);
            }
            if let (Some(grad), Some(weights)) = (spo_grad, ck.pattern.weights_mut()) {
                let state = ck
                    .optimizer
                    .entry(SPO_WEIGHTS.to_string())
                    .or_insert_with(|| AdamState::new(grad.len()));
                adam_step(weights.data_mut(), &grad, state, &spo_adam);
            }
            loss_sum += value as f64;
        }
        ck.epoch += 1;
        let report = evaluate(&ck.model, &val, &ck.eval_masks()?, &fingerprint)?;
        let row = CurveRow {
            stage: config.stage,
            epoch: ck.epoch,
            loss: loss_sum / order.len() as f64,
            val_psnr: report.mean_psnr,
            val_ssim: report.mean_ssim,
        };
        if let Some(path) = hooks.checkpoint_path {
            ck.save(path)?;
        }
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&row);
        }
        curves.push(row);
    }

    let masks = ck.eval_masks()?;
    let validation = evaluate(&ck.model, &val, &masks, &fingerprint)?;
    let zero_filled = evaluate_zero_filled(&val, &masks, &fingerprint)?;
    if let Some(path) = hooks.checkpoint_path {
        ck.save(path)?;
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        report: TrainReport {
            fingerprint,
            curves,
            validation,
            zero_filled,
        },
    })
}

/// Joint stage followed, for learned patterns with `frozen_epochs > 0`, by the
/// fixed-mask stage. Curves of both stages are concatenated.
pub fn train_pipeline(config: &TrainConfig, data: &[Slice], checkpoint_path: Option<&Path>) -> Result<TrainOutcome> {
    let joint = TrainConfig {
        stage: Stage::Joint,
        ..config.clone()
    };
    let first = train(
        &joint,
        data,
        None,
        TrainHooks {
            checkpoint_path,
            on_epoch: None,
        },
    )?;
    if config.spo == SpoMode::None || config.frozen_epochs == 0 {
        return Ok(first);
    }
    let frozen = TrainConfig {
        stage: Stage::FrozenMask,
        epochs: config.frozen_epochs,
        ..config.clone()
    };
    let mut second = train(
        &frozen,
        data,
        Some(first.checkpoint),
        TrainHooks {
            checkpoint_path,
            on_epoch: None,
        },
    )?;
    let mut curves = first.report.curves;
    curves.append(&mut second.report.curves);
    second.report.curves = curves;
    Ok(second)
}

/// The five ablation configurations, in table order.
pub const ABLATION_ROWS: [(&str, SpoMode, bool); 5] = [
    ("Deep ADMM", SpoMode::None, false),
    ("Deep ADMM + single SPO", SpoMode::Single, false),
    ("Deep ADMM + TFF", SpoMode::None, true),
    ("Deep ADMM + TFF + single SPO", SpoMode::Single, true),
    ("Deep ADMM + TFF + multi SPO", SpoMode::Multi, true),
];

/// Config for one ablation row. Rows without a learned pattern train for
/// `epochs + frozen_epochs` epochs so every row gets the same step budget.
pub fn ablation_config(base: &TrainConfig, spo: SpoMode, tff: bool) -> TrainConfig {
    let mut c = TrainConfig {
        spo,
        tff,
        stage: Stage::Joint,
        ..base.clone()
    };
    if spo == SpoMode::None {
        c.epochs += c.frozen_epochs;
        c.frozen_epochs = 0;
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub fingerprints: Vec<String>,
    /// Mean validation PSNR of each seed's run.
    #[serde(with = "finite_or_inf::vec")]
    pub seed_psnr: Vec<f64>,
    #[serde(with = "finite_or_inf")]
    pub mean_psnr: f64,
    #[serde(with = "finite_or_inf")]
    pub std_psnr: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
    #[serde(with = "finite_or_inf")]
    pub zero_filled_psnr: f64,
    /// Median field-fit residual of the validation reconstructions (NaN with
    /// fewer than four echoes).
    #[serde(with = "finite_or_inf")]
    pub median_fit_residual: f64,
}

/// Median over slices of the per-slice median field-fit residual, fitted
/// where the label's first echo is above 5% of its maximum.
pub fn median_fit_residual(model: &AdmmModel, slices: &[&Slice], masks: &Tensor) -> Result<f64> {
    let n = model.config().n_echoes;
    if n < qsm::N_PARAMS || slices.is_empty() {
        return Ok(f64::NAN);
    }
    let mut per_slice = slices
        .par_iter()
        .map(|s| {
            let recon = reconstruct(model, &s.kspace, &s.coils, masks)?;
            let first = s.label.magnitude(0);
            let peak = first.data().iter().fold(0.0f32, |m, &v| m.max(v));
            let support = first.map(|v| if v > 0.05 * peak { 1.0 } else { 0.0 });
            let fit = qsm::fit_field_lm(&recon, &s.params.echo_times, Some(&support), &qsm::FitSettings::default())?;
            Ok(fit.median_residual())
        })
        .collect::<Result<Vec<f64>>>()?;
    per_slice.sort_by(f64::total_cmp);
    let m = per_slice.len() / 2;
    Ok(if per_slice.len() % 2 == 0 {
        0.5 * (per_slice[m - 1] + per_slice[m])
    } else {
        per_slice[m]
    })
}

/// Trains each `(name, spo, tff)` row once per seed in `seeds` and averages
/// the validation metrics over seeds.
pub fn run_ablation_rows(
    base: &TrainConfig,
    data: &[Slice],
    rows: &[(&str, SpoMode, bool)],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return invalid("ablation needs at least one seed");
    }
    rows.iter()
        .map(|&(name, spo, tff)| {
            let mut fingerprints = Vec::new();
            let (mut psnr, mut ssim, mut zf, mut resid) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for &seed in seeds {
                let config = TrainConfig {
                    seed,
                    ..ablation_config(base, spo, tff)
                };
                let out = train_pipeline(&config, data, None)?;
                let (_, val_idx, _) = split_indices(data.len(), &config)?;
                let val: Vec<&Slice> = val_idx.iter().map(|&i| &data[i]).collect();
                let ck = &out.checkpoint;
                resid.push(median_fit_residual(&ck.model, &val, &ck.eval_masks()?)?);
                fingerprints.push(out.report.fingerprint.clone());
                psnr.push(out.report.validation.mean_psnr);
                ssim.push(out.report.validation.mean_ssim);
                zf.push(out.report.zero_filled.mean_psnr);
            }
            let (mean_psnr, std_psnr) = mean_std(&psnr);
            let (mean_ssim, std_ssim) = mean_std(&ssim);
            Ok(AblationRow {
                name: name.to_string(),
                fingerprints,
                seed_psnr: psnr,
                mean_psnr,
                std_psnr,
                mean_ssim,
                std_ssim,
                zero_filled_psnr: mean_std(&zf).0,
                median_fit_residual: mean_std(&resid).0,
            })
        })
        .collect()
}

/// All five table rows.
pub fn run_ablation(base: &TrainConfig, data: &[Slice], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    run_ablation_rows(base, data, &ABLATION_ROWS, seeds)
}

/// Spearman correlation between row PSNR and the negated field-fit residual:
/// positive when sharper reconstructions also fit the signal model better.
pub fn psnr_residual_rank_correlation(rows: &[AblationRow]) -> Result<f64> {
    let psnr: Vec<f64> = rows.iter().map(|r| r.mean_psnr).collect();
    let neg_resid: Vec<f64> = rows.iter().map(|r| -r.median_fit_residual).collect();
    metrics::spearman(&psnr, &neg_resid)
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| Method | PSNR (dB) | SSIM | Zero-filled PSNR (dB) | Field-fit residual |\n|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {:.2} ± {:.2} | {:.4} ± {:.4} | {:.2} | {:.4} |",
            r.name, r.mean_psnr, r.std_psnr, r.mean_ssim, r.std_ssim, r.zero_filled_psnr, r.median_fit_residual
        );
    }
    out
}
