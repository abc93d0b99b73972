//! Optimization loops: supervised training, masked pretraining, linear
//! probing, linear-probe-then-fine-tune and transfer.
//!
//! Every stage draws its batch order and dropout masks from streams derived
//! from the run seed, so a fixed (seed, config, data) triple reproduces the
//! same parameters bit for bit. Pretraining masks come from per-row seeds
//! `hash(seed, epoch, window·M + channel)`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Graph, Var};
use crate::config::{LossSpace, RunConfig};
use crate::data::{InstanceStats, PreparedData, INSTANCE_EPS};
use crate::error::{Error, Result};
use crate::metrics::{metric_mse_mae, Metrics};
use crate::model::{
    encode, forward_pretrain, forward_supervised, head_from_features, Features, HeadKind, Model,
    ModelConfig, ModelParams, ParamGroup, Pass, Trace,
};
use crate::patching::{sample_mask_for_rows, splitmix, PatchMask, PatchMode};
use crate::tensor::Tensor;

/// Windows per forward pass during evaluation.
const EVAL_BATCH: usize = 256;
/// Probe feature caches larger than this are recomputed per batch instead.
const FEATURE_CACHE_BYTES: usize = 1 << 30;
/// Mask epoch used for validation and test reconstruction scores.
const EVAL_MASK_EPOCH: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments; state is keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    steps: i32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[(String, Vec<f64>)]) -> Result<()> {
        self.steps += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.steps);
        let bc2 = 1.0 - c.beta2.powi(self.steps);
        for (name, grad) in grads {
            let w = params.tensor_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((w, g), m), v) in w.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Caps optimizer steps per epoch; 0 means a full pass.
    pub max_steps_per_epoch: usize,
    pub seed: u64,
    pub mask_ratio: f64,
    pub loss_all_patches: bool,
    pub loss_space: LossSpace,
    pub probe_epochs: usize,
    pub lp_epochs: usize,
    pub ft_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::from_run(&RunConfig::default())
    }
}

impl TrainConfig {
    pub fn from_run(run: &RunConfig) -> Self {
        Self {
            epochs: run.epochs,
            batch_size: run.batch_size,
            adam: AdamConfig {
                learning_rate: run.learning_rate,
                beta1: run.beta1,
                beta2: run.beta2,
                eps: run.adam_eps,
            },
            patience: run.patience,
            max_steps_per_epoch: run.max_steps_per_epoch,
            seed: run.seed,
            mask_ratio: run.mask_ratio,
            loss_all_patches: run.loss_all_patches,
            loss_space: run.loss_space,
            probe_epochs: run.probe_epochs,
            lp_epochs: run.lp_epochs,
            ft_epochs: run.ft_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch index across all stages of the run.
    pub epoch: usize,
    pub stage: &'static str,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
    pub test: Option<Metrics>,
    pub seed: u64,
    /// Global epoch count at the end of each stage.
    pub stage_boundaries: Vec<usize>,
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    /// `epoch,stage,train_loss,val_loss` rows and a `#` summary line. Wall
    /// clock time is left out so the file is reproducible.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,stage,train_loss,val_loss\n");
        for r in &self.records {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.stage, r.train_loss, val);
        }
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        let stages: Vec<String> = self.stage_boundaries.iter().map(ToString::to_string).collect();
        let _ = writeln!(
            s,
            "# best_epoch={} test_mse={} test_mae={} seed={} stage_ends={}",
            self.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
            opt(self.test.map(|m| m.mse)),
            opt(self.test.map(|m| m.mae)),
            self.seed,
            if stages.is_empty() { "-".into() } else { stages.join(";") },
        );
        s
    }

    pub fn last_train_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }
}

/// Per-element mean squared error over `[B, M, T]`, i.e. the per-channel
/// average of per-series mean squared errors.
pub fn supervised_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    g.mse(pred, target)
}

/// Mean squared error over the elements of masked patches of `[B, M, P, N]`
/// reconstructions (or over every element when `all_patches`).
pub fn pretrain_loss(
    g: &mut Graph,
    recon: Var,
    target: Var,
    mask: &PatchMask,
    all_patches: bool,
) -> Result<Var> {
    if all_patches {
        return g.mse(recon, target);
    }
    let p = g.shape(recon)[2];
    if mask.masked.iter().all(Vec::is_empty) {
        return Err(Error::config("pretraining mask is empty; the objective is degenerate"));
    }
    g.masked_mse(recon, target, mask.element_flags(p))
}

/// Derived seed for one named random stream of a run.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    stream
        .bytes()
        .fold(splitmix(seed), |h, b| splitmix(h ^ u64::from(b)))
}

struct StepOut {
    loss: f64,
    grads: Vec<(String, Vec<f64>)>,
    bn_updates: Vec<(String, BatchStats)>,
}

type StepFn<'a> = dyn FnMut(&Model, &[usize], u64, &mut ChaCha8Rng) -> Result<StepOut> + 'a;
type ValFn<'a> = dyn FnMut(&Model) -> Result<Option<f64>> + 'a;

/// Runs one stage and leaves the best-validation parameters in `model`
/// (the last epoch's when there is no validation set).
fn run_stage(
    model: &mut Model,
    starts: &[usize],
    cfg: &TrainConfig,
    stage: &'static str,
    epochs: usize,
    report: &mut TrainReport,
    step: &mut StepFn<'_>,
    validate: &mut ValFn<'_>,
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    if starts.is_empty() {
        return Err(Error::data("no training windows"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be ≥ 1"));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("{stage}/order")));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("{stage}/dropout")));
    let mut adam = Adam::new(cfg.adam);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    let mut order = starts.to_vec();
    for _ in 0..epochs {
        let epoch = report.records.len() + 1;
        order.shuffle(&mut shuffle_rng);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if cfg.max_steps_per_epoch > 0 {
            batches.truncate(cfg.max_steps_per_epoch);
        }
        let (mut loss_sum, mut weight) = (0.0, 0usize);
        for (i, batch) in batches.iter().enumerate() {
            let out = step(model, batch, epoch as u64, &mut dropout_rng)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "{stage} loss became {} at epoch {epoch}, step {}",
                    out.loss,
                    i + 1
                )));
            }
            adam.step(&mut model.params, &out.grads)?;
            model.params.apply_bn_updates(&out.bn_updates)?;
            loss_sum += out.loss * batch.len() as f64;
            weight += batch.len();
        }
        let train_loss = loss_sum / weight as f64;
        let val_loss = validate(model)?;
        if let Some(v) = val_loss {
            if !v.is_finite() {
                return Err(Error::Diverged(format!("{stage} validation loss {v} at epoch {epoch}")));
            }
        }
        report.records.push(EpochRecord {
            epoch,
            stage,
            train_loss,
            val_loss,
        });
        log::debug!("{stage} epoch {epoch}: train {train_loss:.6} val {val_loss:?}");
        match val_loss {
            Some(v) if best.as_ref().is_none_or(|(b, _, _)| v < *b) => {
                best = Some((v, epoch, model.params.clone()));
                since_best = 0;
            }
            Some(_) => since_best += 1,
            None => best = Some((f64::NAN, epoch, model.params.clone())),
        }
        if cfg.patience > 0 && since_best >= cfg.patience {
            break;
        }
    }
    let (_, epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    report.best_epoch = Some(epoch);
    Ok(())
}

fn normalized_target(y: &Tensor, stats: &Option<InstanceStats>) -> Result<Tensor> {
    let Some(stats) = stats else {
        return Ok(y.clone());
    };
    let t = y.shape()[2];
    Tensor::new(
        y.shape().to_vec(),
        y.data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - stats.mean[i / t]) / (stats.std[i / t] + INSTANCE_EPS))
            .collect(),
    )
}

fn trainable_all(g: ParamGroup) -> bool {
    g != ParamGroup::Buffer
}

fn supervised_step(
    model: &Model,
    data: &PreparedData,
    batch: &[usize],
    loss_space: LossSpace,
    rng: &mut ChaCha8Rng,
) -> Result<StepOut> {
    let (x, y) = data.batch(batch)?;
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, trainable_all);
    let mut trace = Trace::default();
    let out = forward_supervised(
        &mut g,
        &model.params,
        &bound,
        &model.config,
        &x,
        &mut Pass::Train(rng),
        &mut trace,
    )?;
    let loss = match loss_space {
        LossSpace::Data => {
            let target = g.constant(y);
            supervised_loss(&mut g, out.pred, target)?
        }
        LossSpace::Normalized => {
            let target = g.constant(normalized_target(&y, &out.stats)?);
            supervised_loss(&mut g, out.pred_norm, target)?
        }
    };
    let value = g.value(loss).data()[0];
    g.backward(loss)?;
    Ok(StepOut {
        loss: value,
        grads: bound.grads(&g),
        bn_updates: trace.bn_updates,
    })
}

/// Eval-mode forecasts and targets for the given windows, both laid out
/// `[windows, M, T]` in model (standardized) space.
pub fn predict_windows(model: &Model, data: &PreparedData, starts: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pred = Vec::new();
    let mut target = Vec::new();
    for chunk in starts.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk)?;
        pred.extend_from_slice(model.predict(&x)?.data());
        target.extend_from_slice(y.data());
    }
    Ok((pred, target))
}

pub fn evaluate(model: &Model, data: &PreparedData, starts: &[usize]) -> Result<Metrics> {
    let (p, t) = predict_windows(model, data, starts)?;
    metric_mse_mae(&p, &t)
}

fn val_mse(model: &Model, data: &PreparedData) -> Result<Option<f64>> {
    if data.val.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate(model, data, &data.val)?.mse))
}

fn check_forecast_model(model: &Model, data: &PreparedData) -> Result<()> {
    let c = &model.config;
    if c.head_kind != HeadKind::Forecast {
        return Err(Error::config("supervised training needs a forecast head"));
    }
    if c.lookback != data.lookback || c.horizon != data.horizon {
        return Err(Error::config(format!(
            "model expects L={}, T={} but data windows are L={}, T={}",
            c.lookback, c.horizon, data.lookback, data.horizon
        )));
    }
    Ok(())
}

/// Supervised training with per-epoch validation, early stopping and
/// best-validation selection; the report carries test metrics.
pub fn train(mut model: Model, data: &PreparedData, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    check_forecast_model(&model, data)?;
    let clock = Instant::now();
    let mut report = TrainReport {
        seed: cfg.seed,
        ..TrainReport::default()
    };
    run_stage(
        &mut model,
        &data.train,
        cfg,
        "supervised",
        cfg.epochs,
        &mut report,
        &mut |m, batch, _, rng| supervised_step(m, data, batch, cfg.loss_space, rng),
        &mut |m| val_mse(m, data),
    )?;
    report.stage_boundaries.push(report.records.len());
    if !data.test.is_empty() {
        report.test = Some(evaluate(&model, data, &data.test)?);
    }
    report.wall_clock_seconds = clock.elapsed().as_secs_f64();
    Ok((model, report))
}

fn row_ids(batch: &[usize], channels: usize) -> Vec<u64> {
    batch
        .iter()
        .flat_map(|&s| (0..channels).map(move |m| (s * channels + m) as u64))
        .collect()
}

fn check_pretrain(model: &Model, data: &PreparedData, cfg: &TrainConfig) -> Result<()> {
    let c = &model.config;
    if c.patch_mode != PatchMode::NonOverlap {
        return Err(Error::config("pretraining needs non-overlapping patches"));
    }
    if c.head_kind != HeadKind::Reconstruct {
        return Err(Error::config("pretraining needs a reconstruction head"));
    }
    if !(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0) {
        return Err(Error::config(format!(
            "mask ratio {} leaves nothing to reconstruct; use a value in (0, 1)",
            cfg.mask_ratio
        )));
    }
    if crate::patching::mask_count(c.num_patches()?, cfg.mask_ratio) == 0 {
        return Err(Error::config("mask ratio masks zero patches per row"));
    }
    if c.lookback != data.lookback {
        return Err(Error::config("data look-back differs from the model's"));
    }
    Ok(())
}

/// Squared and absolute reconstruction errors on masked (or all) elements.
#[derive(Debug, Clone, Copy, Default)]
struct ReconTally {
    model_se: f64,
    model_ae: f64,
    baseline_se: f64,
    baseline_ae: f64,
    count: usize,
}

/// Reconstruction errors for `starts` with masks of `mask_epoch`. In
/// `data_space` the reconstructions are de-normalized and the baseline
/// predicts each channel's training mean; otherwise both live in
/// instance-normalized space and the baseline predicts 0.
fn reconstruction_tally(
    model: &Model,
    data: &PreparedData,
    starts: &[usize],
    cfg: &TrainConfig,
    mask_epoch: u64,
    data_space: bool,
) -> Result<ReconTally> {
    let mut tally = ReconTally::default();
    let m = data.channels();
    let n = model.config.num_patches()?;
    let p = model.config.patch_len;
    let train_mean: Vec<f64> = match &data.scaler {
        Some(_) => vec![0.0; m],
        None => (0..m)
            .map(|c| {
                let r = data.splits.train.clone();
                let len = r.len() as f64;
                r.map(|t| data.table.value(t, c)).sum::<f64>() / len
            })
            .collect(),
    };
    for chunk in starts.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk)?;
        let mask = sample_mask_for_rows(&row_ids(chunk, m), n, cfg.mask_ratio, cfg.seed, mask_epoch)?;
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, |_| false);
        let out = forward_pretrain(
            &mut g,
            &model.params,
            &bound,
            &model.config,
            &x,
            &mask,
            &mut Pass::Eval,
            &mut Trace::default(),
        )?;
        let recon = g.value(out.recon).data();
        let flags = mask.element_flags(p);
        let per_row = p * n;
        for (i, (&r, &t)) in recon.iter().zip(out.target.data()).enumerate() {
            if !(cfg.loss_all_patches || flags[i]) {
                continue;
            }
            let row = i / per_row;
            let (r, t, base) = match (&out.stats, data_space) {
                (Some(s), true) => {
                    let scale = s.std[row] + INSTANCE_EPS;
                    (r * scale + s.mean[row], t * scale + s.mean[row], train_mean[row % m])
                }
                (None, true) => (r, t, train_mean[row % m]),
                (_, false) => (r, t, 0.0),
            };
            tally.model_se += (r - t) * (r - t);
            tally.model_ae += (r - t).abs();
            tally.baseline_se += (base - t) * (base - t);
            tally.baseline_ae += (base - t).abs();
            tally.count += 1;
        }
    }
    Ok(tally)
}

/// Masked-reconstruction scores of a pretrained model and of mean
/// imputation (each masked value predicted by its channel's training mean),
/// both in the model's data space on the same masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionScores {
    pub model: Metrics,
    pub mean_imputation: Metrics,
}

pub fn evaluate_reconstruction(
    model: &Model,
    data: &PreparedData,
    starts: &[usize],
    cfg: &TrainConfig,
) -> Result<ReconstructionScores> {
    let t = reconstruction_tally(model, data, starts, cfg, EVAL_MASK_EPOCH, true)?;
    if t.count == 0 {
        return Err(Error::data("no masked values to score"));
    }
    let n = t.count as f64;
    Ok(ReconstructionScores {
        model: Metrics {
            mse: t.model_se / n,
            mae: t.model_ae / n,
        },
        mean_imputation: Metrics {
            mse: t.baseline_se / n,
            mae: t.baseline_ae / n,
        },
    })
}

/// Masked-patch pretraining of trunk and reconstruction head.
pub fn pretrain(mut model: Model, data: &PreparedData, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    check_pretrain(&model, data, cfg)?;
    let clock = Instant::now();
    let m = data.channels();
    let mut report = TrainReport {
        seed: cfg.seed,
        ..TrainReport::default()
    };
    let mut step = |model: &Model, batch: &[usize], epoch: u64, rng: &mut ChaCha8Rng| -> Result<StepOut> {
        let (x, _) = data.batch(batch)?;
        let n = model.config.num_patches()?;
        let mask = sample_mask_for_rows(&row_ids(batch, m), n, cfg.mask_ratio, cfg.seed, epoch)?;
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, trainable_all);
        let mut trace = Trace::default();
        let out = forward_pretrain(
            &mut g,
            &model.params,
            &bound,
            &model.config,
            &x,
            &mask,
            &mut Pass::Train(rng),
            &mut trace,
        )?;
        let target = g.constant(out.target);
        let loss = pretrain_loss(&mut g, out.recon, target, &mask, cfg.loss_all_patches)?;
        let value = g.value(loss).data()[0];
        g.backward(loss)?;
        Ok(StepOut {
            loss: value,
            grads: bound.grads(&g),
            bn_updates: trace.bn_updates,
        })
    };
    let mut validate = |model: &Model| -> Result<Option<f64>> {
        if data.val.is_empty() {
            return Ok(None);
        }
        let t = reconstruction_tally(model, data, &data.val, cfg, EVAL_MASK_EPOCH, false)?;
        Ok(Some(t.model_se / t.count.max(1) as f64))
    };
    run_stage(
        &mut model,
        &data.train,
        cfg,
        "pretrain",
        cfg.epochs,
        &mut report,
        &mut step,
        &mut validate,
    )?;
    report.stage_boundaries.push(report.records.len());
    if !data.test.is_empty() {
        report.test = Some(evaluate_reconstruction(&model, data, &data.test, cfg)?.model);
    }
    report.wall_clock_seconds = clock.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Copies the trunk of `source` into a model of configuration `target`
/// (head kind forced to forecast) with a freshly initialized forecast head.
/// The patch length and trunk widths must match, and so must the patch
/// count since the position table is per patch.
pub fn attach_forecast_head(source: &Model, target: &ModelConfig, seed: u64) -> Result<Model> {
    let s = &source.config;
    let mut cfg = target.clone();
    cfg.head_kind = HeadKind::Forecast;
    if cfg.patch_len != s.patch_len {
        return Err(Error::config(format!(
            "patch length mismatch: trunk was trained with P = {}, target uses P = {}",
            s.patch_len, cfg.patch_len
        )));
    }
    if (cfg.d_model, cfg.heads, cfg.d_ff, cfg.layers) != (s.d_model, s.heads, s.d_ff, s.layers)
        || cfg.channel_mode != s.channel_mode
        || cfg.token_width() != s.token_width()
    {
        return Err(Error::config("target trunk shape differs from the source trunk"));
    }
    let (sn, tn) = (s.num_patches()?, cfg.num_patches()?);
    if sn != tn {
        return Err(Error::config(format!(
            "patch count mismatch: trunk has N = {sn}, target patching gives N = {tn}"
        )));
    }
    let mut params = ModelParams::new();
    for (name, p) in source.params.iter() {
        if p.group != ParamGroup::Head {
            params.insert(name, p.tensor.clone(), p.group);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "head"));
    params.reset_head(&cfg, &mut rng)?;
    Ok(Model { config: cfg, params })
}

fn probe_target(trunk: &Model, data: &PreparedData) -> ModelConfig {
    ModelConfig {
        lookback: data.lookback,
        horizon: data.horizon,
        channels: data.channels(),
        head_kind: HeadKind::Forecast,
        ..trunk.config.clone()
    }
}

/// Eval-mode trunk features per window, computed once when they fit in
/// memory.
struct FeatureCache {
    enabled: bool,
    map: HashMap<usize, (Vec<f64>, Option<InstanceStats>)>,
}

impl FeatureCache {
    fn new(model: &Model, data: &PreparedData) -> Result<Self> {
        let c = &model.config;
        let windows = data.train.len() + data.val.len();
        let bytes = windows * data.channels() * c.num_patches()? * c.d_model * 8;
        Ok(Self {
            enabled: bytes <= FEATURE_CACHE_BYTES,
            map: HashMap::new(),
        })
    }

    fn fill(&mut self, model: &Model, data: &PreparedData, starts: &[usize]) -> Result<()> {
        let missing: Vec<usize> = starts.iter().copied().filter(|s| !self.map.contains_key(s)).collect();
        let m = data.channels();
        for chunk in missing.chunks(EVAL_BATCH) {
            let (x, _) = data.batch(chunk)?;
            let (z, stats) = model.features(&x)?;
            let per = z.numel() / chunk.len();
            for (i, &s) in chunk.iter().enumerate() {
                let st = stats.as_ref().map(|st| InstanceStats {
                    mean: st.mean[i * m..(i + 1) * m].to_vec(),
                    std: st.std[i * m..(i + 1) * m].to_vec(),
                });
                self.map.insert(s, (z.data()[i * per..(i + 1) * per].to_vec(), st));
            }
        }
        Ok(())
    }

    /// Features `[rows, N, D]` plus stats for a batch of windows.
    fn features(&mut self, model: &Model, data: &PreparedData, batch: &[usize]) -> Result<(Tensor, Option<InstanceStats>)> {
        if !self.enabled {
            let (x, _) = data.batch(batch)?;
            return model.features(&x);
        }
        self.fill(model, data, batch)?;
        let mut z = Vec::new();
        let mut stats: Option<InstanceStats> = None;
        for s in batch {
            let (feat, st) = &self.map[s];
            z.extend_from_slice(feat);
            if let Some(st) = st {
                let acc = stats.get_or_insert_with(|| InstanceStats {
                    mean: Vec::new(),
                    std: Vec::new(),
                });
                acc.mean.extend_from_slice(&st.mean);
                acc.std.extend_from_slice(&st.std);
            }
        }
        let c = &model.config;
        let rows = z.len() / (c.num_patches()? * c.d_model);
        Ok((Tensor::new(vec![rows, c.num_patches()?, c.d_model], z)?, stats))
    }
}

fn head_forward(
    g: &mut Graph,
    model: &Model,
    z: Tensor,
    stats: Option<InstanceStats>,
    batch: usize,
    channels: usize,
    trainable: bool,
) -> Result<(crate::model::ForecastOutput, crate::model::Bound)> {
    let bound = model
        .params
        .bind(g, |grp| trainable && grp == ParamGroup::Head);
    let feats = Features {
        z: g.constant(z),
        batch,
        channels,
        stats,
    };
    let out = head_from_features(g, &bound, &model.config, &feats)?;
    Ok((out, bound))
}

/// Trains only the forecast head on top of the frozen, eval-mode trunk.
fn probe_stage(
    model: &mut Model,
    data: &PreparedData,
    cfg: &TrainConfig,
    epochs: usize,
    stage: &'static str,
    report: &mut TrainReport,
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    // Trunk parameters never change during this stage, so features stay valid.
    let trunk_model = model.clone();
    let cache = std::cell::RefCell::new(FeatureCache::new(&trunk_model, data)?);
    let m = data.channels();
    let mut step = |model: &Model, batch: &[usize], _: u64, _: &mut ChaCha8Rng| -> Result<StepOut> {
        let (z, stats) = cache.borrow_mut().features(&trunk_model, data, batch)?;
        let (_, y) = data.batch(batch)?;
        let mut g = Graph::new();
        let (out, bound) = head_forward(&mut g, model, z, stats, batch.len(), m, true)?;
        let loss = match cfg.loss_space {
            LossSpace::Data => {
                let target = g.constant(y);
                supervised_loss(&mut g, out.pred, target)?
            }
            LossSpace::Normalized => {
                let target = g.constant(normalized_target(&y, &out.stats)?);
                supervised_loss(&mut g, out.pred_norm, target)?
            }
        };
        let value = g.value(loss).data()[0];
        g.backward(loss)?;
        Ok(StepOut {
            loss: value,
            grads: bound.grads(&g),
            bn_updates: Vec::new(),
        })
    };
    let mut validate = |model: &Model| -> Result<Option<f64>> {
        if data.val.is_empty() {
            return Ok(None);
        }
        let (mut se, mut count) = (0.0, 0usize);
        for chunk in data.val.chunks(EVAL_BATCH) {
            let (z, stats) = cache.borrow_mut().features(&trunk_model, data, chunk)?;
            let (_, y) = data.batch(chunk)?;
            let mut g = Graph::new();
            let (out, _) = head_forward(&mut g, model, z, stats, chunk.len(), m, false)?;
            for (p, t) in g.value(out.pred).data().iter().zip(y.data()) {
                se += (p - t) * (p - t);
                count += 1;
            }
        }
        Ok(Some(se / count as f64))
    };
    run_stage(model, &data.train, cfg, stage, epochs, report, &mut step, &mut validate)
}

fn finish_forecast_report(model: &Model, data: &PreparedData, report: &mut TrainReport, clock: Instant) -> Result<()> {
    if !data.test.is_empty() {
        report.test = Some(evaluate(model, data, &data.test)?);
    }
    report.wall_clock_seconds = clock.elapsed().as_secs_f64();
    Ok(())
}

fn probe_model(model: Model, data: &PreparedData, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let clock = Instant::now();
    let mut model = model;
    let mut report = TrainReport {
        seed: cfg.seed,
        ..TrainReport::default()
    };
    probe_stage(&mut model, data, cfg, cfg.probe_epochs, "probe", &mut report)?;
    report.stage_boundaries.push(report.records.len());
    finish_forecast_report(&model, data, &mut report, clock)?;
    Ok((model, report))
}

fn lp_ft_model(model: Model, data: &PreparedData, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let clock = Instant::now();
    let mut model = model;
    let mut report = TrainReport {
        seed: cfg.seed,
        ..TrainReport::default()
    };
    probe_stage(&mut model, data, cfg, cfg.lp_epochs, "linear_probe", &mut report)?;
    report.stage_boundaries.push(report.records.len());
    run_stage(
        &mut model,
        &data.train,
        cfg,
        "finetune",
        cfg.ft_epochs,
        &mut report,
        &mut |m, batch, _, rng| supervised_step(m, data, batch, cfg.loss_space, rng),
        &mut |m| val_mse(m, data),
    )?;
    report.stage_boundaries.push(report.records.len());
    finish_forecast_report(&model, data, &mut report, clock)?;
    Ok((model, report))
}

/// Fresh forecast head on a pretrained trunk, trained for `probe_epochs`
/// with the trunk frozen in eval mode (running statistics included).
pub fn linear_probe(trunk: &Model, data: &PreparedData, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let model = attach_forecast_head(trunk, &probe_target(trunk, data), cfg.seed)?;
    probe_model(model, data, cfg)
}

/// `lp_epochs` of linear probing, then `ft_epochs` with every parameter
/// trainable; the stage-2 best-validation parameters are returned.
pub fn finetune_lp_then_ft(trunk: &Model, data: &PreparedData, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let model = attach_forecast_head(trunk, &probe_target(trunk, data), cfg.seed)?;
    lp_ft_model(model, data, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferMode {
    Probe,
    LpThenFt,
}

/// Moves a trunk to another dataset: `target` gives the patching and
/// horizon used there (P must match the trunk's), the head is rebuilt.
pub fn transfer(
    source: &Model,
    target: &ModelConfig,
    data: &PreparedData,
    cfg: &TrainConfig,
    mode: TransferMode,
) -> Result<(Model, TrainReport)> {
    let target = ModelConfig {
        channels: data.channels(),
        ..target.clone()
    };
    let model = attach_forecast_head(source, &target, cfg.seed)?;
    check_forecast_model(&model, data)?;
    match mode {
        TransferMode::Probe => probe_model(model, data, cfg),
        TransferMode::LpThenFt => lp_ft_model(model, data, cfg),
    }
}

/// Encoder features of a model for a batch, exposed for inspection tools.
pub fn trunk_features(model: &Model, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, |_| false);
    let f = encode(
        &mut g,
        &model.params,
        &bound,
        &model.config,
        x,
        &mut Pass::Eval,
        &mut Trace::default(),
    )?;
    Ok(g.value(f.z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, PrepareOptions, SynthSpec};
    use crate::model::ChannelMode;
    use crate::patching::sample_mask;
    use rand::Rng;

    fn tiny(l: usize, t: usize) -> ModelConfig {
        ModelConfig {
            lookback: l,
            horizon: t,
            patch_len: 8,
            stride: 8,
            patch_mode: PatchMode::PaddedOverlap,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            layers: 1,
            dropout: 0.0,
            channel_mode: ChannelMode::Independent,
            channels: 2,
            instance_norm: true,
            head_kind: HeadKind::Forecast,
        }
    }

    fn synth(m: usize, n: usize, seed: u64) -> crate::data::SeriesTable {
        synth_generate(&SynthSpec::suite(m, n, seed, &[16.0, 40.0], 0.1)).unwrap()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            adam: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            patience: 0,
            max_steps_per_epoch: 4,
            seed: 5,
            probe_epochs: 2,
            lp_epochs: 2,
            ft_epochs: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn supervised_loss_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 2, 1], vec![1.0, 3.0]).unwrap());
        let t = g.constant(Tensor::zeros(&[1, 2, 1]));
        let l = supervised_loss(&mut g, p, t).unwrap();
        assert_eq!(g.value(l).data()[0], 5.0);
        let l0 = supervised_loss(&mut g, p, p).unwrap();
        assert_eq!(g.value(l0).data()[0], 0.0);
        // Duplicating channels keeps the value.
        let p2 = g.constant(Tensor::new(vec![1, 4, 1], vec![1.0, 3.0, 1.0, 3.0]).unwrap());
        let t2 = g.constant(Tensor::zeros(&[1, 4, 1]));
        let l2 = supervised_loss(&mut g, p2, t2).unwrap();
        assert_eq!(g.value(l2).data()[0], 5.0);
    }

    #[test]
    fn pretrain_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, m, p, n) = (2, 2, 3, 5);
        let target = Tensor::from_fn(&[b, m, p, n], |_| rng.random_range(-1.0..1.0));
        let mask = sample_mask(b * m, n, 0.4, &mut rng).unwrap();
        let flags = mask.element_flags(p);
        // Exact on masked, garbage elsewhere.
        let recon = Tensor::from_fn(&[b, m, p, n], |i| if flags[i] { target.data()[i] } else { 99.0 });
        let mut g = Graph::new();
        let rv = g.param(recon);
        let tv = g.constant(target.clone());
        let l = pretrain_loss(&mut g, rv, tv, &mask, false).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);

        // Brute-force oracle on a random reconstruction; visible gradients are zero.
        let recon = Tensor::from_fn(&[b, m, p, n], |_| rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let rv = g.param(recon.clone());
        let tv = g.constant(target.clone());
        let l = pretrain_loss(&mut g, rv, tv, &mask, false).unwrap();
        let (mut se, mut count) = (0.0, 0);
        for row in 0..b * m {
            for &j in &mask.masked[row] {
                for k in 0..p {
                    let i = (row * p + k) * n + j;
                    se += (recon.data()[i] - target.data()[i]).powi(2);
                    count += 1;
                }
            }
        }
        assert!((g.value(l).data()[0] - se / count as f64).abs() < 1e-12);
        g.backward(l).unwrap();
        for (gr, f) in g.grad(rv).unwrap().iter().zip(&flags) {
            if !f {
                assert_eq!(*gr, 0.0);
            }
        }

        // A single masked patch with unit errors.
        let one = PatchMask {
            masked: vec![vec![2], vec![], vec![], vec![]],
            num_patches: n,
            ratio: 0.2,
        };
        let mut g = Graph::new();
        let rv = g.constant(Tensor::from_fn(&[b, m, p, n], |i| target.data()[i] + 1.0));
        let tv = g.constant(target);
        let l = pretrain_loss(&mut g, rv, tv, &one, false).unwrap();
        assert!((g.value(l).data()[0] - 1.0).abs() < 1e-12);
        let empty = PatchMask {
            masked: vec![vec![]; 4],
            num_patches: n,
            ratio: 0.0,
        };
        assert!(pretrain_loss(&mut g, rv, tv, &empty, false).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = ModelParams::new();
        params.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), ParamGroup::Head);
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        adam.step(&mut params, &[("w".into(), vec![3.0, -0.5])]).unwrap();
        let w = params.tensor("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn patience_zero_runs_every_epoch_and_is_deterministic() {
        let table = synth(2, 400, 1);
        let data = PreparedData::new(&table, 32, 8, &PrepareOptions::default()).unwrap();
        let cfg = quick_cfg(3);
        let run = || train(Model::new(tiny(32, 8), 1).unwrap(), &data, &cfg).unwrap();
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(r1.records.len(), 3);
        assert_eq!(r1.to_csv(), r2.to_csv());
        assert_eq!(m1.params, m2.params);
        assert!(r1.test.is_some());
    }

    #[test]
    fn early_stopping_returns_best_epoch() {
        let table = synth(2, 400, 2);
        let data = PreparedData::new(&table, 32, 8, &PrepareOptions::default()).unwrap();
        let cfg = TrainConfig {
            patience: 2,
            adam: AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            ..quick_cfg(12)
        };
        let (model, report) = train(Model::new(tiny(32, 8), 2).unwrap(), &data, &cfg).unwrap();
        let best = report
            .records
            .iter()
            .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).unwrap())
            .unwrap();
        assert_eq!(report.best_epoch, Some(best.epoch));
        let val = evaluate(&model, &data, &data.val).unwrap().mse;
        assert_eq!(val, best.val_loss.unwrap());
        if report.records.len() < 12 {
            let last = report.records.len();
            assert!(last - best.epoch >= 2);
        }
    }

    #[test]
    fn nan_loss_aborts_with_diagnostic() {
        let table = synth(2, 400, 3);
        let data = PreparedData::new(&table, 32, 8, &PrepareOptions::default()).unwrap();
        let mut model = Model::new(tiny(32, 8), 3).unwrap();
        model.params.tensor_mut("head.forecast.b").unwrap().data_mut()[0] = f64::NAN;
        let err = train(model, &data, &quick_cfg(1)).unwrap_err();
        assert!(matches!(err, Error::Diverged(ref m) if m.contains("epoch 1")));
    }

    fn pretrain_setup() -> (Model, PreparedData) {
        let table = synth(3, 500, 4);
        let data = PreparedData::new(&table, 48, 8, &PrepareOptions::default()).unwrap();
        let cfg = ModelConfig {
            lookback: 48,
            patch_len: 12,
            stride: 12,
            patch_mode: PatchMode::NonOverlap,
            head_kind: HeadKind::Reconstruct,
            ..tiny(48, 8)
        };
        (Model::new(cfg, 4).unwrap(), data)
    }

    #[test]
    fn pretrain_runs_and_rejects_zero_ratio() {
        let (model, data) = pretrain_setup();
        let cfg = TrainConfig {
            mask_ratio: 0.0,
            ..quick_cfg(1)
        };
        assert!(matches!(pretrain(model.clone(), &data, &cfg), Err(Error::Config(_))));
        let (trained, report) = pretrain(model, &data, &quick_cfg(2)).unwrap();
        assert_eq!(report.records.len(), 2);
        // The trunk runs on a dataset with a different channel count.
        let other = PreparedData::new(&synth(5, 500, 9), 48, 8, &PrepareOptions::default()).unwrap();
        let (x, _) = other.batch(&other.train[..2]).unwrap();
        assert_eq!(trunk_features(&trained, &x).unwrap().shape(), &[10, 4, 8]);
    }

    #[test]
    fn probe_freezes_trunk_and_stages_are_recorded() {
        let (model, data) = pretrain_setup();
        let (trained, _) = pretrain(model, &data, &quick_cfg(1)).unwrap();
        let before = trained.params.digest(&[ParamGroup::Trunk, ParamGroup::Buffer]);
        let (probed, report) = linear_probe(&trained, &data, &quick_cfg(1)).unwrap();
        assert_eq!(probed.params.digest(&[ParamGroup::Trunk, ParamGroup::Buffer]), before);
        assert_eq!(report.records.len(), 2);

        // Zero probe epochs return the initialized head.
        let cfg0 = TrainConfig {
            probe_epochs: 0,
            ..quick_cfg(1)
        };
        let (p0, _) = linear_probe(&trained, &data, &cfg0).unwrap();
        let fresh = attach_forecast_head(&trained, &probe_target(&trained, &data), cfg0.seed).unwrap();
        assert_eq!(p0.params, fresh.params);

        let cfg_ft = TrainConfig {
            lp_epochs: 2,
            ft_epochs: 3,
            ..quick_cfg(1)
        };
        let (_, r) = finetune_lp_then_ft(&trained, &data, &cfg_ft).unwrap();
        assert_eq!(r.stage_boundaries, vec![2, 5]);
        let cfg_none = TrainConfig {
            lp_epochs: 0,
            ft_epochs: 0,
            ..quick_cfg(1)
        };
        let (m0, _) = finetune_lp_then_ft(&trained, &data, &cfg_none).unwrap();
        assert_eq!(m0.params, fresh.params);
    }

    #[test]
    fn transfer_contracts() {
        let (model, data) = pretrain_setup();
        let (trained, _) = pretrain(model, &data, &quick_cfg(1)).unwrap();
        let target_data = PreparedData::new(&synth(2, 500, 11), 48, 8, &PrepareOptions::default()).unwrap();
        let target = ModelConfig {
            head_kind: HeadKind::Forecast,
            ..trained.config.clone()
        };
        let (m, _) = transfer(&trained, &target, &target_data, &quick_cfg(1), TransferMode::Probe).unwrap();
        assert_eq!(m.config.channels, 2);
        let wrong_p = ModelConfig {
            patch_len: 8,
            stride: 8,
            ..target.clone()
        };
        let err = transfer(&trained, &wrong_p, &target_data, &quick_cfg(1), TransferMode::Probe).unwrap_err();
        assert!(matches!(err, Error::Config(ref msg) if msg.contains("patch length")));
        let other_l = PreparedData::new(&synth(2, 500, 11), 96, 8, &PrepareOptions::default()).unwrap();
        let err = linear_probe(&trained, &other_l, &quick_cfg(1)).unwrap_err();
        assert!(matches!(err, Error::Config(ref msg) if msg.contains("patch count")));
    }

    #[test]
    fn reconstruction_scores_share_masks() {
        let (model, data) = pretrain_setup();
        let cfg = quick_cfg(1);
        let a = evaluate_reconstruction(&model, &data, &data.test, &cfg).unwrap();
        let b = evaluate_reconstruction(&model, &data, &data.test, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.model.mse > 0.0 && a.mean_imputation.mse > 0.0);
    }

    #[test]
    fn report_csv_layout() {
        let report = TrainReport {
            records: vec![EpochRecord {
                epoch: 1,
                stage: "supervised",
                train_loss: 0.5,
                val_loss: Some(0.25),
            }],
            best_epoch: Some(1),
            test: None,
            seed: 7,
            stage_boundaries: vec![1],
            wall_clock_seconds: 3.0,
        };
        assert_eq!(
            report.to_csv(),
            "epoch,stage,train_loss,val_loss\n1,supervised,0.5,0.25\n\
             # best_epoch=1 test_mse=- test_mae=- seed=7 stage_ends=1\n"
        );
    }
}
