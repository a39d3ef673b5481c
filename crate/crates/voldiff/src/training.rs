//! Training: the SNR-weighted composite loss, AdamW with global
//! gradient clipping, EMA tracking, plateau learning-rate scheduling,
//! early stopping, and checkpoints.
//!
//! One iteration draws an independent `(t, ε)` pair per batch sample,
//! builds each sample's loss graph on its own tape (samples evaluate in
//! parallel), merges gradients in fixed sample order, applies the
//! clipped AdamW update, and then updates the EMA copy.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arbitrage::{penalty_conv_graph, PricingContext};
use crate::dataprep::conditioning::{ConditioningBundle, ConditioningConfig, ScalarStats};
use crate::dataprep::csvio::atomic_write;
use crate::dataprep::grid::{GridSpec, SurfaceGrid};
use crate::dataprep::{Dataset, NormalizationStats};
use crate::diffusion::{denoised_estimate_graph, forward_sample, snr_weight, NoiseSchedule};
use crate::error::{Error, Result};
use crate::gridmath::{Array, Tape, Var};
use crate::model::{
    mount_params, param_init, unet_forward, unet_forward_tape, ModelWeights, ParamStore,
    UNetConfig,
};

/// Training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Overall arbitrage-penalty weight λ.
    pub arb_weight: f64,
    /// Optional per-component overrides; `None` falls back to
    /// `arb_weight`.
    pub arb_weight_calendar: Option<f64>,
    pub arb_weight_call_spread: Option<f64>,
    pub arb_weight_butterfly: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Diffusion steps n.
    pub steps: usize,
    pub learning_rate: f64,
    pub plateau_factor: f64,
    /// Epochs without validation improvement before a reduction.
    pub plateau_patience: usize,
    pub min_learning_rate: f64,
    /// Global L2 norm ceiling for gradients.
    pub grad_clip_norm: f64,
    pub ema_decay: f64,
    /// Epochs without validation improvement before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arb_weight: 0.01,
            arb_weight_calendar: None,
            arb_weight_call_spread: None,
            arb_weight_butterfly: None,
            epochs: 2000,
            batch_size: 64,
            steps: 500,
            learning_rate: 3e-4,
            plateau_factor: 0.8,
            plateau_patience: 300,
            min_learning_rate: 1e-6,
            grad_clip_norm: 0.15,
            ema_decay: 0.995,
            early_stop_patience: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arb_weight < 0.0 {
            return Err(Error::Config("arb_weight must be non-negative".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!(
                "ema_decay must be in (0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.min_learning_rate > self.learning_rate || self.learning_rate <= 0.0 {
            return Err(Error::Config(
                "need 0 < min_learning_rate <= learning_rate".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps < 2 {
            return Err(Error::Config("batch_size, epochs, steps must be positive".into()));
        }
        if self.grad_clip_norm <= 0.0 || !(0.0 < self.plateau_factor && self.plateau_factor < 1.0)
        {
            return Err(Error::Config("bad gradient clip or plateau factor".into()));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be positive".into()));
        }
        Ok(())
    }

    fn component_weights(&self) -> (f64, f64, f64) {
        (
            self.arb_weight_calendar.unwrap_or(self.arb_weight),
            self.arb_weight_call_spread.unwrap_or(self.arb_weight),
            self.arb_weight_butterfly.unwrap_or(self.arb_weight),
        )
    }
}

/// AdamW state: decoupled weight decay, bias-corrected moments.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    first: Vec<Array>,
    second: Vec<Array>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Array> =
            store.params().iter().map(|p| Array::zeros(p.value.shape().to_vec())).collect();
        OptimizerState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update over all parameters.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Array], lr: f64) -> Result<()> {
        if grads.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "gradient count {} does not match parameter count {}",
                grads.len(),
                self.first.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((param, m), (v, g)) in store
            .params_mut()
            .iter_mut()
            .zip(&mut self.first)
            .zip(self.second.iter_mut().zip(grads))
        {
            for (((p, m), v), g) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * *p);
            }
        }
        Ok(())
    }
}

/// Scale gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Array], max_norm: f64) -> f64 {
    let norm =
        grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// `ema = decay * ema + (1 - decay) * params`, elementwise.
pub fn ema_update(store: &mut ParamStore, decay: f64) {
    let (params, ema) = store.split_params_ema_mut();
    for (p, e) in params.iter().zip(ema.iter_mut()) {
        for (pv, ev) in p.value.data().iter().zip(e.value.data_mut()) {
            *ev = decay * *ev + (1.0 - decay) * pv;
        }
    }
}

/// Plateau learning-rate schedule: multiply by `factor` after
/// `patience` epochs without strict improvement, floored at `min_lr`.
/// The counter resets on improvement or reduction.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: f64,
    since_improvement: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            since_improvement: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feed one validation loss; returns the learning rate to use next.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
            if self.since_improvement >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.since_improvement = 0;
            }
        }
        self.lr
    }
}

/// Early stopping on the validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    best: f64,
    since_improvement: usize,
    patience: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop { best: f64::INFINITY, since_improvement: 0, patience }
    }

    /// Returns `(improved, should_stop)`.
    pub fn observe(&mut self, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best {
            self.best = val_loss;
            self.since_improvement = 0;
            (true, false)
        } else {
            self.since_improvement += 1;
            (false, self.since_improvement >= self.patience)
        }
    }
}

/// One training example: the normalized target surface and its
/// conditioning bundle.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub x0: SurfaceGrid,
    pub bundle: ConditioningBundle,
}

/// Per-sample diffusion draw.
#[derive(Clone, Debug)]
pub struct SampleDraw {
    pub t: usize,
    pub eps: SurfaceGrid,
}

/// Loss components, averaged over the batch. `total = mse + arb`, where
/// `arb` carries the λ- and SNR-weighted penalty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub arb: f64,
}

/// Everything the loss needs besides parameters.
pub struct LossContext<'a> {
    pub cfg: &'a TrainConfig,
    pub unet: &'a UNetConfig,
    pub schedule: &'a NoiseSchedule,
    pub normalization: &'a NormalizationStats,
    pub grid: &'a GridSpec,
    pub pricing: &'a PricingContext,
}

/// Per-sample loss graph. The predictor seam lets tests replace the
/// network with an oracle.
pub(crate) fn sample_loss_graph(
    tape: &mut Tape,
    sample: &TrainSample,
    draw: &SampleDraw,
    ctx: &LossContext<'_>,
    predictor: impl FnOnce(&mut Tape, Var, usize) -> Result<Var>,
) -> Result<(Var, Var, Var)> {
    let x_t = forward_sample(&sample.x0, draw.t, &draw.eps, ctx.schedule)?;
    let channels = tape.leaf(sample.bundle.input_channels(&x_t), false);
    let eps_hat = predictor(tape, channels, draw.t)?;
    let eps_hat = tape.reshape(eps_hat, vec![9, 9])?;

    // Noise-matching term: squared L2 distance over the surface.
    let eps_leaf = tape.leaf(Array::new(vec![9, 9], draw.eps.data().to_vec())?, false);
    let resid = tape.sub(eps_leaf, eps_hat)?;
    let resid_sq = tape.mul(resid, resid)?;
    let mse = tape.sum(resid_sq)?;

    // SNR-weighted arbitrage penalty on the denoised estimate, mapped
    // back to the raw vol scale.
    let x0_hat = denoised_estimate_graph(tape, &x_t, eps_hat, draw.t, ctx.schedule)?;
    let std_leaf =
        tape.leaf(Array::new(vec![9, 9], ctx.normalization.std.data().to_vec())?, false);
    let mean_leaf =
        tape.leaf(Array::new(vec![9, 9], ctx.normalization.mean.data().to_vec())?, false);
    let scaled = tape.mul(x0_hat, std_leaf)?;
    let shifted = tape.add(scaled, mean_leaf)?;
    let sigma = tape.exp(shifted)?;
    let graph = penalty_conv_graph(tape, sigma, ctx.grid, ctx.pricing)?;

    let (w_cal, w_spread, w_fly) = ctx.cfg.component_weights();
    let w_snr = snr_weight(draw.t, ctx.schedule)?;
    let cal = tape.scale(graph.calendar, w_snr * w_cal)?;
    let spread = tape.scale(graph.call_spread, w_snr * w_spread)?;
    let fly = tape.scale(graph.butterfly, w_snr * w_fly)?;
    let cal_spread = tape.add(cal, spread)?;
    let arb = tape.add(cal_spread, fly)?;

    let total = tape.add(mse, arb)?;
    Ok((total, mse, arb))
}

/// Composite loss over a batch, with optional parameter gradients.
/// Samples evaluate on independent tapes (in parallel); losses and
/// gradients are merged in sample order, so results do not depend on
/// the worker count.
pub fn composite_loss(
    samples: &[(TrainSample, SampleDraw)],
    store: &ParamStore,
    ctx: &LossContext<'_>,
    with_grads: bool,
) -> Result<(LossParts, Option<Vec<Array>>)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("composite loss over an empty batch"));
    }
    let per_sample: Vec<(LossParts, Option<Vec<Array>>)> = samples
        .par_iter()
        .map(|(sample, draw)| -> Result<(LossParts, Option<Vec<Array>>)> {
            let mut tape = Tape::new();
            let params = mount_params(&mut tape, store.params(), with_grads);
            let (total, mse, arb) =
                sample_loss_graph(&mut tape, sample, draw, ctx, |tape, channels, t| {
                    unet_forward_tape(
                        tape,
                        &params,
                        ctx.unet,
                        channels,
                        t,
                        ctx.schedule.n(),
                        &sample.bundle.scalars,
                    )
                })?;
            let parts = LossParts {
                total: tape.value(total).item(),
                mse: tape.value(mse).item(),
                arb: tape.value(arb).item(),
            };
            if !parts.mse.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite noise-matching loss on target {} (t = {})",
                    sample.bundle.target_date, draw.t
                )));
            }
            if !parts.arb.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite arbitrage penalty on target {} (t = {})",
                    sample.bundle.target_date, draw.t
                )));
            }
            let grads = if with_grads {
                let g = tape.backward(total)?;
                Some(
                    params
                        .vars
                        .iter()
                        .map(|v| g.get(*v).cloned())
                        .collect::<Result<Vec<Array>>>()?,
                )
            } else {
                None
            };
            Ok((parts, grads))
        })
        .collect::<Result<Vec<_>>>()?;

    let batch = samples.len() as f64;
    let mut parts = LossParts { total: 0.0, mse: 0.0, arb: 0.0 };
    let mut merged: Option<Vec<Array>> = None;
    for (p, g) in per_sample {
        parts.total += p.total / batch;
        parts.mse += p.mse / batch;
        parts.arb += p.arb / batch;
        if let Some(g) = g {
            match &mut merged {
                None => {
                    let mut scaled = g;
                    for arr in &mut scaled {
                        for v in arr.data_mut() {
                            *v /= batch;
                        }
                    }
                    merged = Some(scaled);
                }
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += y / batch;
                        }
                    }
                }
            }
        }
    }
    Ok((parts, merged))
}

/// Draw `(t, ε)` for each sample of a batch, in order.
pub fn draw_batch(
    rng: &mut ChaCha8Rng,
    count: usize,
    schedule: &NoiseSchedule,
) -> Vec<SampleDraw> {
    (0..count)
        .map(|_| {
            let t = rng.random_range(1..=schedule.n());
            let mut eps = SurfaceGrid::zeros();
            for v in eps.data_mut() {
                *v = rng.sample(StandardNormal);
            }
            SampleDraw { t, eps }
        })
        .collect()
}

/// One optimizer iteration: loss, gradients, global clip, AdamW update,
/// then EMA update.
pub fn train_step(
    batch: &[(TrainSample, SampleDraw)],
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    ctx: &LossContext<'_>,
    lr: f64,
) -> Result<LossParts> {
    let (parts, grads) = composite_loss(batch, store, ctx, true)?;
    let mut grads = grads.expect("gradients requested");
    clip_gradients(&mut grads, ctx.cfg.grad_clip_norm);
    opt.apply(store, &grads, lr)?;
    ema_update(store, ctx.cfg.ema_decay);
    Ok(parts)
}

/// Noise-matching validation loss with fixed draws, evaluated with the
/// given weight set (EMA during training).
pub fn validation_loss(
    samples: &[(TrainSample, SampleDraw)],
    weights: &ModelWeights<'_>,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("validation loss over an empty set"));
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|(sample, draw)| -> Result<f64> {
            let x_t = forward_sample(&sample.x0, draw.t, &draw.eps, schedule)?;
            let channels = sample.bundle.input_channels(&x_t);
            let eps_hat =
                unet_forward(weights, &channels, draw.t, schedule.n(), &sample.bundle.scalars)?;
            Ok(draw
                .eps
                .data()
                .iter()
                .zip(eps_hat.data())
                .map(|(e, p)| (e - p) * (e - p))
                .sum())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Serialized training artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub train_config: TrainConfig,
    pub unet_config: UNetConfig,
    pub schedule: NoiseSchedule,
    pub grid: GridSpec,
    pub pricing: PricingContext,
    pub conditioning: ConditioningConfig,
    pub normalization: NormalizationStats,
    pub scalar_stats: ScalarStats,
    pub store: ParamStore,
    pub epoch: usize,
    pub best_val: f64,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|source| Error::ReadInput { path: path.to_path_buf(), source })?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        ckpt.store.validate(&ckpt.unet_config)?;
        Ok(ckpt)
    }
}

/// One row of the loss-curve CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mse: f64,
    pub train_arb: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Loss-curve CSV: `epoch,train_loss,train_mse,train_arb,val_loss,lr`.
pub fn write_loss_curve(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["epoch", "train_loss", "train_mse", "train_arb", "val_loss", "lr"])?;
    for r in records {
        writer.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.train_mse.to_string(),
            r.train_arb.to_string(),
            r.val_loss.to_string(),
            r.lr.to_string(),
        ])?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Why a fit run ended.
#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    CompletedAllEpochs,
    EarlyStopped { epoch: usize },
    Diverged { epoch: usize, message: String },
}

pub struct FitOutput {
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochRecord>,
    pub stop: StopReason,
}

/// Build `(train, validation)` sample sets from a dataset.
pub fn training_samples(dataset: &Dataset) -> Result<(Vec<TrainSample>, Vec<TrainSample>)> {
    let series = dataset.feature_series()?;
    let build = |targets: Vec<usize>| -> Result<Vec<TrainSample>> {
        targets
            .into_iter()
            .map(|k| {
                Ok(TrainSample {
                    x0: dataset.normalized_surfaces[k].clone(),
                    bundle: dataset.bundle(&series, k)?,
                })
            })
            .collect()
    };
    Ok((build(dataset.train_targets())?, build(dataset.val_targets())?))
}

/// Run the full training loop on a prepared dataset.
pub fn fit(
    dataset: &Dataset,
    cfg: &TrainConfig,
    unet_cfg: &UNetConfig,
    pricing: &PricingContext,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutput> {
    cfg.validate()?;
    unet_cfg.validate()?;
    let schedule = NoiseSchedule::cosine(cfg.steps)?;
    let (train, val) = training_samples(dataset)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Size(format!(
            "need non-empty train and validation sets, got {} and {}",
            train.len(),
            val.len()
        )));
    }

    let mut store = param_init(unet_cfg, cfg.seed)?;
    let mut opt = OptimizerState::new(&store);
    let mut plateau = PlateauScheduler::new(
        cfg.learning_rate,
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.min_learning_rate,
    );
    let mut early = EarlyStop::new(cfg.early_stop_patience);

    // Separate streams: epoch shuffling/draws vs the fixed validation
    // draws, so validation noise is identical across epochs.
    let mut train_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    train_rng.set_stream(1);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    val_rng.set_stream(2);
    let val_draws = draw_batch(&mut val_rng, val.len(), &schedule);
    let val_set: Vec<(TrainSample, SampleDraw)> = val.into_iter().zip(val_draws).collect();

    let ctx = LossContext {
        cfg,
        unet: unet_cfg,
        schedule: &schedule,
        normalization: &dataset.normalization,
        grid: &dataset.grid,
        pricing,
    };

    let make_checkpoint = |store: &ParamStore, epoch: usize, best_val: f64| Checkpoint {
        version: CHECKPOINT_VERSION,
        train_config: *cfg,
        unet_config: *unet_cfg,
        schedule: schedule.clone(),
        grid: dataset.grid.clone(),
        pricing: *pricing,
        conditioning: dataset.conditioning,
        normalization: dataset.normalization.clone(),
        scalar_stats: dataset.scalar_stats.clone(),
        store: store.clone(),
        epoch,
        best_val,
    };

    let mut best = make_checkpoint(&store, 0, f64::INFINITY);
    let mut curve = Vec::new();
    let mut lr = plateau.lr();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut train_rng);

        let mut sums = LossParts { total: 0.0, mse: 0.0, arb: 0.0 };
        for chunk in order.chunks(cfg.batch_size) {
            let draws = draw_batch(&mut train_rng, chunk.len(), &schedule);
            let batch: Vec<(TrainSample, SampleDraw)> = chunk
                .iter()
                .zip(draws)
                .map(|(idx, draw)| (train[*idx].clone(), draw))
                .collect();
            match train_step(&batch, &mut store, &mut opt, &ctx, lr) {
                Ok(parts) => {
                    let w = chunk.len() as f64 / train.len() as f64;
                    sums.total += parts.total * w;
                    sums.mse += parts.mse * w;
                    sums.arb += parts.arb * w;
                }
                Err(Error::Divergence(message)) => {
                    return Ok(FitOutput {
                        checkpoint: best,
                        curve,
                        stop: StopReason::Diverged { epoch, message },
                    });
                }
                Err(other) => return Err(other),
            }
        }

        let ema_weights = ModelWeights::resolve(store.ema(), unet_cfg)?;
        let val_loss = validation_loss(&val_set, &ema_weights, &schedule)?;
        if !val_loss.is_finite() {
            return Ok(FitOutput {
                checkpoint: best,
                curve,
                stop: StopReason::Diverged {
                    epoch,
                    message: "non-finite validation loss".into(),
                },
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: sums.total,
            train_mse: sums.mse,
            train_arb: sums.arb,
            val_loss,
            lr,
        };
        on_epoch(&record);
        curve.push(record);

        let (improved, stop) = early.observe(val_loss);
        if improved {
            best = make_checkpoint(&store, epoch, val_loss);
        }
        lr = plateau.observe(val_loss);
        if stop {
            return Ok(FitOutput {
                checkpoint: best,
                curve,
                stop: StopReason::EarlyStopped { epoch },
            });
        }
    }
    Ok(FitOutput { checkpoint: best, curve, stop: StopReason::CompletedAllEpochs })
}
