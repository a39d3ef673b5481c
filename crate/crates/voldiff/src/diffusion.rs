//! Diffusion-time machinery: the cosine noise schedule, forward
//! perturbation, SNR weights, denoised estimates, reverse steps, and the
//! terminal-distribution diagnostic.
//!
//! Steps are indexed `t = 1..=n` with `alpha_bar(0) = 1` by convention,
//! which makes the final reverse step deterministic.

use serde::{Deserialize, Serialize};

use crate::dataprep::grid::{SurfaceGrid, GRID_CELLS};
use crate::error::{Error, Result};
use crate::gridmath::{Tape, Var};

/// Default number of diffusion steps.
pub const DEFAULT_STEPS: usize = 500;

/// Cosine-schedule offset.
const COSINE_OFFSET: f64 = 0.008;
/// Upper clip for per-step betas.
const BETA_MAX: f64 = 0.999;
/// Stabilizer in the SNR weight denominator.
const SNR_STABILIZER: f64 = 1e-8;
/// Symmetric clip bound for denoised estimates and reverse-step means.
/// Data is standardized to unit variance per cell, so five standard
/// deviations is the guard analogous to clipping range-normalized data
/// at its range.
pub const CLIP_BOUND: f64 = 5.0;

/// The β/α/ᾱ tables for `t = 1..=n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRaw", into = "ScheduleRaw")]
pub struct NoiseSchedule {
    n: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRaw {
    n: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl TryFrom<ScheduleRaw> for NoiseSchedule {
    type Error = Error;
    fn try_from(raw: ScheduleRaw) -> Result<Self> {
        if raw.beta.len() != raw.n || raw.alpha_bar.len() != raw.n {
            return Err(Error::Validation(format!(
                "schedule arrays must have length n={}, got {} and {}",
                raw.n,
                raw.beta.len(),
                raw.alpha_bar.len()
            )));
        }
        let rebuilt = NoiseSchedule::from_betas(raw.beta)?;
        for (a, b) in rebuilt.alpha_bar.iter().zip(&raw.alpha_bar) {
            if (a - b).abs() > 1e-12 {
                return Err(Error::Validation(
                    "schedule alpha_bar inconsistent with beta".into(),
                ));
            }
        }
        Ok(rebuilt)
    }
}

impl From<NoiseSchedule> for ScheduleRaw {
    fn from(s: NoiseSchedule) -> ScheduleRaw {
        ScheduleRaw { n: s.n, beta: s.beta, alpha_bar: s.alpha_bar }
    }
}

impl NoiseSchedule {
    /// Schedule from explicit betas; ᾱ is their cumulative product.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::Size(format!("schedule needs n >= 2 steps, got {}", beta.len())));
        }
        if beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Validation("betas must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { n: beta.len(), beta, alpha, alpha_bar })
    }

    /// Cosine schedule: `ᾱ_t = f(t)/f(0)` with
    /// `f(t) = cos²(((t/n + s)/(1 + s)) · π/2)`, `s = 0.008`, and betas
    /// clipped at 0.999.
    pub fn cosine(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Size(format!("schedule needs n >= 2 steps, got {n}")));
        }
        let f = |t: f64| {
            let angle = ((t / n as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET))
                * std::f64::consts::FRAC_PI_2;
            angle.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut beta = Vec::with_capacity(n);
        let mut prev = 1.0;
        for t in 1..=n {
            let bar = f(t as f64) / f0;
            let b = (1.0 - bar / prev).min(BETA_MAX);
            beta.push(b);
            prev = bar;
        }
        Self::from_betas(beta)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.n {
            return Err(Error::Contract(format!(
                "step {t} outside the schedule range 1..={}",
                self.n
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    /// `ᾱ_{t-1}`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        let idx = self.index(t)?;
        Ok(if idx == 0 { 1.0 } else { self.alpha_bar[idx - 1] })
    }
}

/// Closed-form forward perturbation
/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) ε`.
pub fn forward_sample(
    x0: &SurfaceGrid,
    t: usize,
    eps: &SurfaceGrid,
    schedule: &NoiseSchedule,
) -> Result<SurfaceGrid> {
    let bar = schedule.alpha_bar(t)?;
    let (signal, noise) = (bar.sqrt(), (1.0 - bar).sqrt());
    Ok(x0.zip_with(eps, |x, e| signal * x + noise * e))
}

/// Signal-to-noise weight `ᾱ / (1 - ᾱ + ε_stab)` for a raw ᾱ value.
pub fn snr_from_alpha_bar(alpha_bar: f64) -> f64 {
    alpha_bar / (1.0 - alpha_bar + SNR_STABILIZER)
}

/// SNR weight at step `t`.
pub fn snr_weight(t: usize, schedule: &NoiseSchedule) -> Result<f64> {
    Ok(snr_from_alpha_bar(schedule.alpha_bar(t)?))
}

/// Denoised estimate `x̂0 = (x_t - sqrt(1 - ᾱ_t) ε̂) / sqrt(ᾱ_t)`,
/// clipped to ±[`CLIP_BOUND`].
pub fn denoised_estimate(
    x_t: &SurfaceGrid,
    eps_hat: &SurfaceGrid,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<SurfaceGrid> {
    let bar = schedule.alpha_bar(t)?;
    let inv_signal = 1.0 / bar.sqrt();
    let noise = (1.0 - bar).sqrt();
    Ok(x_t.zip_with(eps_hat, |x, e| ((x - noise * e) * inv_signal).clamp(-CLIP_BOUND, CLIP_BOUND)))
}

/// Tape version of [`denoised_estimate`] for the training loss: `x_t`
/// enters as data, gradients flow through `eps_hat`.
pub fn denoised_estimate_graph(
    tape: &mut Tape,
    x_t: &SurfaceGrid,
    eps_hat: Var,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let bar = schedule.alpha_bar(t)?;
    let inv_signal = 1.0 / bar.sqrt();
    let noise = (1.0 - bar).sqrt();
    let x_leaf = tape.leaf(
        crate::gridmath::Array::new(vec![9, 9], x_t.data().to_vec())?,
        false,
    );
    let eps_hat = if tape.value(eps_hat).shape() == [9, 9] {
        eps_hat
    } else {
        tape.reshape(eps_hat, vec![9, 9])?
    };
    let scaled_noise = tape.scale(eps_hat, noise)?;
    let centered = tape.sub(x_leaf, scaled_noise)?;
    let raw = tape.scale(centered, inv_signal)?;
    tape.clip(raw, -CLIP_BOUND, CLIP_BOUND)
}

/// Coefficients of one reverse step.
#[derive(Clone, Copy, Debug)]
pub struct ReverseCoeffs {
    /// `1 / sqrt(α_t)`.
    pub inv_sqrt_alpha: f64,
    /// `β_t / sqrt(1 - ᾱ_t)`.
    pub eps_coeff: f64,
    /// Posterior standard deviation `sqrt(β̃_t)` with
    /// `β̃_t = ((1 - ᾱ_{t-1}) / (1 - ᾱ_t)) β_t`.
    pub sigma: f64,
}

pub fn reverse_coeffs(t: usize, schedule: &NoiseSchedule) -> Result<ReverseCoeffs> {
    let beta = schedule.beta(t)?;
    let alpha = schedule.alpha(t)?;
    let bar = schedule.alpha_bar(t)?;
    let bar_prev = schedule.alpha_bar_prev(t)?;
    let posterior_var = (1.0 - bar_prev) / (1.0 - bar) * beta;
    Ok(ReverseCoeffs {
        inv_sqrt_alpha: 1.0 / alpha.sqrt(),
        eps_coeff: beta / (1.0 - bar).sqrt(),
        sigma: posterior_var.sqrt(),
    })
}

/// One ancestral reverse step
/// `x_{t-1} = clip(μ) + σ_t z` with
/// `μ = (x_t - (β_t / sqrt(1 - ᾱ_t)) ε̂) / sqrt(α_t)`.
///
/// The caller must pass `z = 0` at `t = 1`.
pub fn reverse_step(
    x_t: &SurfaceGrid,
    eps_hat: &SurfaceGrid,
    t: usize,
    z: &SurfaceGrid,
    schedule: &NoiseSchedule,
) -> Result<SurfaceGrid> {
    if t == 1 && z.data().iter().any(|v| *v != 0.0) {
        return Err(Error::Contract("the final reverse step (t = 1) requires z = 0".into()));
    }
    let c = reverse_coeffs(t, schedule)?;
    let mut out = SurfaceGrid::zeros();
    for idx in 0..GRID_CELLS {
        let mu = c.inv_sqrt_alpha * (x_t.data()[idx] - c.eps_coeff * eps_hat.data()[idx]);
        out.data_mut()[idx] = mu.clamp(-CLIP_BOUND, CLIP_BOUND) + c.sigma * z.data()[idx];
    }
    Ok(out)
}

/// Expected KL divergence between the forward chain's terminal
/// distribution and the standard normal prior, for a given terminal ᾱ
/// and mean squared norm of the data.
pub fn terminal_kl(alpha_bar_n: f64, mean_norm_sq: f64) -> f64 {
    let d = GRID_CELLS as f64;
    d / 2.0 * (-(1.0 - alpha_bar_n).ln() - alpha_bar_n) + alpha_bar_n / 2.0 * mean_norm_sq
}

/// `(expected KL, total-variation bound)` of the terminal approximation
/// over a batch of standardized surfaces. The TV bound is Pinsker's
/// `sqrt(KL / 2)`.
pub fn terminal_diagnostic(
    batch: &[SurfaceGrid],
    schedule: &NoiseSchedule,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("terminal diagnostic needs a non-empty batch"));
    }
    let mean_norm_sq =
        batch.iter().map(SurfaceGrid::norm_sq).sum::<f64>() / batch.len() as f64;
    let kl = terminal_kl(schedule.alpha_bar(schedule.n())?, mean_norm_sq);
    Ok((kl, (kl / 2.0).sqrt()))
}
