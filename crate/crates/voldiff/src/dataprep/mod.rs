//! Data preparation: quote smoothing, log-space normalization,
//! conditioning features, chronological splits, CSV formats, and a
//! synthetic surface generator.

pub mod conditioning;
pub mod csvio;
pub mod grid;
pub mod store;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conditioning::{ConditioningBundle, ConditioningConfig, ScalarStats};
pub use grid::{GridSpec, SurfaceGrid, GRID_CELLS, GRID_DIM};
pub use store::Dataset;

/// One observed option quote, reduced to the fields the smoother needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuoteRecord {
    pub date: chrono::NaiveDate,
    /// Strike over spot.
    pub moneyness: f64,
    /// Time to maturity in years.
    pub tenor_years: f64,
    /// Annualized implied volatility.
    pub implied_vol: f64,
    /// Price sensitivity to volatility, used as the smoothing weight.
    pub vega: f64,
}

/// Bandwidths of the two-dimensional Gaussian smoothing kernel.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    /// Moneyness-axis bandwidth. The default is adopted from the
    /// benchmark study this pipeline follows; note it is much smaller
    /// than the 0.1 grid spacing, so off-grid quotes contribute little.
    pub h1: f64,
    /// Tenor-axis bandwidth.
    pub h2: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig { h1: 0.002, h2: 0.046 }
    }
}

/// Weight-sum floor below which a grid cell is considered uncovered.
const WEIGHT_FLOOR: f64 = 1e-300;

/// Vega-weighted Nadaraya-Watson smoothing of one day's quotes onto the
/// fixed grid: each cell is the kernel- and vega-weighted average of the
/// quote vols.
pub fn smooth_surface(
    quotes: &[QuoteRecord],
    grid: &GridSpec,
    cfg: &SmoothingConfig,
) -> Result<SurfaceGrid> {
    if cfg.h1 <= 0.0 || cfg.h2 <= 0.0 {
        return Err(Error::Config(format!(
            "smoothing bandwidths must be positive, got h1={} h2={}",
            cfg.h1, cfg.h2
        )));
    }
    for q in quotes {
        if q.implied_vol <= 0.0 || q.tenor_years <= 0.0 || q.vega < 0.0 {
            return Err(Error::Validation(format!(
                "bad quote on {}: sigma={}, tenor={}, vega={}",
                q.date, q.implied_vol, q.tenor_years, q.vega
            )));
        }
    }
    // Zero-vega quotes carry zero weight; drop them up front.
    let live: Vec<&QuoteRecord> = quotes.iter().filter(|q| q.vega > 0.0).collect();
    if live.is_empty() {
        return Err(Error::DegenerateInput(
            "no quotes with positive vega for this date".into(),
        ));
    }

    let mut out = SurfaceGrid::zeros();
    for i in 0..GRID_DIM {
        for j in 0..GRID_DIM {
            let (m_target, tau_target) = (grid.moneyness()[i], grid.tenors()[j]);
            let mut num = 0.0;
            let mut den = 0.0;
            for q in &live {
                let dx = q.moneyness - m_target;
                let dy = q.tenor_years - tau_target;
                let kernel = (-(dx * dx) / (2.0 * cfg.h1) - (dy * dy) / (2.0 * cfg.h2)).exp()
                    / (2.0 * std::f64::consts::PI);
                let weight = q.vega * kernel;
                num += weight * q.implied_vol;
                den += weight;
            }
            if den < WEIGHT_FLOOR {
                return Err(Error::DegenerateInput(format!(
                    "vega-kernel weights vanish at cell ({i},{j}) = (m {m_target}, tau {tau_target:.6})"
                )));
            }
            out.set(i, j, num / den);
        }
    }
    Ok(out)
}

/// Per-cell mean and standard deviation of log vols, computed from the
/// training dates only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: SurfaceGrid,
    pub std: SurfaceGrid,
}

impl NormalizationStats {
    /// Population statistics of `log(surface)` across the given days.
    pub fn from_training(surfaces: &[SurfaceGrid]) -> Result<Self> {
        if surfaces.len() < 2 {
            return Err(Error::Size(format!(
                "normalization needs >= 2 training surfaces, got {}",
                surfaces.len()
            )));
        }
        let n = surfaces.len() as f64;
        let mut mean = SurfaceGrid::zeros();
        for s in surfaces {
            if !s.is_strictly_positive() {
                return Err(Error::Domain("training surface has non-positive vols".into()));
            }
            for (slot, v) in mean.data_mut().iter_mut().zip(s.data()) {
                *slot += v.ln();
            }
        }
        for slot in mean.data_mut() {
            *slot /= n;
        }
        let mut var = SurfaceGrid::zeros();
        for s in surfaces {
            for ((slot, v), mu) in var.data_mut().iter_mut().zip(s.data()).zip(mean.data()) {
                let d = v.ln() - mu;
                *slot += d * d;
            }
        }
        let mut std = SurfaceGrid::zeros();
        for (slot, v) in std.data_mut().iter_mut().zip(var.data()) {
            let s = (v / n).sqrt();
            if s <= 0.0 {
                return Err(Error::DegenerateInput(
                    "a grid cell has zero variance across the training set".into(),
                ));
            }
            *slot = s;
        }
        Ok(NormalizationStats { mean, std })
    }
}

/// Standardized log vol: `(log raw - mean) / std` per cell.
pub fn normalize(raw: &SurfaceGrid, stats: &NormalizationStats) -> Result<SurfaceGrid> {
    if !raw.is_strictly_positive() {
        return Err(Error::Domain("normalize needs strictly positive vols".into()));
    }
    let mut out = SurfaceGrid::zeros();
    for i in 0..GRID_DIM {
        for j in 0..GRID_DIM {
            out.set(i, j, (raw.get(i, j).ln() - stats.mean.get(i, j)) / stats.std.get(i, j));
        }
    }
    Ok(out)
}

/// Back to raw vols: `exp(z * std + mean)`; strictly positive by
/// construction.
pub fn denormalize(z: &SurfaceGrid, stats: &NormalizationStats) -> SurfaceGrid {
    let mut out = SurfaceGrid::zeros();
    for i in 0..GRID_DIM {
        for j in 0..GRID_DIM {
            out.set(i, j, (z.get(i, j) * stats.std.get(i, j) + stats.mean.get(i, j)).exp());
        }
    }
    out
}

/// Recursive exponentially weighted moving average seeded at the first
/// observation.
pub fn ewma(series: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::EmptyInput("ewma of empty series"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Contract(format!("ewma smoothing factor must be in (0, 1], got {alpha}")));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut state = series[0];
    out.push(state);
    for y in &series[1..] {
        state = alpha * y + (1.0 - alpha) * state;
        out.push(state);
    }
    Ok(out)
}

/// Cellwise EWMA over a sequence of surfaces.
pub fn ewma_surfaces(surfaces: &[SurfaceGrid], alpha: f64) -> Result<Vec<SurfaceGrid>> {
    if surfaces.is_empty() {
        return Err(Error::EmptyInput("ewma of empty surface history"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Contract(format!("ewma smoothing factor must be in (0, 1], got {alpha}")));
    }
    let mut out = Vec::with_capacity(surfaces.len());
    let mut state = surfaces[0].clone();
    out.push(state.clone());
    for s in &surfaces[1..] {
        state = state.zip_with(s, |prev, y| alpha * y + (1.0 - alpha) * prev);
        out.push(state.clone());
    }
    Ok(out)
}

/// Chronological train/validation/test fractions.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_frac: 0.8, val_frac: 0.1 }
    }
}

/// Contiguous, disjoint, exhaustive index ranges with boundaries at
/// `floor(train_frac * n)` and `floor((train_frac + val_frac) * n)`.
pub fn chronological_split(
    n: usize,
    spec: &SplitSpec,
) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>)> {
    if n < 3 {
        return Err(Error::Size(format!("need at least 3 dates to split, got {n}")));
    }
    if !(spec.train_frac > 0.0 && spec.val_frac > 0.0 && spec.train_frac + spec.val_frac < 1.0) {
        return Err(Error::Config(format!(
            "split fractions must be positive with train+val < 1, got {} and {}",
            spec.train_frac, spec.val_frac
        )));
    }
    let b1 = (spec.train_frac * n as f64).floor() as usize;
    let b2 = ((spec.train_frac + spec.val_frac) * n as f64).floor() as usize;
    Ok((0..b1, b1..b2, b2..n))
}
