//! Conditioning features for one forecast date: three surface channels
//! plus a standardized 5-dimensional scalar market vector.

use serde::{Deserialize, Serialize};

use super::grid::SurfaceGrid;
use super::{ewma, ewma_surfaces};
use crate::error::{Error, Result};

/// Smoothing factors for the scalar EWMAs and spans for the surface
/// EWMAs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditioningConfig {
    /// Short-horizon EWMA of daily returns.
    pub alpha_trend_short: f64,
    /// Long-horizon EWMA of daily returns.
    pub alpha_trend_long: f64,
    /// Short-horizon EWMA of squared returns.
    pub alpha_vol_short: f64,
    /// Long-horizon EWMA of squared returns.
    pub alpha_vol_long: f64,
    /// Span (days) of the short surface EWMA channel.
    pub surface_span_short: usize,
    /// Span (days) of the long surface EWMA channel.
    pub surface_span_long: usize,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        ConditioningConfig {
            alpha_trend_short: 0.156,
            alpha_trend_long: 0.118,
            alpha_vol_short: 0.3,
            alpha_vol_long: 0.15,
            surface_span_short: 5,
            surface_span_long: 20,
        }
    }
}

impl ConditioningConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("alpha_trend_short", self.alpha_trend_short),
            ("alpha_trend_long", self.alpha_trend_long),
            ("alpha_vol_short", self.alpha_vol_short),
            ("alpha_vol_long", self.alpha_vol_long),
        ] {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {a}")));
            }
        }
        if self.surface_span_short == 0 || self.surface_span_long <= self.surface_span_short {
            return Err(Error::Config(format!(
                "surface spans must satisfy 0 < short < long, got {} and {}",
                self.surface_span_short, self.surface_span_long
            )));
        }
        Ok(())
    }

    /// Required history depth before a date can be conditioned on: the
    /// longer surface span.
    pub fn warmup(&self) -> usize {
        self.surface_span_long
    }

    /// Span-to-alpha conversion `alpha = 2 / (span + 1)`.
    pub fn span_alpha(span: usize) -> f64 {
        2.0 / (span as f64 + 1.0)
    }
}

/// Mean and standard deviation of the five raw scalars over the
/// training targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ScalarStats {
    pub fn from_training(rows: &[[f64; 5]]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Size(format!(
                "scalar standardization needs >= 2 training rows, got {}",
                rows.len()
            )));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; 5];
        for row in rows {
            for (slot, v) in mean.iter_mut().zip(row) {
                *slot += v;
            }
        }
        for slot in &mut mean {
            *slot /= n;
        }
        let mut std = [0.0; 5];
        for row in rows {
            for ((slot, v), mu) in std.iter_mut().zip(row).zip(&mean) {
                *slot += (v - mu) * (v - mu);
            }
        }
        for (k, slot) in std.iter_mut().enumerate() {
            *slot = (*slot / n).sqrt();
            if *slot <= 0.0 {
                return Err(Error::DegenerateInput(format!(
                    "conditioning scalar {k} is constant over the training set"
                )));
            }
        }
        Ok(ScalarStats { mean: mean.to_vec(), std: std.to_vec() })
    }

    pub fn standardize(&self, raw: &[f64; 5]) -> [f64; 5] {
        let mut out = [0.0; 5];
        for k in 0..5 {
            out[k] = (raw[k] - self.mean[k]) / self.std[k];
        }
        out
    }
}

/// Everything the model needs to condition one forecast: the day-k
/// surface channels (the fourth channel slot is filled with the noisy
/// target at use time) and the standardized scalar vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    /// Index of the forecast target (day k+1).
    pub target_index: usize,
    /// Index of the conditioning day (day k).
    pub source_index: usize,
    pub target_date: chrono::NaiveDate,
    /// Normalized day-k surface, short surface EWMA, long surface EWMA.
    pub channels: [SurfaceGrid; 3],
    /// Standardized scalar market vector.
    pub scalars: [f64; 5],
}

/// Precomputed per-day feature series; building a bundle is then O(1)
/// in history length.
#[derive(Clone, Debug)]
pub struct FeatureSeries {
    ewma_short_surfaces: Vec<SurfaceGrid>,
    ewma_long_surfaces: Vec<SurfaceGrid>,
    ewma_trend_short: Vec<f64>,
    ewma_trend_long: Vec<f64>,
    ewma_vol_short: Vec<f64>,
    ewma_vol_long: Vec<f64>,
    vix_returns: Vec<f64>,
    warmup: usize,
}

impl FeatureSeries {
    pub fn build(
        normalized_surfaces: &[SurfaceGrid],
        underlying_returns: &[f64],
        vix_returns: &[f64],
        cfg: &ConditioningConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = normalized_surfaces.len();
        if underlying_returns.len() != n || vix_returns.len() != n {
            return Err(Error::Alignment(format!(
                "feature series lengths disagree: {} surfaces, {} returns, {} vix returns",
                n,
                underlying_returns.len(),
                vix_returns.len()
            )));
        }
        if n == 0 {
            return Err(Error::EmptyInput("empty feature history"));
        }
        let squared: Vec<f64> = underlying_returns.iter().map(|r| r * r).collect();
        Ok(FeatureSeries {
            ewma_short_surfaces: ewma_surfaces(
                normalized_surfaces,
                ConditioningConfig::span_alpha(cfg.surface_span_short),
            )?,
            ewma_long_surfaces: ewma_surfaces(
                normalized_surfaces,
                ConditioningConfig::span_alpha(cfg.surface_span_long),
            )?,
            ewma_trend_short: ewma(underlying_returns, cfg.alpha_trend_short)?,
            ewma_trend_long: ewma(underlying_returns, cfg.alpha_trend_long)?,
            ewma_vol_short: ewma(&squared, cfg.alpha_vol_short)?,
            ewma_vol_long: ewma(&squared, cfg.alpha_vol_long)?,
            vix_returns: vix_returns.to_vec(),
            warmup: cfg.warmup(),
        })
    }

    /// Raw (unstandardized) scalar vector for conditioning day `k`.
    pub fn raw_scalars(&self, k: usize) -> [f64; 5] {
        [
            self.ewma_trend_short[k],
            self.ewma_trend_long[k],
            self.ewma_vol_short[k],
            self.ewma_vol_long[k],
            self.vix_returns[k],
        ]
    }

    /// Assemble the bundle whose forecast target is `target_index`,
    /// conditioning on day `target_index - 1`.
    pub fn bundle(
        &self,
        target_index: usize,
        target_date: chrono::NaiveDate,
        normalized_surfaces: &[SurfaceGrid],
        stats: &ScalarStats,
    ) -> Result<ConditioningBundle> {
        if target_index == 0 || target_index >= normalized_surfaces.len() {
            return Err(Error::Contract(format!(
                "target index {target_index} outside forecastable range"
            )));
        }
        let source = target_index - 1;
        if source < self.warmup {
            return Err(Error::WarmUp { index: source, have: source, needed: self.warmup });
        }
        Ok(ConditioningBundle {
            target_index,
            source_index: source,
            target_date,
            channels: [
                normalized_surfaces[source].clone(),
                self.ewma_short_surfaces[source].clone(),
                self.ewma_long_surfaces[source].clone(),
            ],
            scalars: stats.standardize(&self.raw_scalars(source)),
        })
    }
}

impl ConditioningBundle {
    /// The 4×9×9 network input: the three conditioning channels plus the
    /// noisy target in the final slot.
    pub fn input_channels(&self, noisy_target: &SurfaceGrid) -> crate::gridmath::Array {
        let mut data = Vec::with_capacity(4 * 81);
        for ch in &self.channels {
            data.extend_from_slice(ch.data());
        }
        data.extend_from_slice(noisy_target.data());
        crate::gridmath::Array::new(vec![4, 9, 9], data).expect("fixed channel shape")
    }
}
