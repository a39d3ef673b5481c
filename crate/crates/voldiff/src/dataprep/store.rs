//! The preprocessed dataset: normalized surfaces, market series,
//! normalization statistics, and the chronological split, serialized as
//! one JSON document.

use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::conditioning::{ConditioningBundle, ConditioningConfig, FeatureSeries, ScalarStats};
use super::csvio::{atomic_write, MarketRow};
use super::grid::{GridSpec, SurfaceGrid};
use super::{chronological_split, normalize, NormalizationStats, SplitSpec};
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

/// Everything training, sampling, and evaluation need from the data
/// pipeline. Normalization and scalar statistics are computed from the
/// training portion only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub version: u32,
    pub grid: GridSpec,
    pub conditioning: ConditioningConfig,
    pub split: SplitSpec,
    /// `(train_end, val_end)` index boundaries.
    pub boundaries: (usize, usize),
    pub normalization: NormalizationStats,
    pub scalar_stats: ScalarStats,
    pub dates: Vec<NaiveDate>,
    /// Smoothed (or directly supplied) raw IV surfaces.
    pub raw_surfaces: Vec<SurfaceGrid>,
    pub normalized_surfaces: Vec<SurfaceGrid>,
    pub underlying_returns: Vec<f64>,
    pub vix_returns: Vec<f64>,
}

impl Dataset {
    pub fn build(
        days: Vec<(NaiveDate, SurfaceGrid)>,
        market: Vec<MarketRow>,
        grid: GridSpec,
        split: SplitSpec,
        conditioning: ConditioningConfig,
    ) -> Result<Dataset> {
        conditioning.validate()?;
        if days.is_empty() {
            return Err(Error::EmptyInput("no surfaces to preprocess"));
        }
        if days.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Validation("surface dates must be strictly increasing".into()));
        }
        if market.len() != days.len() {
            return Err(Error::Alignment(format!(
                "{} surfaces but {} market rows",
                days.len(),
                market.len()
            )));
        }
        for (d, m) in days.iter().zip(&market) {
            if d.0 != m.date {
                return Err(Error::Alignment(format!(
                    "surface date {} does not match market date {}",
                    d.0, m.date
                )));
            }
        }

        let n = days.len();
        let (train, val, _test) = chronological_split(n, &split)?;

        let dates: Vec<NaiveDate> = days.iter().map(|d| d.0).collect();
        let raw_surfaces: Vec<SurfaceGrid> = days.into_iter().map(|d| d.1).collect();
        let underlying_returns: Vec<f64> = market.iter().map(|m| m.underlying_return).collect();
        let vix_returns: Vec<f64> = market.iter().map(|m| m.vix_return).collect();

        let normalization = NormalizationStats::from_training(&raw_surfaces[..train.end])?;
        let normalized_surfaces: Vec<SurfaceGrid> = raw_surfaces
            .iter()
            .map(|s| normalize(s, &normalization))
            .collect::<Result<_>>()?;

        let series = FeatureSeries::build(
            &normalized_surfaces,
            &underlying_returns,
            &vix_returns,
            &conditioning,
        )?;
        let warmup = conditioning.warmup();
        let train_targets: Vec<usize> = (warmup + 1..train.end).collect();
        let raw_rows: Vec<[f64; 5]> = train_targets
            .iter()
            .map(|k| series.raw_scalars(k - 1))
            .collect();
        let scalar_stats = ScalarStats::from_training(&raw_rows)?;

        Ok(Dataset {
            version: DATASET_VERSION,
            grid,
            conditioning,
            split,
            boundaries: (train.end, val.end),
            normalization,
            scalar_stats,
            dates,
            raw_surfaces,
            normalized_surfaces,
            underlying_returns,
            vix_returns,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn train_range(&self) -> Range<usize> {
        0..self.boundaries.0
    }

    pub fn val_range(&self) -> Range<usize> {
        self.boundaries.0..self.boundaries.1
    }

    pub fn test_range(&self) -> Range<usize> {
        self.boundaries.1..self.len()
    }

    /// Forecast-target indices with enough history, restricted to a split.
    fn usable_targets(&self, range: Range<usize>) -> Vec<usize> {
        let first = self.conditioning.warmup() + 1;
        range.filter(|k| *k >= first).collect()
    }

    pub fn train_targets(&self) -> Vec<usize> {
        self.usable_targets(self.train_range())
    }

    pub fn val_targets(&self) -> Vec<usize> {
        self.usable_targets(self.val_range())
    }

    pub fn test_targets(&self) -> Vec<usize> {
        self.usable_targets(self.test_range())
    }

    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    /// Rebuild the per-day feature series (cheap, linear in history).
    pub fn feature_series(&self) -> Result<FeatureSeries> {
        FeatureSeries::build(
            &self.normalized_surfaces,
            &self.underlying_returns,
            &self.vix_returns,
            &self.conditioning,
        )
    }

    pub fn bundle(&self, series: &FeatureSeries, target_index: usize) -> Result<ConditioningBundle> {
        series.bundle(
            target_index,
            self.dates[target_index],
            &self.normalized_surfaces,
            &self.scalar_stats,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(path)
            .map_err(|source| Error::ReadInput { path: path.to_path_buf(), source })?;
        let dataset: Dataset = serde_json::from_slice(&bytes)?;
        if dataset.version != DATASET_VERSION {
            return Err(Error::Validation(format!(
                "dataset version {} unsupported (expected {DATASET_VERSION})",
                dataset.version
            )));
        }
        Ok(dataset)
    }
}
