//! Synthetic daily IV surfaces for experiments without proprietary
//! market data.
//!
//! Each day's surface comes from a smooth parametric family: total
//! variance is quadratic in log-moneyness with positive convexity and
//! the ATM term structure saturates exponentially. The family is
//! arbitrage-free by construction (verified against the penalty module
//! in tests), the parameters follow a clamped mean-reverting random
//! walk, and a small multiplicative observation noise gives the data the
//! low but nonzero arbitrage level real quote feeds show.

use chrono::{Days, NaiveDate};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::grid::{GridSpec, SurfaceGrid, GRID_DIM};
use crate::arbitrage::{penalty_loops, PricingContext};
use crate::error::{Error, Result};

/// Time constant of the term-structure saturation, in years.
const TERM_TIME_CONSTANT: f64 = 0.35;

/// Smile/term-structure parameters for one day.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyParams {
    /// Short-end ATM volatility.
    pub short_vol: f64,
    /// Long-end ATM volatility.
    pub long_vol: f64,
    /// Linear smile coefficient in log-moneyness (negative for the usual
    /// equity skew).
    pub skew: f64,
    /// Quadratic smile coefficient; positive keeps the smile convex.
    pub convexity: f64,
}

impl Default for FamilyParams {
    fn default() -> Self {
        FamilyParams { short_vol: 0.22, long_vol: 0.24, skew: -0.20, convexity: 0.40 }
    }
}

/// Bounds of the clamped parameter walk. Chosen so the noiseless family
/// stays arbitrage-free and vols stay well inside (0.01, 2.0) over the
/// whole box.
const PARAM_BOUNDS: [(f64, f64); 4] =
    [(0.12, 0.45), (0.15, 0.40), (-0.35, -0.05), (0.15, 0.70)];

/// Noiseless surface of the parametric family.
pub fn family_surface(params: &FamilyParams, grid: &GridSpec) -> SurfaceGrid {
    let mut out = SurfaceGrid::zeros();
    let s0sq = params.short_vol * params.short_vol;
    let slsq = params.long_vol * params.long_vol;
    for i in 0..GRID_DIM {
        let k = grid.moneyness()[i].ln();
        let smile = 1.0 + params.skew * k + params.convexity * k * k;
        for j in 0..GRID_DIM {
            let tau = grid.tenors()[j];
            let atm_total_var =
                slsq * tau + (s0sq - slsq) * TERM_TIME_CONSTANT * (1.0 - (-tau / TERM_TIME_CONSTANT).exp());
            out.set(i, j, (atm_total_var * smile / tau).sqrt());
        }
    }
    out
}

/// Generator settings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Relative (lognormal) per-cell observation noise.
    pub observation_noise: f64,
    /// Per-surface arbitrage-penalty guard; generation fails if any
    /// surface exceeds it.
    pub max_penalty: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { observation_noise: 0.02, max_penalty: 0.5 }
    }
}

/// One generated day.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDay {
    pub date: NaiveDate,
    pub surface: SurfaceGrid,
    pub underlying_return: f64,
    pub vix_return: f64,
}

const TRADING_DAYS: f64 = 252.0;
const BASE_DATE: (i32, u32, u32) = (2015, 1, 2);

/// Generate `n_days` of surfaces plus market series, deterministically
/// from the seed.
pub fn generate(
    n_days: usize,
    seed: u64,
    grid: &GridSpec,
    cfg: &SyntheticConfig,
) -> Result<Vec<SyntheticDay>> {
    if n_days < 50 {
        return Err(Error::Validation(format!(
            "synthetic generation needs at least 50 days, got {n_days}"
        )));
    }
    if cfg.observation_noise < 0.0 {
        return Err(Error::Config("observation noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_date = NaiveDate::from_ymd_opt(BASE_DATE.0, BASE_DATE.1, BASE_DATE.2)
        .expect("valid base date");
    let pricing = PricingContext::default();

    let means = FamilyParams::default();
    let mut params = means;
    let mut out = Vec::with_capacity(n_days);
    for day in 0..n_days {
        let prev_short = params.short_vol;
        // Clamped mean-reverting walk on each family parameter.
        let mut step = |current: f64, mean: f64, reversion: f64, shock: f64, bounds: (f64, f64)| {
            let z: f64 = rng.sample(StandardNormal);
            (current + reversion * (mean - current) + shock * z).clamp(bounds.0, bounds.1)
        };
        params.short_vol = step(params.short_vol, means.short_vol, 0.03, 0.008, PARAM_BOUNDS[0]);
        params.long_vol = step(params.long_vol, means.long_vol, 0.03, 0.004, PARAM_BOUNDS[1]);
        params.skew = step(params.skew, means.skew, 0.05, 0.008, PARAM_BOUNDS[2]);
        params.convexity = step(params.convexity, means.convexity, 0.05, 0.012, PARAM_BOUNDS[3]);

        let z_ret: f64 = rng.sample(StandardNormal);
        let z_vix: f64 = rng.sample(StandardNormal);
        let underlying_return = params.short_vol / TRADING_DAYS.sqrt() * z_ret;
        let vix_return = (params.short_vol - prev_short) / prev_short + 0.002 * z_vix;

        let mut surface = family_surface(&params, grid);
        if cfg.observation_noise > 0.0 {
            for v in surface.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v *= (cfg.observation_noise * z).exp();
            }
        }
        let penalty = penalty_loops(&surface, grid, &pricing)?;
        if penalty.total > cfg.max_penalty {
            return Err(Error::DegenerateInput(format!(
                "generated surface on day {day} exceeds the penalty guard: {} > {}",
                penalty.total, cfg.max_penalty
            )));
        }
        out.push(SyntheticDay {
            date: base_date + Days::new(day as u64),
            surface,
            underlying_return,
            vix_return,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let grid = GridSpec::standard();
        let cfg = SyntheticConfig::default();
        let a = generate(60, 7, &grid, &cfg).unwrap();
        let b = generate(60, 7, &grid, &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.date, y.date);
            assert_eq!(x.underlying_return.to_bits(), y.underlying_return.to_bits());
            assert_eq!(x.vix_return.to_bits(), y.vix_return.to_bits());
            let xb: Vec<u64> = x.surface.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.surface.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn surfaces_stay_in_sane_vol_range() {
        let grid = GridSpec::standard();
        let days = generate(200, 11, &grid, &SyntheticConfig::default()).unwrap();
        for d in &days {
            for v in d.surface.data() {
                assert!(*v > 0.01 && *v < 2.0, "vol {v} outside (0.01, 2.0)");
            }
        }
    }

    #[test]
    fn mean_penalty_of_200_days_below_threshold() {
        let grid = GridSpec::standard();
        let ctx = PricingContext::default();
        let days = generate(200, 3, &grid, &SyntheticConfig::default()).unwrap();
        let mean: f64 = days
            .iter()
            .map(|d| penalty_loops(&d.surface, &grid, &ctx).unwrap().total)
            .sum::<f64>()
            / days.len() as f64;
        assert!(mean < 1e-3, "mean penalty {mean}");
    }

    #[test]
    fn noiseless_family_is_arbitrage_free_over_parameter_box() {
        let grid = GridSpec::standard();
        let ctx = PricingContext::default();
        // All 16 corners of the box plus the means.
        for mask in 0..16u32 {
            let pick = |k: usize| -> f64 {
                let (lo, hi) = PARAM_BOUNDS[k];
                if mask & (1 << k) == 0 { lo } else { hi }
            };
            let p = FamilyParams {
                short_vol: pick(0),
                long_vol: pick(1),
                skew: pick(2),
                convexity: pick(3),
            };
            let phi = penalty_loops(&family_surface(&p, &grid), &grid, &ctx).unwrap().total;
            assert!(phi < 1e-12, "corner {mask}: penalty {phi}");
        }
        let phi =
            penalty_loops(&family_surface(&FamilyParams::default(), &grid), &grid, &ctx).unwrap();
        assert!(phi.total < 1e-12);
    }

    #[test]
    fn too_few_days_is_validation_error() {
        let grid = GridSpec::standard();
        assert!(matches!(
            generate(10, 1, &grid, &SyntheticConfig::default()),
            Err(Error::Validation(_))
        ));
    }
}
