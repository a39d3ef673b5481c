//! No-arbitrage penalties on implied-volatility surfaces.
//!
//! Surfaces are first mapped to relative Black-Scholes call prices
//! `c(m, τ)`, then three penalties measure violations of static
//! no-arbitrage conditions:
//!
//! - calendar: call prices may not fall as tenor grows,
//! - call spread: call prices may not rise with moneyness,
//! - butterfly: call prices must stay convex in moneyness.
//!
//! Each penalty sums hinged finite-difference quotients over the grid.
//! [`penalty_loops`] is the direct nested-loop reference;
//! [`penalty_conv_graph`] builds the same numbers from fixed difference
//! kernels on an autodiff tape so the training loss can differentiate
//! through the whole map.

use serde::{Deserialize, Serialize};

use crate::dataprep::grid::{GridSpec, SurfaceGrid, GRID_DIM};
use crate::error::{Error, Result};
use crate::gridmath::{normal_cdf, Array, Tape, Var};

/// Rates used by the Black-Scholes map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PricingContext {
    /// Annualized risk-free rate, continuous compounding.
    pub rate: f64,
    /// Annualized dividend yield.
    pub dividend_yield: f64,
}

impl Default for PricingContext {
    fn default() -> Self {
        PricingContext { rate: 0.02, dividend_yield: 0.0 }
    }
}

/// Relative call prices `c(m, τ)` on the grid, price divided by spot.
#[derive(Clone, Debug, PartialEq)]
pub struct RelCallSurface(pub SurfaceGrid);

/// The three penalty components and their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyBreakdown {
    /// Calendar-spread violations (price falling in tenor).
    pub calendar: f64,
    /// Call-spread violations (price rising in moneyness).
    pub call_spread: f64,
    /// Butterfly violations (price concave in moneyness).
    pub butterfly: f64,
    /// Sum of the three components.
    pub total: f64,
}

impl PenaltyBreakdown {
    pub fn new(calendar: f64, call_spread: f64, butterfly: f64) -> Self {
        PenaltyBreakdown {
            calendar,
            call_spread,
            butterfly,
            total: calendar + call_spread + butterfly,
        }
    }
}

/// Threshold on σ√τ below which the price collapses to its intrinsic
/// value; avoids 0/0 in d1 without changing the limit.
const VOL_TIME_FLOOR: f64 = 1e-12;

/// Relative Black-Scholes call price `c = e^(-qτ) N(d1) - m e^(-rτ) N(d2)`
/// at moneyness `m = K/S`.
pub fn bs_relative_call(m: f64, tau: f64, sigma: f64, ctx: &PricingContext) -> Result<f64> {
    if !(m > 0.0 && tau > 0.0 && sigma > 0.0) || !(m + tau + sigma).is_finite() {
        return Err(Error::Domain(format!(
            "bs_relative_call needs positive finite arguments, got m={m}, tau={tau}, sigma={sigma}"
        )));
    }
    let disc_q = (-ctx.dividend_yield * tau).exp();
    let disc_m = m * (-ctx.rate * tau).exp();
    let vol_time = sigma * tau.sqrt();
    if vol_time < VOL_TIME_FLOOR {
        return Ok((disc_q - disc_m).max(0.0));
    }
    let numerator = -m.ln() + (ctx.rate - ctx.dividend_yield) * tau + 0.5 * tau * sigma * sigma;
    let d1 = numerator / vol_time;
    let d2 = d1 - vol_time;
    Ok(disc_q * normal_cdf(d1) - disc_m * normal_cdf(d2))
}

/// Map a full IV surface to relative call prices.
pub fn rel_call_surface(
    iv: &SurfaceGrid,
    grid: &GridSpec,
    ctx: &PricingContext,
) -> Result<RelCallSurface> {
    let mut out = SurfaceGrid::zeros();
    for i in 0..GRID_DIM {
        for j in 0..GRID_DIM {
            let sigma = iv.get(i, j);
            if sigma <= 0.0 {
                return Err(Error::Domain(format!(
                    "implied vol must be positive, cell ({i},{j}) = {sigma}"
                )));
            }
            out.set(i, j, bs_relative_call(grid.moneyness()[i], grid.tenors()[j], sigma, ctx)?);
        }
    }
    Ok(RelCallSurface(out))
}

/// Penalties computed from a call-price surface. Exposed separately so
/// price-space properties (e.g. homogeneity in the violation size) can
/// be tested without the IV→price map.
pub fn penalty_from_prices(prices: &RelCallSurface, grid: &GridSpec) -> PenaltyBreakdown {
    let c = &prices.0;
    let m = grid.moneyness();
    let tau = grid.tenors();

    let mut calendar = 0.0;
    for i in 0..GRID_DIM {
        for j in 0..GRID_DIM - 1 {
            calendar += ((c.get(i, j) - c.get(i, j + 1)) / (tau[j + 1] - tau[j])).max(0.0);
        }
    }
    let mut call_spread = 0.0;
    for i in 0..GRID_DIM - 1 {
        for j in 0..GRID_DIM {
            call_spread += ((c.get(i + 1, j) - c.get(i, j)) / (m[i + 1] - m[i])).max(0.0);
        }
    }
    let mut butterfly = 0.0;
    for i in 1..GRID_DIM - 1 {
        for j in 0..GRID_DIM {
            let left = (c.get(i, j) - c.get(i - 1, j)) / (m[i] - m[i - 1]);
            let right = (c.get(i + 1, j) - c.get(i, j)) / (m[i + 1] - m[i]);
            butterfly += (left - right).max(0.0);
        }
    }
    PenaltyBreakdown::new(calendar, call_spread, butterfly)
}

/// Reference penalty: direct nested loops over the grid.
pub fn penalty_loops(
    iv: &SurfaceGrid,
    grid: &GridSpec,
    ctx: &PricingContext,
) -> Result<PenaltyBreakdown> {
    let prices = rel_call_surface(iv, grid, ctx)?;
    Ok(penalty_from_prices(&prices, grid))
}

/// Handles to the differentiable penalty terms on a tape.
pub struct PenaltyGraph {
    pub calendar: Var,
    pub call_spread: Var,
    pub butterfly: Var,
    pub total: Var,
}

/// Build the convolutional penalty on `tape` from a `[9, 9]` IV var.
/// Values match [`penalty_loops`]; gradients flow through the
/// Black-Scholes map back to the input vols.
pub fn penalty_conv_graph(
    tape: &mut Tape,
    iv: Var,
    grid: &GridSpec,
    ctx: &PricingContext,
) -> Result<PenaltyGraph> {
    if tape.value(iv).shape() != [GRID_DIM, GRID_DIM] {
        return Err(Error::Shape(format!(
            "penalty graph expects a [{GRID_DIM}, {GRID_DIM}] surface, got {:?}",
            tape.value(iv).shape()
        )));
    }
    if tape.value(iv).data().iter().any(|v| *v <= 0.0) {
        return Err(Error::Domain("penalty graph needs strictly positive vols".into()));
    }
    let m = grid.moneyness();
    let tau = grid.tenors();
    let cell = |f: &dyn Fn(usize, usize) -> f64| -> Array {
        let mut data = Vec::with_capacity(GRID_DIM * GRID_DIM);
        for i in 0..GRID_DIM {
            for j in 0..GRID_DIM {
                data.push(f(i, j));
            }
        }
        Array::new(vec![GRID_DIM, GRID_DIM], data).unwrap()
    };
    let (r, q) = (ctx.rate, ctx.dividend_yield);
    let base = cell(&|i, j| -m[i].ln() + (r - q) * tau[j]);
    let half_tau = cell(&|_, j| 0.5 * tau[j]);
    let sqrt_tau = cell(&|_, j| tau[j].sqrt());
    let disc_q = cell(&|_, j| (-q * tau[j]).exp());
    let disc_m = cell(&|i, j| m[i] * (-r * tau[j]).exp());

    let base = tape.leaf(base, false);
    let half_tau = tape.leaf(half_tau, false);
    let sqrt_tau = tape.leaf(sqrt_tau, false);
    let disc_q = tape.leaf(disc_q, false);
    let disc_m = tape.leaf(disc_m, false);

    // c = e^(-qτ) N(d1) - m e^(-rτ) N(d2), identical arithmetic to the
    // scalar path. The σ√τ→0 intrinsic branch is unreachable here: grid
    // vols are validated positive and tenors keep σ√τ above the floor.
    let sig_sq = tape.mul(iv, iv)?;
    let convexity = tape.mul(half_tau, sig_sq)?;
    let numerator = tape.add(base, convexity)?;
    let vol_time = tape.mul(iv, sqrt_tau)?;
    let d1 = tape.div(numerator, vol_time)?;
    let d2 = tape.sub(d1, vol_time)?;
    let n1 = tape.normcdf(d1)?;
    let n2 = tape.normcdf(d2)?;
    let lhs = tape.mul(disc_q, n1)?;
    let rhs = tape.mul(disc_m, n2)?;
    let prices = tape.sub(lhs, rhs)?;
    let prices = tape.reshape(prices, vec![1, GRID_DIM, GRID_DIM])?;

    // Fixed integer difference kernels; the non-uniform grid spacing is
    // divided in afterwards.
    let k_tenor = tape.leaf(Array::new(vec![1, 1, 1, 2], vec![1.0, -1.0]).unwrap(), false);
    let k_money = tape.leaf(Array::new(vec![1, 1, 2, 1], vec![-1.0, 1.0]).unwrap(), false);
    let k_slope = tape.leaf(Array::new(vec![1, 1, 2, 1], vec![1.0, -1.0]).unwrap(), false);

    let dtau = {
        let mut data = Vec::with_capacity(GRID_DIM * (GRID_DIM - 1));
        for _ in 0..GRID_DIM {
            for j in 0..GRID_DIM - 1 {
                data.push(tau[j + 1] - tau[j]);
            }
        }
        Array::new(vec![1, GRID_DIM, GRID_DIM - 1], data).unwrap()
    };
    let dm = {
        let mut data = Vec::with_capacity((GRID_DIM - 1) * GRID_DIM);
        for i in 0..GRID_DIM - 1 {
            for _ in 0..GRID_DIM {
                data.push(m[i + 1] - m[i]);
            }
        }
        Array::new(vec![1, GRID_DIM - 1, GRID_DIM], data).unwrap()
    };
    let dtau = tape.leaf(dtau, false);
    let dm = tape.leaf(dm, false);

    // Calendar: positive part of (c[i,j] - c[i,j+1]) / Δτ.
    let cal_diff = tape.conv2d(prices, k_tenor, 0, 1)?;
    let cal_rate = tape.div(cal_diff, dtau)?;
    let cal_hinge = tape.relu(cal_rate)?;
    let calendar = tape.sum(cal_hinge)?;

    // Call spread: positive part of the moneyness slope
    // (c[i+1,j] - c[i,j]) / Δm.
    let money_diff = tape.conv2d(prices, k_money, 0, 1)?;
    let slopes = tape.div(money_diff, dm)?;
    let spread_hinge = tape.relu(slopes)?;
    let call_spread = tape.sum(spread_hinge)?;

    // Butterfly: positive part of slope[i-1] - slope[i], i.e. the loss
    // of convexity between adjacent moneyness slopes.
    let slope_diff = tape.conv2d(slopes, k_slope, 0, 1)?;
    let fly_hinge = tape.relu(slope_diff)?;
    let butterfly = tape.sum(fly_hinge)?;

    let cal_plus_spread = tape.add(calendar, call_spread)?;
    let total = tape.add(cal_plus_spread, butterfly)?;
    Ok(PenaltyGraph { calendar, call_spread, butterfly, total })
}

/// Convolutional penalty evaluated on a throwaway tape.
pub fn penalty_conv(
    iv: &SurfaceGrid,
    grid: &GridSpec,
    ctx: &PricingContext,
) -> Result<PenaltyBreakdown> {
    let mut tape = Tape::new();
    let iv_var = tape.leaf(
        Array::new(vec![GRID_DIM, GRID_DIM], iv.data().to_vec()).unwrap(),
        false,
    );
    let graph = penalty_conv_graph(&mut tape, iv_var, grid, ctx)?;
    Ok(PenaltyBreakdown::new(
        tape.value(graph.calendar).item(),
        tape.value(graph.call_spread).item(),
        tape.value(graph.butterfly).item(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmath::Tape;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn flat_surface(sigma: f64) -> SurfaceGrid {
        SurfaceGrid::filled(sigma)
    }

    #[test]
    fn intrinsic_value_limit_for_vanishing_vol() {
        let ctx = PricingContext { rate: 0.0, dividend_yield: 0.0 };
        let c = bs_relative_call(0.8, 0.5, 1e-14, &ctx).unwrap();
        assert!((c - 0.2).abs() < 1e-12, "expected intrinsic 0.2, got {c}");
    }

    #[test]
    fn atm_one_year_price_matches_reference() {
        // c(m=1, τ=1, σ=0.2, r=0) = 2 N(0.1) - 1, high-precision value.
        let ctx = PricingContext { rate: 0.0, dividend_yield: 0.0 };
        let c = bs_relative_call(1.0, 1.0, 0.2, &ctx).unwrap();
        assert!((c - 0.079655674554057963).abs() < 1e-13, "got {c}");
    }

    #[test]
    fn price_decreases_in_moneyness() {
        let ctx = PricingContext::default();
        let grid = GridSpec::standard();
        for &tau in grid.tenors() {
            let prices: Vec<f64> = grid
                .moneyness()
                .iter()
                .map(|&m| bs_relative_call(m, tau, 0.3, &ctx).unwrap())
                .collect();
            assert!(prices.windows(2).all(|w| w[0] > w[1]), "not decreasing at tau={tau}");
        }
    }

    #[test]
    fn non_positive_vol_is_domain_error() {
        let grid = GridSpec::standard();
        let ctx = PricingContext::default();
        let mut iv = flat_surface(0.2);
        iv.set(3, 4, 0.0);
        assert!(matches!(penalty_loops(&iv, &grid, &ctx), Err(Error::Domain(_))));
    }

    #[test]
    fn flat_black_scholes_surface_is_arbitrage_free() {
        let grid = GridSpec::standard();
        let ctx = PricingContext { rate: 0.02, dividend_yield: 0.0 };
        let p = penalty_loops(&flat_surface(0.2), &grid, &ctx).unwrap();
        assert!(p.calendar < 1e-12 && p.call_spread < 1e-12 && p.butterfly < 1e-12);
        assert!(p.total < 1e-12);
    }

    /// Test-local reference loops, independent of the library paths.
    fn reference_penalty(c: &SurfaceGrid, grid: &GridSpec) -> (f64, f64, f64) {
        let (m, tau) = (grid.moneyness(), grid.tenors());
        let mut p1 = 0.0;
        let mut p2 = 0.0;
        let mut p3 = 0.0;
        for i in 0..9 {
            for j in 0..8 {
                p1 += ((c.get(i, j) - c.get(i, j + 1)) / (tau[j + 1] - tau[j])).max(0.0);
            }
        }
        for i in 0..8 {
            for j in 0..9 {
                p2 += ((c.get(i + 1, j) - c.get(i, j)) / (m[i + 1] - m[i])).max(0.0);
            }
        }
        for i in 1..8 {
            for j in 0..9 {
                let l = (c.get(i, j) - c.get(i - 1, j)) / (m[i] - m[i - 1]);
                let r = (c.get(i + 1, j) - c.get(i, j)) / (m[i + 1] - m[i]);
                p3 += (l - r).max(0.0);
            }
        }
        (p1, p2, p3)
    }

    #[test]
    fn hand_constructed_calendar_violation_prices() {
        let grid = GridSpec::standard();
        let ctx = PricingContext::default();
        let base = rel_call_surface(&flat_surface(0.2), &grid, &ctx).unwrap();

        // Lower one call price so c(m_i, τ_j) exceeds c(m_i, τ_{j+1}) by δ.
        let (i, j) = (4, 3);
        let delta = 1e-3;
        let mut prices = base.clone();
        prices.0.set(i, j + 1, prices.0.get(i, j) - delta);

        let p = penalty_from_prices(&prices, &grid);
        let dtau = grid.tenors()[j + 1] - grid.tenors()[j];
        assert!(
            (p.calendar - delta / dtau).abs() < 1e-9,
            "calendar {} vs {}",
            p.calendar,
            delta / dtau
        );
        let (r1, r2, r3) = reference_penalty(&prices.0, &grid);
        assert!((p.calendar - r1).abs() < 1e-12);
        assert!((p.call_spread - r2).abs() < 1e-12);
        assert!((p.butterfly - r3).abs() < 1e-12);
    }

    #[test]
    fn increasing_price_surface_triggers_call_spread() {
        let grid = GridSpec::standard();
        // Synthetic price surface rising in moneyness: every slope is a
        // violation and the call-spread penalty must equal their sum.
        let mut c = SurfaceGrid::zeros();
        for i in 0..9 {
            for j in 0..9 {
                c.set(i, j, 0.1 + 0.01 * i as f64 + 0.001 * j as f64);
            }
        }
        let p = penalty_from_prices(&RelCallSurface(c.clone()), &grid);
        let (r1, r2, r3) = reference_penalty(&c, &grid);
        assert!(p.call_spread > 0.0);
        assert!((p.call_spread - r2).abs() < 1e-12);
        assert!((p.calendar - r1).abs() < 1e-12);
        assert!((p.butterfly - r3).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_loops_on_random_surfaces() {
        let grid = GridSpec::standard();
        let ctx = PricingContext::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..25 {
            let iv = SurfaceGrid::from_vec(
                (0..81).map(|_| rng.random_range(0.05..1.0)).collect(),
            )
            .unwrap();
            let a = penalty_loops(&iv, &grid, &ctx).unwrap();
            let b = penalty_conv(&iv, &grid, &ctx).unwrap();
            assert!((a.calendar - b.calendar).abs() < 1e-10);
            assert!((a.call_spread - b.call_spread).abs() < 1e-10);
            assert!((a.butterfly - b.butterfly).abs() < 1e-10);
            assert!((a.total - b.total).abs() < 1e-10);
        }
    }

    #[test]
    fn flat_surface_has_zero_penalty_and_zero_gradient() {
        let grid = GridSpec::standard();
        let ctx = PricingContext::default();
        let mut tape = Tape::new();
        let iv = tape.leaf(crate::gridmath::Array::full(vec![9, 9], 0.2), true);
        let graph = penalty_conv_graph(&mut tape, iv, &grid, &ctx).unwrap();
        assert!(tape.value(graph.total).item() < 1e-12);
        let grads = tape.backward(graph.total).unwrap();
        assert!(grads.get(iv).unwrap().data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let grid = GridSpec::standard();
        let ctx = PricingContext::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        // A violating surface: random vols produce plenty of active hinges.
        let iv: Vec<f64> = (0..81).map(|_| rng.random_range(0.1..0.8)).collect();

        let mut tape = Tape::new();
        let iv_var = tape.leaf(crate::gridmath::Array::new(vec![9, 9], iv.clone()).unwrap(), true);
        let graph = penalty_conv_graph(&mut tape, iv_var, &grid, &ctx).unwrap();
        let grads = tape.backward(graph.total).unwrap();
        let g = grads.get(iv_var).unwrap();

        let eval = |data: Vec<f64>| {
            let s = SurfaceGrid::from_vec(data).unwrap();
            penalty_conv(&s, &grid, &ctx).unwrap().total
        };
        let h = 1e-4;
        for idx in (0..81).step_by(7) {
            let mut up = iv.clone();
            up[idx] += h;
            let mut dn = iv.clone();
            dn[idx] -= h;
            let fd = (eval(up) - eval(dn)) / (2.0 * h);
            let got = g.data()[idx];
            let denom = got.abs().max(fd.abs()).max(1e-3);
            assert!(
                ((got - fd) / denom).abs() < 1e-4,
                "cell {idx}: tape {got} fd {fd}"
            );
        }
    }

    #[test]
    fn violations_scale_linearly_in_price_space() {
        let grid = GridSpec::standard();
        // A constant price surface sits exactly on every constraint
        // boundary, so bumps create violations whose magnitude is the
        // whole hinge argument and each penalty is homogeneous of
        // degree 1 in the bump size.
        let bump = |scale: f64| {
            let mut c = SurfaceGrid::filled(0.1);
            c.set(2, 3, 0.1 + scale * 2e-3);
            c.set(5, 6, 0.1 + scale * 1e-3);
            RelCallSurface(c)
        };
        let p1 = penalty_from_prices(&bump(1.0), &grid);
        let p2 = penalty_from_prices(&bump(2.0), &grid);
        assert!(p1.calendar > 0.0 && p1.call_spread > 0.0 && p1.butterfly > 0.0);
        for (a, b) in [
            (p1.calendar, p2.calendar),
            (p1.call_spread, p2.call_spread),
            (p1.butterfly, p2.butterfly),
            (p1.total, p2.total),
        ] {
            assert!((b / a - 2.0).abs() < 1e-9, "expected doubling: {a} -> {b}");
        }
    }

    proptest! {
        /// Shifting a flat surface by any constant keeps it flat, so the
        /// moneyness-direction penalties stay zero.
        #[test]
        fn flat_shift_keeps_spread_and_fly_zero(shift in 0.01f64..1.0) {
            let grid = GridSpec::standard();
            let ctx = PricingContext::default();
            let p = penalty_loops(&flat_surface(0.1 + shift), &grid, &ctx).unwrap();
            prop_assert!(p.call_spread < 1e-12);
            prop_assert!(p.butterfly < 1e-12);
        }
    }
}
