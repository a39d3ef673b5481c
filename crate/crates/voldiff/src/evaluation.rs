//! Forecast evaluation: slice MAPE and APE spread, confidence-interval
//! width and breach rates, daily surface MAPE, distribution moments,
//! and per-day arbitrage penalties.
//!
//! Every aggregation sorts its operands before summing, so reported
//! metrics are invariant (bitwise) under permutation of the samples
//! within each batch.

use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::arbitrage::{penalty_loops, PricingContext};
use crate::dataprep::csvio::atomic_write;
use crate::dataprep::grid::{GridSpec, SurfaceGrid, GRID_CELLS, GRID_DIM};
use crate::error::{Error, Result};

/// One monitored grid point.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub label: String,
    pub moneyness_index: usize,
    pub tenor_index: usize,
}

impl SliceSpec {
    pub fn new(label: impl Into<String>, moneyness_index: usize, tenor_index: usize) -> Result<Self> {
        if moneyness_index >= GRID_DIM || tenor_index >= GRID_DIM {
            return Err(Error::Validation(format!(
                "slice indices must be within 0..{GRID_DIM}, got ({moneyness_index}, {tenor_index})"
            )));
        }
        Ok(SliceSpec { label: label.into(), moneyness_index, tenor_index })
    }

    pub fn cell(&self, surface: &SurfaceGrid) -> f64 {
        surface.get(self.moneyness_index, self.tenor_index)
    }

    /// CSV-friendly column prefix.
    pub fn column_key(&self) -> String {
        self.label.to_lowercase().replace([' ', '-'], "_")
    }
}

/// The monitored slices: at/out/in-the-money levels crossed with
/// one-day, one-week, one-month, and three-month tenors. Moneyness
/// levels follow the grid defaults (ATM m = 1.0, OTM m = 1.2,
/// ITM m = 0.8) and are overridable in configuration.
pub fn default_slices() -> Vec<SliceSpec> {
    let mut out = Vec::new();
    for (money_label, mi) in [("ATM", 4usize), ("OTM", 6), ("ITM", 2)] {
        for (tenor_label, ti) in [("1-Day", 0usize), ("1-Week", 1), ("1-Month", 3), ("3-Month", 5)]
        {
            out.push(SliceSpec {
                label: format!("{money_label} {tenor_label}"),
                moneyness_index: mi,
                tenor_index: ti,
            });
        }
    }
    out
}

/// Sum after sorting, so the result does not depend on input order.
fn stable_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
}

fn stable_mean(values: &[f64]) -> f64 {
    stable_sum(values) / values.len() as f64
}

/// Sample standard deviation (n-1 denominator) with order-stable sums.
fn stable_sample_std(values: &[f64]) -> f64 {
    let mean = stable_mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    (stable_sum(&sq) / (values.len() as f64 - 1.0)).sqrt()
}

/// Daily mean absolute percentage error between two surfaces, as a
/// fraction.
pub fn surface_mape(truth: &SurfaceGrid, pred: &SurfaceGrid) -> Result<f64> {
    let mut terms = Vec::with_capacity(GRID_CELLS);
    for (idx, (t, p)) in truth.data().iter().zip(pred.data()).enumerate() {
        if *t <= 0.0 {
            return Err(Error::Domain(format!(
                "surface MAPE needs positive truth values, cell {idx} = {t}"
            )));
        }
        terms.push(((p - t) / t).abs());
    }
    Ok(stable_sum(&terms) / GRID_CELLS as f64)
}

/// Linear-interpolation percentile of pre-sorted values, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Confidence-interval calibration for one slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiStats {
    pub mean_width: f64,
    pub std_width: f64,
    /// Percentage of days the truth fell strictly outside the interval.
    pub breach_pct: f64,
}

/// Empirical central interval per day (e.g. level 0.90 spans the 5th to
/// 95th percentiles of the samples) with breach counted when the truth
/// lies strictly outside.
pub fn ci_stats(truth: &[f64], sample_sets: &[Vec<f64>], level: f64) -> Result<CiStats> {
    if truth.len() != sample_sets.len() || truth.is_empty() {
        return Err(Error::Size(format!(
            "need matching non-empty truth/sample series, got {} and {}",
            truth.len(),
            sample_sets.len()
        )));
    }
    if !(0.0 < level && level <= 1.0) {
        return Err(Error::Contract(format!("level must be in (0, 1], got {level}")));
    }
    let q_lo = (1.0 - level) / 2.0;
    let q_hi = 1.0 - q_lo;
    let mut widths = Vec::with_capacity(truth.len());
    let mut breaches = 0usize;
    for (t, samples) in truth.iter().zip(sample_sets) {
        if samples.len() < 20 {
            return Err(Error::Size(format!(
                "confidence intervals need at least 20 samples, got {}",
                samples.len()
            )));
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let lo = percentile(&sorted, q_lo);
        let hi = percentile(&sorted, q_hi);
        widths.push(hi - lo);
        if *t < lo || *t > hi {
            breaches += 1;
        }
    }
    Ok(CiStats {
        mean_width: stable_mean(&widths),
        std_width: stable_sample_std(&widths),
        breach_pct: 100.0 * breaches as f64 / truth.len() as f64,
    })
}

/// First four sample moments; kurtosis in the Fisher convention
/// (normal = 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub kurtosis_fisher: f64,
}

pub fn moments(values: &[f64]) -> Result<Moments> {
    if values.len() < 4 {
        return Err(Error::Size(format!("moments need at least 4 values, got {}", values.len())));
    }
    let n = values.len() as f64;
    let mean = stable_mean(values);
    let centered: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let m2 = stable_sum(&centered.iter().map(|c| c * c).collect::<Vec<_>>()) / n;
    if m2 <= 0.0 {
        return Err(Error::DegenerateInput(
            "moments of a zero-variance distribution".into(),
        ));
    }
    let m3 = stable_sum(&centered.iter().map(|c| c * c * c).collect::<Vec<_>>()) / n;
    let m4 = stable_sum(&centered.iter().map(|c| c * c * c * c).collect::<Vec<_>>()) / n;
    Ok(Moments {
        mean,
        std: (m2 * n / (n - 1.0)).sqrt(),
        skewness: m3 / m2.powf(1.5),
        kurtosis_fisher: m4 / (m2 * m2) - 3.0,
    })
}

/// Accuracy/calibration/distribution numbers for one slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub slice: SliceSpec,
    pub mape_pct: f64,
    pub ape_std_pct: f64,
    pub ci: CiStats,
    pub moments_truth: Moments,
    pub moments_generated: Moments,
}

/// Per-day numbers for the report CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailyRecord {
    pub date: NaiveDate,
    /// MAPE of the per-cell mean forecast, as a fraction.
    pub surface_mape: f64,
    /// Mean total arbitrage penalty over the day's samples.
    pub mean_phi: f64,
    /// Per monitored slice: truth, mean forecast, interval bounds.
    pub slices: Vec<DailySlice>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailySlice {
    pub truth: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// The full evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Interval level used for the calibration columns.
    pub level: f64,
    /// Mean of the daily surface MAPEs, in percent.
    pub overall_mape_pct: f64,
    pub slices: Vec<SliceReport>,
    pub daily: Vec<DailyRecord>,
}

/// Per-cell mean of a day's samples, with order-stable sums.
fn mean_surface(samples: &[SurfaceGrid]) -> SurfaceGrid {
    let mut out = SurfaceGrid::zeros();
    let mut column = Vec::with_capacity(samples.len());
    for cell in 0..GRID_CELLS {
        column.clear();
        column.extend(samples.iter().map(|s| s.data()[cell]));
        out.data_mut()[cell] = stable_mean(&column);
    }
    out
}

/// Evaluate truth/sample pairs. Every batch date must appear in the
/// truth series; evaluation runs in batch order.
pub fn evaluate(
    truth: &[(NaiveDate, SurfaceGrid)],
    batches: &[(NaiveDate, Vec<SurfaceGrid>)],
    slices: &[SliceSpec],
    grid: &GridSpec,
    pricing: &PricingContext,
    level: f64,
) -> Result<MetricsReport> {
    if batches.is_empty() {
        return Err(Error::EmptyInput("no sample batches to evaluate"));
    }
    if slices.is_empty() {
        return Err(Error::EmptyInput("no slices configured"));
    }
    let missing: Vec<String> = batches
        .iter()
        .filter(|(date, _)| !truth.iter().any(|(t, _)| t == date))
        .map(|(date, _)| date.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Alignment(format!(
            "sample dates missing from the truth series: {}",
            missing.join(", ")
        )));
    }

    let aligned: Vec<(&NaiveDate, &SurfaceGrid, &Vec<SurfaceGrid>)> = batches
        .iter()
        .map(|(date, samples)| {
            let (_, t) = truth.iter().find(|(t, _)| t == date).expect("checked above");
            (date, t, samples)
        })
        .collect();

    let mut daily = Vec::with_capacity(aligned.len());
    let mut daily_mapes = Vec::with_capacity(aligned.len());
    for (date, truth_surface, samples) in &aligned {
        if samples.is_empty() {
            return Err(Error::EmptyInput("a sample batch is empty"));
        }
        let mean = mean_surface(samples);
        let mape = surface_mape(truth_surface, &mean)?;
        daily_mapes.push(mape);
        let penalties: Vec<f64> = samples
            .iter()
            .map(|s| Ok(penalty_loops(s, grid, pricing)?.total))
            .collect::<Result<Vec<f64>>>()?;
        let q_lo = (1.0 - level) / 2.0;
        let slices_today: Vec<DailySlice> = slices
            .iter()
            .map(|slice| {
                let mut values: Vec<f64> = samples.iter().map(|s| slice.cell(s)).collect();
                values.sort_by(f64::total_cmp);
                DailySlice {
                    truth: slice.cell(truth_surface),
                    mean: slice.cell(&mean),
                    lower: percentile(&values, q_lo),
                    upper: percentile(&values, 1.0 - q_lo),
                }
            })
            .collect();
        daily.push(DailyRecord {
            date: **date,
            surface_mape: mape,
            mean_phi: stable_mean(&penalties),
            slices: slices_today,
        });
    }
    let overall_mape_pct = 100.0 * stable_mean(&daily_mapes);

    let mut slice_reports = Vec::with_capacity(slices.len());
    for slice in slices {
        let truth_series: Vec<f64> =
            aligned.iter().map(|(_, t, _)| slice.cell(t)).collect();
        let sample_sets: Vec<Vec<f64>> = aligned
            .iter()
            .map(|(_, _, samples)| samples.iter().map(|s| slice.cell(s)).collect())
            .collect();
        let apes: Vec<f64> = aligned
            .iter()
            .map(|(_, t, samples)| {
                let mean = stable_mean(&samples.iter().map(|s| slice.cell(s)).collect::<Vec<_>>());
                let truth_val = slice.cell(t);
                ((mean - truth_val) / truth_val).abs()
            })
            .collect();
        let pooled: Vec<f64> = sample_sets.iter().flatten().copied().collect();
        slice_reports.push(SliceReport {
            slice: slice.clone(),
            mape_pct: 100.0 * stable_mean(&apes),
            ape_std_pct: 100.0 * stable_sample_std(&apes),
            ci: ci_stats(&truth_series, &sample_sets, level)?,
            moments_truth: moments(&truth_series)?,
            moments_generated: moments(&pooled)?,
        });
    }

    Ok(MetricsReport { level, overall_mape_pct, slices: slice_reports, daily })
}

/// Metrics CSV: one row per slice plus an overall row.
pub fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record([
        "slice",
        "mape_pct",
        "ape_std_pct",
        "mean_ci_width",
        "std_ci_width",
        "ci_breach_pct",
    ])?;
    for s in &report.slices {
        writer.write_record([
            s.slice.label.clone(),
            s.mape_pct.to_string(),
            s.ape_std_pct.to_string(),
            s.ci.mean_width.to_string(),
            s.ci.std_width.to_string(),
            s.ci.breach_pct.to_string(),
        ])?;
    }
    writer.write_record([
        "Overall".to_string(),
        report.overall_mape_pct.to_string(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
    ])?;
    let bytes = writer.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Daily series CSV: date, surface MAPE, mean penalty, then truth /
/// mean / lower / upper per slice.
pub fn write_daily_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["date".to_string(), "surface_mape".to_string(), "mean_phi".to_string()];
    for s in &report.slices {
        let key = s.slice.column_key();
        header.push(format!("{key}_truth"));
        header.push(format!("{key}_mean"));
        header.push(format!("{key}_lower"));
        header.push(format!("{key}_upper"));
    }
    writer.write_record(&header)?;
    for day in &report.daily {
        let mut record = vec![
            day.date.format("%Y-%m-%d").to_string(),
            day.surface_mape.to_string(),
            day.mean_phi.to_string(),
        ];
        for s in &day.slices {
            record.push(s.truth.to_string());
            record.push(s.mean.to_string());
            record.push(s.lower.to_string());
            record.push(s.upper.to_string());
        }
        writer.write_record(&record)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Structured summary of the whole report.
pub fn write_summary_json(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn date(k: u64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2022, 1, 3).unwrap() + chrono::Days::new(k)
    }

    #[test]
    fn surface_mape_basics() {
        let truth = SurfaceGrid::filled(0.2);
        assert_eq!(surface_mape(&truth, &truth).unwrap(), 0.0);
        let pred = truth.map(|v| 1.1 * v);
        assert!((surface_mape(&truth, &pred).unwrap() - 0.10).abs() < 1e-12);
        let mut zero = truth.clone();
        zero.set(0, 0, 0.0);
        assert!(matches!(surface_mape(&zero, &pred), Err(Error::Domain(_))));
    }

    #[test]
    fn surface_mape_matches_loop_oracle_and_is_asymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let truth =
            SurfaceGrid::from_vec((0..81).map(|_| rng.random_range(0.1..0.5)).collect()).unwrap();
        let pred =
            SurfaceGrid::from_vec((0..81).map(|_| rng.random_range(0.1..0.5)).collect()).unwrap();
        let mut want = 0.0;
        for i in 0..9 {
            for j in 0..9 {
                want += ((pred.get(i, j) - truth.get(i, j)) / truth.get(i, j)).abs();
            }
        }
        want /= 81.0;
        let got = surface_mape(&truth, &pred).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert_ne!(
            surface_mape(&truth, &pred).unwrap(),
            surface_mape(&pred, &truth).unwrap()
        );
    }

    #[test]
    fn ci_breach_extremes() {
        let samples: Vec<Vec<f64>> =
            (0..10).map(|_| (0..50).map(|k| 0.1 + 0.001 * k as f64).collect()).collect();
        // Truth at the sample median never breaches.
        let med = vec![0.1 + 0.001 * 24.5; 10];
        let stats = ci_stats(&med, &samples, 0.9).unwrap();
        assert_eq!(stats.breach_pct, 0.0);
        // Truth above every sample always breaches.
        let high = vec![1.0; 10];
        let stats = ci_stats(&high, &samples, 0.9).unwrap();
        assert_eq!(stats.breach_pct, 100.0);
        // Too few samples per day is a size error.
        let tiny: Vec<Vec<f64>> = (0..10).map(|_| vec![0.1; 5]).collect();
        assert!(matches!(ci_stats(&med, &tiny, 0.9), Err(Error::Size(_))));
    }

    #[test]
    fn percentile_linear_interpolation() {
        let sorted = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&sorted, 0.0), 1.0);
        assert_eq!(percentile(&sorted, 1.0), 4.0);
        assert_eq!(percentile(&sorted, 0.5), 2.5);
        assert!((percentile(&sorted, 0.05) - 1.15).abs() < 1e-12);
    }

    #[test]
    fn moments_of_reference_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let normal: Vec<f64> = (0..1_000_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let m = moments(&normal).unwrap();
        assert!(m.mean.abs() < 0.01);
        assert!((m.std - 1.0).abs() < 0.01);
        assert!(m.skewness.abs() < 0.05, "skew {}", m.skewness);
        assert!(m.kurtosis_fisher.abs() < 0.05, "kurt {}", m.kurtosis_fisher);

        // Exponential(1): skewness 2, Fisher kurtosis 6.
        let expo: Vec<f64> =
            (0..1_000_000).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let m = moments(&expo).unwrap();
        assert!((m.skewness - 2.0).abs() < 0.1, "skew {}", m.skewness);
        assert!((m.kurtosis_fisher - 6.0).abs() < 0.1, "kurt {}", m.kurtosis_fisher);

        assert!(matches!(moments(&[1.0, 1.0, 1.0, 1.0]), Err(Error::DegenerateInput(_))));
        assert!(matches!(moments(&[1.0, 2.0]), Err(Error::Size(_))));
    }

    fn synthetic_eval_fixture(
        days: usize,
        k: usize,
        spread: f64,
    ) -> (Vec<(NaiveDate, SurfaceGrid)>, Vec<(NaiveDate, Vec<SurfaceGrid>)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut truth = Vec::new();
        let mut batches = Vec::new();
        for d in 0..days {
            let base =
                SurfaceGrid::from_vec((0..81).map(|_| rng.random_range(0.15..0.35)).collect())
                    .unwrap();
            let samples: Vec<SurfaceGrid> = (0..k)
                .map(|_| {
                    let mut s = base.clone();
                    for v in s.data_mut() {
                        *v *= 1.0 + spread * rng.sample::<f64, _>(StandardNormal);
                    }
                    s
                })
                .collect();
            truth.push((date(d as u64), base));
            batches.push((date(d as u64), samples));
        }
        (truth, batches)
    }

    #[test]
    fn perfect_samples_give_zero_errors() {
        let (truth, _) = synthetic_eval_fixture(6, 25, 0.0);
        let batches: Vec<(NaiveDate, Vec<SurfaceGrid>)> = truth
            .iter()
            .map(|(d, s)| (*d, vec![s.clone(); 25]))
            .collect();
        let report = evaluate(
            &truth,
            &batches,
            &default_slices(),
            &GridSpec::standard(),
            &PricingContext::default(),
            0.9,
        )
        .unwrap();
        // The widths and breach counts are exactly zero; the MAPE of the
        // mean forecast only reaches summation epsilon because averaging
        // k identical doubles rounds.
        assert!(report.overall_mape_pct < 1e-12);
        for s in &report.slices {
            assert!(s.mape_pct < 1e-12);
            assert_eq!(s.ci.mean_width, 0.0);
            assert_eq!(s.ci.std_width, 0.0);
            assert_eq!(s.ci.breach_pct, 0.0);
        }
        for d in &report.daily {
            assert!(d.surface_mape < 1e-12);
        }
    }

    #[test]
    fn overall_mape_is_mean_of_daily_series() {
        let (truth, batches) = synthetic_eval_fixture(8, 30, 0.02);
        let report = evaluate(
            &truth,
            &batches,
            &default_slices(),
            &GridSpec::standard(),
            &PricingContext::default(),
            0.9,
        )
        .unwrap();
        let mean_daily: f64 =
            report.daily.iter().map(|d| d.surface_mape).sum::<f64>() / report.daily.len() as f64;
        assert!((report.overall_mape_pct - 100.0 * mean_daily).abs() < 1e-10);
    }

    #[test]
    fn metrics_are_invariant_under_sample_permutation() {
        let (truth, batches) = synthetic_eval_fixture(5, 40, 0.03);
        let slices = default_slices();
        let grid = GridSpec::standard();
        let pricing = PricingContext::default();
        let a = evaluate(&truth, &batches, &slices, &grid, &pricing, 0.9).unwrap();
        let mut shuffled = batches.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (_, samples) in &mut shuffled {
            samples.shuffle(&mut rng);
        }
        let b = evaluate(&truth, &shuffled, &slices, &grid, &pricing, 0.9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_range_interval_breaches_no_more_than_nominal() {
        let (truth, batches) = synthetic_eval_fixture(10, 25, 0.05);
        let slices = default_slices();
        let grid = GridSpec::standard();
        let pricing = PricingContext::default();
        let narrow = evaluate(&truth, &batches, &slices, &grid, &pricing, 0.9).unwrap();
        let full = evaluate(&truth, &batches, &slices, &grid, &pricing, 1.0).unwrap();
        for (n, f) in narrow.slices.iter().zip(&full.slices) {
            assert!(f.ci.breach_pct <= n.ci.breach_pct + 1e-12);
        }
    }

    #[test]
    fn misaligned_dates_error_lists_offenders() {
        let (truth, mut batches) = synthetic_eval_fixture(4, 25, 0.01);
        batches.push((date(99), batches[0].1.clone()));
        let err = evaluate(
            &truth,
            &batches,
            &default_slices(),
            &GridSpec::standard(),
            &PricingContext::default(),
            0.9,
        );
        match err {
            Err(Error::Alignment(msg)) => assert!(msg.contains("2022-04-12"), "{msg}"),
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    #[test]
    fn report_csvs_have_documented_layout() {
        let (truth, batches) = synthetic_eval_fixture(4, 25, 0.02);
        let report = evaluate(
            &truth,
            &batches,
            &default_slices(),
            &GridSpec::standard(),
            &PricingContext::default(),
            0.9,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let metrics = dir.path().join("metrics.csv");
        let daily = dir.path().join("daily.csv");
        let summary = dir.path().join("summary.json");
        write_metrics_csv(&metrics, &report).unwrap();
        write_daily_csv(&daily, &report).unwrap();
        write_summary_json(&summary, &report).unwrap();

        let mtext = std::fs::read_to_string(&metrics).unwrap();
        assert!(mtext.starts_with("slice,mape_pct,ape_std_pct,mean_ci_width,std_ci_width,ci_breach_pct\n"));
        assert!(mtext.contains("ATM 1-Day"));
        assert!(mtext.lines().last().unwrap().starts_with("Overall,"));

        let dtext = std::fs::read_to_string(&daily).unwrap();
        let header = dtext.lines().next().unwrap();
        assert!(header.starts_with("date,surface_mape,mean_phi,atm_1_day_truth,atm_1_day_mean"));

        let parsed: MetricsReport =
            serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
        assert_eq!(parsed, report);
    }

    proptest! {
        /// Sample-median truth stays inside any central interval.
        #[test]
        fn median_truth_never_breaches(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut sorted = samples.clone();
            sorted.sort_by(f64::total_cmp);
            let median = percentile(&sorted, 0.5);
            let stats = ci_stats(&[median], &[samples], 0.9).unwrap();
            prop_assert_eq!(stats.breach_pct, 0.0);
        }
    }
}
