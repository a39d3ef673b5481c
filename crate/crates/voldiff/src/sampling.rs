//! Conditional ancestral sampling with EMA weights.
//!
//! All chains for one forecast date advance through the reverse process
//! together (the network evaluates them as lanes of one batched pass).
//! Each chain draws from its own counter-derived RNG stream, so a chain
//! produces the same surface regardless of how many others run next to
//! it and the whole batch is reproducible from one seed.

use std::path::Path;

use chrono::NaiveDate;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::arbitrage::penalty_loops;
use crate::dataprep::conditioning::ConditioningBundle;
use crate::dataprep::csvio::atomic_write;
use crate::dataprep::grid::{SurfaceGrid, GRID_CELLS, GRID_DIM};
use crate::dataprep::denormalize;
use crate::diffusion::{reverse_coeffs, CLIP_BOUND};
use crate::error::{Error, Result};
use crate::model::{unet_forward_batch, ModelWeights};
use crate::training::Checkpoint;

/// Default number of surfaces generated per forecast date.
pub const DEFAULT_SAMPLES: usize = 100;

/// Which parameter set drives the sampler. Ancestral sampling uses the
/// EMA weights; the live weights are available for debugging only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSet {
    Ema,
    Live,
}

/// Generated surfaces for one forecast date.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub target_date: NaiveDate,
    pub seed: u64,
    /// Raw-scale IV surfaces, one per chain.
    pub surfaces: Vec<SurfaceGrid>,
    /// Total arbitrage penalty of each surface.
    pub penalties: Vec<f64>,
}

/// RNG stream for one chain: the batch seed with the chain index as the
/// ChaCha stream counter (stream 0 is reserved).
fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

/// Reverse chains for `k` lanes, driven by an arbitrary noise
/// predictor. `zero_noise` forces z = 0 at every step (the t = 1 step
/// is always deterministic).
pub(crate) fn run_chains_with_predictor(
    checkpoint: &Checkpoint,
    k: usize,
    seed: u64,
    zero_noise: bool,
    predictor: impl Fn(&[f64], usize) -> Result<Vec<f64>>,
) -> Result<Vec<SurfaceGrid>> {
    if k == 0 {
        return Err(Error::Contract("need at least one sample per batch".into()));
    }
    let schedule = &checkpoint.schedule;
    let n = schedule.n();

    let mut rngs: Vec<ChaCha8Rng> = (0..k).map(|i| chain_rng(seed, i)).collect();
    // State layout: [cell, lane], lanes contiguous.
    let mut x = vec![0.0; GRID_CELLS * k];
    for (lane, rng) in rngs.iter_mut().enumerate() {
        for cell in 0..GRID_CELLS {
            x[cell * k + lane] = rng.sample(StandardNormal);
        }
    }

    for t in (1..=n).rev() {
        let eps_hat = predictor(&x, t)?;
        if eps_hat.len() != x.len() {
            return Err(Error::Shape(format!(
                "predictor returned {} values for {} states",
                eps_hat.len(),
                x.len()
            )));
        }
        if !eps_hat.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite noise prediction at step t = {t}"
            )));
        }
        let c = reverse_coeffs(t, schedule)?;
        for (lane, rng) in rngs.iter_mut().enumerate() {
            for cell in 0..GRID_CELLS {
                let idx = cell * k + lane;
                let mu = c.inv_sqrt_alpha * (x[idx] - c.eps_coeff * eps_hat[idx]);
                let z: f64 =
                    if t > 1 && !zero_noise { rng.sample(StandardNormal) } else { 0.0 };
                x[idx] = mu.clamp(-CLIP_BOUND, CLIP_BOUND) + c.sigma * z;
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite state after step t = {t}")));
        }
    }

    // Back to the raw vol scale, lane by lane.
    let mut out = Vec::with_capacity(k);
    for lane in 0..k {
        let mut z = SurfaceGrid::zeros();
        for cell in 0..GRID_CELLS {
            z.data_mut()[cell] = x[cell * k + lane];
        }
        out.push(denormalize(&z, &checkpoint.normalization));
    }
    Ok(out)
}

fn network_chains(
    bundle: &ConditioningBundle,
    checkpoint: &Checkpoint,
    k: usize,
    seed: u64,
    weight_set: WeightSet,
) -> Result<Vec<SurfaceGrid>> {
    let entries = match weight_set {
        WeightSet::Ema => checkpoint.store.ema(),
        WeightSet::Live => checkpoint.store.params(),
    };
    let weights = ModelWeights::resolve(entries, &checkpoint.unet_config)?;
    let mut cond = Vec::with_capacity(3 * GRID_CELLS);
    for ch in &bundle.channels {
        cond.extend_from_slice(ch.data());
    }
    let n = checkpoint.schedule.n();
    run_chains_with_predictor(checkpoint, k, seed, false, |x, t| {
        unet_forward_batch(&weights, &cond, x, k, t, n, &bundle.scalars)
    })
}

/// One conditional surface from the EMA model.
pub fn sample_one(
    bundle: &ConditioningBundle,
    checkpoint: &Checkpoint,
    seed: u64,
) -> Result<SurfaceGrid> {
    Ok(network_chains(bundle, checkpoint, 1, seed, WeightSet::Ema)?.remove(0))
}

/// `k` independent chains with per-surface arbitrage penalties.
pub fn sample_batch_with(
    bundle: &ConditioningBundle,
    checkpoint: &Checkpoint,
    k: usize,
    seed: u64,
    weight_set: WeightSet,
) -> Result<SampleBatch> {
    let surfaces = network_chains(bundle, checkpoint, k, seed, weight_set)?;
    let penalties = surfaces
        .iter()
        .map(|s| Ok(penalty_loops(s, &checkpoint.grid, &checkpoint.pricing)?.total))
        .collect::<Result<Vec<f64>>>()?;
    Ok(SampleBatch { target_date: bundle.target_date, seed, surfaces, penalties })
}

/// `k` independent chains from the EMA model.
pub fn sample_batch(
    bundle: &ConditioningBundle,
    checkpoint: &Checkpoint,
    k: usize,
    seed: u64,
) -> Result<SampleBatch> {
    sample_batch_with(bundle, checkpoint, k, seed, WeightSet::Ema)
}

/// Sample CSV: `date,sample_id` followed by the 81 surface cells.
pub fn write_samples_csv(path: &Path, batches: &[SampleBatch]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = Vec::with_capacity(GRID_CELLS + 2);
    header.push("date".to_string());
    header.push("sample_id".to_string());
    for i in 1..=GRID_DIM {
        for j in 1..=GRID_DIM {
            header.push(format!("m{i}_t{j}"));
        }
    }
    writer.write_record(&header)?;
    for batch in batches {
        for (id, surface) in batch.surfaces.iter().enumerate() {
            let mut record = Vec::with_capacity(GRID_CELLS + 2);
            record.push(batch.target_date.format("%Y-%m-%d").to_string());
            record.push(id.to_string());
            record.extend(surface.data().iter().map(|v| v.to_string()));
            writer.write_record(record)?;
        }
    }
    let bytes = writer.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Read a sample CSV back, grouped by date in file order.
pub fn read_samples_csv(path: &Path) -> Result<Vec<(NaiveDate, Vec<SurfaceGrid>)>> {
    let file = std::fs::File::open(path)
        .map_err(|source| Error::ReadInput { path: path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers()?.clone();
    if header.len() != GRID_CELLS + 2 || &header[0] != "date" || &header[1] != "sample_id" {
        return Err(Error::Validation(format!(
            "sample CSV needs date,sample_id plus {GRID_CELLS} cells in {}",
            path.display()
        )));
    }
    let mut out: Vec<(NaiveDate, Vec<SurfaceGrid>)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d").map_err(|e| {
            Error::Validation(format!("bad date {:?} in {}: {e}", &record[0], path.display()))
        })?;
        let mut cells = Vec::with_capacity(GRID_CELLS);
        for k in 2..record.len() {
            cells.push(record[k].trim().parse::<f64>().map_err(|e| {
                Error::Validation(format!(
                    "bad cell {:?} in {}: {e}",
                    &record[k],
                    path.display()
                ))
            })?);
        }
        let surface = SurfaceGrid::from_vec(cells)?;
        match out.last_mut() {
            Some((d, group)) if *d == date => group.push(surface),
            _ => out.push((date, vec![surface])),
        }
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("no samples in {}", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arbitrage::PricingContext;
    use crate::dataprep::csvio::MarketRow;
    use crate::dataprep::synthetic::{generate, SyntheticConfig};
    use crate::dataprep::{ConditioningConfig, Dataset, GridSpec, SplitSpec};
    use crate::training::{fit, training_samples, TrainConfig};

    fn fixture() -> (Dataset, Checkpoint) {
        let grid = GridSpec::standard();
        let days = generate(60, 40, &grid, &SyntheticConfig::default()).unwrap();
        let market: Vec<MarketRow> = days
            .iter()
            .map(|d| MarketRow {
                date: d.date,
                underlying_return: d.underlying_return,
                vix_return: d.vix_return,
            })
            .collect();
        let surfaces: Vec<(NaiveDate, SurfaceGrid)> =
            days.into_iter().map(|d| (d.date, d.surface)).collect();
        let dataset = Dataset::build(
            surfaces,
            market,
            grid,
            SplitSpec::default(),
            ConditioningConfig::default(),
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            steps: 30,
            seed: 3,
            ..TrainConfig::default()
        };
        let unet = crate::model::UNetConfig {
            enc_channels: 4,
            bottle_channels: 6,
            ..crate::model::UNetConfig::default()
        };
        let out = fit(&dataset, &cfg, &unet, &PricingContext::default(), |_| {}).unwrap();
        (dataset, out.checkpoint)
    }

    fn test_bundle(dataset: &Dataset) -> ConditioningBundle {
        let series = dataset.feature_series().unwrap();
        let target = dataset.test_targets()[0];
        dataset.bundle(&series, target).unwrap()
    }

    #[test]
    fn sampling_is_deterministic_and_positive() {
        let (dataset, ckpt) = fixture();
        let bundle = test_bundle(&dataset);
        let a = sample_one(&bundle, &ckpt, 11).unwrap();
        let b = sample_one(&bundle, &ckpt, 11).unwrap();
        let bits = |s: &SurfaceGrid| s.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.is_strictly_positive());
        let c = sample_one(&bundle, &ckpt, 12).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn batch_lanes_are_chain_stable() {
        // A chain's output must not depend on how many chains run with it.
        let (dataset, ckpt) = fixture();
        let bundle = test_bundle(&dataset);
        let single = sample_batch(&bundle, &ckpt, 1, 9).unwrap();
        let triple = sample_batch(&bundle, &ckpt, 3, 9).unwrap();
        assert_eq!(
            single.surfaces[0].data(),
            triple.surfaces[0].data(),
            "lane 0 must match the single-chain run"
        );
        let one = sample_one(&bundle, &ckpt, 9).unwrap();
        assert_eq!(one.data(), single.surfaces[0].data());
        // Distinct chains differ.
        assert_ne!(triple.surfaces[0].data(), triple.surfaces[1].data());
        assert!(triple.penalties.iter().all(|p| p.is_finite() && *p >= 0.0));
    }

    #[test]
    fn oracle_predictor_chain_returns_the_conditioning_target() {
        let (dataset, ckpt) = fixture();
        let bundle = test_bundle(&dataset);
        let x0 = dataset.normalized_surfaces[bundle.target_index].clone();
        let k = 2;
        let schedule = ckpt.schedule.clone();
        let out = run_chains_with_predictor(&ckpt, k, 5, true, |x, t| {
            let bar = schedule.alpha_bar(t)?;
            let mut eps = vec![0.0; x.len()];
            for cell in 0..GRID_CELLS {
                for lane in 0..k {
                    let idx = cell * k + lane;
                    eps[idx] =
                        (x[idx] - bar.sqrt() * x0.data()[cell]) / (1.0 - bar).sqrt();
                }
            }
            Ok(eps)
        })
        .unwrap();
        let target = denormalize(&x0, &ckpt.normalization);
        for surface in out {
            for (a, b) in surface.data().iter().zip(target.data()) {
                assert!((a - b).abs() < 1e-6 * b.max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn sample_csv_roundtrip_groups_by_date() {
        let (dataset, ckpt) = fixture();
        let bundle = test_bundle(&dataset);
        let batch = sample_batch(&bundle, &ckpt, 4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        write_samples_csv(&path, &[batch.clone()]).unwrap();
        let back = read_samples_csv(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, batch.target_date);
        assert_eq!(back[0].1.len(), 4);
        for (a, b) in back[0].1.iter().zip(&batch.surfaces) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn zero_samples_is_a_contract_violation() {
        let (dataset, ckpt) = fixture();
        let bundle = test_bundle(&dataset);
        assert!(matches!(
            sample_batch(&bundle, &ckpt, 0, 1),
            Err(Error::Contract(_))
        ));
    }
}
