//! Population-level quality proxies measured against the ground-truth mixture.
//!
//! Outliers are points below the log-density that bounds 99% of ground-truth
//! samples. Coverage counts mixture components that received at least one
//! nearby sample, so dropped branches show up directly. `grid_kl` compares a
//! histogram of the population with the analytic density on a fixed grid.

mod sweep;

pub use sweep::{sweep, SweepConfig, SweepSpace, SweepState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mixture::MixtureSpec;
use crate::{Error, Result, Vec2};

/// Ground-truth mass fraction that falls below the outlier threshold.
pub const OUTLIER_QUANTILE: f64 = 0.01;

/// Ground-truth draws used to calibrate the outlier thresholds.
pub const CALIBRATION_SAMPLES: usize = 1_000_000;

/// Mahalanobis radius within which a sample covers a component.
pub const COVERAGE_RADIUS: f64 = 3.0;

/// The divergence grid covers `[-GRID_EXTENT, GRID_EXTENT]²`.
pub const GRID_EXTENT: f64 = 2.0;
pub const GRID_CELLS: usize = 128;

/// Smallest population accepted by [`grid_kl`].
pub const GRID_KL_MIN_POINTS: usize = 1000;

/// Per-class log-density thresholds below which a point counts as an outlier:
/// the `OUTLIER_QUANTILE` quantile of `count` ground-truth samples at `σ = 0`.
pub fn calibrate_thresholds(spec: &MixtureSpec, count: usize, seed: u64) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::invalid("calibration needs at least one sample"));
    }
    (0..spec.class_count())
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut ld: Vec<f64> = spec
                .sample(Some(c), count, 0.0, &mut rng)
                .into_iter()
                .map(|x| spec.log_density(Some(c), x, 0.0))
                .collect();
            ld.sort_by(f64::total_cmp);
            let k = ((count as f64 * OUTLIER_QUANTILE).floor() as usize).min(count - 1);
            Ok(ld[k])
        })
        .collect()
}

/// Share of points whose ground-truth log density lies below `threshold`.
pub fn outlier_fraction(
    population: &[Vec2],
    spec: &MixtureSpec,
    class: usize,
    threshold: f64,
) -> f64 {
    if population.is_empty() {
        return 0.0;
    }
    let below = population
        .iter()
        .filter(|&&x| !(spec.log_density(Some(class), x, 0.0) >= threshold))
        .count();
    below as f64 / population.len() as f64
}

/// Share of the class's components with at least one point within
/// Mahalanobis distance `COVERAGE_RADIUS` under the component's own covariance.
pub fn coverage(population: &[Vec2], spec: &MixtureSpec, class: usize) -> Result<f64> {
    if population.is_empty() {
        return Err(Error::invalid("coverage of an empty population"));
    }
    let comps = spec.components(class);
    let r2 = COVERAGE_RADIUS * COVERAGE_RADIUS;
    let hit = comps
        .iter()
        .filter(|c| {
            let inv = c.cov.try_inverse().expect("component covariances are SPD");
            population.iter().any(|x| {
                let d = x - c.mean;
                d.dot(&(inv * d)) <= r2
            })
        })
        .count();
    Ok(hit as f64 / comps.len() as f64)
}

fn cell_of(v: f64) -> Option<usize> {
    let h = 2.0 * GRID_EXTENT / GRID_CELLS as f64;
    let k = ((v + GRID_EXTENT) / h).floor();
    (k >= 0.0 && k < GRID_CELLS as f64).then_some(k as usize)
}

/// Reference cell masses of one class on the divergence grid.
///
/// The density is evaluated at cell centres after smoothing with the variance
/// of a uniform cell (`h²/12` per axis), which approximates the cell integral
/// of the thin components far better than a point sample at `σ = 0`.
pub fn grid_reference(spec: &MixtureSpec, class: usize) -> Vec<f64> {
    let h = 2.0 * GRID_EXTENT / GRID_CELLS as f64;
    let smooth = h / 12f64.sqrt();
    let mut q = Vec::with_capacity(GRID_CELLS * GRID_CELLS);
    for iy in 0..GRID_CELLS {
        for ix in 0..GRID_CELLS {
            let c = Vec2::new(
                -GRID_EXTENT + (ix as f64 + 0.5) * h,
                -GRID_EXTENT + (iy as f64 + 0.5) * h,
            );
            q.push(spec.density(Some(class), c, smooth));
        }
    }
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= total);
    q
}

/// `KL(P‖Q)` between the population histogram `P` and the analytic cell
/// masses `Q`. Both sides get the same add-one smoothing: `P` from its counts
/// and `Q` as if it were a histogram of the same size, so a perfect sampler
/// scores only histogram noise.
pub fn grid_kl(population: &[Vec2], spec: &MixtureSpec, class: usize) -> Result<f64> {
    grid_kl_with(population, &grid_reference(spec, class))
}

/// [`grid_kl`] against precomputed [`grid_reference`] masses.
pub fn grid_kl_with(population: &[Vec2], reference: &[f64]) -> Result<f64> {
    if population.len() < GRID_KL_MIN_POINTS {
        return Err(Error::invalid(format!(
            "grid_kl needs at least {GRID_KL_MIN_POINTS} points, got {}",
            population.len()
        )));
    }
    let cells = GRID_CELLS * GRID_CELLS;
    if reference.len() != cells {
        return Err(Error::invalid("grid reference has the wrong size"));
    }
    let mut counts = vec![0u64; cells];
    let mut n = 0u64;
    for x in population {
        if let (Some(ix), Some(iy)) = (cell_of(x.x), cell_of(x.y)) {
            counts[iy * GRID_CELLS + ix] += 1;
            n += 1;
        }
    }
    let denom = n as f64 + cells as f64;
    let kl: f64 = counts
        .iter()
        .zip(reference)
        .map(|(&k, &q)| {
            let p = (k as f64 + 1.0) / denom;
            let q = (q * n as f64 + 1.0) / denom;
            p * (p / q).ln()
        })
        .sum();
    Ok(kl.max(0.0))
}

/// Metrics of one sampled population (or the class average of several).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub outlier_fraction: f64,
    pub coverage: f64,
    pub grid_kl: f64,
    /// `outlier_fraction + (1 − coverage)`; lower is better.
    pub composite: f64,
    pub population_size: usize,
    pub fingerprint: String,
}

impl MetricReport {
    /// Metrics of a single-class population.
    pub fn evaluate(
        population: &[Vec2],
        spec: &MixtureSpec,
        class: usize,
        threshold: f64,
        fingerprint: impl Into<String>,
    ) -> Result<Self> {
        let outlier_fraction = outlier_fraction(population, spec, class, threshold);
        let coverage = coverage(population, spec, class)?;
        let grid_kl = grid_kl(population, spec, class)?;
        Ok(Self {
            outlier_fraction,
            coverage,
            grid_kl,
            composite: outlier_fraction + (1.0 - coverage),
            population_size: population.len(),
            fingerprint: fingerprint.into(),
        })
    }

    /// Evaluates each `(class, population)` pair and averages the metrics.
    pub fn evaluate_classes(
        populations: &[(usize, Vec<Vec2>)],
        spec: &MixtureSpec,
        thresholds: &[f64],
        fingerprint: impl Into<String>,
    ) -> Result<Self> {
        let fingerprint = fingerprint.into();
        let reports = populations
            .iter()
            .map(|(c, pop)| {
                let tau = *thresholds
                    .get(*c)
                    .ok_or_else(|| Error::invalid(format!("no outlier threshold for class {c}")))?;
                Self::evaluate(pop, spec, *c, tau, fingerprint.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::mean(&reports, fingerprint)
    }

    /// Unweighted mean of several reports; population sizes add up.
    pub fn mean(reports: &[MetricReport], fingerprint: impl Into<String>) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::invalid("no reports to average"));
        }
        let k = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        let outlier_fraction = avg(|r| r.outlier_fraction);
        let coverage = avg(|r| r.coverage);
        Ok(Self {
            outlier_fraction,
            coverage,
            grid_kl: avg(|r| r.grid_kl),
            composite: outlier_fraction + (1.0 - coverage),
            population_size: reports.iter().map(|r| r.population_size).sum(),
            fingerprint: fingerprint.into(),
        })
    }
}
