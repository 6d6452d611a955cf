//! Deterministic Heun integration of the probability-flow ODE.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{point_streams, Denoiser};
use crate::{Error, Result, Vec2};

/// Points integrated together in one batch of a population run.
pub const POPULATION_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub n_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    /// `σ_0 … σ_N` with `σ_N = 0`.
    pub ladder: Vec<f64>,
}

impl SigmaSchedule {
    pub fn new(n_steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 steps, got {n_steps}"
            )));
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
            )));
        }
        if !(rho >= 1.0 && rho.is_finite()) {
            return Err(Error::invalid(format!("rho must be >= 1, got {rho}")));
        }
        let (a, b) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
        let last = (n_steps - 1) as f64;
        let mut ladder: Vec<f64> = (0..n_steps)
            .map(|i| (a + (i as f64 / last) * (b - a)).powf(rho))
            .collect();
        ladder[0] = sigma_max;
        ladder[n_steps - 1] = sigma_min;
        ladder.push(0.0);
        Ok(Self {
            n_steps,
            sigma_min,
            sigma_max,
            rho,
            ladder,
        })
    }

    /// 32 steps from 5 down to 0.002 with ρ = 7.
    pub fn edm_default() -> Self {
        Self::new(32, 0.002, 5.0, 7.0).expect("valid defaults")
    }

    /// Denoiser evaluations per sample: two per step, one for the final Euler step.
    pub fn nfe(&self) -> usize {
        2 * self.n_steps - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryStep {
    pub sigma: f64,
    pub x: Vec2,
    pub denoised: Vec2,
    pub d: Vec2,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryRecord {
    pub steps: Vec<TrajectoryStep>,
    pub final_x: Vec2,
}

impl TrajectoryRecord {
    /// The `N + 1` visited states, ending at the sample.
    pub fn states(&self) -> Vec<Vec2> {
        let mut s: Vec<Vec2> = self.steps.iter().map(|t| t.x).collect();
        s.push(self.final_x);
        s
    }
}

/// Integrates a batch of starting points from `σ_max` to 0. The streams (one
/// per point) are handed to the denoiser at every evaluation.
pub fn heun_batch(
    denoiser: &dyn Denoiser,
    schedule: &SigmaSchedule,
    class: usize,
    x_init: &[Vec2],
    streams: &mut [ChaCha8Rng],
    record: bool,
) -> Result<(Vec<Vec2>, Option<Vec<TrajectoryRecord>>)> {
    let mut xs = x_init.to_vec();
    if xs.iter().any(|x| !(x.x.is_finite() && x.y.is_finite())) {
        return Err(Error::invalid("initial sampler state is not finite"));
    }
    let mut records = record.then(|| vec![TrajectoryRecord::default(); xs.len()]);
    for i in 0..schedule.n_steps {
        let (s0, s1) = (schedule.ladder[i], schedule.ladder[i + 1]);
        let den = denoiser.denoise_batch(&xs, s0, class, streams)?;
        let d: Vec<Vec2> = xs.iter().zip(&den).map(|(x, dn)| (x - dn) / s0).collect();
        if let Some(recs) = records.as_mut() {
            for (j, r) in recs.iter_mut().enumerate() {
                r.steps.push(TrajectoryStep {
                    sigma: s0,
                    x: xs[j],
                    denoised: den[j],
                    d: d[j],
                });
            }
        }
        let h = s1 - s0;
        let euler: Vec<Vec2> = xs.iter().zip(&d).map(|(x, d)| x + d * h).collect();
        if s1 > 0.0 {
            let den2 = denoiser.denoise_batch(&euler, s1, class, streams)?;
            for j in 0..xs.len() {
                let d2 = (euler[j] - den2[j]) / s1;
                xs[j] += (d[j] + d2) * (0.5 * h);
            }
        } else {
            xs = euler;
        }
        if xs.iter().any(|x| !(x.x.is_finite() && x.y.is_finite())) {
            return Err(Error::NonFiniteState { step: i, sigma: s1 });
        }
    }
    if let Some(recs) = records.as_mut() {
        for (r, x) in recs.iter_mut().zip(&xs) {
            r.final_x = *x;
        }
    }
    Ok((xs, records))
}

/// Single-trajectory convenience wrapper around [`heun_batch`].
pub fn heun_sample(
    denoiser: &dyn Denoiser,
    schedule: &SigmaSchedule,
    class: usize,
    x_init: Vec2,
    stream: &mut ChaCha8Rng,
    record: bool,
) -> Result<(Vec2, Option<TrajectoryRecord>)> {
    let (xs, recs) = heun_batch(
        denoiser,
        schedule,
        class,
        &[x_init],
        std::slice::from_mut(stream),
        record,
    )?;
    Ok((xs[0], recs.map(|mut r| r.remove(0))))
}

/// Draws the starting point of sample `i` from its own stream.
pub fn initial_point(schedule: &SigmaSchedule, stream: &mut ChaCha8Rng) -> Vec2 {
    let x: f64 = StandardNormal.sample(stream);
    let y: f64 = StandardNormal.sample(stream);
    Vec2::new(x, y) * schedule.sigma_max
}

/// Samples `count` points of one class. Sample `i` uses RNG stream `i` of
/// `seed` for its starting point and for any randomness inside the denoiser,
/// so the result does not depend on batching or thread count.
pub fn sample_population(
    denoiser: &dyn Denoiser,
    schedule: &SigmaSchedule,
    class: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec2>> {
    Ok(sample_range(denoiser, schedule, class, 0..count, seed, false)?.0)
}

/// Like [`sample_population`] for sample ids in `range`, optionally recording
/// the trajectories.
pub fn sample_range(
    denoiser: &dyn Denoiser,
    schedule: &SigmaSchedule,
    class: usize,
    range: std::ops::Range<usize>,
    seed: u64,
    record: bool,
) -> Result<(Vec<Vec2>, Vec<TrajectoryRecord>)> {
    let starts: Vec<usize> = range.clone().step_by(POPULATION_CHUNK).collect();
    let parts: Vec<Result<(Vec<Vec2>, Option<Vec<TrajectoryRecord>>)>> = starts
        .par_iter()
        .map(|&first| {
            let n = POPULATION_CHUNK.min(range.end - first);
            let mut streams = point_streams(seed, first, n);
            let init: Vec<Vec2> = streams
                .iter_mut()
                .map(|s| initial_point(schedule, s))
                .collect();
            heun_batch(denoiser, schedule, class, &init, &mut streams, record)
        })
        .collect();
    let mut out = Vec::with_capacity(range.len());
    let mut recs = Vec::new();
    for p in parts {
        let (xs, r) = p?;
        out.extend(xs);
        recs.extend(r.unwrap_or_default());
    }
    Ok((out, recs))
}

/// Seed of class `class`'s population within a run seeded by `seed`.
pub fn class_seed(seed: u64, class: usize) -> u64 {
    seed ^ (class as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// `per_class` samples for each listed class.
pub fn sample_classes(
    denoiser: &dyn Denoiser,
    schedule: &SigmaSchedule,
    classes: &[usize],
    per_class: usize,
    seed: u64,
) -> Result<Vec<(usize, Vec<Vec2>)>> {
    classes
        .iter()
        .map(|&c| {
            Ok((
                c,
                sample_population(denoiser, schedule, c, per_class, class_seed(seed, c))?,
            ))
        })
        .collect()
}

/// Writes `sample_id,class,x,y` rows.
pub fn write_population_csv(path: &Path, populations: &[(usize, Vec<Vec2>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["sample_id", "class", "x", "y"])
        .map_err(|e| csv_error(path, e))?;
    for (class, pts) in populations {
        for (i, p) in pts.iter().enumerate() {
            w.write_record([
                i.to_string(),
                class.to_string(),
                p.x.to_string(),
                p.y.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_population_csv`], grouped by class in
/// first-seen order.
pub fn read_population_csv(path: &Path) -> Result<Vec<(usize, Vec<Vec2>)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out: Vec<(usize, Vec<Vec2>)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| Error::Format {
                what: "population csv",
                detail: format!("short row {rec:?}"),
            })
        };
        let bad = |e: String| Error::Format {
            what: "population csv",
            detail: e,
        };
        let class: usize = field(1)?.parse().map_err(|e| bad(format!("{e}")))?;
        let x: f64 = field(2)?.parse().map_err(|e| bad(format!("{e}")))?;
        let y: f64 = field(3)?.parse().map_err(|e| bad(format!("{e}")))?;
        match out.iter_mut().find(|(c, _)| *c == class) {
            Some((_, v)) => v.push(Vec2::new(x, y)),
            None => out.push((class, vec![Vec2::new(x, y)])),
        }
    }
    Ok(out)
}

/// Writes `sample_id,step,sigma,x,y` rows; the final state has `sigma = 0`.
pub fn write_trajectories_csv(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["sample_id", "step", "sigma", "x", "y"])
        .map_err(|e| csv_error(path, e))?;
    for (id, r) in records.iter().enumerate() {
        let rows = r
            .steps
            .iter()
            .map(|s| (s.sigma, s.x))
            .chain(std::iter::once((0.0, r.final_x)));
        for (k, (sigma, x)) in rows.enumerate() {
            w.write_record([
                id.to_string(),
                k.to_string(),
                sigma.to_string(),
                x.x.to_string(),
                x.y.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            what: "csv",
            detail: format!("{}: {other:?}", path.display()),
        },
    }
}
