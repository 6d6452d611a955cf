//! Post-hoc corruptions of a trained denoiser, and the experiment that guides
//! one corrupted copy with another.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{check_streams, Denoiser};
use crate::evalmetrics::MetricReport;
use crate::guidance::{GuidanceSpec, Guided};
use crate::mixture::MixtureSpec;
use crate::netmodel::Model;
use crate::sampler::{csv_error, sample_classes, SigmaSchedule};
use crate::{Error, Result, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Dropout,
    InputNoise,
}

impl CorruptionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::Dropout => "dropout",
            CorruptionKind::InputNoise => "input_noise",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dropout" => Ok(CorruptionKind::Dropout),
            "input_noise" | "noise" => Ok(CorruptionKind::InputNoise),
            other => Err(Error::invalid(format!("unknown corruption `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// Dropout rate, or relative noise-level increase δ.
    pub strength: f64,
    /// Seeds the mask in frozen-dropout mode; otherwise unused.
    pub seed: u64,
    /// Draw one dropout mask up front instead of one per evaluation.
    pub frozen: bool,
}

impl CorruptionSpec {
    pub fn dropout(rate: f64) -> Self {
        Self {
            kind: CorruptionKind::Dropout,
            strength: rate,
            seed: 0,
            frozen: false,
        }
    }

    pub fn input_noise(delta: f64) -> Self {
        Self {
            kind: CorruptionKind::InputNoise,
            strength: delta,
            seed: 0,
            frozen: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            CorruptionKind::Dropout => (0.0..1.0).contains(&self.strength),
            CorruptionKind::InputNoise => self.strength >= 0.0 && self.strength.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "bad {} strength {}",
                self.kind, self.strength
            )))
        }
    }

    /// Wraps `model` with this corruption.
    pub fn apply<'a>(&self, model: &'a Model) -> Result<Box<dyn Denoiser + 'a>> {
        self.validate()?;
        Ok(match self.kind {
            CorruptionKind::Dropout if self.frozen => {
                Box::new(Dropout::frozen(model, self.strength, self.seed)?)
            }
            CorruptionKind::Dropout => Box::new(Dropout::new(model, self.strength)?),
            CorruptionKind::InputNoise => Box::new(InputNoise::new(model, self.strength)?),
        })
    }
}

/// Zeroes each hidden activation with probability `rate` and rescales the
/// survivors by `1/(1 − rate)`.
pub struct Dropout<'a> {
    model: &'a Model,
    rate: f64,
    /// One `(width × 1)` column per activation site, shared by every query.
    frozen: Option<Vec<Array2<f64>>>,
}

impl<'a> Dropout<'a> {
    /// Fresh masks per evaluation, drawn from each point's stream.
    pub fn new(model: &'a Model, rate: f64) -> Result<Self> {
        CorruptionSpec::dropout(rate).validate()?;
        Ok(Self {
            model,
            rate,
            frozen: None,
        })
    }

    /// One mask drawn from `seed` and reused for every query.
    pub fn frozen(model: &'a Model, rate: f64, seed: u64) -> Result<Self> {
        let mut d = Self::new(model, rate)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = model.hidden_width();
        d.frozen = Some(
            (0..model.activation_sites())
                .map(|_| Array2::from_shape_fn((width, 1), |_| keep(rate, &mut rng)))
                .collect(),
        );
        Ok(d)
    }

    fn masks(&self, streams: &mut [ChaCha8Rng]) -> Vec<Array2<f64>> {
        let width = self.model.hidden_width();
        let sites = self.model.activation_sites();
        let n = streams.len();
        if let Some(f) = &self.frozen {
            return f
                .iter()
                .map(|m| Array2::from_shape_fn((width, n), |(r, _)| m[(r, 0)]))
                .collect();
        }
        let mut masks = vec![Array2::zeros((width, n)); sites];
        for (j, rng) in streams.iter_mut().enumerate() {
            for m in masks.iter_mut() {
                for r in 0..width {
                    m[(r, j)] = keep(self.rate, rng);
                }
            }
        }
        masks
    }
}

fn keep<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    if rng.random::<f64>() < rate {
        0.0
    } else {
        1.0 / (1.0 - rate)
    }
}

impl Denoiser for Dropout<'_> {
    fn denoise_batch(
        &self,
        xs: &[Vec2],
        sigma: f64,
        class: usize,
        streams: &mut [ChaCha8Rng],
    ) -> Result<Vec<Vec2>> {
        let s = self.score_batch(xs, sigma, class, streams)?;
        Ok(xs
            .iter()
            .zip(s)
            .map(|(x, s)| x + s * (sigma * sigma))
            .collect())
    }

    fn score_batch(
        &self,
        xs: &[Vec2],
        sigma: f64,
        class: usize,
        streams: &mut [ChaCha8Rng],
    ) -> Result<Vec<Vec2>> {
        check_streams(xs, streams)?;
        if self.rate == 0.0 {
            return self.model.scores(xs, sigma, class);
        }
        let masks = self.masks(streams);
        let sigmas = vec![sigma; xs.len()];
        let classes = vec![class; xs.len()];
        Ok(self
            .model
            .eval_batch(xs, &sigmas, &classes, Some(&masks))?
            .into_iter()
            .map(|e| e.score)
            .collect())
    }
}

/// Evaluates the base denoiser at a noisier input: `x + n` with
/// `n ~ N(0, (σ'² − σ²)I)` at `σ' = (1 + δ)σ`. The output is the base
/// denoiser's estimate, returned as is.
pub struct InputNoise<'a> {
    base: &'a dyn Denoiser,
    delta: f64,
}

impl<'a> InputNoise<'a> {
    pub fn new(base: &'a dyn Denoiser, delta: f64) -> Result<Self> {
        CorruptionSpec::input_noise(delta).validate()?;
        Ok(Self { base, delta })
    }
}

impl Denoiser for InputNoise<'_> {
    fn denoise_batch(
        &self,
        xs: &[Vec2],
        sigma: f64,
        class: usize,
        streams: &mut [ChaCha8Rng],
    ) -> Result<Vec<Vec2>> {
        check_streams(xs, streams)?;
        if self.delta == 0.0 {
            return self.base.denoise_batch(xs, sigma, class, streams);
        }
        let raised = (1.0 + self.delta) * sigma;
        let extra = (raised * raised - sigma * sigma).sqrt();
        let noisy: Vec<Vec2> = xs
            .iter()
            .zip(streams.iter_mut())
            .map(|(x, rng)| {
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                x + Vec2::new(nx, ny) * extra
            })
            .collect();
        self.base.denoise_batch(&noisy, raised, class, streams)
    }

    fn score_batch(
        &self,
        xs: &[Vec2],
        sigma: f64,
        class: usize,
        streams: &mut [ChaCha8Rng],
    ) -> Result<Vec<Vec2>> {
        if self.delta == 0.0 {
            check_streams(xs, streams)?;
            return self.base.score_batch(xs, sigma, class, streams);
        }
        let d = self.denoise_batch(xs, sigma, class, streams)?;
        let s2 = sigma * sigma;
        Ok(xs.iter().zip(d).map(|(x, d)| (d - x) / s2).collect())
    }
}

/// Evaluation settings shared by every point of a guidance-weight scan.
#[derive(Debug, Clone)]
pub struct ScanSetup<'a> {
    pub spec: &'a MixtureSpec,
    pub thresholds: &'a [f64],
    pub schedule: SigmaSchedule,
    pub per_class: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRow {
    pub w: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationResult {
    pub main: CorruptionSpec,
    pub guide: CorruptionSpec,
    pub rows: Vec<DegradationRow>,
    /// Weight with the lowest composite metric (first on ties).
    pub best_w: f64,
    pub best_metric: f64,
}

impl DegradationResult {
    /// Composite metric at `w`, if it was scanned.
    pub fn metric_at(&self, w: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.w == w)
            .map(|r| r.report.composite)
    }

    /// `1 − best/metric(w = 1)`: the relative gain from guidance.
    pub fn improvement(&self) -> Option<f64> {
        self.metric_at(1.0).map(|m1| 1.0 - self.best_metric / m1)
    }
}

/// Guides `main.apply(base)` with `guide.apply(base)` at every weight in
/// `w_grid` and reports the composite metric of each population. All weights
/// share the same sample seeds.
pub fn degradation_experiment(
    base: &Model,
    main: CorruptionSpec,
    guide: CorruptionSpec,
    w_grid: &[f64],
    setup: &ScanSetup<'_>,
) -> Result<DegradationResult> {
    if w_grid.is_empty() {
        return Err(Error::invalid("empty guidance-weight grid"));
    }
    let dm = main.apply(base)?;
    let dg = guide.apply(base)?;
    let classes: Vec<usize> = (0..base.arch().class_count.max(1)).collect();
    let mut rows = Vec::with_capacity(w_grid.len());
    for &w in w_grid {
        let guided = Guided::new(
            GuidanceSpec::autoguidance(w),
            dm.as_ref(),
            vec![dg.as_ref()],
        )?;
        let pops = sample_classes(
            &guided,
            &setup.schedule,
            &classes,
            setup.per_class,
            setup.seed,
        )?;
        let tag = format!(
            "{}:{}/{}:{}/w={w}",
            main.kind, main.strength, guide.kind, guide.strength
        );
        let report = MetricReport::evaluate_classes(&pops, setup.spec, setup.thresholds, tag)?;
        rows.push(DegradationRow { w, report });
    }
    let best = rows
        .iter()
        .min_by(|a, b| a.report.composite.total_cmp(&b.report.composite))
        .expect("nonempty grid");
    Ok(DegradationResult {
        main,
        guide,
        best_w: best.w,
        best_metric: best.report.composite,
        rows,
    })
}

/// Appends `kind_main,kind_guide,strength_main,strength_guide,w,metric` rows
/// (plus the metric components) for each result.
pub fn write_degradation_csv(path: &Path, results: &[DegradationResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record([
        "kind_main",
        "kind_guide",
        "strength_main",
        "strength_guide",
        "w",
        "metric",
        "outlier_fraction",
        "coverage",
        "grid_kl",
    ])
    .map_err(|e| csv_error(path, e))?;
    for r in results {
        for row in &r.rows {
            w.write_record([
                r.main.kind.to_string(),
                r.guide.kind.to_string(),
                r.main.strength.to_string(),
                r.guide.strength.to_string(),
                row.w.to_string(),
                row.report.composite.to_string(),
                row.report.outlier_fraction.to_string(),
                row.report.coverage.to_string(),
                row.report.grid_kl.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
