//! The batched denoiser abstraction shared by guidance, sampling and the
//! corruption wrappers.
//!
//! Every query carries one RNG stream per point. Deterministic denoisers
//! ignore them; stochastic wrappers draw only from the stream belonging to the
//! point they perturb, which keeps populations independent of batch layout.

use rand_chacha::ChaCha8Rng;

use crate::mixture::MixtureSpec;
use crate::netmodel::Model;
use crate::{Error, Result, Vec2};

pub trait Denoiser: Sync {
    /// Denoised estimates `D(x; σ, c)` for a batch sharing one noise level.
    fn denoise_batch(
        &self,
        xs: &[Vec2],
        sigma: f64,
        class: usize,
        streams: &mut [ChaCha8Rng],
    ) -> Result<Vec<Vec2>>;

    /// Scores `(D − x)/σ²`. Implementors with a direct score override this to
    /// avoid the cancellation.
    fn score_batch(
        &self,
        xs: &[Vec2],
        sigma: f64,
        class: usize,
        streams: &mut [ChaCha8Rng],
    ) -> Result<Vec<Vec2>> {
        let d = self.denoise_batch(xs, sigma, class, streams)?;
        let s2 = sigma * sigma;
        Ok(xs.iter().zip(d).map(|(x, d)| (d - x) / s2).collect())
    }

    fn denoise(&self, x: Vec2, sigma: f64, class: usize, stream: &mut ChaCha8Rng) -> Result<Vec2> {
        Ok(self.denoise_batch(&[x], sigma, class, std::slice::from_mut(stream))?[0])
    }
}

pub(crate) fn check_streams(xs: &[Vec2], streams: &[ChaCha8Rng]) -> Result<()> {
    if xs.len() != streams.len() {
        return Err(Error::invalid(format!(
            "{} points but {} rng streams",
            xs.len(),
            streams.len()
        )));
    }
    Ok(())
}

impl Denoiser for Model {
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
        _streams: &mut [ChaCha8Rng],
    ) -> Result<Vec<Vec2>> {
        self.scores(xs, sigma, class)
    }
}

/// The ideal denoiser of the ground-truth mixture.
#[derive(Debug, Clone, Copy)]
pub struct MixtureOracle<'a> {
    spec: &'a MixtureSpec,
    marginal: bool,
}

impl<'a> MixtureOracle<'a> {
    /// Uses the queried class.
    pub fn conditional(spec: &'a MixtureSpec) -> Self {
        Self {
            spec,
            marginal: false,
        }
    }

    /// Ignores the queried class and uses the class-marginal mixture.
    pub fn marginal(spec: &'a MixtureSpec) -> Self {
        Self {
            spec,
            marginal: true,
        }
    }

    fn class(&self, class: usize) -> Result<Option<usize>> {
        if self.marginal {
            return Ok(None);
        }
        if class >= self.spec.class_count() {
            return Err(Error::invalid(format!("class {class} out of range")));
        }
        Ok(Some(class))
    }
}

impl Denoiser for MixtureOracle<'_> {
    fn denoise_batch(
        &self,
        xs: &[Vec2],
        sigma: f64,
        class: usize,
        _streams: &mut [ChaCha8Rng],
    ) -> Result<Vec<Vec2>> {
        let c = self.class(class)?;
        Ok(xs
            .iter()
            .map(|&x| self.spec.oracle_denoise(c, x, sigma))
            .collect())
    }

    fn score_batch(
        &self,
        xs: &[Vec2],
        sigma: f64,
        class: usize,
        _streams: &mut [ChaCha8Rng],
    ) -> Result<Vec<Vec2>> {
        let c = self.class(class)?;
        Ok(xs.iter().map(|&x| self.spec.score(c, x, sigma)).collect())
    }
}

/// Per-point RNG streams for points `first..first + count` of a run.
pub fn point_streams(seed: u64, first: usize, count: usize) -> Vec<ChaCha8Rng> {
    use rand::SeedableRng;
    (first..first + count)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r
        })
        .collect()
}
