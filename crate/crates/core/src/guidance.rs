//! Combining a main denoiser with one or two guiding denoisers.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::netmodel::{Head, Model};
use crate::{Error, Result, Vec2};

pub const DEFAULT_TRUNCATION_FACTOR: f64 = 1.40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    Cfg,
    Autoguidance,
    NaiveTruncation,
    Multi,
}

impl GuidanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::Cfg => "cfg",
            GuidanceMode::Autoguidance => "autoguidance",
            GuidanceMode::NaiveTruncation => "naive_truncation",
            GuidanceMode::Multi => "multi",
        }
    }

    /// Guide models the mode consumes.
    pub fn guides_needed(self) -> usize {
        match self {
            GuidanceMode::None | GuidanceMode::NaiveTruncation => 0,
            GuidanceMode::Cfg | GuidanceMode::Autoguidance => 1,
            GuidanceMode::Multi => 2,
        }
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => GuidanceMode::None,
            "cfg" => GuidanceMode::Cfg,
            "autoguidance" => GuidanceMode::Autoguidance,
            "naive_truncation" | "naive" => GuidanceMode::NaiveTruncation,
            "multi" => GuidanceMode::Multi,
            other => return Err(Error::invalid(format!("unknown guidance mode `{other}`"))),
        })
    }
}

/// Guidance settings, independent of the models they are applied to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub mode: GuidanceMode,
    pub weight: f64,
    /// Share of the extrapolation given to the reduced-capacity guide in
    /// `multi` mode; 0 is pure CFG, 1 pure autoguidance.
    pub blend_alpha: f64,
    pub truncation_factor: f64,
    /// Guidance is active for `σ ∈ (lo, hi]`.
    pub interval: Option<(f64, f64)>,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::None,
            weight: 1.0,
            blend_alpha: 0.0,
            truncation_factor: DEFAULT_TRUNCATION_FACTOR,
            interval: None,
        }
    }
}

impl GuidanceSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn cfg(weight: f64) -> Self {
        Self {
            mode: GuidanceMode::Cfg,
            weight,
            ..Self::default()
        }
    }

    pub fn autoguidance(weight: f64) -> Self {
        Self {
            mode: GuidanceMode::Autoguidance,
            weight,
            ..Self::default()
        }
    }

    pub fn naive_truncation(factor: f64) -> Self {
        Self {
            mode: GuidanceMode::NaiveTruncation,
            truncation_factor: factor,
            ..Self::default()
        }
    }

    pub fn multi(weight: f64, blend_alpha: f64) -> Self {
        Self {
            mode: GuidanceMode::Multi,
            weight,
            blend_alpha,
            ..Self::default()
        }
    }

    pub fn with_interval(mut self, lo: f64, hi: f64) -> Self {
        self.interval = Some((lo, hi));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.weight.is_finite() {
            return Err(Error::invalid("guidance weight must be finite"));
        }
        if !(0.0..=1.0).contains(&self.blend_alpha) {
            return Err(Error::invalid(format!(
                "blend alpha must lie in [0, 1], got {}",
                self.blend_alpha
            )));
        }
        if !self.truncation_factor.is_finite() {
            return Err(Error::invalid("truncation factor must be finite"));
        }
        if let Some((lo, hi)) = self.interval {
            if !(lo >= 0.0 && lo < hi) {
                return Err(Error::invalid(format!(
                    "bad guidance interval ({lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn active_at(&self, sigma: f64) -> bool {
        match self.interval {
            Some((lo, hi)) => sigma > lo && sigma <= hi,
            None => true,
        }
    }

    /// Per-guide extrapolation weights `w_i` in
    /// `D = D_main + Σ (w_i − 1)(D_main − D_i)`.
    pub fn guide_weights(&self) -> Vec<f64> {
        match self.mode {
            GuidanceMode::None | GuidanceMode::NaiveTruncation => vec![],
            GuidanceMode::Cfg | GuidanceMode::Autoguidance => vec![self.weight],
            GuidanceMode::Multi => {
                let e = self.weight - 1.0;
                vec![
                    (1.0 - self.blend_alpha) * e + 1.0,
                    self.blend_alpha * e + 1.0,
                ]
            }
        }
    }
}

/// A main denoiser combined with its guides according to a [`GuidanceSpec`].
///
/// For `multi`, `guides[0]` is the unconditional model and `guides[1]` the
/// reduced-capacity conditional model.
pub struct Guided<'a> {
    spec: GuidanceSpec,
    main: &'a dyn Denoiser,
    guides: Vec<&'a dyn Denoiser>,
}

impl<'a> Guided<'a> {
    pub fn new(
        spec: GuidanceSpec,
        main: &'a dyn Denoiser,
        guides: Vec<&'a dyn Denoiser>,
    ) -> Result<Self> {
        spec.validate()?;
        let needed = spec.mode.guides_needed();
        if guides.len() < needed {
            return Err(Error::MissingGuide {
                mode: spec.mode.as_str(),
                needed,
                got: guides.len(),
            });
        }
        Ok(Self { spec, main, guides })
    }

    pub fn spec(&self) -> &GuidanceSpec {
        &self.spec
    }

    fn is_plain(&self, sigma: f64) -> bool {
        self.spec.mode == GuidanceMode::None || !self.spec.active_at(sigma)
    }

    /// Evaluates main and guides in a fixed order, either as denoised points or
    /// as scores.
    fn combine(
        &self,
        xs: &[Vec2],
        sigma: f64,
        class: usize,
        streams: &mut [ChaCha8Rng],
        scores: bool,
    ) -> Result<Vec<Vec2>> {
        let eval = |d: &dyn Denoiser, streams: &mut [ChaCha8Rng]| {
            if scores {
                d.score_batch(xs, sigma, class, streams)
            } else {
                d.denoise_batch(xs, sigma, class, streams)
            }
        };
        if self.spec.mode == GuidanceMode::NaiveTruncation && !self.is_plain(sigma) {
            let f = self.spec.truncation_factor;
            let s = self.main.score_batch(xs, sigma, class, streams)?;
            let s2 = sigma * sigma;
            return Ok(if scores {
                s.iter().map(|s| s * f).collect()
            } else {
                xs.iter().zip(s).map(|(x, s)| x + s * f * s2).collect()
            });
        }
        let main = eval(self.main, streams)?;
        if self.is_plain(sigma) {
            return Ok(main);
        }
        match self.spec.mode {
            GuidanceMode::None | GuidanceMode::NaiveTruncation => unreachable!(),
            GuidanceMode::Cfg | GuidanceMode::Autoguidance => {
                let w = self.spec.weight;
                let g = eval(self.guides[0], streams)?;
                Ok(main
                    .iter()
                    .zip(g)
                    .map(|(m, g)| m * w + g * (1.0 - w))
                    .collect())
            }
            GuidanceMode::Multi => {
                let ws = self.spec.guide_weights();
                let mut out = main.clone();
                for (guide, w) in self.guides.iter().zip(ws) {
                    let g = eval(*guide, streams)?;
                    for ((o, m), g) in out.iter_mut().zip(&main).zip(g) {
                        *o += (m - g) * (w - 1.0);
                    }
                }
                Ok(out)
            }
        }
    }
}

impl Denoiser for Guided<'_> {
    fn denoise_batch(
        &self,
        xs: &[Vec2],
        sigma: f64,
        class: usize,
        streams: &mut [ChaCha8Rng],
    ) -> Result<Vec<Vec2>> {
        self.combine(xs, sigma, class, streams, false)
    }

    fn score_batch(
        &self,
        xs: &[Vec2],
        sigma: f64,
        class: usize,
        streams: &mut [ChaCha8Rng],
    ) -> Result<Vec<Vec2>> {
        self.combine(xs, sigma, class, streams, true)
    }
}

/// `log p_main − log p_guide` (up to a constant) and its gradient on a set of
/// points.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRatioField {
    /// `None` when either model has no energy head.
    pub values: Option<Vec<f64>>,
    pub gradients: Vec<Vec2>,
}

pub fn log_ratio_field(
    main: &Model,
    guide: &Model,
    points: &[Vec2],
    sigma: f64,
    class: usize,
) -> Result<LogRatioField> {
    let sm = main.scores(points, sigma, class)?;
    let sg = guide.scores(points, sigma, class)?;
    let gradients = sm.iter().zip(&sg).map(|(a, b)| a - b).collect();
    let values = if main.arch().head == Head::Energy && guide.arch().head == Head::Energy {
        let em = main.energies(points, sigma, class)?;
        let eg = guide.energies(points, sigma, class)?;
        Some(em.iter().zip(&eg).map(|(a, b)| a - b).collect())
    } else {
        None
    };
    Ok(LogRatioField { values, gradients })
}

/// Like [`log_ratio_field`] but insists on the scalar field.
pub fn log_ratio_values(
    main: &Model,
    guide: &Model,
    points: &[Vec2],
    sigma: f64,
    class: usize,
) -> Result<Vec<f64>> {
    log_ratio_field(main, guide, points, sigma, class)?
        .values
        .ok_or_else(|| Error::invalid("log-ratio scalar field needs energy-head models"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{point_streams, MixtureOracle};
    use crate::mixture::{MixtureComponent, MixtureSpec};
    use crate::netmodel::ArchDescriptor;

    struct Constant(Vec2);

    impl Denoiser for Constant {
        fn denoise_batch(
            &self,
            xs: &[Vec2],
            _: f64,
            _: usize,
            _: &mut [ChaCha8Rng],
        ) -> Result<Vec<Vec2>> {
            Ok(vec![self.0; xs.len()])
        }
    }

    fn one(d: &dyn Denoiser, x: Vec2, sigma: f64) -> Vec2 {
        d.denoise_batch(&[x], sigma, 0, &mut point_streams(0, 0, 1))
            .unwrap()[0]
    }

    #[test]
    fn eq3_arithmetic() {
        let (a, b) = (Constant(Vec2::new(1.0, 0.0)), Constant(Vec2::zeros()));
        let g = Guided::new(GuidanceSpec::cfg(2.0), &a, vec![&b]).unwrap();
        assert_eq!(one(&g, Vec2::new(0.3, 0.3), 0.5), Vec2::new(2.0, 0.0));
    }

    #[test]
    fn endpoints_recover_models() {
        let (a, b) = (
            Constant(Vec2::new(0.7, -0.1)),
            Constant(Vec2::new(-0.3, 0.9)),
        );
        for mode in [GuidanceSpec::cfg(1.0), GuidanceSpec::autoguidance(1.0)] {
            let g = Guided::new(mode, &a, vec![&b]).unwrap();
            assert_eq!(one(&g, Vec2::zeros(), 0.3), a.0);
        }
        let g = Guided::new(GuidanceSpec::autoguidance(0.0), &a, vec![&b]).unwrap();
        assert_eq!(one(&g, Vec2::zeros(), 0.3), b.0);
    }

    #[test]
    fn interval_masks_guidance() {
        let (a, b) = (Constant(Vec2::new(1.0, 0.0)), Constant(Vec2::zeros()));
        let g = Guided::new(
            GuidanceSpec::cfg(3.0).with_interval(0.19, 5.0),
            &a,
            vec![&b],
        )
        .unwrap();
        assert_eq!(one(&g, Vec2::zeros(), 0.1), a.0);
        assert_eq!(one(&g, Vec2::zeros(), 0.19), a.0);
        assert_eq!(one(&g, Vec2::zeros(), 5.0), Vec2::new(3.0, 0.0));
        assert_eq!(one(&g, Vec2::zeros(), 5.01), a.0);
    }

    #[test]
    fn missing_guides_are_reported() {
        let a = Constant(Vec2::zeros());
        let err = Guided::new(GuidanceSpec::multi(2.0, 0.5), &a, vec![&a])
            .err()
            .unwrap();
        assert!(matches!(
            err,
            Error::MissingGuide {
                needed: 2,
                got: 1,
                ..
            }
        ));
        assert!(Guided::new(GuidanceSpec::cfg(2.0), &a, vec![]).is_err());
        assert!(Guided::new(GuidanceSpec::naive_truncation(1.4), &a, vec![]).is_ok());
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(GuidanceSpec::multi(2.0, 1.5).validate().is_err());
        assert!(GuidanceSpec::cfg(2.0)
            .with_interval(1.0, 1.0)
            .validate()
            .is_err());
        assert!(GuidanceSpec::cfg(f64::NAN).validate().is_err());
    }

    #[test]
    fn naive_truncation_scales_score() {
        let spec =
            MixtureSpec::single_class(vec![MixtureComponent::isotropic(1.0, Vec2::zeros(), 0.25)])
                .unwrap();
        let o = MixtureOracle::conditional(&spec);
        let g = Guided::new(GuidanceSpec::naive_truncation(1.4), &o, vec![]).unwrap();
        let sigma = 0.75f64.sqrt();
        let x = Vec2::new(1.0, 0.0);
        // score −x, scaled to −1.4x.
        assert!((one(&g, x, sigma) - (x + x * (-1.4 * 0.75))).norm() < 1e-12);
        let s = g
            .score_batch(&[x], sigma, 0, &mut point_streams(0, 0, 1))
            .unwrap()[0];
        assert!((s - Vec2::new(-1.4, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [
            GuidanceMode::None,
            GuidanceMode::Cfg,
            GuidanceMode::Autoguidance,
            GuidanceMode::NaiveTruncation,
            GuidanceMode::Multi,
        ] {
            assert_eq!(m.as_str().parse::<GuidanceMode>().unwrap(), m);
        }
    }

    #[test]
    fn ratio_of_init_models_vanishes() {
        let a = Model::init(ArchDescriptor::conditional(16).unwrap(), 1);
        let b = Model::init(ArchDescriptor::conditional(64).unwrap(), 2);
        let pts = [Vec2::new(0.3, -0.2), Vec2::new(-1.0, 1.5)];
        let f = log_ratio_field(&a, &b, &pts, 0.2, 1).unwrap();
        assert!(f.values.unwrap().iter().all(|v| v.abs() < 1e-12));
        assert!(f.gradients.iter().all(|g| g.norm() < 1e-12));
    }

    #[test]
    fn ratio_scalar_needs_energy_heads() {
        let a = Model::init(ArchDescriptor::new(16, Head::DirectScore, 2).unwrap(), 1);
        let b = Model::init(ArchDescriptor::conditional(16).unwrap(), 2);
        let f = log_ratio_field(&a, &b, &[Vec2::zeros()], 0.2, 0).unwrap();
        assert!(f.values.is_none());
        assert!(log_ratio_values(&a, &b, &[Vec2::zeros()], 0.2, 0).is_err());
    }
}
