//! Score-matching training loop with log-normal noise levels, inverse-sqrt
//! learning-rate decay, Adam, and power-function EMA snapshots.

mod ema;

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{Checkpoint, RngState};
use crate::mixture::{ComponentSampler, MixtureSpec};
use crate::netmodel::{Model, ModelParams, ScoreTarget};
use crate::{Error, Result, Vec2};

pub use ema::{ema_beta, exponent_for_sigma_rel, profile_sigma_rel, EmaTracker};

/// EMA lengths tracked by default for every run.
pub const DEFAULT_EMA_SIGMA_RELS: [f64; 4] = [0.005, 0.010, 0.025, 0.050];

/// EMA length used when a single "trained" model is needed.
pub const PRIMARY_EMA_SIGMA_REL: f64 = 0.010;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Regress the analytic score of the smoothed mixture.
    ExactSm,
    /// Regress `-n/σ²` for `x = y + n` with clean `y`.
    DenoisingSm,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::ExactSm => "exact_sm",
            LossKind::DenoisingSm => "denoising_sm",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_sm" => Ok(LossKind::ExactSm),
            "denoising_sm" => Ok(LossKind::DenoisingSm),
            other => Err(Error::invalid(format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub p_mean: f64,
    pub p_std: f64,
    pub alpha_ref: f64,
    pub t_ref: u64,
    pub loss_kind: LossKind,
    pub ema_sigma_rels: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 4096,
            batch_size: 4096,
            p_mean: -2.3,
            p_std: 1.5,
            alpha_ref: 0.01,
            t_ref: 512,
            loss_kind: LossKind::ExactSm,
            ema_sigma_rels: DEFAULT_EMA_SIGMA_RELS.to_vec(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.p_std > 0.0) {
            return Err(Error::invalid("p_std must be positive"));
        }
        if !(self.alpha_ref > 0.0) {
            return Err(Error::invalid("alpha_ref must be positive"));
        }
        if self.t_ref == 0 {
            return Err(Error::invalid("t_ref must be positive"));
        }
        for &s in &self.ema_sigma_rels {
            exponent_for_sigma_rel(s)?;
        }
        Ok(())
    }
}

/// `σ = exp(P_mean + P_std·z)` with standard normal `z`.
pub fn sample_noise_level<R: Rng + ?Sized>(config: &TrainConfig, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (config.p_mean + config.p_std * z).exp()
}

/// `α_ref / √max(t / t_ref, 1)` for 1-based step `t`.
pub fn learning_rate(config: &TrainConfig, step: u64) -> f64 {
    let ratio = step as f64 / config.t_ref as f64;
    config.alpha_ref / ratio.max(1.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub emas: Vec<EmaTracker>,
    pub history: Vec<StepRecord>,
    pub rng: RngState,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            step: self.history.len() as u64,
            rng: self.rng,
            emas: self.emas.clone(),
        }
    }

    pub fn ema(&self, sigma_rel: f64) -> Option<&ModelParams> {
        self.emas
            .iter()
            .find(|e| (e.sigma_rel - sigma_rel).abs() < 1e-12)
            .map(|e| &e.averaged)
    }

    /// Mean loss over the last `window` steps.
    pub fn tail_loss(&self, window: usize) -> f64 {
        let n = window.min(self.history.len()).max(1);
        self.history
            .iter()
            .rev()
            .take(n)
            .map(|r| r.loss)
            .sum::<f64>()
            / n as f64
    }
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    m_gain: f64,
    v_gain: f64,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        let zeros = || {
            params
                .layers
                .iter()
                .map(|l| Array2::zeros(l.raw_dim()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            m_gain: 0.0,
            v_gain: 0.0,
        }
    }

    fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &crate::netmodel::ParamGrads,
        lr: f64,
        t: u64,
    ) {
        let c1 = 1.0 - ADAM_BETA1.powf(t as f64);
        let c2 = 1.0 - ADAM_BETA2.powf(t as f64);
        for ((w, g), (m, v)) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(w)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                });
        }
        let g = grads.gain;
        self.m_gain = ADAM_BETA1 * self.m_gain + (1.0 - ADAM_BETA1) * g;
        self.v_gain = ADAM_BETA2 * self.v_gain + (1.0 - ADAM_BETA2) * g * g;
        params.gain -= lr * (self.m_gain / c1) / ((self.v_gain / c2).sqrt() + ADAM_EPS);
    }
}

/// Draws one training batch. Conditional models alternate classes within the
/// batch; unconditional models regress the class-marginal score.
pub fn draw_batch(
    spec: &MixtureSpec,
    config: &TrainConfig,
    class_count: usize,
    samplers: &[ComponentSampler<'_>],
    rng: &mut ChaCha8Rng,
) -> Vec<ScoreTarget> {
    (0..config.batch_size)
        .map(|i| {
            let sigma = sample_noise_level(config, rng);
            let (class, select) = if class_count > 0 {
                let c = i % class_count;
                (c, Some(c))
            } else {
                (0, None)
            };
            let sampler = &samplers[select.unwrap_or(samplers.len() - 1)];
            match config.loss_kind {
                LossKind::ExactSm => {
                    let x = sampler.draw(sigma, rng);
                    ScoreTarget::new(x, sigma, class, spec.score(select, x, sigma))
                }
                LossKind::DenoisingSm => {
                    let y = sampler.draw(0.0, rng);
                    let n =
                        Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * sigma;
                    ScoreTarget::new(y + n, sigma, class, -n / (sigma * sigma))
                }
            }
        })
        .collect()
}

/// Trains `params` against `spec`.
///
/// On a non-finite loss the last good state is written to `abort_checkpoint`
/// (when given) before the error is returned.
pub fn train(
    params: ModelParams,
    spec: &MixtureSpec,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    abort_checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let class_count = params.arch.class_count;
    if class_count > spec.class_count() {
        return Err(Error::invalid(format!(
            "model expects {class_count} classes, mixture has {}",
            spec.class_count()
        )));
    }
    let mut samplers: Vec<ComponentSampler<'_>> = (0..spec.class_count())
        .map(|c| ComponentSampler::new(spec, Some(c)))
        .collect();
    samplers.push(ComponentSampler::new(spec, None));

    let mut emas = config
        .ema_sigma_rels
        .iter()
        .map(|&s| EmaTracker::new(s, &params))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(&params);
    let mut model = Model::new(params);
    let mut history = Vec::with_capacity(config.iterations as usize);

    for step in 1..=config.iterations {
        let batch = draw_batch(spec, config, class_count, &samplers, rng);
        let (grads, loss) = match model.grad_params(&batch) {
            Ok(v) => v,
            Err(e) => {
                if let Some(path) = abort_checkpoint {
                    let ck = Checkpoint {
                        params: model.params().clone(),
                        step: step - 1,
                        rng: RngState::capture(rng),
                        emas: emas.clone(),
                    };
                    ck.write(path)?;
                }
                return Err(e);
            }
        };
        let lr = learning_rate(config, step);
        let mut params = model.into_params();
        adam.step(&mut params, &grads, lr, step);
        params.force_normalize();
        for ema in &mut emas {
            ema.update(&params, step);
        }
        model = Model::new(params);
        history.push(StepRecord { step, loss, lr });
    }

    Ok(TrainOutcome {
        params: model.into_params(),
        emas,
        history,
        rng: RngState::capture(rng),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::build_fractal;
    use crate::netmodel::ArchDescriptor;
    use rand::SeedableRng;

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::default();
        assert_eq!(learning_rate(&c, 512), 0.01);
        assert_eq!(learning_rate(&c, 2048), 0.005);
        assert_eq!(learning_rate(&c, 1), 0.01);
    }

    #[test]
    fn degenerate_noise_distribution() {
        let c = TrainConfig {
            p_std: 1e-300,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_noise_level(&c, &mut rng);
        assert!((s - (-2.3f64).exp()).abs() < 1e-12);
        assert!((s - 0.1003).abs() < 1e-4);
    }

    #[test]
    fn zero_iterations_returns_init() {
        let spec = build_fractal(0);
        let init = ModelParams::init(ArchDescriptor::conditional(16).unwrap(), 4);
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = train(init.clone(), &spec, &cfg, &mut rng, None).unwrap();
        assert_eq!(out.params, init);
        assert!(out.history.is_empty());
    }

    #[test]
    fn rejects_bad_config() {
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            p_std: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn short_run_reduces_loss_and_is_deterministic() {
        let spec = build_fractal(0);
        let init = ModelParams::init(ArchDescriptor::conditional(16).unwrap(), 0);
        let cfg = TrainConfig {
            iterations: 60,
            batch_size: 256,
            ..TrainConfig::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            train(init.clone(), &spec, &cfg, &mut rng, None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
        let first: f64 = a.history[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(a.tail_loss(10) < first, "{} !< {first}", a.tail_loss(10));
        assert_eq!(a.emas.len(), 4);
    }
}
