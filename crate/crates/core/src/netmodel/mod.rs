//! Learnable MLP denoiser with EDM-style preconditioning.
//!
//! The energy head outputs a scalar log-density
//! `G(x; σ, c) = -½‖x*‖² - g/(σn) · Σᵢ Fᵢ(x*, ¼ log σ, c)²` with
//! `x* = x / √(σ² + σ_data²)`. Its score is `∇ₓG` and its denoiser
//! `x + σ²∇ₓG`. Because the gain `g` starts at zero, a freshly initialized
//! model is exactly the score of `N(0, σ_data² I)` smoothed by `σ`.
//!
//! Linear layers normalize each weight row to unit length at application time,
//! so the raw weights are only meaningful up to a positive per-row scale.

pub(crate) mod mlp;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::mixture::SIGMA_DATA;
use crate::{Error, Result, Vec2};

pub use mlp::{mp_silu, MP_SILU_GAIN};

/// Samples per kernel invocation. Larger batches are processed in chunks of
/// this size and reduced in chunk order.
const CHUNK: usize = 512;

/// Output head of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Scalar energy; score by differentiation.
    Energy,
    /// Two-channel output reinterpreted as a preconditioned score.
    DirectScore,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Energy => "energy",
            Head::DirectScore => "direct_score",
        }
    }
}

impl std::str::FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy" => Ok(Head::Energy),
            "direct_score" | "direct-score" => Ok(Head::DirectScore),
            other => Err(Error::invalid(format!("unknown head `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub head: Head,
    /// Number of one-hot class inputs; 0 for an unconditional model.
    pub class_count: usize,
}

impl ArchDescriptor {
    pub const WIDTHS: [usize; 4] = [16, 32, 64, 128];

    pub fn new(hidden_width: usize, head: Head, class_count: usize) -> Result<Self> {
        let arch = Self {
            hidden_width,
            hidden_layers: 4,
            head,
            class_count,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Class-conditional energy model of the given width (two classes).
    pub fn conditional(hidden_width: usize) -> Result<Self> {
        Self::new(hidden_width, Head::Energy, 2)
    }

    pub fn unconditional(hidden_width: usize) -> Result<Self> {
        Self::new(hidden_width, Head::Energy, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if !Self::WIDTHS.contains(&self.hidden_width) {
            return Err(Error::invalid(format!(
                "hidden width {} not in {:?}",
                self.hidden_width,
                Self::WIDTHS
            )));
        }
        if self.hidden_layers == 0 {
            return Err(Error::invalid("need at least one hidden layer"));
        }
        Ok(())
    }

    /// `[x*_x, x*_y, ¼ log σ, 1]` plus the class one-hot.
    pub fn input_dim(&self) -> usize {
        4 + self.class_count
    }

    /// Shapes `(rows, cols)` of every linear layer in application order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let n = self.hidden_width;
        let mut shapes = vec![(n, self.input_dim())];
        shapes.extend(std::iter::repeat_n((n, n), self.hidden_layers));
        if self.head == Head::DirectScore {
            shapes.push((2, n));
        }
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(r, c)| r * c)
            .sum::<usize>()
            + 1
    }
}

/// All learnable state of one denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchDescriptor,
    /// Raw (unnormalized) weights, row-major `(out, in)`.
    pub layers: Vec<Array2<f64>>,
    pub gain: f64,
    pub sigma_data: f64,
}

impl ModelParams {
    /// Unit-variance Gaussian weights, zero gain.
    pub fn init(arch: ArchDescriptor, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(r, c)| Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(&mut rng)))
            .collect();
        Self {
            arch,
            layers,
            gain: 0.0,
            sigma_data: SIGMA_DATA,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            layers: self
                .layers
                .iter()
                .map(|l| Array2::zeros(l.raw_dim()))
                .collect(),
            gain: 0.0,
            sigma_data: self.sigma_data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gain.is_finite() && self.layers.iter().all(|l| l.iter().all(|v| v.is_finite()))
    }

    /// Rescales every raw row to norm `√fan_in`. Outputs are unchanged since
    /// rows are normalized at use time; this only keeps optimizer step sizes
    /// commensurate with the weights.
    pub fn force_normalize(&mut self) {
        for layer in &mut self.layers {
            let target = (layer.ncols() as f64).sqrt();
            for mut row in layer.rows_mut() {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.mapv_inplace(|v| v * (target / n));
                }
            }
        }
    }
}

/// Gradient with the same shape as `ModelParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Array2<f64>>,
    pub gain: f64,
}

impl ParamGrads {
    fn zeros(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Array2::zeros(l.raw_dim()))
                .collect(),
            gain: 0.0,
        }
    }

    fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            *a += b;
        }
        self.gain += other.gain;
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.iter())
            .fold(self.gain.abs(), |m, v| m.max(v.abs()))
    }
}

/// One exact-score-matching training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreTarget {
    pub x: Vec2,
    pub sigma: f64,
    pub class: usize,
    pub target: Vec2,
    /// Per-sample loss weight, `σ²` by default.
    pub weight: f64,
}

impl ScoreTarget {
    pub fn new(x: Vec2, sigma: f64, class: usize, target: Vec2) -> Self {
        Self {
            x,
            sigma,
            class,
            target,
            weight: sigma * sigma,
        }
    }
}

/// Per-sample outputs of one forward evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelEval {
    /// `None` for the direct-score head.
    pub energy: Option<f64>,
    pub score: Vec2,
}

/// Parameters plus the cached row-normalized weights used for evaluation.
#[derive(Debug, Clone)]
pub struct Model {
    params: ModelParams,
    weights: Vec<Array2<f64>>,
    norms: Vec<Vec<f64>>,
}

impl Model {
    pub fn new(params: ModelParams) -> Self {
        let (weights, norms) = params.layers.iter().map(mlp::normalize_rows).unzip();
        Self {
            params,
            weights,
            norms,
        }
    }

    pub fn init(arch: ArchDescriptor, seed: u64) -> Self {
        Self::new(ModelParams::init(arch, seed))
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn arch(&self) -> ArchDescriptor {
        self.params.arch
    }

    /// Number of activation sites that dropout can act on.
    pub fn activation_sites(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn hidden_width(&self) -> usize {
        self.params.arch.hidden_width
    }

    fn check_sigma(sigma: f64) -> Result<()> {
        if sigma > 0.0 && sigma.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "noise level must be positive, got {sigma}"
            )))
        }
    }

    fn check_class(&self, class: usize) -> Result<()> {
        let cc = self.params.arch.class_count;
        if cc > 0 && class >= cc {
            return Err(Error::invalid(format!(
                "class {class} out of range for {cc}-class model"
            )));
        }
        Ok(())
    }

    fn build_input(
        &self,
        xs: &[Vec2],
        sigmas: &[f64],
        classes: &[usize],
        tangents: bool,
    ) -> Array2<f64> {
        let b = xs.len();
        let arch = self.params.arch;
        let cols = if tangents { 3 * b } else { b };
        let mut u = Array2::zeros((arch.input_dim(), cols));
        for j in 0..b {
            let s =
                (sigmas[j] * sigmas[j] + self.params.sigma_data * self.params.sigma_data).sqrt();
            u[(0, j)] = xs[j].x / s;
            u[(1, j)] = xs[j].y / s;
            u[(2, j)] = 0.25 * sigmas[j].ln();
            u[(3, j)] = 1.0;
            if arch.class_count > 0 {
                u[(4 + classes[j], j)] = 1.0;
            }
            if tangents {
                u[(0, b + j)] = 1.0;
                u[(1, 2 * b + j)] = 1.0;
            }
        }
        u
    }

    fn run(
        &self,
        xs: &[Vec2],
        sigmas: &[f64],
        classes: &[usize],
        masks: Option<&mlp::Masks>,
    ) -> (mlp::Tape, Vec<ModelEval>) {
        let tangents = self.params.arch.head == Head::Energy;
        let b = xs.len();
        let input = self.build_input(xs, sigmas, classes, tangents);
        let tape = mlp::forward(&self.weights, input, b, tangents, masks);
        let out = tape.output();
        let n = self.params.arch.hidden_width as f64;
        let g = self.params.gain;
        let sd2 = self.params.sigma_data * self.params.sigma_data;
        let mut evals = Vec::with_capacity(b);
        match self.params.arch.head {
            Head::Energy => {
                let f = mlp::block(out, b, 0);
                let jx = mlp::block(out, b, 1);
                let jy = mlp::block(out, b, 2);
                for j in 0..b {
                    let sigma = sigmas[j];
                    let s2 = sigma * sigma + sd2;
                    let s = s2.sqrt();
                    let fj = f.column(j);
                    let sq: f64 = fj.iter().map(|v| v * v).sum();
                    let fx: f64 = fj.iter().zip(jx.column(j)).map(|(a, b)| a * b).sum();
                    let fy: f64 = fj.iter().zip(jy.column(j)).map(|(a, b)| a * b).sum();
                    let x = xs[j];
                    let energy = -0.5 * x.norm_squared() / s2 - g / (sigma * n) * sq;
                    let c = 2.0 * g / (sigma * n * s);
                    let score = -x / s2 - Vec2::new(fx, fy) * c;
                    evals.push(ModelEval {
                        energy: Some(energy),
                        score,
                    });
                }
            }
            Head::DirectScore => {
                for j in 0..b {
                    let sigma = sigmas[j];
                    let s2 = sigma * sigma + sd2;
                    let kappa = self.params.sigma_data / (s2.sqrt() * sigma);
                    let raw = Vec2::new(out[(0, j)], out[(1, j)]);
                    evals.push(ModelEval {
                        energy: None,
                        score: -xs[j] / s2 + raw * (g * kappa),
                    });
                }
            }
        }
        (tape, evals)
    }

    /// Evaluates a batch of queries. `masks`, if given, multiply the hidden
    /// activations (one `(width × len)` matrix per activation site).
    pub fn eval_batch(
        &self,
        xs: &[Vec2],
        sigmas: &[f64],
        classes: &[usize],
        masks: Option<&[Array2<f64>]>,
    ) -> Result<Vec<ModelEval>> {
        if xs.len() != sigmas.len() || xs.len() != classes.len() {
            return Err(Error::invalid("batch slices differ in length"));
        }
        for (&s, &c) in sigmas.iter().zip(classes) {
            Self::check_sigma(s)?;
            self.check_class(c)?;
        }
        let mut out = Vec::with_capacity(xs.len());
        for start in (0..xs.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(xs.len());
            let chunk_masks: Option<Vec<Array2<f64>>> = masks.map(|m| {
                m.iter()
                    .map(|a| a.slice(s![.., start..end]).to_owned())
                    .collect()
            });
            let (_, evals) = self.run(
                &xs[start..end],
                &sigmas[start..end],
                &classes[start..end],
                chunk_masks.as_deref(),
            );
            out.extend(evals);
        }
        Ok(out)
    }

    /// Scores for points sharing one noise level and class.
    pub fn scores(&self, xs: &[Vec2], sigma: f64, class: usize) -> Result<Vec<Vec2>> {
        let sigmas = vec![sigma; xs.len()];
        let classes = vec![class; xs.len()];
        Ok(self
            .eval_batch(xs, &sigmas, &classes, None)?
            .into_iter()
            .map(|e| e.score)
            .collect())
    }

    /// Energy `G(x; σ, c)`; rejected for the direct-score head.
    pub fn energy(&self, x: Vec2, sigma: f64, class: usize) -> Result<f64> {
        let e = self.eval_batch(&[x], &[sigma], &[class], None)?[0];
        e.energy
            .ok_or_else(|| Error::invalid("direct-score models do not define an energy"))
    }

    pub fn energies(&self, xs: &[Vec2], sigma: f64, class: usize) -> Result<Vec<f64>> {
        if self.params.arch.head != Head::Energy {
            return Err(Error::invalid(
                "direct-score models do not define an energy",
            ));
        }
        let sigmas = vec![sigma; xs.len()];
        let classes = vec![class; xs.len()];
        Ok(self
            .eval_batch(xs, &sigmas, &classes, None)?
            .into_iter()
            .map(|e| e.energy.expect("energy head"))
            .collect())
    }

    pub fn score(&self, x: Vec2, sigma: f64, class: usize) -> Result<Vec2> {
        Ok(self.eval_batch(&[x], &[sigma], &[class], None)?[0].score)
    }

    pub fn denoise(&self, x: Vec2, sigma: f64, class: usize) -> Result<Vec2> {
        Ok(x + self.score(x, sigma, class)? * (sigma * sigma))
    }

    /// Loss `mean(w·‖score − target‖²)` and its gradient with respect to every
    /// raw weight and the gain.
    pub fn grad_params(&self, batch: &[ScoreTarget]) -> Result<(ParamGrads, f64)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        for t in batch {
            Self::check_sigma(t.sigma)?;
            self.check_class(t.class)?;
        }
        let total = batch.len() as f64;
        let mut grads = ParamGrads::zeros(&self.params);
        let mut loss = 0.0;
        for (ci, chunk) in batch.chunks(CHUNK).enumerate() {
            let (g, l) = self.grad_chunk(chunk, total, ci * CHUNK)?;
            grads.accumulate(&g);
            loss += l;
        }
        Ok((grads, loss))
    }

    fn grad_chunk(
        &self,
        chunk: &[ScoreTarget],
        total: f64,
        offset: usize,
    ) -> Result<(ParamGrads, f64)> {
        let b = chunk.len();
        let xs: Vec<Vec2> = chunk.iter().map(|t| t.x).collect();
        let sigmas: Vec<f64> = chunk.iter().map(|t| t.sigma).collect();
        let classes: Vec<usize> = chunk.iter().map(|t| t.class).collect();
        let (tape, evals) = self.run(&xs, &sigmas, &classes, None);

        let n = self.params.arch.hidden_width as f64;
        let g = self.params.gain;
        let sd = self.params.sigma_data;
        let out = tape.output();
        let tangents = self.params.arch.head == Head::Energy;
        let mut out_grad = Array2::<f64>::zeros((out.nrows(), if tangents { 2 * b } else { b }));
        let mut directions = Vec::with_capacity(b);
        let mut gain_grad = 0.0;
        let mut loss = 0.0;
        for (j, (t, e)) in chunk.iter().zip(&evals).enumerate() {
            let r = e.score - t.target;
            let l = t.weight * r.norm_squared() / total;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    index: offset + j,
                    detail: format!("x = ({}, {}), sigma = {}", t.x.x, t.x.y, t.sigma),
                });
            }
            loss += l;
            // dL/dscore for this sample.
            let gbar = r * (2.0 * t.weight / total);
            let s = (t.sigma * t.sigma + sd * sd).sqrt();
            match self.params.arch.head {
                Head::Energy => {
                    // score = -x/s² - c·Jᵀ F with c = 2g/(σ n s). The loss only
                    // sees J through v = J·gbar, so F̄ = -c·v and v̄ = -c·F.
                    let k = 2.0 / (t.sigma * n * s);
                    let c = g * k;
                    let mut ftv = 0.0;
                    for row in 0..out.nrows() {
                        let f = out[(row, j)];
                        let v = gbar.x * out[(row, b + j)] + gbar.y * out[(row, 2 * b + j)];
                        ftv += f * v;
                        out_grad[(row, j)] = -c * v;
                        out_grad[(row, b + j)] = -c * f;
                    }
                    gain_grad += -k * ftv;
                    directions.push(gbar);
                }
                Head::DirectScore => {
                    let kappa = sd / (s * t.sigma);
                    let raw = Vec2::new(out[(0, j)], out[(1, j)]);
                    out_grad[(0, j)] = g * kappa * gbar.x;
                    out_grad[(1, j)] = g * kappa * gbar.y;
                    gain_grad += kappa * raw.dot(&gbar);
                }
            }
        }
        let weight_grads = mlp::backward(
            &self.weights,
            &tape,
            out_grad,
            tangents.then_some(directions.as_slice()),
        );
        let layers = weight_grads
            .iter()
            .enumerate()
            .map(|(l, wg)| mlp::unnormalize_grad(&self.weights[l], &self.norms[l], wg))
            .collect();
        Ok((
            ParamGrads {
                layers,
                gain: gain_grad,
            },
            loss,
        ))
    }
}
