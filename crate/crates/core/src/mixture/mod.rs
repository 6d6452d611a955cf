//! Class-conditional 2D Gaussian mixtures with exact heat-diffused densities
//! and scores.
//!
//! Smoothing a mixture by noise level `sigma` only widens each component's
//! covariance (`Σ + σ²I`), so densities, scores and samples are available in
//! closed form at every noise level. All log-density work happens in log space
//! with a max-shift, so points far from the support never produce NaNs.

mod fractal;
mod io;

use nalgebra::Matrix2;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::Vec2;

pub use fractal::{build_fractal, build_fractal_with, FractalGeometry};
pub use io::MixtureFile;

/// Per-axis standard deviation of the normalized data distribution.
pub const SIGMA_DATA: f64 = 0.5;

/// Log-density values are clamped here before exponentiation.
pub const LOG_DENSITY_FLOOR: f64 = -745.0;

// Terms this far below the running maximum contribute less than 5e-18
// relative mass and are skipped in the exponentiation pass.
const LOG_SKIP: f64 = -40.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

// Components are bounded in contiguous groups of this size (one tree branch).
const GROUP: usize = 8;

/// One weighted Gaussian component.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec2,
    pub cov: Matrix2<f64>,
}

impl MixtureComponent {
    pub fn new(weight: f64, mean: Vec2, cov: Matrix2<f64>) -> Self {
        Self { weight, mean, cov }
    }

    /// Isotropic component `weight · N(mean, var·I)`.
    pub fn isotropic(weight: f64, mean: Vec2, var: f64) -> Self {
        Self::new(weight, mean, Matrix2::identity() * var)
    }
}

/// Affine map that was applied to the raw construction to reach zero mean and
/// `SIGMA_DATA` standard deviation along each axis: `x' = (x - shift) * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub shift: Vec2,
    pub scale: Vec2,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        shift: Vec2::new(0.0, 0.0),
        scale: Vec2::new(1.0, 1.0),
    };
}

/// Structure-of-arrays view of one component list, used by the hot loops.
#[derive(Debug, Clone, Default)]
struct Packed {
    mx: Vec<f64>,
    my: Vec<f64>,
    sxx: Vec<f64>,
    sxy: Vec<f64>,
    syy: Vec<f64>,
    log_phi: Vec<f64>,
    phi: Vec<f64>,
    nodes: Vec<Node>,
    root: usize,
}

/// Conservative envelope of a set of components: every mean lies within
/// `radius` of `center`, and every covariance has eigenvalues in
/// `[lam_min, lam_max]`.
#[derive(Debug, Clone, Copy)]
struct Bound {
    cx: f64,
    cy: f64,
    radius: f64,
    lam_min: f64,
    lam_max: f64,
    log_phi_max: f64,
}

impl Bound {
    /// Upper bound on any member's log term at `x` and smoothing `s2 = σ²`,
    /// given `log_det_floor ≤ ln det(Σ + σ²I)` for every member.
    #[inline]
    fn upper(&self, x: Vec2, s2: f64, log_det_floor: f64) -> f64 {
        let d = ((x.x - self.cx).powi(2) + (x.y - self.cy).powi(2)).sqrt();
        let gap = (d - self.radius).max(0.0);
        self.log_phi_max - 0.5 * (gap * gap / (self.lam_max + s2) + log_det_floor)
    }

    fn enclosing(parts: &[Bound]) -> Bound {
        let k = parts.len() as f64;
        let cx = parts.iter().map(|b| b.cx).sum::<f64>() / k;
        let cy = parts.iter().map(|b| b.cy).sum::<f64>() / k;
        let mut out = Bound {
            cx,
            cy,
            radius: 0.0,
            lam_min: f64::INFINITY,
            lam_max: 0.0,
            log_phi_max: f64::NEG_INFINITY,
        };
        for b in parts {
            let r = ((b.cx - cx).powi(2) + (b.cy - cy).powi(2)).sqrt() + b.radius;
            // Slack absorbs rounding in the distance computations.
            out.radius = out.radius.max(r * (1.0 + 1e-12) + 1e-15);
            out.lam_min = out.lam_min.min(b.lam_min);
            out.lam_max = out.lam_max.max(b.lam_max);
            out.log_phi_max = out.log_phi_max.max(b.log_phi_max);
        }
        out
    }
}

/// Bounding hierarchy node. Leaves cover a contiguous component range.
#[derive(Debug, Clone, Copy)]
struct Node {
    bound: Bound,
    kind: NodeKind,
}

#[derive(Debug, Clone, Copy)]
enum NodeKind {
    Leaf { start: usize, end: usize },
    Inner { left: usize, right: usize },
}

impl Packed {
    fn finish(&mut self) {
        let n = self.len();
        let mut leaves = Vec::new();
        for start in (0..n).step_by(GROUP) {
            let end = (start + GROUP).min(n);
            let points: Vec<Bound> = (start..end)
                .map(|i| {
                    let tr = 0.5 * (self.sxx[i] + self.syy[i]);
                    let disc =
                        (0.25 * (self.sxx[i] - self.syy[i]).powi(2) + self.sxy[i].powi(2)).sqrt();
                    Bound {
                        cx: self.mx[i],
                        cy: self.my[i],
                        radius: 0.0,
                        lam_min: (tr - disc) * (1.0 - 1e-12),
                        lam_max: (tr + disc) * (1.0 + 1e-12),
                        log_phi_max: self.log_phi[i],
                    }
                })
                .collect();
            leaves.push(Node {
                bound: Bound::enclosing(&points),
                kind: NodeKind::Leaf { start, end },
            });
        }
        self.nodes.clear();
        self.root = build_tree(&mut self.nodes, leaves);
    }

    fn push(&mut self, c: &MixtureComponent, weight: f64) {
        self.mx.push(c.mean.x);
        self.my.push(c.mean.y);
        self.sxx.push(c.cov[(0, 0)]);
        self.sxy.push(0.5 * (c.cov[(0, 1)] + c.cov[(1, 0)]));
        self.syy.push(c.cov[(1, 1)]);
        self.log_phi.push(weight.ln());
        self.phi.push(weight);
    }

    fn len(&self) -> usize {
        self.mx.len()
    }
}

/// Median-split hierarchy over leaf nodes; returns the root index.
fn build_tree(nodes: &mut Vec<Node>, mut items: Vec<Node>) -> usize {
    if items.len() == 1 {
        nodes.push(items.pop().expect("one item"));
        return nodes.len() - 1;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for it in &items {
        lo[0] = lo[0].min(it.bound.cx);
        lo[1] = lo[1].min(it.bound.cy);
        hi[0] = hi[0].max(it.bound.cx);
        hi[1] = hi[1].max(it.bound.cy);
    }
    let key = |n: &Node| {
        if hi[0] - lo[0] >= hi[1] - lo[1] {
            n.bound.cx
        } else {
            n.bound.cy
        }
    };
    items.sort_by(|a, b| key(a).total_cmp(&key(b)));
    let right_items = items.split_off(items.len() / 2);
    let bounds: Vec<Bound> = items.iter().chain(&right_items).map(|n| n.bound).collect();
    let left = build_tree(nodes, items);
    let right = build_tree(nodes, right_items);
    nodes.push(Node {
        bound: Bound::enclosing(&bounds),
        kind: NodeKind::Inner { left, right },
    });
    nodes.len() - 1
}

/// Result of a log-space density/score evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEval {
    pub log_density: f64,
    pub score: Vec2,
    /// True when every responsibility underflowed and the score fell back to
    /// the nearest component.
    pub degenerate: bool,
}

/// A two-class (or general multi-class) mixture: the ground-truth data
/// distribution for every experiment.
#[derive(Debug, Clone)]
pub struct MixtureSpec {
    classes: Vec<Vec<MixtureComponent>>,
    seed: u64,
    normalization: Normalization,
    // One packed table per class, then the class-marginal table (classes
    // weighted equally).
    packed: Vec<Packed>,
}

impl PartialEq for MixtureSpec {
    fn eq(&self, other: &Self) -> bool {
        self.classes == other.classes
            && self.seed == other.seed
            && self.normalization == other.normalization
    }
}

impl MixtureSpec {
    pub fn new(
        classes: Vec<Vec<MixtureComponent>>,
        seed: u64,
        normalization: Normalization,
    ) -> crate::Result<Self> {
        if classes.is_empty() || classes.iter().any(|c| c.is_empty()) {
            return Err(crate::Error::invalid(
                "mixture needs at least one non-empty class",
            ));
        }
        for (ci, comps) in classes.iter().enumerate() {
            for (i, c) in comps.iter().enumerate() {
                let sym = 0.5 * (c.cov[(0, 1)] + c.cov[(1, 0)]);
                let det = c.cov[(0, 0)] * c.cov[(1, 1)] - sym * sym;
                if !(c.weight >= 0.0) || !(c.cov[(0, 0)] > 0.0) || !(det > 0.0) {
                    return Err(crate::Error::invalid(format!(
                        "class {ci} component {i}: weight must be >= 0 and covariance SPD"
                    )));
                }
            }
        }
        let mut packed = Vec::with_capacity(classes.len() + 1);
        let mut marginal = Packed::default();
        let class_weight = 1.0 / classes.len() as f64;
        for comps in &classes {
            let mut p = Packed::default();
            for c in comps {
                p.push(c, c.weight);
                marginal.push(c, c.weight * class_weight);
            }
            p.finish();
            packed.push(p);
        }
        marginal.finish();
        packed.push(marginal);
        Ok(Self {
            classes,
            seed,
            normalization,
            packed,
        })
    }

    /// Single-class mixture, convenient for analytic tests.
    pub fn single_class(components: Vec<MixtureComponent>) -> crate::Result<Self> {
        Self::new(vec![components], 0, Normalization::IDENTITY)
    }

    pub fn classes(&self) -> &[Vec<MixtureComponent>] {
        &self.classes
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn components(&self, class: usize) -> &[MixtureComponent] {
        &self.classes[class]
    }

    pub fn total_components(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    fn table(&self, class: Option<usize>) -> &Packed {
        match class {
            Some(c) => &self.packed[c],
            None => &self.packed[self.classes.len()],
        }
    }

    /// Mean and covariance of the (class or marginal) distribution at noise
    /// level `sigma`, from component moments.
    pub fn moments(&self, class: Option<usize>, sigma: f64) -> (Vec2, Matrix2<f64>) {
        let t = self.table(class);
        let total: f64 = t.phi.iter().sum();
        let mut mean = Vec2::zeros();
        for i in 0..t.len() {
            mean += Vec2::new(t.mx[i], t.my[i]) * t.phi[i];
        }
        mean /= total;
        let mut cov = Matrix2::zeros();
        for i in 0..t.len() {
            let d = Vec2::new(t.mx[i], t.my[i]) - mean;
            let c = Matrix2::new(t.sxx[i], t.sxy[i], t.sxy[i], t.syy[i]);
            cov += (c + d * d.transpose()) * t.phi[i];
        }
        cov /= total;
        cov += Matrix2::identity() * (sigma * sigma);
        (mean, cov)
    }

    /// Log density and score at `x`, evaluated in log space.
    ///
    /// `class = None` selects the class-marginal mixture.
    pub fn log_eval(&self, class: Option<usize>, x: Vec2, sigma: f64) -> LogEval {
        let t = self.table(class);
        let s2 = sigma * sigma;
        // Per evaluated component: log term plus what the score pass needs.
        struct Term {
            l: f64,
            gx: f64,
            gy: f64,
        }
        let term = |i: usize| {
            let a = t.sxx[i] + s2;
            let b = t.sxy[i];
            let c = t.syy[i] + s2;
            let det = a * c - b * b;
            let inv = 1.0 / det;
            let dx = t.mx[i] - x.x;
            let dy = t.my[i] - x.y;
            // (Σ*)⁻¹(μ - x)
            let gx = (c * dx - b * dy) * inv;
            let gy = (a * dy - b * dx) * inv;
            let q = dx * gx + dy * gy;
            Term {
                l: t.log_phi[i] - 0.5 * (q + det.ln()),
                gx,
                gy,
            }
        };
        // Depth-first over the bounding hierarchy, most promising child
        // first; subtrees that cannot come within LOG_SKIP of the running
        // maximum are never expanded.
        let mut terms: Vec<Term> = Vec::with_capacity(8 * GROUP);
        let mut max = f64::NEG_INFINITY;
        let mut stack: Vec<(usize, f64)> = Vec::with_capacity(32);
        let floor = if t.nodes.is_empty() {
            0.0
        } else {
            2.0 * (t.nodes[t.root].bound.lam_min + s2).ln()
        };
        if !t.nodes.is_empty() {
            stack.push((t.root, t.nodes[t.root].bound.upper(x, s2, floor)));
        }
        while let Some((k, ub)) = stack.pop() {
            if max.is_finite() && !(ub - max >= LOG_SKIP) {
                continue;
            }
            match t.nodes[k].kind {
                NodeKind::Leaf { start, end } => {
                    for i in start..end {
                        let tm = term(i);
                        if tm.l > max {
                            max = tm.l;
                        }
                        terms.push(tm);
                    }
                }
                NodeKind::Inner { left, right } => {
                    let ul = t.nodes[left].bound.upper(x, s2, floor);
                    let ur = t.nodes[right].bound.upper(x, s2, floor);
                    // Push the weaker child first so the stronger pops next.
                    if ul >= ur {
                        stack.push((right, ur));
                        stack.push((left, ul));
                    } else {
                        stack.push((left, ul));
                        stack.push((right, ur));
                    }
                }
            }
        }
        let mut sum = 0.0;
        let mut acc = Vec2::zeros();
        if max.is_finite() {
            for tm in &terms {
                let rel = tm.l - max;
                if rel < LOG_SKIP {
                    continue;
                }
                let w = rel.exp();
                sum += w;
                acc.x += w * tm.gx;
                acc.y += w * tm.gy;
            }
        }
        if sum > 0.0 && sum.is_finite() && acc.iter().all(|v| v.is_finite()) {
            LogEval {
                log_density: max + sum.ln() - LN_2PI,
                score: acc / sum,
                degenerate: false,
            }
        } else {
            self.nearest_component_eval(t, x, s2)
        }
    }

    fn nearest_component_eval(&self, t: &Packed, x: Vec2, s2: f64) -> LogEval {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..t.len() {
            let a = t.sxx[i] + s2;
            let b = t.sxy[i];
            let c = t.syy[i] + s2;
            let det = a * c - b * b;
            let dx = t.mx[i] - x.x;
            let dy = t.my[i] - x.y;
            let q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
            if q.is_finite() && best.is_none_or(|(bq, _)| q < bq) {
                best = Some((q, i));
            }
        }
        let score = match best {
            Some((_, i)) => {
                let a = t.sxx[i] + s2;
                let b = t.sxy[i];
                let c = t.syy[i] + s2;
                let det = a * c - b * b;
                let dx = t.mx[i] - x.x;
                let dy = t.my[i] - x.y;
                Vec2::new((c * dx - b * dy) / det, (a * dy - b * dx) / det)
            }
            None => Vec2::zeros(),
        };
        LogEval {
            log_density: f64::NEG_INFINITY,
            score,
            degenerate: true,
        }
    }

    pub fn log_density(&self, class: Option<usize>, x: Vec2, sigma: f64) -> f64 {
        self.log_eval(class, x, sigma).log_density
    }

    /// `Σ φ_i N(x; μ_i, Σ_i + σ²I)`, underflowing gracefully to ~0.
    pub fn density(&self, class: Option<usize>, x: Vec2, sigma: f64) -> f64 {
        self.log_density(class, x, sigma)
            .max(LOG_DENSITY_FLOOR)
            .exp()
    }

    /// Gradient of the log density with respect to `x`.
    pub fn score(&self, class: Option<usize>, x: Vec2, sigma: f64) -> Vec2 {
        self.log_eval(class, x, sigma).score
    }

    /// Ideal denoiser `x + σ²·score`.
    pub fn oracle_denoise(&self, class: Option<usize>, x: Vec2, sigma: f64) -> Vec2 {
        if sigma == 0.0 {
            return x;
        }
        x + self.score(class, x, sigma) * (sigma * sigma)
    }

    /// Draws `count` points from the distribution smoothed to noise `sigma`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        class: Option<usize>,
        count: usize,
        sigma: f64,
        rng: &mut R,
    ) -> Vec<Vec2> {
        let sampler = ComponentSampler::new(self, class);
        (0..count).map(|_| sampler.draw(sigma, rng)).collect()
    }
}

/// Reusable categorical draw over one table's components.
pub struct ComponentSampler<'a> {
    table: &'a Packed,
    index: WeightedIndex<f64>,
}

impl<'a> ComponentSampler<'a> {
    pub fn new(spec: &'a MixtureSpec, class: Option<usize>) -> Self {
        let table = spec.table(class);
        let index = WeightedIndex::new(table.phi.iter().copied())
            .expect("mixture weights are nonnegative with positive sum");
        Self { table, index }
    }

    pub fn draw<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> Vec2 {
        let i = self.index.sample(rng);
        let t = self.table;
        let s2 = sigma * sigma;
        // Cholesky of the 2x2 smoothed covariance.
        let a = t.sxx[i] + s2;
        let b = t.sxy[i];
        let c = t.syy[i] + s2;
        let l11 = a.sqrt();
        let l21 = b / l11;
        let l22 = (c - l21 * l21).max(0.0).sqrt();
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        Vec2::new(t.mx[i] + l11 * z0, t.my[i] + l21 * z0 + l22 * z1)
    }
}
