//! Batched forward/backward kernels for the magnitude-preserving MLP.
//!
//! Samples are laid out as matrix columns. For the energy head each sample
//! owns three columns: the primal activation and the tangents with respect to
//! the two `x*` input coordinates (`[primal | tangent x | tangent y]`, each
//! block `batch` wide). Propagating the tangents alongside the primal values
//! gives the exact input Jacobian of the raw network, and the reverse pass
//! runs through that augmented forward pass to obtain parameter gradients of
//! the score.

use ndarray::{s, Array2, ArrayView2};

use crate::Vec2;

/// Magnitude-preserving SiLU: `silu(x) / 0.596`, which keeps unit-variance
/// inputs at roughly unit variance.
pub const MP_SILU_GAIN: f64 = 0.596;

/// `(f, f', f'')` of the magnitude-preserving SiLU.
#[inline]
pub fn mp_silu(h: f64) -> (f64, f64, f64) {
    let sig = 1.0 / (1.0 + (-h).exp());
    let ds = sig * (1.0 - sig);
    let f = h * sig / MP_SILU_GAIN;
    let f1 = (sig + h * ds) / MP_SILU_GAIN;
    let f2 = ds * (2.0 + h * (1.0 - 2.0 * sig)) / MP_SILU_GAIN;
    (f, f1, f2)
}

/// Normalizes each row of `raw` to unit Euclidean norm. Returns the
/// normalized matrix and the original row norms. All-zero rows stay zero.
pub fn normalize_rows(raw: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = raw.clone();
    let mut norms = Vec::with_capacity(raw.nrows());
    for mut row in out.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
        norms.push(n);
    }
    (out, norms)
}

/// Chain rule through row normalization: gradient w.r.t. the raw rows given
/// the gradient w.r.t. the normalized rows.
pub fn unnormalize_grad(
    normalized: &Array2<f64>,
    norms: &[f64],
    grad: &Array2<f64>,
) -> Array2<f64> {
    let mut out = grad.clone();
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = norms[r];
        if n == 0.0 {
            row.fill(0.0);
            continue;
        }
        let w = normalized.row(r);
        let proj: f64 = w.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
        for (g, &wv) in row.iter_mut().zip(w.iter()) {
            *g = (*g - wv * proj) / n;
        }
    }
    out
}

/// Activations recorded by a forward pass.
pub struct Tape {
    pub batch: usize,
    pub input: Array2<f64>,
    /// Pre-activation output of every linear layer.
    pub pre: Vec<Array2<f64>>,
    /// Input of every linear layer after the first (post activation, post
    /// dropout).
    pub post: Vec<Array2<f64>>,
    pub masks: Option<Vec<Array2<f64>>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.pre.last().expect("network has at least one layer")
    }
}

/// Multiplicative activation masks, one `(width × batch)` matrix per
/// activation site.
pub type Masks = [Array2<f64>];

pub fn forward(
    weights: &[Array2<f64>],
    input: Array2<f64>,
    batch: usize,
    tangents: bool,
    masks: Option<&Masks>,
) -> Tape {
    let mut pre = Vec::with_capacity(weights.len());
    let mut post = Vec::with_capacity(weights.len().saturating_sub(1));
    pre.push(weights[0].dot(&input));
    for (l, w) in weights.iter().enumerate().skip(1) {
        let h = &pre[l - 1];
        let mask = masks.map(|m| m[l - 1].view());
        let a = activate(h, batch, tangents, mask);
        pre.push(w.dot(&a));
        post.push(a);
    }
    Tape {
        batch,
        input,
        pre,
        post,
        masks: masks.map(|m| m.to_vec()),
    }
}

fn activate(
    h: &Array2<f64>,
    batch: usize,
    tangents: bool,
    mask: Option<ArrayView2<f64>>,
) -> Array2<f64> {
    let mut a = Array2::zeros(h.raw_dim());
    for r in 0..h.nrows() {
        for j in 0..batch {
            let m = mask.map_or(1.0, |m| m[(r, j)]);
            let (f, f1, _) = mp_silu(h[(r, j)]);
            a[(r, j)] = m * f;
            if tangents {
                a[(r, batch + j)] = m * f1 * h[(r, batch + j)];
                a[(r, 2 * batch + j)] = m * f1 * h[(r, 2 * batch + j)];
            }
        }
    }
    a
}

/// Reverse pass through a primal-only tape (`directions = None`) or through
/// the primal and one input-tangent direction per sample.
///
/// With directions, the tape must carry both coordinate tangents; they are
/// contracted per sample into the single direction `d_j`, which is all the
/// score-matching loss needs since it only sees the Jacobian through `J·d`.
/// `out_grad` then has `2·batch` columns: adjoints of the primal output and
/// of the directional tangent output. Returns the adjoint of each normalized
/// weight matrix.
pub fn backward(
    weights: &[Array2<f64>],
    tape: &Tape,
    out_grad: Array2<f64>,
    directions: Option<&[Vec2]>,
) -> Vec<Array2<f64>> {
    let batch = tape.batch;
    let layers = weights.len();
    let contract = |m: &Array2<f64>| match directions {
        Some(d) => contract_tangents(m, batch, d),
        None => m.clone(),
    };
    let tangents = directions.is_some();
    let mut grads: Vec<Array2<f64>> = Vec::with_capacity(layers);
    let mut hbar = out_grad;
    for l in (1..layers).rev() {
        let a = contract(&tape.post[l - 1]);
        grads.push(hbar.dot(&a.t()));
        let abar = weights[l].t().dot(&hbar);
        let h = contract(&tape.pre[l - 1]);
        let mask = tape.masks.as_ref().map(|m| m[l - 1].view());
        hbar = activation_adjoint(&h, abar, batch, tangents, mask);
    }
    grads.push(hbar.dot(&contract(&tape.input).t()));
    grads.reverse();
    grads
}

/// `[primal | tx | ty]` → `[primal | d.x·tx + d.y·ty]`, per sample column.
pub fn contract_tangents(m: &Array2<f64>, batch: usize, dirs: &[Vec2]) -> Array2<f64> {
    let mut out = Array2::zeros((m.nrows(), 2 * batch));
    out.slice_mut(s![.., ..batch])
        .assign(&m.slice(s![.., ..batch]));
    for r in 0..m.nrows() {
        for (j, d) in dirs.iter().enumerate() {
            out[(r, batch + j)] = d.x * m[(r, batch + j)] + d.y * m[(r, 2 * batch + j)];
        }
    }
    out
}

fn activation_adjoint(
    h: &Array2<f64>,
    mut abar: Array2<f64>,
    batch: usize,
    tangents: bool,
    mask: Option<ArrayView2<f64>>,
) -> Array2<f64> {
    for r in 0..h.nrows() {
        for j in 0..batch {
            let m = mask.map_or(1.0, |m| m[(r, j)]);
            let (_, f1, f2) = mp_silu(h[(r, j)]);
            if tangents {
                let tb = abar[(r, batch + j)];
                let th = h[(r, batch + j)];
                abar[(r, j)] = m * (f1 * abar[(r, j)] + f2 * th * tb);
                abar[(r, batch + j)] = m * f1 * tb;
            } else {
                abar[(r, j)] *= m * f1;
            }
        }
    }
    abar
}

/// Column block `k` (0 = primal, 1/2 = tangents) of an activation matrix.
pub fn block(m: &Array2<f64>, batch: usize, k: usize) -> ArrayView2<'_, f64> {
    m.slice(s![.., k * batch..(k + 1) * batch])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mp_silu_derivatives_match_finite_differences() {
        let h = 1e-5;
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let (_, f1, f2) = mp_silu(x);
            let fd1 = (mp_silu(x + h).0 - mp_silu(x - h).0) / (2.0 * h);
            let fd2 = (mp_silu(x + h).1 - mp_silu(x - h).1) / (2.0 * h);
            assert!((f1 - fd1).abs() < 1e-8, "{x}: {f1} vs {fd1}");
            assert!((f2 - fd2).abs() < 1e-8, "{x}: {f2} vs {fd2}");
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let raw = Array2::from_shape_vec((2, 3), vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let (w, norms) = normalize_rows(&raw);
        assert_eq!(norms, vec![5.0, 0.0]);
        assert!((w[(0, 0)] - 0.6).abs() < 1e-15);
        assert_eq!(w.row(1).sum(), 0.0);
    }
}
