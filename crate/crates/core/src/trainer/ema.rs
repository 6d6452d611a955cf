//! Power-function EMA profile.
//!
//! With exponent `γ`, the average after step `t` weighs snapshot `τ ≤ t`
//! proportionally to `τ^γ`. On the unit interval that profile has standard
//! deviation `√((γ+1) / ((γ+2)²(γ+3)))`, which is what `σ_rel` names.

use crate::netmodel::ModelParams;

/// Relative standard deviation of the continuous `τ^γ` profile.
pub fn profile_sigma_rel(exponent: f64) -> f64 {
    let g = exponent;
    ((g + 1.0) / ((g + 2.0) * (g + 2.0) * (g + 3.0))).sqrt()
}

/// Exponent whose profile has relative std `sigma_rel`, by bisection.
///
/// `profile_sigma_rel` is strictly decreasing on `γ > -1`, spanning
/// `(0, 1/√12]` for `γ ≥ 0`.
pub fn exponent_for_sigma_rel(sigma_rel: f64) -> crate::Result<f64> {
    let max = profile_sigma_rel(0.0);
    if !(sigma_rel > 0.0 && sigma_rel <= max) {
        return Err(crate::Error::invalid(format!(
            "sigma_rel must lie in (0, {max:.4}], got {sigma_rel}"
        )));
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while profile_sigma_rel(hi) > sigma_rel {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if profile_sigma_rel(mid) > sigma_rel {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Decay applied to the running average at `step` (1-based).
pub fn ema_beta(exponent: f64, step: u64) -> f64 {
    (1.0 - 1.0 / step as f64).powf(exponent + 1.0)
}

/// One averaged copy of the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaTracker {
    pub sigma_rel: f64,
    pub exponent: f64,
    pub averaged: ModelParams,
}

impl EmaTracker {
    pub fn new(sigma_rel: f64, like: &ModelParams) -> crate::Result<Self> {
        Ok(Self {
            sigma_rel,
            exponent: exponent_for_sigma_rel(sigma_rel)?,
            averaged: like.clone(),
        })
    }

    /// `averaged ← β·averaged + (1 − β)·current` with `β = (1 − 1/t)^(γ+1)`.
    pub fn update(&mut self, current: &ModelParams, step: u64) {
        assert!(step >= 1, "EMA steps are 1-based");
        let beta = ema_beta(self.exponent, step);
        if beta == 0.0 {
            self.averaged = current.clone();
            return;
        }
        for (avg, cur) in self.averaged.layers.iter_mut().zip(&current.layers) {
            avg.zip_mut_with(cur, |a, &c| *a = beta * *a + (1.0 - beta) * c);
        }
        self.averaged.gain = beta * self.averaged.gain + (1.0 - beta) * current.gain;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::ArchDescriptor;

    #[test]
    fn first_step_replaces_average() {
        let arch = ArchDescriptor::conditional(16).unwrap();
        let mut t = EmaTracker::new(0.05, &ModelParams::init(arch, 0)).unwrap();
        let cur = ModelParams::init(arch, 1);
        t.update(&cur, 1);
        assert_eq!(t.averaged, cur);
    }

    #[test]
    fn constant_stream_is_a_fixed_point() {
        let arch = ArchDescriptor::conditional(16).unwrap();
        let mut cur = ModelParams::init(arch, 3);
        cur.gain = 0.25;
        let mut t = EmaTracker::new(0.01, &cur).unwrap();
        for step in 1..200 {
            t.update(&cur, step);
            assert!((t.averaged.gain - 0.25).abs() < 1e-15);
            for (a, b) in t.averaged.layers.iter().zip(&cur.layers) {
                for (x, y) in a.iter().zip(b.iter()) {
                    assert!((x - y).abs() <= 1e-14 * y.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn bisection_inverts_profile() {
        for s in [0.005, 0.01, 0.025, 0.05, 0.2] {
            let g = exponent_for_sigma_rel(s).unwrap();
            assert!((profile_sigma_rel(g) - s).abs() < 1e-12);
        }
        assert!(exponent_for_sigma_rel(0.0).is_err());
        assert!(exponent_for_sigma_rel(0.5).is_err());
    }
}
