//! Procedural two-class "tree" mixture.
//!
//! Each class is a binary tree of thin branches. A branch is a chain of
//! anisotropic Gaussians laid along its axis; every subdivision spawns two
//! shorter, lighter children at jittered angles. After construction the whole
//! class-marginal distribution is shifted and scaled per axis to zero mean and
//! `SIGMA_DATA` standard deviation.

use nalgebra::{Matrix2, Rotation2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MixtureComponent, MixtureSpec, Normalization, SIGMA_DATA};
use crate::Vec2;

/// Geometry constants of the tree construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FractalGeometry {
    pub root_length: f64,
    /// Base child angle relative to the parent direction, degrees.
    pub branch_angle_deg: f64,
    /// Uniform angular jitter half-width, degrees.
    pub angle_jitter_deg: f64,
    pub length_ratio: f64,
    /// Relative half-width of the uniform jitter on `length_ratio`.
    pub length_jitter: f64,
    /// Weight of a child branch relative to its parent.
    pub weight_decay: f64,
    pub subdivisions: usize,
    pub components_per_branch: usize,
    /// Along-axis std is `length / along_divisor`.
    pub along_divisor: f64,
    /// Cross-axis std is `length / cross_divisor`.
    pub cross_divisor: f64,
    /// Horizontal offset of each class root from the origin.
    pub root_offset: f64,
}

impl Default for FractalGeometry {
    fn default() -> Self {
        Self {
            root_length: 1.5,
            branch_angle_deg: 25.0,
            angle_jitter_deg: 8.0,
            length_ratio: 0.72,
            length_jitter: 0.05,
            weight_decay: 0.62,
            subdivisions: 6,
            components_per_branch: 8,
            along_divisor: 16.0,
            cross_divisor: 60.0,
            root_offset: 0.35,
        }
    }
}

/// Builds the standard two-class tree mixture for `seed`.
pub fn build_fractal(seed: u64) -> MixtureSpec {
    build_fractal_with(seed, &FractalGeometry::default())
}

pub fn build_fractal_with(seed: u64, geom: &FractalGeometry) -> MixtureSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Class 0 leans left, class 1 is its mirror image on the right; each has
    // its own jitter draws.
    let mut classes = Vec::with_capacity(2);
    for (root_x, mirror) in [(-geom.root_offset, false), (geom.root_offset, true)] {
        let mut comps = Vec::new();
        grow(
            geom,
            &mut rng,
            &mut comps,
            Vec2::new(root_x, 0.0),
            0.0,
            geom.root_length,
            1.0,
            0,
        );
        if mirror {
            for c in &mut comps {
                c.mean.x = 2.0 * root_x - c.mean.x;
                c.cov[(0, 1)] = -c.cov[(0, 1)];
                c.cov[(1, 0)] = -c.cov[(1, 0)];
            }
        }
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        for c in &mut comps {
            c.weight /= total;
        }
        classes.push(comps);
    }
    let norm = normalize(&mut classes);
    MixtureSpec::new(classes, seed, norm).expect("tree construction yields SPD components")
}

#[allow(clippy::too_many_arguments)]
fn grow(
    geom: &FractalGeometry,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<MixtureComponent>,
    start: Vec2,
    angle: f64,
    length: f64,
    weight: f64,
    depth: usize,
) {
    // Angle measured from the +y axis, clockwise positive.
    let dir = Vec2::new(angle.sin(), angle.cos());
    let rot = Rotation2::new(-angle);
    let along = length / geom.along_divisor;
    let cross = length / geom.cross_divisor;
    let local = Matrix2::new(cross * cross, 0.0, 0.0, along * along);
    let cov = rot.matrix() * local * rot.matrix().transpose();
    let k = geom.components_per_branch;
    for i in 0..k {
        let t = (i as f64 + 0.5) / k as f64;
        out.push(MixtureComponent::new(
            weight / k as f64,
            start + dir * (length * t),
            cov,
        ));
    }
    if depth == geom.subdivisions {
        return;
    }
    let end = start + dir * length;
    for sign in [1.0, -1.0] {
        let jitter = rng.random_range(-geom.angle_jitter_deg..=geom.angle_jitter_deg);
        let child_angle = angle + sign * (geom.branch_angle_deg + jitter).to_radians();
        let ratio =
            geom.length_ratio * (1.0 + rng.random_range(-geom.length_jitter..=geom.length_jitter));
        grow(
            geom,
            rng,
            out,
            end,
            child_angle,
            length * ratio,
            weight * geom.weight_decay,
            depth + 1,
        );
    }
}

/// Shifts and scales all classes so the equal-weight class marginal has zero
/// mean and `SIGMA_DATA` std per axis.
fn normalize(classes: &mut [Vec<MixtureComponent>]) -> Normalization {
    let class_weight = 1.0 / classes.len() as f64;
    let mut mean = Vec2::zeros();
    for comps in classes.iter() {
        for c in comps {
            mean += c.mean * (c.weight * class_weight);
        }
    }
    let mut var = Vec2::zeros();
    for comps in classes.iter() {
        for c in comps {
            let d = c.mean - mean;
            let w = c.weight * class_weight;
            var.x += w * (c.cov[(0, 0)] + d.x * d.x);
            var.y += w * (c.cov[(1, 1)] + d.y * d.y);
        }
    }
    let scale = Vec2::new(SIGMA_DATA / var.x.sqrt(), SIGMA_DATA / var.y.sqrt());
    let s = Matrix2::from_diagonal(&scale);
    for comps in classes.iter_mut() {
        for c in comps.iter_mut() {
            c.mean = (c.mean - mean).component_mul(&scale);
            c.cov = s * c.cov * s;
        }
    }
    Normalization { shift: mean, scale }
}
