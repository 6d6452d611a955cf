//! Independent oracles for the fractal mixture: finite differences, quadrature,
//! moments and histograms.

use guidelab::mixture::{build_fractal, MixtureSpec, SIGMA_DATA};
use guidelab::Vec2;
use nalgebra::Matrix2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn score_matches_central_differences() {
    let spec = build_fractal(0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for sigma in [0.01, 0.1, 1.0] {
        let h = 1e-3 * sigma;
        for i in 0..100 {
            let class = i % 2;
            // Points near the support, where the score is well conditioned.
            let x = spec.sample(Some(class), 1, sigma, &mut rng)[0];
            let lp = |d: Vec2| spec.log_density(Some(class), x + d, sigma);
            // Fourth-order central stencil.
            let d = |e: Vec2| (8.0 * (lp(e) - lp(-e)) - (lp(2.0 * e) - lp(-2.0 * e))) / (12.0 * h);
            let fd = Vec2::new(d(Vec2::new(h, 0.0)), d(Vec2::new(0.0, h)));
            let s = spec.score(Some(class), x, sigma);
            assert!(
                (s - fd).norm() <= 1e-5 * s.norm(),
                "σ={sigma}, x={x:?}: {s:?} vs {fd:?}"
            );
        }
    }
}

#[test]
fn density_integrates_to_one_on_the_grid() {
    let spec = build_fractal(0);
    let n = 800;
    let step = 4.0 / n as f64;
    for class in 0..2 {
        let mut mass = 0.0;
        for i in 0..=n {
            for j in 0..=n {
                // Trapezoid weights.
                let wx = if i == 0 || i == n { 0.5 } else { 1.0 };
                let wy = if j == 0 || j == n { 0.5 } else { 1.0 };
                let x = Vec2::new(-2.0 + i as f64 * step, -2.0 + j as f64 * step);
                mass += wx * wy * spec.density(Some(class), x, 0.1);
            }
        }
        mass *= step * step;
        assert!((mass - 1.0).abs() < 0.01, "class {class}: {mass}");
    }
}

/// Mean and covariance of a class from its components, without going through
/// the library's moment code.
fn component_moments(spec: &MixtureSpec, class: usize) -> (Vec2, Matrix2<f64>) {
    let comps = spec.components(class);
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    let mean = comps.iter().map(|c| c.mean * c.weight).sum::<Vec2>() / total;
    let second = comps
        .iter()
        .map(|c| (c.cov + c.mean * c.mean.transpose()) * c.weight)
        .sum::<Matrix2<f64>>()
        / total;
    (mean, second - mean * mean.transpose())
}

#[test]
fn smoothed_samples_match_component_moments() {
    let spec = build_fractal(0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 100_000;
    for class in 0..2 {
        let (mean, cov) = component_moments(&spec, class);
        let expect = cov + Matrix2::identity() * 0.25;
        let xs = spec.sample(Some(class), n, 0.5, &mut rng);
        let m = xs.iter().sum::<Vec2>() / n as f64;
        let c = xs.iter().map(|x| (x - m) * (x - m).transpose()).sum::<Matrix2<f64>>() / (n - 1) as f64;
        assert!((m - mean).norm() < 0.02 * expect.trace().sqrt());
        for k in 0..2 {
            assert!((c[(k, k)] - expect[(k, k)]).abs() < 0.02 * expect[(k, k)], "{c} vs {expect}");
        }
        let scale = (expect[(0, 0)] * expect[(1, 1)]).sqrt();
        assert!((c[(0, 1)] - expect[(0, 1)]).abs() < 0.02 * scale);
    }
}

#[test]
fn library_moments_agree_with_components() {
    let spec = build_fractal(4);
    for class in 0..2 {
        let (mean, cov) = component_moments(&spec, class);
        let (m, c) = spec.moments(Some(class), 0.3);
        assert!((m - mean).norm() < 1e-12);
        assert!((c - cov - Matrix2::identity() * 0.09).norm() < 1e-12);
    }
}

#[test]
fn class_marginal_has_sigma_data_spread() {
    let spec = build_fractal(0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let xs: Vec<Vec2> = (0..n)
        .map(|_| {
            let c = rng.random_range(0..2);
            spec.sample(Some(c), 1, 0.0, &mut rng)[0]
        })
        .collect();
    let m = xs.iter().sum::<Vec2>() / n as f64;
    for k in 0..2 {
        let var = xs.iter().map(|x| (x[k] - m[k]).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var.sqrt() - SIGMA_DATA).abs() < 0.01, "axis {k}: {}", var.sqrt());
    }
}

#[test]
fn histogram_matches_density() {
    let spec = build_fractal(0);
    let sigma = 0.1;
    let n = 1_000_000;
    let bins = 64;
    let cell = 4.0 / bins as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = vec![0usize; bins * bins];
    for x in spec.sample(Some(0), n, sigma, &mut rng) {
        let i = ((x.x + 2.0) / cell).floor();
        let j = ((x.y + 2.0) / cell).floor();
        if (0.0..bins as f64).contains(&i) && (0.0..bins as f64).contains(&j) {
            counts[i as usize * bins + j as usize] += 1;
        }
    }
    // Expected counts by 4×4 midpoint quadrature inside each bin, compared
    // through a chi-square statistic over the well-populated bins.
    let sub = 4;
    let (mut chi2, mut dof, mut tail) = (0.0, 0usize, 0.0);
    for i in 0..bins {
        for j in 0..bins {
            let mut p = 0.0;
            for a in 0..sub {
                for b in 0..sub {
                    let x = Vec2::new(
                        -2.0 + (i as f64 + (a as f64 + 0.5) / sub as f64) * cell,
                        -2.0 + (j as f64 + (b as f64 + 0.5) / sub as f64) * cell,
                    );
                    p += spec.density(Some(0), x, sigma);
                }
            }
            let expect = p * (cell / sub as f64).powi(2) * n as f64;
            let got = counts[i * bins + j] as f64;
            if expect >= 5.0 {
                chi2 += (got - expect).powi(2) / expect;
                dof += 1;
            } else {
                tail += got - expect;
            }
        }
    }
    let ratio = chi2 / dof as f64;
    assert!(dof > 500, "{dof}");
    assert!(ratio < 1.0 + 5.0 * (2.0 / dof as f64).sqrt(), "chi2/dof {ratio} over {dof} bins");
    assert!(tail.abs() < 0.001 * n as f64, "sparse bins off by {tail}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn any_seed_gives_normalized_classes(seed in any::<u64>()) {
        let spec = build_fractal(seed);
        prop_assert_eq!(spec.total_components(), 2032);
        for class in 0..2 {
            let total: f64 = spec.components(class).iter().map(|c| c.weight).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
        let (m, c) = spec.moments(None, 0.0);
        prop_assert!(m.norm() < 1e-6);
        prop_assert!((c[(0, 0)].sqrt() - SIGMA_DATA).abs() < 1e-6);
        prop_assert!((c[(1, 1)].sqrt() - SIGMA_DATA).abs() < 1e-6);
    }

    #[test]
    fn scores_and_densities_are_finite(
        x in -50.0f64..50.0,
        y in -50.0f64..50.0,
        sigma in prop_oneof![Just(0.0), 1e-4f64..5.0],
        class in 0usize..2,
    ) {
        let spec = build_fractal(0);
        let p = Vec2::new(x, y);
        let s = spec.score(Some(class), p, sigma);
        prop_assert!(s.x.is_finite() && s.y.is_finite());
        let d = spec.density(Some(class), p, sigma);
        prop_assert!(d >= 0.0 && d.is_finite());
        prop_assert!(spec.log_density(Some(class), p, sigma).is_finite());
    }

    #[test]
    fn marginal_is_average_of_classes(seed in 0u64..64, x in -1.5f64..1.5, y in -1.5f64..1.5) {
        // The class marginal's density is the average of the class densities.
        let spec = build_fractal(seed);
        let p = Vec2::new(x, y);
        let avg = 0.5 * (spec.density(Some(0), p, 0.2) + spec.density(Some(1), p, 0.2));
        let marg = spec.density(None, p, 0.2);
        prop_assert!((avg - marg).abs() <= 1e-10 * marg.max(1e-300));
    }
}
