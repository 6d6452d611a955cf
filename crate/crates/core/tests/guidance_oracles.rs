//! Guidance against Bayes' rule on the analytic mixture, plus algebraic
//! properties over random models.

use guidelab::denoiser::{point_streams, Denoiser, MixtureOracle};
use guidelab::guidance::{log_ratio_field, GuidanceSpec, Guided};
use guidelab::mixture::build_fractal;
use guidelab::netmodel::{ArchDescriptor, Head, Model, ModelParams};
use guidelab::Vec2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(width: usize, seed: u64, gain: f64) -> Model {
    let mut p = ModelParams::init(ArchDescriptor::new(width, Head::Energy, 2).unwrap(), seed);
    p.gain = gain;
    Model::new(p)
}

fn one(d: &dyn Denoiser, x: Vec2, sigma: f64, class: usize, score: bool) -> Vec2 {
    let mut st = point_streams(0, 0, 1);
    if score {
        d.score_batch(&[x], sigma, class, &mut st).unwrap()[0]
    } else {
        d.denoise_batch(&[x], sigma, class, &mut st).unwrap()[0]
    }
}

/// CFG on exact densities is the score of `p(x) p(c|x)^w`; the classifier
/// gradient comes from finite differences of Bayes' rule.
#[test]
fn cfg_on_oracles_follows_bayes_rule() {
    let spec = build_fractal(0);
    let cond = MixtureOracle::conditional(&spec);
    let marg = MixtureOracle::marginal(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-5;
    for i in 0..50 {
        let class = i % 2;
        let sigma = rng.random_range(0.05..1.0);
        let x = spec.sample(Some(class), 1, sigma, &mut rng)[0];
        let log_post = |d: Vec2| {
            spec.log_density(Some(class), x + d, sigma) + 0.5f64.ln() - spec.log_density(None, x + d, sigma)
        };
        let grad = Vec2::new(
            (log_post(Vec2::new(h, 0.0)) - log_post(Vec2::new(-h, 0.0))) / (2.0 * h),
            (log_post(Vec2::new(0.0, h)) - log_post(Vec2::new(0.0, -h))) / (2.0 * h),
        );
        for w in [2.0, 4.0] {
            let g = Guided::new(GuidanceSpec::cfg(w), &cond, vec![&marg]).unwrap();
            let s = one(&g, x, sigma, class, true);
            let expect = spec.score(None, x, sigma) + grad * w;
            assert!((s - expect).norm() <= 1e-5 * expect.norm().max(1.0), "{s:?} vs {expect:?}");
        }
    }
}

#[test]
fn log_ratio_gradient_matches_scalar_field() {
    let main = model(32, 1, 0.8);
    let guide = model(16, 2, 1.2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    for _ in 0..50 {
        let x = Vec2::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
        let sigma = rng.random_range(0.02..2.0);
        let class = rng.random_range(0..2);
        let pts = [x, x + Vec2::new(h, 0.0), x - Vec2::new(h, 0.0), x + Vec2::new(0.0, h), x - Vec2::new(0.0, h)];
        let f = log_ratio_field(&main, &guide, &pts, sigma, class).unwrap();
        let v = f.values.unwrap();
        let fd = Vec2::new((v[1] - v[2]) / (2.0 * h), (v[3] - v[4]) / (2.0 * h));
        let g = f.gradients[0];
        assert!((g - fd).norm() <= 1e-6 * g.norm().max(1e-2), "{g:?} vs {fd:?}");
    }
}

#[test]
fn identical_models_give_a_flat_ratio_and_no_guidance() {
    let m = model(32, 5, 0.9);
    let twin = model(32, 5, 0.9);
    let pts = [Vec2::new(0.3, -0.2), Vec2::new(-1.0, 0.5)];
    let f = log_ratio_field(&m, &twin, &pts, 0.1, 1).unwrap();
    assert!(f.gradients.iter().all(|g| *g == Vec2::zeros()));
    assert!(f.values.unwrap().iter().all(|v| *v == 0.0));
    let g = Guided::new(GuidanceSpec::autoguidance(3.0), &m, vec![&twin]).unwrap();
    for &x in &pts {
        assert!((one(&g, x, 0.1, 1, true) - one(&m, x, 0.1, 1, true)).norm() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Denoiser and score forms of the guided model describe the same map,
    /// and both are affine in `w`.
    #[test]
    fn guided_output_is_affine_in_w(
        w in -2.0f64..6.0,
        x in -2.0f64..2.0,
        y in -2.0f64..2.0,
        log_sigma in -6.0f64..1.5,
        class in 0usize..2,
        seed in 0u64..1000,
    ) {
        let main = model(32, seed, 0.7);
        let guide = model(16, seed + 1, 1.3);
        let sigma = log_sigma.exp();
        let p = Vec2::new(x, y);
        let at = |w: f64, score: bool| {
            let g = Guided::new(GuidanceSpec::autoguidance(w), &main, vec![&guide]).unwrap();
            one(&g, p, sigma, class, score)
        };
        let d = at(w, false);
        let s = at(w, true);
        let scale = d.norm().max(p.norm()).max(1.0);
        prop_assert!((d - (p + s * (sigma * sigma))).norm() <= 1e-10 * scale);
        let interp = at(0.0, false) * (1.0 - w) + at(1.0, false) * w;
        prop_assert!((d - interp).norm() <= 1e-10 * scale);
        prop_assert_eq!(at(1.0, false), one(&main, p, sigma, class, false));
    }

    #[test]
    fn multi_blends_between_its_endpoints(
        w in 0.0f64..5.0,
        alpha in 0.0f64..=1.0,
        x in -2.0f64..2.0,
        y in -2.0f64..2.0,
        sigma in 0.01f64..3.0,
    ) {
        let main = model(32, 1, 0.7);
        let mut up = ModelParams::init(ArchDescriptor::unconditional(16).unwrap(), 2);
        up.gain = 0.4;
        let uncond = Model::new(up);
        let reduced = model(16, 3, 1.1);
        let p = Vec2::new(x, y);
        let eval = |g: GuidanceSpec| {
            let gd = Guided::new(g, &main, vec![&uncond, &reduced]).unwrap();
            one(&gd, p, sigma, 0, false)
        };
        let cfg = eval(GuidanceSpec::cfg(w));
        let ag = Guided::new(GuidanceSpec::autoguidance(w), &main, vec![&reduced]).unwrap();
        let ag = one(&ag, p, sigma, 0, false);
        let blend = cfg * (1.0 - alpha) + ag * alpha;
        let m = eval(GuidanceSpec::multi(w, alpha));
        prop_assert!((m - blend).norm() <= 1e-10 * blend.norm().max(1.0));
    }

    #[test]
    fn interval_switches_guidance_off_outside(sigma in 1e-3f64..5.0) {
        let main = model(32, 7, 0.7);
        let guide = model(16, 8, 1.1);
        let g = Guided::new(GuidanceSpec::autoguidance(3.0).with_interval(0.19, 5.0), &main, vec![&guide]).unwrap();
        let p = Vec2::new(0.2, 0.4);
        let out = one(&g, p, sigma, 0, false);
        let plain = one(&main, p, sigma, 0, false);
        prop_assert_eq!(out == plain, sigma <= 0.19);
    }
}
