//! The full toy pipeline: data, three models, five sampling conditions,
//! metrics and figures, all derived from one seed.

use std::path::Path;

use guidelab::denoiser::Denoiser;
use guidelab::evalmetrics::{calibrate_thresholds, MetricReport};
use guidelab::guidance::{GuidanceSpec, Guided};
use guidelab::mixture::{build_fractal, MixtureFile, MixtureSpec};
use guidelab::netmodel::Model;
use guidelab::render::{fig1_panel, fig2_panels, fig9_panels};
use guidelab::sampler::write_population_csv;
use guidelab::trainer::DEFAULT_EMA_SIGMA_RELS;
use guidelab::{Result, Vec2};
use serde_json::{Map, Value};

use crate::args::{DataArgs, ReproArgs, TrainArgs};
use crate::commands::*;
use crate::settings::{fingerprint, output_dir, prepare_output};

/// Sampling conditions in panel order.
pub const CONDITIONS: [&str; 5] = ["ground_truth", "unguided", "cfg", "naive_truncation", "autoguidance"];

/// Model roles and the stream of the run seed that trains each.
const MODELS: [(&str, u64); 3] = [("main", 1), ("reduced", 2), ("uncond", 3)];

fn model_args(a: &ReproArgs, role: &str, seed_role: u64, dir: &Path) -> TrainArgs {
    let (width, iterations, unconditional) = match role {
        "main" => (a.main_width, a.main_iterations, false),
        "reduced" => (a.reduced_width, a.reduced_iterations, false),
        _ => (a.uncond_width, a.uncond_iterations, true),
    };
    let d = guidelab::trainer::TrainConfig::default();
    TrainArgs {
        data: DataArgs {
            data: None,
            mixture_seed: a.mixture_seed,
        },
        width,
        unconditional,
        head: "energy".into(),
        iterations,
        batch_size: a.batch_size,
        p_mean: d.p_mean,
        p_std: d.p_std,
        alpha_ref: d.alpha_ref,
        t_ref: d.t_ref,
        loss: "exact_sm".into(),
        ema_sigma_rels: DEFAULT_EMA_SIGMA_RELS.to_vec(),
        seed: derive_seed(a.seed, seed_role),
        out: Some(dir.to_path_buf()),
    }
}

fn train_role(a: &ReproArgs, spec: &MixtureSpec, role: &str, seed_role: u64, root: &Path) -> Result<Model> {
    let dir = root.join("models").join(role);
    let t = model_args(a, role, seed_role, &dir);
    let (arch, config) = train_setup(&t, spec.class_count())?;
    prepare_output(&dir, "train", &t)?;
    eprintln!("repro: training {role} (width {}, {} iterations)", t.width, t.iterations);
    let outcome = train_model(spec, arch, &config, &dir.join("abort.aglb"))?;
    outcome.checkpoint().write(&dir.join(CHECKPOINT_FILE))?;
    write_loss_csv(&dir.join("loss.csv"), &outcome.history)?;
    let params = outcome
        .ema(a.ema)
        .ok_or_else(|| guidelab::Error::InvalidArgument(format!("--ema {} is not a stored EMA length", a.ema)))?;
    Ok(Model::new(params.clone()))
}

pub fn repro(a: ReproArgs) -> Result<()> {
    let out = output_dir(a.out.as_deref(), "repro");
    let sched = schedule(&a.schedule)?;
    let fr = frame(&a.figure)?;
    if !DEFAULT_EMA_SIGMA_RELS.contains(&a.ema) {
        return Err(guidelab::Error::InvalidArgument(format!("--ema {} is not a stored EMA length", a.ema)));
    }
    prepare_output(&out, "repro", &a)?;
    let fp = fingerprint("repro", &a)?;

    let spec = build_fractal(a.mixture_seed);
    if a.figure.figure_class >= spec.class_count() {
        return Err(guidelab::Error::InvalidArgument("--figure-class out of range".into()));
    }
    eprintln!("repro: calibrating outlier thresholds");
    let thresholds = calibrate_thresholds(&spec, a.calibration_samples, a.mixture_seed)?;
    MixtureFile::from_spec(&spec, Some(thresholds.clone())).write(&out.join(MIXTURE_FILE))?;

    let mut models = Vec::with_capacity(MODELS.len());
    for (role, k) in MODELS {
        models.push(train_role(&a, &spec, role, k, &out)?);
    }
    let [main, reduced, uncond] = <[Model; 3]>::try_from(models).ok().expect("three models");

    let classes: Vec<usize> = (0..spec.class_count()).collect();
    let samples_dir = out.join("samples");
    prepare_output(&samples_dir, "repro", &a)?;
    let mut metrics = Map::new();
    let mut shown: Vec<(String, Vec<Vec2>)> = Vec::new();
    for name in CONDITIONS {
        eprintln!("repro: sampling {name}");
        let pops = if name == "ground_truth" {
            ground_truth_populations(&spec, &classes, a.count, a.seed)
        } else {
            let (g, guides): (GuidanceSpec, Vec<&dyn Denoiser>) = match name {
                "unguided" => (GuidanceSpec::none(), vec![]),
                "cfg" => (GuidanceSpec::cfg(a.cfg_w), vec![&uncond]),
                "naive_truncation" => (GuidanceSpec::naive_truncation(a.trunc_factor), vec![]),
                _ => (GuidanceSpec::autoguidance(a.autoguidance_w), vec![&reduced]),
            };
            let guided = Guided::new(g, &main, guides)?;
            sample_populations(&guided, &sched, &classes, a.count, a.seed, false)?.0
        };
        write_population_csv(&samples_dir.join(format!("{name}.csv")), &pops)?;
        let report = MetricReport::evaluate_classes(&pops, &spec, &thresholds, format!("{fp}/{name}"))?;
        println!(
            "{name:17} outlier_fraction {:.4}  coverage {:.4}  grid_kl {:.4}  composite {:.4}",
            report.outlier_fraction, report.coverage, report.grid_kl, report.composite
        );
        metrics.insert(name.to_string(), serde_json::to_value(&report)?);
        let pts = pops
            .into_iter()
            .find(|(c, _)| *c == a.figure.figure_class)
            .map(|(_, p)| p)
            .unwrap_or_default();
        shown.push((name.to_string(), pts));
    }
    write_json(&out.join("metrics.json"), &Value::Object(metrics))?;

    if a.figures {
        let dir = out.join("figures");
        prepare_output(&dir, "repro", &a)?;
        let _ = std::fs::remove_file(dir.join("captions.txt"));
        let st = style(&a.figure);
        let class = a.figure.figure_class;
        eprintln!("repro: rendering fig1");
        let titles = [
            "ground truth",
            "no guidance",
            &format!("classifier-free guidance, w = {}", a.cfg_w),
            &format!("naive truncation, score x {}", a.trunc_factor),
            &format!("autoguidance, w = {}", a.autoguidance_w),
        ];
        let mut panels = Vec::new();
        for (k, ((name, pts), title)) in shown.iter().zip(titles).enumerate() {
            let tag = format!("fig1{}_{name}", (b'a' + k as u8) as char);
            panels.push(fig1_panel(&spec, class, pts, &tag, title, fr)?);
        }
        write_panels(&dir, &panels, &st)?;
        eprintln!("repro: rendering fig2");
        write_panels(&dir, &fig2_panels(&spec, &main, &uncond, class, a.cfg_w, fr, a.seed)?, &st)?;
        eprintln!("repro: rendering fig9");
        write_panels(&dir, &fig9_panels(&spec, &main, &uncond, &reduced, class, fr)?, &st)?;
    }
    println!("{}: done", out.display());
    Ok(())
}
