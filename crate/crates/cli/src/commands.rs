use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use guidelab::checkpoint::Checkpoint;
use guidelab::degrade::{degradation_experiment, write_degradation_csv, CorruptionKind, CorruptionSpec, ScanSetup};
use guidelab::denoiser::Denoiser;
use guidelab::evalmetrics::{calibrate_thresholds, sweep as run_sweep, MetricReport, SweepConfig, SweepSpace, SweepState};
use guidelab::guidance::{GuidanceMode, GuidanceSpec, Guided};
use guidelab::mixture::{build_fractal, MixtureFile, MixtureSpec};
use guidelab::netmodel::{ArchDescriptor, Head, Model, ModelParams};
use guidelab::render::{
    fig1_panel, fig2_panels, fig9_panels, render_figure, Extent, Panel, PresetFrame, Style,
};
use guidelab::sampler::{
    class_seed, read_population_csv, sample_range, write_population_csv, write_trajectories_csv, SigmaSchedule,
};
use guidelab::trainer::{self, LossKind, TrainConfig};
use guidelab::{Error, Result, Vec2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::*;
use crate::settings::{fingerprint, output_dir, prepare_output};

pub const MIXTURE_FILE: &str = "mixture.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.aglb";
pub const POPULATION_FILE: &str = "population.csv";

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Independent 64-bit seed for `role` within a run seeded by `seed`.
pub fn derive_seed(seed: u64, role: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role);
    rng.next_u64()
}

/// The mixture and any thresholds stored with it.
fn load_spec(data: &DataArgs) -> Result<(MixtureSpec, Option<Vec<f64>>)> {
    Ok(match &data.data {
        Some(path) => {
            let file = MixtureFile::read(path)?;
            (file.to_spec()?, file.outlier_thresholds)
        }
        None => (build_fractal(data.mixture_seed), None),
    })
}

/// The mixture plus its per-class outlier thresholds, calibrated here when
/// the mixture file does not carry them.
pub fn load_mixture(data: &DataArgs) -> Result<(MixtureSpec, Vec<f64>)> {
    let (spec, cached) = load_spec(data)?;
    let thresholds = match cached {
        Some(t) if t.len() == spec.class_count() => t,
        _ => {
            eprintln!("calibrating outlier thresholds");
            calibrate_thresholds(&spec, guidelab::evalmetrics::CALIBRATION_SAMPLES, spec.seed())?
        }
    };
    Ok((spec, thresholds))
}

/// Model from a checkpoint: the EMA table of length `ema`, or the raw
/// weights when `ema` is 0.
pub fn load_model(path: &Path, ema: f64) -> Result<Model> {
    let ck = Checkpoint::read(path)?;
    if ema == 0.0 {
        return Ok(Model::new(ck.params));
    }
    let params = ck.ema_params(ema).ok_or_else(|| {
        let have: Vec<f64> = ck.emas.iter().map(|e| e.sigma_rel).collect();
        usage(format!("{}: no EMA table for {ema} (have {have:?})", path.display()))
    })?;
    Ok(Model::new(params.clone()))
}

pub fn schedule(a: &ScheduleArgs) -> Result<SigmaSchedule> {
    SigmaSchedule::new(a.steps, a.sigma_min, a.sigma_max, a.rho)
}

pub fn guidance_spec(a: &GuidanceArgs) -> Result<GuidanceSpec> {
    let mut g = GuidanceSpec {
        mode: a.mode,
        weight: a.w,
        blend_alpha: a.alpha,
        truncation_factor: a.trunc_factor,
        interval: None,
    };
    if let (Some(lo), Some(hi)) = (a.interval_lo, a.interval_hi) {
        g = g.with_interval(lo, hi);
    }
    g.validate()?;
    Ok(g)
}

fn class_list(requested: &[usize], spec: &MixtureSpec) -> Result<Vec<usize>> {
    if requested.is_empty() {
        return Ok((0..spec.class_count()).collect());
    }
    if let Some(c) = requested.iter().find(|&&c| c >= spec.class_count()) {
        return Err(usage(format!("class {c} out of range (mixture has {})", spec.class_count())));
    }
    Ok(requested.to_vec())
}

/// Samples each class with its own seed; optionally keeps trajectories.
pub fn sample_populations(
    denoiser: &dyn Denoiser,
    schedule: &SigmaSchedule,
    classes: &[usize],
    count: usize,
    seed: u64,
    record: bool,
) -> Result<(Vec<(usize, Vec<Vec2>)>, Vec<guidelab::sampler::TrajectoryRecord>)> {
    let mut pops = Vec::with_capacity(classes.len());
    let mut recs = Vec::new();
    for &c in classes {
        let (xs, r) = sample_range(denoiser, schedule, c, 0..count, class_seed(seed, c), record)?;
        pops.push((c, xs));
        recs.extend(r);
    }
    Ok((pops, recs))
}

/// Ground-truth draws at `σ = 0`, one stream per class.
pub fn ground_truth_populations(spec: &MixtureSpec, classes: &[usize], count: usize, seed: u64) -> Vec<(usize, Vec<Vec2>)> {
    classes
        .iter()
        .map(|&c| {
            let mut rng = ChaCha8Rng::seed_from_u64(class_seed(seed, c));
            rng.set_stream(1);
            (c, spec.sample(Some(c), count, 0.0, &mut rng))
        })
        .collect()
}

pub fn make_data(a: MakeDataArgs) -> Result<()> {
    let out = output_dir(a.out.as_deref(), "make-data");
    prepare_output(&out, "make-data", &a)?;
    let spec = build_fractal(a.mixture_seed);
    let thresholds = calibrate_thresholds(&spec, a.calibration_samples, a.mixture_seed)?;
    let path = out.join(MIXTURE_FILE);
    MixtureFile::from_spec(&spec, Some(thresholds.clone())).write(&path)?;
    println!("{}: {} components, thresholds {thresholds:?}", path.display(), spec.total_components());
    Ok(())
}

/// Builds the training configuration and architecture for `a`.
pub fn train_setup(a: &TrainArgs, class_count: usize) -> Result<(ArchDescriptor, TrainConfig)> {
    let head: Head = a.head.parse()?;
    let arch = ArchDescriptor::new(a.width, head, if a.unconditional { 0 } else { class_count })?;
    let loss_kind: LossKind = a.loss.parse()?;
    let config = TrainConfig {
        iterations: a.iterations,
        batch_size: a.batch_size,
        p_mean: a.p_mean,
        p_std: a.p_std,
        alpha_ref: a.alpha_ref,
        t_ref: a.t_ref,
        loss_kind,
        ema_sigma_rels: a.ema_sigma_rels.clone(),
        seed: a.seed,
    };
    config.validate()?;
    Ok((arch, config))
}

/// Trains from scratch; initialization and batches use separate streams of
/// `config.seed`.
pub fn train_model(spec: &MixtureSpec, arch: ArchDescriptor, config: &TrainConfig, abort: &Path) -> Result<trainer::TrainOutcome> {
    let params = ModelParams::init(arch, derive_seed(config.seed, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    trainer::train(params, spec, config, &mut rng, Some(abort))
}

pub fn write_loss_csv(path: &Path, history: &[trainer::StepRecord]) -> Result<()> {
    let mut text = String::from("step,loss,lr\n");
    for r in history {
        text.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let out = output_dir(a.out.as_deref(), "train");
    let (spec, _) = load_spec(&a.data)?;
    let (arch, config) = train_setup(&a, spec.class_count())?;
    prepare_output(&out, "train", &a)?;
    eprintln!("training width {} for {} iterations", a.width, a.iterations);
    let outcome = train_model(&spec, arch, &config, &out.join("abort.aglb"))?;
    let path = out.join(CHECKPOINT_FILE);
    outcome.checkpoint().write(&path)?;
    write_loss_csv(&out.join("loss.csv"), &outcome.history)?;
    println!("{}: final loss {:.6}", path.display(), outcome.tail_loss(1));
    Ok(())
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let out = output_dir(a.out.as_deref(), "sample");
    let g = guidance_spec(&a.guidance)?;
    let sched = schedule(&a.schedule)?;
    let main = load_model(&a.checkpoint, a.ema)?;
    let guide_paths: Vec<&PathBuf> = [&a.guide, &a.second_guide].into_iter().flatten().collect();
    let needed = g.mode.guides_needed();
    if guide_paths.len() < needed {
        return Err(usage(format!("mode {} needs {needed} guide checkpoint(s)", g.mode)));
    }
    let guides = guide_paths[..needed]
        .iter()
        .map(|p| load_model(p, a.ema))
        .collect::<Result<Vec<_>>>()?;
    let (spec, _) = load_spec(&a.data)?;
    let classes = class_list(&a.classes, &spec)?;
    prepare_output(&out, "sample", &a)?;
    let guided = Guided::new(g, &main, guides.iter().map(|m| m as &dyn Denoiser).collect())?;
    let (pops, recs) = sample_populations(&guided, &sched, &classes, a.count, a.seed, a.trajectories)?;
    let path = out.join(POPULATION_FILE);
    write_population_csv(&path, &pops)?;
    if a.trajectories {
        write_trajectories_csv(&out.join("trajectories.csv"), &recs)?;
    }
    println!("{}: {} samples", path.display(), pops.iter().map(|p| p.1.len()).sum::<usize>());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let out = output_dir(a.out.as_deref(), "eval");
    let pops = read_population_csv(&a.population)?;
    let (spec, thresholds) = load_mixture(&a.data)?;
    prepare_output(&out, "eval", &a)?;
    let report = MetricReport::evaluate_classes(&pops, &spec, &thresholds, fingerprint("eval", &a)?)?;
    write_json(&out.join("metrics.json"), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn nearest_index(grid: &[f64], v: f64) -> usize {
    grid.iter()
        .enumerate()
        .min_by(|x, y| (x.1 - v).abs().total_cmp(&(y.1 - v).abs()))
        .map_or(0, |(i, _)| i)
}

pub const SWEEP_STATE_FILE: &str = "sweep_state.json";

pub fn sweep(a: SweepArgs) -> Result<()> {
    let out = output_dir(a.out.as_deref(), "sweep");
    if !matches!(a.mode, GuidanceMode::Cfg | GuidanceMode::Autoguidance) {
        return Err(usage("sweep supports --mode cfg or autoguidance"));
    }
    let sched = schedule(&a.schedule)?;
    let space = SweepSpace::new(vec![
        ("w".into(), a.w_grid.clone()),
        ("ema_main".into(), a.ema_main_grid.clone()),
        ("ema_guide".into(), a.ema_guide_grid.clone()),
    ])?;
    let start = vec![
        nearest_index(&a.w_grid, a.start_w),
        nearest_index(&a.ema_main_grid, a.start_ema_main),
        nearest_index(&a.ema_guide_grid, a.start_ema_guide),
    ];
    let config = SweepConfig {
        start,
        radius: a.radius,
        budget: a.budget,
        repeats: a.repeats,
    };
    let state_path = out.join(SWEEP_STATE_FILE);
    let state = if a.resume && state_path.exists() {
        let mut st = SweepState::read(&state_path)?;
        if st.space != space || st.config.start != config.start || st.config.radius != config.radius || st.config.repeats != config.repeats {
            return Err(usage(format!(
                "{} was written for a different search space; use --resume false to restart",
                state_path.display()
            )));
        }
        st.config.budget = config.budget;
        st
    } else {
        SweepState::new(space, config)?
    };
    let main_ck = Checkpoint::read(&a.checkpoint)?;
    let guide_ck = Checkpoint::read(&a.guide)?;
    let pick = |ck: &Checkpoint, path: &Path, s: f64| -> Result<Model> {
        ck.ema_params(s)
            .map(|p| Model::new(p.clone()))
            .ok_or_else(|| usage(format!("{}: no EMA table for {s}", path.display())))
    };
    let mains = a.ema_main_grid.iter().map(|&s| pick(&main_ck, &a.checkpoint, s)).collect::<Result<Vec<_>>>()?;
    let guides = a.ema_guide_grid.iter().map(|&s| pick(&guide_ck, &a.guide, s)).collect::<Result<Vec<_>>>()?;
    let (spec, thresholds) = load_mixture(&a.data)?;
    let classes: Vec<usize> = (0..mains[0].arch().class_count.max(1)).collect();
    prepare_output(&out, "sweep", &a)?;
    let fp = fingerprint("sweep", &a)?;
    let mut objective = |p: &[f64], repeat: usize| -> Result<f64> {
        let m = &mains[nearest_index(&a.ema_main_grid, p[1])];
        let g = &guides[nearest_index(&a.ema_guide_grid, p[2])];
        let spec_g = GuidanceSpec {
            mode: a.mode,
            weight: p[0],
            ..GuidanceSpec::default()
        };
        let guided = Guided::new(spec_g, m, vec![g as &dyn Denoiser])?;
        let (pops, _) = sample_populations(&guided, &sched, &classes, a.count, derive_seed(a.seed, repeat as u64), false)?;
        let r = MetricReport::evaluate_classes(&pops, &spec, &thresholds, fp.clone())?;
        eprintln!("w={} ema_main={} ema_guide={} repeat={repeat}: {:.5}", p[0], p[1], p[2], r.composite);
        Ok(r.composite)
    };
    let state = run_sweep(&mut objective, state)?;
    state.write(&state_path)?;
    match &state.best {
        Some(b) => println!(
            "best w={} ema_main={} ema_guide={} composite={} after {} evaluations{}",
            b.params[0],
            b.params[1],
            b.params[2],
            b.best(),
            state.evaluations,
            if state.converged { "" } else { " (budget exhausted)" }
        ),
        None => println!("no evaluations within budget"),
    }
    Ok(())
}

/// Parses `KIND:STRENGTH/KIND:STRENGTH`.
pub fn parse_pair(s: &str, frozen: bool, seed: u64) -> Result<(CorruptionSpec, CorruptionSpec)> {
    let one = |part: &str, role: u64| -> Result<CorruptionSpec> {
        let (kind, strength) = part
            .split_once(':')
            .ok_or_else(|| usage(format!("corruption `{part}` is not KIND:STRENGTH")))?;
        let kind: CorruptionKind = kind.trim().parse()?;
        let strength: f64 = strength
            .trim()
            .parse()
            .map_err(|_| usage(format!("bad corruption strength in `{part}`")))?;
        let spec = CorruptionSpec {
            kind,
            strength,
            seed: derive_seed(seed, role),
            frozen,
        };
        spec.validate()?;
        Ok(spec)
    };
    let (m, g) = s
        .split_once('/')
        .ok_or_else(|| usage(format!("pairing `{s}` is not MAIN/GUIDE")))?;
    Ok((one(m, 10)?, one(g, 11)?))
}

pub fn corrupt_experiment(a: CorruptArgs) -> Result<()> {
    let out = output_dir(a.out.as_deref(), "corrupt-experiment");
    let sched = schedule(&a.schedule)?;
    let pairs = a
        .pairs
        .iter()
        .map(|p| parse_pair(p, a.frozen, a.seed))
        .collect::<Result<Vec<_>>>()?;
    if !a.w_grid.contains(&1.0) {
        return Err(usage("--w-grid must contain 1 as the unguided reference"));
    }
    let base = load_model(&a.checkpoint, a.ema)?;
    let (spec, thresholds) = load_mixture(&a.data)?;
    prepare_output(&out, "corrupt-experiment", &a)?;
    let setup = ScanSetup {
        spec: &spec,
        thresholds: &thresholds,
        schedule: sched,
        per_class: a.count,
        seed: a.seed,
    };
    let mut results = Vec::with_capacity(pairs.len());
    for (m, g) in pairs {
        let r = degradation_experiment(&base, m, g, &a.w_grid, &setup)?;
        println!(
            "{}:{} guided by {}:{}: best w={} metric={:.5} improvement={:.1}%",
            m.kind,
            m.strength,
            g.kind,
            g.strength,
            r.best_w,
            r.best_metric,
            100.0 * r.improvement().unwrap_or(0.0)
        );
        results.push(r);
    }
    write_degradation_csv(&out.join("degradation.csv"), &results)?;
    write_json(&out.join("degradation.json"), &results)
}

pub fn style(f: &FigureArgs) -> Style {
    Style {
        width: f.image_size,
        height: f.image_size,
        ..Style::default()
    }
}

pub fn frame(f: &FigureArgs) -> Result<PresetFrame> {
    if !(f.contour_mass > 0.0 && f.contour_mass < 1.0) {
        return Err(usage("--contour-mass must lie in (0, 1)"));
    }
    Ok(PresetFrame {
        extent: Extent::DEFAULT,
        resolution: f.resolution,
        contour_mass: f.contour_mass,
    })
}

/// Writes each panel as `<name>.ppm` + `<name>.csv` and lists the captions.
pub fn write_panels(dir: &Path, panels: &[Panel], style: &Style) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut captions = String::new();
    for p in panels {
        render_figure(&p.layers, style, &dir.join(format!("{}.ppm", p.name)))?;
        captions.push_str(&format!("{}: {}\n", p.name, p.caption));
    }
    let path = dir.join("captions.txt");
    let mut existing = std::fs::read_to_string(&path).unwrap_or_default();
    existing.push_str(&captions);
    std::fs::write(&path, existing).map_err(|e| io_err(&path, e))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str, preset: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("preset {preset} needs --{flag}")))
}

pub fn render(a: RenderArgs) -> Result<()> {
    let out = output_dir(a.out.as_deref(), "render");
    let fr = frame(&a.figure)?;
    let st = style(&a.figure);
    let (spec, _) = load_spec(&a.data)?;
    let class = a.figure.figure_class;
    if class >= spec.class_count() {
        return Err(usage(format!("class {class} out of range")));
    }
    let panels = match a.preset.as_str() {
        "fig1" => {
            if a.populations.is_empty() {
                return Err(usage("preset fig1 needs --populations"));
            }
            let mut panels = Vec::new();
            for (k, path) in a.populations.iter().enumerate() {
                let pops: BTreeMap<usize, Vec<Vec2>> = read_population_csv(path)?.into_iter().collect();
                let pts = pops.get(&class).cloned().unwrap_or_default();
                let stem = path.file_stem().map_or_else(|| format!("{k}"), |s| s.to_string_lossy().into_owned());
                let name = format!("fig1{}_{stem}", (b'a' + (k % 26) as u8) as char);
                panels.push(fig1_panel(&spec, class, &pts, &name, &stem, fr)?);
            }
            panels
        }
        "fig2" => {
            let main = load_model(required(&a.checkpoint, "checkpoint", "fig2")?, a.ema)?;
            let uncond = load_model(required(&a.uncond_guide, "uncond-guide", "fig2")?, a.ema)?;
            fig2_panels(&spec, &main, &uncond, class, a.cfg_w, fr, a.seed)?
        }
        _ => {
            let main = load_model(required(&a.checkpoint, "checkpoint", "fig9")?, a.ema)?;
            let uncond = load_model(required(&a.uncond_guide, "uncond-guide", "fig9")?, a.ema)?;
            let reduced = load_model(required(&a.reduced_guide, "reduced-guide", "fig9")?, a.ema)?;
            fig9_panels(&spec, &main, &uncond, &reduced, class, fr)?
        }
    };
    prepare_output(&out, "render", &a)?;
    let _ = std::fs::remove_file(out.join("captions.txt"));
    write_panels(&out, &panels, &st)?;
    println!("{}: {} panels", out.display(), panels.len());
    Ok(())
}
