//! Layer stacks for the toy figures: sample scatters (fig1), the close look at
//! one intermediate noise level (fig2), and the density progression (fig9).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    contour_levels, raster_density, raster_log_ratio, raster_scores, DensitySource, Extent, Layer,
    Palette, BLACK, BLUE, GRAY, GREEN, ORANGE, QUIVER_GRID, RED,
};
use crate::denoiser::{point_streams, Denoiser};
use crate::guidance::{GuidanceSpec, Guided};
use crate::mixture::MixtureSpec;
use crate::netmodel::Model;
use crate::sampler::{heun_batch, SigmaSchedule};
use crate::{Result, Vec2};

/// Intermediate noise level of the close-up figure.
pub const FIG2_SIGMA_MID: f64 = 0.03;

/// Rows of the progression figure.
pub const FIG9_SIGMAS: [f64; 5] = [0.5, 0.25, 0.08, 0.03, 0.01];

/// Default mass fraction enclosed by ground-truth contours.
pub const CONTOUR_MASS: f64 = 0.99;

/// One output image: a file stem, its layers and a caption line.
#[derive(Debug, Clone)]
pub struct Panel {
    pub name: String,
    pub caption: String,
    pub layers: Vec<Layer>,
}

/// Ground-truth rasters at `σ = 0` are drawn with one cell of smoothing so
/// the thinnest components stay visible.
fn display_sigma(sigma: f64, frame: PresetFrame) -> f64 {
    let cell = (frame.extent.x1 - frame.extent.x0) / frame.resolution as f64;
    sigma.max(cell / 12f64.sqrt())
}

/// Everything the presets share besides the models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresetFrame {
    pub extent: Extent,
    /// Raster cells per axis.
    pub resolution: usize,
    /// Mass fraction enclosed by ground-truth contours.
    pub contour_mass: f64,
}

impl Default for PresetFrame {
    fn default() -> Self {
        Self {
            extent: Extent::DEFAULT,
            resolution: 256,
            contour_mass: CONTOUR_MASS,
        }
    }
}

fn gt_contour(
    spec: &MixtureSpec,
    class: usize,
    sigma: f64,
    frame: PresetFrame,
    color: [u8; 3],
) -> Result<Layer> {
    let raster = raster_density(
        DensitySource::Mixture(spec, Some(class)),
        display_sigma(sigma, frame),
        frame.extent,
        frame.resolution,
        frame.resolution,
    )?;
    let levels = contour_levels(&raster, &[frame.contour_mass])?;
    Ok(Layer::Contours {
        raster,
        levels,
        color,
    })
}

/// Ground-truth contours of both classes with `shown` highlighted, plus the
/// population of the shown class.
pub fn fig1_panel(
    spec: &MixtureSpec,
    shown: usize,
    population: &[Vec2],
    name: &str,
    title: &str,
    frame: PresetFrame,
) -> Result<Panel> {
    let heat = raster_density(
        DensitySource::Mixture(spec, Some(shown)),
        display_sigma(0.0, frame),
        frame.extent,
        frame.resolution,
        frame.resolution,
    )?;
    let mut layers = vec![Layer::Heatmap {
        raster: heat,
        palette: Palette::Sequential(ORANGE),
    }];
    for c in 0..spec.class_count() {
        let color = if c == shown { ORANGE } else { GRAY };
        layers.push(gt_contour(spec, c, 0.0, frame, color)?);
    }
    layers.push(Layer::Scatter {
        points: population.to_vec(),
        color: BLACK,
    });
    Ok(Panel {
        name: name.to_string(),
        caption: format!(
            "{title}: class {shown}, {} samples, contours hold {}% of mass",
            population.len(),
            100.0 * frame.contour_mass
        ),
        layers,
    })
}

fn model_density_layers(
    spec: &MixtureSpec,
    model: &Model,
    class: usize,
    sigma: f64,
    frame: PresetFrame,
    color: [u8; 3],
) -> Result<Vec<Layer>> {
    Ok(vec![
        Layer::Heatmap {
            raster: raster_density(
                DensitySource::Model(model, class),
                sigma,
                frame.extent,
                frame.resolution,
                frame.resolution,
            )?,
            palette: Palette::Sequential(color),
        },
        gt_contour(spec, class, sigma, frame, ORANGE)?,
    ])
}

fn ratio_layers(
    spec: &MixtureSpec,
    main: &Model,
    guide: &Model,
    class: usize,
    sigma: f64,
    frame: PresetFrame,
) -> Result<Vec<Layer>> {
    let (ratio, grad) = raster_log_ratio(
        main,
        guide,
        class,
        sigma,
        frame.extent,
        frame.resolution,
        frame.resolution,
    )?;
    Ok(vec![
        Layer::Heatmap {
            raster: ratio,
            palette: Palette::Diverging,
        },
        gt_contour(spec, class, sigma, frame, ORANGE)?,
        Layer::Quiver {
            raster: grad,
            color: BLUE,
            grid: QUIVER_GRID,
        },
    ])
}

/// Integrates ground-truth points noised to `σ_mid` down to zero.
fn trajectories(
    denoiser: &dyn Denoiser,
    spec: &MixtureSpec,
    class: usize,
    sigma_mid: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec2>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = spec.sample(Some(class), count, sigma_mid, &mut rng);
    let schedule = SigmaSchedule::new(
        16,
        SigmaSchedule::edm_default().sigma_min.min(sigma_mid / 2.0),
        sigma_mid,
        7.0,
    )?;
    let mut streams = point_streams(seed, 0, count);
    let (_, recs) = heun_batch(denoiser, &schedule, class, &starts, &mut streams, true)?;
    Ok(recs
        .unwrap_or_default()
        .iter()
        .map(|r| r.states())
        .collect())
}

/// The five close-up panels at `σ_mid`: main density with its scores, the
/// unconditional guide's density, their log ratio with its gradient, and
/// trajectories from `σ_mid` to 0 without guidance and with CFG.
#[allow(clippy::too_many_arguments)]
pub fn fig2_panels(
    spec: &MixtureSpec,
    main: &Model,
    uncond: &Model,
    class: usize,
    cfg_weight: f64,
    frame: PresetFrame,
    seed: u64,
) -> Result<Vec<Panel>> {
    let s = FIG2_SIGMA_MID;
    let mut a = model_density_layers(spec, main, class, s, frame, GREEN)?;
    a.push(Layer::Quiver {
        raster: raster_scores(
            main,
            class,
            s,
            frame.extent,
            frame.resolution,
            frame.resolution,
        )?,
        color: GREEN,
        grid: QUIVER_GRID,
    });
    let b = model_density_layers(spec, uncond, class, s, frame, RED)?;
    let c = ratio_layers(spec, main, uncond, class, s, frame)?;
    let count = 200;
    let cfg = Guided::new(GuidanceSpec::cfg(cfg_weight), main, vec![uncond])?;
    let mut panels = vec![
        (
            "fig2a_main_density",
            "main model density (grid-normalized)",
            a,
        ),
        (
            "fig2b_guide_density",
            "unconditional guide density (grid-normalized)",
            b,
        ),
        (
            "fig2c_log_ratio",
            "log ratio main/guide and its gradient",
            c,
        ),
    ];
    for (name, caption, d) in [
        (
            "fig2d_unguided",
            "trajectories without guidance",
            main as &dyn Denoiser,
        ),
        (
            "fig2e_cfg",
            "trajectories with classifier-free guidance",
            &cfg as &dyn Denoiser,
        ),
    ] {
        panels.push((
            name,
            caption,
            vec![
                gt_contour(spec, class, 0.0, frame, ORANGE)?,
                Layer::Trajectories {
                    paths: trajectories(d, spec, class, s, count, seed)?,
                    color: BLACK,
                },
            ],
        ));
    }
    Ok(panels
        .into_iter()
        .map(|(n, c, layers)| Panel {
            name: n.to_string(),
            caption: format!("{c}, sigma = {s}"),
            layers,
        })
        .collect())
}

/// 5 × 5 progression panels: for every σ in [`FIG9_SIGMAS`], the main
/// density, the unconditional (CFG) guide density, the reduced (autoguidance)
/// guide density, and the log ratios of main to each guide.
pub fn fig9_panels(
    spec: &MixtureSpec,
    main: &Model,
    uncond: &Model,
    reduced: &Model,
    class: usize,
    frame: PresetFrame,
) -> Result<Vec<Panel>> {
    let mut out = Vec::with_capacity(25);
    for (row, &s) in FIG9_SIGMAS.iter().enumerate() {
        let cols = [
            (
                "a_main",
                "main density",
                model_density_layers(spec, main, class, s, frame, GREEN)?,
            ),
            (
                "b_cfg_guide",
                "unconditional guide density",
                model_density_layers(spec, uncond, class, s, frame, RED)?,
            ),
            (
                "c_auto_guide",
                "reduced guide density",
                model_density_layers(spec, reduced, class, s, frame, RED)?,
            ),
            (
                "d_cfg_ratio",
                "log ratio main/unconditional",
                ratio_layers(spec, main, uncond, class, s, frame)?,
            ),
            (
                "e_auto_ratio",
                "log ratio main/reduced",
                ratio_layers(spec, main, reduced, class, s, frame)?,
            ),
        ];
        for (tag, caption, layers) in cols {
            out.push(Panel {
                name: format!("fig9_{row}{tag}"),
                caption: format!("{caption} (grid-normalized), sigma = {s}"),
                layers,
            });
        }
    }
    Ok(out)
}
