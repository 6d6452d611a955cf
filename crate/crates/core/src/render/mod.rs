//! Rasterized fields and a small compositor that writes binary PPM images.
//!
//! Every figure is written twice: as a P6 image and as a CSV sidecar holding
//! every plotted datum, from which [`read_figure_csv`] rebuilds the layers.
//! Model densities are grid-normalized: `exp(G)` is scaled so that its sum
//! times the cell area is one over the raster.

mod presets;

pub use presets::{
    fig1_panel, fig2_panels, fig9_panels, Panel, PresetFrame, CONTOUR_MASS, FIG2_SIGMA_MID,
    FIG9_SIGMAS,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::guidance::log_ratio_field;
use crate::mixture::MixtureSpec;
use crate::netmodel::Model;
use crate::sampler::csv_error;
use crate::{Error, Result, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Extent {
    pub const DEFAULT: Extent = Extent {
        x0: -2.0,
        y0: -2.0,
        x1: 2.0,
        y1: 2.0,
    };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0 < x1 && y0 < y1 && x0.is_finite() && y1.is_finite()) {
            return Err(Error::invalid(format!(
                "bad extent ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterKind {
    Density,
    LogRatio,
    ScoreField,
}

impl RasterKind {
    fn as_str(self) -> &'static str {
        match self {
            RasterKind::Density => "density",
            RasterKind::LogRatio => "log_ratio",
            RasterKind::ScoreField => "score_field",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "density" => Ok(RasterKind::Density),
            "log_ratio" => Ok(RasterKind::LogRatio),
            "score_field" => Ok(RasterKind::ScoreField),
            other => Err(sidecar_error(format!("unknown raster kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldValues {
    Scalar(Vec<f64>),
    Vector(Vec<Vec2>),
}

/// Values at cell centres, row-major with row 0 at the bottom (`y0`).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldRaster {
    pub extent: Extent,
    pub width: usize,
    pub height: usize,
    pub kind: RasterKind,
    pub values: FieldValues,
}

pub const MIN_RESOLUTION: usize = 16;

/// Cell centres of a `width × height` raster, row-major from the bottom.
pub fn cell_centers(extent: Extent, width: usize, height: usize) -> Vec<Vec2> {
    let dx = (extent.x1 - extent.x0) / width as f64;
    let dy = (extent.y1 - extent.y0) / height as f64;
    let mut out = Vec::with_capacity(width * height);
    for iy in 0..height {
        for ix in 0..width {
            out.push(Vec2::new(
                extent.x0 + (ix as f64 + 0.5) * dx,
                extent.y0 + (iy as f64 + 0.5) * dy,
            ));
        }
    }
    out
}

fn check_resolution(width: usize, height: usize) -> Result<()> {
    if width < MIN_RESOLUTION || height < MIN_RESOLUTION {
        return Err(Error::invalid(format!(
            "raster resolution must be at least {MIN_RESOLUTION}x{MIN_RESOLUTION}"
        )));
    }
    Ok(())
}

impl FieldRaster {
    pub fn scalar(
        extent: Extent,
        width: usize,
        height: usize,
        kind: RasterKind,
        values: Vec<f64>,
    ) -> Result<Self> {
        check_resolution(width, height)?;
        if values.len() != width * height || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "raster values must be finite and fill the grid",
            ));
        }
        Ok(Self {
            extent,
            width,
            height,
            kind,
            values: FieldValues::Scalar(values),
        })
    }

    pub fn vector(
        extent: Extent,
        width: usize,
        height: usize,
        kind: RasterKind,
        values: Vec<Vec2>,
    ) -> Result<Self> {
        check_resolution(width, height)?;
        if values.len() != width * height
            || values.iter().any(|v| !(v.x.is_finite() && v.y.is_finite()))
        {
            return Err(Error::invalid(
                "raster values must be finite and fill the grid",
            ));
        }
        Ok(Self {
            extent,
            width,
            height,
            kind,
            values: FieldValues::Vector(values),
        })
    }

    pub fn cell_area(&self) -> f64 {
        (self.extent.x1 - self.extent.x0) * (self.extent.y1 - self.extent.y0)
            / (self.width * self.height) as f64
    }

    pub fn scalars(&self) -> Result<&[f64]> {
        match &self.values {
            FieldValues::Scalar(v) => Ok(v),
            FieldValues::Vector(_) => Err(Error::invalid("expected a scalar raster")),
        }
    }

    pub fn vectors(&self) -> Result<&[Vec2]> {
        match &self.values {
            FieldValues::Vector(v) => Ok(v),
            FieldValues::Scalar(_) => Err(Error::invalid("expected a vector raster")),
        }
    }

    /// Cell containing `p`, if inside.
    fn cell(&self, p: Vec2) -> Option<usize> {
        let e = self.extent;
        let fx = (p.x - e.x0) / (e.x1 - e.x0) * self.width as f64;
        let fy = (p.y - e.y0) / (e.y1 - e.y0) * self.height as f64;
        if fx < 0.0 || fy < 0.0 || fx >= self.width as f64 || fy >= self.height as f64 {
            return None;
        }
        Some(fy as usize * self.width + fx as usize)
    }

    /// `−Σ p log p` of the raster viewed as cell masses.
    pub fn entropy(&self) -> Result<f64> {
        let v = self.scalars()?;
        let total: f64 = v.iter().sum();
        Ok(-v
            .iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| {
                let p = x / total;
                p * p.ln()
            })
            .sum::<f64>())
    }
}

/// What a density raster is computed from.
#[derive(Clone, Copy)]
pub enum DensitySource<'a> {
    /// Exact mixture density; `None` selects the class-marginal mixture.
    Mixture(&'a MixtureSpec, Option<usize>),
    /// Grid-normalized `exp(G)` of an energy-head model.
    Model(&'a Model, usize),
}

pub fn raster_density(
    source: DensitySource<'_>,
    sigma: f64,
    extent: Extent,
    width: usize,
    height: usize,
) -> Result<FieldRaster> {
    check_resolution(width, height)?;
    let pts = cell_centers(extent, width, height);
    let values = match source {
        DensitySource::Mixture(spec, class) => {
            if sigma < 0.0 {
                return Err(Error::invalid("noise level must be nonnegative"));
            }
            pts.iter().map(|&p| spec.density(class, p, sigma)).collect()
        }
        DensitySource::Model(model, class) => {
            grid_normalize(&model.energies(&pts, sigma, class)?, extent, width, height)
        }
    };
    FieldRaster::scalar(extent, width, height, RasterKind::Density, values)
}

/// `exp(g − max g)` scaled so the raster integrates to one.
pub fn grid_normalize(log_values: &[f64], extent: Extent, width: usize, height: usize) -> Vec<f64> {
    let m = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut v: Vec<f64> = log_values.iter().map(|g| (g - m).exp()).collect();
    let area = (extent.x1 - extent.x0) * (extent.y1 - extent.y0) / (width * height) as f64;
    let total: f64 = v.iter().sum::<f64>() * area;
    v.iter_mut().for_each(|x| *x /= total);
    v
}

/// Scalar `G_main − G_guide` raster and its gradient raster.
pub fn raster_log_ratio(
    main: &Model,
    guide: &Model,
    class: usize,
    sigma: f64,
    extent: Extent,
    width: usize,
    height: usize,
) -> Result<(FieldRaster, FieldRaster)> {
    check_resolution(width, height)?;
    let pts = cell_centers(extent, width, height);
    let f = log_ratio_field(main, guide, &pts, sigma, class)?;
    let values = f
        .values
        .ok_or_else(|| Error::invalid("log-ratio rasters need energy-head models"))?;
    Ok((
        FieldRaster::scalar(extent, width, height, RasterKind::LogRatio, values)?,
        FieldRaster::vector(extent, width, height, RasterKind::ScoreField, f.gradients)?,
    ))
}

/// Model scores on the raster grid.
pub fn raster_scores(
    model: &Model,
    class: usize,
    sigma: f64,
    extent: Extent,
    width: usize,
    height: usize,
) -> Result<FieldRaster> {
    check_resolution(width, height)?;
    let pts = cell_centers(extent, width, height);
    FieldRaster::vector(
        extent,
        width,
        height,
        RasterKind::ScoreField,
        model.scores(&pts, sigma, class)?,
    )
}

/// Density thresholds whose super-level sets hold each requested fraction of
/// the raster's mass (cells sorted by value, masses accumulated).
pub fn contour_levels(raster: &FieldRaster, mass_fractions: &[f64]) -> Result<Vec<f64>> {
    let v = raster.scalars()?;
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sorted.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("contours need a raster with positive mass"));
    }
    let mut cum = Vec::with_capacity(sorted.len());
    let mut acc = 0.0;
    for x in &sorted {
        acc += x;
        cum.push(acc / total);
    }
    mass_fractions
        .iter()
        .map(|&f| {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("mass fraction {f} outside [0, 1]")));
            }
            if f >= 1.0 {
                return Ok(*sorted.last().expect("nonempty raster"));
            }
            let k = cum.partition_point(|&c| c < f);
            Ok(sorted[k.min(sorted.len() - 1)])
        })
        .collect()
}

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const ORANGE: Rgb = [230, 120, 20];
pub const GRAY: Rgb = [110, 110, 110];
pub const GREEN: Rgb = [40, 150, 60];
pub const RED: Rgb = [200, 40, 40];
pub const BLUE: Rgb = [40, 80, 200];

/// Heatmap colouring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Palette {
    /// Background to `color` in proportion to `sqrt(v / max)`.
    Sequential(Rgb),
    /// Blue below zero, red above, symmetric about zero.
    Diverging,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Heatmap {
        raster: FieldRaster,
        palette: Palette,
    },
    Contours {
        raster: FieldRaster,
        levels: Vec<f64>,
        color: Rgb,
    },
    Scatter {
        points: Vec<Vec2>,
        color: Rgb,
    },
    /// Vector field sampled on a `grid × grid` lattice of arrows.
    Quiver {
        raster: FieldRaster,
        color: Rgb,
        grid: usize,
    },
    Trajectories {
        paths: Vec<Vec<Vec2>>,
        color: Rgb,
    },
}

/// Arrows per axis in quiver layers.
pub const QUIVER_GRID: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Style {
    pub width: usize,
    pub height: usize,
    pub extent: Extent,
    pub background: Rgb,
}

impl Default for Style {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            extent: Extent::DEFAULT,
            background: WHITE,
        }
    }
}

struct Canvas {
    width: usize,
    height: usize,
    extent: Extent,
    background: Rgb,
    px: Vec<Rgb>,
}

impl Canvas {
    fn to_pixel(&self, p: Vec2) -> (f64, f64) {
        let e = self.extent;
        (
            (p.x - e.x0) / (e.x1 - e.x0) * self.width as f64,
            (e.y1 - p.y) / (e.y1 - e.y0) * self.height as f64,
        )
    }

    /// World coordinates of a pixel centre.
    fn to_world(&self, i: usize, j: usize) -> Vec2 {
        let e = self.extent;
        Vec2::new(
            e.x0 + (i as f64 + 0.5) / self.width as f64 * (e.x1 - e.x0),
            e.y1 - (j as f64 + 0.5) / self.height as f64 * (e.y1 - e.y0),
        )
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.px[y as usize * self.width + x as usize] = c;
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb) {
        let (mut x0, mut y0) = (a.0.floor() as i64, a.1.floor() as i64);
        let (x1, y1) = (b.0.floor() as i64, b.1.floor() as i64);
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        // Lines are clipped to a generous box so stray far points stay cheap.
        let lim = 4 * (self.width + self.height) as i64;
        if [x0, y0, x1, y1].iter().any(|v| v.abs() > lim) {
            return;
        }
        loop {
            self.put(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn blend(bg: Rgb, fg: Rgb, t: f64) -> Rgb {
        let t = t.clamp(0.0, 1.0);
        let mix = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * t).round() as u8;
        [mix(bg[0], fg[0]), mix(bg[1], fg[1]), mix(bg[2], fg[2])]
    }

    fn draw(&mut self, layer: &Layer) -> Result<()> {
        match layer {
            Layer::Heatmap { raster, palette } => {
                let v = raster.scalars()?;
                let scale = match palette {
                    Palette::Sequential(_) => v.iter().copied().fold(0.0, f64::max),
                    Palette::Diverging => v.iter().map(|x| x.abs()).fold(0.0, f64::max),
                };
                for j in 0..self.height {
                    for i in 0..self.width {
                        let Some(k) = raster.cell(self.to_world(i, j)) else {
                            continue;
                        };
                        let t = if scale > 0.0 { v[k] / scale } else { 0.0 };
                        let c = match palette {
                            Palette::Sequential(col) => {
                                Self::blend(self.background, *col, t.max(0.0).sqrt())
                            }
                            Palette::Diverging if t < 0.0 => {
                                Self::blend(self.background, BLUE, (-t).sqrt())
                            }
                            Palette::Diverging => Self::blend(self.background, RED, t.sqrt()),
                        };
                        self.px[j * self.width + i] = c;
                    }
                }
            }
            Layer::Contours {
                raster,
                levels,
                color,
            } => {
                let v = raster.scalars()?;
                let cells: Vec<Option<usize>> = (0..self.height)
                    .flat_map(|j| (0..self.width).map(move |i| (i, j)))
                    .map(|(i, j)| raster.cell(self.to_world(i, j)))
                    .collect();
                for &level in levels {
                    let inside = |k: Option<usize>| k.is_some_and(|k| v[k] >= level);
                    for j in 0..self.height {
                        for i in 0..self.width {
                            let here = cells[j * self.width + i];
                            if !inside(here) {
                                continue;
                            }
                            let edge = (i > 0 && !inside(cells[j * self.width + i - 1]))
                                || (i + 1 < self.width && !inside(cells[j * self.width + i + 1]))
                                || (j > 0 && !inside(cells[(j - 1) * self.width + i]))
                                || (j + 1 < self.height
                                    && !inside(cells[(j + 1) * self.width + i]));
                            if edge {
                                self.px[j * self.width + i] = *color;
                            }
                        }
                    }
                }
            }
            Layer::Scatter { points, color } => {
                for p in points {
                    let (x, y) = self.to_pixel(*p);
                    if x.is_finite() && y.is_finite() {
                        self.put(x.floor() as i64, y.floor() as i64, *color);
                    }
                }
            }
            Layer::Quiver {
                raster,
                color,
                grid,
            } => {
                let v = raster.vectors()?;
                let grid = (*grid).max(1);
                let e = raster.extent;
                let step = Vec2::new((e.x1 - e.x0) / grid as f64, (e.y1 - e.y0) / grid as f64);
                let anchors: Vec<(Vec2, Vec2)> = (0..grid)
                    .flat_map(|gy| (0..grid).map(move |gx| (gx, gy)))
                    .filter_map(|(gx, gy)| {
                        let p = Vec2::new(
                            e.x0 + (gx as f64 + 0.5) * step.x,
                            e.y0 + (gy as f64 + 0.5) * step.y,
                        );
                        raster.cell(p).map(|k| (p, v[k]))
                    })
                    .collect();
                let longest = anchors.iter().map(|(_, a)| a.norm()).fold(0.0, f64::max);
                if longest > 0.0 {
                    let len = 0.9 * step.x.min(step.y) / longest;
                    for (p, a) in anchors {
                        let q = p + a * len;
                        self.line(self.to_pixel(p), self.to_pixel(q), *color);
                        let (hx, hy) = self.to_pixel(q);
                        for (ox, oy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                            self.put(hx.floor() as i64 + ox, hy.floor() as i64 + oy, *color);
                        }
                    }
                }
            }
            Layer::Trajectories { paths, color } => {
                for path in paths {
                    for w in path.windows(2) {
                        let (a, b) = (self.to_pixel(w[0]), self.to_pixel(w[1]));
                        if a.0.is_finite() && a.1.is_finite() && b.0.is_finite() && b.1.is_finite()
                        {
                            self.line(a, b, *color);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.px.len() * 3);
        for p in &self.px {
            out.extend_from_slice(p);
        }
        out
    }
}

/// Composites the layers in order and returns the P6 bytes.
pub fn compose(layers: &[Layer], style: &Style) -> Result<Vec<u8>> {
    if style.width == 0 || style.height == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    let mut canvas = Canvas {
        width: style.width,
        height: style.height,
        extent: style.extent,
        background: style.background,
        px: vec![style.background; style.width * style.height],
    };
    for l in layers {
        canvas.draw(l)?;
    }
    Ok(canvas.ppm())
}

/// Sidecar path for an image: same stem, `.csv` extension.
pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("csv")
}

/// Writes the PPM image and its CSV sidecar.
pub fn render_figure(layers: &[Layer], style: &Style, out_path: &Path) -> Result<()> {
    let bytes = compose(layers, style)?;
    std::fs::write(out_path, bytes).map_err(|e| Error::io(out_path, e))?;
    write_figure_csv(&sidecar_path(out_path), layers, style)
}

fn rgb_fields(c: Rgb) -> [String; 3] {
    c.map(|v| v.to_string())
}

fn raster_rows(
    w: &mut csv::Writer<std::fs::File>,
    path: &Path,
    k: usize,
    r: &FieldRaster,
) -> Result<()> {
    let e = r.extent;
    let head = [
        "raster".to_string(),
        k.to_string(),
        r.kind.as_str().to_string(),
        r.width.to_string(),
        r.height.to_string(),
        e.x0.to_string(),
        e.y0.to_string(),
        e.x1.to_string(),
        e.y1.to_string(),
    ];
    w.write_record(&head).map_err(|e| csv_error(path, e))?;
    match &r.values {
        FieldValues::Scalar(v) => {
            for (i, x) in v.iter().enumerate() {
                w.write_record([
                    "cell".to_string(),
                    k.to_string(),
                    i.to_string(),
                    x.to_string(),
                ])
                .map_err(|e| csv_error(path, e))?;
            }
        }
        FieldValues::Vector(v) => {
            for (i, x) in v.iter().enumerate() {
                w.write_record([
                    "vcell".to_string(),
                    k.to_string(),
                    i.to_string(),
                    x.x.to_string(),
                    x.y.to_string(),
                ])
                .map_err(|e| csv_error(path, e))?;
            }
        }
    }
    Ok(())
}

/// Writes every plotted datum. Row types: `style`, `layer`, `raster`, `cell`,
/// `vcell`, `level`, `point`, `path`.
pub fn write_figure_csv(path: &Path, layers: &[Layer], style: &Style) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let e = style.extent;
    let mut row = vec![
        "style".to_string(),
        style.width.to_string(),
        style.height.to_string(),
        e.x0.to_string(),
        e.y0.to_string(),
        e.x1.to_string(),
        e.y1.to_string(),
    ];
    row.extend(rgb_fields(style.background));
    w.write_record(&row).map_err(|e| csv_error(path, e))?;
    for (k, layer) in layers.iter().enumerate() {
        let ks = k.to_string();
        let head: Vec<String> = match layer {
            Layer::Heatmap { palette, .. } => match palette {
                Palette::Sequential(c) => {
                    let mut v = vec![
                        "layer".into(),
                        ks.clone(),
                        "heatmap".into(),
                        "sequential".into(),
                    ];
                    v.extend(rgb_fields(*c));
                    v
                }
                Palette::Diverging => vec![
                    "layer".into(),
                    ks.clone(),
                    "heatmap".into(),
                    "diverging".into(),
                ],
            },
            Layer::Contours { color, .. } => {
                let mut v = vec!["layer".into(), ks.clone(), "contours".into()];
                v.extend(rgb_fields(*color));
                v
            }
            Layer::Scatter { color, .. } => {
                let mut v = vec!["layer".into(), ks.clone(), "scatter".into()];
                v.extend(rgb_fields(*color));
                v
            }
            Layer::Quiver { color, grid, .. } => {
                let mut v = vec!["layer".into(), ks.clone(), "quiver".into()];
                v.extend(rgb_fields(*color));
                v.push(grid.to_string());
                v
            }
            Layer::Trajectories { color, .. } => {
                let mut v = vec!["layer".into(), ks.clone(), "trajectories".into()];
                v.extend(rgb_fields(*color));
                v
            }
        };
        w.write_record(&head).map_err(|e| csv_error(path, e))?;
        match layer {
            Layer::Heatmap { raster, .. } | Layer::Quiver { raster, .. } => {
                raster_rows(&mut w, path, k, raster)?
            }
            Layer::Contours { raster, levels, .. } => {
                raster_rows(&mut w, path, k, raster)?;
                for l in levels {
                    w.write_record(["level".to_string(), ks.clone(), l.to_string()])
                        .map_err(|e| csv_error(path, e))?;
                }
            }
            Layer::Scatter { points, .. } => {
                for p in points {
                    w.write_record([
                        "point".to_string(),
                        ks.clone(),
                        p.x.to_string(),
                        p.y.to_string(),
                    ])
                    .map_err(|e| csv_error(path, e))?;
                }
            }
            Layer::Trajectories { paths, .. } => {
                for (id, pts) in paths.iter().enumerate() {
                    for p in pts {
                        w.write_record([
                            "path".to_string(),
                            ks.clone(),
                            id.to_string(),
                            p.x.to_string(),
                            p.y.to_string(),
                        ])
                        .map_err(|e| csv_error(path, e))?;
                    }
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn sidecar_error(detail: String) -> Error {
    Error::Format {
        what: "figure csv",
        detail,
    }
}

struct Row(csv::StringRecord);

impl Row {
    fn str(&self, i: usize) -> Result<&str> {
        self.0
            .get(i)
            .ok_or_else(|| sidecar_error(format!("missing field {i} in {:?}", self.0)))
    }

    fn num<T: std::str::FromStr>(&self, i: usize) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.str(i)?
            .parse()
            .map_err(|e| sidecar_error(format!("field {i} of {:?}: {e}", self.0)))
    }

    fn rgb(&self, i: usize) -> Result<Rgb> {
        Ok([self.num(i)?, self.num(i + 1)?, self.num(i + 2)?])
    }
}

#[derive(Default)]
struct Partial {
    kind: String,
    palette: Option<Palette>,
    color: Rgb,
    grid: usize,
    raster: Option<(Extent, usize, usize, RasterKind)>,
    scalars: Vec<f64>,
    vectors: Vec<Vec2>,
    levels: Vec<f64>,
    points: Vec<Vec2>,
    paths: Vec<Vec<Vec2>>,
}

impl Partial {
    fn raster(&mut self) -> Result<FieldRaster> {
        let (e, w, h, kind) = self
            .raster
            .ok_or_else(|| sidecar_error("layer without raster".into()))?;
        if self.vectors.is_empty() {
            FieldRaster::scalar(e, w, h, kind, std::mem::take(&mut self.scalars))
        } else {
            FieldRaster::vector(e, w, h, kind, std::mem::take(&mut self.vectors))
        }
    }

    fn finish(mut self) -> Result<Layer> {
        Ok(match self.kind.as_str() {
            "heatmap" => Layer::Heatmap {
                raster: self.raster()?,
                palette: self.palette.expect("set with kind"),
            },
            "contours" => Layer::Contours {
                raster: self.raster()?,
                levels: self.levels,
                color: self.color,
            },
            "scatter" => Layer::Scatter {
                points: self.points,
                color: self.color,
            },
            "quiver" => Layer::Quiver {
                raster: self.raster()?,
                color: self.color,
                grid: self.grid,
            },
            "trajectories" => Layer::Trajectories {
                paths: self.paths,
                color: self.color,
            },
            other => return Err(sidecar_error(format!("unknown layer kind `{other}`"))),
        })
    }
}

/// Rebuilds layers and style from a sidecar written by [`write_figure_csv`].
pub fn read_figure_csv(path: &Path) -> Result<(Vec<Layer>, Style)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut style = None;
    let mut layers = Vec::new();
    let mut cur: Option<Partial> = None;
    for rec in r.records() {
        let row = Row(rec.map_err(|e| csv_error(path, e))?);
        match row.str(0)? {
            "style" => {
                style = Some(Style {
                    width: row.num(1)?,
                    height: row.num(2)?,
                    extent: Extent::new(row.num(3)?, row.num(4)?, row.num(5)?, row.num(6)?)?,
                    background: row.rgb(7)?,
                });
            }
            "layer" => {
                if let Some(p) = cur.take() {
                    layers.push(p.finish()?);
                }
                let kind = row.str(2)?.to_string();
                let mut p = Partial {
                    kind: kind.clone(),
                    ..Partial::default()
                };
                match kind.as_str() {
                    "heatmap" => {
                        p.palette = Some(match row.str(3)? {
                            "sequential" => Palette::Sequential(row.rgb(4)?),
                            "diverging" => Palette::Diverging,
                            other => {
                                return Err(sidecar_error(format!("unknown palette `{other}`")))
                            }
                        });
                    }
                    "quiver" => {
                        p.color = row.rgb(3)?;
                        p.grid = row.num(6)?;
                    }
                    _ => p.color = row.rgb(3)?,
                }
                cur = Some(p);
            }
            tag => {
                let p = cur
                    .as_mut()
                    .ok_or_else(|| sidecar_error(format!("`{tag}` row before any layer")))?;
                match tag {
                    "raster" => {
                        let e = Extent::new(row.num(5)?, row.num(6)?, row.num(7)?, row.num(8)?)?;
                        p.raster =
                            Some((e, row.num(3)?, row.num(4)?, RasterKind::parse(row.str(2)?)?));
                    }
                    "cell" => p.scalars.push(row.num(3)?),
                    "vcell" => p.vectors.push(Vec2::new(row.num(3)?, row.num(4)?)),
                    "level" => p.levels.push(row.num(2)?),
                    "point" => p.points.push(Vec2::new(row.num(2)?, row.num(3)?)),
                    "path" => {
                        let id: usize = row.num(2)?;
                        if id == p.paths.len() {
                            p.paths.push(vec![]);
                        }
                        p.paths
                            .get_mut(id)
                            .ok_or_else(|| sidecar_error(format!("path {id} out of order")))?
                            .push(Vec2::new(row.num(3)?, row.num(4)?));
                    }
                    other => return Err(sidecar_error(format!("unknown row type `{other}`"))),
                }
            }
        }
    }
    if let Some(p) = cur.take() {
        layers.push(p.finish()?);
    }
    let style = style.ok_or_else(|| sidecar_error("missing style row".into()))?;
    Ok((layers, style))
}
