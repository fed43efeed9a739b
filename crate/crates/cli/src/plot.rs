//! PNG charts: longitudinal error profiles and color-mapped BEV maps.

use std::path::Path;
use std::sync::OnceLock;

use anyhow::{anyhow, Result};
use plotters::prelude::*;
use roadbev::elevation_grid::{ElevationMap, GridSpec};
use roadbev::metrics::DistanceProfile;

const FONT_PATHS: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial Unicode.ttf",
];

/// Registers a sans-serif font from `ROADBEV_FONT` or a system path.
/// Without one, charts are drawn without text.
fn font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let candidates = std::env::var("ROADBEV_FONT").ok().into_iter().chain(FONT_PATHS.iter().map(|s| s.to_string()));
        for path in candidates {
            if let Ok(bytes) = std::fs::read(&path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no usable font found; charts will have no labels (set ROADBEV_FONT)");
        false
    })
}

fn plot_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> anyhow::Error + '_ {
    move |e| anyhow!("drawing {}: {e}", path.display())
}

/// Mean absolute error per segment against forward distance, one line per
/// named profile. Absent segments break the line.
pub fn plot_profiles(path: &Path, series: &[(String, DistanceProfile)], grid: &GridSpec) -> Result<()> {
    let text = font_available();
    let err = plot_err(path);
    let root = BitMapBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let y_top = series
        .iter()
        .flat_map(|(_, p)| p.abs_err_cm.iter().flatten().copied())
        .fold(0.0f64, f64::max)
        .max(0.1)
        * 1.15;
    let (d0, d1) = (grid.y_min, grid.y_edge(grid.ny));
    let mut builder = ChartBuilder::on(&root);
    builder.margin(16);
    if text {
        builder
            .caption("Absolute elevation error by distance", ("sans-serif", 22))
            .x_label_area_size(40)
            .y_label_area_size(56);
    }
    let mut chart = builder.build_cartesian_2d(d0..d1, 0.0..y_top).map_err(&err)?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("forward distance (m)").y_desc("abs. err. (cm)");
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(&err)?;
    for (k, (name, profile)) in series.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        let centre = |&(r0, r1): &(usize, usize)| grid.y_min + 0.5 * (r0 + r1) as f64 * grid.resolution;
        let mut runs: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for (rows, e) in profile.rows.iter().zip(&profile.abs_err_cm) {
            match e {
                Some(e) => runs.last_mut().expect("non-empty").push((centre(rows), *e)),
                None => runs.push(Vec::new()),
            }
        }
        let mut first = true;
        for run in runs.into_iter().filter(|r| !r.is_empty()) {
            chart.draw_series(run.iter().map(|&p| Circle::new(p, 4, color.filled()))).map_err(&err)?;
            let line = chart.draw_series(LineSeries::new(run, color.stroke_width(2))).map_err(&err)?;
            if first && text {
                line.label(name.as_str())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            }
            first = false;
        }
    }
    if text && !series.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(&err)?;
    }
    root.present().map_err(&err)?;
    Ok(())
}

/// How values map to colors.
#[derive(Debug, Clone, Copy)]
pub enum Scale {
    /// Viridis over `[min, max]`.
    Sequential { min: f64, max: f64 },
    /// Blue-white-red over `[-limit, limit]`.
    Diverging { limit: f64 },
}

impl Scale {
    /// Sequential scale spanning the valid values of `map`.
    pub fn fit(map: &ElevationMap) -> Self {
        let vals = map.values.iter().zip(&map.mask).filter(|(_, &m)| m).map(|(v, _)| *v);
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if lo.is_finite() && hi > lo {
            Scale::Sequential { min: lo, max: hi }
        } else {
            let c = if lo.is_finite() { lo } else { 0.0 };
            Scale::Sequential { min: c - 1.0, max: c + 1.0 }
        }
    }

    /// Symmetric diverging scale covering the largest valid magnitude.
    pub fn symmetric(map: &ElevationMap) -> Self {
        let m = map.values.iter().zip(&map.mask).filter(|(_, &m)| m).fold(0.0f64, |a, (v, _)| a.max(v.abs()));
        Scale::Diverging { limit: m.max(0.1) }
    }

    fn range(&self) -> (f64, f64) {
        match *self {
            Scale::Sequential { min, max } => (min, max),
            Scale::Diverging { limit } => (-limit, limit),
        }
    }

    fn color(&self, v: f64) -> RGBColor {
        let (lo, hi) = self.range();
        let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        match self {
            Scale::Sequential { .. } => {
                let x = t * (VIRIDIS.len() - 1) as f64;
                let k = (x.floor() as usize).min(VIRIDIS.len() - 2);
                let s = x - k as f64;
                let (a, b) = (VIRIDIS[k], VIRIDIS[k + 1]);
                let lerp = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * s).round() as u8;
                RGBColor(lerp(a.0, b.0), lerp(a.1, b.1), lerp(a.2, b.2))
            }
            Scale::Diverging { .. } => {
                let lerp = |a: u8, b: u8, s: f64| (a as f64 + (b as f64 - a as f64) * s).round() as u8;
                let (blue, white, red) = ((33, 102, 172), (247, 247, 247), (178, 24, 43));
                let (from, to, s) = if t < 0.5 { (blue, white, t * 2.0) } else { (white, red, t * 2.0 - 1.0) };
                RGBColor(lerp(from.0, to.0, s), lerp(from.1, to.1, s), lerp(from.2, to.2, s))
            }
        }
    }
}

/// Viridis sampled at nine even stops.
const VIRIDIS: [(u8, u8, u8); 9] = [
    (68, 1, 84),
    (71, 45, 123),
    (59, 82, 139),
    (44, 114, 142),
    (33, 145, 140),
    (40, 174, 128),
    (94, 201, 98),
    (173, 220, 48),
    (253, 231, 37),
];

const INVALID: RGBColor = RGBColor(200, 200, 200);

/// Top-down map: lateral position across, forward distance upwards, cells
/// outside the mask in gray, with a color bar.
pub fn plot_map(path: &Path, map: &ElevationMap, grid: &GridSpec, title: &str, scale: Scale) -> Result<()> {
    if (map.ny, map.nx) != (grid.ny, grid.nx) {
        return Err(anyhow!("map is {}x{}, grid is {}x{}", map.ny, map.nx, grid.ny, grid.nx));
    }
    let text = font_available();
    let err = plot_err(path);
    let cell = (720 / map.ny.max(map.nx)).clamp(2, 12) as u32;
    let (w, h) = (cell * map.nx as u32, cell * map.ny as u32);
    let root = BitMapBackend::new(path, (w + 240, h + 110)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let (main, bar) = root.split_horizontally(w + 100);
    let (x0, x1) = (grid.x_min, grid.x_edge(grid.nx));
    let (y0, y1) = (grid.y_min, grid.y_edge(grid.ny));
    let mut builder = ChartBuilder::on(&main);
    builder.margin(10);
    if text {
        builder.caption(title, ("sans-serif", 18)).x_label_area_size(36).y_label_area_size(50);
    }
    let mut chart = builder.build_cartesian_2d(x0..x1, y0..y1).map_err(&err)?;
    let mut mesh = chart.configure_mesh();
    mesh.disable_mesh();
    if text {
        mesh.x_desc("lateral (m)").y_desc("forward (m)");
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(&err)?;
    let cells = (0..map.ny).flat_map(|i| (0..map.nx).map(move |j| (i, j))).map(|(i, j)| {
        let color = map.get(i, j).map_or(INVALID, |v| scale.color(v));
        Rectangle::new(
            [(grid.x_edge(j), grid.y_edge(i)), (grid.x_edge(j + 1), grid.y_edge(i + 1))],
            color.filled(),
        )
    });
    chart.draw_series(cells).map_err(&err)?;

    let (lo, hi) = scale.range();
    let mut builder = ChartBuilder::on(&bar);
    builder.margin_top(if text { 40 } else { 10 }).margin_bottom(46).margin_left(45).margin_right(10);
    if text {
        builder.right_y_label_area_size(60);
    }
    let mut cb = builder.build_cartesian_2d(0.0..1.0, lo..hi).map_err(&err)?.set_secondary_coord(0.0..1.0, lo..hi);
    let steps = 128;
    cb.draw_series((0..steps).map(|k| {
        let a = lo + (hi - lo) * k as f64 / steps as f64;
        let b = lo + (hi - lo) * (k + 1) as f64 / steps as f64;
        Rectangle::new([(0.0, a), (1.0, b)], scale.color(0.5 * (a + b)).filled())
    }))
    .map_err(&err)?;
    if text {
        cb.configure_secondary_axes()
            .y_desc("cm")
            .x_labels(0)
            .label_style(("sans-serif", 12))
            .axis_desc_style(("sans-serif", 13))
            .draw().map_err(&err)?;
    }
    root.present().map_err(&err)?;
    Ok(())
}

/// Ground truth minus prediction on the cells valid in `gt`.
pub fn residual(gt: &ElevationMap, pred: &ElevationMap) -> Result<ElevationMap> {
    if !gt.same_shape(pred) {
        return Err(anyhow!("residual of {}x{} and {}x{} maps", gt.ny, gt.nx, pred.ny, pred.nx));
    }
    let values = gt.values.iter().zip(&pred.values).zip(&gt.mask).map(|((g, p), &m)| if m { g - p } else { 0.0 }).collect();
    Ok(ElevationMap { ny: gt.ny, nx: gt.nx, values, mask: gt.mask.clone() })
}
