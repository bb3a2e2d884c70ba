//! Raster figure output: line/scatter/bar charts, mass histograms, Tukey
//! box plots, error-bar sweep curves (all via plotters) and velocity-map
//! montages (via the image crate).
//!
//! Text rendering needs a TrueType font at runtime. The module looks for
//! one in `SEISAUG_FONT` and a handful of standard system locations; when
//! none is found, charts are still drawn, just without captions or tick
//! labels, so headless plotting never fails outright.

use crate::evaluate::BoxStats;
use crate::{Error, Result};
use ndarray::Array2;
use plotters::prelude::*;
use std::path::Path;
use std::sync::OnceLock;

const CHART_SIZE: (u32, u32) = (900, 600);

// ---------------------------------------------------------------------------
// Font discovery
// ---------------------------------------------------------------------------

static FONT_AVAILABLE: OnceLock<bool> = OnceLock::new();

/// Register a sans-serif font once per process; report whether text can be
/// drawn. Checked by every chart before emitting captions or labels.
pub fn font_available() -> bool {
    *FONT_AVAILABLE.get_or_init(|| {
        let mut candidates: Vec<String> = Vec::new();
        if let Ok(p) = std::env::var("SEISAUG_FONT") {
            candidates.push(p);
        }
        for p in [
            "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
            "/usr/share/fonts/TTF/DejaVuSans.ttf",
            "/usr/share/fonts/dejavu/DejaVuSans.ttf",
            "/System/Library/Fonts/Helvetica.ttc",
            "C:\\Windows\\Fonts\\arial.ttf",
        ] {
            candidates.push(p.to_string());
        }
        for path in candidates {
            if let Ok(bytes) = std::fs::read(&path) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, leaked)
                    .is_ok()
                {
                    return true;
                }
            }
        }
        false
    })
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn perr<T, E: std::fmt::Display>(path: &Path, r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| Error::Data(format!("plot {}: {e}", path.display())))
}

/// Padded (lo, hi) range over an iterator of values; degenerate spans get a
/// unit margin so plotters always receives a non-empty range.
fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let span = hi - lo;
    if span <= 0.0 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo - 0.05 * span, hi + 0.05 * span)
    }
}

/// Build a cartesian chart on `$root` with the shared margins and an
/// optional caption. A macro rather than a function: `ChartContext` borrows
/// the drawing area, which defeats any helper-function signature.
macro_rules! make_chart {
    ($path:expr, $root:expr, $caption:expr, $xr:expr, $yr:expr) => {{
        let mut builder = ChartBuilder::on(&$root);
        builder.margin(18).x_label_area_size(42).y_label_area_size(64);
        if font_available() && !$caption.is_empty() {
            builder.caption($caption, ("sans-serif", 22));
        }
        perr($path, builder.build_cartesian_2d($xr.0..$xr.1, $yr.0..$yr.1))?
    }};
}

/// Numeric mesh with axis descriptions (suppressed when no font is usable).
macro_rules! draw_mesh {
    ($path:expr, $chart:expr, $x_desc:expr, $y_desc:expr) => {{
        let mut mesh = $chart.configure_mesh();
        mesh.light_line_style(RGBColor(235, 235, 235));
        if font_available() {
            mesh.x_desc($x_desc).y_desc($y_desc).label_style(("sans-serif", 15));
        } else {
            mesh.x_labels(0).y_labels(0);
        }
        perr($path, mesh.draw())?;
    }};
}

/// Categorical mesh: integer x positions labeled from `$names`.
macro_rules! draw_named_mesh {
    ($path:expr, $chart:expr, $y_desc:expr, $names:expr) => {{
        let names: Vec<String> = $names;
        let fmt = move |x: &f64| {
            let i = x.round() as i64;
            if (x - i as f64).abs() < 1e-9 && i >= 0 && (i as usize) < names.len() {
                names[i as usize].clone()
            } else {
                String::new()
            }
        };
        let mut mesh = $chart.configure_mesh();
        mesh.light_line_style(RGBColor(235, 235, 235)).disable_x_mesh();
        if font_available() {
            mesh.y_desc($y_desc)
                .label_style(("sans-serif", 15))
                .x_labels(16)
                .x_label_formatter(&fmt);
        } else {
            mesh.x_labels(0).y_labels(0);
        }
        perr($path, mesh.draw())?;
    }};
}

/// Series-label legend box (skipped when no font is usable).
macro_rules! draw_legend {
    ($path:expr, $chart:expr) => {{
        if font_available() {
            perr(
                $path,
                $chart
                    .configure_series_labels()
                    .background_style(WHITE.mix(0.85))
                    .border_style(BLACK)
                    .label_font(("sans-serif", 15))
                    .draw(),
            )?;
        }
    }};
}

// ---------------------------------------------------------------------------
// Charts
// ---------------------------------------------------------------------------

/// Multi-series line chart. Each series is (name, points).
pub fn line_chart(
    path: &Path,
    caption: &str,
    x_desc: &str,
    y_desc: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    if series.iter().all(|(_, pts)| pts.is_empty()) {
        return Err(Error::Data("line chart with no points".into()));
    }
    let x_range = padded_range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let y_range = padded_range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let root = BitMapBackend::new(path, CHART_SIZE).into_drawing_area();
    perr(path, root.fill(&WHITE))?;
    let mut chart = make_chart!(path, root, caption, x_range, y_range);
    draw_mesh!(path, chart, x_desc, y_desc);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let style = color.stroke_width(2);
        perr(path, chart.draw_series(LineSeries::new(pts.iter().cloned(), style)))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], style));
        perr(
            path,
            chart.draw_series(
                pts.iter()
                    .map(|&(x, y)| Circle::new((x, y), 3, color.filled())),
            ),
        )?;
    }
    if series.len() > 1 {
        draw_legend!(path, chart);
    }
    perr(path, root.present())
}

/// Multi-series scatter chart (2-D projections and the like).
pub fn scatter_chart(
    path: &Path,
    caption: &str,
    x_desc: &str,
    y_desc: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    if series.iter().all(|(_, pts)| pts.is_empty()) {
        return Err(Error::Data("scatter chart with no points".into()));
    }
    let x_range = padded_range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let y_range = padded_range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let root = BitMapBackend::new(path, CHART_SIZE).into_drawing_area();
    perr(path, root.fill(&WHITE))?;
    let mut chart = make_chart!(path, root, caption, x_range, y_range);
    draw_mesh!(path, chart, x_desc, y_desc);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        perr(
            path,
            chart.draw_series(
                pts.iter()
                    .map(|&(x, y)| Circle::new((x, y), 4, color.mix(0.7).filled())),
            ),
        )?
        .label(name.clone())
        .legend(move |(x, y)| Circle::new((x + 9, y), 4, color.filled()));
    }
    if series.len() > 1 {
        draw_legend!(path, chart);
    }
    perr(path, root.present())
}

/// Histogram from (bin_lo, bin_hi, count) rows.
pub fn histogram_chart(
    path: &Path,
    caption: &str,
    x_desc: &str,
    bins: &[(f64, f64, usize)],
) -> Result<()> {
    if bins.is_empty() {
        return Err(Error::Data("histogram with no bins".into()));
    }
    let x_range = padded_range(bins.iter().flat_map(|b| [b.0, b.1].into_iter()));
    let max_count = bins.iter().map(|b| b.2).max().unwrap_or(0) as f64;
    let y_range = (0.0, max_count.max(1.0) * 1.05);
    let root = BitMapBackend::new(path, CHART_SIZE).into_drawing_area();
    perr(path, root.fill(&WHITE))?;
    let mut chart = make_chart!(path, root, caption, x_range, y_range);
    draw_mesh!(path, chart, x_desc, "count");
    let color = Palette99::pick(0).to_rgba();
    perr(
        path,
        chart.draw_series(bins.iter().map(|&(lo, hi, n)| {
            Rectangle::new([(lo, 0.0), (hi, n as f64)], color.mix(0.6).filled())
        })),
    )?;
    perr(
        path,
        chart.draw_series(
            bins.iter()
                .map(|&(lo, hi, n)| Rectangle::new([(lo, 0.0), (hi, n as f64)], color)),
        ),
    )?;
    perr(path, root.present())
}

/// Side-by-side Tukey box plots on a categorical axis.
pub fn boxplot_chart(path: &Path, caption: &str, y_desc: &str, boxes: &[(String, BoxStats)]) -> Result<()> {
    if boxes.is_empty() {
        return Err(Error::Data("box plot with no boxes".into()));
    }
    let y_range = padded_range(boxes.iter().flat_map(|(_, b)| {
        [b.whisker_lo, b.whisker_hi]
            .into_iter()
            .chain(b.outliers.iter().cloned())
    }));
    let x_range = (-0.6, boxes.len() as f64 - 0.4);
    let root = BitMapBackend::new(path, CHART_SIZE).into_drawing_area();
    perr(path, root.fill(&WHITE))?;
    let mut chart = make_chart!(path, root, caption, x_range, y_range);
    draw_named_mesh!(path, chart, y_desc, boxes.iter().map(|(n, _)| n.clone()).collect());
    for (i, (_, b)) in boxes.iter().enumerate() {
        let x = i as f64;
        let w = 0.28;
        let color = Palette99::pick(i).to_rgba();
        let seg = |x0: f64, y0: f64, x1: f64, y1: f64| {
            PathElement::new(vec![(x0, y0), (x1, y1)], color.stroke_width(2))
        };
        perr(
            path,
            chart.draw_series(std::iter::once(Rectangle::new(
                [(x - w, b.q1), (x + w, b.q3)],
                color.mix(0.35).filled(),
            ))),
        )?;
        perr(
            path,
            chart.draw_series(
                vec![
                    seg(x - w, b.q1, x + w, b.q1),
                    seg(x - w, b.q3, x + w, b.q3),
                    seg(x - w, b.q1, x - w, b.q3),
                    seg(x + w, b.q1, x + w, b.q3),
                    seg(x - w, b.median, x + w, b.median),
                    seg(x, b.q3, x, b.whisker_hi),
                    seg(x, b.q1, x, b.whisker_lo),
                    seg(x - w / 2.0, b.whisker_hi, x + w / 2.0, b.whisker_hi),
                    seg(x - w / 2.0, b.whisker_lo, x + w / 2.0, b.whisker_lo),
                ]
                .into_iter(),
            ),
        )?;
        perr(
            path,
            chart.draw_series(
                b.outliers
                    .iter()
                    .map(|&v| Circle::new((x, v), 3, color.filled())),
            ),
        )?;
    }
    perr(path, root.present())
}

/// Mean ± std line for the augmentation-size sweep: (size, mean, std) rows.
pub fn errorbar_chart(
    path: &Path,
    caption: &str,
    x_desc: &str,
    y_desc: &str,
    rows: &[(f64, f64, f64)],
) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Data("error-bar chart with no rows".into()));
    }
    let x_range = padded_range(rows.iter().map(|r| r.0));
    let y_range = padded_range(rows.iter().flat_map(|r| [r.1 - r.2, r.1 + r.2].into_iter()));
    let root = BitMapBackend::new(path, CHART_SIZE).into_drawing_area();
    perr(path, root.fill(&WHITE))?;
    let mut chart = make_chart!(path, root, caption, x_range, y_range);
    draw_mesh!(path, chart, x_desc, y_desc);
    let color = Palette99::pick(0).to_rgba();
    let cap = (x_range.1 - x_range.0) * 0.008;
    perr(
        path,
        chart.draw_series(LineSeries::new(
            rows.iter().map(|r| (r.0, r.1)),
            color.stroke_width(2),
        )),
    )?;
    for &(x, m, s) in rows {
        perr(
            path,
            chart.draw_series(
                vec![
                    PathElement::new(vec![(x, m - s), (x, m + s)], color.stroke_width(2)),
                    PathElement::new(vec![(x - cap, m - s), (x + cap, m - s)], color.stroke_width(2)),
                    PathElement::new(vec![(x - cap, m + s), (x + cap, m + s)], color.stroke_width(2)),
                ]
                .into_iter(),
            ),
        )?;
        perr(
            path,
            chart.draw_series(std::iter::once(Circle::new((x, m), 4, color.filled()))),
        )?;
    }
    perr(path, root.present())
}

/// Labeled vertical bars (grid-search results).
pub fn bar_chart(path: &Path, caption: &str, y_desc: &str, bars: &[(String, f64)]) -> Result<()> {
    if bars.is_empty() {
        return Err(Error::Data("bar chart with no bars".into()));
    }
    let y_top = padded_range(bars.iter().map(|b| b.1)).1;
    let y_range = (0.0, y_top.max(1e-12));
    let x_range = (-0.6, bars.len() as f64 - 0.4);
    let root = BitMapBackend::new(path, CHART_SIZE).into_drawing_area();
    perr(path, root.fill(&WHITE))?;
    let mut chart = make_chart!(path, root, caption, x_range, y_range);
    draw_named_mesh!(path, chart, y_desc, bars.iter().map(|(n, _)| n.clone()).collect());
    for (i, (_, v)) in bars.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        perr(
            path,
            chart.draw_series(std::iter::once(Rectangle::new(
                [(i as f64 - 0.3, 0.0), (i as f64 + 0.3, *v)],
                color.mix(0.6).filled(),
            ))),
        )?;
    }
    perr(path, root.present())
}

// ---------------------------------------------------------------------------
// Velocity-map montage
// ---------------------------------------------------------------------------

/// Compact viridis approximation: 9 anchors, linear interpolation.
fn viridis(t: f64) -> [u8; 3] {
    const ANCHORS: [[u8; 3]; 9] = [
        [68, 1, 84],
        [72, 40, 120],
        [62, 74, 137],
        [49, 104, 142],
        [38, 130, 142],
        [31, 158, 137],
        [53, 183, 121],
        [109, 205, 89],
        [253, 231, 37],
    ];
    let t = t.clamp(0.0, 1.0) * (ANCHORS.len() - 1) as f64;
    let i = (t.floor() as usize).min(ANCHORS.len() - 2);
    let f = t - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (ANCHORS[i][c] as f64 * (1.0 - f) + ANCHORS[i + 1][c] as f64 * f).round() as u8;
    }
    out
}

/// Tile velocity maps into one PNG on a shared color scale (global min/max
/// across all tiles), `tile_cols` tiles per row, nearest-neighbor upscaled.
pub fn map_montage(path: &Path, tiles: &[Array2<f64>], tile_cols: usize) -> Result<()> {
    if tiles.is_empty() || tile_cols == 0 {
        return Err(Error::Data("montage needs tiles and a positive column count".into()));
    }
    let dims = tiles[0].dim();
    for t in tiles {
        if t.dim() != dims {
            return Err(Error::Shape(format!(
                "montage tiles must share {:?}, found {:?}",
                dims,
                t.dim()
            )));
        }
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for t in tiles {
        for &v in t.iter() {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !lo.is_finite() || hi <= lo {
        hi = lo + 1.0;
    }
    let scale = (128 / dims.0.max(dims.1)).clamp(1, 8);
    let (th, tw) = (dims.0 * scale, dims.1 * scale);
    let gap = 2usize;
    let grid_cols = tile_cols.min(tiles.len());
    let grid_rows = tiles.len().div_ceil(grid_cols);
    let width = grid_cols * tw + (grid_cols + 1) * gap;
    let height = grid_rows * th + (grid_rows + 1) * gap;
    let mut img = image::RgbImage::from_pixel(width as u32, height as u32, image::Rgb([255; 3]));
    for (k, tile) in tiles.iter().enumerate() {
        let gx = (k % grid_cols) * (tw + gap) + gap;
        let gy = (k / grid_cols) * (th + gap) + gap;
        for i in 0..th {
            for j in 0..tw {
                let v = tile[[i / scale, j / scale]];
                let rgb = viridis((v - lo) / (hi - lo));
                img.put_pixel((gx + j) as u32, (gy + i) as u32, image::Rgb(rgb));
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Data(format!("montage {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
