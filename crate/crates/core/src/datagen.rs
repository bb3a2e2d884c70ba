//! Synthetic time-lapse velocity data: layered baselines plus growing
//! CO₂-plume leakage scenarios.
//!
//! A scenario is 20 yearly velocity maps (years 10, 20, …, 200). The plume
//! is a union of anisotropic Gaussian blobs seeded at a well inside the
//! middle layer and grown along one per-scenario migration direction; the
//! leak reduces velocity multiplicatively (up to `max_reduction`), never
//! increases it, and its footprint only ever grows. Leak mass is the plume
//! cell count times a per-cell mass constant, which makes the mass
//! trajectory non-decreasing by construction.
//!
//! Everything is a pure function of `(seed, config)`.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::io::{self, Meta};

/// Snapshot years: 10 through 200 in steps of 10.
pub const YEARS: [u32; 20] = [
    10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120, 130, 140, 150, 160, 170, 180, 190, 200,
];

/// Class boundaries in kg; a boundary value belongs to the upper class.
pub const CLASS_BOUNDS: [f64; 3] = [9.10e6, 2.67e7, 8.05e7];

/// Target share of samples per class (Tiny, Small, Medium, Large).
pub const TARGET_CLASS_FRACTIONS: [f64; 4] = [0.20, 0.20, 0.20, 0.40];

/// Leak-size class of a single velocity map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LeakClass {
    Tiny,
    Small,
    Medium,
    Large,
}

impl LeakClass {
    pub fn name(self) -> &'static str {
        match self {
            LeakClass::Tiny => "tiny",
            LeakClass::Small => "small",
            LeakClass::Medium => "medium",
            LeakClass::Large => "large",
        }
    }

    /// Index into class-ordered arrays (Tiny = 0 … Large = 3).
    pub fn index(self) -> usize {
        match self {
            LeakClass::Tiny => 0,
            LeakClass::Small => 1,
            LeakClass::Medium => 2,
            LeakClass::Large => 3,
        }
    }

    /// The "small leakage" evaluation subset is Tiny ∪ Small.
    pub fn is_small_leak(self) -> bool {
        matches!(self, LeakClass::Tiny | LeakClass::Small)
    }
}

/// Classify a leak mass (kg). Boundary values go to the upper class.
pub fn classify_leak(mass: f64) -> LeakClass {
    assert!(mass >= 0.0, "leak mass must be non-negative, got {mass}");
    if mass < CLASS_BOUNDS[0] {
        LeakClass::Tiny
    } else if mass < CLASS_BOUNDS[1] {
        LeakClass::Small
    } else if mass < CLASS_BOUNDS[2] {
        LeakClass::Medium
    } else {
        LeakClass::Large
    }
}

/// One velocity snapshot of one scenario.
#[derive(Debug, Clone)]
pub struct VelocityMap {
    /// Velocities in m/s, `rows × cols`, row 0 at the surface.
    pub grid: Array2<f64>,
    /// Snapshot year; one of [`YEARS`].
    pub year: u32,
    pub scenario_id: u64,
    /// Leaked mass in kg at this year.
    pub leak_mass: f64,
}

impl VelocityMap {
    pub fn class(&self) -> LeakClass {
        classify_leak(self.leak_mass)
    }
}

/// A 20-snapshot leakage scenario.
#[derive(Debug, Clone)]
pub struct LeakageScenario {
    pub scenario_id: u64,
    /// Exactly 20 maps, ordered by year.
    pub maps: Vec<VelocityMap>,
    /// Leaked mass per year; non-decreasing.
    pub mass_trajectory: Vec<f64>,
    /// Seed the scenario was generated from (echoed into the sidecar).
    pub seed: u64,
}

/// Flat-layered background model.
#[derive(Debug, Clone)]
pub struct BaselineMap {
    pub grid: Array2<f64>,
    /// Row index where layer 2 starts and where layer 3 starts.
    pub layer_rows: [usize; 2],
}

/// Generator configuration. Defaults match the desk-scale profile
/// (64 × 64 cells at 10 m spacing).
#[derive(Debug, Clone)]
pub struct DatagenConfig {
    pub rows: usize,
    pub cols: usize,
    /// Layer velocities in m/s, top to bottom; must be non-decreasing.
    pub layer_velocities: [f64; 3],
    /// Fractions of the depth axis where layers 2 and 3 begin.
    pub layer_fractions: [f64; 2],
    /// Peak fractional velocity reduction inside the plume (0 disables
    /// leakage entirely).
    pub max_reduction: f64,
    /// Leaked mass represented by one plume cell, in kg.
    pub cell_mass_kg: f64,
    /// Squared-Mahalanobis cutoff of a blob's footprint (9 ≈ the 3σ ellipse).
    pub blob_cutoff: f64,
    /// Initial blob radius range, grid cells.
    pub r0_range: [f64; 2],
    /// Log-uniform range of the per-year radius growth rate.
    pub growth_range: [f64; 2],
    /// Cross-axis to along-axis radius ratio range.
    pub aspect_range: [f64; 2],
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            rows: 64,
            cols: 64,
            layer_velocities: [1800.0, 2400.0, 3000.0],
            layer_fractions: [0.30, 0.65],
            max_reduction: 0.15,
            cell_mass_kg: 1.0e5,
            blob_cutoff: 9.0,
            r0_range: [1.2, 2.2],
            growth_range: [0.05, 0.70],
            aspect_range: [0.35, 0.60],
        }
    }
}

// ------------------------------------------------------------- baseline

/// Build the flat three-layer baseline model.
///
/// Fails on non-positive velocities, on layer boundaries that leave any
/// layer empty or exceed the grid, and on velocity decreasing with depth.
pub fn generate_baseline(cfg: &DatagenConfig) -> Result<BaselineMap> {
    if cfg.rows < 8 || cfg.cols < 8 {
        return Err(Error::Config(format!(
            "grid {}x{} too small; need at least 8x8",
            cfg.rows, cfg.cols
        )));
    }
    for (i, &v) in cfg.layer_velocities.iter().enumerate() {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Config(format!(
                "layer {i} velocity {v} m/s is not strictly positive"
            )));
        }
    }
    for w in cfg.layer_velocities.windows(2).enumerate() {
        let (i, pair) = w;
        if pair[1] < pair[0] {
            return Err(Error::VelocityInversion {
                upper: i,
                lower: i + 1,
                upper_v: pair[0],
                lower_v: pair[1],
            });
        }
    }
    let [f1, f2] = cfg.layer_fractions;
    if !(f1 > 0.0 && f2 > f1 && f2 < 1.0) {
        return Err(Error::Config(format!(
            "layer fractions ({f1}, {f2}) must satisfy 0 < f1 < f2 < 1"
        )));
    }
    let r1 = (cfg.rows as f64 * f1).round() as usize;
    let r2 = (cfg.rows as f64 * f2).round() as usize;
    if r1 == 0 || r2 <= r1 || r2 >= cfg.rows {
        return Err(Error::Config(format!(
            "layer boundaries at rows {r1} and {r2} leave an empty layer on a {}-row grid",
            cfg.rows
        )));
    }
    let mut grid = Array2::zeros((cfg.rows, cfg.cols));
    for r in 0..cfg.rows {
        let v = if r < r1 {
            cfg.layer_velocities[0]
        } else if r < r2 {
            cfg.layer_velocities[1]
        } else {
            cfg.layer_velocities[2]
        };
        grid.row_mut(r).fill(v);
    }
    Ok(BaselineMap {
        grid,
        layer_rows: [r1, r2],
    })
}

// ------------------------------------------------------------- scenarios

/// One migration-path blob: an anisotropic Gaussian footprint.
struct Blob {
    center: (f64, f64), // (row, col)
    along: (f64, f64),  // unit migration direction, (row, col)
    a: f64,             // along-axis radius
    b: f64,             // cross-axis radius
}

impl Blob {
    /// exp(−q/2) where q is the squared Mahalanobis distance, zero outside
    /// the cutoff ellipse.
    fn envelope(&self, row: f64, col: f64, cutoff: f64) -> f64 {
        let dr = row - self.center.0;
        let dc = col - self.center.1;
        let u = dr * self.along.0 + dc * self.along.1;
        let w = -dr * self.along.1 + dc * self.along.0;
        let q = (u / self.a).powi(2) + (w / self.b).powi(2);
        if q > cutoff {
            0.0
        } else {
            (-0.5 * q).exp()
        }
    }
}

/// Grow one leakage scenario from a baseline.
///
/// Deterministic in `(seed, cfg)`. The plume is confined to layer 2 and the
/// grid; velocities never exceed the baseline; leaked mass and plume area
/// are non-decreasing over the 20 snapshots. With `max_reduction = 0` the
/// scenario degenerates to 20 copies of the baseline with zero mass.
pub fn generate_scenario(
    seed: u64,
    baseline: &BaselineMap,
    cfg: &DatagenConfig,
) -> Result<LeakageScenario> {
    let (rows, cols) = baseline.grid.dim();
    if rows != cfg.rows || cols != cfg.cols {
        return Err(Error::Shape(format!(
            "baseline grid {rows}x{cols} does not match config {}x{}",
            cfg.rows, cfg.cols
        )));
    }
    if !(0.0..1.0).contains(&cfg.max_reduction) {
        return Err(Error::Config(format!(
            "max_reduction {} must lie in [0, 1)",
            cfg.max_reduction
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let [r1, r2] = baseline.layer_rows;

    // Per-scenario draws. Drawn even for the degenerate case so the stream
    // layout does not depend on max_reduction.
    let well_col = rng.random_range(cols as f64 * 0.25..cols as f64 * 0.75);
    let band = (r2 - r1) as f64;
    let well_row = rng.random_range(r1 as f64 + band / 3.0..r1 as f64 + 2.0 * band / 3.0);
    let side: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let tilt: f64 = rng.random_range(-0.30..0.30);
    let norm = (1.0 + tilt * tilt).sqrt();
    let along = (tilt / norm, side / norm); // (row, col) unit vector
    let r0 = rng.random_range(cfg.r0_range[0]..cfg.r0_range[1]);
    let growth = (rng.random_range(cfg.growth_range[0].ln()..cfg.growth_range[1].ln())).exp();
    let aspect = rng.random_range(cfg.aspect_range[0]..cfg.aspect_range[1]);

    let degenerate = cfg.max_reduction == 0.0;

    // Envelope in [0, 1]; grows monotonically as blobs accumulate.
    let mut envelope: Array2<f64> = Array2::zeros((rows, cols));
    let mut center = (well_row, well_col);
    let mut maps = Vec::with_capacity(YEARS.len());
    let mut trajectory = Vec::with_capacity(YEARS.len());

    for (k, &year) in YEARS.iter().enumerate() {
        if !degenerate {
            let a = r0 * (1.0 + growth * k as f64);
            let blob = Blob {
                center,
                along,
                a,
                b: (aspect * a).max(0.8),
            };
            // Only rows of layer 2 can host the plume (trapped under the
            // caprock), and only cells inside the cutoff ellipse change.
            let row_lo = r1.max(blob.center.0 as usize - (blob.center.0 as usize).min((3.0 * a) as usize + 1));
            let row_hi = (blob.center.0 + 3.0 * a + 1.0).min(r2 as f64) as usize;
            for r in row_lo..row_hi.min(r2) {
                for c in 0..cols {
                    let e = blob.envelope(r as f64, c as f64, cfg.blob_cutoff);
                    if e > envelope[[r, c]] {
                        envelope[[r, c]] = e;
                    }
                }
            }
            // Advance the next blob along the migration direction and keep
            // its center inside layer 2 and the grid.
            let step = 0.8 * a;
            center.0 = (center.0 + along.0 * step).clamp(r1 as f64 + 1.0, r2 as f64 - 2.0);
            center.1 = (center.1 + along.1 * step).clamp(1.0, cols as f64 - 2.0);
        }

        let support = envelope.iter().filter(|&&e| e > 0.0).count();
        let mass = support as f64 * cfg.cell_mass_kg;
        let mut grid = baseline.grid.clone();
        if !degenerate {
            ndarray::Zip::from(&mut grid).and(&envelope).for_each(|v, &e| {
                *v *= 1.0 - cfg.max_reduction * e;
            });
        }
        trajectory.push(mass);
        maps.push(VelocityMap {
            grid,
            year,
            scenario_id: 0, // patched below once the id is known
            leak_mass: mass,
        });
    }

    Ok(LeakageScenario {
        scenario_id: 0,
        maps,
        mass_trajectory: trajectory,
        seed,
    })
}

/// Generate `count` scenarios with per-scenario seeds derived from
/// `base_seed`. Scenario ids run 0..count.
pub fn generate_dataset(
    base_seed: u64,
    count: usize,
    cfg: &DatagenConfig,
) -> Result<Vec<LeakageScenario>> {
    let baseline = generate_baseline(cfg)?;
    let mut out = Vec::with_capacity(count);
    for id in 0..count as u64 {
        let seed = crate::rng::derive_seed(base_seed, "scenario", id);
        let mut s = generate_scenario(seed, &baseline, cfg)?;
        s.scenario_id = id;
        for m in &mut s.maps {
            m.scenario_id = id;
        }
        out.push(s);
    }
    Ok(out)
}

// ------------------------------------------------------------------ split

/// Deterministic train/test split by scenario id.
///
/// The first `round(fraction · n)` ids (ascending) go to train, the rest to
/// test. Fails with fewer than two scenarios or a fraction that empties
/// either side.
pub fn split_dataset(
    scenarios: &[LeakageScenario],
    fraction: f64,
) -> Result<(Vec<LeakageScenario>, Vec<LeakageScenario>)> {
    if scenarios.len() < 2 {
        return Err(Error::Data(format!(
            "cannot split {} scenario(s); need at least 2",
            scenarios.len()
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fraction {fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut sorted: Vec<LeakageScenario> = scenarios.to_vec();
    sorted.sort_by_key(|s| s.scenario_id);
    let k = (fraction * sorted.len() as f64).round() as usize;
    if k == 0 || k == sorted.len() {
        return Err(Error::Config(format!(
            "split fraction {fraction} leaves an empty side for {} scenarios",
            sorted.len()
        )));
    }
    let test = sorted.split_off(k);
    Ok((sorted, test))
}

// -------------------------------------------------------------- histogram

/// Histogram of per-map leak masses plus class occupancy.
#[derive(Debug, Clone)]
pub struct MassHistogram {
    /// (bin_lo, bin_hi, count) rows covering [0, max mass].
    pub bins: Vec<(f64, f64, usize)>,
    /// Map counts per class (Tiny, Small, Medium, Large).
    pub class_counts: [usize; 4],
    pub total: usize,
}

impl MassHistogram {
    pub fn class_fractions(&self) -> [f64; 4] {
        let t = self.total.max(1) as f64;
        [
            self.class_counts[0] as f64 / t,
            self.class_counts[1] as f64 / t,
            self.class_counts[2] as f64 / t,
            self.class_counts[3] as f64 / t,
        ]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .bins
            .iter()
            .map(|&(lo, hi, n)| vec![io::fmt_f64(lo), io::fmt_f64(hi), n.to_string()])
            .collect();
        io::write_csv(path, "bin_lo,bin_hi,count", &rows)
    }
}

/// Histogram all per-map masses of a dataset into `n_bins` uniform bins.
pub fn mass_histogram(scenarios: &[LeakageScenario], n_bins: usize) -> Result<MassHistogram> {
    if n_bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let masses: Vec<f64> = scenarios
        .iter()
        .flat_map(|s| s.mass_trajectory.iter().copied())
        .collect();
    if masses.is_empty() {
        return Err(Error::Data("no scenarios to histogram".into()));
    }
    let max = masses.iter().cloned().fold(0.0f64, f64::max).max(1.0);
    let width = max / n_bins as f64;
    let mut bins: Vec<(f64, f64, usize)> = (0..n_bins)
        .map(|i| (width * i as f64, width * (i + 1) as f64, 0))
        .collect();
    let mut class_counts = [0usize; 4];
    for &m in &masses {
        let i = ((m / width) as usize).min(n_bins - 1);
        bins[i].2 += 1;
        class_counts[classify_leak(m).index()] += 1;
    }
    Ok(MassHistogram {
        bins,
        class_counts,
        total: masses.len(),
    })
}

// ------------------------------------------------------------ persistence

fn scenario_stem(id: u64) -> String {
    format!("scenario_{id:05}")
}

/// Write `scenario_<id>.f32` (20·rows·cols raw f32 LE, year-major
/// row-major) and the `key = value` sidecar with dims, years, masses, seed.
pub fn save_scenario(dir: &Path, s: &LeakageScenario) -> Result<PathBuf> {
    let (rows, cols) = s.maps[0].grid.dim();
    let mut data = Vec::with_capacity(s.maps.len() * rows * cols);
    for m in &s.maps {
        data.extend(m.grid.iter().map(|&v| v as f32));
    }
    let stem = scenario_stem(s.scenario_id);
    let f32_path = dir.join(format!("{stem}.f32"));
    io::write_f32(&f32_path, &data)?;

    let mut meta = Meta::new();
    meta.push("scenario_id", s.scenario_id);
    meta.push("maps", s.maps.len());
    meta.push("rows", rows);
    meta.push("cols", cols);
    meta.push_usize_list("years", &s.maps.iter().map(|m| m.year as usize).collect::<Vec<_>>());
    meta.push_f64_list("masses", &s.mass_trajectory);
    meta.push("seed", s.seed);
    meta.save(&dir.join(format!("{stem}.meta")))?;
    Ok(f32_path)
}

/// Load a scenario from its `.f32` path (sidecar expected alongside).
pub fn load_scenario(f32_path: &Path) -> Result<LeakageScenario> {
    let meta_path = f32_path.with_extension("meta");
    let meta = Meta::load(&meta_path)?;
    let id = meta.get_usize("scenario_id", &meta_path)? as u64;
    let n_maps = meta.get_usize("maps", &meta_path)?;
    let rows = meta.get_usize("rows", &meta_path)?;
    let cols = meta.get_usize("cols", &meta_path)?;
    let years = meta.get_usize_list("years", &meta_path)?;
    let masses = meta.get_f64_list("masses", &meta_path)?;
    let seed = meta.get_usize("seed", &meta_path)? as u64;
    if years.len() != n_maps || masses.len() != n_maps {
        return Err(Error::Format {
            path: meta_path,
            detail: format!(
                "sidecar lists {} years and {} masses for {} maps",
                years.len(),
                masses.len(),
                n_maps
            ),
        });
    }
    let raw = io::read_f32(f32_path, n_maps * rows * cols)?;
    let mut maps = Vec::with_capacity(n_maps);
    for (k, chunk) in raw.chunks_exact(rows * cols).enumerate() {
        let grid = Array2::from_shape_vec((rows, cols), chunk.iter().map(|&v| v as f64).collect())
            .expect("length checked");
        maps.push(VelocityMap {
            grid,
            year: years[k] as u32,
            scenario_id: id,
            leak_mass: masses[k],
        });
    }
    Ok(LeakageScenario {
        scenario_id: id,
        maps,
        mass_trajectory: masses,
        seed,
    })
}

/// Save a whole dataset into `dir` (created if needed).
pub fn save_dataset(dir: &Path, scenarios: &[LeakageScenario]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in scenarios {
        save_scenario(dir, s)?;
    }
    Ok(())
}

/// Load every `scenario_*.f32` under `dir`, ordered by scenario id.
pub fn load_dataset(dir: &Path) -> Result<Vec<LeakageScenario>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "f32")
                && p.file_stem()
                    .and_then(|s| s.to_str())
                    .is_some_and(|s| s.starts_with("scenario_"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no scenario_*.f32 files in {}", dir.display())));
    }
    paths.iter().map(|p| load_scenario(p)).collect()
}
