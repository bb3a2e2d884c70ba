//! Evaluation surface: MAE and SSIM image metrics, per-year reconstruction
//! loss curves, 2-D distribution projections (PCA / NMF) with an overlap
//! score, depth-wavenumber (Kz) spectra of velocity perturbations, and
//! Tukey box-plot statistics.

use crate::datagen::{LeakClass, LeakageScenario, YEARS};
use crate::genmodels::{ModelKind, TrainedGenerator};
use crate::inversion::{TrainedInversion, TrainingPair};
use crate::io::fmt_f64;
use crate::rng::stream;
use crate::{Error, Result};
use ndarray::{Array1, Array2};
use rand::RngExt;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::path::Path;

// ---------------------------------------------------------------------------
// MAE
// ---------------------------------------------------------------------------

/// Mean absolute difference between two equally-shaped maps.
pub fn mae(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "mae inputs {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let n = a.len() as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

/// SSIM parameters: 11-tap Gaussian window (σ = 1.5) and the standard
/// stabilizer constants.
#[derive(Debug, Clone, Copy)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Normalized 1-D Gaussian taps of the window.
fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window - 1) as f64 / 2.0;
    let mut k: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

/// Separable valid-mode Gaussian filtering: rows then columns, output
/// `(h − w + 1) × (w − w + 1)`.
fn blur_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let mut rowpass = Array2::<f64>::zeros((h, w - n + 1));
    for i in 0..h {
        for j in 0..w - n + 1 {
            let mut acc = 0.0;
            for t in 0..n {
                acc += img[[i, j + t]] * k[t];
            }
            rowpass[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - n + 1, w - n + 1));
    for i in 0..h - n + 1 {
        for j in 0..w - n + 1 {
            let mut acc = 0.0;
            for t in 0..n {
                acc += rowpass[[i + t, j]] * k[t];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Mean structural similarity over all valid Gaussian windows. The dynamic
/// range `l` scales the stabilizers: C1 = (k1·l)², C2 = (k2·l)².
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>, l: f64, cfg: &SsimConfig) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "ssim inputs {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w) = a.dim();
    if cfg.window == 0 || cfg.window > h || cfg.window > w {
        return Err(Error::Data(format!(
            "ssim window {} does not fit a {h}×{w} image",
            cfg.window
        )));
    }
    if !(l > 0.0) {
        return Err(Error::Config(format!(
            "ssim dynamic range must be positive, got {l}"
        )));
    }
    let k = gaussian_kernel(cfg.window, cfg.sigma);
    let mu_a = blur_valid(a, &k);
    let mu_b = blur_valid(b, &k);
    let mu_aa = blur_valid(&(a * a), &k);
    let mu_bb = blur_valid(&(b * b), &k);
    let mu_ab = blur_valid(&(a * b), &k);
    let c1 = (cfg.k1 * l).powi(2);
    let c2 = (cfg.k2 * l).powi(2);
    let mut acc = 0.0;
    for ((((&ma, &mb), &maa), &mbb), &mab) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(mu_aa.iter())
        .zip(mu_bb.iter())
        .zip(mu_ab.iter())
    {
        let va = maa - ma * ma;
        let vb = mbb - mb * mb;
        let cov = mab - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(acc / mu_a.len() as f64)
}

// ---------------------------------------------------------------------------
// Per-year reconstruction loss
// ---------------------------------------------------------------------------

/// One row of the per-year loss table. `mean` is `None` when the test set
/// has no maps for that year (flagged, never fabricated).
#[derive(Debug, Clone, Copy)]
pub struct YearLossRow {
    pub year: u32,
    pub mean: Option<f64>,
    pub n: usize,
}

/// Per-year generator reconstruction losses plus the overall aggregate.
#[derive(Debug, Clone)]
pub struct YearLossCurve {
    pub rows: Vec<YearLossRow>,
    pub overall: f64,
    pub total_n: usize,
}

/// Mean squared reconstruction error (in normalized `[0,1]` velocity units)
/// of a trained generator, split by snapshot year. Rows cover exactly the
/// dataset years 10..200.
pub fn per_year_loss_curve(
    gen: &mut TrainedGenerator,
    test: &[LeakageScenario],
) -> Result<YearLossCurve> {
    if gen.kind == ModelKind::Linear {
        return Err(Error::Config(
            "the linear baseline has no reconstruction loss curve".into(),
        ));
    }
    let mut sums: Vec<f64> = vec![0.0; YEARS.len()];
    let mut counts: Vec<usize> = vec![0; YEARS.len()];
    for s in test {
        let last = s.maps.len() - 1;
        for (k, m) in s.maps.iter().enumerate() {
            let idx = YEARS
                .iter()
                .position(|&y| y == m.year)
                .ok_or_else(|| Error::Data(format!("unexpected map year {}", m.year)))?;
            let recon = match gen.kind {
                ModelKind::Ae => {
                    let _ = k;
                    gen.ae_forward(&s.maps[0].grid, &s.maps[last].grid, m.year as f64)?
                }
                _ => gen.reconstruct(&m.grid)?,
            };
            let xu = gen.norm.to_unit::<f64>(&m.grid);
            let ru = gen.norm.to_unit::<f64>(&recon);
            let mse = xu
                .iter()
                .zip(ru.iter())
                .map(|(&x, &r)| (x - r) * (x - r))
                .sum::<f64>()
                / xu.len() as f64;
            sums[idx] += mse;
            counts[idx] += 1;
        }
    }
    let rows: Vec<YearLossRow> = YEARS
        .iter()
        .zip(sums.iter().zip(counts.iter()))
        .map(|(&year, (&s, &n))| YearLossRow {
            year,
            mean: if n > 0 { Some(s / n as f64) } else { None },
            n,
        })
        .collect();
    let total_n: usize = counts.iter().sum();
    if total_n == 0 {
        return Err(Error::Data("no test maps to evaluate".into()));
    }
    let overall = sums.iter().sum::<f64>() / total_n as f64;
    Ok(YearLossCurve {
        rows,
        overall,
        total_n,
    })
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Principal-component model over flattened maps.
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// `[k, d]`, rows are unit-norm principal directions.
    pub components: Array2<f64>,
    /// Descending eigenvalues of the covariance (scaled by sample count).
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    /// Project rows of `x` onto the components: `[n, k]`.
    pub fn project(&self, x: &Array2<f64>) -> Array2<f64> {
        let centered = x - &self.mean.view().insert_axis(ndarray::Axis(0));
        centered.dot(&self.components.t())
    }

    /// Reconstruct from projections: `mean + proj · components`.
    pub fn reconstruct(&self, proj: &Array2<f64>) -> Array2<f64> {
        proj.dot(&self.components) + &self.mean.view().insert_axis(ndarray::Axis(0))
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues (descending) and the matching eigenvectors as columns.
fn jacobi_eigh(mut a: Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[[i, p]];
                    let aiq = a[[i, q]];
                    a[[i, p]] = c * aip - s * aiq;
                    a[[i, q]] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[[p, j]];
                    let aqj = a[[q, j]];
                    a[[p, j]] = c * apj - s * aqj;
                    a[[q, j]] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (new, &old) in order.iter().enumerate() {
        vectors.column_mut(new).assign(&v.column(old));
    }
    (eigenvalues, vectors)
}

/// Fit a `k`-component PCA on row-vectors `x: [n, d]`. Works on the smaller
/// of the covariance (d×d) and Gram (n×n) sides. Errors when fewer samples
/// than components or when the centered data's rank is below `k`.
pub fn pca_fit(x: &Array2<f64>, k: usize) -> Result<PcaModel> {
    let (n, d) = x.dim();
    if k == 0 {
        return Err(Error::Config("pca needs at least one component".into()));
    }
    if n < k {
        return Err(Error::Data(format!(
            "pca with {k} components needs at least {k} samples, got {n}"
        )));
    }
    let mean = x.mean_axis(ndarray::Axis(0)).expect("n > 0");
    let xc = x - &mean.view().insert_axis(ndarray::Axis(0));
    let tol = 1e-10;
    let (eigenvalues, components) = if d <= n {
        let cov = xc.t().dot(&xc);
        let (vals, vecs) = jacobi_eigh(cov);
        let comps = Array2::from_shape_fn((k.min(d), d), |(i, j)| vecs[[j, i]]);
        (vals, comps)
    } else {
        let gram = xc.dot(&xc.t());
        let (vals, vecs) = jacobi_eigh(gram);
        let mut comps = Array2::<f64>::zeros((k.min(n), d));
        for i in 0..k.min(n) {
            if vals[i] > tol {
                let u = vecs.column(i).to_owned();
                let dir = xc.t().dot(&u) / vals[i].sqrt();
                comps.row_mut(i).assign(&dir);
            }
        }
        (vals, comps)
    };
    let rank = eigenvalues.iter().take(k).filter(|&&l| l > tol).count();
    if rank < k {
        return Err(Error::Data(format!(
            "centered data has rank {rank}; cannot extract {k} principal components"
        )));
    }
    Ok(PcaModel {
        mean,
        components: components.slice(ndarray::s![..k, ..]).to_owned(),
        eigenvalues: eigenvalues.into_iter().take(k).collect(),
    })
}

// ---------------------------------------------------------------------------
// NMF
// ---------------------------------------------------------------------------

/// Non-negative matrix factorization `x ≈ W·H` by multiplicative Frobenius
/// updates. `x: [n, d]` must be element-wise non-negative. Deterministic in
/// `seed`. Returns `(W [n, k], H [k, d])`.
pub fn nmf_fit(x: &Array2<f64>, k: usize, iters: usize, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    let (n, d) = x.dim();
    if k == 0 {
        return Err(Error::Config("nmf needs at least one component".into()));
    }
    if n < k {
        return Err(Error::Data(format!(
            "nmf with {k} components needs at least {k} samples, got {n}"
        )));
    }
    if x.iter().any(|&v| v < 0.0) {
        return Err(Error::Data("nmf requires non-negative inputs".into()));
    }
    let mut rng = stream(seed, "nmf", 0);
    let mut w = Array2::from_shape_simple_fn((n, k), || 0.1 + rng.random::<f64>());
    let mut h = Array2::from_shape_simple_fn((k, d), || 0.1 + rng.random::<f64>());
    let eps = 1e-12;
    let mut prev = f64::INFINITY;
    for _ in 0..iters {
        // H ← H ⊙ (WᵀX) / (WᵀWH)
        let wtx = w.t().dot(x);
        let wtwh = w.t().dot(&w).dot(&h);
        ndarray::Zip::from(&mut h).and(&wtx).and(&wtwh).for_each(|hv, &num, &den| {
            *hv *= num / (den + eps);
        });
        // W ← W ⊙ (XHᵀ) / (WHHᵀ)
        let xht = x.dot(&h.t());
        let whht = w.dot(&h.dot(&h.t()));
        ndarray::Zip::from(&mut w).and(&xht).and(&whht).for_each(|wv, &num, &den| {
            *wv *= num / (den + eps);
        });
        let res = {
            let approx = w.dot(&h);
            x.iter()
                .zip(approx.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        if (prev - res).abs() <= 1e-12 * prev.max(1.0) {
            break;
        }
        prev = res;
    }
    Ok((w, h))
}

/// Non-negative codes for `x` against a fixed dictionary `h`, by
/// multiplicative updates from a constant initialization. The update is
/// row-decoupled, so identical input rows always get identical codes —
/// unlike the jointly-fit `W` of [`nmf_fit`], whose rows depend on their
/// own random starting points.
pub fn nmf_transform(x: &Array2<f64>, h: &Array2<f64>, iters: usize) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    let k = h.nrows();
    if h.ncols() != d {
        return Err(Error::Shape(format!(
            "dictionary is {k}×{}, data is {n}×{d}",
            h.ncols()
        )));
    }
    if x.iter().any(|&v| v < 0.0) {
        return Err(Error::Data("nmf requires non-negative inputs".into()));
    }
    let eps = 1e-12;
    let mut w = Array2::from_elem((n, k), 0.5);
    let xht = x.dot(&h.t());
    let hht = h.dot(&h.t());
    for _ in 0..iters {
        let whht = w.dot(&hht);
        ndarray::Zip::from(&mut w).and(&xht).and(&whht).for_each(|wv, &num, &den| {
            *wv *= num / (den + eps);
        });
    }
    Ok(w)
}

// ---------------------------------------------------------------------------
// 2-D projection + overlap
// ---------------------------------------------------------------------------

/// Dimensionality-reduction method for the distribution comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMethod {
    Pca,
    Nmf,
}

impl ProjectionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ProjectionMethod::Pca => "pca",
            ProjectionMethod::Nmf => "nmf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(ProjectionMethod::Pca),
            "nmf" => Ok(ProjectionMethod::Nmf),
            other => Err(Error::Config(format!(
                "unknown projection method {other:?}; expected pca or nmf"
            ))),
        }
    }
}

/// Paired 2-D point clouds (true vs generated) plus their overlap score.
#[derive(Debug, Clone)]
pub struct Projection2d {
    pub method: ProjectionMethod,
    pub true_points: Vec<[f64; 2]>,
    pub gen_points: Vec<[f64; 2]>,
    pub overlap: f64,
}

/// Histogram-intersection overlap of two 2-D point clouds on a shared
/// `bins × bins` grid over the union bounding box. 1.0 means identical
/// normalized histograms; 0.0 means disjoint support.
pub fn histogram_overlap(a: &[[f64; 2]], b: &[[f64; 2]], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("overlap needs non-empty point sets".into()));
    }
    if bins == 0 {
        return Err(Error::Config("overlap histogram needs at least one bin".into()));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in a.iter().chain(b.iter()) {
        for ax in 0..2 {
            lo[ax] = lo[ax].min(p[ax]);
            hi[ax] = hi[ax].max(p[ax]);
        }
    }
    let index = |p: &[f64; 2]| -> usize {
        let mut cell = [0usize; 2];
        for ax in 0..2 {
            let span = hi[ax] - lo[ax];
            cell[ax] = if span > 0.0 {
                (((p[ax] - lo[ax]) / span * bins as f64) as usize).min(bins - 1)
            } else {
                0
            };
        }
        cell[0] * bins + cell[1]
    };
    let mut ha = vec![0.0f64; bins * bins];
    let mut hb = vec![0.0f64; bins * bins];
    for p in a {
        ha[index(p)] += 1.0 / a.len() as f64;
    }
    for p in b {
        hb[index(p)] += 1.0 / b.len() as f64;
    }
    Ok(ha.iter().zip(hb.iter()).map(|(&x, &y)| x.min(y)).sum())
}

/// Project true and generated map sets into a shared 2-D space (fit on the
/// union) and score their distribution overlap.
pub fn project_2d(
    true_maps: &[Array2<f64>],
    gen_maps: &[Array2<f64>],
    method: ProjectionMethod,
) -> Result<Projection2d> {
    if true_maps.is_empty() || gen_maps.is_empty() {
        return Err(Error::Data(
            "projection needs non-empty true and generated sets".into(),
        ));
    }
    let dims = true_maps[0].dim();
    for m in true_maps.iter().chain(gen_maps.iter()) {
        if m.dim() != dims {
            return Err(Error::Shape(format!(
                "all maps must share {:?}, found {:?}",
                dims,
                m.dim()
            )));
        }
    }
    let d = dims.0 * dims.1;
    let n = true_maps.len() + gen_maps.len();
    let mut x = Array2::<f64>::zeros((n, d));
    for (i, m) in true_maps.iter().chain(gen_maps.iter()).enumerate() {
        for (j, &v) in m.iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    let points: Vec<[f64; 2]> = match method {
        ProjectionMethod::Pca => {
            let model = pca_fit(&x, 2)?;
            let proj = model.project(&x);
            (0..n).map(|i| [proj[[i, 0]], proj[[i, 1]]]).collect()
        }
        ProjectionMethod::Nmf => {
            let (_, h) = nmf_fit(&x, 2, 300, 0)?;
            let w = nmf_transform(&x, &h, 200)?;
            (0..n).map(|i| [w[[i, 0]], w[[i, 1]]]).collect()
        }
    };
    let (tp, gp) = points.split_at(true_maps.len());
    let overlap = histogram_overlap(tp, gp, 16)?;
    Ok(Projection2d {
        method,
        true_points: tp.to_vec(),
        gen_points: gp.to_vec(),
        overlap,
    })
}

// ---------------------------------------------------------------------------
// Kz spectrum
// ---------------------------------------------------------------------------

/// Depth-wavenumber magnitude spectrum of a velocity perturbation.
///
/// The perturbation is `map − baseline`; each column gets a unitary 1-D DFT
/// along depth, and the per-bin magnitudes are RMS-averaged over columns, so
/// Parseval holds exactly: `Σ_k s[k]² = Σ p² / n_cols`.
pub fn kz_spectrum(map: &Array2<f64>, baseline: &Array2<f64>) -> Result<Vec<f64>> {
    if map.dim() != baseline.dim() {
        return Err(Error::Shape(format!(
            "map {:?} vs baseline {:?}",
            map.dim(),
            baseline.dim()
        )));
    }
    let (h, w) = map.dim();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(h);
    let mut acc = vec![0.0f64; h];
    let mut buf: Vec<Complex<f64>> = Vec::with_capacity(h);
    for c in 0..w {
        buf.clear();
        for r in 0..h {
            buf.push(Complex::new(map[[r, c]] - baseline[[r, c]], 0.0));
        }
        fft.process(&mut buf);
        for (k, v) in buf.iter().enumerate() {
            acc[k] += v.norm_sqr() / h as f64; // unitary normalization
        }
    }
    Ok(acc.iter().map(|&a| (a / w as f64).sqrt()).collect())
}

// ---------------------------------------------------------------------------
// Box-plot statistics
// ---------------------------------------------------------------------------

/// Tukey box-plot summary of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Smallest value within `q1 − 1.5·IQR`.
    pub whisker_lo: f64,
    /// Largest value within `q3 + 1.5·IQR`.
    pub whisker_hi: f64,
    pub outliers: Vec<f64>,
}

/// Linear-interpolation quantile (the R-7 / numpy default) on sorted data.
fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let n = v.len();
    if n == 1 {
        return v[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        v[lo] + frac * (v[lo + 1] - v[lo])
    } else {
        v[n - 1]
    }
}

/// Tukey convention: quartiles by linear interpolation, whiskers at the most
/// extreme data points within 1.5·IQR of the box, the rest outliers.
pub fn boxplot_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::Data("box-plot statistics need at least one value".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("box-plot input contains non-finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let median = quantile_sorted(&sorted, 0.5);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let lo_fence = q1 - 1.5 * iqr;
    let hi_fence = q3 + 1.5 * iqr;
    let whisker_lo = sorted
        .iter()
        .cloned()
        .find(|&v| v >= lo_fence)
        .expect("at least one value inside the fences");
    let whisker_hi = sorted
        .iter()
        .cloned()
        .rev()
        .find(|&v| v <= hi_fence)
        .expect("at least one value inside the fences");
    let outliers = sorted
        .iter()
        .cloned()
        .filter(|&v| v < lo_fence || v > hi_fence)
        .collect();
    Ok(BoxStats {
        median,
        q1,
        q3,
        whisker_lo,
        whisker_hi,
        outliers,
    })
}

// ---------------------------------------------------------------------------
// Inversion test metrics
// ---------------------------------------------------------------------------

/// Per-sample image metrics of an inversion model on labeled test pairs.
#[derive(Debug, Clone)]
pub struct SampleMetrics {
    pub mae: f64,
    pub ssim: f64,
    pub class: LeakClass,
}

/// Run the model over every pair and compute MAE + SSIM against the truth.
/// The SSIM dynamic range is the model's dataset-global velocity span.
pub fn metrics_per_sample(
    model: &mut TrainedInversion,
    pairs: &[TrainingPair],
    cfg: &SsimConfig,
) -> Result<Vec<SampleMetrics>> {
    if pairs.is_empty() {
        return Err(Error::Data("no test pairs".into()));
    }
    let l = model.norm.hi - model.norm.lo;
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let class = p
                .leak_class()
                .ok_or_else(|| Error::Data(format!("test pair {i} has no leak-mass label")))?;
            let pred = model.invnet_forward(&p.gathers)?;
            Ok(SampleMetrics {
                mae: mae(&pred, &p.target)?,
                ssim: ssim(&pred, &p.target, l, cfg)?,
                class,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

/// `metrics.csv`: one row per test sample.
pub fn write_metrics_csv(path: &Path, metrics: &[SampleMetrics]) -> Result<()> {
    let rows: Vec<Vec<String>> = metrics
        .iter()
        .enumerate()
        .map(|(i, m)| {
            vec![
                i.to_string(),
                m.class.name().to_string(),
                fmt_f64(m.mae),
                fmt_f64(m.ssim),
            ]
        })
        .collect();
    crate::io::write_csv(path, "index,class,mae,ssim", &rows)
}

/// `per_year.csv`: year, sample count, mean loss (empty cell when no maps).
pub fn write_per_year_csv(path: &Path, curve: &YearLossCurve) -> Result<()> {
    let rows: Vec<Vec<String>> = curve
        .rows
        .iter()
        .map(|r| {
            vec![
                r.year.to_string(),
                r.n.to_string(),
                r.mean.map(fmt_f64).unwrap_or_default(),
            ]
        })
        .collect();
    crate::io::write_csv(path, "year,n,mean_loss", &rows)
}

/// `boxplot.csv`: long-format stats then one row per outlier.
pub fn write_boxplot_csv(path: &Path, stats: &BoxStats) -> Result<()> {
    let mut rows = vec![
        vec!["median".to_string(), fmt_f64(stats.median)],
        vec!["q1".to_string(), fmt_f64(stats.q1)],
        vec!["q3".to_string(), fmt_f64(stats.q3)],
        vec!["whisker_lo".to_string(), fmt_f64(stats.whisker_lo)],
        vec!["whisker_hi".to_string(), fmt_f64(stats.whisker_hi)],
    ];
    for o in &stats.outliers {
        rows.push(vec!["outlier".to_string(), fmt_f64(*o)]);
    }
    crate::io::write_csv(path, "stat,value", &rows)
}

/// `kz.csv`: wavenumber bin vs magnitude, one named spectrum per call site.
pub fn write_kz_csv(path: &Path, spectra: &[(String, Vec<f64>)]) -> Result<()> {
    if spectra.is_empty() {
        return Err(Error::Data("no spectra to write".into()));
    }
    let len = spectra[0].1.len();
    for (name, s) in spectra {
        if s.len() != len {
            return Err(Error::Shape(format!(
                "spectrum '{name}' has {} bins, expected {len}",
                s.len()
            )));
        }
    }
    let header = std::iter::once("bin".to_string())
        .chain(spectra.iter().map(|(n, _)| n.clone()))
        .collect::<Vec<_>>()
        .join(",");
    let rows: Vec<Vec<String>> = (0..len)
        .map(|k| {
            std::iter::once(k.to_string())
                .chain(spectra.iter().map(|(_, s)| fmt_f64(s[k])))
                .collect()
        })
        .collect();
    crate::io::write_csv(path, &header, &rows)
}

/// `projections.csv`: long format, one row per projected point.
pub fn write_projection_csv(path: &Path, proj: &Projection2d) -> Result<()> {
    let mut rows = Vec::with_capacity(proj.true_points.len() + proj.gen_points.len());
    for p in &proj.true_points {
        rows.push(vec!["true".to_string(), fmt_f64(p[0]), fmt_f64(p[1])]);
    }
    for p in &proj.gen_points {
        rows.push(vec!["generated".to_string(), fmt_f64(p[0]), fmt_f64(p[1])]);
    }
    crate::io::write_csv(path, "set,c1,c2", &rows)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DatagenConfig};
    use crate::genmodels::{train_generative, GenHyper};
    use crate::nn::normal_draw;
    use approx::assert_abs_diff_eq;

    fn rand_map(rng: &mut rand_chacha::ChaCha12Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((h, w), || normal_draw(rng))
    }

    // -- mae ---------------------------------------------------------------

    #[test]
    fn mae_identities() {
        let mut r = stream(1, "mae-eval", 0);
        let a = rand_map(&mut r, 6, 7);
        let b = rand_map(&mut r, 6, 7);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        let c = a.mapv(|v| v - 1.25);
        assert_abs_diff_eq!(mae(&a, &c).unwrap(), 1.25, epsilon = 1e-12);
        assert!(mae(&a, &rand_map(&mut r, 3, 3)).is_err());
    }

    // -- ssim ---------------------------------------------------------------

    /// Literal windowed-SSIM oracle: loops over every valid window position
    /// and recomputes weighted moments directly from the definition.
    fn ssim_oracle(a: &Array2<f64>, b: &Array2<f64>, l: f64, cfg: &SsimConfig) -> f64 {
        let (h, w) = a.dim();
        let n = cfg.window;
        let c = (n - 1) as f64 / 2.0;
        let mut kern = vec![0.0; n * n];
        let mut ksum = 0.0;
        for i in 0..n {
            for j in 0..n {
                let g = (-(((i as f64 - c).powi(2) + (j as f64 - c).powi(2))
                    / (2.0 * cfg.sigma * cfg.sigma)))
                    .exp();
                kern[i * n + j] = g;
                ksum += g;
            }
        }
        for v in kern.iter_mut() {
            *v /= ksum;
        }
        let c1 = (cfg.k1 * l).powi(2);
        let c2 = (cfg.k2 * l).powi(2);
        let mut total = 0.0;
        let mut count = 0usize;
        for i0 in 0..=h - n {
            for j0 in 0..=w - n {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let k = kern[i * n + j];
                        ma += k * a[[i0 + i, j0 + j]];
                        mb += k * b[[i0 + i, j0 + j]];
                    }
                }
                let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let k = kern[i * n + j];
                        let da = a[[i0 + i, j0 + j]] - ma;
                        let db = b[[i0 + i, j0 + j]] - mb;
                        va += k * da * da;
                        vb += k * db * db;
                        cab += k * da * db;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_identities_and_window_contract() {
        let mut r = stream(2, "ssim", 0);
        let a = rand_map(&mut r, 16, 16);
        let b = rand_map(&mut r, 16, 16);
        let cfg = SsimConfig::default();
        assert_eq!(ssim(&a, &a, 1.0, &cfg).unwrap(), 1.0);
        assert_eq!(
            ssim(&a, &b, 1.0, &cfg).unwrap(),
            ssim(&b, &a, 1.0, &cfg).unwrap()
        );
        let s = ssim(&a, &b, 1.0, &cfg).unwrap();
        assert!((-1.0..=1.0).contains(&s), "ssim {s} outside [-1, 1]");
        // Window larger than the image is a contract error.
        let small = rand_map(&mut r, 8, 8);
        assert!(ssim(&small, &small, 1.0, &cfg).is_err());
        assert!(ssim(&a, &b, 0.0, &cfg).is_err());
    }

    #[test]
    fn ssim_matches_direct_formula_oracle_on_random_pairs() {
        let mut r = stream(3, "ssim-oracle", 0);
        let cfg = SsimConfig::default();
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let a = rand_map(&mut r, 14, 17);
            let b = a.mapv(|v| v + 0.3 * normal_draw(&mut r));
            let got = ssim(&a, &b, 2.5, &cfg).unwrap();
            let want = ssim_oracle(&a, &b, 2.5, &cfg);
            worst = worst.max((got - want).abs());
        }
        assert!(worst < 1e-6, "worst |Δssim| = {worst}");
    }

    // -- per-year curve ------------------------------------------------------

    #[test]
    fn per_year_curve_schema_and_aggregate_identity() {
        let cfg = DatagenConfig {
            rows: 16,
            cols: 16,
            ..DatagenConfig::default()
        };
        let data = generate_dataset(41, 3, &cfg).unwrap();
        let hyper = GenHyper {
            epochs: 2,
            batch: 8,
            lr: 1e-3,
            gamma: 1.0,
            layers: crate::featureext::LayerSelection::A,
            latent: 8,
            widths: vec![4, 8],
            seed: 2,
        };
        let (mut gen, _) =
            train_generative(ModelKind::Vae, &data, &hyper, None, None).unwrap();
        let curve = per_year_loss_curve(&mut gen, &data).unwrap();
        assert_eq!(curve.rows.len(), 20);
        for (row, &year) in curve.rows.iter().zip(YEARS.iter()) {
            assert_eq!(row.year, year);
            assert_eq!(row.n, 3);
            assert!(row.mean.is_some());
        }
        // Weighted mean of rows equals the overall aggregate.
        let num: f64 = curve
            .rows
            .iter()
            .filter_map(|r| r.mean.map(|m| m * r.n as f64))
            .sum();
        let den: usize = curve.rows.iter().map(|r| r.n).sum();
        assert_abs_diff_eq!(curve.overall, num / den as f64, epsilon = 1e-12);
        assert_eq!(curve.total_n, 60);

        // Missing years are flagged, not fabricated.
        let mut trimmed = data.clone();
        for s in trimmed.iter_mut() {
            s.maps.retain(|m| m.year <= 100);
        }
        let curve2 = per_year_loss_curve(&mut gen, &trimmed).unwrap();
        let missing: Vec<u32> = curve2
            .rows
            .iter()
            .filter(|r| r.mean.is_none())
            .map(|r| r.year)
            .collect();
        assert_eq!(missing, vec![110, 120, 130, 140, 150, 160, 170, 180, 190, 200]);
    }

    // -- pca ----------------------------------------------------------------

    #[test]
    fn pca_full_rank_reconstructs_and_components_are_orthonormal() {
        let mut r = stream(4, "pca", 0);
        let n = 6;
        let d = 64;
        let x = Array2::from_shape_simple_fn((n, d), || normal_draw(&mut r));
        // Centered rank is n − 1 = 5.
        let model = pca_fit(&x, 5).unwrap();
        let proj = model.project(&x);
        let rec = model.reconstruct(&proj);
        let num: f64 = (&rec - &x).iter().map(|v| v * v).sum();
        let den: f64 = x.iter().map(|v| v * v).sum();
        assert!(
            (num / den).sqrt() < 1e-6,
            "full-component reconstruction error {}",
            (num / den).sqrt()
        );
        // Components are orthonormal rows.
        for i in 0..5 {
            for j in 0..5 {
                let dot = model.components.row(i).dot(&model.components.row(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(dot, want, epsilon = 1e-8);
            }
        }
        // Eigenvalues descend.
        for w in model.eigenvalues.windows(2) {
            assert!(w[0] >= w[1] - 1e-9);
        }
        // Rank overflow is an error.
        assert!(pca_fit(&x, 6).is_err());
        // Both covariance- and Gram-side paths agree on projections up to
        // per-component sign.
        let tall = Array2::from_shape_simple_fn((12, 5), || normal_draw(&mut r));
        let wide = tall.clone();
        let m1 = pca_fit(&tall, 2).unwrap(); // d < n → covariance side
        let m2 = {
            // Force the Gram side by transposing the data layout: build a
            // wide matrix with the same rows.
            let padded = ndarray::concatenate(
                ndarray::Axis(1),
                &[wide.view(), Array2::zeros((12, 20)).view()],
            )
            .unwrap(); // d = 25 > n = 12 → Gram side
            pca_fit(&padded, 2).unwrap()
        };
        let p1 = m1.project(&tall);
        let p2 = m2.project(
            &ndarray::concatenate(ndarray::Axis(1), &[tall.view(), Array2::zeros((12, 20)).view()])
                .unwrap(),
        );
        for c in 0..2 {
            let dot: f64 = (0..12).map(|i| p1[[i, c]] * p2[[i, c]]).sum();
            let sign = dot.signum();
            for i in 0..12 {
                assert_abs_diff_eq!(p1[[i, c]], sign * p2[[i, c]], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn jacobi_recovers_a_known_spectrum() {
        // Diagonalize Q·diag(λ)·Qᵀ for a hand-built rotation Q.
        let th = 0.6f64;
        let (c, s) = (th.cos(), th.sin());
        let q = Array2::from_shape_vec((2, 2), vec![c, -s, s, c]).unwrap();
        let lam = Array2::from_shape_vec((2, 2), vec![5.0, 0.0, 0.0, 2.0]).unwrap();
        let a = q.dot(&lam).dot(&q.t());
        let (vals, vecs) = jacobi_eigh(a.clone());
        assert_abs_diff_eq!(vals[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 2.0, epsilon = 1e-12);
        // A·v = λ·v for both pairs.
        for k in 0..2 {
            let v = vecs.column(k).to_owned();
            let av = a.dot(&v);
            for i in 0..2 {
                assert_abs_diff_eq!(av[i], vals[k] * v[i], epsilon = 1e-10);
            }
        }
    }

    // -- nmf ----------------------------------------------------------------

    #[test]
    fn nmf_factors_are_nonnegative_and_reduce_residual() {
        let mut r = stream(5, "nmf-test", 0);
        // Low-rank non-negative data with noise.
        let w0 = Array2::from_shape_simple_fn((12, 2), || r.random::<f64>() + 0.1);
        let h0 = Array2::from_shape_simple_fn((2, 30), || r.random::<f64>() + 0.1);
        let x = w0.dot(&h0);
        let resid = |w: &Array2<f64>, h: &Array2<f64>| -> f64 {
            let approx = w.dot(h);
            x.iter()
                .zip(approx.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum()
        };
        let (w, h) = nmf_fit(&x, 2, 2000, 7).unwrap();
        assert!(w.iter().all(|&v| v >= 0.0), "W must be non-negative");
        assert!(h.iter().all(|&v| v >= 0.0), "H must be non-negative");
        let total: f64 = x.iter().map(|v| v * v).sum();
        let final_res = resid(&w, &h);
        assert!(
            final_res / total < 0.05,
            "rank-2 data should factor well, residual ratio {}",
            final_res / total
        );
        // Multiplicative updates never increase the objective: a shorter run
        // from the same seeded start cannot beat a longer one.
        let (w_short, h_short) = nmf_fit(&x, 2, 50, 7).unwrap();
        assert!(final_res <= resid(&w_short, &h_short) + 1e-9);
        // Determinism.
        let (w2, _) = nmf_fit(&x, 2, 2000, 7).unwrap();
        assert_eq!(w, w2);
        // Transform is row-decoupled: duplicated rows get identical codes.
        let mut dup = Array2::zeros((3, x.ncols()));
        dup.row_mut(0).assign(&x.row(0));
        dup.row_mut(1).assign(&x.row(3));
        dup.row_mut(2).assign(&x.row(0));
        let codes = nmf_transform(&dup, &h, 100).unwrap();
        assert_eq!(codes.row(0), codes.row(2));
        assert!(codes.iter().all(|&v| v >= 0.0));
        // Negative input rejected; too few samples rejected.
        let neg = x.mapv(|v| v - 100.0);
        assert!(nmf_fit(&neg, 2, 10, 0).is_err());
        let one_row = Array2::from_elem((1, 5), 1.0);
        assert!(nmf_fit(&one_row, 2, 10, 0).is_err());
    }

    // -- projection + overlap ---------------------------------------------------

    #[test]
    fn projection_overlap_identities() {
        let mut r = stream(6, "proj", 0);
        let maps: Vec<Array2<f64>> = (0..8)
            .map(|_| Array2::from_shape_simple_fn((8, 8), || 2000.0 + 100.0 * normal_draw(&mut r)))
            .collect();
        for method in [ProjectionMethod::Pca, ProjectionMethod::Nmf] {
            let p = project_2d(&maps, &maps, method).unwrap();
            assert_eq!(p.true_points.len(), 8);
            assert_eq!(p.gen_points.len(), 8);
            assert_abs_diff_eq!(p.overlap, 1.0, epsilon = 1e-12);
            for (a, b) in p.true_points.iter().zip(p.gen_points.iter()) {
                assert_eq!(a, b, "identical sets must project identically");
            }
        }
        // Disjoint clouds → near-zero overlap.
        let shifted: Vec<Array2<f64>> = maps.iter().map(|m| m.mapv(|v| v + 10_000.0)).collect();
        let p = project_2d(&maps, &shifted, ProjectionMethod::Pca).unwrap();
        assert!(p.overlap < 0.3, "disjoint sets overlap {}", p.overlap);
        assert!((0.0..=1.0).contains(&p.overlap));
        // Common permutation leaves the score unchanged.
        let perm: Vec<Array2<f64>> = maps.iter().rev().cloned().collect();
        let perm_shift: Vec<Array2<f64>> = shifted.iter().rev().cloned().collect();
        let p2 = project_2d(&perm, &perm_shift, ProjectionMethod::Pca).unwrap();
        assert_abs_diff_eq!(p.overlap, p2.overlap, epsilon = 1e-12);
        // Fewer samples than components.
        assert!(project_2d(&maps[0..1], &maps[0..1], ProjectionMethod::Pca).is_err());
    }

    // -- kz spectrum ---------------------------------------------------------

    #[test]
    fn kz_spectrum_analytic_and_parseval() {
        let h = 32;
        let base = Array2::<f64>::zeros((h, 4));
        // Zero perturbation → zero spectrum.
        let s = kz_spectrum(&base, &base).unwrap();
        assert_eq!(s.len(), h);
        assert!(s.iter().all(|&v| v == 0.0));
        // Single-column sinusoid of wavenumber k peaks at bin k.
        let k0 = 5usize;
        let mut m = base.clone();
        for r in 0..h {
            m[[r, 0]] = (2.0 * std::f64::consts::PI * k0 as f64 * r as f64 / h as f64).sin();
        }
        let s = kz_spectrum(&m, &base).unwrap();
        let peak = s
            .iter()
            .take(h / 2)
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, k0);
        // Parseval on random perturbations.
        let mut r = stream(7, "kz", 0);
        for _ in 0..20 {
            let a = rand_map(&mut r, 24, 6);
            let b = rand_map(&mut r, 24, 6);
            let s = kz_spectrum(&a, &b).unwrap();
            let lhs: f64 = s.iter().map(|&v| v * v).sum();
            let rhs: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<f64>()
                / 6.0;
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-6 * rhs.max(1.0));
        }
        // Dim mismatch.
        assert!(kz_spectrum(&base, &Array2::zeros((8, 4))).is_err());
    }

    // -- boxplot ---------------------------------------------------------------

    #[test]
    fn boxplot_matches_hand_computations() {
        let s = boxplot_stats(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(s.median, 3.0);
        assert_eq!(s.q1, 2.0);
        assert_eq!(s.q3, 4.0);
        assert_eq!(s.whisker_lo, 1.0);
        assert_eq!(s.whisker_hi, 5.0);
        assert!(s.outliers.is_empty());
        // All-equal values: zero IQR, no outliers.
        let s = boxplot_stats(&[2.5; 7]).unwrap();
        assert_eq!(s.median, 2.5);
        assert_eq!(s.q1, s.q3);
        assert!(s.outliers.is_empty());
        // Adding a value at the median keeps the median.
        let s1 = boxplot_stats(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let s2 = boxplot_stats(&[1.0, 2.0, 3.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(s1.median, s2.median);
        // Far point becomes an outlier and the whisker pulls in.
        let s = boxplot_stats(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(s.outliers, vec![100.0]);
        assert_eq!(s.whisker_hi, 4.0);
        assert!(boxplot_stats(&[]).is_err());
        assert!(boxplot_stats(&[f64::NAN]).is_err());
        // Quartiles stay ordered on random data.
        let mut r = stream(8, "box", 0);
        for _ in 0..20 {
            let v: Vec<f64> = (0..17).map(|_| normal_draw(&mut r)).collect();
            let s = boxplot_stats(&v).unwrap();
            assert!(s.q1 <= s.median && s.median <= s.q3);
            assert!(s.whisker_lo <= s.q1 && s.q3 <= s.whisker_hi);
        }
    }

    // -- csv emission -------------------------------------------------------------

    #[test]
    fn csv_writers_produce_parseable_tables() {
        let dir = tempfile::tempdir().unwrap();
        let stats = boxplot_stats(&[1.0, 2.0, 3.0, 4.0, 50.0]).unwrap();
        let bp = dir.path().join("boxplot.csv");
        write_boxplot_csv(&bp, &stats).unwrap();
        let (header, rows) = crate::io::read_csv(&bp).unwrap();
        assert_eq!(header, vec!["stat", "value"]);
        assert_eq!(rows.len(), 5 + stats.outliers.len());
        assert_eq!(rows[0][0], "median");
        let kz = dir.path().join("kz.csv");
        write_kz_csv(
            &kz,
            &[
                ("truth".into(), vec![0.0, 1.0, 2.0]),
                ("pred".into(), vec![0.5, 1.5, 2.5]),
            ],
        )
        .unwrap();
        let (header, rows) = crate::io::read_csv(&kz).unwrap();
        assert_eq!(header, vec!["bin", "truth", "pred"]);
        assert_eq!(rows.len(), 3);
        let parsed: f64 = rows[1][2].parse().unwrap();
        assert_eq!(parsed, 1.5);
    }
}
