//! Data-driven seismic inversion: a small encoder–decoder network that maps
//! multi-shot surface gathers to velocity maps, trained with mean-absolute
//! error — with or without synthetic augmentation pairs mixed in.
//!
//! Gathers enter as `[shots, receivers, nt]` traces, are time-downsampled by
//! windowed averaging and standardized per (shot, receiver) trace with
//! statistics fitted on the training set and stored in the checkpoint.
//! Velocity targets are min-max normalized to `[0,1]`; inference returns
//! physical units.

use crate::datagen::{classify_leak, LeakClass, LeakageScenario};
use crate::genmodels::{ModelKind, Normalization, SyntheticSample};
use crate::io::{fmt_f64, Meta};
use crate::nn::{
    zero_grads, Adam, Conv2d, Dense, Flatten, HasParams, Layer, LeakyRelu, Param, Scalar,
    Sequential, Tensor, Unflatten, Upsample2x,
};
use crate::rng::stream;
use crate::wavesim::{forward_map, gather_stem, read_gather, SimConfig};
use crate::{Error, Result};
use ndarray::{Array2, Array3, Array4};
use rand::RngExt;
use rayon::prelude::*;
use std::path::Path;

/// Default time-downsampling factor (512 samples → 64 rows).
pub const TIME_DOWNSAMPLE: usize = 8;

/// Default encoder widths: five conv blocks collapsing time and receivers.
pub const ENC_WIDTHS: [usize; 5] = [8, 16, 32, 64, 64];

/// Default decoder widths: four upsampling blocks from the 4×4 seed.
pub const DEC_WIDTHS: [usize; 4] = [64, 32, 16, 8];

// ---------------------------------------------------------------------------
// Training pairs
// ---------------------------------------------------------------------------

/// Which augmentation produced the synthetic half of a training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugTag {
    None,
    Ae,
    Vae,
    VaePercep,
    VaeReg,
    Linear,
}

impl AugTag {
    pub fn as_str(self) -> &'static str {
        match self {
            AugTag::None => "none",
            AugTag::Ae => "ae",
            AugTag::Vae => "vae",
            AugTag::VaePercep => "vae_percep",
            AugTag::VaeReg => "vae_reg",
            AugTag::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugTag::None),
            other => Ok(Self::from_kind(ModelKind::parse(other)?)),
        }
    }

    pub fn from_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Ae => AugTag::Ae,
            ModelKind::Vae => AugTag::Vae,
            ModelKind::VaePercep => AugTag::VaePercep,
            ModelKind::VaeReg => AugTag::VaeReg,
            ModelKind::Linear => AugTag::Linear,
        }
    }
}

/// Where a training pair came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairProvenance {
    Real,
    Synthetic { tag: AugTag, alpha: f64 },
}

/// One (gathers, velocity map) supervision pair.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    /// Raw traces `[shots, receivers, nt]` (f32: matches on-disk precision).
    pub gathers: Array3<f32>,
    /// Velocity map in physical units.
    pub target: Array2<f64>,
    /// Leaked mass in kg; `None` for synthetic maps (no mass label exists).
    pub leak_mass: Option<f64>,
    pub provenance: PairProvenance,
}

impl TrainingPair {
    pub fn leak_class(&self) -> Option<LeakClass> {
        self.leak_mass.map(classify_leak)
    }
}

/// Pair up scenario maps with their on-disk gathers (written by the forward
/// modeling stage). Pairs are ordered by (scenario, year).
pub fn load_pairs(
    scenarios: &[LeakageScenario],
    gather_dir: &Path,
    n_shots: usize,
) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::new();
    for s in scenarios {
        for m in &s.maps {
            let mut shots: Vec<Array2<f64>> = Vec::with_capacity(n_shots);
            for k in 0..n_shots {
                let stem = gather_stem(s.scenario_id, m.year, k);
                let (traces, _) = read_gather(&gather_dir.join(format!("{stem}.f32")))?;
                shots.push(traces);
            }
            out.push(TrainingPair {
                gathers: stack_shots(&shots)?,
                target: m.grid.clone(),
                leak_mass: Some(m.leak_mass),
                provenance: PairProvenance::Real,
            });
        }
    }
    Ok(out)
}

/// Forward-model synthetic maps into training pairs (parallel over samples).
pub fn make_synthetic_pairs(
    samples: &[SyntheticSample],
    cfg: &SimConfig,
    tag: AugTag,
) -> Result<Vec<TrainingPair>> {
    samples
        .par_iter()
        .map(|s| {
            let gathers = forward_map(&s.map, cfg)?;
            let shots: Vec<Array2<f64>> = gathers.into_iter().map(|g| g.traces).collect();
            Ok(TrainingPair {
                gathers: stack_shots(&shots)?,
                target: s.map.clone(),
                leak_mass: None,
                provenance: PairProvenance::Synthetic { tag, alpha: s.alpha },
            })
        })
        .collect()
}

fn stack_shots(shots: &[Array2<f64>]) -> Result<Array3<f32>> {
    if shots.is_empty() {
        return Err(Error::Data("pair needs at least one shot gather".into()));
    }
    let (r, nt) = shots[0].dim();
    let mut out = Array3::<f32>::zeros((shots.len(), r, nt));
    for (k, g) in shots.iter().enumerate() {
        if g.dim() != (r, nt) {
            return Err(Error::Shape(format!(
                "shot {k} has {:?} traces, shot 0 has {:?}",
                g.dim(),
                (r, nt)
            )));
        }
        out.slice_mut(ndarray::s![k, .., ..])
            .assign(&g.mapv(|v| v as f32));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Gather preprocessing
// ---------------------------------------------------------------------------

/// Mean-pool traces along time by `factor` (`nt` must divide evenly).
pub fn downsample_time(traces: &Array2<f64>, factor: usize) -> Result<Array2<f64>> {
    let (r, nt) = traces.dim();
    if factor == 0 || nt % factor != 0 {
        return Err(Error::Config(format!(
            "cannot downsample {nt} samples by a factor of {factor}"
        )));
    }
    let t_out = nt / factor;
    let mut out = Array2::<f64>::zeros((r, t_out));
    for i in 0..r {
        for t in 0..t_out {
            let mut acc = 0.0;
            for j in 0..factor {
                acc += traces[[i, t * factor + j]];
            }
            out[[i, t]] = acc / factor as f64;
        }
    }
    Ok(out)
}

/// Per-trace standardization statistics: one (mean, std) per (shot,
/// receiver), fitted over all pairs and downsampled time rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStats {
    pub mean: Array2<f32>,
    pub std: Array2<f32>,
}

impl TraceStats {
    pub fn fit(pairs: &[TrainingPair], t_ds: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("no pairs to fit trace statistics on".into()));
        }
        let (s, r, nt) = pairs[0].gathers.dim();
        let factor = nt / t_ds;
        let mut sum = Array2::<f64>::zeros((s, r));
        let mut sumsq = Array2::<f64>::zeros((s, r));
        let n = (pairs.len() * t_ds) as f64;
        for p in pairs {
            for si in 0..s {
                for ri in 0..r {
                    for t in 0..t_ds {
                        let mut acc = 0.0f64;
                        for j in 0..factor {
                            acc += p.gathers[[si, ri, t * factor + j]] as f64;
                        }
                        let v = acc / factor as f64;
                        sum[[si, ri]] += v;
                        sumsq[[si, ri]] += v * v;
                    }
                }
            }
        }
        let mean = sum.mapv(|v| (v / n) as f32);
        let std = ndarray::Zip::from(&sum)
            .and(&sumsq)
            .map_collect(|&s1, &s2| {
                let m = s1 / n;
                ((s2 / n - m * m).max(0.0).sqrt().max(1e-8)) as f32
            });
        Ok(TraceStats { mean, std })
    }
}

/// Downsample + standardize one pair's gathers into a network input plane
/// `[shots, t_ds, receivers]` (time as image height, receivers as width).
pub fn preprocess_gathers(
    gathers: &Array3<f32>,
    stats: &TraceStats,
    t_ds: usize,
) -> Result<Array3<f32>> {
    let (s, r, nt) = gathers.dim();
    if stats.mean.dim() != (s, r) {
        return Err(Error::Shape(format!(
            "trace stats cover {:?} shots×receivers, gathers have {:?}",
            stats.mean.dim(),
            (s, r)
        )));
    }
    if t_ds == 0 || nt % t_ds != 0 {
        return Err(Error::Config(format!(
            "cannot reduce {nt} samples to {t_ds} rows by windowed averaging"
        )));
    }
    let factor = nt / t_ds;
    let mut out = Array3::<f32>::zeros((s, t_ds, r));
    for si in 0..s {
        for ri in 0..r {
            let m = stats.mean[[si, ri]];
            let sd = stats.std[[si, ri]];
            for t in 0..t_ds {
                let mut acc = 0.0f64;
                for j in 0..factor {
                    acc += gathers[[si, ri, t * factor + j]] as f64;
                }
                out[[si, t, ri]] = ((acc / factor as f64) as f32 - m) / sd;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

/// Inversion hyper-parameters (defaults follow the training recipe: batch
/// 24, 80 epochs, adaptive optimizer at lr 0.01, weight decay 1e-4).
#[derive(Debug, Clone)]
pub struct InvHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub enc_widths: Vec<usize>,
    pub bottleneck: usize,
    pub dec_widths: Vec<usize>,
    pub time_downsample: usize,
    pub seed: u64,
}

impl Default for InvHyper {
    fn default() -> Self {
        InvHyper {
            epochs: 80,
            batch: 24,
            lr: 0.01,
            weight_decay: 1e-4,
            enc_widths: ENC_WIDTHS.to_vec(),
            bottleneck: 128,
            dec_widths: DEC_WIDTHS.to_vec(),
            time_downsample: TIME_DOWNSAMPLE,
            seed: 0,
        }
    }
}

/// Encoder–decoder inversion network: conv blocks collapse the
/// time×receiver plane to a dense bottleneck, upsampling blocks grow the
/// velocity map back to `rows × cols`. One `Sequential` end to end.
pub struct InversionNet<S: Scalar> {
    pub n_shots: usize,
    pub t_in: usize,
    pub r_in: usize,
    pub rows: usize,
    pub cols: usize,
    net: Sequential<S>,
}

impl<S: Scalar> InversionNet<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_shots: usize,
        t_in: usize,
        r_in: usize,
        rows: usize,
        cols: usize,
        enc_widths: &[usize],
        bottleneck: usize,
        dec_widths: &[usize],
        rng: &mut rand_chacha::ChaCha12Rng,
    ) -> Result<Self> {
        if enc_widths.is_empty() || dec_widths.is_empty() {
            return Err(Error::Config(
                "inversion net needs at least one encoder and one decoder block".into(),
            ));
        }
        let ef = 1usize << enc_widths.len();
        if t_in % ef != 0 || r_in % ef != 0 || t_in / ef == 0 || r_in / ef == 0 {
            return Err(Error::Config(format!(
                "gather plane {t_in}×{r_in} is not divisible by the {}-block downsampling factor {ef}",
                enc_widths.len()
            )));
        }
        let df = 1usize << dec_widths.len();
        if rows % df != 0 || cols % df != 0 || rows / df == 0 || cols / df == 0 {
            return Err(Error::Config(format!(
                "map {rows}×{cols} is not divisible by the {}-block upsampling factor {df}",
                dec_widths.len()
            )));
        }
        let (th, tw) = (t_in / ef, r_in / ef);
        let (bh, bw) = (rows / df, cols / df);
        let mut layers: Vec<Box<dyn Layer<S>>> = Vec::new();
        let mut c = n_shots;
        for &wd in enc_widths {
            layers.push(Box::new(Conv2d::new(c, wd, 3, 2, 1, rng)));
            layers.push(Box::new(LeakyRelu::new(0.2)));
            c = wd;
        }
        layers.push(Box::new(Flatten::new()));
        layers.push(Box::new(Dense::new(c * th * tw, bottleneck, rng)));
        layers.push(Box::new(LeakyRelu::new(0.2)));
        layers.push(Box::new(Dense::new(bottleneck, dec_widths[0] * bh * bw, rng)));
        layers.push(Box::new(LeakyRelu::new(0.2)));
        layers.push(Box::new(Unflatten::new(dec_widths[0], bh, bw)));
        let n = dec_widths.len();
        let mut cur = dec_widths[0];
        for i in 0..n {
            let next = dec_widths[(i + 1).min(n - 1)];
            layers.push(Box::new(Upsample2x));
            layers.push(Box::new(Conv2d::new(cur, next, 3, 1, 1, rng)));
            layers.push(Box::new(LeakyRelu::new(0.2)));
            cur = next;
        }
        layers.push(Box::new(Conv2d::new(cur, 1, 3, 1, 1, rng))); // linear output
        Ok(InversionNet {
            n_shots,
            t_in,
            r_in,
            rows,
            cols,
            net: Sequential::new(layers),
        })
    }

    fn check_input(&self, x: &Array4<S>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.n_shots || h != self.t_in || w != self.r_in {
            return Err(Error::Shape(format!(
                "inversion net expects [*, {}, {}, {}] inputs, got [*, {c}, {h}, {w}]",
                self.n_shots, self.t_in, self.r_in
            )));
        }
        Ok(())
    }

    /// Batched forward pass; output `[b, 1, rows, cols]` in normalized units.
    pub fn forward(&mut self, x: &Array4<S>, train: bool) -> Result<Array4<S>> {
        self.check_input(x)?;
        Ok(self.net.forward(Tensor::D4(x.clone()), train).d4())
    }

    pub fn backward(&mut self, dy: &Array4<S>) {
        self.net.backward(Tensor::D4(dy.clone()));
    }
}

impl<S: Scalar> HasParams<S> for InversionNet<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<S>)) {
        self.net.visit_params(&format!("{prefix}net."), f);
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean-absolute error between two maps.
pub fn invnet_loss(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(truth.iter())
        .map(|(&a, &b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Batched MAE (mean of per-sample MAEs; identical to the global element
/// mean since all maps share one shape).
pub fn invnet_loss_batch<S: Scalar>(pred: &Array4<S>, truth: &Array4<S>) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if pred.dim() != truth.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(truth.iter())
        .map(|(&a, &b)| (a - b).as_f64().abs())
        .sum::<f64>()
        / n)
}

/// Forward + MAE loss + backward in one call (no optimizer step). Generic
/// so gradient checks can drive the production path in f64.
pub fn inv_loss_and_grads<S: Scalar>(
    net: &mut InversionNet<S>,
    x: &Array4<S>,
    target_unit: &Array4<S>,
) -> Result<f64> {
    let pred = net.forward(x, true)?;
    let loss = invnet_loss_batch(&pred, target_unit)?;
    let scale = S::from_f64(1.0 / pred.len() as f64);
    let d = ndarray::Zip::from(&pred)
        .and(target_unit)
        .map_collect(|&p, &t| (p - t).signum() * scale);
    net.backward(&d);
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One row of the inversion loss history.
#[derive(Debug, Clone, Copy)]
pub struct InvLossRow {
    pub epoch: usize,
    pub loss: f64,
}

/// Checkpoint metadata for a trained inversion net.
#[derive(Debug, Clone)]
pub struct InversionCheckpoint {
    pub tag: AugTag,
    pub n_shots: usize,
    pub t_in: usize,
    pub r_in: usize,
    pub rows: usize,
    pub cols: usize,
    pub enc_widths: Vec<usize>,
    pub bottleneck: usize,
    pub dec_widths: Vec<usize>,
    pub time_downsample: usize,
    pub bounds: (f64, f64),
    pub epochs_trained: usize,
    pub history: Vec<InvLossRow>,
    pub echo: Vec<(String, String)>,
}

/// A trained model ready for inference.
pub struct TrainedInversion {
    pub net: InversionNet<f32>,
    pub stats: TraceStats,
    pub norm: Normalization,
    pub time_downsample: usize,
}

impl TrainedInversion {
    /// Predict the velocity map for one pair's gathers, in physical units.
    pub fn invnet_forward(&mut self, gathers: &Array3<f32>) -> Result<Array2<f64>> {
        let t_ds = self.net.t_in;
        let plane = preprocess_gathers(gathers, &self.stats, t_ds)?;
        let (s, t, r) = plane.dim();
        let mut x = Array4::<f32>::zeros((1, s, t, r));
        x.slice_mut(ndarray::s![0, .., .., ..]).assign(&plane);
        let y = self.net.forward(&x, false)?;
        let unit = y
            .index_axis(ndarray::Axis(0), 0)
            .index_axis(ndarray::Axis(0), 0)
            .to_owned();
        Ok(self.norm.from_unit(&unit))
    }
}

/// Train an inversion net on real plus (optionally) synthetic pairs. All
/// synthetic pairs must carry the same augmentation tag. Deterministic in
/// `hyper.seed`.
pub fn train_inversion(
    real: &[TrainingPair],
    synthetic: &[TrainingPair],
    hyper: &InvHyper,
) -> Result<(TrainedInversion, InversionCheckpoint)> {
    if real.is_empty() {
        return Err(Error::Data("no real training pairs".into()));
    }
    let tag = synthetic_tag(synthetic)?;
    let merged: Vec<&TrainingPair> = real.iter().chain(synthetic.iter()).collect();
    let (s, r, nt) = merged[0].gathers.dim();
    let (rows, cols) = merged[0].target.dim();
    for (i, p) in merged.iter().enumerate() {
        if p.gathers.dim() != (s, r, nt) || p.target.dim() != (rows, cols) {
            return Err(Error::Shape(format!(
                "pair {i}: gathers {:?} / target {:?} differ from pair 0 ({:?} / {:?})",
                p.gathers.dim(),
                p.target.dim(),
                (s, r, nt),
                (rows, cols)
            )));
        }
    }
    if hyper.time_downsample == 0 || nt % hyper.time_downsample != 0 {
        return Err(Error::Config(format!(
            "nt {nt} is not divisible by the time-downsampling factor {}",
            hyper.time_downsample
        )));
    }
    let t_ds = nt / hyper.time_downsample;

    // Fit preprocessing on the merged training set.
    let owned: Vec<TrainingPair> = merged.iter().map(|&p| p.clone()).collect();
    let stats = TraceStats::fit(&owned, t_ds)?;
    let norm = fit_target_bounds(&owned)?;

    // Assemble every input/target plane once.
    let n = owned.len();
    let mut xs = Array4::<f32>::zeros((n, s, t_ds, r));
    let mut ys = Array4::<f32>::zeros((n, 1, rows, cols));
    for (i, p) in owned.iter().enumerate() {
        let plane = preprocess_gathers(&p.gathers, &stats, t_ds)?;
        xs.slice_mut(ndarray::s![i, .., .., ..]).assign(&plane);
        ys.slice_mut(ndarray::s![i, 0, .., ..])
            .assign(&norm.to_unit::<f32>(&p.target));
    }

    let mut rng = stream(hyper.seed, "inv-init", 0);
    let mut net = InversionNet::<f32>::new(
        s,
        t_ds,
        r,
        rows,
        cols,
        &hyper.enc_widths,
        hyper.bottleneck,
        &hyper.dec_widths,
        &mut rng,
    )?;
    let mut opt = Adam::new(hyper.lr, hyper.weight_decay);

    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut srng = stream(hyper.seed, "inv-shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = srng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut total = 0.0f64;
        let mut n_batches = 0usize;
        for chunk in order.chunks(hyper.batch) {
            let b = chunk.len();
            let mut xb = Array4::<f32>::zeros((b, s, t_ds, r));
            let mut yb = Array4::<f32>::zeros((b, 1, rows, cols));
            for (bi, &i) in chunk.iter().enumerate() {
                xb.slice_mut(ndarray::s![bi, .., .., ..])
                    .assign(&xs.index_axis(ndarray::Axis(0), i));
                yb.slice_mut(ndarray::s![bi, .., .., ..])
                    .assign(&ys.index_axis(ndarray::Axis(0), i));
            }
            zero_grads(&mut net);
            let loss = inv_loss_and_grads(&mut net, &xb, &yb)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            opt.step(&mut net);
            total += loss;
            n_batches += 1;
        }
        history.push(InvLossRow {
            epoch: epoch + 1,
            loss: total / n_batches.max(1) as f64,
        });
    }

    let echo = vec![
        ("epochs".into(), hyper.epochs.to_string()),
        ("batch".into(), hyper.batch.to_string()),
        ("lr".into(), fmt_f64(hyper.lr)),
        ("weight_decay".into(), fmt_f64(hyper.weight_decay)),
        ("seed".into(), hyper.seed.to_string()),
        ("n_real".into(), real.len().to_string()),
        ("n_synthetic".into(), synthetic.len().to_string()),
    ];
    let ckpt = InversionCheckpoint {
        tag,
        n_shots: s,
        t_in: t_ds,
        r_in: r,
        rows,
        cols,
        enc_widths: hyper.enc_widths.clone(),
        bottleneck: hyper.bottleneck,
        dec_widths: hyper.dec_widths.clone(),
        time_downsample: hyper.time_downsample,
        bounds: (norm.lo, norm.hi),
        epochs_trained: hyper.epochs,
        history,
        echo,
    };
    Ok((
        TrainedInversion {
            net,
            stats,
            norm,
            time_downsample: hyper.time_downsample,
        },
        ckpt,
    ))
}

fn synthetic_tag(synthetic: &[TrainingPair]) -> Result<AugTag> {
    let mut tag = AugTag::None;
    for p in synthetic {
        match p.provenance {
            PairProvenance::Synthetic { tag: t, .. } => {
                if tag == AugTag::None {
                    tag = t;
                } else if tag != t {
                    return Err(Error::Data(format!(
                        "mixed augmentation tags in synthetic pairs: {} and {}",
                        tag.as_str(),
                        t.as_str()
                    )));
                }
            }
            PairProvenance::Real => {
                return Err(Error::Data(
                    "real pair passed in the synthetic set".into(),
                ))
            }
        }
    }
    Ok(tag)
}

fn fit_target_bounds(pairs: &[TrainingPair]) -> Result<Normalization> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in pairs {
        for &v in p.target.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::Data(format!(
            "cannot fit velocity bounds: lo={lo}, hi={hi}"
        )));
    }
    Ok(Normalization { lo, hi })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Test-set slice: everything, or the small-leak edge cases (Tiny ∪ Small).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestSubset {
    General,
    Small,
}

impl TestSubset {
    pub fn as_str(self) -> &'static str {
        match self {
            TestSubset::General => "general",
            TestSubset::Small => "small",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(TestSubset::General),
            "small" => Ok(TestSubset::Small),
            other => Err(Error::Config(format!(
                "unknown test subset {other:?}; expected general or small"
            ))),
        }
    }

    pub fn admits(self, class: LeakClass) -> bool {
        match self {
            TestSubset::General => true,
            TestSubset::Small => matches!(class, LeakClass::Tiny | LeakClass::Small),
        }
    }
}

/// Subset evaluation result: the mean MAE plus the per-sample list (box-plot
/// input), aligned with the filtered pair order.
#[derive(Debug, Clone)]
pub struct TestReport {
    pub subset: TestSubset,
    pub mean_mae: f64,
    pub per_sample: Vec<f64>,
    pub classes: Vec<LeakClass>,
}

/// Evaluate a model on the chosen subset of labeled test pairs. Per-sample
/// errors are physical-unit MAEs; an empty subset is an error.
pub fn test_inversion(
    model: &mut TrainedInversion,
    pairs: &[TrainingPair],
    subset: TestSubset,
) -> Result<TestReport> {
    let mut per_sample = Vec::new();
    let mut classes = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let class = p.leak_class().ok_or_else(|| {
            Error::Data(format!("test pair {i} has no leak-mass label"))
        })?;
        if !subset.admits(class) {
            continue;
        }
        let pred = model.invnet_forward(&p.gathers)?;
        per_sample.push(invnet_loss(&pred, &p.target)?);
        classes.push(class);
    }
    if per_sample.is_empty() {
        return Err(Error::Data(format!(
            "no test pairs fall in the {} subset",
            subset.as_str()
        )));
    }
    let mean_mae = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(TestReport {
        subset,
        mean_mae,
        per_sample,
        classes,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint persistence
// ---------------------------------------------------------------------------

/// Save checkpoint directory: `header.meta`, `weights.w32` (net parameters
/// plus the trace statistics), `loss_history.csv`.
pub fn save_inversion(
    dir: &Path,
    model: &mut TrainedInversion,
    ckpt: &InversionCheckpoint,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut meta = Meta::new();
    meta.push("format", "inversion-checkpoint 1");
    meta.push("aug_tag", ckpt.tag.as_str());
    meta.push("n_shots", ckpt.n_shots);
    meta.push("t_in", ckpt.t_in);
    meta.push("r_in", ckpt.r_in);
    meta.push("rows", ckpt.rows);
    meta.push("cols", ckpt.cols);
    meta.push_usize_list("enc_widths", &ckpt.enc_widths);
    meta.push("bottleneck", ckpt.bottleneck);
    meta.push_usize_list("dec_widths", &ckpt.dec_widths);
    meta.push("time_downsample", ckpt.time_downsample);
    meta.push_f64("bound_lo", ckpt.bounds.0);
    meta.push_f64("bound_hi", ckpt.bounds.1);
    meta.push("epochs_trained", ckpt.epochs_trained);
    for (k, v) in &ckpt.echo {
        meta.push(&format!("cfg.{k}"), v);
    }
    meta.save(&dir.join("header.meta"))?;

    let mut tensors = crate::nn::export_params(&mut model.net);
    let (s, r) = model.stats.mean.dim();
    tensors.push((
        "norm.mean".into(),
        vec![s, r],
        model.stats.mean.iter().cloned().collect(),
    ));
    tensors.push((
        "norm.std".into(),
        vec![s, r],
        model.stats.std.iter().cloned().collect(),
    ));
    crate::io::save_weights(&dir.join("weights.w32"), &tensors)?;

    let rows: Vec<Vec<String>> = ckpt
        .history
        .iter()
        .map(|h| vec![h.epoch.to_string(), fmt_f64(h.loss)])
        .collect();
    crate::io::write_csv(&dir.join("loss_history.csv"), "epoch,loss", &rows)
}

/// Load a checkpoint directory written by [`save_inversion`].
pub fn load_inversion(dir: &Path) -> Result<(TrainedInversion, InversionCheckpoint)> {
    let hp = dir.join("header.meta");
    let meta = Meta::load(&hp)?;
    let tag = AugTag::parse(&meta.get_str("aug_tag", &hp)?)?;
    let n_shots = meta.get_usize("n_shots", &hp)?;
    let t_in = meta.get_usize("t_in", &hp)?;
    let r_in = meta.get_usize("r_in", &hp)?;
    let rows = meta.get_usize("rows", &hp)?;
    let cols = meta.get_usize("cols", &hp)?;
    let enc_widths = meta.get_usize_list("enc_widths", &hp)?;
    let bottleneck = meta.get_usize("bottleneck", &hp)?;
    let dec_widths = meta.get_usize_list("dec_widths", &hp)?;
    let time_downsample = meta.get_usize("time_downsample", &hp)?;
    let bounds = (meta.get_f64("bound_lo", &hp)?, meta.get_f64("bound_hi", &hp)?);
    let epochs_trained = meta.get_usize("epochs_trained", &hp)?;
    let echo = meta
        .entries()
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix("cfg.")
                .map(|name| (name.to_string(), v.clone()))
        })
        .collect();

    let mut rng = stream(0, "inv-load", 0);
    let mut net = InversionNet::<f32>::new(
        n_shots,
        t_in,
        r_in,
        rows,
        cols,
        &enc_widths,
        bottleneck,
        &dec_widths,
        &mut rng,
    )?;
    let store = crate::io::WeightStore::load(&dir.join("weights.w32"))?;
    crate::nn::import_params(&mut net, &store)?;
    let mean = store.get("norm.mean", &[n_shots, r_in])?;
    let std = store.get("norm.std", &[n_shots, r_in])?;
    let stats = TraceStats {
        mean: Array2::from_shape_vec((n_shots, r_in), mean.iter().cloned().collect())
            .expect("shape checked by store"),
        std: Array2::from_shape_vec((n_shots, r_in), std.iter().cloned().collect())
            .expect("shape checked by store"),
    };

    let history = {
        let path = dir.join("loss_history.csv");
        let (_, rows) = crate::io::read_csv(&path)?;
        rows.iter()
            .map(|row| {
                let err = |detail: String| Error::Format {
                    path: path.to_path_buf(),
                    detail,
                };
                let epoch: usize = row
                    .first()
                    .ok_or_else(|| err("empty row".into()))?
                    .parse()
                    .map_err(|e| err(format!("bad epoch: {e}")))?;
                let loss: f64 = row
                    .get(1)
                    .ok_or_else(|| err("missing loss".into()))?
                    .parse()
                    .map_err(|e| err(format!("bad loss: {e}")))?;
                Ok(InvLossRow { epoch, loss })
            })
            .collect::<Result<Vec<_>>>()?
    };

    let ckpt = InversionCheckpoint {
        tag,
        n_shots,
        t_in,
        r_in,
        rows,
        cols,
        enc_widths,
        bottleneck,
        dec_widths,
        time_downsample,
        bounds,
        epochs_trained,
        history,
        echo,
    };
    Ok((
        TrainedInversion {
            net,
            stats,
            norm: Normalization {
                lo: bounds.0,
                hi: bounds.1,
            },
            time_downsample,
        },
        ckpt,
    ))
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DatagenConfig, CLASS_BOUNDS};
    use crate::nn::normal_draw;
    use approx::assert_abs_diff_eq;

    /// Synthetic supervision pairs with random (non-simulated) gathers —
    /// enough structure for descent tests without running the wave solver.
    fn random_pairs(n: usize, seed: u64) -> Vec<TrainingPair> {
        let mut r = stream(seed, "inv-test-pairs", 0);
        (0..n)
            .map(|_| {
                let gathers =
                    Array3::from_shape_simple_fn((2, 16, 64), || normal_draw(&mut r) as f32);
                // Target loosely correlated with the gather mean so there is
                // signal to fit.
                let level = gathers.iter().map(|&v| v as f64).sum::<f64>() / 2048.0;
                let target =
                    Array2::from_shape_fn((16, 16), |(i, j)| {
                        2000.0 + 50.0 * level + 10.0 * ((i + j) as f64)
                    });
                let mass = 10.0f64.powf(5.0 + 3.0 * r.random::<f64>());
                TrainingPair {
                    gathers,
                    target,
                    leak_mass: Some(mass),
                    provenance: PairProvenance::Real,
                }
            })
            .collect()
    }

    fn tiny_hyper() -> InvHyper {
        InvHyper {
            epochs: 3,
            batch: 4,
            lr: 3e-3,
            weight_decay: 1e-4,
            enc_widths: vec![4, 8],
            bottleneck: 16,
            dec_widths: vec![8, 4],
            time_downsample: 4,
            seed: 5,
        }
    }

    // -- loss ------------------------------------------------------------------

    #[test]
    fn mae_loss_matches_oracle_and_closed_forms() {
        let mut r = stream(1, "mae", 0);
        let a = Array2::from_shape_simple_fn((8, 8), || normal_draw(&mut r));
        let b = Array2::from_shape_simple_fn((8, 8), || normal_draw(&mut r));
        assert_eq!(invnet_loss(&a, &a).unwrap(), 0.0);
        let shifted = a.mapv(|v| v + 0.37);
        assert_abs_diff_eq!(invnet_loss(&shifted, &a).unwrap(), 0.37, epsilon = 1e-12);
        let got = invnet_loss(&a, &b).unwrap();
        let want = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 64.0;
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        let c = Array2::<f64>::zeros((4, 4));
        assert!(invnet_loss(&a, &c).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences_on_tiny_net() {
        // f64 net + FD over a sample of parameters.
        let mut rng = stream(7, "inv-grad", 0);
        let mut net =
            InversionNet::<f64>::new(1, 8, 8, 8, 8, &[3, 4], 10, &[4, 3], &mut rng).unwrap();
        let x = Array4::from_shape_simple_fn((2, 1, 8, 8), || 0.5 * normal_draw(&mut rng));
        let y = Array4::from_shape_simple_fn((2, 1, 8, 8), || 0.5 * normal_draw(&mut rng));
        struct M<'a> {
            net: &'a mut InversionNet<f64>,
            x: Array4<f64>,
            y: Array4<f64>,
        }
        impl crate::nn::GradModel for M<'_> {
            fn eval(&mut self, grads: bool) -> f64 {
                if grads {
                    zero_grads(self.net);
                    inv_loss_and_grads(self.net, &self.x, &self.y).unwrap()
                } else {
                    let p = self.net.forward(&self.x, false).unwrap();
                    invnet_loss_batch(&p, &self.y).unwrap()
                }
            }
            fn visit(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
                self.net.visit_params("", &mut |_, p| f(p));
            }
        }
        let mut m = M {
            net: &mut net,
            x,
            y,
        };
        let worst = crate::nn::grad_check(&mut m, 3, &mut rng);
        assert!(worst < 1e-4, "worst relative FD error {worst}");
    }

    // -- preprocessing -----------------------------------------------------------

    #[test]
    fn downsampling_averages_windows() {
        let t = Array2::from_shape_vec((1, 8), vec![1.0, 3.0, 5.0, 7.0, 2.0, 2.0, 4.0, 4.0])
            .unwrap();
        let d = downsample_time(&t, 2).unwrap();
        assert_eq!(
            d,
            Array2::from_shape_vec((1, 4), vec![2.0, 6.0, 2.0, 4.0]).unwrap()
        );
        assert!(downsample_time(&t, 3).is_err());
        // Constant trace stays constant at any factor.
        let c = Array2::from_elem((2, 12), 0.8);
        let d = downsample_time(&c, 4).unwrap();
        assert!(d.iter().all(|&v| (v - 0.8).abs() < 1e-15));
    }

    #[test]
    fn standardization_zeroes_mean_and_unit_variance() {
        let pairs = random_pairs(6, 3);
        let t_ds = 16;
        let stats = TraceStats::fit(&pairs, t_ds).unwrap();
        // Re-standardize the whole set and verify per-trace moments.
        let (s, r) = stats.mean.dim();
        let mut acc = Array2::<f64>::zeros((s, r));
        let mut accsq = Array2::<f64>::zeros((s, r));
        for p in &pairs {
            let plane = preprocess_gathers(&p.gathers, &stats, t_ds).unwrap();
            for si in 0..s {
                for t in 0..t_ds {
                    for ri in 0..r {
                        let v = plane[[si, t, ri]] as f64;
                        acc[[si, ri]] += v;
                        accsq[[si, ri]] += v * v;
                    }
                }
            }
        }
        let n = (pairs.len() * t_ds) as f64;
        for si in 0..s {
            for ri in 0..r {
                let m = acc[[si, ri]] / n;
                let var = accsq[[si, ri]] / n - m * m;
                assert!(m.abs() < 1e-4, "residual mean {m}");
                assert!((var - 1.0).abs() < 1e-3, "residual variance {var}");
            }
        }
    }

    // -- network contracts --------------------------------------------------------

    #[test]
    fn untrained_net_with_zero_biases_maps_zero_to_constant() {
        let mut rng = stream(2, "inv-zero", 0);
        let mut net =
            InversionNet::<f32>::new(2, 16, 16, 16, 16, &[4, 8], 12, &[8, 4], &mut rng).unwrap();
        let x = Array4::<f32>::zeros((1, 2, 16, 16));
        let y = net.forward(&x, false).unwrap();
        let first = y[[0, 0, 0, 0]];
        assert!(
            y.iter().all(|&v| v == first),
            "zero input must give a constant map"
        );
        // Dim mismatch is an error.
        let bad = Array4::<f32>::zeros((1, 2, 8, 16));
        assert!(net.forward(&bad, false).is_err());
    }

    #[test]
    fn geometry_validation_rejects_indivisible_planes() {
        let mut rng = stream(3, "inv-geom", 0);
        assert!(InversionNet::<f32>::new(1, 10, 16, 16, 16, &[4, 8], 8, &[4], &mut rng).is_err());
        assert!(InversionNet::<f32>::new(1, 16, 16, 15, 16, &[4], 8, &[4], &mut rng).is_err());
        assert!(InversionNet::<f32>::new(1, 16, 16, 16, 16, &[], 8, &[4], &mut rng).is_err());
    }

    // -- training ------------------------------------------------------------------

    #[test]
    fn training_descends_with_mostly_monotone_early_epochs() {
        let pairs = random_pairs(24, 11);
        let mut hyper = tiny_hyper();
        hyper.epochs = 6;
        let (_, ckpt) = train_inversion(&pairs, &[], &hyper).unwrap();
        assert_eq!(ckpt.tag, AugTag::None);
        assert_eq!(ckpt.history.len(), 6);
        let drops = ckpt
            .history
            .windows(2)
            .filter(|w| w[1].loss <= w[0].loss)
            .count();
        assert!(
            drops >= 4,
            "expected ≥4 of 5 early steps non-increasing, got {drops}: {:?}",
            ckpt.history.iter().map(|h| h.loss).collect::<Vec<_>>()
        );
        let first = ckpt.history.first().unwrap().loss;
        let last = ckpt.history.last().unwrap().loss;
        assert!(last < first, "no overall descent: {first} → {last}");
    }

    #[test]
    fn training_is_deterministic_and_tags_checkpoints() {
        let pairs = random_pairs(10, 13);
        let synth: Vec<TrainingPair> = random_pairs(4, 14)
            .into_iter()
            .map(|mut p| {
                p.leak_mass = None;
                p.provenance = PairProvenance::Synthetic {
                    tag: AugTag::VaeReg,
                    alpha: 0.5,
                };
                p
            })
            .collect();
        let hyper = tiny_hyper();
        let (_, c1) = train_inversion(&pairs, &synth, &hyper).unwrap();
        let (_, c2) = train_inversion(&pairs, &synth, &hyper).unwrap();
        assert_eq!(c1.tag, AugTag::VaeReg);
        for (a, b) in c1.history.iter().zip(c2.history.iter()) {
            assert_eq!(a.loss, b.loss, "same seed must give identical histories");
        }
        // Baseline (no synthetic) vs augmented: tags differ, nothing else
        // about the config.
        let (_, c0) = train_inversion(&pairs, &[], &hyper).unwrap();
        assert_eq!(c0.tag, AugTag::None);
        // Mixed tags are rejected.
        let mut bad = synth.clone();
        bad[0].provenance = PairProvenance::Synthetic {
            tag: AugTag::Linear,
            alpha: 0.1,
        };
        assert!(train_inversion(&pairs, &bad, &hyper).is_err());
    }

    // -- evaluation ------------------------------------------------------------------

    #[test]
    fn subset_filtering_and_permutation_invariance() {
        let mut pairs = random_pairs(12, 17);
        // Force a known class layout: 4 tiny, 4 medium, 4 large.
        for (i, p) in pairs.iter_mut().enumerate() {
            p.leak_mass = Some(match i % 3 {
                0 => CLASS_BOUNDS[0] * 0.5,
                1 => CLASS_BOUNDS[1] * 1.5,
                _ => CLASS_BOUNDS[2] * 2.0,
            });
        }
        let hyper = tiny_hyper();
        let (mut model, _) = train_inversion(&pairs, &[], &hyper).unwrap();
        let general = test_inversion(&mut model, &pairs, TestSubset::General).unwrap();
        assert_eq!(general.per_sample.len(), 12);
        let small = test_inversion(&mut model, &pairs, TestSubset::Small).unwrap();
        assert_eq!(small.per_sample.len(), 4);
        assert!(small
            .classes
            .iter()
            .all(|c| matches!(c, LeakClass::Tiny | LeakClass::Small)));
        // Mean equals the mean of the per-sample list.
        let want = general.per_sample.iter().sum::<f64>() / general.per_sample.len() as f64;
        assert_abs_diff_eq!(general.mean_mae, want, epsilon = 1e-15);
        // Permutation invariance: reversed input order, same sorted errors.
        let reversed: Vec<TrainingPair> = pairs.iter().rev().cloned().collect();
        let rev = test_inversion(&mut model, &reversed, TestSubset::General).unwrap();
        let mut a = general.per_sample.clone();
        let mut b = rev.per_sample.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert_abs_diff_eq!(rev.mean_mae, general.mean_mae, epsilon = 1e-15);
        // Empty subset errors out.
        for p in pairs.iter_mut() {
            p.leak_mass = Some(CLASS_BOUNDS[2] * 2.0);
        }
        assert!(test_inversion(&mut model, &pairs, TestSubset::Small).is_err());
    }

    #[test]
    fn general_loss_is_class_weighted_mean() {
        let mut pairs = random_pairs(9, 19);
        for (i, p) in pairs.iter_mut().enumerate() {
            p.leak_mass = Some(if i < 3 {
                CLASS_BOUNDS[0] * 0.5
            } else {
                CLASS_BOUNDS[2] * 2.0
            });
        }
        let hyper = tiny_hyper();
        let (mut model, _) = train_inversion(&pairs, &[], &hyper).unwrap();
        let rep = test_inversion(&mut model, &pairs, TestSubset::General).unwrap();
        // Regroup per class and recompute the weighted mean.
        let mut sums = [0.0f64; 4];
        let mut counts = [0usize; 4];
        for (e, c) in rep.per_sample.iter().zip(rep.classes.iter()) {
            sums[c.index()] += e;
            counts[c.index()] += 1;
        }
        let weighted = sums.iter().sum::<f64>() / counts.iter().sum::<usize>() as f64;
        assert_abs_diff_eq!(rep.mean_mae, weighted, epsilon = 1e-14);
    }

    // -- persistence -------------------------------------------------------------------

    #[test]
    fn checkpoints_round_trip_bit_exactly() {
        let pairs = random_pairs(8, 23);
        let hyper = tiny_hyper();
        let (mut model, ckpt) = train_inversion(&pairs, &[], &hyper).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_inversion(dir.path(), &mut model, &ckpt).unwrap();
        let (mut loaded, ckpt2) = load_inversion(dir.path()).unwrap();
        assert_eq!(ckpt2.tag, AugTag::None);
        assert_eq!(ckpt2.bounds, ckpt.bounds);
        assert_eq!(ckpt2.enc_widths, ckpt.enc_widths);
        assert_eq!(ckpt2.history.len(), ckpt.history.len());
        let pred_a = model.invnet_forward(&pairs[0].gathers).unwrap();
        let pred_b = loaded.invnet_forward(&pairs[0].gathers).unwrap();
        assert_eq!(pred_a, pred_b, "loaded model must reproduce predictions");
        // Output dims match the configured map shape, in physical units.
        assert_eq!(pred_a.dim(), (16, 16));
        assert!(pred_a.iter().all(|&v| (1000.0..4000.0).contains(&v)));
    }

    // -- end-to-end with simulated gathers ------------------------------------------

    #[test]
    fn wavesim_pairs_flow_through_training() {
        let cfg = DatagenConfig {
            rows: 16,
            cols: 16,
            ..DatagenConfig::default()
        };
        let scenarios = generate_dataset(31, 2, &cfg).unwrap();
        // Trim to 3 maps per scenario to keep the solver work tiny.
        let trimmed: Vec<LeakageScenario> = scenarios
            .into_iter()
            .map(|mut s| {
                s.maps.truncate(3);
                s.mass_trajectory.truncate(3);
                s
            })
            .collect();
        let mut sim = SimConfig::surface_acquisition(16, 2);
        sim.nt = 128;
        let dir = tempfile::tempdir().unwrap();
        let n = crate::wavesim::forward_dataset(&trimmed, &sim, dir.path()).unwrap();
        assert_eq!(n, 2 * 3 * 2);
        let pairs = load_pairs(&trimmed, dir.path(), 2).unwrap();
        assert_eq!(pairs.len(), 6);
        assert_eq!(pairs[0].gathers.dim(), (2, 16, 128));
        let hyper = InvHyper {
            epochs: 2,
            batch: 3,
            lr: 1e-3,
            weight_decay: 1e-4,
            enc_widths: vec![4, 8],
            bottleneck: 12,
            dec_widths: vec![8, 4],
            time_downsample: 4,
            seed: 1,
        };
        let (mut model, ckpt) = train_inversion(&pairs, &[], &hyper).unwrap();
        assert_eq!(ckpt.t_in, 32);
        let pred = model.invnet_forward(&pairs[0].gathers).unwrap();
        assert_eq!(pred.dim(), (16, 16));
        // Same input twice → identical output (eval-mode determinism).
        let pred2 = model.invnet_forward(&pairs[0].gathers).unwrap();
        assert_eq!(pred, pred2);
    }

    #[test]
    fn synthetic_pair_production_runs_the_solver() {
        let map = Array2::from_elem((16, 16), 2000.0);
        let samples = vec![SyntheticSample {
            map,
            alpha: 0.7,
            scenario_id: 3,
            year_a: 20,
            year_b: 10,
            pseudo_year: 17.0,
        }];
        let mut sim = SimConfig::surface_acquisition(16, 2);
        sim.nt = 64;
        let pairs = make_synthetic_pairs(&samples, &sim, AugTag::Vae).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].gathers.dim(), (2, 16, 64));
        assert_eq!(pairs[0].leak_mass, None);
        match pairs[0].provenance {
            PairProvenance::Synthetic { tag, alpha } => {
                assert_eq!(tag, AugTag::Vae);
                assert_eq!(alpha, 0.7);
            }
            PairProvenance::Real => panic!("expected synthetic provenance"),
        }
    }
}
