//! Generative augmenters: autoencoder, VAE, VAE with perception loss, and
//! VAE with temporal regularization — plus shared loss functions, training,
//! checkpointing and synthetic-sample generation.
//!
//! The autoencoder is time-conditioned: it consumes the first map, the last
//! map and a constant temporal channel, and reconstructs the map at that
//! time. The VAE family encodes single maps into a 64-dimensional latent
//! space; synthetic samples come from interpolating latent codes of two real
//! maps. Losses follow the reconstruction + KL template, optionally extended
//! with a Gram-matrix perception term (through the fixed feature extractor)
//! or an L1 temporal-difference regularizer on adjacent-year pairs.

use crate::datagen::LeakageScenario;
use crate::featureext::{FeatureExtractor, LayerSelection};
use crate::io::{fmt_f64, Meta};
use crate::nn::{
    normal_draw, zero_grads, Adam, Conv2d, Dense, Flatten, HasParams, Layer, LeakyRelu, Param,
    Scalar, Sequential, Tensor, Unflatten, Upsample2x,
};
use crate::rng::stream;
use crate::{Error, Result};
use ndarray::{Array2, Array4};
use rand::RngExt;
use std::collections::HashMap;
use std::path::Path;

/// Latent dimensionality of the production models.
pub const LATENT_DIM: usize = 64;

/// Years are normalized by this constant for the temporal channel.
pub const YEAR_NORM: f64 = 200.0;

/// Default encoder channel widths (decoder mirrors them).
pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 128];

// ---------------------------------------------------------------------------
// Model kinds and hyper-parameters
// ---------------------------------------------------------------------------

/// Which augmenter a checkpoint holds. `Linear` is the weightless pixel-space
/// interpolation baseline, stored as a header-only checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ae,
    Vae,
    VaePercep,
    VaeReg,
    Linear,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ae => "ae",
            ModelKind::Vae => "vae",
            ModelKind::VaePercep => "vae_percep",
            ModelKind::VaeReg => "vae_reg",
            ModelKind::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ae" => Ok(ModelKind::Ae),
            "vae" => Ok(ModelKind::Vae),
            "vae_percep" | "vae-percep" => Ok(ModelKind::VaePercep),
            "vae_reg" | "vae-reg" => Ok(ModelKind::VaeReg),
            "linear" => Ok(ModelKind::Linear),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }

    /// Channels the encoder stem consumes.
    pub fn input_channels(self) -> usize {
        match self {
            ModelKind::Ae => 3,
            _ => 1,
        }
    }

    pub fn is_vae_family(self) -> bool {
        matches!(self, ModelKind::Vae | ModelKind::VaePercep | ModelKind::VaeReg)
    }
}

/// Generator training hyper-parameters.
#[derive(Debug, Clone)]
pub struct GenHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Temporal-regularization weight (vae_reg only).
    pub gamma: f64,
    /// Perception-loss layer selection (vae_percep only).
    pub layers: LayerSelection,
    pub latent: usize,
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for GenHyper {
    fn default() -> Self {
        GenHyper {
            epochs: 100,
            batch: 32,
            lr: 1e-4,
            gamma: 1e2,
            layers: LayerSelection::D,
            latent: LATENT_DIM,
            widths: DEFAULT_WIDTHS.to_vec(),
            seed: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Dataset-global min/max velocity bounds; maps train in `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub lo: f64,
    pub hi: f64,
}

impl Normalization {
    pub fn fit(scenarios: &[LeakageScenario]) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in scenarios {
            for m in &s.maps {
                for &v in m.grid.iter() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::Data(format!(
                "cannot fit normalization bounds: lo={lo}, hi={hi}"
            )));
        }
        Ok(Normalization { lo, hi })
    }

    pub fn to_unit<S: Scalar>(&self, map: &Array2<f64>) -> Array2<S> {
        let span = self.hi - self.lo;
        map.mapv(|v| S::from_f64((v - self.lo) / span))
    }

    /// Clip to `[0,1]` (generated maps can overshoot) and return to physical
    /// velocity units.
    pub fn from_unit<S: Scalar>(&self, map: &Array2<S>) -> Array2<f64> {
        let span = self.hi - self.lo;
        map.mapv(|v| self.lo + span * v.as_f64().clamp(0.0, 1.0))
    }
}

// ---------------------------------------------------------------------------
// Generator network
// ---------------------------------------------------------------------------

/// Encoder–decoder generator. The encoder is a stack of stride-2
/// convolutions; `mu_head` maps to the latent code (for the plain
/// autoencoder it is *the* code head, for the VAE family `lv_head` adds the
/// log-variance). The decoder mirrors the encoder with nearest-neighbour
/// upsampling and ends in a linear convolution.
pub struct Generator<S: Scalar> {
    pub in_ch: usize,
    pub rows: usize,
    pub cols: usize,
    pub latent: usize,
    pub widths: Vec<usize>,
    enc: Sequential<S>,
    mu_head: Dense<S>,
    lv_head: Option<Dense<S>>,
    dec_fc: Dense<S>,
    dec: Sequential<S>,
    cache: Option<GenCache<S>>,
}

struct GenCache<S: Scalar> {
    lv: Option<Array2<S>>,
    eps: Option<Array2<S>>,
}

/// Everything a forward pass produces.
pub struct GenForward<S: Scalar> {
    /// Reconstruction `[batch, 1, rows, cols]` in normalized units.
    pub recon: Array4<S>,
    pub mu: Array2<S>,
    pub lv: Option<Array2<S>>,
    pub z: Array2<S>,
}

impl<S: Scalar> Generator<S> {
    pub fn new(
        in_ch: usize,
        rows: usize,
        cols: usize,
        widths: &[usize],
        latent: usize,
        variational: bool,
        rng: &mut rand_chacha::ChaCha12Rng,
    ) -> Result<Self> {
        let n = widths.len();
        if n == 0 {
            return Err(Error::Config("generator needs at least one block".into()));
        }
        let factor = 1usize << n;
        if rows % factor != 0 || cols % factor != 0 {
            return Err(Error::Config(format!(
                "{rows}×{cols} maps are not divisible by the {n}-block downsampling factor {factor}"
            )));
        }
        let (hb, wb) = (rows / factor, cols / factor);
        let mut enc_layers: Vec<Box<dyn Layer<S>>> = Vec::new();
        let mut c = in_ch;
        for &wd in widths {
            enc_layers.push(Box::new(Conv2d::new(c, wd, 3, 2, 1, rng)));
            enc_layers.push(Box::new(LeakyRelu::new(0.2)));
            c = wd;
        }
        enc_layers.push(Box::new(Flatten::new()));
        let enc = Sequential::new(enc_layers);
        let bottleneck = c * hb * wb;
        let mu_head = Dense::new(bottleneck, latent, rng);
        let lv_head = if variational {
            Some(Dense::new(bottleneck, latent, rng))
        } else {
            None
        };
        let dec_fc = Dense::new(latent, bottleneck, rng);
        let rev: Vec<usize> = widths.iter().rev().cloned().collect();
        let mut dec_layers: Vec<Box<dyn Layer<S>>> = vec![
            Box::new(LeakyRelu::new(0.2)),
            Box::new(Unflatten::new(rev[0], hb, wb)),
        ];
        let mut cur = rev[0];
        for i in 0..n {
            let next = rev[(i + 1).min(n - 1)];
            dec_layers.push(Box::new(Upsample2x));
            dec_layers.push(Box::new(Conv2d::new(cur, next, 3, 1, 1, rng)));
            dec_layers.push(Box::new(LeakyRelu::new(0.2)));
            cur = next;
        }
        dec_layers.push(Box::new(Conv2d::new(cur, 1, 3, 1, 1, rng))); // linear output
        let dec = Sequential::new(dec_layers);
        Ok(Generator {
            in_ch,
            rows,
            cols,
            latent,
            widths: widths.to_vec(),

            enc,
            mu_head,
            lv_head,
            dec_fc,
            dec,
            cache: None,
        })
    }

    fn check_input(&self, x: &Array4<S>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.in_ch || h != self.rows || w != self.cols {
            return Err(Error::Shape(format!(
                "generator expects [*, {}, {}, {}] inputs, got [*, {c}, {h}, {w}]",
                self.in_ch, self.rows, self.cols
            )));
        }
        Ok(())
    }

    /// Encode to `(mu, log_var)` without touching the decoder.
    pub fn encode(&mut self, x: &Array4<S>, train: bool) -> Result<(Array2<S>, Option<Array2<S>>)> {
        self.check_input(x)?;
        let h = self.enc.forward(Tensor::D4(x.clone()), train).d2();
        let mu = self.mu_head.forward(Tensor::D2(h.clone()), train).d2();
        let lv = self
            .lv_head
            .as_mut()
            .map(|head| head.forward(Tensor::D2(h), train).d2());
        Ok((mu, lv))
    }

    /// Decode a batch of latent codes.
    pub fn decode(&mut self, z: &Array2<S>, train: bool) -> Array4<S> {
        let h = self.dec_fc.forward(Tensor::D2(z.clone()), train);
        self.dec.forward(h, train).d4()
    }

    /// Full forward pass. For variational models `eps` supplies the
    /// reparameterization noise; `None` means deterministic encoding z = μ.
    pub fn forward(
        &mut self,
        x: &Array4<S>,
        eps: Option<&Array2<S>>,
        train: bool,
    ) -> Result<GenForward<S>> {
        let (mu, lv) = self.encode(x, train)?;
        let z = match (&lv, eps) {
            (Some(lv), Some(eps)) => reparameterize(&mu, lv, eps),
            _ => mu.clone(),
        };
        let recon = self.decode(&z, train);
        if train {
            self.cache = Some(GenCache {
                lv: lv.clone(),
                eps: eps.cloned(),
            });
        }
        Ok(GenForward { recon, mu, lv, z })
    }

    /// Backward pass. `d_recon` is the loss gradient w.r.t. the normalized
    /// reconstruction; `d_mu_extra`/`d_lv_extra` carry terms that bypass the
    /// decoder (the KL divergence contributions).
    pub fn backward(
        &mut self,
        d_recon: &Array4<S>,
        d_mu_extra: Option<&Array2<S>>,
        d_lv_extra: Option<&Array2<S>>,
    ) {
        let cache = self.cache.take().expect("backward without forward");
        let dh = self.dec.backward(Tensor::D4(d_recon.clone()));
        let dz = self.dec_fc.backward(dh).d2();
        let (dmu, dlv) = match (&cache.lv, &cache.eps) {
            (Some(lv), Some(eps)) => {
                // z = μ + exp(lv/2)⊙ε → ∂z/∂μ = 1, ∂z/∂lv = ε·exp(lv/2)/2.
                let half = S::from_f64(0.5);
                let mut dlv = dz.clone();
                ndarray::Zip::from(&mut dlv)
                    .and(lv)
                    .and(eps)
                    .for_each(|d, &l, &e| {
                        *d = *d * e * (l * half).exp() * half;
                    });
                (dz, Some(dlv))
            }
            _ => (dz, None),
        };
        let mut dmu = dmu;
        if let Some(extra) = d_mu_extra {
            dmu += extra;
        }
        let mut denc = self.mu_head.backward(Tensor::D2(dmu)).d2();
        if let Some(head) = self.lv_head.as_mut() {
            let mut dlv = dlv.unwrap_or_else(|| Array2::zeros((denc.nrows(), self.latent)));
            if let Some(extra) = d_lv_extra {
                dlv += extra;
            }
            denc += &head.backward(Tensor::D2(dlv)).d2();
        }
        self.enc.backward(Tensor::D2(denc));
    }
}

impl<S: Scalar> HasParams<S> for Generator<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<S>)) {
        self.enc.visit_params(&format!("{prefix}enc."), f);
        self.mu_head.visit_params(&format!("{prefix}mu."), f);
        if let Some(head) = self.lv_head.as_mut() {
            head.visit_params(&format!("{prefix}lv."), f);
        }
        self.dec_fc.visit_params(&format!("{prefix}dfc."), f);
        self.dec.visit_params(&format!("{prefix}dec."), f);
    }
}

// ---------------------------------------------------------------------------
// Loss functions
// ---------------------------------------------------------------------------

/// Constant temporal channel: every entry is `t / 200` (years normalized).
pub fn temporal_channel(t: f64, rows: usize, cols: usize) -> Result<Array2<f64>> {
    if !(10.0..=200.0).contains(&t) {
        return Err(Error::Data(format!(
            "temporal channel year {t} outside [10, 200]"
        )));
    }
    Ok(Array2::from_elem((rows, cols), t / YEAR_NORM))
}

/// Autoencoder reconstruction loss: global mean squared error over the batch
/// (minibatch form of the dataset-mean criterion).
pub fn ae_loss<S: Scalar>(pred: &Array4<S>, target: &Array4<S>) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(&a, &b)| {
            let d = (a - b).as_f64();
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Reparameterization: `z = μ + exp(log_var / 2) ⊙ ε`, batched row-wise.
pub fn reparameterize<S: Scalar>(mu: &Array2<S>, lv: &Array2<S>, eps: &Array2<S>) -> Array2<S> {
    let half = S::from_f64(0.5);
    let mut z = mu.clone();
    ndarray::Zip::from(&mut z).and(lv).and(eps).for_each(|zi, &l, &e| {
        *zi = *zi + (l * half).exp() * e;
    });
    z
}

/// Closed-form KL divergence to the standard normal, summed over latent
/// dimensions and batch rows: `0.5·Σ(μ² + exp(lv) − 1 − lv)`.
pub fn kld<S: Scalar>(mu: &Array2<S>, lv: &Array2<S>) -> f64 {
    mu.iter()
        .zip(lv.iter())
        .map(|(&m, &l)| {
            let (m, l) = (m.as_f64(), l.as_f64());
            m * m + l.exp() - 1.0 - l
        })
        .sum::<f64>()
        * 0.5
}

/// VAE loss components. Reconstruction is the summed squared error (matching
/// the Σ notation of the loss definition), KLD is summed over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLossParts {
    pub total: f64,
    pub recon: f64,
    pub kld: f64,
}

pub fn vae_loss<S: Scalar>(
    pred: &Array4<S>,
    target: &Array4<S>,
    mu: &Array2<S>,
    lv: &Array2<S>,
) -> Result<VaeLossParts> {
    if pred.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let recon = pred
        .iter()
        .zip(target.iter())
        .map(|(&a, &b)| {
            let d = (a - b).as_f64();
            d * d
        })
        .sum::<f64>();
    let k = kld(mu, lv);
    Ok(VaeLossParts {
        total: recon + k,
        recon,
        kld: k,
    })
}

/// Gram matrix of a vectorized feature map `F: [channels, positions]`.
pub fn perception_gram<S: Scalar>(f: &Array2<S>) -> Array2<S> {
    f.dot(&f.t())
}

/// Per-layer perception weight λ_l = 1 / (4·N²·M²).
pub fn lambda_l(n_channels: usize, n_positions: usize) -> f64 {
    let n = n_channels as f64;
    let m = n_positions as f64;
    1.0 / (4.0 * n * n * m * m)
}

/// Perception loss between two batches of maps: weighted squared Gram
/// discrepancy over the selected extractor layers, summed over the batch.
pub fn perception_loss<S: Scalar>(
    x: &[Array2<S>],
    xhat: &[Array2<S>],
    extractor: &mut FeatureExtractor<S>,
    sel: LayerSelection,
) -> Result<f64> {
    if x.len() != xhat.len() || x.is_empty() {
        return Err(Error::Data(format!(
            "perception loss needs equal non-empty batches, got {} vs {}",
            x.len(),
            xhat.len()
        )));
    }
    if x[0].dim() != xhat[0].dim() {
        return Err(Error::Shape(format!(
            "map {:?} vs reconstruction {:?}",
            x[0].dim(),
            xhat[0].dim()
        )));
    }
    let xb = FeatureExtractor::replicate_channels(x);
    let hb = FeatureExtractor::replicate_channels(xhat);
    let (loss, _) = percep_loss_and_grad(extractor, &xb, hb, sel, false)?;
    Ok(loss)
}

/// Shared forward (and optionally backward) path of the perception loss.
/// Returns the scalar loss and, when `with_grad`, the gradient w.r.t. the
/// reconstruction batch `[b, 3, h, w]`.
fn percep_loss_and_grad<S: Scalar>(
    extractor: &mut FeatureExtractor<S>,
    x3: &Array4<S>,
    xhat3: Array4<S>,
    sel: LayerSelection,
    with_grad: bool,
) -> Result<(f64, Option<Array4<S>>)> {
    let taps_x = extractor.forward_taps(x3.clone(), sel, false)?;
    let taps_h = extractor.forward_taps(xhat3, sel, with_grad)?;
    let batch = x3.dim().0;
    let mut loss = 0.0f64;
    let mut tap_grads: Vec<Array4<S>> = Vec::with_capacity(taps_h.len());
    for (tx, th) in taps_x.iter().zip(taps_h.iter()) {
        let (b, n, hh, ww) = th.dim();
        debug_assert_eq!(b, batch);
        let m = hh * ww;
        let lam = lambda_l(n, m);
        let mut dtap = Array4::<S>::zeros(th.raw_dim());
        for bi in 0..b {
            let fx = tx
                .index_axis(ndarray::Axis(0), bi)
                .to_owned()
                .into_shape_with_order((n, m))
                .unwrap();
            let fh = th
                .index_axis(ndarray::Axis(0), bi)
                .to_owned()
                .into_shape_with_order((n, m))
                .unwrap();
            let g = perception_gram(&fx);
            let a = perception_gram(&fh);
            let d = &a - &g;
            loss += lam
                * d.iter()
                    .map(|&v| {
                        let v = v.as_f64();
                        v * v
                    })
                    .sum::<f64>();
            if with_grad {
                // d/dF̂ of λ·Σ(A−G)² with A = F̂F̂ᵀ: 4λ·(A−G)·F̂.
                let scale = S::from_f64(4.0 * lam);
                let df = d.dot(&fh) * scale;
                dtap.index_axis_mut(ndarray::Axis(0), bi)
                    .assign(&df.into_shape_with_order((n, hh, ww)).unwrap());
            }
        }
        tap_grads.push(dtap);
    }
    let grad = if with_grad {
        Some(extractor.backward_taps(tap_grads))
    } else {
        None
    };
    Ok((loss, grad))
}

/// Composite VAE + perception loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaePercepLossParts {
    pub total: f64,
    pub recon: f64,
    pub kld: f64,
    pub percep: f64,
}

pub fn vae_percep_loss<S: Scalar>(
    pred: &Array4<S>,
    target: &Array4<S>,
    mu: &Array2<S>,
    lv: &Array2<S>,
    extractor: &mut FeatureExtractor<S>,
    sel: LayerSelection,
) -> Result<VaePercepLossParts> {
    let base = vae_loss(pred, target, mu, lv)?;
    let to_maps = |t: &Array4<S>| -> Vec<Array2<S>> {
        (0..t.dim().0)
            .map(|i| {
                t.index_axis(ndarray::Axis(0), i)
                    .index_axis(ndarray::Axis(0), 0)
                    .to_owned()
            })
            .collect()
    };
    let percep = perception_loss(&to_maps(target), &to_maps(pred), extractor, sel)?;
    Ok(VaePercepLossParts {
        total: base.total + percep,
        recon: base.recon,
        kld: base.kld,
        percep,
    })
}

/// Temporal-difference regularizer: L1 norm of the mismatch between true and
/// reconstructed consecutive-year differences, summed over pixels. Years must
/// be adjacent with `year1 > year2`.
pub fn temporal_reg<S: Scalar>(
    x1: &Array2<S>,
    x2: &Array2<S>,
    xh1: &Array2<S>,
    xh2: &Array2<S>,
    year1: u32,
    year2: u32,
) -> Result<f64> {
    if year1 <= year2 || year1 - year2 != 10 {
        return Err(Error::Data(format!(
            "temporal regularization needs adjacent years with t1 > t2, got {year1} and {year2}"
        )));
    }
    if x1.dim() != x2.dim() || x1.dim() != xh1.dim() || x1.dim() != xh2.dim() {
        return Err(Error::Shape("temporal_reg map dimension mismatch".into()));
    }
    let mut acc = 0.0f64;
    for (((&a1, &a2), &b1), &b2) in x1.iter().zip(x2.iter()).zip(xh1.iter()).zip(xh2.iter()) {
        let true_d = (a1 - a2).as_f64();
        let hat_d = (b1 - b2).as_f64();
        acc += (true_d - hat_d).abs();
    }
    Ok(acc)
}

/// Composite VAE + temporal-regularization loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeRegLossParts {
    pub total: f64,
    pub recon: f64,
    pub kld: f64,
    pub reg: f64,
}

/// `pred1/target1` hold the later year (t1), `pred2/target2` the earlier.
#[allow(clippy::too_many_arguments)]
pub fn vae_reg_loss<S: Scalar>(
    pred1: &Array4<S>,
    pred2: &Array4<S>,
    target1: &Array4<S>,
    target2: &Array4<S>,
    mu: &Array2<S>,
    lv: &Array2<S>,
    gamma: f64,
) -> Result<VaeRegLossParts> {
    if gamma < 0.0 {
        return Err(Error::Config(format!(
            "regularization weight must be non-negative, got {gamma}"
        )));
    }
    let b = pred1.dim().0;
    let recon = [(pred1, target1), (pred2, target2)]
        .iter()
        .map(|(p, t)| {
            p.iter()
                .zip(t.iter())
                .map(|(&a, &b)| {
                    let d = (a - b).as_f64();
                    d * d
                })
                .sum::<f64>()
        })
        .sum::<f64>();
    let k = kld(mu, lv);
    let mut reg = 0.0f64;
    for bi in 0..b {
        for i in 0..pred1.dim().2 {
            for j in 0..pred1.dim().3 {
                let true_d = (target1[[bi, 0, i, j]] - target2[[bi, 0, i, j]]).as_f64();
                let hat_d = (pred1[[bi, 0, i, j]] - pred2[[bi, 0, i, j]]).as_f64();
                reg += (true_d - hat_d).abs();
            }
        }
    }
    Ok(VaeRegLossParts {
        total: recon + k + gamma * reg,
        recon,
        kld: k,
        reg,
    })
}

/// Pixel-space linear interpolation baseline: `α·x_a + (1−α)·x_b`.
pub fn linear_interp_baseline<S: Scalar>(
    x_a: &Array2<S>,
    x_b: &Array2<S>,
    alpha: f64,
) -> Result<Array2<S>> {
    if x_a.dim() != x_b.dim() {
        return Err(Error::Shape(format!(
            "linear interpolation dims {:?} vs {:?}",
            x_a.dim(),
            x_b.dim()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha == 1.0 {
        return Ok(x_a.clone());
    }
    if alpha == 0.0 {
        return Ok(x_b.clone());
    }
    let a = S::from_f64(alpha);
    let b = S::from_f64(1.0 - alpha);
    Ok(x_a * a + &(x_b * b))
}

// ---------------------------------------------------------------------------
// Latent interpolation
// ---------------------------------------------------------------------------

/// A synthetic velocity map with its interpolation provenance.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    /// Physical-unit velocity map.
    pub map: Array2<f64>,
    pub alpha: f64,
    pub scenario_id: u64,
    pub year_a: u32,
    pub year_b: u32,
    /// α·year_a + (1−α)·year_b — the derived time label.
    pub pseudo_year: f64,
}

/// Deterministic encode/decode pair used for latent interpolation: encoding
/// is z = μ (no sampling) so interpolation endpoints are reproducible.
pub trait LatentCodec {
    fn encode_det(&mut self, map: &Array2<f64>) -> Vec<f64>;
    fn decode_det(&mut self, code: &[f64]) -> Array2<f64>;
}

/// Latent-space interpolation: `decode(α·encode(x_a) + (1−α)·encode(x_b))`.
/// α ∈ {0, 1} short-circuits to the pure code so endpoints reproduce
/// `decode(encode(·))` bit-exactly.
#[allow(clippy::too_many_arguments)]
pub fn latent_interpolate<C: LatentCodec>(
    codec: &mut C,
    x_a: &Array2<f64>,
    x_b: &Array2<f64>,
    year_a: u32,
    year_b: u32,
    scenario_id: u64,
    alpha: f64,
) -> Result<SyntheticSample> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let z = if alpha == 1.0 {
        codec.encode_det(x_a)
    } else if alpha == 0.0 {
        codec.encode_det(x_b)
    } else {
        let za = codec.encode_det(x_a);
        let zb = codec.encode_det(x_b);
        za.iter()
            .zip(zb.iter())
            .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
            .collect()
    };
    let map = codec.decode_det(&z);
    Ok(SyntheticSample {
        map,
        alpha,
        scenario_id,
        year_a,
        year_b,
        pseudo_year: alpha * year_a as f64 + (1.0 - alpha) * year_b as f64,
    })
}

// ---------------------------------------------------------------------------
// Trained generator wrapper and checkpoints
// ---------------------------------------------------------------------------

/// One row of the loss history CSV.
#[derive(Debug, Clone, Copy)]
pub struct LossRow {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub kld: f64,
    pub percep: f64,
    pub reg: f64,
}

/// Checkpoint metadata (weights live next to it in the checkpoint dir).
#[derive(Debug, Clone)]
pub struct GeneratorCheckpoint {
    pub kind: ModelKind,
    pub rows: usize,
    pub cols: usize,
    pub latent: usize,
    pub widths: Vec<usize>,
    pub bounds: (f64, f64),
    pub epochs_trained: usize,
    pub history: Vec<LossRow>,
    /// Training-config echo (data dir, hyper-parameters, seed), persisted so
    /// downstream commands can locate the training data without re-stating it.
    pub echo: Vec<(String, String)>,
}

/// A generator ready for inference: network (absent for the linear baseline)
/// plus its normalization bounds.
pub struct TrainedGenerator {
    pub kind: ModelKind,
    pub net: Option<Generator<f32>>,
    pub norm: Normalization,
    pub rows: usize,
    pub cols: usize,
}

impl TrainedGenerator {
    /// Autoencoder inference at an arbitrary time: consumes the year-10 and
    /// year-200 maps plus the temporal channel, emits the map at `t`.
    pub fn ae_forward(
        &mut self,
        x10: &Array2<f64>,
        x200: &Array2<f64>,
        t: f64,
    ) -> Result<Array2<f64>> {
        if self.kind != ModelKind::Ae {
            return Err(Error::Config(format!(
                "time-conditioned forward needs an ae checkpoint, found {}",
                self.kind.as_str()
            )));
        }
        if x10.dim() != x200.dim() {
            return Err(Error::Shape(format!(
                "endpoint maps {:?} vs {:?}",
                x10.dim(),
                x200.dim()
            )));
        }
        let tch = temporal_channel(t, self.rows, self.cols)?;
        let net = self.net.as_mut().expect("ae checkpoint carries weights");
        let (h, w) = (self.rows, self.cols);
        let mut x = Array4::<f32>::zeros((1, 3, h, w));
        x.slice_mut(ndarray::s![0, 0, .., ..])
            .assign(&self.norm.to_unit::<f32>(x10));
        x.slice_mut(ndarray::s![0, 1, .., ..])
            .assign(&self.norm.to_unit::<f32>(x200));
        x.slice_mut(ndarray::s![0, 2, .., ..])
            .assign(&tch.mapv(|v| v as f32));
        let out = net.forward(&x, None, false)?;
        let map = out
            .recon
            .index_axis(ndarray::Axis(0), 0)
            .index_axis(ndarray::Axis(0), 0)
            .to_owned();
        Ok(self.norm.from_unit(&map))
    }

    /// Deterministic reconstruction of a single map (VAE family: z = μ).
    pub fn reconstruct(&mut self, map: &Array2<f64>) -> Result<Array2<f64>> {
        if !self.kind.is_vae_family() {
            return Err(Error::Config(format!(
                "reconstruction needs a VAE-family checkpoint, found {}",
                self.kind.as_str()
            )));
        }
        let z = self.encode_det(map);
        Ok(self.decode_det(&z))
    }
}

impl LatentCodec for TrainedGenerator {
    fn encode_det(&mut self, map: &Array2<f64>) -> Vec<f64> {
        let net = self.net.as_mut().expect("latent codec needs weights");
        let unit = self.norm.to_unit::<f32>(map);
        let mut x = Array4::<f32>::zeros((1, 1, unit.nrows(), unit.ncols()));
        x.slice_mut(ndarray::s![0, 0, .., ..]).assign(&unit);
        let (mu, _) = net.encode(&x, false).expect("encode dims already checked");
        mu.row(0).iter().map(|&v| v as f64).collect()
    }

    fn decode_det(&mut self, code: &[f64]) -> Array2<f64> {
        let net = self.net.as_mut().expect("latent codec needs weights");
        let mut z = Array2::<f32>::zeros((1, code.len()));
        for (i, &v) in code.iter().enumerate() {
            z[[0, i]] = v as f32;
        }
        let y = net.decode(&z, false);
        let map = y
            .index_axis(ndarray::Axis(0), 0)
            .index_axis(ndarray::Axis(0), 0)
            .to_owned();
        self.norm.from_unit(&map)
    }
}

/// Persist a checkpoint directory: `header.meta`, `weights.w32` (unless
/// linear) and `loss_history.csv`.
pub fn save_generator(
    dir: &Path,
    gen: &mut TrainedGenerator,
    ckpt: &GeneratorCheckpoint,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut meta = Meta::new();
    meta.push("format", "generator-checkpoint 1");
    meta.push("model_kind", ckpt.kind.as_str());
    meta.push("rows", ckpt.rows);
    meta.push("cols", ckpt.cols);
    meta.push("latent", ckpt.latent);
    meta.push_usize_list("widths", &ckpt.widths);
    meta.push_f64("bound_lo", ckpt.bounds.0);
    meta.push_f64("bound_hi", ckpt.bounds.1);
    meta.push("epochs_trained", ckpt.epochs_trained);
    for (k, v) in &ckpt.echo {
        meta.push(&format!("cfg.{k}"), v);
    }
    meta.save(&dir.join("header.meta"))?;
    if let Some(net) = gen.net.as_mut() {
        let tensors = crate::nn::export_params(net);
        crate::io::save_weights(&dir.join("weights.w32"), &tensors)?;
    }
    let mut rows = Vec::with_capacity(ckpt.history.len());
    for r in &ckpt.history {
        rows.push(vec![
            r.epoch.to_string(),
            fmt_f64(r.total),
            fmt_f64(r.recon),
            fmt_f64(r.kld),
            fmt_f64(r.percep),
            fmt_f64(r.reg),
        ]);
    }
    crate::io::write_csv(
        &dir.join("loss_history.csv"),
        "epoch,total,recon,kld,percep,reg",
        &rows,
    )
}

/// Load a checkpoint directory produced by [`save_generator`].
pub fn load_generator(dir: &Path) -> Result<(TrainedGenerator, GeneratorCheckpoint)> {
    let hp = dir.join("header.meta");
    let meta = Meta::load(&hp)?;
    let kind = ModelKind::parse(&meta.get_str("model_kind", &hp)?)?;
    let rows = meta.get_usize("rows", &hp)?;
    let cols = meta.get_usize("cols", &hp)?;
    let latent = meta.get_usize("latent", &hp)?;
    let widths = meta.get_usize_list("widths", &hp)?;
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
    let net = if kind == ModelKind::Linear {
        None
    } else {
        let mut rng = stream(0, "gen-load", 0);
        let mut net = Generator::<f32>::new(
            kind.input_channels(),
            rows,
            cols,
            &widths,
            latent,
            kind.is_vae_family(),
            &mut rng,
        )?;
        let store = crate::io::WeightStore::load(&dir.join("weights.w32"))?;
        crate::nn::import_params(&mut net, &store)?;
        Some(net)
    };
    let history = load_history(&dir.join("loss_history.csv"))?;
    let ckpt = GeneratorCheckpoint {
        kind,
        rows,
        cols,
        latent,
        widths,
        bounds,
        epochs_trained,
        history,
        echo,
    };
    Ok((
        TrainedGenerator {
            kind,
            net,
            norm: Normalization {
                lo: bounds.0,
                hi: bounds.1,
            },
            rows,
            cols,
        },
        ckpt,
    ))
}

fn load_history(path: &Path) -> Result<Vec<LossRow>> {
    let (_, rows) = crate::io::read_csv(path)?;
    rows.iter()
        .map(|r| {
            let field = |i: usize| -> Result<f64> {
                r.get(i)
                    .ok_or_else(|| Error::Format {
                        path: path.to_path_buf(),
                        detail: "short loss-history row".into(),
                    })?
                    .parse::<f64>()
                    .map_err(|e| Error::Format {
                        path: path.to_path_buf(),
                        detail: format!("bad loss value: {e}"),
                    })
            };
            Ok(LossRow {
                epoch: field(0)? as usize,
                total: field(1)?,
                recon: field(2)?,
                kld: field(3)?,
                percep: field(4)?,
                reg: field(5)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// A training batch, shaped per model kind. The loss functions check they
/// received the right variant, so wiring mistakes surface as errors instead
/// of silent shape coercions.
pub enum TrainBatch<S: Scalar> {
    /// AE: 3-channel input (map@10, map@200, temporal channel) + target map.
    Triples { x: Array4<S>, target: Array4<S> },
    /// VAE / VAE-percep: single maps.
    Singles { x: Array4<S> },
    /// VAE-reg: adjacent pairs, `x1` the later year, `x2` the earlier.
    Pairs { x1: Array4<S>, x2: Array4<S> },
}

impl<S: Scalar> TrainBatch<S> {
    fn kind_name(&self) -> &'static str {
        match self {
            TrainBatch::Triples { .. } => "triples",
            TrainBatch::Singles { .. } => "singles",
            TrainBatch::Pairs { .. } => "pairs",
        }
    }
}

/// Expected batch variant per model kind; mismatches are contract errors.
pub fn check_batch_kind<S: Scalar>(kind: ModelKind, batch: &TrainBatch<S>) -> Result<()> {
    let ok = matches!(
        (kind, batch),
        (ModelKind::Ae, TrainBatch::Triples { .. })
            | (ModelKind::Vae, TrainBatch::Singles { .. })
            | (ModelKind::VaePercep, TrainBatch::Singles { .. })
            | (ModelKind::VaeReg, TrainBatch::Pairs { .. })
    );
    if ok {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "model {} cannot train on {} batches",
            kind.as_str(),
            batch.kind_name()
        )))
    }
}

/// Train a generative model on a scenario set. Deterministic in
/// `hyper.seed`. The extractor is only consulted for `vae_percep`.
pub fn train_generative(
    kind: ModelKind,
    scenarios: &[LeakageScenario],
    hyper: &GenHyper,
    extractor: Option<&mut FeatureExtractor<f32>>,
    data_dir_echo: Option<&str>,
) -> Result<(TrainedGenerator, GeneratorCheckpoint)> {
    if kind == ModelKind::Linear {
        return Err(Error::Config(
            "the linear baseline has no trainable weights; write its checkpoint directly".into(),
        ));
    }
    if scenarios.is_empty() {
        return Err(Error::Data("no training scenarios".into()));
    }
    if kind == ModelKind::VaePercep && extractor.is_none() {
        return Err(Error::Config(
            "vae_percep training requires the feature extractor".into(),
        ));
    }
    let norm = Normalization::fit(scenarios)?;
    let rows = scenarios[0].maps[0].grid.nrows();
    let cols = scenarios[0].maps[0].grid.ncols();
    let n_years = scenarios[0].maps.len();

    // Pre-normalize every map once; memory is small at desk scale.
    let unit_maps: Vec<Vec<Array2<f32>>> = scenarios
        .iter()
        .map(|s| s.maps.iter().map(|m| norm.to_unit::<f32>(&m.grid)).collect())
        .collect();
    let years: Vec<u32> = scenarios[0].maps.iter().map(|m| m.year).collect();
    let tchans: Vec<Array2<f32>> = years
        .iter()
        .map(|&y| {
            temporal_channel(y as f64, rows, cols)
                .expect("dataset years are in range")
                .mapv(|v| v as f32)
        })
        .collect();

    let mut rng_init = stream(hyper.seed, "gen-init", 0);
    let mut net = Generator::<f32>::new(
        kind.input_channels(),
        rows,
        cols,
        &hyper.widths,
        hyper.latent,
        kind.is_vae_family(),
        &mut rng_init,
    )?;
    let mut opt = Adam::new(hyper.lr, 0.0);
    let mut extractor = extractor;

    // Sample index space depends on the batch shape.
    let samples: Vec<(usize, usize)> = match kind {
        ModelKind::VaeReg => (0..scenarios.len())
            .flat_map(|s| (0..n_years - 1).map(move |k| (s, k)))
            .collect(),
        _ => (0..scenarios.len())
            .flat_map(|s| (0..n_years).map(move |k| (s, k)))
            .collect(),
    };

    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng = stream(hyper.seed, "gen-shuffle", epoch as u64);
        // Fisher–Yates with the seeded stream.
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut eps_rng = stream(hyper.seed, "gen-eps", epoch as u64);
        let mut sums = [0.0f64; 5]; // total, recon, kld, percep, reg
        let mut n_batches = 0usize;
        for chunk in order.chunks(hyper.batch) {
            let idx: Vec<(usize, usize)> = chunk.iter().map(|&i| samples[i]).collect();
            let batch = assemble_batch(kind, &idx, &unit_maps, &tchans, rows, cols);
            let parts = train_step(
                &mut net,
                &mut opt,
                kind,
                &batch,
                hyper,
                &mut eps_rng,
                extractor.as_deref_mut(),
            )?;
            if !parts[0].is_finite() {
                return Err(Error::Divergence { epoch });
            }
            for (s, p) in sums.iter_mut().zip(parts.iter()) {
                *s += p;
            }
            n_batches += 1;
        }
        let inv = 1.0 / n_batches.max(1) as f64;
        history.push(LossRow {
            epoch: epoch + 1,
            total: sums[0] * inv,
            recon: sums[1] * inv,
            kld: sums[2] * inv,
            percep: sums[3] * inv,
            reg: sums[4] * inv,
        });
    }

    let mut echo: Vec<(String, String)> = vec![
        ("model".into(), kind.as_str().into()),
        ("epochs".into(), hyper.epochs.to_string()),
        ("batch".into(), hyper.batch.to_string()),
        ("lr".into(), fmt_f64(hyper.lr)),
        ("gamma".into(), fmt_f64(hyper.gamma)),
        ("layers".into(), hyper.layers.name().into()),
        ("seed".into(), hyper.seed.to_string()),
    ];
    if let Some(d) = data_dir_echo {
        echo.push(("data_dir".into(), d.to_string()));
    }
    let ckpt = GeneratorCheckpoint {
        kind,
        rows,
        cols,
        latent: hyper.latent,
        widths: hyper.widths.clone(),
        bounds: (norm.lo, norm.hi),
        epochs_trained: hyper.epochs,
        history,
        echo,
    };
    Ok((
        TrainedGenerator {
            kind,
            net: Some(net),
            norm,
            rows,
            cols,
        },
        ckpt,
    ))
}

fn assemble_batch(
    kind: ModelKind,
    idx: &[(usize, usize)],
    unit_maps: &[Vec<Array2<f32>>],
    tchans: &[Array2<f32>],
    rows: usize,
    cols: usize,
) -> TrainBatch<f32> {
    let b = idx.len();
    match kind {
        ModelKind::Ae => {
            let mut x = Array4::<f32>::zeros((b, 3, rows, cols));
            let mut target = Array4::<f32>::zeros((b, 1, rows, cols));
            let last = tchans.len() - 1;
            for (bi, &(s, k)) in idx.iter().enumerate() {
                x.slice_mut(ndarray::s![bi, 0, .., ..])
                    .assign(&unit_maps[s][0]);
                x.slice_mut(ndarray::s![bi, 1, .., ..])
                    .assign(&unit_maps[s][last]);
                x.slice_mut(ndarray::s![bi, 2, .., ..]).assign(&tchans[k]);
                target
                    .slice_mut(ndarray::s![bi, 0, .., ..])
                    .assign(&unit_maps[s][k]);
            }
            TrainBatch::Triples { x, target }
        }
        ModelKind::VaeReg => {
            let mut x1 = Array4::<f32>::zeros((b, 1, rows, cols));
            let mut x2 = Array4::<f32>::zeros((b, 1, rows, cols));
            for (bi, &(s, k)) in idx.iter().enumerate() {
                // k indexes the pair (year k+1, year k): x1 is the later year.
                x1.slice_mut(ndarray::s![bi, 0, .., ..])
                    .assign(&unit_maps[s][k + 1]);
                x2.slice_mut(ndarray::s![bi, 0, .., ..])
                    .assign(&unit_maps[s][k]);
            }
            TrainBatch::Pairs { x1, x2 }
        }
        _ => {
            let mut x = Array4::<f32>::zeros((b, 1, rows, cols));
            for (bi, &(s, k)) in idx.iter().enumerate() {
                x.slice_mut(ndarray::s![bi, 0, .., ..])
                    .assign(&unit_maps[s][k]);
            }
            TrainBatch::Singles { x }
        }
    }
}

fn sample_eps(rng: &mut rand_chacha::ChaCha12Rng, b: usize, latent: usize) -> Array2<f32> {
    let mut eps = Array2::<f32>::zeros((b, latent));
    for v in eps.iter_mut() {
        *v = normal_draw(rng) as f32;
    }
    eps
}

/// One optimizer step; returns (total, recon, kld, percep, reg) for the batch.
fn train_step(
    net: &mut Generator<f32>,
    opt: &mut Adam,
    kind: ModelKind,
    batch: &TrainBatch<f32>,
    hyper: &GenHyper,
    eps_rng: &mut rand_chacha::ChaCha12Rng,
    extractor: Option<&mut FeatureExtractor<f32>>,
) -> Result<[f64; 5]> {
    let eps = match batch {
        TrainBatch::Triples { .. } => None,
        TrainBatch::Singles { x } => Some(sample_eps(eps_rng, x.dim().0, net.latent)),
        TrainBatch::Pairs { x1, .. } => Some(sample_eps(eps_rng, 2 * x1.dim().0, net.latent)),
    };
    zero_grads(net);
    let parts = loss_and_grads(
        net,
        kind,
        batch,
        hyper.gamma,
        hyper.layers,
        eps.as_ref(),
        extractor,
    )?;
    opt.step(net);
    Ok(parts)
}

/// Compute the batch loss components and accumulate parameter gradients
/// (no optimizer step). Generic so gradient checks can drive the exact
/// production backward path in f64. Gradients are *added* to whatever the
/// parameters already hold; call [`zero_grads`] first for a fresh pass.
pub fn loss_and_grads<S: Scalar>(
    net: &mut Generator<S>,
    kind: ModelKind,
    batch: &TrainBatch<S>,
    gamma: f64,
    layers: LayerSelection,
    eps: Option<&Array2<S>>,
    mut extractor: Option<&mut FeatureExtractor<S>>,
) -> Result<[f64; 5]> {
    check_batch_kind(kind, batch)?;
    let two = S::from_f64(2.0);
    let half = S::from_f64(0.5);
    match batch {
        TrainBatch::Triples { x, target } => {
            let out = net.forward(x, None, true)?;
            let loss = ae_loss(&out.recon, target)?;
            let scale = S::from_f64(2.0 / out.recon.len() as f64);
            let d = ndarray::Zip::from(&out.recon)
                .and(target)
                .map_collect(|&p, &t| (p - t) * scale);
            net.backward(&d, None, None);
            Ok([loss, loss, 0.0, 0.0, 0.0])
        }
        TrainBatch::Singles { x } => {
            let b = x.dim().0;
            let eps = eps.expect("variational step needs reparameterization noise");
            let out = net.forward(x, Some(eps), true)?;
            let lv = out.lv.as_ref().expect("vae family has log-variance");
            let base = vae_loss(&out.recon, x, &out.mu, lv)?;
            let mut d_recon = ndarray::Zip::from(&out.recon)
                .and(x)
                .map_collect(|&p, &t| (p - t) * two);
            let mut percep = 0.0;
            if kind == ModelKind::VaePercep {
                let ex = extractor
                    .as_deref_mut()
                    .expect("vae_percep requires the feature extractor");
                let x3 = replicate4(x);
                let h3 = replicate4(&out.recon);
                let (pl, grad) = percep_loss_and_grad(ex, &x3, h3, layers, true)?;
                percep = pl;
                let g3 = grad.expect("gradient requested");
                // Stem replication: the map gradient is the channel sum.
                for bi in 0..b {
                    for c in 0..3 {
                        let gslice = g3.slice(ndarray::s![bi, c, .., ..]);
                        let mut dst = d_recon.slice_mut(ndarray::s![bi, 0, .., ..]);
                        dst += &gslice;
                    }
                }
            }
            let d_mu = out.mu.clone();
            let d_lv = lv.mapv(|l| (l.exp() - S::one()) * half);
            net.backward(&d_recon, Some(&d_mu), Some(&d_lv));
            let total = base.total + percep;
            Ok([total, base.recon, base.kld, percep, 0.0])
        }
        TrainBatch::Pairs { x1, x2 } => {
            let b = x1.dim().0;
            let (_, _, h, w) = x1.dim();
            // Stack the pair into one 2B batch so layer caches stay single-pass.
            let mut x = Array4::<S>::zeros((2 * b, 1, h, w));
            x.slice_mut(ndarray::s![..b, .., .., ..]).assign(x1);
            x.slice_mut(ndarray::s![b.., .., .., ..]).assign(x2);
            let eps = eps.expect("variational step needs reparameterization noise");
            let out = net.forward(&x, Some(eps), true)?;
            let lv = out.lv.as_ref().expect("vae family has log-variance");
            let r1 = out.recon.slice(ndarray::s![..b, .., .., ..]).to_owned();
            let r2 = out.recon.slice(ndarray::s![b.., .., .., ..]).to_owned();
            let parts = vae_reg_loss(&r1, &r2, x1, x2, &out.mu, lv, gamma)?;
            let mut d_recon = ndarray::Zip::from(&out.recon)
                .and(&x)
                .map_collect(|&p, &t| (p - t) * two);
            let g = S::from_f64(gamma);
            for bi in 0..b {
                for i in 0..h {
                    for j in 0..w {
                        let true_d = x1[[bi, 0, i, j]] - x2[[bi, 0, i, j]];
                        let hat_d = r1[[bi, 0, i, j]] - r2[[bi, 0, i, j]];
                        let s = (true_d - hat_d).signum();
                        // d|u|/dr̂1 = −sign(u), d|u|/dr̂2 = +sign(u).
                        d_recon[[bi, 0, i, j]] = d_recon[[bi, 0, i, j]] - g * s;
                        d_recon[[b + bi, 0, i, j]] = d_recon[[b + bi, 0, i, j]] + g * s;
                    }
                }
            }
            let d_mu = out.mu.clone();
            let d_lv = lv.mapv(|l| (l.exp() - S::one()) * half);
            net.backward(&d_recon, Some(&d_mu), Some(&d_lv));
            Ok([parts.total, parts.recon, parts.kld, 0.0, parts.reg])
        }
    }
}

fn replicate4<S: Scalar>(x: &Array4<S>) -> Array4<S> {
    let (b, _, h, w) = x.dim();
    let mut y = Array4::<S>::zeros((b, 3, h, w));
    for c in 0..3 {
        y.slice_mut(ndarray::s![.., c, .., ..])
            .assign(&x.index_axis(ndarray::Axis(1), 0));
    }
    y
}

// ---------------------------------------------------------------------------
// Augmentation generation
// ---------------------------------------------------------------------------

/// How interpolation pairs are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    /// Years 10 and 200 of each scenario.
    Endpoints,
    /// Consecutive-year pairs.
    Adjacent,
}

impl AlphaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AlphaMode::Endpoints => "endpoints",
            AlphaMode::Adjacent => "adjacent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "endpoints" => Ok(AlphaMode::Endpoints),
            "adjacent" => Ok(AlphaMode::Adjacent),
            other => Err(Error::Config(format!("unknown alpha mode {other:?}"))),
        }
    }
}

/// Synthetic-sample generation settings.
#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub count: usize,
    pub alpha_mode: AlphaMode,
    /// Number of points on the α grid ({0,1} is expressible with 2 points).
    pub grid_points: usize,
    /// α range in endpoints mode, biased toward the early (small-leak) end.
    pub endpoint_alpha: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            count: 3000,
            alpha_mode: AlphaMode::Adjacent,
            grid_points: 21,
            endpoint_alpha: (0.6, 1.0),
            seed: 0,
        }
    }
}

/// Generate synthetic samples from a checkpoint. Latent interpolation for
/// the VAE family, time-conditioned decoding for the AE, pixel interpolation
/// for the linear baseline. Deterministic in `cfg.seed`.
pub fn generate_augmentation(
    gen: &mut TrainedGenerator,
    scenarios: &[LeakageScenario],
    cfg: &AugmentConfig,
) -> Result<Vec<SyntheticSample>> {
    if cfg.count < 1 {
        return Err(Error::Config(format!(
            "augmentation count must be at least 1, got {}",
            cfg.count
        )));
    }
    if scenarios.is_empty() {
        return Err(Error::Data("no source scenarios".into()));
    }
    if cfg.grid_points < 1 {
        return Err(Error::Config("alpha grid needs at least one point".into()));
    }
    let n_years = scenarios[0].maps.len();
    let (alpha_lo, alpha_hi) = match cfg.alpha_mode {
        AlphaMode::Endpoints => cfg.endpoint_alpha,
        AlphaMode::Adjacent => (0.0, 1.0),
    };
    if !(0.0..=1.0).contains(&alpha_lo) || !(0.0..=1.0).contains(&alpha_hi) || alpha_lo > alpha_hi {
        return Err(Error::Config(format!(
            "alpha range [{alpha_lo}, {alpha_hi}] is not a sub-interval of [0, 1]"
        )));
    }
    let mut rng = stream(cfg.seed, "augment", 0);
    // Deterministic latent cache: encoding a (scenario, year) pair is pure.
    let mut z_cache: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let s = rng.random_range(0..scenarios.len());
        let (ia, ib) = match cfg.alpha_mode {
            AlphaMode::Endpoints => (0usize, n_years - 1),
            AlphaMode::Adjacent => {
                let k = rng.random_range(0..n_years - 1);
                (k, k + 1)
            }
        };
        let g = rng.random_range(0..cfg.grid_points);
        let alpha = if cfg.grid_points == 1 {
            alpha_lo
        } else {
            alpha_lo + (alpha_hi - alpha_lo) * g as f64 / (cfg.grid_points - 1) as f64
        };
        let scen = &scenarios[s];
        let (ya, yb) = (scen.maps[ia].year, scen.maps[ib].year);
        let pseudo_year = alpha * ya as f64 + (1.0 - alpha) * yb as f64;
        let sample = match gen.kind {
            ModelKind::Linear => SyntheticSample {
                map: linear_interp_baseline(&scen.maps[ia].grid, &scen.maps[ib].grid, alpha)?,
                alpha,
                scenario_id: scen.scenario_id,
                year_a: ya,
                year_b: yb,
                pseudo_year,
            },
            ModelKind::Ae => {
                let last = n_years - 1;
                let map = gen.ae_forward(
                    &scen.maps[0].grid,
                    &scen.maps[last].grid,
                    pseudo_year.clamp(10.0, 200.0),
                )?;
                SyntheticSample {
                    map,
                    alpha,
                    scenario_id: scen.scenario_id,
                    year_a: ya,
                    year_b: yb,
                    pseudo_year,
                }
            }
            _ => {
                let za = z_cache
                    .entry((s, ia))
                    .or_insert_with(|| gen.encode_det(&scen.maps[ia].grid))
                    .clone();
                let zb = z_cache
                    .entry((s, ib))
                    .or_insert_with(|| gen.encode_det(&scen.maps[ib].grid))
                    .clone();
                let z: Vec<f64> = if alpha == 1.0 {
                    za
                } else if alpha == 0.0 {
                    zb
                } else {
                    za.iter()
                        .zip(zb.iter())
                        .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
                        .collect()
                };
                SyntheticSample {
                    map: gen.decode_det(&z),
                    alpha,
                    scenario_id: scen.scenario_id,
                    year_a: ya,
                    year_b: yb,
                    pseudo_year,
                }
            }
        };
        out.push(sample);
    }
    Ok(out)
}

/// Persist synthetic samples as `aug_#####.f32` + sidecars.
pub fn save_augmentation(dir: &Path, samples: &[SyntheticSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("aug_{i:05}");
        let data: Vec<f32> = s.map.iter().map(|&v| v as f32).collect();
        crate::io::write_f32(&dir.join(format!("{stem}.f32")), &data)?;
        let mut meta = Meta::new();
        meta.push("rows", s.map.nrows());
        meta.push("cols", s.map.ncols());
        meta.push_f64("alpha", s.alpha);
        meta.push("scenario_id", s.scenario_id);
        meta.push("year_a", s.year_a);
        meta.push("year_b", s.year_b);
        meta.push_f64("pseudo_year", s.pseudo_year);
        meta.save(&dir.join(format!("{stem}.meta")))?;
    }
    Ok(())
}

/// Load a directory written by [`save_augmentation`].
pub fn load_augmentation(dir: &Path) -> Result<Vec<SyntheticSample>> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".f32")
                .filter(|s| s.starts_with("aug_"))
                .map(|s| s.to_string())
        })
        .collect();
    stems.sort();
    let mut out = Vec::with_capacity(stems.len());
    for stem in stems {
        let mpath = dir.join(format!("{stem}.meta"));
        let meta = Meta::load(&mpath)?;
        let rows = meta.get_usize("rows", &mpath)?;
        let cols = meta.get_usize("cols", &mpath)?;
        let data = crate::io::read_f32(&dir.join(format!("{stem}.f32")), rows * cols)?;
        let map = Array2::from_shape_vec((rows, cols), data.iter().map(|&v| v as f64).collect())
            .expect("length checked by read_f32");
        out.push(SyntheticSample {
            map,
            alpha: meta.get_f64("alpha", &mpath)?,
            scenario_id: meta.get_usize("scenario_id", &mpath)? as u64,
            year_a: meta.get_usize("year_a", &mpath)? as u32,
            year_b: meta.get_usize("year_b", &mpath)? as u32,
            pseudo_year: meta.get_f64("pseudo_year", &mpath)?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
