//! Fixed convolutional feature extractor.
//!
//! A five-block stand-in for a pretrained perceptual backbone: each block is
//! one 3×3 convolution plus a rectifier, with 2× average-pool downsampling
//! between blocks and channel widths (64, 128, 256, 512, 512). The perception
//! loss consumes the post-rectifier feature maps of the first convolution of
//! each block (`conv1_1` … `conv5_1`). Weights are deterministic — drawn from
//! a fixed seed with an orthogonal-style initialization — or loaded from a
//! portable weight file, so the artifact needs no external model downloads.
//! Feature extraction itself is a pure function of the input.

use crate::nn::{AvgPool2x, Conv2d, HasParams, Layer, LeakyRelu, Param, Scalar, Tensor};
use crate::rng::stream;
use crate::{Error, Result};
use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use std::path::Path;

/// Canonical tap names, one per block, in forward order.
pub const LAYER_NAMES: [&str; 5] = ["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"];

/// Production channel widths of the five blocks.
pub const BLOCK_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

/// Seed for the fixed deterministic weights.
pub const FIXED_WEIGHT_SEED: u64 = 1337;

/// Smallest accepted input side: four halvings must stay valid.
pub const MIN_SIDE: usize = 32;

// ---------------------------------------------------------------------------
// Layer selection
// ---------------------------------------------------------------------------

/// Which prefix of the tap list participates in the perception loss:
/// A = first two blocks, each later letter adds one block, D = all five.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelection {
    A,
    B,
    C,
    D,
}

impl LayerSelection {
    /// Number of selected taps (a prefix of [`LAYER_NAMES`]).
    pub fn count(self) -> usize {
        match self {
            LayerSelection::A => 2,
            LayerSelection::B => 3,
            LayerSelection::C => 4,
            LayerSelection::D => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerSelection::A => "A",
            LayerSelection::B => "B",
            LayerSelection::C => "C",
            LayerSelection::D => "D",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(LayerSelection::A),
            "B" | "b" => Ok(LayerSelection::B),
            "C" | "c" => Ok(LayerSelection::C),
            "D" | "d" => Ok(LayerSelection::D),
            other => Err(Error::Config(format!(
                "unknown layer selection {other:?}; expected A, B, C or D"
            ))),
        }
    }

    pub fn all() -> [LayerSelection; 4] {
        [
            LayerSelection::A,
            LayerSelection::B,
            LayerSelection::C,
            LayerSelection::D,
        ]
    }
}

/// Per-layer feature maps for one image, in canonical order.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<S: Scalar> {
    /// `(layer name, features [channels, h, w])`, one per selected block.
    pub layers: Vec<(String, Array3<S>)>,
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Orthogonal-style initialization: draw a Gaussian matrix, orthonormalize
/// its shorter side with modified Gram–Schmidt, and apply the rectifier gain
/// √2. Computed in f64 and rounded through f32 so every precision sees the
/// same weights.
fn orthogonal_conv<S: Scalar>(
    rng: &mut rand_chacha::ChaCha12Rng,
    out_c: usize,
    in_c: usize,
    k: usize,
) -> ArrayD<S> {
    let n = in_c * k * k;
    let (rows, cols) = (out_c.min(n), out_c.max(n));
    // Sample [rows, cols] with rows ≤ cols so the rows can be orthonormalized.
    let mut a = Array2::<f64>::zeros((rows, cols));
    for v in a.iter_mut() {
        *v = crate::nn::normal_draw(rng);
    }
    for i in 0..rows {
        for j in 0..i {
            let dot = a.row(i).dot(&a.row(j));
            let prev = a.row(j).to_owned();
            a.row_mut(i).zip_mut_with(&prev, |x, &p| *x -= dot * p);
        }
        let norm = a.row(i).dot(&a.row(i)).sqrt().max(1e-12);
        a.row_mut(i).mapv_inplace(|x| x / norm);
    }
    let gain = 2.0f64.sqrt();
    let mut w = ArrayD::<S>::zeros(IxDyn(&[out_c, in_c, k, k]));
    {
        let ws = w.as_slice_mut().unwrap();
        for o in 0..out_c {
            for j in 0..n {
                // When out_c ≤ n the sampled rows are the filters; otherwise
                // the orthonormal rows span the input dimension and filters
                // are its columns.
                let v = if out_c <= n { a[[o, j]] } else { a[[j, o]] };
                ws[o * n + j] = S::from_f64((gain * v) as f32 as f64);
            }
        }
    }
    w
}

// ---------------------------------------------------------------------------
// Extractor
// ---------------------------------------------------------------------------

/// Weight provenance, reported alongside evaluation artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    FixedSeed,
    Loaded,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::FixedSeed => "fixed-seed",
            Provenance::Loaded => "loaded",
        }
    }
}

/// The extractor itself: five conv blocks with pooling in between. The
/// public entry points are pure ([`FeatureExtractor::extract`]); training
/// code uses the caching tap interface to differentiate through it.
pub struct FeatureExtractor<S: Scalar> {
    convs: Vec<Conv2d<S>>,
    acts: Vec<LeakyRelu<S>>,
    pools: Vec<AvgPool2x>,
    widths: Vec<usize>,
    pub provenance: Provenance,
}

impl<S: Scalar> FeatureExtractor<S> {
    /// Production extractor: fixed deterministic weights.
    pub fn fixed() -> Self {
        Self::with_widths(&BLOCK_WIDTHS, FIXED_WEIGHT_SEED)
    }

    /// Custom-width extractor (gradient checks use tiny widths). Weights are
    /// seeded and orthogonal-style; biases zero.
    pub fn with_widths(widths: &[usize], seed: u64) -> Self {
        assert!(!widths.is_empty(), "extractor needs at least one block");
        let mut rng = stream(seed, "featureext", 0);
        let mut convs = Vec::with_capacity(widths.len());
        let mut in_c = 3;
        for &out_c in widths {
            let mut conv = Conv2d::new(in_c, out_c, 3, 1, 1, &mut rng);
            conv.w = Param::new(orthogonal_conv(&mut rng, out_c, in_c, 3));
            convs.push(conv);
            in_c = out_c;
        }
        let acts = widths.iter().map(|_| LeakyRelu::relu()).collect();
        let pools = (1..widths.len()).map(|_| AvgPool2x::new()).collect();
        FeatureExtractor {
            convs,
            acts,
            pools,
            widths: widths.to_vec(),
            provenance: Provenance::FixedSeed,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.widths.len()
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Data(format!(
                "extractor input {h}×{w} is smaller than the minimum {MIN_SIDE}×{MIN_SIDE}"
            )));
        }
        Ok(())
    }

    fn clamp_selection(&self, sel: LayerSelection) -> usize {
        sel.count().min(self.n_blocks())
    }

    /// Replicate a stack of single-channel maps into the 3-channel stem
    /// layout the first convolution expects.
    pub fn replicate_channels(maps: &[Array2<S>]) -> Array4<S> {
        let (h, w) = maps[0].dim();
        let mut x = Array4::<S>::zeros((maps.len(), 3, h, w));
        for (i, m) in maps.iter().enumerate() {
            for c in 0..3 {
                x.slice_mut(ndarray::s![i, c, .., ..]).assign(m);
            }
        }
        x
    }

    /// Pure feature extraction for a single `[0,1]`-normalized map.
    pub fn extract(&self, image: &Array2<S>, sel: LayerSelection) -> Result<FeaturePyramid<S>> {
        let (h, w) = image.dim();
        self.check_input(h, w)?;
        let n = self.clamp_selection(sel);
        let mut x = Self::replicate_channels(std::slice::from_ref(image));
        let mut layers = Vec::with_capacity(n);
        for b in 0..n {
            if b > 0 {
                x = pool2x_pure(&x);
            }
            x = self.convs[b].infer(&x);
            x.mapv_inplace(|v| if v > S::zero() { v } else { S::zero() });
            let (_, c, hh, ww) = x.dim();
            let tap = x
                .index_axis(ndarray::Axis(0), 0)
                .to_owned()
                .into_shape_with_order((c, hh, ww))
                .unwrap();
            layers.push((LAYER_NAMES[b.min(LAYER_NAMES.len() - 1)].to_string(), tap));
        }
        Ok(FeaturePyramid { layers })
    }

    /// Batched forward that returns the selected taps and (when `train`)
    /// caches for [`FeatureExtractor::backward_taps`]. Input is `[b,3,h,w]`.
    pub fn forward_taps(
        &mut self,
        x: Array4<S>,
        sel: LayerSelection,
        train: bool,
    ) -> Result<Vec<Array4<S>>> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::Shape(format!("extractor stem expects 3 channels, got {c}")));
        }
        self.check_input(h, w)?;
        let n = self.clamp_selection(sel);
        let mut taps = Vec::with_capacity(n);
        let mut t = Tensor::D4(x);
        for b in 0..n {
            if b > 0 {
                t = self.pools[b - 1].forward(t, train);
            }
            t = self.convs[b].forward(t, train);
            t = self.acts[b].forward(t, train);
            let y = t.d4();
            taps.push(y.clone());
            t = Tensor::D4(y);
        }
        Ok(taps)
    }

    /// Backpropagate tap gradients to the stem input. The extractor's own
    /// weights stay frozen (their gradients are discarded by never stepping
    /// an optimizer over them).
    pub fn backward_taps(&mut self, tap_grads: Vec<Array4<S>>) -> Array4<S> {
        let n = tap_grads.len();
        assert!(n >= 1 && n <= self.n_blocks());
        let mut carry: Option<Array4<S>> = None;
        for b in (0..n).rev() {
            let mut d = tap_grads[b].clone();
            if let Some(c) = carry {
                d += &c;
            }
            let d = self.acts[b].backward(Tensor::D4(d));
            let d = self.convs[b].backward(d).d4();
            carry = Some(if b > 0 {
                self.pools[b - 1].backward(Tensor::D4(d)).d4()
            } else {
                d
            });
        }
        carry.expect("at least one tap")
    }

    // -- persistence ---------------------------------------------------------

    /// Save the weights in the portable format.
    pub fn save_weights(&mut self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (b, conv) in self.convs.iter_mut().enumerate() {
            let name = LAYER_NAMES[b.min(LAYER_NAMES.len() - 1)];
            conv.visit_params(&format!("{name}."), &mut |n, p| {
                tensors.push((
                    n,
                    p.value.shape().to_vec(),
                    p.value.iter().map(|v| v.as_f64() as f32).collect(),
                ));
            });
        }
        crate::io::save_weights(path, &tensors)
    }

    /// Load weights; any missing tensor, shape mismatch or truncation is a
    /// distinct error naming the offending layer or file.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let store = crate::io::WeightStore::load(path)?;
        for (b, conv) in self.convs.iter_mut().enumerate() {
            let name = LAYER_NAMES[b.min(LAYER_NAMES.len() - 1)];
            let mut result = Ok(());
            conv.visit_params(&format!("{name}."), &mut |n, p| {
                if result.is_err() {
                    return;
                }
                match store.get(&n, p.value.shape()) {
                    Ok(data) => {
                        let arr = ArrayD::from_shape_vec(
                            IxDyn(p.value.shape()),
                            data.iter().map(|&v| S::from_f64(v as f64)).collect(),
                        )
                        .unwrap();
                        p.load_value(arr);
                    }
                    Err(e) => result = Err(e),
                }
            });
            result?;
        }
        self.provenance = Provenance::Loaded;
        Ok(())
    }
}

/// Pure 2×2 average pooling (no cache), for the concurrent extraction path.
fn pool2x_pure<S: Scalar>(x: &Array4<S>) -> Array4<S> {
    let (b, c, h, w) = x.dim();
    let quarter = S::from_f64(0.25);
    let mut y = Array4::<S>::zeros((b, c, h / 2, w / 2));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let s = x[[bi, ci, 2 * i, 2 * j]]
                        + x[[bi, ci, 2 * i, 2 * j + 1]]
                        + x[[bi, ci, 2 * i + 1, 2 * j]]
                        + x[[bi, ci, 2 * i + 1, 2 * j + 1]];
                    y[[bi, ci, i, j]] = s * quarter;
                }
            }
        }
    }
    y
}

// ---------------------------------------------------------------------------
