//! Shared network layers: constrained noise convolution, fusion convs,
//! pyramid pooling, feature-pyramid top-down pass, detection and
//! localization heads.

use iml_tensor::{Scalar, SplitMix64, Tape, Tensor};

use crate::error::{NetError, Result};
use crate::params::{join, uniform_init, Params};
use crate::util::nearest_resize;

// ── basic parameterized layers ──────────────────────────────────────

#[derive(Clone)]
pub struct Conv2dLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(rng: &mut SplitMix64, out_c: usize, in_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = in_c * k * k;
        Conv2dLayer {
            weight: Tensor::param(uniform_init(rng, out_c * fan_in, fan_in), &[out_c, in_c, k, k]),
            bias: Tensor::param(vec![T::zero(); out_c], &[out_c, 1, 1]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = tape.conv2d(x, &self.weight, self.stride, self.pad)?;
        Ok(tape.add(&y, &self.bias)?)
    }
}

impl<T: Scalar> Params<T> for Conv2dLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone)]
pub struct LinearLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(rng: &mut SplitMix64, in_d: usize, out_d: usize) -> Self {
        LinearLayer {
            weight: Tensor::param(uniform_init(rng, in_d * out_d, in_d), &[in_d, out_d]),
            bias: Tensor::param(vec![T::zero(); out_d], &[out_d]),
        }
    }

    /// Residual-branch output projections start at zero so fresh blocks are
    /// identities.
    pub fn zeros(in_d: usize, out_d: usize) -> Self {
        LinearLayer {
            weight: Tensor::param(vec![T::zero(); in_d * out_d], &[in_d, out_d]),
            bias: Tensor::param(vec![T::zero(); out_d], &[out_d]),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(tape.linear(x, &self.weight, &self.bias)?)
    }
}

impl<T: Scalar> Params<T> for LinearLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::param(vec![T::one(); d], &[d]),
            beta: Tensor::param(vec![T::zero(); d], &[d]),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(tape.layer_norm(x, &self.gamma, &self.beta, 1e-5)?)
    }
}

impl<T: Scalar> Params<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

// ── constrained noise-residual convolution ──────────────────────────

/// Learnable high-pass filter bank. After projection every k×k slice has its
/// center pinned to −1 and its remaining coefficients summing to 1, so the
/// interior response to a constant input is exactly zero.
#[derive(Clone)]
pub struct BayarFilterBank<T: Scalar> {
    pub kernels: Tensor<T>,
    pub k: usize,
}

impl<T: Scalar> BayarFilterBank<T> {
    pub fn new(rng: &mut SplitMix64, filters_out: usize, channels_in: usize, k: usize) -> Self {
        assert!(k >= 3 && k % 2 == 1, "kernel extent must be odd and >= 3");
        let bank = BayarFilterBank {
            kernels: Tensor::param(
                uniform_init(rng, filters_out * channels_in * k * k, channels_in * k * k),
                &[filters_out, channels_in, k, k],
            ),
            k,
        };
        bayar_project(bank)
    }

    pub fn forward(&self, tape: &Tape<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        bayar_conv(tape, image, self)
    }

    /// True iff both constraints hold (center exactly −1, non-center sum
    /// within `tol` of 1).
    pub fn satisfies_constraints(&self, tol: f64) -> bool {
        let k = self.k;
        let center = (k / 2) * k + k / 2;
        self.kernels.values().chunks(k * k).all(|slice| {
            if slice[center] != -T::one() {
                return false;
            }
            let sum: f64 = slice
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != center)
                .map(|(_, v)| v.to_f64c())
                .sum();
            (sum - 1.0).abs() <= tol
        })
    }
}

impl<T: Scalar> Params<T> for BayarFilterBank<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "kernels"), &self.kernels);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "kernels"), &mut self.kernels);
    }
}

/// Project the bank onto the constraint set. Banks already satisfying both
/// constraints are returned untouched, which makes the projection idempotent
/// bit-for-bit.
pub fn bayar_project<T: Scalar>(bank: BayarFilterBank<T>) -> BayarFilterBank<T> {
    if bank.satisfies_constraints(1e-6) {
        return bank;
    }
    let k = bank.k;
    let center = (k / 2) * k + k / 2;
    let uniform = 1.0 / (k * k - 1) as f64;
    let mut data = bank.kernels.values().to_vec();
    for slice in data.chunks_mut(k * k) {
        let sum: f64 = slice
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != center)
            .map(|(_, v)| v.to_f64c())
            .sum();
        if sum.abs() < 1e-12 {
            for (i, v) in slice.iter_mut().enumerate() {
                *v = T::from_f64c(uniform);
                if i == center {
                    *v = -T::one();
                }
            }
        } else {
            let scale = T::from_f64c(1.0 / sum);
            for (i, v) in slice.iter_mut().enumerate() {
                if i == center {
                    *v = -T::one();
                } else {
                    *v = *v * scale;
                }
            }
        }
    }
    let kernels = bank.kernels.with_values(data).requires_grad(true);
    BayarFilterBank { kernels, k: bank.k }
}

/// Spatial-size-preserving correlation with the constrained bank; the output
/// is the noise map fed to the second backbone.
pub fn bayar_conv<T: Scalar>(tape: &Tape<T>, image: &Tensor<T>, bank: &BayarFilterBank<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    let want = bank.kernels.shape()[1];
    if s.len() != 3 || s[0] != want {
        return Err(NetError::LevelMismatch(format!(
            "noise extraction expects ({want},H,W), got {s:?}"
        )));
    }
    Ok(tape.conv2d(image, &bank.kernels, 1, bank.k / 2)?)
}

// ── level features ──────────────────────────────────────────────────

/// Per-level feature maps at strides 4, 8, 16, 32.
pub type LevelFeatures<T> = Vec<Tensor<T>>;

pub fn check_levels<T: Scalar>(levels: &LevelFeatures<T>) -> Result<()> {
    if levels.len() != 4 {
        return Err(NetError::LevelMismatch(format!("expected 4 levels, got {}", levels.len())));
    }
    for pair in levels.windows(2) {
        let (a, b) = (pair[0].shape(), pair[1].shape());
        if a[1] != 2 * b[1] || a[2] != 2 * b[2] {
            return Err(NetError::LevelMismatch(format!(
                "spatial sizes must halve level-to-level: {a:?} then {b:?}"
            )));
        }
    }
    Ok(())
}

/// One 3×3 fusion convolution per level over channel-concatenated inputs.
#[derive(Clone)]
pub struct FuseLevels<T: Scalar> {
    pub convs: Vec<Conv2dLayer<T>>,
}

impl<T: Scalar> FuseLevels<T> {
    pub fn new(rng: &mut SplitMix64, stage_dims: &[usize; 4]) -> Self {
        let convs = stage_dims
            .iter()
            .map(|&c| Conv2dLayer::new(rng, c, 2 * c, 3, 1, 1))
            .collect();
        FuseLevels { convs }
    }

    pub fn forward(
        &self,
        tape: &Tape<T>,
        rgb: &LevelFeatures<T>,
        noise: &LevelFeatures<T>,
    ) -> Result<LevelFeatures<T>> {
        check_levels(rgb)?;
        check_levels(noise)?;
        let mut out = Vec::with_capacity(4);
        for i in 0..4 {
            if rgb[i].shape() != noise[i].shape() {
                return Err(NetError::LevelMismatch(format!(
                    "level {i}: {:?} vs {:?}",
                    rgb[i].shape(),
                    noise[i].shape()
                )));
            }
            let cat = tape.concat(&[&rgb[i], &noise[i]], 0)?;
            out.push(self.convs[i].forward(tape, &cat)?);
        }
        Ok(out)
    }
}

impl<T: Scalar> Params<T> for FuseLevels<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
    }
}

// ── pyramid pooling head ────────────────────────────────────────────

pub const PPM_SCALES: [usize; 4] = [1, 2, 3, 6];

/// Pyramid pooling: adaptive average pooling at fixed scales (clipped to the
/// input extent), a 1×1 conv per branch, nearest upsample back, concat with
/// the input, and a 3×3 merge conv.
#[derive(Clone)]
pub struct Ppm<T: Scalar> {
    pub branches: Vec<Conv2dLayer<T>>,
    pub merge: Conv2dLayer<T>,
}

impl<T: Scalar> Ppm<T> {
    pub fn new(rng: &mut SplitMix64, in_c: usize, out_c: usize) -> Self {
        let branches = PPM_SCALES
            .iter()
            .map(|_| Conv2dLayer::new(rng, out_c, in_c, 1, 1, 0))
            .collect();
        let merge = Conv2dLayer::new(rng, out_c, in_c + PPM_SCALES.len() * out_c, 3, 1, 1);
        Ppm { branches, merge }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let (h, w) = (s[1], s[2]);
        let mut parts: Vec<Tensor<T>> = vec![x.clone()];
        for (scale, conv) in PPM_SCALES.iter().zip(&self.branches) {
            let eff = (*scale).min(h).min(w);
            let pooled = tape.avg_pool2d(x, eff, eff)?;
            let projected = tape.relu(&conv.forward(tape, &pooled)?)?;
            parts.push(nearest_resize(tape, &projected, h, w)?);
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let cat = tape.concat(&refs, 0)?;
        Ok(tape.relu(&self.merge.forward(tape, &cat)?)?)
    }
}

impl<T: Scalar> Params<T> for Ppm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&join(prefix, &format!("branch{i}")), f);
        }
        self.merge.visit(&join(prefix, "merge"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("branch{i}")), f);
        }
        self.merge.visit_mut(&join(prefix, "merge"), f);
    }
}

// ── feature pyramid top-down pass ───────────────────────────────────

/// `laterals` ordered coarse→fine, each finer level exactly 2× the previous,
/// all with a common channel count. Output i sums its lateral with the
/// upsampled coarser output; the coarsest output is the coarsest lateral.
pub fn fpn_topdown<T: Scalar>(tape: &Tape<T>, laterals: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    if laterals.is_empty() {
        return Err(NetError::LevelMismatch("feature pyramid needs at least one level".into()));
    }
    let d = laterals[0].shape()[0];
    for pair in laterals.windows(2) {
        let (a, b) = (pair[0].shape(), pair[1].shape());
        if b[0] != d || b[1] != 2 * a[1] || b[2] != 2 * a[2] {
            return Err(NetError::LevelMismatch(format!(
                "top-down chain must be dyadic with common channels: {a:?} then {b:?}"
            )));
        }
    }
    let mut outputs = Vec::with_capacity(laterals.len());
    outputs.push(laterals[0].clone());
    for lat in &laterals[1..] {
        let up = tape.nearest_upsample2d(outputs.last().unwrap(), 2)?;
        outputs.push(tape.add(lat, &up)?);
    }
    Ok(outputs)
}

// ── heads ───────────────────────────────────────────────────────────

/// 3×3 conv → global average pool → affine map to one logit; the sigmoid of
/// the logit is the fake probability.
#[derive(Clone)]
pub struct DetectionHead<T: Scalar> {
    pub conv: Conv2dLayer<T>,
    pub fc: LinearLayer<T>,
}

impl<T: Scalar> DetectionHead<T> {
    pub fn new(rng: &mut SplitMix64, in_c: usize) -> Self {
        DetectionHead {
            conv: Conv2dLayer::new(rng, in_c, in_c, 3, 1, 1),
            fc: LinearLayer::new(rng, in_c, 1),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = tape.relu(&self.conv.forward(tape, x)?)?;
        let pooled = tape.global_avg_pool(&h)?;
        let row = tape.reshape(&pooled, &[1, pooled.numel()])?;
        let logit = self.fc.forward(tape, &row)?;
        Ok(tape.reshape(&logit, &[1])?)
    }
}

impl<T: Scalar> Params<T> for DetectionHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

/// Super-resolution style reconstruction: two conv+relu+×2 stages and a
/// final projection to one logit channel. (D, H/4, W/4) -> (1, H, W).
/// The intermediate width is halved; full width buys nothing at the
/// resolutions the decoder runs at.
#[derive(Clone)]
pub struct LocalizationHead<T: Scalar> {
    pub conv1: Conv2dLayer<T>,
    pub conv2: Conv2dLayer<T>,
    pub conv_out: Conv2dLayer<T>,
}

impl<T: Scalar> LocalizationHead<T> {
    pub fn new(rng: &mut SplitMix64, in_c: usize) -> Self {
        let mid = (in_c / 2).max(1);
        LocalizationHead {
            conv1: Conv2dLayer::new(rng, mid, in_c, 3, 1, 1),
            conv2: Conv2dLayer::new(rng, mid, mid, 3, 1, 1),
            conv_out: Conv2dLayer::new(rng, 1, mid, 3, 1, 1),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h1 = tape.relu(&self.conv1.forward(tape, x)?)?;
        let u1 = tape.nearest_upsample2d(&h1, 2)?;
        let h2 = tape.relu(&self.conv2.forward(tape, &u1)?)?;
        let u2 = tape.nearest_upsample2d(&h2, 2)?;
        self.conv_out.forward(tape, &u2)
    }
}

impl<T: Scalar> Params<T> for LocalizationHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.conv_out.visit(&join(prefix, "conv_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.conv_out.visit_mut(&join(prefix, "conv_out"), f);
    }
}
