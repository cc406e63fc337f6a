//! Non-causal state-space backbone.
//!
//! Tokens share a single hidden state H = Σ_j (1/ā_j)·b̄_j xⱼᵀ, so the output
//! at every position reads the same state and the result is independent of
//! scan order. The per-token bias term is omitted.

use iml_tensor::{Scalar, SplitMix64, Tape, Tensor};

use crate::error::{NetError, Result};
use crate::layers::{Conv2dLayer, LayerNorm, LevelFeatures, LinearLayer};
use crate::params::{join, Params};
use crate::util::{to_grid, to_tokens};

/// Zero-order-hold style discretization of one token's state dynamics:
/// ā = e^{Δ·a}, b̄ = Δ·b.
pub fn discretize(a: f64, delta: f64, b: &[f64]) -> (f64, Vec<f64>) {
    debug_assert!(delta > 0.0, "timescale must be positive");
    let a_bar = (delta * a).exp();
    let b_bar = b.iter().map(|&v| delta * v).collect();
    (a_bar, b_bar)
}

/// Per-token state-space parameters for a length-L sequence.
pub struct SsdTokenParams<T: Scalar> {
    /// Positive per-token transition scalar, shape (L,1).
    pub a_bar: Tensor<T>,
    /// Discretized input projection, shape (L,N).
    pub b_bar: Tensor<T>,
    /// Output projection, shape (L,N).
    pub c: Tensor<T>,
}

impl<T: Scalar> SsdTokenParams<T> {
    fn check(&self, tokens: &Tensor<T>) -> Result<()> {
        let l = tokens.shape()[0];
        let n = self.b_bar.shape()[1];
        if self.a_bar.shape() != [l, 1] || self.b_bar.shape() != [l, n] || self.c.shape() != [l, n] {
            return Err(NetError::LevelMismatch(format!(
                "ssd params lengths must match {l} tokens: a_bar {:?}, b_bar {:?}, c {:?}",
                self.a_bar.shape(),
                self.b_bar.shape(),
                self.c.shape()
            )));
        }
        Ok(())
    }
}

/// Shared-state token aggregation: H = Σ_j (1/ā_j)·outer(b̄_j, x_j), then
/// y_t = c_tᵀ H for every t. Permuting tokens (with their parameters)
/// permutes the output identically.
pub fn nc_ssd_aggregate<T: Scalar>(
    tape: &Tape<T>,
    tokens: &Tensor<T>,
    params: &SsdTokenParams<T>,
) -> Result<Tensor<T>> {
    params.check(tokens)?;
    let weights = tape.div(&params.b_bar, &params.a_bar)?; // (L,N)
    let state = tape.matmul(&tape.transpose2d(&weights)?, tokens)?; // (N,d)
    Ok(tape.matmul(&params.c, &state)?)
}

/// O(L²) reference: y_t = Σ_j c_t·(1/ā_j)·b̄_j·x_j, evaluated token by token.
/// Test oracle for the shared-state form; not a runtime path.
pub fn nc_ssd_aggregate_naive(
    tokens: &[Vec<f64>],
    a_bar: &[f64],
    b_bar: &[Vec<f64>],
    c: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let l = tokens.len();
    let d = tokens.first().map_or(0, |t| t.len());
    let n = b_bar.first().map_or(0, |b| b.len());
    let mut out = vec![vec![0.0; d]; l];
    for t in 0..l {
        for j in 0..l {
            // c_t · b̄_j is the scalar coupling between positions t and j.
            let mut coupling = 0.0;
            for q in 0..n {
                coupling += c[t][q] * b_bar[j][q];
            }
            let scale = coupling / a_bar[j];
            for v in 0..d {
                out[t][v] += scale * tokens[j][v];
            }
        }
    }
    out
}

/// One backbone block: normalized projections produce per-token (Δ, b, c)
/// and a value path, the discretized scan aggregates a shared state, a
/// sigmoid gate merges it back, and an MLP refines the residual stream.
pub struct VssdBlock<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub proj_delta: LinearLayer<T>,
    pub proj_b: LinearLayer<T>,
    pub proj_c: LinearLayer<T>,
    pub proj_value: LinearLayer<T>,
    pub proj_gate: LinearLayer<T>,
    pub proj_out: LinearLayer<T>,
    /// Learned transition rate, initialized to −1 so ā = e^{Δa} starts below one.
    pub a: Tensor<T>,
    pub norm2: LayerNorm<T>,
    pub mlp_in: LinearLayer<T>,
    pub mlp_out: LinearLayer<T>,
}

impl<T: Scalar> VssdBlock<T> {
    pub fn new(rng: &mut SplitMix64, d: usize, state_dim: usize) -> Self {
        VssdBlock {
            norm1: LayerNorm::new(d),
            proj_delta: LinearLayer::new(rng, d, 1),
            proj_b: LinearLayer::new(rng, d, state_dim),
            proj_c: LinearLayer::new(rng, d, state_dim),
            proj_value: LinearLayer::new(rng, d, d),
            proj_gate: LinearLayer::new(rng, d, d),
            proj_out: LinearLayer::zeros(d, d),
            a: Tensor::param(vec![-T::one()], &[1]),
            norm2: LayerNorm::new(d),
            mlp_in: LinearLayer::new(rng, d, 4 * d),
            mlp_out: LinearLayer::zeros(4 * d, d),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.norm1.forward(tape, x)?;
        let delta = tape.softplus(&self.proj_delta.forward(tape, &h)?)?; // (L,1) > 0
        let a_bar = tape.exp(&tape.mul(&delta, &self.a)?)?; // (L,1)
        let b_bar = tape.mul(&self.proj_b.forward(tape, &h)?, &delta)?; // (L,N)
        let c = self.proj_c.forward(tape, &h)?;
        let value = self.proj_value.forward(tape, &h)?;
        let params = SsdTokenParams { a_bar, b_bar, c };
        let scanned = nc_ssd_aggregate(tape, &value, &params)?;
        let gate = tape.sigmoid(&self.proj_gate.forward(tape, &h)?)?;
        let merged = tape.mul(&scanned, &gate)?;
        let x1 = tape.add(x, &self.proj_out.forward(tape, &merged)?)?;

        let h2 = self.norm2.forward(tape, &x1)?;
        let mid = tape.relu(&self.mlp_in.forward(tape, &h2)?)?;
        let mlp = self.mlp_out.forward(tape, &mid)?;
        Ok(tape.add(&x1, &mlp)?)
    }
}

impl<T: Scalar> Params<T> for VssdBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.proj_delta.visit(&join(prefix, "delta"), f);
        self.proj_b.visit(&join(prefix, "b"), f);
        self.proj_c.visit(&join(prefix, "c"), f);
        self.proj_value.visit(&join(prefix, "value"), f);
        self.proj_gate.visit(&join(prefix, "gate"), f);
        self.proj_out.visit(&join(prefix, "out"), f);
        f(&join(prefix, "a"), &self.a);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp_in.visit(&join(prefix, "mlp_in"), f);
        self.mlp_out.visit(&join(prefix, "mlp_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.proj_delta.visit_mut(&join(prefix, "delta"), f);
        self.proj_b.visit_mut(&join(prefix, "b"), f);
        self.proj_c.visit_mut(&join(prefix, "c"), f);
        self.proj_value.visit_mut(&join(prefix, "value"), f);
        self.proj_gate.visit_mut(&join(prefix, "gate"), f);
        self.proj_out.visit_mut(&join(prefix, "out"), f);
        f(&join(prefix, "a"), &mut self.a);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.mlp_in.visit_mut(&join(prefix, "mlp_in"), f);
        self.mlp_out.visit_mut(&join(prefix, "mlp_out"), f);
    }
}

/// Backbone hyperparameters. Defaults are the desk-scale configuration that
/// trains on CPU in minutes.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub stage_dims: [usize; 4],
    pub stage_depths: [usize; 4],
    pub state_dim: usize,
    pub input_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            patch_size: 4,
            stage_dims: [16, 32, 64, 128],
            stage_depths: [1, 1, 2, 1],
            state_dim: 8,
            input_channels: 3,
        }
    }
}

/// Hierarchical four-stage feature extractor: patch embedding, token blocks
/// per stage, and 2×2 stride-2 downsampling between stages. Levels come out
/// at strides 4/8/16/32.
pub struct Backbone<T: Scalar> {
    pub cfg: BackboneConfig,
    pub patch_embed: Conv2dLayer<T>,
    pub stages: Vec<Vec<VssdBlock<T>>>,
    pub downsamples: Vec<Conv2dLayer<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(rng: &mut SplitMix64, cfg: BackboneConfig) -> Self {
        let patch_embed = Conv2dLayer::new(
            rng,
            cfg.stage_dims[0],
            cfg.input_channels,
            cfg.patch_size,
            cfg.patch_size,
            0,
        );
        let stages = (0..4)
            .map(|s| {
                (0..cfg.stage_depths[s])
                    .map(|_| VssdBlock::new(rng, cfg.stage_dims[s], cfg.state_dim))
                    .collect()
            })
            .collect();
        let downsamples = (0..3)
            .map(|s| Conv2dLayer::new(rng, cfg.stage_dims[s + 1], cfg.stage_dims[s], 2, 2, 0))
            .collect();
        Backbone {
            cfg,
            patch_embed,
            stages,
            downsamples,
        }
    }

    pub fn forward(&self, tape: &Tape<T>, image: &Tensor<T>) -> Result<LevelFeatures<T>> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(NetError::LevelMismatch(format!("expected (C,H,W) image, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(NetError::BadInputSize(h, w));
        }
        let mut x = self.patch_embed.forward(tape, image)?;
        let mut levels = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            let (sh, sw) = (x.shape()[1], x.shape()[2]);
            let mut tokens = to_tokens(tape, &x)?;
            for block in stage {
                tokens = block.forward(tape, &tokens)?;
            }
            x = to_grid(tape, &tokens, sh, sw)?;
            levels.push(x.clone());
            if i < 3 {
                x = self.downsamples[i].forward(tape, &x)?;
            }
        }
        Ok(levels)
    }
}

impl<T: Scalar> Params<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.patch_embed.visit(&join(prefix, "stem"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.visit(&join(prefix, &format!("s{s}.b{b}")), f);
            }
        }
        for (s, d) in self.downsamples.iter().enumerate() {
            d.visit(&join(prefix, &format!("down{s}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.patch_embed.visit_mut(&join(prefix, "stem"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("s{s}.b{b}")), f);
            }
        }
        for (s, d) in self.downsamples.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("down{s}")), f);
        }
    }
}

/// Effective receptive field: average over probes of the absolute input
/// gradient of the central output position (summed over channels on both
/// ends). Returns an (H,W) map.
pub fn compute_erf<T, F>(forward: &F, probes: &[Tensor<T>]) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tape<T>, &Tensor<T>) -> Result<Tensor<T>>,
{
    if probes.is_empty() {
        return Err(NetError::EmptyProbes);
    }
    let shape = probes[0].shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let mut acc = vec![0.0f64; h * w];
    for probe in probes {
        if probe.shape() != shape {
            return Err(NetError::LevelMismatch(format!(
                "probe shapes differ: {:?} vs {:?}",
                probe.shape(),
                shape
            )));
        }
        let tape = Tape::new();
        let leaf = probe.detach().requires_grad(true);
        let feat = forward(&tape, &leaf)?;
        let fs = feat.shape().to_vec();
        if fs.len() != 3 {
            return Err(NetError::LevelMismatch(format!("erf target must be (C,h,w), got {fs:?}")));
        }
        // Select the central spatial position across all channels.
        let mut mask = vec![T::zero(); feat.numel()];
        let (fc, fh, fw) = (fs[0], fs[1], fs[2]);
        for c in 0..fc {
            mask[(c * fh + fh / 2) * fw + fw / 2] = T::one();
        }
        let picked = tape.mul(&feat, &Tensor::from_vec(mask, &fs))?;
        let root = tape.reduce_sum(&picked)?;
        let grads = tape.backward(&root)?;
        let g = grads
            .get(&leaf)
            .ok_or_else(|| NetError::LevelMismatch("erf target does not depend on the input".into()))?;
        let channels = shape[0];
        for c in 0..channels {
            for i in 0..h * w {
                acc[i] += g[c * h * w + i].to_f64c().abs();
            }
        }
    }
    let scale = 1.0 / probes.len() as f64;
    Ok(Tensor::from_vec(
        acc.iter().map(|&v| T::from_f64c(v * scale)).collect(),
        &[h, w],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LinearLayer;
    use iml_tensor::grad_check;

    fn rng() -> SplitMix64 {
        SplitMix64::new(0x55D)
    }

    #[test]
    fn discretize_zero_timescale_limit() {
        let (a_bar, b_bar) = discretize(-3.7, 1e-12, &[1.0, -2.0]);
        assert!((a_bar - 1.0).abs() < 1e-9);
        assert!(b_bar.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn discretize_zero_dynamics() {
        let (a_bar, _) = discretize(0.0, 1.0, &[1.0]);
        assert_eq!(a_bar, 1.0);
    }

    #[test]
    fn discretize_hand_value() {
        let (a_bar, b_bar) = discretize(-2.0, 0.5, &[1.0, 0.0]);
        assert!((a_bar - (-1.0f64).exp()).abs() < 1e-15);
        assert!((a_bar - 0.367879441).abs() < 1e-9);
        assert_eq!(b_bar, vec![0.5, 0.0]);
    }

    fn params_from(a_bar: &[f64], b_bar: &[f64], c: &[f64], n: usize) -> SsdTokenParams<f64> {
        let l = a_bar.len();
        SsdTokenParams {
            a_bar: Tensor::from_vec(a_bar.to_vec(), &[l, 1]),
            b_bar: Tensor::from_vec(b_bar.to_vec(), &[l, n]),
            c: Tensor::from_vec(c.to_vec(), &[l, n]),
        }
    }

    #[test]
    fn aggregate_hand_example() {
        // H = (1/2)(1·3) + (1/4)(2·5) = 4; y_t = c_t · H.
        let tape = Tape::inference();
        let params = params_from(&[2.0, 4.0], &[1.0, 2.0], &[1.0, 2.0], 1);
        let tokens = Tensor::from_vec(vec![3.0, 5.0], &[2, 1]);
        let y = nc_ssd_aggregate(&tape, &tokens, &params).unwrap();
        assert_eq!(y.values(), &[4.0, 8.0]);
    }

    #[test]
    fn aggregate_zero_tokens_give_zero() {
        let tape = Tape::inference();
        let params = params_from(&[1.0, 2.0, 3.0], &[0.5, 1.0, -1.0], &[1.0, -2.0, 0.25], 1);
        let y = nc_ssd_aggregate(&tape, &Tensor::zeros(&[3, 1]), &params).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_rejects_length_mismatch() {
        let tape = Tape::inference();
        let params = params_from(&[1.0, 2.0], &[0.5, 1.0], &[1.0, -2.0], 1);
        let tokens = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3, 1]);
        assert!(nc_ssd_aggregate(&tape, &tokens, &params).is_err());
    }

    fn random_instance(r: &mut SplitMix64, l: usize, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let tokens: Vec<Vec<f64>> = (0..l).map(|_| (0..d).map(|_| r.uniform(-1.0, 1.0)).collect()).collect();
        let a_bar: Vec<f64> = (0..l).map(|_| r.uniform(0.2, 2.0)).collect();
        let b_bar: Vec<Vec<f64>> = (0..l).map(|_| (0..n).map(|_| r.uniform(-1.0, 1.0)).collect()).collect();
        let c: Vec<Vec<f64>> = (0..l).map(|_| (0..n).map(|_| r.uniform(-1.0, 1.0)).collect()).collect();
        (tokens, a_bar, b_bar, c)
    }

    fn run_aggregate(tokens: &[Vec<f64>], a_bar: &[f64], b_bar: &[Vec<f64>], c: &[Vec<f64>]) -> Vec<f64> {
        let tape = Tape::inference();
        let (l, n, d) = (tokens.len(), b_bar[0].len(), tokens[0].len());
        let params = SsdTokenParams {
            a_bar: Tensor::from_vec(a_bar.to_vec(), &[l, 1]),
            b_bar: Tensor::from_vec(b_bar.concat(), &[l, n]),
            c: Tensor::from_vec(c.concat(), &[l, n]),
        };
        let toks = Tensor::from_vec(tokens.concat(), &[l, d]);
        nc_ssd_aggregate(&tape, &toks, &params).unwrap().values().to_vec()
    }

    #[test]
    fn aggregate_matches_naive_quadratic_oracle() {
        let mut r = rng();
        for _ in 0..50 {
            let (l, n, d) = (2 + r.usize_below(12), 1 + r.usize_below(4), 1 + r.usize_below(5));
            let (tokens, a_bar, b_bar, c) = random_instance(&mut r, l, n, d);
            let fast = run_aggregate(&tokens, &a_bar, &b_bar, &c);
            let naive = nc_ssd_aggregate_naive(&tokens, &a_bar, &b_bar, &c);
            for t in 0..l {
                for v in 0..d {
                    assert!(
                        (fast[t * d + v] - naive[t][v]).abs() < 1e-10,
                        "mismatch at token {t} dim {v}"
                    );
                }
            }
        }
    }

    #[test]
    fn aggregate_commutes_with_token_permutation() {
        let mut r = rng();
        let (l, n, d) = (12, 3, 4);
        let (tokens, a_bar, b_bar, c) = random_instance(&mut r, l, n, d);
        let base = run_aggregate(&tokens, &a_bar, &b_bar, &c);
        for _ in 0..100 {
            let mut perm: Vec<usize> = (0..l).collect();
            r.shuffle(&mut perm);
            let pt: Vec<Vec<f64>> = perm.iter().map(|&i| tokens[i].clone()).collect();
            let pa: Vec<f64> = perm.iter().map(|&i| a_bar[i]).collect();
            let pb: Vec<Vec<f64>> = perm.iter().map(|&i| b_bar[i].clone()).collect();
            let pc: Vec<Vec<f64>> = perm.iter().map(|&i| c[i].clone()).collect();
            let permuted = run_aggregate(&pt, &pa, &pb, &pc);
            for (t, &src) in perm.iter().enumerate() {
                for v in 0..d {
                    assert!((permuted[t * d + v] - base[src * d + v]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn aggregate_is_linear_in_tokens() {
        let mut r = rng();
        let (l, n, d) = (9, 2, 3);
        let (tokens, a_bar, b_bar, c) = random_instance(&mut r, l, n, d);
        let (more, _, _, _) = random_instance(&mut r, l, n, d);
        let sum_tokens: Vec<Vec<f64>> = tokens
            .iter()
            .zip(&more)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let y_sum = run_aggregate(&sum_tokens, &a_bar, &b_bar, &c);
        let y_a = run_aggregate(&tokens, &a_bar, &b_bar, &c);
        let y_b = run_aggregate(&more, &a_bar, &b_bar, &c);
        for i in 0..l * d {
            assert!((y_sum[i] - (y_a[i] + y_b[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn block_with_zero_output_projections_is_identity() {
        let mut r = rng();
        let block = VssdBlock::<f64>::new(&mut r, 6, 4);
        let tape = Tape::inference();
        let x = Tensor::from_vec((0..48).map(|v| (v as f64) * 0.1 - 2.0).collect(), &[8, 6]);
        let y = block.forward(&tape, &x).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn block_shape_contract() {
        let mut r = rng();
        let mut block = VssdBlock::<f32>::new(&mut r, 32, 8);
        block.proj_out = LinearLayer::new(&mut r, 32, 32);
        block.mlp_out = LinearLayer::new(&mut r, 128, 32);
        let tape = Tape::inference();
        let x = Tensor::from_vec((0..256 * 32).map(|v| (v % 31) as f32 * 0.05).collect(), &[256, 32]);
        let y = block.forward(&tape, &x).unwrap();
        assert_eq!(y.shape(), &[256, 32]);
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let mut r = rng();
        let d = 4;
        let mut block = VssdBlock::<f64>::new(&mut r, d, 3);
        // Randomize the zero-initialized projections so the scan path carries
        // gradient.
        block.proj_out = LinearLayer::new(&mut r, d, d);
        block.mlp_out = LinearLayer::new(&mut r, 4 * d, d);
        let point = Tensor::from_vec((0..8 * d).map(|_| r.uniform(-1.0, 1.0)).collect(), &[8, d]);
        let report = grad_check(
            |tape, x| {
                let y = block.forward(tape, x).map_err(|_| {
                    iml_tensor::TensorError::ShapeMismatch { primitive: "block", detail: String::new() }
                })?;
                tape.reduce_sum(&y)
            },
            &point,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn backbone_level_shapes() {
        let mut r = rng();
        let backbone = Backbone::<f32>::new(&mut r, BackboneConfig::default());
        let tape = Tape::inference();
        let img = Tensor::from_vec((0..3 * 64 * 64).map(|v| (v % 255) as f32 / 255.0).collect(), &[3, 64, 64]);
        let levels = backbone.forward(&tape, &img).unwrap();
        assert_eq!(levels[0].shape(), &[16, 16, 16]);
        assert_eq!(levels[1].shape(), &[32, 8, 8]);
        assert_eq!(levels[2].shape(), &[64, 4, 4]);
        assert_eq!(levels[3].shape(), &[128, 2, 2]);
    }

    #[test]
    fn backbone_rejects_bad_extent() {
        let mut r = rng();
        let backbone = Backbone::<f32>::new(&mut r, BackboneConfig::default());
        let tape = Tape::inference();
        let img = Tensor::zeros(&[3, 48, 48]);
        assert!(matches!(backbone.forward(&tape, &img), Err(NetError::BadInputSize(48, 48))));
    }

    #[test]
    fn single_pixel_change_reaches_every_level() {
        let mut r = rng();
        let backbone = Backbone::<f32>::new(&mut r, BackboneConfig::default());
        let tape = Tape::inference();
        let mut data: Vec<f32> = (0..3 * 32 * 32).map(|_| r.uniform(0.0, 1.0) as f32).collect();
        let a = Tensor::from_vec(data.clone(), &[3, 32, 32]);
        data[5 * 32 + 9] += 0.5;
        let b = Tensor::from_vec(data, &[3, 32, 32]);
        let la = backbone.forward(&tape, &a).unwrap();
        let lb = backbone.forward(&tape, &b).unwrap();
        for (x, y) in la.iter().zip(&lb) {
            assert!(
                x.values().iter().zip(y.values()).any(|(p, q)| p != q),
                "a level did not react to the pixel change"
            );
        }
    }

    #[test]
    fn erf_of_identity_network_is_a_center_delta() {
        let probe = Tensor::from_vec((0..3 * 16 * 16).map(|v| v as f64 * 0.01).collect(), &[3, 16, 16]);
        let erf = compute_erf(&|_tape: &Tape<f64>, x: &Tensor<f64>| Ok(x.clone()), &[probe]).unwrap();
        assert_eq!(erf.shape(), &[16, 16]);
        for (i, &v) in erf.values().iter().enumerate() {
            if i == 8 * 16 + 8 {
                assert_eq!(v, 3.0); // one unit per input channel
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn erf_of_single_conv_covers_exactly_its_kernel() {
        let kernel = Tensor::param(vec![1.0f64; 2 * 3 * 9], &[2, 3, 3, 3]);
        let f = move |tape: &Tape<f64>, x: &Tensor<f64>| tape.conv2d(x, &kernel, 1, 1).map_err(Into::into);
        let mut r = rng();
        let probe = Tensor::from_vec((0..3 * 12 * 12).map(|_| r.uniform(-1.0, 1.0)).collect(), &[3, 12, 12]);
        let erf = compute_erf(&f, &[probe]).unwrap();
        let v = erf.values();
        for y in 0..12 {
            for x in 0..12 {
                let inside = (5..=7).contains(&y) && (5..=7).contains(&x);
                if inside {
                    assert!(v[y * 12 + x] > 0.0);
                } else {
                    assert_eq!(v[y * 12 + x], 0.0);
                }
            }
        }
    }

    #[test]
    fn erf_requires_probes() {
        let f = |_: &Tape<f64>, x: &Tensor<f64>| Ok(x.clone());
        assert!(matches!(compute_erf(&f, &[]), Err(NetError::EmptyProbes)));
    }
}
