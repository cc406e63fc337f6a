//! Full network assembly and the composite training objective.

use iml_tensor::{Scalar, SplitMix64, Tape, Tensor};

use crate::error::{NetError, Result};
use crate::gnn::{downsample_mask, GgnnBlock};
use crate::layers::{
    fpn_topdown, BayarFilterBank, Conv2dLayer, DetectionHead, FuseLevels, LocalizationHead, Ppm,
};
use crate::params::{join, Params};
use crate::vssd::{Backbone, BackboneConfig};

/// Composite-loss weights. Defaults are the trained configuration:
/// detection α = 0.04, segmentation β = 0.16, graph metric γ = 0.001,
/// triplet margin m = 10.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.04,
            beta: 0.16,
            gamma: 0.001,
            margin: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Common pyramid width produced by the 1×1 lateral convolutions.
    pub fpn_dim: usize,
    /// Pyramid-pooling output channels.
    pub ppm_out: usize,
    /// Neighbor count of the graph blocks (clipped to M−1 on tiny levels).
    pub knn_k: usize,
    /// Noise extractor: filter count and kernel extent.
    pub bayar_filters: usize,
    pub bayar_kernel: usize,
    /// Anchor budget per level for the metric loss.
    pub max_anchors: usize,
    pub loss: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            fpn_dim: 64,
            ppm_out: 64,
            knn_k: 9,
            bayar_filters: 3,
            bayar_kernel: 5,
            max_anchors: 1024,
            loss: LossWeights::default(),
        }
    }
}

/// Forward products: full-resolution mask logits, one detection logit, and
/// the graph-metric term (present iff guided masks were supplied).
pub struct ModelOutput<T: Scalar> {
    pub mask_logits: Tensor<T>,
    pub det_logit: Tensor<T>,
    pub gmn_loss: Option<Tensor<T>>,
}

/// Dual-backbone localization network.
///
/// RGB and noise branches feed fused pyramid features; the deepest level
/// drives pyramid pooling and the detection head, the finer levels run
/// through the top-down pyramid and per-level guided graph blocks, and the
/// finest output is decoded to a full-resolution mask.
pub struct ImlModel<T: Scalar> {
    pub cfg: ModelConfig,
    pub bayar: BayarFilterBank<T>,
    pub backbone_rgb: Backbone<T>,
    pub backbone_noise: Backbone<T>,
    pub fuse: FuseLevels<T>,
    pub ppm: Ppm<T>,
    pub detection: DetectionHead<T>,
    pub laterals: Vec<Conv2dLayer<T>>,
    pub ppm_proj: Conv2dLayer<T>,
    pub gnn_blocks: Vec<GgnnBlock<T>>,
    pub localization: LocalizationHead<T>,
}

impl<T: Scalar> ImlModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let dims = cfg.backbone.stage_dims;
        let d = cfg.fpn_dim;
        let bayar = BayarFilterBank::new(&mut rng, cfg.bayar_filters, cfg.backbone.input_channels, cfg.bayar_kernel);
        let backbone_rgb = Backbone::new(&mut rng, cfg.backbone.clone());
        let mut noise_cfg = cfg.backbone.clone();
        noise_cfg.input_channels = cfg.bayar_filters;
        let backbone_noise = Backbone::new(&mut rng, noise_cfg);
        let fuse = FuseLevels::new(&mut rng, &dims);
        let ppm = Ppm::new(&mut rng, dims[3], cfg.ppm_out);
        let detection = DetectionHead::new(&mut rng, cfg.ppm_out);
        let laterals = (0..3).map(|i| Conv2dLayer::new(&mut rng, d, dims[i], 1, 1, 0)).collect();
        let ppm_proj = Conv2dLayer::new(&mut rng, d, cfg.ppm_out, 1, 1, 0);
        let gnn_blocks = (0..3).map(|_| GgnnBlock::new(&mut rng, d, cfg.knn_k)).collect();
        let localization = LocalizationHead::new(&mut rng, d);
        ImlModel {
            cfg,
            bayar,
            backbone_rgb,
            backbone_noise,
            fuse,
            ppm,
            detection,
            laterals,
            ppm_proj,
            gnn_blocks,
            localization,
        }
    }

    /// Full forward pass. `gt_mask`, when present (training), supplies the
    /// per-level guided masks; it never changes the predictions themselves.
    pub fn forward(&self, tape: &Tape<T>, image: &Tensor<T>, gt_mask: Option<&[u8]>) -> Result<ModelOutput<T>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != self.cfg.backbone.input_channels {
            return Err(NetError::LevelMismatch(format!("expected (3,H,W) image, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(NetError::BadInputSize(h, w));
        }
        if let Some(mask) = gt_mask {
            if mask.len() != h * w {
                return Err(NetError::MaskMismatch(mask.len() / w.max(1), w, h, w));
            }
        }

        let noise = self.bayar.forward(tape, image)?;
        let rgb_feats = self.backbone_rgb.forward(tape, image)?;
        let noise_feats = self.backbone_noise.forward(tape, &noise)?;
        let fused = self.fuse.forward(tape, &rgb_feats, &noise_feats)?;

        // Detection path: deepest level through pyramid pooling.
        let pooled = self.ppm.forward(tape, &fused[3])?;
        let det_logit = self.detection.forward(tape, &pooled)?;

        // Localization path: top-down pyramid over levels 1..3 seeded by the
        // projected pyramid-pooling output.
        let top = self.ppm_proj.forward(tape, &pooled)?;
        let mut chain = vec![top];
        for i in (0..3).rev() {
            chain.push(self.laterals[i].forward(tape, &fused[i])?);
        }
        let outputs = fpn_topdown(tape, &chain)?; // coarse→fine: [top, o3, o2, o1]

        let mut gmn_total: Option<Tensor<T>> = None;
        let mut finest = None;
        for level in (1..=3).rev() {
            // outputs[4 - level] is the pyramid output at stride 4·2^(level-1).
            let feat = &outputs[4 - level];
            let (fh, fw) = (feat.shape()[1], feat.shape()[2]);
            let guided = match gt_mask {
                Some(mask) => Some(downsample_mask(mask, h, w, fh, fw, level)?),
                None => None,
            };
            let (out, term) = self.gnn_blocks[level - 1].forward(
                tape,
                feat,
                guided.as_ref(),
                self.cfg.loss.margin,
                self.cfg.max_anchors,
            )?;
            if let Some(term) = term {
                gmn_total = Some(match gmn_total {
                    Some(acc) => tape.add(&acc, &term)?,
                    None => term,
                });
            }
            if level == 1 {
                finest = Some(out);
            }
        }

        let mask_logits = self.localization.forward(tape, &finest.expect("level 1 always present"))?;
        Ok(ModelOutput {
            mask_logits,
            det_logit,
            gmn_loss: gmn_total,
        })
    }

    /// Deepest fused feature map (stride 32); the designated target for
    /// receptive-field visualization.
    pub fn fused_level4(&self, tape: &Tape<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let noise = self.bayar.forward(tape, image)?;
        let rgb_feats = self.backbone_rgb.forward(tape, image)?;
        let noise_feats = self.backbone_noise.forward(tape, &noise)?;
        let fused = self.fuse.forward(tape, &rgb_feats, &noise_feats)?;
        Ok(fused.into_iter().nth(3).expect("four levels"))
    }

    /// Re-project the constrained noise filters; call after every optimizer
    /// step.
    pub fn project_constraints(&mut self) {
        let bank = std::mem::replace(
            &mut self.bayar,
            BayarFilterBank {
                kernels: Tensor::zeros(&[1, 1, 3, 3]),
                k: 3,
            },
        );
        self.bayar = crate::layers::bayar_project(bank);
    }
}

impl<T: Scalar> Params<T> for ImlModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.bayar.visit(&join(prefix, "bayar"), f);
        self.backbone_rgb.visit(&join(prefix, "rgb"), f);
        self.backbone_noise.visit(&join(prefix, "noise"), f);
        self.fuse.visit(&join(prefix, "fuse"), f);
        self.ppm.visit(&join(prefix, "ppm"), f);
        self.detection.visit(&join(prefix, "det"), f);
        for (i, l) in self.laterals.iter().enumerate() {
            l.visit(&join(prefix, &format!("lat{i}")), f);
        }
        self.ppm_proj.visit(&join(prefix, "ppm_proj"), f);
        for (i, g) in self.gnn_blocks.iter().enumerate() {
            g.visit(&join(prefix, &format!("gnn{i}")), f);
        }
        self.localization.visit(&join(prefix, "loc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.bayar.visit_mut(&join(prefix, "bayar"), f);
        self.backbone_rgb.visit_mut(&join(prefix, "rgb"), f);
        self.backbone_noise.visit_mut(&join(prefix, "noise"), f);
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
        self.ppm.visit_mut(&join(prefix, "ppm"), f);
        self.detection.visit_mut(&join(prefix, "det"), f);
        for (i, l) in self.laterals.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("lat{i}")), f);
        }
        self.ppm_proj.visit_mut(&join(prefix, "ppm_proj"), f);
        for (i, g) in self.gnn_blocks.iter_mut().enumerate() {
            g.visit_mut(&join(prefix, &format!("gnn{i}")), f);
        }
        self.localization.visit_mut(&join(prefix, "loc"), f);
    }
}

// ── losses ──────────────────────────────────────────────────────────

/// Numerically stable binary cross-entropy on a logit:
/// max(z,0) − z·y + ln(1 + e^{−|z|}).
pub fn bce_loss<T: Scalar>(tape: &Tape<T>, logit: &Tensor<T>, label: f64) -> Result<Tensor<T>> {
    let pos = tape.relu(logit)?;
    let neg_abs = tape.neg(&tape.add(&pos, &tape.relu(&tape.neg(logit)?)?)?)?;
    let log_term = tape.log(&tape.add_scalar(&tape.exp(&neg_abs)?, 1.0)?)?;
    let zy = tape.mul_scalar(logit, label)?;
    Ok(tape.add(&tape.sub(&pos, &zy)?, &log_term)?)
}

/// Soft-overlap loss: 1 − (2·Σp·g + ε) / (Σp + Σg + ε), ε = 1e-6.
pub fn dice_loss<T: Scalar>(tape: &Tape<T>, probs: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.numel() != gt.numel() {
        return Err(NetError::MaskMismatch(probs.numel(), 1, gt.numel(), 1));
    }
    const EPS: f64 = 1e-6;
    let flat_p = tape.reshape(probs, &[probs.numel()])?;
    let flat_g = tape.reshape(gt, &[gt.numel()])?;
    let inter = tape.reduce_sum(&tape.mul(&flat_p, &flat_g)?)?;
    let num = tape.add_scalar(&tape.mul_scalar(&inter, 2.0)?, EPS)?;
    let den = tape.add_scalar(&tape.add(&tape.reduce_sum(&flat_p)?, &tape.reduce_sum(&flat_g)?)?, EPS)?;
    let one = Tensor::scalar(T::one());
    Ok(tape.sub(&one, &tape.div(&num, &den)?)?)
}

/// α·clf + β·seg + γ·gmn over one sample. Requires the graph-metric term,
/// i.e. a training-mode forward pass.
pub fn composite_loss<T: Scalar>(
    tape: &Tape<T>,
    out: &ModelOutput<T>,
    gt_mask: &[u8],
    label: u8,
    weights: &LossWeights,
) -> Result<Tensor<T>> {
    let gmn = out.gmn_loss.as_ref().ok_or(NetError::MissingGmnTerm)?;
    let clf = bce_loss(tape, &out.det_logit, label as f64)?;
    let probs = tape.sigmoid(&out.mask_logits)?;
    let gt = Tensor::from_vec(
        gt_mask.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect(),
        &[gt_mask.len()],
    );
    let seg = dice_loss(tape, &probs, &gt)?;
    let weighted = tape.add(
        &tape.add(
            &tape.mul_scalar(&clf, weights.alpha)?,
            &tape.mul_scalar(&seg, weights.beta)?,
        )?,
        &tape.mul_scalar(gmn, weights.gamma)?,
    )?;
    Ok(weighted)
}
