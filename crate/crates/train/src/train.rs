//! The training loop: seeded shuffling, flip augmentation, per-sample
//! forward/backward with deterministic ordered gradient accumulation,
//! optimizer steps with constraint re-projection, validation, and plateau
//! scheduling.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;

use iml_data::{augment_flip, Sample};
use iml_net::{composite_loss, named_params, ImlModel, LossWeights, ModelConfig};
use iml_tensor::{SplitMix64, Tape, Tensor};

use crate::adamw::{adamw_step, collect_grads, OptimizerState};
use crate::checkpoint::{load_model_params, push_model_params, Checkpoint};
use crate::error::{Result, TrainError};
use crate::plateau::PlateauSchedule;

/// Training hyperparameters. Defaults are the trained protocol: 100 epochs,
/// batch 32, initial rate 1e-4 decayed by 0.9 after 5 stale epochs, AdamW
/// momenta 0.9/0.999.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr_init: 1e-4,
            plateau_factor: 0.9,
            plateau_patience: 5,
            weight_decay: 0.01,
            seed: 0,
            loss: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr,seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds
        ));
    }
    out
}

/// Model plus optimizer, schedule, and progress counters; everything needed
/// to continue training bit-exactly after a checkpoint round-trip.
pub struct Trainer {
    pub model: ImlModel<f32>,
    pub cfg: TrainConfig,
    pub opt: OptimizerState<f32>,
    pub plateau: PlateauSchedule,
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub best_checkpoint: Option<Vec<u8>>,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, mut cfg: TrainConfig) -> Self {
        cfg.loss = model_cfg.loss;
        let model = ImlModel::new(model_cfg, SplitMix64::new(cfg.seed).fork(0x111).next_u64());
        let opt = OptimizerState::new(cfg.lr_init, cfg.weight_decay);
        let plateau = PlateauSchedule::new(cfg.lr_init, cfg.plateau_factor, cfg.plateau_patience);
        Trainer {
            model,
            cfg,
            opt,
            plateau,
            epoch: 0,
            best_val: None,
            best_checkpoint: None,
        }
    }

    /// Mean loss and mean parameter gradients over one batch. Per-sample
    /// passes run in parallel on private tapes; accumulation folds in sample
    /// order, so the result is identical for any worker count.
    fn batch_grads(
        &self,
        batch: &[Sample],
        epoch: usize,
        batch_idx: usize,
    ) -> Result<(f64, HashMap<String, Vec<f32>>)> {
        let named = named_params(&self.model);
        let weights = self.cfg.loss;
        let per_sample: Vec<Result<(f64, HashMap<String, Vec<f32>>)>> = batch
            .par_iter()
            .map(|sample| {
                let tape = Tape::new();
                let image = Tensor::from_vec(sample.image.clone(), &[3, sample.h, sample.w]);
                let out = self.model.forward(&tape, &image, Some(&sample.mask))?;
                let loss = composite_loss(&tape, &out, &sample.mask, sample.label, &weights)?;
                let value = loss.item() as f64;
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, batch: batch_idx });
                }
                let grads = tape.backward(&loss)?;
                Ok((value, collect_grads(&named, &grads)))
            })
            .collect();

        let scale = 1.0 / batch.len() as f32;
        let mut mean_loss = 0.0f64;
        let mut total: HashMap<String, Vec<f32>> = HashMap::new();
        for result in per_sample {
            let (value, grads) = result?;
            mean_loss += value;
            for (name, g) in grads {
                match total.get_mut(&name) {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v * scale;
                        }
                    }
                    None => {
                        let mut scaled = g;
                        for v in &mut scaled {
                            *v *= scale;
                        }
                        total.insert(name, scaled);
                    }
                }
            }
        }
        Ok((mean_loss / batch.len() as f64, total))
    }

    /// One optimizer step on an explicit batch (no augmentation); returns
    /// the pre-step mean loss.
    pub fn step_on_batch(&mut self, batch: &[Sample]) -> Result<f64> {
        self.opt.lr = self.plateau.lr();
        let (loss, grads) = self.batch_grads(batch, self.epoch, 0)?;
        adamw_step(&mut self.model, &grads, &mut self.opt)?;
        self.model.project_constraints();
        Ok(loss)
    }

    /// Mean training-mode loss without gradients.
    pub fn eval_loss(&self, samples: &[Sample]) -> Result<f64> {
        let weights = self.cfg.loss;
        let losses: Vec<Result<f64>> = samples
            .par_iter()
            .map(|sample| {
                let tape = Tape::inference();
                let image = Tensor::from_vec(sample.image.clone(), &[3, sample.h, sample.w]);
                let out = self.model.forward(&tape, &image, Some(&sample.mask))?;
                let loss = composite_loss(&tape, &out, &sample.mask, sample.label, &weights)?;
                Ok(loss.item() as f64)
            })
            .collect();
        let mut acc = 0.0;
        for l in losses {
            acc += l?;
        }
        Ok(acc / samples.len() as f64)
    }

    /// Run training up to `cfg.epochs` (continuing from `self.epoch`),
    /// returning one log row per completed epoch.
    pub fn run(&mut self, train: &[Sample], val: &[Sample]) -> Result<Vec<EpochLog>> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset("train"));
        }
        if val.is_empty() {
            return Err(TrainError::EmptyDataset("val"));
        }
        let mut log = Vec::new();
        while self.epoch < self.cfg.epochs {
            let epoch = self.epoch;
            let started = Instant::now();
            let lr_in_effect = self.plateau.lr();
            self.opt.lr = lr_in_effect;

            let mut order: Vec<usize> = (0..train.len()).collect();
            SplitMix64::new(self.cfg.seed).fork(0x5EED_0000 + epoch as u64).shuffle(&mut order);

            let mut train_loss = 0.0f64;
            let mut seen = 0usize;
            for (batch_idx, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
                let batch: Vec<Sample> = chunk
                    .iter()
                    .map(|&i| {
                        let flip_seed = SplitMix64::new(self.cfg.seed)
                            .fork(0xF11_0000 + (epoch * train.len() + i) as u64)
                            .next_u64();
                        augment_flip(&train[i], flip_seed)
                    })
                    .collect();
                let (loss, grads) = self.batch_grads(&batch, epoch, batch_idx)?;
                train_loss += loss * batch.len() as f64;
                seen += batch.len();
                adamw_step(&mut self.model, &grads, &mut self.opt)?;
                self.model.project_constraints();
            }
            train_loss /= seen as f64;

            let val_loss = self.eval_loss(val)?;
            if !val_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: usize::MAX });
            }
            self.epoch += 1;
            if self.best_val.map_or(true, |b| val_loss < b) {
                self.best_val = Some(val_loss);
                self.best_checkpoint = Some(self.to_checkpoint().to_bytes());
            }
            self.plateau.observe(val_loss);
            log.push(EpochLog {
                epoch,
                train_loss,
                val_loss,
                lr: lr_in_effect,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
        Ok(log)
    }

    /// Serialize the complete training state.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        let mc = &self.model.cfg;
        ckpt.push_f64_vec(
            "meta.model",
            &[
                mc.backbone.patch_size as f64,
                mc.backbone.stage_dims[0] as f64,
                mc.backbone.stage_dims[1] as f64,
                mc.backbone.stage_dims[2] as f64,
                mc.backbone.stage_dims[3] as f64,
                mc.backbone.stage_depths[0] as f64,
                mc.backbone.stage_depths[1] as f64,
                mc.backbone.stage_depths[2] as f64,
                mc.backbone.stage_depths[3] as f64,
                mc.backbone.state_dim as f64,
                mc.backbone.input_channels as f64,
                mc.fpn_dim as f64,
                mc.ppm_out as f64,
                mc.knn_k as f64,
                mc.bayar_filters as f64,
                mc.bayar_kernel as f64,
                mc.max_anchors as f64,
                mc.loss.alpha,
                mc.loss.beta,
                mc.loss.gamma,
                mc.loss.margin,
            ],
        );
        ckpt.push_f64_vec(
            "meta.train",
            &[
                self.cfg.epochs as f64,
                self.cfg.batch_size as f64,
                self.cfg.lr_init,
                self.cfg.plateau_factor,
                self.cfg.plateau_patience as f64,
                self.cfg.weight_decay,
            ],
        );
        ckpt.push_u64s("state.rng_seed", &[self.cfg.seed]);
        ckpt.push_u64s("state.epoch", &[self.epoch as u64]);
        ckpt.push_u64s("state.opt_step", &[self.opt.step]);
        ckpt.push_u64s("state.decays", &[self.plateau.decays]);
        ckpt.push_u64s("state.bad_epochs", &[self.plateau.bad_epochs as u64]);
        ckpt.push_f64_vec("state.best", &[self.plateau.best.unwrap_or(f64::INFINITY)]);
        ckpt.push_f64_vec("state.best_val", &[self.best_val.unwrap_or(f64::INFINITY)]);
        push_model_params(&mut ckpt, &self.model);
        // Optimizer moments in parameter order.
        for (name, _) in named_params(&self.model) {
            if let Some((m, v)) = self.opt.moments.get(&name) {
                ckpt.push_scalar_tensor(&format!("opt.m.{name}"), &Tensor::from_vec(m.clone(), &[m.len()]));
                ckpt.push_scalar_tensor(&format!("opt.v.{name}"), &Tensor::from_vec(v.clone(), &[v.len()]));
            }
        }
        ckpt
    }

    /// Rebuild a trainer (model, optimizer, schedule, counters) from a
    /// checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Trainer> {
        let model_cfg = decode_model_config(ckpt)?;
        let tc = ckpt.f64_vec("meta.train")?;
        if tc.len() != 6 {
            return Err(TrainError::TensorShape {
                name: "meta.train".into(),
                expected: vec![6],
                got: vec![tc.len()],
            });
        }
        let seed = ckpt.u64_vec("state.rng_seed")?[0];
        let cfg = TrainConfig {
            epochs: tc[0] as usize,
            batch_size: tc[1] as usize,
            lr_init: tc[2],
            plateau_factor: tc[3],
            plateau_patience: tc[4] as usize,
            weight_decay: tc[5],
            seed,
            loss: model_cfg.loss,
        };
        let mut trainer = Trainer::new(model_cfg, cfg);
        load_model_params(&mut trainer.model, ckpt)?;
        trainer.epoch = ckpt.u64_vec("state.epoch")?[0] as usize;
        trainer.opt.step = ckpt.u64_vec("state.opt_step")?[0];
        trainer.plateau.decays = ckpt.u64_vec("state.decays")?[0];
        trainer.plateau.bad_epochs = ckpt.u64_vec("state.bad_epochs")?[0] as usize;
        let best = ckpt.f64_vec("state.best")?[0];
        trainer.plateau.best = if best.is_finite() { Some(best) } else { None };
        let best_val = ckpt.f64_vec("state.best_val")?[0];
        trainer.best_val = if best_val.is_finite() { Some(best_val) } else { None };
        for (name, tensor) in named_params(&trainer.model) {
            let m = ckpt.scalar_tensor::<f32>(&format!("opt.m.{name}"));
            let v = ckpt.scalar_tensor::<f32>(&format!("opt.v.{name}"));
            if let (Ok(m), Ok(v)) = (m, v) {
                if m.numel() != tensor.numel() || v.numel() != tensor.numel() {
                    return Err(TrainError::TensorShape {
                        name: format!("opt.m.{name}"),
                        expected: vec![tensor.numel()],
                        got: vec![m.numel()],
                    });
                }
                trainer
                    .opt
                    .moments
                    .insert(name, (m.values().to_vec(), v.values().to_vec()));
            }
        }
        trainer.opt.lr = trainer.plateau.lr();
        Ok(trainer)
    }
}

pub fn decode_model_config(ckpt: &Checkpoint) -> Result<ModelConfig> {
    let mc = ckpt.f64_vec("meta.model")?;
    if mc.len() != 21 {
        return Err(TrainError::TensorShape {
            name: "meta.model".into(),
            expected: vec![21],
            got: vec![mc.len()],
        });
    }
    Ok(ModelConfig {
        backbone: iml_net::BackboneConfig {
            patch_size: mc[0] as usize,
            stage_dims: [mc[1] as usize, mc[2] as usize, mc[3] as usize, mc[4] as usize],
            stage_depths: [mc[5] as usize, mc[6] as usize, mc[7] as usize, mc[8] as usize],
            state_dim: mc[9] as usize,
            input_channels: mc[10] as usize,
        },
        fpn_dim: mc[11] as usize,
        ppm_out: mc[12] as usize,
        knn_k: mc[13] as usize,
        bayar_filters: mc[14] as usize,
        bayar_kernel: mc[15] as usize,
        max_anchors: mc[16] as usize,
        loss: LossWeights {
            alpha: mc[17],
            beta: mc[18],
            gamma: mc[19],
            margin: mc[20],
        },
    })
}

/// Rebuild just the model for inference from a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<ImlModel<f32>> {
    let cfg = decode_model_config(ckpt)?;
    let mut model = ImlModel::new(cfg, 0);
    load_model_params(&mut model, ckpt)?;
    Ok(model)
}

/// Deterministic 9:1 train/validation carve by seeded shuffle.
pub fn split_train_val(samples: Vec<Sample>, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    SplitMix64::new(seed).fork(0x59117).shuffle(&mut order);
    let n_val = (samples.len() / 10).max(1).min(samples.len().saturating_sub(1));
    let val_set: std::collections::HashSet<usize> = order.iter().take(n_val).copied().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.into_iter().enumerate() {
        if val_set.contains(&i) {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}
