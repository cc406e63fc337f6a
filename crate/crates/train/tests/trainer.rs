//! Optimizer hand values, checkpoint round-trips, resume equivalence, and
//! training-loop bookkeeping on a miniature configuration.

use std::collections::HashMap;

use iml_data::gen_dataset;
use iml_net::{BackboneConfig, LossWeights, ModelConfig, Params};
use iml_tensor::{Scalar, Tensor};
use iml_train::{
    adamw_step, Checkpoint, OptimizerState, TrainConfig, TrainError, Trainer,
};

/// Single-parameter holder for optimizer unit tests.
struct OneParam<T: Scalar> {
    theta: Tensor<T>,
}

impl<T: Scalar> Params<T> for OneParam<T> {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("theta", &self.theta);
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("theta", &mut self.theta);
    }
}

#[test]
fn adamw_first_step_matches_hand_value() {
    let mut model = OneParam { theta: Tensor::param(vec![0.0f64], &[1]) };
    let mut state = OptimizerState::new(0.1, 0.0);
    let mut grads = HashMap::new();
    grads.insert("theta".to_string(), vec![1.0f64]);
    adamw_step(&mut model, &grads, &mut state).unwrap();
    let expected = -0.1 / (1.0 + 1e-8);
    assert!((model.theta.values()[0] - expected).abs() < 1e-12);
    assert_eq!(state.step, 1);
}

#[test]
fn adamw_zero_gradient_leaves_parameters_unchanged() {
    let mut model = OneParam { theta: Tensor::param(vec![0.75f64], &[1]) };
    let mut state = OptimizerState::new(0.1, 0.0);
    adamw_step(&mut model, &HashMap::new(), &mut state).unwrap();
    assert_eq!(model.theta.values()[0], 0.75);
}

#[test]
fn adamw_decoupled_decay_only() {
    let mut model = OneParam { theta: Tensor::param(vec![1.0f64], &[1]) };
    let mut state = OptimizerState::new(0.1, 0.1);
    adamw_step(&mut model, &HashMap::new(), &mut state).unwrap();
    assert!((model.theta.values()[0] - 0.99).abs() < 1e-15);
}

#[test]
fn adamw_rejects_non_finite_gradients_naming_the_parameter() {
    let mut model = OneParam { theta: Tensor::param(vec![0.0f64], &[1]) };
    let mut state = OptimizerState::new(0.1, 0.0);
    let mut grads = HashMap::new();
    grads.insert("theta".to_string(), vec![f64::NAN]);
    let err = adamw_step(&mut model, &grads, &mut state).unwrap_err();
    assert!(err.to_string().contains("theta"), "{err}");
    // The failed step must not have advanced anything.
    assert_eq!(state.step, 0);
    assert_eq!(model.theta.values()[0], 0.0);
}

fn tiny_model_cfg() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            patch_size: 4,
            stage_dims: [4, 6, 8, 12],
            stage_depths: [1, 1, 1, 1],
            state_dim: 4,
            input_channels: 3,
        },
        fpn_dim: 8,
        ppm_out: 8,
        knn_k: 5,
        bayar_filters: 3,
        bayar_kernel: 5,
        max_anchors: 1024,
        loss: LossWeights::default(),
    }
}

fn tiny_train_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        lr_init: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn two_epochs_on_eight_samples_log_two_rows_and_checkpoint_reproduces() {
    let samples = gen_dataset(10, 0.5, 32, 2024).unwrap();
    let (train, val) = (&samples[..8], &samples[8..]);
    let mut trainer = Trainer::new(tiny_model_cfg(), tiny_train_cfg(2, 7));
    let log = trainer.run(train, val).unwrap();
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));

    let ckpt_bytes = trainer.to_checkpoint().to_bytes();
    let reloaded = Trainer::from_checkpoint(&Checkpoint::from_bytes(&ckpt_bytes).unwrap()).unwrap();
    let val_orig = trainer.eval_loss(val).unwrap();
    let val_again = reloaded.eval_loss(val).unwrap();
    assert!((val_orig - val_again).abs() < 1e-6, "{val_orig} vs {val_again}");
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let samples = gen_dataset(8, 0.5, 32, 99).unwrap();
    let (train, val) = (&samples[..6], &samples[6..]);
    let run = || {
        let mut t = Trainer::new(tiny_model_cfg(), tiny_train_cfg(2, 5));
        let log = t.run(train, val).unwrap();
        (log, t.to_checkpoint().to_bytes())
    };
    let (log_a, bytes_a) = run();
    let (log_b, bytes_b) = run();
    for (a, b) in log_a.iter().zip(&log_b) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
    }
    assert_eq!(bytes_a, bytes_b);
}

#[test]
fn save_load_save_is_byte_identical() {
    let samples = gen_dataset(6, 0.5, 32, 55).unwrap();
    let mut trainer = Trainer::new(tiny_model_cfg(), tiny_train_cfg(1, 3));
    trainer.run(&samples[..4], &samples[4..]).unwrap();
    let first = trainer.to_checkpoint().to_bytes();
    let reloaded = Trainer::from_checkpoint(&Checkpoint::from_bytes(&first).unwrap()).unwrap();
    let second = reloaded.to_checkpoint().to_bytes();
    assert_eq!(first, second);
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let samples = gen_dataset(10, 0.5, 32, 404).unwrap();
    let (train, val) = (&samples[..8], &samples[8..]);

    let mut full = Trainer::new(tiny_model_cfg(), tiny_train_cfg(4, 11));
    let full_log = full.run(train, val).unwrap();

    let mut half = Trainer::new(tiny_model_cfg(), tiny_train_cfg(2, 11));
    let half_log = half.run(train, val).unwrap();
    let bytes = half.to_checkpoint().to_bytes();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.epoch, 2);
    resumed.cfg.epochs = 4;
    let resumed_log = resumed.run(train, val).unwrap();

    let merged: Vec<_> = half_log.iter().chain(&resumed_log).collect();
    assert_eq!(merged.len(), full_log.len());
    for (a, b) in merged.iter().zip(&full_log) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits(), "epoch {}", b.epoch);
        assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits(), "epoch {}", b.epoch);
    }
    // Epoch counts stored in the configs now match, so the files must too.
    resumed.cfg.epochs = 4;
    full.cfg.epochs = 4;
    assert_eq!(resumed.to_checkpoint().to_bytes(), full.to_checkpoint().to_bytes());
}

#[test]
fn checkpoint_corruption_is_detected() {
    let trainer = Trainer::new(tiny_model_cfg(), tiny_train_cfg(1, 1));
    let bytes = trainer.to_checkpoint().to_bytes();

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0xFF;
    assert!(matches!(
        Checkpoint::from_bytes(&flipped),
        Err(TrainError::Checksum { .. }) | Err(TrainError::Truncated(_)) | Err(TrainError::TensorType(_))
    ));

    let truncated = &bytes[..bytes.len() / 2];
    assert!(matches!(Checkpoint::from_bytes(truncated), Err(TrainError::Truncated(_))));

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(TrainError::BadMagic)));

    let mut bad_version = bytes;
    bad_version[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad_version), Err(TrainError::Version(9))));
}

#[test]
fn loading_into_mismatched_model_names_the_offending_tensor() {
    let trainer = Trainer::new(tiny_model_cfg(), tiny_train_cfg(1, 1));
    let ckpt = trainer.to_checkpoint();
    let mut other_cfg = tiny_model_cfg();
    other_cfg.backbone.stage_dims = [6, 8, 10, 14];
    let mut other = iml_net::ImlModel::<f32>::new(other_cfg, 0);
    let err = iml_train::load_model_params(&mut other, &ckpt).unwrap_err();
    match err {
        TrainError::TensorShape { name, .. } => {
            assert!(!name.is_empty());
        }
        other => panic!("expected shape error, got {other}"),
    }
}

#[test]
fn single_step_descends_on_a_frozen_batch() {
    let mut successes = 0;
    let trials = 100;
    for seed in 0..trials {
        let samples = gen_dataset(2, 0.5, 32, 10_000 + seed).unwrap();
        let mut trainer = Trainer::new(tiny_model_cfg(), {
            let mut c = tiny_train_cfg(1, seed);
            c.lr_init = 1e-4;
            c
        });
        let before = trainer.eval_loss(&samples).unwrap();
        trainer.step_on_batch(&samples).unwrap();
        let after = trainer.eval_loss(&samples).unwrap();
        if after < before {
            successes += 1;
        }
    }
    assert!(successes >= 95, "loss decreased in only {successes}/{trials} trials");
}

#[test]
fn bayar_constraints_hold_after_every_step() {
    let samples = gen_dataset(4, 0.5, 32, 777).unwrap();
    let mut trainer = Trainer::new(tiny_model_cfg(), tiny_train_cfg(1, 13));
    for _ in 0..5 {
        trainer.step_on_batch(&samples).unwrap();
        assert!(trainer.model.bayar.satisfies_constraints(1e-6));
    }
}

#[test]
fn empty_datasets_are_rejected() {
    let samples = gen_dataset(4, 0.5, 32, 1).unwrap();
    let mut trainer = Trainer::new(tiny_model_cfg(), tiny_train_cfg(1, 1));
    assert!(matches!(trainer.run(&[], &samples), Err(TrainError::EmptyDataset("train"))));
    assert!(matches!(trainer.run(&samples, &[]), Err(TrainError::EmptyDataset("val"))));
}

#[test]
fn log_csv_has_the_contracted_header() {
    let rows = vec![iml_train::EpochLog {
        epoch: 0,
        train_loss: 0.5,
        val_loss: 0.4,
        lr: 1e-4,
        seconds: 1.25,
    }];
    let csv = iml_train::log_csv(&rows);
    assert!(csv.starts_with("epoch,train_loss,val_loss,lr,seconds\n"));
    assert!(csv.ends_with('\n') && !csv.contains("\r\n"));
}
