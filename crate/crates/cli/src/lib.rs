//! Command-line entry point binding dataset synthesis, training,
//! evaluation, prediction, and receptive-field export.
//!
//! Exit codes: 0 success, 1 usage error, 2 I/O or parse failure,
//! 3 numerical failure (non-finite loss).

mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use iml_data::{gen_dataset, pnm, read_dataset, read_index, write_dataset, Sample};
use iml_metrics::{pixel_f1, EvalReport, SampleRow, DETECTION_THRESHOLD};
use iml_net::{compute_erf, ImlModel};
use iml_tensor::{Tape, Tensor};
use iml_train::{log_csv, model_from_checkpoint, split_train_val, Checkpoint, TrainError, Trainer};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "iml",
    about = "Image manipulation localization: synthesize data, train, evaluate, predict",
    after_help = concat!("Config file keys (key=value, one per line):\n{}", ""),
    disable_help_subcommand = true
)]
struct Cli {
    /// Run single-threaded. Outputs are identical either way; this only
    /// trades speed for minimal resource use.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic dataset with exact ground-truth masks.
    Synth {
        /// Output directory (images/, masks/, index.csv).
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        count: usize,
        /// Fraction of manipulated samples.
        #[arg(long, default_value_t = 0.5)]
        fake_ratio: f64,
        /// Square image extent (multiple of 32).
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write the best-validation checkpoint.
    Train {
        /// key=value config file; flags override file values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation dataset directory (default: a 9:1 carve of --data).
        #[arg(long)]
        val: Option<PathBuf>,
        /// Checkpoint output path; the epoch log goes next to it as .csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Evaluate a checkpoint on a dataset and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Predict a binarized manipulation mask for one image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the effective receptive field over probe images as a heat map.
    Erf {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of probe images (*.ppm, or a dataset root).
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum RunError {
    Io(String),
    Numeric(String),
}

impl RunError {
    fn code(&self) -> i32 {
        match self {
            RunError::Io(_) => EXIT_IO,
            RunError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            RunError::Io(m) | RunError::Numeric(m) => m,
        }
    }
}

fn classify_train(err: TrainError) -> RunError {
    match err {
        TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient(_) => {
            RunError::Numeric(err.to_string())
        }
        other => RunError::Io(other.to_string()),
    }
}

impl From<iml_data::DataError> for RunError {
    fn from(e: iml_data::DataError) -> Self {
        RunError::Io(e.to_string())
    }
}

impl From<iml_net::NetError> for RunError {
    fn from(e: iml_net::NetError) -> Self {
        RunError::Io(e.to_string())
    }
}

impl From<iml_tensor::TensorError> for RunError {
    fn from(e: iml_tensor::TensorError) -> Self {
        RunError::Io(e.to_string())
    }
}

/// Parse argv and execute; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; anything else is usage.
            use clap::error::ErrorKind;
            let kind = e.kind();
            if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprint!("{e}");
            return EXIT_USAGE;
        }
    };
    if cli.deterministic {
        // One worker; results are identical to the parallel path by
        // construction, only slower.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let result = match cli.cmd {
        Cmd::Synth { out, count, fake_ratio, size, seed } => cmd_synth(&out, count, fake_ratio, size, seed),
        Cmd::Train { config, data, val, out, epochs, batch_size, lr, seed, gamma } => {
            cmd_train(config.as_deref(), data.as_deref(), val.as_deref(), &out, epochs, batch_size, lr, seed, gamma)
        }
        Cmd::Eval { ckpt, data, report } => cmd_eval(&ckpt, &data, &report),
        Cmd::Predict { ckpt, image, out } => cmd_predict(&ckpt, &image, &out),
        Cmd::Erf { ckpt, probes, out } => cmd_erf(&ckpt, &probes, &out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn cmd_synth(out: &Path, count: usize, fake_ratio: f64, size: usize, seed: u64) -> Result<(), RunError> {
    if size == 0 || size % 32 != 0 {
        return Err(RunError::Io(format!("--size must be a positive multiple of 32, got {size}")));
    }
    if !(0.0..=1.0).contains(&fake_ratio) {
        return Err(RunError::Io(format!("--fake-ratio must be in [0,1], got {fake_ratio}")));
    }
    let samples = gen_dataset(count, fake_ratio, size, seed)?;
    write_dataset(&samples, out)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<&Path>,
    data: Option<&Path>,
    val: Option<&Path>,
    out: &Path,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    gamma: Option<f64>,
) -> Result<(), RunError> {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    // Flags win over file values.
    if let Some(v) = epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = lr {
        cfg.train.lr_init = v;
    }
    if let Some(v) = seed {
        cfg.train.seed = v;
    }
    if let Some(v) = gamma {
        cfg.model.loss.gamma = v;
        cfg.train.loss.gamma = v;
    }

    let train_dir = data
        .map(|p| p.to_path_buf())
        .or_else(|| cfg.train_data.as_ref().map(PathBuf::from))
        .ok_or_else(|| RunError::Io("no training data: pass --data or set train_data in the config".into()))?;
    let train_samples = read_dataset(&train_dir)?;
    let val_dir = val.map(|p| p.to_path_buf()).or_else(|| cfg.val_data.as_ref().map(PathBuf::from));
    let (train_samples, val_samples) = match val_dir {
        Some(dir) => (train_samples, read_dataset(&dir)?),
        None => split_train_val(train_samples, cfg.train.seed),
    };

    let mut trainer = Trainer::new(cfg.model.clone(), cfg.train.clone());
    let log = trainer.run(&train_samples, &val_samples).map_err(classify_train)?;

    let bytes = trainer
        .best_checkpoint
        .clone()
        .unwrap_or_else(|| trainer.to_checkpoint().to_bytes());
    std::fs::write(out, bytes).map_err(|e| RunError::Io(format!("{}: {e}", out.display())))?;
    let log_path = out.with_extension("csv");
    std::fs::write(&log_path, log_csv(&log)).map_err(|e| RunError::Io(format!("{}: {e}", log_path.display())))?;
    println!(
        "trained {} epochs; best val loss {:.6}; checkpoint {}; log {}",
        log.len(),
        trainer.best_val.unwrap_or(f64::NAN),
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<ImlModel<f32>, RunError> {
    let checkpoint = Checkpoint::read(ckpt).map_err(classify_train)?;
    model_from_checkpoint(&checkpoint).map_err(classify_train)
}

/// Forward one sample in inference mode; returns (mask probabilities, score).
fn predict_sample(model: &ImlModel<f32>, sample: &Sample) -> Result<(Vec<f32>, f64), RunError> {
    let tape = Tape::inference();
    let image = Tensor::from_vec(sample.image.clone(), &[3, sample.h, sample.w]);
    let out = model.forward(&tape, &image, None)?;
    let probs = tape.sigmoid(&out.mask_logits)?;
    let score = tape.sigmoid(&out.det_logit)?.item() as f64;
    Ok((probs.values().to_vec(), score))
}

fn cmd_eval(ckpt: &Path, data: &Path, report: &Path) -> Result<(), RunError> {
    let model = load_model(ckpt)?;
    let index = read_index(data)?;
    let mut rows = Vec::with_capacity(index.rows.len());
    for row in &index.rows {
        let sample = iml_data::load_row(&index, row)?;
        let (probs, score) = predict_sample(&model, &sample)?;
        let pf1 = pixel_f1(&probs, &sample.mask, DETECTION_THRESHOLD)
            .map_err(|e| RunError::Io(e.to_string()))?;
        rows.push(SampleRow {
            id: row.image.clone(),
            label: sample.label,
            pixel_f1: pf1,
            pred_label: (score >= DETECTION_THRESHOLD) as u8,
            score,
        });
    }
    let eval = EvalReport::from_rows(rows).map_err(|e| RunError::Io(e.to_string()))?;
    std::fs::write(report, eval.to_json()).map_err(|e| RunError::Io(format!("{}: {e}", report.display())))?;
    println!(
        "pixel_f1 {:?} image_f1 {:.4} auc {:?} over {} samples",
        eval.pixel_f1,
        eval.image_f1,
        eval.image_auc,
        eval.rows.len()
    );
    Ok(())
}

fn cmd_predict(ckpt: &Path, image: &Path, out: &Path) -> Result<(), RunError> {
    let model = load_model(ckpt)?;
    let (pixels, h, w) = pnm::read_ppm(image)?;
    let sample = Sample {
        image: pixels,
        mask: vec![0; h * w],
        label: 0,
        seed: 0,
        h,
        w,
    };
    let (probs, _) = predict_sample(&model, &sample)?;
    let binary: Vec<u8> = probs.iter().map(|&p| (p as f64 >= DETECTION_THRESHOLD) as u8).collect();
    pnm::write_pgm(out, &binary, h, w)?;
    Ok(())
}

fn cmd_erf(ckpt: &Path, probes_dir: &Path, out: &Path) -> Result<(), RunError> {
    let model = load_model(ckpt)?;
    let probes = collect_probes(probes_dir)?;
    if probes.is_empty() {
        return Err(RunError::Io(format!("no .ppm probes under {}", probes_dir.display())));
    }
    let tensors: Vec<Tensor<f32>> = probes
        .iter()
        .map(|(image, h, w)| Tensor::from_vec(image.clone(), &[3, *h, *w]))
        .collect();
    let map = compute_erf(&|tape, x| model.fused_level4(tape, x), &tensors)?;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    pnm::write_pgm_heatmap(out, map.values(), h, w)?;
    println!("erf over {} probes -> {}", tensors.len(), out.display());
    Ok(())
}

fn collect_probes(dir: &Path) -> Result<Vec<(Vec<f32>, usize, usize)>, RunError> {
    let mut paths = Vec::new();
    for root in [dir.to_path_buf(), dir.join("images")] {
        if let Ok(entries) = std::fs::read_dir(&root) {
            for entry in entries.flatten() {
                let path = entry.path();
                if path.extension().is_some_and(|e| e == "ppm") {
                    paths.push(path);
                }
            }
        }
    }
    paths.sort();
    let mut probes = Vec::with_capacity(paths.len());
    for path in paths {
        probes.push(pnm::read_ppm(&path)?);
    }
    Ok(probes)
}
