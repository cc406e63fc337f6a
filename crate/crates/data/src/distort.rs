//! Test-time distortions for robustness evaluation.

use iml_tensor::SplitMix64;

use crate::error::{DataError, Result};

/// Additive seeded Gaussian noise, clamped to `[0,1]`. `std` is on the unit
/// scale (an 8-bit std of 23 is `23/255`).
pub fn gauss_noise(image: &[f32], std: f64, seed: u64) -> Vec<f32> {
    if std == 0.0 {
        return image.to_vec();
    }
    let mut rng = SplitMix64::new(seed).fork(0x4015E);
    image
        .iter()
        .map(|&v| ((v as f64 + std * rng.next_gaussian()).clamp(0.0, 1.0)) as f32)
        .collect()
}

/// Normalized Gaussian blur with σ = kernel/6 and reflect padding, applied
/// separably per channel. Kernel 1 is the identity.
pub fn gauss_blur(image: &[f32], channels: usize, h: usize, w: usize, kernel: usize) -> Result<Vec<f32>> {
    if kernel % 2 == 0 {
        return Err(DataError::EvenKernel(kernel));
    }
    if kernel == 1 {
        return Ok(image.to_vec());
    }
    let radius = kernel / 2;
    let sigma = kernel as f64 / 6.0;
    let mut weights = Vec::with_capacity(kernel);
    for i in 0..kernel {
        let d = i as f64 - radius as f64;
        weights.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = weights.iter().sum();
    for wgt in &mut weights {
        *wgt /= norm;
    }

    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i as usize
    };

    let mut horizontal = vec![0.0f32; image.len()];
    for c in 0..channels {
        let plane = &image[c * h * w..(c + 1) * h * w];
        let out = &mut horizontal[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (i, wgt) in weights.iter().enumerate() {
                    let sx = reflect(x as isize + i as isize - radius as isize, w);
                    acc += wgt * plane[y * w + sx] as f64;
                }
                out[y * w + x] = acc as f32;
            }
        }
    }
    let mut output = vec![0.0f32; image.len()];
    for c in 0..channels {
        let plane = &horizontal[c * h * w..(c + 1) * h * w];
        let out = &mut output[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (i, wgt) in weights.iter().enumerate() {
                    let sy = reflect(y as isize + i as isize - radius as isize, h);
                    acc += wgt * plane[sy * w + x] as f64;
                }
                out[y * w + x] = acc as f32;
            }
        }
    }
    Ok(output)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distortion {
    GaussNoise { std: f64 },
    GaussBlur { kernel: usize },
}

pub fn distort(image: &[f32], channels: usize, h: usize, w: usize, kind: Distortion, seed: u64) -> Result<Vec<f32>> {
    match kind {
        Distortion::GaussNoise { std } => Ok(gauss_noise(image, std, seed)),
        Distortion::GaussBlur { kernel } => gauss_blur(image, channels, h, w, kernel),
    }
}
