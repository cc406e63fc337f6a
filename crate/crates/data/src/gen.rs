//! Procedural authentic images and shallowfake-style manipulations with
//! exact ground-truth masks.
//!
//! Generation is a pure function of the seed. The image math sticks to
//! rational arithmetic (no transcendentals), so identical seeds produce
//! bit-identical samples on every platform.

use iml_tensor::SplitMix64;

use crate::error::{DataError, Result};

/// One dataset unit: image in `[0,1]`, binary mask (1 = manipulated pixel),
/// image-level label, and the seed that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// (3, H, W) row-major.
    pub image: Vec<f32>,
    /// (H, W); 1 marks manipulated pixels.
    pub mask: Vec<u8>,
    /// 1 = fake. Always equals `mask contains a positive`.
    pub label: u8,
    pub seed: u64,
    pub h: usize,
    pub w: usize,
}

impl Sample {
    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        self.image[(c * self.h + y) * self.w + x]
    }

    pub fn mask_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m != 0).count() as f64 / (self.h * self.w) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Manipulation {
    Splice,
    CopyMove,
    Inpaint,
}

impl Manipulation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "splice" => Some(Manipulation::Splice),
            "copy_move" => Some(Manipulation::CopyMove),
            "inpaint" => Some(Manipulation::Inpaint),
            _ => None,
        }
    }
}

fn clamp01(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

/// The sensor-grain amplitude an authentic image generated from `seed`
/// carries; a pure function of the seed so donor pairing can reason about
/// grain contrast without rendering the image.
pub fn grain_amplitude(seed: u64) -> f64 {
    SplitMix64::new(seed).fork(0x66A1).uniform(0.01, 0.10)
}

/// Deterministic authentic image: a linear color gradient, 3–8 soft shapes,
/// and low-amplitude value noise.
pub fn gen_authentic(h: usize, w: usize, seed: u64) -> Sample {
    assert!(h % 32 == 0 && w % 32 == 0, "extents must be multiples of 32");
    let mut rng = SplitMix64::new(seed).fork(0xA07);
    let mut image = vec![0.0f32; 3 * h * w];

    // Base gradient between two random colors along a random direction.
    let c0: [f64; 3] = [rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)];
    let c1: [f64; 3] = [rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)];
    let gx = rng.uniform(-1.0, 1.0);
    let gy = rng.uniform(-1.0, 1.0);
    let span = gx.abs() * (w as f64 - 1.0) + gy.abs() * (h as f64 - 1.0) + 1e-9;
    for y in 0..h {
        for x in 0..w {
            let mut t = (gx * x as f64 + gy * y as f64) / span;
            t = (t + 1.0) * 0.5;
            for c in 0..3 {
                image[(c * h + y) * w + x] = clamp01(c0[c] + (c1[c] - c0[c]) * t);
            }
        }
    }

    // Soft random shapes composited over the gradient.
    let shapes = 3 + rng.usize_below(6);
    for _ in 0..shapes {
        let color: [f64; 3] = [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)];
        let cx = rng.uniform(0.0, w as f64);
        let cy = rng.uniform(0.0, h as f64);
        let rx = rng.uniform(w as f64 / 10.0, w as f64 / 3.0);
        let ry = rng.uniform(h as f64 / 10.0, h as f64 / 3.0);
        let rectangular = rng.next_bool();
        let opacity = rng.uniform(0.5, 1.0);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                // Normalized squared distance to the shape boundary.
                let v = if rectangular { dx.abs().max(dy.abs()) } else { (dx * dx + dy * dy).sqrt() };
                // Soft edge roughly two pixels wide.
                let edge = 2.0 / rx.min(ry);
                let alpha = ((1.0 - v) / edge).clamp(0.0, 1.0) * opacity;
                if alpha > 0.0 {
                    for c in 0..3 {
                        let idx = (c * h + y) * w + x;
                        let base = image[idx] as f64;
                        image[idx] = clamp01(base + (color[c] - base) * alpha);
                    }
                }
            }
        }
    }

    // Value-noise texture: random coarse grid, bilinear interpolation.
    let grid = 8usize;
    let amplitude = 0.04;
    let gw = w / grid + 2;
    let gh = h / grid + 2;
    let lattice: Vec<f64> = (0..3 * gh * gw).map(|_| rng.uniform(-1.0, 1.0)).collect();
    for c in 0..3 {
        for y in 0..h {
            let fy = y as f64 / grid as f64;
            let y0 = fy as usize;
            let ty = fy - y0 as f64;
            for x in 0..w {
                let fx = x as f64 / grid as f64;
                let x0 = fx as usize;
                let tx = fx - x0 as f64;
                let at = |yy: usize, xx: usize| lattice[(c * gh + yy) * gw + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                let n = top * (1.0 - ty) + bot * ty;
                let idx = (c * h + y) * w + x;
                image[idx] = clamp01(image[idx] as f64 + amplitude * n);
            }
        }
    }

    // Per-image fine grain: every authentic image carries its own pixel
    // noise amplitude, the way every camera carries its own sensor noise.
    // Pasted content brings the donor's grain along, which is the cue
    // noise-residual forensics lives on.
    let grain = grain_amplitude(seed);
    for v in image.iter_mut() {
        *v = clamp01(*v as f64 + grain * rng.uniform(-1.0, 1.0));
    }

    Sample {
        image,
        mask: vec![0; h * w],
        label: 0,
        seed,
        h,
        w,
    }
}

/// Rasterized paste region, fully inside the frame.
struct Region {
    mask: Vec<bool>,
    /// Feather alpha in [0,1]: 1 deep inside, <1 on the 2-px inner band.
    alpha: Vec<f32>,
    area: usize,
}

fn raster_region(rng: &mut SplitMix64, h: usize, w: usize) -> Region {
    loop {
        let total = (h * w) as f64;
        let frac = rng.uniform(0.07, 0.38);
        let aspect = rng.uniform(0.6, 1.7);
        let rectangular = rng.next_bool();
        let (rh, rw) = {
            let area = frac * total / if rectangular { 1.0 } else { std::f64::consts::FRAC_PI_4 };
            let rh = (area * aspect).sqrt().round().max(4.0) as usize;
            let rw = (area / aspect).sqrt().round().max(4.0) as usize;
            (rh.min(h - 2), rw.min(w - 2))
        };
        let y0 = 1 + rng.usize_below(h - rh - 1);
        let x0 = 1 + rng.usize_below(w - rw - 1);
        let mut mask = vec![false; h * w];
        let mut area = 0usize;
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                let inside = if rectangular {
                    true
                } else {
                    let dy = (y as f64 - (y0 as f64 + rh as f64 / 2.0)) / (rh as f64 / 2.0);
                    let dx = (x as f64 - (x0 as f64 + rw as f64 / 2.0)) / (rw as f64 / 2.0);
                    dy * dy + dx * dx <= 1.0
                };
                if inside {
                    mask[y * w + x] = true;
                    area += 1;
                }
            }
        }
        let got = area as f64 / total;
        if !(0.05..=0.40).contains(&got) {
            continue;
        }
        // Chamfer depth: distance in erosion steps from the outside.
        let mut depth = vec![0u8; h * w];
        for pass in 1u8..=2 {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if !mask[i] || depth[i] != pass - 1 {
                        continue;
                    }
                    // stays at pass-1 only if it borders a shallower cell
                    let mut shallow = false;
                    for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            shallow = true;
                            break;
                        }
                        let ni = ny as usize * w + nx as usize;
                        if !mask[ni] || depth[ni] < pass - 1 {
                            shallow = true;
                            break;
                        }
                    }
                    if !shallow {
                        depth[i] = pass;
                    }
                }
            }
        }
        let alpha = depth
            .iter()
            .zip(&mask)
            .map(|(&d, &m)| if !m { 0.0 } else { (d as f32 + 1.0) / 3.0 })
            .collect();
        return Region { mask, alpha, area };
    }
}

fn blend_region(base: &mut [f32], source: &[f32], region: &Region, h: usize, w: usize) {
    for c in 0..3 {
        for i in 0..h * w {
            if region.mask[i] {
                let a = region.alpha[i];
                let idx = c * h * w + i;
                base[idx] = base[idx] * (1.0 - a) + source[idx] * a;
            }
        }
    }
}

fn mean_abs_region_diff(a: &[f32], b: &[f32], region: &Region, hw: usize) -> f64 {
    let mut acc = 0.0f64;
    for c in 0..3 {
        for i in 0..hw {
            if region.mask[i] {
                acc += (a[c * hw + i] - b[c * hw + i]).abs() as f64;
            }
        }
    }
    acc / (3 * region.area) as f64
}

/// 3×3 binomial smoothing of the masked area (rational weights, portable).
fn smooth_inside(image: &mut [f32], mask: &[bool], h: usize, w: usize, passes: usize) {
    let hw = h * w;
    for _ in 0..passes {
        let snapshot = image.to_vec();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    if !mask[y * w + x] {
                        continue;
                    }
                    let mut acc = 0.0f64;
                    let mut norm = 0.0f64;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (ny, nx) = (y as isize + dy, x as isize + dx);
                            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                                continue;
                            }
                            let wgt = (2 - dy.abs()) as f64 * (2 - dx.abs()) as f64;
                            acc += wgt * snapshot[c * hw + ny as usize * w + nx as usize] as f64;
                            norm += wgt;
                        }
                    }
                    image[c * hw + y * w + x] = (acc / norm) as f32;
                }
            }
        }
    }
}

/// Fill the region from its surroundings: iterative averaging of known
/// neighbors (Jacobi sweeps), then binomial smoothing.
fn background_fill(base: &[f32], region: &Region, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut filled = base.to_vec();
    let mut known: Vec<bool> = region.mask.iter().map(|&m| !m).collect();
    let mut frontier_exists = true;
    while frontier_exists {
        frontier_exists = false;
        let snap = filled.clone();
        let known_snap = known.clone();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if known_snap[i] {
                    continue;
                }
                let mut acc = [0.0f64; 3];
                let mut count = 0.0f64;
                for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let ni = ny as usize * w + nx as usize;
                    if known_snap[ni] {
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += snap[c * hw + ni] as f64;
                        }
                        count += 1.0;
                    }
                }
                if count > 0.0 {
                    for (c, a) in acc.iter().enumerate() {
                        filled[c * hw + i] = (*a / count) as f32;
                    }
                    known[i] = true;
                    frontier_exists = true;
                }
            }
        }
    }
    smooth_inside(&mut filled, &region.mask, h, w, 3);
    filled
}

/// Manipulate an authentic base image. The mask marks exactly the pasted
/// region; feathering touches the image only, never the mask.
pub fn gen_manipulated(base: &Sample, donor: &Sample, kind: Manipulation, seed: u64) -> Result<Sample> {
    if base.h != donor.h || base.w != donor.w {
        return Err(DataError::SizeMismatch(base.h, base.w, donor.h, donor.w));
    }
    let (h, w) = (base.h, base.w);
    let hw = h * w;
    // Resample until the manipulated content is measurably different from
    // what the base held there, so the task stays learnable.
    for attempt in 0..64u64 {
        let mut rng = SplitMix64::new(seed).fork(0xFA4E + attempt);
        let region = raster_region(&mut rng, h, w);
        let source: Vec<f32> = match kind {
            Manipulation::Splice => donor.image.clone(),
            Manipulation::CopyMove => {
                // Shift base content; destination region must not overlap its
                // source footprint.
                let mut ok = None;
                for _ in 0..50 {
                    let dy = rng.uniform(-(h as f64) / 2.0, h as f64 / 2.0) as isize;
                    let dx = rng.uniform(-(w as f64) / 2.0, w as f64 / 2.0) as isize;
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let mut fits = true;
                    let mut overlaps = false;
                    for y in 0..h {
                        for x in 0..w {
                            if region.mask[y * w + x] {
                                let (sy, sx) = (y as isize + dy, x as isize + dx);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    fits = false;
                                } else if region.mask[sy as usize * w + sx as usize] {
                                    overlaps = true;
                                }
                            }
                            if !fits {
                                break;
                            }
                        }
                        if !fits {
                            break;
                        }
                    }
                    if fits && !overlaps {
                        ok = Some((dy, dx));
                        break;
                    }
                }
                let Some((dy, dx)) = ok else { continue };
                let mut src = base.image.clone();
                for y in 0..h {
                    for x in 0..w {
                        if region.mask[y * w + x] {
                            let (sy, sx) = ((y as isize + dy) as usize, (x as isize + dx) as usize);
                            for c in 0..3 {
                                src[c * hw + y * w + x] = base.image[c * hw + sy * w + sx];
                            }
                        }
                    }
                }
                src
            }
            Manipulation::Inpaint => background_fill(&base.image, &region, h, w),
        };

        let mut image = base.image.clone();
        blend_region(&mut image, &source, &region, h, w);
        // Learnability gate on the final pixels, feather included.
        if mean_abs_region_diff(&image, &base.image, &region, hw) <= 0.02 {
            continue;
        }
        let mask: Vec<u8> = region.mask.iter().map(|&m| m as u8).collect();
        return Ok(Sample {
            image,
            mask,
            label: 1,
            seed,
            h,
            w,
        });
    }
    // 64 independent attempts failing means the base image is degenerate for
    // this manipulation; surface it rather than emit an unlearnable sample.
    Err(DataError::Degenerate(format!(
        "could not synthesize a distinguishable {kind:?} region for seed {seed}"
    )))
}

/// Independent vertical/horizontal flips with probability 0.5 each; image
/// and mask flip together, the label is untouched.
pub fn augment_flip(s: &Sample, seed: u64) -> Sample {
    let mut rng = SplitMix64::new(seed).fork(0xF11B);
    let flip_v = rng.next_bool();
    let flip_h = rng.next_bool();
    apply_flip(s, flip_v, flip_h)
}

pub fn apply_flip(s: &Sample, flip_v: bool, flip_h: bool) -> Sample {
    let (h, w) = (s.h, s.w);
    let mut out = s.clone();
    if !flip_v && !flip_h {
        return out;
    }
    for y in 0..h {
        let sy = if flip_v { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if flip_h { w - 1 - x } else { x };
            out.mask[y * w + x] = s.mask[sy * w + sx];
            for c in 0..3 {
                out.image[(c * h + y) * w + x] = s.image[(c * h + sy) * w + sx];
            }
        }
    }
    out
}

/// Generate a full dataset: `count` samples, `fake_ratio` of them
/// manipulated (kinds cycle through splice/copy-move/inpaint), fake
/// positions spread deterministically by the seed.
pub fn gen_dataset(count: usize, fake_ratio: f64, size: usize, seed: u64) -> Result<Vec<Sample>> {
    let n_fake = (count as f64 * fake_ratio).round() as usize;
    let mut order: Vec<usize> = (0..count).collect();
    SplitMix64::new(seed).fork(0x0D0E).shuffle(&mut order);
    let fake_slots: std::collections::HashSet<usize> = order.into_iter().take(n_fake).collect();
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let sample_seed = SplitMix64::new(seed).fork(1_000_000 + i as u64).next_u64();
        let base = gen_authentic(size, size, sample_seed);
        if fake_slots.contains(&i) {
            // Donors are re-drawn until their grain visibly exceeds the
            // base's, mirroring how spliced content rarely shares the source
            // camera's noise profile. Splices dominate the mix; copy-moves
            // (which leave no noise-statistics trace at image level) stay a
            // minority, as in the shallowfake corpora this stands in for.
            let mut donor_picker = SplitMix64::new(seed).fork(2_000_000 + i as u64);
            let target = (grain_amplitude(sample_seed) + 0.03).min(0.085);
            let mut donor_seed = donor_picker.next_u64();
            let mut best = donor_seed;
            for _ in 0..10_000 {
                if grain_amplitude(donor_seed) >= target {
                    break;
                }
                if grain_amplitude(donor_seed) > grain_amplitude(best) {
                    best = donor_seed;
                }
                donor_seed = donor_picker.next_u64();
            }
            if grain_amplitude(donor_seed) < target {
                donor_seed = best;
            }
            let donor = gen_authentic(size, size, donor_seed);
            let kind = match i % 10 {
                0..=4 => Manipulation::Splice,
                5 | 6 => Manipulation::CopyMove,
                _ => Manipulation::Inpaint,
            };
            samples.push(gen_manipulated(&base, &donor, kind, sample_seed)?);
        } else {
            samples.push(base);
        }
    }
    Ok(samples)
}
