//! Finite-difference verification of every primitive's gradient on random
//! shapes, in double precision.

use iml_tensor::{grad_check, OpAttrs, Primitive, SplitMix64, Tape, Tensor};

const TRIALS: usize = 50;
const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

/// Random values bounded away from zero so kinked primitives (relu, max,
/// guards) are differentiable at the sample point.
fn sample_away_from_zero(rng: &mut SplitMix64, n: usize, min_abs: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.uniform(min_abs, 2.0);
            if rng.next_bool() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn sample_smooth(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect()
}

fn sample_positive(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(0.2, 3.0)).collect()
}

fn small_shape(rng: &mut SplitMix64) -> Vec<usize> {
    let rank = 1 + rng.usize_below(3);
    (0..rank).map(|_| 1 + rng.usize_below(5)).collect()
}

/// Weighted sum of the op output so the upstream gradient is non-uniform.
fn weighted_scalar(
    tape: &Tape<f64>,
    out: &Tensor<f64>,
    weights: &Tensor<f64>,
) -> iml_tensor::Result<Tensor<f64>> {
    let prod = tape.mul(out, weights)?;
    tape.reduce_sum(&prod)
}

/// Check the gradient of `op(inputs...)` w.r.t. input `vary`, holding the
/// others fixed. The scalar objective is a random weighted sum of the output.
fn check_op(
    prim: Primitive,
    attrs: OpAttrs,
    inputs: &[Tensor<f64>],
    vary: usize,
    rng: &mut SplitMix64,
) {
    let probe = Tape::<f64>::inference();
    let views: Vec<&Tensor<f64>> = inputs.iter().collect();
    let out = probe
        .record_op(prim, &views, attrs.clone())
        .unwrap_or_else(|e| panic!("{}: forward failed: {e}", prim.name()));
    let weights = Tensor::from_vec(sample_smooth(rng, out.numel()), out.shape());

    let report = grad_check(
        |tape, x| {
            let mut owned: Vec<Tensor<f64>> = inputs.to_vec();
            owned[vary] = x.clone();
            let refs: Vec<&Tensor<f64>> = owned.iter().collect();
            let y = tape.record_op(prim, &refs, attrs.clone())?;
            weighted_scalar(tape, &y, &weights)
        },
        &inputs[vary],
        STEP,
        REL_TOL,
    )
    .unwrap_or_else(|e| panic!("{}: grad check errored: {e}", prim.name()));
    assert!(
        report.pass,
        "{}: max rel err {} over {} components",
        prim.name(),
        report.max_rel_err,
        report.components
    );
}

#[test]
fn binary_elementwise_gradients() {
    let mut rng = SplitMix64::new(0x01);
    for prim in [Primitive::Add, Primitive::Sub, Primitive::Mul, Primitive::Div] {
        for trial in 0..TRIALS {
            let shape = small_shape(&mut rng);
            let n: usize = shape.iter().product();
            let a = Tensor::from_vec(sample_smooth(&mut rng, n), &shape);
            // Denominators away from the guard band.
            let b = Tensor::from_vec(sample_away_from_zero(&mut rng, n, 0.3), &shape);
            check_op(prim, OpAttrs::none(), &[a.clone(), b.clone()], trial % 2, &mut rng);

            // Broadcast variant: second operand keeps only the last axis.
            if shape.len() > 1 {
                let d = *shape.last().unwrap();
                let bb = Tensor::from_vec(sample_away_from_zero(&mut rng, d, 0.3), &[d]);
                check_op(prim, OpAttrs::none(), &[a, bb], trial % 2, &mut rng);
            }
        }
    }
}

#[test]
fn unary_elementwise_gradients() {
    let mut rng = SplitMix64::new(0x02);
    for prim in [
        Primitive::Neg,
        Primitive::Exp,
        Primitive::Log,
        Primitive::Sqrt,
        Primitive::Relu,
        Primitive::Sigmoid,
    ] {
        for _ in 0..TRIALS {
            let shape = small_shape(&mut rng);
            let n: usize = shape.iter().product();
            let data = match prim {
                Primitive::Log | Primitive::Sqrt => sample_positive(&mut rng, n),
                Primitive::Relu => sample_away_from_zero(&mut rng, n, 0.1),
                _ => sample_smooth(&mut rng, n),
            };
            check_op(prim, OpAttrs::none(), &[Tensor::from_vec(data, &shape)], 0, &mut rng);
        }
    }
}

#[test]
fn matmul_gradients() {
    let mut rng = SplitMix64::new(0x03);
    for trial in 0..TRIALS {
        let (m, k, n) = (
            1 + rng.usize_below(5),
            1 + rng.usize_below(5),
            1 + rng.usize_below(5),
        );
        let a = Tensor::from_vec(sample_smooth(&mut rng, m * k), &[m, k]);
        let b = Tensor::from_vec(sample_smooth(&mut rng, k * n), &[k, n]);
        check_op(Primitive::MatMul, OpAttrs::none(), &[a, b], trial % 2, &mut rng);
    }
}

#[test]
fn conv2d_gradients() {
    let mut rng = SplitMix64::new(0x04);
    for trial in 0..TRIALS {
        let c = 1 + rng.usize_below(3);
        let o = 1 + rng.usize_below(3);
        let k = [1, 2, 3][rng.usize_below(3)];
        let stride = 1 + rng.usize_below(2);
        let pad = rng.usize_below(2);
        let h = k + rng.usize_below(4);
        let w = k + rng.usize_below(4);
        let x = Tensor::from_vec(sample_smooth(&mut rng, c * h * w), &[c, h, w]);
        let kern = Tensor::from_vec(sample_smooth(&mut rng, o * c * k * k), &[o, c, k, k]);
        check_op(Primitive::Conv2d, OpAttrs::conv(stride, pad), &[x, kern], trial % 2, &mut rng);
    }
}

#[test]
fn pooling_and_upsample_gradients() {
    let mut rng = SplitMix64::new(0x05);
    for _ in 0..TRIALS {
        let c = 1 + rng.usize_below(3);
        let h = 2 + rng.usize_below(5);
        let w = 2 + rng.usize_below(5);
        let x = Tensor::from_vec(sample_smooth(&mut rng, c * h * w), &[c, h, w]);
        let oh = 1 + rng.usize_below(h);
        let ow = 1 + rng.usize_below(w);
        check_op(Primitive::AvgPool2d, OpAttrs::pool(oh, ow), &[x.clone()], 0, &mut rng);
        check_op(Primitive::GlobalAvgPool, OpAttrs::none(), &[x.clone()], 0, &mut rng);
        let f = 1 + rng.usize_below(3);
        check_op(Primitive::NearestUpsample2d, OpAttrs::upsample(f), &[x], 0, &mut rng);
    }
}

#[test]
fn concat_and_gather_gradients() {
    let mut rng = SplitMix64::new(0x06);
    for trial in 0..TRIALS {
        let d0 = 1 + rng.usize_below(4);
        let d1 = 1 + rng.usize_below(4);
        let axis = rng.usize_below(2);
        let mut s_a = vec![d0, d1];
        let mut s_b = vec![d0, d1];
        s_a[axis] = 1 + rng.usize_below(3);
        s_b[axis] = 1 + rng.usize_below(3);
        let a = Tensor::from_vec(sample_smooth(&mut rng, s_a.iter().product()), &s_a);
        let b = Tensor::from_vec(sample_smooth(&mut rng, s_b.iter().product()), &s_b);
        check_op(Primitive::Concat, OpAttrs::axis(axis), &[a, b], trial % 2, &mut rng);

        let m = 2 + rng.usize_below(5);
        let d = 1 + rng.usize_below(4);
        let x = Tensor::from_vec(sample_smooth(&mut rng, m * d), &[m, d]);
        // Repeated indices exercise gradient accumulation in the scatter.
        let k = 1 + rng.usize_below(6);
        let idx: Vec<usize> = (0..k).map(|_| rng.usize_below(m)).collect();
        check_op(Primitive::GatherRows, OpAttrs::gather(idx), &[x], 0, &mut rng);
    }
}

#[test]
fn reduction_gradients() {
    let mut rng = SplitMix64::new(0x07);
    for _ in 0..TRIALS {
        let shape = small_shape(&mut rng);
        let n: usize = shape.iter().product();
        let x = Tensor::from_vec(sample_smooth(&mut rng, n), &shape);
        // Reductions already give scalars; check them directly.
        for prim in [Primitive::ReduceSum, Primitive::ReduceMean] {
            let report = grad_check(
                |tape, p| tape.record_op(prim, &[p], OpAttrs::none()),
                &x,
                STEP,
                REL_TOL,
            )
            .unwrap();
            assert!(report.pass, "{}: {}", prim.name(), report.max_rel_err);
        }
    }
}

#[test]
fn max_stack_gradients() {
    let mut rng = SplitMix64::new(0x08);
    for _ in 0..TRIALS {
        let shape = vec![
            2 + rng.usize_below(3),
            1 + rng.usize_below(4),
            1 + rng.usize_below(4),
        ];
        let n: usize = shape.iter().product();
        // Distinct values with clear gaps so the argmax is stable under the
        // finite-difference step.
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let data: Vec<f64> = order.iter().map(|&r| r as f64 * 0.25 - 1.0).collect();
        let axis = rng.usize_below(shape.len());
        check_op(Primitive::MaxStack, OpAttrs::axis(axis), &[Tensor::from_vec(data, &shape)], 0, &mut rng);
    }
}

#[test]
fn layer_norm_gradients() {
    let mut rng = SplitMix64::new(0x09);
    for trial in 0..TRIALS {
        let rows = 1 + rng.usize_below(4);
        let d = 2 + rng.usize_below(5);
        let x = Tensor::from_vec(sample_smooth(&mut rng, rows * d), &[rows, d]);
        let gamma = Tensor::from_vec(sample_away_from_zero(&mut rng, d, 0.2), &[d]);
        let beta = Tensor::from_vec(sample_smooth(&mut rng, d), &[d]);
        check_op(
            Primitive::LayerNorm,
            OpAttrs::layer_norm(1e-5),
            &[x, gamma, beta],
            trial % 3,
            &mut rng,
        );
    }
}

#[test]
fn shape_plumbing_gradients() {
    let mut rng = SplitMix64::new(0x0A);
    for _ in 0..TRIALS {
        let m = 1 + rng.usize_below(4);
        let n = 1 + rng.usize_below(4);
        let x = Tensor::from_vec(sample_smooth(&mut rng, m * n), &[m, n]);
        check_op(Primitive::Reshape, OpAttrs::reshape(vec![n * m]), &[x.clone()], 0, &mut rng);
        check_op(Primitive::Transpose2d, OpAttrs::none(), &[x], 0, &mut rng);
    }
}
