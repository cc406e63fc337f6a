//! Shape plumbing between grid features (C,H,W) and token tables (H·W, C).

use iml_tensor::{Scalar, Tape, Tensor};

use crate::error::Result;

/// (C,H,W) -> (H·W, C), tokens in row-major spatial order.
pub fn to_tokens<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let flat = tape.reshape(x, &[c, h * w])?;
    Ok(tape.transpose2d(&flat)?)
}

/// (H·W, C) -> (C,H,W).
pub fn to_grid<T: Scalar>(tape: &Tape<T>, tokens: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let c = tokens.shape()[1];
    let t = tape.transpose2d(tokens)?;
    Ok(tape.reshape(&t, &[c, h, w])?)
}

/// Nearest-neighbor resize of a (C,h,w) map to (C,oh,ow), built from
/// gather_rows so it differentiates and handles non-integer ratios.
pub fn nearest_resize<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let (h, w) = (s[1], s[2]);
    if h == oh && w == ow {
        return Ok(x.clone());
    }
    let tokens = to_tokens(tape, x)?;
    let mut idx = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let iy = oy * h / oh;
        for ox in 0..ow {
            idx.push(iy * w + ox * w / ow);
        }
    }
    let gathered = tape.gather_rows(&tokens, idx)?;
    to_grid(tape, &gathered, oh, ow)
}
