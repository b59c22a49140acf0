use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Mode;

pub fn rectifier(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Subgradient 0 at the kink.
pub fn rectifier_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (d, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *d = 0.0;
        }
    }
    g
}

/// Maxout over contiguous groups of `pieces` channels in the last dimension.
pub fn maxout(input: &Tensor, pieces: usize) -> Result<Tensor> {
    maxout_with_argmax(input, pieces).map(|(t, _)| t)
}

pub fn maxout_with_argmax(input: &Tensor, pieces: usize) -> Result<(Tensor, Vec<usize>)> {
    let shape = input.shape();
    let c = *shape.last().ok_or(Error::Empty("maxout"))?;
    if pieces == 0 || c % pieces != 0 {
        return Err(Error::InvalidArgument(format!(
            "maxout: {c} channels not divisible into groups of {pieces}"
        )));
    }
    let groups = input.len() / pieces;
    let mut out = Vec::with_capacity(groups);
    let mut arg = Vec::with_capacity(groups);
    for (g, chunk) in input.data().chunks_exact(pieces).enumerate() {
        let mut best = 0;
        for (j, &v) in chunk.iter().enumerate().skip(1) {
            if v > chunk[best] {
                best = j;
            }
        }
        out.push(chunk[best]);
        arg.push(g * pieces + best);
    }
    let mut out_shape = shape.to_vec();
    *out_shape.last_mut().unwrap() = c / pieces;
    Ok((Tensor::new(out_shape, out)?, arg))
}

pub fn maxout_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] = g;
    }
    dx
}

/// Inverted dropout. Returns the output and the per-unit multiplier
/// (0 or `1/(1-rate)`) needed by the backward pass. Eval mode and rate 0 are
/// the identity and consume no randomness.
pub fn dropout<R: Rng + ?Sized>(input: &Tensor, rate: f64, mode: Mode, rng: &mut R) -> Result<(Tensor, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..input.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mut out = input.clone();
    for (o, m) in out.data_mut().iter_mut().zip(&mask) {
        *o *= m;
    }
    Ok((out, Some(mask)))
}

pub fn dropout_backward(mask: Option<&[f64]>, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    if let Some(mask) = mask {
        for (d, m) in g.data_mut().iter_mut().zip(mask) {
            *d *= m;
        }
    }
    g
}
