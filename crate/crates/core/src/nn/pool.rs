use crate::error::{Error, Result};
use crate::tensor::Tensor;

const WINDOW: usize = 2;

/// 2×2 max pooling. Windows start at multiples of `stride` and are clipped to
/// the input, so the output extent is `ceil(n / stride)` for both strides.
pub fn max_pool2d(input: &Tensor, stride: usize) -> Result<Tensor> {
    max_pool2d_with_argmax(input, stride).map(|(t, _)| t)
}

/// Like [`max_pool2d`] but also returns, per output cell, the flat input
/// index of the selected element. Ties keep the first element in row-major
/// scan order of the window.
pub fn max_pool2d_with_argmax(input: &Tensor, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = input.hwc()?;
    if !(1..=2).contains(&stride) {
        return Err(Error::InvalidArgument(format!("max_pool2d stride must be 1 or 2, got {stride}")));
    }
    if input.is_empty() {
        return Err(Error::Empty("max_pool2d"));
    }
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let src = input.data();
    let mut out = vec![0.0; oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        let y0 = oy * stride;
        let y1 = (y0 + WINDOW).min(h);
        for ox in 0..ow {
            let x0 = ox * stride;
            let x1 = (x0 + WINDOW).min(w);
            let o = (oy * ow + ox) * c;
            let first = (y0 * w + x0) * c;
            out[o..o + c].copy_from_slice(&src[first..first + c]);
            for (ch, a) in arg[o..o + c].iter_mut().enumerate() {
                *a = first + ch;
            }
            for y in y0..y1 {
                for x in x0..x1 {
                    let base = (y * w + x) * c;
                    for ch in 0..c {
                        let v = src[base + ch];
                        if v > out[o + ch] {
                            out[o + ch] = v;
                            arg[o + ch] = base + ch;
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::from_hwc(oh, ow, c, out)?, arg))
}

/// Routes each output gradient to the input element that won its window.
pub fn max_pool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("max_pool2d_backward", argmax.len(), grad_out.len()));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}
