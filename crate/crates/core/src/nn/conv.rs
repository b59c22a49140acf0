use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::gemm::{gemm, Mat};
use super::{LayerGrads, LayerKind, LayerParams};

/// Output extent of a zero-padded "same" convolution: `ceil(n / stride)`.
pub fn conv_output_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Receptive-field geometry shared by conv and locally connected layers.
///
/// Padding is `k / 2` on each side, which preserves extents at stride 1 for
/// odd kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        conv_output_extent(self.in_h, self.stride)
    }

    pub fn out_w(&self) -> usize {
        conv_output_extent(self.in_w, self.stride)
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Length of one unrolled receptive field.
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument(format!("{op}: stride must be >= 1")));
        }
        if self.kh % 2 == 0 || self.kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "{op}: kernel extents must be odd, got {}x{}",
                self.kh, self.kw
            )));
        }
        if self.in_h == 0 || self.in_w == 0 || self.in_c == 0 {
            return Err(Error::Empty(op));
        }
        Ok(())
    }
}

/// Unrolls every receptive field into a row of a `positions × patch_len`
/// matrix; patch order is `(dy, dx, c)`. Out-of-image taps are zero.
pub fn im2col(input: &Tensor, g: &ConvGeometry) -> Vec<f64> {
    let (h, w, c) = (g.in_h, g.in_w, g.in_c);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let (oh, ow) = (g.out_h(), g.out_w());
    let patch = g.patch_len();
    let src = input.data();
    let mut cols = vec![0.0; oh * ow * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * patch..][..patch];
            let x0 = (ox * g.stride) as isize - pw as isize;
            // valid dx range: 0 <= x0 + dx < w
            let dx_lo = (-x0).max(0) as usize;
            let dx_hi = ((w as isize - x0).min(g.kw as isize)).max(0) as usize;
            if dx_lo >= dx_hi {
                continue;
            }
            for dy in 0..g.kh {
                let iy = (oy * g.stride + dy) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let ix = (x0 + dx_lo as isize) as usize;
                let n = (dx_hi - dx_lo) * c;
                let s = (iy as usize * w + ix) * c;
                let d = (dy * g.kw + dx_lo) * c;
                row[d..d + n].copy_from_slice(&src[s..s + n]);
            }
        }
    }
    cols
}

/// Scatters unrolled patch gradients back onto the input grid, summing overlaps.
pub(crate) fn col2im_add(dcols: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let (h, w, c) = (g.in_h, g.in_w, g.in_c);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let (oh, ow) = (g.out_h(), g.out_w());
    let patch = g.patch_len();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &dcols[(oy * ow + ox) * patch..][..patch];
            let x0 = (ox * g.stride) as isize - pw as isize;
            let dx_lo = (-x0).max(0) as usize;
            let dx_hi = ((w as isize - x0).min(g.kw as isize)).max(0) as usize;
            if dx_lo >= dx_hi {
                continue;
            }
            for dy in 0..g.kh {
                let iy = (oy * g.stride + dy) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let ix = (x0 + dx_lo as isize) as usize;
                let n = (dx_hi - dx_lo) * c;
                let s = (iy as usize * w + ix) * c;
                let d = (dy * g.kw + dx_lo) * c;
                for (o, v) in out[s..s + n].iter_mut().zip(&row[d..d + n]) {
                    *o += v;
                }
            }
        }
    }
}

fn conv_geometry(input: &Tensor, params: &LayerParams, stride: usize, op: &'static str) -> Result<ConvGeometry> {
    let (h, w, c) = input.hwc()?;
    let ws = params.weights.shape();
    let expect_kind = if op == "conv2d" { LayerKind::Conv } else { LayerKind::LocallyConnected };
    if params.kind != expect_kind {
        return Err(Error::shape(op, format!("{expect_kind:?} params"), format!("{:?}", params.kind)));
    }
    let (kh, kw, kc) = match params.kind {
        LayerKind::Conv => (ws[1], ws[2], ws[3]),
        _ => (ws[3], ws[4], ws[5]),
    };
    if kc != c {
        return Err(Error::shape(op, format!("{kc} input channels"), format!("{c} input channels")));
    }
    let g = ConvGeometry { in_h: h, in_w: w, in_c: c, kh, kw, stride };
    g.validate(op)?;
    if params.kind == LayerKind::LocallyConnected && (ws[0] != g.out_h() || ws[1] != g.out_w()) {
        return Err(Error::shape(
            op,
            format!("{}x{} locations", g.out_h(), g.out_w()),
            format!("{}x{} locations", ws[0], ws[1]),
        ));
    }
    Ok(g)
}

/// Zero-padded 2-D convolution with shared weights.
///
/// With stride `s` the output is `ceil(H/s) × ceil(W/s) × c_out`.
pub fn conv2d(input: &Tensor, params: &LayerParams, stride: usize) -> Result<Tensor> {
    let g = conv_geometry(input, params, stride, "conv2d")?;
    let cols = im2col(input, &g);
    Ok(conv2d_from_cols(&cols, &g, params))
}

pub(crate) fn conv2d_from_cols(cols: &[f64], g: &ConvGeometry, params: &LayerParams) -> Tensor {
    let cout = params.weights.shape()[0];
    let p = g.positions();
    let k = g.patch_len();
    let mut out = Vec::with_capacity(p * cout);
    for _ in 0..p {
        out.extend_from_slice(params.biases.data());
    }
    gemm(
        Mat::new(cols, p, k),
        Mat::new(params.weights.data(), cout, k).t(),
        1.0,
        &mut out,
    );
    Tensor::from_hwc(g.out_h(), g.out_w(), cout, out).expect("conv output shape")
}

pub(crate) fn conv2d_grads_from_cols(
    cols: &[f64],
    g: &ConvGeometry,
    params: &LayerParams,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> (Option<Tensor>, LayerGrads) {
    let cout = params.weights.shape()[0];
    let p = g.positions();
    let k = g.patch_len();
    let go = grad_out.data();

    let mut dw = vec![0.0; cout * k];
    gemm(Mat::new(go, p, cout).t(), Mat::new(cols, p, k), 0.0, &mut dw);
    let mut db = vec![0.0; cout];
    for row in go.chunks_exact(cout) {
        for (b, v) in db.iter_mut().zip(row) {
            *b += v;
        }
    }

    let dinput = need_input_grad.then(|| {
        let mut dcols = vec![0.0; p * k];
        gemm(Mat::new(go, p, cout), Mat::new(params.weights.data(), cout, k), 0.0, &mut dcols);
        let mut dx = vec![0.0; g.in_h * g.in_w * g.in_c];
        col2im_add(&dcols, g, &mut dx);
        Tensor::from_hwc(g.in_h, g.in_w, g.in_c, dx).expect("conv input grad shape")
    });

    let grads = LayerGrads {
        weights: Tensor::new(params.weights.shape().to_vec(), dw).expect("dw shape"),
        biases: Tensor::new(params.biases.shape().to_vec(), db).expect("db shape"),
    };
    (dinput, grads)
}

/// Gradients of conv2d w.r.t. input, weights and biases given `dL/d(output)`.
pub fn conv2d_backward(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, LayerGrads)> {
    let g = conv_geometry(input, params, stride, "conv2d")?;
    let cout = params.weights.shape()[0];
    if grad_out.shape() != [g.out_h(), g.out_w(), cout] {
        return Err(Error::shape("conv2d_backward", format!("{:?}", [g.out_h(), g.out_w(), cout]), format!("{:?}", grad_out.shape())));
    }
    let cols = im2col(input, &g);
    let (dx, grads) = conv2d_grads_from_cols(&cols, &g, params, grad_out, true);
    Ok((dx.expect("input grad requested"), grads))
}

/// Convolution-shaped receptive fields with an independent kernel per output
/// location (no weight sharing). Stride 1, zero padded, so the spatial extent
/// is preserved.
pub fn locally_connected(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let g = conv_geometry(input, params, 1, "locally_connected")?;
    let cols = im2col(input, &g);
    Ok(lc_from_cols(&cols, &g, params))
}

pub(crate) fn lc_from_cols(cols: &[f64], g: &ConvGeometry, params: &LayerParams) -> Tensor {
    let cout = params.weights.shape()[2];
    let k = g.patch_len();
    let w = params.weights.data();
    let b = params.biases.data();
    let mut out = vec![0.0; g.positions() * cout];
    for (p, patch) in cols.chunks_exact(k).enumerate() {
        let wp = &w[p * cout * k..][..cout * k];
        for (co, o) in out[p * cout..][..cout].iter_mut().enumerate() {
            let row = &wp[co * k..][..k];
            *o = b[p * cout + co] + row.iter().zip(patch).map(|(a, x)| a * x).sum::<f64>();
        }
    }
    Tensor::from_hwc(g.out_h(), g.out_w(), cout, out).expect("lc output shape")
}

pub(crate) fn lc_grads_from_cols(
    cols: &[f64],
    g: &ConvGeometry,
    params: &LayerParams,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> (Option<Tensor>, LayerGrads) {
    let cout = params.weights.shape()[2];
    let k = g.patch_len();
    let w = params.weights.data();
    let go = grad_out.data();
    let mut dw = vec![0.0; w.len()];
    let mut dcols = if need_input_grad { vec![0.0; cols.len()] } else { Vec::new() };
    for (p, patch) in cols.chunks_exact(k).enumerate() {
        for co in 0..cout {
            let gv = go[p * cout + co];
            if gv == 0.0 {
                continue;
            }
            let off = (p * cout + co) * k;
            for (d, x) in dw[off..off + k].iter_mut().zip(patch) {
                *d += gv * x;
            }
            if need_input_grad {
                for (d, a) in dcols[p * k..][..k].iter_mut().zip(&w[off..off + k]) {
                    *d += gv * a;
                }
            }
        }
    }
    let dinput = need_input_grad.then(|| {
        let mut dx = vec![0.0; g.in_h * g.in_w * g.in_c];
        col2im_add(&dcols, g, &mut dx);
        Tensor::from_hwc(g.in_h, g.in_w, g.in_c, dx).expect("lc input grad shape")
    });
    let grads = LayerGrads {
        weights: Tensor::new(params.weights.shape().to_vec(), dw).expect("dw shape"),
        biases: Tensor::new(params.biases.shape().to_vec(), go.to_vec()).expect("db shape"),
    };
    (dinput, grads)
}

pub fn locally_connected_backward(
    input: &Tensor,
    params: &LayerParams,
    grad_out: &Tensor,
) -> Result<(Tensor, LayerGrads)> {
    let g = conv_geometry(input, params, 1, "locally_connected")?;
    let cout = params.weights.shape()[2];
    if grad_out.shape() != [g.out_h(), g.out_w(), cout] {
        return Err(Error::shape("locally_connected_backward", format!("{:?}", [g.out_h(), g.out_w(), cout]), format!("{:?}", grad_out.shape())));
    }
    let cols = im2col(input, &g);
    let (dx, grads) = lc_grads_from_cols(&cols, &g, params, grad_out, true);
    Ok((dx.expect("input grad requested"), grads))
}
