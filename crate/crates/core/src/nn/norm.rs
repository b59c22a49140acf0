use crate::error::Result;
use crate::tensor::Tensor;

/// Number of in-bounds pixels in the 3×3 neighbourhood of `i` along one axis.
#[inline]
fn span(i: usize, n: usize) -> (usize, usize) {
    (i.saturating_sub(1), (i + 2).min(n))
}

/// Subtracts the unweighted 3×3 box mean (clipped at the borders) from each
/// activation, independently per channel.
pub fn subtractive_normalize(input: &Tensor) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    let src = input.data();
    let mut out = vec![0.0; src.len()];
    let mut acc = vec![0.0; c];
    for y in 0..h {
        let (y0, y1) = span(y, h);
        for x in 0..w {
            let (x0, x1) = span(x, w);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for yy in y0..y1 {
                for xx in x0..x1 {
                    let base = (yy * w + xx) * c;
                    for (a, v) in acc.iter_mut().zip(&src[base..base + c]) {
                        *a += v;
                    }
                }
            }
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            let base = (y * w + x) * c;
            for ch in 0..c {
                out[base + ch] = src[base + ch] - acc[ch] * inv;
            }
        }
    }
    Tensor::from_hwc(h, w, c, out)
}

/// The neighbourhood relation is symmetric, so
/// `dx[q] = g[q] - sum_{p in N(q)} g[p] / |N(p)|`.
pub fn subtractive_normalize_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (h, w, c) = grad_out.hwc()?;
    let g = grad_out.data();
    let mut scaled = vec![0.0; g.len()];
    for y in 0..h {
        let (y0, y1) = span(y, h);
        for x in 0..w {
            let (x0, x1) = span(x, w);
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            let base = (y * w + x) * c;
            for ch in 0..c {
                scaled[base + ch] = g[base + ch] * inv;
            }
        }
    }
    let mut dx = g.to_vec();
    for y in 0..h {
        let (y0, y1) = span(y, h);
        for x in 0..w {
            let (x0, x1) = span(x, w);
            let base = (y * w + x) * c;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    let nb = (yy * w + xx) * c;
                    for ch in 0..c {
                        dx[base + ch] -= scaled[nb + ch];
                    }
                }
            }
        }
    }
    Tensor::from_hwc(h, w, c, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_maps_to_zero() {
        let y = subtractive_normalize(&Tensor::full(&[4, 5, 2], 3.0)).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn preserves_shape() {
        let y = subtractive_normalize(&Tensor::zeros(&[54, 54, 48])).unwrap();
        assert_eq!(y.shape(), &[54, 54, 48]);
    }

    #[test]
    fn matches_neighbourhood_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_hwc(5, 5, 1, (0..25).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = subtractive_normalize(&x).unwrap();
        for r in 0..5i32 {
            for c in 0..5i32 {
                let mut s = 0.0;
                let mut n = 0;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r + dr, c + dc);
                        if (0..5).contains(&rr) && (0..5).contains(&cc) {
                            s += x.at3(rr as usize, cc as usize, 0);
                            n += 1;
                        }
                    }
                }
                let want = x.at3(r as usize, c as usize, 0) - s / n as f64;
                assert!((y.at3(r as usize, c as usize, 0) - want).abs() < 1e-6);
            }
        }
    }
}
