use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::gemm::{gemm, Mat};
use super::{LayerGrads, LayerKind, LayerParams};

fn dims(input: &Tensor, params: &LayerParams) -> Result<(usize, usize)> {
    if params.kind != LayerKind::FullyConnected {
        return Err(Error::shape("fully_connected", "FullyConnected params", format!("{:?}", params.kind)));
    }
    let (m, d) = (params.weights.shape()[0], params.weights.shape()[1]);
    if input.len() != d {
        return Err(Error::shape("fully_connected", format!("{d} inputs"), format!("{} inputs", input.len())));
    }
    Ok((m, d))
}

/// `W·x + b`; any input shape is read as a flat vector.
pub fn fully_connected(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let (m, d) = dims(input, params)?;
    let mut out = params.biases.data().to_vec();
    gemm(
        Mat::new(params.weights.data(), m, d),
        Mat::new(input.data(), d, 1),
        1.0,
        &mut out,
    );
    Ok(Tensor::from_vec(out))
}

/// Returns `dL/dx` (shaped like `input`) and the parameter gradients.
pub fn fully_connected_backward(input: &Tensor, params: &LayerParams, grad_out: &Tensor) -> Result<(Tensor, LayerGrads)> {
    let (m, d) = dims(input, params)?;
    if grad_out.len() != m {
        return Err(Error::shape("fully_connected_backward", m, grad_out.len()));
    }
    let g = grad_out.data();
    let mut dw = vec![0.0; m * d];
    gemm(Mat::new(g, m, 1), Mat::new(input.data(), 1, d), 0.0, &mut dw);
    let mut dx = vec![0.0; d];
    gemm(Mat::new(params.weights.data(), m, d).t(), Mat::new(g, m, 1), 0.0, &mut dx);
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        LayerGrads {
            weights: Tensor::new(vec![m, d], dw)?,
            biases: Tensor::from_vec(g.to_vec()),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_bias_only() {
        let x = Tensor::from_vec(vec![1.5, -2.0, 3.0]);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let p = LayerParams::fully_connected(eye, Tensor::zeros(&[3])).unwrap();
        assert_eq!(fully_connected(&x, &p).unwrap(), x);

        let p = LayerParams::fully_connected(Tensor::zeros(&[2, 3]), Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(fully_connected(&x, &p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn matches_matvec_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (m, d) = (4, 7);
        let w: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = LayerParams::fully_connected(Tensor::new(vec![m, d], w.clone()).unwrap(), Tensor::from_vec(b.clone())).unwrap();
        let y = fully_connected(&Tensor::from_vec(x.clone()), &p).unwrap();
        for i in 0..m {
            let want: f64 = b[i] + (0..d).map(|j| w[i * d + j] * x[j]).sum::<f64>();
            assert!((y.data()[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_wrong_input_length() {
        let p = LayerParams::fully_connected(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            fully_connected(&Tensor::zeros(&[4]), &p),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
