use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqnet::network::{Model, NetworkConfig};
use seqnet::nn::{
    grad_check, relative_error, Conv2d, DropoutLayer, FullyConnected, LayerParams, LocallyConnected, MaxPool2d,
    Maxout, Mode, Rectifier, SubtractiveNorm,
};
use seqnet::{nll_loss_and_grad, SequenceLabel, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values spaced at least `gap` apart and away from zero, so piecewise
/// layers stay on one side of every kink under perturbation.
fn separated(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

#[test]
fn fully_connected_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = LayerParams::fully_connected(random(&[7, 12], &mut rng), random(&[7], &mut rng)).unwrap();
    let mut layer = FullyConnected { params };
    let r = grad_check(&mut layer, &random(&[12], &mut rng), 1e-4).unwrap();
    assert!(r.max_error() < 1e-6, "{r:?}");
}

#[test]
fn conv_gradients_across_strides() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for stride in [1, 2] {
        let params = LayerParams::conv(random(&[4, 3, 3, 2], &mut rng), random(&[4], &mut rng)).unwrap();
        let mut layer = Conv2d { params, stride };
        let r = grad_check(&mut layer, &random(&[7, 6, 2], &mut rng), 1e-5).unwrap();
        assert!(r.max_error() < 1e-4, "stride {stride}: {r:?}");
    }
}

#[test]
fn locally_connected_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params =
        LayerParams::locally_connected(random(&[4, 5, 3, 3, 3, 2], &mut rng), random(&[4, 5, 3], &mut rng)).unwrap();
    let mut layer = LocallyConnected { params };
    let r = grad_check(&mut layer, &random(&[4, 5, 2], &mut rng), 1e-5).unwrap();
    assert!(r.max_error() < 1e-4, "{r:?}");
}

#[test]
fn subtractive_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r = grad_check(&mut SubtractiveNorm, &random(&[5, 6, 3], &mut rng), 1e-5).unwrap();
    assert!(r.max_error() < 1e-6, "{r:?}");
}

#[test]
fn piecewise_layer_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = separated(&[6, 5, 4], 0.01, &mut rng);
    let r = grad_check(&mut Rectifier, &x, 1e-5).unwrap();
    assert!(r.max_error() < 1e-5, "rectifier {r:?}");
    let r = grad_check(&mut Maxout { pieces: 2 }, &x, 1e-5).unwrap();
    assert!(r.max_error() < 1e-5, "maxout {r:?}");
    for stride in [1, 2] {
        let r = grad_check(&mut MaxPool2d { stride }, &x, 1e-5).unwrap();
        assert!(r.max_error() < 1e-5, "pool stride {stride} {r:?}");
    }
    let mut drop = DropoutLayer { rate: 0.5, mode: Mode::Train, seed: 9 };
    let r = grad_check(&mut drop, &x, 1e-5).unwrap();
    assert!(r.max_error() < 1e-6, "dropout {r:?}");
}

fn tiny_setup() -> (Model, Tensor, SequenceLabel) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = Model::build(NetworkConfig::tiny(), 7).unwrap();
    let image = random(&[8, 8, 1], &mut rng);
    (model, image, SequenceLabel::new(vec![2, 1]))
}

fn loss_of(model: &Model, image: &Tensor, label: &SequenceLabel) -> f64 {
    let trace = model.forward_traced_no_dropout(image).unwrap();
    nll_loss_and_grad(&trace.logits, label).unwrap().0
}

#[test]
fn whole_model_matches_finite_differences() {
    let (mut model, image, label) = tiny_setup();
    assert!(model.param_count() <= 10_000);
    let trace = model.forward_traced_no_dropout(&image).unwrap();
    let (_, head_grad) = nll_loss_and_grad(&trace.logits, &label).unwrap();
    let grads = model.backward(&trace, &head_grad).unwrap();
    let analytic = grads.flat();

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut flat_index = 0;
    let n_tensors = model.tensors().len();
    for t in 0..n_tensors {
        let len = model.tensors()[t].len();
        for i in 0..len {
            let orig = model.tensors()[t].data()[i];
            model.tensors_mut()[t].data_mut()[i] = orig + eps;
            let up = loss_of(&model, &image, &label);
            model.tensors_mut()[t].data_mut()[i] = orig - eps;
            let down = loss_of(&model, &image, &label);
            model.tensors_mut()[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[flat_index], numeric));
            flat_index += 1;
        }
    }
    assert_eq!(flat_index, analytic.len());
    assert!(worst < 1e-3, "max relative error {worst}");
}

#[test]
fn empty_label_zeroes_character_head_gradients() {
    let (model, image, _) = tiny_setup();
    let label = SequenceLabel::new(vec![]);
    let (_, g) = model.loss_and_grad(&image, &label, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let head = model.config().head;
    let d = model.head().weights.shape()[1];
    let w = g.head.weights.data();
    let length_rows = head.max_len + 2;
    assert!(w[..length_rows * d].iter().any(|&v| v != 0.0));
    assert!(w[length_rows * d..].iter().all(|&v| v == 0.0));
    assert!(g.head.biases.data()[length_rows..].iter().all(|&v| v == 0.0));
}

#[test]
fn doubling_the_loss_doubles_every_gradient() {
    let (model, image, label) = tiny_setup();
    let trace = model.forward_traced_no_dropout(&image).unwrap();
    let (_, mut head_grad) = nll_loss_and_grad(&trace.logits, &label).unwrap();
    let g1 = model.backward(&trace, &head_grad).unwrap().flat();
    head_grad.scale(2.0);
    let g2 = model.backward(&trace, &head_grad).unwrap().flat();
    for (a, b) in g1.iter().zip(&g2) {
        assert!((2.0 * a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} {b}");
    }
}
