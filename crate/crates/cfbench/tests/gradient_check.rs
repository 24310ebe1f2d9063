//! Finite-difference oracle for the analytic gradients.
//!
//! For each layer kind the analytic gradient of the mean cross-entropy loss
//! must match central finite differences (h = 1e-5) with relative error
//! below 1e-4 on at least 100 sampled parameter coordinates, in 64-bit
//! arithmetic. Dropout is checked with a frozen mask by replaying the same
//! rng stream for every loss evaluation.

use cfbench::layers::{LayerSpec, Mode};
use cfbench::network::Network;
use cfbench::rng::RngStream;
use cfbench::tensor::Tensor;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn random_batch(b: usize, dims: [usize; 3], rng: &mut RngStream) -> (Tensor, Vec<u8>) {
    let n = b * dims[0] * dims[1] * dims[2];
    let data = (0..n).map(|_| rng.next_f64()).collect();
    let labels = (0..b).map(|_| rng.below(10) as u8).collect();
    (Tensor::from_vec(&[b, dims[0], dims[1], dims[2]], data), labels)
}

fn param_at(net: &Network, idx: usize) -> f64 {
    net.params().values().nth(idx).unwrap()
}

fn set_param(net: &mut Network, idx: usize, v: f64) {
    *net.params_mut().values_mut().nth(idx).unwrap() = v;
}

/// Checks analytic vs central-difference gradients on >= `samples` evenly
/// spread coordinates. The rng stream is cloned for every forward so
/// stochastic layers see identical masks.
fn check_gradients(mut net: Network, batch: &Tensor, labels: &[u8], samples: usize, what: &str) {
    let rng = RngStream::new(777);
    let (_, grads) = net
        .loss_and_grads(batch, labels, Mode::Train, &mut rng.clone(), None)
        .unwrap();
    let analytic: Vec<f64> = grads.values().collect();

    let total = analytic.len();
    assert!(total >= samples, "{what}: only {total} coordinates");
    let stride = (total / samples).max(1);
    let mut checked = 0;
    let mut max_rel = 0.0f64;
    for idx in (0..total).step_by(stride) {
        let orig = param_at(&net, idx);
        set_param(&mut net, idx, orig + H);
        let (lp, _) = net
            .loss_and_grads(batch, labels, Mode::Train, &mut rng.clone(), None)
            .unwrap();
        set_param(&mut net, idx, orig - H);
        let (lm, _) = net
            .loss_and_grads(batch, labels, Mode::Train, &mut rng.clone(), None)
            .unwrap();
        set_param(&mut net, idx, orig);

        let numeric = (lp - lm) / (2.0 * H);
        let a = analytic[idx];
        if a.abs() < 1e-7 && numeric.abs() < 1e-7 {
            checked += 1;
            continue; // flat coordinate (dead relu / lwta loser / dropped unit)
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
        max_rel = max_rel.max(rel);
        assert!(
            rel < REL_TOL,
            "{what}: coordinate {idx} analytic {a} vs numeric {numeric} (rel {rel:.3e})"
        );
        checked += 1;
    }
    assert!(checked >= samples, "{what}: checked only {checked} coordinates");
    println!("{what}: {checked} coordinates, max rel err {max_rel:.3e}");
}

#[test]
fn dense_relu_softmax_gradients() {
    let layers = vec![
        LayerSpec::Dense { width: 12 },
        LayerSpec::Relu,
        LayerSpec::Dense { width: 10 },
        LayerSpec::SoftmaxReadout,
    ];
    let net = Network::build(layers, [4, 4, 1], &mut RngStream::new(21)).unwrap();
    let (batch, labels) = random_batch(5, [4, 4, 1], &mut RngStream::new(22));
    check_gradients(net, &batch, &labels, 100, "dense/relu/softmax-ce");
}

#[test]
fn conv_maxpool_gradients() {
    let layers = vec![
        LayerSpec::Conv2d { filters: 4, filter_size: 3 },
        LayerSpec::Relu,
        LayerSpec::Maxpool2d { pool_size: 2, stride: 2 },
        LayerSpec::Conv2d { filters: 6, filter_size: 3 },
        LayerSpec::Relu,
        LayerSpec::Maxpool2d { pool_size: 2, stride: 2 },
        LayerSpec::Dense { width: 10 },
        LayerSpec::SoftmaxReadout,
    ];
    let net = Network::build(layers, [8, 8, 2], &mut RngStream::new(31)).unwrap();
    let (batch, labels) = random_batch(3, [8, 8, 2], &mut RngStream::new(32));
    check_gradients(net, &batch, &labels, 100, "conv2d/maxpool2d");
}

#[test]
fn lwta_gradients() {
    let layers = vec![
        LayerSpec::Dense { width: 16 },
        LayerSpec::Lwta { block_size: 2 },
        LayerSpec::Dense { width: 10 },
        LayerSpec::SoftmaxReadout,
    ];
    let net = Network::build(layers, [4, 4, 1], &mut RngStream::new(41)).unwrap();
    let (batch, labels) = random_batch(5, [4, 4, 1], &mut RngStream::new(42));
    check_gradients(net, &batch, &labels, 100, "lwta");
}

#[test]
fn dropout_fixed_mask_gradients() {
    let layers = vec![
        LayerSpec::Dropout { rate: 0.2 },
        LayerSpec::Dense { width: 14 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::Dense { width: 10 },
        LayerSpec::SoftmaxReadout,
    ];
    let net = Network::build(layers, [4, 4, 1], &mut RngStream::new(51)).unwrap();
    let (batch, labels) = random_batch(6, [4, 4, 1], &mut RngStream::new(52));
    check_gradients(net, &batch, &labels, 100, "dropout-fixed-mask");
}

#[test]
fn full_preset_style_network_gradients() {
    // The FC preset shape at reduced width.
    let layers = vec![
        LayerSpec::Dense { width: 20 },
        LayerSpec::Relu,
        LayerSpec::Dense { width: 20 },
        LayerSpec::Relu,
        LayerSpec::Dense { width: 10 },
        LayerSpec::SoftmaxReadout,
    ];
    let net = Network::build(layers, [6, 6, 1], &mut RngStream::new(61)).unwrap();
    let (batch, labels) = random_batch(8, [6, 6, 1], &mut RngStream::new(62));
    check_gradients(net, &batch, &labels, 120, "fc-preset");
}
