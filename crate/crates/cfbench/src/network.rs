//! Feed-forward network: construction, forward pass, analytic gradients,
//! and accuracy evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{self, LayerAux, LayerSpec, Mode};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Weights and bias of one parameterized layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// Per-layer parameter collection; slots are `None` for parameterless layers.
/// The same structure carries gradients, velocities, Fisher diagonals and
/// parameter snapshots, so shapes always mirror the owning network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<Option<LayerParams>>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|slot| {
                    slot.as_ref().map(|p| LayerParams {
                        w: Tensor::zeros(p.w.shape()),
                        b: Tensor::zeros(p.b.shape()),
                    })
                })
                .collect(),
        }
    }

    pub fn same_shapes(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
                (None, None) => true,
                (Some(x), Some(y)) => {
                    x.w.shape() == y.w.shape() && x.b.shape() == y.b.shape()
                }
                _ => false,
            })
    }

    pub fn value_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|p| p.w.len() + p.b.len())
            .sum()
    }

    /// All parameter values in a fixed order (layer by layer, weights then
    /// bias).
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flatten().flat_map(|p| {
            p.w.data().iter().chain(p.b.data().iter()).copied()
        })
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flatten().flat_map(|p| {
            p.w.data_mut().iter_mut().chain(p.b.data_mut().iter_mut())
        })
    }

    /// `self += scale * other`, entrywise.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        debug_assert!(self.same_shapes(other));
        for (dst, src) in self.values_mut().zip(other.values()) {
            *dst += scale * src;
        }
    }

    /// Entrywise combination of two mirrored sets.
    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> ParamSet {
        debug_assert!(self.same_shapes(other));
        let mut out = self.clone();
        for (dst, src) in out.values_mut().zip(other.values()) {
            *dst = f(*dst, src);
        }
        out
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Additional differentiable term added to the training loss, evaluated on
/// the full parameter set (EWC anchor, L2 transfer).
pub trait Penalty: Sync {
    fn eval(&self, params: &ParamSet) -> (f64, ParamSet);
}

/// Activations entering every layer plus the readout output, with the
/// per-layer auxiliary state backward needs.
pub struct ForwardCache {
    /// `activations[i]` feeds layer `i`; the last entry is the output.
    pub activations: Vec<Tensor>,
    pub aux: Vec<LayerAux>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<LayerSpec>,
    input_dims: [usize; 3],
    readout_classes: usize,
    params: ParamSet,
}

impl Network {
    /// Validates the layer chain against `input_dims` and initializes
    /// parameters: weights uniform in ±sqrt(6/(fan_in+fan_out)), biases zero.
    /// Deterministic given `rng`.
    pub fn build(
        layers: Vec<LayerSpec>,
        input_dims: [usize; 3],
        rng: &mut RngStream,
    ) -> Result<Network> {
        let shapes = infer_shapes(&layers, input_dims)?;
        let mut params = Vec::with_capacity(layers.len());
        for (i, spec) in layers.iter().enumerate() {
            let in_shape = &shapes[i];
            params.push(match spec {
                LayerSpec::Dense { width } => {
                    let fan_in: usize = in_shape.iter().product();
                    Some(init_layer(*width, fan_in, &[*width, fan_in], rng))
                }
                LayerSpec::Conv2d { filters, filter_size } => {
                    let c = in_shape[2];
                    let k = *filter_size;
                    let fan_in = k * k * c;
                    let fan_out = k * k * *filters;
                    Some(init_layer_fans(
                        fan_in,
                        fan_out,
                        &[*filters, k, k, c],
                        &[*filters],
                        rng,
                    ))
                }
                _ => None,
            });
        }
        Ok(Network {
            layers,
            input_dims,
            readout_classes: 10,
            params: ParamSet { layers: params },
        })
    }

    pub fn layer_specs(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    pub fn readout_classes(&self) -> usize {
        self.readout_classes
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        if !self.params.same_shapes(&params) {
            return Err(Error::config("parameter shapes do not match network"));
        }
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.value_count()
    }

    /// Forward pass. Eval mode consumes no rng; dropout is active only in
    /// train mode. Returns class probabilities `(B, 10)` and the cache
    /// backward needs.
    pub fn forward(
        &self,
        batch: &Tensor,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<(Tensor, ForwardCache)> {
        let feat: usize = self.input_dims.iter().product();
        let b = batch.shape()[0];
        if batch.len() != b * feat {
            return Err(Error::config(format!(
                "batch features {} do not match input dims {:?}",
                batch.len() / b.max(1),
                self.input_dims
            )));
        }

        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        activations.push(batch.clone().reshaped(&[
            b,
            self.input_dims[0],
            self.input_dims[1],
            self.input_dims[2],
        ]));

        for (i, spec) in self.layers.iter().enumerate() {
            let input = activations.last().unwrap();
            let (out, a) = match spec {
                LayerSpec::Dense { .. } => {
                    let p = self.params.layers[i].as_ref().unwrap();
                    let flat = input.clone().reshaped(&[b, input.len() / b]);
                    (layers::dense_forward(&flat, &p.w, &p.b), LayerAux::None)
                }
                LayerSpec::Conv2d { .. } => {
                    let p = self.params.layers[i].as_ref().unwrap();
                    (layers::conv2d_forward(input, &p.w, &p.b), LayerAux::None)
                }
                LayerSpec::Maxpool2d { pool_size, stride } => {
                    layers::maxpool2d_forward(input, *pool_size, *stride)
                }
                LayerSpec::Relu => (layers::relu_forward(input), LayerAux::None),
                LayerSpec::Lwta { block_size } => {
                    let flat = input.clone().reshaped(&[b, input.len() / b]);
                    layers::lwta_forward(&flat, *block_size)?
                }
                LayerSpec::Dropout { rate } => {
                    layers::dropout_forward(input, *rate, mode, rng)
                }
                LayerSpec::SoftmaxReadout => {
                    let flat = input.clone().reshaped(&[b, input.len() / b]);
                    (layers::softmax_forward(&flat), LayerAux::None)
                }
            };
            out.check_finite(i, spec.name())?;
            activations.push(out);
            aux.push(a);
        }
        let probs = activations.last().unwrap().clone();
        Ok((probs, ForwardCache { activations, aux }))
    }

    /// Mean cross-entropy (plus optional penalty) and its gradients.
    pub fn loss_and_grads(
        &self,
        batch: &Tensor,
        labels: &[u8],
        mode: Mode,
        rng: &mut RngStream,
        penalty: Option<&dyn Penalty>,
    ) -> Result<(f64, ParamSet)> {
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= self.readout_classes) {
            return Err(Error::data(format!(
                "label {bad} out of range 0..{}",
                self.readout_classes
            )));
        }
        let (probs, cache) = self.forward(batch, mode, rng)?;
        debug_assert_eq!(labels.len(), probs.shape()[0]);

        let mut loss = 0.0;
        for (bi, &y) in labels.iter().enumerate() {
            loss -= probs.row(bi)[y as usize].max(1e-300).ln();
        }
        loss /= labels.len() as f64;

        let mut grads = self.params.zeros_like();
        // Last layer is the softmax readout: fold its backward into the
        // cross-entropy gradient.
        let mut delta = layers::softmax_ce_backward(&probs, labels);
        for i in (0..self.layers.len() - 1).rev() {
            let input = &cache.activations[i];
            delta = match &self.layers[i] {
                LayerSpec::Dense { .. } => {
                    let p = self.params.layers[i].as_ref().unwrap();
                    let b = input.shape()[0];
                    let flat = input.clone().reshaped(&[b, input.len() / b]);
                    let (dx, dw, db) = layers::dense_backward(&flat, &p.w, &delta);
                    grads.layers[i] = Some(LayerParams { w: dw, b: db });
                    dx
                }
                LayerSpec::Conv2d { .. } => {
                    let p = self.params.layers[i].as_ref().unwrap();
                    let (dx, dw, db) = layers::conv2d_backward(input, &p.w, &delta);
                    grads.layers[i] = Some(LayerParams { w: dw, b: db });
                    dx
                }
                LayerSpec::Maxpool2d { .. } => {
                    layers::maxpool2d_backward(input.shape(), &delta, &cache.aux[i])
                }
                LayerSpec::Relu => layers::relu_backward(input, &delta),
                LayerSpec::Lwta { .. } => {
                    layers::lwta_backward(&[input.shape()[0], input.len() / input.shape()[0]], &delta, &cache.aux[i])
                }
                LayerSpec::Dropout { .. } => layers::dropout_backward(&delta, &cache.aux[i]),
                LayerSpec::SoftmaxReadout => unreachable!("readout is always last"),
            };
        }

        if let Some(pen) = penalty {
            let (pv, pg) = pen.eval(&self.params);
            loss += pv;
            grads.add_scaled(&pg, 1.0);
        }
        Ok((loss, grads))
    }

    /// Fraction of argmax-correct predictions over the whole dataset, eval
    /// mode, ties to the lowest class index. The last partial batch counts.
    pub fn evaluate_accuracy(&self, dataset: &Dataset, batch_size: usize) -> Result<f64> {
        if dataset.len() == 0 {
            return Err(Error::data("cannot evaluate accuracy on an empty dataset"));
        }
        let n = dataset.len();
        let starts: Vec<usize> = (0..n).step_by(batch_size).collect();
        let correct: usize = starts
            .par_iter()
            .map(|&start| {
                let end = (start + batch_size).min(n);
                let (batch, labels) = dataset.batch_range(start, end);
                let mut dummy = RngStream::new(0);
                let (probs, _) = self
                    .forward(&batch, Mode::Eval, &mut dummy)
                    .expect("eval forward failed");
                let classes = probs.shape()[1];
                labels
                    .iter()
                    .enumerate()
                    .filter(|(bi, &y)| {
                        let row = probs.row(*bi);
                        let mut best = 0usize;
                        for k in 1..classes {
                            if row[k] > row[best] {
                                best = k;
                            }
                        }
                        best == y as usize
                    })
                    .count()
            })
            .sum();
        Ok(correct as f64 / n as f64)
    }
}

fn init_layer(out_dim: usize, in_dim: usize, w_shape: &[usize], rng: &mut RngStream) -> LayerParams {
    init_layer_fans(in_dim, out_dim, w_shape, &[out_dim], rng)
}

fn init_layer_fans(
    fan_in: usize,
    fan_out: usize,
    w_shape: &[usize],
    b_shape: &[usize],
    rng: &mut RngStream,
) -> LayerParams {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut w = Tensor::zeros(w_shape);
    for v in w.data_mut() {
        *v = rng.uniform(-a, a);
    }
    LayerParams { w, b: Tensor::zeros(b_shape) }
}

/// Feature shape entering each layer, plus the final output shape.
/// Spatial shapes are `[h, w, c]`; flat shapes are `[n]`.
fn infer_shapes(layers: &[LayerSpec], input_dims: [usize; 3]) -> Result<Vec<Vec<usize>>> {
    if layers.is_empty() {
        return Err(Error::config("network needs at least one layer"));
    }
    match layers.last() {
        Some(LayerSpec::SoftmaxReadout) => {}
        _ => return Err(Error::config("layer chain must end with softmax-readout")),
    }

    let mut shapes = vec![input_dims.to_vec()];
    for (i, spec) in layers.iter().enumerate() {
        let cur = shapes.last().unwrap().clone();
        let flat: usize = cur.iter().product();
        let next = match spec {
            LayerSpec::Dense { width } => {
                if *width == 0 {
                    return Err(Error::config(format!("layer {i}: dense width must be positive")));
                }
                vec![*width]
            }
            LayerSpec::Conv2d { filters, filter_size } => {
                if cur.len() != 3 {
                    return Err(Error::config(format!(
                        "layer {i}: conv2d needs spatial input, got shape {cur:?}"
                    )));
                }
                if *filters == 0 || *filter_size == 0 {
                    return Err(Error::config(format!("layer {i}: conv2d sizes must be positive")));
                }
                vec![cur[0], cur[1], *filters]
            }
            LayerSpec::Maxpool2d { pool_size, stride } => {
                if cur.len() != 3 {
                    return Err(Error::config(format!(
                        "layer {i}: maxpool2d needs spatial input, got shape {cur:?}"
                    )));
                }
                if cur[0] < *pool_size || cur[1] < *pool_size || *stride == 0 {
                    return Err(Error::config(format!(
                        "layer {i}: pool {pool_size}/{stride} too large for input {cur:?}"
                    )));
                }
                vec![
                    (cur[0] - pool_size) / stride + 1,
                    (cur[1] - pool_size) / stride + 1,
                    cur[2],
                ]
            }
            LayerSpec::Relu => cur,
            LayerSpec::Lwta { block_size } => {
                if *block_size == 0 || flat % block_size != 0 {
                    return Err(Error::config(format!(
                        "layer {i}: lwta block size {block_size} does not divide width {flat}"
                    )));
                }
                vec![flat]
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::config(format!(
                        "layer {i}: dropout rate {rate} outside [0, 1)"
                    )));
                }
                cur
            }
            LayerSpec::SoftmaxReadout => {
                if i != layers.len() - 1 {
                    return Err(Error::config(format!(
                        "layer {i}: softmax-readout must be the final layer"
                    )));
                }
                if flat != 10 {
                    return Err(Error::config(format!(
                        "softmax-readout expects 10 classes, got {flat}"
                    )));
                }
                vec![10]
            }
        };
        shapes.push(next);
    }
    Ok(shapes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fc_layers(hidden: usize, width: usize) -> Vec<LayerSpec> {
        let mut l = Vec::new();
        for _ in 0..hidden {
            l.push(LayerSpec::Dense { width });
            l.push(LayerSpec::Relu);
        }
        l.push(LayerSpec::Dense { width: 10 });
        l.push(LayerSpec::SoftmaxReadout);
        l
    }

    #[test]
    fn fc_preset_param_count() {
        let mut rng = RngStream::new(1);
        let net = Network::build(fc_layers(2, 200), [28, 28, 1], &mut rng).unwrap();
        assert_eq!(net.param_count(), 199_210);
    }

    #[test]
    fn conv_chain_shapes_out_to_1024_head() {
        // 28x28 -> pool -> 14x14 -> pool -> 7x7x64 = 3136 -> 1024 -> 10
        let layers = vec![
            LayerSpec::Conv2d { filters: 32, filter_size: 5 },
            LayerSpec::Relu,
            LayerSpec::Maxpool2d { pool_size: 2, stride: 2 },
            LayerSpec::Conv2d { filters: 64, filter_size: 5 },
            LayerSpec::Relu,
            LayerSpec::Maxpool2d { pool_size: 2, stride: 2 },
            LayerSpec::Dense { width: 1024 },
            LayerSpec::Relu,
            LayerSpec::Dense { width: 10 },
            LayerSpec::SoftmaxReadout,
        ];
        let mut rng = RngStream::new(1);
        let net = Network::build(layers, [28, 28, 1], &mut rng).unwrap();
        // conv1: 32*5*5*1+32, conv2: 64*5*5*32+64, fc: 3136*1024+1024, out: 1024*10+10
        assert_eq!(
            net.param_count(),
            32 * 25 + 32 + 64 * 25 * 32 + 64 + 3136 * 1024 + 1024 + 1024 * 10 + 10
        );
    }

    #[test]
    fn build_is_deterministic_given_seed() {
        let a = Network::build(fc_layers(2, 16), [4, 4, 1], &mut RngStream::new(9)).unwrap();
        let b = Network::build(fc_layers(2, 16), [4, 4, 1], &mut RngStream::new(9)).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn build_rejects_missing_readout() {
        let layers = vec![LayerSpec::Dense { width: 10 }];
        assert!(matches!(
            Network::build(layers, [4, 4, 1], &mut RngStream::new(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn build_rejects_lwta_block_not_dividing_width() {
        let layers = vec![
            LayerSpec::Dense { width: 5 },
            LayerSpec::Lwta { block_size: 2 },
            LayerSpec::Dense { width: 10 },
            LayerSpec::SoftmaxReadout,
        ];
        assert!(matches!(
            Network::build(layers, [4, 4, 1], &mut RngStream::new(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_weight_network_outputs_uniform_probabilities() {
        let mut net =
            Network::build(fc_layers(1, 8), [2, 2, 1], &mut RngStream::new(1)).unwrap();
        let zeros = net.params().zeros_like();
        net.set_params(zeros).unwrap();
        let batch = Tensor::from_vec(&[1, 2, 2, 1], vec![0.3, -0.4, 0.9, 0.1]);
        let (probs, _) = net.forward(&batch, Mode::Eval, &mut RngStream::new(0)).unwrap();
        for p in probs.data() {
            assert!((p - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_consumes_no_rng() {
        let layers = vec![
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Dense { width: 16 },
            LayerSpec::Relu,
            LayerSpec::Dense { width: 10 },
            LayerSpec::SoftmaxReadout,
        ];
        let net = Network::build(layers, [3, 3, 1], &mut RngStream::new(5)).unwrap();
        let batch = Tensor::from_vec(&[1, 3, 3, 1], (0..9).map(|i| i as f64 / 9.0).collect());
        let mut rng = RngStream::new(7);
        let (p1, _) = net.forward(&batch, Mode::Eval, &mut rng).unwrap();
        assert_eq!(rng.position(), 0);
        let (p2, _) = net.forward(&batch, Mode::Eval, &mut rng).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn zero_logit_loss_is_ln_10() {
        let mut net =
            Network::build(fc_layers(1, 8), [2, 2, 1], &mut RngStream::new(1)).unwrap();
        net.set_params(net.params().zeros_like()).unwrap();
        let batch = Tensor::from_vec(&[2, 2, 2, 1], vec![0.5; 8]);
        let (loss, _) = net
            .loss_and_grads(&batch, &[3, 7], Mode::Eval, &mut RngStream::new(0), None)
            .unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        let net = Network::build(fc_layers(1, 8), [2, 2, 1], &mut RngStream::new(1)).unwrap();
        let batch = Tensor::from_vec(&[1, 2, 2, 1], vec![0.5; 4]);
        assert!(matches!(
            net.loss_and_grads(&batch, &[10], Mode::Eval, &mut RngStream::new(0), None),
            Err(Error::Data(_))
        ));
    }
}
