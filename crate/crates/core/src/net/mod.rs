//! The scoring function `f_y(x; w)` as a linear chain of layers.
//!
//! One forward pass over a batch yields the `[n, C]` score matrix plus an
//! activation cache. Two backward passes consume the cache:
//!
//! * [`Network::backward_params`] contracts an arbitrary loss-layer gradient
//!   `∂loss/∂F` with `∂F/∂w`. Discriminative and generative training differ
//!   only in that loss-layer gradient.
//! * [`Network::backward_input`] differentiates one scalar node with respect
//!   to the input pixels, routing through the argmax maps recorded on that
//!   very input.

mod checkpoint;
mod config;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::loss::{LossGrad, Matrix, ScoreMatrix};
use crate::tensor::{
    conv2d_backward_into, conv2d_forward_into, dense_backward_batch, dense_forward_batch,
    maxpool_backward_into, maxpool_forward_into, ConvGeometry, ConvScratch, PoolGeometry, Tensor,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{InitScheme, LayerKind, LayerSpec, NetworkConfig};

/// Named parameter tensors in layer order (`<layer>.weight`, `<layer>.bias`).
/// Gradients and optimizer velocities reuse the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

pub type ParamGrads = ParamStore;

impl ParamStore {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        ParamStore { entries }
    }

    pub fn zeros_like(other: &ParamStore) -> Self {
        ParamStore {
            entries: other
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, t) in &mut self.entries {
            t.scale(alpha);
        }
    }

    /// `self += alpha * other`, matching entries by position.
    pub fn axpy(&mut self, alpha: f64, other: &ParamStore) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::shape("parameter stores have different layouts"));
        }
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    /// Two index pair halves for a weight/bias slot.
    fn pair_mut(&mut self, slot: ParamSlot) -> (&mut [f64], &mut [f64]) {
        debug_assert_eq!(slot.bias, slot.weight + 1);
        let (head, tail) = self.entries.split_at_mut(slot.bias);
        (head[slot.weight].1.data_mut(), tail[0].1.data_mut())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ParamSlot {
    weight: usize,
    bias: usize,
}

/// Per-layer forward outputs (and pooling winners) for one batch.
#[derive(Clone, Debug)]
pub struct ActivationCache {
    version: u64,
    batch: usize,
    shapes: Vec<Vec<usize>>,
    /// `values[l]` enters layer `l`; the last entry is the top output.
    values: Vec<Vec<f64>>,
    /// Item-local flat input indices for pooling layers, empty otherwise.
    argmax: Vec<Vec<usize>>,
}

impl ActivationCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Output of the topmost computed layer for every batch item.
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("cache always holds the input")
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty")
    }

    /// Activations leaving layer `layer` (batch-major).
    pub fn layer_output(&self, layer: usize) -> Option<&[f64]> {
        self.values.get(layer + 1).map(Vec::as_slice)
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    shapes: Vec<Vec<usize>>,
    params: ParamStore,
    slots: Vec<Option<ParamSlot>>,
    version: u64,
}

impl Network {
    /// Allocate and initialize parameters per the config's scheme and seed.
    pub fn build(config: NetworkConfig) -> Result<Network> {
        let shapes = config.shape_table()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut entries = Vec::new();
        for (i, layer) in config.layers.iter().enumerate() {
            let Some((wshape, fan_in)) = weight_shape(&layer.kind, &shapes[i]) else {
                continue;
            };
            let std = match (config.init, layer.kind) {
                (InitScheme::Zeros, _) => 0.0,
                (InitScheme::Gaussian(std), _) => std,
                (InitScheme::Reference, LayerKind::Conv { .. }) => 0.01,
                (InitScheme::Reference, _) => 1.0 / (fan_in as f64).sqrt(),
            };
            let weight = if std > 0.0 {
                let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                Tensor::from_fn(wshape.clone(), |_| normal.sample(&mut rng))
            } else {
                Tensor::zeros(wshape.clone())
            };
            entries.push((format!("{}.weight", layer.name), weight));
            entries.push((format!("{}.bias", layer.name), Tensor::zeros([wshape[0]])));
        }
        Self::from_params(config, ParamStore::new(entries))
    }

    /// Attach an existing parameter store; every tensor must match the shape
    /// the config implies.
    pub fn from_params(config: NetworkConfig, params: ParamStore) -> Result<Network> {
        let shapes = config.shape_table()?;
        let mut slots = Vec::with_capacity(config.layers.len());
        let mut next = 0;
        for (i, layer) in config.layers.iter().enumerate() {
            let Some((wshape, _)) = weight_shape(&layer.kind, &shapes[i]) else {
                slots.push(None);
                continue;
            };
            for (offset, suffix, shape) in [(0, "weight", wshape.clone()), (1, "bias", vec![wshape[0]])] {
                let want = format!("{}.{suffix}", layer.name);
                match params.entries.get(next + offset) {
                    Some((name, t)) if *name == want && t.shape() == shape.as_slice() => {}
                    Some((name, t)) => {
                        return Err(Error::shape(format!(
                            "parameter `{name}` {:?} does not match `{want}` {shape:?}",
                            t.shape()
                        )))
                    }
                    None => return Err(Error::shape(format!("missing parameter `{want}`"))),
                }
            }
            slots.push(Some(ParamSlot {
                weight: next,
                bias: next + 1,
            }));
            next += 2;
        }
        if next != params.len() {
            return Err(Error::shape(format!(
                "{} parameter tensors supplied, config uses {next}",
                params.len()
            )));
        }
        Ok(Network {
            config,
            shapes,
            params,
            slots,
            version: fresh_version(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    /// Per-item shapes at each layer boundary, input first.
    pub fn shape_table(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable parameters; invalidates every outstanding activation cache.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.version = fresh_version();
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.element_count()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.config
            .layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::invalid(format!("no layer named `{name}`")))
    }

    /// Class scores `F[j, y]` for a batch `[n, C, H, W]`.
    pub fn forward_batch(&self, images: &Tensor) -> Result<(ScoreMatrix, ActivationCache)> {
        let cache = self.forward_upto(images, self.config.layers.len(), &self.shapes)?;
        let scores = Matrix::new(cache.batch, self.config.classes, cache.output().to_vec())?;
        Ok((scores, cache))
    }

    /// `Σ_{j,y} loss_grad[j,y] · ∂f_y(x_j)/∂w`, accumulated over the batch in
    /// item order.
    pub fn backward_params(&self, cache: &ActivationCache, loss_grad: &LossGrad) -> Result<ParamGrads> {
        self.check_cache(cache, self.config.layers.len())?;
        if loss_grad.rows() != cache.batch || loss_grad.cols() != self.config.classes {
            return Err(Error::shape(format!(
                "loss gradient is {}x{}, expected {}x{}",
                loss_grad.rows(),
                loss_grad.cols(),
                cache.batch,
                self.config.classes
            )));
        }
        let mut grads = ParamStore::zeros_like(&self.params);
        self.backward_range(cache, 0..cache.batch, loss_grad.data().to_vec(), Some(&mut grads), false)?;
        Ok(grads)
    }

    /// `∂f_node(x_item)/∂x` for the full network, `node` indexing classes.
    pub fn backward_input(&self, cache: &ActivationCache, node: usize, item: usize) -> Result<Tensor> {
        self.check_cache(cache, self.config.layers.len())?;
        self.node_input_grad(cache, node, item)
    }

    /// Scalar sub-network ending at `layer`, selecting `channel` of its
    /// output. Shares this network's parameters.
    pub fn truncate_at(&self, layer: &str, channel: usize) -> Result<Truncated<'_>> {
        let index = self.layer_index(layer)?;
        let input_shape = self.required_input_shape(layer)?;
        let shapes = config::propagate(&input_shape, &self.config.layers[..=index])?;
        let top = shapes.last().expect("non-empty");
        if top.iter().product::<usize>() != top[0] {
            return Err(Error::shape(format!(
                "layer `{layer}` output {top:?} is not a single spatial position"
            )));
        }
        if channel >= top[0] {
            return Err(Error::invalid(format!(
                "channel {channel} out of range: layer `{layer}` has {} channels",
                top[0]
            )));
        }
        Ok(Truncated {
            net: self,
            top: index + 1,
            channel,
            shapes,
        })
    }

    /// Smallest `[C, H, W]` input for which `layer`'s output is spatially 1x1.
    /// Layers at or above the first non-spatial layer use the configured input.
    pub fn required_input_shape(&self, layer: &str) -> Result<[usize; 3]> {
        let index = self.layer_index(layer)?;
        let stack = &self.config.layers[..=index];
        if self.shapes[index + 1].len() != 3 {
            return Ok(self.config.input_shape);
        }
        let (mut h, mut w) = (1usize, 1usize);
        for spec in stack.iter().rev() {
            match spec.kind {
                LayerKind::Conv {
                    kernel, stride, pad, ..
                } => {
                    let invert = |out: usize| -> Result<usize> {
                        ((out - 1) * stride + kernel).checked_sub(2 * pad).filter(|&s| s > 0).ok_or_else(|| {
                            Error::shape(format!(
                                "no input extent makes `{}` produce a 1x1 response",
                                spec.name
                            ))
                        })
                    };
                    h = invert(h)?;
                    w = invert(w)?;
                }
                LayerKind::MaxPool { window, stride } => {
                    h = (h - 1) * stride + window;
                    w = (w - 1) * stride + window;
                }
                LayerKind::Relu => {}
                LayerKind::Dense { .. } | LayerKind::Flatten => {
                    return Err(Error::shape(format!(
                        "layer `{}` has no spatial semantics",
                        spec.name
                    )))
                }
            }
        }
        let shape = [self.config.input_shape[0], h, w];
        let check = config::propagate(&shape, stack)?;
        debug_assert_eq!(&check.last().expect("non-empty")[1..], &[1, 1]);
        Ok(shape)
    }

    /// Predicted class per item (lowest index wins ties).
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let (scores, _) = self.forward_batch(images)?;
        Ok((0..scores.rows()).map(|r| scores.row_argmax(r)).collect())
    }

    fn check_cache(&self, cache: &ActivationCache, top: usize) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cached: cache.version,
                current: self.version,
            });
        }
        if cache.values.len() != top + 1 {
            return Err(Error::invalid(format!(
                "cache covers {} layers, expected {top}",
                cache.values.len() - 1
            )));
        }
        Ok(())
    }

    fn forward_upto(&self, images: &Tensor, top: usize, shapes: &[Vec<usize>]) -> Result<ActivationCache> {
        let item_shape = &shapes[0];
        let batch = match images.shape().split_first() {
            Some((&n, rest)) if rest == item_shape.as_slice() => n,
            _ => {
                return Err(Error::shape(format!(
                    "images {:?} do not match [n, {}]",
                    images.shape(),
                    item_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
                )))
            }
        };
        let mut values = Vec::with_capacity(top + 1);
        let mut argmax = Vec::with_capacity(top);
        values.push(images.data().to_vec());
        let mut scratch = ConvScratch::default();
        for (l, spec) in self.config.layers[..top].iter().enumerate() {
            let input = values.last().expect("non-empty");
            let in_len: usize = shapes[l].iter().product();
            let out_len: usize = shapes[l + 1].iter().product();
            let mut out = vec![0.0; batch * out_len];
            let mut winners = Vec::new();
            match spec.kind {
                LayerKind::Conv { stride, pad, .. } => {
                    let g = self.conv_geometry(l, &shapes[l], stride, pad)?;
                    let slot = self.slots[l].expect("conv has params");
                    let kernels = self.params.tensor(slot.weight).data();
                    let bias = self.params.tensor(slot.bias).data();
                    for (x, y) in input.chunks_exact(in_len).zip(out.chunks_exact_mut(out_len)) {
                        conv2d_forward_into(&g, x, kernels, bias, y, &mut scratch);
                    }
                }
                LayerKind::MaxPool { window, stride } => {
                    let g = PoolGeometry::new(dims3(&shapes[l])?, window, stride)?;
                    winners = vec![0; batch * out_len];
                    for ((x, y), idx) in input
                        .chunks_exact(in_len)
                        .zip(out.chunks_exact_mut(out_len))
                        .zip(winners.chunks_exact_mut(out_len))
                    {
                        maxpool_forward_into(&g, x, y, idx);
                    }
                }
                LayerKind::Dense { outputs } => {
                    let slot = self.slots[l].expect("dense has params");
                    let weight = self.params.tensor(slot.weight);
                    if weight.shape()[1] != in_len {
                        return Err(Error::shape(format!(
                            "layer `{}` expects {} inputs, got {in_len}",
                            spec.name,
                            weight.shape()[1]
                        )));
                    }
                    dense_forward_batch(
                        batch,
                        in_len,
                        outputs,
                        input,
                        weight.data(),
                        self.params.tensor(slot.bias).data(),
                        &mut out,
                    );
                }
                LayerKind::Relu => {
                    for (y, &x) in out.iter_mut().zip(input.iter()) {
                        *y = x.max(0.0);
                    }
                }
                LayerKind::Flatten => out.copy_from_slice(input),
            }
            values.push(out);
            argmax.push(winners);
        }
        Ok(ActivationCache {
            version: self.version,
            batch,
            shapes: shapes[..=top].to_vec(),
            values,
            argmax,
        })
    }

    fn conv_geometry(&self, layer: usize, input: &[usize], stride: usize, pad: usize) -> Result<ConvGeometry> {
        let slot = self.slots[layer].expect("conv has params");
        let k = self.params.tensor(slot.weight).shape();
        ConvGeometry::new(dims3(input)?, [k[0], k[1], k[2], k[3]], stride, pad)
    }

    /// Backpropagate `top_grad` (rows for `items`) from the cache's top layer.
    /// Returns the input gradient for `items` when requested.
    fn backward_range(
        &self,
        cache: &ActivationCache,
        items: std::ops::Range<usize>,
        top_grad: Vec<f64>,
        mut param_grads: Option<&mut ParamStore>,
        want_input: bool,
    ) -> Result<Option<Vec<f64>>> {
        let top = cache.values.len() - 1;
        let count = items.len();
        let out_len: usize = cache.shapes[top].iter().product();
        if top_grad.len() != count * out_len {
            return Err(Error::shape("top gradient does not match cache output"));
        }
        let mut upstream = top_grad;
        let mut scratch = ConvScratch::default();
        for l in (0..top).rev() {
            let spec = &self.config.layers[l];
            let in_len: usize = cache.shapes[l].iter().product();
            let out_len: usize = cache.shapes[l + 1].iter().product();
            let need_down = l > 0 || want_input;
            let input = &cache.values[l][items.start * in_len..items.end * in_len];
            let mut down = if need_down { vec![0.0; count * in_len] } else { Vec::new() };
            match spec.kind {
                LayerKind::Conv { stride, pad, .. } => {
                    let g = self.conv_geometry(l, &cache.shapes[l], stride, pad)?;
                    let slot = self.slots[l].expect("conv has params");
                    let kernels = self.params.tensor(slot.weight).data();
                    for j in 0..count {
                        let up = &upstream[j * out_len..(j + 1) * out_len];
                        let x = &input[j * in_len..(j + 1) * in_len];
                        let gi = need_down.then(|| &mut down[j * in_len..(j + 1) * in_len]);
                        let gp = param_grads.as_deref_mut().map(|p| p.pair_mut(slot));
                        conv2d_backward_into(&g, up, x, kernels, gi, gp, &mut scratch);
                    }
                }
                LayerKind::MaxPool { .. } => {
                    if need_down {
                        let winners = &cache.argmax[l][items.start * out_len..items.end * out_len];
                        for j in 0..count {
                            maxpool_backward_into(
                                &upstream[j * out_len..(j + 1) * out_len],
                                &winners[j * out_len..(j + 1) * out_len],
                                &mut down[j * in_len..(j + 1) * in_len],
                            );
                        }
                    }
                }
                LayerKind::Dense { outputs } => {
                    let slot = self.slots[l].expect("dense has params");
                    let weight = self.params.tensor(slot.weight).data();
                    dense_backward_batch(
                        count,
                        in_len,
                        outputs,
                        &upstream,
                        input,
                        weight,
                        need_down.then_some(down.as_mut_slice()),
                        param_grads.as_deref_mut().map(|p| p.pair_mut(slot)),
                    );
                }
                LayerKind::Relu => {
                    if need_down {
                        for ((d, &u), &x) in down.iter_mut().zip(&upstream).zip(input) {
                            *d = if x > 0.0 { u } else { 0.0 };
                        }
                    }
                }
                LayerKind::Flatten => {
                    if need_down {
                        down.copy_from_slice(&upstream);
                    }
                }
            }
            if !need_down {
                break;
            }
            upstream = down;
        }
        Ok(want_input.then_some(upstream))
    }

    fn node_input_grad(&self, cache: &ActivationCache, node: usize, item: usize) -> Result<Tensor> {
        let out_len: usize = cache.output_shape().iter().product();
        if node >= out_len {
            return Err(Error::invalid(format!("node {node} out of range for {out_len} outputs")));
        }
        if item >= cache.batch {
            return Err(Error::invalid(format!(
                "item {item} out of range for batch of {}",
                cache.batch
            )));
        }
        let mut top = vec![0.0; out_len];
        top[node] = 1.0;
        let grad = self
            .backward_range(cache, item..item + 1, top, None, true)?
            .expect("input gradient requested");
        Tensor::new(cache.shapes[0].clone(), grad)
    }
}

fn dims3(shape: &[usize]) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(shape).map_err(|_| Error::shape(format!("expected [C,H,W], got {shape:?}")))
}

/// Weight shape and fan-in for parameterized layers.
fn weight_shape(kind: &LayerKind, input: &[usize]) -> Option<(Vec<usize>, usize)> {
    match *kind {
        LayerKind::Conv {
            out_channels,
            kernel,
            ..
        } => Some((
            vec![out_channels, input[0], kernel, kernel],
            input[0] * kernel * kernel,
        )),
        LayerKind::Dense { outputs } => {
            let d = input.iter().product();
            Some((vec![outputs, d], d))
        }
        _ => None,
    }
}

/// A scalar node: one output channel of one layer, evaluated on the input
/// size that makes that layer's response a single spatial position.
#[derive(Clone, Debug)]
pub struct Truncated<'a> {
    net: &'a Network,
    top: usize,
    channel: usize,
    shapes: Vec<Vec<usize>>,
}

impl<'a> Truncated<'a> {
    pub fn network(&self) -> &'a Network {
        self.net
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn channel(&self) -> usize {
        self.channel
    }

    pub fn layer_name(&self) -> &str {
        &self.net.config.layers[self.top - 1].name
    }

    fn batch_of_one(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.input_shape() {
            return Err(Error::shape(format!(
                "node `{}`/{} expects input {:?}, got {:?}",
                self.layer_name(),
                self.channel,
                self.input_shape(),
                x.shape()
            )));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        x.reshape(shape)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(f64, ActivationCache)> {
        let cache = self.net.forward_upto(&self.batch_of_one(x)?, self.top, &self.shapes)?;
        Ok((cache.output()[self.channel], cache))
    }

    pub fn value(&self, x: &Tensor) -> Result<f64> {
        Ok(self.forward(x)?.0)
    }

    /// Node value and `∂node/∂x`, with unpooling routed by the winners of
    /// the forward pass on `x` itself.
    pub fn value_and_input_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let (value, cache) = self.forward(x)?;
        let grad = self.net.node_input_grad(&cache, self.channel, 0)?;
        Ok((value, grad))
    }

    /// `∂node/∂w` laid out like the parent network's parameters (layers
    /// above the node contribute zeros).
    pub fn backward_params(&self, cache: &ActivationCache) -> Result<ParamGrads> {
        self.net.check_cache(cache, self.top)?;
        let mut top = vec![0.0; cache.output().len()];
        top[self.channel] = 1.0;
        let mut grads = ParamStore::zeros_like(&self.net.params);
        self.net.backward_range(cache, 0..1, top, Some(&mut grads), false)?;
        Ok(grads)
    }
}
