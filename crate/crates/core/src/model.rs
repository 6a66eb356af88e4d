//! Small convolutional classifiers: specification, parameters, inference.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Rows per forward pass in the tape-free inference helpers.
/// Largest batch recorded on one tape; bigger batches are split so saved
/// activations stay cache-resident.
pub(crate) const TAPE_CHUNK: usize = 16;
const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    /// 2×2 max-pool after the activation.
    #[serde(default)]
    pub pool: bool,
}

fn one() -> usize {
    1
}

/// Architecture: `conv → relu [→ pool]` blocks, flatten, hidden
/// `dense → relu` layers, then a final dense layer producing logits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvNetSpec {
    /// `[channels, height, width]`
    pub input: [usize; 3],
    #[serde(default)]
    pub convs: Vec<ConvLayer>,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Default for ConvNetSpec {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl ConvNetSpec {
    /// Three 3×3 conv blocks (16/32/64 channels, pooled) and one dense layer
    /// over 3×32×32 inputs and 16 classes.
    pub fn desk_default() -> Self {
        let block = |out_channels| ConvLayer {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            pool: true,
        };
        Self {
            input: [3, 32, 32],
            convs: vec![block(16), block(32), block(64)],
            hidden: Vec::new(),
            classes: 16,
        }
    }

    /// A single dense layer from the flattened input straight to logits.
    pub fn linear(input: [usize; 3], classes: usize) -> Self {
        Self {
            input,
            convs: Vec::new(),
            hidden: Vec::new(),
            classes,
        }
    }

    /// Feature-map dims after each conv block, then the flatten width.
    pub fn feature_dims(&self) -> Result<(Vec<[usize; 3]>, usize)> {
        if self.classes < 2 {
            return Err(Error::shape(format!(
                "a classifier needs at least 2 classes, got {}",
                self.classes
            )));
        }
        let [mut c, mut h, mut w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("empty input dims {:?}", self.input)));
        }
        let mut dims = Vec::with_capacity(self.convs.len());
        for (i, layer) in self.convs.iter().enumerate() {
            let g = kernels::ConvGeometry::new(
                &[1, c, h, w],
                &[layer.out_channels, c, layer.kernel, layer.kernel],
                layer.stride,
                layer.padding,
            )
            .map_err(|e| Error::shape(format!("conv layer {i}: {e}")))?;
            if layer.out_channels == 0 {
                return Err(Error::shape(format!("conv layer {i} has no output channels")));
            }
            (c, h, w) = (layer.out_channels, g.out_h, g.out_w);
            if layer.pool {
                if h < 2 || w < 2 {
                    return Err(Error::shape(format!("conv layer {i}: cannot pool a {h}×{w} map")));
                }
                (h, w) = (h / 2, w / 2);
            }
            dims.push([c, h, w]);
        }
        let flat = c * h * w;
        if flat == 0 || self.hidden.contains(&0) {
            return Err(Error::shape("flattened feature width must be positive"));
        }
        Ok((dims, flat))
    }

    /// Names and dims of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let (_, flat) = self.feature_dims()?;
        let mut shapes = Vec::new();
        let mut in_ch = self.input[0];
        for (i, layer) in self.convs.iter().enumerate() {
            shapes.push((
                format!("conv{i}.weight"),
                vec![layer.out_channels, in_ch, layer.kernel, layer.kernel],
            ));
            shapes.push((format!("conv{i}.bias"), vec![layer.out_channels]));
            in_ch = layer.out_channels;
        }
        let mut width = flat;
        for (i, &out) in self.hidden.iter().chain(std::iter::once(&self.classes)).enumerate() {
            shapes.push((format!("dense{i}.weight"), vec![out, width]));
            shapes.push((format!("dense{i}.bias"), vec![out]));
            width = out;
        }
        Ok(shapes)
    }
}

/// Named parameter tensors of a [`ConvNetSpec`] network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    spec: ConvNetSpec,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Assemble parameters, checking names and dims against the spec.
    pub fn from_named(spec: ConvNetSpec, named: Vec<(String, Tensor)>) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != named.len() {
            return Err(Error::shape(format!(
                "spec needs {} parameter tensors, got {}",
                shapes.len(),
                named.len()
            )));
        }
        for ((want_name, want_dims), (name, t)) in shapes.iter().zip(&named) {
            if want_name != name || want_dims.as_slice() != t.dims() {
                return Err(Error::shape(format!(
                    "expected parameter {want_name} {want_dims:?}, found {name} {:?}",
                    t.dims()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self { spec, names, tensors })
    }

    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Same architecture with every weight and bias set to zero.
    pub fn zeroed(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.dims())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Fresh parameters: weights uniform in ±sqrt(6 / fan_in) drawn from a
/// SplitMix64 stream seeded with `seed` in storage order, biases zero.
pub fn build_cnn(spec: &ConvNetSpec, seed: u64) -> Result<ModelParams> {
    let mut rng = rng::seeded(seed);
    let named = spec
        .param_shapes()?
        .into_iter()
        .map(|(name, dims)| {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&dims)
            } else {
                let fan_in: usize = dims[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = dims.iter().product();
                let data = (0..n).map(|_| rng::uniform(&mut rng, -bound, bound)).collect();
                Tensor::new(dims, data).expect("dims and data built together")
            };
            (name, t)
        })
        .collect();
    ModelParams::from_named(spec.clone(), named)
}

fn check_batch(spec: &ConvNetSpec, batch: &Tensor) -> Result<usize> {
    match batch.dims() {
        [n, c, h, w] if [*c, *h, *w] == spec.input => Ok(*n),
        other => Err(Error::shape(format!(
            "batch dims {other:?} do not match model input [N, {}, {}, {}]",
            spec.input[0], spec.input[1], spec.input[2]
        ))),
    }
}

fn forward_chunk(params: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    let spec = &params.spec;
    let t = &params.tensors;
    let mut x = batch.clone();
    for (i, layer) in spec.convs.iter().enumerate() {
        let (y, _) = kernels::conv2d(&x, &t[2 * i], &t[2 * i + 1], layer.stride, layer.padding, false)?;
        x = y;
        x.data_mut().iter_mut().for_each(|v| *v = crate::tape::relu(*v));
        if layer.pool {
            x = kernels::max_pool2_values(&x)?;
        }
    }
    let (n, d) = x.outer_split()?;
    x = x.reshape(&[n, d])?;
    let base = 2 * spec.convs.len();
    for i in 0..spec.hidden.len() {
        x = kernels::dense(&x, &t[base + 2 * i], &t[base + 2 * i + 1])?.map(crate::tape::relu);
    }
    let last = base + 2 * spec.hidden.len();
    kernels::dense(&x, &t[last], &t[last + 1])
}

/// Logits `[N, classes]` for a `[N, C, H, W]` batch.
pub fn predict_logits(params: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    let n = check_batch(&params.spec, batch)?;
    if n <= INFERENCE_CHUNK {
        return forward_chunk(params, batch);
    }
    let per = batch.len() / n;
    let mut parts = Vec::with_capacity(n.div_ceil(INFERENCE_CHUNK));
    for start in (0..n).step_by(INFERENCE_CHUNK) {
        let end = (start + INFERENCE_CHUNK).min(n);
        let mut dims = batch.dims().to_vec();
        dims[0] = end - start;
        let chunk = Tensor::new(dims, batch.data()[start * per..end * per].to_vec())?;
        parts.push(forward_chunk(params, &chunk)?);
    }
    Tensor::stack_outer(&parts)
}

/// Argmax class per row, ties to the lowest index.
pub fn predict_classes(params: &ModelParams, batch: &Tensor) -> Result<Vec<usize>> {
    let logits = predict_logits(params, batch)?;
    Ok(logits.data().chunks(params.spec.classes).map(kernels::argmax).collect())
}

/// Per-example cross-entropy against `labels`.
pub fn example_losses(params: &ModelParams, batch: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let logits = predict_logits(params, batch)?;
    Ok(kernels::cross_entropy_rows(&logits, labels)?.0)
}

/// Parameter handles of a network recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapedParams {
    pub vars: Vec<Var>,
}

impl TapedParams {
    /// Record parameters as differentiable inputs.
    pub fn inputs(tape: &mut Tape, params: &ModelParams) -> Self {
        Self {
            vars: params.tensors.iter().map(|t| tape.input(t.clone())).collect(),
        }
    }

    /// Record parameters as constants (no parameter gradients).
    pub fn constants(tape: &mut Tape, params: &ModelParams) -> Self {
        Self {
            vars: params.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }
}

/// Forward pass recorded on `tape`; returns the logits node.
pub fn forward_on_tape(tape: &mut Tape, spec: &ConvNetSpec, params: &TapedParams, x: Var) -> Result<Var> {
    check_batch(spec, tape.value(x))?;
    let p = &params.vars;
    if p.len() != 2 * (spec.convs.len() + spec.hidden.len() + 1) {
        return Err(Error::shape("parameter handles do not match the spec"));
    }
    let mut h = x;
    for (i, layer) in spec.convs.iter().enumerate() {
        h = tape.conv2d(h, p[2 * i], p[2 * i + 1], layer.stride, layer.padding)?;
        h = tape.relu(h);
        if layer.pool {
            h = tape.max_pool2(h)?;
        }
    }
    h = tape.flatten(h)?;
    let base = 2 * spec.convs.len();
    for i in 0..spec.hidden.len() {
        h = tape.dense(h, p[base + 2 * i], p[base + 2 * i + 1])?;
        h = tape.relu(h);
    }
    let last = base + 2 * spec.hidden.len();
    tape.dense(h, p[last], p[last + 1])
}

/// Fraction of examples whose argmax prediction equals the label.
pub fn accuracy(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::contract("accuracy of an empty dataset"));
    }
    let predicted = predict_classes(params, dataset.images())?;
    Ok(fraction_correct(&predicted, dataset.labels()))
}

pub(crate) fn fraction_correct(predicted: &[usize], labels: &[usize]) -> f64 {
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len() as f64
}

/// Anything that maps an image batch to class indices.
pub trait Classifier {
    fn classes(&self) -> usize;
    fn classify(&self, batch: &Tensor) -> Result<Vec<usize>>;
}

impl Classifier for ModelParams {
    fn classes(&self) -> usize {
        self.spec.classes
    }

    fn classify(&self, batch: &Tensor) -> Result<Vec<usize>> {
        predict_classes(self, batch)
    }
}
