//! Feed-forward classifiers with exact reverse-mode gradients.
//!
//! A [`Network`] is a sequential stack of [`LayerSpec`]s. The forward pass
//! records a [`Trace`] holding every intermediate needed by the backward pass,
//! which walks the stack in reverse and produces the gradient of a scalar
//! objective with respect to the input and, on request, the parameters.
//!
//! Samples are processed in batches: a batch is a flat buffer of `n` samples,
//! each laid out row-major in the network's input shape (`C×H×W` for images).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, Op};
use crate::tensor::{log_softmax, softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Shapes of the (weight, bias) pair, if the layer is parametric.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { input, output } => Some((vec![output, input], vec![output])),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    fn output_shape(&self, layer: usize, input: &[usize]) -> Result<Vec<usize>> {
        let err = |detail: String| Error::LayerShape {
            layer,
            kind: self.name(),
            detail,
        };
        match *self {
            LayerSpec::Dense { input: i, output } => {
                if input != [i] {
                    return Err(err(format!("expects [{i}], got {input:?}")));
                }
                if i == 0 || output == 0 {
                    return Err(err("zero-sized dense layer".into()));
                }
                Ok(vec![output])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = input else {
                    return Err(err(format!("expects [C,H,W], got {input:?}")));
                };
                if *c != in_channels {
                    return Err(err(format!("expects {in_channels} channels, got {c}")));
                }
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err(err("zero kernel, stride or channel count".into()));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(err(format!("kernel {kernel} larger than padded input")));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { kernel, stride } => {
                let [c, h, w] = input else {
                    return Err(err(format!("expects [C,H,W], got {input:?}")));
                };
                if kernel == 0 || stride == 0 || *h < kernel || *w < kernel {
                    return Err(err(format!("window {kernel} does not fit {h}x{w}")));
                }
                Ok(vec![*c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Weight and bias of one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Scalar objectives whose input gradient the engine can compute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Maximum softmax probability.
    IdScore,
    /// `-log softmax(z)[label]`.
    CrossEntropy(usize),
    /// Raw logit of one output unit.
    Logit(usize),
}

/// Sequential classifier: architecture plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Option<Params>>,
    shapes: Vec<Vec<usize>>,
}

/// Intermediates recorded by a forward pass.
pub struct Trace {
    batch: usize,
    /// `activations[i]` is the input of layer `i`; the last entry holds the logits.
    activations: Vec<Vec<f64>>,
    /// im2col buffers for convolutions, argmax indices for pooling.
    aux: Vec<Aux>,
}

enum Aux {
    None,
    Cols(Vec<f64>),
    Argmax(Vec<usize>),
}

impl Trace {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn logits(&self) -> &[f64] {
        self.activations.last().expect("trace has logits")
    }
}

impl Network {
    /// Builds a network, checking shape compatibility of every layer and
    /// every parameter tensor.
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: Vec<Option<Params>>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidBundle("network has no layers".into()));
        }
        if params.len() != layers.len() {
            return Err(Error::InvalidBundle(format!(
                "{} parameter slots for {} layers",
                params.len(),
                layers.len()
            )));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("invalid input shape {input_shape:?}")));
        }
        let shapes = Self::infer_shapes(&input_shape, &layers)?;
        if shapes.last().map(|s| s.len()) != Some(1) {
            return Err(Error::InvalidBundle(format!(
                "final layer must produce a vector, got {:?}",
                shapes.last()
            )));
        }
        for (i, (layer, p)) in layers.iter().zip(&params).enumerate() {
            match (layer.param_shapes(), p) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) => {
                    if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                        return Err(Error::LayerShape {
                            layer: i,
                            kind: layer.name(),
                            detail: format!(
                                "parameters {:?}/{:?}, expected {ws:?}/{bs:?}",
                                p.weight.shape(),
                                p.bias.shape()
                            ),
                        });
                    }
                    if !p.weight.all_finite() || !p.bias.all_finite() {
                        return Err(Error::NonFinite(format!("parameters of layer {i}")));
                    }
                }
                (Some(_), None) => {
                    return Err(Error::InvalidBundle(format!("layer {i} is missing weights")))
                }
                (None, Some(_)) => {
                    return Err(Error::InvalidBundle(format!(
                        "layer {i} ({}) takes no weights",
                        layer.name()
                    )))
                }
            }
        }
        Ok(Self {
            input_shape,
            layers,
            params,
            shapes,
        })
    }

    /// Output shape after every layer.
    pub fn infer_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            cur = layer.output_shape(i, &cur)?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// He-initialised network with zero biases.
    pub fn random<R: Rng>(input_shape: Vec<usize>, layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let params = layers
            .iter()
            .map(|l| {
                l.param_shapes().map(|(ws, bs)| {
                    let fan_in: usize = ws[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                    let n: usize = ws.iter().product();
                    let w: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
                    Params {
                        weight: Tensor::new(ws, w).unwrap(),
                        bias: Tensor::zeros(&bs),
                    }
                })
            })
            .collect();
        Self::new(input_shape, layers, params)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<Params>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Params> {
        self.params.iter_mut().flatten()
    }

    pub fn num_outputs(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    pub fn num_parameters(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    /// Rounds all parameters onto the single-precision grid.
    pub fn quantize_f32(&mut self) {
        for p in self.params_mut() {
            p.weight.quantize_f32();
            p.bias.quantize_f32();
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::LayerShape {
                layer: 0,
                kind: self.layers[0].name(),
                detail: format!(
                    "input shape {:?}, model expects {:?}",
                    input.shape(),
                    self.input_shape
                ),
            });
        }
        Ok(())
    }

    /// Logits `z = f(x)` for one input.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let trace = self.forward(input.data(), 1)?;
        Ok(Tensor::from_slice(trace.logits()))
    }

    /// Logits for a batch of `n` inputs, row-major `[n, c]`.
    pub fn logits_batch(&self, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self.forward(inputs, n)?.activations.pop().unwrap())
    }

    /// Forward pass over a batch of `n` inputs.
    pub fn forward(&self, inputs: &[f64], n: usize) -> Result<Trace> {
        if inputs.len() != n * self.input_len() {
            return Err(Error::LayerShape {
                layer: 0,
                kind: self.layers[0].name(),
                detail: format!(
                    "batch buffer of {} values does not hold {n} inputs of shape {:?}",
                    inputs.len(),
                    self.input_shape
                ),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        activations.push(inputs.to_vec());
        let mut in_shape = self.input_shape.as_slice();
        for (i, layer) in self.layers.iter().enumerate() {
            let x = activations.last().unwrap();
            let out_shape = &self.shapes[i];
            let (y, a) = match *layer {
                LayerSpec::Dense { input, output } => {
                    let p = self.params[i].as_ref().unwrap();
                    let mut y = vec![0.0; n * output];
                    for row in y.chunks_mut(output) {
                        row.copy_from_slice(p.bias.data());
                    }
                    gemm(n, input, output, x, Op::N, p.weight.data(), Op::T, 1.0, &mut y);
                    (y, Aux::None)
                }
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let p = self.params[i].as_ref().unwrap();
                    let geom = ConvGeom::new(in_shape, out_shape, kernel, stride, padding);
                    // Columns of all samples side by side: [patch, n·spatial].
                    let width = n * geom.spatial;
                    let mut cols = vec![0.0; geom.patch * width];
                    let in_len = geom.in_len();
                    for s in 0..n {
                        geom.im2col(&x[s * in_len..(s + 1) * in_len], &mut cols, width, s * geom.spatial);
                    }
                    let mut wide = vec![0.0; geom.out_channels * width];
                    gemm(geom.out_channels, geom.patch, width, p.weight.data(), Op::N, &cols, Op::N, 0.0, &mut wide);
                    let mut y = vec![0.0; n * geom.out_channels * geom.spatial];
                    for (o, row) in wide.chunks(width).enumerate() {
                        let b = p.bias.data()[o];
                        for (s, src) in row.chunks(geom.spatial).enumerate() {
                            let dst = &mut y[(s * geom.out_channels + o) * geom.spatial..][..geom.spatial];
                            for (d, v) in dst.iter_mut().zip(src) {
                                *d = v + b;
                            }
                        }
                    }
                    (y, Aux::Cols(cols))
                }
                LayerSpec::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), Aux::None),
                LayerSpec::MaxPool2d { kernel, stride } => {
                    let (y, idx) = maxpool_forward(x, n, in_shape, out_shape, kernel, stride);
                    (y, Aux::Argmax(idx))
                }
                LayerSpec::Flatten => (x.clone(), Aux::None),
            };
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} ({})", layer.name())));
            }
            activations.push(y);
            aux.push(a);
            in_shape = out_shape;
        }
        Ok(Trace {
            batch: n,
            activations,
            aux,
        })
    }

    /// Reverse pass. `dlogits` is the gradient of the objective with respect
    /// to the logits (`[n, c]`); returns the `[n, input_len]` input gradient.
    pub fn backward(&self, trace: &Trace, dlogits: &[f64]) -> Vec<f64> {
        self.reverse(trace, dlogits, None, true)
    }

    /// Reverse pass accumulating parameter gradients into `grads`; the input
    /// gradient is not formed.
    pub fn backward_params(&self, trace: &Trace, dlogits: &[f64], grads: &mut Gradients) {
        self.reverse(trace, dlogits, Some(grads), false);
    }

    fn reverse(
        &self,
        trace: &Trace,
        dlogits: &[f64],
        mut param_grads: Option<&mut Gradients>,
        want_input: bool,
    ) -> Vec<f64> {
        let n = trace.batch;
        let mut grad = dlogits.to_vec();
        for i in (0..self.layers.len()).rev() {
            let x = &trace.activations[i];
            let in_shape: &[usize] = if i == 0 {
                &self.input_shape
            } else {
                &self.shapes[i - 1]
            };
            grad = match self.layers[i] {
                LayerSpec::Dense { input, output } => {
                    let p = self.params[i].as_ref().unwrap();
                    if let Some(g) = param_grads.as_deref_mut() {
                        let slot = g.slots[i].as_mut().unwrap();
                        gemm(output, n, input, &grad, Op::T, x, Op::N, 1.0, slot.weight.data_mut());
                        let db = slot.bias.data_mut();
                        for row in grad.chunks(output) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                    if i == 0 && !want_input {
                        return Vec::new();
                    }
                    let mut dx = vec![0.0; n * input];
                    gemm(n, output, input, &grad, Op::N, p.weight.data(), Op::N, 0.0, &mut dx);
                    dx
                }
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let p = self.params[i].as_ref().unwrap();
                    let geom = ConvGeom::new(in_shape, &self.shapes[i], kernel, stride, padding);
                    let Aux::Cols(cols) = &trace.aux[i] else {
                        unreachable!("conv layer without im2col buffer")
                    };
                    let width = n * geom.spatial;
                    let in_len = geom.in_len();
                    // dY rearranged to [out, n·spatial] to match the column layout.
                    let mut dwide = vec![0.0; geom.out_channels * width];
                    for s in 0..n {
                        for o in 0..geom.out_channels {
                            let src = &grad[(s * geom.out_channels + o) * geom.spatial..][..geom.spatial];
                            dwide[o * width + s * geom.spatial..][..geom.spatial].copy_from_slice(src);
                        }
                    }
                    if let Some(g) = param_grads.as_deref_mut() {
                        let slot = g.slots[i].as_mut().unwrap();
                        gemm(
                            geom.out_channels,
                            width,
                            geom.patch,
                            &dwide,
                            Op::N,
                            cols,
                            Op::T,
                            1.0,
                            slot.weight.data_mut(),
                        );
                        for (o, row) in dwide.chunks(width).enumerate() {
                            slot.bias.data_mut()[o] += row.iter().sum::<f64>();
                        }
                    }
                    if i == 0 && !want_input {
                        return Vec::new();
                    }
                    let mut dcols = vec![0.0; geom.patch * width];
                    gemm(
                        geom.patch,
                        geom.out_channels,
                        width,
                        p.weight.data(),
                        Op::T,
                        &dwide,
                        Op::N,
                        0.0,
                        &mut dcols,
                    );
                    let mut dx = vec![0.0; n * in_len];
                    for s in 0..n {
                        geom.col2im(&dcols, width, s * geom.spatial, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                    dx
                }
                LayerSpec::Relu => grad
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
                LayerSpec::MaxPool2d { .. } => {
                    let Aux::Argmax(idx) = &trace.aux[i] else {
                        unreachable!("pool layer without argmax buffer")
                    };
                    let mut dx = vec![0.0; x.len()];
                    for (g, &j) in grad.iter().zip(idx) {
                        dx[j] += g;
                    }
                    dx
                }
                LayerSpec::Flatten => grad,
            };
        }
        grad
    }

    /// Gradient of `objective` with respect to the input.
    pub fn input_gradient(&self, input: &Tensor, objective: Objective) -> Result<Tensor> {
        self.check_input(input)?;
        let grads = self.input_gradients(input.data(), 1, &[objective])?;
        Tensor::new(self.input_shape.clone(), grads.1)
    }

    /// Batched input gradients. `objectives` has one entry per sample.
    /// Returns the objective values and the `[n, input_len]` gradient buffer.
    pub fn input_gradients(
        &self,
        inputs: &[f64],
        n: usize,
        objectives: &[Objective],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        assert_eq!(objectives.len(), n, "one objective per sample");
        let c = self.num_outputs();
        for obj in objectives {
            match *obj {
                Objective::CrossEntropy(label) | Objective::Logit(label) if label >= c => {
                    return Err(Error::InvalidLabel {
                        label,
                        num_classes: c,
                    })
                }
                _ => {}
            }
        }
        let trace = self.forward(inputs, n)?;
        let mut values = Vec::with_capacity(n);
        let mut dlogits = vec![0.0; n * c];
        for (s, (z, dz)) in trace
            .logits()
            .chunks(c)
            .zip(dlogits.chunks_mut(c))
            .enumerate()
        {
            values.push(objective_grad(z, objectives[s], dz));
        }
        let dx = self.backward(&trace, &dlogits);
        Ok((values, dx))
    }
}

/// Writes `d objective / d logits` into `dz` and returns the objective value.
pub fn objective_grad(z: &[f64], objective: Objective, dz: &mut [f64]) -> f64 {
    match objective {
        Objective::IdScore => {
            let p = softmax(z);
            let m = crate::tensor::argmax(&p);
            let pm = p[m];
            for (j, d) in dz.iter_mut().enumerate() {
                let delta = if j == m { 1.0 } else { 0.0 };
                *d = pm * (delta - p[j]);
            }
            pm
        }
        Objective::CrossEntropy(label) => {
            let p = softmax(z);
            for (j, d) in dz.iter_mut().enumerate() {
                *d = p[j] - if j == label { 1.0 } else { 0.0 };
            }
            -log_softmax(z)[label]
        }
        Objective::Logit(k) => {
            dz.fill(0.0);
            dz[k] = 1.0;
            z[k]
        }
    }
}

/// Parameter-gradient accumulator shaped like a network's parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub slots: Vec<Option<Params>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            slots: net
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| Params {
                        weight: Tensor::zeros(p.weight.shape()),
                        bias: Tensor::zeros(p.bias.shape()),
                    })
                })
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for p in self.slots.iter_mut().flatten() {
            p.weight.data_mut().fill(0.0);
            p.bias.data_mut().fill(0.0);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for p in self.slots.iter_mut().flatten() {
            p.weight.data_mut().iter_mut().for_each(|v| *v *= k);
            p.bias.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|p| p.weight.data().iter().chain(p.bias.data()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|p| p.weight.all_finite() && p.bias.all_finite())
    }
}

struct ConvGeom {
    in_channels: usize,
    h: usize,
    w: usize,
    out_channels: usize,
    oh: usize,
    ow: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    patch: usize,
    spatial: usize,
}

impl ConvGeom {
    fn new(input: &[usize], output: &[usize], kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels: input[0],
            h: input[1],
            w: input[2],
            out_channels: output[0],
            oh: output[1],
            ow: output[2],
            kernel,
            stride,
            padding,
            patch: input[0] * kernel * kernel,
            spatial: output[1] * output[2],
        }
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.h * self.w
    }

    /// Output columns `ox` whose source column `ox·stride + kx − padding`
    /// lies inside the image.
    fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        let lo = self.padding.saturating_sub(kx).div_ceil(self.stride);
        let hi = (self.w + self.padding).saturating_sub(kx).div_ceil(self.stride).min(self.ow);
        lo..hi.max(lo)
    }

    /// Writes this sample's patches into rows of `cols` (row length `width`)
    /// starting at column `offset`.
    fn im2col(&self, x: &[f64], cols: &mut [f64], width: usize, offset: usize) {
        let k = self.kernel;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * width + offset..][..self.spatial];
                    let xs = self.valid_cols(kx);
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let y = (oy * self.stride + ky) as isize - self.padding as isize;
                        if y < 0 || y >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + y as usize) * self.w..][..self.w];
                        line[..xs.start].fill(0.0);
                        line[xs.end..].fill(0.0);
                        for ox in xs.clone() {
                            line[ox] = src[ox * self.stride + kx - self.padding];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: accumulates into `dx`.
    fn col2im(&self, cols: &[f64], width: usize, offset: usize, dx: &mut [f64]) {
        let k = self.kernel;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * width + offset..][..self.spatial];
                    let xs = self.valid_cols(kx);
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + ky) as isize - self.padding as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        let dst = &mut dx[(c * self.h + y as usize) * self.w..][..self.w];
                        for ox in xs.clone() {
                            dst[ox * self.stride + kx - self.padding] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling; each output records the flat batch index of its argmax
/// (first index in row-major window order wins ties).
fn maxpool_forward(
    x: &[f64],
    n: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    kernel: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (oy * stride) * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let j = base + (oy * stride + ky) * w + ox * stride + kx;
                            if x[j] > x[best] {
                                best = j;
                            }
                        }
                    }
                    y.push(x[best]);
                    idx.push(best);
                }
            }
        }
    }
    (y, idx)
}
