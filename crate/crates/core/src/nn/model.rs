use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::layer::LayerSpec;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatMut, MatRef, Tensor};

/// Closed interval of valid pixel values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelDomain {
    pub lo: f64,
    pub hi: f64,
}

impl PixelDomain {
    pub const UNIT: PixelDomain = PixelDomain { lo: 0.0, hi: 1.0 };

    pub fn clamp<T: Element>(&self, x: &Tensor<T>) -> Tensor<T> {
        x.clamp(T::of(self.lo), T::of(self.hi))
    }
}

/// Which gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Want {
    pub params: bool,
    pub input: bool,
}

impl Want {
    pub const BOTH: Want = Want {
        params: true,
        input: true,
    };
    pub const PARAMS: Want = Want {
        params: true,
        input: false,
    };
    pub const INPUT: Want = Want {
        params: false,
        input: true,
    };
}

/// Result of one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Element = f32> {
    /// One tensor per parametric layer, shaped like the parameters.
    pub params: Option<Vec<Tensor<T>>>,
    /// Gradient with respect to the batch input, shaped like the input.
    pub input: Option<Tensor<T>>,
}

enum LayerCache<T> {
    Dense { input: Vec<T> },
    Conv { input: Vec<T> },
    Relu { output: Vec<T> },
    Pool { argmax: Vec<u32> },
    Flatten,
}

/// Activations retained by [`Model::forward_pass`] for a later backward pass.
pub struct ForwardPass<T: Element = f32> {
    batch: usize,
    caches: Vec<LayerCache<T>>,
    logits: Tensor<T>,
}

impl<T: Element> ForwardPass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Feed-forward classifier: a validated layer stack plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element = f32> {
    layers: Vec<LayerSpec>,
    params: Vec<Tensor<T>>,
    param_slot: Vec<Option<usize>>,
    /// `shapes[0]` is the per-example input shape, `shapes[i + 1]` the output of layer `i`.
    shapes: Vec<Vec<usize>>,
    num_classes: usize,
    pixel_domain: PixelDomain,
}

impl<T: Element> Model<T> {
    /// Builds a model with He-normal weights and zero biases.
    pub fn new<R: Rng + ?Sized>(
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        let params = layers
            .iter()
            .filter_map(|layer| {
                let [rows, cols] = layer.param_shape()?;
                let std = (2.0 / layer.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    for _ in 0..cols - 1 {
                        data.push(T::of(normal.sample(rng)));
                    }
                    data.push(T::zero());
                }
                Some(Tensor::from_vec(vec![rows, cols], data))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(input_shape, layers, params)
    }

    /// Builds a model around existing parameter tensors.
    pub fn from_params(
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        params: Vec<Tensor<T>>,
    ) -> Result<Self> {
        if input_shape.len() != 3 || input_shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape: input_shape.to_vec(),
                reason: "model input must be a positive (C, H, W) shape".into(),
            });
        }
        let mut shapes = vec![input_shape.to_vec()];
        let mut param_slot = Vec::with_capacity(layers.len());
        let mut next = 0;
        for (i, layer) in layers.iter().enumerate() {
            let out = layer.output_shape(i, shapes.last().expect("non-empty"))?;
            shapes.push(out);
            if let Some(shape) = layer.param_shape() {
                let p = params.get(next).ok_or_else(|| Error::Layer {
                    index: i,
                    layer: layer.name().into(),
                    reason: "missing parameter tensor".into(),
                })?;
                if p.shape() != shape {
                    return Err(Error::Layer {
                        index: i,
                        layer: layer.name().into(),
                        reason: format!(
                            "parameter shape {:?} does not match expected {:?}",
                            p.shape(),
                            shape
                        ),
                    });
                }
                param_slot.push(Some(next));
                next += 1;
            } else {
                param_slot.push(None);
            }
        }
        if next != params.len() {
            return Err(Error::InvalidConfig(format!(
                "{} parameter tensors given for {next} parametric layers",
                params.len()
            )));
        }
        let last = shapes.last().expect("non-empty");
        if last.len() != 1 {
            return Err(Error::InvalidConfig(format!(
                "final layer must produce a flat logit vector, got {last:?}"
            )));
        }
        let num_classes = last[0];
        Ok(Self {
            layers,
            params,
            param_slot,
            shapes,
            num_classes,
            pixel_domain: PixelDomain::UNIT,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pixel_domain(&self) -> PixelDomain {
        self.pixel_domain
    }

    pub fn with_pixel_domain(mut self, domain: PixelDomain) -> Self {
        self.pixel_domain = domain;
        self
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            layers: self.layers.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            param_slot: self.param_slot.clone(),
            shapes: self.shapes.clone(),
            num_classes: self.num_classes,
            pixel_domain: self.pixel_domain,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1..] != self.shapes[0][..] {
            let layer = self.layers.first().map(LayerSpec::name).unwrap_or("input");
            return Err(Error::Layer {
                index: 0,
                layer: layer.into(),
                reason: format!(
                    "expects input (B, {:?}), got {:?}",
                    self.shapes[0], shape
                ),
            });
        }
        Ok(shape[0])
    }

    /// Logits for a batch `(B, C, H, W)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run_forward(x, false)?.logits)
    }

    /// Forward pass retaining what the backward pass needs.
    pub fn forward_pass(&self, x: &Tensor<T>) -> Result<ForwardPass<T>> {
        self.run_forward(x, true)
    }

    /// Arg-max class per example; ties resolve to the lowest index.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(x)?))
    }

    fn run_forward(&self, x: &Tensor<T>, keep: bool) -> Result<ForwardPass<T>> {
        let batch = self.check_input(x)?;
        let mut act = x.data().to_vec();
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        for (i, layer) in self.layers.iter().enumerate() {
            let in_shape = &self.shapes[i];
            let out_shape = &self.shapes[i + 1];
            let (next, cache) = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    let w = self.params[self.param_slot[i].expect("parametric")].data();
                    let out = dense_forward(w, &act, batch, inputs, outputs);
                    (out, LayerCache::Dense { input: act })
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let geom = ConvGeom {
                        batch,
                        channels: in_channels,
                        height: in_shape[1],
                        width: in_shape[2],
                        kernel,
                        stride,
                        padding,
                        out_h: out_shape[1],
                        out_w: out_shape[2],
                    };
                    let w = self.params[self.param_slot[i].expect("parametric")].data();
                    let out = conv_forward(w, &act, &geom, out_channels);
                    (out, LayerCache::Conv { input: act })
                }
                LayerSpec::Relu => {
                    for v in act.iter_mut() {
                        if *v < T::zero() {
                            *v = T::zero();
                        }
                    }
                    let cache = if keep {
                        LayerCache::Relu {
                            output: act.clone(),
                        }
                    } else {
                        LayerCache::Flatten
                    };
                    (act, cache)
                }
                LayerSpec::MaxPool2x2 => {
                    let (out, argmax) = maxpool_forward(&act, batch, in_shape, out_shape);
                    (out, LayerCache::Pool { argmax })
                }
                LayerSpec::Flatten => (act, LayerCache::Flatten),
            };
            if keep {
                caches.push(cache);
            }
            act = next;
        }
        let logits = Tensor::from_vec(vec![batch, self.num_classes], act)?;
        logits.check_finite("forward pass")?;
        Ok(ForwardPass {
            batch,
            caches,
            logits,
        })
    }

    /// Back-propagates `seed = dL/dlogits` (shape `(B, num_classes)`) through a
    /// retained forward pass.
    pub fn backward_pass(
        &self,
        pass: &ForwardPass<T>,
        seed: &Tensor<T>,
        want: Want,
    ) -> Result<Gradients<T>> {
        let batch = pass.batch;
        seed.expect_shape(&[batch, self.num_classes], "backward seed")?;
        if pass.caches.len() != self.layers.len() {
            return Err(Error::InvalidConfig(
                "forward pass was not retained for backward".into(),
            ));
        }
        let first_param = if want.params {
            self.param_slot.iter().position(Option::is_some)
        } else {
            None
        };
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        let mut grad = seed.data().to_vec();
        let mut input_grad = None;
        for i in (0..self.layers.len()).rev() {
            let need_dx = want.input || first_param.is_some_and(|f| f < i);
            let in_shape = &self.shapes[i];
            let out_shape = &self.shapes[i + 1];
            let next: Option<Vec<T>> = match (&self.layers[i], &pass.caches[i]) {
                (&LayerSpec::Dense { inputs, outputs }, LayerCache::Dense { input }) => {
                    let slot = self.param_slot[i].expect("parametric");
                    let w = self.params[slot].data();
                    if want.params {
                        param_grads[slot] =
                            Some(dense_param_grad(input, &grad, batch, inputs, outputs)?);
                    }
                    need_dx.then(|| dense_input_grad(w, &grad, batch, inputs, outputs))
                }
                (
                    &LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    LayerCache::Conv { input },
                ) => {
                    let geom = ConvGeom {
                        batch,
                        channels: in_channels,
                        height: in_shape[1],
                        width: in_shape[2],
                        kernel,
                        stride,
                        padding,
                        out_h: out_shape[1],
                        out_w: out_shape[2],
                    };
                    let slot = self.param_slot[i].expect("parametric");
                    let w = self.params[slot].data();
                    if want.params {
                        param_grads[slot] = Some(conv_param_grad(&grad, input, &geom, out_channels)?);
                    }
                    need_dx.then(|| conv_input_grad(w, &grad, &geom, out_channels))
                }
                (LayerSpec::Relu, LayerCache::Relu { output }) => need_dx.then(|| {
                    grad.iter()
                        .zip(output)
                        .map(|(&g, &o)| if o > T::zero() { g } else { T::zero() })
                        .collect()
                }),
                (LayerSpec::MaxPool2x2, LayerCache::Pool { argmax }) => need_dx.then(|| {
                    let in_len = batch * in_shape.iter().product::<usize>();
                    let mut dx = vec![T::zero(); in_len];
                    for (&g, &src) in grad.iter().zip(argmax) {
                        dx[src as usize] += g;
                    }
                    dx
                }),
                (LayerSpec::Flatten, LayerCache::Flatten) => need_dx.then(|| grad.clone()),
                _ => {
                    return Err(Error::InvalidConfig(
                        "forward pass was not retained for backward".into(),
                    ))
                }
            };
            match next {
                Some(g) => grad = g,
                None => {
                    if want.params && param_grads.iter().all(Option::is_some) {
                        break;
                    }
                }
            }
            if i == 0 && want.input {
                let mut shape = vec![batch];
                shape.extend_from_slice(&self.shapes[0]);
                input_grad = Some(Tensor::from_vec(shape, std::mem::take(&mut grad))?);
            }
        }
        let params = if want.params {
            Some(
                param_grads
                    .into_iter()
                    .map(|g| g.expect("every parametric layer visited"))
                    .collect(),
            )
        } else {
            None
        };
        Ok(Gradients {
            params,
            input: input_grad,
        })
    }
}

/// Index of the largest entry in each row of a `(B, K)` tensor.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn dense_forward<T: Element>(
    w: &[T],
    x: &[T],
    batch: usize,
    inputs: usize,
    outputs: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * outputs);
    for _ in 0..batch {
        out.extend((0..outputs).map(|o| w[o * (inputs + 1) + inputs]));
    }
    let weights = MatRef {
        data: w,
        rows: outputs,
        cols: inputs,
        rs: inputs + 1,
        cs: 1,
    };
    gemm(
        MatRef::row_major(x, batch, inputs),
        weights.t(),
        T::one(),
        MatMut::row_major(&mut out, batch, outputs),
    );
    out
}

fn dense_param_grad<T: Element>(
    x: &[T],
    dy: &[T],
    batch: usize,
    inputs: usize,
    outputs: usize,
) -> Result<Tensor<T>> {
    let mut g = vec![T::zero(); outputs * (inputs + 1)];
    gemm(
        MatRef::row_major(dy, batch, outputs).t(),
        MatRef::row_major(x, batch, inputs),
        T::zero(),
        MatMut {
            data: &mut g,
            rows: outputs,
            cols: inputs,
            rs: inputs + 1,
            cs: 1,
        },
    );
    for row in dy.chunks(outputs) {
        for (o, &d) in row.iter().enumerate() {
            g[o * (inputs + 1) + inputs] += d;
        }
    }
    Tensor::from_vec(vec![outputs, inputs + 1], g)
}

fn dense_input_grad<T: Element>(
    w: &[T],
    dy: &[T],
    batch: usize,
    inputs: usize,
    outputs: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); batch * inputs];
    gemm(
        MatRef::row_major(dy, batch, outputs),
        MatRef {
            data: w,
            rows: outputs,
            cols: inputs,
            rs: inputs + 1,
            cs: 1,
        },
        T::zero(),
        MatMut::row_major(&mut dx, batch, inputs),
    );
    dx
}

/// Geometry of one conv layer applied to a batch.
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Source coordinate for output index `o` and kernel offset `k`, if inside the image.
    fn source(&self, o: usize, k: usize, side: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(self.padding)?;
        (pos < side).then_some(pos)
    }

    /// Unfolds one image into a `(C*k*k, OH*OW)` patch matrix.
    fn im2col<T: Element>(&self, x: &[T], cols: &mut [T]) {
        let p = self.positions();
        let plane = self.height * self.width;
        let dense = self.stride == 1 && self.padding == 0;
        if !dense {
            cols.fill(T::zero());
        }
        for c in 0..self.channels {
            let src = &x[c * plane..(c + 1) * plane];
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oh in 0..self.out_h {
                        let Some(ih) = self.source(oh, ki, self.height) else {
                            continue;
                        };
                        let src_row = &src[ih * self.width..(ih + 1) * self.width];
                        let dst_seg = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        if dense {
                            dst_seg.copy_from_slice(&src_row[kj..kj + self.out_w]);
                        } else {
                            for (ow, d) in dst_seg.iter_mut().enumerate() {
                                if let Some(iw) = self.source(ow, kj, self.width) {
                                    *d = src_row[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds one image's patch-matrix gradient back onto `dx`, summing overlaps.
    fn col2im<T: Element>(&self, dcols: &[T], dx: &mut [T]) {
        let p = self.positions();
        let plane = self.height * self.width;
        for c in 0..self.channels {
            let dst = &mut dx[c * plane..(c + 1) * plane];
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let src = &dcols[row * p..(row + 1) * p];
                    for oh in 0..self.out_h {
                        let Some(ih) = self.source(oh, ki, self.height) else {
                            continue;
                        };
                        let dst_row = &mut dst[ih * self.width..(ih + 1) * self.width];
                        let src_seg = &src[oh * self.out_w..(oh + 1) * self.out_w];
                        if self.stride == 1 && self.padding == 0 {
                            for (d, &g) in dst_row[kj..kj + self.out_w].iter_mut().zip(src_seg) {
                                *d += g;
                            }
                        } else {
                            for (ow, &g) in src_seg.iter().enumerate() {
                                if let Some(iw) = self.source(ow, kj, self.width) {
                                    dst_row[iw] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn weights<'a, T: Element>(&self, w: &'a [T], out_channels: usize) -> MatRef<'a, T> {
        let k = self.patch_len();
        MatRef {
            data: w,
            rows: out_channels,
            cols: k,
            rs: k + 1,
            cs: 1,
        }
    }
}

/// Per image: `y_b = W * cols_b + bias`, written straight into `(B, OC, P)`.
fn conv_forward<T: Element>(w: &[T], x: &[T], geom: &ConvGeom, out_channels: usize) -> Vec<T> {
    let k = geom.patch_len();
    let p = geom.positions();
    let mut out = Vec::with_capacity(geom.batch * out_channels * p);
    for _ in 0..geom.batch {
        for oc in 0..out_channels {
            out.extend(std::iter::repeat_n(w[oc * (k + 1) + k], p));
        }
    }
    let mut cols = vec![T::zero(); k * p];
    for (xb, yb) in x.chunks(geom.image_len()).zip(out.chunks_mut(out_channels * p)) {
        geom.im2col(xb, &mut cols);
        gemm(
            geom.weights(w, out_channels),
            MatRef::row_major(&cols, k, p),
            T::one(),
            MatMut::row_major(yb, out_channels, p),
        );
    }
    out
}

/// `dW = sum_b dy_b * cols_b^T`, bias gradient in the last column.
fn conv_param_grad<T: Element>(
    dy: &[T],
    x: &[T],
    geom: &ConvGeom,
    out_channels: usize,
) -> Result<Tensor<T>> {
    let k = geom.patch_len();
    let p = geom.positions();
    let mut g = vec![T::zero(); out_channels * (k + 1)];
    let mut cols = vec![T::zero(); k * p];
    for (xb, dyb) in x.chunks(geom.image_len()).zip(dy.chunks(out_channels * p)) {
        geom.im2col(xb, &mut cols);
        gemm(
            MatRef::row_major(dyb, out_channels, p),
            MatRef::row_major(&cols, k, p).t(),
            T::one(),
            MatMut {
                data: &mut g,
                rows: out_channels,
                cols: k,
                rs: k + 1,
                cs: 1,
            },
        );
        for (oc, row) in dyb.chunks(p).enumerate() {
            g[oc * (k + 1) + k] += row.iter().copied().sum();
        }
    }
    Tensor::from_vec(vec![out_channels, k + 1], g)
}

/// Per image: `dcols_b = W^T * dy_b`, folded back with col2im.
fn conv_input_grad<T: Element>(w: &[T], dy: &[T], geom: &ConvGeom, out_channels: usize) -> Vec<T> {
    let k = geom.patch_len();
    let p = geom.positions();
    let mut dx = vec![T::zero(); geom.batch * geom.image_len()];
    let mut dcols = vec![T::zero(); k * p];
    for (dxb, dyb) in dx.chunks_mut(geom.image_len()).zip(dy.chunks(out_channels * p)) {
        gemm(
            geom.weights(w, out_channels).t(),
            MatRef::row_major(dyb, out_channels, p),
            T::zero(),
            MatMut::row_major(&mut dcols, k, p),
        );
        geom.col2im(&dcols, dxb);
    }
    dx
}

fn maxpool_forward<T: Element>(
    x: &[T],
    batch: usize,
    in_shape: &[usize],
    out_shape: &[usize],
) -> (Vec<T>, Vec<u32>) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    let mut argmax = Vec::with_capacity(batch * c * oh * ow);
    for plane in 0..batch * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + (2 * i) * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best as u32);
            }
        }
    }
    (out, argmax)
}
