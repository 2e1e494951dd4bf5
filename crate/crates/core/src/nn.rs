//! Small convolutional networks with hand-derived adjoints.
//!
//! A [`Network`] is an immutable architecture; its parameters live in a flat
//! `Vec<f64>` owned by the caller so that weights can be optimized, frozen or
//! serialized as a single vector. Forward passes record a [`Trace`] that the
//! matching backward pass consumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::sigmoid;

/// Channel-major feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_plane(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        Self {
            channels: 1,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        Shape(self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub usize, pub usize, pub usize);

impl Shape {
    pub fn len(self) -> usize {
        self.0 * self.1 * self.2
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.0, self.1, self.2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// 3x3 convolution, zero padding 1.
    Conv3x3 {
        cin: usize,
        cout: usize,
        stride: usize,
    },
    Relu,
    /// 2x2 max pooling with stride 2 (odd trailing row/column dropped).
    MaxPool2,
    GlobalAvgPool,
    /// Fully connected layer over the flattened input.
    Dense { inputs: usize, outputs: usize },
    /// Per-channel sigmoid gating driven by the channel mean:
    /// `out_c = F_c * sigmoid(w_c * mean(F_c) + b_c)`.
    ChannelGate { channels: usize },
}

impl Layer {
    fn param_tensors(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Layer::Conv3x3 { cin, cout, .. } => {
                vec![("weight", vec![cout, cin, 3, 3]), ("bias", vec![cout])]
            }
            Layer::Dense { inputs, outputs } => {
                vec![("weight", vec![outputs, inputs]), ("bias", vec![outputs])]
            }
            Layer::ChannelGate { channels } => {
                vec![("scale", vec![channels]), ("bias", vec![channels])]
            }
            _ => Vec::new(),
        }
    }

    fn param_count(&self) -> usize {
        self.param_tensors()
            .iter()
            .map(|(_, d)| d.iter().product::<usize>())
            .sum()
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        let Shape(c, h, w) = input;
        let mismatch = |expected: String| Error::ShapeMismatch {
            expected,
            got: input.to_string(),
        };
        match *self {
            Layer::Conv3x3 { cin, cout, stride } => {
                if c != cin || stride == 0 {
                    return Err(mismatch(format!("{cin} input channels")));
                }
                Ok(Shape(cout, (h - 1) / stride + 1, (w - 1) / stride + 1))
            }
            Layer::Relu => Ok(input),
            Layer::MaxPool2 => {
                if h < 2 || w < 2 {
                    return Err(mismatch("spatial size >= 2".into()));
                }
                Ok(Shape(c, h / 2, w / 2))
            }
            Layer::GlobalAvgPool => Ok(Shape(c, 1, 1)),
            Layer::Dense { inputs, outputs } => {
                if input.len() != inputs {
                    return Err(mismatch(format!("{inputs} flattened inputs")));
                }
                Ok(Shape(outputs, 1, 1))
            }
            Layer::ChannelGate { channels } => {
                if c != channels {
                    return Err(mismatch(format!("{channels} channels")));
                }
                Ok(input)
            }
        }
    }
}

/// Named parameter tensor inside a network's flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: Shape,
    layers: Vec<Layer>,
    shapes: Vec<Shape>,
    offsets: Vec<usize>,
    n_params: usize,
}

enum Cache {
    Conv { col: Vec<f64> },
    Relu { input: Vec<f64> },
    MaxPool { argmax: Vec<usize> },
    None,
    Dense { input: Vec<f64> },
    Gate { input: Vec<f64>, means: Vec<f64>, gates: Vec<f64> },
}

/// Intermediate values recorded by [`Network::forward`].
pub struct Trace {
    caches: Vec<Cache>,
}

impl Network {
    pub fn new(input: Shape, layers: Vec<Layer>) -> Result<Self> {
        let mut shapes = Vec::with_capacity(layers.len());
        let mut offsets = Vec::with_capacity(layers.len());
        let mut shape = input;
        let mut n_params = 0;
        for layer in &layers {
            shape = layer.output_shape(shape)?;
            shapes.push(shape);
            offsets.push(n_params);
            n_params += layer.param_count();
        }
        Ok(Self {
            input,
            layers,
            shapes,
            offsets,
            n_params,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().unwrap_or(&self.input)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    pub fn param_tensors(&self) -> Vec<ParamTensor> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut offset = self.offsets[i];
            for (name, dims) in layer.param_tensors() {
                let n: usize = dims.iter().product();
                out.push(ParamTensor {
                    name: format!("layer{i}.{name}"),
                    dims,
                    offset,
                });
                offset += n;
            }
        }
        out
    }

    /// He-normal weights, zero biases, neutral gates.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.n_params];
        for (i, layer) in self.layers.iter().enumerate() {
            let off = self.offsets[i];
            let (fan_in, count) = match *layer {
                Layer::Conv3x3 { cin, cout, .. } => (cin * 9, cout * cin * 9),
                Layer::Dense { inputs, outputs } => (inputs, inputs * outputs),
                _ => continue,
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            for p in &mut params[off..off + count] {
                *p = normal.sample(&mut rng);
            }
        }
        params
    }

    /// Parameter range `[start, end)` of the last dense layer, if any.
    pub fn last_dense_range(&self) -> Option<std::ops::Range<usize>> {
        self.layers
            .iter()
            .enumerate()
            .rev()
            .find(|(_, l)| matches!(l, Layer::Dense { .. }))
            .map(|(i, l)| self.offsets[i]..self.offsets[i] + l.param_count())
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.n_params),
                got: format!("{} parameters", params.len()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Result<(Tensor, Trace)> {
        self.check_params(params)?;
        if x.shape() != self.input {
            return Err(Error::ShapeMismatch {
                expected: self.input.to_string(),
                got: x.shape().to_string(),
            });
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = &params[self.offsets[i]..self.offsets[i] + layer.param_count()];
            let out_shape = self.shapes[i];
            let (next, cache) = forward_layer(layer, p, cur, out_shape);
            caches.push(cache);
            cur = next;
        }
        Ok((cur, Trace { caches }))
    }

    /// Forward pass without recording a trace.
    pub fn infer(&self, params: &[f64], x: &Tensor) -> Result<Tensor> {
        self.forward(params, x).map(|(out, _)| out)
    }

    /// Propagates `grad_out` back through the recorded trace. Parameter
    /// gradients are accumulated into `param_grad` when provided. Returns the
    /// input gradient when `want_input_grad` is set.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &Trace,
        grad_out: Tensor,
        mut param_grad: Option<&mut [f64]>,
        want_input_grad: bool,
    ) -> Option<Tensor> {
        debug_assert_eq!(grad_out.shape(), self.output_shape());
        let mut grad = grad_out;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let range = self.offsets[i]..self.offsets[i] + layer.param_count();
            let in_shape = if i == 0 { self.input } else { self.shapes[i - 1] };
            let pg = param_grad.as_deref_mut().map(|g| &mut g[range.clone()]);
            // Nothing upstream needs the gradient once no earlier layer has
            // parameters and the caller does not want the input gradient.
            let need_in = want_input_grad || self.offsets[i] > 0;
            if !need_in {
                backward_params_only(layer, &params[range], &trace.caches[i], &grad, in_shape, pg);
                return None;
            }
            grad = backward_layer(layer, &params[range], &trace.caches[i], grad, in_shape, pg);
        }
        Some(grad)
    }
}

fn conv_out(h: usize, stride: usize) -> usize {
    (h - 1) / stride + 1
}

fn im2col(x: &Tensor, stride: usize) -> Vec<f64> {
    let (c, h, w) = (x.channels, x.height, x.width);
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let n = oh * ow;
    let mut col = vec![0.0; c * 9 * n];
    for ci in 0..c {
        let plane = x.plane(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], shape: Shape, stride: usize) -> Tensor {
    let Shape(c, h, w) = shape;
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let n = oh * ow;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let plane = &mut out.data[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += col[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a` (m x k), `b` (k x n)
    // and a contiguous row-major `c` (m x n); all lengths are checked by the
    // callers' shape bookkeeping.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn forward_layer(layer: &Layer, p: &[f64], x: Tensor, out: Shape) -> (Tensor, Cache) {
    match *layer {
        Layer::Conv3x3 { cin, cout, stride } => {
            let col = im2col(&x, stride);
            let n = out.1 * out.2;
            let k = cin * 9;
            let (w, b) = p.split_at(cout * k);
            let mut y = Tensor::zeros(out.0, out.1, out.2);
            for (co, chunk) in y.data.chunks_mut(n).enumerate() {
                chunk.fill(b[co]);
            }
            gemm(cout, k, n, w, (k, 1), &col, (n, 1), 1.0, &mut y.data);
            (y, Cache::Conv { col })
        }
        Layer::Relu => {
            let mut y = x.clone();
            for v in &mut y.data {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            (y, Cache::Relu { input: x.data })
        }
        Layer::MaxPool2 => {
            let Shape(c, oh, ow) = out;
            let (h, w) = (x.height, x.width);
            let mut y = Tensor::zeros(c, oh, ow);
            let mut argmax = vec![0; c * oh * ow];
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ci * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                                if x.data[idx] > best_v {
                                    best_v = x.data[idx];
                                    best = idx;
                                }
                            }
                        }
                        let o = ci * oh * ow + oy * ow + ox;
                        y.data[o] = best_v;
                        argmax[o] = best;
                    }
                }
            }
            (y, Cache::MaxPool { argmax })
        }
        Layer::GlobalAvgPool => {
            let n = (x.height * x.width) as f64;
            let data = (0..x.channels).map(|c| x.plane(c).iter().sum::<f64>() / n).collect();
            (
                Tensor {
                    channels: x.channels,
                    height: 1,
                    width: 1,
                    data,
                },
                Cache::None,
            )
        }
        Layer::Dense { inputs, outputs } => {
            let (w, b) = p.split_at(inputs * outputs);
            let mut y = Tensor::zeros(outputs, 1, 1);
            y.data.copy_from_slice(b);
            gemm(outputs, inputs, 1, w, (inputs, 1), &x.data, (1, 1), 1.0, &mut y.data);
            (y, Cache::Dense { input: x.data })
        }
        Layer::ChannelGate { channels } => {
            let (scale, bias) = p.split_at(channels);
            let hw = x.height * x.width;
            let means: Vec<f64> = (0..channels)
                .map(|c| x.plane(c).iter().sum::<f64>() / hw as f64)
                .collect();
            let gates: Vec<f64> = (0..channels)
                .map(|c| sigmoid(scale[c] * means[c] + bias[c]))
                .collect();
            let mut y = x.clone();
            for (c, chunk) in y.data.chunks_mut(hw).enumerate() {
                for v in chunk {
                    *v *= gates[c];
                }
            }
            (
                y,
                Cache::Gate {
                    input: x.data,
                    means,
                    gates,
                },
            )
        }
    }
}

fn backward_layer(
    layer: &Layer,
    p: &[f64],
    cache: &Cache,
    grad: Tensor,
    in_shape: Shape,
    pg: Option<&mut [f64]>,
) -> Tensor {
    match (layer, cache) {
        (&Layer::Conv3x3 { cin, cout, stride }, Cache::Conv { col }) => {
            let n = grad.height * grad.width;
            let k = cin * 9;
            if let Some(pg) = pg {
                conv_param_grad(cout, k, n, col, &grad.data, pg);
            }
            let mut dcol = vec![0.0; k * n];
            gemm(k, cout, n, &p[..cout * k], (1, k), &grad.data, (n, 1), 0.0, &mut dcol);
            col2im(&dcol, in_shape, stride)
        }
        (Layer::Relu, Cache::Relu { input }) => {
            let mut g = grad;
            for (v, &x) in g.data.iter_mut().zip(input) {
                if x <= 0.0 {
                    *v = 0.0;
                }
            }
            g
        }
        (Layer::MaxPool2, Cache::MaxPool { argmax }) => {
            let mut g = Tensor::zeros(in_shape.0, in_shape.1, in_shape.2);
            for (&idx, &v) in argmax.iter().zip(&grad.data) {
                g.data[idx] += v;
            }
            g
        }
        (Layer::GlobalAvgPool, _) => {
            let hw = in_shape.1 * in_shape.2;
            let mut g = Tensor::zeros(in_shape.0, in_shape.1, in_shape.2);
            for (c, chunk) in g.data.chunks_mut(hw).enumerate() {
                chunk.fill(grad.data[c] / hw as f64);
            }
            g
        }
        (&Layer::Dense { inputs, outputs }, Cache::Dense { input }) => {
            if let Some(pg) = pg {
                dense_param_grad(inputs, outputs, input, &grad.data, pg);
            }
            let mut g = Tensor::zeros(in_shape.0, in_shape.1, in_shape.2);
            gemm(inputs, outputs, 1, &p[..inputs * outputs], (1, inputs), &grad.data, (1, 1), 0.0, &mut g.data);
            g
        }
        (&Layer::ChannelGate { channels }, Cache::Gate { input, means, gates }) => {
            let hw = in_shape.1 * in_shape.2;
            let scale = &p[..channels];
            let mut g = Tensor::zeros(in_shape.0, in_shape.1, in_shape.2);
            let mut dscale = vec![0.0; channels];
            let mut dbias = vec![0.0; channels];
            for c in 0..channels {
                let go = &grad.data[c * hw..(c + 1) * hw];
                let fi = &input[c * hw..(c + 1) * hw];
                let dot: f64 = go.iter().zip(fi).map(|(a, b)| a * b).sum();
                let dpre = dot * gates[c] * (1.0 - gates[c]);
                dscale[c] = dpre * means[c];
                dbias[c] = dpre;
                let via_mean = dpre * scale[c] / hw as f64;
                for (d, &o) in g.data[c * hw..(c + 1) * hw].iter_mut().zip(go) {
                    *d = o * gates[c] + via_mean;
                }
            }
            if let Some(pg) = pg {
                for c in 0..channels {
                    pg[c] += dscale[c];
                    pg[channels + c] += dbias[c];
                }
            }
            g
        }
        _ => unreachable!("trace does not match network layers"),
    }
}

fn backward_params_only(
    layer: &Layer,
    _p: &[f64],
    cache: &Cache,
    grad: &Tensor,
    _in_shape: Shape,
    pg: Option<&mut [f64]>,
) {
    let Some(pg) = pg else { return };
    match (layer, cache) {
        (&Layer::Conv3x3 { cin, cout, .. }, Cache::Conv { col }) => {
            conv_param_grad(cout, cin * 9, grad.height * grad.width, col, &grad.data, pg);
        }
        (&Layer::Dense { inputs, outputs }, Cache::Dense { input }) => {
            dense_param_grad(inputs, outputs, input, &grad.data, pg);
        }
        _ => {}
    }
}

fn conv_param_grad(cout: usize, k: usize, n: usize, col: &[f64], grad: &[f64], pg: &mut [f64]) {
    let (dw, db) = pg.split_at_mut(cout * k);
    gemm(cout, n, k, grad, (n, 1), col, (1, n), 1.0, dw);
    for (co, chunk) in grad.chunks(n).enumerate() {
        db[co] += chunk.iter().sum::<f64>();
    }
}

fn dense_param_grad(inputs: usize, outputs: usize, input: &[f64], grad: &[f64], pg: &mut [f64]) {
    let (dw, db) = pg.split_at_mut(inputs * outputs);
    for (o, &go) in grad.iter().enumerate() {
        if go == 0.0 {
            continue;
        }
        for (d, &x) in dw[o * inputs..(o + 1) * inputs].iter_mut().zip(input) {
            *d += go * x;
        }
        db[o] += go;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{fd_gradient, max_relative_error};
    use rand::Rng;

    fn random_tensor(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor {
            channels: shape.0,
            height: shape.1,
            width: shape.2,
            data: (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn weighted_sum(out: &Tensor, w: &[f64]) -> f64 {
        out.data.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    fn toy_net() -> Network {
        Network::new(
            Shape(1, 8, 8),
            vec![
                Layer::Conv3x3 { cin: 1, cout: 3, stride: 1 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv3x3 { cin: 3, cout: 4, stride: 2 },
                Layer::ChannelGate { channels: 4 },
                Layer::Relu,
                Layer::Dense { inputs: 16, outputs: 3 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn shapes_and_counts() {
        let net = toy_net();
        assert_eq!(net.output_shape(), Shape(3, 1, 1));
        assert_eq!(net.param_count(), (3 * 9 + 3) + (4 * 27 + 4) + 8 + (16 * 3 + 3));
        let total: usize = net
            .param_tensors()
            .iter()
            .map(|t| t.dims.iter().product::<usize>())
            .sum();
        assert_eq!(total, net.param_count());
    }

    #[test]
    fn rejects_bad_input() {
        let net = toy_net();
        let p = net.init_params(1);
        assert!(net.forward(&p, &Tensor::zeros(1, 7, 8)).is_err());
        assert!(net.forward(&p[1..], &Tensor::zeros(1, 8, 8)).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let net = Network::new(Shape(2, 5, 6), vec![Layer::Conv3x3 { cin: 2, cout: 3, stride: 2 }]).unwrap();
        let p = net.init_params(3);
        let x = random_tensor(Shape(2, 5, 6), 4);
        let y = net.infer(&p, &x).unwrap();
        let Shape(_, oh, ow) = net.output_shape();
        for co in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = p[3 * 18 + co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                    acc += p[co * 18 + ci * 9 + ky * 3 + kx]
                                        * x.data[ci * 30 + iy as usize * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((acc - y.data[co * oh * ow + oy * ow + ox]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn input_and_param_gradients_match_fd() {
        let net = toy_net();
        let mut p = net.init_params(11);
        // Non-trivial gates.
        let gate = net.param_tensors().into_iter().find(|t| t.name == "layer4.scale").unwrap();
        for i in 0..8 {
            p[gate.offset + i] = 0.3 * (i as f64 - 3.0);
        }
        let x = random_tensor(Shape(1, 8, 8), 12);
        let w = [0.7, -1.3, 0.4];
        let (out, trace) = net.forward(&p, &x).unwrap();
        let mut pg = vec![0.0; p.len()];
        let gout = Tensor { channels: 3, height: 1, width: 1, data: w.to_vec() };
        let gx = net.backward(&p, &trace, gout, Some(&mut pg), true).unwrap();
        let _ = out;

        let fd_x = fd_gradient(
            |v| weighted_sum(&net.infer(&p, &Tensor::from_plane(8, 8, v.to_vec())).unwrap(), &w),
            &x.data,
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(&gx.data, &fd_x) < 1e-4);

        let fd_p = fd_gradient(|q| weighted_sum(&net.infer(q, &x).unwrap(), &w), &p, 1e-6).unwrap();
        assert!(max_relative_error(&pg, &fd_p) < 1e-4, "{}", max_relative_error(&pg, &fd_p));
    }

    #[test]
    fn params_only_backward_matches_full() {
        let net = toy_net();
        let p = net.init_params(5);
        let x = random_tensor(Shape(1, 8, 8), 6);
        let (_, trace) = net.forward(&p, &x).unwrap();
        let gout = Tensor { channels: 3, height: 1, width: 1, data: vec![1.0, 0.5, -2.0] };
        let mut a = vec![0.0; p.len()];
        let mut b = vec![0.0; p.len()];
        net.backward(&p, &trace, gout.clone(), Some(&mut a), true);
        assert!(net.backward(&p, &trace, gout, Some(&mut b), false).is_none());
        assert_eq!(a, b);
    }
}
