//! Minimal layer set with explicit forward caches and backward passes.
//!
//! Activations are `N × features` matrices. Convolutional activations are
//! stored channels-last (NHWC) so a row is `H * W * C` values.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f32>,
    pub grad: Array2<f32>,
}

impl Param {
    pub fn new(value: Array2<f32>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn uniform(rows: usize, cols: usize, bound: f32, rng: &mut impl Rng) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self::new(Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng)))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// How a layer's weights are drawn at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))` weights, zero bias. For layers followed by ReLU.
    HeUniform,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and bias.
    FanIn,
}

/// Affine map `x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(input: usize, output: usize, init: Init, rng: &mut impl Rng) -> Self {
        let fan_in = input.max(1) as f32;
        match init {
            Init::HeUniform => Self {
                weight: Param::uniform(input, output, (6.0 / fan_in).sqrt(), rng),
                bias: Param::zeros(1, output),
            },
            Init::FanIn => {
                let bound = 1.0 / fan_in.sqrt();
                Self {
                    weight: Param::uniform(input, output, bound, rng),
                    bias: Param::uniform(1, output, bound, rng),
                }
            }
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Param::zeros(input, output), bias: Param::zeros(1, output) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight.value);
        y += &self.bias.value;
        y
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `x`.
    pub fn backward(&mut self, x: &Array2<f32>, grad_out: &Array2<f32>, need_input: bool) -> Option<Array2<f32>> {
        self.weight.grad += &x.t().dot(grad_out);
        self.bias.grad += &grad_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        need_input.then(|| grad_out.dot(&self.weight.value.t()))
    }

    pub fn params(&self) -> [(&'static str, &Param); 2] {
        [("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Param); 2] {
        [("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

/// 3×3 convolution, stride 1, zero padding 1, on NHWC activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    /// `(9 * in_channels) × out_channels`, row index `(ky * 3 + kx) * in_channels + c`.
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (9 * in_channels) as f32;
        Self {
            in_channels,
            out_channels,
            height,
            width,
            weight: Param::uniform(9 * in_channels, out_channels, (6.0 / fan_in).sqrt(), rng),
            bias: Param::zeros(1, out_channels),
        }
    }

    fn im2col(&self, x: &Array2<f32>) -> Array2<f32> {
        let (h, w, c) = (self.height, self.width, self.in_channels);
        let n = x.nrows();
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut cols = Array2::<f32>::zeros((n * h * w, 9 * c));
        let dst = cols.as_slice_mut().expect("fresh array");
        let row_len = 9 * c;
        for img in 0..n {
            let base = img * h * w * c;
            for y in 0..h {
                for xx in 0..w {
                    let out_row = (img * h * w + y * w + xx) * row_len;
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let from = base + (sy as usize * w + sx as usize) * c;
                            let to = out_row + (ky * 3 + kx) * c;
                            dst[to..to + c].copy_from_slice(&src[from..from + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f32>, n: usize) -> Array2<f32> {
        let (h, w, c) = (self.height, self.width, self.in_channels);
        let cols = cols.as_standard_layout();
        let src = cols.as_slice().expect("standard layout");
        let mut x = Array2::<f32>::zeros((n, h * w * c));
        let dst = x.as_slice_mut().expect("fresh array");
        let row_len = 9 * c;
        for img in 0..n {
            let base = img * h * w * c;
            for y in 0..h {
                for xx in 0..w {
                    let col_row = (img * h * w + y * w + xx) * row_len;
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let to = base + (sy as usize * w + sx as usize) * c;
                            let from = col_row + (ky * 3 + kx) * c;
                            for ch in 0..c {
                                dst[to + ch] += src[from + ch];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    fn forward_cols(&self, cols: &Array2<f32>, n: usize) -> Array2<f32> {
        let mut y = cols.dot(&self.weight.value);
        y += &self.bias.value;
        y.into_shape_with_order((n, self.height * self.width * self.out_channels))
            .expect("contiguous conv output")
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        self.forward_cols(&self.im2col(x), x.nrows())
    }

    fn forward_train(&self, x: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
        let cols = self.im2col(x);
        (self.forward_cols(&cols, x.nrows()), cols)
    }

    fn backward(&mut self, cols: &Array2<f32>, grad_out: &Array2<f32>, need_input: bool) -> Option<Array2<f32>> {
        let n = grad_out.nrows();
        let g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * self.height * self.width, self.out_channels))
            .expect("contiguous grad");
        self.weight.grad += &cols.t().dot(&g);
        self.bias.grad += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
        need_input.then(|| self.col2im(&g.dot(&self.weight.value.t()), n))
    }
}

/// 2×2 max pooling, stride 2, on NHWC activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl MaxPool2 {
    fn out_len(&self) -> usize {
        (self.height / 2) * (self.width / 2) * self.channels
    }

    fn pool(&self, x: &Array2<f32>) -> (Array2<f32>, Vec<u32>) {
        let (h, w, c) = (self.height, self.width, self.channels);
        let (oh, ow) = (h / 2, w / 2);
        let n = x.nrows();
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut out = Array2::<f32>::zeros((n, self.out_len()));
        let mut idx = vec![0u32; n * self.out_len()];
        let dst = out.as_slice_mut().expect("fresh array");
        for img in 0..n {
            let base = img * h * w * c;
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            let v = src[base + i];
                            if v > best {
                                best = v;
                                best_i = i;
                            }
                        }
                        let o = img * self.out_len() + (oy * ow + ox) * c + ch;
                        dst[o] = best;
                        idx[o] = best_i as u32;
                    }
                }
            }
        }
        (out, idx)
    }

    fn backward(&self, idx: &[u32], grad_out: &Array2<f32>) -> Array2<f32> {
        let n = grad_out.nrows();
        let in_len = self.height * self.width * self.channels;
        let mut gx = Array2::<f32>::zeros((n, in_len));
        let g = grad_out.as_standard_layout();
        let src = g.as_slice().expect("standard layout");
        let dst = gx.as_slice_mut().expect("fresh array");
        let out_len = self.out_len();
        for img in 0..n {
            for o in 0..out_len {
                dst[img * in_len + idx[img * out_len + o] as usize] += src[img * out_len + o];
            }
        }
        gx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(Linear),
    Conv(Conv2d),
    Relu,
    MaxPool(MaxPool2),
}

#[derive(Debug)]
pub(crate) enum LayerCache {
    Linear(Array2<f32>),
    Conv(Array2<f32>),
    Relu(Array2<f32>),
    MaxPool(Vec<u32>),
}

impl Layer {
    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv(c) => c.forward(x),
            Layer::Relu => x.mapv(|v| v.max(0.0)),
            Layer::MaxPool(p) => p.pool(x).0,
        }
    }

    pub(crate) fn forward_train(&self, x: Array2<f32>) -> (Array2<f32>, LayerCache) {
        match self {
            Layer::Linear(l) => (l.forward(&x), LayerCache::Linear(x)),
            Layer::Conv(c) => {
                let (y, cols) = c.forward_train(&x);
                (y, LayerCache::Conv(cols))
            }
            Layer::Relu => {
                let y = x.mapv(|v| v.max(0.0));
                (y.clone(), LayerCache::Relu(y))
            }
            Layer::MaxPool(p) => {
                let (y, idx) = p.pool(&x);
                (y, LayerCache::MaxPool(idx))
            }
        }
    }

    pub(crate) fn backward(
        &mut self,
        cache: &LayerCache,
        grad_out: Array2<f32>,
        need_input: bool,
    ) -> Option<Array2<f32>> {
        match (self, cache) {
            (Layer::Linear(l), LayerCache::Linear(x)) => l.backward(x, &grad_out, need_input),
            (Layer::Conv(c), LayerCache::Conv(cols)) => c.backward(cols, &grad_out, need_input),
            (Layer::Relu, LayerCache::Relu(y)) => {
                let mut g = grad_out;
                g.zip_mut_with(y, |gv, &yv| {
                    if yv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                Some(g)
            }
            (Layer::MaxPool(p), LayerCache::MaxPool(idx)) => Some(p.backward(idx, &grad_out)),
            _ => unreachable!("layer/cache mismatch"),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Param)> {
        match self {
            Layer::Linear(l) => l.params().to_vec(),
            Layer::Conv(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
            Layer::Relu | Layer::MaxPool(_) => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        match self {
            Layer::Linear(l) => {
                let [a, b] = l.params_mut();
                vec![a, b]
            }
            Layer::Conv(c) => vec![("weight", &mut c.weight), ("bias", &mut c.bias)],
            Layer::Relu | Layer::MaxPool(_) => Vec::new(),
        }
    }
}

/// Converts NCHW rows to NHWC rows.
pub(crate) fn nchw_to_nhwc(x: &Array2<f32>, c: usize, h: usize, w: usize) -> Array2<f32> {
    let n = x.nrows();
    let mut out = Array2::<f32>::zeros((n, c * h * w));
    for (src, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
        for ch in 0..c {
            let plane = src.slice(s![ch * h * w..(ch + 1) * h * w]);
            for (p, &v) in plane.iter().enumerate() {
                dst[p * c + ch] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
        Param::uniform(rows, cols, 1.0, rng).value
    }

    // Loss used for the checks: sum(y * r) for a fixed random r, so dL/dy = r.
    fn check_layer_grads(mut layer: Layer, input_cols: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_matrix(2, input_cols, &mut rng);
        let y = layer.forward(&x);
        let r = rand_matrix(y.nrows(), y.ncols(), &mut rng);
        let (_, cache) = layer.forward_train(x.clone());
        let gx = layer.backward(&cache, r.clone(), true).unwrap();

        let loss = |l: &Layer, x: &Array2<f32>| -> f64 {
            l.forward(x).iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let eps = 1e-2f32;
        for i in 0..x.len().min(40) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            xm.as_slice_mut().unwrap()[i] -= eps;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * eps as f64);
            let an = gx.as_slice().unwrap()[i] as f64;
            assert!((fd - an).abs() < 2e-2 * (1.0 + fd.abs()), "input {i}: fd {fd} vs {an}");
        }
        let grads: Vec<Array2<f32>> = layer.params().iter().map(|(_, p)| p.grad.clone()).collect();
        for (pi, g) in grads.iter().enumerate() {
            for i in 0..g.len().min(40) {
                let mut lp = layer.clone();
                let mut lm = layer.clone();
                lp.params_mut()[pi].1.value.as_slice_mut().unwrap()[i] += eps;
                lm.params_mut()[pi].1.value.as_slice_mut().unwrap()[i] -= eps;
                let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps as f64);
                let an = g.as_slice().unwrap()[i] as f64;
                assert!((fd - an).abs() < 2e-2 * (1.0 + fd.abs()), "param {pi}[{i}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check_layer_grads(Layer::Linear(Linear::new(5, 3, Init::FanIn, &mut rng)), 5, 2);
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check_layer_grads(Layer::Conv(Conv2d::new(2, 3, 4, 4, &mut rng)), 4 * 4 * 2, 4);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let pool = Layer::MaxPool(MaxPool2 { channels: 1, height: 2, width: 2 });
        let x = Array2::from_shape_vec((1, 4), vec![0.1, 0.9, -0.3, 0.2]).unwrap();
        let (y, cache) = pool.forward_train(x);
        assert_eq!(y[[0, 0]], 0.9);
        let mut pool = pool;
        let g = pool.backward(&cache, Array2::from_elem((1, 1), 2.0), true).unwrap();
        assert_eq!(g.as_slice().unwrap(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(1, 1, 3, 3, &mut rng);
        conv.weight.value.fill(0.0);
        conv.weight.value[[4, 0]] = 1.0;
        let x = Array2::from_shape_vec((1, 9), (0..9).map(|v| v as f32).collect()).unwrap();
        assert_eq!(conv.forward(&x), x);
    }

    #[test]
    fn layout_conversion() {
        // c=2, h=1, w=2: planes [a0 a1] [b0 b1] -> [a0 b0 a1 b1]
        let x = Array2::from_shape_vec((1, 4), vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        assert_eq!(nchw_to_nhwc(&x, 2, 1, 2).as_slice().unwrap(), &[1.0, 10.0, 2.0, 20.0]);
    }
}
