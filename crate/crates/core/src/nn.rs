//! Minimal double-precision layers with hand-written backward passes.
//!
//! Everything here operates on single samples; batching happens in the
//! training loop by summing per-sample gradients in a fixed order, which
//! keeps results independent of thread count.

use rand::Rng;

/// Dense `channels x height x width` activation, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Stacks two maps of equal spatial size along the channel axis.
    pub fn concat_channels(a: &Tensor3, b: &Tensor3) -> Tensor3 {
        assert_eq!((a.height, a.width), (b.height, b.width));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor3::from_vec(a.channels + b.channels, a.height, a.width, data)
    }

    /// Inverse of [`Tensor3::concat_channels`].
    pub fn split_channels(self, first: usize) -> (Tensor3, Tensor3) {
        let cut = first * self.plane();
        let mut data = self.data;
        let rest = data.split_off(cut);
        (
            Tensor3::from_vec(first, self.height, self.width, data),
            Tensor3::from_vec(self.channels - first, self.height, self.width, rest),
        )
    }
}

/// `c = a * b (+ c when accumulate)` for row-major operands, with optional
/// transposition of either input. `a` is `m x k` after transposition, `b`
/// is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the stated dimensions,
    // and the strides describe row-major (or transposed row-major) layouts
    // that stay within those bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Rectifier that lets NaN through, so a numerical blow-up reaches the loss.
fn rectify(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

/// He-uniform: variance `2 / fan_in`, suited to ReLU layers.
fn he_uniform<R: Rng + ?Sized>(rng: &mut R, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

/// 3x3 convolution, stride 1, zero padding 1, fused ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][3][3]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f64>,
    output: Tensor3,
    input_height: usize,
    input_width: usize,
}

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * TAPS;
        Self {
            in_channels,
            out_channels,
            weight: he_uniform(rng, out_channels * fan_in, fan_in),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, KERNEL, KERNEL]
    }

    fn im2col(x: &Tensor3) -> Vec<f64> {
        let (h, w) = (x.height, x.width);
        let plane = h * w;
        let mut cols = vec![0.0; x.channels * TAPS * plane];
        for c in 0..x.channels {
            let src = &x.data[c * plane..(c + 1) * plane];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = (c * TAPS + ky * KERNEL + kx) * plane;
                    let dst = &mut cols[row..row + plane];
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                        for ox in x_lo..x_hi {
                            dst[oy * w + ox] = src[iy * w + ox + kx - 1];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(cols: &[f64], channels: usize, h: usize, w: usize) -> Tensor3 {
        let plane = h * w;
        let mut out = Tensor3::zeros(channels, h, w);
        for c in 0..channels {
            let dst = &mut out.data[c * plane..(c + 1) * plane];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = (c * TAPS + ky * KERNEL + kx) * plane;
                    let src = &cols[row..row + plane];
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                        for ox in x_lo..x_hi {
                            dst[iy * w + ox + kx - 1] += src[oy * w + ox];
                        }
                    }
                }
            }
        }
        out
    }

    fn apply(&self, cols: &[f64], h: usize, w: usize) -> Tensor3 {
        let plane = h * w;
        let mut out = Tensor3::zeros(self.out_channels, h, w);
        gemm(
            self.out_channels,
            self.in_channels * TAPS,
            plane,
            &self.weight,
            false,
            cols,
            false,
            &mut out.data,
            false,
        );
        for (o, bias) in self.bias.iter().enumerate() {
            for v in &mut out.data[o * plane..(o + 1) * plane] {
                *v = rectify(*v + bias);
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(x.channels, self.in_channels);
        self.apply(&Self::im2col(x), x.height, x.width)
    }

    pub fn forward_train(&self, x: &Tensor3) -> (Tensor3, ConvCache) {
        let cols = Self::im2col(x);
        let output = self.apply(&cols, x.height, x.width);
        let cache = ConvCache {
            cols,
            output: output.clone(),
            input_height: x.height,
            input_width: x.width,
        };
        (output, cache)
    }

    /// Accumulates parameter gradients into `grads` and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, cache: &ConvCache, mut grad_out: Tensor3, grads: &mut Conv2d) -> Tensor3 {
        let (h, w) = (cache.input_height, cache.input_width);
        let plane = h * w;
        for (g, y) in grad_out.data.iter_mut().zip(&cache.output.data) {
            if *y <= 0.0 {
                *g = 0.0;
            }
        }
        let fan_in = self.in_channels * TAPS;
        gemm(
            self.out_channels,
            plane,
            fan_in,
            &grad_out.data,
            false,
            &cache.cols,
            true,
            &mut grads.weight,
            true,
        );
        for (o, gb) in grads.bias.iter_mut().enumerate() {
            *gb += grad_out.data[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
        let mut grad_cols = vec![0.0; fan_in * plane];
        gemm(
            fan_in,
            self.out_channels,
            plane,
            &self.weight,
            true,
            &grad_out.data,
            false,
            &mut grad_cols,
            false,
        );
        Self::col2im(&grad_cols, self.in_channels, h, w)
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn max_pool(x: &Tensor3) -> (Tensor3, Vec<usize>) {
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut out = Tensor3::zeros(x.channels, oh, ow);
    let mut argmax = vec![0usize; out.data.len()];
    for c in 0..x.channels {
        let base = c * x.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * x.width + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * x.width + 2 * ox + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = c * oh * ow + oy * ow + ox;
                out.data[o] = x.data[best];
                argmax[o] = best;
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_backward(grad_out: &Tensor3, argmax: &[usize], input_shape: (usize, usize, usize)) -> Tensor3 {
    let (c, h, w) = input_shape;
    let mut grad = Tensor3::zeros(c, h, w);
    for (g, &idx) in grad_out.data.iter().zip(argmax) {
        grad.data[idx] += g;
    }
    grad
}

/// Fully-connected layer, `y = W x + b`, with optional fused ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out][in]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            in_features,
            out_features,
            weight: he_uniform(rng, out_features * in_features, in_features),
            bias: vec![0.0; out_features],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_features: self.in_features,
            out_features: self.out_features,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_features, self.in_features]
    }

    pub fn forward(&self, x: &[f64], relu: bool) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_features);
        let mut y = self.bias.clone();
        gemm(self.out_features, self.in_features, 1, &self.weight, false, x, false, &mut y, true);
        if relu {
            for v in &mut y {
                *v = rectify(*v);
            }
        }
        y
    }

    /// `output` is this layer's forward result; it supplies the ReLU mask.
    pub fn backward(&self, input: &[f64], output: &[f64], relu: bool, grad_out: &[f64], grads: &mut Linear) -> Vec<f64> {
        let g: Vec<f64> = if relu {
            grad_out
                .iter()
                .zip(output)
                .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                .collect()
        } else {
            grad_out.to_vec()
        };
        gemm(self.out_features, 1, self.in_features, &g, false, input, false, &mut grads.weight, true);
        for (gb, gi) in grads.bias.iter_mut().zip(&g) {
            *gb += gi;
        }
        let mut grad_in = vec![0.0; self.in_features];
        gemm(self.in_features, self.out_features, 1, &self.weight, true, &g, false, &mut grad_in, false);
        grad_in
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[target]`, computed via log-sum-exp.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Gradient of [`cross_entropy`] with respect to the logits.
pub fn cross_entropy_grad(logits: &[f64], target: usize) -> Vec<f64> {
    let mut g = softmax(logits);
    g[target] -= 1.0;
    g
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rectifier_keeps_nan() {
        assert_eq!(rectify(-2.0), 0.0);
        assert_eq!(rectify(1.5), 1.5);
        assert!(rectify(f64::NAN).is_nan());
    }

    fn naive_conv(conv: &Conv2d, x: &Tensor3) -> Tensor3 {
        let mut out = Tensor3::zeros(conv.out_channels, x.height, x.width);
        for o in 0..conv.out_channels {
            for y in 0..x.height {
                for xx in 0..x.width {
                    let mut acc = conv.bias[o];
                    for c in 0..conv.in_channels {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                let wv = conv.weight[((o * conv.in_channels + c) * 3 + ky) * 3 + kx];
                                acc += wv * x.data[(c * x.height + iy as usize) * x.width + ix as usize];
                            }
                        }
                    }
                    out.data[(o * x.height + y) * x.width + xx] = rectify(acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::new(2, 3, &mut rng);
        let x = Tensor3::from_vec(2, 5, 4, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect());
        let fast = conv.forward(&x);
        let slow = naive_conv(&conv, &x);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let conv = Conv2d::new(2, 2, &mut rng);
        let x = Tensor3::from_vec(2, 4, 4, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect());
        let upstream: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |x: &Tensor3| -> f64 {
            conv.forward(x).data.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = conv.forward_train(&x);
        let mut grads = conv.zeros_like();
        let gx = conv.backward(&cache, Tensor3::from_vec(2, 4, 4, upstream.clone()), &mut grads);
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut plus = x.clone();
            plus.data[i] += h;
            let mut minus = x.clone();
            minus.data[i] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            assert!((numeric - gx.data[i]).abs() < 1e-6, "input {i}: {numeric} vs {}", gx.data[i]);
        }
    }

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Tensor3::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor3::from_vec(2, 2, 2, (5..13).map(f64::from).collect());
        let joined = Tensor3::concat_channels(&a, &b);
        assert_eq!(joined.channels, 3);
        let (a2, b2) = joined.split_channels(1);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn max_pool_routes_gradient_to_winner() {
        let x = Tensor3::from_vec(1, 2, 2, vec![0.1, 0.9, 0.3, 0.2]);
        let (y, idx) = max_pool(&x);
        assert_eq!(y.data, vec![0.9]);
        let g = max_pool_backward(&Tensor3::from_vec(1, 1, 1, vec![2.0]), &idx, (1, 2, 2));
        assert_eq!(g.data, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        let q = softmax(&[101.0, 102.0, 103.0]);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.5, 0.5, 0.0]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }
}
