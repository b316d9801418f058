//! Layer kernels with explicit forward caches and reverse-mode backward passes.
//!
//! Parameters live in one flat `f64` vector owned by the network; each layer
//! only stores the [`Slot`]s it reads. Gradients are accumulated into a
//! parallel vector of the same length.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor3;
use crate::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// A contiguous range of a flat parameter (or buffer) vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn of<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.range()]
    }

    pub fn of_mut<'a>(&self, v: &'a mut [f64]) -> &'a mut [f64] {
        &mut v[self.range()]
    }
}

/// Hands out consecutive slots while a network is being laid out.
#[derive(Debug, Default)]
pub(crate) struct SlotAllocator {
    next: usize,
}

impl SlotAllocator {
    pub fn take(&mut self, len: usize) -> Slot {
        let s = Slot {
            offset: self.next,
            len,
        };
        self.next += len;
        s
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Output length equals input length; `(k-1)/2` zeros on the left and
    /// the rest on the right.
    Same,
    Valid,
}

impl Padding {
    fn amounts(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Same => {
                let left = (kernel - 1) / 2;
                (left, kernel - 1 - left)
            }
            Padding::Valid => (0, 0),
        }
    }
}

/// `c = alpha·a·b + beta·c` for strided row/column-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    debug_assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the asserted extents cover every element addressed by the
    // strides; `c` does not alias `a` or `b` because it is borrowed mutably.
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
            rsc as isize,
            1,
        );
    }
}

fn im2col(x: &Tensor3, kernel: usize, pad_left: usize, out_len: usize) -> Vec<f64> {
    let (batch, channels, len) = (x.batch(), x.channels(), x.length());
    let width = batch * out_len;
    let mut col = vec![0.0; channels * kernel * width];
    for c in 0..channels {
        for j in 0..kernel {
            let row = &mut col[(c * kernel + j) * width..(c * kernel + j + 1) * width];
            // Output t reads input t + j - pad_left.
            let lo = pad_left.saturating_sub(j);
            let hi = (len + pad_left).saturating_sub(j).min(out_len);
            if lo >= hi {
                continue;
            }
            let src_lo = lo + j - pad_left;
            for n in 0..batch {
                let src = x.series(n, c);
                row[n * out_len + lo..n * out_len + hi]
                    .copy_from_slice(&src[src_lo..src_lo + (hi - lo)]);
            }
        }
    }
    col
}

fn col2im(dcol: &[f64], dx: &mut Tensor3, kernel: usize, pad_left: usize, out_len: usize) {
    let (batch, channels, len) = (dx.batch(), dx.channels(), dx.length());
    let width = batch * out_len;
    for c in 0..channels {
        for j in 0..kernel {
            let row = &dcol[(c * kernel + j) * width..(c * kernel + j + 1) * width];
            let lo = pad_left.saturating_sub(j);
            let hi = (len + pad_left).saturating_sub(j).min(out_len);
            if lo >= hi {
                continue;
            }
            let src_lo = lo + j - pad_left;
            for n in 0..batch {
                let dst = &mut dx.series_mut(n, c)[src_lo..src_lo + (hi - lo)];
                for (d, g) in dst.iter_mut().zip(&row[n * out_len + lo..n * out_len + hi]) {
                    *d += g;
                }
            }
        }
    }
}

/// Stride-1 multi-channel 1D convolution (cross-correlation):
/// `o^{c'} = Σ_c w^{c,c'} ⊛ x^c + b^{c'}`.
///
/// `weight` is laid out `[out][in][kernel]`.
pub fn conv1d(
    x: &Tensor3,
    weight: &[f64],
    bias: Option<&[f64]>,
    out_channels: usize,
    kernel: usize,
    padding: Padding,
) -> Result<Tensor3> {
    let in_channels = x.channels();
    if weight.len() != out_channels * in_channels * kernel {
        return Err(Error::ChannelMismatch {
            expected: weight.len() / (out_channels * kernel).max(1),
            actual: in_channels,
        });
    }
    let (pl, pr) = padding.amounts(kernel);
    let padded = x.length() + pl + pr;
    if padded < kernel {
        return Err(Error::invalid(format!(
            "input length {} is shorter than kernel {kernel}",
            x.length()
        )));
    }
    let out_len = padded - kernel + 1;
    let col = im2col(x, kernel, pl, out_len);
    let width = x.batch() * out_len;
    let ck = in_channels * kernel;
    let mut out = vec![0.0; out_channels * width];
    gemm(out_channels, ck, width, weight, ck, 1, &col, width, 1, 0.0, &mut out, width);
    if let Some(b) = bias {
        for (c, row) in out.chunks_mut(width.max(1)).enumerate() {
            for v in row {
                *v += b[c];
            }
        }
    }
    Tensor3::from_channel_major(x.batch(), out_channels, out_len, out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Slot,
    pub bias: Option<Slot>,
}

impl Conv1d {
    pub(crate) fn new(
        alloc: &mut SlotAllocator,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        with_bias: bool,
    ) -> Self {
        let weight = alloc.take(out_channels * in_channels * kernel);
        let bias = with_bias.then(|| alloc.take(out_channels));
        Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len + self.bias.map_or(0, |b| b.len)
    }

    /// Glorot-uniform weights with conv fans `C_in·k` / `C_out·k`; zero bias.
    pub(crate) fn init(&self, params: &mut [f64], rng: &mut impl rand::Rng) {
        let fan_in = (self.in_channels * self.kernel) as f64;
        let fan_out = (self.out_channels * self.kernel) as f64;
        xavier_fill(self.weight.of_mut(params), fan_in, fan_out, rng);
        if let Some(b) = self.bias {
            b.of_mut(params).fill(0.0);
        }
    }

    pub fn forward(&self, params: &[f64], x: &Tensor3) -> Result<Tensor3> {
        if x.channels() != self.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels,
                actual: x.channels(),
            });
        }
        conv1d(
            x,
            self.weight.of(params),
            self.bias.map(|b| b.of(params)),
            self.out_channels,
            self.kernel,
            Padding::Same,
        )
    }

    /// Accumulates weight/bias gradients and returns `∂L/∂x`.
    pub fn backward(&self, params: &[f64], grads: &mut [f64], x: &Tensor3, dy: &Tensor3) -> Tensor3 {
        let (pl, _) = Padding::Same.amounts(self.kernel);
        let out_len = dy.length();
        let width = x.batch() * out_len;
        let ck = self.in_channels * self.kernel;
        let col = im2col(x, self.kernel, pl, out_len);

        // dW[out][ck] += dy[out][width] · col[ck][width]^T
        gemm(
            self.out_channels,
            width,
            ck,
            dy.data(),
            width,
            1,
            &col,
            1,
            width,
            1.0,
            self.weight.of_mut(grads),
            ck,
        );
        if let Some(b) = self.bias {
            let gb = b.of_mut(grads);
            for (c, g) in gb.iter_mut().enumerate() {
                *g += dy.channel(c).iter().sum::<f64>();
            }
        }

        // dcol[ck][width] = W[out][ck]^T · dy[out][width]
        let mut dcol = vec![0.0; ck * width];
        gemm(
            ck,
            self.out_channels,
            width,
            self.weight.of(params),
            1,
            ck,
            dy.data(),
            width,
            1,
            0.0,
            &mut dcol,
            width,
        );
        let mut dx = Tensor3::zeros(x.batch(), x.channels(), x.length());
        col2im(&dcol, &mut dx, self.kernel, pl, out_len);
        dx
    }
}

pub(crate) fn xavier_fill(w: &mut [f64], fan_in: f64, fan_out: f64, rng: &mut impl rand::Rng) {
    let limit = (6.0 / (fan_in + fan_out)).sqrt();
    for v in w {
        *v = rng.gen_range(-limit..limit);
    }
}

/// Per-channel batch normalisation. Running statistics live in the
/// network's buffer vector at `running` (`[mean; C]` then `[var; C]`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Slot,
    pub beta: Slot,
    pub running: Slot,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Tensor3,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub(crate) fn new(alloc: &mut SlotAllocator, buffers: &mut SlotAllocator, channels: usize) -> Self {
        Self {
            channels,
            gamma: alloc.take(channels),
            beta: alloc.take(channels),
            running: buffers.take(2 * channels),
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub(crate) fn init(&self, params: &mut [f64], buffers: &mut [f64]) {
        self.gamma.of_mut(params).fill(1.0);
        self.beta.of_mut(params).fill(0.0);
        let run = self.running.of_mut(buffers);
        run[..self.channels].fill(0.0);
        run[self.channels..].fill(1.0);
    }

    /// Normalises with the running statistics.
    pub fn forward_eval(&self, params: &[f64], buffers: &[f64], x: &Tensor3) -> Tensor3 {
        let gamma = self.gamma.of(params);
        let beta = self.beta.of(params);
        let run = self.running.of(buffers);
        let mut y = x.clone();
        for c in 0..self.channels {
            let inv = 1.0 / (run[self.channels + c] + BN_EPSILON).sqrt();
            let mean = run[c];
            for v in y.channel_mut(c) {
                *v = gamma[c] * (*v - mean) * inv + beta[c];
            }
        }
        y
    }

    /// Normalises with batch statistics (biased variance over batch and
    /// time) and folds them into the running statistics.
    pub fn forward_train(
        &self,
        params: &[f64],
        buffers: &mut [f64],
        x: &Tensor3,
    ) -> (Tensor3, BatchNormCache) {
        let gamma = self.gamma.of(params);
        let beta = self.beta.of(params);
        let mut y = x.clone();
        let mut xhat = x.clone();
        let mut inv_std = vec![0.0; self.channels];
        let run = self.running.of_mut(buffers);
        for c in 0..self.channels {
            let vals = x.channel(c);
            let m = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / m;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let inv = 1.0 / (var + BN_EPSILON).sqrt();
            inv_std[c] = inv;
            for (h, o) in xhat.channel_mut(c).iter_mut().zip(y.channel_mut(c)) {
                *h = (*h - mean) * inv;
                *o = gamma[c] * *h + beta[c];
            }
            run[c] = BN_MOMENTUM * run[c] + (1.0 - BN_MOMENTUM) * mean;
            run[self.channels + c] = BN_MOMENTUM * run[self.channels + c] + (1.0 - BN_MOMENTUM) * var;
        }
        (y, BatchNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        params: &[f64],
        grads: &mut [f64],
        cache: &BatchNormCache,
        dy: &Tensor3,
    ) -> Tensor3 {
        let gamma = self.gamma.of(params);
        let mut dx = dy.clone();
        for c in 0..self.channels {
            let d = dy.channel(c);
            let h = cache.xhat.channel(c);
            let m = d.len() as f64;
            let sum_d: f64 = d.iter().sum();
            let sum_dh: f64 = d.iter().zip(h).map(|(a, b)| a * b).sum();
            grads[self.gamma.offset + c] += sum_dh;
            grads[self.beta.offset + c] += sum_d;
            let k = gamma[c] * cache.inv_std[c] / m;
            for ((o, dv), hv) in dx.channel_mut(c).iter_mut().zip(d).zip(h) {
                *o = k * (m * dv - sum_d - hv * sum_dh);
            }
        }
        dx
    }
}

/// Linear classifier over globally average-pooled channels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Head {
    pub in_channels: usize,
    pub classes: usize,
    /// `[classes][in_channels]`
    pub weight: Slot,
    pub bias: Slot,
}

impl Head {
    pub(crate) fn new(alloc: &mut SlotAllocator, in_channels: usize, classes: usize) -> Self {
        Self {
            in_channels,
            classes,
            weight: alloc.take(classes * in_channels),
            bias: alloc.take(classes),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len + self.bias.len
    }

    pub(crate) fn init(&self, params: &mut [f64], rng: &mut impl rand::Rng) {
        xavier_fill(
            self.weight.of_mut(params),
            self.in_channels as f64,
            self.classes as f64,
            rng,
        );
        self.bias.of_mut(params).fill(0.0);
    }

    /// Temporal mean of every channel: `[batch][channels]` row-major.
    pub fn pool(x: &Tensor3) -> Vec<f64> {
        let (b, c, h) = (x.batch(), x.channels(), x.length());
        let mut pooled = vec![0.0; b * c];
        for n in 0..b {
            for ch in 0..c {
                pooled[n * c + ch] = x.series(n, ch).iter().sum::<f64>() / h as f64;
            }
        }
        pooled
    }

    /// Logits `[batch][classes]` from pooled features.
    pub fn logits(&self, params: &[f64], pooled: &[f64], batch: usize) -> Vec<f64> {
        let w = self.weight.of(params);
        let b = self.bias.of(params);
        let mut out = vec![0.0; batch * self.classes];
        for n in 0..batch {
            let feat = &pooled[n * self.in_channels..(n + 1) * self.in_channels];
            for y in 0..self.classes {
                let row = &w[y * self.in_channels..(y + 1) * self.in_channels];
                out[n * self.classes + y] =
                    b[y] + row.iter().zip(feat).map(|(a, f)| a * f).sum::<f64>();
            }
        }
        out
    }

    /// Accumulates head gradients and returns `∂L/∂x` for the un-pooled input.
    pub fn backward(
        &self,
        params: &[f64],
        grads: &mut [f64],
        pooled: &[f64],
        dlogits: &[f64],
        input_shape: (usize, usize, usize),
    ) -> Tensor3 {
        let (batch, channels, len) = input_shape;
        let w = self.weight.of(params);
        let mut dx = Tensor3::zeros(batch, channels, len);
        for n in 0..batch {
            let feat = &pooled[n * channels..(n + 1) * channels];
            for y in 0..self.classes {
                let g = dlogits[n * self.classes + y];
                if g == 0.0 {
                    continue;
                }
                grads[self.bias.offset + y] += g;
                let gw = &mut grads[self.weight.offset + y * channels..][..channels];
                for (gw, f) in gw.iter_mut().zip(feat) {
                    *gw += g * f;
                }
            }
            for c in 0..channels {
                let mut dp = 0.0;
                for y in 0..self.classes {
                    dp += dlogits[n * self.classes + y] * w[y * channels + c];
                }
                let v = dp / len as f64;
                dx.series_mut(n, c).fill(v);
            }
        }
        dx
    }
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
///
/// Each row is shifted by its maximum before exponentiation, so a row of
/// equal logits contributes exactly `ln(Y)`.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let batch = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (n, &label) in labels.iter().enumerate() {
        let row = &logits[n * classes..(n + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += sum.ln() - (row[label] - max);
        for y in 0..classes {
            let p = exps[y] / sum;
            grad[n * classes + y] = (p - if y == label { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    (total / batch as f64, grad)
}

pub(crate) fn relu_backward(out: &Tensor3, dy: &Tensor3) -> Tensor3 {
    let mut dx = dy.clone();
    for (d, o) in dx.data_mut().iter_mut().zip(out.data()) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor3, w: &[f64], b: &[f64], out_c: usize, k: usize, pad_left: usize, out_len: usize) -> Tensor3 {
        let mut o = Tensor3::zeros(x.batch(), out_c, out_len);
        for n in 0..x.batch() {
            for co in 0..out_c {
                for t in 0..out_len {
                    let mut s = b[co];
                    for ci in 0..x.channels() {
                        for j in 0..k {
                            let src = t as isize + j as isize - pad_left as isize;
                            if src >= 0 && (src as usize) < x.length() {
                                s += w[(co * x.channels() + ci) * k + j] * x.get(n, ci, src as usize);
                            }
                        }
                    }
                    o.set(n, co, t, s);
                }
            }
        }
        o
    }

    #[test]
    fn hand_convolution_valid() {
        let x = Tensor3::from_channel_major(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv1d(&x, &[1.0, 1.0], None, 1, 2, Padding::Valid).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let x = Tensor3::from_channel_major(2, 2, 5, (0..20).map(|v| v as f64).collect()).unwrap();
        let y = conv1d(&x, &[0.0; 2 * 3 * 3], Some(&[0.5, -1.0, 2.0]), 3, 3, Padding::Same).unwrap();
        assert_eq!(y.length(), 5);
        for c in 0..3 {
            assert!(y.channel(c).iter().all(|&v| v == [0.5, -1.0, 2.0][c]));
        }
    }

    #[test]
    fn matches_nested_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor3::from_channel_major(3, 2, 11, (0..66).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for (pad, pl, len) in [(Padding::Same, 2, 11), (Padding::Valid, 0, 7)] {
            let fast = conv1d(&x, &w, Some(&b), 3, 5, pad).unwrap();
            let slow = naive_conv(&x, &w, &b, 3, 5, pl, len);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-10);
            }
        }
        // Even kernel: one more zero on the right than the left.
        let w8: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = conv1d(&x, &w8, Some(&b), 3, 8, Padding::Same).unwrap();
        let slow = naive_conv(&x, &w8, &b, 3, 8, 3, 11);
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut alloc = SlotAllocator::default();
        let conv = Conv1d::new(&mut alloc, 3, 2, 3, true);
        let params = vec![0.0; alloc.total()];
        let x = Tensor3::zeros(1, 2, 8);
        assert!(matches!(
            conv.forward(&params, &x),
            Err(Error::ChannelMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        for classes in [2usize, 3, 7] {
            let logits = vec![0.37; 4 * classes];
            let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 0, 1], classes);
            assert_eq!(loss, (classes as f64).ln());
        }
    }
}
