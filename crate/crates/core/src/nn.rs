//! Layer primitives with explicit forward caches and hand-written backward
//! passes. Tensors are flat `Vec<f64>` buffers in row-major / CHW order.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn apply_slice(self, xs: &mut [f64]) {
        for x in xs {
            *x = self.apply(*x);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c = a * b (+ c if accumulate)` for row/column-strided matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe dense row- or
    // column-major views of these buffers.
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

/// Fully connected layer, weight stored `outputs x inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Uniform init in `±1/sqrt(fan_in)`, zero bias.
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self::uniform(inputs, outputs, 1.0 / (inputs as f64).sqrt(), rng)
    }

    /// He uniform init `±sqrt(6/fan_in)`, for layers followed by a ReLU.
    pub fn new_he<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self::uniform(inputs, outputs, (6.0 / inputs as f64).sqrt(), rng)
    }

    fn uniform<R: Rng>(inputs: usize, outputs: usize, bound: f64, rng: &mut R) -> Self {
        let weight = (0..inputs * outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    /// Accumulates parameter gradients into `gw`/`gb` and returns the input gradient.
    pub fn backward(&self, x: &[f64], dy: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut gw[o * self.inputs..(o + 1) * self.inputs];
            for ((gw, dx), (&w, &xi)) in grow.iter_mut().zip(dx.iter_mut()).zip(row.iter().zip(x)) {
                *gw += g * xi;
                *dx += g * w;
            }
        }
        dx
    }
}

/// 3x3 convolution, stride 1, zero padding 1. Weight is `out x (in * 9)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    /// Fan-in scaled uniform init `±sqrt(6 / fan_in)`, zero bias.
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = (0..out_channels * fan_in)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            in_channels,
            out_channels,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    fn patch_len(&self) -> usize {
        self.in_channels * 9
    }

    /// Unrolls `x` (in_channels x h x w) into a `(in*9) x (h*w)` column matrix.
    pub fn im2col(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        let mut cols = vec![0.0; self.patch_len() * hw];
        for c in 0..self.in_channels {
            let plane = &x[c * hw..(c + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let src_lo = sy * w + x_lo + kx - 1;
                        row[y * w + x_lo..y * w + x_hi].copy_from_slice(&plane[src_lo..src_lo + (x_hi - x_lo)]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        let mut x = vec![0.0; self.in_channels * hw];
        for c in 0..self.in_channels {
            let plane = &mut x[c * hw..(c + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let dst_lo = sy * w + x_lo + kx - 1;
                        for (d, s) in plane[dst_lo..dst_lo + (x_hi - x_lo)]
                            .iter_mut()
                            .zip(&row[y * w + x_lo..y * w + x_hi])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns `(columns, pre-activation output)`.
    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let hw = h * w;
        let cols = self.im2col(x, h, w);
        let mut out = vec![0.0; self.out_channels * hw];
        let k = self.patch_len();
        gemm(
            self.out_channels,
            k,
            hw,
            &self.weight,
            (k as isize, 1),
            &cols,
            (hw as isize, 1),
            &mut out,
            false,
        );
        for (plane, b) in out.chunks_exact_mut(hw).zip(&self.bias) {
            for v in plane {
                *v += b;
            }
        }
        (cols, out)
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(
        &self,
        cols: &[f64],
        dz: &[f64],
        h: usize,
        w: usize,
        gw: &mut [f64],
        gb: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let hw = h * w;
        let k = self.patch_len();
        // dW += dZ * cols^T
        gemm(
            self.out_channels,
            hw,
            k,
            dz,
            (hw as isize, 1),
            cols,
            (1, hw as isize),
            gw,
            true,
        );
        for (g, plane) in gb.iter_mut().zip(dz.chunks_exact(hw)) {
            *g += plane.iter().sum::<f64>();
        }
        if !need_input_grad {
            return None;
        }
        // dcols = W^T * dZ
        let mut dcols = vec![0.0; k * hw];
        gemm(
            k,
            self.out_channels,
            hw,
            &self.weight,
            (1, k as isize),
            dz,
            (hw as isize, 1),
            &mut dcols,
            false,
        );
        Some(self.col2im(&dcols, h, w))
    }
}

/// 2x2 stride-2 max pooling over `channels x h x w`; odd trailing rows and
/// columns are dropped. Returns the pooled map and, per output, the flat
/// input index of the (first) maximum.
pub fn max_pool2(x: &[f64], channels: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut arg = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + (2 * oy) * w + 2 * ox;
                let cand = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(d_out: &[f64], argmax: &[u32], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&g, &i) in d_out.iter().zip(argmax) {
        dx[i as usize] += g;
    }
    dx
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of softmax(logits) against `target`; returns the loss and
/// the gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    let loss = lse - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    (loss, grad)
}

/// Vector-Jacobian product of softmax: given `p = softmax(z)` and `dp`,
/// returns `dz`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(pi, gi)| pi * (gi - inner)).collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Frozen tensors are skipped entirely.
#[derive(Clone, Debug)]
pub struct Adam {
    params: AdamParams,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: AdamParams, shapes: &[usize]) -> Self {
        Self {
            params,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, tensors: Vec<&mut Vec<f64>>, grads: &[Vec<f64>], frozen: &[bool]) {
        assert_eq!(tensors.len(), grads.len());
        assert_eq!(tensors.len(), self.m.len());
        self.step += 1;
        let AdamParams {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.params;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (t, g)) in tensors.into_iter().zip(grads).enumerate() {
            if frozen[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..t.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                t[j] -= learning_rate * mh / (vh.sqrt() + epsilon);
            }
        }
    }
}

pub fn zeros_like(tensors: &[&Vec<f64>]) -> Vec<Vec<f64>> {
    tensors.iter().map(|t| vec![0.0; t.len()]).collect()
}

pub fn add_into(acc: &mut [Vec<f64>], other: &[Vec<f64>]) {
    for (a, o) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(o) {
            *x += y;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv3x3, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; conv.out_channels * h * w];
        for o in 0..conv.out_channels {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = conv.bias[o];
                    for c in 0..conv.in_channels {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += conv.weight[o * conv.in_channels * 9 + c * 9 + ky * 3 + kx]
                                    * x[c * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out[o * h * w + y * w + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv3x3::new(2, 3, &mut rng);
        conv.bias = vec![0.1, -0.2, 0.3];
        let (h, w) = (5, 7);
        let x: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, fast) = conv.forward(&x, h, w);
        let slow = naive_conv(&conv, &x, h, w);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Conv3x3::new(2, 2, &mut rng);
        let (h, w) = (4, 3);
        let x: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |x: &[f64]| dot(&conv.forward(x, h, w).1, &r);
        let (cols, _) = conv.forward(&x, h, w);
        let mut gw = vec![0.0; conv.weight.len()];
        let mut gb = vec![0.0; 2];
        let dx = conv.backward(&cols, &r, h, w, &mut gw, &mut gb, true).unwrap();
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += 1e-5;
            let mut xm = x.clone();
            xm[i] -= 1e-5;
            let fd = (loss(&xp) - loss(&xm)) / 2e-5;
            assert!((fd - dx[i]).abs() < 1e-8, "coord {i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn max_pool_first_index_on_ties() {
        let x = vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let (out, arg) = max_pool2(&x, 1, 2, 4);
        assert_eq!(out, vec![1.0, 0.0]);
        assert_eq!(arg, vec![0, 2]);
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[3f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
    }
}
