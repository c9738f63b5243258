//! Minimal layer primitives with hand-written reverse passes.
//!
//! Activations are CHW tensors. Parameters live in one flat `f64` buffer; each layer
//! stores the offsets of its slices, so a gradient buffer of the same length mirrors
//! the parameter layout exactly.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        let p = self.plane();
        &self.data[ch * p..(ch + 1) * p]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[ch * p..(ch + 1) * p]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Row-major `C = alpha * op(A) * op(B) + beta * C` where the transposes are expressed
/// through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index reachable through the given strides.
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

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    /// Offset of the `[cout, cin, k, k]` weights in the parameter buffer.
    pub w_off: usize,
    pub b_off: usize,
}

impl Conv2d {
    /// "Same"-padded convolution; allocates its parameters at the end of `n_params`.
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, dilation: usize, n_params: &mut usize) -> Self {
        let w_off = *n_params;
        let b_off = w_off + cout * cin * kernel * kernel;
        *n_params = b_off + cout;
        Self { cin, cout, kernel, stride, dilation, pad: dilation * (kernel - 1) / 2, w_off, b_off }
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        ((h + 2 * self.pad - span) / self.stride + 1, (w + 2 * self.pad - span) / self.stride + 1)
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng, gain: f64, bias: f64) {
        let fan_in = (self.cin * self.kernel * self.kernel) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("finite std");
        for p in &mut params[self.w_off..self.w_off + self.weight_len()] {
            *p = normal.sample(rng);
        }
        params[self.b_off..self.b_off + self.cout].fill(bias);
    }

    fn im2col(&self, x: &Tensor, ho: usize, wo: usize) -> Vec<f64> {
        let k = self.kernel;
        let n = ho * wo;
        let mut cols = vec![0.0; self.cin * k * k * n];
        for ci in 0..self.cin {
            let plane = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx * self.dilation) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                dst[oy * wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Tensor {
        let k = self.kernel;
        let n = ho * wo;
        let mut dx = Tensor::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = dx.channel_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx * self.dilation) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the im2col buffer needed by [`Conv2d::backward`].
    pub fn forward(&self, params: &[f64], x: &Tensor) -> (Tensor, Vec<f64>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_size(x.h, x.w);
        let cols = self.im2col(x, ho, wo);
        let mut y = Tensor::zeros(self.cout, ho, wo);
        for co in 0..self.cout {
            y.channel_mut(co).fill(params[self.b_off + co]);
        }
        let kk = self.cin * self.kernel * self.kernel;
        gemm(self.cout, kk, ho * wo, &params[self.w_off..], false, &cols, false, &mut y.data, 1.0);
        (y, cols)
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns the input
    /// gradient (when `need_input`).
    pub fn backward(
        &self,
        params: &[f64],
        input_hw: (usize, usize),
        cols: &[f64],
        dy: &Tensor,
        grads: Option<&mut [f64]>,
        need_input: bool,
    ) -> Option<Tensor> {
        let (ho, wo) = (dy.h, dy.w);
        let n = ho * wo;
        let kk = self.cin * self.kernel * self.kernel;
        if let Some(g) = grads {
            gemm(self.cout, n, kk, &dy.data, false, cols, true, &mut g[self.w_off..self.w_off + self.weight_len()], 1.0);
            for co in 0..self.cout {
                g[self.b_off + co] += dy.channel(co).iter().sum::<f64>();
            }
        }
        if !need_input {
            return None;
        }
        let mut dcols = vec![0.0; kk * n];
        gemm(kk, self.cout, n, &params[self.w_off..], true, &dy.data, false, &mut dcols, 0.0);
        Some(self.col2im(&dcols, input_hw.0, input_hw.1, ho, wo))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU `x * sigmoid(x)`; smooth, so finite-difference checks see no kinks.
pub fn silu(pre: &Tensor) -> Tensor {
    Tensor { data: pre.data.iter().map(|&x| x * sigmoid(x)).collect(), ..*pre }
}

pub fn silu_backward(pre: &Tensor, dy: &Tensor) -> Tensor {
    let data = pre
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&x, &g)| {
            let s = sigmoid(x);
            g * s * (1.0 + x * (1.0 - s))
        })
        .collect();
    Tensor { data, ..*pre }
}

pub fn sigmoid_tensor(pre: &Tensor) -> Tensor {
    Tensor { data: pre.data.iter().map(|&x| sigmoid(x)).collect(), ..*pre }
}

/// Backward of the sigmoid given its output `y`.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    Tensor { data: y.data.iter().zip(&dy.data).map(|(&s, &g)| g * s * (1.0 - s)).collect(), ..*y }
}

/// Bilinear tap set for sampling a `h x w` plane at continuous `(x, y)` where integers
/// are sample centers. Out-of-range taps read zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Bilinear {
    /// Flat indices, `usize::MAX` marks an out-of-range tap.
    pub idx: [usize; 4],
    pub weight: [f64; 4],
    /// Derivatives of the four weights w.r.t. x and y.
    pub dwx: [f64; 4],
    pub dwy: [f64; 4],
}

impl Bilinear {
    pub fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let corners = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)];
        let weight = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
        let dwx = [-(1.0 - fy), 1.0 - fy, -fy, fy];
        let dwy = [-(1.0 - fx), -fx, 1.0 - fx, fx];
        let mut idx = [usize::MAX; 4];
        for (i, &(cx, cy)) in corners.iter().enumerate() {
            if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
                idx[i] = cy as usize * w + cx as usize;
            }
        }
        Self { idx, weight, dwx, dwy }
    }

    #[inline]
    pub fn sample(&self, plane: &[f64]) -> f64 {
        let mut v = 0.0;
        for i in 0..4 {
            if self.idx[i] != usize::MAX {
                v += self.weight[i] * plane[self.idx[i]];
            }
        }
        v
    }

    /// `(d value / dx, d value / dy)`.
    #[inline]
    pub fn grad_xy(&self, plane: &[f64]) -> (f64, f64) {
        let (mut gx, mut gy) = (0.0, 0.0);
        for i in 0..4 {
            if self.idx[i] != usize::MAX {
                gx += self.dwx[i] * plane[self.idx[i]];
                gy += self.dwy[i] * plane[self.idx[i]];
            }
        }
        (gx, gy)
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [f64], g: f64) {
        for i in 0..4 {
            if self.idx[i] != usize::MAX {
                plane[self.idx[i]] += self.weight[i] * g;
            }
        }
    }
}

/// Adam with bias correction over a flat parameter buffer.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor { c, h, w, data: (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    fn naive_conv(conv: &Conv2d, params: &[f64], x: &Tensor) -> Tensor {
        let (ho, wo) = conv.out_size(x.h, x.w);
        let mut y = Tensor::zeros(conv.cout, ho, wo);
        for co in 0..conv.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = params[conv.b_off + co];
                    for ci in 0..conv.cin {
                        for ky in 0..conv.kernel {
                            for kx in 0..conv.kernel {
                                let iy = (oy * conv.stride + ky * conv.dilation) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx * conv.dilation) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let wi = conv.w_off + ((co * conv.cin + ci) * conv.kernel + ky) * conv.kernel + kx;
                                acc += params[wi] * x.data[(ci * x.h + iy as usize) * x.w + ix as usize];
                            }
                        }
                    }
                    y.data[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (stride, dil) in [(1, 1), (2, 1), (1, 2), (1, 3)] {
            let mut n = 0;
            let conv = Conv2d::new(3, 5, 3, stride, dil, &mut n);
            let mut params = vec![0.0; n];
            conv.init(&mut params, &mut rng, 1.0, 0.1);
            let x = rand_tensor(3, 9, 10, &mut rng);
            let (y, _) = conv.forward(&params, &x);
            let expect = naive_conv(&conv, &params, &x);
            assert_eq!((y.c, y.h, y.w), (expect.c, expect.h, expect.w));
            for (a, b) in y.data.iter().zip(&expect.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut n = 0;
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut n);
        let mut params = vec![0.0; n];
        conv.init(&mut params, &mut rng, 1.0, 0.0);
        let x = rand_tensor(2, 7, 8, &mut rng);
        let (y, cols) = conv.forward(&params, &x);
        let dy = rand_tensor(y.c, y.h, y.w, &mut rng);
        let objective = |p: &[f64], x: &Tensor| -> f64 {
            let (y, _) = conv.forward(p, x);
            y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum()
        };
        let mut grads = vec![0.0; n];
        let dx = conv.backward(&params, (x.h, x.w), &cols, &dy, Some(&mut grads), true).unwrap();
        let h = 1e-6;
        for i in 0..n {
            let mut pp = params.clone();
            pp[i] += h;
            let mut pm = params.clone();
            pm[i] -= h;
            let fd = (objective(&pp, &x) - objective(&pm, &x)) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-6, "param {i}");
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (objective(&params, &xp) - objective(&params, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6, "input {i}");
        }
    }

    #[test]
    fn bilinear_gradients_match_finite_differences() {
        let plane: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64 / 3.0).collect();
        for &(x, y) in &[(1.3, 2.6), (-0.4, 0.2), (4.7, 3.1), (2.5, 0.5)] {
            let b = Bilinear::new(x, y, 4, 5);
            let (gx, gy) = b.grad_xy(&plane);
            let h = 1e-6;
            let fx = (Bilinear::new(x + h, y, 4, 5).sample(&plane) - Bilinear::new(x - h, y, 4, 5).sample(&plane)) / (2.0 * h);
            let fy = (Bilinear::new(x, y + h, 4, 5).sample(&plane) - Bilinear::new(x, y - h, 4, 5).sample(&plane)) / (2.0 * h);
            assert!((gx - fx).abs() < 1e-6 && (gy - fy).abs() < 1e-6);
        }
        // Integer location reads the sample exactly.
        assert_eq!(Bilinear::new(2.0, 1.0, 4, 5).sample(&plane), plane[7]);
    }

    #[test]
    fn silu_backward_matches_finite_differences() {
        let pre = Tensor { c: 1, h: 1, w: 5, data: vec![-3.0, -0.5, 0.0, 0.7, 2.5] };
        let dy = Tensor { data: vec![1.0; 5], ..pre.clone() };
        let g = silu_backward(&pre, &dy);
        for i in 0..5 {
            let h = 1e-6;
            let f = |x: f64| x / (1.0 + (-x).exp());
            let fd = (f(pre.data[i] + h) - f(pre.data[i] - h)) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-8);
        }
    }
}
