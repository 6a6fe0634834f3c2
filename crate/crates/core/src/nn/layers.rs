use std::cell::RefCell;

use rand::Rng;

use super::gemm::gemm;
use super::param::{xavier_uniform, Module, Param};
use super::tensor::Tensor;

pub const NORM_EPS: f32 = 1e-5;
pub const BIAS_INIT: f32 = 1e-6;

thread_local! {
    static COLS: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
    static DCOLS: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
}

fn with_buf<R>(
    key: &'static std::thread::LocalKey<RefCell<Vec<f32>>>,
    len: usize,
    f: impl FnOnce(&mut [f32]) -> R,
) -> R {
    key.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

fn take<T>(slot: &mut Option<T>, layer: &str) -> T {
    slot.take()
        .unwrap_or_else(|| panic!("{layer}: backward called without a cached forward"))
}

fn im2col(x: &Tensor, cols: &mut [f32]) {
    let (h, w, n) = (x.h, x.w, x.n);
    let hw = h * w;
    let ncols = n * hw;
    for ci in 0..x.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * ncols..][..ncols];
                for b in 0..n {
                    let src = &x.data[(ci * n + b) * hw..][..hw];
                    for y in 0..h {
                        let dst = &mut row[b * hw + y * w..][..w];
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let srow = &src[sy as usize * w..][..w];
                        match kx {
                            0 => {
                                dst[0] = 0.0;
                                dst[1..].copy_from_slice(&srow[..w - 1]);
                            }
                            1 => dst.copy_from_slice(srow),
                            _ => {
                                dst[..w - 1].copy_from_slice(&srow[1..]);
                                dst[w - 1] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], dx: &mut Tensor) {
    let (h, w, n) = (dx.h, dx.w, dx.n);
    let hw = h * w;
    let ncols = n * hw;
    for ci in 0..dx.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * ncols..][..ncols];
                for b in 0..n {
                    let dst = &mut dx.data[(ci * n + b) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &row[b * hw + y * w..][..w];
                        let drow = &mut dst[sy as usize * w..][..w];
                        match kx {
                            0 => {
                                for (d, s) in drow[..w - 1].iter_mut().zip(&src[1..]) {
                                    *d += s;
                                }
                            }
                            1 => {
                                for (d, s) in drow.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                            _ => {
                                for (d, s) in drow[1..].iter_mut().zip(&src[..w - 1]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias_rows(out: &mut [f32], bias: &[f32], cols: usize) {
    for (row, b) in out.chunks_exact_mut(cols).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_row_sums(grad: &mut [f32], dy: &[f32], cols: usize) {
    for (g, row) in grad.iter_mut().zip(dy.chunks_exact(cols)) {
        *g += row.iter().sum::<f32>();
    }
}

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: Param,
    pub bias: Param,
    ci: usize,
    co: usize,
    input: Option<Tensor>,
}

impl Conv3x3 {
    pub fn new(name: &str, ci: usize, co: usize, rng: &mut impl Rng) -> Self {
        let w = xavier_uniform(rng, ci * 9, co * 9, co * ci * 9);
        Self {
            weight: Param::new(format!("{name}.weight"), vec![co, ci, 3, 3], w),
            bias: Param::filled(format!("{name}.bias"), vec![co], BIAS_INIT),
            ci,
            co,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        assert_eq!(x.c, self.ci, "{}: channel mismatch", self.weight.name);
        let ncols = x.cols();
        let mut out = Tensor::zeros(self.co, x.n, x.h, x.w);
        with_buf(&COLS, self.ci * 9 * ncols, |cols| {
            im2col(x, cols);
            gemm(self.co, self.ci * 9, ncols, 1.0, &self.weight.value, false, cols, false, 0.0, &mut out.data);
        });
        add_bias_rows(&mut out.data, &self.bias.value, ncols);
        if cache {
            self.input = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = take(&mut self.input, &self.weight.name);
        let ncols = x.cols();
        let k = self.ci * 9;
        accumulate_row_sums(&mut self.bias.grad, &dy.data, ncols);
        let mut dx = x.zeros_like();
        with_buf(&COLS, k * ncols, |cols| {
            im2col(&x, cols);
            gemm(self.co, ncols, k, 1.0, &dy.data, false, cols, true, 1.0, &mut self.weight.grad);
        });
        with_buf(&DCOLS, k * ncols, |dcols| {
            gemm(k, self.co, ncols, 1.0, &self.weight.value, true, &dy.data, false, 0.0, dcols);
            col2im(dcols, &mut dx);
        });
        dx
    }
}

impl Module for Conv3x3 {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Pointwise (1×1) convolution.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub weight: Param,
    pub bias: Param,
    ci: usize,
    co: usize,
    input: Option<Tensor>,
}

impl Conv1x1 {
    pub fn new(name: &str, ci: usize, co: usize, rng: &mut impl Rng) -> Self {
        let w = xavier_uniform(rng, ci, co, co * ci);
        Self {
            weight: Param::new(format!("{name}.weight"), vec![co, ci, 1, 1], w),
            bias: Param::filled(format!("{name}.bias"), vec![co], BIAS_INIT),
            ci,
            co,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        assert_eq!(x.c, self.ci, "{}: channel mismatch", self.weight.name);
        let ncols = x.cols();
        let mut out = Tensor::zeros(self.co, x.n, x.h, x.w);
        gemm(self.co, self.ci, ncols, 1.0, &self.weight.value, false, &x.data, false, 0.0, &mut out.data);
        add_bias_rows(&mut out.data, &self.bias.value, ncols);
        if cache {
            self.input = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = take(&mut self.input, &self.weight.name);
        let ncols = x.cols();
        accumulate_row_sums(&mut self.bias.grad, &dy.data, ncols);
        gemm(self.co, ncols, self.ci, 1.0, &dy.data, false, &x.data, true, 1.0, &mut self.weight.grad);
        let mut dx = x.zeros_like();
        gemm(self.ci, self.co, ncols, 1.0, &self.weight.value, true, &dy.data, false, 0.0, &mut dx.data);
        dx
    }
}

impl Module for Conv1x1 {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// One-group normalization: each sample is standardized over all of its
/// channels and pixels, then scaled (and optionally shifted) per channel.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl GroupNorm {
    pub fn new(name: &str, c: usize, affine_bias: bool) -> Self {
        Self {
            weight: Param::filled(format!("{name}.weight"), vec![c], 1.0),
            bias: affine_bias.then(|| Param::filled(format!("{name}.bias"), vec![c], 0.0)),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        let hw = x.hw();
        let count = (x.c * hw) as f64;
        let mut xhat = x.zeros_like();
        let mut rstds = Vec::with_capacity(x.n);
        for b in 0..x.n {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for c in 0..x.c {
                for &v in &x.data[(c * x.n + b) * hw..][..hw] {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / count;
            let var = (sq / count - mean * mean).max(0.0);
            let rstd = (1.0 / (var + NORM_EPS as f64).sqrt()) as f32;
            let mean = mean as f32;
            for c in 0..x.c {
                let off = (c * x.n + b) * hw;
                for (o, &v) in xhat.data[off..off + hw].iter_mut().zip(&x.data[off..off + hw]) {
                    *o = (v - mean) * rstd;
                }
            }
            rstds.push(rstd);
        }
        let mut out = xhat.clone();
        let plane = x.n * hw;
        for c in 0..x.c {
            let wv = self.weight.value[c];
            let bv = self.bias.as_ref().map_or(0.0, |b| b.value[c]);
            for v in &mut out.data[c * plane..(c + 1) * plane] {
                *v = *v * wv + bv;
            }
        }
        if cache {
            self.cache = Some((xhat, rstds));
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (xhat, rstds) = take(&mut self.cache, &self.weight.name);
        let hw = dy.hw();
        let plane = dy.n * hw;
        for c in 0..dy.c {
            let d = &dy.data[c * plane..(c + 1) * plane];
            let xh = &xhat.data[c * plane..(c + 1) * plane];
            self.weight.grad[c] += d.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>();
            if let Some(bias) = &mut self.bias {
                bias.grad[c] += d.iter().sum::<f32>();
            }
        }
        let count = (dy.c * hw) as f32;
        let mut dx = dy.zeros_like();
        for b in 0..dy.n {
            let mut mean_g = 0.0f64;
            let mut mean_gx = 0.0f64;
            for c in 0..dy.c {
                let off = (c * dy.n + b) * hw;
                let wv = self.weight.value[c];
                for (g, xh) in dy.data[off..off + hw].iter().zip(&xhat.data[off..off + hw]) {
                    let gh = g * wv;
                    mean_g += gh as f64;
                    mean_gx += (gh * xh) as f64;
                }
            }
            let mean_g = (mean_g / count as f64) as f32;
            let mean_gx = (mean_gx / count as f64) as f32;
            let rstd = rstds[b];
            for c in 0..dy.c {
                let off = (c * dy.n + b) * hw;
                let wv = self.weight.value[c];
                for i in off..off + hw {
                    let gh = dy.data[i] * wv;
                    dx.data[i] = rstd * (gh - mean_g - xhat.data[i] * mean_gx);
                }
            }
        }
        dx
    }
}

impl Module for GroupNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Per-token normalization over the feature axis of a row-major `[rows, d]`
/// matrix, with a per-feature scale and optional shift.
#[derive(Debug, Clone)]
pub struct TokenNorm {
    pub weight: Param,
    pub bias: Option<Param>,
    d: usize,
    cache: Option<(Vec<f32>, Vec<f32>)>,
}

impl TokenNorm {
    pub fn new(name: &str, d: usize, affine_bias: bool) -> Self {
        Self {
            weight: Param::filled(format!("{name}.weight"), vec![d], 1.0),
            bias: affine_bias.then(|| Param::filled(format!("{name}.bias"), vec![d], 0.0)),
            d,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &[f32], cache: bool) -> Vec<f32> {
        let d = self.d;
        let mut xhat = vec![0.0; x.len()];
        let mut rstds = Vec::with_capacity(x.len() / d);
        for (row, out) in x.chunks_exact(d).zip(xhat.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rstd = 1.0 / (var + NORM_EPS).sqrt();
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let mut y = xhat.clone();
        for row in y.chunks_exact_mut(d) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.weight.value[j] + self.bias.as_ref().map_or(0.0, |b| b.value[j]);
            }
        }
        if cache {
            self.cache = Some((xhat, rstds));
        }
        y
    }

    pub fn backward(&mut self, dy: &[f32]) -> Vec<f32> {
        let (xhat, rstds) = take(&mut self.cache, &self.weight.name);
        let d = self.d;
        let mut dx = vec![0.0; dy.len()];
        for (((g, xh), out), rstd) in dy
            .chunks_exact(d)
            .zip(xhat.chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
            .zip(&rstds)
        {
            let mut mean_g = 0.0;
            let mut mean_gx = 0.0;
            for j in 0..d {
                self.weight.grad[j] += g[j] * xh[j];
                if let Some(b) = &mut self.bias {
                    b.grad[j] += g[j];
                }
                let gh = g[j] * self.weight.value[j];
                mean_g += gh;
                mean_gx += gh * xh[j];
            }
            mean_g /= d as f32;
            mean_gx /= d as f32;
            for j in 0..d {
                let gh = g[j] * self.weight.value[j];
                out[j] = rstd * (gh - mean_g - xh[j] * mean_gx);
            }
        }
        dx
    }
}

impl Module for TokenNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Fully connected layer on row-major `[rows, in]` input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    fan_in: usize,
    fan_out: usize,
    input: Option<Vec<f32>>,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = xavier_uniform(rng, fan_in, fan_out, fan_in * fan_out);
        Self {
            weight: Param::new(format!("{name}.weight"), vec![fan_out, fan_in], w),
            bias: Param::filled(format!("{name}.bias"), vec![fan_out], BIAS_INIT),
            fan_in,
            fan_out,
            input: None,
        }
    }

    pub fn fan_out(&self) -> usize {
        self.fan_out
    }

    pub fn forward(&mut self, x: &[f32], cache: bool) -> Vec<f32> {
        let rows = x.len() / self.fan_in;
        let mut y = vec![0.0; rows * self.fan_out];
        for row in y.chunks_exact_mut(self.fan_out) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(rows, self.fan_in, self.fan_out, 1.0, x, false, &self.weight.value, true, 1.0, &mut y);
        if cache {
            self.input = Some(x.to_vec());
        }
        y
    }

    pub fn backward(&mut self, dy: &[f32]) -> Vec<f32> {
        let x = take(&mut self.input, &self.weight.name);
        let rows = x.len() / self.fan_in;
        for row in dy.chunks_exact(self.fan_out) {
            for (g, v) in self.bias.grad.iter_mut().zip(row) {
                *g += v;
            }
        }
        gemm(self.fan_out, rows, self.fan_in, 1.0, dy, true, &x, false, 1.0, &mut self.weight.grad);
        let mut dx = vec![0.0; x.len()];
        gemm(rows, self.fan_out, self.fan_in, 1.0, dy, false, &self.weight.value, false, 0.0, &mut dx);
        dx
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// `x * sigmoid(x)`.
#[derive(Debug, Clone, Default)]
pub struct Silu {
    input: Option<Vec<f32>>,
}

impl Silu {
    pub fn forward(&mut self, x: &[f32], cache: bool) -> Vec<f32> {
        if cache {
            self.input = Some(x.to_vec());
        }
        x.iter().map(|&v| v * sigmoid(v)).collect()
    }

    pub fn backward(&mut self, dy: &[f32]) -> Vec<f32> {
        let x = take(&mut self.input, "silu");
        dy.iter()
            .zip(&x)
            .map(|(g, &v)| {
                let s = sigmoid(v);
                g * (s + v * s * (1.0 - s))
            })
            .collect()
    }

    pub fn forward_t(&mut self, x: &Tensor, cache: bool) -> Tensor {
        x.with_data(self.forward(&x.data, cache))
    }

    pub fn backward_t(&mut self, dy: &Tensor) -> Tensor {
        dy.with_data(self.backward(&dy.data))
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - p)` during
/// training; evaluation is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    p: f32,
    mask: Option<Vec<f32>>,
}

impl Dropout {
    pub fn new(p: f32) -> Self {
        Self { p, mask: None }
    }

    pub fn rate(&self) -> f32 {
        self.p
    }

    /// `rng` is `Some` in training mode.
    pub fn forward<R: Rng>(&mut self, x: &Tensor, rng: Option<&mut R>, cache: bool) -> Tensor {
        match rng {
            Some(rng) if self.p > 0.0 => {
                let keep = 1.0 / (1.0 - self.p);
                let mask: Vec<f32> = (0..x.data.len())
                    .map(|_| if rng.gen::<f32>() < self.p { 0.0 } else { keep })
                    .collect();
                let mut out = x.clone();
                out.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                if cache {
                    self.mask = Some(mask);
                }
                out
            }
            _ => {
                if cache {
                    self.mask = None;
                }
                x.clone()
            }
        }
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut dx = dy.clone();
        if let Some(mask) = self.mask.take() {
            dx.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        }
        dx
    }
}

/// 2×2 average pooling with stride 2.
#[derive(Debug, Clone, Copy, Default)]
pub struct AvgPool2;

impl AvgPool2 {
    pub fn forward(x: &Tensor) -> Tensor {
        let (h2, w2) = (x.h / 2, x.w / 2);
        let mut out = Tensor::zeros(x.c, x.n, h2, w2);
        for plane in 0..x.c * x.n {
            let src = &x.data[plane * x.h * x.w..][..x.h * x.w];
            let dst = &mut out.data[plane * h2 * w2..][..h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    let i = 2 * y * x.w + 2 * xx;
                    dst[y * w2 + xx] = 0.25 * (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]);
                }
            }
        }
        out
    }

    pub fn backward(dy: &Tensor) -> Tensor {
        let (h, w) = (dy.h * 2, dy.w * 2);
        let mut dx = Tensor::zeros(dy.c, dy.n, h, w);
        for plane in 0..dy.c * dy.n {
            let src = &dy.data[plane * dy.h * dy.w..][..dy.h * dy.w];
            let dst = &mut dx.data[plane * h * w..][..h * w];
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = 0.25 * src[(y / 2) * dy.w + x / 2];
                }
            }
        }
        dx
    }
}

/// Nearest-neighbour ×2 upsampling.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upsample2;

impl Upsample2 {
    pub fn forward(x: &Tensor) -> Tensor {
        let (h, w) = (x.h * 2, x.w * 2);
        let mut out = Tensor::zeros(x.c, x.n, h, w);
        for plane in 0..x.c * x.n {
            let src = &x.data[plane * x.h * x.w..][..x.h * x.w];
            let dst = &mut out.data[plane * h * w..][..h * w];
            for y in 0..h {
                for xx in 0..w {
                    dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
                }
            }
        }
        out
    }

    pub fn backward(dy: &Tensor) -> Tensor {
        let (h2, w2) = (dy.h / 2, dy.w / 2);
        let mut dx = Tensor::zeros(dy.c, dy.n, h2, w2);
        for plane in 0..dy.c * dy.n {
            let src = &dy.data[plane * dy.h * dy.w..][..dy.h * dy.w];
            let dst = &mut dx.data[plane * h2 * w2..][..h2 * w2];
            for y in 0..dy.h {
                for x in 0..dy.w {
                    dst[(y / 2) * w2 + x / 2] += src[y * dy.w + x];
                }
            }
        }
        dx
    }
}
