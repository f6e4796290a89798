//! Forward and backward kernels on raw tensors. Everything here is
//! single-threaded and deterministic.

use std::sync::Arc;

use crate::Tensor;

pub const BN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Conv2dSpec {
    pub fn same(kh: usize, kw: usize) -> Self {
        Self {
            stride: (1, 1),
            padding: (kh / 2, kw / 2),
            dilation: (1, 1),
        }
    }

    pub fn dilated(k: usize, dilation: usize) -> Self {
        Self {
            stride: (1, 1),
            padding: (dilation * (k / 2), dilation * (k / 2)),
            dilation: (dilation, dilation),
        }
    }

    pub fn strided(stride: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = (stride, stride);
        self
    }

    pub fn with_padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let eh = self.dilation.0 * (kh - 1) + 1;
        let ew = self.dilation.1 * (kw - 1) + 1;
        assert!(
            h + 2 * self.padding.0 >= eh && w + 2 * self.padding.1 >= ew,
            "convolution kernel larger than padded input"
        );
        (
            (h + 2 * self.padding.0 - eh) / self.stride.0 + 1,
            (w + 2 * self.padding.1 - ew) / self.stride.1 + 1,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTranspose2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2dSpec {
    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + kh + self.output_padding - 2 * self.padding,
            (w - 1) * self.stride + kw + self.output_padding - 2 * self.padding,
        )
    }

    fn as_conv(&self) -> Conv2dSpec {
        Conv2dSpec {
            stride: (self.stride, self.stride),
            padding: (self.padding, self.padding),
            dilation: (1, 1),
        }
    }
}

/// Argmax positions of a 2x2/stride-2 max pool, flat within each `h*w` plane
/// of the pooled input.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    pub(crate) idx: Arc<Vec<u32>>,
    pub(crate) in_h: usize,
    pub(crate) in_w: usize,
    pub(crate) out_shape: (usize, usize, usize, usize),
}

impl PoolIndices {
    pub fn input_hw(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }
}

/// `C[m,n] = op(A) op(B) + beta * C` on row-major buffers. `trans_a` means
/// `A` is stored as `[k, m]`; `trans_b` means `B` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe buffers of at least the asserted lengths.
    unsafe {
        matrixmultiply::sgemm(
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

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, spec: Conv2dSpec) -> Self {
        let (oh, ow) = spec.output_size(h, w, kh, kw);
        Self {
            c,
            h,
            w,
            kh,
            kw,
            spec,
            oh,
            ow,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.spec.stride == (1, 1)
            && self.spec.padding == (0, 0)
    }

    /// Input column for output column `ox` and kernel column `kj`, if inside.
    #[inline]
    fn src_x(&self, ox: usize, kj: usize) -> Option<usize> {
        let ix = (ox * self.spec.stride.1 + kj * self.spec.dilation.1) as isize
            - self.spec.padding.1 as isize;
        (ix >= 0 && (ix as usize) < self.w).then_some(ix as usize)
    }

    #[inline]
    fn src_y(&self, oy: usize, ki: usize) -> Option<usize> {
        let iy = (oy * self.spec.stride.0 + ki * self.spec.dilation.0) as isize
            - self.spec.padding.0 as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

fn im2col(g: &Geom, img: &[f32], col: &mut [f32]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.src_y(oy, ki) {
                        None => drow.fill(0.0),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d = g.src_x(ox, kj).map_or(0.0, |ix| src[ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &Geom, col: &[f32], img: &mut [f32]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(iy) = g.src_y(oy, ki) else { continue };
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src_x(ox, kj) {
                            dst[ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias(out: &mut [f32], bias: &[f32], plane: usize) {
    for (c, b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

fn channel_sums(t: &Tensor) -> Vec<f32> {
    let (n, c, h, w) = t.dims4();
    let plane = h * w;
    let mut out = vec![0.0f32; c];
    for img in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let s = &t.data()[(img * c + ch) * plane..(img * c + ch + 1) * plane];
            *o += s.iter().sum::<f32>();
        }
    }
    out
}

/// Weight layout `[cout, cin, kh, kw]`.
pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    spec: Conv2dSpec,
) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, kh, kw) = w.dims4();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let g = Geom::new(cin, h, wd, kh, kw, spec);
    let (k, p) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(&[n, cout, g.oh, g.ow]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for img in 0..n {
        let xi = x.image(img);
        let b: &[f32] = if g.is_pointwise() {
            xi
        } else {
            im2col(&g, xi, &mut col);
            &col
        };
        let yi = &mut out.data_mut()[img * cout * p..(img + 1) * cout * p];
        gemm(cout, k, p, w.data(), false, b, false, yi, 0.0);
        if let Some(bias) = bias {
            add_channel_bias(yi, bias.data(), p);
        }
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    spec: Conv2dSpec,
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Option<Tensor>) {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, kh, kw) = w.dims4();
    let g = Geom::new(cin, h, wd, kh, kw, spec);
    let (k, p) = (g.rows(), g.cols());
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    let mut dcol = if pointwise || !need_dx { Vec::new() } else { vec![0.0; k * p] };
    for img in 0..n {
        let xi = x.image(img);
        let dyi = dy.image(img);
        let b: &[f32] = if pointwise {
            xi
        } else {
            im2col(&g, xi, &mut col);
            &col
        };
        gemm(cout, p, k, dyi, false, b, true, dw.data_mut(), 1.0);
        if let Some(dx) = dx.as_mut() {
            let len = cin * h * wd;
            let dxi = &mut dx.data_mut()[img * len..(img + 1) * len];
            if pointwise {
                gemm(k, cout, p, w.data(), true, dyi, false, dxi, 0.0);
            } else {
                gemm(k, cout, p, w.data(), true, dyi, false, &mut dcol, 0.0);
                col2im(&g, &dcol, dxi);
            }
        }
    }
    let db = has_bias.then(|| Tensor::from_vec(&[cout], channel_sums(dy)));
    (dx, dw, db)
}

/// Weight layout `[cin, cout, kh, kw]`.
pub(crate) fn conv_transpose2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    spec: ConvTranspose2dSpec,
) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (wcin, cout, kh, kw) = w.dims4();
    assert_eq!(cin, wcin, "conv_transpose2d channel mismatch");
    let (oh, ow) = spec.output_size(h, wd, kh, kw);
    // The adjoint conv maps (oh, ow) -> (h, wd).
    let g = Geom::new(cout, oh, ow, kh, kw, spec.as_conv());
    debug_assert_eq!((g.oh, g.ow), (h, wd));
    let (k, p) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let mut col = vec![0.0; k * p];
    let len = cout * oh * ow;
    for img in 0..n {
        gemm(k, cin, p, w.data(), true, x.image(img), false, &mut col, 0.0);
        let yi = &mut out.data_mut()[img * len..(img + 1) * len];
        col2im(&g, &col, yi);
        if let Some(bias) = bias {
            add_channel_bias(yi, bias.data(), oh * ow);
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    spec: ConvTranspose2dSpec,
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Option<Tensor>) {
    let (n, cin, h, wd) = x.dims4();
    let (_, cout, kh, kw) = w.dims4();
    let (oh, ow) = spec.output_size(h, wd, kh, kw);
    let g = Geom::new(cout, oh, ow, kh, kw, spec.as_conv());
    let (k, p) = (g.rows(), g.cols());
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dcol = vec![0.0; k * p];
    for img in 0..n {
        im2col(&g, dy.image(img), &mut dcol);
        // dW[cin, k] += x[cin, p] . dcol^T
        gemm(cin, p, k, x.image(img), false, &dcol, true, dw.data_mut(), 1.0);
        if let Some(dx) = dx.as_mut() {
            let len = cin * h * wd;
            let dxi = &mut dx.data_mut()[img * len..(img + 1) * len];
            gemm(cin, k, p, w.data(), false, &dcol, false, dxi, 0.0);
        }
    }
    let db = has_bias.then(|| Tensor::from_vec(&[cout], channel_sums(dy)));
    (dx, dw, db)
}

/// Per-channel affine map `y = x * scale[c] + shift[c]`.
pub(crate) fn channel_affine(x: &Tensor, scale: &[f32], shift: &[f32]) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = x.clone();
    for img in 0..n {
        for ch in 0..c {
            let s = &mut out.data_mut()[(img * c + ch) * plane..(img * c + ch + 1) * plane];
            let (a, b) = (scale[ch], shift[ch]);
            for v in s {
                *v = *v * a + b;
            }
        }
    }
    out
}

/// Batch mean and biased variance per channel.
pub(crate) fn channel_moments(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for img in 0..n {
            let p = &x.data()[(img * c + ch) * plane..(img * c + ch + 1) * plane];
            s += p.iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0f64;
        for img in 0..n {
            let p = &x.data()[(img * c + ch) * plane..(img * c + ch + 1) * plane];
            q += p.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m as f32;
        var[ch] = (q / count) as f32;
    }
    (mean, var)
}

/// Sums over (n, h, w) of `dy` and `dy * xhat` per channel.
pub(crate) fn bn_reductions(
    x: &Tensor,
    dy: &Tensor,
    mean: &[f32],
    inv_std: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut sum_dy = vec![0.0f32; c];
    let mut sum_dy_xhat = vec![0.0f32; c];
    for img in 0..n {
        for ch in 0..c {
            let r = (img * c + ch) * plane..(img * c + ch + 1) * plane;
            let (xs, ds) = (&x.data()[r.clone()], &dy.data()[r]);
            let (mut a, mut b) = (0.0f32, 0.0f32);
            for (xv, dv) in xs.iter().zip(ds) {
                a += dv;
                b += dv * (xv - mean[ch]) * inv_std[ch];
            }
            sum_dy[ch] += a;
            sum_dy_xhat[ch] += b;
        }
    }
    (sum_dy, sum_dy_xhat)
}

/// Input gradient of batch normalization computed with batch statistics.
pub(crate) fn bn_train_dx(
    x: &Tensor,
    dy: &Tensor,
    gamma: &[f32],
    mean: &[f32],
    inv_std: &[f32],
    sum_dy: &[f32],
    sum_dy_xhat: &[f32],
) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let m = (n * plane) as f32;
    let mut dx = Tensor::zeros(x.shape());
    for img in 0..n {
        for ch in 0..c {
            let r = (img * c + ch) * plane..(img * c + ch + 1) * plane;
            let k = gamma[ch] * inv_std[ch] / m;
            let xs = &x.data()[r.clone()];
            let ds = &dy.data()[r.clone()];
            let out = &mut dx.data_mut()[r];
            for ((o, xv), dv) in out.iter_mut().zip(xs).zip(ds) {
                let xhat = (xv - mean[ch]) * inv_std[ch];
                *o = k * (m * dv - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
            }
        }
    }
    dx
}

pub(crate) fn prelu_forward(x: &Tensor, a: &[f32]) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = x.clone();
    for img in 0..n {
        for ch in 0..c {
            let slope = a[if a.len() == 1 { 0 } else { ch }];
            for v in &mut out.data_mut()[(img * c + ch) * plane..(img * c + ch + 1) * plane] {
                if *v <= 0.0 {
                    *v *= slope;
                }
            }
        }
    }
    out
}

pub(crate) fn prelu_backward(x: &Tensor, a: &[f32], dy: &Tensor) -> (Tensor, Vec<f32>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut dx = dy.clone();
    let mut da = vec![0.0f32; a.len()];
    for img in 0..n {
        for ch in 0..c {
            let ai = if a.len() == 1 { 0 } else { ch };
            let r = (img * c + ch) * plane..(img * c + ch + 1) * plane;
            let xs = &x.data()[r.clone()];
            let ds = &dy.data()[r.clone()];
            let out = &mut dx.data_mut()[r];
            for ((o, xv), dv) in out.iter_mut().zip(xs).zip(ds) {
                if *xv <= 0.0 {
                    *o = dv * a[ai];
                    da[ai] += dv * xv;
                }
            }
        }
    }
    (dx, da)
}

pub(crate) fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub(crate) fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if *xv <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub(crate) fn max_pool2x2(x: &Tensor) -> (Tensor, PoolIndices) {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even spatial size");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut idx = vec![0u32; n * c * oh * ow];
    for plane_i in 0..n * c {
        let src = &x.data()[plane_i * h * w..(plane_i + 1) * h * w];
        let dst = &mut out.data_mut()[plane_i * oh * ow..(plane_i + 1) * oh * ow];
        let di = &mut idx[plane_i * oh * ow..(plane_i + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = (2 * oy + dy) * w + 2 * ox + dx;
                    // Strictly greater keeps the first maximum; NaN never wins.
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                dst[oy * ow + ox] = src[best];
                di[oy * ow + ox] = best as u32;
            }
        }
    }
    let indices = PoolIndices {
        idx: Arc::new(idx),
        in_h: h,
        in_w: w,
        out_shape: (n, c, oh, ow),
    };
    (out, indices)
}

/// Scatters pooled-size gradients back to the argmax positions.
pub(crate) fn max_pool2x2_backward(dy: &Tensor, ind: &PoolIndices) -> Tensor {
    let (n, c, oh, ow) = ind.out_shape;
    let (h, w) = (ind.in_h, ind.in_w);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for plane_i in 0..n * c {
        let src = &dy.data()[plane_i * oh * ow..(plane_i + 1) * oh * ow];
        let ii = &ind.idx[plane_i * oh * ow..(plane_i + 1) * oh * ow];
        let dst = &mut dx.data_mut()[plane_i * h * w..(plane_i + 1) * h * w];
        for (g, &i) in src.iter().zip(ii) {
            dst[i as usize] += g;
        }
    }
    dx
}

pub(crate) fn max_unpool2x2(x: &Tensor, ind: &PoolIndices) -> Tensor {
    assert_eq!(
        x.dims4(),
        ind.out_shape,
        "unpool input must match the pooled shape"
    );
    max_pool2x2_backward(x, ind)
}

pub(crate) fn max_unpool2x2_backward(dy: &Tensor, ind: &PoolIndices) -> Tensor {
    let (n, c, oh, ow) = ind.out_shape;
    let (h, w) = (ind.in_h, ind.in_w);
    let mut dx = Tensor::zeros(&[n, c, oh, ow]);
    for plane_i in 0..n * c {
        let src = &dy.data()[plane_i * h * w..(plane_i + 1) * h * w];
        let ii = &ind.idx[plane_i * oh * ow..(plane_i + 1) * oh * ow];
        let dst = &mut dx.data_mut()[plane_i * oh * ow..(plane_i + 1) * oh * ow];
        for (d, &i) in dst.iter_mut().zip(ii) {
            *d = src[i as usize];
        }
    }
    dx
}

pub(crate) fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb), "concat of mismatched tensors");
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for img in 0..n {
        data.extend_from_slice(a.image(img));
        data.extend_from_slice(b.image(img));
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data)
}

pub(crate) fn split_channels(t: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (n, c, h, w) = t.dims4();
    let cb = c - ca;
    let plane = h * w;
    let mut a = Vec::with_capacity(n * ca * plane);
    let mut b = Vec::with_capacity(n * cb * plane);
    for img in 0..n {
        let s = t.image(img);
        a.extend_from_slice(&s[..ca * plane]);
        b.extend_from_slice(&s[ca * plane..]);
    }
    (
        Tensor::from_vec(&[n, ca, h, w], a),
        Tensor::from_vec(&[n, cb, h, w], b),
    )
}

pub(crate) fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, spec: Conv2dSpec) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let (cout, _, kh, kw) = w.dims4();
        let (oh, ow) = spec.output_size(h, wd, kh, kw);
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * spec.stride.0 + ki * spec.dilation.0) as isize
                                        - spec.padding.0 as isize;
                                    let ix = (ox * spec.stride.1 + kj * spec.dilation.1) as isize
                                        - spec.padding.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x.data()[((b * cin + ci) * h + iy as usize) * wd
                                        + ix as usize]
                                        * w.data()[((co * cin + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], k: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|i| (i as f32 * k).sin() * 0.5).collect(),
        )
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f32) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn conv_matches_naive_for_all_geometries() {
        let x = ramp(&[2, 3, 9, 8], 0.37);
        for (kh, kw, spec) in [
            (3, 3, Conv2dSpec::same(3, 3)),
            (1, 1, Conv2dSpec::same(1, 1)),
            (2, 2, Conv2dSpec::strided(2)),
            (3, 3, Conv2dSpec::dilated(3, 2)),
            (5, 1, Conv2dSpec::same(5, 1)),
            (1, 5, Conv2dSpec::same(1, 5)),
            (3, 3, Conv2dSpec::strided(2).with_padding(1, 1)),
        ] {
            let w = ramp(&[4, 3, kh, kw], 0.91);
            let fast = conv2d_forward(&x, &w, None, spec);
            assert_close(&fast, &naive_conv(&x, &w, spec), 1e-4);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(y), x> == <y, convT(x)> for matching geometry.
        let spec = ConvTranspose2dSpec {
            stride: 2,
            padding: 1,
            output_padding: 1,
        };
        let x = ramp(&[1, 4, 5, 6], 0.23);
        let w = ramp(&[4, 3, 3, 3], 0.57);
        let up = conv_transpose2d_forward(&x, &w, None, spec);
        assert_eq!(up.shape(), &[1, 3, 10, 12]);
        let y = ramp(&[1, 3, 10, 12], 0.71);
        // conv weight layout [cout=4, cin=3] reuses the same buffer.
        let wc = Tensor::from_vec(&[4, 3, 3, 3], w.data().to_vec());
        let down = conv2d_forward(&y, &wc, None, spec.as_conv());
        assert_eq!(down.shape(), x.shape());
        let lhs: f32 = down.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let rhs: f32 = up.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
    }

    #[test]
    fn pool_then_unpool_keeps_maxima_in_place() {
        let x = ramp(&[1, 2, 4, 4], 1.3);
        let (p, ind) = max_pool2x2(&x);
        let u = max_unpool2x2(&p, &ind);
        let nonzero = u.data().iter().filter(|v| **v != 0.0).count();
        assert!(nonzero <= 8);
        for (a, b) in u.data().iter().zip(x.data()) {
            assert!(*a == 0.0 || a == b);
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let a = ramp(&[2, 3, 2, 2], 0.1);
        let b = ramp(&[2, 1, 2, 2], 0.2);
        let c = concat_channels(&a, &b);
        let (a2, b2) = split_channels(&c, 3);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
