//! Per-layer numeric kernels shared by the forward pass, the gradient and
//! the curvature backpropagation.

#![allow(clippy::needless_range_loop)]

use super::LayerSpec;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub bias: bool,
}

impl ConvGeom {
    pub fn new(spec: &LayerSpec, in_shape: &[usize], out_shape: &[usize]) -> Self {
        match *spec {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kh,
                kw,
                stride,
                padding,
                bias,
            } => Self {
                in_ch,
                out_ch,
                kh,
                kw,
                stride,
                padding,
                in_h: in_shape[1],
                in_w: in_shape[2],
                out_h: out_shape[1],
                out_w: out_shape[2],
                bias,
            },
            _ => unreachable!("ConvGeom on non-conv layer"),
        }
    }

    pub fn kernel_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kh * self.kw
    }

    /// Input coordinate hit by kernel offset `a` at output coordinate `o`,
    /// or `None` inside the zero padding.
    #[inline]
    fn src(o: usize, a: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
        let p = (o * stride + a) as isize - pad as isize;
        (p >= 0 && (p as usize) < n).then_some(p as usize)
    }

    /// Range of output columns `ow` for which kernel column `b` lands inside
    /// the input (stride 1 fast path helper).
    #[inline]
    fn valid_cols(&self, b: usize) -> (usize, usize) {
        let mut lo = 0;
        while lo < self.out_w && Self::src(lo, b, self.stride, self.padding, self.in_w).is_none() {
            lo += 1;
        }
        let mut hi = self.out_w;
        while hi > lo
            && Self::src(hi - 1, b, self.stride, self.padding, self.in_w).is_none()
        {
            hi -= 1;
        }
        (lo, hi)
    }

    pub fn forward(&self, params: &[f64], x: &[f64], y: &mut [f64]) {
        let kernel = &params[..self.kernel_len()];
        let plane = self.out_h * self.out_w;
        for co in 0..self.out_ch {
            let b = if self.bias {
                params[self.kernel_len() + co]
            } else {
                0.0
            };
            y[co * plane..(co + 1) * plane].fill(b);
        }
        self.correlate(kernel, x, y);
    }

    /// `y += conv(kernel, x)` without bias.
    pub fn correlate(&self, kernel: &[f64], x: &[f64], y: &mut [f64]) {
        let (ih_n, iw_n) = (self.in_h, self.in_w);
        let (oh_n, ow_n) = (self.out_h, self.out_w);
        for co in 0..self.out_ch {
            for ci in 0..self.in_ch {
                for a in 0..self.kh {
                    for bb in 0..self.kw {
                        let w = kernel[((co * self.in_ch + ci) * self.kh + a) * self.kw + bb];
                        if w == 0.0 {
                            continue;
                        }
                        let (lo, hi) = self.valid_cols(bb);
                        if lo >= hi {
                            continue;
                        }
                        for oh in 0..oh_n {
                            let Some(ih) = Self::src(oh, a, self.stride, self.padding, ih_n)
                            else {
                                continue;
                            };
                            let yrow = &mut y[(co * oh_n + oh) * ow_n..(co * oh_n + oh + 1) * ow_n];
                            let xrow = &x[(ci * ih_n + ih) * iw_n..(ci * ih_n + ih + 1) * iw_n];
                            if self.stride == 1 {
                                let off = lo + bb - self.padding;
                                for (yv, xv) in yrow[lo..hi].iter_mut().zip(&xrow[off..off + hi - lo]) {
                                    *yv += w * xv;
                                }
                            } else {
                                for ow in lo..hi {
                                    let iw = ow * self.stride + bb - self.padding;
                                    yrow[ow] += w * xrow[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// `gx += J_x^T gy` for the given kernel (transposed convolution).
    /// Passing the pointwise-squared kernel backpropagates a diagonal.
    pub fn correlate_transpose(&self, kernel: &[f64], gy: &[f64], gx: &mut [f64]) {
        let (ih_n, iw_n) = (self.in_h, self.in_w);
        let (oh_n, ow_n) = (self.out_h, self.out_w);
        for co in 0..self.out_ch {
            for ci in 0..self.in_ch {
                for a in 0..self.kh {
                    for bb in 0..self.kw {
                        let w = kernel[((co * self.in_ch + ci) * self.kh + a) * self.kw + bb];
                        if w == 0.0 {
                            continue;
                        }
                        let (lo, hi) = self.valid_cols(bb);
                        if lo >= hi {
                            continue;
                        }
                        for oh in 0..oh_n {
                            let Some(ih) = Self::src(oh, a, self.stride, self.padding, ih_n)
                            else {
                                continue;
                            };
                            let grow = &gy[(co * oh_n + oh) * ow_n..(co * oh_n + oh + 1) * ow_n];
                            let xrow = &mut gx[(ci * ih_n + ih) * iw_n..(ci * ih_n + ih + 1) * iw_n];
                            if self.stride == 1 {
                                let off = lo + bb - self.padding;
                                for (xv, gv) in xrow[off..off + hi - lo].iter_mut().zip(&grow[lo..hi]) {
                                    *xv += w * gv;
                                }
                            } else {
                                for ow in lo..hi {
                                    let iw = ow * self.stride + bb - self.padding;
                                    xrow[iw] += w * grow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulate parameter gradient `J_phi^T gy` into `gp`.
    pub fn param_grad(&self, x: &[f64], gy: &[f64], gp: &mut [f64]) {
        let (ih_n, iw_n) = (self.in_h, self.in_w);
        let (oh_n, ow_n) = (self.out_h, self.out_w);
        for co in 0..self.out_ch {
            for ci in 0..self.in_ch {
                for a in 0..self.kh {
                    for bb in 0..self.kw {
                        let (lo, hi) = self.valid_cols(bb);
                        let mut acc = 0.0;
                        for oh in 0..oh_n {
                            let Some(ih) = Self::src(oh, a, self.stride, self.padding, ih_n)
                            else {
                                continue;
                            };
                            let grow = &gy[(co * oh_n + oh) * ow_n..(co * oh_n + oh + 1) * ow_n];
                            let xrow = &x[(ci * ih_n + ih) * iw_n..(ci * ih_n + ih + 1) * iw_n];
                            for ow in lo..hi {
                                let iw = ow * self.stride + bb - self.padding;
                                acc += grow[ow] * xrow[iw];
                            }
                        }
                        gp[((co * self.in_ch + ci) * self.kh + a) * self.kw + bb] += acc;
                    }
                }
            }
            if self.bias {
                let plane = oh_n * ow_n;
                gp[self.kernel_len() + co] += gy[co * plane..(co + 1) * plane].iter().sum::<f64>();
            }
        }
    }

    /// Nonzero entries `(input index, kernel index)` of row `o` of the input
    /// Jacobian; the Jacobian value is `kernel[kernel index]`.
    pub fn input_row(&self, o: usize, out: &mut Vec<(usize, usize)>) {
        out.clear();
        let plane = self.out_h * self.out_w;
        let co = o / plane;
        let oh = (o % plane) / self.out_w;
        let ow = o % self.out_w;
        for ci in 0..self.in_ch {
            for a in 0..self.kh {
                let Some(ih) = Self::src(oh, a, self.stride, self.padding, self.in_h) else {
                    continue;
                };
                for bb in 0..self.kw {
                    let Some(iw) = Self::src(ow, bb, self.stride, self.padding, self.in_w) else {
                        continue;
                    };
                    out.push((
                        (ci * self.in_h + ih) * self.in_w + iw,
                        ((co * self.in_ch + ci) * self.kh + a) * self.kw + bb,
                    ));
                }
            }
        }
    }

    /// Nonzero entries `(parameter index, value)` of row `o` of the
    /// parameter Jacobian at input `x`.
    pub fn param_row(&self, x: &[f64], o: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let plane = self.out_h * self.out_w;
        let co = o / plane;
        let oh = (o % plane) / self.out_w;
        let ow = o % self.out_w;
        for ci in 0..self.in_ch {
            for a in 0..self.kh {
                let Some(ih) = Self::src(oh, a, self.stride, self.padding, self.in_h) else {
                    continue;
                };
                for bb in 0..self.kw {
                    let Some(iw) = Self::src(ow, bb, self.stride, self.padding, self.in_w) else {
                        continue;
                    };
                    out.push((
                        ((co * self.in_ch + ci) * self.kh + a) * self.kw + bb,
                        x[(ci * self.in_h + ih) * self.in_w + iw],
                    ));
                }
            }
        }
        if self.bias {
            out.push((self.kernel_len() + co, 1.0));
        }
    }
}

/// `y = W x + b` with `W` stored row-major `[out, in]`.
pub(crate) fn linear_forward(params: &[f64], n_in: usize, n_out: usize, bias: bool, x: &[f64], y: &mut [f64]) {
    for (o, yo) in y.iter_mut().enumerate().take(n_out) {
        let row = &params[o * n_in..(o + 1) * n_in];
        let mut acc = if bias { params[n_out * n_in + o] } else { 0.0 };
        acc += dot(row, x);
        *yo = acc;
    }
}

/// `gx += W^T gy`.
pub(crate) fn linear_input_grad(params: &[f64], n_in: usize, n_out: usize, gy: &[f64], gx: &mut [f64]) {
    for o in 0..n_out {
        let g = gy[o];
        if g == 0.0 {
            continue;
        }
        let row = &params[o * n_in..(o + 1) * n_in];
        for (xv, w) in gx.iter_mut().zip(row) {
            *xv += g * w;
        }
    }
}

/// `gW += gy x^T`, `gb += gy`.
pub(crate) fn linear_param_grad(n_in: usize, n_out: usize, bias: bool, x: &[f64], gy: &[f64], gp: &mut [f64]) {
    for o in 0..n_out {
        let g = gy[o];
        if g != 0.0 {
            for (p, xv) in gp[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                *p += g * xv;
            }
        }
        if bias {
            gp[n_out * n_in + o] += g;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize without reassociation flags
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Max pooling with window and stride `k`; ties go to the first index in
/// scan order. Returns the flat input index chosen for every output.
pub(crate) fn maxpool_forward(shape: &[usize], k: usize, x: &[f64], y: &mut [f64]) -> Vec<usize> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh_n, ow_n) = (h / k, w / k);
    let mut arg = vec![0; c * oh_n * ow_n];
    for ch in 0..c {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for a in 0..k {
                    for b in 0..k {
                        let idx = (ch * h + oh * k + a) * w + ow * k + b;
                        if best == usize::MAX || x[idx] > best_v {
                            best = idx;
                            best_v = x[idx];
                        }
                    }
                }
                let o = (ch * oh_n + oh) * ow_n + ow;
                y[o] = best_v;
                arg[o] = best;
            }
        }
    }
    arg
}

/// Source index of every output entry of a nearest-neighbour upsampling.
pub(crate) fn upsample_sources(in_shape: &[usize], factor: usize) -> Vec<usize> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh_n, ow_n) = (h * factor, w * factor);
    let mut src = Vec::with_capacity(c * oh_n * ow_n);
    for ch in 0..c {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                src.push((ch * h + oh / factor) * w + ow / factor);
            }
        }
    }
    src
}
