//! Numeric kernels for the image-shaped ops. All buffers are NCHW row-major.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Input index range `(ih_first, oh_first, count)` contributing along one axis for kernel offset `k`.
    #[inline]
    fn axis_span(
        k: usize,
        pad: usize,
        stride: usize,
        in_len: usize,
        out_len: usize,
    ) -> (usize, usize) {
        // oh valid when 0 <= oh*stride + k - pad < in_len
        let lo = if pad > k {
            (pad - k).div_ceil(stride)
        } else {
            0
        };
        let hi = if in_len + pad > k {
            ((in_len + pad - k - 1) / stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut out = vec![0.0; g.batch * g.out_channels * ho * wo];
    let in_plane = g.height * g.width;
    let out_plane = ho * wo;
    let kk = g.kernel * g.kernel;
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let dst = &mut out[(n * g.out_channels + o) * out_plane..][..out_plane];
            for c in 0..g.in_channels {
                let src = &x[(n * g.in_channels + c) * in_plane..][..in_plane];
                let wk = &w[(o * g.in_channels + c) * kk..][..kk];
                for kh in 0..g.kernel {
                    let (oh_lo, oh_hi) = ConvGeom::axis_span(kh, g.padding, g.stride, g.height, ho);
                    for kw in 0..g.kernel {
                        let wv = wk[kh * g.kernel + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) =
                            ConvGeom::axis_span(kw, g.padding, g.stride, g.width, wo);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh - g.padding;
                            let row = &src[ih * g.width..][..g.width];
                            let drow = &mut dst[oh * wo..][..wo];
                            if g.stride == 1 {
                                let off = ow_lo + kw - g.padding;
                                let n = ow_hi - ow_lo;
                                for (d, &x) in drow[ow_lo..ow_hi].iter_mut().zip(&row[off..off + n])
                                {
                                    *d += wv * x;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    drow[ow] += wv * row[ow * g.stride + kw - g.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw)` given upstream gradient `dy`.
pub fn conv2d_backward(x: &[f64], w: &[f64], dy: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let in_plane = g.height * g.width;
    let out_plane = ho * wo;
    let kk = g.kernel * g.kernel;
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let gy = &dy[(n * g.out_channels + o) * out_plane..][..out_plane];
            for c in 0..g.in_channels {
                let base = (n * g.in_channels + c) * in_plane;
                let wbase = (o * g.in_channels + c) * kk;
                for kh in 0..g.kernel {
                    let (oh_lo, oh_hi) = ConvGeom::axis_span(kh, g.padding, g.stride, g.height, ho);
                    for kw in 0..g.kernel {
                        let (ow_lo, ow_hi) =
                            ConvGeom::axis_span(kw, g.padding, g.stride, g.width, wo);
                        let wv = w[wbase + kh * g.kernel + kw];
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh - g.padding;
                            let xrow = base + ih * g.width;
                            if g.stride == 1 {
                                let off = xrow + ow_lo + kw - g.padding;
                                let n = ow_hi - ow_lo;
                                let gs = &gy[oh * wo + ow_lo..][..n];
                                for ((&gv, &xv), d) in
                                    gs.iter().zip(&x[off..off + n]).zip(&mut dx[off..off + n])
                                {
                                    acc += gv * xv;
                                    *d += gv * wv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * g.stride + kw - g.padding;
                                    let gv = gy[oh * wo + ow];
                                    acc += gv * x[xrow + iw];
                                    dx[xrow + iw] += gv * wv;
                                }
                            }
                        }
                        dw[wbase + kh * g.kernel + kw] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }
}

/// Max pooling; returns the output and the flat input index of each selected maximum.
pub fn max_pool_forward(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut out = Vec::with_capacity(g.planes * ho * wo);
    let mut arg = Vec::with_capacity(g.planes * ho * wo);
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base;
                for kh in 0..g.kernel {
                    for kw in 0..g.kernel {
                        let idx = base + (oh * g.stride + kh) * g.width + ow * g.stride + kw;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub fn avg_pool_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let scale = 1.0 / (g.kernel * g.kernel) as f64;
    let mut out = Vec::with_capacity(g.planes * ho * wo);
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = 0.0;
                for kh in 0..g.kernel {
                    for kw in 0..g.kernel {
                        acc += x[base + (oh * g.stride + kh) * g.width + ow * g.stride + kw];
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    out
}

pub fn avg_pool_backward(dy: &[f64], g: &PoolGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let scale = 1.0 / (g.kernel * g.kernel) as f64;
    let mut dx = vec![0.0; g.planes * g.height * g.width];
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oh in 0..ho {
            for ow in 0..wo {
                let gv = dy[(p * ho + oh) * wo + ow] * scale;
                for kh in 0..g.kernel {
                    for kw in 0..g.kernel {
                        dx[base + (oh * g.stride + kh) * g.width + ow * g.stride + kw] += gv;
                    }
                }
            }
        }
    }
    dx
}
