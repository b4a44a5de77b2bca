//! Raw numeric kernels over row-major slices. No graph bookkeeping here.

/// Geometry of a 2-d cross-correlation with square kernels and zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.in_h, self.in_w]
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_h(), self.out_w()]
    }
}

/// `a[m×k] · b[k×n]` with explicit strides, as a new row-major `m×n` buffer.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize) -> Vec<f64> {
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa) && b.len() >= span(k, n, rsb, csb));
    let mut c = Vec::with_capacity(m * n);
    if k == 0 {
        c.resize(m * n, 0.0);
        return c;
    }
    // SAFETY: a and b cover the strided views checked above. With beta = 0
    // dgemm only writes c, so the uninitialized capacity is never read, and
    // all m·n entries are written before set_len.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

/// Range of output columns `oj` whose input column `oj·stride + kj − pad` is
/// inside `[0, in_w)`.
fn valid_cols(g: &ConvGeom, kj: usize, ow: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride).min(ow);
    let hi = if g.in_w + g.pad > kj {
        ((g.in_w + g.pad - kj - 1) / g.stride + 1).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut cols = Vec::with_capacity(g.patch_len() * oh * ow);
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let (lo, hi) = valid_cols(g, kj, ow);
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.in_h as isize {
                        cols.extend(std::iter::repeat(0.0).take(ow));
                        continue;
                    }
                    let src = &plane[ii as usize * g.in_w..(ii as usize + 1) * g.in_w];
                    cols.extend(std::iter::repeat(0.0).take(lo));
                    if lo < hi {
                        let first = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            cols.extend_from_slice(&src[first..first + (hi - lo)]);
                        } else {
                            cols.extend(src[first..].iter().step_by(g.stride).take(hi - lo));
                        }
                    }
                    cols.extend(std::iter::repeat(0.0).take(ow - hi));
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    let k = g.kernel;
    let mut x = vec![0.0; g.in_channels * g.in_h * g.in_w];
    for c in 0..g.in_channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_cols(g, kj, ow);
                if lo == hi {
                    continue;
                }
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.in_w..(ii as usize + 1) * g.in_w];
                    let first = lo * g.stride + kj - g.pad;
                    let from = &src[oi * ow + lo..oi * ow + hi];
                    for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(from) {
                        *d += v;
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation `y[o] = Σ_c w[o,c] ⋆ x[c]` (no bias).
pub fn conv_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let (m, k, n) = (g.out_channels, g.patch_len(), g.positions());
    gemm(m, k, n, w, k as isize, 1, &cols, n as isize, 1)
}

/// Adjoint of [`conv_forward`] in its input: maps an output-shaped tensor back
/// to input shape.
pub fn conv_input_grad(gout: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (o, k, n) = (g.out_channels, g.patch_len(), g.positions());
    // wᵀ[k×o] · gout[o×n]
    let cols = gemm(k, o, n, w, 1, k as isize, gout, n as isize, 1);
    col2im(&cols, g)
}

/// Adjoint of [`conv_forward`] in its weights.
pub fn conv_weight_grad(x: &[f64], gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let (o, k, n) = (g.out_channels, g.patch_len(), g.positions());
    // gout[o×n] · colsᵀ[n×k]
    gemm(o, n, k, gout, n as isize, 1, &cols, 1, n as isize)
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(m, k, n, a, k as isize, 1, b, n as isize, 1)
}

/// Flat indices of the first maximum (row-major) in each 2×2 window.
pub fn max_pool2_indices(x: &[f64], c: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            let top = ch * h * w + 2 * i * w;
            let (r0, r1) = (&x[top..top + 2 * ow], &x[top + w..top + w + 2 * ow]);
            for j in 0..ow {
                let v = [r0[2 * j], r0[2 * j + 1], r1[2 * j], r1[2 * j + 1]];
                let offsets = [0, 1, w, w + 1];
                let mut best = 0;
                for k in 1..4 {
                    if v[k] > v[best] {
                        best = k;
                    }
                }
                idx.push(top + 2 * j + offsets[best]);
            }
        }
    }
    idx
}

/// Flat index of the first maximum in row-major order.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

pub fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let p = ch * h * w + 2 * i * w + 2 * j;
                out[(ch * oh + i) * ow + j] = 0.25 * (x[p] + x[p + 1] + x[p + w] + x[p + w + 1]);
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2`]: spreads each pooled value over its window, divided by 4.
pub fn avg_unpool2(y: &[f64], c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (h, w) = (2 * oh, 2 * ow);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let v = 0.25 * y[(ch * oh + i) * ow + j];
                let p = ch * h * w + 2 * i * w + 2 * j;
                out[p] = v;
                out[p + 1] = v;
                out[p + w] = v;
                out[p + w + 1] = v;
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row weights for corner-aligned linear interpolation from `src` to `dst` samples,
/// as a dense `dst × src` matrix.
pub fn linear_interp_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    for i in 0..dst {
        if src == 1 {
            m[i] = 1.0;
            continue;
        }
        let pos = if dst == 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        };
        let lo = (pos.floor() as usize).min(src - 1);
        let frac = pos - lo as f64;
        if frac == 0.0 || lo + 1 >= src {
            m[i * src + lo] = 1.0;
        } else {
            m[i * src + lo] = 1.0 - frac;
            m[i * src + lo + 1] = frac;
        }
    }
    m
}
