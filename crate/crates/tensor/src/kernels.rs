//! Plain-slice numeric kernels behind the tape ops.

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[m, n] = a[m, k] . b[k, n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `ga[m, k] += g[m, n] . b[k, n]^T`
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `gb[k, n] += a[m, k]^T . g[m, n]`
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dst = &mut gb[p * n..(p + 1) * n];
            for (d, &gv) in dst.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}

/// In-place softmax over the middle extent of an `[outer, n, inner]` layout.
pub(crate) fn softmax(data: &mut [f64], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for s in 0..inner {
            let base = o * n * inner + s;
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                max = max.max(data[base + j * inner]);
            }
            let mut total = 0.0;
            for j in 0..n {
                let e = (data[base + j * inner] - max).exp();
                data[base + j * inner] = e;
                total += e;
            }
            for j in 0..n {
                data[base + j * inner] /= total;
            }
        }
    }
}

pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// `None` when the output extent is not integral or empty.
    pub fn new(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let span_h = (h + 2 * pad).checked_sub(k)?;
        let span_w = (w + 2 * pad).checked_sub(k)?;
        if stride == 0 || span_h % stride != 0 || span_w % stride != 0 {
            return None;
        }
        Some(Self {
            h,
            w,
            k,
            stride,
            pad,
            oh: span_h / stride + 1,
            ow: span_w / stride + 1,
        })
    }

    /// Output positions `o` in `0..n_out` whose input `o * stride + tap - pad`
    /// falls inside `0..n_in`.
    fn valid(&self, n_out: usize, n_in: usize, tap: usize) -> std::ops::Range<usize> {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = (n_in as isize - 1 - off).div_euclid(s) + 1;
        let hi = hi.clamp(0, n_out as isize);
        (lo.min(hi) as usize)..(hi as usize)
    }
}

pub(crate) fn conv2d(x: &[f64], w: &[f64], out: &mut [f64], cin: usize, cout: usize, g: &ConvGeom) {
    let k = g.k;
    for co in 0..cout {
        for ci in 0..cin {
            let xs = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..k {
                let rows = g.valid(g.oh, g.h, ky);
                for kx in 0..k {
                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let cols = g.valid(g.ow, g.w, kx);
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut out[(co * g.oh + oy) * g.ow..(co * g.oh + oy + 1) * g.ow];
                        for ox in cols.clone() {
                            orow[ox] += wv * xs[iy * g.w + ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_grad_input(gout: &[f64], w: &[f64], gx: &mut [f64], cin: usize, cout: usize, g: &ConvGeom) {
    let k = g.k;
    for co in 0..cout {
        for ci in 0..cin {
            let gxs = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..k {
                let rows = g.valid(g.oh, g.h, ky);
                for kx in 0..k {
                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                    let cols = g.valid(g.ow, g.w, kx);
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gout[(co * g.oh + oy) * g.ow..(co * g.oh + oy + 1) * g.ow];
                        for ox in cols.clone() {
                            gxs[iy * g.w + ox * g.stride + kx - g.pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_grad_weight(gout: &[f64], x: &[f64], gw: &mut [f64], cin: usize, cout: usize, g: &ConvGeom) {
    let k = g.k;
    for co in 0..cout {
        for ci in 0..cin {
            let xs = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..k {
                let rows = g.valid(g.oh, g.h, ky);
                for kx in 0..k {
                    let cols = g.valid(g.ow, g.w, kx);
                    let mut acc = 0.0;
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gout[(co * g.oh + oy) * g.ow..(co * g.oh + oy + 1) * g.ow];
                        for ox in cols.clone() {
                            acc += grow[ox] * xs[iy * g.w + ox * g.stride + kx - g.pad];
                        }
                    }
                    gw[((co * cin + ci) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

pub(crate) fn depthwise(x: &[f64], w: &[f64], out: &mut [f64], c: usize, h: usize, wd: usize, k: usize) {
    let g = ConvGeom::new(h, wd, k, 1, (k - 1) / 2).expect("odd kernel keeps extent");
    for ch in 0..c {
        let xs = &x[ch * h * wd..(ch + 1) * h * wd];
        let os = &mut out[ch * h * wd..(ch + 1) * h * wd];
        for ky in 0..k {
            let rows = g.valid(h, h, ky);
            for kx in 0..k {
                let wv = w[(ch * k + ky) * k + kx];
                let cols = g.valid(wd, wd, kx);
                for oy in rows.clone() {
                    let iy = oy + ky - g.pad;
                    for ox in cols.clone() {
                        os[oy * wd + ox] += wv * xs[iy * wd + ox + kx - g.pad];
                    }
                }
            }
        }
    }
}

pub(crate) fn depthwise_grad_input(gout: &[f64], w: &[f64], gx: &mut [f64], c: usize, h: usize, wd: usize, k: usize) {
    let g = ConvGeom::new(h, wd, k, 1, (k - 1) / 2).expect("odd kernel keeps extent");
    for ch in 0..c {
        let go = &gout[ch * h * wd..(ch + 1) * h * wd];
        let gs = &mut gx[ch * h * wd..(ch + 1) * h * wd];
        for ky in 0..k {
            let rows = g.valid(h, h, ky);
            for kx in 0..k {
                let wv = w[(ch * k + ky) * k + kx];
                let cols = g.valid(wd, wd, kx);
                for oy in rows.clone() {
                    let iy = oy + ky - g.pad;
                    for ox in cols.clone() {
                        gs[iy * wd + ox + kx - g.pad] += wv * go[oy * wd + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn depthwise_grad_weight(gout: &[f64], x: &[f64], gw: &mut [f64], c: usize, h: usize, wd: usize, k: usize) {
    let g = ConvGeom::new(h, wd, k, 1, (k - 1) / 2).expect("odd kernel keeps extent");
    for ch in 0..c {
        let go = &gout[ch * h * wd..(ch + 1) * h * wd];
        let xs = &x[ch * h * wd..(ch + 1) * h * wd];
        for ky in 0..k {
            let rows = g.valid(h, h, ky);
            for kx in 0..k {
                let cols = g.valid(wd, wd, kx);
                let mut acc = 0.0;
                for oy in rows.clone() {
                    let iy = oy + ky - g.pad;
                    for ox in cols.clone() {
                        acc += go[oy * wd + ox] * xs[iy * wd + ox + kx - g.pad];
                    }
                }
                gw[(ch * k + ky) * k + kx] += acc;
            }
        }
    }
}

/// Source taps `(i0, i1, frac)` for each of the `n * factor` output samples
/// along one axis, half-pixel centres, edge-clamped.
pub(crate) fn interp_table(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = if i0 + 1 < n { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Half-open input ranges for adaptive pooling of `n` cells into `out` bins.
pub(crate) fn pool_bins(n: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| ((i * n) / out, ((i + 1) * n).div_ceil(out)))
        .collect()
}
