//! The fixed layer vocabulary and its forward / vector-Jacobian kernels.
//!
//! Spatial activations are stored channel-major `(c, h, w)`. Convolutions
//! use circular padding and stride 1. Every kernel accumulates each output
//! element in a fixed order so results are reproducible bit for bit, and
//! the region-local recomputation in [`super::network`] reuses exactly the
//! same per-element order.

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// `k×k` circular convolution, weights `(cout, cin, k, k)` then bias `(cout)`.
    Conv2d {
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
        k: usize,
    },
    AvgPool { c: usize, h: usize, w: usize, s: usize },
    /// Ties resolve to the lowest flat index inside the window.
    MaxPool { c: usize, h: usize, w: usize, s: usize },
    Subsample { c: usize, h: usize, w: usize, s: usize },
    Relu { n: usize },
    /// Weights `(nout, nin)` row-major, then optional bias `(nout)`.
    Affine { nin: usize, nout: usize, bias: bool },
    /// Trainable elementwise product `x ⊙ φ`.
    ParamScale { n: usize },
    /// Fixed elementwise product `x ⊙ m`.
    FixedScale { m: Vec<f64> },
    /// `z[t] = S^{-1/2} Σ_k x[k·M + t]`, `M = d / s`.
    Aliasing { d: usize, s: usize },
}

/// Spatial extent of an activation, `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::AvgPool { .. } => "avg-pool",
            Layer::MaxPool { .. } => "max-pool",
            Layer::Subsample { .. } => "subsample",
            Layer::Relu { .. } => "relu",
            Layer::Affine { .. } => "affine",
            Layer::ParamScale { .. } => "elementwise-multiply",
            Layer::FixedScale { .. } => "fixed-multiply",
            Layer::Aliasing { .. } => "aliasing-sum",
        }
    }

    pub fn in_len(&self) -> usize {
        match *self {
            Layer::Conv2d { cin, h, w, .. } => cin * h * w,
            Layer::AvgPool { c, h, w, .. }
            | Layer::MaxPool { c, h, w, .. }
            | Layer::Subsample { c, h, w, .. } => c * h * w,
            Layer::Relu { n } | Layer::ParamScale { n } => n,
            Layer::Affine { nin, .. } => nin,
            Layer::FixedScale { ref m } => m.len(),
            Layer::Aliasing { d, .. } => d,
        }
    }

    pub fn out_len(&self) -> usize {
        match *self {
            Layer::Conv2d { cout, h, w, .. } => cout * h * w,
            Layer::AvgPool { c, h, w, s }
            | Layer::MaxPool { c, h, w, s }
            | Layer::Subsample { c, h, w, s } => c * (h / s) * (w / s),
            Layer::Relu { n } | Layer::ParamScale { n } => n,
            Layer::Affine { nout, .. } => nout,
            Layer::FixedScale { ref m } => m.len(),
            Layer::Aliasing { d, s } => d / s,
        }
    }

    pub fn n_params(&self) -> usize {
        match *self {
            Layer::Conv2d { cin, cout, k, .. } => cout * cin * k * k + cout,
            Layer::Affine { nin, nout, bias } => nout * nin + if bias { nout } else { 0 },
            Layer::ParamScale { n } => n,
            _ => 0,
        }
    }

    /// Output grid for spatially local layers, `None` otherwise.
    pub fn out_dims(&self) -> Option<Dims> {
        match *self {
            Layer::Conv2d { cout, h, w, .. } => Some(Dims { c: cout, h, w }),
            Layer::AvgPool { c, h, w, s }
            | Layer::MaxPool { c, h, w, s }
            | Layer::Subsample { c, h, w, s } => Some(Dims {
                c,
                h: h / s,
                w: w / s,
            }),
            _ => None,
        }
    }

    pub fn forward<S: Scalar>(&self, p: &[S], x: &[S]) -> Vec<S> {
        match *self {
            Layer::Conv2d { cin, cout, h, w, k } => {
                let nw = cout * cin * k * k;
                conv_forward(&p[..nw], &p[nw..], x, cin, cout, h, w, k)
            }
            Layer::AvgPool { c, h, w, s } => {
                let inv = 1.0 / (s * s) as f64;
                pool_map(x, c, h, w, s, |win| {
                    let mut acc = S::zero();
                    for &v in win {
                        acc += v;
                    }
                    acc.scale(inv)
                })
            }
            Layer::MaxPool { c, h, w, s } => pool_map(x, c, h, w, s, |win| win[argmax(win)]),
            Layer::Subsample { c, h, w, s } => pool_map(x, c, h, w, s, |win| win[0]),
            Layer::Relu { .. } => x.iter().map(|&v| relu(v)).collect(),
            Layer::Affine { nin, nout, bias } => {
                let (wt, b) = p.split_at(nout * nin);
                (0..nout)
                    .map(|o| {
                        let init = if bias { b[o] } else { S::zero() };
                        init + dot4(&wt[o * nin..(o + 1) * nin], x)
                    })
                    .collect()
            }
            Layer::ParamScale { .. } => x.iter().zip(p).map(|(&a, &b)| a * b).collect(),
            Layer::FixedScale { ref m } => x.iter().zip(m).map(|(&a, &b)| a.scale(b)).collect(),
            Layer::Aliasing { d, s } => {
                let m = d / s;
                let inv = 1.0 / (s as f64).sqrt();
                (0..m)
                    .map(|t| {
                        let mut acc = S::zero();
                        for k in 0..s {
                            acc += x[k * m + t];
                        }
                        acc.scale(inv)
                    })
                    .collect()
            }
        }
    }

    /// Vector-Jacobian product. Accumulates parameter gradients into `gp`
    /// (when given) and returns the input gradient when `need_gx`.
    pub fn backward<S: Scalar>(
        &self,
        p: &[S],
        x: &[S],
        g: &[S],
        gp: Option<&mut [S]>,
        need_gx: bool,
    ) -> Option<Vec<S>> {
        match *self {
            Layer::Conv2d { cin, cout, h, w, k } => {
                let nw = cout * cin * k * k;
                conv_backward(&p[..nw], x, g, gp, need_gx, cin, cout, h, w, k)
            }
            Layer::AvgPool { c, h, w, s } => need_gx.then(|| {
                let inv = 1.0 / (s * s) as f64;
                pool_scatter(x, g, c, h, w, s, |_, gv, out| {
                    let v = gv.scale(inv);
                    for o in out.iter_mut() {
                        *o += v;
                    }
                })
            }),
            Layer::MaxPool { c, h, w, s } => need_gx.then(|| {
                pool_scatter(x, g, c, h, w, s, |win, gv, out| {
                    out[argmax(win)] += gv;
                })
            }),
            Layer::Subsample { c, h, w, s } => need_gx.then(|| {
                pool_scatter(x, g, c, h, w, s, |_, gv, out| {
                    out[0] += gv;
                })
            }),
            Layer::Relu { .. } => need_gx.then(|| {
                x.iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv.value() > 0.0 { gv } else { S::zero() })
                    .collect()
            }),
            Layer::Affine { nin, nout, bias } => {
                let wt = &p[..nout * nin];
                if let Some(gp) = gp {
                    let (gw, gb) = gp.split_at_mut(nout * nin);
                    for o in 0..nout {
                        let go = g[o];
                        for (gwv, &xv) in gw[o * nin..(o + 1) * nin].iter_mut().zip(x) {
                            *gwv += go * xv;
                        }
                        if bias {
                            gb[o] += go;
                        }
                    }
                }
                need_gx.then(|| {
                    let mut gx = vec![S::zero(); nin];
                    for o in 0..nout {
                        let go = g[o];
                        for (gxv, &wv) in gx.iter_mut().zip(&wt[o * nin..(o + 1) * nin]) {
                            *gxv += wv * go;
                        }
                    }
                    gx
                })
            }
            Layer::ParamScale { .. } => {
                if let Some(gp) = gp {
                    for ((gpv, &gv), &xv) in gp.iter_mut().zip(g).zip(x) {
                        *gpv += gv * xv;
                    }
                }
                need_gx.then(|| g.iter().zip(p).map(|(&gv, &pv)| gv * pv).collect())
            }
            Layer::FixedScale { ref m } => {
                need_gx.then(|| g.iter().zip(m).map(|(&gv, &mv)| gv.scale(mv)).collect())
            }
            Layer::Aliasing { d, s } => need_gx.then(|| {
                let m = d / s;
                let inv = 1.0 / (s as f64).sqrt();
                (0..d).map(|i| g[i % m].scale(inv)).collect()
            }),
        }
    }
}

#[inline(always)]
pub(crate) fn relu<S: Scalar>(v: S) -> S {
    if v.value() > 0.0 {
        v
    } else {
        S::zero()
    }
}

/// Index of the first maximal entry.
#[inline]
pub(crate) fn argmax<S: Scalar>(win: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in win.iter().enumerate().skip(1) {
        if v.value() > win[best].value() {
            best = i;
        }
    }
    best
}

/// Dot product with four interleaved accumulators (fixed order).
#[inline]
pub(crate) fn dot4<S: Scalar>(a: &[S], b: &[S]) -> S {
    let n = a.len().min(b.len());
    let mut acc = [S::zero(); 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = S::zero();
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Gathers each `s×s` window (row-major) and maps it to one output value.
fn pool_map<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    s: usize,
    f: impl Fn(&[S]) -> S,
) -> Vec<S> {
    let (oh, ow) = (h / s, w / s);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut win = vec![S::zero(); s * s];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                gather_window(plane, w, oy, ox, s, &mut win);
                out.push(f(&win));
            }
        }
    }
    out
}

#[inline]
pub(crate) fn gather_window<S: Scalar>(plane: &[S], w: usize, oy: usize, ox: usize, s: usize, win: &mut [S]) {
    for dy in 0..s {
        let row = (oy * s + dy) * w + ox * s;
        win[dy * s..(dy + 1) * s].copy_from_slice(&plane[row..row + s]);
    }
}

fn pool_scatter<S: Scalar>(
    x: &[S],
    g: &[S],
    c: usize,
    h: usize,
    w: usize,
    s: usize,
    f: impl Fn(&[S], S, &mut [S]),
) -> Vec<S> {
    let (oh, ow) = (h / s, w / s);
    let mut gx = vec![S::zero(); c * h * w];
    let mut win = vec![S::zero(); s * s];
    let mut gwin = vec![S::zero(); s * s];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                gather_window(plane, w, oy, ox, s, &mut win);
                gwin.iter_mut().for_each(|v| *v = S::zero());
                f(&win, g[(ch * oh + oy) * ow + ox], &mut gwin);
                for dy in 0..s {
                    let row = ch * h * w + (oy * s + dy) * w + ox * s;
                    for dx in 0..s {
                        gx[row + dx] += gwin[dy * s + dx];
                    }
                }
            }
        }
    }
    gx
}

/// Circularly padded copy: `(c, h + 2r, w + 2r)`.
pub(crate) fn pad_circular<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, r: usize) -> Vec<S> {
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut pad = vec![S::zero(); c * ph * pw];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut pad[ch * ph * pw..(ch + 1) * ph * pw];
        for py in 0..ph {
            let sy = (py + h - r % h) % h;
            let src = &plane[sy * w..(sy + 1) * w];
            let drow = &mut dst[py * pw..(py + 1) * pw];
            for (px, d) in drow.iter_mut().enumerate() {
                *d = src[(px + w - r % w) % w];
            }
        }
    }
    pad
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<S: Scalar>(
    wt: &[S],
    bias: &[S],
    x: &[S],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<S> {
    let r = k / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let pad = pad_circular(x, cin, h, w, r);
    let mut out = vec![S::zero(); cout * h * w];
    for oc in 0..cout {
        let o = &mut out[oc * h * w..(oc + 1) * h * w];
        o.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..cin {
            let pc = &pad[ic * ph * pw..(ic + 1) * ph * pw];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wt[((oc * cin + ic) * k + ky) * k + kx];
                    for y in 0..h {
                        let prow = &pc[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                        let orow = &mut o[y * w..(y + 1) * w];
                        for (ov, &pv) in orow.iter_mut().zip(prow) {
                            *ov += wv * pv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// One output element of [`conv_forward`], same accumulation order.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn conv_point<S: Scalar>(
    wt: &[S],
    bias: S,
    x: &[S],
    cin: usize,
    oc: usize,
    h: usize,
    w: usize,
    k: usize,
    y: usize,
    xcol: usize,
) -> S {
    let r = k / 2;
    let mut acc = bias;
    for ic in 0..cin {
        let plane = &x[ic * h * w..(ic + 1) * h * w];
        for ky in 0..k {
            let sy = (y + ky + h - r) % h;
            let row = &plane[sy * w..(sy + 1) * w];
            for kx in 0..k {
                let wv = wt[((oc * cin + ic) * k + ky) * k + kx];
                acc += wv * row[(xcol + kx + w - r) % w];
            }
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<S: Scalar>(
    wt: &[S],
    x: &[S],
    g: &[S],
    gp: Option<&mut [S]>,
    need_gx: bool,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Option<Vec<S>> {
    let r = k / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let hw = h * w;
    if let Some(gp) = gp {
        let pad = pad_circular(x, cin, h, w, r);
        let nw = cout * cin * k * k;
        let (gw, gb) = gp.split_at_mut(nw);
        for oc in 0..cout {
            let go = &g[oc * hw..(oc + 1) * hw];
            let mut sb = S::zero();
            for &v in go {
                sb += v;
            }
            gb[oc] += sb;
            for ic in 0..cin {
                let pc = &pad[ic * ph * pw..(ic + 1) * ph * pw];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = S::zero();
                        for y in 0..h {
                            let prow = &pc[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                            acc += dot4(&go[y * w..(y + 1) * w], prow);
                        }
                        gw[((oc * cin + ic) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
    if !need_gx {
        return None;
    }
    let mut gpad = vec![S::zero(); cin * ph * pw];
    for oc in 0..cout {
        let go = &g[oc * hw..(oc + 1) * hw];
        for ic in 0..cin {
            let gpc = &mut gpad[ic * ph * pw..(ic + 1) * ph * pw];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wt[((oc * cin + ic) * k + ky) * k + kx];
                    for y in 0..h {
                        let prow = &mut gpc[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                        for (pv, &gv) in prow.iter_mut().zip(&go[y * w..(y + 1) * w]) {
                            *pv += wv * gv;
                        }
                    }
                }
            }
        }
    }
    let mut gx = vec![S::zero(); cin * hw];
    for ic in 0..cin {
        let gpc = &gpad[ic * ph * pw..(ic + 1) * ph * pw];
        let gxc = &mut gx[ic * hw..(ic + 1) * hw];
        for py in 0..ph {
            let sy = (py + h - r % h) % h;
            for px in 0..pw {
                let sx = (px + w - r % w) % w;
                gxc[sy * w + sx] += gpc[py * pw + px];
            }
        }
    }
    Some(gx)
}
