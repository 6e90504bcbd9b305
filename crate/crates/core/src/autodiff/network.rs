//! Layer stacks: evaluation, reverse-mode gradients, mixed second
//! derivatives, and coordinate-wise finite differences.

use super::layers::{conv_point, gather_window, relu, Dims, Layer};
use super::scalar::{Dual, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    offsets: Vec<usize>,
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>) -> Result<Self> {
        let mut expected: usize = input_shape.iter().product();
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_len() != expected {
                return Err(Error::Shape {
                    context: format!("layer {i} ({})", layer.name()),
                    expected: vec![layer.in_len()],
                    actual: vec![expected],
                });
            }
            expected = layer.out_len();
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut acc = 0;
        for layer in &layers {
            offsets.push(acc);
            acc += layer.n_params();
        }
        offsets.push(acc);
        Ok(Self {
            layers,
            input_shape,
            offsets,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(self.input_len(), Layer::out_len)
    }

    pub fn n_params(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// Parameter block `[start, end)` of layer `i` in the flat vector.
    pub fn param_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn check(&self, params: usize, x: usize) -> Result<()> {
        if x != self.input_len() {
            let name = self.layers.first().map_or("input", Layer::name);
            return Err(Error::Shape {
                context: format!("input of layer 0 ({name})"),
                expected: self.input_shape.clone(),
                actual: vec![x],
            });
        }
        if params != self.n_params() {
            let culprit = self
                .layers
                .iter()
                .enumerate()
                .find(|(i, _)| self.offsets[i + 1] > params)
                .map(|(i, l)| format!("parameters of layer {i} ({})", l.name()))
                .unwrap_or_else(|| "parameter vector".into());
            return Err(Error::Shape {
                context: culprit,
                expected: vec![self.n_params()],
                actual: vec![params],
            });
        }
        Ok(())
    }

    /// All activations; `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    pub fn forward_cached<S: Scalar>(&self, params: &[S], x: &[S]) -> Vec<Vec<S>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.forward(&params[self.param_range(i)], &acts[i]);
            acts.push(next);
        }
        acts
    }

    pub fn forward_from<S: Scalar>(&self, params: &[S], start: usize, x: &[S]) -> Vec<S> {
        let mut cur = x.to_vec();
        for i in start..self.layers.len() {
            cur = self.layers[i].forward(&params[self.param_range(i)], &cur);
        }
        cur
    }

    pub fn forward<S: Scalar>(&self, params: &[S], x: &[S]) -> Vec<S> {
        self.forward_from(params, 0, x)
    }

    /// Back-propagates `seed` (gradient w.r.t. the output) through cached
    /// activations. Parameter gradients are added into `gp`.
    pub fn backward<S: Scalar>(
        &self,
        params: &[S],
        acts: &[Vec<S>],
        seed: &[S],
        mut gp: Option<&mut [S]>,
        need_gx: bool,
    ) -> Option<Vec<S>> {
        let mut g = seed.to_vec();
        for i in (0..self.layers.len()).rev() {
            let range = self.param_range(i);
            let block = gp.as_deref_mut().map(|b| &mut b[range.clone()]);
            let want_gx = i > 0 || need_gx;
            g = self.layers[i].backward(&params[range], &acts[i], &g, block, want_gx)?;
        }
        Some(g)
    }

    /// Scalar output for single-output networks.
    pub fn output(&self, params: &[f64], x: &[f64]) -> Result<f64> {
        self.check(params.len(), x.len())?;
        self.scalar_output()?;
        Ok(self.forward(params, x)[0])
    }

    fn scalar_output(&self) -> Result<()> {
        if self.output_len() != 1 {
            return Err(Error::Shape {
                context: "network output (scalar expected)".into(),
                expected: vec![1],
                actual: vec![self.output_len()],
            });
        }
        Ok(())
    }

    pub fn grad_input(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check(params.len(), x.len())?;
        self.scalar_output()?;
        let acts = self.forward_cached(params, x);
        Ok(self
            .backward(params, &acts, &[1.0], None, true)
            .expect("input gradient requested"))
    }

    pub fn grad_params(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check(params.len(), x.len())?;
        self.scalar_output()?;
        let acts = self.forward_cached(params, x);
        let mut gp = vec![0.0; self.n_params()];
        self.backward(params, &acts, &[1.0], Some(&mut gp), false);
        Ok(gp)
    }

    /// `(∇²_{θ,x} f) v`: directional derivative of the parameter gradient
    /// along input direction `v` (forward-over-reverse, exact).
    pub fn mixed_jvp(&self, params: &[f64], x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check(params.len(), x.len())?;
        self.scalar_output()?;
        let p: Vec<Dual> = params.iter().map(|&a| Dual::cst(a)).collect();
        let xd: Vec<Dual> = x.iter().zip(v).map(|(&a, &b)| Dual::new(a, b)).collect();
        let acts = self.forward_cached(&p, &xd);
        let mut gp = vec![Dual::zero(); self.n_params()];
        self.backward(&p, &acts, &[Dual::cst(1.0)], Some(&mut gp), false);
        Ok(gp.into_iter().map(|d| d.d).collect())
    }

    /// `∇_x (v'ᵀ ∇_θ f)`: input gradient of the parameter gradient
    /// contracted with `vp` (forward-over-reverse, exact).
    pub fn mixed_vjp(&self, params: &[f64], x: &[f64], vp: &[f64]) -> Result<Vec<f64>> {
        self.check(params.len(), x.len())?;
        self.scalar_output()?;
        if vp.len() != params.len() {
            return Err(Error::Shape {
                context: "parameter-space direction".into(),
                expected: vec![params.len()],
                actual: vec![vp.len()],
            });
        }
        let p: Vec<Dual> = params.iter().zip(vp).map(|(&a, &b)| Dual::new(a, b)).collect();
        let xd: Vec<Dual> = x.iter().map(|&a| Dual::cst(a)).collect();
        let acts = self.forward_cached(&p, &xd);
        let gx = self
            .backward(&p, &acts, &[Dual::cst(1.0)], None, true)
            .expect("input gradient requested");
        Ok(gx.into_iter().map(|d| d.d).collect())
    }

    /// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
    /// coordinate. Spatially local leading layers are re-evaluated only over
    /// the receptive field of the perturbed pixel; the result is bit-identical
    /// to [`Network::fd_grad_input_naive`].
    pub fn fd_grad_input(&self, params: &[f64], x: &[f64], h: f64) -> Result<Vec<f64>> {
        self.check(params.len(), x.len())?;
        self.scalar_output()?;
        let Some(mut local) = LocalEvaluator::new(self, params, x) else {
            return self.fd_grad_input_naive(params, x, h);
        };
        let inv = 1.0 / (2.0 * h);
        Ok((0..x.len())
            .map(|i| {
                let plus = local.eval_perturbed(i, x[i] + h);
                let minus = local.eval_perturbed(i, x[i] - h);
                (plus - minus) * inv
            })
            .collect())
    }

    pub fn fd_grad_input_naive(&self, params: &[f64], x: &[f64], h: f64) -> Result<Vec<f64>> {
        self.check(params.len(), x.len())?;
        self.scalar_output()?;
        let inv = 1.0 / (2.0 * h);
        let mut xp = x.to_vec();
        Ok((0..x.len())
            .map(|i| {
                xp[i] = x[i] + h;
                let plus = self.forward(params, &xp)[0];
                xp[i] = x[i] - h;
                let minus = self.forward(params, &xp)[0];
                xp[i] = x[i];
                (plus - minus) * inv
            })
            .collect())
    }

    /// Grid of the input, `(c, h, w)`, if it is spatial.
    fn input_dims(&self) -> Option<Dims> {
        match *self.input_shape.as_slice() {
            [c, h, w] => Some(Dims { c, h, w }),
            [h, w] => Some(Dims { c: 1, h, w }),
            _ => None,
        }
    }
}

/// Circular rectangle of grid positions (all channels).
#[derive(Debug, Clone, Copy)]
struct Region {
    r0: usize,
    nr: usize,
    c0: usize,
    nc: usize,
}

impl Region {
    fn grow(self, r: usize, d: Dims) -> Region {
        let (r0, nr) = grow_axis(self.r0, self.nr, r, d.h);
        let (c0, nc) = grow_axis(self.c0, self.nc, r, d.w);
        Region { r0, nr, c0, nc }
    }

    fn pool(self, s: usize, d: Dims) -> Region {
        let (r0, nr) = pool_axis(self.r0, self.nr, s, d.h);
        let (c0, nc) = pool_axis(self.c0, self.nc, s, d.w);
        Region { r0, nr, c0, nc }
    }

    fn for_each(&self, d: Dims, mut f: impl FnMut(usize, usize)) {
        for j in 0..self.nr {
            let y = (self.r0 + j) % d.h;
            for i in 0..self.nc {
                f(y, (self.c0 + i) % d.w);
            }
        }
    }
}

fn grow_axis(start: usize, len: usize, r: usize, extent: usize) -> (usize, usize) {
    if len + 2 * r >= extent {
        (0, extent)
    } else {
        ((start + extent - r) % extent, len + 2 * r)
    }
}

fn pool_axis(start: usize, len: usize, s: usize, extent: usize) -> (usize, usize) {
    let out = extent / s;
    if len >= extent {
        return (0, out);
    }
    let first = start / s;
    let last = (start + len - 1) / s;
    ((first % out), (last - first + 1).min(out))
}

/// Scratch state for re-evaluating the network under single-coordinate
/// input perturbations.
struct LocalEvaluator<'a> {
    net: &'a Network,
    params: &'a [f64],
    base: Vec<Vec<f64>>,
    scratch: Vec<Vec<f64>>,
    /// Grid of `acts[l]` for `l <= prefix`.
    dims: Vec<Dims>,
    /// Number of leading spatially local layers.
    prefix: usize,
    regions: Vec<Region>,
}

impl<'a> LocalEvaluator<'a> {
    fn new(net: &'a Network, params: &'a [f64], x: &[f64]) -> Option<Self> {
        let mut dims = vec![net.input_dims()?];
        let mut prefix = 0;
        for layer in &net.layers {
            let cur = *dims.last().expect("non-empty");
            let next = match layer {
                Layer::Relu { n } if *n == cur.len() => cur,
                l => match l.out_dims() {
                    Some(d) => d,
                    None => break,
                },
            };
            dims.push(next);
            prefix += 1;
        }
        if prefix == 0 {
            return None;
        }
        let base = net.forward_cached(params, x);
        let scratch = base.clone();
        Some(Self {
            net,
            params,
            base,
            scratch,
            dims,
            prefix,
            regions: Vec::with_capacity(prefix),
        })
    }

    fn eval_perturbed(&mut self, index: usize, value: f64) -> f64 {
        let d0 = self.dims[0];
        let pix = index % (d0.h * d0.w);
        let mut region = Region {
            r0: pix / d0.w,
            nr: 1,
            c0: pix % d0.w,
            nc: 1,
        };
        self.scratch[0][index] = value;
        self.regions.clear();
        for l in 0..self.prefix {
            let din = self.dims[l];
            let dout = self.dims[l + 1];
            let layer = &self.net.layers[l];
            let p = &self.params[self.net.param_range(l)];
            let (inp, out) = split_pair(&mut self.scratch, l);
            region = match *layer {
                Layer::Conv2d { cin, cout, h, w, k } => {
                    let reg = region.grow(k / 2, dout);
                    let nw = cout * cin * k * k;
                    for oc in 0..cout {
                        reg.for_each(dout, |y, xc| {
                            out[(oc * h + y) * w + xc] =
                                conv_point(&p[..nw], p[nw + oc], inp, cin, oc, h, w, k, y, xc);
                        });
                    }
                    reg
                }
                Layer::Relu { .. } => {
                    for ch in 0..dout.c {
                        region.for_each(dout, |y, xc| {
                            let idx = (ch * dout.h + y) * dout.w + xc;
                            out[idx] = relu(inp[idx]);
                        });
                    }
                    region
                }
                Layer::AvgPool { s, .. } | Layer::MaxPool { s, .. } | Layer::Subsample { s, .. } => {
                    let reg = region.pool(s, din);
                    let mut win = vec![0.0; s * s];
                    let inv = 1.0 / (s * s) as f64;
                    for ch in 0..dout.c {
                        let plane = &inp[ch * din.h * din.w..(ch + 1) * din.h * din.w];
                        reg.for_each(dout, |oy, ox| {
                            gather_window(plane, din.w, oy, ox, s, &mut win);
                            let v = match layer {
                                Layer::AvgPool { .. } => {
                                    let mut acc = 0.0;
                                    for &a in &win {
                                        acc += a;
                                    }
                                    acc * inv
                                }
                                Layer::MaxPool { .. } => win[super::layers::argmax(&win)],
                                _ => win[0],
                            };
                            out[(ch * dout.h + oy) * dout.w + ox] = v;
                        });
                    }
                    reg
                }
                _ => unreachable!("prefix holds only local layers"),
            };
            self.regions.push(region);
        }
        let y = self.net.forward_from(self.params, self.prefix, &self.scratch[self.prefix])[0];
        // restore
        self.scratch[0][index] = self.base[0][index];
        for l in 0..self.prefix {
            let d = self.dims[l + 1];
            let reg = self.regions[l];
            let (src, dst) = (&self.base[l + 1], &mut self.scratch[l + 1]);
            for ch in 0..d.c {
                reg.for_each(d, |yy, xx| {
                    let idx = (ch * d.h + yy) * d.w + xx;
                    dst[idx] = src[idx];
                });
            }
        }
        y
    }
}

fn split_pair(v: &mut [Vec<f64>], l: usize) -> (&[f64], &mut [f64]) {
    let (a, b) = v.split_at_mut(l + 1);
    (&a[l], &mut b[0])
}
