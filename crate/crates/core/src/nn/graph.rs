//! Tape-based reverse-mode differentiation over a small set of vision ops.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Region in input-image pixels pooled from one batch element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSpec {
    pub batch: usize,
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<f32>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Upsample2x(Var),
    RoiAlign {
        x: Var,
        // For each (roi, bin): the (flat spatial index, weight) taps.
        taps: Vec<Vec<(u32, f32)>>,
        batches: Vec<usize>,
    },
    MaskMul {
        f: Var,
        m: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation. When `training` is false no tape state
/// is retained and [`Graph::backward`] yields no gradients.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    training: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient w.r.t. a parameter; `None` if nothing reached it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.grads[*n].as_ref())
    }

    /// Adds every parameter gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f32],
) {
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(w, kw, stride, pad);
    let l = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f32],
) {
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(w, kw, stride, pad);
    let l = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear taps for one sample point in a `h×w` map, following the
/// ROIAlign boundary convention (zero beyond one cell outside the map).
fn bilinear_taps(y: f32, x: f32, h: usize, w: usize, scale: f32, out: &mut Vec<(u32, f32)>) {
    if y < -1.0 || y > h as f32 || x < -1.0 || x > w as f32 {
        return;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y0 = y.floor() as usize;
    let mut x0 = x.floor() as usize;
    let y1;
    let x1;
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f32;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f32;
    } else {
        x1 = x0 + 1;
    }
    let ly = y - y0 as f32;
    let lx = x - x0 as f32;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (yy, xx, wt) in [
        (y0, x0, hy * hx),
        (y0, x1, hy * lx),
        (y1, x0, ly * hx),
        (y1, x1, ly * lx),
    ] {
        if wt != 0.0 {
            out.push(((yy * w + xx) as u32, wt * scale));
        }
    }
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.training;
        let op = if self.training { op } else { Op::Input };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant leaf; never receives gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, wc, kh, kw) = self.value(w).dims4();
        assert_eq!(c, wc, "conv channel mismatch");
        let ho = conv_out(h, kh, stride, pad);
        let wo = conv_out(wd, kw, stride, pad);
        let k = c * kh * kw;
        let l = ho * wo;
        let keep = self.training && (self.rg(w) || self.rg(x));
        let mut cols_all = if keep { vec![0.0; n * k * l] } else { Vec::new() };
        let mut scratch = if keep { Vec::new() } else { vec![0.0; k * l] };
        let mut out = vec![0.0f32; n * o * l];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for ni in 0..n {
                let cols: &mut [f32] = if keep {
                    &mut cols_all[ni * k * l..(ni + 1) * k * l]
                } else {
                    &mut scratch
                };
                im2col(
                    &xv[ni * c * h * wd..(ni + 1) * c * h * wd],
                    c,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    pad,
                    cols,
                );
                let dst = &mut out[ni * o * l..(ni + 1) * o * l];
                if let Some(bv) = bv {
                    for (oi, row) in dst.chunks_mut(l).enumerate() {
                        row.fill(bv[oi]);
                    }
                    gemm(o, k, l, wv, false, cols, false, 1.0, dst);
                } else {
                    gemm(o, k, l, wv, false, cols, false, 0.0, dst);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::from_vec(&[n, o, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols: cols_all,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::from_vec(t.shape(), data);
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::from_vec(t.shape(), data);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let src = self.value(x).data();
        let mut out = vec![0.0f32; n * c * 4 * h * w];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    d[y * 2 * w + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[n, c, 2 * h, 2 * w], out),
            Op::Upsample2x(x),
            rg,
        )
    }

    /// Bilinear ROI pooling to `out×out` bins with pixel-aligned sampling.
    /// ROI coordinates are in image pixels; `stride` maps them onto `x`.
    pub fn roi_align(&mut self, x: Var, rois: &[RoiSpec], out: usize, stride: f32) -> Var {
        let (_, c, h, w) = self.value(x).dims4();
        let scale = 1.0 / stride;
        let mut taps = Vec::with_capacity(rois.len() * out * out);
        for roi in rois {
            let x0 = roi.x_min * scale - 0.5;
            let y0 = roi.y_min * scale - 0.5;
            let rw = (roi.x_max - roi.x_min) * scale;
            let rh = (roi.y_max - roi.y_min) * scale;
            let bw = rw / out as f32;
            let bh = rh / out as f32;
            let sy = (bh.ceil() as usize).max(1);
            let sx = (bw.ceil() as usize).max(1);
            let norm = 1.0 / (sx * sy) as f32;
            for by in 0..out {
                for bx in 0..out {
                    let mut t = Vec::with_capacity(4 * sx * sy);
                    for iy in 0..sy {
                        let yy = y0 + by as f32 * bh + (iy as f32 + 0.5) * bh / sy as f32;
                        for ix in 0..sx {
                            let xx = x0 + bx as f32 * bw + (ix as f32 + 0.5) * bw / sx as f32;
                            bilinear_taps(yy, xx, h, w, norm, &mut t);
                        }
                    }
                    taps.push(t);
                }
            }
        }
        let bins = out * out;
        let mut data = vec![0.0f32; rois.len() * c * bins];
        let src = self.value(x).data();
        for (r, roi) in rois.iter().enumerate() {
            for ci in 0..c {
                let plane = &src[(roi.batch * c + ci) * h * w..(roi.batch * c + ci + 1) * h * w];
                let dst = &mut data[(r * c + ci) * bins..(r * c + ci + 1) * bins];
                for (bin, d) in dst.iter_mut().enumerate() {
                    *d = taps[r * bins + bin]
                        .iter()
                        .fold(0.0, |acc, &(i, wt)| acc + plane[i as usize] * wt);
                }
            }
        }
        let rg = self.rg(x);
        let batches = rois.iter().map(|r| r.batch).collect();
        self.push(
            Tensor::from_vec(&[rois.len(), c, out, out], data),
            Op::RoiAlign { x, taps, batches },
            rg,
        )
    }

    /// Scales every channel of `f` (`R×C×K×K`) by the per-cell mask `m`
    /// (`R×1×K×K`).
    pub fn mask_mul(&mut self, f: Var, m: Var) -> Var {
        let (r, c, kh, kw) = self.value(f).dims4();
        let (mr, mc, mh, mw) = self.value(m).dims4();
        assert_eq!((r, 1, kh, kw), (mr, mc, mh, mw), "mask shape mismatch");
        let bins = kh * kw;
        let fv = self.value(f).data();
        let mv = self.value(m).data();
        let mut out = vec![0.0f32; r * c * bins];
        for ri in 0..r {
            let mask = &mv[ri * bins..(ri + 1) * bins];
            for ci in 0..c {
                let off = (ri * c + ci) * bins;
                for b in 0..bins {
                    out[off + b] = mask[b] * fv[off + b];
                }
            }
        }
        let rg = self.rg(f) || self.rg(m);
        self.push(
            Tensor::from_vec(&[r, c, kh, kw], out),
            Op::MaskMul { f, m },
            rg,
        )
    }

    /// `x (R×D) · wᵀ (D×O) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape();
        assert_eq!(xs.len(), 2);
        let (r, d) = (xs[0], xs[1]);
        let ws = self.value(w).shape();
        assert_eq!(ws[1], d, "linear input mismatch");
        let o = ws[0];
        let mut out = vec![0.0f32; r * o];
        let bv = self.value(b).data();
        for row in out.chunks_mut(o) {
            row.copy_from_slice(bv);
        }
        gemm(
            r,
            d,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::from_vec(&[r, o], out), Op::Linear { x, w, b }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Reverse pass from the given output gradients.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed shape mismatch");
            accumulate(&mut grads, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Relu(x) => {
                if self.rg(*x) {
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &gy)| if y > 0.0 { gy } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, Tensor::from_vec(g.shape(), data));
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &gy)| gy * y * (1.0 - y))
                        .collect();
                    accumulate(grads, *x, Tensor::from_vec(g.shape(), data));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(grads, *x, g.clone().reshaped(&shape));
                }
            }
            Op::Upsample2x(x) => {
                if self.rg(*x) {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let mut dx = vec![0.0f32; n * c * h * w];
                    let gd = g.data();
                    for p in 0..n * c {
                        let s = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let d = &mut dx[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(y / 2) * w + xx / 2] += s[y * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
                }
            }
            Op::MaskMul { f, m } => {
                let (r, c, kh, kw) = node.value.dims4();
                let bins = kh * kw;
                let fv = self.value(*f).data();
                let mv = self.value(*m).data();
                let gd = g.data();
                if self.rg(*f) {
                    let mut df = vec![0.0f32; r * c * bins];
                    for ri in 0..r {
                        for ci in 0..c {
                            let off = (ri * c + ci) * bins;
                            for b in 0..bins {
                                df[off + b] = mv[ri * bins + b] * gd[off + b];
                            }
                        }
                    }
                    accumulate(grads, *f, Tensor::from_vec(&[r, c, kh, kw], df));
                }
                if self.rg(*m) {
                    let mut dm = vec![0.0f32; r * bins];
                    for ri in 0..r {
                        for ci in 0..c {
                            let off = (ri * c + ci) * bins;
                            for b in 0..bins {
                                dm[ri * bins + b] += fv[off + b] * gd[off + b];
                            }
                        }
                    }
                    accumulate(grads, *m, Tensor::from_vec(&[r, 1, kh, kw], dm));
                }
            }
            Op::RoiAlign { x, taps, batches } => {
                if self.rg(*x) {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let (r, _, kh, kw) = node.value.dims4();
                    let bins = kh * kw;
                    let mut dx = vec![0.0f32; n * c * h * w];
                    let gd = g.data();
                    for ri in 0..r {
                        let bi = batches[ri];
                        for ci in 0..c {
                            let plane = &mut dx[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                            let src = &gd[(ri * c + ci) * bins..(ri * c + ci + 1) * bins];
                            for (bin, &gv) in src.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                for &(idx, wt) in &taps[ri * bins + bin] {
                                    plane[idx as usize] += wt * gv;
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (r, d) = (xs[0], xs[1]);
                let o = self.value(*w).shape()[0];
                let gd = g.data();
                if self.rg(*b) {
                    let mut db = vec![0.0f32; o];
                    for row in gd.chunks(o) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::from_vec(&[o], db));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0f32; o * d];
                    gemm(o, r, d, gd, true, self.value(*x).data(), false, 0.0, &mut dw);
                    accumulate(grads, *w, Tensor::from_vec(&[o, d], dw));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0f32; r * d];
                    gemm(r, o, d, gd, false, self.value(*w).data(), false, 0.0, &mut dx);
                    accumulate(grads, *x, Tensor::from_vec(&[r, d], dx));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let (n, c, h, wd) = self.value(*x).dims4();
                let (o, _, kh, kw) = self.value(*w).dims4();
                let (_, _, ho, wo) = node.value.dims4();
                let k = c * kh * kw;
                let l = ho * wo;
                let gd = g.data();
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0f32; o];
                        for ni in 0..n {
                            for (oi, acc) in db.iter_mut().enumerate() {
                                let off = (ni * o + oi) * l;
                                *acc += gd[off..off + l].iter().sum::<f32>();
                            }
                        }
                        accumulate(grads, *b, Tensor::from_vec(&[o], db));
                    }
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0f32; o * k];
                    for ni in 0..n {
                        gemm(
                            o,
                            l,
                            k,
                            &gd[ni * o * l..(ni + 1) * o * l],
                            false,
                            &cols[ni * k * l..(ni + 1) * k * l],
                            true,
                            1.0,
                            &mut dw,
                        );
                    }
                    accumulate(grads, *w, Tensor::from_vec(&[o, c, kh, kw], dw));
                }
                if self.rg(*x) {
                    let wv = self.value(*w).data();
                    let mut dx = vec![0.0f32; n * c * h * wd];
                    let mut dcols = vec![0.0f32; k * l];
                    for ni in 0..n {
                        gemm(
                            k,
                            o,
                            l,
                            wv,
                            true,
                            &gd[ni * o * l..(ni + 1) * o * l],
                            false,
                            0.0,
                            &mut dcols,
                        );
                        col2im(
                            &dcols,
                            c,
                            h,
                            wd,
                            kh,
                            kw,
                            *stride,
                            *pad,
                            &mut dx[ni * c * h * wd..(ni + 1) * c * h * wd],
                        );
                    }
                    accumulate(grads, *x, Tensor::from_vec(&[n, c, h, wd], dx));
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks d(Σ probe ⊙ out)/d(param) against central differences.
    fn check_param_grads(
        store: &ParamStore,
        build: &dyn Fn(&mut Graph, &ParamStore) -> Var,
        tol: f32,
    ) {
        let mut g = Graph::new(true);
        let out = build(&mut g, store);
        let shape = g.value(out).shape().to_vec();
        let probe: Vec<f32> = (0..g.value(out).len())
            .map(|i| ((i * 7919) % 13) as f32 / 13.0 - 0.4)
            .collect();
        let grads = g.backward(vec![(out, Tensor::from_vec(&shape, probe.clone()))]);
        let objective = |s: &ParamStore| -> f64 {
            let mut g = Graph::new(false);
            let out = build(&mut g, s);
            g.value(out)
                .data()
                .iter()
                .zip(&probe)
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        for (pi, p) in store.iter().enumerate() {
            let id = ParamId(pi);
            let analytic = grads.param(id).cloned().unwrap_or(Tensor::zeros(p.value.shape()));
            for j in (0..p.value.len()).step_by((p.value.len() / 7).max(1)) {
                let eps = 1e-2f32;
                let mut plus = store.clone();
                plus.get_mut(id).value.data_mut()[j] += eps;
                let mut minus = store.clone();
                minus.get_mut(id).value.data_mut()[j] -= eps;
                let fd = ((objective(&plus) - objective(&minus)) / (2.0 * eps as f64)) as f32;
                let a = analytic.data()[j];
                let err = (a - fd).abs() / (1.0f32).max(a.abs()).max(fd.abs());
                assert!(err < tol, "{} [{j}]: analytic {a} vs fd {fd}", p.name);
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn conv_relu_upsample_gradients() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let x = s.add_normal("x", &[2, 3, 6, 6], 1.0, &mut r);
        let w1 = s.add_normal("w1", &[4, 3, 3, 3], 0.5, &mut r);
        let b1 = s.add_normal("b1", &[4], 0.1, &mut r);
        let w2 = s.add_normal("w2", &[2, 4, 3, 3], 0.5, &mut r);
        let build = move |g: &mut Graph, s: &ParamStore| {
            let xv = g.param(s, x);
            let a = g.param(s, w1);
            let b = g.param(s, b1);
            let h = g.conv2d(xv, a, Some(b), 2, 1);
            let h = g.relu(h);
            let w = g.param(s, w2);
            let y = g.conv2d(h, w, None, 1, 1);
            let u = g.upsample2x(y);
            g.sigmoid(u)
        };
        check_param_grads(&s, &build, 2e-2);
    }

    #[test]
    fn roi_align_mask_linear_gradients() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let fm = s.add_normal("features", &[1, 2, 5, 5], 1.0, &mut r);
        let mm = s.add_normal("mask_logits", &[1, 1, 5, 5], 1.0, &mut r);
        let w = s.add_normal("w", &[3, 2 * 4 * 4], 0.3, &mut r);
        let b = s.add_normal("b", &[3], 0.1, &mut r);
        let rois = vec![
            RoiSpec { batch: 0, x_min: 3.0, y_min: 2.0, x_max: 25.0, y_max: 30.0 },
            RoiSpec { batch: 0, x_min: -10.0, y_min: -6.0, x_max: 12.0, y_max: 16.0 },
        ];
        let build = move |g: &mut Graph, s: &ParamStore| {
            let f = g.param(s, fm);
            let ml = g.param(s, mm);
            let m = g.sigmoid(ml);
            let pf = g.roi_align(f, &rois, 4, 8.0);
            let pm = g.roi_align(m, &rois, 4, 8.0);
            let fh = g.mask_mul(pf, pm);
            let flat = g.reshape(fh, &[2, 32]);
            let wv = g.param(s, w);
            let bv = g.param(s, b);
            g.linear(flat, wv, bv)
        };
        check_param_grads(&s, &build, 2e-2);
    }

    #[test]
    fn roi_align_of_constant_map_is_constant_inside() {
        let mut g = Graph::new(false);
        let x = g.input(Tensor::full(&[1, 1, 8, 8], 2.5));
        let rois = [RoiSpec { batch: 0, x_min: 8.0, y_min: 8.0, x_max: 40.0, y_max: 40.0 }];
        let y = g.roi_align(x, &rois, 4, 8.0);
        assert!(g.value(y).data().iter().all(|v| (v - 2.5).abs() < 1e-6));
        let far = [RoiSpec { batch: 0, x_min: 500.0, y_min: 500.0, x_max: 570.0, y_max: 570.0 }];
        let z = g.roi_align(x, &far, 4, 8.0);
        assert!(g.value(z).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn detached_branch_receives_no_gradient() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let w = s.add_normal("w", &[1, 1, 1, 1], 1.0, &mut r);
        let mut g = Graph::new(true);
        let x = g.input(Tensor::full(&[1, 1, 2, 2], 1.0));
        let wv = g.param(&s, w);
        let y = g.conv2d(x, wv, None, 1, 0);
        let yd = g.detach(y);
        let z = g.relu(yd);
        let grads = g.backward(vec![(z, Tensor::full(&[1, 1, 2, 2], 1.0))]);
        assert!(grads.param(w).is_none());
    }
}
