//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are recorded on a [`Tape`]; [`Tape::backward`] walks the record
//! in reverse and accumulates gradients per node. Backward closures capture
//! copies of the inputs they need, so the tape itself stays append-only
//! during the forward pass.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tensor, &mut GradBuf)>;

struct Node {
    value: Tensor,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Per-node gradient accumulator produced by [`Tape::backward`].
pub struct GradBuf {
    grads: Vec<Option<Tensor>>,
}

impl GradBuf {
    fn accum(&mut self, idx: usize, g: Tensor) {
        match &mut self.grads[idx] {
            Some(existing) => existing.add_assign_scaled(&g, 1.0),
            slot => *slot = Some(g),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape when `v` was unreachable
    /// from the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, value: Tensor, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, back });
        Var(nodes.len() - 1)
    }

    /// Record an input (parameter or constant). Gradients accumulate on it
    /// like on any other node.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Runs reverse accumulation from a scalar loss. Errors when called a
    /// second time on the same tape.
    pub fn backward(&self, loss: Var) -> Result<GradBuf> {
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward() needs a scalar loss");
        let mut gb = GradBuf {
            grads: vec![None; nodes.len()],
        };
        gb.accum(loss.0, Tensor::scalar(1.0));
        for i in (0..nodes.len()).rev() {
            if gb.grads[i].is_none() {
                continue;
            }
            if let Some(back) = &nodes[i].back {
                let g = gb.grads[i].take().unwrap();
                back(&g, &mut gb);
                gb.grads[i] = Some(g);
            }
        }
        Ok(gb)
    }

    // ---- elementwise and scalar ops ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = va.zip_map(&vb, |x, y| x + y);
        self.push(
            out,
            Some(Box::new(move |g, gb| {
                gb.accum(a.0, g.clone());
                gb.accum(b.0, g.clone());
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = va.zip_map(&vb, |x, y| x * y);
        self.push(
            out,
            Some(Box::new(move |g, gb| {
                gb.accum(a.0, g.zip_map(&vb, |gv, y| gv * y));
                gb.accum(b.0, g.zip_map(&va, |gv, x| gv * x));
            })),
        )
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push(
            out,
            Some(Box::new(move |g, gb| gb.accum(a.0, g.map(|x| c * x)))),
        )
    }

    /// Elementwise multiply by a constant tensor (dropout masks, pad zeroing).
    pub fn mul_const(&self, a: Var, m: Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), m.shape(), "mul_const shape mismatch");
        let out = va.zip_map(&m, |x, y| x * y);
        self.push(
            out,
            Some(Box::new(move |g, gb| {
                gb.accum(a.0, g.zip_map(&m, |gv, y| gv * y))
            })),
        )
    }

    /// Elementwise add of a constant tensor (additive attention masks; -inf
    /// entries survive into softmax).
    pub fn add_const(&self, a: Var, m: Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), m.shape(), "add_const shape mismatch");
        let out = va.zip_map(&m, |x, y| x + y);
        self.push(out, Some(Box::new(move |g, gb| gb.accum(a.0, g.clone()))))
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x.max(0.0));
        self.push(
            out,
            Some(Box::new(move |g, gb| {
                gb.accum(a.0, g.zip_map(&va, |gv, x| if x > 0.0 { gv } else { 0.0 }))
            })),
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = Tensor::scalar(va.data().iter().sum());
        self.push(
            out,
            Some(Box::new(move |g, gb| {
                gb.accum(a.0, Tensor::filled(&shape, g.item()))
            })),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn add_scalars(&self, vs: &[Var]) -> Var {
        assert!(!vs.is_empty());
        let mut acc = vs[0];
        for &v in &vs[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    // ---- matrix ops ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.matmul(&vb);
        self.push(
            out,
            Some(Box::new(move |g, gb| {
                gb.accum(a.0, g.matmul_nt(&vb));
                gb.accum(b.0, va.matmul_tn(g));
            })),
        )
    }

    /// A·Bᵀ  (A: m×k, B: n×k → m×n)
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.matmul_nt(&vb);
        self.push(
            out,
            Some(Box::new(move |g, gb| {
                gb.accum(a.0, g.matmul(&vb));
                gb.accum(b.0, g.matmul_tn(&va));
            })),
        )
    }

    /// x [L×C] + bias [C], broadcast over rows.
    pub fn add_row(&self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let (l, c) = (vx.rows(), vx.cols());
        assert_eq!(vb.shape(), [c], "bias width mismatch");
        let mut out = vx.clone();
        for j in 0..l {
            for i in 0..c {
                let v = out.at2(j, i) + vb.data()[i];
                out.set2(j, i, v);
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, gb| {
                gb.accum(x.0, g.clone());
                let mut db = Tensor::zeros(&[c]);
                for j in 0..l {
                    for i in 0..c {
                        db.data_mut()[i] += g.at2(j, i);
                    }
                }
                gb.accum(bias.0, db);
            })),
        )
    }

    /// Repeat a [1×C] row L times.
    pub fn broadcast_row(&self, row: Var, l: usize) -> Var {
        let vr = self.value(row);
        assert_eq!(vr.rows(), 1, "broadcast_row expects a single row");
        let c = vr.cols();
        let mut data = Vec::with_capacity(l * c);
        for _ in 0..l {
            data.extend_from_slice(vr.data());
        }
        let out = Tensor::from_vec(&[l, c], data);
        self.push(
            out,
            Some(Box::new(move |g, gb| {
                let mut dr = Tensor::zeros(&[1, c]);
                for j in 0..l {
                    for i in 0..c {
                        dr.data_mut()[i] += g.at2(j, i);
                    }
                }
                gb.accum(row.0, dr);
            })),
        )
    }

    pub fn slice_cols(&self, x: Var, start: usize, width: usize) -> Var {
        let vx = self.value(x);
        let (l, c) = (vx.rows(), vx.cols());
        assert!(start + width <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(l * width);
        for j in 0..l {
            data.extend_from_slice(&vx.row(j)[start..start + width]);
        }
        let out = Tensor::from_vec(&[l, width], data);
        self.push(
            out,
            Some(Box::new(move |g, gb| {
                let mut dx = Tensor::zeros(&[l, c]);
                for j in 0..l {
                    for i in 0..width {
                        dx.set2(j, start + i, g.at2(j, i));
                    }
                }
                gb.accum(x.0, dx);
            })),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let l = vals[0].rows();
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(l * total);
        for j in 0..l {
            for v in &vals {
                data.extend_from_slice(v.row(j));
            }
        }
        let out = Tensor::from_vec(&[l, total], data);
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, gb| {
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut dp = Tensor::zeros(&[l, w]);
                    for j in 0..l {
                        for i in 0..w {
                            dp.set2(j, i, g.at2(j, off + i));
                        }
                    }
                    gb.accum(p.0, dp);
                    off += w;
                }
            })),
        )
    }

    /// Row gather from an embedding table; gradients scatter-add back.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let (v, d) = (vt.rows(), vt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "token id {id} out of vocabulary range {v}");
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::from_vec(&[ids.len(), d], data);
        let ids = ids.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, gb| {
                let mut dt = Tensor::zeros(&[v, d]);
                for (j, &id) in ids.iter().enumerate() {
                    for i in 0..d {
                        dt.data_mut()[id * d + i] += g.at2(j, i);
                    }
                }
                gb.accum(table.0, dt);
            })),
        )
    }

    /// Per-row gather: out[j][i] = x[j][idx[j][i]]. All rows must pick the
    /// same number of entries.
    pub fn gather_per_row(&self, x: Var, idx: &[Vec<usize>]) -> Var {
        let vx = self.value(x);
        let (l, c) = (vx.rows(), vx.cols());
        assert_eq!(idx.len(), l);
        let k = idx[0].len();
        let mut data = Vec::with_capacity(l * k);
        for (j, row) in idx.iter().enumerate() {
            assert_eq!(row.len(), k, "ragged gather");
            for &i in row {
                assert!(i < c);
                data.push(vx.at2(j, i));
            }
        }
        let out = Tensor::from_vec(&[l, k], data);
        let idx = idx.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, gb| {
                let mut dx = Tensor::zeros(&[l, c]);
                for (j, row) in idx.iter().enumerate() {
                    for (i, &col) in row.iter().enumerate() {
                        let v = dx.at2(j, col) + g.at2(j, i);
                        dx.set2(j, col, v);
                    }
                }
                gb.accum(x.0, dx);
            })),
        )
    }

    /// Row-wise convex-ish mixture: out[j] = Σ_i w[j,i]·experts[sel[j][i]][j].
    ///
    /// Selection indices are constants; gradients flow through the weights
    /// and through the selected expert rows only.
    pub fn mix_rows(&self, w: Var, sel: &[Vec<usize>], experts: &[Var]) -> Var {
        let vw = self.value(w);
        let evals: Vec<Tensor> = experts.iter().map(|&e| self.value(e)).collect();
        let (l, k) = (vw.rows(), vw.cols());
        assert_eq!(sel.len(), l);
        let c = evals[0].cols();
        let mut out = Tensor::zeros(&[l, c]);
        for j in 0..l {
            assert_eq!(sel[j].len(), k);
            for i in 0..k {
                let e = sel[j][i];
                let wt = vw.at2(j, i);
                for ch in 0..c {
                    let v = out.at2(j, ch) + wt * evals[e].at2(j, ch);
                    out.set2(j, ch, v);
                }
            }
        }
        let sel = sel.to_vec();
        let experts: Vec<Var> = experts.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, gb| {
                let mut dw = Tensor::zeros(&[l, k]);
                let mut de: Vec<Tensor> = evals.iter().map(|e| Tensor::zeros(e.shape())).collect();
                for j in 0..l {
                    for i in 0..k {
                        let e = sel[j][i];
                        let mut dot = 0.0;
                        for ch in 0..c {
                            dot += g.at2(j, ch) * evals[e].at2(j, ch);
                            let v = de[e].at2(j, ch) + vw.at2(j, i) * g.at2(j, ch);
                            de[e].set2(j, ch, v);
                        }
                        dw.set2(j, i, dot);
                    }
                }
                gb.accum(w.0, dw);
                for (ev, d) in experts.iter().zip(de) {
                    gb.accum(ev.0, d);
                }
            })),
        )
    }

    // ---- normalization / nonlinearity blocks ----

    /// Softmax along rows of a 2-D tensor. -inf entries produce exact zeros;
    /// a row of all -inf panics (no valid distribution exists).
    pub fn softmax_rows(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (l, c) = (vx.rows(), vx.cols());
        let mut out = Tensor::zeros(&[l, c]);
        for j in 0..l {
            let row = vx.row(j);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(m > f64::NEG_INFINITY, "softmax row is entirely masked");
            let mut denom = 0.0;
            for i in 0..c {
                let e = if row[i] == f64::NEG_INFINITY {
                    0.0
                } else {
                    (row[i] - m).exp()
                };
                out.set2(j, i, e);
                denom += e;
            }
            for i in 0..c {
                let v = out.at2(j, i) / denom;
                out.set2(j, i, v);
            }
        }
        let y = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, gb| {
                let mut dx = Tensor::zeros(&[l, c]);
                for j in 0..l {
                    let mut dot = 0.0;
                    for i in 0..c {
                        dot += g.at2(j, i) * y.at2(j, i);
                    }
                    for i in 0..c {
                        dx.set2(j, i, (g.at2(j, i) - dot) * y.at2(j, i));
                    }
                }
                gb.accum(x.0, dx);
            })),
        )
    }

    /// Same-length 1-D convolution with zero padding outside [0, L).
    ///
    /// x: [L×C], w: [k×C×C] indexed w[t][in][out], bias: [C]. The kernel
    /// length must be odd so the window is centered.
    pub fn conv1d_same(&self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (l, c) = (vx.rows(), vx.cols());
        let wshape = vw.shape().to_vec();
        if wshape.len() != 3 || wshape[1] != c || wshape[2] != c {
            return Err(Error::ShapeMismatch(format!(
                "conv kernel {:?} does not match {} channels",
                wshape, c
            )));
        }
        let k = wshape[0];
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "convolution kernel length must be odd, got {k}"
            )));
        }
        let half = (k - 1) / 2;
        let vb = bias.map(|b| self.value(b));
        if let Some(vb) = &vb {
            if vb.shape() != [c] {
                return Err(Error::ShapeMismatch("conv bias width mismatch".into()));
            }
        }
        let mut out = Tensor::zeros(&[l, c]);
        for j in 0..l {
            for t in 0..k {
                let src = j as isize + t as isize - half as isize;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let xr = vx.row(src as usize);
                for i in 0..c {
                    let xi = xr[i];
                    if xi == 0.0 {
                        continue;
                    }
                    let wrow = &vw.data()[(t * c + i) * c..(t * c + i + 1) * c];
                    let orow = &mut out.data_mut()[j * c..(j + 1) * c];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xi * wv;
                    }
                }
            }
            if let Some(vb) = &vb {
                for i in 0..c {
                    let v = out.at2(j, i) + vb.data()[i];
                    out.set2(j, i, v);
                }
            }
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g, gb| {
                let mut dx = Tensor::zeros(&[l, c]);
                let mut dw = Tensor::zeros(&[k, c, c]);
                for j in 0..l {
                    for t in 0..k {
                        let src = j as isize + t as isize - half as isize;
                        if src < 0 || src >= l as isize {
                            continue;
                        }
                        let s = src as usize;
                        for i in 0..c {
                            let wrow = &vw.data()[(t * c + i) * c..(t * c + i + 1) * c];
                            let mut acc = 0.0;
                            for o in 0..c {
                                acc += g.at2(j, o) * wrow[o];
                                dw.data_mut()[(t * c + i) * c + o] += vx.at2(s, i) * g.at2(j, o);
                            }
                            let v = dx.at2(s, i) + acc;
                            dx.set2(s, i, v);
                        }
                    }
                }
                gb.accum(x.0, dx);
                gb.accum(w.0, dw);
                if let Some(b) = bias {
                    let mut db = Tensor::zeros(&[c]);
                    for j in 0..l {
                        for i in 0..c {
                            db.data_mut()[i] += g.at2(j, i);
                        }
                    }
                    gb.accum(b.0, db);
                }
            })),
        ))
    }

    /// Per-row layer normalization with affine output, eps = 1e-5.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (l, c) = (vx.rows(), vx.cols());
        assert!(c > 0, "layer_norm on empty feature axis");
        assert_eq!(vg.shape(), [c]);
        assert_eq!(vb.shape(), [c]);
        let mut xhat = Tensor::zeros(&[l, c]);
        let mut inv_std = vec![0.0; l];
        let mut out = Tensor::zeros(&[l, c]);
        for j in 0..l {
            let row = vx.row(j);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[j] = istd;
            for i in 0..c {
                let xh = (row[i] - mean) * istd;
                xhat.set2(j, i, xh);
                out.set2(j, i, xh * vg.data()[i] + vb.data()[i]);
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, gb| {
                let mut dx = Tensor::zeros(&[l, c]);
                let mut dg = Tensor::zeros(&[c]);
                let mut db = Tensor::zeros(&[c]);
                for j in 0..l {
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for i in 0..c {
                        let go = g.at2(j, i);
                        let dxhat = go * vg.data()[i];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat.at2(j, i);
                        dg.data_mut()[i] += go * xhat.at2(j, i);
                        db.data_mut()[i] += go;
                    }
                    let n = c as f64;
                    for i in 0..c {
                        let dxhat = g.at2(j, i) * vg.data()[i];
                        let v = inv_std[j]
                            * (dxhat - sum_dxhat / n - xhat.at2(j, i) * sum_dxhat_xhat / n);
                        dx.set2(j, i, v);
                    }
                }
                gb.accum(x.0, dx);
                gb.accum(gamma.0, dg);
                gb.accum(beta.0, db);
            })),
        )
    }

    /// Label-smoothed cross entropy, averaged over positions whose target is
    /// not `pad_id`. Smoothing mass is spread uniformly over the whole
    /// vocabulary.
    pub fn cross_entropy_ls(
        &self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        pad_id: Option<usize>,
    ) -> Result<Var> {
        let vx = self.value(logits);
        let (l, vocab) = (vx.rows(), vx.cols());
        if targets.len() != l {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for {} logit rows",
                targets.len(),
                l
            )));
        }
        for &t in targets {
            if t >= vocab {
                return Err(Error::InvalidArgument(format!(
                    "target id {t} out of range for vocab {vocab}"
                )));
            }
        }
        let counted: Vec<usize> = (0..l)
            .filter(|&j| pad_id.map_or(true, |p| targets[j] != p))
            .collect();
        if counted.is_empty() {
            return Err(Error::InvalidArgument(
                "no non-pad target positions to score".into(),
            ));
        }
        let n = counted.len() as f64;
        let uniform = smoothing / vocab as f64;
        // log-softmax rows and loss
        let mut probs = Tensor::zeros(&[l, vocab]);
        let mut loss = 0.0;
        for &j in &counted {
            let row = vx.row(j);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - m).exp();
            }
            let log_denom = m + denom.ln();
            for i in 0..vocab {
                probs.set2(j, i, (row[i] - log_denom).exp());
                let q = uniform + if i == targets[j] { 1.0 - smoothing } else { 0.0 };
                if q > 0.0 {
                    loss -= q * (row[i] - log_denom);
                }
            }
        }
        loss /= n;
        let targets = targets.to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            Some(Box::new(move |g, gb| {
                let scale = g.item() / n;
                let mut dx = Tensor::zeros(&[l, vocab]);
                for &j in &counted {
                    for i in 0..vocab {
                        let q = uniform + if i == targets[j] { 1.0 - smoothing } else { 0.0 };
                        dx.set2(j, i, scale * (probs.at2(j, i) - q));
                    }
                }
                gb.accum(logits.0, dx);
            })),
        ))
    }

    /// Inverted dropout; a no-op when rate is 0.
    pub fn dropout<R: rand::Rng>(&self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        assert!(rate < 1.0, "dropout rate must be < 1");
        let shape = self.shape_of(x);
        let keep = 1.0 - rate;
        let n: usize = shape.iter().product();
        let mask = Tensor::from_vec(
            &shape,
            (0..n)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        );
        self.mul_const(x, mask)
    }
}

/// Compares reverse-mode gradients of a scalar-valued map against central
/// finite differences, coordinate by coordinate. Returns the max relative
/// error `|a-n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> f64
where
    F: Fn(&Tape, Var) -> Var,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv);
    assert!(tape.value(y).item().is_finite(), "non-finite function value");
    let gb = tape.backward(y).expect("fresh tape");
    let analytic = gb.get_or_zeros(xv, x.shape());

    let eval = |probe: &Tensor| -> f64 {
        let t = Tape::new();
        let v = t.leaf(probe.clone());
        t.value(f(&t, v)).item()
    };

    let mut max_err = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        max_err = max_err.max(err);
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn product_rule_on_scalars() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.leaf(Tensor::scalar(5.0));
        let z = tape.mul(x, y);
        let gb = tape.backward(z).unwrap();
        assert_eq!(gb.get(x).unwrap().item(), 5.0);
        assert_eq!(gb.get(y).unwrap().item(), 3.0);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, 9.0]));
        let s = tape.sum(x);
        let gb = tape.backward(s).unwrap();
        assert_eq!(gb.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_twice_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.scale(x, 2.0);
        tape.backward(y).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn softmax_symmetry_and_masking() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]));
        let y = tape.value(tape.softmax_rows(x));
        assert_eq!(y.data(), &[0.5, 0.5]);

        let m = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.3, f64::NEG_INFINITY]));
        let ym = tape.value(tape.softmax_rows(m));
        assert_eq!(ym.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_high_precision_values() {
        // softmax([1,2,3]) computed from the closed form with f64 exp/ln.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]));
        let y = tape.value(tape.softmax_rows(x));
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (i, &v) in y.data().iter().enumerate() {
            assert_close(v, ((i + 1) as f64).exp() / denom, 1e-12);
        }
        let total: f64 = y.data().iter().sum();
        assert_close(total, 1.0, 1e-12);
    }

    #[test]
    #[should_panic(expected = "entirely masked")]
    fn softmax_all_masked_row_panics() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(
            &[1, 2],
            vec![f64::NEG_INFINITY, f64::NEG_INFINITY],
        ));
        let _ = tape.softmax_rows(x);
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let tape = Tape::new();
        let c = 3;
        let x = tape.leaf(Tensor::from_vec(
            &[2, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        ));
        // k=1 kernel = per-channel identity
        let mut w = Tensor::zeros(&[1, c, c]);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        let wv = tape.leaf(w);
        let y = tape.conv1d_same(x, wv, None).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_single_position_uses_center_tap_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let c = 2;
        let x = tape.leaf(Tensor::rand_uniform(&[1, c], 1.0, &mut rng));
        let w = Tensor::rand_uniform(&[5, c, c], 1.0, &mut rng);
        let wv = tape.leaf(w.clone());
        let y = tape.value(tape.conv1d_same(x, wv, None).unwrap());
        // expected: x · w[center]
        let center = 2;
        let xv = tape.value(x);
        for o in 0..c {
            let mut s = 0.0;
            for i in 0..c {
                s += xv.at2(0, i) * w.data()[(center * c + i) * c + o];
            }
            assert_close(y.at2(0, o), s, 1e-12);
        }
    }

    #[test]
    fn conv_matches_padded_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (l, c, k) = (6, 2, 3);
        let tape = Tape::new();
        let xt = Tensor::rand_uniform(&[l, c], 1.0, &mut rng);
        let wt = Tensor::rand_uniform(&[k, c, c], 1.0, &mut rng);
        let bt = Tensor::rand_uniform(&[c], 1.0, &mut rng);
        let x = tape.leaf(xt.clone());
        let w = tape.leaf(wt.clone());
        let b = tape.leaf(bt.clone());
        let y = tape.value(tape.conv1d_same(x, w, Some(b)).unwrap());
        let half = (k - 1) / 2;
        for j in 0..l {
            for o in 0..c {
                let mut s = bt.data()[o];
                for t in 0..k {
                    let src = j as isize + t as isize - half as isize;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    for i in 0..c {
                        s += xt.at2(src as usize, i) * wt.data()[(t * c + i) * c + o];
                    }
                }
                assert_close(y.at2(j, o), s, 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 2]));
        let w = tape.leaf(Tensor::zeros(&[2, 2, 2]));
        assert!(tape.conv1d_same(x, w, None).is_err());
    }

    #[test]
    fn conv_preserves_length_for_odd_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for l in [1usize, 2, 5, 9] {
            for k in [1usize, 3, 5, 7, 9] {
                let tape = Tape::new();
                let x = tape.leaf(Tensor::rand_uniform(&[l, 2], 1.0, &mut rng));
                let w = tape.leaf(Tensor::rand_uniform(&[k, 2, 2], 1.0, &mut rng));
                let y = tape.conv1d_same(x, w, None).unwrap();
                assert_eq!(tape.shape_of(y), vec![l, 2]);
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 4], 7.0));
        let g = tape.leaf(Tensor::filled(&[4], 1.0));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.value(tape.layer_norm(x, g, b));
        for &v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_output_mean_is_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::new();
        let x = tape.leaf(Tensor::rand_uniform(&[3, 8], 2.0, &mut rng));
        let g = tape.leaf(Tensor::filled(&[8], 1.0));
        let beta = 0.25;
        let b = tape.leaf(Tensor::filled(&[8], beta));
        let y = tape.value(tape.layer_norm(x, g, b));
        for j in 0..3 {
            let mean: f64 = y.row(j).iter().sum::<f64>() / 8.0;
            assert_close(mean, beta, 1e-6);
        }
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (l, c) = (4, 6);
        let xt = Tensor::rand_uniform(&[l, c], 3.0, &mut rng);
        let gt = Tensor::rand_uniform(&[c], 1.0, &mut rng);
        let bt = Tensor::rand_uniform(&[c], 1.0, &mut rng);
        let tape = Tape::new();
        let x = tape.leaf(xt.clone());
        let g = tape.leaf(gt.clone());
        let b = tape.leaf(bt.clone());
        let y = tape.value(tape.layer_norm(x, g, b));
        for j in 0..l {
            let row = xt.row(j);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            for i in 0..c {
                let expect = (row[i] - mean) / (var + 1e-5).sqrt() * gt.data()[i] + bt.data()[i];
                assert_close(y.at2(j, i), expect, 1e-10);
            }
        }
    }

    #[test]
    fn cross_entropy_confident_correct_goes_to_zero() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(&[1, 3], vec![50.0, 0.0, 0.0]));
        let loss = tape.cross_entropy_ls(logits, &[0], 0.0, None).unwrap();
        assert!(tape.value(loss).item() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 7]));
        let loss = tape.cross_entropy_ls(logits, &[3, 6], 0.0, None).unwrap();
        assert_close(tape.value(loss).item(), (7f64).ln(), 1e-12);
    }

    #[test]
    fn cross_entropy_smoothed_matches_hand_expansion() {
        // 3 classes, smoothing 0.1, logits [1, 0, -1], target 0.
        let tape = Tape::new();
        let row = [1.0, 0.0, -1.0];
        let logits = tape.leaf(Tensor::from_vec(&[1, 3], row.to_vec()));
        let loss = tape.cross_entropy_ls(logits, &[0], 0.1, None).unwrap();
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        let logp: Vec<f64> = row.iter().map(|v| v - denom.ln()).collect();
        let q = [0.9 + 0.1 / 3.0, 0.1 / 3.0, 0.1 / 3.0];
        let expect: f64 = -q.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>();
        assert_close(tape.value(loss).item(), expect, 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(tape.cross_entropy_ls(logits, &[3], 0.0, None).is_err());
    }

    #[test]
    fn grad_check_sum_of_squares_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::rand_uniform(&[3, 3], 1.0, &mut rng);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v);
                t.sum(sq)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-10, "max rel err {err}");
    }

    #[test]
    fn grad_check_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::rand_uniform(&[4, 5], 1.0, &mut rng);
        let err = grad_check(
            |t, v| t.cross_entropy_ls(v, &[1, 0, 4, 2], 0.1, None).unwrap(),
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn grad_check_each_op_randomized() {
        // Randomized shapes, 20 seeds per op family.
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let l = rng.gen_range(1..5usize);
            let c = rng.gen_range(1..5usize);
            let x = Tensor::rand_uniform(&[l, c], 1.5, &mut rng);

            let b = Tensor::rand_uniform(&[c, 3], 1.0, &mut rng);
            let err = grad_check(
                |t, v| {
                    let bv = t.leaf(b.clone());
                    let y = t.matmul(v, bv);
                    let sq = t.mul(y, y);
                    t.sum(sq)
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-8, "matmul seed {seed}: {err}");

            let err = grad_check(
                |t, v| {
                    let s = t.softmax_rows(v);
                    let w = t.leaf(Tensor::rand_uniform(
                        &[l, c],
                        1.0,
                        &mut ChaCha8Rng::seed_from_u64(seed),
                    ));
                    t.sum(t.mul(s, w))
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-8, "softmax seed {seed}: {err}");

            let k = 2 * rng.gen_range(0..3usize) + 1;
            let w = Tensor::rand_uniform(&[k, c, c], 1.0, &mut rng);
            let bias = Tensor::rand_uniform(&[c], 1.0, &mut rng);
            let err = grad_check(
                |t, v| {
                    let wv = t.leaf(w.clone());
                    let bv = t.leaf(bias.clone());
                    let y = t.conv1d_same(v, wv, Some(bv)).unwrap();
                    let sq = t.mul(y, y);
                    t.sum(sq)
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-8, "conv seed {seed}: {err}");

            let gm = Tensor::rand_uniform(&[c], 1.0, &mut rng);
            let bt = Tensor::rand_uniform(&[c], 1.0, &mut rng);
            let err = grad_check(
                |t, v| {
                    let g = t.leaf(gm.clone());
                    let be = t.leaf(bt.clone());
                    let y = t.layer_norm(v, g, be);
                    let sq = t.mul(y, y);
                    t.sum(sq)
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-6, "layer_norm seed {seed}: {err}");
        }
    }

    #[test]
    fn grad_check_conv_weights_and_structured_ops() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let l = rng.gen_range(1..5usize);
            let c = rng.gen_range(2..5usize);
            let x = Tensor::rand_uniform(&[l, c], 1.0, &mut rng);

            // conv as a function of the kernel
            let k = 3;
            let w0 = Tensor::rand_uniform(&[k, c, c], 1.0, &mut rng);
            let err = grad_check(
                |t, wv| {
                    let xv = t.leaf(x.clone());
                    let y = t.conv1d_same(xv, wv, None).unwrap();
                    let sq = t.mul(y, y);
                    t.sum(sq)
                },
                &w0,
                1e-5,
            );
            assert!(err < 1e-8, "conv-weights seed {seed}: {err}");

            // slice/concat roundtrip plus embedding-style gather
            let err = grad_check(
                |t, v| {
                    let a = t.slice_cols(v, 0, 1);
                    let b = t.slice_cols(v, 1, c - 1);
                    let y = t.concat_cols(&[b, a]);
                    let sq = t.mul(y, y);
                    t.sum(sq)
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-9, "slice/concat seed {seed}: {err}");

            let ids: Vec<usize> = (0..3).map(|_| rng.gen_range(0..l)).collect();
            let err = grad_check(
                |t, v| {
                    let y = t.embedding(v, &ids);
                    let sq = t.mul(y, y);
                    t.sum(sq)
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-9, "embedding seed {seed}: {err}");

            // mix_rows with fixed random selections
            let n_exp = 3;
            let sel: Vec<Vec<usize>> = (0..l)
                .map(|_| {
                    let a = rng.gen_range(0..n_exp);
                    let mut b = rng.gen_range(0..n_exp);
                    if b == a {
                        b = (b + 1) % n_exp;
                    }
                    vec![a, b]
                })
                .collect();
            let experts: Vec<Tensor> = (0..n_exp)
                .map(|_| Tensor::rand_uniform(&[l, c], 1.0, &mut rng))
                .collect();
            let wmix = Tensor::rand_uniform(&[l, 2], 1.0, &mut rng);
            let err = grad_check(
                |t, v| {
                    let evs: Vec<Var> = experts.iter().map(|e| t.leaf(e.clone())).collect();
                    let y = t.mix_rows(v, &sel, &evs);
                    let sq = t.mul(y, y);
                    t.sum(sq)
                },
                &wmix,
                1e-5,
            );
            assert!(err < 1e-9, "mix_rows seed {seed}: {err}");
        }
    }

    #[test]
    fn gradients_are_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::rand_uniform(&[3, 4], 1.0, &mut rng);
        let run = || {
            let t = Tape::new();
            let v = t.leaf(x.clone());
            let s = t.softmax_rows(v);
            let loss = t.sum(t.mul(s, s));
            let gb = t.backward(loss).unwrap();
            gb.get(v).unwrap().clone()
        };
        assert_eq!(run(), run());
    }
}
