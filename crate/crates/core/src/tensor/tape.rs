//! Operation tape for reverse-mode differentiation.
//!
//! Every op appends one node holding the output value, its parent node ids,
//! and a closure that maps the upstream gradient to per-parent contributions.
//! Nodes are appended in execution order, so the vector itself is a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::{Result, RunningStats, Tensor, TensorError};

/// Forward-pass mode: training enables dropout and batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Backward closure: upstream gradient + per-parent "wanted" mask to
/// per-parent gradient contributions (None where not wanted).
type BackFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    needs_grad: bool,
    backward: Option<BackFn>,
}

/// Gradients produced by [`Tape::backward`], addressed by the recorded [`Var`]s.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn guard(&self) -> Result<()> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackFn>,
        needs_grad: bool,
    ) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: Rc::new(value),
            parents,
            needs_grad,
            backward,
        });
        Var(id)
    }

    fn rc_value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a constant input (no gradient is ever propagated into it).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.guard()?;
        value.check_finite("constant")?;
        Ok(self.push(value, vec![], None, false))
    }

    /// Record a differentiable leaf; gradients accumulate here and are
    /// retrievable from [`Gradients::wrt`].
    pub fn leaf(&mut self, value: &Tensor) -> Result<Var> {
        self.guard()?;
        value.check_finite("leaf")?;
        Ok(self.push(value.clone(), vec![], None, true))
    }

    /// Strict rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard()?;
        let (ta, tb) = (self.rc_value(a), self.rc_value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_nn(ta.data(), tb.data(), m, k, n, out.data_mut());
        out.check_finite("matmul")?;
        let (ca, cb) = (Rc::clone(&ta), Rc::clone(&tb));
        let needs = self.needs(a) || self.needs(b);
        let back: BackFn = Box::new(move |g, wanted| {
            let mut grads = vec![None, None];
            if wanted[0] {
                let mut da = Tensor::zeros(vec![m, k]);
                matmul_nt(g.data(), cb.data(), m, n, k, da.data_mut());
                grads[0] = Some(da);
            }
            if wanted[1] {
                let mut db = Tensor::zeros(vec![k, n]);
                matmul_tn(ca.data(), g.data(), m, k, n, db.data_mut());
                grads[1] = Some(db);
            }
            grads
        });
        Ok(self.push(out, vec![a.0, b.0], Some(back), needs))
    }

    /// Batched matrix product over matching leading axes:
    /// `[.., m, k] @ [.., k, n] -> [.., m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard()?;
        let (ta, tb) = (self.rc_value(a), self.rc_value(b));
        let ra = ta.rank();
        let rb = tb.rank();
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        };
        if ra < 2 || ra != rb || ta.shape()[..ra - 2] != tb.shape()[..rb - 2] {
            return Err(mismatch());
        }
        let (m, k) = (ta.shape()[ra - 2], ta.shape()[ra - 1]);
        let (kb, n) = (tb.shape()[rb - 2], tb.shape()[rb - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let batch: usize = ta.shape()[..ra - 2].iter().product();
        let mut out_shape = ta.shape()[..ra - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = Tensor::zeros(out_shape);
        batched_nn(ta.data(), tb.data(), batch, m, k, n, out.data_mut());
        out.check_finite("bmm")?;
        let (ca, cb) = (Rc::clone(&ta), Rc::clone(&tb));
        let needs = self.needs(a) || self.needs(b);
        let back: BackFn = Box::new(move |g, wanted| {
            let mut grads = vec![None, None];
            if wanted[0] {
                let mut da = Tensor::zeros(ca.shape().to_vec());
                da.data_mut()
                    .par_chunks_mut(m * k)
                    .zip(g.data().par_chunks(m * n))
                    .zip(cb.data().par_chunks(k * n))
                    .for_each(|((da_b, g_b), b_b)| matmul_nt(g_b, b_b, m, n, k, da_b));
                grads[0] = Some(da);
            }
            if wanted[1] {
                let mut db = Tensor::zeros(cb.shape().to_vec());
                db.data_mut()
                    .par_chunks_mut(k * n)
                    .zip(ca.data().par_chunks(m * k))
                    .zip(g.data().par_chunks(m * n))
                    .for_each(|((db_b, a_b), g_b)| matmul_tn(a_b, g_b, m, k, n, db_b));
                grads[1] = Some(db);
            }
            grads
        });
        Ok(self.push(out, vec![a.0, b.0], Some(back), needs))
    }

    /// Matrix product with the rank-2 left operand broadcast over the right
    /// operand's leading axes: `[m, k] @ [.., k, n] -> [.., m, n]`.
    pub fn matmul_bcast_left(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard()?;
        let (ta, tb) = (self.rc_value(a), self.rc_value(b));
        let rb = tb.rank();
        if ta.rank() != 2 || rb < 2 || ta.shape()[1] != tb.shape()[rb - 2] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_bcast_left",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let n = tb.shape()[rb - 1];
         
        let mut out_shape = tb.shape()[..rb - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = Tensor::zeros(out_shape);
        let a_data = ta.data();
        out.data_mut()
            .par_chunks_mut(m * n)
            .zip(tb.data().par_chunks(k * n))
            .for_each(|(o, b_b)| matmul_nn(a_data, b_b, m, k, n, o));
        out.check_finite("matmul_bcast_left")?;
        let (ca, cb) = (Rc::clone(&ta), Rc::clone(&tb));
        let needs = self.needs(a) || self.needs(b);
        let back: BackFn = Box::new(move |g, wanted| {
            let mut grads = vec![None, None];
            if wanted[0] {
                // dA = sum over batch of g_b @ b_b^T; accumulated serially in
                // batch order so the reduction order is fixed.
                let mut da = Tensor::zeros(vec![m, k]);
                for (g_b, b_b) in g.data().chunks(m * n).zip(cb.data().chunks(k * n)) {
                    matmul_nt(g_b, b_b, m, n, k, da.data_mut());
                }
                grads[0] = Some(da);
            }
            if wanted[1] {
                let mut db = Tensor::zeros(cb.shape().to_vec());
                let a_data = ca.data();
                db.data_mut()
                    .par_chunks_mut(k * n)
                    .zip(g.data().par_chunks(m * n))
                    .for_each(|(db_b, g_b)| matmul_tn(a_data, g_b, m, k, n, db_b));
                grads[1] = Some(db);
            }
            grads
        });
        Ok(self.push(out, vec![a.0, b.0], Some(back), needs))
    }

    /// Linear map on the trailing axis, no bias: `[.., d_in] @ [d_in, d_out]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.affine_impl(x, w, None)
    }

    /// Affine map on the trailing axis: `x @ w + b` with `b` broadcast over
    /// all leading axes.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.affine_impl(x, w, Some(b))
    }

    fn affine_impl(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.guard()?;
        let (tx, tw) = (self.rc_value(x), self.rc_value(w));
        if tw.rank() != 2 || tx.rank() < 1 || tx.last_dim() != tw.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let (d_in, d_out) = (tw.shape()[0], tw.shape()[1]);
        let rows = tx.leading_len();
        if let Some(bv) = b {
            let tb = self.rc_value(bv);
            if tb.shape() != [d_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "affine",
                    left: tb.shape().to_vec(),
                    right: vec![d_out],
                });
            }
        }
        let mut out_shape = tx.shape().to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        let mut out = Tensor::zeros(out_shape);
        matmul_nn(tx.data(), tw.data(), rows, d_in, d_out, out.data_mut());
        if let Some(bv) = b {
            let tb = self.rc_value(bv);
            for row in out.data_mut().chunks_mut(d_out) {
                for (o, &bval) in row.iter_mut().zip(tb.data()) {
                    *o += bval;
                }
            }
        }
        out.check_finite("affine")?;
        let (cx, cw) = (Rc::clone(&tx), Rc::clone(&tw));
        let mut parents = vec![x.0, w.0];
        let mut needs = self.needs(x) || self.needs(w);
        if let Some(bv) = b {
            parents.push(bv.0);
            needs = needs || self.needs(bv);
        }
        let has_bias = b.is_some();
        let back: BackFn = Box::new(move |g, wanted| {
            let mut grads = vec![None, None, None];
            if wanted[0] {
                let mut dx = Tensor::zeros(cx.shape().to_vec());
                matmul_nt(g.data(), cw.data(), rows, d_out, d_in, dx.data_mut());
                grads[0] = Some(dx);
            }
            if wanted[1] {
                let mut dw = Tensor::zeros(vec![d_in, d_out]);
                matmul_tn(cx.data(), g.data(), rows, d_in, d_out, dw.data_mut());
                grads[1] = Some(dw);
            }
            if has_bias && wanted[2] {
                let mut db = Tensor::zeros(vec![d_out]);
                for row in g.data().chunks(d_out) {
                    for (o, &gv) in db.data_mut().iter_mut().zip(row) {
                        *o += gv;
                    }
                }
                grads[2] = Some(db);
            }
            grads.truncate(if has_bias { 3 } else { 2 });
            grads
        });
        Ok(self.push(out, parents, Some(back), needs))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard()?;
        let (ta, tb) = (self.rc_value(a), self.rc_value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = ta.as_ref().clone();
        for (o, &v) in out.data_mut().iter_mut().zip(tb.data()) {
            *o += v;
        }
        out.check_finite("add")?;
        let needs = self.needs(a) || self.needs(b);
        let back: BackFn = Box::new(move |g, wanted| {
            vec![
                wanted[0].then(|| g.clone()),
                wanted[1].then(|| g.clone()),
            ]
        });
        Ok(self.push(out, vec![a.0, b.0], Some(back), needs))
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard()?;
        let (ta, tb) = (self.rc_value(a), self.rc_value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "hadamard",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = ta.as_ref().clone();
        for (o, &v) in out.data_mut().iter_mut().zip(tb.data()) {
            *o *= v;
        }
        out.check_finite("hadamard")?;
        let (ca, cb) = (Rc::clone(&ta), Rc::clone(&tb));
        let needs = self.needs(a) || self.needs(b);
        let back: BackFn = Box::new(move |g, wanted| {
            let scale_by = |other: &Tensor| {
                let mut d = g.clone();
                for (o, &v) in d.data_mut().iter_mut().zip(other.data()) {
                    *o *= v;
                }
                d
            };
            vec![
                wanted[0].then(|| scale_by(&cb)),
                wanted[1].then(|| scale_by(&ca)),
            ]
        });
        Ok(self.push(out, vec![a.0, b.0], Some(back), needs))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.guard()?;
        let tx = self.rc_value(x);
        let mut out = tx.as_ref().clone();
        for o in out.data_mut() {
            *o *= c;
        }
        out.check_finite("scale")?;
        let needs = self.needs(x);
        let back: BackFn = Box::new(move |g, wanted| {
            vec![wanted[0].then(|| {
                let mut d = g.clone();
                for o in d.data_mut() {
                    *o *= c;
                }
                d
            })]
        });
        Ok(self.push(out, vec![x.0], Some(back), needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        let tx = self.rc_value(x);
        let mut out = tx.as_ref().clone();
        for o in out.data_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        out.check_finite("relu")?;
        let cx = Rc::clone(&tx);
        let needs = self.needs(x);
        let back: BackFn = Box::new(move |g, wanted| {
            vec![wanted[0].then(|| {
                let mut d = g.clone();
                for (o, &v) in d.data_mut().iter_mut().zip(cx.data()) {
                    if v <= 0.0 {
                        *o = 0.0;
                    }
                }
                d
            })]
        });
        Ok(self.push(out, vec![x.0], Some(back), needs))
    }

    /// Numerically stable softmax along the trailing axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        let tx = self.rc_value(x);
        let d = tx.last_dim();
        if d == 0 {
            return Err(TensorError::EmptyInput { op: "softmax" });
        }
        let mut out = tx.as_ref().clone();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out.check_finite("softmax")?;
        let y = Rc::new(out.clone());
        let needs = self.needs(x);
        let back: BackFn = Box::new(move |g, wanted| {
            vec![wanted[0].then(|| {
                // dx = y * (g - sum(g * y)) per row
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (dv, &yv) in drow.iter_mut().zip(yrow) {
                        *dv = yv * (*dv - dot);
                    }
                }
                dx
            })]
        });
        Ok(self.push(out, vec![x.0], Some(back), needs))
    }

    /// Layer normalization over the trailing axis followed by a per-channel
    /// affine transform.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.guard()?;
        let tx = self.rc_value(x);
        let (tg, tb) = (self.rc_value(gamma), self.rc_value(beta));
        let d = tx.last_dim();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let rows = tx.leading_len();
        let mut xhat = Tensor::zeros(tx.shape().to_vec());
        let mut inv_std = vec![0.0; rows];
        for (r, (xrow, hrow)) in tx
            .data()
            .chunks(d)
            .zip(xhat.data_mut().chunks_mut(d))
            .enumerate()
        {
            let mean: f64 = xrow.iter().sum::<f64>() / d as f64;
            let var: f64 = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (h, &v) in hrow.iter_mut().zip(xrow) {
                *h = (v - mean) * is;
            }
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((o, &g), &b) in row.iter_mut().zip(tg.data()).zip(tb.data()) {
                *o = *o * g + b;
            }
        }
        out.check_finite("layer_norm")?;
        let xhat = Rc::new(xhat);
        let cg = Rc::clone(&tg);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let back: BackFn = Box::new(move |g, wanted| {
            let mut grads = vec![None, None, None];
            if wanted[0] {
                let mut dx = Tensor::zeros(xhat.shape().to_vec());
                for ((grow, hrow), (dxrow, &is)) in g
                    .data()
                    .chunks(d)
                    .zip(xhat.data().chunks(d))
                    .zip(dx.data_mut().chunks_mut(d).zip(&inv_std))
                {
                    // dxhat = g * gamma
                    let mut m1 = 0.0; // mean(dxhat)
                    let mut m2 = 0.0; // mean(dxhat * xhat)
                    for ((&gv, &gam), &h) in grow.iter().zip(cg.data()).zip(hrow) {
                        let dh = gv * gam;
                        m1 += dh;
                        m2 += dh * h;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for ((dv, (&gv, &gam)), &h) in dxrow
                        .iter_mut()
                        .zip(grow.iter().zip(cg.data()))
                        .zip(hrow)
                    {
                        *dv = is * (gv * gam - m1 - h * m2);
                    }
                }
                grads[0] = Some(dx);
            }
            if wanted[1] || wanted[2] {
                let mut dgamma = Tensor::zeros(vec![d]);
                let mut dbeta = Tensor::zeros(vec![d]);
                for (grow, hrow) in g.data().chunks(d).zip(xhat.data().chunks(d)) {
                    for (j, (&gv, &h)) in grow.iter().zip(hrow).enumerate() {
                        dgamma.data_mut()[j] += gv * h;
                        dbeta.data_mut()[j] += gv;
                    }
                }
                if wanted[1] {
                    grads[1] = Some(dgamma);
                }
                if wanted[2] {
                    grads[2] = Some(dbeta);
                }
            }
            grads
        });
        Ok(self.push(out, vec![x.0, gamma.0, beta.0], Some(back), needs))
    }

    /// Batch normalization of a rank-2 `[rows, channels]` tensor over the row
    /// axis. Training mode normalizes by batch statistics (biased variance)
    /// and folds them into `running` with the given momentum; eval mode uses
    /// `running` as-is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        momentum: f64,
        eps: f64,
        mode: Mode,
    ) -> Result<Var> {
        self.guard()?;
        let tx = self.rc_value(x);
        let (tg, tb) = (self.rc_value(gamma), self.rc_value(beta));
        if tx.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "batch_norm",
                expected: 2,
                shape: tx.shape().to_vec(),
            });
        }
        let (rows, ch) = (tx.shape()[0], tx.shape()[1]);
        if rows == 0 {
            return Err(TensorError::EmptyInput { op: "batch_norm" });
        }
        if tg.shape() != [ch] || tb.shape() != [ch] || running.mean.len() != ch {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for row in tx.data().chunks(ch) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= rows as f64;
                }
                for row in tx.data().chunks(ch) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *s += d * d;
                    }
                }
                for s in &mut var {
                    *s /= rows as f64;
                }
                for ((rm, rv), (&m, &v)) in running
                    .mean
                    .iter_mut()
                    .zip(running.var.iter_mut())
                    .zip(mean.iter().zip(&var))
                {
                    *rm = (1.0 - momentum) * *rm + momentum * m;
                    *rv = (1.0 - momentum) * *rv + momentum * v;
                }
                (mean, var)
            }
            Mode::Eval => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(vec![rows, ch]);
        for (xrow, hrow) in tx.data().chunks(ch).zip(xhat.data_mut().chunks_mut(ch)) {
            for (((h, &v), &m), &is) in hrow.iter_mut().zip(xrow).zip(&mean).zip(&inv_std) {
                *h = (v - m) * is;
            }
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(ch) {
            for ((o, &g), &b) in row.iter_mut().zip(tg.data()).zip(tb.data()) {
                *o = *o * g + b;
            }
        }
        out.check_finite("batch_norm")?;
        let xhat = Rc::new(xhat);
        let cg = Rc::clone(&tg);
        let train = mode == Mode::Train;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let back: BackFn = Box::new(move |g, wanted| {
            let mut grads = vec![None, None, None];
            let mut dgamma = vec![0.0; ch];
            let mut dbeta = vec![0.0; ch];
            for (grow, hrow) in g.data().chunks(ch).zip(xhat.data().chunks(ch)) {
                for (j, (&gv, &h)) in grow.iter().zip(hrow).enumerate() {
                    dgamma[j] += gv * h;
                    dbeta[j] += gv;
                }
            }
            if wanted[0] {
                let mut dx = Tensor::zeros(vec![rows, ch]);
                if train {
                    // dx = gamma * inv_std * (g - mean(g) - xhat * mean(g*xhat))
                    for ((grow, hrow), dxrow) in g
                        .data()
                        .chunks(ch)
                        .zip(xhat.data().chunks(ch))
                        .zip(dx.data_mut().chunks_mut(ch))
                    {
                        for (j, ((dv, &gv), &h)) in
                            dxrow.iter_mut().zip(grow).zip(hrow).enumerate()
                        {
                            *dv = cg.data()[j] * inv_std[j]
                                * (gv - dbeta[j] / rows as f64 - h * dgamma[j] / rows as f64);
                        }
                    }
                } else {
                    for (grow, dxrow) in g.data().chunks(ch).zip(dx.data_mut().chunks_mut(ch)) {
                        for (j, (dv, &gv)) in dxrow.iter_mut().zip(grow).enumerate() {
                            *dv = gv * cg.data()[j] * inv_std[j];
                        }
                    }
                }
                grads[0] = Some(dx);
            }
            if wanted[1] {
                grads[1] = Some(Tensor::new(vec![ch], dgamma.clone()).unwrap());
            }
            if wanted[2] {
                grads[2] = Some(Tensor::new(vec![ch], dbeta.clone()).unwrap());
            }
            grads
        });
        Ok(self.push(out, vec![x.0, gamma.0, beta.0], Some(back), needs))
    }

    /// Inverted dropout: training zeroes with probability `p` and scales
    /// survivors by `1/(1-p)`; eval is exactly the identity.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        self.guard()?;
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidDropout { p });
        }
        let tx = self.rc_value(x);
        if mode == Mode::Eval || p == 0.0 {
            let needs = self.needs(x);
            let back: BackFn = Box::new(move |g, wanted| vec![wanted[0].then(|| g.clone())]);
            let out = tx.as_ref().clone();
            return Ok(self.push(out, vec![x.0], Some(back), needs));
        }
        let keep = 1.0 - p;
        let inv = 1.0 / keep;
        let mut mask = vec![0.0; tx.len()];
        for m in &mut mask {
            if rng.random::<f64>() >= p {
                *m = inv;
            }
        }
        let mut out = tx.as_ref().clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        out.check_finite("dropout")?;
        let needs = self.needs(x);
        let back: BackFn = Box::new(move |g, wanted| {
            vec![wanted[0].then(|| {
                let mut d = g.clone();
                for (o, &m) in d.data_mut().iter_mut().zip(&mask) {
                    *o *= m;
                }
                d
            })]
        });
        Ok(self.push(out, vec![x.0], Some(back), needs))
    }

    /// Mean negative log-softmax of the true class over a `[batch, classes]`
    /// logit matrix. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.guard()?;
        let tl = self.rc_value(logits);
        if tl.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "cross_entropy",
                expected: 2,
                shape: tl.shape().to_vec(),
            });
        }
        let (batch, classes) = (tl.shape()[0], tl.shape()[1]);
        if batch == 0 || batch != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::InvalidLabel {
                label: bad,
                classes,
            });
        }
        let mut probs = Tensor::zeros(vec![batch, classes]);
        let mut loss = 0.0;
        for ((row, prow), &label) in tl
            .data()
            .chunks(classes)
            .zip(probs.data_mut().chunks_mut(classes))
            .zip(labels)
        {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (pv, &v) in prow.iter_mut().zip(row) {
                *pv = (v - max).exp();
                sum += *pv;
            }
            for pv in prow.iter_mut() {
                *pv /= sum;
            }
            loss += -(prow[label].max(f64::MIN_POSITIVE)).ln();
        }
        loss /= batch as f64;
        let out = Tensor::scalar(loss);
        out.check_finite("cross_entropy")?;
        let probs = Rc::new(probs);
        let labels = labels.to_vec();
        let needs = self.needs(logits);
        let back: BackFn = Box::new(move |g, wanted| {
            vec![wanted[0].then(|| {
                let scale = g.data()[0] / batch as f64;
                let mut d = probs.as_ref().clone();
                for (row, &label) in d.data_mut().chunks_mut(classes).zip(&labels) {
                    row[label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                d
            })]
        });
        Ok(self.push(out, vec![logits.0], Some(back), needs))
    }

    /// Concatenate along the trailing axis; all leading axes must match.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        self.guard()?;
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_last" });
        }
        let tensors: Vec<Rc<Tensor>> = parts.iter().map(|&v| self.rc_value(v)).collect();
        let lead = tensors[0].shape()[..tensors[0].rank() - 1].to_vec();
        for t in &tensors {
            if t.rank() == 0 || t.shape()[..t.rank() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    left: tensors[0].shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let widths: Vec<usize> = tensors.iter().map(|t| t.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out_shape = lead.clone();
        out_shape.push(total);
        let mut out = Tensor::zeros(out_shape);
        for r in 0..rows {
            let orow = &mut out.data_mut()[r * total..(r + 1) * total];
            let mut off = 0;
            for (t, &w) in tensors.iter().zip(&widths) {
                orow[off..off + w].copy_from_slice(&t.data()[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let shapes: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
        let back: BackFn = Box::new(move |g, wanted| {
            let mut grads: Vec<Option<Tensor>> = wanted
                .iter()
                .zip(&shapes)
                .map(|(&w, s)| w.then(|| Tensor::zeros(s.clone())))
                .collect();
            for r in 0..rows {
                let grow = &g.data()[r * total..(r + 1) * total];
                let mut off = 0;
                for (gi, &w) in grads.iter_mut().zip(&widths) {
                    if let Some(t) = gi {
                        t.data_mut()[r * w..(r + 1) * w].copy_from_slice(&grow[off..off + w]);
                    }
                    off += w;
                }
            }
            grads
        });
        Ok(self.push(out, parts.iter().map(|v| v.0).collect(), Some(back), needs))
    }

    /// Metadata-only reshape; element count must be preserved.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.guard()?;
        let tx = self.rc_value(x);
        let out = tx.as_ref().clone().reshaped(shape)?;
        let old_shape = tx.shape().to_vec();
        let needs = self.needs(x);
        let back: BackFn = Box::new(move |g, wanted| {
            vec![wanted[0].then(|| g.clone().reshaped(old_shape.clone()).unwrap())]
        });
        Ok(self.push(out, vec![x.0], Some(back), needs))
    }

    /// Swap two axes (materializing the permutation).
    pub fn swap_axes(&mut self, x: Var, ax1: usize, ax2: usize) -> Result<Var> {
        self.guard()?;
        let tx = self.rc_value(x);
        let r = tx.rank();
        if ax1 >= r || ax2 >= r {
            return Err(TensorError::InvalidAxis {
                op: "swap_axes",
                axis: ax1.max(ax2),
                shape: tx.shape().to_vec(),
            });
        }
        let out = swap_axes_copy(&tx, ax1, ax2);
        let needs = self.needs(x);
        let back: BackFn = Box::new(move |g, wanted| {
            vec![wanted[0].then(|| swap_axes_copy(g, ax1, ax2))]
        });
        Ok(self.push(out, vec![x.0], Some(back), needs))
    }

    /// Transpose the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(TensorError::RankMismatch {
                op: "transpose_last2",
                expected: 2,
                shape: self.value(x).shape().to_vec(),
            });
        }
        self.swap_axes(x, r - 2, r - 1)
    }

    /// Sum of all elements; returns a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        let tx = self.rc_value(x);
        let out = Tensor::scalar(tx.data().iter().sum());
        out.check_finite("sum_all")?;
        let shape = tx.shape().to_vec();
        let needs = self.needs(x);
        let back: BackFn = Box::new(move |g, wanted| {
            vec![wanted[0].then(|| Tensor::full(shape.clone(), g.data()[0]))]
        });
        Ok(self.push(out, vec![x.0], Some(back), needs))
    }

    /// Reverse sweep accumulating gradients of a scalar loss. Consumes the
    /// tape: a second call (or further ops) must start a fresh forward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.guard()?;
        let loss_val = self.value(loss);
        if loss_val.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_val.shape().to_vec(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(backward) = self.nodes[id].backward.as_ref() else {
                continue; // leaf: keep the accumulated gradient
            };
            let Some(g) = grads[id].take() else {
                continue; // no gradient flowed through this node
            };
            let parents = self.nodes[id].parents.clone();
            let wanted: Vec<bool> = parents
                .iter()
                .map(|&p| self.nodes[p].needs_grad)
                .collect();
            let contributions = backward(&g, &wanted);
            for (&pid, contrib) in parents.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += v;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn swap_axes_copy(t: &Tensor, ax1: usize, ax2: usize) -> Tensor {
    if ax1 == ax2 {
        return t.clone();
    }
    let (a, b) = (ax1.min(ax2), ax1.max(ax2));
    let shape = t.shape();
    let mut new_shape = shape.to_vec();
    new_shape.swap(a, b);
    // Decompose the index space as [outer, A, mid, B, inner].
    let outer: usize = shape[..a].iter().product();
    let da = shape[a];
    let mid: usize = shape[a + 1..b].iter().product();
    let db = shape[b];
    let inner: usize = shape[b + 1..].iter().product();
    let mut out = Tensor::zeros(new_shape);
    let src = t.data();
    let dst = out.data_mut();
    let mut pos = 0;
    for o in 0..outer {
        let obase = o * da * mid * db * inner;
        for ib in 0..db {
            for m in 0..mid {
                for ia in 0..da {
                    let sbase = obase + ((ia * mid + m) * db + ib) * inner;
                    dst[pos..pos + inner].copy_from_slice(&src[sbase..sbase + inner]);
                    pos += inner;
                }
            }
        }
    }
    out
}

fn batched_nn(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.par_chunks_mut(m * n)
        .zip(a.par_chunks(m * k).zip(b.par_chunks(k * n)))
        .with_min_len(1.max(batch / (4 * rayon::current_num_threads().max(1))))
        .for_each(|(o, (a_b, b_b))| matmul_nn(a_b, b_b, m, k, n, o));
}
