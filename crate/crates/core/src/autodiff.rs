//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only arena of values. Every op evaluates eagerly,
//! stores its output, and records enough to run its backward rule later.
//! Because nodes are only ever appended, the recording order is already a
//! topological order and [`Tape::backward`] simply walks it in reverse.
//!
//! The tape is cheap to build and is thrown away after each step; inference
//! uses the same path and just never calls `backward`.

use crate::tensor::{self, IdTensor, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// x[..,K] · w[K,N]
    MatMul { x: Var, w: Var },
    /// x[..,K] · w[N,K]ᵀ
    MatMulNt { x: Var, w: Var },
    /// a[G..,M,K] · b[G..,K,N], or b[G..,N,K]ᵀ when `trans_b`.
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    Mask { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Gelu { x: Var },
    Embedding { table: Var, ids: IdTensor },
    SwapAxes12 { x: Var },
    Reshape { x: Var },
    ConcatLast { a: Var, b: Var },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        count: usize,
    },
}

/// Additive bias applied to disallowed attention scores.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = self.value(x).matmul(self.value(w))?;
        Ok(self.push(out, Op::MatMul { x, w }))
    }

    /// `x · wᵀ` for a 2-D `w` of shape `[N, K]`.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let k = xv.last_dim();
        if wv.rank() != 2 || wv.shape()[1] != k {
            return Err(self.mismatch("matmul_nt", x, w));
        }
        let n = wv.shape()[0];
        let m = xv.rows();
        let mut out = vec![0.0; m * n];
        tensor::gemm_nt(xv.data(), wv.data(), &mut out, m, k, n);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMulNt { x, w }))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, rb) = (av.rank(), bv.rank());
        if ra < 2 || ra != rb || av.shape()[..ra - 2] != bv.shape()[..rb - 2] {
            return Err(self.mismatch("batch_matmul", a, b));
        }
        let (m, k) = (av.shape()[ra - 2], av.shape()[ra - 1]);
        let (bk, n) = if trans_b {
            (bv.shape()[rb - 1], bv.shape()[rb - 2])
        } else {
            (bv.shape()[rb - 2], bv.shape()[rb - 1])
        };
        if bk != k {
            return Err(self.mismatch("batch_matmul", a, b));
        }
        let groups: usize = av.shape()[..ra - 2].iter().product();
        let mut out = vec![0.0; groups * m * n];
        for g in 0..groups {
            let ad = &av.data()[g * m * k..(g + 1) * m * k];
            let bd = &bv.data()[g * k * n..(g + 1) * k * n];
            let cd = &mut out[g * m * n..(g + 1) * m * n];
            if trans_b {
                tensor::gemm_nt(ad, bd, cd, m, k, n);
            } else {
                tensor::gemm_nn(ad, bd, cd, m, k, n);
            }
        }
        let mut shape = av.shape().to_vec();
        shape[ra - 1] = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rank() != 1 || bv.len() != xv.last_dim() {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let n = bv.len();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias { x, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x })
    }

    /// Adds [`MASK_VALUE`] to every score whose `allowed` entry is false.
    /// `allowed` is a row-major `T×T` matrix applied to each trailing `T×T`
    /// block of `x`.
    pub fn mask(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let r = xv.rank();
        let t = xv.last_dim();
        if r < 2 || xv.shape()[r - 2] != t || allowed.len() != t * t {
            return Err(TensorError::ShapeMismatch {
                op: "mask",
                lhs: xv.shape().to_vec(),
                rhs: vec![allowed.len()],
            });
        }
        let mut out = xv.clone();
        for block in out.data_mut().chunks_mut(t * t) {
            for (v, &ok) in block.iter_mut().zip(allowed) {
                if !ok {
                    *v += MASK_VALUE;
                }
            }
        }
        Ok(self.push(out, Op::Mask { x }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }))
    }

    /// Normalises over the last axis with population variance, then applies
    /// `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let e = xv.last_dim();
        for p in [gamma, beta] {
            let pv = self.value(p);
            if pv.rank() != 1 || pv.len() != e {
                return Err(self.mismatch("layer_norm", x, p));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(e) {
            let (mean, rstd) = moments(row, eps);
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[i] + b[i];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::gelu);
        self.push(out, Op::Gelu { x })
    }

    /// Gathers rows of `table[V,E]` into `[B,T,E]`.
    pub fn embedding(&mut self, table: Var, ids: &IdTensor) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                lhs: tv.shape().to_vec(),
                rhs: vec![ids.batch(), ids.seq_len()],
            });
        }
        let (v, e) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.data().len() * e);
        for &id in ids.data() {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { id, size: v });
            }
            out.extend_from_slice(&tv.data()[id * e..(id + 1) * e]);
        }
        let value = Tensor::new([ids.batch(), ids.seq_len(), e], out)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.clone() }))
    }

    /// `[A,B,C,D] -> [A,C,B,D]`.
    pub fn swap_axes_12(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(TensorError::InvalidAxis { axis: 2, rank: xv.rank() });
        }
        let out = swap12(xv);
        Ok(self.push(out, Op::SwapAxes12 { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, rb) = (av.rank(), bv.rank());
        if ra != rb || av.shape()[..ra - 1] != bv.shape()[..rb - 1] {
            return Err(self.mismatch("concat_last", a, b));
        }
        let (ea, eb) = (av.last_dim(), bv.last_dim());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks(ea).zip(bv.data().chunks(eb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = av.shape().to_vec();
        shape[ra - 1] = ea + eb;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ConcatLast { a, b }))
    }

    /// Mean negative log-likelihood of `targets` under `logits[..,V]`, skipping
    /// positions whose target equals `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        if lv.rows() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        let mut count = 0;
        for (row, &t) in lv.data().chunks(v).zip(targets) {
            if t == ignore {
                continue;
            }
            if t >= v {
                return Err(TensorError::IndexOutOfRange { id: t, size: v });
            }
            total += log_sum_exp(row) - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::DegenerateBatch(targets.len()));
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                count,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every recorded value gets a gradient
    /// of its own shape (zero when `loss` does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.values)
            .map(|(g, v)| g.unwrap_or_else(|| Tensor::zeros_like(v)))
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.values[idx];
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::MatMul { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (r, k, n) = (xv.rows(), xv.last_dim(), wv.shape()[1]);
                let mut dx = vec![0.0; r * k];
                tensor::gemm_nt(g.data(), wv.data(), &mut dx, r, n, k);
                let mut dw = vec![0.0; k * n];
                tensor::gemm_tn(xv.data(), g.data(), &mut dw, k, r, n);
                accumulate_raw(grads, *x, xv, dx)?;
                accumulate_raw(grads, *w, wv, dw)?;
            }
            Op::MatMulNt { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (r, k, n) = (xv.rows(), xv.last_dim(), wv.shape()[0]);
                let mut dx = vec![0.0; r * k];
                tensor::gemm_nn(g.data(), wv.data(), &mut dx, r, n, k);
                let mut dw = vec![0.0; n * k];
                tensor::gemm_tn(g.data(), xv.data(), &mut dw, n, r, k);
                accumulate_raw(grads, *x, xv, dx)?;
                accumulate_raw(grads, *w, wv, dw)?;
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ra = av.rank();
                let (m, k) = (av.shape()[ra - 2], av.shape()[ra - 1]);
                let n = out.shape()[ra - 1];
                let groups = av.len() / (m * k);
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for gi in 0..groups {
                    let gd = &g.data()[gi * m * n..(gi + 1) * m * n];
                    let ad = &av.data()[gi * m * k..(gi + 1) * m * k];
                    let bd = &bv.data()[gi * k * n..(gi + 1) * k * n];
                    let da_g = &mut da[gi * m * k..(gi + 1) * m * k];
                    let db_g = &mut db[gi * k * n..(gi + 1) * k * n];
                    if *trans_b {
                        // C = A·Bᵀ, B stored [n,k]
                        tensor::gemm_nn(gd, bd, da_g, m, n, k);
                        tensor::gemm_tn(gd, ad, db_g, n, m, k);
                    } else {
                        tensor::gemm_nt(gd, bd, da_g, m, n, k);
                        tensor::gemm_tn(ad, gd, db_g, k, m, n);
                    }
                }
                accumulate_raw(grads, *a, av, da)?;
                accumulate_raw(grads, *b, bv, db)?;
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g)?;
                accumulate(grads, *b, g)?;
            }
            Op::AddBias { x, bias } => {
                accumulate(grads, *x, g)?;
                let bv = self.value(*bias);
                let mut db = vec![0.0; bv.len()];
                for row in g.data().chunks(bv.len()) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate_raw(grads, *bias, bv, db)?;
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.zip_map(bv, "mul_backward", |gv, y| gv * y)?;
                let db = g.zip_map(av, "mul_backward", |gv, y| gv * y)?;
                accumulate(grads, *a, &da)?;
                accumulate(grads, *b, &db)?;
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                accumulate(grads, *x, &g.map(|v| v * f))?;
            }
            Op::Sum { x } => {
                let xv = self.value(*x);
                let gv = g.data()[0];
                accumulate_raw(grads, *x, xv, vec![gv; xv.len()])?;
            }
            Op::Mask { x } => accumulate(grads, *x, g)?,
            Op::Softmax { x, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let (y, gd) = (out.data(), g.data());
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|j| y[base + j * inner] * gd[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (gd[p] - dot);
                        }
                    }
                }
                accumulate_raw(grads, *x, self.value(*x), dx)?;
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let e = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; e];
                let mut db = vec![0.0; e];
                for ((xr, gr), dxr) in xv
                    .data()
                    .chunks(e)
                    .zip(g.data().chunks(e))
                    .zip(dx.chunks_mut(e))
                {
                    let (mean, rstd) = moments(xr, *eps);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for i in 0..e {
                        let xhat = (xr[i] - mean) * rstd;
                        let dxhat = gr[i] * gam[i];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dg[i] += gr[i] * xhat;
                        db[i] += gr[i];
                    }
                    let inv_e = 1.0 / e as f64;
                    for i in 0..e {
                        let xhat = (xr[i] - mean) * rstd;
                        let dxhat = gr[i] * gam[i];
                        dxr[i] = rstd * (dxhat - inv_e * sum_dxhat - xhat * inv_e * sum_dxhat_xhat);
                    }
                }
                accumulate_raw(grads, *x, xv, dx)?;
                accumulate_raw(grads, *gamma, self.value(*gamma), dg)?;
                accumulate_raw(grads, *beta, self.value(*beta), db)?;
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let dx = g.zip_map(xv, "gelu_backward", |gv, xi| gv * tensor::gelu_grad(xi))?;
                accumulate(grads, *x, &dx)?;
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let e = tv.shape()[1];
                let mut dt = vec![0.0; tv.len()];
                for (&id, row) in ids.data().iter().zip(g.data().chunks(e)) {
                    for (d, v) in dt[id * e..(id + 1) * e].iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate_raw(grads, *table, tv, dt)?;
            }
            Op::SwapAxes12 { x } => {
                let dx = swap12(g);
                accumulate(grads, *x, &dx)?;
            }
            Op::Reshape { x } => {
                let xv = self.value(*x);
                accumulate_raw(grads, *x, xv, g.data().to_vec())?;
            }
            Op::ConcatLast { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ea, eb) = (av.last_dim(), bv.last_dim());
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for row in g.data().chunks(ea + eb) {
                    da.extend_from_slice(&row[..ea]);
                    db.extend_from_slice(&row[ea..]);
                }
                accumulate_raw(grads, *a, av, da)?;
                accumulate_raw(grads, *b, bv, db)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                count,
            } => {
                let lv = self.value(*logits);
                let v = lv.last_dim();
                let scale = g.data()[0] / *count as f64;
                let mut dl = vec![0.0; lv.len()];
                for ((row, drow), &t) in lv.data().chunks(v).zip(dl.chunks_mut(v)).zip(targets) {
                    if t == *ignore {
                        continue;
                    }
                    let lse = log_sum_exp(row);
                    for (d, &z) in drow.iter_mut().zip(row) {
                        *d = (z - lse).exp() * scale;
                    }
                    drow[t] -= scale;
                }
                accumulate_raw(grads, *logits, lv, dl)?;
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }

    /// Moves the gradients of `vars` out, in order.
    pub fn take_all(mut self, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .map(|v| std::mem::replace(&mut self.grads[v.0], Tensor::scalar(0.0)))
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => {
            *slot = Some(g.clone());
            Ok(())
        }
    }
}

fn accumulate_raw(grads: &mut [Option<Tensor>], v: Var, like: &Tensor, data: Vec<f64>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                *e += d;
            }
            Ok(())
        }
        slot @ None => {
            *slot = Some(Tensor::new(like.shape().to_vec(), data)?);
            Ok(())
        }
    }
}

/// Mean and reciprocal standard deviation (population variance).
fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

fn swap12(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for ai in 0..a {
        for bi in 0..b {
            for ci in 0..c {
                let from = ((ai * b + bi) * c + ci) * d;
                let to = ((ai * c + ci) * b + bi) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    Tensor::new([a, c, b, d], out).expect("permutation preserves element count")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` around `x`, one element at a time.
    fn numeric_grad(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let mut probe = x.clone();
        (0..x.len())
            .map(|i| {
                let orig = probe.data()[i];
                probe.data_mut()[i] = orig + h;
                let up = f(&probe);
                probe.data_mut()[i] = orig - h;
                let down = f(&probe);
                probe.data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn seq(shape: &[usize], start: f64, step: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| start + step * i as f64).collect()).unwrap()
    }

    fn wiggle(shape: &[usize], seed: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect(),
        )
        .unwrap()
    }

    fn assert_close(tape_grad: &[f64], fd: &[f64], tol: f64) {
        assert_eq!(tape_grad.len(), fd.len());
        for (i, (a, b)) in tape_grad.iter().zip(fd).enumerate() {
            let scale = a.abs().max(b.abs()).max(1e-6);
            assert!((a - b).abs() / scale < tol, "element {i}: tape {a} vs fd {b}");
        }
    }

    /// Checks d(sum(w ⊙ f(x)))/dx against finite differences, with a fixed
    /// weighting `w` so the upstream gradient is not all ones.
    fn check_unary(x: Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let eval = |input: &Tensor| -> (f64, Tape, Var, Var) {
            let mut tape = Tape::new();
            let xv = tape.leaf(input.clone());
            let y = build(&mut tape, xv);
            let w = tape.leaf(wiggle(tape.value(y).shape(), 0.37));
            let prod = tape.mul(y, w).unwrap();
            let loss = tape.sum(prod);
            (tape.value(loss).item().unwrap(), tape, xv, loss)
        };
        let (_, tape, xv, loss) = eval(&x);
        let grads = tape.backward(loss).unwrap();
        let fd = numeric_grad(&x, 1e-6, |p| eval(p).0);
        assert_close(grads.get(xv).data(), &fd, 1e-6);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(seq(&[2, 3], -1.0, 0.5));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let xt = seq(&[4], -1.5, 1.0);
        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        let want: Vec<f64> = xt.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).data(), want.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(seq(&[2], 0.0, 1.0));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn every_value_gets_a_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(seq(&[2, 2], 0.0, 1.0));
        let unused = tape.leaf(seq(&[3], 0.0, 1.0));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(unused).shape(), &[3]);
        assert_eq!(g.get(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn matmul_gradient_against_ones_column() {
        // sum(A·B) with B = [[1],[1]] ⇒ dA = ones.
        let mut tape = Tape::new();
        let a = tape.leaf(seq(&[3, 2], 0.2, 0.3));
        let b = tape.leaf(Tensor::ones([2, 1]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        let fd = numeric_grad(tape.value(a), 1e-6, |p| p.matmul(&Tensor::ones([2, 1]).unwrap()).unwrap().sum());
        assert_close(g.get(a).data(), &fd, 1e-8);
        assert_eq!(g.get(a).data(), &[1.0; 6]);
    }

    #[test]
    fn matmul_weight_gradient_batched() {
        let w0 = wiggle(&[3, 4], 0.9);
        check_unary(wiggle(&[2, 2, 3], 0.3), |t, x| {
            let w = t.leaf(w0.clone());
            t.matmul(x, w).unwrap()
        });
        let x0 = wiggle(&[2, 2, 3], 0.3);
        check_unary(w0, |t, w| {
            let x = t.leaf(x0.clone());
            t.matmul(x, w).unwrap()
        });
    }

    #[test]
    fn matmul_nt_gradients() {
        let w0 = wiggle(&[5, 3], 0.9);
        check_unary(wiggle(&[2, 3], 0.3), |t, x| {
            let w = t.leaf(w0.clone());
            t.matmul_nt(x, w).unwrap()
        });
        let x0 = wiggle(&[2, 3], 0.3);
        check_unary(w0, |t, w| {
            let x = t.leaf(x0.clone());
            t.matmul_nt(x, w).unwrap()
        });
    }

    #[test]
    fn batch_matmul_gradients() {
        for trans_b in [false, true] {
            let b_shape = if trans_b { [2, 4, 3] } else { [2, 3, 4] };
            let b0 = wiggle(&b_shape, 0.7);
            let a0 = wiggle(&[2, 2, 3], 0.4);
            check_unary(a0.clone(), |t, a| {
                let b = t.leaf(b0.clone());
                t.batch_matmul(a, b, trans_b).unwrap()
            });
            check_unary(b0.clone(), |t, b| {
                let a = t.leaf(a0.clone());
                t.batch_matmul(a, b, trans_b).unwrap()
            });
        }
    }

    #[test]
    fn softmax_gradient_each_axis() {
        for axis in 0..3 {
            check_unary(wiggle(&[2, 3, 4], 1.3), |t, x| t.softmax(x, axis).unwrap());
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let g0 = wiggle(&[5], 0.8).map(|v| v + 1.5);
        let b0 = wiggle(&[5], 0.2);
        check_unary(wiggle(&[3, 5], 1.1), |t, x| {
            let g = t.leaf(g0.clone());
            let b = t.leaf(b0.clone());
            t.layer_norm(x, g, b, 1e-5).unwrap()
        });
        let x0 = wiggle(&[3, 5], 1.1);
        check_unary(g0.clone(), |t, g| {
            let x = t.leaf(x0.clone());
            let b = t.leaf(b0.clone());
            t.layer_norm(x, g, b, 1e-5).unwrap()
        });
        check_unary(b0, |t, b| {
            let x = t.leaf(x0.clone());
            let g = t.leaf(g0.clone());
            t.layer_norm(x, g, b, 1e-5).unwrap()
        });
    }

    #[test]
    fn layer_norm_examples() {
        let run = |x: Vec<f64>, g: Vec<f64>, b: Vec<f64>, eps: f64| {
            let mut tape = Tape::new();
            let n = x.len();
            let x = tape.leaf(Tensor::new([n], x).unwrap());
            let g = tape.leaf(Tensor::new([n], g).unwrap());
            let b = tape.leaf(Tensor::new([n], b).unwrap());
            let y = tape.layer_norm(x, g, b, eps).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(vec![5.0; 3], vec![1.0; 3], vec![0.0; 3], 1e-5), vec![0.0; 3]);
        let y = run(vec![1.0, 2.0, 3.0], vec![1.0; 3], vec![0.0; 3], 0.0);
        let want = [-1.224_744_871, 0.0, 1.224_744_871];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
        assert_eq!(run(vec![1.0, -4.0, 9.0], vec![0.0; 3], vec![7.0; 3], 1e-5), vec![7.0; 3]);
    }

    #[test]
    fn gelu_and_elementwise_gradients() {
        check_unary(wiggle(&[7], 2.1).map(|v| 3.0 * v), |t, x| t.gelu(x));
        check_unary(wiggle(&[2, 3], 0.5), |t, x| t.scale(x, -2.5));
        check_unary(wiggle(&[2, 3], 0.5), |t, x| {
            let b = t.leaf(wiggle(&[3], 0.1));
            t.add_bias(x, b).unwrap()
        });
        check_unary(wiggle(&[3], 0.5), |t, b| {
            let x = t.leaf(wiggle(&[2, 3], 0.1));
            t.add_bias(x, b).unwrap()
        });
        check_unary(wiggle(&[1, 2, 3, 2], 0.5), |t, x| t.swap_axes_12(x).unwrap());
        check_unary(wiggle(&[2, 6], 0.5), |t, x| t.reshape(x, &[3, 4]).unwrap());
        check_unary(wiggle(&[2, 2], 0.5), |t, x| {
            let other = t.leaf(wiggle(&[2, 3], 0.9));
            t.concat_last(other, x).unwrap()
        });
        check_unary(wiggle(&[1, 3, 3], 0.5), |t, x| {
            let m = t.mask(x, &lower_triangular(3)).unwrap();
            t.softmax(m, 2).unwrap()
        });
    }

    fn lower_triangular(t: usize) -> Vec<bool> {
        (0..t * t).map(|i| i % t <= i / t).collect()
    }

    #[test]
    fn causal_mask_zeroes_future_weights() {
        let mut tape = Tape::new();
        let x = tape.leaf(wiggle(&[3, 3], 0.3));
        let m = tape.mask(x, &lower_triangular(3)).unwrap();
        let p = tape.softmax(m, 1).unwrap();
        let d = tape.value(p).data();
        for i in 0..3 {
            for j in 0..3 {
                if j > i {
                    assert!(d[i * 3 + j] < 1e-30);
                }
            }
        }
    }

    #[test]
    fn embedding_gather_and_scatter_add() {
        let table = seq(&[3, 2], 0.0, 1.0);
        let mut tape = Tape::new();
        let t = tape.leaf(table.clone());
        let e = tape
            .embedding(t, &IdTensor::new(1, 2, vec![0, 0]).unwrap())
            .unwrap();
        assert_eq!(tape.value(e).data(), &[0.0, 1.0, 0.0, 1.0]);
        let e2 = tape
            .embedding(t, &IdTensor::new(1, 2, vec![2, 1]).unwrap())
            .unwrap();
        assert_eq!(tape.value(e2).data(), &[4.0, 5.0, 2.0, 3.0]);

        let ids = IdTensor::new(1, 3, vec![0, 2, 0]).unwrap();
        check_unary(table, |t, x| t.embedding(x, &ids).unwrap());
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::zeros([3, 2]).unwrap());
        let err = tape
            .embedding(t, &IdTensor::new(1, 1, vec![3]).unwrap())
            .unwrap_err();
        assert_eq!(err, TensorError::IndexOutOfRange { id: 3, size: 3 });
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = |logits: Vec<f64>, shape: [usize; 3], targets: &[usize]| {
            let mut tape = Tape::new();
            let l = tape.leaf(Tensor::new(shape, logits).unwrap());
            tape.cross_entropy(l, targets, usize::MAX)
                .map(|v| tape.value(v).item().unwrap())
        };
        let uniform = ce(vec![0.0; 8], [1, 1, 8], &[5]).unwrap();
        assert!((uniform - 8f64.ln()).abs() < 1e-12);

        let mut peaked = vec![0.0; 4];
        peaked[2] = 30.0;
        assert!(ce(peaked, [1, 1, 4], &[2]).unwrap() < 1e-12);

        let ln2 = 2f64.ln();
        let v = ce(vec![0.0, ln2, 0.0, 0.0, 0.0, 0.0], [1, 2, 3], &[1, 2]).unwrap();
        let want = (-(0.5f64).ln() - (1.0f64 / 3.0).ln()) / 2.0;
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.895_880).abs() < 1e-6);

        assert!(matches!(
            ce(vec![0.0; 6], [1, 2, 3], &[usize::MAX, usize::MAX]),
            Err(TensorError::DegenerateBatch(2))
        ));
    }

    #[test]
    fn cross_entropy_gradient_and_ignored_rows() {
        let logits = wiggle(&[1, 3, 4], 1.7);
        let targets = [2, usize::MAX, 0];
        let f = |l: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.leaf(l.clone());
            let loss = tape.cross_entropy(v, &targets, usize::MAX).unwrap();
            tape.value(loss).item().unwrap()
        };
        let mut tape = Tape::new();
        let v = tape.leaf(logits.clone());
        let loss = tape.cross_entropy(v, &targets, usize::MAX).unwrap();
        let g = tape.backward(loss).unwrap();
        let fd = numeric_grad(&logits, 1e-6, f);
        assert_close(g.get(v).data(), &fd, 1e-6);
        assert!(g.get(v).data()[4..8].iter().all(|&x| x == 0.0));
    }
}
