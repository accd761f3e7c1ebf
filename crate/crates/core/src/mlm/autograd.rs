//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed, not copied; [`Tape::backward`] walks the tape in reverse and
//! accumulates parameter gradients into a [`Grads`] buffer.

use super::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Gradient buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self {
            tensors: params
                .iter()
                .map(|p| Tensor::zeros(p.rows, p.cols))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

enum Op {
    Input,
    Param(usize),
    Rows {
        src: Var,
        idx: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    /// `[1, n]` minus a broadcast `[1, 1]`.
    SubScalarVar(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Pick {
        src: Var,
        idx: Vec<(usize, usize)>,
    },
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(p)) => &self.params[*p],
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
        });
        Var(self.nodes.len() - 1)
    }

    /// Selects rows of `src` (embedding lookup, mask-position gather).
    pub fn rows(&mut self, src: Var, idx: &[usize]) -> Var {
        let s = self.value(src);
        let mut out = Tensor::zeros(idx.len(), s.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(i));
        }
        self.push(
            out,
            Op::Rows {
                src,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        for (o, v) in out.data.iter_mut().zip(&self.value(b).data) {
            *o -= v;
        }
        self.push(out, Op::Sub(a, b))
    }

    /// `x + b` with `b` a `[1, cols]` row broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let mut out = self.value(x).clone();
        let bias = self.value(b);
        debug_assert_eq!(bias.len(), out.cols);
        for r in 0..out.rows {
            for (o, v) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += v;
            }
        }
        self.push(out, Op::AddRow(x, b))
    }

    pub fn sub_scalar_var(&mut self, v: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let mut out = self.value(v).clone();
        out.data.iter_mut().for_each(|x| *x -= sv);
        self.push(out, Op::SubScalarVar(v, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul shape mismatch");
        let mut out = Tensor::zeros(av.rows, bv.cols);
        gemm(
            av.rows,
            av.cols,
            bv.cols,
            &av.data,
            false,
            &bv.data,
            false,
            &mut out.data,
            0.0,
        );
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "matmul_bt shape mismatch");
        let mut out = Tensor::zeros(av.rows, bv.rows);
        gemm(
            av.rows,
            av.cols,
            bv.rows,
            &av.data,
            false,
            &bv.data,
            true,
            &mut out.data,
            0.0,
        );
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v += c);
        self.push(out, Op::AddScalar(x))
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows, xv.cols);
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xhat.data[r * cols + c] * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data.iter_mut() {
            let u = *v;
            *v = 0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh());
        }
        self.push(out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            log_softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::LogSoftmaxRows(x))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let s = self.value(src);
        let mut out = Tensor::zeros(s.rows, len);
        for r in 0..s.rows {
            out.row_mut(r)
                .copy_from_slice(&s.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { src, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Gathers single elements into a `[1, n]` row.
    pub fn pick(&mut self, src: Var, idx: &[(usize, usize)]) -> Var {
        let s = self.value(src);
        let data = idx.iter().map(|&(r, c)| s.at(r, c)).collect();
        self.push(
            Tensor::row_vector(data),
            Op::Pick {
                src,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Var {
        let xv = self.value(x);
        debug_assert_eq!(xv.len(), weights.len());
        let s = xv.data.iter().zip(weights).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum(x, weights.to_vec()))
    }

    /// Accumulates `d loss / d param` into `grads`. `loss` must be `[1, 1]`.
    pub fn backward(&self, loss: Var, grads: &mut Grads) {
        let n = loss.0 + 1;
        let mut g: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        g[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..n).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => grads.tensors[*p].add_assign(&gi),
                Op::Rows { src, idx } => {
                    let s = self.value(*src);
                    let acc = grad_slot(&mut g, *src, s.rows, s.cols);
                    for (r, &row) in idx.iter().enumerate() {
                        let dst = &mut acc.data[row * s.cols..(row + 1) * s.cols];
                        for (d, v) in dst.iter_mut().zip(gi.row(r)) {
                            *d += v;
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *a, &gi);
                    accumulate(&mut g, *b, &gi);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut g, *a, &gi);
                    let mut neg = gi.clone();
                    neg.data.iter_mut().for_each(|v| *v = -*v);
                    accumulate(&mut g, *b, &neg);
                }
                Op::AddRow(x, b) => {
                    let mut db = Tensor::zeros(1, gi.cols);
                    for r in 0..gi.rows {
                        for (d, v) in db.data.iter_mut().zip(gi.row(r)) {
                            *d += v;
                        }
                    }
                    let bv = self.value(*b);
                    let db = Tensor::from_vec(bv.rows, bv.cols, db.data);
                    accumulate(&mut g, *x, &gi);
                    accumulate(&mut g, *b, &db);
                }
                Op::SubScalarVar(v, s) => {
                    let total: f64 = gi.data.iter().sum();
                    accumulate(&mut g, *v, &gi);
                    accumulate(&mut g, *s, &Tensor::scalar(-total));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, nn) = (av.rows, av.cols, bv.cols);
                    let da = grad_slot(&mut g, *a, m, k);
                    gemm(m, nn, k, &gi.data, false, &bv.data, true, &mut da.data, 1.0);
                    let db = grad_slot(&mut g, *b, k, nn);
                    gemm(k, m, nn, &av.data, true, &gi.data, false, &mut db.data, 1.0);
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, nn) = (av.rows, av.cols, bv.rows);
                    let da = grad_slot(&mut g, *a, m, k);
                    gemm(
                        m,
                        nn,
                        k,
                        &gi.data,
                        false,
                        &bv.data,
                        false,
                        &mut da.data,
                        1.0,
                    );
                    let db = grad_slot(&mut g, *b, nn, k);
                    gemm(nn, m, k, &gi.data, true, &av.data, false, &mut db.data, 1.0);
                }
                Op::Scale(x, s) => {
                    let mut d = gi;
                    d.data.iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut g, *x, &d);
                }
                Op::AddScalar(x) => accumulate(&mut g, *x, &gi),
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = (gi.rows, gi.cols);
                    let gv = &self.value(*gain).data;
                    let mut dgain = vec![0.0; cols];
                    let mut dbias = vec![0.0; cols];
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = gi.row(r);
                        let xh = xhat.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            dgain[c] += gr[c] * xh[c];
                            dbias[c] += gr[c];
                            dxhat[c] = gr[c] * gv[c];
                            sum_d += dxhat[c];
                            sum_dx += dxhat[c] * xh[c];
                        }
                        let scale = inv_std[r] / cols as f64;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            out[c] = scale * (cols as f64 * dxhat[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                    let gshape = self.value(*gain);
                    accumulate(&mut g, *x, &dx);
                    accumulate(
                        &mut g,
                        *gain,
                        &Tensor::from_vec(gshape.rows, gshape.cols, dgain),
                    );
                    accumulate(
                        &mut g,
                        *bias,
                        &Tensor::from_vec(gshape.rows, gshape.cols, dbias),
                    );
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut d = gi;
                    for (dv, &u) in d.data.iter_mut().zip(&xv.data) {
                        let inner = GELU_C * (u + 0.044715 * u * u * u);
                        let t = inner.tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * u * u);
                        *dv *= 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner;
                    }
                    accumulate(&mut g, *x, &d);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut d = gi;
                    for (dv, &u) in d.data.iter_mut().zip(&xv.data) {
                        if u <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut g, *x, &d);
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut d = gi;
                    for r in 0..d.rows {
                        let yr = y.row(r);
                        let dot: f64 = d.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (dv, yv) in d.row_mut(r).iter_mut().zip(yr) {
                            *dv = yv * (*dv - dot);
                        }
                    }
                    accumulate(&mut g, *x, &d);
                }
                Op::LogSoftmaxRows(x) => {
                    let y = node.value.as_ref().expect("log-softmax value");
                    let mut d = gi;
                    for r in 0..d.rows {
                        let total: f64 = d.row(r).iter().sum();
                        for (dv, ly) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                            *dv -= ly.exp() * total;
                        }
                    }
                    accumulate(&mut g, *x, &d);
                }
                Op::SliceCols { src, start } => {
                    let s = self.value(*src);
                    let acc = grad_slot(&mut g, *src, s.rows, s.cols);
                    for r in 0..gi.rows {
                        let dst = &mut acc.data[r * s.cols + start..r * s.cols + start + gi.cols];
                        for (d, v) in dst.iter_mut().zip(gi.row(r)) {
                            *d += v;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols;
                        let mut d = Tensor::zeros(gi.rows, pc);
                        for r in 0..gi.rows {
                            d.row_mut(r).copy_from_slice(&gi.row(r)[off..off + pc]);
                        }
                        accumulate(&mut g, p, &d);
                        off += pc;
                    }
                }
                Op::Pick { src, idx } => {
                    let s = self.value(*src);
                    let acc = grad_slot(&mut g, *src, s.rows, s.cols);
                    for (k, &(r, c)) in idx.iter().enumerate() {
                        acc.data[r * s.cols + c] += gi.data[k];
                    }
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    let d = Tensor::from_vec(xv.rows, xv.cols, vec![gi.data[0]; xv.len()]);
                    accumulate(&mut g, *x, &d);
                }
                Op::WeightedSum(x, w) => {
                    let xv = self.value(*x);
                    let d = Tensor::from_vec(
                        xv.rows,
                        xv.cols,
                        w.iter().map(|v| v * gi.data[0]).collect(),
                    );
                    accumulate(&mut g, *x, &d);
                }
            }
        }
    }
}

fn grad_slot(g: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> &mut Tensor {
    g[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn accumulate(g: &mut [Option<Tensor>], v: Var, d: &Tensor) {
    match &mut g[v.0] {
        Some(t) => t.add_assign(d),
        slot @ None => *slot = Some(d.clone()),
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|v| *v -= lse);
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of every parameter entry.
    fn check<F>(params: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Tape) -> Var,
    {
        let mut grads = Grads::zeros_like(&params);
        {
            let mut tape = Tape::new(&params);
            let loss = f(&mut tape);
            tape.backward(loss, &mut grads);
        }
        let eval = |ps: &Vec<Tensor>| {
            let mut tape = Tape::new(ps);
            let l = f(&mut tape);
            tape.scalar(l)
        };
        let h = 1e-6;
        for p in 0..params.len() {
            for i in 0..params[p].len() {
                let mut plus = params.clone();
                plus[p].data[i] += h;
                let mut minus = params.clone();
                minus[p].data[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads.tensors[p].data[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "param {p}[{i}]: analytic {an} vs fd {fd}");
            }
        }
    }

    fn t(rows: usize, cols: usize, seed: f64) -> Tensor {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| ((i as f64 + 1.0) * seed).sin())
                .collect(),
        )
    }

    #[test]
    fn matmul_layernorm_gelu_softmax() {
        check(
            vec![t(3, 4, 0.7), t(4, 5, 1.3), t(1, 5, 0.2), t(1, 5, 0.9)],
            |tp| {
                let a = tp.param(0);
                let b = tp.param(1);
                let g = tp.param(2);
                let bias = tp.param(3);
                let c = tp.matmul(a, b);
                let n = tp.layer_norm(c, g, bias);
                let e = tp.gelu(n);
                let s = tp.softmax_rows(e);
                let w: Vec<f64> = (0..15).map(|i| (i as f64).cos()).collect();
                tp.weighted_sum(s, &w)
            },
        );
    }

    #[test]
    fn attention_like_graph() {
        check(vec![t(4, 6, 0.5), t(6, 6, 0.8), t(1, 6, 0.3)], |tp| {
            let x = tp.param(0);
            let w = tp.param(1);
            let b = tp.param(2);
            let q = tp.matmul(x, w);
            let q = tp.add_row(q, b);
            let h0 = tp.slice_cols(q, 0, 3);
            let h1 = tp.slice_cols(q, 3, 3);
            let sc = tp.matmul_bt(h0, h1);
            let sc = tp.scale(sc, 0.5);
            let p = tp.softmax_rows(sc);
            let o = tp.matmul(p, h1);
            let cat = tp.concat_cols(&[o, h0]);
            let r = tp.rows(cat, &[3, 0, 3]);
            let ls = tp.log_softmax_rows(r);
            let picked = tp.pick(ls, &[(0, 1), (1, 4), (2, 2)]);
            tp.sum(picked)
        });
    }

    #[test]
    fn hinge_like_graph() {
        check(vec![t(1, 4, 0.9)], |tp| {
            let x = tp.param(0);
            let y = tp.pick(x, &[(0, 0)]);
            let y = tp.sum(y);
            let others = tp.pick(x, &[(0, 1), (0, 2), (0, 3)]);
            let d = tp.sub_scalar_var(others, y);
            let m = tp.add_scalar(d, 1.0);
            let r = tp.relu(m);
            let s = tp.sum(r);
            let s2 = tp.sub(s, y);
            tp.add(s2, s)
        });
    }

    #[test]
    fn zero_loss_gives_zero_grads() {
        let params = vec![t(2, 2, 0.4)];
        let mut grads = Grads::zeros_like(&params);
        let mut tape = Tape::new(&params);
        let c = tape.input(Tensor::scalar(3.0));
        tape.backward(c, &mut grads);
        assert_eq!(grads.global_norm(), 0.0);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut a = vec![0.3, -1.2, 2.0, 0.0];
        let mut b: Vec<f64> = a.iter().map(|v| v + 37.5).collect();
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
