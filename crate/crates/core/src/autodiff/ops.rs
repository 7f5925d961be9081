use std::ops::Range;

use rand::Rng;

use super::kernels::{self, gemm};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Gelu,
    Silu,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / c.max(1), c)
}

fn shape_err(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

/// Reference to one row of a tape node.
#[derive(Clone, Copy, Debug)]
pub struct RowRef<'t> {
    pub var: Var<'t>,
    pub row: usize,
}

impl<'t> RowRef<'t> {
    pub fn new(var: Var<'t>, row: usize) -> Self {
        RowRef { var, row }
    }
}

/// A contiguous run of values copied out of a source node.
#[derive(Clone, Copy, Debug)]
pub struct Piece<'t> {
    pub src: Var<'t>,
    pub offset: usize,
    pub len: usize,
}

impl Tape {
    /// Concatenates `pieces` in order into a new tensor of `shape`.
    pub fn gather<'t>(&'t self, shape: Vec<usize>, pieces: &[Piece<'t>]) -> Result<Var<'t>> {
        let total: usize = pieces.iter().map(|p| p.len).sum();
        if total != shape.iter().product::<usize>() || total == 0 {
            return Err(contract(format!(
                "gather of {total} values into shape {shape:?}"
            )));
        }
        let mut srcs: Vec<Var<'t>> = Vec::new();
        let mut plan: Vec<(usize, usize, usize)> = Vec::with_capacity(pieces.len());
        let mut out = Vec::with_capacity(total);
        let mut cache: Vec<(usize, std::sync::Arc<Vec<f64>>)> = Vec::new();
        let mut slot: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
        for p in pieces {
            let k = *slot.entry(p.src.id).or_insert_with(|| {
                srcs.push(p.src);
                cache.push((p.src.id, p.src.data()));
                srcs.len() - 1
            });
            let data = &cache[k].1;
            if p.offset + p.len > data.len() {
                return Err(contract(format!(
                    "gather piece {}..{} out of bounds for {} values",
                    p.offset,
                    p.offset + p.len,
                    data.len()
                )));
            }
            out.extend_from_slice(&data[p.offset..p.offset + p.len]);
            plan.push((k, p.offset, p.len));
        }
        let sizes: Vec<usize> = cache.iter().map(|(_, d)| d.len()).collect();
        Ok(self.push_op(
            "gather",
            shape,
            out,
            &srcs,
            0,
            Box::new(move |a| {
                let mut grads: Vec<Option<Vec<f64>>> = sizes
                    .iter()
                    .zip(a.needs)
                    .map(|(&n, &need)| need.then(|| vec![0.0; n]))
                    .collect();
                let mut pos = 0;
                for &(k, off, len) in &plan {
                    if let Some(g) = &mut grads[k] {
                        for (d, s) in g[off..off + len].iter_mut().zip(&a.grad[pos..pos + len]) {
                            *d += s;
                        }
                    }
                    pos += len;
                }
                grads
            }),
        ))
    }

    /// Stacks columns `start..start+len` of each referenced row.
    pub fn gather_rows<'t>(
        &'t self,
        refs: &[RowRef<'t>],
        start: usize,
        len: usize,
    ) -> Result<Var<'t>> {
        let pieces: Vec<Piece<'t>> = refs
            .iter()
            .map(|r| {
                let c = r.var.cols();
                if start + len > c {
                    return Err(contract(format!("column range {start}+{len} exceeds width {c}")));
                }
                Ok(Piece {
                    src: r.var,
                    offset: r.row * c + start,
                    len,
                })
            })
            .collect::<Result<_>>()?;
        self.gather(vec![refs.len(), len], &pieces)
    }

    /// Rows `[left_i[..k]; right_i[..k]]` for each pair, `k` clamped to the
    /// row width.
    pub fn gather_pairs<'t>(
        &'t self,
        left: &[RowRef<'t>],
        right: &[RowRef<'t>],
        k: usize,
    ) -> Result<Var<'t>> {
        if left.len() != right.len() || left.is_empty() {
            return Err(contract("gather_pairs needs equally many non-empty sides"));
        }
        let d = left[0].var.cols();
        let k = k.min(d);
        let mut pieces = Vec::with_capacity(2 * left.len());
        for (l, r) in left.iter().zip(right) {
            for side in [l, r] {
                let c = side.var.cols();
                if c != d {
                    return Err(Error::Shape {
                        op: "gather_pairs",
                        left: vec![d],
                        right: vec![c],
                    });
                }
                pieces.push(Piece {
                    src: side.var,
                    offset: side.row * c,
                    len: k,
                });
            }
        }
        self.gather(vec![left.len(), 2 * k], &pieces)
    }
}

impl<'t> Var<'t> {
    pub fn unary(self, kind: Unary) -> Var<'t> {
        let x = self.data();
        let f = match kind {
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Gelu => kernels::gelu,
            Unary::Silu => kernels::silu,
        };
        let out: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let label = match kind {
            Unary::Sigmoid => "sigmoid",
            Unary::Gelu => "gelu",
            Unary::Silu => "silu",
        };
        self.tape.push_op(
            label,
            self.shape(),
            out,
            &[self],
            0,
            Box::new(move |a| {
                let g: Vec<f64> = match kind {
                    Unary::Sigmoid => a
                        .output
                        .iter()
                        .zip(a.grad)
                        .map(|(y, g)| g * y * (1.0 - y))
                        .collect(),
                    Unary::Gelu => a.inputs[0]
                        .iter()
                        .zip(a.grad)
                        .map(|(&x, g)| g * kernels::gelu_grad(x))
                        .collect(),
                    Unary::Silu => a.inputs[0]
                        .iter()
                        .zip(a.grad)
                        .map(|(&x, g)| g * kernels::silu_grad(x))
                        .collect(),
                };
                vec![Some(g)]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    /// Exact GeLU, `x · Φ(x)`.
    pub fn gelu(self) -> Var<'t> {
        self.unary(Unary::Gelu)
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Unary::Silu)
    }

    /// `self · other` for `m × k` and `k × n` operands.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.affine(other, None, false)
    }

    /// `self · otherᵀ` for `m × k` and `n × k` operands.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.affine(other, None, true)
    }

    /// `self · w + b` with `b` broadcast over rows.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        self.affine(w, b, false)
    }

    fn affine(self, w: Var<'t>, b: Option<Var<'t>>, wt: bool) -> Result<Var<'t>> {
        let xs = self.shape();
        let ws = w.shape();
        let (m, k) = rows_cols(&xs);
        if ws.len() != 2 {
            return Err(shape_err("linear", &self, &w));
        }
        let (wk, n) = if wt { (ws[1], ws[0]) } else { (ws[0], ws[1]) };
        if wk != k {
            return Err(shape_err(if wt { "matmul_t" } else { "linear" }, &self, &w));
        }
        if let Some(b) = b {
            if b.numel() != n {
                return Err(shape_err("linear bias", &w, &b));
            }
        }
        let x = self.data();
        let wd = w.data();
        let mut out = match b {
            Some(b) => {
                let bd = b.data();
                let mut o = Vec::with_capacity(m * n);
                for _ in 0..m {
                    o.extend_from_slice(&bd);
                }
                o
            }
            None => vec![0.0; m * n],
        };
        gemm(m, k, n, &x, false, &wd, wt, &mut out, 1.0);
        let mut inputs = vec![self, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        let has_b = b.is_some();
        Ok(self.tape.push_op(
            if wt { "matmul_t" } else { "linear" },
            with_last(&xs, n),
            out,
            &inputs,
            0,
            Box::new(move |a| {
                let (x, w, dy) = (a.inputs[0], a.inputs[1], a.grad);
                let dx = a.needs[0].then(|| {
                    let mut dx = vec![0.0; m * k];
                    // dy (m×n) · op(w)ᵀ
                    gemm(m, n, k, dy, false, w, !wt, &mut dx, 0.0);
                    dx
                });
                let dw = a.needs[1].then(|| {
                    let mut dw = vec![0.0; k * n];
                    if wt {
                        // w is n×k: dyᵀ · x
                        gemm(n, m, k, dy, true, x, false, &mut dw, 0.0);
                    } else {
                        gemm(k, m, n, x, true, dy, false, &mut dw, 0.0);
                    }
                    dw
                });
                let mut g = vec![dx, dw];
                if has_b {
                    g.push(a.needs[2].then(|| {
                        let mut db = vec![0.0; n];
                        for row in dy.chunks_exact(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        db
                    }));
                }
                g
            }),
        ))
    }

    fn zip_same(
        self,
        other: Var<'t>,
        label: &'static str,
        f: fn(f64, f64) -> f64,
        back: fn(f64, f64, f64) -> (f64, f64),
    ) -> Result<Var<'t>> {
        if self.shape() != other.shape() {
            return Err(shape_err(label, &self, &other));
        }
        let (a, b) = (self.data(), other.data());
        let out = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.tape.push_op(
            label,
            self.shape(),
            out,
            &[self, other],
            0,
            Box::new(move |ar| {
                let (x, y) = (ar.inputs[0], ar.inputs[1]);
                let mut gx = ar.needs[0].then(|| Vec::with_capacity(x.len()));
                let mut gy = ar.needs[1].then(|| Vec::with_capacity(y.len()));
                for i in 0..x.len() {
                    let (dx, dy) = back(x[i], y[i], ar.grad[i]);
                    if let Some(g) = &mut gx {
                        g.push(dx);
                    }
                    if let Some(g) = &mut gy {
                        g.push(dy);
                    }
                }
                vec![gx, gy]
            }),
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "sub", |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    /// Adds a length-`d` vector to every row.
    pub fn add_row(self, v: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(v, false)
    }

    /// Multiplies every row elementwise by a length-`d` vector.
    pub fn mul_row(self, v: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(v, true)
    }

    fn row_broadcast(self, v: Var<'t>, mul: bool) -> Result<Var<'t>> {
        let (m, d) = rows_cols(&self.shape());
        if v.numel() != d {
            return Err(shape_err(if mul { "mul_row" } else { "add_row" }, &self, &v));
        }
        let (x, vd) = (self.data(), v.data());
        let mut out = Vec::with_capacity(m * d);
        for row in x.chunks_exact(d) {
            for (a, b) in row.iter().zip(vd.iter()) {
                out.push(if mul { a * b } else { a + b });
            }
        }
        Ok(self.tape.push_op(
            if mul { "mul_row" } else { "add_row" },
            self.shape(),
            out,
            &[self, v],
            0,
            Box::new(move |a| {
                let (x, v, g) = (a.inputs[0], a.inputs[1], a.grad);
                let gx = a.needs[0].then(|| {
                    if mul {
                        g.chunks_exact(d)
                            .flat_map(|r| r.iter().zip(v).map(|(gi, vi)| gi * vi))
                            .collect()
                    } else {
                        g.to_vec()
                    }
                });
                let gv = a.needs[1].then(|| {
                    let mut gv = vec![0.0; d];
                    for r in 0..m {
                        for j in 0..d {
                            let gi = g[r * d + j];
                            gv[j] += if mul { gi * x[r * d + j] } else { gi };
                        }
                    }
                    gv
                });
                vec![gx, gv]
            }),
        ))
    }

    /// Scales row `r` by `c[r]`; `c` holds one value per row.
    pub fn mul_col(self, c: Var<'t>) -> Result<Var<'t>> {
        let (m, d) = rows_cols(&self.shape());
        if c.numel() != m {
            return Err(shape_err("mul_col", &self, &c));
        }
        let (x, cd) = (self.data(), c.data());
        let out = x
            .chunks_exact(d)
            .zip(cd.iter())
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        Ok(self.tape.push_op(
            "mul_col",
            self.shape(),
            out,
            &[self, c],
            0,
            Box::new(move |a| {
                let (x, c, g) = (a.inputs[0], a.inputs[1], a.grad);
                let gx = a.needs[0].then(|| {
                    g.chunks_exact(d)
                        .zip(c)
                        .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
                        .collect()
                });
                let gc = a.needs[1].then(|| {
                    g.chunks_exact(d)
                        .zip(x.chunks_exact(d))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(p, q)| p * q).sum())
                        .collect()
                });
                vec![gx, gc]
            }),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.data().iter().map(|v| v * c).collect();
        self.tape.push_op(
            "scale",
            self.shape(),
            out,
            &[self],
            0,
            Box::new(move |a| vec![Some(a.grad.iter().map(|g| g * c).collect())]),
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.data().iter().map(|v| v + c).collect();
        self.tape.push_op(
            "add_scalar",
            self.shape(),
            out,
            &[self],
            0,
            Box::new(|a| vec![Some(a.grad.to_vec())]),
        )
    }

    /// `1 - self`.
    pub fn one_minus(self) -> Var<'t> {
        self.scale(-1.0).add_scalar(1.0)
    }

    /// Elementwise product with a constant tensor of the same size.
    pub fn mul_const(self, mask: Vec<f64>) -> Result<Var<'t>> {
        if mask.len() != self.numel() {
            return Err(Error::Shape {
                op: "mul_const",
                left: self.shape(),
                right: vec![mask.len()],
            });
        }
        let out = self.data().iter().zip(&mask).map(|(a, b)| a * b).collect();
        let saved = mask.len();
        Ok(self.tape.push_op(
            "mul_const",
            self.shape(),
            out,
            &[self],
            saved,
            Box::new(move |a| vec![Some(a.grad.iter().zip(&mask).map(|(g, m)| g * m).collect())]),
        ))
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout(self, rate: f64, rng: &mut impl Rng) -> Result<Var<'t>> {
        if rate <= 0.0 {
            return Ok(self);
        }
        if rate >= 1.0 {
            return Err(contract(format!("dropout rate {rate} must be below 1")));
        }
        let keep = 1.0 - rate;
        let mask = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(mask)
    }

    /// Identity forward; scales the gradient by `s` on the way back.
    pub fn scale_grad(self, s: f64) -> Var<'t> {
        let value = self.data();
        self.tape.push_view(
            self.shape(),
            value,
            self,
            Box::new(move |a| vec![Some(a.grad.iter().map(|g| g * s).collect())]),
        )
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape(),
                right: shape,
            });
        }
        let value = self.data();
        Ok(self
            .tape
            .push_view(shape, value, self, Box::new(|a| vec![Some(a.grad.to_vec())])))
    }

    /// Forward value `hard`, backward gradient routed unchanged to `self`.
    pub fn straight_through(self, hard: Vec<f64>) -> Result<Var<'t>> {
        if hard.len() != self.numel() {
            return Err(Error::Shape {
                op: "straight_through",
                left: self.shape(),
                right: vec![hard.len()],
            });
        }
        Ok(self.tape.push_op(
            "straight_through",
            self.shape(),
            hard,
            &[self],
            0,
            Box::new(|a| vec![Some(a.grad.to_vec())]),
        ))
    }

    /// Last-axis concatenation.
    pub fn concat(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat", &self, &other));
        }
        let (m, p) = rows_cols(&sa);
        let q = *sb.last().unwrap();
        let pieces: Vec<Piece<'t>> = (0..m)
            .flat_map(|r| {
                [
                    Piece {
                        src: self,
                        offset: r * p,
                        len: p,
                    },
                    Piece {
                        src: other,
                        offset: r * q,
                        len: q,
                    },
                ]
            })
            .collect();
        self.tape.gather(with_last(&sa, p + q), &pieces)
    }

    /// Last-axis columns `start..start+len`.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.shape();
        let (m, d) = rows_cols(&s);
        if len == 0 || start + len > d {
            return Err(contract(format!("slice {start}+{len} of width {d}")));
        }
        let pieces: Vec<Piece<'t>> = (0..m)
            .map(|r| Piece {
                src: self,
                offset: r * d + start,
                len,
            })
            .collect();
        self.tape.gather(with_last(&s, len), &pieces)
    }

    /// The first `min(k, d)` last-axis entries.
    pub fn slice_prefix(self, k: usize) -> Result<Var<'t>> {
        if k == 0 {
            return Err(contract("slice_prefix needs k >= 1"));
        }
        let d = self.cols();
        if k >= d {
            return Ok(self);
        }
        self.slice_cols(0, k)
    }

    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let s = self.shape();
        let (m, d) = rows_cols(&s);
        if gain.numel() != d || bias.numel() != d {
            return Err(shape_err("layer_norm", &self, &gain));
        }
        let (x, gd, bd) = (self.data(), gain.data(), bias.data());
        let mut out = Vec::with_capacity(m * d);
        let mut stats = Vec::with_capacity(2 * m);
        for row in x.chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out.push((row[j] - mean) * rstd * gd[j] + bd[j]);
            }
            stats.push(mean);
            stats.push(rstd);
        }
        Ok(self.tape.push_op(
            "layer_norm",
            s,
            out,
            &[self, gain, bias],
            2 * m,
            Box::new(move |a| {
                let (x, gain, g) = (a.inputs[0], a.inputs[1], a.grad);
                let mut dx = a.needs[0].then(|| vec![0.0; m * d]);
                let mut dg = a.needs[1].then(|| vec![0.0; d]);
                let mut db = a.needs[2].then(|| vec![0.0; d]);
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..m {
                    let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                    let xr = &x[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gain[j];
                    }
                    if let Some(dg) = &mut dg {
                        for j in 0..d {
                            dg[j] += gr[j] * xhat[j];
                        }
                    }
                    if let Some(db) = &mut db {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    if let Some(dx) = &mut dx {
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx =
                            dxhat.iter().zip(&xhat).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        }
                    }
                }
                vec![dx, dg, db]
            }),
        ))
    }

    /// Row-wise softmax restricted to `mask`; masked entries are exactly 0
    /// and fully masked rows are all zeros.
    pub fn masked_softmax(self, mask: &[bool]) -> Result<Var<'t>> {
        let s = self.shape();
        let (m, n) = rows_cols(&s);
        if mask.len() != m * n {
            return Err(Error::Shape {
                op: "masked_softmax",
                left: s,
                right: vec![mask.len()],
            });
        }
        let x = self.data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mrow = &mask[r * n..(r + 1) * n];
            let mx = row
                .iter()
                .zip(mrow)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..n {
                if mrow[j] {
                    let e = (row[j] - mx).exp();
                    out[r * n + j] = e;
                    z += e;
                }
            }
            for v in &mut out[r * n..(r + 1) * n] {
                *v /= z;
            }
        }
        Ok(self.tape.push_op(
            "masked_softmax",
            s,
            out,
            &[self],
            0,
            Box::new(move |a| vec![Some(softmax_backward(a.output, a.grad, n))]),
        ))
    }

    pub fn softmax(self) -> Var<'t> {
        let mask = vec![true; self.numel()];
        self.masked_softmax(&mask).expect("full mask matches shape")
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax(self) -> Var<'t> {
        let s = self.shape();
        let (m, n) = rows_cols(&s);
        let segs: Vec<Range<usize>> = (0..m).map(|r| r * n..(r + 1) * n).collect();
        self.segment_log_softmax_inner(&segs, s)
    }

    /// Log-softmax over each flat index range; values outside every range
    /// pass through unchanged with zero gradient coupling.
    pub fn segment_log_softmax(self, segs: &[Range<usize>]) -> Result<Var<'t>> {
        check_segments(segs, self.numel())?;
        Ok(self.segment_log_softmax_inner(segs, self.shape()))
    }

    fn segment_log_softmax_inner(self, segs: &[Range<usize>], shape: Vec<usize>) -> Var<'t> {
        let x = self.data();
        let mut out = x.to_vec();
        for sg in segs {
            let lse = kernels::logsumexp(&x[sg.clone()]);
            for v in &mut out[sg.clone()] {
                *v -= lse;
            }
        }
        let segs = segs.to_vec();
        self.tape.push_op(
            "log_softmax",
            shape,
            out,
            &[self],
            0,
            Box::new(move |a| {
                let mut g = a.grad.to_vec();
                for sg in &segs {
                    let total: f64 = a.grad[sg.clone()].iter().sum();
                    for i in sg.clone() {
                        g[i] = a.grad[i] - a.output[i].exp() * total;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Softmax over each flat index range (values outside ranges are zeroed).
    pub fn segment_softmax(self, segs: &[Range<usize>]) -> Result<Var<'t>> {
        check_segments(segs, self.numel())?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for sg in segs {
            let lse = kernels::logsumexp(&x[sg.clone()]);
            for i in sg.clone() {
                out[i] = (x[i] - lse).exp();
            }
        }
        let segs = segs.to_vec();
        Ok(self.tape.push_op(
            "softmax",
            self.shape(),
            out,
            &[self],
            0,
            Box::new(move |a| {
                let mut g = vec![0.0; a.grad.len()];
                for sg in &segs {
                    let dot: f64 = sg.clone().map(|i| a.output[i] * a.grad[i]).sum();
                    for i in sg.clone() {
                        g[i] = a.output[i] * (a.grad[i] - dot);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Inclusive prefix sums within each flat index range.
    pub fn segment_cumsum(self, segs: &[Range<usize>]) -> Result<Var<'t>> {
        check_segments(segs, self.numel())?;
        let x = self.data();
        let mut out = x.to_vec();
        for sg in segs {
            let mut acc = 0.0;
            for i in sg.clone() {
                acc += x[i];
                out[i] = acc;
            }
        }
        let segs = segs.to_vec();
        Ok(self.tape.push_op(
            "cumsum",
            self.shape(),
            out,
            &[self],
            0,
            Box::new(move |a| {
                let mut g = a.grad.to_vec();
                for sg in &segs {
                    let mut acc = 0.0;
                    for i in sg.clone().rev() {
                        acc += a.grad[i];
                        g[i] = acc;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// For each segment `s`, `Σ_{i∈s} w[i] · rows[i]`, giving one output row
    /// per segment. `self` holds the weights.
    pub fn segment_weighted_sum(self, rows: Var<'t>, segs: &[Range<usize>]) -> Result<Var<'t>> {
        let (m, d) = rows_cols(&rows.shape());
        if self.numel() != m {
            return Err(shape_err("segment_weighted_sum", &self, &rows));
        }
        check_segments(segs, m)?;
        if segs.is_empty() {
            return Err(contract("segment_weighted_sum needs at least one segment"));
        }
        let (w, x) = (self.data(), rows.data());
        let mut out = vec![0.0; segs.len() * d];
        for (s, sg) in segs.iter().enumerate() {
            let o = &mut out[s * d..(s + 1) * d];
            for i in sg.clone() {
                for (a, b) in o.iter_mut().zip(&x[i * d..(i + 1) * d]) {
                    *a += w[i] * b;
                }
            }
        }
        let segs = segs.to_vec();
        Ok(self.tape.push_op(
            "weighted_sum",
            vec![segs.len(), d],
            out,
            &[self, rows],
            0,
            Box::new(move |a| {
                let (w, x, g) = (a.inputs[0], a.inputs[1], a.grad);
                let mut gw = a.needs[0].then(|| vec![0.0; m]);
                let mut gx = a.needs[1].then(|| vec![0.0; m * d]);
                for (s, sg) in segs.iter().enumerate() {
                    let gs = &g[s * d..(s + 1) * d];
                    for i in sg.clone() {
                        let xi = &x[i * d..(i + 1) * d];
                        if let Some(gw) = &mut gw {
                            gw[i] = gs.iter().zip(xi).map(|(p, q)| p * q).sum();
                        }
                        if let Some(gx) = &mut gx {
                            for (t, v) in gx[i * d..(i + 1) * d].iter_mut().zip(gs) {
                                *t = w[i] * v;
                            }
                        }
                    }
                }
                vec![gw, gx]
            }),
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let n = self.numel();
        let total = self.data().iter().sum();
        self.tape.push_op(
            "sum",
            vec![1],
            vec![total],
            &[self],
            0,
            Box::new(move |a| vec![Some(vec![a.grad[0]; n])]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Values at flat indices `idx`, as a vector.
    pub fn pick(self, idx: &[usize]) -> Result<Var<'t>> {
        let pieces: Vec<Piece<'t>> = idx
            .iter()
            .map(|&i| Piece {
                src: self,
                offset: i,
                len: 1,
            })
            .collect();
        self.tape.gather(vec![idx.len()], &pieces)
    }

    pub fn row(self, r: usize) -> RowRef<'t> {
        RowRef::new(self, r)
    }
}

fn softmax_backward(y: &[f64], g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for ((yr, gr), or) in y
        .chunks_exact(n)
        .zip(g.chunks_exact(n))
        .zip(out.chunks_exact_mut(n))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            or[j] = yr[j] * (gr[j] - dot);
        }
    }
    out
}

fn check_segments(segs: &[Range<usize>], n: usize) -> Result<()> {
    for s in segs {
        if s.start >= s.end || s.end > n {
            return Err(contract(format!("segment {s:?} invalid for length {n}")));
        }
    }
    Ok(())
}

/// Stacks the rows of `parts` (all the same width) into one constant-free
/// matrix.
pub fn stack_rows<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Result<Var<'t>> {
    let d = parts
        .first()
        .ok_or_else(|| contract("stack_rows of nothing"))?
        .cols();
    let mut pieces = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != d {
            return Err(shape_err("stack_rows", &parts[0], p));
        }
        pieces.push(Piece {
            src: *p,
            offset: 0,
            len: p.numel(),
        });
        rows += p.rows();
    }
    tape.gather(vec![rows, d], &pieces)
}

/// Convenience for tests and examples.
pub fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}
