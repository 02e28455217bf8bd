//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together
//! with its forward value. [`Graph::backward`] walks the record in reverse and
//! returns the adjoint of every node. Only the operations the encoders and
//! noise networks need are provided; each validates shapes up front.

use std::borrow::Cow;

use super::array::{gemm, NumericArray};
use super::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Concat(Vec<Var>),
    Unfold3 { x: Var, horizon: usize },
    RepeatRows { x: Var, times: usize },
    TileRows(Var),
    Attention { q: Var, k: Var, v: Var, horizon: usize, probs: Vec<f64> },
    MeanSquare(Var),
    SumSquare(Var),
}

struct Node<'p> {
    value: Cow<'p, NumericArray>,
    op: Op,
}

/// Recorded computation. Leaves may borrow parameter arrays for `'p`.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: Vec<(String, Var)>,
}

/// Adjoints of every node reached from the loss.
pub struct Adjoints {
    grads: Vec<Option<NumericArray>>,
}

impl Adjoints {
    pub fn get(&self, v: Var) -> Option<&NumericArray> {
        self.grads[v.0].as_ref()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn accumulate(slot: &mut Option<NumericArray>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| NumericArray::zeros(shape));
    f(&mut g.data);
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Cow<'p, NumericArray>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &NumericArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Constant input; gradients are still computed for it.
    pub fn input(&mut self, a: NumericArray) -> Var {
        self.push(Cow::Owned(a), Op::Leaf)
    }

    /// Named parameter leaf borrowing its value.
    pub fn param(&mut self, name: &str, a: &'p NumericArray) -> Var {
        let v = self.push(Cow::Borrowed(a), Op::Leaf);
        self.params.push((name.to_string(), v));
        v
    }

    /// Parameter leaves registered so far, in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize), NetError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(NetError::Shape(format!("{what}: expected a 2-D array, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(NetError::Shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, false, 0.0, &mut out);
        Ok(self.push(Cow::Owned(NumericArray { shape: vec![m, n], data: out }), Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NetError> {
        let (_, n) = self.dims2(a, "add_bias input")?;
        if self.shape(bias) != [n] {
            return Err(NetError::Shape(format!("bias shape {:?} vs width {n}", self.shape(bias))));
        }
        let b = &self.value(bias).data;
        let mut out = self.value(a).clone();
        for row in out.data.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(self.push(Cow::Owned(out), Op::AddBias(a, bias)))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, NetError> {
        if self.shape(a) != self.shape(b) {
            return Err(NetError::Shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(NumericArray { shape, data }), op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        self.push(Cow::Owned(out), Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= sigmoid(*x));
        self.push(Cow::Owned(out), Op::Silu(a))
    }

    /// Concatenates 2-D arrays along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NetError> {
        let rows = self.dims2(parts[0], "concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat")?;
            if r != rows {
                return Err(NetError::Shape(format!("concat row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Cow::Owned(NumericArray { shape: vec![rows, total], data }), Op::Concat(parts.to_vec())))
    }

    /// Rows are (batch, position) pairs of `horizon` positions each; output
    /// row holds [x(t-1), x(t), x(t+1)] with zero padding at sequence edges.
    pub fn unfold3(&mut self, x: Var, horizon: usize) -> Result<Var, NetError> {
        let (rows, c) = self.dims2(x, "unfold3")?;
        if horizon == 0 || rows % horizon != 0 {
            return Err(NetError::Shape(format!("unfold3: {rows} rows not divisible by horizon {horizon}")));
        }
        let src = &self.value(x).data;
        let mut data = vec![0.0; rows * 3 * c];
        for r in 0..rows {
            let t = r % horizon;
            for (slot, off) in [-1isize, 0, 1].iter().enumerate() {
                let tt = t as isize + off;
                if tt >= 0 && (tt as usize) < horizon {
                    let sr = (r as isize + off) as usize;
                    data[r * 3 * c + slot * c..r * 3 * c + (slot + 1) * c].copy_from_slice(&src[sr * c..(sr + 1) * c]);
                }
            }
        }
        Ok(self.push(Cow::Owned(NumericArray { shape: vec![rows, 3 * c], data }), Op::Unfold3 { x, horizon }))
    }

    /// [B, C] -> [B * times, C], each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var, NetError> {
        let (b, c) = self.dims2(x, "repeat_rows")?;
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(b * times * c);
        for i in 0..b {
            for _ in 0..times {
                data.extend_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(Cow::Owned(NumericArray { shape: vec![b * times, c], data }), Op::RepeatRows { x, times }))
    }

    /// [H, C] -> [blocks * H, C], the whole array stacked `blocks` times.
    pub fn tile_rows(&mut self, x: Var, blocks: usize) -> Result<Var, NetError> {
        let (h, c) = self.dims2(x, "tile_rows")?;
        let data = self.value(x).data.repeat(blocks);
        Ok(self.push(Cow::Owned(NumericArray { shape: vec![blocks * h, c], data }), Op::TileRows(x)))
    }

    /// Single-head scaled dot-product self-attention within each block of
    /// `horizon` consecutive rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, horizon: usize) -> Result<Var, NetError> {
        let (rows, d) = self.dims2(q, "attention q")?;
        for (name, x) in [("k", k), ("v", v)] {
            if self.shape(x) != [rows, d] {
                return Err(NetError::Shape(format!("attention {name} shape {:?} vs q {:?}", self.shape(x), [rows, d])));
            }
        }
        if horizon == 0 || rows % horizon != 0 {
            return Err(NetError::Shape(format!("attention: {rows} rows not divisible by horizon {horizon}")));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (&self.value(q).data, &self.value(k).data, &self.value(v).data);
        let mut probs = vec![0.0; rows * horizon];
        let mut out = vec![0.0; rows * d];
        for b in 0..rows / horizon {
            let base = b * horizon;
            for i in 0..horizon {
                let p = &mut probs[(base + i) * horizon..(base + i + 1) * horizon];
                let qi = &qd[(base + i) * d..(base + i + 1) * d];
                for (j, pj) in p.iter_mut().enumerate() {
                    let kj = &kd[(base + j) * d..(base + j + 1) * d];
                    *pj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                p.iter_mut().for_each(|x| {
                    *x = (*x - max).exp();
                    z += *x;
                });
                p.iter_mut().for_each(|x| *x /= z);
                let o = &mut out[(base + i) * d..(base + i + 1) * d];
                for (j, pj) in p.iter().enumerate() {
                    let vj = &vd[(base + j) * d..(base + j + 1) * d];
                    o.iter_mut().zip(vj).for_each(|(a, b)| *a += pj * b);
                }
            }
        }
        Ok(self.push(Cow::Owned(NumericArray { shape: vec![rows, d], data: out }), Op::Attention { q, k, v, horizon, probs }))
    }

    pub fn mean_square(&mut self, a: Var) -> Var {
        let x = &self.value(a).data;
        let m = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        self.push(Cow::Owned(NumericArray::scalar(m)), Op::MeanSquare(a))
    }

    pub fn sum_square(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().map(|v| v * v).sum::<f64>();
        self.push(Cow::Owned(NumericArray::scalar(s)), Op::SumSquare(a))
    }

    /// Linear layer `x W + b` using parameters `{prefix}.w` / `{prefix}.b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NetError> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Adjoints, NetError> {
        if self.value(loss).len() != 1 {
            return Err(NetError::Shape(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<NumericArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(NumericArray { shape: self.shape(loss).to_vec(), data: vec![1.0] });
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    accumulate(&mut grads[a.0], &[m, k], |d| gemm(m, n, k, &g.data, false, bv, true, 1.0, d));
                    accumulate(&mut grads[b.0], &[k, n], |d| gemm(k, m, n, av, true, &g.data, false, 1.0, d));
                }
                Op::AddBias(a, b) => {
                    let n = self.shape(*b)[0];
                    accumulate(&mut grads[a.0], &g.shape, |d| d.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y));
                    accumulate(&mut grads[b.0], &[n], |d| {
                        for row in g.data.chunks(n) {
                            d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        accumulate(&mut grads[v.0], &g.shape, |d| d.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y));
                    }
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g.shape, |d| d.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y));
                    accumulate(&mut grads[b.0], &g.shape, |d| d.iter_mut().zip(&g.data).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    accumulate(&mut grads[a.0], &g.shape, |d| {
                        d.iter_mut().zip(&g.data).zip(bv).for_each(|((x, y), w)| *x += y * w)
                    });
                    accumulate(&mut grads[b.0], &g.shape, |d| {
                        d.iter_mut().zip(&g.data).zip(av).for_each(|((x, y), w)| *x += y * w)
                    });
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads[a.0], &g.shape, |d| d.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y * s));
                }
                Op::Silu(a) => {
                    let av = &self.value(*a).data;
                    accumulate(&mut grads[a.0], &g.shape, |d| {
                        d.iter_mut().zip(&g.data).zip(av).for_each(|((x, y), v)| {
                            let s = sigmoid(*v);
                            *x += y * s * (1.0 + v * (1.0 - s));
                        })
                    });
                }
                Op::Concat(parts) => {
                    let total = g.shape[1];
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = (self.shape(*p)[0], self.shape(*p)[1]);
                        accumulate(&mut grads[p.0], &[r, c], |d| {
                            for i in 0..r {
                                d[i * c..(i + 1) * c]
                                    .iter_mut()
                                    .zip(&g.data[i * total + off..i * total + off + c])
                                    .for_each(|(x, y)| *x += y);
                            }
                        });
                        off += c;
                    }
                }
                Op::Unfold3 { x, horizon } => {
                    let (rows, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    accumulate(&mut grads[x.0], &[rows, c], |d| {
                        for r in 0..rows {
                            let t = r % horizon;
                            for (slot, off) in [-1isize, 0, 1].iter().enumerate() {
                                let tt = t as isize + off;
                                if tt >= 0 && (tt as usize) < *horizon {
                                    let sr = (r as isize + off) as usize;
                                    let src = &g.data[r * 3 * c + slot * c..r * 3 * c + (slot + 1) * c];
                                    d[sr * c..(sr + 1) * c].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                                }
                            }
                        }
                    });
                }
                Op::RepeatRows { x, times } => {
                    let (b, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    accumulate(&mut grads[x.0], &[b, c], |d| {
                        for (r, row) in g.data.chunks(c).enumerate() {
                            let i = r / times;
                            d[i * c..(i + 1) * c].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    });
                }
                Op::TileRows(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads[x.0], self.shape(*x), |d| {
                        for block in g.data.chunks(n) {
                            d.iter_mut().zip(block).for_each(|(a, b)| *a += b);
                        }
                    });
                }
                Op::Attention { q, k, v, horizon, probs } => {
                    let h = *horizon;
                    let (rows, dd) = (self.shape(*q)[0], self.shape(*q)[1]);
                    let scale = 1.0 / (dd as f64).sqrt();
                    let (qd, kd, vd) = (&self.value(*q).data, &self.value(*k).data, &self.value(*v).data);
                    let mut dq = vec![0.0; rows * dd];
                    let mut dk = vec![0.0; rows * dd];
                    let mut dv = vec![0.0; rows * dd];
                    let mut ds = vec![0.0; h];
                    for b in 0..rows / h {
                        let base = b * h;
                        for i in 0..h {
                            let p = &probs[(base + i) * h..(base + i + 1) * h];
                            let go = &g.data[(base + i) * dd..(base + i + 1) * dd];
                            // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                            for j in 0..h {
                                let vj = &vd[(base + j) * dd..(base + j + 1) * dd];
                                ds[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dv[(base + j) * dd..(base + j + 1) * dd].iter_mut().zip(go).for_each(|(a, b)| *a += p[j] * b);
                            }
                            let dot: f64 = ds.iter().zip(p).map(|(a, b)| a * b).sum();
                            for j in 0..h {
                                let s = p[j] * (ds[j] - dot) * scale;
                                let kj = &kd[(base + j) * dd..(base + j + 1) * dd];
                                let qi = &qd[(base + i) * dd..(base + i + 1) * dd];
                                dq[(base + i) * dd..(base + i + 1) * dd].iter_mut().zip(kj).for_each(|(a, b)| *a += s * b);
                                dk[(base + j) * dd..(base + j + 1) * dd].iter_mut().zip(qi).for_each(|(a, b)| *a += s * b);
                            }
                        }
                    }
                    for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
                        accumulate(&mut grads[var.0], &[rows, dd], |d| d.iter_mut().zip(&delta).for_each(|(a, b)| *a += b));
                    }
                }
                Op::MeanSquare(a) => {
                    let av = &self.value(*a).data;
                    let s = 2.0 * g.data[0] / av.len() as f64;
                    accumulate(&mut grads[a.0], self.shape(*a), |d| d.iter_mut().zip(av).for_each(|(x, v)| *x += s * v));
                }
                Op::SumSquare(a) => {
                    let av = &self.value(*a).data;
                    let s = 2.0 * g.data[0];
                    accumulate(&mut grads[a.0], self.shape(*a), |d| d.iter_mut().zip(av).for_each(|(x, v)| *x += s * v));
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Adjoints { grads })
    }
}
