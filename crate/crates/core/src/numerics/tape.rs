//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order and the backward sweep visits every node once. Nodes
//! that do not depend on any gradient-tracking leaf are skipped entirely.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::params::{ParamStore, ParamVars};
use super::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    GatherSum(Var, Vec<Vec<usize>>),
    Col(Var, usize),
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    NormalizeCols(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Arc<Vec<f64>>,
    op: Op,
    tracked: bool,
}

/// Single-writer computation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for every parameter in `store` (zeros for unused ones).
    pub fn params(&self, store: &ParamStore, vars: &ParamVars) -> Vec<Vec<f64>> {
        (0..store.len())
            .map(|i| match vars.get(i).and_then(|v| self.get(v)) {
                Some(g) => g.to_vec(),
                None => vec![0.0; store.param(i).value.len()],
            })
            .collect()
    }
}

fn matmul_raw(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mx).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            rows,
            cols,
            value: Arc::new(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf_shared(&mut self, rows: usize, cols: usize, value: Arc<Vec<f64>>, tracked: bool) -> Var {
        assert_eq!(rows * cols, value.len(), "leaf shape mismatch");
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradient-tracking leaf.
    pub fn variable(&mut self, t: &DenseTensor) -> Var {
        self.leaf_shared(t.rows(), t.cols(), t.shared().clone(), true)
    }

    pub fn variable_shared(&mut self, rows: usize, cols: usize, value: Arc<Vec<f64>>) -> Var {
        self.leaf_shared(rows, cols, value, true)
    }

    /// Leaf that never receives gradient (stop-gradient / data input).
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        self.leaf_shared(rows, cols, Arc::new(value), false)
    }

    pub fn constant_tensor(&mut self, t: &DenseTensor) -> Var {
        self.leaf_shared(t.rows(), t.cols(), t.shared().clone(), false)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(1, 1, vec![x])
    }

    /// Binds every parameter of `store` as a tracking leaf.
    pub fn bind(&mut self, store: &ParamStore) -> ParamVars {
        self.bind_with(store, |_| None)
    }

    /// Like [`Tape::bind`], but `substitute` may replace a parameter's
    /// forward value (used for simulated low-precision weights). Gradients
    /// still flow to the parameter's position.
    pub fn bind_with(
        &mut self,
        store: &ParamStore,
        mut substitute: impl FnMut(usize) -> Option<Arc<Vec<f64>>>,
    ) -> ParamVars {
        let vars = (0..store.len())
            .map(|i| {
                let p = store.param(i);
                let value = substitute(i).unwrap_or_else(|| p.value.shared().clone());
                self.leaf_shared(p.value.rows(), p.value.cols(), value, p.trainable)
            })
            .collect();
        ParamVars::new(vars)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> DenseTensor {
        let n = &self.nodes[v.0];
        DenseTensor::from_shared(vec![n.rows, n.cols], n.value.clone())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(r, c, v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(r, c, v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(r, c, v, Op::Mul(a, b), &[a, b])
    }

    /// `a` (r×c) plus row vector `b` (1×c) broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (1, c), "add_row: bias shape");
        let bv = self.value(b);
        let v = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        self.push(r, c, v, Op::AddRow(a, b), &[a, b])
    }

    /// `a` (r×c) times row vector `b` (1×c), elementwise per row.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (1, c), "mul_row: shape");
        let bv = self.value(b);
        let v = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x * y))
            .collect();
        self.push(r, c, v, Op::MulRow(a, b), &[a, b])
    }

    /// `a` (r×c) with row i scaled by `b[i]` (`b` is r×1).
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, 1), "mul_col: shape");
        let bv = self.value(b);
        let v = self
            .value(a)
            .chunks(c)
            .zip(bv)
            .flat_map(|(row, &s)| row.iter().map(move |x| x * s))
            .collect();
        self.push(r, c, v, Op::MulCol(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x * s).collect();
        self.push(r, c, v, Op::Scale(a, s), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let v = matmul_raw(self.value(a), n, k, self.value(b), m);
        self.push(n, m, v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = transpose_raw(self.value(a), r, c);
        self.push(c, r, v, Op::Transpose(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(r, c, v, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(r, c, v, Op::Exp(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x * x).collect();
        self.push(r, c, v, Op::Square(a), &[a])
    }

    /// Row-wise softmax. Entries where `mask` is false get probability 0;
    /// every row must keep at least one entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let out = &mut v[i * c..(i + 1) * c];
            match mask {
                None => softmax_row(row, out),
                Some(m) => {
                    let m = &m[i * c..(i + 1) * c];
                    let mx = row
                        .iter()
                        .zip(m)
                        .filter(|(_, &k)| k)
                        .map(|(&x, _)| x)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for j in 0..c {
                        if m[j] {
                            out[j] = (row[j] - mx).exp();
                            s += out[j];
                        }
                    }
                    for o in out.iter_mut() {
                        *o /= s;
                    }
                }
            }
        }
        self.push(r, c, v, Op::Softmax(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                v[i * c + j] = row[j] - lse;
            }
        }
        self.push(r, c, v, Op::LogSoftmax(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (r, c) = self.shape(a);
        let x = self.value(a);
        let mut v = vec![0.0; r * c];
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + EPS).sqrt();
            for j in 0..c {
                v[i * c + j] = (row[j] - mean) * s;
            }
            rstd.push(s);
        }
        self.push(r, c, v, Op::LayerNorm(a, rstd), &[a])
    }

    /// Rows `idx` of `table`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let (r, c) = self.shape(table);
        let t = self.value(table);
        let mut v = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather: row {i} out of {r}");
            v.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        self.push(idx.len(), c, v, Op::Gather(table, idx.to_vec()), &[table])
    }

    /// Row i of the output is the sum of `table` rows listed in `groups[i]`.
    pub fn gather_sum(&mut self, table: Var, groups: Vec<Vec<usize>>) -> Var {
        let (r, c) = self.shape(table);
        let t = self.value(table);
        let mut v = vec![0.0; groups.len() * c];
        for (g, rows) in groups.iter().enumerate() {
            for &i in rows {
                assert!(i < r, "gather_sum: row {i} out of {r}");
                for j in 0..c {
                    v[g * c + j] += t[i * c + j];
                }
            }
        }
        let n = groups.len();
        self.push(n, c, v, Op::GatherSum(table, groups), &[table])
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.gather(a, &[i])
    }

    /// Column `j` as an r×1 matrix.
    pub fn col(&mut self, a: Var, j: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(j < c);
        let v = self.value(a).chunks(c).map(|row| row[j]).collect();
        self.push(r, 1, v, Op::Col(a, j), &[a])
    }

    /// Selected entries as an n×1 column.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Var {
        let (_, c) = self.shape(a);
        let x = self.value(a);
        let v = at.iter().map(|&(i, j)| x[i * c + j]).collect();
        self.push(at.len(), 1, v, Op::Pick(a, at.to_vec()), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.sum(sq)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, r, "concat_cols: row mismatch");
                self.shape(p).1
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut v = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                v.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        self.push(r, total, v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.shape(parts[0]).1;
        let mut v = Vec::new();
        let mut r = 0;
        for &p in parts {
            assert_eq!(self.shape(p).1, c, "concat_rows: col mismatch");
            v.extend_from_slice(self.value(p));
            r += self.shape(p).0;
        }
        self.push(r, c, v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Scales every column to unit L2 norm.
    pub fn normalize_cols(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let x = self.value(a);
        let mut norms = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                norms[j] += x[i * c + j] * x[i * c + j];
            }
        }
        for n in norms.iter_mut() {
            *n = n.sqrt();
            if *n <= f64::MIN_POSITIVE || !n.is_finite() {
                return Err(Error::DegenerateProjection);
            }
        }
        let mut v = x.to_vec();
        for i in 0..r {
            for j in 0..c {
                v[i * c + j] /= norms[j];
            }
        }
        Ok(self.push(r, c, v, Op::NormalizeCols(a, norms), &[a]))
    }

    /// Reverse sweep from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, 1.0, g));
                self.acc(grads, *b, |gb| axpy(gb, 1.0, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, 1.0, g));
                self.acc(grads, *b, |gb| axpy(gb, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * bv[k];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for k in 0..gb.len() {
                        gb[k] += g[k] * av[k];
                    }
                });
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, 1.0, g));
                self.acc(grads, *b, |gb| {
                    for row in g.chunks(c) {
                        axpy(gb, 1.0, row);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[i * c + j] * bv[j];
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j] * av[i * c + j];
                        }
                    }
                });
            }
            Op::MulCol(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[i * c + j] * bv[i];
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..r {
                        for j in 0..c {
                            gb[i] += g[i * c + j] * av[i * c + j];
                        }
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |ga| axpy(ga, *s, g)),
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = c;
                if self.nodes[a.0].tracked {
                    let bt = transpose_raw(self.value(*b), k, m);
                    let d = matmul_raw(g, n, m, &bt, k);
                    self.acc(grads, *a, |ga| axpy(ga, 1.0, &d));
                }
                if self.nodes[b.0].tracked {
                    let at = transpose_raw(self.value(*a), n, k);
                    let d = matmul_raw(&at, k, n, g, m);
                    self.acc(grads, *b, |gb| axpy(gb, 1.0, &d));
                }
            }
            Op::Transpose(a) => {
                let d = transpose_raw(g, r, c);
                self.acc(grads, *a, |ga| axpy(ga, 1.0, &d));
            }
            Op::Tanh(a) => self.acc(grads, *a, |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Op::Exp(a) => self.acc(grads, *a, |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * y[k];
                }
            }),
            Op::Square(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for k in 0..ga.len() {
                        ga[k] += 2.0 * av[k] * g[k];
                    }
                })
            }
            Op::Softmax(a) => self.acc(grads, *a, |ga| {
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        ga[i * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }),
            Op::LogSoftmax(a) => self.acc(grads, *a, |ga| {
                for i in 0..r {
                    let gs: f64 = g[i * c..(i + 1) * c].iter().sum();
                    for j in 0..c {
                        ga[i * c + j] += g[i * c + j] - y[i * c + j].exp() * gs;
                    }
                }
            }),
            Op::LayerNorm(a, rstd) => self.acc(grads, *a, |ga| {
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for j in 0..c {
                        ga[i * c + j] += rstd[i] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            }),
            Op::Gather(t, idx) => self.acc(grads, *t, |gt| {
                for (k, &i) in idx.iter().enumerate() {
                    axpy(&mut gt[i * c..(i + 1) * c], 1.0, &g[k * c..(k + 1) * c]);
                }
            }),
            Op::GatherSum(t, groups) => self.acc(grads, *t, |gt| {
                for (k, rows) in groups.iter().enumerate() {
                    for &i in rows {
                        axpy(&mut gt[i * c..(i + 1) * c], 1.0, &g[k * c..(k + 1) * c]);
                    }
                }
            }),
            Op::Col(a, j) => {
                let ac = self.shape(*a).1;
                self.acc(grads, *a, |ga| {
                    for i in 0..r {
                        ga[i * ac + j] += g[i];
                    }
                })
            }
            Op::Pick(a, at) => {
                let ac = self.shape(*a).1;
                self.acc(grads, *a, |ga| {
                    for (k, &(i, j)) in at.iter().enumerate() {
                        ga[i * ac + j] += g[k];
                    }
                })
            }
            Op::Sum(a) => self.acc(grads, *a, |ga| {
                for v in ga.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    self.acc(grads, p, |gp| {
                        for i in 0..r {
                            axpy(&mut gp[i * w..(i + 1) * w], 1.0, &g[i * c + off..i * c + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, |gp| axpy(gp, 1.0, &g[off..off + n]));
                    off += n;
                }
            }
            Op::NormalizeCols(a, norms) => self.acc(grads, *a, |ga| {
                for j in 0..c {
                    let mut dot = 0.0;
                    for i in 0..r {
                        dot += y[i * c + j] * g[i * c + j];
                    }
                    for i in 0..r {
                        ga[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / norms[j];
                    }
                }
            }),
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.tracked {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(g);
    }
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape, r: usize, c: usize, v: &[f64]) -> Var {
        t.variable(&DenseTensor::matrix(r, c, v.to_vec()).unwrap())
    }

    #[test]
    fn matmul_gradient_by_hand() {
        let mut t = Tape::new();
        let a = leaf(&mut t, 1, 2, &[1.0, 2.0]);
        let b = leaf(&mut t, 2, 1, &[3.0, 4.0]);
        let y = t.matmul(a, b);
        assert_eq!(t.scalar(y), 11.0);
        let g = t.backward(y);
        assert_eq!(g.get(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(g.get(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let mut t = Tape::new();
        let a = leaf(&mut t, 1, 1, &[2.0]);
        let unused = leaf(&mut t, 1, 1, &[5.0]);
        let y = t.square(a);
        let g = t.backward(y);
        assert_eq!(g.get(a).unwrap(), &[4.0]);
        assert!(g.get(unused).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        // y = x * x via mul, dy/dx = 2x.
        let mut t = Tape::new();
        let x = leaf(&mut t, 1, 1, &[3.0]);
        let y = t.mul(x, x);
        assert_eq!(t.backward(y).get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constants_are_not_tracked() {
        let mut t = Tape::new();
        let c = t.constant(1, 1, vec![2.0]);
        let x = leaf(&mut t, 1, 1, &[3.0]);
        let y = t.mul(c, x);
        let g = t.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut t = Tape::new();
        let x = leaf(&mut t, 1, 3, &[1.0, 5.0, 1.0]);
        let y = t.softmax_rows(x, Some(&[true, false, true]));
        assert_eq!(t.value(y), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn normalize_cols_rejects_zero_column() {
        let mut t = Tape::new();
        let x = leaf(&mut t, 2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert!(matches!(t.normalize_cols(x), Err(Error::DegenerateProjection)));
    }
}
