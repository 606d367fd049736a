//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation eagerly (values are computed on
//! insertion) and [`Graph::backward`] walks the tape in reverse. Nodes that
//! do not depend on a parameter or a differentiable input are never visited
//! by the backward pass.

use std::collections::HashMap;

use crate::params::{ParamId, Params};
use crate::scalar::Real;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        rstd: Vec<T>,
    },
    SoftmaxRows(Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ExpandBias {
        src: Var,
        head: usize,
        channels: usize,
        steps: usize,
        cls: bool,
    },
    L2NormalizeRows(Var, Vec<T>),
    RowNorms(Var),
    SumSquares(Var),
    Sum(Var),
    WrapPhase(Var),
    CrossEntropy(Var, Vec<usize>),
    StopGrad,
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    tracked: bool,
}

/// GELU, tanh approximation.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044_715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044_715);
    let half = T::of(0.5);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// Wraps an angle into (−π, π].
pub fn wrap_phase<T: Real>(x: T) -> T {
    let two_pi = T::of(2.0) * T::PI();
    let mut y = x - two_pi * (x / two_pi).round();
    if y <= -T::PI() {
        y += two_pi;
    } else if y > T::PI() {
        y -= two_pi;
    }
    y
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn any_tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.tracked(v))
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// A leaf whose gradient is never needed.
    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A leaf whose gradient is recorded (for input-sensitivity checks).
    pub fn input(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// The node for parameter `id`; repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &Params<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &Params<T>, name: &str) -> Var {
        let id = store
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(store, id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let t = self.any_tracked(&[a, b]);
        self.push(v, Op::MatMul(a, b), t)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let t = self.any_tracked(&[a, b]);
        self.push(v, Op::MatMulT(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let t = self.any_tracked(&[a, b]);
        self.push(v, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let t = self.any_tracked(&[a, b]);
        self.push(v, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let t = self.any_tracked(&[a, b]);
        self.push(v, Op::Mul(a, b), t)
    }

    /// Adds the `1 × n` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let rv = self.value(r);
        assert_eq!(rv.rows(), 1, "add_row expects a single row");
        assert_eq!(rv.cols(), self.value(a).cols(), "add_row width");
        let mut v = self.value(a).clone();
        let cols = v.cols();
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(&rv.data()[..cols]) {
                *x += b;
            }
        }
        let t = self.any_tracked(&[a, r]);
        self.push(v, Op::AddRow(a, r), t)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let t = self.tracked(a);
        self.push(v, Op::Scale(a, s), t)
    }

    /// `x·W + b` with `W: in × out`, `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let t = self.tracked(a);
        self.push(v, Op::Gelu(a), t)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1 × n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = T::of_usize(cols);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            for (o, &v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for i in 0..rows {
            for ((o, &gj), &bj) in out.row_mut(i).iter_mut().zip(g).zip(b) {
                *o = *o * gj + bj;
            }
        }
        let t = self.any_tracked(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            t,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        let t = self.tracked(a);
        self.push(v, Op::SoftmaxRows(a), t)
    }

    /// Rows of `a` selected by `idx` (repeats allowed).
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).gather_rows(&idx);
        let t = self.tracked(a);
        self.push(v, Op::Gather(a, idx), t)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width");
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let t = self.any_tracked(&parts);
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols(), "slice_cols out of range");
        let v = Matrix::from_fn(m.rows(), len, |r, c| m.get(r, start + c));
        let t = self.tracked(a);
        self.push(v, Op::SliceCols(a, start), t)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols height");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        let t = self.any_tracked(&parts);
        self.push(out, Op::ConcatCols(parts), t)
    }

    /// Tiles column `head` of a `C² × H` pairwise table over the time axis.
    /// Token `(e, t)` sits at index `cls + e·steps + t`; with `cls` the first
    /// row and column are zero.
    pub fn expand_bias(
        &mut self,
        src: Var,
        head: usize,
        channels: usize,
        steps: usize,
        cls: bool,
    ) -> Var {
        let s = self.value(src);
        assert_eq!(s.rows(), channels * channels, "bias table rows");
        let off = usize::from(cls);
        let m = off + channels * steps;
        let mut out = Matrix::zeros(m, m);
        for e1 in 0..channels {
            for e2 in 0..channels {
                let b = s.get(e1 * channels + e2, head);
                for t1 in 0..steps {
                    let row = out.row_mut(off + e1 * steps + t1);
                    for t2 in 0..steps {
                        row[off + e2 * steps + t2] = b;
                    }
                }
            }
        }
        let t = self.tracked(src);
        self.push(
            out,
            Op::ExpandBias {
                src,
                head,
                channels,
                steps,
                cls,
            },
            t,
        )
    }

    /// Each row divided by its Euclidean norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let n = m.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
            if n > T::zero() {
                for v in out.row_mut(i) {
                    *v /= n;
                }
            }
            norms.push(n);
        }
        let t = self.tracked(a);
        self.push(out, Op::L2NormalizeRows(a, norms), t)
    }

    /// `rows × 1` Euclidean norms.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::from_fn(m.rows(), 1, |r, _| {
            m.row(r).iter().map(|&v| v * v).sum::<T>().sqrt()
        });
        let t = self.tracked(a);
        self.push(v, Op::RowNorms(a), t)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&v| v * v).sum::<T>();
        let t = self.tracked(a);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::SumSquares(a), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let t = self.tracked(a);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum(a), t)
    }

    /// Sum of scalar (`1 × 1`) nodes.
    pub fn add_scalars(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Elementwise wrap into (−π, π]; the gradient passes through unchanged.
    pub fn wrap_phase(&mut self, a: Var) -> Var {
        let v = self.value(a).map(wrap_phase);
        let t = self.tracked(a);
        self.push(v, Op::WrapPhase(a), t)
    }

    /// Summed softmax cross-entropy of each logit row against its label.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let m = self.value(logits);
        assert_eq!(m.rows(), labels.len(), "one label per row");
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = m.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            total += lse - row[y];
        }
        let t = self.tracked(logits);
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::CrossEntropy(logits, labels),
            t,
        )
    }

    /// Same value, no gradient flows back through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad, false)
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    /// Gradients of the scalar node `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, d: Matrix<T>| {
            if !self.tracked(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if self.tracked(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.tracked(*b) {
                    acc(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.tracked(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                if self.tracked(*r) {
                    acc(*r, column_sums(g));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * *s)),
            Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |d, x| d * gelu_grad(x))),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                if self.tracked(*beta) {
                    acc(*beta, column_sums(g));
                }
                if self.tracked(*gamma) {
                    acc(*gamma, column_sums(&g.zip_map(xhat, |d, h| d * h)));
                }
                if self.tracked(*x) {
                    let gam = self.value(*gamma).data();
                    let (rows, cols) = g.shape();
                    let n = T::of_usize(cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let dh: Vec<T> = gr.iter().zip(gam).map(|(&d, &gm)| d * gm).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((o, &d), &h) in dx.row_mut(i).iter_mut().zip(&dh).zip(hr) {
                            *o = rstd[i] * (d - mean_dh - h * mean_dhh);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum::<T>();
                    for ((o, &p), &d) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = p * (d - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::Gather(a, idx) => {
                let src = self.value(*a);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &d) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += d;
                    }
                }
                acc(*a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.tracked(p) {
                        let idx: Vec<usize> = (off..off + rows).collect();
                        acc(p, g.gather_rows(&idx));
                    }
                    off += rows;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.tracked(p) {
                        acc(p, Matrix::from_fn(g.rows(), cols, |r, c| g.get(r, off + c)));
                    }
                    off += cols;
                }
            }
            Op::ExpandBias {
                src,
                head,
                channels,
                steps,
                cls,
            } => {
                let s = self.value(*src);
                let mut dx = Matrix::zeros(s.rows(), s.cols());
                let off = usize::from(*cls);
                for e1 in 0..*channels {
                    for e2 in 0..*channels {
                        let mut total = T::zero();
                        for t1 in 0..*steps {
                            let row = g.row(off + e1 * steps + t1);
                            for t2 in 0..*steps {
                                total += row[off + e2 * steps + t2];
                            }
                        }
                        dx.set(e1 * channels + e2, *head, total);
                    }
                }
                acc(*src, dx);
            }
            Op::L2NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    if norms[i] == T::zero() {
                        continue;
                    }
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for ((o, &p), &d) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = (d - p * dot) / norms[i];
                    }
                }
                acc(*a, dx);
            }
            Op::RowNorms(a) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let n = node.value.get(i, 0);
                    if n == T::zero() {
                        continue;
                    }
                    let d = g.get(i, 0) / n;
                    for (o, &v) in dx.row_mut(i).iter_mut().zip(x.row(i)) {
                        *o = d * v;
                    }
                }
                acc(*a, dx);
            }
            Op::SumSquares(a) => {
                let d = g.get(0, 0) * T::of(2.0);
                acc(*a, self.value(*a).map(|v| v * d));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                acc(*a, Matrix::filled(x.rows(), x.cols(), g.get(0, 0)));
            }
            Op::WrapPhase(a) => acc(*a, g.clone()),
            Op::CrossEntropy(logits, labels) => {
                let d = g.get(0, 0);
                let mut dx = self.value(*logits).clone();
                for (i, &y) in labels.iter().enumerate() {
                    let row = dx.row_mut(i);
                    softmax_in_place(row);
                    row[y] -= T::one();
                    for v in row.iter_mut() {
                        *v *= d;
                    }
                }
                acc(*logits, dx);
            }
        }
    }
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn column_sums<T: Real>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter in `store`, zero for parameters the loss
    /// does not touch.
    pub fn param_grads(&self, graph: &Graph<T>, store: &Params<T>) -> Vec<Matrix<T>> {
        let mut out = store.zeros_like();
        for (&id, &v) in &graph.params {
            if let Some(g) = self.wrt(v) {
                out[id.0] = g.clone();
            }
        }
        out
    }
}
