//! Reverse-mode differentiation over a small set of matrix ops.
//!
//! A [`Graph`] records every op eagerly with its forward value; calling
//! [`Graph::backward`] on a `1 x 1` node walks the tape in reverse and returns
//! gradients for every parameter leaf registered through [`Graph::param`].

use crate::error::{Error, Result};
use crate::imaging::resample::{apply_separable, apply_separable_adjoint, AxisWeights};
use crate::nn::params::{ParamId, ParamStore};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 2-D transposed convolution over a square map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTGeom {
    pub in_side: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTGeom {
    pub fn out_side(&self) -> usize {
        (self.in_side - 1) * self.stride + self.kernel - 2 * self.pad
    }
}

enum Op<T> {
    Input,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, rstd: Vec<T> },
    Gelu(Var),
    Softmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Scatter { visible: Var, token: Var, visible_idx: Vec<usize>, masked_idx: Vec<usize> },
    ConvT { x: Var, w: Var, b: Var, geom: ConvTGeom },
    Depthwise { x: Var, w: Var, b: Var, side: usize, kernel: usize },
    Resample { x: Var, wy: AxisWeights, wx: AxisWeights },
    Mse { x: Var, target: Tensor<T>, row_weight: Option<Vec<T>>, denom: T },
    Mae { x: Var, target: Tensor<T> },
    WeightedSum(Vec<(Var, T)>),
    SumAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients for each parameter of a store, in store order.
pub struct ParamGrads<T> {
    pub grads: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    /// Concatenated in store order, widened to `f64`.
    pub fn flatten(&self) -> Vec<f64> {
        self.grads
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.as_f64()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let k: T = c(0.797_884_560_802_865_4);
    let a: T = c(0.044_715);
    let half: T = c(0.5);
    let three: T = c(3.0);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * a * x * x);
    (y, dy)
}

pub fn gelu<T: Scalar>(x: T) -> T {
    gelu_parts(x).0
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Parameter leaf; registered once per graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.param_vars.len() < store.len() {
            self.param_vars.resize(store.len(), None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// `x @ w (+ b)`, with `w` shaped `in x out` and `b` a `1 x out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut out = self.value(x).matmul(self.value(w));
        if let Some(b) = b {
            let bias = self.value(b).row(0).to_vec();
            for r in 0..out.rows() {
                for (o, &bv) in out.row_mut(r).iter_mut().zip(&bias) {
                    *o += bv;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a @ b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Broadcasts the `1 x n` row `b` over every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b).row(0).to_vec();
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::AddRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = T::from_usize_lossy(cols);
        let eps: T = c(eps);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            for (h, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, &gv), &bv) in out.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *o = *o * gv + bv;
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.rows(), len, |r, cc| xv.get(r, start + cc));
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::from_vec(len, cols, data).expect("slice shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceRows { x, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(self.value(p).cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let out = Tensor::from_vec(rows, cols, data).expect("concat shape");
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let out = crate::patching::gather_rows(self.value(x), idx);
        let rg = self.rg(&[x]);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, rg)
    }

    /// Full-length sequence: `visible` rows at `visible_idx`, the `1 x d`
    /// `token` row at `masked_idx`.
    pub fn scatter(&mut self, visible: Var, token: Var, visible_idx: &[usize], masked_idx: &[usize]) -> Var {
        let n = visible_idx.len() + masked_idx.len();
        let vv = self.value(visible);
        let tv = self.value(token).row(0);
        let mut out = Tensor::zeros(n, vv.cols());
        for &m in masked_idx {
            out.row_mut(m).copy_from_slice(tv);
        }
        for (r, &i) in visible_idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(vv.row(r));
        }
        let rg = self.rg(&[visible, token]);
        self.push(
            out,
            Op::Scatter {
                visible,
                token,
                visible_idx: visible_idx.to_vec(),
                masked_idx: masked_idx.to_vec(),
            },
            rg,
        )
    }

    /// Transposed convolution on an `(s*s) x c_in` map. `w` is
    /// `c_in x (k*k*c_out)` laid out `(ky, kx, c_out)`, `b` is `1 x c_out`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Var, geom: ConvTGeom) -> Result<Var> {
        let out = conv_transpose_forward(self.value(x), self.value(w), self.value(b), geom)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::ConvT { x, w, b, geom }, rg))
    }

    /// Depthwise `k x k` convolution, stride 1, zero padding `k / 2`.
    /// `w` is `(k*k) x c`, `b` is `1 x c`.
    pub fn depthwise(&mut self, x: Var, w: Var, b: Var, side: usize, kernel: usize) -> Result<Var> {
        let out = depthwise_forward(self.value(x), self.value(w), self.value(b), side, kernel)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Depthwise { x, w, b, side, kernel }, rg))
    }

    /// Separable linear resampling of an `(h*w) x c` map.
    pub fn resample(&mut self, x: Var, wy: AxisWeights, wx: AxisWeights) -> Var {
        let (h, w) = (wy.in_len(), wx.in_len());
        let out = apply_separable(self.value(x), h, w, &wy, &wx);
        let rg = self.rg(&[x]);
        self.push(out, Op::Resample { x, wy, wx }, rg)
    }

    /// Mean squared error against a constant target. With `row_weight`, only
    /// rows with nonzero weight contribute and the mean runs over them.
    pub fn mse(&mut self, x: Var, target: &Tensor<T>, row_weight: Option<Vec<T>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::Shape(format!("mse: {:?} vs {:?}", xv.shape(), target.shape())));
        }
        let cols = T::from_usize_lossy(xv.cols());
        let (sum, denom) = match &row_weight {
            None => {
                let s = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<T>();
                (s, T::from_usize_lossy(xv.len()))
            }
            Some(wts) => {
                let mut s = T::zero();
                let mut d = T::zero();
                for (r, &wt) in wts.iter().enumerate() {
                    if wt == T::zero() {
                        continue;
                    }
                    d += wt * cols;
                    for (&a, &b) in xv.row(r).iter().zip(target.row(r)) {
                        s += wt * (a - b) * (a - b);
                    }
                }
                (s, d)
            }
        };
        if denom == T::zero() {
            return Err(Error::InvalidArgument("mse over an empty selection".into()));
        }
        let out = Tensor::filled(1, 1, sum / denom);
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Mse {
                x,
                target: target.clone(),
                row_weight,
                denom,
            },
            rg,
        ))
    }

    /// Mean absolute error against a constant target.
    pub fn mae(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::Shape(format!("mae: {:?} vs {:?}", xv.shape(), target.shape())));
        }
        let s = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<T>();
        let out = Tensor::filled(1, 1, s / T::from_usize_lossy(xv.len()));
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Mae {
                x,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// `sum_i w_i * s_i` over `1 x 1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum::<T>();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push(Tensor::filled(1, 1, total), Op::WeightedSum(terms.to_vec()), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::filled(1, 1, s), Op::SumAll(x), rg)
    }

    /// Gradient of the scalar `loss` with respect to every parameter in
    /// `store`; unused parameters get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> ParamGrads<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
            }
        }

        let grads = (0..store.len())
            .map(|p| {
                self.param_vars
                    .get(p)
                    .copied()
                    .flatten()
                    .and_then(|v| grads[v.0].clone())
                    .unwrap_or_else(|| {
                        let (r, cc) = store.get(ParamId::from_index(p)).shape();
                        Tensor::zeros(r, cc)
                    })
            })
            .collect();
        ParamGrads { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Input | Op::Param => {}
            Op::Linear { x, w, b } => {
                if needs(*x) {
                    acc(*x, g.matmul_t(self.value(*w)));
                }
                if needs(*w) {
                    acc(*w, self.value(*x).t_matmul(g));
                }
                if let Some(b) = b {
                    if needs(*b) {
                        acc(*b, column_sums(g));
                    }
                }
            }
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if needs(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a b^T: da = g b, db = g^T a
                if needs(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if needs(*b) {
                    acc(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if needs(*b) {
                    acc(*b, column_sums(g));
                }
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale(*s);
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).row(0);
                let (rows, cols) = g.shape();
                if needs(*gamma) {
                    let mut dg = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for ((d, &gv), &h) in dg.row_mut(0).iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *d += gv * h;
                        }
                    }
                    acc(*gamma, dg);
                }
                if needs(*beta) {
                    acc(*beta, column_sums(g));
                }
                if needs(*x) {
                    let n = T::from_usize_lossy(cols);
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for (j, d) in dxhat.iter_mut().enumerate() {
                            *d = g.get(r, j) * gam[j];
                            m1 += *d;
                            m2 += *d * xhat.get(r, j);
                        }
                        m1 /= n;
                        m2 /= n;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (dxhat[j] - m1 - xhat.get(r, j) * m2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut d = g.clone();
                for (o, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    *o *= gelu_parts(v).1;
                }
                acc(*x, d);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*x, d);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.value(*x).shape();
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if needs(p) {
                        let d = Tensor::from_fn(g.rows(), pc, |r, cc| g.get(r, off + cc));
                        acc(p, d);
                    }
                    off += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.value(*x).shape();
                let mut d = Tensor::zeros(rows, cols);
                d.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                acc(*x, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).shape();
                    if needs(p) {
                        let d = Tensor::from_vec(pr, pc, g.data()[off * pc..(off + pr) * pc].to_vec())
                            .expect("concat rows grad");
                        acc(p, d);
                    }
                    off += pr;
                }
            }
            Op::GatherRows { x, idx } => {
                let (rows, cols) = self.value(*x).shape();
                let mut d = Tensor::zeros(rows, cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &gv) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                acc(*x, d);
            }
            Op::Scatter {
                visible,
                token,
                visible_idx,
                masked_idx,
            } => {
                if needs(*visible) {
                    acc(*visible, crate::patching::gather_rows(g, visible_idx));
                }
                if needs(*token) {
                    let mut d = Tensor::zeros(1, g.cols());
                    for &m in masked_idx {
                        for (o, &gv) in d.row_mut(0).iter_mut().zip(g.row(m)) {
                            *o += gv;
                        }
                    }
                    acc(*token, d);
                }
            }
            Op::ConvT { x, w, b, geom } => {
                let (dx, dw) = conv_transpose_backward(self.value(*x), self.value(*w), g, *geom, needs(*x), needs(*w));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if needs(*b) {
                    acc(*b, column_sums(g));
                }
            }
            Op::Depthwise { x, w, b, side, kernel } => {
                let (dx, dw) = depthwise_backward(self.value(*x), self.value(*w), g, *side, *kernel);
                if needs(*x) {
                    acc(*x, dx);
                }
                if needs(*w) {
                    acc(*w, dw);
                }
                if needs(*b) {
                    acc(*b, column_sums(g));
                }
            }
            Op::Resample { x, wy, wx } => {
                acc(*x, apply_separable_adjoint(g, wy, wx));
            }
            Op::Mse {
                x,
                target,
                row_weight,
                denom,
            } => {
                let xv = self.value(*x);
                let scale = c::<T>(2.0) * g.data()[0] / *denom;
                let mut d = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let wt = row_weight.as_ref().map_or(T::one(), |w| w[r]);
                    if wt == T::zero() {
                        continue;
                    }
                    for ((o, &a), &t) in d.row_mut(r).iter_mut().zip(xv.row(r)).zip(target.row(r)) {
                        *o = scale * wt * (a - t);
                    }
                }
                acc(*x, d);
            }
            Op::Mae { x, target } => {
                let xv = self.value(*x);
                let scale = g.data()[0] / T::from_usize_lossy(xv.len());
                let mut d = Tensor::zeros(xv.rows(), xv.cols());
                for ((o, &a), &t) in d.data_mut().iter_mut().zip(xv.data()).zip(target.data()) {
                    let diff = a - t;
                    *o = if diff > T::zero() {
                        scale
                    } else if diff < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    };
                }
                acc(*x, d);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, Tensor::filled(1, 1, w * g.data()[0]));
                }
            }
            Op::SumAll(x) => {
                let (r, cc) = self.value(*x).shape();
                acc(*x, Tensor::filled(r, cc, g.data()[0]));
            }
        }
    }
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Output pixel for input pixel `i` and kernel tap `k` along one axis, if it
/// lands inside the output.
#[inline]
fn tap_target(i: usize, k: usize, geom: &ConvTGeom, out_side: usize) -> Option<usize> {
    let o = (i * geom.stride + k).checked_sub(geom.pad)?;
    (o < out_side).then_some(o)
}

pub fn conv_transpose_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, geom: ConvTGeom) -> Result<Tensor<T>> {
    let s = geom.in_side;
    let k = geom.kernel;
    let c_in = x.cols();
    if x.rows() != s * s || w.rows() != c_in || w.cols() % (k * k) != 0 {
        return Err(Error::Shape(format!(
            "conv_transpose: input {:?} (side {s}), weight {:?}, kernel {k}",
            x.shape(),
            w.shape()
        )));
    }
    let c_out = w.cols() / (k * k);
    if b.shape() != (1, c_out) {
        return Err(Error::Shape(format!("conv_transpose bias {:?}, expected 1x{c_out}", b.shape())));
    }
    let os = geom.out_side();
    let mut out = Tensor::zeros(os * os, c_out);
    for r in 0..os * os {
        out.row_mut(r).copy_from_slice(b.row(0));
    }
    for iy in 0..s {
        for ix in 0..s {
            let xr = x.row(iy * s + ix);
            for ky in 0..k {
                let Some(oy) = tap_target(iy, ky, &geom, os) else { continue };
                for kx in 0..k {
                    let Some(ox) = tap_target(ix, kx, &geom, os) else { continue };
                    let tap = (ky * k + kx) * c_out;
                    let orow = out.row_mut(oy * os + ox);
                    for (ci, &xv) in xr.iter().enumerate() {
                        let wr = &w.row(ci)[tap..tap + c_out];
                        for (o, &wv) in orow.iter_mut().zip(wr) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    geom: ConvTGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let s = geom.in_side;
    let k = geom.kernel;
    let c_in = x.cols();
    let c_out = w.cols() / (k * k);
    let os = geom.out_side();
    let mut dx = want_dx.then(|| Tensor::zeros(s * s, c_in));
    let mut dw = want_dw.then(|| Tensor::zeros(c_in, k * k * c_out));
    for iy in 0..s {
        for ix in 0..s {
            let xr = x.row(iy * s + ix);
            for ky in 0..k {
                let Some(oy) = tap_target(iy, ky, &geom, os) else { continue };
                for kx in 0..k {
                    let Some(ox) = tap_target(ix, kx, &geom, os) else { continue };
                    let tap = (ky * k + kx) * c_out;
                    let grow = g.row(oy * os + ox);
                    if let Some(dx) = dx.as_mut() {
                        let drow = dx.row_mut(iy * s + ix);
                        for (ci, d) in drow.iter_mut().enumerate() {
                            let wr = &w.row(ci)[tap..tap + c_out];
                            let mut acc = T::zero();
                            for (&gv, &wv) in grow.iter().zip(wr) {
                                acc += gv * wv;
                            }
                            *d += acc;
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        for (ci, &xv) in xr.iter().enumerate() {
                            let wr = &mut dw.row_mut(ci)[tap..tap + c_out];
                            for (d, &gv) in wr.iter_mut().zip(grow) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

pub fn depthwise_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    side: usize,
    kernel: usize,
) -> Result<Tensor<T>> {
    let ch = x.cols();
    if x.rows() != side * side || w.shape() != (kernel * kernel, ch) || b.shape() != (1, ch) || kernel % 2 == 0 {
        return Err(Error::Shape(format!(
            "depthwise: input {:?} side {side}, weight {:?}, bias {:?}, kernel {kernel}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let half = kernel / 2;
    let mut out = Tensor::zeros(side * side, ch);
    for y in 0..side {
        for xx in 0..side {
            let orow = out.row_mut(y * side + xx);
            orow.copy_from_slice(b.row(0));
            for ky in 0..kernel {
                let Some(sy) = (y + ky).checked_sub(half).filter(|&v| v < side) else { continue };
                for kx in 0..kernel {
                    let Some(sx) = (xx + kx).checked_sub(half).filter(|&v| v < side) else { continue };
                    let wr = w.row(ky * kernel + kx);
                    for ((o, &xv), &wv) in orow.iter_mut().zip(x.row(sy * side + sx)).zip(wr) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    side: usize,
    kernel: usize,
) -> (Tensor<T>, Tensor<T>) {
    let ch = x.cols();
    let half = kernel / 2;
    let mut dx = Tensor::zeros(side * side, ch);
    let mut dw = Tensor::zeros(kernel * kernel, ch);
    for y in 0..side {
        for xx in 0..side {
            let grow = g.row(y * side + xx);
            for ky in 0..kernel {
                let Some(sy) = (y + ky).checked_sub(half).filter(|&v| v < side) else { continue };
                for kx in 0..kernel {
                    let Some(sx) = (xx + kx).checked_sub(half).filter(|&v| v < side) else { continue };
                    let tap = ky * kernel + kx;
                    let src = sy * side + sx;
                    for cc in 0..ch {
                        let gv = grow[cc];
                        dx.data_mut()[src * ch + cc] += gv * w.get(tap, cc);
                        dw.data_mut()[tap * ch + cc] += gv * x.get(src, cc);
                    }
                }
            }
        }
    }
    (dx, dw)
}
