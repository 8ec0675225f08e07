//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every forward operation as a node whose parents
//! are earlier nodes, so a single reverse sweep visits each op exactly
//! once. Backward closures look parent values up on the tape instead of
//! capturing clones, which keeps forward-only evaluation cheap.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Named trainable tensor with an accumulated gradient of the same shape.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape());
    }
}

/// Backward rule: given the graph, this node's id and the output gradient,
/// produce one gradient tensor per parent (same order as `parents`).
pub type BackFn<T> = Box<dyn Fn(&Graph<T>, Var, &Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    back: Option<BackFn<T>>,
}

/// Gradients of a scalar loss with respect to every tape node.
pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<String, Var>,
    grad_enabled: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_vars: HashMap::new(), grad_enabled: true }
    }

    /// Forward-only graph: backward closures are dropped at record time.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), param_vars: HashMap::new(), grad_enabled: false }
    }

    pub fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a node. `make_back` is only invoked when gradients are enabled.
    pub fn push_op(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        make_back: impl FnOnce() -> BackFn<T>,
    ) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite forward value, shape {:?}",
            value.shape()
        );
        let back = if self.grad_enabled { Some(make_back()) } else { None };
        self.nodes.push(Node { value, parents, back });
        Var(self.nodes.len() - 1)
    }

    /// Leaf with no gradient flow.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        debug_assert!(value.all_finite());
        self.nodes.push(Node { value, parents: Vec::new(), back: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a named parameter. Repeated calls with the same name reuse
    /// the node, so gradients from all use sites accumulate on one leaf.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        if let Some(&v) = self.param_vars.get(&p.name) {
            return v;
        }
        let v = self.constant(p.value.clone());
        self.param_vars.insert(p.name.clone(), v);
        v
    }

    /// Reverse sweep from a scalar loss. Visits each node at most once.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.val(loss).len(), 1, "backward needs a scalar loss");
        let mut by_node: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        by_node[loss.0] = Some(Tensor::full(&[1], T::one()));
        for id in (0..=loss.0).rev() {
            let Some(gout) = by_node[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(back) = &node.back {
                let pgrads = back(self, Var(id), &gout);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(pgrads) {
                    debug_assert_eq!(pg.shape(), self.val(*p).shape());
                    match &mut by_node[p.0] {
                        Some(acc) => acc.add_in_place(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            by_node[id] = Some(gout);
        }
        Grads { by_node }
    }

    /// Accumulate this pass's parameter gradients into `params`.
    pub fn accumulate_param_grads<'a>(
        &self,
        grads: &Grads<T>,
        params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    ) {
        for p in params {
            if let Some(&v) = self.param_vars.get(&p.name) {
                if let Some(g) = grads.get(v) {
                    p.grad.add_in_place(g);
                }
            }
        }
    }

    /// This pass's gradient for each named parameter, in `params` order.
    /// `None` for parameters the loss never touched.
    pub fn param_grads<'a>(
        &self,
        grads: &Grads<T>,
        params: impl IntoIterator<Item = &'a Parameter<T>>,
    ) -> Vec<Option<Tensor<T>>> {
        params
            .into_iter()
            .map(|p| self.param_vars.get(&p.name).and_then(|&v| grads.get(v).cloned()))
            .collect()
    }

    // ── elementwise ────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).zip_map(self.val(b), |x, y| x + y);
        self.push_op(v, vec![a, b], || {
            Box::new(|_, _, g| vec![g.clone(), g.clone()])
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).zip_map(self.val(b), |x, y| x - y);
        self.push_op(v, vec![a, b], || {
            Box::new(|_, _, g| vec![g.clone(), g.map(|x| -x)])
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).zip_map(self.val(b), |x, y| x * y);
        self.push_op(v, vec![a, b], || {
            Box::new(move |gr, node, g| {
                let [a, b] = gr.parents2(node);
                vec![g.zip_map(gr.val(b), |x, y| x * y), g.zip_map(gr.val(a), |x, y| x * y)]
            })
        })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.val(a).map(|x| x * c);
        self.push_op(v, vec![a], || Box::new(move |_, _, g| vec![g.map(|x| x * c)]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.val(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push_op(v, vec![a], || {
            Box::new(|gr, node, g| {
                let x = gr.val(gr.parent(node, 0));
                vec![g.zip_map(x, |gi, xi| if xi > T::zero() { gi } else { T::zero() })]
            })
        })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.val(a).map(gelu_fwd);
        self.push_op(v, vec![a], || {
            Box::new(|gr, node, g| {
                let x = gr.val(gr.parent(node, 0));
                vec![g.zip_map(x, |gi, xi| gi * gelu_grad(xi))]
            })
        })
    }

    // ── linear algebra ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ka, kb) = (self.val(a).cols(), self.val(b).rows());
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul: lhs {:?} vs rhs {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        let v = self.val(a).matmul(self.val(b));
        Ok(self.push_op(v, vec![a, b], || {
            Box::new(|gr, node, g| {
                let [a, b] = gr.parents2(node);
                vec![g.matmul_nt(gr.val(b)), gr.val(a).matmul_tn(g)]
            })
        }))
    }

    /// x[N,D] + bias[D] broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.val(x).cols();
        if self.val(b).len() != d {
            return Err(Error::Shape(format!(
                "add_bias: x {:?} vs bias {:?}",
                self.val(x).shape(),
                self.val(b).shape()
            )));
        }
        let xv = self.val(x);
        let bv = self.val(b);
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, &bb) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push_op(out, vec![x, b], || {
            Box::new(|gr, node, g| {
                let b = gr.parent(node, 1);
                let d = gr.val(b).len();
                let mut db = Tensor::zeros(gr.val(b).shape());
                for i in 0..g.rows() {
                    for (acc, &gi) in db.data_mut().iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
                        *acc += gi;
                    }
                }
                vec![g.clone(), db]
            })
        }))
    }

    /// y = x·W + b over the last dim of a 2-D x.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.val(a).transposed();
        self.push_op(v, vec![a], || Box::new(|_, _, g| vec![g.transposed()]))
    }

    // ── shape plumbing ─────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.val(a).clone().reshaped(shape);
        let orig = self.val(a).shape().to_vec();
        self.push_op(v, vec![a], || {
            Box::new(move |_, _, g| vec![g.clone().reshaped(&orig)])
        })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let w = self.val(parts[0]).cols();
        let mut data = Vec::new();
        let mut sizes = Vec::new();
        for &p in parts {
            debug_assert_eq!(self.val(p).cols(), w);
            data.extend_from_slice(self.val(p).data());
            sizes.push(self.val(p).rows());
        }
        let rows: usize = sizes.iter().sum();
        let v = Tensor::from_vec(&[rows, w], data).expect("concat_rows");
        self.push_op(v, parts.to_vec(), || {
            Box::new(move |_, _, g| {
                let w = g.cols();
                let mut out = Vec::with_capacity(sizes.len());
                let mut r = 0;
                for &n in &sizes {
                    let t = Tensor::from_vec(&[n, w], g.data()[r * w..(r + n) * w].to_vec())
                        .expect("concat_rows back");
                    out.push(t);
                    r += n;
                }
                out
            })
        })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.val(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.val(p).cols()).collect();
        let w: usize = widths.iter().sum();
        let mut out = Tensor::<T>::zeros(&[n, w]);
        for i in 0..n {
            let mut c = 0;
            for (&p, &pw) in parts.iter().zip(&widths) {
                out.row_mut(i)[c..c + pw].copy_from_slice(self.val(p).row(i));
                c += pw;
            }
        }
        self.push_op(out, parts.to_vec(), || {
            Box::new(move |_, _, g| {
                let n = g.rows();
                let mut out = Vec::with_capacity(widths.len());
                let mut c = 0;
                for &pw in &widths {
                    let mut t = Tensor::zeros(&[n, pw]);
                    for i in 0..n {
                        t.row_mut(i).copy_from_slice(&g.row(i)[c..c + pw]);
                    }
                    out.push(t);
                    c += pw;
                }
                out
            })
        })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.val(a);
        let w = src.cols();
        let total = src.rows();
        debug_assert!(start + len <= total);
        let v = Tensor::from_vec(&[len, w], src.data()[start * w..(start + len) * w].to_vec())
            .expect("slice_rows");
        self.push_op(v, vec![a], || {
            Box::new(move |gr, node, g| {
                let p = gr.parent(node, 0);
                let mut dx = Tensor::zeros(gr.val(p).shape());
                let w = g.cols();
                dx.data_mut()[start * w..(start + g.rows()) * w].copy_from_slice(g.data());
                vec![dx]
            })
        })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.val(a);
        let n = src.rows();
        let mut v = Tensor::zeros(&[n, len]);
        for i in 0..n {
            v.row_mut(i).copy_from_slice(&src.row(i)[start..start + len]);
        }
        self.push_op(v, vec![a], || {
            Box::new(move |gr, node, g| {
                let p = gr.parent(node, 0);
                let mut dx = Tensor::zeros(gr.val(p).shape());
                for i in 0..g.rows() {
                    dx.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                }
                vec![dx]
            })
        })
    }

    /// out[j] = x[j / factor] (integer division).
    pub fn repeat_rows(&mut self, a: Var, factor: usize) -> Var {
        let src = self.val(a);
        let (n, w) = (src.rows(), src.cols());
        let mut v = Tensor::zeros(&[n * factor, w]);
        for j in 0..n * factor {
            v.row_mut(j).copy_from_slice(src.row(j / factor));
        }
        self.push_op(v, vec![a], || {
            Box::new(move |gr, node, g| {
                let p = gr.parent(node, 0);
                let mut dx = Tensor::<T>::zeros(gr.val(p).shape());
                for j in 0..g.rows() {
                    let dst = j / factor;
                    for (acc, &gi) in dx.row_mut(dst).iter_mut().zip(g.row(j)) {
                        *acc += gi;
                    }
                }
                vec![dx]
            })
        })
    }

    // ── reductions and losses ──────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.val(a).data().iter().copied().sum();
        let shape = self.val(a).shape().to_vec();
        self.push_op(Tensor::scalar(s), vec![a], || {
            Box::new(move |_, _, g| vec![Tensor::full(&shape, g.item())])
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.val(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// Sum of absolute differences (ℓ1).
    pub fn l1_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::Shape(format!(
                "l1_diff: {:?} vs {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        let s: T = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        Ok(self.push_op(Tensor::scalar(s), vec![a, b], || {
            Box::new(|gr, node, g| {
                let [a, b] = gr.parents2(node);
                let gi = g.item();
                let sgn = gr.val(a).zip_map(gr.val(b), |x, y| {
                    if x > y {
                        gi
                    } else if x < y {
                        -gi
                    } else {
                        T::zero()
                    }
                });
                vec![sgn.clone(), sgn.map(|x| -x)]
            })
        }))
    }

    // ── normalization and attention pieces ─────────────────────────

    /// Row-wise softmax over unmasked entries; masked entries get weight 0.
    /// `mask[i*cols + j]` true keeps entry (i,j).
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let src = self.val(x);
        let (n, w) = (src.rows(), src.cols());
        if let Some(m) = mask {
            if m.len() != n * w {
                return Err(Error::Shape(format!(
                    "softmax mask len {} vs {}x{}",
                    m.len(),
                    n,
                    w
                )));
            }
            for i in 0..n {
                if !m[i * w..(i + 1) * w].iter().any(|&b| b) {
                    return Err(Error::Invalid(format!(
                        "softmax: query row {i} has every key masked"
                    )));
                }
            }
        }
        let mut v = Tensor::zeros(&[n, w]);
        for i in 0..n {
            softmax_row(src.row(i), mask.map(|m| &m[i * w..(i + 1) * w]), v.row_mut(i));
        }
        Ok(self.push_op(v, vec![x], || {
            Box::new(|gr, node, g| {
                let y = gr.val(node);
                let (n, w) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(&[n, w]);
                for i in 0..n {
                    let yr = y.row(i);
                    let gr_ = g.row(i);
                    let dot: T = yr.iter().zip(gr_).map(|(&a, &b)| a * b).sum();
                    for j in 0..w {
                        dx.row_mut(i)[j] = yr[j] * (gr_[j] - dot);
                    }
                }
                vec![dx]
            })
        }))
    }

    /// Normalize each row to zero mean / unit variance, then scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let src = self.val(x);
        let (n, d) = (src.rows(), src.cols());
        debug_assert_eq!(self.val(gamma).len(), d);
        let gv = self.val(gamma).data().to_vec();
        let bv = self.val(beta).data().to_vec();
        let mut v = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let row = src.row(i);
            let (mu, inv_s) = row_moments(row, eps);
            for j in 0..d {
                v.row_mut(i)[j] = T::from_f64(gv[j].as_f64()) * ((row[j] - mu) * inv_s)
                    + T::from_f64(bv[j].as_f64());
            }
        }
        self.push_op(v, vec![x, gamma, beta], move || {
            Box::new(move |gr, node, g| {
                let x = gr.val(gr.parent(node, 0));
                let gamma = gr.val(gr.parent(node, 1));
                let (n, d) = (x.rows(), x.cols());
                let inv_d = T::from_f64(1.0 / d as f64);
                let mut dx = Tensor::zeros(&[n, d]);
                let mut dgamma = Tensor::zeros(&[d]);
                let mut dbeta = Tensor::zeros(&[d]);
                for i in 0..n {
                    let row = x.row(i);
                    let grow = g.row(i);
                    let (mu, inv_s) = row_moments(row, eps);
                    let xh: Vec<T> = row.iter().map(|&v| (v - mu) * inv_s).collect();
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let dxh = grow[j] * gamma.data()[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                        dgamma.data_mut()[j] += grow[j] * xh[j];
                        dbeta.data_mut()[j] += grow[j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        let dxh = grow[j] * gamma.data()[j];
                        dx.row_mut(i)[j] = (dxh - m1 - xh[j] * m2) * inv_s;
                    }
                }
                vec![dx, dgamma, dbeta]
            })
        })
    }

    // ── point-set ops ──────────────────────────────────────────────

    /// Column-wise maximum over rows: [N,C] → [1,C]. Ties keep the
    /// smallest row index so the result is order-stable.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.val(x);
        let (n, c) = (src.rows(), src.cols());
        if n == 0 {
            return Err(Error::Invalid("max_pool_rows on empty point set".into()));
        }
        let mut v = Tensor::zeros(&[1, c]);
        let mut arg = vec![0usize; c];
        for j in 0..c {
            let mut best = src.row(0)[j];
            for i in 1..n {
                if src.row(i)[j] > best {
                    best = src.row(i)[j];
                    arg[j] = i;
                }
            }
            v.row_mut(0)[j] = best;
        }
        Ok(self.push_op(v, vec![x], || {
            Box::new(move |gr, node, g| {
                let p = gr.parent(node, 0);
                let mut dx = Tensor::zeros(gr.val(p).shape());
                for (j, &i) in arg.iter().enumerate() {
                    dx.row_mut(i)[j] = g.row(0)[j];
                }
                vec![dx]
            })
        }))
    }

    /// Linear interpolation along the point axis: output slot j reads the
    /// fractional source position j/factor, clamped at the last row.
    pub fn upsample_rows_linear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::Invalid("upsample factor must be >= 1".into()));
        }
        let src = self.val(x);
        let (n, c) = (src.rows(), src.cols());
        let plan = upsample_plan(n, factor);
        let mut v = Tensor::zeros(&[n * factor, c]);
        for (j, &(i0, i1, f)) in plan.iter().enumerate() {
            let f = T::from_f64(f);
            let one_m = T::one() - f;
            for k in 0..c {
                v.row_mut(j)[k] = one_m * src.row(i0)[k] + f * src.row(i1)[k];
            }
        }
        Ok(self.push_op(v, vec![x], || {
            Box::new(move |gr, node, g| {
                let p = gr.parent(node, 0);
                let mut dx = Tensor::<T>::zeros(gr.val(p).shape());
                for (j, &(i0, i1, f)) in plan.iter().enumerate() {
                    let f = T::from_f64(f);
                    let one_m = T::one() - f;
                    for k in 0..g.cols() {
                        let gi = g.row(j)[k];
                        dx.row_mut(i0)[k] += one_m * gi;
                        dx.row_mut(i1)[k] += f * gi;
                    }
                }
                vec![dx]
            })
        }))
    }

    /// 3×3 convolution on a [G,G,Cin] grid, zero padding 1, stride 1.
    /// Weight layout [9·Cin, Cout], bias [Cout]; output [G,G,Cout].
    pub fn conv_grid_3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let shape = self.val(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != shape[1] || shape[0] < 1 {
            return Err(Error::Shape(format!("conv_grid_3x3 wants [G,G,C], got {shape:?}")));
        }
        let (g_side, cin) = (shape[0], shape[2]);
        if self.val(w).rows() != 9 * cin {
            return Err(Error::Shape(format!(
                "conv weight rows {} vs 9*Cin={}",
                self.val(w).rows(),
                9 * cin
            )));
        }
        let cols = im2col_3x3(self.val(x), g_side, cin);
        let cvar = self.push_op(cols, vec![x], || {
            Box::new(move |_, _, g| vec![col2im_3x3(g, g_side, cin)])
        });
        let cout = self.val(w).cols();
        let y = self.linear(cvar, w, b)?;
        Ok(self.reshape(y, &[g_side, g_side, cout]))
    }

    // internal helpers for backward closures
    pub(crate) fn parent(&self, node: Var, i: usize) -> Var {
        self.nodes[node.0].parents[i]
    }

    pub(crate) fn parents2(&self, node: Var) -> [Var; 2] {
        [self.parent(node, 0), self.parent(node, 1)]
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// Mean and 1/sqrt(var + eps) of one row, biased variance.
fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mu = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
    (mu, (var + eps).sqrt().recip())
}

pub(crate) fn softmax_row<T: Scalar>(x: &[T], mask: Option<&[bool]>, out: &mut [T]) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut mx = T::neg_infinity();
    for (j, &v) in x.iter().enumerate() {
        if keep(j) && v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for (j, &v) in x.iter().enumerate() {
        if keep(j) {
            let e = (v - mx).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = T::zero();
        }
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// (floor, ceil-clamped, fraction) for each upsampled slot.
fn upsample_plan(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|j| {
            let pos = j as f64 / factor as f64;
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

fn im2col_3x3<T: Scalar>(x: &Tensor<T>, g: usize, cin: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[g * g, 9 * cin]);
    for iy in 0..g {
        for ix in 0..g {
            let row = out.row_mut(iy * g + ix);
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let sy = iy as isize + ky as isize - 1;
                    let sx = ix as isize + kx as isize - 1;
                    if sy < 0 || sy >= g as isize || sx < 0 || sx >= g as isize {
                        continue;
                    }
                    let src = ((sy as usize * g) + sx as usize) * cin;
                    let dst = (ky * 3 + kx) * cin;
                    row[dst..dst + cin].copy_from_slice(&x.data()[src..src + cin]);
                }
            }
        }
    }
    out
}

fn col2im_3x3<T: Scalar>(g_cols: &Tensor<T>, g: usize, cin: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[g, g, cin]);
    for iy in 0..g {
        for ix in 0..g {
            let row = g_cols.row(iy * g + ix);
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let sy = iy as isize + ky as isize - 1;
                    let sx = ix as isize + kx as isize - 1;
                    if sy < 0 || sy >= g as isize || sx < 0 || sx >= g as isize {
                        continue;
                    }
                    let dst = ((sy as usize * g) + sx as usize) * cin;
                    let src = (ky * 3 + kx) * cin;
                    for c in 0..cin {
                        out.data_mut()[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    out
}
