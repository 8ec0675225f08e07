//! Neural-network building blocks on top of the autodiff graph:
//! linear layers, layer norm, fused multi-head attention, transformer
//! blocks, Adam, and the finite-difference gradient checker.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Parameter, Var};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy)]
pub enum Init {
    TruncNormal(f64),
    /// std = sqrt(2 / fan_in), for plain ReLU stacks without residuals
    Kaiming,
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    pub w: Parameter<T>,
    pub b: Parameter<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, din: usize, dout: usize, init: Init, rng: &mut impl Rng) -> Self {
        let w = match init {
            Init::TruncNormal(std) => Tensor::trunc_normal(&[din, dout], std, rng),
            Init::Kaiming => Tensor::trunc_normal(&[din, dout], (2.0 / din as f64).sqrt(), rng),
            Init::Zeros => Tensor::zeros(&[din, dout]),
        };
        Linear {
            w: Parameter::new(format!("{name}.w"), w),
            b: Parameter::new(format!("{name}.b"), Tensor::zeros(&[dout])),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[dim], T::one())),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.layer_norm(x, gamma, beta, T::from_f64(LAYER_NORM_EPS))
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Multi-head scaled dot-product attention, recorded as one fused op.
/// Attention matrices are recomputed during backward instead of being
/// stored on the tape, which bounds memory to the token embeddings.
#[derive(Clone, Debug)]
pub struct Mha<T: Scalar> {
    pub heads: usize,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

impl<T: Scalar> Mha<T> {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let init = Init::TruncNormal(0.02);
        Mha {
            heads,
            wq: Linear::new(&format!("{name}.wq"), dim, dim, init, rng),
            wk: Linear::new(&format!("{name}.wk"), dim, dim, init, rng),
            wv: Linear::new(&format!("{name}.wv"), dim, dim, init, rng),
            wo: Linear::new(&format!("{name}.wo"), dim, dim, init, rng),
        }
    }

    /// `mask`, when present, is row-major [Nq, Nk]; true keeps a key.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        q: Var,
        kv: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let dim = g.val(q).cols();
        if dim % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "attention width {} not divisible by {} heads",
                dim, self.heads
            )));
        }
        let (nq, nk) = (g.val(q).rows(), g.val(kv).rows());
        if g.val(kv).cols() != dim {
            return Err(Error::Shape(format!(
                "attention q {:?} vs kv {:?}",
                g.val(q).shape(),
                g.val(kv).shape()
            )));
        }
        if nk == 0 {
            return Err(Error::Invalid("attention with empty context".into()));
        }
        if let Some(m) = mask {
            if m.len() != nq * nk {
                return Err(Error::Shape(format!(
                    "attention mask len {} vs {}x{}",
                    m.len(),
                    nq,
                    nk
                )));
            }
            for i in 0..nq {
                if !m[i * nk..(i + 1) * nk].iter().any(|&b| b) {
                    return Err(Error::Invalid(format!(
                        "attention: query row {i} has every key masked"
                    )));
                }
            }
        }

        let wq = g.param(&self.wq.w);
        let bq = g.param(&self.wq.b);
        let wk = g.param(&self.wk.w);
        let bk = g.param(&self.wk.b);
        let wv = g.param(&self.wv.w);
        let bv = g.param(&self.wv.b);
        let wo = g.param(&self.wo.w);
        let bo = g.param(&self.wo.b);

        let heads = self.heads;
        let mask_owned: Option<Vec<bool>> = mask.map(|m| m.to_vec());
        let value = {
            let pieces = MhaPieces::forward(
                g.val(q),
                g.val(kv),
                g.val(wq),
                g.val(bq),
                g.val(wk),
                g.val(bk),
                g.val(wv),
                g.val(bv),
                heads,
                mask_owned.as_deref(),
            );
            let mut out = pieces.merged.matmul(g.val(wo));
            add_bias_in_place(&mut out, g.val(bo));
            out
        };

        let parents = vec![q, kv, wq, bq, wk, bk, wv, bv, wo, bo];
        Ok(g.push_op(value, parents, move || {
            Box::new(move |gr, node, gout| {
                let pv = |i: usize| gr.val(gr.parent(node, i));
                let (q, kv) = (pv(0), pv(1));
                let (wq, _bq, wk, _bk, wv, _bv, wo, _bo) =
                    (pv(2), pv(3), pv(4), pv(5), pv(6), pv(7), pv(8), pv(9));
                let pieces = MhaPieces::forward(
                    q,
                    kv,
                    wq,
                    pv(3),
                    wk,
                    pv(5),
                    wv,
                    pv(7),
                    heads,
                    mask_owned.as_deref(),
                );
                pieces.backward(q, kv, wq, wk, wv, wo, gout)
            })
        }))
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .into_iter()
            .flat_map(|l| l.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.wq.params_mut();
        out.extend(self.wk.params_mut());
        out.extend(self.wv.params_mut());
        out.extend(self.wo.params_mut());
        out
    }

    /// Per-head attention weight matrices for the current parameter values;
    /// used by locality tests to verify exact zeros outside neighborhoods.
    pub fn attention_weights(
        &self,
        q: &Tensor<T>,
        kv: &Tensor<T>,
        mask: Option<&[bool]>,
    ) -> Vec<Tensor<T>> {
        let mut qp = q.matmul(&self.wq.w.value);
        add_bias_in_place(&mut qp, &self.wq.b.value);
        let mut kp = kv.matmul(&self.wk.w.value);
        add_bias_in_place(&mut kp, &self.wk.b.value);
        let dh = q.cols() / self.heads;
        (0..self.heads)
            .map(|h| attn_matrix(&qp, &kp, h, dh, mask))
            .collect()
    }
}

/// Intermediate products of the fused attention forward pass.
struct MhaPieces<T: Scalar> {
    qp: Tensor<T>,
    kp: Tensor<T>,
    vp: Tensor<T>,
    attn: Vec<Tensor<T>>, // per head [Nq, Nk]
    merged: Tensor<T>,    // [Nq, D]
    heads: usize,
}

impl<T: Scalar> MhaPieces<T> {
    #[allow(clippy::too_many_arguments)]
    fn forward(
        q: &Tensor<T>,
        kv: &Tensor<T>,
        wq: &Tensor<T>,
        bq: &Tensor<T>,
        wk: &Tensor<T>,
        bk: &Tensor<T>,
        wv: &Tensor<T>,
        bv: &Tensor<T>,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Self {
        let mut qp = q.matmul(wq);
        add_bias_in_place(&mut qp, bq);
        let mut kp = kv.matmul(wk);
        add_bias_in_place(&mut kp, bk);
        let mut vp = kv.matmul(wv);
        add_bias_in_place(&mut vp, bv);
        let dim = qp.cols();
        let dh = dim / heads;
        let nq = qp.rows();
        let mut merged = Tensor::zeros(&[nq, dim]);
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let a = attn_matrix(&qp, &kp, h, dh, mask);
            // merged[:, h*dh..] = a · Vh
            let vh = head_cols(&vp, h, dh);
            let oh = a.matmul(&vh);
            for i in 0..nq {
                merged.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(oh.row(i));
            }
            attn.push(a);
        }
        MhaPieces { qp, kp, vp, attn, merged, heads }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        q: &Tensor<T>,
        kv: &Tensor<T>,
        wq: &Tensor<T>,
        wk: &Tensor<T>,
        wv: &Tensor<T>,
        wo: &Tensor<T>,
        gout: &Tensor<T>,
    ) -> Vec<Tensor<T>> {
        let dim = self.qp.cols();
        let dh = dim / self.heads;
        let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
        let (nq, nk) = (self.qp.rows(), self.kp.rows());

        let d_merged = gout.matmul_nt(wo);
        let d_wo = self.merged.matmul_tn(gout);
        let d_bo = col_sums(gout);

        let mut dq_proj = Tensor::zeros(&[nq, dim]);
        let mut dk_proj = Tensor::zeros(&[nk, dim]);
        let mut dv_proj = Tensor::zeros(&[nk, dim]);
        for h in 0..self.heads {
            let a = &self.attn[h];
            let d_oh = head_cols(&d_merged, h, dh);
            let vh = head_cols(&self.vp, h, dh);
            let d_a = d_oh.matmul_nt(&vh);
            let d_vh = a.matmul_tn(&d_oh);
            // softmax jacobian per row, then the 1/sqrt(dh) scale
            let mut d_s = Tensor::zeros(&[nq, nk]);
            for i in 0..nq {
                let ar = a.row(i);
                let dr = d_a.row(i);
                let dot: T = ar.iter().zip(dr).map(|(&x, &y)| x * y).sum();
                for j in 0..nk {
                    d_s.row_mut(i)[j] = ar[j] * (dr[j] - dot) * inv_sqrt;
                }
            }
            let qh = head_cols(&self.qp, h, dh);
            let kh = head_cols(&self.kp, h, dh);
            let d_qh = d_s.matmul(&kh);
            let d_kh = d_s.matmul_tn(&qh);
            scatter_head_cols(&mut dq_proj, &d_qh, h, dh);
            scatter_head_cols(&mut dk_proj, &d_kh, h, dh);
            scatter_head_cols(&mut dv_proj, &d_vh, h, dh);
        }

        let d_q = dq_proj.matmul_nt(wq);
        let d_wq = q.matmul_tn(&dq_proj);
        let d_bq = col_sums(&dq_proj);
        let mut d_kv = dk_proj.matmul_nt(wk);
        d_kv.add_in_place(&dv_proj.matmul_nt(wv));
        let d_wk = kv.matmul_tn(&dk_proj);
        let d_bk = col_sums(&dk_proj);
        let d_wv = kv.matmul_tn(&dv_proj);
        let d_bv = col_sums(&dv_proj);

        vec![d_q, d_kv, d_wq, d_bq, d_wk, d_bk, d_wv, d_bv, d_wo, d_bo]
    }
}

fn attn_matrix<T: Scalar>(
    qp: &Tensor<T>,
    kp: &Tensor<T>,
    h: usize,
    dh: usize,
    mask: Option<&[bool]>,
) -> Tensor<T> {
    let (nq, nk) = (qp.rows(), kp.rows());
    let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
    let qh = head_cols(qp, h, dh);
    let kh = head_cols(kp, h, dh);
    let mut s = qh.matmul_nt(&kh);
    for v in s.data_mut() {
        *v *= inv_sqrt;
    }
    let mut a = Tensor::zeros(&[nq, nk]);
    for i in 0..nq {
        crate::graph::softmax_row(s.row(i), mask.map(|m| &m[i * nk..(i + 1) * nk]), a.row_mut(i));
    }
    a
}

fn head_cols<T: Scalar>(x: &Tensor<T>, h: usize, dh: usize) -> Tensor<T> {
    let n = x.rows();
    let mut out = Tensor::zeros(&[n, dh]);
    for i in 0..n {
        out.row_mut(i).copy_from_slice(&x.row(i)[h * dh..(h + 1) * dh]);
    }
    out
}

fn scatter_head_cols<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, h: usize, dh: usize) {
    for i in 0..src.rows() {
        dst.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(src.row(i));
    }
}

fn add_bias_in_place<T: Scalar>(x: &mut Tensor<T>, b: &Tensor<T>) {
    let w = x.cols();
    debug_assert_eq!(b.len(), w);
    for i in 0..x.rows() {
        for (o, &bb) in x.row_mut(i).iter_mut().zip(b.data()) {
            *o += bb;
        }
    }
}

fn col_sums<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let w = x.cols();
    let mut out = Tensor::zeros(&[w]);
    for i in 0..x.rows() {
        for (acc, &v) in out.data_mut().iter_mut().zip(x.row(i)) {
            *acc += v;
        }
    }
    out
}

/// Pre-norm transformer block: x + attn(ln1(x)) then x + ffn(ln2(x)).
#[derive(Clone, Debug)]
pub struct EncoderBlock<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub attn: Mha<T>,
    pub ln2: LayerNorm<T>,
    pub ffn1: Linear<T>,
    pub ffn2: Linear<T>,
}

impl<T: Scalar> EncoderBlock<T> {
    pub fn new(name: &str, dim: usize, heads: usize, ffn_dim: usize, rng: &mut impl Rng) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim),
            attn: Mha::new(&format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim),
            ffn1: Linear::new(&format!("{name}.ffn1"), dim, ffn_dim, Init::TruncNormal(0.02), rng),
            ffn2: Linear::new(&format!("{name}.ffn2"), ffn_dim, dim, Init::TruncNormal(0.02), rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let n = self.ln1.forward(g, x);
        let a = self.attn.forward(g, n, n, None)?;
        let x = g.add(x, a);
        let n = self.ln2.forward(g, x);
        let h = self.ffn1.forward(g, n)?;
        let h = g.gelu(h);
        let h = self.ffn2.forward(g, h)?;
        Ok(g.add(x, h))
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = self.ln1.params();
        out.extend(self.attn.params());
        out.extend(self.ln2.params());
        out.extend(self.ffn1.params());
        out.extend(self.ffn2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.ln1.params_mut();
        out.extend(self.attn.params_mut());
        out.extend(self.ln2.params_mut());
        out.extend(self.ffn1.params_mut());
        out.extend(self.ffn2.params_mut());
        out
    }
}

/// Decoder block: self-attention, cross-attention to a fixed context,
/// then a feed-forward, all pre-norm with residuals.
#[derive(Clone, Debug)]
pub struct CrossBlock<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub self_attn: Mha<T>,
    pub ln2: LayerNorm<T>,
    pub cross_attn: Mha<T>,
    pub ln3: LayerNorm<T>,
    pub ffn1: Linear<T>,
    pub ffn2: Linear<T>,
}

impl<T: Scalar> CrossBlock<T> {
    pub fn new(name: &str, dim: usize, heads: usize, ffn_dim: usize, rng: &mut impl Rng) -> Self {
        CrossBlock {
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim),
            self_attn: Mha::new(&format!("{name}.self"), dim, heads, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim),
            cross_attn: Mha::new(&format!("{name}.cross"), dim, heads, rng),
            ln3: LayerNorm::new(&format!("{name}.ln3"), dim),
            ffn1: Linear::new(&format!("{name}.ffn1"), dim, ffn_dim, Init::TruncNormal(0.02), rng),
            ffn2: Linear::new(&format!("{name}.ffn2"), ffn_dim, dim, Init::TruncNormal(0.02), rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, context: Var) -> Result<Var> {
        let n = self.ln1.forward(g, x);
        let a = self.self_attn.forward(g, n, n, None)?;
        let x = g.add(x, a);
        let n = self.ln2.forward(g, x);
        let c = self.cross_attn.forward(g, n, context, None)?;
        let x = g.add(x, c);
        let n = self.ln3.forward(g, x);
        let h = self.ffn1.forward(g, n)?;
        let h = g.gelu(h);
        let h = self.ffn2.forward(g, h)?;
        Ok(g.add(x, h))
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = self.ln1.params();
        out.extend(self.self_attn.params());
        out.extend(self.ln2.params());
        out.extend(self.cross_attn.params());
        out.extend(self.ln3.params());
        out.extend(self.ffn1.params());
        out.extend(self.ffn2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.ln1.params_mut();
        out.extend(self.self_attn.params_mut());
        out.extend(self.ln2.params_mut());
        out.extend(self.cross_attn.params_mut());
        out.extend(self.ln3.params_mut());
        out.extend(self.ffn1.params_mut());
        out.extend(self.ffn2.params_mut());
        out
    }
}

/// Adam with bias correction; state keyed by parameter name.
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: HashMap<String, Tensor<T>>,
    v: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn step<'a>(&mut self, lr: f64, params: impl IntoIterator<Item = &'a mut Parameter<T>>) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let eps = T::from_f64(self.eps);
        for p in params {
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let step = T::from_f64(lr);
            let inv_bc1 = T::from_f64(1.0 / bc1);
            let inv_bc2 = T::from_f64(1.0 / bc2);
            for ((mv, vv), &gv) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(p.grad.data())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
            }
            for (i, pv) in p.value.data_mut().iter_mut().enumerate() {
                let mh = m.data()[i] * inv_bc1;
                let vh = v.data()[i] * inv_bc2;
                *pv = *pv - step * mh / (vh.sqrt() + eps);
            }
        }
    }
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Cosine decay from `base` to 0 over `total` steps; step 0 gets `base`,
/// the final step gets exactly 0.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

/// Central-difference gradient check in f64 with step 1e-5.
///
/// `params` re-borrows the model's parameters on demand so values can be
/// perturbed between forward evaluations; `forward` must rebuild the loss
/// from the current parameter values. Up to `samples` entries per
/// parameter are probed, spread deterministically across the tensor.
pub fn grad_check<M>(
    model: &mut M,
    params: impl Fn(&mut M) -> Vec<&mut Parameter<f64>>,
    forward: impl Fn(&mut M, &mut Graph<f64>) -> Result<Var>,
    samples: usize,
) -> Result<GradCheckReport> {
    const H: f64 = 1e-5;

    let analytic: HashMap<String, Tensor<f64>> = {
        for p in params(model) {
            p.zero_grad();
        }
        let mut g = Graph::new();
        let loss = forward(model, &mut g)?;
        let grads = g.backward(loss);
        let mut map = HashMap::new();
        for p in params(model) {
            p.grad = Tensor::zeros(p.value.shape());
        }
        {
            let ps = params(model);
            g.accumulate_param_grads(&grads, ps);
        }
        for p in params(model) {
            if !p.grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
            map.insert(p.name.clone(), p.grad.clone());
        }
        map
    };

    let names: Vec<(String, usize)> = {
        params(model)
            .iter()
            .map(|p| (p.name.clone(), p.value.len()))
            .collect()
    };

    let mut report = GradCheckReport { per_param: Vec::new(), max_rel_err: 0.0 };
    for (name, len) in names {
        let probes = probe_indices(len, samples);
        let mut worst = 0.0f64;
        for idx in probes {
            let eval_at = |model: &mut M, delta: f64| -> Result<f64> {
                {
                    let mut ps = params(model);
                    let p = ps.iter_mut().find(|p| p.name == name).expect("param");
                    p.value.data_mut()[idx] += delta;
                }
                let mut g = Graph::inference();
                let loss = forward(model, &mut g);
                {
                    let mut ps = params(model);
                    let p = ps.iter_mut().find(|p| p.name == name).expect("param");
                    p.value.data_mut()[idx] -= delta;
                }
                Ok(g.val(loss?).item())
            };
            let plus = eval_at(model, H)?;
            let minus = eval_at(model, -H)?;
            let numeric = (plus - minus) / (2.0 * H);
            let a = analytic[&name].data()[idx];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
        report.max_rel_err = report.max_rel_err.max(worst);
        report.per_param.push((name, worst));
    }
    Ok(report)
}

fn probe_indices(len: usize, samples: usize) -> Vec<usize> {
    if len <= samples {
        (0..len).collect()
    } else {
        (0..samples).map(|i| i * len / samples).collect()
    }
}
