//! Sparse stage: learnable tokens decode the palm-relative object
//! translation and an initial centroid-centered point cloud, conditioned
//! on image tokens and the hand feature through cross-attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Parameter, Var};
use crate::nn::{CrossBlock, Init, LayerNorm, Linear};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct SparseConfig {
    pub n_points: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub image_dim: usize,
    pub hand_dim: usize,
}

#[derive(Clone, Debug)]
pub struct SparseDecoder<T: Scalar> {
    pub cfg: SparseConfig,
    /// token 0 predicts translation; tokens 1..=n_points are point tokens
    pub tokens: Parameter<T>,
    pub img_proj: Linear<T>,
    pub hand_proj: Linear<T>,
    pub blocks: Vec<CrossBlock<T>>,
    pub ln_f: LayerNorm<T>,
    pub t_head: Linear<T>,
    pub point_head: Linear<T>,
}

impl<T: Scalar> SparseDecoder<T> {
    pub fn new(cfg: SparseConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.dim % cfg.heads != 0 {
            return Err(Error::Invalid(format!(
                "sparse decoder width {} not divisible by {} heads",
                cfg.dim, cfg.heads
            )));
        }
        let blocks = (0..cfg.layers)
            .map(|i| {
                CrossBlock::new(&format!("sparse.block{i}"), cfg.dim, cfg.heads, cfg.dim * cfg.ffn_mult, rng)
            })
            .collect();
        Ok(SparseDecoder {
            cfg,
            tokens: Parameter::new(
                "sparse.tokens",
                Tensor::trunc_normal(&[1 + cfg.n_points, cfg.dim], 0.02, rng),
            ),
            img_proj: Linear::new("sparse.img_proj", cfg.image_dim, cfg.dim, Init::TruncNormal(0.02), rng),
            hand_proj: Linear::new("sparse.hand_proj", cfg.hand_dim, cfg.dim, Init::TruncNormal(0.02), rng),
            blocks,
            ln_f: LayerNorm::new("sparse.ln_f", cfg.dim),
            t_head: Linear::new("sparse.t_head", cfg.dim, 3, Init::Zeros, rng),
            point_head: Linear::new("sparse.point_head", cfg.dim, 3, Init::Zeros, rng),
        })
    }

    /// f_v: [1+P, image_dim] visual tokens; f_h: [1, hand_dim].
    /// Returns (t_o [1,3] meters, p_o^s [N_s,3] meters).
    pub fn decode(&self, g: &mut Graph<T>, f_v: Var, f_h: Var) -> Result<(Var, Var)> {
        if g.val(f_v).rows() == 0 {
            return Err(Error::Invalid("sparse decoder: empty image context".into()));
        }
        let img_ctx = self.img_proj.forward(g, f_v)?;
        let hand_ctx = self.hand_proj.forward(g, f_h)?;
        let context = g.concat_rows(&[img_ctx, hand_ctx]);
        let mut x = g.param(&self.tokens);
        for b in &self.blocks {
            x = b.forward(g, x, context)?;
        }
        let x = self.ln_f.forward(g, x);
        let t_tok = g.slice_rows(x, 0, 1);
        let p_tok = g.slice_rows(x, 1, self.cfg.n_points);
        let t_o = self.t_head.forward(g, t_tok)?;
        let p_s = self.point_head.forward(g, p_tok)?;
        Ok((t_o, p_s))
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = vec![&self.tokens];
        out.extend(self.img_proj.params());
        out.extend(self.hand_proj.params());
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.ln_f.params());
        out.extend(self.t_head.params());
        out.extend(self.point_head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = vec![&mut self.tokens];
        out.extend(self.img_proj.params_mut());
        out.extend(self.hand_proj.params_mut());
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.ln_f.params_mut());
        out.extend(self.t_head.params_mut());
        out.extend(self.point_head.params_mut());
        out
    }
}
