//! Run configuration: model dimensions, optimizer recipe, loss weights.
//! JSON on disk; every field has a documented default (the desk preset).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// square input image side in pixels (desk 64, full 224)
    pub image_size: usize,
    /// patch side; must divide image_size (desk 8, full 14)
    pub patch: usize,
    /// image encoder width (desk 128)
    pub enc_dim: usize,
    /// image encoder depth (desk 6)
    pub enc_layers: usize,
    /// image encoder heads (desk 4)
    pub enc_heads: usize,
    /// channels of the refined feature map (desk 64, full 128)
    pub refine_channels: usize,
    /// FFN width multiplier shared by all transformer blocks (desk 2)
    pub ffn_mult: usize,
    /// point-encoder FC widths; last entry is the hand feature size
    /// (desk [32,64,64,128,256], full [64,128,256,512,1024])
    pub hand_widths: Vec<usize>,
    /// coarse cloud size N_s (desk 256, full 2048); N_d is always 8·N_s
    pub n_sparse: usize,
    /// sparse decoder width (desk 256, full 512)
    pub sparse_dim: usize,
    /// sparse decoder depth (desk 4, full 10)
    pub sparse_layers: usize,
    /// sparse decoder heads (desk 4)
    pub sparse_heads: usize,
    /// dense-stage coordinate MLP channels (desk 64)
    pub dense_coord: usize,
    /// dense-stage attention width (desk 128)
    pub dense_dim: usize,
    /// dense-stage heads (desk 4)
    pub dense_heads: usize,
    /// neighborhood size for local attention (16)
    pub knn_k: usize,
    /// hand vertices kept (by farthest-point sampling) as dense-stage
    /// context tokens (desk 64)
    pub hand_tokens: usize,
    /// weight of the translation L1 term (2)
    pub lambda_t: f64,
    /// weight of the sparse chamfer term (2)
    pub lambda_cd: f64,
    /// Adam base learning rate (1e-4)
    pub base_lr: f64,
    /// total optimizer steps under cosine decay (desk 2000)
    pub steps: usize,
    /// samples per optimizer step (desk 8)
    pub batch_size: usize,
    /// checkpoint every this many steps; 0 = only at the end
    pub checkpoint_interval: usize,
    /// root seed for data order, init, and augmentation
    pub seed: u64,
    /// parameter/compute dtype
    pub precision: Precision,
    /// ablation: replace the hand feature with zeros
    pub zero_hand: bool,
    /// apply random roll/scale/shift/gain augmentation during training
    pub augment: bool,
    /// base focal length in pixels for scene generation (desk 90)
    pub focal: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            image_size: 64,
            patch: 8,
            enc_dim: 128,
            enc_layers: 6,
            enc_heads: 4,
            refine_channels: 64,
            ffn_mult: 2,
            hand_widths: vec![32, 64, 64, 128, 256],
            n_sparse: 256,
            sparse_dim: 256,
            sparse_layers: 4,
            sparse_heads: 4,
            dense_coord: 64,
            dense_dim: 128,
            dense_heads: 4,
            knn_k: 16,
            hand_tokens: 64,
            lambda_t: 2.0,
            lambda_cd: 2.0,
            base_lr: 1e-4,
            steps: 2000,
            batch_size: 8,
            checkpoint_interval: 0,
            seed: 0,
            precision: Precision::F64,
            zero_hand: false,
            augment: true,
            focal: 90.0,
        }
    }

    /// Paper-scale dimensions: 224×224/14 patches (257 tokens), 16×16×128
    /// refined map, 1024-wide hand feature, 2048 → 16384 points.
    pub fn full() -> Self {
        RunConfig {
            image_size: 224,
            patch: 14,
            enc_dim: 384,
            enc_layers: 4,
            enc_heads: 6,
            refine_channels: 128,
            hand_widths: vec![64, 128, 256, 512, 1024],
            n_sparse: 2048,
            sparse_dim: 512,
            sparse_layers: 10,
            sparse_heads: 8,
            dense_coord: 128,
            dense_dim: 256,
            dense_heads: 8,
            hand_tokens: 256,
            precision: Precision::F32,
            focal: 315.0,
            ..RunConfig::desk()
        }
    }

    /// Tiny dimensions for finite-difference checks: 16×16 image, N_s=16.
    pub fn toy() -> Self {
        RunConfig {
            image_size: 16,
            patch: 8,
            enc_dim: 16,
            enc_layers: 2,
            enc_heads: 2,
            refine_channels: 8,
            hand_widths: vec![16, 24],
            n_sparse: 16,
            sparse_dim: 16,
            sparse_layers: 2,
            sparse_heads: 2,
            dense_coord: 8,
            dense_dim: 8,
            dense_heads: 2,
            knn_k: 8,
            hand_tokens: 16,
            steps: 10,
            batch_size: 2,
            focal: 22.0,
            ..RunConfig::desk()
        }
    }

    /// Dense cloud size; fixed at 8 × N_s (upsample factors 2 then 4).
    pub fn n_dense(&self) -> usize {
        8 * self.n_sparse
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch", self.patch),
            ("enc_dim", self.enc_dim),
            ("enc_layers", self.enc_layers),
            ("enc_heads", self.enc_heads),
            ("refine_channels", self.refine_channels),
            ("ffn_mult", self.ffn_mult),
            ("n_sparse", self.n_sparse),
            ("sparse_dim", self.sparse_dim),
            ("sparse_layers", self.sparse_layers),
            ("sparse_heads", self.sparse_heads),
            ("dense_coord", self.dense_coord),
            ("dense_dim", self.dense_dim),
            ("dense_heads", self.dense_heads),
            ("knn_k", self.knn_k),
            ("hand_tokens", self.hand_tokens),
            ("steps", self.steps),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Invalid(format!(
                "patch {} does not divide image size {}",
                self.patch, self.image_size
            )));
        }
        if self.enc_dim % self.enc_heads != 0
            || self.sparse_dim % self.sparse_heads != 0
            || self.dense_dim % self.dense_heads != 0
        {
            return Err(Error::Invalid("widths must be divisible by head counts".into()));
        }
        if self.hand_widths.is_empty() {
            return Err(Error::Invalid("hand_widths must not be empty".into()));
        }
        if !(self.base_lr > 0.0) || !(self.lambda_t >= 0.0) || !(self.lambda_cd >= 0.0) {
            return Err(Error::Invalid("base_lr must be positive, weights non-negative".into()));
        }
        if !(self.focal > 0.0) {
            return Err(Error::Invalid("focal must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Invalid(format!("config serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
