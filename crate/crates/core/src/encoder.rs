//! Patch-transformer image encoder: image -> class + patch tokens, plus a
//! convolutional refinement of the patch tokens into a spatial feature map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Parameter, Var};
use crate::nn::{EncoderBlock, Init, Linear};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub refine_channels: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Invalid(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "encoder width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches()
    }
}

/// Rearrange an [H,W,3] image into one row of pixels per patch,
/// [P, patch·patch·3], patches in row-major grid order.
pub fn patchify<T: Scalar>(img: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != shape[1] || shape[2] != 3 {
        return Err(Error::Shape(format!("image must be [H,H,3], got {shape:?}")));
    }
    let h = shape[0];
    if h % patch != 0 {
        return Err(Error::Invalid(format!("image size {h} not divisible by patch {patch}")));
    }
    let grid = h / patch;
    let row_len = patch * patch * 3;
    let mut out = Tensor::zeros(&[grid * grid, row_len]);
    for pi in 0..grid {
        for pj in 0..grid {
            let row = out.row_mut(pi * grid + pj);
            let mut o = 0;
            for dy in 0..patch {
                let y = pi * patch + dy;
                for dx in 0..patch {
                    let x = pj * patch + dx;
                    let base = (y * h + x) * 3;
                    row[o..o + 3].copy_from_slice(&img.data()[base..base + 3]);
                    o += 3;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ImageEncoder<T: Scalar> {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear<T>,
    pub pos_emb: Parameter<T>,
    pub cls: Parameter<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub refine1_w: Parameter<T>,
    pub refine1_b: Parameter<T>,
    pub refine2_w: Parameter<T>,
    pub refine2_b: Parameter<T>,
}

impl<T: Scalar> ImageEncoder<T> {
    pub fn new(cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let c = cfg.refine_channels;
        let blocks = (0..cfg.layers)
            .map(|i| EncoderBlock::new(&format!("img.block{i}"), d, cfg.heads, d * cfg.ffn_mult, rng))
            .collect();
        Ok(ImageEncoder {
            cfg,
            patch_embed: Linear::new("img.embed", cfg.patch * cfg.patch * 3, d, Init::TruncNormal(0.02), rng),
            pos_emb: Parameter::new("img.pos", Tensor::trunc_normal(&[cfg.num_tokens(), d], 0.02, rng)),
            cls: Parameter::new("img.cls", Tensor::trunc_normal(&[1, d], 0.02, rng)),
            blocks,
            refine1_w: Parameter::new("img.refine1.w", Tensor::trunc_normal(&[9 * d, c], 0.02, rng)),
            refine1_b: Parameter::new("img.refine1.b", Tensor::zeros(&[c])),
            refine2_w: Parameter::new("img.refine2.w", Tensor::trunc_normal(&[9 * c, c], 0.02, rng)),
            refine2_b: Parameter::new("img.refine2.b", Tensor::zeros(&[c])),
        })
    }

    /// Image -> [1+P, D] tokens (class token first).
    pub fn encode(&self, g: &mut Graph<T>, img: &Tensor<T>) -> Result<Var> {
        let patches = patchify(img, self.cfg.patch)?;
        if patches.rows() != self.cfg.num_patches() {
            return Err(Error::Shape(format!(
                "image {:?} does not match encoder config ({} patches expected)",
                img.shape(),
                self.cfg.num_patches()
            )));
        }
        let x = g.constant(patches);
        let tok = self.patch_embed.forward(g, x)?;
        let cls = g.param(&self.cls);
        let tok = g.concat_rows(&[cls, tok]);
        let pos = g.param(&self.pos_emb);
        let mut tok = g.add(tok, pos);
        for b in &self.blocks {
            tok = b.forward(g, tok)?;
        }
        Ok(tok)
    }

    /// Drop the class token, fold patch tokens back onto their grid, and
    /// refine with two 3x3 convolutions: [G, G, refine_channels].
    pub fn refine_feature_map(&self, g: &mut Graph<T>, tokens: Var) -> Result<Var> {
        let n = g.val(tokens).rows();
        let p = n - 1;
        let grid = (p as f64).sqrt().round() as usize;
        if grid * grid != p {
            return Err(Error::Shape(format!("{p} patch tokens do not form a square grid")));
        }
        let patch_tok = g.slice_rows(tokens, 1, p);
        let grid_map = g.reshape(patch_tok, &[grid, grid, self.cfg.dim]);
        let w1 = g.param(&self.refine1_w);
        let b1 = g.param(&self.refine1_b);
        let h = g.conv_grid_3x3(grid_map, w1, b1)?;
        let h = g.relu(h);
        let w2 = g.param(&self.refine2_w);
        let b2 = g.param(&self.refine2_b);
        g.conv_grid_3x3(h, w2, b2)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = self.patch_embed.params();
        out.push(&self.pos_emb);
        out.push(&self.cls);
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend([&self.refine1_w, &self.refine1_b, &self.refine2_w, &self.refine2_b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.patch_embed.params_mut();
        out.push(&mut self.pos_emb);
        out.push(&mut self.cls);
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend([
            &mut self.refine1_w,
            &mut self.refine1_b,
            &mut self.refine2_w,
            &mut self.refine2_b,
        ]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_cfg() -> EncoderConfig {
        EncoderConfig {
            image_size: 64,
            patch: 8,
            dim: 128,
            layers: 6,
            heads: 4,
            ffn_mult: 2,
            refine_channels: 128,
        }
    }

    #[test]
    fn token_count_law() {
        // full-scale config: 224/14 -> 257 tokens, 16x16 refined grid
        let full = EncoderConfig {
            image_size: 224,
            patch: 14,
            dim: 1024,
            layers: 2, // construction check only
            heads: 8,
            ffn_mult: 2,
            refine_channels: 128,
        };
        assert_eq!(full.num_tokens(), 257);
        assert_eq!(full.grid(), 16);
        assert_eq!(desk_cfg().num_tokens(), 65);
        assert_eq!(desk_cfg().grid(), 8);
        let bad = EncoderConfig { image_size: 65, ..desk_cfg() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn encode_is_deterministic_and_sized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = EncoderConfig { image_size: 16, patch: 8, dim: 32, layers: 2, heads: 2, ffn_mult: 2, refine_channels: 16 };
        let enc = ImageEncoder::<f32>::new(cfg, &mut rng).unwrap();
        let img = {
            let mut t = Tensor::<f32>::zeros(&[16, 16, 3]);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = (i % 97) as f32 / 97.0;
            }
            t
        };
        let run = || {
            let mut g = Graph::inference();
            let tok = enc.encode(&mut g, &img).unwrap();
            g.val(tok).data().to_vec()
        };
        let a = run();
        assert_eq!(a.len(), 5 * 32); // 1 + 4 patches
        assert_eq!(a, run());
    }

    #[test]
    fn patch_receptive_field_is_its_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = EncoderConfig { image_size: 32, patch: 8, dim: 24, layers: 1, heads: 2, ffn_mult: 2, refine_channels: 8 };
        let enc = ImageEncoder::<f64>::new(cfg, &mut rng).unwrap();
        let img = Tensor::<f64>::randn(&[32, 32, 3], 1.0, &mut rng);
        // zero every patch except (1, 2); its pre-transformer embedding row
        // must be bitwise unchanged
        let mut masked = Tensor::<f64>::zeros(&[32, 32, 3]);
        for y in 8..16 {
            for x in 16..24 {
                for c in 0..3 {
                    masked.data_mut()[(y * 32 + x) * 3 + c] = img.data()[(y * 32 + x) * 3 + c];
                }
            }
        }
        let embed = |im: &Tensor<f64>| {
            let mut g = Graph::inference();
            let x = g.constant(patchify(im, 8).unwrap());
            let tok = enc.patch_embed.forward(&mut g, x).unwrap();
            g.val(tok).row(1 * 4 + 2).to_vec()
        };
        assert_eq!(embed(&img), embed(&masked));
    }

    #[test]
    fn refine_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EncoderConfig { image_size: 16, patch: 4, dim: 20, layers: 1, heads: 2, ffn_mult: 2, refine_channels: 12 };
        let enc = ImageEncoder::<f32>::new(cfg, &mut rng).unwrap();
        let img = Tensor::<f32>::zeros(&[16, 16, 3]);
        let mut g = Graph::inference();
        let tok = enc.encode(&mut g, &img).unwrap();
        assert_eq!(g.val(tok).shape(), &[17, 20]);
        let fmap = enc.refine_feature_map(&mut g, tok).unwrap();
        assert_eq!(g.val(fmap).shape(), &[4, 4, 12]);
    }

    #[test]
    fn full_encoder_grad_check_on_toy_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = EncoderConfig { image_size: 16, patch: 8, dim: 8, layers: 1, heads: 2, ffn_mult: 2, refine_channels: 6 };
        let mut enc = ImageEncoder::<f64>::new(cfg, &mut rng).unwrap();
        let img = Tensor::<f64>::randn(&[16, 16, 3], 0.5, &mut rng);
        let report = grad_check(
            &mut enc,
            |e| e.params_mut(),
            |e, g| {
                let tok = e.encode(g, &img)?;
                let fmap = e.refine_feature_map(g, tok)?;
                let sq = g.mul(fmap, fmap);
                Ok(g.sum_all(sq))
            },
            4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
