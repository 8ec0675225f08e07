//! Dense stage: upsample the sparse cloud by factors of 2 and 4. Each
//! block mixes per-point coordinate features, a global pooled context, and
//! pixel-aligned image features, attends over the k nearest of the object
//! points plus hand context tokens, and predicts per-point offsets.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample_op, knn_indices, project_points_op, CameraParams};
use crate::graph::{Graph, Parameter, Var};
use crate::nn::{Init, LayerNorm, Linear, Mha};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct DenseConfig {
    pub image_feat_dim: usize,
    pub coord_channels: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub k: usize,
    pub factors: [usize; 2],
}

/// Project points (optionally shifted by a [1,3] camera-space offset node)
/// and sample the refined feature map at the projections.
pub fn pixel_aligned_features<T: Scalar>(
    g: &mut Graph<T>,
    points: Var,
    offset: Option<Var>,
    cam: &CameraParams,
    fmap: Var,
) -> Result<(Var, Vec<bool>)> {
    let shifted = match offset {
        Some(o) => {
            if g.val(o).shape() != [1, 3] {
                return Err(Error::Shape(format!(
                    "camera-space offset must be [1,3], got {:?}",
                    g.val(o).shape()
                )));
            }
            let rep = g.repeat_rows(o, g.val(points).rows());
            g.add(points, rep)
        }
        None => points,
    };
    let (uv, flags) = project_points_op(g, shifted, cam);
    let f = bilinear_sample_op(g, fmap, uv, cam.image_size)?;
    Ok((f, flags))
}

/// Neighborhood mask for attention: object point i may attend to key j
/// (over object ∪ hand tokens) iff j is among the k nearest in the union.
pub fn knn_attention_mask<T: Scalar>(
    obj: &Tensor<T>,
    hand: &Tensor<T>,
    k: usize,
) -> Result<Vec<bool>> {
    let n = obj.rows();
    let nh = hand.rows();
    let mut union = Tensor::zeros(&[n + nh, 3]);
    for i in 0..n {
        union.row_mut(i).copy_from_slice(obj.row(i));
    }
    for i in 0..nh {
        union.row_mut(n + i).copy_from_slice(hand.row(i));
    }
    let knn = knn_indices(&union, k)?;
    let mut mask = vec![false; n * (n + nh)];
    for (i, row) in knn.iter().take(n).enumerate() {
        for &j in row {
            mask[i * (n + nh) + j] = true;
        }
    }
    Ok(mask)
}

#[derive(Clone, Debug)]
pub struct UpsampleBlock<T: Scalar> {
    pub factor: usize,
    pub k: usize,
    pub coord1: Linear<T>,
    pub coord2: Linear<T>,
    pub in_proj: Linear<T>,
    pub ln1: LayerNorm<T>,
    pub attn: Mha<T>,
    pub ln2: LayerNorm<T>,
    pub ffn1: Linear<T>,
    pub ffn2: Linear<T>,
    pub off1: Linear<T>,
    pub off2: Linear<T>,
    pub off3: Linear<T>,
}

impl<T: Scalar> UpsampleBlock<T> {
    pub fn new(name: &str, cfg: &DenseConfig, factor: usize, rng: &mut impl Rng) -> Self {
        let c = cfg.coord_channels;
        let d = cfg.attn_dim;
        let init = Init::TruncNormal(0.02);
        UpsampleBlock {
            factor,
            k: cfg.k,
            coord1: Linear::new(&format!("{name}.coord1"), 3, c, init, rng),
            coord2: Linear::new(&format!("{name}.coord2"), c, c, init, rng),
            in_proj: Linear::new(&format!("{name}.in_proj"), 2 * c + cfg.image_feat_dim, d, init, rng),
            ln1: LayerNorm::new(&format!("{name}.ln1"), d),
            attn: Mha::new(&format!("{name}.attn"), d, cfg.heads, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d),
            ffn1: Linear::new(&format!("{name}.ffn1"), d, 2 * d, init, rng),
            ffn2: Linear::new(&format!("{name}.ffn2"), 2 * d, d, init, rng),
            off1: Linear::new(&format!("{name}.off1"), d, d, init, rng),
            off2: Linear::new(&format!("{name}.off2"), d, d, init, rng),
            off3: Linear::new(&format!("{name}.off3"), d, 3, Init::Zeros, rng),
        }
    }

    /// `points` [N,3] object points; `f_obj` [N,Ci] and `f_hand` [Nh,Ci]
    /// pixel-aligned features; `hand_pos` [Nh,3] hand tokens in the same
    /// frame as the points. Returns [N·factor, 3].
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        points: Var,
        f_obj: Var,
        hand_pos: Var,
        f_hand: Var,
    ) -> Result<Var> {
        let n = g.val(points).rows();
        let mask = knn_attention_mask(g.val(points), g.val(hand_pos), self.k)?;

        let all_pos = g.concat_rows(&[points, hand_pos]);
        let c = self.coord1.forward(g, all_pos)?;
        let c = g.gelu(c);
        let c = self.coord2.forward(g, c)?;
        let global = g.max_pool_rows(c)?;
        let glob_rep = g.repeat_rows(global, g.val(c).rows());
        let f_all = g.concat_rows(&[f_obj, f_hand]);
        let feat = g.concat_cols(&[c, glob_rep, f_all]);
        let x = self.in_proj.forward(g, feat)?;

        let x_obj = g.slice_rows(x, 0, n);
        let normed = self.ln1.forward(g, x);
        let qn = g.slice_rows(normed, 0, n);
        let att = self.attn.forward(g, qn, normed, Some(&mask))?;
        let x_obj = g.add(x_obj, att);
        let n2 = self.ln2.forward(g, x_obj);
        let h = self.ffn1.forward(g, n2)?;
        let h = g.gelu(h);
        let h = self.ffn2.forward(g, h)?;
        let x_obj = g.add(x_obj, h);

        let up = g.upsample_rows_linear(x_obj, self.factor)?;
        let o = self.off1.forward(g, up)?;
        let o = g.gelu(o);
        let o = self.off2.forward(g, o)?;
        let o = g.gelu(o);
        let off = self.off3.forward(g, o)?;
        let parents = g.repeat_rows(points, self.factor);
        Ok(g.add(parents, off))
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = Vec::new();
        out.extend(self.coord1.params());
        out.extend(self.coord2.params());
        out.extend(self.in_proj.params());
        out.extend(self.ln1.params());
        out.extend(self.attn.params());
        out.extend(self.ln2.params());
        out.extend(self.ffn1.params());
        out.extend(self.ffn2.params());
        out.extend(self.off1.params());
        out.extend(self.off2.params());
        out.extend(self.off3.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = Vec::new();
        out.extend(self.coord1.params_mut());
        out.extend(self.coord2.params_mut());
        out.extend(self.in_proj.params_mut());
        out.extend(self.ln1.params_mut());
        out.extend(self.attn.params_mut());
        out.extend(self.ln2.params_mut());
        out.extend(self.ffn1.params_mut());
        out.extend(self.ffn2.params_mut());
        out.extend(self.off1.params_mut());
        out.extend(self.off2.params_mut());
        out.extend(self.off3.params_mut());
        out
    }
}

#[derive(Clone, Debug)]
pub struct DenseDecoder<T: Scalar> {
    pub cfg: DenseConfig,
    pub blocks: Vec<UpsampleBlock<T>>,
}

impl<T: Scalar> DenseDecoder<T> {
    pub fn new(cfg: DenseConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.attn_dim % cfg.heads != 0 {
            return Err(Error::Invalid(format!(
                "dense decoder width {} not divisible by {} heads",
                cfg.attn_dim, cfg.heads
            )));
        }
        let blocks = cfg
            .factors
            .iter()
            .enumerate()
            .map(|(i, &f)| UpsampleBlock::new(&format!("dense.block{i}"), &cfg, f, rng))
            .collect();
        Ok(DenseDecoder { cfg, blocks })
    }

    pub fn upsample_factor(&self) -> usize {
        self.cfg.factors.iter().product()
    }

    /// `p_s` [N_s,3] centroid-centered object points; `shift` [1,3] node
    /// holding t_p + t_o; `hand_cam` [Nh,3] hand tokens in camera frame.
    /// Pixel-aligned features are re-retrieved for every block.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        p_s: Var,
        shift: Var,
        hand_cam: Var,
        cam: &CameraParams,
        fmap: Var,
    ) -> Result<Var> {
        // hand tokens expressed in the object-centered frame for distances
        let nh = g.val(hand_cam).rows();
        let shift_rep = g.repeat_rows(shift, nh);
        let hand_rel = g.sub(hand_cam, shift_rep);
        let (f_hand, _) = pixel_aligned_features(g, hand_cam, None, cam, fmap)?;

        let mut points = p_s;
        for b in &self.blocks {
            let (f_obj, _) = pixel_aligned_features(g, points, Some(shift), cam, fmap)?;
            points = b.forward(g, points, f_obj, hand_rel, f_hand)?;
        }
        Ok(points)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{chamfer_distance, chamfer_distance_op};
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> DenseConfig {
        DenseConfig {
            image_feat_dim: 6,
            coord_channels: 8,
            attn_dim: 8,
            heads: 2,
            k: 4,
            factors: [2, 4],
        }
    }

    fn toy_cam() -> CameraParams {
        CameraParams::new([0.0, 0.0, 0.5], 1.0, 40.0, [16.0, 16.0], (32, 32)).unwrap()
    }

    #[test]
    fn pixel_aligned_shapes_and_cell_center_exactness() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = toy_cam();
        let fmap_t = Tensor::<f64>::randn(&[4, 4, 6], 1.0, &mut rng);
        // point that projects to the center of cell (1, 2): pixel (20, 12)
        // u = f*x/z + cx => x = (20-16)*z/f
        let z = 0.5f64;
        let px = (20.0 - 16.0) * z / 40.0;
        let py = (12.0 - 16.0) * z / 40.0;
        let pts = Tensor::from_vec(&[1, 3], vec![px, py, 0.0]).unwrap();
        let mut g = Graph::inference();
        let p = g.constant(pts);
        let fmap = g.constant(fmap_t.clone());
        let (f, flags) = pixel_aligned_features(&mut g, p, None, &cam, fmap).unwrap();
        assert_eq!(g.val(f).shape(), &[1, 6]);
        assert!(!flags[0]);
        let base = (1 * 4 + 2) * 6;
        assert_eq!(g.val(f).row(0), &fmap_t.data()[base..base + 6]);
    }

    #[test]
    fn pixel_aligned_two_path_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cam = toy_cam();
        let fmap_t = Tensor::<f64>::randn(&[4, 4, 6], 1.0, &mut rng);
        let pts = Tensor::<f64>::randn(&[10, 3], 0.02, &mut rng);
        let shift_t = Tensor::from_vec(&[1, 3], vec![0.01f64, -0.02, 0.05]).unwrap();
        let a = {
            let mut g = Graph::inference();
            let p = g.constant(pts.clone());
            let s = g.constant(shift_t.clone());
            let fmap = g.constant(fmap_t.clone());
            let (f, _) = pixel_aligned_features(&mut g, p, Some(s), &cam, fmap).unwrap();
            g.val(f).data().to_vec()
        };
        let b = {
            let mut g = Graph::inference();
            let p = g.constant(pts.clone());
            let s = g.constant(shift_t.clone());
            let rep = g.repeat_rows(s, 10);
            let shifted = g.add(p, rep);
            let fmap = g.constant(fmap_t.clone());
            let (f, _) = pixel_aligned_features(&mut g, shifted, None, &cam, fmap).unwrap();
            g.val(f).data().to_vec()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn cardinality_law_and_zero_offset_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = DenseDecoder::<f64>::new(toy_cfg(), &mut rng).unwrap();
        assert_eq!(dec.upsample_factor(), 8);
        let cam = toy_cam();
        let pts = Tensor::<f64>::randn(&[16, 3], 0.02, &mut rng);
        let hand = Tensor::<f64>::randn(&[6, 3], 0.03, &mut rng);
        let fmap_t = Tensor::<f64>::randn(&[4, 4, 6], 1.0, &mut rng);
        let mut g = Graph::inference();
        let p = g.constant(pts.clone());
        let shift = g.constant(Tensor::from_vec(&[1, 3], vec![0.0f64, 0.0, 0.1]).unwrap());
        let h = g.constant(hand);
        let fmap = g.constant(fmap_t);
        let out = dec.decode(&mut g, p, shift, h, &cam, fmap).unwrap();
        assert_eq!(g.val(out).shape(), &[128, 3]);
        // zero-initialized offset heads: every output coincides with its
        // parent, so chamfer against the 8x-repeated parents is exactly 0
        let mut repeated = Tensor::<f64>::zeros(&[128, 3]);
        for i in 0..128 {
            repeated.row_mut(i).copy_from_slice(pts.row(i / 8));
        }
        assert_eq!(g.val(out).data(), repeated.data());
        assert_eq!(chamfer_distance(g.val(out), &repeated).unwrap(), 0.0);
    }

    #[test]
    fn knn_mask_matches_oracle_and_attention_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obj = Tensor::<f64>::randn(&[24, 3], 0.05, &mut rng);
        let hand = Tensor::<f64>::randn(&[8, 3], 0.05, &mut rng);
        let k = 5;
        let mask = knn_attention_mask(&obj, &hand, k).unwrap();
        // brute-force oracle over the union
        let mut union = Tensor::<f64>::zeros(&[32, 3]);
        for i in 0..24 {
            union.row_mut(i).copy_from_slice(obj.row(i));
        }
        for i in 0..8 {
            union.row_mut(24 + i).copy_from_slice(hand.row(i));
        }
        for i in 0..24 {
            let mut d: Vec<(f64, usize)> = (0..32)
                .map(|j| {
                    let dd: f64 = (0..3)
                        .map(|c| (union.row(i)[c] - union.row(j)[c]).powi(2))
                        .sum();
                    (if j == i { -1.0 } else { dd }, j)
                })
                .collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let want: std::collections::HashSet<usize> = d[..k].iter().map(|&(_, j)| j).collect();
            for j in 0..32 {
                assert_eq!(mask[i * 32 + j], want.contains(&j), "query {i} key {j}");
            }
        }
        // non-neighbor attention weights are exactly zero
        let mha = Mha::<f64>::new("t", 8, 2, &mut rng);
        let q = Tensor::<f64>::randn(&[24, 8], 1.0, &mut rng);
        let kv = Tensor::<f64>::randn(&[32, 8], 1.0, &mut rng);
        for a in mha.attention_weights(&q, &kv, Some(&mask)) {
            for i in 0..24 {
                for j in 0..32 {
                    if !mask[i * 32 + j] {
                        assert_eq!(a.row(i)[j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn k_larger_than_token_count_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let obj = Tensor::<f64>::randn(&[4, 3], 0.05, &mut rng);
        let hand = Tensor::<f64>::randn(&[4, 3], 0.05, &mut rng);
        assert!(knn_attention_mask(&obj, &hand, 16).is_err());
        assert!(knn_attention_mask(&obj, &hand, 8).is_ok());
    }

    #[test]
    fn grad_check_through_both_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut dec = DenseDecoder::<f64>::new(toy_cfg(), &mut rng).unwrap();
        // non-zero offset heads so outputs spread away from their parents;
        // near-duplicate predictions would make nearest-neighbor
        // correspondences flip under finite-difference probes
        for b in &mut dec.blocks {
            b.off3.w.value = Tensor::randn(&[8, 3], 0.2, &mut rng);
        }
        let cam = toy_cam();
        let pts = Tensor::<f64>::randn(&[8, 3], 0.02, &mut rng);
        let hand = Tensor::<f64>::randn(&[4, 3], 0.03, &mut rng);
        let fmap_t = Tensor::<f64>::randn(&[4, 4, 6], 0.5, &mut rng);
        let gt = Tensor::<f64>::randn(&[64, 3], 0.03, &mut rng);
        let report = grad_check(
            &mut dec,
            |d| d.params_mut(),
            |d, g| {
                let p = g.constant(pts.clone());
                let shift = g.constant(Tensor::from_vec(&[1, 3], vec![0.0f64, 0.0, 0.1]).unwrap());
                let h = g.constant(hand.clone());
                let fmap = g.constant(fmap_t.clone());
                let out = d.decode(g, p, shift, h, &cam, fmap)?;
                chamfer_distance_op(g, out, &gt)
            },
            3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "rel err {}", report.max_rel_err);
    }
}
