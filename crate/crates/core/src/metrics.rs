//! Point-cloud losses and evaluation metrics. Distances are computed in
//! centimeters internally so reported units match convention (CD in cm²,
//! penetration in cm).

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::shapes::PrimitiveSpec;
use crate::tensor::{Scalar, Tensor};

const M_TO_CM: f64 = 100.0;

fn nearest_sq<T: Scalar>(p: &[T], cloud: &Tensor<T>) -> (f64, usize) {
    let mut best = f64::INFINITY;
    let mut arg = 0;
    for j in 0..cloud.rows() {
        let q = cloud.row(j);
        let d: f64 = (0..3).map(|k| (p[k].as_f64() - q[k].as_f64()).powi(2)).sum();
        if d < best {
            best = d;
            arg = j;
        }
    }
    (best, arg)
}

/// Symmetric Chamfer distance in cm²: mean squared nearest-neighbor
/// distance per direction, summed. Inputs are [N,3] in meters.
pub fn chamfer_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Invalid("chamfer distance of an empty cloud".into()));
    }
    let dir = |x: &Tensor<T>, y: &Tensor<T>| -> f64 {
        let mut acc = 0.0;
        for i in 0..x.rows() {
            acc += nearest_sq(x.row(i), y).0;
        }
        acc / x.rows() as f64 * M_TO_CM * M_TO_CM
    };
    Ok(dir(a, b) + dir(b, a))
}

/// Chamfer distance as a graph op over the predicted cloud (gt fixed).
/// The backward pass holds the nearest-neighbor correspondences fixed.
pub fn chamfer_distance_op<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    gt: &Tensor<T>,
) -> Result<Var> {
    if g.val(pred).rows() == 0 || gt.rows() == 0 {
        return Err(Error::Invalid("chamfer distance of an empty cloud".into()));
    }
    let value = Tensor::scalar(T::from_f64(chamfer_distance(g.val(pred), gt)?));
    let gt = gt.clone();
    Ok(g.push_op(value, vec![pred], move || {
        Box::new(move |gr, node, gout| {
            let p = gr.val(gr.parent(node, 0));
            let (na, nb) = (p.rows(), gt.rows());
            let go = gout.item().as_f64();
            let cm2 = M_TO_CM * M_TO_CM;
            let mut dp = Tensor::<T>::zeros(&[na, 3]);
            for i in 0..na {
                let (_, j) = nearest_sq(p.row(i), &gt);
                for k in 0..3 {
                    let diff = p.row(i)[k].as_f64() - gt.row(j)[k].as_f64();
                    let cur = dp.row_mut(i)[k].as_f64();
                    dp.row_mut(i)[k] = T::from_f64(cur + go * 2.0 * diff * cm2 / na as f64);
                }
            }
            for j in 0..nb {
                let (_, i) = nearest_sq(gt.row(j), p);
                for k in 0..3 {
                    let diff = p.row(i)[k].as_f64() - gt.row(j)[k].as_f64();
                    let cur = dp.row_mut(i)[k].as_f64();
                    dp.row_mut(i)[k] = T::from_f64(cur + go * 2.0 * diff * cm2 / nb as f64);
                }
            }
            vec![dp]
        })
    }))
}

/// Harmonic F1 of precision/recall at threshold `tau` (meters).
pub fn f_score<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Invalid(format!("f-score threshold {tau} must be positive")));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Invalid("f-score of an empty cloud".into()));
    }
    let t2 = tau * tau;
    let frac_within = |x: &Tensor<T>, y: &Tensor<T>| -> f64 {
        let hits = (0..x.rows()).filter(|&i| nearest_sq(x.row(i), y).0 <= t2).count();
        hits as f64 / x.rows() as f64
    };
    let p = frac_within(a, b);
    let r = frac_within(b, a);
    if p + r == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * p * r / (p + r))
    }
}

/// True when the minimum hand-object distance is at most `eps` (meters,
/// closed threshold).
pub fn in_contact<T: Scalar>(hand_v: &Tensor<T>, obj: &Tensor<T>, eps: f64) -> Result<bool> {
    if hand_v.rows() == 0 || obj.rows() == 0 {
        return Err(Error::Invalid("contact test with an empty cloud".into()));
    }
    let e2 = eps * eps;
    for i in 0..hand_v.rows() {
        if nearest_sq(hand_v.row(i), obj).0 <= e2 {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Maximum interior depth of hand vertices w.r.t. an analytic surface, cm.
pub fn penetration_depth_sdf<T: Scalar>(hand_v: &Tensor<T>, obj: &PrimitiveSpec) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..hand_v.rows() {
        let p = [
            hand_v.row(i)[0].as_f64(),
            hand_v.row(i)[1].as_f64(),
            hand_v.row(i)[2].as_f64(),
        ];
        worst = worst.max(-obj.sdf(p));
    }
    worst.max(0.0) * M_TO_CM
}

/// Penetration against a surface point cloud: signed distance estimated
/// from the nearest surface point and its outward local-PCA normal.
pub fn penetration_depth_cloud<T: Scalar>(hand_v: &Tensor<T>, cloud: &Tensor<T>) -> Result<f64> {
    const K: usize = 8;
    if cloud.rows() < K {
        return Err(Error::Invalid(format!(
            "penetration estimate needs at least {K} surface points, got {}",
            cloud.rows()
        )));
    }
    let n = cloud.rows();
    let mut centroid = [0.0f64; 3];
    for j in 0..n {
        for k in 0..3 {
            centroid[k] += cloud.row(j)[k].as_f64();
        }
    }
    for v in &mut centroid {
        *v /= n as f64;
    }
    let mut worst = 0.0f64;
    for i in 0..hand_v.rows() {
        let p = [
            hand_v.row(i)[0].as_f64(),
            hand_v.row(i)[1].as_f64(),
            hand_v.row(i)[2].as_f64(),
        ];
        let (_, qi) = nearest_sq(hand_v.row(i), cloud);
        // K nearest cloud points around the anchor point
        let mut ds: Vec<(f64, usize)> = (0..n)
            .map(|j| {
                let d: f64 = (0..3)
                    .map(|k| (cloud.row(qi)[k].as_f64() - cloud.row(j)[k].as_f64()).powi(2))
                    .sum();
                (d, j)
            })
            .collect();
        ds.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let neigh: Vec<usize> = ds[..K].iter().map(|&(_, j)| j).collect();
        let mut mean = [0.0f64; 3];
        for &j in &neigh {
            for k in 0..3 {
                mean[k] += cloud.row(j)[k].as_f64();
            }
        }
        for v in &mut mean {
            *v /= K as f64;
        }
        let mut cov = [[0.0f64; 3]; 3];
        for &j in &neigh {
            let d = [
                cloud.row(j)[0].as_f64() - mean[0],
                cloud.row(j)[1].as_f64() - mean[1],
                cloud.row(j)[2].as_f64() - mean[2],
            ];
            for r in 0..3 {
                for cc in 0..3 {
                    cov[r][cc] += d[r] * d[cc];
                }
            }
        }
        let mut normal = smallest_eigenvector(cov);
        // orient away from the cloud centroid
        let anchor = [
            cloud.row(qi)[0].as_f64(),
            cloud.row(qi)[1].as_f64(),
            cloud.row(qi)[2].as_f64(),
        ];
        let out_dir = [
            anchor[0] - centroid[0],
            anchor[1] - centroid[1],
            anchor[2] - centroid[2],
        ];
        if normal[0] * out_dir[0] + normal[1] * out_dir[1] + normal[2] * out_dir[2] < 0.0 {
            for v in &mut normal {
                *v = -*v;
            }
        }
        let signed = (p[0] - anchor[0]) * normal[0]
            + (p[1] - anchor[1]) * normal[1]
            + (p[2] - anchor[2]) * normal[2];
        worst = worst.max(-signed);
    }
    Ok(worst.max(0.0) * M_TO_CM)
}

/// Smallest-eigenvalue eigenvector of a symmetric 3x3 matrix via cyclic
/// Jacobi rotations.
fn smallest_eigenvector(mut a: [[f64; 3]; 3]) -> [f64; 3] {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..32 {
        // largest off-diagonal element
        let (mut p, mut q, mut biggest) = (0, 1, a[0][1].abs());
        for (r, c) in [(0usize, 2usize), (1, 2)] {
            if a[r][c].abs() > biggest {
                biggest = a[r][c].abs();
                p = r;
                q = c;
            }
        }
        if biggest < 1e-14 {
            break;
        }
        let theta = 0.5 * (2.0 * a[p][q]).atan2(a[q][q] - a[p][p]);
        let (s, c) = theta.sin_cos();
        let mut rot = [[0.0; 3]; 3];
        for (i, row) in rot.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        rot[p][p] = c;
        rot[q][q] = c;
        rot[p][q] = s;
        rot[q][p] = -s;
        // a = rotᵀ a rot; v = v rot
        let mut tmp = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                tmp[i][j] = (0..3).map(|k| a[i][k] * rot[k][j]).sum();
            }
        }
        let mut a2 = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a2[i][j] = (0..3).map(|k| rot[k][i] * tmp[k][j]).sum();
            }
        }
        a = a2;
        let mut v2 = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                v2[i][j] = (0..3).map(|k| v[i][k] * rot[k][j]).sum();
            }
        }
        v = v2;
    }
    let mut arg = 0;
    for i in 1..3 {
        if a[i][i] < a[arg][arg] {
            arg = i;
        }
    }
    let col = [v[0][arg], v[1][arg], v[2][arg]];
    let n = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
    [col[0] / n, col[1] / n, col[2] / n]
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_t: f64,  // translation term
    pub lambda_cd: f64, // sparse chamfer term
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_t: 2.0, lambda_cd: 2.0 }
    }
}

pub struct LossBreakdown<T: Scalar> {
    pub total: Var,
    pub t_l1_cm: T,
    pub cd_sparse: T,
    pub cd_dense: T,
}

/// L = λ1·‖t_o − t̂_o‖₁ (cm) + λ2·CD_sparse + CD_dense (cm²).
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    t_o_pred: Var,
    sparse_pred: Var,
    dense_pred: Var,
    t_o_gt: &Tensor<T>,
    sparse_gt: &Tensor<T>,
    dense_gt: &Tensor<T>,
    w: LossWeights,
) -> Result<LossBreakdown<T>> {
    if g.val(t_o_pred).len() != t_o_gt.len() {
        return Err(Error::Shape(format!(
            "translation prediction {:?} vs target {:?}",
            g.val(t_o_pred).shape(),
            t_o_gt.shape()
        )));
    }
    let gt = g.constant(t_o_gt.clone());
    let l1_m = g.l1_diff(t_o_pred, gt)?;
    let l1_cm = g.scale(l1_m, T::from_f64(M_TO_CM));
    let cd_s = chamfer_distance_op(g, sparse_pred, sparse_gt)?;
    let cd_d = chamfer_distance_op(g, dense_pred, dense_gt)?;
    let a = g.scale(l1_cm, T::from_f64(w.lambda_t));
    let b = g.scale(cd_s, T::from_f64(w.lambda_cd));
    let ab = g.add(a, b);
    let total = g.add(ab, cd_d);
    Ok(LossBreakdown {
        total,
        t_l1_cm: g.val(l1_cm).item(),
        cd_sparse: g.val(cd_s).item(),
        cd_dense: g.val(cd_d).item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidFrame;
    use crate::graph::Parameter;
    use crate::nn::grad_check;
    use crate::shapes::PrimitiveKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chamfer_zero_singleton_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn(&[32, 3], 0.1, &mut rng);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);

        // singletons at distance d meters: CD = 2 d² in cm²
        let p = Tensor::from_vec(&[1, 3], vec![0.0f64, 0.0, 0.0]).unwrap();
        let q = Tensor::from_vec(&[1, 3], vec![0.0f64, 0.0, 0.03]).unwrap();
        let want = 2.0 * (0.03 * 100.0f64).powi(2);
        assert!((chamfer_distance(&p, &q).unwrap() - want).abs() < 1e-9);

        let b = Tensor::<f64>::randn(&[20, 3], 0.1, &mut rng);
        assert_eq!(
            chamfer_distance(&a, &b).unwrap().to_bits(),
            chamfer_distance(&b, &a).unwrap().to_bits()
        );
        assert!(chamfer_distance(&a, &Tensor::<f64>::zeros(&[0, 3])).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::randn(&[128, 3], 0.1, &mut rng);
        let b = Tensor::<f64>::randn(&[128, 3], 0.1, &mut rng);
        let got = chamfer_distance(&a, &b).unwrap();
        let mut want = 0.0;
        for i in 0..128 {
            let mut m = f64::INFINITY;
            for j in 0..128 {
                let d: f64 = (0..3).map(|k| (a.row(i)[k] - b.row(j)[k]).powi(2)).sum();
                m = m.min(d);
            }
            want += m / 128.0 * 1e4;
        }
        for j in 0..128 {
            let mut m = f64::INFINITY;
            for i in 0..128 {
                let d: f64 = (0..3).map(|k| (a.row(i)[k] - b.row(j)[k]).powi(2)).sum();
                m = m.min(d);
            }
            want += m / 128.0 * 1e4;
        }
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn f_score_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[16, 3], 0.1, &mut rng);
        assert_eq!(f_score(&a, &a, 0.005).unwrap(), 1.0);
        let far = a.map(|v| v + 1.0);
        assert_eq!(f_score(&a, &far, 0.005).unwrap(), 0.0);
        assert!(f_score(&a, &a, 0.0).is_err());

        let a3 = Tensor::from_vec(
            &[3, 3],
            vec![0.0f64, 0.0, 0.0, 0.003, 0.0, 0.0, 0.020, 0.0, 0.0],
        )
        .unwrap();
        let b1 = Tensor::from_vec(&[1, 3], vec![0.0f64, 0.0, 0.0]).unwrap();
        assert!((f_score(&a3, &b1, 0.005).unwrap() - 0.8).abs() < 1e-12);

        // monotone in tau
        let b = Tensor::<f64>::randn(&[16, 3], 0.1, &mut rng);
        let mut prev = 0.0;
        for tau in [0.001, 0.01, 0.05, 0.2, 1.0] {
            let f = f_score(&a, &b, tau).unwrap();
            assert!(f >= prev);
            prev = f;
        }
    }

    #[test]
    fn contact_threshold_is_closed() {
        let hand = Tensor::from_vec(&[1, 3], vec![0.0f64, 0.0, 0.0]).unwrap();
        let obj = Tensor::from_vec(&[1, 3], vec![0.005f64, 0.0, 0.0]).unwrap();
        assert!(in_contact(&hand, &obj, 0.005).unwrap());
        let far = Tensor::from_vec(&[1, 3], vec![1.0f64, 0.0, 0.0]).unwrap();
        assert!(!in_contact(&hand, &far, 0.005).unwrap());
        assert!(in_contact(&hand, &obj, 0.0051).unwrap());
        assert!(in_contact(&hand, &Tensor::<f64>::zeros(&[0, 3]), 0.005).is_err());
    }

    fn unit_sphere() -> PrimitiveSpec {
        PrimitiveSpec {
            kind: PrimitiveKind::Sphere,
            size: vec![1.0],
            pose: RigidFrame::identity(),
        }
    }

    #[test]
    fn penetration_sphere_closed_form() {
        let sphere = unit_sphere();
        let outside = Tensor::from_vec(&[1, 3], vec![2.0f64, 0.0, 0.0]).unwrap();
        assert_eq!(penetration_depth_sdf(&outside, &sphere), 0.0);
        let inside = Tensor::from_vec(&[1, 3], vec![0.9f64, 0.0, 0.0]).unwrap();
        let d = penetration_depth_sdf(&inside, &sphere);
        assert!((d - 10.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn penetration_cloud_path_tracks_analytic() {
        let sphere = unit_sphere();
        let cloud = sphere.sample_surface::<f64>(4096, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            // random interior vertex, radius in [0.7, 0.98]
            let dir = {
                let v = Tensor::<f64>::randn(&[1, 3], 1.0, &mut rng);
                let n = (v.row(0)[0].powi(2) + v.row(0)[1].powi(2) + v.row(0)[2].powi(2)).sqrt();
                [v.row(0)[0] / n, v.row(0)[1] / n, v.row(0)[2] / n]
            };
            let r = 0.7 + 0.28 * rand::Rng::gen::<f64>(&mut rng);
            let v = Tensor::from_vec(&[1, 3], vec![dir[0] * r, dir[1] * r, dir[2] * r]).unwrap();
            let exact = penetration_depth_sdf(&v, &sphere);
            let est = penetration_depth_cloud(&v, &cloud).unwrap();
            assert!(
                (est - exact).abs() / exact < 0.05,
                "exact {exact} cm vs cloud {est} cm"
            );
        }
        assert!(penetration_depth_cloud(&cloud, &Tensor::<f64>::zeros(&[4, 3])).is_err());
    }

    #[test]
    fn total_loss_cases_and_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sparse_gt = Tensor::<f64>::randn(&[24, 3], 0.05, &mut rng);
        let dense_gt = Tensor::<f64>::randn(&[48, 3], 0.05, &mut rng);
        let t_gt = Tensor::from_vec(&[1, 3], vec![0.02f64, -0.01, 0.05]).unwrap();

        // perfect prediction -> 0
        {
            let mut g = Graph::inference();
            let t = g.constant(t_gt.clone());
            let s = g.constant(sparse_gt.clone());
            let d = g.constant(dense_gt.clone());
            let l = total_loss(&mut g, t, s, d, &t_gt, &sparse_gt, &dense_gt, LossWeights::default())
                .unwrap();
            assert_eq!(g.val(l.total).item(), 0.0);
        }

        // translation off by 1 cm in x, lambda 2 -> total 2
        {
            let mut g = Graph::inference();
            let mut off = t_gt.clone();
            off.row_mut(0)[0] += 0.01;
            let t = g.constant(off);
            let s = g.constant(sparse_gt.clone());
            let d = g.constant(dense_gt.clone());
            let l = total_loss(&mut g, t, s, d, &t_gt, &sparse_gt, &dense_gt, LossWeights::default())
                .unwrap();
            assert!((g.val(l.total).item() - 2.0).abs() < 1e-9);
        }

        // gradient check w.r.t. all three predictions
        struct M {
            t: Parameter<f64>,
            s: Parameter<f64>,
            d: Parameter<f64>,
        }
        let mut m = M {
            t: Parameter::new("t", Tensor::randn(&[1, 3], 0.02, &mut rng)),
            s: Parameter::new("s", Tensor::randn(&[24, 3], 0.05, &mut rng)),
            d: Parameter::new("d", Tensor::randn(&[48, 3], 0.05, &mut rng)),
        };
        let report = grad_check(
            &mut m,
            |m| vec![&mut m.t, &mut m.s, &mut m.d],
            |m, g| {
                let t = g.param(&m.t);
                let s = g.param(&m.s);
                let d = g.param(&m.d);
                let l = total_loss(g, t, s, d, &t_gt, &sparse_gt, &dense_gt, LossWeights::default())?;
                Ok(l.total)
            },
            16,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
