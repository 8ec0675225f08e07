//! Non-learned geometry: pinhole projection, bilinear grid sampling,
//! local-frame transforms, k-nearest neighbors, farthest-point sampling.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Minimum camera-space depth in meters; anything closer is clamped.
pub const Z_MIN: f64 = 1e-4;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraParams {
    pub t_c: [f64; 3],
    pub s_c: f64,
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub image_size: (usize, usize), // (W, H)
}

impl CameraParams {
    pub fn new(
        t_c: [f64; 3],
        s_c: f64,
        focal: f64,
        principal_point: [f64; 2],
        image_size: (usize, usize),
    ) -> Result<Self> {
        if s_c <= 0.0 {
            return Err(Error::Invalid(format!("camera scale {s_c} must be positive")));
        }
        if focal <= 0.0 {
            return Err(Error::Invalid(format!("focal length {focal} must be positive")));
        }
        let (w, h) = image_size;
        let [cx, cy] = principal_point;
        if cx < 0.0 || cx > w as f64 || cy < 0.0 || cy > h as f64 {
            return Err(Error::Invalid(format!(
                "principal point ({cx}, {cy}) outside {w}x{h} image"
            )));
        }
        Ok(CameraParams { t_c, s_c, focal, principal_point, image_size })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RigidFrame {
    /// Row-major 3x3 rotation; columns are the frame axes in world coords.
    pub rotation: [f64; 9],
    pub origin: [f64; 3],
}

impl RigidFrame {
    pub fn identity() -> Self {
        RigidFrame { rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], origin: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k * 3 + i] * r[k * 3 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::Invalid(format!(
                        "frame rotation not orthonormal: col{i}.col{j} = {dot}"
                    )));
                }
            }
        }
        let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
            + r[2] * (r[3] * r[7] - r[4] * r[6]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("frame rotation det {det} != 1")));
        }
        Ok(())
    }

    /// World point into this frame: Rᵀ (p − origin).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.origin[0], p[1] - self.origin[1], p[2] - self.origin[2]];
        let r = &self.rotation;
        [
            r[0] * d[0] + r[3] * d[1] + r[6] * d[2],
            r[1] * d[0] + r[4] * d[1] + r[7] * d[2],
            r[2] * d[0] + r[5] * d[1] + r[8] * d[2],
        ]
    }

    /// Frame-local point back to world: R p + origin.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + self.origin[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + self.origin[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + self.origin[2],
        ]
    }

    /// Rotation about an axis-angle vector (Rodrigues), origin unchanged.
    pub fn from_axis_angle(axis_angle: [f64; 3], origin: [f64; 3]) -> Self {
        let theta =
            (axis_angle[0].powi(2) + axis_angle[1].powi(2) + axis_angle[2].powi(2)).sqrt();
        if theta < 1e-12 {
            return RigidFrame { rotation: RigidFrame::identity().rotation, origin };
        }
        let (x, y, z) = (axis_angle[0] / theta, axis_angle[1] / theta, axis_angle[2] / theta);
        let (s, c) = theta.sin_cos();
        let t = 1.0 - c;
        RigidFrame {
            rotation: [
                t * x * x + c,
                t * x * y - s * z,
                t * x * z + s * y,
                t * x * y + s * z,
                t * y * y + c,
                t * y * z - s * x,
                t * x * z - s * y,
                t * y * z + s * x,
                t * z * z + c,
            ],
            origin,
        }
    }

    /// Compose: apply `self` after `other` (self ∘ other).
    pub fn compose(&self, other: &RigidFrame) -> RigidFrame {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
            }
        }
        let o = self.to_world(other.origin);
        RigidFrame { rotation: r, origin: o }
    }
}

/// Log map of a rotation matrix (row-major) back to axis-angle.
pub fn rotation_to_axis_angle(r: &[f64; 9]) -> [f64; 3] {
    let trace = r[0] + r[4] + r[8];
    let cos_t = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_t.acos();
    if theta < 1e-12 {
        return [0.0; 3];
    }
    if theta < std::f64::consts::PI - 1e-6 {
        let k = theta / (2.0 * theta.sin());
        return [k * (r[7] - r[5]), k * (r[2] - r[6]), k * (r[3] - r[1])];
    }
    // near pi: axis from the diagonal of (R + I) / 2
    let ax = ((r[0] + 1.0) * 0.5).max(0.0).sqrt();
    let ay = ((r[4] + 1.0) * 0.5).max(0.0).sqrt();
    let az = ((r[8] + 1.0) * 0.5).max(0.0).sqrt();
    let (sx, sy) = if ax >= ay && ax >= az {
        (1.0, if r[1] + r[3] >= 0.0 { 1.0 } else { -1.0 })
    } else if ay >= az {
        (if r[1] + r[3] >= 0.0 { 1.0 } else { -1.0 }, 1.0)
    } else {
        (if r[2] + r[6] >= 0.0 { 1.0 } else { -1.0 }, if r[5] + r[7] >= 0.0 { 1.0 } else { -1.0 })
    };
    let sz = if ax >= ay && ax >= az {
        if r[2] + r[6] >= 0.0 { 1.0 } else { -1.0 }
    } else if ay >= az {
        if r[5] + r[7] >= 0.0 { 1.0 } else { -1.0 }
    } else {
        1.0
    };
    [theta * sx * ax, theta * sy * ay, theta * sz * az]
}

/// Pinhole projection of camera-space points (meters) to pixels.
/// Returns per-point flags marking depths clamped to [`Z_MIN`].
pub fn project_points<T: Scalar>(
    points: &Tensor<T>,
    cam: &CameraParams,
) -> (Tensor<T>, Vec<bool>) {
    let n = points.rows();
    let mut uv = Tensor::zeros(&[n, 2]);
    let mut clamped = vec![false; n];
    let s = cam.s_c;
    for i in 0..n {
        let p = points.row(i);
        let x = s * p[0].as_f64() + cam.t_c[0];
        let y = s * p[1].as_f64() + cam.t_c[1];
        let mut z = s * p[2].as_f64() + cam.t_c[2];
        if z <= Z_MIN {
            z = Z_MIN;
            clamped[i] = true;
        }
        uv.row_mut(i)[0] = T::from_f64(cam.focal * x / z + cam.principal_point[0]);
        uv.row_mut(i)[1] = T::from_f64(cam.focal * y / z + cam.principal_point[1]);
    }
    (uv, clamped)
}

/// Graph-op projection, differentiable w.r.t. the points. Gradients through
/// a clamped depth treat z as constant.
pub fn project_points_op<T: Scalar>(
    g: &mut Graph<T>,
    points: Var,
    cam: &CameraParams,
) -> (Var, Vec<bool>) {
    let (value, clamped) = project_points(g.val(points), cam);
    let cam = cam.clone();
    let flags = clamped.clone();
    let out = g.push_op(value, vec![points], move || {
        Box::new(move |gr, node, gout| {
            let p = gr.val(gr.parent(node, 0));
            let n = p.rows();
            let mut dp = Tensor::zeros(&[n, 3]);
            let s = cam.s_c;
            for i in 0..n {
                let row = p.row(i);
                let x = s * row[0].as_f64() + cam.t_c[0];
                let y = s * row[1].as_f64() + cam.t_c[1];
                let z = (s * row[2].as_f64() + cam.t_c[2]).max(Z_MIN);
                let (gu, gv) = (gout.row(i)[0].as_f64(), gout.row(i)[1].as_f64());
                let fs = cam.focal * s;
                let d = dp.row_mut(i);
                d[0] = T::from_f64(gu * fs / z);
                d[1] = T::from_f64(gv * fs / z);
                if !flags[i] {
                    d[2] = T::from_f64(-(gu * x + gv * y) * cam.focal * s / (z * z));
                }
            }
            vec![dp]
        })
    });
    (out, clamped)
}

/// Continuous grid coordinates for a pixel position: cell (i,j)'s center
/// sits at pixel ((j+0.5)·W/G, (i+0.5)·H/G). Clamped to the border cells.
fn pixel_to_grid(u: f64, v: f64, gsize: usize, image_size: (usize, usize)) -> (f64, f64) {
    let (w, h) = image_size;
    let gx = (u * gsize as f64 / w as f64 - 0.5).clamp(0.0, (gsize - 1) as f64);
    let gy = (v * gsize as f64 / h as f64 - 0.5).clamp(0.0, (gsize - 1) as f64);
    (gx, gy)
}

struct BilinearTap {
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    fx: f64,
    fy: f64,
    interior_x: bool,
    interior_y: bool,
}

fn bilinear_tap(u: f64, v: f64, gsize: usize, image_size: (usize, usize)) -> BilinearTap {
    let (gx, gy) = pixel_to_grid(u, v, gsize, image_size);
    let j0 = gx.floor() as usize;
    let i0 = gy.floor() as usize;
    let j1 = (j0 + 1).min(gsize - 1);
    let i1 = (i0 + 1).min(gsize - 1);
    BilinearTap {
        i0,
        i1,
        j0,
        j1,
        fx: gx - j0 as f64,
        fy: gy - i0 as f64,
        interior_x: gx > 0.0 && gx < (gsize - 1) as f64,
        interior_y: gy > 0.0 && gy < (gsize - 1) as f64,
    }
}

/// Bilinear sample of a [G,G,C] feature grid at pixel coordinates [N,2].
pub fn bilinear_sample<T: Scalar>(
    grid: &Tensor<T>,
    uv: &Tensor<T>,
    image_size: (usize, usize),
) -> Result<Tensor<T>> {
    let shape = grid.shape();
    if shape.len() != 3 || shape[0] != shape[1] {
        return Err(Error::Shape(format!("feature grid must be [G,G,C], got {shape:?}")));
    }
    let (gsize, c) = (shape[0], shape[2]);
    let n = uv.rows();
    let mut out = Tensor::zeros(&[n, c]);
    let cell = |i: usize, j: usize| -> &[T] {
        let base = (i * gsize + j) * c;
        &grid.data()[base..base + c]
    };
    for q in 0..n {
        let t = bilinear_tap(uv.row(q)[0].as_f64(), uv.row(q)[1].as_f64(), gsize, image_size);
        let w00 = T::from_f64((1.0 - t.fy) * (1.0 - t.fx));
        let w01 = T::from_f64((1.0 - t.fy) * t.fx);
        let w10 = T::from_f64(t.fy * (1.0 - t.fx));
        let w11 = T::from_f64(t.fy * t.fx);
        let (a, b, cc, d) = (cell(t.i0, t.j0), cell(t.i0, t.j1), cell(t.i1, t.j0), cell(t.i1, t.j1));
        for (k, o) in out.row_mut(q).iter_mut().enumerate() {
            *o = w00 * a[k] + w01 * b[k] + w10 * cc[k] + w11 * d[k];
        }
    }
    Ok(out)
}

/// Graph-op bilinear sampling, differentiable w.r.t. both grid and uv.
/// Gradients w.r.t. uv vanish where the lookup is clamped to the border.
pub fn bilinear_sample_op<T: Scalar>(
    g: &mut Graph<T>,
    grid: Var,
    uv: Var,
    image_size: (usize, usize),
) -> Result<Var> {
    let value = bilinear_sample(g.val(grid), g.val(uv), image_size)?;
    Ok(g.push_op(value, vec![grid, uv], move || {
        Box::new(move |gr, node, gout| {
            let grid = gr.val(gr.parent(node, 0));
            let uv = gr.val(gr.parent(node, 1));
            let gsize = grid.shape()[0];
            let c = grid.shape()[2];
            let (w, h) = image_size;
            let mut dgrid = Tensor::zeros(grid.shape());
            let mut duv = Tensor::zeros(uv.shape());
            for q in 0..uv.rows() {
                let t =
                    bilinear_tap(uv.row(q)[0].as_f64(), uv.row(q)[1].as_f64(), gsize, image_size);
                let go = gout.row(q);
                let idx = |i: usize, j: usize| (i * gsize + j) * c;
                let (b00, b01, b10, b11) =
                    (idx(t.i0, t.j0), idx(t.i0, t.j1), idx(t.i1, t.j0), idx(t.i1, t.j1));
                let w00 = T::from_f64((1.0 - t.fy) * (1.0 - t.fx));
                let w01 = T::from_f64((1.0 - t.fy) * t.fx);
                let w10 = T::from_f64(t.fy * (1.0 - t.fx));
                let w11 = T::from_f64(t.fy * t.fx);
                let mut dgx = 0.0;
                let mut dgy = 0.0;
                for k in 0..c {
                    let gk = go[k];
                    dgrid.data_mut()[b00 + k] += w00 * gk;
                    dgrid.data_mut()[b01 + k] += w01 * gk;
                    dgrid.data_mut()[b10 + k] += w10 * gk;
                    dgrid.data_mut()[b11 + k] += w11 * gk;
                    let (a, b, cc, d) = (
                        grid.data()[b00 + k].as_f64(),
                        grid.data()[b01 + k].as_f64(),
                        grid.data()[b10 + k].as_f64(),
                        grid.data()[b11 + k].as_f64(),
                    );
                    let gkf = gk.as_f64();
                    dgx += gkf * ((1.0 - t.fy) * (b - a) + t.fy * (d - cc));
                    dgy += gkf * ((1.0 - t.fx) * (cc - a) + t.fx * (d - b));
                }
                let duv_row = duv.row_mut(q);
                if t.interior_x {
                    duv_row[0] = T::from_f64(dgx * gsize as f64 / w as f64);
                }
                if t.interior_y {
                    duv_row[1] = T::from_f64(dgy * gsize as f64 / h as f64);
                }
            }
            vec![dgrid, duv]
        })
    }))
}

/// Express each vertex in every frame: output [V, 3·frames.len()],
/// column blocks following the frame order given.
pub fn to_local_frames<T: Scalar>(v: &Tensor<T>, frames: &[RigidFrame]) -> Result<Tensor<T>> {
    for f in frames {
        f.validate()?;
    }
    let n = v.rows();
    let mut out = Tensor::zeros(&[n, 3 * frames.len()]);
    for i in 0..n {
        let p = [v.row(i)[0].as_f64(), v.row(i)[1].as_f64(), v.row(i)[2].as_f64()];
        let row = out.row_mut(i);
        for (fi, f) in frames.iter().enumerate() {
            let local = f.to_local(p);
            for k in 0..3 {
                row[fi * 3 + k] = T::from_f64(local[k]);
            }
        }
    }
    Ok(out)
}

/// Brute-force kNN over [N,3] points; each row lists `k` indices sorted by
/// ascending distance, ties by smaller index. A point is its own first
/// neighbor.
pub fn knn_indices<T: Scalar>(points: &Tensor<T>, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = points.rows();
    if k > n {
        return Err(Error::Invalid(format!("knn k={k} exceeds point count {n}")));
    }
    let mut out = Vec::with_capacity(n);
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let pi = points.row(i);
        dists.clear();
        for j in 0..n {
            let pj = points.row(j);
            let d: f64 = (0..3).map(|c| (pi[c].as_f64() - pj[c].as_f64()).powi(2)).sum();
            // the query itself always sorts first, even against duplicates
            dists.push((if j == i { -1.0 } else { d }, j));
        }
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.push(dists[..k].iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// Deterministic farthest-point sampling starting at index 0.
pub fn farthest_point_sample<T: Scalar>(points: &Tensor<T>, m: usize) -> Result<Vec<usize>> {
    let n = points.rows();
    if m > n {
        return Err(Error::Invalid(format!("fps m={m} exceeds point count {n}")));
    }
    let mut chosen = Vec::with_capacity(m);
    let mut best = vec![f64::INFINITY; n];
    let mut cur = 0usize;
    for _ in 0..m {
        chosen.push(cur);
        let pc = points.row(cur);
        let mut next = 0;
        let mut next_d = -1.0;
        for j in 0..n {
            let pj = points.row(j);
            let d: f64 = (0..3).map(|c| (pc[c].as_f64() - pj[c].as_f64()).powi(2)).sum();
            if d < best[j] {
                best[j] = d;
            }
            if best[j] > next_d {
                next_d = best[j];
                next = j;
            }
        }
        cur = next;
    }
    Ok(chosen)
}
