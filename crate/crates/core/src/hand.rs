//! Articulated hand surrogate: a procedurally generated template skeleton
//! and skin, rigid single-bone forward kinematics, the per-vertex
//! local-frame embedding, and a shared-MLP point encoder.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{to_local_frames, RigidFrame};
use crate::graph::{Graph, Var};
use crate::io::{AnyTensor, Container};
use crate::nn::{Init, Linear};
use crate::tensor::{Scalar, Tensor};

pub const NUM_VERTICES: usize = 778;
pub const NUM_JOINTS: usize = 16;
pub const NUM_TIPS: usize = 5;
pub const NUM_FRAMES: usize = 22; // palm + joints + tips
pub const EMBED_DIM: usize = NUM_FRAMES * 3 + 1;

/// Rest skeleton plus skinned vertices. Joint 0 is the wrist; each finger
/// f (thumb, index, middle, ring, pinky) owns joints 1+3f, 2+3f, 3+3f and
/// tip f. A vertex is rigid with exactly one joint (`bone_of`).
#[derive(Clone, Debug)]
pub struct HandTemplate {
    pub vertices: Tensor<f64>,  // [V, 3]
    pub joints: Tensor<f64>,    // [16, 3]
    pub tips: Tensor<f64>,      // [5, 3]
    pub palm: [f64; 3],
    pub bone_of: Vec<usize>,    // [V]
    pub parent: [usize; NUM_JOINTS],
}

/// Joint index whose bone carries tip `f`.
pub fn tip_bone(f: usize) -> usize {
    3 + 3 * f
}

impl HandTemplate {
    /// Deterministic procedural template: a palm ellipsoid plus five
    /// three-segment fingers, 778 vertices total.
    pub fn generate() -> HandTemplate {
        let mut rng = ChaCha8Rng::seed_from_u64(0x4841_4e44); // fixed template seed
        let mut joints = Tensor::zeros(&[NUM_JOINTS, 3]);
        let mut tips = Tensor::zeros(&[NUM_TIPS, 3]);
        let mut parent = [0usize; NUM_JOINTS];

        // finger base x positions across the palm, thumb offset sideways
        let bases = [
            [-0.045, 0.025, 0.0], // thumb
            [-0.025, 0.080, 0.0], // index
            [0.000, 0.085, 0.0],  // middle
            [0.025, 0.080, 0.0],  // ring
            [0.045, 0.070, 0.0],  // pinky
        ];
        let dirs: [[f64; 3]; 5] = [
            [-0.60, 0.80, 0.0], // thumb fans out
            [-0.10, 0.995, 0.0],
            [0.0, 1.0, 0.0],
            [0.10, 0.995, 0.0],
            [0.20, 0.98, 0.0],
        ];
        let seg_len = [
            [0.032, 0.028, 0.024], // thumb
            [0.034, 0.024, 0.020],
            [0.038, 0.026, 0.022],
            [0.034, 0.024, 0.020],
            [0.028, 0.020, 0.018],
        ];
        // wrist at origin
        for f in 0..NUM_TIPS {
            let d = dirs[f];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let d = [d[0] / n, d[1] / n, d[2] / n];
            let mcp = 1 + 3 * f;
            parent[mcp] = 0;
            parent[mcp + 1] = mcp;
            parent[mcp + 2] = mcp + 1;
            let mut pos = bases[f];
            joints.row_mut(mcp).copy_from_slice(&pos);
            for s in 0..2 {
                for k in 0..3 {
                    pos[k] += d[k] * seg_len[f][s];
                }
                joints.row_mut(mcp + 1 + s).copy_from_slice(&pos);
            }
            for k in 0..3 {
                pos[k] += d[k] * seg_len[f][2];
            }
            tips.row_mut(f).copy_from_slice(&pos);
        }
        let palm = [0.0, 0.042, 0.0];

        // skin: 298 palm vertices around an ellipsoid, 32 per finger segment
        let mut vertices = Tensor::zeros(&[NUM_VERTICES, 3]);
        let mut bone_of = Vec::with_capacity(NUM_VERTICES);
        let mut vi = 0;
        let palm_count = NUM_VERTICES - 15 * 32;
        for _ in 0..palm_count {
            let v = [
                palm[0] + (rng.gen::<f64>() - 0.5) * 0.08,
                palm[1] + (rng.gen::<f64>() - 0.5) * 0.09,
                palm[2] + (rng.gen::<f64>() - 0.5) * 0.03,
            ];
            vertices.row_mut(vi).copy_from_slice(&v);
            bone_of.push(0);
            vi += 1;
        }
        for f in 0..NUM_TIPS {
            for s in 0..3 {
                let j = 1 + 3 * f + s;
                let a = joints.row(j).to_vec();
                let b = if s < 2 { joints.row(j + 1).to_vec() } else { tips.row(f).to_vec() };
                for _ in 0..32 {
                    let t = rng.gen::<f64>();
                    let v = [
                        a[0] + t * (b[0] - a[0]) + (rng.gen::<f64>() - 0.5) * 0.012,
                        a[1] + t * (b[1] - a[1]) + (rng.gen::<f64>() - 0.5) * 0.012,
                        a[2] + t * (b[2] - a[2]) + (rng.gen::<f64>() - 0.5) * 0.012,
                    ];
                    vertices.row_mut(vi).copy_from_slice(&v);
                    bone_of.push(j);
                    vi += 1;
                }
            }
        }
        debug_assert_eq!(vi, NUM_VERTICES);
        HandTemplate { vertices, joints, tips, palm, bone_of, parent }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = Container::new(serde_json::json!({"kind": "hand_template"}));
        c.push("vertices", AnyTensor::F64(self.vertices.clone()));
        c.push("joints", AnyTensor::F64(self.joints.clone()));
        c.push("tips", AnyTensor::F64(self.tips.clone()));
        c.push("palm", AnyTensor::F64(Tensor::from_vec(&[3], self.palm.to_vec())?));
        c.push("bone_of", AnyTensor::I32(vec![NUM_VERTICES], self.bone_of.iter().map(|&b| b as i32).collect()));
        c.push(
            "parent",
            AnyTensor::I32(vec![NUM_JOINTS], self.parent.iter().map(|&p| p as i32).collect()),
        );
        c.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<HandTemplate> {
        let path = path.as_ref();
        let c = Container::load(path)?;
        let vertices = c.get_typed::<f64>("vertices", path)?;
        let joints = c.get_typed::<f64>("joints", path)?;
        let tips = c.get_typed::<f64>("tips", path)?;
        let palm_t = c.get_typed::<f64>("palm", path)?;
        let palm = [palm_t.data()[0], palm_t.data()[1], palm_t.data()[2]];
        let ints = |name: &str| -> Result<Vec<usize>> {
            match c.get(name) {
                Some(AnyTensor::I32(_, d)) => Ok(d.iter().map(|&v| v as usize).collect()),
                _ => Err(Error::format(path, format!("missing int block '{name}'"))),
            }
        };
        let bone_of = ints("bone_of")?;
        let parent_v = ints("parent")?;
        let mut parent = [0usize; NUM_JOINTS];
        parent.copy_from_slice(&parent_v);
        Ok(HandTemplate { vertices, joints, tips, palm, bone_of, parent })
    }
}

/// Per-axis joint angle limits in radians, by segment along a finger.
pub(crate) fn angle_limits(joint: usize, axis: usize) -> (f64, f64) {
    if joint == 0 {
        return (-0.5, 0.5); // wrist
    }
    let seg = (joint - 1) % 3;
    match (seg, axis) {
        (0, 0) => (-0.3, 1.6), // knuckle flexion
        (0, _) => (-0.35, 0.35),
        (_, 0) => (0.0, 1.8), // interphalangeal flexion
        (_, _) => (-0.1, 0.1),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HandPose {
    pub global_rot: [f64; 3],
    pub global_trans: [f64; 3],
    pub joint_angles: Vec<[f64; 3]>, // [16]
}

impl HandPose {
    pub fn rest() -> HandPose {
        HandPose {
            global_rot: [0.0; 3],
            global_trans: [0.0; 3],
            joint_angles: vec![[0.0; 3]; NUM_JOINTS],
        }
    }

    /// Clamp joint angles to anatomical limits.
    pub fn clamped(&self) -> HandPose {
        let mut out = self.clone();
        for (j, a) in out.joint_angles.iter_mut().enumerate() {
            for (axis, v) in a.iter_mut().enumerate() {
                let (lo, hi) = angle_limits(j, axis);
                *v = v.clamp(lo, hi);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct HandState {
    pub vertices: Tensor<f64>, // [V, 3]
    pub joints: Tensor<f64>,   // [16, 3]
    pub tips: Tensor<f64>,     // [5, 3]
    /// palm first, then the 16 joints in kinematic order, then 5 tips
    pub frames: Vec<RigidFrame>,
    pub t_p: [f64; 3],
}

impl HandState {
    pub fn frame_origin_consistency(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let dist = |a: &[f64], b: [f64; 3]| -> f64 {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        };
        worst = worst.max(dist(&self.t_p, self.frames[0].origin));
        for j in 0..NUM_JOINTS {
            worst = worst.max(dist(self.joints.row(j), self.frames[1 + j].origin));
        }
        for f in 0..NUM_TIPS {
            worst = worst.max(dist(self.tips.row(f), self.frames[1 + NUM_JOINTS + f].origin));
        }
        worst
    }
}

/// Pose the template: rigid single-bone skinning, frames riding the bones.
pub fn forward_kinematics(pose: &HandPose, template: &HandTemplate) -> HandState {
    let pose = pose.clamped();
    let global = RigidFrame::from_axis_angle(pose.global_rot, pose.global_trans);

    // world frame per joint, chained from the wrist
    let mut frames: Vec<RigidFrame> = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let local_rot = RigidFrame::from_axis_angle(pose.joint_angles[j], [0.0; 3]);
        let f = if j == 0 {
            global.compose(&local_rot)
        } else {
            let parent = &frames[template.parent[j]];
            let rest_off = {
                let rj = template.joints.row(j);
                let rp = template.joints.row(template.parent[j]);
                [rj[0] - rp[0], rj[1] - rp[1], rj[2] - rp[2]]
            };
            let origin = parent.to_world(rest_off);
            let mut step = RigidFrame { rotation: parent.rotation, origin };
            step = step.compose(&local_rot);
            step
        };
        frames.push(f);
    }

    let mut joints = Tensor::zeros(&[NUM_JOINTS, 3]);
    for j in 0..NUM_JOINTS {
        joints.row_mut(j).copy_from_slice(&frames[j].origin);
    }
    let mut tips = Tensor::zeros(&[NUM_TIPS, 3]);
    let mut tip_frames = Vec::with_capacity(NUM_TIPS);
    for f in 0..NUM_TIPS {
        let bone = &frames[tip_bone(f)];
        let rt = template.tips.row(f);
        let rj = template.joints.row(tip_bone(f));
        let p = bone.to_world([rt[0] - rj[0], rt[1] - rj[1], rt[2] - rj[2]]);
        tips.row_mut(f).copy_from_slice(&p);
        tip_frames.push(RigidFrame { rotation: bone.rotation, origin: p });
    }

    let wrist = &frames[0];
    let palm_origin = wrist.to_world([
        template.palm[0] - template.joints.row(0)[0],
        template.palm[1] - template.joints.row(0)[1],
        template.palm[2] - template.joints.row(0)[2],
    ]);
    let palm_frame = RigidFrame { rotation: wrist.rotation, origin: palm_origin };

    let mut vertices = Tensor::zeros(&[NUM_VERTICES, 3]);
    for v in 0..NUM_VERTICES {
        let b = template.bone_of[v];
        let rv = template.vertices.row(v);
        let rj = template.joints.row(b);
        let p = frames[b].to_world([rv[0] - rj[0], rv[1] - rj[1], rv[2] - rj[2]]);
        vertices.row_mut(v).copy_from_slice(&p);
    }

    let mut all_frames = Vec::with_capacity(NUM_FRAMES);
    all_frames.push(palm_frame);
    all_frames.extend(frames);
    all_frames.extend(tip_frames);
    HandState { vertices, joints, tips, frames: all_frames, t_p: palm_origin }
}

/// Per-vertex embedding: coordinates in all 22 frames plus a normalized
/// vertex-index column, [V, 67].
pub fn build_hand_embedding<T: Scalar>(h: &HandState) -> Result<Tensor<T>> {
    let local = to_local_frames::<f64>(&h.vertices, &h.frames)?;
    let v = h.vertices.rows();
    let mut out = Tensor::zeros(&[v, EMBED_DIM]);
    for i in 0..v {
        let row = out.row_mut(i);
        for (k, &x) in local.row(i).iter().enumerate() {
            row[k] = T::from_f64(x);
        }
        row[EMBED_DIM - 1] = T::from_f64(i as f64 / (v - 1) as f64);
    }
    Ok(out)
}

/// Shared per-point MLP with a max pool over points: e_h [V,67] -> f_h.
#[derive(Clone, Debug)]
pub struct HandEncoder<T: Scalar> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> HandEncoder<T> {
    /// `widths` are the five hidden/output sizes, e.g. [64,128,256,512,1024].
    pub fn new(name: &str, in_dim: usize, widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut din = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(&format!("{name}.fc{i}"), din, w, Init::Kaiming, rng));
            din = w;
        }
        HandEncoder { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.w.value.cols()).unwrap_or(0)
    }

    /// Returns f_h as a [1, out_dim] node.
    pub fn forward(&self, g: &mut Graph<T>, e_h: Var) -> Result<Var> {
        if g.val(e_h).rows() == 0 {
            return Err(Error::Invalid("hand encoder: empty vertex set".into()));
        }
        let mut x = e_h;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        g.max_pool_rows(x)
    }

    pub fn params(&self) -> Vec<&crate::graph::Parameter<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut crate::graph::Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Gaussian noise on the rotation parameters (global rotation and joint
/// angles; translation untouched), then kinematics. Returns the perturbed
/// state and the mean joint displacement in millimeters.
pub fn perturb_hand(
    pose: &HandPose,
    template: &HandTemplate,
    sigma: f64,
    seed: u64,
) -> Result<(HandState, f64)> {
    if sigma < 0.0 {
        return Err(Error::Invalid(format!("noise sigma {sigma} must be non-negative")));
    }
    let clean = forward_kinematics(pose, template);
    if sigma == 0.0 {
        return Ok((clean, 0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = pose.clone();
    for v in noisy.global_rot.iter_mut() {
        *v += sigma * crate::tensor::gauss(&mut rng);
    }
    for a in noisy.joint_angles.iter_mut() {
        for v in a.iter_mut() {
            *v += sigma * crate::tensor::gauss(&mut rng);
        }
    }
    let state = forward_kinematics(&noisy, template);
    let mut err = 0.0;
    for j in 0..NUM_JOINTS {
        let (a, b) = (state.joints.row(j), clean.joints.row(j));
        err += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    }
    let e_h_mm = err / NUM_JOINTS as f64 * 1000.0;
    Ok((state, e_h_mm))
}
