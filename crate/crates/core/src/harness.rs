//! Training loop, evaluation protocol, inference export, and the
//! finite-difference gradient suite behind the CLI.

use std::path::{Path, PathBuf};

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample_op, project_points_op, CameraParams};
use crate::graph::{Graph, Parameter, Var};
use crate::hand::{perturb_hand, HandTemplate};
use crate::io::{append_jsonl, write_ply, TensorDtype};
use crate::metrics::{
    chamfer_distance, chamfer_distance_op, f_score, in_contact, penetration_depth_cloud,
    total_loss, LossWeights,
};
use crate::model::{save_checkpoint, LoadedCheckpoint, Model, RngState};
use crate::nn::{cosine_lr, grad_check, Adam, Mha};
use crate::synth::{augment_stored, read_dataset, read_sample, StoredSample};
use crate::tensor::{Scalar, Tensor};

fn to_f64(t: &Tensor<impl Scalar>) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), t.data().iter().map(|v| v.as_f64()).collect()).unwrap()
}

fn centered(cloud: &Tensor<f64>, centroid: [f64; 3]) -> Tensor<f64> {
    let mut out = Tensor::zeros(cloud.shape());
    for i in 0..cloud.rows() {
        for k in 0..3 {
            out.row_mut(i)[k] = cloud.row(i)[k] - centroid[k];
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub t_l1_cm: f64,
    pub cd_sparse: f64,
    pub cd_dense: f64,
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub first: StepLog,
    pub last: StepLog,
}

pub fn train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::F32 => train_impl::<f32>(cfg, data_dir, out_dir),
        Precision::F64 => train_impl::<f64>(cfg, data_dir, out_dir),
    }
}

fn train_impl<T: Scalar + TensorDtype>(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let template = HandTemplate::generate();
    let data = read_dataset(data_dir, &template)?;
    if data.is_empty() {
        return Err(Error::Invalid(format!("no samples under {}", data_dir.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    if log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }

    let mut model = Model::<T>::seeded(cfg)?;
    let mut adam = Adam::new();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x0EDE4));
    let weights = LossWeights { lambda_t: cfg.lambda_t, lambda_cd: cfg.lambda_cd };
    let mut order: Vec<usize> = Vec::new();
    let mut first: Option<StepLog> = None;
    let mut last = StepLog { step: 0, lr: 0.0, total: 0.0, t_l1_cm: 0.0, cd_sparse: 0.0, cd_dense: 0.0 };

    for step in 0..cfg.steps {
        let lr = cosine_lr(cfg.base_lr, step as u64, cfg.steps as u64);
        for p in model.params_mut() {
            p.zero_grad();
        }
        let mut picks = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
            }
            let aug_seed = cfg
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((step * cfg.batch_size + b) as u64);
            picks.push((order.pop().unwrap(), aug_seed));
        }

        // per-sample losses and gradients; the gradient sum below runs in
        // pick order, so threading does not change the result bitwise
        struct SampleGrad<T> {
            total: f64,
            l1: f64,
            cds: f64,
            cdd: f64,
            grads: Vec<Option<Tensor<T>>>,
        }
        let results: Vec<Result<SampleGrad<T>>> = {
            let eval_one = |idx: usize, aug_seed: u64| -> Result<SampleGrad<T>> {
                let sample = &data[idx];
                let aug = if cfg.augment {
                    augment_stored(sample, &template, aug_seed)
                } else {
                    sample.clone()
                };
                let mut g = Graph::new();
                let image = crate::model::convert_tensor::<T>(&aug.scene.image);
                let pred = model.forward(&mut g, &image, &aug.scene.hand, &aug.scene.cam)?;
                let c = aug.scene.object.centroid();
                let gt_t = Tensor::from_vec(
                    &[1, 3],
                    aug.scene.gt_t_o.iter().map(|&v| T::from_f64(v)).collect(),
                )?;
                let gt_s = crate::model::convert_tensor::<T>(&centered(&aug.surface_s, c));
                let gt_d = crate::model::convert_tensor::<T>(&centered(&aug.surface_d, c));
                let loss = total_loss(
                    &mut g, pred.t_o, pred.sparse, pred.dense, &gt_t, &gt_s, &gt_d, weights,
                )?;
                let grads = g.backward(loss.total);
                Ok(SampleGrad {
                    total: g.val(loss.total).item().as_f64(),
                    l1: loss.t_l1_cm.as_f64(),
                    cds: loss.cd_sparse.as_f64(),
                    cdd: loss.cd_dense.as_f64(),
                    grads: g.param_grads(&grads, model.params()),
                })
            };
            // HOCLOUD_WORKERS overrides thread count (mainly for tests)
            let workers = std::env::var("HOCLOUD_WORKERS")
                .ok()
                .and_then(|v| v.parse::<usize>().ok())
                .unwrap_or_else(|| {
                    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
                });
            if workers > 1 && cfg.batch_size > 1 {
                std::thread::scope(|s| {
                    let handles: Vec<_> = picks
                        .iter()
                        .map(|&(i, sd)| s.spawn(move || eval_one(i, sd)))
                        .collect();
                    handles.into_iter().map(|h| h.join().unwrap()).collect()
                })
            } else {
                picks.iter().map(|&(i, sd)| eval_one(i, sd)).collect()
            }
        };

        let (mut total, mut l1, mut cds, mut cdd) = (0.0, 0.0, 0.0, 0.0);
        for r in results {
            let sg = r?;
            if !sg.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at step {step}: t_l1_cm={} cd_sparse={} cd_dense={}",
                    sg.l1, sg.cds, sg.cdd
                )));
            }
            total += sg.total;
            l1 += sg.l1;
            cds += sg.cds;
            cdd += sg.cdd;
            for (p, gt) in model.params_mut().into_iter().zip(&sg.grads) {
                if let Some(gt) = gt {
                    p.grad.add_in_place(gt);
                }
            }
        }
        let inv = T::from_f64(1.0 / cfg.batch_size as f64);
        for p in model.params_mut() {
            for v in p.grad.data_mut() {
                *v = *v * inv;
            }
        }
        adam.step(lr, model.params_mut());

        let n = cfg.batch_size as f64;
        let row = StepLog {
            step,
            lr,
            total: total / n,
            t_l1_cm: l1 / n,
            cd_sparse: cds / n,
            cd_dense: cdd / n,
        };
        append_jsonl(
            &log_path,
            &serde_json::to_value(&row).map_err(|e| Error::Invalid(e.to_string()))?,
        )?;
        if first.is_none() {
            first = Some(row.clone());
        }
        last = row;

        if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 {
            let p = out_dir.join(format!("checkpoint_{:06}.tnc", step + 1));
            save_checkpoint(&p, &model, step + 1, RngState::capture(cfg.seed, &order_rng))?;
        }
    }

    let ckpt = out_dir.join("checkpoint.tnc");
    save_checkpoint(&ckpt, &model, cfg.steps, RngState::capture(cfg.seed, &order_rng))?;
    Ok(TrainOutcome { checkpoint: ckpt, log: log_path, first: first.unwrap(), last })
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub noise_sigma: f64,
    pub n_eval_points: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { noise_sigma: 0.0, n_eval_points: 4096 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample_id: u64,
    pub cd_cm2: f64,
    pub fs_5mm: f64,
    pub fs_10mm: f64,
    pub t_err_cm: f64,
    pub contact: bool,
    pub penetration_cm: f64,
    pub e_h_mm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalMeans {
    pub cd_cm2: f64,
    pub fs_5mm: f64,
    pub fs_10mm: f64,
    pub t_err_cm: f64,
    pub contact_ratio: f64,
    pub penetration_cm: f64,
    pub e_h_mm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub noise_sigma: f64,
    pub n_eval_points: usize,
    pub rows: Vec<EvalRow>,
    pub means: EvalMeans,
}

pub fn evaluate(ckpt: &Path, data_dir: &Path, opts: EvalOptions) -> Result<EvalReport> {
    let loaded = LoadedCheckpoint::open(ckpt)?;
    match loaded.config.precision {
        Precision::F32 => evaluate_impl::<f32>(&loaded, ckpt, data_dir, opts),
        Precision::F64 => evaluate_impl::<f64>(&loaded, ckpt, data_dir, opts),
    }
}

fn evaluate_impl<T: Scalar + TensorDtype>(
    loaded: &LoadedCheckpoint,
    ckpt: &Path,
    data_dir: &Path,
    opts: EvalOptions,
) -> Result<EvalReport> {
    if opts.noise_sigma < 0.0 || opts.n_eval_points == 0 {
        return Err(Error::Invalid("noise sigma must be >= 0 and eval points positive".into()));
    }
    let model: Model<T> = loaded.instantiate(ckpt)?;
    let template = HandTemplate::generate();
    let data = read_dataset(data_dir, &template)?;
    if data.is_empty() {
        return Err(Error::Invalid(format!("no samples under {}", data_dir.display())));
    }
    let mut rows = Vec::with_capacity(data.len());
    for (i, s) in data.iter().enumerate() {
        rows.push(evaluate_sample(&model, &template, s, i, opts)?);
    }
    let n = rows.len() as f64;
    let means = EvalMeans {
        cd_cm2: rows.iter().map(|r| r.cd_cm2).sum::<f64>() / n,
        fs_5mm: rows.iter().map(|r| r.fs_5mm).sum::<f64>() / n,
        fs_10mm: rows.iter().map(|r| r.fs_10mm).sum::<f64>() / n,
        t_err_cm: rows.iter().map(|r| r.t_err_cm).sum::<f64>() / n,
        contact_ratio: rows.iter().filter(|r| r.contact).count() as f64 / n,
        penetration_cm: rows.iter().map(|r| r.penetration_cm).sum::<f64>() / n,
        e_h_mm: rows.iter().map(|r| r.e_h_mm).sum::<f64>() / n,
    };
    Ok(EvalReport {
        schema_version: 1,
        noise_sigma: opts.noise_sigma,
        n_eval_points: opts.n_eval_points,
        rows,
        means,
    })
}

fn evaluate_sample<T: Scalar + TensorDtype>(
    model: &Model<T>,
    template: &HandTemplate,
    s: &StoredSample,
    index: usize,
    opts: EvalOptions,
) -> Result<EvalRow> {
    let (hand, e_h_mm) = perturb_hand(
        &s.scene.hand_pose,
        template,
        opts.noise_sigma,
        s.scene.sample_id.wrapping_add(index as u64),
    )?;
    let mut g = Graph::inference();
    let image = crate::model::convert_tensor::<T>(&s.scene.image);
    let pred = model.forward(&mut g, &image, &hand, &s.scene.cam)?;

    let c = s.scene.object.centroid();
    let gt: Tensor<f64> = s
        .scene
        .object
        .sample_surface(opts.n_eval_points, s.scene.sample_id ^ 0xe7a1)?;
    let gt_obj = centered(&gt, c);
    let dense = to_f64(g.val(pred.dense));
    let t_o = to_f64(g.val(pred.t_o));

    let cd_cm2 = chamfer_distance(&dense, &gt_obj)?;
    let fs_5mm = f_score(&dense, &gt_obj, 0.005)?;
    let fs_10mm = f_score(&dense, &gt_obj, 0.010)?;
    let t_err_cm = (0..3)
        .map(|k| (t_o.data()[k] - s.scene.gt_t_o[k]).abs())
        .sum::<f64>()
        * 100.0;

    // predicted cloud back in camera frame for hand interaction metrics
    let mut cam_cloud = Tensor::<f64>::zeros(dense.shape());
    for i in 0..dense.rows() {
        for k in 0..3 {
            cam_cloud.row_mut(i)[k] = dense.row(i)[k] + t_o.data()[k] + hand.t_p[k];
        }
    }
    let contact = in_contact(&hand.vertices, &cam_cloud, 0.005)?;
    let penetration_cm = penetration_depth_cloud(&hand.vertices, &cam_cloud)?;

    Ok(EvalRow {
        sample_id: s.scene.sample_id,
        cd_cm2,
        fs_5mm,
        fs_10mm,
        t_err_cm,
        contact,
        penetration_cm,
        e_h_mm,
    })
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Invalid(format!("report serialization: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub struct InferOutcome {
    pub sparse_ply: PathBuf,
    pub dense_ply: PathBuf,
    pub meta: PathBuf,
    pub t_o: [f64; 3],
}

pub fn infer(ckpt: &Path, sample_dir: &Path, out_dir: &Path) -> Result<InferOutcome> {
    let loaded = LoadedCheckpoint::open(ckpt)?;
    match loaded.config.precision {
        Precision::F32 => infer_impl::<f32>(&loaded, ckpt, sample_dir, out_dir),
        Precision::F64 => infer_impl::<f64>(&loaded, ckpt, sample_dir, out_dir),
    }
}

fn infer_impl<T: Scalar + TensorDtype>(
    loaded: &LoadedCheckpoint,
    ckpt: &Path,
    sample_dir: &Path,
    out_dir: &Path,
) -> Result<InferOutcome> {
    let model: Model<T> = loaded.instantiate(ckpt)?;
    let template = HandTemplate::generate();
    let s = read_sample(sample_dir, &template)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut g = Graph::inference();
    let image = crate::model::convert_tensor::<T>(&s.scene.image);
    let pred = model.forward(&mut g, &image, &s.scene.hand, &s.scene.cam)?;
    let sparse = to_f64(g.val(pred.sparse));
    let dense = to_f64(g.val(pred.dense));
    let t_o_t = to_f64(g.val(pred.t_o));
    let t_o = [t_o_t.data()[0], t_o_t.data()[1], t_o_t.data()[2]];

    let sparse_ply = out_dir.join("sparse.ply");
    let dense_ply = out_dir.join("dense.ply");
    write_ply(&sparse_ply, &sparse)?;
    write_ply(&dense_ply, &dense)?;
    let meta = out_dir.join("prediction.json");
    let doc = serde_json::json!({
        "sample_id": s.scene.sample_id,
        "t_o": t_o,
        "t_p": s.scene.hand.t_p,
        "n_sparse": sparse.rows(),
        "n_dense": dense.rows(),
    });
    std::fs::write(&meta, serde_json::to_string_pretty(&doc).unwrap())
        .map_err(|e| Error::io(&meta, e))?;
    Ok(InferOutcome { sparse_ply, dense_ply, meta, t_o })
}

// ---------------------------------------------------------------------------
// finite-difference gradient suite

pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

struct Probe {
    ps: Vec<Parameter<f64>>,
}

fn op_check(
    name: &str,
    tol: f64,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<OpCheck> {
    let mut probe = Probe {
        ps: inputs
            .iter()
            .enumerate()
            .map(|(i, t)| Parameter::new(format!("{name}.in{i}"), t.clone()))
            .collect(),
    };
    let report = grad_check(
        &mut probe,
        |m| m.ps.iter_mut().collect(),
        |m, g| {
            let vars: Vec<Var> = m.ps.iter().map(|p| g.param(p)).collect();
            let y = f(g, &vars)?;
            Ok(g.mean_all(y))
        },
        4,
    )?;
    Ok(OpCheck { name: name.into(), max_rel_err: report.max_rel_err, tol })
}

/// Run finite-difference checks for every differentiable op plus the full
/// pipeline loss at toy scale. `corrupt` deliberately breaks one backward
/// closure (a harness self-test).
pub fn gradcheck_suite(ops: Option<&[String]>, corrupt: bool) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut out = Vec::new();
    let wanted = |name: &str| ops.map_or(true, |l| l.iter().any(|o| o == name));
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| Tensor::<f64>::randn(s, 1.0, rng);

    macro_rules! run {
        ($name:expr, $tol:expr, $inputs:expr, $f:expr) => {
            if wanted($name) {
                out.push(op_check($name, $tol, &$inputs, $f)?);
            }
        };
    }

    run!("add", 1e-4, [r(&mut rng, &[4, 5]), r(&mut rng, &[4, 5])], |g, v| Ok(g.add(v[0], v[1])));
    run!("mul", 1e-4, [r(&mut rng, &[4, 5]), r(&mut rng, &[4, 5])], |g, v| Ok(g.mul(v[0], v[1])));
    run!("matmul", 1e-4, [r(&mut rng, &[4, 6]), r(&mut rng, &[6, 3])], |g, v| g.matmul(v[0], v[1]));
    run!("linear", 1e-4, [r(&mut rng, &[5, 4]), r(&mut rng, &[4, 3]), r(&mut rng, &[1, 3])], |g, v| {
        g.linear(v[0], v[1], v[2])
    });
    run!("gelu", 1e-4, [r(&mut rng, &[4, 5])], |g, v| Ok(g.gelu(v[0])));
    // keep relu inputs away from its corner
    run!("relu", 1e-4, [r(&mut rng, &[4, 5]).map(|x| x + x.signum())], |g, v| Ok(g.relu(v[0])));
    run!("softmax", 1e-4, [r(&mut rng, &[4, 6])], |g, v| g.softmax_rows(v[0], None));
    run!(
        "layer_norm",
        1e-4,
        [r(&mut rng, &[4, 6]), r(&mut rng, &[6]), r(&mut rng, &[6])],
        |g, v| Ok(g.layer_norm(v[0], v[1], v[2], 1e-5))
    );
    run!("l1_diff", 1e-4, [r(&mut rng, &[4, 3]), r(&mut rng, &[4, 3])], |g, v| {
        g.l1_diff(v[0], v[1])
    });
    run!("max_pool", 1e-4, [r(&mut rng, &[6, 5])], |g, v| g.max_pool_rows(v[0]));
    run!("upsample", 1e-4, [r(&mut rng, &[5, 4])], |g, v| g.upsample_rows_linear(v[0], 3));
    run!("repeat_rows", 1e-4, [r(&mut rng, &[4, 3])], |g, v| Ok(g.repeat_rows(v[0], 3)));
    run!(
        "conv3x3",
        1e-4,
        [r(&mut rng, &[4, 4, 3]), r(&mut rng, &[27, 5]), r(&mut rng, &[1, 5])],
        |g, v| g.conv_grid_3x3(v[0], v[1], v[2])
    );
    if wanted("attention") {
        let mut mha_rng = ChaCha8Rng::seed_from_u64(1);
        struct AttnProbe {
            mha: Mha<f64>,
            q: Parameter<f64>,
            kv: Parameter<f64>,
        }
        let mut probe = AttnProbe {
            mha: Mha::new("gc", 8, 2, &mut mha_rng),
            q: Parameter::new("gc.q", r(&mut rng, &[5, 8])),
            kv: Parameter::new("gc.kv", r(&mut rng, &[7, 8])),
        };
        let report = grad_check(
            &mut probe,
            |m| {
                let mut ps = m.mha.params_mut();
                ps.push(&mut m.q);
                ps.push(&mut m.kv);
                ps
            },
            |m, g| {
                let q = g.param(&m.q);
                let kv = g.param(&m.kv);
                let y = m.mha.forward(g, q, kv, None)?;
                Ok(g.mean_all(y))
            },
            4,
        )?;
        out.push(OpCheck { name: "attention".into(), max_rel_err: report.max_rel_err, tol: 1e-4 });
    }
    if wanted("projection_sampling") {
        let cam = CameraParams::new([0.0, 0.0, 0.3], 1.0, 30.0, [8.0, 8.0], (16, 16))?;
        let pts = Tensor::<f64>::randn(&[6, 3], 0.02, &mut rng);
        let fmap = r(&mut rng, &[4, 4, 5]);
        out.push(op_check("projection_sampling", 1e-4, &[pts, fmap], move |g, v| {
            let (uv, _) = project_points_op(g, v[0], &cam);
            bilinear_sample_op(g, v[1], uv, cam.image_size)
        })?);
    }
    if wanted("chamfer") {
        let a = Tensor::<f64>::randn(&[8, 3], 0.5, &mut rng);
        let b = Tensor::<f64>::randn(&[10, 3], 0.5, &mut rng);
        out.push(op_check("chamfer", 1e-4, &[a], move |g, v| chamfer_distance_op(g, v[0], &b))?);
    }
    if wanted("corruptible") {
        // the self-test hook: an op whose backward is wrong when corrupted
        let x = r(&mut rng, &[4, 4]);
        let bias = if corrupt { 0.5 } else { 0.0 };
        out.push(op_check("corruptible", 1e-4, &[x], move |g, v| {
            let val = g.val(v[0]).map(|t| t * 2.0);
            Ok(g.push_op(val, vec![v[0]], move || {
                Box::new(move |_, _, gout| vec![gout.map(|t| t * (2.0 + bias))])
            }))
        })?);
    }
    if wanted("pipeline") {
        out.push(pipeline_check()?);
    }
    if let Some(list) = ops {
        for name in list {
            if !out.iter().any(|c| &c.name == name) {
                return Err(Error::Invalid(format!("unknown gradcheck op: {name}")));
            }
        }
    }
    Ok(out)
}

/// End-to-end loss gradient at toy dimensions (16×16 image, N_s = 16).
fn pipeline_check() -> Result<OpCheck> {
    let cfg = RunConfig::toy();
    let template = HandTemplate::generate();
    let scene = crate::synth::generate_scene(
        &template,
        4,
        &crate::synth::SynthConfig { image_size: 16, focal: 22.0 },
    )?;
    let stored = StoredSample::materialize(scene, 24, 48)?;
    let mut model = Model::<f64>::seeded(&cfg)?;
    // spread the zero-initialized heads so chamfer correspondences are stable
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    model.sparse.t_head.w.value = Tensor::randn(model.sparse.t_head.w.value.shape(), 0.02, &mut rng);
    model.sparse.point_head.w.value =
        Tensor::randn(model.sparse.point_head.w.value.shape(), 0.02, &mut rng);
    for b in &mut model.dense.blocks {
        b.off3.w.value = Tensor::randn(b.off3.w.value.shape(), 0.2, &mut rng);
    }
    let c = stored.scene.object.centroid();
    let gt_t = Tensor::from_vec(&[1, 3], stored.scene.gt_t_o.to_vec())?;
    let gt_s = centered(&stored.surface_s, c);
    let gt_d = centered(&stored.surface_d, c);
    let weights = LossWeights { lambda_t: cfg.lambda_t, lambda_cd: cfg.lambda_cd };
    let report = grad_check(
        &mut model,
        |m| m.params_mut(),
        |m, g| {
            let pred = m.forward(g, &stored.scene.image, &stored.scene.hand, &stored.scene.cam)?;
            let loss =
                total_loss(g, pred.t_o, pred.sparse, pred.dense, &gt_t, &gt_s, &gt_d, weights)?;
            Ok(loss.total)
        },
        2,
    )?;
    Ok(OpCheck { name: "pipeline".into(), max_rel_err: report.max_rel_err, tol: 1e-3 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, write_dataset, SynthConfig};

    fn toy_dataset(dir: &Path, n: usize) -> Vec<StoredSample> {
        let template = HandTemplate::generate();
        let cfg = SynthConfig { image_size: 16, focal: 22.0 };
        let samples: Vec<StoredSample> = (0..n as u64)
            .map(|i| StoredSample::materialize(generate_scene(&template, i, &cfg).unwrap(), 24, 48).unwrap())
            .collect();
        write_dataset(&samples, dir).unwrap();
        samples
    }

    fn toy_run_config() -> RunConfig {
        let mut cfg = RunConfig::toy();
        cfg.steps = 3;
        cfg.batch_size = 2;
        cfg
    }

    #[test]
    fn training_logs_components_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        toy_dataset(&data, 2);
        let cfg = toy_run_config();
        let out1 = dir.path().join("run1");
        let out2 = dir.path().join("run2");
        let r1 = train(&cfg, &data, &out1).unwrap();
        let r2 = train(&cfg, &data, &out2).unwrap();
        assert_eq!(
            std::fs::read(&r1.log).unwrap(),
            std::fs::read(&r2.log).unwrap()
        );
        let text = std::fs::read_to_string(&r1.log).unwrap();
        let rows: Vec<StepLog> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].lr, cfg.base_lr);
        for r in &rows {
            assert!(r.total.is_finite() && r.cd_sparse >= 0.0 && r.cd_dense >= 0.0);
        }
        assert!(r1.checkpoint.exists());
    }

    #[test]
    fn threaded_batches_match_sequential_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        toy_dataset(&data, 3);
        let cfg = toy_run_config();
        std::env::set_var("HOCLOUD_WORKERS", "1");
        let seq = train(&cfg, &data, &dir.path().join("seq")).unwrap();
        std::env::set_var("HOCLOUD_WORKERS", "4");
        let par = train(&cfg, &data, &dir.path().join("par")).unwrap();
        std::env::remove_var("HOCLOUD_WORKERS");
        assert_eq!(
            std::fs::read(&seq.log).unwrap(),
            std::fs::read(&par.log).unwrap()
        );
        assert_eq!(
            std::fs::read(&seq.checkpoint).unwrap(),
            std::fs::read(&par.checkpoint).unwrap()
        );
    }

    #[test]
    fn single_step_descends_on_one_sample() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let samples = toy_dataset(&data_dir, 1);
        let s = &samples[0];
        let cfg = RunConfig::toy();
        let mut model = Model::<f64>::seeded(&cfg).unwrap();
        let c = s.scene.object.centroid();
        let gt_t = Tensor::from_vec(&[1, 3], s.scene.gt_t_o.to_vec()).unwrap();
        let gt_s = centered(&s.surface_s, c);
        let gt_d = centered(&s.surface_d, c);
        let w = LossWeights::default();
        let loss_of = |m: &Model<f64>| {
            let mut g = Graph::inference();
            let p = m.forward(&mut g, &s.scene.image, &s.scene.hand, &s.scene.cam).unwrap();
            let l = total_loss(&mut g, p.t_o, p.sparse, p.dense, &gt_t, &gt_s, &gt_d, w).unwrap();
            g.val(l.total).item()
        };
        let before = loss_of(&model);
        let mut g = Graph::new();
        let p = model.forward(&mut g, &s.scene.image, &s.scene.hand, &s.scene.cam).unwrap();
        let l = total_loss(&mut g, p.t_o, p.sparse, p.dense, &gt_t, &gt_s, &gt_d, w).unwrap();
        let grads = g.backward(l.total);
        for prm in model.params_mut() {
            prm.zero_grad();
        }
        g.accumulate_param_grads(&grads, model.params_mut());
        let mut adam = Adam::new();
        adam.step(1e-5, model.params_mut());
        let after = loss_of(&model);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn evaluate_reports_noise_and_consistent_means() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        toy_dataset(&data, 2);
        let cfg = toy_run_config();
        let out = dir.path().join("run");
        let r = train(&cfg, &data, &out).unwrap();

        let clean = evaluate(&r.checkpoint, &data, EvalOptions { noise_sigma: 0.0, n_eval_points: 64 }).unwrap();
        assert_eq!(clean.rows.len(), 2);
        assert!(clean.rows.iter().all(|row| row.e_h_mm == 0.0));
        let mean_cd = clean.rows.iter().map(|r| r.cd_cm2).sum::<f64>() / 2.0;
        assert!((clean.means.cd_cm2 - mean_cd).abs() < 1e-9);

        let noisy = evaluate(&r.checkpoint, &data, EvalOptions { noise_sigma: 0.1, n_eval_points: 64 }).unwrap();
        assert!(noisy.rows.iter().all(|row| row.e_h_mm > 0.0));

        // determinism of the whole report
        let again = evaluate(&r.checkpoint, &data, EvalOptions { noise_sigma: 0.1, n_eval_points: 64 }).unwrap();
        assert_eq!(serde_json::to_string(&noisy).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn infer_exports_match_decoder_output() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        toy_dataset(&data, 1);
        let cfg = toy_run_config();
        let out = dir.path().join("run");
        let r = train(&cfg, &data, &out).unwrap();
        let pred_dir = dir.path().join("pred");
        let o = infer(&r.checkpoint, &data.join("sample_00000"), &pred_dir).unwrap();

        let sparse = crate::io::read_ply(&o.sparse_ply).unwrap();
        let dense = crate::io::read_ply(&o.dense_ply).unwrap();
        assert_eq!(dense.rows(), 8 * sparse.rows());

        // re-run the decoder; t_o in the metadata must match bitwise
        let loaded = LoadedCheckpoint::open(&r.checkpoint).unwrap();
        let model: Model<f64> = loaded.instantiate(&r.checkpoint).unwrap();
        let template = HandTemplate::generate();
        let s = read_sample(data.join("sample_00000"), &template).unwrap();
        let mut g = Graph::inference();
        let pred = model.forward(&mut g, &s.scene.image, &s.scene.hand, &s.scene.cam).unwrap();
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&o.meta).unwrap()).unwrap();
        for k in 0..3 {
            assert_eq!(doc["t_o"][k].as_f64().unwrap(), g.val(pred.t_o).data()[k]);
        }
        // PLY text round-trip within 1e-6
        for i in 0..dense.rows() {
            for k in 0..3 {
                assert!((dense.row(i)[k] - g.val(pred.dense).row(i)[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gradcheck_suite_passes_and_corruption_is_caught() {
        let only = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let ops = only(&["add", "matmul", "softmax", "corruptible"]);
        let checks = gradcheck_suite(Some(&ops), false).unwrap();
        assert_eq!(checks.len(), 4);
        assert!(checks.iter().all(|c| c.passed()), "{:?}",
            checks.iter().map(|c| (c.name.clone(), c.max_rel_err)).collect::<Vec<_>>());
        let checks = gradcheck_suite(Some(&ops), true).unwrap();
        assert!(!checks.iter().find(|c| c.name == "corruptible").unwrap().passed());
        assert!(checks.iter().filter(|c| c.name != "corruptible").all(|c| c.passed()));
    }
}
