use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hocloud::config::RunConfig;
use hocloud::error::Result;
use hocloud::hand::HandTemplate;
use hocloud::harness::{self, EvalOptions};
use hocloud::synth::{generate_scene, write_dataset, StoredSample, SynthConfig};

#[derive(Parser)]
#[command(name = "hocloud", version, about = "Point-cloud reconstruction of hand-held objects")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic dataset
    Synth {
        /// Run config JSON; built-in defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model, writing step logs and checkpoints
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint over a dataset and write a JSON report
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Std-dev of joint-angle noise (radians) injected into the hand input
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        /// Ground-truth surface points resampled per shape
        #[arg(long, default_value_t = 4096)]
        eval_points: usize,
    },
    /// Run one stored sample through a checkpoint and export PLY clouds
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op; nonzero exit on failure
    Gradcheck {
        /// Comma-separated op names; all ops when omitted
        #[arg(long, value_delimiter = ',')]
        ops: Option<Vec<String>>,
        /// Self-test hook: corrupt one backward pass so the check must fail
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Synth { config, out, count, seed } => {
            let cfg = load_config(&config)?;
            let synth_cfg = SynthConfig { image_size: cfg.image_size, focal: cfg.focal };
            let template = HandTemplate::generate();
            let mut samples = Vec::with_capacity(count);
            for i in 0..count as u64 {
                let scene = generate_scene(&template, seed.wrapping_add(i), &synth_cfg)?;
                samples.push(StoredSample::materialize(scene, cfg.n_sparse, cfg.n_dense())?);
            }
            write_dataset(&samples, &out)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Cmd::Train { config, data, out } => {
            let cfg = load_config(&config)?;
            let outcome = harness::train(&cfg, &data, &out)?;
            println!(
                "trained {} steps: loss {:.6} -> {:.6}",
                cfg.steps, outcome.first.total, outcome.last.total
            );
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("log: {}", outcome.log.display());
        }
        Cmd::Eval { ckpt, data, report, noise_sigma, eval_points } => {
            let opts = EvalOptions { noise_sigma, n_eval_points: eval_points };
            let rep = harness::evaluate(&ckpt, &data, opts)?;
            harness::write_report(&rep, &report)?;
            let m = &rep.means;
            println!(
                "{} samples | CD {:.4} cm^2 | FS@5mm {:.3} | FS@10mm {:.3} | t_err {:.3} cm",
                rep.rows.len(),
                m.cd_cm2,
                m.fs_5mm,
                m.fs_10mm,
                m.t_err_cm
            );
            println!("report: {}", report.display());
        }
        Cmd::Infer { ckpt, sample, out } => {
            let o = harness::infer(&ckpt, &sample, &out)?;
            println!("t_o = [{:.6}, {:.6}, {:.6}] m", o.t_o[0], o.t_o[1], o.t_o[2]);
            println!("sparse: {}", o.sparse_ply.display());
            println!("dense: {}", o.dense_ply.display());
        }
        Cmd::Gradcheck { ops, corrupt } => {
            let checks = harness::gradcheck_suite(ops.as_deref(), corrupt)?;
            let mut ok = true;
            for c in &checks {
                let status = if c.passed() { "ok" } else { "FAIL" };
                println!("{:<22} max rel err {:>12.3e}  (tol {:.0e})  {status}", c.name, c.max_rel_err, c.tol);
                ok &= c.passed();
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
