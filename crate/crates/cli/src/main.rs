use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use stmd_core::acceptance::{self, EndToEndConfig};
use stmd_core::costmodel;
use stmd_core::denoiser::{DenoiserConfig, DenoiserParams};
use stmd_core::diffusion::{Igso3Table, NoiseSchedule};
use stmd_core::format::{self, ReadOptions};
use stmd_core::metrics::{self, EvalConfig};
use stmd_core::mzlab;
use stmd_core::rollout::{self, ContextNoise, RolloutConfig};
use stmd_core::synth::{SynthConfig, SynthSystem};
use stmd_core::training::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "stmd", version, about = "Spatio-temporal SE(3) diffusion for coarse-grained trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ScheduleArgs {
    #[arg(long, default_value_t = NoiseSchedule::default().b_min)]
    b_min: f64,
    #[arg(long, default_value_t = NoiseSchedule::default().b_max)]
    b_max: f64,
    #[arg(long, default_value_t = NoiseSchedule::default().sigma_min)]
    sigma_min: f64,
    #[arg(long, default_value_t = NoiseSchedule::default().sigma_max)]
    sigma_max: f64,
    /// Multiplier from Å to internal diffusion units.
    #[arg(long, default_value_t = NoiseSchedule::default().coordinate_scale)]
    coordinate_scale: f64,
    /// Reverse-SDE steps per frame.
    #[arg(long, default_value_t = NoiseSchedule::default().steps)]
    diffusion_steps: usize,
}

impl ScheduleArgs {
    fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule {
            b_min: self.b_min,
            b_max: self.b_max,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            coordinate_scale: self.coordinate_scale,
            steps: self.diffusion_steps,
            ..NoiseSchedule::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the synthetic Langevin chain and write an STMD file.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        residues: usize,
        #[arg(long, default_value_t = 10_000)]
        frames: usize,
        /// Snapshot interval in ns.
        #[arg(long, default_value_t = SynthConfig::default().dt_ns)]
        dt_ns: f64,
    },
    /// Train the denoiser; writes model.bin, config.json and loss.csv into --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        schedule: ScheduleArgs,
        /// Training trajectories (STMD).
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long, default_value_t = TrainConfig::default().steps)]
        steps: usize,
        #[arg(long, default_value_t = TrainConfig::default().lr)]
        lr: f64,
        #[arg(long, default_value_t = TrainConfig::default().batch_size)]
        batch_size: usize,
        #[arg(long, default_value_t = TrainConfig::default().dt_min_ns)]
        dt_min_ns: f64,
        #[arg(long, default_value_t = TrainConfig::default().dt_max_ns)]
        dt_max_ns: f64,
        #[arg(long, default_value_t = TrainConfig::default().ctx_noise_max)]
        ctx_noise_max: f64,
        #[arg(long)]
        noise_scaled_loss: bool,
        #[arg(long, default_value_t = DenoiserConfig::default().model_dim)]
        model_dim: usize,
        #[arg(long, default_value_t = DenoiserConfig::default().blocks)]
        blocks: usize,
    },
    /// Generate a trajectory autoregressively from a trained model.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// STMD file whose first frame seeds the rollout.
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = 0.01)]
        stride_ns: f64,
        /// Upper bound of the per-frame context noise level; 0 disables it.
        #[arg(long, default_value_t = TrainConfig::default().ctx_noise_max)]
        ctx_noise: f64,
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        no_cache: bool,
        /// Override the trained schedule's reverse-SDE step count.
        #[arg(long)]
        diffusion_steps: Option<usize>,
    },
    /// Compare a generated trajectory with a reference.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Memory-inflation and separability checks on random linear systems.
    MzVerify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        systems: usize,
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
    /// FLOP and KV-cache cost model; writes the sweep CSV to --out.
    CostReport {
        #[command(flatten)]
        common: Common,
        #[arg(long = "N", default_value_t = 200)]
        n: u64,
        #[arg(long = "L", default_value_t = 32)]
        l: u64,
        #[arg(long = "d", default_value_t = 256)]
        d: u64,
        #[arg(long, default_value_t = 1)]
        layers: u64,
        #[arg(long, default_value_t = 4)]
        bytes_per_scalar: u64,
    },
    /// Run the acceptance suite.
    Selftest {
        #[command(flatten)]
        common: Common,
        /// Skip the end-to-end training run.
        #[arg(long)]
        fast: bool,
    },
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    schedule: NoiseSchedule,
    model: DenoiserConfig,
    train: TrainConfig,
}

fn require_out(common: &Common) -> Result<&Path> {
    common.out.as_deref().context("--out is required")
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), v)?;
    Ok(())
}

fn load_traj(path: &Path) -> Result<stmd_core::se3::Trajectory> {
    format::load(path, ReadOptions::default()).with_context(|| format!("reading {}", path.display()))
}

fn run(cmd: Command) -> Result<Value> {
    match cmd {
        Command::Synth { common, residues, frames, dt_ns } => {
            let out = require_out(&common)?;
            let cfg = SynthConfig { residues, dt_ns, ..SynthConfig::default() };
            let system = SynthSystem::new(cfg.clone())?;
            let traj = system.generate(frames, &mut ChaCha8Rng::seed_from_u64(common.seed))?;
            format::save(&traj, out)?;
            Ok(json!({
                "command": "synth", "out": out, "seed": common.seed, "residues": residues,
                "frames": traj.len(), "dt_ns": dt_ns, "relaxation_time_ns": system.config().relaxation_time_ns(),
            }))
        }
        Command::Train {
            common, schedule, data, steps, lr, batch_size, dt_min_ns, dt_max_ns, ctx_noise_max, noise_scaled_loss, model_dim, blocks,
        } => {
            let out = require_out(&common)?;
            fs::create_dir_all(out)?;
            let schedule = schedule.schedule();
            let table = Igso3Table::new(schedule.sigma_min, schedule.sigma_max, schedule.convention);
            let trajs = data.iter().map(|p| load_traj(p)).collect::<Result<Vec<_>>>()?;
            let model = DenoiserConfig { model_dim, blocks, ..DenoiserConfig::default() };
            let train = TrainConfig { steps, lr, batch_size, dt_min_ns, dt_max_ns, ctx_noise_max, noise_scaled_loss, ..TrainConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
            let mut params = DenoiserParams::init(model.clone(), &mut rng)?;
            let curve = training::train_denoiser(&mut params, &trajs, &schedule, &table, &train, &mut rng)?;
            params.save(out.join("model.bin"))?;
            training::save_loss_csv(&curve, out.join("loss.csv"))?;
            write_json(&out.join("config.json"), &ModelMeta { schedule, model, train })?;
            let last = curve.last().context("empty loss curve")?;
            Ok(json!({
                "command": "train", "out": out, "seed": common.seed, "steps": curve.len(),
                "parameters": params.len(), "final_loss_trans": last.loss_trans, "final_loss_rot": last.loss_rot,
            }))
        }
        Command::Rollout { common, model, init, frames, stride_ns, ctx_noise, deterministic, no_cache, diffusion_steps } => {
            let out = require_out(&common)?;
            let mut meta: ModelMeta = serde_json::from_reader(File::open(model.join("config.json"))?)?;
            if let Some(steps) = diffusion_steps {
                meta.schedule.steps = steps;
            }
            let params = DenoiserParams::load(model.join("model.bin"))?;
            let table = Igso3Table::new(meta.schedule.sigma_min, meta.schedule.sigma_max, meta.schedule.convention);
            let start = load_traj(&init)?;
            let ctx = if ctx_noise > 0.0 { ContextNoise::Resample { max: ctx_noise } } else { ContextNoise::Off };
            let cfg = RolloutConfig { ctx_noise: ctx, deterministic, no_cache, ..RolloutConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
            let r = rollout::generate(start.frame(0), frames, stride_ns, &params, &meta.schedule, &table, &cfg, &mut rng)?;
            format::save(&r.trajectory, out)?;
            let sidecar = r.sidecar(common.seed, ctx);
            write_json(&out.with_extension("json"), &sidecar)?;
            if let Some(f) = &r.failure {
                bail!("rollout stopped after {} frames: {f}", r.trajectory.len());
            }
            Ok(json!({"command": "rollout", "out": out, "seed": common.seed, "sidecar": sidecar}))
        }
        Command::Eval { common, generated, reference, bins } => {
            let gen = load_traj(&generated)?;
            let reference = load_traj(&reference)?;
            let report = metrics::evaluate(&gen, &reference, &EvalConfig { bins, ..EvalConfig::default() })?;
            if let Some(out) = &common.out {
                write_json(out, &report)?;
                metrics::write_curves_csv(&report, BufWriter::new(File::create(out.with_extension("csv"))?))?;
            }
            let mut v = serde_json::to_value(&report)?;
            v["command"] = json!("eval");
            Ok(v)
        }
        Command::MzVerify { common, systems, points } => {
            let report = mzlab::verify(systems, points, &mut ChaCha8Rng::seed_from_u64(common.seed))?;
            if let Some(out) = &common.out {
                write_json(out, &report)?;
            }
            Ok(json!({
                "command": "mz-verify", "seed": common.seed, "systems": report.systems.len(),
                "max_relative_residual": report.max_relative_residual,
                "hand_kernel_max_error": report.hand_kernel_max_error,
                "convergence_order": report.convergence_order,
                "separable_ratio": report.separable_ratio,
                "coupled_min_ratio": report.coupled_min_ratio,
            }))
        }
        Command::CostReport { common, n, l, d, layers, bytes_per_scalar } => {
            let row = costmodel::cost_row(n, l, d, layers, bytes_per_scalar);
            if let Some(out) = &common.out {
                costmodel::write_cost_csv(&costmodel::cost_sweep(d, layers, bytes_per_scalar), BufWriter::new(File::create(out)?))?;
            }
            Ok(json!({
                "command": "cost-report", "N": n, "L": l, "d": d, "layers": layers,
                "kv_singles_bytes": row.kv_singles as u64,
                "kv_singles_plus_pairs_bytes": row.kv_singles_plus_pairs as u64,
                "flops_st_joint": row.st_joint as f64,
                "flops_pairformer_pair_temporal": row.pairformer_pair_temporal as f64,
                "flops_pairformer_single_temporal": row.pairformer_single_temporal as f64,
                "crossover_l": costmodel::crossover_l(n as f64),
            }))
        }
        Command::Selftest { common, fast } => {
            let mut outcomes = acceptance::run_fast(common.seed);
            for o in &outcomes {
                eprintln!("{}", o.line());
            }
            if !fast {
                let o = acceptance::end_to_end(&EndToEndConfig::default(), common.seed);
                eprintln!("{}", o.line());
                outcomes.push(o);
            }
            if let Some(out) = &common.out {
                write_json(out, &outcomes)?;
            }
            let failed: Vec<u8> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
            if !failed.is_empty() {
                bail!("criteria failed: {failed:?}");
            }
            Ok(json!({"command": "selftest", "seed": common.seed, "passed": outcomes.len()}))
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": format!("{e:#}")}));
            ExitCode::from(1)
        }
    }
}
