//! Block-causal teacher forcing, denoising score matching and the optimizer loop.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{self, AttentionMask, DenoiserParams, KvCache, Segment, Slot};
use crate::diffusion::{gaussian_vec, project_zero_mean, Igso3Table, NoiseSchedule};
use crate::error::{Error, Result};
use crate::se3::{FrameSet, Rotation, Strides, Trajectory, Vec3};
use crate::tape::Tape;

/// Largest integer stride, in base snapshots.
pub const MAX_STRIDE: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ctx_noise_max: f64,
    pub ctx_noise_prob: f64,
    pub dt_min_ns: f64,
    pub dt_max_ns: f64,
    pub frames_per_sample: usize,
    /// Examples averaged per optimizer step.
    pub batch_size: usize,
    pub trans_weight: f64,
    pub rot_weight: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub divergence_threshold: f64,
    /// Multiply each frame's translation term by `1 - alpha` and rotation
    /// term by `sigma^2`, equalizing the per-level scale of the targets.
    pub noise_scaled_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ctx_noise_max: 0.1,
            ctx_noise_prob: 0.75,
            dt_min_ns: 1e-2,
            dt_max_ns: 1e1,
            frames_per_sample: 8,
            batch_size: 1,
            trans_weight: 1.0,
            rot_weight: 0.5,
            lr: 1e-3,
            grad_clip: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: 5000,
            divergence_threshold: 1e6,
            noise_scaled_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let probs_ok = (0.0..=1.0).contains(&self.ctx_noise_prob) && (0.0..=1.0).contains(&self.ctx_noise_max);
        if !probs_ok {
            return Err(Error::InvalidArgument("context noise settings must lie in [0, 1]".into()));
        }
        if !(self.dt_min_ns > 0.0 && self.dt_min_ns <= self.dt_max_ns) {
            return Err(Error::InvalidArgument("stride range must be positive and ordered".into()));
        }
        if self.frames_per_sample == 0 || self.batch_size == 0 || self.grad_clip <= 0.0 || self.lr < 0.0 {
            return Err(Error::InvalidArgument("frames, batch, clip and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Slots `0..L` are clean copies, `L..2L` the noisy copies of the same frames.
pub fn build_block_causal_mask(frames: usize) -> AttentionMask {
    let l = frames;
    AttentionMask::from_fn(2 * l, move |q, k| match (q < l, k < l) {
        (true, true) => k <= q,
        (true, false) => false,
        (false, true) => k < q - l,
        (false, false) => k == q,
    })
}

/// One frame of a training snippet.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameExample {
    /// Clean frame, centered, Å.
    pub clean: FrameSet,
    /// Context copy (possibly perturbed), Å.
    pub context: FrameSet,
    pub ctx_tau: f64,
    /// Noisy target copy, Å.
    pub noisy: FrameSet,
    pub tau: f64,
    /// Zero-mean translation draw in internal units.
    pub eps: Vec<Vec3>,
    /// IGSO3 score of the sampled relative rotations.
    pub rot_target: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub frames: Vec<FrameExample>,
    /// Stride drawn log-uniformly before snapping, ns.
    pub dt_drawn: f64,
    /// Stride actually realised (integer multiple of the base), ns.
    pub dt_ns: f64,
    pub stride: usize,
    pub start: usize,
}

/// Applies forward noise at `tau` to a clean (centered, Å) frame set.
/// Returns the noisy set in Å, the zero-mean translation draw and the
/// tangent perturbations of the rotations.
pub fn corrupt<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    table: &Igso3Table,
    clean: &FrameSet,
    tau: f64,
    rng: &mut R,
) -> Result<(FrameSet, Vec<Vec3>, Vec<Vec3>)> {
    let n = clean.residue_count();
    let mut eps: Vec<Vec3> = (0..n).map(|_| gaussian_vec(rng)).collect();
    project_zero_mean(&mut eps);
    let t0: Vec<Vec3> = clean.translations().iter().map(|t| schedule.to_internal(t)).collect();
    let noisy_t = schedule.forward_translations_with(&t0, tau, &eps)?;
    let sigma = schedule.sigma(tau)?;
    let mut tangents = Vec::with_capacity(n);
    let mut rots = Vec::with_capacity(n);
    for r in clean.rotations() {
        let v = table.sample_tangent(sigma, rng)?;
        rots.push(r.compose(&Rotation::exp(&v)));
        tangents.push(v);
    }
    let t_ang: Vec<Vec3> = noisy_t.iter().map(|t| schedule.to_angstrom(t)).collect();
    Ok((FrameSet::from_parts(&t_ang, &rots)?, eps, tangents))
}

fn draw_log_uniform<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    if hi <= lo {
        return lo;
    }
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

pub fn sample_training_example<R: Rng + ?Sized>(
    traj: &Trajectory,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    table: &Igso3Table,
    rng: &mut R,
) -> Result<TrainingExample> {
    let base = match traj.strides() {
        Strides::Uniform(dt) => *dt,
        Strides::PerFrame(_) => {
            return Err(Error::InvalidArgument("training needs a uniformly strided trajectory".into()))
        }
    };
    let l = cfg.frames_per_sample;
    let max_k = if l > 1 { ((traj.len() - 1) / (l - 1)).min(MAX_STRIDE) } else { MAX_STRIDE };
    if max_k == 0 || traj.len() < l {
        return Err(Error::InvalidArgument(format!(
            "trajectory of {} frames is shorter than {l} frames per sample",
            traj.len()
        )));
    }
    let snap = |dt: f64| ((dt / base).round() as usize).clamp(1, MAX_STRIDE);
    let mut dt_drawn = draw_log_uniform(cfg.dt_min_ns, cfg.dt_max_ns, rng);
    if snap(dt_drawn) > max_k {
        let hi = (max_k as f64 * base).min(cfg.dt_max_ns);
        dt_drawn = draw_log_uniform(cfg.dt_min_ns.min(hi), hi, rng);
    }
    let stride = snap(dt_drawn).min(max_k);
    let span = (l - 1) * stride;
    let start = rng.random_range(0..traj.len() - span);
    let mut frames = Vec::with_capacity(l);
    for k in 0..l {
        let clean = traj.frame(start + k * stride).centered();
        let (context, ctx_tau) = if rng.random::<f64>() < cfg.ctx_noise_prob {
            let tc = rng.random::<f64>() * cfg.ctx_noise_max;
            (corrupt(schedule, table, &clean, tc, rng)?.0, tc)
        } else {
            (clean.clone(), 0.0)
        };
        let tau = schedule.tau_min + rng.random::<f64>() * (schedule.tau_max - schedule.tau_min);
        let (noisy, eps, tangents) = corrupt(schedule, table, &clean, tau, rng)?;
        let sigma = schedule.sigma(tau)?;
        let rot_target = tangents.iter().map(|v| table.score(v, sigma)).collect::<Result<_>>()?;
        frames.push(FrameExample { clean, context, ctx_tau, noisy, tau, eps, rot_target });
    }
    Ok(TrainingExample { frames, dt_drawn, dt_ns: stride as f64 * base, stride, start })
}

/// Teacher-forcing segment: clean copies then noisy copies under the block-causal mask.
pub fn training_segment(example: &TrainingExample) -> Segment {
    let l = example.frames.len();
    let mut slots = Vec::with_capacity(2 * l);
    for (k, f) in example.frames.iter().enumerate() {
        slots.push(Slot { frames: f.context.clone(), tau: f.ctx_tau, dt_ns: example.dt_ns, frame_index: k, target: false });
    }
    for (k, f) in example.frames.iter().enumerate() {
        slots.push(Slot { frames: f.noisy.clone(), tau: f.tau, dt_ns: example.dt_ns, frame_index: k, target: true });
    }
    Segment { slots, mask: build_block_causal_mask(l) }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub trans: f64,
    pub rot: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.trans + self.rot
    }
}

/// Score targets and prediction for one frame.
pub struct FrameScores<'a> {
    pub trans_pred: &'a [Vec3],
    pub rot_pred: &'a [Vec3],
    pub eps: &'a [Vec3],
    pub rot_target: &'a [Vec3],
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub trans: f64,
    pub rot: f64,
    pub noise_scaled: bool,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        Self { trans: c.trans_weight, rot: c.rot_weight, noise_scaled: c.noise_scaled_loss }
    }
}

/// Weighted score-matching loss averaged over frames, with the gradient
/// with respect to every prediction (`(d trans, d rot)` per frame).
pub fn dsm_loss(
    schedule: &NoiseSchedule,
    frames: &[FrameScores<'_>],
    weights: LossWeights,
) -> Result<(LossParts, Vec<(Vec<Vec3>, Vec<Vec3>)>)> {
    let nf = frames.len() as f64;
    let mut parts = LossParts::default();
    let mut grads = Vec::with_capacity(frames.len());
    for f in frames {
        let n = f.eps.len();
        let lens = [f.trans_pred.len(), f.rot_pred.len(), f.rot_target.len()];
        if let Some(&bad) = lens.iter().find(|&&x| x != n) {
            return Err(Error::ResidueMismatch(n, bad));
        }
        let var = 1.0 - schedule.alpha_bar(f.tau)?;
        let sigma = schedule.sigma(f.tau)?;
        let (wt, wr) = if weights.noise_scaled {
            (weights.trans * var, weights.rot * sigma * sigma)
        } else {
            (weights.trans, weights.rot)
        };
        let denom = 3.0 * n as f64 * nf;
        let mut gt = Vec::with_capacity(n);
        let mut gr = Vec::with_capacity(n);
        for i in 0..n {
            let target = -f.eps[i] / var.sqrt();
            let dt = f.trans_pred[i] - target;
            let dr = f.rot_pred[i] - f.rot_target[i];
            parts.trans += wt * dt.norm_squared() / denom;
            parts.rot += wr * dr.norm_squared() / denom;
            gt.push(dt * (2.0 * wt / denom));
            gr.push(dr * (2.0 * wr / denom));
        }
        grads.push((gt, gr));
    }
    if !parts.total().is_finite() {
        return Err(Error::NonFinite(format!("loss {parts:?}")));
    }
    Ok((parts, grads))
}

fn vecs_to_array(blocks: &[Vec<Vec3>]) -> Array2<f64> {
    let rows: usize = blocks.iter().map(Vec::len).sum();
    let mut a = Array2::zeros((rows, 3));
    for (r, v) in blocks.iter().flatten().enumerate() {
        a[[r, 0]] = v.x;
        a[[r, 1]] = v.y;
        a[[r, 2]] = v.z;
    }
    a
}

/// Loss and parameter gradient of one teacher-forced example.
pub fn example_loss_and_grad(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    example: &TrainingExample,
    weights: LossWeights,
) -> Result<(LossParts, Vec<f64>)> {
    let mut tape = Tape::new();
    let seg = training_segment(example);
    let out = denoiser::forward(params, schedule, &seg, None, &mut tape)?;
    let scores = out.scores(&tape);
    let frame_scores: Vec<FrameScores<'_>> = scores
        .iter()
        .zip(&example.frames)
        .map(|((t, r), f)| FrameScores { trans_pred: t, rot_pred: r, eps: &f.eps, rot_target: &f.rot_target, tau: f.tau })
        .collect();
    let (parts, grads) = dsm_loss(schedule, &frame_scores, weights)?;
    let gt: Vec<Vec<Vec3>> = grads.iter().map(|g| g.0.clone()).collect();
    let gr: Vec<Vec<Vec3>> = grads.iter().map(|g| g.1.clone()).collect();
    let (Some(tv), Some(rv)) = (out.translation, out.rotation) else {
        return Err(Error::InvalidArgument("example has no target frames".into()));
    };
    let g = tape.backward(&[(tv, vecs_to_array(&gt)), (rv, vecs_to_array(&gr))], params.len());
    Ok((parts, g.params))
}

/// Scores for every noisy frame from one block-causal pass.
pub fn predict_parallel(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    example: &TrainingExample,
) -> Result<Vec<(Vec<Vec3>, Vec<Vec3>)>> {
    let mut tape = Tape::new();
    let out = denoiser::forward(params, schedule, &training_segment(example), None, &mut tape)?;
    Ok(out.scores(&tape))
}

/// The same scores computed frame by frame against a growing K/V cache.
pub fn predict_sequential(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    example: &TrainingExample,
) -> Result<Vec<(Vec<Vec3>, Vec<Vec3>)>> {
    let n = example.frames[0].clean.residue_count();
    let cfg = &params.config;
    let mut cache = KvCache::new(n, cfg.attention_layers(), cfg.model_dim);
    let mut scores = Vec::with_capacity(example.frames.len());
    for (k, f) in example.frames.iter().enumerate() {
        let mut tape = Tape::new();
        let noisy = Segment {
            slots: vec![Slot { frames: f.noisy.clone(), tau: f.tau, dt_ns: example.dt_ns, frame_index: k, target: true }],
            mask: AttentionMask::full(1),
        };
        let out = denoiser::forward(params, schedule, &noisy, Some(&cache), &mut tape)?;
        scores.push(out.scores(&tape).remove(0));
        let mut tape = Tape::new();
        let commit = Segment {
            slots: vec![Slot { frames: f.context.clone(), tau: f.ctx_tau, dt_ns: example.dt_ns, frame_index: k, target: false }],
            mask: AttentionMask::full(1),
        };
        let out = denoiser::forward(params, schedule, &commit, Some(&cache), &mut tape)?;
        cache.append(&out.slot_kv(0), k, f.ctx_tau)?;
    }
    Ok(scores)
}

/// A differentiable training objective over a flat parameter vector.
pub trait Objective {
    fn loss_and_grad<R: Rng + ?Sized>(&mut self, params: &[f64], rng: &mut R) -> Result<(LossParts, Vec<f64>)>;
}

pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * grad[k];
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * grad[k] * grad[k];
            params[k] -= cfg.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + cfg.adam_eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_trans: f64,
    pub loss_rot: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Adam with global-norm clipping; aborts when the loss exceeds the divergence threshold.
pub fn train_loop<O: Objective, R: Rng + ?Sized>(
    objective: &mut O,
    params: &mut [f64],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let mut adam = Adam::new(params.len());
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (parts, mut grad) = objective.loss_and_grad(params, rng)?;
        let loss = parts.total();
        if !(loss <= cfg.divergence_threshold) {
            return Err(Error::Diverged { step, loss });
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at step {step}")));
        }
        if norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        adam.step(params, &grad, cfg);
        curve.push(StepRecord { step, loss_trans: parts.trans, loss_rot: parts.rot, grad_norm: norm });
        if step % 500 == 0 {
            log::debug!("step {step}: loss {loss:.4} grad {norm:.3}");
        }
    }
    Ok(curve)
}

pub fn write_loss_csv<W: Write>(curve: &[StepRecord], mut w: W) -> Result<()> {
    writeln!(w, "step,loss_trans,loss_rot,grad_norm")?;
    for r in curve {
        writeln!(w, "{},{},{},{}", r.step, r.loss_trans, r.loss_rot, r.grad_norm)?;
    }
    Ok(())
}

pub fn save_loss_csv(curve: &[StepRecord], path: impl AsRef<Path>) -> Result<()> {
    write_loss_csv(curve, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Teacher-forced denoising objective over a set of trajectories.
pub struct DenoiserObjective<'a> {
    pub params: DenoiserParams,
    pub data: &'a [Trajectory],
    pub schedule: &'a NoiseSchedule,
    pub table: &'a Igso3Table,
    pub cfg: &'a TrainConfig,
}

impl Objective for DenoiserObjective<'_> {
    fn loss_and_grad<R: Rng + ?Sized>(&mut self, params: &[f64], rng: &mut R) -> Result<(LossParts, Vec<f64>)> {
        self.params.values.copy_from_slice(params);
        let b = self.cfg.batch_size;
        let mut total = LossParts::default();
        let mut grad = vec![0.0; params.len()];
        for _ in 0..b {
            let traj = &self.data[rng.random_range(0..self.data.len())];
            let ex = sample_training_example(traj, self.cfg, self.schedule, self.table, rng)?;
            let (parts, g) = example_loss_and_grad(&self.params, self.schedule, &ex, self.cfg.into())?;
            total.trans += parts.trans / b as f64;
            total.rot += parts.rot / b as f64;
            grad.iter_mut().zip(&g).for_each(|(a, v)| *a += v / b as f64);
        }
        Ok((total, grad))
    }
}

/// Trains `params` in place on `data` and returns the loss curve.
pub fn train_denoiser<R: Rng + ?Sized>(
    params: &mut DenoiserParams,
    data: &[Trajectory],
    schedule: &NoiseSchedule,
    table: &Igso3Table,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<StepRecord>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training trajectories".into()));
    }
    let mut values = params.values.clone();
    let mut obj = DenoiserObjective { params: params.clone(), data, schedule, table, cfg };
    let curve = train_loop(&mut obj, &mut values, cfg, rng)?;
    params.values = values;
    params.check_finite()?;
    Ok(curve)
}
