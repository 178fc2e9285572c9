//! Autoregressive generation with a key/value cache and context re-noising.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{self, AttentionMask, DenoiserParams, Segment, Slot};
use crate::diffusion::{gaussian_vec, project_zero_mean, reverse_step, Igso3Table, NoiseSchedule, StepNoise};
use crate::error::{Error, Result};
use crate::se3::{superpose, FrameSet, Rotation, Trajectory, Vec3};
use crate::tape::Tape;
use crate::training::{corrupt, TrainConfig};

pub use crate::denoiser::KvCache;

/// Logical K/V size under the single-feature accounting `N L d layers bytes`.
pub fn cache_memory_bytes(n: u64, l: u64, d: u64, layers: u64, bytes_per_scalar: u64) -> u128 {
    n as u128 * l as u128 * d as u128 * layers as u128 * bytes_per_scalar as u128
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ContextNoise {
    /// Fresh level `U[0, max]` for every committed frame.
    Resample { max: f64 },
    Fixed { tau: f64 },
    Off,
}

impl ContextNoise {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ContextNoise::Resample { max } => rng.random::<f64>() * max,
            ContextNoise::Fixed { tau } => tau,
            ContextNoise::Off => 0.0,
        }
    }
}

impl Default for ContextNoise {
    fn default() -> Self {
        ContextNoise::Resample { max: TrainConfig::default().ctx_noise_max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub ctx_noise: ContextNoise,
    /// Zero Gaussian draws in the reverse SDE.
    pub deterministic: bool,
    /// Re-encode the whole history every step instead of reading the cache.
    pub no_cache: bool,
    /// Superpose each new frame onto the first one before committing it.
    pub align_to_first: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { ctx_noise: ContextNoise::default(), deterministic: false, no_cache: false, align_to_first: true }
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub ctx_taus: Vec<f64>,
    pub cache_bytes: u128,
    pub wall_time_s: f64,
    /// Set when generation stopped early; `trajectory` then holds the committed prefix.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub frames: usize,
    pub stride_ns: f64,
    pub seed: u64,
    pub ctx_noise: ContextNoise,
    pub wall_time_s: f64,
    pub cache_bytes_final: u128,
}

impl Rollout {
    pub fn sidecar(&self, seed: u64, ctx_noise: ContextNoise) -> Sidecar {
        Sidecar {
            frames: self.trajectory.len(),
            stride_ns: self.trajectory.strides().stride(0),
            seed,
            ctx_noise,
            wall_time_s: self.wall_time_s,
            cache_bytes_final: self.cache_bytes,
        }
    }
}

struct History {
    context: Vec<(FrameSet, f64)>,
}

struct Sampler<'a> {
    params: &'a DenoiserParams,
    schedule: &'a NoiseSchedule,
    table: &'a Igso3Table,
    cfg: &'a RolloutConfig,
    dt_ns: f64,
}

impl Sampler<'_> {
    /// Segment with the current target alone (cached) or behind the full history.
    fn target_segment(&self, history: &History, target: Slot) -> Segment {
        if !self.cfg.no_cache {
            return Segment { slots: vec![target], mask: AttentionMask::full(1) };
        }
        let h = history.context.len();
        let mut slots: Vec<Slot> = history
            .context
            .iter()
            .enumerate()
            .map(|(k, (f, tau))| Slot { frames: f.clone(), tau: *tau, dt_ns: self.dt_ns, frame_index: k, target: false })
            .collect();
        slots.push(target);
        Segment { slots, mask: AttentionMask::from_fn(h + 1, move |q, k| k <= q) }
    }

    fn scores(&self, history: &History, cache: &KvCache, slot: Slot) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
        let seg = self.target_segment(history, slot);
        let mut tape = Tape::new();
        let cache = (!self.cfg.no_cache).then_some(cache);
        let out = denoiser::forward(self.params, self.schedule, &seg, cache, &mut tape)?;
        out.scores(&tape).pop().ok_or_else(|| Error::InvalidArgument("no target scores".into()))
    }

    /// Full reverse chain for frame `index`; returns the frame in Å.
    fn sample_frame<R: Rng + ?Sized>(
        &self,
        history: &History,
        cache: &KvCache,
        n: usize,
        index: usize,
        rng: &mut R,
    ) -> Result<FrameSet> {
        let s = self.schedule;
        let (mut trans, mut rots): (Vec<Vec3>, Vec<Rotation>) = if self.cfg.deterministic {
            (vec![Vec3::zeros(); n], vec![Rotation::identity(); n])
        } else {
            let mut t: Vec<Vec3> = (0..n).map(|_| gaussian_vec(rng)).collect();
            project_zero_mean(&mut t);
            (t, (0..n).map(|_| Rotation::random(rng)).collect())
        };
        let grid = s.reverse_grid();
        for w in grid.windows(2) {
            let (tau, next) = (w[0], w[1]);
            let frames = to_frames(s, &trans, &rots)?;
            let slot = Slot { frames, tau, dt_ns: self.dt_ns, frame_index: index, target: true };
            let (mut st, sr) = self.scores(history, cache, slot)?;
            project_zero_mean(&mut st);
            let noise = if self.cfg.deterministic {
                StepNoise::zeros(n)
            } else {
                let mut z: Vec<Vec3> = (0..n).map(|_| gaussian_vec(rng)).collect();
                project_zero_mean(&mut z);
                StepNoise { translation: z, rotation: (0..n).map(|_| gaussian_vec(rng)).collect() }
            };
            reverse_step(s, &mut trans, &mut rots, &st, &sr, tau, tau - next, &noise)?;
        }
        // Final denoising estimate at tau_min from the last predicted scores.
        let tau = s.tau_min;
        let frames = to_frames(s, &trans, &rots)?;
        let slot = Slot { frames, tau, dt_ns: self.dt_ns, frame_index: index, target: true };
        let (mut st, sr) = self.scores(history, cache, slot)?;
        project_zero_mean(&mut st);
        let alpha = s.alpha_bar(tau)?;
        let sigma = s.sigma(tau)?;
        for i in 0..n {
            if !(st[i].iter().chain(sr[i].iter()).all(|v| v.is_finite())) {
                return Err(Error::NonFinite(format!("final score at residue {i}")));
            }
            trans[i] = (trans[i] + st[i] * (1.0 - alpha)) / alpha.sqrt();
            rots[i] = rots[i].compose(&Rotation::exp(&(sr[i] * (sigma * sigma))));
        }
        to_frames(s, &trans, &rots)
    }

    fn commit<R: Rng + ?Sized>(
        &self,
        frame: &FrameSet,
        index: usize,
        history: &mut History,
        cache: &mut KvCache,
        rng: &mut R,
    ) -> Result<f64> {
        let tau = self.cfg.ctx_noise.draw(rng);
        let ctx = if tau > 0.0 { corrupt(self.schedule, self.table, frame, tau, rng)?.0 } else { frame.clone() };
        if !self.cfg.no_cache {
            let seg = Segment {
                slots: vec![Slot { frames: ctx.clone(), tau, dt_ns: self.dt_ns, frame_index: index, target: false }],
                mask: AttentionMask::full(1),
            };
            let mut tape = Tape::new();
            let out = denoiser::forward(self.params, self.schedule, &seg, Some(cache), &mut tape)?;
            cache.append(&out.slot_kv(0), index, tau)?;
        }
        history.context.push((ctx, tau));
        Ok(tau)
    }
}

fn to_frames(s: &NoiseSchedule, trans: &[Vec3], rots: &[Rotation]) -> Result<FrameSet> {
    let t: Vec<Vec3> = trans.iter().map(|t| s.to_angstrom(t)).collect();
    FrameSet::from_parts(&t, rots)
}

/// Generates `n_frames` frames (the first is `initial`, centered) at stride `dt_ns`.
#[allow(clippy::too_many_arguments)]
pub fn generate<R: Rng + ?Sized>(
    initial: &FrameSet,
    n_frames: usize,
    dt_ns: f64,
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    table: &Igso3Table,
    cfg: &RolloutConfig,
    rng: &mut R,
) -> Result<Rollout> {
    if n_frames == 0 {
        return Err(Error::InvalidArgument("n_frames must be at least 1".into()));
    }
    if !(dt_ns > 0.0) {
        return Err(Error::InvalidArgument(format!("stride {dt_ns} ns must be positive")));
    }
    let train = TrainConfig::default();
    if dt_ns < train.dt_min_ns || dt_ns > train.dt_max_ns {
        log::warn!("stride {dt_ns} ns lies outside the trained range; extrapolating");
    }
    let start = Instant::now();
    let n = initial.residue_count();
    let pc = &params.config;
    let mut cache = KvCache::new(n, pc.attention_layers(), pc.model_dim);
    let sampler = Sampler { params, schedule, table, cfg, dt_ns };
    let mut history = History { context: Vec::with_capacity(n_frames) };
    let first = initial.centered();
    let mut frames = vec![first.clone()];
    let mut ctx_taus = Vec::with_capacity(n_frames);
    let mut failure = None;
    if n_frames > 1 {
        ctx_taus.push(sampler.commit(&first, 0, &mut history, &mut cache, rng)?);
    }
    for index in 1..n_frames {
        let frame = match sampler.sample_frame(&history, &cache, n, index, rng) {
            Ok(f) => f,
            Err(e @ Error::NonFinite(_)) => {
                failure = Some(format!("frame {index}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let frame = if cfg.align_to_first {
            let fit = superpose(&frame.translations(), &first.translations())?;
            frame.transformed(&fit.transform)
        } else {
            frame
        };
        frames.push(frame.clone());
        if index + 1 < n_frames {
            ctx_taus.push(sampler.commit(&frame, index, &mut history, &mut cache, rng)?);
        }
    }
    let cache_bytes = cache.logical_bytes(std::mem::size_of::<f64>());
    Ok(Rollout {
        trajectory: Trajectory::uniform(frames, dt_ns)?,
        ctx_taus,
        cache_bytes,
        wall_time_s: start.elapsed().as_secs_f64(),
        failure,
    })
}
