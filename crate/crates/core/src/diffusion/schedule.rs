use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::Vec3;

/// Which heat-kernel exponent the rotation marginal uses:
/// `exp(-l(l+1) sigma^2 / 2)` (`Half`) or `exp(-l(l+1) sigma^2)` (`Full`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum HeatKernelConvention {
    #[default]
    Half,
    Full,
}

impl HeatKernelConvention {
    /// Standard deviation of the equivalent tangent-space Gaussian.
    pub fn effective_sigma(self, sigma: f64) -> f64 {
        match self {
            HeatKernelConvention::Half => sigma,
            HeatKernelConvention::Full => sigma * std::f64::consts::SQRT_2,
        }
    }
}

/// Translation VP-SDE with linear `beta`, log-linear rotation noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub b_min: f64,
    pub b_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Å -> internal units.
    pub coordinate_scale: f64,
    pub steps: usize,
    pub tau_max: f64,
    pub tau_min: f64,
    pub convention: HeatKernelConvention,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            b_min: 0.1,
            b_max: 20.0,
            sigma_min: 0.1,
            sigma_max: 1.5,
            coordinate_scale: 0.1,
            steps: 200,
            tau_max: 1.0,
            tau_min: 0.01,
            convention: HeatKernelConvention::Half,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.tau_min
            && self.tau_min < self.tau_max
            && self.tau_max <= 1.0
            && 0.0 < self.b_min
            && self.b_min < self.b_max
            && 0.0 < self.sigma_min
            && self.sigma_min < self.sigma_max
            && self.coordinate_scale > 0.0
            && self.steps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent noise schedule {self:?}")))
        }
    }

    fn check_tau(tau: f64) -> Result<()> {
        if (0.0..=1.0).contains(&tau) {
            Ok(())
        } else {
            Err(Error::TimeOutOfRange(tau))
        }
    }

    pub fn beta(&self, tau: f64) -> f64 {
        self.b_min + tau * (self.b_max - self.b_min)
    }

    /// `exp(-∫_0^tau beta(s) ds)`.
    pub fn alpha_bar(&self, tau: f64) -> Result<f64> {
        Self::check_tau(tau)?;
        Ok((-(self.b_min * tau + 0.5 * (self.b_max - self.b_min) * tau * tau)).exp())
    }

    pub fn sigma(&self, tau: f64) -> Result<f64> {
        Self::check_tau(tau)?;
        let (lo, hi) = (self.sigma_min.ln(), self.sigma_max.ln());
        Ok((lo + tau * (hi - lo)).exp())
    }

    /// Rotational diffusion rate `d(sigma_eff^2)/d tau`.
    pub fn rotation_g2(&self, tau: f64) -> Result<f64> {
        let s = self.convention.effective_sigma(self.sigma(tau)?);
        Ok(2.0 * s * s * (self.sigma_max / self.sigma_min).ln())
    }

    /// Uniform reverse grid `tau_max = t_0 > t_1 > ... > t_steps = tau_min`.
    pub fn reverse_grid(&self) -> Vec<f64> {
        let h = (self.tau_max - self.tau_min) / self.steps as f64;
        (0..=self.steps).map(|k| self.tau_max - k as f64 * h).collect()
    }

    pub fn to_internal(&self, angstrom: &Vec3) -> Vec3 {
        angstrom * self.coordinate_scale
    }

    pub fn to_angstrom(&self, internal: &Vec3) -> Vec3 {
        internal / self.coordinate_scale
    }

    /// `T_tau = sqrt(a) T_0 + sqrt(1 - a) eps` for a given draw.
    pub fn forward_translations_with(&self, t0: &[Vec3], tau: f64, eps: &[Vec3]) -> Result<Vec<Vec3>> {
        if t0.len() != eps.len() {
            return Err(Error::ResidueMismatch(t0.len(), eps.len()));
        }
        let a = self.alpha_bar(tau)?;
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(t0.iter().zip(eps).map(|(t, e)| t * sa + e * sn).collect())
    }

    /// Noises internal-unit translations; returns `(T_tau, eps)`.
    pub fn forward_translations<R: Rng + ?Sized>(
        &self,
        t0: &[Vec3],
        tau: f64,
        rng: &mut R,
    ) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
        let eps: Vec<Vec3> = (0..t0.len()).map(|_| gaussian_vec(rng)).collect();
        let noisy = self.forward_translations_with(t0, tau, &eps)?;
        Ok((noisy, eps))
    }

    /// Denoising target `-eps / sqrt(1 - alpha_bar)`.
    pub fn translation_score_target(&self, eps: &Vec3, tau: f64) -> Result<Vec3> {
        let a = self.alpha_bar(tau)?;
        Ok(-eps / (1.0 - a).sqrt())
    }
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Removes the mean over residues.
pub fn project_zero_mean(v: &mut [Vec3]) {
    if v.is_empty() {
        return;
    }
    let m = v.iter().sum::<Vec3>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= m;
    }
}
