use crate::error::{Error, Result};
use crate::se3::{Rotation, Vec3};

use super::schedule::NoiseSchedule;

/// Gaussian draws for one reverse step; zero draws give the drift-only update.
#[derive(Debug, Clone, Default)]
pub struct StepNoise {
    pub translation: Vec<Vec3>,
    pub rotation: Vec<Vec3>,
}

impl StepNoise {
    pub fn zeros(n: usize) -> Self {
        Self { translation: vec![Vec3::zeros(); n], rotation: vec![Vec3::zeros(); n] }
    }
}

fn check_finite(name: &str, v: &[Vec3]) -> Result<()> {
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !x.iter().all(|c| c.is_finite())) {
        return Err(Error::NonFinite(format!("{name} score at residue {i}: {x:?}")));
    }
    Ok(())
}

/// One Euler–Maruyama step of the reverse SDE from `tau` to `tau - dtau`.
///
/// Translations (internal units) follow the VP reverse drift
/// `(beta T / 2 + beta s) dtau` plus `sqrt(beta dtau) z`; rotations take a
/// geodesic step `R exp(g^2 s_R dtau + g sqrt(dtau) z)` in the local frame.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    schedule: &NoiseSchedule,
    translations: &mut [Vec3],
    rotations: &mut [Rotation],
    translation_score: &[Vec3],
    rotation_score: &[Vec3],
    tau: f64,
    dtau: f64,
    noise: &StepNoise,
) -> Result<()> {
    let n = translations.len();
    for len in [rotations.len(), translation_score.len(), rotation_score.len()] {
        if len != n {
            return Err(Error::ResidueMismatch(n, len));
        }
    }
    if noise.translation.len() != n || noise.rotation.len() != n {
        return Err(Error::ResidueMismatch(n, noise.translation.len().min(noise.rotation.len())));
    }
    if !(dtau >= 0.0) || tau - dtau < -1e-12 || tau > 1.0 {
        return Err(Error::InvalidArgument(format!("bad reverse step tau={tau}, dtau={dtau}")));
    }
    check_finite("translation", translation_score)?;
    check_finite("rotation", rotation_score)?;
    if dtau == 0.0 {
        return Ok(());
    }
    let beta = schedule.beta(tau);
    let diff_t = (beta * dtau).sqrt();
    for ((t, s), z) in translations.iter_mut().zip(translation_score).zip(&noise.translation) {
        *t += (*t * (0.5 * beta) + s * beta) * dtau + z * diff_t;
    }
    let g2 = schedule.rotation_g2(tau)?;
    let g = g2.sqrt();
    for ((r, s), z) in rotations.iter_mut().zip(rotation_score).zip(&noise.rotation) {
        let step = s * (g2 * dtau) + z * (g * dtau.sqrt());
        *r = r.compose(&Rotation::exp(&step));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::gaussian_vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_score_zero_noise_is_pure_drift() {
        let s = NoiseSchedule::default();
        let t0 = Vec3::new(0.4, -1.0, 2.0);
        let mut t = vec![t0];
        let mut r = vec![Rotation::identity()];
        let tau = 0.6;
        let dtau = 0.005;
        reverse_step(&s, &mut t, &mut r, &[Vec3::zeros()], &[Vec3::zeros()], tau, dtau, &StepNoise::zeros(1))
            .unwrap();
        let expected = t0 + t0 * (0.5 * s.beta(tau) * dtau);
        assert!((t[0] - expected).norm() < 1e-15);
        assert_eq!(r[0], Rotation::identity());
    }

    #[test]
    fn zero_step_is_identity() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = vec![gaussian_vec(&mut rng); 3];
        let mut r = vec![Rotation::random(&mut rng); 3];
        let (t0, r0) = (t.clone(), r.clone());
        let noise = StepNoise {
            translation: (0..3).map(|_| gaussian_vec(&mut rng)).collect(),
            rotation: (0..3).map(|_| gaussian_vec(&mut rng)).collect(),
        };
        let score = vec![Vec3::new(1.0, 2.0, 3.0); 3];
        reverse_step(&s, &mut t, &mut r, &score, &score, 0.5, 0.0, &noise).unwrap();
        assert_eq!(t, t0);
        assert_eq!(r, r0);
    }

    #[test]
    fn nan_score_aborts() {
        let s = NoiseSchedule::default();
        let mut t = vec![Vec3::zeros()];
        let mut r = vec![Rotation::identity()];
        let bad = [Vec3::new(f64::NAN, 0.0, 0.0)];
        let err = reverse_step(&s, &mut t, &mut r, &bad, &[Vec3::zeros()], 0.5, 0.01, &StepNoise::zeros(1));
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
