//! Isotropic Gaussian on SO(3): heat-kernel series, tabulated density/CDF/score,
//! inverse-CDF sampling.

use std::f64::consts::PI;

use rand::Rng;

use super::schedule::{gaussian_vec, HeatKernelConvention};
use crate::error::{Error, Result};
use crate::se3::{Rotation, Vec3};

pub const OMEGA_POINTS: usize = 2048;
pub const SIGMA_POINTS: usize = 64;
const TERM_CUTOFF: f64 = 1e-12;
const MAX_ORDER: usize = 2000;

/// Series value and angular derivative of the density w.r.t. Haar measure.
#[derive(Debug, Clone, Copy)]
pub struct SeriesValue {
    pub density: f64,
    pub derivative: f64,
    /// Sum of absolute term magnitudes; bounds the rounding error of `density`.
    pub magnitude: f64,
}

/// `f(w; s) = sum_l (2l+1) exp(-l(l+1) s^2 / 2) sin((l+1/2) w) / sin(w/2)`,
/// with `s` the effective (tangent) standard deviation.
pub fn series(omega: f64, effective_sigma: f64) -> SeriesValue {
    let s2 = effective_sigma * effective_sigma;
    let half = 0.5 * omega;
    let (sh, ch) = half.sin_cos();
    let mut density = 0.0;
    let mut derivative = 0.0;
    let mut magnitude = 0.0;
    for l in 0..=MAX_ORDER {
        let lf = l as f64;
        let deg = 2.0 * lf + 1.0;
        let decay = (-lf * (lf + 1.0) * s2 / 2.0).exp();
        if l > 0 && deg * deg * decay < TERM_CUTOFF {
            break;
        }
        let k = lf + 0.5;
        let (chi, dchi) = if sh.abs() < 1e-12 {
            (deg, 0.0)
        } else {
            let (sk, ck) = (k * omega).sin_cos();
            (sk / sh, (k * ck * sh - 0.5 * sk * ch) / (sh * sh))
        };
        density += deg * decay * chi;
        derivative += deg * decay * dchi;
        magnitude += deg * decay * chi.abs();
    }
    SeriesValue { density, derivative, magnitude }
}

/// `d/dw log f` for the image-free small-sigma form
/// `exp(-w^2 / (2 s^2)) (w/2) / sin(w/2)`.
pub fn small_sigma_log_derivative(omega: f64, effective_sigma: f64) -> f64 {
    if omega < 1e-8 {
        return 0.0;
    }
    let s2 = effective_sigma * effective_sigma;
    let half = 0.5 * omega;
    -omega / s2 + 1.0 / omega - 0.5 * half.cos() / half.sin()
}

/// Density, CDF of the angle marginal, and `d log f / d w`, tabulated on a
/// uniform `w` grid over `[0, pi]` for log-spaced sigma.
#[derive(Debug, Clone)]
pub struct Igso3Table {
    convention: HeatKernelConvention,
    log_sigma_lo: f64,
    log_sigma_step: f64,
    sigmas: Vec<f64>,
    pdf: Vec<Vec<f64>>,
    cdf: Vec<Vec<f64>>,
    dlog: Vec<Vec<f64>>,
}

fn omega_at(j: usize) -> f64 {
    j as f64 * PI / (OMEGA_POINTS - 1) as f64
}

impl Igso3Table {
    /// Covers `[sigma_min / 2, 2 sigma_max]` of the noise schedule.
    pub fn new(sigma_min: f64, sigma_max: f64, convention: HeatKernelConvention) -> Self {
        let lo = (0.5 * sigma_min).ln();
        let hi = (2.0 * sigma_max).ln();
        let step = (hi - lo) / (SIGMA_POINTS - 1) as f64;
        let sigmas: Vec<f64> = (0..SIGMA_POINTS).map(|k| (lo + k as f64 * step).exp()).collect();
        let dw = PI / (OMEGA_POINTS - 1) as f64;
        let mut pdf = Vec::with_capacity(SIGMA_POINTS);
        let mut cdf = Vec::with_capacity(SIGMA_POINTS);
        let mut dlog = Vec::with_capacity(SIGMA_POINTS);
        for &sigma in &sigmas {
            let s = convention.effective_sigma(sigma);
            let mut p = Vec::with_capacity(OMEGA_POINTS);
            let mut d = Vec::with_capacity(OMEGA_POINTS);
            for j in 0..OMEGA_POINTS {
                let w = omega_at(j);
                let v = series(w, s);
                // Deep in the tail the alternating series is pure rounding noise.
                if v.density <= 1e-8 * v.magnitude {
                    p.push(v.density.max(0.0));
                    d.push(small_sigma_log_derivative(w, s));
                } else {
                    p.push(v.density);
                    d.push(v.derivative / v.density);
                }
            }
            let mut c = vec![0.0; OMEGA_POINTS];
            for j in 1..OMEGA_POINTS {
                let g0 = p[j - 1] * (1.0 - omega_at(j - 1).cos()) / PI;
                let g1 = p[j] * (1.0 - omega_at(j).cos()) / PI;
                c[j] = c[j - 1] + 0.5 * dw * (g0 + g1);
            }
            let total = c[OMEGA_POINTS - 1];
            for v in c.iter_mut() {
                *v /= total;
            }
            pdf.push(p);
            cdf.push(c);
            dlog.push(d);
        }
        Self { convention, log_sigma_lo: lo, log_sigma_step: step, sigmas, pdf, cdf, dlog }
    }

    pub fn convention(&self) -> HeatKernelConvention {
        self.convention
    }

    pub fn sigma_range(&self) -> (f64, f64) {
        (self.sigmas[0], self.sigmas[SIGMA_POINTS - 1])
    }

    pub fn omega_grid(&self) -> Vec<f64> {
        (0..OMEGA_POINTS).map(omega_at).collect()
    }

    fn sigma_cell(&self, sigma: f64) -> Result<(usize, f64)> {
        let (lo, hi) = self.sigma_range();
        // small relative slack for endpoints reproduced through exp(ln(.))
        if !(sigma >= lo * (1.0 - 1e-12) && sigma <= hi * (1.0 + 1e-12)) {
            return Err(Error::SigmaOutOfRange { sigma, min: lo, max: hi });
        }
        let x = ((sigma.ln() - self.log_sigma_lo) / self.log_sigma_step).clamp(0.0, (SIGMA_POINTS - 1) as f64);
        let i = (x.floor() as usize).min(SIGMA_POINTS - 2);
        Ok((i, x - i as f64))
    }

    fn interp(&self, table: &[Vec<f64>], omega: f64, sigma: f64) -> Result<f64> {
        let (i, w) = self.sigma_cell(sigma)?;
        let y = (omega.clamp(0.0, PI) / PI) * (OMEGA_POINTS - 1) as f64;
        let j = (y.floor() as usize).min(OMEGA_POINTS - 2);
        let u = y - j as f64;
        let at = |row: &Vec<f64>| (1.0 - u) * row[j] + u * row[j + 1];
        Ok((1.0 - w) * at(&table[i]) + w * at(&table[i + 1]))
    }

    /// Density w.r.t. normalized Haar measure.
    pub fn pdf(&self, omega: f64, sigma: f64) -> Result<f64> {
        self.interp(&self.pdf, omega, sigma)
    }

    /// Angle marginal density `f(w) (1 - cos w) / pi`.
    pub fn angle_pdf(&self, omega: f64, sigma: f64) -> Result<f64> {
        Ok(self.pdf(omega, sigma)? * (1.0 - omega.cos()) / PI)
    }

    pub fn cdf(&self, omega: f64, sigma: f64) -> Result<f64> {
        self.interp(&self.cdf, omega, sigma)
    }

    pub fn log_density_derivative(&self, omega: f64, sigma: f64) -> Result<f64> {
        let (lo, _) = self.sigma_range();
        if sigma < lo {
            return Ok(small_sigma_log_derivative(omega, self.convention.effective_sigma(sigma)));
        }
        self.interp(&self.dlog, omega, sigma)
    }

    /// Draws a rotation angle by inverse CDF.
    pub fn sample_angle<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> Result<f64> {
        let (i, w) = self.sigma_cell(sigma)?;
        let (a, b) = (&self.cdf[i], &self.cdf[i + 1]);
        let mixed = |j: usize| (1.0 - w) * a[j] + w * b[j];
        let u: f64 = rng.random();
        let (mut lo, mut hi) = (0usize, OMEGA_POINTS - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if mixed(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (c0, c1) = (mixed(lo), mixed(hi));
        let frac = if c1 > c0 { ((u - c0) / (c1 - c0)).clamp(0.0, 1.0) } else { 0.5 };
        Ok(omega_at(lo) + frac * (omega_at(hi) - omega_at(lo)))
    }

    /// Tangent vector `v` with `R0^-1 R = exp(v)`. Below the table uses the
    /// tangent Gaussian; above it is an error.
    pub fn sample_tangent<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> Result<Vec3> {
        let (lo, _) = self.sigma_range();
        if sigma > 0.0 && sigma < lo {
            return Ok(gaussian_vec(rng) * self.convention.effective_sigma(sigma));
        }
        let omega = self.sample_angle(sigma, rng)?;
        let axis = loop {
            let g = gaussian_vec(rng);
            let n = g.norm();
            if n > 1e-12 {
                break g / n;
            }
        };
        Ok(axis * omega)
    }

    pub fn sample<R: Rng + ?Sized>(&self, r0: &Rotation, sigma: f64, rng: &mut R) -> Result<Rotation> {
        let v = self.sample_tangent(sigma, rng)?;
        Ok(r0.compose(&Rotation::exp(&v)))
    }

    /// Score of the relative rotation `exp(v)` in the local tangent frame.
    pub fn score(&self, v: &Vec3, sigma: f64) -> Result<Vec3> {
        let omega = v.norm();
        if omega < 1e-12 {
            return Ok(Vec3::zeros());
        }
        Ok(v * (self.log_density_derivative(omega, sigma)? / omega))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    use std::sync::OnceLock;

    fn table() -> &'static Igso3Table {
        static T: OnceLock<Igso3Table> = OnceLock::new();
        T.get_or_init(|| Igso3Table::new(0.1, 1.5, HeatKernelConvention::Half))
    }

    fn trapezoid_normalization(sigma: f64) -> f64 {
        let t = table();
        let grid = t.omega_grid();
        let mut total = 0.0;
        for w in grid.windows(2) {
            let a = t.angle_pdf(w[0], sigma).unwrap();
            let b = t.angle_pdf(w[1], sigma).unwrap();
            total += 0.5 * (w[1] - w[0]) * (a + b);
        }
        total
    }

    #[test]
    fn density_normalizes_under_haar_measure() {
        for sigma in [0.1, 0.5, 1.5] {
            let z = trapezoid_normalization(sigma);
            assert!((z - 1.0).abs() < 1e-3, "sigma {sigma}: {z}");
        }
    }

    #[test]
    fn cdf_is_monotone() {
        let t = table();
        for row in &t.cdf {
            assert!(row.windows(2).all(|w| w[1] >= w[0]));
            assert!((row[OMEGA_POINTS - 1] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn score_vanishes_at_density_maximum() {
        let t = table();
        let dw = PI / (OMEGA_POINTS - 1) as f64;
        for sigma in [0.1, 0.5, 1.5] {
            let s = t.score(&Vec3::new(0.0, 0.0, dw), sigma).unwrap();
            // d log f / dw ~ -w / s^2 near the identity
            assert!(s.norm() <= 1.5 * dw / (sigma * sigma), "sigma {sigma}: {}", s.norm());
            assert!(t.score(&Vec3::zeros(), sigma).unwrap().norm() == 0.0);
        }
    }

    #[test]
    fn score_matches_finite_difference_of_series() {
        let t = table();
        for (w, sigma) in [(0.3, 0.3), (1.0, 0.8), (2.0, 1.4), (0.15, 0.12)] {
            let h = 1e-6;
            let s = HeatKernelConvention::Half.effective_sigma(sigma);
            let fd = (series(w + h, s).density.ln() - series(w - h, s).density.ln()) / (2.0 * h);
            let exact = series(w, s);
            assert!((exact.derivative / exact.density - fd).abs() < 1e-5 * fd.abs().max(1.0));
            // table interpolation error is limited by grid resolution
            let tab = t.log_density_derivative(w, sigma).unwrap();
            assert!((tab - fd).abs() < 2e-2 * fd.abs().max(1.0), "{w} {sigma}: {tab} vs {fd}");
        }
    }

    #[test]
    fn out_of_table_sigma() {
        let t = table();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(t.pdf(0.1, 3.5), Err(Error::SigmaOutOfRange { .. })));
        assert!(t.sample(&Rotation::identity(), 3.5, &mut rng).is_err());
        assert!(t.sample(&Rotation::identity(), 0.02, &mut rng).is_ok());
    }

    #[test]
    fn small_sigma_branch_matches_maxwell_mean() {
        let t = table();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sigma = 0.02;
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| t.sample(&Rotation::identity(), sigma, &mut rng).unwrap().angle())
            .sum::<f64>()
            / n as f64;
        let predicted = sigma * (8.0 / PI).sqrt();
        assert!((mean / predicted - 1.0).abs() < 0.05, "{mean} vs {predicted}");
    }

    #[test]
    fn table_sampling_matches_angle_marginal() {
        let t = table();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sigma = 0.7;
        let n = 50_000;
        let bins = 20;
        let edges: Vec<f64> = (0..=bins).map(|k| k as f64 * PI / bins as f64).collect();
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let w = t.sample_angle(sigma, &mut rng).unwrap();
            counts[((w / PI * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let mut chi2 = 0.0;
        let mut dof = 0;
        for k in 0..bins {
            let p = t.cdf(edges[k + 1], sigma).unwrap() - t.cdf(edges[k], sigma).unwrap();
            let e = p * n as f64;
            if e > 5.0 {
                chi2 += (counts[k] as f64 - e).powi(2) / e;
                dof += 1;
            }
        }
        let pval = 1.0 - ChiSquared::new((dof - 1) as f64).unwrap().cdf(chi2);
        assert!(pval > 1e-3, "chi2 {chi2} dof {dof}");
    }

    #[test]
    fn full_convention_widens_the_distribution() {
        let full = Igso3Table::new(0.1, 1.5, HeatKernelConvention::Full);
        let half = table();
        // Full at sigma equals Half at sqrt(2) sigma
        let a = full.cdf(0.5, 0.3).unwrap();
        let b = half.cdf(0.5, 0.3 * 2f64.sqrt()).unwrap();
        assert!((a - b).abs() < 1e-3);
    }
}
