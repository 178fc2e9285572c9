//! Synthetic coarse-grained dynamics: an overdamped elastic network around an
//! ideal helix, integrated exactly in its normal-mode basis, with per-residue
//! frames that fluctuate around the local chain geometry.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::{FrameSet, Mat3, RigidFrame, Rotation, Trajectory, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub residues: usize,
    /// Å.
    pub bond_length: f64,
    /// Nearest-neighbour spring constant, kT/Å².
    pub stiffness: f64,
    /// Springs to neighbours two and three apart, kT/Å².
    pub network_stiffness: f64,
    /// Harmonic tether of every residue to its rest position relative to
    /// the centroid, kT/Å².
    pub confinement: f64,
    /// kT·ns/Å².
    pub friction: f64,
    pub temperature: f64,
    pub dt_ns: f64,
    pub rotation_relaxation_ns: f64,
    /// Stationary per-axis standard deviation of the frame perturbation, rad.
    pub rotation_sigma: f64,
    pub helix_radius: f64,
    pub helix_twist_deg: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            residues: 8,
            bond_length: 3.8,
            stiffness: 30.0,
            network_stiffness: 5.0,
            confinement: 2.0,
            friction: 1.0,
            temperature: 1.0,
            dt_ns: 0.01,
            rotation_relaxation_ns: 0.05,
            rotation_sigma: 0.15,
            helix_radius: 2.3,
            helix_twist_deg: 100.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bond_length", self.bond_length),
            ("stiffness", self.stiffness),
            ("confinement", self.confinement),
            ("friction", self.friction),
            ("temperature", self.temperature),
            ("dt_ns", self.dt_ns),
            ("rotation_relaxation_ns", self.rotation_relaxation_ns),
            ("helix_radius", self.helix_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.network_stiffness >= 0.0 && self.rotation_sigma >= 0.0) {
            return Err(Error::InvalidArgument("network_stiffness and rotation_sigma must be non-negative".into()));
        }
        if self.residues < 3 {
            return Err(Error::InvalidArgument("need at least three residues".into()));
        }
        let chord = 2.0 * self.helix_radius * (self.helix_twist_deg.to_radians() / 2.0).sin();
        if chord >= self.bond_length {
            return Err(Error::InvalidArgument(format!(
                "helix radius {} too large for bond length {}",
                self.helix_radius, self.bond_length
            )));
        }
        Ok(())
    }

    /// Rest positions on a helix whose consecutive Cα distance is the bond length.
    pub fn rest_positions(&self) -> Vec<Vec3> {
        let twist = self.helix_twist_deg.to_radians();
        let chord = 2.0 * self.helix_radius * (twist / 2.0).sin();
        let rise = (self.bond_length.powi(2) - chord * chord).sqrt();
        (0..self.residues)
            .map(|i| {
                let a = twist * i as f64;
                Vec3::new(self.helix_radius * a.cos(), self.helix_radius * a.sin(), rise * i as f64)
            })
            .collect()
    }

    /// Per-axis stiffness matrix `G`; the full Hessian is `G ⊗ I3`. Uniform
    /// translation is a zero mode.
    pub fn stiffness_matrix(&self) -> DMatrix<f64> {
        let n = self.residues;
        let mut g = DMatrix::from_fn(n, n, |i, j| {
            self.confinement * (if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64)
        });
        for i in 0..n {
            for sep in 1..=3 {
                let j = i + sep;
                if j >= n {
                    break;
                }
                let k = if sep == 1 { self.stiffness } else { self.network_stiffness };
                g[(i, i)] += k;
                g[(j, j)] += k;
                g[(i, j)] -= k;
                g[(j, i)] -= k;
            }
        }
        g
    }

    /// Internal normal modes sorted from slowest to fastest; the centroid
    /// stays at the rest centroid.
    pub fn modes(&self) -> Modes {
        let n = self.residues;
        let eig = SymmetricEigen::new(self.stiffness_matrix());
        let uniform = |k: usize| eig.eigenvectors.column(k).sum().abs() / (n as f64).sqrt();
        let zero = (0..n).max_by(|&a, &b| uniform(a).total_cmp(&uniform(b))).expect("non-empty");
        let mut order: Vec<usize> = (0..n).filter(|&k| k != zero).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let stiffness: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let vectors = DMatrix::from_fn(n, order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
        let rates = stiffness.iter().map(|k| k / self.friction).collect();
        Modes { stiffness, rates, vectors }
    }

    pub fn relaxation_time_ns(&self) -> f64 {
        let m = self.modes();
        (1.0 / m.rates[0]).max(self.rotation_relaxation_ns)
    }
}

#[derive(Debug, Clone)]
pub struct Modes {
    pub stiffness: Vec<f64>,
    /// Relaxation rates, 1/ns.
    pub rates: Vec<f64>,
    /// Columns are orthonormal mode shapes over residues.
    pub vectors: DMatrix<f64>,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn any_perpendicular(v: &Vec3) -> Vec3 {
    let trial = if v.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    v.cross(&trial).normalize()
}

/// Frame whose first axis follows the chain and second points into the bend.
pub fn chain_frame(positions: &[Vec3], i: usize) -> Rotation {
    let n = positions.len();
    let prev = positions[i.saturating_sub(1)];
    let next = positions[(i + 1).min(n - 1)];
    let e1 = (next - prev).normalize();
    let (a, b) = if i == 0 {
        (positions[0], positions[2])
    } else if i == n - 1 {
        (positions[n - 3], positions[n - 1])
    } else {
        (prev, next)
    };
    let mid = if i == 0 || i == n - 1 { positions[if i == 0 { 1 } else { n - 2 }] } else { positions[i] };
    let bend = (a + b) * 0.5 - mid;
    let bend = bend - e1 * e1.dot(&bend);
    let e2 = if bend.norm() > 1e-9 { bend.normalize() } else { any_perpendicular(&e1) };
    let e3 = e1.cross(&e2);
    Rotation::from_matrix(&Mat3::from_columns(&[e1, e2, e3]))
}

struct State {
    /// Mode amplitudes, `modes x 3`.
    y: DMatrix<f64>,
    omega: Vec<Vec3>,
}

/// Exact Ornstein-Uhlenbeck propagation of the linear network.
pub struct SynthSystem {
    cfg: SynthConfig,
    rest: Vec<Vec3>,
    modes: Modes,
}

impl SynthSystem {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let modes = cfg.modes();
        if !(modes.stiffness[0] > 0.0) {
            return Err(Error::InvalidArgument("stiffness matrix is not positive definite".into()));
        }
        Ok(Self { rest: cfg.rest_positions(), modes, cfg })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn modes(&self) -> &Modes {
        &self.modes
    }

    fn stationary<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        let n = self.modes.stiffness.len();
        let y = DMatrix::from_fn(n, 3, |k, _| (self.cfg.temperature / self.modes.stiffness[k]).sqrt() * gaussian(rng));
        let omega = (0..self.cfg.residues)
            .map(|_| Vec3::new(gaussian(rng), gaussian(rng), gaussian(rng)) * self.cfg.rotation_sigma)
            .collect();
        State { y, omega }
    }

    fn advance<R: Rng + ?Sized>(&self, s: &mut State, rng: &mut R) {
        let dt = self.cfg.dt_ns;
        for k in 0..self.modes.stiffness.len() {
            let decay = (-self.modes.rates[k] * dt).exp();
            let sd = (self.cfg.temperature / self.modes.stiffness[k] * (1.0 - decay * decay)).sqrt();
            for a in 0..3 {
                s.y[(k, a)] = decay * s.y[(k, a)] + sd * gaussian(rng);
            }
        }
        let decay = (-dt / self.cfg.rotation_relaxation_ns).exp();
        let sd = self.cfg.rotation_sigma * (1.0 - decay * decay).sqrt();
        for w in s.omega.iter_mut() {
            *w = *w * decay + Vec3::new(gaussian(rng), gaussian(rng), gaussian(rng)) * sd;
        }
    }

    fn frame(&self, s: &State) -> FrameSet {
        let disp = &self.modes.vectors * &s.y;
        let pos: Vec<Vec3> =
            (0..self.cfg.residues).map(|i| self.rest[i] + Vec3::new(disp[(i, 0)], disp[(i, 1)], disp[(i, 2)])).collect();
        let frames = (0..pos.len())
            .map(|i| RigidFrame::new(chain_frame(&pos, i).compose(&Rotation::exp(&s.omega[i])), pos[i]))
            .collect();
        FrameSet::new(frames).expect("non-empty chain")
    }

    /// `length` frames at the base time step after a burn-in of ten
    /// relaxation times.
    pub fn generate<R: Rng + ?Sized>(&self, length: usize, rng: &mut R) -> Result<Trajectory> {
        let mut s = self.stationary(rng);
        let burn = (10.0 * self.cfg.relaxation_time_ns() / self.cfg.dt_ns).ceil() as usize;
        for _ in 0..burn {
            self.advance(&mut s, rng);
        }
        self.run(s, length, rng)
    }

    /// Continues the dynamics from `start`, which becomes the first frame's
    /// internal state (its centroid and any rigid offset are discarded).
    pub fn generate_from<R: Rng + ?Sized>(&self, start: &FrameSet, length: usize, rng: &mut R) -> Result<Trajectory> {
        if start.residue_count() != self.cfg.residues {
            return Err(Error::ResidueMismatch(self.cfg.residues, start.residue_count()));
        }
        let pos = start.translations();
        let shift = pos.iter().sum::<Vec3>() / pos.len() as f64 - self.rest.iter().sum::<Vec3>() / pos.len() as f64;
        let mut y = DMatrix::zeros(self.modes.stiffness.len(), 3);
        for k in 0..y.nrows() {
            for (i, p) in pos.iter().enumerate() {
                let d = p - shift - self.rest[i];
                for a in 0..3 {
                    y[(k, a)] += self.modes.vectors[(i, k)] * d[a];
                }
            }
        }
        let omega = (0..pos.len())
            .map(|i| chain_frame(&pos, i).inverse().compose(&start.frames()[i].rotation).log())
            .collect();
        self.run(State { y, omega }, length, rng)
    }

    fn run<R: Rng + ?Sized>(&self, mut s: State, length: usize, rng: &mut R) -> Result<Trajectory> {
        if length == 0 {
            return Err(Error::InvalidArgument("trajectory length must be positive".into()));
        }
        let mut frames = Vec::with_capacity(length);
        for t in 0..length {
            if t > 0 {
                self.advance(&mut s, rng);
            }
            frames.push(self.frame(&s));
        }
        Trajectory::uniform(frames, self.cfg.dt_ns)
    }

    /// Projection of each frame's displacement onto mode `k`, per axis.
    pub fn mode_amplitudes(&self, traj: &Trajectory, k: usize) -> Vec<[f64; 3]> {
        let v = self.modes.vectors.column(k);
        traj.frames()
            .iter()
            .map(|f| {
                let mut out = [0.0; 3];
                for (i, t) in f.translations().iter().enumerate() {
                    let d = t - self.rest[i];
                    for a in 0..3 {
                        out[a] += v[i] * d[a];
                    }
                }
                out
            })
            .collect()
    }

    /// Analytic stationary covariance of the flattened coordinates, Å².
    pub fn coordinate_covariance(&self) -> DMatrix<f64> {
        let n = self.cfg.residues;
        let inv = DVector::from_iterator(self.modes.stiffness.len(), self.modes.stiffness.iter().map(|k| self.cfg.temperature / k));
        let c = &self.modes.vectors * DMatrix::from_diagonal(&inv) * self.modes.vectors.transpose();
        DMatrix::from_fn(3 * n, 3 * n, |r, col| if r % 3 == col % 3 { c[(r / 3, col / 3)] } else { 0.0 })
    }
}

pub fn synth_generate<R: Rng + ?Sized>(cfg: &SynthConfig, length: usize, rng: &mut R) -> Result<Trajectory> {
    SynthSystem::new(cfg.clone())?.generate(length, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rest_geometry() {
        let cfg = SynthConfig::default();
        let p = cfg.rest_positions();
        for w in p.windows(2) {
            assert!(((w[1] - w[0]).norm() - 3.8).abs() < 1e-12);
        }
        for w in p.windows(3) {
            assert!((w[2] - w[0]).norm() > 4.5);
        }
        let r = chain_frame(&p, 3).to_matrix();
        assert!((r.transpose() * r - Mat3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stiff_limit_holds_bond_length() {
        let cfg = SynthConfig { stiffness: 1e5, ..SynthConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = synth_generate(&cfg, 200, &mut rng).unwrap();
        for f in t.frames() {
            let x = f.translations();
            for w in x.windows(2) {
                assert!(((w[1] - w[0]).norm() - 3.8).abs() < 0.05);
            }
        }
    }

    #[test]
    fn slowest_mode_autocorrelation_matches_analytic() {
        let cfg = SynthConfig::default();
        let sys = SynthSystem::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let steps = 100_000;
        let t = sys.generate(steps, &mut rng).unwrap();
        let amp = sys.mode_amplitudes(&t, 0);
        let rate = sys.modes().rates[0];
        let var: f64 = amp.iter().map(|a| a.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / steps as f64;
        let expected_var = 3.0 * cfg.temperature / sys.modes().stiffness[0];
        assert!((var / expected_var - 1.0).abs() < 0.05);
        let mut lag = 1;
        while (-rate * cfg.dt_ns * lag as f64).exp() > 0.5 {
            let n = steps - lag;
            let c: f64 = (0..n).map(|r| (0..3).map(|a| amp[r][a] * amp[r + lag][a]).sum::<f64>()).sum::<f64>() / n as f64;
            let expected = (-rate * cfg.dt_ns * lag as f64).exp();
            assert!(((c / var) / expected - 1.0).abs() < 0.05, "lag {lag}: {} vs {expected}", c / var);
            lag += 1;
        }
        assert!(lag > 3);
    }

    #[test]
    fn continuing_from_a_frame_reproduces_it() {
        let sys = SynthSystem::new(SynthConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = sys.generate(20, &mut rng).unwrap();
        let c = sys.generate_from(t.frame(19), 3, &mut rng).unwrap();
        for (a, b) in t.frame(19).frames().iter().zip(c.frame(0).frames()) {
            assert!((a.translation - b.translation).norm() < 1e-10);
            assert!(a.rotation.distance(&b.rotation) < 1e-8);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig::default();
        let a = format::to_bytes(&synth_generate(&cfg, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
        let b = format::to_bytes(&synth_generate(&cfg, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
        let c = format::to_bytes(&synth_generate(&cfg, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn unstable_parameters_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for cfg in [
            SynthConfig { confinement: 0.0, ..SynthConfig::default() },
            SynthConfig { friction: -1.0, ..SynthConfig::default() },
            SynthConfig { helix_radius: 10.0, ..SynthConfig::default() },
        ] {
            assert!(synth_generate(&cfg, 5, &mut rng).is_err());
        }
    }

    #[test]
    fn reference_frames_are_valid() {
        use crate::metrics::{validity, ValidityThresholds};
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = synth_generate(&SynthConfig::default(), 2000, &mut rng).unwrap();
        let m = validity(&t, &ValidityThresholds::default());
        assert!(m.valid_percent() > 99.0);
    }
}
