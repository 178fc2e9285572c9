//! Linear block systems for checking memory-kernel inflation when the pair
//! variables `z` are eliminated from a coupled `(s, z)` dynamics.
//!
//! Level-1 kernels are sums of exponential modes, so every Laplace-domain
//! object is rational and has an exact finite-dimensional state realization.

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// Resolvent condition numbers above this are rejected.
pub const MAX_CONDITION: f64 = 1e12;
/// Norm at which a simulation is declared unstable.
pub const BLOWUP_NORM: f64 = 1e6;

/// `K(t) = sum_m A_m exp(-rate_m t)`, so `K(p) = sum_m A_m / (p + rate_m)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExpKernel {
    pub modes: Vec<(DMatrix<f64>, f64)>,
}

impl ExpKernel {
    pub fn new(modes: Vec<(DMatrix<f64>, f64)>) -> Result<Self> {
        if modes.iter().any(|(_, r)| !(*r > 0.0)) {
            return Err(Error::InvalidArgument("kernel decay rates must be positive".into()));
        }
        Ok(Self { modes })
    }

    pub fn laplace(&self, p: C64, rows: usize, cols: usize) -> DMatrix<C64> {
        let mut out = DMatrix::zeros(rows, cols);
        for (a, rate) in &self.modes {
            let f = C64::new(1.0, 0.0) / (p + *rate);
            out += a.map(|v| C64::new(v, 0.0)) * f;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSystem {
    pub omega_ss: DMatrix<f64>,
    pub omega_sz: DMatrix<f64>,
    pub omega_zs: DMatrix<f64>,
    pub omega_zz: DMatrix<f64>,
    pub k_ss: ExpKernel,
    pub k_sz: ExpKernel,
    pub k_zs: ExpKernel,
    pub k_zz: ExpKernel,
    /// Covariance rates of the random forces on `s` and `z`.
    pub noise_s: DMatrix<f64>,
    pub noise_z: DMatrix<f64>,
}

fn complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|v| C64::new(v, 0.0))
}

fn condition(m: &DMatrix<C64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `ds/dt = Omega_ss s + C w`, `dw/dt = A w + B s`; the `z` block sits first in `w`.
#[derive(Debug, Clone)]
pub struct Realization {
    pub n_s: usize,
    pub n_z: usize,
    /// Full generator over `(s, w)`.
    pub generator: DMatrix<f64>,
}

impl Realization {
    pub fn n_w(&self) -> usize {
        self.generator.nrows() - self.n_s
    }

    fn block(&self, r0: usize, c0: usize, r: usize, c: usize) -> DMatrix<f64> {
        self.generator.view((r0, c0), (r, c)).into_owned()
    }

    pub fn a(&self) -> DMatrix<f64> {
        self.block(self.n_s, self.n_s, self.n_w(), self.n_w())
    }

    pub fn b(&self) -> DMatrix<f64> {
        self.block(self.n_s, 0, self.n_w(), self.n_s)
    }

    pub fn c(&self) -> DMatrix<f64> {
        self.block(0, self.n_s, self.n_s, self.n_w())
    }
}

impl BlockSystem {
    /// Memoryless system with zero noise.
    pub fn markovian(omega_ss: DMatrix<f64>, omega_sz: DMatrix<f64>, omega_zs: DMatrix<f64>, omega_zz: DMatrix<f64>) -> Result<Self> {
        let (ns, nz) = (omega_ss.nrows(), omega_zz.nrows());
        let sys = Self {
            omega_ss,
            omega_sz,
            omega_zs,
            omega_zz,
            k_ss: ExpKernel::default(),
            k_sz: ExpKernel::default(),
            k_zs: ExpKernel::default(),
            k_zz: ExpKernel::default(),
            noise_s: DMatrix::zeros(ns, ns),
            noise_z: DMatrix::zeros(nz, nz),
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn n_s(&self) -> usize {
        self.omega_ss.nrows()
    }

    pub fn n_z(&self) -> usize {
        self.omega_zz.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, nz) = (self.n_s(), self.n_z());
        let shapes = [
            (self.omega_ss.shape(), (ns, ns)),
            (self.omega_sz.shape(), (ns, nz)),
            (self.omega_zs.shape(), (nz, ns)),
            (self.omega_zz.shape(), (nz, nz)),
            (self.noise_s.shape(), (ns, ns)),
            (self.noise_z.shape(), (nz, nz)),
        ];
        for (got, want) in shapes {
            if got != want {
                return Err(Error::InvalidArgument(format!("block shape {got:?}, expected {want:?}")));
            }
        }
        for (k, shape) in [(&self.k_ss, (ns, ns)), (&self.k_sz, (ns, nz)), (&self.k_zs, (nz, ns)), (&self.k_zz, (nz, nz))] {
            for (a, r) in &k.modes {
                if a.shape() != shape || !(*r > 0.0) {
                    return Err(Error::InvalidArgument(format!("bad kernel mode {:?} rate {r}", a.shape())));
                }
            }
        }
        Ok(())
    }

    /// `K2(p) = K_ss + (Omega_sz + K_sz) [p - Omega_zz - K_zz]^-1 (Omega_zs + K_zs)`.
    pub fn inflate_kernel(&self, p: C64) -> Result<DMatrix<C64>> {
        let (ns, nz) = (self.n_s(), self.n_z());
        let k_ss = self.k_ss.laplace(p, ns, ns);
        if nz == 0 {
            return Ok(k_ss);
        }
        let eye = DMatrix::<C64>::identity(nz, nz) * p;
        let res = eye - complex(&self.omega_zz) - self.k_zz.laplace(p, nz, nz);
        let cond = condition(&res);
        if !(cond < MAX_CONDITION) {
            return Err(Error::SingularResolvent { p: format!("{p}"), condition: cond });
        }
        let inv = res.try_inverse().ok_or_else(|| Error::SingularResolvent { p: format!("{p}"), condition: cond })?;
        let left = complex(&self.omega_sz) + self.k_sz.laplace(p, ns, nz);
        let right = complex(&self.omega_zs) + self.k_zs.laplace(p, nz, ns);
        Ok(k_ss + left * inv * right)
    }

    /// Augmented linear realization of the coupled dynamics with every kernel
    /// mode carried as an auxiliary state.
    pub fn realization(&self) -> Realization {
        let (ns, nz) = (self.n_s(), self.n_z());
        // auxiliary blocks: (driven by, feeds into, amplitude, rate)
        enum Var {
            S,
            Z,
        }
        let mut aux: Vec<(Var, Var, &DMatrix<f64>, f64)> = Vec::new();
        for (a, r) in &self.k_ss.modes {
            aux.push((Var::S, Var::S, a, *r));
        }
        for (a, r) in &self.k_sz.modes {
            aux.push((Var::Z, Var::S, a, *r));
        }
        for (a, r) in &self.k_zs.modes {
            aux.push((Var::S, Var::Z, a, *r));
        }
        for (a, r) in &self.k_zz.modes {
            aux.push((Var::Z, Var::Z, a, *r));
        }
        let width = |v: &Var| if matches!(v, Var::S) { ns } else { nz };
        let total = ns + nz + aux.iter().map(|(src, ..)| width(src)).sum::<usize>();
        let mut g = DMatrix::zeros(total, total);
        let zo = ns;
        g.view_mut((0, 0), (ns, ns)).copy_from(&self.omega_ss);
        g.view_mut((0, zo), (ns, nz)).copy_from(&self.omega_sz);
        g.view_mut((zo, 0), (nz, ns)).copy_from(&self.omega_zs);
        g.view_mut((zo, zo), (nz, nz)).copy_from(&self.omega_zz);
        let mut off = ns + nz;
        for (src, dst, a, rate) in aux {
            let w = width(&src);
            let src_off = if matches!(src, Var::S) { 0 } else { zo };
            let (dst_off, dst_w) = if matches!(dst, Var::S) { (0, ns) } else { (zo, nz) };
            for k in 0..w {
                g[(off + k, off + k)] = -rate;
                g[(off + k, src_off + k)] += 1.0;
            }
            g.view_mut((dst_off, off), (dst_w, w)).copy_from(a);
            off += w;
        }
        Realization { n_s: ns, n_z: nz, generator: g }
    }

    /// `K2(p)` through the `s` block of the full augmented resolvent:
    /// `p - Omega_ss - [(p - M)^-1]_ss^-1`.
    pub fn resolvent_kernel(&self, p: C64) -> Result<DMatrix<C64>> {
        let r = self.realization();
        let n = r.generator.nrows();
        let ns = r.n_s;
        let m = DMatrix::<C64>::identity(n, n) * p - complex(&r.generator);
        let cond = condition(&m);
        if !(cond < MAX_CONDITION) {
            return Err(Error::SingularResolvent { p: format!("{p}"), condition: cond });
        }
        let inv = m.try_inverse().ok_or_else(|| Error::SingularResolvent { p: format!("{p}"), condition: cond })?;
        let g_ss = inv.view((0, 0), (ns, ns)).into_owned();
        let g_inv = g_ss.try_inverse().ok_or_else(|| Error::SingularResolvent { p: format!("{p}"), condition: f64::INFINITY })?;
        Ok(DMatrix::<C64>::identity(ns, ns) * p - complex(&self.omega_ss) - g_inv)
    }

    /// Exact time-domain inflated kernel `C exp(A t) B` on `t_k = k dt`.
    pub fn kernel_samples(&self, dt: f64, steps: usize) -> Vec<DMatrix<f64>> {
        let r = self.realization();
        let (a, b, c) = (r.a(), r.b(), r.c());
        propagate(&a, &b, dt, steps).iter().map(|x| &c * x).collect()
    }

    /// Forcing `C exp(A t) w0` carried by a nonzero initial `z0`.
    pub fn forcing_samples(&self, z0: &DVector<f64>, dt: f64, steps: usize) -> Vec<DVector<f64>> {
        let r = self.realization();
        let (a, c) = (r.a(), r.c());
        let mut w0 = DMatrix::zeros(r.n_w(), 1);
        w0.view_mut((0, 0), (r.n_z, 1)).copy_from(z0);
        propagate(&a, &w0, dt, steps).iter().map(|x| (&c * x).column(0).into_owned()).collect()
    }

    /// Largest real part among the full generator's eigenvalues.
    /// Infinite when the Schur iteration fails to converge.
    pub fn spectral_abscissa(&self) -> f64 {
        match self.realization().generator.try_schur(1e-14, 20_000) {
            Some(schur) => schur.complex_eigenvalues().iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max),
            None => f64::INFINITY,
        }
    }
}

fn propagate(a: &DMatrix<f64>, x0: &DMatrix<f64>, dt: f64, steps: usize) -> Vec<DMatrix<f64>> {
    let phi = (a * dt).exp();
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    out.push(x.clone());
    for _ in 0..steps {
        x = &phi * x;
        out.push(x.clone());
    }
    out
}

/// Fixed-Talbot inversion of `f` at `t > 0`; `t = 0` uses the initial-value
/// theorem with Richardson extrapolation of `p f(p)`.
pub fn invert_laplace<F>(f: F, t: f64, nodes: usize) -> DMatrix<f64>
where
    F: Fn(C64) -> DMatrix<C64>,
{
    if t <= 0.0 {
        let p = 1e5;
        let a = f(C64::new(p, 0.0)).map(|v| (v * p).re);
        let b = f(C64::new(2.0 * p, 0.0)).map(|v| (v * 2.0 * p).re);
        return b * 2.0 - a;
    }
    let m = nodes as f64;
    let r = 2.0 * m / (5.0 * t);
    let f0 = f(C64::new(r, 0.0));
    let mut acc = f0.map(|v| 0.5 * (v * (r * t).exp()).re);
    for k in 1..nodes {
        let th = k as f64 * std::f64::consts::PI / m;
        let cot = th.cos() / th.sin();
        let s = C64::new(r * th * cot, r * th);
        let sigma = th + (th * cot - 1.0) * cot;
        let w = (s * t).exp() * C64::new(1.0, sigma);
        acc += f(s).map(|v| (v * w).re);
    }
    acc * (r / m)
}

/// Default Talbot node count for double precision.
pub const TALBOT_NODES: usize = 32;

#[derive(Debug, Clone)]
pub struct FullTrajectory {
    pub s: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub dt: f64,
}

/// Exact matrix-exponential stepping of the augmented system; random forces,
/// when present, enter as Gaussian increments of covariance `noise * dt`.
pub fn simulate_full<R: Rng + ?Sized>(
    sys: &BlockSystem,
    s0: &DVector<f64>,
    z0: &DVector<f64>,
    horizon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<FullTrajectory> {
    sys.validate()?;
    if s0.len() != sys.n_s() || z0.len() != sys.n_z() {
        return Err(Error::InvalidArgument("initial state dimensions".into()));
    }
    let r = sys.realization();
    let n = r.generator.nrows();
    let steps = (horizon / dt).round() as usize;
    let phi = (&r.generator * dt).exp();
    let chol = |m: &DMatrix<f64>| -> Result<Option<DMatrix<f64>>> {
        if m.iter().all(|v| *v == 0.0) {
            return Ok(None);
        }
        let c = m.clone().cholesky().ok_or_else(|| Error::InvalidArgument("noise covariance not positive definite".into()))?;
        Ok(Some(c.l() * dt.sqrt()))
    };
    let ls = chol(&sys.noise_s)?;
    let lz = chol(&sys.noise_z)?;
    let mut x = DVector::zeros(n);
    x.rows_mut(0, r.n_s).copy_from(s0);
    x.rows_mut(r.n_s, r.n_z).copy_from(z0);
    let mut out = FullTrajectory { s: vec![s0.clone()], z: vec![z0.clone()], dt };
    for step in 1..=steps {
        x = &phi * x;
        for (l, off, w) in [(&ls, 0, r.n_s), (&lz, r.n_s, r.n_z)] {
            if let Some(l) = l {
                let xi = DVector::from_fn(w, |_, _| StandardNormal.sample(rng));
                let inc: DVector<f64> = l * xi;
                let mut part = x.rows_mut(off, w);
                part += inc;
            }
        }
        let norm = x.norm();
        if !(norm <= BLOWUP_NORM) {
            return Err(Error::Unstable { norm, time: step as f64 * dt });
        }
        out.s.push(x.rows(0, r.n_s).into_owned());
        out.z.push(x.rows(r.n_s, r.n_z).into_owned());
    }
    Ok(out)
}

/// Trapezoidal integration of `ds/dt = Omega s + int_0^t K(t-u) s(u) du + F(t)`
/// with the convolution also by the trapezoid rule. `kernel[k]` is `K(k dt)`.
pub fn simulate_gle(
    omega_ss: &DMatrix<f64>,
    kernel: &[DMatrix<f64>],
    forcing: Option<&[DVector<f64>]>,
    s0: &DVector<f64>,
    dt: f64,
    steps: usize,
) -> Result<Vec<DVector<f64>>> {
    let ns = s0.len();
    if kernel.len() <= steps {
        return Err(Error::InvalidArgument(format!("{} kernel samples for {steps} steps", kernel.len())));
    }
    if let Some(f) = forcing {
        if f.len() <= steps {
            return Err(Error::InvalidArgument("forcing shorter than the horizon".into()));
        }
    }
    let force = |k: usize| forcing.map_or_else(|| DVector::zeros(ns), |f| f[k].clone());
    let eye = DMatrix::<f64>::identity(ns, ns);
    let lhs = &eye - (omega_ss + &kernel[0] * (0.5 * dt)) * (0.5 * dt);
    let lu = lhs.lu();
    let mut s = vec![s0.clone()];
    let mut f_prev = omega_ss * s0 + force(0);
    for n in 0..steps {
        // history part of the convolution at t_{n+1}, excluding the s_{n+1} end point
        let mut hist = &kernel[n + 1] * &s[0] * (0.5 * dt);
        for j in 1..=n {
            hist += &kernel[n + 1 - j] * &s[j] * dt;
        }
        let rhs = &s[n] + &f_prev * (0.5 * dt) + (&hist + force(n + 1)) * (0.5 * dt);
        let next = lu.solve(&rhs).ok_or_else(|| Error::InvalidArgument("singular GLE step".into()))?;
        let norm = next.norm();
        if !(norm <= BLOWUP_NORM) {
            return Err(Error::Unstable { norm, time: (n + 1) as f64 * dt });
        }
        f_prev = omega_ss * &next + hist + &kernel[0] * &next * (0.5 * dt) + force(n + 1);
        s.push(next);
    }
    Ok(s)
}

/// `ds/dt = (Omega_ss + K2(0)) s`: the memoryless limit of the reduced dynamics.
pub fn simulate_markov_limit(sys: &BlockSystem, s0: &DVector<f64>, dt: f64, steps: usize) -> Result<Vec<DVector<f64>>> {
    let k0 = sys.inflate_kernel(C64::new(0.0, 0.0))?.map(|v| v.re);
    let phi = ((&sys.omega_ss + k0) * dt).exp();
    let mut s = vec![s0.clone()];
    for _ in 0..steps {
        let next = &phi * s.last().expect("nonempty");
        s.push(next);
    }
    Ok(s)
}

pub fn max_error(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Separability {
    Separable,
    NonSeparable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityResult {
    pub singular_values: Vec<f64>,
    pub ratio: f64,
    pub verdict: Separability,
}

/// Rank-1 test of the space-by-time unfolding (rows: kernel entries, columns: time).
pub fn separability_test(unfolding: &DMatrix<f64>) -> SeparabilityResult {
    let mut sv: Vec<f64> = unfolding.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let ratio = if sv.len() < 2 || sv[0] == 0.0 { 0.0 } else { sv[1] / sv[0] };
    let verdict = if ratio > 1e-6 { Separability::NonSeparable } else { Separability::Separable };
    SeparabilityResult { singular_values: sv, ratio, verdict }
}

/// Stacks kernel samples into an `(n_s * n_s) x n_t` matrix.
pub fn unfold(samples: &[DMatrix<f64>]) -> DMatrix<f64> {
    let ns = samples.first().map_or(0, |m| m.nrows());
    DMatrix::from_fn(ns * ns, samples.len(), |r, c| samples[c][(r / ns, r % ns)])
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Random coupled system; diagonals are shifted until the augmented
/// generator has spectral abscissa below `-margin`.
pub fn random_stable_system<R: Rng + ?Sized>(n_s: usize, n_z: usize, with_kernels: bool, rng: &mut R) -> BlockSystem {
    let scale = 1.0 / ((n_s + n_z) as f64).sqrt();
    let mut sys = BlockSystem::markovian(
        gaussian_matrix(n_s, n_s, scale, rng),
        gaussian_matrix(n_s, n_z, scale, rng),
        gaussian_matrix(n_z, n_s, scale, rng),
        gaussian_matrix(n_z, n_z, scale, rng),
    )
    .expect("consistent shapes");
    if with_kernels {
        let kernel = |r: usize, c: usize, rng: &mut R| {
            let modes = rng.random_range(1..=2);
            ExpKernel {
                modes: (0..modes).map(|_| (gaussian_matrix(r, c, 0.3 * scale, rng), rng.random_range(0.5..3.0))).collect(),
            }
        };
        sys.k_ss = kernel(n_s, n_s, rng);
        sys.k_sz = kernel(n_s, n_z, rng);
        sys.k_zs = kernel(n_z, n_s, rng);
        sys.k_zz = kernel(n_z, n_z, rng);
    }
    let margin = 0.2;
    for _ in 0..200 {
        let a = sys.spectral_abscissa();
        if a < -margin {
            break;
        }
        let shift = (a + margin).max(0.0) + 0.1;
        for k in 0..n_s {
            sys.omega_ss[(k, k)] -= shift;
        }
        for k in 0..n_z {
            sys.omega_zz[(k, k)] -= shift;
        }
    }
    sys
}

/// Memory-free coupled system with `n_z` well separated pair relaxation rates
/// and dense couplings, the setting where the inflated kernel is not separable.
pub fn coupled_family<R: Rng + ?Sized>(n_s: usize, n_z: usize, rng: &mut R) -> BlockSystem {
    let scale = 1.0 / ((n_s + n_z) as f64).sqrt();
    let mut zz = gaussian_matrix(n_z, n_z, 0.1 * scale, rng);
    for k in 0..n_z {
        zz[(k, k)] -= 0.5 + 0.8 * k as f64;
    }
    let mut ss = gaussian_matrix(n_s, n_s, scale, rng);
    for k in 0..n_s {
        ss[(k, k)] -= 2.0;
    }
    BlockSystem::markovian(ss, gaussian_matrix(n_s, n_z, 1.0, rng), gaussian_matrix(n_z, n_s, 1.0, rng), zz)
        .expect("consistent shapes")
}

/// The scalar pair `Omega = (0 1; 1 -1)` whose eliminated kernel is `exp(-t)`.
pub fn hand_system() -> BlockSystem {
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    BlockSystem::markovian(m(0.0), m(1.0), m(1.0), m(-1.0)).expect("1x1 blocks")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MzSystemReport {
    pub n_s: usize,
    pub n_z: usize,
    pub max_relative_residual: f64,
    pub sigma_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MzReport {
    pub systems: Vec<MzSystemReport>,
    pub max_relative_residual: f64,
    pub hand_kernel_max_error: f64,
    pub gle_errors: Vec<(f64, f64)>,
    pub convergence_order: f64,
    pub markov_error_ratio: f64,
    pub separable_ratio: f64,
    pub coupled_min_ratio: f64,
}

/// Random complex evaluation point right of every pole.
pub fn random_point<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    C64::new(rng.random_range(0.1..3.0), rng.random_range(-5.0..5.0))
}

fn relative(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// GLE-vs-full error for the hand system on `[0, 5]` at step `dt`.
pub fn hand_gle_error(dt: f64) -> Result<f64> {
    let sys = hand_system();
    let steps = (5.0 / dt).round() as usize;
    let s0 = DVector::from_element(1, 1.0);
    let z0 = DVector::zeros(1);
    let full = simulate_full(&sys, &s0, &z0, 5.0, dt, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
    let kernel = sys.kernel_samples(dt, steps);
    let gle = simulate_gle(&sys.omega_ss, &kernel, None, &s0, dt, steps)?;
    Ok(max_error(&full.s, &gle))
}

/// Runs the whole verification battery.
pub fn verify<R: Rng + ?Sized>(n_systems: usize, points: usize, rng: &mut R) -> Result<MzReport> {
    let mut systems = Vec::with_capacity(n_systems);
    for _ in 0..n_systems {
        let ns = rng.random_range(1..=4);
        let nz = rng.random_range(1..=8);
        let sys = random_stable_system(ns, nz, true, rng);
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let p = random_point(rng);
            worst = worst.max(relative(&sys.inflate_kernel(p)?, &sys.resolvent_kernel(p)?));
        }
        let samples = sys.kernel_samples(0.05, 100);
        systems.push(MzSystemReport { n_s: ns, n_z: nz, max_relative_residual: worst, sigma_ratio: separability_test(&unfold(&samples)).ratio });
    }
    let hand = hand_system();
    let mut hand_err: f64 = 0.0;
    for k in 0..=50 {
        let t = k as f64 * 0.1;
        let num = invert_laplace(|p| hand.inflate_kernel(p).expect("regular point"), t, TALBOT_NODES)[(0, 0)];
        hand_err = hand_err.max((num - (-t).exp()).abs());
    }
    let dts = [2e-3, 1e-3, 5e-4];
    let gle_errors: Vec<(f64, f64)> = dts.iter().map(|&dt| hand_gle_error(dt).map(|e| (dt, e))).collect::<Result<_>>()?;
    let convergence_order = (gle_errors[1].1 / gle_errors[2].1).log2();
    let dt = 1e-3;
    let steps = 5000;
    let s0 = DVector::from_element(1, 1.0);
    let full = simulate_full(&hand, &s0, &DVector::zeros(1), 5.0, dt, rng)?;
    let markov = simulate_markov_limit(&hand, &s0, dt, steps)?;
    let markov_error_ratio = max_error(&full.s, &markov) / gle_errors[1].1.max(1e-300);
    let u = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 0.25, 2.0]);
    let separable: Vec<DMatrix<f64>> = (0..100).map(|k| &u * (-(k as f64) * 0.05).exp()).collect();
    let separable_ratio = separability_test(&unfold(&separable)).ratio;
    let mut coupled_min_ratio = f64::INFINITY;
    for _ in 0..20 {
        let sys = coupled_family(3, 6, rng);
        let samples = sys.kernel_samples(0.05, 200);
        coupled_min_ratio = coupled_min_ratio.min(separability_test(&unfold(&samples)).ratio);
    }
    let max_relative_residual = systems.iter().map(|s| s.max_relative_residual).fold(0.0, f64::max);
    Ok(MzReport {
        systems,
        max_relative_residual,
        hand_kernel_max_error: hand_err,
        gle_errors,
        convergence_order,
        markov_error_ratio,
        separable_ratio,
        coupled_min_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent elimination: invert the unaugmented Laplace block matrix
    /// and read the reduced kernel from its `s` block.
    fn block_inverse_kernel(sys: &BlockSystem, p: C64) -> DMatrix<C64> {
        let (ns, nz) = (sys.n_s(), sys.n_z());
        let n = ns + nz;
        let mut m = DMatrix::<C64>::identity(n, n) * p;
        let mut sub = |r0: usize, c0: usize, om: &DMatrix<f64>, k: &ExpKernel| {
            let (r, c) = om.shape();
            let blk = complex(om) + k.laplace(p, r, c);
            let mut v = m.view_mut((r0, c0), (r, c));
            v -= blk;
        };
        sub(0, 0, &sys.omega_ss, &sys.k_ss);
        sub(0, ns, &sys.omega_sz, &sys.k_sz);
        sub(ns, 0, &sys.omega_zs, &sys.k_zs);
        sub(ns, ns, &sys.omega_zz, &sys.k_zz);
        let g = m.try_inverse().unwrap().view((0, 0), (ns, ns)).into_owned();
        DMatrix::<C64>::identity(ns, ns) * p - complex(&sys.omega_ss) - g.try_inverse().unwrap()
    }

    #[test]
    fn decoupled_system_has_no_inflation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sys = random_stable_system(2, 3, true, &mut rng);
        sys.omega_sz.fill(0.0);
        sys.k_sz = ExpKernel::default();
        let p = C64::new(0.7, 1.3);
        let k = sys.inflate_kernel(p).unwrap();
        assert!(relative(&k, &sys.k_ss.laplace(p, 2, 2)) < 1e-15);
    }

    #[test]
    fn hand_system_gives_simple_pole() {
        let sys = hand_system();
        for p in [C64::new(0.5, 0.0), C64::new(2.0, -3.0)] {
            let k = sys.inflate_kernel(p).unwrap()[(0, 0)];
            assert!((k - C64::new(1.0, 0.0) / (p + 1.0)).norm() < 1e-15);
        }
        let samples = sys.kernel_samples(0.01, 500);
        for (k, m) in samples.iter().enumerate() {
            assert!((m[(0, 0)] - (-(k as f64) * 0.01).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn inflation_matches_block_elimination() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let sys = random_stable_system(3, 6, true, &mut rng);
            for _ in 0..20 {
                let p = random_point(&mut rng);
                let a = sys.inflate_kernel(p).unwrap();
                assert!(relative(&a, &block_inverse_kernel(&sys, p)) < 1e-10);
                assert!(relative(&a, &sys.resolvent_kernel(p).unwrap()) < 1e-10);
                // real system: conjugate symmetry
                let b = sys.inflate_kernel(p.conj()).unwrap();
                assert!(relative(&b, &a.map(|v| v.conj())) < 1e-12);
            }
        }
    }

    #[test]
    fn singular_resolvent_is_reported() {
        let sys = hand_system();
        assert!(matches!(sys.inflate_kernel(C64::new(-1.0, 0.0)), Err(Error::SingularResolvent { .. })));
    }

    #[test]
    fn talbot_inverts_closed_forms() {
        let one = |p: C64| DMatrix::from_element(1, 1, C64::new(1.0, 0.0) / (p + 1.0));
        let two = |p: C64| DMatrix::from_element(1, 1, C64::new(1.0, 0.0) / ((p + 1.0) * (p + 1.0)));
        for k in 0..=50 {
            let t = k as f64 * 0.1;
            assert!((invert_laplace(one, t, TALBOT_NODES)[(0, 0)] - (-t).exp()).abs() < 1e-6);
            if t > 0.0 {
                assert!((invert_laplace(two, t, TALBOT_NODES)[(0, 0)] - t * (-t).exp()).abs() < 1e-6);
            }
            let (a, b) = (2.5, -0.7);
            let lin = invert_laplace(|p| one(p) * C64::new(a, 0.0) + two(p) * C64::new(b, 0.0), t, TALBOT_NODES);
            let sep = invert_laplace(one, t, TALBOT_NODES) * a + invert_laplace(two, t, TALBOT_NODES) * b;
            assert!((lin - sep).amax() < 1e-8);
        }
    }

    #[test]
    fn talbot_agrees_with_realization_for_random_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sys = random_stable_system(2, 4, true, &mut rng);
        let samples = sys.kernel_samples(0.1, 30);
        for k in 1..=30 {
            let t = k as f64 * 0.1;
            let num = invert_laplace(|p| sys.inflate_kernel(p).unwrap(), t, TALBOT_NODES);
            assert!((num - &samples[k]).amax() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn scalar_decay_without_memory() {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        let sys = BlockSystem::markovian(m(-1.0), DMatrix::zeros(1, 0), DMatrix::zeros(0, 1), DMatrix::zeros(0, 0)).unwrap();
        let s0 = DVector::from_element(1, 2.0);
        let full = simulate_full(&sys, &s0, &DVector::zeros(0), 5.0, 1e-3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let kernel = vec![DMatrix::zeros(1, 1); 5001];
        let gle = simulate_gle(&sys.omega_ss, &kernel, None, &s0, 1e-3, 5000).unwrap();
        for (k, (a, b)) in full.s.iter().zip(&gle).enumerate() {
            let exact = 2.0 * (-(k as f64) * 1e-3).exp();
            assert!((a[0] - exact).abs() < 1e-6 && (b[0] - exact).abs() < 1e-6);
        }
    }

    #[test]
    fn gle_reproduces_full_simulation_at_second_order() {
        let e1 = hand_gle_error(1e-3).unwrap();
        assert!(e1 <= 1e-4, "error {e1}");
        let e2 = hand_gle_error(5e-4).unwrap();
        let ratio = e1 / e2;
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn nonzero_z0_enters_through_forcing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sys = random_stable_system(2, 3, true, &mut rng);
        let s0 = DVector::from_vec(vec![0.3, -1.0]);
        let z0 = DVector::from_vec(vec![1.0, 0.5, -0.2]);
        let dt = 1e-3;
        let steps = 3000;
        let full = simulate_full(&sys, &s0, &z0, steps as f64 * dt, dt, &mut rng).unwrap();
        let kernel = sys.kernel_samples(dt, steps);
        let forcing = sys.forcing_samples(&z0, dt, steps);
        let gle = simulate_gle(&sys.omega_ss, &kernel, Some(&forcing), &s0, dt, steps).unwrap();
        assert!(max_error(&full.s, &gle) < 1e-4);
        let without = simulate_gle(&sys.omega_ss, &kernel, None, &s0, dt, steps).unwrap();
        assert!(max_error(&full.s, &without) > 1e-2);
    }

    #[test]
    fn markov_limit_is_worse_than_memory() {
        let dt = 1e-3;
        let sys = hand_system();
        let s0 = DVector::from_element(1, 1.0);
        let full = simulate_full(&sys, &s0, &DVector::zeros(1), 5.0, dt, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let markov = simulate_markov_limit(&sys, &s0, dt, 5000).unwrap();
        let ratio = max_error(&full.s, &markov) / hand_gle_error(dt).unwrap();
        assert!(ratio > 2.0, "ratio {ratio}");
    }

    #[test]
    fn unstable_simulation_aborts() {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        let sys = BlockSystem::markovian(m(5.0), DMatrix::zeros(1, 0), DMatrix::zeros(0, 1), DMatrix::zeros(0, 0)).unwrap();
        let r = simulate_full(&sys, &DVector::from_element(1, 1.0), &DVector::zeros(0), 10.0, 0.01, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Unstable { .. })));
    }

    #[test]
    fn separability_verdicts() {
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]);
        let samples: Vec<_> = (0..80).map(|k| &u * (-(k as f64) * 0.05).exp()).collect();
        let r = separability_test(&unfold(&samples));
        assert!(r.ratio < 1e-12);
        assert_eq!(r.verdict, Separability::Separable);
        let scalar = hand_system().kernel_samples(0.05, 80);
        assert_eq!(separability_test(&unfold(&scalar)).verdict, Separability::Separable);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let sys = coupled_family(3, 6, &mut rng);
            let r = separability_test(&unfold(&sys.kernel_samples(0.05, 200)));
            assert!(r.ratio > 1e-3, "ratio {}", r.ratio);
            assert_eq!(r.verdict, Separability::NonSeparable);
        }
    }
}
