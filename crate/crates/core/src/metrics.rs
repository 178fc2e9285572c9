//! Trajectory evaluation: PCA coverage, kinetic curves, tICA, VAMP-2 and
//! Cα validity gating.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::{kabsch_align, rmsd, FrameSet, Trajectory};

/// Eigenvalue cutoff for regularized whitening.
pub const EPSILON: f64 = 1e-6;
/// Minimum number of valid time-lagged pairs for a tICA fit.
pub const MIN_TICA_PAIRS: usize = 30;
pub const KINETIC_COMPONENTS: usize = 32;

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c])
}

fn column_mean(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows().max(1) as f64;
    DVector::from_fn(x.ncols(), |c, _| x.column(c).sum() / n)
}

fn centered(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| x[(r, c)] - mean[c])
}

/// Eigenpairs sorted by decreasing eigenvalue.
fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: DVector<f64>,
    /// `k x D`, orthonormal rows.
    pub components: DMatrix<f64>,
    pub explained_variance: Vec<f64>,
}

impl PcaBasis {
    pub fn fit(data: &DMatrix<f64>, k: usize) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(Error::InvalidArgument("PCA needs at least two samples".into()));
        }
        let mean = column_mean(data);
        let xc = centered(data, &mean);
        let cov = xc.transpose() * &xc / data.nrows() as f64;
        let (values, vectors) = sorted_eigen(&cov);
        let k = k.min(values.len());
        Ok(Self { mean, components: vectors.columns(0, k).transpose(), explained_variance: values[..k].to_vec() })
    }

    pub fn fit_trajectory(traj: &Trajectory, k: usize) -> Result<Self> {
        Self::fit(&rows_to_matrix(&traj.coordinate_rows()), k)
    }

    pub fn dim(&self) -> usize {
        self.components.nrows()
    }

    /// `L x k` projections of the rows of `data`.
    pub fn project(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        centered(data, &self.mean) * self.components.transpose()
    }

    pub fn project_trajectory(&self, traj: &Trajectory) -> DMatrix<f64> {
        self.project(&rows_to_matrix(&traj.coordinate_rows()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub jsd: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Histogram over a `bins x bins` grid spanning the reference extent (padded
/// by 1%), plus one overflow bin for points outside it.
pub fn histogram2d(points: &[[f64; 2]], edges: &[(f64, f64); 2], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins * bins + 1];
    for p in points {
        let mut idx = [0usize; 2];
        let mut inside = true;
        for a in 0..2 {
            let (lo, hi) = edges[a];
            if !(p[a] >= lo && p[a] <= hi) {
                inside = false;
                break;
            }
            idx[a] = (((p[a] - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
        }
        let slot = if inside { idx[0] * bins + idx[1] } else { bins * bins };
        h[slot] += 1.0;
    }
    h
}

pub fn reference_edges(points: &[[f64; 2]]) -> [(f64, f64); 2] {
    let mut e = [(f64::INFINITY, f64::NEG_INFINITY); 2];
    for p in points {
        for a in 0..2 {
            e[a].0 = e[a].0.min(p[a]);
            e[a].1 = e[a].1.max(p[a]);
        }
    }
    for (lo, hi) in e.iter_mut() {
        let pad = 0.01 * (*hi - *lo).max(1e-12);
        *lo -= pad;
        *hi += pad;
    }
    e
}

/// Jensen–Shannon distance with base-2 logarithms, in `[0, 1]`.
pub fn js_distance(p: &[f64], q: &[f64]) -> f64 {
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    let mut div = 0.0;
    for (a, b) in p.iter().zip(q) {
        let (a, b) = (a / sp, b / sq);
        let m = 0.5 * (a + b);
        if a > 0.0 {
            div += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            div += 0.5 * b * (b / m).log2();
        }
    }
    div.clamp(0.0, 1.0).sqrt()
}

/// Coverage of `gen` against `reference` on 2-D projections; `None` when either is empty.
pub fn coverage(gen: &[[f64; 2]], reference: &[[f64; 2]], bins: usize) -> Option<Coverage> {
    if gen.is_empty() || reference.is_empty() || bins == 0 {
        return None;
    }
    let edges = reference_edges(reference);
    let hg = histogram2d(gen, &edges, bins);
    let hr = histogram2d(reference, &edges, bins);
    let occ_g: Vec<bool> = hg.iter().map(|&c| c > 0.0).collect();
    let occ_r: Vec<bool> = hr.iter().map(|&c| c > 0.0).collect();
    let both = occ_g.iter().zip(&occ_r).filter(|(a, b)| **a && **b).count() as f64;
    let precision = both / occ_g.iter().filter(|&&a| a).count() as f64;
    let recall = both / occ_r.iter().filter(|&&a| a).count() as f64;
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Some(Coverage { jsd: js_distance(&hg, &hr), precision, recall, f1 })
}

fn first_two(proj: &DMatrix<f64>, keep: Option<&[bool]>) -> Vec<[f64; 2]> {
    (0..proj.nrows())
        .filter(|&r| keep.is_none_or(|k| k[r]))
        .map(|r| [proj[(r, 0)], if proj.ncols() > 1 { proj[(r, 1)] } else { 0.0 }])
        .collect()
}

/// Mean RMSD between frames `lag` apart, Å.
pub fn rmsd_curve(traj: &Trajectory, lags: &[usize]) -> Result<Vec<Option<f64>>> {
    lags.iter()
        .map(|&lag| {
            if lag >= traj.len() {
                return Ok(None);
            }
            let n = traj.len() - lag;
            let mut acc = 0.0;
            for l in 0..n {
                acc += rmsd(traj.frame(l + lag), traj.frame(l))?;
            }
            Ok(Some(acc / n as f64))
        })
        .collect()
}

/// Normalized autocorrelation `E[<x_l - mu, x_{l+lag} - mu>] / E|x - mu|^2`;
/// `None` for a constant signal or a lag beyond the data.
pub fn autocorr_curve(features: &DMatrix<f64>, lags: &[usize]) -> Vec<Option<f64>> {
    let l = features.nrows();
    let mean = column_mean(features);
    let x = centered(features, &mean);
    let var = x.iter().map(|v| v * v).sum::<f64>() / l.max(1) as f64;
    lags.iter()
        .map(|&lag| {
            if !(var > 0.0) || lag >= l {
                return None;
            }
            if lag == 0 {
                return Some(1.0);
            }
            let n = l - lag;
            let mut acc = 0.0;
            for r in 0..n {
                acc += x.row(r).dot(&x.row(r + lag));
            }
            Some(acc / n as f64 / var)
        })
        .collect()
}

/// Symmetric inverse square root keeping eigenvalues above `eps`.
fn inv_sqrt(m: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let (values, vectors) = sorted_eigen(m);
    let d = DVector::from_iterator(values.len(), values.iter().map(|&v| if v > eps { 1.0 / v.sqrt() } else { 0.0 }));
    &vectors * DMatrix::from_diagonal(&d) * vectors.transpose()
}

/// Squared Frobenius norm of the whitened Koopman matrix at each lag.
pub fn vamp2_curve(features: &DMatrix<f64>, lags: &[usize]) -> Vec<Option<f64>> {
    let l = features.nrows();
    let mean = column_mean(features);
    let x = centered(features, &mean);
    lags.iter()
        .map(|&lag| {
            if lag >= l {
                return None;
            }
            let n = l - lag;
            let a = x.rows(0, n);
            let b = x.rows(lag, n);
            let c00 = a.transpose() * a / n as f64;
            let c0t = a.transpose() * b / n as f64;
            let ctt = b.transpose() * b / n as f64;
            let k = inv_sqrt(&c00, EPSILON) * c0t * inv_sqrt(&ctt, EPSILON);
            Some(k.norm_squared())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TicaModel {
    /// Sorted decreasing.
    pub eigenvalues: Vec<f64>,
    /// Columns are kinetic-map scaled eigenvectors in feature space.
    pub eigenvectors: DMatrix<f64>,
    pub pairs: usize,
}

/// Solves `C_lag v = lambda C_0 v` with symmetrized covariances over pairs
/// whose both ends are valid; `None` below [`MIN_TICA_PAIRS`].
pub fn tica(features: &DMatrix<f64>, mask: &[bool], lag: usize) -> Option<TicaModel> {
    let l = features.nrows();
    let pairs: Vec<usize> = (0..l.saturating_sub(lag)).filter(|&r| mask[r] && mask[r + lag]).collect();
    if pairs.len() < MIN_TICA_PAIRS {
        return None;
    }
    let d = features.ncols();
    let mut mean = DVector::zeros(d);
    for &r in &pairs {
        mean += features.row(r).transpose() + features.row(r + lag).transpose();
    }
    mean /= 2.0 * pairs.len() as f64;
    let mut c0 = DMatrix::zeros(d, d);
    let mut ct = DMatrix::zeros(d, d);
    for &r in &pairs {
        let a = features.row(r).transpose() - &mean;
        let b = features.row(r + lag).transpose() - &mean;
        c0 += &a * a.transpose() + &b * b.transpose();
        ct += &a * b.transpose() + &b * a.transpose();
    }
    let norm = 2.0 * pairs.len() as f64;
    c0 /= norm;
    ct /= norm;
    let (values, vectors) = sorted_eigen(&c0);
    let keep: Vec<usize> = (0..values.len()).filter(|&k| values[k] > EPSILON).collect();
    let w = DMatrix::from_fn(d, keep.len(), |r, c| vectors[(r, keep[c])] / values[keep[c]].sqrt());
    let (lambda, u) = sorted_eigen(&(w.transpose() * &ct * &w));
    let mut v = w * u;
    for (k, mut col) in v.column_iter_mut().enumerate() {
        col *= lambda[k];
    }
    Some(TicaModel { eigenvalues: lambda, eigenvectors: v, pairs: pairs.len() })
}

/// Per-residue score `max(|v_x|, |v_y|, |v_z|)` of a Cartesian component.
pub fn residue_scores(component: &[f64]) -> Vec<f64> {
    component.chunks(3).map(|c| c.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicaCorrelation {
    pub lag: usize,
    /// `|Pearson|` of residue scores for the two slowest components.
    pub components: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// Compares residue-score profiles of the two slowest tICA components.
pub fn tica_correlation(
    gen: &DMatrix<f64>,
    gen_mask: &[bool],
    reference: &DMatrix<f64>,
    ref_mask: &[bool],
    lag: usize,
) -> TicaCorrelation {
    let (Some(g), Some(r)) = (tica(gen, gen_mask, lag), tica(reference, ref_mask, lag)) else {
        return TicaCorrelation { lag, components: vec![None, None], mean: None };
    };
    let components: Vec<Option<f64>> = (0..2)
        .map(|k| {
            if k >= g.eigenvectors.ncols() || k >= r.eigenvectors.ncols() {
                return None;
            }
            let sg = residue_scores(g.eigenvectors.column(k).as_slice());
            let sr = residue_scores(r.eigenvectors.column(k).as_slice());
            pearson(&sg, &sr).map(f64::abs)
        })
        .collect();
    let mean = if components.iter().all(Option::is_some) {
        Some(components.iter().flatten().sum::<f64>() / components.len() as f64)
    } else {
        None
    };
    TicaCorrelation { lag, components, mean }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityThresholds {
    pub clash_distance: f64,
    pub break_distance: f64,
    /// Maximum fraction of clashing non-adjacent pairs (1.29%).
    pub max_clash_rate: f64,
    /// Maximum fraction of broken adjacent pairs (0.2%).
    pub max_break_rate: f64,
}

impl Default for ValidityThresholds {
    fn default() -> Self {
        Self { clash_distance: 3.0, break_distance: 4.5, max_clash_rate: 0.0129, max_break_rate: 0.002 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityMask {
    /// `None` when fewer than three residues leave no non-adjacent pairs.
    pub clash_rates: Vec<Option<f64>>,
    pub break_rates: Vec<f64>,
    pub clash_ok: Vec<bool>,
    pub break_ok: Vec<bool>,
    pub valid: Vec<bool>,
}

impl ValidityMask {
    fn percent(v: &[bool]) -> f64 {
        100.0 * v.iter().filter(|&&b| b).count() as f64 / v.len().max(1) as f64
    }

    pub fn valid_percent(&self) -> f64 {
        Self::percent(&self.valid)
    }

    pub fn clash_percent(&self) -> f64 {
        Self::percent(&self.clash_ok)
    }

    pub fn break_percent(&self) -> f64 {
        Self::percent(&self.break_ok)
    }
}

/// Clash and break rates of one frame.
pub fn frame_rates(frame: &FrameSet, th: &ValidityThresholds) -> (Option<f64>, f64) {
    let t = frame.translations();
    let n = t.len();
    let mut clashes = 0usize;
    let mut non_adjacent = 0usize;
    for i in 0..n {
        for j in i + 2..n {
            non_adjacent += 1;
            if (t[i] - t[j]).norm() < th.clash_distance {
                clashes += 1;
            }
        }
    }
    let breaks = (0..n - 1).filter(|&i| (t[i + 1] - t[i]).norm() > th.break_distance).count();
    let clash = (non_adjacent > 0).then(|| clashes as f64 / non_adjacent as f64);
    (clash, breaks as f64 / (n - 1) as f64)
}

pub fn validity(traj: &Trajectory, th: &ValidityThresholds) -> ValidityMask {
    let mut m = ValidityMask {
        clash_rates: Vec::new(),
        break_rates: Vec::new(),
        clash_ok: Vec::new(),
        break_ok: Vec::new(),
        valid: Vec::new(),
    };
    for f in traj.frames() {
        let (c, b) = frame_rates(f, th);
        let cok = c.is_none_or(|c| c <= th.max_clash_rate);
        let bok = b <= th.max_break_rate;
        m.clash_rates.push(c);
        m.break_rates.push(b);
        m.clash_ok.push(cok);
        m.break_ok.push(bok);
        m.valid.push(cok && bok);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub bins: usize,
    pub lags: Vec<usize>,
    pub tica_lags: Vec<usize>,
    pub thresholds: ValidityThresholds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: 10,
            lags: (0..=10).chain([15, 20, 30]).collect(),
            tica_lags: vec![1, 5, 10, 20],
            thresholds: ValidityThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub jsd_convention: String,
    pub coverage: Option<Coverage>,
    pub coverage_valid: Option<Coverage>,
    pub lags: Vec<usize>,
    pub rmsd: Vec<Option<f64>>,
    pub rmsd_reference: Vec<Option<f64>>,
    pub autocorr: Vec<Option<f64>>,
    pub autocorr_reference: Vec<Option<f64>>,
    pub vamp2: Vec<Option<f64>>,
    pub vamp2_reference: Vec<Option<f64>>,
    pub tica: Vec<TicaCorrelation>,
    pub validity_percent: f64,
    pub clash_valid_percent: f64,
    pub break_valid_percent: f64,
    pub reference_validity_percent: f64,
    pub thresholds: ValidityThresholds,
    pub frames: usize,
    pub reference_frames: usize,
}

/// Full comparison of a generated trajectory against a reference, both
/// aligned onto the reference's first frame.
pub fn evaluate(gen: &Trajectory, reference: &Trajectory, cfg: &EvalConfig) -> Result<MetricReport> {
    if gen.residue_count() != reference.residue_count() {
        return Err(Error::ResidueMismatch(reference.residue_count(), gen.residue_count()));
    }
    let anchor = reference.frame(0);
    let gen_al = kabsch_align(gen, anchor)?.trajectory;
    let ref_al = kabsch_align(reference, anchor)?.trajectory;
    let k = KINETIC_COMPONENTS.min(3 * reference.residue_count());
    let basis = PcaBasis::fit_trajectory(&ref_al, k)?;
    let pg = basis.project_trajectory(&gen_al);
    let pr = basis.project_trajectory(&ref_al);
    let vg = validity(&gen_al, &cfg.thresholds);
    let vr = validity(&ref_al, &cfg.thresholds);
    let ref2 = first_two(&pr, None);
    let cov = coverage(&first_two(&pg, None), &ref2, cfg.bins);
    let cov_valid = coverage(&first_two(&pg, Some(&vg.valid)), &ref2, cfg.bins);
    let cg = rows_to_matrix(&gen_al.coordinate_rows());
    let cr = rows_to_matrix(&ref_al.coordinate_rows());
    let tica = cfg.tica_lags.iter().map(|&lag| tica_correlation(&cg, &vg.valid, &cr, &vr.valid, lag)).collect();
    Ok(MetricReport {
        jsd_convention: "jensen-shannon distance, log base 2".into(),
        coverage: cov,
        coverage_valid: cov_valid,
        lags: cfg.lags.clone(),
        rmsd: rmsd_curve(&gen_al, &cfg.lags)?,
        rmsd_reference: rmsd_curve(&ref_al, &cfg.lags)?,
        autocorr: autocorr_curve(&pg, &cfg.lags),
        autocorr_reference: autocorr_curve(&pr, &cfg.lags),
        vamp2: vamp2_curve(&pg, &cfg.lags),
        vamp2_reference: vamp2_curve(&pr, &cfg.lags),
        tica,
        validity_percent: vg.valid_percent(),
        clash_valid_percent: vg.clash_percent(),
        break_valid_percent: vg.break_percent(),
        reference_validity_percent: vr.valid_percent(),
        thresholds: cfg.thresholds,
        frames: gen.len(),
        reference_frames: reference.len(),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Lag curves as CSV rows.
pub fn write_curves_csv<W: Write>(report: &MetricReport, mut w: W) -> Result<()> {
    writeln!(w, "lag,rmsd,rmsd_reference,autocorr,autocorr_reference,vamp2,vamp2_reference")?;
    for (k, lag) in report.lags.iter().enumerate() {
        writeln!(
            w,
            "{lag},{},{},{},{},{},{}",
            cell(report.rmsd[k]),
            cell(report.rmsd_reference[k]),
            cell(report.autocorr[k]),
            cell(report.autocorr_reference[k]),
            cell(report.vamp2[k]),
            cell(report.vamp2_reference[k]),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{RigidFrame, Rotation, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    #[test]
    fn self_coverage_is_perfect_and_disjoint_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f64; 2]> = (0..500).map(|_| [normal(&mut rng), normal(&mut rng)]).collect();
        let c = coverage(&pts, &pts, 10).unwrap();
        assert_eq!((c.jsd, c.precision, c.recall, c.f1), (0.0, 1.0, 1.0, 1.0));
        let far: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] + 100.0, p[1]]).collect();
        let c = coverage(&far, &pts, 10).unwrap();
        assert!((c.jsd - 1.0).abs() < 1e-12);
        assert_eq!(c.recall, 0.0);
        assert!(coverage(&[], &pts, 10).is_none());
    }

    #[test]
    fn coverage_matches_direct_count() {
        // reference uniform on [0,1]^2, generated shifted right by half the extent
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r: Vec<[f64; 2]> = (0..4000).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        let g: Vec<[f64; 2]> = (0..4000).map(|_| [rng.random::<f64>() + 0.5, rng.random::<f64>()]).collect();
        let c = coverage(&g, &r, 10).unwrap();
        // brute force: recompute edges and bin indices independently
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for p in &r {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let bin = |p: &[f64; 2]| -> usize {
            let mut idx = 0;
            for a in 0..2 {
                let pad = (hi[a] - lo[a]) * 0.01;
                let (l, h) = (lo[a] - pad, hi[a] + pad);
                if p[a] < l || p[a] > h {
                    return 100;
                }
                let b = (((p[a] - l) / (h - l)) * 10.0).floor().min(9.0) as usize;
                idx = idx * 10 + b;
            }
            idx
        };
        let mut hr = [0.0f64; 101];
        let mut hg = [0.0f64; 101];
        r.iter().for_each(|p| hr[bin(p)] += 1.0);
        g.iter().for_each(|p| hg[bin(p)] += 1.0);
        let mut js = 0.0;
        for k in 0..101 {
            let (a, b) = (hg[k] / 4000.0, hr[k] / 4000.0);
            let m = (a + b) / 2.0;
            if a > 0.0 {
                js += 0.5 * a * (a / m).ln() / 2f64.ln();
            }
            if b > 0.0 {
                js += 0.5 * b * (b / m).ln() / 2f64.ln();
            }
        }
        assert!((c.jsd - js.sqrt()).abs() < 1e-12);
        let occ_r = hr.iter().filter(|&&x| x > 0.0).count() as f64;
        let both = (0..101).filter(|&k| hr[k] > 0.0 && hg[k] > 0.0).count() as f64;
        assert!((c.recall - both / occ_r).abs() < 1e-15);
        assert!((c.recall - 0.5).abs() < 0.06);
    }

    #[test]
    fn autocorrelation_of_ou_process() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rho: f64 = 0.9;
        let mut x = 0.0;
        let data: Vec<f64> = (0..100_000)
            .map(|_| {
                x = rho * x + (1.0 - rho * rho).sqrt() * normal(&mut rng);
                x
            })
            .collect();
        let m = DMatrix::from_column_slice(data.len(), 1, &data);
        let lags: Vec<usize> = (0..=20).collect();
        let ac = autocorr_curve(&m, &lags);
        assert_eq!(ac[0], Some(1.0));
        for (lag, v) in lags.iter().zip(&ac) {
            assert!((v.unwrap() - rho.powi(*lag as i32)).abs() < 0.02, "lag {lag}");
        }
        let constant = DMatrix::from_element(50, 2, 3.0);
        assert_eq!(autocorr_curve(&constant, &[0, 1]), vec![None, None]);
    }

    fn chain_traj(frames: usize, rng: &mut ChaCha8Rng, noise: f64) -> Trajectory {
        let fs = (0..frames)
            .map(|_| {
                FrameSet::new(
                    (0..6)
                        .map(|i| {
                            let jitter = Vec3::new(normal(rng), normal(rng), normal(rng)) * noise;
                            RigidFrame::new(Rotation::identity(), Vec3::new(3.8 * i as f64, (i % 2) as f64, 0.0) + jitter)
                        })
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        Trajectory::uniform(fs, 0.01).unwrap()
    }

    #[test]
    fn constant_trajectory_has_zero_rmsd_curve() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = chain_traj(10, &mut rng, 0.0);
        for v in rmsd_curve(&t, &[0, 1, 5]).unwrap() {
            assert_eq!(v, Some(0.0));
        }
    }

    #[test]
    fn vamp2_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let white = DMatrix::from_fn(100_000, 4, |_, _| normal(&mut rng));
        let v = vamp2_curve(&white, &[0, 1, 2]);
        assert!((v[0].unwrap() - 4.0).abs() < 1e-6);
        assert!(v[1].unwrap() <= 0.05 && v[2].unwrap() <= 0.05);
        // rank-deficient features: third column duplicates the first
        let mut x = DMatrix::from_fn(1000, 3, |_, _| normal(&mut rng));
        let first = x.column(0).into_owned();
        x.set_column(2, &first);
        assert!((vamp2_curve(&x, &[0])[0].unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn vamp2_of_linear_chain_matches_whitened_propagator() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = DMatrix::from_row_slice(2, 2, &[0.8, 0.1, -0.2, 0.5]);
        let mut x = DVector::zeros(2);
        let data = DMatrix::from_fn(100_000, 2, |_, _| 0.0);
        let mut data = data;
        for t in 0..100_000 {
            x = &a * &x + DVector::from_fn(2, |_, _| normal(&mut rng));
            data.set_row(t, &x.transpose());
        }
        // stationary covariance: S = A S A^T + I by fixed-point iteration
        let mut s = DMatrix::<f64>::identity(2, 2);
        for _ in 0..500 {
            s = &a * &s * a.transpose() + DMatrix::identity(2, 2);
        }
        let sh = inv_sqrt(&s, 0.0);
        let k = &sh * &s * a.transpose() * &sh;
        let expected = k.norm_squared();
        let got = vamp2_curve(&data, &[1])[0].unwrap();
        assert!((got - expected).abs() / expected < 0.03, "{got} vs {expected}");
    }

    #[test]
    fn invariance_under_linear_reparameterization() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = DMatrix::from_row_slice(3, 3, &[0.9, 0.05, 0.0, 0.0, 0.6, 0.1, 0.0, 0.0, 0.3]);
        let mut x = DVector::zeros(3);
        let mut data = DMatrix::zeros(20_000, 3);
        for t in 0..20_000 {
            x = &a * &x + DVector::from_fn(3, |_, _| normal(&mut rng));
            data.set_row(t, &x.transpose());
        }
        let t = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, -0.2, 0.1, 2.0, 0.4, -0.5, 0.2, 1.5]);
        let a1 = vamp2_curve(&data, &[1, 3]);
        let a2 = vamp2_curve(&(&data * t), &[1, 3]);
        for (p, q) in a1.iter().zip(&a2) {
            assert!((p.unwrap() - q.unwrap()).abs() < 1e-3);
        }
    }

    /// Generalized eigenproblem via Cholesky and cyclic Jacobi rotations.
    fn oracle_generalized(c0: &DMatrix<f64>, ct: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let n = c0.nrows();
        let mut l = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum();
                l[(i, j)] = if i == j { (c0[(i, i)] - s).sqrt() } else { (c0[(i, j)] - s) / l[(j, j)] };
            }
        }
        let li = l.clone().try_inverse().unwrap();
        let mut m = &li * ct * li.transpose();
        let mut v = DMatrix::<f64>::identity(n, n);
        for _ in 0..100 {
            for p in 0..n {
                for q in p + 1..n {
                    if m[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    let mut rot = DMatrix::<f64>::identity(n, n);
                    rot[(p, p)] = c;
                    rot[(q, q)] = c;
                    rot[(p, q)] = s;
                    rot[(q, p)] = -s;
                    m = rot.transpose() * &m * &rot;
                    v = &v * &rot;
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| m[(b, b)].total_cmp(&m[(a, a)]));
        let vecs = li.transpose() * &v;
        let vals = order.iter().map(|&k| m[(k, k)]).collect();
        (vals, DMatrix::from_fn(n, n, |r, c| vecs[(r, order[c])]))
    }

    #[test]
    fn tica_slow_residue_dominates_and_matches_oracle() {
        // three residues: residue 0 moves slowly along x, others fast
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frames = 5000;
        let mut slow = 0.0;
        let mut fast = [0.0f64; 8];
        let data = DMatrix::from_fn(frames, 9, |_, _| 0.0);
        let mut data = data;
        for t in 0..frames {
            slow = 0.98 * slow + 0.2 * normal(&mut rng);
            for f in fast.iter_mut() {
                *f = 0.2 * *f + normal(&mut rng);
            }
            let row = [slow, fast[0], fast[1], fast[2], fast[3], fast[4], fast[5], fast[6], fast[7]];
            for (c, v) in row.iter().enumerate() {
                data[(t, c)] = *v;
            }
        }
        let mask = vec![true; frames];
        let m = tica(&data, &mask, 5).unwrap();
        assert!(m.eigenvalues.iter().all(|&l| (-1.0..=1.0).contains(&l)));
        let s = residue_scores(m.eigenvectors.column(0).as_slice());
        assert!(s[0] > s[1] && s[0] > s[2]);
        // oracle on the same symmetrized covariances
        let pairs = frames - 5;
        let mut mean = DVector::zeros(9);
        for r in 0..pairs {
            mean += data.row(r).transpose() + data.row(r + 5).transpose();
        }
        mean /= 2.0 * pairs as f64;
        let mut c0 = DMatrix::zeros(9, 9);
        let mut ct = DMatrix::zeros(9, 9);
        for r in 0..pairs {
            let a = data.row(r).transpose() - &mean;
            let b = data.row(r + 5).transpose() - &mean;
            c0 += &a * a.transpose() + &b * b.transpose();
            ct += &a * b.transpose() + &b * a.transpose();
        }
        c0 /= 2.0 * pairs as f64;
        ct /= 2.0 * pairs as f64;
        let (vals, vecs) = oracle_generalized(&c0, &ct);
        for k in 0..2 {
            assert!((vals[k] - m.eigenvalues[k]).abs() < 1e-8);
            let so = residue_scores(&vecs.column(k).iter().map(|v| v * vals[k]).collect::<Vec<_>>());
            let sm = residue_scores(m.eigenvectors.column(k).as_slice());
            let r_self = pearson(&so, &sm).unwrap().abs();
            assert!((r_self - 1.0).abs() < 1e-8);
        }
        let c = tica_correlation(&data, &mask, &data, &mask, 5);
        for v in c.components {
            assert!((v.unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tica_requires_thirty_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = DMatrix::from_fn(40, 3, |_, _| normal(&mut rng));
        let mut mask = vec![false; 40];
        // lag 1 pairs (r, r+1) valid for r in 0..29 -> 29 pairs
        mask[..30].fill(true);
        assert!(tica(&data, &mask, 1).is_none());
        mask[30] = true;
        assert_eq!(tica(&data, &mask, 1).unwrap().pairs, 30);
    }

    #[test]
    fn validity_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ideal = Trajectory::uniform(
            vec![FrameSet::new(
                (0..16)
                    .map(|i| RigidFrame::new(Rotation::identity(), Vec3::new(3.8 * i as f64, 0.0, 0.0)))
                    .collect(),
            )
            .unwrap()],
            0.01,
        )
        .unwrap();
        let th = ValidityThresholds::default();
        assert_eq!(validity(&ideal, &th).valid_percent(), 100.0);
        // residue 10 placed on top of residue 3
        let mut f = ideal.frame(0).clone();
        f.frames_mut()[10].translation = f.frames()[3].translation;
        let (clash, brk) = frame_rates(&f, &th);
        let non_adjacent = 16.0 * 15.0 / 2.0 - 15.0;
        // residue 10 also sits 3.8 A from residues 2 and 4; both non-adjacent to 10 but > 3.0 A
        assert!((clash.unwrap() - 1.0 / non_adjacent).abs() < 1e-15);
        assert!(brk > 0.0);
        let zero = ValidityThresholds { max_clash_rate: 0.0, max_break_rate: 0.0, ..th };
        let noisy = chain_traj(5, &mut rng, 1.0);
        let m = validity(&noisy, &zero);
        for k in 0..5 {
            let (c, b) = (m.clash_rates[k].unwrap(), m.break_rates[k]);
            assert_eq!(m.valid[k], c == 0.0 && b == 0.0);
        }
        let two = FrameSet::new(vec![RigidFrame::identity(), RigidFrame::identity()]).unwrap();
        assert_eq!(frame_rates(&two, &th).0, None);
    }

    #[test]
    fn report_is_invariant_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reference = chain_traj(200, &mut rng, 0.4);
        let gen = chain_traj(200, &mut rng, 0.4);
        let g = RigidFrame::new(Rotation::random(&mut rng), Vec3::new(4.0, -9.0, 1.0));
        let cfg = EvalConfig::default();
        let a = evaluate(&gen, &reference, &cfg).unwrap();
        let b = evaluate(&gen.transformed(&g), &reference, &cfg).unwrap();
        let close = |x: &[Option<f64>], y: &[Option<f64>]| {
            x.iter().zip(y).all(|(p, q)| (p.unwrap() - q.unwrap()).abs() < 1e-8)
        };
        assert!(close(&a.rmsd, &b.rmsd) && close(&a.autocorr, &b.autocorr) && close(&a.vamp2, &b.vamp2));
        let self_report = evaluate(&reference, &reference, &cfg).unwrap();
        let c = self_report.coverage.unwrap();
        assert_eq!((c.jsd, c.precision, c.recall, c.f1), (0.0, 1.0, 1.0, 1.0));
        let mut csv = Vec::new();
        write_curves_csv(&a, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), cfg.lags.len() + 1);
    }

    proptest::proptest! {
        #[test]
        fn autocorr_starts_at_one(values in proptest::collection::vec(-10.0f64..10.0, 20..60)) {
            let m = DMatrix::from_column_slice(values.len() / 2, 2, &values[..values.len() / 2 * 2]);
            let ac = autocorr_curve(&m, &[0, 1, 3]);
            proptest::prop_assert_eq!(ac[0], Some(1.0));
            proptest::prop_assert!(ac.iter().all(|v| v.is_some_and(f64::is_finite)));
        }

        #[test]
        fn self_coverage_is_perfect(pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 5..80)) {
            let p: Vec<[f64; 2]> = pts.iter().map(|&(a, b)| [a, b]).collect();
            let c = coverage(&p, &p, 10).unwrap();
            proptest::prop_assert!(c.jsd.abs() < 1e-12 && c.recall == 1.0 && c.precision == 1.0);
        }
    }
}
