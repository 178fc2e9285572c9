//! Rigid-motion invariant input features.

use ndarray::Array2;

use crate::se3::{FrameSet, Vec3};

const INDEX_FREQS: usize = 4;
const KNN_CENTERS: [f64; 6] = [2.0, 4.0, 6.0, 8.0, 10.0, 12.0];
const PAIR_CENTERS: [f64; 8] = [0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0];
const RBF_WIDTH: f64 = 1.5;
const TAU_FREQS: usize = 8;
const DT_FREQS: usize = 8;
const MAX_SEQ_OFFSET: f64 = 8.0;

pub fn single_width(knn: usize) -> usize {
    2 * INDEX_FREQS + knn * KNN_CENTERS.len() + 6 + 3
}

pub const PAIR_WIDTH: usize = PAIR_CENTERS.len() + 1 + 3 + 1;
pub const COND_WIDTH: usize = 2 * TAU_FREQS + 2 * DT_FREQS;

fn rbf(d: f64, mu: f64) -> f64 {
    let x = (d - mu) / RBF_WIDTH;
    (-0.5 * x * x).exp()
}

/// Per-residue features: index encoding, RBFs of the `knn` nearest distances,
/// local directions to chain neighbours and to the centroid.
pub fn single_features(frames: &FrameSet, knn: usize) -> Array2<f64> {
    let n = frames.residue_count();
    let width = single_width(knn);
    let mut out = Array2::zeros((n, width));
    let t = frames.translations();
    let centroid = frames.centroid();
    let mut dists = Vec::with_capacity(n);
    for i in 0..n {
        let mut c = 0;
        for k in 0..INDEX_FREQS {
            let f = 0.25f64.powi(k as i32);
            out[[i, c]] = (i as f64 * f).sin();
            out[[i, c + 1]] = (i as f64 * f).cos();
            c += 2;
        }
        dists.clear();
        dists.extend((0..n).filter(|&j| j != i).map(|j| (t[j] - t[i]).norm()));
        dists.sort_by(f64::total_cmp);
        for k in 0..knn {
            if let Some(&d) = dists.get(k) {
                for (m, mu) in KNN_CENTERS.iter().enumerate() {
                    out[[i, c + m]] = rbf(d, *mu);
                }
            }
            c += KNN_CENTERS.len();
        }
        let rt = frames.frames()[i].rotation.inverse();
        let local = |v: Vec3| rt.apply(&v);
        for nb in [i.checked_sub(1), (i + 1 < n).then_some(i + 1)] {
            if let Some(j) = nb {
                let d = local(t[j] - t[i]) / 4.0;
                out[[i, c]] = d.x;
                out[[i, c + 1]] = d.y;
                out[[i, c + 2]] = d.z;
            }
            c += 3;
        }
        let d = local(centroid - t[i]) / 10.0;
        out[[i, c]] = d.x;
        out[[i, c + 1]] = d.y;
        out[[i, c + 2]] = d.z;
    }
    out
}

/// Pair features in row `i * N + j`: distance RBFs, relative-rotation
/// trace, direction of `j` in the frame of `i`, clipped sequence offset.
pub fn pair_features(frames: &FrameSet) -> Array2<f64> {
    let n = frames.residue_count();
    let mut out = Array2::zeros((n * n, PAIR_WIDTH));
    let t = frames.translations();
    let mats: Vec<_> = frames.rotations().iter().map(|r| r.to_matrix()).collect();
    for i in 0..n {
        for j in 0..n {
            let row = i * n + j;
            let dv = t[j] - t[i];
            let d = dv.norm();
            for (m, mu) in PAIR_CENTERS.iter().enumerate() {
                out[[row, m]] = rbf(d, *mu);
            }
            let mut c = PAIR_CENTERS.len();
            out[[row, c]] = (mats[i].transpose() * mats[j]).trace() / 3.0;
            c += 1;
            let local = mats[i].transpose() * dv / 10.0;
            out[[row, c]] = local.x;
            out[[row, c + 1]] = local.y;
            out[[row, c + 2]] = local.z;
            c += 3;
            let off = (j as f64 - i as f64).clamp(-MAX_SEQ_OFFSET, MAX_SEQ_OFFSET);
            out[[row, c]] = off / MAX_SEQ_OFFSET;
        }
    }
    out
}

/// Sinusoidal encodings of diffusion time and log stride, one row per frame.
pub fn conditioning_features(tau: f64, dt_ns: f64) -> [f64; COND_WIDTH] {
    let mut out = [0.0; COND_WIDTH];
    let scaled = tau * 1000.0;
    for k in 0..TAU_FREQS {
        let f = 10000f64.powf(-(k as f64) / TAU_FREQS as f64);
        out[2 * k] = (scaled * f).sin();
        out[2 * k + 1] = (scaled * f).cos();
    }
    let x = dt_ns.ln();
    for k in 0..DT_FREQS {
        let f = 2f64.powi(k as i32 - 3);
        out[2 * TAU_FREQS + 2 * k] = (x * f).sin();
        out[2 * TAU_FREQS + 2 * k + 1] = (x * f).cos();
    }
    out
}
