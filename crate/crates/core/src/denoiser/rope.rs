//! Two-axis rotary position tables.
//!
//! Each head splits into a residue half and a frame half; within a half,
//! consecutive column pairs rotate by `pos * base^(-2m/half)`.

use ndarray::Array2;

use crate::tape::RopeTable;

/// Column pairs and frequencies shared by every head.
fn bands(dim: usize, heads: usize, two_axis: bool, base: f64) -> Vec<(usize, usize, f64, bool)> {
    let dh = dim / heads;
    let mut out = Vec::new();
    for h in 0..heads {
        let start = h * dh;
        let halves: &[(usize, usize, bool)] =
            if two_axis { &[(0, dh / 2, false), (dh / 2, dh / 2, true)] } else { &[(0, dh, false)] };
        for &(off, width, frame_axis) in halves {
            for m in 0..width / 2 {
                let freq = base.powf(-2.0 * m as f64 / width as f64);
                out.push((start + off + 2 * m, start + off + 2 * m + 1, freq, frame_axis));
            }
        }
    }
    out
}

/// Rotary table for tokens at `(residue, frame)` positions.
pub fn table(dim: usize, heads: usize, two_axis: bool, base: f64, positions: &[(usize, usize)]) -> RopeTable {
    let b = bands(dim, heads, two_axis, base);
    let mut cos = Array2::zeros((positions.len(), b.len()));
    let mut sin = Array2::zeros((positions.len(), b.len()));
    for (r, &(i, l)) in positions.iter().enumerate() {
        for (p, &(_, _, freq, frame_axis)) in b.iter().enumerate() {
            let pos = if frame_axis { l } else { i } as f64;
            let (s, c) = (pos * freq).sin_cos();
            cos[[r, p]] = c;
            sin[[r, p]] = s;
        }
    }
    RopeTable { pairs: b.iter().map(|&(a, c, _, _)| (a, c)).collect(), cos, sin }
}
