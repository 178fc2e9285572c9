//! Leading-order FLOP and KV-cache memory models for comparing joint
//! spatio-temporal attention with Pairformer-style factorizations.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rollout::cache_memory_bytes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// One attention over all `N x L` tokens.
    StJoint,
    /// Cubic spatial pair updates plus temporal attention on singles and pairs.
    PairformerPairTemporal,
    /// Cubic spatial pair updates plus temporal attention on singles only.
    PairformerSingleTemporal,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::StJoint, Arch::PairformerPairTemporal, Arch::PairformerSingleTemporal];

    pub fn name(self) -> &'static str {
        match self {
            Arch::StJoint => "st_joint",
            Arch::PairformerPairTemporal => "pairformer_pair_temporal",
            Arch::PairformerSingleTemporal => "pairformer_single_temporal",
        }
    }
}

/// Per-layer cost proxy with unit constants. Exact in `u128` over the
/// sweep ranges used here.
pub fn flops(arch: Arch, n: u64, l: u64, d: u64) -> u128 {
    let (n, l, d) = (n as u128, l as u128, d as u128);
    let terms = match arch {
        Arch::StJoint => n * n * l * l,
        Arch::PairformerPairTemporal => n * n * n * l + (n + n * n) * l * l,
        Arch::PairformerSingleTemporal => n * n * n * l + n * l * l,
    };
    terms * d
}

/// Context length at which joint attention and the single-temporal
/// factorization cost the same: `N^2 / (N - 1)`.
pub fn crossover_l(n: f64) -> f64 {
    n * n / (n - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheVariant {
    Singles,
    SinglesPlusPairs,
}

pub fn kv_bytes(variant: CacheVariant, n: u64, l: u64, d: u64, layers: u64, bytes: u64) -> u128 {
    let singles = cache_memory_bytes(n, l, d, layers, bytes);
    match variant {
        CacheVariant::Singles => singles,
        CacheVariant::SinglesPlusPairs => singles * (1 + n as u128),
    }
}

/// First `(N, L)` in the grid where joint attention is not strictly cheaper
/// than the single-temporal factorization, restricted to `N >= 4L`.
pub fn regime_violation(n_range: std::ops::RangeInclusive<u64>, l_min: u64, d: u64) -> Option<(u64, u64)> {
    for n in n_range {
        for l in l_min..=n / 4 {
            if flops(Arch::StJoint, n, l, d) >= flops(Arch::PairformerSingleTemporal, n, l, d) {
                return Some((n, l));
            }
        }
    }
    None
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostRow {
    pub n: u64,
    pub l: u64,
    pub st_joint: u128,
    pub pairformer_pair_temporal: u128,
    pub pairformer_single_temporal: u128,
    pub speedup_vs_single: f64,
    pub kv_singles: u128,
    pub kv_singles_plus_pairs: u128,
}

pub fn cost_row(n: u64, l: u64, d: u64, layers: u64, bytes: u64) -> CostRow {
    let st = flops(Arch::StJoint, n, l, d);
    let single = flops(Arch::PairformerSingleTemporal, n, l, d);
    CostRow {
        n,
        l,
        st_joint: st,
        pairformer_pair_temporal: flops(Arch::PairformerPairTemporal, n, l, d),
        pairformer_single_temporal: single,
        speedup_vs_single: single as f64 / st as f64,
        kv_singles: kv_bytes(CacheVariant::Singles, n, l, d, layers, bytes),
        kv_singles_plus_pairs: kv_bytes(CacheVariant::SinglesPlusPairs, n, l, d, layers, bytes),
    }
}

/// Sweeps over protein size at fixed context, context at fixed size, and the
/// full grid for the speedup heatmap.
pub fn cost_sweep(d: u64, layers: u64, bytes: u64) -> Vec<CostRow> {
    let grid: Vec<u64> = (2..=12).map(|k| 1u64 << k).collect();
    let mut rows: Vec<CostRow> = grid.iter().map(|&n| cost_row(n, 80, d, layers, bytes)).collect();
    rows.extend(grid.iter().map(|&l| cost_row(256, l, d, layers, bytes)));
    for &n in &grid {
        for &l in &grid {
            rows.push(cost_row(n, l, d, layers, bytes));
        }
    }
    rows
}

pub fn write_cost_csv<W: Write>(rows: &[CostRow], mut w: W) -> Result<()> {
    writeln!(
        w,
        "n,l,st_joint,pairformer_pair_temporal,pairformer_single_temporal,speedup_vs_single,kv_singles,kv_singles_plus_pairs"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.n,
            r.l,
            r.st_joint,
            r.pairformer_pair_temporal,
            r.pairformer_single_temporal,
            r.speedup_vs_single,
            r.kv_singles,
            r.kv_singles_plus_pairs
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(flops(Arch::StJoint, 2, 2, 1), 16);
        let ratio = flops(Arch::PairformerSingleTemporal, 512, 64, 1) as f64 / flops(Arch::StJoint, 512, 64, 1) as f64;
        assert!((ratio - (8.0 + 1.0 / 512.0)).abs() < 1e-12);
        for n in [3u64, 10, 100] {
            let r = flops(Arch::PairformerSingleTemporal, n, n, 7) as f64 / flops(Arch::StJoint, n, n, 7) as f64;
            assert!((r - (1.0 + 1.0 / n as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn crossover_examples() {
        assert_eq!(crossover_l(2.0), 4.0);
        assert!((crossover_l(100.0) - 10000.0 / 99.0).abs() < 1e-12);
        assert!((crossover_l(1e6) / 1e6 - 1.0).abs() < 1e-5);
        // both costs agree at the crossover
        for n in [2.0f64, 5.0, 37.0] {
            let l = crossover_l(n);
            let st = n * n * l * l;
            let single = n.powi(3) * l + n * l * l;
            assert!((st - single).abs() / st < 1e-12);
        }
    }

    #[test]
    fn cache_ratio_is_exact() {
        for n in [1u64, 7, 100, 2048] {
            let s = kv_bytes(CacheVariant::Singles, n, 64, 384, 12, 2);
            let p = kv_bytes(CacheVariant::SinglesPlusPairs, n, 64, 384, 12, 2);
            assert_eq!(s * (1 + n as u128), p);
        }
    }

    #[test]
    fn sweep_rows_and_csv() {
        let rows = cost_sweep(128, 4, 2);
        assert_eq!(rows.len(), 11 + 11 + 121);
        let mut out = Vec::new();
        write_cost_csv(&rows, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), rows.len() + 1);
    }

    proptest::proptest! {
        #[test]
        fn joint_wins_below_crossover(n in 2u64..3000, frac in 0.01f64..0.99) {
            let l = ((crossover_l(n as f64) * frac).floor() as u64).max(1);
            proptest::prop_assume!((l as f64) < crossover_l(n as f64));
            proptest::prop_assert!(flops(Arch::StJoint, n, l, 1) < flops(Arch::PairformerSingleTemporal, n, l, 1));
        }

        #[test]
        fn pair_temporal_never_cheaper(n in 1u64..500, l in 1u64..500) {
            proptest::prop_assert!(flops(Arch::PairformerPairTemporal, n, l, 2) >= flops(Arch::PairformerSingleTemporal, n, l, 2));
        }
    }
}
