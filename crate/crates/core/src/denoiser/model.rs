use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::se3::{FrameSet, Mat3, Vec3};
use crate::tape::{AttentionLayout, Tape, Var};

use super::{features, rope, DenoiserParams};

/// One trajectory frame presented to the network.
#[derive(Debug, Clone)]
pub struct Slot {
    /// Coordinates in Å.
    pub frames: FrameSet,
    pub tau: f64,
    pub dt_ns: f64,
    /// Temporal position used by the frame half of the rotary embedding.
    pub frame_index: usize,
    /// Whether scores are read out for this slot.
    pub target: bool,
}

/// Frame-level attention pattern; every residue of slot `q` sees every
/// residue of slot `k` when `allows(q, k)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    slots: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(slots: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != slots * slots {
            return Err(Error::InvalidArgument(format!(
                "mask has {} entries for {slots} slots",
                allowed.len()
            )));
        }
        Ok(Self { slots, allowed })
    }

    pub fn from_fn(slots: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..slots * slots).map(|k| f(k / slots, k % slots)).collect();
        Self { slots, allowed }
    }

    pub fn full(slots: usize) -> Self {
        Self::from_fn(slots, |_, _| true)
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.slots + k]
    }

    /// Slot-level pairs `(q, k)` that are allowed.
    pub fn allowed_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.slots)
            .flat_map(|q| (0..self.slots).map(move |k| (q, k)))
            .filter(|&(q, k)| self.allows(q, k))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub slots: Vec<Slot>,
    pub mask: AttentionMask,
}

/// Pre-rotation keys and values of committed frames, one pair per attention layer.
#[derive(Debug, Clone)]
pub struct KvCache {
    residues: usize,
    model_dim: usize,
    frame_indices: Vec<usize>,
    ctx_taus: Vec<f64>,
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    /// Rotated per-head prefixes, rebuilt after each append.
    prepared: RefCell<Option<(PrefixKey, Rc<HeadPrefixes>)>>,
}

type PrefixKey = (usize, bool, u64);
/// `[layer][head] -> (rotated keys, values)`.
type HeadPrefixes = Vec<Vec<(Rc<Array2<f64>>, Rc<Array2<f64>>)>>;

impl KvCache {
    pub fn new(residues: usize, layers: usize, model_dim: usize) -> Self {
        Self {
            residues,
            model_dim,
            frame_indices: Vec::new(),
            ctx_taus: Vec::new(),
            keys: vec![Array2::zeros((0, model_dim)); layers],
            values: vec![Array2::zeros((0, model_dim)); layers],
            prepared: RefCell::new(None),
        }
    }

    pub fn residues(&self) -> usize {
        self.residues
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn committed_frames(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn ctx_taus(&self) -> &[f64] {
        &self.ctx_taus
    }

    pub fn frame_indices(&self) -> &[usize] {
        &self.frame_indices
    }

    /// Cached token rows summed over layers.
    pub fn entries(&self) -> usize {
        self.keys.iter().map(|k| k.nrows()).sum()
    }

    /// Logical size of stored keys plus values.
    pub fn logical_bytes(&self, bytes_per_scalar: usize) -> u128 {
        self.keys
            .iter()
            .chain(&self.values)
            .map(|m| (m.len() * bytes_per_scalar) as u128)
            .sum()
    }

    fn positions(&self) -> Vec<(usize, usize)> {
        self.frame_indices.iter().flat_map(|&l| (0..self.residues).map(move |i| (i, l))).collect()
    }

    fn head_prefixes(&self, heads: usize, two_axis: bool, base: f64) -> Rc<HeadPrefixes> {
        let key = (heads, two_axis, base.to_bits());
        if let Some((k, p)) = &*self.prepared.borrow() {
            if *k == key {
                return p.clone();
            }
        }
        let d = self.model_dim;
        let dh = d / heads;
        let table = rope::table(d, heads, two_axis, base, &self.positions());
        let prefixes: HeadPrefixes = self
            .keys
            .iter()
            .zip(&self.values)
            .map(|(k, v)| {
                let kr = table.apply(k);
                (0..heads)
                    .map(|h| {
                        let cols = h * dh..(h + 1) * dh;
                        (
                            Rc::new(kr.slice(s![.., cols.clone()]).to_owned()),
                            Rc::new(v.slice(s![.., cols]).to_owned()),
                        )
                    })
                    .collect()
            })
            .collect();
        let p = Rc::new(prefixes);
        *self.prepared.borrow_mut() = Some((key, p.clone()));
        p
    }

    /// Appends one committed frame from the per-layer K/V of a single-slot pass.
    pub fn append(&mut self, kv: &[(Array2<f64>, Array2<f64>)], frame_index: usize, ctx_tau: f64) -> Result<()> {
        if kv.len() != self.keys.len() {
            return Err(Error::InvalidArgument(format!("{} layers for a {}-layer cache", kv.len(), self.keys.len())));
        }
        for (layer, (k, v)) in kv.iter().enumerate() {
            if k.nrows() != self.residues || k.ncols() != self.model_dim || v.raw_dim() != k.raw_dim() {
                return Err(Error::ResidueMismatch(self.residues, k.nrows()));
            }
            self.keys[layer].append(Axis(0), k.view()).expect("matching columns");
            self.values[layer].append(Axis(0), v.view()).expect("matching columns");
        }
        self.frame_indices.push(frame_index);
        self.ctx_taus.push(ctx_tau);
        self.prepared.borrow_mut().take();
        Ok(())
    }
}

pub struct ForwardOutput {
    /// Translation scores for target slots, rows `target_index * N + i`.
    pub translation: Option<Var>,
    /// Rotation scores in each residue's local tangent space.
    pub rotation: Option<Var>,
    pub target_slots: Vec<usize>,
    /// Pre-rotation keys and values for every segment token, per attention layer.
    pub layer_kv: Vec<(Array2<f64>, Array2<f64>)>,
    pub residues: usize,
}

fn rows_to_vecs(m: &Array2<f64>) -> Vec<Vec3> {
    m.axis_iter(Axis(0)).map(|r| Vec3::new(r[0], r[1], r[2])).collect()
}

impl ForwardOutput {
    /// `(translation, rotation)` per target slot.
    pub fn scores(&self, tape: &Tape) -> Vec<(Vec<Vec3>, Vec<Vec3>)> {
        let (Some(t), Some(r)) = (self.translation, self.rotation) else { return Vec::new() };
        let tv = rows_to_vecs(tape.value(t));
        let rv = rows_to_vecs(tape.value(r));
        let n = self.residues;
        (0..self.target_slots.len())
            .map(|k| (tv[k * n..(k + 1) * n].to_vec(), rv[k * n..(k + 1) * n].to_vec()))
            .collect()
    }

    /// Segment K/V rows of slot `slot` only, in cache layout.
    pub fn slot_kv(&self, slot: usize) -> Vec<(Array2<f64>, Array2<f64>)> {
        let n = self.residues;
        self.layer_kv
            .iter()
            .map(|(k, v)| {
                (
                    k.slice(s![slot * n..(slot + 1) * n, ..]).to_owned(),
                    v.slice(s![slot * n..(slot + 1) * n, ..]).to_owned(),
                )
            })
            .collect()
    }
}

struct Weights {
    vars: HashMap<String, Var>,
}

impl Weights {
    fn load(tape: &mut Tape, params: &DenoiserParams) -> Self {
        let vars = params
            .layout
            .entries
            .iter()
            .map(|e| (e.name.clone(), tape.param(&params.values, e.offset, e.rows, e.cols)))
            .collect();
        Self { vars }
    }

    fn get(&self, name: &str) -> Var {
        self.vars[name]
    }
}

/// Layer norm followed by `x * (1 + scale) + shift`.
pub fn adaln(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Var {
    let h = tape.layer_norm(x);
    let hs = tape.mul(h, scale);
    let h = tape.add(h, hs);
    tape.add(h, shift)
}

/// `z_ij + MLP([s_i + s_j, s_i * s_j, z_ij])`, symmetric in `(i, j)` when `z` is.
///
/// `weights` are `(w1, b1, w2, b2)`.
pub fn edge_transition(
    tape: &mut Tape,
    z: Var,
    singles: Var,
    index_i: Rc<Vec<usize>>,
    index_j: Rc<Vec<usize>>,
    weights: (Var, Var, Var, Var),
) -> Var {
    let (w1, b1, w2, b2) = weights;
    let si = tape.gather_rows(singles, index_i);
    let sj = tape.gather_rows(singles, index_j);
    let sum = tape.add(si, sj);
    let prod = tape.mul(si, sj);
    let inp = tape.concat_cols(&[sum, prod, z]);
    let h = tape.matmul(inp, w1);
    let h = tape.add_row(h, b1);
    let h = tape.silu(h);
    let u = tape.matmul(h, w2);
    let u = tape.add_row(u, b2);
    tape.add(z, u)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Var {
    let y = tape.matmul(x, w);
    match b {
        Some(b) => tape.add_row(y, b),
        None => y,
    }
}

fn validate(params: &DenoiserParams, segment: &Segment, cache: Option<&KvCache>) -> Result<usize> {
    let Some(first) = segment.slots.first() else {
        return Err(Error::InvalidArgument("segment has no slots".into()));
    };
    let n = first.frames.residue_count();
    for s in &segment.slots {
        if s.frames.residue_count() != n {
            return Err(Error::ResidueMismatch(n, s.frames.residue_count()));
        }
        if !(0.0..=1.0).contains(&s.tau) {
            return Err(Error::TimeOutOfRange(s.tau));
        }
        if !(s.dt_ns > 0.0) || !s.dt_ns.is_finite() {
            return Err(Error::InvalidArgument(format!("stride {} ns must be positive", s.dt_ns)));
        }
    }
    if segment.mask.slots() != segment.slots.len() {
        return Err(Error::InvalidArgument(format!(
            "mask covers {} slots, segment has {}",
            segment.mask.slots(),
            segment.slots.len()
        )));
    }
    if let Some(c) = cache {
        if c.residues() != n {
            return Err(Error::ResidueMismatch(n, c.residues()));
        }
        if c.layers() != params.config.attention_layers() || c.model_dim != params.config.model_dim {
            return Err(Error::InvalidArgument("cache shape does not match the model".into()));
        }
    }
    Ok(n)
}

/// Runs the denoiser on a segment, attending additionally to `cache`.
///
/// Scores are produced in internal (scaled) translation units for every
/// target slot: translations as `R_i local / sqrt(1 - alpha)`, rotations as
/// `local / sigma`.
pub fn forward(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    segment: &Segment,
    cache: Option<&KvCache>,
    tape: &mut Tape,
) -> Result<ForwardOutput> {
    let n = validate(params, segment, cache)?;
    let cfg = &params.config;
    let d = cfg.model_dim;
    let dh = cfg.head_dim();
    let slots = &segment.slots;
    let ns = slots.len();
    let t_tokens = ns * n;
    let n_pairs = n * n;

    let mut single_raw = Array2::zeros((t_tokens, features::single_width(cfg.knn)));
    let mut pair_raw = Array2::zeros((ns * n_pairs, features::PAIR_WIDTH));
    let mut cond_raw = Array2::zeros((ns, features::COND_WIDTH));
    for (k, slot) in slots.iter().enumerate() {
        single_raw.slice_mut(s![k * n..(k + 1) * n, ..]).assign(&features::single_features(&slot.frames, cfg.knn));
        pair_raw
            .slice_mut(s![k * n_pairs..(k + 1) * n_pairs, ..])
            .assign(&features::pair_features(&slot.frames));
        let c = features::conditioning_features(slot.tau, slot.dt_ns);
        cond_raw.row_mut(k).assign(&ndarray::ArrayView1::from(&c[..]));
    }

    let slot_of_token: Rc<Vec<usize>> = Rc::new((0..t_tokens).map(|t| t / n).collect());
    let pair_i: Rc<Vec<usize>> = Rc::new((0..ns * n_pairs).map(|p| (p / n_pairs) * n + (p % n_pairs) / n).collect());
    let pair_j: Rc<Vec<usize>> = Rc::new((0..ns * n_pairs).map(|p| (p / n_pairs) * n + p % n).collect());

    let n_cache = cache.map_or(0, |c| c.committed_frames() * n);
    let keys = n_cache + t_tokens;
    let mut allowed = vec![false; t_tokens * keys];
    let mut bias_index = vec![u32::MAX; t_tokens * keys];
    for q in 0..t_tokens {
        let sq = q / n;
        let row = q * keys;
        allowed[row..row + n_cache].fill(true);
        for k in 0..t_tokens {
            let sk = k / n;
            if segment.mask.allows(sq, sk) {
                allowed[row + n_cache + k] = true;
                if sq == sk {
                    bias_index[row + n_cache + k] = (sq * n_pairs + (q % n) * n + k % n) as u32;
                }
            }
        }
        if !allowed[row..row + keys].iter().any(|&a| a) {
            return Err(Error::EmptyAttentionRow(q));
        }
    }
    let layout = Rc::new(AttentionLayout { queries: t_tokens, keys, allowed, bias_index });

    let seg_positions: Vec<(usize, usize)> =
        (0..t_tokens).map(|t| (t % n, slots[t / n].frame_index)).collect();
    let seg_rope = Rc::new(rope::table(d, cfg.heads, cfg.rope_2d, cfg.rope_base, &seg_positions));
    let prefixes = cache.map(|c| c.head_prefixes(cfg.heads, cfg.rope_2d, cfg.rope_base));
    let empty = Rc::new(Array2::zeros((0, dh)));

    let w = Weights::load(tape, params);
    let single_in = tape.leaf(single_raw);
    let pair_in = tape.leaf(pair_raw);
    let cond_in = tape.leaf(cond_raw);
    let mut s = linear(tape, single_in, w.get("embed.single.w"), Some(w.get("embed.single.b")));
    let mut z = linear(tape, pair_in, w.get("embed.pair.w"), Some(w.get("embed.pair.b")));
    let c = linear(tape, cond_in, w.get("cond.w"), Some(w.get("cond.b")));
    let c = tape.silu(c);

    let target_slots: Vec<usize> = (0..ns).filter(|&k| slots[k].target).collect();
    let target_tokens: Rc<Vec<usize>> =
        Rc::new(target_slots.iter().flat_map(|&k| k * n..(k + 1) * n).collect());

    let mut layer_kv = Vec::with_capacity(cfg.attention_layers());
    let mut head_sum: Option<Var> = None;
    for b in 0..cfg.blocks {
        for l in 0..cfg.st_layers {
            let layer = b * cfg.st_layers + l;
            let p = format!("block{b}.layer{l}");
            let m = linear(tape, c, w.get(&format!("{p}.mod.w")), Some(w.get(&format!("{p}.mod.b"))));
            let m = tape.gather_rows(m, slot_of_token.clone());
            let part = |tape: &mut Tape, k: usize| tape.slice_cols(m, k * d, d);
            let (shift1, scale1, gate1) = (part(tape, 0), part(tape, 1), part(tape, 2));
            let (shift2, scale2, gate2) = (part(tape, 3), part(tape, 4), part(tape, 5));

            let h = adaln(tape, s, shift1, scale1);
            let q = tape.matmul(h, w.get(&format!("{p}.q")));
            let k = tape.matmul(h, w.get(&format!("{p}.k")));
            let v = tape.matmul(h, w.get(&format!("{p}.v")));
            layer_kv.push((tape.value(k).clone(), tape.value(v).clone()));
            let qr = tape.rope(q, seg_rope.clone());
            let kr = tape.rope(k, seg_rope.clone());
            let bias_all = cfg.pair_bias.then(|| tape.matmul(z, w.get(&format!("{p}.pair_bias"))));
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let cols = hd * dh..(hd + 1) * dh;
                let qh = tape.slice_cols(qr, cols.start, dh);
                let kh = tape.slice_cols(kr, cols.start, dh);
                let vh = tape.slice_cols(v, cols.start, dh);
                let bh = bias_all.map(|ba| tape.slice_cols(ba, hd, 1));
                let (pk, pv) = match &prefixes {
                    Some(p) => p[layer][hd].clone(),
                    None => (empty.clone(), empty.clone()),
                };
                let out = tape.attention(qh, kh, vh, bh, pk, pv, layout.clone()).map_err(Error::EmptyAttentionRow)?;
                heads.push(out);
            }
            let att = tape.concat_cols(&heads);
            let o = tape.matmul(att, w.get(&format!("{p}.o")));
            let o = tape.mul(gate1, o);
            s = tape.add(s, o);

            let h2 = adaln(tape, s, shift2, scale2);
            let f = linear(tape, h2, w.get(&format!("{p}.ffn.w1")), Some(w.get(&format!("{p}.ffn.b1"))));
            let f = tape.silu(f);
            let f = linear(tape, f, w.get(&format!("{p}.ffn.w2")), Some(w.get(&format!("{p}.ffn.b2"))));
            let f = tape.mul(gate2, f);
            s = tape.add(s, f);
        }
        let p = format!("block{b}");
        let sn = tape.layer_norm(s);
        let ew = (
            w.get(&format!("{p}.edge.w1")),
            w.get(&format!("{p}.edge.b1")),
            w.get(&format!("{p}.edge.w2")),
            w.get(&format!("{p}.edge.b2")),
        );
        z = edge_transition(tape, z, sn, pair_i.clone(), pair_j.clone(), ew);
        if !target_tokens.is_empty() {
            let st = tape.gather_rows(sn, target_tokens.clone());
            let out = linear(tape, st, w.get(&format!("{p}.head.w")), Some(w.get(&format!("{p}.head.b"))));
            head_sum = Some(match head_sum {
                Some(acc) => tape.add(acc, out),
                None => out,
            });
        }
    }

    let (translation, rotation) = match head_sum {
        Some(out) => {
            let mut rots: Vec<Mat3> = Vec::with_capacity(target_tokens.len());
            let mut t_scale = Vec::with_capacity(target_tokens.len());
            let mut r_scale = Vec::with_capacity(target_tokens.len());
            for &k in &target_slots {
                let slot = &slots[k];
                let var = 1.0 - schedule.alpha_bar(slot.tau)?;
                if !(var > 0.0) {
                    return Err(Error::InvalidArgument(format!("target slot at tau={} carries no noise", slot.tau)));
                }
                let sigma = schedule.sigma(slot.tau)?;
                for f in slot.frames.frames() {
                    rots.push(f.rotation.to_matrix());
                    t_scale.push(1.0 / var.sqrt());
                    r_scale.push(1.0 / sigma);
                }
            }
            let local_t = tape.slice_cols(out, 0, 3);
            let global_t = tape.rotate_rows(local_t, Rc::new(rots));
            let trans = tape.scale_rows(global_t, Rc::new(t_scale));
            let local_r = tape.slice_cols(out, 3, 3);
            let rot = tape.scale_rows(local_r, Rc::new(r_scale));
            (Some(trans), Some(rot))
        }
        None => (None, None),
    };
    Ok(ForwardOutput { translation, rotation, target_slots, layer_kv, residues: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::se3::{RigidFrame, Rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig { model_dim: 16, heads: 2, st_layers: 1, blocks: 2, pair_dim: 4, ..Default::default() }
    }

    fn chain(rng: &mut ChaCha8Rng, n: usize) -> FrameSet {
        FrameSet::new(
            (0..n)
                .map(|i| {
                    let jitter = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    RigidFrame::new(Rotation::random(rng), Vec3::new(3.8 * i as f64, 0.0, 0.0) + jitter)
                })
                .collect(),
        )
        .unwrap()
    }

    fn segment(frames: Vec<FrameSet>, causal: bool) -> Segment {
        let l = frames.len();
        let slots = frames
            .into_iter()
            .enumerate()
            .map(|(k, f)| Slot { frames: f, tau: 0.3 + 0.1 * k as f64, dt_ns: 0.05, frame_index: k, target: true })
            .collect();
        let mask = if causal { AttentionMask::from_fn(l, |q, k| k <= q) } else { AttentionMask::full(l) };
        Segment { slots, mask }
    }

    fn run(params: &DenoiserParams, seg: &Segment) -> Vec<(Vec<Vec3>, Vec<Vec3>)> {
        let mut tape = Tape::new();
        let out = forward(params, &NoiseSchedule::default(), seg, None, &mut tape).unwrap();
        out.scores(&tape)
    }

    #[test]
    fn zero_head_gives_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = DenoiserParams::random(small_config(), 1.0, &mut rng).unwrap();
        for e in p.layout.entries.clone() {
            if e.role == super::super::ParamRole::Head {
                p.values[e.offset..e.offset + e.len()].fill(0.0);
            }
        }
        let seg = segment(vec![chain(&mut rng, 5)], false);
        for (t, r) in run(&p, &seg) {
            assert!(t.iter().chain(&r).all(|v| v.norm() == 0.0));
        }
    }

    #[test]
    fn rigid_motion_rotates_translation_scores_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = DenoiserParams::random(small_config(), 1.0, &mut rng).unwrap();
        let frames = vec![chain(&mut rng, 6), chain(&mut rng, 6)];
        let g = RigidFrame::new(Rotation::random(&mut rng), Vec3::new(5.0, -3.0, 12.0));
        let moved = frames.iter().map(|f| f.transformed(&g)).collect();
        let a = run(&p, &segment(frames, true));
        let b = run(&p, &segment(moved, true));
        for ((ta, ra), (tb, rb)) in a.iter().zip(&b) {
            for i in 0..ta.len() {
                assert!((g.rotation.apply(&ta[i]) - tb[i]).norm() < 1e-8);
                assert!((ra[i] - rb[i]).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn causal_mask_hides_later_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = DenoiserParams::random(small_config(), 1.0, &mut rng).unwrap();
        let frames = vec![chain(&mut rng, 4), chain(&mut rng, 4), chain(&mut rng, 4)];
        let mut changed = frames.clone();
        changed[2] = chain(&mut rng, 4);
        let a = run(&p, &segment(frames.clone(), true));
        let b = run(&p, &segment(changed, true));
        for k in 0..2 {
            for i in 0..4 {
                assert!((a[k].0[i] - b[k].0[i]).norm() < 1e-12);
                assert!((a[k].1[i] - b[k].1[i]).norm() < 1e-12);
            }
        }
        assert!((a[2].0[0] - b[2].0[0]).norm() > 0.0);
        // order of history matters
        let swapped = vec![frames[1].clone(), frames[0].clone(), frames[2].clone()];
        let c = run(&p, &segment(swapped, true));
        assert!((a[2].0[0] - c[2].0[0]).norm() > 0.0);
    }

    #[test]
    fn zero_modulation_is_plain_layer_norm() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::from_shape_fn((3, 8), |(r, c)| (r * 8 + c) as f64 * 0.37 - 2.0));
        let zero = tape.leaf(Array2::zeros((3, 8)));
        let y = adaln(&mut tape, x, zero, zero);
        let ln = tape.layer_norm(x);
        assert_eq!(tape.value(y), tape.value(ln));
        for row in tape.value(ln).axis_iter(Axis(0)) {
            let mean = row.sum() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn edge_transition_keeps_symmetry_and_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 4;
        let (d, pd) = (6, 3);
        let mut zs = Array2::zeros((n * n, pd));
        for i in 0..n {
            for j in 0..=i {
                for c in 0..pd {
                    let v = rng.random_range(-1.0..1.0);
                    zs[[i * n + j, c]] = v;
                    zs[[j * n + i, c]] = v;
                }
            }
        }
        let singles = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let idx_i = Rc::new((0..n * n).map(|p| p / n).collect::<Vec<_>>());
        let idx_j = Rc::new((0..n * n).map(|p| p % n).collect::<Vec<_>>());
        let mut tape = Tape::new();
        let z = tape.leaf(zs.clone());
        let s = tape.leaf(singles);
        let w1 = tape.leaf(Array2::from_shape_fn((2 * d + pd, 5), |_| rng.random_range(-1.0..1.0)));
        let b1 = tape.leaf(Array2::from_shape_fn((1, 5), |_| rng.random_range(-1.0..1.0)));
        let w2 = tape.leaf(Array2::from_shape_fn((5, pd), |_| rng.random_range(-1.0..1.0)));
        let b2 = tape.leaf(Array2::from_shape_fn((1, pd), |_| rng.random_range(-1.0..1.0)));
        let out = edge_transition(&mut tape, z, s, idx_i.clone(), idx_j.clone(), (w1, b1, w2, b2));
        let o = tape.value(out);
        for i in 0..n {
            for j in 0..n {
                for c in 0..pd {
                    assert!((o[[i * n + j, c]] - o[[j * n + i, c]]).abs() < 1e-14);
                }
            }
        }
        let w2z = tape.leaf(Array2::zeros((5, pd)));
        let b2z = tape.leaf(Array2::zeros((1, pd)));
        let out = edge_transition(&mut tape, z, s, idx_i, idx_j, (w1, b1, w2z, b2z));
        assert_eq!(tape.value(out), &zs);
    }
}
