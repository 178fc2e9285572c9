//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every node holds a 2-D value; parameters are windows into one flat
//! parameter vector so gradients come back in the same layout.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::se3::Mat3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which keys each query may attend to, and where its pair bias lives.
#[derive(Debug)]
pub struct AttentionLayout {
    pub queries: usize,
    /// Keys from outside the tape (cache) followed by the segment keys.
    pub keys: usize,
    pub allowed: Vec<bool>,
    /// Row into the bias column for each (query, key), `u32::MAX` for none.
    pub bias_index: Vec<u32>,
}

impl AttentionLayout {
    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }
}

/// Per-row rotary tables: `cos`/`sin` for every rotated column pair.
#[derive(Debug)]
pub struct RopeTable {
    /// `(column a, column b)` pairs rotated together.
    pub pairs: Vec<(usize, usize)>,
    /// `rows x pairs`
    pub cos: Array2<f64>,
    pub sin: Array2<f64>,
}

impl RopeTable {
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for r in 0..x.nrows() {
            for (p, &(a, b)) in self.pairs.iter().enumerate() {
                let (c, s) = (self.cos[[r, p]], self.sin[[r, p]]);
                let (xa, xb) = (x[[r, a]], x[[r, b]]);
                out[[r, a]] = c * xa - s * xb;
                out[[r, b]] = s * xa + c * xb;
            }
        }
        out
    }

    fn apply_transpose(&self, g: &Array2<f64>) -> Array2<f64> {
        let mut out = g.clone();
        for r in 0..g.nrows() {
            for (p, &(a, b)) in self.pairs.iter().enumerate() {
                let (c, s) = (self.cos[[r, p]], self.sin[[r, p]]);
                let (ga, gb) = (g[[r, a]], g[[r, b]]);
                out[[r, a]] = c * ga + s * gb;
                out[[r, b]] = -s * ga + c * gb;
            }
        }
        out
    }
}

enum Op {
    Leaf,
    Param { offset: usize },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    ScaleRows(Var, Rc<Vec<f64>>),
    Silu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    GatherRows(Var, Rc<Vec<usize>>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Rope(Var, Rc<RopeTable>),
    RotateRows(Var, Rc<Vec<Mat3>>),
    Attention(Box<AttentionNode>),
}

struct AttentionNode {
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    prefix_k: Rc<Array2<f64>>,
    prefix_v: Rc<Array2<f64>>,
    layout: Rc<AttentionLayout>,
    scale: f64,
    probs: Array2<f64>,
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-10;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `rows x cols` window of the flat parameter vector starting at `offset`.
    pub fn param(&mut self, flat: &[f64], offset: usize, rows: usize, cols: usize) -> Var {
        let value = Array2::from_shape_vec((rows, cols), flat[offset..offset + rows * cols].to_vec())
            .expect("parameter window shape");
        self.push(value, Op::Param { offset })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a + b` with `b` a single row broadcast over `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + &self.value(b).row(0);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: Rc<Vec<f64>>) -> Var {
        let mut v = self.value(a).clone();
        for (mut row, f) in v.axis_iter_mut(Axis(0)).zip(factors.iter()) {
            row *= *f;
        }
        self.push(v, Op::ScaleRows(a, factors))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(silu);
        self.push(v, Op::Silu(a))
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in out.axis_iter_mut(Axis(0)) {
            let mean = row.sum() / cols;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= is;
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Var {
        let v = self.value(a).select(Axis(0), &index);
        self.push(v, Op::GatherRows(a, index))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat rows must agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn rope(&mut self, a: Var, table: Rc<RopeTable>) -> Var {
        let v = table.apply(self.value(a));
        self.push(v, Op::Rope(a, table))
    }

    /// Row `r` (a 3-vector) mapped by `rotations[r]`.
    pub fn rotate_rows(&mut self, a: Var, rotations: Rc<Vec<Mat3>>) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros(x.raw_dim());
        for (r, m) in rotations.iter().enumerate() {
            for i in 0..3 {
                v[[r, i]] = (0..3).map(|j| m[(i, j)] * x[[r, j]]).sum();
            }
        }
        self.push(v, Op::RotateRows(a, rotations))
    }

    /// Masked softmax attention for one head.
    ///
    /// Keys/values are `prefix` (constants) stacked over `k`/`v`; `bias` is a
    /// column added to logits through `layout.bias_index`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        prefix_k: Rc<Array2<f64>>,
        prefix_v: Rc<Array2<f64>>,
        layout: Rc<AttentionLayout>,
    ) -> Result<Var, usize> {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let dh = qv.ncols();
        let scale = 1.0 / (dh as f64).sqrt();
        let np = prefix_k.nrows();
        let tq = qv.nrows();
        let tk = np + kv.nrows();
        debug_assert_eq!(layout.queries, tq);
        debug_assert_eq!(layout.keys, tk);
        let kall = if np > 0 {
            ndarray::concatenate(Axis(0), &[prefix_k.view(), kv.view()]).expect("key dims")
        } else {
            kv.clone()
        };
        let vall = if np > 0 {
            ndarray::concatenate(Axis(0), &[prefix_v.view(), vv.view()]).expect("value dims")
        } else {
            vv.clone()
        };
        let mut logits = qv.dot(&kall.t()) * scale;
        let bias_col = bias.map(|b| self.value(b).column(0).to_owned());
        let mut probs = Array2::zeros((tq, tk));
        for r in 0..tq {
            let mut max = f64::NEG_INFINITY;
            for c in 0..tk {
                if layout.allowed[r * tk + c] {
                    if let Some(bc) = &bias_col {
                        let bi = layout.bias_index[r * tk + c];
                        if bi != u32::MAX {
                            logits[[r, c]] += bc[bi as usize];
                        }
                    }
                    max = max.max(logits[[r, c]]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(r);
            }
            let mut z = 0.0;
            for c in 0..tk {
                if layout.allowed[r * tk + c] {
                    let e = (logits[[r, c]] - max).exp();
                    probs[[r, c]] = e;
                    z += e;
                }
            }
            probs.row_mut(r).mapv_inplace(|p| p / z);
        }
        let out = probs.dot(&vall);
        let node = AttentionNode { q, k, v, bias, prefix_k, prefix_v, layout, scale, probs };
        Ok(self.push(out, Op::Attention(Box::new(node))))
    }

    /// Back-propagates `seeds` and returns the gradient of every parameter
    /// in the flat layout (length `n_params`) plus gradients of requested leaves.
    pub fn backward(&self, seeds: &[(Var, Array2<f64>)], n_params: usize) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads[v.0], g.clone());
        }
        let mut params = vec![0.0; n_params];
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Param { offset } => {
                    for (k, v) in g.iter().enumerate() {
                        params[offset + k] += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[b.0], gb);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::ScaleRows(a, f) => {
                    let mut ga = g;
                    for (mut row, s) in ga.axis_iter_mut(Axis(0)).zip(f.iter()) {
                        row *= *s;
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    ga.zip_mut_with(x, |gv, &xv| {
                        let s = 1.0 / (1.0 + (-xv).exp());
                        *gv *= s * (1.0 + xv * (1.0 - s));
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let cols = y.ncols() as f64;
                    let mut gx = g;
                    for (r, mut row) in gx.axis_iter_mut(Axis(0)).enumerate() {
                        let yr = y.row(r);
                        let mean_g = row.sum() / cols;
                        let mean_gy = row.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                        let is = inv_std[r];
                        for (gv, yv) in row.iter_mut().zip(yr.iter()) {
                            *gv = is * (*gv - mean_g - yv * mean_gy);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::GatherRows(a, index) => {
                    let src = self.value(*a);
                    let mut ga = Array2::zeros(src.raw_dim());
                    for (r, &i) in index.iter().enumerate() {
                        let mut dst = ga.row_mut(i);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let mut gx = Array2::zeros(src.raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&mut grads[p.0], g.slice(s![.., c..c + w]).to_owned());
                        c += w;
                    }
                }
                Op::Rope(a, table) => {
                    accumulate(&mut grads[a.0], table.apply_transpose(&g));
                }
                Op::RotateRows(a, rots) => {
                    let mut ga = Array2::zeros(g.raw_dim());
                    for (r, m) in rots.iter().enumerate() {
                        for j in 0..3 {
                            ga[[r, j]] = (0..3).map(|i| m[(i, j)] * g[[r, i]]).sum();
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Attention(att) => {
                    self.attention_backward(att, &g, &mut grads);
                }
            }
        }
        Gradients { params, leaves: grads }
    }

    fn attention_backward(&self, att: &AttentionNode, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let qv = self.value(att.q);
        let kv = self.value(att.k);
        let vv = self.value(att.v);
        let np = att.prefix_k.nrows();
        let kall = if np > 0 {
            ndarray::concatenate(Axis(0), &[att.prefix_k.view(), kv.view()]).expect("key dims")
        } else {
            kv.clone()
        };
        let vall = if np > 0 {
            ndarray::concatenate(Axis(0), &[att.prefix_v.view(), vv.view()]).expect("value dims")
        } else {
            vv.clone()
        };
        let p = &att.probs;
        let dp = g.dot(&vall.t());
        let dvall = p.t().dot(g);
        let mut ds = Array2::zeros(p.raw_dim());
        let tk = p.ncols();
        for r in 0..p.nrows() {
            let dot: f64 = p.row(r).iter().zip(dp.row(r).iter()).map(|(a, b)| a * b).sum();
            for c in 0..tk {
                ds[[r, c]] = p[[r, c]] * (dp[[r, c]] - dot);
            }
        }
        if let Some(b) = att.bias {
            let mut gb = Array2::zeros(self.value(b).raw_dim());
            for r in 0..p.nrows() {
                for c in 0..tk {
                    let bi = att.layout.bias_index[r * tk + c];
                    if bi != u32::MAX && att.layout.allowed[r * tk + c] {
                        gb[[bi as usize, 0]] += ds[[r, c]];
                    }
                }
            }
            accumulate(&mut grads[b.0], gb);
        }
        let dq = ds.dot(&kall) * att.scale;
        let dkall = ds.t().dot(qv) * att.scale;
        accumulate(&mut grads[att.q.0], dq);
        accumulate(&mut grads[att.k.0], dkall.slice(s![np.., ..]).to_owned());
        accumulate(&mut grads[att.v.0], dvall.slice(s![np.., ..]).to_owned());
    }
}

pub struct Gradients {
    pub params: Vec<f64>,
    leaves: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient reaching a leaf node, if any flowed to it.
    pub fn leaf(&self, v: Var) -> Option<&Array2<f64>> {
        self.leaves[v.0].as_ref()
    }
}
