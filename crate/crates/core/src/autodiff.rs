//! Tape-based reverse-mode automatic differentiation over [`Mat`] values.
//!
//! The op set is exactly what the denoiser, the uncertainty heads and the
//! loss terms need. Nodes are appended in evaluation order, so a single
//! reverse sweep visits parents after children. All reductions use fixed
//! association orders; results are bit-identical across runs and thread
//! counts. Kernels are deliberately single-threaded: parallelism lives at
//! the chain/shard level where work units are coarse.

use std::collections::HashMap;
use std::sync::Arc;

use crate::tensor::{add_assign, dot, Mat};

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// A named trainable tensor. `data` is shared with tape leaves; the optimizer
/// takes back unique ownership between steps.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Arc<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    ) -> ParamId {
        let name = name.into();
        assert_eq!(rows * cols, data.len(), "param {name}: element count");
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate param name {name}"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            rows,
            cols,
            data: Arc::new(data),
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.params[id.0].data)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Flattened copy of all parameters, in declaration order.
    pub fn get_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(&p.data);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for i in 0..self.params.len() {
            let n = self.params[i].data.len();
            Arc::make_mut(&mut self.params[i].data).copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// Per-parameter gradient accumulators, indexed like the [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub by_param: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            by_param: params
                .params
                .iter()
                .map(|p| vec![0.0; p.data.len()])
                .collect(),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.by_param.iter_mut().zip(&other.by_param) {
            add_assign(a, b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.by_param {
            for v in g.iter_mut() {
                *v *= k;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.by_param {
            out.extend_from_slice(g);
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Storage {
    Owned(Vec<f64>),
    Shared(Arc<Vec<f64>>),
}

impl Storage {
    #[inline]
    fn slice(&self) -> &[f64] {
        match self {
            Storage::Owned(v) => v,
            Storage::Shared(a) => a,
        }
    }
}

#[derive(Debug, Clone)]
#[allow(dead_code)] // variant payloads are read through Debug and kept for symmetry
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        a: Var,
        w: Var,
        bias: Var,
    },
    AddBias {
        a: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        k: f64,
    },
    AddScalar {
        a: Var,
        k: f64,
    },
    Gelu {
        a: Var,
        saved_tanh: Vec<f64>,
    },
    Sigmoid {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Square {
        a: Var,
    },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    BuildSeq {
        time: Var,
        toks: Var,
        per: usize,
    },
    DataRows {
        a: Var,
        per: usize,
    },
    RepeatRows {
        a: Var,
        times: usize,
    },
    RowMean {
        a: Var,
    },
    MeanAll {
        a: Var,
    },
    Detach {
        a: Var,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Storage,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, data: Storage, op: Op) -> Var {
        self.nodes.push(Node {
            rows,
            cols,
            data,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn values(&self, v: Var) -> &[f64] {
        self.nodes[v.0].data.slice()
    }

    pub fn value_mat(&self, v: Var) -> Mat {
        let n = &self.nodes[v.0];
        Mat::from_vec(n.rows, n.cols, n.data.slice().to_vec())
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.slice().len(), 1);
        self.nodes[v.0].data.slice()[0]
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(
            m.rows,
            m.cols,
            Storage::Owned(m.data),
            Op::Leaf { param: None },
        )
    }

    /// Trainable leaf sharing the parameter's storage.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let p = params.param(id);
        self.push(
            p.rows,
            p.cols,
            Storage::Shared(Arc::clone(&p.data)),
            Op::Leaf { param: Some(id) },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = (self.rows(a), self.cols(a));
        let (br, bc) = (self.rows(b), self.cols(b));
        assert_eq!(ac, br, "matmul {ar}x{ac} . {br}x{bc}");
        let out = mm_nn(self.values(a), ar, ac, self.values(b), br, bc);
        self.push(ar, bc, Storage::Owned(out), Op::MatMul { a, b })
    }

    /// Fused `a . w + bias`.
    pub fn linear(&mut self, a: Var, w: Var, bias: Var) -> Var {
        let (ar, ac) = (self.rows(a), self.cols(a));
        let (wr, wc) = (self.rows(w), self.cols(w));
        assert_eq!(ac, wr, "linear {ar}x{ac} . {wr}x{wc}");
        assert_eq!(self.rows(bias), 1);
        assert_eq!(self.cols(bias), wc);
        let mut out = mm_nn(self.values(a), ar, ac, self.values(w), wr, wc);
        let b = self.values(bias);
        for row in out.chunks_mut(wc) {
            add_assign(row, b);
        }
        self.push(ar, wc, Storage::Owned(out), Op::Linear { a, w, bias })
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!(self.rows(bias), 1);
        assert_eq!(self.cols(bias), c);
        let mut data = self.values(a).to_vec();
        let b = self.values(bias);
        for row in data.chunks_mut(c) {
            add_assign(row, b);
        }
        self.push(r, c, Storage::Owned(data), Op::AddBias { a, bias })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!(r, self.rows(b), "binary op rows");
        assert_eq!(c, self.cols(b), "binary op cols");
        let data: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(r, c, Storage::Owned(data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let data: Vec<f64> = self.values(a).iter().map(|&x| f(x)).collect();
        self.push(r, c, Storage::Owned(data), op)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale { a, k })
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar { a, k })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let av = self.values(a);
        let mut saved_tanh = vec![0.0; av.len()];
        let data: Vec<f64> = av
            .iter()
            .zip(saved_tanh.iter_mut())
            .map(|(&x, t)| {
                *t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * x * (1.0 + *t)
            })
            .collect();
        self.push(r, c, Storage::Owned(data), Op::Gelu { a, saved_tanh })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square { a })
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!(self.cols(gain), c);
        assert_eq!(self.cols(bias), c);
        let g = self.values(gain).to_vec();
        let b = self.values(bias).to_vec();
        let mut data = self.values(a).to_vec();
        for row in data.chunks_mut(c) {
            let (xhat, _sigma) = ln_row(row);
            for j in 0..c {
                row[j] = g[j] * xhat[j] + b[j];
            }
        }
        self.push(r, c, Storage::Owned(data), Op::LayerNorm { a, gain, bias })
    }

    /// Multi-head self-attention over `batch` independent sequences of
    /// `seq` tokens laid out sample-major in the row dimension.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Var {
        let (r, c) = (self.rows(q), self.cols(q));
        assert_eq!(r, batch * seq, "attention rows");
        assert_eq!(c % heads, 0, "head split");
        assert_eq!(self.rows(k), r);
        assert_eq!(self.rows(v), r);
        let out = attention_forward(
            self.values(q),
            self.values(k),
            self.values(v),
            batch,
            seq,
            heads,
            c,
        );
        self.push(
            r,
            c,
            Storage::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
            },
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (r, ca) = (self.rows(a), self.cols(a));
        let cb = self.cols(b);
        assert_eq!(r, self.rows(b), "concat rows");
        let av = self.values(a);
        let bv = self.values(b);
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        self.push(r, ca + cb, Storage::Owned(data), Op::ConcatCols { a, b })
    }

    /// Interleave one time token per sample in front of its `per` data tokens.
    pub fn build_seq(&mut self, time: Var, toks: Var, per: usize) -> Var {
        let batch = self.rows(time);
        let c = self.cols(time);
        assert_eq!(self.cols(toks), c);
        assert_eq!(self.rows(toks), batch * per);
        let tv = self.values(time);
        let kv = self.values(toks);
        let mut data = Vec::with_capacity(batch * (per + 1) * c);
        for s in 0..batch {
            data.extend_from_slice(&tv[s * c..(s + 1) * c]);
            data.extend_from_slice(&kv[s * per * c..(s + 1) * per * c]);
        }
        self.push(
            batch * (per + 1),
            c,
            Storage::Owned(data),
            Op::BuildSeq { time, toks, per },
        )
    }

    /// Drop each sample's time token, keeping the `per` data token rows.
    pub fn data_rows(&mut self, a: Var, per: usize) -> Var {
        let c = self.cols(a);
        let rows = self.rows(a);
        assert_eq!(rows % (per + 1), 0, "data_rows layout");
        let batch = rows / (per + 1);
        let av = self.values(a);
        let mut data = Vec::with_capacity(batch * per * c);
        for s in 0..batch {
            let start = (s * (per + 1) + 1) * c;
            data.extend_from_slice(&av[start..start + per * c]);
        }
        self.push(
            batch * per,
            c,
            Storage::Owned(data),
            Op::DataRows { a, per },
        )
    }

    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let av = self.values(a);
        let mut data = Vec::with_capacity(r * times * c);
        for i in 0..r {
            for _ in 0..times {
                data.extend_from_slice(&av[i * c..(i + 1) * c]);
            }
        }
        self.push(
            r * times,
            c,
            Storage::Owned(data),
            Op::RepeatRows { a, times },
        )
    }

    pub fn row_mean(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let av = self.values(a);
        let data: Vec<f64> = (0..r)
            .map(|i| av[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        self.push(r, 1, Storage::Owned(data), Op::RowMean { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.values(a);
        let m = av.iter().sum::<f64>() / av.len() as f64;
        self.push(1, 1, Storage::Owned(vec![m]), Op::MeanAll { a })
    }

    /// Forward copy with gradient flow severed.
    pub fn detach(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let data = self.values(a).to_vec();
        self.push(r, c, Storage::Owned(data), Op::Detach { a })
    }

    /// Reverse sweep from a scalar loss. Returns per-parameter gradients.
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let n = &self.nodes[loss.0];
        assert_eq!(n.rows * n.cols, 1, "backward seeds a scalar");
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(params);

        for idx in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        add_assign(&mut out.by_param[pid.0], &gy);
                    }
                }
                Op::MatMul { a, b } => {
                    // dA = dC . B^T ; dB = A^T . dC
                    let (ac, bc) = (self.cols(*a), node.cols);
                    let da = mm_abt_raw(&gy, node.rows, bc, self.values(*b), ac);
                    let db = mm_atb(self.values(*a), node.rows, ac, &gy, bc);
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::Linear { a, w, bias } => {
                    let (ac, wc) = (self.cols(*a), node.cols);
                    let c = wc;
                    let mut gb = vec![0.0; c];
                    for row in gy.chunks(c) {
                        add_assign(&mut gb, row);
                    }
                    let da = mm_abt_raw(&gy, node.rows, wc, self.values(*w), ac);
                    let dw = mm_atb(self.values(*a), node.rows, ac, &gy, wc);
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *w, dw);
                    accum(&mut grads, *bias, gb);
                }
                Op::AddBias { a, bias } => {
                    let c = node.cols;
                    let mut gb = vec![0.0; c];
                    for row in gy.chunks(c) {
                        add_assign(&mut gb, row);
                    }
                    accum(&mut grads, *a, gy);
                    accum(&mut grads, *bias, gb);
                }
                Op::Add { a, b } => {
                    accum(&mut grads, *a, gy.clone());
                    accum(&mut grads, *b, gy);
                }
                Op::Sub { a, b } => {
                    let neg: Vec<f64> = gy.iter().map(|&v| -v).collect();
                    accum(&mut grads, *a, gy);
                    accum(&mut grads, *b, neg);
                }
                Op::Mul { a, b } => {
                    let av = self.values(*a);
                    let bv = self.values(*b);
                    let ga: Vec<f64> = gy.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                    let gb: Vec<f64> = gy.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Scale { a, k } => {
                    let ga: Vec<f64> = gy.iter().map(|&g| g * k).collect();
                    accum(&mut grads, *a, ga);
                }
                Op::AddScalar { a, .. } => {
                    accum(&mut grads, *a, gy);
                }
                Op::Gelu { a, saved_tanh } => {
                    let av = self.values(*a);
                    let ga: Vec<f64> = gy
                        .iter()
                        .zip(av)
                        .zip(saved_tanh)
                        .map(|((&g, &x), &t)| {
                            g * (0.5 * (1.0 + t)
                                + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x))
                        })
                        .collect();
                    accum(&mut grads, *a, ga);
                }
                Op::Sigmoid { a } => {
                    let yv = node.data.slice();
                    let ga: Vec<f64> = gy
                        .iter()
                        .zip(yv)
                        .map(|(&g, &y)| g * y * (1.0 - y))
                        .collect();
                    accum(&mut grads, *a, ga);
                }
                Op::Tanh { a } => {
                    let yv = node.data.slice();
                    let ga: Vec<f64> = gy
                        .iter()
                        .zip(yv)
                        .map(|(&g, &y)| g * (1.0 - y * y))
                        .collect();
                    accum(&mut grads, *a, ga);
                }
                Op::Square { a } => {
                    let av = self.values(*a);
                    let ga: Vec<f64> = gy.iter().zip(av).map(|(&g, &x)| g * 2.0 * x).collect();
                    accum(&mut grads, *a, ga);
                }
                Op::LayerNorm { a, gain, bias } => {
                    let c = node.cols;
                    let av = self.values(*a);
                    let gv = self.values(*gain);
                    let mut ga = vec![0.0; av.len()];
                    let mut ggain = vec![0.0; c];
                    let mut gbias = vec![0.0; c];
                    for (ri, row) in av.chunks(c).enumerate() {
                        let (xhat, sigma) = ln_row(row);
                        let gyr = &gy[ri * c..(ri + 1) * c];
                        let mut mean_p = 0.0;
                        let mut mean_px = 0.0;
                        let mut p = vec![0.0; c];
                        for j in 0..c {
                            p[j] = gyr[j] * gv[j];
                            mean_p += p[j];
                            mean_px += p[j] * xhat[j];
                            ggain[j] += gyr[j] * xhat[j];
                            gbias[j] += gyr[j];
                        }
                        mean_p /= c as f64;
                        mean_px /= c as f64;
                        let gar = &mut ga[ri * c..(ri + 1) * c];
                        for j in 0..c {
                            gar[j] = (p[j] - mean_p - xhat[j] * mean_px) / sigma;
                        }
                    }
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *gain, ggain);
                    accum(&mut grads, *bias, gbias);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                } => {
                    let (gq, gk, gv) = attention_backward(
                        self.values(*q),
                        self.values(*k),
                        self.values(*v),
                        &gy,
                        *batch,
                        *seq,
                        *heads,
                        node.cols,
                    );
                    accum(&mut grads, *q, gq);
                    accum(&mut grads, *k, gk);
                    accum(&mut grads, *v, gv);
                }
                Op::ConcatCols { a, b } => {
                    let ca = self.cols(*a);
                    let cb = self.cols(*b);
                    let r = node.rows;
                    let mut ga = vec![0.0; r * ca];
                    let mut gb = vec![0.0; r * cb];
                    for i in 0..r {
                        let row = &gy[i * (ca + cb)..(i + 1) * (ca + cb)];
                        ga[i * ca..(i + 1) * ca].copy_from_slice(&row[..ca]);
                        gb[i * cb..(i + 1) * cb].copy_from_slice(&row[ca..]);
                    }
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::BuildSeq { time, toks, per } => {
                    let c = node.cols;
                    let batch = self.rows(*time);
                    let mut gt = vec![0.0; batch * c];
                    let mut gk = vec![0.0; batch * per * c];
                    for s in 0..batch {
                        let base = s * (per + 1) * c;
                        gt[s * c..(s + 1) * c].copy_from_slice(&gy[base..base + c]);
                        gk[s * per * c..(s + 1) * per * c]
                            .copy_from_slice(&gy[base + c..base + (per + 1) * c]);
                    }
                    accum(&mut grads, *time, gt);
                    accum(&mut grads, *toks, gk);
                }
                Op::DataRows { a, per } => {
                    let c = node.cols;
                    let batch = node.rows / per;
                    let mut ga = vec![0.0; batch * (per + 1) * c];
                    for s in 0..batch {
                        let dst = (s * (per + 1) + 1) * c;
                        let src = s * per * c;
                        ga[dst..dst + per * c].copy_from_slice(&gy[src..src + per * c]);
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::RepeatRows { a, times } => {
                    let c = node.cols;
                    let r_in = self.rows(*a);
                    let mut ga = vec![0.0; r_in * c];
                    for i in 0..r_in {
                        for t in 0..*times {
                            let src = (i * times + t) * c;
                            add_assign(&mut ga[i * c..(i + 1) * c], &gy[src..src + c]);
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::RowMean { a } => {
                    let c = self.cols(*a);
                    let r = node.rows;
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        let g = gy[i] / c as f64;
                        for v in &mut ga[i * c..(i + 1) * c] {
                            *v = g;
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::MeanAll { a } => {
                    let n = self.values(*a).len();
                    let g = gy[0] / n as f64;
                    let ga = vec![g; n];
                    accum(&mut grads, *a, ga);
                }
                Op::Detach { .. } => {}
            }
        }
        out
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => add_assign(existing, &g),
        slot => *slot = Some(g),
    }
}

/// C = A . B over raw row-major slices; B is transposed into a scratch
/// buffer so inner loops run over contiguous memory.
fn mm_nn(a: &[f64], ar: usize, ac: usize, b: &[f64], br: usize, bc: usize) -> Vec<f64> {
    debug_assert_eq!(ac, br);
    let mut bt = vec![0.0; br * bc];
    for r in 0..br {
        for c in 0..bc {
            bt[c * br + r] = b[r * bc + c];
        }
    }
    mm_abt_raw(a, ar, ac, &bt, bc)
}

/// Four simultaneous dot products sharing the left operand's loads.
#[inline]
fn dot4(a: &[f64], b0: &[f64], b1: &[f64], b2: &[f64], b3: &[f64]) -> [f64; 4] {
    let mut s = [0.0f64; 4];
    let n = a.len();
    let chunks = n / 2;
    let (mut s0a, mut s0b) = (0.0, 0.0);
    let (mut s1a, mut s1b) = (0.0, 0.0);
    let (mut s2a, mut s2b) = (0.0, 0.0);
    let (mut s3a, mut s3b) = (0.0, 0.0);
    for i in 0..chunks {
        let j = i * 2;
        let (x0, x1) = (a[j], a[j + 1]);
        s0a += x0 * b0[j];
        s0b += x1 * b0[j + 1];
        s1a += x0 * b1[j];
        s1b += x1 * b1[j + 1];
        s2a += x0 * b2[j];
        s2b += x1 * b2[j + 1];
        s3a += x0 * b3[j];
        s3b += x1 * b3[j + 1];
    }
    s[0] = s0a + s0b;
    s[1] = s1a + s1b;
    s[2] = s2a + s2b;
    s[3] = s3a + s3b;
    if n % 2 == 1 {
        let j = n - 1;
        s[0] += a[j] * b0[j];
        s[1] += a[j] * b1[j];
        s[2] += a[j] * b2[j];
        s[3] += a[j] * b3[j];
    }
    s
}

/// C = A . B^T with B given row-major as [bR x ac]; out is [ar x bR].
fn mm_abt_raw(a: &[f64], ar: usize, ac: usize, b: &[f64], b_rows: usize) -> Vec<f64> {
    let mut out = vec![0.0; ar * b_rows];
    let work = ar * ac * b_rows;
    let body = |r: usize, orow: &mut [f64]| {
        let arow = &a[r * ac..(r + 1) * ac];
        let blocks = b_rows / 4;
        for cb in 0..blocks {
            let c = cb * 4;
            let s = dot4(
                arow,
                &b[c * ac..(c + 1) * ac],
                &b[(c + 1) * ac..(c + 2) * ac],
                &b[(c + 2) * ac..(c + 3) * ac],
                &b[(c + 3) * ac..(c + 4) * ac],
            );
            orow[c..c + 4].copy_from_slice(&s);
        }
        for c in blocks * 4..b_rows {
            orow[c] = dot(arow, &b[c * ac..(c + 1) * ac]);
        }
    };
    let _ = work;
    for (r, orow) in out.chunks_mut(b_rows).enumerate() {
        body(r, orow);
    }
    out
}

/// C = A^T . B for A [n x ar], B [n x bc]; out is [ar x bc]. Accumulates
/// rank-one updates row by row, which streams both operands.
fn mm_atb(a: &[f64], n: usize, ar: usize, b: &[f64], bc: usize) -> Vec<f64> {
    let mut out = vec![0.0; ar * bc];
    for r in 0..n {
        let arow = &a[r * ar..(r + 1) * ar];
        let brow = &b[r * bc..(r + 1) * bc];
        for (k, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                crate::tensor::axpy(&mut out[k * bc..(k + 1) * bc], av, brow);
            }
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Normalize one row; returns (xhat, sigma).
fn ln_row(row: &[f64]) -> (Vec<f64>, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c;
    let sigma = (var + LN_EPS).sqrt();
    (row.iter().map(|&x| (x - mean) / sigma).collect(), sigma)
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch: usize,
    seq: usize,
    heads: usize,
    dim: usize,
) -> Vec<f64> {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * seq * dim];
    let chunk = seq * dim;
    out.chunks_mut(chunk).enumerate().for_each(|(s, os)| {
        let qs = &q[s * chunk..(s + 1) * chunk];
        let ks = &k[s * chunk..(s + 1) * chunk];
        let vs = &v[s * chunk..(s + 1) * chunk];
        let mut probs = vec![0.0; seq * seq];
        for h in 0..heads {
            let hoff = h * dh;
            for i in 0..seq {
                for j in 0..seq {
                    let qi = &qs[i * dim + hoff..i * dim + hoff + dh];
                    let kj = &ks[j * dim + hoff..j * dim + hoff + dh];
                    probs[i * seq + j] = dot(qi, kj) * scale;
                }
            }
            for i in 0..seq {
                softmax_row(&mut probs[i * seq..(i + 1) * seq]);
            }
            for i in 0..seq {
                for j in 0..seq {
                    let p = probs[i * seq + j];
                    let vj = &vs[j * dim + hoff..j * dim + hoff + dh];
                    let orow = &mut os[i * dim + hoff..i * dim + hoff + dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    gy: &[f64],
    batch: usize,
    seq: usize,
    heads: usize,
    dim: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let chunk = seq * dim;
    let mut gq = vec![0.0; batch * chunk];
    let mut gk = vec![0.0; batch * chunk];
    let mut gv = vec![0.0; batch * chunk];
    gq.chunks_mut(chunk)
        .zip(gk.chunks_mut(chunk))
        .zip(gv.chunks_mut(chunk))
        .enumerate()
        .map(|(s, ((gqs, gks), gvs))| (s, gqs, gks, gvs))
        .for_each(|(s, gqs, gks, gvs)| {
            let qs = &q[s * chunk..(s + 1) * chunk];
            let ks = &k[s * chunk..(s + 1) * chunk];
            let vs = &v[s * chunk..(s + 1) * chunk];
            let gys = &gy[s * chunk..(s + 1) * chunk];
            let mut probs = vec![0.0; seq * seq];
            let mut gp = vec![0.0; seq * seq];
            let mut ga = vec![0.0; seq * seq];
            for h in 0..heads {
                let hoff = h * dh;
                for i in 0..seq {
                    for j in 0..seq {
                        let qi = &qs[i * dim + hoff..i * dim + hoff + dh];
                        let kj = &ks[j * dim + hoff..j * dim + hoff + dh];
                        probs[i * seq + j] = dot(qi, kj) * scale;
                    }
                }
                for i in 0..seq {
                    softmax_row(&mut probs[i * seq..(i + 1) * seq]);
                }
                // dV += P^T dO ; dP = dO V^T
                for i in 0..seq {
                    for j in 0..seq {
                        let goi = &gys[i * dim + hoff..i * dim + hoff + dh];
                        let vj = &vs[j * dim + hoff..j * dim + hoff + dh];
                        gp[i * seq + j] = dot(goi, vj);
                        let p = probs[i * seq + j];
                        let gvr = &mut gvs[j * dim + hoff..j * dim + hoff + dh];
                        for (g, &x) in gvr.iter_mut().zip(goi) {
                            *g += p * x;
                        }
                    }
                }
                // dA = P .* (dP - rowsum(dP .* P))
                for i in 0..seq {
                    let mut srow = 0.0;
                    for j in 0..seq {
                        srow += gp[i * seq + j] * probs[i * seq + j];
                    }
                    for j in 0..seq {
                        ga[i * seq + j] = probs[i * seq + j] * (gp[i * seq + j] - srow);
                    }
                }
                // dQ += scale * dA . K ; dK += scale * dA^T . Q
                for i in 0..seq {
                    for j in 0..seq {
                        let a = ga[i * seq + j] * scale;
                        let kj = &ks[j * dim + hoff..j * dim + hoff + dh];
                        let qi = &qs[i * dim + hoff..i * dim + hoff + dh];
                        let gqr = &mut gqs[i * dim + hoff..i * dim + hoff + dh];
                        for (g, &x) in gqr.iter_mut().zip(kj) {
                            *g += a * x;
                        }
                        let gkr = &mut gks[j * dim + hoff..j * dim + hoff + dh];
                        for (g, &x) in gkr.iter_mut().zip(qi) {
                            *g += a * x;
                        }
                    }
                }
            }
        });
    (gq, gk, gv)
}

/// Central-difference gradient of `f` at `point`.
///
/// Lives here as an independent oracle: it only ever calls `f`, never the
/// tape's backward pass.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], eps: f64) -> Vec<f64> {
    let mut peturbed = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let h = eps * point[i].abs().max(1.0);
        peturbed[i] = point[i] + h;
        let fp = f(&peturbed);
        peturbed[i] = point[i] - h;
        let fm = f(&peturbed);
        peturbed[i] = point[i];
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Largest relative disagreement between two gradient vectors, with a small
/// absolute floor so noise-level entries do not dominate.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
