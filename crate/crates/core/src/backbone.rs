//! Transformer denoiser with per-layer output heads and an incremental
//! forward pass that can stop at any layer.
//!
//! Layout conventions: a batch of B inputs becomes B sequences of
//! `tokens_per_sample + 1` rows (one time token, then the data tokens),
//! sample-major. All per-layer artifacts keep that layout.

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Mat;

/// What the raw data tensor looks like before tokenization.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputShape {
    /// Flat feature vectors (2-D toy data); one token per sample.
    Vector { dim: usize },
    /// Square single-channel images, patchified into tokens.
    Image { height: usize, width: usize },
}

impl InputShape {
    pub fn data_dim(&self) -> usize {
        match self {
            InputShape::Vector { dim } => *dim,
            InputShape::Image { height, width } => height * width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub input_shape: InputShape,
    /// (shallow, deep) long-skip pairs; the shallow layer's output is merged
    /// into the deep layer's input.
    pub skip_pairs: Vec<(usize, usize)>,
    /// Whether the deepest per-layer head doubles as the model's final
    /// output projection.
    pub share_final_head: bool,
}

impl BackboneConfig {
    /// Desk-scale defaults: 13 layers, width 64, 4 heads, long skips pairing
    /// layer i with layer N+1-i.
    pub fn desk_default(input_shape: InputShape) -> Self {
        let depth = 13;
        BackboneConfig {
            depth,
            hidden_dim: 64,
            num_heads: 4,
            patch_size: 1,
            input_shape,
            skip_pairs: default_skip_pairs(depth),
            share_final_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config("model.depth must be >= 2".into()));
        }
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model.hidden_dim ({}) must be divisible by model.num_heads ({})",
                self.hidden_dim, self.num_heads
            )));
        }
        if !self.hidden_dim.is_multiple_of(2) {
            return Err(Error::Config("model.hidden_dim must be even".into()));
        }
        for &(a, b) in &self.skip_pairs {
            if a >= b || a < 1 || b > self.depth {
                return Err(Error::Config(format!(
                    "skip pair ({a}, {b}) must satisfy 1 <= shallow < deep <= {}",
                    self.depth
                )));
            }
        }
        match self.input_shape {
            InputShape::Vector { dim } => {
                if dim == 0 {
                    return Err(Error::Config("vector input dim must be > 0".into()));
                }
            }
            InputShape::Image { height, width } => {
                if self.patch_size == 0
                    || height % self.patch_size != 0
                    || width % self.patch_size != 0
                {
                    return Err(Error::Config(format!(
                        "image {height}x{width} not divisible by patch_size {}",
                        self.patch_size
                    )));
                }
            }
        }
        Ok(())
    }

    /// Data tokens per sample (excludes the time token).
    pub fn tokens_per_sample(&self) -> usize {
        match self.input_shape {
            InputShape::Vector { .. } => 1,
            InputShape::Image { height, width } => {
                (height / self.patch_size) * (width / self.patch_size)
            }
        }
    }

    /// Elements per data token.
    pub fn patch_dim(&self) -> usize {
        match self.input_shape {
            InputShape::Vector { dim } => dim,
            InputShape::Image { .. } => self.patch_size * self.patch_size,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.input_shape.data_dim()
    }

    /// Sequence length including the time token.
    pub fn seq_len(&self) -> usize {
        self.tokens_per_sample() + 1
    }

    /// Token-grid dimensions (rows, cols) for uncertainty-map export.
    pub fn token_grid(&self) -> (usize, usize) {
        match self.input_shape {
            InputShape::Vector { .. } => (1, 1),
            InputShape::Image { height, width } => {
                (height / self.patch_size, width / self.patch_size)
            }
        }
    }
}

pub fn default_skip_pairs(depth: usize) -> Vec<(usize, usize)> {
    (1..depth.div_ceil(2)).map(|i| (i, depth + 1 - i)).collect()
}

/// Split a batch of flattened images into per-patch token rows.
///
/// `unpatchify` is its exact inverse; both are pure permutations.
pub fn patchify(data: &Mat, cfg: &BackboneConfig) -> Result<Mat> {
    match cfg.input_shape {
        InputShape::Vector { dim } => {
            if data.cols != dim {
                return Err(Error::Shape(format!(
                    "expected {dim}-dim vectors, got {}",
                    data.cols
                )));
            }
            Ok(data.clone())
        }
        InputShape::Image { height, width } => {
            if data.cols != height * width {
                return Err(Error::Shape(format!(
                    "expected {height}x{width} images, got {} values",
                    data.cols
                )));
            }
            let ps = cfg.patch_size;
            let (gh, gw) = (height / ps, width / ps);
            let mut out = Mat::zeros(data.rows * gh * gw, ps * ps);
            for s in 0..data.rows {
                let img = data.row(s);
                for py in 0..gh {
                    for px in 0..gw {
                        let tok = out.row_mut(s * gh * gw + py * gw + px);
                        for iy in 0..ps {
                            for ix in 0..ps {
                                tok[iy * ps + ix] = img[(py * ps + iy) * width + px * ps + ix];
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

pub fn unpatchify(tokens: &Mat, cfg: &BackboneConfig) -> Result<Mat> {
    match cfg.input_shape {
        InputShape::Vector { dim } => {
            if tokens.cols != dim {
                return Err(Error::Shape("token width mismatch".into()));
            }
            Ok(tokens.clone())
        }
        InputShape::Image { height, width } => {
            let ps = cfg.patch_size;
            let (gh, gw) = (height / ps, width / ps);
            let per = gh * gw;
            if tokens.cols != ps * ps || !tokens.rows.is_multiple_of(per) {
                return Err(Error::Shape("token layout mismatch".into()));
            }
            let batch = tokens.rows / per;
            let mut out = Mat::zeros(batch, height * width);
            for s in 0..batch {
                let img = out.row_mut(s);
                for py in 0..gh {
                    for px in 0..gw {
                        let tok = tokens.row(s * per + py * gw + px);
                        for iy in 0..ps {
                            for ix in 0..ps {
                                img[(py * ps + iy) * width + px * ps + ix] = tok[iy * ps + ix];
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Sinusoidal embedding of a timestep: interleaved sin/cos at geometrically
/// spaced frequencies. Deterministic in (t, dim).
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Invalid(format!("embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * 10000f64.ln()).exp();
        let angle = t as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// Per-layer artifacts of one (possibly truncated) forward pass, as values.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Token representations per executed layer, full sequence rows.
    pub hidden: Vec<Mat>,
    /// Per-layer noise predictions in data space.
    pub preds: Vec<Mat>,
    pub exit_layer: usize,
    pub t: usize,
}

struct BlockIds {
    skip: Option<(usize, ParamId, ParamId)>, // (shallow source, w, b)
    ln1: (ParamId, ParamId),
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2: (ParamId, ParamId),
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

struct HeadIds {
    ln: (ParamId, ParamId),
    w: ParamId,
    b: ParamId,
}

/// The denoiser: parameters plus the wiring to run them on a tape.
pub struct Backbone {
    pub config: BackboneConfig,
    embed_w: ParamId,
    embed_b: ParamId,
    time_w1: ParamId,
    time_b1: ParamId,
    time_w2: ParamId,
    time_b2: ParamId,
    blocks: Vec<BlockIds>,
    heads: Vec<HeadIds>,
    final_head: Option<HeadIds>,
}

fn xavier(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols)
        .map(|_| rng.uniform_in(-limit, limit))
        .collect()
}

fn add_linear(
    params: &mut ParamSet,
    rng: &mut Rng,
    name: &str,
    rows: usize,
    cols: usize,
) -> (ParamId, ParamId) {
    let w = params.add(format!("{name}.w"), rows, cols, xavier(rng, rows, cols));
    let b = params.add(format!("{name}.b"), 1, cols, vec![0.0; cols]);
    (w, b)
}

fn add_norm(params: &mut ParamSet, name: &str, dim: usize) -> (ParamId, ParamId) {
    let g = params.add(format!("{name}.g"), 1, dim, vec![1.0; dim]);
    let b = params.add(format!("{name}.b"), 1, dim, vec![0.0; dim]);
    (g, b)
}

impl Backbone {
    /// Freshly initialized weights, deterministic in the rng stream.
    pub fn init(config: BackboneConfig, params: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let pd = config.patch_dim();
        let (embed_w, embed_b) = add_linear(params, rng, "embed", pd, d);
        let (time_w1, time_b1) = add_linear(params, rng, "time.fc1", d, d);
        let (time_w2, time_b2) = add_linear(params, rng, "time.fc2", d, d);

        let mut deep_to_shallow = std::collections::HashMap::new();
        for &(a, b) in &config.skip_pairs {
            if deep_to_shallow.insert(b, a).is_some() {
                return Err(Error::Config(format!(
                    "layer {b} is the deep end of two skip pairs"
                )));
            }
        }

        let mut blocks = Vec::with_capacity(config.depth);
        for i in 1..=config.depth {
            let p = format!("layer{i}");
            let skip = deep_to_shallow.get(&i).map(|&src| {
                let w = params.add(format!("{p}.skip.w"), 2 * d, d, xavier(rng, 2 * d, d));
                let b = params.add(format!("{p}.skip.b"), 1, d, vec![0.0; d]);
                (src, w, b)
            });
            let ln1 = add_norm(params, &format!("{p}.ln1"), d);
            let wq = params.add(format!("{p}.attn.wq"), d, d, xavier(rng, d, d));
            let bq = params.add(format!("{p}.attn.bq"), 1, d, vec![0.0; d]);
            // No key bias: a shared shift of every key is invisible to the
            // row-wise softmax, so such a parameter could never train.
            let wk = params.add(format!("{p}.attn.wk"), d, d, xavier(rng, d, d));
            let wv = params.add(format!("{p}.attn.wv"), d, d, xavier(rng, d, d));
            let bv = params.add(format!("{p}.attn.bv"), 1, d, vec![0.0; d]);
            let wo = params.add(format!("{p}.attn.wo"), d, d, xavier(rng, d, d));
            let bo = params.add(format!("{p}.attn.bo"), 1, d, vec![0.0; d]);
            let ln2 = add_norm(params, &format!("{p}.ln2"), d);
            let mlp_w1 = params.add(format!("{p}.mlp.w1"), d, 4 * d, xavier(rng, d, 4 * d));
            let mlp_b1 = params.add(format!("{p}.mlp.b1"), 1, 4 * d, vec![0.0; 4 * d]);
            let mlp_w2 = params.add(format!("{p}.mlp.w2"), 4 * d, d, xavier(rng, 4 * d, d));
            let mlp_b2 = params.add(format!("{p}.mlp.b2"), 1, d, vec![0.0; d]);
            blocks.push(BlockIds {
                skip,
                ln1,
                wq,
                bq,
                wk,
                wv,
                bv,
                wo,
                bo,
                ln2,
                mlp_w1,
                mlp_b1,
                mlp_w2,
                mlp_b2,
            });
        }

        let mut heads = Vec::with_capacity(config.depth);
        for i in 1..=config.depth {
            let p = format!("head{i}");
            let ln = add_norm(params, &format!("{p}.ln"), d);
            let w = params.add(format!("{p}.w"), d, pd, xavier(rng, d, pd));
            let b = params.add(format!("{p}.b"), 1, pd, vec![0.0; pd]);
            heads.push(HeadIds { ln, w, b });
        }
        let final_head = if config.share_final_head {
            None
        } else {
            let ln = add_norm(params, "final.ln", d);
            let w = params.add("final.w", d, pd, xavier(rng, d, pd));
            let b = params.add("final.b", 1, pd, vec![0.0; pd]);
            Some(HeadIds { ln, w, b })
        };

        Ok(Backbone {
            config,
            embed_w,
            embed_b,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            blocks,
            heads,
            final_head,
        })
    }

    fn head_output(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        head: &HeadIds,
        data_toks: Var,
    ) -> Var {
        let g = tape.param(params, head.ln.0);
        let b = tape.param(params, head.ln.1);
        let normed = tape.layer_norm(data_toks, g, b);
        let w = tape.param(params, head.w);
        let hb = tape.param(params, head.b);
        tape.linear(normed, w, hb)
    }
}

/// One forward pass as a live graph: per-layer vars plus the tape itself.
pub struct GraphTrace {
    pub tape: Tape,
    /// Full-sequence hidden state after each executed layer.
    pub hidden: Vec<Var>,
    /// Data-token rows of each hidden state.
    pub data_toks: Vec<Var>,
    /// Per-layer head outputs in token space.
    pub pred_toks: Vec<Var>,
    /// Final prediction in token space (the exited head's output).
    pub eps_hat_tok: Var,
    /// Sinusoidal timestep embeddings, one row per sample.
    pub temb: Var,
    pub exit_layer: usize,
    pub batch: usize,
    pub ts: Vec<usize>,
}

impl GraphTrace {
    /// Prediction in data space.
    pub fn eps_hat(&self, cfg: &BackboneConfig) -> Mat {
        unpatchify(&self.tape.value_mat(self.eps_hat_tok), cfg).expect("layout is internal")
    }

    /// Value-level snapshot. `t` is taken from the first sample of the batch.
    pub fn to_layer_trace(&self, cfg: &BackboneConfig) -> LayerTrace {
        LayerTrace {
            hidden: self
                .hidden
                .iter()
                .map(|&h| self.tape.value_mat(h))
                .collect(),
            preds: self
                .pred_toks
                .iter()
                .map(|&p| unpatchify(&self.tape.value_mat(p), cfg).expect("layout is internal"))
                .collect(),
            exit_layer: self.exit_layer,
            t: self.ts.first().copied().unwrap_or(0),
        }
    }
}

/// Per-layer exit probe: sees the tape, the layer index and that layer's
/// data-token rows plus the timestep embeddings; returns true to stop.
pub type StopFn<'a> = &'a mut dyn FnMut(&mut Tape, usize, Var, Var) -> bool;

impl Backbone {
    /// Full-depth forward pass collecting every per-layer artifact.
    pub fn forward_collect(&self, params: &ParamSet, x: &Mat, ts: &[usize]) -> Result<GraphTrace> {
        self.forward_impl(params, x, ts, None)
    }

    /// Forward pass that stops after the first layer whose probe fires.
    pub fn forward_incremental(
        &self,
        params: &ParamSet,
        x: &Mat,
        ts: &[usize],
        stop: StopFn<'_>,
    ) -> Result<GraphTrace> {
        self.forward_impl(params, x, ts, Some(stop))
    }

    fn forward_impl(
        &self,
        params: &ParamSet,
        x: &Mat,
        ts: &[usize],
        mut stop: Option<StopFn<'_>>,
    ) -> Result<GraphTrace> {
        let cfg = &self.config;
        let batch = x.rows;
        if x.cols != cfg.data_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.cols,
                cfg.data_dim()
            )));
        }
        if ts.len() != batch {
            return Err(Error::Shape("one timestep per sample required".into()));
        }
        let d = cfg.hidden_dim;
        let per = cfg.tokens_per_sample();
        let seq = cfg.seq_len();

        let mut tape = Tape::new();

        // Token embedding.
        let toks = patchify(x, cfg)?;
        let toks = tape.constant(toks);
        let ew = tape.param(params, self.embed_w);
        let eb = tape.param(params, self.embed_b);
        let tok_emb = tape.linear(toks, ew, eb);

        // Time token from sinusoidal embeddings.
        let mut temb_rows = Vec::with_capacity(batch);
        for &t in ts {
            temb_rows.push(timestep_embedding(t, d)?);
        }
        let temb = tape.constant(Mat::from_rows(&temb_rows));
        let w1 = tape.param(params, self.time_w1);
        let b1 = tape.param(params, self.time_b1);
        let w2 = tape.param(params, self.time_w2);
        let b2 = tape.param(params, self.time_b2);
        let tt = tape.linear(temb, w1, b1);
        let tt = tape.gelu(tt);
        let time_tok = tape.linear(tt, w2, b2);

        let mut h = tape.build_seq(time_tok, tok_emb, per);

        let mut hidden = Vec::new();
        let mut data_toks = Vec::new();
        let mut pred_toks = Vec::new();
        let mut exit_layer = cfg.depth;

        for (li, block) in self.blocks.iter().enumerate() {
            let layer = li + 1;
            if let Some((src, w, b)) = &block.skip {
                let saved = hidden[*src - 1];
                let merged = tape.concat_cols(h, saved);
                let wv = tape.param(params, *w);
                let bv = tape.param(params, *b);
                h = tape.linear(merged, wv, bv);
            }

            // Attention sublayer.
            let g = tape.param(params, block.ln1.0);
            let b = tape.param(params, block.ln1.1);
            let normed = tape.layer_norm(h, g, b);
            let wq = tape.param(params, block.wq);
            let bq = tape.param(params, block.bq);
            let wk = tape.param(params, block.wk);
            let wv = tape.param(params, block.wv);
            let bv = tape.param(params, block.bv);
            let q = tape.linear(normed, wq, bq);
            let k = tape.matmul(normed, wk);
            let v = tape.linear(normed, wv, bv);
            let att = tape.attention(q, k, v, batch, seq, cfg.num_heads);
            let wo = tape.param(params, block.wo);
            let bo = tape.param(params, block.bo);
            let o = tape.linear(att, wo, bo);
            h = tape.add(h, o);

            // MLP sublayer.
            let g2 = tape.param(params, block.ln2.0);
            let b2 = tape.param(params, block.ln2.1);
            let normed = tape.layer_norm(h, g2, b2);
            let w1 = tape.param(params, block.mlp_w1);
            let mb1 = tape.param(params, block.mlp_b1);
            let w2 = tape.param(params, block.mlp_w2);
            let mb2 = tape.param(params, block.mlp_b2);
            let m = tape.linear(normed, w1, mb1);
            let m = tape.gelu(m);
            let m = tape.linear(m, w2, mb2);
            h = tape.add(h, m);

            hidden.push(h);
            let dt = tape.data_rows(h, per);
            data_toks.push(dt);
            let pred = self.head_output(&mut tape, params, &self.heads[li], dt);
            pred_toks.push(pred);

            if let Some(stop_fn) = stop.as_mut() {
                if layer < cfg.depth && stop_fn(&mut tape, layer, dt, temb) {
                    exit_layer = layer;
                    break;
                }
            }
        }

        let eps_hat_tok = if exit_layer < cfg.depth {
            pred_toks[exit_layer - 1]
        } else {
            match &self.final_head {
                None => pred_toks[cfg.depth - 1],
                Some(fh) => self.head_output(&mut tape, params, fh, data_toks[cfg.depth - 1]),
            }
        };

        Ok(GraphTrace {
            tape,
            hidden,
            data_toks,
            pred_toks,
            eps_hat_tok,
            temb,
            exit_layer,
            batch,
            ts: ts.to_vec(),
        })
    }
}
