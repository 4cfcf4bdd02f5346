//! Optimization loop, toy data, timestep sampling and loss bookkeeping.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamSet};
use crate::error::{Error, Result};
use crate::model::DenoiserModel;
use crate::rng::{domain, Rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::Mat;
use crate::uem::{build_objective, LayerwiseMode, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[serde(alias = "gmm")]
    GaussianMixture,
    #[serde(alias = "swissroll")]
    SwissRoll,
    Checkerboard,
    #[serde(alias = "tinyimage")]
    TinyImage,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gmm" | "gaussian_mixture" => Ok(DatasetKind::GaussianMixture),
            "swissroll" | "swiss_roll" => Ok(DatasetKind::SwissRoll),
            "checkerboard" => Ok(DatasetKind::Checkerboard),
            "tinyimage" | "tiny_image" => Ok(DatasetKind::TinyImage),
            other => Err(Error::Config(format!(
                "unknown dataset kind {other:?}; expected gmm|swissroll|checkerboard|tinyimage"
            ))),
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            DatasetKind::TinyImage => 64,
            _ => 2,
        }
    }

    pub fn input_shape(&self) -> crate::backbone::InputShape {
        match self {
            DatasetKind::TinyImage => crate::backbone::InputShape::Image {
                height: 8,
                width: 8,
            },
            _ => crate::backbone::InputShape::Vector { dim: 2 },
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DatasetKind::GaussianMixture => "gaussian_mixture",
            DatasetKind::SwissRoll => "swiss_roll",
            DatasetKind::Checkerboard => "checkerboard",
            DatasetKind::TinyImage => "tiny_image",
        };
        write!(f, "{s}")
    }
}

/// Number of mixture components in the gaussian-mixture toy set.
pub const GMM_MODES: usize = 8;

/// Deterministic toy dataset, standardized to zero mean and unit variance
/// per dimension.
pub fn make_toy_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<Mat> {
    if n < 1 {
        return Err(Error::Invalid("dataset size must be >= 1".into()));
    }
    let mut rng = Rng::stream(seed, domain::DATASET, 0);
    let mut data = match kind {
        DatasetKind::GaussianMixture => {
            let radius = 2.0;
            let sigma = 0.12;
            let mut m = Mat::zeros(n, 2);
            for i in 0..n {
                let mode = rng.index(GMM_MODES);
                let angle = std::f64::consts::TAU * mode as f64 / GMM_MODES as f64;
                let row = m.row_mut(i);
                row[0] = radius * angle.cos() + sigma * rng.normal();
                row[1] = radius * angle.sin() + sigma * rng.normal();
            }
            m
        }
        DatasetKind::SwissRoll => {
            let mut m = Mat::zeros(n, 2);
            for i in 0..n {
                let theta = rng.uniform_in(1.5 * std::f64::consts::PI, 4.5 * std::f64::consts::PI);
                let noise = 0.15;
                let row = m.row_mut(i);
                row[0] = theta * theta.cos() / 3.0 + noise * rng.normal();
                row[1] = theta * theta.sin() / 3.0 + noise * rng.normal();
            }
            m
        }
        DatasetKind::Checkerboard => {
            // 4x4 grid over [-2, 2)^2, cells where (i + j) is even.
            let cells: Vec<(usize, usize)> = (0..4)
                .flat_map(|i| (0..4).map(move |j| (i, j)))
                .filter(|(i, j)| (i + j) % 2 == 0)
                .collect();
            let mut m = Mat::zeros(n, 2);
            for i in 0..n {
                let (ci, cj) = cells[rng.index(cells.len())];
                let row = m.row_mut(i);
                row[0] = -2.0 + ci as f64 + rng.uniform_in(0.0, 1.0);
                row[1] = -2.0 + cj as f64 + rng.uniform_in(0.0, 1.0);
            }
            m
        }
        DatasetKind::TinyImage => {
            // 8x8 images of one or two gaussian bumps.
            let mut m = Mat::zeros(n, 64);
            for i in 0..n {
                let bumps = 1 + rng.index(2);
                let row = m.row_mut(i);
                for _ in 0..bumps {
                    let cx = rng.uniform_in(1.5, 6.5);
                    let cy = rng.uniform_in(1.5, 6.5);
                    let s = rng.uniform_in(0.8, 1.8);
                    let amp = rng.uniform_in(0.6, 1.0);
                    for y in 0..8 {
                        for x in 0..8 {
                            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                            row[y * 8 + x] += amp * (-d2 / (2.0 * s * s)).exp();
                        }
                    }
                }
            }
            m
        }
    };
    standardize(&mut data);
    Ok(data)
}

/// In-place per-dimension standardization to zero mean, unit variance.
pub fn standardize(data: &mut Mat) {
    let n = data.rows as f64;
    for c in 0..data.cols {
        let mut mean = 0.0;
        for r in 0..data.rows {
            mean += data.at(r, c);
        }
        mean /= n;
        let mut var = 0.0;
        for r in 0..data.rows {
            var += (data.at(r, c) - mean).powi(2);
        }
        var /= n;
        let std = var.sqrt().max(1e-12);
        for r in 0..data.rows {
            *data.at_mut(r, c) = (data.at(r, c) - mean) / std;
        }
    }
}

/// I.i.d. uniform timesteps on [1, T].
pub fn sample_timesteps(batch_size: usize, num_steps: usize, rng: &mut Rng) -> Vec<usize> {
    (0..batch_size)
        .map(|_| rng.uniform_1_to(num_steps))
        .collect()
}

/// Running per-timestep mean of the simple loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimestepLossHistogram {
    pub counts: Vec<u64>,
    pub sums: Vec<f64>,
}

impl TimestepLossHistogram {
    pub fn new(num_steps: usize) -> Self {
        TimestepLossHistogram {
            counts: vec![0; num_steps],
            sums: vec![0.0; num_steps],
        }
    }

    pub fn record(&mut self, t: usize, loss: f64) {
        self.counts[t - 1] += 1;
        self.sums[t - 1] += loss;
    }

    pub fn mean(&self, t: usize) -> Option<f64> {
        let c = self.counts[t - 1];
        (c > 0).then(|| self.sums[t - 1] / c as f64)
    }

    /// Mean loss over the timestep band [lo, hi] (inclusive, 1-based).
    pub fn band_mean(&self, lo: usize, hi: usize) -> Option<f64> {
        let mut count = 0u64;
        let mut sum = 0.0;
        for t in lo..=hi.min(self.counts.len()) {
            count += self.counts[t - 1];
            sum += self.sums[t - 1];
        }
        (count > 0).then(|| sum / count as f64)
    }
}

/// Decoupled-weight-decay adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(
        params: &ParamSet,
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
    ) -> Self {
        AdamW {
            learning_rate,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params
                .iter()
                .map(|(_, p)| vec![0.0; p.data.len()])
                .collect(),
            v: params
                .iter()
                .map(|(_, p)| vec![0.0; p.data.len()])
                .collect(),
        }
    }

    pub fn apply(&mut self, params: &mut ParamSet, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for idx in 0..self.m.len() {
            let g = &grads.by_param[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = params.data_mut(crate::autodiff::ParamId(idx));
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.learning_rate
                    * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}

/// Scalar loss components of one step.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub simple: f64,
    pub uncertainty: f64,
    pub layerwise: f64,
    pub total: f64,
}

/// Fixed shard count for data-parallel steps. Constant so results never
/// depend on how many worker threads exist.
const TRAIN_SHARDS: usize = 2;

struct ShardOutput {
    n: usize,
    losses: StepLosses,
    grads: crate::autodiff::Gradients,
    per_sample_simple: Vec<f64>,
}

fn run_shard(
    model: &DenoiserModel,
    x_t: &Mat,
    ts: &[usize],
    eps: &Mat,
    weights: &LossWeights,
    mode: LayerwiseMode,
) -> Result<ShardOutput> {
    let cfg = &model.backbone.config;
    let mut trace = model.backbone.forward_collect(&model.params, x_t, ts)?;
    let art = build_objective(
        &mut trace,
        &model.params,
        &model.uem,
        cfg,
        eps,
        weights,
        mode,
    )?;
    let simple = trace.tape.scalar_value(art.losses.simple);
    let uncertainty = trace.tape.scalar_value(art.losses.uncertainty);
    let layerwise = trace.tape.scalar_value(art.losses.layerwise);
    // Validates finiteness and names the diverging component.
    let total = crate::uem::loss_joint(simple, uncertainty, layerwise, weights)?;

    let pred = trace.tape.value_mat(trace.eps_hat_tok);
    let eps_tok = trace.tape.value_mat(art.eps_tok);
    let per = cfg.tokens_per_sample();
    let pd = cfg.patch_dim();
    let mut per_sample_simple = Vec::with_capacity(ts.len());
    for i in 0..ts.len() {
        let mut se = 0.0;
        for tok in 0..per {
            let r = i * per + tok;
            for c in 0..pd {
                let d = pred.at(r, c) - eps_tok.at(r, c);
                se += d * d;
            }
        }
        per_sample_simple.push(se / (per * pd) as f64);
    }

    let grads = trace.tape.backward(art.losses.total, &model.params);
    Ok(ShardOutput {
        n: ts.len(),
        losses: StepLosses {
            simple,
            uncertainty,
            layerwise,
            total,
        },
        grads,
        per_sample_simple,
    })
}

/// One optimization step: noise the batch, run the full forward pass, build
/// the joint objective, backpropagate and update.
///
/// The batch is split into [`TRAIN_SHARDS`] fixed contiguous shards whose
/// graphs run in parallel; gradients and losses recombine in shard order
/// weighted by shard size, so the step is deterministic on any machine.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut DenoiserModel,
    opt: &mut AdamW,
    x0: &Mat,
    ts: &[usize],
    eps: &Mat,
    sched: &NoiseSchedule,
    weights: &LossWeights,
    mode: LayerwiseMode,
    hist: Option<&mut TimestepLossHistogram>,
) -> Result<StepLosses> {
    x0.check_same_shape(eps, "train_step x0 vs eps")?;
    if ts.len() != x0.rows {
        return Err(Error::Shape("one timestep per sample required".into()));
    }
    // Per-sample closed-form noising at that sample's timestep.
    let mut x_t = Mat::zeros(x0.rows, x0.cols);
    for (i, &t) in ts.iter().enumerate() {
        if t < 1 || t > sched.num_steps {
            return Err(Error::TimestepRange {
                t,
                max: sched.num_steps,
            });
        }
        let s = sched.signal_coef(t);
        let c = sched.noise_coef(t);
        for (o, (&x, &e)) in x_t
            .row_mut(i)
            .iter_mut()
            .zip(x0.row(i).iter().zip(eps.row(i)))
        {
            *o = s * x + c * e;
        }
    }

    let batch = x0.rows;
    let shard_size = batch.div_ceil(TRAIN_SHARDS);
    let bounds: Vec<(usize, usize)> = (0..batch)
        .step_by(shard_size)
        .map(|lo| (lo, (lo + shard_size).min(batch)))
        .collect();
    let submat = |m: &Mat, lo: usize, hi: usize| {
        Mat::from_vec(hi - lo, m.cols, m.data[lo * m.cols..hi * m.cols].to_vec())
    };
    let outputs: Vec<Result<ShardOutput>> = {
        use rayon::prelude::*;
        let model_ref = &*model;
        bounds
            .par_iter()
            .map(|&(lo, hi)| {
                run_shard(
                    model_ref,
                    &submat(&x_t, lo, hi),
                    &ts[lo..hi],
                    &submat(eps, lo, hi),
                    weights,
                    mode,
                )
            })
            .collect()
    };

    let mut combined: Option<ShardOutput> = None;
    for out in outputs {
        let out = out?;
        combined = Some(match combined {
            None => out,
            Some(mut acc) => {
                let (na, nb) = (acc.n as f64, out.n as f64);
                let (wa, wb) = (na / (na + nb), nb / (na + nb));
                acc.losses = StepLosses {
                    simple: wa * acc.losses.simple + wb * out.losses.simple,
                    uncertainty: wa * acc.losses.uncertainty + wb * out.losses.uncertainty,
                    layerwise: wa * acc.losses.layerwise + wb * out.losses.layerwise,
                    total: wa * acc.losses.total + wb * out.losses.total,
                };
                for (a, b) in acc.grads.by_param.iter_mut().zip(&out.grads.by_param) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x = wa * *x + wb * *y;
                    }
                }
                acc.per_sample_simple.extend(out.per_sample_simple);
                acc.n += out.n;
                acc
            }
        });
    }
    let combined = combined.expect("at least one shard");

    if let Some(hist) = hist {
        for (&t, &l) in ts.iter().zip(&combined.per_sample_simple) {
            hist.record(t, l);
        }
    }

    opt.apply(&mut model.params, &combined.grads);
    Ok(combined.losses)
}

/// Draw one training batch: clean samples, timesteps and noise, all from
/// per-step streams so a resumed run continues bit-identically.
pub fn draw_batch(
    dataset: &Mat,
    batch_size: usize,
    num_steps: usize,
    seed: u64,
    step: u64,
) -> (Mat, Vec<usize>, Mat) {
    let mut rng_batch = Rng::stream(seed, domain::DATASET, 1 + step);
    let mut rng_t = Rng::stream(seed, domain::TIMESTEPS, step);
    let mut rng_eps = Rng::stream(seed, domain::TRAIN_NOISE, step);
    let mut x0 = Mat::zeros(batch_size, dataset.cols);
    for i in 0..batch_size {
        let idx = rng_batch.index(dataset.rows);
        x0.row_mut(i).copy_from_slice(dataset.row(idx));
    }
    let ts = sample_timesteps(batch_size, num_steps, &mut rng_t);
    let eps = Mat::from_vec(
        batch_size,
        dataset.cols,
        rng_eps.normal_vec(batch_size * dataset.cols),
    );
    (x0, ts, eps)
}
