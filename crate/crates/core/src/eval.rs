//! Efficiency and quality measurement.
//!
//! The theoretical cost model is frozen so numbers are comparable across
//! runs. Per layer, with hidden width `d`, `L` tokens (data tokens plus the
//! time token) and `P` data tokens, in multiply-accumulates:
//!
//! - attention: `4 d^2 L + 2 d L^2`
//! - MLP (expansion 4): `8 d^2 L`
//! - uncertainty head, per evaluated layer: `P (2 d + 1)`
//! - exit head (once per forward): `P d p` for patch dimension `p`
//! - fixed embedding side: `P p d` for the patch embedding plus `2 d^2`
//!   for the two time-token projections
//!
//! Reported FLOPs count one multiply-accumulate as two operations. Adaptive
//! runs pay layer plus uncertainty-head cost only up to the exit layer; the
//! full-cost reference is the same machinery at depth N, so the actual cost
//! never exceeds the full cost and equals it exactly at full depth.

use rayon::prelude::*;
use serde::Serialize;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::DenoiserModel;
use crate::rng::{domain, Rng};
use crate::sampling::{
    ancestral_sample, deterministic_sample, early_exit_denoise, ExitPolicy, SampleRun, SamplerKind,
};
use crate::schedule::{forward_diffuse, posterior_mean, posterior_variance, NoiseSchedule};
use crate::tensor::Mat;

/// Layer usage and theoretical cost of one sampling run.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EfficiencyReport {
    pub avg_layers: f64,
    /// 1 - avg_layers / N; conventionally reported as -100 * this value.
    pub layers_ratio_reduction: f64,
    pub flops_full: f64,
    pub flops_actual: f64,
}

/// Theoretical cost pair for a given average depth.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FlopsPair {
    pub full: f64,
    pub actual: f64,
}

/// Itemized per-forward MAC counts of the frozen cost model.
#[derive(Debug, Clone, Copy)]
pub struct CostTable {
    pub attention_per_layer: f64,
    pub mlp_per_layer: f64,
    pub uem_per_layer: f64,
    pub exit_head: f64,
    pub embed_fixed: f64,
}

impl CostTable {
    pub fn per_layer(&self) -> f64 {
        self.attention_per_layer + self.mlp_per_layer
    }
}

pub fn cost_table(cfg: &BackboneConfig) -> CostTable {
    let d = cfg.hidden_dim as f64;
    let l = cfg.seq_len() as f64;
    let p = cfg.tokens_per_sample() as f64;
    let pd = cfg.patch_dim() as f64;
    CostTable {
        attention_per_layer: 4.0 * d * d * l + 2.0 * d * l * l,
        mlp_per_layer: 8.0 * d * d * l,
        uem_per_layer: p * (2.0 * d + 1.0),
        exit_head: p * d * pd,
        embed_fixed: p * pd * d + 2.0 * d * d,
    }
}

const FLOPS_PER_MAC: f64 = 2.0;

/// Theoretical FLOPs at a given average depth, against the same machinery
/// run at full depth.
pub fn flops_estimate(cfg: &BackboneConfig, avg_layers: f64) -> FlopsPair {
    let t = cost_table(cfg);
    let per_layer = t.per_layer() + t.uem_per_layer;
    let full = FLOPS_PER_MAC * (t.embed_fixed + cfg.depth as f64 * per_layer + t.exit_head);
    let actual = FLOPS_PER_MAC * (t.embed_fixed + avg_layers * per_layer + t.exit_head);
    FlopsPair { full, actual }
}

/// Mean exit depth over every (sample, step) of a run, with the matching
/// cost estimate.
pub fn layer_usage_report(run: &SampleRun, cfg: &BackboneConfig) -> Result<EfficiencyReport> {
    let total: usize = run.layers_used.iter().map(|l| l.len()).sum();
    if total == 0 {
        return Err(Error::Invalid("run has no recorded steps".into()));
    }
    let sum: usize = run.layers_used.iter().flatten().sum();
    let avg_layers = sum as f64 / total as f64;
    let flops = flops_estimate(cfg, avg_layers);
    Ok(EfficiencyReport {
        avg_layers,
        layers_ratio_reduction: 1.0 - avg_layers / cfg.depth as f64,
        flops_full: flops.full,
        flops_actual: flops.actual,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Gaussian kernel mixture averaged over bandwidths.
fn kernel(d2: f64, bandwidths: &[f64]) -> f64 {
    bandwidths
        .iter()
        .map(|&h| (-d2 / (2.0 * h * h)).exp())
        .sum::<f64>()
        / bandwidths.len() as f64
}

fn check_mmd_inputs(a: &Mat, b: &Mat, bandwidths: &[f64], min_points: usize) -> Result<()> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "sample sets have dims {} vs {}",
            a.cols, b.cols
        )));
    }
    if a.rows < min_points || b.rows < min_points {
        return Err(Error::Invalid(format!(
            "need at least {min_points} points per set, got {} and {}",
            a.rows, b.rows
        )));
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|&h| h <= 0.0) {
        return Err(Error::Invalid(
            "bandwidths must be positive and nonempty".into(),
        ));
    }
    Ok(())
}

/// Sets ordered canonically so the estimate is exactly symmetric in its
/// arguments.
fn canonical<'a>(a: &'a Mat, b: &'a Mat) -> (&'a Mat, &'a Mat) {
    if a.rows != b.rows {
        if a.rows < b.rows {
            return (a, b);
        }
        return (b, a);
    }
    for (x, y) in a.data.iter().zip(&b.data) {
        if x < y {
            return (a, b);
        }
        if y < x {
            return (b, a);
        }
    }
    (a, b)
}

/// Parallel per-row kernel sums, reduced sequentially in row order so the
/// result is bit-identical regardless of scheduling.
fn row_sums(x: &Mat, y: &Mat, skip_diagonal: bool, bandwidths: &[f64]) -> f64 {
    let per_row: Vec<f64> = (0..x.rows)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in 0..y.rows {
                if !(skip_diagonal && i == j) {
                    s += kernel(sq_dist(x.row(i), y.row(j)), bandwidths);
                }
            }
            s
        })
        .collect();
    per_row.iter().sum()
}

/// Unbiased squared maximum-mean-discrepancy estimate.
pub fn mmd_quality(samples: &Mat, reference: &Mat, bandwidths: &[f64]) -> Result<f64> {
    check_mmd_inputs(samples, reference, bandwidths, 2)?;
    let (x, y) = canonical(samples, reference);
    let (m, n) = (x.rows, y.rows);
    let kxx = row_sums(x, x, true, bandwidths);
    let kyy = row_sums(y, y, true, bandwidths);
    let kxy = row_sums(x, y, false, bandwidths);
    Ok(kxx / (m * (m - 1)) as f64 + kyy / (n * (n - 1)) as f64 - 2.0 * kxy / (m * n) as f64)
}

/// Biased squared MMD; exactly zero on identical multisets.
pub fn mmd_biased(samples: &Mat, reference: &Mat, bandwidths: &[f64]) -> Result<f64> {
    check_mmd_inputs(samples, reference, bandwidths, 1)?;
    let (x, y) = canonical(samples, reference);
    let (m, n) = (x.rows, y.rows);
    let sum_block = |a: &Mat, b: &Mat| -> f64 {
        (0..a.rows)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..b.rows {
                    s += kernel(sq_dist(a.row(i), b.row(j)), bandwidths);
                }
                s
            })
            .sum()
    };
    let kxx = sum_block(x, x);
    let kyy = sum_block(y, y);
    let kxy = sum_block(x, y);
    Ok(kxx / (m * m) as f64 + kyy / (n * n) as f64 - 2.0 * kxy / (m * n) as f64)
}

/// Standard deviation of the unbiased MMD under the label-permutation null,
/// estimated from `n_perms` random splits of the pooled points.
pub fn mmd_permutation_null_std(
    a: &Mat,
    b: &Mat,
    bandwidths: &[f64],
    n_perms: usize,
    seed: u64,
) -> Result<f64> {
    check_mmd_inputs(a, b, bandwidths, 2)?;
    let mut pooled = Mat::zeros(a.rows + b.rows, a.cols);
    for i in 0..a.rows {
        pooled.row_mut(i).copy_from_slice(a.row(i));
    }
    for i in 0..b.rows {
        pooled.row_mut(a.rows + i).copy_from_slice(b.row(i));
    }
    let stats: Vec<f64> = (0..n_perms)
        .into_par_iter()
        .map(|p| {
            let mut rng = Rng::stream(seed, domain::EVAL, p as u64);
            let mut idx: Vec<usize> = (0..pooled.rows).collect();
            for i in (1..idx.len()).rev() {
                let j = rng.index(i + 1);
                idx.swap(i, j);
            }
            let mut xa = Mat::zeros(a.rows, a.cols);
            let mut xb = Mat::zeros(b.rows, a.cols);
            for (r, &src) in idx[..a.rows].iter().enumerate() {
                xa.row_mut(r).copy_from_slice(pooled.row(src));
            }
            for (r, &src) in idx[a.rows..].iter().enumerate() {
                xb.row_mut(r).copy_from_slice(pooled.row(src));
            }
            mmd_quality(&xa, &xb, bandwidths).expect("inputs validated")
        })
        .collect();
    let mean = stats.iter().sum::<f64>() / stats.len() as f64;
    let var = stats.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (stats.len() - 1) as f64;
    Ok(var.sqrt())
}

/// Per-layer, per-timestep mean squared gap between each head's prediction
/// and the deepest head's, over a fixed probe batch diffused to each t.
pub fn layer_redundancy_profile(
    model: &DenoiserModel,
    dataset: &Mat,
    sched: &NoiseSchedule,
    t_grid: &[usize],
    probe_n: usize,
    seed: u64,
) -> Result<Mat> {
    if t_grid.is_empty() {
        return Err(Error::Invalid("t grid must be nonempty".into()));
    }
    let cfg = model.config();
    let depth = cfg.depth;
    let mut rng = Rng::stream(seed, domain::EVAL, 0x9d);
    let n = probe_n.min(dataset.rows).max(1);
    let mut x0 = Mat::zeros(n, dataset.cols);
    for i in 0..n {
        let idx = rng.index(dataset.rows);
        x0.row_mut(i).copy_from_slice(dataset.row(idx));
    }
    let mut out = Mat::zeros(depth, t_grid.len());
    for (col, &t) in t_grid.iter().enumerate() {
        let eps = Mat::from_vec(n, dataset.cols, rng.normal_vec(n * dataset.cols));
        let x_t = forward_diffuse(&x0, t, &eps, sched)?.x_t;
        let ts = vec![t; n];
        let trace = model.backbone.forward_collect(&model.params, &x_t, &ts)?;
        let last = trace.tape.value_mat(trace.pred_toks[depth - 1]);
        for layer in 0..depth {
            let p = trace.tape.value_mat(trace.pred_toks[layer]);
            let mse = p
                .data
                .iter()
                .zip(&last.data)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                / p.data.len() as f64;
            *out.at_mut(layer, col) = mse;
        }
    }
    Ok(out)
}

/// Per-step divergence between paired early-exit and full-depth ancestral
/// trajectories started from identical noise, averaged over chains.
pub fn error_accumulation_curve(
    model: &DenoiserModel,
    policy: &ExitPolicy,
    sched: &NoiseSchedule,
    n_chains: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let cfg = model.config();
    let dim = cfg.data_dim();
    let steps = sched.num_steps;
    let per_chain: Vec<Result<Vec<f64>>> = (0..n_chains)
        .into_par_iter()
        .map(|chain| {
            let mut rng = Rng::stream(seed, domain::SAMPLE_CHAIN, chain as u64);
            let init = rng.normal_vec(dim);
            let mut x_ee = Mat::from_vec(1, dim, init.clone());
            let mut x_full = Mat::from_vec(1, dim, init);
            let mut curve = Vec::with_capacity(steps);
            for (step, t) in (1..=steps).rev().enumerate() {
                let (eps_ee, _, _) = early_exit_denoise(model, &x_ee, t, Some(policy))?;
                let (eps_full, _, _) = early_exit_denoise(model, &x_full, t, None)?;
                let mut next_ee = posterior_mean(&x_ee, &eps_ee, t, sched)?;
                let mut next_full = posterior_mean(&x_full, &eps_full, t, sched)?;
                if t > 1 {
                    let std = posterior_variance(t, sched)?.sqrt();
                    for i in 0..dim {
                        let z = rng.normal();
                        next_ee.data[i] += std * z;
                        next_full.data[i] += std * z;
                    }
                }
                x_ee = next_ee;
                x_full = next_full;
                if !(x_ee.all_finite() && x_full.all_finite()) {
                    return Err(Error::NonFinite {
                        component: "error accumulation state",
                        at_step: Some(step),
                    });
                }
                let mse = sq_dist(x_ee.row(0), x_full.row(0)) / dim as f64;
                curve.push(mse);
            }
            Ok(curve)
        })
        .collect();
    let mut mean = vec![0.0; steps];
    let mut count = 0.0;
    for c in per_chain {
        let c = c?;
        for (m, v) in mean.iter_mut().zip(&c) {
            *m += v;
        }
        count += 1.0;
    }
    for m in &mut mean {
        *m /= count;
    }
    Ok(mean)
}

/// One point of the quality/compute trade-off curve.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TradeoffPoint {
    pub threshold: f64,
    pub quality: f64,
    pub layers_ratio_reduction: f64,
    pub avg_layers: f64,
    pub flops_actual: f64,
}

/// Sampler choice for evaluation runs.
#[derive(Debug, Clone, Copy)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub steps: usize,
}

pub fn run_sampler(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    spec: SamplerSpec,
    policy: Option<&ExitPolicy>,
    n: usize,
    seed: u64,
    map_steps: &[usize],
) -> Result<SampleRun> {
    match spec.kind {
        SamplerKind::Ancestral => ancestral_sample(model, sched, policy, n, seed, map_steps),
        SamplerKind::Deterministic => {
            deterministic_sample(model, sched, policy, n, spec.steps, seed, map_steps)
        }
    }
}

/// One generation plus quality evaluation per threshold, identical seeds
/// across points.
#[allow(clippy::too_many_arguments)]
pub fn threshold_sweep(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    thresholds: &[f64],
    spec: SamplerSpec,
    n: usize,
    reference: &Mat,
    bandwidths: &[f64],
    base_policy: ExitPolicy,
    seed: u64,
) -> Result<Vec<TradeoffPoint>> {
    if thresholds.is_empty() {
        return Err(Error::Invalid("threshold list must be nonempty".into()));
    }
    let cfg = model.config();
    let mut points = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let policy = ExitPolicy {
            threshold: tau,
            ..base_policy
        };
        let run = run_sampler(model, sched, spec, Some(&policy), n, seed, &[])?;
        let report = layer_usage_report(&run, cfg)?;
        let quality = mmd_quality(&run.samples, reference, bandwidths)?;
        points.push(TradeoffPoint {
            threshold: tau,
            quality,
            layers_ratio_reduction: report.layers_ratio_reduction,
            avg_layers: report.avg_layers,
            flops_actual: report.flops_actual,
        });
    }
    Ok(points)
}
