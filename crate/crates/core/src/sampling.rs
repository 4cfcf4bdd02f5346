//! Reverse-process generation with threshold-driven adaptive depth.
//!
//! Two samplers share the early-exit denoiser: the ancestral chain walks all
//! T steps injecting `sqrt(btilde_t)`-scaled noise, and the deterministic
//! sampler takes a strided subsequence of timesteps with no injected noise.
//! Chains are independent; each derives its own noise stream from
//! (seed, sample index), so parallel execution is bit-reproducible.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::DenoiserModel;
use crate::rng::{domain, Rng};
use crate::schedule::{posterior_mean, posterior_variance, NoiseSchedule};
use crate::tensor::Mat;
use crate::uem::{exit_decision, Aggregation, UncertaintyRecord};

/// When to leave the backbone: exit at the first layer at or past `min_layer`
/// whose aggregated uncertainty falls below `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicy {
    pub threshold: f64,
    pub aggregation: Aggregation,
    pub min_layer: usize,
}

impl Default for ExitPolicy {
    fn default() -> Self {
        ExitPolicy {
            threshold: 0.0,
            aggregation: Aggregation::Mean,
            min_layer: 1,
        }
    }
}

impl ExitPolicy {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return Err(Error::Config(format!(
                "exit.threshold must be finite and >= 0, got {}",
                self.threshold
            )));
        }
        if self.min_layer < 1 || self.min_layer > depth {
            return Err(Error::Config(format!(
                "exit.min_layer must lie in [1, {depth}], got {}",
                self.min_layer
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ancestral,
    Deterministic,
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SamplerKind::Ancestral => write!(f, "ancestral"),
            SamplerKind::Deterministic => write!(f, "deterministic"),
        }
    }
}

/// One row of the per-step exit trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub sample: usize,
    /// 0-based position in the sampling loop.
    pub step: usize,
    pub t: usize,
    pub exit_layer: usize,
    /// Aggregated uncertainty at the exit layer; NaN for runs without
    /// uncertainty heads.
    pub u_at_exit: f64,
}

/// A per-token uncertainty map captured at a requested step.
#[derive(Debug, Clone)]
pub struct RecordedMap {
    pub sample: usize,
    pub step: usize,
    pub t: usize,
    pub u_map: Vec<f64>,
}

/// Everything one generation run produced.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub samples: Mat,
    /// Exit depth per sample and step: `layers_used[sample][step]`.
    pub layers_used: Vec<Vec<usize>>,
    pub traces: Vec<TraceRow>,
    pub maps: Vec<RecordedMap>,
    pub sampler: SamplerKind,
    pub num_steps: usize,
    pub policy: Option<ExitPolicy>,
    pub seed: u64,
}

/// One denoiser evaluation under the exit policy. Returns the exited head's
/// prediction in data space, the exit layer and the uncertainty record at
/// the exit layer (None when run without uncertainty heads).
pub fn early_exit_denoise(
    model: &DenoiserModel,
    x_t: &Mat,
    t: usize,
    policy: Option<&ExitPolicy>,
) -> Result<(Mat, usize, Option<UncertaintyRecord>)> {
    let cfg = model.config();
    let per = cfg.tokens_per_sample();
    let depth = cfg.depth;
    match policy {
        None => {
            let trace = model.backbone.forward_collect(&model.params, x_t, &[t])?;
            Ok((trace.eps_hat(cfg), depth, None))
        }
        Some(policy) => {
            policy.validate(depth)?;
            let bank = &model.uem;
            let params = &model.params;
            let mut records: Vec<UncertaintyRecord> = Vec::new();
            let mut probe = |tape: &mut Tape, layer: usize, data_toks: Var, temb: Var| -> bool {
                let u = bank.attach(tape, params, layer, data_toks, temb, per);
                let u_map = tape.values(u).to_vec();
                let u_scalar = policy.aggregation.apply(&u_map);
                let rec = UncertaintyRecord {
                    u_map,
                    u_scalar,
                    layer_index: layer,
                    t,
                };
                let stop = exit_decision(&rec, policy);
                records.push(rec);
                stop
            };
            let mut trace = model
                .backbone
                .forward_incremental(params, x_t, &[t], &mut probe)?;
            // The probe never runs on the final layer; fill in its record so
            // the exit trace always carries an uncertainty value.
            if trace.exit_layer == depth {
                let dt = trace.data_toks[depth - 1];
                let temb = trace.temb;
                let u = bank.attach(&mut trace.tape, params, depth, dt, temb, per);
                let u_map = trace.tape.values(u).to_vec();
                let u_scalar = policy.aggregation.apply(&u_map);
                records.push(UncertaintyRecord {
                    u_map,
                    u_scalar,
                    layer_index: depth,
                    t,
                });
            }
            let at_exit = records
                .iter()
                .find(|r| r.layer_index == trace.exit_layer)
                .cloned();
            Ok((trace.eps_hat(cfg), trace.exit_layer, at_exit))
        }
    }
}

struct ChainOutput {
    sample: Vec<f64>,
    layers: Vec<usize>,
    traces: Vec<TraceRow>,
    maps: Vec<RecordedMap>,
}

#[allow(clippy::too_many_arguments)]
fn run_chain(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    policy: Option<&ExitPolicy>,
    seed: u64,
    chain: usize,
    timesteps: &[usize],
    inject_noise: bool,
    map_steps: &[usize],
) -> Result<ChainOutput> {
    let cfg = model.config();
    let dim = cfg.data_dim();
    let mut rng = Rng::stream(seed, domain::SAMPLE_CHAIN, chain as u64);
    let mut x = Mat::from_vec(1, dim, rng.normal_vec(dim));
    let mut layers = Vec::with_capacity(timesteps.len());
    let mut traces = Vec::with_capacity(timesteps.len());
    let mut maps = Vec::new();

    for (step, &t) in timesteps.iter().enumerate() {
        let (eps_hat, exit_layer, rec) = early_exit_denoise(model, &x, t, policy)?;
        if !eps_hat.all_finite() {
            return Err(Error::NonFinite {
                component: "predicted noise",
                at_step: Some(step),
            });
        }
        if inject_noise {
            let mut next = posterior_mean(&x, &eps_hat, t, sched)?;
            if t > 1 {
                let std = posterior_variance(t, sched)?.sqrt();
                for v in next.data.iter_mut() {
                    *v += std * rng.normal();
                }
            }
            x = next;
        } else {
            let t_next = if step + 1 < timesteps.len() {
                timesteps[step + 1]
            } else {
                0
            };
            x = deterministic_step(&x, &eps_hat, t, t_next, sched);
        }
        if !x.all_finite() {
            return Err(Error::NonFinite {
                component: "sampler state",
                at_step: Some(step),
            });
        }
        let u_at_exit = rec.as_ref().map(|r| r.u_scalar).unwrap_or(f64::NAN);
        layers.push(exit_layer);
        traces.push(TraceRow {
            sample: chain,
            step,
            t,
            exit_layer,
            u_at_exit,
        });
        if map_steps.contains(&step) {
            if let Some(r) = &rec {
                maps.push(RecordedMap {
                    sample: chain,
                    step,
                    t,
                    u_map: r.u_map.clone(),
                });
            }
        }
    }
    Ok(ChainOutput {
        sample: x.data,
        layers,
        traces,
        maps,
    })
}

#[allow(clippy::too_many_arguments)]
fn collect_chains(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    policy: Option<&ExitPolicy>,
    n: usize,
    seed: u64,
    timesteps: Vec<usize>,
    inject_noise: bool,
    map_steps: &[usize],
    sampler: SamplerKind,
) -> Result<SampleRun> {
    if n < 1 {
        return Err(Error::Invalid("sample count must be >= 1".into()));
    }
    let outputs: Vec<Result<ChainOutput>> = (0..n)
        .into_par_iter()
        .map(|chain| {
            run_chain(
                model,
                sched,
                policy,
                seed,
                chain,
                &timesteps,
                inject_noise,
                map_steps,
            )
        })
        .collect();
    let dim = model.config().data_dim();
    let mut samples = Mat::zeros(n, dim);
    let mut layers_used = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n * timesteps.len());
    let mut maps = Vec::new();
    for (chain, out) in outputs.into_iter().enumerate() {
        let out = out?;
        samples.row_mut(chain).copy_from_slice(&out.sample);
        layers_used.push(out.layers);
        traces.extend(out.traces);
        maps.extend(out.maps);
    }
    Ok(SampleRun {
        samples,
        layers_used,
        traces,
        maps,
        sampler,
        num_steps: timesteps.len(),
        policy: policy.copied(),
        seed,
    })
}

/// Full-length stochastic reverse chain: T steps from pure noise, stepping to
/// the posterior mean plus `sqrt(btilde_t)`-scaled fresh noise (none at t=1).
pub fn ancestral_sample(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    policy: Option<&ExitPolicy>,
    n: usize,
    seed: u64,
    map_steps: &[usize],
) -> Result<SampleRun> {
    let timesteps: Vec<usize> = (1..=sched.num_steps).rev().collect();
    collect_chains(
        model,
        sched,
        policy,
        n,
        seed,
        timesteps,
        true,
        map_steps,
        SamplerKind::Ancestral,
    )
}

/// Strided timesteps from T toward 1, rounding toward larger t.
pub fn strided_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (0..steps)
        .map(|j| (total * (steps - j)).div_ceil(steps))
        .collect()
}

/// One deterministic update from t to t_next (0 means "done", abar_0 = 1):
/// reconstruct x0 from the noise estimate, then re-mix at the target level.
pub fn deterministic_step(
    x_t: &Mat,
    eps_hat: &Mat,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Mat {
    let abar = sched.alpha_bar(t);
    let abar_next = sched.alpha_bar(t_next);
    let (s, c) = (abar.sqrt(), (1.0 - abar).sqrt());
    let (sn, cn) = (abar_next.sqrt(), (1.0 - abar_next).sqrt());
    let data: Vec<f64> = x_t
        .data
        .iter()
        .zip(&eps_hat.data)
        .map(|(&x, &e)| {
            let x0_hat = (x - c * e) / s;
            sn * x0_hat + cn * e
        })
        .collect();
    Mat::from_vec(x_t.rows, x_t.cols, data)
}

/// Exact inverse of the closed-form noising given the true noise.
pub fn reconstruct_x0(x_t: &Mat, eps_hat: &Mat, t: usize, sched: &NoiseSchedule) -> Result<Mat> {
    x_t.check_same_shape(eps_hat, "reconstruct_x0")?;
    let s = sched.signal_coef(t);
    let c = sched.noise_coef(t);
    let data: Vec<f64> = x_t
        .data
        .iter()
        .zip(&eps_hat.data)
        .map(|(&x, &e)| (x - c * e) / s)
        .collect();
    Ok(Mat::from_vec(x_t.rows, x_t.cols, data))
}

/// Few-step deterministic sampler over a strided timestep subsequence.
pub fn deterministic_sample(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    policy: Option<&ExitPolicy>,
    n: usize,
    steps: usize,
    seed: u64,
    map_steps: &[usize],
) -> Result<SampleRun> {
    if steps < 1 || steps > sched.num_steps {
        return Err(Error::Invalid(format!(
            "steps must lie in [1, {}], got {steps}",
            sched.num_steps
        )));
    }
    let timesteps = strided_timesteps(sched.num_steps, steps);
    collect_chains(
        model,
        sched,
        policy,
        n,
        seed,
        timesteps,
        false,
        map_steps,
        SamplerKind::Deterministic,
    )
}

/// Write one grayscale PNG per recorded (sample, step) uncertainty map,
/// values mapped linearly from [0, 1] to [0, 255].
pub fn export_uncertainty_maps(
    run: &SampleRun,
    steps: &[usize],
    dir: &std::path::Path,
    grid: (usize, usize),
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut written = Vec::new();
    for &step in steps {
        let recorded: Vec<&RecordedMap> = run.maps.iter().filter(|m| m.step == step).collect();
        if recorded.is_empty() {
            return Err(Error::Invalid(format!(
                "uncertainty maps were not recorded for step {step}"
            )));
        }
        for m in recorded {
            let (gh, gw) = grid;
            if m.u_map.len() != gh * gw {
                return Err(Error::Shape(format!(
                    "map has {} tokens, grid is {gh}x{gw}",
                    m.u_map.len()
                )));
            }
            let pixels: Vec<u8> = m
                .u_map
                .iter()
                .map(|&u| (u.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            let path = dir.join(format!("u_step{:04}_sample{:03}.png", m.step, m.sample));
            crate::plot::write_gray_png(&path, gw as u32, gh as u32, &pixels)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{default_skip_pairs, BackboneConfig, InputShape};
    use crate::schedule::build_linear_schedule;

    fn tiny_model(seed: u64) -> DenoiserModel {
        let cfg = BackboneConfig {
            depth: 5,
            hidden_dim: 8,
            num_heads: 2,
            patch_size: 1,
            input_shape: InputShape::Vector { dim: 2 },
            skip_pairs: default_skip_pairs(5),
            share_final_head: true,
        };
        DenoiserModel::init(cfg, false, seed).unwrap()
    }

    fn policy(tau: f64) -> ExitPolicy {
        ExitPolicy {
            threshold: tau,
            aggregation: Aggregation::Mean,
            min_layer: 1,
        }
    }

    /// Force layer-dependent uncertainties by rigging head biases.
    fn rig_uem_biases(model: &mut DenoiserModel, us: &[f64]) {
        for (i, &u) in us.iter().enumerate() {
            let head = model.uem.head(i + 1);
            let wid = head.w;
            let bid = head.b;
            let logit = (u / (1.0 - u)).ln();
            for v in model.params.data_mut(wid).iter_mut() {
                *v = 0.0;
            }
            model.params.data_mut(bid)[0] = logit;
        }
    }

    #[test]
    fn threshold_zero_exits_at_full_depth_bitwise() {
        let model = tiny_model(21);
        let x = Mat::from_vec(1, 2, vec![0.4, -0.9]);
        let (full, d_full, _) = early_exit_denoise(&model, &x, 7, None).unwrap();
        let (ee, d_ee, rec) = early_exit_denoise(&model, &x, 7, Some(&policy(0.0))).unwrap();
        assert_eq!(d_full, 5);
        assert_eq!(d_ee, 5);
        assert_eq!(full.data, ee.data);
        let rec = rec.unwrap();
        assert_eq!(rec.layer_index, 5);
        assert!(rec.u_scalar > 0.0 && rec.u_scalar < 1.0);
    }

    #[test]
    fn huge_threshold_exits_at_min_layer() {
        let model = tiny_model(22);
        let x = Mat::from_vec(1, 2, vec![0.1, 0.2]);
        let (_, depth, _) = early_exit_denoise(&model, &x, 3, Some(&policy(1.5))).unwrap();
        assert_eq!(depth, 1);
        let mut pol = policy(1.5);
        pol.min_layer = 3;
        let (_, depth, rec) = early_exit_denoise(&model, &x, 3, Some(&pol)).unwrap();
        assert_eq!(depth, 3);
        assert_eq!(rec.unwrap().layer_index, 3);
    }

    #[test]
    fn exit_depth_monotone_in_threshold() {
        let mut model = tiny_model(23);
        rig_uem_biases(&mut model, &[0.5, 0.3, 0.15, 0.03, 0.01]);
        let x = Mat::from_vec(1, 2, vec![0.8, -0.1]);
        let mut last_depth = 0usize;
        for tau in [0.2, 0.1, 0.05, 0.02] {
            let (_, depth, _) = early_exit_denoise(&model, &x, 5, Some(&policy(tau))).unwrap();
            assert!(
                depth >= last_depth,
                "depth should weakly increase as tau shrinks"
            );
            last_depth = depth;
        }
        // tau = 0.2 exits where u < 0.2 first (layer 3), tau = 0.02 at layer 5.
        let (_, d_loose, _) = early_exit_denoise(&model, &x, 5, Some(&policy(0.2))).unwrap();
        let (_, d_tight, _) = early_exit_denoise(&model, &x, 5, Some(&policy(0.02))).unwrap();
        assert_eq!(d_loose, 3);
        assert_eq!(d_tight, 5);
    }

    #[test]
    fn ancestral_threshold_zero_equals_uem_free_run_bitwise() {
        let model = tiny_model(24);
        let sched = build_linear_schedule(30, 1e-3, 0.05).unwrap();
        let a = ancestral_sample(&model, &sched, Some(&policy(0.0)), 3, 99, &[]).unwrap();
        let b = ancestral_sample(&model, &sched, None, 3, 99, &[]).unwrap();
        assert_eq!(a.samples.data, b.samples.data);
        assert!(a.layers_used.iter().flatten().all(|&l| l == 5));
        // One trace row per (sample, step).
        assert_eq!(a.traces.len(), 3 * 30);
        assert_eq!(a.layers_used.len(), 3);
        assert!(a.layers_used.iter().all(|l| l.len() == 30));
    }

    #[test]
    fn deterministic_threshold_zero_equals_uem_free_run_bitwise() {
        let model = tiny_model(25);
        let sched = build_linear_schedule(40, 1e-3, 0.05).unwrap();
        let a = deterministic_sample(&model, &sched, Some(&policy(0.0)), 2, 10, 7, &[]).unwrap();
        let b = deterministic_sample(&model, &sched, None, 2, 10, 7, &[]).unwrap();
        assert_eq!(a.samples.data, b.samples.data);
        assert_eq!(a.num_steps, 10);
    }

    #[test]
    fn sampling_is_seed_reproducible() {
        let model = tiny_model(26);
        let sched = build_linear_schedule(20, 1e-3, 0.05).unwrap();
        let a = ancestral_sample(&model, &sched, Some(&policy(0.1)), 4, 5, &[]).unwrap();
        let b = ancestral_sample(&model, &sched, Some(&policy(0.1)), 4, 5, &[]).unwrap();
        assert_eq!(a.samples.data, b.samples.data);
        let c = ancestral_sample(&model, &sched, Some(&policy(0.1)), 4, 6, &[]).unwrap();
        assert_ne!(a.samples.data, c.samples.data);
    }

    #[test]
    fn strided_schedule_construction() {
        assert_eq!(strided_timesteps(1000, 4), vec![1000, 750, 500, 250]);
        assert_eq!(
            strided_timesteps(10, 10),
            (1..=10).rev().collect::<Vec<_>>()
        );
        assert_eq!(strided_timesteps(7, 3), vec![7, 5, 3]);
        // steps = T reduces to the stride-1 chain ending at t=1.
        let full = strided_timesteps(25, 25);
        assert_eq!(full.first(), Some(&25));
        assert_eq!(full.last(), Some(&1));
    }

    #[test]
    fn deterministic_sampler_rejects_bad_steps() {
        let model = tiny_model(27);
        let sched = build_linear_schedule(20, 1e-3, 0.05).unwrap();
        assert!(deterministic_sample(&model, &sched, None, 1, 0, 1, &[]).is_err());
        assert!(deterministic_sample(&model, &sched, None, 1, 21, 1, &[]).is_err());
    }

    #[test]
    fn x0_reconstruction_is_exact_inverse() {
        let sched = build_linear_schedule(50, 1e-3, 0.04).unwrap();
        let x0 = Mat::from_vec(1, 3, vec![0.3, -1.2, 0.9]);
        let eps = Mat::from_vec(1, 3, vec![0.5, 0.1, -0.7]);
        let ns = crate::schedule::forward_diffuse(&x0, 33, &eps, &sched).unwrap();
        let rec = reconstruct_x0(&ns.x_t, &eps, 33, &sched).unwrap();
        for (a, b) in rec.data.iter().zip(&x0.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn final_deterministic_step_lands_on_x0_hat() {
        let sched = build_linear_schedule(10, 1e-3, 0.05).unwrap();
        let x_t = Mat::scalar(0.7);
        let eps_hat = Mat::scalar(-0.2);
        let stepped = deterministic_step(&x_t, &eps_hat, 3, 0, &sched);
        let x0_hat = reconstruct_x0(&x_t, &eps_hat, 3, &sched).unwrap();
        assert_eq!(stepped.data, x0_hat.data);
    }

    #[test]
    fn map_recording_and_export() {
        let cfg = BackboneConfig {
            depth: 3,
            hidden_dim: 8,
            num_heads: 2,
            patch_size: 2,
            input_shape: InputShape::Image {
                height: 4,
                width: 4,
            },
            skip_pairs: vec![],
            share_final_head: true,
        };
        let model = DenoiserModel::init(cfg, false, 3).unwrap();
        let sched = build_linear_schedule(6, 1e-3, 0.05).unwrap();
        let run = ancestral_sample(&model, &sched, Some(&policy(0.0)), 2, 11, &[0, 3]).unwrap();
        assert_eq!(run.maps.len(), 2 * 2);
        let dir = std::env::temp_dir().join("exitdiff_map_test");
        let files = export_uncertainty_maps(&run, &[0, 3], &dir, (2, 2)).unwrap();
        assert_eq!(files.len(), 4);
        assert!(files.iter().all(|f| f.exists()));
        assert!(export_uncertainty_maps(&run, &[1], &dir, (2, 2)).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
