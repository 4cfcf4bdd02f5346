//! Command implementations and run-directory artifact writing.
//!
//! Every command resolves its configuration, echoes it into the output
//! directory, and emits tables as CSV with documented header rows plus a
//! rendered PNG. Reruns with the same seed reproduce CSV artifacts
//! byte-for-byte.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    error_accumulation_curve, layer_redundancy_profile, layer_usage_report, mmd_quality,
    run_sampler, threshold_sweep, SamplerSpec,
};
use crate::model::DenoiserModel;
use crate::plot::{Plot, BLUE, GREEN, ORANGE};
use crate::sampling::{export_uncertainty_maps, ExitPolicy, SampleRun, SamplerKind};
use crate::tensor::Mat;
use crate::training::{draw_batch, make_toy_dataset, train_step, AdamW, TimestepLossHistogram};

/// Environment variable naming the default output root when --out is absent.
pub const OUT_ROOT_ENV: &str = "EXITDIFF_OUT";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Format a float with round-trippable precision.
fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.12e}")
    }
}

/// Resolve the output directory: explicit flag, then config, then the
/// environment root with a per-command subdirectory.
pub fn resolve_out_dir(out: Option<&Path>, cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    if let Some(p) = out {
        return Ok(p.to_path_buf());
    }
    let root = cfg
        .paths
        .out_root
        .clone()
        .or_else(|| std::env::var(OUT_ROOT_ENV).ok())
        .ok_or_else(|| {
            Error::Config(format!(
                "no output directory: pass --out, set paths.out_root, or export {OUT_ROOT_ENV}"
            ))
        })?;
    Ok(PathBuf::from(root).join(format!("{command}-seed{}", cfg.seed)))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join("config.toml"), &cfg.to_toml())
}

pub struct TrainArtifacts {
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub model: DenoiserModel,
    pub hist: TimestepLossHistogram,
}

/// Train from scratch (or resume), writing checkpoints, the loss curve and
/// the timestep histogram.
pub fn cmd_train(
    cfg: &RunConfig,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let out_dir = resolve_out_dir(out, cfg, "train")?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    echo_config(cfg, &out_dir)?;

    let sched = cfg.noise_schedule()?;
    let dataset = make_toy_dataset(cfg.train.dataset.kind, cfg.train.dataset.n, cfg.seed)?;

    let (mut model, mut opt, start_step) = match resume {
        None => {
            let model =
                DenoiserModel::init(cfg.backbone_config()?, cfg.uem.share_params, cfg.seed)?;
            let opt = AdamW::new(
                &model.params,
                cfg.train.learning_rate,
                cfg.train.adam_beta1,
                cfg.train.adam_beta2,
                cfg.train.weight_decay,
            );
            (model, opt, 0u64)
        }
        Some(path) => {
            let loaded = load_checkpoint(path)?;
            let diff = crate::config::config_diff(&loaded.config, cfg);
            if !diff.is_empty() {
                return Err(Error::Config(format!(
                    "resume config conflicts with checkpoint on keys: {}",
                    diff.join(", ")
                )));
            }
            (loaded.model, loaded.opt, loaded.step)
        }
    };

    let weights = cfg.loss_weights();
    let mode = cfg.loss.layerwise;
    let mut hist = TimestepLossHistogram::new(sched.num_steps);
    let mut loss_rows =
        String::from("step,loss_simple,loss_uncertainty,loss_layerwise,loss_total\n");

    for step in start_step..cfg.train.total_steps as u64 {
        let (x0, ts, eps) = draw_batch(
            &dataset,
            cfg.train.batch_size,
            sched.num_steps,
            cfg.seed,
            step,
        );
        let losses = train_step(
            &mut model,
            &mut opt,
            &x0,
            &ts,
            &eps,
            &sched,
            &weights,
            mode,
            Some(&mut hist),
        )
        .map_err(|e| match e {
            Error::NonFinite { component, .. } => Error::NonFinite {
                component,
                at_step: Some(step as usize),
            },
            other => other,
        })?;
        loss_rows.push_str(&format!(
            "{},{},{},{},{}\n",
            step,
            fmt(losses.simple),
            fmt(losses.uncertainty),
            fmt(losses.layerwise),
            fmt(losses.total)
        ));
        let done = step + 1;
        if cfg.train.checkpoint_every > 0
            && done % cfg.train.checkpoint_every as u64 == 0
            && done < cfg.train.total_steps as u64
        {
            save_checkpoint(
                &model,
                &opt,
                cfg,
                done,
                &out_dir.join(format!("ckpt_{done:07}.bin")),
            )?;
        }
    }

    let final_checkpoint = out_dir.join("ckpt_final.bin");
    save_checkpoint(
        &model,
        &opt,
        cfg,
        cfg.train.total_steps as u64,
        &final_checkpoint,
    )?;
    write_file(&out_dir.join("loss_curve.csv"), &loss_rows)?;

    let mut hist_rows = String::from("t,count,mean_loss_simple\n");
    for t in 1..=sched.num_steps {
        hist_rows.push_str(&format!(
            "{},{},{}\n",
            t,
            hist.counts[t - 1],
            hist.mean(t).map(fmt).unwrap_or_else(|| "nan".into())
        ));
    }
    write_file(&out_dir.join("timestep_hist.csv"), &hist_rows)?;

    // Loss-curve figure from the logged totals.
    let steps: Vec<f64> = (start_step..cfg.train.total_steps as u64)
        .map(|s| s as f64)
        .collect();
    if !steps.is_empty() {
        let totals: Vec<f64> = loss_rows
            .lines()
            .skip(1)
            .map(|l| {
                l.rsplit(',')
                    .next()
                    .unwrap()
                    .parse::<f64>()
                    .unwrap_or(f64::NAN)
            })
            .collect();
        let mut plot = Plot::fit(640, 360, &steps, &totals);
        plot.line(&steps, &totals, BLUE);
        plot.save(&out_dir.join("loss_curve.png"))?;
    }

    Ok(TrainArtifacts {
        out_dir,
        final_checkpoint,
        model,
        hist,
    })
}

fn efficiency_csv(report: &crate::eval::EfficiencyReport) -> String {
    format!(
        "avg_layers,layers_ratio_reduction,flops_full,flops_actual\n{},{},{},{}\n",
        fmt(report.avg_layers),
        fmt(report.layers_ratio_reduction),
        fmt(report.flops_full),
        fmt(report.flops_actual)
    )
}

fn traces_csv(run: &SampleRun) -> String {
    let mut rows = String::from("sample,step,t,exit_layer,u_at_exit\n");
    for tr in &run.traces {
        rows.push_str(&format!(
            "{},{},{},{},{}\n",
            tr.sample,
            tr.step,
            tr.t,
            tr.exit_layer,
            fmt(tr.u_at_exit)
        ));
    }
    rows
}

/// Serialize generated samples in the tensor-archive layout used by
/// checkpoints: a JSON header plus little-endian raw values.
fn write_samples_archive(path: &Path, samples: &Mat) -> Result<()> {
    let header = serde_json::json!({
        "format_version": 1,
        "tensors": [{"name": "samples", "dtype": "f64", "rows": samples.rows, "cols": samples.cols}],
    });
    let header_bytes = serde_json::to_vec(&header).expect("json");
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(b"EXITDIFFTENS1\n").map_err(io)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&header_bytes).map_err(io)?;
    for v in &samples.data {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn scatter_png(path: &Path, samples: &Mat) -> Result<()> {
    if samples.cols != 2 {
        return Ok(());
    }
    let xs: Vec<f64> = (0..samples.rows).map(|r| samples.at(r, 0)).collect();
    let ys: Vec<f64> = (0..samples.rows).map(|r| samples.at(r, 1)).collect();
    let mut plot = Plot::fit(480, 480, &xs, &ys);
    for (x, y) in xs.iter().zip(&ys) {
        plot.point(*x, *y, BLUE);
    }
    plot.save(path)
}

fn default_map_steps(cfg: &RunConfig, num_steps: usize) -> Vec<usize> {
    if !cfg.eval.map_steps.is_empty() {
        return cfg.eval.map_steps.clone();
    }
    let k = 6.min(num_steps);
    (0..k).map(|i| i * num_steps / k).collect()
}

pub struct SampleArtifacts {
    pub out_dir: PathBuf,
    pub run: SampleRun,
}

/// Generate samples from a checkpoint, writing the sample archive, the exit
/// traces, the efficiency table and uncertainty maps.
pub fn cmd_sample(
    checkpoint: &Path,
    cfg_overlay: &RunConfig,
    out: Option<&Path>,
) -> Result<SampleArtifacts> {
    let loaded = load_checkpoint(checkpoint)?;
    let cfg = merge_eval_settings(loaded.config, cfg_overlay);
    let out_dir = resolve_out_dir(out, &cfg, "sample")?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    echo_config(&cfg, &out_dir)?;

    let sched = cfg.noise_schedule()?;
    let steps = match cfg.eval.sampler {
        SamplerKind::Ancestral => sched.num_steps,
        SamplerKind::Deterministic => cfg.eval.steps,
    };
    let map_steps = default_map_steps(&cfg, steps);
    let policy = cfg.exit_policy();
    let spec = SamplerSpec {
        kind: cfg.eval.sampler,
        steps: cfg.eval.steps,
    };
    let run = run_sampler(
        &loaded.model,
        &sched,
        spec,
        Some(&policy),
        cfg.eval.n_samples,
        cfg.seed,
        &map_steps,
    )?;

    write_samples_archive(&out_dir.join("samples.bin"), &run.samples)?;
    write_file(&out_dir.join("traces.csv"), &traces_csv(&run))?;
    let report = layer_usage_report(&run, loaded.model.config())?;
    write_file(&out_dir.join("efficiency.csv"), &efficiency_csv(&report))?;
    scatter_png(&out_dir.join("samples.png"), &run.samples)?;
    export_uncertainty_maps(
        &run,
        &map_steps,
        &out_dir.join("maps"),
        loaded.model.config().token_grid(),
    )?;
    Ok(SampleArtifacts { out_dir, run })
}

/// Checkpoint config drives the architecture; the caller's overlay controls
/// evaluation-side settings (sampler, thresholds, counts, seed).
fn merge_eval_settings(mut base: RunConfig, overlay: &RunConfig) -> RunConfig {
    base.seed = overlay.seed;
    base.eval = overlay.eval.clone();
    base.exit = overlay.exit.clone();
    base.uem.aggregation = overlay.uem.aggregation;
    base.paths = overlay.paths.clone();
    base
}

pub struct EvalArtifacts {
    pub out_dir: PathBuf,
    pub report: crate::eval::EfficiencyReport,
    pub mmd: f64,
    pub error_curve: Vec<f64>,
}

/// Quality and efficiency of one checkpoint at one threshold, plus the
/// error-accumulation curve against the full-depth trajectory.
pub fn cmd_eval(
    checkpoint: &Path,
    cfg_overlay: &RunConfig,
    out: Option<&Path>,
) -> Result<EvalArtifacts> {
    let loaded = load_checkpoint(checkpoint)?;
    let cfg = merge_eval_settings(loaded.config, cfg_overlay);
    let out_dir = resolve_out_dir(out, &cfg, "eval")?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    echo_config(&cfg, &out_dir)?;

    let sched = cfg.noise_schedule()?;
    let policy = cfg.exit_policy();
    let spec = SamplerSpec {
        kind: cfg.eval.sampler,
        steps: cfg.eval.steps,
    };
    let reference = make_toy_dataset(
        cfg.train.dataset.kind,
        cfg.train.dataset.n,
        cfg.seed ^ 0x5eed,
    )?;
    let run = run_sampler(
        &loaded.model,
        &sched,
        spec,
        Some(&policy),
        cfg.eval.n_samples,
        cfg.seed,
        &[],
    )?;
    let report = layer_usage_report(&run, loaded.model.config())?;
    let mmd = mmd_quality(&run.samples, &reference, &cfg.eval.mmd_bandwidths)?;
    let curve = error_accumulation_curve(
        &loaded.model,
        &policy,
        &sched,
        cfg.eval.error_chains,
        cfg.seed,
    )?;

    write_file(&out_dir.join("efficiency.csv"), &efficiency_csv(&report))?;
    let mut err_rows = String::from("step,mse_vs_full_depth\n");
    for (i, v) in curve.iter().enumerate() {
        err_rows.push_str(&format!("{i},{}\n", fmt(*v)));
    }
    write_file(&out_dir.join("error_accum.csv"), &err_rows)?;
    let xs: Vec<f64> = (0..curve.len()).map(|i| i as f64).collect();
    let mut plot = Plot::fit(640, 360, &xs, &curve);
    plot.line(&xs, &curve, ORANGE);
    plot.save(&out_dir.join("error_accum.png"))?;

    let metrics = serde_json::json!({
        "mmd": mmd,
        "avg_layers": report.avg_layers,
        "layers_ratio_reduction": report.layers_ratio_reduction,
        "flops_full": report.flops_full,
        "flops_actual": report.flops_actual,
        "threshold": policy.threshold,
        "sampler": cfg.eval.sampler.to_string(),
        "n_samples": cfg.eval.n_samples,
        "seed": cfg.seed,
        "terminal_error": curve.last().copied().unwrap_or(0.0),
    });
    write_file(
        &out_dir.join("metrics.json"),
        &serde_json::to_string_pretty(&metrics).expect("json"),
    )?;
    Ok(EvalArtifacts {
        out_dir,
        report,
        mmd,
        error_curve: curve,
    })
}

pub struct ProfileArtifacts {
    pub out_dir: PathBuf,
    pub profile: Mat,
    pub t_grid: Vec<usize>,
}

/// Layer-redundancy profile: per-layer, per-timestep MSE against the deepest
/// head over a fixed probe batch.
pub fn cmd_profile(
    checkpoint: &Path,
    cfg_overlay: &RunConfig,
    out: Option<&Path>,
) -> Result<ProfileArtifacts> {
    let loaded = load_checkpoint(checkpoint)?;
    let cfg = merge_eval_settings(loaded.config, cfg_overlay);
    let out_dir = resolve_out_dir(out, &cfg, "profile")?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    echo_config(&cfg, &out_dir)?;

    let sched = cfg.noise_schedule()?;
    let dataset = make_toy_dataset(cfg.train.dataset.kind, cfg.train.dataset.n, cfg.seed)?;
    let points = cfg.eval.t_grid_points.max(1).min(sched.num_steps);
    let t_grid: Vec<usize> = (0..points)
        .map(|i| 1 + i * (sched.num_steps - 1) / points.max(1))
        .collect();
    let profile = layer_redundancy_profile(
        &loaded.model,
        &dataset,
        &sched,
        &t_grid,
        cfg.eval.probe_batch,
        cfg.seed,
    )?;

    let mut rows = String::from("layer");
    for t in &t_grid {
        rows.push_str(&format!(",t{t}"));
    }
    rows.push('\n');
    for layer in 0..profile.rows {
        rows.push_str(&format!("{}", layer + 1));
        for c in 0..profile.cols {
            rows.push_str(&format!(",{}", fmt(profile.at(layer, c))));
        }
        rows.push('\n');
    }
    write_file(&out_dir.join("redundancy.csv"), &rows)?;

    // Heatmap: layers down, timesteps across, dark = redundant.
    let max = profile
        .data
        .iter()
        .cloned()
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let scale = 24usize;
    let (h, w) = (profile.rows * scale, profile.cols * scale);
    let mut pixels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = profile.at(y / scale, x / scale) / max;
            pixels[y * w + x] = (v.sqrt() * 255.0).round() as u8;
        }
    }
    crate::plot::write_gray_png(&out_dir.join("redundancy.png"), w as u32, h as u32, &pixels)?;
    Ok(ProfileArtifacts {
        out_dir,
        profile,
        t_grid,
    })
}

pub struct SweepArtifacts {
    pub out_dir: PathBuf,
    pub points: Vec<crate::eval::TradeoffPoint>,
}

/// Threshold sweep: one generation plus quality evaluation per threshold.
pub fn cmd_sweep(
    checkpoint: &Path,
    cfg_overlay: &RunConfig,
    thresholds: &[f64],
    out: Option<&Path>,
) -> Result<SweepArtifacts> {
    if thresholds.is_empty() {
        return Err(Error::Config("threshold list must be nonempty".into()));
    }
    let loaded = load_checkpoint(checkpoint)?;
    let cfg = merge_eval_settings(loaded.config, cfg_overlay);
    let out_dir = resolve_out_dir(out, &cfg, "sweep")?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    echo_config(&cfg, &out_dir)?;

    let sched = cfg.noise_schedule()?;
    let reference = make_toy_dataset(
        cfg.train.dataset.kind,
        cfg.train.dataset.n,
        cfg.seed ^ 0x5eed,
    )?;
    let spec = SamplerSpec {
        kind: cfg.eval.sampler,
        steps: cfg.eval.steps,
    };
    let base = ExitPolicy {
        threshold: 0.0,
        aggregation: cfg.uem.aggregation,
        min_layer: cfg.exit.min_layer,
    };
    let points = threshold_sweep(
        &loaded.model,
        &sched,
        thresholds,
        spec,
        cfg.eval.n_samples,
        &reference,
        &cfg.eval.mmd_bandwidths,
        base,
        cfg.seed,
    )?;

    let mut rows = String::from("threshold,mmd,layers_ratio_reduction,avg_layers,flops_actual\n");
    for p in &points {
        rows.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt(p.threshold),
            fmt(p.quality),
            fmt(p.layers_ratio_reduction),
            fmt(p.avg_layers),
            fmt(p.flops_actual)
        ));
    }
    write_file(&out_dir.join("tradeoff.csv"), &rows)?;

    let xs: Vec<f64> = points
        .iter()
        .map(|p| p.layers_ratio_reduction * 100.0)
        .collect();
    let ys: Vec<f64> = points.iter().map(|p| p.quality).collect();
    let mut plot = Plot::fit(640, 360, &xs, &ys);
    plot.line(&xs, &ys, GREEN);
    for (x, y) in xs.iter().zip(&ys) {
        plot.point(*x, *y, ORANGE);
    }
    plot.save(&out_dir.join("tradeoff.png"))?;
    Ok(SweepArtifacts { out_dir, points })
}
