//! Checkpoint archive: a structured-text metadata header followed by a table
//! of named tensors with little-endian raw values.
//!
//! Layout:
//! ```text
//! magic "EXITDIFFCKPT1\n"
//! u64 LE header byte length
//! header JSON { format_version, step, opt_step, config, tensors: [...] }
//! for each tensor in header order: rows*cols f64 little-endian
//! ```
//! Saves go through a temp file plus rename, and loads build state only
//! after the whole file parses, so a truncated file never yields a partial
//! model.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::DenoiserModel;
use crate::training::AdamW;

const MAGIC: &[u8] = b"EXITDIFFCKPT1\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    dtype: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: u64,
    opt_step: u64,
    config: RunConfig,
    tensors: Vec<TensorMeta>,
}

pub struct LoadedCheckpoint {
    pub config: RunConfig,
    pub step: u64,
    pub model: DenoiserModel,
    pub opt: AdamW,
}

impl std::fmt::Debug for LoadedCheckpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoadedCheckpoint")
            .field("step", &self.step)
            .field("params", &self.model.params.num_scalars())
            .finish()
    }
}

pub fn save_checkpoint(
    model: &DenoiserModel,
    opt: &AdamW,
    config: &RunConfig,
    step: u64,
    path: &Path,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blobs: Vec<&[f64]> = Vec::new();
    for (_, p) in model.params.iter() {
        tensors.push(TensorMeta {
            name: format!("model.{}", p.name),
            dtype: "f64".into(),
            rows: p.rows,
            cols: p.cols,
        });
        blobs.push(&p.data);
    }
    for (kind, stash) in [("m", &opt.m), ("v", &opt.v)] {
        for ((_, p), values) in model.params.iter().zip(stash) {
            tensors.push(TensorMeta {
                name: format!("adam.{kind}.{}", p.name),
                dtype: "f64".into(),
                rows: p.rows,
                cols: p.cols,
            });
            blobs.push(values);
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        step,
        opt_step: opt.step,
        config: config.clone(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let tmp = path.with_extension("tmp");
    {
        let file =
            std::fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e: std::io::Error| Error::io(tmp.display().to_string(), e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(io)?;
        w.write_all(&header_json).map_err(io)?;
        for blob in blobs {
            for v in blob {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint archive (bad magic)",
            path.display()
        )));
    }
    let mut off = MAGIC.len();
    let header_len = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    off += 8;
    if bytes.len() < off + header_len {
        return Err(Error::Checkpoint(format!(
            "{} is truncated inside the header",
            path.display()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[off..off + header_len])
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    off += header_len;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }

    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if bytes.len() - off != expected {
        return Err(Error::Checkpoint(format!(
            "{}: tensor payload is {} bytes, header promises {expected}",
            path.display(),
            bytes.len() - off
        )));
    }

    let config = header.config;
    config.validate()?;
    let mut model = DenoiserModel::init(
        config.backbone_config()?,
        config.uem.share_params,
        config.seed,
    )?;
    let mut opt = AdamW::new(
        &model.params,
        config.train.learning_rate,
        config.train.adam_beta1,
        config.train.adam_beta2,
        config.train.weight_decay,
    );
    opt.step = header.opt_step;

    let mut seen = std::collections::HashSet::new();
    for meta in &header.tensors {
        let n = meta.rows * meta.cols;
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let s = off + i * 8;
            values.push(f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap()));
        }
        off += n * 8;
        if meta.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "tensor {} has unsupported dtype {}",
                meta.name, meta.dtype
            )));
        }
        let (dest, name) = match meta.name.split_once('.') {
            Some(("model", rest)) => (0, rest),
            Some(("adam", rest)) => match rest.split_once('.') {
                Some(("m", inner)) => (1, inner),
                Some(("v", inner)) => (2, inner),
                _ => {
                    return Err(Error::Checkpoint(format!("unknown tensor {}", meta.name)));
                }
            },
            _ => return Err(Error::Checkpoint(format!("unknown tensor {}", meta.name))),
        };
        let id = model.params.by_name(name).ok_or_else(|| {
            Error::Checkpoint(format!(
                "tensor {} does not exist in the architecture this config builds",
                meta.name
            ))
        })?;
        let p = model.params.param(id);
        if (p.rows, p.cols) != (meta.rows, meta.cols) {
            return Err(Error::Checkpoint(format!(
                "tensor {}: shape {}x{} in file, {}x{} in architecture",
                meta.name, meta.rows, meta.cols, p.rows, p.cols
            )));
        }
        match dest {
            0 => model.params.data_mut(id).copy_from_slice(&values),
            1 => opt.m[id.0].copy_from_slice(&values),
            _ => opt.v[id.0].copy_from_slice(&values),
        }
        seen.insert(meta.name.clone());
    }
    let expected_tensors = model.params.len() * 3;
    if seen.len() != expected_tensors {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, architecture needs {expected_tensors}",
            seen.len()
        )));
    }

    Ok(LoadedCheckpoint {
        config,
        step: header.step,
        model,
        opt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{draw_batch, train_step};
    use crate::uem::{LayerwiseMode, LossWeights};

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.depth = 3;
        cfg.model.hidden_dim = 8;
        cfg.model.num_heads = 2;
        cfg.schedule.num_steps = 12;
        cfg.train.batch_size = 4;
        cfg.train.dataset.n = 64;
        cfg.eval.steps = 6;
        cfg.seed = 17;
        cfg
    }

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("exitdiff_ckpt_tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let cfg = small_config();
        let model = DenoiserModel::init(cfg.backbone_config().unwrap(), false, cfg.seed).unwrap();
        let opt = AdamW::new(&model.params, 2e-4, 0.99, 0.99, 0.03);
        let path = temp_path("roundtrip.ckpt");
        save_checkpoint(&model, &opt, &cfg, 5, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, 5);
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.model.params.get_flat(), model.params.get_flat());
        assert_eq!(loaded.opt.m, opt.m);
        assert_eq!(loaded.opt.v, opt.v);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn resume_continues_identically() {
        let cfg = small_config();
        let sched = cfg.noise_schedule().unwrap();
        let dataset = crate::training::make_toy_dataset(
            cfg.train.dataset.kind,
            cfg.train.dataset.n,
            cfg.seed,
        )
        .unwrap();
        let weights = LossWeights::default();

        let mut model =
            DenoiserModel::init(cfg.backbone_config().unwrap(), false, cfg.seed).unwrap();
        let mut opt = AdamW::new(&model.params, 2e-4, 0.99, 0.99, 0.03);
        let step_fn = |model: &mut DenoiserModel, opt: &mut AdamW, step: u64| {
            let (x0, ts, eps) = draw_batch(&dataset, 4, sched.num_steps, cfg.seed, step);
            train_step(
                model,
                opt,
                &x0,
                &ts,
                &eps,
                &sched,
                &weights,
                LayerwiseMode::UncertaintyWeighted,
                None,
            )
            .unwrap()
            .total
        };

        for step in 0..3 {
            step_fn(&mut model, &mut opt, step);
        }
        let path = temp_path("resume.ckpt");
        save_checkpoint(&model, &opt, &cfg, 3, &path).unwrap();
        let uninterrupted = step_fn(&mut model, &mut opt, 3);

        let mut loaded = load_checkpoint(&path).unwrap();
        let resumed = step_fn(&mut loaded.model, &mut loaded.opt, loaded.step);
        assert_eq!(uninterrupted, resumed);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn truncated_file_is_a_structured_error() {
        let cfg = small_config();
        let model = DenoiserModel::init(cfg.backbone_config().unwrap(), false, cfg.seed).unwrap();
        let opt = AdamW::new(&model.params, 2e-4, 0.99, 0.99, 0.03);
        let path = temp_path("trunc.ckpt");
        save_checkpoint(&model, &opt, &cfg, 1, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [10usize, 40, bytes.len() / 2, bytes.len() - 5] {
            let p = temp_path("trunc_cut.ckpt");
            std::fs::write(&p, &bytes[..cut]).unwrap();
            let err = load_checkpoint(&p).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "cut {cut}: {err}");
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_checkpoint(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.ckpt"));
    }
}
