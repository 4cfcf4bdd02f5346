//! Run configuration: a nested key-value document with schema validation,
//! defaults, dotted-path overrides and a round-trippable echo.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{default_skip_pairs, BackboneConfig};
use crate::error::{Error, Result};
use crate::sampling::{ExitPolicy, SamplerKind};
use crate::schedule::NoiseSchedule;
use crate::training::DatasetKind;
use crate::uem::{Aggregation, LayerwiseMode, LossWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub share_final_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 13,
            hidden_dim: 64,
            num_heads: 4,
            patch_size: 1,
            share_final_head: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UemConfig {
    pub share_params: bool,
    pub aggregation: Aggregation,
}

impl Default for UemConfig {
    fn default() -> Self {
        UemConfig {
            share_params: false,
            aggregation: Aggregation::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_u: f64,
    pub beta_ual: f64,
    pub layerwise: LayerwiseMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_u: 1.0,
            beta_ual: 1.0,
            layerwise: LayerwiseMode::UncertaintyWeighted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::GaussianMixture,
            n: 8192,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub checkpoint_every: usize,
    pub dataset: DatasetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            adam_beta1: 0.99,
            adam_beta2: 0.99,
            weight_decay: 0.03,
            batch_size: 64,
            total_steps: 20_000,
            checkpoint_every: 5_000,
            dataset: DatasetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExitConfig {
    pub threshold: f64,
    pub min_layer: usize,
}

impl Default for ExitConfig {
    fn default() -> Self {
        ExitConfig {
            threshold: 0.1,
            min_layer: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub sampler: SamplerKind,
    pub steps: usize,
    pub thresholds: Vec<f64>,
    pub mmd_bandwidths: Vec<f64>,
    pub probe_batch: usize,
    pub t_grid_points: usize,
    pub error_chains: usize,
    /// Sampling-loop positions at which to record uncertainty maps;
    /// empty means six evenly spaced steps.
    pub map_steps: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 1024,
            sampler: SamplerKind::Deterministic,
            steps: 50,
            thresholds: vec![0.2, 0.1, 0.05, 0.02, 0.01],
            mmd_bandwidths: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            probe_batch: 256,
            t_grid_points: 10,
            error_chains: 16,
            map_steps: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_root: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub uem: UemConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub exit: ExitConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train.learning_rate <= 0.0 {
            return Err(Error::Config("train.learning_rate must be > 0".into()));
        }
        if self.train.batch_size < 1 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.train.dataset.n < 1 {
            return Err(Error::Config("train.dataset.n must be >= 1".into()));
        }
        if self.eval.steps < 1 || self.eval.steps > self.schedule.num_steps {
            return Err(Error::Config(format!(
                "eval.steps must lie in [1, {}]",
                self.schedule.num_steps
            )));
        }
        self.backbone_config()?.validate()?;
        self.exit_policy().validate(self.model.depth)?;
        // Schedule arguments are validated on construction.
        self.noise_schedule()?;
        Ok(())
    }

    /// The architecture implied by this config; the input shape follows the
    /// training dataset.
    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        Ok(BackboneConfig {
            depth: self.model.depth,
            hidden_dim: self.model.hidden_dim,
            num_heads: self.model.num_heads,
            patch_size: self.model.patch_size,
            input_shape: self.train.dataset.kind.input_shape(),
            skip_pairs: default_skip_pairs(self.model.depth),
            share_final_head: self.model.share_final_head,
        })
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        crate::schedule::build_linear_schedule(
            self.schedule.num_steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )
    }

    pub fn exit_policy(&self) -> ExitPolicy {
        ExitPolicy {
            threshold: self.exit.threshold,
            aggregation: self.uem.aggregation,
            min_layer: self.exit.min_layer,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_u: self.loss.lambda_u,
            beta_ual: self.loss.beta_ual,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse one dotted-path override like `exit.threshold=0.05` into the
/// document before schema validation.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} must look like key.path=value")))?;
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = path.trim().split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override path {path:?}")));
    }
    let mut cur = doc;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{part} in {path:?} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Load a config file, apply overrides, validate against the schema
/// (rejecting unknown keys) and return the fully resolved document.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: toml::Table = match path {
        None => toml::Table::new(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| {
                Error::Config(format!("config {} is not valid TOML: {e}", p.display()))
            })?
        }
    };
    for ov in overrides {
        apply_override(&mut doc, ov)?;
    }
    let cfg: RunConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Key paths whose values differ between two configs.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let va = serde_json::to_value(a).expect("config serializes");
    let vb = serde_json::to_value(b).expect("config serializes");
    let mut out = Vec::new();
    diff_values("", &va, &vb, &mut out);
    out
}

fn diff_values(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            for (k, va) in ma {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match mb.get(k) {
                    Some(vb) => diff_values(&path, va, vb, out),
                    None => out.push(path),
                }
            }
            for k in mb.keys() {
                if !ma.contains_key(k) {
                    out.push(format!("{prefix}.{k}"));
                }
            }
        }
        _ => {
            if a != b {
                out.push(prefix.to_string());
            }
        }
    }
}
