//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mosaic_core::diffusion::{DiffusionConfig, SamplerVariance};
use mosaic_core::model::{AttentionConfig, BackboneKind, ModelConfig};
use mosaic_core::train::{default_epochs, OneCycleConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable that replaces `paths.out_dir`.
pub const OUT_ENV: &str = "MOSAIC_OUT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub diffusion: DiffusionSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { n: 2048, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// `beta` or `posterior_beta`.
    pub sampler_variance: String,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let d = DiffusionConfig::default();
        Self {
            steps: d.steps,
            beta_start: d.beta_start,
            beta_end: d.beta_end,
            sampler_variance: "beta".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSection {
    /// `null` picks the backbone default.
    pub scale: Option<f64>,
    pub residual: bool,
    pub gumbel_temperature: f64,
    pub gumbel_hard: bool,
}

impl Default for AttentionSection {
    fn default() -> Self {
        let a = AttentionConfig::default();
        Self {
            scale: a.scale,
            residual: a.residual,
            gumbel_temperature: a.gumbel_temperature,
            gumbel_hard: a.gumbel_hard,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    pub attention: AttentionSection,
    /// Learned per-timestep channel bias.
    pub time_bias: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: BackboneKind::CnnFullAttn.name().into(),
            attention: AttentionSection::default(),
            time_bias: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneCycleSection {
    pub warmup_fraction: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for OneCycleSection {
    fn default() -> Self {
        let o = OneCycleConfig::default();
        Self {
            warmup_fraction: o.warmup_fraction,
            div_factor: o.div_factor,
            final_div_factor: o.final_div_factor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// `null` picks 5000, or 10000 for `cnn_top1_attn`.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub onecycle: OneCycleSection,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: None,
            batch_size: t.batch_size,
            max_lr: t.max_lr,
            weight_decay: t.weight_decay,
            ema_decay: t.ema_decay,
            onecycle: OneCycleSection::default(),
            adam_betas: [t.adam_betas.0, t.adam_betas.1],
            adam_eps: t.adam_eps,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub samples_per_run: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            samples_per_run: 10_000,
            runs: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` when given, applies `MOSAIC_OUT`, and validates.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_json(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Some(out) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            cfg.paths.out_dir = PathBuf::from(out);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.kind()?;
        self.sampler_variance()?;
        if self.dataset.n == 0 {
            bail!("dataset.n must be positive");
        }
        if self.eval.samples_per_run == 0 || self.eval.runs == 0 {
            bail!("eval.samples_per_run and eval.runs must be positive");
        }
        self.train_config()?.validate()?;
        Ok(())
    }

    pub fn kind(&self) -> Result<BackboneKind> {
        Ok(self.model.kind.parse()?)
    }

    fn sampler_variance(&self) -> Result<SamplerVariance> {
        match self.diffusion.sampler_variance.as_str() {
            "beta" => Ok(SamplerVariance::Beta),
            "posterior_beta" => Ok(SamplerVariance::PosteriorBeta),
            other => bail!("diffusion.sampler_variance must be 'beta' or 'posterior_beta', got '{other}'"),
        }
    }

    pub fn diffusion_config(&self) -> Result<DiffusionConfig> {
        Ok(DiffusionConfig {
            steps: self.diffusion.steps,
            beta_start: self.diffusion.beta_start,
            beta_end: self.diffusion.beta_end,
            sampler_variance: self.sampler_variance()?,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let a = &self.model.attention;
        let mut cfg = ModelConfig::new(self.kind()?);
        cfg.attention = AttentionConfig {
            scale: a.scale,
            residual: a.residual,
            gumbel_temperature: a.gumbel_temperature,
            gumbel_hard: a.gumbel_hard,
        };
        cfg.time_bias_steps = if self.model.time_bias { self.diffusion.steps } else { 0 };
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let kind = self.kind()?;
        Ok(TrainConfig {
            epochs: t.epochs.unwrap_or_else(|| default_epochs(kind)),
            batch_size: t.batch_size,
            max_lr: t.max_lr,
            weight_decay: t.weight_decay,
            ema_decay: t.ema_decay,
            onecycle: OneCycleConfig {
                warmup_fraction: t.onecycle.warmup_fraction,
                div_factor: t.onecycle.div_factor,
                final_div_factor: t.onecycle.final_div_factor,
            },
            adam_betas: (t.adam_betas[0], t.adam_betas[1]),
            adam_eps: t.adam_eps,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
        })
    }

    /// Config with `epochs` filled in, as echoed next to the outputs.
    pub fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        out.train.epochs = Some(self.train_config()?.epochs);
        Ok(out)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.resolved.json");
        let text = serde_json::to_string_pretty(&self.resolved()?)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.paths.out_dir.join("dataset.mosd")
    }
}

/// `key = default` lines for every config field, in dotted form.
pub fn key_reference() -> String {
    let value = serde_json::to_value(ExperimentConfig::default()).expect("config serializes");
    let mut lines = Vec::new();
    flatten("", &value, &mut lines);
    let mut out = String::from("Config keys (JSON, all optional):\n");
    for (key, default) in lines {
        let note = match key.as_str() {
            "train.epochs" => "  (5000; 10000 for cnn_top1_attn)",
            "model.attention.scale" => "  (1/sqrt(32); 1 for cnn_identity_attn)",
            _ => "",
        };
        out.push_str(&format!("  {key} = {default}{note}\n"));
    }
    out.push_str(&format!("\n{OUT_ENV} overrides paths.out_dir.\n"));
    out
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
