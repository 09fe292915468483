//! The experiment configuration record: one JSON document that, together
//! with the code version, fully determines a run. Checkpoints carry a hash
//! of the training-relevant subset and refuse to load under a different
//! fingerprint.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::LoraConfig;
use crate::dataset::DataConfig;
use crate::denoiser::DitConfig;
use crate::diffusion::{SamplerConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::sketcher::SketchConfig;
use crate::videovae::VaeConfig;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    /// Diffusion training steps per stage (base training and fine-tuning).
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: u64,
    pub vae_steps: u64,
    pub vae_learning_rate: f64,
    pub vae_batch_size: usize,
    /// Fine-tune stage step count; None → same as `steps`.
    pub finetune_steps: Option<u64>,
    /// In-memory last-good snapshot cadence (divergence recovery).
    pub snapshot_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 2,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            warmup_steps: 200,
            vae_steps: 4_000,
            vae_learning_rate: 1e-3,
            vae_batch_size: 2,
            finetune_steps: None,
            snapshot_every: 250,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub root_seed: u64,
    pub data: DataConfig,
    pub vae: VaeConfig,
    pub dit: DitConfig,
    pub lora: LoraConfig,
    pub schedule: ScheduleConfig,
    pub sketch: SketchConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    /// Branch depth of the duplicated-branch baseline; None → full depth.
    pub controlnet_branch_depth: Option<usize>,
}

impl ExperimentConfig {
    /// The desk-scale default configuration.
    pub fn toy() -> Self {
        Self::default()
    }

    /// The full-scale settings as documented presets: 720×480 clips,
    /// rank-192 adapters, 40K training steps. Not intended to be runnable on
    /// a desktop; kept as a legal configuration.
    pub fn paper() -> Self {
        let mut cfg = Self::default();
        cfg.data.height = 480;
        cfg.data.width = 720;
        cfg.data.train_clips = 80_000;
        cfg.data.test_clips = 1_000;
        cfg.lora.rank = 192;
        cfg.lora.alpha = 192.0;
        cfg.train.steps = 40_000;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other} (use toy|paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        self.dit.validate()?;
        self.lora.validate()?;
        self.sketch.validate()?;
        if self.dit.latent_channels != self.vae.latent_channels {
            return Err(Error::Config(format!(
                "dit latent_channels {} must equal vae latent_channels {}",
                self.dit.latent_channels, self.vae.latent_channels
            )));
        }
        if self.train.batch_size == 0 || self.train.vae_batch_size == 0 {
            return Err(Error::Config("batch sizes must be ≥ 1".into()));
        }
        // the latent grid must exist and be patchable
        let (lt, lh, lw) =
            self.vae.latent_dims(self.data.frames, self.data.height, self.data.width)?;
        self.dit.token_grid(lt, lh, lw)?;
        Ok(())
    }

    /// Latent dims implied by (data, vae).
    pub fn latent_dims(&self) -> Result<(usize, usize, usize)> {
        self.vae.latent_dims(self.data.frames, self.data.height, self.data.width)
    }

    /// Hash of the training-relevant subset (seed, data, vae, dit, lora,
    /// schedule, train). Sampler and eval options are runtime knobs recorded
    /// separately (e.g. in inference sidecars), so varying them does not
    /// orphan checkpoints.
    pub fn training_fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Fingerprint<'a> {
            root_seed: u64,
            data: &'a DataConfig,
            vae: &'a VaeConfig,
            dit: &'a DitConfig,
            lora: &'a LoraConfig,
            schedule: &'a ScheduleConfig,
            sketch: &'a SketchConfig,
            train: &'a TrainConfig,
            controlnet_branch_depth: Option<usize>,
        }
        let fp = Fingerprint {
            root_seed: self.root_seed,
            data: &self.data,
            vae: &self.vae,
            dit: &self.dit,
            lora: &self.lora,
            schedule: &self.schedule,
            sketch: &self.sketch,
            train: &self.train,
            controlnet_branch_depth: self.controlnet_branch_depth,
        };
        let json = serde_json::to_string(&fp).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Applies one `--set key=value` override onto a JSON representation of the
/// config. The key is a dotted path; the value is parsed as JSON when
/// possible, else taken as a string.
pub fn apply_set(value: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got {assignment}")))?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!("config path {key}: {part} is not an object"))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses a config with preset + file + overrides precedence.
pub fn resolve_config(
    preset: Option<&str>,
    file_json: Option<&str>,
    sets: &[String],
) -> Result<ExperimentConfig> {
    let base = match (preset, file_json) {
        (Some(p), None) => ExperimentConfig::preset(p)?,
        (None, Some(text)) => ExperimentConfig::from_json(text)?,
        (Some(p), Some(text)) => {
            // file overrides preset field-by-field via JSON merge
            let mut v = serde_json::to_value(ExperimentConfig::preset(p)?)?;
            let patch: serde_json::Value = serde_json::from_str(text)?;
            merge_json(&mut v, &patch);
            serde_json::from_value(v)?
        }
        (None, None) => ExperimentConfig::toy(),
    };
    let mut v = serde_json::to_value(&base)?;
    for s in sets {
        apply_set(&mut v, s)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(v)?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge_json(dst: &mut serde_json::Value, patch: &serde_json::Value) {
    match (dst, patch) {
        (serde_json::Value::Object(d), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge_json(d.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (d, p) => *d = p.clone(),
    }
}
