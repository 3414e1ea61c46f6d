//! Run configuration: one flat, documented key namespace shared by the CLI,
//! the config file, and checkpoint echoes.

use serde::{Deserialize, Serialize};

use crate::diffusion::PredictionMode;
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Vae,
    SingleImage,
    Superres,
    Temporal,
    Inpaint,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "vae" => Ok(TaskKind::Vae),
            "single_image" => Ok(TaskKind::SingleImage),
            "superres" => Ok(TaskKind::Superres),
            "temporal" => Ok(TaskKind::Temporal),
            "inpaint" => Ok(TaskKind::Inpaint),
            other => Err(Error::Config(format!(
                "unknown task '{other}' (expected vae|single_image|superres|temporal|inpaint)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    ScaledLinear,
    Cosine,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::ScaledLinear,
            num_steps: 1000,
            beta_start: 0.000_85,
            beta_end: 0.012,
        }
    }
}

/// Shape of the denoiser and its conditioning pathways. Desk-scale defaults;
/// full-scale values (512x512 images, wider trunks) remain reachable here.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub latent_channels: usize,
    /// Channel widths of the VAE trunk; the downsample factor is
    /// `2^(vae_widths.len() - 1)`.
    pub vae_widths: Vec<usize>,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub res_blocks: usize,
    pub mid_attention: bool,
    pub heads: usize,
    /// Conditioning vector dimension D.
    pub cond_dim: usize,
    /// Sinusoidal projection dimension d.
    pub proj_dim: usize,
    pub txt_dim: usize,
    pub txt_len: usize,
    pub txt_layers: usize,
    pub vocab_size: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 64,
            image_channels: 3,
            latent_channels: 4,
            vae_widths: vec![16, 32, 64, 64],
            base_width: 64,
            channel_mults: vec![1, 2, 4],
            attention_resolutions: vec![8, 4],
            res_blocks: 1,
            mid_attention: true,
            heads: 4,
            cond_dim: 512,
            proj_dim: 256,
            txt_dim: 64,
            txt_len: 32,
            txt_layers: 2,
            vocab_size: 4096,
        }
    }
}

impl DenoiserConfig {
    pub fn vae_factor(&self) -> usize {
        1 << (self.vae_widths.len() - 1)
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.vae_factor()
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.proj_dim % 2 != 0 {
            return Err(Error::Config("proj_dim must be even".into()));
        }
        if self.image_size % self.vae_factor() != 0 {
            return Err(Error::Config(format!(
                "image_size {} not a multiple of the VAE factor {}",
                self.image_size,
                self.vae_factor()
            )));
        }
        if self.channel_mults.is_empty() || self.vae_widths.len() < 2 {
            return Err(Error::Config("channel_mults/vae_widths too short".into()));
        }
        Ok(())
    }
}

/// Control-branch shape.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    /// Broadcast metadata channels concatenated to each control frame latent.
    pub metadata_channels: usize,
    /// Temporal extent of the 3D convolutions (odd; 1 = per-frame).
    pub temporal_kernel: usize,
    pub temporal_heads: usize,
    /// Target length control sequences are padded to.
    pub sequence_length: usize,
    /// Ablation: stack frames along channels and skip all temporal layers.
    pub stack_2d: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            metadata_channels: 4,
            temporal_kernel: 3,
            temporal_heads: 4,
            sequence_length: 4,
            stack_2d: false,
        }
    }
}

/// Everything a training or sampling run needs; serialized verbatim into
/// every checkpoint and snapshotted into the run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub kl_weight: f64,
    pub metadata_dropout: f64,
    pub caption_dropout: f64,
    pub prediction_mode: PredictionMode,
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    pub control: ControlConfig,
    pub sample_steps: usize,
    pub guidance_scale: f64,
    pub eta: f64,
    pub save_every: usize,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskKind::SingleImage,
            seed: 0,
            batch_size: 16,
            max_iterations: 2000,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            kl_weight: 1e-4,
            metadata_dropout: 0.1,
            caption_dropout: 0.1,
            prediction_mode: PredictionMode::Epsilon,
            schedule: ScheduleConfig::default(),
            model: DenoiserConfig::default(),
            control: ControlConfig::default(),
            sample_steps: 100,
            guidance_scale: 1.0,
            eta: 0.0,
            save_every: 1000,
            log_every: 25,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> crate::Result<()> {
        self.model.validate()?;
        if self.schedule.num_steps == 0 {
            return Err(Error::Config("schedule.num_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.metadata_dropout) {
            return Err(Error::Config("metadata_dropout must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config("eta must be in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.max_iterations == 0 {
            return Err(Error::Config("batch_size/max_iterations must be >= 1".into()));
        }
        if self.control.temporal_kernel % 2 == 0 {
            return Err(Error::Config("control.temporal_kernel must be odd".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> crate::Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
