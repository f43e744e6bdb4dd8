//! One TOML document drives every subcommand. Sections mirror the stages of
//! the pipeline; unknown keys anywhere are a hard error so typos cannot
//! silently fall back to defaults, and the parsed document is echoed into
//! every artifact a run produces.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use refdiff_core::auxiliary::AuxConfig;
use refdiff_core::codec::{LatentSpec, PIXEL_CHANNELS};
use refdiff_core::guidance::{GuidanceConfig, GuidanceMode};
use refdiff_core::lora::LoraConfig;
use refdiff_core::network::NetworkConfig;
use refdiff_core::render::SynthConfig;
use refdiff_core::render::Script;
use refdiff_core::schedule::ScheduleConfig;
use refdiff_core::text::TextEncoderConfig;
use refdiff_core::trainer::{
    AdamWConfig, LogoPath, LossWeights, TrainScope, TrainerConfig,
};

use crate::error::{Result, ToolError};

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub latent: LatentSection,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub lora: LoraSection,
    pub losses: LossSection,
    pub data: DataSection,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LatentSection {
    /// Pixels per latent cell along each axis (patchify codec).
    pub scale: usize,
    /// Uniform channel gain applied by the codec.
    pub gain: f64,
}

impl Default for LatentSection {
    fn default() -> Self {
        LatentSection { scale: 4, gain: 2.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let d = ScheduleConfig::default();
        ScheduleSection {
            steps: d.steps,
            beta_start: d.beta_start,
            beta_end: d.beta_end,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub width: usize,
    pub width2: usize,
    pub attn_dim: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
    pub groups: usize,
    /// Accept the inpainting input layout (masked source channels).
    pub inpaint: bool,
    pub text: TextSection,
    pub aux: AuxSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = NetworkConfig::default();
        ModelSection {
            width: d.width,
            width2: d.width2,
            attn_dim: d.attn_dim,
            time_dim: d.time_dim,
            time_hidden: d.time_hidden,
            groups: d.groups,
            inpaint: d.inpaint,
            text: TextSection::default(),
            aux: AuxSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TextSection {
    pub dim: usize,
    pub layers: usize,
    pub max_tokens: usize,
}

impl Default for TextSection {
    fn default() -> Self {
        let d = TextEncoderConfig::default();
        TextSection {
            dim: d.dim,
            layers: d.layers,
            max_tokens: d.max_tokens,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AuxSection {
    pub width: usize,
    pub groups: usize,
    /// RoI pooling grid as `[rows, cols]`.
    pub roi: [usize; 2],
    pub sampling: usize,
    pub word_len: usize,
}

impl Default for AuxSection {
    fn default() -> Self {
        let d = AuxConfig::default();
        AuxSection {
            width: d.width,
            groups: d.groups,
            roi: [d.roi.0, d.roi.1],
            sampling: d.sampling,
            word_len: d.word_len,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
    pub init_std: f64,
}

impl Default for LoraSection {
    fn default() -> Self {
        let d = LoraConfig::default();
        LoraSection {
            rank: d.rank,
            alpha: d.alpha,
            init_std: d.init_std,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_diff: f64,
    pub lambda_recog: f64,
    pub lambda_logo: f64,
    /// Down-weight applied to the diffusion term of synthetic samples.
    pub alpha_synth: f64,
    pub scope: TrainScope,
    pub use_recog: bool,
    pub use_logo: bool,
    pub logo_path: LogoPath,
    pub dropout_p: f64,
    /// Optimizer steps for the `train` subcommand.
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerSection,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        let t = TrainerConfig::default();
        LossSection {
            lambda_diff: w.lambda_diff,
            lambda_recog: w.lambda_recog,
            lambda_logo: w.lambda_logo,
            alpha_synth: w.alpha_synth,
            scope: t.scope,
            use_recog: t.use_recog,
            use_logo: t.use_logo,
            logo_path: t.logo_path,
            dropout_p: t.dropout_p,
            steps: 5000,
            batch: 8,
            optimizer: OptimizerSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = AdamWConfig::default();
        OptimizerSection {
            lr: d.lr,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            weight_decay: d.weight_decay,
            clip_norm: d.clip_norm,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub width: usize,
    pub height: usize,
    pub min_items: usize,
    pub max_items: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub min_glyph_h: usize,
    pub max_glyph_h: usize,
    pub scripts: Vec<Script>,
    pub logo_share: f64,
    pub n_logos: usize,
    /// Samples written by the `synth` subcommand, split evenly over scripts.
    pub count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        DataSection {
            width: d.width,
            height: d.height,
            min_items: d.min_items,
            max_items: d.max_items,
            min_word_len: d.min_word_len,
            max_word_len: d.max_word_len,
            min_glyph_h: d.min_glyph_h,
            max_glyph_h: d.max_glyph_h,
            scripts: d.scripts,
            logo_share: d.logo_share,
            n_logos: d.n_logos,
            count: 2000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    /// DDIM steps.
    pub steps: usize,
    pub eta: f64,
    pub mode: GuidanceMode,
    pub omega: f64,
    pub omega_prompt: f64,
    pub omega_ref: f64,
    pub omega_all: f64,
    pub gamma: f64,
    pub rho_speed: f64,
    pub schedule_on_trainer_grid: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = GuidanceConfig::default();
        SamplerSection {
            steps: 100,
            eta: 0.0,
            mode: d.mode,
            omega: d.omega,
            omega_prompt: d.omega_prompt,
            omega_ref: d.omega_ref,
            omega_all: d.omega_all,
            gamma: d.gamma,
            rho_speed: d.rho_speed,
            schedule_on_trainer_grid: d.schedule_on_trainer_grid,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Evaluation prompts; one image is generated per prompt.
    pub prompt_count: usize,
    /// Training steps for the frozen recognizer backend.
    pub recognizer_steps: usize,
    pub recognizer_lr: f64,
    pub recognizer_batch: usize,
    /// Compute the feature-distance metric (needs at least two images).
    pub fid: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            prompt_count: 32,
            recognizer_steps: 2000,
            recognizer_lr: 1e-3,
            recognizer_batch: 8,
            fid: true,
        }
    }
}

impl RunConfig {
    /// Cross-field checks that `deny_unknown_fields` cannot express.
    pub fn validate(&self) -> Result<()> {
        if self.model.text.dim != self.model.attn_dim {
            return Err(ToolError::Config(format!(
                "model.text.dim ({}) must equal model.attn_dim ({})",
                self.model.text.dim, self.model.attn_dim
            )));
        }
        if self.latent.scale == 0
            || self.data.width % self.latent.scale != 0
            || self.data.height % self.latent.scale != 0
        {
            return Err(ToolError::Config(format!(
                "latent.scale {} must divide data size {}x{}",
                self.latent.scale, self.data.width, self.data.height
            )));
        }
        self.synth_config().validate()?;
        self.guidance_config().validate()?;
        self.trainer_config().weights.validate()?;
        Ok(())
    }

    pub fn latent_spec(&self) -> LatentSpec {
        LatentSpec {
            c: PIXEL_CHANNELS * self.latent.scale * self.latent.scale,
            h: self.data.height / self.latent.scale,
            w: self.data.width / self.latent.scale,
            scale: self.latent.scale,
        }
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.schedule.steps,
            beta_start: self.schedule.beta_start,
            beta_end: self.schedule.beta_end,
        }
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            width: self.model.width,
            width2: self.model.width2,
            attn_dim: self.model.attn_dim,
            time_dim: self.model.time_dim,
            time_hidden: self.model.time_hidden,
            groups: self.model.groups,
            inpaint: self.model.inpaint,
        }
    }

    pub fn text_config(&self) -> TextEncoderConfig {
        TextEncoderConfig {
            dim: self.model.text.dim,
            layers: self.model.text.layers,
            max_tokens: self.model.text.max_tokens,
        }
    }

    pub fn aux_config(&self) -> AuxConfig {
        AuxConfig {
            width: self.model.aux.width,
            groups: self.model.aux.groups,
            roi: (self.model.aux.roi[0], self.model.aux.roi[1]),
            sampling: self.model.aux.sampling,
            word_len: self.model.aux.word_len,
        }
    }

    pub fn lora_config(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora.rank,
            alpha: self.lora.alpha,
            init_std: self.lora.init_std,
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            optimizer: AdamWConfig {
                lr: self.losses.optimizer.lr,
                beta1: self.losses.optimizer.beta1,
                beta2: self.losses.optimizer.beta2,
                eps: self.losses.optimizer.eps,
                weight_decay: self.losses.optimizer.weight_decay,
                clip_norm: self.losses.optimizer.clip_norm,
            },
            weights: LossWeights {
                lambda_diff: self.losses.lambda_diff,
                lambda_recog: self.losses.lambda_recog,
                lambda_logo: self.losses.lambda_logo,
                alpha_synth: self.losses.alpha_synth,
            },
            scope: self.losses.scope,
            use_recog: self.losses.use_recog,
            use_logo: self.losses.use_logo,
            logo_path: self.losses.logo_path,
            dropout_p: self.losses.dropout_p,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            width: self.data.width,
            height: self.data.height,
            min_items: self.data.min_items,
            max_items: self.data.max_items,
            min_word_len: self.data.min_word_len,
            max_word_len: self.data.max_word_len,
            min_glyph_h: self.data.min_glyph_h,
            max_glyph_h: self.data.max_glyph_h,
            scripts: self.data.scripts.clone(),
            logo_share: self.data.logo_share,
            n_logos: self.data.n_logos,
        }
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            mode: self.sampler.mode,
            omega: self.sampler.omega,
            omega_prompt: self.sampler.omega_prompt,
            omega_ref: self.sampler.omega_ref,
            omega_all: self.sampler.omega_all,
            gamma: self.sampler.gamma,
            rho_speed: self.sampler.rho_speed,
            schedule_on_trainer_grid: self.sampler.schedule_on_trainer_grid,
        }
    }

    /// The document as TOML, written next to artifacts.
    pub fn echo_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self).map_err(ToolError::from)?)
    }

    /// The document as a JSON value, embedded in JSON artifacts.
    pub fn echo_json(&self) -> Result<serde_json::Value> {
        serde_json::to_value(self).map_err(ToolError::from)
    }
}

/// Parse a TOML document and apply `key.path=value` overrides before
/// deserializing, so overrides face the same unknown-key check as the file.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table = toml::Table::from_str(text)?;
    for entry in overrides {
        apply_override(&mut table, entry)?;
    }
    let config: RunConfig = table.try_into().map_err(ToolError::from)?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| ToolError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

pub fn apply_override(table: &mut toml::Table, entry: &str) -> Result<()> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| ToolError::Config(format!("override '{entry}' is not key.path=value")))?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(ToolError::Config(format!("override '{entry}' has an empty path segment")));
    }
    let value = parse_toml_value(raw.trim())?;
    let mut current = table;
    for seg in &segments[..segments.len() - 1] {
        current = current
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                ToolError::Config(format!("override '{entry}': '{seg}' is not a table"))
            })?;
    }
    current.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

/// Interpret an override value with TOML typing rules; anything that does
/// not parse as a TOML scalar or array is taken as a bare string.
fn parse_toml_value(raw: &str) -> Result<toml::Value> {
    let wrapped = format!("v = {raw}");
    if let Ok(table) = toml::Table::from_str(&wrapped) {
        if let Some(v) = table.get("v") {
            return Ok(v.clone());
        }
    }
    Ok(toml::Value::String(raw.to_string()))
}
