//! Run manifests: canonical JSON (sorted keys, shortest-round-trip floats)
//! so byte equality implies run equality. Timings live under a single
//! `timings` key that comparisons strip.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use saas_core::layout::LayoutSpec;
use saas_core::saas::{PlanLogEntry, SaasConfig, ThresholdMode, XiSchedule};
use saas_core::trace_io::atomic_write;
use saas_core::{BackboneConfig, OutsideMaskMode, SamplerConfig};

use crate::config::ResolvedConfig;
use crate::error::CliResult;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneSnapshot {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerSnapshot {
    pub num_steps: usize,
    pub image_guidance: f64,
    pub text_guidance: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaasSnapshot {
    pub tau: f64,
    pub threshold_mode: String,
    pub xi_constant: Option<f64>,
    pub xi_table: Option<Vec<f64>>,
    pub vital_layers: Vec<usize>,
    pub window: [usize; 2],
    pub alpha_cap: f64,
    pub kernel_size: usize,
    pub kernel_sigma: f64,
    pub outside_mask_mode: String,
}

impl SaasSnapshot {
    pub fn from_config(config: &SaasConfig) -> Self {
        let (xi_constant, xi_table) = match &config.xi {
            XiSchedule::Constant(v) => (Some(*v), None),
            XiSchedule::Table(t) => (None, Some(t.clone())),
        };
        Self {
            tau: config.tau,
            threshold_mode: match config.threshold_mode {
                ThresholdMode::Fixed => "fixed".into(),
                ThresholdMode::Otsu => "otsu".into(),
            },
            xi_constant,
            xi_table,
            vital_layers: config.vital_layers.iter().copied().collect(),
            window: [config.saas_window.start, config.saas_window.end],
            alpha_cap: config.alpha_cap,
            kernel_size: config.kernel_size,
            kernel_sigma: config.kernel_sigma,
            outside_mask_mode: match config.outside_mask_mode {
                OutsideMaskMode::Zero => "zero".into(),
                OutsideMaskMode::Keep => "keep".into(),
            },
        }
    }

    pub fn to_config(&self) -> CliResult<SaasConfig> {
        let xi = match (&self.xi_table, self.xi_constant) {
            (Some(t), _) => XiSchedule::Table(t.clone()),
            (None, Some(v)) => XiSchedule::Constant(v),
            (None, None) => XiSchedule::Constant(1.0),
        };
        Ok(SaasConfig {
            tau: self.tau,
            threshold_mode: match self.threshold_mode.as_str() {
                "otsu" => ThresholdMode::Otsu,
                _ => ThresholdMode::Fixed,
            },
            xi,
            vital_layers: self.vital_layers.iter().copied().collect(),
            saas_window: self.window[0]..self.window[1],
            alpha_cap: self.alpha_cap,
            kernel_size: self.kernel_size,
            kernel_sigma: self.kernel_sigma,
            outside_mask_mode: match self.outside_mask_mode.as_str() {
                "keep" => OutsideMaskMode::Keep,
                _ => OutsideMaskMode::Zero,
            },
        })
    }
}

/// Everything needed to replay a run bit-exactly, plus wall-clock timings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub mode: String,
    pub layout: LayoutSpec,
    pub backbone: BackboneSnapshot,
    pub sampler: SamplerSnapshot,
    pub saas: SaasSnapshot,
    pub fixed_factor: Option<f64>,
    pub force_alpha: Option<f64>,
    pub mask_override: Option<String>,
    /// Command-specific parameters (sweep grids, repeat counts).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameters: Option<BTreeMap<String, String>>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub plan_log: Vec<PlanLogEntry2>,
    pub timings: BTreeMap<String, f64>,
}

/// Serializable mirror of the controller's plan log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanLogEntry2 {
    pub step: usize,
    pub alphas: Vec<f64>,
    pub taus: Vec<f64>,
    pub skipped: Vec<bool>,
}

impl From<&PlanLogEntry> for PlanLogEntry2 {
    fn from(entry: &PlanLogEntry) -> Self {
        Self {
            step: entry.step,
            alphas: entry.alphas.clone(),
            taus: entry.taus.clone(),
            skipped: entry.skipped.clone(),
        }
    }
}

impl RunManifest {
    pub fn new(command: &str, mode: &str, config: &ResolvedConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            mode: mode.to_string(),
            layout: config.layout_spec.clone(),
            backbone: BackboneSnapshot {
                num_layers: config.backbone.num_layers,
                num_heads: config.backbone.num_heads,
                model_dim: config.backbone.model_dim,
                seed: config.backbone.seed,
            },
            sampler: SamplerSnapshot {
                num_steps: config.sampler.num_steps,
                image_guidance: config.sampler.image_guidance,
                text_guidance: config.sampler.text_guidance,
                seed: config.sampler.seed,
            },
            saas: SaasSnapshot::from_config(&config.saas),
            fixed_factor: None,
            force_alpha: None,
            mask_override: None,
            parameters: None,
            outputs: BTreeMap::new(),
            plan_log: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            num_layers: self.backbone.num_layers,
            num_heads: self.backbone.num_heads,
            model_dim: self.backbone.model_dim,
            seed: self.backbone.seed,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            num_steps: self.sampler.num_steps,
            image_guidance: self.sampler.image_guidance,
            text_guidance: self.sampler.text_guidance,
            seed: self.sampler.seed,
        }
    }
}

/// Canonical rendering: `serde_json`'s map is ordered, so object keys come
/// out sorted; floats use the shortest round-trip form.
pub fn canonical_json<T: Serialize>(value: &T) -> CliResult<String> {
    let value: Value = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    Ok(text)
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> CliResult<()> {
    atomic_write(path, canonical_json(manifest)?.as_bytes())?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> CliResult<RunManifest> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// The manifest with the `timings` object removed, for byte comparisons.
pub fn manifest_without_timings(json: &str) -> CliResult<String> {
    let mut value: Value = serde_json::from_str(json)?;
    if let Some(object) = value.as_object_mut() {
        object.remove("timings");
    }
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    Ok(text)
}
