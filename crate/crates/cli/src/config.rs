//! Configuration loading: a flat `key = value` file with `[section]`
//! headers, merged with CLI overrides. Unknown keys are rejected; every
//! range violation names the offending field.
//!
//! Schema (defaults in parentheses):
//!
//! ```text
//! [layout]
//! grid_side        = 8          # noise grid side
//! image_grid_side  = 4          # or "none" for pure text-to-image
//! text_len         = 12
//! spans            = 0..6, 6..12   # sub-instruction spans, half-open
//!
//! [backbone]
//! num_layers = 8
//! num_heads  = 4
//! model_dim  = 64
//! seed       = 0
//!
//! [sampler]
//! num_steps      = 50
//! image_guidance = 1.6
//! text_guidance  = 2.5
//! seed           = 0
//!
//! [saas]
//! tau               = 0.4      # 0.2 suits visual-conditional generation
//! threshold_mode    = fixed    # fixed | otsu
//! xi                = 1.0      # constant, or a comma table (one per step)
//! vital_layers      = 4..8     # range or comma list (deepest half)
//! window            = 0..20    # scaling window (first 40% of steps)
//! alpha_cap         = 20
//! kernel_size       = 3
//! kernel_sigma      = 1.0
//! outside_mask_mode = zero     # zero | keep
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use saas_core::layout::LayoutSpec;
use saas_core::saas::{OutsideMaskMode, SaasConfig, ThresholdMode, XiSchedule};
use saas_core::{BackboneConfig, SamplerConfig, TokenLayout};

use crate::error::{CliError, CliResult};

const KNOWN_KEYS: &[&str] = &[
    "layout.grid_side",
    "layout.image_grid_side",
    "layout.text_len",
    "layout.spans",
    "backbone.num_layers",
    "backbone.num_heads",
    "backbone.model_dim",
    "backbone.seed",
    "sampler.num_steps",
    "sampler.image_guidance",
    "sampler.text_guidance",
    "sampler.seed",
    "saas.tau",
    "saas.threshold_mode",
    "saas.xi",
    "saas.vital_layers",
    "saas.window",
    "saas.alpha_cap",
    "saas.kernel_size",
    "saas.kernel_sigma",
    "saas.outside_mask_mode",
];

/// Fully validated configuration for one run.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub layout_spec: LayoutSpec,
    pub backbone: BackboneConfig,
    pub sampler: SamplerConfig,
    pub saas: SaasConfig,
}

impl ResolvedConfig {
    pub fn layout(&self) -> CliResult<TokenLayout> {
        self.layout_spec
            .build()
            .map_err(|e| CliError::config(e.to_string()))
    }
}

/// Parse a config file into `section.key -> value` entries.
fn parse_file(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    parse_entries(&text)
}

fn parse_entries(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut entries = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::config(format!(
                "line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        if section.is_empty() {
            return Err(CliError::config(format!(
                "line {}: key {} appears before any [section]",
                lineno + 1,
                key.trim()
            )));
        }
        let full = format!("{section}.{}", key.trim());
        if !KNOWN_KEYS.contains(&full.as_str()) {
            return Err(CliError::config(format!("unknown key `{full}`")));
        }
        entries.insert(full, value.trim().to_string());
    }
    Ok(entries)
}

fn parse_usize(entries: &BTreeMap<String, String>, key: &str, default: usize) -> CliResult<usize> {
    match entries.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| CliError::config(format!("`{key}`: expected an integer, got {v:?}"))),
    }
}

fn parse_u64(entries: &BTreeMap<String, String>, key: &str, default: u64) -> CliResult<u64> {
    match entries.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| CliError::config(format!("`{key}`: expected an integer, got {v:?}"))),
    }
}

fn parse_f64(entries: &BTreeMap<String, String>, key: &str, default: f64) -> CliResult<f64> {
    match entries.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| CliError::config(format!("`{key}`: expected a number, got {v:?}"))),
    }
}

fn parse_range(value: &str, key: &str) -> CliResult<(usize, usize)> {
    let Some((lo, hi)) = value.split_once("..") else {
        return Err(CliError::config(format!(
            "`{key}`: expected `lo..hi`, got {value:?}"
        )));
    };
    let lo = lo
        .trim()
        .parse()
        .map_err(|_| CliError::config(format!("`{key}`: bad range start {lo:?}")))?;
    let hi = hi
        .trim()
        .parse()
        .map_err(|_| CliError::config(format!("`{key}`: bad range end {hi:?}")))?;
    Ok((lo, hi))
}

/// `4..8` or `4, 5, 6, 7`.
fn parse_layer_set(value: &str, key: &str) -> CliResult<std::collections::BTreeSet<usize>> {
    if value.contains("..") {
        let (lo, hi) = parse_range(value, key)?;
        Ok((lo..hi).collect())
    } else {
        value
            .split(',')
            .map(|part| {
                part.trim()
                    .parse()
                    .map_err(|_| CliError::config(format!("`{key}`: bad layer index {part:?}")))
            })
            .collect()
    }
}

/// Load the configuration: defaults, then the file, then the overrides.
///
/// Overrides use the same `section.key` names as the file; CLI flags beat
/// file values, which beat defaults.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> CliResult<ResolvedConfig> {
    let mut entries = match path {
        Some(p) => parse_file(p)?,
        None => BTreeMap::new(),
    };
    for (key, value) in overrides {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(CliError::config(format!("unknown key `{key}`")));
        }
        entries.insert(key.clone(), value.clone());
    }
    resolve(&entries)
}

fn resolve(entries: &BTreeMap<String, String>) -> CliResult<ResolvedConfig> {
    // Layout.
    let grid_side = parse_usize(entries, "layout.grid_side", 8)?;
    let image_grid_side = match entries.get("layout.image_grid_side") {
        None => Some(4),
        Some(v) if v == "none" => None,
        Some(v) => Some(v.parse().map_err(|_| {
            CliError::config(format!(
                "`layout.image_grid_side`: expected an integer or `none`, got {v:?}"
            ))
        })?),
    };
    let text_len = parse_usize(entries, "layout.text_len", 12)?;
    let spans: Vec<[usize; 2]> = match entries.get("layout.spans") {
        None => vec![[0, text_len / 2], [text_len / 2, text_len]],
        Some(v) => v
            .split(',')
            .map(|part| parse_range(part.trim(), "layout.spans").map(|(lo, hi)| [lo, hi]))
            .collect::<CliResult<_>>()?,
    };
    let layout_spec = LayoutSpec {
        grid_side,
        image_grid_side,
        text_len,
        spans,
    };
    layout_spec
        .build()
        .map_err(|e| CliError::config(e.to_string()))?;

    // Backbone.
    let backbone = BackboneConfig {
        num_layers: parse_usize(entries, "backbone.num_layers", 8)?,
        num_heads: parse_usize(entries, "backbone.num_heads", 4)?,
        model_dim: parse_usize(entries, "backbone.model_dim", 64)?,
        seed: parse_u64(entries, "backbone.seed", 0)?,
    };
    backbone
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;

    // Sampler.
    let sampler = SamplerConfig {
        num_steps: parse_usize(entries, "sampler.num_steps", 50)?,
        image_guidance: parse_f64(entries, "sampler.image_guidance", 1.6)?,
        text_guidance: parse_f64(entries, "sampler.text_guidance", 2.5)?,
        seed: parse_u64(entries, "sampler.seed", 0)?,
    };
    sampler
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;

    // Scaling settings; the layer/window defaults depend on the two above.
    let defaults = SaasConfig::defaults_for(backbone.num_layers, sampler.num_steps);
    let threshold_mode = match entries.get("saas.threshold_mode").map(String::as_str) {
        None | Some("fixed") => ThresholdMode::Fixed,
        Some("otsu") => ThresholdMode::Otsu,
        Some(v) => {
            return Err(CliError::config(format!(
                "`saas.threshold_mode`: expected `fixed` or `otsu`, got {v:?}"
            )))
        }
    };
    let xi = match entries.get("saas.xi") {
        None => XiSchedule::Constant(1.0),
        Some(v) if v.contains(',') => {
            let table = v
                .split(',')
                .map(|part| {
                    part.trim().parse().map_err(|_| {
                        CliError::config(format!("`saas.xi`: bad table entry {part:?}"))
                    })
                })
                .collect::<CliResult<Vec<f64>>>()?;
            XiSchedule::Table(table)
        }
        Some(v) => XiSchedule::Constant(v.parse().map_err(|_| {
            CliError::config(format!("`saas.xi`: expected a number or table, got {v:?}"))
        })?),
    };
    let vital_layers = match entries.get("saas.vital_layers") {
        None => defaults.vital_layers.clone(),
        Some(v) => parse_layer_set(v, "saas.vital_layers")?,
    };
    let saas_window = match entries.get("saas.window") {
        None => defaults.saas_window.clone(),
        Some(v) => {
            let (lo, hi) = parse_range(v, "saas.window")?;
            lo..hi
        }
    };
    let outside_mask_mode = match entries.get("saas.outside_mask_mode").map(String::as_str) {
        None | Some("zero") => OutsideMaskMode::Zero,
        Some("keep") => OutsideMaskMode::Keep,
        Some(v) => {
            return Err(CliError::config(format!(
                "`saas.outside_mask_mode`: expected `zero` or `keep`, got {v:?}"
            )))
        }
    };
    let saas = SaasConfig {
        tau: parse_f64(entries, "saas.tau", defaults.tau)?,
        threshold_mode,
        xi,
        vital_layers,
        saas_window,
        alpha_cap: parse_f64(entries, "saas.alpha_cap", defaults.alpha_cap)?,
        kernel_size: parse_usize(entries, "saas.kernel_size", defaults.kernel_size)?,
        kernel_sigma: parse_f64(entries, "saas.kernel_sigma", defaults.kernel_sigma)?,
        outside_mask_mode,
    };
    saas.validate(backbone.num_layers, sampler.num_steps)
        .map_err(|e| CliError::config(e.to_string()))?;

    Ok(ResolvedConfig {
        layout_spec,
        backbone,
        sampler,
        saas,
    })
}

/// Split a `--set section.key=value` argument.
pub fn parse_override(arg: &str) -> CliResult<(String, String)> {
    match arg.split_once('=') {
        Some((key, value)) => Ok((key.trim().to_string(), value.trim().to_string())),
        None => Err(CliError::config(format!(
            "override {arg:?} is not of the form section.key=value"
        ))),
    }
}
