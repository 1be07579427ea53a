//! `run` command: baseline, adaptive-scaling, or fixed-factor sampling with
//! reproducible artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use saas_core::backbone::{sample, CaptureMode, LatentState, SampleOptions};
use saas_core::saas::{FixedScaleController, SaasController};
use saas_core::spatial::{MapSubject, SpatialActivationMap};
use saas_core::trace_io::{write_matrix, write_trace};
use saas_core::{init_backbone, minmax_normalize, pgm, AttentionTrace};

use crate::config::ResolvedConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{write_manifest, PlanLogEntry2, RunManifest};

pub const LATENT_FILE: &str = "latent.f64";
pub const PREVIEW_FILE: &str = "preview.pgm";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_DIR: &str = "trace";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Baseline,
    Saas,
    Fixed,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Baseline => "baseline",
            RunMode::Saas => "saas",
            RunMode::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub mode: RunMode,
    /// Constant factor for the fixed baseline (ablation presets: 2 and 5).
    pub factor: f64,
    /// Force every computed scaling factor (diagnostic knob).
    pub force_alpha: Option<f64>,
    /// Replace every mask with an all-ones mask (diagnostic knob).
    pub mask_all: bool,
    pub out_dir: PathBuf,
    pub dump_trace: bool,
}

impl RunArgs {
    pub fn new(mode: RunMode, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            mode,
            factor: 2.0,
            force_alpha: None,
            mask_all: false,
            out_dir: out_dir.into(),
            dump_trace: false,
        }
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub latent_path: PathBuf,
    pub preview_path: PathBuf,
    pub latent: LatentState,
    pub trace_len: usize,
}

/// Channel-mean grayscale preview of the final latent grid.
fn latent_preview(latent: &LatentState, grid_side: usize) -> CliResult<pgm::PgmImage> {
    let values = latent.values();
    let means: Vec<f64> = (0..values.rows())
        .map(|r| values.row(r).iter().sum::<f64>() / values.cols() as f64)
        .collect();
    let map = SpatialActivationMap::from_values(grid_side, means, MapSubject::InputImage)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(pgm::PgmImage::from_normalized_map(
        &minmax_normalize(&map).map,
    ))
}

pub fn cmd_run(config: &ResolvedConfig, args: &RunArgs) -> CliResult<RunOutput> {
    if args.mode == RunMode::Fixed && !(args.factor > 0.0 && args.factor.is_finite()) {
        return Err(CliError::config(format!(
            "`factor` must be positive and finite, got {}",
            args.factor
        )));
    }
    if let Some(alpha) = args.force_alpha {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(CliError::config(format!(
                "`force-alpha` must be positive and finite, got {alpha}"
            )));
        }
    }

    let layout = config.layout()?;
    let weights = init_backbone(config.backbone).map_err(|e| CliError::config(e.to_string()))?;
    fs::create_dir_all(&args.out_dir)?;

    let start = Instant::now();
    let mut saas_controller = None;
    let mut fixed_controller = None;
    match args.mode {
        RunMode::Baseline => {}
        RunMode::Saas => {
            let mut controller = SaasController::new(config.saas.clone());
            if let Some(alpha) = args.force_alpha {
                controller = controller.with_forced_alpha(alpha);
            }
            if args.mask_all {
                controller = controller.with_all_ones_masks();
            }
            saas_controller = Some(controller);
        }
        RunMode::Fixed => {
            fixed_controller = Some(FixedScaleController::new(
                args.factor,
                config.saas.vital_layers.clone(),
                config.saas.saas_window.clone(),
            ));
        }
    }

    let options = SampleOptions {
        controller: match (&mut saas_controller, &mut fixed_controller) {
            (Some(c), _) => Some(c),
            (_, Some(c)) => Some(c),
            _ => None,
        },
        capture: CaptureMode::All,
        ..SampleOptions::default()
    };
    let (latent, trace): (LatentState, AttentionTrace) =
        sample(&layout, &weights, &config.sampler, options)?;
    let sample_seconds = start.elapsed().as_secs_f64();

    let latent_path = args.out_dir.join(LATENT_FILE);
    write_matrix(&latent_path, latent.values())?;

    let preview_path = args.out_dir.join(PREVIEW_FILE);
    pgm::write_pgm(&preview_path, &latent_preview(&latent, layout.grid_side())?)?;

    let mut outputs: BTreeMap<String, String> = BTreeMap::new();
    outputs.insert("latent".into(), LATENT_FILE.into());
    outputs.insert("preview".into(), PREVIEW_FILE.into());
    if args.dump_trace {
        write_trace(&args.out_dir.join(TRACE_DIR), &trace)?;
        outputs.insert(
            "trace_manifest".into(),
            format!("{TRACE_DIR}/{}", saas_core::trace_io::TRACE_MANIFEST_NAME),
        );
    }

    let mut manifest = RunManifest::new("run", args.mode.as_str(), config);
    manifest.fixed_factor = (args.mode == RunMode::Fixed).then_some(args.factor);
    manifest.force_alpha = args.force_alpha;
    manifest.mask_override = args.mask_all.then(|| "all".to_string());
    manifest.outputs = outputs;
    if let Some(controller) = &saas_controller {
        manifest.plan_log = controller
            .plan_log()
            .iter()
            .map(PlanLogEntry2::from)
            .collect();
    }
    manifest.timings.insert("sample_s".into(), sample_seconds);
    manifest
        .timings
        .insert("total_s".into(), start.elapsed().as_secs_f64());
    let manifest_path = args.out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest_path, &manifest)?;

    Ok(RunOutput {
        out_dir: args.out_dir.clone(),
        manifest_path,
        latent_path,
        preview_path,
        latent,
        trace_len: trace.len(),
    })
}

/// Byte comparison helper used by the determinism checks.
pub fn files_identical(a: &Path, b: &Path) -> CliResult<bool> {
    Ok(fs::read(a)? == fs::read(b)?)
}
