//! `dump-attn` command: per-instruction activation maps, the input-image
//! map, and instruction masks from one step of a dumped trace, each as a
//! PGM with a JSON sidecar.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use saas_core::backbone::AttentionRecord;
use saas_core::pgm;
use saas_core::saas::{
    aggregate_image_map, aggregate_instruction_map, average_vital_cross_attention,
    compute_scaling_factor, extract_mask, minmax_normalize, otsu_threshold, ScaleFactor,
    ThresholdMode, OTSU_DEFAULT_BINS,
};
use saas_core::trace_io::{atomic_write, read_trace};

use crate::error::{CliError, CliResult};
use crate::manifest::read_manifest;
use crate::run::{MANIFEST_FILE, TRACE_DIR};

#[derive(Debug, Clone)]
pub enum LayerSelection {
    /// The vital-layer set recorded in the run manifest.
    Vital,
    All,
    List(BTreeSet<usize>),
}

#[derive(Debug, Clone)]
pub struct DumpArgs {
    /// Directory produced by `run --dump-trace`.
    pub run_dir: PathBuf,
    pub step: usize,
    pub layers: LayerSelection,
    pub out_dir: PathBuf,
}

#[derive(Debug, Serialize)]
struct MapSidecar {
    step: usize,
    layer_set: Vec<usize>,
    kind: String,
    instruction: Option<usize>,
    tau: Option<f64>,
    alpha: Option<f64>,
    degenerate_map: bool,
    factor_skipped: Option<bool>,
    file: String,
}

#[derive(Debug)]
pub struct DumpOutput {
    pub files: Vec<PathBuf>,
}

fn write_pair(
    out_dir: &Path,
    name: &str,
    image: &pgm::PgmImage,
    sidecar: &MapSidecar,
) -> CliResult<Vec<PathBuf>> {
    let pgm_path = out_dir.join(format!("{name}.pgm"));
    pgm::write_pgm(&pgm_path, image)?;
    let sidecar_path = out_dir.join(format!("{name}.json"));
    let mut json = serde_json::to_string_pretty(sidecar)?;
    json.push('\n');
    atomic_write(&sidecar_path, json.as_bytes())?;
    Ok(vec![pgm_path, sidecar_path])
}

pub fn cmd_dump_attn(args: &DumpArgs) -> CliResult<DumpOutput> {
    let manifest = read_manifest(&args.run_dir.join(MANIFEST_FILE))
        .map_err(|e| CliError::Runtime(format!("cannot read run manifest: {e}")))?;
    let layout = manifest
        .layout
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let saas = manifest.saas.to_config()?;

    let trace_dir = args.run_dir.join(TRACE_DIR);
    if !trace_dir.is_dir() {
        return Err(CliError::Runtime(format!(
            "no trace found under {} (re-run with --dump-trace)",
            args.run_dir.display()
        )));
    }
    let trace = read_trace(&trace_dir)?;
    let records: Vec<AttentionRecord> = trace
        .records_for_step(args.step)
        .into_iter()
        .cloned()
        .collect();
    if records.is_empty() {
        return Err(CliError::Runtime(format!(
            "trace has no records for step {}",
            args.step
        )));
    }

    let layer_set: BTreeSet<usize> = match &args.layers {
        LayerSelection::Vital => saas.vital_layers.clone(),
        LayerSelection::All => records.iter().map(|r| r.layer).collect(),
        LayerSelection::List(list) => list.clone(),
    };

    let token_maps = average_vital_cross_attention(&records, &layout, &layer_set)?;
    let smoothed = token_maps.smoothed(saas.kernel_size, saas.kernel_sigma)?;
    let layer_vec: Vec<usize> = layer_set.iter().copied().collect();

    fs::create_dir_all(&args.out_dir)?;
    let mut files = Vec::new();

    let image_map = if layout.has_image() {
        let map = aggregate_image_map(&smoothed, &layout)?;
        let normalized = minmax_normalize(&map);
        let sidecar = MapSidecar {
            step: args.step,
            layer_set: layer_vec.clone(),
            kind: "image_map".into(),
            instruction: None,
            tau: None,
            alpha: None,
            degenerate_map: normalized.degenerate,
            factor_skipped: None,
            file: "image_map.pgm".into(),
        };
        files.extend(write_pair(
            &args.out_dir,
            "image_map",
            &pgm::PgmImage::from_normalized_map(&normalized.map),
            &sidecar,
        )?);
        Some(map)
    } else {
        None
    };

    for instruction in 0..layout.num_sub_instructions() {
        let map = aggregate_instruction_map(&smoothed, &layout, instruction)?;
        let normalized = minmax_normalize(&map);
        let tau = if normalized.degenerate {
            saas.tau
        } else {
            match saas.threshold_mode {
                ThresholdMode::Fixed => saas.tau,
                ThresholdMode::Otsu => otsu_threshold(&normalized.map, OTSU_DEFAULT_BINS)?.tau,
            }
        };
        let mask = extract_mask(&normalized.map, tau, instruction, args.step);
        let factor = match (&image_map, normalized.degenerate) {
            (Some(image), false) => compute_scaling_factor(image, &map, &mask, saas.alpha_cap)?,
            _ => ScaleFactor {
                alpha: 1.0,
                skipped: true,
            },
        };

        let map_name = format!("map_instr{instruction}");
        let sidecar = MapSidecar {
            step: args.step,
            layer_set: layer_vec.clone(),
            kind: "instruction_map".into(),
            instruction: Some(instruction),
            tau: Some(tau),
            alpha: Some(factor.alpha),
            degenerate_map: normalized.degenerate,
            factor_skipped: Some(factor.skipped),
            file: format!("{map_name}.pgm"),
        };
        files.extend(write_pair(
            &args.out_dir,
            &map_name,
            &pgm::PgmImage::from_normalized_map(&normalized.map),
            &sidecar,
        )?);

        let mask_name = format!("mask_instr{instruction}");
        let sidecar = MapSidecar {
            step: args.step,
            layer_set: layer_vec.clone(),
            kind: "mask".into(),
            instruction: Some(instruction),
            tau: Some(tau),
            alpha: Some(factor.alpha),
            degenerate_map: normalized.degenerate,
            factor_skipped: Some(factor.skipped),
            file: format!("{mask_name}.pgm"),
        };
        files.extend(write_pair(
            &args.out_dir,
            &mask_name,
            &pgm::PgmImage::from_mask(&mask),
            &sidecar,
        )?);
    }

    Ok(DumpOutput { files })
}
