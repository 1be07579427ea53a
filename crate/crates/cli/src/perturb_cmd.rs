//! `perturb` command: step-wise and layer-wise blank-input sweeps exported
//! as CSV curves plus a replayable manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use saas_core::init_backbone;
use saas_core::perturb::{
    baseline_latent, latent_similarity, perturbed_single_step_latent, sweep_layers, sweep_steps,
    Direction, SimilarityPoint, SimilarityReport,
};
use saas_core::trace_io::atomic_write;

use crate::config::ResolvedConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{write_manifest, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionArg {
    TopDown,
    BottomUp,
    Both,
}

#[derive(Debug, Clone)]
pub enum PerturbKind {
    Steps {
        from: usize,
        to: usize,
        stride: usize,
        /// Perturb only the single step instead of every step from it on.
        momentary: bool,
    },
    Layers {
        direction: DirectionArg,
    },
}

#[derive(Debug)]
pub struct PerturbOutput {
    pub csv_paths: Vec<PathBuf>,
    pub manifest_path: PathBuf,
}

fn write_curve_csv(path: &Path, points: &[SimilarityPoint]) -> CliResult<()> {
    let mut out = String::from("parameter,similarity\n");
    for point in points {
        out.push_str(&format!("{},{:?}\n", point.parameter, point.similarity));
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}

fn momentary_sweep(
    config: &ResolvedConfig,
    from: usize,
    to: usize,
    stride: usize,
    baseline_id: &str,
) -> CliResult<SimilarityReport> {
    let layout = config.layout()?;
    let weights = init_backbone(config.backbone).map_err(|e| CliError::config(e.to_string()))?;
    let baseline = baseline_latent(&layout, &weights, &config.sampler)?;
    let mut points = Vec::new();
    let mut s = from;
    while s <= to {
        // A momentary point at s == num_steps perturbs nothing.
        let latent = if s >= config.sampler.num_steps {
            baseline.clone()
        } else {
            perturbed_single_step_latent(&layout, &weights, &config.sampler, s)?
        };
        points.push(SimilarityPoint {
            parameter: s,
            similarity: latent_similarity(&baseline, &latent)?,
        });
        s += stride;
    }
    Ok(SimilarityReport {
        points,
        baseline_id: baseline_id.to_string(),
    })
}

pub fn cmd_perturb(
    config: &ResolvedConfig,
    kind: &PerturbKind,
    out_dir: &Path,
) -> CliResult<PerturbOutput> {
    fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let layout = config.layout()?;
    let weights = init_backbone(config.backbone).map_err(|e| CliError::config(e.to_string()))?;
    let baseline_id = format!("run-w{}-s{}", config.backbone.seed, config.sampler.seed);

    let mut csv_paths = Vec::new();
    let mut outputs: BTreeMap<String, String> = BTreeMap::new();
    let mut parameters: BTreeMap<String, String> = BTreeMap::new();
    let kind_name;
    match kind {
        PerturbKind::Steps {
            from,
            to,
            stride,
            momentary,
        } => {
            kind_name = "steps";
            if *stride == 0 {
                return Err(CliError::config("`stride` must be >= 1"));
            }
            if *to > config.sampler.num_steps || from > to {
                return Err(CliError::config(format!(
                    "sweep {from}..={to} invalid for {} steps",
                    config.sampler.num_steps
                )));
            }
            let report = if *momentary {
                momentary_sweep(config, *from, *to, *stride, &baseline_id)?
            } else {
                sweep_steps(
                    &layout,
                    &weights,
                    &config.sampler,
                    *from,
                    *to,
                    *stride,
                    &baseline_id,
                )?
            };
            let path = out_dir.join("steps.csv");
            write_curve_csv(&path, &report.points)?;
            outputs.insert("steps_curve".into(), "steps.csv".into());
            parameters.insert("from".into(), from.to_string());
            parameters.insert("to".into(), to.to_string());
            parameters.insert("stride".into(), stride.to_string());
            parameters.insert("momentary".into(), momentary.to_string());
            csv_paths.push(path);
        }
        PerturbKind::Layers { direction } => {
            kind_name = "layers";
            let directions: Vec<(Direction, &str)> = match direction {
                DirectionArg::TopDown => vec![(Direction::TopDown, "layers_top_down.csv")],
                DirectionArg::BottomUp => vec![(Direction::BottomUp, "layers_bottom_up.csv")],
                DirectionArg::Both => vec![
                    (Direction::TopDown, "layers_top_down.csv"),
                    (Direction::BottomUp, "layers_bottom_up.csv"),
                ],
            };
            parameters.insert(
                "direction".into(),
                match direction {
                    DirectionArg::TopDown => "top-down".into(),
                    DirectionArg::BottomUp => "bottom-up".into(),
                    DirectionArg::Both => "both".into(),
                },
            );
            for (dir, file) in directions {
                let report = sweep_layers(&layout, &weights, &config.sampler, dir, &baseline_id)?;
                let path = out_dir.join(file);
                write_curve_csv(&path, &report.points)?;
                outputs.insert(format!("curve_{file}"), file.to_string());
                csv_paths.push(path);
            }
        }
    }

    let mut manifest = RunManifest::new("perturb", kind_name, config);
    manifest.parameters = Some(parameters);
    manifest.outputs = outputs;
    manifest.outputs.insert("baseline_id".into(), baseline_id);
    manifest
        .timings
        .insert("total_s".into(), start.elapsed().as_secs_f64());
    let manifest_path = out_dir.join("perturb_manifest.json");
    write_manifest(&manifest_path, &manifest)?;

    Ok(PerturbOutput {
        csv_paths,
        manifest_path,
    })
}
