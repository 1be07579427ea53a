//! `bench` command: relative overhead of the scaling controller at toy
//! scale, reported next to the published full-scale reference figures.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use saas_core::backbone::{sample, CaptureMode, SampleOptions};
use saas_core::init_backbone;
use saas_core::saas::SaasController;
use saas_core::trace_io::atomic_write;

use crate::config::ResolvedConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{write_manifest, RunManifest};

/// Printed as context only; measured numbers below are the toy scale.
pub const FULL_SCALE_REFERENCE: &str =
    "full-scale reference: 29.1 s baseline, 29.4 s with scaling (incremental expense 1.03%)";

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub repeats: usize,
    pub baseline_median_s: f64,
    pub saas_median_s: f64,
    pub incremental_expense_pct: f64,
    pub reference_context: String,
}

impl BenchReport {
    pub fn render(&self) -> String {
        format!(
            "{}\nrepeats:             {}\nbaseline median:     {:.4} s\nsaas median:         {:.4} s\nincremental expense: {:.2}%\n",
            self.reference_context,
            self.repeats,
            self.baseline_median_s,
            self.saas_median_s,
            self.incremental_expense_pct
        )
    }
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

pub fn cmd_bench(
    config: &ResolvedConfig,
    repeats: usize,
    out_dir: Option<&Path>,
) -> CliResult<BenchReport> {
    if repeats < 3 {
        return Err(CliError::config(format!(
            "`repeats` must be >= 3, got {repeats}"
        )));
    }
    let layout = config.layout()?;
    let weights = init_backbone(config.backbone).map_err(|e| CliError::config(e.to_string()))?;

    let run_baseline = || -> CliResult<f64> {
        let start = Instant::now();
        let options = SampleOptions {
            capture: CaptureMode::Off,
            ..SampleOptions::default()
        };
        sample(&layout, &weights, &config.sampler, options)?;
        Ok(start.elapsed().as_secs_f64())
    };
    let run_saas = || -> CliResult<f64> {
        let start = Instant::now();
        let mut controller = SaasController::new(config.saas.clone());
        // The controller only reads the vital layers; capture is decimated
        // accordingly so the measurement reflects what scaling actually costs.
        let options = SampleOptions {
            controller: Some(&mut controller),
            capture: CaptureMode::Layers(config.saas.vital_layers.clone()),
            ..SampleOptions::default()
        };
        sample(&layout, &weights, &config.sampler, options)?;
        Ok(start.elapsed().as_secs_f64())
    };

    // One untimed warmup, then alternate the two modes (and the order within
    // each pair) so clock ramp-up and neighbor noise spread evenly instead of
    // biasing whichever ran first.
    run_baseline()?;
    let mut baseline_times = Vec::with_capacity(repeats);
    let mut saas_times = Vec::with_capacity(repeats);
    for r in 0..repeats {
        if r % 2 == 0 {
            baseline_times.push(run_baseline()?);
            saas_times.push(run_saas()?);
        } else {
            saas_times.push(run_saas()?);
            baseline_times.push(run_baseline()?);
        }
    }

    let baseline_median_s = median(&mut baseline_times);
    let saas_median_s = median(&mut saas_times);
    let report = BenchReport {
        repeats,
        baseline_median_s,
        saas_median_s,
        incremental_expense_pct: (saas_median_s - baseline_median_s) / baseline_median_s * 100.0,
        reference_context: FULL_SCALE_REFERENCE.to_string(),
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut json = serde_json::to_string_pretty(&report)?;
        json.push('\n');
        atomic_write(&dir.join("bench_report.json"), json.as_bytes())?;

        let mut manifest = RunManifest::new("bench", "bench", config);
        manifest.parameters = Some(BTreeMap::from([(
            "repeats".to_string(),
            repeats.to_string(),
        )]));
        manifest
            .outputs
            .insert("report".into(), "bench_report.json".into());
        manifest.timings.insert(
            "total_s".into(),
            baseline_times.iter().sum::<f64>() + saas_times.iter().sum::<f64>(),
        );
        write_manifest(&dir.join("bench_manifest.json"), &manifest)?;
    }
    Ok(report)
}
