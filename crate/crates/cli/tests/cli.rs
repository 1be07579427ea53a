//! Command-level behavior: artifact determinism, mode parity, sweeps, map
//! dumps, and binary exit codes.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

use saas_cli::{
    cmd_dump_attn, cmd_perturb, cmd_run, files_identical, load_config, manifest_without_timings,
    read_manifest, DirectionArg, DumpArgs, LayerSelection, PerturbKind, ResolvedConfig, RunArgs,
    RunMode,
};
use saas_core::pgm::read_pgm;

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("saas-cli-tests").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn small_config(seed: u64) -> ResolvedConfig {
    let overrides: Vec<(String, String)> = [
        ("layout.grid_side", "4"),
        ("layout.image_grid_side", "2"),
        ("layout.text_len", "6"),
        ("layout.spans", "0..3, 3..6"),
        ("backbone.num_layers", "4"),
        ("backbone.num_heads", "2"),
        ("backbone.model_dim", "32"),
        ("sampler.num_steps", "10"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .chain([
        ("backbone.seed".to_string(), seed.to_string()),
        ("sampler.seed".to_string(), seed.to_string()),
    ])
    .collect();
    load_config(None, &overrides).unwrap()
}

#[test]
fn same_seed_runs_are_byte_identical() {
    let config = small_config(7);
    let a = cmd_run(&config, &RunArgs::new(RunMode::Saas, tmp_dir("det-a"))).unwrap();
    let b = cmd_run(&config, &RunArgs::new(RunMode::Saas, tmp_dir("det-b"))).unwrap();
    assert!(files_identical(&a.latent_path, &b.latent_path).unwrap());
    assert!(files_identical(&a.preview_path, &b.preview_path).unwrap());
    let ma = manifest_without_timings(&fs::read_to_string(&a.manifest_path).unwrap()).unwrap();
    let mb = manifest_without_timings(&fs::read_to_string(&b.manifest_path).unwrap()).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn fixed_factor_one_matches_baseline() {
    let config = small_config(3);
    let baseline = cmd_run(
        &config,
        &RunArgs::new(RunMode::Baseline, tmp_dir("fx-base")),
    )
    .unwrap();
    let mut args = RunArgs::new(RunMode::Fixed, tmp_dir("fx-one"));
    args.factor = 1.0;
    let fixed = cmd_run(&config, &args).unwrap();
    assert!(files_identical(&baseline.latent_path, &fixed.latent_path).unwrap());
}

#[test]
fn forced_identity_scaling_matches_baseline() {
    let config = small_config(4);
    let baseline = cmd_run(
        &config,
        &RunArgs::new(RunMode::Baseline, tmp_dir("id-base")),
    )
    .unwrap();
    let mut args = RunArgs::new(RunMode::Saas, tmp_dir("id-saas"));
    args.force_alpha = Some(1.0);
    args.mask_all = true;
    let forced = cmd_run(&config, &args).unwrap();
    assert!(files_identical(&baseline.latent_path, &forced.latent_path).unwrap());
    assert_eq!(
        baseline
            .latent
            .values()
            .max_abs_diff(forced.latent.values()),
        0.0
    );
}

#[test]
fn adaptive_mode_diverges_from_baseline_and_logs_plans() {
    let config = small_config(5);
    let baseline = cmd_run(
        &config,
        &RunArgs::new(RunMode::Baseline, tmp_dir("ad-base")),
    )
    .unwrap();
    let saas = cmd_run(&config, &RunArgs::new(RunMode::Saas, tmp_dir("ad-saas"))).unwrap();
    assert!(!files_identical(&baseline.latent_path, &saas.latent_path).unwrap());
    let manifest = read_manifest(&saas.manifest_path).unwrap();
    assert_eq!(manifest.plan_log.len(), config.saas.saas_window.len());
    assert!(manifest.plan_log.iter().all(|e| e.alphas.len() == 2));
}

#[test]
fn perturb_steps_emits_expected_curve() {
    let config = small_config(6);
    let out = tmp_dir("perturb-steps");
    let kind = PerturbKind::Steps {
        from: 0,
        to: 10,
        stride: 5,
        momentary: false,
    };
    let output = cmd_perturb(&config, &kind, &out).unwrap();
    assert_eq!(output.csv_paths.len(), 1);
    let csv = fs::read_to_string(&output.csv_paths[0]).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "parameter,similarity");
    assert_eq!(lines.len(), 1 + 3); // header + s in {0, 5, 10}
    let last: Vec<&str> = lines[3].split(',').collect();
    assert_eq!(last[0], "10");
    assert_eq!(last[1].parse::<f64>().unwrap(), 1.0);
    // The manifest records the sweep grid for replay.
    let manifest = read_manifest(&output.manifest_path).unwrap();
    let params = manifest.parameters.unwrap();
    assert_eq!(params["from"], "0");
    assert_eq!(params["to"], "10");
    assert_eq!(params["stride"], "5");
    assert_eq!(params["momentary"], "false");
}

#[test]
fn bench_writes_report_and_manifest() {
    let config = small_config(12);
    let out = tmp_dir("bench-out");
    let report = saas_cli::cmd_bench(&config, 3, Some(&out)).unwrap();
    assert!(report.saas_median_s > 0.0);
    assert!(out.join("bench_report.json").is_file());
    let manifest = read_manifest(&out.join("bench_manifest.json")).unwrap();
    assert_eq!(manifest.command, "bench");
    assert_eq!(manifest.parameters.unwrap()["repeats"], "3");
    assert_eq!(manifest.sampler.seed, 12);
}

#[test]
fn perturb_layers_both_directions_emit_two_curves() {
    let config = small_config(6);
    let out = tmp_dir("perturb-layers");
    let kind = PerturbKind::Layers {
        direction: DirectionArg::Both,
    };
    let output = cmd_perturb(&config, &kind, &out).unwrap();
    assert_eq!(output.csv_paths.len(), 2);
    for path in &output.csv_paths {
        let csv = fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        // n in 0..=num_layers
        assert_eq!(lines.len(), 1 + config.backbone.num_layers + 1);
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first[0], "0");
        assert_eq!(first[1].parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn dump_attn_writes_maps_masks_and_sidecars() {
    let config = small_config(9);
    let run_dir = tmp_dir("dump-run");
    let mut args = RunArgs::new(RunMode::Saas, &run_dir);
    args.dump_trace = true;
    cmd_run(&config, &args).unwrap();

    let out = tmp_dir("dump-maps");
    let dump = cmd_dump_attn(&DumpArgs {
        run_dir: run_dir.clone(),
        step: 1,
        layers: LayerSelection::Vital,
        out_dir: out.clone(),
    })
    .unwrap();
    // image map + 2 instructions x (map + mask), each with a sidecar.
    assert_eq!(dump.files.len(), 10);

    let image = read_pgm(&out.join("map_instr0.pgm")).unwrap();
    assert_eq!(image.maxval, 65535);
    assert_eq!((image.width, image.height), (4, 4));
    let mask = read_pgm(&out.join("mask_instr0.pgm")).unwrap();
    assert_eq!(mask.maxval, 1);

    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("map_instr0.json")).unwrap()).unwrap();
    assert_eq!(sidecar["step"], 1);
    assert_eq!(sidecar["instruction"], 0);
    assert!(sidecar["tau"].is_number());
    assert!(sidecar["alpha"].is_number());
    assert_eq!(sidecar["layer_set"], serde_json::json!([2, 3]));
}

#[test]
fn dump_attn_without_trace_is_a_runtime_error() {
    let config = small_config(2);
    let run_dir = tmp_dir("dump-no-trace");
    cmd_run(&config, &RunArgs::new(RunMode::Baseline, &run_dir)).unwrap();
    let err = cmd_dump_attn(&DumpArgs {
        run_dir,
        step: 0,
        layers: LayerSelection::Vital,
        out_dir: tmp_dir("dump-no-trace-out"),
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

// --- binary-level exit codes ---

fn saas_binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_saas"))
}

#[test]
fn binary_exit_codes() {
    // Usage error: unknown flag.
    let status = saas_binary()
        .arg("run")
        .arg("--no-such-flag")
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));

    // Config error names the offending field.
    let output = saas_binary()
        .args(["run", "--tau", "1.5", "--out"])
        .arg(tmp_dir("exit-tau"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("tau"));

    // Runtime error: dump-attn without a trace.
    let run_dir = tmp_dir("exit-run");
    let ok = saas_binary()
        .args([
            "run",
            "--steps",
            "4",
            "--set",
            "layout.grid_side=2",
            "--set",
            "backbone.num_layers=2",
            "--set",
            "backbone.model_dim=8",
            "--set",
            "backbone.num_heads=2",
            "--set",
            "layout.text_len=2",
            "--set",
            "layout.spans=0..2",
            "--set",
            "layout.image_grid_side=1",
            "--out",
        ])
        .arg(&run_dir)
        .output()
        .unwrap();
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    let missing = saas_binary()
        .args(["dump-attn", "--step", "0", "--run"])
        .arg(&run_dir)
        .arg("--out")
        .arg(tmp_dir("exit-dump"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));

    // Help is not an error.
    let help = saas_binary().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn binary_flag_overrides_config_file() {
    let dir = tmp_dir("flag-precedence");
    let config_path = dir.join("sweep.conf");
    fs::write(&config_path, "[saas]\ntau = 0.3\n").unwrap();
    let out_dir = dir.join("run");
    let output = saas_binary()
        .args(["run", "--mode", "saas", "--steps", "4"])
        .args(["--config"])
        .arg(&config_path)
        .args(["--tau", "0.25"])
        .args([
            "--set",
            "layout.grid_side=2",
            "--set",
            "backbone.num_layers=2",
            "--set",
            "backbone.model_dim=8",
            "--set",
            "backbone.num_heads=2",
            "--set",
            "layout.text_len=2",
            "--set",
            "layout.spans=0..2",
            "--set",
            "layout.image_grid_side=1",
        ])
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let manifest = read_manifest(&out_dir.join("manifest.json")).unwrap();
    assert_eq!(manifest.saas.tau, 0.25);
}
