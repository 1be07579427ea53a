//! `saas`: sampling runs, perturbation sweeps, attention-map dumps, and the
//! overhead micro-benchmark for the toy attention-scaling harness.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use saas_cli::{
    cmd_bench, cmd_dump_attn, cmd_perturb, cmd_run, load_config, parse_override, CliError,
    CliResult, DirectionArg, DumpArgs, LayerSelection, PerturbKind, ResolvedConfig, RunArgs,
    RunMode,
};

#[derive(Parser)]
#[command(
    name = "saas",
    version,
    about = "Self-adaptive attention scaling on a deterministic toy flow-matching transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file of `key = value` lines with [sections].
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override both the weights seed and the sampler seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the mask threshold (saas.tau).
    #[arg(long)]
    tau: Option<f64>,

    /// Override the number of denoising steps (sampler.num_steps).
    #[arg(long)]
    steps: Option<usize>,

    /// Generic override, `section.key=value`; beats the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<ResolvedConfig> {
        let mut overrides: Vec<(String, String)> = Vec::new();
        if let Some(seed) = self.seed {
            overrides.push(("backbone.seed".into(), seed.to_string()));
            overrides.push(("sampler.seed".into(), seed.to_string()));
        }
        if let Some(tau) = self.tau {
            overrides.push(("saas.tau".into(), tau.to_string()));
        }
        if let Some(steps) = self.steps {
            overrides.push(("sampler.num_steps".into(), steps.to_string()));
        }
        for raw in &self.set {
            overrides.push(parse_override(raw)?);
        }
        load_config(self.config.as_deref(), &overrides)
    }
}

#[derive(ValueEnum, Clone, Copy)]
enum ModeArg {
    Baseline,
    Saas,
    Fixed,
}

#[derive(ValueEnum, Clone, Copy)]
enum MaskArg {
    /// Masks from the attention maps.
    Auto,
    /// Replace every mask with an all-ones mask.
    All,
}

#[derive(ValueEnum, Clone, Copy)]
enum DirectionOpt {
    TopDown,
    BottomUp,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Sample with no intervention, adaptive scaling, or a fixed factor.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "baseline")]
        mode: ModeArg,
        /// Constant factor for --mode fixed (ablation presets: 2 and 5).
        #[arg(long, default_value_t = 2.0)]
        factor: f64,
        /// Force every scaling factor to this value.
        #[arg(long = "force-alpha")]
        force_alpha: Option<f64>,
        #[arg(long, value_enum, default_value = "auto")]
        mask: MaskArg,
        /// Output directory for the latent, preview, and manifest.
        #[arg(long, default_value = "saas-run")]
        out: PathBuf,
        /// Also write the full attention trace (needed by dump-attn).
        #[arg(long = "dump-trace")]
        dump_trace: bool,
    },
    /// Blank-input perturbation sweeps.
    Perturb {
        #[command(subcommand)]
        protocol: PerturbCommand,
    },
    /// Export activation maps and masks from a dumped trace.
    DumpAttn {
        /// Run directory written by `run --dump-trace`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        step: usize,
        /// `vital`, `all`, or a comma-separated layer list.
        #[arg(long, default_value = "vital")]
        layers: String,
        #[arg(long, default_value = "saas-maps")]
        out: PathBuf,
    },
    /// Median wall time of baseline vs scaling-enabled runs.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Optional directory for bench_report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PerturbCommand {
    /// Replace the input with a blank one from a step onward.
    Steps {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        from: usize,
        /// Last sweep point (defaults to the step count).
        #[arg(long)]
        to: Option<usize>,
        #[arg(long, default_value_t = 5)]
        stride: usize,
        /// Perturb only the single step instead of from it onward.
        #[arg(long)]
        momentary: bool,
        #[arg(long, default_value = "saas-perturb")]
        out: PathBuf,
    },
    /// Blank the condition streams of a growing set of layers.
    Layers {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "both")]
        direction: DirectionOpt,
        #[arg(long, default_value = "saas-perturb")]
        out: PathBuf,
    },
}

fn parse_layer_selection(raw: &str) -> CliResult<LayerSelection> {
    match raw {
        "vital" => Ok(LayerSelection::Vital),
        "all" => Ok(LayerSelection::All),
        list => {
            let layers: BTreeSet<usize> = list
                .split(',')
                .map(|part| {
                    part.trim()
                        .parse()
                        .map_err(|_| CliError::config(format!("bad layer index {part:?}")))
                })
                .collect::<CliResult<_>>()?;
            Ok(LayerSelection::List(layers))
        }
    }
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Run {
            config,
            mode,
            factor,
            force_alpha,
            mask,
            out,
            dump_trace,
        } => {
            let resolved = config.resolve()?;
            let args = RunArgs {
                mode: match mode {
                    ModeArg::Baseline => RunMode::Baseline,
                    ModeArg::Saas => RunMode::Saas,
                    ModeArg::Fixed => RunMode::Fixed,
                },
                factor,
                force_alpha,
                mask_all: matches!(mask, MaskArg::All),
                out_dir: out,
                dump_trace,
            };
            let output = cmd_run(&resolved, &args)?;
            println!(
                "run complete: mode={} records={} out={}",
                args.mode.as_str(),
                output.trace_len,
                output.out_dir.display()
            );
            Ok(())
        }
        Command::Perturb { protocol } => {
            let (config, kind, out) = match protocol {
                PerturbCommand::Steps {
                    config,
                    from,
                    to,
                    stride,
                    momentary,
                    out,
                } => {
                    let resolved = config.resolve()?;
                    let to = to.unwrap_or(resolved.sampler.num_steps);
                    (
                        resolved,
                        PerturbKind::Steps {
                            from,
                            to,
                            stride,
                            momentary,
                        },
                        out,
                    )
                }
                PerturbCommand::Layers {
                    config,
                    direction,
                    out,
                } => (
                    config.resolve()?,
                    PerturbKind::Layers {
                        direction: match direction {
                            DirectionOpt::TopDown => DirectionArg::TopDown,
                            DirectionOpt::BottomUp => DirectionArg::BottomUp,
                            DirectionOpt::Both => DirectionArg::Both,
                        },
                    },
                    out,
                ),
            };
            let output = cmd_perturb(&config, &kind, &out)?;
            for path in &output.csv_paths {
                println!("curve written: {}", path.display());
            }
            Ok(())
        }
        Command::DumpAttn {
            run,
            step,
            layers,
            out,
        } => {
            let args = DumpArgs {
                run_dir: run,
                step,
                layers: parse_layer_selection(&layers)?,
                out_dir: out,
            };
            let output = cmd_dump_attn(&args)?;
            println!("wrote {} files", output.files.len());
            Ok(())
        }
        Command::Bench {
            config,
            repeats,
            out,
        } => {
            let resolved = config.resolve()?;
            let report = cmd_bench(&resolved, repeats, out.as_deref())?;
            print!("{}", report.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            if matches!(
                err.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) {
                print!("{err}");
                return ExitCode::SUCCESS;
            }
            eprint!("{err}");
            return ExitCode::from(1);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
