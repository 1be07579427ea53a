//! Library surface behind the `saas` binary, exposed so integration tests
//! can drive the commands directly.

pub mod bench_cmd;
pub mod config;
pub mod dump_attn;
pub mod error;
pub mod manifest;
pub mod perturb_cmd;
pub mod run;

pub use bench_cmd::{cmd_bench, BenchReport, FULL_SCALE_REFERENCE};
pub use config::{load_config, parse_override, ResolvedConfig};
pub use dump_attn::{cmd_dump_attn, DumpArgs, DumpOutput, LayerSelection};
pub use error::{CliError, CliResult};
pub use manifest::{
    canonical_json, manifest_without_timings, read_manifest, write_manifest, RunManifest,
};
pub use perturb_cmd::{cmd_perturb, DirectionArg, PerturbKind, PerturbOutput};
pub use run::{cmd_run, files_identical, RunArgs, RunMode, RunOutput};
