//! `volprecip`: command-line entry point.

mod args;
mod commands;
mod store;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::Parser;
use serde::Serialize;

use args::Cli;
use commands::{execute, CliError, Outcome};

/// Record of one invocation, written next to the outputs.
#[derive(Debug, Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: Option<&'static str>,
    argv: Vec<String>,
    /// Arguments after merging the config file.
    effective_argv: Vec<String>,
    settings: Option<serde_json::Value>,
    seed: Option<u64>,
    deterministic: bool,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    wall_time_s: f64,
    exit_code: i32,
    error: Option<String>,
}

fn write_manifest(path: &Path, m: &RunManifest) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(std::io::Error::other)? + "\n";
    std::fs::write(path, text)
}

fn run(argv: Vec<String>) -> i32 {
    let start = Instant::now();
    let mut manifest = RunManifest {
        tool: "volprecip",
        version: env!("CARGO_PKG_VERSION"),
        command: None,
        argv: argv.clone(),
        effective_argv: argv.clone(),
        settings: None,
        seed: None,
        deterministic: false,
        inputs: vec![],
        outputs: vec![],
        wall_time_s: 0.0,
        exit_code: 0,
        error: None,
    };
    let mut manifest_path = PathBuf::from("run_manifest.json");

    let parsed: Result<Cli, CliError> = args::effective_argv(&argv).map_err(CliError::from).and_then(|eff| {
        manifest.effective_argv = eff.clone();
        Cli::try_parse_from(&eff).map_err(|e| {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                std::process::exit(0);
            }
            let _ = e.print();
            CliError::Usage(e.kind().to_string())
        })
    });

    let result = parsed.and_then(|cli| {
        manifest_path = cli.manifest.clone();
        manifest.command = Some(cli.command.name());
        manifest.settings = serde_json::to_value(&cli).ok();
        manifest.seed = Some(cli.seed);
        manifest.deterministic = cli.deterministic;
        if cli.deterministic {
            // the pool may already exist when run in-process; either way work is ordered
            let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
        }
        execute(&cli)
    });

    let code = match result {
        Ok(Outcome { inputs, outputs }) => {
            manifest.inputs = inputs;
            manifest.outputs = outputs;
            0
        }
        Err(e) => {
            if !matches!(e, CliError::Usage(_)) {
                eprintln!("error: {e}");
            }
            manifest.error = Some(e.to_string());
            e.exit_code()
        }
    };
    manifest.exit_code = code;
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    if let Err(e) = write_manifest(&manifest_path, &manifest) {
        eprintln!("error: cannot write run manifest {}: {e}", manifest_path.display());
        if code == 0 {
            return 2;
        }
    }
    code
}

fn main() {
    std::process::exit(run(std::env::args().collect()));
}
