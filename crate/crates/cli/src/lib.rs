//! `homlab` subcommand dispatch and run manifests.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use homlab_core::experiments::{
    run_corrector, run_homogenize, run_localize, run_rate_command, run_sample_field, run_sgap, with_workers,
    AssertionOutcome, RunOutput,
};
use homlab_core::{HomlabError, LabConfig, Warning};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "homlab", version, about = "Random-coefficient homogenization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
enum Command {
    /// Sample parameter fields and their empirical covariance.
    SampleField(Args),
    /// Corrector moments per correlation length.
    Corrector(Args),
    /// Monte Carlo homogenized coefficients.
    Homogenize(Args),
    /// Two-scale expansion residual norms.
    Residuals(Args),
    /// Cube-average variance of the drift fluctuation.
    Localize(Args),
    /// Spectral-gap variance test.
    Sgap(Args),
    /// Homogenization error rate study.
    Rate(Args),
}

#[derive(Debug, Clone, PartialEq, Eq, clap::Args)]
struct Args {
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    describe: bool,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SampleField(_) => "sample-field",
            Command::Corrector(_) => "corrector",
            Command::Homogenize(_) => "homogenize",
            Command::Residuals(_) => "residuals",
            Command::Localize(_) => "localize",
            Command::Sgap(_) => "sgap",
            Command::Rate(_) => "rate",
        }
    }

    fn args(&self) -> &Args {
        match self {
            Command::SampleField(a)
            | Command::Corrector(a)
            | Command::Homogenize(a)
            | Command::Residuals(a)
            | Command::Localize(a)
            | Command::Sgap(a)
            | Command::Rate(a) => a,
        }
    }

    fn execute(&self, cfg: &LabConfig, out: &Path) -> homlab_core::Result<RunOutput> {
        match self {
            Command::SampleField(_) => run_sample_field(cfg, out),
            Command::Corrector(_) => run_corrector(cfg, out, false),
            Command::Homogenize(_) => run_homogenize(cfg, out),
            Command::Residuals(_) => run_corrector(cfg, out, true),
            Command::Localize(_) => run_localize(cfg, out),
            Command::Sgap(_) => run_sgap(cfg, out),
            Command::Rate(_) => run_rate_command(cfg, out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of `config.toml` in the output directory.
    pub config_hash: String,
    pub config_source: Option<PathBuf>,
    pub master_seed: u64,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
    pub warnings: Vec<Warning>,
    pub assertions: Vec<AssertionOutcome>,
    pub exit_code: i32,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn input_error(e: &HomlabError) -> bool {
    matches!(
        e,
        HomlabError::InvalidInput(_) | HomlabError::GridTooCoarse { .. } | HomlabError::Io(_) | HomlabError::Json(_)
    )
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit code: 0 on success, 1 when a check fails, 2 on input errors.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cmd = cli.command;
    let args = cmd.args();
    let (cfg, config_bytes) = match &args.config {
        Some(p) => match std::fs::read(p) {
            Ok(bytes) => match String::from_utf8(bytes.clone()).map_err(|e| HomlabError::invalid(e.to_string())).and_then(|t| LabConfig::from_toml_str(&t)) {
                Ok(cfg) => (cfg, bytes),
                Err(e) => {
                    eprintln!("homlab {}: {e}", cmd.name());
                    return EXIT_INPUT;
                }
            },
            Err(e) => {
                eprintln!("homlab {}: cannot read config {}: {e}", cmd.name(), p.display());
                return EXIT_INPUT;
            }
        },
        None => {
            let cfg = LabConfig::default();
            let text = cfg.describe().into_bytes();
            (cfg, text)
        }
    };
    if args.describe {
        print!("{}", cfg.describe());
        return EXIT_OK;
    }
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    if let Err(e) = std::fs::create_dir_all(&out) {
        eprintln!("homlab {}: cannot create {}: {e}", cmd.name(), out.display());
        return EXIT_INPUT;
    }
    let started = now();
    let result = with_workers(cfg.workers, || cmd.execute(&cfg, &out)).and_then(|r| r);
    let output = match result {
        Ok(o) => o,
        Err(e) => {
            eprintln!("homlab {}: {e}", cmd.name());
            return if input_error(&e) { EXIT_INPUT } else { EXIT_ASSERTION };
        }
    };
    let failed: Vec<&AssertionOutcome> = output.assertions.iter().filter(|a| !a.passed).collect();
    for a in &failed {
        eprintln!("homlab {}: check `{}` failed: {}", cmd.name(), a.name, a.detail);
    }
    let exit_code = if failed.is_empty() { EXIT_OK } else { EXIT_ASSERTION };
    let config_path = out.join("config.toml");
    let manifest_path = out.join("manifest.json");
    let mut outputs = output.files.clone();
    outputs.push(config_path.clone());
    outputs.push(manifest_path.clone());
    let manifest = RunManifest {
        command: cmd.name().to_string(),
        config_hash: sha256_hex(&config_bytes),
        config_source: args.config.clone(),
        master_seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: now(),
        outputs,
        warnings: output.warnings,
        assertions: output.assertions,
        exit_code,
    };
    let written = std::fs::write(&config_path, &config_bytes)
        .and_then(|_| std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"));
    if let Err(e) = written {
        eprintln!("homlab {}: cannot write manifest: {e}", cmd.name());
        return EXIT_INPUT;
    }
    exit_code
}
