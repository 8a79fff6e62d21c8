// SPDX-License-Identifier: Apache-2.0

//! Subcommands. Each returns the process exit code and writes its report
//! to `out`; diagnostics go to `err`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sanctorum::attestation::{verify_attestation, AttestationBundle};
use sanctorum::harness::scenario::machine_config;
use sanctorum::harness::{explore, run_scenario, ExploreConfig, ExploreError, RunOptions, Scenario};
use sanctorum::monitor::{Mutation, MonitorOptions, SecurityMonitor};

use crate::measure::{measure, MeasureError, Platform};

/// Exit codes shared by all subcommands.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sanctorum", version, about = "Security monitor scenario runner and offline tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario file and check its assertions.
    Run(RunArgs),
    /// Compute an enclave measurement from a manifest without a monitor.
    Measure(MeasureArgs),
    /// Check an attestation bundle.
    Verify(VerifyArgs),
    /// Exhaustively explore monitor states up to a depth.
    Explore(ExploreArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub scenario: PathBuf,
    /// Entropy seed; overrides the scenario's `seed` line.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the event trace as JSON lines.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Directory for bundles exported by the scenario.
    #[arg(long)]
    pub bundle_out: Option<PathBuf>,
    /// Race callers on real threads.
    #[arg(long)]
    pub stress: bool,
}

#[derive(Debug, Args)]
pub struct MeasureArgs {
    pub manifest: PathBuf,
    /// Machine preset supplying page size, monitor image and capabilities.
    #[arg(long, default_value = "desk")]
    pub config: String,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub bundle: PathBuf,
    /// Expected nonce, 64 hex digits.
    #[arg(long)]
    pub nonce: String,
    /// Expected enclave measurement, 64 hex digits.
    #[arg(long)]
    pub measurement: String,
    /// Trusted device public key, 64 hex digits.
    #[arg(long)]
    pub device_key: String,
}

#[derive(Debug, Args)]
pub struct ExploreArgs {
    #[arg(long, default_value = "minimal")]
    pub config: String,
    #[arg(long, default_value_t = 6)]
    pub depth: usize,
    /// Maximum number of distinct states.
    #[arg(long, default_value_t = 2_000_000)]
    pub budget: usize,
    /// Directory for counterexample scenarios.
    #[arg(long, default_value = "counterexamples")]
    pub out: PathBuf,
    /// Disable a monitor check (testing the explorer itself).
    #[arg(long = "mutate", hide = true)]
    pub mutations: Vec<String>,
}

/// Parses `args` and runs the selected command.
pub fn execute<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => dispatch(cli.command, out, err),
        Err(e) => {
            let _ = write!(err, "{e}");
            if e.use_stderr() {
                EXIT_INPUT
            } else {
                EXIT_OK
            }
        }
    }
}

pub fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match command {
        Command::Run(a) => run(&a, out, err),
        Command::Measure(a) => cmd_measure(&a, out, err),
        Command::Verify(a) => verify(&a, out, err),
        Command::Explore(a) => cmd_explore(&a, out, err),
    }
}

fn write_file(path: &Path, bytes: &[u8], err: &mut dyn Write) -> bool {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        let _ = std::fs::create_dir_all(dir);
    }
    match std::fs::write(path, bytes) {
        Ok(()) => true,
        Err(e) => {
            let _ = writeln!(err, "cannot write {}: {e}", path.display());
            false
        }
    }
}

pub fn run(a: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let scenario = match Scenario::from_file(&a.scenario) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(err, "{}: {e}", a.scenario.display());
            return e.exit_code();
        }
    };
    let options = RunOptions {
        seed: a.seed,
        stress: a.stress,
    };
    let (trace, code) = match run_scenario(&scenario, options) {
        Ok(report) => {
            let _ = writeln!(out, "ok: {} events", report.trace.len());
            if let Some(dir) = &a.bundle_out {
                for b in &report.bundles {
                    let path = dir.join(format!("{}.bundle", b.name));
                    if !write_file(&path, &b.bytes, err) {
                        return EXIT_INPUT;
                    }
                    let _ = writeln!(
                        out,
                        "bundle {} {} nonce={} measurement={} device-key={}",
                        b.name,
                        path.display(),
                        hex::encode(b.nonce),
                        hex::encode(b.measurement),
                        hex::encode(b.device_key)
                    );
                }
            }
            (report.trace, EXIT_OK)
        }
        Err(failure) => {
            let _ = writeln!(err, "{}: {}", a.scenario.display(), failure.error);
            (failure.trace, failure.error.exit_code())
        }
    };
    if let Some(path) = &a.trace_out {
        if !write_file(path, &trace.to_jsonl(), err) {
            return EXIT_INPUT;
        }
    }
    code
}

/// Platform inputs of the machine preset `name`, read from a booted monitor.
pub fn platform(name: &str) -> Option<Platform> {
    let sm = SecurityMonitor::boot(machine_config(name)?, MonitorOptions::default()).ok()?;
    Some(Platform {
        page_size: sm.machine().page_size(),
        sm_image_hash: sm.sm_identity().sm_image_hash(),
        capabilities: sm.capabilities(),
    })
}

pub fn cmd_measure(a: &MeasureArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let Some(platform) = platform(&a.config) else {
        let _ = writeln!(err, "unknown machine config `{}`", a.config);
        return EXIT_INPUT;
    };
    let text = match std::fs::read_to_string(&a.manifest) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(err, "{}: {e}", a.manifest.display());
            return EXIT_INPUT;
        }
    };
    match measure(&text, a.manifest.parent(), &platform) {
        Ok(d) => {
            let _ = writeln!(out, "{}", hex::encode(d));
            EXIT_OK
        }
        Err(MeasureError::Rule(rule)) => {
            let _ = writeln!(out, "{rule}");
            EXIT_INPUT
        }
        Err(e) => {
            let _ = writeln!(err, "{}: {e}", a.manifest.display());
            EXIT_INPUT
        }
    }
}

fn hex32(what: &str, s: &str, err: &mut dyn Write) -> Option<[u8; 32]> {
    let v = hex::decode(s).ok().and_then(|v| <[u8; 32]>::try_from(v).ok());
    if v.is_none() {
        let _ = writeln!(err, "--{what} takes 64 hex digits");
    }
    v
}

pub fn verify(a: &VerifyArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let (Some(nonce), Some(measurement), Some(key)) = (
        hex32("nonce", &a.nonce, err),
        hex32("measurement", &a.measurement, err),
        hex32("device-key", &a.device_key, err),
    ) else {
        return EXIT_INPUT;
    };
    let bytes = match std::fs::read(&a.bundle) {
        Ok(b) => b,
        Err(e) => {
            let _ = writeln!(err, "{}: {e}", a.bundle.display());
            return EXIT_INPUT;
        }
    };
    let Ok(bundle) = AttestationBundle::from_bytes(&bytes) else {
        let _ = writeln!(out, "malformed");
        return EXIT_INPUT;
    };
    match verify_attestation(&bundle, &nonce, &measurement, &key) {
        Ok(()) => {
            let _ = writeln!(out, "ok");
            EXIT_OK
        }
        Err(reason) => {
            let _ = writeln!(out, "{reason}");
            EXIT_FAILED
        }
    }
}

pub fn cmd_explore(a: &ExploreArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let Some(config) = machine_config(&a.config) else {
        let _ = writeln!(err, "unknown machine config `{}`", a.config);
        return EXIT_INPUT;
    };
    let mut cfg = ExploreConfig::minimal(a.depth);
    cfg.config_name = a.config.clone();
    cfg.config = config;
    cfg.budget = a.budget;
    for m in &a.mutations {
        match m.parse::<Mutation>() {
            Ok(m) => cfg = cfg.with_mutation(m),
            Err(e) => {
                let _ = writeln!(err, "{e}");
                return EXIT_INPUT;
            }
        }
    }
    let report = match explore(&cfg) {
        Ok(r) => r,
        Err(e @ ExploreError::BudgetExceeded { .. }) => {
            let _ = writeln!(err, "{e}");
            return EXIT_BUDGET;
        }
        Err(e) => {
            let _ = writeln!(err, "{e}");
            return EXIT_INPUT;
        }
    };
    let _ = writeln!(
        out,
        "states {} transitions {} depth {} violations {}",
        report.states_visited,
        report.transitions,
        report.depth,
        report.violations.len()
    );
    if report.violations.is_empty() {
        return EXIT_OK;
    }
    for (i, cx) in report.violations.iter().enumerate() {
        let path = a.out.join(format!("counterexample-{i}-{}.scn", cx.violation.invariant));
        if !write_file(&path, cx.to_scenario(&cfg.config_name, &cfg.options.mutations).as_bytes(), err) {
            return EXIT_INPUT;
        }
        let _ = writeln!(out, "{}: depth {} -> {}", cx.violation, cx.depth(), path.display());
    }
    EXIT_FAILED
}
