//! `tersim`: run exams and campaigns, recompute statistics, serve the slave.

mod serve;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use tersim_core::campaign::{run_campaign, run_exam, ChannelChoice, CohortSpec};
use tersim_core::netchannel::ChannelParams;
use tersim_core::phantom::PhantomConfig;
use tersim_core::scenario::Scenario;
use tersim_core::session::SessionConfig;
use tersim_core::stats::records::{read_records, write_records};
use tersim_core::stats::{campaign_report, ExamRecord, StudyReport};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Environment(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Environment(_) => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Debug, Parser)]
#[command(name = "tersim", version, about = "Tele-echography simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario through both arms and write records, trace and report.
    Exam {
        /// Scenario file, or the name of a bundled scenario.
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the scenario channel.
        #[arg(long)]
        channel_preset: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Generate a synthetic cohort, run every patient and aggregate.
    Campaign {
        /// Cohort file; the default cohort when omitted.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Overrides the cohort seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the cohort channel.
        #[arg(long)]
        channel_preset: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Recompute the study report from a records file.
    Stats {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Host the slave behind a WebSocket bridge with a JSON status endpoint.
    Serve {
        /// Phantom preset name or phantom file.
        #[arg(long, default_value = "aaa_54mm")]
        phantom: String,
        #[arg(long, default_value = "direct")]
        channel_preset: String,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Environment(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Environment(format!("cannot write {}: {e}", path.display())))
}

fn write_csv(path: &Path, records: &[ExamRecord]) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| CliError::Environment(format!("cannot write {}: {e}", path.display())))?;
    write_records(file, records).map_err(|e| CliError::Environment(format!("cannot write {}: {e}", path.display())))
}

fn print_report(report: &StudyReport, format: Format) {
    match format {
        Format::Json => println!("{}", report.to_json()),
        Format::Table => print!("{}", report.to_table()),
    }
}

fn channel(preset: &str) -> Result<ChannelParams, CliError> {
    ChannelParams::preset(preset).map_err(|e| CliError::Input(e.to_string()))
}

fn load_scenario(arg: &str) -> Result<Scenario, CliError> {
    let path = Path::new(arg);
    if path.exists() {
        return Scenario::from_path(path).map_err(|e| CliError::Input(format!("{arg}: {e}")));
    }
    if let Some(s) = Scenario::bundled(arg) {
        return Ok(s);
    }
    Err(CliError::Input(format!(
        "{arg}: no such file or bundled scenario (bundled: {})",
        Scenario::BUNDLED.join(", ")
    )))
}

fn cmd_exam(
    scenario: &str,
    out_dir: &Path,
    seed: Option<u64>,
    preset: Option<&str>,
    format: Format,
) -> Result<(), CliError> {
    let mut scenario = load_scenario(scenario)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
        scenario.channel = scenario.channel.with_seed(seed);
    }
    if let Some(p) = preset {
        scenario.channel = channel(p)?.with_seed(scenario.seed);
    }
    create_dir(out_dir)?;
    let outcome = run_exam(&scenario.name, &scenario, scenario.channel, scenario.seed, SessionConfig::default())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let records = [outcome.bedside, outcome.remote];
    write_csv(&out_dir.join("records.csv"), &records)?;
    write_file(&out_dir.join("trace.jsonl"), outcome.trace.to_jsonl().as_bytes())?;
    let report = campaign_report(&records).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out_dir.join("report.json"), report.to_json().as_bytes())?;
    print_report(&report, format);
    match &outcome.trace.failure {
        Some(why) => Err(CliError::Runtime(format!("remote exam failed: {why}"))),
        None => Ok(()),
    }
}

fn cmd_campaign(
    cohort: Option<&Path>,
    out_dir: &Path,
    seed: Option<u64>,
    preset: Option<&str>,
    format: Format,
) -> Result<(), CliError> {
    let mut spec = match cohort {
        Some(p) => CohortSpec::from_path(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
        None => CohortSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    if let Some(p) = preset {
        channel(p)?;
        spec.channel = ChannelChoice::Preset(p.to_string());
    }
    spec.validate().map_err(|e| CliError::Input(e.to_string()))?;
    create_dir(out_dir)?;
    let result = run_campaign(&spec, SessionConfig::default()).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_csv(&out_dir.join("records.csv"), &result.records)?;
    write_file(&out_dir.join("report.json"), result.report.to_json().as_bytes())?;
    print_report(&result.report, format);
    Ok(())
}

fn cmd_stats(records: &Path, format: Format) -> Result<(), CliError> {
    let file = fs::File::open(records).map_err(|e| CliError::Input(format!("{}: {e}", records.display())))?;
    let rows = read_records(file).map_err(|e| CliError::Input(format!("{}: {e}", records.display())))?;
    let report = campaign_report(&rows).map_err(|e| CliError::Input(format!("{}: {e}", records.display())))?;
    print_report(&report, format);
    Ok(())
}

fn load_phantom(arg: &str) -> Result<PhantomConfig, CliError> {
    if let Some(p) = PhantomConfig::preset(arg) {
        return Ok(p);
    }
    let src = fs::read_to_string(arg).map_err(|e| CliError::Input(format!("{arg}: not a preset, and {e}")))?;
    PhantomConfig::from_kv_str(&src).map_err(|e| CliError::Input(format!("{arg}: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Exam { scenario, out_dir, seed, channel_preset, format } => {
            cmd_exam(&scenario, &out_dir, seed, channel_preset.as_deref(), format)
        }
        Command::Campaign { cohort, out_dir, seed, channel_preset, format } => {
            cmd_campaign(cohort.as_deref(), &out_dir, seed, channel_preset.as_deref(), format)
        }
        Command::Stats { records, format } => cmd_stats(&records, format),
        Command::Serve { phantom, channel_preset, port, host } => {
            let opts = serve::ServeOptions {
                host,
                port,
                phantom: load_phantom(&phantom)?,
                channel: channel(&channel_preset)?,
            };
            serve::serve(opts)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TERSIM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tersim: {e}");
            ExitCode::from(e.code())
        }
    }
}
