//! `cex`: operator CLI. Exit status 0 on success, 1 when a manifest or schema
//! is invalid, 2 on any other error.

mod state;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use cex_core::bus::SimSession;
use cex_core::experiment::{
    assign_cohort, deploy, validate_experiment, DownlinkState, ExperimentManifest,
};
use cex_core::fleet::samples::{SampleSet, PROFILE_FILE, SCENARIO_FILE, SCHEMA_FILE, STORE_FILE};
use cex_core::fleet::{ce_iteration, run_scenario, simulate_fleet, CeOptions, FleetError, FleetOptions, FleetProfile, DEFAULT_DURATION_US};
use cex_core::idl::{check_compatibility, Verdict};
use cex_core::recorder::{index, record, replay, LogHeader, Speed};
use clap::{Parser, Subcommand};

use state::{find_schema, load_scenario, load_schema, read, FleetState};

#[derive(Parser)]
#[command(name = "cex", version, about = "Run, record and experiment on simulated vehicle fleets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a sample schema, store, scenario, experiment and profile into DIR.
    Init {
        dir: PathBuf,
        /// Modules in the sample scenario.
        #[arg(long, default_value_t = 30)]
        modules: usize,
    },
    /// Validate a scenario, run it on a simulated bus and record the session.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DURATION_US)]
        duration_us: u64,
        /// Log file; defaults to the scenario path with a `.celg` extension.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Schema file; defaults to the `.odvd` next to the scenario with a matching digest.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Artifact store; defaults to `store.cfg` next to the scenario.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Re-deliver a recorded log into a fresh simulated session.
    Replay {
        log: PathBuf,
        /// Replay speed: `1`, `0.5`, `2/3`.
        #[arg(long, default_value = "1")]
        speed: String,
        /// Record the replayed session to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Print a log's header and per-message statistics.
    Loginfo { log: PathBuf },
    /// Simulate a fleet running a scenario under a data-rate profile.
    Fleet {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        duration_us: Option<u64>,
        /// Write per-vehicle logs and a fleet-state directory here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Transfer an experiment's layers to its cohort and update `caches.cfg`.
    Deploy {
        experiment: PathBuf,
        #[arg(long)]
        fleet_state: PathBuf,
    },
    /// Run one full experiment iteration over a fleet-state directory.
    Experiment {
        experiment: PathBuf,
        #[arg(long)]
        fleet_state: PathBuf,
        /// Structured report file.
        #[arg(long)]
        report: PathBuf,
        /// Gateway priority for the metric relay rules.
        #[arg(long, default_value_t = 0)]
        metric_priority: u8,
    },
    /// Schema tools.
    Schema {
        #[command(subcommand)]
        command: SchemaCommand,
    },
}

#[derive(Subcommand)]
enum SchemaCommand {
    /// Compare two schema versions; exits 1 on a breaking change.
    Check { old: PathBuf, new: PathBuf },
}

#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Failure {
        Failure::Runtime(e)
    }
}

impl From<FleetError> for Failure {
    fn from(e: FleetError) -> Failure {
        match e {
            FleetError::Validation(_) | FleetError::Manifest(_) => Failure::Invalid(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("cex: invalid: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("cex: error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Init { dir, modules } => init(&dir, modules),
        Command::Run {
            scenario,
            duration_us,
            out,
            seed,
            schema,
            store,
        } => run(&scenario, duration_us, out, seed, schema.as_deref(), store.as_deref()),
        Command::Replay { log, speed, out, schema } => replay_cmd(&log, &speed, out.as_deref(), schema.as_deref()),
        Command::Loginfo { log } => loginfo(&log),
        Command::Fleet {
            n,
            profile,
            scenario,
            duration_us,
            out,
            schema,
            store,
        } => fleet(n, &profile, &scenario, duration_us, out.as_deref(), schema.as_deref(), store.as_deref()),
        Command::Deploy { experiment, fleet_state } => deploy_cmd(&experiment, &fleet_state),
        Command::Experiment {
            experiment,
            fleet_state,
            report,
            metric_priority,
        } => experiment_cmd(&experiment, &fleet_state, &report, metric_priority),
        Command::Schema {
            command: SchemaCommand::Check { old, new },
        } => schema_check(&old, &new),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn init(dir: &Path, modules: usize) -> Result<(), Failure> {
    if modules < 4 {
        return Err(Failure::Invalid("the sample scenario needs at least 4 modules".into()));
    }
    SampleSet::new(modules)
        .write_to(dir)
        .with_context(|| format!("writing samples to {}", dir.display()))?;
    println!("wrote sample fleet state to {}", dir.display());
    Ok(())
}

fn run(
    path: &Path,
    duration_us: u64,
    out: Option<PathBuf>,
    seed: u64,
    schema: Option<&Path>,
    store: Option<&Path>,
) -> Result<(), Failure> {
    let files = load_scenario(path, schema, store)?;
    let out = out.unwrap_or_else(|| path.with_extension("celg"));
    let (log, summary) = run_scenario(&files.scenario, &files.store, files.schema, duration_us, seed, Vec::new())?;
    write(&out, &log)?;
    println!(
        "ran {} modules for {} us: {} deliveries, {} log entries ({} bytes) -> {}",
        summary.modules,
        summary.duration_us,
        summary.delivered,
        summary.log.entries,
        summary.log.bytes_written,
        out.display()
    );
    for f in &summary.failures {
        println!("module failure: node {} at {} us: {}", f.node_id, f.at_us, f.reason);
    }
    Ok(())
}

fn read_log(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn replay_cmd(path: &Path, speed: &str, out: Option<&Path>, schema: Option<&Path>) -> Result<(), Failure> {
    let speed: Speed = speed.parse().map_err(|e| Failure::Invalid(format!("--speed: {e}")))?;
    let log = read_log(path)?;
    let (header, _) = LogHeader::decode(&log).with_context(|| format!("reading {}", path.display()))?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let schema = find_schema(schema, dir, header.schema_digest)?;
    let mut session = SimSession::new(header.session_id, Arc::new(schema), 0);
    let recording = match out {
        Some(_) => Some(record(&mut session, Vec::new()).map_err(|(_, e)| anyhow::Error::from(e))?),
        None => None,
    };
    let rep = replay(&log, &mut session, speed).context("replaying")?;
    println!("replayed {} envelopes over {} us at speed {speed}", rep.count, rep.duration_us);
    if let (Some(out), Some(recording)) = (out, recording) {
        let (bytes, stats) = recording.close();
        let stats = stats.context("re-recording")?;
        write(out, &bytes)?;
        println!("re-recorded {} entries -> {}", stats.entries, out.display());
    }
    Ok(())
}

fn loginfo(path: &Path) -> Result<(), Failure> {
    let log = read_log(path)?;
    let (header, _) = LogHeader::decode(&log).with_context(|| format!("reading {}", path.display()))?;
    let idx = index(&log).with_context(|| format!("indexing {}", path.display()))?;
    println!("session {}  schema {}  epoch {}", header.session_id, header.schema_digest, header.epoch);
    println!("{idx}");
    Ok(())
}

fn fleet(
    n: Option<usize>,
    profile_path: &Path,
    scenario_path: &Path,
    duration_us: Option<u64>,
    out: Option<&Path>,
    schema: Option<&Path>,
    store: Option<&Path>,
) -> Result<(), Failure> {
    let files = load_scenario(scenario_path, schema, store)?;
    let mut profile = FleetProfile::parse(&read(profile_path)?)
        .map_err(|e| Failure::Invalid(format!("{}: {e}", profile_path.display())))?;
    if let Some(n) = n {
        if n == 0 {
            return Err(Failure::Invalid("--n must be at least 1".into()));
        }
        profile.n = n;
    }
    let report = cex_core::experiment::validate_scenario(&files.scenario, &files.store, &files.schema);
    if !report.is_valid() {
        return Err(FleetError::Validation(report).into());
    }
    let duration_us = duration_us.unwrap_or(profile.duration_us);
    let options = FleetOptions {
        record: out.is_some(),
        digest: false,
    };
    let fleet = simulate_fleet(
        profile.n,
        &files.scenario,
        &profile,
        Arc::clone(&files.schema),
        duration_us,
        profile.seed,
        options,
    )?;
    let outcome = fleet.finish()?;
    println!(
        "{:<10} {:>14} {:>12} {:>12} {:>12} {:>10} {:>9}",
        "vehicle", "offered_B", "uplink_B", "evicted_B", "max_win_B", "budget_B", "failures"
    );
    for v in &outcome.vehicles {
        println!(
            "{:<10} {:>14} {:>12} {:>12} {:>12} {:>10} {:>9}",
            v.sim.vehicle_id,
            v.offered_frame_bytes(),
            v.uplink.bytes,
            v.counters.values().map(|c| c.evicted_bytes).sum::<u64>(),
            v.uplink.max_batch_bytes,
            v.budget_bytes_per_window,
            v.failures.len()
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for v in &outcome.vehicles {
            if let Some(log) = &v.log {
                write(&dir.join(format!("{}.celg", v.sim.vehicle_id)), log)?;
            }
        }
        write(&dir.join(SCHEMA_FILE), files.schema.canonical_source())?;
        write(&dir.join(STORE_FILE), files.store.to_string())?;
        write(&dir.join(SCENARIO_FILE), files.scenario.to_string())?;
        write(&dir.join(PROFILE_FILE), profile.to_string())?;
        println!("fleet state and logs -> {}", dir.display());
    }
    Ok(())
}

fn load_experiment(path: &Path, state: &FleetState) -> Result<ExperimentManifest, Failure> {
    let manifest = ExperimentManifest::parse(&read(path)?)
        .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let f = &state.files;
    let report = validate_experiment(&manifest, Some(&f.scenario), &f.store, &f.schema);
    if !report.is_valid() {
        return Err(FleetError::Validation(report).into());
    }
    Ok(manifest)
}

fn new_fleet(state: &FleetState) -> Result<cex_core::fleet::Fleet, Failure> {
    let mut fleet = cex_core::fleet::Fleet::new(
        &state.files.scenario,
        &state.profile,
        Arc::clone(&state.files.schema),
        FleetOptions::default(),
    )?;
    state.provision(&mut fleet)?;
    Ok(fleet)
}

fn deploy_cmd(path: &Path, dir: &Path) -> Result<(), Failure> {
    let state = FleetState::load(dir)?;
    let manifest = load_experiment(path, &state)?;
    let mut fleet = new_fleet(&state)?;
    let ids = state.profile.vehicle_ids();
    let cohort = assign_cohort(&ids, manifest.fraction, &manifest.id, manifest.seed);
    let tops: Vec<_> = manifest.delta.iter().map(|m| m.layer).collect();
    println!("{:<10} {:>7} {:>12}", "vehicle", "layers", "bytes");
    let (mut layers, mut bytes) = (0, 0);
    for v in fleet.vehicles_mut() {
        if !cohort.contains(&v.sim.vehicle_id) {
            continue;
        }
        let id = v.sim.vehicle_id.clone();
        let rep = deploy(&tops, &state.files.store, v.parts().0.cache_mut(), DownlinkState::UNLIMITED)
            .with_context(|| format!("deploying to {id}"))?;
        println!("{:<10} {:>7} {:>12}", id, rep.layers_sent, rep.bytes_sent);
        layers += rep.layers_sent;
        bytes += rep.bytes_sent;
    }
    println!("cohort {}/{}: {layers} layers, {bytes} bytes transferred", cohort.len(), ids.len());
    state.save_caches(fleet.vehicles().iter().map(|v| (v.sim.vehicle_id.as_str(), v.agent().cache())))?;
    Ok(())
}

fn experiment_cmd(path: &Path, dir: &Path, report_path: &Path, metric_priority: u8) -> Result<(), Failure> {
    let state = FleetState::load(dir)?;
    let manifest = load_experiment(path, &state)?;
    let mut fleet = new_fleet(&state)?;
    let report = ce_iteration(&manifest, &mut fleet, &state.files.store, CeOptions { metric_priority })?;
    write(report_path, report.to_report_text())?;
    print!("{report}");
    println!("report -> {}", report_path.display());
    Ok(())
}

fn schema_check(old: &Path, new: &Path) -> Result<(), Failure> {
    let load = |p: &Path| load_schema(p).map_err(|e| Failure::Invalid(format!("{e:#}")));
    let report = check_compatibility(&load(old)?, &load(new)?);
    print!("{report}");
    if report.verdict == Verdict::Breaking {
        return Err(Failure::Invalid("breaking schema change".into()));
    }
    Ok(())
}
