//! `ringveil` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 verification failure, 3 I/O.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{build_view, distinguish_schedules, AdversaryConfig};
use crate::crypto::{
    gen_params, puzzle_create, puzzle_fast_eval, puzzle_solve, Puzzle, PuzzleParams, DEFAULT_MODULUS_BITS,
};
use crate::protocol::owner_verify_execution;
use crate::schedule::{PartialOrder, SchedulePlan};
use crate::simnet::{
    channel_view_script, latency_sweep, write_sweep_csv, SimConfig, SimError, SimStats, Simulation, SweepRow,
    Topology, TraceLog, CHANNEL_VIEW_DURATION,
};
use crate::token::DataMode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Verification(_) => 2,
            CliError::Io { .. } => 3,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Csv(e) => CliError::Io { path: PathBuf::from("<csv>"), source: std::io::Error::other(e) },
            other => CliError::Usage(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

#[derive(Parser, Debug)]
#[command(name = "ringveil", version, about = "Token-ring scheduling with time-lock puzzles")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compile a schedule file into a plan.
    #[command(subcommand)]
    Schedule(ScheduleCmd),
    /// Generate, solve or verify a single puzzle.
    #[command(subcommand)]
    Puzzle(PuzzleCmd),
    /// Measure this host's modular squaring rate.
    Calibrate(CalibrateArgs),
    /// Run the network simulator.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Passive traffic analysis of simulator traces.
    #[command(subcommand)]
    Adversary(AdversaryCmd),
}

#[derive(Subcommand, Debug)]
enum ScheduleCmd {
    Compile {
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MODULUS_BITS)]
        modulus_bits: u64,
        #[arg(long, env = "RINGVEIL_SEED", default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand, Debug)]
enum PuzzleCmd {
    Gen(PuzzleGenArgs),
    Solve {
        #[arg(long)]
        puzzle: PathBuf,
    },
    Verify {
        #[arg(long)]
        puzzle: PathBuf,
        /// Euler totient of the puzzle modulus, decimal.
        #[arg(long)]
        phi: String,
        /// Expected value, decimal; compared against the fast evaluation.
        #[arg(long)]
        value: Option<String>,
    },
}

#[derive(Args, Debug)]
struct PuzzleGenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    t_hat: u64,
    #[arg(long, default_value = "on")]
    command: String,
    /// Fixed primes, decimal. Both or neither.
    #[arg(long, requires = "q")]
    p: Option<String>,
    #[arg(long, requires = "p")]
    q: Option<String>,
    #[arg(long)]
    base: Option<String>,
    #[arg(long)]
    key: Option<String>,
    #[arg(long, default_value_t = 0)]
    t_val: u64,
    #[arg(long, default_value_t = DEFAULT_MODULUS_BITS)]
    modulus_bits: u64,
    #[arg(long, env = "RINGVEIL_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long, default_value_t = DEFAULT_MODULUS_BITS)]
    modulus_bits: u64,
    #[arg(long, default_value_t = 300)]
    duration_ms: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum Mode {
    Ring,
    Star,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum Script {
    None,
    /// Four commands over one minute.
    ChannelView,
}

#[derive(Args, Debug, Clone)]
struct SimArgs {
    #[arg(long, default_value_t = 3)]
    devices: usize,
    /// Ring size emulated by the token counter; defaults to `--devices`.
    #[arg(long = "virtual")]
    virtual_devices: Option<usize>,
    #[arg(long, default_value_t = 10)]
    rounds: u32,
    #[arg(long, value_enum, default_value_t = Mode::Ring)]
    mode: Mode,
    #[arg(long, env = "RINGVEIL_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Script::None)]
    script: Script,
    #[arg(long, default_value_t = 2_000)]
    hop_latency: u64,
    #[arg(long, default_value_t = 0)]
    jitter: u64,
    /// Bytes per microsecond; 0 disables transmit time.
    #[arg(long, default_value_t = 1.0)]
    bandwidth: f64,
    #[arg(long, default_value_t = 500)]
    hold: u64,
    #[arg(long, default_value_t = 1)]
    squarings_per_us: u64,
    #[arg(long, default_value_t = 256)]
    modulus_bits: u64,
}

#[derive(Subcommand, Debug)]
enum SimCmd {
    Run {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: PathBuf,
        /// Replays a previous run's manifest instead of the flags above.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    Sweep {
        #[command(flatten)]
        sim: SimArgs,
        /// Comma-separated device counts.
        #[arg(long = "counts", value_delimiter = ',', required = true)]
        counts: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Subcommand, Debug)]
enum AdversaryCmd {
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        /// Second trace to compare against.
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        significance: f64,
    },
}

/// Inputs that fully determine a `sim run`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: SimConfig,
    pub config_hash: String,
    pub schedule: Option<PathBuf>,
    pub script: String,
    pub output_dir: PathBuf,
}

fn config_hash(cfg: &SimConfig, schedule_text: &str, script: Script) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update(schedule_text.as_bytes());
    h.update(format!("{script:?}").as_bytes());
    hex::encode(h.finalize())
}

fn sim_config(a: &SimArgs) -> SimConfig {
    let n_virtual = a.virtual_devices.unwrap_or(a.devices);
    SimConfig {
        n_physical: a.devices,
        n_virtual,
        topology: match a.mode {
            Mode::Ring => Topology::Ring,
            Mode::Star => Topology::Star,
        },
        hop_latency: a.hop_latency,
        jitter: a.jitter,
        bandwidth: (a.bandwidth > 0.0).then_some(a.bandwidth),
        squarings_per_us: a.squarings_per_us,
        rounds: if a.script == Script::ChannelView { u32::MAX } else { a.rounds },
        duration: (a.script == Script::ChannelView).then_some(CHANNEL_VIEW_DURATION),
        modulus_bits: a.modulus_bits,
        data_mode: DataMode::SubFields,
        seed: a.seed,
        ..SimConfig::default()
    }
}

fn parse_big(s: &str, what: &str) -> CliResult<BigUint> {
    s.parse::<BigUint>().map_err(|_| CliError::Usage(format!("{what}: not a decimal integer: {s:?}")))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Schedule(ScheduleCmd::Compile { schedule, out: path, modulus_bits, seed }) => {
            let order = PartialOrder::parse(&read(&schedule)?).map_err(|e| CliError::Usage(e.to_string()))?;
            let max_id = order.devices.iter().map(|d| d.0 as usize).max().unwrap_or(1).max(1);
            let cfg = SimConfig { n_physical: max_id, n_virtual: max_id, modulus_bits, seed, ..SimConfig::default() };
            let mut sim = Simulation::new(cfg)?;
            sim.chain(&order)?;
            let plan = sim.compile(&order, 0, 0)?;
            let json = serde_json::to_string_pretty(&plan).expect("plan serializes");
            write(&path, json)?;
            let _ = writeln!(out, "compiled {} puzzle(s), slot length {} us", plan.entries.len(), plan.slot_length);
        }
        Command::Puzzle(cmd) => puzzle(cmd, out)?,
        Command::Calibrate(a) => {
            let s = calibrate(a.modulus_bits, Duration::from_millis(a.duration_ms))?;
            let _ = writeln!(out, "modulus_bits={} squarings_per_second={s:.0}", a.modulus_bits);
        }
        Command::Sim(SimCmd::Run { sim, out: dir, manifest }) => sim_run(sim, &dir, manifest.as_deref(), out)?,
        Command::Sim(SimCmd::Sweep { sim, counts, out: dir, parallel }) => {
            let base = sim_config(&sim);
            let rows: Vec<SweepRow> = latency_sweep(&base, &counts, parallel)?;
            create_dir(&dir)?;
            let mut buf = Vec::new();
            write_sweep_csv(&rows, &mut buf)?;
            write(&dir.join("stats.csv"), &buf)?;
            let _ = out.write_all(&buf);
        }
        Command::Adversary(AdversaryCmd::Analyze { trace, against, significance }) => {
            let load = |p: &Path| -> CliResult<TraceLog> {
                let file = fs::File::open(p).map_err(|source| CliError::Io { path: p.to_path_buf(), source })?;
                TraceLog::read_csv(file).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
            };
            let view = build_view(&load(&trace)?);
            match against {
                Some(other) => {
                    let cfg = AdversaryConfig { significance, ..AdversaryConfig::default() };
                    let report = distinguish_schedules(&view, &build_view(&load(&other)?), &cfg)
                        .map_err(|e| CliError::Usage(e.to_string()))?;
                    let _ = out.write_all(report.to_text().as_bytes());
                }
                None => {
                    let _ = writeln!(out, "node,commands,data,first_command_us,first_data_us");
                    for (node, row) in view.activity_table() {
                        let first = |v: &[u64]| v.first().map_or(String::new(), u64::to_string);
                        let _ = writeln!(
                            out,
                            "{node},{},{},{},{}",
                            row.commands,
                            row.data,
                            first(&row.command_times),
                            first(&row.data_times)
                        );
                    }
                }
            }
        }
    }
    Ok(())
}

fn puzzle(cmd: PuzzleCmd, out: &mut dyn Write) -> CliResult<()> {
    let load = |p: &Path| -> CliResult<Puzzle> {
        let bytes = hex::decode(read(p)?.trim()).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        Puzzle::from_bytes(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
    };
    match cmd {
        PuzzleCmd::Gen(a) => {
            let params = match (&a.p, &a.q) {
                (Some(p), Some(q)) => PuzzleParams::from_primes(parse_big(p, "p")?, parse_big(q, "q")?),
                _ => gen_params(a.modulus_bits, a.seed),
            }
            .map_err(|e| CliError::Usage(e.to_string()))?;
            let mut rng = ChaCha20Rng::seed_from_u64(a.seed);
            let base = a.base.as_deref().map(|s| parse_big(s, "base")).transpose()?;
            let base = base.unwrap_or_else(|| params.random_base(&mut rng));
            let key = a.key.as_deref().map(|s| parse_big(s, "key")).transpose()?;
            let key = key.unwrap_or_else(|| params.random_key(&mut rng));
            let puzzle = puzzle_create(&params, &base, a.t_hat, a.command.as_bytes(), &key, a.t_val)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            write(&a.out, hex::encode(puzzle.to_bytes()) + "\n")?;
            let _ = writeln!(out, "n={} phi={} key={} e_k={}", params.n, params.phi, key, puzzle.e_k);
        }
        PuzzleCmd::Solve { puzzle } => {
            let p = load(&puzzle)?;
            let sol = puzzle_solve(&p).map_err(|e| CliError::Verification(e.to_string()))?;
            let _ = writeln!(
                out,
                "key={} value={} squarings={} command={}",
                sol.key,
                sol.value,
                sol.squarings_performed,
                String::from_utf8_lossy(&sol.command)
            );
        }
        PuzzleCmd::Verify { puzzle, phi, value } => {
            let p = load(&puzzle)?;
            let fast = puzzle_fast_eval(&p, &parse_big(&phi, "phi")?);
            let _ = writeln!(out, "value={fast}");
            if let Some(v) = value {
                if parse_big(&v, "value")? != fast {
                    return Err(CliError::Verification(format!("expected {v}, fast evaluation gives {fast}")));
                }
                let _ = writeln!(out, "verified=true");
            }
        }
    }
    Ok(())
}

/// Sequential squarings per second at the given modulus width.
pub fn calibrate(modulus_bits: u64, duration: Duration) -> CliResult<f64> {
    let params = gen_params(modulus_bits, 0x5eed).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut x = params.random_base(&mut rng);
    let start = Instant::now();
    let mut count = 0u64;
    while start.elapsed() < duration {
        for _ in 0..256 {
            x = &x * &x % &params.n;
        }
        count += 256;
    }
    std::hint::black_box(&x);
    Ok(count as f64 / start.elapsed().as_secs_f64())
}

fn sim_run(args: SimArgs, dir: &Path, manifest: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let (cfg, schedule, script) = match manifest {
        Some(m) => {
            let text = read(m)?;
            let mf: RunManifest =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", m.display())))?;
            let script = Script::from_str(&mf.script, true).map_err(CliError::Usage)?;
            (mf.config, mf.schedule, script)
        }
        None => (sim_config(&args), args.schedule.clone(), args.script),
    };
    let schedule_text = schedule.as_deref().map(read).transpose()?.unwrap_or_default();
    let order = if schedule.is_some() {
        Some(PartialOrder::parse(&schedule_text).map_err(|e| CliError::Usage(e.to_string()))?)
    } else {
        None
    };

    let mut sim = Simulation::new(cfg.clone())?;
    let plan: Option<SchedulePlan> = match &order {
        Some(o) if !o.is_empty() => {
            if o.devices.iter().any(|d| d.0 == 0 || d.0 as usize > cfg.n_physical) {
                return Err(CliError::Usage(format!("schedule names devices outside 1..={}", cfg.n_physical)));
            }
            sim.chain(o)?;
            Some(sim.compile(o, 0, 0)?)
        }
        _ => None,
    };
    let script_cmds = match script {
        Script::None => Vec::new(),
        Script::ChannelView => {
            if cfg.n_physical < 3 {
                return Err(CliError::Usage("the channel-view script needs at least 3 devices".into()));
            }
            channel_view_script()
        }
    };
    let output = sim.run(plan.as_ref(), &script_cmds)?;

    create_dir(dir)?;
    write(&dir.join("trace.csv"), output.trace.to_csv_string())?;
    write(&dir.join("events.csv"), output.events_text())?;
    write(&dir.join("stats.csv"), stats_csv(cfg.n_virtual, &output.stats))?;
    let manifest = RunManifest {
        seed: cfg.seed,
        config_hash: config_hash(&cfg, &schedule_text, script),
        config: cfg,
        schedule,
        script: script.to_possible_value().expect("no skipped variants").get_name().to_string(),
        output_dir: dir.to_path_buf(),
    };
    write(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;

    let _ = writeln!(
        out,
        "seed={} config_hash={} frames={} rounds={} mean_latency_us={:.1}",
        manifest.seed,
        manifest.config_hash,
        output.stats.frames,
        output.stats.rounds_completed,
        output.stats.mean_latency_us
    );
    if let Some(plan) = &plan {
        if !owner_verify_execution(&output.reports, &sim.params, plan) {
            return Err(CliError::Verification("execution reports do not match the plan".into()));
        }
        let _ = writeln!(out, "verified=true reports={}", output.reports.len());
    }
    Ok(())
}

fn stats_csv(n: usize, s: &SimStats) -> String {
    format!(
        "n_devices,mean_latency_us,var_latency_us,mean_token_bytes\n{n},{},{},{}\n",
        s.mean_latency_us, s.var_latency_us, s.mean_token_bytes
    )
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            if code == 0 {
                let _ = write!(out, "{e}");
            } else {
                let _ = write!(err, "{e}");
            }
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
