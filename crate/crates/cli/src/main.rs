mod config_file;

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mcpower::boundary::BoundaryTable;
use mcpower::engine::{self, FinalReport, RunCheckpoint, RunConfig, StopReason, StreamCount};
use mcpower::error::{Error, SamplerError};
use mcpower::experiments::{self, TableConfig, Which};
use mcpower::joint_test::JointConfig;
use mcpower::oracle::{self, VerifyConfig};
use mcpower::pilot::{self, PilotConfig};
use mcpower::precision::PrecisionRule;
use mcpower::samplers::{
    simulate_dataset, stream_rng, PermutationStream, SamplerSpec, SeedDomain, StreamFactory,
};
use mcpower::spending::{SpendingSchedule, DEFAULT_HALF_LIFE, DEFAULT_JOINT_STRIDE};

const EXIT_CONFIG: u8 = 1;
const EXIT_TRUNCATED: u8 = 2;
const EXIT_SAMPLER: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "mcpower",
    version,
    about = "Confidence intervals of guaranteed precision for Monte Carlo test power"
)]
#[command(args_override_self = true)]
struct Cli {
    /// Flat key=value file of flag defaults; flags given on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Root seed of every random stream.
    #[arg(long, global = true, env = "MCPOWER_SEED", default_value_t = 0)]
    seed: u64,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pilot, stream-count planning and the main run.
    Run(RunCmd),
    /// Pilot and N_Blind, N_Pilot, N_Opt without the main run.
    Plan(PlanCmd),
    /// Stopping boundaries as CSV.
    Boundaries(BoundariesCmd),
    /// Average-effort tables for the Beta(1, x) models.
    Tables(TablesCmd),
    /// Exact checks of the boundary and interval guarantees.
    Verify(VerifyCmd),
    /// Power of the two-sample permutation test for several effects.
    PermExample(PermCmd),
    /// Permutation-test child speaking the external line protocol.
    #[command(hide = true)]
    ExtChild(ExtChildCmd),
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Nominal level of the test whose power is estimated.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Fixed maximal interval length; shorthand for --rule fixed:<delta>.
    #[arg(long, conflicts_with = "rule")]
    delta: Option<f64>,
    /// fixed:0.02 | sqrt[:0.02] | band:0.1,0.02,0.05,0.95 | lefttail:0.02,0.05 | custom:<path>
    #[arg(long)]
    rule: Option<PrecisionRule>,
    /// One minus the coverage probability.
    #[arg(long, default_value_t = 0.01)]
    gamma: f64,
    /// Per-stream error; defaults to the rule's reference length / 200.
    #[arg(long)]
    epsilon: Option<f64>,
    /// h in ε_t = ε t / (h + t).
    #[arg(long, default_value_t = DEFAULT_HALF_LIFE)]
    spending_halflife: u64,
    /// Error level of the pilot interval; defaults to 0.1 gamma.
    #[arg(long)]
    gamma_pilot: Option<f64>,
    /// Error level of the joint test; defaults to 0.1 gamma.
    #[arg(long)]
    gamma_joint: Option<f64>,
    /// Steps between joint-test checkpoints.
    #[arg(long, default_value_t = DEFAULT_JOINT_STRIDE)]
    joint_stride: u64,
    /// Level of each joint binomial test.
    #[arg(long, default_value_t = mcpower::joint_test::DEFAULT_ETA)]
    eta: f64,
    /// Streams in the pilot run.
    #[arg(long, default_value_t = pilot::DEFAULT_PILOT_N)]
    pilot_n: u64,
    /// Steps of the pilot run.
    #[arg(long, default_value_t = pilot::DEFAULT_PILOT_TMAX)]
    pilot_tmax: u64,
    /// Skip the pilot run.
    #[arg(long)]
    no_pilot: bool,
    /// Disable the joint test.
    #[arg(long)]
    no_joint: bool,
    /// blind | pilot | optimal | <number>
    #[arg(long, default_value = "optimal")]
    streams: String,
    /// beta:x=23.47 | beta:power=0.7 | fixed:p=0.03 | discrete:p=..,w=.. | perm:K=4,L=8,effect=1.0 | ext:cmd="..."
    #[arg(long, default_value = "beta:x=1")]
    sampler: String,
    /// External child processes for an ext: sampler.
    #[arg(long, default_value_t = 1)]
    external_procs: usize,
    /// Stop once this many bits have been drawn.
    #[arg(long, default_value_t = engine::DEFAULT_MAX_EFFORT)]
    max_effort: u64,
    /// Replicates per grid point of the N_Opt emulation.
    #[arg(long, default_value_t = 200)]
    planner_replicates: usize,
}

impl ModelArgs {
    fn rule(&self) -> PrecisionRule {
        match (&self.rule, self.delta) {
            (Some(r), _) => r.clone(),
            (None, Some(d)) => PrecisionRule::fixed(d),
            (None, None) => PrecisionRule::fixed(0.02),
        }
    }

    fn run_config(&self, seed: u64, workers: usize) -> Result<RunConfig> {
        let mut c = RunConfig::new(self.alpha, self.rule(), self.gamma);
        c.epsilon = self.epsilon;
        c.half_life = self.spending_halflife;
        c.seed = seed;
        c.workers = workers;
        c.max_effort = self.max_effort;
        c.planner.replicates = self.planner_replicates;
        c.pilot = (!self.no_pilot).then(|| PilotConfig {
            n: self.pilot_n,
            t_max: self.pilot_tmax,
            gamma_pilot: self.gamma_pilot.unwrap_or(0.1 * self.gamma),
        });
        c.joint = (!self.no_joint).then(|| JointConfig {
            eta: self.eta,
            stride: self.joint_stride,
            ..JointConfig::new(self.gamma_joint.unwrap_or(0.1 * self.gamma))
        });
        c.streams = match self.streams.as_str() {
            "blind" => StreamCount::Blind,
            "pilot" => StreamCount::Pilot,
            "optimal" => StreamCount::Optimal,
            n => StreamCount::Fixed(n.parse().map_err(|_| {
                Error::Config(format!(
                    "--streams expects blind, pilot, optimal or a count, got {n:?}"
                ))
            })?),
        };
        if c.pilot.is_none() && self.streams == "optimal" {
            c.streams = StreamCount::Blind;
        }
        c.validate()?;
        Ok(c)
    }

    fn factory(&self, seed: u64) -> Result<StreamFactory> {
        let spec: SamplerSpec = self.sampler.parse()?;
        Ok(StreamFactory::new(
            spec.resolve(self.alpha),
            seed,
            self.external_procs,
        )?)
    }
}

#[derive(Args, Debug)]
struct RunCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// Write the JSON report here.
    #[arg(long, value_name = "PATH")]
    json: Option<PathBuf>,
    /// Write the resolution log CSV here.
    #[arg(long, value_name = "PATH")]
    log: Option<PathBuf>,
    /// Where to save the checkpoint if the sampler fails.
    #[arg(long, value_name = "PATH", default_value = "mcpower-checkpoint.json")]
    checkpoint: PathBuf,
    /// Continue from a saved checkpoint.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
    /// Print the JSON report instead of the summary.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct PlanCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct BoundariesCmd {
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_HALF_LIFE)]
    spending_halflife: u64,
    /// Last step written.
    #[arg(long, default_value_t = 2000)]
    tmax: u64,
    /// Output file; standard output if absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum TableArg {
    Table1,
    Table2,
}

#[derive(Args, Debug)]
struct TablesCmd {
    #[arg(long, value_enum, default_value = "table1")]
    which: TableArg,
    /// Multiplies every precision target; 1 reproduces the published scale.
    #[arg(long, default_value_t = 2.5)]
    scale: f64,
    /// Runs per cell; defaults to 100 / scale.
    #[arg(long)]
    replicates: Option<usize>,
    /// Comma-separated powers of the Beta(1, x) models.
    #[arg(long, value_delimiter = ',', default_values_t = experiments::BETAS.to_vec())]
    betas: Vec<f64>,
    #[arg(long, default_value_t = 0.01)]
    gamma: f64,
    /// Pre-simulated streams per model for the emulated rows.
    #[arg(long)]
    pool_size: Option<u64>,
    /// Censoring step of the pre-simulated streams.
    #[arg(long)]
    pool_cap: Option<u64>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyCmd {
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_HALF_LIFE)]
    spending_halflife: u64,
    /// Horizon of the exact crossing-probability check.
    #[arg(long, default_value_t = 2000)]
    t_crossing: u64,
    /// Horizon of the minimality check.
    #[arg(long, default_value_t = 500)]
    t_minimal: u64,
    /// Streams for the Lemma 2 survival-slope check; 0 skips it.
    #[arg(long, default_value_t = 0)]
    lemma2_streams: u64,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct PermCmd {
    /// Standardized mean differences.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 1.0, 1.5, 2.0])]
    effects: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 8)]
    l: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long, default_value_t = 0.01)]
    gamma: f64,
    /// Datasets for the exact-enumeration truth; 0 skips it.
    #[arg(long, default_value_t = 100_000)]
    truth_datasets: u64,
}

#[derive(Args, Debug)]
struct ExtChildCmd {
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 8)]
    l: usize,
    #[arg(long)]
    effect: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
}

fn main() -> ExitCode {
    let cli = match parse_cli() {
        Ok(c) => c,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1).map(|c| c.to_string()) {
                if !msg.ends_with(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1).map(|c| c.to_string()) {
                if !msg.ends_with(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            eprintln!("error: {msg}");
            let code = match e.downcast_ref::<Error>() {
                Some(Error::Sampler(SamplerError::Spec(_))) => EXIT_CONFIG,
                Some(Error::Sampler(_)) | Some(Error::Aborted { .. }) => EXIT_SAMPLER,
                _ => EXIT_CONFIG,
            };
            ExitCode::from(code)
        }
    }
}

fn parse_cli() -> Result<Cli> {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let Some(path) = &cli.config else {
        return Ok(cli);
    };
    let argv = config_file::splice(&argv, &config_file::read(path)?)?;
    Cli::try_parse_from(&argv).or_else(|e| e.exit())
}

fn dispatch(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Run(c) => cmd_run(cli, c),
        Command::Plan(c) => cmd_plan(cli, c),
        Command::Boundaries(c) => cmd_boundaries(c),
        Command::Tables(c) => cmd_tables(cli, c),
        Command::Verify(c) => cmd_verify(cli, c),
        Command::PermExample(c) => cmd_perm(cli, c),
        Command::ExtChild(c) => cmd_ext_child(cli, c),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_run(cli: &Cli, cmd: &RunCmd) -> Result<u8> {
    let mut config = cmd.model.run_config(cli.seed, cli.workers)?;
    config.record_log = cmd.log.is_some();
    let start = Instant::now();
    let result = match &cmd.resume {
        Some(p) => {
            let cp = RunCheckpoint::load(p)?;
            config.seed = cp.seed;
            let factory = cmd.model.factory(cp.seed)?;
            engine::resume(&config, &factory, cp)
        }
        None => engine::run(&config, &cmd.model.factory(cli.seed)?),
    };
    let out = match result {
        Ok(o) => o,
        Err(Error::Aborted { source, checkpoint }) => {
            checkpoint.save(&cmd.checkpoint)?;
            eprintln!(
                "sampler failed at t = {}: {source}\ncheckpoint saved to {}; continue with --resume {}",
                checkpoint.t,
                cmd.checkpoint.display(),
                cmd.checkpoint.display()
            );
            return Ok(EXIT_SAMPLER);
        }
        Err(e) => return Err(e.into()),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let json = out.report.to_json()?;
    if let Some(p) = &cmd.json {
        std::fs::write(p, &json).with_context(|| format!("cannot write {}", p.display()))?;
    }
    if let Some(p) = &cmd.log {
        engine::write_log(p, &out.log)?;
    }
    let mut w = io::stdout().lock();
    if cmd.quiet {
        writeln!(w, "{json}")?;
    } else {
        write_summary(&mut w, &out.report, elapsed)?;
    }
    Ok(match out.report.stop_reason {
        StopReason::Admitted | StopReason::JointTest => 0,
        StopReason::EffortCeiling | StopReason::Exhausted => EXIT_TRUNCATED,
    })
}

fn write_summary(w: &mut impl Write, r: &FinalReport, secs: f64) -> io::Result<()> {
    let iv = r.interval;
    writeln!(
        w,
        "interval      [{:.6}, {:.6}]  length {:.6}, coverage {}",
        iv.low,
        iv.high,
        iv.length(),
        1.0 - r.gamma
    )?;
    match r.point_estimate {
        Some(p) => writeln!(
            w,
            "point         {p:.6}  (R/(R+A) over resolved streams; carries no guarantee)"
        )?,
        None => writeln!(w, "point         n/a  (no stream resolved)")?,
    }
    let opt = |v: Option<u64>| v.map_or("-".to_string(), |n| n.to_string());
    writeln!(
        w,
        "streams       N = {} ({}); N_Blind {}, N_Pilot {}, N_Opt {}",
        r.n_streams,
        r.stream_count,
        r.plan.n_blind,
        opt(r.plan.n_pilot),
        opt(r.plan.n_opt)
    )?;
    writeln!(
        w,
        "outcomes      R = {}, A = {}, unresolved = {}",
        r.positives, r.negatives, r.unresolved
    )?;
    if let Some(adj) = r.joint_adjustment {
        writeln!(
            w,
            "joint test    certified {} positive, {} negative",
            adj.r, adj.a
        )?;
    }
    writeln!(
        w,
        "effort        {} bits (main {}, pilot {})",
        r.effort, r.effort_main, r.effort_pilot
    )?;
    let reason = match r.stop_reason {
        StopReason::Admitted => "interval admitted by the precision rule",
        StopReason::JointTest => "joint test certified an admissible interval",
        StopReason::EffortCeiling => "effort ceiling reached (precision target NOT met)",
        StopReason::Exhausted => "all streams resolved (precision target NOT met)",
    };
    writeln!(w, "stopped       t = {}: {reason}", r.steps)?;
    writeln!(w, "wall time     {secs:.2} s")
}

fn cmd_plan(cli: &Cli, cmd: &PlanCmd) -> Result<u8> {
    let config = cmd.model.run_config(cli.seed, cli.workers)?;
    let factory = cmd.model.factory(cli.seed)?;
    let summary = match config.pilot {
        Some(_) => Some(pilot::run_pilot(&config, &factory)?),
        None => None,
    };
    let outcome = pilot::plan(&config, summary.as_ref())?;
    let mut w = io::stdout().lock();
    if cmd.json {
        let v = serde_json::json!({
            "plan": outcome.plan,
            "n_blind_main": outcome.n_blind_main,
            "pilot": summary.as_ref().map(engine::PilotReport::from),
            "n_opt_grid": outcome.n_opt.as_ref().map(|e| &e.grid),
        });
        writeln!(w, "{}", serde_json::to_string_pretty(&v)?)?;
        return Ok(0);
    }
    let opt = |v: Option<u64>| v.map_or("-".to_string(), |n| n.to_string());
    writeln!(w, "N_Blind       {}", outcome.plan.n_blind)?;
    writeln!(w, "N_Blind(main) {}", outcome.n_blind_main)?;
    writeln!(w, "N_Pilot       {}", opt(outcome.plan.n_pilot))?;
    writeln!(w, "N_Opt         {}", opt(outcome.plan.n_opt))?;
    if let Some(p) = &summary {
        writeln!(
            w,
            "pilot         [{:.6}, {:.6}] from {} streams to t = {}: R = {}, A = {}, unresolved = {}",
            p.interval.low, p.interval.high, p.n, p.t_max, p.positives, p.negatives, p.unresolved
        )?;
    }
    Ok(0)
}

fn cmd_boundaries(cmd: &BoundariesCmd) -> Result<u8> {
    let schedule = SpendingSchedule::ratio(cmd.epsilon, cmd.spending_halflife)?;
    let mut table = BoundaryTable::new(cmd.alpha, schedule)?;
    let mut rows = Vec::new();
    table.extend_to_with(cmd.tmax, |r| rows.push(*r))?;
    let mut w = csv::Writer::from_writer(output(cmd.out.as_deref())?);
    w.write_record([
        "t",
        "lower",
        "upper",
        "spent_lower",
        "spent_upper",
        "envelope_lower",
        "envelope_upper",
    ])?;
    for r in rows.iter().filter(|r| r.t >= 1 && r.t <= cmd.tmax) {
        let (el, eu) = match table.envelope(r.t, 2) {
            Ok((u, l)) => (l.to_string(), u.to_string()),
            Err(_) => (String::new(), String::new()),
        };
        w.write_record([
            r.t.to_string(),
            r.lower.to_string(),
            r.upper.to_string(),
            format!("{:e}", r.spent_lower),
            format!("{:e}", r.spent_upper),
            el,
            eu,
        ])?;
    }
    w.flush()?;
    Ok(0)
}

fn cmd_tables(cli: &Cli, cmd: &TablesCmd) -> Result<u8> {
    let mut cfg = TableConfig::scaled(cmd.scale);
    if !(cmd.scale >= 1.0) {
        bail!("--scale must be at least 1, got {}", cmd.scale);
    }
    if let Some(r) = cmd.replicates {
        cfg.replicates = r;
    }
    if let Some(p) = cmd.pool_size {
        cfg.pool_size = p;
    }
    if let Some(c) = cmd.pool_cap {
        cfg.pool_cap = c;
    }
    cfg.betas = cmd.betas.clone();
    cfg.gamma = cmd.gamma;
    cfg.seed = cli.seed;
    cfg.workers = cli.workers;
    let which = match cmd.which {
        TableArg::Table1 => Which::Table1,
        TableArg::Table2 => Which::Table2,
    };
    let cells = experiments::tables(&cfg, which)?;
    experiments::write_cells(output(cmd.out.as_deref())?, &cells)?;
    Ok(0)
}

fn cmd_verify(cli: &Cli, cmd: &VerifyCmd) -> Result<u8> {
    let cfg = VerifyConfig {
        alpha: cmd.alpha,
        epsilon: cmd.epsilon,
        half_life: cmd.spending_halflife,
        t_crossing: cmd.t_crossing,
        t_minimal: cmd.t_minimal,
        lemma2_streams: cmd.lemma2_streams,
        seed: cli.seed,
    };
    let checks = oracle::verify_suite(&cfg)?;
    let mut w = io::stdout().lock();
    if cmd.json {
        writeln!(w, "{}", serde_json::to_string_pretty(&checks)?)?;
    } else {
        let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        for c in &checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            writeln!(w, "{mark}  {:width$}  {}", c.name, c.detail)?;
        }
    }
    Ok(if checks.iter().all(|c| c.passed) {
        0
    } else {
        EXIT_VERIFY
    })
}

fn cmd_perm(cli: &Cli, cmd: &PermCmd) -> Result<u8> {
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    w.write_record([
        "effect", "low", "point", "high", "effort", "truth", "truth_se",
    ])?;
    for (i, &effect) in cmd.effects.iter().enumerate() {
        let spec = SamplerSpec::Permutation {
            k: cmd.k,
            l: cmd.l,
            effect,
            sigma: 1.0,
        };
        let seed = cli.seed.wrapping_add(i as u64);
        let mut config = RunConfig::new(cmd.alpha, PrecisionRule::fixed(cmd.delta), cmd.gamma);
        config.seed = seed;
        config.workers = cli.workers;
        let out = engine::run(&config, &StreamFactory::new(spec, seed, 1)?)?;
        let r = &out.report;
        let (truth, se) = if cmd.truth_datasets > 0 {
            let p = oracle::permutation_power(
                cmd.k,
                cmd.l,
                effect,
                cmd.truth_datasets,
                cmd.alpha,
                seed,
            )?;
            let se = (p * (1.0 - p) / cmd.truth_datasets as f64).sqrt();
            (format!("{p:.6}"), format!("{se:.6}"))
        } else {
            (String::new(), String::new())
        };
        w.write_record([
            effect.to_string(),
            format!("{:.6}", r.interval.low),
            r.point_estimate
                .map_or(String::new(), |p| format!("{p:.6}")),
            format!("{:.6}", r.interval.high),
            r.effort.to_string(),
            truth,
            se,
        ])?;
        w.flush()?;
    }
    Ok(0)
}

fn cmd_ext_child(cli: &Cli, cmd: &ExtChildCmd) -> Result<u8> {
    let mut streams = HashMap::new();
    let mut opened = HashMap::new();
    let stdin = io::stdin().lock();
    let mut w = io::stdout().lock();
    for line in stdin.lines() {
        let line = line?;
        let Some((op, id)) = line.trim().split_once(' ') else {
            bail!("malformed request {line:?}");
        };
        let id: u64 = id
            .parse()
            .with_context(|| format!("malformed request {line:?}"))?;
        match op {
            "S" => {
                // every open draws a fresh dataset, reproducibly per (id, open count)
                let opens = opened.entry(id).or_insert(0u64);
                let mut rng = stream_rng(cli.seed.wrapping_add(*opens), SeedDomain::Main, id);
                *opens += 1;
                let data = simulate_dataset(cmd.k, cmd.l, cmd.effect, cmd.sigma, &mut rng);
                streams.insert(id, PermutationStream::new(data, rng));
            }
            "X" => {
                let s = streams
                    .get_mut(&id)
                    .with_context(|| format!("stream {id} was never opened"))?;
                writeln!(w, "{}", s.bit() as u8)?;
                w.flush()?;
            }
            _ => bail!("malformed request {line:?}"),
        }
    }
    Ok(0)
}
