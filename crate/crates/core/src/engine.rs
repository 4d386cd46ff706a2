//! Algorithm 1: run N streams against the shared boundaries until the
//! reported interval is admissible.
//!
//! Streams are advanced independently to a deterministic sequence of
//! horizons (doubling, capped at joint-test checkpoints and the effort
//! ceiling). Within a window every stream that resolved is an event; events
//! are replayed in time order to find the first step at which the interval
//! I(R_t, A_t, |U_t|) ∩ I_pilot is admissible. Since each stream's bits come
//! from its own counter-based generator, the outcome does not depend on how
//! streams are distributed across workers.

use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::BoundaryTable;
use crate::error::{Error, Result, SamplerError};
use crate::interval::{intersect_with_pilot, Interval, UnionCalculator};
use crate::joint_test::{Counts, JointConfig, JointTestRecord, JointTestState};
use crate::pilot::{self, PilotConfig, PilotSummary, PlannerConfig};
use crate::precision::PrecisionRule;
use crate::samplers::{SeedDomain, StreamFactory, StreamSource};
use crate::spending::{SpendingSchedule, DEFAULT_HALF_LIFE};

pub const REPORT_SCHEMA: &str = "mcpower.final-report.v1";
pub const CHECKPOINT_SCHEMA: &str = "mcpower.checkpoint.v1";
pub const DEFAULT_MAX_EFFORT: u64 = 10_000_000_000;
pub const DEFAULT_INITIAL_HORIZON: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Unresolved,
    /// Hit the lower boundary: p_i ≤ α.
    Positive,
    /// Hit the upper boundary: p_i > α.
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub id: u64,
    pub partial_sum: i64,
    /// Bits drawn so far; equals τ once resolved.
    pub steps: u64,
    pub status: Status,
}

impl StreamState {
    pub fn new(id: u64) -> Self {
        Self {
            id,
            partial_sum: 0,
            steps: 0,
            status: Status::Unresolved,
        }
    }

    pub fn tau(&self) -> Option<u64> {
        (self.status != Status::Unresolved).then_some(self.steps)
    }

    fn classify(&mut self, table: &BoundaryTable) {
        if self.partial_sum >= table.upper(self.steps) {
            self.status = Status::Negative;
        } else if self.partial_sum <= table.lower(self.steps) {
            self.status = Status::Positive;
        }
    }
}

/// Advances one stream to `horizon` or to resolution.
pub(crate) fn advance_stream(
    st: &mut StreamState,
    src: &mut StreamSource,
    table: &BoundaryTable,
    horizon: u64,
    skip: bool,
) -> Result<(), SamplerError> {
    let blocks = skip && src.supports_blocks();
    while st.status == Status::Unresolved && st.steps < horizon {
        if blocks {
            let k = table.safe_block(st.steps, st.partial_sum, horizon);
            if k >= 2 {
                st.partial_sum += src.draw(k)? as i64;
                st.steps += k;
                continue;
            }
        }
        st.partial_sum += src.draw(1)? as i64;
        st.steps += 1;
        st.classify(table);
    }
    Ok(())
}

/// Advances every unresolved stream; reports the failure of the lowest id.
pub(crate) fn advance_all(
    streams: &mut [StreamState],
    sources: &mut [StreamSource],
    table: &BoundaryTable,
    horizon: u64,
    skip: bool,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(), (u64, SamplerError)> {
    let step = |(st, src): (&mut StreamState, &mut StreamSource)| {
        advance_stream(st, src, table, horizon, skip).map_err(|e| (st.id, e))
    };
    let results: Vec<Result<(), (u64, SamplerError)>> = match pool {
        Some(pool) => pool.install(|| {
            streams
                .par_iter_mut()
                .zip(sources.par_iter_mut())
                .with_min_len(64)
                .map(step)
                .collect()
        }),
        None => streams
            .iter_mut()
            .zip(sources.iter_mut())
            .map(step)
            .collect(),
    };
    results
        .into_iter()
        .collect::<Result<Vec<()>, _>>()
        .map(|_| ())
}

pub(crate) fn build_pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

pub type SharedTable = Arc<RwLock<BoundaryTable>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct TableKey {
    alpha: u64,
    epsilon: u64,
    half_life: u64,
    snapshot_stride: Option<u64>,
}

/// Boundary tables shared by all runs with the same (α, schedule, snapshot stride).
#[derive(Debug, Default)]
pub struct BoundaryCache {
    tables: Mutex<Vec<(TableKey, SharedTable)>>,
}

impl BoundaryCache {
    pub fn global() -> &'static BoundaryCache {
        static CACHE: OnceLock<BoundaryCache> = OnceLock::new();
        CACHE.get_or_init(BoundaryCache::default)
    }

    pub fn table(
        &self,
        alpha: f64,
        schedule: SpendingSchedule,
        snapshot_stride: Option<u64>,
    ) -> Result<SharedTable> {
        let key = TableKey {
            alpha: alpha.to_bits(),
            epsilon: schedule.epsilon_total.to_bits(),
            half_life: schedule.half_life,
            snapshot_stride,
        };
        let mut tables = self.tables.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((_, t)) = tables.iter().find(|(k, _)| *k == key) {
            return Ok(Arc::clone(t));
        }
        let mut table = BoundaryTable::new(alpha, schedule)?;
        if let Some(s) = snapshot_stride {
            table = table.with_snapshot_stride(s);
        }
        let shared = Arc::new(RwLock::new(table));
        tables.push((key, Arc::clone(&shared)));
        Ok(shared)
    }
}

pub(crate) fn ensure_extended(table: &SharedTable, t: u64) -> Result<()> {
    if table
        .read()
        .unwrap_or_else(|e| e.into_inner())
        .extended_to()
        >= t
    {
        return Ok(());
    }
    table
        .write()
        .unwrap_or_else(|e| e.into_inner())
        .extend_to(t)
}

/// How the number of main-run streams is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamCount {
    Blind,
    Pilot,
    Optimal,
    Fixed(u64),
}

impl StreamCount {
    pub fn label(&self) -> &'static str {
        match self {
            StreamCount::Blind => "blind",
            StreamCount::Pilot => "pilot",
            StreamCount::Optimal => "optimal",
            StreamCount::Fixed(_) => "fixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub alpha: f64,
    pub rule: PrecisionRule,
    pub gamma: f64,
    /// Defaults to the rule's reference length / 200.
    pub epsilon: Option<f64>,
    pub half_life: u64,
    pub pilot: Option<PilotConfig>,
    pub joint: Option<JointConfig>,
    pub planner: PlannerConfig,
    pub streams: StreamCount,
    pub seed: u64,
    pub workers: usize,
    pub max_effort: u64,
    pub block_skipping: bool,
    pub initial_horizon: u64,
    /// Keep one log row per resolution event.
    pub record_log: bool,
}

impl RunConfig {
    /// The default algorithm: pilot, optimal N and the joint test, with
    /// γ_P = γ_J = γ/10.
    pub fn new(alpha: f64, rule: PrecisionRule, gamma: f64) -> Self {
        Self {
            alpha,
            rule,
            gamma,
            epsilon: None,
            half_life: DEFAULT_HALF_LIFE,
            pilot: Some(PilotConfig::new(0.1 * gamma)),
            joint: Some(JointConfig::new(0.1 * gamma)),
            planner: PlannerConfig::default(),
            streams: StreamCount::Optimal,
            seed: 0,
            workers: 1,
            max_effort: DEFAULT_MAX_EFFORT,
            block_skipping: true,
            initial_horizon: DEFAULT_INITIAL_HORIZON,
            record_log: false,
        }
    }

    /// Algorithm 1 alone: no pilot, no joint test, N = N_Blind.
    pub fn basic(alpha: f64, rule: PrecisionRule, gamma: f64) -> Self {
        Self {
            pilot: None,
            joint: None,
            streams: StreamCount::Blind,
            ..Self::new(alpha, rule, gamma)
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(self.rule.reference_delta() / 200.0)
    }

    pub fn gamma_pilot(&self) -> f64 {
        self.pilot.as_ref().map_or(0.0, |p| p.gamma_pilot)
    }

    pub fn gamma_joint(&self) -> f64 {
        self.joint.as_ref().map_or(0.0, |j| j.gamma_joint)
    }

    /// Level left for the main-run interval.
    pub fn gamma_main(&self) -> f64 {
        self.gamma - self.gamma_pilot() - self.gamma_joint()
    }

    pub fn schedule(&self) -> Result<SpendingSchedule> {
        SpendingSchedule::ratio(self.epsilon(), self.half_life)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0,1), got {}", self.alpha));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0,1), got {}", self.gamma));
        }
        self.rule.validate()?;
        let eps = self.epsilon();
        if !(eps > 0.0 && eps < 1.0) {
            return bad(format!("epsilon must lie in (0,1), got {eps}"));
        }
        if let Some(p) = &self.pilot {
            p.validate()?;
        }
        if let Some(j) = &self.joint {
            j.validate()?;
        }
        if !(self.gamma_main() > 0.0) {
            return bad(format!(
                "gamma_pilot + gamma_joint = {} leaves no level for the main run (gamma = {})",
                self.gamma_pilot() + self.gamma_joint(),
                self.gamma
            ));
        }
        match self.streams {
            StreamCount::Pilot | StreamCount::Optimal if self.pilot.is_none() => {
                return bad(format!(
                    "stream count '{}' needs a pilot sample",
                    self.streams.label()
                ));
            }
            StreamCount::Fixed(0) => return bad("at least one stream is required".into()),
            _ => {}
        }
        if self.initial_horizon == 0 {
            return bad("initial horizon must be positive".into());
        }
        self.planner.validate()
    }
}

/// One row of the resolution log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: u64,
    pub positives: u64,
    pub negatives: u64,
    pub unresolved: u64,
    pub low: f64,
    pub high: f64,
    pub effort: u64,
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The precision rule admitted the interval.
    Admitted,
    /// The joint test certified enough outcomes for an admissible interval.
    JointTest,
    /// The effort ceiling was reached first.
    EffortCeiling,
    /// Every stream resolved without reaching the precision target.
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub n_blind: u64,
    pub n_pilot: Option<u64>,
    pub n_opt: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotReport {
    pub n: u64,
    pub t_max: u64,
    pub gamma_pilot: f64,
    pub positives: u64,
    pub negatives: u64,
    pub unresolved: u64,
    pub interval: Interval,
    pub beta_hat: f64,
    pub survival_at_tmax: f64,
    pub effort: u64,
}

impl From<&PilotSummary> for PilotReport {
    fn from(p: &PilotSummary) -> Self {
        Self {
            n: p.n,
            t_max: p.t_max,
            gamma_pilot: p.gamma_pilot,
            positives: p.positives,
            negatives: p.negatives,
            unresolved: p.unresolved,
            interval: p.interval,
            beta_hat: p.beta_hat,
            survival_at_tmax: p.survival_at_tmax,
            effort: p.effort,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointAdjustment {
    pub r: u64,
    pub a: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub schema: String,
    pub seed: u64,
    pub sampler: String,
    pub alpha: f64,
    pub rule: String,
    pub gamma: f64,
    pub gamma_main: f64,
    pub gamma_pilot: f64,
    pub gamma_joint: f64,
    pub epsilon: f64,
    pub spending_half_life: u64,
    pub stream_count: String,
    pub n_streams: u64,
    pub plan: Plan,
    pub interval: Interval,
    pub positives: u64,
    pub negatives: u64,
    pub unresolved: u64,
    pub joint_adjustment: Option<JointAdjustment>,
    /// R/(R+A) over resolved streams; carries no coverage guarantee.
    pub point_estimate: Option<f64>,
    pub steps: u64,
    pub effort: u64,
    pub effort_main: u64,
    pub effort_pilot: u64,
    pub stop_reason: StopReason,
    pub truncated: bool,
    pub pilot: Option<PilotReport>,
    pub pilot_disjoint: bool,
    pub joint_tests: Vec<JointTestRecord>,
}

impl FinalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Resolution time and outcome of one main-run stream at the stopping step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamOutcome {
    pub id: u64,
    pub tau: Option<u64>,
    pub status: Status,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: FinalReport,
    pub log: Vec<LogRow>,
    pub streams: Vec<StreamOutcome>,
    pub pilot: Option<PilotSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pilot,
    Main,
}

/// State from which an aborted run can be resumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub schema: String,
    pub phase: Phase,
    pub seed: u64,
    pub sampler: String,
    pub t: u64,
    pub n_streams: u64,
    pub plan: Option<Plan>,
    pub pilot: Option<PilotSummary>,
    pub streams: Vec<StreamState>,
    /// Generator positions as decimal strings; empty for external sources.
    pub word_pos: Vec<Option<String>>,
    pub joint_tests: Vec<JointTestRecord>,
}

impl RunCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cp: RunCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if cp.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported checkpoint schema {:?}",
                cp.schema
            )));
        }
        Ok(cp)
    }
}

/// Pilot, planning and main run with the process-wide boundary cache.
pub fn run(config: &RunConfig, factory: &StreamFactory) -> Result<RunOutcome> {
    run_with_cache(config, factory, BoundaryCache::global())
}

pub fn run_with_cache(
    config: &RunConfig,
    factory: &StreamFactory,
    cache: &BoundaryCache,
) -> Result<RunOutcome> {
    config.validate()?;
    let ctx = Context::new(config, factory, cache)?;
    let pilot = match &config.pilot {
        Some(pc) => Some(
            pilot::run_pilot_on(pc, config, factory, &ctx.table, ctx.pool.as_ref()).map_err(
                |source| Error::Aborted {
                    source,
                    checkpoint: Box::new(RunCheckpoint {
                        schema: CHECKPOINT_SCHEMA.into(),
                        phase: Phase::Pilot,
                        seed: factory.seed(),
                        sampler: factory.spec().to_string(),
                        t: 0,
                        n_streams: 0,
                        plan: None,
                        pilot: None,
                        streams: Vec::new(),
                        word_pos: Vec::new(),
                        joint_tests: Vec::new(),
                    }),
                },
            )?,
        ),
        None => None,
    };
    let plan = pilot::plan(config, pilot.as_ref())?;
    let n = match config.streams {
        StreamCount::Blind => plan.n_blind_main,
        StreamCount::Pilot => plan.plan.n_pilot.expect("pilot configured"),
        StreamCount::Optimal => plan.plan.n_opt.expect("pilot configured"),
        StreamCount::Fixed(n) => n,
    };
    let mut main = MainRun::fresh(&ctx, pilot, plan.plan, n)?;
    main.execute()
}

/// Continues a run from a checkpoint written by an aborted run.
pub fn resume(
    config: &RunConfig,
    factory: &StreamFactory,
    checkpoint: RunCheckpoint,
) -> Result<RunOutcome> {
    config.validate()?;
    if checkpoint.seed != factory.seed() || checkpoint.sampler != factory.spec().to_string() {
        return Err(Error::Config(
            "checkpoint was written for a different seed or sampler".into(),
        ));
    }
    if checkpoint.phase == Phase::Pilot {
        return run(config, factory);
    }
    let ctx = Context::new(config, factory, BoundaryCache::global())?;
    let mut main = MainRun::resumed(&ctx, checkpoint)?;
    main.execute()
}

struct Context<'a> {
    config: &'a RunConfig,
    factory: &'a StreamFactory,
    table: SharedTable,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Context<'a> {
    fn new(
        config: &'a RunConfig,
        factory: &'a StreamFactory,
        cache: &BoundaryCache,
    ) -> Result<Self> {
        let stride = config.joint.as_ref().map(|j| j.stride);
        Ok(Self {
            config,
            factory,
            table: cache.table(config.alpha, config.schedule()?, stride)?,
            pool: build_pool(config.workers)?,
        })
    }
}

struct MainRun<'c, 'a> {
    ctx: &'c Context<'a>,
    pilot: Option<PilotSummary>,
    plan: Plan,
    n: u64,
    streams: Vec<StreamState>,
    sources: Vec<StreamSource>,
    t: u64,
    positives: u64,
    negatives: u64,
    tau_sum: u64,
    calc: UnionCalculator,
    joint: Option<JointTestState>,
    log: Vec<LogRow>,
    pilot_disjoint: bool,
}

#[derive(Debug, Clone, Copy)]
struct Group {
    tau: u64,
    positives: u64,
    negatives: u64,
}

impl<'c, 'a> MainRun<'c, 'a> {
    fn fresh(
        ctx: &'c Context<'a>,
        pilot: Option<PilotSummary>,
        plan: Plan,
        n: u64,
    ) -> Result<Self> {
        let streams = (0..n).map(StreamState::new).collect();
        let sources = (0..n)
            .map(|i| ctx.factory.new_stream(SeedDomain::Main, i))
            .collect();
        Self::assemble(ctx, pilot, plan, n, streams, sources, 0, Vec::new())
    }

    fn resumed(ctx: &'c Context<'a>, cp: RunCheckpoint) -> Result<Self> {
        let mut sources: Vec<StreamSource> = (0..cp.n_streams)
            .map(|i| ctx.factory.new_stream(SeedDomain::Main, i))
            .collect();
        for (src, pos) in sources.iter_mut().zip(&cp.word_pos) {
            if let Some(pos) = pos {
                let pos: u128 = pos.parse().map_err(|_| {
                    Error::Config(format!("bad generator position {pos:?} in checkpoint"))
                })?;
                src.set_word_pos(pos);
            }
        }
        let plan = cp
            .plan
            .ok_or_else(|| Error::Config("checkpoint has no plan".into()))?;
        Self::assemble(
            ctx,
            cp.pilot,
            plan,
            cp.n_streams,
            cp.streams,
            sources,
            cp.t,
            cp.joint_tests,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        ctx: &'c Context<'a>,
        pilot: Option<PilotSummary>,
        plan: Plan,
        n: u64,
        streams: Vec<StreamState>,
        sources: Vec<StreamSource>,
        t: u64,
        history: Vec<JointTestRecord>,
    ) -> Result<Self> {
        let config = ctx.config;
        let mut joint = config.joint.map(JointTestState::new).transpose()?;
        if let Some(j) = joint.as_mut() {
            j.history = history;
        }
        let (mut positives, mut negatives, mut tau_sum) = (0, 0, 0);
        for s in &streams {
            match s.status {
                Status::Positive => positives += 1,
                Status::Negative => negatives += 1,
                Status::Unresolved => continue,
            }
            tau_sum += s.steps;
        }
        Ok(Self {
            ctx,
            pilot,
            plan,
            n,
            streams,
            sources,
            t,
            positives,
            negatives,
            tau_sum,
            calc: UnionCalculator::new(n, config.gamma_main(), config.epsilon())?,
            joint,
            log: Vec::new(),
            pilot_disjoint: false,
        })
    }

    fn unresolved(&self) -> u64 {
        self.n - self.positives - self.negatives
    }

    fn pilot_interval(&self) -> Option<Interval> {
        self.pilot.as_ref().map(|p| p.interval)
    }

    fn effort_pilot(&self) -> u64 {
        self.pilot.as_ref().map_or(0, |p| p.effort)
    }

    /// Main-run effort at step t given the current counts.
    fn effort_main_at(&self, t: u64) -> u64 {
        self.tau_sum + self.unresolved() * t
    }

    fn interval_for(&mut self, r: u64, a: u64) -> (Interval, bool) {
        let iv = self.calc.union(r, a, self.n - r - a);
        match self.pilot_interval() {
            Some(p) if iv.high < p.low || p.high < iv.low => {
                let x = intersect_with_pilot(iv, p);
                (x.interval, true)
            }
            Some(p) => (intersect_with_pilot(iv, p).interval, false),
            None => (iv, false),
        }
    }

    fn current_interval(&mut self) -> Interval {
        let (iv, empty) = self.interval_for(self.positives, self.negatives);
        self.pilot_disjoint = empty;
        iv
    }

    fn push_log(&mut self, iv: Interval) {
        if self.ctx.config.record_log {
            self.log.push(LogRow {
                t: self.t,
                positives: self.positives,
                negatives: self.negatives,
                unresolved: self.unresolved(),
                low: iv.low,
                high: iv.high,
                effort: self.effort_pilot() + self.effort_main_at(self.t),
            });
        }
    }

    fn checkpoint(
        &self,
        streams: Vec<StreamState>,
        word_pos: Vec<Option<String>>,
    ) -> RunCheckpoint {
        RunCheckpoint {
            schema: CHECKPOINT_SCHEMA.into(),
            phase: Phase::Main,
            seed: self.ctx.factory.seed(),
            sampler: self.ctx.factory.spec().to_string(),
            t: self.t,
            n_streams: self.n,
            plan: Some(self.plan),
            pilot: self.pilot.clone(),
            streams,
            word_pos,
            joint_tests: self
                .joint
                .as_ref()
                .map(|j| j.history.clone())
                .unwrap_or_default(),
        }
    }

    fn next_horizon(&self, t_cap: u64) -> u64 {
        let mut h = self.ctx.config.initial_horizon.max(2 * self.t);
        if let Some(j) = &self.joint {
            h = h.min(j.next_checkpoint_after(self.t));
        }
        h.min(t_cap)
    }

    fn apply(&mut self, g: &Group) {
        self.positives += g.positives;
        self.negatives += g.negatives;
        self.tau_sum += g.tau * (g.positives + g.negatives);
        self.t = g.tau;
    }

    fn execute(&mut self) -> Result<RunOutcome> {
        let ctx = self.ctx;
        let rule = ctx.config.rule.clone();
        let max_effort = self.ctx.config.max_effort;
        let mut iv = self.current_interval();
        if self.t == 0 {
            self.push_log(iv);
        }
        if rule.admits(&iv) {
            return Ok(self.finish(iv, StopReason::Admitted, None));
        }
        loop {
            let u = self.unresolved();
            if u == 0 {
                return Ok(self.finish(iv, StopReason::Exhausted, None));
            }
            let used = self.effort_pilot() + self.effort_main_at(self.t);
            let t_cap = self.t + max_effort.saturating_sub(used) / u;
            if t_cap == self.t {
                return Ok(self.finish(iv, StopReason::EffortCeiling, None));
            }
            let h = self.next_horizon(t_cap);
            ensure_extended(&ctx.table, h + 1)?;
            let before: Vec<StreamState> = self.streams.clone();
            let positions: Vec<Option<String>> = self
                .sources
                .iter()
                .map(|s| s.word_pos().map(|p| p.to_string()))
                .collect();
            let table = ctx.table.read().unwrap_or_else(|e| e.into_inner());
            let advanced = {
                let (streams, sources): (Vec<_>, Vec<_>) = self
                    .streams
                    .iter_mut()
                    .zip(self.sources.iter_mut())
                    .filter(|(s, _)| s.status == Status::Unresolved)
                    .unzip();
                advance_refs(
                    streams,
                    sources,
                    &table,
                    h,
                    ctx.config.block_skipping,
                    ctx.pool.as_ref(),
                )
            };
            if let Err((_, source)) = advanced {
                drop(table);
                let cp = self.checkpoint(before, positions);
                return Err(Error::Aborted {
                    source,
                    checkpoint: Box::new(cp),
                });
            }
            let groups = self.collect_groups(h);
            if let Some((k, new_iv)) = self.first_admissible(&groups, &rule) {
                for g in &groups[..=k] {
                    self.apply(g);
                }
                iv = self.current_interval();
                debug_assert_eq!(iv, new_iv);
                drop(table);
                return Ok(self.finish(iv, StopReason::Admitted, None));
            }
            for g in &groups {
                self.apply(g);
            }
            self.t = h;
            iv = self.current_interval();
            let unresolved = self.unresolved();
            if let Some(j) = self.joint.as_mut() {
                if j.is_checkpoint(h) && unresolved > 0 {
                    let mut sums: Vec<i64> = self
                        .streams
                        .iter()
                        .filter(|s| s.status == Status::Unresolved)
                        .map(|s| s.partial_sum)
                        .collect();
                    sums.sort_unstable();
                    let dist = table.conditional_distribution(h)?;
                    let counts = Counts {
                        positives: self.positives,
                        negatives: self.negatives,
                        unresolved,
                    };
                    let pilot_iv = self.pilot.as_ref().map(|p| p.interval);
                    if let Some((r, a)) =
                        j.run_checkpoint(h, &sums, &dist, &mut self.calc, counts, pilot_iv, &rule)
                    {
                        let (adj, _) = self.interval_for(self.positives + r, self.negatives + a);
                        drop(table);
                        return Ok(self.finish(
                            adj,
                            StopReason::JointTest,
                            Some(JointAdjustment { r, a }),
                        ));
                    }
                }
            }
            drop(table);
        }
    }

    /// Resolution events in (t, h], grouped by time.
    fn collect_groups(&self, h: u64) -> Vec<Group> {
        let mut events: Vec<(u64, Status)> = self
            .streams
            .iter()
            .filter(|s| s.status != Status::Unresolved && s.steps > self.t && s.steps <= h)
            .map(|s| (s.steps, s.status))
            .collect();
        events.sort_unstable_by_key(|e| e.0);
        let mut groups: Vec<Group> = Vec::new();
        for (tau, status) in events {
            if groups.last().is_none_or(|g| g.tau != tau) {
                groups.push(Group {
                    tau,
                    positives: 0,
                    negatives: 0,
                });
            }
            let g = groups.last_mut().unwrap();
            match status {
                Status::Positive => g.positives += 1,
                _ => g.negatives += 1,
            }
        }
        groups
    }

    /// Index of the first event group after which the interval is admissible.
    fn first_admissible(
        &mut self,
        groups: &[Group],
        rule: &PrecisionRule,
    ) -> Option<(usize, Interval)> {
        if groups.is_empty() {
            return None;
        }
        let mut prefix = Vec::with_capacity(groups.len());
        let (mut r, mut a) = (self.positives, self.negatives);
        for g in groups {
            r += g.positives;
            a += g.negatives;
            prefix.push((r, a));
        }
        if self.ctx.config.record_log {
            let saved = (self.positives, self.negatives, self.tau_sum, self.t);
            for (k, g) in groups.iter().enumerate() {
                self.apply(g);
                let (iv, _) = self.interval_for(prefix[k].0, prefix[k].1);
                self.push_log(iv);
                if rule.admits(&iv) {
                    self.positives = saved.0;
                    self.negatives = saved.1;
                    self.tau_sum = saved.2;
                    self.t = saved.3;
                    return Some((k, iv));
                }
            }
            self.positives = saved.0;
            self.negatives = saved.1;
            self.tau_sum = saved.2;
            self.t = saved.3;
            return None;
        }
        let last = groups.len() - 1;
        let (iv_last, _) = self.interval_for(prefix[last].0, prefix[last].1);
        if !rule.admits(&iv_last) {
            return None;
        }
        // intervals are nested along the events and admissibility is closed under shrinking
        let (mut lo, mut hi) = (None::<usize>, last);
        let mut hi_iv = iv_last;
        loop {
            let start = lo.map_or(0, |l| l + 1);
            if start >= hi {
                break;
            }
            let mid = start + (hi - start) / 2;
            let (iv, _) = self.interval_for(prefix[mid].0, prefix[mid].1);
            if rule.admits(&iv) {
                hi = mid;
                hi_iv = iv;
            } else {
                lo = Some(mid);
            }
        }
        Some((hi, hi_iv))
    }

    fn finish(
        &mut self,
        interval: Interval,
        reason: StopReason,
        adj: Option<JointAdjustment>,
    ) -> RunOutcome {
        let config = self.ctx.config;
        let t = self.t;
        let effort_main = self.effort_main_at(t);
        let effort_pilot = self.effort_pilot();
        let resolved = self.positives + self.negatives;
        let streams = self
            .streams
            .iter()
            .map(|s| match s.tau() {
                Some(tau) if tau <= t => StreamOutcome {
                    id: s.id,
                    tau: Some(tau),
                    status: s.status,
                },
                _ => StreamOutcome {
                    id: s.id,
                    tau: None,
                    status: Status::Unresolved,
                },
            })
            .collect();
        let report = FinalReport {
            schema: REPORT_SCHEMA.into(),
            seed: self.ctx.factory.seed(),
            sampler: self.ctx.factory.spec().to_string(),
            alpha: config.alpha,
            rule: config.rule.to_string(),
            gamma: config.gamma,
            gamma_main: config.gamma_main(),
            gamma_pilot: config.gamma_pilot(),
            gamma_joint: config.gamma_joint(),
            epsilon: config.epsilon(),
            spending_half_life: config.half_life,
            stream_count: config.streams.label().into(),
            n_streams: self.n,
            plan: self.plan,
            interval,
            positives: self.positives,
            negatives: self.negatives,
            unresolved: self.unresolved(),
            joint_adjustment: adj,
            point_estimate: (resolved > 0).then(|| self.positives as f64 / resolved as f64),
            steps: t,
            effort: effort_main + effort_pilot,
            effort_main,
            effort_pilot,
            stop_reason: reason,
            truncated: matches!(reason, StopReason::EffortCeiling | StopReason::Exhausted),
            pilot: self.pilot.as_ref().map(PilotReport::from),
            pilot_disjoint: self.pilot_disjoint,
            joint_tests: self
                .joint
                .as_ref()
                .map(|j| j.history.clone())
                .unwrap_or_default(),
        };
        RunOutcome {
            report,
            log: std::mem::take(&mut self.log),
            streams,
            pilot: self.pilot.clone(),
        }
    }
}

fn advance_refs(
    streams: Vec<&mut StreamState>,
    sources: Vec<&mut StreamSource>,
    table: &BoundaryTable,
    horizon: u64,
    skip: bool,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(), (u64, SamplerError)> {
    let step = |(st, src): (&mut StreamState, &mut StreamSource)| {
        advance_stream(st, src, table, horizon, skip).map_err(|e| (st.id, e))
    };
    let results: Vec<Result<(), (u64, SamplerError)>> = match pool {
        Some(pool) => pool.install(|| {
            streams
                .into_par_iter()
                .zip(sources.into_par_iter())
                .with_min_len(64)
                .map(step)
                .collect()
        }),
        None => streams.into_iter().zip(sources).map(step).collect(),
    };
    results
        .into_iter()
        .collect::<Result<Vec<()>, _>>()
        .map(|_| ())
}

/// Literal Algorithm 1 state: all streams move one step per call.
#[derive(Debug, Clone)]
pub struct RunState {
    pub t: u64,
    pub streams: Vec<StreamState>,
    pub positives: u64,
    pub negatives: u64,
    pub effort: u64,
}

impl RunState {
    pub fn new(n: u64) -> Self {
        Self {
            t: 0,
            streams: (0..n).map(StreamState::new).collect(),
            positives: 0,
            negatives: 0,
            effort: 0,
        }
    }

    pub fn unresolved(&self) -> u64 {
        self.streams.len() as u64 - self.positives - self.negatives
    }

    /// Every unresolved stream draws one bit; `table` must reach t + 1.
    pub fn step_all(
        &mut self,
        table: &BoundaryTable,
        sources: &mut [StreamSource],
    ) -> Result<(), SamplerError> {
        self.effort += self.unresolved();
        self.t += 1;
        for (st, src) in self.streams.iter_mut().zip(sources.iter_mut()) {
            if st.status != Status::Unresolved {
                continue;
            }
            st.partial_sum += src.draw(1)? as i64;
            st.steps += 1;
            st.classify(table);
            match st.status {
                Status::Positive => self.positives += 1,
                Status::Negative => self.negatives += 1,
                Status::Unresolved => {}
            }
        }
        Ok(())
    }
}

/// Naïve estimate (1/N)·Σ 1[(Σ_j X_j)/M ≤ α] and its binomial standard error.
pub fn naive_estimate(n: u64, m: u64, alpha: f64, factory: &StreamFactory) -> Result<(f64, f64)> {
    if n == 0 || m == 0 {
        return Err(Error::Config("naive estimate needs N, M ≥ 1".into()));
    }
    let mut hits = 0u64;
    for i in 0..n {
        let mut src = factory.new_stream(SeedDomain::Naive, i);
        let ones = src.draw(m)?;
        if ones as f64 / m as f64 <= alpha {
            hits += 1;
        }
    }
    let est = hits as f64 / n as f64;
    Ok((est, (est * (1.0 - est) / n as f64).sqrt()))
}
