//! Effort tables for the Beta(1, x) p-value models at configurable scale.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{
    advance_all, build_pool, ensure_extended, run, BoundaryCache, RunConfig, SharedTable, Status,
    StreamState,
};
use crate::error::{Error, Result};
use crate::interval::{Interval, UnionCalculator};
use crate::pilot::{emulated_effort, geometric_grid, n_required};
use crate::precision::PrecisionRule;
use crate::samplers::{
    beta_parameter_for_power, stream_rng, SamplerSpec, SeedDomain, StreamFactory, StreamSource,
};

/// Powers of the four p-value distributions.
pub const BETAS: [f64; 4] = [0.05, 0.7, 0.9, 0.99];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Table1,
    Table2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableConfig {
    /// Multiplies every precision target; 1 is the published scale.
    pub scale: f64,
    /// Runs per cell.
    pub replicates: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub betas: Vec<f64>,
    pub seed: u64,
    pub workers: usize,
    /// Pre-simulated streams per distribution for the emulated rows.
    pub pool_size: u64,
    /// Largest censoring step of the pool. Pool streams are first simulated to
    /// 10⁵ steps and extended fourfold while emulated runs reach the cap.
    pub pool_cap: u64,
    /// Grid points in [N_Blind, 4 N_Blind] searched for the optimal N.
    pub grid_points: usize,
}

impl TableConfig {
    /// Scale `f` multiplies Δ by `f` and divides the replicate count and the
    /// pool size by `f` and 20.
    pub fn scaled(f: f64) -> Self {
        let f = f.max(1.0);
        Self {
            scale: f,
            replicates: ((100.0 / f).round() as usize).max(10),
            alpha: 0.05,
            gamma: 0.01,
            betas: BETAS.to_vec(),
            seed: 0,
            workers: 1,
            pool_size: if f > 1.0 { 50_000 } else { 1_000_000 },
            pool_cap: if f > 1.0 { 25_600_000 } else { 102_400_000 },
            grid_points: 25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 1.0) || self.replicates == 0 || self.pool_size == 0 || self.pool_cap == 0
        {
            return Err(Error::Config(
                "tables need scale >= 1 and positive replicates, pool size and pool cap".into(),
            ));
        }
        if self.betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("table powers must lie in (0,1)".into()));
        }
        Ok(())
    }

    pub fn delta(&self) -> f64 {
        0.02 * self.scale
    }

    /// The four midpoint rules Δ0–Δ3 at this scale.
    pub fn rules(&self) -> [(&'static str, PrecisionRule); 4] {
        let d = self.delta();
        [
            ("delta0", PrecisionRule::fixed(d)),
            ("delta1", PrecisionRule::sqrt_profile(d)),
            (
                "delta2",
                PrecisionRule::band((0.1 * self.scale).min(1.0), d),
            ),
            ("delta3", PrecisionRule::left_tail(d)),
        ]
    }
}

/// Mean effort of one table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub table: String,
    pub row: String,
    pub beta: f64,
    pub runs: usize,
    pub mean_effort: f64,
    pub std_error: f64,
    /// Mean number of main-run streams.
    pub mean_n: f64,
    /// Runs whose interval contains β.
    pub covered: usize,
    /// Emulated runs that reached the pool cap; their effort is a lower bound.
    pub censored: usize,
}

#[derive(Debug, Clone, Default)]
struct Moments {
    k: usize,
    sum: f64,
    sum_sq: f64,
    n_sum: f64,
    covered: usize,
    censored: usize,
}

impl Moments {
    fn push(&mut self, effort: f64, n: f64, covered: bool) {
        self.k += 1;
        self.sum += effort;
        self.sum_sq += effort * effort;
        self.n_sum += n;
        self.covered += covered as usize;
    }

    fn mean(&self) -> f64 {
        self.sum / self.k as f64
    }

    fn std_error(&self) -> f64 {
        let k = self.k as f64;
        if self.k < 2 {
            return 0.0;
        }
        let var = ((self.sum_sq - k * self.mean() * self.mean()) / (k - 1.0)).max(0.0);
        (var / k).sqrt()
    }

    fn cell(&self, table: &str, row: &str, beta: f64) -> Cell {
        Cell {
            table: table.into(),
            row: row.into(),
            beta,
            runs: self.k,
            mean_effort: self.mean(),
            std_error: self.std_error(),
            mean_n: self.n_sum / self.k as f64,
            covered: self.covered,
            censored: self.censored,
        }
    }
}

fn cell_seed(base: u64, row: usize, col: usize, rep: usize) -> u64 {
    base.wrapping_add(((row * 16 + col) as u64) << 32)
        .wrapping_add(rep as u64)
}

fn beta_spec(alpha: f64, beta: f64) -> SamplerSpec {
    SamplerSpec::Beta {
        x: beta_parameter_for_power(alpha, beta),
    }
}

/// Mean effort over `replicates` actual runs of `config`.
pub fn run_cell(
    config: &RunConfig,
    spec: &SamplerSpec,
    beta: f64,
    replicates: usize,
    seed_of: impl Fn(usize) -> u64,
    table: &str,
    row: &str,
) -> Result<Cell> {
    let mut m = Moments::default();
    for rep in 0..replicates {
        let mut c = config.clone();
        c.seed = seed_of(rep);
        let factory = StreamFactory::new(spec.clone(), c.seed, 1)?;
        let out = run(&c, &factory)?;
        let r = &out.report;
        m.push(
            r.effort as f64,
            r.n_streams as f64,
            r.interval.contains(beta),
        );
    }
    Ok(m.cell(table, row, beta))
}

/// Resolution times and outcomes of independently simulated Algorithm 1
/// streams. Streams unresolved at the current cap are kept alive so that the
/// cap can be raised on demand.
pub struct StreamPool {
    /// (τ, positive) sorted by τ.
    pub resolved: Vec<(u64, bool)>,
    live: Vec<(StreamState, StreamSource)>,
    pub cap: u64,
    table: SharedTable,
    workers: usize,
    skip: bool,
}

impl StreamPool {
    pub fn simulate(
        config: &RunConfig,
        spec: &SamplerSpec,
        size: u64,
        cap: u64,
        seed: u64,
    ) -> Result<Self> {
        let table = BoundaryCache::global().table(config.alpha, config.schedule()?, None)?;
        let factory = StreamFactory::new(spec.clone(), seed, 1)?;
        let mut pool = Self {
            resolved: Vec::new(),
            live: Vec::new(),
            cap: 0,
            table,
            workers: config.workers,
            skip: config.block_skipping,
        };
        // bounded batches keep memory flat for large pools
        let batch = 1u64 << 16;
        for start in (0..size).step_by(batch as usize) {
            let ids = start..(start + batch).min(size);
            let streams: Vec<(StreamState, StreamSource)> = ids
                .map(|i| (StreamState::new(i), factory.new_stream(SeedDomain::Main, i)))
                .collect();
            let kept = pool.advance(streams, cap)?;
            pool.live.extend(kept);
        }
        pool.cap = cap;
        pool.resolved.sort_unstable();
        Ok(pool)
    }

    /// Advances `streams` to `cap`, records the resolved ones and returns the rest.
    fn advance(
        &mut self,
        streams: Vec<(StreamState, StreamSource)>,
        cap: u64,
    ) -> Result<Vec<(StreamState, StreamSource)>> {
        ensure_extended(&self.table, cap + 1)?;
        let (mut states, mut sources): (Vec<_>, Vec<_>) = streams.into_iter().unzip();
        let threads = build_pool(self.workers)?;
        {
            let guard = self.table.read().unwrap_or_else(|e| e.into_inner());
            advance_all(
                &mut states,
                &mut sources,
                &guard,
                cap,
                self.skip,
                threads.as_ref(),
            )
            .map_err(|(_, e)| Error::Sampler(e))?;
        }
        let mut kept = Vec::new();
        for (st, src) in states.into_iter().zip(sources) {
            match st.status {
                Status::Unresolved => kept.push((st, src)),
                s => self.resolved.push((st.steps, s == Status::Positive)),
            }
        }
        Ok(kept)
    }

    /// Raises the censoring step to `cap`.
    pub fn extend(&mut self, cap: u64) -> Result<()> {
        if cap <= self.cap {
            return Ok(());
        }
        let live = std::mem::take(&mut self.live);
        self.live = self.advance(live, cap)?;
        self.cap = cap;
        self.resolved.sort_unstable();
        Ok(())
    }

    pub fn censored(&self) -> u64 {
        self.live.len() as u64
    }

    fn size(&self) -> u64 {
        self.resolved.len() as u64 + self.censored()
    }

    /// Effort of Algorithm 1 with `n` streams resampled from the pool, and
    /// whether a censored stream was needed.
    pub fn emulate<R: Rng>(
        &self,
        n: u64,
        calc: &mut UnionCalculator,
        rule: &PrecisionRule,
        rng: &mut R,
    ) -> (f64, bool) {
        let size = self.size();
        let mut picks: Vec<u64> = (0..n).map(|_| rng.random_range(0..size)).collect();
        picks.sort_unstable();
        let mut events: Vec<(f64, u64, u64)> = Vec::with_capacity(n as usize);
        let mut censored = 0u64;
        for &i in &picks {
            let Some(&(t, pos)) = self.resolved.get(i as usize) else {
                censored += 1;
                continue;
            };
            let t = t as f64;
            match events.last_mut() {
                Some(e) if e.0 == t => {
                    e.1 += pos as u64;
                    e.2 += !pos as u64;
                }
                _ => events.push((t, pos as u64, !pos as u64)),
            }
        }
        if censored > 0 {
            events.push((self.cap as f64, 0, 0));
        }
        let (effort, stop) = emulated_effort(&events, n, calc, rule, Interval::FULL);
        (effort, censored > 0 && stop == events.len() - 1)
    }
}

/// Emulated rows "Optimal N" and "Min. N" for one distribution.
const INITIAL_POOL_CAP: u64 = 100_000;

pub fn emulated_rows(cfg: &TableConfig, beta: f64, col: usize) -> Result<(Cell, Cell)> {
    let rule = PrecisionRule::fixed(cfg.delta());
    let mut rc = RunConfig::basic(cfg.alpha, rule.clone(), cfg.gamma);
    rc.workers = cfg.workers;
    let spec = beta_spec(cfg.alpha, beta);
    let mut pool = StreamPool::simulate(
        &rc,
        &spec,
        cfg.pool_size,
        INITIAL_POOL_CAP.min(cfg.pool_cap),
        cell_seed(cfg.seed, 15, col, 0),
    )?;
    let n_blind = n_required(&rule, cfg.gamma, rc.epsilon(), Interval::FULL)?;
    let grid = geometric_grid(n_blind, 4 * n_blind, cfg.grid_points);
    loop {
        let mut best: Option<Moments> = None;
        let mut min_n = None;
        let mut capped = 0usize;
        for (j, &n) in grid.iter().enumerate() {
            let mut calc = UnionCalculator::new(n, cfg.gamma, rc.epsilon())?;
            let mut m = Moments::default();
            for rep in 0..cfg.replicates {
                let mut rng = stream_rng(
                    cell_seed(cfg.seed, 14, col, j),
                    SeedDomain::Planner,
                    rep as u64,
                );
                let (e, hit) = pool.emulate(n, &mut calc, &rule, &mut rng);
                capped += hit as usize;
                m.censored += hit as usize;
                m.push(e, n as f64, false);
            }
            if n == n_blind {
                min_n = Some(m.clone());
            }
            if best.as_ref().is_none_or(|b| m.mean() < b.mean()) {
                best = Some(m);
            }
        }
        if capped > 0 && pool.cap < cfg.pool_cap {
            log::info!(
                "beta {beta}: {capped} emulated runs reached t = {}; extending {} pool streams",
                pool.cap,
                pool.censored()
            );
            pool.extend((pool.cap * 4).min(cfg.pool_cap))?;
            continue;
        }
        if capped > 0 {
            log::warn!(
                "beta {beta}: {capped} emulated runs reached t = {}; their effort is a lower bound",
                pool.cap
            );
        }
        let best = best.ok_or_else(|| Error::Config("empty grid".into()))?;
        let min_n = min_n.ok_or_else(|| Error::Config("grid misses N_Blind".into()))?;
        return Ok((
            best.cell("table1", "optimal_n", beta),
            min_n.cell("table1", "min_n", beta),
        ));
    }
}

/// Rows of Table 1: optimal N, min. N, no test, with test.
pub fn table1(cfg: &TableConfig) -> Result<Vec<Cell>> {
    cfg.validate()?;
    let rule = PrecisionRule::fixed(cfg.delta());
    let mut cells = Vec::new();
    for (col, &beta) in cfg.betas.iter().enumerate() {
        let (opt, min) = emulated_rows(cfg, beta, col)?;
        cells.push(opt);
        cells.push(min);
        let spec = beta_spec(cfg.alpha, beta);
        let mut with = RunConfig::new(cfg.alpha, rule.clone(), cfg.gamma);
        with.workers = cfg.workers;
        let mut without = with.clone();
        without.joint = None;
        for (row, (name, c)) in [("no_test", &without), ("with_test", &with)]
            .into_iter()
            .enumerate()
        {
            let seed = |rep| cell_seed(cfg.seed, row + 2, col, rep);
            cells.push(run_cell(
                c,
                &spec,
                beta,
                cfg.replicates,
                seed,
                "table1",
                name,
            )?);
        }
    }
    Ok(cells)
}

/// Rows of Table 2: the default algorithm under rules Δ0–Δ3.
pub fn table2(cfg: &TableConfig) -> Result<Vec<Cell>> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for (row, (name, rule)) in cfg.rules().into_iter().enumerate() {
        for (col, &beta) in cfg.betas.iter().enumerate() {
            let mut c = RunConfig::new(cfg.alpha, rule.clone(), cfg.gamma);
            c.workers = cfg.workers;
            let spec = beta_spec(cfg.alpha, beta);
            let seed = |rep| cell_seed(cfg.seed, row + 8, col, rep);
            cells.push(run_cell(
                &c,
                &spec,
                beta,
                cfg.replicates,
                seed,
                "table2",
                name,
            )?);
        }
    }
    Ok(cells)
}

pub fn tables(cfg: &TableConfig, which: Which) -> Result<Vec<Cell>> {
    match which {
        Which::Table1 => table1(cfg),
        Which::Table2 => table2(cfg),
    }
}

/// CSV with efforts in millions.
pub fn write_cells<W: Write>(w: W, cells: &[Cell]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "table",
        "row",
        "beta",
        "runs",
        "mean_effort_millions",
        "std_error_millions",
        "mean_n",
        "covered",
        "censored",
    ])?;
    for c in cells {
        out.write_record([
            c.table.clone(),
            c.row.clone(),
            c.beta.to_string(),
            c.runs.to_string(),
            format!("{:.6}", c.mean_effort / 1e6),
            format!("{:.6}", c.std_error / 1e6),
            format!("{:.1}", c.mean_n),
            c.covered.to_string(),
            c.censored.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::StreamCount;

    #[test]
    fn scaled_config() {
        let c = TableConfig::scaled(2.5);
        assert!((c.delta() - 0.05).abs() < 1e-15);
        assert_eq!(c.replicates, 40);
        assert_eq!(c.pool_size, 50_000);
        assert_eq!(TableConfig::scaled(1.0).replicates, 100);
    }

    #[test]
    fn pool_emulation_matches_fixed_n_runs() {
        // a fixed p = 0.02 sampler resolves every stream quickly
        let rule = PrecisionRule::fixed(0.2);
        let rc = RunConfig::basic(0.05, rule.clone(), 0.1);
        let spec = SamplerSpec::Discrete {
            support: vec![0.0, 1.0],
            weights: vec![0.5, 0.5],
        };
        let pool = StreamPool::simulate(&rc, &spec, 2000, 1000, 1).unwrap();
        assert_eq!(pool.censored(), 0);
        let n = n_required(&rule, 0.1, rc.epsilon(), Interval::FULL).unwrap();
        let mut calc = UnionCalculator::new(n, 0.1, rc.epsilon()).unwrap();
        let mut rng = stream_rng(3, SeedDomain::Planner, 0);
        let (e, hit) = pool.emulate(n, &mut calc, &rule, &mut rng);
        assert!(!hit);
        let mut c = rc.clone();
        c.streams = StreamCount::Fixed(n);
        let out = run(&c, &StreamFactory::new(spec, 5, 1).unwrap()).unwrap();
        // p ∈ {0, 1}: every stream resolves at the same deterministic boundary times
        let ratio = e / out.report.effort as f64;
        assert!((0.8..1.25).contains(&ratio), "{e} vs {}", out.report.effort);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let m = Moments {
            k: 2,
            sum: 3e6,
            sum_sq: 5e12,
            n_sum: 20.0,
            covered: 2,
            censored: 0,
        };
        let mut buf = Vec::new();
        write_cells(&mut buf, &[m.cell("table1", "min_n", 0.7)]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("table,row,beta,runs,mean_effort_millions"));
        assert!(s.contains("table1,min_n,0.7,2,1.500000,0.500000,10.0,2,0"));
    }
}
