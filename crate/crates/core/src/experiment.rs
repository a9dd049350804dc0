//! Experiment configuration (TOML) and orchestration of backtest runs and
//! their report files.
//!
//! ```toml
//! [data]
//! path = "../data/synthetic_weekly.csv"   # relative to the config file
//! benchmark = "MKT"                       # column split off as the market
//! start = "2015-01-05"                    # optional
//! end = "2017-04-17"                      # optional
//! phase = "calm"                          # optional, selects a [[phase]]
//!
//! [[phase]]
//! name = "calm"
//! start = "2015-01-05"
//! end = "2016-06-27"
//!
//! [window]
//! in_len = 50
//! out_len = 4
//! step = 4
//!
//! [model]
//! levels = [0.05, 0.03, 0.01]             # strictly decreasing
//! weights = [0.40, 0.48, 0.12]
//! lower = 0.015
//! upper = 0.7
//! cardinality = 4
//! return_target = "twice_equal_weight_mean"   # or "equal_weight_mean",
//!                                             # "doubled_total", or a number
//! gamma_chance = 0.1
//! ellipsoid_scale = 0.072
//!
//! [kernel]
//! sample_count = 42
//! alpha = 0.05                            # or "bootstrap"
//! bootstrap_resamples = 200
//! bootstrap_quantile = 0.95
//! bandwidth = "median"                    # or a number
//! support = "trailing"                    # or "perturbed"
//! perturb_scale = 0.001
//! jitter_start = 1e-10
//!
//! [solver]
//! method = "branch_and_bound"             # or "enumerate"
//! rel_gap_tol = 1e-6
//! max_nodes = 100000
//! branching = "most_fractional"           # or "max_weight"
//! conic_tol = 1e-8
//!
//! [metrics]
//! risk_free = 0.0
//! threshold = 0.0
//! tail_level = 0.05
//! omega_as_printed = false
//!
//! [run]
//! strategies = ["nominal", "rom_rkhs", "equal_weight", "benchmark_index"]
//! output_dir = "../out"                   # relative to the config file
//! seed = 42
//! threads = 0                             # 0 = all cores
//! cumulative = "additive"                 # or "compounded"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::backtest::{
    cumulative_series, run_backtest, solve_window as solve_one, Accumulation, KernelSettings,
    ModelTemplate, OosReturns, RadiusRule, SolveMethod, StrategyKind, StrategySpec,
};
use crate::error::{Error, Result};
use crate::formulation::{EllipsoidShape, ReturnTargetRule};
use crate::kernel::{Bandwidth, KernelFamily, KernelSpec, SupportPolicy};
use crate::metrics::{render_table, MetricsConfig, MetricsTable, UNDEFINED};
use crate::risk::McvarSpec;
use crate::scenarios::{align_assets, load_prices, make_windows, ScenarioMatrix, WindowPlan};
use crate::solver::{BnbConfig, Branching, ContinuousOptions, SolveStatus};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    data: RawData,
    #[serde(default)]
    phase: Vec<RawPhase>,
    #[serde(default)]
    window: RawWindow,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    kernel: RawKernel,
    #[serde(default)]
    solver: RawSolver,
    #[serde(default)]
    metrics: RawMetrics,
    #[serde(default)]
    run: RawRun,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    path: PathBuf,
    benchmark: Option<String>,
    start: Option<String>,
    end: Option<String>,
    phase: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPhase {
    name: String,
    start: String,
    end: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawWindow {
    in_len: usize,
    out_len: usize,
    step: usize,
}

impl Default for RawWindow {
    fn default() -> Self {
        Self {
            in_len: 50,
            out_len: 4,
            step: 4,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum NumberOr {
    Number(f64),
    Name(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawModel {
    levels: Vec<f64>,
    weights: Vec<f64>,
    lower: f64,
    upper: f64,
    cardinality: usize,
    return_target: NumberOr,
    gamma_chance: f64,
    ellipsoid_scale: f64,
}

impl Default for RawModel {
    fn default() -> Self {
        Self {
            levels: vec![0.05, 0.03, 0.01],
            weights: vec![0.40, 0.48, 0.12],
            lower: 0.015,
            upper: 0.7,
            cardinality: 4,
            return_target: NumberOr::Name("twice_equal_weight_mean".into()),
            gamma_chance: 0.1,
            ellipsoid_scale: 0.072,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawKernel {
    sample_count: usize,
    alpha: NumberOr,
    bootstrap_resamples: usize,
    bootstrap_quantile: f64,
    bandwidth: NumberOr,
    support: String,
    perturb_scale: f64,
    jitter_start: f64,
}

impl Default for RawKernel {
    fn default() -> Self {
        Self {
            sample_count: 42,
            alpha: NumberOr::Number(0.05),
            bootstrap_resamples: 200,
            bootstrap_quantile: 0.95,
            bandwidth: NumberOr::Name("median".into()),
            support: "trailing".into(),
            perturb_scale: 0.001,
            jitter_start: 1e-10,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawSolver {
    method: String,
    rel_gap_tol: f64,
    max_nodes: usize,
    branching: String,
    conic_tol: f64,
}

impl Default for RawSolver {
    fn default() -> Self {
        Self {
            method: "branch_and_bound".into(),
            rel_gap_tol: 1e-6,
            max_nodes: 100_000,
            branching: "most_fractional".into(),
            conic_tol: 1e-8,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawMetrics {
    risk_free: f64,
    threshold: f64,
    tail_level: f64,
    omega_as_printed: bool,
}

impl Default for RawMetrics {
    fn default() -> Self {
        let d = MetricsConfig::default();
        Self {
            risk_free: d.risk_free,
            threshold: d.threshold,
            tail_level: d.tail_level,
            omega_as_printed: d.omega_as_printed,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawRun {
    strategies: Option<Vec<String>>,
    output_dir: PathBuf,
    seed: u64,
    threads: usize,
    cumulative: String,
}

impl Default for RawRun {
    fn default() -> Self {
        Self {
            strategies: None,
            output_dir: PathBuf::from("out"),
            seed: 42,
            threads: 0,
            cumulative: "additive".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub name: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data_path: PathBuf,
    pub benchmark: Option<String>,
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
    pub phases: Vec<Phase>,
    pub in_len: usize,
    pub out_len: usize,
    pub step: usize,
    pub model: ModelTemplate,
    pub method: SolveMethod,
    pub metrics: MetricsConfig,
    pub strategies: Vec<StrategyKind>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub threads: usize,
    pub accumulation: Accumulation,
    source: String,
}

/// 1-based line of `key` inside `[section]` (or `[[section]]`).
fn line_of(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            current = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if key.is_empty() && current == section {
                return Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some(rest) = t.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

struct Ctx<'a> {
    text: &'a str,
}

impl Ctx<'_> {
    fn err(&self, field: &str, msg: impl fmt::Display) -> Error {
        let (section, key) = field.split_once('.').unwrap_or((field, ""));
        let msg = match line_of(self.text, section, key) {
            Some(line) => format!("{msg} (line {line})"),
            None => msg.to_string(),
        };
        Error::config(field, msg)
    }

    fn date(&self, field: &str, s: &str) -> Result<NaiveDate> {
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map_err(|e| self.err(field, format!("bad date {s:?}: {e}")))
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses and checks everything that does not need the data file.
    /// Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let cx = Ctx { text };

        let d = &raw.data;
        let phases = raw
            .phase
            .iter()
            .map(|p| {
                Ok(Phase {
                    name: p.name.clone(),
                    start: cx.date("phase.start", &p.start)?,
                    end: cx.date("phase.end", &p.end)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut start = d.start.as_deref().map(|s| cx.date("data.start", s)).transpose()?;
        let mut end = d.end.as_deref().map(|s| cx.date("data.end", s)).transpose()?;
        if let Some(name) = &d.phase {
            let p = phases
                .iter()
                .find(|p| &p.name == name)
                .ok_or_else(|| cx.err("data.phase", format!("no [[phase]] named {name:?}")))?;
            start = Some(p.start);
            end = Some(p.end);
        }
        if let (Some(s), Some(e)) = (start, end) {
            if s > e {
                return Err(cx.err("data.end", "end date precedes start date"));
            }
        }

        let w = &raw.window;
        if w.in_len == 0 || w.out_len == 0 || w.step == 0 {
            return Err(cx.err("window", "in_len, out_len and step must be positive"));
        }

        let m = &raw.model;
        let mcvar = McvarSpec::new(m.levels.clone(), m.weights.clone())
            .map_err(|e| cx.err("model.levels", e))?;
        if !(0.0 <= m.lower && m.lower <= m.upper && m.upper <= 1.0) {
            return Err(cx.err("model.lower", "bounds must satisfy 0 <= lower <= upper <= 1"));
        }
        if m.cardinality == 0 {
            return Err(cx.err("model.cardinality", "must be at least 1"));
        }
        let a = m.cardinality as f64;
        if a * m.lower > 1.0 || a * m.upper < 1.0 {
            return Err(cx.err(
                "model.cardinality",
                format!("{} assets within [{}, {}] cannot sum to 1", m.cardinality, m.lower, m.upper),
            ));
        }
        let return_rule = match &m.return_target {
            NumberOr::Number(x) if x.is_finite() => ReturnTargetRule::Fixed(*x),
            NumberOr::Name(s) => match s.as_str() {
                "twice_equal_weight_mean" => ReturnTargetRule::TwiceEqualWeightMean,
                "equal_weight_mean" => ReturnTargetRule::EqualWeightMean,
                "doubled_total" => ReturnTargetRule::DoubledTotal,
                other => return Err(cx.err("model.return_target", format!("unknown rule {other:?}"))),
            },
            NumberOr::Number(x) => return Err(cx.err("model.return_target", format!("{x} is not finite"))),
        };
        if !(m.gamma_chance > 0.0 && m.gamma_chance <= 1.0) {
            return Err(cx.err("model.gamma_chance", "must lie in (0, 1]"));
        }
        if !(m.ellipsoid_scale >= 0.0 && m.ellipsoid_scale.is_finite()) {
            return Err(cx.err("model.ellipsoid_scale", "must be a finite non-negative number"));
        }

        let k = &raw.kernel;
        if k.sample_count == 0 || k.sample_count > w.in_len {
            return Err(cx.err(
                "kernel.sample_count",
                format!("must lie in 1..={} (the in-sample length)", w.in_len),
            ));
        }
        let radius = match &k.alpha {
            NumberOr::Number(a) if *a >= 0.0 && a.is_finite() => RadiusRule::Fixed(*a),
            NumberOr::Name(s) if s == "bootstrap" => {
                if k.bootstrap_resamples == 0 || !(0.0..=1.0).contains(&k.bootstrap_quantile) {
                    return Err(cx.err("kernel.bootstrap_quantile", "needs resamples > 0 and a quantile in [0, 1]"));
                }
                RadiusRule::Bootstrap {
                    resamples: k.bootstrap_resamples,
                    quantile: k.bootstrap_quantile,
                }
            }
            _ => return Err(cx.err("kernel.alpha", "must be a non-negative number or \"bootstrap\"")),
        };
        let bandwidth = match &k.bandwidth {
            NumberOr::Number(s) if *s > 0.0 && s.is_finite() => Bandwidth::Fixed(*s),
            NumberOr::Name(s) if s == "median" => Bandwidth::MedianHeuristic,
            _ => return Err(cx.err("kernel.bandwidth", "must be a positive number or \"median\"")),
        };
        let support = match k.support.as_str() {
            "trailing" => SupportPolicy::Trailing,
            "perturbed" if k.perturb_scale > 0.0 => SupportPolicy::Perturbed {
                scale: k.perturb_scale,
                seed: raw.run.seed,
            },
            "perturbed" => return Err(cx.err("kernel.perturb_scale", "must be positive")),
            other => return Err(cx.err("kernel.support", format!("unknown policy {other:?}"))),
        };
        if !(k.jitter_start > 0.0 && k.jitter_start <= crate::kernel::MAX_JITTER) {
            return Err(cx.err("kernel.jitter_start", "must lie in (0, 1e-6]"));
        }

        let s = &raw.solver;
        if !(s.rel_gap_tol > 0.0) || !(s.conic_tol > 0.0) || s.max_nodes == 0 {
            return Err(cx.err("solver", "tolerances and max_nodes must be positive"));
        }
        let branching = match s.branching.as_str() {
            "most_fractional" => Branching::MostFractional,
            "max_weight" => Branching::MaxWeight,
            other => return Err(cx.err("solver.branching", format!("unknown rule {other:?}"))),
        };
        let continuous = ContinuousOptions {
            tol: s.conic_tol,
            ..ContinuousOptions::default()
        };
        let method = match s.method.as_str() {
            "branch_and_bound" => SolveMethod::BranchAndBound(BnbConfig {
                rel_gap_tol: s.rel_gap_tol,
                max_nodes: s.max_nodes,
                branching,
                continuous,
                trace: false,
            }),
            "enumerate" => SolveMethod::Enumerate(continuous),
            other => return Err(cx.err("solver.method", format!("unknown method {other:?}"))),
        };

        let mt = &raw.metrics;
        if !(mt.tail_level > 0.0 && mt.tail_level < 1.0) {
            return Err(cx.err("metrics.tail_level", "must lie in (0, 1)"));
        }

        let r = &raw.run;
        let names: Vec<String> = match &r.strategies {
            Some(list) => list.clone(),
            None => StrategyKind::ALL
                .iter()
                .filter(|k| d.benchmark.is_some() || **k != StrategyKind::BenchmarkIndex)
                .map(|k| k.name().to_string())
                .collect(),
        };
        if names.is_empty() {
            return Err(cx.err("run.strategies", "at least one strategy is required"));
        }
        let mut strategies = Vec::new();
        for name in &names {
            let kind = StrategyKind::parse(name)
                .ok_or_else(|| cx.err("run.strategies", format!("unknown strategy {name:?}")))?;
            if strategies.contains(&kind) {
                return Err(cx.err("run.strategies", format!("{name} listed twice")));
            }
            strategies.push(kind);
        }
        if strategies.contains(&StrategyKind::BenchmarkIndex) && d.benchmark.is_none() {
            return Err(cx.err("data.benchmark", "benchmark_index needs a benchmark column"));
        }
        let accumulation = match r.cumulative.as_str() {
            "additive" => Accumulation::Additive,
            "compounded" => Accumulation::Compounded,
            other => return Err(cx.err("run.cumulative", format!("unknown mode {other:?}"))),
        };

        Ok(Self {
            data_path: base.join(&d.path),
            benchmark: d.benchmark.clone(),
            start,
            end,
            phases,
            in_len: w.in_len,
            out_len: w.out_len,
            step: w.step,
            model: ModelTemplate {
                mcvar,
                lower: m.lower,
                upper: m.upper,
                cardinality: m.cardinality,
                return_rule,
                gamma_chance: m.gamma_chance,
                ellipsoid: EllipsoidShape::Scaled(m.ellipsoid_scale),
                kernel: KernelSettings {
                    spec: KernelSpec {
                        family: KernelFamily::GaussianRbf,
                        bandwidth,
                    },
                    radius,
                    sample_count: k.sample_count,
                    support,
                    jitter_start: k.jitter_start,
                    seed: r.seed,
                },
            },
            method,
            metrics: MetricsConfig {
                risk_free: mt.risk_free,
                threshold: mt.threshold,
                tail_level: mt.tail_level,
                omega_as_printed: mt.omega_as_printed,
            },
            strategies,
            output_dir: base.join(&r.output_dir),
            seed: r.seed,
            threads: r.threads,
            accumulation,
            source: text.to_string(),
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    fn err(&self, field: &str, msg: impl fmt::Display) -> Error {
        Ctx { text: &self.source }.err(field, msg)
    }

    /// Loads the data and checks the data-dependent invariants.
    pub fn load_dataset(&self) -> Result<Dataset> {
        if !self.data_path.is_file() {
            return Err(self.err(
                "data.path",
                format!("{} does not exist", self.data_path.display()),
            ));
        }
        let bytes = std::fs::read(&self.data_path).map_err(|e| Error::io(&self.data_path, e))?;
        let series: Vec<_> = load_prices(&self.data_path)?
            .into_iter()
            .map(|s| s.restrict(self.start, self.end))
            .collect();
        let all = align_assets(&series)?;
        let (scen, benchmark) = match &self.benchmark {
            Some(id) => {
                let (s, b) = all.split_off_asset(id).map_err(|_| {
                    self.err("data.benchmark", format!("no column {id:?} in the data"))
                })?;
                (s, Some(b))
            }
            None => (all, None),
        };
        let n = scen.n_assets();
        if self.model.cardinality > n {
            return Err(self.err(
                "model.cardinality",
                format!("{} exceeds the {n} assets in the data", self.model.cardinality),
            ));
        }
        let plan = make_windows(scen.periods(), self.in_len, self.out_len, self.step)
            .map_err(|e| self.err("window", e))?;
        Ok(Dataset {
            scen,
            benchmark,
            plan,
            data_sha256: sha256_hex(&bytes),
        })
    }

    pub fn strategy_spec(&self, kind: StrategyKind, data: &Dataset) -> StrategySpec {
        match kind {
            StrategyKind::Nominal | StrategyKind::RomRkhs => {
                StrategySpec::optimizing(kind, self.model.clone(), self.method.clone())
            }
            StrategyKind::EqualWeight => StrategySpec::equal_weight(),
            StrategyKind::BenchmarkIndex => {
                StrategySpec::benchmark(data.benchmark.clone().unwrap_or_default())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub scen: ScenarioMatrix,
    pub benchmark: Option<Vec<f64>>,
    pub plan: WindowPlan,
    pub data_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub strategies: Option<Vec<StrategyKind>>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub results: Vec<OosReturns>,
    pub tables: Vec<(String, MetricsTable)>,
    pub files: Vec<PathBuf>,
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidSpec(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs every strategy over the rolling windows and writes the reports.
pub fn run_experiment(cfg: &ExperimentConfig, overrides: &RunOverrides) -> Result<RunReport> {
    let data = cfg.load_dataset()?;
    let strategies = overrides
        .strategies
        .clone()
        .unwrap_or_else(|| cfg.strategies.clone());
    if strategies.contains(&StrategyKind::BenchmarkIndex) && data.benchmark.is_none() {
        return Err(cfg.err("data.benchmark", "benchmark_index needs a benchmark column"));
    }
    let threads = overrides.threads.unwrap_or(cfg.threads);
    let results = with_pool(threads, || {
        strategies
            .iter()
            .map(|&k| {
                log::info!("running {k} over {} windows", data.plan.len());
                run_backtest(&data.scen, &data.plan, &cfg.strategy_spec(k, &data))
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let market: Option<Vec<f64>> = data.benchmark.as_ref().map(|b| {
        data.plan
            .windows
            .iter()
            .flat_map(|w| b[w.out_range()].iter().copied())
            .collect()
    });
    let tables = results
        .iter()
        .map(|r| {
            MetricsTable::compute(&r.concatenated, market.as_deref(), &cfg.metrics)
                .map(|t| (r.strategy.clone(), t))
        })
        .collect::<Result<Vec<_>>>()?;

    let out = overrides
        .output_dir
        .clone()
        .unwrap_or_else(|| cfg.output_dir.clone());
    let files = write_reports(&out, cfg, &data, &results, &tables)?;
    Ok(RunReport {
        output_dir: out,
        results,
        tables,
        files,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string())
}

fn csv_text(rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn write_reports(
    out: &Path,
    cfg: &ExperimentConfig,
    data: &Dataset,
    results: &[OosReturns],
    tables: &[(String, MetricsTable)],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let path = out.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        files.push(path);
        Ok(())
    };

    let mut rows = vec![std::iter::once("metric".to_string())
        .chain(tables.iter().map(|(n, _)| n.clone()))
        .collect::<Vec<_>>()];
    if let Some((_, first)) = tables.first() {
        for (r, (label, _)) in first.rows().iter().enumerate() {
            let mut row = vec![label.clone()];
            row.extend(tables.iter().map(|(_, t)| opt(t.rows()[r].1)));
            rows.push(row);
        }
        let mut beta = vec!["BETA".to_string()];
        beta.extend(tables.iter().map(|(_, t)| opt(t.beta)));
        rows.push(beta);
    }
    put("metrics.csv", csv_text(rows)?)?;
    put("metrics_table.txt", render_table(tables))?;

    let len = results.first().map_or(0, |r| r.concatenated.len());
    let dates: Vec<String> = match results.first().and_then(|r| r.dates.clone()) {
        Some(d) => d.iter().map(|d| d.to_string()).collect(),
        None => (0..len).map(|t| t.to_string()).collect(),
    };
    let header = |first: &str| {
        let mut h = vec!["t".to_string(), first.to_string()];
        h.extend(results.iter().map(|r| r.strategy.clone()));
        h
    };
    let series_rows = |series: Vec<Vec<f64>>| {
        let mut rows = vec![header("date")];
        for t in 0..len {
            let mut row = vec![(t + 1).to_string(), dates[t].clone()];
            row.extend(series.iter().map(|s| s[t].to_string()));
            rows.push(row);
        }
        rows
    };
    put(
        "returns.csv",
        csv_text(series_rows(results.iter().map(|r| r.concatenated.clone()).collect()))?,
    )?;
    put(
        "cumulative.csv",
        csv_text(series_rows(
            results
                .iter()
                .map(|r| cumulative_series(&r.concatenated, cfg.accumulation))
                .collect(),
        ))?,
    )?;

    let scen_dates = data.scen.dates();
    for r in results.iter().filter(|r| !r.window_portfolios.is_empty()) {
        let mut rows = vec![vec!["window".to_string(), "out_start".to_string()]];
        rows[0].extend(data.scen.asset_ids().iter().cloned());
        rows[0].push("objective".into());
        for (k, (w, p)) in data.plan.windows.iter().zip(&r.window_portfolios).enumerate() {
            let start = scen_dates.map_or_else(|| w.out_start.to_string(), |d| d[w.out_start].to_string());
            let mut row = vec![k.to_string(), start];
            row.extend(p.weights.iter().map(|x| x.to_string()));
            row.push(if p.objective_value.is_finite() {
                p.objective_value.to_string()
            } else {
                UNDEFINED.to_string()
            });
            rows.push(row);
        }
        put(&format!("weights_{}.csv", r.strategy), csv_text(rows)?)?;
    }

    let manifest = format!(
        "software = mcvar {VERSION}\nconfig_sha256 = {}\ndata_sha256 = {}\nassets = {}\nwindows = {}\nstrategies = {}\n",
        sha256_hex(cfg.source.as_bytes()),
        data.data_sha256,
        data.scen.n_assets(),
        data.plan.len(),
        results.iter().map(|r| r.strategy.as_str()).collect::<Vec<_>>().join(","),
    );
    put("manifest.txt", manifest)?;
    Ok(files)
}

/// Diagnostics for one solved window.
#[derive(Debug, Clone)]
pub struct WindowReport {
    pub index: usize,
    pub strategy: StrategyKind,
    pub in_range: (usize, usize),
    pub out_range: (usize, usize),
    pub asset_ids: Vec<String>,
    pub weights: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub nodes: usize,
    pub gap: f64,
    pub residuals: (f64, f64, f64),
    pub return_target: f64,
    /// `(alpha, s_bar, jitter)` for the robust model.
    pub kernel: Option<(f64, f64, f64)>,
}

impl fmt::Display for WindowReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "window {} ({})", self.index, self.strategy)?;
        writeln!(f, "in_sample [{}, {})", self.in_range.0, self.in_range.1)?;
        writeln!(f, "out_of_sample [{}, {})", self.out_range.0, self.out_range.1)?;
        writeln!(f, "status {:?}", self.status)?;
        writeln!(f, "objective {}", self.objective)?;
        writeln!(f, "return_target {}", self.return_target)?;
        writeln!(f, "nodes {}", self.nodes)?;
        writeln!(f, "gap {:e}", self.gap)?;
        let (p, d, g) = self.residuals;
        writeln!(f, "residuals primal {p:e} dual {d:e} gap {g:e}")?;
        if let Some((alpha, s_bar, jitter)) = self.kernel {
            writeln!(f, "alpha {alpha}")?;
            writeln!(f, "s_bar {s_bar}")?;
            writeln!(f, "jitter {jitter:e}")?;
        }
        writeln!(f, "weights")?;
        for (id, w) in self.asset_ids.iter().zip(&self.weights) {
            writeln!(f, "  {id} {w}")?;
        }
        Ok(())
    }
}

/// Solves a single window for an optimizing strategy.
pub fn solve_window(cfg: &ExperimentConfig, kind: StrategyKind, index: usize) -> Result<WindowReport> {
    if !kind.is_optimizing() {
        return Err(Error::InvalidSpec(format!("{kind} does not solve a model")));
    }
    let data = cfg.load_dataset()?;
    let window = data.plan.windows.get(index).ok_or(Error::OutOfRange {
        index,
        len: data.plan.len(),
    })?;
    let strat = cfg.strategy_spec(kind, &data);
    let ws = match solve_one(&data.scen, window, &strat)? {
        Ok(ws) => ws,
        Err(status) => {
            return Err(Error::WindowFailure {
                index,
                status,
                partial: Box::new(OosReturns {
                    strategy: kind.name().to_string(),
                    ..OosReturns::default()
                }),
            })
        }
    };
    let s = &ws.solution;
    Ok(WindowReport {
        index,
        strategy: kind,
        in_range: (window.in_start, window.in_end),
        out_range: (window.out_start, window.out_end),
        asset_ids: data.scen.asset_ids().to_vec(),
        weights: ws.portfolio.weights.clone(),
        objective: s.objective,
        status: s.status,
        nodes: s.nodes,
        gap: s.rel_gap(),
        residuals: (s.residuals.primal_feas, s.residuals.dual_feas, s.residuals.gap),
        return_target: ws.config.return_target,
        kernel: ws
            .config
            .ambiguity
            .as_ref()
            .map(|a| (a.alpha, a.factors.s_bar(), a.factors.jitter_used())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[data]\npath = \"prices.csv\"\n";

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::parse(MINIMAL, Path::new("/tmp")).unwrap();
        assert_eq!((cfg.in_len, cfg.out_len, cfg.step), (50, 4, 4));
        assert_eq!(cfg.model.kernel.sample_count, 42);
        assert_eq!(cfg.model.mcvar.levels(), &[0.05, 0.03, 0.01]);
        assert_eq!(cfg.model.ellipsoid, EllipsoidShape::Scaled(0.072));
        assert_eq!(cfg.data_path, Path::new("/tmp/prices.csv"));
    }

    #[test]
    fn increasing_levels_rejected_with_line() {
        let text = format!("{MINIMAL}\n[model]\nlevels = [0.01, 0.03, 0.05]\nweights = [0.12, 0.48, 0.40]\n");
        let err = ExperimentConfig::parse(&text, Path::new(".")).unwrap_err();
        match err {
            Error::Config { field, message } => {
                assert_eq!(field, "model.levels");
                assert!(message.contains("line 5"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_keys_are_parse_errors() {
        let text = format!("{MINIMAL}\n[window]\nin_length = 3\n");
        let err = ExperimentConfig::parse(&text, Path::new(".")).unwrap_err();
        assert!(matches!(&err, Error::Parse(m) if m.contains("line")), "{err}");
    }

    #[test]
    fn benchmark_strategy_requires_column() {
        let text = "[data]\npath = \"p.csv\"\n[run]\nstrategies = [\"benchmark_index\"]\n";
        assert!(matches!(
            ExperimentConfig::parse(text, Path::new(".")),
            Err(Error::Config { field, .. }) if field == "data.benchmark"
        ));
    }

    #[test]
    fn phase_selects_range() {
        let text = "[data]\npath = \"p.csv\"\nphase = \"calm\"\n\n[[phase]]\nname = \"calm\"\nstart = \"2015-01-05\"\nend = \"2015-06-01\"\n";
        let cfg = ExperimentConfig::parse(text, Path::new(".")).unwrap();
        assert_eq!(cfg.start, NaiveDate::from_ymd_opt(2015, 1, 5));
        assert_eq!(cfg.end, NaiveDate::from_ymd_opt(2015, 6, 1));
    }

    #[test]
    fn return_target_forms() {
        let num = format!("{MINIMAL}[model]\nreturn_target = 0.002\n");
        let cfg = ExperimentConfig::parse(&num, Path::new(".")).unwrap();
        assert_eq!(cfg.model.return_rule, ReturnTargetRule::Fixed(0.002));
        let bad = format!("{MINIMAL}[model]\nreturn_target = \"lots\"\n");
        assert!(ExperimentConfig::parse(&bad, Path::new(".")).is_err());
    }

    #[test]
    fn line_lookup() {
        let text = "[a]\nx = 1\n[b]\nx = 2\ny=3\n";
        assert_eq!(line_of(text, "b", "x"), Some(4));
        assert_eq!(line_of(text, "b", "y"), Some(5));
        assert_eq!(line_of(text, "b", ""), Some(3));
        assert_eq!(line_of(text, "c", "x"), None);
    }
}
