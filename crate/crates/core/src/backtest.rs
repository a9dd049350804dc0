//! Rolling-window backtests: solve on each in-sample slice, hold the weights
//! over the following out-of-sample periods, and concatenate the returns.

use chrono::NaiveDate;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::formulation::{
    build_nom, build_rom_rkhs, extract_portfolio, AmbiguityConfig, EllipsoidShape,
    MixedConicProgram, ModelConfig, Portfolio, ReturnTargetRule,
};
use crate::kernel::{bootstrap_radius, build_gram_factors, ExpansionSet, KernelSpec, SupportPolicy};
use crate::risk::McvarSpec;
use crate::scenarios::{ScenarioMatrix, Window, WindowPlan};
use crate::solver::{branch_and_bound, enumerate_exact, BnbConfig, ContinuousOptions, Solution, SolveStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    Nominal,
    RomRkhs,
    EqualWeight,
    BenchmarkIndex,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Nominal,
        StrategyKind::RomRkhs,
        StrategyKind::EqualWeight,
        StrategyKind::BenchmarkIndex,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Nominal => "nominal",
            StrategyKind::RomRkhs => "rom_rkhs",
            StrategyKind::EqualWeight => "equal_weight",
            StrategyKind::BenchmarkIndex => "benchmark_index",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_optimizing(&self) -> bool {
        matches!(self, StrategyKind::Nominal | StrategyKind::RomRkhs)
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// MMD radius: fixed, or calibrated per window by bootstrap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RadiusRule {
    Fixed(f64),
    Bootstrap { resamples: usize, quantile: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSettings {
    pub spec: KernelSpec,
    pub radius: RadiusRule,
    /// `T0`: leading in-sample scenarios treated as the empirical sample.
    pub sample_count: usize,
    pub support: SupportPolicy,
    pub jitter_start: f64,
    /// Seed for the bootstrap radius.
    pub seed: u64,
}

/// Window-independent model parameters; [`ModelTemplate::instantiate`]
/// fills in the return target and ambiguity set from an in-sample slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTemplate {
    pub mcvar: McvarSpec,
    pub lower: f64,
    pub upper: f64,
    pub cardinality: usize,
    pub return_rule: ReturnTargetRule,
    pub gamma_chance: f64,
    pub ellipsoid: EllipsoidShape,
    pub kernel: KernelSettings,
}

impl ModelTemplate {
    pub fn instantiate(&self, in_sample: &ScenarioMatrix, robust: bool) -> Result<ModelConfig> {
        let n = in_sample.n_assets();
        let mut cfg = ModelConfig {
            mcvar: self.mcvar.clone(),
            lower: vec![self.lower; n],
            upper: vec![self.upper; n],
            cardinality: self.cardinality,
            return_target: self.return_rule.target(in_sample),
            gamma_chance: self.gamma_chance,
            ellipsoid: EllipsoidShape::Scaled(0.0),
            ambiguity: None,
        };
        if robust {
            let k = &self.kernel;
            cfg.ellipsoid = self.ellipsoid.clone();
            let expansion = ExpansionSet::build(in_sample, k.sample_count, k.support)?;
            let factors = build_gram_factors(&expansion, &k.spec, k.jitter_start)?;
            let alpha = match k.radius {
                RadiusRule::Fixed(a) => a,
                RadiusRule::Bootstrap {
                    resamples,
                    quantile,
                } => bootstrap_radius(&factors, resamples, quantile, k.seed)?,
            };
            cfg.ambiguity = Some(AmbiguityConfig {
                alpha,
                factors,
                expansion,
            });
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolveMethod {
    BranchAndBound(BnbConfig),
    Enumerate(ContinuousOptions),
}

impl Default for SolveMethod {
    fn default() -> Self {
        SolveMethod::BranchAndBound(BnbConfig::default())
    }
}

impl SolveMethod {
    pub fn solve(&self, program: &MixedConicProgram, cardinality: usize) -> Result<Solution> {
        match self {
            SolveMethod::BranchAndBound(cfg) => branch_and_bound(program, cfg),
            SolveMethod::Enumerate(opts) => enumerate_exact(program, cardinality, opts),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub model: Option<ModelTemplate>,
    /// Full-length benchmark returns aligned with the scenario periods.
    pub benchmark: Option<Vec<f64>>,
    pub method: SolveMethod,
}

impl StrategySpec {
    pub fn optimizing(kind: StrategyKind, model: ModelTemplate, method: SolveMethod) -> Self {
        Self {
            kind,
            model: Some(model),
            benchmark: None,
            method,
        }
    }

    pub fn equal_weight() -> Self {
        Self {
            kind: StrategyKind::EqualWeight,
            model: None,
            benchmark: None,
            method: SolveMethod::default(),
        }
    }

    pub fn benchmark(series: Vec<f64>) -> Self {
        Self {
            kind: StrategyKind::BenchmarkIndex,
            model: None,
            benchmark: Some(series),
            method: SolveMethod::default(),
        }
    }

    fn check(&self, scen: &ScenarioMatrix) -> Result<()> {
        match self.kind {
            k if k.is_optimizing() && self.model.is_none() => Err(Error::InvalidSpec(format!(
                "strategy {k} needs a model configuration"
            ))),
            StrategyKind::BenchmarkIndex => match &self.benchmark {
                None => Err(Error::InvalidSpec("benchmark strategy needs a series".into())),
                Some(b) if b.len() != scen.periods() => Err(Error::DimMismatch {
                    expected: scen.periods(),
                    got: b.len(),
                }),
                Some(_) => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

/// Result of solving one in-sample window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSolve {
    pub portfolio: Portfolio,
    pub solution: Solution,
    pub config: ModelConfig,
}

/// Builds and solves the strategy's model on the in-sample slice of
/// `window`. Returns `Ok(Err(status))` when the solver does not reach
/// optimality.
pub fn solve_window(
    scen: &ScenarioMatrix,
    window: &Window,
    strat: &StrategySpec,
) -> Result<std::result::Result<WindowSolve, SolveStatus>> {
    let template = strat
        .model
        .as_ref()
        .ok_or_else(|| Error::InvalidSpec(format!("strategy {} has no model", strat.kind)))?;
    let in_sample = scen.slice_periods(window.in_range())?;
    let robust = strat.kind == StrategyKind::RomRkhs;
    let config = template.instantiate(&in_sample, robust)?;
    let program = if robust {
        build_rom_rkhs(&in_sample, &config)?
    } else {
        build_nom(&in_sample, &config)?
    };
    let solution = strat.method.solve(&program, config.cardinality)?;
    if solution.status != SolveStatus::Optimal {
        return Ok(Err(solution.status));
    }
    let portfolio = extract_portfolio(&solution, &program, &config)?;
    Ok(Ok(WindowSolve {
        portfolio,
        solution,
        config,
    }))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OosReturns {
    pub strategy: String,
    pub per_window: Vec<Vec<f64>>,
    pub concatenated: Vec<f64>,
    /// One per window for weight-based strategies, empty for the benchmark.
    pub window_portfolios: Vec<Portfolio>,
    pub dates: Option<Vec<NaiveDate>>,
}

impl OosReturns {
    fn push(&mut self, returns: Vec<f64>, portfolio: Option<Portfolio>, dates: Option<&[NaiveDate]>) {
        self.concatenated.extend_from_slice(&returns);
        self.per_window.push(returns);
        if let Some(p) = portfolio {
            self.window_portfolios.push(p);
        }
        if let (Some(all), Some(d)) = (self.dates.as_mut(), dates) {
            all.extend_from_slice(d);
        }
    }
}

type WindowResult = Result<std::result::Result<(Vec<f64>, Option<Portfolio>), SolveStatus>>;

fn run_window(scen: &ScenarioMatrix, window: &Window, strat: &StrategySpec) -> WindowResult {
    let out = window.out_range();
    let hold = |w: &[f64]| -> Vec<f64> {
        out.clone()
            .map(|t| w.iter().enumerate().map(|(i, wi)| wi * scen.get(i, t)).sum())
            .collect()
    };
    match strat.kind {
        StrategyKind::EqualWeight => {
            let n = scen.n_assets();
            let w = vec![1.0 / n as f64; n];
            let returns = out
                .clone()
                .map(|t| scen.returns().column(t).sum() / n as f64)
                .collect();
            let portfolio = Portfolio {
                weights: w,
                selected: (0..n).collect(),
                objective_value: f64::NAN,
            };
            Ok(Ok((returns, Some(portfolio))))
        }
        StrategyKind::BenchmarkIndex => {
            let series = strat.benchmark.as_ref().expect("checked");
            Ok(Ok((series[out].to_vec(), None)))
        }
        StrategyKind::Nominal | StrategyKind::RomRkhs => Ok(solve_window(scen, window, strat)?
            .map(|ws| (hold(&ws.portfolio.weights), Some(ws.portfolio)))),
    }
}

/// Runs every window of `plan` (in parallel on the current rayon pool) and
/// assembles the results in chronological order.
///
/// The first window whose solve is not optimal aborts the run with
/// [`Error::WindowFailure`], carrying the results of the earlier windows.
pub fn run_backtest(scen: &ScenarioMatrix, plan: &WindowPlan, strat: &StrategySpec) -> Result<OosReturns> {
    strat.check(scen)?;
    if let Some(last) = plan.windows.last() {
        if last.out_end > scen.periods() {
            return Err(Error::InsufficientData {
                needed: last.out_end,
                got: scen.periods(),
            });
        }
    }
    let results: Vec<WindowResult> = plan
        .windows
        .par_iter()
        .map(|w| run_window(scen, w, strat))
        .collect();

    let mut oos = OosReturns {
        strategy: strat.kind.name().to_string(),
        dates: scen.dates().map(|_| Vec::new()),
        ..OosReturns::default()
    };
    for (index, (window, result)) in plan.windows.iter().zip(results).enumerate() {
        match result? {
            Ok((returns, portfolio)) => {
                let dates = scen.dates().map(|d| &d[window.out_range()]);
                oos.push(returns, portfolio, dates);
            }
            Err(status) => {
                return Err(Error::WindowFailure {
                    index,
                    status,
                    partial: Box::new(oos),
                })
            }
        }
    }
    Ok(oos)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulation {
    /// `cum_t = sum_{s <= t} r_s`.
    #[default]
    Additive,
    /// `cum_t = prod_{s <= t} (1 + r_s) - 1`.
    Compounded,
}

pub fn cumulative_series(returns: &[f64], mode: Accumulation) -> Vec<f64> {
    match mode {
        Accumulation::Additive => returns
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r;
                Some(*acc)
            })
            .collect(),
        Accumulation::Compounded => returns
            .iter()
            .scan(1.0, |acc, r| {
                *acc *= 1.0 + r;
                Some(*acc - 1.0)
            })
            .collect(),
    }
}
