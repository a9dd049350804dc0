//! Solver-agnostic mixed-integer conic programs for the nominal and robust
//! mixed-CVaR models.
//!
//! A [`MixedConicProgram`] minimizes a linear objective over variables with
//! box bounds, subject to linear equalities `a'x = b`, linear inequalities
//! `a'x <= b`, second-order cone blocks `|head(x)| <= tail(x)` with affine
//! head and tail, and integrality of the indices in `binary_idx`.
//!
//! Every row carries a label (`cvar[j,k]`, `budget`, `chance`, ...) and every
//! variable group is registered as a named block, so programs can be dumped,
//! inspected, and patched by later stages.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernel::{build_gram_factors, ExpansionSet, GramFactors, KernelSpec};
use crate::risk::McvarSpec;
use crate::scenarios::ScenarioMatrix;
use crate::solver::Solution;

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

/// Sparse affine expression `sum coef * x[idx] + constant`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn new(terms: Vec<(usize, f64)>, constant: f64) -> Self {
        Self { terms, constant }
    }

    pub fn var(idx: usize) -> Self {
        Self::new(vec![(idx, 1.0)], 0.0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(i, c)| c * x[*i]).sum::<f64>()
    }
}

/// Linear row `terms . x (= or <=) rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub label: String,
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl Row {
    pub fn lhs(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(i, c)| c * x[*i]).sum()
    }
}

/// `|head| <= tail`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocBlock {
    pub label: String,
    pub tail: AffineExpr,
    pub head: Vec<AffineExpr>,
}

impl SocBlock {
    /// `|head(x)| - tail(x)`; non-positive when satisfied.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let norm = self
            .head
            .iter()
            .map(|h| h.eval(x).powi(2))
            .sum::<f64>()
            .sqrt();
        norm - self.tail.eval(x)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MixedConicProgram {
    pub vars: Vec<Variable>,
    pub objective: Vec<f64>,
    pub objective_offset: f64,
    pub eq_constraints: Vec<Row>,
    pub ineq_constraints: Vec<Row>,
    pub soc_blocks: Vec<SocBlock>,
    pub binary_idx: Vec<usize>,
    blocks: BTreeMap<String, Range<usize>>,
}

impl MixedConicProgram {
    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn var_names(&self) -> impl Iterator<Item = &str> {
        self.vars.iter().map(|v| v.name.as_str())
    }

    /// Registers `count` variables named `name[k]` (or `name` when `count`
    /// is one and `scalar` is set).
    pub fn add_block(&mut self, name: &str, count: usize, lower: f64, upper: f64) -> Range<usize> {
        let start = self.vars.len();
        for k in 0..count {
            self.vars.push(Variable {
                name: format!("{name}[{k}]"),
                lower,
                upper,
            });
            self.objective.push(0.0);
        }
        let range = start..start + count;
        self.blocks.insert(name.to_string(), range.clone());
        range
    }

    pub fn add_scalar(&mut self, name: &str, lower: f64, upper: f64) -> usize {
        let idx = self.vars.len();
        self.vars.push(Variable {
            name: name.to_string(),
            lower,
            upper,
        });
        self.objective.push(0.0);
        self.blocks.insert(name.to_string(), idx..idx + 1);
        idx
    }

    pub fn block(&self, name: &str) -> Option<Range<usize>> {
        self.blocks.get(name).cloned()
    }

    pub fn scalar(&self, name: &str) -> Option<usize> {
        self.block(name).map(|r| r.start)
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, &Range<usize>)> {
        self.blocks.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn add_eq(&mut self, label: impl Into<String>, terms: Vec<(usize, f64)>, rhs: f64) {
        self.eq_constraints.push(Row {
            label: label.into(),
            terms,
            rhs,
        });
    }

    pub fn add_le(&mut self, label: impl Into<String>, terms: Vec<(usize, f64)>, rhs: f64) {
        self.ineq_constraints.push(Row {
            label: label.into(),
            terms,
            rhs,
        });
    }

    pub fn add_soc(&mut self, label: impl Into<String>, tail: AffineExpr, head: Vec<AffineExpr>) {
        self.soc_blocks.push(SocBlock {
            label: label.into(),
            tail,
            head,
        });
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective_offset
            + self
                .objective
                .iter()
                .zip(x)
                .map(|(c, v)| c * v)
                .sum::<f64>()
    }

    /// Largest violation of bounds, rows and cones at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (v, val) in self.vars.iter().zip(x) {
            worst = worst.max(v.lower - val).max(val - v.upper);
        }
        for r in &self.eq_constraints {
            worst = worst.max((r.lhs(x) - r.rhs).abs());
        }
        for r in &self.ineq_constraints {
            worst = worst.max(r.lhs(x) - r.rhs);
        }
        for c in &self.soc_blocks {
            worst = worst.max(c.violation(x));
        }
        worst
    }

    /// Structural checks: indices in range, bounds ordered, finite data.
    pub fn validate(&self) -> Result<()> {
        let n = self.vars.len();
        if self.objective.len() != n {
            return Err(Error::InvalidProgram(format!(
                "objective has {} entries for {n} variables",
                self.objective.len()
            )));
        }
        for v in &self.vars {
            if v.lower > v.upper || v.lower.is_nan() || v.upper.is_nan() {
                return Err(Error::InvalidProgram(format!(
                    "variable {} has bounds [{}, {}]",
                    v.name, v.lower, v.upper
                )));
            }
        }
        let check_terms = |label: &str, terms: &[(usize, f64)]| -> Result<()> {
            match terms.iter().find(|(i, c)| *i >= n || !c.is_finite()) {
                Some((i, c)) => Err(Error::InvalidProgram(format!(
                    "{label}: bad term ({i}, {c})"
                ))),
                None => Ok(()),
            }
        };
        for r in self.eq_constraints.iter().chain(&self.ineq_constraints) {
            check_terms(&r.label, &r.terms)?;
            if !r.rhs.is_finite() {
                return Err(Error::InvalidProgram(format!("{}: rhs {}", r.label, r.rhs)));
            }
        }
        for c in &self.soc_blocks {
            check_terms(&c.label, &c.tail.terms)?;
            for h in &c.head {
                check_terms(&c.label, &h.terms)?;
            }
        }
        if let Some(b) = self.binary_idx.iter().find(|b| **b >= n) {
            return Err(Error::InvalidProgram(format!("binary index {b} out of range")));
        }
        Ok(())
    }

    /// Copy without the rows and cones whose labels match. Variables left in
    /// no constraint and with zero cost are fixed at zero.
    pub fn without(&self, drop: impl Fn(&str) -> bool) -> MixedConicProgram {
        let mut p = self.clone();
        p.eq_constraints.retain(|r| !drop(&r.label));
        p.ineq_constraints.retain(|r| !drop(&r.label));
        p.soc_blocks.retain(|c| !drop(&c.label));
        let mut used = vec![false; p.vars.len()];
        let rows = p.eq_constraints.iter().chain(&p.ineq_constraints);
        for (i, _) in rows.flat_map(|r| &r.terms) {
            used[*i] = true;
        }
        for c in &p.soc_blocks {
            for (i, _) in std::iter::once(&c.tail).chain(&c.head).flat_map(|e| &e.terms) {
                used[*i] = true;
            }
        }
        for (i, v) in p.vars.iter_mut().enumerate() {
            if !used[i] && p.objective[i] == 0.0 {
                v.lower = 0.0;
                v.upper = 0.0;
            }
        }
        p
    }

    fn ineq_rows_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = usize> + 'a {
        self.ineq_constraints
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.label.starts_with(prefix))
            .map(|(k, _)| k)
    }
}

/// Shape matrices `P_j` of the ellipsoidal supports `{r_j + P_j v : |v| <= 1}`.
#[derive(Debug, Clone, PartialEq)]
pub enum EllipsoidShape {
    /// `P_j = scale * I` for every scenario.
    Scaled(f64),
    /// One matrix shared by all scenarios, or one per scenario.
    Matrices(Vec<DMatrix<f64>>),
}

impl EllipsoidShape {
    fn is_zero(&self) -> bool {
        match self {
            EllipsoidShape::Scaled(s) => *s == 0.0,
            EllipsoidShape::Matrices(ms) => ms.iter().all(|m| m.iter().all(|x| *x == 0.0)),
        }
    }
}

/// MMD ambiguity data for the kernel chance constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguityConfig {
    pub alpha: f64,
    pub factors: GramFactors,
    pub expansion: ExpansionSet,
}

impl AmbiguityConfig {
    pub fn new(
        alpha: f64,
        expansion: ExpansionSet,
        kernel: &KernelSpec,
        jitter_start: f64,
    ) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidRadius(alpha));
        }
        let factors = build_gram_factors(&expansion, kernel, jitter_start)?;
        Ok(Self {
            alpha,
            factors,
            expansion,
        })
    }

    /// Coefficients of `beta1` and `beta2` in the dual objective:
    /// `-(1 - alpha^2 + s_bar)/2` and `(1 + alpha^2 - s_bar)/2`.
    pub fn beta_coefficients(&self) -> (f64, f64) {
        let a2 = self.alpha * self.alpha;
        let s = self.factors.s_bar();
        (-(1.0 - a2 + s) / 2.0, (1.0 + a2 - s) / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mcvar: McvarSpec,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cardinality: usize,
    /// Per-period return target `R*`.
    pub return_target: f64,
    /// Chance tolerance `Gamma` in `(0, 1]`.
    pub gamma_chance: f64,
    pub ellipsoid: EllipsoidShape,
    pub ambiguity: Option<AmbiguityConfig>,
}

impl ModelConfig {
    /// Bounds 0.015..0.7, `Gamma = 0.1`, no ellipsoid and no ambiguity.
    pub fn standard(n: usize, cardinality: usize, return_target: f64) -> Self {
        Self {
            mcvar: McvarSpec::standard(),
            lower: vec![0.015; n],
            upper: vec![0.7; n],
            cardinality,
            return_target,
            gamma_chance: 0.1,
            ellipsoid: EllipsoidShape::Scaled(0.0),
            ambiguity: None,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::DimMismatch {
                expected: n,
                got: self.lower.len().min(self.upper.len()),
            });
        }
        for (i, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(0.0 <= *l && l <= u && *u <= 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "asset {i}: bounds [{l}, {u}] must satisfy 0 <= l <= u <= 1"
                )));
            }
        }
        if !(self.gamma_chance > 0.0 && self.gamma_chance <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "chance tolerance {} outside (0, 1]",
                self.gamma_chance
            )));
        }
        if !self.return_target.is_finite() {
            return Err(Error::InvalidSpec("return target must be finite".into()));
        }
        let a = self.cardinality;
        if a == 0 {
            return Err(Error::StructurallyInfeasible(
                "cardinality 0 cannot hold a fully invested portfolio".into(),
            ));
        }
        if a <= n {
            let mut lo = self.lower.clone();
            lo.sort_by(f64::total_cmp);
            let mut hi = self.upper.clone();
            hi.sort_by(|x, y| y.total_cmp(x));
            let min_total: f64 = lo[..a].iter().sum();
            let max_total: f64 = hi[..a].iter().sum();
            if min_total > 1.0 + 1e-12 || max_total < 1.0 - 1e-12 {
                return Err(Error::StructurallyInfeasible(format!(
                    "{a} assets can hold between {min_total} and {max_total} of capital"
                )));
            }
        }
        if let EllipsoidShape::Scaled(s) = self.ellipsoid {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidShapeMatrix(format!("scale {s}")));
            }
        }
        Ok(())
    }
}

/// How `R*` is derived from the in-sample scenarios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReturnTargetRule {
    /// `2 * sum_j p_j (1/n) sum_i r_ij`: twice the equal-weight mean return.
    TwiceEqualWeightMean,
    /// `2 * sum_i sum_j r_ij`, without normalization.
    DoubledTotal,
    /// The equal-weight mean return.
    EqualWeightMean,
    Fixed(f64),
}

impl ReturnTargetRule {
    pub fn target(&self, scen: &ScenarioMatrix) -> f64 {
        let n = scen.n_assets() as f64;
        let ew_mean = || {
            (0..scen.periods())
                .map(|j| scen.probs()[j] * scen.returns().column(j).sum() / n)
                .sum::<f64>()
        };
        match *self {
            ReturnTargetRule::TwiceEqualWeightMean => 2.0 * ew_mean(),
            ReturnTargetRule::DoubledTotal => 2.0 * scen.returns().sum(),
            ReturnTargetRule::EqualWeightMean => ew_mean(),
            ReturnTargetRule::Fixed(x) => x,
        }
    }
}

/// Variables, objective, CVaR rows and the selection block shared by both
/// models; the hard return row is added by [`build_nom`].
fn base_program(scen: &ScenarioMatrix, cfg: &ModelConfig) -> Result<MixedConicProgram> {
    let n = scen.n_assets();
    let t = scen.periods();
    cfg.validate(n)?;
    let m = cfg.mcvar.len();
    let p = scen.probs();

    let mut prog = MixedConicProgram::default();
    let w = prog.add_block("w", n, f64::NEG_INFINITY, f64::INFINITY);
    let y = prog.add_block("y", n, 0.0, 1.0);
    let c = prog.add_block("c", t * m, f64::NEG_INFINITY, f64::INFINITY);
    let gamma = prog.add_block("gamma", m, f64::NEG_INFINITY, f64::INFINITY);
    prog.binary_idx = y.clone().collect();
    for (k, idx) in c.clone().enumerate() {
        prog.vars[idx].name = format!("c[{},{}]", k % t, k / t);
    }
    let c_idx = |j: usize, k: usize| c.start + k * t + j;

    for k in 0..m {
        let (delta, theta) = (cfg.mcvar.levels()[k], cfg.mcvar.weights()[k]);
        prog.objective[gamma.start + k] = theta;
        for j in 0..t {
            prog.objective[c_idx(j, k)] = theta * p[j] / delta;
        }
    }

    // c_jk + gamma_k + sum_i r_ij w_i >= 0
    for k in 0..m {
        for j in 0..t {
            let mut terms = vec![(c_idx(j, k), -1.0), (gamma.start + k, -1.0)];
            terms.extend((0..n).map(|i| (w.start + i, -scen.get(i, j))));
            prog.add_le(format!("cvar[{j},{k}]"), terms, 0.0);
        }
    }
    for k in 0..m {
        for j in 0..t {
            prog.add_le(format!("cpos[{j},{k}]"), vec![(c_idx(j, k), -1.0)], 0.0);
        }
    }
    for i in 0..n {
        prog.add_le(
            format!("wub[{i}]"),
            vec![(w.start + i, 1.0), (y.start + i, -cfg.upper[i])],
            0.0,
        );
        prog.add_le(
            format!("wlb[{i}]"),
            vec![(y.start + i, cfg.lower[i]), (w.start + i, -1.0)],
            0.0,
        );
    }
    prog.add_eq("budget", w.clone().map(|i| (i, 1.0)).collect(), 1.0);
    prog.add_eq(
        "cardinality",
        y.clone().map(|i| (i, 1.0)).collect(),
        cfg.cardinality as f64,
    );
    Ok(prog)
}

/// Nominal model: mixed-CVaR LP with cardinality binaries and the hard
/// expected-return row `sum_j p_j sum_i r_ij w_i >= R*`.
pub fn build_nom(scen: &ScenarioMatrix, cfg: &ModelConfig) -> Result<MixedConicProgram> {
    let mut prog = base_program(scen, cfg)?;
    let w = prog.block("w").expect("w block");
    let n = scen.n_assets();
    let terms = (0..n)
        .map(|i| {
            let mu: f64 = (0..scen.periods())
                .map(|j| scen.probs()[j] * scen.get(i, j))
                .sum();
            (w.start + i, -mu)
        })
        .collect();
    prog.add_le("return", terms, -cfg.return_target);
    Ok(prog)
}

fn shape_matrices(shape: &EllipsoidShape, n: usize, t: usize) -> Result<Vec<DMatrix<f64>>> {
    match shape {
        EllipsoidShape::Scaled(s) => {
            if !(*s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidShapeMatrix(format!("scale {s}")));
            }
            Ok(vec![DMatrix::identity(n, n) * *s])
        }
        EllipsoidShape::Matrices(ms) => {
            if ms.len() != 1 && ms.len() != t {
                return Err(Error::InvalidShapeMatrix(format!(
                    "{} matrices for {t} scenarios",
                    ms.len()
                )));
            }
            if let Some(bad) = ms.iter().find(|m| m.shape() != (n, n)) {
                return Err(Error::InvalidShapeMatrix(format!(
                    "shape {:?}, expected ({n}, {n})",
                    bad.shape()
                )));
            }
            Ok(ms.clone())
        }
    }
}

/// Robustifies every CVaR row against the ellipsoidal support of its
/// scenario: adds `t_j >= |P_j' w|` and turns `cvar[j,k]` into
/// `t_j - c_jk - gamma_k - sum_i r_ij w_i <= 0`.
///
/// A zero shape leaves the program unchanged.
pub fn ellipsoid_blocks(
    scen: &ScenarioMatrix,
    cfg: &ModelConfig,
    mut program: MixedConicProgram,
) -> Result<MixedConicProgram> {
    let n = scen.n_assets();
    let t = scen.periods();
    let mats = shape_matrices(&cfg.ellipsoid, n, t)?;
    if cfg.ellipsoid.is_zero() {
        return Ok(program);
    }
    let w = program
        .block("w")
        .ok_or_else(|| Error::InvalidProgram("missing w block".into()))?;
    let aux = program.add_block("t", t, f64::NEG_INFINITY, f64::INFINITY);

    for j in 0..t {
        let p = &mats[if mats.len() == 1 { 0 } else { j }];
        // (P_j' w)_a = sum_i P_j[i, a] w_i
        let head = (0..n)
            .map(|a| {
                let terms = (0..n)
                    .filter(|&i| p[(i, a)] != 0.0)
                    .map(|i| (w.start + i, p[(i, a)]))
                    .collect();
                AffineExpr::new(terms, 0.0)
            })
            .collect();
        program.add_soc(format!("ellipsoid[{j}]"), AffineExpr::var(aux.start + j), head);
    }

    let rows: Vec<usize> = program.ineq_rows_with_prefix("cvar[").collect();
    for r in rows {
        let row = &mut program.ineq_constraints[r];
        let j = parse_scenario_index(&row.label)?;
        row.terms.push((aux.start + j, 1.0));
    }
    Ok(program)
}

fn parse_scenario_index(label: &str) -> Result<usize> {
    label
        .split_once('[')
        .and_then(|(_, rest)| rest.split([',', ']']).next())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::InvalidProgram(format!("bad row label {label}")))
}

/// Robust model: ellipsoid-robustified CVaR rows plus the CVaR
/// approximation of the return chance constraint, worst-cased over the MMD
/// ball through its conic dual.
///
/// Added variables are `lambda`, `omega`, `beta1`, `beta2`, `phi[T]` and the
/// shortfalls `R[T]`; added rows are
///
/// ```text
/// Gamma lambda - omega - (1 - a^2 + s)/2 beta1 + (1 + a^2 - s)/2 beta2 <= 0
/// omega + (L phi)_j + q_j (beta1 + beta2) + R_j <= 0          for all j
/// R_j >= 0,   R_j >= R* - r_j' w - lambda                      for all j
/// |(phi, beta1)| <= beta2
/// Gamma lambda + sum_j p_j R_j <= 0
/// ```
///
/// where `q = (1/T0) M 1`, `r_j` are the expansion points and `p` is the
/// empirical distribution. The last row (`chance_emp`) is implied by the
/// others because `p` lies in every MMD ball; it is kept so that
/// [`empirical_relaxation`] can bound subproblems on which the conic solve
/// stalls.
pub fn build_rom_rkhs(scen: &ScenarioMatrix, cfg: &ModelConfig) -> Result<MixedConicProgram> {
    let amb = cfg
        .ambiguity
        .as_ref()
        .ok_or_else(|| Error::InvalidSpec("robust model requires an ambiguity set".into()))?;
    if !(amb.alpha >= 0.0 && amb.alpha.is_finite()) {
        return Err(Error::InvalidRadius(amb.alpha));
    }
    let n = scen.n_assets();
    let t = scen.periods();
    if amb.expansion.len() != t || amb.factors.size() != t {
        return Err(Error::DimMismatch {
            expected: t,
            got: amb.expansion.len().min(amb.factors.size()),
        });
    }
    if amb.expansion.dim() != n {
        return Err(Error::DimMismatch {
            expected: n,
            got: amb.expansion.dim(),
        });
    }

    let prog = base_program(scen, cfg)?;
    let mut prog = ellipsoid_blocks(scen, cfg, prog)?;
    let w = prog.block("w").expect("w block");

    let free = (f64::NEG_INFINITY, f64::INFINITY);
    let lambda = prog.add_scalar("lambda", free.0, free.1);
    let omega = prog.add_scalar("omega", free.0, free.1);
    let beta1 = prog.add_scalar("beta1", free.0, free.1);
    let beta2 = prog.add_scalar("beta2", free.0, free.1);
    let phi = prog.add_block("phi", t, free.0, free.1);
    let short = prog.add_block("R", t, free.0, free.1);

    let (b1, b2) = amb.beta_coefficients();
    prog.add_le(
        "chance",
        vec![
            (lambda, cfg.gamma_chance),
            (omega, -1.0),
            (beta1, b1),
            (beta2, b2),
        ],
        0.0,
    );

    let l = amb.factors.lower();
    let q = amb.factors.sample_mean_row();
    for j in 0..t {
        let mut terms = vec![(omega, 1.0), (beta1, q[j]), (beta2, q[j]), (short.start + j, 1.0)];
        terms.extend(
            (0..=j)
                .filter(|&a| l[(j, a)] != 0.0)
                .map(|a| (phi.start + a, l[(j, a)])),
        );
        prog.add_le(format!("dual[{j}]"), terms, 0.0);
    }
    for j in 0..t {
        prog.add_le(format!("rpos[{j}]"), vec![(short.start + j, -1.0)], 0.0);
    }
    for j in 0..t {
        let point = &amb.expansion.points()[j];
        let mut terms = vec![(lambda, -1.0), (short.start + j, -1.0)];
        terms.extend((0..n).map(|i| (w.start + i, -point[i])));
        prog.add_le(format!("rshort[{j}]"), terms, -cfg.return_target);
    }

    let mut head: Vec<AffineExpr> = phi.clone().map(AffineExpr::var).collect();
    head.push(AffineExpr::var(beta1));
    prog.add_soc("mmd", AffineExpr::var(beta2), head);

    let mut terms = vec![(lambda, cfg.gamma_chance)];
    terms.extend(
        amb.expansion
            .empirical_weights()
            .into_iter()
            .enumerate()
            .filter(|(_, p)| *p != 0.0)
            .map(|(j, p)| (short.start + j, p)),
    );
    prog.add_le("chance_emp", terms, 0.0);
    Ok(prog)
}

/// The robust program with the MMD worst case replaced by the empirical
/// expectation (`chance`, `dual[j]` and the `mmd` cone dropped). Its optimum
/// is a lower bound on the robust optimum for every radius, and its
/// infeasibility proves the robust program infeasible. `None` for programs
/// without the `chance_emp` row.
pub fn empirical_relaxation(program: &MixedConicProgram) -> Option<MixedConicProgram> {
    program
        .ineq_constraints
        .iter()
        .any(|r| r.label == "chance_emp")
        .then(|| program.without(|l| l == "chance" || l == "mmd" || l.starts_with("dual[")))
}

/// Optimal weights and selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    pub weights: Vec<f64>,
    /// Indices of selected assets, ascending.
    pub selected: Vec<usize>,
    pub objective_value: f64,
}

impl Portfolio {
    pub fn selected_ids<'a>(&self, asset_ids: &'a [String]) -> Vec<&'a str> {
        self.selected.iter().map(|&i| asset_ids[i].as_str()).collect()
    }
}

const WEIGHT_TOL: f64 = 1e-6;
const SNAP: f64 = 1e-8;

/// Reads `w` and `y` off a solution, snaps tiny weights to zero and checks
/// the portfolio constraints.
pub fn extract_portfolio(
    solution: &Solution,
    program: &MixedConicProgram,
    cfg: &ModelConfig,
) -> Result<Portfolio> {
    let w = program
        .block("w")
        .ok_or_else(|| Error::InvalidProgram("missing w block".into()))?;
    let y = program
        .block("y")
        .ok_or_else(|| Error::InvalidProgram("missing y block".into()))?;
    if solution.primal.len() != program.num_vars() {
        return Err(Error::CorruptSolution(format!(
            "{} values for {} variables",
            solution.primal.len(),
            program.num_vars()
        )));
    }
    let weights: Vec<f64> = solution.primal[w]
        .iter()
        .map(|&x| if x.abs() < SNAP { 0.0 } else { x })
        .collect();
    let selected: Vec<usize> = solution.primal[y]
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.5)
        .map(|(i, _)| i)
        .collect();
    portfolio_checks(&weights, &selected, cfg)?;
    Ok(Portfolio {
        weights,
        selected,
        objective_value: solution.objective,
    })
}

pub(crate) fn portfolio_checks(weights: &[f64], selected: &[usize], cfg: &ModelConfig) -> Result<()> {
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::CorruptSolution(format!("weights sum to {total}")));
    }
    if selected.len() != cfg.cardinality {
        return Err(Error::CorruptSolution(format!(
            "{} assets selected, expected {}",
            selected.len(),
            cfg.cardinality
        )));
    }
    for (i, &x) in weights.iter().enumerate() {
        let on = selected.binary_search(&i).is_ok();
        let ok = if on {
            x >= cfg.lower[i] - WEIGHT_TOL && x <= cfg.upper[i] + WEIGHT_TOL
        } else {
            x == 0.0
        };
        if !ok {
            return Err(Error::CorruptSolution(format!(
                "asset {i}: weight {x} (selected: {on})"
            )));
        }
    }
    Ok(())
}

fn write_terms(out: &mut String, terms: &[(usize, f64)]) {
    for (i, c) in terms {
        let _ = write!(out, " {i}:{c:?}");
    }
}

/// Plain-text dump of the program. Lines:
///
/// ```text
/// var <name> <lower> <upper>
/// block <name> <start> <end>
/// binary <idx>...
/// objective <offset> <idx>:<coef>...
/// eq <label> <rhs> <idx>:<coef>...
/// le <label> <rhs> <idx>:<coef>...
/// soc <label> <head-dim>
/// tail <constant> <idx>:<coef>...
/// head <constant> <idx>:<coef>...
/// ```
///
/// Floats use Rust's shortest round-trip formatting, so `from_text` restores
/// the program exactly.
pub fn to_text(program: &MixedConicProgram) -> String {
    let mut out = String::from("mcvar-program 1\n");
    for v in &program.vars {
        let _ = writeln!(out, "var {} {:?} {:?}", v.name, v.lower, v.upper);
    }
    for (name, r) in &program.blocks {
        let _ = writeln!(out, "block {name} {} {}", r.start, r.end);
    }
    out.push_str("binary");
    for b in &program.binary_idx {
        let _ = write!(out, " {b}");
    }
    out.push('\n');
    let _ = write!(out, "objective {:?}", program.objective_offset);
    let dense: Vec<(usize, f64)> = program
        .objective
        .iter()
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(i, c)| (i, *c))
        .collect();
    write_terms(&mut out, &dense);
    out.push('\n');
    for (kind, rows) in [("eq", &program.eq_constraints), ("le", &program.ineq_constraints)] {
        for r in rows {
            let _ = write!(out, "{kind} {} {:?}", r.label, r.rhs);
            write_terms(&mut out, &r.terms);
            out.push('\n');
        }
    }
    for c in &program.soc_blocks {
        let _ = writeln!(out, "soc {} {}", c.label, c.head.len());
        let _ = write!(out, "tail {:?}", c.tail.constant);
        write_terms(&mut out, &c.tail.terms);
        out.push('\n');
        for h in &c.head {
            let _ = write!(out, "head {:?}", h.constant);
            write_terms(&mut out, &h.terms);
            out.push('\n');
        }
    }
    out
}

pub fn from_text(text: &str) -> Result<MixedConicProgram> {
    let err = |line: usize, msg: &str| Error::Parse(format!("program line {}: {msg}", line + 1));
    let num = |line: usize, s: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|_| err(line, &format!("bad number {s:?}")))
    };
    let idx = |line: usize, s: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| err(line, &format!("bad index {s:?}")))
    };
    let terms = |line: usize, toks: &[&str]| -> Result<Vec<(usize, f64)>> {
        toks.iter()
            .map(|t| {
                let (i, c) = t.split_once(':').ok_or_else(|| err(line, "expected idx:coef"))?;
                Ok((idx(line, i)?, num(line, c)?))
            })
            .collect()
    };

    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, "mcvar-program 1")) => {}
        _ => return Err(Error::Parse("missing `mcvar-program 1` header".into())),
    }
    let mut prog = MixedConicProgram::default();
    let mut pending: Option<(SocBlock, usize)> = None;
    for (ln, line) in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if let Some((block, want)) = pending.as_mut() {
            if toks[0] == "head" && block.head.len() < *want {
                let constant = num(ln, toks.get(1).ok_or_else(|| err(ln, "missing constant"))?)?;
                block.head.push(AffineExpr::new(terms(ln, &toks[2..])?, constant));
                if block.head.len() == *want {
                    prog.soc_blocks.push(pending.take().unwrap().0);
                }
                continue;
            }
            if toks[0] == "tail" {
                let constant = num(ln, toks.get(1).ok_or_else(|| err(ln, "missing constant"))?)?;
                block.tail = AffineExpr::new(terms(ln, &toks[2..])?, constant);
                if *want == 0 {
                    prog.soc_blocks.push(pending.take().unwrap().0);
                }
                continue;
            }
            return Err(err(ln, "incomplete cone block"));
        }
        match toks[0] {
            "var" if toks.len() == 4 => {
                prog.vars.push(Variable {
                    name: toks[1].to_string(),
                    lower: num(ln, toks[2])?,
                    upper: num(ln, toks[3])?,
                });
                prog.objective.push(0.0);
            }
            "block" if toks.len() == 4 => {
                prog.blocks
                    .insert(toks[1].to_string(), idx(ln, toks[2])?..idx(ln, toks[3])?);
            }
            "binary" => {
                prog.binary_idx = toks[1..]
                    .iter()
                    .map(|t| idx(ln, t))
                    .collect::<Result<_>>()?;
            }
            "objective" if toks.len() >= 2 => {
                prog.objective_offset = num(ln, toks[1])?;
                for (i, c) in terms(ln, &toks[2..])? {
                    *prog
                        .objective
                        .get_mut(i)
                        .ok_or_else(|| err(ln, "objective index out of range"))? = c;
                }
            }
            kind @ ("eq" | "le") if toks.len() >= 3 => {
                let row = Row {
                    label: toks[1].to_string(),
                    rhs: num(ln, toks[2])?,
                    terms: terms(ln, &toks[3..])?,
                };
                if kind == "eq" {
                    prog.eq_constraints.push(row);
                } else {
                    prog.ineq_constraints.push(row);
                }
            }
            "soc" if toks.len() == 3 => {
                pending = Some((
                    SocBlock {
                        label: toks[1].to_string(),
                        tail: AffineExpr::default(),
                        head: Vec::new(),
                    },
                    idx(ln, toks[2])?,
                ));
            }
            _ => return Err(err(ln, &format!("unrecognized line {line:?}"))),
        }
    }
    if pending.is_some() {
        return Err(Error::Parse("program ends inside a cone block".into()));
    }
    prog.validate()?;
    Ok(prog)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{KernelSpec, DEFAULT_JITTER_START};
    use crate::solver::{solve_continuous, ContinuousOptions, SolveStatus};
    use proptest::prelude::*;

    fn scen(n: usize, t: usize) -> ScenarioMatrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..t)
                    .map(|j| 0.01 * ((i * 7 + j * 3) % 11) as f64 - 0.05)
                    .collect()
            })
            .collect();
        ScenarioMatrix::from_rows(&rows, (0..n).map(|i| format!("a{i}")).collect()).unwrap()
    }

    fn two_level(n: usize, a: usize) -> ModelConfig {
        let mut cfg = ModelConfig::standard(n, a, 0.0);
        cfg.mcvar = McvarSpec::new(vec![0.2, 0.1], vec![0.5, 0.5]).unwrap();
        cfg
    }

    #[test]
    fn nominal_counts() {
        let p = build_nom(&scen(3, 5), &two_level(3, 2)).unwrap();
        assert_eq!(p.num_vars(), 18);
        assert_eq!(p.ineq_constraints.len(), 27);
        assert_eq!(p.eq_constraints.len(), 2);
        assert!(p.soc_blocks.is_empty());
        assert_eq!(p.binary_idx, vec![3, 4, 5]);
        p.validate().unwrap();
    }

    #[test]
    fn nominal_single_level_objective() {
        let s = scen(2, 4);
        let mut cfg = ModelConfig::standard(2, 2, 0.0);
        cfg.mcvar = McvarSpec::single(0.25).unwrap();
        let p = build_nom(&s, &cfg).unwrap();
        let gamma = p.scalar("gamma").unwrap();
        assert_eq!(p.objective[gamma], 1.0);
        let c = p.block("c").unwrap();
        for i in c {
            assert!((p.objective[i] - 0.25 / 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn structurally_infeasible_configs() {
        let s = scen(3, 5);
        let cfg = two_level(3, 0);
        assert!(matches!(build_nom(&s, &cfg), Err(Error::StructurallyInfeasible(_))));
        let mut cfg = two_level(3, 2);
        cfg.lower = vec![0.6; 3];
        assert!(matches!(build_nom(&s, &cfg), Err(Error::StructurallyInfeasible(_))));
        let mut cfg = two_level(3, 1);
        cfg.upper = vec![0.7; 3];
        assert!(matches!(build_nom(&s, &cfg), Err(Error::StructurallyInfeasible(_))));
    }

    #[test]
    fn ellipsoid_zero_scale_is_nominal() {
        let s = scen(3, 5);
        let cfg = two_level(3, 2);
        let nom = build_nom(&s, &cfg).unwrap();
        let same = ellipsoid_blocks(&s, &cfg, nom.clone()).unwrap();
        assert_eq!(nom, same);
    }

    #[test]
    fn ellipsoid_margin_and_counts() {
        let s = scen(2, 3);
        let mut cfg = two_level(2, 2);
        cfg.ellipsoid = EllipsoidShape::Scaled(0.072);
        let p = ellipsoid_blocks(&s, &cfg, build_nom(&s, &cfg).unwrap()).unwrap();
        assert_eq!(p.soc_blocks.len(), 3);
        assert!(p.soc_blocks.iter().all(|b| b.head.len() == 2));

        let mut x = vec![0.0; p.num_vars()];
        x[p.block("w").unwrap().start] = 1.0;
        let norm = p.soc_blocks[0]
            .head
            .iter()
            .map(|h| h.eval(&x).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((norm - 0.072).abs() < 1e-15);

        let t = p.block("t").unwrap();
        let cvar_rows: Vec<&Row> = p
            .ineq_constraints
            .iter()
            .filter(|r| r.label.starts_with("cvar["))
            .collect();
        assert_eq!(cvar_rows.len(), 6);
        assert!(cvar_rows[4].terms.contains(&(t.start + 1, 1.0)));
    }

    #[test]
    fn ellipsoid_rejects_bad_shape() {
        let s = scen(2, 3);
        let mut cfg = two_level(2, 2);
        cfg.ellipsoid = EllipsoidShape::Matrices(vec![DMatrix::identity(3, 2)]);
        assert!(matches!(
            ellipsoid_blocks(&s, &cfg, build_nom(&s, &cfg).unwrap()),
            Err(Error::InvalidShapeMatrix(_))
        ));
    }

    fn with_ambiguity(s: &ScenarioMatrix, cfg: &mut ModelConfig, t0: usize, alpha: f64) {
        let exp = ExpansionSet::from_scenarios(s, t0).unwrap();
        cfg.ambiguity =
            Some(AmbiguityConfig::new(alpha, exp, &KernelSpec::median(), DEFAULT_JITTER_START).unwrap());
    }

    #[test]
    fn robust_counts() {
        let s = scen(3, 5);
        let mut cfg = two_level(3, 2);
        cfg.ellipsoid = EllipsoidShape::Scaled(0.072);
        with_ambiguity(&s, &mut cfg, 4, 0.05);
        let p = build_rom_rkhs(&s, &cfg).unwrap();
        let nominal_vars = 18;
        let ellipsoid_aux = 5;
        let kernel_vars = ["lambda", "omega", "beta1", "beta2", "phi", "R"]
            .iter()
            .map(|b| p.block(b).unwrap().len())
            .sum::<usize>();
        assert_eq!(kernel_vars, 14);
        assert_eq!(p.num_vars(), nominal_vars + ellipsoid_aux + kernel_vars);
        assert_eq!(p.soc_blocks.len(), 6);
        assert_eq!(p.soc_blocks.last().unwrap().head.len(), 6);
        assert!(!p.ineq_constraints.iter().any(|r| r.label == "return"));
        assert_eq!(p.ineq_constraints.len(), 27 - 1 + 1 + 5 * 3 + 1);
        p.validate().unwrap();
    }

    #[test]
    fn empirical_row_is_implied_and_relaxation_bounds() {
        let s = scen(4, 12);
        let opts = ContinuousOptions::default();
        let robust = |target: f64, alpha: f64| {
            let mut cfg = ModelConfig::standard(4, 2, target);
            cfg.ellipsoid = EllipsoidShape::Scaled(0.036);
            with_ambiguity(&s, &mut cfg, 9, alpha);
            build_rom_rkhs(&s, &cfg).unwrap()
        };
        for alpha in [0.05, 0.5] {
            let p = robust(-0.04, alpha);
            let row = p.ineq_constraints.iter().find(|r| r.label == "chance_emp").unwrap().clone();
            let bare = solve_continuous(&p.without(|l| l == "chance_emp"), &opts).unwrap();
            assert_eq!(bare.status, SolveStatus::Optimal);
            assert!(row.lhs(&bare.primal) <= 1e-7, "alpha {alpha}");

            let relaxed = empirical_relaxation(&p).unwrap();
            assert!(relaxed.soc_blocks.iter().all(|c| c.label != "mmd"));
            assert!(relaxed.ineq_constraints.iter().all(|r| !r.label.starts_with("dual[")));
            let r = solve_continuous(&relaxed, &opts).unwrap();
            assert_eq!(r.status, SolveStatus::Optimal);
            assert!(r.objective <= bare.objective + 1e-7, "alpha {alpha}");
        }

        // A target above every asset's tail mean is out of reach for any radius.
        let unreachable = empirical_relaxation(&robust(0.05, 0.0)).unwrap();
        assert_eq!(solve_continuous(&unreachable, &opts).unwrap().status, SolveStatus::Infeasible);
        assert!(empirical_relaxation(&build_nom(&scen(3, 5), &two_level(3, 2)).unwrap()).is_none());
    }

    #[test]
    fn robust_errors() {
        let s = scen(3, 5);
        let mut cfg = two_level(3, 2);
        assert!(build_rom_rkhs(&s, &cfg).is_err());
        with_ambiguity(&scen(3, 6), &mut cfg, 4, 0.05);
        assert!(matches!(build_rom_rkhs(&s, &cfg), Err(Error::DimMismatch { .. })));
        with_ambiguity(&s, &mut cfg, 4, 0.05);
        cfg.ambiguity.as_mut().unwrap().alpha = -1.0;
        assert!(matches!(build_rom_rkhs(&s, &cfg), Err(Error::InvalidRadius(_))));
    }

    fn solution(primal: Vec<f64>) -> Solution {
        Solution {
            status: SolveStatus::Optimal,
            primal,
            objective: 0.0,
            ..Solution::default()
        }
    }

    #[test]
    fn extraction() {
        let s = scen(3, 5);
        let cfg = two_level(3, 2);
        let p = build_nom(&s, &cfg).unwrap();
        let mut x = vec![0.0; p.num_vars()];
        x[..6].copy_from_slice(&[0.4, 1e-10, 0.6, 1.0, 0.0, 1.0]);
        let port = extract_portfolio(&solution(x.clone()), &p, &cfg).unwrap();
        assert_eq!(port.selected, vec![0, 2]);
        assert_eq!(port.weights, vec![0.4, 0.0, 0.6]);

        let mut wide = cfg.clone();
        wide.upper = vec![1.0; 3];
        x[..3].copy_from_slice(&[0.985, 0.0, 0.015]);
        assert!(extract_portfolio(&solution(x.clone()), &p, &wide).is_ok());

        x[..3].copy_from_slice(&[0.4, 0.0, 0.4]);
        assert!(matches!(
            extract_portfolio(&solution(x), &p, &cfg),
            Err(Error::CorruptSolution(_))
        ));
    }

    #[test]
    fn return_target_rules() {
        let s = ScenarioMatrix::from_rows(&[vec![0.01, 0.03], vec![0.0, 0.02]], vec!["a".into(), "b".into()])
            .unwrap();
        assert!((ReturnTargetRule::EqualWeightMean.target(&s) - 0.015).abs() < 1e-15);
        assert!((ReturnTargetRule::TwiceEqualWeightMean.target(&s) - 0.03).abs() < 1e-15);
        assert!((ReturnTargetRule::DoubledTotal.target(&s) - 0.12).abs() < 1e-15);
    }

    #[test]
    fn text_round_trip_of_robust_program() {
        let s = scen(3, 6);
        let mut cfg = two_level(3, 2);
        cfg.ellipsoid = EllipsoidShape::Scaled(0.05);
        with_ambiguity(&s, &mut cfg, 4, 0.2);
        let p = build_rom_rkhs(&s, &cfg).unwrap();
        assert_eq!(from_text(&to_text(&p)).unwrap(), p);
    }

    #[test]
    fn text_rejects_garbage() {
        assert!(from_text("nope").is_err());
        assert!(from_text("mcvar-program 1\nvar x 0 zz\n").is_err());
        assert!(from_text("mcvar-program 1\nvar x 0 1\nsoc k 1\ntail 0 0:1\n").is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(
            vars in prop::collection::vec((-10.0f64..10.0, 0.0f64..5.0), 1..8),
            coefs in prop::collection::vec((0usize..8, -1e3f64..1e3), 0..20),
            rhs in -100.0f64..100.0,
            offset in -1.0f64..1.0,
        ) {
            let mut p = MixedConicProgram::default();
            let n = vars.len();
            for (k, (lo, width)) in vars.iter().enumerate() {
                p.add_scalar(&format!("x{k}"), *lo, lo + width);
            }
            let terms: Vec<(usize, f64)> = coefs.iter().map(|(i, c)| (i % n, *c)).collect();
            p.objective[0] = rhs / 3.0;
            p.objective_offset = offset;
            p.add_le("r0", terms.clone(), rhs);
            p.add_eq("e0", terms.clone(), -rhs);
            p.add_soc("k0", AffineExpr::new(terms.clone(), offset), vec![AffineExpr::new(terms, 1.0)]);
            p.binary_idx = vec![n - 1];
            prop_assert_eq!(from_text(&to_text(&p)).unwrap(), p);
        }
    }
}
