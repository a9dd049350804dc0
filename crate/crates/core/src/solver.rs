//! Continuous conic solves (via Clarabel), branch-and-bound over the
//! selection binaries, and brute-force oracles.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use itertools::Itertools;

use crate::error::{Error, Result};
use crate::formulation::{empirical_relaxation, AffineExpr, AmbiguityConfig, MixedConicProgram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterLimit,
    #[default]
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub primal_feas: f64,
    pub dual_feas: f64,
    pub gap: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal_feas.max(self.dual_feas).max(self.gap)
    }
}

/// One line of the branch-and-bound trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeRecord {
    pub id: usize,
    pub depth: usize,
    pub bound: f64,
    /// Incumbent objective after processing the node (infinite if none).
    pub incumbent: f64,
}

impl std::fmt::Display for NodeRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "node {} depth {} bound {:e} incumbent {:e}",
            self.id, self.depth, self.bound, self.incumbent
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Solution {
    pub status: SolveStatus,
    pub primal: Vec<f64>,
    pub objective: f64,
    pub residuals: KktResiduals,
    /// Best proven lower bound (equals `objective` for continuous solves).
    pub bound: f64,
    /// Continuous subproblems solved.
    pub nodes: usize,
    pub trace: Vec<NodeRecord>,
}

impl Solution {
    pub fn rel_gap(&self) -> f64 {
        (self.objective - self.bound).max(0.0) / self.objective.abs().max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousOptions {
    pub tol: f64,
    pub max_iter: u32,
}

impl Default for ContinuousOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

/// Reduced-accuracy solutions are accepted when the point violates the
/// program by at most this much.
const ALMOST_TOL: f64 = 1e-6;

/// Solves the continuous relaxation (binaries relaxed to their bounds).
pub fn solve_continuous(program: &MixedConicProgram, opts: &ContinuousOptions) -> Result<Solution> {
    program.validate()?;
    let n = program.num_vars();
    let mut rows = RowBuilder::default();

    // Zero cone: equalities and fixed variables.
    for r in &program.eq_constraints {
        rows.push(&r.terms, r.rhs);
    }
    for (i, v) in program.vars.iter().enumerate() {
        if v.lower == v.upper {
            rows.push(&[(i, 1.0)], v.lower);
        }
    }
    let n_zero = rows.len();

    // Nonnegative cone: a'x + s = b.
    for r in &program.ineq_constraints {
        rows.push(&r.terms, r.rhs);
    }
    for (i, v) in program.vars.iter().enumerate() {
        if v.lower == v.upper {
            continue;
        }
        if v.upper.is_finite() {
            rows.push(&[(i, 1.0)], v.upper);
        }
        if v.lower.is_finite() {
            rows.push(&[(i, -1.0)], -v.lower);
        }
    }
    let n_nonneg = rows.len() - n_zero;

    let mut cones = Vec::new();
    if n_zero > 0 {
        cones.push(SupportedConeT::ZeroConeT(n_zero));
    }
    if n_nonneg > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(n_nonneg));
    }
    // s = b - Ax = (tail, head) with b the constants and A the negated terms.
    for block in &program.soc_blocks {
        for e in std::iter::once(&block.tail).chain(&block.head) {
            rows.push_affine(e);
        }
        cones.push(SupportedConeT::SecondOrderConeT(1 + block.head.len()));
    }

    let m = rows.len();
    let a = CscMatrix::new_from_triplets(m, n, rows.i, rows.j, rows.v);
    let p = CscMatrix::zeros((n, n));
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(opts.max_iter)
        .tol_feas(opts.tol)
        .tol_gap_abs(opts.tol)
        .tol_gap_rel(opts.tol)
        .build()
        .map_err(|e| Error::InvalidProgram(format!("solver settings: {e:?}")))?;
    let mut solver = DefaultSolver::new(&p, &program.objective, &a, &rows.b, &cones, settings)
        .map_err(|e| Error::InvalidProgram(format!("solver setup: {e:?}")))?;
    solver.solve();
    let sol = &solver.solution;

    let primal = sol.x.clone();
    let violation = program.max_violation(&primal);
    let status = match sol.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::AlmostSolved if violation <= ALMOST_TOL => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::IterLimit,
        _ => SolveStatus::NumericalFailure,
    };
    let objective = program.objective_value(&primal);
    let gap = (sol.obj_val - sol.obj_val_dual).abs() / sol.obj_val.abs().max(1.0);
    Ok(Solution {
        status,
        objective,
        bound: objective,
        residuals: KktResiduals {
            primal_feas: violation,
            dual_feas: sol.r_dual,
            gap,
        },
        primal,
        nodes: 1,
        trace: Vec::new(),
    })
}

#[derive(Default)]
struct RowBuilder {
    i: Vec<usize>,
    j: Vec<usize>,
    v: Vec<f64>,
    b: Vec<f64>,
}

impl RowBuilder {
    fn len(&self) -> usize {
        self.b.len()
    }

    fn push(&mut self, terms: &[(usize, f64)], rhs: f64) {
        let row = self.b.len();
        for &(j, c) in terms {
            self.i.push(row);
            self.j.push(j);
            self.v.push(c);
        }
        self.b.push(rhs);
    }

    fn push_affine(&mut self, e: &AffineExpr) {
        let neg: Vec<(usize, f64)> = e.terms.iter().map(|&(j, c)| (j, -c)).collect();
        self.push(&neg, e.constant);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Branching {
    /// Binary closest to 1/2, ties to the larger paired weight.
    #[default]
    MostFractional,
    /// Fractional binary with the largest paired weight.
    MaxWeight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnbConfig {
    pub rel_gap_tol: f64,
    pub max_nodes: usize,
    pub branching: Branching,
    pub continuous: ContinuousOptions,
    /// Record a [`NodeRecord`] per node.
    pub trace: bool,
}

impl Default for BnbConfig {
    fn default() -> Self {
        Self {
            rel_gap_tol: 1e-6,
            max_nodes: 100_000,
            branching: Branching::MostFractional,
            continuous: ContinuousOptions::default(),
            trace: false,
        }
    }
}

const INTEGRALITY_TOL: f64 = 1e-5;
/// Objectives closer than this (relative) count as ties.
const TIE_TOL: f64 = 1e-9;

/// Pairs each binary with the weight it switches on, plus its lower bound
/// read off the `wlb[i]` row, for bound propagation.
struct Coupling {
    weight: Vec<Option<usize>>,
    lower: Vec<f64>,
}

fn coupling(program: &MixedConicProgram) -> Coupling {
    let nb = program.binary_idx.len();
    let mut weight = vec![None; nb];
    let mut lower = vec![0.0; nb];
    if let (Some(w), Some(y)) = (program.block("w"), program.block("y")) {
        for (b, &idx) in program.binary_idx.iter().enumerate() {
            if y.contains(&idx) && idx - y.start < w.len() {
                let i = idx - y.start;
                weight[b] = Some(w.start + i);
                let label = format!("wlb[{i}]");
                if let Some(row) = program.ineq_constraints.iter().find(|r| r.label == label) {
                    lower[b] = row
                        .terms
                        .iter()
                        .find(|(j, _)| *j == idx)
                        .map_or(0.0, |(_, c)| *c);
                }
            }
        }
    }
    Coupling { weight, lower }
}

fn fixed_program(
    program: &MixedConicProgram,
    coupling: &Coupling,
    fixings: &[Option<bool>],
) -> MixedConicProgram {
    let mut p = program.clone();
    for (b, fix) in fixings.iter().enumerate() {
        let Some(on) = *fix else { continue };
        let idx = program.binary_idx[b];
        let val = if on { 1.0 } else { 0.0 };
        p.vars[idx].lower = val;
        p.vars[idx].upper = val;
        if let Some(w) = coupling.weight[b] {
            let var = &mut p.vars[w];
            if on {
                var.lower = var.lower.max(coupling.lower[b]);
            } else {
                var.lower = 0.0;
                var.upper = 0.0;
            }
        }
    }
    p
}

/// Support of a binary vector: indices (into `binary_idx`) set to one.
fn support(program: &MixedConicProgram, x: &[f64]) -> Vec<usize> {
    program
        .binary_idx
        .iter()
        .enumerate()
        .filter(|(_, &i)| x[i] > 0.5)
        .map(|(b, _)| b)
        .collect()
}

fn better(obj: f64, supp: &[usize], best: Option<&(f64, Vec<usize>)>) -> bool {
    match best {
        None => true,
        Some((b_obj, b_supp)) => {
            let tol = TIE_TOL * b_obj.abs().max(1.0);
            obj < b_obj - tol || (obj <= b_obj + tol && supp < b_supp.as_slice())
        }
    }
}

struct Node {
    bound: f64,
    seq: usize,
    depth: usize,
    fixings: Vec<Option<bool>>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // Max-heap: reverse so the smallest bound, then the oldest node, pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Best-bound branch-and-bound over `binary_idx`.
///
/// Integral relaxations are polished by fixing the rounded binaries and
/// re-solving, so returned binaries are exactly 0 or 1. Among incumbents
/// whose objectives tie, the lexicographically smallest support wins.
/// When a subproblem fails numerically and its subtree could still beat the
/// incumbent, the incumbent is returned carrying that failure status.
pub fn branch_and_bound(program: &MixedConicProgram, cfg: &BnbConfig) -> Result<Solution> {
    if !(cfg.rel_gap_tol > 0.0) || cfg.max_nodes == 0 {
        return Err(Error::InvalidSpec("B&B tolerances must be positive".into()));
    }
    if program.binary_idx.is_empty() {
        return solve_continuous(program, &cfg.continuous);
    }
    let links = coupling(program);
    let nb = program.binary_idx.len();

    let mut heap = BinaryHeap::new();
    heap.push(Node {
        bound: f64::NEG_INFINITY,
        seq: 0,
        depth: 0,
        fixings: vec![None; nb],
    });
    let mut seq = 1;
    let mut nodes = 0;
    let mut incumbent: Option<(f64, Vec<usize>)> = None;
    let mut best: Option<Solution> = None;
    let mut trouble = None;
    // Smallest bound of a subtree whose leaf could not be solved reliably.
    let mut unresolved = f64::INFINITY;
    let mut trace = Vec::new();

    let prune_at = |inc: &Option<(f64, Vec<usize>)>| match inc {
        Some((obj, _)) => obj - cfg.rel_gap_tol * obj.abs().max(1.0),
        None => f64::INFINITY,
    };

    while let Some(node) = heap.pop() {
        if node.bound >= prune_at(&incumbent) {
            continue;
        }
        if nodes >= cfg.max_nodes {
            heap.push(node);
            break;
        }
        let id = nodes;
        nodes += 1;
        let sub = fixed_program(program, &links, &node.fixings);
        let relax = solve_continuous(&sub, &cfg.continuous)?;
        let bound = relax.objective;
        let mut record = |inc: &Option<(f64, Vec<usize>)>| {
            if cfg.trace {
                let rec = NodeRecord {
                    id,
                    depth: node.depth,
                    bound,
                    incumbent: inc.as_ref().map_or(f64::INFINITY, |(o, _)| *o),
                };
                log::trace!("{rec}");
                trace.push(rec);
            }
        };
        match relax.status {
            SolveStatus::Optimal => {}
            SolveStatus::Infeasible => {
                record(&incumbent);
                continue;
            }
            other => {
                record(&incumbent);
                let Some(lb) = fallback_bound(&sub, &cfg.continuous)? else {
                    continue;
                };
                let lb = lb.max(node.bound);
                if lb >= prune_at(&incumbent) {
                    continue;
                }
                // Split on the first free binary; a fully fixed node stays
                // unresolved.
                match node.fixings.iter().position(Option::is_none) {
                    Some(pick) => {
                        for on in [false, true] {
                            let mut fixings = node.fixings.clone();
                            fixings[pick] = Some(on);
                            heap.push(Node {
                                bound: lb,
                                seq,
                                depth: node.depth + 1,
                                fixings,
                            });
                            seq += 1;
                        }
                    }
                    None => {
                        trouble.get_or_insert(other);
                        unresolved = unresolved.min(lb);
                    }
                }
                continue;
            }
        }
        if bound >= prune_at(&incumbent) {
            record(&incumbent);
            continue;
        }

        let x = &relax.primal;
        let frac: Vec<(usize, f64)> = program
            .binary_idx
            .iter()
            .enumerate()
            .filter(|(b, _)| node.fixings[*b].is_none())
            .map(|(b, &i)| (b, x[i]))
            .filter(|(_, v)| (v - v.round()).abs() > INTEGRALITY_TOL)
            .collect();

        if frac.is_empty() {
            let fixings: Vec<Option<bool>> = program
                .binary_idx
                .iter()
                .map(|&i| Some(x[i] > 0.5))
                .collect();
            let leaf = fixed_program(program, &links, &fixings);
            let polished = if fixings == node.fixings {
                relax
            } else {
                solve_continuous(&leaf, &cfg.continuous)?
            };
            if polished.status == SolveStatus::Optimal {
                let supp = support(program, &polished.primal);
                if better(polished.objective, &supp, incumbent.as_ref()) {
                    incumbent = Some((polished.objective, supp));
                    best = Some(polished);
                }
            } else if polished.status != SolveStatus::Infeasible {
                if let Some(lb) = fallback_bound(&leaf, &cfg.continuous)? {
                    trouble.get_or_insert(polished.status);
                    unresolved = unresolved.min(lb.max(bound));
                }
            }
            record(&incumbent);
            continue;
        }
        record(&incumbent);

        let weight_of = |b: usize| links.weight[b].map_or(0.0, |w| x[w]);
        let pick = match cfg.branching {
            Branching::MostFractional => frac.iter().max_by(|a, b| {
                let fa = a.1.min(1.0 - a.1);
                let fb = b.1.min(1.0 - b.1);
                fa.total_cmp(&fb)
                    .then(weight_of(a.0).total_cmp(&weight_of(b.0)))
                    .then(b.0.cmp(&a.0))
            }),
            Branching::MaxWeight => frac.iter().max_by(|a, b| {
                weight_of(a.0)
                    .total_cmp(&weight_of(b.0))
                    .then(b.0.cmp(&a.0))
            }),
        }
        .map(|(b, _)| *b)
        .expect("fractional set is nonempty");

        for on in [false, true] {
            let mut fixings = node.fixings.clone();
            fixings[pick] = Some(on);
            heap.push(Node {
                bound,
                seq,
                depth: node.depth + 1,
                fixings,
            });
            seq += 1;
        }
    }

    let open_bound = heap
        .iter()
        .map(|n| n.bound)
        .fold(f64::INFINITY, f64::min);
    let hit_limit = !heap.is_empty() && open_bound < prune_at(&incumbent);
    let doubtful = unresolved < prune_at(&incumbent);
    match best {
        Some(mut sol) => {
            sol.bound = open_bound.min(unresolved).min(sol.objective);
            sol.status = match (hit_limit, doubtful) {
                (true, _) => SolveStatus::IterLimit,
                (false, true) => trouble.unwrap_or(SolveStatus::NumericalFailure),
                (false, false) => SolveStatus::Optimal,
            };
            sol.nodes = nodes;
            sol.trace = trace;
            Ok(sol)
        }
        None => Ok(Solution {
            status: match (hit_limit, trouble) {
                (true, _) => SolveStatus::IterLimit,
                (false, Some(t)) if unresolved < f64::INFINITY => t,
                _ => SolveStatus::Infeasible,
            },
            objective: f64::INFINITY,
            bound: open_bound.min(unresolved),
            nodes,
            trace,
            ..Solution::default()
        }),
    }
}

/// Lower bound for a subproblem whose conic solve failed: the optimum of its
/// empirical relaxation, `None` when that relaxation is infeasible, and minus
/// infinity when nothing better is known.
fn fallback_bound(sub: &MixedConicProgram, opts: &ContinuousOptions) -> Result<Option<f64>> {
    let Some(relaxed) = empirical_relaxation(sub) else {
        return Ok(Some(f64::NEG_INFINITY));
    };
    let sol = solve_continuous(&relaxed, opts)?;
    Ok(match sol.status {
        SolveStatus::Optimal => Some(sol.objective),
        SolveStatus::Infeasible => None,
        _ => Some(f64::NEG_INFINITY),
    })
}

pub const ENUMERATION_LIMIT: usize = 20;

/// Solves every support of size `cardinality` and keeps the best; ties go to
/// the lexicographically smallest support.
pub fn enumerate_exact(
    program: &MixedConicProgram,
    cardinality: usize,
    opts: &ContinuousOptions,
) -> Result<Solution> {
    let nb = program.binary_idx.len();
    if nb > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            n: nb,
            limit: ENUMERATION_LIMIT,
        });
    }
    let links = coupling(program);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut best_sol = None;
    let mut trouble = None;
    let mut unresolved = f64::INFINITY;
    let mut attempted = 0;
    for supp in (0..nb).combinations(cardinality) {
        let mut fixings = vec![Some(false); nb];
        for &b in &supp {
            fixings[b] = Some(true);
        }
        attempted += 1;
        let sub = fixed_program(program, &links, &fixings);
        let sol = solve_continuous(&sub, opts)?;
        match sol.status {
            SolveStatus::Optimal => {
                if better(sol.objective, &supp, best.as_ref()) {
                    best = Some((sol.objective, supp));
                    best_sol = Some(sol);
                }
            }
            SolveStatus::Infeasible => {}
            other => {
                if let Some(lb) = fallback_bound(&sub, opts)? {
                    trouble.get_or_insert(other);
                    unresolved = unresolved.min(lb);
                }
            }
        }
    }
    Ok(match best_sol {
        Some(mut sol) => {
            sol.nodes = attempted;
            let tol = 1e-9 * sol.objective.abs().max(1.0);
            if let Some(t) = trouble.filter(|_| unresolved < sol.objective - tol) {
                sol.status = t;
                sol.bound = unresolved;
            }
            sol
        }
        None => Solution {
            status: trouble.unwrap_or(SolveStatus::Infeasible),
            objective: f64::INFINITY,
            nodes: attempted,
            ..Solution::default()
        },
    })
}

/// Scenario shortfalls `(R* - r_j'w - lambda)^+` over the expansion points.
pub fn shortfalls(w: &[f64], lambda: f64, return_target: f64, amb: &AmbiguityConfig) -> Vec<f64> {
    amb.expansion
        .points()
        .iter()
        .map(|r| {
            let ret: f64 = r.iter().zip(w).map(|(a, b)| a * b).sum();
            (return_target - ret - lambda).max(0.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCase {
    pub value: f64,
    pub eta: Vec<f64>,
}

fn check_inputs(w: &[f64], amb: &AmbiguityConfig) -> Result<()> {
    if !(amb.alpha >= 0.0 && amb.alpha.is_finite()) {
        return Err(Error::InvalidRadius(amb.alpha));
    }
    if w.len() != amb.expansion.dim() {
        return Err(Error::DimMismatch {
            expected: amb.expansion.dim(),
            got: w.len(),
        });
    }
    Ok(())
}

fn expect_optimal(sol: Solution) -> Result<Solution> {
    match sol.status {
        SolveStatus::Optimal => Ok(sol),
        status => Err(Error::InvalidProgram(format!(
            "worst-case subproblem ended with {status:?}"
        ))),
    }
}

/// Worst-case expected shortfall over the MMD ball:
/// `max sum_j eta_j R_j` over distributions `eta` on the expansion points
/// with `mmd_sq(eta) <= alpha^2`, written as the cone
/// `|(L'eta, q'eta + c2)| <= q'eta + c1`.
pub fn worst_case_primal(
    w: &[f64],
    lambda: f64,
    return_target: f64,
    amb: &AmbiguityConfig,
) -> Result<WorstCase> {
    check_inputs(w, amb)?;
    let r = shortfalls(w, lambda, return_target, amb);
    let t = r.len();
    let l = amb.factors.lower();
    let q = amb.factors.sample_mean_row();
    let (c2, c1) = amb.beta_coefficients();

    let mut p = MixedConicProgram::default();
    let eta = p.add_block("eta", t, 0.0, f64::INFINITY);
    for j in 0..t {
        p.objective[eta.start + j] = -r[j];
    }
    p.add_eq("simplex", eta.clone().map(|i| (i, 1.0)).collect(), 1.0);
    let q_terms: Vec<(usize, f64)> = (0..t).map(|j| (eta.start + j, q[j])).collect();
    // (L' eta)_a = sum_j L[j, a] eta_j
    let mut head: Vec<AffineExpr> = (0..t)
        .map(|a| AffineExpr::new((a..t).map(|j| (eta.start + j, l[(j, a)])).collect(), 0.0))
        .collect();
    head.push(AffineExpr::new(q_terms.clone(), c2));
    p.add_soc("mmd", AffineExpr::new(q_terms, c1), head);

    let sol = expect_optimal(solve_continuous(&p, &ContinuousOptions::default())?)?;
    Ok(WorstCase {
        value: -sol.objective,
        eta: sol.primal,
    })
}

/// Dual variables of the worst-case problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPoint {
    pub omega: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub phi: Vec<f64>,
}

/// Conic dual of [`worst_case_primal`]:
/// `min -omega + c2 beta1 + c1 beta2` subject to
/// `omega + (L phi)_j + q_j (beta1 + beta2) <= -R_j` and
/// `|(phi, beta1)| <= beta2`.
pub fn worst_case_dual(
    w: &[f64],
    lambda: f64,
    return_target: f64,
    amb: &AmbiguityConfig,
) -> Result<(f64, DualPoint)> {
    check_inputs(w, amb)?;
    let r = shortfalls(w, lambda, return_target, amb);
    let t = r.len();
    let l = amb.factors.lower();
    let q = amb.factors.sample_mean_row();
    let (c2, c1) = amb.beta_coefficients();

    let free = (f64::NEG_INFINITY, f64::INFINITY);
    let mut p = MixedConicProgram::default();
    let omega = p.add_scalar("omega", free.0, free.1);
    let beta1 = p.add_scalar("beta1", free.0, free.1);
    let beta2 = p.add_scalar("beta2", free.0, free.1);
    let phi = p.add_block("phi", t, free.0, free.1);
    p.objective[omega] = -1.0;
    p.objective[beta1] = c2;
    p.objective[beta2] = c1;
    for j in 0..t {
        let mut terms = vec![(omega, 1.0), (beta1, q[j]), (beta2, q[j])];
        terms.extend((0..=j).map(|a| (phi.start + a, l[(j, a)])));
        p.add_le(format!("dual[{j}]"), terms, -r[j]);
    }
    let mut head: Vec<AffineExpr> = phi.clone().map(AffineExpr::var).collect();
    head.push(AffineExpr::var(beta1));
    p.add_soc("mmd", AffineExpr::var(beta2), head);

    let sol = expect_optimal(solve_continuous(&p, &ContinuousOptions::default())?)?;
    let x = &sol.primal;
    Ok((
        sol.objective,
        DualPoint {
            omega: x[omega],
            beta1: x[beta1],
            beta2: x[beta2],
            phi: x[phi].to_vec(),
        },
    ))
}

/// Dual objective at a point, or `None` if the point violates the dual rows
/// or cone by more than `tol`.
pub fn dual_objective_at(
    point: &DualPoint,
    w: &[f64],
    lambda: f64,
    return_target: f64,
    amb: &AmbiguityConfig,
    tol: f64,
) -> Option<f64> {
    let r = shortfalls(w, lambda, return_target, amb);
    let l = amb.factors.lower();
    let q = amb.factors.sample_mean_row();
    let (c2, c1) = amb.beta_coefficients();
    for j in 0..r.len() {
        let lphi: f64 = (0..=j).map(|a| l[(j, a)] * point.phi[a]).sum();
        if point.omega + lphi + q[j] * (point.beta1 + point.beta2) + r[j] > tol {
            return None;
        }
    }
    let head = point.phi.iter().map(|v| v * v).sum::<f64>() + point.beta1 * point.beta1;
    if head.sqrt() > point.beta2 + tol {
        return None;
    }
    Some(-point.omega + c2 * point.beta1 + c1 * point.beta2)
}
