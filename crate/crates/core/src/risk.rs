//! Empirical VaR, CVaR and mixed CVaR on discrete loss distributions.
//!
//! Losses are `-return`. For a significance level `delta`:
//!
//! * `VaR_delta = inf { l : P(L > l) <= delta }`
//! * `CVaR_delta = min_g g + E[(L - g)^+] / delta`, which is attained at
//!   `g = VaR_delta`. This splits the boundary atom fractionally, so it agrees
//!   with the linear-programming value used by the nominal model.

use crate::error::{Error, Result};

const PROB_TOL: f64 = 1e-12;

/// Confidence levels and weights of a mixed CVaR.
#[derive(Debug, Clone, PartialEq)]
pub struct McvarSpec {
    levels: Vec<f64>,
    weights: Vec<f64>,
}

impl McvarSpec {
    /// Levels must be strictly decreasing in `(0, 1)`; weights positive and
    /// summing to one.
    pub fn new(levels: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidSpec("at least one level is required".into()));
        }
        if levels.len() != weights.len() {
            return Err(Error::InvalidSpec(format!(
                "{} levels but {} weights",
                levels.len(),
                weights.len()
            )));
        }
        if let Some(l) = levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
            return Err(Error::InvalidSpec(format!("level {l} outside (0, 1)")));
        }
        if levels.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidSpec(
                "levels must be strictly decreasing".into(),
            ));
        }
        if let Some(t) = weights.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::InvalidSpec(format!("weight {t} outside (0, 1]")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidSpec(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { levels, weights })
    }

    /// Levels 0.05 > 0.03 > 0.01 with weights 0.40, 0.48, 0.12.
    pub fn standard() -> Self {
        Self::new(vec![0.05, 0.03, 0.01], vec![0.40, 0.48, 0.12]).expect("valid default")
    }

    pub fn single(level: f64) -> Result<Self> {
        Self::new(vec![level], vec![1.0])
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

pub(crate) fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::EmptyScenarios);
    }
    if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("probability {p}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_TOL * probs.len().max(1) as f64 {
        return Err(Error::InvalidDistribution(format!(
            "probabilities sum to {total}"
        )));
    }
    Ok(())
}

fn check_inputs(losses: &[f64], probs: &[f64], delta: f64) -> Result<()> {
    if losses.is_empty() {
        return Err(Error::EmptyScenarios);
    }
    if losses.len() != probs.len() {
        return Err(Error::DimMismatch {
            expected: losses.len(),
            got: probs.len(),
        });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidLevel(delta));
    }
    check_distribution(probs)
}

pub fn empirical_var(losses: &[f64], probs: &[f64], delta: f64) -> Result<f64> {
    check_inputs(losses, probs, delta)?;
    Ok(var_unchecked(losses, probs, delta))
}

fn var_unchecked(losses: &[f64], probs: &[f64], delta: f64) -> f64 {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));

    // descending scan; `above` is P(L > current value)
    let mut above = 0.0;
    let mut k = 0;
    let mut var = losses[order[0]];
    while k < order.len() {
        let value = losses[order[k]];
        if above > delta + PROB_TOL {
            break;
        }
        var = value;
        while k < order.len() && losses[order[k]] == value {
            above += probs[order[k]];
            k += 1;
        }
    }
    var
}

pub fn empirical_cvar(losses: &[f64], probs: &[f64], delta: f64) -> Result<f64> {
    check_inputs(losses, probs, delta)?;
    Ok(cvar_unchecked(losses, probs, delta))
}

fn cvar_unchecked(losses: &[f64], probs: &[f64], delta: f64) -> f64 {
    let var = var_unchecked(losses, probs, delta);
    let excess: f64 = losses
        .iter()
        .zip(probs)
        .map(|(l, p)| p * (l - var).max(0.0))
        .sum();
    var + excess / delta
}

/// `sum_k theta_k CVaR_{delta_k}`.
pub fn mcvar(losses: &[f64], probs: &[f64], spec: &McvarSpec) -> Result<f64> {
    check_inputs(losses, probs, spec.levels[0])?;
    Ok(spec
        .levels
        .iter()
        .zip(&spec.weights)
        .map(|(&d, &t)| t * cvar_unchecked(losses, probs, d))
        .sum())
}

/// Rockafellar–Uryasev objective `g + E[(L - g)^+] / delta`.
pub fn ru_objective(losses: &[f64], probs: &[f64], delta: f64, gamma: f64) -> f64 {
    gamma
        + losses
            .iter()
            .zip(probs)
            .map(|(l, p)| p * (l - gamma).max(0.0))
            .sum::<f64>()
            / delta
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    /// Average of the worst `delta` probability mass, splitting the boundary
    /// atom.
    fn worst_mass_oracle(losses: &[f64], probs: &[f64], delta: f64) -> f64 {
        let mut pairs: Vec<(f64, f64)> = losses.iter().copied().zip(probs.iter().copied()).collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut remaining = delta;
        let mut acc = 0.0;
        for (l, p) in pairs {
            let take = p.min(remaining);
            acc += take * l;
            remaining -= take;
            if remaining <= 0.0 {
                break;
            }
        }
        acc / delta
    }

    /// Ternary search of the convex RU objective over the loss range.
    fn ternary_oracle(losses: &[f64], probs: &[f64], delta: f64) -> f64 {
        let mut lo = losses.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
        let mut hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
        for _ in 0..300 {
            let a = lo + (hi - lo) / 3.0;
            let b = hi - (hi - lo) / 3.0;
            if ru_objective(losses, probs, delta, a) <= ru_objective(losses, probs, delta, b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        // the minimizer set may be an interval; evaluate at the vertices too
        let g = 0.5 * (lo + hi);
        losses
            .iter()
            .map(|&v| ru_objective(losses, probs, delta, v))
            .fold(ru_objective(losses, probs, delta, g), f64::min)
    }

    const FIVE: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];

    #[test]
    fn var_fixtures() {
        assert_eq!(empirical_var(&FIVE, &uniform(5), 0.2).unwrap(), 4.0);
        assert_eq!(empirical_var(&[7.0; 4], &uniform(4), 0.3).unwrap(), 7.0);
        // P(L > 2) = 0.6 > 0.5, P(L > 3) = 0.4 <= 0.5
        assert_eq!(empirical_var(&FIVE, &uniform(5), 0.5).unwrap(), 3.0);
    }

    #[test]
    fn cvar_fixtures() {
        assert_abs_diff_eq!(empirical_cvar(&FIVE, &uniform(5), 0.2).unwrap(), 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(empirical_cvar(&[7.0; 3], &uniform(3), 0.1).unwrap(), 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(empirical_cvar(&FIVE, &uniform(5), 0.4).unwrap(), 4.5, epsilon = 1e-12);
    }

    #[test]
    fn mcvar_fixtures() {
        let single = McvarSpec::single(0.2).unwrap();
        assert_eq!(
            mcvar(&FIVE, &uniform(5), &single).unwrap(),
            empirical_cvar(&FIVE, &uniform(5), 0.2).unwrap()
        );
        let spec = McvarSpec::standard();
        assert_abs_diff_eq!(mcvar(&FIVE, &uniform(5), &spec).unwrap(), 5.0, epsilon = 1e-12);
        assert!(matches!(
            McvarSpec::new(vec![0.05, 0.01], vec![0.5, 0.4]),
            Err(Error::InvalidSpec(_))
        ));
        assert!(McvarSpec::new(vec![0.01, 0.05], vec![0.5, 0.5]).is_err());
        assert!(McvarSpec::new(vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn error_paths() {
        assert!(matches!(empirical_var(&[], &[], 0.1), Err(Error::EmptyScenarios)));
        assert!(matches!(
            empirical_cvar(&[1.0], &[1.0], 0.0),
            Err(Error::InvalidLevel(_))
        ));
        assert!(empirical_cvar(&[1.0, 2.0], &[0.7, 0.7], 0.1).is_err());
    }

    #[test]
    fn fractional_atom_split() {
        // worst 30% of uniform quintiles: 5 fully (0.2), then half of the 4 atom
        let c = empirical_cvar(&FIVE, &uniform(5), 0.3).unwrap();
        assert_abs_diff_eq!(c, (0.2 * 5.0 + 0.1 * 4.0) / 0.3, epsilon = 1e-12);
    }

    fn losses_and_probs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-1.0f64..1.0, n),
                prop::collection::vec(0.01f64..1.0, n),
            )
                .prop_map(|(l, w)| {
                    let s: f64 = w.iter().sum();
                    (l, w.iter().map(|x| x / s).collect())
                })
        })
    }

    proptest! {
        #[test]
        fn cvar_matches_independent_oracles((l, p) in losses_and_probs(), delta in 0.01f64..0.99) {
            let c = empirical_cvar(&l, &p, delta).unwrap();
            prop_assert!((c - worst_mass_oracle(&l, &p, delta)).abs() < 1e-9);
            prop_assert!((c - ternary_oracle(&l, &p, delta)).abs() < 1e-9);
        }

        #[test]
        fn cvar_dominates_var((l, p) in losses_and_probs(), delta in 0.01f64..0.99) {
            prop_assert!(empirical_cvar(&l, &p, delta).unwrap() >= empirical_var(&l, &p, delta).unwrap() - 1e-12);
        }

        #[test]
        fn cvar_monotone_in_level((l, p) in losses_and_probs(), a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(empirical_cvar(&l, &p, lo).unwrap() >= empirical_cvar(&l, &p, hi).unwrap() - 1e-12);
        }

        #[test]
        fn cvar_homogeneous_and_translation((l, p) in losses_and_probs(), delta in 0.01f64..0.99,
                                            a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let moved: Vec<f64> = l.iter().map(|x| a * x + b).collect();
            let lhs = empirical_cvar(&moved, &p, delta).unwrap();
            let rhs = a * empirical_cvar(&l, &p, delta).unwrap() + b;
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()));
        }
    }
}
