//! Out-of-sample performance measures.
//!
//! Standard deviations use the population `1/T` normalization. Ratios whose
//! denominator vanishes (or has the wrong sign) are reported as `None`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::risk::{empirical_cvar, empirical_var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsConfig {
    pub risk_free: f64,
    /// Omega threshold `TP`.
    pub threshold: f64,
    pub tail_level: f64,
    /// Report downside over upside instead of upside over downside.
    pub omega_as_printed: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            risk_free: 0.0,
            threshold: 0.0,
            tail_level: 0.05,
            omega_as_printed: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn covariance(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / x.len() as f64
}

pub fn summary_stats(returns: &[f64]) -> Result<Summary> {
    if returns.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mut sorted = returns.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    let median = if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    };
    Ok(Summary {
        max: sorted[k - 1],
        min: sorted[0],
        mean: mean(returns),
        median,
        sd: covariance(returns, returns).sqrt(),
    })
}

/// `(VaR, CVaR)` of the losses `-returns` under uniform weights.
pub fn tail_metrics(returns: &[f64], level: f64) -> Result<(f64, f64)> {
    if returns.is_empty() {
        return Err(Error::EmptySeries);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidLevel(level));
    }
    let losses: Vec<f64> = returns.iter().map(|r| -r).collect();
    let probs = vec![1.0 / losses.len() as f64; losses.len()];
    Ok((
        empirical_var(&losses, &probs, level)?,
        empirical_cvar(&losses, &probs, level)?,
    ))
}

/// Slope of the population regression of `portfolio` on `market`.
pub fn ols_beta(portfolio: &[f64], market: &[f64]) -> Result<f64> {
    if portfolio.len() != market.len() {
        return Err(Error::DimMismatch {
            expected: portfolio.len(),
            got: market.len(),
        });
    }
    if portfolio.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: portfolio.len(),
        });
    }
    let var = covariance(market, market);
    if var == 0.0 {
        return Err(Error::DegenerateMarket);
    }
    Ok(covariance(portfolio, market) / var)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Ratios {
    pub starr: Option<f64>,
    pub sharpe: Option<f64>,
    pub treynor: Option<f64>,
    pub jensen: Option<f64>,
    pub omega: Option<f64>,
    pub sortino: Option<f64>,
    pub beta: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

pub fn ratio_metrics(returns: &[f64], market: Option<&[f64]>, cfg: &MetricsConfig) -> Result<Ratios> {
    let s = summary_stats(returns)?;
    let (_, cvar) = tail_metrics(returns, cfg.tail_level)?;
    let excess = s.mean - cfg.risk_free;
    let k = returns.len() as f64;

    let below = returns
        .iter()
        .map(|r| (s.mean - r).max(0.0).powi(2))
        .sum::<f64>()
        / k;
    let up = returns.iter().map(|r| (r - cfg.threshold).max(0.0)).sum::<f64>() / k;
    let down = returns.iter().map(|r| (cfg.threshold - r).max(0.0)).sum::<f64>() / k;
    let omega = if cfg.omega_as_printed {
        ratio(down, up)
    } else {
        ratio(up, down)
    };

    let beta = match market {
        Some(m) => match ols_beta(returns, m) {
            Ok(b) => Some(b),
            Err(Error::DegenerateMarket | Error::InsufficientData { .. }) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    let treynor = beta.and_then(|b| (b != 0.0).then(|| excess / b));
    let jensen = beta.map(|b| {
        let mm = mean(market.expect("beta implies market"));
        s.mean - (cfg.risk_free + b * (mm - cfg.risk_free))
    });

    Ok(Ratios {
        starr: ratio(excess, cvar),
        sharpe: ratio(excess, s.sd),
        treynor,
        jensen,
        omega,
        sortino: ratio(excess, below.sqrt()),
        beta,
    })
}

/// The thirteen reported measures of one return series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsTable {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub tail_level: f64,
    pub var: f64,
    pub cvar: f64,
    pub starr: Option<f64>,
    pub sharpe: Option<f64>,
    pub treynor: Option<f64>,
    pub jensen: Option<f64>,
    pub omega: Option<f64>,
    pub sortino: Option<f64>,
    pub beta: Option<f64>,
}

impl MetricsTable {
    pub fn compute(returns: &[f64], market: Option<&[f64]>, cfg: &MetricsConfig) -> Result<Self> {
        let s = summary_stats(returns)?;
        let (var, cvar) = tail_metrics(returns, cfg.tail_level)?;
        let r = ratio_metrics(returns, market, cfg)?;
        Ok(Self {
            max: s.max,
            min: s.min,
            mean: s.mean,
            median: s.median,
            sd: s.sd,
            tail_level: cfg.tail_level,
            var,
            cvar,
            starr: r.starr,
            sharpe: r.sharpe,
            treynor: r.treynor,
            jensen: r.jensen,
            omega: r.omega,
            sortino: r.sortino,
            beta: r.beta,
        })
    }

    /// Rows in report order.
    pub fn rows(&self) -> Vec<(String, Option<f64>)> {
        let l = self.tail_level;
        vec![
            ("MAX".into(), Some(self.max)),
            ("MIN".into(), Some(self.min)),
            ("MEAN".into(), Some(self.mean)),
            ("MEDIAN".into(), Some(self.median)),
            ("SD".into(), Some(self.sd)),
            (format!("VAR {l}"), Some(self.var)),
            (format!("CVAR {l}"), Some(self.cvar)),
            (format!("STARR {l}"), self.starr),
            ("SHARPE".into(), self.sharpe),
            ("TREYNOR".into(), self.treynor),
            ("JENSEN".into(), self.jensen),
            ("OMEGA".into(), self.omega),
            ("SORTINO".into(), self.sortino),
        ]
    }
}

pub const UNDEFINED: &str = "NA";

/// Fixed-width table with every value multiplied by 10^3.
pub fn render_table(tables: &[(String, MetricsTable)]) -> String {
    let mut out = String::from("(values x 10^-3)\n");
    let _ = write!(out, "{:<12}", "");
    for (name, _) in tables {
        let _ = write!(out, "{name:>16}");
    }
    out.push('\n');
    let rows: Vec<Vec<(String, Option<f64>)>> = tables.iter().map(|(_, t)| t.rows()).collect();
    let Some(first) = rows.first() else {
        return out;
    };
    for (r, (label, _)) in first.iter().enumerate() {
        let _ = write!(out, "{label:<12}");
        for row in &rows {
            match row[r].1 {
                Some(v) => {
                    let _ = write!(out, "{:>16.4}", v * 1e3);
                }
                None => {
                    let _ = write!(out, "{UNDEFINED:>16}");
                }
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn summary_fixtures() {
        let s = summary_stats(&[0.1, -0.1]).unwrap();
        assert_eq!((s.mean, s.median), (0.0, 0.0));
        assert!((s.sd - 0.1).abs() < 1e-15);

        let c = summary_stats(&[0.3; 4]).unwrap();
        assert_eq!((c.max, c.min, c.median, c.sd), (0.3, 0.3, 0.3, 0.0));
        assert!((c.mean - 0.3).abs() < 1e-15);

        let one = summary_stats(&[-2.5]).unwrap();
        assert_eq!((one.max, one.min, one.mean, one.median, one.sd), (-2.5, -2.5, -2.5, -2.5, 0.0));

        assert!(matches!(summary_stats(&[]), Err(Error::EmptySeries)));
    }

    #[test]
    fn tail_fixtures() {
        let r: Vec<f64> = [-5.0, -4.0, -3.0, -2.0, -1.0].iter().map(|x| x * 1e-3).collect();
        let (var, cvar) = tail_metrics(&r, 0.2).unwrap();
        assert!((var - 4e-3).abs() < 1e-15);
        assert!((cvar - 5e-3).abs() < 1e-15);

        let (v, c) = tail_metrics(&[0.01, 0.02, 0.03, 0.04], 0.5).unwrap();
        assert!(v < 0.0 && c < 0.0);

        assert!(matches!(tail_metrics(&r, 0.0), Err(Error::InvalidLevel(_))));
    }

    #[test]
    fn omega_fixture() {
        let r = [0.02, 0.02, -0.01];
        let m = ratio_metrics(&r, None, &MetricsConfig::default()).unwrap();
        assert!((m.omega.unwrap() - 4.0).abs() < 1e-12);
        let printed = MetricsConfig {
            omega_as_printed: true,
            ..MetricsConfig::default()
        };
        let p = ratio_metrics(&r, None, &printed).unwrap();
        assert!((p.omega.unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn undefined_ratios() {
        let m = ratio_metrics(&[0.01; 5], Some(&[0.02; 5]), &MetricsConfig::default()).unwrap();
        assert_eq!(m.sharpe, None);
        assert_eq!(m.sortino, None);
        assert_eq!(m.omega, None);
        assert_eq!(m.beta, None);
        assert_eq!(m.treynor, None);
        assert_eq!(m.starr, None);
    }

    #[test]
    fn beta_fixtures() {
        let m = [0.01, -0.02, 0.03, 0.0];
        let p: Vec<f64> = m.iter().map(|x| 2.0 * x).collect();
        assert!((ols_beta(&p, &m).unwrap() - 2.0).abs() < 1e-12);

        let a = [1.0, -1.0, 1.0, -1.0];
        let b = [1.0, 1.0, -1.0, -1.0];
        assert_eq!(ols_beta(&a, &b).unwrap(), 0.0);

        assert!(matches!(ols_beta(&a, &[0.5; 4]), Err(Error::DegenerateMarket)));
    }

    #[test]
    fn self_regression() {
        let r = [0.01, -0.02, 0.015, 0.003, -0.007];
        let m = ratio_metrics(&r, Some(&r), &MetricsConfig::default()).unwrap();
        assert_eq!(m.beta, Some(1.0));
        assert_eq!(m.jensen, Some(0.0));
    }

    #[test]
    fn sortino_uses_mean_as_reference() {
        // mean 0.01; below-mean deviations 0.01 and 0.02 over 6 periods.
        let r = [0.03, 0.01, 0.0, -0.01, 0.02, 0.01];
        let m = ratio_metrics(&r, None, &MetricsConfig::default()).unwrap();
        let den = ((0.01f64.powi(2) + 0.02f64.powi(2)) / 6.0).sqrt();
        assert!((m.sortino.unwrap() - 0.01 / den).abs() < 1e-9);
    }

    #[test]
    fn render_marks_undefined() {
        let t = MetricsTable::compute(&[0.01; 3], None, &MetricsConfig::default()).unwrap();
        let text = render_table(&[("flat".into(), t)]);
        assert!(text.contains("SHARPE"));
        assert!(text.contains(UNDEFINED));
        assert!(text.contains("10.0000"));
    }

    proptest! {
        #[test]
        fn scale_equivariance(
            r in prop::collection::vec(-0.1f64..0.1, 8..40),
            a in 0.1f64..10.0,
        ) {
            let cfg = MetricsConfig::default();
            let base = MetricsTable::compute(&r, None, &cfg).unwrap();
            let scaled: Vec<f64> = r.iter().map(|x| a * x).collect();
            let s = MetricsTable::compute(&scaled, None, &cfg).unwrap();
            prop_assert!((s.mean - a * base.mean).abs() < 1e-12);
            prop_assert!((s.sd - a * base.sd).abs() < 1e-12);
            if let (Some(x), Some(y)) = (base.sharpe, s.sharpe) {
                prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
            }
            if let (Some(x), Some(y)) = (base.omega, s.omega) {
                prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
            }
            prop_assert!(base.cvar >= base.var - 1e-15);
            prop_assert!(base.min <= base.median && base.median <= base.max);
        }

        #[test]
        fn tail_non_increasing_in_level(r in prop::collection::vec(-0.1f64..0.1, 5..40)) {
            let (v1, c1) = tail_metrics(&r, 0.05).unwrap();
            let (v2, c2) = tail_metrics(&r, 0.2).unwrap();
            prop_assert!(v2 <= v1 + 1e-15);
            prop_assert!(c2 <= c1 + 1e-15);
        }
    }
}
