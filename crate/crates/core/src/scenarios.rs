//! Price ingestion, simple returns and rolling window plans.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Closing prices of one asset on a strictly increasing date grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    asset_id: String,
    timestamps: Vec<NaiveDate>,
    closes: Vec<f64>,
}

impl PriceSeries {
    pub fn new(
        asset_id: impl Into<String>,
        timestamps: Vec<NaiveDate>,
        closes: Vec<f64>,
    ) -> Result<Self> {
        let asset_id = asset_id.into();
        if timestamps.len() != closes.len() {
            return Err(Error::InvalidSeries(
                asset_id,
                format!("{} dates but {} closes", timestamps.len(), closes.len()),
            ));
        }
        if let Some(w) = timestamps.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSeries(
                asset_id,
                format!("dates not strictly increasing at {}", w[1]),
            ));
        }
        if let Some((index, &value)) = closes
            .iter()
            .enumerate()
            .find(|(_, c)| !(c.is_finite() && **c > 0.0))
        {
            return Err(Error::InvalidPrice {
                asset: asset_id,
                index,
                value,
            });
        }
        Ok(Self {
            asset_id,
            timestamps,
            closes,
        })
    }

    /// Series without date information; dates are synthesized weekly from
    /// 2000-01-03 so the series can be aligned with others built the same way.
    pub fn undated(asset_id: impl Into<String>, closes: Vec<f64>) -> Result<Self> {
        let start = NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date");
        let timestamps = (0..closes.len())
            .map(|k| start + chrono::Duration::weeks(k as i64))
            .collect();
        Self::new(asset_id, timestamps, closes)
    }

    pub fn asset_id(&self) -> &str {
        &self.asset_id
    }

    pub fn timestamps(&self) -> &[NaiveDate] {
        &self.timestamps
    }

    pub fn closes(&self) -> &[f64] {
        &self.closes
    }

    pub fn len(&self) -> usize {
        self.closes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.closes.is_empty()
    }

    /// Keeps observations with `start <= date <= end`.
    pub fn restrict(&self, start: Option<NaiveDate>, end: Option<NaiveDate>) -> Self {
        let keep = |d: &NaiveDate| start.map_or(true, |s| *d >= s) && end.map_or(true, |e| *d <= e);
        let (timestamps, closes) = self
            .timestamps
            .iter()
            .zip(&self.closes)
            .filter(|(d, _)| keep(d))
            .map(|(d, c)| (*d, *c))
            .unzip();
        Self {
            asset_id: self.asset_id.clone(),
            timestamps,
            closes,
        }
    }
}

/// Simple per-period returns `(C_j - C_{j-1}) / C_{j-1}`.
pub fn compute_returns(prices: &PriceSeries) -> Result<Vec<f64>> {
    simple_returns(prices.asset_id(), prices.closes())
}

fn simple_returns(asset: &str, closes: &[f64]) -> Result<Vec<f64>> {
    if closes.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: closes.len(),
        });
    }
    if let Some((index, &value)) = closes
        .iter()
        .enumerate()
        .find(|(_, c)| !(c.is_finite() && **c > 0.0))
    {
        return Err(Error::InvalidPrice {
            asset: asset.to_string(),
            index,
            value,
        });
    }
    Ok(closes.windows(2).map(|w| (w[1] - w[0]) / w[0]).collect())
}

/// Per-asset, per-period returns with scenario probabilities.
///
/// `returns` is `n x T`: row `i` is asset `i`, column `j` is period `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioMatrix {
    returns: DMatrix<f64>,
    probs: Vec<f64>,
    asset_ids: Vec<String>,
    dates: Option<Vec<NaiveDate>>,
}

impl ScenarioMatrix {
    pub fn new(returns: DMatrix<f64>, probs: Vec<f64>, asset_ids: Vec<String>) -> Result<Self> {
        let (n, t) = returns.shape();
        if n == 0 || t == 0 {
            return Err(Error::EmptyScenarios);
        }
        if asset_ids.len() != n {
            return Err(Error::DimMismatch {
                expected: n,
                got: asset_ids.len(),
            });
        }
        if probs.len() != t {
            return Err(Error::DimMismatch {
                expected: t,
                got: probs.len(),
            });
        }
        crate::risk::check_distribution(&probs)?;
        if returns.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidSpec("non-finite return entry".into()));
        }
        Ok(Self {
            returns,
            probs,
            asset_ids,
            dates: None,
        })
    }

    /// Uniform probabilities `1/T`.
    pub fn uniform(returns: DMatrix<f64>, asset_ids: Vec<String>) -> Result<Self> {
        let t = returns.ncols();
        let probs = vec![1.0 / t.max(1) as f64; t];
        Self::new(returns, probs, asset_ids)
    }

    /// Builds from per-asset rows.
    pub fn from_rows(rows: &[Vec<f64>], asset_ids: Vec<String>) -> Result<Self> {
        let n = rows.len();
        let t = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != t) {
            return Err(Error::DimMismatch {
                expected: t,
                got: bad.len(),
            });
        }
        Self::uniform(DMatrix::from_fn(n, t, |i, j| rows[i][j]), asset_ids)
    }

    pub fn with_dates(mut self, dates: Vec<NaiveDate>) -> Result<Self> {
        if dates.len() != self.periods() {
            return Err(Error::DimMismatch {
                expected: self.periods(),
                got: dates.len(),
            });
        }
        self.dates = Some(dates);
        Ok(self)
    }

    pub fn n_assets(&self) -> usize {
        self.returns.nrows()
    }

    pub fn periods(&self) -> usize {
        self.returns.ncols()
    }

    pub fn returns(&self) -> &DMatrix<f64> {
        &self.returns
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    pub fn dates(&self) -> Option<&[NaiveDate]> {
        self.dates.as_deref()
    }

    pub fn get(&self, asset: usize, period: usize) -> f64 {
        self.returns[(asset, period)]
    }

    /// Return vector of all assets in one period.
    pub fn scenario(&self, period: usize) -> Vec<f64> {
        self.returns.column(period).iter().copied().collect()
    }

    /// `R_j(w) = sum_i r_ij w_i` for every period.
    pub fn portfolio_returns(&self, weights: &[f64]) -> Vec<f64> {
        (0..self.periods())
            .map(|j| {
                weights
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * self.returns[(i, j)])
                    .sum()
            })
            .collect()
    }

    /// Sub-matrix over a range of periods, re-weighted uniformly.
    pub fn slice_periods(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.periods() || range.is_empty() {
            return Err(Error::OutOfRange {
                index: range.end,
                len: self.periods(),
            });
        }
        let block = self
            .returns
            .columns(range.start, range.len())
            .into_owned();
        let mut out = Self::uniform(block, self.asset_ids.clone())?;
        out.dates = self.dates.as_ref().map(|d| d[range].to_vec());
        Ok(out)
    }

    /// Drops one asset row, returning it alongside the reduced matrix.
    pub fn split_off_asset(&self, asset_id: &str) -> Result<(Self, Vec<f64>)> {
        let idx = self
            .asset_ids
            .iter()
            .position(|a| a == asset_id)
            .ok_or_else(|| Error::config("data.benchmark", format!("asset {asset_id} not found")))?;
        let row = self.returns.row(idx).iter().copied().collect();
        let returns = self.returns.clone().remove_row(idx);
        let mut ids = self.asset_ids.clone();
        ids.remove(idx);
        let mut out = Self::new(returns, self.probs.clone(), ids)?;
        out.dates = self.dates.clone();
        Ok((out, row))
    }
}

/// Inner-joins price series on their dates and converts them to returns.
///
/// Rows are ordered by asset id; probabilities are uniform.
pub fn align_assets(series: &[PriceSeries]) -> Result<ScenarioMatrix> {
    if series.is_empty() {
        return Err(Error::EmptyScenarios);
    }
    let mut seen = HashSet::new();
    for s in series {
        if !seen.insert(s.asset_id()) {
            return Err(Error::DuplicateAsset(s.asset_id().to_string()));
        }
    }
    let mut common: BTreeSet<NaiveDate> = series[0].timestamps().iter().copied().collect();
    for s in &series[1..] {
        let dates: BTreeSet<NaiveDate> = s.timestamps().iter().copied().collect();
        common = common.intersection(&dates).copied().collect();
    }
    if common.is_empty() {
        return Err(Error::NoCommonDates);
    }
    let mut ordered: Vec<&PriceSeries> = series.iter().collect();
    ordered.sort_by(|a, b| a.asset_id().cmp(b.asset_id()));

    let dates: Vec<NaiveDate> = common.into_iter().collect();
    let mut rows = Vec::with_capacity(ordered.len());
    for s in &ordered {
        let closes: Vec<f64> = s
            .timestamps()
            .iter()
            .zip(s.closes())
            .filter(|(d, _)| dates.binary_search(d).is_ok())
            .map(|(_, c)| *c)
            .collect();
        rows.push(simple_returns(s.asset_id(), &closes)?);
    }
    let ids = ordered.iter().map(|s| s.asset_id().to_string()).collect();
    ScenarioMatrix::from_rows(&rows, ids)?.with_dates(dates[1..].to_vec())
}

/// One in-sample / out-of-sample split, as half-open period ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub in_start: usize,
    pub in_end: usize,
    pub out_start: usize,
    pub out_end: usize,
}

impl Window {
    pub fn in_range(&self) -> Range<usize> {
        self.in_start..self.in_end
    }

    pub fn out_range(&self) -> Range<usize> {
        self.out_start..self.out_end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub windows: Vec<Window>,
    pub in_len: usize,
    pub out_len: usize,
    pub step: usize,
}

impl WindowPlan {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Rolling windows: in-sample of `in_len` periods immediately followed by
/// `out_len` out-of-sample periods, advancing by `step`.
pub fn make_windows(
    total_periods: usize,
    in_len: usize,
    out_len: usize,
    step: usize,
) -> Result<WindowPlan> {
    if in_len == 0 || out_len == 0 || step == 0 {
        return Err(Error::InvalidSpec(
            "window lengths and step must be positive".into(),
        ));
    }
    if total_periods < in_len + out_len {
        return Err(Error::InsufficientData {
            needed: in_len + out_len,
            got: total_periods,
        });
    }
    let count = (total_periods - in_len - out_len) / step + 1;
    let windows = (0..count)
        .map(|k| {
            let in_start = k * step;
            Window {
                in_start,
                in_end: in_start + in_len,
                out_start: in_start + in_len,
                out_end: in_start + in_len + out_len,
            }
        })
        .collect();
    Ok(WindowPlan {
        windows,
        in_len,
        out_len,
        step,
    })
}

/// Reads closing prices from a delimited text file.
///
/// Long format has the header `date,asset,close`; anything else whose first
/// column is `date` is read as wide format with one column per asset. Empty
/// cells in wide format are treated as missing observations.
pub fn load_prices(path: &Path) -> Result<Vec<PriceSeries>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_prices(&text)
}

pub fn parse_prices(text: &str) -> Result<Vec<PriceSeries>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let lower: Vec<String> = header.iter().map(|h| h.to_ascii_lowercase()).collect();
    if lower.first().map(String::as_str) != Some("date") {
        return Err(Error::Parse("first column must be `date`".into()));
    }

    let mut per_asset: BTreeMap<String, BTreeMap<NaiveDate, f64>> = BTreeMap::new();
    let is_long = lower.len() == 3 && lower[1] == "asset" && lower[2] == "close";
    for (line, record) in reader.records().enumerate() {
        // header is line 1
        let line = line + 2;
        let record = record.map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        let date = parse_date(&record[0]).map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        if is_long {
            let asset = record[1].to_string();
            let close = parse_close(&record[2], line)?;
            if per_asset
                .entry(asset.clone())
                .or_default()
                .insert(date, close)
                .is_some()
            {
                return Err(Error::Parse(format!(
                    "line {line}: duplicate row for ({date}, {asset})"
                )));
            }
        } else {
            for (col, cell) in record.iter().enumerate().skip(1) {
                if cell.is_empty() {
                    continue;
                }
                let close = parse_close(cell, line)?;
                if per_asset
                    .entry(header[col].clone())
                    .or_default()
                    .insert(date, close)
                    .is_some()
                {
                    return Err(Error::Parse(format!("line {line}: duplicate date {date}")));
                }
            }
        }
    }
    per_asset
        .into_iter()
        .map(|(asset, obs)| {
            let (dates, closes) = obs.into_iter().unzip();
            PriceSeries::new(asset, dates, closes)
        })
        .collect()
}

fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| format!("bad date {s:?}: {e}"))
}

fn parse_close(s: &str, line: usize) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|e| Error::Parse(format!("line {line}: bad close {s:?}: {e}")))
}

/// Writes prices in long format.
pub fn write_prices_long(series: &[PriceSeries]) -> String {
    let mut rows: Vec<(NaiveDate, &str, f64)> = series
        .iter()
        .flat_map(|s| {
            s.timestamps()
                .iter()
                .zip(s.closes())
                .map(move |(d, c)| (*d, s.asset_id(), *c))
        })
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(b.1)));
    let mut out = String::from("date,asset,close\n");
    for (d, a, c) in rows {
        out.push_str(&format!("{d},{a},{c}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn returns_from_closes() {
        let r = compute_returns(&PriceSeries::undated("a", vec![100.0, 110.0]).unwrap()).unwrap();
        assert_abs_diff_eq!(r[0], 0.10, epsilon = 1e-15);

        let r = compute_returns(&PriceSeries::undated("a", vec![50.0; 3]).unwrap()).unwrap();
        assert_eq!(r, vec![0.0, 0.0]);

        let r =
            compute_returns(&PriceSeries::undated("a", vec![100.0, 110.0, 99.0]).unwrap()).unwrap();
        assert_abs_diff_eq!(r[0], 0.10, epsilon = 1e-15);
        assert_abs_diff_eq!(r[1], -0.10, epsilon = 1e-15);
    }

    #[test]
    fn returns_error_paths() {
        let one = PriceSeries::undated("a", vec![100.0]).unwrap();
        assert!(matches!(
            compute_returns(&one),
            Err(Error::InsufficientData { needed: 2, got: 1 })
        ));
        assert!(matches!(
            PriceSeries::undated("a", vec![1.0, 0.0]),
            Err(Error::InvalidPrice { index: 1, .. })
        ));
        assert!(matches!(
            simple_returns("a", &[1.0, -2.0]),
            Err(Error::InvalidPrice { .. })
        ));
    }

    #[test]
    fn series_rejects_unordered_dates() {
        let err = PriceSeries::new("a", vec![d(2020, 1, 2), d(2020, 1, 1)], vec![1.0, 1.0]);
        assert!(matches!(err, Err(Error::InvalidSeries(..))));
    }

    #[test]
    fn align_two_assets() {
        let a = PriceSeries::new(
            "b",
            vec![d(2020, 1, 1), d(2020, 1, 8), d(2020, 1, 15)],
            vec![1.0, 2.0, 3.0],
        )
        .unwrap();
        let b = PriceSeries::new(
            "a",
            vec![d(2020, 1, 1), d(2020, 1, 8), d(2020, 1, 15), d(2020, 1, 22)],
            vec![4.0, 2.0, 2.0, 9.0],
        )
        .unwrap();
        let m = align_assets(&[a, b]).unwrap();
        assert_eq!(m.n_assets(), 2);
        assert_eq!(m.periods(), 2);
        assert_eq!(m.probs(), &[0.5, 0.5]);
        assert_eq!(m.asset_ids(), &["a".to_string(), "b".to_string()]);
        assert_abs_diff_eq!(m.get(0, 0), -0.5);
        assert_abs_diff_eq!(m.get(1, 1), 0.5);
        assert_eq!(m.dates().unwrap(), &[d(2020, 1, 8), d(2020, 1, 15)]);
    }

    #[test]
    fn align_single_asset_uniform() {
        let closes = (0..51).map(|k| 100.0 + k as f64).collect();
        let m = align_assets(&[PriceSeries::undated("x", closes).unwrap()]).unwrap();
        assert_eq!(m.periods(), 50);
        assert!(m.probs().iter().all(|p| (*p - 0.02).abs() < 1e-15));
    }

    #[test]
    fn align_errors() {
        let a = PriceSeries::new("a", vec![d(2020, 1, 1), d(2020, 1, 2)], vec![1.0, 1.0]).unwrap();
        let b = PriceSeries::new("b", vec![d(2021, 1, 1), d(2021, 1, 2)], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            align_assets(&[a.clone(), b]),
            Err(Error::NoCommonDates)
        ));
        assert!(matches!(
            align_assets(&[a.clone(), a]),
            Err(Error::DuplicateAsset(_))
        ));
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(54, 50, 4, 4).unwrap().len(), 1);
        let plan = make_windows(58, 50, 4, 4).unwrap();
        assert_eq!(plan.len(), 2);
        assert_eq!(
            plan.windows[1],
            Window {
                in_start: 4,
                in_end: 54,
                out_start: 54,
                out_end: 58
            }
        );
        assert!(matches!(
            make_windows(53, 50, 4, 4),
            Err(Error::InsufficientData { .. })
        ));
        assert!(make_windows(53, 50, 0, 4).is_err());
    }

    #[test]
    fn parse_long_and_wide() {
        let long = "date,asset,close\n2020-01-08,b,2\n2020-01-01,a,1\n2020-01-01,b,1\n2020-01-08,a,3\n";
        let s = parse_prices(long).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].closes(), &[1.0, 3.0]);

        let wide = "date,x,y\n2020-01-01,1,5\n2020-01-08,2,\n2020-01-15,4,6\n";
        let s = parse_prices(wide).unwrap();
        assert_eq!(s[0].asset_id(), "x");
        assert_eq!(s[1].closes(), &[5.0, 6.0]);
        let m = align_assets(&s).unwrap();
        assert_eq!(m.periods(), 1);

        let round = parse_prices(&write_prices_long(&s)).unwrap();
        assert_eq!(round, s);
    }

    #[test]
    fn parse_reports_line() {
        let bad = "date,asset,close\n2020-01-01,a,1\n2020-01-08,a,zz\n";
        let msg = parse_prices(bad).unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }
}
