use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_model::Group;
use crate::quarter::Quarter;

/// Trading days per year in the equity-volatility window.
pub const VOL_WINDOW: usize = 250;

/// One row of quarterly fundamentals. Blank fields are gaps to be filled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundamentalRow {
    pub firm_id: String,
    pub quarter: Quarter,
    pub equity_value: Option<f64>,
    pub std_debt: Option<f64>,
    pub ltd_debt: Option<f64>,
    pub group: Group,
}

/// Everything a study reads: daily simple returns, quarterly fundamentals
/// with group labels, and quarterly risk-free rates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawInputs {
    /// Per firm, sorted by date.
    pub daily_returns: BTreeMap<String, Vec<(NaiveDate, f64)>>,
    /// Sorted by (firm_id, quarter).
    pub fundamentals: Vec<FundamentalRow>,
    pub rates: BTreeMap<Quarter, f64>,
}

fn input_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Input {
        path: path.display().to_string(),
        message: message.into(),
    }
}

#[derive(Deserialize)]
struct ReturnRow {
    firm_id: String,
    date: NaiveDate,
    #[serde(rename = "return")]
    value: f64,
}

#[derive(Deserialize)]
struct FundamentalCsvRow {
    firm_id: String,
    quarter: String,
    equity_value: Option<f64>,
    std_debt: Option<f64>,
    ltd_debt: Option<f64>,
    group: String,
}

#[derive(Deserialize)]
struct RateRow {
    quarter: String,
    rate: f64,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| input_error(path, e.to_string()))?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| input_error(path, format!("record {}: {e}", i + 1))))
        .collect()
}

impl RawInputs {
    /// Reads the three input CSV files (header row required).
    pub fn from_csv(returns: &Path, fundamentals: &Path, rates: &Path) -> Result<Self> {
        let mut daily_returns: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
        for row in read_rows::<ReturnRow>(returns)? {
            daily_returns
                .entry(row.firm_id)
                .or_default()
                .push((row.date, row.value));
        }
        let fundamentals = read_rows::<FundamentalCsvRow>(fundamentals)?
            .into_iter()
            .map(|row| {
                Ok(FundamentalRow {
                    quarter: row
                        .quarter
                        .parse()
                        .map_err(|e: Error| input_error(fundamentals, e.to_string()))?,
                    group: row
                        .group
                        .parse()
                        .map_err(|e: Error| input_error(fundamentals, e.to_string()))?,
                    firm_id: row.firm_id,
                    equity_value: row.equity_value,
                    std_debt: row.std_debt,
                    ltd_debt: row.ltd_debt,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rate_map = BTreeMap::new();
        for row in read_rows::<RateRow>(rates)? {
            let q: Quarter = row
                .quarter
                .parse()
                .map_err(|e: Error| input_error(rates, e.to_string()))?;
            if rate_map.insert(q, row.rate).is_some() {
                return Err(input_error(rates, format!("duplicate rate for {q}")));
            }
        }
        let inputs = Self::new(daily_returns, fundamentals, rate_map)?;
        Ok(inputs)
    }

    /// Sorts and validates.
    pub fn new(
        mut daily_returns: BTreeMap<String, Vec<(NaiveDate, f64)>>,
        mut fundamentals: Vec<FundamentalRow>,
        rates: BTreeMap<Quarter, f64>,
    ) -> Result<Self> {
        for (firm, series) in daily_returns.iter_mut() {
            series.sort_by_key(|(d, _)| *d);
            if series.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Domain(format!(
                    "duplicate return date for firm {firm}"
                )));
            }
            if series.iter().any(|(_, r)| !r.is_finite() || *r <= -1.0) {
                return Err(Error::Domain(format!(
                    "return out of range for firm {firm}"
                )));
            }
        }
        fundamentals.sort_by(|a, b| (&a.firm_id, a.quarter).cmp(&(&b.firm_id, b.quarter)));
        for w in fundamentals.windows(2) {
            if w[0].firm_id == w[1].firm_id {
                if w[0].quarter == w[1].quarter {
                    return Err(Error::Domain(format!(
                        "duplicate fundamentals row {} {}",
                        w[0].firm_id, w[0].quarter
                    )));
                }
                if w[0].group != w[1].group {
                    return Err(Error::Domain(format!(
                        "firm {} changes group",
                        w[0].firm_id
                    )));
                }
            }
        }
        for row in &fundamentals {
            let fields = [
                ("equity_value", row.equity_value),
                ("std_debt", row.std_debt),
                ("ltd_debt", row.ltd_debt),
            ];
            for (name, value) in fields {
                if let Some(v) = value {
                    let ok = v.is_finite()
                        && if name == "equity_value" {
                            v > 0.0
                        } else {
                            v >= 0.0
                        };
                    if !ok {
                        return Err(Error::Domain(format!(
                            "{name} = {v} invalid for {} {}",
                            row.firm_id, row.quarter
                        )));
                    }
                }
            }
        }
        if let Some((q, r)) = rates.iter().find(|(_, r)| !r.is_finite()) {
            return Err(Error::Domain(format!("rate {r} for {q} is not finite")));
        }
        Ok(Self {
            daily_returns,
            fundamentals,
            rates,
        })
    }

    pub fn group_labels(&self) -> BTreeMap<&str, Group> {
        self.fundamentals
            .iter()
            .map(|r| (r.firm_id.as_str(), r.group))
            .collect()
    }

    /// Writes the three CSV files in the layout [`RawInputs::from_csv`] reads.
    pub fn write_csv(&self, returns: &Path, fundamentals: &Path, rates: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(returns)?;
        w.write_record(["firm_id", "date", "return"])?;
        for (firm, series) in &self.daily_returns {
            for (date, r) in series {
                w.write_record([firm.as_str(), &date.to_string(), &r.to_string()])?;
            }
        }
        w.flush()?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_path(fundamentals)?;
        w.write_record([
            "firm_id",
            "quarter",
            "equity_value",
            "std_debt",
            "ltd_debt",
            "group",
        ])?;
        for row in &self.fundamentals {
            w.write_record([
                row.firm_id.clone(),
                row.quarter.to_string(),
                opt(row.equity_value),
                opt(row.std_debt),
                opt(row.ltd_debt),
                row.group.label().to_string(),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(rates)?;
        w.write_record(["quarter", "rate"])?;
        for (q, r) in &self.rates {
            w.write_record([q.to_string(), r.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Annualized equity volatility from the 250 returns strictly before
/// `as_of`: √((250/249) Σ (r_s − r̄)²).
pub fn estimate_equity_vol(returns: &[(NaiveDate, f64)], as_of: NaiveDate) -> Result<f64> {
    let end = returns.partition_point(|(d, _)| *d < as_of);
    if end < VOL_WINDOW {
        return Err(Error::InsufficientHistory {
            available: end,
            required: VOL_WINDOW,
        });
    }
    let window = &returns[end - VOL_WINDOW..end];
    let n = VOL_WINDOW as f64;
    let mean = window.iter().map(|(_, r)| r).sum::<f64>() / n;
    let ss: f64 = window.iter().map(|(_, r)| (r - mean) * (r - mean)).sum();
    Ok((n / (n - 1.0) * ss).sqrt())
}

/// Last date in `returns` on or before the quarter end.
pub fn as_of_date(returns: &[(NaiveDate, f64)], quarter: Quarter) -> Option<NaiveDate> {
    let end = quarter.end_date();
    let idx = returns.partition_point(|(d, _)| *d <= end);
    idx.checked_sub(1).map(|i| returns[i].0)
}

/// Short-term debt plus half the long-term debt.
pub fn default_point(std_debt: f64, ltd_debt: f64) -> f64 {
    std_debt + 0.5 * ltd_debt
}

/// A value after gap filling; `source` is the quarter it was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Filled {
    pub quarter: Quarter,
    pub value: f64,
    pub source: Quarter,
}

impl Filled {
    pub fn was_filled(&self) -> bool {
        self.quarter != self.source
    }
}

/// Fills each gap of one firm's field with the temporally nearest observed
/// value, taking the earlier one on ties. `series` must be sorted by quarter.
pub fn fill_missing(
    series: &[(Quarter, Option<f64>)],
    firm: &str,
    field: &str,
) -> Result<Vec<Filled>> {
    let observed: Vec<(Quarter, f64)> = series
        .iter()
        .filter_map(|(q, v)| v.map(|v| (*q, v)))
        .collect();
    if observed.is_empty() {
        return Err(Error::AllMissing {
            firm: firm.to_string(),
            field: field.to_string(),
        });
    }
    Ok(series
        .iter()
        .map(|&(quarter, value)| match value {
            Some(value) => Filled {
                quarter,
                value,
                source: quarter,
            },
            None => {
                // min_by_key keeps the first minimum, which is the earlier quarter.
                let &(source, value) = observed
                    .iter()
                    .min_by_key(|(q, _)| quarter.offset_to(*q).abs())
                    .expect("observed is non-empty");
                Filled {
                    quarter,
                    value,
                    source,
                }
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(s: &str) -> Quarter {
        s.parse().unwrap()
    }

    fn days(n: usize, f: impl Fn(usize) -> f64) -> Vec<(NaiveDate, f64)> {
        let start = NaiveDate::from_ymd_opt(2018, 1, 1).unwrap();
        (0..n)
            .map(|i| (start + chrono::Days::new(i as u64), f(i)))
            .collect()
    }

    #[test]
    fn constant_returns_have_zero_vol() {
        let r = days(300, |_| 0.002);
        let as_of = r[299].0;
        assert!(estimate_equity_vol(&r, as_of).unwrap() < 1e-15);
    }

    #[test]
    fn alternating_returns() {
        let r = days(251, |i| if i % 2 == 0 { 0.01 } else { -0.01 });
        let v = estimate_equity_vol(&r, r[250].0).unwrap();
        let expected = (250.0f64 / 249.0 * 250.0 * 1e-4).sqrt();
        assert!((v - expected).abs() < 1e-15, "{v}");
        assert!((v - 0.1584).abs() < 1e-4);
    }

    #[test]
    fn window_excludes_the_as_of_day() {
        let mut r = days(251, |i| if i % 2 == 0 { 0.01 } else { -0.01 });
        r[250].1 = 0.5;
        let a = estimate_equity_vol(&r, r[250].0).unwrap();
        assert!((a - 0.1584).abs() < 1e-4);
        let err = estimate_equity_vol(&r, r[249].0).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientHistory {
                available: 249,
                required: 250
            }
        ));
    }

    #[test]
    fn as_of_is_last_trading_day_in_quarter() {
        let r = days(120, |_| 0.0);
        // 2018-01-01 + 89 days = 2018-03-31
        assert_eq!(
            as_of_date(&r, q("2018Q1")),
            Some(NaiveDate::from_ymd_opt(2018, 3, 31).unwrap())
        );
        let weekdays: Vec<_> = r
            .iter()
            .copied()
            .filter(|(d, _)| d.format("%u").to_string().parse::<u8>().unwrap() <= 5)
            .collect();
        // 2018-03-31 is a Saturday
        assert_eq!(
            as_of_date(&weekdays, q("2018Q1")),
            Some(NaiveDate::from_ymd_opt(2018, 3, 30).unwrap())
        );
        assert_eq!(as_of_date(&r, q("2017Q4")), None);
    }

    #[test]
    fn default_point_rule() {
        assert_eq!(default_point(2.0, 4.0), 4.0);
        assert_eq!(default_point(0.0, 0.0), 0.0);
        assert_eq!(default_point(7.5, 0.0), 7.5);
    }

    fn quarters(n: usize) -> Vec<Quarter> {
        let mut out = vec![q("2019Q1")];
        for _ in 1..n {
            let last = *out.last().unwrap();
            out.push(last.next());
        }
        out
    }

    #[test]
    fn fill_nearest_and_ties() {
        let qs = quarters(8);
        // observed at indices 3, 4, 7; gap at 5 is nearest to 4; gap at 6 is nearest to 7.
        let values = [
            None,
            None,
            None,
            Some(3.0),
            Some(4.0),
            None,
            None,
            Some(7.0),
        ];
        let series: Vec<_> = qs.iter().copied().zip(values).collect();
        let filled = fill_missing(&series, "A", "std_debt").unwrap();
        let got: Vec<f64> = filled.iter().map(|f| f.value).collect();
        assert_eq!(got, vec![3.0, 3.0, 3.0, 3.0, 4.0, 4.0, 7.0, 7.0]);
        assert_eq!(filled[5].source, qs[4]);
        assert!(filled[5].was_filled() && !filled[4].was_filled());

        // equidistant gap at 4 between 3 and 5 takes the earlier value
        let values = [None, None, None, Some(3.0), None, Some(5.0)];
        let series: Vec<_> = qs.iter().copied().zip(values).collect();
        let filled = fill_missing(&series, "A", "std_debt").unwrap();
        assert_eq!(filled[4].value, 3.0);
        assert_eq!(filled[4].source, qs[3]);
    }

    #[test]
    fn fill_without_gaps_is_identity() {
        let series: Vec<_> = quarters(4)
            .into_iter()
            .zip([1.0, 2.0, 3.0, 4.0].map(Some))
            .collect();
        let filled = fill_missing(&series, "A", "x").unwrap();
        assert!(filled
            .iter()
            .zip(&series)
            .all(|(f, (q, v))| f.quarter == *q && Some(f.value) == *v && !f.was_filled()));
    }

    #[test]
    fn fill_all_missing_fails() {
        let series: Vec<_> = quarters(3).into_iter().map(|q| (q, None)).collect();
        assert!(matches!(
            fill_missing(&series, "A", "ltd_debt"),
            Err(Error::AllMissing { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut returns = BTreeMap::new();
        returns.insert("F1".to_string(), days(3, |i| 0.001 * i as f64 - 0.0005));
        let fundamentals = vec![
            FundamentalRow {
                firm_id: "F1".into(),
                quarter: q("2018Q1"),
                equity_value: Some(1.5e9),
                std_debt: None,
                ltd_debt: Some(2.0e8),
                group: Group::St,
            },
            FundamentalRow {
                firm_id: "F1".into(),
                quarter: q("2018Q2"),
                equity_value: Some(1.25e9),
                std_debt: Some(3.0e8),
                ltd_debt: Some(2.0e8),
                group: Group::St,
            },
        ];
        let rates = BTreeMap::from([(q("2018Q1"), 0.03), (q("2018Q2"), 0.0275)]);
        let inputs = RawInputs::new(returns, fundamentals, rates).unwrap();
        let p = |name: &str| dir.path().join(name);
        inputs
            .write_csv(&p("r.csv"), &p("f.csv"), &p("q.csv"))
            .unwrap();
        let back = RawInputs::from_csv(&p("r.csv"), &p("f.csv"), &p("q.csv")).unwrap();
        assert_eq!(back, inputs);
    }

    #[test]
    fn malformed_csv_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.csv");
        std::fs::write(&path, "quarter,rate\n2019Q1,abc\n").unwrap();
        let other = dir.path().join("missing.csv");
        let err = RawInputs::from_csv(&other, &other, &path).unwrap_err();
        assert!(matches!(err, Error::Input { .. }), "{err}");
        let err = read_rows::<RateRow>(&path).err().unwrap();
        assert!(matches!(err, Error::Input { path: p, .. } if p.ends_with("q.csv")));
    }
}
