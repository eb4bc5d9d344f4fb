//! Forecast error metrics per horizon and averaged across horizons.

use std::fmt::Write as _;

use crate::data::{WindowSample, HORIZONS};
use crate::error::{Result, SemfError};

/// Floor on `|y|` denominators.
pub const DENOM_FLOOR: f64 = 1e-8;

fn check_pair(y: &[f64], yhat: &[f64], min_len: usize) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(SemfError::shape("metric", &[y.len()], &[yhat.len()]));
    }
    if y.len() < min_len {
        return Err(SemfError::contract(format!("metric needs at least {min_len} values, got {}", y.len())));
    }
    Ok(())
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, 1)?;
    let n = y.len() as f64;
    Ok((y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n).sqrt())
}

/// `mean|y - yhat| / mean|y|`.
pub fn rmae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, 1)?;
    let n = y.len() as f64;
    let mae = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let scale = y.iter().map(|a| a.abs()).sum::<f64>() / n;
    Ok(mae / scale.max(DENOM_FLOOR))
}

/// Mean absolute percentage error as a fraction.
pub fn mape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, 1)?;
    let n = y.len() as f64;
    Ok(y.iter()
        .zip(yhat)
        .map(|(a, b)| (a - b).abs() / a.abs().max(DENOM_FLOOR))
        .sum::<f64>()
        / n)
}

/// Coefficient of determination; `None` when `y` has zero variance.
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<Option<f64>> {
    check_pair(y, yhat, 2)?;
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot = y.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>();
    if ss_tot == 0.0 {
        return Ok(None);
    }
    let ss_res = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    Ok(Some(1.0 - ss_res / ss_tot))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonMetrics {
    pub rmse: f64,
    pub rmae: f64,
    pub mape: f64,
    pub r2: Option<f64>,
}

/// Scale on which a report's errors are expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Price,
    Standardized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub horizons: Vec<usize>,
    pub per_horizon: Vec<HorizonMetrics>,
    pub averaged: HorizonMetrics,
    pub n_samples: usize,
    pub unit: Unit,
}

impl MetricsReport {
    /// `y[i][k]` and `yhat[i][k]`: sample `i`, horizon `k`, in price units.
    pub fn from_predictions(y: &[Vec<f64>], yhat: &[Vec<f64>], horizons: &[usize]) -> Result<Self> {
        if y.is_empty() {
            return Err(SemfError::contract("cannot evaluate an empty split"));
        }
        if y.len() != yhat.len() {
            return Err(SemfError::shape("metrics", &[y.len()], &[yhat.len()]));
        }
        let k = horizons.len();
        if let Some(bad) = y.iter().chain(yhat).find(|r| r.len() != k) {
            return Err(SemfError::shape("metrics", &[bad.len()], &[k]));
        }
        let per_horizon = (0..k)
            .map(|h| {
                let col: Vec<f64> = y.iter().map(|r| r[h]).collect();
                let pred: Vec<f64> = yhat.iter().map(|r| r[h]).collect();
                Ok(HorizonMetrics {
                    rmse: rmse(&col, &pred)?,
                    rmae: rmae(&col, &pred)?,
                    mape: mape(&col, &pred)?,
                    r2: if col.len() >= 2 { r2(&col, &pred)? } else { None },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let avg = |f: fn(&HorizonMetrics) -> f64| per_horizon.iter().map(f).sum::<f64>() / k as f64;
        let r2_avg = per_horizon
            .iter()
            .map(|m| m.r2)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / k as f64);
        Ok(Self {
            horizons: horizons.to_vec(),
            averaged: HorizonMetrics {
                rmse: avg(|m| m.rmse),
                rmae: avg(|m| m.rmae),
                mape: avg(|m| m.mape),
                r2: r2_avg,
            },
            per_horizon,
            n_samples: y.len(),
            unit: Unit::Price,
        })
    }

    /// `horizon,rmse,rmae,mape,r2` rows plus an `avg` row; undefined r2 is `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,rmse,rmae,mape,r2\n");
        let labels = self.horizons.iter().map(|h| h.to_string()).chain(std::iter::once("avg".to_string()));
        for (label, m) in labels.zip(self.per_horizon.iter().chain(std::iter::once(&self.averaged))) {
            let _ = writeln!(out, "{label},{},{},{},{}", m.rmse, m.rmae, m.mape, fmt_r2(m.r2, None));
        }
        out
    }

    /// Aligned text table; `percent` shows MAPE multiplied by 100.
    pub fn to_table(&self, percent: bool) -> String {
        let mut out = String::new();
        let mape_head = if percent { "MAPE(%)" } else { "MAPE" };
        let _ = writeln!(out, "{:>8} {:>12} {:>10} {:>10} {:>10}", "horizon", "RMSE", "RMAE", mape_head, "R2");
        let labels = self.horizons.iter().map(|h| h.to_string()).chain(std::iter::once("avg".to_string()));
        for (label, m) in labels.zip(self.per_horizon.iter().chain(std::iter::once(&self.averaged))) {
            let mp = if percent { m.mape * 100.0 } else { m.mape };
            let _ = writeln!(
                out,
                "{label:>8} {:>12.4} {:>10.4} {mp:>10.4} {:>10}",
                m.rmse,
                m.rmae,
                fmt_r2(m.r2, Some(4))
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "horizon,rmse,rmae,mape,r2")) => {}
            _ => return Err(SemfError::Parse { line: 1, msg: "bad metrics header".into() }),
        }
        let mut horizons = Vec::new();
        let mut rows = Vec::new();
        let mut averaged = None;
        for (i, line) in lines {
            let line_no = i as u64 + 1;
            let err = |msg: &str| SemfError::Parse { line: line_no, msg: msg.into() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err("expected 5 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            let m = HorizonMetrics {
                rmse: num(f[1])?,
                rmae: num(f[2])?,
                mape: num(f[3])?,
                r2: if f[4] == "NA" { None } else { Some(num(f[4])?) },
            };
            if f[0] == "avg" {
                averaged = Some(m);
            } else {
                horizons.push(f[0].parse().map_err(|_| err("bad horizon"))?);
                rows.push(m);
            }
        }
        Ok(Self {
            horizons,
            per_horizon: rows,
            averaged: averaged.ok_or_else(|| SemfError::Parse { line: 0, msg: "missing avg row".into() })?,
            n_samples: 0,
            unit: Unit::Price,
        })
    }
}

fn fmt_r2(r2: Option<f64>, digits: Option<usize>) -> String {
    match (r2, digits) {
        (None, _) => "NA".to_string(),
        (Some(v), Some(d)) => format!("{v:.d$}"),
        (Some(v), None) => v.to_string(),
    }
}

/// Predicts `y[t + h] = y[t]` for every horizon.
pub fn persistence_baseline(samples: &[WindowSample]) -> Result<MetricsReport> {
    let y: Vec<Vec<f64>> = samples.iter().map(|s| s.raw_targets.clone()).collect();
    let yhat: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let last = *s.history.last().expect("non-empty history");
            vec![last; s.raw_targets.len()]
        })
        .collect();
    let horizons = if samples.first().map(|s| s.raw_targets.len()) == Some(HORIZONS.len()) {
        HORIZONS.to_vec()
    } else {
        (1..=samples.first().map(|s| s.raw_targets.len()).unwrap_or(0)).collect()
    };
    MetricsReport::from_predictions(&y, &yhat, &horizons)
}
