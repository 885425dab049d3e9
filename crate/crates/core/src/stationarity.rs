//! Augmented Dickey-Fuller unit-root test (constant, no trend).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::BreathInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagPolicy {
    /// `floor(12 · (n/100)^(1/4))`.
    Schwert,
    Fixed(usize),
}

impl LagPolicy {
    pub fn lag_for(self, n: usize) -> usize {
        match self {
            LagPolicy::Schwert => (12.0 * (n as f64 / 100.0).powf(0.25)).floor() as usize,
            LagPolicy::Fixed(l) => l,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalValues {
    pub p01: f64,
    pub p05: f64,
    pub p10: f64,
}

// MacKinnon (2010) response surface, constant-only case: [β∞, β1, β2, β3].
const MACKINNON_C_01: [f64; 4] = [-3.43035, -6.5393, -16.786, -79.433];
const MACKINNON_C_05: [f64; 4] = [-2.86154, -2.8903, -4.234, -40.040];
const MACKINNON_C_10: [f64; 4] = [-2.56677, -1.5384, -2.809, 0.0];

fn surface(b: &[f64; 4], t: f64) -> f64 {
    b[0] + b[1] / t + b[2] / (t * t) + b[3] / (t * t * t)
}

impl CriticalValues {
    pub fn for_sample_size(n: usize) -> Self {
        let t = n as f64;
        Self {
            p01: surface(&MACKINNON_C_01, t),
            p05: surface(&MACKINNON_C_05, t),
            p10: surface(&MACKINNON_C_10, t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdfResult {
    pub test_statistic: f64,
    pub lag_order: usize,
    pub n_effective: usize,
    pub reject_at_p01: bool,
    pub critical_values: CriticalValues,
}

/// OLS fit of `Δy_t = α + β·y_{t−1} + Σ γ_i·Δy_{t−i}`. Coefficients are ordered
/// `[α, β, γ_1, …, γ_L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdfRegression {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub rss: f64,
    pub n_effective: usize,
}

pub fn adf_regression(series: &[f64], lag: usize) -> Result<AdfRegression> {
    let n = series.len();
    if n <= lag + 10 {
        return Err(Error::TooShort {
            needed: lag + 11,
            got: n,
        });
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("adf series"));
    }
    let diff: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    let rows = diff.len() - lag;
    let cols = lag + 2;
    // Row r regresses diff[r + lag] (i.e. Δy at t = r + lag + 1).
    let x = DMatrix::from_fn(rows, cols, |r, c| {
        let t = r + lag;
        match c {
            0 => 1.0,
            1 => series[t],
            c => diff[t - (c - 1)],
        }
    });
    let y = DVector::from_fn(rows, |r, _| diff[r + lag]);

    let qr = x.clone().qr();
    let r_mat = qr.r();
    let scale = (0..cols).map(|i| r_mat[(i, i)].abs()).fold(0.0, f64::max);
    if (0..cols).any(|i| r_mat[(i, i)].abs() <= 1e-10 * scale) {
        return Err(Error::RankDeficient);
    }
    let qty = qr.q().transpose() * &y;
    let beta = r_mat
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficient)?;
    let resid = &y - &x * &beta;
    let rss = resid.norm_squared();
    let dof = rows
        .checked_sub(cols)
        .filter(|&d| d > 0)
        .ok_or(Error::TooShort {
            needed: cols + 1,
            got: rows,
        })?;
    let sigma2 = rss / dof as f64;
    let r_inv = r_mat
        .solve_upper_triangular(&DMatrix::identity(cols, cols))
        .ok_or(Error::RankDeficient)?;
    let std_errors = (0..cols)
        .map(|i| (sigma2 * r_inv.row(i).norm_squared()).sqrt())
        .collect();
    Ok(AdfRegression {
        coefficients: beta.iter().copied().collect(),
        std_errors,
        rss,
        n_effective: rows,
    })
}

pub fn adf_test(series: &[f64], lag: LagPolicy) -> Result<AdfResult> {
    let n = series.len();
    let lag_order = lag.lag_for(n);
    if n <= lag_order + 10 {
        return Err(Error::TooShort {
            needed: lag_order + 11,
            got: n,
        });
    }
    if series.iter().all(|&v| v == series[0]) {
        return Err(Error::Degenerate("constant series".into()));
    }
    let first_diff = series[1] - series[0];
    if series.windows(2).all(|w| w[1] - w[0] == first_diff) {
        // Exact linear drift: no mean reversion at all, β = 0.
        let critical_values = CriticalValues::for_sample_size(n - 1);
        return Ok(AdfResult {
            test_statistic: 0.0,
            lag_order: 0,
            n_effective: n - 1,
            reject_at_p01: false,
            critical_values,
        });
    }
    let reg = adf_regression(series, lag_order)?;
    let test_statistic = reg.coefficients[1] / reg.std_errors[1];
    if !test_statistic.is_finite() {
        return Err(Error::Degenerate("zero residual variance".into()));
    }
    let critical_values = CriticalValues::for_sample_size(reg.n_effective);
    Ok(AdfResult {
        test_statistic,
        lag_order,
        n_effective: reg.n_effective,
        reject_at_p01: test_statistic < critical_values.p01,
        critical_values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationarityReport {
    pub total: usize,
    pub rejected_at_p01: usize,
    pub skipped: usize,
    /// Per series: id and either the test result or the reason it was skipped.
    pub rows: Vec<(u64, std::result::Result<AdfResult, String>)>,
}

impl StationarityReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "total,rejected,skipped\n{},{},{}\n",
            self.total, self.rejected_at_p01, self.skipped
        );
        out.push_str("id,statistic,lag,n_effective,reject_p01\n");
        for (id, row) in &self.rows {
            match row {
                Ok(r) => out.push_str(&format!(
                    "{id},{},{},{},{}\n",
                    r.test_statistic, r.lag_order, r.n_effective, r.reject_at_p01
                )),
                Err(e) => out.push_str(&format!("{id},skipped,,,{e}\n")),
            }
        }
        out
    }
}

/// Runs the test on each series; series the test cannot handle are tallied as skipped.
pub fn report_series<'a>(
    series: impl IntoParallelIterator<Item = (u64, &'a [f64])>,
    lag: LagPolicy,
) -> StationarityReport {
    let rows: Vec<(u64, std::result::Result<AdfResult, String>)> = series
        .into_par_iter()
        .map(|(id, s)| (id, adf_test(s, lag).map_err(|e| e.to_string())))
        .collect();
    let skipped = rows.iter().filter(|(_, r)| r.is_err()).count();
    let rejected = rows
        .iter()
        .filter(|(_, r)| matches!(r, Ok(a) if a.reject_at_p01))
        .count();
    StationarityReport {
        total: rows.len() - skipped,
        rejected_at_p01: rejected,
        skipped,
        rows,
    }
}

pub fn stationarity_report(
    instances: &[BreathInstance],
    channel: usize,
    lag: LagPolicy,
) -> Result<StationarityReport> {
    if instances.is_empty() {
        return Err(Error::Empty("no instances for stationarity report"));
    }
    let series = instances
        .iter()
        .map(|inst| {
            inst.channels
                .get(channel)
                .map(|c| (inst.id, c.as_slice()))
                .ok_or_else(|| Error::InvalidParameter(format!("channel {channel} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report_series(series, lag))
}
