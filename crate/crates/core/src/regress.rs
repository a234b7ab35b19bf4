//! Ordinary least squares with coefficient inference and residual
//! diagnostics.
//!
//! Fits always include an intercept. Coefficients come from a Householder
//! QR factorization of the design; standard errors use the residual
//! variance times the diagonal of `(XᵀX)⁻¹ = R⁻¹R⁻ᵀ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::special::{f_upper, normal_quantile, t_two_sided};

/// Relative singular-value cutoff below which a design is rank deficient.
pub const COLLINEARITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegressError {
    #[error("need more observations than parameters: n = {n}, p = {p} (require n > p + 1)")]
    TooFewObservations { n: usize, p: usize },
    #[error("design is rank deficient; collinear columns: {}", .columns.join(", "))]
    Collinear { columns: Vec<String> },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("degrees of freedom must be at least 1, got {0}")]
    DegreesOfFreedom(i64),
    #[error("empty test set")]
    EmptyTestSet,
}

/// Predictor columns plus response. The intercept column is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    x: DMatrix<f64>,
    y: DVector<f64>,
    names: Vec<String>,
}

impl DesignMatrix {
    /// Builds a design from predictor columns (each of length n).
    pub fn from_columns(columns: &[Vec<f64>], response: &[f64]) -> Result<Self, RegressError> {
        let n = response.len();
        if let Some(bad) = columns.iter().position(|c| c.len() != n) {
            return Err(RegressError::Shape(format!(
                "column {bad} has {} rows, response has {n}",
                columns[bad].len()
            )));
        }
        let x = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
        let names = (1..=columns.len()).map(|j| format!("x{j}")).collect();
        Self::from_parts(x, DVector::from_column_slice(response), names)
    }

    pub fn from_rows(rows: &[Vec<f64>], response: &[f64]) -> Result<Self, RegressError> {
        let n = response.len();
        if rows.len() != n {
            return Err(RegressError::Shape(format!("{} rows vs {n} responses", rows.len())));
        }
        let p = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != p) {
            return Err(RegressError::Shape("ragged rows".into()));
        }
        let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        Self::from_parts(x, DVector::from_column_slice(response), names)
    }

    fn from_parts(x: DMatrix<f64>, y: DVector<f64>, names: Vec<String>) -> Result<Self, RegressError> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(RegressError::NonFinite("predictors"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(RegressError::NonFinite("response"));
        }
        Ok(DesignMatrix { x, y, names })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self, RegressError> {
        if names.len() != self.p() {
            return Err(RegressError::Shape(format!(
                "{} names for {} columns",
                names.len(),
                self.p()
            )));
        }
        self.names = names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn response(&self) -> &[f64] {
        self.y.as_slice()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.x.column(j).iter().copied().collect()
    }

    /// Design restricted to the given predictor columns (same response).
    pub fn select(&self, cols: &[usize]) -> DesignMatrix {
        let x = self.x.select_columns(cols);
        let names = cols.iter().map(|&j| self.names[j].clone()).collect();
        DesignMatrix {
            x,
            y: self.y.clone(),
            names,
        }
    }

    /// Design restricted to the given rows.
    pub fn rows(&self, rows: &[usize]) -> DesignMatrix {
        DesignMatrix {
            x: self.x.select_rows(rows),
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
            names: self.names.clone(),
        }
    }

    /// Replaces the response, keeping predictors.
    pub fn with_response(&self, response: &[f64]) -> Result<DesignMatrix, RegressError> {
        if response.len() != self.n() {
            return Err(RegressError::Shape("response length".into()));
        }
        Self::from_parts(self.x.clone(), DVector::from_column_slice(response), self.names.clone())
    }
}

/// Overall F test outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FTest {
    Value {
        f: f64,
        p_value: f64,
    },
    /// R² = 1: the statistic is infinite.
    Saturated,
}

impl FTest {
    pub fn statistic(&self) -> f64 {
        match *self {
            FTest::Value { f, .. } => f,
            FTest::Saturated => f64::INFINITY,
        }
    }

    pub fn p_value(&self) -> f64 {
        match *self {
            FTest::Value { p_value, .. } => p_value,
            FTest::Saturated => 0.0,
        }
    }
}

/// One fitted model. Index 0 of the coefficient vectors is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub n: usize,
    pub p: usize,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub rss: f64,
    pub tss: f64,
    pub residual_std_error: f64,
    pub df_residual: usize,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    pub f_test: FTest,
}

impl FitResult {
    pub fn f_statistic(&self) -> f64 {
        self.f_test.statistic()
    }

    pub fn f_p_value(&self) -> f64 {
        self.f_test.p_value()
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        debug_assert_eq!(row.len(), self.p);
        self.coefficients[0] + row.iter().zip(&self.coefficients[1..]).map(|(x, b)| x * b).sum::<f64>()
    }

    pub fn predict(&self, design: &DesignMatrix) -> Vec<f64> {
        let mut out = vec![self.coefficients[0]; design.n()];
        for (j, b) in self.coefficients[1..].iter().enumerate() {
            for (i, o) in out.iter_mut().enumerate() {
                *o += b * design.x[(i, j)];
            }
        }
        out
    }

    /// Two-sided confidence intervals `b ± t* · SE` at the given level.
    pub fn confidence_intervals(&self, level: f64) -> Vec<(f64, f64)> {
        let crit = t_critical(1.0 - level, self.df_residual as f64);
        self.coefficients
            .iter()
            .zip(&self.std_errors)
            .map(|(b, se)| (b - crit * se, b + crit * se))
            .collect()
    }

    /// Regression equation in the form `7.83 + 11.40 I.6 + 6.68 II.1`.
    pub fn equation(&self, decimals: usize) -> String {
        let mut s = format!("{:.*}", decimals, self.coefficients[0]);
        for (b, name) in self.coefficients[1..].iter().zip(&self.names) {
            s.push_str(&format!(" + {:.*} {}", decimals, b, name));
        }
        s
    }
}

/// Least squares fit with full inference.
pub fn fit_ols(design: &DesignMatrix) -> Result<FitResult, RegressError> {
    let n = design.n();
    let p = design.p();
    if n <= p + 1 {
        return Err(RegressError::TooFewObservations { n, p });
    }
    let k = p + 1;
    let mut x1 = DMatrix::from_element(n, k, 1.0);
    x1.view_mut((0, 1), (n, p)).copy_from(&design.x);
    check_rank(&x1, &design.names)?;

    let qr = x1.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let qty = q.transpose() * &design.y;
    let coef = r.solve_upper_triangular(&qty).ok_or_else(|| RegressError::Collinear {
        columns: design.names.clone(),
    })?;
    let resid = &design.y - &x1 * &coef;
    let rss = resid.norm_squared();
    let ybar = design.y.mean();
    let tss = design.y.iter().map(|v| (v - ybar).powi(2)).sum::<f64>();

    let df = n - k;
    let sigma2 = rss / df as f64;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| RegressError::Collinear {
            columns: design.names.clone(),
        })?;
    let std_errors: Vec<f64> = (0..k).map(|i| (sigma2 * r_inv.row(i).norm_squared()).sqrt()).collect();
    let coefficients: Vec<f64> = coef.iter().copied().collect();
    let (t_values, p_values): (Vec<f64>, Vec<f64>) = coefficients
        .iter()
        .zip(&std_errors)
        .map(|(&b, &se)| t_and_p(b, se, df as f64))
        .unzip();

    let r_squared = if tss > 0.0 {
        (1.0 - rss / tss).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let adj_r_squared = 1.0 - (1.0 - r_squared) * (n as f64 - 1.0) / df as f64;
    let f_test = f_test(r_squared, n, p)?;

    let mut names = design.names.clone();
    names.truncate(p);
    Ok(FitResult {
        names,
        n,
        p,
        coefficients,
        std_errors,
        t_values,
        p_values,
        rss,
        tss,
        residual_std_error: sigma2.sqrt(),
        df_residual: df,
        r_squared,
        adj_r_squared,
        f_test,
    })
}

fn t_and_p(b: f64, se: f64, df: f64) -> (f64, f64) {
    if se > 0.0 {
        let t = b / se;
        (t, t_two_sided(t, df))
    } else if b == 0.0 {
        (0.0, 1.0)
    } else {
        (f64::INFINITY.copysign(b), 0.0)
    }
}

fn check_rank(x1: &DMatrix<f64>, names: &[String]) -> Result<(), RegressError> {
    let label = |j: usize| {
        if j == 0 {
            "(intercept)".to_string()
        } else {
            names[j - 1].clone()
        }
    };
    let mut scaled = x1.clone();
    for j in 0..scaled.ncols() {
        let norm = scaled.column(j).norm();
        if norm == 0.0 {
            return Err(RegressError::Collinear {
                columns: vec![label(j)],
            });
        }
        scaled.column_mut(j).unscale_mut(norm);
    }
    let svd = scaled.svd(false, true);
    let sv = &svd.singular_values;
    let (imin, smin) = sv
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, &s)| (i, s))
        .unwrap();
    let smax = sv.max();
    if smin / smax >= COLLINEARITY_TOL {
        return Ok(());
    }
    // columns that carry weight in the near-null direction
    let v_t = svd.v_t.expect("requested V");
    let dir = v_t.row(imin);
    let peak = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let columns = dir
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > 1e-3 * peak)
        .map(|(j, _)| label(j))
        .collect();
    Err(RegressError::Collinear { columns })
}

/// `P(|T_df| >= |t|)`.
pub fn two_sided_t_pvalue(t: f64, df: i64) -> Result<f64, RegressError> {
    if df < 1 {
        return Err(RegressError::DegreesOfFreedom(df));
    }
    Ok(t_two_sided(t, df as f64))
}

/// Critical value `t*` with `P(|T_df| >= t*) = alpha`, by bisection.
pub fn t_critical(alpha: f64, df: f64) -> f64 {
    if alpha >= 1.0 {
        return 0.0;
    }
    // normal quantile is a lower bound for t*
    let mut lo = normal_quantile(1.0 - alpha / 2.0).max(0.0);
    let mut hi = lo.max(1.0);
    while t_two_sided(hi, df) > alpha {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_two_sided(mid, df) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Overall F test of `p` predictors on `n` observations.
pub fn f_test(r_squared: f64, n: usize, p: usize) -> Result<FTest, RegressError> {
    let df = n as i64 - p as i64 - 1;
    if df < 1 {
        return Err(RegressError::DegreesOfFreedom(df));
    }
    if p == 0 || r_squared <= 0.0 {
        return Ok(FTest::Value { f: 0.0, p_value: 1.0 });
    }
    if r_squared >= 1.0 {
        return Ok(FTest::Saturated);
    }
    let f = (r_squared / p as f64) / ((1.0 - r_squared) / df as f64);
    Ok(FTest::Value {
        f,
        p_value: f_upper(f, p as f64, df as f64),
    })
}

fn check_test_shape(fit: &FitResult, test: &DesignMatrix) -> Result<(), RegressError> {
    if test.p() != fit.p {
        return Err(RegressError::Shape(format!(
            "fit has {} predictors, test design has {}",
            fit.p,
            test.p()
        )));
    }
    if test.n() == 0 {
        return Err(RegressError::EmptyTestSet);
    }
    Ok(())
}

/// Mean absolute prediction error on held-out rows, in response units.
pub fn mae(fit: &FitResult, test: &DesignMatrix) -> Result<f64, RegressError> {
    check_test_shape(fit, test)?;
    let pred = fit.predict(test);
    let total: f64 = pred.iter().zip(test.response()).map(|(p, y)| (p - y).abs()).sum();
    Ok(total / test.n() as f64)
}

/// Mean absolute percentage error over rows with a non-zero response;
/// `None` when every response is zero.
pub fn mape(fit: &FitResult, test: &DesignMatrix) -> Result<Option<f64>, RegressError> {
    check_test_shape(fit, test)?;
    let pred = fit.predict(test);
    let terms: Vec<f64> = pred
        .iter()
        .zip(test.response())
        .filter(|(_, &y)| y != 0.0)
        .map(|(p, y)| ((p - y) / y).abs() * 100.0)
        .collect();
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some(terms.iter().sum::<f64>() / terms.len() as f64))
}

/// Matched-pairs t test on `before - after`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub n: usize,
    pub t: f64,
    pub df: usize,
    pub p: f64,
    /// `t / √n`.
    pub cohen_d: f64,
    pub mean_diff: f64,
    pub sd_diff: f64,
    /// Zero spread with a non-zero mean difference: infinite t.
    pub degenerate: bool,
}

pub fn paired_t(before: &[f64], after: &[f64]) -> Result<PairedTestResult, RegressError> {
    if before.len() != after.len() {
        return Err(RegressError::Shape(format!(
            "{} before values vs {} after values",
            before.len(),
            after.len()
        )));
    }
    let n = before.len();
    if n < 2 {
        return Err(RegressError::TooFewObservations { n, p: 0 });
    }
    if before.iter().chain(after).any(|v| !v.is_finite()) {
        return Err(RegressError::NonFinite("paired samples"));
    }
    let diffs: Vec<f64> = before.iter().zip(after).map(|(b, a)| b - a).collect();
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    let df = n - 1;
    let base = PairedTestResult {
        n,
        t: 0.0,
        df,
        p: 1.0,
        cohen_d: 0.0,
        mean_diff: mean,
        sd_diff: sd,
        degenerate: false,
    };
    if sd == 0.0 {
        if mean == 0.0 {
            return Ok(base);
        }
        let t = f64::INFINITY.copysign(mean);
        return Ok(PairedTestResult {
            t,
            p: 0.0,
            cohen_d: t,
            degenerate: true,
            ..base
        });
    }
    let t = mean / (sd / nf.sqrt());
    Ok(PairedTestResult {
        t,
        p: t_two_sided(t, df as f64),
        cohen_d: t / nf.sqrt(),
        ..base
    })
}

/// Variance inflation factor of column `j`; `f64::INFINITY` flags a
/// column that is an exact linear combination of the others.
pub fn vif(design: &DesignMatrix, j: usize) -> Result<f64, RegressError> {
    let p = design.p();
    if p < 2 {
        return Err(RegressError::Shape(format!("VIF needs at least 2 columns, got {p}")));
    }
    if j >= p {
        return Err(RegressError::Shape(format!("column {j} out of range")));
    }
    let others: Vec<usize> = (0..p).filter(|&c| c != j).collect();
    let aux = design.select(&others).with_response(&design.column(j))?;
    let fit = fit_ols(&aux)?;
    if fit.tss == 0.0 || fit.rss <= fit.tss * 1e-12 {
        return Ok(f64::INFINITY);
    }
    Ok(fit.tss / fit.rss)
}

pub fn vif_all(design: &DesignMatrix) -> Result<Vec<f64>, RegressError> {
    (0..design.p()).map(|j| vif(design, j)).collect()
}

/// Residual diagnostics for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    /// `(Φ⁻¹((i - 0.5)/n), i-th smallest residual)`.
    pub qq_pairs: Vec<(f64, f64)>,
}

pub fn diagnostics(fit: &FitResult, design: &DesignMatrix) -> Diagnostics {
    let fitted = fit.predict(design);
    let residuals: Vec<f64> = design.response().iter().zip(&fitted).map(|(y, f)| y - f).collect();
    let mut sorted = residuals.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let qq_pairs = sorted
        .iter()
        .enumerate()
        .map(|(i, &r)| (normal_quantile((i as f64 + 0.5) / n), r))
        .collect();
    Diagnostics {
        fitted,
        residuals,
        qq_pairs,
    }
}
